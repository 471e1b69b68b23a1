//! Report files: config echo, metric tables, summaries and plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use feddis_core::metrics::Metrics;
use plotters::prelude::*;
use serde_json::{json, Value};

use crate::error::{LabError, Result};
use crate::experiment::{MetricRecord, ReportBundle};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ROUNDS_FILE: &str = "rounds.csv";
pub const SUMMARY_MD: &str = "summary.md";
pub const SUMMARY_JSON: &str = "summary.json";
pub const MAE_PLOT: &str = "mae.svg";
pub const RMSE_PLOT: &str = "rmse.svg";
pub const METRICS_HEADER: &str = "round,split,client_id,mae,rmse,mape_pct,seconds";

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| LabError::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "NA".into()
    }
}

fn mape(m: &Metrics) -> String {
    m.mape.map_or_else(|| "NA".into(), num)
}

fn mape_short(m: &Metrics) -> String {
    m.mape.map_or_else(|| "NA".into(), |v| format!("{v:.2}"))
}

/// One row per client and one `macro` row for every record.
pub fn metrics_csv(bundle: &ReportBundle) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in &bundle.records {
        let mut row = |who: &str, m: &Metrics| {
            let _ = writeln!(
                out,
                "{},{},{who},{},{},{},{}",
                r.round,
                r.split,
                num(m.mae),
                num(m.rmse),
                mape(m),
                r.seconds
            );
        };
        for (c, m) in r.clients.iter().enumerate() {
            row(&c.to_string(), m);
        }
        row("macro", &r.macro_metrics);
    }
    out
}

pub fn rounds_csv(bundle: &ReportBundle) -> String {
    let mut out = String::from("round,client_id,train_loss,train_mae,train_mi,upload_bytes,seconds\n");
    for log in &bundle.rounds {
        for c in 0..log.train_loss.len() {
            let _ = writeln!(
                out,
                "{},{c},{},{},{},{},{}",
                log.round,
                num(log.train_loss[c]),
                num(log.train_mae[c]),
                num(log.train_mi[c]),
                log.upload_bytes,
                log.seconds
            );
        }
    }
    out
}

fn metrics_json(m: &Metrics) -> Value {
    let finite = |v: f64| if v.is_finite() { json!(v) } else { Value::Null };
    json!({ "mae": finite(m.mae), "rmse": finite(m.rmse), "mape_pct": m.mape.map_or(Value::Null, finite) })
}

fn record_json(r: &MetricRecord) -> Value {
    json!({
        "round": r.round,
        "split": r.split.to_string(),
        "macro": metrics_json(&r.macro_metrics),
        "clients": r.clients.iter().map(metrics_json).collect::<Vec<_>>(),
        "windows": r.windows,
        "seconds": r.seconds,
    })
}

pub fn summary_json(bundle: &ReportBundle, artifacts: &[PathBuf]) -> Value {
    let config = serde_json::to_value(&bundle.config).expect("config serializes");
    let last_val = bundle.validation().last().map(record_json);
    json!({
        "name": bundle.config.name,
        "config": config,
        "rounds_completed": bundle.rounds.len(),
        "best_round": bundle.best_round,
        "test": bundle.test().map(record_json),
        "untrained_validation": if bundle.rounds.is_empty() { last_val.clone() } else { None },
        "final_validation": last_val,
        "round_seconds": bundle.rounds.iter().map(|r| r.seconds).collect::<Vec<_>>(),
        "total_seconds": bundle.total_seconds,
        "checkpoints": bundle.checkpoints,
        "artifacts": artifacts,
    })
}

pub fn summary_md(bundle: &ReportBundle) -> String {
    let cfg = &bundle.config;
    let mut s = format!("# {}\n\n", cfg.name);
    let _ = writeln!(
        s,
        "Mode `{}`, {} clients, {} of {} rounds, seed {}.\n",
        cfg.mode,
        cfg.clients,
        bundle.rounds.len(),
        cfg.rounds,
        cfg.seed
    );
    let flags: Vec<&str> = [
        ("no_cd", cfg.no_cd),
        ("no_gp", cfg.no_gp),
        ("no_wu", cfg.no_wu),
        ("no_cps", cfg.no_cps),
    ]
    .into_iter()
    .filter_map(|(n, on)| on.then_some(n))
    .collect();
    if !flags.is_empty() {
        let _ = writeln!(s, "Ablation flags: {}.\n", flags.join(", "));
    }
    if bundle.rounds.is_empty() {
        s.push_str("No training rounds were run; the metrics below are for the untrained models.\n\n");
    }
    s.push_str("| split | round | client | MAE | RMSE | MAPE % |\n|---|---|---|---|---|---|\n");
    let rows: Vec<&MetricRecord> = if bundle.rounds.is_empty() {
        bundle.records.iter().collect()
    } else {
        bundle.test().into_iter().collect()
    };
    for r in rows {
        for (c, m) in r.clients.iter().enumerate() {
            let _ = writeln!(s, "| {} | {} | {c} | {:.4} | {:.4} | {} |", r.split, r.round, m.mae, m.rmse, mape_short(m));
        }
        let m = &r.macro_metrics;
        let _ = writeln!(
            s,
            "| {} | {} | macro | {:.4} | {:.4} | {} |",
            r.split,
            r.round,
            m.mae,
            m.rmse,
            mape_short(m)
        );
    }
    if !bundle.rounds.is_empty() {
        let per_round = bundle.rounds.iter().map(|r| r.seconds).sum::<f64>() / bundle.rounds.len() as f64;
        let _ = writeln!(
            s,
            "\nTest metrics use the parameters of round {}, the best validation MAE.",
            bundle.best_round
        );
        let _ = writeln!(s, "\nWall clock: {:.1} s total, {per_round:.2} s per round.", bundle.total_seconds);
    }
    s
}

/// `(label, points)` series drawn as lines on one chart.
pub type Series = (String, Vec<(f64, f64)>);

pub fn line_plot(path: &Path, title: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let err = |e: String| LabError::format(path, e);
    let points = series.iter().flat_map(|(_, p)| p.iter()).filter(|(_, y)| y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1.0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-3);
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("round")
        .y_desc(y_label)
        .draw()
        .map_err(|e| err(e.to_string()))?;
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied().filter(|(_, y)| y.is_finite()), color.stroke_width(2)))
            .map_err(|e| err(e.to_string()))?
            .label(label.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    if series.len() > 1 {
        chart
            .configure_series_labels()
            .border_style(BLACK)
            .background_style(WHITE.mix(0.8))
            .draw()
            .map_err(|e| err(e.to_string()))?;
    }
    root.present().map_err(|e| err(e.to_string()))
}

fn validation_curve(bundle: &ReportBundle, pick: impl Fn(&Metrics) -> f64) -> Vec<(f64, f64)> {
    bundle
        .validation()
        .map(|r| (r.round as f64, pick(&r.macro_metrics)))
        .collect()
}

/// Writes a run's report into `dir` and returns the written paths.
pub fn emit_report(bundle: &ReportBundle, dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, contents: String| -> Result<()> {
        let path = dir.join(name);
        write(&path, &contents)?;
        written.push(path);
        Ok(())
    };
    put(CONFIG_FILE, bundle.config.to_toml_string())?;
    put(METRICS_FILE, metrics_csv(bundle))?;
    put(ROUNDS_FILE, rounds_csv(bundle))?;
    put(SUMMARY_MD, summary_md(bundle))?;
    let label = bundle.config.name.clone();
    for (file, title, pick) in [
        (MAE_PLOT, "validation MAE", (|m: &Metrics| m.mae) as fn(&Metrics) -> f64),
        (RMSE_PLOT, "validation RMSE", |m: &Metrics| m.rmse),
    ] {
        let path = dir.join(file);
        line_plot(&path, title, title.trim_start_matches("validation "), &[(label.clone(), validation_curve(bundle, pick))])?;
        written.push(path);
    }
    let summary = dir.join(SUMMARY_JSON);
    written.push(summary.clone());
    let text = serde_json::to_string_pretty(&summary_json(bundle, &written)).expect("summary serializes");
    write(&summary, &text)?;
    Ok(written)
}

/// Writes one sub-directory per labelled run plus a comparison table and
/// overlay plots.
pub fn emit_comparison(runs: &[(String, ReportBundle)], dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let mut written = Vec::new();
    let mut csv = String::from("variant,best_round,test_mae,test_rmse,test_mape_pct,seconds\n");
    let mut md = String::from("| variant | best round | test MAE | test RMSE | test MAPE % |\n|---|---|---|---|---|\n");
    for (label, bundle) in runs {
        written.extend(emit_report(bundle, &dir.join(label))?);
        if let Some(t) = bundle.test() {
            let m = &t.macro_metrics;
            let _ = writeln!(
                csv,
                "{label},{},{},{},{},{}",
                bundle.best_round,
                num(m.mae),
                num(m.rmse),
                mape(m),
                bundle.total_seconds
            );
            let _ = writeln!(
                md,
                "| {label} | {} | {:.4} | {:.4} | {} |",
                bundle.best_round,
                m.mae,
                m.rmse,
                mape_short(m)
            );
        }
    }
    for (name, contents) in [("comparison.csv", csv), ("comparison.md", md)] {
        let path = dir.join(name);
        write(&path, &contents)?;
        written.push(path);
    }
    for (file, title, pick) in [
        (MAE_PLOT, "validation MAE", (|m: &Metrics| m.mae) as fn(&Metrics) -> f64),
        (RMSE_PLOT, "validation RMSE", |m: &Metrics| m.rmse),
    ] {
        let series: Vec<Series> = runs
            .iter()
            .map(|(label, b)| (label.clone(), validation_curve(b, pick)))
            .collect();
        let path = dir.join(file);
        line_plot(&path, title, title.trim_start_matches("validation "), &series)?;
        written.push(path);
    }
    Ok(written)
}
