use feddis_core::Matrix;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Pattern sharing by exhaustive search: for each pattern and each other
/// client, rank every row by cosine similarity with a full sort, keep the
/// first `k` above `tau`, and average what was kept.
pub fn exhaustive(banks: &[Matrix], k: usize, tau: f64, include_self: bool) -> Vec<Matrix> {
    let mut out = Vec::new();
    for (m, own) in banks.iter().enumerate() {
        let mut updated = own.clone();
        for j in 0..own.rows() {
            let q = own.row(j);
            let mut picked: Vec<&[f64]> = Vec::new();
            for (n, other) in banks.iter().enumerate() {
                if n == m {
                    continue;
                }
                let mut ranked: Vec<(usize, f64)> = (0..other.rows()).map(|r| (r, cosine(q, other.row(r)))).collect();
                // stable sort on similarity alone keeps lower indices first among ties
                ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
                picked.extend(ranked.iter().take(k).filter(|(_, s)| *s > tau).map(|&(r, _)| other.row(r)));
            }
            if picked.is_empty() {
                continue;
            }
            if include_self {
                picked.push(q);
            }
            for col in 0..own.cols() {
                let mean = picked.iter().map(|p| p[col]).sum::<f64>() / picked.len() as f64;
                updated.set(j, col, mean);
            }
        }
        out.push(updated);
    }
    out
}
