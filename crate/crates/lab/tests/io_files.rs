use std::fs;

use feddis_core::data::TrafficSeries;
use feddis_core::Matrix;
use feddis_lab::io::{
    load_dataset, read_partition_file, write_csv, write_matrix_binary, write_partition_file, DatasetFormat,
};

fn sample_series() -> TrafficSeries {
    // f32-representable values so the binary round trip is exact
    let values = Matrix::from_fn(7, 3, |t, v| 40.0 + t as f64 * 0.5 - v as f64 * 0.25);
    TrafficSeries::new(values, 5, vec!["a".into(), "b".into(), "c".into()]).unwrap()
}

#[test]
fn one_node_csv_loads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.csv");
    let body: String = (0..24).map(|t| format!("{}\n", 50 + t)).collect();
    fs::write(&path, format!("sensor_1\n{body}")).unwrap();
    let series = load_dataset(&path, DatasetFormat::from_path(&path).unwrap(), 5).unwrap();
    assert_eq!((series.num_steps(), series.num_nodes()), (24, 1));
    assert_eq!(series.node_ids(), ["sensor_1"]);
    assert_eq!(series.values().get(23, 0), 73.0);
}

#[test]
fn csv_round_trip_keeps_ids_and_values() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csv");
    let series = sample_series();
    write_csv(&path, &series).unwrap();
    let back = load_dataset(&path, DatasetFormat::Csv, 5).unwrap();
    assert_eq!(back, series);
}

#[test]
fn binary_round_trip_and_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.bin");
    let series = sample_series();
    write_matrix_binary(&path, &series).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert_eq!(bytes.len(), 8 + 4 * 7 * 3);
    assert_eq!(u32::from_le_bytes(bytes[0..4].try_into().unwrap()), 7);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
    // row-major: second value is step 0, node 1
    assert_eq!(f32::from_le_bytes(bytes[12..16].try_into().unwrap()), 39.75);
    let back = load_dataset(&path, DatasetFormat::from_path(&path).unwrap(), 5).unwrap();
    assert_eq!(back.values(), series.values());
}

#[test]
fn damaged_files_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [(&str, &[u8], &str); 5] = [
        ("ragged.csv", b"a,b\n1,2\n3\n", "row 2 has 1 fields"),
        ("word.csv", b"a,b\n1,x\n", "row 1, column 2"),
        ("nan.csv", b"a\n1\nNaN\n", "non-finite"),
        ("short.bin", &[1, 0, 0], "header"),
        ("sized.bin", &[2, 0, 0, 0, 1, 0, 0, 0, 0, 0, 128, 63], "bytes"),
    ];
    for (name, contents, needle) in cases {
        let path = dir.path().join(name);
        fs::write(&path, contents).unwrap();
        let err = load_dataset(&path, DatasetFormat::from_path(&path).unwrap(), 5).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(needle) && msg.contains(name), "{name}: {msg}");
    }
    assert!(DatasetFormat::from_path(&dir.path().join("x.parquet")).is_err());
    assert!(load_dataset(&dir.path().join("absent.csv"), DatasetFormat::Csv, 5).is_err());
}

#[test]
fn partition_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("parts.txt");
    let assignment = vec![vec![4, 0], vec![1, 2, 3], vec![5]];
    write_partition_file(&path, &assignment).unwrap();
    assert_eq!(read_partition_file(&path).unwrap(), assignment);

    fs::write(&path, "# comment\n1: 2, 3\n0: 0 1\n").unwrap();
    assert_eq!(read_partition_file(&path).unwrap(), vec![vec![0, 1], vec![2, 3]]);
    fs::write(&path, "0: 1\n0: 2\n").unwrap();
    assert!(read_partition_file(&path).unwrap_err().to_string().contains("listed twice"));
    fs::write(&path, "1: 1\n").unwrap();
    assert!(read_partition_file(&path).unwrap_err().to_string().contains("client 0 missing"));
}
