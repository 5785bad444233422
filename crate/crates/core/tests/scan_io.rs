use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rangeseg::scan_io::*;
use rangeseg::Error;

fn random_cloud(rng: &mut ChaCha8Rng, m: usize) -> PointCloud {
    let points = (0..m)
        .map(|_| {
            Point::new(
                rng.random_range(-80.0..80.0),
                rng.random_range(-80.0..80.0),
                rng.random_range(-5.0..5.0),
                rng.random(),
            )
        })
        .collect();
    PointCloud::new(points).unwrap()
}

#[test]
fn two_point_file_decodes_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.bin");
    let words: Vec<u8> = [1.0f32, 0.0, 0.0, 0.5, 0.0, 1.0, 0.0, 0.2]
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect();
    assert_eq!(words.len(), 32);
    std::fs::write(&path, &words).unwrap();
    let c = read_scan(&path).unwrap();
    assert_eq!(c.len(), 2);
    assert_eq!(c.points()[0], Point::new(1.0, 0.0, 0.0, 0.5));
    assert_eq!(c.points()[1], Point::new(0.0, 1.0, 0.0, 0.2));
}

#[test]
fn empty_scan_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.bin");
    std::fs::write(&path, []).unwrap();
    let err = read_scan(&path).unwrap_err();
    assert!(err.to_string().contains("no points"), "{err}");
}

#[test]
fn non_finite_and_ragged_scans_are_rejected() {
    let mut bytes: Vec<u8> = [1.0f32, 2.0, f32::NAN, 0.0].iter().flat_map(|v| v.to_le_bytes()).collect();
    let err = decode_scan(&bytes).unwrap_err();
    assert!(err.to_string().contains("point 0"), "{err}");
    bytes.truncate(15);
    assert!(matches!(decode_scan(&bytes), Err(Error::Format(_))));
}

#[test]
fn scan_round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cloud = random_cloud(&mut rng, 1000);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.bin");
    write_scan(&path, &cloud).unwrap();
    let back = read_scan(&path).unwrap();
    assert_eq!(encode_scan(&back), encode_scan(&cloud));
    for (a, b) in cloud.points().iter().zip(back.points()) {
        assert_eq!(a.x.to_bits(), b.x.to_bits());
        assert_eq!(a.remission.to_bits(), b.remission.to_bits());
    }
}

#[test]
fn label_words_keep_semantic_bits() {
    let words: Vec<u8> = [0x0002_0001u32, 0].iter().flat_map(|w| w.to_le_bytes()).collect();
    assert_eq!(decode_labels(&words, 2).unwrap().labels, vec![1, 0]);
}

#[test]
fn label_length_mismatch_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("l.label");
    std::fs::write(&path, vec![0u8; 4000]).unwrap();
    assert!(read_labels(&path, 999).is_err());
    assert_eq!(read_labels(&path, 1000).unwrap().len(), 1000);
}

#[test]
fn predictions_are_one_word_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.label");
    write_predictions(&LabelSet::new(vec![3, 0, 7]), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len(), 12);
    let words: Vec<u32> = bytes.chunks(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
    assert_eq!(words, vec![3, 0, 7]);
    assert!(write_predictions(&LabelSet::new(vec![]), dir.path().join("e.label")).is_err());
}

#[test]
fn label_round_trip_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let labels = LabelSet::new((0..10_000).map(|_| rng.random::<u16>()).collect());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.label");
    write_predictions(&labels, &path).unwrap();
    assert_eq!(read_labels(&path, labels.len()).unwrap(), labels);
}

#[test]
fn label_validation_respects_ignore() {
    let l = LabelSet::new(vec![0, 3, DEFAULT_IGNORE_ID]);
    assert!(l.validate(4, DEFAULT_IGNORE_ID).is_ok());
    assert!(l.validate(3, DEFAULT_IGNORE_ID).is_err());
}

#[test]
fn missing_file_reports_path() {
    let err = read_scan("/nonexistent/dir/x.bin").unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("/nonexistent/dir/x.bin"));
}
