use rangeseg::dataset::load_dir;
use rangeseg::projection::project_point;
use rangeseg::synth::*;
use rangeseg::training::{class_weights_from_counts, compute_class_weights};

fn empty() -> SceneSpec {
    SceneSpec {
        vehicles: [0, 0],
        poles: [0, 0],
        walls: [0, 0],
        ..SceneSpec::default()
    }
}

#[test]
fn empty_scene_is_all_ground() {
    let spec = SceneSpec { seed: 3, ..empty() };
    let (cloud, labels) = generate(&spec).unwrap();
    assert!(labels.labels.iter().all(|&l| l == GROUND));
    for p in cloud.points() {
        // Range noise along a downward ray moves z by at most the noise itself.
        assert!((p.z as f64 + spec.sensor_height).abs() <= 6.0 * spec.noise_std + 1e-5, "{p:?}");
    }
}

#[test]
fn objects_are_hit_before_the_ground() {
    let spec = SceneSpec { vehicles: [3, 3], poles: [2, 2], walls: [0, 0], noise_std: 0.0, seed: 8, ..SceneSpec::default() };
    let (cloud, labels, beams) = generate_with_beams(&spec).unwrap();
    let (up, fov) = (spec.fov_up_deg.to_radians(), (spec.fov_up_deg + spec.fov_down_deg).to_radians());
    let mut objects = 0;
    for ((p, &l), &(_, row)) in cloud.points().iter().zip(&labels.labels).zip(&beams) {
        if l == GROUND {
            continue;
        }
        objects += 1;
        let elev = up - (row as f64 + 0.5) * fov / spec.height as f64;
        if elev < 0.0 {
            let ground = spec.sensor_height / -elev.sin();
            assert!(p.range() < ground + 1e-4);
        }
    }
    assert!(objects > 0);
}

#[test]
fn same_seed_same_scan() {
    let spec = SceneSpec { seed: 42, ..SceneSpec::default() };
    assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    assert_ne!(generate(&spec).unwrap(), generate(&SceneSpec { seed: 43, ..spec.clone() }).unwrap());
}

#[test]
fn noiseless_points_land_on_their_beam() {
    let spec = SceneSpec { noise_std: 0.0, seed: 5, ..SceneSpec::default() };
    let cfg = spec.projection().unwrap();
    let (cloud, _, beams) = generate_with_beams(&spec).unwrap();
    let exact = cloud
        .points()
        .iter()
        .zip(&beams)
        .filter(|(p, &b)| project_point(p, &cfg).unwrap() == b)
        .count();
    assert!(exact as f64 >= 0.99 * cloud.len() as f64, "{exact}/{}", cloud.len());
}

#[test]
fn scans_fit_the_beam_grid() {
    let spec = SceneSpec::default();
    let (cloud, labels) = generate(&spec).unwrap();
    assert!(cloud.len() <= spec.width * spec.height);
    assert_eq!(cloud.len(), labels.len());
    labels.validate(NUM_CLASSES, u16::MAX).unwrap();
}

#[test]
fn a_scene_without_hits_is_an_error() {
    let spec = SceneSpec { fov_up_deg: 10.0, fov_down_deg: -5.0, ..empty() };
    assert!(generate(&spec).is_err());
    assert!(generate(&SceneSpec { placement: [5.0, 1.0], ..SceneSpec::default() }).is_err());
}

#[test]
fn dataset_round_trips_and_weights_match_counts() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec { width: 128, height: 16, seed: 7, ..SceneSpec::default() };
    let files = generate_dataset(dir.path(), 6, &spec).unwrap();
    assert_eq!(files.len(), 6);
    let samples = load_dir(dir.path(), true).unwrap();
    assert_eq!(samples.len(), 6);
    let mut counts = [0u64; NUM_CLASSES];
    for (i, s) in samples.iter().enumerate() {
        let (cloud, labels) = generate(&SceneSpec { seed: spec.scan_seed(i), ..spec.clone() }).unwrap();
        assert_eq!(s.cloud, cloud);
        assert_eq!(s.labels.as_ref().unwrap(), &labels);
        for &l in &labels.labels {
            counts[l as usize] += 1;
        }
    }
    let from_files = compute_class_weights(samples.iter().map(|s| s.labels.as_ref().unwrap()), NUM_CLASSES, 0.25, u16::MAX).unwrap();
    assert_eq!(from_files, class_weights_from_counts(&counts, 0.25, u16::MAX).unwrap());

    let again = tempfile::tempdir().unwrap();
    generate_dataset(again.path(), 6, &spec).unwrap();
    for (a, _) in &files {
        let b = again.path().join("velodyne").join(a.file_name().unwrap());
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}
