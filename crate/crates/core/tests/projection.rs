use std::f64::consts::{FRAC_PI_4, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rangeseg::projection::*;
use rangeseg::scan_io::{LabelSet, Point, PointCloud};

fn kitti_like() -> ProjectionConfig {
    ProjectionConfig::new(2048, 64, FRAC_PI_4, FRAC_PI_4).unwrap()
}

/// Scalar re-evaluation of the projection, written independently of the library.
fn oracle(p: &Point, w: usize, h: usize, up: f64, down: f64) -> (usize, usize) {
    let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
    let r = (x * x + y * y + z * z).sqrt();
    let yaw = y.atan2(x);
    let pitch = (z / r).asin();
    let uf = 0.5 * (1.0 - yaw / PI) * w as f64;
    let vf = (1.0 - (pitch + down) / (up + down)) * h as f64;
    let clamp = |f: f64, n: usize| -> usize {
        let f = f.floor();
        if f < 0.0 {
            0
        } else if f > (n - 1) as f64 {
            n - 1
        } else {
            f as usize
        }
    };
    (clamp(uf, w), clamp(vf, h))
}

#[test]
fn axis_aligned_fixtures() {
    let c = kitti_like();
    assert_eq!(project_point(&Point::new(1.0, 0.0, 0.0, 0.0), &c).unwrap(), (1024, 32));
    assert_eq!(project_point(&Point::new(0.0, 1.0, 0.0, 0.0), &c).unwrap(), (512, 32));
    assert!(project_point(&Point::new(0.0, 0.0, 0.0, 0.0), &c).is_err());
    let p = Point::new(1.0, 0.0, 1.0, 0.0);
    assert_eq!(project_point(&p, &c).unwrap(), oracle(&p, 2048, 64, FRAC_PI_4, FRAC_PI_4));
    assert_eq!(project_point(&p, &c).unwrap().1, 0);
}

#[test]
fn random_points_match_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (up, down) = (3f64.to_radians(), 25f64.to_radians());
    let c = ProjectionConfig::new(512, 64, up, down).unwrap();
    let points: Vec<Point> = (0..1000)
        .map(|_| {
            Point::new(
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
                rng.random_range(-10.0..3.0),
                0.0,
            )
        })
        .collect();
    let cloud = PointCloud::new(points).unwrap();
    let img = build_range_image(&cloud, &c).unwrap();
    for (m, p) in cloud.points().iter().enumerate() {
        let (u, v) = oracle(p, 512, 64, up, down);
        assert_eq!(img.point_to_pixel()[m], (u as u32, v as u32), "point {m}");
        assert_eq!(project_point(p, &c).unwrap(), (u, v));
    }
}

#[test]
fn representative_is_the_nearest_point_per_pixel() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = ProjectionConfig::new(32, 8, 0.3, 0.3).unwrap();
    let points: Vec<Point> = (0..2000)
        .map(|_| {
            Point::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-2.0..2.0),
                rng.random(),
            )
        })
        .collect();
    let cloud = PointCloud::new(points).unwrap();
    let img = build_range_image(&cloud, &c).unwrap();
    let mut best: Vec<Option<(f64, usize)>> = vec![None; 32 * 8];
    for (m, p) in cloud.points().iter().enumerate() {
        let (u, v) = oracle(p, 32, 8, 0.3, 0.3);
        let slot = &mut best[v * 32 + u];
        if slot.is_none_or(|(d, _)| p.range() < d) {
            *slot = Some((p.range(), m));
        }
    }
    assert!(img.valid_count() <= cloud.len().min(32 * 8));
    for v in 0..8 {
        for u in 0..32 {
            let want = best[v * 32 + u];
            assert_eq!(img.representative(u, v).map(|m| m as usize), want.map(|b| b.1));
            match want {
                Some((d, m)) => {
                    let p = cloud.points()[m];
                    assert_eq!(img.feature(u, v), &[p.x, p.y, p.z, d as f32, p.remission]);
                    assert!(img.depth(u, v) > 0.0);
                }
                None => assert!(img.feature(u, v).iter().all(|&f| f == 0.0)),
            }
        }
    }
}

#[test]
fn distinct_pixels_are_their_own_representatives() {
    let c = ProjectionConfig::new(16, 4, 0.2, 0.2).unwrap();
    let points: Vec<Point> = (0..16)
        .map(|j| {
            let az = PI * (1.0 - 2.0 * (j as f64 + 0.5) / 16.0);
            Point::new((3.0 * az.cos()) as f32, (3.0 * az.sin()) as f32, 0.0, 0.1)
        })
        .collect();
    let cloud = PointCloud::new(points).unwrap();
    let img = build_range_image(&cloud, &c).unwrap();
    assert_eq!(img.valid_count(), 16);
    for (m, &(u, v)) in img.point_to_pixel().iter().enumerate() {
        assert_eq!(img.representative(u as usize, v as usize), Some(m as u32));
    }
}

#[test]
fn rotation_about_z_shifts_columns() {
    let (w, h) = (256usize, 16usize);
    let (up, down) = (0.1, 0.3);
    let c = ProjectionConfig::new(w, h, up, down).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let samples: Vec<(usize, f64, f64)> = (0..500)
        .map(|_| (rng.random_range(0..w), rng.random_range(-0.25..0.05), rng.random_range(2.0..40.0)))
        .collect();
    let at = |j: usize, elev: f64, r: f64, shift: f64| {
        let az = PI * (1.0 - 2.0 * (j as f64 + 0.5) / w as f64) + shift;
        Point::new(
            (r * elev.cos() * az.cos()) as f32,
            (r * elev.cos() * az.sin()) as f32,
            (r * elev.sin()) as f32,
            0.0,
        )
    };
    for s in [1usize, 8, 100] {
        let delta = 2.0 * PI * s as f64 / w as f64;
        for &(j, elev, r) in &samples {
            let (u0, v0) = project_point(&at(j, elev, r, 0.0), &c).unwrap();
            let (u1, v1) = project_point(&at(j, elev, r, delta), &c).unwrap();
            assert_eq!(u0, j);
            assert_eq!(u1, (u0 + w - s) % w, "column {j}, shift {s}");
            assert_eq!(v0, v1);
        }
    }
}

#[test]
fn reprojection_follows_pixels() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let c = ProjectionConfig::new(16, 4, 0.3, 0.3).unwrap();
    let points: Vec<Point> = (0..300)
        .map(|_| Point::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0), 0.0))
        .collect();
    let cloud = PointCloud::new(points).unwrap();
    let img = build_range_image(&cloud, &c).unwrap();
    assert_eq!(reproject_labels(&img, &[6; 64]).unwrap().labels, vec![6; 300]);
    let pix: Vec<u16> = (0..64).map(|_| rng.random_range(0..5)).collect();
    let out = reproject_labels(&img, &pix).unwrap();
    for (m, p) in cloud.points().iter().enumerate() {
        let (u, v) = oracle(p, 16, 4, 0.3, 0.3);
        assert_eq!(out.labels[m], pix[v * 16 + u]);
    }
    assert!(reproject_labels(&img, &pix[..10]).is_err());
}

#[test]
fn pixel_labels_use_representatives() {
    let c = ProjectionConfig::new(16, 4, 0.3, 0.3).unwrap();
    let cloud = PointCloud::new(vec![Point::new(5.0, 0.0, 0.0, 0.0), Point::new(3.0, 0.0, 0.0, 0.0)]).unwrap();
    let img = build_range_image(&cloud, &c).unwrap();
    let px = img.pixel_labels(&LabelSet::new(vec![1, 2]), 99);
    assert_eq!(px.iter().filter(|&&l| l == 2).count(), 1);
    assert_eq!(px.iter().filter(|&&l| l == 99).count(), 63);
}

#[test]
fn export_writes_features_and_header() {
    let c = ProjectionConfig::new(16, 4, 0.3, 0.3).unwrap();
    let cloud = PointCloud::new(vec![Point::new(5.0, 0.0, 0.0, 0.25)]).unwrap();
    let img = build_range_image(&cloud, &c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("img.bin");
    img.export(&path).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), (16 * 4 * C1 * 4) as u64);
    let hdr = std::fs::read_to_string(dir.path().join("img.txt")).unwrap();
    assert!(hdr.contains("width 16") && hdr.contains("height 4"));
}
