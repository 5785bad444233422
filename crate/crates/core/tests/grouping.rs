use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rangeseg::grouping::*;
use rangeseg::projection::{build_range_image, ProjectionConfig, RangeImage, C1};
use rangeseg::scan_io::{Point, PointCloud};

fn random_image(w: usize, h: usize, m: usize, seed: u64) -> RangeImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..m)
        .map(|_| {
            Point::new(
                rng.random_range(-20.0..20.0),
                rng.random_range(-20.0..20.0),
                rng.random_range(-3.0..1.0),
                rng.random(),
            )
        })
        .collect();
    let cfg = ProjectionConfig::new(w, h, 0.1, 0.4).unwrap();
    build_range_image(&PointCloud::new(points).unwrap(), &cfg).unwrap()
}

fn plain(k: usize, stride: usize) -> GroupingConfig {
    GroupingConfig {
        k,
        stride,
        dilation: 1,
        padding: Padding::None,
    }
}

fn assert_partition(img: &RangeImage, cfg: &GroupingConfig) -> PointGroups {
    let g = make_groups(img, cfg).unwrap();
    assert_eq!(g.num_groups * g.slots, img.width() * img.height());
    let mut seen = vec![0u8; img.width() * img.height()];
    for o in &g.origin {
        let (u, v) = o.expect("no padding slots without padding");
        seen[v as usize * img.width() + u as usize] += 1;
    }
    assert!(seen.iter().all(|&c| c == 1));
    g
}

#[test]
fn kitti_grid_is_a_partition() {
    let img = random_image(2048, 64, 20_000, 1);
    let g = assert_partition(&img, &plain(4, 4));
    assert_eq!((g.num_groups, g.slots), (8192, 16));
    assert_eq!(g.grid, (16, 512));
}

#[test]
fn small_grids() {
    let img = random_image(512, 64, 5000, 2);
    assert_eq!(assert_partition(&img, &plain(4, 4)).num_groups, 2048);
    let img = random_image(8, 4, 40, 3);
    let g = assert_partition(&img, &plain(4, 4));
    assert_eq!((g.num_groups, g.slots), (2, 16));
    let all: HashSet<_> = g.origin.iter().map(|o| o.unwrap()).collect();
    assert_eq!(all.len(), 32);
}

#[test]
fn slots_copy_pixel_features_row_major() {
    let img = random_image(16, 8, 300, 4);
    let g = make_groups(&img, &plain(4, 4)).unwrap();
    for p in 0..g.num_groups {
        let (gy, gx) = (p / g.grid.1, p % g.grid.1);
        for n in 0..16 {
            let (u, v) = (gx * 4 + n % 4, gy * 4 + n / 4);
            assert_eq!(g.origin[p * 16 + n], Some((u as u32, v as u32)));
            assert_eq!(g.present[p * 16 + n], img.is_valid(u, v));
            let want: Vec<f64> = img.feature(u, v).iter().map(|&f| f as f64).collect();
            assert_eq!(g.slot(p, n), want.as_slice());
        }
    }
}

#[test]
fn bad_tiling_is_rejected() {
    let img = random_image(18, 8, 100, 5);
    assert!(make_groups(&img, &plain(4, 4)).is_err());
    let zero = GroupingConfig {
        padding: Padding::Zero,
        ..plain(4, 4)
    };
    let g = make_groups(&img, &zero).unwrap();
    assert_eq!(g.grid, (2, 5));
    assert!(g.origin.iter().any(|o| o.is_none()));
}

/// Exhaustive window count: origins `0, s, 2s, ...` while the window still starts
/// inside the unpadded span, the last one allowed to overhang.
fn count_windows(len: usize, eff: usize, stride: usize) -> usize {
    let mut n = 0;
    let mut start = 0;
    loop {
        n += 1;
        if start + eff >= len {
            return n;
        }
        start += stride;
    }
}

proptest! {
    #[test]
    fn zero_padding_count_formula(w in 1usize..40, h in 1usize..20, k in 1usize..5, s in 1usize..5, d in 1usize..3) {
        let cfg = GroupingConfig { k, stride: s, dilation: d, padding: Padding::Zero };
        let eff = cfg.extent();
        let (rows, cols) = cfg.grid(w, h).unwrap();
        prop_assert_eq!(rows, count_windows(h, eff, s));
        prop_assert_eq!(cols, count_windows(w, eff, s));
        if w > eff && h > eff {
            let f = |len: usize| ((len - eff) as f64 / s as f64 + 1.0).ceil() as usize;
            prop_assert_eq!(rows * cols, f(h) * f(w));
        }
        // every pixel is covered when the stride does not skip pixels
        if d == 1 && s <= k {
            let img = random_image(w, h, 50, 9);
            let g = make_groups(&img, &cfg).unwrap();
            let covered: HashSet<_> = g.origin.iter().flatten().collect();
            prop_assert_eq!(covered.len(), w * h);
        }
    }
}

#[test]
fn identical_points_have_zero_relative_features() {
    let mut g = PointGroups {
        num_groups: 1,
        slots: 4,
        channels: C1,
        grid: (1, 1),
        data: [1.5, -2.0, 0.5, 3.0, 0.25].repeat(4),
        origin: vec![Some((0, 0)); 4],
        present: vec![true; 4],
    };
    let a = augment_features(&g).unwrap();
    for n in 0..4 {
        let s = a.slot(0, n);
        assert_eq!(s, &[1.5, 0.0, -2.0, 0.0, 0.5, 0.0, 3.0, 0.0, 0.25, 0.0, 0.0]);
    }
    g.present[3] = false;
    g.data[15..20].fill(0.0);
    let a = augment_features(&g).unwrap();
    assert!(a.slot(0, 3).iter().all(|&v| v == 0.0));
}

#[test]
fn symmetric_pair_deviates_by_one() {
    let mut data = vec![0.0; 2 * C1];
    data[C1] = 2.0;
    let g = PointGroups {
        num_groups: 1,
        slots: 2,
        channels: C1,
        grid: (1, 1),
        data,
        origin: vec![Some((0, 0)); 2],
        present: vec![true; 2],
    };
    let a = augment_features(&g).unwrap();
    assert_eq!(a.slot(0, 0)[1], -1.0);
    assert_eq!(a.slot(0, 1)[1], 1.0);
    assert_eq!(a.slot(0, 1)[10], 1.0);
}

#[test]
fn augmentation_matches_loop_oracle() {
    let img = random_image(64, 16, 800, 6);
    let cfg = plain(4, 4);
    let a = build_groups(&img, &cfg).unwrap();
    let (rows, cols) = cfg.grid(64, 16).unwrap();
    for gy in 0..rows {
        for gx in 0..cols {
            let p = gy * cols + gx;
            let mut pts = Vec::new();
            for v in gy * 4..gy * 4 + 4 {
                for u in gx * 4..gx * 4 + 4 {
                    if img.is_valid(u, v) {
                        pts.push(img.feature(u, v).iter().map(|&f| f as f64).collect::<Vec<_>>());
                    }
                }
            }
            let mean: Vec<f64> = (0..C1).map(|c| pts.iter().map(|q| q[c]).sum::<f64>() / pts.len().max(1) as f64).collect();
            for n in 0..16 {
                let (u, v) = (gx * 4 + n % 4, gy * 4 + n / 4);
                let s = a.slot(p, n);
                if !img.is_valid(u, v) {
                    assert!(s.iter().all(|&x| x == 0.0));
                    continue;
                }
                let f = img.feature(u, v);
                for c in 0..C1 {
                    assert!((s[2 * c] - f[c] as f64).abs() <= 1e-12);
                    assert!((s[2 * c + 1] - (f[c] as f64 - mean[c])).abs() <= 1e-12);
                }
                let d = ((f[0] as f64 - mean[0]).powi(2) + (f[1] as f64 - mean[1]).powi(2) + (f[2] as f64 - mean[2]).powi(2)).sqrt();
                assert!((s[10] - d).abs() <= 1e-12);
                assert!(s[10] >= 0.0);
            }
            // relative channels average to zero over present slots
            for &c in &RELATIVE_CHANNELS[..5] {
                let sum: f64 = (0..16).filter(|&n| a.present[p * 16 + n]).map(|n| a.slot(p, n)[c]).sum();
                assert!(sum.abs() <= 1e-9 * (1.0 + 40.0 * 16.0));
            }
        }
    }
}

#[test]
fn augmentation_is_translation_covariant() {
    let img = random_image(32, 8, 400, 8);
    let g = make_groups(&img, &plain(4, 4)).unwrap();
    let mut shifted = g.clone();
    for (i, f) in shifted.data.chunks_exact_mut(C1).enumerate() {
        if g.present[i] {
            f[0] += 3.75;
        }
    }
    let (a, b) = (augment_features(&g).unwrap(), augment_features(&shifted).unwrap());
    for i in 0..g.num_groups * g.slots {
        if !g.present[i] {
            continue;
        }
        let (sa, sb) = (&a.data[i * C2..(i + 1) * C2], &b.data[i * C2..(i + 1) * C2]);
        assert!((sb[0] - sa[0] - 3.75).abs() <= 1e-9);
        for c in [1, 10] {
            assert!((sb[c] - sa[c]).abs() <= 1e-9);
        }
        assert_eq!(&sa[2..10], &sb[2..10]);
    }
}

#[test]
fn channel_major_layout_and_relative_masking() {
    let img = random_image(16, 4, 100, 10);
    let a = build_groups(&img, &plain(4, 4)).unwrap();
    let pn = a.num_groups * a.slots;
    let full = a.to_channel_major(true, |v| v, 0.0);
    let masked = a.to_channel_major(false, |v| v, 0.0);
    for i in 0..pn {
        for c in 0..C2 {
            assert_eq!(full[c * pn + i], a.data[i * C2 + c]);
            let want = if RELATIVE_CHANNELS.contains(&c) { 0.0 } else { a.data[i * C2 + c] };
            assert_eq!(masked[c * pn + i], want);
        }
    }
}
