use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rangeseg::dataset::Sample;
use rangeseg::grouping::GroupingConfig;
use rangeseg::model::{Model, ModelConfig, Preset};
use rangeseg::pipeline::{model_input, prepare, Geometry};
use rangeseg::scan_io::{LabelSet, Point, PointCloud};
use rangeseg::synth::{generate, SceneSpec, NUM_CLASSES};
use rangeseg::tensor::{Graph, SgdConfig};
use rangeseg::training::*;

const IGNORE: u16 = u16::MAX;

fn small_spec() -> SceneSpec {
    SceneSpec {
        width: 64,
        height: 16,
        ..SceneSpec::default()
    }
}

fn small_model(seed: u64) -> Model<f64> {
    let mut cfg = ModelConfig::preset(Preset::Tiny, NUM_CLASSES);
    (cfg.c3, cfg.c4, cfg.c5, cfg.c6) = (4, 6, 8, 8);
    (cfg.l1, cfg.l2, cfg.l3, cfg.l4) = (1, 1, 1, 1);
    Model::new(cfg, seed).unwrap()
}

fn samples(n: usize) -> (Vec<Sample>, Geometry) {
    let spec = small_spec();
    let s = (0..n)
        .map(|i| {
            let (cloud, labels) = generate(&SceneSpec { seed: spec.scan_seed(i), ..spec.clone() }).unwrap();
            Sample { id: i.to_string(), cloud, labels: Some(labels) }
        })
        .collect();
    let geom = Geometry { projection: spec.projection().unwrap(), grouping: GroupingConfig::default() };
    (s, geom)
}

fn loss_for(s: &[Sample]) -> LossSpec {
    compute_class_weights(s.iter().map(|s| s.labels.as_ref().unwrap()), NUM_CLASSES, 0.25, IGNORE).unwrap()
}

#[test]
fn weights_match_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let nc = rng.random_range(1..8);
        let sets: Vec<LabelSet> = (0..3)
            .map(|_| {
                let n = rng.random_range(0..400);
                LabelSet::new((0..n).map(|_| if rng.random_bool(0.05) { IGNORE } else { rng.random_range(0..nc as u16) }).collect())
            })
            .collect();
        let mut counts = vec![0f64; nc];
        for s in &sets {
            for &l in &s.labels {
                if l != IGNORE {
                    counts[l as usize] += 1.0;
                }
            }
        }
        let total: f64 = counts.iter().sum();
        let r = compute_class_weights(&sets, nc, 0.25, IGNORE);
        if total == 0.0 {
            assert!(r.is_err());
            continue;
        }
        let r = r.unwrap();
        let mut f: Vec<f64> = counts.iter().map(|c| c / total).filter(|&f| f > 0.0).collect();
        f.sort_by(f64::total_cmp);
        let m = if f.len() % 2 == 1 { f[f.len() / 2] } else { (f[f.len() / 2 - 1] + f[f.len() / 2]) / 2.0 };
        for c in 0..nc {
            let want = if counts[c] > 0.0 { (m / (counts[c] / total)).powf(0.25) } else { 0.0 };
            assert!((r.weights[c] - want).abs() <= 1e-12 * want.max(1.0));
        }
    }
}

#[test]
fn weights_reject_out_of_range_labels() {
    let bad = LabelSet::new(vec![0, 9]);
    assert!(compute_class_weights([&bad], 4, 0.25, IGNORE).is_err());
}

fn cloud(n: usize, rng: &mut ChaCha8Rng) -> (PointCloud, LabelSet) {
    let pts = (0..n)
        .map(|_| Point::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-2.0..2.0), rng.random()))
        .collect();
    (PointCloud::new(pts).unwrap(), LabelSet::new((0..n as u16).collect()))
}

#[test]
fn identity_transform_is_a_no_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (c, l) = cloud(500, &mut rng);
    let (c2, l2) = apply_transform(&c, &l, &Transform::default()).unwrap();
    assert_eq!(c, c2);
    assert_eq!(l, l2);
    let t = sample_transform(&AugmentationConfig::none(), 500, &mut rng).unwrap();
    assert_eq!(apply_transform(&c, &l, &t).unwrap().0, c);
}

#[test]
fn half_turn_maps_x_to_minus_x() {
    let c = PointCloud::new(vec![Point::new(1.0, 0.0, 0.0, 0.5)]).unwrap();
    let l = LabelSet::new(vec![3]);
    let t = Transform { angle: std::f64::consts::PI, ..Transform::default() };
    let (out, _) = apply_transform(&c, &l, &t).unwrap();
    let p = out.points()[0];
    assert!((p.x as f64 + 1.0).abs() < 1e-12);
    assert!((p.y as f64).abs() < 1e-12 && p.z == 0.0 && p.remission == 0.5);
}

#[test]
fn flips_and_shift() {
    let c = PointCloud::new(vec![Point::new(1.0, 2.0, 3.0, 0.0)]).unwrap();
    let l = LabelSet::new(vec![0]);
    let t = Transform { shift: [1.0, 0.0, -1.0], flip_x: true, flip_z: true, ..Transform::default() };
    let p = apply_transform(&c, &l, &t).unwrap().0.points()[0];
    assert_eq!((p.x, p.y, p.z), (-2.0, 2.0, -2.0));
}

#[test]
fn dropping_keeps_labels_aligned() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (c, l) = cloud(1000, &mut rng);
    let cfg = AugmentationConfig { drop_fraction: [0.1, 0.1], ..AugmentationConfig::none() };
    let t = sample_transform(&cfg, 1000, &mut rng).unwrap();
    assert_eq!(t.drop.len(), 100);
    let (c2, l2) = apply_transform(&c, &l, &t).unwrap();
    assert_eq!((c2.len(), l2.len()), (900, 900));
    for (p, &i) in c2.points().iter().zip(&l2.labels) {
        assert_eq!(*p, c.points()[i as usize]);
        assert!(t.drop.binary_search(&(i as usize)).is_err());
    }
}

#[test]
fn augmentation_is_seeded() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (c, l) = cloud(300, &mut rng);
    let cfg = AugmentationConfig::default();
    let a = augment_scan(&c, &l, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = augment_scan(&c, &l, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let (s, geom) = samples(2);
    let mut model = small_model(0);
    let before: Vec<_> = model.store().params().iter().map(|p| p.value.clone()).collect();
    let tcfg = TrainConfig { epochs: 1, batch_size: 2, lr0: 0.0, augment: false, ..TrainConfig::default() };
    train(&mut model, &s, None, &loss_for(&s), &tcfg, &geom, |_, _| Ok(())).unwrap();
    for (p, b) in model.store().params().iter().zip(&before) {
        assert_eq!(&p.value, b, "{}", p.name);
    }
}

#[test]
fn overfits_one_scan() {
    let (s, geom) = samples(1);
    let mut model = small_model(1);
    let loss = loss_for(&s);
    let p = prepare(&s[0].cloud, &geom).unwrap();
    let input = model_input::<f64>(&[&p], true).unwrap();
    let targets: Vec<u32> = p.image.pixel_labels(s[0].labels.as_ref().unwrap(), IGNORE).into_iter().map(u32::from).collect();
    let sgd = SgdConfig { lr: 0.01, momentum: 0.9, weight_decay: 0.0 };
    let losses: Vec<f64> = (0..150).map(|_| train_step(&mut model, &input, &targets, &loss, &sgd).unwrap()).collect();
    let (first, last) = (losses[0], losses[losses.len() - 1]);
    assert!(last < 0.25 * first, "loss {first} -> {last}");
}

#[test]
fn fixed_seed_training_is_reproducible() {
    let (s, geom) = samples(3);
    let loss = loss_for(&s);
    let run = || {
        let mut m = small_model(4);
        let tcfg = TrainConfig { epochs: 2, batch_size: 2, seed: 11, lr0: 0.01, momentum: 0.9, ..TrainConfig::default() };
        let hist = train(&mut m, &s, None, &loss, &tcfg, &geom, |_, _| Ok(())).unwrap();
        let mut bytes = Vec::new();
        m.checkpoint(2).unwrap().write_to(&mut bytes).unwrap();
        (hist, bytes)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

#[test]
fn scaling_weights_scales_loss_and_gradient() {
    let (s, geom) = samples(1);
    let p = prepare(&s[0].cloud, &geom).unwrap();
    let input = model_input::<f64>(&[&p], true).unwrap();
    let targets: Vec<u32> = p.image.pixel_labels(s[0].labels.as_ref().unwrap(), IGNORE).into_iter().map(u32::from).collect();
    let run = |w: &[f64]| {
        let mut model = small_model(2);
        let mut g = Graph::new();
        let logits = model.forward(&mut g, &input, false).unwrap();
        let l = g.weighted_cross_entropy(logits, &targets, w, u32::from(IGNORE)).unwrap();
        let grads = g.backward(l).unwrap();
        model.store_mut().accumulate(&g, &grads);
        let flat: Vec<f64> = model.store().params().iter().flat_map(|p| p.grad.data().to_vec()).collect();
        (g.value(l).data()[0], flat)
    };
    let w = [0.7, 1.3, 2.1, 1.0];
    let (l1, g1) = run(&w);
    let (l3, g3) = run(&w.map(|x| 3.0 * x));
    assert!((l3 - 3.0 * l1).abs() < 1e-10 * l3.abs());
    let dot: f64 = g1.iter().zip(&g3).map(|(a, b)| a * b).sum();
    let n1: f64 = g1.iter().map(|a| a * a).sum::<f64>().sqrt();
    let n3: f64 = g3.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!((dot / (n1 * n3) - 1.0).abs() < 1e-10);
    assert!((n3 / n1 - 3.0).abs() < 1e-9);
}

#[test]
fn invalid_training_configs() {
    assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { lr0: -1.0, ..TrainConfig::default() }.validate().is_err());
    assert!(AugmentationConfig { drop_fraction: [0.5, 0.2], ..AugmentationConfig::none() }.validate().is_err());
}

#[test]
fn metrics_csv_round_trips() {
    let m = vec![
        EpochMetrics { epoch: 0, lr: 0.004, train_loss: 1.25, val_miou: None },
        EpochMetrics { epoch: 1, lr: 0.00396, train_loss: 0.5, val_miou: Some(0.75) },
    ];
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &m).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("epoch,lr,train_loss,val_mIoU\n0,0.004,1.25,\n"));
    assert_eq!(read_metrics_csv(buf.as_slice()).unwrap(), m);
}
