//! Class balancing, augmentation and the SGD training loop.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::model::{Model, ModelInput};
use crate::pipeline::{evaluate, model_input, prepare, Geometry};
use crate::scan_io::{ClassId, LabelSet, Point, PointCloud, DEFAULT_IGNORE_ID};
use crate::tensor::{Array, Graph, Real, SgdConfig};

/// Class frequencies and the balanced weights `w_c = (f_t / f_c)^i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub frequencies: Vec<f64>,
    /// Median of the nonzero frequencies.
    pub median: f64,
    pub power: f64,
    pub weights: Vec<f64>,
    pub ignore_id: ClassId,
}

/// Weights from raw per-class point counts. Absent classes get weight 0.
pub fn class_weights_from_counts(counts: &[u64], power: f64, ignore_id: ClassId) -> Result<LossSpec> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Invalid("no labeled points to compute class weights from".into()));
    }
    let frequencies: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let mut nonzero: Vec<f64> = frequencies.iter().copied().filter(|&f| f > 0.0).collect();
    nonzero.sort_by(f64::total_cmp);
    let n = nonzero.len();
    let median = if n % 2 == 1 {
        nonzero[n / 2]
    } else {
        0.5 * (nonzero[n / 2 - 1] + nonzero[n / 2])
    };
    let weights = frequencies
        .iter()
        .map(|&f| if f > 0.0 { (median / f).powf(power) } else { 0.0 })
        .collect();
    Ok(LossSpec {
        frequencies,
        median,
        power,
        weights,
        ignore_id,
    })
}

/// Counts point labels over a dataset and derives the balanced weights.
pub fn compute_class_weights<'a>(
    labels: impl IntoIterator<Item = &'a LabelSet>,
    num_classes: usize,
    power: f64,
    ignore_id: ClassId,
) -> Result<LossSpec> {
    let mut counts = vec![0u64; num_classes];
    for set in labels {
        set.validate(num_classes, ignore_id)?;
        for &l in &set.labels {
            if l != ignore_id {
                counts[l as usize] += 1;
            }
        }
    }
    class_weights_from_counts(&counts, power, ignore_id)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    /// Rotation about z, standard deviation in degrees.
    pub rotation_std_deg: f64,
    /// Per-axis shift standard deviation in meters.
    pub shift_std: [f64; 3],
    pub flip_x: bool,
    pub flip_z: bool,
    /// Fraction of points dropped, drawn uniformly from this range.
    pub drop_fraction: [f64; 2],
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            rotation_std_deg: 40.0,
            shift_std: [0.35, 0.35, 0.01],
            flip_x: true,
            flip_z: true,
            drop_fraction: [0.0, 0.10],
        }
    }
}

impl AugmentationConfig {
    pub fn none() -> Self {
        Self {
            rotation_std_deg: 0.0,
            shift_std: [0.0; 3],
            flip_x: false,
            flip_z: false,
            drop_fraction: [0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.drop_fraction;
        if self.rotation_std_deg < 0.0 || self.shift_std.iter().any(|&s| s < 0.0) || !(0.0..1.0).contains(&lo) || !(lo..1.0).contains(&hi) {
            return Err(Error::Config(format!("invalid augmentation {self:?}")));
        }
        Ok(())
    }
}

/// One concrete augmentation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Transform {
    /// Rotation about z in radians.
    pub angle: f64,
    pub shift: [f64; 3],
    pub flip_x: bool,
    pub flip_z: bool,
    /// Sorted indices of points to remove.
    pub drop: Vec<usize>,
}

pub fn sample_transform(cfg: &AugmentationConfig, num_points: usize, rng: &mut ChaCha8Rng) -> Result<Transform> {
    cfg.validate()?;
    let normal = |std: f64, rng: &mut ChaCha8Rng| -> Result<f64> {
        Ok(Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?.sample(rng))
    };
    let angle = normal(cfg.rotation_std_deg, rng)?.to_radians();
    let shift = [
        normal(cfg.shift_std[0], rng)?,
        normal(cfg.shift_std[1], rng)?,
        normal(cfg.shift_std[2], rng)?,
    ];
    let flip_x = cfg.flip_x && rng.random_bool(0.5);
    let flip_z = cfg.flip_z && rng.random_bool(0.5);
    let [lo, hi] = cfg.drop_fraction;
    let frac = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let n_drop = ((frac * num_points as f64).round() as usize).min(num_points.saturating_sub(1));
    let mut drop = index::sample(rng, num_points, n_drop).into_vec();
    drop.sort_unstable();
    Ok(Transform {
        angle,
        shift,
        flip_x,
        flip_z,
        drop,
    })
}

/// Rotates, shifts, flips, then removes the listed points (and their labels).
/// Points that end up exactly at the origin are removed too.
pub fn apply_transform(cloud: &PointCloud, labels: &LabelSet, t: &Transform) -> Result<(PointCloud, LabelSet)> {
    if labels.len() != cloud.len() {
        return Err(Error::Invalid(format!(
            "{} labels for {} points",
            labels.len(),
            cloud.len()
        )));
    }
    let (s, c) = t.angle.sin_cos();
    let mut drop = t.drop.iter().peekable();
    let mut points = Vec::with_capacity(cloud.len());
    let mut out_labels = Vec::with_capacity(cloud.len());
    for (i, (p, &l)) in cloud.points().iter().zip(&labels.labels).enumerate() {
        if drop.peek() == Some(&&i) {
            drop.next();
            continue;
        }
        let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
        let mut q = [c * x - s * y + t.shift[0], s * x + c * y + t.shift[1], z + t.shift[2]];
        if t.flip_x {
            q[0] = -q[0];
        }
        if t.flip_z {
            q[2] = -q[2];
        }
        let np = Point::new(q[0] as f32, q[1] as f32, q[2] as f32, p.remission);
        if np.range() == 0.0 {
            continue;
        }
        points.push(np);
        out_labels.push(l);
    }
    Ok((PointCloud::new(points)?, LabelSet::new(out_labels)))
}

pub fn augment_scan(
    cloud: &PointCloud,
    labels: &LabelSet,
    cfg: &AugmentationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(PointCloud, LabelSet)> {
    let t = sample_transform(cfg, cloud.len(), rng)?;
    apply_transform(cloud, labels, &t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: bool,
    pub augmentation: AugmentationConfig,
    /// Compute validation mIoU every this many epochs (0 disables it).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 8,
            lr0: 4e-3,
            lr_decay: 0.99,
            momentum: 0.0,
            weight_decay: 0.0,
            seed: 0,
            augment: true,
            augmentation: AugmentationConfig::default(),
            val_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "need lr0 >= 0 and 0 < lr_decay <= 1, got {} and {}",
                self.lr0, self.lr_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0, 1) and weight decay >= 0".into()));
        }
        self.augmentation.validate()
    }
}

/// `lr0 * decay^epoch`.
pub fn learning_rate(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    #[serde(rename = "val_mIoU")]
    pub val_miou: Option<f64>,
}

/// Writes `epoch,lr,train_loss,val_mIoU` rows; epochs without validation leave the last field empty.
pub fn write_metrics_csv(w: impl std::io::Write, metrics: &[EpochMetrics]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for m in metrics {
        out.serialize(m).map_err(|e| Error::Format(e.to_string()))?;
    }
    if metrics.is_empty() {
        out.write_record(["epoch", "lr", "train_loss", "val_mIoU"])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    out.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

pub fn read_metrics_csv(r: impl std::io::Read) -> Result<Vec<EpochMetrics>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format(e.to_string()))
}

struct Prepped<T> {
    input: ModelInput<T>,
    targets: Vec<u32>,
}

fn prep_sample<T: Real>(
    cloud: &PointCloud,
    labels: &LabelSet,
    geom: &Geometry,
    keep_relative: bool,
    ignore_id: ClassId,
) -> Result<Prepped<T>> {
    let p = prepare(cloud, geom)?;
    let targets = p
        .image
        .pixel_labels(labels, ignore_id)
        .into_iter()
        .map(u32::from)
        .collect();
    Ok(Prepped {
        input: model_input(&[&p], keep_relative)?,
        targets,
    })
}

fn stack<T: Real>(items: &[&Prepped<T>]) -> Result<(ModelInput<T>, Vec<u32>)> {
    let first = &items[0].input;
    let cat = |get: &dyn Fn(&ModelInput<T>) -> &Array<T>| -> Result<Array<T>> {
        let mut shape = get(first).shape().to_vec();
        shape[0] = items.len();
        let data = items.iter().flat_map(|p| get(&p.input).data().iter().copied()).collect();
        Ok(Array::from_vec(&shape, data)?)
    };
    Ok((
        ModelInput {
            groups: cat(&|i| &i.groups)?,
            grid: first.grid,
            image: cat(&|i| &i.image)?,
        },
        items.iter().flat_map(|p| p.targets.iter().copied()).collect(),
    ))
}

/// One SGD step on a batch; returns the batch loss.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    input: &ModelInput<T>,
    targets: &[u32],
    loss: &LossSpec,
    sgd: &SgdConfig,
) -> Result<f64> {
    let weights: Vec<T> = loss.weights.iter().map(|&w| T::lit(w)).collect();
    let mut g = Graph::new();
    let logits = model.forward(&mut g, input, true)?;
    let l = g.weighted_cross_entropy(logits, targets, &weights, u32::from(loss.ignore_id))?;
    let value = g.value(l).data()[0].to_f64_lossy();
    let grads = g.backward(l)?;
    model.store_mut().accumulate(&g, &grads);
    model.update_running_stats(&g);
    model.store_mut().sgd_step_with(sgd);
    Ok(value)
}

/// Trains `model` for `tcfg.epochs` epochs. Each epoch shuffles the samples,
/// augments them when enabled, and takes one SGD step per batch at
/// `lr0 * decay^epoch`. `on_epoch` runs after every epoch (e.g. to write metrics
/// and checkpoints).
pub fn train<T: Real>(
    model: &mut Model<T>,
    train_set: &[Sample],
    val_set: Option<&[Sample]>,
    loss: &LossSpec,
    tcfg: &TrainConfig,
    geom: &Geometry,
    mut on_epoch: impl FnMut(&EpochMetrics, &Model<T>) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    tcfg.validate()?;
    geom.validate()?;
    if train_set.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    if loss.weights.len() != model.config().num_classes {
        return Err(Error::Config(format!(
            "{} class weights for a {}-class model",
            loss.weights.len(),
            model.config().num_classes
        )));
    }
    let labels_of = |s: &Sample| -> Result<LabelSet> {
        s.labels
            .clone()
            .ok_or_else(|| Error::Invalid(format!("training scan {} has no labels", s.id)))
    };
    let keep_relative = model.config().extractors.relative_features;
    let cached: Option<Vec<Prepped<T>>> = if tcfg.augment {
        None
    } else {
        Some(
            train_set
                .iter()
                .map(|s| prep_sample(&s.cloud, &labels_of(s)?, geom, keep_relative, loss.ignore_id))
                .collect::<Result<_>>()?,
        )
    };
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(tcfg.epochs);
    for epoch in 0..tcfg.epochs {
        let lr = learning_rate(tcfg.lr0, tcfg.lr_decay, epoch);
        let sgd = SgdConfig {
            lr,
            momentum: tcfg.momentum,
            weight_decay: tcfg.weight_decay,
        };
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (bi, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let fresh: Vec<Prepped<T>>;
            let items: Vec<&Prepped<T>> = match &cached {
                Some(c) => chunk.iter().map(|&i| &c[i]).collect(),
                None => {
                    fresh = chunk
                        .iter()
                        .map(|&i| {
                            let s = &train_set[i];
                            let (cloud, labels) = augment_scan(&s.cloud, &labels_of(s)?, &tcfg.augmentation, &mut rng)?;
                            prep_sample(&cloud, &labels, geom, keep_relative, loss.ignore_id)
                        })
                        .collect::<Result<_>>()?;
                    fresh.iter().collect()
                }
            };
            let (input, targets) = stack(&items)?;
            let l = match train_step(model, &input, &targets, loss, &sgd) {
                Err(Error::Tensor(crate::tensor::TensorError::NoTargets)) => continue,
                r => r?,
            };
            if !l.is_finite() {
                return Err(Error::Diverged { epoch, batch: bi, loss: l });
            }
            total += l;
            batches += 1;
        }
        let val_miou = match val_set {
            Some(v) if tcfg.val_every > 0 && (epoch + 1) % tcfg.val_every == 0 => {
                Some(evaluate(model, v, geom, None, loss.ignore_id)?.iou()?.mean)
            }
            _ => None,
        };
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: if batches > 0 { total / batches as f64 } else { f64::NAN },
            val_miou,
        };
        on_epoch(&m, model)?;
        history.push(m);
    }
    Ok(history)
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            frequencies: Vec::new(),
            median: 0.0,
            power: 0.25,
            weights: Vec::new(),
            ignore_id: DEFAULT_IGNORE_ID,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_fixtures() {
        let w = class_weights_from_counts(&[5, 5, 5, 5], 0.25, 99).unwrap();
        assert_eq!(w.weights, vec![1.0; 4]);
        // frequencies 16/49, 16/49, 16/49, 1/49: median 16/49, rare class weight 16^0.25
        let w = class_weights_from_counts(&[16, 16, 16, 1], 0.25, 99).unwrap();
        assert_eq!(w.weights[3], 2.0);
        assert_eq!(w.weights[0], 1.0);
        let w = class_weights_from_counts(&[3, 0, 9], 0.5, 99).unwrap();
        assert_eq!(w.weights[1], 0.0);
        assert!(class_weights_from_counts(&[0, 0], 0.25, 99).is_err());
    }

    #[test]
    fn lr_schedule() {
        assert_eq!(learning_rate(4e-3, 0.99, 0), 4e-3);
        assert_eq!(learning_rate(4e-3, 0.99, 3), 4e-3 * 0.99f64.powi(3));
    }
}
