//! End-to-end helpers: scan to network input, inference, evaluation and timing.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::evaluation::{summarize, BenchReport, ConfusionMatrix};
use crate::grouping::{build_groups, GroupingConfig, PointGroups};
use crate::model::{Model, ModelInput};
use crate::postprocess::{knn_refine, KnnConfig};
use crate::projection::{build_range_image, reproject_labels, ProjectionConfig, RangeImage};
use crate::scan_io::{ClassId, LabelSet, PointCloud};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub projection: ProjectionConfig,
    pub grouping: GroupingConfig,
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        self.projection.validate()?;
        self.grouping.grid(self.projection.width, self.projection.height)?;
        Ok(())
    }
}

pub struct Prepared {
    pub image: RangeImage,
    pub groups: PointGroups,
}

pub fn prepare(cloud: &PointCloud, geom: &Geometry) -> Result<Prepared> {
    let image = build_range_image(cloud, &geom.projection)?;
    let groups = build_groups(&image, &geom.grouping)?;
    Ok(Prepared { image, groups })
}

pub fn model_input<T: Real>(items: &[&Prepared], keep_relative: bool) -> Result<ModelInput<T>> {
    let pairs: Vec<(&PointGroups, &RangeImage)> = items.iter().map(|p| (&p.groups, &p.image)).collect();
    ModelInput::from_scans(&pairs, keep_relative)
}

/// Pixel predictions for one prepared scan.
pub fn predict_pixels<T: Real>(model: &Model<T>, prep: &Prepared) -> Result<Vec<ClassId>> {
    let input = model_input(&[prep], model.config().extractors.relative_features)?;
    Ok(model.predict(&input)?.remove(0))
}

/// Per-point labels: pixel predictions carried back to every point, optionally
/// refined by the KNN vote.
pub fn infer<T: Real>(model: &Model<T>, cloud: &PointCloud, geom: &Geometry, knn: Option<&KnnConfig>) -> Result<LabelSet> {
    let prep = prepare(cloud, geom)?;
    let pixels = predict_pixels(model, &prep)?;
    match knn {
        Some(k) => knn_refine(cloud, &prep.image, &pixels, k),
        None => reproject_labels(&prep.image, &pixels),
    }
}

/// Confusion matrix of the model's predictions over labeled samples, scans in parallel.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    samples: &[Sample],
    geom: &Geometry,
    knn: Option<&KnnConfig>,
    ignore_id: ClassId,
) -> Result<ConfusionMatrix> {
    let nc = model.config().num_classes;
    let parts = samples
        .par_iter()
        .map(|s| {
            let truth = s
                .labels
                .as_ref()
                .ok_or_else(|| Error::Invalid(format!("scan {} has no labels", s.id)))?;
            let pred = infer(model, &s.cloud, geom, knn)?;
            let mut cm = ConfusionMatrix::new(nc, ignore_id);
            cm.accumulate(truth, &pred)?;
            Ok(cm)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cm = ConfusionMatrix::new(nc, ignore_id);
    for part in &parts {
        cm.merge(part)?;
    }
    Ok(cm)
}

pub const BENCH_STAGES: [&str; 5] = ["project", "group", "forward", "reproject", "knn"];

/// Times every stage per scan after `warmup` untimed scans. Without a model the
/// forward stage is skipped and the label image is all zeros. Rows: one per stage,
/// `non_learning` (project + group + reproject + knn) and `end_to_end`.
pub fn bench<T: Real>(
    model: Option<&Model<T>>,
    clouds: &[PointCloud],
    geom: &Geometry,
    knn: &KnnConfig,
    warmup: usize,
) -> Result<BenchReport> {
    if clouds.is_empty() {
        return Err(Error::Invalid("bench needs at least one scan".into()));
    }
    let mut times: Vec<Vec<Duration>> = vec![Vec::new(); BENCH_STAGES.len() + 2];
    let total = warmup + clouds.len();
    for i in 0..total {
        let cloud = &clouds[i % clouds.len()];
        let mut t = [Duration::ZERO; 5];
        let start = Instant::now();
        let s = Instant::now();
        let image = build_range_image(cloud, &geom.projection)?;
        t[0] = s.elapsed();
        let s = Instant::now();
        let groups = build_groups(&image, &geom.grouping)?;
        t[1] = s.elapsed();
        let prep = Prepared { image, groups };
        let s = Instant::now();
        let pixels = match model {
            Some(m) => predict_pixels(m, &prep)?,
            None => vec![0; geom.projection.width * geom.projection.height],
        };
        t[2] = s.elapsed();
        let s = Instant::now();
        let labels = reproject_labels(&prep.image, &pixels)?;
        t[3] = s.elapsed();
        let s = Instant::now();
        let refined = knn_refine(cloud, &prep.image, &pixels, knn)?;
        t[4] = s.elapsed();
        let e2e = start.elapsed();
        std::hint::black_box((labels, refined));
        if i >= warmup {
            for (k, d) in t.iter().enumerate() {
                times[k].push(*d);
            }
            times[5].push(t[0] + t[1] + t[3] + t[4]);
            times[6].push(e2e);
        }
    }
    let mut stages: Vec<_> = BENCH_STAGES
        .iter()
        .enumerate()
        .map(|(k, name)| summarize(name, &times[k]))
        .collect();
    stages.push(summarize("non_learning", &times[5]));
    stages.push(summarize("end_to_end", &times[6]));
    Ok(BenchReport { stages })
}
