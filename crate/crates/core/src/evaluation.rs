//! Confusion matrices, IoU and stage timing reports.

use std::io::{Read, Write};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scan_io::{ClassId, LabelSet};

/// Rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    ignore_id: ClassId,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize, ignore_id: ClassId) -> Self {
        Self {
            num_classes,
            ignore_id,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every point whose truth label is not the ignore id.
    pub fn accumulate(&mut self, truth: &LabelSet, pred: &LabelSet) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::Invalid(format!(
                "truth has {} labels, prediction {}",
                truth.len(),
                pred.len()
            )));
        }
        let nc = self.num_classes;
        for (i, (&t, &p)) in truth.labels.iter().zip(&pred.labels).enumerate() {
            if t == self.ignore_id {
                continue;
            }
            if t as usize >= nc || p as usize >= nc {
                return Err(Error::Invalid(format!(
                    "point {i}: labels ({t}, {p}) outside {nc} classes"
                )));
            }
            self.counts[t as usize * nc + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Invalid("cannot merge matrices of different sizes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class `TP / (TP + FP + FN)`; classes with a zero denominator are `None`
    /// and left out of the mean.
    pub fn iou(&self) -> Result<IouReport> {
        let nc = self.num_classes;
        let per_class: Vec<Option<f64>> = (0..nc)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..nc).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..nc).map(|t| self.get(t, c)).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::Invalid("no class has any truth or prediction".into()));
        }
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        Ok(IouReport { per_class, mean })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl IouReport {
    /// CSV with columns `class,iou`; absent classes have an empty value and the
    /// final row is `mIoU`.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let fail = |e: csv::Error| Error::Format(e.to_string());
        wr.write_record(["class", "iou"]).map_err(fail)?;
        for (c, v) in self.per_class.iter().enumerate() {
            wr.write_record([c.to_string(), v.map(|v| format!("{v:.6}")).unwrap_or_default()])
                .map_err(fail)?;
        }
        wr.write_record(["mIoU".to_string(), format!("{:.6}", self.mean)])
            .map_err(fail)?;
        wr.flush().map_err(|e| Error::Format(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub median_ms: f64,
    pub p95_ms: f64,
}

/// Median and 95th percentile (nearest rank) of the samples in milliseconds.
pub fn summarize(stage: &str, samples: &[Duration]) -> StageTiming {
    let mut ms: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1e3).collect();
    ms.sort_by(f64::total_cmp);
    let n = ms.len();
    let (median, p95) = if n == 0 {
        (0.0, 0.0)
    } else {
        let median = if n % 2 == 1 {
            ms[n / 2]
        } else {
            0.5 * (ms[n / 2 - 1] + ms[n / 2])
        };
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        (median, ms[rank - 1])
    };
    StageTiming {
        stage: stage.to_string(),
        median_ms: median,
        p95_ms: p95,
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchReport {
    pub stages: Vec<StageTiming>,
}

impl BenchReport {
    pub fn stage(&self, name: &str) -> Option<&StageTiming> {
        self.stages.iter().find(|s| s.stage == name)
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for s in &self.stages {
            wr.serialize(s).map_err(|e| Error::Format(e.to_string()))?;
        }
        wr.flush().map_err(|e| Error::Format(e.to_string()))
    }

    pub fn read_csv(r: impl Read) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let stages = rd
            .deserialize()
            .collect::<std::result::Result<Vec<StageTiming>, _>>()
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self { stages })
    }
}
