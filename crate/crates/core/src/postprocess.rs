//! Depth-based nearest-neighbor refinement of re-projected labels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::RangeImage;
use crate::scan_io::{ClassId, LabelSet, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnnConfig {
    /// Odd window side in pixels.
    pub window: usize,
    pub k: usize,
    /// Weight votes by inverse depth distance instead of counting them.
    pub weighted: bool,
    /// Drop candidates farther than this in depth (meters).
    pub cutoff: Option<f64>,
    /// Wrap the window horizontally around the azimuth seam.
    pub circular: bool,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self {
            window: 7,
            k: 7,
            weighted: false,
            cutoff: None,
            circular: false,
        }
    }
}

impl KnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::Config(format!("KNN window must be odd, got {}", self.window)));
        }
        if self.k == 0 || self.k > self.window * self.window {
            return Err(Error::Config(format!(
                "KNN k = {} must be in 1..={}",
                self.k,
                self.window * self.window
            )));
        }
        Ok(())
    }
}

struct Neighborhood<'a> {
    width: usize,
    height: usize,
    /// Pixel depths, NaN where the pixel is empty.
    depth: &'a [f64],
    labels: &'a [ClassId],
    cfg: &'a KnnConfig,
    /// Window offsets `(du, dv, rank order)`, nearest to the center first so the
    /// running top-k fills with likely winners early.
    offsets: &'a [(isize, isize, usize)],
}

/// Candidate sort key: depth distance bits, then the window offset ordered by
/// column then row, then the pixel index. Distances are non-negative so their
/// bit patterns order like the values.
fn key(dist: f64, order: usize, pixel: usize) -> u128 {
    (u128::from(dist.to_bits()) << 64) | ((order as u128) << 32) | pixel as u128
}

/// Keeps the `k` smallest keys offered so far, sorted.
fn offer(top: &mut Vec<u128>, k: usize, key: u128) {
    let mut i = top.len();
    if i == k {
        if key >= top[k - 1] {
            return;
        }
        i -= 1;
    } else {
        top.push(key);
    }
    while i > 0 && top[i - 1] > key {
        top[i] = top[i - 1];
        i -= 1;
    }
    top[i] = key;
}

fn refine_point(n: &Neighborhood, (u, v): (usize, usize), depth: f64, top: &mut Vec<u128>) -> ClassId {
    let (w, h) = (n.width as isize, n.height as isize);
    let cutoff = n.cfg.cutoff.unwrap_or(f64::INFINITY);
    top.clear();
    for &(du, dv, order) in n.offsets {
        let vv = v as isize + dv;
        let mut uu = u as isize + du;
        if vv < 0 || vv >= h {
            continue;
        }
        if n.cfg.circular {
            uu = uu.rem_euclid(w);
        } else if uu < 0 || uu >= w {
            continue;
        }
        let px = vv as usize * n.width + uu as usize;
        // NaN marks an empty pixel and fails this test too.
        let dist = (depth - n.depth[px]).abs();
        if dist <= cutoff {
            offer(top, n.cfg.k, key(dist, order, px));
        }
    }
    if top.is_empty() {
        return n.labels[v * n.width + u];
    }
    let chosen = &top[..];
    // Small class sets: linear scans beat a map.
    let mut tally: Vec<(ClassId, f64)> = Vec::with_capacity(chosen.len());
    for &c in chosen {
        let label = n.labels[(c & 0xFFFF_FFFF) as usize];
        let wgt = if n.cfg.weighted {
            1.0 / (f64::from_bits((c >> 64) as u64) + 1e-6)
        } else {
            1.0
        };
        match tally.iter_mut().find(|(l, _)| *l == label) {
            Some(t) => t.1 += wgt,
            None => tally.push((label, wgt)),
        }
    }
    let best = tally.iter().map(|t| t.1).fold(f64::NEG_INFINITY, f64::max);
    // Among tied classes, the one whose candidate ranks first wins; `tally` is in rank order.
    tally.iter().find(|t| t.1 == best).map_or(tally[0].0, |t| t.0)
}

/// Relabels every point by a vote over the `k` valid pixels of its window whose
/// depth is closest to the point's own range. Candidates are ranked by depth
/// distance, then column offset, then row offset; a vote tie goes to the tied class
/// ranked first. Points without any candidate keep their pixel's label.
pub fn knn_refine(cloud: &PointCloud, img: &RangeImage, pixel_labels: &[ClassId], cfg: &KnnConfig) -> Result<LabelSet> {
    cfg.validate()?;
    if pixel_labels.len() != img.width() * img.height() {
        return Err(Error::Invalid(format!(
            "{} pixel labels for a {}x{} image",
            pixel_labels.len(),
            img.width(),
            img.height()
        )));
    }
    if cloud.len() != img.num_points() {
        return Err(Error::Invalid(format!(
            "cloud has {} points, range image was built from {}",
            cloud.len(),
            img.num_points()
        )));
    }
    if cfg.circular && img.width() < cfg.window {
        return Err(Error::Config("circular KNN window wider than the image".into()));
    }
    let depth: Vec<f64> = img
        .representatives()
        .iter()
        .enumerate()
        .map(|(i, r)| match r {
            Some(_) => img.depth(i % img.width(), i / img.width()) as f64,
            None => f64::NAN,
        })
        .collect();
    let half = (cfg.window / 2) as isize;
    let mut offsets: Vec<(isize, isize, usize)> = (-half..=half)
        .flat_map(|du| (-half..=half).map(move |dv| (du, dv, ((du + half) * (2 * half + 1) + dv + half) as usize)))
        .collect();
    offsets.sort_by_key(|&(du, dv, o)| (du.abs().max(dv.abs()), o));
    let n = Neighborhood {
        offsets: &offsets,
        width: img.width(),
        height: img.height(),
        depth: &depth,
        labels: pixel_labels,
        cfg,
    };
    let labels = cloud
        .points()
        .par_iter()
        .zip(img.point_to_pixel().par_iter())
        .with_min_len(1024)
        .map_init(|| Vec::with_capacity(cfg.k + 1), |buf, (p, &(u, v))| refine_point(&n, (u as usize, v as usize), p.range(), buf))
        .collect();
    Ok(LabelSet::new(labels))
}
