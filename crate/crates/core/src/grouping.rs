//! Sliding-window point groups over a range image and the relative-feature
//! augmentation of each group.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::{RangeImage, C1};

/// Channels after augmentation.
pub const C2: usize = 11;

/// Indices of the group-relative channels (`*_r` and `d_euc`) in the augmented layout.
pub const RELATIVE_CHANNELS: [usize; 6] = [1, 3, 5, 7, 9, 10];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Windows must tile the image exactly.
    #[default]
    None,
    /// Extra windows past the right and bottom edges, filled with absent slots.
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupingConfig {
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self {
            k: 4,
            stride: 4,
            dilation: 1,
            padding: Padding::None,
        }
    }
}

impl GroupingConfig {
    /// Extent of one dilated window along each axis.
    pub fn extent(&self) -> usize {
        self.dilation * (self.k - 1) + 1
    }

    fn windows_along(&self, len: usize, axis: &str) -> Result<usize> {
        let eff = self.extent();
        match self.padding {
            Padding::None => {
                if len < eff || (len - eff) % self.stride != 0 {
                    return Err(Error::Config(format!(
                        "{axis} {len} is not tiled by windows of extent {eff} at stride {}",
                        self.stride
                    )));
                }
                Ok((len - eff) / self.stride + 1)
            }
            Padding::Zero => Ok(if len <= eff {
                1
            } else {
                (len - eff).div_ceil(self.stride) + 1
            }),
        }
    }

    /// Window grid `(rows, cols)` for an image of the given size.
    pub fn grid(&self, width: usize, height: usize) -> Result<(usize, usize)> {
        if self.k == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(Error::Config(format!(
                "k, stride and dilation must be positive, got {self:?}"
            )));
        }
        Ok((
            self.windows_along(height, "height")?,
            self.windows_along(width, "width")?,
        ))
    }
}

/// `P` groups of `N = k*k` slots with `channels` features each, stored `[p][n][c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointGroups {
    pub num_groups: usize,
    pub slots: usize,
    pub channels: usize,
    /// Window grid `(rows, cols)`; groups are numbered row-major over it.
    pub grid: (usize, usize),
    pub data: Vec<f64>,
    /// Source pixel `(u, v)` of each slot, `None` outside the image.
    pub origin: Vec<Option<(u32, u32)>>,
    pub present: Vec<bool>,
}

impl PointGroups {
    pub fn slot(&self, p: usize, n: usize) -> &[f64] {
        let i = (p * self.slots + n) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Features as `[c][p][n]`, optionally with the relative channels zeroed.
    pub fn to_channel_major<T: Copy>(&self, keep_relative: bool, cast: impl Fn(f64) -> T, zero: T) -> Vec<T> {
        let (c, pn) = (self.channels, self.num_groups * self.slots);
        let mut out = vec![zero; c * pn];
        for (i, f) in self.data.chunks_exact(c).enumerate() {
            for (ch, &v) in f.iter().enumerate() {
                if keep_relative || c != C2 || !RELATIVE_CHANNELS.contains(&ch) {
                    out[ch * pn + i] = cast(v);
                }
            }
        }
        out
    }
}

/// Groups the image's `C1` features with a sliding `k x k` window. Windows are
/// enumerated row-major by origin, slots row-major over the dilated lattice; empty
/// or out-of-image pixels become absent, all-zero slots.
pub fn make_groups(img: &RangeImage, cfg: &GroupingConfig) -> Result<PointGroups> {
    let (w, h) = (img.width(), img.height());
    let (rows, cols) = cfg.grid(w, h)?;
    let (k, s, d) = (cfg.k, cfg.stride, cfg.dilation);
    let n = k * k;
    let p = rows * cols;
    let mut data = vec![0.0; p * n * C1];
    let mut origin = vec![None; p * n];
    let mut present = vec![false; p * n];
    for gy in 0..rows {
        for gx in 0..cols {
            let g = gy * cols + gx;
            for a in 0..k {
                for b in 0..k {
                    let (v, u) = (gy * s + a * d, gx * s + b * d);
                    if v >= h || u >= w {
                        continue;
                    }
                    let slot = g * n + a * k + b;
                    origin[slot] = Some((u as u32, v as u32));
                    if img.is_valid(u, v) {
                        present[slot] = true;
                        for (dst, &src) in data[slot * C1..(slot + 1) * C1].iter_mut().zip(img.feature(u, v)) {
                            *dst = src as f64;
                        }
                    }
                }
            }
        }
    }
    Ok(PointGroups {
        num_groups: p,
        slots: n,
        channels: C1,
        grid: (rows, cols),
        data,
        origin,
        present,
    })
}

/// Adds the group-relative channels: each `C1` value minus its mean over the
/// group's present slots, and the Euclidean distance of `(x, y, z)` to that mean.
/// Output channel order: `x, x_r, y, y_r, z, z_r, depth, depth_r, rem, rem_r, d_euc`.
pub fn augment_features(groups: &PointGroups) -> Result<PointGroups> {
    if groups.channels != C1 {
        return Err(Error::Invalid(format!(
            "augmentation expects {C1} channels, got {}",
            groups.channels
        )));
    }
    let n = groups.slots;
    let mut data = vec![0.0; groups.num_groups * n * C2];
    for g in 0..groups.num_groups {
        let mut mean = [0.0f64; C1];
        let mut count = 0usize;
        for s in 0..n {
            if groups.present[g * n + s] {
                for (m, &v) in mean.iter_mut().zip(groups.slot(g, s)) {
                    *m += v;
                }
                count += 1;
            }
        }
        if count == 0 {
            continue;
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        for s in 0..n {
            if !groups.present[g * n + s] {
                continue;
            }
            let f = groups.slot(g, s);
            let out = &mut data[(g * n + s) * C2..(g * n + s + 1) * C2];
            for c in 0..C1 {
                out[2 * c] = f[c];
                out[2 * c + 1] = f[c] - mean[c];
            }
            out[10] = (out[1] * out[1] + out[3] * out[3] + out[5] * out[5]).sqrt();
        }
    }
    Ok(PointGroups {
        data,
        channels: C2,
        origin: groups.origin.clone(),
        present: groups.present.clone(),
        ..*groups
    })
}

/// [`make_groups`] followed by [`augment_features`].
pub fn build_groups(img: &RangeImage, cfg: &GroupingConfig) -> Result<PointGroups> {
    augment_features(&make_groups(img, cfg)?)
}
