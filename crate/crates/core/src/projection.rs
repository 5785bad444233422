//! Spherical projection of a scan onto a `W x H` range image.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::scan_io::{ClassId, LabelSet, Point, PointCloud};

/// Number of per-pixel features: x, y, z, depth, remission.
pub const C1: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub width: usize,
    pub height: usize,
    /// Upward field of view in radians.
    pub fov_up: f64,
    /// Downward field of view in radians (positive below the horizon).
    pub fov_down: f64,
}

impl ProjectionConfig {
    pub fn new(width: usize, height: usize, fov_up: f64, fov_down: f64) -> Result<Self> {
        let cfg = Self {
            width,
            height,
            fov_up,
            fov_down,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_degrees(width: usize, height: usize, up_deg: f64, down_deg: f64) -> Result<Self> {
        Self::new(width, height, up_deg.to_radians(), down_deg.to_radians())
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config(format!(
                "image must be non-empty, got {}x{}",
                self.width, self.height
            )));
        }
        if !(self.fov().is_finite() && self.fov() > 0.0) {
            return Err(Error::Config(format!(
                "vertical field of view must be positive, got up={} down={}",
                self.fov_up, self.fov_down
            )));
        }
        Ok(())
    }

    pub fn fov(&self) -> f64 {
        self.fov_up + self.fov_down
    }

    fn pixel_of(&self, x: f64, y: f64, z: f64, r: f64) -> (usize, usize) {
        let (w, h) = (self.width as f64, self.height as f64);
        let u = (0.5 * (1.0 - y.atan2(x) / std::f64::consts::PI) * w).floor();
        let v = ((1.0 - ((z / r).asin() + self.fov_down) / self.fov()) * h).floor();
        (
            u.clamp(0.0, w - 1.0) as usize,
            v.clamp(0.0, h - 1.0) as usize,
        )
    }
}

/// Pixel `(u, v)` of a point: `u` is the column (azimuth), `v` the row (elevation).
pub fn project_point(p: &Point, cfg: &ProjectionConfig) -> Result<(usize, usize)> {
    let r = p.range();
    if r == 0.0 {
        return Err(Error::DegeneratePoint(None));
    }
    Ok(cfg.pixel_of(p.x as f64, p.y as f64, p.z as f64, r))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RangeImage {
    width: usize,
    height: usize,
    /// `[v][u][c]` features of the representative point, zero where empty.
    features: Vec<f32>,
    representative: Vec<Option<u32>>,
    point_to_pixel: Vec<(u32, u32)>,
}

impl RangeImage {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn feature(&self, u: usize, v: usize) -> &[f32] {
        let i = (v * self.width + u) * C1;
        &self.features[i..i + C1]
    }

    pub fn depth(&self, u: usize, v: usize) -> f32 {
        self.features[(v * self.width + u) * C1 + 3]
    }

    pub fn representative(&self, u: usize, v: usize) -> Option<u32> {
        self.representative[v * self.width + u]
    }

    /// Representatives for all pixels, row-major.
    pub fn representatives(&self) -> &[Option<u32>] {
        &self.representative
    }

    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.representative(u, v).is_some()
    }

    pub fn valid_count(&self) -> usize {
        self.representative.iter().filter(|r| r.is_some()).count()
    }

    /// `(u, v)` of every point, in cloud order.
    pub fn point_to_pixel(&self) -> &[(u32, u32)] {
        &self.point_to_pixel
    }

    pub fn num_points(&self) -> usize {
        self.point_to_pixel.len()
    }

    /// Features as `[c][v][u]` planes.
    pub fn to_planes(&self) -> Vec<f32> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; C1 * hw];
        for (i, px) in self.features.chunks_exact(C1).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * hw + i] = v;
            }
        }
        out
    }

    /// Labels of the representative points, `ignore` where a pixel is empty.
    pub fn pixel_labels(&self, labels: &LabelSet, ignore: ClassId) -> Vec<ClassId> {
        self.representative
            .iter()
            .map(|r| r.map_or(ignore, |m| labels.labels[m as usize]))
            .collect()
    }

    /// Writes the `[v][u][c]` features as little-endian `f32` and a text header next
    /// to it (same path with a `.txt` extension).
    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self.features.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(path, bytes).map_err(io_err(path))?;
        let hdr = path.with_extension("txt");
        let mut f = std::fs::File::create(&hdr).map_err(io_err(&hdr))?;
        writeln!(
            f,
            "width {}\nheight {}\nchannels x y z depth remission\nlayout row col channel\ndtype f32le",
            self.width, self.height
        )
        .map_err(io_err(&hdr))
    }
}

/// Projects every point; when several share a pixel the nearest one (lowest index
/// on equal depth) becomes the representative.
pub fn build_range_image(cloud: &PointCloud, cfg: &ProjectionConfig) -> Result<RangeImage> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let mut best: Vec<Option<(f64, u32)>> = vec![None; w * h];
    let mut point_to_pixel = Vec::with_capacity(cloud.len());
    for (m, p) in cloud.points().iter().enumerate() {
        let r = p.range();
        if r == 0.0 {
            return Err(Error::DegeneratePoint(Some(m)));
        }
        let (u, v) = cfg.pixel_of(p.x as f64, p.y as f64, p.z as f64, r);
        point_to_pixel.push((u as u32, v as u32));
        let slot = &mut best[v * w + u];
        if slot.is_none_or(|(d, _)| r < d) {
            *slot = Some((r, m as u32));
        }
    }
    let mut features = vec![0.0f32; w * h * C1];
    let representative: Vec<Option<u32>> = best.iter().map(|b| b.map(|(_, m)| m)).collect();
    for (i, b) in best.iter().enumerate() {
        if let Some((r, m)) = *b {
            let p = cloud.points()[m as usize];
            features[i * C1..(i + 1) * C1].copy_from_slice(&[p.x, p.y, p.z, r as f32, p.remission]);
        }
    }
    Ok(RangeImage {
        width: w,
        height: h,
        features,
        representative,
        point_to_pixel,
    })
}

/// Gives every point the label of the pixel it projects to.
pub fn reproject_labels(img: &RangeImage, pixel_labels: &[ClassId]) -> Result<LabelSet> {
    if pixel_labels.len() != img.width * img.height {
        return Err(Error::Invalid(format!(
            "{} pixel labels for a {}x{} image",
            pixel_labels.len(),
            img.width,
            img.height
        )));
    }
    Ok(LabelSet::new(
        img.point_to_pixel
            .iter()
            .map(|&(u, v)| pixel_labels[v as usize * img.width + u as usize])
            .collect(),
    ))
}
