//! KITTI-style binary scans (`x y z remission` as little-endian `f32`) and
//! SemanticKITTI-style label files (one little-endian `u32` per point, semantic
//! class in the low 16 bits).

use std::path::Path;

use crate::error::{io_err, Error, Result};

pub type ClassId = u16;

/// Label value used for unlabeled points unless configured otherwise.
pub const DEFAULT_IGNORE_ID: ClassId = ClassId::MAX;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub remission: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, remission: f32) -> Self {
        Self { x, y, z, remission }
    }

    pub fn range(&self) -> f64 {
        let (x, y, z) = (self.x as f64, self.y as f64, self.z as f64);
        (x * x + y * y + z * z).sqrt()
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.remission.is_finite()
    }
}

/// A non-empty scan of finite points, in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Format("no points".into()));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::Format(format!("non-finite value at point {i}")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }
}

/// Per-point class ids aligned with a [`PointCloud`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelSet {
    pub labels: Vec<ClassId>,
}

impl LabelSet {
    pub fn new(labels: Vec<ClassId>) -> Self {
        Self { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Checks that every label is either `ignore_id` or below `num_classes`.
    pub fn validate(&self, num_classes: usize, ignore_id: ClassId) -> Result<()> {
        match self
            .labels
            .iter()
            .position(|&l| l != ignore_id && l as usize >= num_classes)
        {
            Some(i) => Err(Error::Format(format!(
                "label {} at point {i} is not below {num_classes} classes",
                self.labels[i]
            ))),
            None => Ok(()),
        }
    }
}

pub fn decode_scan(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() % 16 != 0 {
        return Err(Error::Format(format!(
            "scan length {} is not a multiple of 16 bytes",
            bytes.len()
        )));
    }
    let points = bytes
        .chunks_exact(16)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes([c[i], c[i + 1], c[i + 2], c[i + 3]]);
            Point::new(f(0), f(4), f(8), f(12))
        })
        .collect();
    PointCloud::new(points)
}

pub fn encode_scan(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for p in cloud.points() {
        for v in [p.x, p.y, p.z, p.remission] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_scan(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_scan(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        e => e,
    })
}

pub fn write_scan(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_scan(cloud)).map_err(io_err(path))
}

/// Decodes `m` label words, keeping the low 16 bits of each.
pub fn decode_labels(bytes: &[u8], m: usize) -> Result<LabelSet> {
    if bytes.len() != 4 * m {
        return Err(Error::Format(format!(
            "label file holds {} bytes, expected {} for {m} points",
            bytes.len(),
            4 * m
        )));
    }
    let labels = bytes
        .chunks_exact(4)
        .map(|c| (u32::from_le_bytes([c[0], c[1], c[2], c[3]]) & 0xFFFF) as ClassId)
        .collect();
    Ok(LabelSet { labels })
}

pub fn encode_labels(labels: &LabelSet) -> Vec<u8> {
    labels
        .labels
        .iter()
        .flat_map(|&l| (l as u32).to_le_bytes())
        .collect()
}

pub fn read_labels(path: impl AsRef<Path>, m: usize) -> Result<LabelSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_labels(&bytes, m).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        e => e,
    })
}

/// Writes one word per point with the instance bits zeroed.
pub fn write_predictions(labels: &LabelSet, path: impl AsRef<Path>) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Invalid("refusing to write an empty label set".into()));
    }
    let path = path.as_ref();
    std::fs::write(path, encode_labels(labels)).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_two_points() {
        let mut bytes = Vec::new();
        for v in [1.0f32, 0.0, 0.0, 0.5, 0.0, 1.0, 0.0, 0.2] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let c = decode_scan(&bytes).unwrap();
        assert_eq!(c.points(), &[Point::new(1.0, 0.0, 0.0, 0.5), Point::new(0.0, 1.0, 0.0, 0.2)]);
    }

    #[test]
    fn empty_truncated_and_nan_scans_fail() {
        assert!(matches!(decode_scan(&[]), Err(Error::Format(m)) if m == "no points"));
        assert!(decode_scan(&[0; 17]).is_err());
        let mut bytes = vec![0u8; 32];
        bytes[16 + 8..16 + 12].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = decode_scan(&bytes).unwrap_err().to_string();
        assert!(err.contains("point 1"), "{err}");
    }

    #[test]
    fn label_words_drop_instance_bits() {
        let bytes: Vec<u8> = [0x0002_0001u32, 0].iter().flat_map(|w| w.to_le_bytes()).collect();
        assert_eq!(decode_labels(&bytes, 2).unwrap().labels, vec![1, 0]);
        let err = decode_labels(&[0; 4000], 999).unwrap_err().to_string();
        assert!(err.contains("4000") && err.contains("3996"), "{err}");
    }

    #[test]
    fn prediction_words() {
        let l = LabelSet::new(vec![3, 0, 7]);
        let b = encode_labels(&l);
        assert_eq!(b.len(), 12);
        assert_eq!(b, [3u32, 0, 7].iter().flat_map(|w| w.to_le_bytes()).collect::<Vec<_>>());
        assert!(write_predictions(&LabelSet::default(), "/nonexistent/x").is_err());
    }
}
