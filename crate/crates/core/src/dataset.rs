//! Scan/label directories laid out as `velodyne/<id>.bin` and `labels/<id>.label`.

use std::path::{Path, PathBuf};

use crate::error::{io_err, Error, Result};
use crate::scan_io::{read_labels, read_scan, LabelSet, PointCloud};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanEntry {
    pub id: String,
    pub scan: PathBuf,
    pub labels: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub cloud: PointCloud,
    pub labels: Option<LabelSet>,
}

/// Lists the scans under `dir/velodyne` in id order, pairing each with
/// `dir/labels/<id>.label` when that file exists.
pub fn list(dir: impl AsRef<Path>) -> Result<Vec<ScanEntry>> {
    let dir = dir.as_ref();
    let vdir = dir.join("velodyne");
    let mut out = Vec::new();
    for entry in std::fs::read_dir(&vdir).map_err(io_err(&vdir))? {
        let path = entry.map_err(io_err(&vdir))?.path();
        if path.extension().is_some_and(|e| e == "bin") {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Format(format!("bad scan file name {}", path.display())))?
                .to_string();
            let lp = dir.join("labels").join(format!("{id}.label"));
            out.push(ScanEntry {
                labels: lp.is_file().then_some(lp),
                scan: path,
                id,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::Invalid(format!("no .bin scans in {}", vdir.display())));
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

pub fn load(entry: &ScanEntry) -> Result<Sample> {
    let cloud = read_scan(&entry.scan)?;
    let labels = match &entry.labels {
        Some(p) => Some(read_labels(p, cloud.len())?),
        None => None,
    };
    Ok(Sample {
        id: entry.id.clone(),
        cloud,
        labels,
    })
}

/// Loads every scan of a dataset directory; with `require_labels` a missing label
/// file is an error.
pub fn load_dir(dir: impl AsRef<Path>, require_labels: bool) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    list(dir)?
        .iter()
        .map(|e| {
            if require_labels && e.labels.is_none() {
                return Err(Error::Invalid(format!("scan {} has no label file in {}", e.id, dir.display())));
            }
            load(e)
        })
        .collect()
}
