//! Ray-cast synthetic scans: a ground plane with boxes ("vehicles"), vertical
//! cylinders ("poles") and long thin boxes ("walls").

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::projection::ProjectionConfig;
use crate::scan_io::{write_predictions, write_scan, ClassId, LabelSet, Point, PointCloud};

pub const GROUND: ClassId = 0;
pub const VEHICLE: ClassId = 1;
pub const POLE: ClassId = 2;
pub const WALL: ClassId = 3;
pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["ground", "vehicle", "pole", "wall"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub fov_up_deg: f64,
    pub fov_down_deg: f64,
    pub sensor_height: f64,
    pub max_range: f64,
    /// Inclusive `[min, max]` object counts.
    pub vehicles: [usize; 2],
    pub poles: [usize; 2],
    pub walls: [usize; 2],
    /// Horizontal distance band for object placement (meters).
    pub placement: [f64; 2],
    /// Range noise along each ray (meters).
    pub noise_std: f64,
    /// Per-class mean remission; each point adds Gaussian noise of `remission_std`.
    pub remission: [f64; NUM_CLASSES],
    pub remission_std: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 512,
            height: 64,
            fov_up_deg: 3.0,
            fov_down_deg: 25.0,
            sensor_height: 1.73,
            max_range: 80.0,
            vehicles: [3, 8],
            poles: [4, 10],
            walls: [1, 3],
            placement: [4.0, 30.0],
            noise_std: 0.02,
            remission: [0.30, 0.45, 0.40, 0.50],
            remission_std: 0.12,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn projection(&self) -> Result<ProjectionConfig> {
        ProjectionConfig::from_degrees(self.width, self.height, self.fov_up_deg, self.fov_down_deg)
    }

    pub fn validate(&self) -> Result<()> {
        self.projection()?;
        let ok = self.sensor_height > 0.0
            && self.max_range > 0.0
            && self.noise_std >= 0.0
            && self.remission_std >= 0.0
            && self.placement[0] > 0.0
            && self.placement[0] <= self.placement[1]
            && [self.vehicles, self.poles, self.walls].iter().all(|r| r[0] <= r[1]);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid scene spec {self:?}")))
        }
    }

    /// Seed of the `index`-th scan of a dataset.
    pub fn scan_seed(&self, index: usize) -> u64 {
        self.seed
            .wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    /// Box with yaw about z: center, half extents, cos/sin of yaw, z range.
    Box {
        c: [f64; 2],
        half: [f64; 2],
        cs: [f64; 2],
        z: [f64; 2],
    },
    Cylinder {
        c: [f64; 2],
        r: f64,
        z: [f64; 2],
    },
}

#[derive(Clone, Copy, Debug)]
struct Object {
    shape: Shape,
    class: ClassId,
}

/// Nearest positive ray parameter where `o + t d` enters `[lo, hi]` on one axis, as
/// the running `(t_near, t_far)` slab interval.
fn slab(o: f64, d: f64, lo: f64, hi: f64, t: &mut (f64, f64)) -> bool {
    if d.abs() < 1e-12 {
        return o >= lo && o <= hi;
    }
    let (a, b) = ((lo - o) / d, (hi - o) / d);
    let (a, b) = if a < b { (a, b) } else { (b, a) };
    t.0 = t.0.max(a);
    t.1 = t.1.min(b);
    t.0 <= t.1
}

impl Shape {
    fn hit(&self, d: [f64; 3]) -> Option<f64> {
        match *self {
            Shape::Box { c, half, cs, z } => {
                // Ray origin is the sensor at (0, 0, 0); move it into the box frame.
                let (ox, oy) = (-c[0], -c[1]);
                let lo = [cs[0] * ox + cs[1] * oy, -cs[1] * ox + cs[0] * oy];
                let ld = [cs[0] * d[0] + cs[1] * d[1], -cs[1] * d[0] + cs[0] * d[1]];
                let mut t = (0.0, f64::INFINITY);
                let inside = slab(lo[0], ld[0], -half[0], half[0], &mut t)
                    && slab(lo[1], ld[1], -half[1], half[1], &mut t)
                    && slab(0.0, d[2], z[0], z[1], &mut t);
                (inside && t.0 > 0.0).then_some(t.0)
            }
            Shape::Cylinder { c, r, z } => {
                let (a, b, cc) = (
                    d[0] * d[0] + d[1] * d[1],
                    -2.0 * (d[0] * c[0] + d[1] * c[1]),
                    c[0] * c[0] + c[1] * c[1] - r * r,
                );
                let mut best = None;
                if a > 1e-12 {
                    let disc = b * b - 4.0 * a * cc;
                    if disc >= 0.0 {
                        let t = (-b - disc.sqrt()) / (2.0 * a);
                        let hz = t * d[2];
                        if t > 0.0 && hz >= z[0] && hz <= z[1] {
                            best = Some(t);
                        }
                    }
                }
                if d[2].abs() > 1e-12 {
                    for cap in z {
                        let t = cap / d[2];
                        let (px, py) = (t * d[0] - c[0], t * d[1] - c[1]);
                        if t > 0.0 && px * px + py * py <= r * r && best.is_none_or(|b| t < b) {
                            best = Some(t);
                        }
                    }
                }
                best
            }
        }
    }

    fn footprint(&self) -> ([f64; 2], f64) {
        match *self {
            Shape::Box { c, half, .. } => (c, half[0].hypot(half[1])),
            Shape::Cylinder { c, r, .. } => (c, r),
        }
    }
}

fn place(rng: &mut ChaCha8Rng, spec: &SceneSpec, radius: f64) -> [f64; 2] {
    let lo = spec.placement[0] + radius;
    let hi = (spec.placement[1] + radius).max(lo);
    let dist = rng.random_range(lo..=hi);
    let az = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    [dist * az.cos(), dist * az.sin()]
}

fn build_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Object> {
    let ground = -spec.sensor_height;
    let mut objects = Vec::new();
    let count = |rng: &mut ChaCha8Rng, r: [usize; 2]| rng.random_range(r[0]..=r[1]);
    for _ in 0..count(rng, spec.vehicles) {
        let half: [f64; 2] = [rng.random_range(1.75..2.5), rng.random_range(0.8..1.0)];
        let c = place(rng, spec, half[0].hypot(half[1]));
        let yaw: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let top = ground + rng.random_range(1.4..1.9);
        objects.push(Object {
            shape: Shape::Box {
                c,
                half,
                cs: [yaw.cos(), yaw.sin()],
                z: [ground, top],
            },
            class: VEHICLE,
        });
    }
    for _ in 0..count(rng, spec.poles) {
        let r = rng.random_range(0.3..0.6);
        let c = place(rng, spec, r);
        let top = ground + rng.random_range(3.0..6.0);
        objects.push(Object {
            shape: Shape::Cylinder { c, r, z: [ground, top] },
            class: POLE,
        });
    }
    for _ in 0..count(rng, spec.walls) {
        let half = [rng.random_range(5.0..15.0), 0.2];
        let dist = rng.random_range(spec.placement[0].max(8.0)..=spec.placement[1].max(8.0) + 5.0);
        let az: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        // Roughly facing the sensor, with some skew.
        let yaw = az + std::f64::consts::FRAC_PI_2 + rng.random_range(-0.4..0.4);
        let top = ground + rng.random_range(2.0..4.0);
        objects.push(Object {
            shape: Shape::Box {
                c: [dist * az.cos(), dist * az.sin()],
                half,
                cs: [yaw.cos(), yaw.sin()],
                z: [ground, top],
            },
            class: WALL,
        });
    }
    // Anything overlapping the sensor would swallow every ray. Walls are placed
    // at least 8 m out and never pass within 7 m of it.
    objects.retain(|o| {
        let (c, r) = o.shape.footprint();
        o.class == WALL || c[0].hypot(c[1]) > r + 1.0
    });
    objects
}

/// Ray-casts one scan: one beam per `(ring, azimuth)` cell center of the matching
/// projection, nearest hit wins, rays without a hit inside `max_range` are dropped.
pub fn generate(spec: &SceneSpec) -> Result<(PointCloud, LabelSet)> {
    let (cloud, labels, _) = generate_with_beams(spec)?;
    Ok((cloud, labels))
}

/// Like [`generate`], also returning the `(column, row)` beam each point came from.
pub fn generate_with_beams(spec: &SceneSpec) -> Result<(PointCloud, LabelSet, Vec<(usize, usize)>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let objects = build_scene(spec, &mut rng);
    let range_noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let rem_noise = Normal::new(0.0, spec.remission_std).map_err(|e| Error::Config(e.to_string()))?;
    let (up, down) = (spec.fov_up_deg.to_radians(), spec.fov_down_deg.to_radians());
    let fov = up + down;
    let (w, h) = (spec.width, spec.height);
    let mut points = Vec::with_capacity(w * h);
    let mut labels = Vec::with_capacity(w * h);
    let mut beams = Vec::with_capacity(w * h);
    for i in 0..h {
        let elev = up - (i as f64 + 0.5) * fov / h as f64;
        for j in 0..w {
            let az = std::f64::consts::PI * (1.0 - 2.0 * (j as f64 + 0.5) / w as f64);
            let d = [elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin()];
            let mut best: Option<(f64, ClassId)> = None;
            if d[2] < 0.0 {
                best = Some((-spec.sensor_height / d[2], GROUND));
            }
            for o in &objects {
                if let Some(t) = o.shape.hit(d) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, o.class));
                    }
                }
            }
            let Some((t, class)) = best else { continue };
            if t > spec.max_range {
                continue;
            }
            let t = (t + range_noise.sample(&mut rng)).max(0.05);
            let rem = (spec.remission[class as usize] + rem_noise.sample(&mut rng)).clamp(0.0, 1.0);
            points.push(Point::new(
                (t * d[0]) as f32,
                (t * d[1]) as f32,
                (t * d[2]) as f32,
                rem as f32,
            ));
            labels.push(class);
            beams.push((j, i));
        }
    }
    if points.is_empty() {
        return Err(Error::Invalid("scene produced no hits".into()));
    }
    Ok((PointCloud::new(points)?, LabelSet::new(labels), beams))
}

/// Writes `n` scans as `dir/velodyne/NNNNNN.bin` and `dir/labels/NNNNNN.label`.
pub fn generate_dataset(dir: impl AsRef<Path>, n: usize, spec: &SceneSpec) -> Result<Vec<(PathBuf, PathBuf)>> {
    if n == 0 {
        return Err(Error::Config("dataset needs at least one scan".into()));
    }
    let dir = dir.as_ref();
    let (vdir, ldir) = (dir.join("velodyne"), dir.join("labels"));
    for d in [&vdir, &ldir] {
        std::fs::create_dir_all(d).map_err(io_err(d))?;
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let s = SceneSpec {
                seed: spec.scan_seed(i),
                ..spec.clone()
            };
            let (cloud, labels) = generate(&s)?;
            let (sp, lp) = (vdir.join(format!("{i:06}.bin")), ldir.join(format!("{i:06}.label")));
            write_scan(&sp, &cloud)?;
            write_predictions(&labels, &lp)?;
            Ok((sp, lp))
        })
        .collect()
}
