//! The segmentation network: learned projection module followed by the 2-D backbone.

mod backbone;
mod config;
mod layers;
mod projection;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rangeseg_tensor::{Array, Checkpoint, Graph, HasParams, ParamStore, Real, Var};

pub use backbone::dilation_schedule;
pub use config::{BranchMerge, Extractors, ModelConfig, Preset};
pub use projection::{context_index, ProjectionTaps};

use crate::error::{Error, Result};
use crate::grouping::{PointGroups, C2};
use crate::projection::{RangeImage, C1};
use crate::scan_io::ClassId;
use backbone::Backbone;
use layers::{Fwd, Init};
use projection::ProjectionModule;

/// A batch of network inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput<T> {
    /// `[B, 11, P, N]`.
    pub groups: Array<T>,
    /// Window grid `(rows, cols)` with `rows * cols == P`.
    pub grid: (usize, usize),
    /// `[B, 5, H, W]`.
    pub image: Array<T>,
}

impl<T: Real> ModelInput<T> {
    pub fn from_scans(items: &[(&PointGroups, &RangeImage)], keep_relative: bool) -> Result<Self> {
        let (g0, i0) = items
            .first()
            .ok_or_else(|| Error::Invalid("empty batch".into()))?;
        let (p, n, grid) = (g0.num_groups, g0.slots, g0.grid);
        let (w, h) = (i0.width(), i0.height());
        let mut groups = Vec::with_capacity(items.len() * C2 * p * n);
        let mut image = Vec::with_capacity(items.len() * C1 * w * h);
        for (g, img) in items {
            if g.channels != C2 || g.num_groups != p || g.slots != n || img.width() != w || img.height() != h {
                return Err(Error::Invalid("batch items differ in shape".into()));
            }
            groups.extend(g.to_channel_major(keep_relative, T::lit, T::zero()));
            image.extend(img.to_planes().into_iter().map(|v| T::lit(v as f64)));
        }
        let b = items.len();
        Ok(Self {
            groups: Array::from_vec(&[b, C2, p, n], groups)?,
            grid,
            image: Array::from_vec(&[b, C1, h, w], image)?,
        })
    }

    pub fn batch(&self) -> usize {
        self.groups.shape()[0]
    }
}

pub struct Model<T> {
    cfg: ModelConfig,
    store: ParamStore<T>,
    projection: ProjectionModule,
    backbone: Backbone,
}

impl<T: Real> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
            cfg: &cfg,
        };
        let projection = ProjectionModule::new(&mut init)?;
        let backbone = Backbone::new(&mut init)?;
        Ok(Self {
            cfg,
            store,
            projection,
            backbone,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Learnable scalars, batch-norm scale and shift included, running statistics excluded.
    pub fn count_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    /// Parameters whose name starts with `prefix` (`proj.` or `backbone.`).
    pub fn count_parameters_in(&self, prefix: &str) -> usize {
        self.store
            .params()
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    fn fwd<'a>(&'a self, g: &'a mut Graph<T>, train: bool) -> Fwd<'a, T> {
        Fwd {
            g,
            store: &self.store,
            cfg: &self.cfg,
            train,
        }
    }

    /// Runs only the projection module on `[B, 11, P, N]` groups.
    pub fn forward_projection(&self, g: &mut Graph<T>, groups: Var, grid: (usize, usize), train: bool) -> Result<ProjectionTaps> {
        self.projection.forward(&mut self.fwd(g, train), groups, grid)
    }

    /// Logits `[B, Nc, H, W]`.
    pub fn forward(&self, g: &mut Graph<T>, input: &ModelInput<T>, train: bool) -> Result<Var> {
        let s = input.image.shape();
        self.cfg.check_image(s[3], s[2])?;
        let (rows, cols) = input.grid;
        if rows * 4 != s[2] || cols * 4 != s[3] {
            return Err(Error::Config(format!(
                "group grid {rows}x{cols} must be a quarter of the {}x{} image",
                s[2], s[3]
            )));
        }
        let groups = g.input(input.groups.clone());
        let image = g.input(input.image.clone());
        let mut f = self.fwd(g, train);
        let rep = self.projection.forward(&mut f, groups, input.grid)?.output;
        self.backbone.forward(&mut f, rep, image)
    }

    /// Folds the batch statistics of a train-mode pass into the running buffers.
    pub fn update_running_stats(&mut self, g: &Graph<T>) {
        self.store.apply_batch_stats(g, self.cfg.bn_momentum);
    }

    /// Per-pixel argmax class for every batch item, eval mode.
    pub fn predict(&self, input: &ModelInput<T>) -> Result<Vec<Vec<ClassId>>> {
        let mut g = Graph::new();
        let logits = self.forward(&mut g, input, false)?;
        Ok(argmax_classes(g.value(logits)))
    }

    /// The same network in another precision.
    pub fn cast<U: Real>(&self) -> Result<Model<U>> {
        let mut m = Model::<U>::new(self.cfg.clone(), 0)?;
        m.store = self.store.cast();
        Ok(m)
    }

    pub fn checkpoint(&self, epoch: u32) -> Result<Checkpoint> {
        let meta = toml::to_string(&self.cfg).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Checkpoint::from_store(&self.store, epoch, meta))
    }

    pub fn save(&self, path: impl AsRef<Path>, epoch: u32) -> Result<()> {
        let path = path.as_ref();
        self.checkpoint(epoch)?
            .save(path)
            .map_err(|e| with_path(e, path))
    }

    /// Loads a checkpoint; returns the model and the epoch it was saved at.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, u32)> {
        let path = path.as_ref();
        let ck = Checkpoint::load(path).map_err(|e| with_path(e, path))?;
        let cfg: ModelConfig = toml::from_str(&ck.metadata)
            .map_err(|e| Error::Format(format!("{}: bad model metadata: {e}", path.display())))?;
        let mut m = Self::new(cfg, 0)?;
        ck.restore_into(&mut m.store)
            .map_err(|e| with_path(e, path))?;
        Ok((m, ck.epoch))
    }
}

fn with_path(e: rangeseg_tensor::TensorError, path: &Path) -> Error {
    match e {
        rangeseg_tensor::TensorError::Io(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        rangeseg_tensor::TensorError::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        e => e.into(),
    }
}

impl<T> HasParams<T> for Model<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }
}

/// Argmax over the class axis of `[B, Nc, H, W]` logits; ties go to the lower class.
pub fn argmax_classes<T: Real>(logits: &Array<T>) -> Vec<Vec<ClassId>> {
    let s = logits.shape();
    let (b, nc, hw) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    (0..b)
        .map(|bi| {
            (0..hw)
                .map(|i| {
                    let mut best = 0;
                    for c in 1..nc {
                        if d[(bi * nc + c) * hw + i] > d[(bi * nc + best) * hw + i] {
                            best = c;
                        }
                    }
                    best as ClassId
                })
                .collect()
        })
        .collect()
}
