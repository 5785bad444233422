//! Run configuration: defaults, then an optional TOML file, then command-line flags.

use std::path::Path;

use anyhow::Context;
use rangeseg::grouping::GroupingConfig;
use rangeseg::model::{BranchMerge, Extractors, ModelConfig, Preset};
use rangeseg::pipeline::Geometry;
use rangeseg::postprocess::KnnConfig;
use rangeseg::projection::ProjectionConfig;
use rangeseg::scan_io::{ClassId, DEFAULT_IGNORE_ID};
use rangeseg::synth::SceneSpec;
use rangeseg::training::{AugmentationConfig, TrainConfig};
use rangeseg::Error;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionSection {
    pub width: usize,
    pub height: usize,
    pub fov_up_deg: f64,
    pub fov_down_deg: f64,
}

impl Default for ProjectionSection {
    fn default() -> Self {
        Self {
            width: 2048,
            height: 64,
            fov_up_deg: 3.0,
            fov_down_deg: 25.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Preset,
    pub num_classes: usize,
    pub circular: bool,
    pub branch_merge: BranchMerge,
    pub extractors: Extractors,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: Preset::Full,
            num_classes: 19,
            circular: false,
            branch_merge: BranchMerge::Add,
            extractors: Extractors::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub power: f64,
    pub ignore_id: ClassId,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            power: 0.25,
            ignore_id: DEFAULT_IGNORE_ID,
        }
    }
}

/// Scene content for `synth`; the beam model comes from `[projection]` and the seed
/// from the top level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub scans: usize,
    pub sensor_height: f64,
    pub max_range: f64,
    pub vehicles: [usize; 2],
    pub poles: [usize; 2],
    pub walls: [usize; 2],
    pub placement: [f64; 2],
    pub noise_std: f64,
    pub remission: [f64; 4],
    pub remission_std: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SceneSpec::default();
        Self {
            scans: 200,
            sensor_height: s.sensor_height,
            max_range: s.max_range,
            vehicles: s.vehicles,
            poles: s.poles,
            walls: s.walls,
            placement: s.placement,
            noise_std: s.noise_std,
            remission: s.remission,
            remission_std: s.remission_std,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub projection: ProjectionSection,
    pub grouping: GroupingConfig,
    pub model: ModelSection,
    pub loss: LossSection,
    pub train: TrainConfig,
    pub knn: KnnConfig,
    pub synth: SynthSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
            .context("reading config")
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join("config.toml");
        let text = toml::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&path, text).map_err(|source| Error::Io { path, source })?;
        Ok(())
    }

    pub fn projection(&self) -> rangeseg::Result<ProjectionConfig> {
        let p = &self.projection;
        ProjectionConfig::from_degrees(p.width, p.height, p.fov_up_deg, p.fov_down_deg)
    }

    pub fn geometry(&self) -> rangeseg::Result<Geometry> {
        let g = Geometry {
            projection: self.projection()?,
            grouping: self.grouping,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            circular: m.circular,
            branch_merge: m.branch_merge,
            extractors: m.extractors,
            ..ModelConfig::preset(m.preset, m.num_classes)
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn scene(&self) -> SceneSpec {
        let (p, s) = (&self.projection, &self.synth);
        SceneSpec {
            width: p.width,
            height: p.height,
            fov_up_deg: p.fov_up_deg,
            fov_down_deg: p.fov_down_deg,
            sensor_height: s.sensor_height,
            max_range: s.max_range,
            vehicles: s.vehicles,
            poles: s.poles,
            walls: s.walls,
            placement: s.placement,
            noise_std: s.noise_std,
            remission: s.remission,
            remission_std: s.remission_std,
            seed: self.seed,
        }
    }

    /// Cross-field checks that do not depend on the subcommand.
    pub fn validate(&self) -> rangeseg::Result<()> {
        let geom = self.geometry()?;
        let grid = geom.grouping.grid(geom.projection.width, geom.projection.height)?;
        if self.grouping.k * self.grouping.k != 16 || grid.0 * 4 != self.projection.height || grid.1 * 4 != self.projection.width {
            return Err(Error::Config(format!(
                "the network expects 4x4 groups tiling the image with stride 4, got k={} stride={}",
                self.grouping.k, self.grouping.stride
            )));
        }
        let model = self.model_config();
        model.validate()?;
        model.check_image(self.projection.width, self.projection.height)?;
        self.knn.validate()?;
        self.train.validate()?;
        if !(self.loss.power >= 0.0 && self.loss.power.is_finite()) {
            return Err(Error::Config(format!("power-i must be non-negative, got {}", self.loss.power)));
        }
        self.scene().validate()?;
        Ok(())
    }
}

/// Disables every augmentation.
pub fn no_augmentation(t: &mut TrainConfig) {
    t.augment = false;
    t.augmentation = AugmentationConfig::none();
}
