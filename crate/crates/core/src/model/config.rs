use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Full,
    Small,
    Tiny,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Full, Preset::Small, Preset::Tiny];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Full => "full",
            Preset::Small => "small",
            Preset::Tiny => "tiny",
        }
    }

    /// `(C3, C4, C5, C6)` and `(L1, L2, L3, L4)`.
    pub fn widths_and_depths(self) -> ([usize; 4], [usize; 4]) {
        match self {
            Preset::Full => ([24, 48, 96, 192], [50, 30, 4, 2]),
            Preset::Small => ([16, 32, 64, 128], [24, 20, 2, 1]),
            Preset::Tiny => ([12, 24, 48, 96], [14, 10, 2, 1]),
        }
    }

    /// Default training batch size.
    pub fn batch_size(self) -> usize {
        match self {
            Preset::Full => 3,
            Preset::Small => 6,
            Preset::Tiny => 8,
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?} (expected full, small or tiny)")))
    }
}

/// How the fine-grained branch joins the decoder at half resolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchMerge {
    /// 1x1 projection to the decoder width, then addition.
    #[default]
    Add,
    /// Channel concatenation; the first half-resolution layer absorbs the extra width.
    Concat,
}

/// Which parts of the projection module are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Extractors {
    pub local: bool,
    pub context: bool,
    pub spatial: bool,
    pub attention: bool,
    /// Feed the group-relative channels; when off they are zeroed.
    pub relative_features: bool,
}

impl Default for Extractors {
    fn default() -> Self {
        Self {
            local: true,
            context: true,
            spatial: true,
            attention: true,
            relative_features: true,
        }
    }
}

impl Extractors {
    /// Spatial 1xN convolution only, on the raw features.
    pub fn spatial_only() -> Self {
        Self {
            local: false,
            context: false,
            spatial: true,
            attention: false,
            relative_features: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub preset: String,
    pub c3: usize,
    pub c4: usize,
    pub c5: usize,
    pub c6: usize,
    pub l1: usize,
    pub l2: usize,
    pub l3: usize,
    pub l4: usize,
    pub num_classes: usize,
    /// Points per group (`k*k`).
    pub group_slots: usize,
    pub leaky_slope: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// Wrap the azimuth axis in padding, upsampling and context gathers.
    pub circular: bool,
    pub branch_merge: BranchMerge,
    pub extractors: Extractors,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::preset(Preset::Full, 19)
    }
}

impl ModelConfig {
    pub fn preset(p: Preset, num_classes: usize) -> Self {
        let ([c3, c4, c5, c6], [l1, l2, l3, l4]) = p.widths_and_depths();
        Self {
            preset: p.name().to_string(),
            c3,
            c4,
            c5,
            c6,
            l1,
            l2,
            l3,
            l4,
            num_classes,
            group_slots: 16,
            leaky_slope: 0.01,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            circular: false,
            branch_merge: BranchMerge::Add,
            extractors: Extractors::default(),
        }
    }

    /// Fused channel count entering the attention block.
    pub fn c7(&self) -> usize {
        let e = &self.extractors;
        let mut c = 0;
        if e.local {
            c += self.c5;
        }
        if e.context {
            c += 3 * self.c4;
        }
        if e.spatial {
            c += self.c5;
        }
        c
    }

    /// Width of the fine-grained branch and of the last decoder layer.
    pub fn branch_width(&self) -> usize {
        self.c6 / 4
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.extractors;
        if e.context && !e.local {
            return Err(Error::Config("the context extractor needs the local extractor".into()));
        }
        if !e.local && !e.spatial {
            return Err(Error::Config("enable at least the local or the spatial extractor".into()));
        }
        if [self.c3, self.c4, self.c5, self.c6, self.num_classes, self.group_slots].contains(&0) {
            return Err(Error::Config("channel counts, classes and group size must be positive".into()));
        }
        if self.c6 % 4 != 0 {
            return Err(Error::Config(format!("C6 = {} must be divisible by 4", self.c6)));
        }
        if self.l4 == 0 {
            return Err(Error::Config("L4 must be at least 1".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0 && self.bn_eps > 0.0) {
            return Err(Error::Config("batch-norm momentum must be in (0, 1] and eps positive".into()));
        }
        Ok(())
    }

    /// Checks that an image of this size can pass through the network.
    pub fn check_image(&self, width: usize, height: usize) -> Result<()> {
        if width % 8 != 0 || height % 8 != 0 || width == 0 || height == 0 {
            return Err(Error::Config(format!(
                "image {width}x{height}: both sides must be positive multiples of 8"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn c7_follows_extractors() {
        let mut c = ModelConfig::preset(Preset::Full, 19);
        assert_eq!(c.c7(), 2 * 96 + 3 * 48);
        c.extractors = Extractors::spatial_only();
        assert_eq!(c.c7(), 96);
        c.extractors.context = true;
        assert!(c.validate().is_err());
    }

    #[test]
    fn preset_parses() {
        assert_eq!("tiny".parse::<Preset>().unwrap(), Preset::Tiny);
        assert!("huge".parse::<Preset>().is_err());
    }
}
