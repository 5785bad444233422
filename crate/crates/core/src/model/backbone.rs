//! Encoder/decoder turning the learned `[B, C6, H/4, W/4]` map and the raw range
//! image `[B, 5, H, W]` into per-pixel logits `[B, Nc, H, W]`.

use rangeseg_tensor::{Real, Var};

use super::config::BranchMerge;
use super::layers::{Conv, ConvBnAct, ConvSpec, Fwd, Init, SeparableConv};
use crate::error::{Error, Result};
use crate::projection::C1;

/// Dilation of the `i`-th multi-dilation layer before capping.
pub fn dilation_schedule(i: usize) -> usize {
    [1, 2, 4, 8][i % 4]
}

pub(crate) struct Backbone {
    down: ConvBnAct,
    encoder: Vec<SeparableConv>,
    quarter: Vec<SeparableConv>,
    half: Vec<SeparableConv>,
    classifier: Conv,
    branch: Vec<SeparableConv>,
    branch_proj: Option<Conv>,
}

impl Backbone {
    pub fn new<T: Real>(init: &mut Init<T>) -> Result<Self> {
        let cfg = init.cfg;
        let (c6, cb) = (cfg.c6, cfg.branch_width());
        let down = ConvBnAct::new(init, "backbone.down", ConvSpec::k3(c6, c6).stride(2))?;
        let mut encoder = Vec::with_capacity(cfg.l1 + cfg.l2);
        for i in 0..cfg.l1 {
            encoder.push(SeparableConv::new(init, &format!("backbone.l1.{i}"), c6, c6, 1, None)?);
        }
        for i in 0..cfg.l2 {
            encoder.push(SeparableConv::new(
                init,
                &format!("backbone.l2.{i}"),
                c6,
                c6,
                1,
                Some(dilation_schedule(i)),
            )?);
        }
        let mut quarter = Vec::with_capacity(cfg.l3);
        for i in 0..cfg.l3 {
            quarter.push(SeparableConv::new(init, &format!("backbone.l3.{i}"), c6, c6, 1, None)?);
        }
        let mut half = Vec::with_capacity(cfg.l4);
        for i in 0..cfg.l4 {
            let cin = match (i, cfg.branch_merge) {
                (0, BranchMerge::Concat) => c6 + cb,
                _ => c6,
            };
            let cout = if i + 1 == cfg.l4 { cb } else { c6 };
            half.push(SeparableConv::new(init, &format!("backbone.l4.{i}"), cin, cout, 1, None)?);
        }
        let classifier = Conv::new(init, "backbone.classifier", ConvSpec::k3(cb, cfg.num_classes))?;
        let branch = vec![
            SeparableConv::new(init, "backbone.branch.0", C1, cb, 2, None)?,
            SeparableConv::new(init, "backbone.branch.1", cb, cb, 1, None)?,
            SeparableConv::new(init, "backbone.branch.2", cb, cb, 1, None)?,
        ];
        let branch_proj = match cfg.branch_merge {
            BranchMerge::Add => Some(Conv::new(init, "backbone.branch.proj", ConvSpec::pointwise(cb, c6))?),
            BranchMerge::Concat => None,
        };
        Ok(Self {
            down,
            encoder,
            quarter,
            half,
            classifier,
            branch,
            branch_proj,
        })
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<T>, rep: Var, image: Var) -> Result<Var> {
        let rs = f.g.shape(rep).to_vec();
        let is = f.g.shape(image).to_vec();
        if is.len() != 4 || is[1] != C1 || rs.len() != 4 || rs[0] != is[0] || rs[2] * 4 != is[2] || rs[3] * 4 != is[3] {
            return Err(Error::Invalid(format!(
                "backbone inputs {rs:?} and {is:?} are not [B, C6, H/4, W/4] and [B, {C1}, H, W]"
            )));
        }
        if is[2] % 8 != 0 || is[3] % 8 != 0 {
            return Err(Error::Config(format!("image {}x{} is not divisible by 8", is[3], is[2])));
        }
        let circ = f.cfg.circular;
        let mut x = self.down.forward(f, rep)?;
        for layer in &self.encoder {
            x = layer.forward(f, x)?;
        }
        x = f.g.upsample2x(x, circ)?;
        for layer in &self.quarter {
            x = layer.forward(f, x)?;
        }
        x = f.g.upsample2x(x, circ)?;
        let mut br = image;
        for layer in &self.branch {
            br = layer.forward(f, br)?;
        }
        x = match &self.branch_proj {
            Some(proj) => {
                let br = proj.forward(f, br)?;
                f.g.add(x, br)?
            }
            None => f.g.concat(&[x, br])?,
        };
        for layer in &self.half {
            x = layer.forward(f, x)?;
        }
        x = f.g.upsample2x(x, circ)?;
        self.classifier.forward(f, x)
    }
}
