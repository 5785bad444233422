//! Learned projection from point groups `[B, 11, P, N]` to a `[B, C6, H/4, W/4]` map.

use std::sync::Arc;

use rangeseg_tensor::{Real, Var};

use super::layers::{Conv, ConvBnAct, ConvSpec, Fwd, Init};
use crate::error::{Error, Result};
use crate::grouping::C2;

/// Centered 3x3 neighborhood of every grid cell at the given dilation, as flat grid
/// indices (`[P, 9]`). Rows outside the grid are absent; columns wrap when
/// `circular` is set and are absent otherwise.
pub fn context_index(rows: usize, cols: usize, dilation: usize, circular: bool) -> Vec<Option<u32>> {
    let d = dilation as isize;
    let mut idx = Vec::with_capacity(rows * cols * 9);
    for r in 0..rows as isize {
        for c in 0..cols as isize {
            for a in -1..=1 {
                for b in -1..=1 {
                    let (rr, mut cc) = (r + a * d, c + b * d);
                    if circular {
                        cc = cc.rem_euclid(cols as isize);
                    }
                    idx.push(
                        (rr >= 0 && rr < rows as isize && cc >= 0 && cc < cols as isize)
                            .then(|| (rr as usize * cols + cc as usize) as u32),
                    );
                }
            }
        }
    }
    idx
}

pub(crate) struct ProjectionModule {
    local: Vec<ConvBnAct>,
    context: Vec<ConvBnAct>,
    spatial: Option<ConvBnAct>,
    attention: Option<Conv>,
    bottleneck: ConvBnAct,
}

/// Intermediate outputs, exposed for tests.
pub struct ProjectionTaps {
    pub local_max: Option<Var>,
    pub context: Option<Var>,
    pub spatial: Option<Var>,
    pub fused: Var,
    pub output: Var,
}

impl ProjectionModule {
    pub fn new<T: Real>(init: &mut Init<T>) -> Result<Self> {
        let cfg = init.cfg;
        let e = cfg.extractors;
        let mut local = Vec::new();
        if e.local {
            let widths = [C2, cfg.c3, cfg.c4, cfg.c4, cfg.c5];
            for i in 0..4 {
                local.push(ConvBnAct::new(
                    init,
                    &format!("proj.local.{i}"),
                    ConvSpec::pointwise(widths[i], widths[i + 1]),
                )?);
            }
        }
        let mut context = Vec::new();
        if e.context {
            for i in 0..3 {
                context.push(ConvBnAct::new(
                    init,
                    &format!("proj.context.{i}"),
                    ConvSpec::pointwise(cfg.c4, cfg.c4),
                )?);
            }
        }
        let spatial = if e.spatial {
            let spec = ConvSpec {
                kernel: (1, cfg.group_slots),
                ..ConvSpec::pointwise(C2, cfg.c5)
            };
            Some(ConvBnAct::new(init, "proj.spatial", spec)?)
        } else {
            None
        };
        let c7 = cfg.c7();
        let attention = if e.attention {
            Some(Conv::new(init, "proj.attention", ConvSpec::pointwise(c7, c7))?)
        } else {
            None
        };
        let bottleneck = ConvBnAct::new(init, "proj.bottleneck", ConvSpec::pointwise(c7, cfg.c6))?;
        Ok(Self {
            local,
            context,
            spatial,
            attention,
            bottleneck,
        })
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<T>, groups: Var, grid: (usize, usize)) -> Result<ProjectionTaps> {
        let s = f.g.shape(groups).to_vec();
        let (rows, cols) = grid;
        if s.len() != 4 || s[1] != C2 || s[3] != f.cfg.group_slots || s[2] != rows * cols {
            return Err(Error::Invalid(format!(
                "projection input {s:?} does not match [B, {C2}, {rows}x{cols}, {}]",
                f.cfg.group_slots
            )));
        }
        let b = s[0];
        let mut parts = Vec::new();
        let mut taps_local = None;
        let mut taps_context = None;
        let mut taps_spatial = None;
        if !self.local.is_empty() {
            let mut x = groups;
            let mut feat2 = groups;
            for (i, layer) in self.local.iter().enumerate() {
                x = layer.forward(f, x)?;
                if i == 1 {
                    feat2 = x;
                }
            }
            let local_max = f.g.max_axis(x, 3)?;
            parts.push(local_max);
            taps_local = Some(local_max);
            if !self.context.is_empty() {
                let c4 = f.g.shape(feat2)[1];
                let desc = f.g.max_axis(feat2, 3)?;
                let desc = f.g.reshape(desc, &[b, c4, rows, cols])?;
                let mut branches = Vec::with_capacity(3);
                for (i, layer) in self.context.iter().enumerate() {
                    let index: Arc<[Option<u32>]> = context_index(rows, cols, i + 1, f.cfg.circular).into();
                    let gathered = f.g.gather(desc, index, &[rows * cols, 9])?;
                    let y = layer.forward(f, gathered)?;
                    branches.push(f.g.max_axis(y, 3)?);
                }
                let ctx = f.g.concat(&branches)?;
                parts.push(ctx);
                taps_context = Some(ctx);
            }
        }
        if let Some(sp) = &self.spatial {
            let y = sp.forward(f, groups)?;
            parts.push(y);
            taps_spatial = Some(y);
        }
        let cat = f.g.concat(&parts)?;
        let c7 = f.g.shape(cat)[1];
        let mut x = f.g.reshape(cat, &[b, c7, rows, cols])?;
        if let Some(att) = &self.attention {
            let pooled = f.g.global_avg_pool(x)?;
            let a = att.forward(f, pooled)?;
            let a = f.g.sigmoid(a);
            x = f.g.mul_channel(x, a)?;
        }
        let output = self.bottleneck.forward(f, x)?;
        Ok(ProjectionTaps {
            local_max: taps_local,
            context: taps_context,
            spatial: taps_spatial,
            fused: x,
            output,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn context_index_centered_and_padded() {
        let idx = context_index(3, 4, 1, false);
        // cell (1, 1): full neighborhood
        let c = &idx[(4 + 1) * 9..(4 + 2) * 9];
        assert_eq!(c, &[0, 1, 2, 4, 5, 6, 8, 9, 10].map(Some));
        // cell (0, 0): top row and left column absent
        let c = &idx[..9];
        assert_eq!(c, &[None, None, None, None, Some(0), Some(1), None, Some(4), Some(5)]);
        let wrap = context_index(3, 4, 1, true);
        assert_eq!(wrap[3], Some(3));
    }
}
