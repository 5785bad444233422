//! Parameterized building blocks shared by the projection module and the backbone.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rangeseg_tensor::{Array, Conv2dOptions, Graph, ParamId, ParamStore, Real, RunningStats, Var};

use super::config::ModelConfig;
use crate::error::Result;

/// State threaded through one forward pass.
pub(crate) struct Fwd<'a, T: Real> {
    pub g: &'a mut Graph<T>,
    pub store: &'a ParamStore<T>,
    pub cfg: &'a ModelConfig,
    pub train: bool,
}

pub(crate) struct Init<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
    pub cfg: &'a ModelConfig,
}

impl<T: Real> Init<'_, T> {
    /// Uniform in `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`.
    fn he_uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(self.rng.random_range(-bound..=bound)))
            .collect();
        Ok(self.store.add_param(name, Array::from_vec(shape, data)?)?)
    }

    fn constant(&mut self, name: String, len: usize, v: f64) -> Result<ParamId> {
        Ok(self.store.add_param(name, Array::full(&[len], T::lit(v)))?)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
    /// Pad so a stride-1 output keeps the input size.
    pub same: bool,
}

impl ConvSpec {
    pub fn pointwise(cin: usize, cout: usize) -> Self {
        Self {
            cin,
            cout,
            kernel: (1, 1),
            stride: 1,
            dilation: 1,
            groups: 1,
            bias: true,
            same: false,
        }
    }

    pub fn k3(cin: usize, cout: usize) -> Self {
        Self {
            kernel: (3, 3),
            same: true,
            ..Self::pointwise(cin, cout)
        }
    }

    pub fn depthwise(c: usize) -> Self {
        Self {
            groups: c,
            bias: false,
            ..Self::k3(c, c)
        }
    }

    pub fn stride(self, s: usize) -> Self {
        Self { stride: s, ..self }
    }

    pub fn dilation(self, d: usize) -> Self {
        Self { dilation: d, ..self }
    }
}

pub(crate) struct Conv {
    weight: ParamId,
    bias: Option<ParamId>,
    spec: ConvSpec,
}

impl Conv {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, spec: ConvSpec) -> Result<Self> {
        let cpg = spec.cin / spec.groups;
        let (kh, kw) = spec.kernel;
        let weight = init.he_uniform(format!("{name}.weight"), &[spec.cout, cpg, kh, kw], cpg * kh * kw)?;
        let bias = if spec.bias {
            Some(init.constant(format!("{name}.bias"), spec.cout, 0.0)?)
        } else {
            None
        };
        Ok(Self { weight, bias, spec })
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var> {
        self.forward_dilated(f, x, self.spec.dilation)
    }

    pub fn forward_dilated<T: Real>(&self, f: &mut Fwd<T>, x: Var, dilation: usize) -> Result<Var> {
        let s = self.spec;
        let (ph, mut pw) = if s.same {
            (dilation * (s.kernel.0 - 1) / 2, dilation * (s.kernel.1 - 1) / 2)
        } else {
            (0, 0)
        };
        let mut x = x;
        if f.cfg.circular && pw > 0 {
            x = f.g.pad_circular_w(x, pw)?;
            pw = 0;
        }
        let w = f.g.param(f.store, self.weight);
        let b = self.bias.map(|b| f.g.param(f.store, b));
        let opts = Conv2dOptions {
            stride: (s.stride, s.stride),
            dilation: (dilation, dilation),
            padding: (ph, pw),
            groups: s.groups,
        };
        Ok(f.g.conv2d(x, w, b, opts)?)
    }
}

pub(crate) struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    stats: RunningStats,
}

impl BatchNorm {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, c: usize) -> Result<Self> {
        let gamma = init.constant(format!("{name}.gamma"), c, 1.0)?;
        let beta = init.constant(format!("{name}.beta"), c, 0.0)?;
        let mean = init.store.add_buffer(format!("{name}.running_mean"), Array::zeros(&[c]))?;
        let var = init
            .store
            .add_buffer(format!("{name}.running_var"), Array::full(&[c], T::one()))?;
        Ok(Self {
            gamma,
            beta,
            stats: RunningStats { mean, var },
        })
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var> {
        let gamma = f.g.param(f.store, self.gamma);
        let beta = f.g.param(f.store, self.beta);
        Ok(f
            .g
            .batch_norm(x, gamma, beta, f.store, self.stats, f.train, f.cfg.bn_eps)?)
    }
}

/// Convolution, batch norm, leaky ReLU.
pub(crate) struct ConvBnAct {
    conv: Conv,
    bn: BatchNorm,
}

impl ConvBnAct {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, spec: ConvSpec) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(init, name, spec)?,
            bn: BatchNorm::new(init, &format!("{name}.bn"), spec.cout)?,
        })
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(f, x)?;
        let y = self.bn.forward(f, y)?;
        Ok(f.g.leaky_relu(y, f.cfg.leaky_slope))
    }
}

/// Depthwise 3x3 (optionally a second, dilated depthwise 3x3 summed with the
/// first), pointwise 1x1, batch norm, leaky ReLU, and an identity shortcut when
/// the shape is preserved.
pub(crate) struct SeparableConv {
    depthwise: Conv,
    dilated: Option<(Conv, usize)>,
    pointwise: Conv,
    bn: BatchNorm,
    residual: bool,
}

impl SeparableConv {
    pub fn new<T: Real>(
        init: &mut Init<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        dilation: Option<usize>,
    ) -> Result<Self> {
        let depthwise = Conv::new(init, &format!("{name}.dw"), ConvSpec::depthwise(cin).stride(stride))?;
        let dilated = match dilation {
            Some(d) => Some((
                Conv::new(init, &format!("{name}.dw_dilated"), ConvSpec::depthwise(cin).stride(stride).dilation(d))?,
                d,
            )),
            None => None,
        };
        Ok(Self {
            depthwise,
            dilated,
            pointwise: Conv::new(init, &format!("{name}.pw"), ConvSpec::pointwise(cin, cout))?,
            bn: BatchNorm::new(init, &format!("{name}.bn"), cout)?,
            residual: stride == 1 && cin == cout,
        })
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var> {
        let mut y = self.depthwise.forward(f, x)?;
        if let Some((conv, d)) = &self.dilated {
            let s = f.g.shape(x);
            let cap = (s[2].min(s[3]).saturating_sub(1) / 2).max(1);
            let yd = conv.forward_dilated(f, x, (*d).min(cap))?;
            y = f.g.add(y, yd)?;
        }
        let y = self.pointwise.forward(f, y)?;
        let y = self.bn.forward(f, y)?;
        let y = f.g.leaky_relu(y, f.cfg.leaky_slope);
        if self.residual {
            Ok(f.g.add(y, x)?)
        } else {
            Ok(y)
        }
    }
}
