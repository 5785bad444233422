//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding its
//! value. [`Graph::backward`] walks the tape in reverse and returns the gradients of
//! leaf and parameter nodes. Nodes that do not depend on a leaf or parameter carry
//! no gradient and are skipped.

use std::sync::Arc;

use crate::array::Array;
use crate::error::{shape_err, Result, TensorError};
use crate::kernels::conv::{conv2d_backward, conv2d_forward, Conv2dOptions, ConvGeom};
use crate::kernels::{norm, resample};
use crate::params::{ParamId, ParamStore, RunningStats};
use crate::real::Real;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct Node<T> {
    value: Array<T>,
    op: Op<T>,
    requires_grad: bool,
}

enum Op<T> {
    Input,
    Leaf,
    Param(ParamId),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_mode: bool,
    },
    LeakyRelu {
        input: Var,
        slope: T,
    },
    Sigmoid {
        input: Var,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
    MaxAxis {
        input: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    Upsample2x {
        input: Var,
        wrap: bool,
    },
    PadCircularW {
        input: Var,
        pad: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale {
        input: Var,
        factor: T,
    },
    Sum {
        input: Var,
    },
    MulChannel {
        input: Var,
        scale: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Reshape {
        input: Var,
    },
    Gather {
        input: Var,
        index: Arc<[Option<u32>]>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        weights: Vec<T>,
        ignore: u32,
        probs: Vec<T>,
        count: usize,
    },
}

/// Batch statistics produced by a train-mode batch-norm node, waiting to be folded
/// into the running buffers by [`ParamStore::apply_batch_stats`].
pub struct PendingStats<T> {
    pub running: RunningStats,
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    pending: Vec<PendingStats<T>>,
}

/// Gradients returned by [`Graph::backward`], kept for leaf and parameter nodes.
pub struct Gradients<T> {
    grads: Vec<Option<Array<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Array<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            pending: Vec::new(),
        }
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, deps: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Leaf | Op::Param(_) => true,
            Op::Input => false,
            _ => deps.iter().any(|d| self.nodes[d.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Array<T>) -> Var {
        self.push(value, Op::Input, &[])
    }

    /// Free variable that receives a gradient.
    pub fn leaf(&mut self, value: Array<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), &[])
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Argmax indices recorded by a [`Graph::max_axis`] node.
    pub fn argmax(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::MaxAxis { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    pub(crate) fn param_nodes(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(id) => Some((id, Var(i))),
            _ => None,
        })
    }

    pub fn pending_stats(&self) -> &[PendingStats<T>] {
        &self.pending
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        opts: Conv2dOptions,
    ) -> Result<Var> {
        let geom = ConvGeom::new(
            self.shape(input),
            self.shape(weight),
            bias.map(|b| self.shape(b)),
            opts,
        )?;
        let out = conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &geom,
        );
        let mut deps = vec![input, weight];
        deps.extend(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &deps,
        ))
    }

    /// Batch normalization over every dimension except the channel axis (1).
    ///
    /// In train mode the batch statistics normalize the input and are recorded for
    /// [`ParamStore::apply_batch_stats`]; in eval mode the running buffers are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        store: &ParamStore<T>,
        running: RunningStats,
        train: bool,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(shape_err(format!("batch_norm needs [B, C, ...], got {shape:?}")));
        }
        let c = shape[1];
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(shape_err(format!(
                    "batch_norm {what} {:?} does not match {c} channels",
                    self.shape(v)
                )));
            }
        }
        let (mean, var) = if train {
            let stats = norm::batch_stats(self.value(input).data(), &shape);
            if stats.count == 0 {
                return Err(TensorError::EmptyNormalization);
            }
            let n = stats.count as f64;
            let unbiased_scale = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
            self.pending.push(PendingStats {
                running,
                mean: stats.mean.clone(),
                var: stats.var.iter().map(|&v| v * T::lit(unbiased_scale)).collect(),
            });
            (stats.mean, stats.var)
        } else {
            if shape[0] * shape[2..].iter().product::<usize>() == 0 {
                return Err(TensorError::EmptyNormalization);
            }
            (
                store.buffer(running.mean).data().to_vec(),
                store.buffer(running.var).data().to_vec(),
            )
        };
        let eps = T::lit(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = norm::normalize(
            self.value(input).data(),
            &shape,
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let out = Array::from_vec(&shape, y)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_mode: train,
            },
            &[input, gamma, beta],
        ))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        let out = self
            .value(input)
            .map(|x| if x >= T::zero() { x } else { s * x });
        self.push(out, Op::LeakyRelu { input, slope: s }, &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|x| T::one() / (T::one() + (-x).exp()));
        self.push(out, Op::Sigmoid { input }, &[input])
    }

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let x = self.value(input);
        let (outer, len, inner) = x.axis_extents(axis)?;
        let mut out = x.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| d[at(k)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for k in 0..len {
                    let e = (d[at(k)] - m).exp();
                    d[at(k)] = e;
                    s += e;
                }
                for k in 0..len {
                    d[at(k)] /= s;
                }
            }
        }
        Ok(self.push(out, Op::Softmax { input, axis }, &[input]))
    }

    /// Maximum along `axis` (kept as a size-1 dimension). Ties resolve to the lowest index.
    pub fn max_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        let x = self.value(input);
        let (outer, len, inner) = x.axis_extents(axis)?;
        if len == 0 {
            return Err(shape_err("max_axis over an empty axis"));
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        let mut vals = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        let d = x.data();
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut bv = d[o * len * inner + i];
                for k in 1..len {
                    let v = d[(o * len + k) * inner + i];
                    if v > bv {
                        bv = v;
                        best = k;
                    }
                }
                vals.push(bv);
                argmax.push(best);
            }
        }
        let out = Array::from_vec(&shape, vals)?;
        Ok(self.push(
            out,
            Op::MaxAxis {
                input,
                axis,
                argmax,
            },
            &[input],
        ))
    }

    /// Bilinear x2 upsampling of `[B, C, H, W]` with half-pixel centers. Rows clamp at
    /// the border; columns clamp too unless `wrap_columns` is set.
    pub fn upsample2x(&mut self, input: Var, wrap_columns: bool) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || s[2] == 0 || s[3] == 0 {
            return Err(shape_err(format!("upsample2x needs non-empty [B, C, H, W], got {s:?}")));
        }
        let out = resample::upsample2x(
            self.value(input).data(),
            s[0] * s[1],
            s[2],
            s[3],
            wrap_columns,
        );
        let out = Array::from_vec(&[s[0], s[1], 2 * s[2], 2 * s[3]], out)?;
        Ok(self.push(
            out,
            Op::Upsample2x {
                input,
                wrap: wrap_columns,
            },
            &[input],
        ))
    }

    /// Pads the last axis of `[B, C, H, W]` by `pad` columns on each side, wrapping around.
    pub fn pad_circular_w(&mut self, input: Var, pad: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || pad > s[3] {
            return Err(shape_err(format!(
                "pad_circular_w({pad}) needs [B, C, H, W] with W >= pad, got {s:?}"
            )));
        }
        if pad == 0 {
            return Ok(input);
        }
        let w = s[3];
        let nw = w + 2 * pad;
        let x = self.value(input).data();
        let rows = s[0] * s[1] * s[2];
        let mut out = Vec::with_capacity(rows * nw);
        for r in 0..rows {
            let row = &x[r * w..(r + 1) * w];
            out.extend_from_slice(&row[w - pad..]);
            out.extend_from_slice(row);
            out.extend_from_slice(&row[..pad]);
        }
        let out = Array::from_vec(&[s[0], s[1], s[2], nw], out)?;
        Ok(self.push(out, Op::PadCircularW { input, pad }, &[input]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (x, &y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let f = T::lit(factor);
        let out = self.value(input).map(|x| x * f);
        self.push(out, Op::Scale { input, factor: f }, &[input])
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s: T = self.value(input).data().iter().copied().sum();
        self.push(Array::scalar(s), Op::Sum { input }, &[input])
    }

    /// `x[b, c, ...] * s[b, c]` with `s` shaped `[B, C, 1, ...]`.
    pub fn mul_channel(&mut self, input: Var, scale: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ss = self.shape(scale);
        if xs.len() < 2 || ss.len() < 2 || ss[0] != xs[0] || ss[1] != xs[1] || ss[2..].iter().product::<usize>() != 1
        {
            return Err(shape_err(format!("mul_channel: {xs:?} by {ss:?}")));
        }
        let (_, _, sp) = norm::extents(&xs);
        let mut out = self.value(input).clone();
        let s = self.value(scale).data().to_vec();
        for (bc, chunk) in out.data_mut().chunks_mut(sp.max(1)).enumerate() {
            for v in chunk {
                *v *= s[bc];
            }
        }
        Ok(self.push(out, Op::MulChannel { input, scale }, &[input, scale]))
    }

    /// Mean over all dimensions after the channel axis, kept as size-1 dims.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() < 3 {
            return Err(shape_err(format!("global_avg_pool needs [B, C, ...], got {xs:?}")));
        }
        let (b, c, sp) = norm::extents(&xs);
        if sp == 0 {
            return Err(shape_err("global_avg_pool over empty spatial extent"));
        }
        let n = T::lit(sp as f64);
        let vals: Vec<T> = self
            .value(input)
            .data()
            .chunks(sp)
            .map(|ch| ch.iter().copied().sum::<T>() / n)
            .collect();
        let mut shape = vec![b, c];
        shape.extend(std::iter::repeat_n(1, xs.len() - 2));
        let out = Array::from_vec(&shape, vals)?;
        Ok(self.push(out, Op::GlobalAvgPool { input }, &[input]))
    }

    /// Concatenation along the channel axis (1).
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| shape_err("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if base.len() < 2 {
            return Err(shape_err(format!("concat needs [B, C, ...], got {base:?}")));
        }
        let mut channels = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(shape_err(format!("concat: {base:?} vs {s:?}")));
            }
            channels += s[1];
        }
        let (b, _, sp) = norm::extents(&base);
        let mut out = Vec::with_capacity(b * channels * sp);
        for bi in 0..b {
            for &v in inputs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.value(v).data()[bi * c * sp..(bi + 1) * c * sp]);
            }
        }
        let mut shape = base.clone();
        shape[1] = channels;
        let out = Array::from_vec(&shape, out)?;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            inputs,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape { input }, &[input]))
    }

    /// Gathers spatial positions of `[B, C, ...]` (spatial dims flattened) into
    /// `[B, C, out_shape...]`. `None` entries produce zeros.
    pub fn gather(
        &mut self,
        input: Var,
        index: Arc<[Option<u32>]>,
        out_shape: &[usize],
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() < 2 {
            return Err(shape_err(format!("gather needs [B, C, ...], got {xs:?}")));
        }
        let (b, c, sp) = norm::extents(&xs);
        let n: usize = out_shape.iter().product();
        if n != index.len() {
            return Err(shape_err(format!(
                "gather index has {} entries for output {out_shape:?}",
                index.len()
            )));
        }
        if let Some(bad) = index.iter().flatten().find(|&&i| i as usize >= sp) {
            return Err(shape_err(format!("gather index {bad} out of range {sp}")));
        }
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * c * n);
        for plane in x.chunks(sp.max(1)).take(b * c) {
            out.extend(
                index
                    .iter()
                    .map(|i| i.map_or(T::zero(), |i| plane[i as usize])),
            );
        }
        let mut shape = vec![b, c];
        shape.extend_from_slice(out_shape);
        let out = Array::from_vec(&shape, out)?;
        Ok(self.push(out, Op::Gather { input, index }, &[input]))
    }

    /// Class-weighted cross-entropy of `logits` `[B, Nc, ...]` against per-position
    /// targets (row-major over `B` and the spatial dims):
    /// `L = -(1/M') * sum_m w[t_m] * ln softmax(logits)[t_m, m]` over the `M'`
    /// positions whose target differs from `ignore`.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        weights: &[T],
        ignore: u32,
    ) -> Result<Var> {
        let xs = self.shape(logits).to_vec();
        if xs.len() < 2 {
            return Err(shape_err(format!("cross entropy needs [B, Nc, ...], got {xs:?}")));
        }
        let (b, nc, sp) = norm::extents(&xs);
        if weights.len() != nc {
            return Err(shape_err(format!(
                "{} class weights for {nc} classes",
                weights.len()
            )));
        }
        if targets.len() != b * sp {
            return Err(shape_err(format!(
                "{} targets for {} positions",
                targets.len(),
                b * sp
            )));
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); x.len()];
        let mut total = 0.0f64;
        let mut shift: Option<f64> = None;
        let mut count = 0usize;
        for bi in 0..b {
            for s in 0..sp {
                let t = targets[bi * sp + s];
                let at = |c: usize| (bi * nc + c) * sp + s;
                let m = (0..nc).map(|c| x[at(c)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for c in 0..nc {
                    let e = (x[at(c)] - m).exp();
                    probs[at(c)] = e;
                    z += e;
                }
                for c in 0..nc {
                    probs[at(c)] /= z;
                }
                if t == ignore {
                    continue;
                }
                if t as usize >= nc {
                    return Err(TensorError::InvalidArgument(format!(
                        "target {t} out of range for {nc} classes"
                    )));
                }
                let logp = x[at(t as usize)] - m - z.ln();
                let term = -(weights[t as usize] * logp).to_f64_lossy();
                // summed as offsets from the first term: identical terms average exactly
                let first = *shift.get_or_insert(term);
                total += term - first;
                count += 1;
            }
        }
        if count == 0 {
            return Err(TensorError::NoTargets);
        }
        let out = Array::scalar(T::lit(shift.unwrap_or(0.0) + total / count as f64));
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                ignore,
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalar(ls.to_vec()));
        }
        let mut grads: Vec<Option<Array<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Array::full(ls, T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match node.op {
                Op::Leaf | Op::Param(_) => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Array<T>>], v: Var, g: Array<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Array<T>, grads: &mut [Option<Array<T>>]) -> Result<()> {
        match &node.op {
            Op::Input | Op::Leaf | Op::Param(_) => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need = (
                    self.wants(*input),
                    self.wants(*weight),
                    bias.is_some_and(|b| self.wants(b)),
                );
                let cg = conv2d_backward(self.value(*input), self.value(*weight), g, geom, need);
                if let Some(gx) = cg.input {
                    self.accumulate(grads, *input, gx);
                }
                if let Some(gw) = cg.weight {
                    self.accumulate(grads, *weight, gw);
                }
                if let (Some(b), Some(gb)) = (bias, cg.bias) {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_mode,
            } => {
                let shape = self.shape(*input);
                let ng = norm::backward(
                    g.data(),
                    xhat,
                    shape,
                    inv_std,
                    self.value(*gamma).data(),
                    *batch_mode,
                    self.wants(*input),
                );
                if let Some(dx) = ng.input {
                    self.accumulate(grads, *input, Array::from_vec(shape, dx)?);
                }
                let c = [shape[1]];
                self.accumulate(grads, *gamma, Array::from_vec(&c, ng.gamma)?);
                self.accumulate(grads, *beta, Array::from_vec(&c, ng.beta)?);
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.value(*input).data();
                let mut gx = g.clone();
                for (gv, &xv) in gx.data_mut().iter_mut().zip(x) {
                    if xv < T::zero() {
                        *gv *= *slope;
                    }
                }
                self.accumulate(grads, *input, gx);
            }
            Op::Sigmoid { input } => {
                let mut gx = g.clone();
                for (gv, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                    *gv *= y * (T::one() - y);
                }
                self.accumulate(grads, *input, gx);
            }
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = node.value.axis_extents(*axis)?;
                let y = node.value.data();
                let mut gx = g.clone();
                let d = gx.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: T = (0..len).map(|k| g.data()[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            d[at(k)] = y[at(k)] * (g.data()[at(k)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *input, gx);
            }
            Op::MaxAxis {
                input,
                axis,
                argmax,
            } => {
                let xv = self.value(*input);
                let (outer, len, inner) = xv.axis_extents(*axis)?;
                let mut gx = Array::zeros(xv.shape());
                let d = gx.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let j = o * inner + i;
                        d[(o * len + argmax[j]) * inner + i] += g.data()[j];
                    }
                }
                self.accumulate(grads, *input, gx);
            }
            Op::Upsample2x { input, wrap } => {
                let s = self.shape(*input);
                let gx = resample::upsample2x_backward(g.data(), s[0] * s[1], s[2], s[3], *wrap);
                self.accumulate(grads, *input, Array::from_vec(s, gx)?);
            }
            Op::PadCircularW { input, pad } => {
                let s = self.shape(*input);
                let (w, pad) = (s[3], *pad);
                let nw = w + 2 * pad;
                let mut gx = Array::zeros(s);
                let d = gx.data_mut();
                for (r, grow) in g.data().chunks(nw).enumerate() {
                    let row = &mut d[r * w..(r + 1) * w];
                    for (j, &v) in grow.iter().enumerate() {
                        row[(j + w - pad) % w] += v;
                    }
                }
                self.accumulate(grads, *input, gx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                for (dst, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(dst) {
                        let mut gd = g.clone();
                        for (x, &y) in gd.data_mut().iter_mut().zip(self.value(other).data()) {
                            *x *= y;
                        }
                        self.accumulate(grads, dst, gd);
                    }
                }
            }
            Op::Scale { input, factor } => {
                let f = *factor;
                self.accumulate(grads, *input, g.map(|x| x * f));
            }
            Op::Sum { input } => {
                let gv = g.data()[0];
                self.accumulate(grads, *input, Array::full(self.shape(*input), gv));
            }
            Op::MulChannel { input, scale } => {
                let (_, _, sp) = norm::extents(self.shape(*input));
                let sp = sp.max(1);
                let s = self.value(*scale).data();
                if self.wants(*input) {
                    let mut gx = g.clone();
                    for (bc, chunk) in gx.data_mut().chunks_mut(sp).enumerate() {
                        for v in chunk {
                            *v *= s[bc];
                        }
                    }
                    self.accumulate(grads, *input, gx);
                }
                if self.wants(*scale) {
                    let x = self.value(*input).data();
                    let gs: Vec<T> = g
                        .data()
                        .chunks(sp)
                        .zip(x.chunks(sp))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *scale, Array::from_vec(self.shape(*scale), gs)?);
                }
            }
            Op::GlobalAvgPool { input } => {
                let s = self.shape(*input);
                let (_, _, sp) = norm::extents(s);
                let n = T::lit(sp as f64);
                let mut gx = Vec::with_capacity(g.len() * sp);
                for &gv in g.data() {
                    gx.extend(std::iter::repeat_n(gv / n, sp));
                }
                self.accumulate(grads, *input, Array::from_vec(s, gx)?);
            }
            Op::Concat { inputs } => {
                let (b, ctot, sp) = norm::extents(node.value.shape());
                let mut c0 = 0;
                for &v in inputs {
                    let s = self.shape(v);
                    let c = s[1];
                    if self.wants(v) {
                        let mut gx = Vec::with_capacity(b * c * sp);
                        for bi in 0..b {
                            let start = (bi * ctot + c0) * sp;
                            gx.extend_from_slice(&g.data()[start..start + c * sp]);
                        }
                        self.accumulate(grads, v, Array::from_vec(s, gx)?);
                    }
                    c0 += c;
                }
            }
            Op::Reshape { input } => {
                let gx = g.clone().reshaped(self.shape(*input))?;
                self.accumulate(grads, *input, gx);
            }
            Op::Gather { input, index } => {
                let s = self.shape(*input);
                let (_, _, sp) = norm::extents(s);
                let n = index.len();
                let mut gx = Array::zeros(s);
                for (plane, gplane) in gx.data_mut().chunks_mut(sp.max(1)).zip(g.data().chunks(n.max(1))) {
                    for (i, &gv) in index.iter().zip(gplane) {
                        if let Some(i) = i {
                            plane[*i as usize] += gv;
                        }
                    }
                }
                self.accumulate(grads, *input, gx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                ignore,
                probs,
                count,
            } => {
                let s = self.shape(*logits);
                let (b, nc, sp) = norm::extents(s);
                let scale = g.data()[0] / T::lit(*count as f64);
                let mut gx = vec![T::zero(); probs.len()];
                for bi in 0..b {
                    for p in 0..sp {
                        let t = targets[bi * sp + p];
                        if t == *ignore {
                            continue;
                        }
                        let k = scale * weights[t as usize];
                        for c in 0..nc {
                            let at = (bi * nc + c) * sp + p;
                            let onehot = if c == t as usize { T::one() } else { T::zero() };
                            gx[at] = k * (probs[at] - onehot);
                        }
                    }
                }
                self.accumulate(grads, *logits, Array::from_vec(s, gx)?);
            }
        }
        Ok(())
    }
}
