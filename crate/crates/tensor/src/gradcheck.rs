//! Finite-difference gradient checking in double precision.

use crate::array::Array;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::HasParams;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Base step; the step for entry `x` is `h * max(1, |x|)`.
    pub step: f64,
    /// Check at most this many entries per tensor, evenly spaced. `None` checks all.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            max_entries: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    /// Entries whose analytic gradient is nonzero.
    pub nonzero: usize,
    pub max_error: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    /// Largest `|analytic - numeric| / max(1, |analytic|)` over all checked entries.
    pub fn max_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }
}

fn error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn indices(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => (0..m).map(|i| i * len / m).collect(),
        _ => (0..len).collect(),
    }
}

fn central<F>(x: &mut [f64], i: usize, h: f64, mut eval: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let x0 = x[i];
    let step = h * x0.abs().max(1.0);
    x[i] = x0 + step;
    let up = eval(x)?;
    x[i] = x0 - step;
    let down = eval(x)?;
    x[i] = x0;
    Ok((up - down) / (2.0 * step))
}

/// Checks the gradients of a scalar function of several leaf tensors.
///
/// `build` receives a fresh graph and one leaf per input and returns the loss node.
pub fn check_leaves<F>(inputs: &[Array<f64>], opts: GradCheckOptions, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let run = |vals: &[Array<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|a| g.leaf(a.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok((g, vars, loss))
    };
    let (g, vars, loss) = run(inputs)?;
    let grads = g.backward(loss)?;
    let mut report = GradCheckReport::default();
    let mut work: Vec<Array<f64>> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Array::zeros(inputs[k].shape()));
        let mut tc = TensorCheck {
            name: format!("input{k}"),
            checked: 0,
            nonzero: analytic.data().iter().filter(|&&a| a != 0.0).count(),
            max_error: 0.0,
            worst_index: 0,
        };
        for i in indices(inputs[k].len(), opts.max_entries) {
            let mut x = work[k].data().to_vec();
            let num = central(&mut x, i, opts.step, |xs| {
                work[k].data_mut().copy_from_slice(xs);
                let (g, _, l) = run(&work)?;
                Ok(g.value(l).data()[0])
            })?;
            work[k].data_mut().copy_from_slice(inputs[k].data());
            let e = error(analytic.data()[i], num);
            if e > tc.max_error {
                tc.max_error = e;
                tc.worst_index = i;
            }
            tc.checked += 1;
        }
        report.tensors.push(tc);
    }
    Ok(report)
}

/// Checks parameter gradients of a model.
///
/// `loss(model, with_grad)` returns the scalar loss; when `with_grad` is set it must
/// also accumulate the analytic gradients into the model's parameter store (which
/// is zeroed beforehand). Batch-norm running buffers should not be touched.
pub fn check_params<M, F>(model: &mut M, opts: GradCheckOptions, mut loss: F) -> Result<GradCheckReport>
where
    M: HasParams<f64>,
    F: FnMut(&mut M, bool) -> Result<f64>,
{
    model.params_mut().zero_grad();
    loss(model, true)?;
    let analytic: Vec<(String, Array<f64>)> = model
        .params()
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.grad.clone()))
        .collect();
    model.params_mut().zero_grad();
    let mut report = GradCheckReport::default();
    for (k, (name, grad)) in analytic.iter().enumerate() {
        let mut tc = TensorCheck {
            name: name.clone(),
            checked: 0,
            nonzero: grad.data().iter().filter(|&&a| a != 0.0).count(),
            max_error: 0.0,
            worst_index: 0,
        };
        for i in indices(grad.len(), opts.max_entries) {
            let mut x = model.params().params()[k].value.data().to_vec();
            let num = central(&mut x, i, opts.step, |xs| {
                model.params_mut().params_mut()[k]
                    .value
                    .data_mut()
                    .copy_from_slice(xs);
                loss(model, false)
            })?;
            model.params_mut().params_mut()[k]
                .value
                .data_mut()
                .copy_from_slice(&x);
            let e = error(grad.data()[i], num);
            if e > tc.max_error {
                tc.max_error = e;
                tc.worst_index = i;
            }
            tc.checked += 1;
        }
        report.tensors.push(tc);
    }
    Ok(report)
}
