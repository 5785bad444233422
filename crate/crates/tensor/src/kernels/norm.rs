//! Per-channel batch normalization over `[B, C, ...]` tensors.

use crate::real::Real;

pub(crate) struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance (used for normalization).
    pub var: Vec<T>,
    pub count: usize,
}

/// Returns `(batch, channels, spatial)` extents of a `[B, C, ...]` shape.
pub(crate) fn extents(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

pub(crate) fn batch_stats<T: Real>(x: &[T], shape: &[usize]) -> BatchStats<T> {
    let (b, c, s) = extents(shape);
    let count = b * s;
    let n = T::lit(count as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = 0.0f64;
        for bi in 0..b {
            let base = (bi * c + ch) * s;
            acc += x[base..base + s].iter().map(|v| v.to_f64_lossy()).sum::<f64>();
        }
        let m = T::lit(acc) / n;
        let mut sq = 0.0f64;
        for bi in 0..b {
            let base = (bi * c + ch) * s;
            sq += x[base..base + s]
                .iter()
                .map(|&v| {
                    let d = (v - m).to_f64_lossy();
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = T::lit(sq) / n;
    }
    BatchStats { mean, var, count }
}

/// `y = gamma * (x - mean) * inv_std + beta`; returns `(y, xhat)`.
pub(crate) fn normalize<T: Real>(
    x: &[T],
    shape: &[usize],
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>) {
    let (b, c, s) = extents(shape);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * s;
            let (m, is, g, bt) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for i in base..base + s {
                let h = (x[i] - m) * is;
                xhat[i] = h;
                y[i] = g * h + bt;
            }
        }
    }
    (y, xhat)
}

pub(crate) struct NormGrads<T> {
    pub input: Option<Vec<T>>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub(crate) fn backward<T: Real>(
    gy: &[T],
    xhat: &[T],
    shape: &[usize],
    inv_std: &[T],
    gamma: &[T],
    batch_mode: bool,
    need_input: bool,
) -> NormGrads<T> {
    let (b, c, s) = extents(shape);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * s;
            let mut sg = T::zero();
            let mut sgx = T::zero();
            for i in base..base + s {
                sg += gy[i];
                sgx += gy[i] * xhat[i];
            }
            dbeta[ch] += sg;
            dgamma[ch] += sgx;
        }
    }
    let input = need_input.then(|| {
        let mut dx = vec![T::zero(); gy.len()];
        let n = T::lit((b * s) as f64);
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * s;
                let k = gamma[ch] * inv_std[ch];
                if batch_mode {
                    let mg = dbeta[ch] / n;
                    let mgx = dgamma[ch] / n;
                    for i in base..base + s {
                        dx[i] = k * (gy[i] - mg - xhat[i] * mgx);
                    }
                } else {
                    for i in base..base + s {
                        dx[i] = k * gy[i];
                    }
                }
            }
        }
        dx
    });
    NormGrads {
        input,
        gamma: dgamma,
        beta: dbeta,
    }
}
