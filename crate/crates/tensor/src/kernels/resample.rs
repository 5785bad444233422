//! Bilinear x2 upsampling (half-pixel centers, i.e. `align_corners = false`).

use crate::real::Real;

/// Source taps for one output coordinate: `out = w0 * in[i0] + w1 * in[i1]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap<T> {
    pub i0: usize,
    pub i1: usize,
    pub w0: T,
    pub w1: T,
}

/// Taps along one axis of length `len` upsampled to `2 * len`.
/// Borders clamp unless `wrap` is set, in which case indices wrap modulo `len`.
pub(crate) fn taps<T: Real>(len: usize, wrap: bool) -> Vec<Tap<T>> {
    (0..2 * len)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            if wrap {
                let f = src.floor();
                let frac = src - f;
                let i0 = (f as isize).rem_euclid(len as isize) as usize;
                let i1 = (i0 + 1) % len;
                Tap {
                    i0,
                    i1,
                    w0: T::lit(1.0 - frac),
                    w1: T::lit(frac),
                }
            } else {
                let src = src.max(0.0);
                let f = src.floor();
                let frac = src - f;
                let i0 = (f as usize).min(len - 1);
                let i1 = (i0 + 1).min(len - 1);
                Tap {
                    i0,
                    i1,
                    w0: T::lit(1.0 - frac),
                    w1: T::lit(frac),
                }
            }
        })
        .collect()
}

pub(crate) fn upsample2x<T: Real>(x: &[T], planes: usize, h: usize, w: usize, wrap_w: bool) -> Vec<T> {
    let ty = taps::<T>(h, false);
    let tx = taps::<T>(w, wrap_w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, a) in ty.iter().enumerate() {
            let r0 = &src[a.i0 * w..(a.i0 + 1) * w];
            let r1 = &src[a.i1 * w..(a.i1 + 1) * w];
            let drow = &mut dst[oy * ow..(oy + 1) * ow];
            for (ox, b) in tx.iter().enumerate() {
                let top = b.w0 * r0[b.i0] + b.w1 * r0[b.i1];
                let bot = b.w0 * r1[b.i0] + b.w1 * r1[b.i1];
                drow[ox] = a.w0 * top + a.w1 * bot;
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Real>(
    gy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    wrap_w: bool,
) -> Vec<T> {
    let ty = taps::<T>(h, false);
    let tx = taps::<T>(w, wrap_w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &gy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            let grow = &src[oy * ow..(oy + 1) * ow];
            for (ox, b) in tx.iter().enumerate() {
                let g = grow[ox];
                dst[a.i0 * w + b.i0] += a.w0 * b.w0 * g;
                dst[a.i0 * w + b.i1] += a.w0 * b.w1 * g;
                dst[a.i1 * w + b.i0] += a.w1 * b.w0 * g;
                dst[a.i1 * w + b.i1] += a.w1 * b.w1 * g;
            }
        }
    }
    gx
}
