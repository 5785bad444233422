//! 2D cross-correlation over NCHW tensors.
//!
//! Three code paths share one contract: pointwise (1x1, stride 1, no padding)
//! goes straight to GEMM, depthwise (`groups == Cin == Cout`) runs direct loops,
//! everything else goes through im2col + GEMM per group.

use crate::array::Array;
use crate::error::{shape_err, Result};
use crate::real::{gemm, Real, Trans};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            dilation: (1, 1),
            padding: (0, 0),
            groups: 1,
        }
    }
}

impl Conv2dOptions {
    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }
    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = (d, d);
        self
    }
    pub fn padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }
    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }
}

/// Resolved sizes of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub opts: Conv2dOptions,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        bias: Option<&[usize]>,
        opts: Conv2dOptions,
    ) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(shape_err(format!(
                "conv2d expects 4-d input and weight, got input {input:?} and weight {weight:?}"
            )));
        }
        let g = opts.groups;
        if g == 0
            || opts.stride.0 == 0
            || opts.stride.1 == 0
            || opts.dilation.0 == 0
            || opts.dilation.1 == 0
        {
            return Err(shape_err("conv2d stride, dilation and groups must be >= 1"));
        }
        let (batch, cin, h, w) = (input[0], input[1], input[2], input[3]);
        let (cout, cin_g, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if cin % g != 0 || cout % g != 0 || cin_g * g != cin {
            return Err(shape_err(format!(
                "conv2d input {input:?} and weight {weight:?} disagree for groups={g}"
            )));
        }
        if let Some(b) = bias {
            if b != [cout] {
                return Err(shape_err(format!(
                    "conv2d bias {b:?} does not match weight {weight:?}"
                )));
            }
        }
        let eff_h = opts.dilation.0 * (kh - 1) + 1;
        let eff_w = opts.dilation.1 * (kw - 1) + 1;
        let ph = h + 2 * opts.padding.0;
        let pw = w + 2 * opts.padding.1;
        if kh == 0 || kw == 0 || ph < eff_h || pw < eff_w {
            return Err(shape_err(format!(
                "conv2d kernel {weight:?} (dilation {:?}) does not fit padded input {input:?}",
                opts.dilation
            )));
        }
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh: (ph - eff_h) / opts.stride.0 + 1,
            ow: (pw - eff_w) / opts.stride.1 + 1,
            opts,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.opts.stride == (1, 1)
            && self.opts.padding == (0, 0)
            && self.opts.groups == 1
    }

    fn is_depthwise(&self) -> bool {
        self.opts.groups == self.cin && self.cout == self.cin && self.cin > 1
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.cout, self.oh, self.ow]
    }

    /// Range of output indices `o` for which `o * stride + offset` lands in `[0, len)`.
    fn valid_range(out_len: usize, stride: usize, offset: isize, len: usize) -> (usize, usize) {
        // first o with o*stride + offset >= 0
        let lo = if offset >= 0 {
            0
        } else {
            ((-offset) as usize).div_ceil(stride)
        };
        // last o with o*stride + offset <= len-1
        let hi_incl = len as isize - 1 - offset;
        if hi_incl < 0 {
            return (0, 0);
        }
        let hi = ((hi_incl as usize) / stride + 1).min(out_len);
        (lo.min(hi), hi)
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &Array<T>,
    w: &Array<T>,
    b: Option<&Array<T>>,
    geom: &ConvGeom,
) -> Array<T> {
    let mut out = Array::zeros(&geom.out_shape());
    if geom.is_pointwise() {
        pointwise_forward(x.data(), w.data(), out.data_mut(), geom);
    } else if geom.is_depthwise() {
        depthwise_forward(x.data(), w.data(), out.data_mut(), geom);
    } else {
        im2col_forward(x.data(), w.data(), out.data_mut(), geom);
    }
    if let Some(b) = b {
        let plane = geom.oh * geom.ow;
        for chunk in out.data_mut().chunks_mut(geom.cout * plane) {
            for (co, &bv) in b.data().iter().enumerate() {
                for v in &mut chunk[co * plane..(co + 1) * plane] {
                    *v += bv;
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Array<T>>,
    pub weight: Option<Array<T>>,
    pub bias: Option<Array<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &Array<T>,
    w: &Array<T>,
    grad_out: &Array<T>,
    geom: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_x, need_w, need_b) = need;
    let mut gx = need_x.then(|| Array::zeros(x.shape()));
    let mut gw = need_w.then(|| Array::zeros(w.shape()));
    if geom.is_pointwise() {
        pointwise_backward(
            x.data(),
            w.data(),
            grad_out.data(),
            gx.as_mut().map(|a| a.data_mut()),
            gw.as_mut().map(|a| a.data_mut()),
            geom,
        );
    } else if geom.is_depthwise() {
        depthwise_backward(
            x.data(),
            w.data(),
            grad_out.data(),
            gx.as_mut().map(|a| a.data_mut()),
            gw.as_mut().map(|a| a.data_mut()),
            geom,
        );
    } else {
        im2col_backward(
            x.data(),
            w.data(),
            grad_out.data(),
            gx.as_mut().map(|a| a.data_mut()),
            gw.as_mut().map(|a| a.data_mut()),
            geom,
        );
    }
    let gb = need_b.then(|| {
        let plane = geom.oh * geom.ow;
        let mut gb = Array::zeros(&[geom.cout]);
        for chunk in grad_out.data().chunks(geom.cout * plane) {
            for (co, acc) in gb.data_mut().iter_mut().enumerate() {
                *acc += chunk[co * plane..(co + 1) * plane].iter().copied().sum::<T>();
            }
        }
        gb
    });
    ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}

fn pointwise_forward<T: Real>(x: &[T], w: &[T], out: &mut [T], g: &ConvGeom) {
    let plane = g.h * g.w;
    for b in 0..g.batch {
        let xb = &x[b * g.cin * plane..(b + 1) * g.cin * plane];
        let ob = &mut out[b * g.cout * plane..(b + 1) * g.cout * plane];
        gemm(g.cout, g.cin, plane, w, Trans::No, xb, Trans::No, T::zero(), ob);
    }
}

fn pointwise_backward<T: Real>(
    x: &[T],
    w: &[T],
    gy: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    g: &ConvGeom,
) {
    let plane = g.h * g.w;
    for b in 0..g.batch {
        let gyb = &gy[b * g.cout * plane..(b + 1) * g.cout * plane];
        if let Some(gx) = gx.as_deref_mut() {
            let gxb = &mut gx[b * g.cin * plane..(b + 1) * g.cin * plane];
            gemm(g.cin, g.cout, plane, w, Trans::Yes, gyb, Trans::No, T::zero(), gxb);
        }
        if let Some(gw) = gw.as_deref_mut() {
            let xb = &x[b * g.cin * plane..(b + 1) * g.cin * plane];
            gemm(g.cout, plane, g.cin, gyb, Trans::No, xb, Trans::Yes, T::one(), gw);
        }
    }
}

fn depthwise_forward<T: Real>(x: &[T], w: &[T], out: &mut [T], g: &ConvGeom) {
    let (sh, sw) = g.opts.stride;
    let (dh, dw) = g.opts.dilation;
    let (ph, pw) = g.opts.padding;
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    for b in 0..g.batch {
        for c in 0..g.cin {
            let xp = &x[(b * g.cin + c) * in_plane..(b * g.cin + c + 1) * in_plane];
            let op = &mut out[(b * g.cout + c) * out_plane..(b * g.cout + c + 1) * out_plane];
            let wk = &w[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            for ky in 0..g.kh {
                let off_y = (ky * dh) as isize - ph as isize;
                let (oy0, oy1) = ConvGeom::valid_range(g.oh, sh, off_y, g.h);
                for kx in 0..g.kw {
                    let wv = wk[ky * g.kw + kx];
                    let off_x = (kx * dw) as isize - pw as isize;
                    let (ox0, ox1) = ConvGeom::valid_range(g.ow, sw, off_x, g.w);
                    for oy in oy0..oy1 {
                        let iy = (oy * sh) as isize + off_y;
                        let row_in = &xp[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let row_out = &mut op[oy * g.ow..(oy + 1) * g.ow];
                        if sw == 1 {
                            let base = (ox0 as isize + off_x) as usize;
                            for (o, &xi) in row_out[ox0..ox1]
                                .iter_mut()
                                .zip(&row_in[base..base + (ox1 - ox0)])
                            {
                                *o += wv * xi;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                let ix = ((ox * sw) as isize + off_x) as usize;
                                row_out[ox] += wv * row_in[ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Real>(
    x: &[T],
    w: &[T],
    gy: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    g: &ConvGeom,
) {
    let (sh, sw) = g.opts.stride;
    let (dh, dw) = g.opts.dilation;
    let (ph, pw) = g.opts.padding;
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    for b in 0..g.batch {
        for c in 0..g.cin {
            let in_off = (b * g.cin + c) * in_plane;
            let xp = &x[in_off..in_off + in_plane];
            let gyp = &gy[(b * g.cout + c) * out_plane..(b * g.cout + c + 1) * out_plane];
            for ky in 0..g.kh {
                let off_y = (ky * dh) as isize - ph as isize;
                let (oy0, oy1) = ConvGeom::valid_range(g.oh, sh, off_y, g.h);
                for kx in 0..g.kw {
                    let widx = c * g.kh * g.kw + ky * g.kw + kx;
                    let wv = w[widx];
                    let off_x = (kx * dw) as isize - pw as isize;
                    let (ox0, ox1) = ConvGeom::valid_range(g.ow, sw, off_x, g.w);
                    let mut wacc = T::zero();
                    for oy in oy0..oy1 {
                        let iy = ((oy * sh) as isize + off_y) as usize;
                        let grow = &gyp[oy * g.ow + ox0..oy * g.ow + ox1];
                        if sw == 1 {
                            let base = iy * g.w + (ox0 as isize + off_x) as usize;
                            if gw.is_some() {
                                let xrow = &xp[base..base + grow.len()];
                                wacc += dot(grow, xrow);
                            }
                            if let Some(gx) = gx.as_deref_mut() {
                                let gxrow = &mut gx[in_off + base..in_off + base + grow.len()];
                                for (d, &gv) in gxrow.iter_mut().zip(grow) {
                                    *d += wv * gv;
                                }
                            }
                            continue;
                        }
                        if gw.is_some() {
                            let xrow = &xp[iy * g.w..(iy + 1) * g.w];
                            for (i, &gv) in grow.iter().enumerate() {
                                let ix = (((ox0 + i) * sw) as isize + off_x) as usize;
                                wacc += gv * xrow[ix];
                            }
                        }
                        if let Some(gx) = gx.as_deref_mut() {
                            let gxrow = &mut gx[in_off + iy * g.w..in_off + (iy + 1) * g.w];
                            for (i, &gv) in grow.iter().enumerate() {
                                let ix = (((ox0 + i) * sw) as isize + off_x) as usize;
                                gxrow[ix] += wv * gv;
                            }
                        }
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        gw[widx] += wacc;
                    }
                }
            }
        }
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

/// Fills `col` (rows = cin_g*kh*kw, cols = oh*ow) for one batch item and group.
fn im2col<T: Real>(x: &[T], col: &mut [T], g: &ConvGeom, c0: usize, cin_g: usize) {
    let (sh, sw) = g.opts.stride;
    let (dh, dw) = g.opts.dilation;
    let (ph, pw) = g.opts.padding;
    let plane = g.h * g.w;
    let ocols = g.oh * g.ow;
    for ci in 0..cin_g {
        let xp = &x[(c0 + ci) * plane..(c0 + ci + 1) * plane];
        for ky in 0..g.kh {
            let off_y = (ky * dh) as isize - ph as isize;
            let (oy0, oy1) = ConvGeom::valid_range(g.oh, sh, off_y, g.h);
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * ocols..(row + 1) * ocols];
                let off_x = (kx * dw) as isize - pw as isize;
                let (ox0, ox1) = ConvGeom::valid_range(g.ow, sw, off_x, g.w);
                dst[..oy0 * g.ow].fill(T::zero());
                dst[oy1.max(oy0) * g.ow..].fill(T::zero());
                for oy in oy0..oy1 {
                    let iy = ((oy * sh) as isize + off_y) as usize;
                    let xrow = &xp[iy * g.w..(iy + 1) * g.w];
                    dst[oy * g.ow..oy * g.ow + ox0].fill(T::zero());
                    dst[oy * g.ow + ox1..(oy + 1) * g.ow].fill(T::zero());
                    let drow = &mut dst[oy * g.ow + ox0..oy * g.ow + ox1];
                    if sw == 1 {
                        let base = (ox0 as isize + off_x) as usize;
                        drow.copy_from_slice(&xrow[base..base + drow.len()]);
                    } else {
                        for (i, d) in drow.iter_mut().enumerate() {
                            *d = xrow[(((ox0 + i) * sw) as isize + off_x) as usize];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], gx: &mut [T], g: &ConvGeom, c0: usize, cin_g: usize) {
    let (sh, sw) = g.opts.stride;
    let (dh, dw) = g.opts.dilation;
    let (ph, pw) = g.opts.padding;
    let plane = g.h * g.w;
    let ocols = g.oh * g.ow;
    for ci in 0..cin_g {
        let gp = &mut gx[(c0 + ci) * plane..(c0 + ci + 1) * plane];
        for ky in 0..g.kh {
            let off_y = (ky * dh) as isize - ph as isize;
            let (oy0, oy1) = ConvGeom::valid_range(g.oh, sh, off_y, g.h);
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * ocols..(row + 1) * ocols];
                let off_x = (kx * dw) as isize - pw as isize;
                let (ox0, ox1) = ConvGeom::valid_range(g.ow, sw, off_x, g.w);
                for oy in oy0..oy1 {
                    let iy = ((oy * sh) as isize + off_y) as usize;
                    let grow = &mut gp[iy * g.w..(iy + 1) * g.w];
                    let srow = &src[oy * g.ow + ox0..oy * g.ow + ox1];
                    if sw == 1 {
                        let base = (ox0 as isize + off_x) as usize;
                        for (d, &v) in grow[base..base + srow.len()].iter_mut().zip(srow) {
                            *d += v;
                        }
                    } else {
                        for (i, &v) in srow.iter().enumerate() {
                            grow[(((ox0 + i) * sw) as isize + off_x) as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn im2col_forward<T: Real>(x: &[T], w: &[T], out: &mut [T], g: &ConvGeom) {
    let groups = g.opts.groups;
    let cin_g = g.cin / groups;
    let cout_g = g.cout / groups;
    let k = cin_g * g.kh * g.kw;
    let ocols = g.oh * g.ow;
    let mut col = vec![T::zero(); k * ocols];
    for b in 0..g.batch {
        let xb = &x[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
        for gi in 0..groups {
            im2col(xb, &mut col, g, gi * cin_g, cin_g);
            let wg = &w[gi * cout_g * k..(gi + 1) * cout_g * k];
            let o0 = (b * g.cout + gi * cout_g) * ocols;
            let og = &mut out[o0..o0 + cout_g * ocols];
            gemm(cout_g, k, ocols, wg, Trans::No, &col, Trans::No, T::zero(), og);
        }
    }
}

fn im2col_backward<T: Real>(
    x: &[T],
    w: &[T],
    gy: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    g: &ConvGeom,
) {
    let groups = g.opts.groups;
    let cin_g = g.cin / groups;
    let cout_g = g.cout / groups;
    let k = cin_g * g.kh * g.kw;
    let ocols = g.oh * g.ow;
    let in_len = g.cin * g.h * g.w;
    let mut col = vec![T::zero(); k * ocols];
    for b in 0..g.batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        for gi in 0..groups {
            let o0 = (b * g.cout + gi * cout_g) * ocols;
            let gyg = &gy[o0..o0 + cout_g * ocols];
            let wg = &w[gi * cout_g * k..(gi + 1) * cout_g * k];
            if let Some(gw) = gw.as_deref_mut() {
                im2col(xb, &mut col, g, gi * cin_g, cin_g);
                let gwg = &mut gw[gi * cout_g * k..(gi + 1) * cout_g * k];
                gemm(cout_g, ocols, k, gyg, Trans::No, &col, Trans::Yes, T::one(), gwg);
            }
            if let Some(gx) = gx.as_deref_mut() {
                gemm(k, cout_g, ocols, wg, Trans::Yes, gyg, Trans::No, T::zero(), &mut col);
                col2im(&col, &mut gx[b * in_len..(b + 1) * in_len], g, gi * cin_g, cin_g);
            }
        }
    }
}
