//! Raw loops behind the differentiable primitives. Shapes are validated by the
//! tape before these are called.

/// Stride and symmetric zero padding of a 2-D convolution or pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub stride: usize,
    pub pad: usize,
}

pub fn conv_out_len(input: usize, kernel: usize, win: Window) -> Option<usize> {
    let padded = input + 2 * win.pad;
    if padded < kernel || win.stride == 0 {
        return None;
    }
    Some((padded - kernel) / win.stride + 1)
}

/// Output positions `lo..hi` whose input coordinate `o*stride + k - pad` lands inside `[0, in_len)`.
#[inline]
fn valid_range(k: usize, win: Window, in_len: usize, out_len: usize) -> (usize, usize) {
    let s = win.stride;
    let lo = if k >= win.pad { 0 } else { (win.pad - k).div_ceil(s) };
    let hi = if in_len + win.pad < k + 1 {
        0
    } else {
        ((in_len - 1 + win.pad - k) / s + 1).min(out_len)
    };
    (lo, hi.max(lo))
}

/// `c = op(a) * op(b)` with `op` an optional transpose; `a` is stored `[rows, cols]`.
pub fn matmul(a: &[f64], a_dims: (usize, usize), ta: bool, b: &[f64], b_dims: (usize, usize), tb: bool) -> (Vec<f64>, usize, usize) {
    let (m, k) = if ta { (a_dims.1, a_dims.0) } else { a_dims };
    let n = if tb { b_dims.0 } else { b_dims.1 };
    let a_rm: std::borrow::Cow<[f64]> = if ta { transpose(a, a_dims.0, a_dims.1).into() } else { a.into() };
    let b_rm: std::borrow::Cow<[f64]> = if tb { transpose(b, b_dims.0, b_dims.1).into() } else { b.into() };
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a_rm[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b_rm[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    (c, m, n)
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// Dimensions of a convolution: input `[b, ci, h, w]`, kernel `[co, ci, kh, kw]`,
/// output `[b, co, oh, ow]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub win: Window,
}

impl ConvDims {
    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.in_ch, self.in_h, self.in_w]
    }
    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.k_h, self.k_w]
    }
    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_ch, self.out_h, self.out_w]
    }
}

/// Visits every (input index, kernel index, output index) triple of a
/// convolution, innermost over output columns.
#[inline(always)]
fn conv_visit(d: &ConvDims, mut f: impl FnMut(usize, usize, usize, usize)) {
    let s = d.win.stride;
    let in_plane = d.in_h * d.in_w;
    let out_plane = d.out_h * d.out_w;
    for b in 0..d.batch {
        for co in 0..d.out_ch {
            let out_base = (b * d.out_ch + co) * out_plane;
            for ci in 0..d.in_ch {
                let in_base = (b * d.in_ch + ci) * in_plane;
                let k_base = (co * d.in_ch + ci) * d.k_h * d.k_w;
                for kh in 0..d.k_h {
                    let (oh_lo, oh_hi) = valid_range(kh, d.win, d.in_h, d.out_h);
                    for kw in 0..d.k_w {
                        let (ow_lo, ow_hi) = valid_range(kw, d.win, d.in_w, d.out_w);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let k_idx = k_base + kh * d.k_w + kw;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * s + kh - d.win.pad;
                            let in_row = in_base + ih * d.in_w + ow_lo * s + kw - d.win.pad;
                            let out_row = out_base + oh * d.out_w + ow_lo;
                            f(in_row, k_idx, out_row, ow_hi - ow_lo);
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d(x: &[f64], k: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.output_shape().iter().product()];
    let s = d.win.stride;
    conv_visit(d, |in_row, k_idx, out_row, n| {
        let kv = k[k_idx];
        let o = &mut out[out_row..out_row + n];
        for (j, ov) in o.iter_mut().enumerate() {
            *ov += kv * x[in_row + j * s];
        }
    });
    out
}

/// Adjoint of [`conv2d`] with respect to its input (a transposed convolution).
pub fn conv2d_input_grad(g: &[f64], k: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut gx = vec![0.0; d.input_shape().iter().product()];
    let s = d.win.stride;
    conv_visit(d, |in_row, k_idx, out_row, n| {
        let kv = k[k_idx];
        let gr = &g[out_row..out_row + n];
        for (j, &gv) in gr.iter().enumerate() {
            gx[in_row + j * s] += kv * gv;
        }
    });
    gx
}

/// Adjoint of [`conv2d`] with respect to its kernel.
pub fn conv2d_kernel_grad(x: &[f64], g: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut gk = vec![0.0; d.kernel_shape().iter().product()];
    let s = d.win.stride;
    conv_visit(d, |in_row, k_idx, out_row, n| {
        let gr = &g[out_row..out_row + n];
        let mut acc = 0.0;
        for (j, &gv) in gr.iter().enumerate() {
            acc += gv * x[in_row + j * s];
        }
        gk[k_idx] += acc;
    });
    gk
}

/// Square pooling window geometry over `[b, c, h, w]` with no padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolDims {
    pub planes: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub size: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub fn avg_pool(x: &[f64], d: &PoolDims) -> Vec<f64> {
    let mut out = vec![0.0; d.planes * d.out_h * d.out_w];
    let scale = 1.0 / (d.size * d.size) as f64;
    for p in 0..d.planes {
        let xin = &x[p * d.in_h * d.in_w..];
        for oh in 0..d.out_h {
            for ow in 0..d.out_w {
                let mut acc = 0.0;
                for i in 0..d.size {
                    for j in 0..d.size {
                        acc += xin[(oh * d.stride + i) * d.in_w + ow * d.stride + j];
                    }
                }
                out[(p * d.out_h + oh) * d.out_w + ow] = acc * scale;
            }
        }
    }
    out
}

pub fn avg_pool_adjoint(g: &[f64], d: &PoolDims) -> Vec<f64> {
    let mut gx = vec![0.0; d.planes * d.in_h * d.in_w];
    let scale = 1.0 / (d.size * d.size) as f64;
    for p in 0..d.planes {
        let base = p * d.in_h * d.in_w;
        for oh in 0..d.out_h {
            for ow in 0..d.out_w {
                let gv = g[(p * d.out_h + oh) * d.out_w + ow] * scale;
                for i in 0..d.size {
                    for j in 0..d.size {
                        gx[base + (oh * d.stride + i) * d.in_w + ow * d.stride + j] += gv;
                    }
                }
            }
        }
    }
    gx
}

/// Flat input index of the maximum in each pooling window (first maximum on ties).
pub fn max_pool_argmax(x: &[f64], d: &PoolDims) -> Vec<usize> {
    let mut idx = Vec::with_capacity(d.planes * d.out_h * d.out_w);
    for p in 0..d.planes {
        let base = p * d.in_h * d.in_w;
        for oh in 0..d.out_h {
            for ow in 0..d.out_w {
                let mut best = base + oh * d.stride * d.in_w + ow * d.stride;
                for i in 0..d.size {
                    for j in 0..d.size {
                        let at = base + (oh * d.stride + i) * d.in_w + ow * d.stride + j;
                        if x[at] > x[best] {
                            best = at;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}

/// Row-wise softmax of a `[rows, cols]` matrix.
pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - m).exp();
            z += *o;
        }
        for o in or.iter_mut() {
            *o /= z;
        }
    }
    out
}

/// Row-wise log-softmax of a `[rows, cols]` matrix.
pub fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + xr.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = v - lse;
        }
    }
    out
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
