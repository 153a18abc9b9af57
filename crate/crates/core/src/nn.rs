//! Minimal f32 CNN kernels with explicit backward passes.
//!
//! Tensors are NCHW. Batch items are processed in parallel; every reduction
//! across items or pixels runs in a fixed order, so results do not depend on
//! the thread count.

use rayon::prelude::*;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Self { n, c, h, w, data }
    }

    #[inline]
    pub fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn item(&self, i: usize) -> &[f32] {
        let l = self.item_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn same_shape(&self, o: &Tensor) -> bool {
        (self.n, self.c, self.h, self.w) == (o.n, o.c, o.h, o.w)
    }
}

/// A trainable array with its gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Self {
            name: name.into(),
            shape,
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// `c = a * b` for row-major `a: m x k`, `b: k x n`.
fn gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 0.0, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c = a * b^T` for `a: m x k`, `b: n x k`.
fn gemm_bt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), 1, k as isize, 0.0, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c = a^T * b` for `a: k x m`, `b: k x n`.
fn gemm_at(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0, a.as_ptr(), 1, m as isize, b.as_ptr(), n as isize, 1, 0.0, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Columns for a `k x k` convolution with zero padding `k / 2`.
fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, col: &mut [f32]) {
    let r = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                let oy = ky as isize - r;
                let ox = kx as isize - r;
                for y in 0..h {
                    let sy = y as isize + oy;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    for (x, d) in dst.iter_mut().enumerate() {
                        let sx = x as isize + ox;
                        *d = if sx < 0 || sx >= w as isize { 0.0 } else { srow[sx as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image.
fn col2im(col: &[f32], c: usize, h: usize, w: usize, k: usize, x: &mut [f32]) {
    let r = (k / 2) as isize;
    let hw = h * w;
    x.iter_mut().for_each(|v| *v = 0.0);
    for ci in 0..c {
        let dst = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                let oy = ky as isize - r;
                let ox = kx as isize - r;
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    let srow = &row[y * w..(y + 1) * w];
                    for (x, &v) in srow.iter().enumerate() {
                        let sx = x as isize + ox;
                        if sx >= 0 && sx < w as isize {
                            drow[sx as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Same-size `k x k` convolution. `weight` is `cout x cin x k x k`.
pub fn conv_forward(x: &Tensor, weight: &[f32], bias: Option<&[f32]>, cout: usize, k: usize) -> Tensor {
    let (cin, h, w) = (x.c, x.h, x.w);
    let kk = cin * k * k;
    assert_eq!(weight.len(), cout * kk, "conv weight shape");
    let hw = h * w;
    let mut out = Tensor::zeros(x.n, cout, h, w);
    out.data
        .par_chunks_mut(cout * hw)
        .enumerate()
        .for_each(|(i, o)| {
            let xi = x.item(i);
            if k == 1 {
                gemm(cout, kk, hw, weight, xi, o);
            } else {
                let mut col = vec![0.0f32; kk * hw];
                im2col(xi, cin, h, w, k, &mut col);
                gemm(cout, kk, hw, weight, &col, o);
            }
            if let Some(b) = bias {
                for (co, plane) in o.chunks_mut(hw).enumerate() {
                    plane.iter_mut().for_each(|v| *v += b[co]);
                }
            }
        });
    out
}

/// Returns `dx` and adds into `dweight` (and `dbias`).
pub fn conv_backward(
    x: &Tensor,
    weight: &[f32],
    dy: &Tensor,
    k: usize,
    dweight: &mut [f32],
    dbias: Option<&mut [f32]>,
) -> Tensor {
    let (cin, h, w) = (x.c, x.h, x.w);
    let cout = dy.c;
    let kk = cin * k * k;
    let hw = h * w;
    let per_item: Vec<(Vec<f32>, Vec<f32>)> = (0..x.n)
        .into_par_iter()
        .map(|i| {
            let xi = x.item(i);
            let dyi = dy.item(i);
            let mut dw = vec![0.0f32; cout * kk];
            let mut dx = vec![0.0f32; cin * hw];
            if k == 1 {
                gemm_bt(cout, hw, kk, dyi, xi, &mut dw);
                gemm_at(kk, cout, hw, weight, dyi, &mut dx);
            } else {
                let mut col = vec![0.0f32; kk * hw];
                im2col(xi, cin, h, w, k, &mut col);
                gemm_bt(cout, hw, kk, dyi, &col, &mut dw);
                gemm_at(kk, cout, hw, weight, dyi, &mut col);
                col2im(&col, cin, h, w, k, &mut dx);
            }
            (dw, dx)
        })
        .collect();
    let mut dx = Tensor::zeros(x.n, cin, h, w);
    for (i, (dw, dxi)) in per_item.into_iter().enumerate() {
        for (a, b) in dweight.iter_mut().zip(&dw) {
            *a += b;
        }
        dx.data[i * cin * hw..(i + 1) * cin * hw].copy_from_slice(&dxi);
    }
    if let Some(db) = dbias {
        for i in 0..dy.n {
            for (co, plane) in dy.item(i).chunks(hw).enumerate() {
                db[co] += plane.iter().map(|&v| v as f64).sum::<f64>() as f32;
            }
        }
    }
    dx
}

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f32>,
}

/// Per-channel values gathered across the batch, in item order.
fn channel_sum<F: Fn(usize, usize) -> f64 + Sync>(n: usize, c: usize, f: F) -> Vec<f64> {
    (0..c)
        .into_par_iter()
        .map(|ch| (0..n).map(|i| f(i, ch)).sum())
        .collect()
}

/// Batch normalization. In training mode batch statistics are used and the
/// running statistics are updated; otherwise the running statistics are used.
pub fn bn_forward(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    running_mean: &mut [f32],
    running_var: &mut [f32],
    train: bool,
) -> (Tensor, Option<BnCache>) {
    let (n, c, hw) = (x.n, x.c, x.plane());
    let plane = |i: usize, ch: usize| &x.data[(i * c + ch) * hw..(i * c + ch + 1) * hw];
    let (mean, var): (Vec<f32>, Vec<f32>) = if train {
        let m = (n * hw) as f64;
        let sums = channel_sum(n, c, |i, ch| plane(i, ch).iter().map(|&v| v as f64).sum());
        let mean: Vec<f64> = sums.iter().map(|s| s / m).collect();
        let sq = channel_sum(n, c, |i, ch| {
            plane(i, ch).iter().map(|&v| (v as f64 - mean[ch]).powi(2)).sum()
        });
        let var: Vec<f64> = sq.iter().map(|s| s / m).collect();
        for ch in 0..c {
            let unbiased = if m > 1.0 { var[ch] * m / (m - 1.0) } else { var[ch] };
            running_mean[ch] = (1.0 - BN_MOMENTUM) * running_mean[ch] + BN_MOMENTUM * mean[ch] as f32;
            running_var[ch] = (1.0 - BN_MOMENTUM) * running_var[ch] + BN_MOMENTUM * unbiased as f32;
        }
        (mean.iter().map(|&v| v as f32).collect(), var.iter().map(|&v| v as f32).collect())
    } else {
        (running_mean.to_vec(), running_var.to_vec())
    };
    let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = Tensor::zeros(n, c, x.h, x.w);
    let mut y = Tensor::zeros(n, c, x.h, x.w);
    xhat.data
        .par_chunks_mut(hw)
        .zip(y.data.par_chunks_mut(hw))
        .enumerate()
        .for_each(|(p, (xh, yy))| {
            let ch = p % c;
            let src = &x.data[p * hw..(p + 1) * hw];
            for j in 0..hw {
                let v = (src[j] - mean[ch]) * inv_std[ch];
                xh[j] = v;
                yy[j] = gamma[ch] * v + beta[ch];
            }
        });
    let cache = if train { Some(BnCache { xhat, inv_std }) } else { None };
    (y, cache)
}

/// Training-mode batch-norm backward.
pub fn bn_backward(dy: &Tensor, cache: &BnCache, gamma: &[f32], dgamma: &mut [f32], dbeta: &mut [f32]) -> Tensor {
    let (n, c, hw) = (dy.n, dy.c, dy.plane());
    let m = (n * hw) as f64;
    let idx = |i: usize, ch: usize| (i * c + ch) * hw;
    let sdy = channel_sum(n, c, |i, ch| dy.data[idx(i, ch)..idx(i, ch) + hw].iter().map(|&v| v as f64).sum());
    let sdyx = channel_sum(n, c, |i, ch| {
        let a = &dy.data[idx(i, ch)..idx(i, ch) + hw];
        let b = &cache.xhat.data[idx(i, ch)..idx(i, ch) + hw];
        a.iter().zip(b).map(|(&p, &q)| p as f64 * q as f64).sum()
    });
    for ch in 0..c {
        dgamma[ch] += sdyx[ch] as f32;
        dbeta[ch] += sdy[ch] as f32;
    }
    let mut dx = Tensor::zeros(n, c, dy.h, dy.w);
    dx.data.par_chunks_mut(hw).enumerate().for_each(|(p, d)| {
        let ch = p % c;
        let k = gamma[ch] as f64 * cache.inv_std[ch] as f64 / m;
        let g = &dy.data[p * hw..(p + 1) * hw];
        let xh = &cache.xhat.data[p * hw..(p + 1) * hw];
        for j in 0..hw {
            d[j] = (k * (m * g[j] as f64 - sdy[ch] - xh[j] as f64 * sdyx[ch])) as f32;
        }
    });
    dx
}

pub fn relu_inplace(x: &mut Tensor) {
    x.data.par_iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `dy` where the ReLU output was not positive.
pub fn relu_backward_inplace(dy: &mut Tensor, y: &Tensor) {
    dy.data.par_iter_mut().zip(y.data.par_iter()).for_each(|(g, &v)| {
        if v <= 0.0 {
            *g = 0.0;
        }
    });
}

/// 2x2 max pooling; returns the output and the flat argmax per output cell.
pub fn maxpool2_forward(x: &Tensor) -> (Tensor, Vec<u32>) {
    assert!(x.h % 2 == 0 && x.w % 2 == 0, "maxpool needs even dims");
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut y = Tensor::zeros(x.n, x.c, h2, w2);
    let mut arg = vec![0u32; y.data.len()];
    y.data
        .par_chunks_mut(h2 * w2)
        .zip(arg.par_chunks_mut(h2 * w2))
        .enumerate()
        .for_each(|(p, (yo, ao))| {
            let src = &x.data[p * x.h * x.w..(p + 1) * x.h * x.w];
            for yy in 0..h2 {
                for xx in 0..w2 {
                    let mut best = (2 * yy) * x.w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let j = (2 * yy + dy) * x.w + 2 * xx + dx;
                        if src[j] > src[best] {
                            best = j;
                        }
                    }
                    yo[yy * w2 + xx] = src[best];
                    ao[yy * w2 + xx] = best as u32;
                }
            }
        });
    (y, arg)
}

pub fn maxpool2_backward(dy: &Tensor, arg: &[u32], h: usize, w: usize) -> Tensor {
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    let pl = dy.plane();
    dx.data.par_chunks_mut(h * w).enumerate().for_each(|(p, d)| {
        for j in 0..pl {
            d[arg[p * pl + j] as usize] += dy.data[p * pl + j];
        }
    });
    dx
}

/// Source index pair and weight for half-pixel-aligned 2x upsampling.
#[inline]
fn up_coord(o: usize, n: usize) -> (usize, usize, f32) {
    let s = ((o as f32 + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, s - i0 as f32)
}

/// Bilinear 2x upsampling with half-pixel centers.
pub fn upsample2_forward(x: &Tensor) -> Tensor {
    let (h, w) = (x.h, x.w);
    let (h2, w2) = (2 * h, 2 * w);
    let mut y = Tensor::zeros(x.n, x.c, h2, w2);
    let ys: Vec<_> = (0..h2).map(|o| up_coord(o, h)).collect();
    let xs: Vec<_> = (0..w2).map(|o| up_coord(o, w)).collect();
    y.data.par_chunks_mut(h2 * w2).enumerate().for_each(|(p, yo)| {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                yo[oy * w2 + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    });
    y
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let (h2, w2) = (dy.h, dy.w);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    let ys: Vec<_> = (0..h2).map(|o| up_coord(o, h)).collect();
    let xs: Vec<_> = (0..w2).map(|o| up_coord(o, w)).collect();
    dx.data.par_chunks_mut(h * w).enumerate().for_each(|(p, d)| {
        let g = &dy.data[p * h2 * w2..(p + 1) * h2 * w2];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let v = g[oy * w2 + ox];
                d[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                d[y0 * w + x1] += v * (1.0 - fy) * fx;
                d[y1 * w + x0] += v * fy * (1.0 - fx);
                d[y1 * w + x1] += v * fy * fx;
            }
        }
    });
    dx
}

/// Channel concatenation `[a, b]`.
pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    assert!(a.n == b.n && a.h == b.h && a.w == b.w, "concat shape");
    let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    let (la, lb) = (a.item_len(), b.item_len());
    for i in 0..a.n {
        let o = &mut out.data[i * (la + lb)..(i + 1) * (la + lb)];
        o[..la].copy_from_slice(a.item(i));
        o[la..].copy_from_slice(b.item(i));
    }
    out
}

/// Inverse of [`concat`] for gradients.
pub fn split(x: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let cb = x.c - ca;
    let mut a = Tensor::zeros(x.n, ca, x.h, x.w);
    let mut b = Tensor::zeros(x.n, cb, x.h, x.w);
    let (la, lb) = (a.item_len(), b.item_len());
    for i in 0..x.n {
        let src = x.item(i);
        a.data[i * la..(i + 1) * la].copy_from_slice(&src[..la]);
        b.data[i * lb..(i + 1) * lb].copy_from_slice(&src[la..]);
    }
    (a, b)
}

pub fn add_inplace(a: &mut Tensor, b: &Tensor) {
    assert!(a.same_shape(b));
    a.data.par_iter_mut().zip(b.data.par_iter()).for_each(|(x, y)| *x += y);
}

#[inline]
pub fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
