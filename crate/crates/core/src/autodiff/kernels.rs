//! Forward and backward kernels on raw NCHW / row-major buffers.
//!
//! Every kernel here is a plain function of its inputs so that the public
//! domain operations and the autodiff graph run the exact same code path.

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }
}

fn im2col<T: Scalar>(x: &[T], g: &Conv2dGeom, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let mut row = 0;
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &Conv2dGeom, dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let mut row = 0;
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            line[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Cross-correlation `y[n, o] = Σ_c w[o, c] ⋆ x[n, c]` without bias.
pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], g: &Conv2dGeom) -> Vec<T> {
    let hw = g.out_h() * g.out_w();
    let rows = g.col_rows();
    let in_plane = g.in_c * g.in_h * g.in_w;
    let mut y = vec![T::zero(); g.batch * g.out_c * hw];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * hw] };
    for n in 0..g.batch {
        let xn = &x[n * in_plane..(n + 1) * in_plane];
        let src: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut cols);
            &cols
        };
        let yn = &mut y[n * g.out_c * hw..(n + 1) * g.out_c * hw];
        T::gemm(
            g.out_c, rows, hw, T::one(), w, rows as isize, 1, src, hw as isize, 1, T::zero(), yn,
            hw as isize, 1,
        );
    }
    y
}

/// Returns `(dx, dw)`; `dx` is skipped when `need_dx` is false.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &Conv2dGeom,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>) {
    let hw = g.out_h() * g.out_w();
    let rows = g.col_rows();
    let in_plane = g.in_c * g.in_h * g.in_w;
    let mut dw = vec![T::zero(); g.out_c * rows];
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * hw] };
    let mut dcols = if need_dx && !g.is_pointwise() { vec![T::zero(); rows * hw] } else { Vec::new() };
    for n in 0..g.batch {
        let xn = &x[n * in_plane..(n + 1) * in_plane];
        let dyn_ = &dy[n * g.out_c * hw..(n + 1) * g.out_c * hw];
        let src: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut cols);
            &cols
        };
        // dw += dy · colsᵀ
        T::gemm(
            g.out_c, hw, rows, T::one(), dyn_, hw as isize, 1, src, 1, hw as isize, T::one(), &mut dw,
            rows as isize, 1,
        );
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_plane..(n + 1) * in_plane];
            if g.is_pointwise() {
                T::gemm(
                    rows, g.out_c, hw, T::one(), w, 1, rows as isize, dyn_, hw as isize, 1, T::zero(),
                    dxn, hw as isize, 1,
                );
            } else {
                T::gemm(
                    rows, g.out_c, hw, T::one(), w, 1, rows as isize, dyn_, hw as isize, 1, T::zero(),
                    &mut dcols, hw as isize, 1,
                );
                col2im(&dcols, g, dxn);
            }
        }
    }
    (dx, dw)
}

/// Max pooling over `kernel.0 × kernel.1` windows; padded positions never win.
/// Returns the output and, per output element, the flat index of the winning
/// input element within its `(n, c)` plane.
#[allow(clippy::too_many_arguments)]
pub fn maxpool2d_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: usize,
) -> (Vec<T>, Vec<usize>, usize, usize) {
    let oh = (h + 2 * pad - kernel.0) / stride.0 + 1;
    let ow = (w + 2 * pad - kernel.1) / stride.1 + 1;
    let mut y = Vec::with_capacity(planes * oh * ow);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ki in 0..kernel.0 {
                    let iy = (oy * stride.0 + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..kernel.1 {
                        let ix = (ox * stride.1 + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = iy as usize * w + ix as usize;
                        // strict '>' keeps the first maximum in scan order
                        if best_i == usize::MAX || plane[i] > best {
                            best = plane[i];
                            best_i = i;
                        }
                    }
                }
                y.push(best);
                idx.push(best_i);
            }
        }
    }
    (y, idx, oh, ow)
}

pub fn maxpool2d_backward<T: Scalar>(
    dy: &[T],
    idx: &[usize],
    planes: usize,
    in_plane: usize,
    out_plane: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); planes * in_plane];
    for p in 0..planes {
        for o in 0..out_plane {
            dx[p * in_plane + idx[p * out_plane + o]] += dy[p * out_plane + o];
        }
    }
    dx
}

/// Adaptive pooling bin `[start, end)` for output cell `i`:
/// `start = floor(i·in/out)`, `end = ceil((i+1)·in/out)`.
pub fn adaptive_bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = (i * input) / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

pub fn adaptive_avg_pool_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut y = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = adaptive_bin(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bin(ox, w, ow);
                let mut acc = T::zero();
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        acc += plane[iy * w + ix];
                    }
                }
                y.push(acc / T::from_f64(((y1 - y0) * (x1 - x0)) as f64));
            }
        }
    }
    y
}

pub fn adaptive_avg_pool_backward<T: Scalar>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let plane = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = adaptive_bin(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bin(ox, w, ow);
                let g = dy[p * oh * ow + oy * ow + ox] / T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        plane[iy * w + ix] += g;
                    }
                }
            }
        }
    }
    dx
}

/// Source taps `(i0, i1, frac)` for half-pixel-centred bilinear resampling.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn bilinear_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut y = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            let fy = T::from_f64(fy);
            for &(x0, x1, fx) in &tx {
                let fx = T::from_f64(fx);
                let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                y.push(top * (T::one() - fy) + bottom * fy);
            }
        }
    }
    y
}

pub fn bilinear_backward<T: Scalar>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let plane = &mut dx[p * h * w..(p + 1) * h * w];
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64(fx);
                let g = src[oy * ow + ox];
                let gt = g * (T::one() - fy);
                let gb = g * fy;
                plane[y0 * w + x0] += gt * (T::one() - fx);
                plane[y0 * w + x1] += gt * fx;
                plane[y1 * w + x0] += gb * (T::one() - fx);
                plane[y1 * w + x1] += gb * fx;
            }
        }
    }
    dx
}

/// Row-wise softmax over the last axis of length `d`.
pub fn softmax_rows<T: Scalar>(x: &[T], d: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for (row, out) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - m).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }
    y
}

pub fn softmax_rows_backward<T: Scalar>(y: &[T], dy: &[T], d: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, dyr), dxr) in y.chunks_exact(d).zip(dy.chunks_exact(d)).zip(dx.chunks_exact_mut(d)) {
        let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *o = yv * (g - dot);
        }
    }
    dx
}

/// Normalizes rows of length `d`; returns `(xhat, inv_std)`.
pub fn normalize_rows<T: Scalar>(x: &[T], d: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(rows);
    let dn = T::from_f64(d as f64);
    for (row, out) in x.chunks_exact(d).zip(xhat.chunks_exact_mut(d)) {
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let is = T::one() / (var + T::from_f64(eps)).sqrt();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        inv.push(is);
    }
    (xhat, inv)
}

/// Gradient through `xhat = (x - mean) · inv_std` given `dxhat`, for rows of length `d`.
pub fn normalize_rows_backward<T: Scalar>(xhat: &[T], inv: &[T], dxhat: &[T], d: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); xhat.len()];
    let dn = T::from_f64(d as f64);
    for (r, ((xr, gr), dr)) in
        xhat.chunks_exact(d).zip(dxhat.chunks_exact(d)).zip(dx.chunks_exact_mut(d)).enumerate()
    {
        let sum_g: T = gr.iter().copied().sum();
        let sum_gx: T = gr.iter().zip(xr).map(|(&g, &x)| g * x).sum();
        for ((o, &g), &x) in dr.iter_mut().zip(gr).zip(xr) {
            *o = inv[r] / dn * (dn * g - sum_g - x * sum_gx);
        }
    }
    dx
}

#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::from_f64(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
