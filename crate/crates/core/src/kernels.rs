//! Raw forward/backward kernels over flat `f32` buffers. Shapes are
//! validated by the callers in `autograd`.

/// Row-major `c = op(a) * op(b) + beta * c` where `op(a)` is `m x k` and
/// `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    beta: f32,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the pointers cover m*k, k*n and m*n elements with the strides above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Spatial output extent `floor((input + 2 * padding - kernel) / stride) + 1`,
/// or `None` when the window never fits.
pub fn output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 {
        return None;
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.in_c * self.k_h * self.k_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.k_h == 1 && self.k_w == 1 && self.stride == (1, 1) && self.pad == (0, 0)
    }
}

fn im2col(g: &ConvGeom, input: &[f32], col: &mut [f32]) {
    let p = g.positions();
    for c in 0..g.in_c {
        let plane = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.k_h {
            for kj in 0..g.k_w {
                let row = (c * g.k_h + ki) * g.k_w + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride.0 + ki) as isize - g.pad.0 as isize;
                    let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride.1 + kj) as isize - g.pad.1 as isize;
                        *v = if iw < 0 || iw >= g.in_w as isize {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, col: &[f32], grad_input: &mut [f32]) {
    let p = g.positions();
    for c in 0..g.in_c {
        let plane = &mut grad_input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.k_h {
            for kj in 0..g.k_w {
                let row = (c * g.k_h + ki) * g.k_w + kj;
                let src = &col[row * p..(row + 1) * p];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride.0 + ki) as isize - g.pad.0 as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride.1 + kj) as isize - g.pad.1 as isize;
                        if iw >= 0 && iw < g.in_w as isize {
                            dst[iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f32], weight: &[f32]) -> Vec<f32> {
    let p = g.positions();
    let rows = g.col_rows();
    let in_sz = g.in_c * g.in_h * g.in_w;
    let out_sz = g.out_c * p;
    let mut out = vec![0.0; g.batch * out_sz];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; rows * p]
    };
    for n in 0..g.batch {
        let x = &input[n * in_sz..(n + 1) * in_sz];
        let cols: &[f32] = if g.is_pointwise() {
            x
        } else {
            im2col(g, x, &mut col);
            &col
        };
        gemm(
            g.out_c,
            rows,
            p,
            weight,
            false,
            cols,
            false,
            &mut out[n * out_sz..(n + 1) * out_sz],
            0.0,
        );
    }
    out
}

/// Returns `(grad_input, grad_weight)`.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f32],
    weight: &[f32],
    grad_out: &[f32],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let p = g.positions();
    let rows = g.col_rows();
    let in_sz = g.in_c * g.in_h * g.in_w;
    let out_sz = g.out_c * p;
    let mut grad_in = need_input.then(|| vec![0.0; input.len()]);
    let mut grad_w = need_weight.then(|| vec![0.0; weight.len()]);
    let mut col = vec![0.0; if g.is_pointwise() { 0 } else { rows * p }];
    let mut dcol = vec![0.0; if need_input { rows * p } else { 0 }];
    for n in 0..g.batch {
        let dy = &grad_out[n * out_sz..(n + 1) * out_sz];
        if let Some(gw) = grad_w.as_mut() {
            let x = &input[n * in_sz..(n + 1) * in_sz];
            let cols: &[f32] = if g.is_pointwise() {
                x
            } else {
                im2col(g, x, &mut col);
                &col
            };
            gemm(g.out_c, p, rows, dy, false, cols, true, gw, 1.0);
        }
        if let Some(gi) = grad_in.as_mut() {
            let dst = &mut gi[n * in_sz..(n + 1) * in_sz];
            if g.is_pointwise() {
                gemm(rows, g.out_c, p, weight, true, dy, false, dst, 0.0);
            } else {
                gemm(rows, g.out_c, p, weight, true, dy, false, &mut dcol, 0.0);
                col2im_add(g, &dcol, dst);
            }
        }
    }
    (grad_in, grad_w)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeom {
    fn window(&self, oh: usize, ow: usize) -> (usize, usize, usize, usize) {
        let h0 = (oh * self.stride) as isize - self.pad as isize;
        let w0 = (ow * self.stride) as isize - self.pad as isize;
        let h1 = (h0 + self.k as isize).min(self.in_h as isize);
        let w1 = (w0 + self.k as isize).min(self.in_w as isize);
        (
            h0.max(0) as usize,
            h1.max(0) as usize,
            w0.max(0) as usize,
            w1.max(0) as usize,
        )
    }
}

/// Max pooling; also returns the flat in-plane argmax of every output cell.
pub(crate) fn max_pool_forward(g: &PoolGeom, input: &[f32]) -> (Vec<f32>, Vec<u32>) {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.planes * out_plane];
    let mut arg = vec![0u32; g.planes * out_plane];
    for pl in 0..g.planes {
        let x = &input[pl * in_plane..(pl + 1) * in_plane];
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let (h0, h1, w0, w1) = g.window(oh, ow);
                let mut best = f32::NEG_INFINITY;
                let mut best_i = h0 * g.in_w + w0;
                for ih in h0..h1 {
                    for iw in w0..w1 {
                        let v = x[ih * g.in_w + iw];
                        if v > best {
                            best = v;
                            best_i = ih * g.in_w + iw;
                        }
                    }
                }
                let o = pl * out_plane + oh * g.out_w + ow;
                out[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    (out, arg)
}

pub(crate) fn max_pool_backward(g: &PoolGeom, arg: &[u32], grad_out: &[f32]) -> Vec<f32> {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let mut gi = vec![0.0; g.planes * in_plane];
    for pl in 0..g.planes {
        for o in 0..out_plane {
            let idx = pl * out_plane + o;
            gi[pl * in_plane + arg[idx] as usize] += grad_out[idx];
        }
    }
    gi
}

/// Average pooling that divides by the number of in-bounds cells.
pub(crate) fn avg_pool_forward(g: &PoolGeom, input: &[f32]) -> Vec<f32> {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.planes * out_plane];
    for pl in 0..g.planes {
        let x = &input[pl * in_plane..(pl + 1) * in_plane];
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let (h0, h1, w0, w1) = g.window(oh, ow);
                let count = ((h1 - h0) * (w1 - w0)).max(1);
                let mut acc = 0.0f32;
                for ih in h0..h1 {
                    for iw in w0..w1 {
                        acc += x[ih * g.in_w + iw];
                    }
                }
                out[pl * out_plane + oh * g.out_w + ow] = acc / count as f32;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(g: &PoolGeom, grad_out: &[f32]) -> Vec<f32> {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let mut gi = vec![0.0; g.planes * in_plane];
    for pl in 0..g.planes {
        let dst = &mut gi[pl * in_plane..(pl + 1) * in_plane];
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let (h0, h1, w0, w1) = g.window(oh, ow);
                let count = ((h1 - h0) * (w1 - w0)).max(1);
                let d = grad_out[pl * out_plane + oh * g.out_w + ow] / count as f32;
                for ih in h0..h1 {
                    for iw in w0..w1 {
                        dst[ih * g.in_w + iw] += d;
                    }
                }
            }
        }
    }
    gi
}

/// Per-channel batch statistics over `(N, C, spatial)` laid out row-major.
/// Returns biased `(mean, var)`.
pub(crate) fn channel_stats(x: &[f32], n: usize, c: usize, spatial: usize) -> (Vec<f32>, Vec<f32>) {
    let count = (n * spatial) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for b in 0..n {
            let base = (b * c + ch) * spatial;
            s += x[base..base + spatial]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
        let m = s / count;
        let mut ss = 0.0f64;
        for b in 0..n {
            let base = (b * c + ch) * spatial;
            ss += x[base..base + spatial]
                .iter()
                .map(|&v| {
                    let d = v as f64 - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = m as f32;
        var[ch] = (ss / count) as f32;
    }
    (mean, var)
}

/// Normalizes with the given statistics; returns `(y, x_hat, inv_std)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_apply(
    x: &[f32],
    n: usize,
    c: usize,
    spatial: usize,
    mean: &[f32],
    var: &[f32],
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * spatial;
            for i in base..base + spatial {
                let h = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                y[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    (y, xhat, inv_std)
}

/// Returns `(grad_input, grad_gamma, grad_beta)`. With `batch_stats` the
/// statistics are treated as functions of the input (training mode).
#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_backward(
    grad_out: &[f32],
    xhat: &[f32],
    inv_std: &[f32],
    gamma: &[f32],
    n: usize,
    c: usize,
    spatial: usize,
    batch_stats: bool,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let m = (n * spatial) as f64;
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    let mut dx = vec![0.0f32; grad_out.len()];
    for ch in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for b in 0..n {
            let base = (b * c + ch) * spatial;
            for i in base..base + spatial {
                sum_dy += grad_out[i] as f64;
                sum_dy_xhat += (grad_out[i] * xhat[i]) as f64;
            }
        }
        dgamma[ch] = sum_dy_xhat as f32;
        dbeta[ch] = sum_dy as f32;
        let scale = gamma[ch] * inv_std[ch];
        let mean_dy = (sum_dy / m) as f32;
        let mean_dy_xhat = (sum_dy_xhat / m) as f32;
        for b in 0..n {
            let base = (b * c + ch) * spatial;
            for i in base..base + spatial {
                dx[i] = if batch_stats {
                    scale * (grad_out[i] - mean_dy - xhat[i] * mean_dy_xhat)
                } else {
                    scale * grad_out[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Row-wise log-softmax over the last axis with max subtraction.
pub(crate) fn log_softmax_rows(z: &[f32], cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; z.len()];
    for (row, dst) in z.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let sum: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
        let lse = max as f64 + sum.ln();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v as f64 - lse) as f32;
        }
    }
    out
}

pub(crate) fn softmax_rows(z: &[f32], cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; z.len()];
    for (row, dst) in z.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = row.iter().map(|&v| ((v - max) as f64).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (d, e) in dst.iter_mut().zip(exps) {
            *d = (e / sum) as f32;
        }
    }
    out
}
