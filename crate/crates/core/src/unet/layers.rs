//! Forward and reverse-mode kernels for the layer types of the network.
//!
//! All kernels work on single-sample tensors (channels x depth x height x width).

use rayon::prelude::*;

use crate::tensor::{Real, Tensor};

/// Upper bound on im2col elements per chunk.
const COL_BUDGET: usize = 1 << 21;

/// Static description of a convolution with odd cubic kernel and "same" padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel.pow(3)
    }

    fn rows(&self) -> usize {
        self.in_channels * self.kernel.pow(3)
    }

    fn pad(&self) -> isize {
        (self.kernel as isize - 1) / 2
    }
}

/// Slices of z covering the volume, sized so each im2col fits the budget.
/// Chunking depends only on the shape, never on the thread count.
fn z_chunks(shape: &ConvShape, dims: [usize; 3]) -> Vec<(usize, usize)> {
    let plane = dims[0] * dims[1];
    let per_slice = shape.rows() * plane;
    let slices = (COL_BUDGET / per_slice.max(1)).clamp(1, dims[2]);
    (0..dims[2])
        .step_by(slices)
        .map(|z0| (z0, (z0 + slices).min(dims[2])))
        .collect()
}

/// Fills `col` (rows x chunk voxels) for output slices `z0..z1`.
fn im2col<T: Real>(input: &Tensor<T>, shape: &ConvShape, z0: usize, z1: usize, col: &mut [T]) {
    let [w, h, d] = input.dims;
    let k = shape.kernel;
    let pad = shape.pad();
    let n = (z1 - z0) * w * h;
    let mut row = 0;
    for ic in 0..shape.in_channels {
        let src = input.channel(ic);
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut col[row * n..(row + 1) * n];
                    let dx = kx as isize - pad;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    for z in z0..z1 {
                        let sz = z as isize + kz as isize - pad;
                        for y in 0..h {
                            let sy = y as isize + ky as isize - pad;
                            let out = &mut dst[((z - z0) * h + y) * w..((z - z0) * h + y + 1) * w];
                            if sz < 0 || sz >= d as isize || sy < 0 || sy >= h as isize || x_lo >= x_hi {
                                out.fill(T::zero());
                                continue;
                            }
                            let base = (sz as usize * h + sy as usize) * w;
                            out[..x_lo].fill(T::zero());
                            let s0 = (base as isize + x_lo as isize + dx) as usize;
                            out[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                            out[x_hi..].fill(T::zero());
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds `col` back into `grad` (the adjoint of `im2col`).
fn col2im<T: Real>(col: &[T], shape: &ConvShape, z0: usize, z1: usize, grad: &mut Tensor<T>) {
    let [w, h, d] = grad.dims;
    let k = shape.kernel;
    let pad = shape.pad();
    let n = (z1 - z0) * w * h;
    let mut row = 0;
    for ic in 0..shape.in_channels {
        let dst = grad.channel_mut(ic);
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let src = &col[row * n..(row + 1) * n];
                    let dx = kx as isize - pad;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    for z in z0..z1 {
                        let sz = z as isize + kz as isize - pad;
                        if sz < 0 || sz >= d as isize {
                            continue;
                        }
                        for y in 0..h {
                            let sy = y as isize + ky as isize - pad;
                            if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                                continue;
                            }
                            let base = (sz as usize * h + sy as usize) * w;
                            let s0 = (base as isize + x_lo as isize + dx) as usize;
                            let from = &src[((z - z0) * h + y) * w + x_lo..((z - z0) * h + y) * w + x_hi];
                            for (g, v) in dst[s0..s0 + (x_hi - x_lo)].iter_mut().zip(from) {
                                *g = *g + *v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// 3D convolution, stride 1, zero "same" padding.
pub fn conv3d_forward<T: Real>(input: &Tensor<T>, shape: &ConvShape, weight: &[T], bias: &[T]) -> Tensor<T> {
    assert_eq!(input.channels, shape.in_channels);
    assert_eq!(weight.len(), shape.weight_len());
    let dims = input.dims;
    let plane = dims[0] * dims[1];
    let total = input.voxels();
    let rows = shape.rows();
    let oc = shape.out_channels;
    let chunks = z_chunks(shape, dims);
    let parts: Vec<Vec<T>> = chunks
        .par_iter()
        .map(|&(z0, z1)| {
            let n = (z1 - z0) * plane;
            let mut out = vec![T::zero(); oc * n];
            for (c, b) in bias.iter().enumerate() {
                out[c * n..(c + 1) * n].fill(*b);
            }
            if shape.kernel == 1 {
                // the input chunk is already the column matrix, with row stride `total`
                let a = &input.data[z0 * plane..];
                T::gemm(
                    oc,
                    rows,
                    n,
                    T::one(),
                    weight,
                    rows as isize,
                    1,
                    a,
                    total as isize,
                    1,
                    T::one(),
                    &mut out,
                    n as isize,
                );
            } else {
                let mut col = vec![T::zero(); rows * n];
                im2col(input, shape, z0, z1, &mut col);
                T::gemm(
                    oc,
                    rows,
                    n,
                    T::one(),
                    weight,
                    rows as isize,
                    1,
                    &col,
                    n as isize,
                    1,
                    T::one(),
                    &mut out,
                    n as isize,
                );
            }
            out
        })
        .collect();
    let mut output = Tensor::zeros(oc, dims);
    for (&(z0, z1), part) in chunks.iter().zip(&parts) {
        let n = (z1 - z0) * plane;
        for c in 0..oc {
            output.data[c * total + z0 * plane..c * total + z0 * plane + n].copy_from_slice(&part[c * n..(c + 1) * n]);
        }
    }
    output
}

/// Gradients of a convolution. `grad_weight`/`grad_bias` are overwritten.
/// The input gradient is skipped when `need_input_grad` is false.
pub fn conv3d_backward<T: Real>(
    input: &Tensor<T>,
    shape: &ConvShape,
    weight: &[T],
    grad_out: &Tensor<T>,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    need_input_grad: bool,
) -> Option<Tensor<T>> {
    let dims = input.dims;
    let plane = dims[0] * dims[1];
    let total = input.voxels();
    let rows = shape.rows();
    let oc = shape.out_channels;

    for (c, gb) in grad_bias.iter_mut().enumerate() {
        *gb = sum_f64(grad_out.channel(c));
    }

    let chunks = z_chunks(shape, dims);
    let parts: Vec<(Vec<T>, Option<Vec<T>>)> = chunks
        .par_iter()
        .map(|&(z0, z1)| {
            let n = (z1 - z0) * plane;
            let g = &grad_out.data[z0 * plane..];
            let mut gw = vec![T::zero(); oc * rows];
            let col_owned;
            let (col, col_rs): (&[T], isize) = if shape.kernel == 1 {
                (&input.data[z0 * plane..], total as isize)
            } else {
                let mut c = vec![T::zero(); rows * n];
                im2col(input, shape, z0, z1, &mut c);
                col_owned = c;
                (&col_owned, n as isize)
            };
            // gw (oc x rows) = g (oc x n) * col^T (n x rows)
            T::gemm(
                oc,
                n,
                rows,
                T::one(),
                g,
                total as isize,
                1,
                col,
                1,
                col_rs,
                T::zero(),
                &mut gw,
                rows as isize,
            );
            let gcol = need_input_grad.then(|| {
                // gcol (rows x n) = W^T (rows x oc) * g (oc x n)
                let mut gc = vec![T::zero(); rows * n];
                T::gemm(
                    rows,
                    oc,
                    n,
                    T::one(),
                    weight,
                    1,
                    rows as isize,
                    g,
                    total as isize,
                    1,
                    T::zero(),
                    &mut gc,
                    n as isize,
                );
                gc
            });
            (gw, gcol)
        })
        .collect();

    grad_weight.fill(T::zero());
    let mut grad_input = need_input_grad.then(|| Tensor::zeros(shape.in_channels, dims));
    for (&(z0, z1), (gw, gcol)) in chunks.iter().zip(parts) {
        for (a, b) in grad_weight.iter_mut().zip(&gw) {
            *a = *a + *b;
        }
        if let (Some(gi), Some(gc)) = (grad_input.as_mut(), gcol) {
            if shape.kernel == 1 {
                let n = (z1 - z0) * plane;
                for ic in 0..shape.in_channels {
                    let dst = &mut gi.data[ic * total + z0 * plane..ic * total + z0 * plane + n];
                    for (a, b) in dst.iter_mut().zip(&gc[ic * n..(ic + 1) * n]) {
                        *a = *a + *b;
                    }
                }
            } else {
                col2im(&gc, shape, z0, z1, gi);
            }
        }
    }
    grad_input
}

fn sum_f64<T: Real>(xs: &[T]) -> T {
    T::from_f64(xs.iter().map(|v| v.as_f64()).sum())
}

pub fn relu_forward<T: Real>(x: &mut Tensor<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `grad` where the ReLU output was not positive.
pub fn relu_backward<T: Real>(output: &Tensor<T>, grad: &mut Tensor<T>) {
    for (g, o) in grad.data.iter_mut().zip(&output.data) {
        if !(*o > T::zero()) {
            *g = T::zero();
        }
    }
}

/// Saved state of a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Per-channel statistics of one training-mode pass.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch normalization over the spatial dimensions of one sample.
pub fn bn_train_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Tensor<T>, BnCache<T>, BatchStats) {
    let n = x.voxels();
    let mut y = Tensor::zeros(x.channels, x.dims);
    let mut normalized = Tensor::zeros(x.channels, x.dims);
    let mut inv_std = Vec::with_capacity(x.channels);
    let mut stats = BatchStats {
        mean: Vec::with_capacity(x.channels),
        var: Vec::with_capacity(x.channels),
    };
    for c in 0..x.channels {
        let xs = x.channel(c);
        let mean = xs.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
        let var = xs.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n as f64;
        let istd = 1.0 / (var + eps).sqrt();
        let (g, b) = (gamma[c].as_f64(), beta[c].as_f64());
        let xh = normalized.channel_mut(c);
        for (o, v) in xh.iter_mut().zip(xs) {
            *o = T::from_f64((v.as_f64() - mean) * istd);
        }
        let (gt, bt) = (T::from_f64(g), T::from_f64(b));
        for (o, h) in y.channel_mut(c).iter_mut().zip(normalized.channel(c)) {
            *o = gt * *h + bt;
        }
        inv_std.push(T::from_f64(istd));
        stats.mean.push(mean);
        stats.var.push(var);
    }
    (y, BnCache { normalized, inv_std }, stats)
}

/// Inference-mode batch normalization with running statistics.
pub fn bn_eval_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> Tensor<T> {
    let mut y = Tensor::zeros(x.channels, x.dims);
    for c in 0..x.channels {
        let scale = gamma[c].as_f64() / (running_var[c].as_f64() + eps).sqrt();
        let shift = beta[c].as_f64() - running_mean[c].as_f64() * scale;
        let (s, t) = (T::from_f64(scale), T::from_f64(shift));
        for (o, v) in y.channel_mut(c).iter_mut().zip(x.channel(c)) {
            *o = *v * s + t;
        }
    }
    y
}

/// Returns the input gradient; writes the gamma/beta gradients.
pub fn bn_backward<T: Real>(
    grad_y: &Tensor<T>,
    cache: &BnCache<T>,
    gamma: &[T],
    grad_gamma: &mut [T],
    grad_beta: &mut [T],
) -> Tensor<T> {
    let n = grad_y.voxels() as f64;
    let mut gx = Tensor::zeros(grad_y.channels, grad_y.dims);
    for c in 0..grad_y.channels {
        let gy = grad_y.channel(c);
        let xh = cache.normalized.channel(c);
        let sum_g: f64 = gy.iter().map(|v| v.as_f64()).sum();
        let sum_gx: f64 = gy.iter().zip(xh).map(|(g, h)| g.as_f64() * h.as_f64()).sum();
        grad_beta[c] = T::from_f64(sum_g);
        grad_gamma[c] = T::from_f64(sum_gx);
        let k = gamma[c].as_f64() * cache.inv_std[c].as_f64() / n;
        let (mean_g, mean_gx) = (sum_g / n, sum_gx / n);
        for ((o, g), h) in gx.channel_mut(c).iter_mut().zip(gy).zip(xh) {
            *o = T::from_f64(k * n * (g.as_f64() - mean_g - h.as_f64() * mean_gx));
        }
    }
    gx
}

/// 2x2x2 max pooling; also returns the flat input index of each maximum.
pub fn maxpool2_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [w, h, d] = x.dims;
    let od = [w / 2, h / 2, d / 2];
    let mut out = Tensor::zeros(x.channels, od);
    let mut arg = vec![0u32; out.data.len()];
    let mut o = 0;
    for c in 0..x.channels {
        for z in 0..od[2] {
            for y in 0..od[1] {
                for xx in 0..od[0] {
                    let mut best_i = x.index(c, 2 * xx, 2 * y, 2 * z);
                    let mut best = x.data[best_i];
                    // first maximum in (z, y, x) order wins ties
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = x.index(c, 2 * xx + dx, 2 * y + dy, 2 * z + dz);
                                if x.data[i] > best {
                                    best = x.data[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.data[o] = best;
                    arg[o] = best_i as u32;
                    o += 1;
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Real>(grad: &Tensor<T>, argmax: &[u32], input_dims: [usize; 3]) -> Tensor<T> {
    let mut gx = Tensor::zeros(grad.channels, input_dims);
    for (g, &i) in grad.data.iter().zip(argmax) {
        gx.data[i as usize] = gx.data[i as usize] + *g;
    }
    gx
}

/// Nearest-neighbour x2 upsampling.
pub fn upsample2_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [w, h, d] = x.dims;
    let mut out = Tensor::zeros(x.channels, [2 * w, 2 * h, 2 * d]);
    for c in 0..x.channels {
        for z in 0..2 * d {
            for y in 0..2 * h {
                let src = x.index(c, 0, y / 2, z / 2);
                let dst = out.index(c, 0, y, z);
                for xx in 0..2 * w {
                    out.data[dst + xx] = x.data[src + xx / 2];
                }
            }
        }
    }
    out
}

/// Adjoint of `upsample2_forward`: sums each 2x2x2 block.
pub fn upsample2_backward<T: Real>(grad: &Tensor<T>) -> Tensor<T> {
    let [w, h, d] = grad.dims;
    let mut gx = Tensor::zeros(grad.channels, [w / 2, h / 2, d / 2]);
    for c in 0..grad.channels {
        for z in 0..d {
            for y in 0..h {
                let src = grad.index(c, 0, y, z);
                let dst = gx.index(c, 0, y / 2, z / 2);
                for xx in 0..w {
                    gx.data[dst + xx / 2] = gx.data[dst + xx / 2] + grad.data[src + xx];
                }
            }
        }
    }
    gx
}

/// Channel concatenation `[a, b]`.
pub fn concat<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.dims, b.dims);
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::from_vec(a.channels + b.channels, a.dims, data)
}

/// Splits a gradient of `concat` back into its two parts.
pub fn split<T: Real>(g: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let n = g.voxels();
    (
        Tensor::from_vec(first, g.dims, g.data[..first * n].to_vec()),
        Tensor::from_vec(g.channels - first, g.dims, g.data[first * n..].to_vec()),
    )
}
