//! Layer kernels. Each layer exposes a forward pass that optionally records
//! what its backward pass needs, and a backward pass producing parameter and
//! input gradients on request.

use matrixmultiply::sgemm;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::NnError;

/// `C = A·B (+ C when accumulate)`, with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    c: &mut [f32],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: callers pass slices whose extents cover every strided index
    // addressed by an (m x k)·(k x n) product into a dense row-major m x n output.
    unsafe {
        sgemm(
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

/// 3x3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out, in * 9]`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Fully connected layer, `y = x·Wᵀ + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Conv2d(Conv2d),
    Relu,
    /// 2x2 max pooling, stride 2 (odd trailing rows/columns are dropped).
    MaxPool2,
    /// `[N, C, H, W]` to `[N, C]`.
    GlobalAvgPool,
    /// `[N, ...]` to `[N, prod(...)]`.
    Flatten,
    Linear(Linear),
}

/// Per-layer state recorded by the forward pass.
#[derive(Debug)]
pub(crate) enum Cache {
    Conv { col: Vec<f32>, in_dims: Vec<usize> },
    Relu { out: Tensor },
    MaxPool { argmax: Vec<u32>, in_dims: Vec<usize> },
    GlobalAvgPool { in_dims: Vec<usize> },
    Flatten { in_dims: Vec<usize> },
    Linear { input: Tensor },
}

fn uniform_init<R: Rng + ?Sized>(len: usize, bound: f32, rng: &mut R) -> Vec<f32> {
    (0..len).map(|_| rng.random_range(-bound..=bound)).collect()
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        let fan_in = in_channels * 9;
        let bound = (6.0 / fan_in as f32).sqrt();
        Self {
            in_channels,
            out_channels,
            weight: uniform_init(out_channels * fan_in, bound, rng),
            bias: vec![0.0; out_channels],
        }
    }

    fn check(&self, dims: &[usize]) -> Result<(usize, usize, usize), NnError> {
        match dims {
            [_, c, h, w] if *c == self.in_channels => Ok((*c, *h, *w)),
            _ => Err(NnError::Shape(format!(
                "conv expects [N, {}, H, W], got {dims:?}",
                self.in_channels
            ))),
        }
    }

    pub(crate) fn forward(&self, x: &Tensor, record: bool) -> Result<(Tensor, Option<Cache>), NnError> {
        let (c, h, w) = self.check(x.dims())?;
        let n = x.batch();
        let hw = h * w;
        let k = c * 9;
        let cols = n * hw;
        let col = im2col(x.data(), n, c, h, w);
        let mut mat = vec![0.0f32; self.out_channels * cols];
        gemm(
            self.out_channels,
            k,
            cols,
            &self.weight,
            k as isize,
            1,
            &col,
            cols as isize,
            1,
            &mut mat,
            false,
        );
        let mut out = Tensor::zeros(&[n, self.out_channels, h, w]);
        let od = out.data_mut();
        for (o, row) in mat.chunks_exact(cols).enumerate() {
            let b = self.bias[o];
            for s in 0..n {
                let dst = &mut od[(s * self.out_channels + o) * hw..][..hw];
                for (d, v) in dst.iter_mut().zip(&row[s * hw..(s + 1) * hw]) {
                    *d = v + b;
                }
            }
        }
        let cache = record.then(|| Cache::Conv {
            col,
            in_dims: x.dims().to_vec(),
        });
        Ok((out, cache))
    }

    pub(crate) fn backward(
        &self,
        col: &[f32],
        in_dims: &[usize],
        dout: &Tensor,
        grads: Option<(&mut [f32], &mut [f32])>,
        want_input: bool,
    ) -> Option<Tensor> {
        let (n, c, h, w) = (in_dims[0], in_dims[1], in_dims[2], in_dims[3]);
        let hw = h * w;
        let k = c * 9;
        let cols = n * hw;
        let oc = self.out_channels;
        // [N, O, HW] -> [O, N*HW]
        let mut dmat = vec![0.0f32; oc * cols];
        let dd = dout.data();
        for s in 0..n {
            for o in 0..oc {
                dmat[o * cols + s * hw..][..hw].copy_from_slice(&dd[(s * oc + o) * hw..][..hw]);
            }
        }
        if let Some((dw, db)) = grads {
            gemm(oc, cols, k, &dmat, cols as isize, 1, col, 1, cols as isize, dw, true);
            for (o, g) in db.iter_mut().enumerate() {
                *g += dmat[o * cols..(o + 1) * cols].iter().sum::<f32>();
            }
        }
        if !want_input {
            return None;
        }
        let mut dcol = vec![0.0f32; k * cols];
        gemm(k, oc, cols, &self.weight, 1, k as isize, &dmat, cols as isize, 1, &mut dcol, false);
        let mut dx = Tensor::zeros(in_dims);
        col2im(&dcol, dx.data_mut(), n, c, h, w);
        Some(dx)
    }
}

/// Lays out 3x3 patches as `[C*9, N*H*W]`.
fn im2col(x: &[f32], n: usize, c: usize, h: usize, w: usize) -> Vec<f32> {
    let hw = h * w;
    let cols = n * hw;
    let mut col = vec![0.0f32; c * 9 * cols];
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ch * 9) + ky * 3 + kx) * cols..][..cols];
                for s in 0..n {
                    let plane = &x[(s * c + ch) * hw..][..hw];
                    let dst = &mut row[s * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[sy as usize * w..][..w];
                        let dst_row = &mut dst[y * w..][..w];
                        // sx = x + kx - 1
                        let (x0, x1) = match kx {
                            0 => (1, w),
                            1 => (0, w),
                            _ => (0, w.saturating_sub(1)),
                        };
                        for xx in x0..x1 {
                            dst_row[xx] = src_row[xx + kx - 1];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(dcol: &[f32], dx: &mut [f32], n: usize, c: usize, h: usize, w: usize) {
    let hw = h * w;
    let cols = n * hw;
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &dcol[((ch * 9) + ky * 3 + kx) * cols..][..cols];
                for s in 0..n {
                    let plane = &mut dx[(s * c + ch) * hw..][..hw];
                    let src = &row[s * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[sy as usize * w..][..w];
                        let src_row = &src[y * w..][..w];
                        let (x0, x1) = match kx {
                            0 => (1, w),
                            1 => (0, w),
                            _ => (0, w.saturating_sub(1)),
                        };
                        for xx in x0..x1 {
                            dst_row[xx + kx - 1] += src_row[xx];
                        }
                    }
                }
            }
        }
    }
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_features as f32).sqrt();
        Self {
            in_features,
            out_features,
            weight: uniform_init(in_features * out_features, bound, rng),
            bias: vec![0.0; out_features],
        }
    }

    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: vec![0.0; in_features * out_features],
            bias: vec![0.0; out_features],
        }
    }

    pub(crate) fn forward(&self, x: &Tensor, record: bool) -> Result<(Tensor, Option<Cache>), NnError> {
        if x.dims().len() != 2 || x.dims()[1] != self.in_features {
            return Err(NnError::Shape(format!(
                "linear expects [N, {}], got {:?}",
                self.in_features,
                x.dims()
            )));
        }
        let n = x.batch();
        let mut out = Tensor::zeros(&[n, self.out_features]);
        for row in out.data_mut().chunks_exact_mut(self.out_features) {
            row.copy_from_slice(&self.bias);
        }
        gemm(
            n,
            self.in_features,
            self.out_features,
            x.data(),
            self.in_features as isize,
            1,
            &self.weight,
            1,
            self.in_features as isize,
            out.data_mut(),
            true,
        );
        let cache = record.then(|| Cache::Linear { input: x.clone() });
        Ok((out, cache))
    }

    pub(crate) fn backward(
        &self,
        input: &Tensor,
        dout: &Tensor,
        grads: Option<(&mut [f32], &mut [f32])>,
        want_input: bool,
    ) -> Option<Tensor> {
        let n = input.batch();
        let (fi, fo) = (self.in_features, self.out_features);
        if let Some((dw, db)) = grads {
            gemm(fo, n, fi, dout.data(), 1, fo as isize, input.data(), fi as isize, 1, dw, true);
            for row in dout.data().chunks_exact(fo) {
                for (g, v) in db.iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
        if !want_input {
            return None;
        }
        let mut dx = Tensor::zeros(&[n, fi]);
        gemm(n, fo, fi, dout.data(), fo as isize, 1, &self.weight, fi as isize, 1, dx.data_mut(), false);
        Some(dx)
    }
}

pub(crate) fn relu_forward(x: &Tensor, record: bool) -> (Tensor, Option<Cache>) {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    let cache = record.then(|| Cache::Relu { out: out.clone() });
    (out, cache)
}

pub(crate) fn relu_backward(out: &Tensor, dout: &Tensor) -> Tensor {
    let mut dx = dout.clone();
    for (g, o) in dx.data_mut().iter_mut().zip(out.data()) {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
    dx
}

pub(crate) fn maxpool_forward(x: &Tensor, record: bool) -> Result<(Tensor, Option<Cache>), NnError> {
    let [n, c, h, w] = match x.dims() {
        &[n, c, h, w] => [n, c, h, w],
        d => return Err(NnError::Shape(format!("max pool expects [N, C, H, W], got {d:?}"))),
    };
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0u32; n * c * oh * ow];
    let xd = x.data();
    let od = out.data_mut();
    for p in 0..n * c {
        let plane = &xd[p * h * w..][..h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = (2 * y) * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * y + dy) * w + 2 * xx + dx;
                    if plane[idx] > plane[best] {
                        best = idx;
                    }
                }
                let o = p * oh * ow + y * ow + xx;
                od[o] = plane[best];
                argmax[o] = best as u32;
            }
        }
    }
    let cache = record.then(|| Cache::MaxPool {
        argmax,
        in_dims: x.dims().to_vec(),
    });
    Ok((out, cache))
}

pub(crate) fn maxpool_backward(argmax: &[u32], in_dims: &[usize], dout: &Tensor) -> Tensor {
    let (h, w) = (in_dims[2], in_dims[3]);
    let per_plane = (h / 2) * (w / 2);
    let mut dx = Tensor::zeros(in_dims);
    let dxd = dx.data_mut();
    for (o, (&g, &a)) in dout.data().iter().zip(argmax).enumerate() {
        let p = o / per_plane;
        dxd[p * h * w + a as usize] += g;
    }
    dx
}

pub(crate) fn gap_forward(x: &Tensor, record: bool) -> Result<(Tensor, Option<Cache>), NnError> {
    let [n, c, h, w] = match x.dims() {
        &[n, c, h, w] => [n, c, h, w],
        d => return Err(NnError::Shape(format!("global pool expects [N, C, H, W], got {d:?}"))),
    };
    let hw = (h * w) as f32;
    let data = x
        .data()
        .chunks_exact(h * w)
        .map(|plane| plane.iter().sum::<f32>() / hw)
        .collect();
    let out = Tensor::from_vec(&[n, c], data)?;
    let cache = record.then(|| Cache::GlobalAvgPool {
        in_dims: x.dims().to_vec(),
    });
    Ok((out, cache))
}

pub(crate) fn gap_backward(in_dims: &[usize], dout: &Tensor) -> Tensor {
    let hw = in_dims[2] * in_dims[3];
    let scale = 1.0 / hw as f32;
    let mut dx = Tensor::zeros(in_dims);
    for (plane, g) in dx.data_mut().chunks_exact_mut(hw).zip(dout.data()) {
        plane.iter_mut().for_each(|v| *v = g * scale);
    }
    dx
}
