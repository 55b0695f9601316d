//! Layer primitives with hand-written backward passes.
//!
//! Volumes are `(H, W, D, C)` row-major with channels innermost, so a volume
//! is also an `(H·W·D) × C` matrix and 1×1×1 convolutions are plain
//! [`Linear`] maps over its rows. Backward passes accumulate parameter
//! gradients into the tensors' gradient slots and return the input gradient.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{gemm_acc, gemm_tn_acc, Tensor};

/// Visitor over named parameter tensors.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, t| t.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Kaiming-style normal init scaled by fan-in.
pub(crate) fn kaiming(shape: &[usize], fan_in: usize, rng: &mut SeededRng) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Affine map over the last axis (a 1×1×1 convolution on volumes).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(c_in: usize, c_out: usize, rng: &mut SeededRng) -> Self {
        Self {
            weight: kaiming(&[c_in, c_out], c_in, rng),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[c_in, c_out]),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[1]
    }

    fn check(&self, x: &Tensor) -> Result<usize> {
        let last = *x.shape().last().unwrap_or(&0);
        if last != self.c_in() {
            return Err(Error::Dimension(format!(
                "linear expects {} input channels, got shape {:?}",
                self.c_in(),
                x.shape()
            )));
        }
        Ok(x.len() / last)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let rows = self.check(x)?;
        let (ci, co) = (self.c_in(), self.c_out());
        let mut out = Vec::with_capacity(rows * co);
        for _ in 0..rows {
            out.extend_from_slice(self.bias.data());
        }
        gemm_acc(x.data(), self.weight.data(), rows, ci, co, &mut out);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = co;
        Tensor::new(shape, out)
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
        let rows = self.check(x)?;
        let (ci, co) = (self.c_in(), self.c_out());
        if dy.len() != rows * co {
            return Err(Error::shape_mismatch(
                "linear grad",
                dy.shape(),
                &[rows, co],
            ));
        }
        let mut dw = vec![0.0; ci * co];
        gemm_tn_acc(x.data(), dy.data(), rows, ci, co, &mut dw);
        self.weight.accumulate_grad(&dw);
        let mut db = vec![0.0; co];
        for r in 0..rows {
            for (b, g) in db.iter_mut().zip(&dy.data()[r * co..(r + 1) * co]) {
                *b += g;
            }
        }
        self.bias.accumulate_grad(&db);
        let mut dx = vec![0.0; rows * ci];
        crate::tensor::gemm_nt_acc(dy.data(), self.weight.data(), rows, co, ci, &mut dx);
        Tensor::new(x.shape().to_vec(), dx)
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Cubic 3D convolution with stride and symmetric zero padding.
///
/// Weight layout is `(k³, C_in, C_out)` with the tap index running over
/// `(dH, dW, dD)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv3d {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let taps = kernel * kernel * kernel;
        Self {
            weight: kaiming(&[taps, c_in, c_out], taps * c_in, rng),
            bias: Tensor::zeros(&[c_out]),
            kernel,
            stride,
            padding,
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_extent(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.padding;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }

    fn geometry(&self, x: &Tensor) -> Result<([usize; 4], [usize; 3])> {
        let dims = x.dims4()?;
        if dims[3] != self.c_in() {
            return Err(Error::Dimension(format!(
                "conv3d expects {} channels, got {:?}",
                self.c_in(),
                x.shape()
            )));
        }
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = self.out_extent(dims[a]).ok_or_else(|| {
                Error::Dimension(format!("volume {:?} smaller than kernel", x.shape()))
            })?;
        }
        Ok((dims, out))
    }

    /// Input flat voxel index for output voxel `o` and tap `(a, b, c)`.
    fn source(&self, dims: &[usize; 4], o: [usize; 3], tap: [usize; 3]) -> Option<usize> {
        let mut idx = 0;
        for ax in 0..3 {
            let p = (o[ax] * self.stride + tap[ax]) as isize - self.padding as isize;
            if p < 0 || p >= dims[ax] as isize {
                return None;
            }
            idx = idx * dims[ax] + p as usize;
        }
        Some(idx)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (dims, out) = self.geometry(x)?;
        let (ci, co, k) = (self.c_in(), self.c_out(), self.kernel);
        let n_out = out[0] * out[1] * out[2];
        let w = self.weight.data();
        let xd = x.data();
        let mut y = vec![0.0; n_out * co];
        y.par_chunks_mut(co).enumerate().for_each(|(flat, yrow)| {
            let o = [
                flat / (out[1] * out[2]),
                (flat / out[2]) % out[1],
                flat % out[2],
            ];
            yrow.copy_from_slice(self.bias.data());
            for t in 0..k * k * k {
                let tap = [t / (k * k), (t / k) % k, t % k];
                if let Some(src) = self.source(&dims, o, tap) {
                    gemm_acc(
                        &xd[src * ci..(src + 1) * ci],
                        &w[t * ci * co..(t + 1) * ci * co],
                        1,
                        ci,
                        co,
                        yrow,
                    );
                }
            }
        });
        Tensor::new(vec![out[0], out[1], out[2], co], y)
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
        let (dims, out) = self.geometry(x)?;
        let (ci, co, k) = (self.c_in(), self.c_out(), self.kernel);
        if dy.shape() != [out[0], out[1], out[2], co] {
            return Err(Error::shape_mismatch(
                "conv3d grad",
                dy.shape(),
                &[out[0], out[1], out[2], co],
            ));
        }
        let taps = k * k * k;
        let w = self.weight.data();
        let (xd, gd) = (x.data(), dy.data());
        let mut dx = vec![0.0; xd.len()];
        let mut dw = vec![0.0; taps * ci * co];
        let mut db = vec![0.0; co];
        for flat in 0..out[0] * out[1] * out[2] {
            let o = [
                flat / (out[1] * out[2]),
                (flat / out[2]) % out[1],
                flat % out[2],
            ];
            let g = &gd[flat * co..(flat + 1) * co];
            for (b, v) in db.iter_mut().zip(g) {
                *b += v;
            }
            for t in 0..taps {
                let tap = [t / (k * k), (t / k) % k, t % k];
                if let Some(src) = self.source(&dims, o, tap) {
                    let wt = &w[t * ci * co..(t + 1) * ci * co];
                    let xs = &xd[src * ci..(src + 1) * ci];
                    let dxs = &mut dx[src * ci..(src + 1) * ci];
                    for c in 0..ci {
                        let wrow = &wt[c * co..(c + 1) * co];
                        dxs[c] += wrow.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                    }
                    gemm_tn_acc(xs, g, 1, ci, co, &mut dw[t * ci * co..(t + 1) * ci * co]);
                }
            }
        }
        self.weight.accumulate_grad(&dw);
        self.bias.accumulate_grad(&db);
        Tensor::new(x.shape().to_vec(), dx)
    }
}

impl Module for Conv3d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Transposed 3D convolution with kernel 2 and stride 2: doubles every extent.
///
/// Weight layout is `(8, C_in, C_out)`, tap index over the output parity
/// `(pH, pW, pD)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose3d {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvTranspose3d {
    pub fn new(c_in: usize, c_out: usize, rng: &mut SeededRng) -> Self {
        Self {
            weight: kaiming(&[8, c_in, c_out], c_in, rng),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[2]
    }

    fn dims(&self, x: &Tensor) -> Result<[usize; 4]> {
        let dims = x.dims4()?;
        if dims[3] != self.c_in() {
            return Err(Error::Dimension(format!(
                "transposed conv expects {} channels, got {:?}",
                self.c_in(),
                x.shape()
            )));
        }
        Ok(dims)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let [h, w, d, ci] = self.dims(x)?;
        let co = self.c_out();
        let (oh, ow, od) = (2 * h, 2 * w, 2 * d);
        let wd = self.weight.data();
        let xd = x.data();
        let mut y = vec![0.0; oh * ow * od * co];
        y.par_chunks_mut(co).enumerate().for_each(|(flat, yrow)| {
            let (a, b, c) = (flat / (ow * od), (flat / od) % ow, flat % od);
            let src = ((a / 2) * w + b / 2) * d + c / 2;
            let t = ((a % 2) * 2 + b % 2) * 2 + c % 2;
            yrow.copy_from_slice(self.bias.data());
            gemm_acc(
                &xd[src * ci..(src + 1) * ci],
                &wd[t * ci * co..(t + 1) * ci * co],
                1,
                ci,
                co,
                yrow,
            );
        });
        Tensor::new(vec![oh, ow, od, co], y)
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
        let [h, w, d, ci] = self.dims(x)?;
        let co = self.c_out();
        let (oh, ow, od) = (2 * h, 2 * w, 2 * d);
        if dy.shape() != [oh, ow, od, co] {
            return Err(Error::shape_mismatch(
                "transposed conv grad",
                dy.shape(),
                &[oh, ow, od, co],
            ));
        }
        let wd = self.weight.data();
        let (xd, gd) = (x.data(), dy.data());
        let mut dx = vec![0.0; xd.len()];
        let mut dw = vec![0.0; 8 * ci * co];
        let mut db = vec![0.0; co];
        for flat in 0..oh * ow * od {
            let (a, b, c) = (flat / (ow * od), (flat / od) % ow, flat % od);
            let src = ((a / 2) * w + b / 2) * d + c / 2;
            let t = ((a % 2) * 2 + b % 2) * 2 + c % 2;
            let g = &gd[flat * co..(flat + 1) * co];
            for (bb, v) in db.iter_mut().zip(g) {
                *bb += v;
            }
            let wt = &wd[t * ci * co..(t + 1) * ci * co];
            let dxs = &mut dx[src * ci..(src + 1) * ci];
            for ch in 0..ci {
                dxs[ch] += wt[ch * co..(ch + 1) * co]
                    .iter()
                    .zip(g)
                    .map(|(p, q)| p * q)
                    .sum::<f64>();
            }
            gemm_tn_acc(
                &xd[src * ci..(src + 1) * ci],
                g,
                1,
                ci,
                co,
                &mut dw[t * ci * co..(t + 1) * ci * co],
            );
        }
        self.weight.accumulate_grad(&dw);
        self.bias.accumulate_grad(&db);
        Tensor::new(x.shape().to_vec(), dx)
    }
}

impl Module for ConvTranspose3d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
