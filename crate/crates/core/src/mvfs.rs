//! Multi-view feature synthesis.
//!
//! Each view convolves the original-view volume with a rotated kernel. A
//! rotated tap generally lands between grid vertices, so the feature there
//! is trilinearly interpolated from the 8 corners of the enclosing unit
//! cube, with out-of-volume corners reading as zero. Output spatial extent
//! equals input extent (stride 1).

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{build_lattice, rotate_kernel, RotatedKernel, RotationSpec, Vec3};
use crate::nn::{join, kaiming, Module};
use crate::rng::SeededRng;
use crate::tensor::{gemm_acc, gemm_tn_acc, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeRole {
    Original,
    Synthetic,
    Augmented,
    Semantic,
    Geometric,
}

/// An `(H, W, D, C)` feature map tagged with the role it plays.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    tensor: Tensor,
    role: VolumeRole,
}

impl FeatureVolume {
    pub fn new(tensor: Tensor, role: VolumeRole) -> Result<Self> {
        tensor.dims4()?;
        if !tensor.all_finite() {
            return Err(Error::NonFinite("FeatureVolume::new"));
        }
        Ok(Self { tensor, role })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn role(&self) -> VolumeRole {
        self.role
    }

    pub fn dims(&self) -> [usize; 4] {
        self.tensor.dims4().expect("checked at construction")
    }

    pub fn spatial(&self) -> [usize; 3] {
        let [h, w, d, _] = self.dims();
        [h, w, d]
    }

    pub fn channels(&self) -> usize {
        self.dims()[3]
    }
}

/// `ṽ_{i,k} = v_i + P'_{r,k}` for every tap of the kernel.
pub fn neighbor_positions(vertex: [usize; 3], kernel: &RotatedKernel) -> Vec<Vec3> {
    kernel
        .points()
        .iter()
        .map(|p| {
            [
                vertex[0] as f64 + p[0],
                vertex[1] as f64 + p[1],
                vertex[2] as f64 + p[2],
            ]
        })
        .collect()
}

/// Flat voxel indices and weights of the in-volume corners around `pos`.
/// Corners with zero weight are skipped, so integer positions read exactly
/// one voxel.
pub fn corner_weights(spatial: [usize; 3], pos: &Vec3) -> Result<Vec<(usize, f64)>> {
    if pos.iter().any(|c| !c.is_finite()) {
        return Err(Error::Parameter(format!(
            "non-finite interpolation position {pos:?}"
        )));
    }
    let base = pos.map(f64::floor);
    let frac = [pos[0] - base[0], pos[1] - base[1], pos[2] - base[2]];
    let mut out = Vec::with_capacity(8);
    for corner in 0..8 {
        let bits = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
        let mut weight = 1.0;
        let mut flat = 0usize;
        let mut inside = true;
        for ax in 0..3 {
            let t = if bits[ax] == 1 {
                frac[ax]
            } else {
                1.0 - frac[ax]
            };
            weight *= t;
            let coord = base[ax] + bits[ax] as f64;
            if coord < 0.0 || coord >= spatial[ax] as f64 {
                inside = false;
            } else {
                flat = flat * spatial[ax] + coord as usize;
            }
        }
        if inside && weight != 0.0 {
            out.push((flat, weight));
        }
    }
    Ok(out)
}

/// Trilinear read of the feature vector at a real-valued position.
pub fn interpolate(volume: &Tensor, pos: &Vec3) -> Result<Vec<f64>> {
    let [h, w, d, c] = volume.dims4()?;
    let mut out = vec![0.0; c];
    for (flat, wt) in corner_weights([h, w, d], pos)? {
        for (o, v) in out.iter_mut().zip(&volume.data()[flat * c..(flat + 1) * c]) {
            *o += wt * v;
        }
    }
    Ok(out)
}

/// Gradient of `<interpolate(volume, pos), grad>` with respect to the volume.
pub fn interpolate_backward(volume_shape: &[usize], pos: &Vec3, grad: &[f64]) -> Result<Tensor> {
    let [h, w, d, c] = match volume_shape {
        &[h, w, d, c] => [h, w, d, c],
        _ => {
            return Err(Error::Dimension(format!(
                "expected rank-4 shape, got {volume_shape:?}"
            )))
        }
    };
    if grad.len() != c {
        return Err(Error::Dimension(format!(
            "gradient has {} channels, volume has {c}",
            grad.len()
        )));
    }
    let mut out = Tensor::zeros(volume_shape);
    for (flat, wt) in corner_weights([h, w, d], pos)? {
        for (o, g) in out.data_mut()[flat * c..(flat + 1) * c]
            .iter_mut()
            .zip(grad)
        {
            *o += wt * g;
        }
    }
    Ok(out)
}

/// Precomputed corner indices and weights for every (voxel, tap) pair of one
/// view over one spatial shape.
#[derive(Debug)]
pub struct SamplingPlan {
    taps: usize,
    starts: Vec<u32>,
    entries: Vec<(u32, f64)>,
}

impl SamplingPlan {
    pub fn build(spatial: [usize; 3], kernel: &RotatedKernel) -> Result<Self> {
        let taps = kernel.len();
        let n = spatial[0] * spatial[1] * spatial[2];
        let mut starts = Vec::with_capacity(n * taps + 1);
        let mut entries = Vec::with_capacity(n * taps * 8);
        for flat in 0..n {
            let v = [
                flat / (spatial[1] * spatial[2]),
                (flat / spatial[2]) % spatial[1],
                flat % spatial[2],
            ];
            for pos in neighbor_positions(v, kernel) {
                starts.push(entries.len() as u32);
                for (idx, wt) in corner_weights(spatial, &pos)? {
                    entries.push((idx as u32, wt));
                }
            }
        }
        starts.push(entries.len() as u32);
        Ok(Self {
            taps,
            starts,
            entries,
        })
    }

    fn corners(&self, voxel: usize, tap: usize) -> &[(u32, f64)] {
        let at = voxel * self.taps + tap;
        &self.entries[self.starts[at] as usize..self.starts[at + 1] as usize]
    }
}

/// Rotated kernels and their per-view weights `(K³, C_in, C_out)`.
#[derive(Debug)]
pub struct MvfsLayer {
    views: Vec<RotatedKernel>,
    pub weights: Vec<Tensor>,
    plans: Mutex<HashMap<(usize, [usize; 3]), Arc<SamplingPlan>>>,
}

impl Clone for MvfsLayer {
    fn clone(&self) -> Self {
        Self {
            views: self.views.clone(),
            weights: self.weights.clone(),
            plans: Mutex::new(self.plans.lock().expect("plan cache poisoned").clone()),
        }
    }
}

impl MvfsLayer {
    pub fn new(
        kernel_size: usize,
        rotations: &[[f64; 3]],
        c_in: usize,
        c_out: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let lattice = build_lattice(kernel_size)?;
        let taps = lattice.len();
        let views: Vec<RotatedKernel> = rotations
            .iter()
            .map(|a| rotate_kernel(&lattice, &RotationSpec::from_angles(*a)))
            .collect();
        let weights = views
            .iter()
            .map(|_| kaiming(&[taps, c_in, c_out], taps * c_in, rng))
            .collect();
        Self::from_parts(views, weights)
    }

    pub fn from_parts(views: Vec<RotatedKernel>, weights: Vec<Tensor>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::Parameter("MVFS needs at least one view".into()));
        }
        if views.len() != weights.len() {
            return Err(Error::Dimension(format!(
                "{} views but {} weight tensors",
                views.len(),
                weights.len()
            )));
        }
        let taps = views[0].len();
        for (v, w) in views.iter().zip(&weights) {
            if v.len() != taps {
                return Err(Error::Dimension("views disagree on kernel size".into()));
            }
            if w.rank() != 3 || w.shape()[0] != taps || w.shape()[1..] != weights[0].shape()[1..] {
                return Err(Error::Dimension(format!(
                    "view weight shape {:?} does not match {taps} taps",
                    w.shape()
                )));
            }
        }
        Ok(Self {
            views,
            weights,
            plans: Mutex::new(HashMap::new()),
        })
    }

    pub fn views(&self) -> &[RotatedKernel] {
        &self.views
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn c_in(&self) -> usize {
        self.weights[0].shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weights[0].shape()[2]
    }

    /// Cached sampling plan for view `r` over `spatial`.
    pub fn plan(&self, r: usize, spatial: [usize; 3]) -> Result<Arc<SamplingPlan>> {
        let mut cache = self.plans.lock().expect("plan cache poisoned");
        if let Some(p) = cache.get(&(r, spatial)) {
            return Ok(Arc::clone(p));
        }
        let plan = Arc::new(SamplingPlan::build(spatial, &self.views[r])?);
        cache.insert((r, spatial), Arc::clone(&plan));
        Ok(plan)
    }

    fn check(&self, volume: &Tensor, r: usize) -> Result<[usize; 4]> {
        let dims = volume.dims4()?;
        if r >= self.views.len() {
            return Err(Error::Parameter(format!(
                "view {r} out of range for {} views",
                self.views.len()
            )));
        }
        if dims[3] != self.c_in() {
            return Err(Error::Dimension(format!(
                "volume has {} channels, layer expects {}",
                dims[3],
                self.c_in()
            )));
        }
        Ok(dims)
    }

    /// Raw forward on tensors; see [`synth_view_conv`].
    pub fn forward_view(&self, volume: &Tensor, r: usize) -> Result<Tensor> {
        let [h, w, d, ci] = self.check(volume, r)?;
        let co = self.c_out();
        let plan = self.plan(r, [h, w, d])?;
        let taps = self.views[r].len();
        let wt = self.weights[r].data();
        let x = volume.data();
        let mut out = vec![0.0; h * w * d * co];
        out.par_chunks_mut(co).enumerate().for_each_init(
            || vec![0.0; ci],
            |feat, (voxel, orow)| {
                for k in 0..taps {
                    feat.iter_mut().for_each(|f| *f = 0.0);
                    for &(idx, cw) in plan.corners(voxel, k) {
                        let src = &x[idx as usize * ci..(idx as usize + 1) * ci];
                        for (f, v) in feat.iter_mut().zip(src) {
                            *f += cw * v;
                        }
                    }
                    gemm_acc(feat, &wt[k * ci * co..(k + 1) * ci * co], 1, ci, co, orow);
                }
            },
        );
        Tensor::new(vec![h, w, d, co], out)?.ensure_finite("synth_view_conv")
    }

    /// Returns the volume gradient and accumulates the view-weight gradient.
    pub fn backward_view(
        &mut self,
        volume: &Tensor,
        r: usize,
        grad_out: &Tensor,
    ) -> Result<Tensor> {
        let [h, w, d, ci] = self.check(volume, r)?;
        let co = self.c_out();
        if grad_out.shape() != [h, w, d, co] {
            return Err(Error::shape_mismatch(
                "synth_view_conv grad",
                grad_out.shape(),
                &[h, w, d, co],
            ));
        }
        let plan = self.plan(r, [h, w, d])?;
        let taps = self.views[r].len();
        let x = volume.data();
        let g = grad_out.data();
        let wt = self.weights[r].data();
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; taps * ci * co];
        let mut feat = vec![0.0; ci];
        let mut dfeat = vec![0.0; ci];
        for voxel in 0..h * w * d {
            let gi = &g[voxel * co..(voxel + 1) * co];
            if gi.iter().all(|v| *v == 0.0) {
                continue;
            }
            for k in 0..taps {
                let corners = plan.corners(voxel, k);
                if corners.is_empty() {
                    continue;
                }
                feat.iter_mut().for_each(|f| *f = 0.0);
                for &(idx, cw) in corners {
                    let src = &x[idx as usize * ci..(idx as usize + 1) * ci];
                    for (f, v) in feat.iter_mut().zip(src) {
                        *f += cw * v;
                    }
                }
                gemm_tn_acc(
                    &feat,
                    gi,
                    1,
                    ci,
                    co,
                    &mut dw[k * ci * co..(k + 1) * ci * co],
                );
                let wk = &wt[k * ci * co..(k + 1) * ci * co];
                for (c, df) in dfeat.iter_mut().enumerate() {
                    *df = wk[c * co..(c + 1) * co]
                        .iter()
                        .zip(gi)
                        .map(|(a, b)| a * b)
                        .sum();
                }
                for &(idx, cw) in corners {
                    let dst = &mut dx[idx as usize * ci..(idx as usize + 1) * ci];
                    for (o, df) in dst.iter_mut().zip(&dfeat) {
                        *o += cw * df;
                    }
                }
            }
        }
        self.weights[r].accumulate_grad(&dw);
        Tensor::new(volume.shape().to_vec(), dx)
    }
}

impl Module for MvfsLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (r, w) in self.weights.iter().enumerate() {
            f(&join(prefix, &format!("view{r}.weight")), w);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (r, w) in self.weights.iter_mut().enumerate() {
            f(&join(prefix, &format!("view{r}.weight")), w);
        }
    }
}

/// Synthetic-view map `V'_r`: the rotated kernel of view `r` applied at
/// every vertex of `volume`.
pub fn synth_view_conv(
    volume: &FeatureVolume,
    layer: &MvfsLayer,
    r: usize,
) -> Result<FeatureVolume> {
    let out = layer.forward_view(volume.tensor(), r)?;
    FeatureVolume::new(out, VolumeRole::Synthetic)
}

pub fn mvfs_forward(volume: &FeatureVolume, layer: &MvfsLayer) -> Result<Vec<FeatureVolume>> {
    (0..layer.num_views())
        .map(|r| synth_view_conv(volume, layer, r))
        .collect()
}

/// `interpolate` at a fixed position, as a checkable op over the volume.
pub struct InterpolateOp {
    pub position: Vec3,
}

impl crate::gradcheck::Differentiable for InterpolateOp {
    fn name(&self) -> String {
        format!("interpolate@{:?}", self.position)
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let f = interpolate(&inputs[0], &self.position)?;
        Tensor::new(vec![f.len()], f)
    }
    fn backward(&self, inputs: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![interpolate_backward(
            inputs[0].shape(),
            &self.position,
            g.data(),
        )?])
    }
}

/// One view of an MVFS layer as a checkable op over `[volume, view weight]`.
pub struct SynthViewOp {
    pub layer: MvfsLayer,
    pub view: usize,
}

impl crate::gradcheck::Differentiable for SynthViewOp {
    fn name(&self) -> String {
        let [ax, ay, az] = self.layer.views()[self.view].spec.angles;
        format!("synth_view_conv({ax},{ay},{az})")
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let mut layer = self.layer.clone();
        layer.weights[self.view] = inputs[1].clone();
        layer.forward_view(&inputs[0], self.view)
    }
    fn backward(&self, inputs: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        let mut layer = self.layer.clone();
        layer.weights[self.view] = inputs[1].clone();
        let dx = layer.backward_view(&inputs[0], self.view, g)?;
        Ok(vec![dx, layer.weights[self.view].grad_tensor()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckOptions};
    use crate::kernel::build_rotation;

    fn vol(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut SeededRng::new(seed))
    }

    #[test]
    fn neighbor_positions_examples() {
        let l = build_lattice(3).unwrap();
        let k = rotate_kernel(&l, &build_rotation(0.0, 0.0, 0.0));
        let pos = neighbor_positions([0, 0, 0], &k);
        assert_eq!(pos.len(), 27);
        assert!(pos.iter().flatten().all(|c| c.fract() == 0.0));
        assert_eq!(pos[13], [0.0, 0.0, 0.0]);
        let k45 = rotate_kernel(&l, &build_rotation(45.0, 0.0, 0.0));
        let pos = neighbor_positions([2, 2, 2], &k45);
        assert!(pos.iter().flatten().any(|c| c.fract().abs() > 1e-3));
        assert_eq!(pos[13], [2.0, 2.0, 2.0]);
    }

    #[test]
    fn interpolation_at_vertex_and_midpoint() {
        let v = vol(&[3, 3, 3, 2], 1);
        let at = interpolate(&v, &[1.0, 1.0, 1.0]).unwrap();
        let idx = (9 + 3 + 1) * 2;
        assert_eq!(at, v.data()[idx..idx + 2].to_vec());
        let mid = interpolate(&v, &[0.5, 0.0, 0.0]).unwrap();
        let f1 = &v.data()[9 * 2..9 * 2 + 2];
        for c in 0..2 {
            assert!((mid[c] - 0.5 * (v.data()[c] + f1[c])).abs() < 1e-15);
        }
    }

    #[test]
    fn interpolation_outside_is_zero_and_nan_rejected() {
        let v = vol(&[2, 2, 2, 1], 2);
        assert_eq!(interpolate(&v, &[-1.5, 0.0, 0.0]).unwrap(), vec![0.0]);
        assert_eq!(interpolate(&v, &[5.0, 5.0, 5.0]).unwrap(), vec![0.0]);
        assert!(matches!(
            interpolate(&v, &[f64::NAN, 0.0, 0.0]),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn corner_weights_partition_unity_inside() {
        let mut rng = SeededRng::new(5);
        for _ in 0..200 {
            let p = [
                rng.uniform(0.0, 3.0),
                rng.uniform(0.0, 3.0),
                rng.uniform(0.0, 3.0),
            ];
            let s: f64 = corner_weights([4, 4, 4], &p)
                .unwrap()
                .iter()
                .map(|c| c.1)
                .sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_weights_reproduce_input_for_any_rotation() {
        let mut rng = SeededRng::new(6);
        for angles in [[0.0, 0.0, 0.0], [45.0, 0.0, 0.0], [33.0, 71.0, 12.0]] {
            let mut layer = MvfsLayer::new(3, &[angles], 2, 2, &mut rng).unwrap();
            let mut w = Tensor::zeros(&[27, 2, 2]);
            w.data_mut()[13 * 4] = 1.0;
            w.data_mut()[13 * 4 + 3] = 1.0;
            layer.weights[0] = w;
            let x = vol(&[3, 4, 2, 2], 7);
            assert_eq!(layer.forward_view(&x, 0).unwrap(), x);
        }
    }

    #[test]
    fn mvfs_forward_views_and_zero_input() {
        let mut rng = SeededRng::new(8);
        let rots = [
            [0.0, 0.0, 0.0],
            [45.0, 0.0, 0.0],
            [90.0, 0.0, 0.0],
            [135.0, 0.0, 0.0],
        ];
        let layer = MvfsLayer::new(3, &rots, 3, 3, &mut rng).unwrap();
        let zero = FeatureVolume::new(Tensor::zeros(&[3, 2, 3, 3]), VolumeRole::Original).unwrap();
        let outs = mvfs_forward(&zero, &layer).unwrap();
        assert_eq!(outs.len(), 4);
        for o in outs {
            assert_eq!(o.spatial(), [3, 2, 3]);
            assert_eq!(o.role(), VolumeRole::Synthetic);
            assert!(o.tensor().data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn channel_mismatch() {
        let mut rng = SeededRng::new(9);
        let layer = MvfsLayer::new(3, &[[0.0; 3]], 2, 2, &mut rng).unwrap();
        assert!(matches!(
            layer.forward_view(&Tensor::zeros(&[2, 2, 2, 3]), 0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn gradients() {
        let mut rng = SeededRng::new(10);
        let v = vol(&[3, 3, 3, 2], 11);
        let r = grad_check(
            &InterpolateOp {
                position: [0.25, 0.5, 0.75],
            },
            std::slice::from_ref(&v),
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
        for angles in [[0.0, 0.0, 0.0], [45.0, 0.0, 0.0], [30.0, 20.0, 10.0]] {
            let layer = MvfsLayer::new(3, &[angles], 2, 3, &mut rng).unwrap();
            let w = layer.weights[0].clone();
            let op = SynthViewOp { layer, view: 0 };
            let r = grad_check(&op, &[v.clone(), w], GradCheckOptions::default()).unwrap();
            assert!(r.pass, "{r:?}");
        }
    }
}
