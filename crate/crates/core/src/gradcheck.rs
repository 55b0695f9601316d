//! Central finite-difference verification of hand-written backward passes.
//!
//! An op is reduced to a scalar by contracting its output with a fixed,
//! seeded random projection `r`, so the analytic side is `backward(inputs, r)`
//! and the numeric side is `(<f(x+εe), r> - <f(x-εe), r>) / 2ε`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// A deterministic tensor function with a hand-written vector-Jacobian product.
pub trait Differentiable {
    fn name(&self) -> String;

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor>;

    /// Gradient of `<forward(inputs), grad_output>` with respect to each input.
    fn backward(&self, inputs: &[Tensor], grad_output: &Tensor) -> Result<Vec<Tensor>>;
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub max_relative_error: f64,
    /// Worst relative error per input tensor.
    pub input_errors: Vec<f64>,
    /// Per input, worst `|a - n|` over the largest probed `|a|`. Unlike the
    /// elementwise error this does not blow up on coordinates whose gradient
    /// sits at the finite-difference noise floor.
    pub scaled_errors: Vec<f64>,
    /// Number of coordinates probed per input tensor.
    pub probed: Vec<usize>,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Upper bound on probed coordinates per input; `None` probes all of them.
    pub max_probes: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-4,
            max_probes: None,
            seed: 0,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn probe_indices(len: usize, limit: Option<usize>, rng: &mut SeededRng) -> Vec<usize> {
    match limit {
        Some(k) if k < len => {
            // Partial Fisher-Yates.
            let mut idx: Vec<usize> = (0..len).collect();
            for i in 0..k {
                let j = i + rng.below(len - i);
                idx.swap(i, j);
            }
            let mut picked = idx[..k].to_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..len).collect(),
    }
}

pub fn grad_check(
    op: &dyn Differentiable,
    inputs: &[Tensor],
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    if inputs.iter().any(|t| !t.all_finite()) {
        return Err(Error::NonFinite("grad_check inputs"));
    }
    let y = op.forward(inputs)?;
    let y2 = op.forward(inputs)?;
    let same = y.shape() == y2.shape()
        && y.data()
            .iter()
            .zip(y2.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
    if !same {
        return Err(Error::Determinism(op.name()));
    }

    let mut rng = SeededRng::new(opts.seed);
    let projection = Tensor::randn(y.shape(), 1.0, &mut rng);
    let analytic = op.backward(inputs, &projection)?;
    if analytic.len() != inputs.len() {
        return Err(Error::Dimension(format!(
            "{} returned {} gradients for {} inputs",
            op.name(),
            analytic.len(),
            inputs.len()
        )));
    }

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut input_errors = Vec::with_capacity(inputs.len());
    let mut scaled_errors = Vec::with_capacity(inputs.len());
    let mut probed = Vec::with_capacity(inputs.len());
    for (slot, grad) in analytic.iter().enumerate() {
        if grad.shape() != inputs[slot].shape() {
            return Err(Error::shape_mismatch(
                "analytic gradient",
                grad.shape(),
                inputs[slot].shape(),
            ));
        }
        let picks = probe_indices(inputs[slot].len(), opts.max_probes, &mut rng);
        let mut worst: f64 = 0.0;
        let (mut worst_abs, mut scale): (f64, f64) = (0.0, 0.0);
        for &i in &picks {
            let orig = work[slot].data()[i];
            work[slot].data_mut()[i] = orig + opts.epsilon;
            let plus = op.forward(&work)?.dot(&projection)?;
            work[slot].data_mut()[i] = orig - opts.epsilon;
            let minus = op.forward(&work)?.dot(&projection)?;
            work[slot].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            worst = worst.max(relative_error(grad.data()[i], numeric));
            worst_abs = worst_abs.max((grad.data()[i] - numeric).abs());
            scale = scale.max(grad.data()[i].abs());
        }
        input_errors.push(worst);
        scaled_errors.push(if scale > 0.0 {
            worst_abs / scale
        } else {
            worst_abs
        });
        probed.push(picks.len());
    }
    let max_relative_error = input_errors.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        op: op.name(),
        max_relative_error,
        input_errors,
        scaled_errors,
        probed,
        tolerance: opts.tolerance,
        pass: max_relative_error < opts.tolerance,
    })
}

/// `matmul(a, b)` as a checkable op.
pub struct MatmulOp;

impl Differentiable for MatmulOp {
    fn name(&self) -> String {
        "matmul".into()
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        crate::tensor::matmul(&inputs[0], &inputs[1])
    }
    fn backward(&self, inputs: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        let (ga, gb) = crate::tensor::matmul_backward(&inputs[0], &inputs[1], g)?;
        Ok(vec![ga, gb])
    }
}

/// `softmax(x, axis)` as a checkable op.
pub struct SoftmaxOp {
    pub axis: usize,
}

impl Differentiable for SoftmaxOp {
    fn name(&self) -> String {
        format!("softmax(axis={})", self.axis)
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        crate::tensor::softmax(&inputs[0], self.axis)
    }
    fn backward(&self, inputs: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        let y = crate::tensor::softmax(&inputs[0], self.axis)?;
        Ok(vec![crate::tensor::softmax_backward(&y, g, self.axis)?])
    }
}

/// Mean cross-entropy against fixed labels, as a one-element output.
pub struct CrossEntropyOp {
    pub labels: Vec<usize>,
    pub ignore: Option<usize>,
}

impl Differentiable for CrossEntropyOp {
    fn name(&self) -> String {
        "cross_entropy".into()
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let l = crate::tensor::cross_entropy(&inputs[0], &self.labels, self.ignore)?;
        Tensor::new(vec![1], vec![l])
    }
    fn backward(&self, inputs: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![crate::tensor::cross_entropy_backward(
            &inputs[0],
            &self.labels,
            self.ignore,
            g.data()[0],
        )?])
    }
}

pub struct GeluOp;

impl Differentiable for GeluOp {
    fn name(&self) -> String {
        "gelu".into()
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        Ok(crate::tensor::gelu(&inputs[0]))
    }
    fn backward(&self, inputs: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![crate::tensor::gelu_backward(&inputs[0], g)?])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    struct Triple;
    impl Differentiable for Triple {
        fn name(&self) -> String {
            "3x".into()
        }
        fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
            Ok(inputs[0].scale(3.0))
        }
        fn backward(&self, _: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
            Ok(vec![g.scale(3.0)])
        }
    }

    struct Flaky(Cell<f64>);
    impl Differentiable for Flaky {
        fn name(&self) -> String {
            "flaky".into()
        }
        fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
            self.0.set(self.0.get() + 1.0);
            Ok(inputs[0].scale(self.0.get()))
        }
        fn backward(&self, _: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
            Ok(vec![g.clone()])
        }
    }

    struct Wrong;
    impl Differentiable for Wrong {
        fn name(&self) -> String {
            "wrong".into()
        }
        fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
            Ok(inputs[0].scale(2.0))
        }
        fn backward(&self, _: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
            Ok(vec![g.scale(2.5)])
        }
    }

    #[test]
    fn linear_op_passes() {
        let x = Tensor::new(vec![1], vec![0.7]).unwrap();
        let r = grad_check(&Triple, &[x], GradCheckOptions::default()).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.max_relative_error < 1e-9);
    }

    #[test]
    fn wrong_backward_fails() {
        let x = Tensor::new(vec![2], vec![0.7, -1.0]).unwrap();
        let r = grad_check(&Wrong, &[x], GradCheckOptions::default()).unwrap();
        assert!(!r.pass);
        assert!((r.max_relative_error - 0.2).abs() < 1e-6);
    }

    #[test]
    fn nondeterministic_op_is_rejected() {
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        let err = grad_check(&Flaky(Cell::new(0.0)), &[x], GradCheckOptions::default());
        assert!(matches!(err, Err(Error::Determinism(_))));
    }

    #[test]
    fn softmax_and_matmul_pass_tightly() {
        let mut rng = SeededRng::new(11);
        let x = Tensor::randn(&[5], 1.0, &mut rng);
        let r = grad_check(&SoftmaxOp { axis: 0 }, &[x], GradCheckOptions::default()).unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");

        let a = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let opts = GradCheckOptions {
            tolerance: 1e-6,
            ..Default::default()
        };
        let r = grad_check(&MatmulOp, &[a, b], opts).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn cross_entropy_and_gelu_pass() {
        let mut rng = SeededRng::new(5);
        let x = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let op = CrossEntropyOp {
            labels: vec![0, 2, 7, 1],
            ignore: Some(7),
        };
        assert!(
            grad_check(&op, std::slice::from_ref(&x), GradCheckOptions::default())
                .unwrap()
                .pass
        );
        assert!(
            grad_check(&GeluOp, &[x], GradCheckOptions::default())
                .unwrap()
                .pass
        );
    }

    #[test]
    fn probe_subsampling_is_bounded() {
        let mut rng = SeededRng::new(1);
        let x = Tensor::randn(&[50], 1.0, &mut rng);
        let opts = GradCheckOptions {
            max_probes: Some(7),
            ..Default::default()
        };
        let r = grad_check(&Triple, &[x], opts).unwrap();
        assert_eq!(r.probed, vec![7]);
    }
}
