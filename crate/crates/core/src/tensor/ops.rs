use super::Tensor;
use crate::error::{Error, Result};

// Slice kernels. Loop order is fixed so results are bit-reproducible.

/// `out[m×p] += a[m×n] · b[n×p]`
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], m: usize, n: usize, p: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), n * p);
    debug_assert_eq!(out.len(), m * p);
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * p..(k + 1) * p];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// `out[m×p] += aᵀ · b` with `a` stored `n×m` and `b` stored `n×p`.
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], n: usize, m: usize, p: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), n * m);
    debug_assert_eq!(b.len(), n * p);
    debug_assert_eq!(out.len(), m * p);
    for k in 0..n {
        let brow = &b[k * p..(k + 1) * p];
        for i in 0..m {
            let aki = a[k * m + i];
            if aki == 0.0 {
                continue;
            }
            let orow = &mut out[i * p..(i + 1) * p];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aki * bv;
            }
        }
    }
}

/// `out[m×p] += a · bᵀ` with `a` stored `m×n` and `b` stored `p×n`.
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], m: usize, n: usize, p: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(out.len(), m * p);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..p {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * p + j] += s;
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let (n2, p) = b.dims2()?;
    if n != n2 {
        return Err(Error::shape_mismatch(
            "matmul inner dimension",
            a.shape(),
            b.shape(),
        ));
    }
    let mut out = vec![0.0; m * p];
    gemm_acc(a.data(), b.data(), m, n, p, &mut out);
    Tensor::new(vec![m, p], out)
}

/// Gradients of `<a·b, grad_out>` with respect to `a` and `b`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, n) = a.dims2()?;
    let (n2, p) = b.dims2()?;
    if n != n2 {
        return Err(Error::shape_mismatch(
            "matmul inner dimension",
            a.shape(),
            b.shape(),
        ));
    }
    if grad_out.shape() != [m, p] {
        return Err(Error::shape_mismatch(
            "matmul grad_out",
            grad_out.shape(),
            &[m, p],
        ));
    }
    let mut ga = vec![0.0; m * n];
    gemm_nt_acc(grad_out.data(), b.data(), m, p, n, &mut ga);
    let mut gb = vec![0.0; n * p];
    gemm_tn_acc(a.data(), grad_out.data(), m, n, p, &mut gb);
    Ok((Tensor::new(vec![m, n], ga)?, Tensor::new(vec![n, p], gb)?))
}

/// Backward of `matmul` that accumulates into both operands' gradient slots.
pub fn matmul_backward_into(a: &mut Tensor, b: &mut Tensor, grad_out: &Tensor) -> Result<()> {
    let (ga, gb) = matmul_backward(a, b, grad_out)?;
    a.accumulate_grad(ga.data());
    b.accumulate_grad(gb.data());
    Ok(())
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let d = a.data();
    Tensor::new(
        vec![n, m],
        (0..n * m).map(|idx| d[(idx % m) * n + idx / m]).collect(),
    )
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Dimension(format!(
            "softmax axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Max-subtracted softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    if len == 0 {
        return Err(Error::Dimension("softmax over an empty axis".into()));
    }
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len)
                .map(|j| src[at(j)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..len {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[at(j)] /= sum;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Given `y = softmax(x, axis)` and `dL/dy`, returns `dL/dx`.
pub fn softmax_backward(y: &Tensor, grad_y: &Tensor, axis: usize) -> Result<Tensor> {
    if y.shape() != grad_y.shape() {
        return Err(Error::shape_mismatch(
            "softmax_backward",
            y.shape(),
            grad_y.shape(),
        ));
    }
    let (outer, len, inner) = axis_split(y.shape(), axis)?;
    let (yd, gd) = (y.data(), grad_y.data());
    let mut out = vec![0.0; yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let dot: f64 = (0..len).map(|j| yd[at(j)] * gd[at(j)]).sum();
            for j in 0..len {
                out[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), out)
}

fn check_labels(
    logits: &Tensor,
    labels: &[usize],
    ignore: Option<usize>,
) -> Result<(usize, usize)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k && Some(l) != ignore) {
        return Err(Error::Parameter(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let counted = labels.iter().filter(|&&l| Some(l) != ignore).count();
    if counted == 0 {
        return Err(Error::DegenerateBatch);
    }
    Ok((n, k))
}

/// Mean voxel-wise cross-entropy together with its gradient w.r.t. the logits.
pub fn cross_entropy_with_grad(
    logits: &Tensor,
    labels: &[usize],
    ignore: Option<usize>,
) -> Result<(f64, Tensor)> {
    let (n, k) = check_labels(logits, labels, ignore)?;
    let counted = labels.iter().filter(|&&l| Some(l) != ignore).count() as f64;
    let x = logits.data();
    let mut grad = vec![0.0; n * k];
    let mut total = 0.0;
    for (row, &label) in labels.iter().enumerate() {
        if Some(label) == ignore {
            continue;
        }
        let r = &x[row * k..(row + 1) * k];
        let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = r.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - r[label];
        let g = &mut grad[row * k..(row + 1) * k];
        for (gj, v) in g.iter_mut().zip(r) {
            *gj = (v - log_z).exp() / counted;
        }
        g[label] -= 1.0 / counted;
    }
    let loss = total / counted;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross_entropy"));
    }
    Ok((loss, Tensor::new(vec![n, k], grad)?))
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize], ignore: Option<usize>) -> Result<f64> {
    cross_entropy_with_grad(logits, labels, ignore).map(|(l, _)| l)
}

/// Gradient of `grad_loss · cross_entropy(logits)` w.r.t. the logits.
pub fn cross_entropy_backward(
    logits: &Tensor,
    labels: &[usize],
    ignore: Option<usize>,
    grad_loss: f64,
) -> Result<Tensor> {
    let (_, g) = cross_entropy_with_grad(logits, labels, ignore)?;
    Ok(g.scale(grad_loss))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU.
pub(crate) fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu(x: &Tensor) -> Tensor {
    Tensor::from_fn(x.shape(), |i| gelu_scalar(x.data()[i]))
}

pub fn gelu_backward(x: &Tensor, grad_y: &Tensor) -> Result<Tensor> {
    if x.shape() != grad_y.shape() {
        return Err(Error::shape_mismatch(
            "gelu_backward",
            x.shape(),
            grad_y.shape(),
        ));
    }
    Ok(Tensor::from_fn(x.shape(), |i| {
        gelu_grad_scalar(x.data()[i]) * grad_y.data()[i]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_annihilation() {
        let id = m(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let a = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&id, &a).unwrap().data(), a.data());
        let p = m(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let q = m(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&p, &q).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = SeededRng::new(3);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.data()[i * 4 + k] * b.data()[k * 2 + j];
                }
                assert!((c.data()[i * 2 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_backward_accumulates() {
        let mut a = m(1, 2, &[1.0, 2.0]);
        let mut b = m(2, 1, &[3.0, 4.0]);
        let g = m(1, 1, &[1.0]);
        matmul_backward_into(&mut a, &mut b, &g).unwrap();
        matmul_backward_into(&mut a, &mut b, &g).unwrap();
        assert_eq!(a.grad().unwrap(), &[6.0, 8.0]);
        assert_eq!(b.grad().unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&Tensor::zeros(&[3]), 0).unwrap();
        for v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap(), 0).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-300);
        let s = softmax(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), 0).unwrap();
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
        let z: f64 = e.iter().sum();
        for (got, want) in s.data().iter().zip([0.09003057, 0.24472847, 0.66524096]) {
            assert!((got - want).abs() < 5e-9);
        }
        for (got, ei) in s.data().iter().zip(&e) {
            assert!((got - ei / z).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_along_middle_axis() {
        let mut rng = SeededRng::new(9);
        let x = Tensor::randn(&[2, 3, 4], 2.0, &mut rng);
        let y = softmax(&x, 1).unwrap();
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|j| y.data()[(o * 3 + j) * 4 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert!(softmax(&x, 3).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let big = m(2, 3, &[1e6, 0.0, 0.0, 0.0, 0.0, 1e6]);
        assert!(cross_entropy(&big, &[0, 2], None).unwrap().abs() < 1e-12);

        let uniform = Tensor::zeros(&[5, 7]);
        let l = cross_entropy(&uniform, &[0, 1, 2, 3, 6], None).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-12);

        // Row 0 puts the true class at the low logit, row 1 at the high one.
        let x = m(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let p_low = (0f64).exp() / (1f64.exp() + 1.0);
        let p_high = 1f64.exp() / (1f64.exp() + 1.0);
        let want = 0.5 * (-p_low.ln() - p_high.ln());
        assert!((cross_entropy(&x, &[1, 1], None).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_ignore_and_errors() {
        let x = m(2, 2, &[3.0, -1.0, 0.5, 0.5]);
        let only_first = cross_entropy(&x, &[0, 9], Some(9)).unwrap();
        let single = cross_entropy(&m(1, 2, &[3.0, -1.0]), &[0], None).unwrap();
        assert!((only_first - single).abs() < 1e-15);
        let g = cross_entropy_backward(&x, &[0, 9], Some(9), 1.0).unwrap();
        assert_eq!(&g.data()[2..], &[0.0, 0.0]);
        assert!(matches!(
            cross_entropy(&x, &[9, 9], Some(9)),
            Err(Error::DegenerateBatch)
        ));
        assert!(matches!(
            cross_entropy(&x, &[0, 2], None),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad_scalar(x)).abs() < 1e-8);
        }
        assert_eq!(gelu_scalar(0.0), 0.0);
    }
}
