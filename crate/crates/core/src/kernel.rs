//! Kernel lattice points and their rotated copies.
//!
//! A `K×K×K` kernel is a list of `K³` offsets around its center. Index `k`
//! walks x fastest, then y, then z (descending), so `k = 0` is the
//! top-left vertex `(-h, -h, h)` and `k = K³-1` the bottom-right `(h, h, -h)`
//! with `h = (K-1)/2`. Rotations compose the three hybrid factor matrices
//! `Rx(θx)·Ry(θy)·Rz(θz)` and act on row vectors: `P' = P·R`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Tolerance under which a rotated coordinate counts as an integer.
pub const LATTICE_EXACT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct KernelLattice {
    size: usize,
    points: Vec<Vec3>,
}

impl KernelLattice {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn center_index(&self) -> usize {
        (self.points.len() - 1) / 2
    }
}

pub fn build_lattice(k: usize) -> Result<KernelLattice> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::Parameter(format!(
            "kernel size must be odd and positive, got {k}"
        )));
    }
    let half = ((k - 1) / 2) as i64;
    let kk = k * k;
    let points = (0..kk * k)
        .map(|idx| {
            let x = (idx % kk % k) as i64 - half;
            let y = ((idx % kk) / k) as i64 - half;
            let z = half - (idx / kk) as i64;
            [x as f64, y as f64, z as f64]
        })
        .collect();
    Ok(KernelLattice { size: k, points })
}

/// `(sin, cos)` of an angle in degrees, exact at multiples of 90°.
pub fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let r = deg.rem_euclid(360.0);
    if r == 0.0 {
        (0.0, 1.0)
    } else if r == 90.0 {
        (1.0, 0.0)
    } else if r == 180.0 {
        (0.0, -1.0)
    } else if r == 270.0 {
        (-1.0, 0.0)
    } else {
        r.to_radians().sin_cos()
    }
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Largest entry of `|MᵀM - I|`.
pub fn orthogonality_error(m: &Mat3) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
            let id = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - id).abs());
        }
    }
    worst
}

/// Row vector times matrix.
pub fn apply_row(p: &Vec3, m: &Mat3) -> Vec3 {
    [
        p[0] * m[0][0] + p[1] * m[1][0] + p[2] * m[2][0],
        p[0] * m[0][1] + p[1] * m[1][1] + p[2] * m[2][1],
        p[0] * m[0][2] + p[1] * m[1][2] + p[2] * m[2][2],
    ]
}

/// The x-factor: acts on the x–y block with negated cosines.
pub fn factor_x(deg: f64) -> Mat3 {
    let (s, c) = sin_cos_deg(deg);
    [[-c, s, 0.0], [-s, -c, 0.0], [0.0, 0.0, 1.0]]
}

pub fn factor_y(deg: f64) -> Mat3 {
    let (s, c) = sin_cos_deg(deg);
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

/// The z-factor: acts on the y–z block with negated cosines.
pub fn factor_z(deg: f64) -> Mat3 {
    let (s, c) = sin_cos_deg(deg);
    [[1.0, 0.0, 0.0], [0.0, -c, s], [0.0, -s, -c]]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationSpec {
    /// `[θx, θy, θz]` in degrees.
    pub angles: [f64; 3],
    pub matrix: Mat3,
}

pub fn build_rotation(theta_x: f64, theta_y: f64, theta_z: f64) -> RotationSpec {
    let m = mat_mul(
        &mat_mul(&factor_x(theta_x), &factor_y(theta_y)),
        &factor_z(theta_z),
    );
    RotationSpec {
        angles: [theta_x, theta_y, theta_z],
        matrix: m,
    }
}

impl RotationSpec {
    pub fn from_angles(angles: [f64; 3]) -> Self {
        build_rotation(angles[0], angles[1], angles[2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotatedKernel {
    pub spec: RotationSpec,
    points: Vec<Vec3>,
    lattice_exact: bool,
}

impl RotatedKernel {
    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn lattice_exact(&self) -> bool {
        self.lattice_exact
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Side length of the underlying cubic kernel.
    pub fn size(&self) -> usize {
        (self.points.len() as f64).cbrt().round() as usize
    }

    pub fn center_index(&self) -> usize {
        (self.points.len() - 1) / 2
    }
}

pub fn rotate_kernel(lattice: &KernelLattice, spec: &RotationSpec) -> RotatedKernel {
    let points: Vec<Vec3> = lattice
        .points()
        .iter()
        .map(|p| apply_row(p, &spec.matrix))
        .collect();
    let lattice_exact = points
        .iter()
        .flatten()
        .all(|c| (c - c.round()).abs() <= LATTICE_EXACT_TOL);
    RotatedKernel {
        spec: *spec,
        points,
        lattice_exact,
    }
}

/// Values that print as zero at six decimals lose their sign.
fn fixed6(v: f64) -> f64 {
    if v.abs() < 5e-7 {
        0.0
    } else {
        v
    }
}

/// Text table of `k`, `P_k` and `P'_{r,k}` for each view.
pub fn kernel_table(lattice: &KernelLattice, views: &[RotatedKernel]) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    for (r, view) in views.iter().enumerate() {
        let [ax, ay, az] = view.spec.angles;
        let _ = writeln!(
            out,
            "# view {r} angles=({ax},{ay},{az}) latticeExact={}",
            view.lattice_exact()
        );
        let _ = writeln!(out, "k\tPx\tPy\tPz\tP'x\tP'y\tP'z");
        for (k, (p, q)) in lattice.points().iter().zip(view.points()).enumerate() {
            let _ = writeln!(
                out,
                "{k}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
                p[0],
                p[1],
                p[2],
                fixed6(q[0]),
                fixed6(q[1]),
                fixed6(q[2])
            );
        }
    }
    out
}
