//! Test-side oracles written from the formulas, sharing no code with the
//! library's kernel, interpolation or metric paths.

#![allow(dead_code)]

pub type M3 = [[f64; 3]; 3];

fn trig(deg: f64) -> (f64, f64) {
    // Snap the quarter turns so 90° multiples give exact 0/±1 entries.
    let quarter = deg / 90.0;
    if (quarter - quarter.round()).abs() < 1e-15 {
        match (quarter.round() as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        let r = deg * std::f64::consts::PI / 180.0;
        (r.sin(), r.cos())
    }
}

fn mul(a: &M3, b: &M3) -> M3 {
    let mut o = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            o[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    o
}

/// The three printed factors composed as `Rx·Ry·Rz`.
pub fn rotation(ax: f64, ay: f64, az: f64) -> M3 {
    let (sx, cx) = trig(ax);
    let (sy, cy) = trig(ay);
    let (sz, cz) = trig(az);
    let rx = [[-cx, sx, 0.0], [-sx, -cx, 0.0], [0.0, 0.0, 1.0]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[1.0, 0.0, 0.0], [0.0, -cz, sz], [0.0, -sz, -cz]];
    mul(&mul(&rx, &ry), &rz)
}

/// Offsets of a `k³` kernel: x fastest, then y, then z descending.
pub fn lattice(k: usize) -> Vec<[f64; 3]> {
    let h = (k / 2) as f64;
    let mut out = Vec::new();
    for zi in 0..k {
        for yi in 0..k {
            for xi in 0..k {
                out.push([xi as f64 - h, yi as f64 - h, h - zi as f64]);
            }
        }
    }
    out
}

/// Row vector times matrix.
pub fn rotate(p: &[f64; 3], r: &M3) -> [f64; 3] {
    let mut o = [0.0; 3];
    for (j, oj) in o.iter_mut().enumerate() {
        *oj = p[0] * r[0][j] + p[1] * r[1][j] + p[2] * r[2][j];
    }
    o
}

/// Dense `(H, W, D, C)` volume with zero padding outside.
pub struct Vol<'a> {
    pub dims: [usize; 4],
    pub data: &'a [f64],
}

impl Vol<'_> {
    pub fn at(&self, x: i64, y: i64, z: i64, c: usize) -> f64 {
        let [h, w, d, ch] = self.dims;
        if x < 0 || y < 0 || z < 0 || x >= h as i64 || y >= w as i64 || z >= d as i64 {
            return 0.0;
        }
        self.data[((x as usize * w + y as usize) * d + z as usize) * ch + c]
    }

    /// Eight-corner trilinear read.
    pub fn trilinear(&self, p: [f64; 3], c: usize) -> f64 {
        let base = [p[0].floor(), p[1].floor(), p[2].floor()];
        let mut acc = 0.0;
        for corner in 0..8 {
            let off = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
            let mut wgt = 1.0;
            let mut idx = [0i64; 3];
            for a in 0..3 {
                let q = base[a] + off[a] as f64;
                wgt *= 1.0 - (p[a] - q).abs();
                idx[a] = q as i64;
            }
            if wgt != 0.0 {
                acc += wgt * self.at(idx[0], idx[1], idx[2], c);
            }
        }
        acc
    }
}

/// Standard (unrotated) stride-1 convolution with zero padding, weights
/// `(K³, Cin, Cout)` indexed by lattice tap.
pub fn conv3d(v: &Vol, w: &[f64], k: usize, cout: usize) -> Vec<f64> {
    let [h, wd, d, cin] = v.dims;
    let taps = lattice(k);
    let mut out = vec![0.0; h * wd * d * cout];
    for x in 0..h {
        for y in 0..wd {
            for z in 0..d {
                let o = &mut out[((x * wd + y) * d + z) * cout..][..cout];
                for (t, p) in taps.iter().enumerate() {
                    let (px, py, pz) = (
                        x as i64 + p[0] as i64,
                        y as i64 + p[1] as i64,
                        z as i64 + p[2] as i64,
                    );
                    for ci in 0..cin {
                        let f = v.at(px, py, pz, ci);
                        for (co, ov) in o.iter_mut().enumerate() {
                            *ov += f * w[(t * cin + ci) * cout + co];
                        }
                    }
                }
            }
        }
    }
    out
}

/// For a lattice-exact rotation, `perm[k]` is the lattice index hit by the
/// rotated tap `k`.
pub fn tap_permutation(k: usize, r: &M3) -> Vec<usize> {
    let taps = lattice(k);
    taps.iter()
        .map(|p| {
            let q = rotate(p, r);
            taps.iter()
                .position(|t| (0..3).all(|a| (t[a] - q[a]).abs() < 1e-12))
                .expect("rotation is not lattice-exact")
        })
        .collect()
}

/// Rotated-kernel synthesis evaluated voxel by voxel: every tap position
/// `v + P·R` is read trilinearly and weighted.
pub fn brute_force_view(v: &Vol, w: &[f64], k: usize, r: &M3, cout: usize) -> Vec<f64> {
    let [h, wd, d, cin] = v.dims;
    let taps: Vec<[f64; 3]> = lattice(k).iter().map(|p| rotate(p, r)).collect();
    let mut out = vec![0.0; h * wd * d * cout];
    for x in 0..h {
        for y in 0..wd {
            for z in 0..d {
                for (t, p) in taps.iter().enumerate() {
                    let pos = [x as f64 + p[0], y as f64 + p[1], z as f64 + p[2]];
                    for ci in 0..cin {
                        let f = v.trilinear(pos, ci);
                        for co in 0..cout {
                            out[((x * wd + y) * d + z) * cout + co] +=
                                f * w[(t * cin + ci) * cout + co];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Confusion matrix `cm[gt][pred]` over masked entries.
pub fn confusion(pred: &[usize], gt: &[usize], mask: &[bool], n: usize) -> Vec<Vec<usize>> {
    let mut cm = vec![vec![0usize; n]; n];
    for i in 0..gt.len() {
        if mask[i] {
            cm[gt[i]][pred[i]] += 1;
        }
    }
    cm
}

pub struct OracleSc {
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn oracle_sc(pred: &[bool], gt: &[bool], mask: &[bool]) -> OracleSc {
    let p: Vec<usize> = pred.iter().map(|&b| b as usize).collect();
    let g: Vec<usize> = gt.iter().map(|&b| b as usize).collect();
    let cm = confusion(&p, &g, mask, 2);
    let (tp, fp, fn_) = (cm[1][1], cm[0][1], cm[1][0]);
    OracleSc {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        iou: ratio(tp, tp + fp + fn_),
    }
}

/// Per-class IoU for classes `1..n` that occur in prediction or ground
/// truth under the mask, and their mean (0 when none occur).
pub fn oracle_ssc(
    pred: &[usize],
    gt: &[usize],
    mask: &[bool],
    n: usize,
) -> (Vec<(usize, f64)>, f64) {
    let cm = confusion(pred, gt, mask, n);
    let mut per = Vec::new();
    for c in 1..n {
        let row: usize = cm[c].iter().sum();
        let col: usize = cm.iter().map(|r| r[c]).sum();
        let union = row + col - cm[c][c];
        if union > 0 {
            per.push((c, cm[c][c] as f64 / union as f64));
        }
    }
    let mean = if per.is_empty() {
        0.0
    } else {
        per.iter().map(|(_, v)| v).sum::<f64>() / per.len() as f64
    };
    (per, mean)
}
