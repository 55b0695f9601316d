//! Synthetic indoor scenes standing in for single-view RGB-D captures.
//!
//! A label grid holds a floor slab, two walls and axis-aligned boxes. A
//! camera above and in front of the room sees only the first occupied voxel
//! along each ray; `S` one-hot encodes those surface voxels (with some label
//! noise) and `D` is a truncated signed distance to them, negative behind
//! the surface. Voxels outside a view cone are ignored.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const EMPTY: usize = 0;
pub const FLOOR: usize = 1;
/// Label used for ignored voxels in training targets.
pub const IGNORE: usize = usize::MAX;
/// Truncation distance of `D`, in voxels.
pub const TRUNCATION: f64 = 3.0;
pub const MAX_ATTEMPTS: u32 = 16;
const VIEW_HALF_ANGLE_DEG: f64 = 30.0;
const RAY_STEP: f64 = 0.25;

pub fn class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes)
        .map(|c| match c {
            0 => "empty".to_string(),
            1 => "floor".to_string(),
            2 => "wall".to_string(),
            c => format!("object{}", c - 2),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    /// `(H₀, W₀, D₀, numClasses)` one-hot or all-zero per voxel.
    pub semantic: Tensor,
    /// `(H₀, W₀, D₀, 1)` truncated signed distance in `[-1, 1]`.
    pub geometric: Tensor,
    /// Ground-truth class per voxel.
    pub labels: Vec<usize>,
    /// Inside the view cone.
    pub valid: Vec<bool>,
    /// Hidden behind an observed surface.
    pub occluded: Vec<bool>,
    pub extents: [usize; 3],
    pub num_classes: usize,
}

impl SceneSample {
    pub fn voxels(&self) -> usize {
        self.labels.len()
    }

    /// Labels with ignored voxels mapped to [`IGNORE`].
    pub fn training_labels(&self) -> Vec<usize> {
        self.labels
            .iter()
            .zip(&self.valid)
            .map(|(&l, &v)| if v { l } else { IGNORE })
            .collect()
    }

    pub fn occupancy(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != EMPTY).collect()
    }

    /// Voxels scored by the semantic metrics: valid and either occluded or
    /// occupied in the ground truth.
    pub fn eval_mask(&self) -> Vec<bool> {
        (0..self.voxels())
            .map(|i| self.valid[i] && (self.occluded[i] || self.labels[i] != EMPTY))
            .collect()
    }

    /// Occluded voxels inside the view cone, where scene completion is scored.
    pub fn sc_mask(&self) -> Vec<bool> {
        (0..self.voxels())
            .map(|i| self.valid[i] && self.occluded[i])
            .collect()
    }

    pub fn check(&self) -> Result<()> {
        let n: usize = self.extents.iter().product();
        let [h, w, d] = self.extents;
        let bad = |m: &str| Err(Error::Parameter(format!("invalid scene: {m}")));
        if self.semantic.shape() != [h, w, d, self.num_classes]
            || self.geometric.shape() != [h, w, d, 1]
            || self.labels.len() != n
            || self.valid.len() != n
            || self.occluded.len() != n
        {
            return bad("inconsistent shapes");
        }
        for row in self.semantic.data().chunks(self.num_classes) {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if zeros != self.num_classes && !(ones == 1 && zeros == self.num_classes - 1) {
                return bad("semantic volume is not one-hot");
            }
        }
        if !self.geometric.all_finite() {
            return bad("geometric volume is not finite");
        }
        if self.labels.iter().any(|&l| l >= self.num_classes) {
            return bad("label out of range");
        }
        Ok(())
    }

    pub fn has_occluded_occupied(&self) -> bool {
        (0..self.voxels()).any(|i| self.valid[i] && self.occluded[i] && self.labels[i] != EMPTY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub extents: [usize; 3],
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub seed: u64,
    pub attempts: u32,
    pub box_count: usize,
    pub label_noise: f64,
    pub semantic: String,
    pub geometric: String,
    pub labels: String,
    pub valid: String,
    pub occluded: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneParams {
    pub extents: [usize; 3],
    pub num_classes: usize,
    pub box_count: usize,
    pub label_noise: f64,
}

fn flat(e: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    (x * e[1] + y) * e[2] + z
}

fn wall_class(num_classes: usize) -> usize {
    2.min(num_classes - 1)
}

fn box_class(num_classes: usize, i: usize) -> usize {
    if num_classes > 3 {
        3 + i % (num_classes - 3)
    } else {
        num_classes - 1
    }
}

fn layout(p: &SceneParams, rng: &mut SeededRng) -> Vec<usize> {
    let e = p.extents;
    let [h, w, d] = e;
    let mut labels = vec![EMPTY; h * w * d];
    let slab = if w >= 4 { 2 } else { 1 };
    let wall = wall_class(p.num_classes);
    for x in 0..h {
        for z in 0..d {
            for y in 0..w {
                let i = flat(e, x, y, z);
                if y < slab {
                    labels[i] = FLOOR;
                } else if z + 1 == d || x + 1 == h {
                    labels[i] = wall;
                }
            }
        }
    }
    if w <= slab || h < 3 || d < 3 {
        return labels;
    }
    for b in 0..p.box_count {
        let class = box_class(p.num_classes, b);
        let sx = 1 + rng.below((h / 3).max(1));
        let sz = 1 + rng.below((d / 3).max(1));
        let sy = 1 + rng.below(((w - slab) / 2).max(1));
        let x0 = rng.below(h - 1 - sx.min(h - 2));
        let z0 = rng.below(d - 1 - sz.min(d - 2));
        for x in x0..(x0 + sx).min(h - 1) {
            for z in z0..(z0 + sz).min(d - 1) {
                for y in slab..(slab + sy).min(w) {
                    labels[flat(e, x, y, z)] = class;
                }
            }
        }
    }
    labels
}

fn camera(e: [usize; 3]) -> [f64; 3] {
    [e[0] as f64 / 2.0, e[1] as f64 * 1.5, -(e[2] as f64) * 0.6]
}

fn center(x: usize, y: usize, z: usize) -> [f64; 3] {
    [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5]
}

/// Occluded flags: the segment from the camera to a voxel crosses another
/// occupied voxel first.
fn occlusion(e: [usize; 3], labels: &[usize]) -> Vec<bool> {
    let cam = camera(e);
    let mut out = vec![false; labels.len()];
    for x in 0..e[0] {
        for y in 0..e[1] {
            for z in 0..e[2] {
                let target = center(x, y, z);
                let delta = [target[0] - cam[0], target[1] - cam[1], target[2] - cam[2]];
                let len = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
                let samples = (len / RAY_STEP).ceil() as usize;
                let me = flat(e, x, y, z);
                for s in 0..samples {
                    let t = s as f64 / samples as f64;
                    let p = [
                        cam[0] + t * delta[0],
                        cam[1] + t * delta[1],
                        cam[2] + t * delta[2],
                    ];
                    if p.iter().zip(&e).any(|(&c, &n)| c < 0.0 || c >= n as f64) {
                        continue;
                    }
                    let j = flat(e, p[0] as usize, p[1] as usize, p[2] as usize);
                    if j == me {
                        break;
                    }
                    if labels[j] != EMPTY {
                        out[me] = true;
                        break;
                    }
                }
            }
        }
    }
    out
}

fn view_cone(e: [usize; 3]) -> Vec<bool> {
    let cam = camera(e);
    let look = [
        e[0] as f64 / 2.0 - cam[0],
        e[1] as f64 / 2.0 - cam[1],
        e[2] as f64 / 2.0 - cam[2],
    ];
    let look_len = look.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cos_max = VIEW_HALF_ANGLE_DEG.to_radians().cos();
    let mut out = vec![false; e.iter().product()];
    for x in 0..e[0] {
        for y in 0..e[1] {
            for z in 0..e[2] {
                let c = center(x, y, z);
                let v = [c[0] - cam[0], c[1] - cam[1], c[2] - cam[2]];
                let len = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                let cos = v.iter().zip(&look).map(|(a, b)| a * b).sum::<f64>() / (len * look_len);
                out[flat(e, x, y, z)] = cos >= cos_max;
            }
        }
    }
    out
}

/// Truncated distance to the nearest surface voxel, scaled to `[-1, 1]`
/// and negated for occluded voxels.
fn signed_distance(e: [usize; 3], surface: &[bool], occluded: &[bool]) -> Vec<f64> {
    let r = TRUNCATION as isize;
    let mut out = vec![0.0; surface.len()];
    for x in 0..e[0] {
        for y in 0..e[1] {
            for z in 0..e[2] {
                let mut best = TRUNCATION * TRUNCATION;
                for dx in -r..=r {
                    for dy in -r..=r {
                        for dz in -r..=r {
                            let (nx, ny, nz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                            if nx < 0
                                || ny < 0
                                || nz < 0
                                || nx >= e[0] as isize
                                || ny >= e[1] as isize
                                || nz >= e[2] as isize
                            {
                                continue;
                            }
                            if surface[flat(e, nx as usize, ny as usize, nz as usize)] {
                                best = best.min((dx * dx + dy * dy + dz * dz) as f64);
                            }
                        }
                    }
                }
                let i = flat(e, x, y, z);
                let mag = best.sqrt().min(TRUNCATION) / TRUNCATION;
                out[i] = if occluded[i] { -mag } else { mag };
            }
        }
    }
    out
}

fn build(p: &SceneParams, seed: u64) -> Result<SceneSample> {
    let e = p.extents;
    let mut rng = SeededRng::new(seed);
    let labels = layout(p, &mut rng);
    let occluded = occlusion(e, &labels);
    let valid = view_cone(e);
    let surface: Vec<bool> = (0..labels.len())
        .map(|i| labels[i] != EMPTY && !occluded[i] && valid[i])
        .collect();
    let k = p.num_classes;
    let mut semantic = vec![0.0; labels.len() * k];
    for (i, &is_surface) in surface.iter().enumerate() {
        if !is_surface {
            continue;
        }
        let mut class = labels[i];
        if k > 2 && rng.chance(p.label_noise) {
            class = 1 + (class - 1 + 1 + rng.below(k - 2)) % (k - 1);
        }
        semantic[i * k + class] = 1.0;
    }
    let geometric = signed_distance(e, &surface, &occluded);
    Ok(SceneSample {
        semantic: Tensor::new(vec![e[0], e[1], e[2], k], semantic)?,
        geometric: Tensor::new(vec![e[0], e[1], e[2], 1], geometric)?,
        labels,
        valid,
        occluded,
        extents: e,
        num_classes: k,
    })
}

/// Deterministic scene for `seed`, retried with derived seeds until some
/// occupied voxel is occluded. Returns the sample and the attempt count.
pub fn generate_scene_with_attempts(p: &SceneParams, seed: u64) -> Result<(SceneSample, u32)> {
    if p.extents.contains(&0) {
        return Err(Error::Parameter("scene extents must be positive".into()));
    }
    if p.num_classes < 2 {
        return Err(Error::Parameter(
            "a scene needs at least two classes".into(),
        ));
    }
    if !(0.0..=1.0).contains(&p.label_noise) {
        return Err(Error::Parameter("label noise must lie in [0, 1]".into()));
    }
    for attempt in 0..MAX_ATTEMPTS {
        let s = if attempt == 0 {
            seed
        } else {
            SeededRng::derive(seed, attempt as u64).next_u64()
        };
        let sample = build(p, s)?;
        if sample.has_occluded_occupied() {
            return Ok((sample, attempt + 1));
        }
    }
    Err(Error::Generation {
        attempts: MAX_ATTEMPTS as usize,
        reason: "no occluded occupied voxel".into(),
    })
}

pub fn generate_scene(
    seed: u64,
    extents: [usize; 3],
    num_classes: usize,
    box_count: usize,
) -> Result<SceneSample> {
    let p = SceneParams {
        extents,
        num_classes,
        box_count,
        label_noise: 0.05,
    };
    generate_scene_with_attempts(&p, seed).map(|(s, _)| s)
}

/// Generator inputs recorded in the manifest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneOrigin {
    pub seed: u64,
    pub attempts: u32,
    pub box_count: usize,
    pub label_noise: f64,
}

fn mask_tensor(e: [usize; 3], m: &[bool]) -> Result<Tensor> {
    Tensor::new(
        e.to_vec(),
        m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )
}

pub fn labels_tensor(e: [usize; 3], labels: &[usize]) -> Result<Tensor> {
    Tensor::new(e.to_vec(), labels.iter().map(|&l| l as f64).collect())
}

/// Class indices stored as reals in a CVST label volume.
pub fn labels_from_tensor(t: &Tensor) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(Error::Parameter(format!("{v} is not a class index")))
            }
        })
        .collect()
}

fn mask_from_tensor(t: &Tensor) -> Vec<bool> {
    t.data().iter().map(|&v| v != 0.0).collect()
}

/// Writes the five volumes and `manifest.json` into `dir`.
pub fn save_scene(dir: &Path, sample: &SceneSample, origin: &SceneOrigin) -> Result<SceneManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let SceneOrigin {
        seed,
        attempts,
        box_count,
        label_noise,
    } = *origin;
    let e = sample.extents;
    let manifest = SceneManifest {
        extents: e,
        num_classes: sample.num_classes,
        class_names: class_names(sample.num_classes),
        seed,
        attempts,
        box_count,
        label_noise,
        semantic: "semantic.cvst".into(),
        geometric: "geometric.cvst".into(),
        labels: "labels.cvst".into(),
        valid: "valid.cvst".into(),
        occluded: "occluded.cvst".into(),
    };
    write_tensor(&sample.semantic, dir.join(&manifest.semantic))?;
    write_tensor(&sample.geometric, dir.join(&manifest.geometric))?;
    write_tensor(
        &labels_tensor(e, &sample.labels)?,
        dir.join(&manifest.labels),
    )?;
    write_tensor(&mask_tensor(e, &sample.valid)?, dir.join(&manifest.valid))?;
    write_tensor(
        &mask_tensor(e, &sample.occluded)?,
        dir.join(&manifest.occluded),
    )?;
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_scene(dir: &Path) -> Result<(SceneSample, SceneManifest)> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: SceneManifest = serde_json::from_str(&text)?;
    let labels = labels_from_tensor(&read_tensor(dir.join(&m.labels))?)?;
    let sample = SceneSample {
        semantic: read_tensor(dir.join(&m.semantic))?,
        geometric: read_tensor(dir.join(&m.geometric))?,
        labels,
        valid: mask_from_tensor(&read_tensor(dir.join(&m.valid))?),
        occluded: mask_from_tensor(&read_tensor(dir.join(&m.occluded))?),
        extents: m.extents,
        num_classes: m.num_classes,
    };
    sample.check().map_err(|e| Error::Format {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok((sample, m))
}
