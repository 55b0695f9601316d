//! SGD training on synthetic scenes and the ablation harness.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{x_rotations, Aggregate, ModelConfig, RunConfig, TrainConfig};
use crate::cvtr::FusionScheme;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport};
use crate::model::Model;
use crate::nn::Module;
use crate::rng::SeededRng;
use crate::scene::{class_names, generate_scene_with_attempts, SceneParams, SceneSample};

/// Momentum SGD: `v ← μv + (g + λw)`, `w ← w − η·v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Updates every parameter from its gradient slot and clears the slot.
    pub fn step(&mut self, model: &mut dyn Module, lr: f64) {
        let (mu, wd) = (self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        let mut i = 0;
        model.visit_mut("", &mut |_, t| {
            if velocity.len() == i {
                velocity.push(vec![0.0; t.len()]);
            }
            let g = t.grad_tensor();
            let v = &mut velocity[i];
            for ((vj, gj), wj) in v.iter_mut().zip(g.data()).zip(t.data()) {
                *vj = mu * *vj + gj + wd * wj;
            }
            t.sub_scaled(lr, v);
            t.zero_grad();
            i += 1;
        });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    /// Mean loss over the dataset after the last update.
    pub final_loss: f64,
    /// Metrics averaged over the dataset after the last update.
    pub final_metrics: MetricReport,
}

impl TrainLog {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for r in &self.steps {
            serde_json::to_writer(&mut buf, r)?;
            buf.push(b'\n');
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Trains `model` in place with batch size 1, cycling through `dataset`.
pub fn train(model: &mut Model, dataset: &[SceneSample], cfg: &TrainConfig) -> Result<TrainLog> {
    if dataset.is_empty() {
        return Err(Error::Parameter("training needs at least one scene".into()));
    }
    cfg.validate()?;
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    model.zero_grad();
    let mut steps = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let sample = &dataset[step % dataset.len()];
        let loss = model.loss_and_grad(sample).map_err(|e| match e {
            Error::NonFinite(op) => Error::Training {
                step,
                reason: format!("non-finite value in {op}"),
            },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("loss is {loss}"),
            });
        }
        let lr = cfg.lr_at(step);
        opt.step(model, lr);
        steps.push(StepRecord { step, loss, lr });
    }
    let mut losses = Vec::new();
    let mut reports = Vec::new();
    for s in dataset {
        losses.push(model.loss(s)?);
        reports.push(evaluate(&model.predict(s)?, s)?);
    }
    let final_loss = losses.iter().sum::<f64>() / losses.len() as f64;
    if !final_loss.is_finite() {
        return Err(Error::Training {
            step: cfg.steps,
            reason: format!("final loss is {final_loss}"),
        });
    }
    Ok(TrainLog {
        steps,
        final_loss,
        final_metrics: MetricReport::average(&reports).expect("nonempty dataset"),
    })
}

/// Builds a model from `model_cfg` and trains it.
pub fn train_toy(
    dataset: &[SceneSample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Model, TrainLog)> {
    let mut model = Model::new(model_cfg)?;
    let log = train(&mut model, dataset, cfg)?;
    Ok((model, log))
}

/// Scenes for a run: `count` samples with seeds derived from `seed` and `tag`.
pub fn scene_set(run: &RunConfig, seed: u64, tag: u64, count: usize) -> Result<Vec<SceneSample>> {
    let p = SceneParams {
        extents: run.model.volume,
        num_classes: run.model.num_classes,
        box_count: run.scene.box_count,
        label_noise: run.scene.label_noise,
    };
    let mut rng = SeededRng::derive(seed, tag);
    (0..count)
        .map(|_| generate_scene_with_attempts(&p, rng.next_u64()).map(|(s, _)| s))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grid {
    /// Baseline, +MVFS, +MVFS+CVTr.
    Components,
    /// Growing x-axis rotation sets.
    Views,
    /// The three fusion schemes.
    Fusion,
    /// View token sizes.
    Tokens,
}

impl std::str::FromStr for Grid {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "components" => Ok(Self::Components),
            "views" => Ok(Self::Views),
            "fusion" => Ok(Self::Fusion),
            "tokens" => Ok(Self::Tokens),
            other => Err(Error::Config(format!("unknown ablation grid `{other}`"))),
        }
    }
}

impl Grid {
    pub const ALL: [Grid; 4] = [Grid::Components, Grid::Views, Grid::Fusion, Grid::Tokens];

    pub fn name(self) -> &'static str {
        match self {
            Self::Components => "components",
            Self::Views => "views",
            Self::Fusion => "fusion",
            Self::Tokens => "tokens",
        }
    }
}

fn angle_set(degrees: &[f64]) -> String {
    let parts: Vec<String> = degrees.iter().map(|d| format!("{d}")).collect();
    format!("{{{}}}", parts.join(","))
}

/// Named configurations of one grid, derived from `base`.
pub fn grid_variants(grid: Grid, base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    let name = |v: &str| format!("{}/{v}", grid.name());
    match grid {
        Grid::Components => vec![
            (
                name("baseline"),
                ModelConfig {
                    mvfs: false,
                    cvtr: false,
                    rotations: x_rotations(&[0.0]),
                    ..base.clone()
                },
            ),
            (
                name("+mvfs"),
                ModelConfig {
                    mvfs: true,
                    cvtr: false,
                    aggregate: Aggregate::Concat,
                    ..base.clone()
                },
            ),
            (
                name("+mvfs+cvtr"),
                ModelConfig {
                    mvfs: true,
                    cvtr: true,
                    ..base.clone()
                },
            ),
        ],
        Grid::Views => [
            &[0.0][..],
            &[0.0, 45.0],
            &[0.0, 45.0, 90.0],
            &[0.0, 45.0, 90.0, 135.0],
        ]
        .iter()
        .map(|set| {
            (
                name(&angle_set(set)),
                ModelConfig {
                    rotations: x_rotations(set),
                    ..base.clone()
                },
            )
        })
        .collect(),
        Grid::Fusion => [
            FusionScheme::All,
            FusionScheme::AllForOneFeatures,
            FusionScheme::AllForOneTokens,
        ]
        .iter()
        .map(|&f| {
            (
                name(&f.to_string()),
                ModelConfig {
                    fusion: f,
                    ..base.clone()
                },
            )
        })
        .collect(),
        Grid::Tokens => [1, 4, 8, 16, 75]
            .iter()
            .filter(|&&m| m < base.feature_voxels())
            .map(|&m| {
                (
                    name(&format!("M={m}")),
                    ModelConfig {
                        token_rows: m,
                        ..base.clone()
                    },
                )
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub config: ModelConfig,
    /// Metrics averaged over the held-out scenes.
    pub metrics: MetricReport,
    pub final_train_loss: f64,
    /// Arg-max predictions per held-out scene.
    #[serde(skip)]
    pub predictions: Vec<Vec<usize>>,
}

/// Trains every variant on `train_set` and scores it on `eval_set`.
/// Cells are independent and self-seeded, so they run in parallel.
pub fn ablate(
    variants: &[(String, ModelConfig)],
    train_cfg: &TrainConfig,
    train_set: &[SceneSample],
    eval_set: &[SceneSample],
) -> Result<Vec<AblationRow>> {
    if eval_set.is_empty() {
        return Err(Error::Parameter("ablation needs held-out scenes".into()));
    }
    variants
        .par_iter()
        .map(|(variant, cfg)| {
            let (model, log) = train_toy(train_set, cfg, train_cfg)?;
            let mut reports = Vec::new();
            let mut predictions = Vec::new();
            for s in eval_set {
                let pred = model.predict(s)?;
                reports.push(evaluate(&pred, s)?);
                predictions.push(pred);
            }
            Ok(AblationRow {
                variant: variant.clone(),
                config: cfg.clone(),
                metrics: MetricReport::average(&reports).expect("nonempty"),
                final_train_loss: log.final_loss,
                predictions,
            })
        })
        .collect()
}

/// CSV with columns `variant, SC-IoU, SSC-mIoU` and one IoU column per
/// non-empty class (blank where the class was never scored).
pub fn write_report_csv<W: Write>(rows: &[AblationRow], num_classes: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let names = class_names(num_classes);
    let mut header = vec!["variant".to_string(), "SC-IoU".into(), "SSC-mIoU".into()];
    header.extend(names[1..].iter().map(|n| format!("IoU-{n}")));
    let csv_err = |e: csv::Error| Error::Format {
        path: "<csv>".into(),
        reason: e.to_string(),
    };
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![
            r.variant.clone(),
            format!("{}", r.metrics.sc_iou),
            format!("{}", r.metrics.mean_iou),
        ];
        rec.extend((1..num_classes).map(|c| {
            r.metrics
                .per_class_iou
                .get(&c)
                .map(|v| format!("{v}"))
                .unwrap_or_default()
        }));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Per-class IoU map keyed by class name, for JSON output.
pub fn named_ious(report: &MetricReport, num_classes: usize) -> BTreeMap<String, f64> {
    let names = class_names(num_classes);
    report
        .per_class_iou
        .iter()
        .map(|(&c, &v)| (names[c].clone(), v))
        .collect()
}
