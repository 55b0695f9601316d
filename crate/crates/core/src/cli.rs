//! `mvsc` command-line interface.
//!
//! Exit codes: 0 success, 1 usage or validation failure, 2 runtime error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::checks::{run_checks, CheckModule};
use crate::config::{ModelConfig, RunConfig};
use crate::error::{Error, Result};
use crate::kernel::{build_lattice, kernel_table, rotate_kernel, RotationSpec};
use crate::metrics::{evaluate, MetricReport};
use crate::model::{load_parameters, parameters, Model};
use crate::nn::Module;
use crate::scene::{
    generate_scene_with_attempts, labels_from_tensor, labels_tensor, load_scene, save_scene,
    SceneOrigin, SceneParams, SceneSample,
};
use crate::tensor::{read_tensor, write_tensor, Tensor};
use crate::train::{
    ablate, grid_variants, named_ious, scene_set, train_toy, write_report_csv, Grid,
};

pub const SEED_ENV: &str = "CVS_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "mvsc",
    version,
    about = "Multi-view feature synthesis and cross-view attention for voxel scene completion"
)]
pub struct Cli {
    /// JSON run configuration (model, train and scene sections).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for initialisation and scene generation; falls back to $CVS_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Dotted config override, e.g. `--set model.channels=8`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Model preset used when no --config is given: toy or full.
    #[arg(long, global = true, default_value = "toy")]
    pub preset: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct ModelFlags {
    /// all | all-for-one-features | all-for-one-tokens
    #[arg(long)]
    pub fusion: Option<String>,
    /// sum | concat
    #[arg(long)]
    pub aggregate: Option<String>,
    /// View token size M.
    #[arg(long)]
    pub tokens: Option<usize>,
    /// Drop the 1/√C attention logit scale.
    #[arg(long)]
    pub no_attn_scale: bool,
}

impl ModelFlags {
    fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        if let Some(f) = &self.fusion {
            o.push(format!("model.fusion=\"{f}\""));
        }
        if let Some(a) = &self.aggregate {
            o.push(format!("model.aggregate=\"{a}\""));
        }
        if let Some(m) = self.tokens {
            o.push(format!("model.token_rows={m}"));
        }
        if self.no_attn_scale {
            o.push("model.attn_scale=false".into());
        }
        o
    }
}

#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Poly learning-rate decay instead of a constant rate.
    #[arg(long)]
    pub poly: bool,
}

impl TrainFlags {
    fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        if let Some(v) = self.steps {
            o.push(format!("train.steps={v}"));
        }
        if let Some(v) = self.lr {
            o.push(format!("train.lr={v}"));
        }
        if let Some(v) = self.momentum {
            o.push(format!("train.momentum={v}"));
        }
        if let Some(v) = self.weight_decay {
            o.push(format!("train.weight_decay={v}"));
        }
        if self.poly {
            o.push("train.schedule=\"poly\"".into());
        }
        o
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the lattice and rotated kernel points.
    DumpKernel {
        /// Kernel size K (odd).
        #[arg(long = "K", default_value_t = 3)]
        k: usize,
        /// Angle triple in degrees, e.g. 45,0,0. Repeatable; defaults to the config's rotations.
        #[arg(long = "deg", value_parser = parse_triple, allow_hyphen_values = true)]
        deg: Vec<[f64; 3]>,
    },
    /// Write V and the synthetic-view maps of a scene as CVST files.
    DumpViews {
        #[command(flatten)]
        model: ModelFlags,
        /// Scene directory; a scene is generated from the seed when absent.
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Write the view tokens, the overall token and the augmented maps.
    DumpTokens {
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// all | tensor | mvfs | cvtr | pipeline
        #[arg(long, default_value = "all")]
        module: String,
    },
    /// Train on one synthetic scene and report loss and metrics.
    TrainToy {
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Score predictions (or a checkpoint) against a scene.
    Eval {
        #[arg(long)]
        scene: Option<PathBuf>,
        /// CVST label volume of predicted classes.
        #[arg(long, conflicts_with = "checkpoint")]
        pred: Option<PathBuf>,
        /// Checkpoint directory written by train-toy.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and score a grid of variants on held-out synthetic scenes.
    Ablate {
        /// components | views | fusion | tokens | all
        #[arg(long, default_value = "all")]
        grid: String,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Generate a synthetic scene.
    GenScene {
        /// Number of furniture boxes.
        #[arg(long)]
        boxes: Option<usize>,
    },
}

fn parse_triple(s: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated angles, got `{s}`"));
    }
    let mut out = [0.0f64; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|e| format!("`{p}`: {e}"))?;
        if !o.is_finite() {
            return Err(format!("`{p}` is not finite"));
        }
    }
    Ok(out)
}

struct Run {
    config: RunConfig,
    out: PathBuf,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_text(&self, name: &str, text: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        self.write_text(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    fn write_tensor(&self, name: &str, t: &Tensor) -> Result<PathBuf> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_tensor(t, &p)?;
        Ok(p)
    }

    fn scene_params(&self) -> SceneParams {
        SceneParams {
            extents: self.config.model.volume,
            num_classes: self.config.model.num_classes,
            box_count: self.config.scene.box_count,
            label_noise: self.config.scene.label_noise,
        }
    }

    /// Loads `dir` or generates the run's scene and stores it under `scene/`.
    fn scene(&self, dir: Option<&Path>) -> Result<SceneSample> {
        if let Some(d) = dir {
            let (s, _) = load_scene(d)?;
            let m = &self.config.model;
            if s.extents != m.volume || s.num_classes != m.num_classes {
                return Err(Error::Config(format!(
                    "scene {:?} with {} classes does not match config {:?} with {}",
                    s.extents, s.num_classes, m.volume, m.num_classes
                )));
            }
            return Ok(s);
        }
        let p = self.scene_params();
        let seed = self.config.model.seed;
        let (s, attempts) = generate_scene_with_attempts(&p, seed)?;
        save_scene(
            &self.path("scene"),
            &s,
            &SceneOrigin {
                seed,
                attempts,
                box_count: p.box_count,
                label_noise: p.label_noise,
            },
        )?;
        Ok(s)
    }
}

fn resolve_seed(cli_seed: Option<u64>) -> Result<Option<u64>> {
    if cli_seed.is_some() {
        return Ok(cli_seed);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// File config (or preset), then `--set`, then subcommand flags, then seed.
fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig {
            model: ModelConfig::preset(&cli.preset)?,
            ..RunConfig::default()
        },
    };
    let mut overrides = cli.set.clone();
    match &cli.command {
        Command::DumpViews { model, .. } | Command::DumpTokens { model, .. } => {
            overrides.extend(model.overrides())
        }
        Command::TrainToy { model, train, .. } | Command::Ablate { model, train, .. } => {
            overrides.extend(model.overrides());
            overrides.extend(train.overrides());
        }
        Command::GenScene { boxes: Some(b) } => overrides.push(format!("scene.box_count={b}")),
        _ => {}
    }
    if !overrides.is_empty() {
        base = base.with_overrides(&overrides)?;
    }
    if let Some(seed) = resolve_seed(cli.seed)? {
        base.model.seed = seed;
    }
    base.validate()?;
    Ok(base)
}

fn dump_kernel(run: &Run, k: usize, deg: &[[f64; 3]]) -> Result<()> {
    let lattice = build_lattice(k).map_err(|e| Error::Config(e.to_string()))?;
    let angles = if deg.is_empty() {
        run.config.model.rotations.clone()
    } else {
        deg.to_vec()
    };
    let views: Vec<_> = angles
        .iter()
        .map(|a| rotate_kernel(&lattice, &RotationSpec::from_angles(*a)))
        .collect();
    let table = kernel_table(&lattice, &views);
    print!("{table}");
    run.write_text("kernel.txt", &table)?;
    let json_views: Vec<_> = views
        .iter()
        .map(|v| {
            json!({
                "angles": v.spec.angles,
                "matrix": v.spec.matrix,
                "lattice_exact": v.lattice_exact(),
                "points": v.points(),
            })
        })
        .collect();
    run.write_json(
        "kernel.json",
        &json!({ "K": k, "lattice": lattice.points(), "views": json_views }),
    )?;
    Ok(())
}

fn view_sidecar(model: &Model, files: &[String], shape: &[usize]) -> serde_json::Value {
    let kernels: Vec<_> = match &model.mvfs {
        Some(layer) => layer
            .views()
            .iter()
            .map(|v| json!({"angles": v.spec.angles, "matrix": v.spec.matrix, "lattice_exact": v.lattice_exact()}))
            .collect(),
        None => vec![json!({"angles": [0.0, 0.0, 0.0], "identity": true})],
    };
    json!({ "shape": shape, "files": files, "views": kernels })
}

fn dump_views(run: &Run, scene: Option<&Path>) -> Result<()> {
    let s = run.scene(scene)?;
    let model = Model::new(&run.config.model)?;
    let v = model.encode(&s.semantic, &s.geometric)?;
    run.write_tensor("views/original.cvst", &v)?;
    let views = model.views(&v)?;
    let mut files = Vec::new();
    for (r, t) in views.iter().enumerate() {
        let name = format!("view{r}.cvst");
        run.write_tensor(&format!("views/{name}"), t)?;
        files.push(name);
    }
    run.write_json("views/views.json", &view_sidecar(&model, &files, v.shape()))?;
    println!(
        "wrote {} synthetic views of shape {:?} to {}",
        views.len(),
        v.shape(),
        run.path("views").display()
    );
    Ok(())
}

fn dump_tokens(run: &Run, scene: Option<&Path>) -> Result<()> {
    let s = run.scene(scene)?;
    let model = Model::new(&run.config.model)?;
    let cvtr = model
        .cvtr
        .as_ref()
        .ok_or_else(|| Error::Config("dump-tokens needs model.cvtr=true".into()))?;
    let v = model.encode(&s.semantic, &s.geometric)?;
    let views = model.views(&v)?;
    let set = cvtr.tokens(&views)?;
    for (r, t) in set.tokens().iter().enumerate() {
        run.write_tensor(&format!("tokens/token{r}.cvst"), t)?;
    }
    run.write_tensor("tokens/overall.cvst", set.concatenated())?;
    let (augmented, _) = cvtr.forward(&views)?;
    for (r, t) in augmented.iter().enumerate() {
        run.write_tensor(&format!("tokens/augmented{r}.cvst"), t)?;
    }
    run.write_json(
        "tokens/tokens.json",
        &json!({
            "fusion": cvtr.scheme.to_string(),
            "token_rows": run.config.model.token_rows,
            "views": set.tokens().len(),
            "token_shape": set.tokens()[0].shape(),
            "overall_shape": set.concatenated().shape(),
        }),
    )?;
    println!(
        "wrote {} view tokens {:?} and overall token {:?} ({})",
        set.tokens().len(),
        set.tokens()[0].shape(),
        set.concatenated().shape(),
        cvtr.scheme
    );
    Ok(())
}

/// Returns whether every check passed.
fn gradcheck(run: &Run, module: &str) -> Result<bool> {
    let module: CheckModule = module.parse()?;
    let reports = run_checks(module, run.config.model.seed)?;
    for r in &reports {
        println!("{}", serde_json::to_string(r)?);
    }
    run.write_json("gradcheck.json", &reports)?;
    Ok(reports.iter().all(|r| r.pass))
}

fn save_checkpoint(run: &Run, model: &Model) -> Result<()> {
    let mut names = Vec::new();
    for (name, t) in parameters(model) {
        run.write_tensor(&format!("checkpoint/{name}.cvst"), &t)?;
        names.push(name);
    }
    run.write_json(
        "checkpoint/checkpoint.json",
        &json!({ "model": model.config, "parameters": names }),
    )?;
    Ok(())
}

fn load_checkpoint(dir: &Path) -> Result<Model> {
    let path = dir.join("checkpoint.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let config: ModelConfig = serde_json::from_value(v["model"].clone())?;
    let mut model = Model::new(&config)?;
    let names: Vec<String> = serde_json::from_value(v["parameters"].clone())?;
    let values = names
        .iter()
        .map(|n| read_tensor(dir.join(format!("{n}.cvst"))))
        .collect::<Result<Vec<_>>>()?;
    load_parameters(&mut model, &values)?;
    model.zero_grad();
    Ok(model)
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    #[serde(flatten)]
    report: &'a MetricReport,
    per_class_iou_named: std::collections::BTreeMap<String, f64>,
}

fn write_metrics(run: &Run, name: &str, report: &MetricReport, num_classes: usize) -> Result<()> {
    run.write_json(
        name,
        &MetricsFile {
            report,
            per_class_iou_named: named_ious(report, num_classes),
        },
    )?;
    Ok(())
}

fn train_cmd(run: &Run, scene: Option<&Path>) -> Result<()> {
    let s = run.scene(scene)?;
    let (model, log) = train_toy(
        std::slice::from_ref(&s),
        &run.config.model,
        &run.config.train,
    )?;
    log.write_jsonl(&run.path("train_log.jsonl"))?;
    let curve: Vec<f64> = log.steps.iter().map(|r| r.loss).collect();
    run.write_json(
        "loss_curve.json",
        &json!({ "loss": curve, "final_loss": log.final_loss }),
    )?;
    write_metrics(run, "metrics.json", &log.final_metrics, s.num_classes)?;
    let pred = model.predict(&s)?;
    run.write_tensor("predictions.cvst", &labels_tensor(s.extents, &pred)?)?;
    save_checkpoint(run, &model)?;
    println!(
        "{}",
        json!({
            "steps": log.steps.len(),
            "final_loss": log.final_loss,
            "sc_iou": log.final_metrics.sc_iou,
            "ssc_miou": log.final_metrics.mean_iou,
        })
    );
    Ok(())
}

fn eval_cmd(
    run: &Run,
    scene: Option<&Path>,
    pred: Option<&Path>,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let s = run.scene(scene)?;
    let labels = match (pred, checkpoint) {
        (Some(p), _) => {
            let t = read_tensor(p)?;
            if t.shape() != s.extents {
                return Err(Error::Dimension(format!(
                    "prediction {:?} does not match scene {:?}",
                    t.shape(),
                    s.extents
                )));
            }
            labels_from_tensor(&t)?
        }
        (None, Some(c)) => load_checkpoint(c)?.predict(&s)?,
        (None, None) => return Err(Error::Config("eval needs --pred or --checkpoint".into())),
    };
    let report = evaluate(&labels, &s)?;
    write_metrics(run, "metrics.json", &report, s.num_classes)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn slug(variant: &str) -> String {
    variant
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '=' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn ablate_cmd(run: &Run, grid: &str) -> Result<()> {
    let grids: Vec<Grid> = if grid == "all" {
        Grid::ALL.to_vec()
    } else {
        vec![grid.parse()?]
    };
    let base = &run.config.model;
    let variants: Vec<_> = grids.iter().flat_map(|&g| grid_variants(g, base)).collect();
    for (name, cfg) in &variants {
        cfg.validate()
            .map_err(|e| Error::Config(format!("variant {name}: {e}")))?;
    }
    let seed = base.seed;
    let train_set = scene_set(&run.config, seed, 1, run.config.scene.train_scenes.max(1))?;
    let eval_set = scene_set(&run.config, seed, 2, run.config.scene.eval_scenes.max(1))?;
    for (i, s) in eval_set.iter().enumerate() {
        save_scene(
            &run.path(&format!("eval_scenes/scene{i}")),
            s,
            &SceneOrigin {
                seed,
                attempts: 0,
                box_count: run.config.scene.box_count,
                label_noise: run.config.scene.label_noise,
            },
        )?;
    }
    let rows = ablate(&variants, &run.config.train, &train_set, &eval_set)?;
    let mut buf = Vec::new();
    write_report_csv(&rows, base.num_classes, &mut buf)?;
    let csv = String::from_utf8(buf).expect("csv is utf-8");
    run.write_text("ablation.csv", &csv)?;
    for row in &rows {
        for (i, p) in row.predictions.iter().enumerate() {
            run.write_tensor(
                &format!("predictions/{}/scene{i}.cvst", slug(&row.variant)),
                &labels_tensor(base.volume, p)?,
            )?;
        }
    }
    run.write_json("ablation.json", &rows)?;
    print!("{csv}");
    Ok(())
}

fn gen_scene(run: &Run) -> Result<()> {
    let p = run.scene_params();
    let seed = run.config.model.seed;
    let (s, attempts) = generate_scene_with_attempts(&p, seed)?;
    let m = save_scene(
        &run.path("scene"),
        &s,
        &SceneOrigin {
            seed,
            attempts,
            box_count: p.box_count,
            label_noise: p.label_noise,
        },
    )?;
    println!("{}", serde_json::to_string(&m)?);
    Ok(())
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let config = match effective_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let run = Run {
        config,
        out: cli.out.clone(),
    };
    if let Err(e) = run.write_text("config.json", &run.config.to_json()) {
        eprintln!("error: {e}");
        return 2;
    }
    let result = match &cli.command {
        Command::DumpKernel { k, deg } => dump_kernel(&run, *k, deg).map(|_| true),
        Command::DumpViews { scene, .. } => dump_views(&run, scene.as_deref()).map(|_| true),
        Command::DumpTokens { scene, .. } => dump_tokens(&run, scene.as_deref()).map(|_| true),
        Command::Gradcheck { module } => gradcheck(&run, module),
        Command::TrainToy { scene, .. } => train_cmd(&run, scene.as_deref()).map(|_| true),
        Command::Eval {
            scene,
            pred,
            checkpoint,
        } => eval_cmd(
            &run,
            scene.as_deref(),
            pred.as_deref(),
            checkpoint.as_deref(),
        )
        .map(|_| true),
        Command::Ablate { grid, .. } => ablate_cmd(&run, grid).map(|_| true),
        Command::GenScene { .. } => gen_scene(&run).map(|_| true),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => {
            eprintln!("gradient check failed");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
