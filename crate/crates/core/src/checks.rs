//! Gradient-check suites run by the `gradcheck` subcommand and the tests.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::cvtr::{
    CrossViewTransformer, CvtrOp, CvtrShape, EncodeViewOp, EncoderShape, FusionOp, FusionParams,
    FusionScheme, TokenMixing, ViewEncoderParams,
};
use crate::error::{Error, Result};
use crate::gradcheck::{
    grad_check, CrossEntropyOp, GeluOp, GradCheckOptions, GradCheckReport, MatmulOp, SoftmaxOp,
};
use crate::model::{Model, ModelOp};
use crate::mvfs::{InterpolateOp, MvfsLayer, SynthViewOp};
use crate::nn::Module;
use crate::rng::SeededRng;
use crate::scene::generate_scene;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckModule {
    All,
    Tensor,
    Mvfs,
    Cvtr,
    Pipeline,
}

impl std::str::FromStr for CheckModule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "tensor" => Ok(Self::Tensor),
            "mvfs" => Ok(Self::Mvfs),
            "cvtr" => Ok(Self::Cvtr),
            "pipeline" => Ok(Self::Pipeline),
            other => Err(Error::Config(format!("unknown module `{other}`"))),
        }
    }
}

/// Toy pipeline configuration used by the end-to-end check.
pub fn pipeline_check_config(seed: u64) -> ModelConfig {
    ModelConfig {
        channels: 8,
        seed,
        ..ModelConfig::toy()
    }
}

/// Probes per input tensor for the end-to-end check.
pub const PIPELINE_PROBES: usize = 24;

/// Replaces every all-zero parameter (zero-initialised residual branches,
/// biases) with small random values so that no gradient vanishes
/// identically, which would leave finite differences comparing noise.
pub fn fill_zero_params(m: &mut dyn Module, std: f64, rng: &mut SeededRng) {
    m.visit_mut("", &mut |_, t| {
        if t.data().iter().all(|&v| v == 0.0) {
            *t = Tensor::randn(t.shape(), std, rng);
        }
    });
}

fn opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    }
}

pub fn tensor_checks(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = SeededRng::derive(seed, 1);
    let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
    let x = Tensor::randn(&[2, 5], 1.0, &mut rng);
    let logits = Tensor::randn(&[4, 3], 1.0, &mut rng);
    Ok(vec![
        grad_check(&MatmulOp, &[a, b], opts(seed))?,
        grad_check(&SoftmaxOp { axis: 1 }, std::slice::from_ref(&x), opts(seed))?,
        grad_check(
            &CrossEntropyOp {
                labels: vec![0, 2, usize::MAX, 1],
                ignore: Some(usize::MAX),
            },
            &[logits],
            opts(seed),
        )?,
        grad_check(&GeluOp, &[x], opts(seed))?,
    ])
}

pub fn mvfs_checks(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = SeededRng::derive(seed, 2);
    let volume = Tensor::randn(&[4, 3, 4, 2], 1.0, &mut rng);
    let mut out = vec![grad_check(
        &InterpolateOp {
            position: [1.3, 0.6, 2.25],
        },
        std::slice::from_ref(&volume),
        opts(seed),
    )?];
    let layer = MvfsLayer::new(
        3,
        &[
            [0.0; 3],
            [45.0, 0.0, 0.0],
            [90.0, 0.0, 0.0],
            [30.0, 20.0, 10.0],
        ],
        2,
        3,
        &mut rng,
    )?;
    for view in 0..layer.num_views() {
        let inputs = [volume.clone(), layer.weights[view].clone()];
        let op = SynthViewOp {
            layer: layer.clone(),
            view,
        };
        out.push(grad_check(&op, &inputs, opts(seed))?);
    }
    Ok(out)
}

pub fn cvtr_checks(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = SeededRng::derive(seed, 3);
    let shape = EncoderShape {
        token_rows: 2,
        voxels: 8,
        channels: 4,
        depth: 1,
        heads: 1,
    };
    let mut out = Vec::new();
    for mixing in [TokenMixing::Concat, TokenMixing::PoolAdd] {
        let mut p = ViewEncoderParams::new(shape, mixing, &mut rng)?;
        fill_zero_params(&mut p, 0.3, &mut rng);
        let view = Tensor::randn(&[2, 2, 2, 4], 1.0, &mut rng);
        let inputs = [view, p.token.clone(), p.position.clone()];
        out.push(grad_check(
            &EncodeViewOp {
                params: p,
                attn_scale: true,
            },
            &inputs,
            opts(seed),
        )?);
    }
    let mut f = FusionParams::new(4, &mut rng);
    fill_zero_params(&mut f, 0.3, &mut rng);
    let view = Tensor::randn(&[2, 2, 2, 4], 1.0, &mut rng);
    let token = Tensor::randn(&[4, 4], 1.0, &mut rng);
    let inputs = [view, token, f.query.weight.clone(), f.out.weight.clone()];
    out.push(grad_check(
        &FusionOp {
            params: f,
            attn_scale: true,
        },
        &inputs,
        opts(seed),
    )?);
    for scheme in [
        FusionScheme::AllForOneTokens,
        FusionScheme::AllForOneFeatures,
        FusionScheme::All,
    ] {
        let mut t = CrossViewTransformer::new(
            CvtrShape {
                views: 3,
                encoder: shape,
            },
            scheme,
            TokenMixing::Concat,
            true,
            &mut rng,
        )?;
        fill_zero_params(&mut t, 0.3, &mut rng);
        let views: Vec<Tensor> = (0..3)
            .map(|_| Tensor::randn(&[2, 2, 2, 4], 1.0, &mut rng))
            .collect();
        out.push(grad_check(&CvtrOp { cvtr: t }, &views, opts(seed))?);
    }
    Ok(out)
}

pub fn pipeline_checks(seed: u64) -> Result<Vec<GradCheckReport>> {
    let cfg = pipeline_check_config(seed);
    let mut model = Model::new(&cfg)?;
    fill_zero_params(&mut model, 0.1, &mut SeededRng::derive(seed, 4));
    let sample = generate_scene(seed, cfg.volume, cfg.num_classes, 3)?;
    let op = ModelOp { model };
    let inputs = op.inputs(&sample.semantic, &sample.geometric);
    let options = GradCheckOptions {
        max_probes: Some(PIPELINE_PROBES),
        ..opts(seed)
    };
    Ok(vec![grad_check(&op, &inputs, options)?])
}

pub fn run_checks(module: CheckModule, seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    if matches!(module, CheckModule::All | CheckModule::Tensor) {
        out.extend(tensor_checks(seed)?);
    }
    if matches!(module, CheckModule::All | CheckModule::Mvfs) {
        out.extend(mvfs_checks(seed)?);
    }
    if matches!(module, CheckModule::All | CheckModule::Cvtr) {
        out.extend(cvtr_checks(seed)?);
    }
    if matches!(module, CheckModule::All | CheckModule::Pipeline) {
        out.extend(pipeline_checks(seed)?);
    }
    Ok(out)
}
