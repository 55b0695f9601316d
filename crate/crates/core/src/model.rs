//! End-to-end toy completion network.
//!
//! `S` and `D` are projected to `C` channels and added; stride-2 residual
//! blocks reduce the volume to the original-view map `V`; MVFS produces the
//! synthetic views, the cross-view transformer augments them, and the maps
//! are summed (or concatenated). Transposed convolutions bring the result
//! back to volume resolution, each stage adding the encoder activation of
//! the same resolution, and a two-layer per-voxel head emits class logits.

use crate::config::{Aggregate, ModelConfig};
use crate::cvtr::{CrossViewTransformer, CvtrCache, CvtrShape, EncoderShape};
use crate::error::{Error, Result};
use crate::mvfs::MvfsLayer;
use crate::nn::{join, Conv3d, ConvTranspose3d, Linear, Module};
use crate::rng::SeededRng;
use crate::scene::{SceneSample, IGNORE};
use crate::tensor::{cross_entropy_with_grad, gelu, gelu_backward, Tensor};

/// `gelu(conv3×3×3 s2(x)) + conv1×1×1 s2(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DownBlock {
    pub conv: Conv3d,
    pub skip: Conv3d,
}

impl Module for DownBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.skip.visit(&join(prefix, "skip"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.skip.visit_mut(&join(prefix, "skip"), f);
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub sem_proj: Linear,
    pub geo_proj: Linear,
    pub down: Vec<DownBlock>,
    pub mvfs: Option<MvfsLayer>,
    pub cvtr: Option<CrossViewTransformer>,
    /// `up[i]` maps stage `i + 1` to stage `i`.
    pub up: Vec<ConvTranspose3d>,
    pub head_hidden: Linear,
    pub head_out: Linear,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    semantic: Tensor,
    geometric: Tensor,
    /// Encoder activations `e_0 … e_n`; `e_n` is `V`.
    enc: Vec<Tensor>,
    /// Pre-activation of each down block's main branch.
    down_pre: Vec<Tensor>,
    views: Vec<Tensor>,
    cvtr: Option<CvtrCache>,
    /// Decoder activations `u_0 … u_n`; `u_n` is the aggregated map.
    dec: Vec<Tensor>,
    /// Pre-activation of each up stage.
    up_pre: Vec<Tensor>,
    head_pre: Tensor,
    head_act: Tensor,
}

/// Channel-wise concatenation of equally shaped `(H, W, D, C)` maps.
pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
    let [h, w, d, c] = parts[0].dims4()?;
    if parts.iter().any(|p| p.shape() != parts[0].shape()) {
        return Err(Error::Dimension("concatenated maps differ in shape".into()));
    }
    let r = parts.len();
    let mut data = Vec::with_capacity(h * w * d * c * r);
    for v in 0..h * w * d {
        for p in parts {
            data.extend_from_slice(&p.data()[v * c..(v + 1) * c]);
        }
    }
    Tensor::new(vec![h, w, d, c * r], data)
}

pub fn split_channels(t: &Tensor, parts: usize) -> Result<Vec<Tensor>> {
    let [h, w, d, total] = t.dims4()?;
    if parts == 0 || total % parts != 0 {
        return Err(Error::Dimension(format!(
            "cannot split {total} channels {parts} ways"
        )));
    }
    let c = total / parts;
    (0..parts)
        .map(|r| {
            let mut data = Vec::with_capacity(h * w * d * c);
            for v in 0..h * w * d {
                data.extend_from_slice(&t.data()[v * total + r * c..v * total + (r + 1) * c]);
            }
            Tensor::new(vec![h, w, d, c], data)
        })
        .collect()
}

impl Model {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config
            .validate()
            .map_err(|e| Error::Dimension(e.to_string()))?;
        let mut rng = SeededRng::new(config.seed);
        let c = config.channels;
        let sem_proj = Linear::new(config.num_classes, c, &mut rng);
        let geo_proj = Linear::new(1, c, &mut rng);
        let down = (0..config.stages())
            .map(|_| DownBlock {
                conv: Conv3d::new(c, c, 3, 2, 1, &mut rng),
                skip: Conv3d::new(c, c, 1, 2, 0, &mut rng),
            })
            .collect();
        let mvfs = if config.mvfs {
            Some(MvfsLayer::new(
                config.kernel_size,
                &config.rotations,
                c,
                c,
                &mut rng,
            )?)
        } else {
            None
        };
        let cvtr = if config.cvtr {
            let shape = CvtrShape {
                views: config.branch_count(),
                encoder: EncoderShape {
                    token_rows: config.token_rows,
                    voxels: config.feature_voxels(),
                    channels: c,
                    depth: config.encoder_depth,
                    heads: config.encoder_heads,
                },
            };
            Some(CrossViewTransformer::new(
                shape,
                config.fusion,
                config.token_mixing,
                config.attn_scale,
                &mut rng,
            )?)
        } else {
            None
        };
        let agg_c = match config.aggregate {
            Aggregate::Sum => c,
            Aggregate::Concat => c * config.branch_count(),
        };
        let stages = config.stages();
        let up = (0..stages)
            .map(|i| ConvTranspose3d::new(if i + 1 == stages { agg_c } else { c }, c, &mut rng))
            .collect();
        let head_in = if stages == 0 { agg_c } else { c };
        Ok(Self {
            config: config.clone(),
            sem_proj,
            geo_proj,
            down,
            mvfs,
            cvtr,
            up,
            head_hidden: Linear::new(head_in, c, &mut rng),
            head_out: Linear::zeros(c, config.num_classes),
        })
    }

    fn check_inputs(&self, semantic: &Tensor, geometric: &Tensor) -> Result<()> {
        let [h, w, d] = self.config.volume;
        if semantic.shape() != [h, w, d, self.config.num_classes] {
            return Err(Error::Dimension(format!(
                "semantic volume {:?} does not match config {:?}",
                semantic.shape(),
                [h, w, d, self.config.num_classes]
            )));
        }
        if geometric.shape() != [h, w, d, 1] {
            return Err(Error::Dimension(format!(
                "geometric volume {:?} does not match config {:?}",
                geometric.shape(),
                [h, w, d, 1]
            )));
        }
        Ok(())
    }

    /// Original-view map `V`.
    pub fn encode(&self, semantic: &Tensor, geometric: &Tensor) -> Result<Tensor> {
        self.check_inputs(semantic, geometric)?;
        let mut x = self
            .sem_proj
            .forward(semantic)?
            .add(&self.geo_proj.forward(geometric)?)?;
        for block in &self.down {
            x = gelu(&block.conv.forward(&x)?).add(&block.skip.forward(&x)?)?;
        }
        Ok(x)
    }

    /// Synthetic-view maps `V'_r` (or `[V]` with MVFS off).
    pub fn views(&self, v: &Tensor) -> Result<Vec<Tensor>> {
        match &self.mvfs {
            Some(layer) => (0..layer.num_views())
                .map(|r| layer.forward_view(v, r))
                .collect(),
            None => Ok(vec![v.clone()]),
        }
    }

    /// Logits `(H₀, W₀, D₀, numClasses)` and the activations needed by
    /// [`Model::backward`].
    pub fn forward_cached(
        &self,
        semantic: &Tensor,
        geometric: &Tensor,
    ) -> Result<(Tensor, ForwardCache)> {
        self.check_inputs(semantic, geometric)?;
        let e0 = self
            .sem_proj
            .forward(semantic)?
            .add(&self.geo_proj.forward(geometric)?)?;
        let mut enc = vec![e0];
        let mut down_pre = Vec::new();
        for block in &self.down {
            let x = enc.last().expect("nonempty");
            let pre = block.conv.forward(x)?;
            let next = gelu(&pre).add(&block.skip.forward(x)?)?;
            down_pre.push(pre);
            enc.push(next);
        }
        let v = enc.last().expect("nonempty");
        let mut views = self.views(v)?;
        let synthetic = views.clone();
        let cvtr_cache = match &self.cvtr {
            Some(t) => {
                let (out, cache) = t.forward(&views)?;
                views = out;
                Some(cache)
            }
            None => None,
        };
        let agg = match self.config.aggregate {
            Aggregate::Sum => {
                let mut s = views[0].clone();
                for other in &views[1..] {
                    s.add_assign(other)?;
                }
                s
            }
            Aggregate::Concat => concat_channels(&views)?,
        };
        let n = self.up.len();
        let mut dec = vec![agg];
        let mut up_pre = vec![];
        for i in (0..n).rev() {
            let u = dec.last().expect("nonempty");
            let pre = self.up[i].forward(u)?.add(&enc[i])?;
            dec.push(gelu(&pre));
            up_pre.push(pre);
        }
        dec.reverse();
        up_pre.reverse();
        let head_pre = self.head_hidden.forward(&dec[0])?;
        let head_act = gelu(&head_pre);
        let logits = self
            .head_out
            .forward(&head_act)?
            .ensure_finite("model_forward")?;
        Ok((
            logits,
            ForwardCache {
                semantic: semantic.clone(),
                geometric: geometric.clone(),
                enc,
                down_pre,
                views: synthetic,
                cvtr: cvtr_cache,
                dec,
                up_pre,
                head_pre,
                head_act,
            },
        ))
    }

    pub fn forward(&self, sample: &SceneSample) -> Result<Tensor> {
        self.forward_cached(&sample.semantic, &sample.geometric)
            .map(|(l, _)| l)
    }

    /// Back-propagates `d_logits`, accumulating parameter gradients; returns
    /// the gradients w.r.t. `S` and `D`.
    pub fn backward(
        &mut self,
        cache: &ForwardCache,
        d_logits: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let d_act = self.head_out.backward(&cache.head_act, d_logits)?;
        let d_pre = gelu_backward(&cache.head_pre, &d_act)?;
        let mut d_u = self.head_hidden.backward(&cache.dec[0], &d_pre)?;
        let mut d_enc: Vec<Option<Tensor>> = vec![None; cache.enc.len()];
        for i in 0..self.up.len() {
            let d_p = gelu_backward(&cache.up_pre[i], &d_u)?;
            d_u = self.up[i].backward(&cache.dec[i + 1], &d_p)?;
            d_enc[i] = Some(d_p);
        }
        let r = cache.views.len();
        let mut d_views = match self.config.aggregate {
            Aggregate::Sum => vec![d_u; r],
            Aggregate::Concat => split_channels(&d_u, r)?,
        };
        if let (Some(t), Some(c)) = (self.cvtr.as_mut(), cache.cvtr.as_ref()) {
            d_views = t.backward(c, &d_views)?;
        }
        let v = cache.enc.last().expect("nonempty");
        let d_v = match self.mvfs.as_mut() {
            Some(layer) => {
                let mut acc: Option<Tensor> = None;
                for (k, g) in d_views.iter().enumerate() {
                    let d = layer.backward_view(v, k, g)?;
                    match acc.as_mut() {
                        Some(a) => a.add_assign(&d)?,
                        None => acc = Some(d),
                    }
                }
                acc.expect("at least one view")
            }
            None => d_views.pop().expect("one view"),
        };
        let last = cache.enc.len() - 1;
        match d_enc[last].as_mut() {
            Some(d) => d.add_assign(&d_v)?,
            None => d_enc[last] = Some(d_v),
        }
        for i in (0..self.down.len()).rev() {
            let d_next = d_enc[i + 1].take().expect("gradient reaches every stage");
            let x = &cache.enc[i];
            let block = &mut self.down[i];
            let d_main = gelu_backward(&cache.down_pre[i], &d_next)?;
            let mut d_x = block.conv.backward(x, &d_main)?;
            d_x.add_assign(&block.skip.backward(x, &d_next)?)?;
            match d_enc[i].as_mut() {
                Some(d) => d.add_assign(&d_x)?,
                None => d_enc[i] = Some(d_x),
            }
        }
        let d_e0 = d_enc[0].take().expect("input gradient");
        let d_s = self.sem_proj.backward(&cache.semantic, &d_e0)?;
        let d_d = self.geo_proj.backward(&cache.geometric, &d_e0)?;
        Ok((d_s, d_d))
    }

    /// Mean cross-entropy over the sample's valid voxels and its gradients.
    pub fn loss_and_grad(&mut self, sample: &SceneSample) -> Result<f64> {
        let (logits, cache) = self.forward_cached(&sample.semantic, &sample.geometric)?;
        let shape = logits.shape().to_vec();
        let flat = logits.reshape(&[sample.voxels(), self.config.num_classes])?;
        let (loss, d) = cross_entropy_with_grad(&flat, &sample.training_labels(), Some(IGNORE))?;
        let d = d.reshape(&shape)?;
        self.backward(&cache, &d)?;
        Ok(loss)
    }

    pub fn loss(&self, sample: &SceneSample) -> Result<f64> {
        let logits = self.forward(sample)?;
        let flat = logits.reshape(&[sample.voxels(), self.config.num_classes])?;
        crate::tensor::cross_entropy(&flat, &sample.training_labels(), Some(IGNORE))
    }

    /// Arg-max class per voxel.
    pub fn predict(&self, sample: &SceneSample) -> Result<Vec<usize>> {
        Ok(argmax_labels(
            &self.forward(sample)?,
            self.config.num_classes,
        ))
    }
}

/// Arg-max over the last axis; ties resolve to the lowest class.
pub fn argmax_labels(logits: &Tensor, num_classes: usize) -> Vec<usize> {
    logits
        .data()
        .chunks(num_classes)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

impl Module for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.sem_proj.visit(&join(prefix, "sem_proj"), f);
        self.geo_proj.visit(&join(prefix, "geo_proj"), f);
        for (i, b) in self.down.iter().enumerate() {
            b.visit(&join(prefix, &format!("down{i}")), f);
        }
        if let Some(m) = &self.mvfs {
            m.visit(&join(prefix, "mvfs"), f);
        }
        if let Some(t) = &self.cvtr {
            t.visit(&join(prefix, "cvtr"), f);
        }
        for (i, u) in self.up.iter().enumerate() {
            u.visit(&join(prefix, &format!("up{i}")), f);
        }
        self.head_hidden.visit(&join(prefix, "head_hidden"), f);
        self.head_out.visit(&join(prefix, "head_out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.sem_proj.visit_mut(&join(prefix, "sem_proj"), f);
        self.geo_proj.visit_mut(&join(prefix, "geo_proj"), f);
        for (i, b) in self.down.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("down{i}")), f);
        }
        if let Some(m) = &mut self.mvfs {
            m.visit_mut(&join(prefix, "mvfs"), f);
        }
        if let Some(t) = &mut self.cvtr {
            t.visit_mut(&join(prefix, "cvtr"), f);
        }
        for (i, u) in self.up.iter_mut().enumerate() {
            u.visit_mut(&join(prefix, &format!("up{i}")), f);
        }
        self.head_hidden.visit_mut(&join(prefix, "head_hidden"), f);
        self.head_out.visit_mut(&join(prefix, "head_out"), f);
    }
}

/// Named parameter tensors in visiting order.
pub fn parameters(m: &dyn Module) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

/// Overwrites the parameters of `m` with `values` in visiting order.
pub fn load_parameters(m: &mut dyn Module, values: &[Tensor]) -> Result<()> {
    let mut i = 0;
    let mut err = None;
    m.visit_mut("", &mut |name, t| {
        match values.get(i) {
            Some(v) if v.shape() == t.shape() => *t = v.clone(),
            Some(v) => {
                err.get_or_insert_with(|| Error::shape_mismatch(name, t.shape(), v.shape()));
            }
            None => {
                err.get_or_insert_with(|| Error::Parameter(format!("missing value for `{name}`")));
            }
        }
        i += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if i != values.len() {
        return Err(Error::Parameter(format!(
            "{} values for {i} parameters",
            values.len()
        )));
    }
    Ok(())
}

/// Attention key biases shift every logit of a query by the same amount,
/// so their gradient is identically zero and finite differences only see
/// rounding noise; they are left out of the checked inputs.
pub fn structurally_zero_grad(name: &str) -> bool {
    name.ends_with("key.bias")
}

/// Full model as a checkable op over `[S, D, parameters…]`.
pub struct ModelOp {
    pub model: Model,
}

impl ModelOp {
    pub fn inputs(&self, semantic: &Tensor, geometric: &Tensor) -> Vec<Tensor> {
        let mut v = vec![semantic.clone(), geometric.clone()];
        v.extend(
            parameters(&self.model)
                .into_iter()
                .filter(|(n, _)| !structurally_zero_grad(n))
                .map(|(_, t)| t),
        );
        v
    }

    fn with(&self, inputs: &[Tensor]) -> Result<Model> {
        let mut m = self.model.clone();
        let mut it = inputs[2..].iter();
        m.visit_mut("", &mut |name, t| {
            if !structurally_zero_grad(name) {
                if let Some(v) = it.next() {
                    *t = v.clone();
                }
            }
        });
        Ok(m)
    }
}

impl crate::gradcheck::Differentiable for ModelOp {
    fn name(&self) -> String {
        "model_forward".into()
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        self.with(inputs)?
            .forward_cached(&inputs[0], &inputs[1])
            .map(|(l, _)| l)
    }
    fn backward(&self, inputs: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        let mut m = self.with(inputs)?;
        m.zero_grad();
        let (_, cache) = m.forward_cached(&inputs[0], &inputs[1])?;
        let (ds, dd) = m.backward(&cache, g)?;
        let mut out = vec![ds, dd];
        m.visit("", &mut |name, t| {
            if !structurally_zero_grad(name) {
                out.push(t.grad_tensor());
            }
        });
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::x_rotations;
    use crate::cvtr::FusionScheme;
    use crate::gradcheck::{grad_check, GradCheckOptions};
    use crate::scene::generate_scene;

    fn tiny() -> ModelConfig {
        ModelConfig {
            volume: [4, 4, 4],
            feature: [2, 2, 2],
            channels: 2,
            num_classes: 3,
            rotations: x_rotations(&[0.0, 45.0]),
            token_rows: 2,
            ..ModelConfig::toy()
        }
    }

    fn random_inputs(c: &ModelConfig, seed: u64) -> (Tensor, Tensor) {
        let mut rng = SeededRng::new(seed);
        let [h, w, d] = c.volume;
        (
            Tensor::randn(&[h, w, d, c.num_classes], 1.0, &mut rng),
            Tensor::randn(&[h, w, d, 1], 1.0, &mut rng),
        )
    }

    // Zero-initialised branches (head output included) would otherwise
    // block every upstream gradient.
    fn randomize_outputs(m: &mut Model, seed: u64) {
        crate::checks::fill_zero_params(m, 0.1, &mut SeededRng::new(seed));
    }

    #[test]
    fn zero_network_loss_is_log_classes() {
        let cfg = ModelConfig::toy();
        let mut m = Model::new(&cfg).unwrap();
        m.visit_mut("", &mut |_, t| {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0)
        });
        let s = generate_scene(1, cfg.volume, cfg.num_classes, 2).unwrap();
        let loss = m.loss(&s).unwrap();
        assert!((loss - (cfg.num_classes as f64).ln()).abs() < 1e-10);
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let m = Model::new(&tiny()).unwrap();
        let bad = Tensor::zeros(&[4, 4, 2, 3]);
        let d = Tensor::zeros(&[4, 4, 4, 1]);
        assert!(matches!(
            m.forward_cached(&bad, &d),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn channel_concat_roundtrip() {
        let mut rng = SeededRng::new(2);
        let parts: Vec<Tensor> = (0..3)
            .map(|_| Tensor::randn(&[2, 1, 2, 2], 1.0, &mut rng))
            .collect();
        let cat = concat_channels(&parts).unwrap();
        assert_eq!(split_channels(&cat, 3).unwrap(), parts);
    }

    #[test]
    fn gradients_for_every_variant() {
        let variants: Vec<Box<dyn Fn(&mut ModelConfig)>> = vec![
            Box::new(|_| {}),
            Box::new(|c| c.aggregate = Aggregate::Concat),
            Box::new(|c| {
                c.mvfs = false;
                c.cvtr = false;
            }),
            Box::new(|c| c.fusion = FusionScheme::All),
            Box::new(|c| c.feature = [4, 4, 4]),
        ];
        for (i, tweak) in variants.iter().enumerate() {
            let mut cfg = tiny();
            tweak(&mut cfg);
            if cfg.feature == [4, 4, 4] {
                cfg.token_rows = 4;
            }
            let mut model = Model::new(&cfg).unwrap();
            randomize_outputs(&mut model, 9);
            let (s, d) = random_inputs(&cfg, 3);
            let op = ModelOp { model };
            let inputs = op.inputs(&s, &d);
            let opts = GradCheckOptions {
                max_probes: Some(300),
                ..GradCheckOptions::default()
            };
            let r = grad_check(&op, &inputs, opts).unwrap();
            let worst = r.scaled_errors.iter().copied().fold(0.0, f64::max);
            assert!(worst < 1e-4, "variant {i}: {r:?}");
        }
    }

    #[test]
    fn key_bias_gradient_vanishes() {
        let mut m = Model::new(&tiny()).unwrap();
        randomize_outputs(&mut m, 4);
        let (s, d) = random_inputs(&tiny(), 5);
        m.zero_grad();
        let (logits, cache) = m.forward_cached(&s, &d).unwrap();
        let g = Tensor::randn(logits.shape(), 1.0, &mut SeededRng::new(6));
        m.backward(&cache, &g).unwrap();
        let mut seen = 0;
        m.visit("", &mut |name, t| {
            if structurally_zero_grad(name) {
                seen += 1;
                assert!(
                    t.grad_tensor().data().iter().all(|v| v.abs() < 1e-12),
                    "{name}"
                );
            }
        });
        assert!(seen > 0);
    }

    #[test]
    fn parameter_roundtrip() {
        let mut m = Model::new(&tiny()).unwrap();
        let p: Vec<Tensor> = parameters(&m)
            .into_iter()
            .map(|(_, t)| t.scale(2.0))
            .collect();
        load_parameters(&mut m, &p).unwrap();
        let back: Vec<Tensor> = parameters(&m).into_iter().map(|(_, t)| t).collect();
        assert_eq!(back, p);
        assert!(load_parameters(&mut m, &p[1..]).is_err());
    }
}
