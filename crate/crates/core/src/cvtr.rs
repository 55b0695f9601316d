//! Cross-view transformer.
//!
//! Per-view encoders compress each synthetic-view map into an `M × C` view
//! token. The tokens of all views are stacked into an overall token `𝒯`
//! that serves as keys and values of a cross attention whose queries are
//! the voxels of one view; the attended features are projected and added
//! back onto that view.

use serde::{Deserialize, Serialize};

use crate::attention::{attention_backward, attention_forward, AttnProbs};
use crate::error::{Error, Result};
use crate::mvfs::{FeatureVolume, VolumeRole};
use crate::nn::{join, Linear, Module};
use crate::rng::SeededRng;
use crate::tensor::{gelu, gelu_backward, Tensor};

/// Std of the view and position embedding init.
pub const EMBEDDING_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FusionScheme {
    /// Keys and values are the stacked view tokens.
    #[default]
    #[serde(rename = "all-for-one-tokens")]
    AllForOneTokens,
    /// Keys and values are all synthetic-view voxels.
    #[serde(rename = "all-for-one-features")]
    AllForOneFeatures,
    /// One self-attention over the voxels of every view at once.
    #[serde(rename = "all")]
    All,
}

impl std::str::FromStr for FusionScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-for-one-tokens" | "tokens" => Ok(Self::AllForOneTokens),
            "all-for-one-features" | "features" => Ok(Self::AllForOneFeatures),
            "all" => Ok(Self::All),
            other => Err(Error::Parameter(format!("unknown fusion scheme `{other}`"))),
        }
    }
}

impl std::fmt::Display for FusionScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::AllForOneTokens => "all-for-one-tokens",
            Self::AllForOneFeatures => "all-for-one-features",
            Self::All => "all",
        })
    }
}

/// How projected voxel features reach the view embedding inside an encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenMixing {
    /// Token rows and voxel rows form one sequence for self-attention.
    #[default]
    Concat,
    /// Voxel features are mean-pooled and added to every token row;
    /// attention runs over the token rows only.
    PoolAdd,
}

/// Single encoder layer: self-attention then a GELU feed-forward, both residual.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub heads: usize,
}

#[derive(Debug, Clone)]
struct LayerCache {
    x: Tensor,
    xq: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    attn: Tensor,
    probs: AttnProbs,
    h: Tensor,
    f1: Tensor,
    g: Tensor,
}

impl EncoderLayer {
    pub fn new(c: usize, hidden: usize, heads: usize, rng: &mut SeededRng) -> Result<Self> {
        if heads == 0 || !c.is_multiple_of(heads) {
            return Err(Error::Parameter(format!(
                "{heads} heads do not divide {c} channels"
            )));
        }
        Ok(Self {
            query: Linear::new(c, c, rng),
            key: Linear::new(c, c, rng),
            value: Linear::new(c, c, rng),
            out: Linear::zeros(c, c),
            ff_in: Linear::new(c, hidden, rng),
            ff_out: Linear::zeros(hidden, c),
            heads,
        })
    }

    /// Runs the layer on `x` (`n × C`) and returns only the first `nq` rows.
    /// Every sub-step after attention is row-local, so dropping the other
    /// query rows does not change the kept ones.
    fn forward(&self, x: &Tensor, nq: usize, scaled: bool) -> Result<(Tensor, LayerCache)> {
        let (n, c) = x.dims2()?;
        let xq = if nq == n { x.clone() } else { x.rows(0, nq)? };
        let q = self.query.forward(&xq)?;
        let k = self.key.forward(x)?;
        let v = self.value.forward(x)?;
        let (a, probs) =
            attention_forward(q.data(), k.data(), v.data(), nq, n, c, self.heads, scaled);
        let attn = Tensor::new(vec![nq, c], a)?;
        let h = xq.add(&self.out.forward(&attn)?)?;
        let f1 = self.ff_in.forward(&h)?;
        let g = gelu(&f1);
        let y = h
            .add(&self.ff_out.forward(&g)?)?
            .ensure_finite("encoder layer")?;
        Ok((
            y,
            LayerCache {
                x: x.clone(),
                xq,
                q,
                k,
                v,
                attn,
                probs,
                h,
                f1,
                g,
            },
        ))
    }

    fn backward(&mut self, cache: &LayerCache, dy: &Tensor, scaled: bool) -> Result<Tensor> {
        let (n, c) = cache.x.dims2()?;
        let nq = cache.xq.dims2()?.0;
        let dg = self.ff_out.backward(&cache.g, dy)?;
        let df1 = gelu_backward(&cache.f1, &dg)?;
        let dh = dy.add(&self.ff_in.backward(&cache.h, &df1)?)?;
        let dattn = self.out.backward(&cache.attn, &dh)?;
        let (dq, dk, dv) = attention_backward(
            cache.q.data(),
            cache.k.data(),
            cache.v.data(),
            &cache.probs,
            dattn.data(),
            c,
            scaled,
        );
        let dxq = dh.add(
            &self
                .query
                .backward(&cache.xq, &Tensor::new(vec![nq, c], dq)?)?,
        )?;
        let mut dx = self.key.backward(&cache.x, &Tensor::new(vec![n, c], dk)?)?;
        dx.add_assign(
            &self
                .value
                .backward(&cache.x, &Tensor::new(vec![n, c], dv)?)?,
        )?;
        for (o, g) in dx.data_mut()[..nq * c].iter_mut().zip(dxq.data()) {
            *o += g;
        }
        Ok(dx)
    }
}

impl Module for EncoderLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.out.visit(&join(prefix, "out"), f);
        self.ff_in.visit(&join(prefix, "ff_in"), f);
        self.ff_out.visit(&join(prefix, "ff_out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
        self.ff_in.visit_mut(&join(prefix, "ff_in"), f);
        self.ff_out.visit_mut(&join(prefix, "ff_out"), f);
    }
}

/// Parameters of one view's encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewEncoderParams {
    /// Learnable view embedding `T_r`, `M × C`.
    pub token: Tensor,
    /// Learnable position embedding `G_r`, `(M + H·W·D) × C`.
    pub position: Tensor,
    /// 1×1×1 convolution applied to the synthetic-view map.
    pub input_proj: Linear,
    pub layers: Vec<EncoderLayer>,
    pub mixing: TokenMixing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderShape {
    pub token_rows: usize,
    pub voxels: usize,
    pub channels: usize,
    pub depth: usize,
    pub heads: usize,
}

impl ViewEncoderParams {
    pub fn new(shape: EncoderShape, mixing: TokenMixing, rng: &mut SeededRng) -> Result<Self> {
        let EncoderShape {
            token_rows,
            voxels,
            channels,
            depth,
            heads,
        } = shape;
        if token_rows == 0 || token_rows >= voxels {
            return Err(Error::Parameter(format!(
                "token size M={token_rows} must satisfy 0 < M < H·W·D = {voxels}"
            )));
        }
        if depth == 0 {
            return Err(Error::Parameter("encoder depth must be at least 1".into()));
        }
        let token = Tensor::randn(&[token_rows, channels], EMBEDDING_INIT_STD, rng);
        let position = Tensor::randn(&[token_rows + voxels, channels], EMBEDDING_INIT_STD, rng);
        let input_proj = Linear::new(channels, channels, rng);
        let layers = (0..depth)
            .map(|_| EncoderLayer::new(channels, 2 * channels, heads, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            token,
            position,
            input_proj,
            layers,
            mixing,
        })
    }

    pub fn token_rows(&self) -> usize {
        self.token.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.token.shape()[1]
    }

    pub fn voxels(&self) -> usize {
        self.position.shape()[0] - self.token_rows()
    }
}

impl Module for ViewEncoderParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "token"), &self.token);
        f(&join(prefix, "position"), &self.position);
        self.input_proj.visit(&join(prefix, "input_proj"), f);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layer{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "token"), &mut self.token);
        f(&join(prefix, "position"), &mut self.position);
        self.input_proj.visit_mut(&join(prefix, "input_proj"), f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layer{i}")), f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncodeCache {
    flat: Tensor,
    projected: Tensor,
    layers: Vec<LayerCache>,
}

/// Flattens an `(H, W, D, C)` tensor to `(H·W·D) × C`.
pub(crate) fn flatten(volume: &Tensor) -> Result<Tensor> {
    let [h, w, d, c] = volume.dims4()?;
    volume.clone().reshape(&[h * w * d, c])
}

fn encode_forward(
    params: &ViewEncoderParams,
    volume: &Tensor,
    scaled: bool,
) -> Result<(Tensor, EncodeCache)> {
    let [h, w, d, c] = volume.dims4()?;
    let m = params.token_rows();
    if c != params.channels() {
        return Err(Error::Dimension(format!(
            "view has {c} channels, encoder expects {}",
            params.channels()
        )));
    }
    if h * w * d != params.voxels() {
        return Err(Error::Dimension(format!(
            "view has {} voxels but the position embedding covers {}",
            h * w * d,
            params.voxels()
        )));
    }
    let flat = flatten(volume)?;
    let projected = params.input_proj.forward(&flat)?;
    let mut x = match params.mixing {
        TokenMixing::Concat => {
            Tensor::concat_rows(&[&params.token, &projected])?.add(&params.position)?
        }
        TokenMixing::PoolAdd => {
            let n = h * w * d;
            let mut pooled = vec![0.0; c];
            for row in projected.data().chunks(c) {
                for (p, v) in pooled.iter_mut().zip(row) {
                    *p += v;
                }
            }
            let g = params.position.data();
            Tensor::from_fn(&[m, c], |i| {
                params.token.data()[i] + pooled[i % c] / n as f64 + g[i]
            })
        }
    };
    let mut caches = Vec::with_capacity(params.layers.len());
    let last = params.layers.len() - 1;
    for (i, layer) in params.layers.iter().enumerate() {
        let rows = x.dims2()?.0;
        let nq = if i == last { m } else { rows };
        let (y, cache) = layer.forward(&x, nq, scaled)?;
        caches.push(cache);
        x = y;
    }
    Ok((
        x,
        EncodeCache {
            flat,
            projected,
            layers: caches,
        },
    ))
}

/// Returns the gradient w.r.t. the flattened view and accumulates parameter
/// gradients.
fn encode_backward(
    params: &mut ViewEncoderParams,
    cache: &EncodeCache,
    d_token_out: &Tensor,
    scaled: bool,
) -> Result<Tensor> {
    let mut d = d_token_out.clone();
    for (layer, lc) in params.layers.iter_mut().zip(&cache.layers).rev() {
        d = layer.backward(lc, &d, scaled)?;
    }
    let m = params.token_rows();
    let (n, c) = cache.projected.dims2()?;
    let d_projected = match params.mixing {
        TokenMixing::Concat => {
            params.position.accumulate_grad(d.data());
            params.token.accumulate_grad(&d.data()[..m * c]);
            Tensor::new(vec![n, c], d.data()[m * c..].to_vec())?
        }
        TokenMixing::PoolAdd => {
            let mut dg = vec![0.0; (m + n) * c];
            dg[..m * c].copy_from_slice(d.data());
            params.position.accumulate_grad(&dg);
            params.token.accumulate_grad(d.data());
            let mut dpool = vec![0.0; c];
            for row in d.data().chunks(c) {
                for (p, v) in dpool.iter_mut().zip(row) {
                    *p += v;
                }
            }
            Tensor::from_fn(&[n, c], |i| dpool[i % c] / n as f64)
        }
    };
    params.input_proj.backward(&cache.flat, &d_projected)
}

/// View token `T'_r` (`M × C`) of one synthetic-view map.
pub fn encode_view(
    view: &FeatureVolume,
    params: &ViewEncoderParams,
    attn_scale: bool,
) -> Result<Tensor> {
    encode_forward(params, view.tensor(), attn_scale).map(|(t, _)| t)
}

/// The per-view tokens and their row-wise concatenation `𝒯`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewTokenSet {
    tokens: Vec<Tensor>,
    concatenated: Tensor,
}

impl ViewTokenSet {
    pub fn new(tokens: Vec<Tensor>) -> Result<Self> {
        let refs: Vec<&Tensor> = tokens.iter().collect();
        if let Some(first) = tokens.first() {
            if tokens.iter().any(|t| t.shape() != first.shape()) {
                return Err(Error::Dimension("view tokens differ in shape".into()));
            }
        }
        let concatenated = Tensor::concat_rows(&refs)?;
        Ok(Self {
            tokens,
            concatenated,
        })
    }

    pub fn tokens(&self) -> &[Tensor] {
        &self.tokens
    }

    pub fn concatenated(&self) -> &Tensor {
        &self.concatenated
    }
}

/// 1×1 projections of the cross-view fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    /// Zero-initialized so a fresh fusion is the identity on its view.
    pub out: Linear,
}

impl FusionParams {
    pub fn new(c: usize, rng: &mut SeededRng) -> Self {
        Self {
            query: Linear::new(c, c, rng),
            key: Linear::new(c, c, rng),
            value: Linear::new(c, c, rng),
            out: Linear::zeros(c, c),
        }
    }

    pub fn channels(&self) -> usize {
        self.query.c_in()
    }
}

impl Module for FusionParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.out.visit(&join(prefix, "out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

#[derive(Debug, Clone)]
pub struct FusionCache {
    flat: Tensor,
    kv: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    attn: Tensor,
    probs: AttnProbs,
}

/// `rows + out(softmax(q kᵀ / √C) v)` with queries from `rows` and keys and
/// values from `kv`. Returns the `N × C` result.
fn fusion_forward(
    params: &FusionParams,
    rows: &Tensor,
    kv: &Tensor,
    scaled: bool,
) -> Result<(Tensor, FusionCache)> {
    let (n, c) = rows.dims2()?;
    let (l, ck) = kv.dims2()?;
    if c != params.channels() || ck != c {
        return Err(Error::Dimension(format!(
            "fusion expects {} channels, got queries {:?} and keys {:?}",
            params.channels(),
            rows.shape(),
            kv.shape()
        )));
    }
    let q = params.query.forward(rows)?;
    let k = params.key.forward(kv)?;
    let v = params.value.forward(kv)?;
    let (a, probs) = attention_forward(q.data(), k.data(), v.data(), n, l, c, 1, scaled);
    let attn = Tensor::new(vec![n, c], a)?;
    let branch = params.out.forward(&attn)?;
    let mut out = rows.clone();
    for (o, b) in out.data_mut().iter_mut().zip(branch.data()) {
        // Skipping exact zeros keeps a zero branch bit-exact (incl. -0.0).
        if *b != 0.0 {
            *o += b;
        }
    }
    let out = out.ensure_finite("cross_view_fusion")?;
    Ok((
        out,
        FusionCache {
            flat: rows.clone(),
            kv: kv.clone(),
            q,
            k,
            v,
            attn,
            probs,
        },
    ))
}

/// Returns `(d rows, d kv)` and accumulates parameter gradients.
fn fusion_backward(
    params: &mut FusionParams,
    cache: &FusionCache,
    dy: &Tensor,
    scaled: bool,
) -> Result<(Tensor, Tensor)> {
    let (n, c) = cache.flat.dims2()?;
    let l = cache.kv.dims2()?.0;
    let dattn = params.out.backward(&cache.attn, dy)?;
    let (dq, dk, dv) = attention_backward(
        cache.q.data(),
        cache.k.data(),
        cache.v.data(),
        &cache.probs,
        dattn.data(),
        c,
        scaled,
    );
    let mut drows = dy.clone();
    drows.add_assign(
        &params
            .query
            .backward(&cache.flat, &Tensor::new(vec![n, c], dq)?)?,
    )?;
    let mut dkv = params
        .key
        .backward(&cache.kv, &Tensor::new(vec![l, c], dk)?)?;
    dkv.add_assign(
        &params
            .value
            .backward(&cache.kv, &Tensor::new(vec![l, c], dv)?)?,
    )?;
    Ok((drows, dkv))
}

/// Augmented-view map `V''_r` from `V'_r` and the overall token.
pub fn cross_view_fusion(
    view: &FeatureVolume,
    overall_token: &Tensor,
    params: &FusionParams,
    attn_scale: bool,
) -> Result<FeatureVolume> {
    let flat = flatten(view.tensor())?;
    let (out, _) = fusion_forward(params, &flat, overall_token, attn_scale)?;
    FeatureVolume::new(out.reshape(view.tensor().shape())?, VolumeRole::Augmented)
}

/// Encoders and fusions for all views.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossViewTransformer {
    pub encoders: Vec<ViewEncoderParams>,
    pub fusions: Vec<FusionParams>,
    pub scheme: FusionScheme,
    pub attn_scale: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvtrShape {
    pub views: usize,
    pub encoder: EncoderShape,
}

#[derive(Debug, Clone)]
pub struct CvtrCache {
    shape: Vec<usize>,
    encodes: Vec<EncodeCache>,
    fusions: Vec<FusionCache>,
}

impl CrossViewTransformer {
    pub fn new(
        shape: CvtrShape,
        scheme: FusionScheme,
        mixing: TokenMixing,
        attn_scale: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if shape.views == 0 {
            return Err(Error::Parameter(
                "cross-view transformer needs a view".into(),
            ));
        }
        let encoders = (0..shape.views)
            .map(|_| ViewEncoderParams::new(shape.encoder, mixing, rng))
            .collect::<Result<_>>()?;
        let fusions = (0..shape.views)
            .map(|_| FusionParams::new(shape.encoder.channels, rng))
            .collect();
        Ok(Self {
            encoders,
            fusions,
            scheme,
            attn_scale,
        })
    }

    pub fn num_views(&self) -> usize {
        self.fusions.len()
    }

    fn check_views(&self, views: &[Tensor]) -> Result<Vec<usize>> {
        if views.len() != self.num_views() {
            return Err(Error::Dimension(format!(
                "{} views given to a {}-view transformer",
                views.len(),
                self.num_views()
            )));
        }
        let shape = views[0].shape().to_vec();
        if views.iter().any(|v| v.shape() != shape) {
            return Err(Error::Dimension("views must share one shape".into()));
        }
        views[0].dims4()?;
        Ok(shape)
    }

    /// View tokens of every view (independent of the fusion scheme).
    pub fn tokens(&self, views: &[Tensor]) -> Result<ViewTokenSet> {
        self.check_views(views)?;
        let tokens = views
            .iter()
            .zip(&self.encoders)
            .map(|(v, e)| encode_forward(e, v, self.attn_scale).map(|(t, _)| t))
            .collect::<Result<Vec<_>>>()?;
        ViewTokenSet::new(tokens)
    }

    pub fn forward(&self, views: &[Tensor]) -> Result<(Vec<Tensor>, CvtrCache)> {
        let shape = self.check_views(views)?;
        let flats = views.iter().map(flatten).collect::<Result<Vec<_>>>()?;
        let n = flats[0].dims2()?.0;
        let mut encodes = Vec::new();
        let mut fusions = Vec::new();
        let mut outs = Vec::with_capacity(views.len());
        match self.scheme {
            FusionScheme::AllForOneTokens => {
                let mut tokens = Vec::with_capacity(views.len());
                for (v, e) in views.iter().zip(&self.encoders) {
                    let (t, c) = encode_forward(e, v, self.attn_scale)?;
                    tokens.push(t);
                    encodes.push(c);
                }
                let overall = Tensor::concat_rows(&tokens.iter().collect::<Vec<_>>())?;
                for (flat, f) in flats.iter().zip(&self.fusions) {
                    let (o, c) = fusion_forward(f, flat, &overall, self.attn_scale)?;
                    outs.push(o.reshape(&shape)?);
                    fusions.push(c);
                }
            }
            FusionScheme::AllForOneFeatures => {
                let all = Tensor::concat_rows(&flats.iter().collect::<Vec<_>>())?;
                for (flat, f) in flats.iter().zip(&self.fusions) {
                    let (o, c) = fusion_forward(f, flat, &all, self.attn_scale)?;
                    outs.push(o.reshape(&shape)?);
                    fusions.push(c);
                }
            }
            FusionScheme::All => {
                let all = Tensor::concat_rows(&flats.iter().collect::<Vec<_>>())?;
                let (o, c) = fusion_forward(&self.fusions[0], &all, &all, self.attn_scale)?;
                for r in 0..views.len() {
                    outs.push(o.rows(r * n, (r + 1) * n)?.reshape(&shape)?);
                }
                fusions.push(c);
            }
        }
        Ok((
            outs,
            CvtrCache {
                shape,
                encodes,
                fusions,
            },
        ))
    }

    /// Gradients w.r.t. each input view; parameter gradients accumulate.
    pub fn backward(&mut self, cache: &CvtrCache, d_outs: &[Tensor]) -> Result<Vec<Tensor>> {
        let shape = &cache.shape;
        let n = shape[..3].iter().product::<usize>();
        let c = shape[3];
        let r_count = self.num_views();
        if d_outs.len() != r_count {
            return Err(Error::Dimension(
                "gradient count does not match views".into(),
            ));
        }
        let flat_grads = d_outs.iter().map(flatten).collect::<Result<Vec<_>>>()?;
        let mut d_views: Vec<Tensor> = Vec::with_capacity(r_count);
        match self.scheme {
            FusionScheme::AllForOneTokens => {
                let m = self.encoders[0].token_rows();
                let mut d_overall = Tensor::zeros(&[m * r_count, c]);
                for ((f, fc), g) in self.fusions.iter_mut().zip(&cache.fusions).zip(&flat_grads) {
                    let (drows, dkv) = fusion_backward(f, fc, g, self.attn_scale)?;
                    d_overall.add_assign(&dkv)?;
                    d_views.push(drows);
                }
                for (r, (e, ec)) in self.encoders.iter_mut().zip(&cache.encodes).enumerate() {
                    let dt = d_overall.rows(r * m, (r + 1) * m)?;
                    let dv = encode_backward(e, ec, &dt, self.attn_scale)?;
                    d_views[r].add_assign(&dv)?;
                }
            }
            FusionScheme::AllForOneFeatures => {
                let mut d_all = Tensor::zeros(&[n * r_count, c]);
                for ((f, fc), g) in self.fusions.iter_mut().zip(&cache.fusions).zip(&flat_grads) {
                    let (drows, dkv) = fusion_backward(f, fc, g, self.attn_scale)?;
                    d_all.add_assign(&dkv)?;
                    d_views.push(drows);
                }
                for (r, dv) in d_views.iter_mut().enumerate() {
                    dv.add_assign(&d_all.rows(r * n, (r + 1) * n)?)?;
                }
            }
            FusionScheme::All => {
                let g = Tensor::concat_rows(&flat_grads.iter().collect::<Vec<_>>())?;
                let (drows, dkv) =
                    fusion_backward(&mut self.fusions[0], &cache.fusions[0], &g, self.attn_scale)?;
                let total = drows.add(&dkv)?;
                for r in 0..r_count {
                    d_views.push(total.rows(r * n, (r + 1) * n)?);
                }
            }
        }
        d_views.into_iter().map(|d| d.reshape(shape)).collect()
    }
}

impl Module for CrossViewTransformer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (r, e) in self.encoders.iter().enumerate() {
            e.visit(&join(prefix, &format!("encoder{r}")), f);
        }
        for (r, fu) in self.fusions.iter().enumerate() {
            fu.visit(&join(prefix, &format!("fusion{r}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (r, e) in self.encoders.iter_mut().enumerate() {
            e.visit_mut(&join(prefix, &format!("encoder{r}")), f);
        }
        for (r, fu) in self.fusions.iter_mut().enumerate() {
            fu.visit_mut(&join(prefix, &format!("fusion{r}")), f);
        }
    }
}

/// Augmented maps `V''_r` for every synthetic view.
pub fn cvtr_forward(
    views: &[FeatureVolume],
    cvtr: &CrossViewTransformer,
) -> Result<Vec<FeatureVolume>> {
    let tensors: Vec<Tensor> = views.iter().map(|v| v.tensor().clone()).collect();
    let (outs, _) = cvtr.forward(&tensors)?;
    outs.into_iter()
        .map(|t| FeatureVolume::new(t, VolumeRole::Augmented))
        .collect()
}

/// Encoder of one view as a checkable op over `[view, token, position]`.
pub struct EncodeViewOp {
    pub params: ViewEncoderParams,
    pub attn_scale: bool,
}

impl crate::gradcheck::Differentiable for EncodeViewOp {
    fn name(&self) -> String {
        format!("encode_view({:?})", self.params.mixing)
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let mut p = self.params.clone();
        p.token = inputs[1].clone();
        p.position = inputs[2].clone();
        encode_forward(&p, &inputs[0], self.attn_scale).map(|(t, _)| t)
    }
    fn backward(&self, inputs: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        let mut p = self.params.clone();
        p.token = inputs[1].clone();
        p.position = inputs[2].clone();
        p.zero_grad();
        let (_, cache) = encode_forward(&p, &inputs[0], self.attn_scale)?;
        let dflat = encode_backward(&mut p, &cache, g, self.attn_scale)?;
        Ok(vec![
            dflat.reshape(inputs[0].shape())?,
            p.token.grad_tensor(),
            p.position.grad_tensor(),
        ])
    }
}

/// Fusion as a checkable op over `[view, overall token, q.weight, out.weight]`.
pub struct FusionOp {
    pub params: FusionParams,
    pub attn_scale: bool,
}

impl FusionOp {
    fn with(&self, inputs: &[Tensor]) -> FusionParams {
        let mut p = self.params.clone();
        p.query.weight = inputs[2].clone();
        p.out.weight = inputs[3].clone();
        p
    }
}

impl crate::gradcheck::Differentiable for FusionOp {
    fn name(&self) -> String {
        "cross_view_fusion".into()
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let p = self.with(inputs);
        let flat = flatten(&inputs[0])?;
        fusion_forward(&p, &flat, &inputs[1], self.attn_scale).map(|(o, _)| o)
    }
    fn backward(&self, inputs: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        let mut p = self.with(inputs);
        p.zero_grad();
        let flat = flatten(&inputs[0])?;
        let (_, cache) = fusion_forward(&p, &flat, &inputs[1], self.attn_scale)?;
        let (drows, dkv) = fusion_backward(&mut p, &cache, g, self.attn_scale)?;
        Ok(vec![
            drows.reshape(inputs[0].shape())?,
            dkv,
            p.query.weight.grad_tensor(),
            p.out.weight.grad_tensor(),
        ])
    }
}

/// The whole transformer as a checkable op over its `R` input views.
pub struct CvtrOp {
    pub cvtr: CrossViewTransformer,
}

impl crate::gradcheck::Differentiable for CvtrOp {
    fn name(&self) -> String {
        format!("cvtr_forward({})", self.cvtr.scheme)
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let (outs, _) = self.cvtr.forward(inputs)?;
        let shape = outs[0].shape().to_vec();
        let mut data = Vec::new();
        for o in outs {
            data.extend(o.into_data());
        }
        let mut full = vec![inputs.len()];
        full.extend(shape);
        Tensor::new(full, data)
    }
    fn backward(&self, inputs: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        let mut cvtr = self.cvtr.clone();
        let (_, cache) = cvtr.forward(inputs)?;
        let per = inputs[0].len();
        let grads = (0..inputs.len())
            .map(|r| {
                Tensor::new(
                    inputs[0].shape().to_vec(),
                    g.data()[r * per..(r + 1) * per].to_vec(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        cvtr.backward(&cache, &grads)
    }
}
