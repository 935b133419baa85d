//! Embedding network `f(x)` and learned pair metric `g(x_i, x_j)`.
//!
//! The embedding is an MLP with ReLU between layers whose output is scaled
//! to unit length. The metric head is one affine layer over a joint pair
//! representation, by default `[f(x_i); f(x_j); f(x_i) ⊙ f(x_j)]` (see
//! [`PairFeatures`]). With [`HeadKind::Softmax2`] it emits two
//! logits normalized by a softmax and the dissimilarity component (index 0)
//! is `g`. [`HeadKind::Linear1`] emits one unnormalized value used directly
//! as `g`; that is the unbounded baseline head.
//!
//! Forward passes work on a batch of samples (rows of a [`Matrix`]) plus a
//! list of index pairs, so a sample that appears in many pairs is embedded
//! once. Backward passes return gradients in a [`ModelParams`] of the same
//! layout as the parameters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{
    affine_backward, affine_forward, relu_backward, relu_forward, sgd_update, softmax2_backward,
    softmax2_forward, Matrix, Rng,
};

/// Index of the dissimilarity probability in the two-way head output.
pub const DISSIMILAR: usize = 0;
/// Index of the similarity probability in the two-way head output.
pub const SIMILAR: usize = 1;

const CHECKPOINT_FORMAT: &str = "quadnet-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Softmax2,
    Linear1,
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::Softmax2 => 2,
            HeadKind::Linear1 => 1,
        }
    }
}

/// Joint pair representation fed to the metric head.
///
/// An affine map of a plain concatenation splits into `a(f_i) + b(f_j)`, so
/// for any fixed probe the gallery is ranked by `b` alone and every probe sees
/// the same order. The elementwise product term lets the head weigh
/// per-dimension agreement between the two embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairFeatures {
    /// `[f_i; f_j]`
    Concat,
    /// `[f_i; f_j; f_i ⊙ f_j]`
    ConcatProduct,
}

impl PairFeatures {
    /// Head input width for embedding dimension `e`.
    pub fn width(self, e: usize) -> usize {
        match self {
            PairFeatures::Concat => 2 * e,
            PairFeatures::ConcatProduct => 3 * e,
        }
    }
}

impl std::str::FromStr for PairFeatures {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Self::Concat),
            "concat_product" => Ok(Self::ConcatProduct),
            other => Err(Error::Config(format!("unknown pair features '{other}'"))),
        }
    }
}

impl std::fmt::Display for PairFeatures {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Concat => "concat",
            Self::ConcatProduct => "concat_product",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub input_dim: usize,
    /// Output width of each embedding layer; the last entry is the embedding
    /// dimension. Empty means the embedding is the normalized input.
    pub hidden: Vec<usize>,
    pub head: HeadKind,
    pub pair_features: PairFeatures,
}

impl Architecture {
    /// Uses [`PairFeatures::ConcatProduct`].
    pub fn new(input_dim: usize, hidden: Vec<usize>, head: HeadKind) -> Self {
        Self {
            input_dim,
            hidden,
            head,
            pair_features: PairFeatures::ConcatProduct,
        }
    }

    pub fn with_pair_features(mut self, pair_features: PairFeatures) -> Self {
        self.pair_features = pair_features;
        self
    }

    /// `input_dim → 64 → 32` with a two-way softmax head.
    pub fn default_for(input_dim: usize) -> Self {
        Self::new(input_dim, vec![64, 32], HeadKind::Softmax2)
    }

    pub fn embed_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Affine {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: Matrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    /// Weights and biases uniform in `±sqrt(6 / fan_in)`.
    fn init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / fan_in as f64).sqrt();
        let mut layer = Self::zeros(fan_in, fan_out);
        for w in layer.weights.as_mut_slice() {
            *w = rng.uniform(-limit, limit);
        }
        for b in &mut layer.bias {
            *b = rng.uniform(-limit, limit);
        }
        layer
    }

    fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    fn fan_out(&self) -> usize {
        self.weights.cols()
    }
}

/// Weights of the embedding MLP and the metric head.
///
/// The same type doubles as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<Affine>,
    pub head: Affine,
    pub head_kind: HeadKind,
    pub pair_features: PairFeatures,
    input_dim: usize,
}

impl ModelParams {
    pub fn init(arch: &Architecture, rng: &mut Rng) -> Result<Self> {
        Self::build(arch, |i, o| Affine::init(i, o, rng))
    }

    pub fn zeros(arch: &Architecture) -> Result<Self> {
        Self::build(arch, Affine::zeros)
    }

    fn build(arch: &Architecture, mut make: impl FnMut(usize, usize) -> Affine) -> Result<Self> {
        if arch.input_dim == 0 || arch.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if arch.embed_dim() < 2 {
            return Err(Error::Config(format!(
                "embedding dimension must be >= 2, got {}",
                arch.embed_dim()
            )));
        }
        let mut layers = Vec::with_capacity(arch.hidden.len());
        let mut fan_in = arch.input_dim;
        for &h in &arch.hidden {
            layers.push(make(fan_in, h));
            fan_in = h;
        }
        let head = make(arch.pair_features.width(fan_in), arch.head.outputs());
        Ok(Self {
            layers,
            head,
            head_kind: arch.head,
            pair_features: arch.pair_features,
            input_dim: arch.input_dim,
        })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.input_dim,
            hidden: self.layers.iter().map(Affine::fan_out).collect(),
            head: self.head_kind,
            pair_features: self.pair_features,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, Affine::fan_out)
    }

    /// Zeroed container with this model's layout, used for gradients.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Affine::zeros(l.fan_in(), l.fan_out()))
                .collect(),
            head: Affine::zeros(self.head.fan_in(), self.head.fan_out()),
            head_kind: self.head_kind,
            pair_features: self.pair_features,
            input_dim: self.input_dim,
        }
    }

    /// Parameter slices in a fixed order: each layer's weights then bias,
    /// then the head's weights then bias.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in self.layers.iter().chain(std::iter::once(&self.head)) {
            out.push(l.weights.as_slice());
            out.push(l.bias.as_slice());
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in self.layers.iter_mut().chain(std::iter::once(&mut self.head)) {
            out.push(l.weights.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn get_flat(&self, mut index: usize) -> f64 {
        for s in self.slices() {
            if index < s.len() {
                return s[index];
            }
            index -= s.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_flat(&mut self, mut index: usize, value: f64) {
        for s in self.slices_mut() {
            if index < s.len() {
                s[index] = value;
                return;
            }
            index -= s.len();
        }
        panic!("parameter index out of range");
    }

    fn check_layout(&self, other: &ModelParams, op: &'static str) -> Result<()> {
        if self.architecture() != other.architecture() {
            return Err(Error::shape(
                op,
                format!("{:?}", self.architecture()),
                format!("{:?}", other.architecture()),
            ));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &ModelParams) -> Result<()> {
        self.check_layout(other, "ModelParams::add_assign")?;
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            for x in s {
                *x *= factor;
            }
        }
    }

    /// Plain SGD step `p ← p − lr·g` over every parameter.
    pub fn sgd_step(&mut self, grads: &ModelParams, learning_rate: f64) -> Result<()> {
        self.check_layout(grads, "ModelParams::sgd_step")?;
        for (p, g) in self.slices_mut().into_iter().zip(grads.slices()) {
            sgd_update(p, g, learning_rate)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            params: self.clone(),
        };
        let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        if doc.format != CHECKPOINT_FORMAT || doc.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                doc.format,
                doc.version
            )));
        }
        let p = doc.params;
        // Re-derive the layout and make sure every stored shape chains.
        let expected = ModelParams::zeros(&p.architecture())?;
        let chained = p.layers.len() == expected.layers.len()
            && p.layers.iter().zip(&expected.layers).all(|(a, b)| {
                a.weights.shape() == b.weights.shape() && a.bias.len() == b.bias.len()
            })
            && p.head.weights.shape() == expected.head.weights.shape()
            && p.head.bias.len() == expected.head.bias.len();
        if !chained || !p.is_finite() {
            return Err(Error::Config(format!(
                "{}: checkpoint layer shapes do not chain",
                path.display()
            )));
        }
        Ok(p)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    params: ModelParams,
}

/// Learned dissimilarity of an ordered pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    /// Dissimilarity; in `[0, 1]` for the softmax head, unbounded for the
    /// linear head.
    pub g: f64,
    /// Head output before normalization. The linear head fills slot 1 with 0.
    pub logits: [f64; 2],
    pub p_similar: f64,
}

/// Activations kept from an embedding forward pass.
#[derive(Debug, Clone)]
pub struct EmbedCache {
    layer_inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
    norms: Vec<f64>,
    output: Matrix,
}

impl EmbedCache {
    /// Unit-length embeddings, one row per input sample.
    pub fn embeddings(&self) -> &Matrix {
        &self.output
    }

    /// Smallest `|z|` over ReLU inputs, i.e. the distance to the nearest kink.
    pub fn min_abs_pre_activation(&self) -> f64 {
        let hidden = self.pre_activations.len().saturating_sub(1);
        self.pre_activations[..hidden]
            .iter()
            .flat_map(|z| z.as_slice())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

fn check_input(params: &ModelParams, x: &Matrix) -> Result<()> {
    if x.cols() != params.input_dim {
        return Err(Error::shape(
            "embed",
            format!("{} input features", params.input_dim),
            x.cols(),
        ));
    }
    Ok(())
}

pub fn embed_batch(params: &ModelParams, x: &Matrix) -> Result<EmbedCache> {
    check_input(params, x)?;
    let mut layer_inputs = Vec::with_capacity(params.layers.len());
    let mut pre_activations = Vec::with_capacity(params.layers.len());
    let mut a = x.clone();
    for (idx, layer) in params.layers.iter().enumerate() {
        let z = affine_forward(&a, &layer.weights, &layer.bias)?;
        layer_inputs.push(a);
        a = if idx + 1 < params.layers.len() {
            relu_forward(&z)
        } else {
            z.clone()
        };
        pre_activations.push(z);
    }
    let mut norms = Vec::with_capacity(a.rows());
    for r in 0..a.rows() {
        let row = a.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Numeric(format!(
                "cannot normalize embedding of sample {r} with norm {norm}"
            )));
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
        norms.push(norm);
    }
    Ok(EmbedCache {
        layer_inputs,
        pre_activations,
        norms,
        output: a,
    })
}

/// Accumulates into `grads` the gradient of a scalar whose derivative with
/// respect to the normalized embeddings is `d_output`.
fn embed_backward(
    params: &ModelParams,
    cache: &EmbedCache,
    d_output: &Matrix,
    grads: &mut ModelParams,
) -> Result<()> {
    if d_output.shape() != cache.output.shape() {
        return Err(Error::shape(
            "embed_backward",
            format!("{:?}", cache.output.shape()),
            format!("{:?}", d_output.shape()),
        ));
    }
    // y = z/|z|  ⇒  dz = (dy − y (y·dy)) / |z|
    let mut d = d_output.clone();
    for r in 0..d.rows() {
        let y = cache.output.row(r);
        let dot: f64 = y.iter().zip(d.row(r)).map(|(a, b)| a * b).sum();
        let norm = cache.norms[r];
        for (dv, yv) in d.row_mut(r).iter_mut().zip(y) {
            *dv = (*dv - yv * dot) / norm;
        }
    }
    for idx in (0..params.layers.len()).rev() {
        if idx + 1 < params.layers.len() {
            d = relu_backward(&d, &cache.pre_activations[idx])?;
        }
        let layer = &params.layers[idx];
        let g = affine_backward(&d, &cache.layer_inputs[idx], &layer.weights)?;
        grads.layers[idx].weights.add_assign(&g.weights)?;
        for (a, b) in grads.layers[idx].bias.iter_mut().zip(&g.bias) {
            *a += b;
        }
        d = g.input;
    }
    Ok(())
}

pub fn embed(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    let m = Matrix::new(1, x.len(), x.to_vec())?;
    Ok(embed_batch(params, &m)?.output.into_values())
}

/// `‖f(x_i) − f(x_j)‖₂ / 2`, which lies in `[0, 1]` for unit embeddings.
pub fn embed_distance(params: &ModelParams, x_i: &[f64], x_j: &[f64]) -> Result<f64> {
    let a = embed(params, x_i)?;
    let b = embed(params, x_j)?;
    Ok(half_distance(&a, &b))
}

fn half_distance(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn check_pairs(pairs: &[(usize, usize)], n: usize) -> Result<()> {
    if let Some(&(a, b)) = pairs.iter().find(|&&(a, b)| a >= n || b >= n) {
        return Err(Error::shape("pairs", format!("indices < {n}"), format!("({a}, {b})")));
    }
    Ok(())
}

/// Cache for embedding-distance pairs.
#[derive(Debug, Clone)]
pub struct DistanceCache {
    embed: EmbedCache,
    pairs: Vec<(usize, usize)>,
    distances: Vec<f64>,
}

impl DistanceCache {
    pub fn embed_cache(&self) -> &EmbedCache {
        &self.embed
    }
}

pub fn forward_distances(
    params: &ModelParams,
    x: &Matrix,
    pairs: &[(usize, usize)],
) -> Result<(Vec<f64>, DistanceCache)> {
    check_pairs(pairs, x.rows())?;
    let embed = embed_batch(params, x)?;
    let distances: Vec<f64> = pairs
        .iter()
        .map(|&(a, b)| half_distance(embed.output.row(a), embed.output.row(b)))
        .collect();
    Ok((
        distances.clone(),
        DistanceCache {
            embed,
            pairs: pairs.to_vec(),
            distances,
        },
    ))
}

/// Gradient of `Σ dl_dd[p] · d_p` over pairs. Coincident embeddings get a zero
/// subgradient.
pub fn backward_distances(
    params: &ModelParams,
    cache: &DistanceCache,
    dl_dd: &[f64],
) -> Result<ModelParams> {
    if dl_dd.len() != cache.pairs.len() {
        return Err(Error::shape("backward_distances", cache.pairs.len(), dl_dd.len()));
    }
    let out = &cache.embed.output;
    let mut d_emb = Matrix::zeros(out.rows(), out.cols());
    for ((&(a, b), &d), &up) in cache.pairs.iter().zip(&cache.distances).zip(dl_dd) {
        if d == 0.0 || up == 0.0 {
            continue;
        }
        // d = |fa − fb| / 2  ⇒  ∂d/∂fa = (fa − fb) / (4d)
        let scale = up / (4.0 * d);
        for k in 0..out.cols() {
            let diff = out.get(a, k) - out.get(b, k);
            let ga = d_emb.get(a, k) + scale * diff;
            d_emb.set(a, k, ga);
            let gb = d_emb.get(b, k) - scale * diff;
            d_emb.set(b, k, gb);
        }
    }
    let mut grads = params.zeros_like();
    embed_backward(params, &cache.embed, &d_emb, &mut grads)?;
    Ok(grads)
}

/// Cache for metric-head pairs.
#[derive(Debug, Clone)]
pub struct PairCache {
    embed: EmbedCache,
    pairs: Vec<(usize, usize)>,
    head_input: Matrix,
    scores: Vec<PairScore>,
    head_kind: HeadKind,
}

impl PairCache {
    pub fn scores(&self) -> &[PairScore] {
        &self.scores
    }

    pub fn embed_cache(&self) -> &EmbedCache {
        &self.embed
    }
}

fn score_from_logits(kind: HeadKind, logits: &[f64]) -> Result<PairScore> {
    match kind {
        HeadKind::Softmax2 => {
            let z = [logits[0], logits[1]];
            let p = softmax2_forward(z)?;
            Ok(PairScore {
                g: p[DISSIMILAR],
                logits: z,
                p_similar: p[SIMILAR],
            })
        }
        HeadKind::Linear1 => {
            if !logits[0].is_finite() {
                return Err(Error::Numeric(format!("non-finite head output {}", logits[0])));
            }
            Ok(PairScore {
                g: logits[0],
                logits: [logits[0], 0.0],
                p_similar: 1.0 - logits[0],
            })
        }
    }
}

pub fn forward_pairs(
    params: &ModelParams,
    x: &Matrix,
    pairs: &[(usize, usize)],
) -> Result<(Vec<PairScore>, PairCache)> {
    check_pairs(pairs, x.rows())?;
    let embed = embed_batch(params, x)?;
    let e = embed.output.cols();
    let mut head_input = Matrix::zeros(pairs.len(), params.pair_features.width(e));
    for (p, &(a, b)) in pairs.iter().enumerate() {
        let (fa, fb) = (embed.output.row(a), embed.output.row(b));
        let row = head_input.row_mut(p);
        row[..e].copy_from_slice(fa);
        row[e..2 * e].copy_from_slice(fb);
        if params.pair_features == PairFeatures::ConcatProduct {
            for ((dst, x), y) in row[2 * e..].iter_mut().zip(fa).zip(fb) {
                *dst = x * y;
            }
        }
    }
    let logits = affine_forward(&head_input, &params.head.weights, &params.head.bias)?;
    let scores = (0..pairs.len())
        .map(|p| score_from_logits(params.head_kind, logits.row(p)))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        scores.clone(),
        PairCache {
            embed,
            pairs: pairs.to_vec(),
            head_input,
            scores,
            head_kind: params.head_kind,
        },
    ))
}

/// Converts per-pair `dL/dg` into `dL/dlogits` (one row per pair, two
/// columns; the linear head only uses column 0).
pub fn dlogits_from_dg(kind: HeadKind, scores: &[PairScore], dl_dg: &[f64]) -> Result<Matrix> {
    if scores.len() != dl_dg.len() {
        return Err(Error::shape("dlogits_from_dg", scores.len(), dl_dg.len()));
    }
    let mut out = Matrix::zeros(scores.len(), 2);
    for (p, (s, &up)) in scores.iter().zip(dl_dg).enumerate() {
        let row = out.row_mut(p);
        match kind {
            HeadKind::Softmax2 => {
                let probs = [s.g, s.p_similar];
                let mut upstream = [0.0; 2];
                upstream[DISSIMILAR] = up;
                row.copy_from_slice(&softmax2_backward(probs, upstream));
            }
            HeadKind::Linear1 => row[0] = up,
        }
    }
    Ok(out)
}

/// Gradient of `Σ_p Σ_c dl_dlogits[p][c] · logits[p][c]` with respect to all
/// parameters.
pub fn backward_pairs_logits(
    params: &ModelParams,
    cache: &PairCache,
    dl_dlogits: &Matrix,
) -> Result<ModelParams> {
    if dl_dlogits.shape() != (cache.pairs.len(), 2) || params.head_kind != cache.head_kind {
        return Err(Error::shape(
            "backward_pairs_logits",
            format!("{}x2", cache.pairs.len()),
            format!("{}x{}", dl_dlogits.rows(), dl_dlogits.cols()),
        ));
    }
    let k = params.head_kind.outputs();
    let mut upstream = Matrix::zeros(cache.pairs.len(), k);
    for p in 0..cache.pairs.len() {
        upstream
            .row_mut(p)
            .copy_from_slice(&dl_dlogits.row(p)[..k]);
    }
    let mut grads = params.zeros_like();
    let head = affine_backward(&upstream, &cache.head_input, &params.head.weights)?;
    grads.head.weights = head.weights;
    grads.head.bias = head.bias;

    let out = cache.embed.embeddings();
    let e = out.cols();
    let mut d_emb = Matrix::zeros(out.rows(), e);
    let product = params.pair_features == PairFeatures::ConcatProduct;
    for (p, &(a, b)) in cache.pairs.iter().enumerate() {
        let row = head.input.row(p);
        for k in 0..e {
            let (mut da, mut db) = (row[k], row[e + k]);
            if product {
                da += row[2 * e + k] * out.get(b, k);
                db += row[2 * e + k] * out.get(a, k);
            }
            d_emb.row_mut(a)[k] += da;
            d_emb.row_mut(b)[k] += db;
        }
    }
    embed_backward(params, &cache.embed, &d_emb, &mut grads)?;
    Ok(grads)
}

/// Gradient of `Σ_p dl_dg[p] · g_p` with respect to all parameters.
pub fn backward_pairs(params: &ModelParams, cache: &PairCache, dl_dg: &[f64]) -> Result<ModelParams> {
    let dz = dlogits_from_dg(cache.head_kind, &cache.scores, dl_dg)?;
    backward_pairs_logits(params, cache, &dz)
}

pub fn metric_score(params: &ModelParams, x_i: &[f64], x_j: &[f64]) -> Result<PairScore> {
    Ok(metric_score_cached(params, x_i, x_j)?.0)
}

pub fn metric_score_cached(
    params: &ModelParams,
    x_i: &[f64],
    x_j: &[f64],
) -> Result<(PairScore, PairCache)> {
    if x_i.len() != x_j.len() {
        return Err(Error::shape("metric_score", x_i.len(), x_j.len()));
    }
    let mut values = x_i.to_vec();
    values.extend_from_slice(x_j);
    let x = Matrix::new(2, x_i.len(), values)?;
    let (scores, cache) = forward_pairs(params, &x, &[(0, 1)])?;
    Ok((scores[0], cache))
}

/// Parameter gradient of `dl_dg · g(x_i, x_j)` for a cached single pair.
pub fn backward_pair(params: &ModelParams, cache: &PairCache, dl_dg: f64) -> Result<ModelParams> {
    backward_pairs(params, cache, &[dl_dg])
}
