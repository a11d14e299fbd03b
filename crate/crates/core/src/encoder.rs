//! Spatial-then-temporal transformer EEG encoder with one projection head per
//! caption category.
//!
//! Pipeline for a `B × C × T` batch:
//!
//! ```text
//! z-score each channel over time
//!   -> cut time into P = T / patch_len patches, project each (channel, patch) to d_model
//!   -> + channel embedding + temporal position
//!   -> spatial layers: attention across the C channels of each patch
//!   -> mean over channels
//!   -> temporal layers: attention across the P patches
//!   -> final layer norm, mean over patches
//!   -> 10 linear heads, each L2-normalised into the caption space
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::caption_bank::Taxonomy;
use crate::eeg_data::ZSCORE_EPS;
use crate::error::{dim_err, Error, Result};
use crate::rng::SeedStreams;
use crate::tensor::{read_nsem, write_nsem, Graph, Real, Tensor, Var};

pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub channels: usize,
    pub samples: usize,
    pub patch_len: usize,
    pub d_model: usize,
    pub n_spatial_layers: usize,
    pub n_temporal_layers: usize,
    pub n_attn_heads: usize,
    pub ff_mult: usize,
    pub dropout: f64,
    pub proj_dim: usize,
    pub head_categories: Vec<String>,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            samples: 256,
            patch_len: 16,
            d_model: 64,
            n_spatial_layers: 2,
            n_temporal_layers: 2,
            n_attn_heads: 4,
            ff_mult: 4,
            dropout: 0.1,
            proj_dim: 512,
            head_categories: Taxonomy::default().names().map(String::from).collect(),
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn patches(&self) -> usize {
        self.samples / self.patch_len
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_attn_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.samples == 0 || self.patch_len == 0 || self.d_model == 0 {
            return fail("channels, samples, patch_len and d_model must be positive".into());
        }
        if self.n_attn_heads == 0 || self.d_model % self.n_attn_heads != 0 {
            return fail(format!(
                "d_model {} is not divisible by n_attn_heads {}",
                self.d_model, self.n_attn_heads
            ));
        }
        if self.samples % self.patch_len != 0 {
            return fail(format!(
                "samples {} is not divisible by patch_len {}",
                self.samples, self.patch_len
            ));
        }
        if self.ff_mult == 0 || self.proj_dim < 2 {
            return fail("ff_mult must be >= 1 and proj_dim >= 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} is outside [0, 1)", self.dropout));
        }
        if self.head_categories.is_empty() {
            return fail("head_categories is empty".into());
        }
        Ok(())
    }

    /// Checks that the heads line up with the bank taxonomy, in order.
    pub fn validate_against(&self, taxonomy: &Taxonomy) -> Result<()> {
        self.validate()?;
        let names: Vec<&str> = taxonomy.names().collect();
        if self.head_categories.iter().map(String::as_str).ne(names.iter().copied()) {
            return Err(Error::Config(format!(
                "head_categories {:?} do not match the taxonomy {:?}",
                self.head_categories, names
            )));
        }
        Ok(())
    }

    /// Every parameter name with its shape, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let ff = d * self.ff_mult;
        let mut out = vec![
            ("patch.weight".to_string(), vec![self.patch_len, d]),
            ("patch.bias".to_string(), vec![d]),
            ("channel_embed".to_string(), vec![self.channels, d]),
            ("temporal_pos".to_string(), vec![self.patches(), d]),
        ];
        let stages = [("spatial", self.n_spatial_layers), ("temporal", self.n_temporal_layers)];
        for (stage, n) in stages {
            for i in 0..n {
                let p = format!("{stage}.{i}");
                for ln in ["ln1", "ln2"] {
                    out.push((format!("{p}.{ln}.gamma"), vec![d]));
                    out.push((format!("{p}.{ln}.beta"), vec![d]));
                }
                for w in ["q", "k", "v", "o"] {
                    out.push((format!("{p}.attn.{w}.weight"), vec![d, d]));
                    out.push((format!("{p}.attn.{w}.bias"), vec![d]));
                }
                out.push((format!("{p}.ff1.weight"), vec![d, ff]));
                out.push((format!("{p}.ff1.bias"), vec![ff]));
                out.push((format!("{p}.ff2.weight"), vec![ff, d]));
                out.push((format!("{p}.ff2.bias"), vec![d]));
            }
        }
        out.push(("spatial_pool.query".to_string(), vec![d, 1]));
        out.push(("final_ln.gamma".to_string(), vec![d]));
        out.push(("final_ln.beta".to_string(), vec![d]));
        for h in &self.head_categories {
            out.push((format!("head.{h}.weight"), vec![d, self.proj_dim]));
            out.push((format!("head.{h}.bias"), vec![self.proj_dim]));
        }
        out
    }
}

/// Named learnable tensors of an encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T = f32> {
    pub tensors: BTreeMap<String, Tensor<T>>,
}

fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl<T: Real> EncoderParams<T> {
    /// Truncated-normal (±2σ, σ = 0.02) weights and embeddings, zero biases,
    /// unit layer-norm gains. Each tensor draws from its own named stream.
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let streams = SeedStreams::new(config.seed);
        let tensors = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".bias") || name.ends_with(".beta") {
                    Tensor::zeros(shape)
                } else if name.ends_with(".gamma") {
                    Tensor::ones(shape)
                } else {
                    let mut rng = streams.stream(&format!("init/{name}"));
                    Tensor::from_fn(shape, |_| T::from_f64(truncated_normal(&mut rng, INIT_STD)))
                };
                (name, t)
            })
            .collect();
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Lookup(format!("missing parameter {name}")))
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> EncoderParams<U> {
        EncoderParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn check_shapes(&self, config: &EncoderConfig) -> Result<()> {
        let expected = config.param_shapes();
        if expected.len() != self.tensors.len() {
            return Err(dim_err!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                self.tensors.len()
            ));
        }
        for (name, shape) in expected {
            let t = self.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(dim_err!("parameter {name} has shape {:?}, expected {shape:?}", t.shape()));
            }
            if !t.is_finite() {
                return Err(Error::Numeric(format!("parameter {name} is not finite")));
            }
        }
        Ok(())
    }
}

/// Per-head `B × D` unit-row embeddings, in head order.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadEmbeddings<T = f32> {
    pub heads: Vec<(String, Tensor<T>)>,
}

impl<T: Real> HeadEmbeddings<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.heads.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }
}

/// A model mapping an EEG batch to per-head embeddings inside a graph.
/// Implemented by [`Encoder`]; saliency and input-gradient code only need this.
pub trait EmbeddingModel<T: Real> {
    fn head_names(&self) -> Vec<String>;
    fn channels(&self) -> usize;
    fn samples(&self) -> usize;
    /// Builds the evaluation-mode forward pass with frozen parameters.
    fn build_heads(&self, g: &mut Graph<T>, input: Var) -> Result<Vec<Var>>;
}

/// Output of a tracked forward pass.
pub struct Built {
    pub heads: Vec<Var>,
    pub params: Vec<(String, Var)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T: Real = f32> {
    pub config: EncoderConfig,
    pub params: EncoderParams<T>,
}

impl<T: Real> Encoder<T> {
    pub fn new(config: EncoderConfig, params: EncoderParams<T>) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self { config, params })
    }

    pub fn init(config: EncoderConfig) -> Result<Self> {
        let params = EncoderParams::init(&config)?;
        Ok(Self { config, params })
    }

    pub fn cast<U: Real>(&self) -> Encoder<U> {
        Encoder {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[1] != self.config.channels || shape[2] != self.config.samples || shape[0] == 0 {
            return Err(dim_err!(
                "input batch {shape:?} does not match [B, {}, {}]",
                self.config.channels,
                self.config.samples
            ));
        }
        Ok(())
    }

    /// Records the forward pass on `g`. Parameters are graph leaves that
    /// require gradients when `track_params`; dropout is active when a
    /// random stream is supplied.
    pub fn build(
        &self,
        g: &mut Graph<T>,
        input: Var,
        track_params: bool,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Built> {
        self.check_input(g.shape(input))?;
        let c = &self.config;
        let (b, ch, p, l, d) = (g.shape(input)[0], c.channels, c.patches(), c.patch_len, c.d_model);

        let mut vars = BTreeMap::new();
        let mut tracked = Vec::new();
        for (name, t) in &self.params.tensors {
            let v = if track_params { g.param(t.clone()) } else { g.constant(t.clone()) };
            vars.insert(name.as_str(), v);
            tracked.push((name.clone(), v));
        }
        let pv = |name: &str| -> Result<Var> {
            vars.get(name)
                .copied()
                .ok_or_else(|| Error::Lookup(format!("missing parameter {name}")))
        };
        let mut ctx = LayerCtx {
            heads: c.n_attn_heads,
            dropout: if dropout_rng.is_some() { c.dropout } else { 0.0 },
            rng: dropout_rng.as_deref_mut(),
        };

        let x = g.layer_norm(input, None, None, ZSCORE_EPS)?;
        let x = g.reshape(x, [b, ch, p, l])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        let x = g.reshape(x, [b * p * ch, l])?;
        let x = linear(g, x, pv("patch.weight")?, pv("patch.bias")?)?;
        let x = g.reshape(x, [b, p, ch, d])?;
        let pos = g.reshape(pv("temporal_pos")?, [p, 1, d])?;
        let pos = g.add(pos, pv("channel_embed")?)?;
        let x = g.add(x, pos)?;
        let x = ctx.dropout(g, x)?;

        let mut x = g.reshape(x, [b * p, ch, d])?;
        for i in 0..c.n_spatial_layers {
            x = transformer_layer(g, x, &format!("spatial.{i}"), &pv, &mut ctx)?;
        }
        // Attention pooling over channels with one learned query.
        let flat = g.reshape(x, [b * p * ch, d])?;
        let scores = g.matmul(flat, pv("spatial_pool.query")?)?;
        let scores = g.reshape(scores, [b * p, 1, ch])?;
        let weights = g.softmax(scores, 2)?;
        let x = g.bmm(weights, x, false)?;
        let mut x = g.reshape(x, [b, p, d])?;
        for i in 0..c.n_temporal_layers {
            x = transformer_layer(g, x, &format!("temporal.{i}"), &pv, &mut ctx)?;
        }
        let x = g.layer_norm(x, Some(pv("final_ln.gamma")?), Some(pv("final_ln.beta")?), LN_EPS)?;
        let pooled = g.mean_axis(x, 1)?;

        let mut heads = Vec::with_capacity(c.head_categories.len());
        for h in &c.head_categories {
            let y = linear(g, pooled, pv(&format!("head.{h}.weight"))?, pv(&format!("head.{h}.bias"))?)?;
            heads.push(g.l2_normalize(y, 1)?);
        }
        Ok(Built { heads, params: tracked })
    }

    /// Forward pass without gradient tracking. Dropout is applied only when
    /// `train_rng` is supplied.
    pub fn encode(&self, batch: &Tensor<T>, train_rng: Option<&mut ChaCha8Rng>) -> Result<HeadEmbeddings<T>> {
        let mut g = Graph::new();
        let input = g.constant(batch.clone());
        let built = self.build(&mut g, input, false, train_rng)?;
        Ok(HeadEmbeddings {
            heads: self
                .config
                .head_categories
                .iter()
                .zip(&built.heads)
                .map(|(n, &v)| (n.clone(), g.value(v).clone()))
                .collect(),
        })
    }

    /// Encodes a large set in fixed-size chunks (evaluation mode).
    pub fn encode_chunked(&self, batch: &Tensor<T>, chunk: usize) -> Result<HeadEmbeddings<T>> {
        self.check_input(batch.shape())?;
        let (n, per) = (batch.shape()[0], self.config.channels * self.config.samples);
        let mut parts: Vec<Vec<T>> = vec![Vec::new(); self.config.head_categories.len()];
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let sub = Tensor::new(
                [end - start, self.config.channels, self.config.samples],
                batch.data()[start * per..end * per].to_vec(),
            )?;
            let out = self.encode(&sub, None)?;
            for (acc, (_, t)) in parts.iter_mut().zip(out.heads) {
                acc.extend_from_slice(t.data());
            }
            start = end;
        }
        let dim = self.config.proj_dim;
        Ok(HeadEmbeddings {
            heads: self
                .config
                .head_categories
                .iter()
                .zip(parts)
                .map(|(name, data)| Ok((name.clone(), Tensor::new([n, dim], data)?)))
                .collect::<Result<_>>()?,
        })
    }
}

impl<T: Real> EmbeddingModel<T> for Encoder<T> {
    fn head_names(&self) -> Vec<String> {
        self.config.head_categories.clone()
    }
    fn channels(&self) -> usize {
        self.config.channels
    }
    fn samples(&self) -> usize {
        self.config.samples
    }
    fn build_heads(&self, g: &mut Graph<T>, input: Var) -> Result<Vec<Var>> {
        Ok(self.build(g, input, false, None)?.heads)
    }
}

/// Runs `model` on `batch` with gradient tracking on the input, reduces the
/// head embeddings to a scalar with `loss_fn`, and returns that loss and
/// its gradient with respect to the batch.
pub fn encode_with_input_grad<T, M, F>(model: &M, batch: &Tensor<T>, loss_fn: F) -> Result<(T, Tensor<T>)>
where
    T: Real,
    M: EmbeddingModel<T> + ?Sized,
    F: FnOnce(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let input = g.param(batch.clone());
    let heads = model.build_heads(&mut g, input)?;
    let loss = loss_fn(&mut g, &heads)?;
    let value = g
        .value(loss)
        .item()
        .ok_or_else(|| Error::Contract("loss function must return a scalar".into()))?;
    let mut grads = g.backward(loss)?;
    let grad = grads
        .take(input)
        .unwrap_or_else(|| Tensor::zeros(batch.shape().to_vec()));
    Ok((value, grad))
}

struct LayerCtx<'r> {
    heads: usize,
    dropout: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl LayerCtx<'_> {
    fn dropout<T: Real>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if self.dropout <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.dropout;
        let scale = T::from_f64(1.0 / keep);
        let shape = g.shape(x).to_vec();
        let mask = Tensor::from_fn(shape, |_| if rng.gen::<f64>() < keep { scale } else { T::zero() });
        let m = g.constant(mask);
        g.mul(x, m)
    }
}

fn linear<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// Pre-norm transformer block on `[N, L, d]`.
fn transformer_layer<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    prefix: &str,
    pv: &dyn Fn(&str) -> Result<Var>,
    ctx: &mut LayerCtx<'_>,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (n, l, d) = (shape[0], shape[1], shape[2]);
    let nh = ctx.heads;
    let dh = d / nh;
    let p = |s: &str| pv(&format!("{prefix}.{s}"));

    let h = g.layer_norm(x, Some(p("ln1.gamma")?), Some(p("ln1.beta")?), LN_EPS)?;
    let h = g.reshape(h, [n * l, d])?;
    let mut split = |w: &str| -> Result<Var> {
        let y = linear(g, h, p(&format!("attn.{w}.weight"))?, p(&format!("attn.{w}.bias"))?)?;
        let y = g.reshape(y, [n, l, nh, dh])?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        g.reshape(y, [n * nh, l, dh])
    };
    let q = split("q")?;
    let k = split("k")?;
    let v = split("v")?;
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = g.softmax(scores, 2)?;
    let o = g.bmm(attn, v, false)?;
    let o = g.reshape(o, [n, nh, l, dh])?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let o = g.reshape(o, [n * l, d])?;
    let o = linear(g, o, p("attn.o.weight")?, p("attn.o.bias")?)?;
    let o = ctx.dropout(g, o)?;
    let o = g.reshape(o, [n, l, d])?;
    let x = g.add(x, o)?;

    let h = g.layer_norm(x, Some(p("ln2.gamma")?), Some(p("ln2.beta")?), LN_EPS)?;
    let h = g.reshape(h, [n * l, d])?;
    let h = linear(g, h, p("ff1.weight")?, p("ff1.bias")?)?;
    let h = g.gelu(h);
    let h = linear(g, h, p("ff2.weight")?, p("ff2.bias")?)?;
    let h = ctx.dropout(g, h)?;
    let h = g.reshape(h, [n, l, d])?;
    g.add(x, h)
}

/// Encoder weights plus the training metadata stored alongside them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub params: EncoderParams<f32>,
    pub seed: u64,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
    pub temperature: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    config: EncoderConfig,
    seed: u64,
    epoch: usize,
    loss_history: Vec<f64>,
    temperature: f64,
    parameters: Vec<String>,
}

impl Checkpoint {
    pub fn encoder(&self) -> Result<Encoder<f32>> {
        Encoder::new(self.config.clone(), self.params.clone())
    }

    /// Writes `manifest.json` and one `<name>.nsem` per parameter into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let manifest = CheckpointManifest {
            config: self.config.clone(),
            seed: self.seed,
            epoch: self.epoch,
            loss_history: self.loss_history.clone(),
            temperature: self.temperature,
            parameters: self.params.tensors.keys().cloned().collect(),
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::file(&path, e))?;
        for (name, t) in &self.params.tensors {
            write_nsem(dir.join(format!("{name}.nsem")), t)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("bad checkpoint manifest: {e}")))?;
        let mut tensors = BTreeMap::new();
        for name in &manifest.parameters {
            tensors.insert(name.clone(), read_nsem::<f32>(dir.join(format!("{name}.nsem")))?);
        }
        let params = EncoderParams { tensors };
        params.check_shapes(&manifest.config)?;
        Ok(Self {
            config: manifest.config,
            params,
            seed: manifest.seed,
            epoch: manifest.epoch,
            loss_history: manifest.loss_history,
            temperature: manifest.temperature,
        })
    }
}
