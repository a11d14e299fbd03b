//! Contrastive alignment of head embeddings to caption embeddings.

use std::collections::BTreeMap;

use rand::Rng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::caption_bank::CaptionBank;
use crate::eeg_data::EegDataset;
use crate::encoder::{Checkpoint, Encoder, EncoderConfig};
use crate::error::{contract, dim_err, Error, Result};
use crate::retrieval::{retrieval_accuracy, retrieve_all};
use crate::rng::SeedStreams;
use crate::tensor::{AdamConfig, AdamState, Graph, Real, Tensor, Var};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;
/// Upper bound on the learned logit scale, as in CLIP.
const MAX_LOGIT_SCALE: f64 = 100.0;
const MASK_LOGIT: f64 = -1e9;
const LOGIT_SCALE: &str = "logit_scale";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Contrastive,
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub loss_kind: LossKind,
    /// Heads that contribute to the loss; `None` means all of them.
    pub active_heads: Option<Vec<String>>,
    pub seed: u64,
    pub checkpoint_every: Option<usize>,
    pub learnable_temperature: bool,
    /// Drop same-class off-diagonal pairs from the contrastive denominators.
    pub mask_duplicate_positives: bool,
    /// k for the per-epoch validation retrieval accuracy.
    pub eval_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 50,
            learning_rate: 1e-3,
            temperature: DEFAULT_TEMPERATURE,
            loss_kind: LossKind::Contrastive,
            active_heads: None,
            seed: 0,
            checkpoint_every: None,
            learnable_temperature: false,
            mask_duplicate_positives: false,
            eval_k: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, encoder: &EncoderConfig) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.batch_size < 2 && self.loss_kind == LossKind::Contrastive {
            return fail(format!("contrastive loss needs batch_size >= 2, got {}", self.batch_size));
        }
        if self.batch_size == 0 || self.eval_k == 0 {
            return fail("batch_size and eval_k must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if self.checkpoint_every == Some(0) {
            return fail("checkpoint_every must be positive".into());
        }
        if let Some(heads) = &self.active_heads {
            if heads.is_empty() {
                return fail("active_heads is empty".into());
            }
            for h in heads {
                if !encoder.head_categories.contains(h) {
                    return fail(format!("active head {h} is not an encoder head"));
                }
            }
        }
        Ok(())
    }

    /// Active heads in encoder order.
    pub fn heads(&self, encoder: &EncoderConfig) -> Vec<String> {
        encoder
            .head_categories
            .iter()
            .filter(|h| self.active_heads.as_ref().map_or(true, |a| a.contains(h)))
            .cloned()
            .collect()
    }
}

/// How the contrastive logits are scaled.
#[derive(Clone, Copy, Debug)]
pub enum LogitScale {
    /// Divide by a fixed temperature.
    Temperature(f64),
    /// Multiply by `exp(v)` for a scalar graph node `v`.
    Learned(Var),
}

fn check_pair<T: Real>(e: &Tensor<T>, t: &Tensor<T>) -> Result<()> {
    if e.shape() != t.shape() || e.ndim() != 2 {
        return Err(dim_err!(
            "embedding batches {:?} and {:?} must be equal-shaped matrices",
            e.shape(),
            t.shape()
        ));
    }
    Ok(())
}

/// Symmetric InfoNCE on graph nodes `e`, `t` of shape `B × D`. With
/// `same_class` given, off-diagonal pairs sharing a class are excluded from
/// both softmax denominators.
pub fn infonce_graph<T: Real>(
    g: &mut Graph<T>,
    e: Var,
    t: Var,
    scale: LogitScale,
    same_class: Option<&[usize]>,
) -> Result<Var> {
    let b = g.shape(e)[0];
    contract!(b >= 2, "contrastive loss needs at least 2 pairs, got {b}");
    let sim = g.matmul_t(e, t, false, true)?;
    let mut logits = match scale {
        LogitScale::Temperature(tau) => {
            contract!(tau > 0.0, "temperature must be positive, got {tau}");
            g.scale(sim, 1.0 / tau)
        }
        LogitScale::Learned(v) => {
            let s = g.exp(v);
            g.mul(sim, s)?
        }
    };
    if let Some(labels) = same_class {
        contract!(labels.len() == b, "{} labels for a batch of {b}", labels.len());
        let mask = Tensor::from_fn([b, b], |k| {
            let (i, j) = (k / b, k % b);
            if i != j && labels[i] == labels[j] {
                T::from_f64(MASK_LOGIT)
            } else {
                T::zero()
            }
        });
        let m = g.constant(mask);
        logits = g.add(logits, m)?;
    }
    let diag: Vec<usize> = (0..b).collect();
    let rows = g.cross_entropy(logits, &diag)?;
    let lt = g.transpose(logits)?;
    let cols = g.cross_entropy(lt, &diag)?;
    let sum = g.add(rows, cols)?;
    Ok(g.scale(sum, 0.5))
}

/// `½[CE(E·Tᵀ/τ, diag) + CE((E·Tᵀ/τ)ᵀ, diag)]`.
pub fn infonce_symmetric<T: Real>(e: &Tensor<T>, t: &Tensor<T>, tau: f64) -> Result<f64> {
    check_pair(e, t)?;
    contract!(e.shape()[0] >= 2, "contrastive loss needs at least 2 pairs, got {}", e.shape()[0]);
    contract!(tau > 0.0, "temperature must be positive, got {tau}");
    let mut g = Graph::new();
    let (ev, tv) = (g.constant(e.clone()), g.constant(t.clone()));
    let loss = infonce_graph(&mut g, ev, tv, LogitScale::Temperature(tau), None)?;
    Ok(g.value(loss).data()[0].to_f64())
}

pub fn mse_graph<T: Real>(g: &mut Graph<T>, e: Var, t: Var) -> Result<Var> {
    let d = g.sub(e, t)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// Mean of `(e - t)²` over every entry.
pub fn mse_alignment_loss<T: Real>(e: &Tensor<T>, t: &Tensor<T>) -> Result<f64> {
    check_pair(e, t)?;
    let n = e.numel() as f64;
    Ok(e.data()
        .iter()
        .zip(t.data())
        .map(|(&a, &b)| (a.to_f64() - b.to_f64()).powi(2))
        .sum::<f64>()
        / n)
}

/// For each head, a `B × D` matrix whose row `i` is the embedding of a caption
/// of class `labels[i]` in that head's category, drawn uniformly when several
/// exist.
pub fn batch_pair(labels: &[usize], bank: &CaptionBank, heads: &[String], rng: &mut ChaCha8Rng) -> Result<Vec<Tensor<f32>>> {
    let d = bank.dim();
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(heads.len());
    for h in heads {
        let mut data = Vec::with_capacity(labels.len() * d);
        for &c in labels {
            let pool = bank.captions_for(c, h)?;
            if pool.is_empty() {
                missing.push((c, h.clone()));
                data.extend(std::iter::repeat(0.0).take(d));
                continue;
            }
            let pick = if pool.len() == 1 { 0 } else { rng.gen_range(0..pool.len()) };
            data.extend_from_slice(&pool[pick].embedding);
        }
        out.push(Tensor::new([labels.len(), d], data)?);
    }
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(Error::Coverage(missing));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Validation top-k retrieval accuracy per active head; empty without a
    /// validation set.
    pub accuracy: Vec<(String, f64)>,
}

impl EpochRecord {
    pub fn mean_accuracy(&self) -> Option<f64> {
        if self.accuracy.is_empty() {
            return None;
        }
        Some(self.accuracy.iter().map(|(_, a)| a).sum::<f64>() / self.accuracy.len() as f64)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    /// `epoch,loss,<head>:acc,...`, one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss");
        if let Some(first) = self.records.first() {
            for (h, _) in &first.accuracy {
                s.push_str(&format!(",{h}:acc"));
            }
        }
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!("{},{}", r.epoch, r.loss));
            for (_, a) in &r.accuracy {
                s.push_str(&format!(",{a}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

pub struct TrainOutcome {
    pub final_checkpoint: Checkpoint,
    /// Highest mean validation accuracy (earliest on ties); the final
    /// checkpoint when there is no validation set.
    pub best_checkpoint: Checkpoint,
    /// Snapshots taken every `checkpoint_every` epochs.
    pub periodic: Vec<Checkpoint>,
    pub history: TrainHistory,
}

/// Top-k retrieval accuracy of `encoder` on `dataset`, per head in `heads`.
pub fn evaluate_retrieval(
    encoder: &Encoder<f32>,
    dataset: &EegDataset,
    bank: &CaptionBank,
    k: usize,
    heads: &[String],
) -> Result<Vec<(String, f64)>> {
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let mut emb = encoder.encode_chunked(&dataset.batch_tensor(&indices), 64)?;
    emb.heads.retain(|(n, _)| heads.contains(n));
    let results = retrieve_all(&emb, bank, k, &indices)?;
    retrieval_accuracy(&results, &dataset.labels(), bank)
}

/// Trains a freshly initialised encoder. The total loss is the unweighted sum
/// of the active heads' losses; batches are reshuffled every epoch.
pub fn train(
    train_set: &EegDataset,
    val_set: Option<&EegDataset>,
    bank: &CaptionBank,
    encoder_config: &EncoderConfig,
    config: &TrainConfig,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    encoder_config.validate_against(bank.taxonomy())?;
    config.validate(encoder_config)?;
    if encoder_config.proj_dim != bank.dim() {
        return Err(Error::Config(format!(
            "encoder proj_dim {} differs from caption dimension {}",
            encoder_config.proj_dim,
            bank.dim()
        )));
    }
    for ds in std::iter::once(train_set).chain(val_set) {
        if ds.channels != encoder_config.channels || ds.samples != encoder_config.samples {
            return Err(dim_err!(
                "dataset is {}×{} but the encoder expects {}×{}",
                ds.channels,
                ds.samples,
                encoder_config.channels,
                encoder_config.samples
            ));
        }
    }
    let min_batch = if config.loss_kind == LossKind::Contrastive { 2 } else { 1 };
    contract!(train_set.len() >= min_batch, "training set has {} epochs", train_set.len());

    let heads = config.heads(encoder_config);
    let head_slots: Vec<usize> = heads
        .iter()
        .map(|h| encoder_config.head_categories.iter().position(|c| c == h).unwrap_or(0))
        .collect();
    let streams = SeedStreams::new(config.seed);
    let mut encoder = Encoder::<f32>::init(encoder_config.clone())?;
    let mut logit_scale = Tensor::scalar((1.0 / config.temperature).ln() as f32);
    let adam_config = AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut adam = {
        let mut all = encoder.params.tensors.clone();
        if config.learnable_temperature {
            all.insert(LOGIT_SCALE.to_string(), logit_scale.clone());
        }
        AdamState::new(adam_config, &all)
    };

    let labels = train_set.labels();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory::default();
    let mut periodic = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut step = 0u64;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut streams.indexed("train.shuffle", epoch as u64));
        let mut chunks: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < min_batch) {
            chunks.pop();
        }
        let mut total = 0.0;
        for chunk in &chunks {
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let targets = batch_pair(&batch_labels, bank, &heads, &mut streams.indexed("train.pairs", step))?;

            let mut g = Graph::<f32>::new();
            let input = g.constant(train_set.batch_tensor(chunk));
            let mut drop_rng = streams.indexed("train.dropout", step);
            let built = encoder.build(&mut g, input, true, Some(&mut drop_rng))?;
            let scale_var = config
                .learnable_temperature
                .then(|| g.param(logit_scale.clone()));
            let mut loss: Option<Var> = None;
            for (&slot, target) in head_slots.iter().zip(targets) {
                let t = g.constant(target);
                let e = built.heads[slot];
                let l = match config.loss_kind {
                    LossKind::Contrastive => {
                        let scale = match scale_var {
                            Some(v) => LogitScale::Learned(v),
                            None => LogitScale::Temperature(config.temperature),
                        };
                        let mask = config.mask_duplicate_positives.then_some(batch_labels.as_slice());
                        infonce_graph(&mut g, e, t, scale, mask)?
                    }
                    LossKind::Mse => mse_graph(&mut g, e, t)?,
                };
                loss = Some(match loss {
                    None => l,
                    Some(acc) => g.add(acc, l)?,
                });
            }
            let loss = loss.ok_or_else(|| Error::Config("no active heads".into()))?;
            let value = g.value(loss).data()[0].to_f64();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss became {value} at epoch {epoch}")));
            }
            total += value;

            let mut grads = g.backward(loss)?;
            let mut grad_map = BTreeMap::new();
            for (name, v) in &built.params {
                if let Some(gr) = grads.take(*v) {
                    grad_map.insert(name.clone(), gr);
                }
            }
            if let Some(v) = scale_var {
                if let Some(gr) = grads.take(v) {
                    grad_map.insert(LOGIT_SCALE.to_string(), gr);
                }
                encoder.params.tensors.insert(LOGIT_SCALE.to_string(), logit_scale.clone());
                adam.step(&mut encoder.params.tensors, &grad_map)?;
                logit_scale = encoder.params.tensors.remove(LOGIT_SCALE).expect("inserted above");
                let capped = (logit_scale.data()[0] as f64).min(MAX_LOGIT_SCALE.ln());
                logit_scale = Tensor::scalar(capped as f32);
            } else {
                adam.step(&mut encoder.params.tensors, &grad_map)?;
            }
            step += 1;
        }

        let accuracy = match val_set {
            Some(v) => evaluate_retrieval(&encoder, v, bank, config.eval_k, &heads)?,
            None => Vec::new(),
        };
        let record = EpochRecord {
            epoch,
            loss: total / chunks.len() as f64,
            accuracy,
        };
        progress(&record);
        let temperature = current_temperature(config, &logit_scale);
        let snapshot = |history: &TrainHistory| Checkpoint {
            config: encoder_config.clone(),
            params: encoder.params.clone(),
            seed: config.seed,
            epoch,
            loss_history: history.losses(),
            temperature,
        };
        history.records.push(record);
        if let Some(mean) = history.records.last().and_then(EpochRecord::mean_accuracy) {
            if best.as_ref().map_or(true, |(b, _)| mean > *b) {
                best = Some((mean, snapshot(&history)));
            }
        }
        if config.checkpoint_every.is_some_and(|n| epoch % n == 0) {
            periodic.push(snapshot(&history));
        }
    }

    let final_checkpoint = Checkpoint {
        config: encoder_config.clone(),
        params: encoder.params,
        seed: config.seed,
        epoch: config.epochs,
        loss_history: history.losses(),
        temperature: current_temperature(config, &logit_scale),
    };
    let best_checkpoint = best.map_or_else(|| final_checkpoint.clone(), |(_, c)| c);
    Ok(TrainOutcome {
        final_checkpoint,
        best_checkpoint,
        periodic,
        history,
    })
}

fn current_temperature(config: &TrainConfig, logit_scale: &Tensor<f32>) -> f64 {
    if config.learnable_temperature {
        1.0 / (logit_scale.data()[0] as f64).exp()
    } else {
        config.temperature
    }
}
