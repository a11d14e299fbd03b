//! Per-head caption retrieval, prompt assembly, ensemble voting and head
//! dominance.

mod dispatch;
mod stub;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::caption_bank::{CaptionBank, CaptionEntry, Taxonomy};
use crate::encoder::HeadEmbeddings;
use crate::error::{contract, dim_err, Error, Result};

pub use dispatch::{dispatch_all, dispatch_prompt, DispatchOutcome, Endpoint, DEFAULT_CONCURRENCY, DEFAULT_TIMEOUT};
pub use stub::{tiny_png, StubOptions, StubRequest, StubServer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub id: String,
    pub score: f64,
}

/// Ranked matches for one epoch, one list per head in head order.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub epoch: usize,
    pub per_head: Vec<(String, Vec<Match>)>,
}

impl RetrievalResult {
    pub fn head(&self, name: &str) -> Option<&[Match]> {
        self.per_head.iter().find(|(n, _)| n == name).map(|(_, m)| m.as_slice())
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Top-`k` candidates by dot product (cosine for unit vectors), ties broken
/// by ascending id.
pub fn topk_captions(query: &[f32], candidates: &[&CaptionEntry], k: usize) -> Result<Vec<Match>> {
    contract!(!candidates.is_empty(), "no candidate captions to rank");
    contract!(k >= 1, "k must be at least 1");
    let mut scored = Vec::with_capacity(candidates.len());
    for c in candidates {
        if c.embedding.len() != query.len() {
            return Err(dim_err!(
                "query has dimension {} but caption {} has {}",
                query.len(),
                c.id,
                c.embedding.len()
            ));
        }
        scored.push((dot(query, &c.embedding).clamp(-1.0, 1.0), c.id.as_str()));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(score, id)| Match { id: id.to_string(), score })
        .collect())
}

/// Retrieves within each head's own category subset for every row of
/// `heads`. Row `i` is reported with epoch index `epochs[i]`.
pub fn retrieve_all(
    heads: &HeadEmbeddings<f32>,
    bank: &CaptionBank,
    k: usize,
    epochs: &[usize],
) -> Result<Vec<RetrievalResult>> {
    let mut subsets = Vec::with_capacity(heads.len());
    for (name, t) in &heads.heads {
        if t.shape().len() != 2 || t.shape()[0] != epochs.len() {
            return Err(dim_err!(
                "head {name} embeddings {:?} do not match {} epochs",
                t.shape(),
                epochs.len()
            ));
        }
        subsets.push(bank.category_subset(name)?);
    }
    epochs
        .iter()
        .enumerate()
        .map(|(row, &epoch)| {
            let per_head = heads
                .heads
                .iter()
                .zip(&subsets)
                .map(|((name, t), subset)| Ok((name.clone(), topk_captions(t.row(row), subset, k)?)))
                .collect::<Result<_>>()?;
            Ok(RetrievalResult { epoch, per_head })
        })
        .collect()
}

/// Fraction of epochs where any of a head's top-`k` captions has the true class.
pub fn retrieval_accuracy(results: &[RetrievalResult], labels: &[usize], bank: &CaptionBank) -> Result<Vec<(String, f64)>> {
    contract!(results.len() == labels.len(), "{} results for {} labels", results.len(), labels.len());
    let Some(first) = results.first() else {
        return Ok(Vec::new());
    };
    let mut out = Vec::with_capacity(first.per_head.len());
    for (h, (name, _)) in first.per_head.iter().enumerate() {
        let mut hits = 0usize;
        for (r, &label) in results.iter().zip(labels) {
            let matches = &r.per_head[h].1;
            for m in matches {
                if bank.class_of(&m.id)? == label {
                    hits += 1;
                    break;
                }
            }
        }
        out.push((name.clone(), hits as f64 / results.len() as f64));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptPolicy {
    /// Top-1 caption of every head.
    #[default]
    AllHeads,
    /// Top-1 captions of the `n` heads with the highest top-1 scores.
    TopHeads(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub epoch: usize,
    pub prompt: String,
    /// `(head, caption id)` pairs that contributed, in prompt order.
    pub sources: Vec<(String, String)>,
}

/// Joins top-1 caption texts Low → Mid → High (taxonomy order within a
/// level) with ", ", dropping exact duplicate texts.
pub fn assemble_prompt(result: &RetrievalResult, bank: &CaptionBank, policy: PromptPolicy) -> Result<PromptBundle> {
    let taxonomy = bank.taxonomy();
    let mut tops: Vec<(usize, &str, &Match)> = Vec::new();
    for (name, matches) in &result.per_head {
        let idx = taxonomy
            .index_of(name)
            .ok_or_else(|| Error::Lookup(format!("unknown head {name}")))?;
        if let Some(m) = matches.first() {
            tops.push((idx, name.as_str(), m));
        }
    }
    if let PromptPolicy::TopHeads(n) = policy {
        tops.sort_by(|a, b| b.2.score.total_cmp(&a.2.score).then(a.0.cmp(&b.0)));
        tops.truncate(n);
    }
    let rank: Vec<usize> = {
        let order = taxonomy.level_order();
        let mut rank = vec![0; order.len()];
        for (r, &i) in order.iter().enumerate() {
            rank[i] = r;
        }
        rank
    };
    tops.sort_by_key(|t| rank[t.0]);

    let mut texts: Vec<&str> = Vec::new();
    let mut sources = Vec::new();
    for (_, head, m) in tops {
        let entry = bank.get(&m.id)?;
        sources.push((head.to_string(), m.id.clone()));
        if !texts.contains(&entry.text.as_str()) {
            texts.push(&entry.text);
        }
    }
    Ok(PromptBundle {
        epoch: result.epoch,
        prompt: texts.join(", "),
        sources,
    })
}

/// Majority vote over each head's top-1 class. Ties go to the largest summed
/// cosine, then the lowest class.
pub fn ensemble_classify(result: &RetrievalResult, bank: &CaptionBank) -> Result<usize> {
    let mut tally: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for (name, matches) in &result.per_head {
        let top = matches
            .first()
            .ok_or_else(|| Error::Contract(format!("head {name} retrieved nothing")))?;
        let slot = tally.entry(bank.class_of(&top.id)?).or_insert((0, 0.0));
        slot.0 += 1;
        slot.1 += top.score;
    }
    tally
        .into_iter()
        .max_by(|a, b| {
            (a.1 .0)
                .cmp(&b.1 .0)
                .then(a.1 .1.total_cmp(&b.1 .1))
                .then(b.0.cmp(&a.0))
        })
        .map(|(class, _)| class)
        .ok_or_else(|| Error::Contract("no heads to vote".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    pub epochs: usize,
    /// `(head, fraction)` in taxonomy order.
    pub fractions: Vec<(String, f64)>,
}

impl DominanceReport {
    pub fn fraction(&self, head: &str) -> Option<f64> {
        self.fractions.iter().find(|(h, _)| h == head).map(|&(_, f)| f)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("head,fraction\n");
        for (h, f) in &self.fractions {
            s.push_str(&format!("{h},{f}\n"));
        }
        s
    }
}

/// Per epoch, the head with the largest top-1 cosine wins (ties go to the
/// lowest taxonomy index); counts are normalised by the epoch count.
pub fn head_dominance(results: &[RetrievalResult], taxonomy: &Taxonomy) -> Result<DominanceReport> {
    contract!(!results.is_empty(), "dominance needs at least one epoch");
    let mut heads: Vec<(usize, String)> = Vec::new();
    for (name, _) in &results[0].per_head {
        let idx = taxonomy
            .index_of(name)
            .ok_or_else(|| Error::Lookup(format!("unknown head {name}")))?;
        heads.push((idx, name.clone()));
    }
    heads.sort();
    let mut counts = vec![0usize; heads.len()];
    for r in results {
        let mut best: Option<(usize, f64)> = None;
        for (slot, (_, name)) in heads.iter().enumerate() {
            let top = r
                .head(name)
                .and_then(|m| m.first())
                .ok_or_else(|| Error::Contract(format!("epoch {} has no match for head {name}", r.epoch)))?;
            if best.map_or(true, |(_, s)| top.score > s) {
                best = Some((slot, top.score));
            }
        }
        if let Some((slot, _)) = best {
            counts[slot] += 1;
        }
    }
    let n = results.len() as f64;
    Ok(DominanceReport {
        epochs: results.len(),
        fractions: heads
            .into_iter()
            .zip(counts)
            .map(|((_, name), c)| (name, c as f64 / n))
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub epoch: usize,
    pub true_class: usize,
    pub predicted_class: usize,
    pub per_head: BTreeMap<String, Vec<Match>>,
    pub prompt: String,
}

impl ManifestRow {
    pub fn new(result: &RetrievalResult, true_class: usize, predicted_class: usize, prompt: &PromptBundle) -> Self {
        Self {
            epoch: result.epoch,
            true_class,
            predicted_class,
            per_head: result.per_head.iter().cloned().collect(),
            prompt: prompt.prompt.clone(),
        }
    }
}

pub fn write_manifest(path: impl AsRef<Path>, rows: &[ManifestRow]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    f.write_all(&out).map_err(|e| Error::file(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Schema {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
