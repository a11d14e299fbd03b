//! Input-gradient saliency reduced to per-channel scores, and topographic
//! rendering of those scores.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::caption_bank::CaptionBank;
use crate::eeg_data::ZSCORE_EPS;
use crate::encoder::{encode_with_input_grad, EmbeddingModel};
use crate::error::{contract, dim_err, Error, Result};
use crate::rng::SeedStreams;
use crate::tensor::{Real, Tensor, Var};
use crate::trainer::{batch_pair, infonce_graph, LogitScale};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", from = "String")]
pub enum HeadScope {
    #[default]
    All,
    Head(String),
}

impl From<String> for HeadScope {
    fn from(s: String) -> Self {
        if s == "all" {
            HeadScope::All
        } else {
            HeadScope::Head(s)
        }
    }
}

impl From<HeadScope> for String {
    fn from(h: HeadScope) -> Self {
        h.to_string()
    }
}

impl fmt::Display for HeadScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadScope::All => f.write_str("all"),
            HeadScope::Head(h) => f.write_str(h),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub per_channel: Vec<f64>,
    pub channel_names: Vec<String>,
    pub head_scope: HeadScope,
}

impl SaliencyMap {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("channel,score\n");
        for (n, v) in self.channel_names.iter().zip(&self.per_channel) {
            let _ = writeln!(s, "{n},{v}");
        }
        s
    }

    /// Channel indices from most to least salient (ties by index).
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.per_channel.len()).collect();
        idx.sort_by(|&a, &b| self.per_channel[b].total_cmp(&self.per_channel[a]).then(a.cmp(&b)));
        idx
    }
}

/// Mean over batch and time of `|∂loss/∂input|`, where the loss is the
/// contrastive alignment of the model's heads (or one head) with caption
/// targets drawn for `labels`. Target sampling is seeded by `seed`.
#[allow(clippy::too_many_arguments)]
pub fn compute_saliency<T: Real, M: EmbeddingModel<T> + ?Sized>(
    model: &M,
    batch: &Tensor<T>,
    labels: &[usize],
    bank: &CaptionBank,
    scope: &HeadScope,
    channel_names: &[String],
    temperature: f64,
    seed: u64,
) -> Result<SaliencyMap> {
    let shape = batch.shape().to_vec();
    if shape.len() != 3 || shape[1] != model.channels() || shape[2] != model.samples() {
        return Err(dim_err!(
            "saliency batch {shape:?} does not match [B, {}, {}]",
            model.channels(),
            model.samples()
        ));
    }
    contract!(shape[0] >= 2, "saliency needs at least 2 epochs for the contrastive loss");
    contract!(labels.len() == shape[0], "{} labels for {} epochs", labels.len(), shape[0]);
    if channel_names.len() != shape[1] {
        return Err(dim_err!("{} channel names for {} channels", channel_names.len(), shape[1]));
    }
    let names = model.head_names();
    let slots: Vec<usize> = match scope {
        HeadScope::All => (0..names.len()).collect(),
        HeadScope::Head(h) => vec![names
            .iter()
            .position(|n| n == h)
            .ok_or_else(|| Error::Lookup(format!("model has no head {h}")))?],
    };
    let heads: Vec<String> = slots.iter().map(|&i| names[i].clone()).collect();
    let mut rng = SeedStreams::new(seed).stream("saliency.pairs");
    let targets = batch_pair(labels, bank, &heads, &mut rng)?;

    // Attribute to the standardised epoch the network actually sees; the
    // raw-signal gradient carries an extra 1/std factor per channel.
    let standardised = standardise(batch, shape[2]);
    let (_, grad) = encode_with_input_grad(model, &standardised, |g, outs: &[Var]| {
        let mut total: Option<Var> = None;
        for (&slot, t) in slots.iter().zip(&targets) {
            let tv = g.constant(t.cast());
            let l = infonce_graph(g, outs[slot], tv, LogitScale::Temperature(temperature), None)?;
            total = Some(match total {
                None => l,
                Some(acc) => g.add(acc, l)?,
            });
        }
        total.ok_or_else(|| Error::Contract("empty head scope".into()))
    })?;

    let (b, c, t) = (shape[0], shape[1], shape[2]);
    let mut per_channel = vec![0.0; c];
    for bi in 0..b {
        for (ci, acc) in per_channel.iter_mut().enumerate() {
            let row = &grad.data()[(bi * c + ci) * t..(bi * c + ci + 1) * t];
            *acc += row.iter().map(|v| Real::to_f64(*v).abs()).sum::<f64>();
        }
    }
    let n = (b * t) as f64;
    per_channel.iter_mut().for_each(|v| *v /= n);
    Ok(SaliencyMap {
        per_channel,
        channel_names: channel_names.to_vec(),
        head_scope: scope.clone(),
    })
}

/// Per-row z-score over the last axis, matching the dataset preprocessing.
fn standardise<T: Real>(batch: &Tensor<T>, samples: usize) -> Tensor<T> {
    let mut out = batch.clone();
    for row in out.data_mut().chunks_mut(samples) {
        let n = samples as f64;
        let mean = row.iter().map(|v| Real::to_f64(*v)).sum::<f64>() / n;
        let var = row.iter().map(|v| (Real::to_f64(*v) - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + ZSCORE_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = T::from_f64((Real::to_f64(*v) - mean) * inv));
    }
    out
}

/// Channel positions inside the unit head circle.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelLayout {
    positions: Vec<(String, f64, f64)>,
}

#[derive(Deserialize)]
struct LayoutRow {
    name: String,
    x: f64,
    y: f64,
}

impl ChannelLayout {
    pub fn new(positions: Vec<(String, f64, f64)>) -> Result<Self> {
        for (n, x, y) in &positions {
            if !(x.is_finite() && y.is_finite() && x.abs() <= 1.0 && y.abs() <= 1.0) {
                return Err(Error::Data(format!("channel {n} position ({x}, {y}) is outside [-1, 1]")));
            }
        }
        Ok(Self { positions })
    }

    /// Reads a `name,x,y` CSV with a header row.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path)?;
        let mut positions = Vec::new();
        for row in reader.deserialize() {
            let r: LayoutRow = row?;
            positions.push((r.name, r.x, r.y));
        }
        Self::new(positions)
    }

    /// Channels spread over concentric rings, for data without a montage.
    pub fn rings(names: &[String]) -> Self {
        let n = names.len();
        let mut positions = Vec::with_capacity(n);
        let mut placed = 0;
        let mut ring = 0;
        while placed < n {
            let (radius, capacity) = if ring == 0 { (0.0, 1) } else { (0.85 * ring as f64 / 3.0, 6 * ring) };
            let count = capacity.min(n - placed);
            for j in 0..count {
                let a = std::f64::consts::TAU * j as f64 / count as f64 + 0.5 * ring as f64;
                positions.push((names[placed + j].clone(), radius * a.cos(), radius * a.sin()));
            }
            placed += count;
            ring += 1;
            if ring > 3 {
                let (r, step) = (0.95, n - placed);
                for j in 0..step {
                    let a = std::f64::consts::TAU * j as f64 / step as f64;
                    positions.push((names[placed + j].clone(), r * a.cos(), r * a.sin()));
                }
                placed = n;
            }
        }
        Self { positions }
    }

    pub fn position(&self, name: &str) -> Option<(f64, f64)> {
        self.positions.iter().find(|(n, _, _)| n == name).map(|&(_, x, y)| (x, y))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,x,y\n");
        for (n, x, y) in &self.positions {
            let _ = writeln!(s, "{n},{x},{y}");
        }
        s
    }

    fn points(&self, map: &SaliencyMap) -> Result<Vec<(f64, f64, f64)>> {
        map.channel_names
            .iter()
            .zip(&map.per_channel)
            .map(|(n, &s)| {
                let (x, y) = self.position(n).ok_or_else(|| Error::Layout(n.clone()))?;
                Ok((x, y, s))
            })
            .collect()
    }
}

pub const TOPOMAP_GRID: usize = 64;
const IDW_POWER: f64 = 2.0;

/// Inverse-distance-weighted value at `(x, y)`; exact at a channel position.
pub fn idw(points: &[(f64, f64, f64)], x: f64, y: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for &(px, py, s) in points {
        let d2 = (x - px).powi(2) + (y - py).powi(2);
        if d2 < 1e-24 {
            return s;
        }
        let w = 1.0 / d2.powf(IDW_POWER / 2.0);
        num += w * s;
        den += w;
    }
    num / den
}

/// Interpolated field on the grid: `None` outside the unit circle. Cell
/// `(row, col)` is centred at `x = -1 + (col + 0.5)·h`, `y = 1 - (row + 0.5)·h`.
pub fn topomap_field(map: &SaliencyMap, layout: &ChannelLayout) -> Result<Vec<Vec<Option<f64>>>> {
    let points = layout.points(map)?;
    let h = 2.0 / TOPOMAP_GRID as f64;
    Ok((0..TOPOMAP_GRID)
        .map(|row| {
            (0..TOPOMAP_GRID)
                .map(|col| {
                    let x = -1.0 + (col as f64 + 0.5) * h;
                    let y = 1.0 - (row as f64 + 0.5) * h;
                    (x * x + y * y <= 1.0).then(|| idw(&points, x, y))
                })
                .collect()
        })
        .collect())
}

/// Blue → white → red.
fn color(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let (r, g, b) = if t < 0.5 {
        let u = t / 0.5;
        (40.0 + 215.0 * u, 80.0 + 175.0 * u, 200.0 + 55.0 * u)
    } else {
        let u = (t - 0.5) / 0.5;
        (255.0, 255.0 - 185.0 * u, 255.0 - 205.0 * u)
    };
    format!("#{:02x}{:02x}{:02x}", r.round() as u8, g.round() as u8, b.round() as u8)
}

/// Standalone SVG: the interpolated field clipped to the head circle, with
/// a linear colour scale from the lowest to the highest channel score.
pub fn render_topomap(map: &SaliencyMap, layout: &ChannelLayout) -> Result<String> {
    let field = topomap_field(map, layout)?;
    let points = layout.points(map)?;
    let lo = map.per_channel.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.per_channel.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let scale = |v: f64| if span > 0.0 { (v - lo) / span } else { 0.5 };

    let cell = 6.0;
    let size = cell * TOPOMAP_GRID as f64;
    let pad = 24.0;
    let to_px = |x: f64, y: f64| (pad + (x + 1.0) / 2.0 * size, pad + (1.0 - y) / 2.0 * size);
    let mut s = String::new();
    let total = size + 2.0 * pad;
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{}" viewBox="0 0 {total} {}">"#,
        total + 20.0,
        total + 20.0
    );
    let _ = writeln!(s, r#"<title>saliency ({})</title>"#, map.head_scope);
    let _ = writeln!(s, r#"<g shape-rendering="crispEdges">"#);
    for (row, cells) in field.iter().enumerate() {
        for (col, v) in cells.iter().enumerate() {
            if let Some(v) = v {
                let _ = writeln!(
                    s,
                    r#"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="{}"/>"#,
                    pad + col as f64 * cell,
                    pad + row as f64 * cell,
                    color(scale(*v))
                );
            }
        }
    }
    let _ = writeln!(s, "</g>");
    let (cx, cy) = to_px(0.0, 0.0);
    let _ = writeln!(
        s,
        r##"<circle cx="{cx}" cy="{cy}" r="{}" fill="none" stroke="#333" stroke-width="1.5"/>"##,
        size / 2.0
    );
    for ((x, y, _), name) in points.iter().zip(&map.channel_names) {
        let (px, py) = to_px(*x, *y);
        let _ = writeln!(s, r##"<circle cx="{px:.2}" cy="{py:.2}" r="2" fill="#111"/>"##);
        let _ = writeln!(
            s,
            r##"<text x="{:.2}" y="{:.2}" font-size="7" font-family="sans-serif" fill="#111">{name}</text>"##,
            px + 3.0,
            py - 3.0
        );
    }
    let _ = writeln!(
        s,
        r##"<text x="{pad}" y="{}" font-size="10" font-family="sans-serif">min {lo:.4e}  max {hi:.4e}</text>"##,
        total + 10.0
    );
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn write_topomap(map: &SaliencyMap, layout: &ChannelLayout, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render_topomap(map, layout)?).map_err(|e| Error::file(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caption_bank::tests::tiny_bank_entries;
    use crate::caption_bank::Taxonomy;
    use crate::encoder::{Encoder, EncoderConfig};
    use crate::tensor::Graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bank() -> CaptionBank {
        CaptionBank::from_entries(tiny_bank_entries(3, 6), Taxonomy::default()).unwrap()
    }

    /// One linear head per category: `y_h = W_h · vec(x)`, `W_h` is `D × C·T`.
    struct Linear {
        weights: Vec<Tensor<f64>>,
        channels: usize,
        samples: usize,
    }

    impl EmbeddingModel<f64> for Linear {
        fn head_names(&self) -> Vec<String> {
            Taxonomy::default().names().map(String::from).collect()
        }
        fn channels(&self) -> usize {
            self.channels
        }
        fn samples(&self) -> usize {
            self.samples
        }
        fn build_heads(&self, g: &mut Graph<f64>, input: Var) -> Result<Vec<Var>> {
            let b = g.shape(input)[0];
            let x = g.reshape(input, [b, self.channels * self.samples])?;
            self.weights
                .iter()
                .map(|w| {
                    let wv = g.constant(w.clone());
                    g.matmul_t(x, wv, false, true)
                })
                .collect()
        }
    }

    fn linear(dead: Option<usize>, seed: u64) -> Linear {
        let (c, t, d) = (4, 5, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..10)
            .map(|_| {
                Tensor::from_fn([d, c * t], |k| {
                    if dead == Some((k % (c * t)) / t) {
                        0.0
                    } else {
                        rng.gen_range(-1.0..1.0)
                    }
                })
            })
            .collect();
        Linear { weights, channels: c, samples: t }
    }

    fn names(c: usize) -> Vec<String> {
        crate::eeg_data::channel_names(c)
    }

    #[test]
    fn dead_channel_scores_zero_and_all_scores_are_non_negative() {
        let model = linear(Some(2), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_fn([3, 4, 5], |_| rng.gen_range(-1.0..1.0));
        let map = compute_saliency(&model, &x, &[0, 1, 2], &bank(), &HeadScope::All, &names(4), 0.07, 0).unwrap();
        assert_eq!(map.per_channel[2], 0.0);
        assert!(map.per_channel.iter().all(|&v| v >= 0.0));
        assert!(map.per_channel[0] > 0.0);
    }

    #[test]
    fn linear_model_closed_form() {
        // For a linear model ∂L/∂x[b] = Σ_h W_hᵀ · ∂L/∂y_h[b]; recompute that
        // by hand from the loss gradient w.r.t. the head outputs, evaluated at
        // the standardised batch.
        let model = linear(None, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_fn([2, 4, 5], |_| rng.gen_range(-1.0..1.0));
        let labels = [0, 2];
        let scope = HeadScope::Head("SpatialLink".into());
        let map = compute_saliency(&model, &x, &labels, &bank(), &scope, &names(4), 0.5, 9).unwrap();

        let slot = 4;
        let w = &model.weights[slot];
        let mut prng = SeedStreams::new(9).stream("saliency.pairs");
        let targets = batch_pair(&labels, &bank(), &["SpatialLink".to_string()], &mut prng).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(standardise(&x, 5).reshape([2, 20]).unwrap());
        let wv = g.constant(w.clone());
        let y = g.matmul_t(xv, wv, false, true).unwrap();
        let y = g.constant(g.value(y).clone());
        let yp = g.param(g.value(y).clone());
        let tv = g.constant(targets[0].cast());
        let loss = infonce_graph(&mut g, yp, tv, LogitScale::Temperature(0.5), None).unwrap();
        let dy = g.backward(loss).unwrap().take(yp).unwrap();
        let mut expect = [0.0; 4];
        for b in 0..2 {
            for i in 0..20 {
                let gi: f64 = (0..6).map(|j| w.data()[j * 20 + i] * dy.data()[b * 6 + j]).sum();
                expect[i / 5] += gi.abs() / 10.0;
            }
        }
        for (a, e) in map.per_channel.iter().zip(expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    fn tiny_encoder() -> Encoder<f64> {
        Encoder::init(EncoderConfig {
            channels: 4,
            samples: 8,
            patch_len: 4,
            d_model: 8,
            n_spatial_layers: 1,
            n_temporal_layers: 1,
            n_attn_heads: 2,
            ff_mult: 2,
            dropout: 0.0,
            proj_dim: 6,
            ..EncoderConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn zeroed_head_has_zero_scoped_saliency() {
        let mut enc = tiny_encoder();
        for p in ["head.ThemeTag.weight", "head.ThemeTag.bias"] {
            enc.params.get_mut(p).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn([3, 4, 8], |_| rng.gen_range(-1.0..1.0));
        let scoped = HeadScope::Head("ThemeTag".into());
        let map = compute_saliency(&enc, &x, &[0, 1, 2], &bank(), &scoped, &names(4), 0.07, 0).unwrap();
        assert!(map.per_channel.iter().all(|&v| v == 0.0));
        let all = compute_saliency(&enc, &x, &[0, 1, 2], &bank(), &HeadScope::All, &names(4), 0.07, 0).unwrap();
        assert!(all.per_channel.iter().any(|&v| v > 0.0));
        let again = compute_saliency(&enc, &x, &[0, 1, 2], &bank(), &HeadScope::All, &names(4), 0.07, 0).unwrap();
        assert_eq!(all, again);
    }

    #[test]
    fn unknown_head_is_a_lookup_error() {
        let enc = tiny_encoder();
        let x = Tensor::zeros([2, 4, 8]);
        let scope = HeadScope::Head("Nope".into());
        let err = compute_saliency(&enc, &x, &[0, 1], &bank(), &scope, &names(4), 0.07, 0).unwrap_err();
        assert!(matches!(err, Error::Lookup(_)));
    }

    fn map(scores: Vec<f64>) -> SaliencyMap {
        SaliencyMap {
            channel_names: names(scores.len()),
            per_channel: scores,
            head_scope: HeadScope::All,
        }
    }

    #[test]
    fn uniform_scores_paint_one_colour() {
        let m = map(vec![0.3; 8]);
        let layout = ChannelLayout::rings(&m.channel_names);
        let svg = render_topomap(&m, &layout).unwrap();
        let fills: std::collections::BTreeSet<&str> = svg
            .lines()
            .filter(|l| l.starts_with("<rect"))
            .map(|l| l.split("fill=\"").nth(1).unwrap())
            .collect();
        assert_eq!(fills.len(), 1);
    }

    #[test]
    fn hot_channel_is_the_field_maximum() {
        let mut scores = vec![0.0; 12];
        scores[5] = 1.0;
        let m = map(scores);
        let layout = ChannelLayout::rings(&m.channel_names);
        let field = topomap_field(&m, &layout).unwrap();
        let (mut best, mut at) = (f64::NEG_INFINITY, (0, 0));
        for (r, row) in field.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    if *v > best {
                        best = *v;
                        at = (r, c);
                    }
                }
            }
        }
        let h = 2.0 / TOPOMAP_GRID as f64;
        let (x, y) = (-1.0 + (at.1 as f64 + 0.5) * h, 1.0 - (at.0 as f64 + 0.5) * h);
        let (hx, hy) = layout.position("E6").unwrap();
        assert!(((x - hx).powi(2) + (y - hy).powi(2)).sqrt() <= h);
    }

    #[test]
    fn rendering_is_deterministic_and_checks_layout() {
        let m = map(vec![0.1, 0.5, 0.2, 0.9]);
        let layout = ChannelLayout::rings(&m.channel_names);
        assert_eq!(render_topomap(&m, &layout).unwrap(), render_topomap(&m, &layout).unwrap());
        let partial = ChannelLayout::new(vec![("E1".into(), 0.0, 0.0)]).unwrap();
        match render_topomap(&m, &partial) {
            Err(Error::Layout(name)) => assert_eq!(name, "E2"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn layout_csv_round_trip_and_bounds() {
        let layout = ChannelLayout::rings(&names(32));
        for i in 1..=32 {
            let (x, y) = layout.position(&format!("E{i}")).unwrap();
            assert!(x * x + y * y <= 1.0);
        }
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), layout.to_csv()).unwrap();
        assert_eq!(ChannelLayout::load(f.path()).unwrap(), layout);
        assert!(ChannelLayout::new(vec![("X".into(), 1.5, 0.0)]).is_err());
    }

    #[test]
    fn scope_serde() {
        assert_eq!(serde_json::to_string(&HeadScope::All).unwrap(), "\"all\"");
        let h: HeadScope = serde_json::from_str("\"ThemeTag\"").unwrap();
        assert_eq!(h, HeadScope::Head("ThemeTag".into()));
    }
}
