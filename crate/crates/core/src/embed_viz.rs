//! Exact t-SNE over head embeddings and an SVG scatter export.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::HeadEmbeddings;
use crate::error::{contract, dim_err, Error, Result};
use crate::rng::SeedStreams;
use crate::tensor::{Real, Tensor};

pub const CALIBRATION_STEPS: usize = 50;
pub const CALIBRATION_TOL: f64 = 1e-5;
const P_FLOOR: f64 = 1e-12;
const MIN_GAIN: f64 = 0.01;
const INIT_STD: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            learning_rate: 200.0,
            momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if n < 10 {
            return Err(Error::Config(format!("t-SNE needs at least 10 points, got {n}")));
        }
        if !(self.perplexity > 0.0) || self.perplexity >= (n as f64 - 1.0) / 3.0 {
            return Err(Error::Config(format!(
                "perplexity {} must be positive and below (n-1)/3 = {:.3}",
                self.perplexity,
                (n as f64 - 1.0) / 3.0
            )));
        }
        if self.iterations < 250 {
            return Err(Error::Config(format!("iterations must be at least 250, got {}", self.iterations)));
        }
        if self.exaggeration_iters > self.iterations || self.momentum_switch > self.iterations {
            return Err(Error::Config("exaggeration and momentum phases must fit inside iterations".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.exaggeration >= 1.0) {
            return Err(Error::Config("learning_rate must be positive and exaggeration at least 1".into()));
        }
        Ok(())
    }
}

/// Result of the per-point bandwidth search.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub n: usize,
    /// Row-stochastic conditionals p(j|i), row-major, zero diagonal.
    pub conditionals: Vec<f64>,
    /// Precision 1/(2σ²) per point; infinite for the uniform fallback.
    pub betas: Vec<f64>,
    pub warnings: Vec<String>,
}

impl Calibration {
    pub fn sigma(&self, i: usize) -> f64 {
        (0.5 / self.betas[i]).sqrt()
    }

    /// Shannon entropy (nats) of row `i`.
    pub fn entropy(&self, i: usize) -> f64 {
        let row = &self.conditionals[i * self.n..(i + 1) * self.n];
        -row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }
}

pub fn squared_distances(x: &Tensor<f64>) -> Result<Vec<f64>> {
    if x.ndim() != 2 {
        return Err(dim_err!("t-SNE input must be [n, d], got {:?}", x.shape()));
    }
    let n = x.shape()[0];
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    Ok(d)
}

// Entropy and unnormalised weights for one row at precision `beta`, with
// distances already shifted so the nearest neighbour sits at zero.
fn row_entropy(shifted: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for (j, (&d, o)) in shifted.iter().zip(out.iter_mut()).enumerate() {
        if j == i {
            *o = 0.0;
            continue;
        }
        let w = (-beta * d).exp();
        *o = w;
        sum += w;
        weighted += w * d;
    }
    sum.ln() + beta * weighted / sum
}

pub fn perplexity_calibration(sq_distances: &[f64], n: usize, perplexity: f64) -> Result<Calibration> {
    if sq_distances.len() != n * n {
        return Err(dim_err!("distance matrix has {} entries, expected {n}x{n}", sq_distances.len()));
    }
    contract!(n >= 2, "calibration needs at least 2 points");
    contract!(
        perplexity >= 1.0 && perplexity <= (n - 1) as f64,
        "perplexity {perplexity} outside [1, {}]",
        n - 1
    );
    for i in 0..n {
        contract!(sq_distances[i * n + i] == 0.0, "distance diagonal at {i} is not zero");
        for j in 0..i {
            let (a, b) = (sq_distances[i * n + j], sq_distances[j * n + i]);
            contract!(a == b && a >= 0.0, "distances not symmetric and non-negative at ({i}, {j})");
        }
    }

    let target = perplexity.ln();
    let mut conditionals = vec![0.0; n * n];
    let mut betas = vec![1.0; n];
    let mut warnings = Vec::new();
    let mut shifted = vec![0.0; n];
    for i in 0..n {
        let row = &sq_distances[i * n..(i + 1) * n];
        let others = || row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &d)| d);
        let lo = others().fold(f64::INFINITY, f64::min);
        let hi = others().fold(f64::NEG_INFINITY, f64::max);
        let out = &mut conditionals[i * n..(i + 1) * n];
        if hi - lo <= 0.0 {
            // Entropy does not depend on beta here; any precision gives ln(n-1).
            let u = 1.0 / (n - 1) as f64;
            out.iter_mut().enumerate().for_each(|(j, p)| *p = if j == i { 0.0 } else { u });
            betas[i] = f64::INFINITY;
            warnings.push(format!("point {i}: all distances equal, using uniform neighbours"));
            continue;
        }
        for (s, &d) in shifted.iter_mut().zip(row) {
            *s = d - lo;
        }
        let (mut beta, mut bmin, mut bmax) = (1.0 / (hi - lo), 0.0, f64::INFINITY);
        let mut h = row_entropy(&shifted, i, beta, out);
        let mut converged = false;
        for _ in 0..CALIBRATION_STEPS {
            let diff = h - target;
            if diff.abs() < CALIBRATION_TOL {
                converged = true;
                break;
            }
            if diff > 0.0 {
                bmin = beta;
                beta = if bmax.is_finite() { (beta + bmax) / 2.0 } else { beta * 2.0 };
            } else {
                bmax = beta;
                beta = (beta + bmin) / 2.0;
            }
            h = row_entropy(&shifted, i, beta, out);
        }
        if !converged && (h - target).abs() >= CALIBRATION_TOL {
            warnings.push(format!("point {i}: entropy {h:.6} did not reach target {target:.6}"));
        }
        let sum: f64 = out.iter().sum();
        out.iter_mut().for_each(|p| *p /= sum);
        betas[i] = beta;
    }
    Ok(Calibration { n, conditionals, betas, warnings })
}

/// Symmetrised joint affinities (p(j|i) + p(i|j)) / 2n.
pub fn joint_probabilities(cal: &Calibration) -> Vec<f64> {
    let n = cal.n;
    let c = &cal.conditionals;
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = (c[i * n + j] + c[j * n + i]) / (2 * n) as f64;
            }
        }
    }
    p
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding2D {
    pub coords: Vec<[f64; 2]>,
    pub labels: Vec<String>,
    /// KL(P||Q) against the unexaggerated P, one entry per iteration.
    pub kl_trace: Vec<f64>,
    pub warnings: Vec<String>,
}

impl Embedding2D {
    pub fn new(coords: Vec<[f64; 2]>, labels: Vec<String>) -> Result<Self> {
        if coords.len() != labels.len() {
            return Err(dim_err!("{} coordinates but {} labels", coords.len(), labels.len()));
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("embedding has non-finite coordinates".into()));
        }
        Ok(Self { coords, labels, kl_trace: Vec::new(), warnings: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Distinct labels in order of first appearance.
    pub fn label_set(&self) -> Vec<&str> {
        let mut seen: Vec<&str> = Vec::new();
        for l in &self.labels {
            if !seen.contains(&l.as_str()) {
                seen.push(l);
            }
        }
        seen
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,label\n");
        for ([x, y], l) in self.coords.iter().zip(&self.labels) {
            let _ = writeln!(s, "{x},{y},{l}");
        }
        s
    }
}

/// Stacks every head's rows into one point set, head-major, labelled by head.
pub fn stack_heads<T: Real>(heads: &HeadEmbeddings<T>) -> Result<(Tensor<f64>, Vec<String>)> {
    let Some((_, first)) = heads.heads.first() else {
        return Err(Error::Contract("no head embeddings to stack".into()));
    };
    let d = first.shape()[1];
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (name, t) in &heads.heads {
        if t.ndim() != 2 || t.shape()[1] != d {
            return Err(dim_err!("head {name} has shape {:?}, expected [_, {d}]", t.shape()));
        }
        data.extend(t.data().iter().map(|&v| Real::to_f64(v)));
        labels.extend(std::iter::repeat(name.clone()).take(t.shape()[0]));
    }
    Ok((Tensor::new([labels.len(), d], data)?, labels))
}

pub fn tsne(x: &Tensor<f64>, labels: Vec<String>, cfg: &TsneConfig) -> Result<Embedding2D> {
    let keys: Vec<u64> = (0..labels.len() as u64).collect();
    tsne_keyed(x, labels, &keys, cfg)
}

/// t-SNE where point `i` draws its initial position from the stream keyed by
/// `keys[i]`. Points are processed in key order, so permuting rows together
/// with their keys permutes the output rows and nothing else.
pub fn tsne_keyed(x: &Tensor<f64>, labels: Vec<String>, keys: &[u64], cfg: &TsneConfig) -> Result<Embedding2D> {
    if x.ndim() != 2 {
        return Err(dim_err!("t-SNE input must be [n, d], got {:?}", x.shape()));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    if labels.len() != n || keys.len() != n {
        return Err(dim_err!("{n} points but {} labels and {} keys", labels.len(), keys.len()));
    }
    cfg.validate(n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| keys[i]);
    contract!(order.windows(2).all(|w| keys[w[0]] != keys[w[1]]), "t-SNE point keys must be unique");
    let sorted = Tensor::from_fn([n, d], |k| x.row(order[k / d])[k % d]);

    let dist = squared_distances(&sorted)?;
    let cal = perplexity_calibration(&dist, n, cfg.perplexity)?;
    let mut p = joint_probabilities(&cal);
    p.iter_mut().for_each(|v| *v = v.max(P_FLOOR));
    for i in 0..n {
        p[i * n + i] = 0.0;
    }

    let streams = SeedStreams::new(cfg.seed);
    let mut y: Vec<f64> = Vec::with_capacity(2 * n);
    for &i in &order {
        let mut rng = streams.indexed("tsne.init", keys[i]);
        y.push(INIT_STD * rng.sample::<f64, _>(StandardNormal));
        y.push(INIT_STD * rng.sample::<f64, _>(StandardNormal));
    }

    let mut update = vec![0.0; 2 * n];
    let mut gains = vec![1.0f64; 2 * n];
    let mut grad = vec![0.0; 2 * n];
    let mut num = vec![0.0; n * n];
    let mut kl_trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let ex = if it < cfg.exaggeration_iters { cfg.exaggeration } else { 1.0 };
        let momentum = if it < cfg.momentum_switch { cfg.momentum } else { cfg.final_momentum };

        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[2 * i] - y[2 * j];
                let dy = y[2 * i + 1] - y[2 * j + 1];
                let w = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = w;
                num[j * n + i] = w;
                z += 2.0 * w;
            }
        }
        let mut kl = 0.0;
        for i in 0..n {
            let (mut gx, mut gy) = (0.0, 0.0);
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = num[i * n + j];
                let q = (w / z).max(P_FLOOR);
                let pij = p[i * n + j];
                kl += pij * (pij / q).ln();
                let m = (ex * pij - q) * w;
                gx += m * (y[2 * i] - y[2 * j]);
                gy += m * (y[2 * i + 1] - y[2 * j + 1]);
            }
            grad[2 * i] = 4.0 * gx;
            grad[2 * i + 1] = 4.0 * gy;
        }
        kl_trace.push(kl);

        for k in 0..2 * n {
            gains[k] = if (grad[k] > 0.0) != (update[k] > 0.0) { gains[k] + 0.2 } else { gains[k] * 0.8 };
            gains[k] = gains[k].max(MIN_GAIN);
            update[k] = momentum * update[k] - cfg.learning_rate * gains[k] * grad[k];
            y[k] += update[k];
        }
        for c in 0..2 {
            let mean = (0..n).map(|i| y[2 * i + c]).sum::<f64>() / n as f64;
            (0..n).for_each(|i| y[2 * i + c] -= mean);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("t-SNE diverged at iteration {it}")));
        }
    }

    let mut coords = vec![[0.0; 2]; n];
    for (k, &i) in order.iter().enumerate() {
        coords[i] = [y[2 * k], y[2 * k + 1]];
    }
    let mut emb = Embedding2D::new(coords, labels)?;
    emb.kl_trace = kl_trace;
    emb.warnings = cal.warnings;
    Ok(emb)
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

fn label_color(i: usize) -> String {
    if i < PALETTE.len() {
        return PALETTE[i].to_string();
    }
    // Golden-angle hue walk past the fixed palette.
    let hue = (i as f64 * 137.507_764) % 360.0;
    format!("hsl({hue:.1},60%,45%)")
}

/// Affine map from embedding space to SVG pixels (y axis flipped).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatterTransform {
    pub x_min: f64,
    pub y_max: f64,
    pub scale: f64,
    pub margin: f64,
}

pub const SCATTER_PLOT_SIZE: f64 = 480.0;
const SCATTER_MARGIN: f64 = 30.0;
const LEGEND_WIDTH: f64 = 160.0;

impl ScatterTransform {
    pub fn fit(coords: &[[f64; 2]]) -> Self {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for [x, y] in coords {
            x0 = x0.min(*x);
            x1 = x1.max(*x);
            y0 = y0.min(*y);
            y1 = y1.max(*y);
        }
        if coords.is_empty() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        let span = (x1 - x0).max(y1 - y0);
        let scale = if span > 0.0 { SCATTER_PLOT_SIZE / span } else { 1.0 };
        Self { x_min: x0, y_max: y1, scale, margin: SCATTER_MARGIN }
    }

    pub fn apply(&self, [x, y]: [f64; 2]) -> [f64; 2] {
        [self.margin + (x - self.x_min) * self.scale, self.margin + (self.y_max - y) * self.scale]
    }

    pub fn invert(&self, [px, py]: [f64; 2]) -> [f64; 2] {
        [self.x_min + (px - self.margin) / self.scale, self.y_max - (py - self.margin) / self.scale]
    }

    /// Reads the transform back from the attributes written by [`render_scatter`].
    pub fn from_svg(svg: &str) -> Option<Self> {
        let attr = |key: &str| -> Option<f64> {
            let start = svg.find(&format!("{key}=\""))? + key.len() + 2;
            let end = start + svg[start..].find('"')?;
            svg[start..end].parse().ok()
        };
        Some(Self { x_min: attr("data-x-min")?, y_max: attr("data-y-max")?, scale: attr("data-scale")?, margin: attr("data-margin")? })
    }
}

pub fn render_scatter(emb: &Embedding2D) -> String {
    let tr = ScatterTransform::fit(&emb.coords);
    let labels = emb.label_set();
    let plot = SCATTER_PLOT_SIZE + 2.0 * SCATTER_MARGIN;
    let width = plot + LEGEND_WIDTH;
    let height = plot.max(SCATTER_MARGIN * 2.0 + 18.0 * labels.len() as f64);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" data-x-min="{}" data-y-max="{}" data-scale="{}" data-margin="{}">"#,
        tr.x_min, tr.y_max, tr.scale, tr.margin
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(s, r#"<g class="points">"#);
    for (c, l) in emb.coords.iter().zip(&emb.labels) {
        let idx = labels.iter().position(|x| x == l).unwrap_or(0);
        let [px, py] = tr.apply(*c);
        let _ = writeln!(s, r#"<circle cx="{px}" cy="{py}" r="3" fill="{}" fill-opacity="0.8"/>"#, label_color(idx));
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g class="legend" font-family="sans-serif" font-size="12">"#);
    for (i, l) in labels.iter().enumerate() {
        let y = SCATTER_MARGIN + 18.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/>"#, plot + 4.0, y, label_color(i));
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, plot + 20.0, y + 9.5, escape(l));
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn export_scatter(emb: &Embedding2D, out_path: impl AsRef<Path>) -> Result<()> {
    let path = out_path.as_ref();
    std::fs::write(path, render_scatter(emb)).map_err(|e| Error::file(path, e))
}

pub fn write_csv(emb: &Embedding2D, out_path: impl AsRef<Path>) -> Result<()> {
    let path = out_path.as_ref();
    std::fs::write(path, emb.to_csv()).map_err(|e| Error::file(path, e))
}

#[cfg(test)]
mod tests;
