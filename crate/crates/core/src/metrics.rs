//! Generative-quality and similarity metrics over ingested features,
//! class probabilities and images.

use std::collections::BTreeMap;
use std::path::Path;

pub use image::RgbImage;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, dim_err, Error, Result};
use crate::rng::SeedStreams;
use crate::tensor::Tensor;

/// Eigenvalues below this are treated as zero in matrix square roots.
pub const EIG_CLAMP: f64 = 1e-10;
pub const KID_SUBSET_SIZE: usize = 100;
pub const KID_SUBSETS: usize = 100;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub std: Option<f64>,
    pub params: BTreeMap<String, serde_json::Value>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn new(metric: impl Into<String>, value: f64) -> Self {
        Self {
            metric: metric.into(),
            value,
            std: None,
            params: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }

    pub fn with_std(mut self, std: f64) -> Self {
        self.std = Some(std);
        self
    }

    pub fn param(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }
}

fn matrix(x: &Tensor<f64>, what: &str) -> Result<(usize, usize)> {
    if x.ndim() != 2 {
        return Err(dim_err!("{what} must be an n × d matrix, got {:?}", x.shape()));
    }
    if !x.is_finite() {
        return Err(Error::Numeric(format!("{what} contains non-finite values")));
    }
    Ok((x.shape()[0], x.shape()[1]))
}

/// Column means and the unbiased (n − 1) covariance, row-major `d × d`.
pub fn mean_cov(x: &Tensor<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, d) = matrix(x, "feature set")?;
    contract!(n >= 2, "covariance needs at least 2 rows, got {n}");
    let mut mu = vec![0.0; d];
    for i in 0..n {
        mu.iter_mut().zip(x.row(i)).for_each(|(m, &v)| *m += v);
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    let mut centred = vec![0.0; d];
    for i in 0..n {
        centred.iter_mut().zip(x.row(i)).zip(&mu).for_each(|((c, &v), m)| *c = v - m);
        for a in 0..d {
            let ca = centred[a];
            for b in a..d {
                cov[a * d + b] += ca * centred[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] / (n - 1) as f64;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    Ok((mu, cov))
}

/// Cyclic Jacobi eigendecomposition of a symmetric `d × d` matrix. Returns
/// eigenvalues and the eigenvectors as columns of a row-major matrix.
pub fn symmetric_eigen(a: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; d * d];
    (0..d).for_each(|i| v[i * d + i] = 1.0);
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * d + j].powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = m[p * d + q];
                if apq.abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[q * d + q] - m[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (mkp, mkq) = (m[k * d + p], m[k * d + q]);
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let (mpk, mqk) = (m[p * d + k], m[q * d + k]);
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let (vkp, vkq) = (v[k * d + p], v[k * d + q]);
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..d).map(|i| m[i * d + i]).collect(), v)
}

/// Principal square root of a symmetric positive semi-definite matrix;
/// eigenvalues under [`EIG_CLAMP`] are set to zero.
pub fn sqrt_psd(a: &[f64], d: usize) -> Vec<f64> {
    let (w, v) = symmetric_eigen(a, d);
    let s: Vec<f64> = w.iter().map(|&x| if x < EIG_CLAMP { 0.0 } else { x.sqrt() }).collect();
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = (0..d).map(|k| v[i * d + k] * s[k] * v[j * d + k]).sum();
        }
    }
    out
}

fn matmul_sq(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

/// Fréchet distance between Gaussians fitted to `a` and `b`:
/// `‖μa − μb‖² + Tr Σa + Tr Σb − 2 Tr (Σa^½ Σb Σa^½)^½`.
pub fn fid(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    let (_, da) = matrix(a, "first feature set")?;
    let (_, db) = matrix(b, "second feature set")?;
    if da != db {
        return Err(dim_err!("feature sets have dimensions {da} and {db}"));
    }
    let d = da;
    let (mu_a, cov_a) = mean_cov(a)?;
    let (mu_b, cov_b) = mean_cov(b)?;
    let mean_term: f64 = mu_a.iter().zip(&mu_b).map(|(x, y)| (x - y).powi(2)).sum();
    let root_a = sqrt_psd(&cov_a, d);
    let mut inner = matmul_sq(&matmul_sq(&root_a, &cov_b, d), &root_a, d);
    for i in 0..d {
        for j in i + 1..d {
            let s = 0.5 * (inner[i * d + j] + inner[j * d + i]);
            inner[i * d + j] = s;
            inner[j * d + i] = s;
        }
    }
    let (w, _) = symmetric_eigen(&inner, d);
    let cross: f64 = w.iter().map(|&x| if x < EIG_CLAMP { 0.0 } else { x.sqrt() }).sum();
    let trace: f64 = (0..d).map(|i| cov_a[i * d + i] + cov_b[i * d + i]).sum();
    Ok((mean_term + trace - 2.0 * cross).max(0.0))
}

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    (x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / d + 1.0).powi(3)
}

/// Unbiased MMD² between two equal-size samples with the cubic polynomial
/// kernel; diagonal terms of the within-set sums are omitted.
pub fn mmd2_unbiased(x: &[&[f64]], y: &[&[f64]]) -> f64 {
    let m = x.len() as f64;
    let within = |s: &[&[f64]]| {
        let mut t = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    t += poly_kernel(s[i], s[j]);
                }
            }
        }
        t / (m * (m - 1.0))
    };
    let mut cross = 0.0;
    for a in x {
        for b in y {
            cross += poly_kernel(a, b);
        }
    }
    within(x) + within(y) - 2.0 * cross / (m * m)
}

/// Kernel Inception Distance: mean and (population) standard deviation of
/// the unbiased MMD² over `n_subsets` seeded random subsets.
pub fn kid(a: &Tensor<f64>, b: &Tensor<f64>, subset_size: usize, n_subsets: usize, seed: u64) -> Result<(f64, f64)> {
    let (na, da) = matrix(a, "first feature set")?;
    let (nb, db) = matrix(b, "second feature set")?;
    if da != db {
        return Err(dim_err!("feature sets have dimensions {da} and {db}"));
    }
    contract!(
        subset_size >= 2 && subset_size <= na.min(nb),
        "subset size {subset_size} must be in [2, {}]",
        na.min(nb)
    );
    contract!(n_subsets >= 1, "need at least one subset");
    let streams = SeedStreams::new(seed);
    let values: Vec<f64> = (0..n_subsets)
        .map(|s| {
            let mut rng = streams.indexed("kid", s as u64);
            let ia = sample(&mut rng, na, subset_size);
            let ib = sample(&mut rng, nb, subset_size);
            let x: Vec<&[f64]> = ia.iter().map(|i| a.row(i)).collect();
            let y: Vec<&[f64]> = ib.iter().map(|i| b.row(i)).collect();
            mmd2_unbiased(&x, &y)
        })
        .collect();
    Ok(mean_std(&values))
}

/// KID with subset size and count scaled down for small inputs.
pub fn kid_default(a: &Tensor<f64>, b: &Tensor<f64>, seed: u64) -> Result<(f64, f64, usize)> {
    let n = a.shape().first().copied().unwrap_or(0).min(b.shape().first().copied().unwrap_or(0));
    let size = KID_SUBSET_SIZE.min(n);
    let (m, s) = kid(a, b, size, KID_SUBSETS, seed)?;
    Ok((m, s, size))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn check_probs(p: &Tensor<f64>) -> Result<(usize, usize)> {
    let (n, c) = matrix(p, "probability matrix")?;
    contract!(n >= 1 && c >= 1, "probability matrix is empty");
    for i in 0..n {
        let row = p.row(i);
        contract!(row.iter().all(|&v| v >= 0.0), "row {i} has a negative probability");
        let s: f64 = row.iter().sum();
        contract!((s - 1.0).abs() <= 1e-6, "row {i} sums to {s}");
    }
    Ok((n, c))
}

/// `exp(mean_x KL(p(y|x) ‖ p(y)))` per near-equal split; mean and
/// population standard deviation across splits.
pub fn inception_score(p: &Tensor<f64>, n_splits: usize) -> Result<(f64, f64)> {
    let (n, c) = check_probs(p)?;
    contract!(n_splits >= 1 && n_splits <= n, "n_splits {n_splits} must be in [1, {n}]");
    let scores: Vec<f64> = (0..n_splits)
        .map(|k| {
            let (lo, hi) = (k * n / n_splits, (k + 1) * n / n_splits);
            // Compensated sums, so identical rows give a marginal equal to
            // each row and a KL of exactly zero.
            let mut sum = vec![0.0; c];
            let mut comp = vec![0.0; c];
            for i in lo..hi {
                for ((s, e), &v) in sum.iter_mut().zip(comp.iter_mut()).zip(p.row(i)) {
                    let t = *s + v;
                    *e += if s.abs() >= v.abs() { (*s - t) + v } else { (v - t) + *s };
                    *s = t;
                }
            }
            let len = (hi - lo) as f64;
            let marg: Vec<f64> = sum.iter().zip(&comp).map(|(s, e)| (s + e) / len).collect();
            let kl: f64 = (lo..hi)
                .map(|i| {
                    p.row(i)
                        .iter()
                        .zip(&marg)
                        .filter(|(&v, _)| v > 0.0)
                        .map(|(&v, &m)| v * (v.ln() - m.ln()))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / len;
            kl.exp()
        })
        .collect();
    Ok(mean_std(&scores))
}

pub fn load_png(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::file(path, io),
        other => Error::Image(other),
    })?;
    Ok(img.to_rgb8())
}

fn same_shape(x: &RgbImage, y: &RgbImage) -> Result<()> {
    if x.dimensions() != y.dimensions() {
        return Err(dim_err!("images are {:?} and {:?}", x.dimensions(), y.dimensions()));
    }
    Ok(())
}

/// Rec. 601 luma as `f64` in [0, 255].
pub fn luma(img: &RgbImage) -> Vec<f64> {
    img.pixels()
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Gaussian-weighted local mean over every fully contained window.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = (0..n).map(|i| k[i] * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..n).map(|i| k[i] * rows[(yo + i) * ow + xo]).sum();
        }
    }
    out
}

/// Single-scale SSIM on luma with an 11×11 Gaussian window (σ 1.5),
/// averaged over the positions where the window fits inside the image.
pub fn ssim(x: &RgbImage, y: &RgbImage) -> Result<f64> {
    same_shape(x, y)?;
    let (w, h) = (x.width() as usize, x.height() as usize);
    contract!(w.min(h) >= SSIM_WINDOW, "SSIM needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {w}×{h}");
    let (a, b) = (luma(x), luma(y));
    let k = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mu_a = filter_valid(&a, w, h, &k);
    let mu_b = filter_valid(&b, w, h, &k);
    let aa = filter_valid(&prod(&a, &a), w, h, &k);
    let bb = filter_valid(&prod(&b, &b), w, h, &k);
    let ab = filter_valid(&prod(&a, &b), w, h, &k);
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Pearson correlation of the flattened 8-bit channel values.
pub fn pixcorr(x: &RgbImage, y: &RgbImage) -> Result<f64> {
    same_shape(x, y)?;
    let a: Vec<f64> = x.as_raw().iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = y.as_raw().iter().map(|&v| v as f64).collect();
    pearson(&a, &b).ok_or_else(|| Error::Contract("pixcorr is undefined for a constant image".into()))
}

fn paired(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<(usize, usize)> {
    let (na, da) = matrix(a, "first feature set")?;
    let (nb, db) = matrix(b, "second feature set")?;
    contract!(na == nb, "feature sets have {na} and {nb} rows");
    if da != db {
        return Err(dim_err!("feature sets have dimensions {da} and {db}"));
    }
    Ok((na, da))
}

/// Mean cosine similarity of matched rows.
pub fn cosine_score(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    let (n, _) = paired(a, b)?;
    contract!(n >= 1, "no rows to compare");
    let mut total = 0.0;
    for i in 0..n {
        let (x, y) = (a.row(i), b.row(i));
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        contract!(nx > 0.0 && ny > 0.0, "row {i} has zero norm");
        total += x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / (nx * ny);
    }
    Ok(total / n as f64)
}

/// `1 − cosine_score`, used for the SwAV column.
pub fn swav_distance(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    Ok(1.0 - cosine_score(a, b)?)
}

fn corr_rows(a: &Tensor<f64>, i: usize, b: &Tensor<f64>, j: usize) -> f64 {
    pearson(a.row(i), b.row(j)).unwrap_or(0.0)
}

fn duel(gen: &Tensor<f64>, gt: &Tensor<f64>, i: usize, j: usize) -> f64 {
    let (own, other) = (corr_rows(gen, i, gt, i), corr_rows(gen, i, gt, j));
    if own > other {
        1.0
    } else if own == other {
        0.5
    } else {
        0.0
    }
}

/// For each row, one seeded distractor `j ≠ i`: correct when `gen_i`
/// correlates more with `gt_i` than with `gt_j` (ties score ½).
pub fn two_way_identification(gen: &Tensor<f64>, gt: &Tensor<f64>, seed: u64) -> Result<f64> {
    let (n, _) = paired(gen, gt)?;
    contract!(n >= 2, "two-way identification needs at least 2 rows, got {n}");
    let mut rng = SeedStreams::new(seed).stream("two_way");
    let mut total = 0.0;
    for i in 0..n {
        let mut j = rng.gen_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        total += duel(gen, gt, i, j);
    }
    Ok(total / n as f64)
}

/// Two-way identification averaged over every distractor.
pub fn two_way_exhaustive(gen: &Tensor<f64>, gt: &Tensor<f64>) -> Result<f64> {
    let (n, _) = paired(gen, gt)?;
    contract!(n >= 2, "two-way identification needs at least 2 rows, got {n}");
    let mut total = 0.0;
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            total += duel(gen, gt, i, j);
        }
    }
    Ok(total / (n * (n - 1)) as f64)
}
