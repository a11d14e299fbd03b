use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;

fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
    Tensor::from_fn([n, d], |_| rng.sample::<f64, _>(StandardNormal))
}

fn two_clusters(seed: u64, n: usize, d: usize, gap: f64) -> (Tensor<f64>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn([n, d], |k| {
        let shift = if k / d < n / 2 { 0.0 } else { gap / (d as f64).sqrt() };
        rng.sample::<f64, _>(StandardNormal) + shift
    });
    let labels = (0..n).map(|i| if i < n / 2 { "a" } else { "b" }.to_string()).collect();
    (x, labels)
}

// Perceptron; terminates with a separating line iff one exists within the budget.
fn linearly_separable(emb: &Embedding2D) -> bool {
    let target: Vec<f64> = emb.labels.iter().map(|l| if l == "a" { 1.0 } else { -1.0 }).collect();
    let mut w = [0.0; 3];
    for _ in 0..10_000 {
        let mut clean = true;
        for ([x, y], t) in emb.coords.iter().zip(&target) {
            if t * (w[0] * x + w[1] * y + w[2]) <= 0.0 {
                w[0] += t * x;
                w[1] += t * y;
                w[2] += t;
                clean = false;
            }
        }
        if clean {
            return true;
        }
    }
    false
}

#[test]
fn equidistant_points_give_uniform_conditionals() {
    let d = vec![0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0];
    let cal = perplexity_calibration(&d, 3, 2.0).unwrap();
    for i in 0..3 {
        assert!((cal.entropy(i) - 2f64.ln()).abs() < 1e-12);
        for j in 0..3 {
            let expect = if i == j { 0.0 } else { 0.5 };
            assert_eq!(cal.conditionals[i * 3 + j], expect);
        }
    }
    assert_eq!(cal.warnings.len(), 3);
}

#[test]
fn calibration_hits_the_target_perplexity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = gaussian(&mut rng, 100, 5);
    let d = squared_distances(&x).unwrap();
    for perp in [5.0, 30.0] {
        let cal = perplexity_calibration(&d, 100, perp).unwrap();
        assert!(cal.warnings.is_empty());
        for i in 0..100 {
            let row = &cal.conditionals[i * 100..(i + 1) * 100];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            // Independent entropy evaluation in log base 2.
            let h2: f64 = -row.iter().filter(|&&p| p > 0.0).map(|p| p * p.log2()).sum::<f64>();
            assert!((2f64.powf(h2) - perp).abs() < 1e-3, "point {i}: {}", 2f64.powf(h2));
        }
    }
}

#[test]
fn doubling_distances_only_rescales_bandwidths() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = gaussian(&mut rng, 40, 3);
    let d = squared_distances(&x).unwrap();
    let d2: Vec<f64> = d.iter().map(|v| 2.0 * v).collect();
    let a = perplexity_calibration(&d, 40, 8.0).unwrap();
    let b = perplexity_calibration(&d2, 40, 8.0).unwrap();
    for i in 0..40 {
        assert!((b.entropy(i) - 8f64.ln()).abs() < 1e-5);
        assert!((a.entropy(i) - b.entropy(i)).abs() < 2e-5);
        let ratio = b.sigma(i) / a.sigma(i);
        assert!((ratio - 2f64.sqrt()).abs() < 1e-3, "{ratio}");
    }
    for (p, q) in a.conditionals.iter().zip(&b.conditionals) {
        assert!((p - q).abs() < 1e-4);
    }
}

#[test]
fn calibration_checks_its_input() {
    let asym = vec![0.0, 1.0, 2.0, 0.0];
    assert!(matches!(perplexity_calibration(&asym, 2, 1.0), Err(Error::Contract(_))));
    let diag = vec![1.0, 1.0, 1.0, 0.0];
    assert!(matches!(perplexity_calibration(&diag, 2, 1.0), Err(Error::Contract(_))));
    assert!(matches!(perplexity_calibration(&asym, 3, 1.0), Err(Error::Dimension(_))));
}

#[test]
fn joint_probabilities_are_a_symmetric_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = gaussian(&mut rng, 30, 4);
    let cal = perplexity_calibration(&squared_distances(&x).unwrap(), 30, 5.0).unwrap();
    let p = joint_probabilities(&cal);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    for i in 0..30 {
        assert_eq!(p[i * 30 + i], 0.0);
        for j in 0..30 {
            assert!(p[i * 30 + j] >= 0.0);
            assert_eq!(p[i * 30 + j], p[j * 30 + i]);
        }
    }
}

#[test]
fn config_invariants() {
    let cfg = TsneConfig::default();
    assert!(matches!(cfg.validate(60), Err(Error::Config(_))));
    assert!(cfg.validate(200).is_ok());
    let short = TsneConfig { iterations: 249, ..TsneConfig::default() };
    assert!(matches!(short.validate(200), Err(Error::Config(_))));
    assert!(matches!(TsneConfig { perplexity: 1.0, ..cfg.clone() }.validate(9), Err(Error::Config(_))));
    let x = Tensor::<f64>::zeros([20, 2]);
    let labels = vec![String::new(); 20];
    assert!(matches!(tsne(&x, labels, &cfg), Err(Error::Config(_))));
}

#[test]
fn planted_clusters_separate_and_kl_settles() {
    let (x, labels) = two_clusters(14, 200, 16, 20.0);
    let cfg = TsneConfig { seed: 3, ..TsneConfig::default() };
    let emb = tsne(&x, labels, &cfg).unwrap();
    assert!(linearly_separable(&emb));
    assert_eq!(emb.kl_trace.len(), 1000);
    let tail = &emb.kl_trace[cfg.exaggeration_iters..];
    for w in tail.windows(51) {
        assert!(w[50] <= w[0] + 1e-3, "{} -> {}", w[0], w[50]);
    }
    assert!(emb.kl_trace.iter().all(|v| v.is_finite() && *v >= 0.0));
}

#[test]
fn same_seed_is_bit_identical() {
    let (x, labels) = two_clusters(15, 40, 4, 6.0);
    let cfg = TsneConfig { perplexity: 8.0, iterations: 300, ..TsneConfig::default() };
    let a = tsne(&x, labels.clone(), &cfg).unwrap();
    let b = tsne(&x, labels.clone(), &cfg).unwrap();
    assert_eq!(a, b);
    let c = tsne(&x, labels, &TsneConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.coords, c.coords);
}

#[test]
fn permuting_points_with_their_keys_permutes_rows() {
    let (x, labels) = two_clusters(16, 30, 4, 6.0);
    let cfg = TsneConfig { perplexity: 6.0, iterations: 260, ..TsneConfig::default() };
    let keys: Vec<u64> = (0..30).collect();
    let base = tsne_keyed(&x, labels.clone(), &keys, &cfg).unwrap();
    let perm: Vec<usize> = (0..30).map(|i| (i * 7 + 3) % 30).collect();
    let px = Tensor::from_fn([30, 4], |k| x.row(perm[k / 4])[k % 4]);
    let pl: Vec<String> = perm.iter().map(|&i| labels[i].clone()).collect();
    let pk: Vec<u64> = perm.iter().map(|&i| keys[i]).collect();
    let out = tsne_keyed(&px, pl, &pk, &cfg).unwrap();
    for (r, &i) in perm.iter().enumerate() {
        assert_eq!(out.coords[r], base.coords[i]);
    }
    assert!(matches!(tsne_keyed(&x, labels, &[0; 30], &cfg), Err(Error::Contract(_))));
}

fn ten_label_embedding() -> Embedding2D {
    let coords: Vec<[f64; 2]> = (0..40).map(|i| [i as f64 * 0.37 - 3.0, ((i * 13) % 17) as f64 * -1.9]).collect();
    let labels = (0..40).map(|i| format!("Head{}", i % 10)).collect();
    Embedding2D::new(coords, labels).unwrap()
}

#[test]
fn scatter_has_one_legend_entry_per_label_and_is_deterministic() {
    let emb = ten_label_embedding();
    let svg = render_scatter(&emb);
    let legend = svg.split(r#"<g class="legend""#).nth(1).unwrap();
    assert_eq!(legend.matches("<text").count(), 10);
    assert_eq!(svg.matches("<circle").count(), 40);
    assert_eq!(svg, render_scatter(&emb.clone()));
    let dir = tempfile::tempdir().unwrap();
    let (p, q) = (dir.path().join("a.svg"), dir.path().join("b.svg"));
    export_scatter(&emb, &p).unwrap();
    export_scatter(&emb, &q).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
}

#[test]
fn scatter_coordinates_invert_to_the_embedding() {
    let emb = ten_label_embedding();
    let svg = render_scatter(&emb);
    let tr = ScatterTransform::from_svg(&svg).unwrap();
    let attr = |line: &str, key: &str| -> f64 {
        let start = line.find(&format!("{key}=\"")).unwrap() + key.len() + 2;
        line[start..start + line[start..].find('"').unwrap()].parse().unwrap()
    };
    let circles: Vec<&str> = svg.lines().filter(|l| l.starts_with("<circle")).collect();
    for (line, c) in circles.iter().zip(&emb.coords) {
        let [x, y] = tr.invert([attr(line, "cx"), attr(line, "cy")]);
        assert!((x - c[0]).abs() < 1e-6 && (y - c[1]).abs() < 1e-6);
    }
}

#[test]
fn csv_lists_every_point() {
    let emb = Embedding2D::new(vec![[0.5, -1.0], [2.0, 3.25]], vec!["ObjectSnap".into(), "ThemeTag".into()]).unwrap();
    assert_eq!(emb.to_csv(), "x,y,label\n0.5,-1,ObjectSnap\n2,3.25,ThemeTag\n");
    assert!(matches!(Embedding2D::new(vec![[f64::NAN, 0.0]], vec!["a".into()]), Err(Error::Numeric(_))));
}

#[test]
fn stack_heads_is_head_major() {
    let heads = HeadEmbeddings {
        heads: vec![
            ("A".to_string(), Tensor::new([2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap()),
            ("B".to_string(), Tensor::new([1, 2], vec![5.0f32, 6.0]).unwrap()),
        ],
    };
    let (x, labels) = stack_heads(&heads).unwrap();
    assert_eq!(x.shape(), &[3, 2]);
    assert_eq!(x.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    assert_eq!(labels, ["A", "A", "B"]);
}
