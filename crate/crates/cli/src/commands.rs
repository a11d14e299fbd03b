use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::Parser;

use neurosem_core::caption_bank::{load_bank, CaptionBank, Taxonomy};
use neurosem_core::eeg_data::{load_dataset, split_indices, synth_generate, EegDataset, SplitRatios, SynthSpec};
use neurosem_core::embed_viz::{render_scatter, stack_heads, tsne, TsneConfig};
use neurosem_core::encoder::{Checkpoint, Encoder, HeadEmbeddings};
use neurosem_core::metrics::{self, MetricReport, RgbImage};
use neurosem_core::retrieval::{
    assemble_prompt, dispatch_all, ensemble_classify, head_dominance, read_manifest, retrieval_accuracy, retrieve_all,
    write_manifest, Endpoint, ManifestRow, PromptBundle, PromptPolicy, RetrievalResult, StubOptions, StubServer,
};
use neurosem_core::saliency::{compute_saliency, render_topomap, ChannelLayout, HeadScope};
use neurosem_core::tensor::{read_nsem_any, Tensor};
use neurosem_core::trainer::{self, LossKind, TrainConfig};
use neurosem_core::{Error, Result};

use crate::config::{parse_config, EndpointConfig, RunConfig};
use crate::manifest::{set_flag, Outputs, RunManifest};
use crate::{
    AblateArgs, CliError, Command, EvalArgs, IsArgs, KidArgs, MetricsCommand, PairArgs, PromptArgs, ReplayArgs,
    RetrieveArgs, SaliencyArgs, StubArgs, SynthArgs, TrainArgs, TsneArgs, TwoWayArgs, ENDPOINT_ENV,
};

const DEFAULT_OUT: &str = "runs";
const ENCODE_CHUNK: usize = 64;

pub(crate) fn dispatch(cmd: Command, raw: &[String]) -> std::result::Result<(), CliError> {
    let (module, res) = match cmd {
        Command::Synth(a) => ("eeg_data", synth(a, raw)),
        Command::Train(a) => ("trainer", train(a, raw)),
        Command::Retrieve(a) => ("retrieval", retrieve(a, raw)),
        Command::Classify(a) => ("retrieval", classify(a, raw)),
        Command::Saliency(a) => ("saliency", saliency(a, raw)),
        Command::Tsne(a) => ("embed_viz", tsne_cmd(a, raw)),
        Command::Metrics(m) => ("metrics", metrics_cmd(m, raw)),
        Command::Prompt(a) => ("retrieval", prompt(a, raw)),
        Command::Ablate(a) => ("trainer", ablate(a, raw)),
        Command::StubServer(a) => ("retrieval", stub_server(a)),
        Command::Replay(a) => return replay(a),
    };
    res.map_err(|error| CliError { module: if matches!(error, Error::Config(_)) { "config" } else { module }, error })
}

fn synth(a: SynthArgs, raw: &[String]) -> Result<()> {
    let taxonomy = Taxonomy::default();
    let spec = SynthSpec {
        classes: a.classes,
        epochs_per_class: a.epochs_per_class,
        channels: a.channels,
        samples: a.samples,
        snr: a.snr,
        embed_dim: a.embed_dim,
        informative_channels: vec![a.informative_channels],
        informative_category: a.informative_category,
        seed: a.seed,
        ..SynthSpec::default()
    };
    let (ds, bank) = synth_generate(&spec, &taxonomy)?;
    let mut out = Outputs::new(&a.out)?;
    ds.save(out.path("eeg.nsd")?)?;
    out.record("eeg.nsd")?;
    bank.save(out.path("bank.jsonl")?)?;
    out.record("bank.jsonl")?;
    out.write("layout.csv", ChannelLayout::rings(&ds.channel_names).to_csv())?;
    out.write("synth.json", serde_json::to_string_pretty(&spec)? + "\n")?;
    let starter = format!(
        "[data]\ndataset = \"eeg.nsd\"\nbank = \"bank.jsonl\"\nlayout = \"layout.csv\"\n\n[encoder]\nchannels = {}\nsamples = {}\nproj_dim = {}\n",
        spec.channels, spec.samples, spec.embed_dim
    );
    out.write("config.toml", starter)?;
    println!(
        "wrote {} epochs ({} classes) and {} captions to {}",
        ds.len(),
        spec.classes,
        bank.len(),
        out.root().display()
    );
    out.finish("synth", raw, Some(spec.seed), None)?;
    Ok(())
}

fn parse_loss(s: &str) -> Result<LossKind> {
    match s {
        "contrastive" => Ok(LossKind::Contrastive),
        "mse" => Ok(LossKind::Mse),
        other => Err(Error::Config(format!("unknown loss {other:?}, expected contrastive or mse"))),
    }
}

fn out_dir(flag: Option<PathBuf>, cfg: Option<&RunConfig>) -> PathBuf {
    flag.or_else(|| cfg.and_then(|c| c.output_dir.clone())).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn load_data(cfg: &RunConfig) -> Result<(EegDataset, CaptionBank)> {
    Ok((load_dataset(&cfg.data.dataset)?, load_bank(&cfg.data.bank, &Taxonomy::default())?))
}

struct Splits {
    train: EegDataset,
    val: EegDataset,
    test: EegDataset,
}

fn split_dataset(ds: &EegDataset, seed: u64) -> Result<Splits> {
    let idx = split_indices(&ds.labels(), SplitRatios::default(), seed)?;
    Ok(Splits { train: ds.subset(&idx.train), val: ds.subset(&idx.val), test: ds.subset(&idx.test) })
}

fn print_epoch(r: &trainer::EpochRecord, total: usize) {
    match r.mean_accuracy() {
        Some(acc) => eprintln!("epoch {}/{total} loss {:.4} val acc {:.3}", r.epoch, r.loss, acc),
        None => eprintln!("epoch {}/{total} loss {:.4}", r.epoch, r.loss),
    }
}

fn train(a: TrainArgs, raw: &[String]) -> Result<()> {
    let mut cfg = parse_config(&a.config)?;
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.lr {
        t.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.temperature {
        t.temperature = v;
    }
    if let Some(v) = &a.loss {
        t.loss_kind = parse_loss(v)?;
    }
    if let Some(v) = a.heads {
        t.active_heads = Some(v);
    }
    if let Some(v) = a.checkpoint_every {
        t.checkpoint_every = Some(v);
    }
    cfg.validate()?;
    let (ds, bank) = load_data(&cfg)?;
    let sp = split_dataset(&ds, cfg.data.split_seed)?;
    let total = cfg.train.epochs;
    let outcome = trainer::train(&sp.train, Some(&sp.val), &bank, &cfg.encoder, &cfg.train, &mut |r| print_epoch(r, total))?;

    let mut out = Outputs::new(out_dir(a.out, Some(&cfg)))?;
    save_checkpoint(&mut out, &outcome.final_checkpoint, "checkpoints/final")?;
    save_checkpoint(&mut out, &outcome.best_checkpoint, "checkpoints/best")?;
    for c in &outcome.periodic {
        save_checkpoint(&mut out, c, &format!("checkpoints/epoch_{:04}", c.epoch))?;
    }
    out.write("logs/train_history.csv", outcome.history.to_csv())?;
    out.write("manifests/config.toml", cfg.to_toml()?)?;
    if let Some(last) = outcome.history.records.last() {
        println!("trained {} epochs, final loss {:.4}", last.epoch, last.loss);
    }
    println!("best checkpoint: epoch {}", outcome.best_checkpoint.epoch);
    let seed = cfg.train.seed;
    out.finish("train", raw, Some(seed), Some(cfg))?;
    Ok(())
}

fn save_checkpoint(out: &mut Outputs, ckpt: &Checkpoint, rel: &str) -> Result<()> {
    ckpt.save(out.path(&format!("{rel}/manifest.json"))?.parent().unwrap_or(out.root()))?;
    out.record(rel)
}

/// Checkpoint, data split and bank shared by the evaluation commands.
struct EvalInputs {
    config: Option<RunConfig>,
    encoder: Encoder<f32>,
    temperature: f64,
    data: EegDataset,
    /// Row `i` of `data` is epoch `indices[i]` of the full dataset.
    indices: Vec<usize>,
    bank: CaptionBank,
}

fn eval_inputs(a: &EvalArgs) -> Result<EvalInputs> {
    let config = a.config.as_ref().map(parse_config).transpose()?;
    let pick = |flag: &Option<PathBuf>, from_cfg: fn(&RunConfig) -> PathBuf, what: &str| {
        flag.clone()
            .or_else(|| config.as_ref().map(from_cfg))
            .ok_or_else(|| Error::Config(format!("no {what}: pass --{what} or --config")))
    };
    let data_path = pick(&a.data, |c| c.data.dataset.clone(), "data")?;
    let bank_path = pick(&a.bank, |c| c.data.bank.clone(), "bank")?;
    let seed = a.split_seed.or(config.as_ref().map(|c| c.data.split_seed)).unwrap_or(0);
    let ds = load_dataset(&data_path)?;
    let bank = load_bank(&bank_path, &Taxonomy::default())?;
    let idx = split_indices(&ds.labels(), SplitRatios::default(), seed)?;
    let indices = match a.split.as_str() {
        "train" => idx.train,
        "val" => idx.val,
        "test" => idx.test,
        "all" => (0..ds.len()).collect(),
        other => return Err(Error::Config(format!("unknown split {other:?}, expected train, val, test or all"))),
    };
    if indices.is_empty() {
        return Err(Error::Data(format!("split {} is empty", a.split)));
    }
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let encoder = ckpt.encoder()?;
    if ds.channels != encoder.config.channels || ds.samples != encoder.config.samples {
        return Err(Error::Dimension(format!(
            "dataset is {}x{} but the checkpoint expects {}x{}",
            ds.channels, ds.samples, encoder.config.channels, encoder.config.samples
        )));
    }
    Ok(EvalInputs { config, encoder, temperature: ckpt.temperature, data: ds.subset(&indices), indices, bank })
}

impl EvalInputs {
    fn embed(&self) -> Result<HeadEmbeddings<f32>> {
        let rows: Vec<usize> = (0..self.data.len()).collect();
        self.encoder.encode_chunked(&self.data.batch_tensor(&rows), ENCODE_CHUNK)
    }

    fn retrieve(&self, k: usize) -> Result<Vec<RetrievalResult>> {
        retrieve_all(&self.embed()?, &self.bank, k, &self.indices)
    }

    fn out(&self, flag: &Option<PathBuf>) -> Result<Outputs> {
        Outputs::new(out_dir(flag.clone(), self.config.as_ref()))
    }
}

fn parse_policy(s: &str) -> Result<PromptPolicy> {
    if s == "all" {
        return Ok(PromptPolicy::AllHeads);
    }
    s.strip_prefix("top:")
        .and_then(|n| n.parse().ok())
        .filter(|&n: &usize| n > 0)
        .map(PromptPolicy::TopHeads)
        .ok_or_else(|| Error::Config(format!("bad prompt policy {s:?}, expected all or top:N")))
}

fn accuracy_line(label: &str, hits: usize, n: usize) -> String {
    format!("{label} accuracy {:.4} ({hits}/{n})", hits as f64 / n as f64)
}

fn retrieve(a: RetrieveArgs, raw: &[String]) -> Result<()> {
    let policy = parse_policy(&a.policy)?;
    let inp = eval_inputs(&a.eval)?;
    let results = inp.retrieve(a.topk)?;
    let labels = inp.data.labels();
    let accuracy = retrieval_accuracy(&results, &labels, &inp.bank)?;

    let mut rows = Vec::with_capacity(results.len());
    let mut bundles = Vec::with_capacity(results.len());
    let mut hits = 0;
    for (r, &label) in results.iter().zip(&labels) {
        let predicted = ensemble_classify(r, &inp.bank)?;
        hits += usize::from(predicted == label);
        let bundle = assemble_prompt(r, &inp.bank, policy)?;
        rows.push(ManifestRow::new(r, label, predicted, &bundle));
        bundles.push(bundle);
    }

    let mut out = inp.out(&a.eval.out)?;
    write_manifest(out.path("manifests/retrieval.jsonl")?, &rows)?;
    out.record("manifests/retrieval.jsonl")?;
    let mut csv = String::from("head,accuracy\n");
    for (h, acc) in &accuracy {
        let _ = writeln!(csv, "{h},{acc}");
        println!("{h} top-{} accuracy {acc:.4}", a.topk);
    }
    let _ = writeln!(csv, "ensemble,{}", hits as f64 / labels.len() as f64);
    out.write("logs/retrieval_accuracy.csv", csv)?;
    out.write("logs/dominance.csv", head_dominance(&results, inp.bank.taxonomy())?.to_csv())?;
    if a.classify {
        println!("{}", accuracy_line("ensemble", hits, labels.len()));
    }

    let mut failure = None;
    if a.dispatch {
        let cfg_endpoint = inp.config.as_ref().map(|c| &c.endpoint);
        let endpoint = resolve_endpoint(a.endpoint.clone(), None, cfg_endpoint)?;
        let concurrency = a.concurrency.or(cfg_endpoint.map(|e| e.concurrency)).unwrap_or(neurosem_core::retrieval::DEFAULT_CONCURRENCY);
        let seed = a.image_seed.or(cfg_endpoint.and_then(|e| e.seed));
        failure = send_prompts(&mut out, &bundles, &endpoint, concurrency, seed)?;
    }
    out.finish("retrieve", raw, a.eval.split_seed, inp.config)?;
    failure.map_or(Ok(()), Err)
}

fn classify(a: EvalArgs, raw: &[String]) -> Result<()> {
    let inp = eval_inputs(&a)?;
    let results = inp.retrieve(1)?;
    let labels = inp.data.labels();
    let mut csv = String::from("epoch,true_class,predicted_class\n");
    let mut hits = 0;
    for (r, &label) in results.iter().zip(&labels) {
        let predicted = ensemble_classify(r, &inp.bank)?;
        hits += usize::from(predicted == label);
        let _ = writeln!(csv, "{},{label},{predicted}", r.epoch);
    }
    let mut out = inp.out(&a.out)?;
    out.write("logs/classification.csv", csv)?;
    println!("{}", accuracy_line("ensemble", hits, labels.len()));
    out.finish("classify", raw, a.split_seed, inp.config)?;
    Ok(())
}

fn saliency(a: SaliencyArgs, raw: &[String]) -> Result<()> {
    let inp = eval_inputs(&a.eval)?;
    let scope = HeadScope::from(a.head.clone());
    let n = a.max_epochs.unwrap_or(inp.data.len()).min(inp.data.len());
    let rows: Vec<usize> = (0..n).collect();
    let labels: Vec<usize> = inp.data.labels()[..n].to_vec();
    let map = compute_saliency(
        &inp.encoder,
        &inp.data.batch_tensor(&rows),
        &labels,
        &inp.bank,
        &scope,
        &inp.data.channel_names,
        inp.temperature,
        a.seed,
    )?;
    let layout_path = a.layout.clone().or_else(|| inp.config.as_ref().and_then(|c| c.data.layout.clone()));
    let layout = match layout_path {
        Some(p) => ChannelLayout::load(p)?,
        None => ChannelLayout::rings(&inp.data.channel_names),
    };
    let svg = render_topomap(&map, &layout)?;
    let mut out = inp.out(&a.eval.out)?;
    out.write(&format!("logs/saliency_{scope}.csv"), map.to_csv())?;
    out.write(&format!("figures/topomap_{scope}.svg"), svg)?;
    let top: Vec<&str> = map.ranking().iter().take(6).map(|&i| map.channel_names[i].as_str()).collect();
    println!("most salient channels ({scope}): {}", top.join(", "));
    out.finish("saliency", raw, Some(a.seed), inp.config)?;
    Ok(())
}

fn tsne_cmd(a: TsneArgs, raw: &[String]) -> Result<()> {
    let mut inp = eval_inputs(&a.eval)?;
    if let Some(n) = a.max_epochs {
        let keep: Vec<usize> = (0..n.min(inp.data.len())).collect();
        inp.data = inp.data.subset(&keep);
        inp.indices.truncate(keep.len());
    }
    let mut emb = inp.embed()?;
    if let Some(heads) = &a.heads {
        for h in heads {
            if emb.get(h).is_none() {
                return Err(Error::Lookup(format!("unknown head {h}")));
            }
        }
        emb.heads.retain(|(n, _)| heads.contains(n));
    }
    let (x, labels) = stack_heads(&emb)?;
    let cfg = TsneConfig { perplexity: a.perplexity, iterations: a.iterations, seed: a.seed, ..TsneConfig::default() };
    let result = tsne(&x, labels, &cfg)?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    let mut kl = String::from("iteration,kl\n");
    for (i, v) in result.kl_trace.iter().enumerate() {
        let _ = writeln!(kl, "{i},{v}");
    }
    let mut out = inp.out(&a.eval.out)?;
    out.write("logs/tsne.csv", result.to_csv())?;
    out.write("logs/tsne_kl.csv", kl)?;
    out.write("figures/tsne.svg", render_scatter(&result))?;
    println!("embedded {} points, final KL {:.4}", result.len(), result.kl_trace.last().copied().unwrap_or(f64::NAN));
    out.finish("tsne", raw, Some(a.seed), inp.config)?;
    Ok(())
}

fn features(path: &Path) -> Result<Tensor<f64>> {
    Ok(read_nsem_any(path)?.into_f64())
}

fn png_pairs(a: &Path, b: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    if !(a.is_dir() && b.is_dir()) {
        return Ok(vec![(a.to_path_buf(), b.to_path_buf())]);
    }
    let list = |d: &Path| -> Result<Vec<String>> {
        let mut names = Vec::new();
        for e in std::fs::read_dir(d).map_err(Error::Io)? {
            let name = e.map_err(Error::Io)?.file_name().to_string_lossy().into_owned();
            if name.to_ascii_lowercase().ends_with(".png") {
                names.push(name);
            }
        }
        names.sort();
        Ok(names)
    };
    let (na, nb) = (list(a)?, list(b)?);
    if na != nb {
        return Err(Error::Data(format!("{} and {} hold different PNG file names", a.display(), b.display())));
    }
    if na.is_empty() {
        return Err(Error::Data(format!("no PNG files in {}", a.display())));
    }
    Ok(na.iter().map(|n| (a.join(n), b.join(n))).collect())
}

fn image_metric(name: &str, p: &PairArgs, f: fn(&RgbImage, &RgbImage) -> Result<f64>) -> Result<MetricReport> {
    let pairs = png_pairs(&p.a, &p.b)?;
    let values = pairs
        .iter()
        .map(|(x, y)| f(&metrics::load_png(x)?, &metrics::load_png(y)?))
        .collect::<Result<Vec<f64>>>()?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(MetricReport::new(name, mean).with_std(std).param("pairs", values.len()))
}

fn metrics_cmd(m: MetricsCommand, raw: &[String]) -> Result<()> {
    let (report, out) = match m {
        MetricsCommand::Fid(p) => (MetricReport::new("fid", metrics::fid(&features(&p.a)?, &features(&p.b)?)?), p.out),
        MetricsCommand::Kid(k) => (kid_report(&k)?, k.pair.out),
        MetricsCommand::Is(a) => (is_report(&a)?, a.out),
        MetricsCommand::Ssim(p) => (image_metric("ssim", &p, metrics::ssim)?, p.out),
        MetricsCommand::Pixcorr(p) => (image_metric("pixcorr", &p, metrics::pixcorr)?, p.out),
        MetricsCommand::Cosine(p) => {
            (MetricReport::new("cosine", metrics::cosine_score(&features(&p.a)?, &features(&p.b)?)?), p.out)
        }
        MetricsCommand::Swav(p) => {
            (MetricReport::new("swav", metrics::swav_distance(&features(&p.a)?, &features(&p.b)?)?), p.out)
        }
        MetricsCommand::TwoWay(t) => (two_way_report(&t)?, t.out),
    };
    let json = serde_json::to_string(&report)?;
    println!("{json}");
    if let Some(dir) = out {
        let mut outs = Outputs::new(dir)?;
        outs.write(&format!("logs/metric_{}.json", report.metric), json + "\n")?;
        outs.finish(&format!("metrics_{}", report.metric), raw, None, None)?;
    }
    Ok(())
}

fn kid_report(k: &KidArgs) -> Result<MetricReport> {
    let (a, b) = (features(&k.pair.a)?, features(&k.pair.b)?);
    let (mean, std, size, subsets) = match (k.subset_size, k.subsets) {
        (None, None) => {
            let (m, s, size) = metrics::kid_default(&a, &b, k.seed)?;
            (m, s, size, metrics::KID_SUBSETS)
        }
        (size, subsets) => {
            let n = a.shape()[0].min(b.shape()[0]);
            let size = size.unwrap_or(metrics::KID_SUBSET_SIZE.min(n));
            let subsets = subsets.unwrap_or(metrics::KID_SUBSETS);
            let (m, s) = metrics::kid(&a, &b, size, subsets, k.seed)?;
            (m, s, size, subsets)
        }
    };
    Ok(MetricReport::new("kid", mean)
        .with_std(std)
        .param("subset_size", size)
        .param("subsets", subsets)
        .param("seed", k.seed))
}

fn is_report(a: &IsArgs) -> Result<MetricReport> {
    let (mean, std) = metrics::inception_score(&features(&a.probs)?, a.splits)?;
    Ok(MetricReport::new("is", mean).with_std(std).param("splits", a.splits))
}

fn two_way_report(t: &TwoWayArgs) -> Result<MetricReport> {
    let (gen, gt) = (features(&t.gen)?, features(&t.gt)?);
    Ok(if t.exhaustive {
        MetricReport::new("two_way", metrics::two_way_exhaustive(&gen, &gt)?).param("exhaustive", true)
    } else {
        MetricReport::new("two_way", metrics::two_way_identification(&gen, &gt, t.seed)?).param("seed", t.seed)
    })
}

/// Flag, then environment variable, then config file.
fn resolve_endpoint(flag: Option<String>, timeout_secs: Option<u64>, cfg: Option<&EndpointConfig>) -> Result<Endpoint> {
    let url = flag
        .or_else(|| std::env::var(ENDPOINT_ENV).ok().filter(|s| !s.is_empty()))
        .or_else(|| cfg.and_then(|c| c.url.clone()))
        .ok_or_else(|| Error::Config(format!("no endpoint: pass --endpoint, set {ENDPOINT_ENV} or endpoint.url")))?;
    let secs = timeout_secs.or(cfg.map(|c| c.timeout_secs)).unwrap_or(EndpointConfig::default().timeout_secs);
    let mut endpoint = Endpoint::new(url);
    endpoint.timeout = Duration::from_secs(secs);
    Ok(endpoint)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Dispatches and logs every bundle. Returns the transport error to report
/// once the run manifest is written, if any epoch failed.
fn send_prompts(
    out: &mut Outputs,
    bundles: &[PromptBundle],
    endpoint: &Endpoint,
    concurrency: usize,
    seed: Option<u64>,
) -> Result<Option<Error>> {
    let dir = out.path("figures/images/x")?.parent().map(Path::to_path_buf).unwrap_or_default();
    let outcomes = dispatch_all(bundles, endpoint, &dir, concurrency, seed)?;
    let mut log = String::from("epoch,status,detail\n");
    let mut failed = 0;
    for o in &outcomes {
        match (&o.image, &o.error) {
            (Some(p), _) => {
                let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                out.record(&format!("figures/images/{name}"))?;
                let _ = writeln!(log, "{},ok,figures/images/{name}", o.epoch);
            }
            (None, err) => {
                failed += 1;
                let msg = err.clone().unwrap_or_default();
                eprintln!("epoch {}: {msg}", o.epoch);
                let _ = writeln!(log, "{},failed,{}", o.epoch, csv_field(&msg));
            }
        }
    }
    out.write("logs/dispatch.csv", log)?;
    println!("dispatched {} prompts, {} images written, {failed} failed", outcomes.len(), outcomes.len() - failed);
    Ok((failed > 0).then(|| Error::Transport {
        endpoint: endpoint.url.clone(),
        message: format!("{failed} of {} prompts failed", outcomes.len()),
    }))
}

fn prompt(a: PromptArgs, raw: &[String]) -> Result<()> {
    let config = a.config.as_ref().map(parse_config).transpose()?;
    let cfg_endpoint = config.as_ref().map(|c| &c.endpoint);
    let endpoint = resolve_endpoint(a.endpoint.clone(), a.timeout_secs, cfg_endpoint)?;
    let rows = read_manifest(&a.manifest)?;
    let bundles: Vec<PromptBundle> = rows
        .iter()
        .map(|r| PromptBundle { epoch: r.epoch, prompt: r.prompt.clone(), sources: Vec::new() })
        .collect();
    let concurrency = a.concurrency.or(cfg_endpoint.map(|e| e.concurrency)).unwrap_or(neurosem_core::retrieval::DEFAULT_CONCURRENCY);
    let seed = a.image_seed.or(cfg_endpoint.and_then(|e| e.seed));
    let mut out = Outputs::new(out_dir(a.out.clone(), config.as_ref()))?;
    let failure = send_prompts(&mut out, &bundles, &endpoint, concurrency, seed)?;
    out.finish("prompt", raw, seed, config)?;
    failure.map_or(Ok(()), Err)
}

fn evaluate_test(ckpt: &Checkpoint, test: &EegDataset, bank: &CaptionBank) -> Result<(Vec<(String, f64)>, f64)> {
    let encoder = ckpt.encoder()?;
    let rows: Vec<usize> = (0..test.len()).collect();
    let emb = encoder.encode_chunked(&test.batch_tensor(&rows), ENCODE_CHUNK)?;
    let results = retrieve_all(&emb, bank, 1, &rows)?;
    let labels = test.labels();
    let per_head = retrieval_accuracy(&results, &labels, bank)?;
    let mut hits = 0;
    for (r, &l) in results.iter().zip(&labels) {
        hits += usize::from(ensemble_classify(r, bank)? == l);
    }
    Ok((per_head, hits as f64 / labels.len() as f64))
}

fn ablate(a: AblateArgs, raw: &[String]) -> Result<()> {
    let mut cfg = parse_config(&a.config)?;
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    cfg.validate()?;
    let (ds, bank) = load_data(&cfg)?;
    let sp = split_dataset(&ds, cfg.data.split_seed)?;
    let mut out = Outputs::new(out_dir(a.out, Some(&cfg)))?;
    let mut table = String::new();
    for (name, kind) in [("contrastive", LossKind::Contrastive), ("mse", LossKind::Mse)] {
        let tc = TrainConfig { loss_kind: kind, ..cfg.train.clone() };
        let total = tc.epochs;
        eprintln!("training {name} variant");
        let outcome = trainer::train(&sp.train, Some(&sp.val), &bank, &cfg.encoder, &tc, &mut |r| print_epoch(r, total))?;
        out.write(&format!("logs/ablation_{name}_history.csv"), outcome.history.to_csv())?;
        let (per_head, ensemble) = evaluate_test(&outcome.best_checkpoint, &sp.test, &bank)?;
        if table.is_empty() {
            table.push_str("loss,mean_accuracy,ensemble_accuracy");
            for (h, _) in &per_head {
                let _ = write!(table, ",{h}");
            }
            table.push('\n');
        }
        let mean = per_head.iter().map(|(_, v)| v).sum::<f64>() / per_head.len() as f64;
        let _ = write!(table, "{name},{mean},{ensemble}");
        for (_, v) in &per_head {
            let _ = write!(table, ",{v}");
        }
        table.push('\n');
    }
    out.write("logs/ablation.csv", &table)?;
    println!("{:<12} {:>14} {:>18}", "loss", "mean accuracy", "ensemble accuracy");
    for line in table.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let num = |s: &str| s.parse::<f64>().unwrap_or(f64::NAN);
        println!("{:<12} {:>14.4} {:>18.4}", f[0], num(f[1]), num(f[2]));
    }
    let seed = cfg.train.seed;
    out.finish("ablate", raw, Some(seed), Some(cfg))?;
    Ok(())
}

fn stub_server(a: StubArgs) -> Result<()> {
    let server = StubServer::start(&a.addr, StubOptions { fail_when_prompt_contains: a.fail_on, log_path: a.log })?;
    println!("stub endpoint listening on {}", server.url());
    server.wait();
    Ok(())
}

fn replay(a: ReplayArgs) -> std::result::Result<(), CliError> {
    let fail = |module: &'static str| move |error: Error| CliError { module, error };
    let m = RunManifest::load(&a.manifest).map_err(fail("config"))?;
    if m.command == "replay" {
        return Err(fail("config")(Error::Config("cannot replay a replay".into())));
    }
    let cwd = std::env::current_dir().map_err(|e| fail("replay")(Error::Io(e)))?;
    let target = if a.out.is_absolute() { a.out.clone() } else { cwd.join(&a.out) };
    if m.cwd != cwd {
        std::env::set_current_dir(&m.cwd).map_err(|e| fail("replay")(Error::Io(e)))?;
    }
    let mut args = set_flag(&m.args, "--out", &target.to_string_lossy());
    if let Some(cfg) = &m.config {
        let path = target.join("manifests/replay_config.toml");
        let text = cfg.to_toml().map_err(fail("config"))?;
        std::fs::create_dir_all(target.join("manifests")).map_err(|e| fail("replay")(Error::Io(e)))?;
        std::fs::write(&path, text).map_err(|e| fail("replay")(Error::Io(e)))?;
        args = set_flag(&args, "--config", &path.to_string_lossy());
    }
    let cli = crate::Cli::try_parse_from(std::iter::once("neurosem".to_string()).chain(args.iter().cloned()))
        .map_err(|e| fail("config")(Error::Config(format!("recorded arguments no longer parse: {e}"))))?;
    crate::run(cli, &args)?;

    let again = RunManifest::load(target.join(format!("manifests/run_{}.json", m.command))).map_err(fail("replay"))?;
    let mut differing = Vec::new();
    for rec in &m.outputs {
        match again.outputs.iter().find(|o| o.path == rec.path) {
            Some(o) if o.sha256 == rec.sha256 => {}
            _ => differing.push(rec.path.clone()),
        }
    }
    if differing.is_empty() {
        println!("replay: {} outputs reproduced byte-identically", m.outputs.len());
        Ok(())
    } else {
        Err(fail("replay")(Error::Numeric(format!(
            "{} of {} outputs differ: {}",
            differing.len(),
            m.outputs.len(),
            differing.join(", ")
        ))))
    }
}
