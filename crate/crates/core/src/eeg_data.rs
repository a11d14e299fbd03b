//! EEG epochs: file I/O, z-scoring, stratified splits and the planted-signal
//! generator used for verification.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::caption_bank::{CaptionBank, CaptionEntry, Taxonomy};
use crate::error::{contract, Error, Result};
use crate::rng::SeedStreams;
use crate::tensor::{read_nsem_any_from, write_nsem_to, Tensor};

pub const ZSCORE_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct EegEpoch {
    /// Row-major `channels × samples`, microvolts.
    pub data: Vec<f32>,
    pub class_label: usize,
    pub subject_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EegDataset {
    pub epochs: Vec<EegEpoch>,
    pub channel_names: Vec<String>,
    pub sample_rate: f64,
    pub channels: usize,
    pub samples: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    channels: usize,
    samples: usize,
    sample_rate: f64,
    channel_names: Vec<String>,
    epochs: usize,
}

impl EegDataset {
    pub fn new(epochs: Vec<EegEpoch>, channel_names: Vec<String>, sample_rate: f64, samples: usize) -> Result<Self> {
        let ds = Self {
            channels: channel_names.len(),
            epochs,
            channel_names,
            sample_rate,
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.channel_names.len() != self.channels {
            return Err(Error::Dimension(format!(
                "{} channel names for {} channels",
                self.channel_names.len(),
                self.channels
            )));
        }
        let per_epoch = self.channels * self.samples;
        for (i, e) in self.epochs.iter().enumerate() {
            if e.data.len() != per_epoch {
                return Err(Error::Dimension(format!(
                    "epoch {i} holds {} values, expected {} channels x {} samples",
                    e.data.len(),
                    self.channels,
                    self.samples
                )));
            }
            if e.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("epoch {i} contains non-finite values")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.epochs.iter().map(|e| e.class_label).collect()
    }

    pub fn classes(&self) -> usize {
        self.epochs.iter().map(|e| e.class_label).max().map_or(0, |m| m + 1)
    }

    pub fn subset(&self, indices: &[usize]) -> EegDataset {
        EegDataset {
            epochs: indices.iter().map(|&i| self.epochs[i].clone()).collect(),
            channel_names: self.channel_names.clone(),
            sample_rate: self.sample_rate,
            channels: self.channels,
            samples: self.samples,
        }
    }

    /// Stacks the selected epochs into a `B × channels × samples` tensor.
    pub fn batch_tensor(&self, indices: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(indices.len() * self.channels * self.samples);
        for &i in indices {
            data.extend_from_slice(&self.epochs[i].data);
        }
        Tensor::new([indices.len(), self.channels, self.samples], data).expect("validated epoch shapes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = BufWriter::new(f);
        let header = DatasetHeader {
            channels: self.channels,
            samples: self.samples,
            sample_rate: self.sample_rate,
            channel_names: self.channel_names.clone(),
            epochs: self.epochs.len(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        let n = self.epochs.len();
        let mut data = Vec::with_capacity(n * self.channels * self.samples);
        let mut labels = Vec::with_capacity(n * 2);
        for e in &self.epochs {
            data.extend_from_slice(&e.data);
            labels.push(e.class_label as f64);
            labels.push(e.subject_id as f64);
        }
        write_nsem_to(&mut w, &Tensor::new([n, self.channels, self.samples], data)?)?;
        write_nsem_to(&mut w, &Tensor::new([n, 2], labels)?)?;
        w.flush().map_err(|e| Error::file(path, e))
    }
}

/// Reads the JSON-header + NSEM dataset format.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<EegDataset> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::file(path, e))?;
    let mut r = BufReader::new(f);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::file(path, e))?;
    let header: DatasetHeader =
        serde_json::from_str(line.trim_end()).map_err(|e| Error::Data(format!("bad dataset header: {e}")))?;
    let data = read_nsem_any_from(&mut r)?.into_f32();
    let labels = read_nsem_any_from(&mut r)?.into_f64();

    let expect = [header.epochs, header.channels, header.samples];
    if data.shape() != expect {
        return Err(Error::Dimension(format!(
            "dataset payload has shape {:?}, header declares {:?}",
            data.shape(),
            expect
        )));
    }
    if labels.shape() != [header.epochs, 2] {
        return Err(Error::Dimension(format!(
            "label tensor has shape {:?}, expected [{}, 2]",
            labels.shape(),
            header.epochs
        )));
    }
    let per = header.channels * header.samples;
    let mut epochs = Vec::with_capacity(header.epochs);
    for i in 0..header.epochs {
        let chunk = &data.data()[i * per..(i + 1) * per];
        if chunk.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("epoch {i} contains non-finite values")));
        }
        let (class, subject) = (labels.data()[2 * i], labels.data()[2 * i + 1]);
        if class < 0.0 || subject < 0.0 || class.fract() != 0.0 || subject.fract() != 0.0 {
            return Err(Error::Data(format!("epoch {i} has invalid labels ({class}, {subject})")));
        }
        epochs.push(EegEpoch {
            data: chunk.to_vec(),
            class_label: class as usize,
            subject_id: subject as usize,
        });
    }
    EegDataset::new(epochs, header.channel_names, header.sample_rate, header.samples)
}

/// Per-channel standardisation of one `channels × samples` epoch.
pub fn zscore(data: &[f32], samples: usize) -> Result<Vec<f32>> {
    contract!(samples >= 2, "z-scoring needs at least 2 samples, got {samples}");
    contract!(
        data.len() % samples == 0,
        "epoch length {} is not a multiple of {samples}",
        data.len()
    );
    let mut out = Vec::with_capacity(data.len());
    for ch in data.chunks(samples) {
        let n = samples as f64;
        let mean = ch.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let var = ch.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + ZSCORE_EPS).sqrt();
        out.extend(ch.iter().map(|&v| ((f64::from(v) - mean) * inv) as f32));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

/// Disjoint index sets `(train, val, test)`, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Class-stratified split; deterministic per seed.
pub fn split_indices(labels: &[usize], ratios: SplitRatios, seed: u64) -> Result<SplitIndices> {
    let SplitRatios { train, val, test } = ratios;
    contract!(
        train > 0.0 && val > 0.0 && test > 0.0,
        "split ratios must be positive, got {train}/{val}/{test}"
    );
    contract!(
        ((train + val + test) - 1.0).abs() <= 1e-9,
        "split ratios must sum to 1, got {}",
        train + val + test
    );
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let streams = SeedStreams::new(seed);
    let mut out = SplitIndices {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (class, mut members) in by_class {
        let n = members.len();
        if n < 3 {
            return Err(Error::Stratification(format!(
                "class {class} has {n} epochs, fewer than the 3 split parts"
            )));
        }
        members.shuffle(&mut streams.indexed("split", class as u64));
        let n_val = ((n as f64 * val).round() as usize).max(1);
        let n_test = ((n as f64 * test).round() as usize).max(1);
        if n_val + n_test >= n {
            return Err(Error::Stratification(format!(
                "class {class} has {n} epochs, too few to leave a training part"
            )));
        }
        out.val.extend_from_slice(&members[..n_val]);
        out.test.extend_from_slice(&members[n_val..n_val + n_test]);
        out.train.extend_from_slice(&members[n_val + n_test..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

pub fn split(dataset: &EegDataset, ratios: SplitRatios, seed: u64) -> Result<(EegDataset, EegDataset, EegDataset)> {
    let idx = split_indices(&dataset.labels(), ratios, seed)?;
    Ok((dataset.subset(&idx.train), dataset.subset(&idx.val), dataset.subset(&idx.test)))
}

/// Planted-structure generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub classes: usize,
    pub epochs_per_class: usize,
    pub channels: usize,
    pub samples: usize,
    pub sample_rate: f64,
    /// Channels carrying the class burst, indexed by class. A single entry
    /// applies to every class.
    pub informative_channels: Vec<Vec<usize>>,
    /// Ratio of burst power to white-noise power; infinity means noiseless.
    pub snr: f64,
    pub subjects: usize,
    pub embed_dim: usize,
    /// Norm of the Gaussian perturbation added to each caption direction.
    pub bank_noise: f64,
    pub captions_per_pair: usize,
    /// When set, only this category's captions encode the class; the others
    /// hold class-independent random directions.
    pub informative_category: Option<String>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 8,
            epochs_per_class: 40,
            channels: 32,
            samples: 256,
            sample_rate: 256.0,
            informative_channels: vec![vec![3, 7, 11]],
            snr: 10.0,
            subjects: 1,
            embed_dim: 512,
            bank_noise: 0.1,
            captions_per_pair: 1,
            informative_category: None,
            seed: 7,
        }
    }
}

/// Captions per (class, category) for categories that carry no class signal.
const DISTRACTOR_CAPTIONS: usize = 4;

impl SynthSpec {
    pub fn validate(&self, taxonomy: &Taxonomy) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.classes == 0 || self.epochs_per_class == 0 || self.channels == 0 || self.samples < 2 {
            return cfg("synth needs classes, epochs, channels >= 1 and samples >= 2".into());
        }
        if self.informative_channels.is_empty()
            || (self.informative_channels.len() != 1 && self.informative_channels.len() != self.classes)
        {
            return cfg(format!(
                "informative_channels must list 1 or {} channel sets, got {}",
                self.classes,
                self.informative_channels.len()
            ));
        }
        if let Some(&bad) = self.informative_channels.iter().flatten().find(|&&c| c >= self.channels) {
            return cfg(format!("informative channel {bad} is not below {}", self.channels));
        }
        if self.snr.is_nan() || self.snr <= 0.0 {
            return cfg(format!("snr must be positive, got {}", self.snr));
        }
        if self.embed_dim < 2 || self.captions_per_pair == 0 || self.subjects == 0 {
            return cfg("embed_dim >= 2, captions_per_pair >= 1 and subjects >= 1 are required".into());
        }
        if let Some(cat) = &self.informative_category {
            if taxonomy.index_of(cat).is_none() {
                return cfg(format!("unknown informative_category {cat}"));
            }
        }
        Ok(())
    }

    pub fn channels_for(&self, class: usize) -> &[usize] {
        if self.informative_channels.len() == 1 {
            &self.informative_channels[0]
        } else {
            &self.informative_channels[class]
        }
    }

    pub fn burst_frequency(class: usize) -> f64 {
        4.0 + 2.0 * class as f64
    }

    pub fn noise_std(&self) -> f64 {
        if self.snr.is_infinite() {
            0.0
        } else {
            (0.5 / self.snr).sqrt()
        }
    }
}

pub fn channel_names(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("E{i}")).collect()
}

/// Generates a dataset and its paired caption bank.
///
/// Class `c` carries a unit-amplitude sinusoid at `4 + 2c` Hz on its
/// informative channels; every channel gets white noise with variance
/// `0.5 / snr`. Caption `(c, k)` points along basis direction
/// `(k·classes + c) mod D`, perturbed and re-normalised.
pub fn synth_generate(spec: &SynthSpec, taxonomy: &Taxonomy) -> Result<(EegDataset, CaptionBank)> {
    spec.validate(taxonomy)?;
    let streams = SeedStreams::new(spec.seed);
    let sigma = spec.noise_std();
    let (ch, ns) = (spec.channels, spec.samples);

    let mut epochs = Vec::with_capacity(spec.classes * spec.epochs_per_class);
    for e in 0..spec.epochs_per_class {
        for c in 0..spec.classes {
            let index = (e * spec.classes + c) as u64;
            let mut rng = streams.indexed("synth.noise", index);
            let mut data: Vec<f32> = (0..ch * ns)
                .map(|_| (sigma * rng.sample::<f64, _>(StandardNormal)) as f32)
                .collect();
            let w = 2.0 * std::f64::consts::PI * SynthSpec::burst_frequency(c) / spec.sample_rate;
            for &k in spec.channels_for(c) {
                for t in 0..ns {
                    data[k * ns + t] += (w * t as f64).sin() as f32;
                }
            }
            epochs.push(EegEpoch {
                data,
                class_label: c,
                subject_id: e % spec.subjects,
            });
        }
    }
    let dataset = EegDataset::new(epochs, channel_names(ch), spec.sample_rate, ns)?;

    let d = spec.embed_dim;
    let mut rng = streams.stream("synth.bank");
    let mut entries = Vec::new();
    for c in 0..spec.classes {
        for (k, cat) in taxonomy.categories().iter().enumerate() {
            let informative = spec.informative_category.as_deref().map_or(true, |n| n == cat.name);
            let count = if informative {
                spec.captions_per_pair
            } else {
                spec.captions_per_pair.max(DISTRACTOR_CAPTIONS)
            };
            for j in 0..count {
                let mut v: Vec<f64> = (0..d)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt())
                    .collect();
                if informative {
                    v.iter_mut().for_each(|x| *x *= spec.bank_noise);
                    v[(k * spec.classes + c) % d] += 1.0;
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                entries.push(CaptionEntry {
                    id: format!("c{c}_{}_{j}", cat.name.to_lowercase()),
                    class_label: c,
                    category: cat.name.clone(),
                    level: cat.level,
                    text: format!("{} of class {c}, variant {j}", cat.name.to_lowercase()),
                    embedding: v.iter().map(|x| (x / norm) as f32).collect(),
                });
            }
        }
    }
    let bank = CaptionBank::from_entries(entries, taxonomy.clone())?;
    Ok((dataset, bank))
}
