//! Downstream few-shot protocols on the branch-A encoder: frozen-encoder
//! (linear) probing, semi-supervised fine-tuning, cross-dataset transfer and
//! shot sweeps.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array2, Array4, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::csi::{few_shot_split, labels_of, segment, CsiSample, Dataset};
use crate::error::{CapcError, Result};
use crate::loss::cross_entropy_grad;
use crate::model::{Encoder, LinearClassifier, Mode, Module};
use crate::optim::{Adam, AdamConfig, CosineSchedule};
use crate::seed;

const TAG_SPLIT: u64 = 0x11;
const TAG_INIT: u64 = 0x12;
const TAG_ORDER: u64 = 0x13;
/// Windows encoded per call when extracting features.
const ENCODE_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Linear,
    Semi,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Linear => "linear",
            EvalMode::Semi => "semi",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = CapcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "linear" => Ok(EvalMode::Linear),
            "semi" => Ok(EvalMode::Semi),
            other => Err(CapcError::invalid(format!(
                "unknown evaluation mode `{other}` (expected linear or semi)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_classifier: f64,
    /// Semi-supervised mode only.
    pub lr_encoder: f64,
    pub shots: usize,
    pub seed: u64,
}

impl EvalConfig {
    pub fn linear() -> Self {
        Self {
            mode: EvalMode::Linear,
            batch_size: 512,
            epochs: 100,
            lr_classifier: 1e-2,
            lr_encoder: 0.0,
            shots: 6,
            seed: 0,
        }
    }

    pub fn semi() -> Self {
        Self {
            mode: EvalMode::Semi,
            epochs: 20,
            lr_encoder: 5e-3,
            ..Self::linear()
        }
    }

    pub fn for_mode(mode: EvalMode) -> Self {
        match mode {
            EvalMode::Linear => Self::linear(),
            EvalMode::Semi => Self::semi(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.shots == 0 {
            return Err(CapcError::Config("batch_size and shots must be positive".into()));
        }
        if !(self.lr_classifier > 0.0 && self.lr_encoder >= 0.0) {
            return Err(CapcError::Config(
                "lr_classifier must be positive and lr_encoder non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub train_count: usize,
    pub test_count: usize,
}

/// Windows of every sample stacked as `[N * L, N_a, N_s, N_f]`.
fn windows_of(samples: &[CsiSample], frames_per_window: usize) -> Result<(Array4<f32>, usize)> {
    let first = segment(samples.first().ok_or(CapcError::EmptyDataset)?, frames_per_window)?;
    let (l, na, ns, nf) = first.windows.dim();
    let mut out = Array4::zeros((samples.len() * l, na, ns, nf));
    for (i, s) in samples.iter().enumerate() {
        let ws = segment(s, frames_per_window)?;
        out.slice_mut(s![i * l..(i + 1) * l, .., .., ..]).assign(&ws.windows);
    }
    Ok((out, l))
}

/// Frozen-encoder features: the embeddings of all `L` windows of a sample,
/// concatenated in time order, `[N, D * L]`.
pub fn embed_sequences(encoder: &Encoder<f32>, samples: &[CsiSample]) -> Result<Array2<f32>> {
    let (windows, l) = windows_of(samples, encoder.config.frames)?;
    let d = encoder.embed_dim();
    let mut z = Array2::zeros((windows.len_of(Axis(0)), d));
    let rows = windows.len_of(Axis(0));
    for start in (0..rows).step_by(ENCODE_CHUNK) {
        let end = (start + ENCODE_CHUNK).min(rows);
        let chunk = encoder.encode(windows.slice(s![start..end, .., .., ..]))?;
        z.slice_mut(s![start..end, ..]).assign(&chunk);
    }
    Ok(z.into_shape_with_order((samples.len(), l * d)).expect("contiguous"))
}

/// Top-1 accuracy of argmax predictions.
pub fn accuracy(logits: ArrayView2<'_, f32>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits
        .outer_iter()
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            best.0 == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

fn minibatches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, &[TAG_ORDER, epoch as u64]));
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn gather(x: &Array2<f32>, idx: &[usize]) -> Array2<f32> {
    x.select(Axis(0), idx)
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Trains a fresh classifier on fixed features and returns it. This is the
/// probe used by every frozen-encoder protocol.
pub fn train_probe(
    features: &Array2<f32>,
    labels: &[usize],
    classes: usize,
    config: &EvalConfig,
) -> Result<LinearClassifier<f32>> {
    config.validate()?;
    if features.nrows() != labels.len() || labels.is_empty() {
        return Err(CapcError::invalid("features and labels must be non-empty and aligned"));
    }
    let mut rng = seed::rng(config.seed, &[TAG_INIT]);
    let mut clf = LinearClassifier::new(features.ncols(), classes, &mut rng)?;
    let mut adam = Adam::new(AdamConfig::default());
    let spe = steps_per_epoch(labels.len(), config.batch_size);
    let sched = CosineSchedule::new(config.lr_classifier, 0, config.epochs * spe);
    let mut step = 0;
    for epoch in 0..config.epochs {
        for idx in minibatches(labels.len(), config.batch_size, config.seed, epoch) {
            let x = gather(features, &idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            clf.zero_grad();
            let (logits, cache) = clf.forward(x.view())?;
            let (_, dlogits) = cross_entropy_grad(&logits, &y);
            clf.backward(&cache, dlogits.view());
            adam.step(&mut clf, sched.lr_at(step))?;
            step += 1;
        }
    }
    Ok(clf)
}

/// Accuracy of a probe trained on `(train_x, train_y)` and tested on
/// `(test_x, test_y)`; the encoder-free entry point of the linear protocol.
pub fn probe_features(
    train_x: &Array2<f32>,
    train_y: &[usize],
    test_x: &Array2<f32>,
    test_y: &[usize],
    classes: usize,
    config: &EvalConfig,
) -> Result<f64> {
    let clf = train_probe(train_x, train_y, classes, config)?;
    Ok(accuracy(clf.classify(test_x.view())?.view(), test_y))
}

/// Few-shot split with at least one held-out sample per class.
fn split(dataset: &Dataset, config: &EvalConfig) -> Result<(Dataset, Dataset)> {
    config.validate()?;
    let split_seed = seed::derive(config.seed, &[TAG_SPLIT]);
    let (train, test) = few_shot_split(dataset, config.shots, split_seed)?;
    let support = test.class_histogram();
    if let Some(class) = support.iter().position(|&n| n == 0) {
        return Err(CapcError::InsufficientData {
            class,
            available: config.shots,
            required: config.shots + 1,
        });
    }
    Ok((train, test))
}

fn check_windows(encoder: &Encoder<f32>, dataset: &Dataset) -> Result<()> {
    let (na, ns, nt) = dataset.dims().ok_or(CapcError::EmptyDataset)?;
    let c = &encoder.config;
    if na != c.links || ns != c.subcarriers || nt < c.frames {
        return Err(CapcError::invalid(format!(
            "encoder windows are {}x{}x{} (links x subcarriers x frames) but the dataset has \
             {na} links, {ns} subcarriers and {nt} frames; antenna and subcarrier dimensions \
             must align and every sample must hold at least one window",
            c.links, c.subcarriers, c.frames
        )));
    }
    Ok(())
}

/// Frozen encoder, trained classifier on `shots` samples per class, accuracy
/// on the remaining labelled samples.
pub fn linear_eval(encoder: &Encoder<f32>, dataset: &Dataset, config: &EvalConfig) -> Result<EvalReport> {
    check_windows(encoder, dataset)?;
    let (train, test) = split(dataset, config)?;
    let train_x = embed_sequences(encoder, &train.samples)?;
    let test_x = embed_sequences(encoder, &test.samples)?;
    let train_y = labels_of(&train.samples)?.to_vec();
    let test_y = labels_of(&test.samples)?.to_vec();
    let accuracy = probe_features(&train_x, &train_y, &test_x, &test_y, dataset.class_count, config)?;
    Ok(EvalReport {
        accuracy,
        train_count: train.len(),
        test_count: test.len(),
    })
}

/// Fine-tunes a copy of the encoder together with the classifier (encoder
/// batch norm in inference mode) and returns the report and the tuned
/// encoder. With `lr_encoder = 0` this reduces to [`linear_eval`].
pub fn semi_supervised_eval(
    encoder: &Encoder<f32>,
    dataset: &Dataset,
    config: &EvalConfig,
) -> Result<(EvalReport, Encoder<f32>)> {
    check_windows(encoder, dataset)?;
    let (train, test) = split(dataset, config)?;
    let mut enc = encoder.clone();
    let (train_w, l) = windows_of(&train.samples, enc.config.frames)?;
    let train_y = labels_of(&train.samples)?.to_vec();
    let d = enc.embed_dim();
    let n = train_y.len();

    let mut rng = seed::rng(config.seed, &[TAG_INIT]);
    let mut clf = LinearClassifier::new(d * l, dataset.class_count, &mut rng)?;
    let mut adam_c = Adam::new(AdamConfig::default());
    let mut adam_e = Adam::new(AdamConfig::default());
    let spe = steps_per_epoch(n, config.batch_size);
    let total = config.epochs * spe;
    let sched_c = CosineSchedule::new(config.lr_classifier, 0, total);
    let sched_e = CosineSchedule::new(config.lr_encoder, 0, total);
    let mut step = 0;
    for epoch in 0..config.epochs {
        for idx in minibatches(n, config.batch_size, config.seed, epoch) {
            let rows: Vec<usize> = idx.iter().flat_map(|&i| i * l..(i + 1) * l).collect();
            let x = train_w.select(Axis(0), &rows);
            let y: Vec<usize> = idx.iter().map(|&i| train_y[i]).collect();
            enc.zero_grad();
            clf.zero_grad();
            let (z, enc_cache) = enc.forward(x.view(), Mode::Eval)?;
            let feats = z.into_shape_with_order((idx.len(), l * d)).expect("contiguous");
            let (logits, cache) = clf.forward(feats.view())?;
            let (_, dlogits) = cross_entropy_grad(&logits, &y);
            let dfeats = clf.backward(&cache, dlogits.view());
            let dz = dfeats.into_shape_with_order((idx.len() * l, d)).expect("contiguous");
            enc.backward(enc_cache, dz.view());
            adam_c.step(&mut clf, sched_c.lr_at(step))?;
            adam_e.step(&mut enc, sched_e.lr_at(step))?;
            step += 1;
        }
    }
    let test_x = embed_sequences(&enc, &test.samples)?;
    let test_y = labels_of(&test.samples)?.to_vec();
    let acc = accuracy(clf.classify(test_x.view())?.view(), &test_y);
    Ok((
        EvalReport {
            accuracy: acc,
            train_count: train.len(),
            test_count: test.len(),
        },
        enc,
    ))
}

/// Linear evaluation of a frozen encoder on a different dataset with a fresh
/// classifier. The sequence length may differ; the window shape may not.
pub fn transfer_eval(encoder: &Encoder<f32>, target: &Dataset, config: &EvalConfig) -> Result<EvalReport> {
    check_windows(encoder, target)?;
    linear_eval(encoder, target, config)
}

/// Runs the configured protocol.
pub fn evaluate(encoder: &Encoder<f32>, dataset: &Dataset, config: &EvalConfig) -> Result<EvalReport> {
    match config.mode {
        EvalMode::Linear => linear_eval(encoder, dataset, config),
        EvalMode::Semi => semi_supervised_eval(encoder, dataset, config).map(|r| r.0),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub method: String,
    pub mode: EvalMode,
    pub shots: usize,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub shots: Vec<usize>,
}

impl SweepTable {
    /// Mean accuracy over seeds for `(method, shots)`.
    pub fn cell_mean(&self, method: &str, shots: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.shots == shots)
            .map(|r| r.accuracy)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn methods(&self) -> Vec<String> {
        let mut m: Vec<String> = Vec::new();
        for r in &self.rows {
            if !m.contains(&r.method) {
                m.push(r.method.clone());
            }
        }
        m
    }

    /// Arithmetic mean of a method's cell means.
    pub fn row_average(&self, method: &str) -> Option<f64> {
        let cells: Vec<f64> = self
            .shots
            .iter()
            .filter_map(|&k| self.cell_mean(method, k))
            .collect();
        (!cells.is_empty()).then(|| cells.iter().sum::<f64>() / cells.len() as f64)
    }

    /// `method,mode,shots,seed,accuracy`, one line per run.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,mode,shots,seed,accuracy\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{:.6}", r.method, r.mode.name(), r.shots, r.seed, r.accuracy);
        }
        out
    }

    /// Cell means per shot count and the row average.
    pub fn summary(&self) -> String {
        let mut out = String::from("method");
        for k in &self.shots {
            let _ = write!(out, "\t{k}");
        }
        out.push_str("\tavg\n");
        for m in self.methods() {
            out.push_str(&m);
            for &k in &self.shots {
                let _ = write!(out, "\t{:.4}", self.cell_mean(&m, k).unwrap_or(f64::NAN));
            }
            let _ = writeln!(out, "\t{:.4}", self.row_average(&m).unwrap_or(f64::NAN));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        crate::csi::ensure_dir(dir)?;
        let csv = dir.join("shots.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| CapcError::io(&csv, e))?;
        let txt = dir.join("shots_summary.txt");
        std::fs::write(&txt, self.summary()).map_err(|e| CapcError::io(&txt, e))
    }
}

/// Every `(shots, seed)` cell of the configured protocol for each named
/// encoder. Cells run in parallel; each is seeded by its own `seed`.
pub fn shots_sweep(
    encoders: &[(&str, &Encoder<f32>)],
    dataset: &Dataset,
    shots: &[usize],
    seeds: &[u64],
    base: &EvalConfig,
) -> Result<SweepTable> {
    use rayon::prelude::*;
    let cells: Vec<(&str, &Encoder<f32>, usize, u64)> = encoders
        .iter()
        .flat_map(|&(name, enc)| {
            shots
                .iter()
                .flat_map(move |&k| seeds.iter().map(move |&s| (name, enc, k, s)))
        })
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(name, enc, k, s)| {
            let config = EvalConfig {
                shots: k,
                seed: s,
                ..base.clone()
            };
            evaluate(enc, dataset, &config).map(|r| SweepRow {
                method: name.to_string(),
                mode: base.mode,
                shots: k,
                seed: s,
                accuracy: r.accuracy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable {
        rows,
        shots: shots.to_vec(),
    })
}
