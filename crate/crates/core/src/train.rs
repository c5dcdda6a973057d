//! Self-supervised pre-training loop.
//!
//! Every random draw of a step (batch permutation, augmentation, context
//! length) is derived from `(seed, epoch|step, sample)` so a run can resume
//! from the step counter alone and reproduce the uninterrupted trajectory.

use std::borrow::Cow;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{s, Array2, Array3, Array5, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{make_views, AugmentationSpec};
use crate::checkpoint::Checkpoint;
use crate::csi::{segment, CsiSample, Dataset, WindowSequence};
use crate::error::{CapcError, Result};
use crate::loss::{barlow_twins_grad, cpc_loss_grad, hybrid_loss, BtConfig};
use crate::model::{
    Branch, CapcModel, EncoderCache, EncoderConfig, GruCache, Method, Mode, ModelConfig, Module,
};
use crate::optim::{CosineSchedule, Lars, LarsConfig};
use crate::scalar::Scalar;
use crate::seed::{self, Rng};

const TAG_INIT: u64 = 0x1;
const TAG_EPOCH: u64 = 0x2;
const TAG_VIEW: u64 = 0x3;
const TAG_TIME: u64 = 0x4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_weights: f64,
    pub lr_bias_bn: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub trust_coefficient: f64,
    pub lambda: f64,
    pub beta: f64,
    /// Future windows predicted (`T`).
    pub horizon: usize,
    /// Smallest context length drawn.
    pub t_min: usize,
    pub frames_per_window: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub proj_dim: usize,
    pub channels: [usize; 2],
    pub seed: u64,
    pub method: Method,
    pub augment: AugmentationSpec,
    /// Write `epochs/epoch-XXXX` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_method(Method::Capc)
    }
}

impl TrainConfig {
    /// Full-scale defaults; the prediction horizon depends on the method.
    pub fn for_method(method: Method) -> Self {
        Self {
            epochs: 300,
            batch_size: 128,
            lr_weights: 0.2,
            lr_bias_bn: 0.0048,
            warmup_epochs: 10,
            weight_decay: 1.5e-6,
            momentum: 0.9,
            trust_coefficient: 0.001,
            lambda: 0.002,
            beta: 50.0,
            horizon: Self::default_horizon(method),
            t_min: 2,
            frames_per_window: 10,
            embed_dim: 128,
            hidden_dim: 128,
            proj_dim: 128,
            channels: [16, 32],
            seed: 0,
            method,
            augment: AugmentationSpec::capc_default(),
            checkpoint_every: 1,
        }
    }

    pub fn default_horizon(method: Method) -> usize {
        match method {
            Method::Capc => 9,
            Method::CpcOnly => 2,
            Method::BtOnly => 0,
        }
    }

    pub fn lars(&self) -> LarsConfig {
        LarsConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            trust_coefficient: self.trust_coefficient,
            ..LarsConfig::default()
        }
    }

    pub fn bt(&self) -> BtConfig {
        BtConfig {
            lambda: self.lambda,
            ..BtConfig::default()
        }
    }

    pub fn model_config(&self, links: usize, subcarriers: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                links,
                subcarriers,
                frames: self.frames_per_window,
                channels: self.channels,
                embed_dim: self.embed_dim,
            },
            hidden_dim: self.hidden_dim,
            proj_dim: self.proj_dim,
            horizon: if self.method.predictive() { self.horizon } else { 0 },
            method: self.method,
        }
    }

    pub fn init_seed(&self) -> u64 {
        seed::derive(self.seed, &[TAG_INIT])
    }

    /// Checks everything that does not need the data.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("frames_per_window", self.frames_per_window),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("proj_dim", self.proj_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(CapcError::Config(format!("{name} must be positive")));
        }
        if self.batch_size < 2 {
            return Err(CapcError::Config(
                "batch_size must be >= 2 (in-batch negatives and batch statistics)".into(),
            ));
        }
        let rates = [
            ("lr_weights", self.lr_weights),
            ("lr_bias_bn", self.lr_bias_bn),
            ("lambda", self.lambda),
            ("trust_coefficient", self.trust_coefficient),
        ];
        if let Some((name, _)) = rates.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(CapcError::Config(format!("{name} must be positive")));
        }
        if !(self.weight_decay >= 0.0 && self.beta >= 0.0 && (0.0..1.0).contains(&self.momentum)) {
            return Err(CapcError::Config(
                "weight_decay and beta must be >= 0, momentum in [0, 1)".into(),
            ));
        }
        if self.method.predictive() && (self.horizon == 0 || self.t_min == 0) {
            return Err(CapcError::Config("horizon and t_min must be >= 1".into()));
        }
        Ok(())
    }

    /// Windows per sample for `frames`, after checking the horizon fits.
    pub fn windows_for(&self, frames: usize) -> Result<usize> {
        if self.frames_per_window > frames {
            return Err(CapcError::Config(format!(
                "frames_per_window {} exceeds the {frames} frames per sample",
                self.frames_per_window
            )));
        }
        let l = frames / self.frames_per_window;
        if self.method.predictive() && l < self.horizon + self.t_min {
            return Err(CapcError::Config(format!(
                "{l} windows per sample cannot hold a context of {} plus {} predicted windows",
                self.t_min, self.horizon
            )));
        }
        Ok(l)
    }
}

/// Uniform draw of the context length `t` on `[t_min, L - T]`.
pub fn sample_timestep(windows: usize, horizon: usize, t_min: usize, rng: &mut Rng) -> Result<usize> {
    if t_min == 0 || windows < horizon + t_min {
        return Err(CapcError::Config(format!(
            "no context length in [{t_min}, {}] for {windows} windows and horizon {horizon}",
            windows as i64 - horizon as i64
        )));
    }
    Ok(rng.random_range(t_min..=windows - horizon))
}

/// Loss components of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub bt: f64,
    pub cpc_a: f64,
    pub cpc_b: f64,
    pub total: f64,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} lr={:.6e} bt={:.6} cpc_a={:.6} cpc_b={:.6} total={:.6}",
            self.step, self.lr, self.bt, self.cpc_a, self.cpc_b, self.total
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: CapcModel<f32>,
    pub logs: Vec<StepLog>,
    /// Mean total loss of every epoch that ran to completion.
    pub epoch_means: Vec<f64>,
}

/// A sample or its reversed-direction twin.
#[derive(Debug, Clone, Copy)]
struct PoolItem {
    index: usize,
    reversed: bool,
}

struct Pass<F> {
    z: Array3<F>,
    enc: EncoderCache<F>,
    c: Array2<F>,
    gru: GruCache<F>,
}

fn encode_prefix<F: Scalar>(
    branch: &mut Branch<F>,
    x: &Array5<F>,
    n: usize,
) -> Result<(Array3<F>, EncoderCache<F>)> {
    let (b, _, na, ns, nf) = x.dim();
    let w = x
        .slice(s![.., ..n, .., .., ..])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((b * n, na, ns, nf))
        .expect("contiguous windows");
    let (z, cache) = branch.encoder.forward(w.view(), Mode::Train)?;
    let d = z.ncols();
    Ok((z.into_shape_with_order((b, n, d)).expect("contiguous"), cache))
}

fn forward_predictive<F: Scalar>(branch: &mut Branch<F>, x: &Array5<F>, t: usize, horizon: usize) -> Result<Pass<F>> {
    let (z, enc) = encode_prefix(branch, x, t + horizon)?;
    let gru = branch.context.as_ref().expect("predictive branch has a context model");
    let (c, gru) = gru.forward(z.slice(s![.., ..t, ..]))?;
    Ok(Pass { z, enc, c, gru })
}

/// `[T, B, D]` embeddings of the windows after the context.
fn future<F: Scalar>(z: &Array3<F>, t: usize) -> Array3<F> {
    z.slice(s![.., t.., ..])
        .permuted_axes([1, 0, 2])
        .as_standard_layout()
        .into_owned()
}

fn backward_predictive<F: Scalar>(branch: &mut Branch<F>, pass: Pass<F>, t: usize, dz_future: Array3<F>, dc: ArrayView2<'_, F>) {
    let gru = branch.context.as_mut().expect("predictive branch has a context model");
    let dz_ctx = gru.backward(&pass.gru, dc);
    let (b, n, d) = pass.z.dim();
    let mut dz = Array3::zeros((b, n, d));
    dz.slice_mut(s![.., ..t, ..]).assign(&dz_ctx);
    dz.slice_mut(s![.., t.., ..]).assign(&dz_future.view().permuted_axes([1, 0, 2]));
    let dz = dz.into_shape_with_order((b * n, d)).expect("contiguous");
    branch.encoder.backward(pass.enc, dz.view());
}

/// Components of the hybrid objective of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HybridTerms<F> {
    pub bt: F,
    pub cpc_a: F,
    pub cpc_b: F,
    pub total: F,
}

/// Hybrid loss of one CAPC batch: both branches encode windows `..t + T`
/// of their view `[B, L, N_a, N_s, N_f]`, the context model summarizes the
/// first `t`, and the gradients are accumulated into `model`.
pub fn capc_objective<F: Scalar>(
    model: &mut CapcModel<F>,
    xa: &Array5<F>,
    xb: &Array5<F>,
    t: usize,
    bt: &BtConfig,
    beta: f64,
) -> Result<HybridTerms<F>> {
    let horizon = model.config.horizon;
    let branch_b = model
        .branch_b
        .as_mut()
        .ok_or_else(|| CapcError::invalid("the hybrid objective needs a twin model"))?;
    let pa = forward_predictive(&mut model.branch_a, xa, t, horizon)?;
    let pb = forward_predictive(branch_b, xb, t, horizon)?;
    let g_bt = barlow_twins_grad(pa.c.view(), pb.c.view(), bt)?;
    let heads = model.heads.as_mut().expect("predictive model");
    let scale = F::lit(beta);
    let ga = cpc_loss_grad(future(&pa.z, t).view(), pa.c.view(), heads, scale)?;
    let gb = cpc_loss_grad(future(&pb.z, t).view(), pb.c.view(), heads, scale)?;
    let dca = &ga.dc + &g_bt.d_a;
    let dcb = &gb.dc + &g_bt.d_b;
    backward_predictive(&mut model.branch_a, pa, t, ga.dz_future, dca.view());
    backward_predictive(branch_b, pb, t, gb.dz_future, dcb.view());
    Ok(HybridTerms {
        bt: g_bt.loss,
        cpc_a: ga.loss,
        cpc_b: gb.loss,
        total: hybrid_loss(g_bt.loss, ga.loss, gb.loss, beta),
    })
}

fn stack(views: &[WindowSequence]) -> Array5<f32> {
    let (l, na, ns, nf) = views[0].windows.dim();
    let mut out = Array5::zeros((views.len(), l, na, ns, nf));
    for (mut o, v) in out.outer_iter_mut().zip(views) {
        o.assign(&v.windows);
    }
    out
}

pub struct Trainer<'d> {
    config: TrainConfig,
    dataset: &'d Dataset,
    model: CapcModel<f32>,
    lars: Lars<f32>,
    pool: Vec<PoolItem>,
    windows: usize,
    step: usize,
}

impl<'d> Trainer<'d> {
    /// Validates the configuration against the data; every inconsistency is
    /// reported here, before the first step.
    pub fn new(config: TrainConfig, dataset: &'d Dataset) -> Result<Self> {
        config.validate()?;
        let (links, subcarriers, frames) = dataset.dims().ok_or(CapcError::EmptyDataset)?;
        let windows = config.windows_for(frames)?;
        let model = CapcModel::new(config.model_config(links, subcarriers), config.init_seed())?;
        Self::assemble(config, dataset, model, Lars::new(LarsConfig::default()), windows, 0)
    }

    /// Continues a run from a checkpoint.
    pub fn resume(checkpoint: Checkpoint, dataset: &'d Dataset) -> Result<Self> {
        let Checkpoint {
            config,
            model,
            velocity,
            step,
            ..
        } = checkpoint;
        config.validate()?;
        let (links, subcarriers, frames) = dataset.dims().ok_or(CapcError::EmptyDataset)?;
        let expected = config.model_config(links, subcarriers);
        if model.config != expected {
            return Err(CapcError::Config(
                "checkpoint model does not match the dataset dimensions".into(),
            ));
        }
        let windows = config.windows_for(frames)?;
        let mut lars = Lars::new(LarsConfig::default());
        lars.velocity = velocity;
        Self::assemble(config, dataset, model, lars, windows, step)
    }

    fn assemble(
        config: TrainConfig,
        dataset: &'d Dataset,
        model: CapcModel<f32>,
        mut lars: Lars<f32>,
        windows: usize,
        step: usize,
    ) -> Result<Self> {
        let dual = config.augment.dual_view() && config.method.twin();
        if dual && !dataset.has_pairs() {
            return Err(CapcError::Config(
                "dual_view needs paired CSI for every sample; disable the dual_view augmentation"
                    .into(),
            ));
        }
        if config.method.twin() {
            config.augment.validate(dataset.dims().map(|d| d.1))?;
        }
        let mut pool: Vec<PoolItem> = (0..dataset.len())
            .map(|index| PoolItem {
                index,
                reversed: false,
            })
            .collect();
        // without dual-view pairing each direction is a sample of its own
        if !dual && dataset.has_pairs() {
            pool.extend((0..dataset.len()).map(|index| PoolItem {
                index,
                reversed: true,
            }));
        }
        if pool.len() < config.batch_size {
            return Err(CapcError::Config(format!(
                "{} training sequences cannot fill a batch of {}",
                pool.len(),
                config.batch_size
            )));
        }
        lars.config = config.lars();
        Ok(Self {
            config,
            dataset,
            model,
            lars,
            pool,
            windows,
            step,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &CapcModel<f32> {
        &self.model
    }

    pub fn into_model(self) -> CapcModel<f32> {
        self.model
    }

    /// Index of the next step to run.
    pub fn global_step(&self) -> usize {
        self.step
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.pool.len() / self.config.batch_size
    }

    pub fn total_steps(&self) -> usize {
        self.config.epochs * self.steps_per_epoch()
    }

    pub fn finished(&self) -> bool {
        self.step >= self.total_steps()
    }

    fn schedules(&self) -> (CosineSchedule, CosineSchedule) {
        let warmup = self.config.warmup_epochs * self.steps_per_epoch();
        let total = self.total_steps();
        (
            CosineSchedule::new(self.config.lr_weights, warmup, total),
            CosineSchedule::new(self.config.lr_bias_bn, warmup, total),
        )
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            model: self.model.clone(),
            velocity: self.lars.velocity.clone(),
            step: self.step,
            epoch: self.step / self.steps_per_epoch(),
        }
    }

    fn permutation(&self, epoch: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.pool.len()).collect();
        perm.shuffle(&mut seed::rng(self.config.seed, &[TAG_EPOCH, epoch as u64]));
        perm
    }

    fn pool_sample(&self, item: PoolItem) -> Cow<'d, CsiSample> {
        let s = &self.dataset.samples[item.index];
        match (&s.paired_amplitude, item.reversed) {
            (Some(pair), true) => Cow::Owned(CsiSample {
                amplitude: pair.clone(),
                paired_amplitude: None,
                label: s.label,
                sample_id: s.sample_id.clone(),
            }),
            _ => Cow::Borrowed(s),
        }
    }

    fn batch_views(&self, step: usize) -> Result<(Array5<f32>, Option<Array5<f32>>)> {
        let spe = self.steps_per_epoch();
        let b = self.config.batch_size;
        let perm = self.permutation(step / spe);
        let offset = (step % spe) * b;
        let items: Vec<PoolItem> = perm[offset..offset + b].iter().map(|&i| self.pool[i]).collect();
        let nf = self.config.frames_per_window;
        let twin = self.config.method.twin();
        let views = items
            .par_iter()
            .enumerate()
            .map(|(j, &item)| {
                let sample = self.pool_sample(item);
                if twin {
                    let mut rng = seed::rng(self.config.seed, &[TAG_VIEW, step as u64, j as u64]);
                    make_views(&sample, &self.config.augment, nf, &mut rng)
                        .map(|(a, b)| (a, Some(b)))
                } else {
                    segment(&sample, nf).map(|a| (a, None))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let (a, b): (Vec<_>, Vec<_>) = views.into_iter().unzip();
        let b: Option<Vec<_>> = b.into_iter().collect();
        Ok((stack(&a), b.map(|b| stack(&b))))
    }

    /// Runs one optimizer step.
    pub fn step(&mut self) -> Result<StepLog> {
        let step = self.step;
        let (sched_w, sched_b) = self.schedules();
        let (xa, xb) = self.batch_views(step)?;
        let cfg = &self.config;
        let model = &mut self.model;
        model.zero_grad();
        let (bt, cpc_a, cpc_b) = match cfg.method {
            Method::Capc => {
                let mut rng = seed::rng(cfg.seed, &[TAG_TIME, step as u64]);
                let t = sample_timestep(self.windows, cfg.horizon, cfg.t_min, &mut rng)?;
                let h = capc_objective(model, &xa, &xb.expect("twin views"), t, &cfg.bt(), cfg.beta)?;
                (h.bt, h.cpc_a, h.cpc_b)
            }
            Method::CpcOnly => {
                let horizon = cfg.horizon;
                let mut rng = seed::rng(cfg.seed, &[TAG_TIME, step as u64]);
                let t = sample_timestep(self.windows, horizon, cfg.t_min, &mut rng)?;
                let pa = forward_predictive(&mut model.branch_a, &xa, t, horizon)?;
                let heads = model.heads.as_mut().expect("predictive model");
                let ga = cpc_loss_grad(future(&pa.z, t).view(), pa.c.view(), heads, 1.0)?;
                let dc = ga.dc;
                backward_predictive(&mut model.branch_a, pa, t, ga.dz_future, dc.view());
                (0.0, ga.loss, 0.0)
            }
            Method::BtOnly => {
                let xb = xb.expect("twin views");
                let branch_b = model.branch_b.as_mut().expect("twin model");
                let l = self.windows;
                let (za, enc_a) = encode_prefix(&mut model.branch_a, &xa, l)?;
                let (zb, enc_b) = encode_prefix(branch_b, &xb, l)?;
                let flat = |z: Array3<f32>| {
                    let (b, n, d) = z.dim();
                    z.into_shape_with_order((b * n, d)).expect("contiguous")
                };
                let (za, zb) = (flat(za), flat(zb));
                let proj_a = model.branch_a.projector.as_mut().expect("projector");
                let (pa, cache_a) = proj_a.forward(za.view());
                let proj_b = branch_b.projector.as_mut().expect("projector");
                let (pb, cache_b) = proj_b.forward(zb.view());
                let bt = barlow_twins_grad(pa.view(), pb.view(), &cfg.bt())?;
                let dza = projector_backward(&mut model.branch_a, &cache_a, bt.d_a.view());
                model.branch_a.encoder.backward(enc_a, dza.view());
                let dzb = projector_backward(branch_b, &cache_b, bt.d_b.view());
                branch_b.encoder.backward(enc_b, dzb.view());
                (bt.loss, 0.0, 0.0)
            }
        };
        let total = match cfg.method {
            Method::Capc => hybrid_loss(bt, cpc_a, cpc_b, cfg.beta),
            Method::CpcOnly => cpc_a,
            Method::BtOnly => bt,
        };
        if !total.is_finite() {
            return Err(CapcError::NonFinite {
                param: "loss".into(),
                step,
            });
        }
        let lr = sched_w.lr_at(step);
        self.lars.step(&mut self.model, lr, sched_b.lr_at(step), step)?;
        self.step += 1;
        Ok(StepLog {
            step,
            epoch: step / self.steps_per_epoch(),
            lr,
            bt: bt as f64,
            cpc_a: cpc_a as f64,
            cpc_b: cpc_b as f64,
            total: total as f64,
        })
    }

    /// Trains to the configured number of epochs. With `out`, appends one
    /// line per step to `out/metrics.log`, writes periodic checkpoints to
    /// `out/epochs/epoch-XXXX` and the final state to `out/checkpoint`.
    pub fn run(mut self, out: Option<&Path>) -> Result<TrainReport> {
        let mut log = match out {
            Some(dir) => Some(open_log(dir, self.step == 0)?),
            None => None,
        };
        let spe = self.steps_per_epoch();
        let mut logs = Vec::new();
        let mut epoch_means = Vec::new();
        let mut acc = 0.0;
        let mut count = 0;
        while !self.finished() {
            let entry = self.step()?;
            if let Some((path, w)) = log.as_mut() {
                writeln!(w, "{entry}")
                    .and_then(|_| w.flush())
                    .map_err(|e| CapcError::io(path.as_path(), e))?;
            }
            acc += entry.total;
            count += 1;
            logs.push(entry);
            if self.step % spe == 0 {
                epoch_means.push(acc / count as f64);
                acc = 0.0;
                count = 0;
                let epoch = self.step / spe;
                let every = self.config.checkpoint_every;
                if let (Some(dir), true) = (out, every > 0 && epoch % every == 0) {
                    self.checkpoint()
                        .save(&dir.join("epochs").join(format!("epoch-{epoch:04}")))?;
                }
            }
        }
        if let Some(dir) = out {
            self.checkpoint().save(&dir.join("checkpoint"))?;
        }
        Ok(TrainReport {
            model: self.model,
            logs,
            epoch_means,
        })
    }
}

fn projector_backward(
    branch: &mut Branch<f32>,
    cache: &crate::model::ProjectorCache<f32>,
    dp: ArrayView2<'_, f32>,
) -> Array2<f32> {
    branch
        .projector
        .as_mut()
        .expect("projector")
        .backward(cache, dp)
}

fn open_log(dir: &Path, truncate: bool) -> Result<(std::path::PathBuf, BufWriter<File>)> {
    std::fs::create_dir_all(dir).map_err(|e| CapcError::io(dir, e))?;
    let path = dir.join("metrics.log");
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!truncate)
        .truncate(truncate)
        .open(&path)
        .map_err(|e| CapcError::io(&path, e))?;
    Ok((path, BufWriter::new(file)))
}

/// Pre-trains from scratch; see [`Trainer::run`].
pub fn pretrain(config: &TrainConfig, dataset: &Dataset, out: Option<&Path>) -> Result<TrainReport> {
    Trainer::new(config.clone(), dataset)?.run(out)
}

/// Inference-mode context vectors `c_t` of `samples` after their first `t`
/// windows.
pub fn context_vectors(
    model: &CapcModel<f32>,
    samples: &[CsiSample],
    frames_per_window: usize,
    t: usize,
) -> Result<Array2<f32>> {
    let gru = model
        .branch_a
        .context
        .as_ref()
        .ok_or_else(|| CapcError::invalid("model has no context network"))?;
    if samples.is_empty() {
        return Err(CapcError::EmptyDataset);
    }
    let views = samples
        .iter()
        .map(|s| segment(s, frames_per_window))
        .collect::<Result<Vec<_>>>()?;
    let x = stack(&views);
    let (b, l, na, ns, nf) = x.dim();
    if t == 0 || t > l {
        return Err(CapcError::invalid(format!("context length {t} outside 1..={l}")));
    }
    let w = x
        .slice(s![.., ..t, .., .., ..])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((b * t, na, ns, nf))
        .expect("contiguous");
    let z = model.encoder().encode(w.view())?;
    let d = z.ncols();
    let z = z.into_shape_with_order((b, t, d)).expect("contiguous");
    gru.context(z.view())
}

/// Standard deviation over the batch of every column.
pub fn column_std(x: &Array2<f32>) -> Vec<f64> {
    let n = x.nrows() as f64;
    x.axis_iter(Axis(1))
        .map(|col| {
            let mean = col.iter().map(|&v| v as f64).sum::<f64>() / n;
            (col.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SynthParams;
    use rand::SeedableRng;

    fn tiny_data() -> Dataset {
        let params = SynthParams {
            subcarriers: 8,
            frames: 48,
            classes: 2,
            samples_per_class: 4,
            ..SynthParams::default()
        };
        crate::synth::generate(&params.build().unwrap()).unwrap()
    }

    fn tiny_config(method: Method) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            warmup_epochs: 1,
            horizon: if method == Method::BtOnly { 0 } else { 2 },
            frames_per_window: 8,
            embed_dim: 8,
            hidden_dim: 8,
            proj_dim: 8,
            channels: [2, 4],
            checkpoint_every: 0,
            ..TrainConfig::for_method(method)
        }
    }

    #[test]
    fn timestep_bounds() {
        let mut rng = Rng::seed_from_u64(0);
        for _ in 0..200 {
            let t = sample_timestep(20, 9, 1, &mut rng).unwrap();
            assert!((1..=11).contains(&t));
        }
        assert_eq!(sample_timestep(10, 9, 1, &mut rng).unwrap(), 1);
        assert!(sample_timestep(10, 9, 2, &mut rng).is_err());
    }

    #[test]
    fn every_method_trains() {
        let data = tiny_data();
        for method in [Method::Capc, Method::CpcOnly, Method::BtOnly] {
            let report = pretrain(&tiny_config(method), &data, None).unwrap();
            assert!(report.logs.iter().all(|l| l.total.is_finite()));
            if method == Method::BtOnly {
                assert!(report.logs.iter().all(|l| l.cpc_a == 0.0 && l.cpc_b == 0.0));
            }
        }
    }

    #[test]
    fn configuration_errors_surface_before_training() {
        let data = tiny_data();
        let mut c = tiny_config(Method::Capc);
        c.horizon = 5;
        assert!(matches!(Trainer::new(c, &data), Err(CapcError::Config(_))));
        let mut c = tiny_config(Method::Capc);
        c.batch_size = 100;
        assert!(Trainer::new(c, &data).is_err());
        let unpaired = Dataset::new(
            2,
            data.samples
                .iter()
                .map(|s| CsiSample {
                    paired_amplitude: None,
                    ..s.clone()
                })
                .collect(),
        )
        .unwrap();
        assert!(matches!(
            Trainer::new(tiny_config(Method::Capc), &unpaired),
            Err(CapcError::Config(_))
        ));
    }

    #[test]
    fn log_line_has_all_components() {
        let l = StepLog {
            step: 3,
            epoch: 0,
            lr: 0.1,
            bt: 1.0,
            cpc_a: 2.0,
            cpc_b: 3.0,
            total: 251.0,
        };
        let s = l.to_string();
        for key in ["step=3", "lr=", "bt=", "cpc_a=", "cpc_b=", "total="] {
            assert!(s.contains(key), "{s}");
        }
    }
}
