//! Run configuration: one INI file with `[synth]`, `[pretrain]`, `[eval]`,
//! `[diagnose]` and `[sweep]` sections. Every key is optional and defaults
//! to the full-scale setting; unknown sections and keys are rejected with
//! their dotted path.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use crate::augment::{Augmentation, AugmentationSpec};
use crate::error::{CapcError, Result};
use crate::eval::{EvalConfig, EvalMode};
use crate::model::Method;
use crate::synth::SynthParams;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSection {
    pub data: PathBuf,
    /// Per-sample standardization of the loaded dataset.
    pub standardize: bool,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    /// Dataset for `transfer`.
    pub target: Option<PathBuf>,
    pub standardize: bool,
    pub batch_size: usize,
    pub linear_epochs: usize,
    pub semi_epochs: usize,
    pub lr_classifier: f64,
    pub lr_encoder: f64,
    pub shots: usize,
    pub seed: u64,
    pub shots_list: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Protocol of `sweep-shots`.
    pub sweep_mode: EvalMode,
}

impl Default for EvalSection {
    fn default() -> Self {
        let lin = EvalConfig::linear();
        Self {
            data: PathBuf::from("data"),
            checkpoint: PathBuf::from("run/checkpoint"),
            target: None,
            standardize: false,
            batch_size: lin.batch_size,
            linear_epochs: lin.epochs,
            semi_epochs: EvalConfig::semi().epochs,
            lr_classifier: lin.lr_classifier,
            lr_encoder: EvalConfig::semi().lr_encoder,
            shots: lin.shots,
            seed: 0,
            shots_list: vec![2, 4, 6, 8, 10, 12],
            seeds: vec![0, 1, 2],
            sweep_mode: EvalMode::Linear,
        }
    }
}

impl EvalSection {
    pub fn config(&self, mode: EvalMode) -> EvalConfig {
        EvalConfig {
            mode,
            batch_size: self.batch_size,
            epochs: match mode {
                EvalMode::Linear => self.linear_epochs,
                EvalMode::Semi => self.semi_epochs,
            },
            lr_classifier: self.lr_classifier,
            lr_encoder: match mode {
                EvalMode::Linear => 0.0,
                EvalMode::Semi => self.lr_encoder,
            },
            shots: self.shots,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnoseSection {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub standardize: bool,
    /// Samples in the validation batch.
    pub batch: usize,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data"),
            checkpoint: PathBuf::from("run/checkpoint"),
            standardize: false,
            batch: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSection {
    pub augmentations: Vec<String>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            augmentations: Augmentation::NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub synth: SynthParams,
    pub pretrain: PretrainSection,
    pub eval: EvalSection,
    pub diagnose: DiagnoseSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthParams::default(),
            pretrain: PretrainSection {
                data: PathBuf::from("data"),
                standardize: false,
                train: TrainConfig::default(),
            },
            eval: EvalSection::default(),
            diagnose: DiagnoseSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

/// Key/value pairs of one section, consumed as they are read so leftovers
/// can be reported.
struct Section {
    name: &'static str,
    props: BTreeMap<String, String>,
}

fn key_error(section: &str, key: &str, reason: impl Into<String>) -> CapcError {
    CapcError::ConfigKey {
        key: format!("{section}.{key}"),
        reason: reason.into(),
    }
}

fn parse_list<T: FromStr>(s: &str) -> std::result::Result<Vec<T>, T::Err> {
    s.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(T::from_str)
        .collect()
}

impl Section {
    fn raw(&mut self, key: &str) -> Option<String> {
        self.props.remove(key)
    }

    fn get<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.raw(key) {
            *slot = v
                .trim()
                .parse()
                .map_err(|e: T::Err| key_error(self.name, key, format!("cannot parse `{v}`: {e}")))?;
        }
        Ok(())
    }

    fn list<T: FromStr>(&mut self, key: &str, slot: &mut Vec<T>) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.raw(key) {
            *slot = parse_list(&v)
                .map_err(|e: T::Err| key_error(self.name, key, format!("cannot parse `{v}`: {e}")))?;
        }
        Ok(())
    }

    fn path(&mut self, key: &str, slot: &mut PathBuf) {
        if let Some(v) = self.raw(key) {
            *slot = PathBuf::from(v.trim());
        }
    }

    fn finish(self) -> Result<()> {
        match self.props.into_keys().next() {
            Some(key) => Err(key_error(self.name, &key, "unknown key")),
            None => Ok(()),
        }
    }
}

fn parse_synth(mut s: Section) -> Result<SynthParams> {
    let mut p = SynthParams::default();
    s.get("links", &mut p.links)?;
    s.get("subcarriers", &mut p.subcarriers)?;
    s.get("frames", &mut p.frames)?;
    s.get("classes", &mut p.classes)?;
    s.get("samples_per_class", &mut p.samples_per_class)?;
    s.get("paths", &mut p.paths)?;
    s.get("freq_min", &mut p.freq_min)?;
    s.get("freq_max", &mut p.freq_max)?;
    s.get("modulation_depth", &mut p.modulation_depth)?;
    s.get("path_jitter", &mut p.path_jitter)?;
    s.get("gain_spread", &mut p.gain_spread)?;
    s.get("phase_spread", &mut p.phase_spread)?;
    s.get("drift_std", &mut p.drift_std)?;
    s.get("drift_correlation", &mut p.drift_correlation)?;
    s.get("noise_std", &mut p.noise_std)?;
    s.get("seed", &mut p.seed)?;
    s.finish()?;
    Ok(p)
}

/// Parameters of the named augmentations, overridable per key.
struct AugParams {
    noise_sigma: f32,
    noise_p: f64,
    flip_p: f64,
    time_mask_fraction: f64,
    time_mask_p: f64,
    subcarrier_mask_count: usize,
    subcarrier_mask_p: f64,
}

impl Default for AugParams {
    fn default() -> Self {
        let mut a = Self {
            noise_sigma: 0.0,
            noise_p: 1.0,
            flip_p: 1.0,
            time_mask_fraction: 0.0,
            time_mask_p: 1.0,
            subcarrier_mask_count: 0,
            subcarrier_mask_p: 1.0,
        };
        for name in Augmentation::NAMES {
            match Augmentation::default_for(name).expect("canonical name") {
                Augmentation::GaussianNoise { sigma, p } => (a.noise_sigma, a.noise_p) = (sigma, p),
                Augmentation::TimeFlip { p } => a.flip_p = p,
                Augmentation::TimeMask { fraction, p } => (a.time_mask_fraction, a.time_mask_p) = (fraction, p),
                Augmentation::SubcarrierMask { count, p } => {
                    (a.subcarrier_mask_count, a.subcarrier_mask_p) = (count, p)
                }
                Augmentation::DualView => {}
            }
        }
        a
    }
}

impl AugParams {
    fn apply(&self, names: &[String]) -> Result<Vec<Augmentation>> {
        names
            .iter()
            .map(|n| {
                Ok(match Augmentation::default_for(n)? {
                    Augmentation::GaussianNoise { .. } => Augmentation::GaussianNoise {
                        sigma: self.noise_sigma,
                        p: self.noise_p,
                    },
                    Augmentation::TimeFlip { .. } => Augmentation::TimeFlip { p: self.flip_p },
                    Augmentation::TimeMask { .. } => Augmentation::TimeMask {
                        fraction: self.time_mask_fraction,
                        p: self.time_mask_p,
                    },
                    Augmentation::SubcarrierMask { .. } => Augmentation::SubcarrierMask {
                        count: self.subcarrier_mask_count,
                        p: self.subcarrier_mask_p,
                    },
                    Augmentation::DualView => Augmentation::DualView,
                })
            })
            .collect()
    }
}

fn parse_pretrain(mut s: Section) -> Result<PretrainSection> {
    let mut method = Method::Capc;
    s.get("method", &mut method)?;
    let mut t = TrainConfig::for_method(method);
    let mut data = PathBuf::from("data");
    s.path("data", &mut data);
    let mut standardize = false;
    s.get("standardize", &mut standardize)?;
    s.get("epochs", &mut t.epochs)?;
    s.get("batch_size", &mut t.batch_size)?;
    s.get("lr_weights", &mut t.lr_weights)?;
    s.get("lr_bias_bn", &mut t.lr_bias_bn)?;
    s.get("warmup_epochs", &mut t.warmup_epochs)?;
    s.get("weight_decay", &mut t.weight_decay)?;
    s.get("momentum", &mut t.momentum)?;
    s.get("trust_coefficient", &mut t.trust_coefficient)?;
    s.get("lambda", &mut t.lambda)?;
    s.get("beta", &mut t.beta)?;
    s.get("horizon", &mut t.horizon)?;
    s.get("t_min", &mut t.t_min)?;
    s.get("frames_per_window", &mut t.frames_per_window)?;
    s.get("embed_dim", &mut t.embed_dim)?;
    s.get("hidden_dim", &mut t.hidden_dim)?;
    s.get("proj_dim", &mut t.proj_dim)?;
    let mut channels = t.channels.to_vec();
    s.list("channels", &mut channels)?;
    t.channels = <[usize; 2]>::try_from(channels.as_slice())
        .map_err(|_| key_error("pretrain", "channels", "expected exactly two widths"))?;
    s.get("seed", &mut t.seed)?;
    s.get("checkpoint_every", &mut t.checkpoint_every)?;
    s.get("flip_per_window", &mut t.augment.flip_per_window)?;

    let mut a = AugParams::default();
    s.get("noise_sigma", &mut a.noise_sigma)?;
    s.get("noise_p", &mut a.noise_p)?;
    s.get("flip_p", &mut a.flip_p)?;
    s.get("time_mask_fraction", &mut a.time_mask_fraction)?;
    s.get("time_mask_p", &mut a.time_mask_p)?;
    s.get("subcarrier_mask_count", &mut a.subcarrier_mask_count)?;
    s.get("subcarrier_mask_p", &mut a.subcarrier_mask_p)?;
    let mut names: Vec<String> = t.augment.steps.iter().map(|s| s.name().to_string()).collect();
    s.list("augment", &mut names)?;
    t.augment.steps = a
        .apply(&names)
        .map_err(|e| key_error("pretrain", "augment", e.to_string()))?;
    t.augment
        .validate(None)
        .map_err(|e| key_error("pretrain", "augment", e.to_string()))?;
    s.finish()?;
    t.validate()?;
    Ok(PretrainSection {
        data,
        standardize,
        train: t,
    })
}

fn parse_eval(mut s: Section) -> Result<EvalSection> {
    let mut e = EvalSection::default();
    s.path("data", &mut e.data);
    s.path("checkpoint", &mut e.checkpoint);
    if let Some(t) = s.raw("target") {
        e.target = Some(PathBuf::from(t.trim()));
    }
    s.get("standardize", &mut e.standardize)?;
    s.get("batch_size", &mut e.batch_size)?;
    s.get("linear_epochs", &mut e.linear_epochs)?;
    s.get("semi_epochs", &mut e.semi_epochs)?;
    s.get("lr_classifier", &mut e.lr_classifier)?;
    s.get("lr_encoder", &mut e.lr_encoder)?;
    s.get("shots", &mut e.shots)?;
    s.get("seed", &mut e.seed)?;
    s.list("shots_list", &mut e.shots_list)?;
    s.list("seeds", &mut e.seeds)?;
    s.get("sweep_mode", &mut e.sweep_mode)?;
    s.finish()?;
    e.config(EvalMode::Semi).validate()?;
    Ok(e)
}

fn parse_diagnose(mut s: Section) -> Result<DiagnoseSection> {
    let mut d = DiagnoseSection::default();
    s.path("data", &mut d.data);
    s.path("checkpoint", &mut d.checkpoint);
    s.get("standardize", &mut d.standardize)?;
    s.get("batch", &mut d.batch)?;
    s.finish()?;
    if d.batch < 2 {
        return Err(key_error("diagnose", "batch", "must be at least 2"));
    }
    Ok(d)
}

fn parse_sweep(mut s: Section) -> Result<SweepSection> {
    let mut w = SweepSection::default();
    s.list("augmentations", &mut w.augmentations)?;
    for n in &w.augmentations {
        Augmentation::default_for(n).map_err(|e| key_error("sweep", "augmentations", e.to_string()))?;
    }
    s.finish()?;
    Ok(w)
}

const SECTIONS: [&str; 5] = ["synth", "pretrain", "eval", "diagnose", "sweep"];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| CapcError::Config(e.to_string()))?;
        let mut sections: BTreeMap<&'static str, BTreeMap<String, String>> = BTreeMap::new();
        for (name, props) in ini.iter() {
            let entries: BTreeMap<String, String> = props
                .iter()
                .map(|(k, v)| (k.trim().to_string(), v.to_string()))
                .collect();
            let Some(name) = name else {
                if let Some(key) = entries.keys().next() {
                    return Err(CapcError::ConfigKey {
                        key: key.clone(),
                        reason: "key outside of any section".into(),
                    });
                }
                continue;
            };
            let known = SECTIONS.iter().find(|s| **s == name.trim()).ok_or_else(|| {
                CapcError::ConfigKey {
                    key: name.to_string(),
                    reason: format!("unknown section (expected one of {})", SECTIONS.join(", ")),
                }
            })?;
            sections.entry(known).or_default().extend(entries);
        }
        let mut take = |name: &'static str| Section {
            name,
            props: sections.remove(name).unwrap_or_default(),
        };
        Ok(Self {
            synth: parse_synth(take("synth"))?,
            pretrain: parse_pretrain(take("pretrain"))?,
            eval: parse_eval(take("eval"))?,
            diagnose: parse_diagnose(take("diagnose"))?,
            sweep: parse_sweep(take("sweep"))?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CapcError::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies a global `--seed` to every section.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.pretrain.train.seed = seed;
        self.eval.seed = seed;
        self
    }

    /// Renders every key with its current value.
    pub fn to_ini(&self) -> String {
        let join = |v: &[String]| v.join(", ");
        let mut out = String::new();
        let p = &self.synth;
        let _ = writeln!(out, "[synth]");
        for (k, v) in [
            ("links", p.links.to_string()),
            ("subcarriers", p.subcarriers.to_string()),
            ("frames", p.frames.to_string()),
            ("classes", p.classes.to_string()),
            ("samples_per_class", p.samples_per_class.to_string()),
            ("paths", p.paths.to_string()),
            ("freq_min", p.freq_min.to_string()),
            ("freq_max", p.freq_max.to_string()),
            ("modulation_depth", p.modulation_depth.to_string()),
            ("path_jitter", p.path_jitter.to_string()),
            ("gain_spread", p.gain_spread.to_string()),
            ("phase_spread", p.phase_spread.to_string()),
            ("drift_std", p.drift_std.to_string()),
            ("drift_correlation", p.drift_correlation.to_string()),
            ("noise_std", p.noise_std.to_string()),
            ("seed", p.seed.to_string()),
        ] {
            let _ = writeln!(out, "{k} = {v}");
        }
        let t = &self.pretrain.train;
        let mut a = AugParams::default();
        for s in &t.augment.steps {
            match *s {
                Augmentation::GaussianNoise { sigma, p } => (a.noise_sigma, a.noise_p) = (sigma, p),
                Augmentation::TimeFlip { p } => a.flip_p = p,
                Augmentation::TimeMask { fraction, p } => (a.time_mask_fraction, a.time_mask_p) = (fraction, p),
                Augmentation::SubcarrierMask { count, p } => {
                    (a.subcarrier_mask_count, a.subcarrier_mask_p) = (count, p)
                }
                Augmentation::DualView => {}
            }
        }
        let names: Vec<String> = t.augment.steps.iter().map(|s| s.name().to_string()).collect();
        let _ = writeln!(out, "\n[pretrain]");
        for (k, v) in [
            ("data", self.pretrain.data.display().to_string()),
            ("standardize", self.pretrain.standardize.to_string()),
            ("method", t.method.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr_weights", t.lr_weights.to_string()),
            ("lr_bias_bn", t.lr_bias_bn.to_string()),
            ("warmup_epochs", t.warmup_epochs.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("momentum", t.momentum.to_string()),
            ("trust_coefficient", t.trust_coefficient.to_string()),
            ("lambda", t.lambda.to_string()),
            ("beta", t.beta.to_string()),
            ("horizon", t.horizon.to_string()),
            ("t_min", t.t_min.to_string()),
            ("frames_per_window", t.frames_per_window.to_string()),
            ("embed_dim", t.embed_dim.to_string()),
            ("hidden_dim", t.hidden_dim.to_string()),
            ("proj_dim", t.proj_dim.to_string()),
            ("channels", format!("{}, {}", t.channels[0], t.channels[1])),
            ("seed", t.seed.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("augment", join(&names)),
            ("flip_per_window", t.augment.flip_per_window.to_string()),
            ("noise_sigma", a.noise_sigma.to_string()),
            ("noise_p", a.noise_p.to_string()),
            ("flip_p", a.flip_p.to_string()),
            ("time_mask_fraction", a.time_mask_fraction.to_string()),
            ("time_mask_p", a.time_mask_p.to_string()),
            ("subcarrier_mask_count", a.subcarrier_mask_count.to_string()),
            ("subcarrier_mask_p", a.subcarrier_mask_p.to_string()),
        ] {
            let _ = writeln!(out, "{k} = {v}");
        }
        let e = &self.eval;
        let _ = writeln!(out, "\n[eval]");
        let list = |v: Vec<String>| v.join(", ");
        let mut rows = vec![
            ("data", e.data.display().to_string()),
            ("checkpoint", e.checkpoint.display().to_string()),
        ];
        if let Some(t) = &e.target {
            rows.push(("target", t.display().to_string()));
        }
        rows.extend([
            ("standardize", e.standardize.to_string()),
            ("batch_size", e.batch_size.to_string()),
            ("linear_epochs", e.linear_epochs.to_string()),
            ("semi_epochs", e.semi_epochs.to_string()),
            ("lr_classifier", e.lr_classifier.to_string()),
            ("lr_encoder", e.lr_encoder.to_string()),
            ("shots", e.shots.to_string()),
            ("seed", e.seed.to_string()),
            ("shots_list", list(e.shots_list.iter().map(ToString::to_string).collect())),
            ("seeds", list(e.seeds.iter().map(ToString::to_string).collect())),
            ("sweep_mode", e.sweep_mode.name().to_string()),
        ]);
        for (k, v) in rows {
            let _ = writeln!(out, "{k} = {v}");
        }
        let d = &self.diagnose;
        let _ = writeln!(out, "\n[diagnose]");
        let _ = writeln!(out, "data = {}", d.data.display());
        let _ = writeln!(out, "checkpoint = {}", d.checkpoint.display());
        let _ = writeln!(out, "standardize = {}", d.standardize);
        let _ = writeln!(out, "batch = {}", d.batch);
        let _ = writeln!(out, "\n[sweep]");
        let _ = writeln!(out, "augmentations = {}", join(&self.sweep.augmentations));
        out
    }
}

/// Fails with the dotted key when a configured input path does not exist.
pub fn require_path(key: &str, path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CapcError::ConfigKey {
            key: key.to_string(),
            reason: format!("path `{}` does not exist", path.display()),
        })
    }
}

impl AugmentationSpec {
    /// Canonical names of the configured augmentations.
    pub fn names(&self) -> Vec<&'static str> {
        self.steps.iter().map(Augmentation::name).collect()
    }
}
