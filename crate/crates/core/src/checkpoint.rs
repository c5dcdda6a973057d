//! Training-state checkpoints: a TOML manifest plus one raw little-endian
//! float32 file per tensor (parameters, running statistics, momentum).

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::csi::{encode_f32, ensure_dir, read_f32, read_manifest, write_bytes, write_manifest, LITTLE_ENDIAN};
use crate::error::{CapcError, Result};
use crate::model::{CapcModel, Method, ModelConfig, Module, ParamKind};
use crate::train::TrainConfig;

const MOMENTUM_PREFIX: &str = "momentum.";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: CapcModel<f32>,
    /// LARS momentum buffers by parameter name.
    pub velocity: BTreeMap<String, ArrayD<f32>>,
    /// Next optimizer step to run.
    pub step: usize,
    /// Completed epochs.
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
    kind: ParamKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format: String,
    byte_order: String,
    method: Method,
    step: usize,
    epoch: usize,
    seed: u64,
    model: ModelConfig,
    config: TrainConfig,
    tensors: Vec<TensorEntry>,
    momentum: Vec<TensorEntry>,
}

impl CheckpointManifest {
    const FORMAT: &'static str = "capc-checkpoint-v1";
}

fn write_all(
    dir: &Path,
    tensors: impl IntoIterator<Item = (String, ParamKind, ArrayD<f32>)>,
    prefix: &str,
) -> Result<Vec<TensorEntry>> {
    tensors
        .into_iter()
        .map(|(name, kind, value)| {
            let file = format!("{prefix}{name}");
            let bytes = encode_f32(value.as_standard_layout().iter());
            write_bytes(&dir.join(&file), &bytes)?;
            Ok(TensorEntry {
                name,
                file,
                shape: value.shape().to_vec(),
                kind,
            })
        })
        .collect()
}

fn read_tensor(dir: &Path, entry: &TensorEntry) -> Result<ArrayD<f32>> {
    let len = entry.shape.iter().product();
    let data = read_f32(&dir.join(&entry.file), len)?;
    Ok(ArrayD::from_shape_vec(IxDyn(&entry.shape), data).expect("length checked"))
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        let mut params = Vec::new();
        self.model.visit("", &mut |name, p| {
            params.push((name.to_string(), p.kind, p.value.clone()));
        });
        let tensors = write_all(dir, params, "")?;
        let momentum = write_all(
            dir,
            self.velocity
                .iter()
                .map(|(n, v)| (n.clone(), ParamKind::Weight, v.clone())),
            MOMENTUM_PREFIX,
        )?;
        let manifest = CheckpointManifest {
            format: CheckpointManifest::FORMAT.into(),
            byte_order: LITTLE_ENDIAN.into(),
            method: self.model.config.method,
            step: self.step,
            epoch: self.epoch,
            seed: self.config.seed,
            model: self.model.config,
            config: self.config.clone(),
            tensors,
            momentum,
        };
        write_manifest(dir, &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: CheckpointManifest = read_manifest(dir)?;
        if m.format != CheckpointManifest::FORMAT || m.byte_order != LITTLE_ENDIAN {
            return Err(CapcError::load(
                dir,
                format!("unsupported checkpoint format `{}` ({})", m.format, m.byte_order),
            ));
        }
        let mut model = CapcModel::<f32>::new(m.model, m.config.init_seed())
            .map_err(|e| CapcError::load(dir, e.to_string()))?;
        let mut stored: BTreeMap<&str, &TensorEntry> =
            m.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
        let mut failure = None;
        model.visit_mut("", &mut |name, p| {
            if failure.is_some() {
                return;
            }
            let Some(entry) = stored.remove(name) else {
                failure = Some(format!("missing tensor `{name}`"));
                return;
            };
            if entry.shape != p.value.shape() {
                failure = Some(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    entry.shape,
                    p.value.shape()
                ));
                return;
            }
            match read_tensor(dir, entry) {
                Ok(v) => p.value = v,
                Err(e) => failure = Some(e.to_string()),
            }
        });
        if let Some(reason) = failure {
            return Err(CapcError::load(dir, reason));
        }
        if let Some(extra) = stored.keys().next() {
            return Err(CapcError::load(dir, format!("unexpected tensor `{extra}`")));
        }
        let velocity = m
            .momentum
            .iter()
            .map(|e| Ok((e.name.clone(), read_tensor(dir, e)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Self {
            config: m.config,
            model,
            velocity,
            step: m.step,
            epoch: m.epoch,
        })
    }
}
