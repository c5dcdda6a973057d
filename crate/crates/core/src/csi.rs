//! CSI samples, window segmentation and the on-disk dataset container.
//!
//! A container is a directory with a TOML `manifest` and raw row-major
//! little-endian arrays: `csi` (`[N, N_a, N_s, N_t]` float32), optional
//! `csi_pair` of the same shape, and `labels` (`[N]` int32, `-1` for an
//! unlabelled sample).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayD, ArrayView3, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CapcError, Result};
use crate::seed;

pub const MANIFEST_FILE: &str = "manifest";
pub const CSI_FILE: &str = "csi";
pub const CSI_PAIR_FILE: &str = "csi_pair";
pub const LABELS_FILE: &str = "labels";
pub const LITTLE_ENDIAN: &str = "little-endian";

/// One CSI recording: `[N_a links, N_s subcarriers, N_t frames]` amplitudes,
/// optionally paired with the reciprocal link direction.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiSample {
    pub amplitude: Array3<f32>,
    pub paired_amplitude: Option<Array3<f32>>,
    pub label: Option<usize>,
    pub sample_id: String,
}

impl CsiSample {
    pub fn new(
        amplitude: Array3<f32>,
        paired_amplitude: Option<Array3<f32>>,
        label: Option<usize>,
        sample_id: impl Into<String>,
    ) -> Result<Self> {
        check_amplitude(&amplitude, "amplitude")?;
        if let Some(pair) = &paired_amplitude {
            if pair.shape() != amplitude.shape() {
                return Err(CapcError::invalid(format!(
                    "paired amplitude shape {:?} differs from amplitude shape {:?}",
                    pair.shape(),
                    amplitude.shape()
                )));
            }
            check_amplitude(pair, "paired amplitude")?;
        }
        Ok(Self {
            amplitude,
            paired_amplitude,
            label,
            sample_id: sample_id.into(),
        })
    }

    /// `(N_a, N_s, N_t)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.amplitude.dim()
    }
}

fn check_amplitude(a: &Array3<f32>, what: &str) -> Result<()> {
    if a.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(CapcError::invalid(format!(
            "{what} must be finite and non-negative"
        )));
    }
    if a.is_empty() {
        return Err(CapcError::invalid(format!("{what} has an empty dimension")));
    }
    Ok(())
}

/// A sample cut into `L` contiguous windows of `N_f` frames:
/// `[L, N_a, N_s, N_f]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSequence {
    pub windows: Array4<f32>,
}

impl WindowSequence {
    pub fn len(&self) -> usize {
        self.windows.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frames_per_window(&self) -> usize {
        self.windows.len_of(Axis(3))
    }

    /// Concatenates the windows back along time: `[N_a, N_s, L * N_f]`.
    pub fn concat(&self) -> Array3<f32> {
        let (l, na, ns, nf) = self.windows.dim();
        let mut out = Array3::zeros((na, ns, l * nf));
        for t in 0..l {
            out.slice_mut(s![.., .., t * nf..(t + 1) * nf])
                .assign(&self.windows.index_axis(Axis(0), t));
        }
        out
    }
}

/// Segments a `[N_a, N_s, N_t]` tensor into `floor(N_t / N_f)` windows;
/// trailing frames that do not fill a window are dropped.
pub fn segment_tensor(x: ArrayView3<'_, f32>, frames_per_window: usize) -> Result<WindowSequence> {
    let (na, ns, nt) = x.dim();
    if frames_per_window == 0 || frames_per_window > nt {
        return Err(CapcError::invalid(format!(
            "frames per window must be in 1..={nt}, got {frames_per_window}"
        )));
    }
    let l = nt / frames_per_window;
    let mut windows = Array4::zeros((l, na, ns, frames_per_window));
    for t in 0..l {
        windows.index_axis_mut(Axis(0), t).assign(&x.slice(s![
            ..,
            ..,
            t * frames_per_window..(t + 1) * frames_per_window
        ]));
    }
    Ok(WindowSequence { windows })
}

pub fn segment(sample: &CsiSample, frames_per_window: usize) -> Result<WindowSequence> {
    segment_tensor(sample.amplitude.view(), frames_per_window)
}

/// Elementwise `sqrt(re^2 + im^2)`.
pub fn amplitude_from_complex(re: &ArrayD<f32>, im: &ArrayD<f32>) -> Result<ArrayD<f32>> {
    if re.shape() != im.shape() {
        return Err(CapcError::invalid(format!(
            "real part shape {:?} differs from imaginary part shape {:?}",
            re.shape(),
            im.shape()
        )));
    }
    let mut out = re.clone();
    out.zip_mut_with(im, |r, &i| *r = r.hypot(i));
    Ok(out)
}

/// Per-sample standardization to zero mean and unit variance over all
/// entries. Off by default; enabled per run with the `standardize` key.
pub fn standardize(x: &Array3<f32>) -> Array3<f32> {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / var.sqrt().max(1e-12);
    x.mapv(|v| ((v as f64 - mean) * inv) as f32)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub file: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub class_count: usize,
    pub sample_count: usize,
    /// `[N_a, N_s, N_t]`.
    pub shape: [usize; 3],
    pub has_pairs: bool,
    pub byte_order: String,
    pub arrays: BTreeMap<String, ArrayEntry>,
}

impl DatasetManifest {
    pub const FORMAT: &'static str = "capc-dataset-v1";
}

/// Labelled (or partially labelled) samples of one shape and class space.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_count: usize,
    pub samples: Vec<CsiSample>,
}

impl Dataset {
    pub fn new(class_count: usize, samples: Vec<CsiSample>) -> Result<Self> {
        if class_count == 0 {
            return Err(CapcError::invalid("class count must be at least 1"));
        }
        if let Some(first) = samples.first() {
            let dims = first.dims();
            let pairs = first.paired_amplitude.is_some();
            for s in &samples {
                if s.dims() != dims {
                    return Err(CapcError::invalid(format!(
                        "sample {} has shape {:?}, expected {:?}",
                        s.sample_id,
                        s.dims(),
                        dims
                    )));
                }
                if s.paired_amplitude.is_some() != pairs {
                    return Err(CapcError::invalid(
                        "either every sample or no sample must carry a paired tensor",
                    ));
                }
                if let Some(label) = s.label {
                    if label >= class_count {
                        return Err(CapcError::invalid(format!(
                            "sample {} has label {label} >= class count {class_count}",
                            s.sample_id
                        )));
                    }
                }
            }
        }
        Ok(Self {
            class_count,
            samples,
        })
    }

    /// Every tensor (both directions) passed through [`standardize`].
    pub fn standardized(&self) -> Self {
        let samples = self
            .samples
            .iter()
            .map(|s| CsiSample {
                amplitude: standardize(&s.amplitude),
                paired_amplitude: s.paired_amplitude.as_ref().map(standardize),
                label: s.label,
                sample_id: s.sample_id.clone(),
            })
            .collect();
        Self {
            class_count: self.class_count,
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dims(&self) -> Option<(usize, usize, usize)> {
        self.samples.first().map(CsiSample::dims)
    }

    pub fn has_pairs(&self) -> bool {
        self.samples
            .first()
            .is_some_and(|s| s.paired_amplitude.is_some())
    }

    /// Number of labelled samples per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for s in &self.samples {
            if let Some(l) = s.label {
                h[l] += 1;
            }
        }
        h
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        let (na, ns, nt) = self.dims().ok_or(CapcError::EmptyDataset)?;
        let n = self.len();
        let mut arrays = BTreeMap::new();
        let entry = |file: &str, dtype: &str, shape: Vec<usize>| ArrayEntry {
            file: file.to_string(),
            dtype: dtype.to_string(),
            shape,
        };
        arrays.insert(
            CSI_FILE.to_string(),
            entry(CSI_FILE, "float32", vec![n, na, ns, nt]),
        );
        if self.has_pairs() {
            arrays.insert(
                CSI_PAIR_FILE.to_string(),
                entry(CSI_PAIR_FILE, "float32", vec![n, na, ns, nt]),
            );
        }
        arrays.insert(
            LABELS_FILE.to_string(),
            entry(LABELS_FILE, "int32", vec![n]),
        );
        Ok(DatasetManifest {
            format: DatasetManifest::FORMAT.to_string(),
            class_count: self.class_count,
            sample_count: n,
            shape: [na, ns, nt],
            has_pairs: self.has_pairs(),
            byte_order: LITTLE_ENDIAN.to_string(),
            arrays,
        })
    }
}

pub(crate) fn write_manifest<T: Serialize>(dir: &Path, manifest: &T) -> Result<()> {
    let text = toml::to_string(manifest)
        .map_err(|e| CapcError::invalid(format!("cannot serialize manifest: {e}")))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| CapcError::io(path, e))
}

pub(crate) fn read_manifest<T: for<'de> Deserialize<'de>>(dir: &Path) -> Result<T> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CapcError::io(&path, e))?;
    toml::from_str(&text).map_err(|e| CapcError::load(&path, e.to_string()))
}

pub(crate) fn encode_f32<'a>(values: impl IntoIterator<Item = &'a f32>) -> Vec<u8> {
    values.into_iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CapcError::io(path, e))
}

/// Reads `expected_len` little-endian 4-byte words from `path`.
pub(crate) fn read_words(path: &Path, expected_len: usize) -> Result<Vec<[u8; 4]>> {
    let bytes = fs::read(path).map_err(|e| CapcError::io(path, e))?;
    if bytes.len() != expected_len * 4 {
        return Err(CapcError::load(
            path,
            format!(
                "expected {expected_len} elements ({} bytes), found {} bytes",
                expected_len * 4,
                bytes.len()
            ),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| [c[0], c[1], c[2], c[3]])
        .collect())
}

pub(crate) fn read_f32(path: &Path, expected_len: usize) -> Result<Vec<f32>> {
    Ok(read_words(path, expected_len)?
        .into_iter()
        .map(f32::from_le_bytes)
        .collect())
}

pub(crate) fn read_i32(path: &Path, expected_len: usize) -> Result<Vec<i32>> {
    Ok(read_words(path, expected_len)?
        .into_iter()
        .map(i32::from_le_bytes)
        .collect())
}

pub(crate) fn encode_labels(labels: impl Iterator<Item = Option<usize>>) -> Vec<u8> {
    labels
        .flat_map(|l| l.map_or(-1i32, |v| v as i32).to_le_bytes())
        .collect()
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CapcError::io(dir, e))
}

/// Writes `dataset` as a container under `dir` (created if missing).
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    let manifest = dataset.manifest()?;
    ensure_dir(dir)?;
    let csi = encode_f32(dataset.samples.iter().flat_map(|s| s.amplitude.iter()));
    write_bytes(&dir.join(CSI_FILE), &csi)?;
    if manifest.has_pairs {
        let pair = encode_f32(
            dataset
                .samples
                .iter()
                .flat_map(|s| s.paired_amplitude.iter().flat_map(|p| p.iter())),
        );
        write_bytes(&dir.join(CSI_PAIR_FILE), &pair)?;
    }
    write_bytes(
        &dir.join(LABELS_FILE),
        &encode_labels(dataset.samples.iter().map(|s| s.label)),
    )?;
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

fn array_entry<'m>(
    manifest: &'m DatasetManifest,
    root: &Path,
    name: &str,
    dtype: &str,
    shape: &[usize],
) -> Result<&'m ArrayEntry> {
    let entry = manifest
        .arrays
        .get(name)
        .ok_or_else(|| CapcError::load(root, format!("manifest declares no `{name}` array")))?;
    if entry.dtype != dtype {
        return Err(CapcError::load(
            root,
            format!("array `{name}` has dtype {}, expected {dtype}", entry.dtype),
        ));
    }
    if entry.shape != shape {
        return Err(CapcError::load(
            root,
            format!(
                "array `{name}` declares shape {:?}, expected {:?}",
                entry.shape, shape
            ),
        ));
    }
    Ok(entry)
}

/// Loads a container, validating every array against the manifest.
pub fn load_dataset(root: &Path) -> Result<(DatasetManifest, Vec<CsiSample>)> {
    let manifest: DatasetManifest = read_manifest(root)?;
    if manifest.format != DatasetManifest::FORMAT {
        return Err(CapcError::load(
            root,
            format!("unsupported container format `{}`", manifest.format),
        ));
    }
    if manifest.byte_order != LITTLE_ENDIAN {
        return Err(CapcError::load(
            root,
            format!("unsupported byte order `{}`", manifest.byte_order),
        ));
    }
    if manifest.class_count == 0 {
        return Err(CapcError::load(root, "class_count must be at least 1"));
    }
    let n = manifest.sample_count;
    let [na, ns, nt] = manifest.shape;
    let per = na * ns * nt;
    let full = [n, na, ns, nt];

    let csi_entry = array_entry(&manifest, root, CSI_FILE, "float32", &full)?;
    let csi = read_f32(&root.join(&csi_entry.file), n * per)?;
    let pair = if manifest.has_pairs {
        let e = array_entry(&manifest, root, CSI_PAIR_FILE, "float32", &full)?;
        Some(read_f32(&root.join(&e.file), n * per)?)
    } else {
        None
    };
    let labels_entry = array_entry(&manifest, root, LABELS_FILE, "int32", &[n])?;
    let labels = read_i32(&root.join(&labels_entry.file), n)?;

    let tensor = |data: &[f32], i: usize| {
        Array3::from_shape_vec((na, ns, nt), data[i * per..(i + 1) * per].to_vec())
            .expect("slice length matches shape")
    };
    let mut samples = Vec::with_capacity(n);
    for (i, &raw_label) in labels.iter().enumerate() {
        let label = match raw_label {
            -1 => None,
            l if l >= 0 && (l as usize) < manifest.class_count => Some(l as usize),
            l => {
                return Err(CapcError::load(
                    root,
                    format!(
                        "sample {i} has label {l} outside 0..{}",
                        manifest.class_count
                    ),
                ))
            }
        };
        let sample = CsiSample::new(
            tensor(&csi, i),
            pair.as_ref().map(|p| tensor(p, i)),
            label,
            sample_id(i),
        )
        .map_err(|e| CapcError::load(root, format!("sample {i}: {e}")))?;
        samples.push(sample);
    }
    Ok((manifest, samples))
}

/// Loads a container as a [`Dataset`].
pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let (manifest, samples) = load_dataset(root)?;
    Dataset::new(manifest.class_count, samples)
}

pub fn sample_id(index: usize) -> String {
    format!("{index:06}")
}

/// Splits labelled samples into `shots` per class (seeded uniform draw without
/// replacement) and the remainder. Unlabelled samples go to neither side.
pub fn few_shot_split(dataset: &Dataset, shots: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if shots == 0 {
        return Err(CapcError::invalid("shots must be positive"));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.class_count];
    for (i, s) in dataset.samples.iter().enumerate() {
        if let Some(l) = s.label {
            by_class[l].push(i);
        }
    }
    let mut rng = seed::rng(seed, &[0x5307]);
    let mut train_idx = Vec::with_capacity(shots * dataset.class_count);
    let mut test_idx = Vec::new();
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.len() < shots {
            return Err(CapcError::InsufficientData {
                class,
                available: members.len(),
                required: shots,
            });
        }
        members.shuffle(&mut rng);
        train_idx.extend_from_slice(&members[..shots]);
        test_idx.extend_from_slice(&members[shots..]);
    }
    test_idx.sort_unstable();
    let pick = |idx: &[usize]| {
        Dataset::new(
            dataset.class_count,
            idx.iter().map(|&i| dataset.samples[i].clone()).collect(),
        )
    };
    Ok((pick(&train_idx)?, pick(&test_idx)?))
}

/// Exactly `shots` labelled samples per class.
pub fn few_shot_subset(dataset: &Dataset, shots: usize, seed: u64) -> Result<Dataset> {
    Ok(few_shot_split(dataset, shots, seed)?.0)
}

/// Stacks samples into `[N, dim]` flattened rows (for raw-feature probes).
pub fn flatten_samples(samples: &[CsiSample]) -> Array2<f32> {
    let width = samples.first().map_or(0, |s| s.amplitude.len());
    let mut out = Array2::zeros((samples.len(), width));
    for (row, s) in out.outer_iter_mut().zip(samples) {
        for (o, v) in row.into_iter().zip(s.amplitude.iter()) {
            *o = *v;
        }
    }
    out
}

pub(crate) fn labels_of(samples: &[CsiSample]) -> Result<Array1<usize>> {
    samples
        .iter()
        .map(|s| {
            s.label
                .ok_or_else(|| CapcError::invalid(format!("sample {} is unlabelled", s.sample_id)))
        })
        .collect()
}
