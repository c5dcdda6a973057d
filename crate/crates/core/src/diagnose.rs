//! Representation diagnostics: the singular-value spectrum of the embedding
//! covariance (dimensional-collapse check) and embedding export for external
//! projection tools.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::csi::{
    encode_f32, encode_labels, ensure_dir, read_f32, read_i32, read_manifest, segment, write_bytes,
    write_manifest, ArrayEntry, CsiSample, Dataset, LABELS_FILE, LITTLE_ENDIAN,
};
use crate::error::{CapcError, Result};
use crate::eval::embed_sequences;
use crate::model::Encoder;

pub const EMBEDDINGS_FILE: &str = "embeddings";

/// Singular values, sorted descending, of the sample covariance (centered,
/// normalized by `B - 1`) of the rows of `z`.
pub fn covariance_spectrum(z: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    let (b, d) = z.dim();
    if b < 2 {
        return Err(CapcError::invalid(format!(
            "a covariance spectrum needs at least 2 embeddings, got {b}"
        )));
    }
    let mean = z.mean_axis(Axis(0)).expect("non-empty");
    let centered = &z - &mean;
    let cov = centered.t().dot(&centered) / (b - 1) as f64;
    let m = DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Per-window embeddings `[N * L, D]` of `samples` under the frozen encoder.
pub fn window_embeddings(encoder: &Encoder<f32>, samples: &[CsiSample]) -> Result<Array2<f64>> {
    if samples.is_empty() {
        return Err(CapcError::EmptyDataset);
    }
    let l = segment(&samples[0], encoder.config.frames)?.len();
    let seq = embed_sequences(encoder, samples)?;
    let d = encoder.embed_dim();
    let z = seq
        .into_shape_with_order((samples.len() * l, d))
        .expect("contiguous");
    Ok(z.mapv(f64::from))
}

/// `batch` samples evenly strided over the dataset (all of it when smaller),
/// so a class-major layout still yields every class.
pub fn validation_batch(dataset: &Dataset, batch: usize) -> Vec<CsiSample> {
    let n = dataset.len();
    if batch >= n {
        return dataset.samples.clone();
    }
    (0..batch).map(|i| dataset.samples[i * n / batch].clone()).collect()
}

/// Spectrum of the window embeddings of a validation batch.
pub fn diagnose_collapse(encoder: &Encoder<f32>, samples: &[CsiSample]) -> Result<Vec<f64>> {
    covariance_spectrum(window_embeddings(encoder, samples)?.view())
}

/// Plot-ready CSV: `index,singular_value,log10_singular_value`.
pub fn spectrum_csv(values: &[f64]) -> String {
    let mut out = String::from("index,singular_value,log10_singular_value\n");
    for (i, v) in values.iter().enumerate() {
        let _ = writeln!(out, "{i},{v:.9e},{:.6}", v.max(f64::MIN_POSITIVE).log10());
    }
    out
}

pub fn write_spectrum(values: &[f64], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        ensure_dir(dir)?;
    }
    std::fs::write(path, spectrum_csv(values)).map_err(|e| CapcError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingManifest {
    pub format: String,
    pub rows: usize,
    /// `D * L`
    pub width: usize,
    pub embed_dim: usize,
    pub windows: usize,
    pub byte_order: String,
    pub arrays: BTreeMap<String, ArrayEntry>,
}

impl EmbeddingManifest {
    pub const FORMAT: &'static str = "capc-embeddings-v1";
}

/// Writes the `[N, D * L]` concatenated window embeddings and labels of
/// `dataset` to a container under `dir`; returns the embeddings.
pub fn export_embeddings(encoder: &Encoder<f32>, dataset: &Dataset, dir: &Path) -> Result<Array2<f32>> {
    if dataset.is_empty() {
        return Err(CapcError::EmptyDataset);
    }
    let z = embed_sequences(encoder, &dataset.samples)?;
    let (n, width) = z.dim();
    let d = encoder.embed_dim();
    ensure_dir(dir)?;
    write_bytes(&dir.join(EMBEDDINGS_FILE), &encode_f32(z.iter()))?;
    write_bytes(
        &dir.join(LABELS_FILE),
        &encode_labels(dataset.samples.iter().map(|s| s.label)),
    )?;
    let mut arrays = BTreeMap::new();
    arrays.insert(
        EMBEDDINGS_FILE.to_string(),
        ArrayEntry {
            file: EMBEDDINGS_FILE.into(),
            dtype: "float32".into(),
            shape: vec![n, width],
        },
    );
    arrays.insert(
        LABELS_FILE.to_string(),
        ArrayEntry {
            file: LABELS_FILE.into(),
            dtype: "int32".into(),
            shape: vec![n],
        },
    );
    write_manifest(
        dir,
        &EmbeddingManifest {
            format: EmbeddingManifest::FORMAT.into(),
            rows: n,
            width,
            embed_dim: d,
            windows: width / d,
            byte_order: LITTLE_ENDIAN.into(),
            arrays,
        },
    )?;
    Ok(z)
}

/// Reads an embedding container: `(embeddings, labels)` with `None` for
/// unlabelled rows.
pub fn load_embeddings(dir: &Path) -> Result<(Array2<f32>, Vec<Option<usize>>)> {
    let m: EmbeddingManifest = read_manifest(dir)?;
    if m.format != EmbeddingManifest::FORMAT || m.byte_order != LITTLE_ENDIAN {
        return Err(CapcError::load(dir, format!("unsupported embedding container `{}`", m.format)));
    }
    let entry = |name: &str| {
        m.arrays
            .get(name)
            .ok_or_else(|| CapcError::load(dir, format!("manifest declares no `{name}` array")))
    };
    let z = read_f32(&dir.join(&entry(EMBEDDINGS_FILE)?.file), m.rows * m.width)?;
    let labels = read_i32(&dir.join(&entry(LABELS_FILE)?.file), m.rows)?
        .into_iter()
        .map(|l| (l >= 0).then_some(l as usize))
        .collect();
    let z = Array2::from_shape_vec((m.rows, m.width), z).expect("length checked");
    Ok((z, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn one_hot_rows_give_equal_values() {
        let d = 6;
        let z = Array2::<f64>::eye(d);
        let sv = covariance_spectrum(z.view()).unwrap();
        // centered one-hot rows span a (d-1)-dimensional space evenly
        for v in &sv[..d - 1] {
            assert!((v - sv[0]).abs() < 1e-12);
        }
        assert!(sv[d - 1].abs() < 1e-12);
    }

    #[test]
    fn rank_one_embeddings() {
        let dir = [0.3, -1.2, 0.5, 2.0];
        let z = Array::from_shape_fn((10, 4), |(i, j)| (1.0 + i as f64) * dir[j]);
        let sv = covariance_spectrum(z.view()).unwrap();
        assert!(sv[0] > 1.0);
        assert!(sv[1..].iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn sorted_and_non_negative() {
        let z = Array::from_shape_fn((32, 5), |(i, j)| ((i * 7 + j * 13) % 11) as f64 - 5.0);
        let sv = covariance_spectrum(z.view()).unwrap();
        assert!(sv.windows(2).all(|w| w[0] >= w[1]));
        assert!(sv.iter().all(|&v| v >= 0.0));
        assert!(covariance_spectrum(z.slice(ndarray::s![..1, ..])).is_err());
    }

    #[test]
    fn csv_has_one_line_per_value() {
        assert_eq!(spectrum_csv(&[2.0, 1.0, 0.0]).lines().count(), 4);
    }
}
