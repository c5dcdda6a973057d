//! Augmentation grid: pre-train and linearly evaluate every single
//! augmentation and every unordered pair of augmentations.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::augment::{Augmentation, AugmentationSpec};
use crate::csi::{ensure_dir, Dataset};
use crate::error::{CapcError, Result};
use crate::eval::{linear_eval, EvalConfig};
use crate::train::{pretrain, TrainConfig};

/// Upper-triangular cells `(i, j)`, `i <= j`; the diagonal holds singles.
pub fn grid_cells(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugGrid {
    pub names: Vec<String>,
    /// `(i, j, accuracy)` with `i <= j`.
    pub cells: Vec<(usize, usize, f64)>,
}

impl AugGrid {
    /// Symmetric lookup.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        self.cells
            .iter()
            .find(|c| c.0 == i && c.1 == j)
            .map(|c| c.2)
    }

    /// Full symmetric matrix with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("augmentation");
        for n in &self.names {
            let _ = write!(out, ",{n}");
        }
        out.push('\n');
        for (i, n) in self.names.iter().enumerate() {
            out.push_str(n);
            for j in 0..self.names.len() {
                let _ = write!(out, ",{:.6}", self.get(i, j).unwrap_or(f64::NAN));
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            ensure_dir(dir)?;
        }
        std::fs::write(path, self.to_csv()).map_err(|e| CapcError::io(path, e))
    }
}

/// Pre-trains with each cell's augmentations (all other settings from
/// `train`) and reports linear-probe accuracy on `eval_data`. Cells run on
/// the current rayon pool.
pub fn sweep_aug(
    names: &[&str],
    train: &TrainConfig,
    train_data: &Dataset,
    eval: &EvalConfig,
    eval_data: &Dataset,
) -> Result<AugGrid> {
    let steps = names
        .iter()
        .map(|n| Augmentation::default_for(n))
        .collect::<Result<Vec<_>>>()?;
    let cells = grid_cells(names.len());
    let results = cells
        .par_iter()
        .map(|&(i, j)| {
            let mut chosen = vec![steps[i]];
            if i != j {
                chosen.push(steps[j]);
            }
            let config = TrainConfig {
                augment: AugmentationSpec {
                    steps: chosen,
                    ..train.augment.clone()
                },
                checkpoint_every: 0,
                ..train.clone()
            };
            let report = pretrain(&config, train_data, None)?;
            let acc = linear_eval(report.model.encoder(), eval_data, eval)?.accuracy;
            Ok((i, j, acc))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AugGrid {
        names: names.iter().map(|s| s.to_string()).collect(),
        cells: results,
    })
}
