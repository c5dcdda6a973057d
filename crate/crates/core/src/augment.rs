//! Stochastic augmentations producing the two views of a sample.
//!
//! Regardless of the order in which augmentations are listed, a view is built
//! in a fixed canonical order: dual-view source selection, Gaussian noise,
//! time flip, subcarrier mask, segmentation, then the per-window time mask.
//! Two specs holding the same set of augmentations are therefore equivalent.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array3, ArrayView3, Axis};
use rand::seq::index;
use rand::Rng as _;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::csi::{segment_tensor, CsiSample, WindowSequence};
use crate::error::{CapcError, Result};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Augmentation {
    GaussianNoise { sigma: f32, p: f64 },
    TimeFlip { p: f64 },
    TimeMask { fraction: f64, p: f64 },
    SubcarrierMask { count: usize, p: f64 },
    DualView,
}

impl Augmentation {
    pub const NAMES: [&'static str; 5] = [
        "dual_view",
        "gaussian_noise",
        "time_flip",
        "time_mask",
        "subcarrier_mask",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Augmentation::GaussianNoise { .. } => "gaussian_noise",
            Augmentation::TimeFlip { .. } => "time_flip",
            Augmentation::TimeMask { .. } => "time_mask",
            Augmentation::SubcarrierMask { .. } => "subcarrier_mask",
            Augmentation::DualView => "dual_view",
        }
    }

    fn rank(&self) -> u8 {
        match self {
            Augmentation::DualView => 0,
            Augmentation::GaussianNoise { .. } => 1,
            Augmentation::TimeFlip { .. } => 2,
            Augmentation::SubcarrierMask { .. } => 3,
            Augmentation::TimeMask { .. } => 4,
        }
    }

    /// The augmentation with its default parameters.
    pub fn default_for(name: &str) -> Result<Self> {
        Ok(match name {
            "gaussian_noise" => Augmentation::GaussianNoise { sigma: 0.1, p: 1.0 },
            "time_flip" => Augmentation::TimeFlip { p: 1.0 },
            "time_mask" => Augmentation::TimeMask {
                fraction: 0.2,
                p: 1.0,
            },
            "subcarrier_mask" => Augmentation::SubcarrierMask { count: 5, p: 1.0 },
            "dual_view" => Augmentation::DualView,
            other => {
                return Err(CapcError::invalid(format!(
                    "unknown augmentation `{other}` (expected one of {})",
                    Self::NAMES.join(", ")
                )))
            }
        })
    }

    fn validate(&self, subcarriers: Option<usize>) -> Result<()> {
        let prob = |p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(CapcError::invalid(format!(
                    "{}: probability {p} outside [0, 1]",
                    self.name()
                )))
            }
        };
        match *self {
            Augmentation::GaussianNoise { sigma, p } => {
                if !(sigma >= 0.0) {
                    return Err(CapcError::invalid("gaussian_noise: sigma must be >= 0"));
                }
                prob(p)
            }
            Augmentation::TimeFlip { p } => prob(p),
            Augmentation::TimeMask { fraction, p } => {
                if !(0.0..1.0).contains(&fraction) {
                    return Err(CapcError::invalid("time_mask: fraction must lie in [0, 1)"));
                }
                prob(p)
            }
            Augmentation::SubcarrierMask { count, p } => {
                if let Some(ns) = subcarriers {
                    if count >= ns {
                        return Err(CapcError::invalid(format!(
                            "subcarrier_mask: count {count} must be < {ns} subcarriers"
                        )));
                    }
                }
                prob(p)
            }
            Augmentation::DualView => Ok(()),
        }
    }
}

impl fmt::Display for Augmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Augmentation {
    type Err = CapcError;

    fn from_str(s: &str) -> Result<Self> {
        Self::default_for(s.trim())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub steps: Vec<Augmentation>,
    /// Flip each window in place instead of the whole sample.
    #[serde(default)]
    pub flip_per_window: bool,
}

impl AugmentationSpec {
    pub fn new(steps: Vec<Augmentation>) -> Self {
        Self {
            steps,
            flip_per_window: false,
        }
    }

    /// Dual view + Gaussian noise (sigma 0.1).
    pub fn capc_default() -> Self {
        Self::new(vec![
            Augmentation::DualView,
            Augmentation::GaussianNoise { sigma: 0.1, p: 1.0 },
        ])
    }

    /// Parses a comma-separated list of canonical names with default
    /// parameters.
    pub fn from_names(names: &str) -> Result<Self> {
        let steps = names
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(Augmentation::default_for)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(steps))
    }

    pub fn dual_view(&self) -> bool {
        self.steps.iter().any(|s| matches!(s, Augmentation::DualView))
    }

    pub fn validate(&self, subcarriers: Option<usize>) -> Result<()> {
        self.steps.iter().try_for_each(|s| s.validate(subcarriers))
    }

    fn canonical(&self) -> Vec<Augmentation> {
        let mut steps: Vec<_> = self
            .steps
            .iter()
            .copied()
            .filter(|s| !matches!(s, Augmentation::DualView))
            .collect();
        steps.sort_by_key(Augmentation::rank);
        steps
    }
}

/// `x + eps`, `eps ~ N(0, sigma^2)` i.i.d.
pub fn gaussian_noise(x: ArrayView3<'_, f32>, sigma: f32, rng: &mut Rng) -> Array3<f32> {
    if sigma == 0.0 {
        return x.to_owned();
    }
    let dist = Normal::new(0.0f32, sigma).expect("sigma is finite and >= 0");
    x.mapv(|v| v + dist.sample(rng))
}

/// Reverses the frame (last) axis.
pub fn time_flip(x: ArrayView3<'_, f32>) -> Array3<f32> {
    x.slice(s![.., .., ..;-1]).to_owned()
}

/// Zeroes one contiguous run of `round(fraction * N_f)` frames in every
/// window, at an independent uniform offset per window.
pub fn time_mask(ws: &WindowSequence, fraction: f64, rng: &mut Rng) -> Result<WindowSequence> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(CapcError::invalid("time mask fraction must lie in [0, 1)"));
    }
    let nf = ws.frames_per_window();
    let len = ((fraction * nf as f64).round() as usize).min(nf);
    let mut out = ws.clone();
    if len == 0 {
        return Ok(out);
    }
    for mut w in out.windows.outer_iter_mut() {
        let start = rng.random_range(0..=nf - len);
        w.slice_mut(s![.., .., start..start + len]).fill(0.0);
    }
    Ok(out)
}

/// Zeroes `count` distinct subcarriers (drawn uniformly) across all links and
/// frames.
pub fn subcarrier_mask(x: ArrayView3<'_, f32>, count: usize, rng: &mut Rng) -> Result<Array3<f32>> {
    let ns = x.len_of(Axis(1));
    if count >= ns {
        return Err(CapcError::invalid(format!(
            "subcarrier mask count {count} must be < {ns}"
        )));
    }
    let mut out = x.to_owned();
    for s in index::sample(rng, ns, count) {
        out.slice_mut(s![.., s, ..]).fill(0.0);
    }
    Ok(out)
}

/// Source tensors for branches A and B: the two link directions in random
/// order.
pub fn dual_view_assign<'a>(
    sample: &'a CsiSample,
    rng: &mut Rng,
) -> Result<(&'a Array3<f32>, &'a Array3<f32>)> {
    let pair = sample.paired_amplitude.as_ref().ok_or_else(|| {
        CapcError::Config(format!(
            "sample {} has no paired CSI; disable the dual_view augmentation to train on \
             single-direction data",
            sample.sample_id
        ))
    })?;
    if rng.random_bool(0.5) {
        Ok((&sample.amplitude, pair))
    } else {
        Ok((pair, &sample.amplitude))
    }
}

fn one_view(
    source: &Array3<f32>,
    steps: &[Augmentation],
    flip_per_window: bool,
    frames_per_window: usize,
    rng: &mut Rng,
) -> Result<WindowSequence> {
    let mut x = source.clone();
    let mut flip_windows = false;
    let mut masks = Vec::new();
    for step in steps {
        // the coin is always drawn so the stream layout does not depend on p
        let apply = |rng: &mut Rng, p: f64| rng.random::<f64>() < p;
        match *step {
            Augmentation::GaussianNoise { sigma, p } => {
                if apply(rng, p) {
                    x = gaussian_noise(x.view(), sigma, rng);
                }
            }
            Augmentation::TimeFlip { p } => {
                if apply(rng, p) {
                    if flip_per_window {
                        flip_windows = true;
                    } else {
                        x = time_flip(x.view());
                    }
                }
            }
            Augmentation::SubcarrierMask { count, p } => {
                if apply(rng, p) {
                    x = subcarrier_mask(x.view(), count, rng)?;
                }
            }
            Augmentation::TimeMask { fraction, p } => {
                if apply(rng, p) {
                    masks.push(fraction);
                }
            }
            Augmentation::DualView => {}
        }
    }
    let mut ws = segment_tensor(x.view(), frames_per_window)?;
    if flip_windows {
        ws.windows.invert_axis(Axis(3));
        ws.windows = ws.windows.as_standard_layout().to_owned();
    }
    for fraction in masks {
        ws = time_mask(&ws, fraction, rng)?;
    }
    Ok(ws)
}

/// Both views of `sample`, segmented. Branches draw from independent streams
/// seeded off `rng`.
pub fn make_views(
    sample: &CsiSample,
    spec: &AugmentationSpec,
    frames_per_window: usize,
    rng: &mut Rng,
) -> Result<(WindowSequence, WindowSequence)> {
    let (src_a, src_b) = if spec.dual_view() {
        dual_view_assign(sample, rng)?
    } else {
        (&sample.amplitude, &sample.amplitude)
    };
    let mut rng_a = Rng::seed_from_u64(rng.random());
    let mut rng_b = Rng::seed_from_u64(rng.random());
    let steps = spec.canonical();
    let a = one_view(src_a, &steps, spec.flip_per_window, frames_per_window, &mut rng_a)?;
    let b = one_view(src_b, &steps, spec.flip_per_window, frames_per_window, &mut rng_b)?;
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csi::segment;
    use ndarray::Array;

    fn rng(s: u64) -> Rng {
        Rng::seed_from_u64(s)
    }

    fn ramp() -> Array3<f32> {
        Array::from_shape_fn((3, 30, 40), |(a, s, t)| 1.0 + (a * 1000 + s * 50 + t) as f32)
    }

    #[test]
    fn zero_sigma_noise_is_identity() {
        let x = ramp();
        assert_eq!(gaussian_noise(x.view(), 0.0, &mut rng(1)), x);
    }

    #[test]
    fn flip_involution_and_indexing() {
        let x = ramp();
        let f = time_flip(x.view());
        assert_eq!(time_flip(f.view()), x);
        let nt = 40;
        for i in 0..nt {
            assert_eq!(f[[1, 2, i]], x[[1, 2, nt - 1 - i]]);
        }
        let c = Array3::from_elem((2, 3, 5), 7.0f32);
        assert_eq!(time_flip(c.view()), c);
    }

    #[test]
    fn time_mask_zeroes_one_run_per_window() {
        let x = ramp();
        let ws = segment_tensor(x.view(), 10).unwrap();
        let masked = time_mask(&ws, 0.3, &mut rng(3)).unwrap();
        for w in masked.windows.outer_iter() {
            let zero_frames: Vec<usize> = (0..10)
                .filter(|&f| w.slice(s![.., .., f]).iter().all(|&v| v == 0.0))
                .collect();
            assert_eq!(zero_frames.len(), 3);
            assert_eq!(zero_frames[2] - zero_frames[0], 2, "run is contiguous");
        }
        let again = time_mask(&ws, 0.3, &mut rng(3)).unwrap();
        assert_eq!(masked, again);
        assert_eq!(time_mask(&ws, 0.0, &mut rng(3)).unwrap(), ws);
        assert!(time_mask(&ws, 1.0, &mut rng(3)).is_err());
    }

    #[test]
    fn subcarrier_mask_counts() {
        let x = ramp();
        let zero_rows = |m: &Array3<f32>| {
            (0..30)
                .filter(|&s| m.slice(s![.., s, ..]).iter().all(|&v| v == 0.0))
                .count()
        };
        let m = subcarrier_mask(x.view(), 5, &mut rng(2)).unwrap();
        assert_eq!(zero_rows(&m), 5);
        assert_eq!(subcarrier_mask(x.view(), 0, &mut rng(2)).unwrap(), x);
        let m = subcarrier_mask(x.view(), 29, &mut rng(2)).unwrap();
        assert_eq!(zero_rows(&m), 29);
        assert!(subcarrier_mask(x.view(), 30, &mut rng(2)).is_err());
    }

    #[test]
    fn dual_view_requires_pair() {
        let s = CsiSample::new(ramp(), None, None, "x").unwrap();
        let err = dual_view_assign(&s, &mut rng(0)).unwrap_err();
        assert!(err.to_string().contains("disable"));
    }

    #[test]
    fn empty_spec_views_equal_segmentation() {
        let s = CsiSample::new(ramp(), Some(ramp() * 2.0), None, "x").unwrap();
        let (a, b) = make_views(&s, &AugmentationSpec::default(), 10, &mut rng(4)).unwrap();
        let seg = segment(&s, 10).unwrap();
        assert_eq!(a, seg);
        assert_eq!(b, seg);
    }

    #[test]
    fn views_are_deterministic() {
        let s = CsiSample::new(ramp(), Some(ramp() * 2.0), None, "x").unwrap();
        let spec = AugmentationSpec::from_names(
            "dual_view, gaussian_noise, time_flip, time_mask, subcarrier_mask",
        )
        .unwrap();
        let v1 = make_views(&s, &spec, 10, &mut rng(4)).unwrap();
        let v2 = make_views(&s, &spec, 10, &mut rng(4)).unwrap();
        assert_eq!(v1, v2);
        assert_ne!(v1.0, v1.1);
    }

    #[test]
    fn spec_order_is_irrelevant() {
        let s = CsiSample::new(ramp(), Some(ramp() * 2.0), None, "x").unwrap();
        let ab = AugmentationSpec::from_names("gaussian_noise, time_mask").unwrap();
        let ba = AugmentationSpec::from_names("time_mask, gaussian_noise").unwrap();
        assert_eq!(
            make_views(&s, &ab, 10, &mut rng(8)).unwrap(),
            make_views(&s, &ba, 10, &mut rng(8)).unwrap()
        );
    }

    #[test]
    fn per_window_flip_reverses_each_window() {
        let s = CsiSample::new(ramp(), None, None, "x").unwrap();
        let mut spec = AugmentationSpec::new(vec![Augmentation::TimeFlip { p: 1.0 }]);
        spec.flip_per_window = true;
        let (a, _) = make_views(&s, &spec, 10, &mut rng(1)).unwrap();
        let seg = segment(&s, 10).unwrap();
        for f in 0..10 {
            assert_eq!(
                a.windows.slice(s![.., .., .., f]),
                seg.windows.slice(s![.., .., .., 9 - f])
            );
        }
    }

    #[test]
    fn names_parse_and_validate() {
        assert!(AugmentationSpec::from_names("bogus").is_err());
        let spec = AugmentationSpec::from_names("subcarrier_mask").unwrap();
        assert!(spec.validate(Some(30)).is_ok());
        assert!(spec.validate(Some(5)).is_err());
        assert!(AugmentationSpec::capc_default().dual_view());
    }
}
