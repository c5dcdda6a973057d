//! Synthetic paired uplink/downlink CSI.
//!
//! The received channel is `y = H x + noise`, where the measured `H` folds
//! the transmitter electronics, the over-the-air multipath and the receiver
//! electronics together. A sample draws one free-space realization and then
//! passes it through two different electronics chains, one per link
//! direction, so that only the free-space part is shared by the pair.
//!
//! Class information lives in the free space: each activity class has its
//! own multipath layout and a characteristic oscillation of the moving
//! (non line-of-sight) paths over time.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array3;
use num_complex::Complex64;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::csi::{self, CsiSample, Dataset};
use crate::error::{CapcError, Result};
use crate::seed::{self, Rng};

const TAG_CLASS: u64 = 0xC1A5;
const TAG_PROFILE: u64 = 0xE1EC;
const TAG_SAMPLE: u64 = 0x5A4D;

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `(N_a, N_s, N_t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub links: usize,
    pub subcarriers: usize,
    pub frames: usize,
}

impl Dims {
    pub fn new(links: usize, subcarriers: usize, frames: usize) -> Result<Self> {
        if links == 0 || subcarriers == 0 || frames == 0 {
            return Err(CapcError::invalid(format!(
                "all dimensions must be >= 1, got {links}x{subcarriers}x{frames}"
            )));
        }
        Ok(Self {
            links,
            subcarriers,
            frames,
        })
    }
}

/// Electronics of one transmit/receive chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    /// Per-subcarrier complex gain as `(magnitude, phase in radians)`.
    pub gains: Vec<(f64, f64)>,
    /// Marginal std of the per-link log-gain drift, per frame.
    pub drift_std: f64,
    /// Frame-to-frame correlation of the drift process, in `[0, 1)`.
    pub drift_correlation: f64,
    /// Std of each real component of the receiver AWGN.
    pub noise_std: f64,
}

impl DeviceProfile {
    /// Unit gains, no drift, no noise.
    pub fn identity(subcarriers: usize) -> Self {
        Self {
            gains: vec![(1.0, 0.0); subcarriers],
            drift_std: 0.0,
            drift_correlation: 0.0,
            noise_std: 0.0,
        }
    }

    /// Log-normal magnitudes smoothed across subcarriers (a filter ripple) and
    /// uniform phase offsets.
    pub fn random(
        subcarriers: usize,
        gain_spread: f64,
        phase_spread: f64,
        drift_std: f64,
        drift_correlation: f64,
        noise_std: f64,
        rng: &mut Rng,
    ) -> Self {
        let knots: Vec<f64> = (0..4).map(|_| normal(rng)).collect();
        let gains = (0..subcarriers)
            .map(|s| {
                let x = s as f64 / subcarriers.max(2).saturating_sub(1).max(1) as f64 * 3.0;
                let i = (x.floor() as usize).min(2);
                let w = x - i as f64;
                let ripple = knots[i] * (1.0 - w) + knots[i + 1] * w;
                let mag = (gain_spread * ripple).exp();
                let phase = phase_spread * (2.0 * rng.random::<f64>() - 1.0);
                (mag, phase)
            })
            .collect();
        Self {
            gains,
            drift_std,
            drift_correlation,
            noise_std,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .gains
            .iter()
            .any(|(m, p)| !m.is_finite() || *m <= 0.0 || !p.is_finite())
        {
            return Err(CapcError::invalid(
                "device gains must have finite positive magnitudes",
            ));
        }
        if !(self.noise_std >= 0.0 && self.drift_std >= 0.0) {
            return Err(CapcError::invalid("noise and drift std must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.drift_correlation) {
            return Err(CapcError::invalid("drift correlation must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSpec {
    pub amplitude: f64,
    /// Phase slope across subcarriers (radians per subcarrier index), the
    /// frequency-domain signature of the path delay.
    pub phase_slope: f64,
    /// Per-link phase offset.
    pub link_phases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityClass {
    pub index: usize,
    pub paths: Vec<PathSpec>,
    /// Oscillation frequency of the moving paths, cycles per frame.
    pub modulation_freq: f64,
    /// Relative depth of the oscillation.
    pub modulation_depth: f64,
    /// Relative per-sample jitter of path amplitudes and slopes.
    pub path_jitter: f64,
}

impl ActivityClass {
    #[allow(clippy::too_many_arguments)]
    pub fn random(
        index: usize,
        links: usize,
        path_count: usize,
        modulation_freq: f64,
        modulation_depth: f64,
        path_jitter: f64,
        rng: &mut Rng,
    ) -> Self {
        let paths = (0..path_count.max(1))
            .map(|p| PathSpec {
                // the first path is a strong line-of-sight component
                amplitude: if p == 0 {
                    1.0
                } else {
                    0.3 + 0.5 * rng.random::<f64>()
                },
                phase_slope: 0.6 * rng.random::<f64>(),
                link_phases: (0..links).map(|_| 2.0 * PI * rng.random::<f64>()).collect(),
            })
            .collect();
        Self {
            index,
            paths,
            modulation_freq,
            modulation_depth,
            path_jitter,
        }
    }

    pub fn validate(&self, links: usize) -> Result<()> {
        if self.paths.is_empty() {
            return Err(CapcError::invalid("an activity class needs at least one path"));
        }
        for p in &self.paths {
            if !(p.amplitude >= 0.0) || p.link_phases.len() != links {
                return Err(CapcError::invalid(format!(
                    "class {}: path amplitudes must be >= 0 with one phase per link",
                    self.index
                )));
            }
        }
        Ok(())
    }
}

/// Fully materialized generator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dims: Dims,
    pub classes: Vec<ActivityClass>,
    pub samples_per_class: usize,
    /// Electronics of the A->B direction (stored as `amplitude`).
    pub profile_ab: DeviceProfile,
    /// Electronics of the B->A direction (stored as `paired_amplitude`).
    pub profile_ba: DeviceProfile,
    pub seed: u64,
}

/// Compact parameterization of a [`SynthConfig`]; classes and device
/// profiles are derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub links: usize,
    pub subcarriers: usize,
    pub frames: usize,
    pub classes: usize,
    pub samples_per_class: usize,
    pub paths: usize,
    pub freq_min: f64,
    pub freq_max: f64,
    pub modulation_depth: f64,
    pub path_jitter: f64,
    pub gain_spread: f64,
    pub phase_spread: f64,
    pub drift_std: f64,
    pub drift_correlation: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    /// 8 classes x 50 pairs of 3 x 30 x 200 CSI.
    fn default() -> Self {
        Self {
            links: 3,
            subcarriers: 30,
            frames: 200,
            classes: 8,
            samples_per_class: 50,
            paths: 3,
            freq_min: 0.02,
            freq_max: 0.2,
            modulation_depth: 0.5,
            path_jitter: 0.25,
            gain_spread: 0.3,
            phase_spread: PI,
            drift_std: 0.5,
            drift_correlation: 0.9,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn build(&self) -> Result<SynthConfig> {
        let dims = Dims::new(self.links, self.subcarriers, self.frames)?;
        let classes = (0..self.classes)
            .map(|c| {
                let freq = if self.classes == 1 {
                    self.freq_min
                } else {
                    self.freq_min
                        + (self.freq_max - self.freq_min) * c as f64 / (self.classes - 1) as f64
                };
                let mut rng = seed::rng(self.seed, &[TAG_CLASS, c as u64]);
                ActivityClass::random(
                    c,
                    self.links,
                    self.paths,
                    freq,
                    self.modulation_depth,
                    self.path_jitter,
                    &mut rng,
                )
            })
            .collect();
        let profile = |direction: u64| {
            let mut rng = seed::rng(self.seed, &[TAG_PROFILE, direction]);
            DeviceProfile::random(
                self.subcarriers,
                self.gain_spread,
                self.phase_spread,
                self.drift_std,
                self.drift_correlation,
                self.noise_std,
                &mut rng,
            )
        };
        let config = SynthConfig {
            dims,
            classes,
            samples_per_class: self.samples_per_class,
            profile_ab: profile(0),
            profile_ba: profile(1),
            seed: self.seed,
        };
        config.validate()?;
        Ok(config)
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(CapcError::invalid("at least one activity class is required"));
        }
        for c in &self.classes {
            c.validate(self.dims.links)?;
        }
        for p in [&self.profile_ab, &self.profile_ba] {
            p.validate()?;
            if p.gains.len() != self.dims.subcarriers {
                return Err(CapcError::invalid(
                    "device profile needs one gain per subcarrier",
                ));
            }
        }
        Ok(())
    }

    pub fn sample_count(&self) -> usize {
        self.classes.len() * self.samples_per_class
    }
}

/// One over-the-air channel realization `[N_a, N_s, N_t]`.
pub fn gen_free_space(activity: &ActivityClass, dims: Dims, rng: &mut Rng) -> Array3<Complex64> {
    let jitter = activity.path_jitter;
    let phase0 = 2.0 * PI * rng.random::<f64>();
    let moving = activity.paths.len() > 1;
    let realized: Vec<(f64, f64, f64)> = activity
        .paths
        .iter()
        .enumerate()
        .map(|(p, path)| {
            let (amp, slope) = if jitter > 0.0 {
                (
                    (path.amplitude * (1.0 + jitter * normal(rng))).abs(),
                    path.phase_slope * (1.0 + 0.2 * jitter * normal(rng)),
                )
            } else {
                (path.amplitude, path.phase_slope)
            };
            // the static path of a multi-path class does not oscillate
            let depth = if moving && p == 0 {
                0.0
            } else {
                activity.modulation_depth
            };
            (amp, slope, depth)
        })
        .collect();
    let omega = 2.0 * PI * activity.modulation_freq;
    Array3::from_shape_fn((dims.links, dims.subcarriers, dims.frames), |(a, s, t)| {
        let mut h = Complex64::new(0.0, 0.0);
        for (p, &(amp, slope, depth)) in realized.iter().enumerate() {
            let offset = activity.paths[p].link_phases[a];
            let gain = amp * (1.0 + depth * (omega * t as f64 + phase0 + p as f64).sin());
            h += Complex64::from_polar(gain, -(slope * s as f64 + offset));
        }
        h
    })
}

/// Applies a transmit/receive chain: per-subcarrier complex gain, slowly
/// drifting per-link log-gain, then AWGN.
pub fn apply_electronics(
    free_space: &Array3<Complex64>,
    profile: &DeviceProfile,
    rng: &mut Rng,
) -> Array3<Complex64> {
    let (links, subcarriers, frames) = free_space.dim();
    let mut drift = Array3::<f64>::zeros((links, 1, frames));
    if profile.drift_std > 0.0 {
        let rho = profile.drift_correlation;
        let innovation = profile.drift_std * (1.0 - rho * rho).sqrt();
        for a in 0..links {
            let mut d = profile.drift_std * normal(rng);
            for t in 0..frames {
                if t > 0 {
                    d = rho * d + innovation * normal(rng);
                }
                drift[[a, 0, t]] = d;
            }
        }
    }
    let gains: Vec<Complex64> = profile
        .gains
        .iter()
        .map(|&(m, p)| Complex64::from_polar(m, p))
        .collect();
    let mut out = Array3::from_shape_fn((links, subcarriers, frames), |(a, s, t)| {
        free_space[[a, s, t]] * gains[s] * drift[[a, 0, t]].exp()
    });
    if profile.noise_std > 0.0 {
        for v in out.iter_mut() {
            *v += Complex64::new(
                profile.noise_std * normal(rng),
                profile.noise_std * normal(rng),
            );
        }
    }
    out
}

fn magnitude(x: &Array3<Complex64>) -> Array3<f32> {
    x.mapv(|v| v.norm() as f32)
}

/// A labelled sample whose two directions share one free-space draw.
pub fn gen_paired_sample(
    activity: &ActivityClass,
    config: &SynthConfig,
    rng: &mut Rng,
    sample_id: impl Into<String>,
) -> CsiSample {
    let h = gen_free_space(activity, config.dims, rng);
    let up = apply_electronics(&h, &config.profile_ab, rng);
    let down = apply_electronics(&h, &config.profile_ba, rng);
    CsiSample {
        amplitude: magnitude(&up),
        paired_amplitude: Some(magnitude(&down)),
        label: Some(activity.index),
        sample_id: sample_id.into(),
    }
}

/// Generates the whole dataset in memory. Samples are ordered class-major and
/// each derives its stream from `(seed, index)`, so the parallel generation is
/// bit-identical to a serial one.
pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let n = config.sample_count();
    if n == 0 {
        return Err(CapcError::EmptyDataset);
    }
    let samples = (0..n)
        .into_par_iter()
        .map(|i| {
            let class = &config.classes[i / config.samples_per_class];
            let mut rng = seed::rng(config.seed, &[TAG_SAMPLE, i as u64]);
            gen_paired_sample(class, config, &mut rng, csi::sample_id(i))
        })
        .collect();
    Dataset::new(config.classes.len(), samples)
}

/// Generates and writes the dataset container to `dir`.
pub fn gen_dataset(config: &SynthConfig, dir: &Path) -> Result<Dataset> {
    let ds = generate(config)?;
    csi::write_dataset(&ds, dir)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(s: u64) -> Rng {
        Rng::seed_from_u64(s)
    }

    fn dims() -> Dims {
        Dims::new(3, 30, 200).unwrap()
    }

    #[test]
    fn single_static_path_is_constant_in_time() {
        let mut r = rng(1);
        let mut class = ActivityClass::random(0, 3, 1, 0.1, 0.0, 0.0, &mut r);
        class.modulation_depth = 0.0;
        let h = gen_free_space(&class, dims(), &mut r);
        for a in 0..3 {
            for s in 0..30 {
                let m0 = h[[a, s, 0]].norm();
                for t in 0..200 {
                    assert!((h[[a, s, t]].norm() - m0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn free_space_is_deterministic() {
        let class = ActivityClass::random(0, 3, 3, 0.1, 0.5, 0.2, &mut rng(4));
        let a = gen_free_space(&class, dims(), &mut rng(9));
        let b = gen_free_space(&class, dims(), &mut rng(9));
        assert_eq!(a, b);
    }

    #[test]
    fn identity_profile_is_identity() {
        let class = ActivityClass::random(0, 3, 3, 0.1, 0.5, 0.2, &mut rng(4));
        let h = gen_free_space(&class, dims(), &mut rng(2));
        let out = apply_electronics(&h, &DeviceProfile::identity(30), &mut rng(3));
        assert_eq!(out, h);
    }

    #[test]
    fn pure_gain_profile_scales_by_declared_gain() {
        let class = ActivityClass::random(0, 3, 3, 0.1, 0.5, 0.2, &mut rng(4));
        let h = gen_free_space(&class, dims(), &mut rng(2));
        let mut profile = DeviceProfile::identity(30);
        for (s, g) in profile.gains.iter_mut().enumerate() {
            *g = (0.5 + s as f64 * 0.1, 0.03 * s as f64);
        }
        let out = apply_electronics(&h, &profile, &mut rng(3));
        for ((a, s, t), v) in out.indexed_iter() {
            let ratio = v / h[[a, s, t]];
            let want = Complex64::from_polar(profile.gains[s].0, profile.gains[s].1);
            assert!((ratio - want).norm() < 1e-12);
        }
    }

    #[test]
    fn awgn_magnitude_is_rayleigh() {
        let s = 0.3;
        let zero = Array3::<Complex64>::zeros((1, 100, 1000));
        let mut profile = DeviceProfile::identity(100);
        profile.noise_std = s;
        let out = apply_electronics(&zero, &profile, &mut rng(5));
        let n = out.len() as f64;
        let mean = out.iter().map(|v| v.norm()).sum::<f64>() / n;
        let second = out.iter().map(|v| v.norm_sqr()).sum::<f64>() / n;
        // Rayleigh(scale s): mean s*sqrt(pi/2), E[r^2] = 2 s^2
        let want_mean = s * (PI / 2.0).sqrt();
        assert!((mean / want_mean - 1.0).abs() < 0.05, "{mean} vs {want_mean}");
        assert!((second / (2.0 * s * s) - 1.0).abs() < 0.05);
    }

    #[test]
    fn identity_profiles_give_equal_pairs() {
        let mut config = SynthParams {
            samples_per_class: 2,
            ..Default::default()
        }
        .build()
        .unwrap();
        config.profile_ab = DeviceProfile::identity(30);
        config.profile_ba = DeviceProfile::identity(30);
        let ds = generate(&config).unwrap();
        for s in &ds.samples {
            assert_eq!(Some(&s.amplitude), s.paired_amplitude.as_ref());
        }
    }

    #[test]
    fn dataset_counts_and_empty_error() {
        let params = SynthParams {
            samples_per_class: 50,
            ..Default::default()
        };
        let ds = generate(&params.build().unwrap()).unwrap();
        assert_eq!(ds.len(), 400);
        assert_eq!(ds.dims(), Some((3, 30, 200)));
        assert_eq!(ds.class_histogram(), vec![50; 8]);
        let empty = SynthParams {
            samples_per_class: 0,
            ..Default::default()
        };
        assert!(matches!(
            generate(&empty.build().unwrap()),
            Err(CapcError::EmptyDataset)
        ));
    }

    #[test]
    fn profiles_reject_bad_values() {
        let mut p = DeviceProfile::identity(2);
        p.gains[0].0 = 0.0;
        assert!(p.validate().is_err());
        let mut p = DeviceProfile::identity(2);
        p.noise_std = -1.0;
        assert!(p.validate().is_err());
        assert!(Dims::new(0, 1, 1).is_err());
    }
}
