mod common;

use std::path::Path;

use capc::csi::read_dataset;
use capc::synth::{apply_electronics, gen_dataset, gen_free_space, gen_paired_sample, generate, SynthParams};
use common::rng;
use ndarray::{Array1, Array3, Axis};
use num_complex::Complex64;

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

/// Time-averaged magnitude of every (link, subcarrier) cell.
fn profile(h: &Array3<Complex64>) -> Vec<f64> {
    h.mapv(|v| v.norm()).mean_axis(Axis(2)).unwrap().iter().copied().collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn same_class_profiles_correlate_more_than_cross_class() {
    let cfg = SynthParams::default().build().unwrap();
    let dims = cfg.dims;
    let mut r = rng(200);
    let (mut same, mut cross) = (0.0, 0.0);
    let draws = 200;
    for i in 0..draws {
        let c = i % cfg.classes.len();
        let other = (c + 1 + i % (cfg.classes.len() - 1)) % cfg.classes.len();
        let a = profile(&gen_free_space(&cfg.classes[c], dims, &mut r));
        let b = profile(&gen_free_space(&cfg.classes[c], dims, &mut r));
        let x = profile(&gen_free_space(&cfg.classes[other], dims, &mut r));
        same += pearson(&a, &b);
        cross += pearson(&a, &x);
    }
    let (same, cross) = (same / draws as f64, cross / draws as f64);
    assert!(same > cross, "same {same} cross {cross}");
}

#[test]
fn paired_directions_correlate_more_than_unrelated_samples() {
    let mut params = SynthParams::default();
    params.classes = 4;
    let cfg = params.build().unwrap();
    let mut r = rng(201);
    let subcarrier_corr = |x: &Array3<f32>, y: &Array3<f32>| {
        let fx: Array1<f64> = x.mapv(f64::from).mean_axis(Axis(2)).unwrap().mean_axis(Axis(0)).unwrap();
        let fy: Array1<f64> = y.mapv(f64::from).mean_axis(Axis(2)).unwrap().mean_axis(Axis(0)).unwrap();
        pearson(fx.as_slice().unwrap(), fy.as_slice().unwrap())
    };
    let mut paired = Vec::new();
    let mut unrelated = Vec::new();
    for i in 0..100 {
        let class = &cfg.classes[i % 4];
        let s = gen_paired_sample(class, &cfg, &mut r, "a");
        let u = gen_paired_sample(&cfg.classes[(i + 1) % 4], &cfg, &mut r, "b");
        let down = s.paired_amplitude.as_ref().unwrap();
        assert_ne!(&s.amplitude, down);
        paired.push(subcarrier_corr(&s.amplitude, down));
        unrelated.push(subcarrier_corr(&s.amplitude, u.paired_amplitude.as_ref().unwrap()));
    }
    let (p, u) = (median(paired), median(unrelated));
    assert!(p > u, "paired {p} unrelated {u}");
}

#[test]
fn default_dataset_has_configured_count_and_shapes() {
    let ds = generate(&SynthParams::default().build().unwrap()).unwrap();
    assert_eq!(ds.len(), 400);
    assert_eq!(ds.class_count, 8);
    assert_eq!(ds.class_histogram(), vec![50; 8]);
    for s in &ds.samples {
        assert_eq!(s.amplitude.dim(), (3, 30, 200));
        assert_eq!(s.paired_amplitude.as_ref().unwrap().dim(), (3, 30, 200));
    }
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn same_seed_gives_byte_identical_directories() {
    let params = SynthParams {
        frames: 40,
        samples_per_class: 5,
        ..SynthParams::default()
    };
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_dataset(&params.build().unwrap(), &a).unwrap();
    gen_dataset(&params.build().unwrap(), &b).unwrap();
    assert_eq!(tree(&a), tree(&b));

    let other = SynthParams { seed: 1, ..params };
    let c = tmp.path().join("c");
    gen_dataset(&other.build().unwrap(), &c).unwrap();
    assert_ne!(tree(&a), tree(&c));

    let ds = read_dataset(&a).unwrap();
    assert!(ds.has_pairs());
    let labels: Vec<_> = ds.samples.iter().map(|s| s.label.unwrap()).collect();
    assert_eq!(labels, (0..40).map(|i| i / 5).collect::<Vec<_>>());
}

#[test]
fn unwritable_path_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("occupied");
    std::fs::write(&file, b"x").unwrap();
    let params = SynthParams {
        frames: 10,
        samples_per_class: 1,
        ..SynthParams::default()
    };
    let err = gen_dataset(&params.build().unwrap(), &file.join("sub")).unwrap_err();
    assert!(matches!(err, capc::CapcError::Io { .. }), "{err}");
}

#[test]
fn rayleigh_moments_of_pure_noise() {
    let s = 0.3;
    let mut profile = capc::synth::DeviceProfile::identity(100);
    profile.noise_std = s;
    let zero = Array3::<Complex64>::zeros((10, 100, 100));
    let out = apply_electronics(&zero, &profile, &mut rng(202));
    let mags: Vec<f64> = out.iter().map(|v| v.norm()).collect();
    let n = mags.len() as f64;
    let mean = mags.iter().sum::<f64>() / n;
    let second = mags.iter().map(|m| m * m).sum::<f64>() / n;
    let want_mean = s * (std::f64::consts::PI / 2.0).sqrt();
    let want_second = 2.0 * s * s;
    assert!((mean / want_mean - 1.0).abs() < 0.05, "{mean} vs {want_mean}");
    assert!((second / want_second - 1.0).abs() < 0.05, "{second} vs {want_second}");
}
