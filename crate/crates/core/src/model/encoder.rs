use ndarray::{Array2, Array4, ArrayView2, ArrayView4};
use serde::{Deserialize, Serialize};

use super::layers::{
    join, max_pool2, max_pool2_backward, relu, relu_backward, BatchNorm, BnCache, Conv3x3, Linear, Mode,
    Module, Param,
};
use crate::error::{CapcError, Result};
use crate::scalar::Scalar;
use crate::seed::Rng;

/// Window shape and widths of the convolutional window encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub links: usize,
    pub subcarriers: usize,
    pub frames: usize,
    pub channels: [usize; 2],
    pub embed_dim: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subcarriers < 4 || self.frames < 4 {
            return Err(CapcError::invalid(format!(
                "encoder windows need >= 4 subcarriers and >= 4 frames, got {}x{}",
                self.subcarriers, self.frames
            )));
        }
        if self.links == 0 || self.channels.contains(&0) || self.embed_dim == 0 {
            return Err(CapcError::invalid("encoder widths must be positive"));
        }
        Ok(())
    }

    fn flat_dim(&self) -> usize {
        (self.subcarriers / 4) * (self.frames / 4) * self.channels[1]
    }
}

/// Two conv blocks (3x3 conv, batch norm, ReLU, 2x2 max pool) over the
/// subcarrier x frame plane with links as input channels, then an affine map
/// to `R^D`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<F> {
    pub config: EncoderConfig,
    pub conv1: Conv3x3<F>,
    pub bn1: BatchNorm<F>,
    pub conv2: Conv3x3<F>,
    pub bn2: BatchNorm<F>,
    pub fc: Linear<F>,
}

pub struct EncoderCache<F> {
    cols1: Array2<F>,
    bn1: BnCache<F>,
    act1: Array4<F>,
    arg1: Vec<usize>,
    cols2: Array2<F>,
    bn2: BnCache<F>,
    act2: Array4<F>,
    arg2: Vec<usize>,
    flat: Array2<F>,
}

fn as_rows<F: Scalar>(x: &Array4<F>) -> ArrayView2<'_, F> {
    let c = x.dim().3;
    x.view()
        .into_shape_with_order((x.len() / c, c))
        .expect("contiguous activations")
}

impl<F: Scalar> Encoder<F> {
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let [c1, c2] = config.channels;
        Ok(Self {
            config,
            conv1: Conv3x3::new(config.links, c1, rng),
            bn1: BatchNorm::new(c1),
            conv2: Conv3x3::new(c1, c2, rng),
            bn2: BatchNorm::new(c2),
            fc: Linear::new(config.flat_dim(), config.embed_dim, rng),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn check(&self, x: &ArrayView4<'_, F>) -> Result<()> {
        let (_, a, s, f) = x.dim();
        let c = &self.config;
        if (a, s, f) != (c.links, c.subcarriers, c.frames) {
            return Err(CapcError::invalid(format!(
                "encoder expects windows of {}x{}x{}, got {a}x{s}x{f}",
                c.links, c.subcarriers, c.frames
            )));
        }
        Ok(())
    }

    fn to_nhwc(x: ArrayView4<'_, F>) -> Array4<F> {
        x.permuted_axes([0, 2, 3, 1]).as_standard_layout().to_owned()
    }

    /// Inference-mode embedding of `[B, N_a, N_s, N_f]` windows; rows are
    /// independent of each other.
    pub fn encode(&self, x: ArrayView4<'_, F>) -> Result<Array2<F>> {
        self.check(&x)?;
        let x = Self::to_nhwc(x);
        let block = |x: &Array4<F>, conv: &Conv3x3<F>, bn: &BatchNorm<F>| {
            let (y, _) = conv.forward(x.view());
            let dim = y.dim();
            let y = bn.infer(as_rows(&y));
            let y = relu(y.into_shape_with_order(dim).expect("contiguous"));
            max_pool2(y.view()).0
        };
        let h1 = block(&x, &self.conv1, &self.bn1);
        let h2 = block(&h1, &self.conv2, &self.bn2);
        let n = h2.dim().0;
        let flat = h2.into_shape_with_order((n, self.config.flat_dim())).expect("contiguous");
        Ok(self.fc.forward(flat.view()))
    }

    /// Forward pass keeping what `backward` needs. In [`Mode::Train`] batch
    /// statistics are used and running statistics updated.
    pub fn forward(&mut self, x: ArrayView4<'_, F>, mode: Mode) -> Result<(Array2<F>, EncoderCache<F>)> {
        self.check(&x)?;
        let x = Self::to_nhwc(x);

        let (y, cols1) = self.conv1.forward(x.view());
        let dim1 = y.dim();
        let (y, bn1) = self.bn1.forward(as_rows(&y), mode);
        let act1 = relu(y.into_shape_with_order(dim1).expect("contiguous"));
        let (p1, arg1) = max_pool2(act1.view());

        let (y, cols2) = self.conv2.forward(p1.view());
        let dim2 = y.dim();
        let (y, bn2) = self.bn2.forward(as_rows(&y), mode);
        let act2 = relu(y.into_shape_with_order(dim2).expect("contiguous"));
        let (p2, arg2) = max_pool2(act2.view());

        let n = p2.dim().0;
        let flat = p2.into_shape_with_order((n, self.config.flat_dim())).expect("contiguous");
        let z = self.fc.forward(flat.view());
        Ok((
            z,
            EncoderCache {
                cols1,
                bn1,
                act1,
                arg1,
                cols2,
                bn2,
                act2,
                arg2,
                flat,
            },
        ))
    }

    /// Accumulates parameter gradients from `dL/dz`.
    pub fn backward(&mut self, cache: EncoderCache<F>, dz: ArrayView2<'_, F>) {
        let dflat = self.fc.backward(cache.flat.view(), dz);
        let (n, h2, w2, c2) = cache.act2.dim();
        let dp2 = dflat
            .into_shape_with_order((n, h2 / 2, w2 / 2, c2))
            .expect("contiguous");
        let da2 = max_pool2_backward(&cache.arg2, dp2.view(), cache.act2.dim());
        let da2 = relu_backward(&cache.act2, da2);
        let dy2 = self.bn2.backward(&cache.bn2, as_rows(&da2));
        let dy2 = dy2.into_shape_with_order(cache.act2.dim()).expect("contiguous");
        let dp1 = self.conv2.backward(&cache.cols2, dy2.view());

        let da1 = max_pool2_backward(&cache.arg1, dp1.view(), cache.act1.dim());
        let da1 = relu_backward(&cache.act1, da1);
        let dy1 = self.bn1.backward(&cache.bn1, as_rows(&da1));
        let dy1 = dy1.into_shape_with_order(cache.act1.dim()).expect("contiguous");
        // input gradient is not needed
        let c1 = self.conv1.c_out();
        let rows = dy1
            .view()
            .into_shape_with_order((dy1.len() / c1, c1))
            .expect("contiguous");
        let mut gw = self.conv1.weight.g2();
        ndarray::linalg::general_mat_mul(F::one(), &cache.cols1.t(), &rows, F::one(), &mut gw);
        let mut gb = self.conv1.bias.g1();
        gb += &rows.sum_axis(ndarray::Axis(0));
    }
}

impl<F: Scalar> Module<F> for Encoder<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        self.fc.visit(&join(prefix, "fc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        self.fc.visit_mut(&join(prefix, "fc"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{s, Array};
    use rand::SeedableRng;

    fn config() -> EncoderConfig {
        EncoderConfig {
            links: 3,
            subcarriers: 30,
            frames: 10,
            channels: [4, 8],
            embed_dim: 16,
        }
    }

    fn windows(b: usize) -> Array4<f32> {
        Array::from_shape_fn((b, 3, 30, 10), |(n, a, s, f)| {
            ((n * 31 + a * 17 + s * 7 + f * 3) % 13) as f32 * 0.1
        })
    }

    #[test]
    fn output_shape_and_shape_errors() {
        let enc = Encoder::<f32>::new(config(), &mut Rng::seed_from_u64(0)).unwrap();
        assert_eq!(enc.encode(windows(5).view()).unwrap().dim(), (5, 16));
        let bad = Array4::<f32>::zeros((2, 3, 30, 9));
        assert!(enc.encode(bad.view()).is_err());
    }

    #[test]
    fn zero_input_is_finite() {
        let enc = Encoder::<f32>::new(config(), &mut Rng::seed_from_u64(0)).unwrap();
        let z = enc.encode(Array4::zeros((2, 3, 30, 10)).view()).unwrap();
        assert!(z.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn batch_of_one_matches_batch_row() {
        let mut enc = Encoder::<f32>::new(config(), &mut Rng::seed_from_u64(0)).unwrap();
        // move running statistics away from their initial values
        enc.forward(windows(6).view(), Mode::Train).unwrap();
        let x = windows(6);
        let all = enc.encode(x.view()).unwrap();
        for i in 0..6 {
            let one = enc.encode(x.slice(s![i..i + 1, .., .., ..])).unwrap();
            for (a, b) in one.row(0).iter().zip(all.row(i)) {
                assert!((a - b).abs() <= 1e-5);
            }
        }
        let (by_forward, _) = enc.forward(x.view(), Mode::Eval).unwrap();
        assert_eq!(by_forward, all);
    }

    #[test]
    fn too_small_windows_are_rejected() {
        let mut c = config();
        c.frames = 3;
        assert!(Encoder::<f32>::new(c, &mut Rng::seed_from_u64(0)).is_err());
    }
}
