use ndarray::{Array2, ArrayView2};

use super::layers::{join, relu, relu_backward, Linear, Module, Param};
use crate::error::{CapcError, Result};
use crate::scalar::Scalar;
use crate::seed::Rng;

/// `T` maps `R^H -> R^D`, head `k` predicting the window `k` steps ahead.
/// Shared between branches. Biases start at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionHeads<F> {
    pub heads: Vec<Linear<F>>,
}

impl<F: Scalar> PredictionHeads<F> {
    pub fn new(horizon: usize, hidden: usize, embed: usize, rng: &mut Rng) -> Self {
        Self {
            heads: (0..horizon).map(|_| Linear::new(hidden, embed, rng)).collect(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.heads.len()
    }

    fn check(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.horizon() {
            return Err(CapcError::invalid(format!(
                "prediction offset {k} outside 1..={}",
                self.horizon()
            )));
        }
        Ok(())
    }

    /// `W_k c_t` for `k` in `1..=T`.
    pub fn predict_future(&self, c: ArrayView2<'_, F>, k: usize) -> Result<Array2<F>> {
        self.check(k)?;
        Ok(self.heads[k - 1].forward(c))
    }

    pub fn head_mut(&mut self, k: usize) -> Result<&mut Linear<F>> {
        self.check(k)?;
        Ok(&mut self.heads[k - 1])
    }
}

impl<F: Scalar> Module<F> for PredictionHeads<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        for (k, h) in self.heads.iter().enumerate() {
            h.visit(&join(prefix, &format!("{}", k + 1)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (k, h) in self.heads.iter_mut().enumerate() {
            h.visit_mut(&join(prefix, &format!("{}", k + 1)), f);
        }
    }
}

/// Three affine layers with ReLU in between; used by the window-level
/// Barlow-Twins-only baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector<F> {
    pub layers: [Linear<F>; 3],
}

pub struct ProjectorCache<F> {
    x: Array2<F>,
    a1: Array2<F>,
    a2: Array2<F>,
}

impl<F: Scalar> Projector<F> {
    pub fn new(input: usize, width: usize, rng: &mut Rng) -> Self {
        Self {
            layers: [
                Linear::new(input, width, rng),
                Linear::new(width, width, rng),
                Linear::new(width, width, rng),
            ],
        }
    }

    pub fn project(&self, z: ArrayView2<'_, F>) -> Array2<F> {
        self.forward(z).0
    }

    pub fn forward(&self, z: ArrayView2<'_, F>) -> (Array2<F>, ProjectorCache<F>) {
        let a1 = relu(self.layers[0].forward(z));
        let a2 = relu(self.layers[1].forward(a1.view()));
        let y = self.layers[2].forward(a2.view());
        (
            y,
            ProjectorCache {
                x: z.to_owned(),
                a1,
                a2,
            },
        )
    }

    pub fn backward(&mut self, cache: &ProjectorCache<F>, dy: ArrayView2<'_, F>) -> Array2<F> {
        let d2 = self.layers[2].backward(cache.a2.view(), dy);
        let d2 = relu_backward(&cache.a2, d2);
        let d1 = self.layers[1].backward(cache.a1.view(), d2.view());
        let d1 = relu_backward(&cache.a1, d1);
        self.layers[0].backward(cache.x.view(), d1.view())
    }
}

impl<F: Scalar> Module<F> for Projector<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("fc{}", i + 1)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("fc{}", i + 1)), f);
        }
    }
}

/// Downstream classifier over concatenated window embeddings: an affine
/// hidden layer of half the input width, ReLU, and an affine output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier<F> {
    pub hidden: Linear<F>,
    pub output: Linear<F>,
}

pub struct ClassifierCache<F> {
    x: Array2<F>,
    a: Array2<F>,
}

impl<F: Scalar> LinearClassifier<F> {
    pub fn new(input: usize, classes: usize, rng: &mut Rng) -> Result<Self> {
        if input < 2 || classes == 0 {
            return Err(CapcError::invalid(
                "classifier needs input width >= 2 and at least one class",
            ));
        }
        let hidden = input / 2;
        Ok(Self {
            hidden: Linear::new(input, hidden, rng),
            output: Linear::new(hidden, classes, rng),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.output_dim()
    }

    pub fn classes(&self) -> usize {
        self.output.output_dim()
    }

    fn check(&self, x: &ArrayView2<'_, F>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(CapcError::invalid(format!(
                "classifier expects width {}, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    pub fn classify(&self, x: ArrayView2<'_, F>) -> Result<Array2<F>> {
        Ok(self.forward(x)?.0)
    }

    pub fn forward(&self, x: ArrayView2<'_, F>) -> Result<(Array2<F>, ClassifierCache<F>)> {
        self.check(&x)?;
        let a = relu(self.hidden.forward(x));
        let logits = self.output.forward(a.view());
        Ok((
            logits,
            ClassifierCache {
                x: x.to_owned(),
                a,
            },
        ))
    }

    pub fn backward(&mut self, cache: &ClassifierCache<F>, dlogits: ArrayView2<'_, F>) -> Array2<F> {
        let da = self.output.backward(cache.a.view(), dlogits);
        let da = relu_backward(&cache.a, da);
        self.hidden.backward(cache.x.view(), da.view())
    }
}

impl<F: Scalar> Module<F> for LinearClassifier<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_context_predicts_zero() {
        let heads = PredictionHeads::<f64>::new(3, 4, 5, &mut Rng::seed_from_u64(1));
        let p = heads.predict_future(Array2::zeros((2, 4)).view(), 2).unwrap();
        assert_eq!(p.dim(), (2, 5));
        assert!(p.iter().all(|v| *v == 0.0));
        assert!(heads.predict_future(Array2::zeros((2, 4)).view(), 0).is_err());
        assert!(heads.predict_future(Array2::zeros((2, 4)).view(), 4).is_err());
    }

    #[test]
    fn heads_are_independent() {
        let mut rng = Rng::seed_from_u64(1);
        let heads = PredictionHeads::<f64>::new(3, 4, 5, &mut rng);
        let c = super::super::layers::Param::<f64>::uniform(
            &[2, 4],
            1.0,
            super::super::layers::ParamKind::Weight,
            &mut rng,
        );
        let c = c.v2();
        let p1 = heads.predict_future(c, 1).unwrap();
        let p2 = heads.predict_future(c, 2).unwrap();
        assert!((&p1 - &p2).iter().any(|v| v.abs() > 1e-9));
    }

    #[test]
    fn classifier_dims() {
        let mut rng = Rng::seed_from_u64(2);
        let cls = LinearClassifier::<f32>::new(2560, 276, &mut rng).unwrap();
        assert_eq!(cls.hidden_dim(), 1280);
        assert_eq!(cls.classes(), 276);
        let x = Array2::<f32>::ones((3, 2560));
        let logits = cls.classify(x.view()).unwrap();
        assert_eq!(logits.dim(), (3, 276));
        assert!(logits.iter().all(|v| v.is_finite()));
        assert!(cls.classify(Array2::<f32>::ones((3, 2559)).view()).is_err());
        let ut = LinearClassifier::<f32>::new(2560, 7, &mut rng).unwrap();
        assert_eq!(ut.classes(), 7);
    }

    #[test]
    fn projector_zero_in_zero_out() {
        let p = Projector::<f64>::new(8, 128, &mut Rng::seed_from_u64(3));
        let y = p.project(Array2::zeros((4, 8)).view());
        assert_eq!(y.dim(), (4, 128));
        assert!(y.iter().all(|v| *v == 0.0));
        let mut rng = Rng::seed_from_u64(4);
        let x = super::super::layers::Param::<f64>::uniform(
            &[4, 8],
            3.0,
            super::super::layers::ParamKind::Weight,
            &mut rng,
        );
        assert!(p.project(x.v2()).iter().all(|v| v.is_finite()));
    }
}
