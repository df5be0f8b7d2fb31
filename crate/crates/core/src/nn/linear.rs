use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::{Error, Result};

/// Affine map `y = W x + b` with `W` stored as `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    weights: Array2<f64>,
    bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearGrads {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weights: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn add_assign(&mut self, other: &LinearGrads) {
        self.weights += &other.weights;
        self.bias += &other.bias;
    }
}

impl LinearLayer {
    /// Uniform Glorot initialization, zero bias.
    pub fn xavier<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit);
        let weights = Array2::from_shape_fn((out_dim, in_dim), |_| dist.sample(rng));
        Self {
            weights,
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weights: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn from_parts(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::shape(weights.nrows(), bias.len(), "linear bias"));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "linear layer parameters must be finite".into(),
            ));
        }
        let weights = weights.as_standard_layout().into_owned();
        Ok(Self { weights, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut Array2<f64> {
        &mut self.weights
    }

    /// `(weights, bias)` borrowed together.
    pub fn params_mut(&mut self) -> (&mut Array2<f64>, &mut Array1<f64>) {
        (&mut self.weights, &mut self.bias)
    }

    pub fn bias_mut(&mut self) -> &mut Array1<f64> {
        &mut self.bias
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::shape(self.in_dim(), x.len(), "linear input"));
        }
        let y = self.weights.dot(&ArrayView1::from(x)) + &self.bias;
        Ok(y.to_vec())
    }

    /// Returns `(grad_x, grads)` for the forward input `x`.
    pub fn backward(&self, x: &[f64], grad_out: &[f64]) -> Result<(Vec<f64>, LinearGrads)> {
        if x.len() != self.in_dim() {
            return Err(Error::shape(self.in_dim(), x.len(), "linear input"));
        }
        if grad_out.len() != self.out_dim() {
            return Err(Error::shape(
                self.out_dim(),
                grad_out.len(),
                "linear grad_out",
            ));
        }
        let g = ArrayView1::from(grad_out);
        let xv = ArrayView1::from(x);
        let weights = Array2::from_shape_fn((self.out_dim(), self.in_dim()), |(o, i)| g[o] * xv[i]);
        let grad_x = self.weights.t().dot(&g);
        Ok((
            grad_x.to_vec(),
            LinearGrads {
                weights,
                bias: g.to_owned(),
            },
        ))
    }

    /// Rows of `x` are samples.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_dim() {
            return Err(Error::shape(self.in_dim(), x.ncols(), "linear batch input"));
        }
        let mut y = x.dot(&self.weights.t());
        y += &self.bias;
        Ok(y)
    }

    /// Gradients are summed over the batch.
    pub fn backward_batch(
        &self,
        x: ArrayView2<f64>,
        grad_out: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, LinearGrads)> {
        if x.ncols() != self.in_dim()
            || grad_out.ncols() != self.out_dim()
            || x.nrows() != grad_out.nrows()
        {
            return Err(Error::Shape(format!(
                "linear batch backward: input {:?}, grad {:?}, layer {}x{}",
                x.dim(),
                grad_out.dim(),
                self.out_dim(),
                self.in_dim()
            )));
        }
        let weights = grad_out.t().dot(&x);
        let bias = grad_out.sum_axis(Axis(0));
        let grad_x = grad_out.dot(&self.weights);
        Ok((grad_x, LinearGrads { weights, bias }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use crate::testutil::{central_diff, max_rel_err};
    use ndarray::array;

    #[test]
    fn identity_passes_input_through() {
        let l = LinearLayer::from_parts(Array2::eye(2), Array1::zeros(2)).unwrap();
        assert_eq!(l.forward(&[3.0, -1.0]).unwrap(), vec![3.0, -1.0]);
    }

    #[test]
    fn zero_weights_return_bias() {
        let l = LinearLayer::from_parts(Array2::zeros((1, 3)), array![5.0]).unwrap();
        assert_eq!(l.forward(&[1.0, -7.0, 2.5]).unwrap(), vec![5.0]);
    }

    #[test]
    fn hand_multiply() {
        let l = LinearLayer::from_parts(array![[1.0, 2.0], [3.0, 4.0]], array![1.0, 1.0]).unwrap();
        assert_eq!(l.forward(&[1.0, 1.0]).unwrap(), vec![4.0, 8.0]);
    }

    #[test]
    fn shape_errors() {
        let l = LinearLayer::zeros(2, 3);
        assert!(matches!(l.forward(&[1.0]), Err(Error::Shape(_))));
        assert!(matches!(
            l.backward(&[1.0, 2.0], &[1.0]),
            Err(Error::Shape(_))
        ));
        assert!(LinearLayer::from_parts(Array2::zeros((2, 2)), Array1::zeros(3)).is_err());
    }

    #[test]
    fn backward_trivial_cases() {
        let l = LinearLayer::from_parts(Array2::eye(2), Array1::zeros(2)).unwrap();
        let (gx, _) = l.backward(&[0.3, 0.4], &[1.0, 0.0]).unwrap();
        assert_eq!(gx, vec![1.0, 0.0]);

        let l = LinearLayer::from_parts(array![[1.0, -2.0], [0.5, 4.0]], array![0.1, 0.2]).unwrap();
        let (_, g) = l.backward(&[0.0, 0.0], &[3.0, -1.0]).unwrap();
        assert!(g.weights.iter().all(|&w| w == 0.0));
        assert_eq!(g.bias.to_vec(), vec![3.0, -1.0]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..100 {
            let mut rng = SeedStream::new(seed).rng(0);
            let l = LinearLayer::xavier(4, 3, &mut rng);
            let x: Vec<f64> = (0..4)
                .map(|i| (i as f64 * 0.7 + seed as f64).sin())
                .collect();
            let probe = [0.3, -1.2, 0.8];
            let loss = |layer: &LinearLayer, x: &[f64]| -> f64 {
                layer
                    .forward(x)
                    .unwrap()
                    .iter()
                    .zip(probe)
                    .map(|(y, p)| y * p)
                    .sum()
            };
            let (gx, g) = l.backward(&x, &probe).unwrap();

            let num_x = central_diff(&x, 1e-6, |xs| loss(&l, xs));
            assert!(max_rel_err(&gx, &num_x) < 1e-6, "seed {seed}");

            let w0 = l.weights().as_slice().unwrap().to_vec();
            let num_w = central_diff(&w0, 1e-6, |ws| {
                let mut m = l.clone();
                m.weights_mut().as_slice_mut().unwrap().copy_from_slice(ws);
                loss(&m, &x)
            });
            assert!(max_rel_err(g.weights.as_slice().unwrap(), &num_w) < 1e-6);

            let b0 = l.bias().to_vec();
            let num_b = central_diff(&b0, 1e-6, |bs| {
                let mut m = l.clone();
                m.bias_mut().as_slice_mut().unwrap().copy_from_slice(bs);
                loss(&m, &x)
            });
            assert!(max_rel_err(g.bias.as_slice().unwrap(), &num_b) < 1e-6);
        }
    }

    #[test]
    fn batch_matches_per_sample() {
        let mut rng = SeedStream::new(3).rng(0);
        let l = LinearLayer::xavier(5, 4, &mut rng);
        let x = Array2::from_shape_fn((7, 5), |(r, c)| ((r * 5 + c) as f64).cos());
        let g = Array2::from_shape_fn((7, 4), |(r, c)| ((r + 2 * c) as f64).sin());
        let y = l.forward_batch(x.view()).unwrap();
        let (gx, grads) = l.backward_batch(x.view(), g.view()).unwrap();
        let mut acc = LinearGrads::zeros(5, 4);
        for r in 0..7 {
            let yr = l.forward(x.row(r).as_slice().unwrap()).unwrap();
            for (a, b) in yr.iter().zip(y.row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
            let (gxr, gr) = l
                .backward(x.row(r).as_slice().unwrap(), g.row(r).as_slice().unwrap())
                .unwrap();
            for (a, b) in gxr.iter().zip(gx.row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
            acc.add_assign(&gr);
        }
        assert!((&acc.weights - &grads.weights)
            .iter()
            .all(|d| d.abs() < 1e-12));
        assert!((&acc.bias - &grads.bias).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn forward_is_bitwise_repeatable() {
        let mut rng = SeedStream::new(11).rng(0);
        let l = LinearLayer::xavier(6, 6, &mut rng);
        let x = [0.1, 0.2, -0.3, 0.4, 0.5, -0.6];
        let a = l.forward(&x).unwrap();
        let b = l.forward(&x).unwrap();
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
