use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use crate::{Error, Result};

/// Layer normalization over the feature dimension with learned scale/shift.
///
/// `y = gamma * (x - mean(x)) / sqrt(var(x) + eps) + beta`, where `var` is the
/// population variance of the features of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    gamma: Array1<f64>,
    beta: Array1<f64>,
    epsilon: f64,
}

#[derive(Debug, Clone)]
pub struct LnCache {
    /// Pre-affine output `(x - mean) * rstd`.
    pub normalized: Vec<f64>,
    pub mean: f64,
    pub var: f64,
    pub rstd: f64,
}

#[derive(Debug, Clone)]
pub struct LnBatchCache {
    pub normalized: Array2<f64>,
    pub rstd: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LnGrads {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LnGrads {
    pub fn zeros(dim: usize) -> Self {
        Self {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn add_assign(&mut self, other: &LnGrads) {
        self.gamma += &other.gamma;
        self.beta += &other.beta;
    }
}

impl LayerNorm {
    pub const DEFAULT_EPSILON: f64 = 1e-5;

    pub fn new(dim: usize, epsilon: f64) -> Result<Self> {
        Self::from_parts(Array1::ones(dim), Array1::zeros(dim), epsilon)
    }

    pub fn from_parts(gamma: Array1<f64>, beta: Array1<f64>, epsilon: f64) -> Result<Self> {
        if gamma.len() != beta.len() {
            return Err(Error::shape(gamma.len(), beta.len(), "layernorm beta"));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Domain(format!(
                "layernorm epsilon must be > 0, got {epsilon}"
            )));
        }
        Ok(Self {
            gamma,
            beta,
            epsilon,
        })
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn gamma(&self) -> &Array1<f64> {
        &self.gamma
    }

    pub fn beta(&self) -> &Array1<f64> {
        &self.beta
    }

    pub fn gamma_mut(&mut self) -> &mut Array1<f64> {
        &mut self.gamma
    }

    /// `(gamma, beta)` borrowed together.
    pub fn params_mut(&mut self) -> (&mut Array1<f64>, &mut Array1<f64>) {
        (&mut self.gamma, &mut self.beta)
    }

    pub fn beta_mut(&mut self) -> &mut Array1<f64> {
        &mut self.beta
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, LnCache)> {
        if x.len() != self.dim() {
            return Err(Error::shape(self.dim(), x.len(), "layernorm input"));
        }
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rstd = 1.0 / (var + self.epsilon).sqrt();
        let normalized: Vec<f64> = x.iter().map(|v| (v - mean) * rstd).collect();
        let y = normalized
            .iter()
            .zip(self.gamma.iter().zip(self.beta.iter()))
            .map(|(h, (g, b))| g * h + b)
            .collect();
        Ok((
            y,
            LnCache {
                normalized,
                mean,
                var,
                rstd,
            },
        ))
    }

    /// Returns `(grad_x, grads)`.
    pub fn backward(&self, cache: &LnCache, grad_out: &[f64]) -> Result<(Vec<f64>, LnGrads)> {
        let d = self.dim();
        if grad_out.len() != d || cache.normalized.len() != d {
            return Err(Error::shape(d, grad_out.len(), "layernorm grad_out"));
        }
        let n = d as f64;
        let gh: Vec<f64> = grad_out
            .iter()
            .zip(self.gamma.iter())
            .map(|(g, w)| g * w)
            .collect();
        let mean_gh = gh.iter().sum::<f64>() / n;
        let mean_gh_h = gh
            .iter()
            .zip(&cache.normalized)
            .map(|(a, h)| a * h)
            .sum::<f64>()
            / n;
        let grad_x = gh
            .iter()
            .zip(&cache.normalized)
            .map(|(a, h)| cache.rstd * (a - mean_gh - h * mean_gh_h))
            .collect();
        let gamma = grad_out
            .iter()
            .zip(&cache.normalized)
            .map(|(g, h)| g * h)
            .collect();
        Ok((
            grad_x,
            LnGrads {
                gamma,
                beta: Array1::from(grad_out.to_vec()),
            },
        ))
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, LnBatchCache)> {
        if x.ncols() != self.dim() {
            return Err(Error::shape(self.dim(), x.ncols(), "layernorm batch input"));
        }
        let mut normalized = x.to_owned();
        let mut rstd = Array1::zeros(x.nrows());
        let n = self.dim() as f64;
        Zip::from(normalized.rows_mut())
            .and(&mut rstd)
            .for_each(|mut row, r| {
                let mean = row.iter().sum::<f64>() / n;
                row.mapv_inplace(|v| v - mean);
                let var = row.iter().map(|v| v * v).sum::<f64>() / n;
                *r = 1.0 / (var + self.epsilon).sqrt();
                let s = *r;
                row.mapv_inplace(|v| v * s);
            });
        let y = &normalized * &self.gamma + &self.beta;
        Ok((y, LnBatchCache { normalized, rstd }))
    }

    /// Parameter gradients are summed over the batch.
    pub fn backward_batch(
        &self,
        cache: &LnBatchCache,
        grad_out: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, LnGrads)> {
        if grad_out.dim() != cache.normalized.dim() || grad_out.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "layernorm batch backward: grad {:?}, cache {:?}",
                grad_out.dim(),
                cache.normalized.dim()
            )));
        }
        let n = self.dim() as f64;
        let gamma = (&grad_out * &cache.normalized).sum_axis(Axis(0));
        let beta = grad_out.sum_axis(Axis(0));
        let mut grad_x = &grad_out * &self.gamma;
        Zip::from(grad_x.rows_mut())
            .and(cache.normalized.rows())
            .and(&cache.rstd)
            .for_each(|mut gh, h, &r| {
                let mean_gh = gh.sum() / n;
                let mean_gh_h = gh.iter().zip(h.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                Zip::from(&mut gh).and(&h).for_each(|a, &hv| {
                    *a = r * (*a - mean_gh - hv * mean_gh_h);
                });
            });
        Ok((grad_x, LnGrads { gamma, beta }))
    }
}
