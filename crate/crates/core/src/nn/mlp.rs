use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linear::{LinearGrads, LinearLayer};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    /// Negative slope 0.01.
    LeakyRelu,
}

impl Activation {
    const LEAKY_SLOPE: f64 = 0.01;

    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::LeakyRelu => {
                if z > 0.0 {
                    z
                } else {
                    Self::LEAKY_SLOPE * z
                }
            }
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match (self, z > 0.0) {
            (_, true) => 1.0,
            (Activation::Relu, false) => 0.0,
            (Activation::LeakyRelu, false) => Self::LEAKY_SLOPE,
        }
    }
}

/// Feed-forward network with a scalar output. The activation is applied
/// between layers and never after the last one.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<LinearLayer>,
    activation: Activation,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct MlpBatchCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LinearGrads>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| LinearGrads::zeros(l.in_dim(), l.out_dim()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights *= s;
            l.bias *= s;
        }
    }
}

impl Mlp {
    /// Xavier-initialized network `in_dim -> hidden... -> 1`.
    pub fn new<R: Rng + ?Sized>(
        in_dim: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if in_dim == 0 || hidden.contains(&0) {
            return Err(Error::Config("MLP dimensions must be positive".into()));
        }
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let layers = dims
            .windows(2)
            .map(|w| LinearLayer::xavier(w[0], w[1], rng))
            .collect();
        Ok(Self { layers, activation })
    }

    pub fn from_layers(layers: Vec<LinearLayer>, activation: Activation) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(Error::Config("MLP needs at least one layer".into()));
        };
        if last.out_dim() != 1 {
            return Err(Error::shape(1, last.out_dim(), "MLP output dim"));
        }
        for (k, w) in layers.windows(2).enumerate() {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::Shape(format!(
                    "MLP layer {k} outputs {} but layer {} expects {}",
                    w[0].out_dim(),
                    k + 1,
                    w[1].in_dim()
                )));
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[LinearLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LinearLayer] {
        &mut self.layers
    }

    /// `(in, out)` per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .map(|l| (l.in_dim(), l.out_dim()))
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<(f64, MlpCache)> {
        if x.len() != self.in_dim() {
            return Err(Error::shape(self.in_dim(), x.len(), "MLP input"));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut h = x.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h)?;
            inputs.push(std::mem::take(&mut h));
            if k == last {
                return Ok((z[0], MlpCache { inputs, pre }));
            }
            h = z.iter().map(|&v| self.activation.apply(v)).collect();
            pre.push(z);
        }
        unreachable!("MLP has at least one layer")
    }

    /// Returns `(grad_input, grads)`.
    pub fn backward(&self, cache: &MlpCache, grad_out: f64) -> Result<(Vec<f64>, MlpGrads)> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::shape(
                self.layers.len(),
                cache.inputs.len(),
                "MLP cache depth",
            ));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = vec![grad_out];
        for k in (0..self.layers.len()).rev() {
            if k < self.layers.len() - 1 {
                for (gi, &z) in g.iter_mut().zip(&cache.pre[k]) {
                    *gi *= self.activation.derivative(z);
                }
            }
            let (gx, lg) = self.layers[k].backward(&cache.inputs[k], &g)?;
            grads.push(lg);
            g = gx;
        }
        grads.reverse();
        Ok((g, MlpGrads { layers: grads }))
    }

    /// Rows of `x` are samples; returns one output per row.
    pub fn forward_batch(&self, x: Array2<f64>) -> Result<(Array1<f64>, MlpBatchCache)> {
        if x.ncols() != self.in_dim() {
            return Err(Error::shape(self.in_dim(), x.ncols(), "MLP batch input"));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut h = x;
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.forward_batch(h.view())?;
            inputs.push(h);
            if k == last {
                let out = z.index_axis_move(Axis(1), 0);
                return Ok((out, MlpBatchCache { inputs, pre }));
            }
            h = z.mapv(|v| self.activation.apply(v));
            pre.push(z);
        }
        unreachable!("MLP has at least one layer")
    }

    /// Inference only, no cache.
    pub fn predict_batch(&self, x: Array2<f64>) -> Result<Array1<f64>> {
        if x.ncols() != self.in_dim() {
            return Err(Error::shape(self.in_dim(), x.ncols(), "MLP batch input"));
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.forward_batch(h.view())?;
            if k == last {
                return Ok(z.index_axis_move(Axis(1), 0));
            }
            h = z.mapv(|v| self.activation.apply(v));
        }
        unreachable!("MLP has at least one layer")
    }

    /// Parameter gradients are summed over the batch.
    pub fn backward_batch(
        &self,
        cache: &MlpBatchCache,
        grad_out: ArrayView1<f64>,
    ) -> Result<(Array2<f64>, MlpGrads)> {
        let batch = cache.inputs.first().map_or(0, |a| a.nrows());
        if grad_out.len() != batch {
            return Err(Error::shape(batch, grad_out.len(), "MLP batch grad_out"));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.to_owned().insert_axis(Axis(1));
        for k in (0..self.layers.len()).rev() {
            if k < self.layers.len() - 1 {
                let act = self.activation;
                g.zip_mut_with(&cache.pre[k], |gi, &z| *gi *= act.derivative(z));
            }
            let (gx, lg) = self.layers[k].backward_batch(cache.inputs[k].view(), g.view())?;
            grads.push(lg);
            g = gx;
        }
        grads.reverse();
        Ok((g, MlpGrads { layers: grads }))
    }
}
