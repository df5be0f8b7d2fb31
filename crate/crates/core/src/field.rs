//! The neural field `p ↦ μ`: hash grid, channel mask, optional layer norm and
//! MLP, plus sectioned checkpoints and the feature-drift stability probe.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::encoding::{ChannelMask, EncodeTrace, HashGrid, HashGridConfig, SparseGrad};
use crate::nn::{
    Activation, LayerNorm, LinearLayer, LnBatchCache, LnCache, LnGrads, Mlp, MlpBatchCache,
    MlpCache, MlpGrads,
};
use crate::rng::{stream, SeedStream};
use crate::{Error, Result, Vec3};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"NFCK";

/// Nonlinearity applied to the MLP output to produce μ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    #[default]
    Identity,
    Softplus,
}

impl OutputActivation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Self::Identity => z,
            Self::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Self::Identity => 1.0,
            Self::Softplus => 1.0 / (1.0 + (-z).exp()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub grid: HashGridConfig,
    pub use_ln: bool,
    pub ln_epsilon: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub output: OutputActivation,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            grid: HashGridConfig::default(),
            use_ln: true,
            ln_epsilon: LayerNorm::DEFAULT_EPSILON,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            output: OutputActivation::Identity,
        }
    }
}

/// Trainable parameter tensors, in optimizer order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    LnGamma,
    LnBeta,
    MlpWeight(usize),
    MlpBias(usize),
}

impl ParamGroup {
    /// LN and MLP groups: the part transferred by MCI.
    pub fn is_head(self) -> bool {
        !matches!(self, ParamGroup::Encoder)
    }

    pub fn name(self) -> String {
        match self {
            ParamGroup::Encoder => "encoder.tables".into(),
            ParamGroup::LnGamma => "layernorm.gamma".into(),
            ParamGroup::LnBeta => "layernorm.beta".into(),
            ParamGroup::MlpWeight(k) => format!("mlp.{k}.weight"),
            ParamGroup::MlpBias(k) => format!("mlp.{k}.bias"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldModel {
    grid: HashGrid,
    mask: ChannelMask,
    ln: Option<LayerNorm>,
    mlp: Mlp,
    output: OutputActivation,
    provenance: String,
}

/// Per-stage caches of one `eval` call.
#[derive(Debug, Clone)]
pub struct FieldTrace {
    pub encode: EncodeTrace,
    /// Post-mask, pre-LN features.
    pub features: Vec<f64>,
    ln: Option<LnCache>,
    mlp: MlpCache,
    pre_output: f64,
}

/// Caches of one `forward_batch` call over `P` points.
#[derive(Debug, Clone)]
pub struct BatchTrace {
    indices: Vec<u32>,
    weights: Vec<f64>,
    pub features: Array2<f64>,
    ln: Option<LnBatchCache>,
    mlp: MlpBatchCache,
    pre_output: Array1<f64>,
}

impl BatchTrace {
    pub fn len(&self) -> usize {
        self.pre_output.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pre_output.is_empty()
    }
}

/// Gradient of one point's μ.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldPointGrads {
    pub grid: SparseGrad,
    pub ln: Option<LnGrads>,
    pub mlp: MlpGrads,
}

impl FieldPointGrads {
    pub fn is_zero(&self) -> bool {
        self.grid
            .levels
            .iter()
            .all(|l| l.values().all(|v| v.iter().all(|&x| x == 0.0)))
            && self
                .ln
                .as_ref()
                .is_none_or(|g| g.gamma.iter().chain(g.beta.iter()).all(|&x| x == 0.0))
            && self
                .mlp
                .layers
                .iter()
                .all(|l| l.weights.iter().chain(l.bias.iter()).all(|&x| x == 0.0))
    }
}

/// Dense gradient accumulator shaped like the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrads {
    pub grid: Vec<f64>,
    pub ln: Option<LnGrads>,
    pub mlp: MlpGrads,
}

impl FieldGrads {
    pub fn zeros(model: &FieldModel) -> Self {
        Self {
            grid: vec![0.0; model.grid.tables().len()],
            ln: model.ln.as_ref().map(|l| LnGrads::zeros(l.dim())),
            mlp: MlpGrads::zeros_like(&model.mlp),
        }
    }

    pub fn clear(&mut self) {
        self.grid.iter_mut().for_each(|v| *v = 0.0);
        if let Some(g) = &mut self.ln {
            g.gamma.fill(0.0);
            g.beta.fill(0.0);
        }
        self.mlp.scale(0.0);
    }

    pub fn scale(&mut self, s: f64) {
        self.grid.iter_mut().for_each(|v| *v *= s);
        if let Some(g) = &mut self.ln {
            g.gamma *= s;
            g.beta *= s;
        }
        self.mlp.scale(s);
    }

    pub fn add_point(&mut self, model: &FieldModel, g: &FieldPointGrads) {
        let f = model.grid.config().features_per_level;
        let t = model.grid.config().table_size;
        for (l, level) in g.grid.levels.iter().enumerate() {
            for (&idx, v) in level {
                let o = (l * t + idx as usize) * f;
                self.grid[o..o + f]
                    .iter_mut()
                    .zip(v)
                    .for_each(|(a, b)| *a += b);
            }
        }
        if let (Some(acc), Some(pg)) = (&mut self.ln, &g.ln) {
            acc.add_assign(pg);
        }
        self.mlp.add_assign(&g.mlp);
    }

    /// Flat gradient slices in the same order as [`FieldModel::parameters_mut`].
    pub fn groups(&self) -> Vec<(ParamGroup, &[f64])> {
        let mut out = vec![(ParamGroup::Encoder, self.grid.as_slice())];
        if let Some(g) = &self.ln {
            out.push((ParamGroup::LnGamma, g.gamma.as_slice().expect("contiguous")));
            out.push((ParamGroup::LnBeta, g.beta.as_slice().expect("contiguous")));
        }
        for (k, l) in self.mlp.layers.iter().enumerate() {
            out.push((
                ParamGroup::MlpWeight(k),
                l.weights.as_slice().expect("standard layout"),
            ));
            out.push((
                ParamGroup::MlpBias(k),
                l.bias.as_slice().expect("contiguous"),
            ));
        }
        out
    }
}

impl FieldModel {
    /// Fresh model: grid tables from the grid-init stream, MLP from the
    /// MLP-init stream, LN at identity.
    pub fn new(config: &FieldConfig, seeds: &SeedStream) -> Result<Self> {
        let grid = HashGrid::new(config.grid.clone(), &mut seeds.rng(stream::GRID_INIT))?;
        let dim = grid.output_dim();
        let ln = if config.use_ln {
            Some(LayerNorm::new(dim, config.ln_epsilon)?)
        } else {
            None
        };
        let mlp = Mlp::new(
            dim,
            &config.hidden,
            config.activation,
            &mut seeds.rng(stream::MLP_INIT),
        )?;
        Self::from_parts(grid, ChannelMask::all(dim), ln, mlp, config.output)
    }

    pub fn from_parts(
        grid: HashGrid,
        mask: ChannelMask,
        ln: Option<LayerNorm>,
        mlp: Mlp,
        output: OutputActivation,
    ) -> Result<Self> {
        let dim = grid.output_dim();
        if mask.len() != dim {
            return Err(Error::shape(dim, mask.len(), "channel mask"));
        }
        if let Some(l) = &ln {
            if l.dim() != dim {
                return Err(Error::shape(dim, l.dim(), "layer norm dim"));
            }
        }
        if mlp.in_dim() != dim {
            return Err(Error::shape(dim, mlp.in_dim(), "MLP input dim"));
        }
        Ok(Self {
            grid,
            mask,
            ln,
            mlp,
            output,
            provenance: "init".into(),
        })
    }

    pub fn config(&self) -> FieldConfig {
        let dims = self.mlp.layer_dims();
        FieldConfig {
            grid: self.grid.config().clone(),
            use_ln: self.ln.is_some(),
            ln_epsilon: self
                .ln
                .as_ref()
                .map_or(LayerNorm::DEFAULT_EPSILON, |l| l.epsilon()),
            hidden: dims[..dims.len() - 1].iter().map(|d| d.1).collect(),
            activation: self.mlp.activation(),
            output: self.output,
        }
    }

    pub fn grid(&self) -> &HashGrid {
        &self.grid
    }

    pub fn grid_mut(&mut self) -> &mut HashGrid {
        &mut self.grid
    }

    pub fn mask(&self) -> &ChannelMask {
        &self.mask
    }

    pub fn set_mask(&mut self, mask: ChannelMask) -> Result<()> {
        if mask.len() != self.feature_dim() {
            return Err(Error::shape(self.feature_dim(), mask.len(), "channel mask"));
        }
        self.mask = mask;
        Ok(())
    }

    pub fn ln(&self) -> Option<&LayerNorm> {
        self.ln.as_ref()
    }

    pub fn ln_mut(&mut self) -> Option<&mut LayerNorm> {
        self.ln.as_mut()
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn output(&self) -> OutputActivation {
        self.output
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn set_provenance(&mut self, provenance: impl Into<String>) {
        self.provenance = provenance.into();
    }

    pub fn feature_dim(&self) -> usize {
        self.grid.output_dim()
    }

    pub fn eval(&self, p: &Vec3) -> Result<(f64, FieldTrace)> {
        let (features, encode) = self.grid.encode(p, &self.mask)?;
        let (ln_out, ln) = match &self.ln {
            Some(l) => {
                let (y, c) = l.forward(&features)?;
                (y, Some(c))
            }
            None => (features.clone(), None),
        };
        let (z, mlp) = self.mlp.forward(&ln_out)?;
        let mu = self.output.apply(z);
        Ok((
            mu,
            FieldTrace {
                encode,
                features,
                ln,
                mlp,
                pre_output: z,
            },
        ))
    }

    pub fn backward(&self, trace: &FieldTrace, grad_mu: f64) -> Result<FieldPointGrads> {
        let gz = grad_mu * self.output.derivative(trace.pre_output);
        let (g_ln_out, mlp) = self.mlp.backward(&trace.mlp, gz)?;
        let (g_feat, ln) = match (&self.ln, &trace.ln) {
            (Some(l), Some(c)) => {
                let (gx, lg) = l.backward(c, &g_ln_out)?;
                (gx, Some(lg))
            }
            (None, None) => (g_ln_out, None),
            _ => {
                return Err(Error::Consistency(
                    "trace and model disagree on layer norm".into(),
                ))
            }
        };
        let grid = self
            .grid
            .encode_backward(&trace.encode, &g_feat, &self.mask)?;
        Ok(FieldPointGrads { grid, ln, mlp })
    }

    fn encode_rows(
        &self,
        points: &[Vec3],
        features: &mut Array2<f64>,
        indices: &mut [u32],
        weights: &mut [f64],
    ) -> Result<()> {
        let dim = self.feature_dim();
        let tl = self.grid.config().levels * 8;
        let flat = features.as_slice_mut().expect("standard layout");
        for (i, p) in points.iter().enumerate() {
            self.grid.encode_into(
                p,
                &self.mask,
                &mut flat[i * dim..(i + 1) * dim],
                &mut indices[i * tl..(i + 1) * tl],
                &mut weights[i * tl..(i + 1) * tl],
            )?;
        }
        Ok(())
    }

    /// Post-mask, pre-LN features, one row per point.
    pub fn encode_points(&self, points: &[Vec3]) -> Result<Array2<f64>> {
        let tl = self.grid.config().levels * 8;
        let mut features = Array2::zeros((points.len(), self.feature_dim()));
        let (mut idx, mut w) = (vec![0; tl], vec![0.0; tl]);
        let dim = self.feature_dim();
        let flat = features.as_slice_mut().expect("standard layout");
        for (i, p) in points.iter().enumerate() {
            self.grid.encode_into(
                p,
                &self.mask,
                &mut flat[i * dim..(i + 1) * dim],
                &mut idx,
                &mut w,
            )?;
        }
        Ok(features)
    }

    /// LN + MLP + output activation applied to stored features.
    pub fn head_predict(&self, features: Array2<f64>) -> Result<Array1<f64>> {
        if features.ncols() != self.feature_dim() {
            return Err(Error::DimMismatch {
                section: "features".into(),
                expected: self.feature_dim().to_string(),
                found: features.ncols().to_string(),
            });
        }
        let x = match &self.ln {
            Some(l) => l.forward_batch(features.view())?.0,
            None => features,
        };
        Ok(self.mlp.predict_batch(x)?.mapv(|z| self.output.apply(z)))
    }

    /// μ at many points, without caches.
    pub fn predict(&self, points: &[Vec3]) -> Result<Vec<f64>> {
        const CHUNK: usize = 4096;
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(CHUNK) {
            out.extend(self.head_predict(self.encode_points(chunk)?)?);
        }
        Ok(out)
    }

    pub fn forward_batch(&self, points: &[Vec3]) -> Result<(Array1<f64>, BatchTrace)> {
        let tl = self.grid.config().levels * 8;
        let mut features = Array2::zeros((points.len(), self.feature_dim()));
        let mut indices = vec![0u32; points.len() * tl];
        let mut weights = vec![0.0; points.len() * tl];
        self.encode_rows(points, &mut features, &mut indices, &mut weights)?;
        let (x, ln) = match &self.ln {
            Some(l) => {
                let (y, c) = l.forward_batch(features.view())?;
                (y, Some(c))
            }
            None => (features.clone(), None),
        };
        let (z, mlp) = self.mlp.forward_batch(x)?;
        let mu = z.mapv(|v| self.output.apply(v));
        Ok((
            mu,
            BatchTrace {
                indices,
                weights,
                features,
                ln,
                mlp,
                pre_output: z,
            },
        ))
    }

    /// Adds the gradient of `Σ grad_mu[i]·μ(p_i)` into `grads`.
    pub fn backward_batch(
        &self,
        trace: &BatchTrace,
        grad_mu: ArrayView1<f64>,
        grads: &mut FieldGrads,
    ) -> Result<()> {
        if grad_mu.len() != trace.len() {
            return Err(Error::shape(trace.len(), grad_mu.len(), "batch grad_mu"));
        }
        let gz = match self.output {
            OutputActivation::Identity => grad_mu.to_owned(),
            act => Array1::from_iter(
                grad_mu
                    .iter()
                    .zip(&trace.pre_output)
                    .map(|(&g, &z)| g * act.derivative(z)),
            ),
        };
        let (g_x, mlp) = self.mlp.backward_batch(&trace.mlp, gz.view())?;
        grads.mlp.add_assign(&mlp);
        let g_feat = match (&self.ln, &trace.ln) {
            (Some(l), Some(c)) => {
                let (gx, lg) = l.backward_batch(c, g_x.view())?;
                grads
                    .ln
                    .as_mut()
                    .ok_or_else(|| Error::Consistency("gradient bundle lacks layer norm".into()))?
                    .add_assign(&lg);
                gx
            }
            (None, None) => g_x,
            _ => {
                return Err(Error::Consistency(
                    "trace and model disagree on layer norm".into(),
                ))
            }
        };
        let tl = self.grid.config().levels * 8;
        let g_feat = g_feat.as_standard_layout();
        for (i, row) in g_feat.axis_iter(Axis(0)).enumerate() {
            self.grid.scatter_backward(
                &trace.indices[i * tl..(i + 1) * tl],
                &trace.weights[i * tl..(i + 1) * tl],
                row.as_slice().expect("row is contiguous"),
                &self.mask,
                &mut grads.grid,
            )?;
        }
        Ok(())
    }

    /// Mutable parameter slices, in the same order as [`FieldGrads::groups`].
    pub fn parameters_mut(&mut self) -> Vec<(ParamGroup, &mut [f64])> {
        let mut out: Vec<(ParamGroup, &mut [f64])> =
            vec![(ParamGroup::Encoder, self.grid.tables_mut())];
        if let Some(l) = &mut self.ln {
            let (g, b) = l.params_mut();
            out.push((ParamGroup::LnGamma, g.as_slice_mut().expect("contiguous")));
            out.push((ParamGroup::LnBeta, b.as_slice_mut().expect("contiguous")));
        }
        for (k, layer) in self.mlp.layers_mut().iter_mut().enumerate() {
            let (w, b) = layer.params_mut();
            out.push((
                ParamGroup::MlpWeight(k),
                w.as_slice_mut().expect("standard layout"),
            ));
            out.push((
                ParamGroup::MlpBias(k),
                b.as_slice_mut().expect("contiguous"),
            ));
        }
        out
    }

    pub fn parameters(&self) -> Vec<(ParamGroup, &[f64])> {
        let mut out: Vec<(ParamGroup, &[f64])> = vec![(ParamGroup::Encoder, self.grid.tables())];
        if let Some(l) = &self.ln {
            out.push((
                ParamGroup::LnGamma,
                l.gamma().as_slice().expect("contiguous"),
            ));
            out.push((ParamGroup::LnBeta, l.beta().as_slice().expect("contiguous")));
        }
        for (k, layer) in self.mlp.layers().iter().enumerate() {
            out.push((
                ParamGroup::MlpWeight(k),
                layer.weights().as_slice().expect("standard layout"),
            ));
            out.push((
                ParamGroup::MlpBias(k),
                layer.bias().as_slice().expect("contiguous"),
            ));
        }
        out
    }

    pub fn record_stability(&self, epoch: u64, points: &[Vec3]) -> Result<StabilityRecord> {
        let features = self.encode_points(points)?;
        let outputs = self.head_predict(features.clone())?;
        Ok(StabilityRecord {
            epoch,
            features,
            outputs,
        })
    }
}

pub fn field_eval(model: &FieldModel, p: &Vec3) -> Result<(f64, FieldTrace)> {
    model.eval(p)
}

pub fn field_backward(
    model: &FieldModel,
    trace: &FieldTrace,
    grad_mu: f64,
) -> Result<FieldPointGrads> {
    model.backward(trace, grad_mu)
}

/// Features captured at one epoch with the head's outputs at that time.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityRecord {
    pub epoch: u64,
    pub features: Array2<f64>,
    pub outputs: Array1<f64>,
}

/// Mean |current head output − recorded output| for every record.
pub fn stability_probe(
    records: &[StabilityRecord],
    model_now: &FieldModel,
) -> Result<Vec<(u64, f64)>> {
    records
        .iter()
        .map(|r| {
            if r.features.nrows() != r.outputs.len() {
                return Err(Error::shape(
                    r.features.nrows(),
                    r.outputs.len(),
                    "stability record outputs",
                ));
            }
            let now = model_now.head_predict(r.features.clone())?;
            let l1 = (&now - &r.outputs).mapv(f64::abs).mean().unwrap_or(0.0);
            Ok((r.epoch, l1))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Checkpoints

/// Run metadata stored alongside the parameters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: u64,
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderHeader {
    pub config: HashGridConfig,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNormHeader {
    pub dim: usize,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpHeader {
    /// `[in, out]` per layer.
    pub layer_dims: Vec<[usize; 2]>,
    pub activation: Activation,
    pub output: OutputActivation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionEntry {
    pub name: String,
    /// Byte offset from the start of the data block.
    pub offset: u64,
    /// Number of f64 values.
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub seed: u64,
    pub epoch: u64,
    pub provenance: String,
    pub encoder: EncoderHeader,
    pub layernorm: Option<LayerNormHeader>,
    pub mlp: MlpHeader,
    pub sections: Vec<SectionEntry>,
}

/// A parsed checkpoint file with lazily decoded sections.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    header: CheckpointHeader,
    data: Vec<u8>,
}

impl Checkpoint {
    pub fn from_model(model: &FieldModel, seed: u64, epoch: u64) -> Self {
        let mut sections = vec![];
        let mut data = vec![];
        for (group, values) in model.parameters() {
            sections.push(SectionEntry {
                name: group.name(),
                offset: data.len() as u64,
                length: values.len() as u64,
            });
            data.reserve(values.len() * 8);
            for v in values {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            seed,
            epoch,
            provenance: model.provenance.clone(),
            encoder: EncoderHeader {
                config: model.grid.config().clone(),
                mask: model.mask.keep().to_vec(),
            },
            layernorm: model.ln.as_ref().map(|l| LayerNormHeader {
                dim: l.dim(),
                epsilon: l.epsilon(),
            }),
            mlp: MlpHeader {
                layer_dims: model
                    .mlp
                    .layer_dims()
                    .iter()
                    .map(|&(i, o)| [i, o])
                    .collect(),
                activation: model.mlp.activation(),
                output: model.output,
            },
            sections,
        };
        Self { header, data }
    }

    pub fn header(&self) -> &CheckpointHeader {
        &self.header
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            seed: self.header.seed,
            epoch: self.header.epoch,
            provenance: self.header.provenance.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.header)
            .map_err(|e| Error::Config(format!("checkpoint header: {e}")))?;
        let mut out = Vec::with_capacity(8 + json.len() + self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::CorruptSection("magic".into()));
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let json = bytes
            .get(8..8 + len)
            .ok_or_else(|| Error::CorruptSection("header".into()))?;
        let value: serde_json::Value =
            serde_json::from_slice(json).map_err(|_| Error::CorruptSection("header".into()))?;
        let version = value
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::CorruptSection("header".into()))?;
        if version != CHECKPOINT_VERSION as u64 {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version as u32,
            });
        }
        let header: CheckpointHeader = serde_json::from_value(value)
            .map_err(|e| Error::CorruptSection(format!("header: {e}")))?;
        let data = bytes[8 + len..].to_vec();
        for s in &header.sections {
            let end = s.offset.checked_add(s.length.saturating_mul(8));
            if end.is_none_or(|e| e > data.len() as u64) || s.offset % 8 != 0 {
                return Err(Error::CorruptSection(s.name.clone()));
            }
        }
        Ok(Self { header, data })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn section(&self, name: &str) -> Result<Vec<f64>> {
        let s = self
            .header
            .sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::CorruptSection(format!("{name} (missing)")))?;
        let start = s.offset as usize;
        let bytes = &self.data[start..start + s.length as usize * 8];
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn layer_norm(&self) -> Result<Option<LayerNorm>> {
        let Some(h) = &self.header.layernorm else {
            return Ok(None);
        };
        let gamma = Array1::from(self.section("layernorm.gamma")?);
        let beta = Array1::from(self.section("layernorm.beta")?);
        if gamma.len() != h.dim || beta.len() != h.dim {
            return Err(Error::CorruptSection("layernorm".into()));
        }
        Ok(Some(LayerNorm::from_parts(gamma, beta, h.epsilon)?))
    }

    fn mlp(&self) -> Result<Mlp> {
        let mut layers = vec![];
        for (k, &[i, o]) in self.header.mlp.layer_dims.iter().enumerate() {
            let w = self.section(&format!("mlp.{k}.weight"))?;
            let b = self.section(&format!("mlp.{k}.bias"))?;
            let w = Array2::from_shape_vec((o, i), w)
                .map_err(|_| Error::CorruptSection(format!("mlp.{k}.weight")))?;
            if b.len() != o {
                return Err(Error::CorruptSection(format!("mlp.{k}.bias")));
            }
            layers.push(LinearLayer::from_parts(w, Array1::from(b))?);
        }
        Mlp::from_layers(layers, self.header.mlp.activation)
    }

    fn grid(&self) -> Result<(HashGrid, ChannelMask)> {
        let grid = HashGrid::from_tables(
            self.header.encoder.config.clone(),
            self.section("encoder.tables")?,
        )?;
        let mask = ChannelMask::from_keep(self.header.encoder.mask.clone())?;
        Ok((grid, mask))
    }

    /// The complete model described by the file.
    pub fn to_model(&self) -> Result<FieldModel> {
        let (grid, mask) = self.grid()?;
        let mut model = FieldModel::from_parts(
            grid,
            mask,
            self.layer_norm()?,
            self.mlp()?,
            self.header.mlp.output,
        )
        .map_err(|e| Error::CorruptSection(format!("inconsistent dims: {e}")))?;
        model.provenance = self.header.provenance.clone();
        Ok(model)
    }
}

fn dim_mismatch(
    section: &str,
    expected: impl std::fmt::Debug,
    found: impl std::fmt::Debug,
) -> Error {
    Error::DimMismatch {
        section: section.into(),
        expected: format!("{expected:?}"),
        found: format!("{found:?}"),
    }
}

pub fn save_checkpoint(model: &FieldModel, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let mut ck = Checkpoint::from_model(model, meta.seed, meta.epoch);
    if !meta.provenance.is_empty() {
        ck.header.provenance = meta.provenance.clone();
    }
    ck.write(path)
}

pub fn load_full(path: &Path) -> Result<(FieldModel, CheckpointMeta)> {
    let ck = Checkpoint::read(path)?;
    Ok((ck.to_model()?, ck.meta()))
}

impl FieldModel {
    /// Replaces every parameter from a checkpoint whose architecture must
    /// match this model exactly.
    pub fn restore_full(&mut self, path: &Path) -> Result<CheckpointMeta> {
        let ck = Checkpoint::read(path)?;
        let h = ck.header();
        if h.encoder.config != *self.grid.config() {
            return Err(dim_mismatch(
                "encoder",
                self.grid.config(),
                &h.encoder.config,
            ));
        }
        let loaded = ck.to_model()?;
        self.check_head_compatible(&loaded)?;
        *self = loaded;
        Ok(ck.meta())
    }

    fn check_head_compatible(&self, other: &FieldModel) -> Result<()> {
        let ln_dim = |m: &FieldModel| m.ln.as_ref().map(|l| l.dim());
        if ln_dim(self) != ln_dim(other) {
            return Err(dim_mismatch("layernorm", ln_dim(self), ln_dim(other)));
        }
        if self.mlp.layer_dims() != other.mlp.layer_dims() {
            return Err(dim_mismatch(
                "mlp",
                self.mlp.layer_dims(),
                other.mlp.layer_dims(),
            ));
        }
        if self.mlp.activation() != other.mlp.activation() || self.output != other.output {
            return Err(Error::Config(
                "checkpoint MLP activation differs from the model's".into(),
            ));
        }
        Ok(())
    }

    /// Loads only the LN and MLP sections. Encoder tables and the channel
    /// mask are left untouched, whatever encoder the checkpoint carries.
    pub fn load_mci(&mut self, path: &Path) -> Result<CheckpointMeta> {
        let ck = Checkpoint::read(path)?;
        let h = ck.header();
        let ln_dim = self.ln.as_ref().map(|l| l.dim());
        let ck_ln_dim = h.layernorm.as_ref().map(|l| l.dim);
        if ln_dim != ck_ln_dim {
            return Err(dim_mismatch("layernorm", ln_dim, ck_ln_dim));
        }
        let dims: Vec<[usize; 2]> = self.mlp.layer_dims().iter().map(|&(i, o)| [i, o]).collect();
        if dims != h.mlp.layer_dims {
            return Err(dim_mismatch("mlp", dims, &h.mlp.layer_dims));
        }
        let ln = ck.layer_norm()?;
        let mlp = ck.mlp()?;
        if mlp.activation() != self.mlp.activation() || h.mlp.output != self.output {
            return Err(Error::Config(
                "checkpoint MLP activation differs from the model's".into(),
            ));
        }
        self.ln = ln;
        self.mlp = mlp;
        self.provenance = format!("mci:{}", path.display());
        Ok(ck.meta())
    }
}

pub fn load_mci(mut model: FieldModel, path: &Path) -> Result<FieldModel> {
    model.load_mci(path)?;
    Ok(model)
}
