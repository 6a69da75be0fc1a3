//! Layer graphs with gates attached at weight, neuron or filter granularity.
//!
//! Neuron and filter gates scale a layer's output (bias included), so a
//! disabled unit contributes exactly nothing downstream. Weight gates scale
//! the weight tensor entrywise. A neuron gate on a `flatten` layer gates the
//! flattened features individually.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::gates::{
    self, GateError, GateTarget, GateVars, Granularity, Partition, PartitionConfig,
};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("layer {layer}: {detail}")]
    Shape { layer: usize, detail: String },
    #[error("layer {layer}: {granularity:?} gates are not supported on {kind} layers")]
    IncompatibleGate {
        layer: usize,
        granularity: Granularity,
        kind: &'static str,
    },
    #[error("layer {layer}: gated group count {count} is below 2")]
    GroupTooSmall { layer: usize, count: usize },
    #[error("layer {layer}: every unit is pruned, the network is disconnected")]
    Disconnected { layer: usize },
    #[error("layer {layer}: feature gate has no downstream dense layer to fold into")]
    NotFoldable { layer: usize },
    #[error("layer {layer}: {source}")]
    Gate { layer: usize, source: GateError },
    #[error("batch of shape {got:?} does not match model input {expected:?}")]
    Input {
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    Maxpool2d,
    Relu,
    Flatten,
    /// Keeps the listed features of a 1-D activation. Emitted by pruning.
    Select {
        indices: Vec<usize>,
    },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Dense { .. } => "dense",
            Self::Conv2d { .. } => "conv2d",
            Self::Maxpool2d => "maxpool2d",
            Self::Relu => "relu",
            Self::Flatten => "flatten",
            Self::Select { .. } => "select",
        }
    }

    fn has_params(&self) -> bool {
        matches!(self, Self::Dense { .. } | Self::Conv2d { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSpec {
    pub granularity: Granularity,
    #[serde(flatten)]
    pub partition: PartitionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<GateSpec>,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        Self { kind, gate: None }
    }

    pub fn gated(kind: LayerKind, granularity: Granularity, partition: PartitionConfig) -> Self {
        Self {
            kind,
            gate: Some(GateSpec {
                granularity,
                partition,
            }),
        }
    }

    pub fn dense(inputs: usize, outputs: usize) -> Self {
        Self::new(LayerKind::Dense { inputs, outputs })
    }

    pub fn conv2d(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self::new(LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn relu() -> Self {
        Self::new(LayerKind::Relu)
    }

    pub fn maxpool2d() -> Self {
        Self::new(LayerKind::Maxpool2d)
    }

    pub fn flatten() -> Self {
        Self::new(LayerKind::Flatten)
    }

    pub fn with_gate(mut self, granularity: Granularity, partition: PartitionConfig) -> Self {
        self.gate = Some(GateSpec {
            granularity,
            partition,
        });
        self
    }
}

/// Input shape (per example, without the batch axis) and ordered layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Dense ReLU network, e.g. `[784, 300, 100, 10]`. Every hidden layer
    /// gets a neuron gate when `gate` is given.
    pub fn mlp(sizes: &[usize], gate: Option<PartitionConfig>) -> Self {
        let mut layers = Vec::new();
        for (i, w) in sizes.windows(2).enumerate() {
            let mut layer = LayerSpec::dense(w[0], w[1]);
            let last = i + 2 == sizes.len();
            if let (Some(cfg), false) = (gate, last) {
                layer = layer.with_gate(Granularity::Neuron, cfg);
            }
            layers.push(layer);
            if !last {
                layers.push(LayerSpec::relu());
            }
        }
        Self {
            input_shape: vec![sizes[0]],
            layers,
        }
    }

    /// LeNet-5 variant on `[1, 28, 28]` input: conv(20,5x5) → pool →
    /// conv(50,5x5) → pool → flatten(800) → dense(500) → dense(10), ReLU
    /// after the convolutions and the hidden dense layer. Gates on both conv
    /// filter banks, the flattened features and the hidden dense units,
    /// each with its own settings.
    pub fn lenet5(gates: Option<[PartitionConfig; 4]>) -> Self {
        let gate = |i: usize, layer: LayerSpec, g: Granularity| match gates {
            Some(cfgs) => layer.with_gate(g, cfgs[i]),
            None => layer,
        };
        Self {
            input_shape: vec![1, 28, 28],
            layers: vec![
                gate(0, LayerSpec::conv2d(1, 20, 5), Granularity::Filter),
                LayerSpec::relu(),
                LayerSpec::maxpool2d(),
                gate(1, LayerSpec::conv2d(20, 50, 5), Granularity::Filter),
                LayerSpec::relu(),
                LayerSpec::maxpool2d(),
                gate(2, LayerSpec::flatten(), Granularity::Neuron),
                gate(3, LayerSpec::dense(800, 500), Granularity::Neuron),
                LayerSpec::relu(),
                LayerSpec::dense(500, 10),
            ],
        }
    }

    /// Per-example activation shape after every layer, validating the chain.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>, ModelError> {
        let mut cur = self.input_shape.clone();
        if cur.is_empty() || cur.contains(&0) {
            return Err(ModelError::Shape {
                layer: 0,
                detail: format!("invalid input shape {cur:?}"),
            });
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |detail: String| ModelError::Shape { layer: i, detail };
            cur = match &layer.kind {
                LayerKind::Dense { inputs, outputs } => {
                    if cur != [*inputs] {
                        return Err(err(format!("dense expects [{inputs}], got {cur:?}")));
                    }
                    if *outputs == 0 {
                        return Err(err("dense with zero outputs".into()));
                    }
                    vec![*outputs]
                }
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                } => {
                    if cur.len() != 3 || cur[0] != *in_channels {
                        return Err(err(format!(
                            "conv2d expects [{in_channels}, h, w], got {cur:?}"
                        )));
                    }
                    if *kernel == 0 || cur[1] < *kernel || cur[2] < *kernel || *out_channels == 0 {
                        return Err(err(format!("kernel {kernel} does not fit {cur:?}")));
                    }
                    vec![*out_channels, cur[1] - kernel + 1, cur[2] - kernel + 1]
                }
                LayerKind::Maxpool2d => {
                    if cur.len() != 3 || cur[1] < 2 || cur[2] < 2 {
                        return Err(err(format!("maxpool2d needs [c, h>=2, w>=2], got {cur:?}")));
                    }
                    vec![cur[0], cur[1] / 2, cur[2] / 2]
                }
                LayerKind::Relu => cur,
                LayerKind::Flatten => vec![cur.iter().product()],
                LayerKind::Select { indices } => {
                    if cur.len() != 1 || indices.is_empty() || indices.iter().any(|&j| j >= cur[0])
                    {
                        return Err(err(format!("select of {indices:?} from {cur:?}")));
                    }
                    vec![indices.len()]
                }
            };
            out.push(cur.clone());
        }
        Ok(out)
    }
}

/// Weight/bias geometries and gate group sizes implied by the spec.
fn weight_shape(kind: &LayerKind) -> Option<(Vec<usize>, usize, usize)> {
    match kind {
        LayerKind::Dense { inputs, outputs } => Some((vec![*inputs, *outputs], *outputs, *inputs)),
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
        } => Some((
            vec![*out_channels, *in_channels, *kernel, *kernel],
            *out_channels,
            in_channels * kernel * kernel,
        )),
        _ => None,
    }
}

fn gate_group_count(
    layer: usize,
    spec: &LayerSpec,
    granularity: Granularity,
    out_shape: &[usize],
) -> Result<usize, ModelError> {
    let incompatible = || ModelError::IncompatibleGate {
        layer,
        granularity,
        kind: spec.kind.name(),
    };
    let count = match (&spec.kind, granularity) {
        (LayerKind::Dense { inputs, outputs }, Granularity::Weight) => inputs * outputs,
        (LayerKind::Dense { outputs, .. }, Granularity::Neuron) => *outputs,
        (
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
            },
            Granularity::Weight,
        ) => out_channels * in_channels * kernel * kernel,
        (LayerKind::Conv2d { out_channels, .. }, Granularity::Neuron | Granularity::Filter) => {
            *out_channels
        }
        (LayerKind::Flatten, Granularity::Neuron) => out_shape[0],
        _ => return Err(incompatible()),
    };
    if count < 2 {
        return Err(ModelError::GroupTooSmall { layer, count });
    }
    Ok(count)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
    /// Index into [`Model::partitions`].
    pub partition: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Identifies a trainable tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight(usize),
    Bias(usize),
    Mu(usize),
    ZetaRaw(usize),
    Eta(usize),
}

/// A network with its gate partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub partitions: Vec<Partition>,
}

/// Result of [`Model::forward`]. `params` follows the order of
/// [`Model::trainable_parameters`].
#[derive(Debug)]
pub struct Forward {
    pub logits: Var,
    pub params: Vec<Var>,
    pub gates: Vec<GateVars>,
    /// `μ` leaves per partition (noiseless), for the expected-L0 term.
    pub mu: Vec<Var>,
}

/// He (fan-in) initialization for weights, zero biases; gate parameters on a
/// separate random stream so the weights do not depend on the gating.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model, ModelError> {
    let shapes = spec.shapes()?;
    let mut weight_rng = ChaCha8Rng::seed_from_u64(seed);
    weight_rng.set_stream(0);
    let mut gate_rng = ChaCha8Rng::seed_from_u64(seed);
    gate_rng.set_stream(1);

    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut partitions = Vec::new();
    for (i, ls) in spec.layers.iter().enumerate() {
        let (weight, bias) = match weight_shape(&ls.kind) {
            Some((wshape, nbias, fan_in)) => {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let n = wshape.iter().product();
                let data = (0..n).map(|_| normal.sample(&mut weight_rng)).collect();
                (
                    Some(Tensor::new(wshape, data)?),
                    Some(Tensor::zeros(&[nbias])),
                )
            }
            None => (None, None),
        };
        let partition = match &ls.gate {
            Some(gs) => {
                let size = gate_group_count(i, ls, gs.granularity, &shapes[i])?;
                let target = GateTarget {
                    layer: i,
                    granularity: gs.granularity,
                };
                let id = partitions.len();
                let p = Partition::init(id, size, &gs.partition, target, &mut gate_rng)
                    .map_err(|source| ModelError::Gate { layer: i, source })?;
                partitions.push(p);
                Some(id)
            }
            None => None,
        };
        layers.push(Layer {
            spec: ls.clone(),
            weight,
            bias,
            partition,
        });
    }
    Ok(Model {
        input_shape: spec.input_shape.clone(),
        layers,
        partitions,
    })
}

impl Model {
    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            input_shape: self.input_shape.clone(),
            layers: self.layers.iter().map(|l| l.spec.clone()).collect(),
        }
    }

    pub fn n_classes(&self) -> usize {
        let shapes = self.spec().shapes().expect("validated at build");
        shapes.last().map_or(0, |s| s.iter().product())
    }

    /// Weights and biases in layer order, then `μ`, `ζ_raw`, `η` per partition.
    pub fn trainable_parameters(&self) -> Vec<(ParamKind, Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if let Some(w) = &l.weight {
                out.push((ParamKind::Weight(i), w.clone()));
            }
            if let Some(b) = &l.bias {
                out.push((ParamKind::Bias(i), b.clone()));
            }
        }
        for (j, p) in self.partitions.iter().enumerate() {
            out.push((ParamKind::Mu(j), Tensor::vector(p.mu.clone())));
            out.push((ParamKind::ZetaRaw(j), Tensor::scalar(p.zeta_raw)));
            out.push((ParamKind::Eta(j), Tensor::scalar(p.eta)));
        }
        out
    }

    /// Mutable views in [`Model::trainable_parameters`] order.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            if let Some(w) = &mut l.weight {
                out.push(w.data_mut());
            }
            if let Some(b) = &mut l.bias {
                out.push(b.data_mut());
            }
        }
        for p in &mut self.partitions {
            out.push(&mut p.mu);
            out.push(std::slice::from_mut(&mut p.zeta_raw));
            out.push(std::slice::from_mut(&mut p.eta));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable_parameters()
            .iter()
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Deterministic gates of every partition.
    pub fn eval_gates(&self) -> Vec<gates::GateOutput> {
        self.partitions.iter().map(Partition::eval_gates).collect()
    }

    fn reshape_batch(&self, batch: &Tensor) -> Result<Tensor, ModelError> {
        let per: usize = self.input_shape.iter().product();
        let n = batch.shape().first().copied().unwrap_or(0);
        if n == 0 || batch.numel() != n * per {
            return Err(ModelError::Input {
                got: batch.shape().to_vec(),
                expected: self.input_shape.clone(),
            });
        }
        let mut shape = vec![n];
        shape.extend(&self.input_shape);
        Ok(batch.clone().reshape(&shape)?)
    }

    /// Records the gated forward pass on `g`. In [`Mode::Train`] partitions
    /// with dropout draw their noise from `rng`; [`Mode::Eval`] is fully
    /// deterministic and never touches `rng`.
    pub fn forward(
        &self,
        g: &mut Graph,
        batch: &Tensor,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<Forward, ModelError> {
        let x = self.reshape_batch(batch)?;
        let params: Vec<Var> = self
            .trainable_parameters()
            .into_iter()
            .map(|(_, t)| g.leaf(t))
            .collect();
        let mut cursor = 0;
        let mut layer_params = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let w = l.weight.as_ref().map(|_| {
                cursor += 1;
                params[cursor - 1]
            });
            let b = l.bias.as_ref().map(|_| {
                cursor += 1;
                params[cursor - 1]
            });
            layer_params.push((w, b));
        }

        let training = mode == Mode::Train;
        let mut gate_vars = Vec::with_capacity(self.partitions.len());
        let mut mu_vars = Vec::with_capacity(self.partitions.len());
        for (j, p) in self.partitions.iter().enumerate() {
            let (mu, zeta_raw, eta) = (params[cursor], params[cursor + 1], params[cursor + 2]);
            cursor += 3;
            let layer = p.target.layer;
            let wrap = |e: GateError| ModelError::Gate { layer, source: e };
            let zeta = g.softplus(zeta_raw)?;
            let s = gates::ml_sample_graph(g, mu, eta, p, training, rng)?;
            let gv = gates::gate_transform_graph(g, s, p.beta, zeta, p.utility).map_err(wrap)?;
            debug_assert_eq!(j, p.id);
            gate_vars.push(gv);
            mu_vars.push(mu);
        }

        let mut h = g.constant(x);
        for (i, l) in self.layers.iter().enumerate() {
            let gate = l
                .partition
                .map(|j| (gate_vars[j].z, self.partitions[j].target.granularity));
            let (w, b) = layer_params[i];
            h = match &l.spec.kind {
                LayerKind::Dense { .. } | LayerKind::Conv2d { .. } => {
                    let (w, b) = (w.expect("weight"), b.expect("bias"));
                    let w = match gate {
                        Some((z, Granularity::Weight)) => {
                            let shape = g.value(w).shape().to_vec();
                            let zr = g.reshape(z, &shape)?;
                            g.mul(w, zr)?
                        }
                        _ => w,
                    };
                    let out = if matches!(l.spec.kind, LayerKind::Dense { .. }) {
                        g.matmul(h, w)?
                    } else {
                        g.conv2d(h, w)?
                    };
                    let out = g.add_along(out, b, 1)?;
                    match gate {
                        Some((z, Granularity::Neuron | Granularity::Filter)) => {
                            g.mul_along(out, z, 1)?
                        }
                        _ => out,
                    }
                }
                LayerKind::Relu => g.relu(h)?,
                LayerKind::Maxpool2d => g.maxpool2d(h)?,
                LayerKind::Flatten => {
                    let flat = g.flatten(h)?;
                    match gate {
                        Some((z, _)) => g.mul_along(flat, z, 1)?,
                        None => flat,
                    }
                }
                LayerKind::Select { indices } => g.gather_columns(h, indices)?,
            };
        }
        Ok(Forward {
            logits: h,
            params,
            gates: gate_vars,
            mu: mu_vars,
        })
    }

    /// Evaluation-mode logits as a plain tensor.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = self.forward(&mut g, batch, Mode::Eval, &mut rng)?;
        Ok(g.value(f.logits).clone())
    }

    fn last_param_layer(&self) -> Option<usize> {
        self.layers.iter().rposition(|l| l.spec.kind.has_params())
    }

    /// Folds every gate into the parameters (θ ← θ ⊙ z) and drops the gate
    /// machinery; shapes are unchanged.
    pub fn fold_gates(&self) -> Result<Model, ModelError> {
        self.export(false)
    }

    /// Folds the gates and physically removes disabled neurons and filters
    /// together with their downstream fan-in. Output units of the final
    /// parametric layer are never removed, so the logits keep their shape.
    pub fn prune_export(&self) -> Result<Model, ModelError> {
        self.export(true)
    }

    fn export(&self, remove: bool) -> Result<Model, ModelError> {
        let spec = self.spec();
        let shapes = spec.shapes()?;
        let zs: Vec<Vec<f64>> = self.eval_gates().into_iter().map(|o| o.z).collect();
        let last_param = self.last_param_layer();

        // Original indices (along the channel or feature axis) still present.
        let mut keep: Vec<usize> = (0..self.input_shape[0]).collect();
        // Pending per-feature factor from a flatten gate, by original index.
        let mut pending: Option<(usize, Vec<f64>)> = None;
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut in_shape = self.input_shape.clone();

        for (i, l) in self.layers.iter().enumerate() {
            let gate = l
                .partition
                .map(|j| (&zs[j], self.partitions[j].target.granularity));
            let out_shape = &shapes[i];
            match &l.spec.kind {
                LayerKind::Dense { inputs, outputs } => {
                    let (n_in, n_out) = (*inputs, *outputs);
                    let mut w = l.weight.clone().expect("weight").into_data();
                    let mut b = l.bias.clone().expect("bias").into_data();
                    if let Some((z, Granularity::Weight)) = gate {
                        w.iter_mut().zip(z.iter()).for_each(|(wv, zv)| *wv *= zv);
                    }
                    if let Some((_, scale)) = pending.take() {
                        for (r, s) in scale.iter().enumerate() {
                            w[r * n_out..(r + 1) * n_out]
                                .iter_mut()
                                .for_each(|v| *v *= s);
                        }
                    }
                    let mut keep_out: Vec<usize> = (0..n_out).collect();
                    if let Some((z, Granularity::Neuron)) = gate {
                        for r in 0..n_in {
                            for c in 0..n_out {
                                w[r * n_out + c] *= z[c];
                            }
                        }
                        b.iter_mut().zip(z.iter()).for_each(|(bv, zv)| *bv *= zv);
                        if remove && Some(i) != last_param {
                            keep_out.retain(|&c| z[c] != 0.0);
                        }
                    }
                    if keep_out.is_empty() {
                        return Err(ModelError::Disconnected { layer: i });
                    }
                    let mut wd = Vec::with_capacity(keep.len() * keep_out.len());
                    for &r in &keep {
                        wd.extend(keep_out.iter().map(|&c| w[r * n_out + c]));
                    }
                    let bd: Vec<f64> = keep_out.iter().map(|&c| b[c]).collect();
                    layers.push(Layer {
                        spec: LayerSpec::dense(keep.len(), keep_out.len()),
                        weight: Some(Tensor::new(vec![keep.len(), keep_out.len()], wd)?),
                        bias: Some(Tensor::vector(bd)),
                        partition: None,
                    });
                    keep = keep_out;
                }
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                } => {
                    if pending.is_some() {
                        return Err(ModelError::NotFoldable { layer: i });
                    }
                    let (ci, co, k) = (*in_channels, *out_channels, *kernel);
                    let kk = k * k;
                    let mut w = l.weight.clone().expect("weight").into_data();
                    let mut b = l.bias.clone().expect("bias").into_data();
                    let mut keep_out: Vec<usize> = (0..co).collect();
                    match gate {
                        Some((z, Granularity::Weight)) => {
                            w.iter_mut().zip(z.iter()).for_each(|(wv, zv)| *wv *= zv)
                        }
                        Some((z, _)) => {
                            for o in 0..co {
                                w[o * ci * kk..(o + 1) * ci * kk]
                                    .iter_mut()
                                    .for_each(|v| *v *= z[o]);
                                b[o] *= z[o];
                            }
                            if remove && Some(i) != last_param {
                                keep_out.retain(|&o| z[o] != 0.0);
                            }
                        }
                        None => {}
                    }
                    if keep_out.is_empty() {
                        return Err(ModelError::Disconnected { layer: i });
                    }
                    let mut wd = Vec::with_capacity(keep_out.len() * keep.len() * kk);
                    for &o in &keep_out {
                        for &c in &keep {
                            let base = (o * ci + c) * kk;
                            wd.extend_from_slice(&w[base..base + kk]);
                        }
                    }
                    let bd: Vec<f64> = keep_out.iter().map(|&o| b[o]).collect();
                    layers.push(Layer {
                        spec: LayerSpec::conv2d(keep.len(), keep_out.len(), k),
                        weight: Some(Tensor::new(vec![keep_out.len(), keep.len(), k, k], wd)?),
                        bias: Some(Tensor::vector(bd)),
                        partition: None,
                    });
                    keep = keep_out;
                }
                LayerKind::Relu | LayerKind::Maxpool2d => {
                    layers.push(Layer {
                        spec: LayerSpec::new(l.spec.kind.clone()),
                        weight: None,
                        bias: None,
                        partition: None,
                    });
                }
                LayerKind::Flatten => {
                    if in_shape.len() > 1 {
                        let hw: usize = in_shape[1..].iter().product();
                        keep = keep
                            .iter()
                            .flat_map(|&c| (0..hw).map(move |p| c * hw + p))
                            .collect();
                    }
                    layers.push(Layer {
                        spec: LayerSpec::flatten(),
                        weight: None,
                        bias: None,
                        partition: None,
                    });
                    if let Some((z, _)) = gate {
                        let has_dense_after = self.layers[i + 1..]
                            .iter()
                            .find(|l| l.spec.kind.has_params() || l.spec.kind == LayerKind::Flatten)
                            .is_some_and(|l| matches!(l.spec.kind, LayerKind::Dense { .. }));
                        if !has_dense_after {
                            return Err(ModelError::NotFoldable { layer: i });
                        }
                        if remove {
                            let kept: Vec<usize> = keep
                                .iter()
                                .enumerate()
                                .filter(|(_, &f)| z[f] != 0.0)
                                .map(|(pos, _)| pos)
                                .collect();
                            if kept.is_empty() {
                                return Err(ModelError::Disconnected { layer: i });
                            }
                            if kept.len() != keep.len() {
                                layers.push(Layer {
                                    spec: LayerSpec::new(LayerKind::Select {
                                        indices: kept.clone(),
                                    }),
                                    weight: None,
                                    bias: None,
                                    partition: None,
                                });
                                keep = kept.iter().map(|&p| keep[p]).collect();
                            }
                        }
                        pending = Some((out_shape[0], z.clone()));
                    }
                }
                LayerKind::Select { indices } => {
                    // New feature j is old feature indices[j].
                    let pos_of = |f: usize| keep.iter().position(|&k| k == f);
                    let kept: Vec<usize> = (0..indices.len())
                        .filter(|&j| pos_of(indices[j]).is_some())
                        .collect();
                    if kept.is_empty() {
                        return Err(ModelError::Disconnected { layer: i });
                    }
                    let positions: Vec<usize> =
                        kept.iter().map(|&j| pos_of(indices[j]).unwrap()).collect();
                    layers.push(Layer {
                        spec: LayerSpec::new(LayerKind::Select { indices: positions }),
                        weight: None,
                        bias: None,
                        partition: None,
                    });
                    if let Some((_, scale)) = pending.take() {
                        pending =
                            Some((indices.len(), indices.iter().map(|&f| scale[f]).collect()));
                    }
                    keep = kept;
                }
            }
            in_shape = out_shape.clone();
        }
        let out = Model {
            input_shape: self.input_shape.clone(),
            layers,
            partitions: Vec::new(),
        };
        out.spec().shapes()?;
        Ok(out)
    }
}
