//! Spiking backbones, the non-spiking projection head, dual-path forward,
//! spiking-only inference, and batch-norm folding.
//!
//! Training forwards are recorded on the tape and walk the network
//! layer-major: each layer maps the whole sequence of timestep activations
//! before the next layer runs. Stateless layers behave identically to a
//! time-major loop, neuron layers carry their membrane across timesteps,
//! and training-mode batch norm normalizes over the timestep-pooled batch
//! with one set of running statistics shared by both paths.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::neuron::{self, NeuronConfig};
use crate::ops;
use crate::rng::{hash_name, Rng};
use crate::tape::{ParamMap, Tape, Var};
use crate::tensor::{Precision, Tensor};

/// Epsilon inside every batch-norm denominator, shared with folding so the
/// folded network reproduces eval-mode outputs.
pub const BN_EPS: f64 = 1e-5;

/// Default momentum for batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub enum LayerSpec {
    Dense { input: usize, output: usize },
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize },
    BatchNorm { features: usize },
    Neuron(NeuronConfig),
    /// Global average pooling over spatial dims.
    PoolAvg,
    Flatten,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Neuron(_) => "neuron",
            LayerSpec::PoolAvg => "pool_avg",
            LayerSpec::Flatten => "flatten",
        }
    }

    fn is_parameterized(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    /// Per-sample output shape (no batch dimension).
    pub fn output_shape(&self, shape: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerSpec::Dense { input, output } => {
                if shape.len() != 1 || shape[0] != *input {
                    return Err(Error::Shape(format!(
                        "dense layer expects [{input}], got {shape:?}"
                    )));
                }
                Ok(vec![*output])
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, pad } => {
                if shape.len() != 3 || shape[0] != *in_channels {
                    return Err(Error::Shape(format!(
                        "conv layer expects [{in_channels}, H, W], got {shape:?}"
                    )));
                }
                let padded = [1, *in_channels, shape[1], shape[2]];
                let w = [*out_channels, *in_channels, *kernel, *kernel];
                let out = ops::conv2d_out_shape(&padded, &w, *stride, *pad)?;
                Ok(vec![out[1], out[2], out[3]])
            }
            LayerSpec::BatchNorm { features } => {
                if shape.is_empty() || shape[0] != *features {
                    return Err(Error::Shape(format!(
                        "batchnorm over {features} features, input shape {shape:?}"
                    )));
                }
                Ok(shape.to_vec())
            }
            LayerSpec::Neuron(cfg) => {
                cfg.validate()?;
                Ok(shape.to_vec())
            }
            LayerSpec::PoolAvg => {
                if shape.len() != 3 {
                    return Err(Error::Shape(format!(
                        "global avg pool expects [C, H, W], got {shape:?}"
                    )));
                }
                Ok(vec![shape[0]])
            }
            LayerSpec::Flatten => Ok(vec![shape.iter().product()]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct NetworkSpec {
    /// Per-sample input shape: [features] or [channels, height, width].
    pub input_shape: Vec<usize>,
    pub backbone: Vec<LayerSpec>,
    /// Projection head: dense layers only, clipped-ReLU activation between
    /// consecutive layers, linear output.
    pub head: Vec<LayerSpec>,
    /// (threshold, width) of the head's clipped-ReLU activation.
    pub head_activation: (f64, f64),
    pub timesteps: usize,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.timesteps < 1 {
            return Err(Error::Invalid("network needs at least one timestep".into()));
        }
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.backbone.iter().enumerate() {
            match layer {
                LayerSpec::Neuron(_) => {
                    let ok = match i.checked_sub(1).map(|j| &self.backbone[j]) {
                        Some(LayerSpec::BatchNorm { .. }) => {
                            i >= 2 && self.backbone[i - 2].is_parameterized()
                        }
                        Some(prev) => prev.is_parameterized(),
                        None => false,
                    };
                    if !ok {
                        return Err(Error::Invalid(format!(
                            "backbone layer {i}: neuron must follow a dense/conv layer plus optional batchnorm"
                        )));
                    }
                }
                LayerSpec::BatchNorm { .. } => {
                    let ok = i >= 1 && self.backbone[i - 1].is_parameterized();
                    if !ok {
                        return Err(Error::Invalid(format!(
                            "backbone layer {i}: batchnorm must immediately follow a dense/conv layer"
                        )));
                    }
                }
                _ => {}
            }
            shape = layer
                .output_shape(&shape)
                .map_err(|e| Error::Invalid(format!("backbone layer {i}: {e}")))?;
        }
        if shape.len() != 1 {
            return Err(Error::Invalid(format!(
                "backbone must end in a flat feature vector, got {shape:?}"
            )));
        }
        for (i, layer) in self.head.iter().enumerate() {
            if !matches!(layer, LayerSpec::Dense { .. }) {
                return Err(Error::Invalid(format!(
                    "head layer {i} must be dense, got {}",
                    layer.kind_name()
                )));
            }
            shape = layer
                .output_shape(&shape)
                .map_err(|e| Error::Invalid(format!("head layer {i}: {e}")))?;
        }
        let (_, width) = self.head_activation;
        if width <= 0.0 {
            return Err(Error::Invalid("head activation width must be > 0".into()));
        }
        Ok(())
    }

    /// Width of the backbone's flat output feature vector.
    pub fn feature_width(&self) -> Result<usize> {
        let mut shape = self.input_shape.clone();
        for layer in &self.backbone {
            shape = layer.output_shape(&shape)?;
        }
        Ok(shape[0])
    }

    /// Output dimension of the projection head (feature width if no head).
    pub fn embedding_dim(&self) -> Result<usize> {
        let mut shape = vec![self.feature_width()?];
        for layer in &self.head {
            shape = layer.output_shape(&shape)?;
        }
        Ok(shape[0])
    }
}

// -------------------------------------------------------------- params

/// Named weight/bias/batch-norm tensors, including running statistics.
/// Running statistics (`*.running_mean` / `*.running_var`) are state, not
/// trainable parameters.
#[derive(Clone, Debug)]
pub struct Parameters {
    values: ParamMap,
}

impl Parameters {
    pub fn from_map(values: ParamMap) -> Parameters {
        Parameters { values }
    }

    pub fn values(&self) -> &ParamMap {
        &self.values
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.values
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.values.get_mut(name) {
            Some(slot) => {
                if slot.shape() != value.shape() {
                    return Err(Error::Shape(format!(
                        "parameter `{name}` has shape {:?}, assigned {:?}",
                        slot.shape(),
                        value.shape()
                    )));
                }
                *slot = value;
                Ok(())
            }
            None => Err(Error::Invalid(format!("unknown parameter `{name}`"))),
        }
    }

    pub fn is_running_stat(name: &str) -> bool {
        name.ends_with(".running_mean") || name.ends_with(".running_var")
    }

    /// Trainable entries in deterministic name order.
    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.values.iter().filter(|(k, _)| !Parameters::is_running_stat(k))
    }

    pub fn trainable_map(&self) -> ParamMap {
        self.trainable().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.values().map(|t| t.len()).sum()
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0x2545_f491_4f6c_dd1d;
        for (k, v) in &self.values {
            h = h.wrapping_mul(0x100_0000_01b3) ^ hash_name(k) ^ v.fingerprint();
        }
        h
    }
}

/// Kaiming-normal initialization: weights ~ N(0, 2/fan_in), zero biases,
/// identity batch norm. Deterministic per (seed, parameter name).
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<Parameters> {
    spec.validate()?;
    let mut values = ParamMap::new();
    let init = |values: &mut ParamMap, prefix: String, layer: &LayerSpec| {
        match layer {
            LayerSpec::Dense { input, output } => {
                let std = (2.0 / *input as f64).sqrt();
                let wname = format!("{prefix}.weight");
                let mut rng = Rng::substream(seed, &[hash_name(&wname)]);
                values.insert(wname, Tensor::random_normal(&[*input, *output], std, &mut rng));
                values.insert(format!("{prefix}.bias"), Tensor::zeros(&[*output]));
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                let fan_in = in_channels * kernel * kernel;
                let std = (2.0 / fan_in as f64).sqrt();
                let wname = format!("{prefix}.weight");
                let mut rng = Rng::substream(seed, &[hash_name(&wname)]);
                values.insert(
                    wname,
                    Tensor::random_normal(
                        &[*out_channels, *in_channels, *kernel, *kernel],
                        std,
                        &mut rng,
                    ),
                );
                values.insert(format!("{prefix}.bias"), Tensor::zeros(&[*out_channels]));
            }
            LayerSpec::BatchNorm { features } => {
                values.insert(format!("{prefix}.gamma"), Tensor::ones(&[*features]));
                values.insert(format!("{prefix}.beta"), Tensor::zeros(&[*features]));
                values.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[*features]));
                values.insert(format!("{prefix}.running_var"), Tensor::ones(&[*features]));
            }
            _ => {}
        }
    };
    for (i, layer) in spec.backbone.iter().enumerate() {
        init(&mut values, format!("backbone.{i}"), layer);
    }
    for (i, layer) in spec.head.iter().enumerate() {
        init(&mut values, format!("head.{i}"), layer);
    }
    Ok(Parameters { values })
}

// ------------------------------------------------------------- forward

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    /// Training-mode batch norm (batch statistics + running updates) when
    /// true, frozen running statistics when false.
    pub bn_train: bool,
    pub bn_momentum: f64,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions { bn_train: true, bn_momentum: BN_MOMENTUM }
    }
}

/// Accumulated batch-norm statistics to fold into running averages.
struct BnUpdate {
    prefix: String,
    mean: Tensor,
    var: Tensor,
}

struct PathRun {
    features: Vec<Var>,
    bn_updates: Vec<BnUpdate>,
    spike_sum: f64,
    spike_count: usize,
}

/// Which step function a neuron layer applies on a path.
fn uses_surrogate(path: crate::loss::PathId, cfg: &NeuronConfig) -> bool {
    path == crate::loss::PathId::B && cfg.path_b_is_surrogate()
}

fn run_backbone_on_tape(
    tape: &mut Tape,
    params: &Parameters,
    param_vars: &BTreeMap<String, Var>,
    spec: &NetworkSpec,
    frames: &[Var],
    path: crate::loss::PathId,
    opts: &ForwardOptions,
) -> Result<PathRun> {
    let mut current: Vec<Var> = frames.to_vec();
    let t_steps = current.len();
    let mut bn_updates = Vec::new();
    let mut spike_sum = 0.0;
    let mut spike_count = 0usize;

    for (i, layer) in spec.backbone.iter().enumerate() {
        let prefix = format!("backbone.{i}");
        match layer {
            LayerSpec::Dense { .. } => {
                let w = param_vars[&format!("{prefix}.weight")];
                let b = param_vars[&format!("{prefix}.bias")];
                for x in current.iter_mut() {
                    let h = tape.matmul(*x, w)?;
                    *x = tape.add(h, b)?;
                }
            }
            LayerSpec::Conv2d { stride, pad, .. } => {
                let w = param_vars[&format!("{prefix}.weight")];
                let b = param_vars[&format!("{prefix}.bias")];
                for x in current.iter_mut() {
                    let h = tape.conv2d(*x, w, *stride, *pad)?;
                    *x = tape.add(h, b)?;
                }
            }
            LayerSpec::BatchNorm { .. } => {
                let gamma = param_vars[&format!("{prefix}.gamma")];
                let beta = param_vars[&format!("{prefix}.beta")];
                if opts.bn_train {
                    // normalize over the timestep-pooled batch
                    let pooled = if t_steps == 1 { current[0] } else { tape.concat(&current)? };
                    let y = tape.batchnorm_train(pooled, gamma, beta, BN_EPS)?;
                    let (mean, var) = tape
                        .batch_stats(y)
                        .map(|(m, v)| (m.clone(), v.clone()))
                        .expect("train batchnorm saves stats");
                    bn_updates.push(BnUpdate { prefix: prefix.clone(), mean, var });
                    if t_steps == 1 {
                        current[0] = y;
                    } else {
                        let rows = tape.value(current[0]).shape()[0];
                        for (ti, x) in current.iter_mut().enumerate() {
                            *x = tape.slice_rows(y, ti * rows, rows)?;
                        }
                    }
                } else {
                    let mean = params.get(&format!("{prefix}.running_mean"))?.clone();
                    let var = params.get(&format!("{prefix}.running_var"))?.clone();
                    for x in current.iter_mut() {
                        *x = tape.batchnorm_eval(*x, gamma, beta, mean.clone(), var.clone(), BN_EPS)?;
                    }
                }
            }
            LayerSpec::Neuron(cfg) => {
                let zero = Tensor::zeros(tape.value(current[0]).shape());
                let mut membrane = tape.constant(zero);
                let surrogate = uses_surrogate(path, cfg);
                for x in current.iter_mut() {
                    let h = neuron::charge(tape, membrane, *x, cfg)?;
                    let (out, v) = if surrogate {
                        neuron::step_surrogate(tape, h, cfg)?
                    } else {
                        neuron::step_spiking(tape, h, cfg)?
                    };
                    membrane = v;
                    if path == crate::loss::PathId::A {
                        let val = tape.value(out);
                        spike_sum += val.data().iter().sum::<f64>();
                        spike_count += val.len();
                    }
                    *x = out;
                }
            }
            LayerSpec::PoolAvg => {
                for x in current.iter_mut() {
                    *x = tape.avgpool_global(*x)?;
                }
            }
            LayerSpec::Flatten => {
                for x in current.iter_mut() {
                    *x = tape.flatten(*x)?;
                }
            }
        }
    }
    Ok(PathRun { features: current, bn_updates, spike_sum, spike_count })
}

fn apply_head_on_tape(
    tape: &mut Tape,
    param_vars: &BTreeMap<String, Var>,
    spec: &NetworkSpec,
    features: &[Var],
) -> Result<Vec<Var>> {
    let (act_threshold, act_width) = spec.head_activation;
    let mut out = Vec::with_capacity(features.len());
    for &f in features {
        let mut x = f;
        for (j, _) in spec.head.iter().enumerate() {
            let w = param_vars[&format!("head.{j}.weight")];
            let b = param_vars[&format!("head.{j}.bias")];
            let h = tape.matmul(x, w)?;
            x = tape.add(h, b)?;
            if j + 1 < spec.head.len() {
                x = tape.relu_clip(x, act_threshold, act_width)?;
            }
        }
        out.push(x);
    }
    Ok(out)
}

fn register_params(tape: &mut Tape, params: &Parameters) -> Result<BTreeMap<String, Var>> {
    let mut vars = BTreeMap::new();
    for (name, value) in params.trainable() {
        vars.insert(name.clone(), tape.parameter(name, value.clone())?);
    }
    Ok(vars)
}

fn apply_bn_updates(
    params: &mut Parameters,
    updates: &[BnUpdate],
    momentum: f64,
    precision: Precision,
) -> Result<()> {
    for u in updates {
        for (suffix, stat) in [("running_mean", &u.mean), ("running_var", &u.var)] {
            let name = format!("{}.{suffix}", u.prefix);
            let old = params.get(&name)?;
            let mut data: Vec<f64> = old
                .data()
                .iter()
                .zip(stat.data().iter())
                .map(|(&o, &s)| (1.0 - momentum) * o + momentum * s)
                .collect();
            precision.round_slice(&mut data);
            let shape = old.shape().to_vec();
            params.set(&name, Tensor::new(shape, data)?)?;
        }
    }
    Ok(())
}

/// Everything the trainer needs from one recorded dual-path forward.
pub struct DualForward {
    /// Projected embeddings per timestep, path A (spiking).
    pub z_a: Vec<Var>,
    /// Projected embeddings per timestep, path B.
    pub z_b: Vec<Var>,
    /// Mean path-A spike activity over neuron layers and timesteps.
    pub spike_rate: f64,
}

/// Run both paths over all timesteps with shared parameters, recording on
/// the tape. `x_a` / `x_b` hold one batched input per timestep. Training
/// batch-norm running statistics are updated in call order (path A, then
/// path B).
pub fn forward_dual(
    tape: &mut Tape,
    params: &mut Parameters,
    spec: &NetworkSpec,
    x_a: &[Tensor],
    x_b: &[Tensor],
    opts: &ForwardOptions,
) -> Result<DualForward> {
    spec.validate()?;
    if x_a.len() != spec.timesteps || x_b.len() != spec.timesteps {
        return Err(Error::Invalid(format!(
            "expected {} timestep inputs, got {} and {}",
            spec.timesteps,
            x_a.len(),
            x_b.len()
        )));
    }
    let param_vars = register_params(tape, params)?;
    let frames_a: Vec<Var> = x_a.iter().map(|x| tape.constant(x.clone())).collect();
    let frames_b: Vec<Var> = x_b.iter().map(|x| tape.constant(x.clone())).collect();

    let run_a = run_backbone_on_tape(tape, params, &param_vars, spec, &frames_a, crate::loss::PathId::A, opts)?;
    let run_b = run_backbone_on_tape(tape, params, &param_vars, spec, &frames_b, crate::loss::PathId::B, opts)?;

    let z_a = apply_head_on_tape(tape, &param_vars, spec, &run_a.features)?;
    let z_b = apply_head_on_tape(tape, &param_vars, spec, &run_b.features)?;

    if opts.bn_train {
        let precision = tape.precision();
        apply_bn_updates(params, &run_a.bn_updates, opts.bn_momentum, precision)?;
        apply_bn_updates(params, &run_b.bn_updates, opts.bn_momentum, precision)?;
    }

    let spike_rate = if run_a.spike_count == 0 {
        0.0
    } else {
        run_a.spike_sum / run_a.spike_count as f64
    };
    Ok(DualForward { z_a, z_b, spike_rate })
}

/// Single-path recorded forward producing per-timestep projected
/// embeddings; the complementary path never touches the tape. Used for
/// isolated per-path gradient checks.
pub fn forward_path_embeddings(
    tape: &mut Tape,
    params: &mut Parameters,
    spec: &NetworkSpec,
    frames: &[Tensor],
    path: crate::loss::PathId,
    opts: &ForwardOptions,
) -> Result<Vec<Var>> {
    spec.validate()?;
    let param_vars = register_params(tape, params)?;
    let fvars: Vec<Var> = frames.iter().map(|x| tape.constant(x.clone())).collect();
    let run = run_backbone_on_tape(tape, params, &param_vars, spec, &fvars, path, opts)?;
    let z = apply_head_on_tape(tape, &param_vars, spec, &run.features)?;
    if opts.bn_train {
        let precision = tape.precision();
        apply_bn_updates(params, &run.bn_updates, opts.bn_momentum, precision)?;
    }
    Ok(z)
}

/// Single-path recorded forward (path A, spiking) producing per-timestep
/// backbone features; used for supervised fine-tuning.
pub fn forward_spiking_on_tape(
    tape: &mut Tape,
    params: &mut Parameters,
    spec: &NetworkSpec,
    frames: &[Tensor],
    opts: &ForwardOptions,
) -> Result<(Vec<Var>, BTreeMap<String, Var>)> {
    spec.validate()?;
    let param_vars = register_params(tape, params)?;
    let fvars: Vec<Var> = frames.iter().map(|x| tape.constant(x.clone())).collect();
    let run = run_backbone_on_tape(tape, params, &param_vars, spec, &fvars, crate::loss::PathId::A, opts)?;
    if opts.bn_train {
        let precision = tape.precision();
        apply_bn_updates(params, &run.bn_updates, opts.bn_momentum, precision)?;
    }
    Ok((run.features, param_vars))
}

// ----------------------------------------------------------- inference

/// Binary spike outputs of one neuron layer across timesteps.
pub struct SpikeRecord {
    pub layer_index: usize,
    pub per_timestep: Vec<Tensor>,
}

pub struct SpikingRun {
    /// Backbone feature vector per timestep, shape (batch, features).
    pub features: Vec<Tensor>,
    pub spikes: Vec<SpikeRecord>,
}

/// Tape-free path-A-only forward with frozen batch norm; returns features
/// and the per-layer binary spike record.
pub fn forward_spiking_inference(
    params: &Parameters,
    spec: &NetworkSpec,
    frames: &[Tensor],
    precision: Precision,
) -> Result<SpikingRun> {
    spec.validate()?;
    if frames.len() != spec.timesteps {
        return Err(Error::Invalid(format!(
            "expected {} timestep inputs, got {}",
            spec.timesteps,
            frames.len()
        )));
    }
    let mut current: Vec<Tensor> = frames.to_vec();
    let mut spikes = Vec::new();
    for (i, layer) in spec.backbone.iter().enumerate() {
        let prefix = format!("backbone.{i}");
        match layer {
            LayerSpec::Dense { .. } => {
                let w = params.get(&format!("{prefix}.weight"))?;
                let b = params.get(&format!("{prefix}.bias"))?;
                for x in current.iter_mut() {
                    let h = ops::matmul(x, w, false, false)?;
                    *x = ops::add(&h, b)?.rounded(precision);
                }
            }
            LayerSpec::Conv2d { stride, pad, .. } => {
                let w = params.get(&format!("{prefix}.weight"))?;
                let b = params.get(&format!("{prefix}.bias"))?;
                for x in current.iter_mut() {
                    let h = ops::conv2d(x, w, *stride, *pad)?;
                    *x = ops::add(&h, b)?.rounded(precision);
                }
            }
            LayerSpec::BatchNorm { .. } => {
                let gamma = params.get(&format!("{prefix}.gamma"))?;
                let beta = params.get(&format!("{prefix}.beta"))?;
                let mean = params.get(&format!("{prefix}.running_mean"))?;
                let var = params.get(&format!("{prefix}.running_var"))?;
                for x in current.iter_mut() {
                    *x = ops::batchnorm_eval(x, gamma, beta, mean, var, BN_EPS)?.rounded(precision);
                }
            }
            LayerSpec::Neuron(cfg) => {
                let mut state = neuron::NeuronState::zeros(current[0].shape(), false);
                let mut record = Vec::with_capacity(current.len());
                for x in current.iter_mut() {
                    let h = neuron::charge_value(&state.v_a, x, cfg)?.rounded(precision);
                    let (out, v) = neuron::step_spiking_value(&h, cfg);
                    state.v_a = v.rounded(precision);
                    record.push(out.clone());
                    *x = out;
                }
                spikes.push(SpikeRecord { layer_index: i, per_timestep: record });
            }
            LayerSpec::PoolAvg => {
                for x in current.iter_mut() {
                    *x = ops::avgpool_global(x)?.rounded(precision);
                }
            }
            LayerSpec::Flatten => {
                for x in current.iter_mut() {
                    let rows = x.shape()[0];
                    let rest: usize = x.shape()[1..].iter().product();
                    *x = x.reshaped(vec![rows, rest])?;
                }
            }
        }
    }
    Ok(SpikingRun { features: current, spikes })
}

// ------------------------------------------------------------- folding

/// Absorb eval-mode batch-norm layers into the preceding dense/conv layer:
/// weights scale by gamma/sqrt(var + eps), biases shift to
/// beta + (bias - mean) * gamma/sqrt(var + eps). Returns renumbered
/// parameters and a spec without batch-norm layers.
pub fn fold_batchnorm(params: &Parameters, spec: &NetworkSpec) -> Result<(Parameters, NetworkSpec)> {
    spec.validate()?;
    let mut new_backbone: Vec<LayerSpec> = Vec::new();
    let mut values = ParamMap::new();
    // (new index, layer) of the most recent parameterized layer
    let mut last_param: Option<(usize, LayerSpec)> = None;

    for (i, layer) in spec.backbone.iter().enumerate() {
        let old_prefix = format!("backbone.{i}");
        match layer {
            LayerSpec::BatchNorm { .. } => {
                let (target_idx, target_layer) = last_param.clone().ok_or_else(|| {
                    Error::Invalid(format!(
                        "backbone layer {i}: batchnorm has no preceding dense/conv layer to fold into"
                    ))
                })?;
                let gamma = params.get(&format!("{old_prefix}.gamma"))?;
                let beta = params.get(&format!("{old_prefix}.beta"))?;
                let mean = params.get(&format!("{old_prefix}.running_mean"))?;
                let var = params.get(&format!("{old_prefix}.running_var"))?;
                let new_prefix = format!("backbone.{target_idx}");
                let w = values[&format!("{new_prefix}.weight")].clone();
                let b = values[&format!("{new_prefix}.bias")].clone();
                let scale: Vec<f64> = gamma
                    .data()
                    .iter()
                    .zip(var.data().iter())
                    .map(|(&g, &v)| g / (v + BN_EPS).sqrt())
                    .collect();
                let folded_bias: Vec<f64> = b
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(c, &bc)| (bc - mean.data()[c]) * scale[c] + beta.data()[c])
                    .collect();
                let folded_weight = match &target_layer {
                    LayerSpec::Dense { input, output } => {
                        // weight (input, output): scale each output column
                        let mut wd = w.data().to_vec();
                        for r in 0..*input {
                            for c in 0..*output {
                                wd[r * output + c] *= scale[c];
                            }
                        }
                        Tensor::new(vec![*input, *output], wd)?
                    }
                    LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                        // weight (out, in, k, k): scale each output-channel block
                        let block = in_channels * kernel * kernel;
                        let mut wd = w.data().to_vec();
                        for c in 0..*out_channels {
                            for e in 0..block {
                                wd[c * block + e] *= scale[c];
                            }
                        }
                        Tensor::new(w.shape().to_vec(), wd)?
                    }
                    _ => unreachable!("last_param is always dense/conv"),
                };
                values.insert(format!("{new_prefix}.weight"), folded_weight);
                values.insert(
                    format!("{new_prefix}.bias"),
                    Tensor::new(vec![folded_bias.len()], folded_bias)?,
                );
            }
            _ => {
                let new_idx = new_backbone.len();
                let new_prefix = format!("backbone.{new_idx}");
                if layer.is_parameterized() {
                    values.insert(
                        format!("{new_prefix}.weight"),
                        params.get(&format!("{old_prefix}.weight"))?.clone(),
                    );
                    values.insert(
                        format!("{new_prefix}.bias"),
                        params.get(&format!("{old_prefix}.bias"))?.clone(),
                    );
                    last_param = Some((new_idx, layer.clone()));
                }
                new_backbone.push(layer.clone());
            }
        }
    }
    for (j, layer) in spec.head.iter().enumerate() {
        if layer.is_parameterized() {
            values.insert(format!("head.{j}.weight"), params.get(&format!("head.{j}.weight"))?.clone());
            values.insert(format!("head.{j}.bias"), params.get(&format!("head.{j}.bias"))?.clone());
        }
    }
    let folded_spec = NetworkSpec { backbone: new_backbone, ..spec.clone() };
    folded_spec.validate()?;
    Ok((Parameters { values }, folded_spec))
}
