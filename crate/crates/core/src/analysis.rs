//! Post-hoc diagnostics: linear probing of frozen features, spike-rate
//! statistics, the event-driven energy model, per-timestep histogram KL
//! divergence, and gradient cosine similarity.

use crate::dataio::{load_event_sequence, split_indices, Dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::network::{
    forward_spiking_inference, forward_spiking_on_tape, ForwardOptions, LayerSpec, NetworkSpec,
    Parameters,
};
use crate::ops;
use crate::rng::Rng;
use crate::tape::{GradientMap, Tape};
use crate::tensor::{Precision, Tensor};

// ------------------------------------------------------------- energy

/// Per-operation energy costs in picojoules.
#[derive(Clone, Copy, Debug)]
pub struct EnergyModel {
    pub e_mac_pj: f64,
    pub e_ac_pj: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        EnergyModel { e_mac_pj: 3.1, e_ac_pj: 0.1 }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<()> {
        if self.e_mac_pj <= 0.0 || self.e_ac_pj <= 0.0 {
            return Err(Error::Invalid("energy costs must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    /// Dense multiply-accumulate.
    Mac,
    /// Spike-driven accumulate.
    Ac,
}

/// Energy in joules for a number of operations of one kind.
pub fn estimate_energy(active_ops: f64, kind: OpKind, model: &EnergyModel) -> f64 {
    let pj = match kind {
        OpKind::Mac => model.e_mac_pj,
        OpKind::Ac => model.e_ac_pj,
    };
    active_ops * pj * 1e-12
}

/// Synaptic operations per sample per timestep for each parameterized
/// backbone layer, from layer shapes alone.
pub fn synaptic_ops_per_layer(spec: &NetworkSpec) -> Result<Vec<(usize, f64)>> {
    let mut shape = spec.input_shape.clone();
    let mut out = Vec::new();
    for (i, layer) in spec.backbone.iter().enumerate() {
        match layer {
            LayerSpec::Dense { input, output } => {
                out.push((i, (*input * *output) as f64));
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                let next = layer.output_shape(&shape)?;
                let (ho, wo) = (next[1], next[2]);
                out.push((i, (kernel * kernel * in_channels * out_channels * ho * wo) as f64));
            }
            _ => {}
        }
        shape = layer.output_shape(&shape)?;
    }
    Ok(out)
}

/// Total active synaptic operations for one inference over T timesteps:
/// each layer's analytic op count, scaled by the measured activity of its
/// input (1.0 for real-valued input ahead of the first neuron layer, the
/// preceding neuron layer's mean firing rate after that).
pub fn count_active_ops(spec: &NetworkSpec, report: &SpikeReport, timesteps: usize) -> Result<f64> {
    let per_layer = synaptic_ops_per_layer(spec)?;
    let mut total = 0.0;
    for (idx, ops) in per_layer {
        let mut activity = 1.0;
        for (pos, &layer_idx) in report.layer_indices.iter().enumerate() {
            if layer_idx < idx {
                let rates = &report.rates[pos];
                activity = rates.iter().sum::<f64>() / rates.len() as f64;
            }
        }
        total += ops * timesteps as f64 * activity;
    }
    Ok(total)
}

// --------------------------------------------------------- spike stats

/// Mean firing rate per neuron layer per timestep, plus the unweighted
/// overall mean across (layer, timestep) cells.
#[derive(Clone, Debug)]
pub struct SpikeReport {
    /// Backbone indices of the neuron layers, in network order.
    pub layer_indices: Vec<usize>,
    /// rates[layer][t], each in [0, 1].
    pub rates: Vec<Vec<f64>>,
    pub overall: f64,
}

impl SpikeReport {
    /// (layers x T) tensor of rates.
    pub fn to_tensor(&self) -> Tensor {
        let layers = self.rates.len();
        let t = self.rates.first().map_or(0, |r| r.len());
        let data: Vec<f64> = self.rates.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(vec![layers, t], data).expect("rectangular rate table")
    }

    pub fn tsv(&self) -> String {
        let mut out = String::from("layer\ttimestep\trate\n");
        for (pos, rates) in self.rates.iter().enumerate() {
            for (t, r) in rates.iter().enumerate() {
                out.push_str(&format!("{}\t{}\t{:.6}\n", self.layer_indices[pos], t, r));
            }
        }
        out.push_str(&format!("overall\t-\t{:.6}\n", self.overall));
        out
    }
}

fn dataset_frames(dataset: &Dataset, index: usize, timesteps: usize) -> Result<Vec<Tensor>> {
    match dataset.kind {
        DatasetKind::Static => Ok(crate::augment::encode_static(&dataset.sample(index), timesteps)),
        DatasetKind::Event => load_event_sequence(dataset, index, timesteps),
    }
}

/// Stack per-sample frames for a chunk of indices into batched timestep
/// tensors.
fn batched_frames(dataset: &Dataset, indices: &[usize], timesteps: usize) -> Result<Vec<Tensor>> {
    let mut per_sample = Vec::with_capacity(indices.len());
    for &i in indices {
        per_sample.push(dataset_frames(dataset, i, timesteps)?);
    }
    let mut out = Vec::with_capacity(timesteps);
    for t in 0..timesteps {
        let shape = per_sample[0][t].shape().to_vec();
        let inner: usize = shape.iter().product();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for s in &per_sample {
            data.extend_from_slice(s[t].data());
        }
        let mut full = vec![indices.len()];
        full.extend_from_slice(&shape);
        out.push(Tensor::new(full, data)?);
    }
    Ok(out)
}

/// Run spiking inference over the whole dataset and accumulate firing
/// rates per (neuron layer, timestep).
pub fn spike_rate_stats(params: &Parameters, spec: &NetworkSpec, dataset: &Dataset) -> Result<SpikeReport> {
    spec.validate()?;
    let t = spec.timesteps;
    let mut layer_indices: Vec<usize> = Vec::new();
    let mut sums: Vec<Vec<f64>> = Vec::new();
    let mut counts: Vec<Vec<usize>> = Vec::new();
    let chunk = 64usize;
    let n = dataset.len();
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let frames = batched_frames(dataset, &indices, t)?;
        let run = forward_spiking_inference(params, spec, &frames, Precision::F32)?;
        if layer_indices.is_empty() {
            layer_indices = run.spikes.iter().map(|r| r.layer_index).collect();
            sums = vec![vec![0.0; t]; layer_indices.len()];
            counts = vec![vec![0; t]; layer_indices.len()];
        }
        for (pos, rec) in run.spikes.iter().enumerate() {
            for (ti, spikes) in rec.per_timestep.iter().enumerate() {
                sums[pos][ti] += spikes.data().iter().sum::<f64>();
                counts[pos][ti] += spikes.len();
            }
        }
        start = end;
    }
    let rates: Vec<Vec<f64>> = sums
        .iter()
        .zip(counts.iter())
        .map(|(s, c)| s.iter().zip(c.iter()).map(|(&x, &k)| if k == 0 { 0.0 } else { x / k as f64 }).collect())
        .collect();
    let cells: Vec<f64> = rates.iter().flatten().copied().collect();
    let overall = if cells.is_empty() { 0.0 } else { cells.iter().sum::<f64>() / cells.len() as f64 };
    Ok(SpikeReport { layer_indices, rates, overall })
}

// ------------------------------------------------------------------ KL

#[derive(Clone, Copy, Debug)]
pub struct HistogramConfig {
    pub bins: usize,
    pub epsilon: f64,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        HistogramConfig { bins: 50, epsilon: 1e-8 }
    }
}

impl HistogramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::Invalid(format!("need >= 2 bins, got {}", self.bins)));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Invalid(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Normalized histogram over a shared range, with epsilon added after
/// normalization (no renormalization).
fn histogram(values: &[f64], lo: f64, hi: f64, cfg: &HistogramConfig) -> Vec<f64> {
    let mut hist = vec![0.0f64; cfg.bins];
    let span = hi - lo;
    for &v in values {
        let idx = if span > 0.0 {
            (((v - lo) / span) * cfg.bins as f64) as usize
        } else {
            0
        };
        hist[idx.min(cfg.bins - 1)] += 1.0;
    }
    let total: f64 = hist.iter().sum();
    hist.iter().map(|h| h / total + cfg.epsilon).collect()
}

/// Histogram KL divergence `sum_i p_i ln(p_i / q_i)` per timestep, with a
/// shared min/max range over the two feature sets at each timestep.
pub fn kl_per_timestep(
    feats_1: &[Tensor],
    feats_2: &[Tensor],
    cfg: &HistogramConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if feats_1.len() != feats_2.len() {
        return Err(Error::Invalid(format!(
            "timestep counts differ: {} vs {}",
            feats_1.len(),
            feats_2.len()
        )));
    }
    let mut out = Vec::with_capacity(feats_1.len());
    for (a, b) in feats_1.iter().zip(feats_2.iter()) {
        if a.is_empty() || b.is_empty() {
            return Err(Error::Invalid("empty feature tensor in KL".into()));
        }
        let lo = a
            .data()
            .iter()
            .chain(b.data().iter())
            .fold(f64::INFINITY, |m, &x| m.min(x));
        let hi = a
            .data()
            .iter()
            .chain(b.data().iter())
            .fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let p = histogram(a.data(), lo, hi, cfg);
        let q = histogram(b.data(), lo, hi, cfg);
        let kl: f64 = p.iter().zip(q.iter()).map(|(&pi, &qi)| pi * (pi / qi).ln()).sum();
        out.push(kl);
    }
    Ok(out)
}

// ----------------------------------------------------------- grad cos

/// Cosine similarity of two gradient maps after flattening every entry.
pub fn grad_cosine(g1: &GradientMap, g2: &GradientMap) -> Result<f64> {
    g1.cosine(g2)
}

// ---------------------------------------------------------- linear eval

#[derive(Clone, Copy, Debug)]
pub struct EvalConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of the dataset used to fit the probe; the rest is held out.
    pub train_fraction: f64,
    pub seed: u64,
    /// Unfreeze the backbone and fine-tune end-to-end before scoring.
    pub fine_tune: bool,
    /// Fine-tuning passes over the data (only used when fine_tune is set).
    pub fine_tune_epochs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            lr: 0.01,
            epochs: 100,
            batch_size: 128,
            train_fraction: 0.8,
            seed: 0,
            fine_tune: false,
            fine_tune_epochs: 10,
        }
    }
}

/// Path-A backbone features for every sample, kept per timestep:
/// `timesteps` tensors of shape (N, F). Feeds the histogram-KL comparison
/// between two trained models.
pub fn features_per_timestep(
    params: &Parameters,
    spec: &NetworkSpec,
    dataset: &Dataset,
) -> Result<Vec<Tensor>> {
    spec.validate()?;
    let t = spec.timesteps;
    let f = spec.feature_width()?;
    let n = dataset.len();
    let mut per_t: Vec<Vec<f64>> = vec![Vec::with_capacity(n * f); t];
    let chunk = 64usize;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let frames = batched_frames(dataset, &indices, t)?;
        let run = forward_spiking_inference(params, spec, &frames, Precision::F32)?;
        for (ti, feat) in run.features.iter().enumerate() {
            per_t[ti].extend_from_slice(feat.data());
        }
        start = end;
    }
    per_t.into_iter().map(|data| Tensor::new(vec![n, f], data)).collect()
}

/// Time-averaged path-A backbone features for every sample: (N, F).
pub fn extract_features(params: &Parameters, spec: &NetworkSpec, dataset: &Dataset) -> Result<Tensor> {
    spec.validate()?;
    let t = spec.timesteps;
    let f = spec.feature_width()?;
    let n = dataset.len();
    let mut data = Vec::with_capacity(n * f);
    let chunk = 64usize;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let frames = batched_frames(dataset, &indices, t)?;
        let run = forward_spiking_inference(params, spec, &frames, Precision::F32)?;
        let rows = end - start;
        for r in 0..rows {
            for j in 0..f {
                let mut acc = 0.0;
                for feat in &run.features {
                    acc += feat.data()[r * f + j];
                }
                data.push(acc / t as f64);
            }
        }
        start = end;
    }
    Tensor::new(vec![n, f], data)
}

struct Probe {
    weight: Tensor, // (F, K)
    bias: Tensor,   // (K)
}

impl Probe {
    fn new(features: usize, classes: usize, seed: u64) -> Probe {
        let mut rng = Rng::substream(seed, &[0x960be]);
        Probe {
            weight: Tensor::random_normal(&[features, classes], (1.0 / features as f64).sqrt(), &mut rng),
            bias: Tensor::zeros(&[classes]),
        }
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let h = ops::matmul(x, &self.weight, false, false)?;
        ops::add(&h, &self.bias)
    }

    /// One SGD step on mean cross-entropy; returns the loss.
    fn step(&mut self, x: &Tensor, labels: &[usize], lr: f64) -> Result<f64> {
        let logits = self.logits(x)?;
        let loss = ops::cross_entropy(&logits, labels)?.item();
        let dlogits = ops::cross_entropy_backward(&logits, labels, 1.0)?;
        let dw = ops::matmul(x, &dlogits, true, false)?;
        let db = ops::sum_axis(&dlogits, Some(0))?;
        self.weight = Tensor::new(
            self.weight.shape().to_vec(),
            self.weight.data().iter().zip(dw.data()).map(|(&w, &g)| w - lr * g).collect(),
        )?;
        self.bias = Tensor::new(
            self.bias.shape().to_vec(),
            self.bias.data().iter().zip(db.data()).map(|(&b, &g)| b - lr * g).collect(),
        )?;
        Ok(loss)
    }

    fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let logits = self.logits(x)?;
        let k = logits.shape()[1];
        let mut correct = 0usize;
        for (i, &y) in labels.iter().enumerate() {
            let row = &logits.data()[i * k..(i + 1) * k];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(j, _)| j)
                .unwrap_or(0);
            if pred == y {
                correct += 1;
            }
        }
        Ok(correct as f64 / labels.len() as f64)
    }
}

fn gather_rows(x: &Tensor, indices: &[usize]) -> Tensor {
    let f = x.shape()[1];
    let mut data = Vec::with_capacity(indices.len() * f);
    for &i in indices {
        data.extend_from_slice(&x.data()[i * f..(i + 1) * f]);
    }
    Tensor::new(vec![indices.len(), f], data).expect("row gather")
}

/// Train a linear classifier on frozen time-averaged features (or on a
/// fine-tuned copy of the network when `cfg.fine_tune` is set) and report
/// held-out top-1 accuracy. The passed-in parameters are never mutated.
pub fn linear_eval(
    params: &Parameters,
    spec: &NetworkSpec,
    dataset: &Dataset,
    cfg: &EvalConfig,
) -> Result<f64> {
    let labels = dataset
        .labels
        .as_ref()
        .ok_or_else(|| Error::Invalid("linear evaluation needs labels".into()))?;
    let classes = dataset.class_count().unwrap_or(0);
    if classes < 2 {
        return Err(Error::Invalid(format!("need >= 2 classes, got {classes}")));
    }
    let (train_idx, test_idx) = split_indices(dataset.len(), cfg.train_fraction, cfg.seed);

    let working = if cfg.fine_tune {
        fine_tune_backbone(params, spec, dataset, labels, &train_idx, classes, cfg)?
    } else {
        params.clone()
    };

    let features = extract_features(&working, spec, dataset)?;
    let f = features.shape()[1];
    let mut probe = Probe::new(f, classes, cfg.seed);
    let train_labels: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let mut rng = Rng::substream(cfg.seed, &[0x9e0b]);
    let batch = cfg.batch_size.min(train_idx.len()).max(1);
    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_idx.len()).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let rows: Vec<usize> = chunk.iter().map(|&i| train_idx[i]).collect();
            let x = gather_rows(&features, &rows);
            let y: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();
            probe.step(&x, &y, cfg.lr)?;
        }
    }
    let test_x = gather_rows(&features, &test_idx);
    let test_y: Vec<usize> = test_idx.iter().map(|&i| labels[i]).collect();
    probe.accuracy(&test_x, &test_y)
}

/// Supervised fine-tuning of the whole network (path A, recorded) with a
/// linear classifier on time-averaged features; returns the tuned copy.
fn fine_tune_backbone(
    params: &Parameters,
    spec: &NetworkSpec,
    dataset: &Dataset,
    labels: &[usize],
    train_idx: &[usize],
    classes: usize,
    cfg: &EvalConfig,
) -> Result<Parameters> {
    let mut work = params.clone();
    let f = spec.feature_width()?;
    let mut probe = Probe::new(f, classes, cfg.seed);
    let t = spec.timesteps;
    let batch = cfg.batch_size.min(train_idx.len()).max(1);
    let mut rng = Rng::substream(cfg.seed, &[0xf17e]);
    let opts = ForwardOptions::default();
    for _epoch in 0..cfg.fine_tune_epochs {
        let mut order: Vec<usize> = train_idx.to_vec();
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let frames = batched_frames(dataset, chunk, t)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new(Precision::F32);
            let (feats, _) = forward_spiking_on_tape(&mut tape, &mut work, spec, &frames, &opts)?;
            let mut acc = feats[0];
            for ft in &feats[1..] {
                acc = tape.add(acc, *ft)?;
            }
            let mean_feat = tape.scale(acc, 1.0 / t as f64)?;
            let w = tape.parameter("probe.weight", probe.weight.clone())?;
            let b = tape.parameter("probe.bias", probe.bias.clone())?;
            let wx = tape.matmul(mean_feat, w)?;
            let logits = tape.add(wx, b)?;
            let loss = tape.cross_entropy(logits, y)?;
            let grads = tape.backward(loss)?;
            for (name, grad) in grads.iter() {
                if name == "probe.weight" {
                    probe.weight = sgd_step(&probe.weight, grad, cfg.lr)?;
                } else if name == "probe.bias" {
                    probe.bias = sgd_step(&probe.bias, grad, cfg.lr)?;
                } else {
                    let updated = sgd_step(work.get(name)?, grad, cfg.lr)?;
                    work.set(name, updated)?;
                }
            }
        }
    }
    Ok(work)
}

fn sgd_step(value: &Tensor, grad: &Tensor, lr: f64) -> Result<Tensor> {
    Tensor::new(
        value.shape().to_vec(),
        value.data().iter().zip(grad.data()).map(|(&v, &g)| v - lr * g).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth_clusters;
    use crate::network::build_network;
    use crate::neuron::NeuronConfig;
    use crate::tape::ParamMap;

    #[test]
    fn energy_table_arithmetic() {
        let m = EnergyModel::default();
        let mac = estimate_energy(3600e6, OpKind::Mac, &m);
        assert!((mac - 11.16e-3).abs() / 11.16e-3 < 1e-12, "{mac}");
        let ac = estimate_energy(828e6, OpKind::Ac, &m);
        assert!((ac - 0.0828e-3).abs() / 0.0828e-3 < 1e-12, "{ac}");
        let ac2 = estimate_energy(1569e6, OpKind::Ac, &m);
        assert!((ac2 - 0.1569e-3).abs() / 0.1569e-3 < 1e-12, "{ac2}");
        assert_eq!(estimate_energy(0.0, OpKind::Mac, &m), 0.0);
    }

    #[test]
    fn energy_scales_linearly() {
        let m = EnergyModel::default();
        for k in [1.0, 3.5, 1e9] {
            assert_eq!(
                estimate_energy(2.0 * k, OpKind::Ac, &m),
                2.0 * estimate_energy(k, OpKind::Ac, &m)
            );
        }
    }

    fn probe_spec() -> NetworkSpec {
        NetworkSpec {
            input_shape: vec![8],
            backbone: vec![
                LayerSpec::Dense { input: 8, output: 10 },
                LayerSpec::BatchNorm { features: 10 },
                LayerSpec::Neuron(NeuronConfig::default()),
                LayerSpec::Dense { input: 10, output: 6 },
                LayerSpec::BatchNorm { features: 6 },
                LayerSpec::Neuron(NeuronConfig::default()),
            ],
            head: vec![],
            head_activation: (0.5, 1.0),
            timesteps: 3,
        }
    }

    #[test]
    fn op_counting_uses_input_activity() {
        let spec = probe_spec();
        let report = SpikeReport {
            layer_indices: vec![2, 5],
            rates: vec![vec![0.5, 0.25, 0.25], vec![0.1, 0.1, 0.1]],
            overall: 0.2,
        };
        // layer 0: 8*10 ops, input activity 1.0; layer 3: 10*6 ops,
        // input activity = mean rate of neuron layer 2 = 1/3
        let t = 3.0;
        let want = 80.0 * t * 1.0 + 60.0 * t * (1.0 / 3.0);
        let got = count_active_ops(&spec, &report, 3).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn spike_rates_zero_for_zero_weights() {
        let spec = probe_spec();
        let mut params = build_network(&spec, 4).unwrap();
        for name in ["backbone.0.weight", "backbone.3.weight"] {
            let shape = params.get(name).unwrap().shape().to_vec();
            params.set(name, Tensor::zeros(&shape)).unwrap();
        }
        let data = synth_clusters(10, 2, 8, 0.2, 5).unwrap();
        let report = spike_rate_stats(&params, &spec, &data).unwrap();
        assert_eq!(report.overall, 0.0);
        assert!(report.rates.iter().flatten().all(|&r| r == 0.0));
    }

    #[test]
    fn saturating_drive_fires_every_step() {
        let spec = NetworkSpec {
            input_shape: vec![4],
            backbone: vec![
                LayerSpec::Dense { input: 4, output: 5 },
                LayerSpec::Neuron(NeuronConfig::default()),
            ],
            head: vec![],
            head_activation: (0.5, 1.0),
            timesteps: 4,
        };
        let mut params = build_network(&spec, 9).unwrap();
        params.set("backbone.0.weight", Tensor::full(&[4, 5], 10.0)).unwrap();
        let inputs = Tensor::ones(&[6, 4]);
        let data = Dataset::new(inputs, None, DatasetKind::Static).unwrap();
        let report = spike_rate_stats(&params, &spec, &data).unwrap();
        assert_eq!(report.rates[0], vec![1.0; 4]);
        assert_eq!(report.overall, 1.0);
    }

    #[test]
    fn spike_rates_invariant_to_sample_order() {
        let spec = probe_spec();
        let params = build_network(&spec, 77).unwrap();
        let data = synth_clusters(40, 2, 8, 0.3, 6).unwrap();
        let report = spike_rate_stats(&params, &spec, &data).unwrap();
        // reverse the sample order
        let f: usize = data.sample_shape().iter().product();
        let n = data.len();
        let mut rev = Vec::with_capacity(n * f);
        for i in (0..n).rev() {
            rev.extend_from_slice(&data.inputs.data()[i * f..(i + 1) * f]);
        }
        let reversed =
            Dataset::new(Tensor::new(vec![n, f], rev).unwrap(), None, DatasetKind::Static).unwrap();
        let report2 = spike_rate_stats(&params, &spec, &reversed).unwrap();
        for (a, b) in report.rates.iter().flatten().zip(report2.rates.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(report.rates.iter().flatten().all(|&r| (0.0..=1.0).contains(&r)));
    }

    #[test]
    fn kl_identical_features_is_zero() {
        let mut rng = Rng::new(5);
        let feats: Vec<Tensor> = (0..4).map(|_| Tensor::random_normal(&[32], 1.0, &mut rng)).collect();
        let kl = kl_per_timestep(&feats, &feats, &HistogramConfig::default()).unwrap();
        assert_eq!(kl.len(), 4);
        for v in kl {
            assert!(v.abs() <= 1e-9, "{v}");
        }
    }

    #[test]
    fn kl_point_mass_vs_uniform_closed_form() {
        let cfg = HistogramConfig::default();
        // p: point mass (all values identical); q: exactly one value per bin
        let p_vals = Tensor::full(&[64], 0.25);
        let q_vals = Tensor::new(
            vec![50],
            (0..50).map(|j| (j as f64 + 0.5) / 50.0).collect(),
        )
        .unwrap();
        let kl = kl_per_timestep(&[p_vals], &[q_vals], &cfg).unwrap()[0];
        let e = cfg.epsilon;
        let q = 1.0 / 50.0 + e;
        let expected = (1.0 + e) * ((1.0 + e) / q).ln() + 49.0 * e * (e / q).ln();
        assert!((kl - expected).abs() < 1e-9, "kl {kl} vs closed form {expected}");
        assert!((kl - (50.0f64).ln()).abs() < 0.01, "roughly ln 50");
    }

    #[test]
    fn kl_non_negative_and_asymmetric() {
        let mut rng = Rng::new(8);
        let a: Vec<Tensor> = (0..3).map(|_| Tensor::random_normal(&[200], 1.0, &mut rng)).collect();
        let b: Vec<Tensor> = (0..3).map(|_| Tensor::random_uniform(&[200], -2.0, 2.0, &mut rng)).collect();
        let ab = kl_per_timestep(&a, &b, &HistogramConfig::default()).unwrap();
        let ba = kl_per_timestep(&b, &a, &HistogramConfig::default()).unwrap();
        for (x, y) in ab.iter().zip(ba.iter()) {
            assert!(*x >= -1e-12);
            assert!(*y >= -1e-12);
        }
        // no symmetrization
        assert!(ab.iter().zip(ba.iter()).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn grad_cosine_axes() {
        let mut m1 = ParamMap::new();
        m1.insert("w".into(), Tensor::new(vec![3], vec![1.0, 2.0, 2.0]).unwrap());
        let g1 = GradientMap::from_map(m1.clone());
        assert!((grad_cosine(&g1, &g1).unwrap() - 1.0).abs() < 1e-9);
        let neg = GradientMap::from_map(
            m1.iter().map(|(k, v)| (k.clone(), v.map(|x| -x))).collect(),
        );
        assert!((grad_cosine(&g1, &neg).unwrap() + 1.0).abs() < 1e-9);
        let mut m2 = ParamMap::new();
        m2.insert("w".into(), Tensor::new(vec![3], vec![2.0, -1.0, 0.0]).unwrap());
        let ortho = GradientMap::from_map(m2);
        assert!(grad_cosine(&g1, &ortho).unwrap().abs() < 1e-9);
    }

    #[test]
    fn probe_on_one_hot_features_reaches_full_accuracy() {
        // features equal to the one-hot label rows: probe must separate
        let n = 40;
        let classes = 4;
        let mut data = vec![0.0; n * classes];
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % classes;
            data[i * classes + c] = 1.0;
            labels.push(c);
        }
        let features = Tensor::new(vec![n, classes], data).unwrap();
        let mut probe = Probe::new(classes, classes, 3);
        let y: Vec<usize> = labels.clone();
        for _ in 0..200 {
            probe.step(&features, &y, 0.5).unwrap();
        }
        assert_eq!(probe.accuracy(&features, &y).unwrap(), 1.0);
    }

    #[test]
    fn constant_features_score_majority_rate() {
        let n = 30;
        let features = Tensor::ones(&[n, 5]);
        // class 0 is the majority (two thirds)
        let labels: Vec<usize> = (0..n).map(|i| if i % 3 == 0 { 1 } else { 0 }).collect();
        let mut probe = Probe::new(5, 2, 1);
        for _ in 0..300 {
            probe.step(&features, &labels, 0.1).unwrap();
        }
        let acc = probe.accuracy(&features, &labels).unwrap();
        let majority = labels.iter().filter(|&&y| y == 0).count() as f64 / n as f64;
        assert!((acc - majority).abs() < 1e-9, "{acc} vs {majority}");
    }

    #[test]
    fn linear_eval_does_not_mutate_params() {
        let spec = probe_spec();
        let params = build_network(&spec, 13).unwrap();
        let fp = params.fingerprint();
        let data = synth_clusters(20, 2, 8, 0.1, 3).unwrap();
        let cfg = EvalConfig { epochs: 5, ..EvalConfig::default() };
        let acc = linear_eval(&params, &spec, &data, &cfg).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert_eq!(params.fingerprint(), fp);
    }

    #[test]
    fn linear_eval_rejects_single_class() {
        let spec = probe_spec();
        let params = build_network(&spec, 13).unwrap();
        let inputs = Tensor::ones(&[10, 8]);
        let data = Dataset::new(inputs, Some(vec![0; 10]), DatasetKind::Static).unwrap();
        assert!(linear_eval(&params, &spec, &data, &EvalConfig::default()).is_err());
    }

    #[test]
    fn fine_tune_option_runs_and_scores() {
        let spec = probe_spec();
        let params = build_network(&spec, 21).unwrap();
        let fp = params.fingerprint();
        let data = synth_clusters(15, 2, 8, 0.1, 9).unwrap();
        let cfg = EvalConfig {
            epochs: 5,
            fine_tune: true,
            fine_tune_epochs: 2,
            batch_size: 16,
            ..EvalConfig::default()
        };
        let acc = linear_eval(&params, &spec, &data, &cfg).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert_eq!(params.fingerprint(), fp, "caller's parameters must stay frozen");
    }
}
