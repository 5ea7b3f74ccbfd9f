//! Dual-path self-supervised training.
//!
//! Each step produces two augmented views, runs both paths over all
//! timesteps on one tape, and computes the loss twice: once with the
//! path-B embeddings stop-gradient-wrapped (giving `g_A`) and once with
//! path A wrapped (giving `g_B`). The shared parameters are updated with
//! `g_A + g_B`, which equals the joint gradient by the chain rule; the
//! split exists so each path's contribution can be isolated and compared.

use crate::augment::{self, AugmentConfig, SpatialTransform, TemporalTransform};
use crate::dataio::{load_event_sequence, Dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::loss::{temporal_loss_on, LossConfig};
use crate::network::{forward_dual, ForwardOptions, NetworkSpec, Parameters};
use crate::rng::Rng;
use crate::tape::{GradientMap, ParamMap, Tape, Var};
use crate::tensor::{Precision, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub seed: u64,
    pub precision: Precision,
    /// Checkpoint every N epochs (0 = final only); consumed by the CLI.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.005,
            weight_decay: 1.5e-6,
            momentum: 0.9,
            warmup_epochs: 20,
            total_epochs: 100,
            batch_size: 64,
            loss: LossConfig::default(),
            seed: 0,
            precision: Precision::F32,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 {
            return Err(Error::Invalid(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::Invalid(format!(
                "warmup ({}) exceeds total epochs ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be >= 1".into()));
        }
        if self.batch_size == 1 {
            // batch statistics in the correlation degenerate at B = 1
            eprintln!("warning: batch size 1 makes every correlation entry +-1; training is allowed but ill-posed");
        }
        self.loss.validate()
    }
}

/// Linear warmup to `lr` over `warmup_epochs`, then cosine decay to zero
/// at the final step. Fractional position within an epoch uses
/// step/(steps_per_epoch - 1) so the last step of the last epoch lands
/// exactly on zero.
pub fn lr_schedule(epoch: usize, step_in_epoch: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let frac = if steps_per_epoch > 1 {
        step_in_epoch as f64 / (steps_per_epoch - 1) as f64
    } else {
        0.0
    };
    let pos = epoch as f64 + frac;
    let warmup = cfg.warmup_epochs as f64;
    if pos < warmup {
        cfg.lr * pos / warmup
    } else {
        let span = (cfg.total_epochs as f64 - warmup).max(f64::MIN_POSITIVE);
        let progress = ((pos - warmup) / span).clamp(0.0, 1.0);
        cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

// ------------------------------------------------------------ gradients

/// Result of one dual-path loss evaluation: per-path gradients isolated by
/// stop-gradient wrapping of the other path's embeddings.
pub struct DualGradients {
    pub loss: f64,
    pub grad_a: GradientMap,
    pub grad_b: GradientMap,
    pub spike_rate: f64,
    pub pairs_evaluated: usize,
}

fn stop_all(tape: &mut Tape, zs: &[Var]) -> Result<Vec<Var>> {
    zs.iter().map(|z| tape.stop_gradient(*z)).collect()
}

/// Forward both paths and compute (g_A, g_B) by detaching the complementary
/// path's projected outputs before each loss evaluation.
pub fn dual_path_gradients(
    params: &mut Parameters,
    spec: &NetworkSpec,
    x_a: &[Tensor],
    x_b: &[Tensor],
    loss_cfg: &LossConfig,
    precision: Precision,
    opts: &ForwardOptions,
) -> Result<DualGradients> {
    let mut tape = Tape::new(precision);
    let fw = forward_dual(&mut tape, params, spec, x_a, x_b, opts)?;
    let z_b_stopped = stop_all(&mut tape, &fw.z_b)?;
    let z_a_stopped = stop_all(&mut tape, &fw.z_a)?;
    let loss_a = temporal_loss_on(&mut tape, &fw.z_a, &z_b_stopped, loss_cfg)?;
    let loss_b = temporal_loss_on(&mut tape, &z_a_stopped, &fw.z_b, loss_cfg)?;
    let loss = tape.value(loss_a.value).item();
    if !loss.is_finite() {
        return Err(Error::Invalid(format!("non-finite loss {loss}")));
    }
    let grad_a = tape.backward(loss_a.value)?;
    let grad_b = tape.backward(loss_b.value)?;
    Ok(DualGradients {
        loss,
        grad_a,
        grad_b,
        spike_rate: fw.spike_rate,
        pairs_evaluated: loss_a.pairs_evaluated,
    })
}

/// Joint gradient with no stop-gradients: the chain-rule reference the
/// two-pass aggregation is checked against.
pub fn joint_gradient(
    params: &mut Parameters,
    spec: &NetworkSpec,
    x_a: &[Tensor],
    x_b: &[Tensor],
    loss_cfg: &LossConfig,
    precision: Precision,
    opts: &ForwardOptions,
) -> Result<(f64, GradientMap)> {
    let mut tape = Tape::new(precision);
    let fw = forward_dual(&mut tape, params, spec, x_a, x_b, opts)?;
    let out = temporal_loss_on(&mut tape, &fw.z_a, &fw.z_b, loss_cfg)?;
    let loss = tape.value(out.value).item();
    let grad = tape.backward(out.value)?;
    Ok((loss, grad))
}

/// `max |(g_A + g_B) - g_joint| / (max |g_joint| + 1e-12)` for one input
/// pair, evaluated at full width on cloned parameters.
pub fn gradient_fusion_residual(
    params: &Parameters,
    spec: &NetworkSpec,
    x_a: &[Tensor],
    x_b: &[Tensor],
    loss_cfg: &LossConfig,
) -> Result<f64> {
    let opts = ForwardOptions::default();
    let duals = dual_path_gradients(&mut params.clone(), spec, x_a, x_b, loss_cfg, Precision::F64, &opts)?;
    let fused = duals.grad_a.add(&duals.grad_b)?;
    let (_, joint) = joint_gradient(&mut params.clone(), spec, x_a, x_b, loss_cfg, Precision::F64, &opts)?;
    fused.max_rel_diff(&joint)
}

// -------------------------------------------------------------- trainer

#[derive(Clone, Copy, Debug)]
pub struct StepDiagnostics {
    pub loss: f64,
    pub lr: f64,
    pub grad_norm_a: f64,
    pub grad_norm_b: f64,
    pub grad_cosine: f64,
    pub spike_rate: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_cosine: f64,
    pub spike_rate: f64,
}

impl EpochMetrics {
    /// One tab-separated log line: epoch, loss, lr, grad_cos, mean_spike_rate.
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, self.loss, self.lr, self.grad_cosine, self.spike_rate
        )
    }
}

pub struct Trainer {
    pub params: Parameters,
    pub spec: NetworkSpec,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    velocity: ParamMap,
}

impl Trainer {
    /// Fresh Kaiming-initialized network.
    pub fn new(spec: NetworkSpec, train: TrainConfig, augment: AugmentConfig) -> Result<Trainer> {
        train.validate()?;
        augment.validate()?;
        spec.validate()?;
        let params = crate::network::build_network(&spec, train.seed)?;
        Ok(Trainer::from_params(params, spec, train, augment))
    }

    pub fn from_params(
        params: Parameters,
        spec: NetworkSpec,
        train: TrainConfig,
        augment: AugmentConfig,
    ) -> Trainer {
        let velocity = params
            .trainable()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
            .collect();
        Trainer { params, spec, train, augment, velocity }
    }

    /// Build the two augmented views for a batch of dataset samples.
    /// Static samples are spatially distorted per view and repeated over
    /// timesteps; event samples additionally get one shared temporal
    /// distortion per sample, applied identically to both views.
    pub fn make_views(
        &self,
        dataset: &Dataset,
        indices: &[usize],
        epoch: usize,
    ) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let t = self.spec.timesteps;
        let mut frames_a: Vec<Vec<Tensor>> = Vec::with_capacity(indices.len());
        let mut frames_b: Vec<Vec<Tensor>> = Vec::with_capacity(indices.len());
        for &idx in indices {
            let (va, vb) = self.sample_views(dataset, idx, epoch)?;
            debug_assert_eq!(va.len(), t);
            frames_a.push(va);
            frames_b.push(vb);
        }
        Ok((stack_frames(&frames_a, t)?, stack_frames(&frames_b, t)?))
    }

    fn sample_views(&self, dataset: &Dataset, idx: usize, epoch: usize) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let seed = self.train.seed;
        let t = self.spec.timesteps;
        let mut rng_a = Rng::substream(seed, &[0xa, epoch as u64, idx as u64]);
        let mut rng_b = Rng::substream(seed, &[0xb, epoch as u64, idx as u64]);
        match dataset.kind {
            DatasetKind::Static => {
                let raw = dataset.sample(idx);
                let image = as_image(&raw)?;
                let view_a = augment::augment_spatial(&image, &self.augment, &mut rng_a)?;
                let view_b = augment::augment_spatial(&image, &self.augment, &mut rng_b)?;
                let a = augment::encode_static(&from_image(&view_a, raw.shape()), t);
                let b = augment::encode_static(&from_image(&view_b, raw.shape()), t);
                Ok((a, b))
            }
            DatasetKind::Event => {
                let frames = load_event_sequence(dataset, idx, t)?;
                let (c, h, w) = (frames[0].shape()[0], frames[0].shape()[1], frames[0].shape()[2]);
                let tr_a = SpatialTransform::sample(&self.augment, c, h, w, &mut rng_a);
                let tr_b = SpatialTransform::sample(&self.augment, c, h, w, &mut rng_b);
                // one temporal distortion per sample, shared across the views
                let mut rng_t = Rng::substream(seed, &[0x7e, epoch as u64, idx as u64]);
                let temporal = TemporalTransform::sample(&self.augment, t, &mut rng_t);
                let spatial_a: Result<Vec<Tensor>> = frames.iter().map(|f| tr_a.apply(f)).collect();
                let spatial_b: Result<Vec<Tensor>> = frames.iter().map(|f| tr_b.apply(f)).collect();
                Ok((temporal.apply(&spatial_a?), temporal.apply(&spatial_b?)))
            }
        }
    }

    /// One optimization step on already-built views.
    pub fn train_step(&mut self, x_a: &[Tensor], x_b: &[Tensor], lr: f64) -> Result<StepDiagnostics> {
        let opts = ForwardOptions::default();
        let duals = dual_path_gradients(
            &mut self.params,
            &self.spec,
            x_a,
            x_b,
            &self.train.loss,
            self.train.precision,
            &opts,
        )?;
        let fused = duals.grad_a.add(&duals.grad_b)?;
        let grad_cosine = duals.grad_a.cosine(&duals.grad_b)?;
        self.apply_update(&fused, lr)?;
        Ok(StepDiagnostics {
            loss: duals.loss,
            lr,
            grad_norm_a: duals.grad_a.l2_norm(),
            grad_norm_b: duals.grad_b.l2_norm(),
            grad_cosine,
            spike_rate: duals.spike_rate,
        })
    }

    /// Momentum SGD with weight decay added into the gradient:
    /// `v <- m v + (g + wd theta)`, `theta <- theta - lr v`.
    fn apply_update(&mut self, grads: &GradientMap, lr: f64) -> Result<()> {
        let precision = self.train.precision;
        let wd = self.train.weight_decay;
        let m = self.train.momentum;
        let names: Vec<String> = self.velocity.keys().cloned().collect();
        for name in names {
            let grad = grads
                .get(&name)
                .ok_or_else(|| Error::Invalid(format!("missing gradient for `{name}`")))?;
            let theta = self.params.get(&name)?.clone();
            let vel = &self.velocity[&name];
            let mut new_vel: Vec<f64> = vel
                .data()
                .iter()
                .zip(grad.data().iter().zip(theta.data().iter()))
                .map(|(&v, (&g, &p))| m * v + (g + wd * p))
                .collect();
            precision.round_slice(&mut new_vel);
            let new_vel = Tensor::new(theta.shape().to_vec(), new_vel)?;
            if lr != 0.0 {
                let mut updated: Vec<f64> = theta
                    .data()
                    .iter()
                    .zip(new_vel.data().iter())
                    .map(|(&p, &v)| p - lr * v)
                    .collect();
                precision.round_slice(&mut updated);
                self.params.set(&name, Tensor::new(theta.shape().to_vec(), updated)?)?;
            }
            self.velocity.insert(name, new_vel);
        }
        Ok(())
    }

    /// Full pretraining over shuffled mini-batches. The callback fires after
    /// every epoch (metrics logging, checkpointing).
    pub fn pretrain(
        &mut self,
        dataset: &Dataset,
        mut on_epoch: impl FnMut(&Trainer, &EpochMetrics) -> Result<()>,
    ) -> Result<Vec<EpochMetrics>> {
        self.train.validate()?;
        if dataset.is_empty() {
            return Err(Error::Invalid("cannot pretrain on an empty dataset".into()));
        }
        let batch = self.train.batch_size.min(dataset.len());
        let steps_per_epoch = dataset.len() / batch;
        if steps_per_epoch == 0 {
            return Err(Error::Invalid("dataset smaller than one batch".into()));
        }
        let mut metrics = Vec::with_capacity(self.train.total_epochs);
        for epoch in 0..self.train.total_epochs {
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            Rng::substream(self.train.seed, &[0x5f, epoch as u64]).shuffle(&mut order);
            let mut loss_sum = 0.0;
            let mut cos_sum = 0.0;
            let mut spike_sum = 0.0;
            let mut last_lr = 0.0;
            for step in 0..steps_per_epoch {
                let indices = &order[step * batch..(step + 1) * batch];
                let (x_a, x_b) = self.make_views(dataset, indices, epoch)?;
                let lr = lr_schedule(epoch, step, steps_per_epoch, &self.train);
                let diag = self.train_step(&x_a, &x_b, lr).map_err(|e| {
                    Error::Invalid(format!("epoch {epoch}, step {step}: {e}"))
                })?;
                loss_sum += diag.loss;
                cos_sum += diag.grad_cosine;
                spike_sum += diag.spike_rate;
                last_lr = lr;
            }
            let n = steps_per_epoch as f64;
            let em = EpochMetrics {
                epoch,
                loss: loss_sum / n,
                lr: last_lr,
                grad_cosine: cos_sum / n,
                spike_rate: spike_sum / n,
            };
            on_epoch(self, &em)?;
            metrics.push(em);
        }
        Ok(metrics)
    }
}

/// Treat a raw sample as a (C, H, W) image; plain feature vectors become
/// (F, 1, 1) so per-channel jitter acts coordinate-wise.
fn as_image(sample: &Tensor) -> Result<Tensor> {
    match sample.ndim() {
        3 => Ok(sample.clone()),
        1 => sample.reshaped(vec![sample.len(), 1, 1]),
        other => Err(Error::Shape(format!("sample must be 1-D or 3-D, got {other}-D"))),
    }
}

fn from_image(image: &Tensor, original_shape: &[usize]) -> Tensor {
    image.reshaped(original_shape.to_vec()).expect("augmentation preserves element count")
}

/// Stack per-sample frame lists into per-timestep batch tensors.
fn stack_frames(samples: &[Vec<Tensor>], timesteps: usize) -> Result<Vec<Tensor>> {
    let batch = samples.len();
    let mut out = Vec::with_capacity(timesteps);
    for t in 0..timesteps {
        let shape = samples[0][t].shape();
        let inner: usize = shape.iter().product();
        let mut data = Vec::with_capacity(batch * inner);
        for s in samples {
            if s[t].shape() != shape {
                return Err(Error::Shape("inconsistent frame shapes in batch".into()));
            }
            data.extend_from_slice(s[t].data());
        }
        let mut full = vec![batch];
        full.extend_from_slice(shape);
        out.push(Tensor::new(full, data)?);
    }
    Ok(out)
}

impl GradientMap {
    /// Cosine similarity of two gradient maps after flattening all entries
    /// in key order.
    pub fn cosine(&self, other: &GradientMap) -> Result<f64> {
        let a = self.flatten();
        let b = other.flatten();
        if a.len() != b.len() || !self.keys().eq(other.keys()) {
            return Err(Error::Invalid("gradient keysets differ in cosine".into()));
        }
        let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(dot / (na * nb + 1e-12))
    }
}
