//! Built-in verification battery: gradient-fusion identity, margin-checked
//! finite-difference gradient checks, pair-count laws, loss invariances,
//! the closed-form membrane oracle, batch-norm fold equivalence, energy
//! arithmetic, KL tooling, and spike-rate bounds. `snn selfcheck` runs all
//! of these and reports one PASS/FAIL line per check.

use crate::analysis::{
    count_active_ops, estimate_energy, kl_per_timestep, spike_rate_stats, EnergyModel,
    HistogramConfig, OpKind, SpikeReport,
};
use crate::dataio::{synth_clusters, Dataset, DatasetKind};
use crate::error::Result;
use crate::loss::{enumerate_pairs, temporal_loss_value, LossConfig, LossMode, PathId};
use crate::network::{
    build_network, fold_batchnorm, forward_path_embeddings, forward_spiking_inference,
    ForwardOptions, LayerSpec, NetworkSpec, Parameters,
};
use crate::neuron::{
    charge_value, closed_form_membrane, surrogate_gradient, NeuronConfig, NeuronKind,
};
use crate::rng::Rng;
use crate::tape::{finite_difference_gradient, ParamMap, Tape, Var};
use crate::tensor::{Precision, Tensor};
use crate::trainer::gradient_fusion_residual;

pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = std::result::Result<String, String>;

fn to_result(name: &'static str, outcome: Check) -> CheckResult {
    match outcome {
        Ok(detail) => CheckResult { name, passed: true, detail },
        Err(detail) => CheckResult { name, passed: false, detail },
    }
}

fn fail<T>(msg: String) -> std::result::Result<T, String> {
    Err(msg)
}

fn lift<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

/// Run the full battery; `corrupt_surrogate` deliberately breaks the spike
/// backward rule to demonstrate the gradient check catches it.
pub fn run_all(corrupt_surrogate: bool) -> Vec<CheckResult> {
    use crate::tape::test_hooks::CORRUPT_SURROGATE_BACKWARD;
    use std::sync::atomic::Ordering;
    CORRUPT_SURROGATE_BACKWARD.store(corrupt_surrogate, Ordering::SeqCst);
    let results = vec![
        to_result("gradient-fusion identity", check_gradient_fusion()),
        to_result("finite-difference gradients", check_finite_differences()),
        to_result("surrogate backward window", check_surrogate_exactness()),
        to_result("pair-count laws", check_pair_counts()),
        to_result("loss invariances", check_loss_invariances()),
        to_result("closed-form membrane", check_closed_form_membrane()),
        to_result("batch-norm fold equivalence", check_bn_fold()),
        to_result("energy arithmetic", check_energy_arithmetic()),
        to_result("histogram KL tooling", check_kl()),
        to_result("spike-rate bounds", check_spike_bounds()),
    ];
    CORRUPT_SURROGATE_BACKWARD.store(false, Ordering::SeqCst);
    results
}

fn random_mlp_spec(rng: &mut Rng, timesteps: usize, kind: NeuronKind) -> NetworkSpec {
    let input = 3 + rng.below(4);
    let hidden = 4 + rng.below(5);
    let layers = 2 + rng.below(2); // 2..=3 parameterized backbone layers
    let cfg = NeuronConfig { kind, tau: rng.range(0.1, 0.9), ..NeuronConfig::default() };
    let mut backbone = Vec::new();
    let mut width = input;
    for i in 0..layers {
        let out = if i + 1 == layers { hidden } else { 4 + rng.below(5) };
        backbone.push(LayerSpec::Dense { input: width, output: out });
        backbone.push(LayerSpec::BatchNorm { features: out });
        backbone.push(LayerSpec::Neuron(cfg));
        width = out;
    }
    NetworkSpec {
        input_shape: vec![input],
        backbone,
        head: vec![LayerSpec::Dense { input: width, output: 4 }],
        head_activation: (0.5, 1.0),
        timesteps,
    }
}

fn random_frames(rng: &mut Rng, spec: &NetworkSpec, batch: usize) -> Vec<Tensor> {
    let shape = [&[batch][..], &spec.input_shape[..]].concat();
    (0..spec.timesteps).map(|_| Tensor::random_normal(&shape, 1.0, rng)).collect()
}

/// Criterion: on >= 20 random tiny configurations, the two-pass gradients
/// sum to the joint gradient within 1e-10 relative (64-bit).
pub fn check_gradient_fusion() -> Check {
    let mut rng = Rng::new(0xf051);
    let modes = [LossMode::CrossTemporal, LossMode::Boundary, LossMode::NonCross];
    let kinds = [NeuronKind::MixedLif, NeuronKind::Lif, NeuronKind::If];
    let mut worst = 0.0f64;
    for i in 0..20 {
        let t = [1, 2, 4][i % 3];
        let b = [2, 4, 8][(i / 3) % 3];
        let spec = random_mlp_spec(&mut rng, t, kinds[i % 3]);
        let params = lift(build_network(&spec, 1000 + i as u64))?;
        let x_a = random_frames(&mut rng, &spec, b);
        let x_b = random_frames(&mut rng, &spec, b);
        let cfg = LossConfig { mode: modes[i % 3], ..LossConfig::default() };
        let residual = lift(gradient_fusion_residual(&params, &spec, &x_a, &x_b, &cfg))?;
        worst = worst.max(residual);
        if residual >= 1e-10 {
            return fail(format!("config {i}: fusion residual {residual:.3e} >= 1e-10"));
        }
    }
    Ok(format!("20 configs, worst residual {worst:.3e}"))
}

/// Merge perturbed trainable tensors back over the full parameter set.
fn with_trainables(base: &Parameters, trainables: &ParamMap) -> Parameters {
    let mut values = base.values().clone();
    for (k, v) in trainables {
        values.insert(k.clone(), v.clone());
    }
    Parameters::from_map(values)
}

/// Criterion: on path-B-dominant networks with every recorded input at
/// margin >= 10h from clip kinks and reset-gate thresholds, the recorded
/// backward matches central differences within 1e-6 relative (64-bit).
pub fn check_finite_differences() -> Check {
    let step = 1e-5;
    let mut accepted = 0;
    let mut seed = 0u64;
    let mut worst = 0.0f64;
    while accepted < 3 {
        seed += 1;
        if seed > 60 {
            return fail("could not find 3 configurations clear of kinks".into());
        }
        let mut rng = Rng::new(0xfd00 + seed);
        let spec = random_mlp_spec(&mut rng, 2, NeuronKind::MixedLif);
        let params = lift(build_network(&spec, seed))?;
        let frames = random_frames(&mut rng, &spec, 3);
        // frozen targets for the other path so only path B varies under fd
        let z_targets: Vec<Tensor> = {
            let mut tape = Tape::new(Precision::F64);
            let z = lift(forward_path_embeddings(
                &mut tape,
                &mut params.clone(),
                &spec,
                &frames,
                PathId::A,
                &ForwardOptions::default(),
            ))?;
            z.iter().map(|v| tape.value(*v).clone()).collect()
        };
        let cfg = LossConfig { mode: LossMode::Boundary, ..LossConfig::default() };

        let build = |p: &Parameters, tape: &mut Tape| -> Result<Var> {
            let z_b = forward_path_embeddings(
                tape,
                &mut p.clone(),
                &spec,
                &frames,
                PathId::B,
                &ForwardOptions::default(),
            )?;
            let z_a: Vec<Var> = z_targets.iter().map(|t| tape.constant(t.clone())).collect();
            Ok(crate::loss::temporal_loss_on(tape, &z_a, &z_b, &cfg)?.value)
        };

        let mut tape = Tape::new(Precision::F64);
        let root = lift(build(&params, &mut tape))?;
        if tape.kink_margin() < 10.0 * step {
            continue; // too close to a nonsmooth point; next seed
        }
        accepted += 1;
        let analytic = lift(tape.backward(root))?;
        let numeric = lift(finite_difference_gradient(
            |p: &ParamMap| {
                let full = with_trainables(&params, p);
                let mut t = Tape::new(Precision::F64);
                let root = build(&full, &mut t)?;
                Ok(t.value(root).item())
            },
            &params.trainable_map(),
            step,
        ))?;
        let rel = lift(analytic.max_rel_diff(&numeric))?;
        worst = worst.max(rel);
        if rel >= 1e-6 {
            return fail(format!("seed {seed}: max relative error {rel:.3e} >= 1e-6"));
        }
    }
    Ok(format!("3 margin-checked networks, worst relative error {worst:.3e}"))
}

/// Criterion: the recorded spike backward equals the rectangular window
/// values exactly.
pub fn check_surrogate_exactness() -> Check {
    let cfg = NeuronConfig { surrogate_width: 0.8, ..NeuronConfig::default() };
    let mut rng = Rng::new(0x5e0);
    let h = Tensor::random_uniform(&[64], -0.5, 2.5, &mut rng);
    let weights = Tensor::random_normal(&[64], 1.0, &mut rng);
    let mut tape = Tape::new(Precision::F64);
    let hv = lift(tape.parameter("h", h.clone()))?;
    let spikes = lift(tape.heaviside_surrogate(hv, cfg.v_threshold, cfg.surrogate_width))?;
    let wv = tape.constant(weights.clone());
    let prod = lift(tape.mul(spikes, wv))?;
    let root = lift(tape.sum(prod))?;
    let grad = lift(tape.backward(root))?;
    let got = grad.get("h").expect("registered parameter");
    let window = surrogate_gradient(&h, &cfg);
    for i in 0..h.len() {
        let expected = window.data()[i] * weights.data()[i];
        if got.data()[i] != expected {
            return fail(format!(
                "element {i}: backward {} != window value {expected}",
                got.data()[i]
            ));
        }
    }
    Ok("recorded backward equals window values exactly (64 samples)".into())
}

/// Criterion: 28 / 6 / 4 pairs at T=4 and T(2T-1) / 6 / T for T in 1..=8.
pub fn check_pair_counts() -> Check {
    for (mode, expect4) in
        [(LossMode::CrossTemporal, 28), (LossMode::Boundary, 6), (LossMode::NonCross, 4)]
    {
        let n = lift(enumerate_pairs(4, mode))?.len();
        if n != expect4 {
            return fail(format!("{mode:?} at T=4: {n} pairs, expected {expect4}"));
        }
    }
    for t in 1..=8usize {
        let expect = [t * (2 * t - 1), if t == 1 { 1 } else { 6 }, t];
        for (mode, want) in
            [LossMode::CrossTemporal, LossMode::Boundary, LossMode::NonCross].iter().zip(expect)
        {
            // instrumented counter: the loss must actually evaluate that many terms
            let mut rng = Rng::new(t as u64);
            let z: Vec<Tensor> = (0..t).map(|_| Tensor::random_normal(&[3, 2], 1.0, &mut rng)).collect();
            let z2: Vec<Tensor> = (0..t).map(|_| Tensor::random_normal(&[3, 2], 1.0, &mut rng)).collect();
            let cfg = LossConfig { mode: *mode, ..LossConfig::default() };
            let (_, count) = lift(temporal_loss_value(&z, &z2, &cfg))?;
            if count != want {
                return fail(format!("{mode:?} at T={t}: evaluated {count} terms, expected {want}"));
            }
        }
    }
    Ok("counts match T(2T-1) / 6 / T for T in 1..=8 (boundary = 1 at T=1)".into())
}

/// Criterion: path swap, one-path sign flip, per-feature positive scaling,
/// and batch permutation each change the loss by < 1e-9 relative over 100
/// random instances; boundary == cross-temporal at T=2 within 1e-12.
pub fn check_loss_invariances() -> Check {
    let mut rng = Rng::new(0x10f);
    let modes = [LossMode::CrossTemporal, LossMode::Boundary, LossMode::NonCross];
    for i in 0..100 {
        let t = 1 + rng.below(4);
        let b = 2 + rng.below(4);
        let d = 2 + rng.below(4);
        let mode = modes[i % 3];
        let cfg = LossConfig { mode, ..LossConfig::default() };
        let za: Vec<Tensor> = (0..t).map(|_| Tensor::random_normal(&[b, d], 1.0, &mut rng)).collect();
        let zb: Vec<Tensor> = (0..t).map(|_| Tensor::random_normal(&[b, d], 1.0, &mut rng)).collect();
        let (base, _) = lift(temporal_loss_value(&za, &zb, &cfg))?;
        let rel = |v: f64| (v - base).abs() / base.abs().max(1e-12);

        let (swapped, _) = lift(temporal_loss_value(&zb, &za, &cfg))?;
        if rel(swapped) >= 1e-9 {
            return fail(format!("instance {i}: path swap moved loss by {:.3e}", rel(swapped)));
        }

        let neg: Vec<Tensor> = zb.iter().map(|z| z.map(|x| -x)).collect();
        let (flipped, _) = lift(temporal_loss_value(&za, &neg, &cfg))?;
        if rel(flipped) >= 1e-9 {
            return fail(format!("instance {i}: sign flip moved loss by {:.3e}", rel(flipped)));
        }

        // scale one feature column of one participating embedding
        let step = rng.below(t);
        let col = rng.below(d);
        let c = rng.range(0.2, 5.0);
        let mut scaled_za = za.clone();
        let scaled: Vec<f64> = scaled_za[step]
            .data()
            .iter()
            .enumerate()
            .map(|(j, &x)| if j % d == col { c * x } else { x })
            .collect();
        scaled_za[step] = lift(Tensor::new(vec![b, d], scaled))?;
        let (rescaled, _) = lift(temporal_loss_value(&scaled_za, &zb, &cfg))?;
        if rel(rescaled) >= 1e-9 {
            return fail(format!("instance {i}: column scaling moved loss by {:.3e}", rel(rescaled)));
        }

        // identical batch permutation everywhere
        let mut perm: Vec<usize> = (0..b).collect();
        rng.shuffle(&mut perm);
        let permute = |z: &Tensor| -> Tensor {
            let mut data = Vec::with_capacity(b * d);
            for &row in &perm {
                data.extend_from_slice(&z.data()[row * d..(row + 1) * d]);
            }
            Tensor::new(vec![b, d], data).expect("permutation preserves shape")
        };
        let pa: Vec<Tensor> = za.iter().map(permute).collect();
        let pb: Vec<Tensor> = zb.iter().map(permute).collect();
        let (permuted, _) = lift(temporal_loss_value(&pa, &pb, &cfg))?;
        if rel(permuted) >= 1e-9 {
            return fail(format!("instance {i}: batch permutation moved loss by {:.3e}", rel(permuted)));
        }
    }
    // boundary == cross-temporal at T=2
    for i in 0..20 {
        let mut rng = Rng::new(0xb7 + i);
        let za: Vec<Tensor> = (0..2).map(|_| Tensor::random_normal(&[4, 3], 1.0, &mut rng)).collect();
        let zb: Vec<Tensor> = (0..2).map(|_| Tensor::random_normal(&[4, 3], 1.0, &mut rng)).collect();
        let (ctl, _) = lift(temporal_loss_value(&za, &zb, &LossConfig { mode: LossMode::CrossTemporal, ..LossConfig::default() }))?;
        let (btl, _) = lift(temporal_loss_value(&za, &zb, &LossConfig { mode: LossMode::Boundary, ..LossConfig::default() }))?;
        if (ctl - btl).abs() > 1e-12 * ctl.abs().max(1.0) {
            return fail(format!("T=2 instance {i}: boundary {btl} != cross {ctl}"));
        }
    }
    Ok("4 invariances over 100 instances; boundary == cross at T=2".into())
}

/// Criterion: iterated charging equals the closed form within 1e-12 over
/// 100 random no-spike instances with T <= 16.
pub fn check_closed_form_membrane() -> Check {
    let mut rng = Rng::new(0xc10f);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let tau = rng.uniform();
        let t_total = 1 + rng.below(16);
        let cfg = NeuronConfig { tau, v_threshold: 1e9, ..NeuronConfig::default() };
        let h1 = Tensor::random_normal(&[4], 1.0, &mut rng);
        let inputs: Vec<Tensor> =
            (1..t_total).map(|_| Tensor::random_normal(&[4], 1.0, &mut rng)).collect();
        let mut v = h1.clone();
        for x in &inputs {
            v = lift(charge_value(&v, x, &cfg))?;
        }
        let closed = lift(closed_form_membrane(&h1, &inputs, tau))?;
        let diff = v.max_abs_diff(&closed);
        worst = worst.max(diff);
        if diff > 1e-12 {
            return fail(format!("instance {i} (tau={tau:.3}, T={t_total}): diff {diff:.3e}"));
        }
    }
    Ok(format!("100 instances, worst deviation {worst:.3e}"))
}

/// Dense or conv stacks with batch norm and no spike quantization, so the
/// folded/unfolded comparison sees the raw numeric deviation.
fn random_bn_network(seed: u64) -> (NetworkSpec, Parameters) {
    let mut rng = Rng::new(seed);
    let conv = seed % 2 == 0;
    let spec = if conv {
        NetworkSpec {
            input_shape: vec![1, 8, 8],
            backbone: vec![
                LayerSpec::Conv2d { in_channels: 1, out_channels: 4, kernel: 3, stride: 2, pad: 1 },
                LayerSpec::BatchNorm { features: 4 },
                LayerSpec::Conv2d { in_channels: 4, out_channels: 6, kernel: 3, stride: 2, pad: 1 },
                LayerSpec::BatchNorm { features: 6 },
                LayerSpec::PoolAvg,
            ],
            head: vec![],
            head_activation: (0.5, 1.0),
            timesteps: 2,
        }
    } else {
        NetworkSpec {
            input_shape: vec![6],
            backbone: vec![
                LayerSpec::Dense { input: 6, output: 8 },
                LayerSpec::BatchNorm { features: 8 },
                LayerSpec::Dense { input: 8, output: 5 },
                LayerSpec::BatchNorm { features: 5 },
            ],
            head: vec![],
            head_activation: (0.5, 1.0),
            timesteps: 2,
        }
    };
    let mut params = build_network(&spec, seed).expect("valid spec");
    for (i, layer) in spec.backbone.iter().enumerate() {
        if let LayerSpec::BatchNorm { features } = layer {
            let c = *features;
            params
                .set(&format!("backbone.{i}.running_mean"), Tensor::random_normal(&[c], 0.3, &mut rng))
                .unwrap();
            params
                .set(&format!("backbone.{i}.running_var"), Tensor::random_uniform(&[c], 0.4, 1.6, &mut rng))
                .unwrap();
            params
                .set(&format!("backbone.{i}.gamma"), Tensor::random_uniform(&[c], 0.5, 1.5, &mut rng))
                .unwrap();
            params
                .set(&format!("backbone.{i}.beta"), Tensor::random_normal(&[c], 0.3, &mut rng))
                .unwrap();
        }
    }
    (spec, params)
}

/// Criterion: folded vs unfolded eval-mode outputs agree within 1e-5
/// max-abs in 32-bit mode on 20 random dense/conv networks.
pub fn check_bn_fold() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let (spec, params) = random_bn_network(seed);
        let (folded, fspec) = lift(fold_batchnorm(&params, &spec))?;
        let mut rng = Rng::new(0xbf + seed);
        let shape = [&[3][..], &spec.input_shape[..]].concat();
        let frames: Vec<Tensor> =
            (0..spec.timesteps).map(|_| Tensor::random_normal(&shape, 1.0, &mut rng)).collect();
        let a = lift(forward_spiking_inference(&params, &spec, &frames, Precision::F32))?;
        let b = lift(forward_spiking_inference(&folded, &fspec, &frames, Precision::F32))?;
        for (x, y) in a.features.iter().zip(b.features.iter()) {
            let diff = x.max_abs_diff(y);
            worst = worst.max(diff);
            if diff >= 1e-5 {
                return fail(format!("network {seed}: folded/unfolded diff {diff:.3e} >= 1e-5"));
            }
        }
    }
    Ok(format!("20 networks, worst 32-bit deviation {worst:.3e}"))
}

/// Criterion: the published op-count -> energy rows reproduce exactly.
pub fn check_energy_arithmetic() -> Check {
    let m = EnergyModel::default();
    let cases = [
        (3600e6, OpKind::Mac, 11.16e-3),
        (828e6, OpKind::Ac, 0.0828e-3),
        (1569e6, OpKind::Ac, 0.1569e-3),
    ];
    for (ops, kind, want) in cases {
        let got = estimate_energy(ops, kind, &m);
        if (got - want).abs() / want > 1e-12 {
            return fail(format!("{ops} {kind:?}: {got} J, expected {want} J"));
        }
    }
    if estimate_energy(0.0, OpKind::Mac, &m) != 0.0 {
        return fail("zero ops must cost zero energy".into());
    }
    Ok("3600e6 MAC = 11.16 mJ; 828e6 AC = 0.0828 mJ; 1569e6 AC = 0.1569 mJ".into())
}

/// Criterion: identical features give per-timestep KL <= 1e-9, and the
/// point-mass-vs-uniform case matches its closed form (with epsilon).
pub fn check_kl() -> Check {
    let cfg = HistogramConfig::default();
    let mut rng = Rng::new(0x111);
    let feats: Vec<Tensor> = (0..4).map(|_| Tensor::random_normal(&[64], 1.0, &mut rng)).collect();
    let same = lift(kl_per_timestep(&feats, &feats, &cfg))?;
    if let Some(bad) = same.iter().find(|v| v.abs() > 1e-9) {
        return fail(format!("identical features gave KL {bad:.3e} > 1e-9"));
    }
    let p_vals = Tensor::full(&[64], 0.25);
    let q_vals = Tensor::new(vec![50], (0..50).map(|j| (j as f64 + 0.5) / 50.0).collect())
        .expect("uniform grid");
    let kl = lift(kl_per_timestep(&[p_vals], &[q_vals], &cfg))?[0];
    let e = cfg.epsilon;
    let q = 1.0 / 50.0 + e;
    let expected = (1.0 + e) * ((1.0 + e) / q).ln() + 49.0 * e * (e / q).ln();
    if (kl - expected).abs() > 1e-9 {
        return fail(format!("point-mass KL {kl} vs closed form {expected}"));
    }
    Ok(format!("identical -> 0; point-mass vs uniform = {kl:.6} (closed form, ~ln 50)"))
}

/// Criterion: zero input fires nothing; saturating drive fires every step
/// in the first neuron layer; all rates stay in [0, 1].
pub fn check_spike_bounds() -> Check {
    // zero weights: silence
    let mut rng = Rng::new(0x851e);
    let (spec, params) = {
        let spec = NetworkSpec {
            input_shape: vec![5],
            backbone: vec![
                LayerSpec::Dense { input: 5, output: 6 },
                LayerSpec::Neuron(NeuronConfig::default()),
            ],
            head: vec![],
            head_activation: (0.5, 1.0),
            timesteps: 3,
        };
        let mut p = build_network(&spec, 5).expect("valid spec");
        p.set("backbone.0.weight", Tensor::zeros(&[5, 6])).unwrap();
        (spec, p)
    };
    let zero_data = lift(Dataset::new(Tensor::zeros(&[4, 5]), None, DatasetKind::Static))?;
    let report = lift(spike_rate_stats(&params, &spec, &zero_data))?;
    if report.overall != 0.0 {
        return fail(format!("zero input produced rate {}", report.overall));
    }

    // saturating drive: every step fires in the first neuron layer
    let mut hot = params.clone();
    hot.set("backbone.0.weight", Tensor::full(&[5, 6], 10.0)).unwrap();
    let ones = lift(Dataset::new(Tensor::ones(&[4, 5]), None, DatasetKind::Static))?;
    let hot_report = lift(spike_rate_stats(&hot, &spec, &ones))?;
    if hot_report.rates[0].iter().any(|&r| r != 1.0) {
        return fail(format!("saturating input rates {:?} != 1.0", hot_report.rates[0]));
    }

    // random networks: rates in [0, 1]
    for trial in 0..5u64 {
        let spec = random_mlp_spec(&mut rng, 3, NeuronKind::MixedLif);
        let params = lift(build_network(&spec, 600 + trial))?;
        let dim = spec.input_shape[0];
        let data = lift(synth_clusters(10, 2, dim, 0.3, trial))?;
        let report = lift(spike_rate_stats(&params, &spec, &data))?;
        if !report.rates.iter().flatten().all(|&r| (0.0..=1.0).contains(&r)) {
            return fail(format!("trial {trial}: rate outside [0, 1]"));
        }
        let _ = count_active_ops(&spec, &report, spec.timesteps);
    }
    Ok("zero input silent, saturating drive at rate 1.0, random rates in [0, 1]".into())
}

/// Used by tests: a report with known values for op counting.
pub fn demo_report() -> SpikeReport {
    SpikeReport { layer_indices: vec![1], rates: vec![vec![0.25, 0.25]], overall: 0.25 }
}
