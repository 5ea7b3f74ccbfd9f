//! Acceptance suite: one test per shipping criterion, each printing a
//! PASS line with measured details (visible under `--nocapture`). Fixed
//! tolerances and runtime bounds are asserted in place.

use std::time::Instant;

use snn_ssl::analysis::{linear_eval, EvalConfig};
use snn_ssl::augment::AugmentConfig;
use snn_ssl::dataio::{self, synth_clusters, synth_images, Dataset, DatasetKind, Dtype};
use snn_ssl::loss::{LossConfig, LossMode};
use snn_ssl::network::{build_network, LayerSpec, NetworkSpec};
use snn_ssl::neuron::{NeuronConfig, NeuronKind};
use snn_ssl::tensor::Precision;
use snn_ssl::trainer::{TrainConfig, Trainer};
use snn_ssl::verify;

fn pass(criterion: u32, label: &str, detail: &str) {
    println!("criterion {criterion} ({label}): PASS - {detail}");
}

fn run_check(criterion: u32, label: &str, outcome: Result<String, String>) {
    match outcome {
        Ok(detail) => pass(criterion, label, &detail),
        Err(detail) => {
            println!("criterion {criterion} ({label}): FAIL - {detail}");
            panic!("criterion {criterion} ({label}) failed: {detail}");
        }
    }
}

#[test]
fn criterion_01_gradient_fusion_identity() {
    let start = Instant::now();
    let outcome = verify::check_gradient_fusion();
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 10.0, "criterion 1 runtime {elapsed:.2}s >= 10s");
    run_check(1, "gradient-fusion identity", outcome.map(|d| format!("{d}; {elapsed:.2}s")));
}

#[test]
fn criterion_02_finite_difference_checks() {
    run_check(2, "finite-difference gradients", verify::check_finite_differences());
    run_check(2, "surrogate backward exactness", verify::check_surrogate_exactness());
}

#[test]
fn criterion_03_pair_count_law() {
    run_check(3, "pair-count law", verify::check_pair_counts());
}

#[test]
fn criterion_04_loss_invariances() {
    run_check(4, "loss invariances", verify::check_loss_invariances());
}

#[test]
fn criterion_05_membrane_closed_form() {
    run_check(5, "closed-form membrane", verify::check_closed_form_membrane());
}

#[test]
fn criterion_06_batchnorm_folding() {
    run_check(6, "batch-norm fold equivalence", verify::check_bn_fold());
}

#[test]
fn criterion_07_energy_arithmetic() {
    run_check(7, "energy arithmetic", verify::check_energy_arithmetic());
}

// ---------------------------------------------------------------- 8 & 9

fn cluster_spec() -> NetworkSpec {
    let neuron = NeuronConfig::default(); // MixedLIF, tau 0.5, threshold 1, width 1, hard reset
    NetworkSpec {
        input_shape: vec![32],
        backbone: vec![
            LayerSpec::Dense { input: 32, output: 64 },
            LayerSpec::BatchNorm { features: 64 },
            LayerSpec::Neuron(neuron),
            LayerSpec::Dense { input: 64, output: 64 },
            LayerSpec::BatchNorm { features: 64 },
            LayerSpec::Neuron(neuron),
        ],
        head: vec![
            LayerSpec::Dense { input: 64, output: 64 },
            LayerSpec::Dense { input: 64, output: 32 },
        ],
        head_activation: (0.5, 1.0),
        timesteps: 4,
    }
}

fn image_spec(kind: NeuronKind) -> NetworkSpec {
    // slow leak: timesteps integrate history, so cross-time alignment
    // carries signal on direct-encoded static images
    let neuron = NeuronConfig { kind, tau: 0.9, ..NeuronConfig::default() };
    NetworkSpec {
        input_shape: vec![1, 28, 28],
        backbone: vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { input: 784, output: 64 },
            LayerSpec::BatchNorm { features: 64 },
            LayerSpec::Neuron(neuron),
            LayerSpec::Dense { input: 64, output: 64 },
            LayerSpec::BatchNorm { features: 64 },
            LayerSpec::Neuron(neuron),
        ],
        head: vec![
            LayerSpec::Dense { input: 64, output: 64 },
            LayerSpec::Dense { input: 64, output: 32 },
        ],
        head_activation: (0.5, 1.0),
        timesteps: 4,
    }
}

fn pretrain_once(
    spec: &NetworkSpec,
    dataset: &Dataset,
    mode: LossMode,
    epochs: usize,
    warmup: usize,
    batch: usize,
    seed: u64,
    augment: AugmentConfig,
) -> (Trainer, Vec<f64>) {
    let train = TrainConfig {
        lr: 0.01,
        weight_decay: 1.5e-6,
        momentum: 0.9,
        warmup_epochs: warmup,
        total_epochs: epochs,
        batch_size: batch,
        loss: LossConfig { mode, lambda: 0.005, epsilon_norm: 1e-12 },
        seed,
        precision: Precision::F32,
        checkpoint_every: 0,
    };
    let mut trainer = Trainer::new(spec.clone(), train, augment).expect("valid config");
    let metrics = trainer.pretrain(dataset, |_, _| Ok(())).expect("pretraining runs");
    let losses = metrics.iter().map(|m| m.loss).collect();
    (trainer, losses)
}

fn smoothed(losses: &[f64], range: std::ops::Range<usize>) -> f64 {
    let window = &losses[range];
    window.iter().sum::<f64>() / window.len() as f64
}

/// Desk-scale SSL learning: pretrained frozen features must reach 95%
/// linear-eval accuracy while a frozen random-init backbone stays at or
/// below 75%, with a 20-point gap, for each of 3 seeds, in under 5 CPU
/// minutes.
#[test]
fn criterion_08_desk_scale_ssl_learning() {
    let start = Instant::now();
    let dataset = synth_clusters(500, 4, 32, 0.1, 42).expect("cluster dataset");
    assert_eq!(dataset.len(), 2000);
    let spec = cluster_spec();
    let augment = AugmentConfig { jitter: 0.2, ..AugmentConfig::default() };
    let mut details = Vec::new();
    for seed in [1u64, 2, 3] {
        let (trainer, losses) =
            pretrain_once(&spec, &dataset, LossMode::Boundary, 50, 5, 128, seed, augment);
        // smoothed loss late in training sits below the early plateau
        assert!(
            smoothed(&losses, 45..50) < smoothed(&losses, 0..5),
            "seed {seed}: loss did not decrease ({losses:?})"
        );
        let eval = EvalConfig { seed, ..EvalConfig::default() };
        let pretrained_acc = linear_eval(&trainer.params, &spec, &dataset, &eval).expect("probe");
        let random_params = build_network(&spec, seed + 100).expect("init");
        let random_acc = linear_eval(&random_params, &spec, &dataset, &eval).expect("probe");
        let gap = pretrained_acc - random_acc;
        details.push(format!(
            "seed {seed}: pretrained {:.1}%, random-init {:.1}%, gap {:.1}",
            pretrained_acc * 100.0,
            random_acc * 100.0,
            gap * 100.0
        ));
        assert!(pretrained_acc >= 0.95, "seed {seed}: pretrained accuracy {pretrained_acc} < 0.95");
        assert!(random_acc <= 0.75, "seed {seed}: random-init accuracy {random_acc} > 0.75");
        assert!(gap >= 0.20, "seed {seed}: gap {gap} < 0.20");
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 300.0, "criterion 8 runtime {elapsed:.0}s >= 300s");
    pass(8, "desk-scale SSL learning", &format!("{}; {elapsed:.0}s", details.join("; ")));
}

/// Directional ablation: over 3 seeds, mean linear-eval accuracy of
/// MixedLIF+BTL must be at least that of MixedLIF+NCL and of
/// LIF-in-both-lanes+BTL (ordering of seed-means, no fixed margin), on a
/// 10-class 28x28 image set written and reloaded through the tensor
/// container, in under 1 CPU hour.
#[test]
fn criterion_09_directional_ablation() {
    let start = Instant::now();
    let generated = synth_images(600, 10, 28, 28, 0.05, 77).expect("image dataset");
    // round-trip through the container format
    let dir = std::env::temp_dir().join(format!("snn-accept-{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("temp dir");
    let inputs_path = dir.join("images.snnt");
    let labels_path = dir.join("labels.snnt");
    dataio::write_tensor(&inputs_path, &generated.inputs, Dtype::F64).expect("write inputs");
    let labels: Vec<f64> = generated.labels.as_ref().unwrap().iter().map(|&l| l as f64).collect();
    dataio::write_tensor(
        &labels_path,
        &snn_ssl::tensor::Tensor::new(vec![labels.len()], labels).unwrap(),
        Dtype::U8,
    )
    .expect("write labels");
    let dataset = Dataset::from_files(&inputs_path, Some(&labels_path), DatasetKind::Static)
        .expect("reload dataset");
    assert_eq!(dataset.len(), 6000);

    // the standard heavy crop/flip/jitter recipe; on orientation classes
    // the flips make the invariance target genuinely hard, which is the
    // regime where the objectives separate
    let augment = AugmentConfig {
        crop_scale: (0.5, 1.0),
        flip_prob: 0.5,
        jitter: 0.2,
        ..AugmentConfig::default()
    };
    // 5000 train / 1000 held out
    let eval_base = EvalConfig { epochs: 100, train_fraction: 5000.0 / 6000.0, ..EvalConfig::default() };

    let mut means = Vec::new();
    for (label, kind, mode) in [
        ("MixedLIF+BTL", NeuronKind::MixedLif, LossMode::Boundary),
        ("MixedLIF+NCL", NeuronKind::MixedLif, LossMode::NonCross),
        ("LIF+BTL", NeuronKind::Lif, LossMode::Boundary),
    ] {
        let spec = image_spec(kind);
        let mut accs = Vec::new();
        for seed in [1u64, 2, 3] {
            let (trainer, _) = pretrain_once(&spec, &dataset, mode, 30, 3, 125, seed, augment);
            // all arms are scored on one fixed held-out split (paired design)
            let eval = EvalConfig { seed: 0, ..eval_base };
            let acc = linear_eval(&trainer.params, &spec, &dataset, &eval).expect("probe");
            accs.push(acc);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        println!(
            "  {label}: per-seed {:?}, mean {:.3}",
            accs.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            mean
        );
        means.push((label, mean));
    }
    let btl = means[0].1;
    let ncl = means[1].1;
    let lif = means[2].1;
    assert!(btl >= ncl, "MixedLIF+BTL mean {btl:.3} < MixedLIF+NCL mean {ncl:.3}");
    assert!(btl >= lif, "MixedLIF+BTL mean {btl:.3} < LIF+BTL mean {lif:.3}");
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 3600.0, "criterion 9 runtime {elapsed:.0}s >= 1h");
    pass(
        9,
        "directional ablation",
        &format!("BTL {btl:.3} >= NCL {ncl:.3}, BTL {btl:.3} >= LIF+BTL {lif:.3}; {elapsed:.0}s"),
    );
}

#[test]
fn criterion_10_kl_tooling() {
    // full-scale per-timestep KL reference values (~0.25) are not
    // reproduced at desk scale; only the tooling contracts are asserted.
    run_check(10, "histogram KL tooling", verify::check_kl());
}

#[test]
fn criterion_11_spike_rate_bounds() {
    run_check(11, "spike-rate bounds", verify::check_spike_bounds());
}

/// The selfcheck command runs criteria 1-7, 10, 11 end-to-end in under a
/// minute and exits zero.
#[test]
fn criterion_12_selfcheck_command() {
    let start = Instant::now();
    let code = snn_ssl::cli::run(&["selfcheck".to_string()]);
    let elapsed = start.elapsed().as_secs_f64();
    assert_eq!(code, 0, "selfcheck exited {code}");
    assert!(elapsed < 60.0, "selfcheck runtime {elapsed:.1}s >= 60s");
    pass(12, "selfcheck command", &format!("exit 0 in {elapsed:.2}s"));
}
