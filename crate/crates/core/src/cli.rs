//! Command-line entry point: pretraining, linear evaluation, spiking
//! inference, analysis reports, and the built-in verification battery,
//! all driven by a flat config file.
//!
//! Flags: `--config PATH`, `--seed U64`, `--out DIR`, `--threads N`,
//! `--precision {f32,f64}`, `--fold-bn`, `--checkpoint DIR`,
//! `--checkpoint-b DIR`, `--mode NAME`, `--inject-fault`. Every flag can
//! also come from an `SNN_`-prefixed environment variable (flag wins).
//! Exit codes: 0 ok, 1 runtime error, 2 config error.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use crate::analysis::{
    self, count_active_ops, estimate_energy, kl_per_timestep, spike_rate_stats, EnergyModel,
    HistogramConfig, OpKind,
};
use crate::config::{parse_run_config, RunConfig};
use crate::dataio::{self, Dataset, Dtype};
use crate::error::Error;
use crate::network::fold_batchnorm;
use crate::tensor::Precision;
use crate::trainer::{dual_path_gradients, Trainer};
use crate::verify;

const USAGE: &str = "\
usage: snn <command> [flags]

commands:
  pretrain      self-supervised pretraining      (needs --config, --out)
  linear-eval   probe frozen features            (needs --config, --checkpoint)
  infer         spiking-only inference           (needs --config, --checkpoint, --out)
  analyze       energy | spikes | kl | gradcos   (needs --config, --checkpoint, --mode, --out)
  selfcheck     run the built-in verification battery

flags (env fallback in parentheses):
  --config PATH        run configuration file            (SNN_CONFIG)
  --seed U64           override the config seed          (SNN_SEED)
  --out DIR            output directory                  (SNN_OUT)
  --threads N          bound for data-parallel sections  (SNN_THREADS, default 1)
  --precision f32|f64  numeric mode override             (SNN_PRECISION)
  --fold-bn            fold batch norm before inference  (SNN_FOLD_BN=true)
  --checkpoint DIR     parameter checkpoint to load
  --checkpoint-b DIR   second checkpoint (kl mode)
  --mode NAME          analyze mode
  --inject-fault       selfcheck: corrupt the surrogate backward on purpose
";

struct Cli {
    command: String,
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    threads: usize,
    precision: Option<Precision>,
    fold_bn: bool,
    checkpoint: Option<PathBuf>,
    checkpoint_b: Option<PathBuf>,
    mode: Option<String>,
    inject_fault: bool,
}

/// A failure coupled with the process exit code it maps to.
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Failure {
        Failure { code: 2, message: message.into() }
    }

    fn runtime(message: impl Into<String>) -> Failure {
        Failure { code: 1, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        match e {
            Error::Config { .. } => Failure::config(e.to_string()),
            other => Failure::runtime(other.to_string()),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn env_var(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.is_empty())
}

fn parse_cli(args: &[String]) -> std::result::Result<Cli, Failure> {
    if args.is_empty() {
        return Err(Failure::config("no command given"));
    }
    let mut cli = Cli {
        command: args[0].clone(),
        config: env_var("SNN_CONFIG").map(PathBuf::from),
        seed: None,
        out: env_var("SNN_OUT").map(PathBuf::from),
        threads: 1,
        precision: None,
        fold_bn: env_var("SNN_FOLD_BN").as_deref() == Some("true"),
        checkpoint: None,
        checkpoint_b: None,
        mode: None,
        inject_fault: false,
    };
    if let Some(s) = env_var("SNN_SEED") {
        cli.seed = Some(s.parse().map_err(|_| Failure::config(format!("SNN_SEED `{s}` is not an integer")))?);
    }
    if let Some(t) = env_var("SNN_THREADS") {
        cli.threads = t.parse().map_err(|_| Failure::config(format!("SNN_THREADS `{t}` is not an integer")))?;
    }
    if let Some(p) = env_var("SNN_PRECISION") {
        cli.precision = Some(parse_precision(&p)?);
    }
    let mut it = args[1..].iter();
    while let Some(flag) = it.next() {
        let mut value = |name: &str| {
            it.next().cloned().ok_or_else(|| Failure::config(format!("{name} needs a value")))
        };
        match flag.as_str() {
            "--config" => cli.config = Some(PathBuf::from(value("--config")?)),
            "--seed" => {
                let v = value("--seed")?;
                cli.seed =
                    Some(v.parse().map_err(|_| Failure::config(format!("--seed `{v}` is not an integer")))?);
            }
            "--out" => cli.out = Some(PathBuf::from(value("--out")?)),
            "--threads" => {
                let v = value("--threads")?;
                cli.threads =
                    v.parse().map_err(|_| Failure::config(format!("--threads `{v}` is not an integer")))?;
            }
            "--precision" => cli.precision = Some(parse_precision(&value("--precision")?)?),
            "--fold-bn" => cli.fold_bn = true,
            "--checkpoint" => cli.checkpoint = Some(PathBuf::from(value("--checkpoint")?)),
            "--checkpoint-b" => cli.checkpoint_b = Some(PathBuf::from(value("--checkpoint-b")?)),
            "--mode" => cli.mode = Some(value("--mode")?),
            "--inject-fault" => cli.inject_fault = true,
            other => return Err(Failure::config(format!("unknown flag `{other}`"))),
        }
    }
    if cli.threads == 0 {
        return Err(Failure::config("--threads must be >= 1"));
    }
    Ok(cli)
}

fn parse_precision(s: &str) -> std::result::Result<Precision, Failure> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(Failure::config(format!("precision must be f32 or f64, got `{other}`"))),
    }
}

fn load_config(cli: &Cli) -> std::result::Result<RunConfig, Failure> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::config("--config is required for this command"))?;
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg = parse_run_config(&text)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.eval.seed = seed;
    }
    if let Some(precision) = cli.precision {
        cfg.train.precision = precision;
    }
    Ok(cfg)
}

fn load_dataset(cfg: &RunConfig) -> std::result::Result<Dataset, Failure> {
    let data = cfg
        .data
        .as_ref()
        .ok_or_else(|| Failure::config("this command needs a [data] section"))?;
    Ok(data.load()?)
}

fn require_out(cli: &Cli) -> std::result::Result<PathBuf, Failure> {
    let out = cli.out.clone().ok_or_else(|| Failure::config("--out is required for this command"))?;
    fs::create_dir_all(&out).map_err(|e| Failure::runtime(format!("cannot create {}: {e}", out.display())))?;
    Ok(out)
}

fn require_checkpoint(cli: &Cli) -> std::result::Result<PathBuf, Failure> {
    cli.checkpoint.clone().ok_or_else(|| Failure::config("--checkpoint is required for this command"))
}

/// Dispatch and map failures to exit codes.
pub fn run(args: &[String]) -> i32 {
    let cli = match parse_cli(args) {
        Ok(cli) => cli,
        Err(f) => {
            eprintln!("error: {}", f.message);
            eprint!("{USAGE}");
            return f.code;
        }
    };
    let outcome = match cli.command.as_str() {
        "pretrain" => cmd_pretrain(&cli),
        "linear-eval" => cmd_linear_eval(&cli),
        "infer" => cmd_infer(&cli),
        "analyze" => cmd_analyze(&cli),
        "selfcheck" => cmd_selfcheck(&cli),
        "help" | "--help" | "-h" => {
            print!("{USAGE}");
            Ok(())
        }
        other => Err(Failure::config(format!("unknown command `{other}`"))),
    };
    match outcome {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn cmd_pretrain(cli: &Cli) -> CmdResult {
    let cfg = load_config(cli)?;
    let dataset = load_dataset(&cfg)?;
    let out = require_out(cli)?;
    let mut trainer = Trainer::new(cfg.network.clone(), cfg.train, cfg.augment)?;
    // one tab-separated line per epoch: epoch, loss, lr, grad_cos, mean_spike_rate
    let metrics_path = out.join("metrics.tsv");
    let mut metrics_file = fs::File::create(&metrics_path)
        .map_err(|e| Failure::runtime(format!("cannot create metrics log: {e}")))?;
    let every = cfg.train.checkpoint_every;
    trainer.pretrain(&dataset, |t, em| {
        writeln!(metrics_file, "{}", em.tsv_line()).map_err(Error::from)?;
        metrics_file.flush().map_err(Error::from)?;
        if every > 0 && (em.epoch + 1) % every == 0 {
            dataio::save_params(&out.join(format!("checkpoint_epoch{}", em.epoch)), &t.params)?;
        }
        Ok(())
    })?;
    dataio::save_params(&out.join("checkpoint_final"), &trainer.params)?;
    println!(
        "pretrained {} epochs; metrics at {}; final checkpoint at {}",
        cfg.train.total_epochs,
        metrics_path.display(),
        out.join("checkpoint_final").display()
    );
    Ok(())
}

fn cmd_linear_eval(cli: &Cli) -> CmdResult {
    let cfg = load_config(cli)?;
    let dataset = load_dataset(&cfg)?;
    let params = dataio::load_params(&require_checkpoint(cli)?)?;
    let accuracy = analysis::linear_eval(&params, &cfg.network, &dataset, &cfg.eval)?;
    println!("top1_accuracy\t{accuracy:.4}");
    if let Some(out) = &cli.out {
        fs::create_dir_all(out).map_err(|e| Failure::runtime(e.to_string()))?;
        fs::write(out.join("linear_eval.tsv"), format!("top1_accuracy\t{accuracy:.6}\n"))
            .map_err(|e| Failure::runtime(e.to_string()))?;
    }
    Ok(())
}

fn cmd_infer(cli: &Cli) -> CmdResult {
    let cfg = load_config(cli)?;
    let dataset = load_dataset(&cfg)?;
    let out = require_out(cli)?;
    let params = dataio::load_params(&require_checkpoint(cli)?)?;
    let (params, spec) = if cli.fold_bn {
        fold_batchnorm(&params, &cfg.network)?
    } else {
        (params, cfg.network.clone())
    };
    let features = analysis::extract_features(&params, &spec, &dataset)?;
    dataio::write_tensor(&out.join("features.snnt"), &features, Dtype::F32)
        .or_else(|_| dataio::write_tensor(&out.join("features.snnt"), &features, Dtype::F64))?;
    let report = spike_rate_stats(&params, &spec, &dataset)?;
    fs::write(out.join("spikes.tsv"), report.tsv()).map_err(|e| Failure::runtime(e.to_string()))?;
    dataio::write_tensor(&out.join("spikes.snnt"), &report.to_tensor(), Dtype::F64)?;
    println!(
        "inference over {} samples; mean spike rate {:.4}; reports in {}",
        dataset.len(),
        report.overall,
        out.display()
    );
    Ok(())
}

fn cmd_analyze(cli: &Cli) -> CmdResult {
    let cfg = load_config(cli)?;
    let mode = cli.mode.clone().ok_or_else(|| Failure::config("--mode is required for analyze"))?;
    let out = require_out(cli)?;
    let dataset = load_dataset(&cfg)?;
    let params = dataio::load_params(&require_checkpoint(cli)?)?;
    let spec = &cfg.network;
    match mode.as_str() {
        "energy" => {
            let report = spike_rate_stats(&params, spec, &dataset)?;
            let model = EnergyModel::default();
            let active = count_active_ops(spec, &report, spec.timesteps)?;
            let ac_energy = estimate_energy(active, OpKind::Ac, &model);
            // dense reference: every synapse active once, multiply-accumulate
            let dense: f64 = analysis::synaptic_ops_per_layer(spec)?.iter().map(|(_, ops)| ops).sum();
            let mac_energy = estimate_energy(dense, OpKind::Mac, &model);
            let text = format!(
                "mean_spike_rate\t{:.6}\nactive_ac_ops\t{:.1}\nac_energy_mj\t{:.9}\ndense_mac_ops\t{:.1}\nmac_energy_mj\t{:.9}\nenergy_ratio\t{:.3}\n",
                report.overall,
                active,
                ac_energy * 1e3,
                dense,
                mac_energy * 1e3,
                mac_energy / ac_energy.max(f64::MIN_POSITIVE)
            );
            fs::write(out.join("energy.tsv"), &text).map_err(|e| Failure::runtime(e.to_string()))?;
            print!("{text}");
        }
        "spikes" => {
            let report = spike_rate_stats(&params, spec, &dataset)?;
            fs::write(out.join("spikes.tsv"), report.tsv()).map_err(|e| Failure::runtime(e.to_string()))?;
            dataio::write_tensor(&out.join("spikes.snnt"), &report.to_tensor(), Dtype::F64)?;
            println!("overall spike rate {:.4}; report in {}", report.overall, out.display());
        }
        "kl" => {
            let other = cli
                .checkpoint_b
                .clone()
                .ok_or_else(|| Failure::config("kl mode needs --checkpoint-b"))?;
            let params_b = dataio::load_params(&other)?;
            let f1 = analysis::features_per_timestep(&params, spec, &dataset)?;
            let f2 = analysis::features_per_timestep(&params_b, spec, &dataset)?;
            let kl = kl_per_timestep(&f1, &f2, &HistogramConfig::default())?;
            let mut text = String::from("timestep\tkl\n");
            for (t, v) in kl.iter().enumerate() {
                text.push_str(&format!("{t}\t{v:.6}\n"));
            }
            fs::write(out.join("kl.tsv"), &text).map_err(|e| Failure::runtime(e.to_string()))?;
            print!("{text}");
        }
        "gradcos" => {
            let batch = cfg.train.batch_size.min(dataset.len());
            let trainer = Trainer::from_params(params, spec.clone(), cfg.train, cfg.augment);
            let indices: Vec<usize> = (0..batch).collect();
            let (x_a, x_b) = trainer.make_views(&dataset, &indices, 0)?;
            let duals = dual_path_gradients(
                &mut trainer.params.clone(),
                spec,
                &x_a,
                &x_b,
                &cfg.train.loss,
                Precision::F64,
                &Default::default(),
            )?;
            let cosine = duals.grad_a.cosine(&duals.grad_b)?;
            let text = format!(
                "grad_cosine\t{:.6}\nloss\t{:.6}\ngrad_norm_a\t{:.6}\ngrad_norm_b\t{:.6}\n",
                cosine,
                duals.loss,
                duals.grad_a.l2_norm(),
                duals.grad_b.l2_norm()
            );
            fs::write(out.join("gradcos.tsv"), &text).map_err(|e| Failure::runtime(e.to_string()))?;
            print!("{text}");
        }
        other => return Err(Failure::config(format!("unknown analyze mode `{other}`"))),
    }
    Ok(())
}

fn cmd_selfcheck(cli: &Cli) -> CmdResult {
    let results = verify::run_all(cli.inject_fault);
    let mut all_passed = true;
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{status}  {:<32} {}", r.name, r.detail);
        all_passed &= r.passed;
    }
    if all_passed {
        println!("selfcheck: all {} checks passed", results.len());
        Ok(())
    } else {
        Err(Failure::runtime("selfcheck failed"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_command_is_config_error() {
        assert_eq!(run(&["frobnicate".into()]), 2);
    }

    #[test]
    fn missing_flag_value_is_config_error() {
        assert_eq!(run(&["pretrain".into(), "--config".into()]), 2);
    }

    #[test]
    fn help_succeeds() {
        assert_eq!(run(&["help".into()]), 0);
    }
}
