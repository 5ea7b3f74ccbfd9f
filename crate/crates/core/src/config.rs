//! Flat INI-style run configuration: `[section]` headers and `key = value`
//! lines, `#`/`;` comments, strict key sets (unknown keys are errors with
//! line and column).

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::analysis::EvalConfig;
use crate::augment::AugmentConfig;
use crate::dataio::{self, Dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::loss::{LossConfig, LossMode};
use crate::network::{LayerSpec, NetworkSpec};
use crate::neuron::{NeuronConfig, NeuronKind, ResetMode};
use crate::tensor::Precision;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug)]
struct Entry {
    line: usize,
    column: usize,
    value: String,
    consumed: std::cell::Cell<bool>,
}

#[derive(Clone, Debug, Default)]
struct Section {
    line: usize,
    entries: BTreeMap<String, Entry>,
}

#[derive(Clone, Debug, Default)]
struct RawConfig {
    sections: BTreeMap<String, Section>,
}

fn config_err(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Config { line, column, message: message.into() }
}

fn parse_raw(text: &str) -> Result<RawConfig> {
    let mut raw = RawConfig::default();
    let mut current: Option<String> = None;
    for (i, full_line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = full_line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if line.starts_with('[') {
            if !line.ends_with(']') || line.len() < 3 {
                return Err(config_err(line_no, 1, format!("malformed section header `{line}`")));
            }
            let name = line[1..line.len() - 1].trim().to_string();
            raw.sections.entry(name.clone()).or_insert_with(|| Section {
                line: line_no,
                entries: BTreeMap::new(),
            });
            current = Some(name);
            continue;
        }
        let Some(eq) = line.find('=') else {
            return Err(config_err(line_no, 1, format!("expected `key = value`, got `{line}`")));
        };
        let key = line[..eq].trim().to_string();
        let value = line[eq + 1..].trim().to_string();
        if key.is_empty() {
            return Err(config_err(line_no, 1, "empty key".to_string()));
        }
        let column = full_line.find(key.as_str()).map_or(1, |c| c + 1);
        let Some(section) = &current else {
            return Err(config_err(line_no, column, format!("key `{key}` outside any section")));
        };
        let entries = &mut raw.sections.get_mut(section).expect("section exists").entries;
        if entries.contains_key(&key) {
            return Err(config_err(line_no, column, format!("duplicate key `{key}` in [{section}]")));
        }
        entries.insert(key, Entry { line: line_no, column, value, consumed: std::cell::Cell::new(false) });
    }
    Ok(raw)
}

impl Section {
    fn get(&self, key: &str) -> Option<&Entry> {
        let e = self.entries.get(key);
        if let Some(e) = e {
            e.consumed.set(true);
        }
        e
    }

    fn reject_unconsumed(&self, section: &str) -> Result<()> {
        for (key, entry) in &self.entries {
            if !entry.consumed.get() {
                return Err(config_err(entry.line, entry.column, format!("unknown key `{key}` in [{section}]")));
            }
        }
        Ok(())
    }
}

fn parse_value<T: std::str::FromStr>(entry: &Entry, what: &str) -> Result<T> {
    entry.value.parse::<T>().map_err(|_| {
        config_err(entry.line, entry.column, format!("cannot parse `{}` as {what}", entry.value))
    })
}

fn get_f64(section: &Section, key: &str, default: f64) -> Result<f64> {
    match section.get(key) {
        Some(e) => parse_value(e, "a number"),
        None => Ok(default),
    }
}

fn get_usize(section: &Section, key: &str, default: usize) -> Result<usize> {
    match section.get(key) {
        Some(e) => parse_value(e, "an integer"),
        None => Ok(default),
    }
}

fn get_u64(section: &Section, key: &str, default: u64) -> Result<u64> {
    match section.get(key) {
        Some(e) => parse_value(e, "an integer"),
        None => Ok(default),
    }
}

fn get_bool(section: &Section, key: &str, default: bool) -> Result<bool> {
    match section.get(key) {
        Some(e) => match e.value.as_str() {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(config_err(e.line, e.column, format!("expected true/false, got `{other}`"))),
        },
        None => Ok(default),
    }
}

// ------------------------------------------------------------- sections

#[derive(Clone, Debug)]
pub enum DataConfig {
    SynthClusters { n_per_class: usize, classes: usize, dim: usize, spread: f64, seed: u64 },
    SynthImages { n_per_class: usize, classes: usize, height: usize, width: usize, noise: f64, seed: u64 },
    SynthEventImages {
        n_per_class: usize,
        classes: usize,
        frames: usize,
        height: usize,
        width: usize,
        noise: f64,
        seed: u64,
    },
    Files { inputs: PathBuf, labels: Option<PathBuf>, kind: DatasetKind },
}

impl DataConfig {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataConfig::SynthClusters { n_per_class, classes, dim, spread, seed } => {
                dataio::synth_clusters(*n_per_class, *classes, *dim, *spread, *seed)
            }
            DataConfig::SynthImages { n_per_class, classes, height, width, noise, seed } => {
                dataio::synth_images(*n_per_class, *classes, *height, *width, *noise, *seed)
            }
            DataConfig::SynthEventImages { n_per_class, classes, frames, height, width, noise, seed } => {
                dataio::synth_event_images(*n_per_class, *classes, *frames, *height, *width, *noise, *seed)
            }
            DataConfig::Files { inputs, labels, kind } => {
                Dataset::from_files(inputs, labels.as_deref(), *kind)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub network: NetworkSpec,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub data: Option<DataConfig>,
    pub eval: EvalConfig,
}

/// Parse a config file; `[network]` is required, everything else defaults.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let raw = parse_raw(text)?;
    for name in raw.sections.keys() {
        if !matches!(name.as_str(), "network" | "train" | "loss" | "augment" | "data" | "eval") {
            let line = raw.sections[name].line;
            return Err(config_err(line, 1, format!("unknown section [{name}]")));
        }
    }
    let network_section = raw
        .sections
        .get("network")
        .ok_or_else(|| config_err(1, 1, "missing [network] section"))?;
    let network = parse_network(network_section)?;
    network_section.reject_unconsumed("network")?;

    let loss = match raw.sections.get("loss") {
        Some(s) => {
            let l = parse_loss(s)?;
            s.reject_unconsumed("loss")?;
            l
        }
        None => LossConfig::default(),
    };
    let train = match raw.sections.get("train") {
        Some(s) => {
            let t = parse_train(s, loss)?;
            s.reject_unconsumed("train")?;
            t
        }
        None => TrainConfig { loss, ..TrainConfig::default() },
    };
    let augment = match raw.sections.get("augment") {
        Some(s) => {
            let a = parse_augment(s)?;
            s.reject_unconsumed("augment")?;
            a
        }
        None => AugmentConfig::default(),
    };
    let data = match raw.sections.get("data") {
        Some(s) => {
            let d = parse_data(s)?;
            s.reject_unconsumed("data")?;
            Some(d)
        }
        None => None,
    };
    let eval = match raw.sections.get("eval") {
        Some(s) => {
            let e = parse_eval(s)?;
            s.reject_unconsumed("eval")?;
            e
        }
        None => EvalConfig::default(),
    };
    let cfg = RunConfig { network, train, augment, data, eval };
    cfg.network.validate().map_err(|e| config_err(network_section.line, 1, e.to_string()))?;
    Ok(cfg)
}

fn parse_shape(entry: &Entry) -> Result<Vec<usize>> {
    let parts: Result<Vec<usize>> = entry
        .value
        .split('x')
        .map(|p| {
            p.trim().parse::<usize>().map_err(|_| {
                config_err(entry.line, entry.column, format!("cannot parse shape `{}`", entry.value))
            })
        })
        .collect();
    let shape = parts?;
    if shape.is_empty() || shape.contains(&0) {
        return Err(config_err(entry.line, entry.column, format!("bad shape `{}`", entry.value)));
    }
    Ok(shape)
}

fn parse_network(s: &Section) -> Result<NetworkSpec> {
    let input_entry = s
        .get("input")
        .ok_or_else(|| config_err(s.line, 1, "[network] needs `input` (e.g. 32 or 1x28x28)"))?;
    let input_shape = parse_shape(input_entry)?;

    let neuron = {
        let kind = match s.get("neuron") {
            Some(e) => match e.value.as_str() {
                "mixed_lif" | "mixedlif" => NeuronKind::MixedLif,
                "lif" => NeuronKind::Lif,
                "if" => NeuronKind::If,
                other => {
                    return Err(config_err(e.line, e.column, format!("unknown neuron kind `{other}`")))
                }
            },
            None => NeuronKind::MixedLif,
        };
        let reset = match s.get("reset") {
            Some(e) => match e.value.as_str() {
                "hard" => ResetMode::Hard,
                "soft" => ResetMode::Soft,
                other => return Err(config_err(e.line, e.column, format!("unknown reset mode `{other}`"))),
            },
            None => ResetMode::Hard,
        };
        NeuronConfig {
            tau: get_f64(s, "tau", 0.5)?,
            v_threshold: get_f64(s, "v_threshold", 1.0)?,
            v_reset: get_f64(s, "v_reset", 0.0)?,
            surrogate_width: get_f64(s, "surrogate_width", 1.0)?,
            kind,
            reset,
        }
    };

    let backbone_entry = s
        .get("backbone")
        .ok_or_else(|| config_err(s.line, 1, "[network] needs `backbone`"))?;
    let backbone = parse_backbone(backbone_entry, &input_shape, &neuron)?;

    // feature width after the backbone, for head shape inference
    let mut shape = input_shape.clone();
    for layer in &backbone {
        shape = layer
            .output_shape(&shape)
            .map_err(|e| config_err(backbone_entry.line, backbone_entry.column, e.to_string()))?;
    }
    let mut head = Vec::new();
    if let Some(e) = s.get("head") {
        if !e.value.is_empty() {
            let mut width = shape[0];
            for dim in e.value.split(',') {
                let out: usize = dim.trim().parse().map_err(|_| {
                    config_err(e.line, e.column, format!("cannot parse head dim `{}`", dim.trim()))
                })?;
                head.push(LayerSpec::Dense { input: width, output: out });
                width = out;
            }
        }
    }

    Ok(NetworkSpec {
        input_shape,
        backbone,
        head,
        head_activation: (
            get_f64(s, "head_activation_threshold", 0.5)?,
            get_f64(s, "head_activation_width", 1.0)?,
        ),
        timesteps: get_usize(s, "timesteps", 4)?,
    })
}

/// Layer DSL: comma-separated tokens, shapes inferred left to right.
///   flatten | dense:OUT | conv:OUT:K:S[:P] | batchnorm | neuron | pool_avg
fn parse_backbone(entry: &Entry, input_shape: &[usize], neuron: &NeuronConfig) -> Result<Vec<LayerSpec>> {
    let err = |msg: String| config_err(entry.line, entry.column, msg);
    let mut layers = Vec::new();
    let mut shape = input_shape.to_vec();
    for token in entry.value.split(',') {
        let token = token.trim();
        if token.is_empty() {
            continue;
        }
        let parts: Vec<&str> = token.split(':').collect();
        let layer = match parts[0] {
            "flatten" => LayerSpec::Flatten,
            "dense" => {
                if parts.len() != 2 {
                    return Err(err(format!("dense token needs one size: `{token}`")));
                }
                if shape.len() != 1 {
                    return Err(err(format!("dense after non-flat shape {shape:?}; add `flatten`")));
                }
                let output = parts[1]
                    .parse()
                    .map_err(|_| err(format!("bad dense size in `{token}`")))?;
                LayerSpec::Dense { input: shape[0], output }
            }
            "conv" => {
                if !(parts.len() == 4 || parts.len() == 5) {
                    return Err(err(format!("conv token is conv:OUT:K:S[:P], got `{token}`")));
                }
                if shape.len() != 3 {
                    return Err(err(format!("conv needs [C, H, W] input, got {shape:?}")));
                }
                let nums: Result<Vec<usize>> = parts[1..]
                    .iter()
                    .map(|p| p.parse::<usize>().map_err(|_| err(format!("bad conv number in `{token}`"))))
                    .collect();
                let nums = nums?;
                LayerSpec::Conv2d {
                    in_channels: shape[0],
                    out_channels: nums[0],
                    kernel: nums[1],
                    stride: nums[2],
                    pad: if nums.len() == 4 { nums[3] } else { 0 },
                }
            }
            "batchnorm" => LayerSpec::BatchNorm { features: shape[0] },
            "neuron" => LayerSpec::Neuron(*neuron),
            "pool_avg" => LayerSpec::PoolAvg,
            other => return Err(err(format!("unknown layer `{other}`"))),
        };
        shape = layer.output_shape(&shape).map_err(|e| err(e.to_string()))?;
        layers.push(layer);
    }
    if layers.is_empty() {
        return Err(err("backbone has no layers".into()));
    }
    Ok(layers)
}

fn parse_loss(s: &Section) -> Result<LossConfig> {
    let mode = match s.get("mode") {
        Some(e) => LossMode::parse(&e.value).map_err(|err| config_err(e.line, e.column, err.to_string()))?,
        None => LossMode::Boundary,
    };
    Ok(LossConfig {
        mode,
        lambda: get_f64(s, "lambda", 0.005)?,
        epsilon_norm: get_f64(s, "epsilon_norm", 1e-12)?,
    })
}

fn parse_precision(s: &Section, key: &str, default: Precision) -> Result<Precision> {
    match s.get(key) {
        Some(e) => match e.value.as_str() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(config_err(e.line, e.column, format!("precision must be f32/f64, got `{other}`"))),
        },
        None => Ok(default),
    }
}

fn parse_train(s: &Section, loss: LossConfig) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        lr: get_f64(s, "lr", d.lr)?,
        weight_decay: get_f64(s, "weight_decay", d.weight_decay)?,
        momentum: get_f64(s, "momentum", d.momentum)?,
        warmup_epochs: get_usize(s, "warmup_epochs", d.warmup_epochs)?,
        total_epochs: get_usize(s, "epochs", d.total_epochs)?,
        batch_size: get_usize(s, "batch_size", d.batch_size)?,
        loss,
        seed: get_u64(s, "seed", d.seed)?,
        precision: parse_precision(s, "precision", d.precision)?,
        checkpoint_every: get_usize(s, "checkpoint_every", d.checkpoint_every)?,
    })
}

fn parse_augment(s: &Section) -> Result<AugmentConfig> {
    let d = AugmentConfig::default();
    Ok(AugmentConfig {
        crop_scale: (get_f64(s, "crop_min", d.crop_scale.0)?, get_f64(s, "crop_max", d.crop_scale.1)?),
        flip_prob: get_f64(s, "flip_prob", d.flip_prob)?,
        jitter: get_f64(s, "jitter", d.jitter)?,
        blur_sigma: (get_f64(s, "blur_min", d.blur_sigma.0)?, get_f64(s, "blur_max", d.blur_sigma.1)?),
        temporal_enabled: get_bool(s, "temporal", d.temporal_enabled)?,
        time_reversal_prob: get_f64(s, "time_reversal_prob", d.time_reversal_prob)?,
        frame_dropout: get_f64(s, "frame_dropout", d.frame_dropout)?,
        jitter_max_shift: get_usize(s, "jitter_max_shift", d.jitter_max_shift)?,
    })
}

fn parse_data(s: &Section) -> Result<DataConfig> {
    let source = s
        .get("source")
        .ok_or_else(|| config_err(s.line, 1, "[data] needs `source`"))?;
    match source.value.as_str() {
        "synth_clusters" => Ok(DataConfig::SynthClusters {
            n_per_class: get_usize(s, "n_per_class", 500)?,
            classes: get_usize(s, "classes", 4)?,
            dim: get_usize(s, "dim", 32)?,
            spread: get_f64(s, "spread", 0.1)?,
            seed: get_u64(s, "seed", 0)?,
        }),
        "synth_images" => Ok(DataConfig::SynthImages {
            n_per_class: get_usize(s, "n_per_class", 500)?,
            classes: get_usize(s, "classes", 10)?,
            height: get_usize(s, "height", 28)?,
            width: get_usize(s, "width", 28)?,
            noise: get_f64(s, "noise", 0.05)?,
            seed: get_u64(s, "seed", 0)?,
        }),
        "synth_event_images" => Ok(DataConfig::SynthEventImages {
            n_per_class: get_usize(s, "n_per_class", 500)?,
            classes: get_usize(s, "classes", 10)?,
            frames: get_usize(s, "frames", 4)?,
            height: get_usize(s, "height", 28)?,
            width: get_usize(s, "width", 28)?,
            noise: get_f64(s, "noise", 0.05)?,
            seed: get_u64(s, "seed", 0)?,
        }),
        "files" => {
            let inputs = s
                .get("inputs")
                .ok_or_else(|| config_err(s.line, 1, "[data] files source needs `inputs`"))?;
            let labels = s.get("labels").map(|e| PathBuf::from(&e.value));
            let kind = match s.get("kind") {
                Some(e) => match e.value.as_str() {
                    "static" => DatasetKind::Static,
                    "event" => DatasetKind::Event,
                    other => {
                        return Err(config_err(e.line, e.column, format!("kind must be static/event, got `{other}`")))
                    }
                },
                None => DatasetKind::Static,
            };
            Ok(DataConfig::Files { inputs: PathBuf::from(&inputs.value), labels, kind })
        }
        other => Err(config_err(source.line, source.column, format!("unknown data source `{other}`"))),
    }
}

fn parse_eval(s: &Section) -> Result<EvalConfig> {
    let d = EvalConfig::default();
    Ok(EvalConfig {
        lr: get_f64(s, "lr", d.lr)?,
        epochs: get_usize(s, "epochs", d.epochs)?,
        batch_size: get_usize(s, "batch_size", d.batch_size)?,
        train_fraction: get_f64(s, "train_fraction", d.train_fraction)?,
        seed: get_u64(s, "seed", d.seed)?,
        fine_tune: get_bool(s, "fine_tune", d.fine_tune)?,
        fine_tune_epochs: get_usize(s, "fine_tune_epochs", d.fine_tune_epochs)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = "\
# tiny run
[network]
input = 32
backbone = dense:64, batchnorm, neuron, dense:64, batchnorm, neuron
head = 32, 16
timesteps = 4
tau = 0.5

[train]
lr = 0.001
epochs = 10
warmup_epochs = 2
batch_size = 16
seed = 7

[loss]
mode = btl
lambda = 0.005

[data]
source = synth_clusters
n_per_class = 50
classes = 4
dim = 32
spread = 0.1

[eval]
epochs = 20
";

    #[test]
    fn parses_full_config() {
        let cfg = parse_run_config(GOOD).unwrap();
        assert_eq!(cfg.network.timesteps, 4);
        assert_eq!(cfg.network.backbone.len(), 6);
        assert_eq!(cfg.network.head.len(), 2);
        assert_eq!(cfg.train.total_epochs, 10);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.loss.mode, LossMode::Boundary);
        assert!(matches!(cfg.data, Some(DataConfig::SynthClusters { classes: 4, .. })));
        assert_eq!(cfg.eval.epochs, 20);
    }

    #[test]
    fn missing_network_section_is_an_error() {
        let err = parse_run_config("[train]\nlr = 0.1\n").unwrap_err();
        match err {
            Error::Config { message, .. } => assert!(message.contains("[network]")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_reports_line_and_column() {
        let text = "[network]\ninput = 8\nbackbone = dense:4, neuron\nbogus_key = 3\n";
        match parse_run_config(text).unwrap_err() {
            Error::Config { line, column, message } => {
                assert_eq!(line, 4);
                assert_eq!(column, 1);
                assert!(message.contains("bogus_key"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_section_rejected() {
        let text = "[network]\ninput = 8\nbackbone = dense:4, neuron\n[wat]\nx = 1\n";
        assert!(matches!(parse_run_config(text), Err(Error::Config { line: 4, .. })));
    }

    #[test]
    fn bad_value_reports_position() {
        let text = "[network]\ninput = 8\nbackbone = dense:4, neuron\ntimesteps = soon\n";
        match parse_run_config(text).unwrap_err() {
            Error::Config { line, message, .. } => {
                assert_eq!(line, 4);
                assert!(message.contains("soon"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn conv_backbone_with_shape_inference() {
        let text = "\
[network]
input = 1x28x28
backbone = conv:8:3:2:1, batchnorm, neuron, conv:16:3:2:1, batchnorm, neuron, pool_avg
head = 16
timesteps = 2
";
        let cfg = parse_run_config(text).unwrap();
        assert_eq!(cfg.network.feature_width().unwrap(), 16);
        match &cfg.network.backbone[3] {
            LayerSpec::Conv2d { in_channels, out_channels, .. } => {
                assert_eq!(*in_channels, 8);
                assert_eq!(*out_channels, 16);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_in_dsl_is_config_error() {
        let text = "[network]\ninput = 1x8x8\nbackbone = dense:4, neuron\n";
        assert!(matches!(parse_run_config(text), Err(Error::Config { .. })));
    }

    #[test]
    fn duplicate_key_rejected() {
        let text = "[network]\ninput = 8\ninput = 9\nbackbone = dense:4, neuron\n";
        assert!(matches!(parse_run_config(text), Err(Error::Config { line: 3, .. })));
    }

    #[test]
    fn empty_head_allowed() {
        let text = "[network]\ninput = 8\nbackbone = dense:4, neuron\nhead =\n";
        let cfg = parse_run_config(text).unwrap();
        assert!(cfg.network.head.is_empty());
    }
}
