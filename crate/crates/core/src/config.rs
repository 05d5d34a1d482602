//! Run configuration as a flat `key = value` document.
//!
//! ```text
//! # comments start with '#'
//! preset = coarse-fine
//! network.alpha = 1/4
//! train.lr_steps = 60, 80
//! ```
//!
//! A `preset` is applied first, then every other key in file order. Unknown
//! keys and repeated keys are errors.

use std::collections::BTreeSet;
use std::path::PathBuf;

use crate::backbone::{CenterSource, FusionPreset, NetworkConfig, Pooling, Streams};
use crate::dataio::SynthSpec;
use crate::error::{CfnError, Result};
use crate::fusion::{Calibration, ReduceMode};
use crate::losseval::EvalMode;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub network: NetworkConfig,
    /// Training split; channel, class and stride settings follow `network`.
    pub data: SynthSpec,
    pub val_clips: usize,
    pub train: TrainConfig,
    pub eval_modes: Vec<EvalMode>,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Checkpoints loaded (partially) before training.
    pub init: Vec<PathBuf>,
    /// Drives parameter initialization and training order.
    pub seed: u64,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            preset: None,
            network: NetworkConfig::default(),
            data: SynthSpec::default(),
            val_clips: 48,
            train: TrainConfig::default(),
            eval_modes: vec![EvalMode::AllFrames, EvalMode::Sampled25],
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            init: Vec::new(),
            seed: 0,
            threads: 1,
        };
        cfg.sync();
        cfg
    }
}

pub const PRESETS: &[&str] = &[
    "coarse-fine",
    "fine-fine",
    "coarse-only",
    "fine-only",
    "slowfast-det",
    "table3a-late",
    "table3a-one-to-one",
    "table3a-multi-stage",
    "table3b-c",
    "table3b-chw",
    "table3b-cthw",
    "table3c-late-none",
    "table3c-late-mask",
    "table3c-multi-none",
    "table3c-multi-mask",
    "table3d-max",
    "table3d-avg",
    "table3d-stride",
    "table3d-grid",
    "table3e-short-a4",
    "table3e-short-a8",
    "table3e-long-a4",
    "table3e-long-a8",
    "table3f-slowfast",
    "table3f-slowfast-grid",
    "table3f-slowfast-fusion",
    "table3f-coarse-fine",
];

const COARSE_FINE: &[(&str, &str)] = &[
    ("network.streams", "both"),
    ("network.pooling", "grid"),
    ("network.fusion", "multi-stage"),
    ("network.reduce", "cthw"),
    ("network.mask", "true"),
    ("network.calibration", "gaussian"),
    ("network.centers", "learned"),
];

/// Key/value pairs a preset applies, in order.
pub fn preset_entries(name: &str) -> Option<Vec<(&'static str, &'static str)>> {
    let mut kv: Vec<(&'static str, &'static str)> = COARSE_FINE.to_vec();
    let fine_fine = [("network.pooling", "none")];
    let coarse_only = [("network.streams", "coarse-only"), ("network.fusion", "none")];
    let slowfast = [
        ("network.pooling", "stride"),
        ("network.fusion", "slowfast-det"),
        ("network.mask", "false"),
        ("network.calibration", "direct"),
        ("network.centers", "uniform"),
    ];
    let extra: Vec<(&'static str, &'static str)> = match name {
        "coarse-fine" | "table3f-coarse-fine" => vec![],
        "fine-fine" => fine_fine.to_vec(),
        "coarse-only" => coarse_only.to_vec(),
        "fine-only" => vec![
            ("network.streams", "fine-only"),
            ("network.pooling", "none"),
            ("network.fusion", "none"),
        ],
        "slowfast-det" | "table3f-slowfast" => slowfast.to_vec(),
        "table3f-slowfast-grid" => [&slowfast[..], &[("network.pooling", "grid")]].concat(),
        "table3f-slowfast-fusion" => vec![("network.pooling", "stride"), ("network.centers", "uniform")],
        _ => {
            let (table, variant) = name.split_once('-')?;
            let mut v = match table {
                "table3a" | "table3b" | "table3c" => fine_fine.to_vec(),
                "table3d" | "table3e" => coarse_only.to_vec(),
                _ => return None,
            };
            let more: &[(&'static str, &'static str)] = match (table, variant) {
                ("table3a", "late") => &[("network.fusion", "late-only")],
                ("table3a", "one-to-one") => &[("network.fusion", "one-to-one")],
                ("table3a", "multi-stage") => &[],
                ("table3b", "c") => &[("network.reduce", "c")],
                ("table3b", "chw") => &[("network.reduce", "chw")],
                ("table3b", "cthw") => &[],
                ("table3c", "late-none") => &[("network.fusion", "late-only"), ("network.mask", "false")],
                ("table3c", "late-mask") => &[("network.fusion", "late-only")],
                ("table3c", "multi-none") => &[("network.mask", "false")],
                ("table3c", "multi-mask") => &[],
                ("table3d", "max") => &[("network.pooling", "max")],
                ("table3d", "avg") => &[("network.pooling", "avg")],
                ("table3d", "stride") => &[("network.pooling", "stride")],
                ("table3d", "grid") => &[],
                ("table3e", "short-a4") => &[
                    ("network.input_stride", "2"),
                    ("network.coarse_frames", "32"),
                    ("network.fine_frames", "32"),
                ],
                ("table3e", "short-a8") => &[
                    ("network.input_stride", "2"),
                    ("network.coarse_frames", "32"),
                    ("network.fine_frames", "32"),
                    ("network.alpha", "1/8"),
                ],
                ("table3e", "long-a4") => &[
                    ("network.input_stride", "1"),
                    ("network.coarse_frames", "64"),
                    ("network.fine_frames", "64"),
                ],
                ("table3e", "long-a8") => &[
                    ("network.input_stride", "1"),
                    ("network.coarse_frames", "64"),
                    ("network.fine_frames", "64"),
                    ("network.alpha", "1/8"),
                ],
                _ => return None,
            };
            v.extend_from_slice(more);
            v
        }
    };
    kv.extend(extra);
    Some(kv)
}

fn bad(key: &str, value: &str, expected: &str) -> CfnError {
    CfnError::Config(format!("{key} = {value:?}: expected {expected}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, what))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value, "true or false")),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_num(key, v.trim(), what)).collect()
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Accepts `1/k` or a decimal whose reciprocal is an integer; returns `k`.
fn parse_alpha(key: &str, value: &str) -> Result<usize> {
    let err = || bad(key, value, "1/k for a positive integer k");
    let k = if let Some(den) = value.strip_prefix("1/") {
        den.trim().parse::<usize>().map_err(|_| err())?
    } else {
        let a: f64 = value.parse().map_err(|_| err())?;
        if !(a > 0.0 && a <= 1.0) {
            return Err(err());
        }
        let k = (1.0 / a).round();
        if ((1.0 / a) - k).abs() > 1e-9 {
            return Err(err());
        }
        k as usize
    };
    if k == 0 {
        return Err(err());
    }
    Ok(k)
}

fn choose<T: Copy>(key: &str, value: &str, options: &[(&str, T)]) -> Result<T> {
    options
        .iter()
        .find(|(n, _)| *n == value)
        .map(|(_, v)| *v)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            bad(key, value, &format!("one of {}", names.join(", ")))
        })
}

const STREAMS: &[(&str, Streams)] = &[
    ("both", Streams::Both),
    ("coarse-only", Streams::CoarseOnly),
    ("fine-only", Streams::FineOnly),
];
const POOLING: &[(&str, Pooling)] = &[
    ("grid", Pooling::Grid),
    ("grid-uniform", Pooling::GridUniform),
    ("max", Pooling::Max),
    ("avg", Pooling::Avg),
    ("stride", Pooling::Stride),
    ("none", Pooling::None),
];
const FUSION: &[(&str, FusionPreset)] = &[
    ("none", FusionPreset::None),
    ("late-only", FusionPreset::LateOnly),
    ("one-to-one", FusionPreset::OneToOne),
    ("multi-stage", FusionPreset::MultiStage),
    ("slowfast-det", FusionPreset::SlowFastDet),
];
const REDUCE: &[(&str, ReduceMode)] = &[("c", ReduceMode::C), ("chw", ReduceMode::Chw), ("cthw", ReduceMode::Cthw)];
const CALIBRATION: &[(&str, Calibration)] = &[("gaussian", Calibration::Gaussian), ("direct", Calibration::Direct)];
const CENTERS: &[(&str, CenterSource)] = &[("learned", CenterSource::Learned), ("uniform", CenterSource::Uniform)];

fn name_of<T: PartialEq + Copy>(options: &[(&'static str, T)], v: T) -> &'static str {
    options.iter().find(|(_, o)| *o == v).map(|(n, _)| *n).expect("every variant is named")
}

/// Sets one `network.*` key.
fn set_network(net: &mut NetworkConfig, key: &str, value: &str) -> Result<bool> {
    let field = match key.strip_prefix("network.") {
        Some(f) => f,
        None => return Ok(false),
    };
    let count = "a non-negative integer";
    match field {
        "streams" => net.streams = choose(key, value, STREAMS)?,
        "in_channels" => net.in_channels = parse_num(key, value, count)?,
        "channels" => net.channels = parse_list(key, value, count)?,
        "blocks" => net.blocks = parse_list(key, value, count)?,
        "alpha" => net.factor = parse_alpha(key, value)?,
        "coarse_frames" => net.coarse_frames = parse_num(key, value, count)?,
        "fine_frames" => net.fine_frames = parse_num(key, value, count)?,
        "input_stride" => net.input_stride = parse_num(key, value, count)?,
        "pooling" => net.pooling = choose(key, value, POOLING)?,
        "fusion" => net.fusion = choose(key, value, FUSION)?,
        "reduce" => net.reduce = choose(key, value, REDUCE)?,
        "mask" => net.mask = parse_bool(key, value)?,
        "calibration" => net.calibration = choose(key, value, CALIBRATION)?,
        "centers" => net.centers = choose(key, value, CENTERS)?,
        "sigma" => {
            net.sigma = match value {
                "auto" => None,
                v => Some(parse_num(key, v, "auto or a positive number")?),
            }
        }
        "num_classes" => net.num_classes = parse_num(key, value, count)?,
        "head_channels" => net.head_channels = parse_num(key, value, count)?,
        "fc_channels" => net.fc_channels = parse_num(key, value, count)?,
        "confidence_hidden" => net.confidence_hidden = parse_num(key, value, count)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// The `network.*` entries describing `net`, in canonical order.
pub fn network_entries(net: &NetworkConfig) -> Vec<(&'static str, String)> {
    vec![
        ("network.streams", name_of(STREAMS, net.streams).into()),
        ("network.in_channels", net.in_channels.to_string()),
        ("network.channels", join(&net.channels)),
        ("network.blocks", join(&net.blocks)),
        ("network.alpha", format!("1/{}", net.factor)),
        ("network.coarse_frames", net.coarse_frames.to_string()),
        ("network.fine_frames", net.fine_frames.to_string()),
        ("network.input_stride", net.input_stride.to_string()),
        ("network.pooling", name_of(POOLING, net.pooling).into()),
        ("network.fusion", name_of(FUSION, net.fusion).into()),
        ("network.reduce", name_of(REDUCE, net.reduce).into()),
        ("network.mask", net.mask.to_string()),
        ("network.calibration", name_of(CALIBRATION, net.calibration).into()),
        ("network.centers", name_of(CENTERS, net.centers).into()),
        ("network.sigma", net.sigma.map_or_else(|| "auto".into(), |s| format!("{s:?}"))),
        ("network.num_classes", net.num_classes.to_string()),
        ("network.head_channels", net.head_channels.to_string()),
        ("network.fc_channels", net.fc_channels.to_string()),
        ("network.confidence_hidden", net.confidence_hidden.to_string()),
    ]
}

fn render(entries: &[(&str, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Canonical text of a network configuration; stored in checkpoints.
pub fn network_to_kv(net: &NetworkConfig) -> String {
    render(&network_entries(net))
}

/// Parses text produced by [`network_to_kv`]. `seed` is left at 0.
pub fn network_from_kv(text: &str) -> Result<NetworkConfig> {
    let mut net = NetworkConfig::default();
    for (key, value) in parse_pairs(text)? {
        if !set_network(&mut net, &key, &value)? {
            return Err(CfnError::Config(format!("unknown network key {key:?}")));
        }
    }
    net.validate()?;
    Ok(net)
}

/// Splits a document into `(key, value)` pairs, rejecting repeats.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CfnError::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(CfnError::Config(format!("line {}: empty key", n + 1)));
        }
        if !seen.insert(key.clone()) {
            return Err(CfnError::Config(format!("line {}: {key} is set twice", n + 1)));
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Defaults, then the preset (the argument wins over the document's),
    /// then the document, then `overrides`.
    pub fn resolve(text: Option<&str>, preset: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let pairs = match text {
            Some(t) => parse_pairs(t)?,
            None => Vec::new(),
        };
        let from_doc = pairs.iter().find(|(k, _)| k == "preset").map(|(_, v)| v.as_str());
        let mut cfg = Self::default();
        if let Some(name) = preset.or(from_doc) {
            cfg.apply_preset(name)?;
        }
        for (k, v) in pairs.iter().chain(overrides).filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        Self::resolve(Some(text), None, &[])
    }

    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let entries = preset_entries(name).ok_or_else(|| {
            CfnError::Config(format!("unknown preset {name:?}; known presets: {}", PRESETS.join(", ")))
        })?;
        for (k, v) in entries {
            self.set(k, v)?;
        }
        self.preset = Some(name.to_string());
        self.sync();
        Ok(())
    }

    /// Copies the settings shared between sections into place.
    fn sync(&mut self) {
        self.network.seed = self.seed;
        self.train.seed = self.seed;
        self.train.threads = self.threads;
        self.data.channels = self.network.in_channels;
        self.data.num_classes = self.network.num_classes;
        self.data.stride = self.network.input_stride;
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if set_network(&mut self.network, key, value)? {
            return Ok(());
        }
        let count = "a non-negative integer";
        let real = "a number";
        let d = &mut self.data;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse_num(key, value, count)?,
            "threads" => self.threads = parse_num(key, value, count)?,
            "paths.data" => self.data_dir = PathBuf::from(value),
            "paths.out" => self.out_dir = PathBuf::from(value),
            "paths.init" => {
                self.init = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(PathBuf::from)
                    .collect()
            }
            "eval.mode" => {
                self.eval_modes = match value {
                    "all" => vec![EvalMode::AllFrames, EvalMode::Sampled25],
                    "all-frames" => vec![EvalMode::AllFrames],
                    "sampled-25" => vec![EvalMode::Sampled25],
                    _ => return Err(bad(key, value, "all, all-frames or sampled-25")),
                }
            }
            "data.train_clips" => d.num_clips = parse_num(key, value, count)?,
            "data.val_clips" => self.val_clips = parse_num(key, value, count)?,
            "data.frames" => d.frames = parse_num(key, value, count)?,
            "data.height" => d.height = parse_num(key, value, count)?,
            "data.width" => d.width = parse_num(key, value, count)?,
            "data.bursts_min" => d.bursts_min = parse_num(key, value, count)?,
            "data.bursts_max" => d.bursts_max = parse_num(key, value, count)?,
            "data.burst_len_min" => d.burst_len_min = parse_num(key, value, count)?,
            "data.burst_len_max" => d.burst_len_max = parse_num(key, value, count)?,
            "data.min_gap" => d.min_gap = parse_num(key, value, count)?,
            "data.freq_min" => d.freq_min = parse_num(key, value, real)?,
            "data.freq_max" => d.freq_max = parse_num(key, value, real)?,
            "data.amplitude" => d.amplitude = parse_num(key, value, real)?,
            "data.noise" => d.noise = parse_num(key, value, real)?,
            "data.seed" => d.seed = parse_num(key, value, count)?,
            "train.epochs" => t.epochs = parse_num(key, value, count)?,
            "train.batch_size" => t.batch_size = parse_num(key, value, count)?,
            "train.lr" => t.lr = parse_num(key, value, real)?,
            "train.momentum" => t.momentum = parse_num(key, value, real)?,
            "train.weight_decay" => t.weight_decay = parse_num(key, value, real)?,
            "train.lr_steps" => t.lr_steps = parse_list(key, value, count)?,
            "train.lr_gamma" => t.lr_gamma = parse_num(key, value, real)?,
            "train.fusion_lr_mult" => t.fusion_lr_mult = parse_num(key, value, real)?,
            "train.grid_lr_mult" => t.grid_lr_mult = parse_num(key, value, real)?,
            "train.grad_clip" => {
                t.grad_clip = match value {
                    "none" => None,
                    v => Some(parse_num(key, v, "none or a positive number")?),
                }
            }
            "train.eval_every" => t.eval_every = parse_num(key, value, count)?,
            "preset" => self.apply_preset(value)?,
            _ => return Err(CfnError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.val_clips == 0 {
            return Err(CfnError::Config("data.val_clips must be positive".into()));
        }
        if self.eval_modes.is_empty() {
            return Err(CfnError::Config("no evaluation mode selected".into()));
        }
        Ok(())
    }

    /// Validation split settings: same generator, disjoint seed stream.
    pub fn val_spec(&self) -> SynthSpec {
        SynthSpec {
            num_clips: self.val_clips,
            seed: self.data.seed ^ 0x7661_6c00,
            ..self.data.clone()
        }
    }

    /// Every key with its resolved value.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.data;
        let t = &self.train;
        let modes = if self.eval_modes.len() == 2 {
            "all".to_string()
        } else {
            self.eval_modes[0].name().to_string()
        };
        let mut out = vec![("seed", self.seed.to_string()), ("threads", self.threads.to_string())];
        out.extend(network_entries(&self.network));
        out.extend([
            ("data.train_clips", d.num_clips.to_string()),
            ("data.val_clips", self.val_clips.to_string()),
            ("data.frames", d.frames.to_string()),
            ("data.height", d.height.to_string()),
            ("data.width", d.width.to_string()),
            ("data.bursts_min", d.bursts_min.to_string()),
            ("data.bursts_max", d.bursts_max.to_string()),
            ("data.burst_len_min", d.burst_len_min.to_string()),
            ("data.burst_len_max", d.burst_len_max.to_string()),
            ("data.min_gap", d.min_gap.to_string()),
            ("data.freq_min", format!("{:?}", d.freq_min)),
            ("data.freq_max", format!("{:?}", d.freq_max)),
            ("data.amplitude", format!("{:?}", d.amplitude)),
            ("data.noise", format!("{:?}", d.noise)),
            ("data.seed", d.seed.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", format!("{:?}", t.lr)),
            ("train.momentum", format!("{:?}", t.momentum)),
            ("train.weight_decay", format!("{:?}", t.weight_decay)),
            ("train.lr_steps", join(&t.lr_steps)),
            ("train.lr_gamma", format!("{:?}", t.lr_gamma)),
            ("train.fusion_lr_mult", format!("{:?}", t.fusion_lr_mult)),
            ("train.grid_lr_mult", format!("{:?}", t.grid_lr_mult)),
            ("train.grad_clip", t.grad_clip.map_or_else(|| "none".into(), |c| format!("{c:?}"))),
            ("train.eval_every", t.eval_every.to_string()),
            ("eval.mode", modes),
            ("paths.data", self.data_dir.display().to_string()),
            ("paths.out", self.out_dir.display().to_string()),
            (
                "paths.init",
                self.init.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","),
            ),
        ]);
        out
    }

    /// The fully resolved configuration; parses back to an equal value.
    pub fn to_kv(&self) -> String {
        let mut text = String::new();
        if let Some(p) = &self.preset {
            text.push_str(&format!("# preset: {p}\n"));
        }
        text + &render(&self.entries())
    }
}
