//! Training configuration, geometry presets and the `key=value` file format.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use mondeq::model::{InputShape, ModelSpec};
use mondeq::SplittingMethod;

use crate::data::{DatasetName, DatasetSpec};
use crate::error::{Result, TrainError};

/// Environment variable naming the directory that holds the datasets.
pub const DATA_DIR_ENV: &str = "MONDEQ_DATA_DIR";

/// Model geometries used for the MNIST and CIFAR-10 experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    FcMnist,
    ConvMnist,
    MultitierMnist,
    ConvCifar,
    MultitierCifar,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::FcMnist,
        Preset::ConvMnist,
        Preset::MultitierMnist,
        Preset::ConvCifar,
        Preset::MultitierCifar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::FcMnist => "fc-mnist",
            Preset::ConvMnist => "conv-mnist",
            Preset::MultitierMnist => "multitier-mnist",
            Preset::ConvCifar => "conv-cifar",
            Preset::MultitierCifar => "multitier-cifar",
        }
    }

    pub fn dataset(self) -> DatasetName {
        match self {
            Preset::FcMnist | Preset::ConvMnist | Preset::MultitierMnist => DatasetName::Mnist,
            Preset::ConvCifar | Preset::MultitierCifar => DatasetName::Cifar10,
        }
    }

    pub fn input(self) -> InputShape {
        match self.dataset() {
            DatasetName::Mnist => InputShape { channels: 1, side: 28 },
            DatasetName::Cifar10 => InputShape { channels: 3, side: 32 },
        }
    }

    /// Architecture with default training options (m = 1, weight norm on).
    pub fn model_spec(self) -> ModelSpec {
        let input = self.input();
        let mut spec = match self {
            Preset::FcMnist => ModelSpec::dense(input, 87, 10),
            Preset::ConvMnist => ModelSpec::conv(input, 54, 10),
            Preset::MultitierMnist => {
                let mut s = ModelSpec::multitier(input, vec![16, 32, 32], 10);
                s.pool = 1;
                s
            }
            Preset::ConvCifar => ModelSpec::conv(input, 81, 10),
            Preset::MultitierCifar => {
                let mut s = ModelSpec::multitier(input, vec![16, 32, 60], 10);
                s.pool = 1;
                s
            }
        };
        spec.m = 1.0;
        spec.weight_norm = true;
        spec
    }

    pub fn initial_lr(self) -> f64 {
        match self {
            Preset::MultitierCifar => 1e-2,
            _ => 1e-3,
        }
    }

    pub fn lr_decay_steps(self) -> usize {
        match self {
            Preset::ConvCifar => 25,
            _ => 10,
        }
    }
}

impl FromStr for Preset {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
                TrainError::Config(format!("unknown preset {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub preset: Preset,
    pub data_dir: Option<PathBuf>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Divide the learning rate by `lr_decay_factor` every this many epochs.
    pub lr_decay_steps: usize,
    pub lr_decay_factor: f64,
    pub m: f64,
    pub weight_norm: bool,
    pub method: SplittingMethod,
    pub alpha: f64,
    pub epsilon_train: f64,
    pub max_iter: usize,
    pub alpha_candidates: Vec<f64>,
    /// Epochs between step-size retunes; 0 disables retuning.
    pub alpha_retune_every: usize,
    pub probe_size: usize,
    pub augment: bool,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl TrainConfig {
    pub fn for_preset(preset: Preset) -> Self {
        Self {
            preset,
            data_dir: std::env::var_os(DATA_DIR_ENV).map(PathBuf::from),
            train_limit: None,
            test_limit: None,
            epochs: 40,
            batch_size: 128,
            lr: preset.initial_lr(),
            lr_decay_steps: preset.lr_decay_steps(),
            lr_decay_factor: 10.0,
            m: 1.0,
            weight_norm: true,
            method: SplittingMethod::PeacemanRachford,
            alpha: 1.0,
            epsilon_train: 1e-2,
            max_iter: 500,
            alpha_candidates: (0..8).map(|k| 0.5f64.powi(k)).collect(),
            alpha_retune_every: 5,
            probe_size: 128,
            augment: false,
            seed: 0,
            out_dir: PathBuf::from("runs"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(TrainError::Config(msg.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.lr_decay_factor >= 1.0) {
            return bad("lr_decay_factor must be at least 1");
        }
        if !(self.m > 0.0 && self.m.is_finite()) {
            return bad("m must be positive");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if !(self.epsilon_train > 0.0) || self.max_iter == 0 {
            return bad("epsilon_train must be positive and max_iter at least 1");
        }
        if self.alpha_candidates.is_empty() || self.alpha_candidates.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return bad("alpha_candidates must be a nonempty list of positive numbers");
        }
        if self.probe_size == 0 {
            return bad("probe_size must be at least 1");
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_decay_steps == 0 {
            return self.lr;
        }
        self.lr / self.lr_decay_factor.powi((epoch / self.lr_decay_steps) as i32)
    }

    pub fn model_spec(&self) -> ModelSpec {
        let mut spec = self.preset.model_spec();
        spec.m = self.m;
        spec.weight_norm = self.weight_norm;
        spec
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let dir = self.data_dir.clone().ok_or_else(|| {
            TrainError::Config(format!("no data directory: pass --data-dir or set {DATA_DIR_ENV}"))
        })?;
        let mut spec = DatasetSpec::new(self.preset.dataset(), dir);
        spec.train_limit = self.train_limit;
        spec.test_limit = self.test_limit;
        Ok(spec)
    }

    /// Sets one field from its textual form. Keys may use `-` or `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| TrainError::Config(format!("{key}: cannot parse {v:?}")))
        }
        fn opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>> {
            if v.is_empty() || v == "none" {
                Ok(None)
            } else {
                num(key, v).map(Some)
            }
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(TrainError::Config(format!("{key}: expected a boolean, got {v:?}"))),
            }
        }
        let v = value.trim();
        match key.trim().replace('-', "_").as_str() {
            "preset" => {
                let preset: Preset = v.parse()?;
                if preset != self.preset {
                    // geometry-specific defaults follow the preset
                    if self.lr == self.preset.initial_lr() {
                        self.lr = preset.initial_lr();
                    }
                    if self.lr_decay_steps == self.preset.lr_decay_steps() {
                        self.lr_decay_steps = preset.lr_decay_steps();
                    }
                    self.preset = preset;
                }
            }
            "data_dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "train_limit" => self.train_limit = opt("train_limit", v)?,
            "test_limit" => self.test_limit = opt("test_limit", v)?,
            "epochs" => self.epochs = num("epochs", v)?,
            "batch_size" => self.batch_size = num("batch_size", v)?,
            "lr" | "initial_lr" => self.lr = num("lr", v)?,
            "lr_decay_steps" => self.lr_decay_steps = num("lr_decay_steps", v)?,
            "lr_decay_factor" => self.lr_decay_factor = num("lr_decay_factor", v)?,
            "m" => self.m = num("m", v)?,
            "weight_norm" => self.weight_norm = flag("weight_norm", v)?,
            "method" => {
                self.method = v
                    .parse()
                    .map_err(|e: mondeq::MonDeqError| TrainError::Config(e.to_string()))?
            }
            "alpha" => self.alpha = num("alpha", v)?,
            "epsilon_train" | "epsilon" => self.epsilon_train = num("epsilon_train", v)?,
            "max_iter" => self.max_iter = num("max_iter", v)?,
            "alpha_candidates" => {
                self.alpha_candidates = v
                    .split(',')
                    .map(|s| num("alpha_candidates", s.trim()))
                    .collect::<Result<_>>()?
            }
            "alpha_retune_every" => self.alpha_retune_every = num("alpha_retune_every", v)?,
            "probe_size" => self.probe_size = num("probe_size", v)?,
            "augment" => self.augment = flag("augment", v)?,
            "seed" => self.seed = num("seed", v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(TrainError::Config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` file: one entry per line, `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected key=value", lineno + 1)))?;
            self.set(k, v)
                .map_err(|e| TrainError::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
        self.apply_text(&text)
    }

    /// The configuration as `key=value` lines accepted by [`Self::apply_text`].
    pub fn to_text(&self) -> String {
        let opt = |o: Option<usize>| o.map_or_else(|| "none".to_string(), |n| n.to_string());
        let candidates: Vec<String> = self.alpha_candidates.iter().map(f64::to_string).collect();
        let mut out = vec![
            format!("preset={}", self.preset),
            format!("train_limit={}", opt(self.train_limit)),
            format!("test_limit={}", opt(self.test_limit)),
            format!("epochs={}", self.epochs),
            format!("batch_size={}", self.batch_size),
            format!("lr={}", self.lr),
            format!("lr_decay_steps={}", self.lr_decay_steps),
            format!("lr_decay_factor={}", self.lr_decay_factor),
            format!("m={}", self.m),
            format!("weight_norm={}", self.weight_norm),
            format!("method={}", self.method),
            format!("alpha={}", self.alpha),
            format!("epsilon_train={}", self.epsilon_train),
            format!("max_iter={}", self.max_iter),
            format!("alpha_candidates={}", candidates.join(",")),
            format!("alpha_retune_every={}", self.alpha_retune_every),
            format!("probe_size={}", self.probe_size),
            format!("augment={}", self.augment),
            format!("seed={}", self.seed),
            format!("out_dir={}", self.out_dir.display()),
        ];
        if let Some(d) = &self.data_dir {
            out.insert(1, format!("data_dir={}", d.display()));
        }
        out.join("\n") + "\n"
    }
}
