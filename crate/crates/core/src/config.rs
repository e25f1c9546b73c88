//! Run configuration as plain `key = value` text with `#` comments.
//!
//! Every field has a default, unknown keys are rejected, and
//! [`RunConfig::to_text`] re-parses to an identical value.

use std::path::{Path, PathBuf};

use crate::autograd::SgdConfig;
use crate::error::{MglError, Result};
use crate::network::{LossConfig, ModelConfig, Variant};
use crate::synth::SceneConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    // model
    pub widths: [usize; 4],
    pub channels: usize,
    pub nodes: usize,
    pub support: usize,
    pub k_nn: usize,
    pub stages: usize,
    pub variant: Variant,
    pub per_stage_weights: bool,
    // optimiser and loss
    pub base_lr: f64,
    pub power: f64,
    pub momentum: f64,
    pub max_iter: usize,
    /// Stop (and checkpoint) after this many iterations; 0 runs to `max_iter`.
    pub stop_iter: usize,
    pub batch: usize,
    pub gamma: f64,
    pub deep_supervision: bool,
    pub flip: bool,
    // data
    pub height: usize,
    pub width: usize,
    pub kappa: f64,
    pub octaves: usize,
    pub cell: f64,
    pub train_count: usize,
    pub test_count: usize,
    // paths
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let s = SceneConfig::default();
        Self {
            seed: 0,
            widths: m.widths,
            channels: m.channels,
            nodes: m.nodes,
            support: m.support,
            k_nn: m.k_nn,
            stages: m.stages,
            variant: m.variant,
            per_stage_weights: m.per_stage_weights,
            base_lr: 1e-3,
            power: 0.9,
            momentum: 0.9,
            max_iter: 500,
            stop_iter: 0,
            batch: 8,
            gamma: 1.0,
            deep_supervision: false,
            flip: false,
            height: s.height,
            width: s.width,
            kappa: s.kappa,
            octaves: s.octaves,
            cell: s.cell,
            train_count: 8,
            test_count: 4,
            data_dir: "data".into(),
            checkpoint: "mgl.ckpt".into(),
            log: "train_log.csv".into(),
            out_dir: "out".into(),
        }
    }
}

trait Value: Sized {
    fn read(s: &str) -> Option<Self>;
    fn show(&self) -> String;
}

macro_rules! display_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn read(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
display_value!(usize, u64, bool);

impl Value for f64 {
    fn read(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn show(&self) -> String {
        // `{:?}` is the shortest representation that parses back exactly.
        format!("{self:?}")
    }
}

impl Value for PathBuf {
    fn read(s: &str) -> Option<Self> {
        (!s.is_empty()).then(|| PathBuf::from(s))
    }
    fn show(&self) -> String {
        self.display().to_string()
    }
}

impl Value for Variant {
    fn read(s: &str) -> Option<Self> {
        Variant::parse(s).ok()
    }
    fn show(&self) -> String {
        self.name().to_string()
    }
}

impl Value for [usize; 4] {
    fn read(s: &str) -> Option<Self> {
        let v: Vec<usize> = s.split(',').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
        v.try_into().ok()
    }
    fn show(&self) -> String {
        self.map(|w| w.to_string()).join(",")
    }
}

macro_rules! fields {
    ($($key:ident),* $(,)?) => {
        pub const KEYS: &[&str] = &[$(stringify!($key)),*];

        impl RunConfig {
            /// Set one field from its textual form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key.trim() {
                    $(stringify!($key) => {
                        self.$key = Value::read(value).ok_or_else(|| {
                            MglError::Config(format!("invalid value {value:?} for {}", stringify!($key)))
                        })?;
                    })*
                    other => return Err(MglError::Config(format!("unknown config key {other:?}"))),
                }
                Ok(())
            }

            /// Every field as `key = value`, one per line.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(out.push_str(&format!("{} = {}\n", stringify!($key), Value::show(&self.$key)));)*
                out
            }
        }
    };
}

fields!(
    seed,
    widths,
    channels,
    nodes,
    support,
    k_nn,
    stages,
    variant,
    per_stage_weights,
    base_lr,
    power,
    momentum,
    max_iter,
    stop_iter,
    batch,
    gamma,
    deep_supervision,
    flip,
    height,
    width,
    kappa,
    octaves,
    cell,
    train_count,
    test_count,
    data_dir,
    checkpoint,
    log,
    out_dir,
);

impl RunConfig {
    /// Apply `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MglError::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            self.set(k, v)
                .map_err(|e| MglError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MglError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            widths: self.widths,
            channels: self.channels,
            nodes: self.nodes,
            support: self.support,
            k_nn: self.k_nn,
            stages: self.stages,
            variant: self.variant,
            per_stage_weights: self.per_stage_weights,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            sgd: SgdConfig {
                base_lr: self.base_lr,
                power: self.power,
                momentum: self.momentum,
                max_iter: self.max_iter,
            },
            batch: self.batch,
            loss: LossConfig {
                gamma: self.gamma,
                deep_supervision: self.deep_supervision,
            },
            seed: self.seed,
            flip: self.flip,
        }
    }

    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            height: self.height,
            width: self.width,
            octaves: self.octaves,
            cell: self.cell,
            kappa: self.kappa,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.scene().validate()?;
        if self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(MglError::Config(format!(
                "image size {}×{} must be a multiple of 4",
                self.height, self.width
            )));
        }
        if self.max_iter == 0 || self.batch == 0 {
            return Err(MglError::Config("max_iter and batch must be positive".into()));
        }
        if self.stop_iter > self.max_iter {
            return Err(MglError::Config(format!(
                "stop_iter {} exceeds max_iter {}",
                self.stop_iter, self.max_iter
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.base_lr < 0.0 || self.power < 0.0 || self.gamma < 0.0 {
            return Err(MglError::Config(
                "need 0 ≤ momentum < 1 and non-negative base_lr, power and gamma".into(),
            ));
        }
        Ok(())
    }

    pub fn train_dir(&self) -> PathBuf {
        self.data_dir.join("train")
    }

    pub fn test_dir(&self) -> PathBuf {
        self.data_dir.join("test")
    }
}
