//! Run configuration: every tunable of a run as one flat `key=value` file.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys are errors.
//! [`RunConfig::to_text`] writes every key, so parse/print round-trips
//! exactly.

use std::fmt;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use tsf_core::attention::{FfnMode, NeckKind, NeckVariant};
use tsf_core::data::{GenConfig, Split};
use tsf_core::patchproto::{EvalProtocol, ModelConfig, TrainConfig};
use tsf_core::rng::fnv1a;

/// Comma-separated list value.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: fmt::Display> fmt::Display for List<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

impl<T: FromStr> FromStr for List<T>
where
    T::Err: fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(List(Vec::new()));
        }
        s.split(',')
            .map(|p| p.trim().parse::<T>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(List)
    }
}

/// Axis of an ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    NeckVariant,
    Heads,
    Lambda,
    NFilter,
    Temperature,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::NeckVariant => "neck_variant",
            Axis::Heads => "heads",
            Axis::Lambda => "lambda",
            Axis::NFilter => "n_filter",
            Axis::Temperature => "temperature",
        }
    }

    /// Config key this axis overrides.
    pub fn key(self) -> &'static str {
        match self {
            Axis::NeckVariant => "neck",
            other => other.as_str(),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "neck_variant" | "neck" => Ok(Axis::NeckVariant),
            "heads" => Ok(Axis::Heads),
            "lambda" => Ok(Axis::Lambda),
            "n_filter" | "n" => Ok(Axis::NFilter),
            "temperature" => Ok(Axis::Temperature),
            _ => Err(format!("unknown ablation axis {s:?}")),
        }
    }
}

macro_rules! run_config {
    ($( $(#[doc = $doc:expr])* $name:ident : $ty:ty = $default:expr, $hashed:literal; )*) => {
        /// Every tunable of a run.
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $( $(#[doc = $doc])* pub $name: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $name: $default, )* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$( stringify!($name), )*];

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($name) => {
                        self.$name = value
                            .trim()
                            .parse::<$ty>()
                            .map_err(|e| anyhow!("bad value {value:?} for {key}: {e}"))?;
                    } )*
                    _ => bail!("unknown config key {key:?}"),
                }
                Ok(())
            }

            /// Every key with its value, in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$( (stringify!($name), self.$name.to_string()), )*]
            }

            /// Keys that describe the experiment (not paths or threading).
            fn hashed_entries(&self) -> Vec<(&'static str, String)> {
                let mut out = Vec::new();
                $( if $hashed { out.push((stringify!($name), self.$name.to_string())); } )*
                out
            }
        }
    };
}

run_config! {
    /// Root seed; every random stream derives from it.
    seed: u64 = 0, true;
    /// Worker threads for evaluation and ablation cells.
    threads: usize = 1, false;
    data: String = String::new(), false;
    ckpt: String = String::new(), false;
    out: String = String::new(), false;

    base_classes: usize = 10, true;
    val_classes: usize = 5, true;
    novel_classes: usize = 5, true;
    images_per_class: usize = 40, true;
    channels: usize = 1, true;
    image_size: usize = 32, true;
    noise: f64 = 0.3, true;
    max_shift: usize = 0, true;
    clutter: usize = 0, true;

    /// Output channels of each backbone block.
    backbone: List<usize> = List(vec![16, 16, 16]), true;
    leak: f64 = 0.1, true;
    neck: NeckKind = NeckKind::Tsf, true;
    heads: usize = 1, true;
    n_filter: usize = 5, true;
    /// FFN hidden width; 0 means the embedding width.
    ffn_hidden: usize = 0, true;
    scaled: bool = false, true;
    temperature: f64 = 1.0, true;
    lambda: f64 = 0.5, true;
    alpha_init: f64 = 1.0, true;
    use_global: bool = true, true;
    use_rotation: bool = false, true;

    steps: usize = 300, true;
    lr: f64 = 0.01, true;
    momentum: f64 = 0.9, true;
    decay_at: f64 = 2.0 / 3.0, true;
    decay_factor: f64 = 0.1, true;
    clip_norm: f64 = 10.0, true;
    train_q_per_class: usize = 6, true;
    val_every: usize = 0, true;
    val_episodes: usize = 100, true;

    n_way: usize = 5, true;
    k_shot: usize = 1, true;
    q_per_class: usize = 15, true;
    episodes: usize = 2000, true;
    eval_split: Split = Split::Novel, true;

    axis: Axis = Axis::NeckVariant, true;
    values: List<String> = List(vec!["none".into(), "transformer".into(), "tsf".into()]), true;
    seeds: List<u64> = List(vec![1, 2, 3]), true;

    bench_h: usize = 8, true;
    bench_w: usize = 8, true;
    bench_c: usize = 64, true;
    bench_heads: List<usize> = List(vec![1, 4, 8]), true;
    bench_runs: usize = 100, true;
    bench_warmup: usize = 10, true;

    /// Novel images exported by `export-maps`.
    map_images: usize = 4, true;
}

impl RunConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value, got {raw:?}", no + 1))?;
            self.set(key.trim(), value).with_context(|| format!("line {}", no + 1))?;
        }
        Ok(())
    }

    pub fn load(path: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {path}"))?;
        Self::parse(&text)
    }

    /// Every key, one `key = value` per line.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Copy without paths and with one thread: what a checkpoint stores.
    pub fn portable(&self) -> Self {
        Self {
            threads: 1,
            data: String::new(),
            ckpt: String::new(),
            out: String::new(),
            ..self.clone()
        }
    }

    /// Hex digest of the experiment-defining keys. Paths and thread count
    /// are left out, so relocating files or changing parallelism keeps it.
    pub fn fingerprint(&self) -> String {
        let text: String = self.hashed_entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        format!("{:016x}", fnv1a(text.as_bytes()))
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            base_classes: self.base_classes,
            val_classes: self.val_classes,
            novel_classes: self.novel_classes,
            images_per_class: self.images_per_class,
            channels: self.channels,
            size: self.image_size,
            noise: self.noise,
            max_shift: self.max_shift,
            clutter: self.clutter,
            min_way: self.n_way,
        }
    }

    /// Model description for inputs of `in_channels x image_size^2` and a
    /// global head over `global_classes` base classes.
    pub fn model_config(&self, in_channels: usize, image_size: usize, global_classes: usize) -> ModelConfig {
        let mut m = ModelConfig::new(image_size, self.backbone.0.clone(), self.neck, global_classes);
        m.in_channels = in_channels;
        let c = m.feature_shape().0;
        m.neck = NeckVariant {
            kind: self.neck,
            heads: self.heads,
            n: self.n_filter,
            c,
            ffn_hidden: if self.ffn_hidden == 0 { c } else { self.ffn_hidden },
            scaled: self.scaled,
            ffn: FfnMode::Standard,
        };
        m.leak = self.leak;
        m.use_global = self.use_global;
        m.use_rotation = self.use_rotation;
        m.temperature = self.temperature;
        m.lambda = self.lambda;
        m.alpha_init = self.alpha_init;
        m
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            lr: self.lr,
            momentum: self.momentum,
            decay_at: self.decay_at,
            decay_factor: self.decay_factor,
            clip_norm: self.clip_norm,
            n_way: self.n_way,
            k_shot: self.k_shot,
            q_per_class: self.train_q_per_class,
            val_every: self.val_every,
            val_episodes: self.val_episodes,
        }
    }

    pub fn protocol(&self) -> EvalProtocol {
        let mut p = EvalProtocol::new(self.eval_split, self.episodes, self.n_way, self.k_shot);
        p.q_per_class = self.q_per_class;
        p
    }
}
