//! Run configuration: `key = value` text with `#` comments.
//!
//! Every key has a default. Unknown keys and malformed values are errors.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::audio::StftParams;
use crate::error::{Error, Result};
use crate::localize::{MapSource, ObjectPrior, DEFAULT_ALPHA};
use crate::metrics::DEFAULT_THETA;
use crate::micl::{MatchStrategy, TrainConfig};
use crate::models::ModelConfig;
use crate::objectness::PretrainConfig;
use crate::synth::{derive_seed, WorldConfig};

/// Name of the variable that overrides `seed`.
pub const SEED_ENV: &str = "EZVSL_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VisualInit {
    Objectness,
    Random,
}

impl FromStr for VisualInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "objectness" => Ok(VisualInit::Objectness),
            "random" => Ok(VisualInit::Random),
            _ => Err(Error::Config(format!("unknown visual_init `{s}`"))),
        }
    }
}

impl VisualInit {
    pub fn as_str(self) -> &'static str {
        match self {
            VisualInit::Objectness => "objectness",
            VisualInit::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    // data
    pub n_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_objects: usize,
    pub heard_fraction: f64,
    pub img_size: usize,
    pub min_shape: usize,
    pub max_shape: usize,
    pub max_shapes: usize,
    pub sample_rate: u32,
    pub clip_seconds: f64,
    pub n_fft: usize,
    pub hop: usize,
    pub audio_noise: f64,
    pub annotators: usize,
    pub box_jitter: usize,
    // model
    pub visual_channels: Vec<usize>,
    pub visual_strides: Vec<usize>,
    pub audio_channels: Vec<usize>,
    pub audio_strides: Vec<usize>,
    pub dim: usize,
    pub visual_init: VisualInit,
    // objectness pretraining
    pub obj_epochs: usize,
    pub obj_lr: f64,
    pub obj_batch_size: usize,
    pub obj_shuffle_labels: bool,
    // contrastive training
    pub tau: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub strategy: MatchStrategy,
    pub permute_audio: bool,
    // evaluation
    pub alpha: f64,
    pub theta: f64,
    pub map_source: MapSource,
    pub object_prior: ObjectPrior,
    pub baseline_runs: usize,
}

impl Default for Config {
    fn default() -> Self {
        let w = WorldConfig::default();
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let o = PretrainConfig::default();
        Self {
            seed: 0,
            n_classes: w.n_classes,
            n_train: 2000,
            n_test: 500,
            n_objects: 1000,
            heard_fraction: 0.5,
            img_size: w.img_size,
            min_shape: w.min_shape,
            max_shape: w.max_shape,
            max_shapes: w.max_shapes,
            sample_rate: w.sample_rate,
            clip_seconds: w.clip_seconds,
            n_fft: w.stft.n_fft,
            hop: w.stft.hop,
            audio_noise: w.audio_noise,
            annotators: 1,
            box_jitter: 2,
            visual_channels: m.visual_channels,
            visual_strides: m.visual_strides,
            audio_channels: m.audio_channels,
            audio_strides: m.audio_strides,
            dim: m.dim,
            visual_init: VisualInit::Objectness,
            obj_epochs: o.epochs,
            obj_lr: o.lr,
            obj_batch_size: o.batch_size,
            obj_shuffle_labels: o.shuffle_labels,
            tau: t.tau,
            batch_size: t.batch_size,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            epochs: t.epochs,
            strategy: t.strategy,
            permute_audio: t.permute_audio,
            alpha: DEFAULT_ALPHA,
            theta: DEFAULT_THETA,
            map_source: MapSource::Fused,
            object_prior: ObjectPrior::L1,
            baseline_runs: 100,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn list(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Keys whose values change what a training run produces.
const TRAINING_KEYS: &[&str] = &[
    "seed",
    "n_classes",
    "n_train",
    "n_objects",
    "heard_fraction",
    "img_size",
    "min_shape",
    "max_shape",
    "max_shapes",
    "sample_rate",
    "clip_seconds",
    "n_fft",
    "hop",
    "audio_noise",
    "visual_channels",
    "visual_strides",
    "audio_channels",
    "audio_strides",
    "dim",
    "visual_init",
    "obj_epochs",
    "obj_lr",
    "obj_batch_size",
    "obj_shuffle_labels",
    "tau",
    "batch_size",
    "lr",
    "beta1",
    "beta2",
    "epochs",
    "strategy",
    "permute_audio",
];

impl Config {
    /// Defaults overridden by the lines of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            c.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "n_classes" => self.n_classes = parse(key, value)?,
            "n_train" => self.n_train = parse(key, value)?,
            "n_test" => self.n_test = parse(key, value)?,
            "n_objects" => self.n_objects = parse(key, value)?,
            "heard_fraction" => self.heard_fraction = parse(key, value)?,
            "img_size" => self.img_size = parse(key, value)?,
            "min_shape" => self.min_shape = parse(key, value)?,
            "max_shape" => self.max_shape = parse(key, value)?,
            "max_shapes" => self.max_shapes = parse(key, value)?,
            "sample_rate" => self.sample_rate = parse(key, value)?,
            "clip_seconds" => self.clip_seconds = parse(key, value)?,
            "n_fft" => self.n_fft = parse(key, value)?,
            "hop" => self.hop = parse(key, value)?,
            "audio_noise" => self.audio_noise = parse(key, value)?,
            "annotators" => self.annotators = parse(key, value)?,
            "box_jitter" => self.box_jitter = parse(key, value)?,
            "visual_channels" => self.visual_channels = parse_list(key, value)?,
            "visual_strides" => self.visual_strides = parse_list(key, value)?,
            "audio_channels" => self.audio_channels = parse_list(key, value)?,
            "audio_strides" => self.audio_strides = parse_list(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "visual_init" => self.visual_init = value.parse()?,
            "obj_epochs" => self.obj_epochs = parse(key, value)?,
            "obj_lr" => self.obj_lr = parse(key, value)?,
            "obj_batch_size" => self.obj_batch_size = parse(key, value)?,
            "obj_shuffle_labels" => self.obj_shuffle_labels = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "strategy" => {
                self.strategy = value.parse().map_err(|e| Error::Config(format!("{e}")))?
            }
            "permute_audio" => self.permute_audio = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "theta" => self.theta = parse(key, value)?,
            "map_source" => {
                self.map_source = value.parse().map_err(|e| Error::Config(format!("{e}")))?
            }
            "object_prior" => {
                self.object_prior = value.parse().map_err(|e| Error::Config(format!("{e}")))?
            }
            "baseline_runs" => self.baseline_runs = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Apply `EZVSL_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = parse(SEED_ENV, v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.tau > 0.0) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must be in [0, 1], got {}", self.alpha));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return bad(format!("theta must be in (0, 1), got {}", self.theta));
        }
        if !(self.heard_fraction > 0.0 && self.heard_fraction < 1.0) {
            return bad(format!(
                "heard_fraction must be in (0, 1), got {}",
                self.heard_fraction
            ));
        }
        if self.batch_size == 0 || self.obj_batch_size == 0 {
            return bad("batch sizes must be >= 1".into());
        }
        if self.dim == 0 {
            return bad("dim must be >= 1".into());
        }
        if self.visual_channels.len() != self.visual_strides.len()
            || self.audio_channels.len() != self.audio_strides.len()
        {
            return bad("channel and stride lists differ in length".into());
        }
        if self.max_shapes == 0 || self.min_shape > self.max_shape || self.max_shape > self.img_size
        {
            return bad("inconsistent shape sizes".into());
        }
        if self.annotators == 0 {
            return bad("annotators must be >= 1".into());
        }
        if self.n_fft > self.n_samples() {
            return bad("clip is shorter than one STFT frame".into());
        }
        self.world().classes()?;
        Ok(())
    }

    /// Every key with its resolved value, in declaration order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("n_classes", self.n_classes.to_string()),
            ("n_train", self.n_train.to_string()),
            ("n_test", self.n_test.to_string()),
            ("n_objects", self.n_objects.to_string()),
            ("heard_fraction", self.heard_fraction.to_string()),
            ("img_size", self.img_size.to_string()),
            ("min_shape", self.min_shape.to_string()),
            ("max_shape", self.max_shape.to_string()),
            ("max_shapes", self.max_shapes.to_string()),
            ("sample_rate", self.sample_rate.to_string()),
            ("clip_seconds", self.clip_seconds.to_string()),
            ("n_fft", self.n_fft.to_string()),
            ("hop", self.hop.to_string()),
            ("audio_noise", self.audio_noise.to_string()),
            ("annotators", self.annotators.to_string()),
            ("box_jitter", self.box_jitter.to_string()),
            ("visual_channels", list(&self.visual_channels)),
            ("visual_strides", list(&self.visual_strides)),
            ("audio_channels", list(&self.audio_channels)),
            ("audio_strides", list(&self.audio_strides)),
            ("dim", self.dim.to_string()),
            ("visual_init", self.visual_init.as_str().to_string()),
            ("obj_epochs", self.obj_epochs.to_string()),
            ("obj_lr", self.obj_lr.to_string()),
            ("obj_batch_size", self.obj_batch_size.to_string()),
            ("obj_shuffle_labels", self.obj_shuffle_labels.to_string()),
            ("tau", self.tau.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("epochs", self.epochs.to_string()),
            ("strategy", self.strategy.to_string()),
            ("permute_audio", self.permute_audio.to_string()),
            ("alpha", self.alpha.to_string()),
            ("theta", self.theta.to_string()),
            ("map_source", self.map_source.to_string()),
            ("object_prior", self.object_prior.to_string()),
            ("baseline_runs", self.baseline_runs.to_string()),
        ]
    }

    /// Resolved configuration in the input format; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// First 8 bytes of SHA-256 over the training-relevant entries.
    pub fn hash_bytes(&self) -> [u8; 8] {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if TRAINING_KEYS.contains(&k) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        h.finalize()[..8].try_into().unwrap()
    }

    pub fn hash_hex(&self) -> String {
        self.hash_bytes()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn n_samples(&self) -> usize {
        (self.clip_seconds * self.sample_rate as f64).round() as usize
    }

    pub fn stft(&self) -> StftParams {
        StftParams {
            n_fft: self.n_fft,
            hop: self.hop,
        }
    }

    pub fn world(&self) -> WorldConfig {
        WorldConfig {
            n_classes: self.n_classes,
            img_size: self.img_size,
            min_shape: self.min_shape,
            max_shape: self.max_shape,
            max_shapes: self.max_shapes,
            sample_rate: self.sample_rate,
            clip_seconds: self.clip_seconds,
            stft: self.stft(),
            audio_noise: self.audio_noise,
            ..WorldConfig::default()
        }
    }

    pub fn model(&self) -> ModelConfig {
        let frames = self.stft().frames(self.n_samples());
        ModelConfig {
            img_size: self.img_size,
            visual_channels: self.visual_channels.clone(),
            visual_strides: self.visual_strides.clone(),
            audio_channels: self.audio_channels.clone(),
            audio_strides: self.audio_strides.clone(),
            dim: self.dim,
            n_classes: self.n_classes,
            spec_shape: [self.stft().bins(), frames],
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            tau: self.tau,
            batch_size: self.batch_size,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epochs: self.epochs,
            strategy: self.strategy,
            seed: self.derived_seed("train"),
            permute_audio: self.permute_audio,
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.obj_epochs,
            lr: self.obj_lr,
            batch_size: self.obj_batch_size,
            seed: self.derived_seed("objectness"),
            shuffle_labels: self.obj_shuffle_labels,
        }
    }

    /// Independent seed for one named stage.
    pub fn derived_seed(&self, stage: &str) -> u64 {
        let tag = stage.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
        });
        derive_seed(self.seed, tag, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let c = Config::default();
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
        assert_eq!(c.model(), ModelConfig::default());
        assert_eq!(c.world(), WorldConfig::default());
    }

    #[test]
    fn overrides_and_comments() {
        let c = Config::parse("# run\nseed = 7\n\ndim=32 # smaller\nstrategy = avg_of_sim\nvisual_channels = 8, 8\nvisual_strides = 2,2\n").unwrap();
        assert_eq!((c.seed, c.dim), (7, 32));
        assert_eq!(c.strategy, MatchStrategy::AvgOfSim);
        assert_eq!(c.visual_channels, vec![8, 8]);
    }

    #[test]
    fn bad_input_is_rejected() {
        for text in [
            "colour = red",
            "dim",
            "tau = 0",
            "alpha = 1.5",
            "theta = 1",
            "strategy = mean",
            "seed = -1",
            "visual_channels = 8,8",
            "n_classes = 30",
        ] {
            assert!(
                matches!(
                    Config::parse(text),
                    Err(Error::Config(_)) | Err(Error::InvalidArgument(_))
                ),
                "{text}"
            );
        }
    }

    #[test]
    fn hash_tracks_training_keys_only() {
        let a = Config::default();
        let mut b = a.clone();
        b.alpha = 0.9;
        b.theta = 0.3;
        assert_eq!(a.hash_hex(), b.hash_hex());
        b.tau = 0.1;
        assert_ne!(a.hash_hex(), b.hash_hex());
        assert_eq!(a.hash_hex().len(), 16);
    }

    #[test]
    fn stage_seeds_differ() {
        let c = Config::default();
        assert_ne!(c.derived_seed("train"), c.derived_seed("objectness"));
        let mut d = c.clone();
        d.seed = 1;
        assert_ne!(c.derived_seed("train"), d.derived_seed("train"));
    }
}
