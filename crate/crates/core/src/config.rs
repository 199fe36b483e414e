//! Plain-text run configuration.
//!
//! One `key = value` pair per line; `#` starts a comment; unknown keys are
//! rejected. Every field of every sub-configuration has a key, see
//! [`RunConfig::to_text`] for the full list with defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::codebook::CodebookConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::matching::{MatchConfig, TemporalOperand};
use crate::predictive::PredictiveConfig;
use crate::synth::SynthConfig;

/// Which embeddings retrieval compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingSpace {
    Quantized,
    Continuous,
}

impl FromStr for EmbeddingSpace {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quantized" => Ok(Self::Quantized),
            "continuous" => Ok(Self::Continuous),
            _ => Err(Error::config(format!("unknown embedding space `{s}`"))),
        }
    }
}

impl EmbeddingSpace {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Quantized => "quantized",
            Self::Continuous => "continuous",
        }
    }
}

/// Component switches for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    pub disable_predictive: bool,
    pub disable_match: bool,
    /// Sequential per-modality EMA (F, V, T order) with unit fMRI weight.
    pub disable_sync: bool,
}

impl Ablation {
    pub fn label(&self) -> &'static str {
        match (self.disable_predictive, self.disable_match, self.disable_sync) {
            (false, false, false) => "full",
            (true, false, false) => "no-predictive",
            (false, true, false) => "no-matching",
            (false, false, true) => "no-sync",
            _ => "custom",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha_predictive: f64,
    pub alpha_match: f64,
    pub alpha_commit: f64,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha_predictive: 0.5,
            alpha_match: 0.3,
            alpha_commit: 0.2,
            batch_size: 32,
            lr_max: 3e-5,
            lr_min: 1e-6,
            total_steps: 2000,
            seed: 42,
            eval_every: 0,
            checkpoint_path: None,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha_predictive, self.alpha_match, self.alpha_commit].iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::config("loss weights must be >= 0"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be >= 2"));
        }
        if !(self.lr_max >= self.lr_min) || !(self.lr_min >= 0.0) {
            return Err(Error::config("need lr_max >= lr_min >= 0"));
        }
        if self.total_steps == 0 {
            return Err(Error::config("total_steps must be >= 1"));
        }
        Ok(())
    }
}

/// Model widths that are not implied by the data.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_hidden: usize,
    pub dilations: Vec<usize>,
    pub kernel_size: usize,
    pub heads: usize,
    pub d_ff: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let e = EncoderConfig::default();
        Self {
            d_hidden: e.d_hidden,
            dilations: e.dilations,
            kernel_size: e.kernel_size,
            heads: e.heads,
            d_ff: e.d_ff,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub predictive: PredictiveConfig,
    pub matching: MatchConfig,
    pub codebook: CodebookConfig,
    pub train: TrainConfig,
    pub embedding_space: EmbeddingSpace,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            predictive: PredictiveConfig::default(),
            matching: MatchConfig::default(),
            codebook: CodebookConfig::default(),
            train: TrainConfig::default(),
            embedding_space: EmbeddingSpace::Quantized,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

impl RunConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_video: self.synth.d_video,
            d_fmri: self.synth.d_fmri,
            d_caption: self.synth.d_caption,
            d_hidden: self.model.d_hidden,
            t_video: self.synth.t_video,
            t_fmri: self.synth.t_fmri,
            dilations: self.model.dilations.clone(),
            kernel_size: self.model.kernel_size,
            heads: self.model.heads,
            d_ff: self.model.d_ff,
        }
    }

    /// Codebook configuration with `dim` tied to the shared width.
    pub fn codebook_config(&self) -> CodebookConfig {
        CodebookConfig {
            dim: self.model.d_hidden,
            ..self.codebook.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.encoder().validate()?;
        self.predictive.validate()?;
        self.matching.validate()?;
        self.codebook_config().validate()?;
        self.train.validate()
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = &mut self.synth;
        let m = &mut self.model;
        let n = &mut self.predictive;
        let mt = &mut self.matching;
        let c = &mut self.codebook;
        let t = &mut self.train;
        match key {
            "synth.n_train" => s.n_train = parse(key, value)?,
            "synth.n_test" => s.n_test = parse(key, value)?,
            "synth.latent_dim" => s.latent_dim = parse(key, value)?,
            "synth.d_video" => s.d_video = parse(key, value)?,
            "synth.d_fmri" => s.d_fmri = parse(key, value)?,
            "synth.d_caption" => s.d_caption = parse(key, value)?,
            "synth.t_video" => s.t_video = parse(key, value)?,
            "synth.t_fmri" => s.t_fmri = parse(key, value)?,
            "synth.tr_seconds" => s.tr_seconds = parse(key, value)?,
            "synth.delay_seconds" => s.delay_seconds = parse(key, value)?,
            "synth.noise_sigma" => s.noise_sigma = parse(key, value)?,
            "synth.aux_noise_sigma" => s.aux_noise_sigma = parse(key, value)?,
            "synth.walk_sigma" => s.walk_sigma = parse(key, value)?,
            "synth.hrf_length" => s.hrf_length = parse(key, value)?,
            "synth.hrf_peak_shape" => s.hrf.peak_shape = parse(key, value)?,
            "synth.hrf_peak_scale" => s.hrf.peak_scale = parse(key, value)?,
            "synth.hrf_undershoot_shape" => s.hrf.undershoot_shape = parse(key, value)?,
            "synth.hrf_undershoot_scale" => s.hrf.undershoot_scale = parse(key, value)?,
            "synth.hrf_undershoot_ratio" => s.hrf.undershoot_ratio = parse(key, value)?,
            "synth.pre_shift" => s.pre_shift = parse_bool(key, value)?,
            "synth.seed" => s.seed = parse(key, value)?,
            "model.d_hidden" => m.d_hidden = parse(key, value)?,
            "model.dilations" => {
                m.dilations = value
                    .split(',')
                    .map(|p| parse(key, p.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "model.kernel_size" => m.kernel_size = parse(key, value)?,
            "model.heads" => m.heads = parse(key, value)?,
            "model.d_ff" => m.d_ff = parse(key, value)?,
            "predictive.temperature" => n.temperature = parse(key, value)?,
            "predictive.offset" => n.offset = parse(key, value)?,
            "predictive.fmri_to_video" => n.fmri_to_video = parse_bool(key, value)?,
            "predictive.video_to_fmri" => n.video_to_fmri = parse_bool(key, value)?,
            "match.beta_struct" => mt.beta_struct = parse(key, value)?,
            "match.operand" => {
                mt.operand = match value {
                    "filtered" => TemporalOperand::FilteredHistory,
                    "single" => TemporalOperand::SingleStep,
                    _ => return Err(Error::config(format!("invalid value `{value}` for `{key}`"))),
                }
            }
            "match.structure_on_codes" => mt.structure_on_codes = parse_bool(key, value)?,
            "match.structure_text" => mt.structure_text = parse_bool(key, value)?,
            "codebook.size" => c.size = parse(key, value)?,
            "codebook.decay" => c.decay = parse(key, value)?,
            "codebook.mix" => c.mix = parse(key, value)?,
            "codebook.var_eps" => c.var_eps = parse(key, value)?,
            "codebook.commitment" => c.commitment = parse(key, value)?,
            "codebook.reseed_dead" => c.reseed_dead = parse_bool(key, value)?,
            "codebook.dead_threshold" => c.dead_threshold = parse(key, value)?,
            "codebook.dead_patience" => c.dead_patience = parse(key, value)?,
            "train.alpha_predictive" => t.alpha_predictive = parse(key, value)?,
            "train.alpha_match" => t.alpha_match = parse(key, value)?,
            "train.alpha_commit" => t.alpha_commit = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.lr_max" => t.lr_max = parse(key, value)?,
            "train.lr_min" => t.lr_min = parse(key, value)?,
            "train.total_steps" => t.total_steps = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.eval_every" => t.eval_every = parse(key, value)?,
            "train.checkpoint_path" => {
                t.checkpoint_path = if value.is_empty() { None } else { Some(PathBuf::from(value)) }
            }
            "train.adam_beta1" => t.adam_beta1 = parse(key, value)?,
            "train.adam_beta2" => t.adam_beta2 = parse(key, value)?,
            "train.adam_eps" => t.adam_eps = parse(key, value)?,
            "train.disable_predictive" => t.ablation.disable_predictive = parse_bool(key, value)?,
            "train.disable_match" => t.ablation.disable_match = parse_bool(key, value)?,
            "train.disable_sync" => t.ablation.disable_sync = parse_bool(key, value)?,
            "eval.embedding_space" => self.embedding_space = value.parse()?,
            _ => return Err(Error::config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Parses a configuration, starting from defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    /// Every key with its current value, in a stable order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let s = &self.synth;
        let m = &self.model;
        let n = &self.predictive;
        let mt = &self.matching;
        let c = &self.codebook;
        let t = &self.train;
        vec![
            ("synth.n_train", s.n_train.to_string()),
            ("synth.n_test", s.n_test.to_string()),
            ("synth.latent_dim", s.latent_dim.to_string()),
            ("synth.d_video", s.d_video.to_string()),
            ("synth.d_fmri", s.d_fmri.to_string()),
            ("synth.d_caption", s.d_caption.to_string()),
            ("synth.t_video", s.t_video.to_string()),
            ("synth.t_fmri", s.t_fmri.to_string()),
            ("synth.tr_seconds", s.tr_seconds.to_string()),
            ("synth.delay_seconds", s.delay_seconds.to_string()),
            ("synth.noise_sigma", s.noise_sigma.to_string()),
            ("synth.aux_noise_sigma", s.aux_noise_sigma.to_string()),
            ("synth.walk_sigma", s.walk_sigma.to_string()),
            ("synth.hrf_length", s.hrf_length.to_string()),
            ("synth.hrf_peak_shape", s.hrf.peak_shape.to_string()),
            ("synth.hrf_peak_scale", s.hrf.peak_scale.to_string()),
            ("synth.hrf_undershoot_shape", s.hrf.undershoot_shape.to_string()),
            ("synth.hrf_undershoot_scale", s.hrf.undershoot_scale.to_string()),
            ("synth.hrf_undershoot_ratio", s.hrf.undershoot_ratio.to_string()),
            ("synth.pre_shift", s.pre_shift.to_string()),
            ("synth.seed", s.seed.to_string()),
            ("model.d_hidden", m.d_hidden.to_string()),
            (
                "model.dilations",
                m.dilations.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            ),
            ("model.kernel_size", m.kernel_size.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.d_ff", m.d_ff.to_string()),
            ("predictive.temperature", n.temperature.to_string()),
            ("predictive.offset", n.offset.to_string()),
            ("predictive.fmri_to_video", n.fmri_to_video.to_string()),
            ("predictive.video_to_fmri", n.video_to_fmri.to_string()),
            ("match.beta_struct", mt.beta_struct.to_string()),
            (
                "match.operand",
                match mt.operand {
                    TemporalOperand::FilteredHistory => "filtered".into(),
                    TemporalOperand::SingleStep => "single".into(),
                },
            ),
            ("match.structure_on_codes", mt.structure_on_codes.to_string()),
            ("match.structure_text", mt.structure_text.to_string()),
            ("codebook.size", c.size.to_string()),
            ("codebook.decay", c.decay.to_string()),
            ("codebook.mix", c.mix.to_string()),
            ("codebook.var_eps", c.var_eps.to_string()),
            ("codebook.commitment", c.commitment.to_string()),
            ("codebook.reseed_dead", c.reseed_dead.to_string()),
            ("codebook.dead_threshold", c.dead_threshold.to_string()),
            ("codebook.dead_patience", c.dead_patience.to_string()),
            ("train.alpha_predictive", t.alpha_predictive.to_string()),
            ("train.alpha_match", t.alpha_match.to_string()),
            ("train.alpha_commit", t.alpha_commit.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr_max", t.lr_max.to_string()),
            ("train.lr_min", t.lr_min.to_string()),
            ("train.total_steps", t.total_steps.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.eval_every", t.eval_every.to_string()),
            (
                "train.checkpoint_path",
                t.checkpoint_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
            ("train.adam_beta1", t.adam_beta1.to_string()),
            ("train.adam_beta2", t.adam_beta2.to_string()),
            ("train.adam_eps", t.adam_eps.to_string()),
            ("train.disable_predictive", t.ablation.disable_predictive.to_string()),
            ("train.disable_match", t.ablation.disable_match.to_string()),
            ("train.disable_sync", t.ablation.disable_sync.to_string()),
            ("eval.embedding_space", self.embedding_space.as_str().to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Only the `synth.*` keys, as written next to a dataset file.
    pub fn synth_manifest(&self) -> String {
        let mut out = String::from("# synthetic dataset manifest\n");
        for (k, v) in self.pairs().into_iter().filter(|(k, _)| k.starts_with("synth.")) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// 64-bit FNV-1a of the canonical text, as 16 hex digits.
    pub fn fingerprint(&self) -> String {
        format!("{:016x}", fnv1a(self.to_text().as_bytes()))
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
