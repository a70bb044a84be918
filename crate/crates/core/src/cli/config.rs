//! Flat `section.key=value` run configuration.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::data::{LabelRange, SyntheticSpec};
use crate::distill::{DistillConfig, DistillLossKind};
use crate::error::{Error, Result};
use crate::metrics::LossWeights;
use crate::models::{FusionConfig, TcGruConfig};
use crate::signal::FrontendConfig;
use crate::trainer::TrainConfig;

/// Every accepted key with its default. An empty default means "unset".
const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("labels.min", "1"),
    ("labels.max", "7"),
    ("frontend.frame_len", "0.025"),
    ("frontend.frame_hop", "0.01"),
    ("frontend.n_mel", "40"),
    ("frontend.fmin", "20"),
    ("frontend.fmax", ""),
    ("frontend.pitch_fmin", "60"),
    ("frontend.pitch_fmax", "400"),
    ("frontend.log_floor", "1e-10"),
    ("frontend.voicing_threshold", "0.5"),
    ("model.type", "tcgru"),
    ("model.input_dim", "43"),
    ("model.tc_channels", "64"),
    ("model.tc_kernel", "5"),
    ("model.gru_hidden", "128"),
    ("model.embed_dim", "128"),
    ("fusion.acoustic_proj_dim", "128"),
    ("fusion.tc_kernel", "5"),
    ("fusion.gru_hidden", "128"),
    ("fusion.fusion_hidden", "128"),
    ("fusion.lexical_checkpoints", ""),
    ("train.batch_size", "32"),
    ("train.lr", "0.0005"),
    ("train.max_epochs", "50"),
    ("train.patience", "10"),
    ("train.alpha", "0.3333333333333333"),
    ("train.beta", "0.3333333333333333"),
    ("train.noise_aware", "false"),
    ("train.noise_fraction", "0.09"),
    ("train.normalize_inputs", "true"),
    ("train.init_output_bias", "true"),
    ("distill.kappa", "0.001"),
    ("distill.lambda", "1"),
    ("distill.label_range", ""),
    ("distill.ce_bins", "7"),
    ("distill.use_ce", "true"),
    ("distill.loss", "ccc"),
    ("synth.n_train", "1000"),
    ("synth.n_valid", "200"),
    ("synth.n_eval", "200"),
    ("synth.min_frames", "8"),
    ("synth.max_frames", "16"),
    ("synth.lexical_min_frames", "4"),
    ("synth.lexical_max_frames", "8"),
    ("synth.acoustic_dim", "16"),
    ("synth.noise_channels", "4"),
    ("synth.lexical_dim", "8"),
    ("synth.obs_noise", "1"),
    ("synth.speaker_noise", "0.3"),
    ("synth.valence_coupling", "0.1"),
    ("synth.lexical_cross_coupling", "0.15"),
    ("synth.modulation_depth", "0.5"),
    ("synth.corruption_frame_noise", "0.5"),
    ("synth.corruption_strengths", "0.5,1,2"),
    ("gradcheck.frames", "6"),
    ("gradcheck.batch", "4"),
    ("gradcheck.max_coords", "20"),
];

/// Resolved configuration: defaults overlaid with the file's entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    /// Parses `key=value` lines; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1))
            })?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_prefix(&e))))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key {key:?}"))),
        }
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| Error::Config(format!("{key}={raw:?}: {e}")))
    }

    /// `None` for an empty value.
    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| Error::Config(format!("{key}={raw:?}: {e}")))
            })
            .collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn labels(&self) -> Result<LabelRange> {
        LabelRange::new(self.get("labels.min")?, self.get("labels.max")?).map_err(config)
    }

    pub fn frontend(&self) -> Result<FrontendConfig> {
        Ok(FrontendConfig {
            frame_len: self.get("frontend.frame_len")?,
            frame_hop: self.get("frontend.frame_hop")?,
            n_mel: self.get("frontend.n_mel")?,
            fmin: self.get("frontend.fmin")?,
            fmax: self.get_opt("frontend.fmax")?,
            pitch_fmin: self.get("frontend.pitch_fmin")?,
            pitch_fmax: self.get("frontend.pitch_fmax")?,
            log_floor: self.get("frontend.log_floor")?,
            voicing_threshold: self.get("frontend.voicing_threshold")?,
        })
    }

    pub fn tcgru(&self, input_dim: usize) -> Result<TcGruConfig> {
        let cfg = TcGruConfig {
            input_dim,
            tc_channels: self.get("model.tc_channels")?,
            tc_kernel: self.get("model.tc_kernel")?,
            gru_hidden: self.get("model.gru_hidden")?,
            embed_dim: self.get("model.embed_dim")?,
            output_dim: 3,
        };
        cfg.validate().map_err(config)?;
        Ok(cfg)
    }

    pub fn fusion(&self, acoustic_stream_dims: Vec<usize>) -> Result<FusionConfig> {
        let cfg = FusionConfig {
            acoustic_stream_dims,
            acoustic_proj_dim: self.get("fusion.acoustic_proj_dim")?,
            tc_kernel: self.get("fusion.tc_kernel")?,
            gru_hidden: self.get("fusion.gru_hidden")?,
            fusion_hidden: self.get("fusion.fusion_hidden")?,
        };
        cfg.validate().map_err(config)?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            batch_size: self.get("train.batch_size")?,
            lr: self.get("train.lr")?,
            max_epochs: self.get("train.max_epochs")?,
            patience: self.get("train.patience")?,
            seed: self.seed()?,
            weights: LossWeights::new(self.get("train.alpha")?, self.get("train.beta")?)
                .map_err(config)?,
            noise_aware: self.get("train.noise_aware")?,
            normalize_inputs: self.get("train.normalize_inputs")?,
            init_output_bias: self.get("train.init_output_bias")?,
        };
        cfg.validate().map_err(config)?;
        Ok(cfg)
    }

    pub fn distill(&self) -> Result<DistillConfig> {
        let loss: DistillLossKind = self.get("distill.loss")?;
        let cfg = DistillConfig {
            kappa: self.get("distill.kappa")?,
            lambda: self.get("distill.lambda")?,
            label_range: self.get_opt("distill.label_range")?,
            labels: self.labels()?,
            ce_bins: self.get("distill.ce_bins")?,
            use_ce: self.get("distill.use_ce")?,
            loss,
        };
        cfg.validate().map_err(config)?;
        Ok(cfg)
    }

    pub fn synthetic(&self) -> Result<SyntheticSpec> {
        let spec = SyntheticSpec {
            n_train: self.get("synth.n_train")?,
            n_valid: self.get("synth.n_valid")?,
            n_eval: self.get("synth.n_eval")?,
            frames: (self.get("synth.min_frames")?, self.get("synth.max_frames")?),
            lexical_frames: (
                self.get("synth.lexical_min_frames")?,
                self.get("synth.lexical_max_frames")?,
            ),
            acoustic_dim: self.get("synth.acoustic_dim")?,
            noise_channels: self.get("synth.noise_channels")?,
            lexical_dim: self.get("synth.lexical_dim")?,
            obs_noise: self.get("synth.obs_noise")?,
            speaker_noise: self.get("synth.speaker_noise")?,
            valence_coupling: self.get("synth.valence_coupling")?,
            lexical_cross_coupling: self.get("synth.lexical_cross_coupling")?,
            modulation_depth: self.get("synth.modulation_depth")?,
            corruption_frame_noise: self.get("synth.corruption_frame_noise")?,
            corruption_strengths: self.get_list("synth.corruption_strengths")?,
            labels: self.labels()?,
            seed: self.seed()?,
        };
        spec.validate().map_err(config)?;
        Ok(spec)
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Re-labels a validation failure as a config error.
fn config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}
