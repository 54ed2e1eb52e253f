//! Run configuration: flat `section.key=value` text with named dataset
//! profiles as starting points.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::net::AttentionMaskSpec;
use crate::schedule::ScheduleKind;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub queries: usize,
    pub local_mask: bool,
    pub multilabel: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleSection {
    pub steps: usize,
    pub kind: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub alphas: Vec<f64>,
    pub lambda_smooth: f64,
    pub tau: f64,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub importance: bool,
    pub history: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferMode {
    Deterministic,
    Stochastic,
}

impl FromStr for InferMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(Self::Deterministic),
            "stochastic" => Ok(Self::Stochastic),
            _ => Err(Error::config(
                "infer.mode",
                format!("expected deterministic|stochastic, got `{s}`"),
            )),
        }
    }
}

impl std::fmt::Display for InferMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Deterministic => "deterministic",
            Self::Stochastic => "stochastic",
        })
    }
}

/// Noise used when a stochastic sample is pushed back to the next step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Renoise {
    /// A new draw at every step.
    Fresh,
    /// One draw per sample, reused at every step.
    Shared,
}

impl FromStr for Renoise {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fresh" => Ok(Self::Fresh),
            "shared" => Ok(Self::Shared),
            _ => Err(Error::config(
                "infer.renoise",
                format!("expected fresh|shared, got `{s}`"),
            )),
        }
    }
}

impl std::fmt::Display for Renoise {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Fresh => "fresh",
            Self::Shared => "shared",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferSection {
    pub mode: InferMode,
    pub steps: usize,
    pub samples: usize,
    pub renoise: Renoise,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub profile: String,
    pub stride: usize,
    pub feature_dim: usize,
    pub ambiguity: f64,
    pub noise_sigma: f64,
    pub train_videos: usize,
    pub test_videos: usize,
    pub root: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub train: TrainSection,
    pub infer: InferSection,
    pub eval: EvalSection,
    pub data: DataSection,
}

pub const PROFILES: [&str; 5] = ["synthetic", "breakfast", "salads50", "epic", "egtea"];

impl Default for RunConfig {
    fn default() -> Self {
        Self::profile("synthetic").expect("built-in profile")
    }
}

impl RunConfig {
    pub fn profile(name: &str) -> Result<Self> {
        let mut c = Self {
            seed: 0,
            model: ModelSection {
                hidden_dim: 256,
                latent_dim: 1024,
                encoder_layers: 4,
                decoder_layers: 4,
                heads: 8,
                ffn_mult: 4,
                dropout: 0.1,
                queries: 8,
                local_mask: false,
                multilabel: false,
            },
            schedule: ScheduleSection {
                steps: 1000,
                kind: ScheduleKind::Linear,
                beta_min: 1e-4,
                beta_max: 0.02,
            },
            train: TrainSection {
                epochs: 50,
                batch: 64,
                lr: 5e-4,
                warmup_epochs: 10,
                alphas: vec![0.2, 0.3, 0.4, 0.5],
                lambda_smooth: 0.15,
                tau: 4.0,
                grad_clip: 1.0,
                weight_decay: 0.01,
                importance: true,
                history: 10,
            },
            infer: InferSection {
                mode: InferMode::Deterministic,
                steps: 100,
                samples: 25,
                renoise: Renoise::Fresh,
            },
            eval: EvalSection {
                alpha: 0.3,
                beta: 0.5,
            },
            data: DataSection {
                profile: name.to_string(),
                stride: 3,
                feature_dim: 2048,
                ambiguity: 0.0,
                noise_sigma: 0.5,
                train_videos: 0,
                test_videos: 0,
                root: PathBuf::from("data"),
            },
        };
        match name {
            "breakfast" => {}
            "salads50" => {
                c.model.latent_dim = 256;
                c.model.decoder_layers = 8;
                c.model.queries = 16;
                c.train.epochs = 30;
                c.train.batch = 8;
                c.train.lr = 1e-3;
            }
            "epic" | "egtea" => {
                c.model.queries = 1;
                c.model.multilabel = true;
                c.data.stride = 1;
                c.train.alphas = vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
                c.train.batch = 32;
                if name == "epic" {
                    c.train.lr = 2.5e-4;
                } else {
                    c.model.latent_dim = 512;
                    c.train.epochs = 100;
                }
            }
            "synthetic" => {
                c.model.hidden_dim = 64;
                c.model.latent_dim = 64;
                c.model.encoder_layers = 2;
                c.model.decoder_layers = 2;
                c.model.heads = 4;
                c.model.ffn_mult = 2;
                c.model.dropout = 0.0;
                c.train.epochs = 150;
                c.train.batch = 8;
                c.train.lr = 2e-3;
                c.train.warmup_epochs = 2;
                c.data.feature_dim = 32;
                c.data.train_videos = 160;
                c.data.test_videos = 40;
            }
            other => {
                return Err(Error::config(
                    "data.profile",
                    format!("unknown profile `{other}`; expected one of {PROFILES:?}"),
                ))
            }
        }
        Ok(c)
    }

    /// Starts from the profile named by `data.profile` (if present) and
    /// applies every other key in order.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", i + 1), "expected key=value"))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let profile = pairs
            .iter()
            .find(|(k, _)| k == "data.profile")
            .map_or("synthetic", |(_, v)| v.as_str());
        let mut c = Self::profile(profile)?;
        for (k, v) in &pairs {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::config(key, format!("expected a boolean, got `{v}`"))),
            }
        }
        let k = key;
        match key {
            "seed" => self.seed = num(k, value)?,
            "model.hidden_dim" => self.model.hidden_dim = num(k, value)?,
            "model.latent_dim" => self.model.latent_dim = num(k, value)?,
            "model.encoder_layers" => self.model.encoder_layers = num(k, value)?,
            "model.decoder_layers" => self.model.decoder_layers = num(k, value)?,
            "model.heads" => self.model.heads = num(k, value)?,
            "model.ffn_mult" => self.model.ffn_mult = num(k, value)?,
            "model.dropout" => self.model.dropout = num(k, value)?,
            "model.queries" => self.model.queries = num(k, value)?,
            "model.mask" => {
                self.model.local_mask = match value {
                    "global" => false,
                    "local" => true,
                    _ => {
                        return Err(Error::config(
                            k,
                            format!("expected global|local, got `{value}`"),
                        ))
                    }
                }
            }
            "model.multilabel" => self.model.multilabel = flag(k, value)?,
            "schedule.steps" => self.schedule.steps = num(k, value)?,
            "schedule.kind" => self.schedule.kind = value.parse()?,
            "schedule.beta_min" => self.schedule.beta_min = num(k, value)?,
            "schedule.beta_max" => self.schedule.beta_max = num(k, value)?,
            "train.epochs" => self.train.epochs = num(k, value)?,
            "train.batch" => self.train.batch = num(k, value)?,
            "train.lr" => self.train.lr = num(k, value)?,
            "train.warmup_epochs" => self.train.warmup_epochs = num(k, value)?,
            "train.alphas" => {
                self.train.alphas = value
                    .split(',')
                    .map(|s| num::<f64>(k, s.trim()))
                    .collect::<Result<_>>()?
            }
            "train.lambda_smooth" => self.train.lambda_smooth = num(k, value)?,
            "train.tau" => self.train.tau = num(k, value)?,
            "train.grad_clip" => self.train.grad_clip = num(k, value)?,
            "train.weight_decay" => self.train.weight_decay = num(k, value)?,
            "train.importance" => self.train.importance = flag(k, value)?,
            "train.history" => self.train.history = num(k, value)?,
            "infer.mode" => self.infer.mode = value.parse()?,
            "infer.steps" => self.infer.steps = num(k, value)?,
            "infer.samples" => self.infer.samples = num(k, value)?,
            "infer.renoise" => self.infer.renoise = value.parse()?,
            "eval.alpha" => self.eval.alpha = num(k, value)?,
            "eval.beta" => self.eval.beta = num(k, value)?,
            "data.profile" => {
                if !PROFILES.contains(&value) {
                    return Err(Error::config(k, format!("unknown profile `{value}`")));
                }
                self.data.profile = value.to_string()
            }
            "data.stride" => self.data.stride = num(k, value)?,
            "data.feature_dim" => self.data.feature_dim = num(k, value)?,
            "data.ambiguity" => self.data.ambiguity = num(k, value)?,
            "data.noise_sigma" => self.data.noise_sigma = num(k, value)?,
            "data.train_videos" => self.data.train_videos = num(k, value)?,
            "data.test_videos" => self.data.test_videos = num(k, value)?,
            "data.root" => self.data.root = PathBuf::from(value),
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let pos = |key: &str, v: usize| {
            if v == 0 {
                Err(Error::config(key, "must be positive"))
            } else {
                Ok(())
            }
        };
        pos("model.hidden_dim", m.hidden_dim)?;
        pos("model.latent_dim", m.latent_dim)?;
        pos("model.encoder_layers", m.encoder_layers)?;
        pos("model.decoder_layers", m.decoder_layers)?;
        pos("model.heads", m.heads)?;
        pos("model.ffn_mult", m.ffn_mult)?;
        pos("model.queries", m.queries)?;
        if m.hidden_dim % m.heads != 0 || m.latent_dim % m.heads != 0 {
            return Err(Error::config(
                "model.heads",
                "must divide hidden and latent widths",
            ));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(Error::config("model.dropout", "must lie in [0, 1)"));
        }
        if m.multilabel && m.queries != 1 {
            return Err(Error::config(
                "model.queries",
                "multi-label mode needs exactly 1 query",
            ));
        }
        if m.local_mask && m.encoder_layers > 4 {
            return Err(Error::config(
                "model.mask",
                "local windows cover at most 4 layers",
            ));
        }
        pos("schedule.steps", self.schedule.steps)?;
        let s = &self.schedule;
        if !(s.beta_min > 0.0 && s.beta_min <= s.beta_max && s.beta_max < 1.0) {
            return Err(Error::config(
                "schedule.beta_min",
                "need 0 < beta_min <= beta_max < 1",
            ));
        }
        let t = &self.train;
        pos("train.batch", t.batch)?;
        pos("train.history", t.history)?;
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be finite and >= 0"));
        }
        if t.alphas.is_empty() || t.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::config(
                "train.alphas",
                "each alpha must lie in (0, 1)",
            ));
        }
        if !(t.lambda_smooth >= 0.0) {
            return Err(Error::config("train.lambda_smooth", "must be >= 0"));
        }
        if !(t.tau > 0.0) {
            return Err(Error::config("train.tau", "must be positive"));
        }
        if !(t.grad_clip > 0.0) {
            return Err(Error::config("train.grad_clip", "must be positive"));
        }
        if !(t.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be >= 0"));
        }
        pos("infer.samples", self.infer.samples)?;
        if self.infer.steps == 0 || self.infer.steps > self.schedule.steps {
            return Err(Error::config(
                "infer.steps",
                "must lie in [1, schedule.steps]",
            ));
        }
        let e = &self.eval;
        if !(e.alpha > 0.0 && e.alpha < 1.0) {
            return Err(Error::config("eval.alpha", "must lie in (0, 1)"));
        }
        if !(e.beta > 0.0 && e.beta < 1.0) || e.alpha + e.beta > 1.0 + 1e-12 {
            return Err(Error::config(
                "eval.beta",
                "need 0 < beta and alpha + beta <= 1",
            ));
        }
        let d = &self.data;
        pos("data.stride", d.stride)?;
        pos("data.feature_dim", d.feature_dim)?;
        if !(0.0..=1.0).contains(&d.ambiguity) {
            return Err(Error::config("data.ambiguity", "must lie in [0, 1]"));
        }
        if !(d.noise_sigma >= 0.0) {
            return Err(Error::config("data.noise_sigma", "must be >= 0"));
        }
        Ok(())
    }

    pub fn mask(&self) -> AttentionMaskSpec {
        if self.model.local_mask {
            AttentionMaskSpec::hierarchical()
        } else {
            AttentionMaskSpec::Global
        }
    }

    /// Every key in a fixed order; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let alphas: Vec<String> = self.train.alphas.iter().map(f64::to_string).collect();
        let lines: Vec<(&str, String)> = vec![
            ("data.profile", self.data.profile.clone()),
            ("seed", self.seed.to_string()),
            ("model.hidden_dim", self.model.hidden_dim.to_string()),
            ("model.latent_dim", self.model.latent_dim.to_string()),
            (
                "model.encoder_layers",
                self.model.encoder_layers.to_string(),
            ),
            (
                "model.decoder_layers",
                self.model.decoder_layers.to_string(),
            ),
            ("model.heads", self.model.heads.to_string()),
            ("model.ffn_mult", self.model.ffn_mult.to_string()),
            ("model.dropout", self.model.dropout.to_string()),
            ("model.queries", self.model.queries.to_string()),
            (
                "model.mask",
                if self.model.local_mask {
                    "local"
                } else {
                    "global"
                }
                .to_string(),
            ),
            ("model.multilabel", self.model.multilabel.to_string()),
            ("schedule.steps", self.schedule.steps.to_string()),
            ("schedule.kind", self.schedule.kind.to_string()),
            ("schedule.beta_min", self.schedule.beta_min.to_string()),
            ("schedule.beta_max", self.schedule.beta_max.to_string()),
            ("train.epochs", self.train.epochs.to_string()),
            ("train.batch", self.train.batch.to_string()),
            ("train.lr", self.train.lr.to_string()),
            ("train.warmup_epochs", self.train.warmup_epochs.to_string()),
            ("train.alphas", alphas.join(",")),
            ("train.lambda_smooth", self.train.lambda_smooth.to_string()),
            ("train.tau", self.train.tau.to_string()),
            ("train.grad_clip", self.train.grad_clip.to_string()),
            ("train.weight_decay", self.train.weight_decay.to_string()),
            ("train.importance", self.train.importance.to_string()),
            ("train.history", self.train.history.to_string()),
            ("infer.mode", self.infer.mode.to_string()),
            ("infer.steps", self.infer.steps.to_string()),
            ("infer.samples", self.infer.samples.to_string()),
            ("infer.renoise", self.infer.renoise.to_string()),
            ("eval.alpha", self.eval.alpha.to_string()),
            ("eval.beta", self.eval.beta.to_string()),
            ("data.stride", self.data.stride.to_string()),
            ("data.feature_dim", self.data.feature_dim.to_string()),
            ("data.ambiguity", self.data.ambiguity.to_string()),
            ("data.noise_sigma", self.data.noise_sigma.to_string()),
            ("data.train_videos", self.data.train_videos.to_string()),
            ("data.test_videos", self.data.test_videos.to_string()),
            ("data.root", self.data.root.display().to_string()),
        ];
        for (k, v) in lines {
            let _ = writeln!(o, "{k}={v}");
        }
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate_and_round_trip() {
        for p in PROFILES {
            let c = RunConfig::profile(p).unwrap();
            c.validate().unwrap();
            assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c, "{p}");
        }
    }

    #[test]
    fn paper_profile_values() {
        let b = RunConfig::profile("breakfast").unwrap();
        assert_eq!(
            (b.model.queries, b.model.latent_dim, b.train.batch),
            (8, 1024, 64)
        );
        let s = RunConfig::profile("salads50").unwrap();
        assert_eq!(
            (s.model.queries, s.model.decoder_layers, s.model.latent_dim),
            (16, 8, 256)
        );
        let e = RunConfig::profile("egtea").unwrap();
        assert_eq!(
            (e.model.queries, e.data.stride, e.train.epochs),
            (1, 1, 100)
        );
    }

    #[test]
    fn errors_name_the_key() {
        let err = RunConfig::parse("model.layers=4\n").unwrap_err();
        assert!(err.to_string().contains("model.layers"));
        let err = RunConfig::parse("eval.alpha=0.6\neval.beta=0.5\n").unwrap_err();
        assert!(err.to_string().contains("eval.beta"), "{err}");
        let err = RunConfig::parse("train.lr=abc\n").unwrap_err();
        assert!(err.to_string().contains("train.lr"));
        assert_eq!(err.exit_code(), 2);
        let err = RunConfig::parse("data.profile=imagenet\n").unwrap_err();
        assert!(err.to_string().contains("data.profile"));
    }

    #[test]
    fn overrides_apply_on_top_of_profile() {
        let c = RunConfig::parse("data.profile=salads50\nmodel.queries=12\n# note\n").unwrap();
        assert_eq!(c.model.queries, 12);
        assert_eq!(c.model.decoder_layers, 8);
    }
}
