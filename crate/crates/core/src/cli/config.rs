//! Run configuration: a flat TOML file overlaid by command-line flags.
//!
//! Keys (all optional in the file, `seed` required overall):
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `seed` | none | drives every random draw |
//! | `steps` | 50 | DDIM steps `T` |
//! | `xi` | 1.2 | angular damping strength |
//! | `eta_th` | 0.05 | KL gate of the adaptive regime |
//! | `tau1`, `tau2` | 35, 15 | regime boundaries; `tau1 <= steps` is checked in `aac` mode only |
//! | `cfg_scale` | 7.5 | guidance scale |
//! | `mode` | `"angular"` | `"angular"` or `"aac"` |
//! | `denoiser` | `"oracle:fixtures/mixture.json"` | `oracle:<mixture json>` or `toy:<weight seed>` |
//! | `src_prompt`, `tgt_prompt` | `"young"`, `"old"` | prompt texts, also the oracle condition names |
//! | `attributes`, `image_id`, `tgt_age` | none | build refined prompts from attribute fixtures instead |
//! | `input` | none | JSON latent or list of latents; sampled from the seed when absent |
//! | `batch` | 1 | number of sampled latents |
//! | `latent_dim`, `toy_feature_dim` | 8, 2 | toy denoiser latent size and token width |
//! | `vocab_dim` | 16 | prompt embedding width |
//! | `eps_timing` | `"destination"` | inversion noise index, `"destination"` or `"source"` |
//! | `workers` | 0 | worker threads, 0 for one per core |
//! | `out_dir` | `"out"` | output directory |
//! | `trajectory_dir` | `out_dir` | where `edit` finds the inversion manifest |
//!
//! Relative input paths resolve against `FACETT_FIXTURE_ROOT` when it is set.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aac::AACConfig;
use crate::angular::{AngularConfig, EpsTiming};
use crate::error::{Error, Result};
use crate::schedule::GuidanceConfig;

pub const FIXTURE_ROOT_ENV: &str = "FACETT_FIXTURE_ROOT";

/// Resolves a relative input path against the fixture root, if one is set.
pub fn resolve_input(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(FIXTURE_ROOT_ENV) {
        Some(root) if !root.is_empty() => Path::new(&root).join(path),
        _ => path.to_path_buf(),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum DenoiserSpec {
    Oracle(PathBuf),
    Toy(u64),
}

impl FromStr for DenoiserSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let invalid = || Error::Validation {
            fields: vec!["denoiser"],
            message: format!("expected oracle:<path> or toy:<seed>, got {s:?}"),
        };
        match s.split_once(':') {
            Some(("oracle", p)) if !p.is_empty() => Ok(DenoiserSpec::Oracle(PathBuf::from(p))),
            Some(("toy", seed)) => seed.parse().map(DenoiserSpec::Toy).map_err(|_| invalid()),
            _ => Err(invalid()),
        }
    }
}

impl fmt::Display for DenoiserSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DenoiserSpec::Oracle(p) => write!(f, "oracle:{}", p.display()),
            DenoiserSpec::Toy(seed) => write!(f, "toy:{seed}"),
        }
    }
}

impl From<DenoiserSpec> for String {
    fn from(d: DenoiserSpec) -> String {
        d.to_string()
    }
}

impl TryFrom<String> for DenoiserSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Angular,
    Aac,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "angular" => Ok(Mode::Angular),
            "aac" => Ok(Mode::Aac),
            _ => Err(Error::Validation {
                fields: vec!["mode"],
                message: format!("expected angular or aac, got {s:?}"),
            }),
        }
    }
}

/// Every key is optional; used both for the TOML file and for flag overrides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, clap::Args)]
#[serde(deny_unknown_fields)]
pub struct ConfigLayer {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub xi: Option<f64>,
    #[arg(long)]
    pub eta_th: Option<f64>,
    #[arg(long)]
    pub tau1: Option<usize>,
    #[arg(long)]
    pub tau2: Option<usize>,
    #[arg(long)]
    pub cfg_scale: Option<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub denoiser: Option<String>,
    #[arg(long)]
    pub src_prompt: Option<String>,
    #[arg(long)]
    pub tgt_prompt: Option<String>,
    #[arg(long)]
    pub attributes: Option<PathBuf>,
    #[arg(long)]
    pub image_id: Option<String>,
    #[arg(long)]
    pub tgt_age: Option<u32>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub toy_feature_dim: Option<usize>,
    #[arg(long)]
    pub vocab_dim: Option<usize>,
    #[arg(long)]
    pub eps_timing: Option<String>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub trajectory_dir: Option<PathBuf>,
}

macro_rules! overlay {
    ($base:ident, $top:ident, $($f:ident),*) => {
        $( if $top.$f.is_some() { $base.$f = $top.$f.clone(); } )*
    };
}

impl ConfigLayer {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::format("config file", e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// `self` with every key set in `top` replaced.
    pub fn overlay(mut self, top: &ConfigLayer) -> Self {
        overlay!(
            self, top, seed, steps, xi, eta_th, tau1, tau2, cfg_scale, mode, denoiser, src_prompt,
            tgt_prompt, attributes, image_id, tgt_age, input, batch, latent_dim, toy_feature_dim,
            vocab_dim, eps_timing, workers, out_dir, trajectory_dir
        );
        self
    }
}

/// How the source and target prompts are obtained.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSource {
    Text { src: String, tgt: String },
    Attributes { path: PathBuf, image_id: String, tgt_age: u32 },
}

/// Fully resolved and validated configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: usize,
    pub xi: f64,
    pub eta_th: f64,
    pub tau1: usize,
    pub tau2: usize,
    pub cfg_scale: f64,
    pub mode: Mode,
    pub denoiser: DenoiserSpec,
    pub prompts: PromptSource,
    pub input: Option<PathBuf>,
    pub batch: usize,
    pub latent_dim: usize,
    pub toy_feature_dim: usize,
    pub vocab_dim: usize,
    pub eps_timing: EpsTiming,
    #[serde(skip)]
    pub workers: usize,
    #[serde(skip)]
    pub out_dir: PathBuf,
    #[serde(skip)]
    pub trajectory_dir: PathBuf,
}

fn positive(v: usize, field: &'static str) -> Result<usize> {
    if v == 0 {
        return Err(Error::Validation {
            fields: vec![field],
            message: "must be >= 1".into(),
        });
    }
    Ok(v)
}

impl RunConfig {
    /// Resolves defaults and validates every aggregated invariant.
    pub fn from_layer(l: ConfigLayer) -> Result<Self> {
        let seed = l.seed.ok_or_else(|| Error::Validation {
            fields: vec!["seed"],
            message: "a seed is required".into(),
        })?;
        let prompts = match (&l.attributes, &l.image_id, &l.tgt_age) {
            (Some(path), Some(id), Some(age)) => PromptSource::Attributes {
                path: path.clone(),
                image_id: id.clone(),
                tgt_age: *age,
            },
            (None, None, None) => PromptSource::Text {
                src: l.src_prompt.clone().unwrap_or_else(|| "young".into()),
                tgt: l.tgt_prompt.clone().unwrap_or_else(|| "old".into()),
            },
            _ => {
                return Err(Error::Validation {
                    fields: vec!["attributes", "image_id", "tgt_age"],
                    message: "must be given together".into(),
                })
            }
        };
        let eps_timing = match l.eps_timing.as_deref() {
            None | Some("destination") => EpsTiming::Destination,
            Some("source") => EpsTiming::Source,
            Some(other) => {
                return Err(Error::Validation {
                    fields: vec!["eps_timing"],
                    message: format!("expected destination or source, got {other:?}"),
                })
            }
        };
        let out_dir = l.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
        let cfg = RunConfig {
            seed,
            steps: positive(l.steps.unwrap_or(50), "steps")?,
            xi: l.xi.unwrap_or(1.2),
            eta_th: l.eta_th.unwrap_or(0.05),
            tau1: l.tau1.unwrap_or(35),
            tau2: l.tau2.unwrap_or(15),
            cfg_scale: l.cfg_scale.unwrap_or(GuidanceConfig::default().scale),
            mode: l.mode.unwrap_or(Mode::Angular),
            denoiser: l
                .denoiser
                .as_deref()
                .unwrap_or("oracle:fixtures/mixture.json")
                .parse()?,
            prompts,
            input: l.input.clone(),
            batch: positive(l.batch.unwrap_or(1), "batch")?,
            latent_dim: positive(l.latent_dim.unwrap_or(8), "latent_dim")?,
            toy_feature_dim: positive(l.toy_feature_dim.unwrap_or(2), "toy_feature_dim")?,
            vocab_dim: positive(l.vocab_dim.unwrap_or(16), "vocab_dim")?,
            eps_timing,
            workers: l.workers.unwrap_or(0),
            trajectory_dir: l.trajectory_dir.clone().unwrap_or_else(|| out_dir.clone()),
            out_dir,
        };
        cfg.angular()?;
        if cfg.mode == Mode::Aac {
            cfg.aac()?;
        } else if !(1 <= cfg.tau2 && cfg.tau2 <= cfg.tau1) {
            return Err(Error::Validation {
                fields: vec!["tau1", "tau2"],
                message: format!("need 1 <= tau2 <= tau1, got tau1={} tau2={}", cfg.tau1, cfg.tau2),
            });
        }
        Ok(cfg)
    }

    pub fn guidance(&self) -> Result<GuidanceConfig> {
        GuidanceConfig::new(self.cfg_scale).map_err(|e| match e {
            Error::InvalidRange(m) => Error::Validation {
                fields: vec!["cfg_scale"],
                message: m,
            },
            other => other,
        })
    }

    pub fn angular(&self) -> Result<AngularConfig> {
        let c = AngularConfig {
            xi: self.xi,
            guidance: self.guidance()?,
            steps: self.steps,
            eps_timing: self.eps_timing,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn aac(&self) -> Result<AACConfig> {
        let c = AACConfig {
            tau1: self.tau1,
            tau2: self.tau2,
            eta_th: self.eta_th,
            steps: self.steps,
            guidance: self.guidance()?,
            ..AACConfig::default()
        };
        c.validate()?;
        Ok(c)
    }

    /// Hash of everything that determines the inverted trajectories:
    /// schedule, denoiser (including the mixture file contents), source
    /// prompt, inputs and seed.
    pub fn inversion_hash(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Key<'a> {
            seed: u64,
            steps: usize,
            denoiser: String,
            denoiser_sha256: Option<String>,
            source_prompt: SourcePrompt<'a>,
            input_sha256: Option<String>,
            batch: usize,
            latent_dim: usize,
            toy_feature_dim: usize,
            vocab_dim: usize,
            eps_timing: EpsTiming,
        }
        let denoiser_sha256 = match &self.denoiser {
            DenoiserSpec::Oracle(p) => Some(file_sha256(&resolve_input(p))?),
            DenoiserSpec::Toy(_) => None,
        };
        let input_sha256 = self.input.as_ref().map(|p| file_sha256(&resolve_input(p))).transpose()?;
        #[derive(Serialize)]
        #[serde(rename_all = "snake_case")]
        enum SourcePrompt<'a> {
            Text(&'a str),
            Attributes { sha256: String, image_id: &'a str },
        }
        let source_prompt = match &self.prompts {
            PromptSource::Text { src, .. } => SourcePrompt::Text(src),
            PromptSource::Attributes { path, image_id, .. } => SourcePrompt::Attributes {
                sha256: file_sha256(&resolve_input(path))?,
                image_id,
            },
        };
        let key = Key {
            seed: self.seed,
            steps: self.steps,
            denoiser: self.denoiser.to_string(),
            denoiser_sha256,
            source_prompt,
            input_sha256,
            batch: self.batch,
            latent_dim: self.latent_dim,
            toy_feature_dim: self.toy_feature_dim,
            vocab_dim: self.vocab_dim,
            eps_timing: self.eps_timing,
        };
        let json = serde_json::to_vec(&key).map_err(|e| Error::format("config hash", e))?;
        Ok(sha256_hex(&json))
    }

    /// Hash of the full configuration, output locations excluded.
    pub fn config_hash(&self) -> Result<String> {
        let inv = self.inversion_hash()?;
        let json = serde_json::to_vec(&(inv, self)).map_err(|e| Error::format("config hash", e))?;
        Ok(sha256_hex(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(s: &str) -> ConfigLayer {
        ConfigLayer::from_toml_str(s).unwrap()
    }

    #[test]
    fn defaults_and_overrides() {
        let file = layer("seed = 3\nxi = 0.5\nmode = \"aac\"\ndenoiser = \"toy:9\"\n");
        let flags = ConfigLayer {
            xi: Some(0.7),
            ..ConfigLayer::default()
        };
        let cfg = RunConfig::from_layer(file.overlay(&flags)).unwrap();
        assert_eq!(cfg.xi, 0.7);
        assert_eq!(cfg.mode, Mode::Aac);
        assert_eq!(cfg.denoiser, DenoiserSpec::Toy(9));
        assert_eq!((cfg.steps, cfg.tau1, cfg.tau2, cfg.eta_th), (50, 35, 15, 0.05));
        assert_eq!(cfg.trajectory_dir, cfg.out_dir);
    }

    #[test]
    fn validation_errors_name_fields() {
        let fields = |s: &str| match RunConfig::from_layer(layer(s)) {
            Err(Error::Validation { fields, .. }) => fields,
            other => panic!("unexpected {other:?}"),
        };
        assert_eq!(fields("steps = 50"), vec!["seed"]);
        assert_eq!(fields("seed = 1\ntau1 = 10\ntau2 = 20"), vec!["tau1", "tau2"]);
        assert_eq!(fields("seed = 1\nsteps = 20\nmode = \"aac\""), vec!["tau1", "tau2"]);
        assert!(RunConfig::from_layer(layer("seed = 1\nsteps = 20")).is_ok());
        assert_eq!(fields("seed = 1\nxi = -1.0"), vec!["xi"]);
        assert_eq!(fields("seed = 1\ndenoiser = \"gpu\""), vec!["denoiser"]);
        assert_eq!(fields("seed = 1\ncfg_scale = -2.0"), vec!["cfg_scale"]);
        assert!(ConfigLayer::from_toml_str("seed = 1\nunknown = 2").is_err());
    }

    #[test]
    fn hash_tracks_inversion_inputs() {
        let a = RunConfig::from_layer(layer("seed = 1\ndenoiser = \"toy:2\"")).unwrap();
        let b = RunConfig::from_layer(layer("seed = 1\ndenoiser = \"toy:2\"\nxi = 0.0\nout_dir = \"x\"")).unwrap();
        let c = RunConfig::from_layer(layer("seed = 1\ndenoiser = \"toy:2\"\nsrc_prompt = \"kid\"")).unwrap();
        assert_eq!(a.inversion_hash().unwrap(), b.inversion_hash().unwrap());
        assert_ne!(a.config_hash().unwrap(), b.config_hash().unwrap());
        assert_ne!(a.inversion_hash().unwrap(), c.inversion_hash().unwrap());
        let d = RunConfig::from_layer(layer("seed = 1\ndenoiser = \"toy:2\"\ntgt_prompt = \"kid\"")).unwrap();
        assert_eq!(a.inversion_hash().unwrap(), d.inversion_hash().unwrap());
        assert_ne!(a.config_hash().unwrap(), d.config_hash().unwrap());
    }
}
