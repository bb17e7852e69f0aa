//! Command-line orchestration: `invert`, `edit`, `eval` and `verify-oracle`.
//!
//! Every random draw comes from `ChaCha8Rng` seeded with the configured seed,
//! one stream per batch item.

pub mod config;
pub mod io;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aac::aac_edit_traced;
use crate::angular::{angular_edit_traced, invert_trajectory, LatentTrajectory};
use crate::denoise::{
    Denoiser, GaussianMixtureModel, GaussianOracle, PromptEmbedding, ToyAttentionDenoiser, ToyConfig,
};
use crate::error::{Error, Result};
use crate::eval::{
    cyclic_identity_similarity, fnmr_at_fmr, mean_absolute_error, reference_identity_similarity, Embedder,
    FixtureEmbedder, FixturePipeline, LiveEmbedder, Passthrough, ScoreSet,
};
use crate::latent::Latent;
use crate::prompt::{build_refined_prompt, embed_prompt, FixtureVlmClient, VlmClient, VocabConfig};
use crate::schedule::NoiseSchedule;
use crate::verify::{verify_oracle, OracleCheckConfig, OracleCheckReport};

pub use config::{ConfigLayer, DenoiserSpec, Mode, PromptSource, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "facett", version, about = "Face re-aging by angular inversion and adaptive attention control")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// DDIM-invert source latents and write their trajectories.
    Invert(RunArgs),
    /// Edit inverted trajectories toward the target prompt.
    Edit(RunArgs),
    /// Compute identity and age metrics over fixtures.
    Eval(EvalArgs),
    /// Check the closed-form mixture denoiser against Monte Carlo.
    VerifyOracle(VerifyArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Flat TOML file; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: ConfigLayer,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => ConfigLayer::load(p)?,
            None => ConfigLayer::default(),
        };
        RunConfig::from_layer(base.overlay(&self.overrides))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Invert(args) => {
            let cfg = args.resolve()?;
            let start = Instant::now();
            let manifest = run_invert(&cfg)?;
            for item in &manifest.items {
                println!("{}", cfg.out_dir.join(&item.trajectory).display());
            }
            eprintln!("inverted {} latent(s) in {:.3}s", manifest.items.len(), start.elapsed().as_secs_f64());
        }
        Command::Edit(args) => {
            let cfg = args.resolve()?;
            let report = run_edit(&cfg)?;
            println!("{}", cfg.out_dir.join(REPORT_FILE).display());
            println!("mean recon_error_vs_source {:.6e}", report.recon_error_vs_source);
        }
        Command::Eval(args) => {
            let report = run_eval(&args)?;
            let text = serde_json::to_string_pretty(&report).map_err(|e| Error::format("eval report", e))?;
            println!("{text}");
        }
        Command::VerifyOracle(args) => {
            let report = run_verify(&args)?;
            if !report.passed() {
                return Err(Error::CheckFailed("closed-form oracle disagrees with Monte Carlo".into()));
            }
        }
    }
    Ok(())
}

/// Boxed denoiser plus the mixture behind it, when it is the oracle.
pub fn build_denoiser(cfg: &RunConfig) -> Result<(Box<dyn Denoiser + Send>, Option<GaussianMixtureModel>)> {
    match &cfg.denoiser {
        DenoiserSpec::Oracle(path) => {
            let gmm = GaussianMixtureModel::load(&config::resolve_input(path))?;
            let sched = NoiseSchedule::ddpm(cfg.steps)?;
            Ok((Box::new(GaussianOracle::new(gmm.clone(), sched)), Some(gmm)))
        }
        DenoiserSpec::Toy(seed) => {
            let toy = ToyAttentionDenoiser::new(*seed, ToyConfig::new(cfg.toy_feature_dim, cfg.vocab_dim))?;
            Ok((Box::new(toy), None))
        }
    }
}

/// Source and target prompt texts.
pub fn prompt_texts(cfg: &RunConfig) -> Result<(String, String)> {
    match &cfg.prompts {
        PromptSource::Text { src, tgt } => Ok((src.clone(), tgt.clone())),
        PromptSource::Attributes { path, image_id, tgt_age } => {
            let client = FixtureVlmClient::load(&config::resolve_input(path))?;
            let src = client.extract(image_id)?;
            let tgt = crate::prompt::FaceAttributes { age: *tgt_age, ..src.clone() };
            Ok((build_refined_prompt(&src)?, build_refined_prompt(&tgt)?))
        }
    }
}

pub fn build_prompts(cfg: &RunConfig) -> Result<(PromptEmbedding, PromptEmbedding)> {
    let (src, tgt) = prompt_texts(cfg)?;
    let vocab = VocabConfig {
        dim: cfg.vocab_dim,
        seed: cfg.seed,
    };
    Ok((embed_prompt(&src, &vocab)?, embed_prompt(&tgt, &vocab)?))
}

fn item_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Input latents from file, or drawn from the seed: mixture samples under
/// the source condition for the oracle, standard normals for the toy.
pub fn source_latents(cfg: &RunConfig, gmm: Option<&GaussianMixtureModel>, c_src: &PromptEmbedding) -> Result<Vec<Latent>> {
    if let Some(path) = &cfg.input {
        return io::read_input_latents(&config::resolve_input(path));
    }
    (0..cfg.batch)
        .map(|i| {
            let mut rng = item_rng(cfg.seed, i);
            match gmm {
                Some(g) => Latent::from_vec(g.sample(&g.resolve(c_src)?, &mut rng)),
                None => Latent::from_vec(
                    (0..cfg.latent_dim)
                        .map(|_| StandardNormal.sample(&mut rng))
                        .collect(),
                ),
            }
        })
        .collect()
}

fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidRange(format!("worker pool: {e}")))
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";
pub const TIMING_FILE: &str = "timing.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub index: usize,
    /// Relative to the manifest's directory.
    pub trajectory: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub config: serde_json::Value,
    pub items: Vec<ManifestItem>,
}

pub fn run_invert(cfg: &RunConfig) -> Result<Manifest> {
    let hash = cfg.inversion_hash()?;
    let (denoiser, gmm) = build_denoiser(cfg)?;
    let (c_src, _) = build_prompts(cfg)?;
    let sched = NoiseSchedule::ddpm(cfg.steps)?;
    let latents = source_latents(cfg, gmm.as_ref(), &c_src)?;

    let trajectories = worker_pool(cfg.workers)?.install(|| {
        latents
            .par_iter()
            .enumerate()
            .map(|(i, z0)| {
                invert_trajectory(z0, &c_src, &denoiser, &sched, cfg.eps_timing)
                    .map_err(|e| e.at_stage(format!("item {i}")))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    io::ensure_dir(&cfg.out_dir)?;
    let mut items = Vec::with_capacity(trajectories.len());
    for (i, traj) in trajectories.iter().enumerate() {
        let rel = PathBuf::from("trajectories").join(format!("{i:04}.bin"));
        io::write_trajectory(&cfg.out_dir.join(&rel), traj, cfg.eps_timing, &hash)?;
        items.push(ManifestItem { index: i, trajectory: rel });
    }
    let manifest = Manifest {
        config_hash: hash,
        config: serde_json::to_value(cfg).map_err(|e| Error::format("config", e))?,
        items,
    };
    io::write_json(&cfg.out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Loads the manifest and trajectories in `dir`, refusing any produced under
/// a different inversion configuration.
pub fn load_trajectories(dir: &Path, expected_hash: &str) -> Result<Vec<LatentTrajectory>> {
    let manifest: Manifest = io::read_json(&dir.join(MANIFEST_FILE))?;
    if manifest.config_hash != expected_hash {
        return Err(Error::ConfigMismatch {
            expected: expected_hash.to_string(),
            found: manifest.config_hash,
        });
    }
    manifest
        .items
        .iter()
        .map(|item| {
            let (traj, side) = io::read_trajectory(&dir.join(&item.trajectory))?;
            if side.config_hash != expected_hash {
                return Err(Error::ConfigMismatch {
                    expected: expected_hash.to_string(),
                    found: side.config_hash,
                });
            }
            Ok(traj)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditItem {
    pub index: usize,
    pub z0_tgt_path: PathBuf,
    pub trace_path: PathBuf,
    /// `||z0_tgt - z0|| / ||z0||` against the trajectory's first state.
    pub recon_error_vs_source: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub mode: Mode,
    pub config_hash: String,
    pub inversion_hash: String,
    pub n: usize,
    /// Mean over items.
    pub recon_error_vs_source: f64,
    pub items: Vec<EditItem>,
}

/// Elapsed time of an edit, kept out of the report so reports stay
/// byte-reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timing {
    pub wall_time_s: f64,
}

pub fn run_edit(cfg: &RunConfig) -> Result<EditReport> {
    let start = Instant::now();
    let inversion_hash = cfg.inversion_hash()?;
    let trajectories = load_trajectories(&cfg.trajectory_dir, &inversion_hash)?;
    let (denoiser, _) = build_denoiser(cfg)?;
    if cfg.mode == Mode::Aac && !denoiser.supports_attention() {
        return Err(Error::Validation {
            fields: vec!["mode", "denoiser"],
            message: "aac needs a denoiser with attention hooks (toy:<seed>)".into(),
        });
    }
    let (c_src, c_tgt) = build_prompts(cfg)?;
    let angular = cfg.angular()?;
    let aac = cfg.aac()?;

    let results = worker_pool(cfg.workers)?.install(|| {
        trajectories
            .par_iter()
            .enumerate()
            .map(|(i, traj)| {
                let edit = || -> Result<(Latent, Vec<serde_json::Value>, f64)> {
                    let (z0_tgt, trace) = match cfg.mode {
                        Mode::Angular => {
                            let out = angular_edit_traced(traj, &c_src, &c_tgt, &denoiser, &angular)?;
                            (out.z0_tgt, to_values(&out.steps)?)
                        }
                        Mode::Aac => {
                            let out = aac_edit_traced(traj, &c_src, &c_tgt, &denoiser, &aac, |_, _| {})?;
                            (out.z0_tgt, to_values(&out.trace)?)
                        }
                    };
                    let err = z0_tgt.relative_error(traj.state(0))?;
                    Ok((z0_tgt, trace, err))
                };
                edit().map_err(|e| e.at_stage(format!("item {i}")))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut items = Vec::with_capacity(results.len());
    for (i, (z0_tgt, trace, err)) in results.iter().enumerate() {
        let z_rel = PathBuf::from("edited").join(format!("{i:04}.bin"));
        let t_rel = PathBuf::from("trace").join(format!("{i:04}.jsonl"));
        io::write_latent(&cfg.out_dir.join(&z_rel), z0_tgt)?;
        io::write_jsonl(&cfg.out_dir.join(&t_rel), trace)?;
        items.push(EditItem {
            index: i,
            z0_tgt_path: z_rel,
            trace_path: t_rel,
            recon_error_vs_source: *err,
        });
    }
    let report = EditReport {
        mode: cfg.mode,
        config_hash: cfg.config_hash()?,
        inversion_hash,
        n: items.len(),
        recon_error_vs_source: items.iter().map(|i| i.recon_error_vs_source).sum::<f64>() / items.len().max(1) as f64,
        items,
    };
    io::write_json(&cfg.out_dir.join(REPORT_FILE), &report)?;
    io::write_json(
        &cfg.out_dir.join(TIMING_FILE),
        &Timing {
            wall_time_s: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok(report)
}

fn to_values<T: Serialize>(rows: &[T]) -> Result<Vec<serde_json::Value>> {
    rows.iter()
        .map(|r| serde_json::to_value(r).map_err(|e| Error::format("trace", e)))
        .collect()
}

pub const SUPPORTED_METRICS: [&str; 4] = ["id_sim_cyc", "id_sim_ref", "fnmr_at_fmr", "mae"];

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Evaluation fixture file (JSON).
    #[arg(long)]
    pub fixtures: PathBuf,
    /// Metric to compute; repeatable. Defaults to every metric the fixtures support.
    #[arg(long = "metric")]
    pub metrics: Vec<String>,
    /// FMR operating point for fnmr_at_fmr; repeatable.
    #[arg(long = "fmr", default_values_t = [0.0001, 0.001])]
    pub fmr: Vec<f64>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fetch embeddings from this HTTP endpoint instead of the fixtures.
    #[arg(long)]
    pub embedder_url: Option<String>,
    #[arg(long, default_value_t = 10.0)]
    pub timeout_s: f64,
    #[arg(long, default_value_t = 2)]
    pub retries: u32,
}

#[derive(Debug, Clone, Deserialize)]
pub struct CycleSpec {
    pub input: String,
    pub src_age: u32,
    pub tgt_ages: Vec<u32>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ReferenceSpec {
    pub re_aged: String,
    pub reference: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct AgeSpec {
    pub predicted: Vec<f64>,
    pub target: f64,
}

/// Layout of the `eval --fixtures` file. Every section is optional; a
/// missing `edits` section means the passthrough pipeline.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalFixtures {
    #[serde(default)]
    pub embeddings: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub edits: Option<BTreeMap<String, BTreeMap<u32, String>>>,
    #[serde(default)]
    pub cycles: Vec<CycleSpec>,
    #[serde(default)]
    pub references: Vec<ReferenceSpec>,
    #[serde(default)]
    pub scores: Option<ScoreSet>,
    #[serde(default)]
    pub ages: Option<AgeSpec>,
}

impl EvalFixtures {
    fn available(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if !self.cycles.is_empty() {
            out.push("id_sim_cyc");
        }
        if !self.references.is_empty() {
            out.push("id_sim_ref");
        }
        if self.scores.is_some() {
            out.push("fnmr_at_fmr");
        }
        if self.ages.is_some() {
            out.push("mae");
        }
        out
    }

    /// Every id the requested metrics would look up but cannot find.
    fn missing(&self, metrics: &[&str], check_embeddings: bool) -> Vec<String> {
        let mut missing: Vec<String> = Vec::new();
        let mut note = |id: String| {
            if !missing.contains(&id) {
                missing.push(id);
            }
        };
        let has_embedding = |id: &str| !check_embeddings || self.embeddings.contains_key(id);
        if metrics.contains(&"id_sim_cyc") {
            for c in &self.cycles {
                if !has_embedding(&c.input) {
                    note(c.input.clone());
                }
                let Some(edits) = &self.edits else { continue };
                for tgt in c.tgt_ages.iter().filter(|t| **t != c.src_age) {
                    let Some(aged) = edits.get(&c.input).and_then(|m| m.get(tgt)) else {
                        note(format!("{}@{tgt}", c.input));
                        continue;
                    };
                    match edits.get(aged).and_then(|m| m.get(&c.src_age)) {
                        None => note(format!("{aged}@{}", c.src_age)),
                        Some(back) if !has_embedding(back) => note(back.clone()),
                        Some(_) => {}
                    }
                }
            }
        }
        if metrics.contains(&"id_sim_ref") {
            for r in &self.references {
                for id in [&r.re_aged, &r.reference] {
                    if !has_embedding(id) {
                        note(id.clone());
                    }
                }
            }
        }
        missing
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricEntry {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fmr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixtureProvenance {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub fixtures: FixtureProvenance,
    pub embedder: String,
    pub metrics: Vec<MetricEntry>,
}

fn cycle_mean<P, E>(pipeline: &P, fx: &EvalFixtures, embedder: &E) -> Result<(f64, usize)>
where
    P: crate::eval::EditPipeline<String>,
    E: Embedder<String>,
{
    let pairs: Vec<(&CycleSpec, u32)> = fx
        .cycles
        .iter()
        .flat_map(|c| c.tgt_ages.iter().filter(move |t| **t != c.src_age).map(move |t| (c, *t)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Empty("cycle pairs"));
    }
    let sims = pairs
        .par_iter()
        .map(|(c, tgt)| cyclic_identity_similarity(pipeline, &c.input, c.src_age, *tgt, embedder))
        .collect::<Result<Vec<_>>>()?;
    Ok((sims.iter().sum::<f64>() / sims.len() as f64, sims.len()))
}

fn metric_values<E: Embedder<String>>(
    name: &str,
    fx: &EvalFixtures,
    embedder: &E,
    fmr: &[f64],
    hash: &str,
) -> Result<Vec<MetricEntry>> {
    let entry = |value: f64, n: usize| MetricEntry {
        metric: name.to_string(),
        value,
        n,
        config_hash: hash.to_string(),
        fmr: None,
        threshold: None,
    };
    let absent = || Error::Validation {
        fields: vec!["fixtures"],
        message: format!("no fixture section for metric {name}"),
    };
    match name {
        "id_sim_cyc" => {
            let (v, n) = match &fx.edits {
                None => cycle_mean(&Passthrough, fx, embedder)?,
                Some(edits) => cycle_mean(&FixturePipeline::new(edits.clone()), fx, embedder)?,
            };
            Ok(vec![entry(v, n)])
        }
        "id_sim_ref" => {
            if fx.references.is_empty() {
                return Err(absent());
            }
            let sims = fx
                .references
                .iter()
                .map(|r| reference_identity_similarity(&r.re_aged, &r.reference, embedder))
                .collect::<Result<Vec<_>>>()?;
            Ok(vec![entry(sims.iter().sum::<f64>() / sims.len() as f64, sims.len())])
        }
        "fnmr_at_fmr" => {
            let scores = fx.scores.as_ref().ok_or_else(absent)?;
            fmr.iter()
                .map(|f| {
                    let r = fnmr_at_fmr(scores, *f)?;
                    Ok(MetricEntry {
                        fmr: Some(*f),
                        threshold: Some(r.threshold),
                        ..entry(r.fnmr, scores.genuine.len())
                    })
                })
                .collect()
        }
        "mae" => {
            let ages = fx.ages.as_ref().ok_or_else(absent)?;
            Ok(vec![entry(mean_absolute_error(&ages.predicted, ages.target)?, ages.predicted.len())])
        }
        other => Err(Error::UnknownMetric {
            name: other.to_string(),
            supported: SUPPORTED_METRICS.to_vec(),
        }),
    }
}

pub fn run_eval(args: &EvalArgs) -> Result<EvalReport> {
    for m in &args.metrics {
        if !SUPPORTED_METRICS.contains(&m.as_str()) {
            return Err(Error::UnknownMetric {
                name: m.clone(),
                supported: SUPPORTED_METRICS.to_vec(),
            });
        }
    }
    let path = config::resolve_input(&args.fixtures);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let fx: EvalFixtures =
        serde_json::from_slice(&bytes).map_err(|e| Error::format(path.display().to_string(), e))?;
    let metrics: Vec<&str> = if args.metrics.is_empty() {
        fx.available()
    } else {
        args.metrics.iter().map(String::as_str).collect()
    };
    if metrics.is_empty() {
        return Err(Error::Empty("metrics"));
    }
    let missing = fx.missing(&metrics, args.embedder_url.is_none());
    if !missing.is_empty() {
        return Err(Error::MissingFixtures(missing));
    }

    let sha256 = config::sha256_hex(&bytes);
    let embedder_desc = args.embedder_url.clone().unwrap_or_else(|| "fixtures".into());
    let hash = config::sha256_hex(
        serde_json::to_string(&(&sha256, &metrics, &args.fmr, &embedder_desc))
            .map_err(|e| Error::format("config hash", e))?
            .as_bytes(),
    );

    let mut entries = Vec::new();
    for m in &metrics {
        let values = match &args.embedder_url {
            None => metric_values(m, &fx, &FixtureEmbedder::new(fx.embeddings.clone())?, &args.fmr, &hash)?,
            Some(url) => {
                let live = LiveEmbedder::new(url.clone(), Duration::from_secs_f64(args.timeout_s), args.retries);
                metric_values(m, &fx, &live, &args.fmr, &hash)?
            }
        };
        entries.extend(values);
    }
    let report = EvalReport {
        config_hash: hash,
        fixtures: FixtureProvenance {
            path: args.fixtures.clone(),
            sha256,
        },
        embedder: embedder_desc,
        metrics: entries,
    };
    if let Some(out) = &args.out {
        io::write_json(out, &report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub mixtures: usize,
    #[arg(long, default_value_t = 100)]
    pub points: usize,
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    #[arg(long, default_value_t = 3)]
    pub components: usize,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 3.0)]
    pub sigma_bound: f64,
    /// Write the full per-point report here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

pub fn run_verify(args: &VerifyArgs) -> Result<OracleCheckReport> {
    if args.mixtures == 0 || args.points == 0 || args.samples < 2 || args.dim == 0 || args.components == 0 {
        return Err(Error::Validation {
            fields: vec!["mixtures", "points", "samples", "dim", "components"],
            message: "all must be positive (samples >= 2)".into(),
        });
    }
    let start = Instant::now();
    let report = verify_oracle(&OracleCheckConfig {
        mixtures: args.mixtures,
        points_per_mixture: args.points,
        samples: args.samples,
        dim: args.dim,
        components: args.components,
        steps: args.steps,
        sigma_bound: args.sigma_bound,
        seed: args.seed,
    })?;
    for c in &report.coordinates {
        println!(
            "mixture {} coord {}: bias {:+.3} dispersion {:+.3} over {} points  {}",
            c.mixture,
            c.coordinate,
            c.bias,
            c.dispersion,
            c.n,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    println!(
        "worst point |z| {:.3}, {} point(s) above {} SE, min effective samples {:.0}",
        report.worst_z(),
        report.exceedances,
        args.sigma_bound,
        report.min_effective_samples
    );
    println!(
        "{} in {:.2}s",
        if report.passed() { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    );
    if let Some(path) = &args.json {
        io::write_json(path, &report)?;
    }
    Ok(report)
}
