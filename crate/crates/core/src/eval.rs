//! Identity and age metrics: cyclic and reference identity similarity,
//! FNMR at a fixed FMR, and mean absolute age error. Face embeddings and
//! re-aging pipelines are pluggable.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aac::{aac_edit, AACConfig};
use crate::angular::{angular_edit, invert_trajectory, AngularConfig};
use crate::denoise::{Denoiser, PromptEmbedding};
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::prompt::post_json_with_retries;
use crate::schedule::NoiseSchedule;

/// Allowed deviation of an embedding's L2 norm from 1.
pub const UNIT_NORM_TOL: f64 = 1e-5;

fn check_unit(e: &[f64], which: &str) -> Result<()> {
    let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > UNIT_NORM_TOL || !norm.is_finite() {
        return Err(Error::InvariantViolation(format!(
            "{which} embedding has norm {norm}, expected 1"
        )));
    }
    Ok(())
}

/// Inner product of two unit embeddings, clamped to `[-1, 1]`.
pub fn identity_similarity(ea: &[f64], eb: &[f64]) -> Result<f64> {
    if ea.len() != eb.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![ea.len()],
            found: vec![eb.len()],
        });
    }
    check_unit(ea, "first")?;
    check_unit(eb, "second")?;
    if ea == eb {
        return Ok(1.0);
    }
    let dot: f64 = ea.iter().zip(eb).map(|(a, b)| a * b).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

/// Maps an input to a unit-norm face embedding.
pub trait Embedder<X: ?Sized>: Sync {
    fn embed(&self, input: &X) -> Result<Vec<f64>>;
}

/// Re-ages an input from `src_age` to `tgt_age`.
pub trait EditPipeline<X>: Sync {
    fn edit(&self, input: &X, src_age: u32, tgt_age: u32) -> Result<X>;
}

/// Returns its input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct Passthrough;

impl<X: Clone> EditPipeline<X> for Passthrough {
    fn edit(&self, input: &X, _src_age: u32, _tgt_age: u32) -> Result<X> {
        Ok(input.clone())
    }
}

/// Runs `input -> tgt_age -> src_age` and compares the embeddings of the
/// input and the reconstruction.
pub fn cyclic_identity_similarity<X, P, E>(
    pipeline: &P,
    input: &X,
    src_age: u32,
    tgt_age: u32,
    embedder: &E,
) -> Result<f64>
where
    P: EditPipeline<X> + ?Sized,
    E: Embedder<X> + ?Sized,
{
    let aged = pipeline
        .edit(input, src_age, tgt_age)
        .map_err(|e| e.at_stage(format!("cycle forward {src_age}->{tgt_age}")))?;
    let back = pipeline
        .edit(&aged, tgt_age, src_age)
        .map_err(|e| e.at_stage(format!("cycle backward {tgt_age}->{src_age}")))?;
    let ea = embedder.embed(input).map_err(|e| e.at_stage("embed input"))?;
    let eb = embedder.embed(&back).map_err(|e| e.at_stage("embed reconstruction"))?;
    identity_similarity(&ea, &eb)
}

/// Mean cyclic similarity over every `(input, target)` pair whose target
/// differs from the input's own age.
pub fn mean_cyclic_identity_similarity<X, P, E>(
    pipeline: &P,
    inputs: &[(X, u32)],
    targets: &[u32],
    embedder: &E,
) -> Result<(f64, usize)>
where
    X: Sync,
    P: EditPipeline<X> + ?Sized,
    E: Embedder<X> + ?Sized,
{
    let pairs: Vec<(&X, u32, u32)> = inputs
        .iter()
        .flat_map(|(x, src)| targets.iter().filter(move |t| *t != src).map(move |t| (x, *src, *t)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Empty("cycle pairs"));
    }
    let sims = pairs
        .par_iter()
        .map(|(x, src, tgt)| cyclic_identity_similarity(pipeline, *x, *src, *tgt, embedder))
        .collect::<Result<Vec<f64>>>()?;
    Ok((sims.iter().sum::<f64>() / sims.len() as f64, sims.len()))
}

pub fn reference_identity_similarity<X, E>(re_aged: &X, reference: &X, embedder: &E) -> Result<f64>
where
    X: ?Sized,
    E: Embedder<X> + ?Sized,
{
    let ea = embedder.embed(re_aged).map_err(|e| e.at_stage("embed re-aged"))?;
    let eb = embedder.embed(reference).map_err(|e| e.at_stage("embed reference"))?;
    identity_similarity(&ea, &eb)
}

/// Genuine and impostor similarity scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    pub fn new(genuine: Vec<f64>, impostor: Vec<f64>) -> Result<Self> {
        let s = Self { genuine, impostor };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.genuine.is_empty() {
            return Err(Error::Empty("genuine scores"));
        }
        if self.impostor.is_empty() {
            return Err(Error::Empty("impostor scores"));
        }
        if let Some(bad) = self
            .genuine
            .iter()
            .chain(&self.impostor)
            .find(|s| !(-1.0..=1.0).contains(*s))
        {
            return Err(Error::InvalidRange(format!("score {bad} outside [-1, 1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FnmrAtFmr {
    pub fnmr: f64,
    pub threshold: f64,
}

/// FNMR at the smallest threshold whose impostor match rate does not exceed
/// `fmr_target`. A score matches when `score >= threshold`.
///
/// Letting `d` be the impostor scores sorted descending and `k` the largest
/// count with `k / n <= fmr_target`, that threshold is the next float above
/// `d[k]`. When every impostor may match, it is the lowest observed score.
pub fn fnmr_at_fmr(scores: &ScoreSet, fmr_target: f64) -> Result<FnmrAtFmr> {
    scores.validate()?;
    if !(0.0..=1.0).contains(&fmr_target) {
        return Err(Error::InvalidRange(format!("fmr target {fmr_target} outside [0, 1]")));
    }
    let mut imp = scores.impostor.clone();
    imp.sort_by(|a, b| b.total_cmp(a));
    let n = imp.len();
    let allowed = |k: usize| k as f64 / n as f64 <= fmr_target;
    let mut k = ((fmr_target * n as f64).floor() as usize).min(n);
    while k < n && allowed(k + 1) {
        k += 1;
    }
    while k > 0 && !allowed(k) {
        k -= 1;
    }
    let threshold = if k >= n {
        scores
            .genuine
            .iter()
            .chain(&imp)
            .copied()
            .fold(f64::INFINITY, f64::min)
    } else {
        imp[k].next_up()
    };
    let misses = scores.genuine.iter().filter(|s| **s < threshold).count();
    Ok(FnmrAtFmr {
        fnmr: misses as f64 / scores.genuine.len() as f64,
        threshold,
    })
}

pub fn mean_absolute_error(predicted: &[f64], target: f64) -> Result<f64> {
    if predicted.is_empty() {
        return Err(Error::Empty("predicted ages"));
    }
    Ok(predicted.iter().map(|p| (p - target).abs()).sum::<f64>() / predicted.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgeGroup {
    Young,
    Old,
}

/// Young below 40, old above 40. Exactly 40 belongs to neither.
pub fn age_group(age: u32) -> Option<AgeGroup> {
    match age {
        0..=39 => Some(AgeGroup::Young),
        40 => None,
        _ => Some(AgeGroup::Old),
    }
}

/// Embeddings looked up by input id from a JSON map `id -> vector`.
#[derive(Debug, Clone, Default)]
pub struct FixtureEmbedder {
    table: BTreeMap<String, Vec<f64>>,
}

impl FixtureEmbedder {
    /// Fails unless every vector is unit-norm.
    pub fn new(table: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        for (id, v) in &table {
            check_unit(v, id)?;
        }
        Ok(Self { table })
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let table = serde_json::from_str(s).map_err(|e| Error::format("embedding fixtures", e))?;
        Self::new(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    /// Ids from `wanted` with no embedding, in input order.
    pub fn missing<'a>(&self, wanted: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for id in wanted {
            if !self.table.contains_key(id) && !out.iter().any(|m| m == id) {
                out.push(id.to_string());
            }
        }
        out
    }
}

impl Embedder<str> for FixtureEmbedder {
    fn embed(&self, input: &str) -> Result<Vec<f64>> {
        self.table
            .get(input)
            .cloned()
            .ok_or_else(|| Error::MissingFixtures(vec![input.to_string()]))
    }
}

impl Embedder<String> for FixtureEmbedder {
    fn embed(&self, input: &String) -> Result<Vec<f64>> {
        Embedder::<str>::embed(self, input.as_str())
    }
}

/// Pre-computed edits: `input id -> target age -> output id`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FixturePipeline {
    edits: BTreeMap<String, BTreeMap<u32, String>>,
}

impl FixturePipeline {
    pub fn new(edits: BTreeMap<String, BTreeMap<u32, String>>) -> Self {
        Self { edits }
    }
}

impl EditPipeline<String> for FixturePipeline {
    fn edit(&self, input: &String, _src_age: u32, tgt_age: u32) -> Result<String> {
        self.edits
            .get(input)
            .and_then(|m| m.get(&tgt_age))
            .cloned()
            .ok_or_else(|| Error::MissingFixtures(vec![format!("{input}@{tgt_age}")]))
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    input_id: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embedding: Vec<f64>,
}

/// HTTP embedder: `POST {"input_id": ...}`, expecting `{"embedding": [...]}`.
#[derive(Debug, Clone)]
pub struct LiveEmbedder {
    endpoint: String,
    retries: u32,
    backoff: Duration,
    agent: ureq::Agent,
}

impl LiveEmbedder {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, retries: u32) -> Self {
        Self {
            endpoint: endpoint.into(),
            retries,
            backoff: Duration::from_millis(200),
            agent: ureq::Agent::config_builder()
                .timeout_global(Some(timeout))
                .build()
                .into(),
        }
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }
}

impl Embedder<str> for LiveEmbedder {
    fn embed(&self, input: &str) -> Result<Vec<f64>> {
        let resp: EmbedResponse = post_json_with_retries(
            &self.agent,
            &self.endpoint,
            &EmbedRequest { input_id: input },
            self.retries,
            self.backoff,
        )?;
        check_unit(&resp.embedding, input)?;
        Ok(resp.embedding)
    }
}

impl Embedder<String> for LiveEmbedder {
    fn embed(&self, input: &String) -> Result<Vec<f64>> {
        Embedder::<str>::embed(self, input.as_str())
    }
}

/// Seeded Gaussian random projection of a latent, L2-normalized.
#[derive(Debug, Clone)]
pub struct ProjectionEmbedder {
    rows: Vec<Vec<f64>>,
}

impl ProjectionEmbedder {
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..output_dim)
            .map(|_| (0..input_dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        Self { rows }
    }
}

impl Embedder<Latent> for ProjectionEmbedder {
    fn embed(&self, input: &Latent) -> Result<Vec<f64>> {
        let x = input.data();
        if self.rows.first().is_some_and(|r| r.len() != x.len()) {
            return Err(Error::ShapeMismatch {
                expected: vec![self.rows[0].len()],
                found: input.shape().to_vec(),
            });
        }
        let v: Vec<f64> = self.rows.iter().map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < crate::angular::DEGENERATE_NORM {
            return Err(Error::InvariantViolation("projection of a zero latent".into()));
        }
        Ok(v.into_iter().map(|x| x / norm).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EditMethod {
    Angular(AngularConfig),
    Aac(AACConfig),
}

/// Latent re-aging through inversion and editing, with prompts chosen per age.
pub struct LatentAgePipeline<D, F> {
    pub denoiser: D,
    pub schedule: NoiseSchedule,
    pub method: EditMethod,
    pub inversion: AngularConfig,
    pub prompt_for_age: F,
}

impl<D, F> EditPipeline<Latent> for LatentAgePipeline<D, F>
where
    D: Denoiser,
    F: Fn(u32) -> Result<PromptEmbedding> + Sync,
{
    fn edit(&self, input: &Latent, src_age: u32, tgt_age: u32) -> Result<Latent> {
        let c_src = (self.prompt_for_age)(src_age)?;
        let c_tgt = (self.prompt_for_age)(tgt_age)?;
        let traj = invert_trajectory(input, &c_src, &self.denoiser, &self.schedule, self.inversion.eps_timing)?;
        match &self.method {
            EditMethod::Angular(cfg) => angular_edit(&traj, &c_src, &c_tgt, &self.denoiser, cfg),
            EditMethod::Aac(cfg) => aac_edit(&traj, &c_src, &c_tgt, &self.denoiser, cfg),
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::denoise::{GaussianMixtureModel, GaussianOracle};
    use crate::prompt::tests::serve;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::FRAC_1_SQRT_2;

    /// Smallest candidate threshold with impostor match rate <= target, over
    /// every score, the next float above every score, and +inf.
    pub(crate) fn brute_force_fnmr(s: &ScoreSet, fmr: f64) -> (f64, f64) {
        let mut cands: Vec<f64> = s
            .genuine
            .iter()
            .chain(&s.impostor)
            .flat_map(|x| [*x, x.next_up()])
            .collect();
        cands.push(f64::INFINITY);
        cands.sort_by(f64::total_cmp);
        let n = s.impostor.len() as f64;
        let tau = cands
            .into_iter()
            .find(|t| s.impostor.iter().filter(|x| *x >= t).count() as f64 / n <= fmr)
            .unwrap();
        let fnmr = s.genuine.iter().filter(|g| **g < tau).count() as f64 / s.genuine.len() as f64;
        (fnmr, tau)
    }

    pub(crate) fn random_scores<R: Rng>(rng: &mut R) -> ScoreSet {
        let quantize = |x: f64| (x * 20.0).round() / 20.0;
        let ng = rng.random_range(1..30);
        let ni = rng.random_range(1..60);
        let coarse = rng.random_bool(0.5);
        let mut draw = |lo: f64, hi: f64| {
            let x: f64 = rng.random_range(lo..hi);
            if coarse {
                quantize(x)
            } else {
                x
            }
        };
        let genuine = (0..ng).map(|_| draw(-0.2, 1.0)).collect();
        let impostor = (0..ni).map(|_| draw(-1.0, 0.6)).collect();
        ScoreSet::new(genuine, impostor).unwrap()
    }

    #[test]
    fn similarity_examples() {
        let e = [0.6, 0.8];
        assert_eq!(identity_similarity(&e, &e).unwrap(), 1.0);
        assert_eq!(identity_similarity(&e, &[-0.6, -0.8]).unwrap(), -1.0);
        assert_eq!(identity_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            identity_similarity(&[1.0, 0.0], &[FRAC_1_SQRT_2, FRAC_1_SQRT_2]).unwrap(),
            0.7071,
            epsilon = 1e-4
        );
        assert!(identity_similarity(&[1.0, 1.0], &[1.0, 0.0]).is_err());
        assert!(identity_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }

    fn fixtures() -> FixtureEmbedder {
        FixtureEmbedder::from_json_str(
            r#"{"a": [0.6, 0.8], "b": [0.8, -0.6], "c": [1.0, 0.0], "d": [0.28, 0.96]}"#,
        )
        .unwrap()
    }

    struct Constant(&'static str);

    impl EditPipeline<String> for Constant {
        fn edit(&self, _: &String, _: u32, _: u32) -> Result<String> {
            Ok(self.0.to_string())
        }
    }

    struct Failing;

    impl EditPipeline<String> for Failing {
        fn edit(&self, _: &String, _: u32, _: u32) -> Result<String> {
            Err(Error::Http("down".into()))
        }
    }

    #[test]
    fn cyclic_examples() {
        let emb = fixtures();
        let a = "a".to_string();
        assert_eq!(cyclic_identity_similarity(&Passthrough, &a, 25, 60, &emb).unwrap(), 1.0);
        assert_eq!(cyclic_identity_similarity(&Constant("b"), &a, 25, 60, &emb).unwrap(), 0.0);
        match cyclic_identity_similarity(&Failing, &a, 25, 60, &emb) {
            Err(Error::Stage { stage, .. }) => assert_eq!(stage, "cycle forward 25->60"),
            other => panic!("unexpected {other:?}"),
        }
        let inputs = vec![("a".to_string(), 25), ("c".to_string(), 60)];
        let (mean, n) = mean_cyclic_identity_similarity(&Passthrough, &inputs, &[25, 60, 75], &emb).unwrap();
        assert_eq!((mean, n), (1.0, 4));
    }

    #[test]
    fn fixture_pipeline_cycle() {
        let emb = fixtures();
        let mut edits = BTreeMap::new();
        edits.insert("a".to_string(), BTreeMap::from([(60, "b".to_string())]));
        edits.insert("b".to_string(), BTreeMap::from([(25, "d".to_string())]));
        let p = FixturePipeline::new(edits);
        let sim = cyclic_identity_similarity(&p, &"a".to_string(), 25, 60, &emb).unwrap();
        assert_abs_diff_eq!(sim, 0.6 * 0.28 + 0.8 * 0.96, epsilon = 1e-12);
        assert!(cyclic_identity_similarity(&p, &"c".to_string(), 25, 60, &emb).is_err());
    }

    #[test]
    fn reference_examples() {
        let emb = fixtures();
        assert_eq!(reference_identity_similarity("a", "a", &emb).unwrap(), 1.0);
        assert_abs_diff_eq!(reference_identity_similarity("a", "c", &emb).unwrap(), 0.6, epsilon = 1e-12);
        assert!(FixtureEmbedder::from_json_str(r#"{"x": [1.0, 1.0]}"#).is_err());
        assert_eq!(emb.missing(["a", "zz", "q", "zz"]), vec!["zz", "q"]);
    }

    #[test]
    fn fnmr_examples() {
        let s = ScoreSet::new(vec![0.9, 0.7, 0.4], vec![0.3, 0.2, 0.1]).unwrap();
        let r = fnmr_at_fmr(&s, 0.0).unwrap();
        assert_eq!(r.fnmr, 0.0);
        assert!(r.threshold > 0.3 && r.threshold < 0.31);

        let s = ScoreSet::new(vec![0.9, 0.2], vec![0.3]).unwrap();
        assert_eq!(fnmr_at_fmr(&s, 0.0).unwrap().fnmr, 0.5);

        let s = ScoreSet::new(vec![0.5, 0.6], vec![0.1, 0.4, 0.45]).unwrap();
        for fmr in [0.0, 0.2, 0.5, 1.0] {
            assert_eq!(fnmr_at_fmr(&s, fmr).unwrap().fnmr, 0.0);
        }
        assert!(ScoreSet::new(vec![], vec![0.1]).is_err());
        assert!(ScoreSet::new(vec![1.5], vec![0.1]).is_err());
        assert!(fnmr_at_fmr(&s, 1.5).is_err());
    }

    #[test]
    fn fnmr_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let s = random_scores(&mut rng);
            let fmr = *[0.0, 0.0001, 0.001, 0.01, 0.1, 0.25, 0.5, 1.0]
                .get(rng.random_range(0..8))
                .unwrap();
            let r = fnmr_at_fmr(&s, fmr).unwrap();
            assert_eq!((r.fnmr, r.threshold), brute_force_fnmr(&s, fmr), "{s:?} at {fmr}");
        }
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mean_absolute_error(&[60.0, 60.0], 60.0).unwrap(), 0.0);
        assert_eq!(mean_absolute_error(&[58.0, 62.0], 60.0).unwrap(), 2.0);
        assert_eq!(mean_absolute_error(&[70.0], 60.0).unwrap(), 10.0);
        assert!(mean_absolute_error(&[], 60.0).is_err());
    }

    #[test]
    fn age_split_excludes_forty() {
        assert_eq!(age_group(39), Some(AgeGroup::Young));
        assert_eq!(age_group(40), None);
        assert_eq!(age_group(41), Some(AgeGroup::Old));
    }

    #[test]
    fn live_embedder() {
        let (url, handle) = serve(vec![(200, r#"{"embedding": [0.6, 0.8]}"#.into())]);
        let emb = LiveEmbedder::new(url, Duration::from_secs(5), 0);
        assert_eq!(Embedder::<str>::embed(&emb, "img").unwrap(), vec![0.6, 0.8]);
        handle.join().unwrap();
    }

    #[test]
    fn latent_pipeline_with_oracle() {
        let gmm = GaussianMixtureModel::from_json_str(
            r#"{"components": [
                {"mean": [-1.0, 0.5], "cov_diag": [0.3, 0.3], "weight": 1.0},
                {"mean": [1.0, -0.5], "cov_diag": [0.3, 0.3], "weight": 1.0}],
              "condition_map": {"young": [0], "old": [1]}}"#,
        )
        .unwrap();
        let sched = NoiseSchedule::ddpm(30).unwrap();
        let inversion = AngularConfig {
            steps: 30,
            ..AngularConfig::default()
        };
        let pipeline = LatentAgePipeline {
            denoiser: GaussianOracle::new(gmm, sched.clone()),
            schedule: sched,
            method: EditMethod::Angular(inversion),
            inversion,
            prompt_for_age: |age: u32| {
                let label = if age < 40 { "young" } else { "old" };
                PromptEmbedding::new(vec![vec![1.0]], Some(label.into()))
            },
        };
        let emb = ProjectionEmbedder::new(2, 4, 3);
        let z = Latent::from_vec(vec![-0.9, 0.6]).unwrap();
        let aged = pipeline.edit(&z, 25, 60).unwrap();
        assert!(aged.is_finite());
        let sim = cyclic_identity_similarity(&pipeline, &z, 25, 60, &emb).unwrap();
        assert!((-1.0..=1.0).contains(&sim));
        assert_eq!(cyclic_identity_similarity(&Passthrough, &z, 25, 60, &emb).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn fnmr_non_increasing_in_fmr(seed in any::<u64>(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let s = random_scores(&mut ChaCha8Rng::seed_from_u64(seed));
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(fnmr_at_fmr(&s, hi).unwrap().fnmr <= fnmr_at_fmr(&s, lo).unwrap().fnmr);
        }

        #[test]
        fn similarity_symmetric_and_bounded(x in prop::collection::vec(-1.0f64..1.0, 3), y in prop::collection::vec(-1.0f64..1.0, 3)) {
            let unit = |v: &[f64]| {
                let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                v.iter().map(|a| a / n).collect::<Vec<f64>>()
            };
            prop_assume!(x.iter().any(|v| v.abs() > 1e-3) && y.iter().any(|v| v.abs() > 1e-3));
            let (ux, uy) = (unit(&x), unit(&y));
            let s = identity_similarity(&ux, &uy).unwrap();
            prop_assert_eq!(s, identity_similarity(&uy, &ux).unwrap());
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
