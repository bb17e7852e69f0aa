//! Monte-Carlo validation of the closed-form mixture denoiser.
//!
//! The posterior mean `E[z_0 | z_t]` is estimated by self-normalized
//! importance sampling using only the mixture density and the Gaussian
//! noising likelihood; none of the closed-form posterior algebra is reused.
//! Two proposals are used depending on which is narrower: the prior itself
//! (weights = likelihood) or the likelihood read as a density over `z_0`,
//! `N(z_t / sqrt(a), (1 - a) / a)` (weights = prior density).
//!
//! Every point yields per-coordinate standardized deviations
//! `z = (analytic - MC) / SE`. If the closed form is right these are
//! approximately independent standard normals, so for each mixture and
//! coordinate the check requires
//!
//! * bias: `|sum z| / sqrt(n)` within the bound, and
//! * dispersion: `(sum z^2 - n) / sqrt(2 n)` below the bound.
//!
//! Per-point maxima are reported as well; with hundreds of points a few
//! `|z| > 3` are expected by chance alone.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::denoise::{analytic_eps, GaussianMixtureModel, MixtureComponent, PromptEmbedding};
use crate::error::Result;
use crate::latent::Latent;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleCheckConfig {
    pub mixtures: usize,
    pub points_per_mixture: usize,
    pub samples: usize,
    pub dim: usize,
    pub components: usize,
    pub steps: usize,
    /// Bound on the bias and dispersion statistics, in standard errors.
    pub sigma_bound: f64,
    pub seed: u64,
}

impl Default for OracleCheckConfig {
    fn default() -> Self {
        Self {
            mixtures: 3,
            points_per_mixture: 100,
            samples: 100_000,
            dim: 2,
            components: 3,
            steps: 50,
            sigma_bound: 3.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PointCheck {
    pub mixture: usize,
    pub condition: Option<String>,
    pub t: usize,
    pub z_t: Vec<f64>,
    pub analytic: Vec<f64>,
    pub monte_carlo: Vec<f64>,
    pub std_err: Vec<f64>,
    /// Per-coordinate `(analytic - MC) / std_err`.
    pub z: Vec<f64>,
    pub max_z: f64,
    pub effective_samples: f64,
}

/// Aggregate statistics for one mixture and one coordinate.
#[derive(Debug, Clone, Serialize)]
pub struct CoordinateCheck {
    pub mixture: usize,
    pub coordinate: usize,
    pub n: usize,
    pub bias: f64,
    pub dispersion: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleCheckReport {
    pub points: Vec<PointCheck>,
    pub coordinates: Vec<CoordinateCheck>,
    pub sigma_bound: f64,
    /// Points with some `|z|` above the bound.
    pub exceedances: usize,
    pub min_effective_samples: f64,
}

impl OracleCheckReport {
    pub fn passed(&self) -> bool {
        self.coordinates.iter().all(|c| c.passed)
    }

    pub fn worst_z(&self) -> f64 {
        self.points.iter().map(|p| p.max_z).fold(0.0, f64::max)
    }
}

fn coordinate_checks(points: &[PointCheck], mixtures: usize, dim: usize, bound: f64) -> Vec<CoordinateCheck> {
    let mut out = Vec::with_capacity(mixtures * dim);
    for m in 0..mixtures {
        for d in 0..dim {
            let zs: Vec<f64> = points.iter().filter(|p| p.mixture == m).map(|p| p.z[d]).collect();
            let n = zs.len() as f64;
            let bias = zs.iter().sum::<f64>() / n.sqrt();
            let dispersion = (zs.iter().map(|z| z * z).sum::<f64>() - n) / (2.0 * n).sqrt();
            out.push(CoordinateCheck {
                mixture: m,
                coordinate: d,
                n: zs.len(),
                bias,
                dispersion,
                passed: bias.abs() <= bound && dispersion <= bound,
            });
        }
    }
    out
}

/// Random diagonal mixture with conditions `"a"` (first half of the
/// components) and `"b"` (the rest).
pub fn random_mixture<R: Rng + ?Sized>(dim: usize, components: usize, rng: &mut R) -> GaussianMixtureModel {
    let comps: Vec<MixtureComponent> = (0..components)
        .map(|_| MixtureComponent {
            mean: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
            cov_diag: (0..dim).map(|_| rng.random_range(0.1..0.6)).collect(),
            weight: rng.random_range(0.2..1.0),
        })
        .collect();
    let split = components.div_ceil(2);
    let mut map = BTreeMap::new();
    map.insert("a".to_string(), (0..split).collect());
    if split < components {
        map.insert("b".to_string(), (split..components).collect());
    }
    GaussianMixtureModel::new(comps, map).expect("generated mixture is valid")
}

fn log_normal_diag(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((x, m), v)| -0.5 * ((x - m).powi(2) / v + (2.0 * std::f64::consts::PI * v).ln()))
        .sum()
}

fn log_prior(gmm: &GaussianMixtureModel, subset: &[usize], z0: &[f64]) -> f64 {
    let total: f64 = subset.iter().map(|&k| gmm.components()[k].weight).sum();
    let terms: Vec<f64> = subset
        .iter()
        .map(|&k| {
            let c = &gmm.components()[k];
            (c.weight / total).ln() + log_normal_diag(z0, &c.mean, &c.cov_diag)
        })
        .collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Importance-sampled `E[z_0 | z_t]` with per-coordinate standard errors and
/// the effective sample size.
pub fn monte_carlo_posterior_mean<R: Rng + ?Sized>(
    gmm: &GaussianMixtureModel,
    subset: &[usize],
    z_t: &[f64],
    alpha: f64,
    samples: usize,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>, f64) {
    let dim = z_t.len();
    let lik_var = (1.0 - alpha) / alpha;
    let lik_mean: Vec<f64> = z_t.iter().map(|z| z / alpha.sqrt()).collect();
    let mean_prior_var: f64 = subset
        .iter()
        .flat_map(|&k| gmm.components()[k].cov_diag.iter())
        .sum::<f64>()
        / (subset.len() * dim) as f64;
    let use_likelihood_proposal = lik_var < mean_prior_var;

    let mut draws = Vec::with_capacity(samples);
    let mut log_w = Vec::with_capacity(samples);
    let noise_var = vec![1.0 - alpha; dim];
    for _ in 0..samples {
        if use_likelihood_proposal {
            let z0: Vec<f64> = lik_mean
                .iter()
                .map(|m| m + lik_var.sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            log_w.push(log_prior(gmm, subset, &z0));
            draws.push(z0);
        } else {
            let z0 = gmm.sample(subset, rng);
            let mean: Vec<f64> = z0.iter().map(|x| alpha.sqrt() * x).collect();
            log_w.push(log_normal_diag(z_t, &mean, &noise_var));
            draws.push(z0);
        }
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let sw: f64 = w.iter().sum();
    let sw2: f64 = w.iter().map(|x| x * x).sum();

    let mut mean = vec![0.0; dim];
    for (x, wi) in draws.iter().zip(&w) {
        for (m, xi) in mean.iter_mut().zip(x) {
            *m += wi * xi / sw;
        }
    }
    let mut var = vec![0.0; dim];
    for (x, wi) in draws.iter().zip(&w) {
        for ((v, xi), m) in var.iter_mut().zip(x).zip(&mean) {
            *v += (wi / sw).powi(2) * (xi - m).powi(2);
        }
    }
    let se = var.into_iter().map(f64::sqrt).collect();
    (mean, se, sw * sw / sw2)
}

/// Compares [`analytic_eps`] with the importance-sampled estimate on random
/// mixtures and random `(z_t, t)` pairs.
pub fn verify_oracle(cfg: &OracleCheckConfig) -> Result<OracleCheckReport> {
    let sched = NoiseSchedule::ddpm(cfg.steps)?;
    let jobs: Vec<(usize, usize)> = (0..cfg.mixtures)
        .flat_map(|m| (0..cfg.points_per_mixture).map(move |p| (m, p)))
        .collect();
    let mixtures: Vec<GaussianMixtureModel> = (0..cfg.mixtures)
        .map(|m| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x5eed_0000 + m as u64));
            random_mixture(cfg.dim, cfg.components, &mut rng)
        })
        .collect();

    let points = jobs
        .par_iter()
        .map(|&(m, p)| {
            let gmm = &mixtures[m];
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream((m * cfg.points_per_mixture + p) as u64 + 1);

            let condition = match rng.random_range(0..3) {
                0 => None,
                1 => Some("a".to_string()),
                _ => gmm.condition_map().keys().last().cloned(),
            };
            let subset = gmm.resolve_label(condition.as_deref())?;
            let t = rng.random_range(1..=cfg.steps);
            let alpha = sched.alpha(t)?;
            let z0 = gmm.sample(&subset, &mut rng);
            let z_t: Vec<f64> = z0
                .iter()
                .map(|x| alpha.sqrt() * x + (1.0 - alpha).sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect();

            let prompt = match &condition {
                Some(l) => PromptEmbedding::new(vec![vec![1.0]], Some(l.clone()))?,
                None => PromptEmbedding::null(1, 1),
            };
            let z_lat = Latent::from_vec(z_t.clone())?;
            let analytic = analytic_eps(&z_lat, t, &prompt, gmm, &sched)?.into_data();

            let (mc_mean, mc_se, ess) =
                monte_carlo_posterior_mean(gmm, &subset, &z_t, alpha, cfg.samples, &mut rng);
            let gain = alpha.sqrt() / (1.0 - alpha).sqrt();
            let monte_carlo: Vec<f64> = z_t
                .iter()
                .zip(&mc_mean)
                .map(|(z, m)| (z - alpha.sqrt() * m) / (1.0 - alpha).sqrt())
                .collect();
            let std_err: Vec<f64> = mc_se.iter().map(|s| gain * s).collect();
            let z: Vec<f64> = analytic
                .iter()
                .zip(&monte_carlo)
                .zip(&std_err)
                .map(|((a, b), s)| (a - b) / s.max(f64::MIN_POSITIVE))
                .collect();
            let max_z = z.iter().map(|v| v.abs()).fold(0.0, f64::max);
            Ok(PointCheck {
                mixture: m,
                condition,
                t,
                z_t,
                analytic,
                monte_carlo,
                std_err,
                z,
                max_z,
                effective_samples: ess,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let exceedances = points.iter().filter(|p| !(p.max_z <= cfg.sigma_bound)).count();
    let min_effective_samples = points.iter().map(|p| p.effective_samples).fold(f64::INFINITY, f64::min);
    Ok(OracleCheckReport {
        coordinates: coordinate_checks(&points, cfg.mixtures, cfg.dim, cfg.sigma_bound),
        points,
        sigma_bound: cfg.sigma_bound,
        exceedances,
        min_effective_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_check_passes_and_detects_a_wrong_oracle() {
        let cfg = OracleCheckConfig {
            mixtures: 2,
            points_per_mixture: 40,
            samples: 20_000,
            ..OracleCheckConfig::default()
        };
        let report = verify_oracle(&cfg).unwrap();
        assert_eq!(report.points.len(), 80);
        assert_eq!(report.coordinates.len(), 4);
        assert!(report.passed(), "{:?}", report.coordinates);

        // Shifting every deviation by one standard error must trip the bias test.
        let mut points = report.points.clone();
        for p in &mut points {
            p.z.iter_mut().for_each(|z| *z += 1.0);
        }
        assert!(coordinate_checks(&points, 2, 2, 3.0).iter().any(|c| !c.passed));
    }

    #[test]
    fn importance_sampler_recovers_a_gaussian_posterior() {
        // Single N(0, 1) prior: E[z0 | zt] = sqrt(a) zt.
        let gmm = GaussianMixtureModel::standard_normal(1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (alpha, zt) in [(0.9, 0.7), (0.2, -1.3)] {
            let (mean, se, ess) = monte_carlo_posterior_mean(&gmm, &[0], &[zt], alpha, 50_000, &mut rng);
            let exact = alpha.sqrt() * zt;
            assert!((mean[0] - exact).abs() < 4.0 * se[0], "{mean:?} vs {exact}");
            assert!(ess > 1000.0);
        }
    }
}
