//! Diagonal Gaussian-mixture data model with its closed-form optimal noise
//! predictor.
//!
//! For data `z_0 ~ sum_k pi_k N(mu_k, diag(s_k))` and `z_t = sqrt(a) z_0 + sqrt(1-a) eps`,
//! the marginal of `z_t` under component `k` is `N(sqrt(a) mu_k, a s_k + (1-a))`
//! per coordinate, and
//!
//! ```text
//! E[z_0 | z_t, k] = mu_k + sqrt(a) s_k / (a s_k + 1 - a) * (z_t - sqrt(a) mu_k)
//! eps*(z_t)       = (z_t - sqrt(a) E[z_0 | z_t]) / sqrt(1 - a)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Denoiser, PromptEmbedding};
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub mean: Vec<f64>,
    pub cov_diag: Vec<f64>,
    pub weight: f64,
}

/// Mixture with named conditions, each selecting a subset of components.
///
/// JSON layout:
///
/// ```json
/// {
///   "components": [{"mean": [..], "cov_diag": [..], "weight": 0.5}, ...],
///   "condition_map": {"young": [0], "old": [1]}
/// }
/// ```
///
/// Weights are renormalized within whichever subset a condition selects. The
/// null condition selects every component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureRepr", into = "MixtureRepr")]
pub struct GaussianMixtureModel {
    components: Vec<MixtureComponent>,
    condition_map: BTreeMap<String, Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct MixtureRepr {
    components: Vec<MixtureComponent>,
    #[serde(default)]
    condition_map: BTreeMap<String, Vec<usize>>,
}

impl TryFrom<MixtureRepr> for GaussianMixtureModel {
    type Error = Error;

    fn try_from(r: MixtureRepr) -> Result<Self> {
        GaussianMixtureModel::new(r.components, r.condition_map)
    }
}

impl From<GaussianMixtureModel> for MixtureRepr {
    fn from(g: GaussianMixtureModel) -> Self {
        MixtureRepr {
            components: g.components,
            condition_map: g.condition_map,
        }
    }
}

impl GaussianMixtureModel {
    pub fn new(
        components: Vec<MixtureComponent>,
        condition_map: BTreeMap<String, Vec<usize>>,
    ) -> Result<Self> {
        let dim = components
            .first()
            .ok_or(Error::Empty("mixture components"))?
            .mean
            .len();
        if dim == 0 {
            return Err(Error::Empty("mixture mean"));
        }
        for (i, c) in components.iter().enumerate() {
            if c.mean.len() != dim || c.cov_diag.len() != dim {
                return Err(Error::ShapeMismatch {
                    expected: vec![dim, dim],
                    found: vec![c.mean.len(), c.cov_diag.len()],
                });
            }
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::InvalidRange(format!(
                    "component {i} weight must be positive, got {}",
                    c.weight
                )));
            }
            if c.cov_diag.iter().any(|v| !(*v >= 0.0 && v.is_finite()))
                || c.mean.iter().any(|v| !v.is_finite())
            {
                return Err(Error::InvalidRange(format!(
                    "component {i} needs finite mean and non-negative covariance"
                )));
            }
        }
        for (name, idx) in &condition_map {
            if idx.is_empty() || idx.iter().any(|i| *i >= components.len()) {
                return Err(Error::InvalidRange(format!(
                    "condition {name:?} must list valid component indices"
                )));
            }
        }
        Ok(Self {
            components,
            condition_map,
        })
    }

    /// Single component `N(0, I)`.
    pub fn standard_normal(dim: usize) -> Self {
        Self {
            components: vec![MixtureComponent {
                mean: vec![0.0; dim],
                cov_diag: vec![1.0; dim],
                weight: 1.0,
            }],
            condition_map: BTreeMap::new(),
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::format("mixture json", e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn condition_map(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.condition_map
    }

    /// Component indices selected by the conditioning signal.
    pub fn resolve(&self, c: &PromptEmbedding) -> Result<Vec<usize>> {
        match c.label() {
            Some(label) => self
                .condition_map
                .get(label)
                .cloned()
                .ok_or_else(|| Error::UnknownCondition(label.to_string())),
            None if c.is_null() => Ok((0..self.components.len()).collect()),
            None => Err(Error::UnknownCondition("<unlabeled prompt>".into())),
        }
    }

    pub fn resolve_label(&self, label: Option<&str>) -> Result<Vec<usize>> {
        match label {
            Some(l) => self
                .condition_map
                .get(l)
                .cloned()
                .ok_or_else(|| Error::UnknownCondition(l.to_string())),
            None => Ok((0..self.components.len()).collect()),
        }
    }

    /// Draws one sample from the mixture restricted to `subset`.
    pub fn sample<R: Rng + ?Sized>(&self, subset: &[usize], rng: &mut R) -> Vec<f64> {
        let total: f64 = subset.iter().map(|&k| self.components[k].weight).sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = subset[subset.len() - 1];
        for &k in subset {
            u -= self.components[k].weight;
            if u < 0.0 {
                pick = k;
                break;
            }
        }
        let comp = &self.components[pick];
        comp.mean
            .iter()
            .zip(&comp.cov_diag)
            .map(|(m, v)| {
                let n: f64 = rng.sample(StandardNormal);
                m + v.sqrt() * n
            })
            .collect()
    }

    /// `E[z_0 | z_t]` under the mixture restricted to `subset`.
    pub fn posterior_mean(&self, z_t: &[f64], alpha: f64, subset: &[usize]) -> Vec<f64> {
        let sa = alpha.sqrt();
        let noise = 1.0 - alpha;
        let log_resp: Vec<f64> = subset
            .iter()
            .map(|&k| {
                let c = &self.components[k];
                let mut lp = c.weight.ln();
                for ((z, m), s) in z_t.iter().zip(&c.mean).zip(&c.cov_diag) {
                    let var = alpha * s + noise;
                    let d = z - sa * m;
                    lp -= 0.5 * (d * d / var + var.ln());
                }
                lp
            })
            .collect();
        let max = log_resp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let resp: Vec<f64> = log_resp.iter().map(|l| (l - max).exp()).collect();
        let norm: f64 = resp.iter().sum();

        let mut mean = vec![0.0; z_t.len()];
        for (&k, r) in subset.iter().zip(&resp) {
            let c = &self.components[k];
            let r = r / norm;
            for (i, out) in mean.iter_mut().enumerate() {
                let var = alpha * c.cov_diag[i] + noise;
                let gain = sa * c.cov_diag[i] / var;
                *out += r * (c.mean[i] + gain * (z_t[i] - sa * c.mean[i]));
            }
        }
        mean
    }
}

/// Bayes-optimal noise prediction for Gaussian-mixture data.
pub fn analytic_eps(
    z_t: &Latent,
    t: usize,
    c: &PromptEmbedding,
    gmm: &GaussianMixtureModel,
    sched: &NoiseSchedule,
) -> Result<Latent> {
    if t == 0 {
        return Err(Error::UndefinedAtStepZero);
    }
    let alpha = sched.alpha(t)?;
    if z_t.len() != gmm.dim() {
        return Err(Error::ShapeMismatch {
            expected: vec![gmm.dim()],
            found: z_t.shape().to_vec(),
        });
    }
    let subset = gmm.resolve(c)?;
    let mean = gmm.posterior_mean(z_t.data(), alpha, &subset);
    let sa = alpha.sqrt();
    let sn = (1.0 - alpha).sqrt();
    let eps = z_t
        .data()
        .iter()
        .zip(&mean)
        .map(|(z, m)| (z - sa * m) / sn)
        .collect();
    Ok(Latent::from_parts_unchecked(eps, z_t.shape().to_vec()))
}

/// [`analytic_eps`] bound to a schedule, usable wherever a [`Denoiser`] is.
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    gmm: GaussianMixtureModel,
    sched: NoiseSchedule,
}

impl GaussianOracle {
    pub fn new(gmm: GaussianMixtureModel, sched: NoiseSchedule) -> Self {
        Self { gmm, sched }
    }

    pub fn mixture(&self) -> &GaussianMixtureModel {
        &self.gmm
    }
}

impl Denoiser for GaussianOracle {
    fn predict(&self, z_t: &Latent, t: usize, c: &PromptEmbedding) -> Result<Latent> {
        analytic_eps(z_t, t, c, &self.gmm, &self.sched)
    }

    fn schedule(&self) -> Option<&NoiseSchedule> {
        Some(&self.sched)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn sched_with(alpha: f64) -> NoiseSchedule {
        NoiseSchedule::from_alphas_cumprod(vec![1.0, alpha]).unwrap()
    }

    fn null(dim: usize) -> PromptEmbedding {
        PromptEmbedding::null(1, dim)
    }

    #[test]
    fn standard_normal_data() {
        let gmm = GaussianMixtureModel::standard_normal(1);
        let z = Latent::from_vec(vec![2.0]).unwrap();
        let eps = analytic_eps(&z, 1, &null(1), &gmm, &sched_with(0.75)).unwrap();
        assert_abs_diff_eq!(eps.data()[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn point_mass_at_noise_free_point() {
        let mu = vec![0.4, -1.2];
        let gmm = GaussianMixtureModel::new(
            vec![MixtureComponent {
                mean: mu.clone(),
                cov_diag: vec![0.0, 0.0],
                weight: 1.0,
            }],
            BTreeMap::new(),
        )
        .unwrap();
        let alpha: f64 = 0.6;
        let z = Latent::from_vec(mu.iter().map(|m| alpha.sqrt() * m).collect()).unwrap();
        let eps = analytic_eps(&z, 1, &null(2), &gmm, &sched_with(alpha)).unwrap();
        for e in eps.data() {
            assert_abs_diff_eq!(*e, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn symmetric_pair_at_origin() {
        let comp = |m: f64| MixtureComponent {
            mean: vec![m, -m],
            cov_diag: vec![0.3, 0.3],
            weight: 0.5,
        };
        let gmm = GaussianMixtureModel::new(vec![comp(1.5), comp(-1.5)], BTreeMap::new()).unwrap();
        let z = Latent::zeros(&[2]);
        let eps = analytic_eps(&z, 1, &null(2), &gmm, &sched_with(0.5)).unwrap();
        for e in eps.data() {
            assert_abs_diff_eq!(*e, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn errors() {
        let mut map = BTreeMap::new();
        map.insert("a".to_string(), vec![0]);
        let gmm = GaussianMixtureModel::new(
            GaussianMixtureModel::standard_normal(2).components().to_vec(),
            map,
        )
        .unwrap();
        let z = Latent::zeros(&[2]);
        let s = sched_with(0.5);
        assert!(matches!(
            analytic_eps(&z, 0, &null(2), &gmm, &s),
            Err(Error::UndefinedAtStepZero)
        ));
        let unknown = PromptEmbedding::new(vec![vec![1.0]], Some("b".into())).unwrap();
        assert!(matches!(
            analytic_eps(&z, 1, &unknown, &gmm, &s),
            Err(Error::UnknownCondition(_))
        ));
        let known = PromptEmbedding::new(vec![vec![1.0]], Some("a".into())).unwrap();
        assert!(analytic_eps(&z, 1, &known, &gmm, &s).is_ok());
        assert!(analytic_eps(&Latent::zeros(&[3]), 1, &known, &gmm, &s).is_err());
    }

    #[test]
    fn json_round_trip_and_validation() {
        let text = r#"{"components":[{"mean":[0,1],"cov_diag":[0.5,0.5],"weight":0.3},
                                      {"mean":[2,1],"cov_diag":[0.2,0.1],"weight":0.7}],
                       "condition_map":{"young":[0],"old":[1]}}"#;
        let gmm = GaussianMixtureModel::from_json_str(text).unwrap();
        assert_eq!(gmm.dim(), 2);
        let back = GaussianMixtureModel::from_json_str(&serde_json::to_string(&gmm).unwrap()).unwrap();
        assert_eq!(gmm, back);
        let bad = r#"{"components":[{"mean":[0],"cov_diag":[-1],"weight":1}]}"#;
        assert!(GaussianMixtureModel::from_json_str(bad).is_err());
        let bad = r#"{"components":[{"mean":[0],"cov_diag":[1],"weight":1}],"condition_map":{"x":[3]}}"#;
        assert!(GaussianMixtureModel::from_json_str(bad).is_err());
    }
}
