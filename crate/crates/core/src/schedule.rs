//! Noise schedules and the elementary deterministic diffusion steps.
//!
//! Indexing: `alphas_cumprod[t]` for `t = 0..=T`, with `alphas_cumprod[0] = 1`.
//! The sampling step (`ddim_forward_step`) maps `z_t -> z_{t-1}` and the
//! inversion step (`ddim_inversion_step`) maps `z_{t-1} -> z_t`; under a shared
//! noise estimate the two are exact algebraic inverses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Latent;

/// Length of the reference training schedule that [`NoiseSchedule::ddpm`]
/// subsamples from.
pub const TRAIN_STEPS: usize = 1000;
pub const DDPM_BETA_START: f64 = 1e-4;
pub const DDPM_BETA_END: f64 = 0.02;

/// Cumulative signal fractions `alpha_t`, strictly decreasing from `alpha_0 = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct NoiseSchedule {
    alphas_cumprod: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleRepr {
    num_steps: usize,
    alphas_cumprod: Vec<f64>,
}

impl TryFrom<ScheduleRepr> for NoiseSchedule {
    type Error = Error;

    fn try_from(r: ScheduleRepr) -> Result<Self> {
        if r.alphas_cumprod.len() != r.num_steps + 1 {
            return Err(Error::InvalidRange(format!(
                "schedule lists {} alphas for {} steps",
                r.alphas_cumprod.len(),
                r.num_steps
            )));
        }
        NoiseSchedule::from_alphas_cumprod(r.alphas_cumprod)
    }
}

impl From<NoiseSchedule> for ScheduleRepr {
    fn from(s: NoiseSchedule) -> Self {
        ScheduleRepr {
            num_steps: s.num_steps(),
            alphas_cumprod: s.alphas_cumprod,
        }
    }
}

impl NoiseSchedule {
    /// Validates the monotonicity and bounds invariants.
    pub fn from_alphas_cumprod(alphas_cumprod: Vec<f64>) -> Result<Self> {
        if alphas_cumprod.len() < 2 {
            return Err(Error::InvalidRange("schedule needs at least one step".into()));
        }
        if alphas_cumprod[0] != 1.0 {
            return Err(Error::InvalidRange(format!(
                "alpha_0 must be 1, got {}",
                alphas_cumprod[0]
            )));
        }
        for (t, w) in alphas_cumprod.windows(2).enumerate() {
            if !(w[1] < w[0]) || !(w[1] > 0.0) {
                return Err(Error::InvalidRange(format!(
                    "alpha must be strictly decreasing and positive; alpha_{} = {}, alpha_{} = {}",
                    t,
                    w[0],
                    t + 1,
                    w[1]
                )));
            }
        }
        Ok(Self { alphas_cumprod })
    }

    /// Linear-beta schedule with `alpha_t = prod_{s<=t} (1 - beta_s)`.
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::InvalidRange("num_steps must be >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_start <= beta_end < 1, got beta_start = {beta_start}, beta_end = {beta_end}"
            )));
        }
        let mut alphas = Vec::with_capacity(num_steps + 1);
        alphas.push(1.0);
        let mut acc = 1.0;
        for s in 0..num_steps {
            let beta = if num_steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * s as f64 / (num_steps - 1) as f64
            };
            acc *= 1.0 - beta;
            alphas.push(acc);
        }
        Self::from_alphas_cumprod(alphas)
    }

    /// The standard 1000-step DDPM linear schedule (beta 1e-4 .. 0.02),
    /// subsampled at `num_steps` evenly spaced timesteps.
    pub fn ddpm(num_steps: usize) -> Result<Self> {
        if num_steps == 0 || num_steps > TRAIN_STEPS {
            return Err(Error::InvalidRange(format!(
                "num_steps must be in [1, {TRAIN_STEPS}], got {num_steps}"
            )));
        }
        let train = Self::linear(TRAIN_STEPS, DDPM_BETA_START, DDPM_BETA_END)?;
        let alphas = (0..=num_steps)
            .map(|k| {
                let idx = (k * TRAIN_STEPS + num_steps / 2) / num_steps;
                train.alphas_cumprod[idx]
            })
            .collect();
        Self::from_alphas_cumprod(alphas)
    }

    pub fn num_steps(&self) -> usize {
        self.alphas_cumprod.len() - 1
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.alphas_cumprod
            .get(t)
            .copied()
            .ok_or(Error::StepOutOfRange {
                step: t,
                min: 0,
                max: self.num_steps(),
            })
    }
}

/// Free-function form of [`NoiseSchedule::linear`].
pub fn make_schedule(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(num_steps, beta_start, beta_end)
}

/// Classifier-free guidance weight `w`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub scale: f64,
}

impl GuidanceConfig {
    pub fn new(scale: f64) -> Result<Self> {
        if !scale.is_finite() || scale < 0.0 {
            return Err(Error::InvalidRange(format!(
                "guidance scale must be finite and >= 0, got {scale}"
            )));
        }
        Ok(Self { scale })
    }
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { scale: 7.5 }
    }
}

/// `sqrt(alpha_t) * z0 + sqrt(1 - alpha_t) * eps`.
pub fn add_noise(z0: &Latent, t: usize, eps: &Latent, sched: &NoiseSchedule) -> Result<Latent> {
    let a = sched.alpha(t)?;
    z0.axpby(a.sqrt(), eps, (1.0 - a).sqrt())
}

/// One deterministic DDIM sampling step `z_t -> z_{t-1}`.
pub fn ddim_forward_step(
    z_t: &Latent,
    t: usize,
    eps: &Latent,
    sched: &NoiseSchedule,
) -> Result<Latent> {
    if t == 0 || t > sched.num_steps() {
        return Err(Error::StepOutOfRange {
            step: t,
            min: 1,
            max: sched.num_steps(),
        });
    }
    let a_t = sched.alpha(t)?;
    let a_prev = sched.alpha(t - 1)?;
    let ratio = (a_prev / a_t).sqrt();
    let eps_coef = (1.0 - a_prev).sqrt() - ratio * (1.0 - a_t).sqrt();
    z_t.axpby(ratio, eps, eps_coef)
}

/// One DDIM inversion step `z_{t-1} -> z_t`, given the index `t - 1`.
pub fn ddim_inversion_step(
    z_prev: &Latent,
    t_minus_1: usize,
    eps: &Latent,
    sched: &NoiseSchedule,
) -> Result<Latent> {
    if t_minus_1 >= sched.num_steps() {
        return Err(Error::StepOutOfRange {
            step: t_minus_1,
            min: 0,
            max: sched.num_steps() - 1,
        });
    }
    let a_prev = sched.alpha(t_minus_1)?;
    let a_t = sched.alpha(t_minus_1 + 1)?;
    let ratio = a_t.sqrt() / a_prev.sqrt();
    let eps_coef = a_t.sqrt() * ((1.0 / a_t - 1.0).sqrt() - (1.0 / a_prev - 1.0).sqrt());
    z_prev.axpby(ratio, eps, eps_coef)
}

/// `w * eps_cond + (1 - w) * eps_uncond`.
pub fn cfg_combine(eps_cond: &Latent, eps_uncond: &Latent, g: GuidanceConfig) -> Result<Latent> {
    eps_cond.axpby(g.scale, eps_uncond, 1.0 - g.scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> Latent {
        Latent::from_vec(x.to_vec()).unwrap()
    }

    /// Two-step schedule with alpha = [1, 0.25]: pins alpha_t and alpha_{t-1}
    /// for the hand-computed step examples.
    fn quarter() -> NoiseSchedule {
        NoiseSchedule::from_alphas_cumprod(vec![1.0, 0.25]).unwrap()
    }

    #[test]
    fn make_schedule_examples() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alphas_cumprod(), &[1.0, 0.5]);
        let s = make_schedule(3, 0.1, 0.1).unwrap();
        for (got, want) in s.alphas_cumprod().iter().zip([1.0, 0.9, 0.81, 0.729]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        assert!(matches!(make_schedule(2, 0.0, 0.1), Err(Error::InvalidRange(_))));
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(2, 0.3, 0.2).is_err());
        assert!(make_schedule(2, 0.1, 1.0).is_err());
    }

    #[test]
    fn ddpm_subsampling_is_monotone() {
        for steps in [1, 20, 50, 200, 1000] {
            let s = NoiseSchedule::ddpm(steps).unwrap();
            assert_eq!(s.num_steps(), steps);
            assert_eq!(s.alpha(0).unwrap(), 1.0);
        }
        assert!(NoiseSchedule::ddpm(1001).is_err());
    }

    #[test]
    fn add_noise_examples() {
        let s = quarter();
        let z0 = v(&[0.3, -1.7]);
        assert_eq!(add_noise(&z0, 0, &v(&[5.0, 9.0]), &s).unwrap(), z0);
        assert_abs_diff_eq!(add_noise(&v(&[2.0]), 1, &v(&[0.0]), &s).unwrap().data()[0], 1.0);
        assert_abs_diff_eq!(
            add_noise(&v(&[0.0]), 1, &v(&[1.0]), &s).unwrap().data()[0],
            0.75f64.sqrt()
        );
        assert!(add_noise(&v(&[0.0]), 1, &v(&[1.0, 2.0]), &s).is_err());
    }

    #[test]
    fn forward_step_examples() {
        let s = quarter();
        assert_abs_diff_eq!(
            ddim_forward_step(&v(&[1.0]), 1, &v(&[0.0]), &s).unwrap().data()[0],
            2.0
        );
        assert_abs_diff_eq!(
            ddim_forward_step(&v(&[1.0]), 1, &v(&[1.0]), &s).unwrap().data()[0],
            2.0 - 2.0 * 0.75f64.sqrt(),
            epsilon = 1e-12
        );
        let s = make_schedule(3, 0.1, 0.2).unwrap();
        let out = ddim_forward_step(&v(&[0.7]), 2, &v(&[0.0]), &s).unwrap();
        let a = s.alphas_cumprod();
        assert_abs_diff_eq!(out.data()[0], (a[1] / a[2]).sqrt() * 0.7, epsilon = 1e-12);
        assert!(ddim_forward_step(&v(&[1.0]), 0, &v(&[0.0]), &s).is_err());
        assert!(ddim_forward_step(&v(&[1.0]), 4, &v(&[0.0]), &s).is_err());
    }

    #[test]
    fn inversion_step_examples() {
        let s = quarter();
        assert_abs_diff_eq!(
            ddim_inversion_step(&v(&[2.0]), 0, &v(&[0.0]), &s).unwrap().data()[0],
            1.0
        );
        assert!(ddim_inversion_step(&v(&[2.0]), 1, &v(&[0.0]), &s).is_err());

        // Zero noise telescopes to sqrt(alpha_T) * z0.
        let s = NoiseSchedule::ddpm(50).unwrap();
        let z0 = v(&[1.5, -0.5, 2.0]);
        let zero = Latent::zeros(&[3]);
        let mut z = z0.clone();
        for t in 0..50 {
            z = ddim_inversion_step(&z, t, &zero, &s).unwrap();
        }
        let expect = z0.scale(s.alpha(50).unwrap().sqrt());
        assert!(z.relative_error(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn cfg_examples() {
        let ec = v(&[1.0, 3.0]);
        let eu = v(&[0.0, -2.0]);
        assert_eq!(cfg_combine(&ec, &eu, GuidanceConfig { scale: 1.0 }).unwrap(), ec);
        assert_eq!(cfg_combine(&ec, &eu, GuidanceConfig { scale: 0.0 }).unwrap(), eu);
        assert_abs_diff_eq!(
            cfg_combine(&v(&[1.0]), &v(&[0.0]), GuidanceConfig { scale: 7.5 })
                .unwrap()
                .data()[0],
            7.5
        );
        assert!(GuidanceConfig::new(f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn inverse_pair_round_trips(
            z in prop::collection::vec(-5.0f64..5.0, 4),
            eps in prop::collection::vec(-3.0f64..3.0, 4),
            t in 1usize..=50,
        ) {
            let s = NoiseSchedule::ddpm(50).unwrap();
            let z = v(&z);
            let eps = v(&eps);
            let back = ddim_inversion_step(&ddim_forward_step(&z, t, &eps, &s).unwrap(), t - 1, &eps, &s).unwrap();
            for (a, b) in back.data().iter().zip(z.data()) {
                prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }

        #[test]
        fn cfg_is_linear(
            a in prop::collection::vec(-3.0f64..3.0, 3),
            b in prop::collection::vec(-3.0f64..3.0, 3),
            c in prop::collection::vec(-3.0f64..3.0, 3),
            w in 0.0f64..10.0,
            k in -2.0f64..2.0,
        ) {
            let g = GuidanceConfig { scale: w };
            let (a, b, c) = (v(&a), v(&b), v(&c));
            let lhs = cfg_combine(&a.axpby(1.0, &c, k).unwrap(), &b, g).unwrap();
            let rhs = cfg_combine(&a, &b, g).unwrap().axpby(1.0, &c, k * w).unwrap();
            for (x, y) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
