//! Angular inversion: DDIM-invert a latent under the source prompt, then run a
//! source and a target branch back down, pulling both toward the inversion
//! trajectory. The source branch receives its full residual; the target
//! branch receives a cosine-weighted blend of both residuals, each damped by
//! `exp(-xi * theta)` where `theta` is the angle at `z_T*` between the
//! trajectory point and the branch prediction.

use serde::{Deserialize, Serialize};

use crate::denoise::{guided_eps, Denoiser, PromptEmbedding};
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::schedule::{ddim_forward_step, ddim_inversion_step, GuidanceConfig, NoiseSchedule};

/// Norms below this are treated as zero by the angle and cosine helpers.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Inverted states `z_0* ..= z_T*` plus what produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory {
    states: Vec<Latent>,
    schedule: NoiseSchedule,
    prompt_label: Option<String>,
}

impl LatentTrajectory {
    pub fn new(
        states: Vec<Latent>,
        schedule: NoiseSchedule,
        prompt_label: Option<String>,
    ) -> Result<Self> {
        if states.len() != schedule.num_steps() + 1 {
            return Err(Error::ScheduleMismatch(format!(
                "trajectory has {} states for a {}-step schedule",
                states.len(),
                schedule.num_steps()
            )));
        }
        let first = &states[0];
        for (t, s) in states.iter().enumerate() {
            first.check_same_shape(s)?;
            if !s.is_finite() {
                return Err(Error::NumericDivergence {
                    step: t,
                    detail: "non-finite trajectory state".into(),
                });
            }
        }
        Ok(Self {
            states,
            schedule,
            prompt_label,
        })
    }

    pub fn states(&self) -> &[Latent] {
        &self.states
    }

    pub fn state(&self, t: usize) -> &Latent {
        &self.states[t]
    }

    /// `z_T*`, the starting point of editing.
    pub fn terminal(&self) -> &Latent {
        &self.states[self.states.len() - 1]
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn steps(&self) -> usize {
        self.schedule.num_steps()
    }

    pub fn prompt_label(&self) -> Option<&str> {
        self.prompt_label.as_deref()
    }

    pub fn shape(&self) -> &[usize] {
        self.states[0].shape()
    }
}

/// Which step index the noise estimate uses while inverting `z_{t-1} -> z_t`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpsTiming {
    /// `eps(z_{t-1}, t)`: the noise level being stepped to, matching the
    /// estimate the sampling step at `t` uses. Never queries `t = 0`.
    #[default]
    Destination,
    /// `eps(z_{t-1}, t - 1)`: the noise level being stepped from.
    Source,
}

impl EpsTiming {
    pub fn index(self, t: usize) -> usize {
        match self {
            EpsTiming::Destination => t,
            EpsTiming::Source => t - 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngularConfig {
    /// Damping strength `xi`.
    pub xi: f64,
    pub guidance: GuidanceConfig,
    pub steps: usize,
    #[serde(default)]
    pub eps_timing: EpsTiming,
}

impl Default for AngularConfig {
    fn default() -> Self {
        Self {
            xi: 1.2,
            guidance: GuidanceConfig::default(),
            steps: 50,
            eps_timing: EpsTiming::default(),
        }
    }
}

impl AngularConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.xi.is_finite() || self.xi < 0.0 {
            return Err(Error::Validation {
                fields: vec!["xi"],
                message: format!("must be finite and >= 0, got {}", self.xi),
            });
        }
        if self.steps == 0 {
            return Err(Error::Validation {
                fields: vec!["steps"],
                message: "must be >= 1".into(),
            });
        }
        GuidanceConfig::new(self.guidance.scale).map(|_| ())
    }
}

pub(crate) fn check_denoiser_schedule<D: Denoiser + ?Sized>(
    denoiser: &D,
    sched: &NoiseSchedule,
) -> Result<()> {
    match denoiser.schedule() {
        Some(own) if own != sched => Err(Error::ScheduleMismatch(
            "denoiser was built for a different noise schedule".into(),
        )),
        _ => Ok(()),
    }
}

fn finite_or_diverged(z: Latent, step: usize, what: &str) -> Result<Latent> {
    if z.is_finite() {
        Ok(z)
    } else {
        Err(Error::NumericDivergence {
            step,
            detail: format!("{what} is not finite"),
        })
    }
}

/// DDIM-inverts `z0` under `c_src` with plain conditional predictions
/// (no guidance).
pub fn invert_trajectory<D: Denoiser + ?Sized>(
    z0: &Latent,
    c_src: &PromptEmbedding,
    denoiser: &D,
    sched: &NoiseSchedule,
    timing: EpsTiming,
) -> Result<LatentTrajectory> {
    if !z0.is_finite() {
        return Err(Error::InvariantViolation("z0 is not finite".into()));
    }
    check_denoiser_schedule(denoiser, sched)?;
    let steps = sched.num_steps();
    let mut states = Vec::with_capacity(steps + 1);
    states.push(z0.clone());
    for t in 1..=steps {
        let prev = &states[t - 1];
        let eps = denoiser
            .predict(prev, timing.index(t), c_src)
            .map_err(|e| e.at_stage(format!("inversion step {t}")))?;
        let next = ddim_inversion_step(prev, t - 1, &eps, sched)?;
        states.push(finite_or_diverged(next, t, "inverted state")?);
    }
    LatentTrajectory::new(states, sched.clone(), c_src.label().map(str::to_owned))
}

/// Angle at `origin` between the rays toward `a` and `b`, in `[0, pi]`.
pub fn angle_at_origin(a: &Latent, b: &Latent, origin: &Latent) -> f64 {
    let (Ok(da), Ok(db)) = (a.sub(origin), b.sub(origin)) else {
        return 0.0;
    };
    let (na, nb) = (da.norm(), db.norm());
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        return 0.0;
    }
    // 2 atan2(|u - v|, |u + v|) on the unit vectors; acos loses ~1e-8 near 0.
    let (ua, ub) = (da.scale(1.0 / na), db.scale(1.0 / nb));
    let diff = ua.sub(&ub).map(|d| d.norm()).unwrap_or(0.0);
    let sum = ua.add(&ub).map(|d| d.norm()).unwrap_or(0.0);
    2.0 * diff.atan2(sum)
}

/// Scales the offset by `exp(-xi * theta)`.
pub fn damp_offset(o: &Latent, theta: f64, xi: f64) -> Latent {
    o.scale((-xi * theta).exp())
}

pub fn cosine_similarity(a: &Latent, b: &Latent) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        return 0.0;
    }
    let Ok(dot) = a.dot(b) else { return 0.0 };
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Per-step diagnostics of an angular edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngularStep {
    pub t: usize,
    pub theta_src: f64,
    pub theta_tgt: f64,
    pub beta: f64,
    /// `||z_{t-1}^src - z_{t-1}*||`.
    pub source_deviation: f64,
}

#[derive(Debug, Clone)]
pub struct AngularOutcome {
    pub z0_tgt: Latent,
    pub steps: Vec<AngularStep>,
}

pub(crate) fn check_trajectory(traj: &LatentTrajectory, steps: usize) -> Result<()> {
    if traj.steps() != steps {
        return Err(Error::ScheduleMismatch(format!(
            "trajectory has {} steps, config expects {}",
            traj.steps(),
            steps
        )));
    }
    Ok(())
}

/// Dual-branch editing from `z_T*`; returns `z_0^tgt`.
pub fn angular_edit<D: Denoiser + ?Sized>(
    traj: &LatentTrajectory,
    c_src: &PromptEmbedding,
    c_tgt: &PromptEmbedding,
    denoiser: &D,
    config: &AngularConfig,
) -> Result<Latent> {
    angular_edit_traced(traj, c_src, c_tgt, denoiser, config).map(|o| o.z0_tgt)
}

pub fn angular_edit_traced<D: Denoiser + ?Sized>(
    traj: &LatentTrajectory,
    c_src: &PromptEmbedding,
    c_tgt: &PromptEmbedding,
    denoiser: &D,
    config: &AngularConfig,
) -> Result<AngularOutcome> {
    config.validate()?;
    check_trajectory(traj, config.steps)?;
    let sched = traj.schedule();
    check_denoiser_schedule(denoiser, sched)?;

    let z_terminal = traj.terminal();
    let mut z_src = z_terminal.clone();
    let mut z_tgt = z_terminal.clone();
    let mut steps = Vec::with_capacity(config.steps);

    for t in (1..=config.steps).rev() {
        let z_star = traj.state(t - 1);

        let eps_src = guided_eps(denoiser, &z_src, t, c_src, config.guidance)?;
        let pred_src = ddim_forward_step(&z_src, t, &eps_src, sched)?;
        let eps_tgt = guided_eps(denoiser, &z_tgt, t, c_tgt, config.guidance)?;
        let pred_tgt = ddim_forward_step(&z_tgt, t, &eps_tgt, sched)?;

        let off_src = z_star.sub(&pred_src)?;
        let off_tgt = z_star.sub(&pred_tgt)?;

        // Angles and beta use the raw predictions; the corrected source
        // state equals z* and would pin theta_src to zero.
        let theta_src = angle_at_origin(z_star, &pred_src, z_terminal);
        let theta_tgt = angle_at_origin(z_star, &pred_tgt, z_terminal);

        let next_src = pred_src.add(&off_src)?;

        let damped_src = damp_offset(&off_src, theta_src, config.xi);
        let damped_tgt = damp_offset(&off_tgt, theta_tgt, config.xi);
        let beta = cosine_similarity(z_star, &pred_tgt).clamp(0.0, 1.0);

        let blended = damped_tgt.axpby(beta, &damped_src, 1.0 - beta)?;
        let next_tgt = pred_tgt.add(&blended)?;

        steps.push(AngularStep {
            t,
            theta_src,
            theta_tgt,
            beta,
            source_deviation: next_src.sub(z_star)?.norm(),
        });
        z_src = finite_or_diverged(next_src, t, "source branch")?;
        z_tgt = finite_or_diverged(next_tgt, t, "target branch")?;
    }

    Ok(AngularOutcome {
        z0_tgt: z_tgt,
        steps,
    })
}

/// Plain guided DDIM sampling from `z_T*` under one prompt.
pub fn ddim_replay<D: Denoiser + ?Sized>(
    traj: &LatentTrajectory,
    c: &PromptEmbedding,
    denoiser: &D,
    guidance: Option<GuidanceConfig>,
) -> Result<Latent> {
    let sched = traj.schedule();
    check_denoiser_schedule(denoiser, sched)?;
    let mut z = traj.terminal().clone();
    for t in (1..=traj.steps()).rev() {
        let eps = match guidance {
            Some(g) => guided_eps(denoiser, &z, t, c, g)?,
            None => denoiser.predict(&z, t, c)?,
        };
        z = finite_or_diverged(ddim_forward_step(&z, t, &eps, sched)?, t, "replayed state")?;
    }
    Ok(z)
}
