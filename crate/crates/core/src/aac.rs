//! Adaptive attention control: the target branch is steered by attention maps
//! captured from the source branch. Early steps replace cross-attention, late
//! steps replace self-attention in a layer window, and the steps in between
//! blend whichever kind the source/target cross-attention divergence selects,
//! weighted by how concentrated the source maps are.

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::angular::{check_denoiser_schedule, check_trajectory, LatentTrajectory};
use crate::denoise::{
    with_captured_attention, with_injected_attention, AttentionKind, AttentionMap, AttentionMaps,
    Denoiser, LayerKey, PromptEmbedding,
};
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::schedule::{cfg_combine, ddim_forward_step, GuidanceConfig};

/// Additive smoothing applied to both distributions before the KL log.
pub const KL_SMOOTHING: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AACConfig {
    pub tau1: usize,
    pub tau2: usize,
    pub eta_th: f64,
    /// Self-attention layers touched by self replacement and self blending.
    pub self_layer_range: RangeInclusive<u32>,
    pub steps: usize,
    pub guidance: GuidanceConfig,
}

impl Default for AACConfig {
    fn default() -> Self {
        Self {
            tau1: 35,
            tau2: 15,
            eta_th: 0.05,
            self_layer_range: 4..=14,
            steps: 50,
            guidance: GuidanceConfig::default(),
        }
    }
}

impl AACConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Validation {
                fields: vec!["steps"],
                message: "must be >= 1".into(),
            });
        }
        if !(1 <= self.tau2 && self.tau2 <= self.tau1 && self.tau1 <= self.steps) {
            return Err(Error::Validation {
                fields: vec!["tau1", "tau2"],
                message: format!(
                    "need 1 <= tau2 <= tau1 <= steps, got tau1={} tau2={} steps={}",
                    self.tau1, self.tau2, self.steps
                ),
            });
        }
        if !self.eta_th.is_finite() || self.eta_th < 0.0 {
            return Err(Error::Validation {
                fields: vec!["eta_th"],
                message: format!("must be finite and >= 0, got {}", self.eta_th),
            });
        }
        if self.self_layer_range.start() > self.self_layer_range.end() {
            return Err(Error::Validation {
                fields: vec!["self_layer_range"],
                message: "start must not exceed end".into(),
            });
        }
        GuidanceConfig::new(self.guidance.scale).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    CrossReplace,
    Adaptive,
    SelfReplace,
}

pub fn regime_for_step(t: usize, cfg: &AACConfig) -> Result<Regime> {
    if t == 0 || t > cfg.steps {
        return Err(Error::StepOutOfRange {
            step: t,
            min: 1,
            max: cfg.steps,
        });
    }
    Ok(if t > cfg.tau1 {
        Regime::CrossReplace
    } else if t >= cfg.tau2 {
        Regime::Adaptive
    } else {
        Regime::SelfReplace
    })
}

fn row_entropy(row: &[f64]) -> f64 {
    let k = row.len();
    if k <= 1 {
        return 0.0;
    }
    // Exactly flat rows are maximal by definition; summing K logs would not
    // always round to 1.
    if row.iter().all(|p| *p == row[0]) {
        return 1.0;
    }
    let h = row
        .iter()
        .filter(|p| **p > 0.0)
        .fold(0.0, |acc, p| acc - p * p.ln());
    (h / (k as f64).ln()).clamp(0.0, 1.0)
}

/// Mean normalized row entropy of one map.
pub fn map_entropy(m: &AttentionMap) -> f64 {
    let n = m.heads() * m.rows();
    m.row_iter().map(row_entropy).sum::<f64>() / n as f64
}

/// Shannon entropy of every row divided by `ln K`, averaged over rows and
/// heads and then over layers.
pub fn row_entropy_normalized(maps: &AttentionMaps) -> Result<f64> {
    if maps.is_empty() {
        return Err(Error::Empty("attention maps"));
    }
    maps.check_row_stochastic(crate::denoise::ROW_SUM_TOL)?;
    Ok(maps.iter().map(|(_, m)| map_entropy(m)).sum::<f64>() / maps.len() as f64)
}

fn row_kl(p: &[f64], q: &[f64]) -> f64 {
    let norm = 1.0 + KL_SMOOTHING * p.len() as f64;
    let kl: f64 = p
        .iter()
        .zip(q)
        .map(|(p, q)| {
            let ps = (p + KL_SMOOTHING) / norm;
            let qs = (q + KL_SMOOTHING) / norm;
            ps * (ps / qs).ln()
        })
        .sum();
    kl.max(0.0)
}

/// Mean row-wise `KL(src || tgt)` of one pair of maps.
pub fn map_kl(src: &AttentionMap, tgt: &AttentionMap) -> Result<f64> {
    src.check_same_shape(tgt)?;
    let n = src.heads() * src.rows();
    Ok(src
        .row_iter()
        .zip(tgt.row_iter())
        .map(|(p, q)| row_kl(p, q))
        .sum::<f64>()
        / n as f64)
}

/// Row-wise `KL(src || tgt)` with both rows smoothed by [`KL_SMOOTHING`] and
/// renormalized, averaged over rows, heads and layers.
pub fn kl_divergence(src: &AttentionMaps, tgt: &AttentionMaps) -> Result<f64> {
    src.check_same_layout(tgt)?;
    if src.is_empty() {
        return Err(Error::Empty("attention maps"));
    }
    let mut total = 0.0;
    for (key, m) in src.iter() {
        let other = tgt.get(*key).expect("layouts match");
        total += map_kl(m, other)?;
    }
    Ok(total / src.len() as f64)
}

/// Elementwise `w * src + (1 - w) * tgt`.
pub fn blend_maps(src: &AttentionMaps, tgt: &AttentionMaps, w: f64) -> Result<AttentionMaps> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::InvalidRange(format!("blend weight must lie in [0, 1], got {w}")));
    }
    src.check_same_layout(tgt)?;
    src.iter()
        .map(|(key, s)| {
            let t = tgt.get(*key).expect("layouts match");
            let [h, r, c] = s.dims();
            let data = s
                .data()
                .iter()
                .zip(t.data())
                .map(|(a, b)| w * a + (1.0 - w) * b)
                .collect();
            Ok((*key, AttentionMap::new(h, r, c, data)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AacTraceEntry {
    pub t: usize,
    pub regime: Regime,
    /// Cross-attention divergence, computed only in the adaptive regime.
    pub eta: Option<f64>,
    /// Blend weight given to the source maps, computed only in the adaptive regime.
    pub w: Option<f64>,
    pub layers_injected: Vec<LayerKey>,
}

#[derive(Debug, Clone)]
pub struct AacOutcome {
    pub z0_tgt: Latent,
    pub trace: Vec<AacTraceEntry>,
}

fn common_prompts(c_src: &PromptEmbedding, c_tgt: &PromptEmbedding) -> Result<(PromptEmbedding, PromptEmbedding)> {
    if c_src.dim() != c_tgt.dim() {
        return Err(Error::ShapeMismatch {
            expected: vec![c_src.dim()],
            found: vec![c_tgt.dim()],
        });
    }
    let n = c_src.len().max(c_tgt.len());
    Ok((c_src.padded_to(n), c_tgt.padded_to(n)))
}

pub fn aac_edit<D: Denoiser + ?Sized>(
    traj: &LatentTrajectory,
    c_src: &PromptEmbedding,
    c_tgt: &PromptEmbedding,
    denoiser: &D,
    cfg: &AACConfig,
) -> Result<Latent> {
    aac_edit_traced(traj, c_src, c_tgt, denoiser, cfg, |_, _| {}).map(|o| o.z0_tgt)
}

/// [`aac_edit`] returning the per-step trace. `on_inject` sees every map set
/// right before it is injected into the target branch.
pub fn aac_edit_traced<D, F>(
    traj: &LatentTrajectory,
    c_src: &PromptEmbedding,
    c_tgt: &PromptEmbedding,
    denoiser: &D,
    cfg: &AACConfig,
    mut on_inject: F,
) -> Result<AacOutcome>
where
    D: Denoiser + ?Sized,
    F: FnMut(&AacTraceEntry, &AttentionMaps),
{
    cfg.validate()?;
    check_trajectory(traj, cfg.steps)?;
    check_denoiser_schedule(denoiser, traj.schedule())?;
    if !denoiser.supports_attention() {
        return Err(Error::CaptureUnsupported);
    }
    let sched = traj.schedule();
    let (c_src, c_tgt) = common_prompts(c_src, c_tgt)?;
    let (u_src, u_tgt) = (c_src.null_like(), c_tgt.null_like());

    let mut z_src = traj.terminal().clone();
    let mut z_tgt = z_src.clone();
    let mut trace = Vec::with_capacity(cfg.steps);

    for t in (1..=cfg.steps).rev() {
        let regime = regime_for_step(t, cfg)?;

        let (eps_c, maps_src) = with_captured_attention(denoiser, &z_src, t, &c_src)?;
        let eps_u = denoiser.predict(&z_src, t, &u_src)?;
        let eps_src = cfg_combine(&eps_c, &eps_u, cfg.guidance)?;

        let (mut eta, mut w) = (None, None);
        let inject = match regime {
            Regime::CrossReplace => maps_src.select(AttentionKind::Cross, None),
            Regime::SelfReplace => {
                maps_src.select(AttentionKind::SelfAttn, Some(cfg.self_layer_range.clone()))
            }
            Regime::Adaptive => {
                let (_, maps_tgt) = with_captured_attention(denoiser, &z_tgt, t, &c_tgt)?;
                let cross_src = maps_src.select(AttentionKind::Cross, None);
                let cross_tgt = maps_tgt.select(AttentionKind::Cross, None);
                let divergence = kl_divergence(&cross_src, &cross_tgt)?;
                eta = Some(divergence);
                let (a, b) = if divergence > cfg.eta_th {
                    (cross_src, cross_tgt)
                } else {
                    let range = Some(cfg.self_layer_range.clone());
                    (
                        maps_src.select(AttentionKind::SelfAttn, range.clone()),
                        maps_tgt.select(AttentionKind::SelfAttn, range),
                    )
                };
                let weight = 1.0 - row_entropy_normalized(&a)?;
                w = Some(weight);
                blend_maps(&a, &b, weight)?
            }
        };

        let entry = AacTraceEntry {
            t,
            regime,
            eta,
            w,
            layers_injected: inject.keys().collect(),
        };
        on_inject(&entry, &inject);

        let eps_c = with_injected_attention(denoiser, &z_tgt, t, &c_tgt, &inject)?;
        let eps_u = denoiser.predict(&z_tgt, t, &u_tgt)?;
        let eps_tgt = cfg_combine(&eps_c, &eps_u, cfg.guidance)?;

        z_src = ddim_forward_step(&z_src, t, &eps_src, sched)?;
        z_tgt = ddim_forward_step(&z_tgt, t, &eps_tgt, sched)?;
        if !z_src.is_finite() || !z_tgt.is_finite() {
            return Err(Error::NumericDivergence {
                step: t,
                detail: "non-finite branch state".into(),
            });
        }
        trace.push(entry);
    }
    Ok(AacOutcome { z0_tgt: z_tgt, trace })
}
