//! The noise-prediction contract consumed by inversion and editing, plus two
//! concrete denoisers: the closed-form Gaussian-mixture oracle and a seeded toy
//! attention network with capture and injection hooks.

mod attention;
mod gmm;
mod toy;

pub use attention::{AttentionKind, AttentionMap, AttentionMaps, LayerKey, ROW_SUM_TOL};
pub use gmm::{analytic_eps, GaussianMixtureModel, GaussianOracle, MixtureComponent};
pub use toy::{ToyAttentionDenoiser, ToyConfig, TOY_LAYERS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::schedule::{cfg_combine, GuidanceConfig, NoiseSchedule};

/// Conditioning signal: a non-empty sequence of equal-width token vectors.
///
/// The null condition used by classifier-free guidance is an all-zero token
/// sequence without a label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEmbedding {
    tokens: Vec<Vec<f64>>,
    label: Option<String>,
}

impl PromptEmbedding {
    pub fn new(tokens: Vec<Vec<f64>>, label: Option<String>) -> Result<Self> {
        let dim = tokens.first().ok_or(Error::Empty("prompt token sequence"))?.len();
        if dim == 0 {
            return Err(Error::Empty("prompt token vector"));
        }
        if let Some(bad) = tokens.iter().find(|t| t.len() != dim) {
            return Err(Error::ShapeMismatch {
                expected: vec![dim],
                found: vec![bad.len()],
            });
        }
        Ok(Self { tokens, label })
    }

    pub fn null(num_tokens: usize, dim: usize) -> Self {
        Self {
            tokens: vec![vec![0.0; dim]; num_tokens.max(1)],
            label: None,
        }
    }

    /// Null embedding with the same token count and width as `self`.
    pub fn null_like(&self) -> Self {
        Self::null(self.tokens.len(), self.dim())
    }

    pub fn tokens(&self) -> &[Vec<f64>] {
        &self.tokens
    }

    pub fn label(&self) -> Option<&str> {
        self.label.as_deref()
    }

    pub fn dim(&self) -> usize {
        self.tokens[0].len()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_null(&self) -> bool {
        self.label.is_none() && self.tokens.iter().flatten().all(|v| *v == 0.0)
    }

    /// Appends zero tokens until the sequence has `len` tokens.
    pub fn padded_to(&self, len: usize) -> Self {
        let mut tokens = self.tokens.clone();
        tokens.resize(len.max(tokens.len()), vec![0.0; self.dim()]);
        Self {
            tokens,
            label: self.label.clone(),
        }
    }
}

/// Per-invocation capture/injection state.
#[derive(Debug, Default)]
pub struct AttentionHooks<'a> {
    capture: bool,
    captured: AttentionMaps,
    overrides: Option<&'a AttentionMaps>,
}

impl<'a> AttentionHooks<'a> {
    pub fn capture() -> Self {
        Self {
            capture: true,
            ..Self::default()
        }
    }

    pub fn inject(overrides: &'a AttentionMaps) -> Self {
        Self {
            overrides: Some(overrides),
            ..Self::default()
        }
    }

    pub fn is_capturing(&self) -> bool {
        self.capture
    }

    pub fn override_for(&self, key: LayerKey) -> Option<&'a AttentionMap> {
        self.overrides.and_then(|o| o.get(key))
    }

    pub fn record(&mut self, key: LayerKey, map: &AttentionMap) {
        if self.capture {
            self.captured.insert(key, map.clone());
        }
    }

    pub fn into_captured(self) -> AttentionMaps {
        self.captured
    }
}

/// A noise predictor `eps(z_t, t, c)`.
pub trait Denoiser: Sync {
    fn predict(&self, z_t: &Latent, t: usize, c: &PromptEmbedding) -> Result<Latent>;

    fn supports_attention(&self) -> bool {
        false
    }

    /// Prediction with attention hooks. Denoisers without attention return
    /// [`Error::CaptureUnsupported`].
    fn predict_hooked(
        &self,
        _z_t: &Latent,
        _t: usize,
        _c: &PromptEmbedding,
        _hooks: &mut AttentionHooks<'_>,
    ) -> Result<Latent> {
        Err(Error::CaptureUnsupported)
    }

    /// The schedule the denoiser's step indices refer to, when it has one.
    fn schedule(&self) -> Option<&NoiseSchedule> {
        None
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict(&self, z_t: &Latent, t: usize, c: &PromptEmbedding) -> Result<Latent> {
        (**self).predict(z_t, t, c)
    }

    fn supports_attention(&self) -> bool {
        (**self).supports_attention()
    }

    fn predict_hooked(
        &self,
        z_t: &Latent,
        t: usize,
        c: &PromptEmbedding,
        hooks: &mut AttentionHooks<'_>,
    ) -> Result<Latent> {
        (**self).predict_hooked(z_t, t, c, hooks)
    }

    fn schedule(&self) -> Option<&NoiseSchedule> {
        (**self).schedule()
    }
}

impl<D: Denoiser + ?Sized + Send> Denoiser for Box<D> {
    fn predict(&self, z_t: &Latent, t: usize, c: &PromptEmbedding) -> Result<Latent> {
        (**self).predict(z_t, t, c)
    }

    fn supports_attention(&self) -> bool {
        (**self).supports_attention()
    }

    fn predict_hooked(
        &self,
        z_t: &Latent,
        t: usize,
        c: &PromptEmbedding,
        hooks: &mut AttentionHooks<'_>,
    ) -> Result<Latent> {
        (**self).predict_hooked(z_t, t, c, hooks)
    }

    fn schedule(&self) -> Option<&NoiseSchedule> {
        (**self).schedule()
    }
}

/// Runs the denoiser while copying out every attention map it computes.
pub fn with_captured_attention<D: Denoiser + ?Sized>(
    denoiser: &D,
    z_t: &Latent,
    t: usize,
    c: &PromptEmbedding,
) -> Result<(Latent, AttentionMaps)> {
    if !denoiser.supports_attention() {
        return Err(Error::CaptureUnsupported);
    }
    let mut hooks = AttentionHooks::capture();
    let eps = denoiser.predict_hooked(z_t, t, c, &mut hooks)?;
    Ok((eps, hooks.into_captured()))
}

/// Runs the denoiser with the given maps substituted at their layers.
pub fn with_injected_attention<D: Denoiser + ?Sized>(
    denoiser: &D,
    z_t: &Latent,
    t: usize,
    c: &PromptEmbedding,
    overrides: &AttentionMaps,
) -> Result<Latent> {
    if !denoiser.supports_attention() {
        return Err(Error::InjectionUnsupported);
    }
    overrides.check_row_stochastic(ROW_SUM_TOL)?;
    let mut hooks = AttentionHooks::inject(overrides);
    denoiser.predict_hooked(z_t, t, c, &mut hooks)
}

/// Classifier-free guided prediction `w * eps(c) + (1 - w) * eps(null)`.
pub fn guided_eps<D: Denoiser + ?Sized>(
    denoiser: &D,
    z_t: &Latent,
    t: usize,
    c: &PromptEmbedding,
    guidance: GuidanceConfig,
) -> Result<Latent> {
    let cond = denoiser.predict(z_t, t, c)?;
    let uncond = denoiser.predict(z_t, t, &c.null_like())?;
    cfg_combine(&cond, &uncond, guidance)
}

/// Denoiser that predicts zero noise everywhere. DDIM steps then reduce to
/// pure rescaling.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn predict(&self, z_t: &Latent, _t: usize, _c: &PromptEmbedding) -> Result<Latent> {
        Ok(Latent::zeros(z_t.shape()))
    }
}
