//! Fixed-weight toy attention denoiser.
//!
//! The latent is split into `N = len / feature_dim` query tokens. Each token is
//! projected to a hidden width, a sinusoidal timestep embedding is added, and
//! the sequence passes through [`TOY_LAYERS`] blocks, each one self-attention
//! sublayer (keys = latent positions) followed by one cross-attention sublayer
//! (keys = prompt tokens). Layer ids run `1..=16`. Attention is
//! `softmax(Q K^T / sqrt(d)) V` per head; an injected map replaces the softmax
//! output verbatim. All weights come from one seeded ChaCha8 stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{AttentionHooks, AttentionKind, AttentionMap, Denoiser, LayerKey, PromptEmbedding};
use crate::error::{Error, Result};
use crate::latent::Latent;

pub const TOY_LAYERS: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyConfig {
    /// Latent values per query token.
    pub feature_dim: usize,
    /// Width of prompt token vectors.
    pub embed_dim: usize,
    pub hidden: usize,
    pub heads: usize,
}

impl ToyConfig {
    pub fn new(feature_dim: usize, embed_dim: usize) -> Self {
        Self {
            feature_dim,
            embed_dim,
            hidden: 8,
            heads: 2,
        }
    }
}

/// Dense row-major matrix, `y = x W` for `x` of length `rows`.
#[derive(Debug, Clone)]
struct Dense {
    rows: usize,
    cols: usize,
    w: Vec<f64>,
}

impl Dense {
    fn random(rows: usize, cols: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, gain / (rows as f64).sqrt()).expect("positive std");
        let w = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Self { rows, cols, w }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (xi, row) in x.iter().zip(self.w.chunks_exact(self.cols)) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
struct AttnWeights {
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
}

#[derive(Debug, Clone)]
struct Block {
    self_attn: AttnWeights,
    cross_attn: AttnWeights,
}

#[derive(Debug, Clone)]
pub struct ToyAttentionDenoiser {
    seed: u64,
    cfg: ToyConfig,
    input: Dense,
    blocks: Vec<Block>,
    output: Dense,
}

impl ToyAttentionDenoiser {
    pub fn new(seed: u64, cfg: ToyConfig) -> Result<Self> {
        if cfg.feature_dim == 0 || cfg.embed_dim == 0 || cfg.heads == 0 {
            return Err(Error::InvalidRange("toy dims must be positive".into()));
        }
        if cfg.hidden % cfg.heads != 0 {
            return Err(Error::InvalidRange(format!(
                "hidden width {} not divisible by {} heads",
                cfg.hidden, cfg.heads
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = cfg.hidden;
        let input = Dense::random(cfg.feature_dim, h, 1.0, &mut rng);
        let residual_gain = 1.0 / (2.0 * TOY_LAYERS as f64).sqrt();
        let blocks = (0..TOY_LAYERS)
            .map(|_| Block {
                self_attn: AttnWeights {
                    q: Dense::random(h, h, 2.0, &mut rng),
                    k: Dense::random(h, h, 2.0, &mut rng),
                    v: Dense::random(h, h, 1.0, &mut rng),
                    o: Dense::random(h, h, residual_gain * 4.0, &mut rng),
                },
                cross_attn: AttnWeights {
                    q: Dense::random(h, h, 2.0, &mut rng),
                    k: Dense::random(cfg.embed_dim, h, 2.0, &mut rng),
                    v: Dense::random(cfg.embed_dim, h, 1.0, &mut rng),
                    o: Dense::random(h, h, residual_gain * 4.0, &mut rng),
                },
            })
            .collect();
        let output = Dense::random(h, cfg.feature_dim, 1.0, &mut rng);
        Ok(Self {
            seed,
            cfg,
            input,
            blocks,
            output,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn config(&self) -> ToyConfig {
        self.cfg
    }

    fn time_embedding(&self, t: usize) -> Vec<f64> {
        let h = self.cfg.hidden;
        (0..h)
            .map(|j| {
                let freq = 1.0 / 10f64.powf((j / 2) as f64 * 2.0 / h as f64);
                let x = t as f64 * freq * 0.1;
                0.5 * if j % 2 == 0 { x.sin() } else { x.cos() }
            })
            .collect()
    }

    fn forward(
        &self,
        z_t: &Latent,
        t: usize,
        c: &PromptEmbedding,
        hooks: &mut AttentionHooks<'_>,
    ) -> Result<Latent> {
        let f = self.cfg.feature_dim;
        if z_t.len() % f != 0 {
            return Err(Error::ShapeMismatch {
                expected: vec![f],
                found: z_t.shape().to_vec(),
            });
        }
        if c.dim() != self.cfg.embed_dim {
            return Err(Error::ShapeMismatch {
                expected: vec![self.cfg.embed_dim],
                found: vec![c.dim()],
            });
        }
        let temb = self.time_embedding(t);
        let mut hidden: Vec<Vec<f64>> = z_t
            .data()
            .chunks_exact(f)
            .map(|x| {
                let mut h = self.input.apply(x);
                h.iter_mut().zip(&temb).for_each(|(a, b)| *a += b);
                h
            })
            .collect();

        for (i, block) in self.blocks.iter().enumerate() {
            let layer = i as u32 + 1;

            let normed: Vec<Vec<f64>> = hidden.iter().map(|h| rms_norm(h)).collect();
            let key = LayerKey::new(layer, AttentionKind::SelfAttn);
            let out = attention_sublayer(
                &block.self_attn,
                &normed,
                &normed,
                self.cfg.heads,
                hooks.override_for(key),
            )?;
            hooks.record(key, &out.map);
            add_residual(&mut hidden, &out.values, &block.self_attn.o);

            let normed: Vec<Vec<f64>> = hidden.iter().map(|h| rms_norm(h)).collect();
            let key = LayerKey::new(layer, AttentionKind::Cross);
            let out = attention_sublayer(
                &block.cross_attn,
                &normed,
                c.tokens(),
                self.cfg.heads,
                hooks.override_for(key),
            )?;
            hooks.record(key, &out.map);
            add_residual(&mut hidden, &out.values, &block.cross_attn.o);
        }

        let eps: Vec<f64> = hidden
            .iter()
            .flat_map(|h| self.output.apply(&rms_norm(h)))
            .collect();
        if eps.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDivergence {
                step: t,
                detail: "toy denoiser produced a non-finite prediction".into(),
            });
        }
        Ok(Latent::from_parts_unchecked(eps, z_t.shape().to_vec()))
    }
}

impl Denoiser for ToyAttentionDenoiser {
    fn predict(&self, z_t: &Latent, t: usize, c: &PromptEmbedding) -> Result<Latent> {
        self.forward(z_t, t, c, &mut AttentionHooks::default())
    }

    fn supports_attention(&self) -> bool {
        true
    }

    fn predict_hooked(
        &self,
        z_t: &Latent,
        t: usize,
        c: &PromptEmbedding,
        hooks: &mut AttentionHooks<'_>,
    ) -> Result<Latent> {
        self.forward(z_t, t, c, hooks)
    }
}

fn rms_norm(x: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    x.iter().map(|v| v * inv).collect()
}

fn add_residual(hidden: &mut [Vec<f64>], values: &[Vec<f64>], proj: &Dense) {
    for (h, v) in hidden.iter_mut().zip(values) {
        for (a, b) in h.iter_mut().zip(proj.apply(v)) {
            *a += b;
        }
    }
}

struct SublayerOutput {
    /// Per query token: heads concatenated, before the output projection.
    values: Vec<Vec<f64>>,
    map: AttentionMap,
}

fn attention_sublayer(
    w: &AttnWeights,
    queries: &[Vec<f64>],
    context: &[Vec<f64>],
    heads: usize,
    injected: Option<&AttentionMap>,
) -> Result<SublayerOutput> {
    let q: Vec<Vec<f64>> = queries.iter().map(|x| w.q.apply(x)).collect();
    let k: Vec<Vec<f64>> = context.iter().map(|x| w.k.apply(x)).collect();
    let v: Vec<Vec<f64>> = context.iter().map(|x| w.v.apply(x)).collect();
    attend(&q, &k, &v, heads, injected)
}

/// Multi-head `softmax(Q K^T / sqrt(d)) V`, or `M V` when `injected` is given.
fn attend(
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    heads: usize,
    injected: Option<&AttentionMap>,
) -> Result<SublayerOutput> {
    let width = v[0].len();
    let d = width / heads;
    let (nq, nk) = (q.len(), k.len());

    let map = match injected {
        Some(m) => {
            if m.dims() != [heads, nq, nk] {
                return Err(Error::ShapeMismatch {
                    expected: vec![heads, nq, nk],
                    found: m.dims().to_vec(),
                });
            }
            m.clone()
        }
        None => {
            let scale = 1.0 / (d as f64).sqrt();
            let mut data = Vec::with_capacity(heads * nq * nk);
            for h in 0..heads {
                let span = h * d..(h + 1) * d;
                for qi in q {
                    let scores: Vec<f64> = k
                        .iter()
                        .map(|kj| {
                            qi[span.clone()]
                                .iter()
                                .zip(&kj[span.clone()])
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                                * scale
                        })
                        .collect();
                    data.extend(softmax(&scores));
                }
            }
            AttentionMap::new(heads, nq, nk, data)?
        }
    };

    let mut values = vec![vec![0.0; width]; nq];
    for h in 0..heads {
        for (qi, out) in values.iter_mut().enumerate() {
            for (kj, weight) in map.row(h, qi).iter().enumerate() {
                for c in h * d..(h + 1) * d {
                    out[c] += weight * v[kj][c];
                }
            }
        }
    }
    Ok(SublayerOutput { values, map })
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoise::{
        with_captured_attention, with_injected_attention, AttentionMaps, ROW_SUM_TOL,
    };

    fn setup() -> (ToyAttentionDenoiser, Latent, PromptEmbedding) {
        let toy = ToyAttentionDenoiser::new(7, ToyConfig::new(1, 4)).unwrap();
        let z = Latent::from_vec(vec![0.3, -1.1, 0.8, 2.0, -0.4, 0.05]).unwrap();
        let c = PromptEmbedding::new(
            vec![vec![0.2, -0.5, 1.0, 0.3], vec![-0.7, 0.1, 0.4, 0.9], vec![0.5, 0.5, -0.2, 0.0]],
            None,
        )
        .unwrap();
        (toy, z, c)
    }

    #[test]
    fn deterministic_and_seed_stable() {
        let (toy, z, c) = setup();
        let a = toy.predict(&z, 12, &c).unwrap();
        let b = toy.predict(&z, 12, &c).unwrap();
        assert_eq!(a.data(), b.data());
        let again = ToyAttentionDenoiser::new(7, ToyConfig::new(1, 4)).unwrap();
        assert_eq!(again.predict(&z, 12, &c).unwrap().data(), a.data());
        let other = ToyAttentionDenoiser::new(8, ToyConfig::new(1, 4)).unwrap();
        assert_ne!(other.predict(&z, 12, &c).unwrap().data(), a.data());
    }

    #[test]
    fn capture_is_passive_and_complete() {
        let (toy, z, c) = setup();
        let plain = toy.predict(&z, 5, &c).unwrap();
        let (eps, maps) = with_captured_attention(&toy, &z, 5, &c).unwrap();
        assert_eq!(plain.data(), eps.data());
        assert_eq!(maps.len(), 32);
        assert_eq!(maps.layers(AttentionKind::Cross), (1..=16).collect::<Vec<_>>());
        assert_eq!(maps.layers(AttentionKind::SelfAttn), (1..=16).collect::<Vec<_>>());
        maps.check_row_stochastic(ROW_SUM_TOL).unwrap();
        let cross = maps.get(LayerKey::new(3, AttentionKind::Cross)).unwrap();
        assert_eq!(cross.dims(), [2, 6, 3]);
        let selfm = maps.get(LayerKey::new(3, AttentionKind::SelfAttn)).unwrap();
        assert_eq!(selfm.dims(), [2, 6, 6]);
    }

    #[test]
    fn self_injection_is_noop() {
        let (toy, z, c) = setup();
        let (eps, maps) = with_captured_attention(&toy, &z, 9, &c).unwrap();
        let injected = with_injected_attention(&toy, &z, 9, &c, &maps).unwrap();
        for (a, b) in eps.data().iter().zip(injected.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn injection_changes_output_and_validates() {
        let (toy, z, c) = setup();
        let plain = toy.predict(&z, 9, &c).unwrap();
        let mut over = AttentionMaps::new();
        over.insert(
            LayerKey::new(1, AttentionKind::Cross),
            AttentionMap::from_row(2, 6, &[1.0, 0.0, 0.0]).unwrap(),
        );
        let eps = with_injected_attention(&toy, &z, 9, &c, &over).unwrap();
        assert_ne!(eps.data(), plain.data());

        let mut bad = AttentionMaps::new();
        bad.insert(
            LayerKey::new(1, AttentionKind::Cross),
            AttentionMap::from_row(2, 6, &[0.9, 0.0, 0.0]).unwrap(),
        );
        assert!(matches!(
            with_injected_attention(&toy, &z, 9, &c, &bad),
            Err(Error::InvariantViolation(_))
        ));

        let mut wrong = AttentionMaps::new();
        wrong.insert(
            LayerKey::new(1, AttentionKind::Cross),
            AttentionMap::uniform(2, 6, 4),
        );
        assert!(matches!(
            with_injected_attention(&toy, &z, 9, &c, &wrong),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    fn sample_qkv() -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let q = vec![vec![0.1, 0.2, 0.3, 0.4], vec![-1.0, 0.5, 0.0, 2.0]];
        let k = vec![
            vec![0.3, 0.1, -0.2, 0.0],
            vec![1.0, 1.0, 1.0, 1.0],
            vec![-0.5, 0.2, 0.7, 0.1],
        ];
        let v = vec![
            vec![1.0, 2.0, 3.0, 4.0],
            vec![-1.0, 0.5, 0.25, 8.0],
            vec![0.0, -3.0, 6.0, 1.5],
        ];
        (q, k, v)
    }

    #[test]
    fn one_hot_injection_selects_value_rows() {
        let (q, k, v) = sample_qkv();
        // head 0 picks key 2 for every query, head 1 picks key 0.
        let mut data = Vec::new();
        for _ in 0..2 {
            data.extend([0.0, 0.0, 1.0]);
        }
        for _ in 0..2 {
            data.extend([1.0, 0.0, 0.0]);
        }
        let m = AttentionMap::new(2, 2, 3, data).unwrap();
        let out = attend(&q, &k, &v, 2, Some(&m)).unwrap();
        for row in &out.values {
            assert_eq!(&row[0..2], &v[2][0..2]);
            assert_eq!(&row[2..4], &v[0][2..4]);
        }
    }

    #[test]
    fn uniform_injection_averages_value_rows() {
        let (q, k, v) = sample_qkv();
        let m = AttentionMap::uniform(2, 2, 3);
        let out = attend(&q, &k, &v, 2, Some(&m)).unwrap();
        for row in &out.values {
            for (c, x) in row.iter().enumerate() {
                let mean = (v[0][c] + v[1][c] + v[2][c]) / 3.0;
                assert!((x - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn captured_map_is_softmax() {
        let (q, k, v) = sample_qkv();
        let out = attend(&q, &k, &v, 2, None).unwrap();
        out.map.check_row_stochastic(1e-12).unwrap();
        // Hand check for head 0, query 0: scores q[0..2].k[j][0..2] / sqrt(2).
        let s: Vec<f64> = k
            .iter()
            .map(|kj| (q[0][0] * kj[0] + q[0][1] * kj[1]) / 2f64.sqrt())
            .collect();
        let z: f64 = s.iter().map(|x| x.exp()).sum();
        for (j, w) in out.map.row(0, 0).iter().enumerate() {
            assert!((w - s[j].exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_wrong_prompt_width() {
        let (toy, z, _) = setup();
        let c = PromptEmbedding::new(vec![vec![1.0; 3]], None).unwrap();
        assert!(matches!(toy.predict(&z, 1, &c), Err(Error::ShapeMismatch { .. })));
    }
}
