//! Privacy filter and knowledge-base projection on latent segments.
//!
//! The filter pushes the private sub-vector `L_S` a guaranteed distance away
//! from its original value: it adds a bias of norm `λ1·‖L_S‖·(1 + δ)` in a
//! random direction, so `‖L'_S − L_S‖ > λ1·‖L_S‖` (unit threshold when
//! `L_S = 0`). The projection then walks `L'_S` toward the knowledge-base mean
//! with geometrically growing steps until the configured predicate holds.
//! Coordinates outside the private segments are never touched.

use crate::error::{Error, Result};
use crate::generator::LatentCode;
use crate::nn::Rng;
use crate::scene::SceneSpec;

/// Dataset-average latent code.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    pub mean: LatentCode,
    pub source_count: usize,
}

pub fn build_kb(latents: &[LatentCode]) -> Result<KnowledgeBase> {
    let first = latents
        .first()
        .ok_or_else(|| Error::InvalidInput("knowledge base needs at least one latent".into()))?;
    let dim = first.dim();
    let mut sum = vec![0.0; dim];
    for (i, l) in latents.iter().enumerate() {
        if l.dim() != dim {
            return Err(Error::dims(format!("latent {i}"), dim, l.dim()));
        }
        for (s, v) in sum.iter_mut().zip(&l.0) {
            *s += v;
        }
    }
    let n = latents.len() as f64;
    let mean = LatentCode(sum.into_iter().map(|s| s / n).collect());
    if mean.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "knowledge-base mean".into(),
        });
    }
    Ok(KnowledgeBase {
        mean,
        source_count: latents.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Predicate {
    /// `d(P_S, L'_S) < λ2 · d(P_S, Lm_S)`, the literal operand order. Holds at zero bias
    /// whenever `L' ≠ Lm`.
    Literal,
    /// `d(P_S, Lm_S) < λ2 · d(P_S, L'_S)`: stop once `P` is much closer to
    /// the mean than to the filtered code.
    TowardMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyConfig {
    pub private_segments: Vec<String>,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Multiplicative growth of the projection bias per step.
    pub growth: f64,
    /// First nonzero projection bias magnitude.
    pub initial_bias: f64,
    pub max_steps: usize,
    pub predicate: Predicate,
    /// Filter bias overshoot `δ` beyond the `λ1` threshold.
    pub overshoot: f64,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            private_segments: vec!["eyes".to_string()],
            lambda1: 0.5,
            lambda2: 0.5,
            growth: 1.2,
            initial_bias: 1e-3,
            max_steps: 200,
            predicate: Predicate::TowardMean,
            overshoot: 0.1,
        }
    }
}

impl PrivacyConfig {
    pub fn validate(&self, spec: &SceneSpec) -> Result<()> {
        if self.private_segments.is_empty() {
            return Err(Error::InvalidInput("no private segments configured".into()));
        }
        for s in &self.private_segments {
            if spec.segment_range(s).is_none() {
                return Err(Error::InvalidInput(format!("unknown segment `{s}`")));
            }
        }
        if !(self.lambda1 > 0.0) {
            return Err(Error::InvalidInput("lambda1 must be positive".into()));
        }
        if !(self.lambda2 > 0.0 && self.lambda2 < 1.0) {
            return Err(Error::InvalidInput("lambda2 must lie in (0, 1): λ2 is less than 1".into()));
        }
        if !(self.growth > 1.0) || !(self.initial_bias > 0.0) || !(self.overshoot > 0.0) {
            return Err(Error::InvalidInput("growth > 1, initial_bias > 0 and overshoot > 0 required".into()));
        }
        Ok(())
    }

    /// Latent indices covered by the private segments, in layout order.
    pub fn private_indices(&self, spec: &SceneSpec) -> Result<Vec<usize>> {
        self.validate(spec)?;
        let mut idx: Vec<usize> = self
            .private_segments
            .iter()
            .flat_map(|s| spec.segment_range(s).expect("validated"))
            .collect();
        idx.sort_unstable();
        idx.dedup();
        Ok(idx)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn gather(l: &LatentCode, idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| l.0[i]).collect()
}

fn check_dim(l: &LatentCode, spec: &SceneSpec) -> Result<()> {
    if l.dim() != spec.factor_dim() {
        return Err(Error::dims("latent code", spec.factor_dim(), l.dim()));
    }
    Ok(())
}

/// Distance threshold the filter must exceed for private part `l_s`.
pub fn filter_threshold(l_s: &[f64], lambda1: f64) -> f64 {
    let n = norm(l_s);
    if n > 0.0 {
        lambda1 * n
    } else {
        lambda1
    }
}

/// Adds a random-direction bias to the private segments of `l`.
pub fn privacy_filter(l: &LatentCode, spec: &SceneSpec, cfg: &PrivacyConfig, rng: &mut Rng) -> Result<LatentCode> {
    check_dim(l, spec)?;
    let idx = cfg.private_indices(spec)?;
    let l_s = gather(l, &idx);
    let magnitude = filter_threshold(&l_s, cfg.lambda1) * (1.0 + cfg.overshoot);
    let dir = rng.unit_vector(idx.len());
    let mut out = l.clone();
    for (&i, d) in idx.iter().zip(dir) {
        out.0[i] += magnitude * d;
    }
    Ok(out)
}

/// Pulls the private segments of `filtered` toward the knowledge-base mean
/// until the configured predicate holds. Tries zero bias first, then
/// `ε, γε, γ²ε, …` for at most `max_steps` growth steps.
pub fn kb_project(filtered: &LatentCode, kb: &KnowledgeBase, spec: &SceneSpec, cfg: &PrivacyConfig) -> Result<LatentCode> {
    check_dim(filtered, spec)?;
    check_dim(&kb.mean, spec)?;
    let idx = cfg.private_indices(spec)?;
    let f_s = gather(filtered, &idx);
    let m_s = gather(&kb.mean, &idx);
    let gap: Vec<f64> = m_s.iter().zip(&f_s).map(|(m, f)| m - f).collect();
    let gap_norm = norm(&gap);
    let dir: Vec<f64> = if gap_norm > 0.0 {
        gap.iter().map(|g| g / gap_norm).collect()
    } else {
        vec![0.0; gap.len()]
    };

    let candidate = |bias: f64| -> Vec<f64> { f_s.iter().zip(&dir).map(|(f, d)| f + bias * d).collect() };
    let holds = |p: &[f64]| -> (bool, f64, f64) {
        let to_mean = dist(p, &m_s);
        let to_filtered = dist(p, &f_s);
        let ok = match cfg.predicate {
            Predicate::TowardMean => to_mean < cfg.lambda2 * to_filtered,
            Predicate::Literal => to_filtered < cfg.lambda2 * to_mean,
        };
        (ok, to_mean, to_filtered)
    };

    let mut last = (f_s.clone(), 0.0, 0.0, 0.0);
    for step in 0..=cfg.max_steps {
        let bias = if step == 0 {
            0.0
        } else {
            cfg.initial_bias * cfg.growth.powi(step as i32 - 1)
        };
        let p = candidate(bias);
        let (ok, to_mean, to_filtered) = holds(&p);
        if ok {
            let mut out = filtered.clone();
            for (&i, v) in idx.iter().zip(p) {
                out.0[i] = v;
            }
            return Ok(out);
        }
        last = (p, bias, to_mean, to_filtered);
    }
    let mut full = filtered.clone();
    for (&i, v) in idx.iter().zip(&last.0) {
        full.0[i] = *v;
    }
    Err(Error::ProjectionExhausted {
        steps: cfg.max_steps,
        last_candidate: full.0,
        last_bias: last.1,
        dist_to_mean: last.2,
        dist_to_filtered: last.3,
    })
}

/// Filter followed by projection.
pub fn protect(
    l: &LatentCode,
    kb: &KnowledgeBase,
    spec: &SceneSpec,
    cfg: &PrivacyConfig,
    rng: &mut Rng,
) -> Result<(LatentCode, LatentCode)> {
    let filtered = privacy_filter(l, spec, cfg, rng)?;
    let projected = kb_project(&filtered, kb, spec, cfg)?;
    Ok((filtered, projected))
}
