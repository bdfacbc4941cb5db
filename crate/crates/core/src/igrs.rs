//! Iterative Grad-CAM refinement.
//!
//! Each pass queries the backend with the cumulative attention mask, builds
//! the emphasised Grad-CAM, and scores it by `itm * R`, where `R` is how
//! much of the image the refined heatmap has not yet covered. A pass whose
//! score drops below the previous one is discarded and the loop stops.

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendRequest, MaskMode};
use crate::error::{Error, Result};
use crate::heatmap::{
    bilinear_upsample, center_sigmoid, threshold_drop_mask, BinaryMask, Heatmap, ImageHeatmap,
};
use crate::parser::{ParsedExpression, SENTINEL};
use crate::pwem::{self, TokenSaliencyStack, DEFAULT_NORM_EPSILON};

/// Inserted between the sentinel and the expression in every request.
pub const PROMPT_PREFIX: &[&str] = &["there", "is", "a"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementConfig {
    pub lambda: f64,
    pub theta: f64,
    pub nu: usize,
    pub mask_mode: MaskMode,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig {
            lambda: 0.8,
            theta: 0.5,
            nu: 3,
            mask_mode: MaskMode::Feature,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::Config(format!("theta {} outside (0, 1)", self.theta)));
        }
        if self.nu < 1 {
            return Err(Error::Config("nu must be at least 1".into()));
        }
        Ok(())
    }
}

/// One backend pass, committed or not.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub t: usize,
    /// Emphasised Grad-CAM of this pass.
    pub heat: Heatmap,
    /// Drop mask of this pass alone.
    pub mask: BinaryMask,
    pub itm: f64,
    pub relevance: f64,
    pub score: f64,
    pub committed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementState {
    /// Last committed iteration (0 before any commit).
    pub t: usize,
    pub refined: Heatmap,
    pub cum_mask: BinaryMask,
    /// Scores of committed iterations.
    pub scores: Vec<f64>,
    pub trace: Vec<IterationRecord>,
    pub backend_calls: usize,
    pub stopped_early: bool,
    /// `(X, Y)` reported by the backend.
    pub image_size: (usize, usize),
}

impl RefinementState {
    fn initial(h: usize, w: usize) -> Result<Self> {
        Ok(RefinementState {
            t: 0,
            refined: Heatmap::zeros(h, w)?,
            cum_mask: BinaryMask::ones(h, w),
            scores: Vec::new(),
            trace: Vec::new(),
            backend_calls: 0,
            stopped_early: false,
            image_size: (0, 0),
        })
    }

    /// Refined heatmap at image resolution.
    pub fn final_heat(&self) -> Result<ImageHeatmap> {
        bilinear_upsample(&self.refined, self.image_size.0, self.image_size.1)
    }
}

/// `lambda * prev + (1 - lambda) * centred_sigmoid(current)`.
///
/// The result is clamped to [0, 1] to absorb rounding.
pub fn update_heatmap(prev: &Heatmap, current: &Heatmap, lambda: f64) -> Result<Heatmap> {
    if prev.dims() != current.dims() {
        return Err(Error::Shape(format!(
            "refined {:?} vs current {:?}",
            prev.dims(),
            current.dims()
        )));
    }
    let scaled = center_sigmoid(current);
    let values = prev
        .values()
        .iter()
        .zip(scaled.values())
        .map(|(p, s)| (lambda * p + (1.0 - lambda) * s).clamp(0.0, 1.0))
        .collect();
    Heatmap::new(prev.height(), prev.width(), values)
}

/// Intersects the running mask with this pass's drop mask.
pub fn update_mask(prev: &BinaryMask, current_heat: &Heatmap, theta: f64) -> Result<BinaryMask> {
    if prev.dims() != current_heat.dims() {
        return Err(Error::Shape(format!(
            "mask {:?} vs heat {:?}",
            prev.dims(),
            current_heat.dims()
        )));
    }
    prev.and(&threshold_drop_mask(current_heat, theta)?)
}

/// Mean of `1 - v` over the image-resolution map.
pub fn relevance_score(refined_prev: &ImageHeatmap) -> f64 {
    let n = refined_prev.len() as f64;
    refined_prev.values().iter().map(|v| 1.0 - v).sum::<f64>() / n
}

pub fn soft_itm(itm: f64, relevance: f64) -> f64 {
    itm * relevance
}

/// Sentinel, prompt prefix, then the expression words.
pub fn request_tokens(parsed: &ParsedExpression) -> Vec<String> {
    let mut tokens = Vec::with_capacity(parsed.tokens.len() + PROMPT_PREFIX.len());
    tokens.push(SENTINEL.to_string());
    tokens.extend(PROMPT_PREFIX.iter().map(|s| s.to_string()));
    tokens.extend(parsed.tokens.iter().skip(1).map(|t| t.surface.clone()));
    tokens
}

/// Tensor row for each parsed token, skipping the prefix rows.
pub fn token_rows(parsed: &ParsedExpression) -> Vec<usize> {
    (0..parsed.tokens.len())
        .map(|i| if i == 0 { 0 } else { i + PROMPT_PREFIX.len() })
        .collect()
}

pub fn run_refinement(
    backend: &mut dyn Backend,
    parsed: &ParsedExpression,
    image: &str,
    cfg: &RefinementConfig,
) -> Result<RefinementState> {
    cfg.validate()?;
    let (h, w) = backend
        .latent_grid(image)
        .map_err(|source| Error::Backend { iteration: 0, source })?;
    let mut state = RefinementState::initial(h, w)?;
    let tokens = request_tokens(parsed);
    let rows = token_rows(parsed);

    for t in 1..=cfg.nu {
        let request = BackendRequest {
            image: image.to_string(),
            tokens: tokens.clone(),
            mask: state.cum_mask.clone(),
            mask_mode: cfg.mask_mode,
        };
        state.backend_calls += 1;
        let response = backend
            .forward(&request)
            .and_then(|r| r.validate(&request).map(|_| r))
            .map_err(|source| Error::Backend { iteration: t, source })?;
        if t == 1 {
            state.image_size = response.image_size;
        } else if response.image_size != state.image_size {
            return Err(Error::Shape(format!(
                "image size changed from {:?} to {:?} at iteration {t}",
                state.image_size, response.image_size
            )));
        }

        let stack = TokenSaliencyStack::new(response.attention, response.gradients, rows.clone())?;
        let heat = pwem::augment(&stack, parsed, DEFAULT_NORM_EPSILON)?.combined;
        let relevance = relevance_score(&state.final_heat()?);
        let score = soft_itm(response.itm, relevance);
        let mut record = IterationRecord {
            t,
            mask: threshold_drop_mask(&heat, cfg.theta)?,
            heat,
            itm: response.itm,
            relevance,
            score,
            committed: false,
        };
        if t >= 2 && state.scores.last().is_some_and(|prev| score < *prev) {
            log::debug!("{image}: score fell to {score:.6} at t={t}, keeping t={}", t - 1);
            state.trace.push(record);
            state.stopped_early = true;
            break;
        }
        state.refined = update_heatmap(&state.refined, &record.heat, cfg.lambda)?;
        state.cum_mask = state.cum_mask.and(&record.mask)?;
        state.scores.push(score);
        state.t = t;
        record.committed = true;
        state.trace.push(record);
    }
    Ok(state)
}
