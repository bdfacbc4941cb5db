//! Primary-word emphasis.
//!
//! Builds the augmented Grad-CAM from per-token attention and raw gradients:
//! a local branch that modulates the primary word's Grad-CAM with unit-norm
//! contrast maps against each context word, and a global branch that repeats
//! the primary word's Grad-CAM once per context word before averaging.

use crate::error::{Error, Result};
use crate::heatmap::{Heatmap, Tensor3};
use crate::parser::ParsedExpression;

/// Guard for the contrast-map norm.
pub const DEFAULT_NORM_EPSILON: f64 = 1e-8;

/// Backend tensors plus the row holding each parsed token.
#[derive(Debug, Clone)]
pub struct TokenSaliencyStack {
    attention: Tensor3,
    gradients: Tensor3,
    /// `token_map[i]` is the tensor row of parsed token `i`.
    token_map: Vec<usize>,
}

impl TokenSaliencyStack {
    pub fn new(attention: Tensor3, gradients: Tensor3, token_map: Vec<usize>) -> Result<Self> {
        if attention.dims() != gradients.dims() {
            return Err(Error::Shape(format!(
                "attention {:?} and gradients {:?} differ",
                attention.dims(),
                gradients.dims()
            )));
        }
        if attention.values().iter().any(|v| *v < 0.0) {
            return Err(Error::Input("attention must be non-negative".into()));
        }
        if let Some(bad) = token_map.iter().find(|r| **r >= attention.tokens()) {
            return Err(Error::Shape(format!(
                "token row {bad} outside a stack of {} rows",
                attention.tokens()
            )));
        }
        Ok(TokenSaliencyStack {
            attention,
            gradients,
            token_map,
        })
    }

    pub fn attention(&self) -> &Tensor3 {
        &self.attention
    }

    pub fn gradients(&self) -> &Tensor3 {
        &self.gradients
    }

    pub fn token_map(&self) -> &[usize] {
        &self.token_map
    }

    fn row_of(&self, token: usize) -> Result<usize> {
        self.token_map.get(token).copied().ok_or_else(|| {
            Error::Shape(format!(
                "parsed token {token} has no row (map covers {})",
                self.token_map.len()
            ))
        })
    }

    fn attention_row(&self, token: usize) -> Result<&[f64]> {
        Ok(self.attention.row(self.row_of(token)?))
    }

    fn positive_gradient_row(&self, token: usize) -> Result<Vec<f64>> {
        Ok(self
            .gradients
            .row(self.row_of(token)?)
            .iter()
            .map(|g| g.max(0.0))
            .collect())
    }

    fn gradcam_row(&self, token: usize) -> Result<Vec<f64>> {
        let a = self.attention_row(token)?;
        let g = self.positive_gradient_row(token)?;
        Ok(a.iter().zip(&g).map(|(a, g)| a * g).collect())
    }

    fn grid(&self) -> (usize, usize) {
        (self.attention.height(), self.attention.width())
    }
}

#[derive(Debug, Clone)]
pub struct AugmentedGradcam {
    /// One row per context token; `None` when there are no context tokens.
    pub local: Option<Tensor3>,
    /// `|W| + N_c` rows.
    pub global: Tensor3,
    pub combined: Heatmap,
}

/// Local spatial branch: one row per context token `c`,
/// `D_c * G_m+ * H_m` with `D_c = (A_m - A_c) / max(||A_m - A_c||_2, eps)`.
pub fn local_augment(
    stack: &TokenSaliencyStack,
    parsed: &ParsedExpression,
    eps: f64,
) -> Result<Tensor3> {
    if parsed.context.is_empty() {
        return Err(Error::Degenerate(
            "local augmentation needs at least one context token".into(),
        ));
    }
    let a_main = stack.attention_row(parsed.primary)?;
    let g_main = stack.positive_gradient_row(parsed.primary)?;
    let h_main: Vec<f64> = a_main.iter().zip(&g_main).map(|(a, g)| a * g).collect();
    let modulator: Vec<f64> = g_main.iter().zip(&h_main).map(|(g, h)| g * h).collect();

    let (height, width) = stack.grid();
    let mut values = Vec::with_capacity(parsed.context.len() * height * width);
    for &c in &parsed.context {
        let a_ctx = stack.attention_row(c)?;
        let diff: Vec<f64> = a_main.iter().zip(a_ctx).map(|(m, c)| m - c).collect();
        let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt().max(eps);
        values.extend(diff.iter().zip(&modulator).map(|(d, m)| d / norm * m));
    }
    Tensor3::new(parsed.context.len(), height, width, values)
}

/// Global token branch: Grad-CAM rows for every effective token followed by
/// `N_c` extra copies of the primary word's row.
pub fn global_augment(stack: &TokenSaliencyStack, parsed: &ParsedExpression) -> Result<Tensor3> {
    if parsed.effective.is_empty() {
        return Err(Error::Input("effective token set is empty".into()));
    }
    let (height, width) = stack.grid();
    let rows = parsed.effective.len() + parsed.context.len();
    let mut values = Vec::with_capacity(rows * height * width);
    for &k in &parsed.effective {
        values.extend(stack.gradcam_row(k)?);
    }
    let main = stack.gradcam_row(parsed.primary)?;
    for _ in 0..parsed.context.len() {
        values.extend_from_slice(&main);
    }
    Tensor3::new(rows, height, width, values)
}

/// Mean over the concatenation `[global, local]` along the token axis.
///
/// Each cell sums its values in ascending order, so the result does not
/// depend on row order.
pub fn aggregate(local: Option<&Tensor3>, global: &Tensor3) -> Result<Heatmap> {
    let (height, width) = (global.height(), global.width());
    if let Some(l) = local {
        if (l.height(), l.width()) != (height, width) {
            return Err(Error::Shape(format!(
                "local grid {}x{} differs from global {height}x{width}",
                l.height(),
                l.width()
            )));
        }
    }
    let sources: Vec<&Tensor3> = std::iter::once(global).chain(local).collect();
    let rows: usize = sources.iter().map(|t| t.tokens()).sum();
    let mut cell = Vec::with_capacity(rows);
    let mut values = Vec::with_capacity(height * width);
    for idx in 0..height * width {
        cell.clear();
        for t in &sources {
            cell.extend(t.rows().map(|r| r[idx]));
        }
        cell.sort_by(f64::total_cmp);
        values.push(cell.iter().sum::<f64>() / rows as f64);
    }
    Heatmap::new(height, width, values)
}

/// Full emphasis pass. With no context tokens the local branch is skipped.
pub fn augment(
    stack: &TokenSaliencyStack,
    parsed: &ParsedExpression,
    eps: f64,
) -> Result<AugmentedGradcam> {
    let global = global_augment(stack, parsed)?;
    let local = match local_augment(stack, parsed, eps) {
        Ok(t) => Some(t),
        Err(Error::Degenerate(_)) => None,
        Err(e) => return Err(e),
    };
    let combined = aggregate(local.as_ref(), &global)?;
    Ok(AugmentedGradcam {
        local,
        global,
        combined,
    })
}
