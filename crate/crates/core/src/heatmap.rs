//! Dense map arithmetic shared by every stage of the engine.
//!
//! All maps are row-major. A [`Tensor3`] stacks one `height x width` map per
//! text token (token-major). Maps at the backend's latent resolution and maps
//! at image resolution share the [`Heatmap`] type; [`ImageHeatmap`] is an
//! alias used where the image-resolution reading matters.

use crate::error::{Error, Result};

/// Default tolerance used when collecting peak coordinates.
pub const DEFAULT_TIE_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    tokens: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Tensor3 {
    pub fn new(tokens: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if tokens == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "tensor dimensions must be positive, got {tokens}x{height}x{width}"
            )));
        }
        if values.len() != tokens * height * width {
            return Err(Error::Shape(format!(
                "expected {} values for {tokens}x{height}x{width}, got {}",
                tokens * height * width,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite tensor value at offset {pos}")));
        }
        Ok(Tensor3 {
            tokens,
            height,
            width,
            values,
        })
    }

    pub fn zeros(tokens: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(tokens, height, width, vec![0.0; tokens * height * width])
    }

    /// Stacks maps of identical shape along a new token axis.
    pub fn from_rows(rows: &[Heatmap]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Input("cannot stack zero rows".into()))?;
        let mut values = Vec::with_capacity(rows.len() * first.len());
        for row in rows {
            if row.dims() != first.dims() {
                return Err(Error::Shape(format!(
                    "row shape {:?} differs from {:?}",
                    row.dims(),
                    first.dims()
                )));
            }
            values.extend_from_slice(row.values());
        }
        Self::new(rows.len(), first.height, first.width, values)
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(tokens, height, width)`
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.tokens, self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, token: usize, row: usize, col: usize) -> f64 {
        self.values[(token * self.height + row) * self.width + col]
    }

    pub fn row(&self, token: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[token * n..(token + 1) * n]
    }

    pub fn row_map(&self, token: usize) -> Heatmap {
        Heatmap {
            height: self.height,
            width: self.width,
            values: self.row(token).to_vec(),
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.height * self.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

/// A heatmap whose grid is the original image (`width = X`, `height = Y`).
pub type ImageHeatmap = Heatmap;

impl Heatmap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "map dimensions must be positive, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "expected {} values for {height}x{width}, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite map value at offset {pos}")));
        }
        Ok(Heatmap {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::filled(height, width, 0.0)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(height, width)`
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Row-major `(x, y)` of the first maximum.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Heatmap {
        Heatmap {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!(
                "expected {} mask cells for {height}x{width}, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(BinaryMask {
            height,
            width,
            bits,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![value; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self::filled(height, width, true)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, false)
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        BinaryMask {
            height,
            width,
            bits,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn all(&self) -> bool {
        self.bits.iter().all(|b| *b)
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "mask {:?} and {:?} differ",
                self.dims(),
                other.dims()
            )));
        }
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect(),
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Grad-CAM per token: attention times the positive part of the gradient.
pub fn compose_gradcam(attention: &Tensor3, gradients: &Tensor3) -> Result<Tensor3> {
    if attention.dims() != gradients.dims() {
        return Err(Error::Shape(format!(
            "attention {:?} and gradients {:?} differ",
            attention.dims(),
            gradients.dims()
        )));
    }
    let values = attention
        .values
        .iter()
        .zip(&gradients.values)
        .map(|(a, g)| a * g.max(0.0))
        .collect();
    Ok(Tensor3 {
        tokens: attention.tokens,
        height: attention.height,
        width: attention.width,
        values,
    })
}

/// Averages a token stack into a single map.
pub fn mean_over_tokens(stack: &Tensor3) -> Heatmap {
    let n = stack.height * stack.width;
    let mut acc = vec![0.0; n];
    for row in stack.rows() {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    let scale = stack.tokens as f64;
    Heatmap {
        height: stack.height,
        width: stack.width,
        values: acc.into_iter().map(|v| v / scale).collect(),
    }
}

/// Logistic squashing after subtracting the map mean, so cells above the mean
/// land above 0.5 regardless of the raw value scale.
pub fn center_sigmoid(map: &Heatmap) -> Heatmap {
    let mean = map.mean();
    map.map(|v| sigmoid(v - mean))
}

/// Binary keep-mask: 0 where the centred sigmoid reaches `threshold`, 1 elsewhere.
pub fn threshold_drop_mask(map: &Heatmap, threshold: f64) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let scaled = center_sigmoid(map);
    Ok(BinaryMask {
        height: map.height,
        width: map.width,
        bits: scaled.values.iter().map(|v| *v < threshold).collect(),
    })
}

/// Corner-aligned bilinear resize to `width x height`.
///
/// The first and last output samples coincide with the first and last input
/// cells along each axis. A single output sample along an axis reads the
/// input centre.
pub fn bilinear_upsample(map: &Heatmap, width: usize, height: usize) -> Result<ImageHeatmap> {
    if width == 0 || height == 0 {
        return Err(Error::Input(format!(
            "target size must be positive, got {width}x{height}"
        )));
    }
    let xs = sample_positions(map.width, width);
    let ys = sample_positions(map.height, height);
    let mut values = Vec::with_capacity(width * height);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let v00 = map.get(y0, x0);
            let v01 = map.get(y0, x1);
            let v10 = map.get(y1, x0);
            let v11 = map.get(y1, x1);
            let v = v00 * (1.0 - fx) * (1.0 - fy)
                + v01 * fx * (1.0 - fy)
                + v10 * (1.0 - fx) * fy
                + v11 * fx * fy;
            // keep rounding from leaving the corner hull
            let lo = v00.min(v01).min(v10).min(v11);
            let hi = v00.max(v01).max(v10).max(v11);
            values.push(v.clamp(lo, hi));
        }
    }
    Ok(Heatmap {
        height,
        width,
        values,
    })
}

fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if src == 1 {
                return (0, 0, 0.0);
            }
            let pos = if dst == 1 {
                (src - 1) as f64 / 2.0
            } else {
                (i * (src - 1)) as f64 / (dst - 1) as f64
            };
            let i0 = (pos.floor() as usize).min(src - 2);
            (i0, i0 + 1, pos - i0 as f64)
        })
        .collect()
}

/// Every `(x, y)` whose value is within `tie_epsilon` of the maximum, in
/// row-major order.
pub fn argmax_coords(map: &ImageHeatmap, tie_epsilon: f64) -> Vec<(usize, usize)> {
    let floor = map.max() - tie_epsilon.max(0.0);
    map.values
        .iter()
        .enumerate()
        .filter(|(_, v)| **v >= floor)
        .map(|(i, _)| (i % map.width, i / map.width))
        .collect()
}
