//! Deterministic Gaussian-blob scene model.
//!
//! Every blob is an isotropic Gaussian in image coordinates, sampled at the
//! centres of the latent cells. A token attends to the blobs whose tags it
//! names; tokens naming no blob get a small uniform floor. Gradients carry
//! the sign of `2 * salience - 1` of the strongest contributing blob, so weak
//! blobs and unmatched tokens produce negative gradients.
//!
//! The matching score credits only blobs consistent with every content word
//! of the request (via tags or relation words). It is the attention share of
//! those blobs, scaled by how much of each one is still visible.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, BackendFactory, BackendRequest, BackendResponse, MaskMode};
use crate::error::{Error, Result};
use crate::heatmap::Tensor3;

/// Uniform raw attention given to tokens that name no blob.
pub const UNMATCHED_FLOOR: f64 = 1e-4;

fn default_bias() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    /// `[x, y]` in pixels.
    pub center: [f64; 2],
    /// Spatial standard deviation in pixels.
    pub sigma: f64,
    pub salience: f64,
    /// Lemmas that ground attention on this blob.
    pub tags: Vec<String>,
    /// Lemmas the matching score accepts for this blob without attending to
    /// it (typically positional words).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub relations: Vec<String>,
    /// Multiplier applied while the request mask is all ones.
    #[serde(default = "default_bias")]
    pub distractor_bias: f64,
}

impl Blob {
    fn gaussian(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.center[0];
        let dy = y - self.center[1];
        (-(dx * dx + dy * dy) / (2.0 * self.sigma * self.sigma)).exp()
    }

    fn grounds(&self, token: &str) -> bool {
        self.tags.iter().any(|t| word_matches(t, token))
    }

    fn accepts(&self, token: &str) -> bool {
        self.grounds(token) || self.relations.iter().any(|t| word_matches(t, token))
    }
}

fn word_matches(lemma: &str, token: &str) -> bool {
    token == lemma
        || token
            .strip_prefix(lemma)
            .is_some_and(|rest| rest == "s" || rest == "es")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub image: String,
    /// `[X, Y]` = (width, height) in pixels.
    pub image_size: [usize; 2],
    /// `[h, w]` latent grid.
    pub latent: [usize; 2],
    pub blobs: Vec<Blob>,
}

impl SyntheticScene {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Input(format!("scene {:?}: {m}", self.image)));
        if self.image_size.contains(&0) || self.latent.contains(&0) {
            return bad("image size and latent grid must be positive".into());
        }
        if self.blobs.is_empty() {
            return bad("needs at least one blob".into());
        }
        for (i, b) in self.blobs.iter().enumerate() {
            if b.tags.is_empty() {
                return bad(format!("blob {i} has no tags"));
            }
            if !(b.salience > 0.0 && b.salience <= 1.0) {
                return bad(format!("blob {i} salience {} outside (0, 1]", b.salience));
            }
            if !(b.sigma > 0.0 && b.sigma.is_finite()) {
                return bad(format!("blob {i} sigma must be positive"));
            }
            if !(b.distractor_bias > 0.0 && b.distractor_bias.is_finite()) {
                return bad(format!("blob {i} bias must be positive"));
            }
            if !b.center.iter().all(|c| c.is_finite()) {
                return bad(format!("blob {i} centre is not finite"));
            }
        }
        Ok(())
    }

    /// Pixel coordinates of latent cell centres, row-major.
    fn cell_centres(&self) -> Vec<(f64, f64)> {
        let [x_px, y_px] = self.image_size;
        let [h, w] = self.latent;
        let mut out = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                out.push((
                    (j as f64 + 0.5) * x_px as f64 / w as f64,
                    (i as f64 + 0.5) * y_px as f64 / h as f64,
                ));
            }
        }
        out
    }

    /// Latent cell index holding the blob centre.
    fn centre_cell(&self, blob: &Blob) -> usize {
        let [x_px, y_px] = self.image_size;
        let [h, w] = self.latent;
        let col = ((blob.center[0] * w as f64 / x_px as f64).floor().max(0.0) as usize).min(w - 1);
        let row = ((blob.center[1] * h as f64 / y_px as f64).floor().max(0.0) as usize).min(h - 1);
        row * w + col
    }

    /// Evaluates the scene for one request.
    pub fn forward(&self, request: &BackendRequest) -> std::result::Result<BackendResponse, BackendError> {
        let [h, w] = self.latent;
        if request.tokens.is_empty() {
            return Err(BackendError::Shape("request carries no tokens".into()));
        }
        if request.mask.dims() != (h, w) {
            return Err(BackendError::Shape(format!(
                "mask {:?} does not match latent grid {:?}",
                request.mask.dims(),
                (h, w)
            )));
        }
        let mask = &request.mask;
        let keep = mask.bits();
        let full = mask.all();
        let cells = self.cell_centres();
        let n = cells.len();

        // visibility[b][c]: whether blob b contributes at cell c
        let visibility: Vec<Vec<bool>> = self
            .blobs
            .iter()
            .map(|b| match request.mask_mode {
                MaskMode::Feature => keep.to_vec(),
                MaskMode::Image => vec![keep[self.centre_cell(b)]; n],
            })
            .collect();
        let floor_visible: Vec<bool> = match request.mask_mode {
            MaskMode::Feature => keep.to_vec(),
            MaskMode::Image => vec![true; n],
        };
        let gauss: Vec<Vec<f64>> = self
            .blobs
            .iter()
            .map(|b| cells.iter().map(|&(x, y)| b.gaussian(x, y)).collect())
            .collect();
        let weight: Vec<f64> = self
            .blobs
            .iter()
            .map(|b| b.salience * if full { b.distractor_bias } else { 1.0 })
            .collect();

        let mut attention = Vec::with_capacity(request.tokens.len() * n);
        let mut gradients = Vec::with_capacity(request.tokens.len() * n);
        for token in &request.tokens {
            let matched: Vec<usize> = (0..self.blobs.len())
                .filter(|&b| self.blobs[b].grounds(token))
                .collect();
            let mut raw = vec![0.0; n];
            let mut top_salience = vec![0.0; n];
            if matched.is_empty() {
                for c in 0..n {
                    if floor_visible[c] {
                        raw[c] = UNMATCHED_FLOOR;
                    }
                }
            } else {
                for c in 0..n {
                    let mut best = 0.0;
                    for &b in &matched {
                        if !visibility[b][c] {
                            continue;
                        }
                        let v = weight[b] * gauss[b][c];
                        raw[c] += v;
                        if v > best {
                            best = v;
                            top_salience[c] = self.blobs[b].salience;
                        }
                    }
                }
            }
            let total: f64 = raw.iter().sum();
            for c in 0..n {
                let a = if total > 0.0 { raw[c] / total } else { 0.0 };
                attention.push(a);
                gradients.push(a * (2.0 * top_salience[c] - 1.0));
            }
        }

        let itm = self.matching_score(&request.tokens, &visibility, &gauss, &weight);
        let rows = request.tokens.len();
        let shape_err = |e: Error| BackendError::InvariantViolation(e.to_string());
        Ok(BackendResponse {
            attention: Tensor3::new(rows, h, w, attention).map_err(shape_err)?,
            gradients: Tensor3::new(rows, h, w, gradients).map_err(shape_err)?,
            itm,
            latent: (h, w),
            image_size: (self.image_size[0], self.image_size[1]),
        })
    }

    fn matching_score(
        &self,
        tokens: &[String],
        visibility: &[Vec<bool>],
        gauss: &[Vec<f64>],
        weight: &[f64],
    ) -> f64 {
        let content: Vec<&str> = tokens
            .iter()
            .map(String::as_str)
            .filter(|t| self.blobs.iter().any(|b| b.accepts(t)))
            .collect();
        if content.is_empty() {
            return 0.0;
        }
        let mut evidence = Vec::with_capacity(self.blobs.len());
        let mut retained = Vec::with_capacity(self.blobs.len());
        for (b, blob) in self.blobs.iter().enumerate() {
            let total: f64 = gauss[b].iter().sum();
            let kept: f64 = gauss[b]
                .iter()
                .zip(&visibility[b])
                .filter(|(_, v)| **v)
                .map(|(g, _)| g)
                .sum();
            let attended = content.iter().any(|t| blob.grounds(t));
            evidence.push(if attended { weight[b] * kept } else { 0.0 });
            retained.push(if total > 0.0 { kept / total } else { 0.0 });
        }
        let total_evidence: f64 = evidence.iter().sum();
        if total_evidence <= 0.0 {
            return 0.0;
        }
        let score: f64 = self
            .blobs
            .iter()
            .enumerate()
            .filter(|(_, blob)| content.iter().all(|t| blob.accepts(t)))
            .map(|(b, _)| evidence[b] / total_evidence * retained[b])
            .sum();
        score.clamp(0.0, 1.0)
    }
}

/// Scene file: `{"scenes": [SyntheticScene, ...]}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneLibrary {
    pub scenes: Vec<SyntheticScene>,
}

impl SceneLibrary {
    pub fn load(path: &Path) -> Result<SceneLibrary> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lib: SceneLibrary =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        for scene in &lib.scenes {
            scene.validate().map_err(|e| Error::format(path, e.to_string()))?;
        }
        Ok(lib)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// In-process backend over a set of scenes keyed by image id.
#[derive(Debug, Clone, Default)]
pub struct SyntheticBackend {
    scenes: BTreeMap<String, SyntheticScene>,
}

impl SyntheticBackend {
    pub fn new(scenes: impl IntoIterator<Item = SyntheticScene>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for scene in scenes {
            scene.validate()?;
            map.insert(scene.image.clone(), scene);
        }
        Ok(SyntheticBackend { scenes: map })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::new(SceneLibrary::load(path)?.scenes)
    }

    pub fn scene(&self, image: &str) -> Option<&SyntheticScene> {
        self.scenes.get(image)
    }

    fn lookup(&self, image: &str) -> std::result::Result<&SyntheticScene, BackendError> {
        self.scenes
            .get(image)
            .ok_or_else(|| BackendError::UnknownImage(image.to_string()))
    }
}

impl Backend for SyntheticBackend {
    fn latent_grid(&mut self, image: &str) -> std::result::Result<(usize, usize), BackendError> {
        let [h, w] = self.lookup(image)?.latent;
        Ok((h, w))
    }

    fn forward(&mut self, request: &BackendRequest) -> std::result::Result<BackendResponse, BackendError> {
        self.lookup(&request.image)?.forward(request)
    }
}

impl BackendFactory for SyntheticBackend {
    fn connect(&self) -> std::result::Result<Box<dyn Backend + Send>, BackendError> {
        Ok(Box::new(self.clone()))
    }
}
