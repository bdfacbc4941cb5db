//! Cross-attention backend contract.
//!
//! A backend receives the prompt-prefixed token list and a binary mask on its
//! latent grid, and returns per-token attention maps, raw (unclamped)
//! gradients of the image-text-matching score, and the score itself.

mod bridge;
mod synthetic;
pub mod wire;

use std::fmt;
use std::io;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bridge::{serve, BridgeClient, BridgeFactory, ServerInfo, DEFAULT_TIMEOUT};
pub use synthetic::{Blob, SceneLibrary, SyntheticBackend, SyntheticScene, UNMATCHED_FLOOR};

use crate::heatmap::{BinaryMask, Tensor3};

/// Slack allowed on per-row attention mass.
pub const ATTENTION_MASS_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("unknown image {0:?}")]
    UnknownImage(String),

    #[error("request shape mismatch: {0}")]
    Shape(String),

    #[error("timed out waiting for the bridge")]
    Timeout,

    #[error("malformed frame: {0}")]
    MalformedFrame(String),

    #[error("response violates the backend contract: {0}")]
    InvariantViolation(String),

    #[error("server error: {0}")]
    Remote(String),

    #[error("transport failure: {0}")]
    Transport(#[source] io::Error),

    #[error("invalid backend spec: {0}")]
    Spec(String),
}

/// Where the refinement mask is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Mask the cross-attention key/value grid.
    #[default]
    Feature,
    /// Zero image pixels under the mask before encoding.
    Image,
}

impl MaskMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::Feature => "feature",
            MaskMode::Image => "image",
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "feature" => Ok(MaskMode::Feature),
            "image" => Ok(MaskMode::Image),
            other => Err(format!("unknown mask mode {other:?} (expected feature|image)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendRequest {
    pub image: String,
    pub tokens: Vec<String>,
    /// 1 keeps a latent cell, 0 masks it.
    pub mask: BinaryMask,
    pub mask_mode: MaskMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendResponse {
    /// One head-reduced row per request token.
    pub attention: Tensor3,
    /// Raw gradients of the matching score with respect to `attention`.
    pub gradients: Tensor3,
    pub itm: f64,
    /// `(h, w)`
    pub latent: (usize, usize),
    /// `(X, Y)` = (width, height) in pixels.
    pub image_size: (usize, usize),
}

impl BackendResponse {
    /// Checks the response against the contract for `request`.
    pub fn validate(&self, request: &BackendRequest) -> Result<(), BackendError> {
        let violation = |m: String| Err(BackendError::InvariantViolation(m));
        let (h, w) = self.latent;
        let expected = (request.tokens.len(), h, w);
        if self.attention.dims() != expected || self.gradients.dims() != expected {
            return violation(format!(
                "tensors {:?}/{:?} do not match {expected:?}",
                self.attention.dims(),
                self.gradients.dims()
            ));
        }
        if request.mask.dims() != (h, w) {
            return violation(format!(
                "latent grid {:?} differs from request mask {:?}",
                (h, w),
                request.mask.dims()
            ));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return violation("image size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.itm) {
            return violation(format!("itm {} outside [0, 1]", self.itm));
        }
        if let Some(v) = self.attention.values().iter().find(|v| **v < 0.0) {
            return violation(format!("negative attention value {v}"));
        }
        let bits = request.mask.bits();
        for (k, row) in self.attention.rows().enumerate() {
            let mass: f64 = row
                .iter()
                .zip(bits)
                .filter(|(_, keep)| **keep)
                .map(|(a, _)| a)
                .sum();
            if mass > 1.0 + ATTENTION_MASS_TOLERANCE {
                return violation(format!("attention row {k} carries mass {mass}"));
            }
        }
        if request.mask_mode == MaskMode::Feature {
            for (k, (a_row, g_row)) in self.attention.rows().zip(self.gradients.rows()).enumerate() {
                for (i, keep) in bits.iter().enumerate() {
                    if !keep && (a_row[i] != 0.0 || g_row[i] != 0.0) {
                        return violation(format!(
                            "row {k} cell {i} is masked but carries signal"
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

pub trait Backend {
    /// Latent grid `(h, w)` used for `image`.
    fn latent_grid(&mut self, image: &str) -> Result<(usize, usize), BackendError>;

    fn forward(&mut self, request: &BackendRequest) -> Result<BackendResponse, BackendError>;
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn latent_grid(&mut self, image: &str) -> Result<(usize, usize), BackendError> {
        (**self).latent_grid(image)
    }

    fn forward(&mut self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        (**self).forward(request)
    }
}

/// Opens one backend connection per worker.
pub trait BackendFactory: Sync {
    fn connect(&self) -> Result<Box<dyn Backend + Send>, BackendError>;

    /// Upper bound on simultaneous connections, if the transport has one.
    fn max_connections(&self) -> Option<usize> {
        None
    }
}

/// Parsed form of a `--backend` argument.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    /// `synth:SCENES.json`
    Synthetic(std::path::PathBuf),
    /// `bridge:HOST:PORT`
    Tcp(String),
    /// `bridge:stdio`: frames on this process's stdin/stdout.
    Stdio,
}

impl FromStr for BackendSpec {
    type Err = BackendError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(path) = s.strip_prefix("synth:") {
            if path.is_empty() {
                return Err(BackendError::Spec("synth: needs a scene file".into()));
            }
            return Ok(BackendSpec::Synthetic(path.into()));
        }
        if let Some(rest) = s.strip_prefix("bridge:") {
            if rest == "stdio" {
                return Ok(BackendSpec::Stdio);
            }
            match rest.rsplit_once(':') {
                Some((host, port)) if !host.is_empty() && port.parse::<u16>().is_ok() => {
                    return Ok(BackendSpec::Tcp(rest.to_string()))
                }
                _ => {
                    return Err(BackendError::Spec(format!(
                        "bridge address {rest:?} is not HOST:PORT or stdio"
                    )))
                }
            }
        }
        Err(BackendError::Spec(format!(
            "{s:?} (expected synth:FILE, bridge:HOST:PORT or bridge:stdio)"
        )))
    }
}
