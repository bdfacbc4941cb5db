//! Referring-expression segmentation from cross-attention Grad-CAMs.
//!
//! The engine parses an expression, asks a backend for per-token attention
//! and gradients, emphasises the head noun's Grad-CAM, refines it over a few
//! masked passes and finally picks the best-matching instance proposal.
//!
//! ```no_run
//! use refseg::backend::SyntheticBackend;
//! use refseg::eval::{run_pipeline, Dataset, PipelineConfig};
//! use refseg::parser::Parser;
//!
//! # fn main() -> refseg::Result<()> {
//! let backend = SyntheticBackend::from_file("fixtures/scenes.json".as_ref())?;
//! let data = Dataset::load("fixtures/selfcorrect.jsonl".as_ref())?;
//! let out = run_pipeline(&data, &PipelineConfig::default(), &backend, &Parser::default())?;
//! println!("mIoU {:?}", out.report.metrics.miou);
//! # Ok(())
//! # }
//! ```

pub mod backend;
pub mod dump;
mod error;
pub mod eval;
pub mod heatmap;
pub mod igrs;
pub mod parser;
pub mod pwem;
pub mod rle;
pub mod select;

pub use error::{Error, Result};
