//! JSON-lines datasets: one `EvalRecord` per line.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::BinaryMask;
use crate::rle::Rle;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub width: usize,
    pub height: usize,
    /// Optional PNG used as the overlay base.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Backend image reference; falls back to the sample id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub image: ImageMeta,
    pub expression: String,
    /// Proposal file, relative to the dataset file.
    pub proposals: PathBuf,
    pub gt: Rle,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub split_tags: Vec<String>,
}

impl EvalRecord {
    pub fn image_ref(&self) -> &str {
        self.image.id.as_deref().unwrap_or(&self.sample_id)
    }

    /// `(X, Y)`
    pub fn image_size(&self) -> (usize, usize) {
        (self.image.width, self.image.height)
    }

    pub fn gt_mask(&self) -> Result<BinaryMask> {
        self.gt.decode()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<EvalRecord>,
    /// Directory that relative paths in the records resolve against.
    pub base_dir: PathBuf,
}

impl Dataset {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Dataset> {
        let mut records = Vec::new();
        let mut ids = BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let rec: EvalRecord = serde_json::from_str(line)
                .map_err(|e| Error::Input(format!("line {}: {e}", n + 1)))?;
            if rec.image.width == 0 || rec.image.height == 0 {
                return Err(Error::Input(format!("line {}: image size must be positive", n + 1)));
            }
            if rec.gt.size != [rec.image.height, rec.image.width] {
                return Err(Error::Input(format!(
                    "line {}: gt size {:?} differs from image [{}, {}]",
                    n + 1,
                    rec.gt.size,
                    rec.image.height,
                    rec.image.width
                )));
            }
            if !ids.insert(rec.sample_id.clone()) {
                return Err(Error::Input(format!(
                    "line {}: duplicate sample id {:?}",
                    n + 1,
                    rec.sample_id
                )));
            }
            records.push(rec);
        }
        Ok(Dataset {
            records,
            base_dir: base_dir.into(),
        })
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn resolve(&self, relative: &Path) -> PathBuf {
        self.base_dir.join(relative)
    }

    pub fn to_jsonl(records: &[EvalRecord]) -> Result<String> {
        let mut out = String::new();
        for r in records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}
