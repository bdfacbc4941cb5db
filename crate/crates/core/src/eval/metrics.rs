//! IoU metrics with a positional / other split.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::dataset::EvalRecord;
use crate::error::{Error, Result};
use crate::heatmap::BinaryMask;
use crate::parser::Parser;

/// `(|a & b|, |a | b|)`
pub fn overlap(a: &BinaryMask, b: &BinaryMask) -> Result<(usize, usize)> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("masks {:?} and {:?} differ", a.dims(), b.dims())));
    }
    let mut inter = 0;
    let mut union = 0;
    for (x, y) in a.bits().iter().zip(b.bits()) {
        inter += usize::from(*x && *y);
        union += usize::from(*x || *y);
    }
    Ok((inter, union))
}

/// Two empty masks agree perfectly (1).
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (inter, union) = overlap(a, b)?;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleIou {
    pub sample_id: String,
    pub iou: f64,
    pub intersection: usize,
    pub union: usize,
    pub positional: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketMetrics {
    pub count: usize,
    pub miou: f64,
    pub oiou: f64,
}

impl BucketMetrics {
    /// `None` for an empty bucket.
    fn over<'a>(samples: impl Iterator<Item = &'a SampleIou>) -> Option<BucketMetrics> {
        let mut count = 0;
        let mut sum = 0.0;
        let mut inter = 0usize;
        let mut union = 0usize;
        for s in samples {
            count += 1;
            sum += s.iou;
            inter += s.intersection;
            union += s.union;
        }
        (count > 0).then(|| BucketMetrics {
            count,
            miou: sum / count as f64,
            oiou: if union == 0 { 1.0 } else { inter as f64 / union as f64 },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_sample: Vec<SampleIou>,
    pub miou: Option<f64>,
    pub oiou: Option<f64>,
    pub position: Option<BucketMetrics>,
    pub others: Option<BucketMetrics>,
    pub counts: BucketCounts,
    /// Records without a prediction; excluded from every mean.
    pub missing: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketCounts {
    pub total: usize,
    pub position: usize,
    pub others: usize,
}

impl MetricsReport {
    pub fn position_miou(&self) -> Option<f64> {
        self.position.as_ref().map(|b| b.miou)
    }

    pub fn others_miou(&self) -> Option<f64> {
        self.others.as_ref().map(|b| b.miou)
    }

    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }
}

/// Scores `predictions` (keyed by sample id) against every record's ground
/// truth, in record order.
pub fn aggregate_metrics(
    records: &[EvalRecord],
    predictions: &BTreeMap<String, BinaryMask>,
    parser: &Parser,
) -> Result<MetricsReport> {
    let mut per_sample = Vec::with_capacity(records.len());
    let mut missing = Vec::new();
    for rec in records {
        let Some(pred) = predictions.get(&rec.sample_id) else {
            missing.push(rec.sample_id.clone());
            continue;
        };
        let gt = rec.gt_mask()?;
        let (intersection, union) = overlap(pred, &gt)
            .map_err(|e| Error::Input(format!("sample {:?}: {e}", rec.sample_id)))?;
        per_sample.push(SampleIou {
            sample_id: rec.sample_id.clone(),
            iou: if union == 0 { 1.0 } else { intersection as f64 / union as f64 },
            intersection,
            union,
            positional: parser.parse(&rec.expression)?.positional,
        });
    }
    let all = BucketMetrics::over(per_sample.iter());
    let position = BucketMetrics::over(per_sample.iter().filter(|s| s.positional));
    let others = BucketMetrics::over(per_sample.iter().filter(|s| !s.positional));
    let counts = BucketCounts {
        total: per_sample.len(),
        position: position.as_ref().map_or(0, |b| b.count),
        others: others.as_ref().map_or(0, |b| b.count),
    };
    Ok(MetricsReport {
        miou: all.as_ref().map(|b| b.miou),
        oiou: all.as_ref().map(|b| b.oiou),
        per_sample,
        position,
        others,
        counts,
        missing,
    })
}
