//! Proposal filtering, scoring and selection against the refined heatmap.
//!
//! A proposal survives when it covers a heatmap peak and splits into at most
//! `kappa` connected components. Survivors are scored by
//! `sum(B + B*H) / sum(B)`, which lies in [1, 2], and the best one wins
//! (lowest id on ties).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{argmax_coords, BinaryMask, ImageHeatmap};
use crate::rle::MaskProposal;

pub const DEFAULT_KAPPA: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    #[default]
    #[serde(rename = "4")]
    Four,
    #[serde(rename = "8")]
    Eight,
}

impl FromStr for Connectivity {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "4" => Ok(Connectivity::Four),
            "8" => Ok(Connectivity::Eight),
            other => Err(format!("connectivity must be 4 or 8, got {other:?}")),
        }
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Connectivity::Four => "4",
            Connectivity::Eight => "8",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterReason {
    Empty,
    NoPeakCoverage,
    TooFragmented,
}

/// Which constraint had to be dropped to find any candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relaxation {
    #[default]
    None,
    DropKappa,
    DropPeakCoverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub selected_id: u64,
    /// Candidate ids, ascending.
    pub candidates: Vec<u64>,
    pub scores: BTreeMap<u64, f64>,
    pub filtered_out: BTreeMap<u64, FilterReason>,
    pub relaxation: Relaxation,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

fn union(parent: &mut [usize], a: usize, b: usize) -> bool {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra == rb {
        return false;
    }
    let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
    parent[hi] = lo;
    true
}

/// Number of foreground components (union-find over a single raster scan).
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> usize {
    let (h, w) = mask.dims();
    let bits = mask.bits();
    let mut parent: Vec<usize> = (0..bits.len()).collect();
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !bits[i] {
                continue;
            }
            count += 1;
            let mut neighbours = Vec::with_capacity(4);
            if x > 0 {
                neighbours.push(i - 1);
            }
            if y > 0 {
                neighbours.push(i - w);
                if connectivity == Connectivity::Eight {
                    if x > 0 {
                        neighbours.push(i - w - 1);
                    }
                    if x + 1 < w {
                        neighbours.push(i - w + 1);
                    }
                }
            }
            for n in neighbours {
                if bits[n] && union(&mut parent, i, n) {
                    count -= 1;
                }
            }
        }
    }
    count
}

fn covers_peak(mask: &BinaryMask, peaks: &[(usize, usize)]) -> bool {
    peaks.iter().any(|&(x, y)| mask.get(x, y))
}

/// Why a proposal fails the strict filter, if it does.
fn rejection(
    p: &MaskProposal,
    peaks: &[(usize, usize)],
    kappa: usize,
    connectivity: Connectivity,
) -> Option<FilterReason> {
    if p.mask.is_empty() {
        Some(FilterReason::Empty)
    } else if !covers_peak(&p.mask, peaks) {
        Some(FilterReason::NoPeakCoverage)
    } else if connected_components(&p.mask, connectivity) > kappa {
        Some(FilterReason::TooFragmented)
    } else {
        None
    }
}

/// Strict candidate set (ids ascending) and the reason for every rejection.
pub fn filter_proposals(
    proposals: &[MaskProposal],
    peaks: &[(usize, usize)],
    kappa: usize,
    connectivity: Connectivity,
) -> (Vec<u64>, BTreeMap<u64, FilterReason>) {
    let mut kept = Vec::new();
    let mut rejected = BTreeMap::new();
    for p in proposals {
        match rejection(p, peaks, kappa, connectivity) {
            None => kept.push(p.id),
            Some(r) => {
                rejected.insert(p.id, r);
            }
        }
    }
    kept.sort_unstable();
    (kept, rejected)
}

/// Normalised score of one mask: `sum(B + B*H) / sum(B)`.
pub fn score_mask(mask: &BinaryMask, heat: &ImageHeatmap) -> Result<f64> {
    if mask.dims() != heat.dims() {
        return Err(Error::Shape(format!(
            "mask {:?} vs heatmap {:?}",
            mask.dims(),
            heat.dims()
        )));
    }
    let mut z = 0.0;
    let mut area = 0usize;
    for (b, h) in mask.bits().iter().zip(heat.values()) {
        if *b {
            z += 1.0 + h;
            area += 1;
        }
    }
    if area == 0 {
        return Err(Error::Input("cannot score an empty mask".into()));
    }
    Ok(z / area as f64)
}

pub fn score_proposals(
    candidates: &[&MaskProposal],
    heat: &ImageHeatmap,
) -> Result<BTreeMap<u64, f64>> {
    candidates
        .iter()
        .map(|p| score_mask(&p.mask, heat).map(|s| (p.id, s)))
        .collect()
}

/// Highest score; the lowest id wins exact ties.
pub fn select(scores: &BTreeMap<u64, f64>) -> Result<u64> {
    let mut best: Option<(u64, f64)> = None;
    for (&id, &s) in scores {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((id, s));
        }
    }
    best.map(|(id, _)| id).ok_or(Error::NoCandidate(0))
}

/// Filter, score and select, relaxing the filter when nothing survives.
pub fn select_mask(
    proposals: &[MaskProposal],
    heat: &ImageHeatmap,
    kappa: usize,
    connectivity: Connectivity,
    tie_epsilon: f64,
) -> Result<SelectionResult> {
    if kappa < 1 {
        return Err(Error::Config("kappa must be at least 1".into()));
    }
    if let Some(p) = proposals.iter().find(|p| p.mask.dims() != heat.dims()) {
        return Err(Error::Shape(format!(
            "proposal {} is {:?}, heatmap is {:?}",
            p.id,
            p.mask.dims(),
            heat.dims()
        )));
    }
    let peaks = argmax_coords(heat, tie_epsilon);
    let (strict, reasons) = filter_proposals(proposals, &peaks, kappa, connectivity);

    let (candidates, relaxation) = if !strict.is_empty() {
        (strict, Relaxation::None)
    } else {
        let covering: Vec<u64> = proposals
            .iter()
            .filter(|p| !p.mask.is_empty() && covers_peak(&p.mask, &peaks))
            .map(|p| p.id)
            .collect();
        if !covering.is_empty() {
            (covering, Relaxation::DropKappa)
        } else {
            let nonempty = proposals
                .iter()
                .filter(|p| !p.mask.is_empty())
                .map(|p| p.id)
                .collect();
            (nonempty, Relaxation::DropPeakCoverage)
        }
    };
    let mut candidates = candidates;
    candidates.sort_unstable();
    if candidates.is_empty() {
        return Err(Error::NoCandidate(proposals.len()));
    }
    if relaxation != Relaxation::None {
        log::debug!("no proposal passed the filter; relaxation {relaxation:?}");
    }

    let chosen: Vec<&MaskProposal> = proposals
        .iter()
        .filter(|p| candidates.binary_search(&p.id).is_ok())
        .collect();
    let scores = score_proposals(&chosen, heat)?;
    let selected_id = select(&scores)?;
    let filtered_out = reasons
        .into_iter()
        .filter(|(id, _)| candidates.binary_search(id).is_err())
        .collect();
    Ok(SelectionResult {
        selected_id,
        candidates,
        scores,
        filtered_out,
        relaxation,
    })
}
