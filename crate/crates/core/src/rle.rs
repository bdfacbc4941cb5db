//! Uncompressed run-length masks and proposal files.
//!
//! `{"size": [Y, X], "counts": [zeros, ones, zeros, ...]}`, row-major, always
//! opening with a zero-run (which may be 0).

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::BinaryMask;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[Y, X]` = (height, width).
    pub size: [usize; 2],
    pub counts: Vec<usize>,
}

impl Rle {
    pub fn encode(mask: &BinaryMask) -> Rle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0;
        for &bit in mask.bits() {
            if bit != current {
                counts.push(run);
                current = bit;
                run = 0;
            }
            run += 1;
        }
        counts.push(run);
        Rle {
            size: [mask.height(), mask.width()],
            counts,
        }
    }

    pub fn decode(&self) -> Result<BinaryMask> {
        let [y, x] = self.size;
        if y == 0 || x == 0 {
            return Err(Error::Input(format!("mask size {:?} must be positive", self.size)));
        }
        let total: usize = self.counts.iter().sum();
        if total != y * x {
            return Err(Error::Input(format!(
                "run lengths sum to {total}, mask {y}x{x} has {} cells",
                y * x
            )));
        }
        let mut bits = Vec::with_capacity(total);
        for (i, &n) in self.counts.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, n));
        }
        BinaryMask::new(y, x, bits)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskProposal {
    pub id: u64,
    /// Image resolution: height Y, width X.
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProposalEntry {
    id: u64,
    rle: Rle,
}

pub fn parse_proposals(text: &str) -> Result<Vec<MaskProposal>> {
    let entries: Vec<ProposalEntry> = serde_json::from_str(text)?;
    let mut seen = BTreeSet::new();
    entries
        .into_iter()
        .map(|e| {
            if !seen.insert(e.id) {
                return Err(Error::Input(format!("duplicate proposal id {}", e.id)));
            }
            let mask = e
                .rle
                .decode()
                .map_err(|err| Error::Input(format!("proposal {}: {err}", e.id)))?;
            Ok(MaskProposal { id: e.id, mask })
        })
        .collect()
}

pub fn load_proposals(path: &Path) -> Result<Vec<MaskProposal>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_proposals(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn proposals_to_json(proposals: &[MaskProposal]) -> Result<String> {
    let entries: Vec<ProposalEntry> = proposals
        .iter()
        .map(|p| ProposalEntry {
            id: p.id,
            rle: Rle::encode(&p.mask),
        })
        .collect();
    Ok(serde_json::to_string(&entries)?)
}
