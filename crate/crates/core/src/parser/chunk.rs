//! Rule-based noun-phrase chunking over tagged tokens.
//!
//! Grammar: `NP := DET? (ADJ | participle | NUM)* (NOUN | PROPN)+`, matched
//! greedily from the left so every reported span is maximal.

use super::{Pos, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NounPhrase {
    /// First token index (inclusive).
    pub start: usize,
    /// One past the last token index.
    pub end: usize,
    /// Rightmost noun of the span.
    pub head: usize,
}

fn is_participle(token: &Token) -> bool {
    token.pos == Pos::Verb
        && ["ed", "ing", "en"]
            .iter()
            .any(|s| token.surface.ends_with(s))
}

fn is_premodifier(token: &Token) -> bool {
    matches!(token.pos, Pos::Adj | Pos::Num) || is_participle(token)
}

fn match_at(tokens: &[Token], start: usize) -> Option<NounPhrase> {
    let mut j = start;
    if tokens.get(j).is_some_and(|t| t.pos == Pos::Det) {
        j += 1;
    }
    while tokens.get(j).is_some_and(is_premodifier) {
        j += 1;
    }
    let mut k = j;
    while tokens.get(k).is_some_and(|t| t.pos.is_nominal()) {
        k += 1;
    }
    (k > j).then(|| NounPhrase {
        start: tokens[start].index,
        end: tokens[k - 1].index + 1,
        head: tokens[k - 1].index,
    })
}

/// All non-overlapping noun phrases, left to right. The sentinel is skipped.
pub fn noun_phrases(tokens: &[Token]) -> Vec<NounPhrase> {
    let mut out = Vec::new();
    let mut i = tokens.iter().position(|t| t.index != 0).unwrap_or(tokens.len());
    while i < tokens.len() {
        match match_at(tokens, i) {
            Some(np) => {
                i += np.end - np.start;
                out.push(np);
            }
            None => i += 1,
        }
    }
    out
}
