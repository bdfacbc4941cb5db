//! Referring-expression analysis: tokenization, POS tagging, effective-token
//! filtering, primary-noun extraction and positional detection.
//!
//! Tagging is lexicon driven and fully deterministic. Token 0 of every parse
//! is a synthetic sentinel standing in for the text encoder's classifier token.

mod chunk;
mod lexicon;

use serde::{Deserialize, Serialize};

pub use chunk::{noun_phrases, NounPhrase};
pub use lexicon::{Lexicon, Pos};

use crate::error::{Error, Result};

pub const SENTINEL: &str = "[CLS]";

/// Lemmas that make an expression count as positional.
pub const POSITIONAL_LEMMAS: &[&str] = &[
    "left", "right", "top", "bottom", "front", "back", "behind", "above", "below", "under",
    "over", "near", "next", "middle", "center", "closest", "farthest", "between",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    pub lemma: String,
    pub pos: Pos,
    pub index: usize,
}

impl Token {
    pub fn is_sentinel(&self) -> bool {
        self.index == 0 && self.surface == SENTINEL
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedExpression {
    pub tokens: Vec<Token>,
    /// Sentinel plus every content token, ascending.
    pub effective: Vec<usize>,
    pub primary: usize,
    /// `effective` without `primary`, ascending.
    pub context: Vec<usize>,
    pub positional: bool,
}

impl ParsedExpression {
    pub fn primary_token(&self) -> &Token {
        &self.tokens[self.primary]
    }

    /// Surface forms in order, sentinel first.
    pub fn surfaces(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.surface.as_str()).collect()
    }
}

/// Parser bound to a lexicon.
#[derive(Debug, Clone, Default)]
pub struct Parser {
    lexicon: Lexicon,
}

impl Parser {
    pub fn new(lexicon: Lexicon) -> Self {
        Parser { lexicon }
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn tokenize_and_tag(&self, expression: &str) -> Result<Vec<Token>> {
        let words = split_words(expression);
        if words.is_empty() {
            return Err(Error::Input(format!(
                "expression {expression:?} contains no words"
            )));
        }
        let mut tokens = Vec::with_capacity(words.len() + 1);
        tokens.push(Token {
            surface: SENTINEL.to_string(),
            lemma: SENTINEL.to_string(),
            pos: Pos::Other,
            index: 0,
        });
        for (i, word) in words.into_iter().enumerate() {
            let (lemma, pos) = self.lexicon.analyze(&word);
            tokens.push(Token {
                surface: word,
                lemma,
                pos,
                index: i + 1,
            });
        }
        Ok(tokens)
    }

    pub fn parse(&self, expression: &str) -> Result<ParsedExpression> {
        let tokens = self.tokenize_and_tag(expression)?;
        let effective = filter_effective(&tokens);
        let primary = extract_primary_noun(&tokens);
        let context = effective.iter().copied().filter(|i| *i != primary).collect();
        let positional = detect_positional(&tokens);
        Ok(ParsedExpression {
            tokens,
            effective,
            primary,
            context,
            positional,
        })
    }
}

fn split_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Indices of the sentinel and every content token.
pub fn filter_effective(tokens: &[Token]) -> Vec<usize> {
    tokens
        .iter()
        .filter(|t| t.index == 0 || t.pos.is_content())
        .map(|t| t.index)
        .collect()
}

/// Head noun of the leftmost noun phrase.
///
/// Falls back to the first content token, then to the sentinel.
pub fn extract_primary_noun(tokens: &[Token]) -> usize {
    if let Some(np) = noun_phrases(tokens).first() {
        return np.head;
    }
    tokens
        .iter()
        .skip(1)
        .find(|t| t.pos.is_content())
        .map(|t| t.index)
        .unwrap_or(0)
}

pub fn detect_positional(tokens: &[Token]) -> bool {
    tokens
        .iter()
        .any(|t| POSITIONAL_LEMMAS.contains(&t.lemma.as_str()))
}
