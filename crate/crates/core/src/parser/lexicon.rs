use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BUNDLED: &str = include_str!("../../data/lexicon.tsv");

/// Coarse part-of-speech classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Pos {
    Noun,
    Propn,
    Adj,
    Verb,
    Num,
    Det,
    Adp,
    Pron,
    Cconj,
    Part,
    Other,
}

impl Pos {
    /// Classes that carry content: nouns, adjectives, verbs, proper nouns and numerals.
    pub fn is_content(self) -> bool {
        matches!(self, Pos::Noun | Pos::Propn | Pos::Adj | Pos::Verb | Pos::Num)
    }

    pub fn is_nominal(self) -> bool {
        matches!(self, Pos::Noun | Pos::Propn)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Pos::Noun => "NOUN",
            Pos::Propn => "PROPN",
            Pos::Adj => "ADJ",
            Pos::Verb => "VERB",
            Pos::Num => "NUM",
            Pos::Det => "DET",
            Pos::Adp => "ADP",
            Pos::Pron => "PRON",
            Pos::Cconj => "CCONJ",
            Pos::Part => "PART",
            Pos::Other => "OTHER",
        }
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pos {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_uppercase().as_str() {
            "NOUN" => Pos::Noun,
            "PROPN" => Pos::Propn,
            "ADJ" => Pos::Adj,
            "VERB" => Pos::Verb,
            "NUM" => Pos::Num,
            "DET" => Pos::Det,
            "ADP" => Pos::Adp,
            "PRON" => Pos::Pron,
            "CCONJ" => Pos::Cconj,
            "PART" => Pos::Part,
            "OTHER" => Pos::Other,
            other => return Err(Error::Input(format!("unknown POS tag {other:?}"))),
        })
    }
}

const IRREGULAR_PLURALS: &[(&str, &str)] = &[
    ("men", "man"),
    ("women", "woman"),
    ("children", "child"),
    ("people", "person"),
    ("feet", "foot"),
    ("teeth", "tooth"),
    ("mice", "mouse"),
    ("geese", "goose"),
    ("knives", "knife"),
    ("leaves", "leaf"),
    ("shelves", "shelf"),
    ("calves", "calf"),
];

/// Word list mapping lemmas to a single POS class.
#[derive(Debug, Clone)]
pub struct Lexicon {
    entries: HashMap<String, Pos>,
}

impl Lexicon {
    /// The vocabulary shipped with the crate.
    pub fn bundled() -> Lexicon {
        Self::parse(BUNDLED).expect("bundled lexicon is well-formed")
    }

    /// Parses `lemma<TAB>TAG` lines. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Lexicon> {
        let mut entries = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (lemma, tag) = line.split_once('\t').ok_or_else(|| {
                Error::Input(format!("lexicon line {}: expected lemma<TAB>TAG", lineno + 1))
            })?;
            let lemma = lemma.trim().to_lowercase();
            if lemma.is_empty() {
                return Err(Error::Input(format!("lexicon line {}: empty lemma", lineno + 1)));
            }
            let pos = tag
                .parse::<Pos>()
                .map_err(|e| Error::Input(format!("lexicon line {}: {e}", lineno + 1)))?;
            entries.insert(lemma, pos);
        }
        Ok(Lexicon { entries })
    }

    /// Bundled vocabulary with the entries from `path` layered on top.
    pub fn bundled_with_overrides(path: &Path) -> Result<Lexicon> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let extra = Self::parse(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let mut lex = Self::bundled();
        lex.entries.extend(extra.entries);
        Ok(lex)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, lemma: &str) -> Option<Pos> {
        self.entries.get(lemma).copied()
    }

    /// Resolves a lowercased surface form to `(lemma, pos)`.
    ///
    /// Lookup order: exact entry, irregular plural, regular plural stripping,
    /// then suffix heuristics with NOUN as the last resort.
    pub fn analyze(&self, surface: &str) -> (String, Pos) {
        if let Some(pos) = self.get(surface) {
            return (surface.to_string(), pos);
        }
        if let Some((_, lemma)) = IRREGULAR_PLURALS.iter().find(|(p, _)| *p == surface) {
            let pos = self.get(lemma).unwrap_or(Pos::Noun);
            return (lemma.to_string(), pos);
        }
        if let Some(lemma) = self.singular(surface) {
            let pos = self.get(&lemma).unwrap_or(Pos::Noun);
            return (lemma, pos);
        }
        (surface.to_string(), self.guess(surface))
    }

    fn singular(&self, surface: &str) -> Option<String> {
        let known_nominal = |s: &str| self.get(s).is_some_and(Pos::is_nominal);
        if let Some(stem) = surface.strip_suffix("ies") {
            let cand = format!("{stem}y");
            if known_nominal(&cand) {
                return Some(cand);
            }
        }
        if let Some(stem) = surface.strip_suffix("es") {
            if known_nominal(stem) {
                return Some(stem.to_string());
            }
        }
        if let Some(stem) = surface.strip_suffix('s') {
            if !stem.ends_with('s') && known_nominal(stem) {
                return Some(stem.to_string());
            }
        }
        None
    }

    fn guess(&self, surface: &str) -> Pos {
        if surface.chars().all(|c| c.is_ascii_digit()) {
            return Pos::Num;
        }
        let n = surface.chars().count();
        if n > 4 && surface.ends_with("ly") {
            return Pos::Other;
        }
        if n > 4 && (surface.ends_with("ing") || surface.ends_with("ed")) {
            return Pos::Verb;
        }
        for suffix in ["est", "er"] {
            if let Some(stem) = surface.strip_suffix(suffix) {
                if self.is_adjective_stem(stem) {
                    return Pos::Adj;
                }
            }
        }
        Pos::Noun
    }

    fn is_adjective_stem(&self, stem: &str) -> bool {
        let is_adj = |s: &str| self.get(s) == Some(Pos::Adj);
        if stem.is_empty() {
            return false;
        }
        if is_adj(stem) || is_adj(&format!("{stem}e")) {
            return true;
        }
        // bigger -> big, happier -> happy
        let bytes = stem.as_bytes();
        if bytes.len() >= 2 && bytes[bytes.len() - 1] == bytes[bytes.len() - 2] {
            return is_adj(&stem[..stem.len() - 1]);
        }
        if let Some(s) = stem.strip_suffix('i') {
            return is_adj(&format!("{s}y"));
        }
        false
    }
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::bundled()
    }
}
