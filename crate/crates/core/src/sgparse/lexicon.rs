//! Synonym table that maps free-text classes onto a closed vocabulary.

use std::collections::BTreeMap;
use std::path::Path;

use super::rule::gerund;
use super::SgError;
use crate::model::{Triplet, Vocabulary};

const BUNDLED: &str = include_str!("../../assets/ag_lexicon.v1.tsv");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Subject,
    Predicate,
    Object,
}

/// Lowercases, trims, collapses whitespace and drops a leading article.
pub fn normalize(term: &str) -> String {
    let joined = term
        .split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ");
    for article in ["the ", "a ", "an "] {
        if let Some(rest) = joined.strip_prefix(article) {
            return rest.to_string();
        }
    }
    joined
}

fn singular_forms(word: &str) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(stem) = word.strip_suffix("ies") {
        out.push(format!("{stem}y"));
    }
    if let Some(stem) = word.strip_suffix("es") {
        out.push(stem.to_string());
    }
    if let Some(stem) = word.strip_suffix('s') {
        out.push(stem.to_string());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    vocab: Vocabulary,
    entities: BTreeMap<String, String>,
    predicates: BTreeMap<String, String>,
}

impl Lexicon {
    /// Parses `kind<TAB>surface<TAB>target` lines; `#` starts a comment.
    /// Every target must be a class of `vocab`.
    pub fn parse(text: &str, vocab: &Vocabulary, source: &str) -> Result<Self, SgError> {
        let mut entities = BTreeMap::new();
        let mut predicates = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: String| SgError::Lexicon {
                origin: source.to_string(),
                line: n + 1,
                reason,
            };
            let cols: Vec<&str> = line.split('\t').collect();
            let [kind, surface, target] = cols[..] else {
                return Err(bad(format!("expected 3 tab-separated columns, found {}", cols.len())));
            };
            let (table, known) = match kind {
                "entity" => (&mut entities, vocab.has_entity(target)),
                "predicate" => (&mut predicates, vocab.has_action(target)),
                other => return Err(bad(format!("unknown kind {other:?}"))),
            };
            if !known {
                return Err(bad(format!("target {target:?} is not in the vocabulary")));
            }
            table.insert(normalize(surface), target.to_string());
        }
        Ok(Self {
            vocab: vocab.clone(),
            entities,
            predicates,
        })
    }

    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Self, SgError> {
        let text = std::fs::read_to_string(path).map_err(|e| SgError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text, vocab, &path.display().to_string())
    }

    /// The lexicon shipped with the crate, over the Action Genome vocabulary.
    pub fn bundled() -> Self {
        Self::parse(BUNDLED, &Vocabulary::action_genome(), "bundled lexicon").expect("bundled lexicon is valid")
    }

    pub fn len(&self) -> usize {
        self.entities.len() + self.predicates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entity(&self, term: &str) -> Option<String> {
        let t = normalize(term);
        let direct = |w: &str| -> Option<String> {
            if self.vocab.has_entity(w) {
                Some(w.to_string())
            } else {
                self.entities.get(w).cloned()
            }
        };
        direct(&t).or_else(|| singular_forms(&t).iter().find_map(|s| direct(s)))
    }

    pub fn predicate(&self, term: &str) -> Option<String> {
        let t = normalize(term);
        let direct = |w: &str| -> Option<String> {
            if self.vocab.has_action(w) {
                Some(w.to_string())
            } else {
                self.predicates.get(w).cloned()
            }
        };
        direct(&t).or_else(|| {
            let mut words = t.splitn(2, ' ');
            let g = gerund(words.next()?)?;
            let rebuilt = match words.next() {
                Some(rest) => format!("{g} {rest}"),
                None => g.to_string(),
            };
            direct(&rebuilt).or_else(|| direct(g))
        })
    }

    /// The mapped triplet, or the first role that could not be mapped.
    pub fn map(&self, t: &Triplet) -> Result<Triplet, Role> {
        let s = self.entity(&t.subject_class).ok_or(Role::Subject)?;
        let p = self.predicate(&t.predicate_class).ok_or(Role::Predicate)?;
        let o = self.entity(&t.object_class).ok_or(Role::Object)?;
        let mut out = t.clone();
        out.subject_class = s;
        out.predicate_class = p;
        out.object_class = o;
        Ok(out)
    }
}
