//! Triplet extraction from sentences, class mapping and grounding.

mod ground;
mod lexicon;
mod rule;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{ChatMessage, LlmClient, LlmError, TokenUsage};
use crate::model::{Provenance, SegmentedSentence, Triplet, Vocabulary};

pub use ground::{ground_pair, ground_triplets};
pub use lexicon::{normalize, Lexicon, Role};
pub use rule::{gerund, parse_rule};

#[derive(Debug, Error)]
pub enum SgError {
    #[error("sentence {0} is empty")]
    EmptySentence(u32),
    #[error("invalid parse config: {0}")]
    InvalidConfig(String),
    #[error("{origin}:{line}: {reason}")]
    Lexicon {
        origin: String,
        line: usize,
        reason: String,
    },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("LLM mode needs a client")]
    NoClient,
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParserKind {
    #[default]
    Llm,
    Rule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingMode {
    Llm,
    #[default]
    Lexicon,
    /// Open vocabulary: classes are kept as parsed.
    None,
}

macro_rules! str_enum {
    ($t:ty, $($name:literal => $v:expr),+ $(,)?) => {
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($name => Ok($v),)+
                    _ => Err(format!("unknown value {s:?}; expected one of: {}", [$($name),+].join(", "))),
                }
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $v { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}

str_enum!(ParserKind, "llm" => ParserKind::Llm, "rule" => ParserKind::Rule);
str_enum!(MappingMode, "llm" => MappingMode::Llm, "lexicon" => MappingMode::Lexicon, "none" => MappingMode::None);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParseConfig {
    pub parser: ParserKind,
    pub mapping: MappingMode,
    /// Synonym table for lexicon mapping; `None` uses the bundled one.
    pub lexicon_path: Option<PathBuf>,
    /// Open vocabulary only: keep the N most frequent predicates.
    pub top_n_open_classes: Option<usize>,
    pub model_name: String,
    pub temperature: f64,
}

impl Default for ParseConfig {
    fn default() -> Self {
        Self {
            parser: ParserKind::Llm,
            mapping: MappingMode::Lexicon,
            lexicon_path: None,
            top_n_open_classes: Some(500),
            model_name: "gpt-3.5-turbo".into(),
            temperature: 0.0,
        }
    }
}

impl ParseConfig {
    pub fn validate(&self) -> Result<(), SgError> {
        if self.top_n_open_classes == Some(0) {
            return Err(SgError::InvalidConfig("top_n_open_classes must be positive".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(SgError::InvalidConfig(format!(
                "temperature {} must be >= 0",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn uses_llm(&self) -> bool {
        self.parser == ParserKind::Llm || self.mapping == MappingMode::Llm
    }
}

const PARSE_INSTRUCTION: &str = "List every subject-predicate-object relation stated in the sentence. \
Write one relation per line as (subject, predicate, object). Use a short noun for the subject and the \
object and a verb in -ing form, with its preposition if any, for the predicate. Write NONE if the \
sentence states no such relation.";

const PARSE_EXAMPLE: (&str, &str) = (
    "The man sits on the couch and holds a phone.",
    "(man, sitting on, couch)\n(man, holding, phone)",
);

pub fn parse_messages(sentence: &str) -> Vec<ChatMessage> {
    vec![
        ChatMessage::system(PARSE_INSTRUCTION),
        ChatMessage::user(PARSE_EXAMPLE.0),
        ChatMessage::assistant(PARSE_EXAMPLE.1),
        ChatMessage::user(sentence.trim()),
    ]
}

/// Triplets from `(s, p, o)` or `<s, p, o>` lines. `Some(vec![])` for an
/// explicit NONE, `None` when nothing could be read.
pub fn parse_triplet_lines(reply: &str) -> Option<Vec<(String, String, String)>> {
    if reply.trim().eq_ignore_ascii_case("none") {
        return Some(Vec::new());
    }
    let mut out = Vec::new();
    for line in reply.lines() {
        let Some(start) = line.find(['(', '<']) else {
            continue;
        };
        let Some(end) = line.rfind([')', '>']) else {
            continue;
        };
        if end <= start {
            continue;
        }
        let parts: Vec<String> = line[start + 1..end].split(',').map(normalize).collect();
        if let [s, p, o] = &parts[..] {
            if !s.is_empty() && !p.is_empty() && !o.is_empty() {
                out.push((s.clone(), p.clone(), o.clone()));
            }
        }
    }
    (!out.is_empty()).then_some(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParseOutcome {
    pub triplets: Vec<Triplet>,
    pub usage: TokenUsage,
    pub unparseable: bool,
}

/// Unlocalized triplets stated by one sentence.
pub fn parse_triplets(
    sentence: &SegmentedSentence,
    config: &ParseConfig,
    client: Option<&LlmClient>,
) -> Result<ParseOutcome, SgError> {
    if sentence.text.trim().is_empty() {
        return Err(SgError::EmptySentence(sentence.order_index));
    }
    match config.parser {
        ParserKind::Rule => Ok(ParseOutcome {
            triplets: parse_rule(&sentence.text),
            ..ParseOutcome::default()
        }),
        ParserKind::Llm => {
            let client = client.ok_or(SgError::NoClient)?;
            let reply = client.complete(&config.model_name, config.temperature, &parse_messages(&sentence.text))?;
            let (triplets, unparseable) = match parse_triplet_lines(&reply.content) {
                Some(items) => (
                    items
                        .into_iter()
                        .map(|(s, p, o)| Triplet::unlocalized(s, p, o, Provenance::Caption))
                        .collect(),
                    false,
                ),
                None => {
                    log::warn!("unparseable triplet reply for {:?}", sentence.text);
                    (Vec::new(), true)
                }
            };
            Ok(ParseOutcome {
                triplets,
                usage: reply.usage,
                unparseable,
            })
        }
    }
}

/// Counts of triplets kept and dropped by class mapping.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingStats {
    pub kept: usize,
    pub unmapped_subject: usize,
    pub unmapped_predicate: usize,
    pub unmapped_object: usize,
    /// Dropped by the open-vocabulary top-N predicate cut.
    pub outside_top_n: usize,
}

impl MappingStats {
    pub fn discarded(&self) -> usize {
        self.unmapped_subject + self.unmapped_predicate + self.unmapped_object + self.outside_top_n
    }

    pub fn merge(&mut self, other: &Self) {
        self.kept += other.kept;
        self.unmapped_subject += other.unmapped_subject;
        self.unmapped_predicate += other.unmapped_predicate;
        self.unmapped_object += other.unmapped_object;
        self.outside_top_n += other.outside_top_n;
    }

    fn record(&mut self, r: Result<(), Role>) {
        match r {
            Ok(()) => self.kept += 1,
            Err(Role::Subject) => self.unmapped_subject += 1,
            Err(Role::Predicate) => self.unmapped_predicate += 1,
            Err(Role::Object) => self.unmapped_object += 1,
        }
    }
}

fn mapping_messages<'c>(term: &str, role: Role, candidates: impl IntoIterator<Item = &'c String>) -> Vec<ChatMessage> {
    let kind = match role {
        Role::Predicate => "relation",
        _ => "object",
    };
    vec![
        ChatMessage::system(format!(
            "Choose the {kind} class from the list that means the same as the given term. \
             Reply with the class exactly as written, or NONE if no class fits.\nClasses: {}",
            candidates
                .into_iter()
                .map(String::as_str)
                .collect::<Vec<_>>()
                .join("; ")
        )),
        ChatMessage::user(term.to_string()),
    ]
}

/// Maps triplet classes onto a vocabulary according to [`MappingMode`].
pub struct ClassMapper<'a> {
    mode: MappingMode,
    vocab: Vocabulary,
    lexicon: Option<Lexicon>,
    client: Option<&'a LlmClient>,
    model: String,
    temperature: f64,
    memo: Mutex<HashMap<(String, bool), Option<String>>>,
    usage: Mutex<TokenUsage>,
}

impl<'a> ClassMapper<'a> {
    pub fn new(config: &ParseConfig, vocab: &Vocabulary, client: Option<&'a LlmClient>) -> Result<Self, SgError> {
        config.validate()?;
        let lexicon = match (config.mapping, &config.lexicon_path) {
            (MappingMode::Lexicon, Some(path)) => Some(Lexicon::load(path, vocab)?),
            (MappingMode::Lexicon, None) => Some(Lexicon::bundled()),
            _ => None,
        };
        if config.mapping == MappingMode::Llm && client.is_none() {
            return Err(SgError::NoClient);
        }
        Ok(Self {
            mode: config.mapping,
            vocab: vocab.clone(),
            lexicon,
            client,
            model: config.model_name.clone(),
            temperature: config.temperature,
            memo: Mutex::new(HashMap::new()),
            usage: Mutex::new(TokenUsage::default()),
        })
    }

    pub fn mode(&self) -> MappingMode {
        self.mode
    }

    /// Tokens spent on LLM mapping so far.
    pub fn usage(&self) -> TokenUsage {
        *self.usage.lock().expect("usage lock")
    }

    fn llm_term(&self, term: &str, role: Role) -> Result<Option<String>, SgError> {
        let is_pred = role == Role::Predicate;
        let t = normalize(term);
        let known = if is_pred {
            self.vocab.has_action(&t)
        } else {
            self.vocab.has_entity(&t)
        };
        if known {
            return Ok(Some(t));
        }
        if let Some(hit) = self.memo.lock().expect("memo lock").get(&(t.clone(), is_pred)) {
            return Ok(hit.clone());
        }
        let candidates = if is_pred {
            &self.vocab.action_classes
        } else {
            &self.vocab.entity_classes
        };
        let client = self.client.ok_or(SgError::NoClient)?;
        let reply = client.complete(&self.model, self.temperature, &mapping_messages(&t, role, candidates))?;
        *self.usage.lock().expect("usage lock") += reply.usage;
        let answer = normalize(reply.content.trim().trim_end_matches('.'));
        let mapped = candidates.iter().find(|c| **c == answer).cloned();
        self.memo
            .lock()
            .expect("memo lock")
            .insert((t, is_pred), mapped.clone());
        Ok(mapped)
    }

    /// The mapped triplet, or the role that failed to map.
    pub fn map_one(&self, t: &Triplet) -> Result<Result<Triplet, Role>, SgError> {
        match self.mode {
            MappingMode::None => Ok(Ok(t.clone())),
            MappingMode::Lexicon => Ok(self.lexicon.as_ref().expect("lexicon loaded").map(t)),
            MappingMode::Llm => {
                let Some(s) = self.llm_term(&t.subject_class, Role::Subject)? else {
                    return Ok(Err(Role::Subject));
                };
                let Some(p) = self.llm_term(&t.predicate_class, Role::Predicate)? else {
                    return Ok(Err(Role::Predicate));
                };
                let Some(o) = self.llm_term(&t.object_class, Role::Object)? else {
                    return Ok(Err(Role::Object));
                };
                let mut out = t.clone();
                out.subject_class = s;
                out.predicate_class = p;
                out.object_class = o;
                Ok(Ok(out))
            }
        }
    }

    /// Maps a batch, dropping unmapped triplets and counting the drops.
    pub fn map_all(&self, triplets: &[Triplet]) -> Result<(Vec<Triplet>, MappingStats), SgError> {
        let mut stats = MappingStats::default();
        let mut out = Vec::new();
        for t in triplets {
            match self.map_one(t)? {
                Ok(m) => {
                    stats.record(Ok(()));
                    out.push(m);
                }
                Err(role) => stats.record(Err(role)),
            }
        }
        Ok((out, stats))
    }
}

/// Single-triplet lexicon mapping; `None` when any role is unmapped.
pub fn map_classes(triplet: &Triplet, lexicon: &Lexicon) -> Option<Triplet> {
    lexicon.map(triplet).ok()
}

/// The `n` most frequent predicates; ties go to the lexicographically
/// smaller name.
pub fn top_predicates<'t>(triplets: impl IntoIterator<Item = &'t Triplet>, n: usize) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in triplets {
        *counts.entry(t.predicate_class.as_str()).or_default() += 1;
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.into_iter().take(n).map(|(p, _)| p.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ChatReply, ClientOptions, FnTransport};
    use std::collections::BTreeSet;
    use std::sync::Arc;

    fn scripted(reply: &'static str) -> LlmClient {
        let transport = FnTransport(move |_req: &crate::llm::ChatRequest<'_>| {
            Ok(ChatReply {
                content: reply.to_string(),
                usage: TokenUsage::new(10, 5),
            })
        });
        LlmClient::new(Some(Arc::new(transport)), None, ClientOptions::default())
    }

    #[test]
    fn triplet_line_formats() {
        let got =
            parse_triplet_lines("Here you go:\n1. (Person, Sits On, the sofa)\n<person, holding, cup>\n").unwrap();
        assert_eq!(
            got,
            vec![
                ("person".into(), "sits on".into(), "sofa".into()),
                ("person".into(), "holding".into(), "cup".into())
            ]
        );
        assert_eq!(parse_triplet_lines("NONE"), Some(vec![]));
        assert_eq!(parse_triplet_lines("I cannot help"), None);
        assert_eq!(parse_triplet_lines("(a, b)"), None);
    }

    #[test]
    fn llm_parser_and_unparseable_reply() {
        let s = SegmentedSentence::new(1, "The person sits on the sofa.");
        let cfg = ParseConfig::default();
        let out = parse_triplets(&s, &cfg, Some(&scripted("(person, sitting on, sofa)"))).unwrap();
        assert_eq!(out.triplets[0].class_key(), ("person", "sitting on", "sofa"));
        assert_eq!(out.usage, TokenUsage::new(10, 5));
        let bad = parse_triplets(&s, &cfg, Some(&scripted("sorry"))).unwrap();
        assert!(bad.triplets.is_empty() && bad.unparseable);
        assert!(matches!(parse_triplets(&s, &cfg, None), Err(SgError::NoClient)));
    }

    #[test]
    fn rule_parser_via_config() {
        let cfg = ParseConfig {
            parser: ParserKind::Rule,
            ..ParseConfig::default()
        };
        let out = parse_triplets(&SegmentedSentence::new(1, "the red sofa"), &cfg, None).unwrap();
        assert!(out.triplets.is_empty() && !out.unparseable);
    }

    #[test]
    fn mapper_counts_discards() {
        let cfg = ParseConfig::default();
        let m = ClassMapper::new(&cfg, &Vocabulary::action_genome(), None).unwrap();
        let input = vec![
            Triplet::unlocalized("person", "grab", "cup", Provenance::Caption),
            Triplet::unlocalized("person", "defenestrates", "cat", Provenance::Caption),
            Triplet::unlocalized("dragon", "holding", "cup", Provenance::Caption),
        ];
        let (out, stats) = m.map_all(&input).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(stats.kept, 1);
        assert_eq!(stats.unmapped_predicate, 1);
        assert_eq!(stats.unmapped_subject, 1);
        assert_eq!(stats.discarded(), 2);
    }

    #[test]
    fn open_vocabulary_keeps_everything() {
        let cfg = ParseConfig {
            mapping: MappingMode::None,
            ..ParseConfig::default()
        };
        let m = ClassMapper::new(&cfg, &Vocabulary::action_genome(), None).unwrap();
        let t = Triplet::unlocalized("dog", "chasing", "ball", Provenance::Caption);
        assert_eq!(m.map_one(&t).unwrap(), Ok(t));
    }

    #[test]
    fn llm_mapping_accepts_only_vocabulary_answers() {
        let cfg = ParseConfig {
            mapping: MappingMode::Llm,
            ..ParseConfig::default()
        };
        let client = scripted("holding");
        let m = ClassMapper::new(&cfg, &Vocabulary::action_genome(), Some(&client)).unwrap();
        let t = Triplet::unlocalized("person", "clutching", "cup", Provenance::Caption);
        assert_eq!(m.map_one(&t).unwrap().unwrap().predicate_class, "holding");
        // Memoized: a second lookup adds no request.
        let before = client.network_requests();
        m.map_one(&t).unwrap().unwrap();
        assert_eq!(client.network_requests(), before);

        let odd = scripted("a kind of hug");
        let m = ClassMapper::new(&cfg, &Vocabulary::action_genome(), Some(&odd)).unwrap();
        assert_eq!(m.map_one(&t).unwrap(), Err(Role::Predicate));
    }

    #[test]
    fn llm_mapping_needs_client() {
        let cfg = ParseConfig {
            mapping: MappingMode::Llm,
            ..ParseConfig::default()
        };
        assert!(ClassMapper::new(&cfg, &Vocabulary::action_genome(), None).is_err());
    }

    #[test]
    fn top_n_bounds_distinct_predicates() {
        let preds = ["a", "b", "b", "c", "c", "c", "d"];
        let ts: Vec<Triplet> = preds
            .iter()
            .map(|p| Triplet::unlocalized("x", *p, "y", Provenance::Caption))
            .collect();
        assert_eq!(top_predicates(&ts, 2), vec!["c", "b"]);
        assert_eq!(top_predicates(&ts, 3), vec!["c", "b", "a"]);
        let kept: BTreeSet<String> = top_predicates(&ts, 10).into_iter().collect();
        assert_eq!(kept.len(), 4);
    }

    #[test]
    fn modes_parse() {
        assert_eq!("rule".parse::<ParserKind>().unwrap(), ParserKind::Rule);
        assert_eq!("none".parse::<MappingMode>().unwrap(), MappingMode::None);
        assert_eq!(MappingMode::Lexicon.to_string(), "lexicon");
        assert!("wordnet".parse::<MappingMode>().is_err());
    }
}
