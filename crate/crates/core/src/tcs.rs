//! Temporality-aware caption segmentation.
//!
//! A caption is split into sentences listed in the order the events
//! happen. The default path asks a chat model (with recorded replies when
//! offline); [`rule_fallback_segment`] is a deterministic splitter on
//! sentence terminators and temporal markers.

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{render_messages, ChatMessage, LlmClient, LlmError, Pricing, TokenUsage};
use crate::model::SegmentedSentence;

pub const TASK_INSTRUCTION: &str = "Your job is to split the given video caption into multiple compositional sentences and arrange them in chronological order.";
pub const COREFERENCE_INSTRUCTION: &str =
    "Note that you should specify the objects for the pronouns used in each of these sentences.";
pub const FORMAT_INSTRUCTION: &str =
    "Answer with a numbered list (\"1. ...\"), one sentence per line, and nothing else.";

const EXEMPLARS: &str = include_str!("../assets/tcs_exemplars.v1.json");

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct Exemplar {
    pub caption: String,
    pub sentences: Vec<String>,
}

#[derive(Deserialize)]
struct ExemplarFile {
    version: u32,
    exemplars: Vec<Exemplar>,
}

/// The few-shot examples shipped with the crate and their asset version.
pub fn exemplars() -> (u32, Vec<Exemplar>) {
    let f: ExemplarFile = serde_json::from_str(EXEMPLARS).expect("bundled exemplars parse");
    (f.version, f.exemplars)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TcsMode {
    #[default]
    Llm,
    RuleFallback,
}

impl FromStr for TcsMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "llm" => Ok(Self::Llm),
            "rule_fallback" | "rule" => Ok(Self::RuleFallback),
            _ => Err(format!(
                "unknown segmentation mode {s:?}; expected llm or rule_fallback"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcsConfig {
    pub model_name: String,
    pub temperature: f64,
    pub endpoint: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub max_retries: u32,
    pub mode: TcsMode,
    /// Include the pronoun-resolution instruction in the prompt.
    pub coreference_clause: bool,
    /// Global ceiling on outgoing requests; `None` means unlimited.
    pub requests_per_second: Option<f64>,
    pub pricing: Pricing,
}

impl Default for TcsConfig {
    fn default() -> Self {
        Self {
            model_name: "gpt-3.5-turbo".into(),
            temperature: 0.0,
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            max_retries: 3,
            mode: TcsMode::Llm,
            coreference_clause: true,
            requests_per_second: None,
            pricing: Pricing::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum TcsError {
    #[error("caption is empty")]
    EmptyCaption,
    #[error("invalid segmentation config: {0}")]
    InvalidConfig(String),
    #[error("LLM mode needs a client")]
    NoClient,
    #[error(transparent)]
    Llm(#[from] LlmError),
}

impl TcsConfig {
    pub fn validate(&self) -> Result<(), TcsError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(TcsError::InvalidConfig(format!(
                "temperature {} must be >= 0",
                self.temperature
            )));
        }
        if self.model_name.trim().is_empty() {
            return Err(TcsError::InvalidConfig("model name is empty".into()));
        }
        Ok(())
    }
}

/// Chat messages for one caption: instructions, the few-shot examples as
/// alternating user/assistant turns, and the caption itself as the final
/// user turn.
pub fn build_messages(caption: &str, coreference_clause: bool) -> Vec<ChatMessage> {
    let mut system = String::from(TASK_INSTRUCTION);
    if coreference_clause {
        system.push(' ');
        system.push_str(COREFERENCE_INSTRUCTION);
    }
    system.push(' ');
    system.push_str(FORMAT_INSTRUCTION);
    let mut messages = vec![ChatMessage::system(system)];
    for ex in exemplars().1 {
        messages.push(ChatMessage::user(ex.caption));
        messages.push(ChatMessage::assistant(numbered_list(&ex.sentences)));
    }
    messages.push(ChatMessage::user(caption.trim()));
    messages
}

/// Full prompt text for `caption`. Equal captions give equal bytes.
pub fn build_prompt(caption: &str) -> String {
    render_messages(&build_messages(caption, true))
}

pub fn numbered_list<S: AsRef<str>>(items: &[S]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {}", i + 1, s.as_ref()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Parses a `1. ...` / `1) ...` list. Lines before the first item are
/// ignored; items must be numbered 1, 2, 3, ... Returns `None` when no
/// well-formed list is present.
pub fn parse_numbered_list(reply: &str) -> Option<Vec<String>> {
    let mut items = Vec::new();
    for line in reply.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let digits = line.bytes().take_while(u8::is_ascii_digit).count();
        let parsed = (digits > 0)
            .then(|| {
                let n: usize = line[..digits].parse().ok()?;
                let rest = line[digits..].strip_prefix(['.', ')'])?;
                let text = rest.trim().trim_matches('"').trim();
                (!text.is_empty()).then(|| (n, text.to_string()))
            })
            .flatten();
        match parsed {
            Some((n, text)) if n == items.len() + 1 => items.push(text),
            Some(_) => return None,
            None if items.is_empty() => continue,
            None => return None,
        }
    }
    (!items.is_empty()).then_some(items)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub sentences: Vec<SegmentedSentence>,
    pub usage: TokenUsage,
    /// The reply came from the response cache.
    pub cached: bool,
    /// The reply was not a numbered list and the caption was passed through.
    pub passthrough: bool,
}

fn to_sentences<S: Into<String>>(texts: impl IntoIterator<Item = S>) -> Vec<SegmentedSentence> {
    texts
        .into_iter()
        .enumerate()
        .map(|(i, t)| SegmentedSentence::new(i as u32 + 1, t))
        .collect()
}

/// Splits `caption` into temporally ordered sentences.
pub fn segment_caption(
    caption: &str,
    config: &TcsConfig,
    client: Option<&LlmClient>,
) -> Result<Segmentation, TcsError> {
    if caption.trim().is_empty() {
        return Err(TcsError::EmptyCaption);
    }
    config.validate()?;
    match config.mode {
        TcsMode::RuleFallback => Ok(Segmentation {
            sentences: rule_fallback_segment(caption),
            usage: TokenUsage::default(),
            cached: false,
            passthrough: false,
        }),
        TcsMode::Llm => {
            let client = client.ok_or(TcsError::NoClient)?;
            let messages = build_messages(caption, config.coreference_clause);
            let reply = client.complete(&config.model_name, config.temperature, &messages)?;
            let (sentences, passthrough) = match parse_numbered_list(&reply.content) {
                Some(items) => (to_sentences(items), false),
                None => {
                    log::warn!("unparseable segmentation reply, passing caption through: {caption:?}");
                    (to_sentences([caption.trim()]), true)
                }
            };
            Ok(Segmentation {
                sentences,
                usage: reply.usage,
                cached: reply.cached,
                passthrough,
            })
        }
    }
}

/// Keeps at most `max(1, frame_count - 1)` sentences; the excess is merged
/// into the last kept sentence.
pub fn cap_sentences(sentences: Vec<SegmentedSentence>, frame_count: u32) -> Vec<SegmentedSentence> {
    let cap = frame_count.saturating_sub(1).max(1) as usize;
    if sentences.len() <= cap {
        return sentences;
    }
    let mut kept: Vec<SegmentedSentence> = sentences[..cap].to_vec();
    let tail: Vec<&str> = sentences[cap - 1..].iter().map(|s| s.text.as_str()).collect();
    kept[cap - 1].text = tail.join(" ");
    kept
}

// ---------------------------------------------------------------------------
// rule fallback

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TemporalMarker {
    Before,
    After,
    Then,
    While,
    As,
    When,
}

impl TemporalMarker {
    pub const ALL: [Self; 6] = [Self::Before, Self::After, Self::Then, Self::While, Self::As, Self::When];

    pub fn word(self) -> &'static str {
        match self {
            Self::Before => "before",
            Self::After => "after",
            Self::Then => "then",
            Self::While => "while",
            Self::As => "as",
            Self::When => "when",
        }
    }

    fn parse(word: &str) -> Option<Self> {
        let w = word.trim_matches(|c: char| !c.is_alphanumeric()).to_ascii_lowercase();
        Self::ALL.into_iter().find(|m| m.word() == w)
    }

    /// For `A <marker> B`: does the clause after the marker happen first?
    pub fn following_clause_is_earlier(self) -> bool {
        matches!(self, Self::After)
    }
}

fn clean_clause(words: &[&str]) -> Option<String> {
    let mut words = words.to_vec();
    while let Some(last) = words.last() {
        let bare = last.trim_matches(|c: char| !c.is_alphanumeric());
        if bare.is_empty() || bare.eq_ignore_ascii_case("and") {
            words.pop();
        } else {
            break;
        }
    }
    while let Some(first) = words.first() {
        let bare = first.trim_matches(|c: char| !c.is_alphanumeric());
        if bare.is_empty() || bare.eq_ignore_ascii_case("and") {
            words.remove(0);
        } else {
            break;
        }
    }
    let text = words.join(" ");
    let text = text
        .trim()
        .trim_matches(|c: char| matches!(c, ',' | ';' | ':' | '.' | '!' | '?'))
        .trim();
    (!text.is_empty()).then(|| text.to_string())
}

fn segment_clause(words: &[&str]) -> Vec<String> {
    let Some((i, marker)) = words
        .iter()
        .enumerate()
        .find_map(|(i, w)| TemporalMarker::parse(w).map(|m| (i, m)))
    else {
        return clean_clause(words).into_iter().collect();
    };

    if i == 0 {
        let rest = &words[1..];
        if marker == TemporalMarker::Then {
            return segment_clause(rest);
        }
        // "<marker> B, A"
        let Some(comma) = rest.iter().position(|w| w.ends_with(',')) else {
            return segment_clause(rest);
        };
        let sub = segment_clause(&rest[..=comma]);
        let main = segment_clause(&rest[comma + 1..]);
        return if marker == TemporalMarker::Before {
            main.into_iter().chain(sub).collect()
        } else {
            sub.into_iter().chain(main).collect()
        };
    }

    let left: Vec<String> = clean_clause(&words[..i]).into_iter().collect();
    let right = segment_clause(&words[i + 1..]);
    if marker.following_clause_is_earlier() {
        right.into_iter().chain(left).collect()
    } else {
        left.into_iter().chain(right).collect()
    }
}

/// Deterministic segmentation without a language model. Splits on `.`,
/// `!`, `?`, `;` and on the markers before/after/then/while/as/when; the
/// clause following "after" is moved ahead of the one preceding it. No
/// pronoun resolution.
pub fn rule_fallback_segment(caption: &str) -> Vec<SegmentedSentence> {
    let mut out = Vec::new();
    for sentence in caption.split(['.', '!', '?', ';']) {
        let words: Vec<&str> = sentence.split_whitespace().collect();
        out.extend(segment_clause(&words));
    }
    if out.is_empty() {
        let whole = caption.trim().trim_end_matches(['.', '!', '?']).trim();
        out.push(if whole.is_empty() { caption.trim() } else { whole }.to_string());
    }
    to_sentences(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ChatReply, ChatRequest, ChatTransport, ClientOptions, FnTransport, ResponseCache};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn texts(s: &[SegmentedSentence]) -> Vec<&str> {
        s.iter().map(|s| s.text.as_str()).collect()
    }

    #[test]
    fn prompt_contains_instructions_and_ends_with_caption() {
        let p = build_prompt("A person eats.");
        assert!(p.contains("arrange them in chronological order"));
        assert!(p.contains("specify the objects for the pronouns"));
        let msgs = build_messages("A person eats.", true);
        let last = msgs.last().unwrap();
        assert_eq!(last.role, crate::llm::Role::User);
        assert_eq!(last.content, "A person eats.");
        assert!(p.ends_with("<|user|>\nA person eats.\n"));
        assert_eq!(p, build_prompt("A person eats."));
    }

    #[test]
    fn coreference_clause_can_be_dropped() {
        let msgs = build_messages("x", false);
        assert!(!msgs[0].content.contains("pronouns"));
    }

    #[test]
    fn numbered_list_parsing() {
        assert_eq!(
            parse_numbered_list("Here you go:\n1. A.\n2) B\n"),
            Some(vec!["A.".to_string(), "B".to_string()])
        );
        assert_eq!(parse_numbered_list("no list here"), None);
        assert_eq!(parse_numbered_list("1. a\n3. b"), None);
        assert_eq!(parse_numbered_list("1. a\ntrailing prose"), None);
    }

    #[test]
    fn rule_examples() {
        assert_eq!(
            texts(&rule_fallback_segment("He drinks, then he sits.")),
            ["He drinks", "he sits"]
        );
        assert_eq!(
            texts(&rule_fallback_segment("He sits after he drinks.")),
            ["he drinks", "He sits"]
        );
        assert_eq!(texts(&rule_fallback_segment("He waves.")), ["He waves"]);
        assert_eq!(
            texts(&rule_fallback_segment("After he drinks, he sits.")),
            ["he drinks", "he sits"]
        );
        assert_eq!(
            texts(&rule_fallback_segment("Before he sits, he drinks.")),
            ["he drinks", "he sits"]
        );
        assert_eq!(
            texts(&rule_fallback_segment("He opens the door and then walks in. He sits.")),
            ["He opens the door", "walks in", "He sits"]
        );
    }

    #[test]
    fn rule_output_is_numbered_from_one() {
        let s = rule_fallback_segment("A then B then C.");
        let idx: Vec<u32> = s.iter().map(|s| s.order_index).collect();
        assert_eq!(idx, [1, 2, 3]);
        assert!(s.iter().all(|s| s.aligned_frames.is_none()));
    }

    #[test]
    fn single_clause_passes_through_in_rule_mode() {
        let cfg = TcsConfig {
            mode: TcsMode::RuleFallback,
            ..TcsConfig::default()
        };
        let seg = segment_caption("A person opens a door.", &cfg, None).unwrap();
        assert_eq!(texts(&seg.sentences), ["A person opens a door"]);
    }

    fn scripted(reply: &'static str) -> Arc<dyn ChatTransport> {
        Arc::new(FnTransport(move |_: &ChatRequest<'_>| {
            Ok(ChatReply {
                content: reply.to_string(),
                usage: TokenUsage::new(680, 45),
            })
        }))
    }

    #[test]
    fn llm_mode_orders_and_caches() {
        let dir = tempfile::tempdir().unwrap();
        let client = LlmClient::new(
            Some(scripted(
                "1. The person takes a cup of water to drink.\n2. The person sits on the sofa to watch television.",
            )),
            Some(ResponseCache::new(dir.path())),
            ClientOptions::default(),
        );
        let caption = "The person takes a cup of water to drink before sitting on the sofa to watch television.";
        let cfg = TcsConfig::default();
        let a = segment_caption(caption, &cfg, Some(&client)).unwrap();
        assert_eq!(a.sentences.len(), 2);
        assert!(a.sentences[0].text.contains("drink"));
        assert!(a.sentences[1].text.contains("sofa"));
        assert_eq!(client.network_requests(), 1);
        let b = segment_caption(caption, &cfg, Some(&client)).unwrap();
        assert!(b.cached);
        assert_eq!(a.sentences, b.sentences);
        assert_eq!(client.network_requests(), 1);
    }

    #[test]
    fn unparseable_reply_passes_caption_through() {
        let client = LlmClient::new(
            Some(scripted("Sorry, I can't do that.")),
            None,
            ClientOptions::default(),
        );
        let seg = segment_caption("He waves.", &TcsConfig::default(), Some(&client)).unwrap();
        assert!(seg.passthrough);
        assert_eq!(texts(&seg.sentences), ["He waves."]);
    }

    #[test]
    fn negative_temperature_rejected() {
        let cfg = TcsConfig {
            temperature: -0.1,
            ..TcsConfig::default()
        };
        assert!(matches!(
            segment_caption("x", &cfg, None),
            Err(TcsError::InvalidConfig(_))
        ));
    }

    #[test]
    fn capping_merges_tail() {
        let s = to_sentences(["a", "b", "c", "d"]);
        let capped = cap_sentences(s.clone(), 3);
        assert_eq!(texts(&capped), ["a", "b c d"]);
        assert_eq!(cap_sentences(s.clone(), 10), s);
        assert_eq!(texts(&cap_sentences(s, 1)), ["a b c d"]);
    }

    // Expected order for "A <marker> B" written out independently of the
    // implementation's marker table.
    fn oracle_order(marker: &str) -> [char; 2] {
        match marker {
            "after" => ['B', 'A'],
            "before" | "then" | "while" | "as" | "when" => ['A', 'B'],
            _ => unreachable!(),
        }
    }

    const MARKERS: [&str; 6] = ["before", "after", "then", "while", "as", "when"];

    #[test]
    fn every_marker_orders_clauses_correctly() {
        for marker in MARKERS {
            let out = rule_fallback_segment(&format!("alpha eats {marker} beta sits."));
            let got: Vec<char> = out
                .iter()
                .map(|s| if s.text.starts_with("alpha") { 'A' } else { 'B' })
                .collect();
            assert_eq!(got, oracle_order(marker), "marker {marker}");
        }
    }

    fn clause() -> impl Strategy<Value = String> {
        prop::collection::vec("[a-z]{3,7}", 1..4).prop_filter_map("no markers", |ws| {
            let bad = ws.iter().any(|w| MARKERS.contains(&w.as_str()) || w == "and");
            (!bad).then(|| ws.join(" "))
        })
    }

    proptest! {
        #[test]
        fn marker_inversion_holds(a in clause(), b in clause(), m in 0usize..6) {
            let marker = MARKERS[m];
            let out = rule_fallback_segment(&format!("{a} {marker} {b}."));
            let want: Vec<&str> = oracle_order(marker)
                .iter()
                .map(|c| if *c == 'A' { a.as_str() } else { b.as_str() })
                .collect();
            prop_assert_eq!(texts(&out), want);
        }

        #[test]
        fn order_indices_contiguous(caption in "[a-z ,.]{1,80}") {
            let out = rule_fallback_segment(&caption);
            prop_assert!(!out.is_empty());
            for (i, s) in out.iter().enumerate() {
                prop_assert_eq!(s.order_index as usize, i + 1);
            }
        }
    }
}
