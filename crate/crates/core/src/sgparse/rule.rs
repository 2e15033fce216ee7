//! Pattern-based subject-verb-object extraction.
//!
//! Tokens are tagged from closed word lists: determiners, pronouns,
//! prepositions/particles, clause breakers, auxiliaries and a verb table
//! with all inflected forms. Everything else is a content word, and a run
//! of content words is a noun phrase whose last word is its head.

use crate::model::{Provenance, Triplet};

/// (base, third person, past, gerund)
const VERBS: &[(&str, &str, &str, &str)] = &[
    ("bring", "brings", "brought", "bringing"),
    ("carry", "carries", "carried", "carrying"),
    ("clean", "cleans", "cleaned", "cleaning"),
    ("close", "closes", "closed", "closing"),
    ("cook", "cooks", "cooked", "cooking"),
    ("cover", "covers", "covered", "covering"),
    ("drink", "drinks", "drank", "drinking"),
    ("drop", "drops", "dropped", "dropping"),
    ("eat", "eats", "ate", "eating"),
    ("enter", "enters", "entered", "entering"),
    ("fix", "fixes", "fixed", "fixing"),
    ("fold", "folds", "folded", "folding"),
    ("get", "gets", "got", "getting"),
    ("go", "goes", "went", "going"),
    ("grab", "grabs", "grabbed", "grabbing"),
    ("hold", "holds", "held", "holding"),
    ("hug", "hugs", "hugged", "hugging"),
    ("lean", "leans", "leaned", "leaning"),
    ("leave", "leaves", "left", "leaving"),
    ("lie", "lies", "lay", "lying"),
    ("look", "looks", "looked", "looking"),
    ("open", "opens", "opened", "opening"),
    ("pick", "picks", "picked", "picking"),
    ("place", "places", "placed", "placing"),
    ("play", "plays", "played", "playing"),
    ("pour", "pours", "poured", "pouring"),
    ("pull", "pulls", "pulled", "pulling"),
    ("push", "pushes", "pushed", "pushing"),
    ("put", "puts", "put", "putting"),
    ("read", "reads", "read", "reading"),
    ("sit", "sits", "sat", "sitting"),
    ("stand", "stands", "stood", "standing"),
    ("sweep", "sweeps", "swept", "sweeping"),
    ("take", "takes", "took", "taking"),
    ("throw", "throws", "threw", "throwing"),
    ("tidy", "tidies", "tidied", "tidying"),
    ("touch", "touches", "touched", "touching"),
    ("turn", "turns", "turned", "turning"),
    ("twist", "twists", "twisted", "twisting"),
    ("type", "types", "typed", "typing"),
    ("use", "uses", "used", "using"),
    ("walk", "walks", "walked", "walking"),
    ("wash", "washes", "washed", "washing"),
    ("watch", "watches", "watched", "watching"),
    ("wear", "wears", "wore", "wearing"),
    ("wipe", "wipes", "wiped", "wiping"),
    ("work", "works", "worked", "working"),
    ("write", "writes", "wrote", "writing"),
];

const DETERMINERS: &[&str] = &[
    "a", "an", "the", "his", "her", "their", "its", "my", "your", "our", "this", "that", "these", "those", "some",
    "another", "each",
];

const PRONOUNS: &[&str] = &["he", "she", "they", "it", "him", "them", "someone", "somebody"];

const PARTICLES: &[&str] = &[
    "on", "onto", "in", "into", "at", "from", "with", "to", "off", "up", "down", "out", "over", "under", "behind",
    "beneath", "above", "around", "through", "toward", "towards", "away", "back", "by", "against", "near", "of", "for",
];

const BREAKERS: &[&str] = &[
    "and", "then", "while", "before", "after", "as", "when", "but", "or", "so", "until", "once",
];

const SKIP: &[&str] = &[
    "is", "are", "was", "were", "be", "been", "being", "am", "also", "again", "just", "still", "quickly", "slowly",
    "finally", "first", "next", "later", "now", "very", "there", "here", "not", "can", "will", "would", "starts",
    "begins", "seems", "appears",
];

/// Gerund for any inflected form in the verb table.
pub fn gerund(word: &str) -> Option<&'static str> {
    VERBS
        .iter()
        .find(|(b, s, p, g)| [*b, *s, *p, *g].contains(&word))
        .map(|v| v.3)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Tag<'a> {
    Det,
    Pron(&'a str),
    Verb(&'static str),
    Particle(&'a str),
    Break,
    Skip,
    Content(&'a str),
}

fn tag(word: &str) -> Tag<'_> {
    if DETERMINERS.contains(&word) {
        Tag::Det
    } else if PRONOUNS.contains(&word) {
        Tag::Pron(word)
    } else if let Some(g) = gerund(word) {
        Tag::Verb(g)
    } else if PARTICLES.contains(&word) {
        Tag::Particle(word)
    } else if BREAKERS.contains(&word) {
        Tag::Break
    } else if SKIP.contains(&word) {
        Tag::Skip
    } else {
        Tag::Content(word)
    }
}

fn tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '\'' || ch == '-' {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if matches!(ch, ',' | ';' | '.' | '!' | '?' | ':') {
                out.push(",".into());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Consumes a noun phrase starting at `i`; returns its head and the index
/// after it. A trailing `of`-phrase is swallowed.
fn noun_phrase(tags: &[Tag<'_>], mut i: usize) -> Option<(String, usize)> {
    if let Some(Tag::Pron(p)) = tags.get(i) {
        return Some((p.to_string(), i + 1));
    }
    while tags.get(i) == Some(&Tag::Det) {
        i += 1;
    }
    let mut head = None;
    while let Some(Tag::Content(w)) = tags.get(i) {
        head = Some(w.to_string());
        i += 1;
    }
    let head = head?;
    if tags.get(i) == Some(&Tag::Particle("of")) {
        if let Some((_, after)) = noun_phrase(tags, i + 1) {
            i = after;
        }
    }
    Some((head, i))
}

/// Triplets in reading order. Subjects carry across clause breaks so
/// coordinated verb phrases share the earlier subject.
pub fn parse_rule(text: &str) -> Vec<Triplet> {
    let toks = tokens(text);
    let tags: Vec<Tag<'_>> = toks
        .iter()
        .map(|t| if t == "," { Tag::Break } else { tag(t) })
        .collect();
    let mut out = Vec::new();
    let mut subject: Option<String> = None;
    let mut verb: Option<String> = None;
    let mut clause_has_verb = false;
    let mut i = 0;
    while i < tags.len() {
        match tags[i] {
            Tag::Verb(g) => {
                clause_has_verb = true;
                let mut predicate = g.to_string();
                if let Some(Tag::Particle(p)) = tags.get(i + 1) {
                    if *p != "of" {
                        predicate = format!("{g} {p}");
                        i += 1;
                    }
                }
                verb = Some(predicate);
                i += 1;
            }
            Tag::Break => {
                verb = None;
                clause_has_verb = false;
                i += 1;
            }
            Tag::Skip | Tag::Particle(_) => i += 1,
            Tag::Det | Tag::Pron(_) | Tag::Content(_) => {
                let Some((head, next)) = noun_phrase(&tags, i) else {
                    i += 1;
                    continue;
                };
                match (&verb, &subject) {
                    (Some(p), Some(s)) => {
                        out.push(Triplet::unlocalized(s.clone(), p.clone(), head, Provenance::Caption));
                        verb = None;
                    }
                    (None, _) if !clause_has_verb => subject = Some(head),
                    _ => {}
                }
                i = next;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys(text: &str) -> Vec<(String, String, String)> {
        parse_rule(text)
            .into_iter()
            .map(|t| (t.subject_class, t.predicate_class, t.object_class))
            .collect()
    }

    fn k(s: &str, p: &str, o: &str) -> (String, String, String) {
        (s.into(), p.into(), o.into())
    }

    #[test]
    fn cup_sentence() {
        assert_eq!(
            keys("The person takes a cup of water to drink"),
            vec![k("person", "taking", "cup")]
        );
    }

    #[test]
    fn sofa_sentence() {
        assert_eq!(
            keys("the person sits on the sofa"),
            vec![k("person", "sitting on", "sofa")]
        );
    }

    #[test]
    fn fragment_without_verb() {
        assert!(keys("the red sofa").is_empty());
    }

    #[test]
    fn purpose_clause_keeps_subject() {
        assert_eq!(
            keys("The person sits on the sofa to watch television."),
            vec![k("person", "sitting on", "sofa"), k("person", "watching", "television")]
        );
    }

    #[test]
    fn coordination_and_auxiliary() {
        assert_eq!(
            keys("A man is holding a book and then puts the book on the table."),
            vec![k("man", "holding", "book"), k("man", "putting", "book")]
        );
    }

    #[test]
    fn pronoun_subject_and_object() {
        assert_eq!(keys("She opens it."), vec![k("she", "opening", "it")]);
    }

    #[test]
    fn gerund_lookup() {
        assert_eq!(gerund("sat"), Some("sitting"));
        assert_eq!(gerund("drinks"), Some("drinking"));
        assert_eq!(gerund("sofa"), None);
    }
}
