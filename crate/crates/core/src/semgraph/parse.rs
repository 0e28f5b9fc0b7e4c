//! Rule-based semantic role parser for short motion descriptions.
//!
//! Verbs come from a closed lexicon of third-person forms. The tokens after
//! each verb, up to the next verb, are chunked into attribute phrases and each
//! phrase is labelled by its leading word (preposition, adverb class) or, for
//! bare noun phrases, as the patient.

use thiserror::Error;

use super::{GraphEdge, GraphNode, Level, NodeId, Relation, SemanticGraph, Span, MASK_TOKEN};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("description is empty")]
    Empty,
    /// No lexicon verb was found. `fallback` holds a graph with a single
    /// OTHERS-linked action node spanning the predicate.
    #[error("no verb found in {sentence:?}")]
    NoVerbFound {
        sentence: String,
        fallback: Box<SemanticGraph>,
    },
}

const VERBS: &[&str] = &[
    "walks", "runs", "jogs", "sprints", "strolls", "marches", "shuffles", "limps", "crawls",
    "turns", "rotates", "spins", "pivots", "jumps", "hops", "leaps", "skips", "stops", "pauses",
    "waits", "stands", "sits", "squats", "crouches", "kneels", "lies", "waves", "picks", "puts",
    "places", "grabs", "holds", "carries", "lifts", "raises", "lowers", "throws", "catches",
    "kicks", "punches", "pushes", "pulls", "reaches", "claps", "bows", "nods", "shakes",
    "swings", "stretches", "bends", "leans", "steps", "moves", "climbs", "dances", "zigzags",
    "stumbles", "falls", "rises", "gets", "goes", "comes", "returns", "backs", "slides",
    "drinks", "touches", "points", "crosses", "circles", "paces", "wobbles", "twists",
];

const DETERMINERS: &[&str] = &[
    "a", "an", "the", "his", "her", "their", "its", "my", "your", "this", "that", "some",
];

const DIRECTION_WORDS: &[&str] = &[
    "forward", "forwards", "backward", "backwards", "left", "right", "sideways", "around",
    "up", "down", "back", "away", "ahead", "straight", "clockwise", "counterclockwise",
    "upward", "upwards", "downward", "downwards", "diagonally", "off", "over", "out",
    "inward", "outward", "front", "side",
];

const TEMPORAL_WORDS: &[&str] = &[
    "again", "twice", "once", "briefly", "early", "repeatedly", "continuously", "first",
    "finally", "afterwards", "simultaneously", "later", "now", "immediately",
];

const ADVERBIAL_WORDS: &[&str] = &["still", "also", "too", "together", "instead", "only"];

const MANNER_WORDS: &[&str] = &["fast", "slow", "hard", "well", "quick", "backhand"];

const INTENSIFIERS: &[&str] = &["very", "really", "extremely", "quite", "more", "less", "so"];

const TIME_NOUNS: &[&str] = &[
    "second", "seconds", "minute", "minutes", "while", "moment", "moments", "bit", "time",
    "times", "beat",
];

const PATH_NOUNS: &[&str] = &[
    "circle", "circles", "line", "lines", "zigzag", "square", "pattern", "curve", "arc", "loop",
];

/// Tokens that separate clauses and phrases; never part of a phrase.
const BOUNDARIES: &[&str] = &[",", ".", "!", "?", ";", ":", "and", "then"];

const PREPOSITIONS: &[&str] = &[
    "to", "towards", "toward", "into", "onto", "from", "with", "using", "for", "in", "on",
    "at", "near", "behind", "beside", "under", "inside", "across", "along", "through",
    "like", "as", "during", "before", "after", "by", "past", "upon", "of",
];

fn is(set: &[&str], w: &str) -> bool {
    set.contains(&w)
}

fn is_punct(w: &str) -> bool {
    w.chars().all(|c| c.is_ascii_punctuation()) && w != MASK_TOKEN
}

/// Lowercases and splits on whitespace, separating leading and trailing
/// punctuation into their own tokens. The mask sentinel survives intact.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        if raw.eq_ignore_ascii_case(MASK_TOKEN) {
            out.push(MASK_TOKEN.to_string());
            continue;
        }
        let word = raw.to_lowercase();
        let chars: Vec<char> = word.chars().collect();
        let mut lo = 0;
        let mut hi = chars.len();
        let mut lead = Vec::new();
        while lo < hi && is_split_punct(chars[lo]) {
            lead.push(chars[lo].to_string());
            lo += 1;
        }
        let mut trail = Vec::new();
        while hi > lo && is_split_punct(chars[hi - 1]) {
            trail.push(chars[hi - 1].to_string());
            hi -= 1;
        }
        out.extend(lead);
        if lo < hi {
            out.push(chars[lo..hi].iter().collect());
        }
        out.extend(trail.into_iter().rev());
    }
    out
}

fn is_split_punct(c: char) -> bool {
    matches!(c, ',' | '.' | ';' | ':' | '!' | '?' | '"' | '(' | ')')
}

/// Joins tokens with single spaces, attaching punctuation to the previous token.
pub fn detokenize(tokens: &[String]) -> String {
    let mut s = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 && !is_punct(t) {
            s.push(' ');
        }
        s.push_str(t);
    }
    s
}

/// Tokens of the first sentence, always terminated by a sentence mark.
fn first_sentence(text: &str) -> Vec<String> {
    let mut toks = Vec::new();
    for t in tokenize(text) {
        let end = matches!(t.as_str(), "." | "!" | "?");
        toks.push(t);
        if end {
            break;
        }
    }
    if !toks.is_empty() && !matches!(toks.last().map(String::as_str), Some("." | "!" | "?")) {
        toks.push(".".to_string());
    }
    toks
}

fn is_verb_at(tokens: &[String], i: usize) -> bool {
    let w = tokens[i].as_str();
    if !is(VERBS, w) {
        return false;
    }
    // "a turn", "the stands": nominal uses after a determiner
    !(i > 0 && is(DETERMINERS, tokens[i - 1].as_str()))
}

fn is_manner(w: &str) -> bool {
    is(MANNER_WORDS, w) || (w.len() > 3 && w.ends_with("ly") && !is(TEMPORAL_WORDS, w) && !is(ADVERBIAL_WORDS, w))
}

/// True if `w` ends a noun phrase started before it.
fn stops_np(w: &str) -> bool {
    is(BOUNDARIES, w)
        || is(PREPOSITIONS, w)
        || is(VERBS, w)
        || is(TEMPORAL_WORDS, w)
        || is(ADVERBIAL_WORDS, w)
        || is(INTENSIFIERS, w)
        || is_manner(w)
        || is_punct(w)
}

/// Extends a noun phrase from `start` (exclusive of any preposition) to its end.
fn noun_phrase_end(tokens: &[String], start: usize, limit: usize) -> usize {
    let mut j = start;
    while j < limit {
        let w = tokens[j].as_str();
        if stops_np(w) {
            break;
        }
        if is(DIRECTION_WORDS, w) {
            // "the left", "a straight line" keep going; "an object forward" ends
            let after_det = j > start && is(DETERMINERS, tokens[j - 1].as_str());
            if !(j == start || after_det) {
                break;
            }
        }
        j += 1;
    }
    j
}

fn prepositional_role(prep: &str, head: &str) -> Relation {
    match prep {
        "to" if is(DIRECTION_WORDS, head) => Relation::ArgmDir,
        "to" | "into" | "onto" | "upon" => Relation::Arg4,
        "towards" | "toward" | "across" | "along" | "through" | "past" => Relation::ArgmDir,
        "from" | "of" => Relation::Arg3,
        "with" | "using" | "by" => Relation::Arg2,
        "for" if is(TIME_NOUNS, head) => Relation::ArgmTmp,
        "for" => Relation::Arg2,
        "in" if is(PATH_NOUNS, head) => Relation::ArgmMnr,
        "like" | "as" => Relation::ArgmMnr,
        "during" | "before" | "after" => Relation::ArgmTmp,
        _ => Relation::ArgmLoc,
    }
}

/// An attribute phrase found in a verb's region.
#[derive(Debug, Clone, PartialEq)]
struct Phrase {
    span: Span,
    relation: Relation,
}

fn chunk_region(tokens: &[String], start: usize, end: usize) -> Vec<Phrase> {
    let mut out = Vec::new();
    let mut i = start;
    while i < end {
        let w = tokens[i].as_str();
        if is(BOUNDARIES, w) || is_punct(w) {
            i += 1;
            continue;
        }
        let phrase = |s: usize, e: usize, r: Relation| Phrase { span: Span::new(s, e), relation: r };
        if is(PREPOSITIONS, w) {
            let np_end = noun_phrase_end(tokens, i + 1, end);
            if np_end > i + 1 {
                let head = tokens[np_end - 1].as_str();
                out.push(phrase(i, np_end, prepositional_role(w, head)));
                i = np_end;
            } else {
                let r = if is(DIRECTION_WORDS, w) { Relation::ArgmDir } else { Relation::Others };
                out.push(phrase(i, i + 1, r));
                i += 1;
            }
        } else if is(INTENSIFIERS, w) && i + 1 < end && is_manner(&tokens[i + 1]) {
            out.push(phrase(i, i + 2, Relation::ArgmMnr));
            i += 2;
        } else if is(DIRECTION_WORDS, w) {
            out.push(phrase(i, i + 1, Relation::ArgmDir));
            i += 1;
        } else if is(TEMPORAL_WORDS, w) {
            out.push(phrase(i, i + 1, Relation::ArgmTmp));
            i += 1;
        } else if is(ADVERBIAL_WORDS, w) {
            out.push(phrase(i, i + 1, Relation::ArgmAdv));
            i += 1;
        } else if is_manner(w) {
            out.push(phrase(i, i + 1, Relation::ArgmMnr));
            i += 1;
        } else {
            let np_end = noun_phrase_end(tokens, i, end).max(i + 1);
            out.push(phrase(i, np_end, Relation::Arg1));
            i = np_end;
        }
    }
    out
}

pub(crate) fn action_id(i: usize) -> NodeId {
    NodeId(format!("a{i}"))
}

pub(crate) fn specific_id(action: &NodeId, j: usize) -> NodeId {
    NodeId(format!("{action}.s{j}"))
}

pub(crate) fn root_id() -> NodeId {
    NodeId::new("m")
}

fn join(tokens: &[String], span: Span) -> String {
    tokens[span.start..span.end].join(" ")
}

/// Parses the first sentence of `text` into a hierarchical semantic graph.
///
/// Action nodes follow verb order in the sentence; every edge has weight 1.
pub fn parse_description(text: &str) -> Result<SemanticGraph, ParseError> {
    let tokens = first_sentence(text);
    if tokens.iter().all(|t| is_punct(t)) {
        return Err(ParseError::Empty);
    }
    let sentence = detokenize(&tokens);
    let root = root_id();
    let mut nodes = vec![GraphNode {
        id: root.clone(),
        level: Level::Motion,
        text: sentence.clone(),
        span: Span::new(0, tokens.len()),
        masked: false,
    }];
    let mut edges = Vec::new();

    let verbs: Vec<usize> = (0..tokens.len()).filter(|&i| is_verb_at(&tokens, i)).collect();
    if verbs.is_empty() {
        // predicate = everything after a leading determiner + noun subject
        let content_end = tokens.iter().rposition(|t| !is_punct(t)).map_or(0, |p| p + 1);
        let subj = if tokens.len() > 2 && is(DETERMINERS, tokens[0].as_str()) { 2 } else { 0 };
        let start = if subj < content_end { subj } else { 0 };
        let span = Span::new(start, content_end.max(start + 1));
        let id = action_id(0);
        nodes.push(GraphNode {
            id: id.clone(),
            level: Level::Action,
            text: join(&tokens, span),
            span,
            masked: false,
        });
        edges.push(GraphEdge { src: root.clone(), dst: id, relation: Relation::Others, weight: 1.0 });
        return Err(ParseError::NoVerbFound {
            sentence,
            fallback: Box::new(SemanticGraph { root, nodes, edges }),
        });
    }

    for (k, &v) in verbs.iter().enumerate() {
        let region_end = verbs.get(k + 1).copied().unwrap_or(tokens.len());
        let aid = action_id(k);
        nodes.push(GraphNode {
            id: aid.clone(),
            level: Level::Action,
            text: tokens[v].clone(),
            span: Span::new(v, v + 1),
            masked: false,
        });
        edges.push(GraphEdge { src: root.clone(), dst: aid.clone(), relation: Relation::ArgmMa, weight: 1.0 });
        for (j, p) in chunk_region(&tokens, v + 1, region_end).into_iter().enumerate() {
            let sid = specific_id(&aid, j);
            nodes.push(GraphNode {
                id: sid.clone(),
                level: Level::Specific,
                text: join(&tokens, p.span),
                span: p.span,
                masked: false,
            });
            edges.push(GraphEdge { src: aid.clone(), dst: sid, relation: p.relation, weight: 1.0 });
        }
    }
    Ok(SemanticGraph { root, nodes, edges })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specifics_of<'a>(g: &'a SemanticGraph, verb: &str) -> Vec<(&'a str, Relation)> {
        let a = g.nodes_at(Level::Action).find(|n| n.text == verb).unwrap();
        g.children(&a.id)
            .map(|e| (g.node(&e.dst).unwrap().text.as_str(), e.relation))
            .collect()
    }

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(tokenize("A person walks, then Stops."), ["a", "person", "walks", ",", "then", "stops", "."]);
        assert_eq!(tokenize("[mask] it"), [MASK_TOKEN, "it"]);
        let toks = tokenize("a person walks forward, and stops.");
        assert_eq!(detokenize(&toks), "a person walks forward, and stops.");
    }

    #[test]
    fn three_action_sentence() {
        let g = parse_description("a person walks forward, picks up an object with both hands, and stands still.").unwrap();
        let verbs: Vec<_> = g.nodes_at(Level::Action).map(|n| n.text.as_str()).collect();
        assert_eq!(verbs, ["walks", "picks", "stands"]);
        let picks = specifics_of(&g, "picks");
        assert!(picks.contains(&("with both hands", Relation::Arg2)));
        assert!(picks.contains(&("an object", Relation::Arg1)));
        assert_eq!(specifics_of(&g, "walks"), [("forward", Relation::ArgmDir)]);
        assert_eq!(specifics_of(&g, "stands"), [("still", Relation::ArgmAdv)]);
    }

    #[test]
    fn minimal_sentence() {
        let g = parse_description("a person stands.").unwrap();
        assert_eq!(g.count(Level::Motion), 1);
        assert_eq!(g.count(Level::Action), 1);
        assert_eq!(g.count(Level::Specific), 0);
        assert_eq!(g.edges.len(), 1);
        assert_eq!(g.edges[0].relation, Relation::ArgmMa);
    }

    #[test]
    fn manner_and_direction() {
        let g = parse_description("a figure turns quickly to the left.").unwrap();
        assert_eq!(
            specifics_of(&g, "turns"),
            [("quickly", Relation::ArgmMnr), ("to the left", Relation::ArgmDir)]
        );
    }

    #[test]
    fn prepositional_roles() {
        let g = parse_description("a man walks in a circle from the door to the chair for a while in a straight line.").unwrap();
        assert_eq!(
            specifics_of(&g, "walks"),
            [
                ("in a circle", Relation::ArgmMnr),
                ("from the door", Relation::Arg3),
                ("to the chair", Relation::Arg4),
                ("for a while", Relation::ArgmTmp),
                ("in a straight line", Relation::ArgmMnr),
            ]
        );
    }

    #[test]
    fn first_sentence_only_and_weights() {
        let g = parse_description("A person jumps. Then it sits down.").unwrap();
        assert_eq!(g.sentence(), "a person jumps.");
        assert!(g.edges.iter().all(|e| e.weight == 1.0));
    }

    #[test]
    fn nominal_use_is_not_a_verb() {
        let g = parse_description("a person makes a turn and waves.").unwrap();
        let verbs: Vec<_> = g.nodes_at(Level::Action).map(|n| n.text.as_str()).collect();
        assert_eq!(verbs, ["waves"]);
    }

    #[test]
    fn no_verb_is_signalled_with_fallback() {
        match parse_description("a person in the room.") {
            Err(ParseError::NoVerbFound { fallback, .. }) => {
                let a: Vec<_> = fallback.nodes_at(Level::Action).collect();
                assert_eq!(a.len(), 1);
                assert_eq!(a[0].text, "in the room");
                assert_eq!(fallback.edges[0].relation, Relation::Others);
            }
            other => panic!("expected NoVerbFound, got {other:?}"),
        }
        assert_eq!(parse_description("  "), Err(ParseError::Empty));
    }
}
