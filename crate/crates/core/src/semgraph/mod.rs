//! Hierarchical semantic graphs: one motion node, its action nodes (verbs) and
//! their specific nodes (attribute phrases), linked by semantic-role edges.

mod edit;
mod json;
mod parse;
mod validate;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use edit::{apply_edit, EditError, EditOp};
pub use json::{from_json, to_json, SchemaViolation, GRAPH_SCHEMA_VERSION};
pub use parse::{detokenize, parse_description, tokenize, ParseError};
pub use validate::{validate, Invariant, Violation};

/// Reserved token that replaces the text of a masked node.
pub const MASK_TOKEN: &str = "[MASK]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Motion,
    Action,
    Specific,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Motion => "motion",
            Level::Action => "action",
            Level::Specific => "specific",
        }
    }

    pub fn parse(s: &str) -> Option<Level> {
        match s {
            "motion" => Some(Level::Motion),
            "action" => Some(Level::Action),
            "specific" => Some(Level::Specific),
            _ => None,
        }
    }
}

/// Semantic role carried by an edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relation {
    /// agent
    Arg0,
    /// patient
    Arg1,
    /// instrument, benefactive
    Arg2,
    /// start point
    Arg3,
    /// end point
    Arg4,
    /// location
    ArgmLoc,
    /// manner
    ArgmMnr,
    /// time
    ArgmTmp,
    /// direction
    ArgmDir,
    /// miscellaneous
    ArgmAdv,
    /// motion-action dependency
    ArgmMa,
    /// any other argument type
    Others,
}

impl Relation {
    pub const COUNT: usize = 12;

    pub const ALL: [Relation; Relation::COUNT] = [
        Relation::Arg0,
        Relation::Arg1,
        Relation::Arg2,
        Relation::Arg3,
        Relation::Arg4,
        Relation::ArgmLoc,
        Relation::ArgmMnr,
        Relation::ArgmTmp,
        Relation::ArgmDir,
        Relation::ArgmAdv,
        Relation::ArgmMa,
        Relation::Others,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Relation::Arg0 => "ARG0",
            Relation::Arg1 => "ARG1",
            Relation::Arg2 => "ARG2",
            Relation::Arg3 => "ARG3",
            Relation::Arg4 => "ARG4",
            Relation::ArgmLoc => "ARGM-LOC",
            Relation::ArgmMnr => "ARGM-MNR",
            Relation::ArgmTmp => "ARGM-TMP",
            Relation::ArgmDir => "ARGM-DIR",
            Relation::ArgmAdv => "ARGM-ADV",
            Relation::ArgmMa => "ARGM-MA",
            Relation::Others => "OTHERS",
        }
    }

    /// Column of this relation in the relation embedding matrix.
    pub fn index(self) -> usize {
        Relation::ALL.iter().position(|r| *r == self).unwrap()
    }

    pub fn parse(s: &str) -> Option<Relation> {
        Relation::ALL.iter().copied().find(|r| r.as_str() == s)
    }

    /// Relations allowed on a motion→action edge.
    pub fn links_action(self) -> bool {
        matches!(self, Relation::ArgmMa | Relation::Others)
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Relation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Relation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Relation::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown relation {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub String);

impl NodeId {
    pub fn new(s: impl Into<String>) -> Self {
        NodeId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_string())
    }
}

/// Half-open token range `[start, end)` into the sentence tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[usize; 2]", from = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

impl From<[usize; 2]> for Span {
    fn from(a: [usize; 2]) -> Self {
        Span::new(a[0], a[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: NodeId,
    pub level: Level,
    pub text: String,
    pub span: Span,
    pub masked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub src: NodeId,
    pub dst: NodeId,
    pub relation: Relation,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticGraph {
    pub root: NodeId,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

impl SemanticGraph {
    pub fn node(&self, id: &NodeId) -> Option<&GraphNode> {
        self.nodes.iter().find(|n| &n.id == id)
    }

    pub fn node_index(&self, id: &NodeId) -> Option<usize> {
        self.nodes.iter().position(|n| &n.id == id)
    }

    pub fn root_node(&self) -> Option<&GraphNode> {
        self.node(&self.root)
    }

    /// Full sentence held by the motion node.
    pub fn sentence(&self) -> &str {
        self.root_node().map(|n| n.text.as_str()).unwrap_or("")
    }

    pub fn tokens(&self) -> Vec<String> {
        tokenize(self.sentence())
    }

    /// Sentence tokens as seen by a text encoder: tokens under masked spans are
    /// replaced by [`MASK_TOKEN`].
    pub fn encoder_tokens(&self) -> Vec<String> {
        let mut toks = self.tokens();
        for n in self.nodes.iter().filter(|n| n.masked) {
            for t in toks.iter_mut().take(n.span.end).skip(n.span.start) {
                *t = MASK_TOKEN.to_string();
            }
        }
        toks
    }

    pub fn nodes_at(&self, level: Level) -> impl Iterator<Item = &GraphNode> {
        self.nodes.iter().filter(move |n| n.level == level)
    }

    pub fn count(&self, level: Level) -> usize {
        self.nodes_at(level).count()
    }

    pub fn edge(&self, src: &NodeId, dst: &NodeId) -> Option<&GraphEdge> {
        self.edges.iter().find(|e| &e.src == src && &e.dst == dst)
    }

    pub fn children<'a>(&'a self, id: &'a NodeId) -> impl Iterator<Item = &'a GraphEdge> + 'a {
        self.edges.iter().filter(move |e| &e.src == id)
    }

    pub fn parent_edge(&self, id: &NodeId) -> Option<&GraphEdge> {
        self.edges.iter().find(|e| &e.dst == id)
    }
}
