//! Refinement edits. Every edit returns a new graph; the sentence held by the
//! motion node is rewritten alongside so spans keep pointing at the right
//! tokens.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::parse::{action_id, specific_id};
use super::{
    detokenize, tokenize, validate, GraphEdge, GraphNode, Level, NodeId, Relation, SemanticGraph, Span, Violation,
    MASK_TOKEN,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EditOp {
    SetEdgeWeight { src: NodeId, dst: NodeId, weight: f64 },
    MaskNode { node: NodeId },
    ModifyNode { node: NodeId, text: String },
    DeleteNode { node: NodeId },
    AddNode { parent: NodeId, level: Level, text: String, relation: Relation },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EditError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("unknown edge {src}->{dst}")]
    UnknownEdge { src: NodeId, dst: NodeId },
    #[error("the motion root cannot be deleted")]
    CannotDeleteRoot,
    #[error("the motion root cannot be masked or modified")]
    RootNotEditable,
    #[error("invalid attachment: {0}")]
    InvalidAttachment(String),
    #[error("edge weight {0} must be finite and nonnegative")]
    InvalidWeight(f64),
    #[error("replacement text is empty")]
    EmptyText,
    #[error("input graph is invalid: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidGraph(Vec<Violation>),
}

/// Where a token of the rewritten sentence came from.
#[derive(Debug, Clone, PartialEq)]
enum Origin {
    Old(usize),
    New(NodeId),
}

struct Rewrite {
    tokens: Vec<(String, Origin)>,
}

impl Rewrite {
    fn from_graph(g: &SemanticGraph) -> Self {
        let tokens = g.tokens().into_iter().enumerate().map(|(i, t)| (t, Origin::Old(i))).collect();
        Rewrite { tokens }
    }

    fn position_of_old(&self, old: usize) -> Option<usize> {
        self.tokens.iter().position(|(_, o)| *o == Origin::Old(old))
    }

    /// Recomputes every node span from token origins and rewrites the sentence.
    fn finish(self, old_spans: &[(NodeId, Span)], mut g: SemanticGraph) -> SemanticGraph {
        let words: Vec<String> = self.tokens.iter().map(|(t, _)| t.clone()).collect();
        for n in g.nodes.iter_mut() {
            if n.id == g.root {
                n.span = Span::new(0, words.len());
                n.text = detokenize(&words);
                continue;
            }
            let old = old_spans.iter().find(|(id, _)| id == &n.id).map(|(_, s)| *s);
            let owned: Vec<usize> = self
                .tokens
                .iter()
                .enumerate()
                .filter(|(_, (_, o))| match o {
                    Origin::Old(i) => old.is_some_and(|s| *i >= s.start && *i < s.end),
                    Origin::New(id) => id == &n.id,
                })
                .map(|(p, _)| p)
                .collect();
            if let (Some(&lo), Some(&hi)) = (owned.first(), owned.last()) {
                n.span = Span::new(lo, hi + 1);
            }
        }
        g
    }
}

fn is_connective(t: &str) -> bool {
    matches!(t, "," | "and" | "then")
}

fn is_terminal(t: &str) -> bool {
    matches!(t, "." | "!" | "?")
}

/// Tidies connectives left dangling after token removal: a run of connectives
/// before the sentence mark or before the first surviving clause is dropped,
/// and any longer run collapses to its last token.
fn tidy_connectives(tokens: &mut Vec<(String, Origin)>, clause_tokens: &[usize]) {
    let mut out: Vec<(String, Origin)> = Vec::with_capacity(tokens.len());
    let mut run: Vec<(String, Origin)> = Vec::new();
    let mut seen_clause = false;
    for tok in tokens.drain(..) {
        if is_connective(&tok.0) {
            run.push(tok);
            continue;
        }
        if !run.is_empty() && !is_terminal(&tok.0) && seen_clause {
            if run.len() > 1 && run.iter().any(|(t, _)| t == ",") && run.last().is_some_and(|(t, _)| t != ",") {
                // ", and" style: keep the comma before the final conjunction
                let last = run.pop().unwrap();
                out.push(("," .to_string(), run.into_iter().find(|(t, _)| t == ",").unwrap().1));
                out.push(last);
            } else {
                out.push(run.pop().unwrap());
            }
        }
        run = Vec::new();
        seen_clause |= matches!(tok.1, Origin::Old(i) if clause_tokens.contains(&i));
        out.push(tok);
    }
    *tokens = out;
}

fn old_spans(g: &SemanticGraph) -> Vec<(NodeId, Span)> {
    g.nodes.iter().map(|n| (n.id.clone(), n.span)).collect()
}

fn check_weight(w: f64) -> Result<(), EditError> {
    if w.is_finite() && w >= 0.0 {
        Ok(())
    } else {
        Err(EditError::InvalidWeight(w))
    }
}

fn next_index(g: &SemanticGraph, prefix: &str) -> usize {
    g.nodes
        .iter()
        .filter_map(|n| n.id.as_str().strip_prefix(prefix))
        .filter_map(|rest| rest.parse::<usize>().ok())
        .max()
        .map_or(0, |m| m + 1)
}

/// Applies one refinement edit, returning a new graph. The input is untouched.
pub fn apply_edit(graph: &SemanticGraph, op: &EditOp) -> Result<SemanticGraph, EditError> {
    let violations = validate(graph);
    if !violations.is_empty() {
        return Err(EditError::InvalidGraph(violations));
    }
    let require = |id: &NodeId| graph.node(id).ok_or_else(|| EditError::UnknownNode(id.clone()));

    match op {
        EditOp::SetEdgeWeight { src, dst, weight } => {
            check_weight(*weight)?;
            let mut g = graph.clone();
            let e = g
                .edges
                .iter_mut()
                .find(|e| &e.src == src && &e.dst == dst)
                .ok_or_else(|| EditError::UnknownEdge { src: src.clone(), dst: dst.clone() })?;
            e.weight = *weight;
            Ok(g)
        }
        EditOp::MaskNode { node } => {
            require(node)?;
            if node == &graph.root {
                return Err(EditError::RootNotEditable);
            }
            let mut g = graph.clone();
            let n = g.nodes.iter_mut().find(|n| &n.id == node).unwrap();
            n.text = MASK_TOKEN.to_string();
            n.masked = true;
            Ok(g)
        }
        EditOp::ModifyNode { node, text } => {
            let target = require(node)?;
            if node == &graph.root {
                return Err(EditError::RootNotEditable);
            }
            let words: Vec<String> = tokenize(text).into_iter().filter(|t| !t.chars().all(|c| c.is_ascii_punctuation())).collect();
            if words.is_empty() {
                return Err(EditError::EmptyText);
            }
            if target.level == Level::Action && words.len() != 1 {
                return Err(EditError::InvalidAttachment("an action node holds exactly one verb token".into()));
            }
            let mut rw = Rewrite::from_graph(graph);
            let start = rw.position_of_old(target.span.start).unwrap();
            rw.tokens.drain(start..start + target.span.len());
            for (k, w) in words.iter().enumerate() {
                rw.tokens.insert(start + k, (w.clone(), Origin::New(node.clone())));
            }
            let mut g = graph.clone();
            let n = g.nodes.iter_mut().find(|n| &n.id == node).unwrap();
            n.text = words.join(" ");
            n.masked = false;
            Ok(rw.finish(&old_spans(graph), g))
        }
        EditOp::DeleteNode { node } => {
            let target = require(node)?;
            if node == &graph.root {
                return Err(EditError::CannotDeleteRoot);
            }
            let mut doomed = vec![node.clone()];
            if target.level == Level::Action {
                doomed.extend(graph.children(node).map(|e| e.dst.clone()));
            }
            // tokens to drop: the doomed spans, and for an action everything
            // from its verb through its last specific
            let mut lo = usize::MAX;
            let mut hi = 0;
            for id in &doomed {
                let s = graph.node(id).unwrap().span;
                lo = lo.min(s.start);
                hi = hi.max(s.end);
            }
            let drop: Box<dyn Fn(usize) -> bool> = if target.level == Level::Action {
                Box::new(move |i| i >= lo && i < hi)
            } else {
                let s = target.span;
                Box::new(move |i| i >= s.start && i < s.end)
            };
            let mut rw = Rewrite::from_graph(graph);
            rw.tokens.retain(|(_, o)| !matches!(o, Origin::Old(i) if drop(*i)));
            let clause_tokens: Vec<usize> = graph
                .nodes
                .iter()
                .filter(|n| n.level != Level::Motion && !doomed.contains(&n.id))
                .flat_map(|n| n.span.start..n.span.end)
                .collect();
            tidy_connectives(&mut rw.tokens, &clause_tokens);
            let mut g = graph.clone();
            g.nodes.retain(|n| !doomed.contains(&n.id));
            g.edges.retain(|e| !doomed.contains(&e.src) && !doomed.contains(&e.dst));
            Ok(rw.finish(&old_spans(graph), g))
        }
        EditOp::AddNode { parent, level, text, relation } => {
            let parent_node = require(parent)?;
            let words: Vec<String> = tokenize(text).into_iter().filter(|t| !t.chars().all(|c| c.is_ascii_punctuation())).collect();
            if words.is_empty() {
                return Err(EditError::EmptyText);
            }
            let mut rw = Rewrite::from_graph(graph);
            let mut g = graph.clone();
            let (id, insert_at, lead): (NodeId, usize, Vec<String>) = match (parent_node.level, level) {
                (Level::Motion, Level::Action) => {
                    if !relation.links_action() {
                        return Err(EditError::InvalidAttachment(format!("motion->action edges carry ARGM-MA or OTHERS, not {relation}")));
                    }
                    if words.len() != 1 {
                        return Err(EditError::InvalidAttachment("an action node holds exactly one verb token".into()));
                    }
                    let id = action_id(next_index(graph, "a"));
                    let end = rw.tokens.iter().rposition(|(t, _)| !is_terminal(t)).map_or(0, |p| p + 1);
                    let lead = if graph.count(Level::Action) > 0 { vec!["and".to_string()] } else { vec![] };
                    (id, end, lead)
                }
                (Level::Action, Level::Specific) => {
                    if *relation == Relation::ArgmMa {
                        return Err(EditError::InvalidAttachment("ARGM-MA links motion to action only".into()));
                    }
                    let prefix = format!("{parent}.s");
                    let id = specific_id(parent, next_index(graph, &prefix));
                    let last_old = std::iter::once(parent_node.span.end)
                        .chain(graph.children(parent).map(|e| graph.node(&e.dst).unwrap().span.end))
                        .max()
                        .unwrap();
                    let at = rw.position_of_old(last_old - 1).unwrap() + 1;
                    (id, at, vec![])
                }
                (pl, l) => {
                    return Err(EditError::InvalidAttachment(format!(
                        "a {} node cannot be attached under a {} node",
                        l.as_str(),
                        pl.as_str()
                    )))
                }
            };
            let new_tokens = lead
                .into_iter()
                .map(|t| (t, Origin::New(NodeId::new(""))))
                .chain(words.iter().map(|w| (w.clone(), Origin::New(id.clone()))));
            rw.tokens.splice(insert_at..insert_at, new_tokens);
            g.nodes.push(GraphNode {
                id: id.clone(),
                level: *level,
                text: words.join(" "),
                span: Span::new(0, 0),
                masked: false,
            });
            g.edges.push(GraphEdge { src: parent.clone(), dst: id, relation: *relation, weight: 1.0 });
            Ok(rw.finish(&old_spans(graph), g))
        }
    }
}
