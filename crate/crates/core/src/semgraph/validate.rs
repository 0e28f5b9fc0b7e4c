use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::Serialize;

use super::{tokenize, Level, SemanticGraph};

/// Structural rule that a violation breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Invariant {
    SingleMotionRoot,
    UniqueNodeIds,
    EdgeEndpointsExist,
    ActionHasMotionParent,
    SpecificHasActionParent,
    EdgeLevels,
    EdgeRelation,
    NonNegativeWeight,
    Acyclic,
    SpanInRange,
    MotionCoversSentence,
    ActionSpansOneToken,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    /// Offending node id or edge (`src->dst`).
    pub subject: String,
    pub invariant: Invariant,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {:?}: {}", self.subject, self.invariant, self.detail)
    }
}

/// Checks every structural invariant; an empty list means the graph is valid.
pub fn validate(g: &SemanticGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |subject: String, invariant, detail: String| out.push(Violation { subject, invariant, detail });

    let mut seen = HashSet::new();
    for n in &g.nodes {
        if !seen.insert(&n.id) {
            push(n.id.to_string(), Invariant::UniqueNodeIds, "duplicate node id".into());
        }
    }
    let level_of: HashMap<_, _> = g.nodes.iter().map(|n| (&n.id, n.level)).collect();

    match g.root_node() {
        Some(r) if r.level == Level::Motion => {}
        Some(_) => push(g.root.to_string(), Invariant::SingleMotionRoot, "root is not a motion node".into()),
        None => push(g.root.to_string(), Invariant::SingleMotionRoot, "root id does not exist".into()),
    }
    for n in g.nodes_at(Level::Motion).filter(|n| n.id != g.root) {
        push(n.id.to_string(), Invariant::SingleMotionRoot, "second motion node; only the root may be a motion node".into());
    }

    let mut incoming: HashMap<_, Vec<_>> = HashMap::new();
    for e in &g.edges {
        let subject = format!("{}->{}", e.src, e.dst);
        let (Some(&ls), Some(&ld)) = (level_of.get(&e.src), level_of.get(&e.dst)) else {
            push(subject, Invariant::EdgeEndpointsExist, "edge references a missing node".into());
            continue;
        };
        incoming.entry(&e.dst).or_default().push(e);
        if !(e.weight >= 0.0 && e.weight.is_finite()) {
            push(subject.clone(), Invariant::NonNegativeWeight, format!("weight {} is not a finite nonnegative number", e.weight));
        }
        match (ls, ld) {
            (Level::Motion, Level::Action) => {
                if !e.relation.links_action() {
                    push(subject, Invariant::EdgeRelation, format!("motion->action edge carries {}", e.relation));
                }
            }
            (Level::Action, Level::Specific) => {
                if e.relation.links_action() && e.relation != super::Relation::Others {
                    push(subject, Invariant::EdgeRelation, format!("action->specific edge carries {}", e.relation));
                }
            }
            _ => push(subject, Invariant::EdgeLevels, format!("{} -> {} edge is not allowed", ls.as_str(), ld.as_str())),
        }
    }

    for n in &g.nodes {
        let parents = incoming.get(&n.id).map(Vec::as_slice).unwrap_or(&[]);
        let (want, inv) = match n.level {
            Level::Motion => continue,
            Level::Action => (Level::Motion, Invariant::ActionHasMotionParent),
            Level::Specific => (Level::Action, Invariant::SpecificHasActionParent),
        };
        let from_want = parents.iter().filter(|e| level_of.get(&e.src) == Some(&want)).count();
        if parents.len() != 1 || from_want != 1 {
            push(
                n.id.to_string(),
                inv,
                format!("expected exactly one incoming edge from a {} node, found {}", want.as_str(), parents.len()),
            );
        }
    }

    if has_cycle(g) {
        push(g.root.to_string(), Invariant::Acyclic, "edge set contains a cycle".into());
    }

    let n_tokens = g.root_node().map(|r| tokenize(&r.text).len()).unwrap_or(0);
    for n in &g.nodes {
        if n.span.is_empty() || n.span.end > n_tokens {
            push(
                n.id.to_string(),
                Invariant::SpanInRange,
                format!("span [{}, {}) outside sentence of {} tokens", n.span.start, n.span.end, n_tokens),
            );
            continue;
        }
        match n.level {
            Level::Motion if n.id == g.root && (n.span.start != 0 || n.span.end != n_tokens) => push(
                n.id.to_string(),
                Invariant::MotionCoversSentence,
                "motion span must cover the whole sentence".into(),
            ),
            Level::Action => {
                let linked_as_action = g.parent_edge(&n.id).is_some_and(|e| e.relation == super::Relation::ArgmMa);
                if linked_as_action && n.span.len() != 1 {
                    push(n.id.to_string(), Invariant::ActionSpansOneToken, format!("action span has {} tokens", n.span.len()));
                }
            }
            _ => {}
        }
    }
    out
}

fn has_cycle(g: &SemanticGraph) -> bool {
    let index: HashMap<_, _> = g.nodes.iter().enumerate().map(|(i, n)| (&n.id, i)).collect();
    let mut adj = vec![Vec::new(); g.nodes.len()];
    for e in &g.edges {
        if let (Some(&s), Some(&d)) = (index.get(&e.src), index.get(&e.dst)) {
            adj[s].push(d);
        }
    }
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state = vec![0u8; g.nodes.len()];
    fn visit(u: usize, adj: &[Vec<usize>], state: &mut [u8]) -> bool {
        state[u] = 1;
        for &v in &adj[u] {
            if state[v] == 1 || (state[v] == 0 && visit(v, adj, state)) {
                return true;
            }
        }
        state[u] = 2;
        false
    }
    (0..g.nodes.len()).any(|u| state[u] == 0 && visit(u, &adj, &mut state))
}
