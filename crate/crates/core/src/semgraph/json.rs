//! Canonical JSON wire format for graphs:
//! `{version, root, nodes:[{id, level, text, span:[start,end], masked}], edges:[{src, dst, relation, weight}]}`.
//! Keys are emitted in sorted order so equal graphs serialize identically.

use serde_json::{Map, Value};
use thiserror::Error;

use super::{GraphEdge, GraphNode, Level, NodeId, Relation, SemanticGraph, Span};

pub const GRAPH_SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("schema violation at {path}: {message}")]
pub struct SchemaViolation {
    /// JSON path of the offending field, e.g. `edges[2].relation`.
    pub path: String,
    pub message: String,
}

fn violation(path: impl Into<String>, message: impl Into<String>) -> SchemaViolation {
    SchemaViolation { path: path.into(), message: message.into() }
}

pub fn to_json(g: &SemanticGraph) -> String {
    let nodes: Vec<Value> = g
        .nodes
        .iter()
        .map(|n| {
            serde_json::json!({
                "id": n.id.as_str(),
                "level": n.level.as_str(),
                "text": n.text,
                "span": [n.span.start, n.span.end],
                "masked": n.masked,
            })
        })
        .collect();
    let edges: Vec<Value> = g
        .edges
        .iter()
        .map(|e| {
            serde_json::json!({
                "src": e.src.as_str(),
                "dst": e.dst.as_str(),
                "relation": e.relation.as_str(),
                "weight": e.weight,
            })
        })
        .collect();
    let doc = serde_json::json!({
        "version": GRAPH_SCHEMA_VERSION,
        "root": g.root.as_str(),
        "nodes": nodes,
        "edges": edges,
    });
    // serde_json's default map is ordered by key
    serde_json::to_string_pretty(&doc).expect("graph documents always serialize")
}

pub fn from_json(doc: &str) -> Result<SemanticGraph, SchemaViolation> {
    let v: Value = serde_json::from_str(doc).map_err(|e| violation("$", e.to_string()))?;
    from_value(&v)
}

pub(crate) fn from_value(v: &Value) -> Result<SemanticGraph, SchemaViolation> {
    let obj = v.as_object().ok_or_else(|| violation("$", "expected an object"))?;
    let version = field(obj, "", "version")?
        .as_u64()
        .ok_or_else(|| violation("version", "expected an unsigned integer"))?;
    if version != GRAPH_SCHEMA_VERSION {
        return Err(violation("version", format!("unsupported version {version}, expected {GRAPH_SCHEMA_VERSION}")));
    }
    let root = NodeId(string(obj, "", "root")?);
    let nodes = array(obj, "", "nodes")?
        .iter()
        .enumerate()
        .map(|(i, n)| node(n, &format!("nodes[{i}]")))
        .collect::<Result<Vec<_>, _>>()?;
    let edges = array(obj, "", "edges")?
        .iter()
        .enumerate()
        .map(|(i, e)| edge(e, &format!("edges[{i}]")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SemanticGraph { root, nodes, edges })
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn field<'a>(obj: &'a Map<String, Value>, prefix: &str, key: &str) -> Result<&'a Value, SchemaViolation> {
    obj.get(key).ok_or_else(|| violation(join(prefix, key), "missing field"))
}

fn string(obj: &Map<String, Value>, prefix: &str, key: &str) -> Result<String, SchemaViolation> {
    field(obj, prefix, key)?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| violation(join(prefix, key), "expected a string"))
}

fn array<'a>(obj: &'a Map<String, Value>, prefix: &str, key: &str) -> Result<&'a Vec<Value>, SchemaViolation> {
    field(obj, prefix, key)?
        .as_array()
        .ok_or_else(|| violation(join(prefix, key), "expected an array"))
}

fn object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>, SchemaViolation> {
    v.as_object().ok_or_else(|| violation(path, "expected an object"))
}

fn node(v: &Value, path: &str) -> Result<GraphNode, SchemaViolation> {
    let obj = object(v, path)?;
    let level_s = string(obj, path, "level")?;
    let level = Level::parse(&level_s).ok_or_else(|| {
        violation(join(path, "level"), format!("unknown level {level_s:?}; expected one of motion, action, specific"))
    })?;
    let span_path = join(path, "span");
    let span = array(obj, path, "span")?;
    let bounds: Vec<usize> = span
        .iter()
        .map(|x| x.as_u64().map(|x| x as usize))
        .collect::<Option<_>>()
        .filter(|b: &Vec<usize>| b.len() == 2)
        .ok_or_else(|| violation(&span_path, "expected [start, end] with unsigned integers"))?;
    let masked = field(obj, path, "masked")?
        .as_bool()
        .ok_or_else(|| violation(join(path, "masked"), "expected a boolean"))?;
    Ok(GraphNode {
        id: NodeId(string(obj, path, "id")?),
        level,
        text: string(obj, path, "text")?,
        span: Span::new(bounds[0], bounds[1]),
        masked,
    })
}

fn edge(v: &Value, path: &str) -> Result<GraphEdge, SchemaViolation> {
    let obj = object(v, path)?;
    let rel_s = string(obj, path, "relation")?;
    let relation = Relation::parse(&rel_s).ok_or_else(|| {
        let legal: Vec<_> = Relation::ALL.iter().map(|r| r.as_str()).collect();
        violation(
            join(path, "relation"),
            format!("unknown relation {rel_s:?}; expected one of {}", legal.join(", ")),
        )
    })?;
    let weight = field(obj, path, "weight")?
        .as_f64()
        .ok_or_else(|| violation(join(path, "weight"), "expected a number"))?;
    Ok(GraphEdge {
        src: NodeId(string(obj, path, "src")?),
        dst: NodeId(string(obj, path, "dst")?),
        relation,
        weight,
    })
}

fn to_value(g: &SemanticGraph) -> Value {
    serde_json::from_str(&to_json(g)).expect("canonical document parses")
}

impl serde::Serialize for SemanticGraph {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        to_value(self).serialize(s)
    }
}

impl<'de> serde::Deserialize<'de> for SemanticGraph {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        from_value(&v).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semgraph::parse_description;
    use proptest::prelude::*;

    const FIG1: &str = "a person walks forward, picks up an object with both hands, and stands still.";

    #[test]
    fn round_trip_is_byte_identical() {
        let g = parse_description(FIG1).unwrap();
        let doc = to_json(&g);
        let back = from_json(&doc).unwrap();
        assert_eq!(back, g);
        assert_eq!(to_json(&back), doc);
    }

    #[test]
    fn missing_relation_names_edge() {
        let g = parse_description(FIG1).unwrap();
        let mut v: Value = serde_json::from_str(&to_json(&g)).unwrap();
        v["edges"][2].as_object_mut().unwrap().remove("relation");
        let err = from_value(&v).unwrap_err();
        assert_eq!(err.path, "edges[2].relation");
    }

    #[test]
    fn unknown_relation_lists_legal_values() {
        let g = parse_description(FIG1).unwrap();
        let mut v: Value = serde_json::from_str(&to_json(&g)).unwrap();
        v["edges"][0]["relation"] = Value::String("ARGM-FOO".into());
        let err = from_value(&v).unwrap_err();
        assert_eq!(err.path, "edges[0].relation");
        for r in Relation::ALL {
            assert!(err.message.contains(r.as_str()), "{}", err.message);
        }
    }

    #[test]
    fn version_is_checked() {
        let g = parse_description("a person stands.").unwrap();
        let doc = to_json(&g).replace("\"version\": 1", "\"version\": 9");
        assert_eq!(from_json(&doc).unwrap_err().path, "version");
    }

    proptest! {
        #[test]
        fn weights_round_trip(w in 0.0f64..1e6) {
            let mut g = parse_description("a person walks quickly to the left.").unwrap();
            g.edges[1].weight = w;
            let doc = to_json(&g);
            let back = from_json(&doc).unwrap();
            prop_assert_eq!(&back, &g);
            prop_assert_eq!(to_json(&back), doc);
        }
    }
}
