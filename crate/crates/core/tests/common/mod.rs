//! Direct loop-based evaluation of the graph attention layer, written
//! without tensors, shared by the oracle and acceptance tests.

#![allow(dead_code)]

use strata::graphreason::GatHostParams;
use strata::semgraph::{Relation, SemanticGraph};

pub fn lrelu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.2 * x
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

/// One layer, node by node.
pub fn oracle_layer(p: &GatHostParams, g: &SemanticGraph, v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = p.dim;
    let n = g.nodes.len();
    let nr = Relation::COUNT;
    let h: Vec<Vec<f64>> = v
        .iter()
        .map(|vi| (0..d).map(|r| (0..d).map(|c| p.w[r * d + c] * vi[c]).sum()).collect())
        .collect();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        // neighbours over both edge directions: (j, relation, weight)
        let mut nb = Vec::new();
        for e in &g.edges {
            let s = g.node_index(&e.src).unwrap();
            let t = g.node_index(&e.dst).unwrap();
            if t == i {
                nb.push((s, e.relation.index(), e.weight));
            }
            if s == i {
                nb.push((t, e.relation.index(), e.weight));
            }
        }
        let logits: Vec<f64> = nb
            .iter()
            .map(|&(j, r, _)| {
                let mut cat = h[i].clone();
                cat.extend(&h[j]);
                let common: f64 = (0..2 * d).map(|k| p.m[k] * cat[k]).sum();
                let rel: f64 = (0..2 * d).map(|k| p.m_r[k * nr + r] * cat[k]).sum();
                lrelu(common) + lrelu(rel)
            })
            .collect();
        let z: f64 = nb.iter().zip(&logits).map(|(&(_, _, w), e)| w * e.exp()).sum();
        let mut agg = vec![0.0; d];
        if z > 0.0 {
            for (&(j, _, w), e) in nb.iter().zip(&logits) {
                let c = w * e.exp() / z;
                for k in 0..d {
                    agg[k] += c * h[j][k];
                }
            }
        }
        out.push((0..d).map(|k| elu(agg[k]) + v[i][k]).collect());
    }
    out
}

/// Transformed features `W v` and the two pre-activation terms (shared and
/// relation-specific) of every message `(i, j)`, both directions.
pub struct Messages {
    pub h: Vec<Vec<f64>>,
    /// `(receiver, sender, relation, weight, shared, relational)`
    pub msgs: Vec<(usize, usize, usize, f64, f64, f64)>,
}

pub fn messages(p: &GatHostParams, g: &SemanticGraph, v: &[Vec<f64>]) -> Messages {
    let d = p.dim;
    let nr = Relation::COUNT;
    let h: Vec<Vec<f64>> = v
        .iter()
        .map(|vi| (0..d).map(|r| (0..d).map(|c| p.w[r * d + c] * vi[c]).sum()).collect())
        .collect();
    let mut msgs = Vec::new();
    for e in &g.edges {
        let s = g.node_index(&e.src).unwrap();
        let t = g.node_index(&e.dst).unwrap();
        for (i, j) in [(t, s), (s, t)] {
            let mut cat = h[i].clone();
            cat.extend(&h[j]);
            let r = e.relation.index();
            let common: f64 = (0..2 * d).map(|k| p.m[k] * cat[k]).sum();
            let rel: f64 = (0..2 * d).map(|k| p.m_r[k * nr + r] * cat[k]).sum();
            msgs.push((i, j, r, e.weight, common, rel));
        }
    }
    Messages { h, msgs }
}

/// Plain softmax over each receiver's messages, ignoring edge weights.
pub fn unweighted_coefficients(m: &Messages) -> Vec<(usize, usize, f64)> {
    let logit = |c: f64, r: f64| lrelu(c) + lrelu(r);
    m.msgs
        .iter()
        .map(|&(i, j, _, _, c, r)| {
            let z: f64 = m.msgs.iter().filter(|x| x.0 == i).map(|x| logit(x.4, x.5).exp()).sum();
            (i, j, logit(c, r).exp() / z)
        })
        .collect()
}
