//! Brute-force oracles and random instance generators shared by the
//! integration test targets.

#![allow(dead_code)]

use rand::Rng;
use semgraph_core::ged::{CostBasis, EditCostTable};
use semgraph_core::graph::{AtomicGraph, ClassCatalog, NodeKind, NodeRef};
use semgraph_core::hmm::HmmModel;

pub const TIE_TOLERANCE: f64 = 1e-12;

fn ln(x: f64) -> f64 {
    if x == 0.0 {
        f64::NEG_INFINITY
    } else {
        x.ln()
    }
}

/// Log probability of a state path, summed left to right.
pub fn path_log_prob(m: &HmmModel, states: &[usize], obs: &[usize]) -> f64 {
    let mut lp = ln(m.p()[states[0]]) + ln(m.b()[states[0]][obs[0]]);
    for t in 1..states.len() {
        lp += ln(m.a()[states[t - 1]][states[t]]) + ln(m.b()[states[t]][obs[t]]);
    }
    lp
}

fn tied(x: f64, best: f64) -> bool {
    x == best || (x.is_finite() && best.is_finite() && (best - x).abs() <= TIE_TOLERANCE * best.abs().max(1.0))
}

/// Exhaustive MAP path: the lexicographically smallest among the paths
/// tied with the maximum. `None` when every path is impossible.
pub fn brute_viterbi(m: &HmmModel, obs: &[usize]) -> Option<(Vec<usize>, f64)> {
    let n = m.states();
    let len = obs.len();
    let total = n.pow(len as u32);
    let decode = |mut k: usize| {
        let mut s = vec![0; len];
        for t in (0..len).rev() {
            s[t] = k % n;
            k /= n;
        }
        s
    };
    // index order is lexicographic order of the paths
    let scores: Vec<f64> = (0..total).map(|k| path_log_prob(m, &decode(k), obs)).collect();
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if best == f64::NEG_INFINITY {
        return None;
    }
    let k = scores.iter().position(|s| tied(*s, best)).unwrap();
    Some((decode(k), best))
}

fn stochastic_row(r: &mut impl Rng, n: usize, zeros: bool, coarse: bool) -> Vec<f64> {
    let mut row: Vec<f64> = (0..n)
        .map(|_| {
            if zeros && r.random_bool(0.2) {
                0.0
            } else if coarse {
                r.random_range(1..=3) as f64
            } else {
                r.random_range(0.05..1.0)
            }
        })
        .collect();
    if row.iter().all(|x| *x == 0.0) {
        row[0] = 1.0;
    }
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|x| *x /= s);
    row
}

/// Random model; `coarse` models use small integer weights, which makes
/// exactly tied paths common.
pub fn random_hmm(r: &mut impl Rng, n: usize, m: usize, coarse: bool) -> HmmModel {
    HmmModel::new(
        vec![],
        (0..n).map(|_| stochastic_row(r, n, true, coarse)).collect(),
        (0..n).map(|_| stochastic_row(r, m, coarse, coarse)).collect(),
        stochastic_row(r, n, false, coarse),
    )
    .unwrap()
}

pub fn small_catalog() -> ClassCatalog {
    ClassCatalog::new(["car", "person", "boat"], ["moving", "parked", "near"]).unwrap()
}

/// Random cost table over every class of `catalog`. Dyadic tables hold
/// multiples of 1/16, so any sum of entries is exact in floating point.
pub fn random_costs(r: &mut impl Rng, catalog: &ClassCatalog, dyadic: bool, p_inf: f64) -> EditCostTable {
    let labels: Vec<String> = catalog.components().iter().chain(catalog.predicates()).cloned().collect();
    let k = labels.len();
    let draw = |r: &mut dyn rand::RngCore| {
        if r.random_bool(p_inf) {
            f64::INFINITY
        } else if dyadic {
            r.random_range(1..=48) as f64 / 16.0
        } else {
            -r.random_range(0.001f64..1.0).ln()
        }
    };
    let insert = (0..k).map(|_| draw(r)).collect();
    let delete = (0..k).map(|_| draw(r)).collect();
    let substitute = (0..k)
        .map(|i| (0..k).map(|j| if i == j { 0.0 } else { draw(r) }).collect())
        .collect();
    EditCostTable {
        labels,
        insert,
        delete,
        substitute,
        basis: CostBasis::Prior,
        prevalence_cost: None,
    }
}

/// Random bipartite graph with up to `max_side` nodes of each kind.
pub fn random_graph(r: &mut impl Rng, catalog: &ClassCatalog, max_side: usize) -> AtomicGraph {
    let mut g = AtomicGraph::new();
    let nc = r.random_range(0..=max_side);
    let np = r.random_range(0..=max_side);
    let comps: Vec<NodeRef> = (0..nc)
        .map(|i| NodeRef::component(r.random_range(0..catalog.class_count(NodeKind::Component)), i as u64))
        .collect();
    let preds: Vec<NodeRef> = (0..np)
        .map(|i| NodeRef::predicate(r.random_range(0..catalog.class_count(NodeKind::Predicate)), 100 + i as u64))
        .collect();
    for n in comps.iter().chain(&preds) {
        g.add_node(*n);
    }
    for c in &comps {
        for p in &preds {
            if r.random_bool(0.4) {
                g.add_edge(*c, *p);
            }
        }
    }
    g
}

fn cost_index(table: &EditCostTable, catalog: &ClassCatalog, n: &NodeRef) -> usize {
    let name = catalog.class_name(n.kind, n.class_id).unwrap();
    table.labels.iter().position(|l| l == name).unwrap()
}

/// Minimum edit cost by enumerating every partial injection of `g1`'s
/// nodes into same-kind nodes of `g2`.
pub fn brute_ged(g1: &AtomicGraph, g2: &AtomicGraph, table: &EditCostTable, catalog: &ClassCatalog) -> f64 {
    let mut total = 0.0;
    for kind in [NodeKind::Component, NodeKind::Predicate] {
        let left: Vec<NodeRef> = g1.nodes().iter().filter(|n| n.kind == kind).copied().collect();
        let right: Vec<NodeRef> = g2.nodes().iter().filter(|n| n.kind == kind).copied().collect();
        let pair = |a: &NodeRef, b: &NodeRef| {
            if kind == NodeKind::Predicate && g1.degree(a) != g2.degree(b) {
                f64::INFINITY
            } else if a.class_id == b.class_id {
                0.0
            } else {
                table.substitute[cost_index(table, catalog, a)][cost_index(table, catalog, b)]
            }
        };
        let mut best = f64::INFINITY;
        let mut used = vec![false; right.len()];
        fn walk(
            i: usize,
            acc: f64,
            left: &[NodeRef],
            right: &[NodeRef],
            used: &mut Vec<bool>,
            best: &mut f64,
            pair: &dyn Fn(&NodeRef, &NodeRef) -> f64,
            delete: &dyn Fn(&NodeRef) -> f64,
            insert: &dyn Fn(&NodeRef) -> f64,
        ) {
            if i == left.len() {
                let rest: f64 = right.iter().zip(used.iter()).filter(|(_, u)| !**u).map(|(b, _)| insert(b)).sum();
                *best = best.min(acc + rest);
                return;
            }
            walk(i + 1, acc + delete(&left[i]), left, right, used, best, pair, delete, insert);
            for j in 0..right.len() {
                if !used[j] {
                    used[j] = true;
                    walk(i + 1, acc + pair(&left[i], &right[j]), left, right, used, best, pair, delete, insert);
                    used[j] = false;
                }
            }
        }
        let delete = |a: &NodeRef| table.delete[cost_index(table, catalog, a)];
        let insert = |b: &NodeRef| table.insert[cost_index(table, catalog, b)];
        walk(0, 0.0, &left, &right, &mut used, &mut best, &pair, &delete, &insert);
        total += best;
    }
    total
}
