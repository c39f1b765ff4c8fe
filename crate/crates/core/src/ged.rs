//! Statistical graph edit distance and the baseline-update smoothing filter.
//!
//! Every node edit costs `-ln` of the probability that the extractor makes
//! that mistake, so a distance is the negative log-likelihood of turning one
//! graph into another through independent errors. Edges follow their
//! predicates and carry no cost of their own.

use serde::{Deserialize, Serialize};

use crate::confusion::ConfusionMatrix;
use crate::error::{Error, Result};
use crate::graph::{AtomicGraph, ClassCatalog, NodeKind, NodeRef};

/// `-ln p`, with `-ln 0 = +inf`.
pub fn neg_ln(p: f64) -> f64 {
    if p <= 0.0 {
        f64::INFINITY
    } else {
        -p.ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostBasis {
    Prior,
    Posterior,
}

/// Per-pattern node edit costs.
///
/// `substitute[i][j]` is the cost of turning a node of pattern `i` into one
/// of pattern `j`. Infinite costs serialize as the string `"inf"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TableRepr", into = "TableRepr")]
pub struct EditCostTable {
    pub labels: Vec<String>,
    pub insert: Vec<f64>,
    pub delete: Vec<f64>,
    pub substitute: Vec<Vec<f64>>,
    pub basis: CostBasis,
    /// `-ln` of each pattern's prevalence, when one was supplied.
    pub prevalence_cost: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum CostRepr {
    Num(f64),
    Word(String),
}

impl CostRepr {
    fn from_cost(c: f64) -> Self {
        if c.is_infinite() {
            CostRepr::Word("inf".into())
        } else {
            CostRepr::Num(c)
        }
    }

    fn to_cost(&self) -> Result<f64> {
        match self {
            CostRepr::Num(x) => Ok(*x),
            CostRepr::Word(w) if w == "inf" || w == "Infinity" => Ok(f64::INFINITY),
            CostRepr::Word(w) => Err(Error::input(format!("unrecognized cost `{w}`"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TableRepr {
    labels: Vec<String>,
    insert: Vec<CostRepr>,
    delete: Vec<CostRepr>,
    substitute: Vec<Vec<CostRepr>>,
    basis: CostBasis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prevalence_cost: Option<Vec<CostRepr>>,
}

fn costs_of(v: &[CostRepr]) -> Result<Vec<f64>> {
    v.iter().map(CostRepr::to_cost).collect()
}

fn reprs_of(v: &[f64]) -> Vec<CostRepr> {
    v.iter().map(|c| CostRepr::from_cost(*c)).collect()
}

impl TryFrom<TableRepr> for EditCostTable {
    type Error = Error;

    fn try_from(r: TableRepr) -> Result<Self> {
        let table = EditCostTable {
            labels: r.labels,
            insert: costs_of(&r.insert)?,
            delete: costs_of(&r.delete)?,
            substitute: r.substitute.iter().map(|row| costs_of(row)).collect::<Result<_>>()?,
            basis: r.basis,
            prevalence_cost: r.prevalence_cost.as_deref().map(costs_of).transpose()?,
        };
        table.check()?;
        Ok(table)
    }
}

impl From<EditCostTable> for TableRepr {
    fn from(t: EditCostTable) -> Self {
        TableRepr {
            insert: reprs_of(&t.insert),
            delete: reprs_of(&t.delete),
            substitute: t.substitute.iter().map(|r| reprs_of(r)).collect(),
            prevalence_cost: t.prevalence_cost.as_deref().map(reprs_of),
            labels: t.labels,
            basis: t.basis,
        }
    }
}

fn valid_cost(c: f64) -> bool {
    c >= 0.0 && !c.is_nan()
}

impl EditCostTable {
    pub fn check(&self) -> Result<()> {
        let k = self.labels.len();
        if k == 0 {
            return Err(Error::input("cost table has no patterns"));
        }
        if self.insert.len() != k || self.delete.len() != k || self.substitute.len() != k {
            return Err(Error::input("cost table vectors must have one entry per pattern"));
        }
        for (i, row) in self.substitute.iter().enumerate() {
            if row.len() != k {
                return Err(Error::input(format!("substitution row {i} has {} entries", row.len())));
            }
            if row[i] != 0.0 {
                return Err(Error::input(format!("substitution cost of `{}` onto itself must be 0", self.labels[i])));
            }
        }
        let all = self
            .insert
            .iter()
            .chain(&self.delete)
            .chain(self.substitute.iter().flatten());
        if let Some(bad) = all.copied().find(|c| !valid_cost(*c)) {
            return Err(Error::input(format!("edit cost {bad} is not in [0, inf]")));
        }
        if let Some(p) = &self.prevalence_cost {
            if p.len() != k {
                return Err(Error::input("prevalence costs must have one entry per pattern"));
            }
        }
        Ok(())
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Every finite cost multiplied by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Self {
        let s = |c: &f64| c * alpha;
        Self {
            labels: self.labels.clone(),
            insert: self.insert.iter().map(s).collect(),
            delete: self.delete.iter().map(s).collect(),
            substitute: self.substitute.iter().map(|r| r.iter().map(s).collect()).collect(),
            basis: self.basis,
            prevalence_cost: self.prevalence_cost.as_ref().map(|p| p.iter().map(s).collect()),
        }
    }
}

/// Builds node edit costs from a confusion matrix.
///
/// Insertion costs `-ln FPR`, deletion `-ln FNR` and substitution
/// `-ln (n_ij / N_i)`. With a prevalence vector the substitution of `i` by
/// an observed `j` instead costs `-ln P(true i | observed j)`, using the
/// prevalences as the marginals in Bayes' rule.
pub fn build_costs(cm: &ConfusionMatrix, prevalence: Option<&[f64]>) -> Result<EditCostTable> {
    let k = cm.k();
    if let Some(p) = prevalence {
        if p.len() != k {
            return Err(Error::input(format!("prevalence has {} entries for {k} patterns", p.len())));
        }
        if p.iter().any(|x| !(*x > 0.0 && *x <= 1.0)) {
            return Err(Error::input("prevalence entries must lie in (0, 1]"));
        }
    }
    let mut insert = Vec::with_capacity(k);
    let mut delete = Vec::with_capacity(k);
    for i in 0..k {
        let m = cm.metrics(i)?;
        insert.push(neg_ln(m.fpr));
        delete.push(neg_ln(m.fnr));
    }
    let substitute = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| {
                    if i == j {
                        return 0.0;
                    }
                    let likelihood = cm.rate(i, j);
                    match prevalence {
                        None => neg_ln(likelihood),
                        Some(p) => neg_ln((likelihood * p[i] / p[j]).min(1.0)),
                    }
                })
                .collect()
        })
        .collect();
    Ok(EditCostTable {
        labels: cm.labels().to_vec(),
        insert,
        delete,
        substitute,
        basis: if prevalence.is_some() {
            CostBasis::Posterior
        } else {
            CostBasis::Prior
        },
        prevalence_cost: prevalence.map(|p| p.iter().map(|x| neg_ln(*x)).collect()),
    })
}

/// A cost table resolved against a catalog's class ids.
#[derive(Debug, Clone)]
pub struct CostModel {
    table: EditCostTable,
    // per kind: class id -> table index
    index: [Vec<Option<usize>>; 2],
}

fn kind_slot(kind: NodeKind) -> usize {
    match kind {
        NodeKind::Component => 0,
        NodeKind::Predicate => 1,
    }
}

impl CostModel {
    pub fn new(table: EditCostTable, catalog: &ClassCatalog) -> Result<Self> {
        table.check()?;
        let mut index = [
            vec![None; catalog.class_count(NodeKind::Component)],
            vec![None; catalog.class_count(NodeKind::Predicate)],
        ];
        for (t, label) in table.labels.iter().enumerate() {
            let (kind, id) = catalog
                .resolve(label)
                .ok_or_else(|| Error::input(format!("cost table pattern `{label}` is not in the catalog")))?;
            index[kind_slot(kind)][id] = Some(t);
        }
        Ok(Self { table, index })
    }

    pub fn table(&self) -> &EditCostTable {
        &self.table
    }

    fn slot(&self, node: &NodeRef) -> Result<usize> {
        self.index[kind_slot(node.kind)]
            .get(node.class_id)
            .copied()
            .flatten()
            .ok_or_else(|| Error::input(format!("no edit costs for node {node}")))
    }

    pub fn insert_cost(&self, node: &NodeRef) -> Result<f64> {
        Ok(self.table.insert[self.slot(node)?])
    }

    pub fn delete_cost(&self, node: &NodeRef) -> Result<f64> {
        Ok(self.table.delete[self.slot(node)?])
    }

    /// Substitution cost between two nodes; `+inf` across kinds.
    pub fn substitute_cost(&self, from: &NodeRef, to: &NodeRef) -> Result<f64> {
        if from.kind != to.kind {
            return Ok(f64::INFINITY);
        }
        Ok(self.table.substitute[self.slot(from)?][self.slot(to)?])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Edit {
    Insert { node: NodeRef, cost: f64 },
    Delete { node: NodeRef, cost: f64 },
    Substitute { from: NodeRef, to: NodeRef, cost: f64 },
}

impl Edit {
    pub fn cost(&self) -> f64 {
        match self {
            Edit::Insert { cost, .. } | Edit::Delete { cost, .. } | Edit::Substitute { cost, .. } => *cost,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GedResult {
    pub distance: f64,
    /// Edits turning `g1` into `g2`. Matches between nodes of the same class
    /// are free and not listed.
    pub path: Vec<Edit>,
}

mod hungarian {
    /// Minimum-cost perfect matching of a square matrix with finite entries.
    /// Returns the column assigned to each row.
    pub fn solve(cost: &[Vec<f64>]) -> Vec<usize> {
        let n = cost.len();
        // 1-based potentials; row 0 / column 0 are the virtual start
        let mut u = vec![0.0; n + 1];
        let mut v = vec![0.0; n + 1];
        let mut owner = vec![0usize; n + 1];
        let mut way = vec![0usize; n + 1];
        for i in 1..=n {
            owner[0] = i;
            let mut j0 = 0;
            let mut minv = vec![f64::INFINITY; n + 1];
            let mut used = vec![false; n + 1];
            loop {
                used[j0] = true;
                let i0 = owner[j0];
                let mut delta = f64::INFINITY;
                let mut j1 = 0;
                for j in 1..=n {
                    if used[j] {
                        continue;
                    }
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
                for j in 0..=n {
                    if used[j] {
                        u[owner[j]] += delta;
                        v[j] -= delta;
                    } else {
                        minv[j] -= delta;
                    }
                }
                j0 = j1;
                if owner[j0] == 0 {
                    break;
                }
            }
            loop {
                let j1 = way[j0];
                owner[j0] = owner[j1];
                j0 = j1;
                if j0 == 0 {
                    break;
                }
            }
        }
        let mut assignment = vec![0; n];
        for j in 1..=n {
            if owner[j] != 0 {
                assignment[owner[j] - 1] = j - 1;
            }
        }
        assignment
    }
}

fn pair_cost(g1: &AtomicGraph, a: &NodeRef, g2: &AtomicGraph, b: &NodeRef, costs: &CostModel) -> Result<f64> {
    // predicates only map onto predicates of the same arity
    if a.kind == NodeKind::Predicate && g1.degree(a) != g2.degree(b) {
        return Ok(f64::INFINITY);
    }
    if a.kind == b.kind && a.class_id == b.class_id {
        return Ok(0.0);
    }
    costs.substitute_cost(a, b)
}

/// Optimal mapping of `left` into `right`; `None` marks deletion.
fn assign_kind(
    g1: &AtomicGraph,
    left: &[NodeRef],
    g2: &AtomicGraph,
    right: &[NodeRef],
    costs: &CostModel,
) -> Result<Vec<Option<usize>>> {
    let (n, m) = (left.len(), right.len());
    if n == 0 {
        return Ok(Vec::new());
    }
    let size = n + m;
    let mut matrix = vec![vec![f64::INFINITY; size]; size];
    for (i, a) in left.iter().enumerate() {
        for (j, b) in right.iter().enumerate() {
            matrix[i][j] = pair_cost(g1, a, g2, b, costs)?;
        }
        matrix[i][m + i] = costs.delete_cost(a)?;
    }
    for (j, b) in right.iter().enumerate() {
        matrix[n + j][j] = costs.insert_cost(b)?;
        for c in 0..n {
            matrix[n + j][m + c] = 0.0;
        }
    }
    // any assignment through a sentinel costs more than every finite one
    let finite: f64 = matrix.iter().flatten().filter(|c| c.is_finite()).sum();
    let sentinel = 2.0 * finite + 1.0;
    for c in matrix.iter_mut().flatten() {
        if !c.is_finite() {
            *c = sentinel;
        }
    }
    let cols = hungarian::solve(&matrix);
    Ok(cols[..n].iter().map(|&c| (c < m).then_some(c)).collect())
}

/// Exact node-level edit distance between two graphs.
///
/// Components and predicates are matched separately, each as an optimal
/// assignment with room for deletions and insertions. The distance is
/// `+inf` when every edit path needs an impossible edit.
pub fn ged(g1: &AtomicGraph, g2: &AtomicGraph, costs: &CostModel) -> Result<GedResult> {
    let mut mapping: Vec<(NodeRef, Option<NodeRef>)> = Vec::with_capacity(g1.len());
    let mut used = std::collections::BTreeSet::new();
    for kind in [NodeKind::Component, NodeKind::Predicate] {
        let left: Vec<NodeRef> = g1.nodes().iter().filter(|n| n.kind == kind).copied().collect();
        let right: Vec<NodeRef> = g2.nodes().iter().filter(|n| n.kind == kind).copied().collect();
        for (a, target) in left.iter().zip(assign_kind(g1, &left, g2, &right, costs)?) {
            let b = target.map(|j| right[j]);
            if let Some(b) = b {
                used.insert(b);
            }
            mapping.push((*a, b));
        }
        for b in &right {
            // make sure every node is priced even if unreachable
            if !used.contains(b) {
                costs.insert_cost(b)?;
            }
        }
    }
    let mut distance = 0.0;
    let mut path = Vec::new();
    for (a, b) in mapping {
        match b {
            Some(b) => {
                let cost = pair_cost(g1, &a, g2, &b, costs)?;
                distance += cost;
                if a.class_id != b.class_id {
                    path.push(Edit::Substitute { from: a, to: b, cost });
                }
            }
            None => {
                let cost = costs.delete_cost(&a)?;
                distance += cost;
                path.push(Edit::Delete { node: a, cost });
            }
        }
    }
    for b in g2.nodes().iter().filter(|b| !used.contains(b)) {
        let cost = costs.insert_cost(b)?;
        distance += cost;
        path.push(Edit::Insert { node: *b, cost });
    }
    Ok(GedResult { distance, path })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothConfig {
    /// Largest distance from the baseline still treated as noise.
    pub threshold: f64,
    pub required_streak: usize,
    /// Baseline before the first frame. When unset, the first graph that
    /// holds for a full streak becomes the baseline without an event.
    #[serde(skip)]
    pub initial: Option<AtomicGraph>,
}

impl Default for SmoothConfig {
    fn default() -> Self {
        Self {
            threshold: 0.2,
            required_streak: 5,
            initial: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothEvent {
    /// Time index of the first frame of the streak that moved the baseline.
    pub t: u64,
    pub ged: f64,
    pub from: AtomicGraph,
    pub to: AtomicGraph,
}

/// Running state of the smoothing filter for one stream.
#[derive(Debug, Clone)]
pub struct BaselineState {
    pub g_base: Option<AtomicGraph>,
    pub candidate: Option<AtomicGraph>,
    pub streak: usize,
    pub required_streak: usize,
    streak_start: usize,
    streak_ged: f64,
    /// A single frame that interrupted the pending streak: (index, graph,
    /// distance from the baseline).
    interruption: Option<(usize, AtomicGraph, f64)>,
}

impl BaselineState {
    pub fn new(initial: Option<AtomicGraph>, required_streak: usize) -> Self {
        Self {
            g_base: initial,
            candidate: None,
            streak: 0,
            required_streak,
            streak_start: 0,
            streak_ged: 0.0,
            interruption: None,
        }
    }

    fn reset(&mut self) {
        self.candidate = None;
        self.streak = 0;
        self.interruption = None;
    }
}

fn is_zero(a: &AtomicGraph, b: &AtomicGraph, costs: &CostModel) -> Result<bool> {
    Ok(ged(a, b, costs)?.distance == 0.0 && ged(b, a, costs)?.distance == 0.0)
}

/// Baseline-update smoothing.
///
/// Frames within `threshold` of the baseline are replaced by it. A change is
/// accepted only after `required_streak` frames showing the same new graph;
/// the event is stamped at the first of them and the output is switched from
/// that frame on, so the filtered stream changes exactly at events. While a
/// change is pending, frames within `threshold` of the candidate are
/// absorbed without breaking the streak, and a single differing frame is
/// held back: the streak goes on if the next frame shows the candidate
/// again, and the held frame starts a new streak if the next frame repeats
/// it.
pub fn smooth(
    frames: &[(u64, AtomicGraph)],
    costs: &CostModel,
    config: &SmoothConfig,
) -> Result<(Vec<(u64, AtomicGraph)>, Vec<SmoothEvent>)> {
    if !(config.threshold > 0.0) {
        return Err(Error::input("smoothing threshold must be positive"));
    }
    if config.required_streak == 0 {
        return Err(Error::input("required streak must be at least 1"));
    }
    let mut state = BaselineState::new(config.initial.clone(), config.required_streak);
    let mut out: Vec<(u64, AtomicGraph)> = Vec::with_capacity(frames.len());
    let mut events = Vec::new();
    for (k, (t, g)) in frames.iter().enumerate() {
        let d = match &state.g_base {
            Some(base) => ged(base, g, costs).map_err(|e| e.at_stage("smooth", k))?.distance,
            None => f64::INFINITY,
        };
        if d <= config.threshold {
            state.reset();
            out.push((*t, state.g_base.clone().expect("finite distance implies a baseline")));
            continue;
        }
        match &state.candidate {
            Some(c) if is_zero(c, g, costs)? => {
                state.streak += 1;
                state.interruption = None;
            }
            Some(c) if ged(c, g, costs)?.distance <= config.threshold => state.interruption = None,
            Some(_) if state.interruption.is_none() => state.interruption = Some((k, g.clone(), d)),
            _ => {
                let (start, graph, dist, streak) = match state.interruption.take() {
                    Some((j, h, dh)) if is_zero(&h, g, costs)? => (j, h, dh, 2),
                    _ => (k, g.clone(), d, 1),
                };
                state.candidate = Some(graph);
                state.streak = streak;
                state.streak_start = start;
                state.streak_ged = dist;
            }
        }
        out.push((*t, state.g_base.clone().unwrap_or_else(|| g.clone())));
        if state.streak >= state.required_streak {
            let new_base = state.candidate.take().expect("streak implies a candidate");
            let from = if let Some(base) = state.g_base.take() {
                events.push(SmoothEvent {
                    t: frames[state.streak_start].0,
                    ged: state.streak_ged,
                    from: base.clone(),
                    to: new_base.clone(),
                });
                state.streak_start
            } else {
                0
            };
            for slot in &mut out[from..=k] {
                slot.1 = new_base.clone();
            }
            state.g_base = Some(new_base);
            state.streak = 0;
        }
    }
    Ok((out, events))
}
