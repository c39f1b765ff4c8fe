//! The semantic language data model.
//!
//! A frame of a semantic signal is a [`MultiGraph`]: a list of node-disjoint
//! [`AtomicGraph`]s, each a connected bipartite graph between component
//! instances (objects) and predicate instances (relations or states).
//! Components may carry layered attributes. A [`Goal`] selects the classes
//! and attribute depth a consumer is interested in.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dsu::DisjointSets;
use crate::error::{Error, Result};

/// Dimension of level-2 feature vectors unless a deployment says otherwise.
pub const DEFAULT_FEATURE_DIM: usize = 128;

/// Allowed deviation of a level-2 feature vector from unit Euclidean norm.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeKind {
    #[serde(rename = "c")]
    Component,
    #[serde(rename = "p")]
    Predicate,
}

impl NodeKind {
    pub fn tag(self) -> &'static str {
        match self {
            NodeKind::Component => "c",
            NodeKind::Predicate => "p",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "CatalogRepr", into = "CatalogRepr")]
pub struct ClassCatalog {
    components: Vec<String>,
    predicates: Vec<String>,
    attribute_levels: usize,
}

#[derive(Serialize, Deserialize)]
struct CatalogRepr {
    components: Vec<String>,
    predicates: Vec<String>,
    #[serde(default = "default_levels")]
    attribute_levels: usize,
}

fn default_levels() -> usize {
    3
}

impl TryFrom<CatalogRepr> for ClassCatalog {
    type Error = Error;

    fn try_from(r: CatalogRepr) -> Result<Self> {
        Ok(ClassCatalog::new(r.components, r.predicates)?.with_attribute_levels(r.attribute_levels))
    }
}

impl From<ClassCatalog> for CatalogRepr {
    fn from(c: ClassCatalog) -> Self {
        CatalogRepr {
            components: c.components,
            predicates: c.predicates,
            attribute_levels: c.attribute_levels,
        }
    }
}

impl ClassCatalog {
    /// Builds a catalog; class names must be unique across both lists and
    /// neither list may be empty.
    pub fn new<S: Into<String>>(
        components: impl IntoIterator<Item = S>,
        predicates: impl IntoIterator<Item = S>,
    ) -> Result<Self> {
        let components: Vec<String> = components.into_iter().map(Into::into).collect();
        let predicates: Vec<String> = predicates.into_iter().map(Into::into).collect();
        if components.is_empty() || predicates.is_empty() {
            return Err(Error::input("catalog needs at least one component and one predicate class"));
        }
        let mut seen = BTreeSet::new();
        for name in components.iter().chain(&predicates) {
            if !seen.insert(name.as_str()) {
                return Err(Error::input(format!("duplicate class name `{name}`")));
            }
        }
        Ok(Self {
            components,
            predicates,
            attribute_levels: default_levels(),
        })
    }

    pub fn with_attribute_levels(mut self, levels: usize) -> Self {
        self.attribute_levels = levels;
        self
    }

    pub fn components(&self) -> &[String] {
        &self.components
    }

    pub fn predicates(&self) -> &[String] {
        &self.predicates
    }

    /// Maximum number of attribute levels a node may carry.
    pub fn attribute_levels(&self) -> usize {
        self.attribute_levels
    }

    pub fn class_count(&self, kind: NodeKind) -> usize {
        self.classes(kind).len()
    }

    fn classes(&self, kind: NodeKind) -> &[String] {
        match kind {
            NodeKind::Component => &self.components,
            NodeKind::Predicate => &self.predicates,
        }
    }

    pub fn class_id(&self, kind: NodeKind, name: &str) -> Option<usize> {
        self.classes(kind).iter().position(|c| c == name)
    }

    pub fn class_name(&self, kind: NodeKind, id: usize) -> Option<&str> {
        self.classes(kind).get(id).map(String::as_str)
    }

    /// Finds a class by name in either list.
    pub fn resolve(&self, name: &str) -> Option<(NodeKind, usize)> {
        self.class_id(NodeKind::Component, name)
            .map(|id| (NodeKind::Component, id))
            .or_else(|| self.class_id(NodeKind::Predicate, name).map(|id| (NodeKind::Predicate, id)))
    }

    pub(crate) fn name_of(&self, node: &NodeRef) -> &str {
        self.class_name(node.kind, node.class_id).unwrap_or("<unknown>")
    }
}

/// A component or predicate instance inside one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeRef {
    pub kind: NodeKind,
    pub class_id: usize,
    pub instance_id: u64,
}

impl NodeRef {
    pub fn component(class_id: usize, instance_id: u64) -> Self {
        Self {
            kind: NodeKind::Component,
            class_id,
            instance_id,
        }
    }

    pub fn predicate(class_id: usize, instance_id: u64) -> Self {
        Self {
            kind: NodeKind::Predicate,
            class_id,
            instance_id,
        }
    }

    pub fn is_component(&self) -> bool {
        self.kind == NodeKind::Component
    }
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}#{}", self.kind.tag(), self.class_id, self.instance_id)
    }
}

/// One attribute level of a node.
///
/// Level 1 holds scalars (positions, velocities), level 2 a unit-norm
/// feature vector, deeper levels opaque payloads that are never interpreted.
#[derive(Debug, Clone, PartialEq)]
pub enum AttributeLevel {
    Scalars(Vec<f64>),
    Features(Vec<f64>),
    Opaque(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttributeSet {
    pub levels: Vec<AttributeLevel>,
}

impl AttributeSet {
    pub fn new(levels: Vec<AttributeLevel>) -> Self {
        Self { levels }
    }

    pub fn features(&self) -> Option<&[f64]> {
        self.levels.iter().find_map(|l| match l {
            AttributeLevel::Features(v) => Some(v.as_slice()),
            _ => None,
        })
    }

    /// Keeps only the first `max_level` levels.
    pub fn truncated(&self, max_level: usize) -> Self {
        Self {
            levels: self.levels.iter().take(max_level).cloned().collect(),
        }
    }
}

/// Connected bipartite graph of component and predicate instances.
///
/// The constructor does not enforce the invariants; [`validate`] reports
/// every violation instead.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AtomicGraph {
    nodes: BTreeSet<NodeRef>,
    edges: BTreeSet<(NodeRef, NodeRef)>,
    attributes: BTreeMap<NodeRef, AttributeSet>,
}

impl AtomicGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, node: NodeRef) -> &mut Self {
        self.nodes.insert(node);
        self
    }

    /// Adds an undirected edge; endpoints are stored in sorted order.
    pub fn add_edge(&mut self, a: NodeRef, b: NodeRef) -> &mut Self {
        self.edges.insert(if a <= b { (a, b) } else { (b, a) });
        self
    }

    pub fn set_attributes(&mut self, node: NodeRef, attrs: AttributeSet) -> &mut Self {
        self.attributes.insert(node, attrs);
        self
    }

    /// Convenience constructor: all nodes, then edges given as pairs.
    pub fn from_parts(
        nodes: impl IntoIterator<Item = NodeRef>,
        edges: impl IntoIterator<Item = (NodeRef, NodeRef)>,
    ) -> Self {
        let mut g = Self::new();
        for n in nodes {
            g.add_node(n);
        }
        for (a, b) in edges {
            g.add_edge(a, b);
        }
        g
    }

    pub fn nodes(&self) -> &BTreeSet<NodeRef> {
        &self.nodes
    }

    pub fn edges(&self) -> &BTreeSet<(NodeRef, NodeRef)> {
        &self.edges
    }

    pub fn attributes(&self) -> &BTreeMap<NodeRef, AttributeSet> {
        &self.attributes
    }

    pub fn attributes_of(&self, node: &NodeRef) -> Option<&AttributeSet> {
        self.attributes.get(node)
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn contains(&self, node: &NodeRef) -> bool {
        self.nodes.contains(node)
    }

    pub fn degree(&self, node: &NodeRef) -> usize {
        self.edges
            .iter()
            .filter(|(a, b)| a == node || b == node)
            .count()
    }

    pub fn neighbors<'a>(&'a self, node: &'a NodeRef) -> impl Iterator<Item = NodeRef> + 'a {
        self.edges.iter().filter_map(move |(a, b)| {
            if a == node {
                Some(*b)
            } else if b == node {
                Some(*a)
            } else {
                None
            }
        })
    }

    pub fn components(&self) -> impl Iterator<Item = &NodeRef> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Component)
    }

    pub fn predicates(&self) -> impl Iterator<Item = &NodeRef> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Predicate)
    }

    /// Same nodes and edges, attributes ignored.
    pub fn same_structure(&self, other: &Self) -> bool {
        self.nodes == other.nodes && self.edges == other.edges
    }

    /// Removes a node together with its incident edges and attributes.
    pub fn remove_node(&mut self, node: &NodeRef) {
        self.nodes.remove(node);
        self.edges.retain(|(a, b)| a != node && b != node);
        self.attributes.remove(node);
    }

    /// Union of two node-disjoint graphs.
    pub fn merge(&mut self, other: &AtomicGraph) {
        self.nodes.extend(other.nodes.iter().copied());
        self.edges.extend(other.edges.iter().copied());
        for (k, v) in &other.attributes {
            self.attributes.insert(*k, v.clone());
        }
    }

    /// Number of connected pieces.
    pub fn piece_count(&self) -> usize {
        let index: BTreeMap<NodeRef, usize> =
            self.nodes.iter().enumerate().map(|(i, n)| (*n, i)).collect();
        let mut dsu = DisjointSets::new(index.len());
        for (a, b) in &self.edges {
            if let (Some(&ia), Some(&ib)) = (index.get(a), index.get(b)) {
                dsu.union(ia, ib);
            }
        }
        dsu.groups().len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NonBipartiteEdge(NodeRef, NodeRef),
    DanglingEdge(NodeRef, NodeRef),
    Disconnected { pieces: usize },
    OrphanAttributes(NodeRef),
    FeatureNorm { node: NodeRef, norm: f64 },
    UnknownClass(NodeRef),
    TooManyLevels { node: NodeRef, levels: usize, allowed: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonBipartiteEdge(a, b) => write!(f, "non-bipartite edge {a}-{b}"),
            Violation::DanglingEdge(a, b) => write!(f, "dangling edge {a}-{b}"),
            Violation::Disconnected { pieces } => write!(f, "disconnected graph ({pieces} pieces)"),
            Violation::OrphanAttributes(n) => write!(f, "attributes for absent node {n}"),
            Violation::FeatureNorm { node, norm } => {
                write!(f, "feature vector of {node} has norm {norm}")
            }
            Violation::UnknownClass(n) => write!(f, "unknown class for node {n}"),
            Violation::TooManyLevels { node, levels, allowed } => {
                write!(f, "{node} carries {levels} attribute levels, {allowed} allowed")
            }
        }
    }
}

/// Checks the structural invariants of an atomic graph. An empty result
/// means the graph is valid.
pub fn validate(graph: &AtomicGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    for (a, b) in &graph.edges {
        if !graph.nodes.contains(a) || !graph.nodes.contains(b) {
            out.push(Violation::DanglingEdge(*a, *b));
        } else if a.kind == b.kind {
            out.push(Violation::NonBipartiteEdge(*a, *b));
        }
    }
    let pieces = graph.piece_count();
    if pieces > 1 {
        out.push(Violation::Disconnected { pieces });
    }
    for (node, attrs) in &graph.attributes {
        if !graph.nodes.contains(node) {
            out.push(Violation::OrphanAttributes(*node));
        }
        if let Some(v) = attrs.features() {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                out.push(Violation::FeatureNorm { node: *node, norm });
            }
        }
    }
    out
}

/// [`validate`] plus the catalog-dependent checks (class ranges and
/// attribute depth).
pub fn validate_against(graph: &AtomicGraph, catalog: &ClassCatalog) -> Vec<Violation> {
    let mut out = validate(graph);
    for node in &graph.nodes {
        if node.class_id >= catalog.class_count(node.kind) {
            out.push(Violation::UnknownClass(*node));
        }
    }
    for (node, attrs) in &graph.attributes {
        if attrs.levels.len() > catalog.attribute_levels() {
            out.push(Violation::TooManyLevels {
                node: *node,
                levels: attrs.levels.len(),
                allowed: catalog.attribute_levels(),
            });
        }
    }
    out
}

/// All atomic graphs detected in one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MultiGraph {
    pub time_index: u64,
    pub atoms: Vec<AtomicGraph>,
}

impl MultiGraph {
    pub fn empty(time_index: u64) -> Self {
        Self {
            time_index,
            atoms: Vec::new(),
        }
    }

    /// Union of all atoms as a single (possibly disconnected) graph.
    pub fn merged(&self) -> AtomicGraph {
        let mut g = AtomicGraph::new();
        for atom in &self.atoms {
            g.merge(atom);
        }
        g
    }

    pub fn node_count(&self) -> usize {
        self.atoms.iter().map(AtomicGraph::len).sum()
    }

    pub fn is_node_disjoint(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.atoms
            .iter()
            .flat_map(|a| a.nodes.iter())
            .all(|n| seen.insert(*n))
    }

    /// Re-splits an arbitrary graph into its connected atoms.
    pub fn from_graph(time_index: u64, graph: &AtomicGraph) -> Self {
        split_atoms(
            time_index,
            graph.nodes.iter().copied(),
            graph.edges.iter().copied(),
            graph.attributes.clone(),
        )
        .expect("edges of a graph reference its nodes")
    }
}

/// Splits a frame's nodes and edges into connected atomic graphs.
///
/// Atoms come out ordered by their smallest node.
pub fn split_atoms(
    time_index: u64,
    nodes: impl IntoIterator<Item = NodeRef>,
    edges: impl IntoIterator<Item = (NodeRef, NodeRef)>,
    mut attributes: BTreeMap<NodeRef, AttributeSet>,
) -> Result<MultiGraph> {
    let nodes: BTreeSet<NodeRef> = nodes.into_iter().collect();
    let index: BTreeMap<NodeRef, usize> = nodes.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    let order: Vec<NodeRef> = nodes.iter().copied().collect();
    let mut dsu = DisjointSets::new(order.len());
    let mut edge_list = Vec::new();
    for (a, b) in edges {
        let (Some(&ia), Some(&ib)) = (index.get(&a), index.get(&b)) else {
            return Err(Error::input(format!("edge {a}-{b} references a node that is not in the frame")));
        };
        dsu.union(ia, ib);
        edge_list.push((a, b));
    }
    if let Some(orphan) = attributes.keys().find(|k| !nodes.contains(k)) {
        return Err(Error::input(format!("attributes given for absent node {orphan}")));
    }
    let mut atom_of = vec![0usize; order.len()];
    let groups = dsu.groups();
    let mut atoms: Vec<AtomicGraph> = Vec::with_capacity(groups.len());
    for (g, members) in groups.iter().enumerate() {
        let mut atom = AtomicGraph::new();
        for &m in members {
            atom_of[m] = g;
            atom.add_node(order[m]);
            if let Some(a) = attributes.remove(&order[m]) {
                atom.set_attributes(order[m], a);
            }
        }
        atoms.push(atom);
    }
    for (a, b) in edge_list {
        atoms[atom_of[index[&a]]].add_edge(a, b);
    }
    Ok(MultiGraph { time_index, atoms })
}

/// Classes and attribute depth a consumer is interested in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Goal {
    pub components: BTreeSet<String>,
    pub predicates: BTreeSet<String>,
    pub max_attribute_level: usize,
}

impl Goal {
    /// The goal that keeps everything the catalog can express.
    pub fn universal(catalog: &ClassCatalog) -> Self {
        Self {
            components: catalog.components().iter().cloned().collect(),
            predicates: catalog.predicates().iter().cloned().collect(),
            max_attribute_level: catalog.attribute_levels(),
        }
    }

    pub fn new<S: Into<String>>(
        components: impl IntoIterator<Item = S>,
        predicates: impl IntoIterator<Item = S>,
        max_attribute_level: usize,
    ) -> Self {
        Self {
            components: components.into_iter().map(Into::into).collect(),
            predicates: predicates.into_iter().map(Into::into).collect(),
            max_attribute_level,
        }
    }

    pub fn is_subset_of(&self, other: &Goal) -> bool {
        self.components.is_subset(&other.components)
            && self.predicates.is_subset(&other.predicates)
            && self.max_attribute_level <= other.max_attribute_level
    }

    /// Whether a class name is whitelisted by this goal.
    pub fn admits(&self, class: &str) -> bool {
        self.components.contains(class) || self.predicates.contains(class)
    }

    pub fn check(&self, catalog: &ClassCatalog) -> Result<()> {
        for c in &self.components {
            if catalog.class_id(NodeKind::Component, c).is_none() {
                return Err(Error::input(format!("goal references unknown component class `{c}`")));
            }
        }
        for p in &self.predicates {
            if catalog.class_id(NodeKind::Predicate, p).is_none() {
                return Err(Error::input(format!("goal references unknown predicate class `{p}`")));
            }
        }
        if self.max_attribute_level > catalog.attribute_levels() {
            return Err(Error::input("goal attribute level exceeds the catalog depth"));
        }
        Ok(())
    }
}

/// Restricts a frame to the goal's classes and attribute depth.
///
/// Edges touching removed nodes go with them; a predicate that loses all of
/// its neighbours this way is dropped as well. Surviving nodes are re-split
/// into atoms.
pub fn goal_filter(mg: &MultiGraph, goal: &Goal, catalog: &ClassCatalog) -> Result<MultiGraph> {
    goal.check(catalog)?;
    let merged = mg.merged();
    let admitted = |n: &NodeRef| {
        let name = catalog.name_of(n);
        match n.kind {
            NodeKind::Component => goal.components.contains(name),
            NodeKind::Predicate => goal.predicates.contains(name),
        }
    };
    let mut kept: BTreeSet<NodeRef> = merged.nodes.iter().copied().filter(|n| admitted(n)).collect();
    let edges: Vec<(NodeRef, NodeRef)> = merged
        .edges
        .iter()
        .copied()
        .filter(|(a, b)| kept.contains(a) && kept.contains(b))
        .collect();
    let orphaned: Vec<NodeRef> = kept
        .iter()
        .copied()
        .filter(|n| {
            n.kind == NodeKind::Predicate
                && merged.degree(n) > 0
                && !edges.iter().any(|(a, b)| a == n || b == n)
        })
        .collect();
    for n in &orphaned {
        kept.remove(n);
    }
    let attributes = merged
        .attributes
        .iter()
        .filter(|(n, _)| kept.contains(n))
        .map(|(n, a)| (*n, a.truncated(goal.max_attribute_level)))
        .collect();
    split_atoms(mg.time_index, kept, edges, attributes)
}
