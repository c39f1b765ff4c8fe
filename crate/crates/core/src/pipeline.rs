//! The full processing chain: score integration, attribute tracking, graph
//! smoothing and presence tracking, followed by the innovation ledger and
//! the transmission rates it implies.
//!
//! Smoothing and tracking work per bank. A bank follows one atomic graph
//! through time and is keyed by the smallest component instance id in it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{
    self, encode_atom, encode_level, read_feature_rows, read_graph_stream, read_score_rows, write_graph_stream,
    write_rows, AtomRecord, FeatureRow, ScoreRow,
};
use crate::ged::{smooth, CostModel, EditCostTable, SmoothConfig, SmoothEvent};
use crate::graph::{AtomicGraph, AttributeLevel, ClassCatalog, Goal, MultiGraph, NodeKind, NodeRef};
use crate::hmm::{viterbi, HmmModel};
use crate::integrator::{detect, integrate, ScoreStream};
use crate::subspace::{reconcile, windowed_innovation, FeatureWindow, ReconcileConfig, Reconciliation, WindowedConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Integrate,
    Subspace,
    Smooth,
    Track,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Integrate => "integrate",
            Stage::Subspace => "subspace",
            Stage::Smooth => "smooth",
            Stage::Track => "track",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegrateParams {
    pub window: usize,
    pub tau: f64,
}

impl Default for IntegrateParams {
    fn default() -> Self {
        Self { window: 4, tau: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SubspaceParams {
    pub innovation: WindowedConfig,
    /// Merge track ids that show the same object; `None` disables it.
    pub reconcile: Option<ReconcileConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CostSource {
    Path(PathBuf),
    Inline(EditCostTable),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothParams {
    pub costs: Option<CostSource>,
    pub threshold: f64,
    pub streak: usize,
    /// Start every bank from the empty graph instead of its first stable
    /// graph.
    pub initial_empty: bool,
}

impl Default for SmoothParams {
    fn default() -> Self {
        Self {
            costs: None,
            threshold: 0.2,
            streak: 5,
            initial_empty: false,
        }
    }
}

impl SmoothParams {
    pub fn smooth_config(&self) -> SmoothConfig {
        SmoothConfig {
            threshold: self.threshold,
            required_streak: self.streak,
            initial: self.initial_empty.then(AtomicGraph::new),
        }
    }
}

/// Two-state presence chain of one component class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PresenceParams {
    pub stay_absent: f64,
    pub stay_present: f64,
    pub correct_absent: f64,
    pub correct_present: f64,
}

impl PresenceParams {
    pub fn model(&self, initial_empty: bool) -> Result<HmmModel> {
        let m = HmmModel::presence(self.stay_absent, self.stay_present, self.correct_absent, self.correct_present)?;
        if initial_empty {
            m.with_initial(vec![1.0, 0.0])
        } else {
            Ok(m)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackParams {
    /// Component class name to its presence chain. Classes without an
    /// entry pass through untouched.
    pub models: BTreeMap<String, PresenceParams>,
    pub initial_empty: bool,
}

impl Default for TrackParams {
    fn default() -> Self {
        Self {
            models: BTreeMap::new(),
            initial_empty: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct InputPaths {
    pub graphs: PathBuf,
    #[serde(default)]
    pub scores: Option<PathBuf>,
    #[serde(default)]
    pub features: Option<PathBuf>,
}

fn default_fps() -> f64 {
    30.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub catalog: ClassCatalog,
    /// Enabled stages, in processing order.
    #[serde(default)]
    pub stages: Vec<Stage>,
    #[serde(default = "default_fps")]
    pub fps: f64,
    /// Goal for the filtered rate; the universal goal when absent.
    #[serde(default)]
    pub goal: Option<Goal>,
    pub inputs: InputPaths,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub integrate: IntegrateParams,
    #[serde(default)]
    pub subspace: SubspaceParams,
    #[serde(default)]
    pub smooth: SmoothParams,
    #[serde(default)]
    pub track: TrackParams,
    /// Kept with the run for reproducibility; every stage is deterministic.
    #[serde(default)]
    pub seed: u64,
}

impl PipelineConfig {
    pub fn enabled(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }

    pub fn goal(&self) -> Goal {
        self.goal.clone().unwrap_or_else(|| Goal::universal(&self.catalog))
    }

    pub fn check(&self) -> Result<()> {
        for w in self.stages.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::input(format!(
                    "stage `{}` cannot follow `{}`; the order is integrate, subspace, smooth, track",
                    w[1].name(),
                    w[0].name()
                )));
            }
        }
        if !(self.fps > 0.0) {
            return Err(Error::input("fps must be positive"));
        }
        self.goal().check(&self.catalog)?;
        if self.enabled(Stage::Integrate) && self.inputs.scores.is_none() {
            return Err(Error::input("the integrate stage needs a score input"));
        }
        if self.enabled(Stage::Subspace) && self.inputs.features.is_none() {
            return Err(Error::input("the subspace stage needs a feature input"));
        }
        if self.enabled(Stage::Smooth) && self.smooth.costs.is_none() {
            return Err(Error::input("the smooth stage needs an edit cost table"));
        }
        for class in self.track.models.keys() {
            if self.catalog.class_id(NodeKind::Component, class).is_none() {
                return Err(Error::input(format!("track model for unknown component class `{class}`")));
            }
        }
        Ok(())
    }
}

/// Everything a run consumes, already parsed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineData {
    pub frames: Vec<MultiGraph>,
    pub scores: Vec<ScoreRow>,
    pub features: Vec<FeatureRow>,
    pub costs: Option<EditCostTable>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankEvent {
    pub bank: u64,
    pub event: SmoothEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnovationRow {
    pub t: u64,
    pub track_id: u64,
    pub l1: f64,
    pub peak: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EventStats {
    pub count: u64,
    pub mean_bits: f64,
}

impl EventStats {
    fn add(&mut self, bits: u64) {
        let n = self.count as f64;
        self.mean_bits = (self.mean_bits * n + bits as f64) / (n + 1.0);
        self.count += 1;
    }

    fn total_bits(&self) -> f64 {
        self.count as f64 * self.mean_bits
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub level: usize,
    #[serde(flatten)]
    pub stats: EventStats,
}

/// Innovation bookkeeping of one bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AtomLedger {
    pub key: u64,
    pub components: BTreeSet<String>,
    pub predicates: BTreeSet<String>,
    pub graph: EventStats,
    pub attributes: Vec<LevelStats>,
}

impl AtomLedger {
    fn level_mut(&mut self, level: usize) -> &mut EventStats {
        let pos = match self.attributes.iter().position(|l| l.level == level) {
            Some(p) => p,
            None => {
                self.attributes.push(LevelStats {
                    level,
                    stats: EventStats::default(),
                });
                self.attributes.sort_by_key(|l| l.level);
                self.attributes.iter().position(|l| l.level == level).expect("just inserted")
            }
        };
        &mut self.attributes[pos].stats
    }

    /// Whether the goal keeps this bank: any admitted component, or any
    /// admitted predicate for a bank without components.
    pub fn admitted_by(&self, goal: &Goal) -> bool {
        if self.components.is_empty() {
            self.predicates.iter().any(|p| goal.predicates.contains(p))
        } else {
            self.components.iter().any(|c| goal.components.contains(c))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct InnovationLedger {
    pub frames: u64,
    pub fps: f64,
    pub atoms: Vec<AtomLedger>,
}

impl InnovationLedger {
    pub fn duration(&self) -> f64 {
        self.frames as f64 / self.fps
    }

    pub fn graph_events(&self) -> u64 {
        self.atoms.iter().map(|a| a.graph.count).sum()
    }

    pub fn check(&self) -> Result<()> {
        for a in &self.atoms {
            let all = std::iter::once(&a.graph).chain(a.attributes.iter().map(|l| &l.stats));
            for s in all {
                if s.count > 0 && !(s.mean_bits > 0.0) {
                    return Err(Error::input(format!("bank {} has events without a message length", a.key)));
                }
                if s.mean_bits < 0.0 || !s.mean_bits.is_finite() {
                    return Err(Error::input(format!("bank {} has an invalid message length", a.key)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    /// Bits per second over everything in the ledger.
    pub r: f64,
    /// Bits per second over the banks and levels the goal keeps.
    pub r_hat: f64,
    pub duration_s: f64,
    pub goal: Goal,
    pub atoms: usize,
    pub atoms_kept: usize,
    pub levels: usize,
    pub levels_kept: usize,
}

/// Length in bits of a graph's canonical serialization.
pub fn message_length(graph: &AtomicGraph, catalog: &ClassCatalog) -> u64 {
    8 * format::canonical_atom_json(graph, catalog).len() as u64
}

/// Length in bits of one serialized attribute payload.
pub fn attribute_message_length(level: &AttributeLevel) -> u64 {
    8 * serde_json::to_string(&encode_level(level)).expect("levels always serialize").len() as u64
}

/// Information rate of a ledger, overall and restricted to `goal`.
pub fn rate(ledger: &InnovationLedger, duration_s: f64, goal: &Goal) -> Result<RateReport> {
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(Error::input("rate needs a positive duration"));
    }
    ledger.check()?;
    let mut total = 0.0;
    let mut kept = 0.0;
    let mut atoms_kept = 0;
    let mut levels = BTreeSet::new();
    let mut levels_kept = BTreeSet::new();
    for a in &ledger.atoms {
        // both sums run in the same order, so an all-admitting goal
        // reproduces R exactly
        let admitted = a.admitted_by(goal);
        total += a.graph.total_bits();
        if admitted {
            atoms_kept += 1;
            kept += a.graph.total_bits();
        }
        for l in &a.attributes {
            total += l.stats.total_bits();
            levels.insert(l.level);
            if admitted && l.level <= goal.max_attribute_level {
                kept += l.stats.total_bits();
                levels_kept.insert(l.level);
            }
        }
    }
    Ok(RateReport {
        r: total / duration_s,
        r_hat: kept / duration_s,
        duration_s,
        goal: goal.clone(),
        atoms: ledger.atoms.len(),
        atoms_kept,
        levels: levels.len(),
        levels_kept: levels_kept.len(),
    })
}

/// Bank of an atom: its smallest component instance id, or its smallest
/// node id when it has no components.
pub fn bank_key(atom: &AtomicGraph) -> u64 {
    atom.components()
        .map(|n| n.instance_id)
        .min()
        .or_else(|| atom.nodes().iter().map(|n| n.instance_id).min())
        .unwrap_or(0)
}

/// Per-bank graph of every frame (empty where the bank is absent).
fn bank_streams(frames: &[MultiGraph]) -> BTreeMap<u64, Vec<(u64, AtomicGraph)>> {
    let keys: BTreeSet<u64> = frames.iter().flat_map(|f| f.atoms.iter().map(bank_key)).collect();
    let mut banks: BTreeMap<u64, Vec<(u64, AtomicGraph)>> = keys
        .iter()
        .map(|k| (*k, frames.iter().map(|f| (f.time_index, AtomicGraph::new())).collect()))
        .collect();
    for (i, f) in frames.iter().enumerate() {
        for a in &f.atoms {
            banks.get_mut(&bank_key(a)).expect("key collected above")[i].1.merge(a);
        }
    }
    banks
}

fn remove_with_orphans(g: &mut AtomicGraph, node: &NodeRef) {
    let neighbors: Vec<NodeRef> = g.neighbors(node).collect();
    g.remove_node(node);
    for n in neighbors {
        if n.kind == NodeKind::Predicate && g.degree(&n) == 0 {
            g.remove_node(&n);
        }
    }
}

fn check_frames(frames: &[MultiGraph]) -> Result<()> {
    for w in frames.windows(2) {
        if w[1].time_index <= w[0].time_index {
            return Err(Error::input(format!(
                "frame time indices must increase, got {} after {}",
                w[1].time_index, w[0].time_index
            )));
        }
    }
    Ok(())
}

/// Integration gate: a node of a class with a score stream survives a frame
/// only if the integrated score of its class reaches `tau` there.
pub fn integrate_stage(
    frames: &[MultiGraph],
    scores: &[ScoreRow],
    params: &IntegrateParams,
    catalog: &ClassCatalog,
) -> Result<Vec<MultiGraph>> {
    let mut by_class: BTreeMap<&str, Vec<(u64, f64)>> = BTreeMap::new();
    for row in scores {
        if catalog.resolve(&row.pattern).is_none() {
            return Err(Error::input(format!("score row for unknown class `{}`", row.pattern)));
        }
        by_class.entry(row.pattern.as_str()).or_default().push((row.t, row.score));
    }
    let mut gates: BTreeMap<(NodeKind, usize), BTreeMap<u64, bool>> = BTreeMap::new();
    for (k, (class, mut rows)) in by_class.into_iter().enumerate() {
        rows.sort_by_key(|r| r.0);
        let stream = ScoreStream::new(k, rows)?;
        let smoothed = integrate(&stream, params.window)?;
        let flags = detect(&smoothed, params.tau);
        let key = catalog.resolve(class).expect("checked above");
        gates.insert(key, stream.frames.iter().map(|f| f.0).zip(flags).collect());
    }
    Ok(frames
        .iter()
        .map(|f| {
            let mut g = f.merged();
            let dropped: Vec<NodeRef> = g
                .nodes()
                .iter()
                .copied()
                .filter(|n| {
                    gates
                        .get(&(n.kind, n.class_id))
                        .and_then(|m| m.get(&f.time_index))
                        .is_some_and(|on| !on)
                })
                .collect();
            for n in &dropped {
                if g.contains(n) {
                    remove_with_orphans(&mut g, n);
                }
            }
            MultiGraph::from_graph(f.time_index, &g)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SubspaceOutput {
    pub innovation: Vec<InnovationRow>,
    pub reconciliation: Option<Reconciliation>,
    /// `(t, track id, payload bits)` of every innovation peak.
    pub peaks: Vec<(u64, u64, u64)>,
}

/// Attribute-level innovation per track and optional id reconciliation.
pub fn subspace_stage(features: &[FeatureRow], params: &SubspaceParams) -> Result<SubspaceOutput> {
    let mut tracks: BTreeMap<u64, Vec<&FeatureRow>> = BTreeMap::new();
    for row in features {
        tracks.entry(row.track_id).or_default().push(row);
    }
    let mut out = SubspaceOutput::default();
    let mut windows = BTreeMap::new();
    for (id, mut rows) in tracks {
        rows.sort_by_key(|r| r.t);
        if rows.windows(2).any(|w| w[0].t == w[1].t) {
            return Err(Error::input(format!("track {id} has two feature rows for one frame")));
        }
        let vectors: Vec<Vec<f64>> = rows.iter().map(|r| r.vector.clone()).collect();
        let series = windowed_innovation(&vectors, &params.innovation)?;
        for (k, row) in rows.iter().enumerate() {
            let peak = series.peaks.contains(&k);
            out.innovation.push(InnovationRow {
                t: row.t,
                track_id: id,
                l1: series.masses[k],
                peak: u8::from(peak),
            });
            if peak {
                let bits = attribute_message_length(&AttributeLevel::Features(row.vector.clone()));
                out.peaks.push((row.t, id, bits));
            }
        }
        windows.insert(id, FeatureWindow::new(id, rows.iter().map(|r| r.t).collect(), &vectors)?);
    }
    if let Some(cfg) = &params.reconcile {
        if windows.len() >= 2 {
            out.reconciliation = Some(reconcile(&windows, cfg)?);
        }
    }
    out.innovation.sort_by_key(|r| (r.t, r.track_id));
    out.peaks.sort();
    Ok(out)
}

/// Renames component instances to their group representative.
pub fn relabel(frames: &[MultiGraph], rec: &Reconciliation) -> Vec<MultiGraph> {
    let rename: BTreeMap<u64, u64> = rec
        .groups
        .iter()
        .flat_map(|g| g.iter().map(move |id| (*id, g[0])))
        .filter(|(a, b)| a != b)
        .collect();
    if rename.is_empty() {
        return frames.to_vec();
    }
    let map = |n: &NodeRef| match (n.kind, rename.get(&n.instance_id)) {
        (NodeKind::Component, Some(to)) => NodeRef { instance_id: *to, ..*n },
        _ => *n,
    };
    frames
        .iter()
        .map(|f| {
            let g = f.merged();
            let mut out = AtomicGraph::new();
            for n in g.nodes() {
                out.add_node(map(n));
            }
            for (a, b) in g.edges() {
                out.add_edge(map(a), map(b));
            }
            for (n, attrs) in g.attributes() {
                out.set_attributes(map(n), attrs.clone());
            }
            MultiGraph::from_graph(f.time_index, &out)
        })
        .collect()
}

/// Baseline smoothing of every bank.
pub fn smooth_banks(
    frames: &[MultiGraph],
    costs: &CostModel,
    config: &SmoothConfig,
) -> Result<(Vec<MultiGraph>, Vec<BankEvent>)> {
    let mut merged: Vec<AtomicGraph> = vec![AtomicGraph::new(); frames.len()];
    let mut events = Vec::new();
    for (bank, stream) in bank_streams(frames) {
        let (smoothed, bank_events) = smooth(&stream, costs, config)?;
        for (slot, (_, g)) in merged.iter_mut().zip(smoothed) {
            slot.merge(&g);
        }
        events.extend(bank_events.into_iter().map(|event| BankEvent { bank, event }));
    }
    events.sort_by_key(|e| (e.event.t, e.bank));
    Ok((
        frames
            .iter()
            .zip(&merged)
            .map(|(f, g)| MultiGraph::from_graph(f.time_index, g))
            .collect(),
        events,
    ))
}

/// A component with the single-neighbour predicates hanging off it.
fn snapshot(g: &AtomicGraph, node: &NodeRef) -> AtomicGraph {
    let mut s = AtomicGraph::new();
    s.add_node(*node);
    if let Some(a) = g.attributes_of(node) {
        s.set_attributes(*node, a.clone());
    }
    for p in g.neighbors(node) {
        if p.kind == NodeKind::Predicate && g.degree(&p) == 1 {
            s.add_node(p).add_edge(*node, p);
        }
    }
    s
}

/// Presence decoding per component instance; decoded-present instances
/// missing from a frame are restored from their nearest observation and
/// decoded-absent ones are removed.
pub fn track_stage(frames: &[MultiGraph], params: &TrackParams, catalog: &ClassCatalog) -> Result<Vec<MultiGraph>> {
    let mut graphs: Vec<AtomicGraph> = frames.iter().map(MultiGraph::merged).collect();
    let mut instances: BTreeSet<NodeRef> = BTreeSet::new();
    for g in &graphs {
        instances.extend(g.components().copied());
    }
    let models: BTreeMap<usize, HmmModel> = params
        .models
        .iter()
        .map(|(class, p)| {
            let id = catalog
                .class_id(NodeKind::Component, class)
                .ok_or_else(|| Error::input(format!("track model for unknown component class `{class}`")))?;
            Ok((id, p.model(params.initial_empty)?))
        })
        .collect::<Result<_>>()?;
    for node in instances {
        let Some(model) = models.get(&node.class_id) else { continue };
        let seen: Vec<bool> = graphs.iter().map(|g| g.contains(&node)).collect();
        let obs: Vec<usize> = seen.iter().map(|s| usize::from(*s)).collect();
        let decoded = viterbi(model, &obs).map_err(|e| {
            let step = match &e {
                Error::DecodeFailure { step } => *step,
                _ => 0,
            };
            e.at_stage("track", step)
        })?;
        let snapshots: Vec<(usize, AtomicGraph)> = seen
            .iter()
            .enumerate()
            .filter(|(_, s)| **s)
            .map(|(t, _)| (t, snapshot(&graphs[t], &node)))
            .collect();
        for (t, state) in decoded.states.iter().enumerate() {
            match (*state == 1, seen[t]) {
                (true, false) => {
                    let nearest = snapshots
                        .iter()
                        .rev()
                        .find(|(s, _)| *s < t)
                        .or_else(|| snapshots.iter().find(|(s, _)| *s > t))
                        .expect("an instance is observed at least once");
                    graphs[t].merge(&nearest.1);
                }
                (false, true) => remove_with_orphans(&mut graphs[t], &node),
                _ => {}
            }
        }
    }
    Ok(frames
        .iter()
        .zip(&graphs)
        .map(|(f, g)| MultiGraph::from_graph(f.time_index, g))
        .collect())
}

/// Ledger of a final stream. Graph-level events are the smoothing events
/// when smoothing ran, otherwise the structural changes of each bank between
/// consecutive frames (the first frame is compared with the empty graph).
/// Attribute events are the innovation peaks, booked on the bank that holds
/// the track's component at that frame.
pub fn build_ledger(
    frames: &[MultiGraph],
    smoothing: Option<&[BankEvent]>,
    peaks: &[(u64, u64, u64)],
    fps: f64,
    catalog: &ClassCatalog,
) -> InnovationLedger {
    let mut atoms: BTreeMap<u64, AtomLedger> = BTreeMap::new();
    for (key, stream) in bank_streams(frames) {
        let entry = atoms.entry(key).or_insert_with(|| AtomLedger {
            key,
            ..AtomLedger::default()
        });
        let mut prev = AtomicGraph::new();
        for (_, g) in &stream {
            for n in g.nodes() {
                let name = catalog.name_of(n).to_string();
                match n.kind {
                    NodeKind::Component => entry.components.insert(name),
                    NodeKind::Predicate => entry.predicates.insert(name),
                };
            }
            if smoothing.is_none() && !g.same_structure(&prev) {
                entry.graph.add(message_length(g, catalog));
            }
            prev = g.clone();
        }
    }
    for e in smoothing.unwrap_or_default() {
        let entry = atoms.entry(e.bank).or_insert_with(|| AtomLedger {
            key: e.bank,
            ..AtomLedger::default()
        });
        entry.graph.add(message_length(&e.event.to, catalog));
    }
    let index: BTreeMap<u64, usize> = frames.iter().enumerate().map(|(i, f)| (f.time_index, i)).collect();
    for &(t, track, bits) in peaks {
        let holder = index.get(&t).and_then(|&i| {
            frames[i]
                .atoms
                .iter()
                .find(|a| a.components().any(|n| n.instance_id == track))
        });
        let key = holder.map_or(track, bank_key);
        let entry = atoms.entry(key).or_insert_with(|| AtomLedger {
            key,
            ..AtomLedger::default()
        });
        if let Some(atom) = holder {
            for n in atom.components() {
                entry.components.insert(catalog.name_of(n).to_string());
            }
        }
        entry.level_mut(2).add(bits);
    }
    InnovationLedger {
        frames: frames.len() as u64,
        fps,
        atoms: atoms.into_values().collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub frames: Vec<MultiGraph>,
    pub events: Vec<BankEvent>,
    pub innovation: Vec<InnovationRow>,
    pub reconciliation: Option<Reconciliation>,
    pub ledger: InnovationLedger,
    pub rate: RateReport,
}

/// Runs the enabled stages in order.
pub fn run(config: &PipelineConfig, data: &PipelineData) -> Result<PipelineOutput> {
    config.check()?;
    check_frames(&data.frames)?;
    let catalog = &config.catalog;
    let mut frames = data.frames.clone();
    let mut events = Vec::new();
    let mut subspace = SubspaceOutput::default();
    for stage in &config.stages {
        match stage {
            Stage::Integrate => {
                frames = integrate_stage(&frames, &data.scores, &config.integrate, catalog)
                    .map_err(|e| stage_error(e, "integrate"))?;
            }
            Stage::Subspace => {
                subspace = subspace_stage(&data.features, &config.subspace).map_err(|e| stage_error(e, "subspace"))?;
                if let Some(rec) = &subspace.reconciliation {
                    frames = relabel(&frames, rec);
                }
            }
            Stage::Smooth => {
                let table = data
                    .costs
                    .clone()
                    .ok_or_else(|| Error::input("the smooth stage needs an edit cost table"))?;
                let costs = CostModel::new(table, catalog)?;
                let (out, ev) =
                    smooth_banks(&frames, &costs, &config.smooth.smooth_config()).map_err(|e| stage_error(e, "smooth"))?;
                frames = out;
                events = ev;
            }
            Stage::Track => {
                frames = track_stage(&frames, &config.track, catalog)?;
            }
        }
    }
    let smoothing = config.enabled(Stage::Smooth).then_some(events.as_slice());
    let ledger = build_ledger(&frames, smoothing, &subspace.peaks, config.fps, catalog);
    let duration = if ledger.frames == 0 {
        1.0 / config.fps
    } else {
        ledger.duration()
    };
    let rate = rate(&ledger, duration, &config.goal())?;
    Ok(PipelineOutput {
        frames,
        events,
        innovation: subspace.innovation,
        reconciliation: subspace.reconciliation,
        ledger,
        rate,
    })
}

/// Input errors stay input errors; anything else is tagged with the stage.
fn stage_error(e: Error, stage: &'static str) -> Error {
    match e {
        Error::Stage { .. } => e,
        e if e.is_input_error() => e,
        e => e.at_stage(stage, 0),
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads a config file; relative paths inside it are taken relative to the
/// file's directory.
pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let mut config: PipelineConfig = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    let base = path.parent().unwrap_or(Path::new("."));
    config.inputs.graphs = resolve(base, &config.inputs.graphs);
    config.inputs.scores = config.inputs.scores.map(|p| resolve(base, &p));
    config.inputs.features = config.inputs.features.map(|p| resolve(base, &p));
    config.output_dir = resolve(base, &config.output_dir);
    if let Some(CostSource::Path(p)) = &config.smooth.costs {
        config.smooth.costs = Some(CostSource::Path(resolve(base, p)));
    }
    config.check()?;
    Ok(config)
}

pub fn load_costs(path: &Path) -> Result<EditCostTable> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn load_data(config: &PipelineConfig) -> Result<PipelineData> {
    let frames = read_graph_stream(BufReader::new(File::open(&config.inputs.graphs)?), &config.catalog)?;
    let scores = match &config.inputs.scores {
        Some(p) => read_score_rows(File::open(p)?)?,
        None => Vec::new(),
    };
    let features = match &config.inputs.features {
        Some(p) => read_feature_rows(File::open(p)?)?,
        None => Vec::new(),
    };
    let costs = match &config.smooth.costs {
        Some(CostSource::Path(p)) => Some(load_costs(p)?),
        Some(CostSource::Inline(t)) => Some(t.clone()),
        None => None,
    };
    Ok(PipelineData {
        frames,
        scores,
        features,
        costs,
    })
}

#[derive(Serialize)]
struct EventRecord {
    t: u64,
    bank: u64,
    ged: serde_json::Value,
    from: Vec<AtomRecord>,
    to: Vec<AtomRecord>,
}

fn atoms_of(g: &AtomicGraph, catalog: &ClassCatalog) -> Vec<AtomRecord> {
    MultiGraph::from_graph(0, g)
        .atoms
        .iter()
        .map(|a| encode_atom(a, catalog))
        .collect()
}

/// One JSON object per smoothing event.
pub fn write_events(mut w: impl Write, events: &[BankEvent], catalog: &ClassCatalog) -> Result<()> {
    for e in events {
        let ged = if e.event.ged.is_finite() {
            serde_json::json!(e.event.ged)
        } else {
            serde_json::json!("inf")
        };
        let rec = EventRecord {
            t: e.event.t,
            bank: e.bank,
            ged,
            from: atoms_of(&e.event.from, catalog),
            to: atoms_of(&e.event.to, catalog),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Writes `graphs.jsonl`, `events.jsonl`, `innovation.csv`,
/// `reconcile.json` (when reconciliation ran), `ledger.json` and
/// `rate.json` into `dir`.
pub fn write_outputs(dir: &Path, out: &PipelineOutput, catalog: &ClassCatalog) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join("graphs.jsonl"))?);
    write_graph_stream(&mut w, &out.frames, catalog)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(dir.join("events.jsonl"))?);
    write_events(&mut w, &out.events, catalog)?;
    w.flush()?;
    write_rows(File::create(dir.join("innovation.csv"))?, &out.innovation)?;
    if let Some(rec) = &out.reconciliation {
        write_json(&dir.join("reconcile.json"), rec)?;
    }
    write_json(&dir.join("ledger.json"), &out.ledger)?;
    write_json(&dir.join("rate.json"), &out.rate)?;
    Ok(())
}

/// Loads a config file, runs it and writes the outputs.
pub fn run_config_file(path: &Path) -> Result<PipelineOutput> {
    let config = load_config(path)?;
    let data = load_data(&config)?;
    let out = run(&config, &data)?;
    write_outputs(&config.output_dir, &out, &config.catalog)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog() -> ClassCatalog {
        ClassCatalog::new(["car", "person"], ["exists", "near"]).unwrap()
    }

    fn car(id: u64) -> AtomicGraph {
        let mut g = AtomicGraph::new();
        let (c, p) = (NodeRef::component(0, id), NodeRef::predicate(0, id + 100));
        g.add_node(c).add_node(p).add_edge(c, p);
        g
    }

    fn frames(pattern: &[bool]) -> Vec<MultiGraph> {
        pattern
            .iter()
            .enumerate()
            .map(|(t, on)| {
                let g = if *on { car(1) } else { AtomicGraph::new() };
                MultiGraph::from_graph(t as u64, &g)
            })
            .collect()
    }

    fn config(stages: Vec<Stage>) -> PipelineConfig {
        PipelineConfig {
            catalog: catalog(),
            stages,
            fps: 30.0,
            goal: None,
            inputs: InputPaths::default(),
            output_dir: PathBuf::from("out"),
            integrate: IntegrateParams::default(),
            subspace: SubspaceParams::default(),
            smooth: SmoothParams::default(),
            track: TrackParams::default(),
            seed: 0,
        }
    }

    #[test]
    fn identity_pipeline_counts_raw_changes() {
        let data = PipelineData {
            frames: frames(&[false, true, true, false, true]),
            ..PipelineData::default()
        };
        let out = run(&config(vec![]), &data).unwrap();
        assert_eq!(out.frames, data.frames);
        // on at 1, off at 3, on at 4
        assert_eq!(out.ledger.graph_events(), 3);
        assert!(out.rate.r > 0.0);
        assert_eq!(out.rate.r, out.rate.r_hat);
    }

    #[test]
    fn stage_order_is_enforced() {
        let mut c = config(vec![Stage::Track, Stage::Smooth]);
        assert!(c.check().unwrap_err().is_input_error());
        c.stages = vec![Stage::Smooth];
        assert!(c.check().is_err(), "smoothing without costs");
        c.stages = vec![Stage::Integrate];
        assert!(c.check().is_err(), "integration without scores");
        c.stages = vec![Stage::Track, Stage::Track];
        assert!(c.check().is_err());
    }

    #[test]
    fn empty_ledger_has_zero_rate() {
        let r = rate(&InnovationLedger::default(), 2.0, &Goal::universal(&catalog())).unwrap();
        assert_eq!(r.r, 0.0);
        assert_eq!(r.r_hat, 0.0);
        assert!(rate(&InnovationLedger::default(), 0.0, &Goal::universal(&catalog())).is_err());
    }

    #[test]
    fn goal_drops_a_bank() {
        let ledger = InnovationLedger {
            frames: 60,
            fps: 30.0,
            atoms: vec![
                AtomLedger {
                    key: 1,
                    components: ["car".to_string()].into(),
                    graph: EventStats { count: 2, mean_bits: 100.0 },
                    attributes: vec![LevelStats {
                        level: 2,
                        stats: EventStats { count: 1, mean_bits: 50.0 },
                    }],
                    ..AtomLedger::default()
                },
                AtomLedger {
                    key: 2,
                    components: ["person".to_string()].into(),
                    graph: EventStats { count: 3, mean_bits: 10.0 },
                    ..AtomLedger::default()
                },
            ],
        };
        let goal = Goal::new(["person"], ["exists"], 3);
        let r = rate(&ledger, 2.0, &goal).unwrap();
        assert_eq!(r.r, (200.0 + 50.0 + 30.0) / 2.0);
        assert_eq!(r.r_hat, 30.0 / 2.0);
        assert_eq!(r.atoms_kept, 1);
        let shallow = Goal::new(["car", "person"], ["exists"], 1);
        let r = rate(&ledger, 2.0, &shallow).unwrap();
        assert_eq!(r.r_hat, (200.0 + 30.0) / 2.0);
        assert_eq!(r.levels_kept, 0);
    }

    #[test]
    fn message_lengths_are_canonical() {
        let cat = catalog();
        let empty = message_length(&AtomicGraph::new(), &cat);
        assert_eq!(empty, 8 * r#"{"nodes":[],"edges":[],"attrs":{}}"#.len() as u64);
        assert_eq!(message_length(&car(3), &cat), message_length(&car(3), &cat));
        assert!(message_length(&car(3), &cat) > empty);
    }

    #[test]
    fn track_stage_fills_gaps_and_drops_blips() {
        let mut params = TrackParams::default();
        params.models.insert(
            "car".into(),
            PresenceParams {
                stay_absent: 0.95,
                stay_present: 0.95,
                correct_absent: 0.8,
                correct_present: 0.8,
            },
        );
        let mut pattern = vec![false; 10];
        pattern.extend([true; 20]);
        pattern[15] = false;
        pattern[4] = true;
        let out = track_stage(&frames(&pattern), &params, &catalog()).unwrap();
        for (t, f) in out.iter().enumerate() {
            assert_eq!(f.node_count() > 0, t >= 10, "frame {t}");
        }
        assert_eq!(out[15].atoms[0], car(1));
    }

    #[test]
    fn integration_gates_classes() {
        let data = frames(&[true; 6]);
        let scores: Vec<ScoreRow> = [0.9, 0.9, 0.1, 0.1, 0.1, 0.9]
            .iter()
            .enumerate()
            .map(|(t, s)| ScoreRow {
                t: t as u64,
                pattern: "car".into(),
                score: *s,
            })
            .collect();
        let params = IntegrateParams { window: 2, tau: 0.5 };
        let out = integrate_stage(&data, &scores, &params, &catalog()).unwrap();
        let present: Vec<bool> = out.iter().map(|f| f.node_count() > 0).collect();
        assert_eq!(present, vec![true, true, true, false, false, true]);
        let bad = vec![ScoreRow {
            t: 0,
            pattern: "plane".into(),
            score: 0.5,
        }];
        assert!(integrate_stage(&data, &bad, &params, &catalog()).is_err());
    }

    #[test]
    fn banks_follow_component_ids() {
        let mut g = car(1);
        g.merge(&car(5));
        let f = vec![MultiGraph::from_graph(0, &g)];
        let banks = bank_streams(&f);
        assert_eq!(banks.keys().copied().collect::<Vec<_>>(), vec![1, 5]);
    }

    #[test]
    fn relabel_merges_fragments() {
        let rec = Reconciliation {
            groups: vec![vec![1, 5]],
            excluded: vec![],
            threshold: 1.0,
            distances: vec![],
        };
        let out = relabel(&[MultiGraph::from_graph(0, &car(5))], &rec);
        assert!(out[0].atoms[0].contains(&NodeRef::component(0, 1)));
        assert!(!out[0].atoms[0].contains(&NodeRef::component(0, 5)));
    }
}
