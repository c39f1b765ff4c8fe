//! Seeded synthetic data: random extractors, ground-truth timelines,
//! correlated score streams, noisy graph streams, feature tracks and HMM
//! samples. Every generator is a pure function of its inputs and seed.

use rand::distr::{Distribution, weighted::WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Geometric, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::confusion::{ConfusionMatrix, LabeledScores};
use crate::error::{Error, Result};
use crate::format::{AtomRecord, decode_atom, encode_atom};
use crate::graph::{AtomicGraph, ClassCatalog, MultiGraph, NodeKind, NodeRef};
use crate::hmm::HmmModel;
use crate::integrator::{ScoreModel, ScoreStream, ar1_unit};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One score model per pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorModel {
    pub labels: Vec<String>,
    pub models: Vec<ScoreModel>,
}

impl ExtractorModel {
    pub fn k(&self) -> usize {
        self.models.len()
    }
}

/// Random extractor with `k` patterns. Each pattern gets a random absent
/// mean and spread; the present mean sits `separability` spreads above it.
pub fn gen_extractor(k: usize, separability: f64, rho: f64, seed: u64) -> Result<ExtractorModel> {
    if k < 2 {
        return Err(Error::input("an extractor needs at least two patterns"));
    }
    if !(separability > 0.0) {
        return Err(Error::input("separability must be positive"));
    }
    let mut r = rng(seed);
    let models = (0..k)
        .map(|_| {
            let mu0 = r.random_range(0.1..0.4);
            let sigma = r.random_range(0.05..0.15);
            ScoreModel {
                mu0,
                sigma0: sigma,
                mu1: mu0 + separability * sigma,
                sigma1: sigma,
                rho,
            }
        })
        .collect::<Vec<_>>();
    for m in &models {
        m.check()?;
    }
    Ok(ExtractorModel {
        labels: (0..k).map(|i| format!("p{i}")).collect(),
        models,
    })
}

fn clip(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// `n` single-object samples: a uniformly drawn true pattern scores from
/// its present distribution, every other pattern from its absent one.
pub fn sample_detections(extractor: &ExtractorModel, n: usize, seed: u64) -> Vec<LabeledScores> {
    let mut r = rng(seed);
    let k = extractor.k();
    (0..n)
        .map(|_| {
            let truth = r.random_range(0..k);
            let scores = extractor
                .models
                .iter()
                .enumerate()
                .map(|(j, m)| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    if j == truth {
                        clip(m.mu1 + m.sigma1 * z)
                    } else {
                        clip(m.mu0 + m.sigma0 * z)
                    }
                })
                .collect();
            LabeledScores { truth, scores }
        })
        .collect()
}

/// Ground-truth presence of each pattern per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub presence: Vec<Vec<bool>>,
    pub dwell_mean_on: f64,
    pub dwell_mean_off: f64,
}

impl Timeline {
    pub fn frames(&self) -> usize {
        self.presence.first().map_or(0, Vec::len)
    }
}

fn dwell(mean: f64, r: &mut impl Rng) -> Option<usize> {
    if mean.is_infinite() {
        return None;
    }
    let g = Geometric::new(1.0 / mean).expect("mean >= 1 gives a valid probability");
    Some(1 + g.sample(r) as usize)
}

/// Alternating geometric on/off dwells per pattern, each track starting
/// off. An infinite off-dwell mean keeps the pattern absent throughout.
pub fn gen_timeline(k: usize, frames: usize, dwell_mean_on: f64, dwell_mean_off: f64, seed: u64) -> Result<Timeline> {
    if frames == 0 {
        return Err(Error::input("a timeline needs at least one frame"));
    }
    if !(dwell_mean_on >= 1.0 && dwell_mean_off >= 1.0) {
        return Err(Error::input("dwell means must be at least one frame"));
    }
    let mut r = rng(seed);
    let presence = (0..k)
        .map(|_| {
            let mut track = Vec::with_capacity(frames);
            let mut on = false;
            while track.len() < frames {
                let mean = if on { dwell_mean_on } else { dwell_mean_off };
                let len = dwell(mean, &mut r).unwrap_or(frames);
                let len = len.min(frames - track.len());
                track.extend(std::iter::repeat_n(on, len));
                on = !on;
            }
            track
        })
        .collect();
    Ok(Timeline {
        presence,
        dwell_mean_on,
        dwell_mean_off,
    })
}

/// Lengths of the maximal runs of `value` that start and end inside the
/// track.
pub fn complete_runs(track: &[bool], value: bool) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=track.len() {
        if i == track.len() || track[i] != track[start] {
            let interior = start > 0 && i < track.len();
            if track[start] == value && interior {
                runs.push(i - start);
            }
            start = i;
        }
    }
    runs
}

/// AR(1)-correlated scores per pattern, present-distribution on frames
/// where the pattern is on and absent-distribution otherwise.
pub fn emit_scores(timeline: &Timeline, extractor: &ExtractorModel, seed: u64) -> Result<Vec<ScoreStream>> {
    if timeline.presence.len() != extractor.k() {
        return Err(Error::input(format!(
            "timeline has {} patterns, extractor {}",
            timeline.presence.len(),
            extractor.k()
        )));
    }
    let mut r = rng(seed);
    timeline
        .presence
        .iter()
        .zip(&extractor.models)
        .enumerate()
        .map(|(k, (track, m))| {
            let noise = ar1_unit(m.rho, track.len(), &mut r);
            let frames = track
                .iter()
                .zip(noise)
                .enumerate()
                .map(|(t, (on, z))| {
                    let (mu, sigma) = if *on { (m.mu1, m.sigma1) } else { (m.mu0, m.sigma0) };
                    (t as u64, clip(mu + sigma * z))
                })
                .collect();
            ScoreStream::new(k, frames)
        })
        .collect()
}

/// A scripted graph signal with an observation-error model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScenarioRepr", into = "ScenarioRepr")]
pub struct ScenarioSpec {
    pub catalog: ClassCatalog,
    pub frames: usize,
    /// `(first frame, graph)`, ascending; the graph holds until the next
    /// entry. Frames before the first entry are empty.
    pub script: Vec<(usize, AtomicGraph)>,
    /// When set, observations equal the truth except that with this
    /// probability per frame one node suffers a forced error drawn from its
    /// confusion row. When unset, every node is redrawn from its row.
    pub frame_error_rate: Option<f64>,
    /// Probability per frame of one spurious component.
    pub false_alarm_rate: f64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ScriptEntry {
    from: usize,
    atoms: Vec<AtomRecord>,
}

#[derive(Serialize, Deserialize)]
struct ScenarioRepr {
    catalog: ClassCatalog,
    frames: usize,
    script: Vec<ScriptEntry>,
    #[serde(default)]
    frame_error_rate: Option<f64>,
    #[serde(default)]
    false_alarm_rate: f64,
    #[serde(default)]
    seed: u64,
}

impl TryFrom<ScenarioRepr> for ScenarioSpec {
    type Error = Error;

    fn try_from(r: ScenarioRepr) -> Result<Self> {
        let script = r
            .script
            .iter()
            .map(|e| {
                let mut g = AtomicGraph::new();
                for a in &e.atoms {
                    g.merge(&decode_atom(a, &r.catalog)?);
                }
                Ok((e.from, g))
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = ScenarioSpec {
            catalog: r.catalog,
            frames: r.frames,
            script,
            frame_error_rate: r.frame_error_rate,
            false_alarm_rate: r.false_alarm_rate,
            seed: r.seed,
        };
        spec.check()?;
        Ok(spec)
    }
}

impl From<ScenarioSpec> for ScenarioRepr {
    fn from(s: ScenarioSpec) -> Self {
        let script = s
            .script
            .iter()
            .map(|(from, g)| ScriptEntry {
                from: *from,
                atoms: MultiGraph::from_graph(0, g)
                    .atoms
                    .iter()
                    .map(|a| encode_atom(a, &s.catalog))
                    .collect(),
            })
            .collect();
        ScenarioRepr {
            catalog: s.catalog,
            frames: s.frames,
            script,
            frame_error_rate: s.frame_error_rate,
            false_alarm_rate: s.false_alarm_rate,
            seed: s.seed,
        }
    }
}

impl ScenarioSpec {
    pub fn check(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::input("scenario needs at least one frame"));
        }
        for w in self.script.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::input("script entries must have increasing start frames"));
            }
        }
        if let Some((from, _)) = self.script.last() {
            if *from >= self.frames {
                return Err(Error::input(format!("script entry at frame {from} is past the end")));
            }
        }
        let rates = [self.frame_error_rate.unwrap_or(0.0), self.false_alarm_rate];
        if rates.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::input("error rates must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Scripted graph at frame `t`.
    pub fn truth_at(&self, t: usize) -> AtomicGraph {
        self.script
            .iter()
            .take_while(|(from, _)| *from <= t)
            .last()
            .map(|(_, g)| g.clone())
            .unwrap_or_default()
    }

    /// Start frames of the script entries that change the graph.
    pub fn transitions(&self) -> Vec<usize> {
        let mut prev = AtomicGraph::new();
        let mut out = Vec::new();
        for (from, g) in &self.script {
            if !g.same_structure(&prev) {
                out.push(*from);
            }
            prev = g.clone();
        }
        out
    }
}

/// What the extractor reports for one true node.
enum Outcome {
    Keep,
    Replace(usize),
    Miss,
}

/// Confusion rows re-indexed by catalog class id, restricted to the node's
/// own kind.
struct ErrorModel {
    // per kind: class id -> (detect-as weights over class ids, miss weight)
    rows: [Vec<Option<(Vec<f64>, f64)>>; 2],
    false_alarm: Vec<f64>,
}

fn slot(kind: NodeKind) -> usize {
    match kind {
        NodeKind::Component => 0,
        NodeKind::Predicate => 1,
    }
}

impl ErrorModel {
    fn new(cm: &ConfusionMatrix, catalog: &ClassCatalog) -> Result<Self> {
        let mut rows = [
            vec![None; catalog.class_count(NodeKind::Component)],
            vec![None; catalog.class_count(NodeKind::Predicate)],
        ];
        let resolved = cm
            .labels()
            .iter()
            .map(|l| {
                catalog
                    .resolve(l)
                    .ok_or_else(|| Error::input(format!("confusion label `{l}` is not in the catalog")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut false_alarm = vec![0.0; catalog.class_count(NodeKind::Component)];
        for (i, (kind, id)) in resolved.iter().enumerate() {
            let mut weights = vec![0.0; catalog.class_count(*kind)];
            for (j, (kj, idj)) in resolved.iter().enumerate() {
                if kj == kind {
                    weights[*idj] += cm.rate(i, j);
                }
                if *kind == NodeKind::Component && *kj == NodeKind::Component && i != j {
                    false_alarm[*idj] += cm.counts()[i][j] as f64;
                }
            }
            rows[slot(*kind)][*id] = Some((weights, cm.miss_rate(i)));
        }
        if false_alarm.iter().all(|w| *w == 0.0) {
            for (kind, id) in &resolved {
                if *kind == NodeKind::Component {
                    false_alarm[*id] = 1.0;
                }
            }
        }
        Ok(Self { rows, false_alarm })
    }

    fn row(&self, node: &NodeRef) -> Option<&(Vec<f64>, f64)> {
        self.rows[slot(node.kind)].get(node.class_id).and_then(Option::as_ref)
    }

    /// Draws from the row; `forced` removes the correct outcome.
    fn draw(&self, node: &NodeRef, forced: bool, r: &mut impl Rng) -> Outcome {
        let Some((weights, miss)) = self.row(node) else {
            return if forced { Outcome::Miss } else { Outcome::Keep };
        };
        let mut w = weights.clone();
        w.push(*miss);
        if forced {
            w[node.class_id] = 0.0;
        }
        let Ok(dist) = WeightedIndex::new(&w) else {
            return if forced { Outcome::Miss } else { Outcome::Keep };
        };
        match dist.sample(r) {
            j if j == weights.len() => Outcome::Miss,
            j if j == node.class_id => Outcome::Keep,
            j => Outcome::Replace(j),
        }
    }
}

fn apply(graph: &mut AtomicGraph, node: NodeRef, outcome: Outcome) {
    match outcome {
        Outcome::Keep => {}
        Outcome::Miss => {
            let neighbors: Vec<NodeRef> = graph.neighbors(&node).collect();
            graph.remove_node(&node);
            // predicates left without any component disappear with it
            for n in neighbors {
                if n.kind == NodeKind::Predicate && graph.degree(&n) == 0 {
                    graph.remove_node(&n);
                }
            }
        }
        Outcome::Replace(class_id) => {
            let replacement = NodeRef { class_id, ..node };
            let neighbors: Vec<NodeRef> = graph.neighbors(&node).collect();
            let attrs = graph.attributes_of(&node).cloned();
            graph.remove_node(&node);
            graph.add_node(replacement);
            for n in neighbors {
                graph.add_edge(replacement, n);
            }
            if let Some(a) = attrs {
                graph.set_attributes(replacement, a);
            }
        }
    }
}

/// Instance ids of spurious components start here.
pub const FALSE_ALARM_ID_BASE: u64 = 10_000;

/// Truth and observed frame streams for a scenario.
pub fn emit_graph_stream(spec: &ScenarioSpec, cm: &ConfusionMatrix) -> Result<(Vec<MultiGraph>, Vec<MultiGraph>)> {
    spec.check()?;
    let model = ErrorModel::new(cm, &spec.catalog)?;
    let alarm = WeightedIndex::new(&model.false_alarm).ok();
    let mut r = rng(spec.seed);
    let mut truth = Vec::with_capacity(spec.frames);
    let mut observed = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let g = spec.truth_at(t);
        let mut obs = g.clone();
        let nodes: Vec<NodeRef> = g.nodes().iter().copied().collect();
        match spec.frame_error_rate {
            Some(rate) => {
                if !nodes.is_empty() && r.random_bool(rate) {
                    let node = nodes[r.random_range(0..nodes.len())];
                    let outcome = model.draw(&node, true, &mut r);
                    apply(&mut obs, node, outcome);
                }
            }
            None => {
                for node in nodes {
                    if obs.contains(&node) {
                        let outcome = model.draw(&node, false, &mut r);
                        apply(&mut obs, node, outcome);
                    }
                }
            }
        }
        if let Some(dist) = &alarm {
            if spec.false_alarm_rate > 0.0 && r.random_bool(spec.false_alarm_rate) {
                let class = dist.sample(&mut r);
                obs.add_node(NodeRef::component(class, FALSE_ALARM_ID_BASE + class as u64));
            }
        }
        truth.push(MultiGraph::from_graph(t as u64, &g));
        observed.push(MultiGraph::from_graph(t as u64, &obs));
    }
    Ok((truth, observed))
}

pub fn random_unit(dim: usize, r: &mut impl Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(r)).collect();
    normalize(v)
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Unit feature vectors of one object over `frames` frames: the first basis
/// vector plus a slow sinusoidal drift of amplitude `wobble` along the
/// others, plus iid noise.
pub fn object_features(basis: &[Vec<f64>], frames: usize, wobble: f64, noise_sd: f64, r: &mut impl Rng) -> Vec<Vec<f64>> {
    let dim = basis[0].len();
    let phases: Vec<f64> = basis.iter().map(|_| r.random_range(0.0..std::f64::consts::TAU)).collect();
    (0..frames)
        .map(|t| {
            let mut v = basis[0].clone();
            for (k, b) in basis.iter().enumerate().skip(1) {
                let c = wobble * (std::f64::consts::TAU * t as f64 / frames.max(1) as f64 + phases[k]).sin();
                v.iter_mut().zip(b).for_each(|(x, y)| *x += c * y);
            }
            for x in v.iter_mut().take(dim) {
                let z: f64 = StandardNormal.sample(r);
                *x += noise_sd * z;
            }
            normalize(v)
        })
        .collect()
}

/// Feature stream that switches from one appearance to another at
/// `change`.
pub fn step_features(dim: usize, frames: usize, change: usize, noise_sd: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    let a = random_unit(dim, &mut r);
    let b = random_unit(dim, &mut r);
    (0..frames)
        .map(|t| {
            let base = if t < change { &a } else { &b };
            let v = base
                .iter()
                .map(|x| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    x + noise_sd * z
                })
                .collect();
            normalize(v)
        })
        .collect()
}

/// A state path and observation sequence drawn from an HMM.
pub fn sample_hmm(model: &HmmModel, len: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut r = rng(seed);
    let draw = |row: &[f64], r: &mut ChaCha8Rng| WeightedIndex::new(row).expect("valid distribution").sample(r);
    let mut states = Vec::with_capacity(len);
    let mut obs = Vec::with_capacity(len);
    let mut s = draw(model.p(), &mut r);
    for t in 0..len {
        if t > 0 {
            s = draw(&model.a()[s], &mut r);
        }
        states.push(s);
        obs.push(draw(&model.b()[s], &mut r));
    }
    (states, obs)
}
