//! Attribute-level innovation tracking on feature-vector windows.
//!
//! A window of per-frame feature vectors is split into a low-rank part `L`
//! (the stable appearance subspace) and a sparse part `S` (what the subspace
//! cannot explain) by alternating a rank-`t` projection of `D - S` with
//! element-wise shrinkage of `D - L`. The l1 mass of each row of `S` is the
//! innovation of that frame.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dsu::DisjointSets;
use crate::error::{Error, Result};
use crate::graph::UNIT_NORM_TOLERANCE;

/// Frames of one track stacked as rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureWindow {
    pub track_id: u64,
    pub frame_ids: Vec<u64>,
    pub matrix: DMatrix<f64>,
}

impl FeatureWindow {
    pub fn new(track_id: u64, frame_ids: Vec<u64>, rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::input(format!("track {track_id} has no frames")));
        }
        if rows.len() != frame_ids.len() {
            return Err(Error::input("one frame id per feature row is required"));
        }
        let d = rows[0].len();
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(Error::input(format!("track {track_id}: row {i} has dimension {}", r.len())));
            }
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::input(format!("track {track_id}: row {i} has norm {norm}, expected 1")));
            }
        }
        Ok(Self {
            track_id,
            frame_ids,
            matrix: rows_to_matrix(rows),
        })
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}

/// Shrinkage weight: `Auto` is `1 / sqrt(max(n, d))`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Lambda {
    #[default]
    Auto,
    Fixed(f64),
}

impl Lambda {
    pub fn resolve(self, n: usize, d: usize) -> f64 {
        match self {
            Lambda::Auto => 1.0 / (n.max(d).max(1) as f64).sqrt(),
            Lambda::Fixed(l) => l,
        }
    }
}

impl std::str::FromStr for Lambda {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Lambda::Auto);
        }
        s.parse::<f64>()
            .map(Lambda::Fixed)
            .map_err(|_| Error::input(format!("lambda must be `auto` or a number, got `{s}`")))
    }
}

impl Serialize for Lambda {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Lambda::Auto => s.serialize_str("auto"),
            Lambda::Fixed(l) => s.serialize_f64(*l),
        }
    }
}

impl<'de> Deserialize<'de> for Lambda {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Word(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(Lambda::Fixed(x)),
            Repr::Word(w) => w.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankPolicy {
    Fixed(usize),
    /// Grow the rank while each new singular value still carries at least
    /// `threshold` of the cumulative singular mass.
    Auto { threshold: f64, max_rank: usize },
}

impl Default for RankPolicy {
    fn default() -> Self {
        RankPolicy::Auto {
            threshold: 0.05,
            max_rank: usize::MAX,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcpConfig {
    pub lambda: Lambda,
    pub rank: RankPolicy,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for PcpConfig {
    fn default() -> Self {
        Self {
            lambda: Lambda::Auto,
            rank: RankPolicy::default(),
            max_iter: 200,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcpDecomposition {
    pub low_rank: DMatrix<f64>,
    pub sparse: DMatrix<f64>,
    pub rank: usize,
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `0.5 * ||L + S - D||_F^2 + lambda * ||S||_1`, starting with the
    /// value at `L = S = 0` and then once per iteration.
    pub objective: Vec<f64>,
}

pub fn shrink_scalar(x: f64, lambda: f64) -> f64 {
    x.signum() * (x.abs() - lambda).max(0.0)
}

/// Element-wise soft thresholding `sign(x) * max(|x| - lambda, 0)`.
pub fn shrink(x: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    x.map(|v| if v == 0.0 { 0.0 } else { shrink_scalar(v, lambda) })
}

fn l1(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|x| x.abs()).sum()
}

/// Singular triplets of `m`, sorted by singular value descending.
struct SortedSvd {
    values: Vec<f64>,
    u: DMatrix<f64>,
    v_t: DMatrix<f64>,
    order: Vec<usize>,
}

impl SortedSvd {
    fn new(m: &DMatrix<f64>) -> Self {
        let svd = m.clone().svd(true, true);
        let raw: Vec<f64> = svd.singular_values.iter().copied().collect();
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by(|&a, &b| raw[b].total_cmp(&raw[a]).then(a.cmp(&b)));
        Self {
            values: order.iter().map(|&k| raw[k]).collect(),
            u: svd.u.expect("requested U"),
            v_t: svd.v_t.expect("requested V^T"),
            order,
        }
    }

    /// Best rank-`t` approximation.
    fn truncate(&self, t: usize, nrows: usize, ncols: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(nrows, ncols);
        for (&k, &s) in self.order.iter().zip(&self.values).take(t) {
            if s == 0.0 {
                break;
            }
            out += (self.u.column(k) * s) * self.v_t.row(k);
        }
        out
    }
}

/// Number of leading singular values to keep: stop at the first value that
/// contributes less than `threshold` of the cumulative mass up to and
/// including itself.
pub fn select_rank(sorted_values: &[f64], threshold: f64, cap: usize) -> usize {
    let mut cumulative = 0.0;
    let mut t = 0;
    for &s in sorted_values.iter().take(cap) {
        cumulative += s;
        if s <= 0.0 || s < threshold * cumulative {
            break;
        }
        t += 1;
    }
    t
}

/// Rank heuristic applied to the singular values of `d - s`.
pub fn rank_select(d: &DMatrix<f64>, s: &DMatrix<f64>, threshold: f64) -> usize {
    let values = SortedSvd::new(&(d - s)).values;
    select_rank(&values, threshold, d.nrows().min(d.ncols()))
}

fn objective(d: &DMatrix<f64>, l: &DMatrix<f64>, s: &DMatrix<f64>, lambda: f64) -> f64 {
    0.5 * (l + s - d).norm_squared() + lambda * l1(s)
}

/// Low-rank plus sparse decomposition by alternating minimization.
pub fn pcp(d: &DMatrix<f64>, config: &PcpConfig) -> Result<PcpDecomposition> {
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::input("feature matrix contains non-finite entries"));
    }
    if config.max_iter == 0 {
        return Err(Error::input("pcp needs at least one iteration"));
    }
    let (n, dim) = d.shape();
    let lambda = config.lambda.resolve(n, dim);
    if !(lambda > 0.0) {
        return Err(Error::input("pcp shrinkage weight must be positive"));
    }
    let cap = n.min(dim);
    let scale = d.norm().max(1.0);
    let mut sparse = DMatrix::zeros(n, dim);
    let mut low_rank = DMatrix::zeros(n, dim);
    let mut rank = 0;
    let mut objective_trace = vec![objective(d, &low_rank, &sparse, lambda)];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iter {
        iterations += 1;
        let svd = SortedSvd::new(&(d - &sparse));
        rank = match config.rank {
            RankPolicy::Fixed(t) => t.min(cap),
            // never shrink the rank: keeps the objective monotone
            RankPolicy::Auto { threshold, max_rank } => {
                rank.max(select_rank(&svd.values, threshold, cap.min(max_rank)))
            }
        };
        let next = svd.truncate(rank, n, dim);
        sparse = shrink(&(d - &next), lambda);
        let change = (&next - &low_rank).norm() / scale;
        low_rank = next;
        objective_trace.push(objective(d, &low_rank, &sparse, lambda));
        if change < config.tol {
            converged = true;
            break;
        }
    }
    Ok(PcpDecomposition {
        low_rank,
        sparse,
        rank,
        lambda,
        iterations,
        converged,
        objective: objective_trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnovationThreshold {
    Absolute(f64),
    /// Multiple of the mean per-row l1 mass of the data.
    Relative(f64),
}

impl Default for InnovationThreshold {
    fn default() -> Self {
        InnovationThreshold::Absolute(2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnovationSeries {
    /// l1 mass of the sparse row of each frame.
    pub masses: Vec<f64>,
    pub peaks: Vec<usize>,
    pub threshold: f64,
}

/// Half-width of the neighbourhood a peak must dominate.
pub const PEAK_SUPPRESSION: usize = 3;

/// Frames whose mass exceeds `threshold` and dominates every other frame
/// within [`PEAK_SUPPRESSION`] on either side; on a plateau the first frame
/// wins.
pub fn find_peaks(masses: &[f64], threshold: f64) -> Vec<usize> {
    let n = masses.len();
    (0..n)
        .filter(|&i| {
            let m = masses[i];
            if !(m > threshold) {
                return false;
            }
            let lo = i.saturating_sub(PEAK_SUPPRESSION);
            let hi = (i + PEAK_SUPPRESSION).min(n - 1);
            (lo..=hi).all(|j| j == i || m > masses[j] || (m == masses[j] && i < j))
        })
        .collect()
}

fn row_l1(m: &DMatrix<f64>) -> Vec<f64> {
    m.row_iter().map(|r| r.iter().map(|x| x.abs()).sum()).collect()
}

fn resolve_threshold(threshold: InnovationThreshold, data_rows: &[f64]) -> f64 {
    match threshold {
        InnovationThreshold::Absolute(x) => x,
        InnovationThreshold::Relative(f) => {
            let mean = if data_rows.is_empty() {
                0.0
            } else {
                data_rows.iter().sum::<f64>() / data_rows.len() as f64
            };
            f * mean
        }
    }
}

/// Per-frame innovation of one decomposition.
pub fn innovation(decomp: &PcpDecomposition, threshold: InnovationThreshold) -> Result<InnovationSeries> {
    let data = &decomp.low_rank + &decomp.sparse;
    let threshold = resolve_threshold(threshold, &row_l1(&data));
    if !(threshold > 0.0) {
        return Err(Error::input("innovation threshold must be positive"));
    }
    let masses = row_l1(&decomp.sparse);
    Ok(InnovationSeries {
        peaks: find_peaks(&masses, threshold),
        masses,
        threshold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowedConfig {
    pub buffer: usize,
    pub pcp: PcpConfig,
    pub threshold: InnovationThreshold,
}

impl Default for WindowedConfig {
    fn default() -> Self {
        Self {
            buffer: 32,
            pcp: PcpConfig {
                rank: RankPolicy::Fixed(1),
                ..PcpConfig::default()
            },
            threshold: InnovationThreshold::default(),
        }
    }
}

/// Innovation over a stream of feature vectors with a moving buffer.
///
/// Frame `i` is scored by decomposing the buffer of the last
/// `min(buffer, i + 1)` frames and taking the sparse mass of its newest
/// row. The first frame has nothing to compare against and scores zero.
pub fn windowed_innovation(stream: &[Vec<f64>], config: &WindowedConfig) -> Result<InnovationSeries> {
    if config.buffer < 2 {
        return Err(Error::input("innovation buffer must hold at least two frames"));
    }
    let mut masses = Vec::with_capacity(stream.len());
    for i in 0..stream.len() {
        let start = (i + 1).saturating_sub(config.buffer);
        if i - start + 1 < 2 {
            masses.push(0.0);
            continue;
        }
        let window = rows_to_matrix(&stream[start..=i]);
        let decomp = pcp(&window, &config.pcp).map_err(|e| e.at_stage("subspace", i))?;
        let last = decomp.sparse.nrows() - 1;
        masses.push(decomp.sparse.row(last).iter().map(|x| x.abs()).sum());
    }
    let data_rows: Vec<f64> = stream.iter().map(|r| r.iter().map(|x| x.abs()).sum()).collect();
    let threshold = resolve_threshold(config.threshold, &data_rows);
    if !(threshold > 0.0) {
        return Err(Error::input("innovation threshold must be positive"));
    }
    Ok(InnovationSeries {
        peaks: find_peaks(&masses, threshold),
        masses,
        threshold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconcileConfig {
    pub pcp: PcpConfig,
    /// Absolute Manhattan-distance cut-off; when unset it is derived from the
    /// pairwise distances.
    pub threshold: Option<f64>,
}

impl Default for ReconcileConfig {
    fn default() -> Self {
        Self {
            pcp: PcpConfig {
                rank: RankPolicy::Auto {
                    threshold: 0.05,
                    max_rank: 3,
                },
                ..PcpConfig::default()
            },
            threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconciliation {
    /// Track ids believed to be the same object; sorted, ordered by
    /// smallest id.
    pub groups: Vec<Vec<u64>>,
    /// Tracks too short to decompose.
    pub excluded: Vec<u64>,
    pub threshold: f64,
    pub distances: Vec<(u64, u64, f64)>,
}

impl Reconciliation {
    /// Representative (smallest) id of the group containing `track`.
    pub fn representative(&self, track: u64) -> u64 {
        self.groups
            .iter()
            .find(|g| g.contains(&track))
            .map_or(track, |g| g[0])
    }
}

/// Best two-class split of sorted values by between-class variance.
/// Returns `(cut, low_mean, high_mean)` where `cut` lies halfway between
/// the two classes.
pub fn otsu_split(sorted: &[f64]) -> Option<(f64, f64, f64)> {
    let n = sorted.len();
    if n < 2 {
        return None;
    }
    let total: f64 = sorted.iter().sum();
    let mut best: Option<(f64, usize)> = None;
    let mut low_sum = 0.0;
    for k in 1..n {
        low_sum += sorted[k - 1];
        if sorted[k] == sorted[k - 1] {
            continue;
        }
        let (w0, w1) = (k as f64, (n - k) as f64);
        let (m0, m1) = (low_sum / w0, (total - low_sum) / w1);
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if best.is_none_or(|(b, _)| between > b) {
            best = Some((between, k));
        }
    }
    let (_, k) = best?;
    let low: f64 = sorted[..k].iter().sum::<f64>() / k as f64;
    let high: f64 = sorted[k..].iter().sum::<f64>() / (n - k) as f64;
    Some(((sorted[k - 1] + sorted[k]) / 2.0, low, high))
}

/// Groups track ids that show the same object.
///
/// Each track's low-rank rows are averaged over time and tracks are linked
/// when the Manhattan distance between their means falls below the cut-off.
/// Without an override, the cut-off is half the mean l1 norm of the track
/// means, refined to the Otsu split of the pairwise distances when that
/// split puts one class on each side of it.
pub fn reconcile(tracks: &BTreeMap<u64, FeatureWindow>, config: &ReconcileConfig) -> Result<Reconciliation> {
    if tracks.len() < 2 {
        return Err(Error::input("reconciliation needs at least two tracks"));
    }
    let mut excluded = Vec::new();
    let mut ids = Vec::new();
    let mut means: Vec<Vec<f64>> = Vec::new();
    for (id, w) in tracks {
        if w.len() < 2 {
            log::warn!("track {id} has {} frame(s); excluded from reconciliation", w.len());
            excluded.push(*id);
            continue;
        }
        let decomp = pcp(&w.matrix, &config.pcp)?;
        let n = decomp.low_rank.nrows() as f64;
        let mean: Vec<f64> = decomp.low_rank.column_iter().map(|c| c.sum() / n).collect();
        ids.push(*id);
        means.push(mean);
    }
    let mut distances = Vec::new();
    for a in 0..ids.len() {
        for b in a + 1..ids.len() {
            if means[a].len() != means[b].len() {
                return Err(Error::input(format!(
                    "tracks {} and {} have different feature dimensions",
                    ids[a], ids[b]
                )));
            }
            let dist: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).abs()).sum();
            distances.push((a, b, dist));
        }
    }
    let threshold = match config.threshold {
        Some(t) => t,
        None => {
            let cap = if means.is_empty() {
                0.0
            } else {
                0.5 * means.iter().map(|m| m.iter().map(|x| x.abs()).sum::<f64>()).sum::<f64>()
                    / means.len() as f64
            };
            let mut sorted: Vec<f64> = distances.iter().map(|d| d.2).collect();
            sorted.sort_by(f64::total_cmp);
            match otsu_split(&sorted) {
                Some((cut, low, high)) if low < cap && cap < high => cut,
                _ => cap,
            }
        }
    };
    let mut dsu = DisjointSets::new(ids.len());
    for &(a, b, dist) in &distances {
        if dist < threshold {
            dsu.union(a, b);
        }
    }
    let mut groups: Vec<Vec<u64>> = dsu
        .groups()
        .into_iter()
        .map(|g| g.into_iter().map(|k| ids[k]).collect())
        .collect();
    groups.extend(excluded.iter().map(|id| vec![*id]));
    for g in &mut groups {
        g.sort_unstable();
    }
    groups.sort_by_key(|g| g[0]);
    Ok(Reconciliation {
        groups,
        excluded,
        threshold,
        distances: distances.into_iter().map(|(a, b, d)| (ids[a], ids[b], d)).collect(),
    })
}
