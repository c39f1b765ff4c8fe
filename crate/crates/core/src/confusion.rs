//! Confusion matrices, the four per-pattern confusion rates, ROC sweeps and
//! prevalence estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Detection counts of a K-pattern extractor at one threshold.
///
/// `counts[i][j]` is the number of samples of true pattern `i` detected as
/// pattern `j`. Rows may sum to less than `totals[i]`; the remainder are
/// misses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CmRepr", into = "CmRepr")]
pub struct ConfusionMatrix {
    labels: Vec<String>,
    tau: f64,
    counts: Vec<Vec<u64>>,
    totals: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct CmRepr {
    labels: Vec<String>,
    tau: f64,
    counts: Vec<Vec<u64>>,
    totals: Vec<u64>,
}

impl TryFrom<CmRepr> for ConfusionMatrix {
    type Error = Error;

    fn try_from(r: CmRepr) -> Result<Self> {
        ConfusionMatrix::new(r.labels, r.tau, r.counts, r.totals)
    }
}

impl From<ConfusionMatrix> for CmRepr {
    fn from(c: ConfusionMatrix) -> Self {
        CmRepr {
            labels: c.labels,
            tau: c.tau,
            counts: c.counts,
            totals: c.totals,
        }
    }
}

/// TPR, FPR, FNR and TNR of one pattern.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub tpr: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub tnr: f64,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>, tau: f64, counts: Vec<Vec<u64>>, totals: Vec<u64>) -> Result<Self> {
        let k = labels.len();
        if k < 2 {
            return Err(Error::input("a confusion matrix needs at least two patterns"));
        }
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::input(format!("threshold {tau} outside [0, 1]")));
        }
        if counts.len() != k || counts.iter().any(|r| r.len() != k) || totals.len() != k {
            return Err(Error::input(format!("confusion matrix shape does not match {k} labels")));
        }
        for (i, row) in counts.iter().enumerate() {
            let detected: u64 = row.iter().sum();
            if detected > totals[i] {
                return Err(Error::input(format!(
                    "pattern `{}` has {detected} detections but only {} samples",
                    labels[i], totals[i]
                )));
            }
        }
        Ok(Self {
            labels,
            tau,
            counts,
            totals,
        })
    }

    /// Builds a matrix from row-stochastic rates scaled by a per-pattern
    /// sample count; rounding is to the nearest integer.
    pub fn from_rates(labels: Vec<String>, tau: f64, rates: &[Vec<f64>], samples_per_pattern: u64) -> Result<Self> {
        let counts = rates
            .iter()
            .map(|row| {
                row.iter()
                    .map(|r| (r * samples_per_pattern as f64).round() as u64)
                    .collect()
            })
            .collect();
        Self::new(labels.clone(), tau, counts, vec![samples_per_pattern; labels.len()])
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn totals(&self) -> &[u64] {
        &self.totals
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn total(&self) -> u64 {
        self.totals.iter().sum()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// `n_{i,j} / N_i`: probability that true pattern `i` is reported as `j`.
    pub fn rate(&self, i: usize, j: usize) -> f64 {
        if self.totals[i] == 0 {
            return 0.0;
        }
        self.counts[i][j] as f64 / self.totals[i] as f64
    }

    /// Probability that true pattern `i` is not reported at all.
    pub fn miss_rate(&self, i: usize) -> f64 {
        if self.totals[i] == 0 {
            return 0.0;
        }
        let detected: u64 = self.counts[i].iter().sum();
        (self.totals[i] - detected) as f64 / self.totals[i] as f64
    }

    /// The four confusion rates of pattern `i`. TNR follows the literal
    /// double sum over `j, k != i`, so with misses it need not equal
    /// `1 - FPR`.
    pub fn metrics(&self, i: usize) -> Result<ConfusionMetrics> {
        let k = self.k();
        if i >= k {
            return Err(Error::input(format!("pattern index {i} out of range for {k} patterns")));
        }
        let n_i = self.totals[i];
        let rest = self.total() - n_i;
        if n_i == 0 {
            return Err(Error::DegeneratePattern {
                pattern: self.labels[i].clone(),
                reason: "no samples of this pattern",
            });
        }
        if rest == 0 {
            return Err(Error::DegeneratePattern {
                pattern: self.labels[i].clone(),
                reason: "no samples of any other pattern",
            });
        }
        let hit = self.counts[i][i];
        let false_pos: u64 = (0..k).filter(|&j| j != i).map(|j| self.counts[j][i]).sum();
        let true_neg: u64 = (0..k)
            .filter(|&j| j != i)
            .flat_map(|j| (0..k).filter(move |&c| c != i).map(move |c| (j, c)))
            .map(|(j, c)| self.counts[j][c])
            .sum();
        let tpr = hit as f64 / n_i as f64;
        Ok(ConfusionMetrics {
            tpr,
            fpr: false_pos as f64 / rest as f64,
            fnr: 1.0 - tpr,
            tnr: true_neg as f64 / rest as f64,
        })
    }
}

/// One labeled detector output: the true pattern and one score per pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledScores {
    pub truth: usize,
    pub scores: Vec<f64>,
}

/// Which pattern a score vector reports at threshold `tau`: the highest
/// score among those `>= tau`, lowest index on ties, `None` for a miss.
pub fn detected_pattern(scores: &[f64], tau: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, &s) in scores.iter().enumerate() {
        if s >= tau && best.is_none_or(|(_, b)| s > b) {
            best = Some((j, s));
        }
    }
    best.map(|(j, _)| j)
}

fn check_samples(samples: &[LabeledScores], k: usize) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::input("no samples"));
    }
    for (n, s) in samples.iter().enumerate() {
        if s.truth >= k || s.scores.len() != k {
            return Err(Error::input(format!("sample {n} does not match {k} patterns")));
        }
        if s.scores.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::input(format!("sample {n} has a score outside [0, 1]")));
        }
    }
    Ok(())
}

/// Counts detections at threshold `tau` under argmax-above-threshold.
pub fn estimate_cm(samples: &[LabeledScores], labels: &[String], tau: f64) -> Result<ConfusionMatrix> {
    let k = labels.len();
    check_samples(samples, k)?;
    let mut counts = vec![vec![0u64; k]; k];
    let mut totals = vec![0u64; k];
    for s in samples {
        totals[s.truth] += 1;
        if let Some(j) = detected_pattern(&s.scores, tau) {
            counts[s.truth][j] += 1;
        }
    }
    ConfusionMatrix::new(labels.to_vec(), tau, counts, totals)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub tau: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub pattern: String,
    /// Sorted by `tau` descending.
    pub points: Vec<RocPoint>,
}

/// ROC curve of every pattern over a threshold grid.
pub fn roc_sweep(samples: &[LabeledScores], labels: &[String], taus: &[f64]) -> Result<Vec<RocCurve>> {
    if taus.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::input("thresholds must be strictly increasing"));
    }
    if taus.iter().any(|t| !(0.0 < *t && *t < 1.0)) {
        return Err(Error::input("thresholds must lie in (0, 1)"));
    }
    let mut curves: Vec<RocCurve> = labels
        .iter()
        .map(|l| RocCurve {
            pattern: l.clone(),
            points: Vec::with_capacity(taus.len()),
        })
        .collect();
    for &tau in taus.iter().rev() {
        let cm = estimate_cm(samples, labels, tau)?;
        for (i, curve) in curves.iter_mut().enumerate() {
            let m = cm.metrics(i)?;
            curve.points.push(RocPoint {
                tau,
                fpr: m.fpr,
                tpr: m.tpr,
            });
        }
    }
    Ok(curves)
}

/// Empirical frequency of each true pattern.
pub fn prevalence(samples: &[LabeledScores], k: usize) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::input("no samples"));
    }
    let mut counts = vec![0u64; k];
    for s in samples {
        if s.truth >= k {
            return Err(Error::input(format!("true pattern {} out of range", s.truth)));
        }
        counts[s.truth] += 1;
    }
    let n = samples.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// Parses a `start:stop:step` threshold grid (inclusive of `stop` up to
/// rounding).
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|e| Error::input(format!("grid `{spec}`: {e}"))))
        .collect::<Result<_>>()?;
    let [start, stop, step] = parts[..] else {
        return Err(Error::input(format!("grid `{spec}` must be start:stop:step")));
    };
    if step <= 0.0 || stop < start {
        return Err(Error::input(format!("grid `{spec}` is empty")));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + step * i as f64).collect())
}
