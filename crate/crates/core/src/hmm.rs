//! Discrete hidden Markov models over graph states: Viterbi decoding, the
//! beam-limited M-algorithm, Baum-Welch estimation and factorized
//! per-component presence chains.
//!
//! All probabilities are handled as natural logs with `-inf` for zero, so
//! sequences of tens of thousands of frames do not underflow.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROW_TOLERANCE: f64 = 1e-9;

/// Two path scores closer than this (relative to their magnitude) are tied.
const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRepr", into = "ModelRepr")]
pub struct HmmModel {
    labels: Vec<String>,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    p: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelRepr {
    labels: Vec<String>,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    p: Vec<f64>,
}

impl TryFrom<ModelRepr> for HmmModel {
    type Error = Error;

    fn try_from(r: ModelRepr) -> Result<Self> {
        HmmModel::new(r.labels, r.a, r.b, r.p)
    }
}

impl From<HmmModel> for ModelRepr {
    fn from(m: HmmModel) -> Self {
        ModelRepr {
            labels: m.labels,
            a: m.a,
            b: m.b,
            p: m.p,
        }
    }
}

fn check_distribution(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
        return Err(Error::input(format!("{what} has a negative or non-finite entry")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_TOLERANCE {
        return Err(Error::input(format!("{what} sums to {sum}, expected 1")));
    }
    Ok(())
}

fn ln(x: f64) -> f64 {
    if x > 0.0 {
        x.ln()
    } else {
        f64::NEG_INFINITY
    }
}

fn ln_matrix(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    m.iter().map(|r| r.iter().map(|x| ln(*x)).collect()).collect()
}

fn tied(x: f64, best: f64) -> bool {
    x == best || (x.is_finite() && best.is_finite() && (best - x).abs() <= TIE_TOLERANCE * best.abs().max(1.0))
}

impl HmmModel {
    /// `a[i][j]`: probability of moving from state `i` to `j`; `b[i][k]`:
    /// probability of observing symbol `k` in state `i`; `p`: initial
    /// distribution. Unlabeled models get `s0, s1, ...`.
    pub fn new(labels: Vec<String>, a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, p: Vec<f64>) -> Result<Self> {
        let n = p.len();
        if n == 0 {
            return Err(Error::input("model needs at least one state"));
        }
        let labels = if labels.is_empty() {
            (0..n).map(|i| format!("s{i}")).collect()
        } else {
            labels
        };
        if labels.len() != n || a.len() != n || b.len() != n {
            return Err(Error::input(format!("labels, A, B and p must all describe {n} states")));
        }
        let symbols = b[0].len();
        if symbols == 0 {
            return Err(Error::input("observation matrix has no symbols"));
        }
        for i in 0..n {
            if a[i].len() != n {
                return Err(Error::input(format!("row {i} of A has {} entries", a[i].len())));
            }
            if b[i].len() != symbols {
                return Err(Error::input(format!("row {i} of B has {} entries", b[i].len())));
            }
            check_distribution(&a[i], &format!("row {i} of A"))?;
            check_distribution(&b[i], &format!("row {i} of B"))?;
        }
        check_distribution(&p, "p")?;
        Ok(Self { labels, a, b, p })
    }

    pub fn states(&self) -> usize {
        self.p.len()
    }

    pub fn symbols(&self) -> usize {
        self.b[0].len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn a(&self) -> &[Vec<f64>] {
        &self.a
    }

    pub fn b(&self) -> &[Vec<f64>] {
        &self.b
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    /// Two-state presence chain: state 0 absent, state 1 present; symbol 0
    /// not detected, symbol 1 detected.
    pub fn presence(stay_absent: f64, stay_present: f64, correct_absent: f64, correct_present: f64) -> Result<Self> {
        Self::new(
            vec!["absent".into(), "present".into()],
            vec![vec![stay_absent, 1.0 - stay_absent], vec![1.0 - stay_present, stay_present]],
            vec![vec![correct_absent, 1.0 - correct_absent], vec![1.0 - correct_present, correct_present]],
            vec![0.5, 0.5],
        )
    }

    pub fn with_initial(mut self, p: Vec<f64>) -> Result<Self> {
        check_distribution(&p, "p")?;
        if p.len() != self.states() {
            return Err(Error::input("initial distribution has the wrong length"));
        }
        self.p = p;
        Ok(self)
    }

    /// Joint log-probability of a state path and the observations.
    pub fn path_log_prob(&self, states: &[usize], obs: &[usize]) -> f64 {
        let mut score = ln(self.p[states[0]]) + ln(self.b[states[0]][obs[0]]);
        for t in 1..states.len() {
            score = (score + ln(self.a[states[t - 1]][states[t]])) + ln(self.b[states[t]][obs[t]]);
        }
        score
    }

    fn check_obs(&self, obs: &[usize]) -> Result<()> {
        if obs.is_empty() {
            return Err(Error::input("observation sequence is empty"));
        }
        if let Some((t, o)) = obs.iter().enumerate().find(|(_, o)| **o >= self.symbols()) {
            return Err(Error::input(format!(
                "observation {o} at step {t} is outside the {} model symbols",
                self.symbols()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub states: Vec<usize>,
    pub log_prob: f64,
}

/// Viterbi search keeping at most `beam` states alive per step.
///
/// Ties are broken towards the lexicographically smallest state sequence:
/// every surviving partial path carries its rank in lexicographic order, and
/// among equally likely predecessors the lowest rank wins.
fn decode(model: &HmmModel, obs: &[usize], beam: usize) -> Result<Decoded> {
    model.check_obs(obs)?;
    let n = model.states();
    let la = ln_matrix(&model.a);
    let lb = ln_matrix(&model.b);
    let steps = obs.len();
    let mut back = vec![vec![0usize; n]; steps];
    let mut delta: Vec<f64> = (0..n).map(|j| ln(model.p[j]) + lb[j][obs[0]]).collect();
    let mut rank: Vec<usize> = (0..n).collect();
    prune(&mut delta, &rank, beam);
    if delta.iter().all(|d| *d == f64::NEG_INFINITY) {
        return Err(Error::DecodeFailure { step: 0 });
    }
    for t in 1..steps {
        let mut next = vec![f64::NEG_INFINITY; n];
        for j in 0..n {
            let cand: Vec<f64> = (0..n).map(|i| delta[i] + la[i][j]).collect();
            let best = cand.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let pred = (0..n)
                .filter(|&i| tied(cand[i], best))
                .min_by_key(|&i| rank[i])
                .expect("at least one candidate attains the maximum");
            back[t][j] = pred;
            next[j] = best + lb[j][obs[t]];
        }
        // rank of each new partial path in lexicographic order
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&j| (rank[back[t][j]], j));
        let mut new_rank = vec![0; n];
        for (r, j) in order.into_iter().enumerate() {
            new_rank[j] = r;
        }
        rank = new_rank;
        delta = next;
        prune(&mut delta, &rank, beam);
        if delta.iter().all(|d| *d == f64::NEG_INFINITY) {
            return Err(Error::DecodeFailure { step: t });
        }
    }
    let best = delta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut state = (0..n)
        .filter(|&j| tied(delta[j], best))
        .min_by_key(|&j| rank[j])
        .expect("some state is finite");
    let mut states = vec![0; steps];
    for t in (0..steps).rev() {
        states[t] = state;
        state = back[t][state];
    }
    Ok(Decoded { states, log_prob: best })
}

/// Keeps the `beam` best states (ties by rank) and drops the rest.
fn prune(delta: &mut [f64], rank: &[usize], beam: usize) {
    if beam >= delta.len() {
        return;
    }
    let mut order: Vec<usize> = (0..delta.len()).collect();
    order.sort_by(|&x, &y| delta[y].total_cmp(&delta[x]).then(rank[x].cmp(&rank[y])));
    for &j in &order[beam..] {
        delta[j] = f64::NEG_INFINITY;
    }
}

/// Most likely state sequence and its joint log-probability.
pub fn viterbi(model: &HmmModel, obs: &[usize]) -> Result<Decoded> {
    decode(model, obs, model.states())
}

/// Viterbi restricted to the `m` most likely states at every step.
pub fn m_viterbi(model: &HmmModel, obs: &[usize], m: usize) -> Result<Decoded> {
    if m == 0 || m > model.states() {
        return Err(Error::input(format!("beam width {m} must lie in 1..={}", model.states())));
    }
    decode(model, obs, m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub model: HmmModel,
    /// Observation log-likelihood of the initial model and after each
    /// iteration.
    pub log_likelihoods: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

struct Expectations {
    log_likelihood: f64,
    gamma: Vec<Vec<f64>>,
    // summed over time
    xi: Vec<Vec<f64>>,
}

/// Scaled forward-backward pass.
fn expectations(model: &HmmModel, obs: &[usize]) -> Result<Expectations> {
    let n = model.states();
    let steps = obs.len();
    let mut alpha = vec![vec![0.0; n]; steps];
    let mut scale = vec![0.0; steps];
    for t in 0..steps {
        for j in 0..n {
            let prior = if t == 0 {
                model.p[j]
            } else {
                (0..n).map(|i| alpha[t - 1][i] * model.a[i][j]).sum()
            };
            alpha[t][j] = prior * model.b[j][obs[t]];
        }
        scale[t] = alpha[t].iter().sum();
        if !(scale[t] > 0.0) {
            return Err(Error::Estimation(format!(
                "observation {} at step {t} has zero probability under the current model",
                obs[t]
            )));
        }
        for x in &mut alpha[t] {
            *x /= scale[t];
        }
    }
    let mut beta = vec![vec![1.0; n]; steps];
    for t in (0..steps.saturating_sub(1)).rev() {
        for i in 0..n {
            beta[t][i] = (0..n)
                .map(|j| model.a[i][j] * model.b[j][obs[t + 1]] * beta[t + 1][j])
                .sum::<f64>()
                / scale[t + 1];
        }
    }
    let gamma: Vec<Vec<f64>> = (0..steps)
        .map(|t| {
            let g: Vec<f64> = (0..n).map(|i| alpha[t][i] * beta[t][i]).collect();
            let s: f64 = g.iter().sum();
            g.into_iter().map(|x| x / s).collect()
        })
        .collect();
    let mut xi = vec![vec![0.0; n]; n];
    for t in 0..steps.saturating_sub(1) {
        for i in 0..n {
            for j in 0..n {
                xi[i][j] += alpha[t][i] * model.a[i][j] * model.b[j][obs[t + 1]] * beta[t + 1][j] / scale[t + 1];
            }
        }
    }
    Ok(Expectations {
        log_likelihood: scale.iter().map(|c| c.ln()).sum(),
        gamma,
        xi,
    })
}

fn normalized(row: Vec<f64>, fallback: &[f64]) -> Vec<f64> {
    let s: f64 = row.iter().sum();
    if s > 0.0 {
        row.into_iter().map(|x| x / s).collect()
    } else {
        fallback.to_vec()
    }
}

fn reestimate(model: &HmmModel, obs: &[usize], e: &Expectations) -> HmmModel {
    let n = model.states();
    let a = (0..n).map(|i| normalized(e.xi[i].clone(), &model.a[i])).collect();
    let b = (0..n)
        .map(|j| {
            let mut row = vec![0.0; model.symbols()];
            for (t, o) in obs.iter().enumerate() {
                row[*o] += e.gamma[t][j];
            }
            normalized(row, &model.b[j])
        })
        .collect();
    HmmModel {
        labels: model.labels.clone(),
        a,
        b,
        p: normalized(e.gamma[0].clone(), &model.p),
    }
}

/// Expectation-maximization of `(A, B, p)` on one observation sequence.
///
/// Stops when the relative change of the log-likelihood falls below `tol`
/// or after `max_iter` updates. A decrease of the likelihood beyond rounding
/// is reported as an estimation failure.
pub fn baum_welch(obs: &[usize], init: &HmmModel, max_iter: usize, tol: f64) -> Result<FitReport> {
    init.check_obs(obs)?;
    let mut model = init.clone();
    let mut e = expectations(&model, obs)?;
    let mut log_likelihoods = vec![e.log_likelihood];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let next = reestimate(&model, obs, &e);
        let e_next = expectations(&next, obs)?;
        let (old, new) = (e.log_likelihood, e_next.log_likelihood);
        if new < old - 1e-9 * old.abs().max(1.0) {
            return Err(Error::Estimation(format!(
                "log-likelihood decreased from {old} to {new} at iteration {iterations}"
            )));
        }
        model = next;
        e = e_next;
        log_likelihoods.push(new);
        if (new - old).abs() <= tol * old.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }
    Ok(FitReport {
        model,
        log_likelihoods,
        iterations,
        converged,
    })
}

/// Independent chains, one per tracked component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizedModel {
    pub chains: Vec<HmmModel>,
}

impl FactorizedModel {
    pub fn new(chains: Vec<HmmModel>) -> Result<Self> {
        if chains.is_empty() {
            return Err(Error::input("factorized model needs at least one chain"));
        }
        Ok(Self { chains })
    }

    /// Mixed-radix index of a joint state or symbol, first chain most
    /// significant.
    fn encode(digits: &[usize], radix: &[usize]) -> usize {
        digits.iter().zip(radix).fold(0, |acc, (d, r)| acc * r + d)
    }

    fn decode_index(mut index: usize, radix: &[usize]) -> Vec<usize> {
        let mut digits = vec![0; radix.len()];
        for c in (0..radix.len()).rev() {
            digits[c] = index % radix[c];
            index /= radix[c];
        }
        digits
    }

    fn state_radix(&self) -> Vec<usize> {
        self.chains.iter().map(HmmModel::states).collect()
    }

    fn symbol_radix(&self) -> Vec<usize> {
        self.chains.iter().map(HmmModel::symbols).collect()
    }

    /// Joint observation symbols of per-chain observation sequences.
    pub fn joint_observations(&self, obs: &[Vec<usize>]) -> Result<Vec<usize>> {
        self.check_obs(obs)?;
        let radix = self.symbol_radix();
        Ok((0..obs[0].len())
            .map(|t| {
                let digits: Vec<usize> = obs.iter().map(|o| o[t]).collect();
                Self::encode(&digits, &radix)
            })
            .collect())
    }

    /// Splits a joint state sequence into per-chain sequences.
    pub fn split_states(&self, joint: &[usize]) -> Vec<Vec<usize>> {
        let radix = self.state_radix();
        let mut out = vec![Vec::with_capacity(joint.len()); radix.len()];
        for s in joint {
            for (c, d) in Self::decode_index(*s, &radix).into_iter().enumerate() {
                out[c].push(d);
            }
        }
        out
    }

    /// The equivalent product model over all joint states. Exponential in
    /// the number of chains; meant for verification.
    pub fn joint(&self) -> Result<HmmModel> {
        let sr = self.state_radix();
        let or = self.symbol_radix();
        let ns: usize = sr.iter().product();
        let no: usize = or.iter().product();
        let states: Vec<Vec<usize>> = (0..ns).map(|s| Self::decode_index(s, &sr)).collect();
        let symbols: Vec<Vec<usize>> = (0..no).map(|o| Self::decode_index(o, &or)).collect();
        let prod = |f: &dyn Fn(usize) -> f64| (0..self.chains.len()).map(f).product::<f64>();
        let a = states
            .iter()
            .map(|si| states.iter().map(|sj| prod(&|c| self.chains[c].a[si[c]][sj[c]])).collect())
            .collect();
        let b = states
            .iter()
            .map(|si| symbols.iter().map(|ok| prod(&|c| self.chains[c].b[si[c]][ok[c]])).collect())
            .collect();
        let p = states.iter().map(|si| prod(&|c| self.chains[c].p[si[c]])).collect();
        let labels = states
            .iter()
            .map(|s| s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(""))
            .collect();
        // products of valid rows are valid up to rounding
        let renorm = |m: Vec<Vec<f64>>| -> Vec<Vec<f64>> { m.into_iter().map(|r| normalized(r, &[])).collect() };
        HmmModel::new(labels, renorm(a), renorm(b), normalized(p, &[]))
    }

    fn check_obs(&self, obs: &[Vec<usize>]) -> Result<()> {
        if obs.len() != self.chains.len() {
            return Err(Error::input(format!(
                "{} observation sequences for {} chains",
                obs.len(),
                self.chains.len()
            )));
        }
        if obs.iter().any(|o| o.len() != obs[0].len()) {
            return Err(Error::input("per-chain observation sequences differ in length"));
        }
        Ok(())
    }
}

/// Independent Viterbi decoding of every chain.
pub fn decode_factorized(model: &FactorizedModel, obs: &[Vec<usize>]) -> Result<Vec<Decoded>> {
    model.check_obs(obs)?;
    model.chains.iter().zip(obs).map(|(m, o)| viterbi(m, o)).collect()
}
