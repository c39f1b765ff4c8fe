//! Class-aware time integration of detector scores.
//!
//! Averaging `T` consecutive scores leaves the H0/H1 means unchanged and
//! shrinks their spread, which moves the ROC curve up. How much it shrinks
//! depends on how correlated consecutive scores are; scores are modelled as
//! a stationary AR(1) process with lag-1 correlation `rho`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreStream {
    pub pattern: usize,
    /// `(time_index, score)` with strictly increasing time indices.
    pub frames: Vec<(u64, f64)>,
}

impl ScoreStream {
    pub fn new(pattern: usize, frames: Vec<(u64, f64)>) -> Result<Self> {
        if frames.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::input("score stream time indices must be strictly increasing"));
        }
        Ok(Self { pattern, frames })
    }

    /// A stream with time indices `0..scores.len()`.
    pub fn from_scores(pattern: usize, scores: impl IntoIterator<Item = f64>) -> Self {
        Self {
            pattern,
            frames: scores.into_iter().enumerate().map(|(t, s)| (t as u64, s)).collect(),
        }
    }

    pub fn scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.frames.iter().map(|(_, s)| *s)
    }
}

/// Per-pattern integration window and detection threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrationPolicy {
    pub windows: Vec<usize>,
    pub taus: Vec<f64>,
}

impl IntegrationPolicy {
    pub fn uniform(k: usize, window: usize, tau: f64) -> Result<Self> {
        let p = Self {
            windows: vec![window; k],
            taus: vec![tau; k],
        };
        p.check()?;
        Ok(p)
    }

    pub fn check(&self) -> Result<()> {
        if self.windows.len() != self.taus.len() {
            return Err(Error::input("policy needs one window and one threshold per pattern"));
        }
        if self.windows.contains(&0) {
            return Err(Error::input("integration windows must be at least 1"));
        }
        Ok(())
    }

    /// Integrates and thresholds one stream with its pattern's settings.
    pub fn apply(&self, stream: &ScoreStream) -> Result<Vec<bool>> {
        let window = *self
            .windows
            .get(stream.pattern)
            .ok_or_else(|| Error::input(format!("no policy for pattern {}", stream.pattern)))?;
        Ok(detect(&integrate(stream, window)?, self.taus[stream.pattern]))
    }
}

/// Gaussian score distributions under H0 (absent) and H1 (present).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreModel {
    pub mu0: f64,
    pub sigma0: f64,
    pub mu1: f64,
    pub sigma1: f64,
    pub rho: f64,
}

impl ScoreModel {
    pub fn check(&self) -> Result<()> {
        if !(self.sigma0 > 0.0 && self.sigma1 > 0.0) {
            return Err(Error::input("score model standard deviations must be positive"));
        }
        if !(self.mu1 > self.mu0) {
            return Err(Error::input("score model needs mu1 > mu0"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::input("score model correlation must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Causal moving average: frame `t` gets the mean of the last
/// `min(window, t + 1)` scores.
pub fn integrate(stream: &ScoreStream, window: usize) -> Result<ScoreStream> {
    if window == 0 {
        return Err(Error::input("integration window must be at least 1"));
    }
    if stream.frames.is_empty() {
        return Err(Error::input("cannot integrate an empty score stream"));
    }
    let scores: Vec<f64> = stream.scores().collect();
    let mut out = Vec::with_capacity(scores.len());
    for t in 0..scores.len() {
        let n = (t + 1).min(window);
        let mean = scores[t + 1 - n..=t].iter().sum::<f64>() / n as f64;
        out.push((stream.frames[t].0, mean));
    }
    // keep the output inside the input range despite rounding
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for f in &mut out {
        f.1 = f.1.clamp(lo, hi);
    }
    Ok(ScoreStream {
        pattern: stream.pattern,
        frames: out,
    })
}

/// Per-frame `score >= tau`.
pub fn detect(stream: &ScoreStream, tau: f64) -> Vec<bool> {
    stream.scores().map(|s| s >= tau).collect()
}

/// Variance multiplier of the mean of `window` consecutive AR(1) samples:
/// `(1 + 2 * sum_{k=1}^{T-1} (1 - k/T) rho^k) / T`.
pub fn window_variance_factor(rho: f64, window: usize) -> f64 {
    let t = window as f64;
    let mut acc = 1.0;
    let mut rk = 1.0;
    for k in 1..window {
        rk *= rho;
        acc += 2.0 * (1.0 - k as f64 / t) * rk;
    }
    acc / t
}

/// Standard deviation of a window mean.
pub fn averaged_sigma(sigma: f64, rho: f64, window: usize) -> f64 {
    sigma * window_variance_factor(rho, window).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuningRow {
    pub window: usize,
    pub tau: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowTuning {
    pub window: usize,
    pub tau: f64,
    pub tpr: f64,
    /// One row per candidate window, `1..=max_window`.
    pub table: Vec<TuningRow>,
}

/// Threshold hitting `target_fpr` under H0 and the resulting TPR under H1
/// for a window of `window` samples.
pub fn operating_point(model: &ScoreModel, target_fpr: f64, window: usize) -> Result<TuningRow> {
    model.check()?;
    let s0 = averaged_sigma(model.sigma0, model.rho, window);
    let s1 = averaged_sigma(model.sigma1, model.rho, window);
    let h0 = Normal::new(model.mu0, s0).map_err(|e| Error::input(e.to_string()))?;
    let h1 = Normal::new(model.mu1, s1).map_err(|e| Error::input(e.to_string()))?;
    let tau = h0.inverse_cdf(1.0 - target_fpr);
    Ok(TuningRow {
        window,
        tau,
        tpr: h1.sf(tau),
    })
}

/// Picks the window in `1..=max_window` with the best TPR at `target_fpr`.
/// Ties go to the shorter window.
pub fn tune_window(model: &ScoreModel, target_fpr: f64, max_window: usize) -> Result<WindowTuning> {
    if !(0.0 < target_fpr && target_fpr < 1.0) {
        return Err(Error::input("target FPR must lie in (0, 1)"));
    }
    if max_window == 0 {
        return Err(Error::input("max window must be at least 1"));
    }
    let table = (1..=max_window)
        .map(|t| operating_point(model, target_fpr, t))
        .collect::<Result<Vec<_>>>()?;
    let mut best = table[0];
    for row in &table[1..] {
        // relative slack so that rounding in the variance factor is not a win
        if row.tpr > best.tpr + 1e-12 * best.tpr.max(1e-300) {
            best = *row;
        }
    }
    Ok(WindowTuning {
        window: best.window,
        tau: best.tau,
        tpr: best.tpr,
        table,
    })
}

/// Draws `len` samples of a zero-mean, unit-variance stationary AR(1)
/// process.
pub fn ar1_unit(rho: f64, len: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
    let innovation = (1.0 - rho * rho).max(0.0).sqrt();
    let mut out = Vec::with_capacity(len);
    let mut x: f64 = StandardNormal.sample(rng);
    for _ in 0..len {
        out.push(x);
        let e: f64 = StandardNormal.sample(rng);
        x = rho * x + innovation * e;
    }
    out
}

fn std_dev(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Monte Carlo estimate of `sigma_hat / sigma` for window means of H0
/// scores: `n_trials` independent windows of `window` AR(1) samples.
pub fn empirical_sigma_ratio(model: &ScoreModel, window: usize, n_trials: usize, seed: u64) -> Result<f64> {
    model.check()?;
    if window == 0 || n_trials < 2 {
        return Err(Error::input("need a positive window and at least two trials"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw = Vec::with_capacity(n_trials * window);
    let mut means = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        let w: Vec<f64> = ar1_unit(model.rho, window, &mut rng)
            .into_iter()
            .map(|z| model.mu0 + model.sigma0 * z)
            .collect();
        means.push(w.iter().sum::<f64>() / window as f64);
        raw.extend(w);
    }
    Ok(std_dev(&means) / std_dev(&raw))
}
