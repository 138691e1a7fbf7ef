//! Sliding-window likelihood-ratio test of a slice's recent behaviour
//! against its trial-phase transition matrix.

pub mod chi_square;

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use chi_square::{chi_square_cdf, chi_square_quantile};

use crate::markov::{MarkovError, TransitionMatrix};
use crate::trial::{fit_transitions, SliceModel, TransitionCounts};

#[derive(Debug, Error, PartialEq)]
pub enum DetectorError {
    #[error("window holds {0} samples, at least 2 are needed")]
    WindowTooShort(usize),
    #[error("window holds {have} of {need} samples")]
    WindowNotFull { have: usize, need: usize },
    #[error("window size {0} must be at least 2")]
    InvalidWindow(usize),
    #[error("false-alarm bound {0} outside (0, 1)")]
    InvalidAlpha(f64),
    #[error(transparent)]
    Markov(#[from] MarkovError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Hypothesis {
    /// H0: the slice follows its trial model.
    Normal,
    /// H1: the slice deviates from it.
    Anomalous,
}

impl Hypothesis {
    pub fn is_anomalous(self) -> bool {
        self == Hypothesis::Anomalous
    }
}

/// `ln γ` for false-alarm bound `alpha` and `dof` degrees of freedom.
///
/// The default form is `F_r⁻¹(1 − α/2)`. With `corrected` it is
/// `F_r⁻¹(1 − α)/2`, the level-α test for `2 ln L ~ χ²_r`. With no free
/// parameters the likelihood ratio never rejects, so the threshold is
/// infinite.
pub fn log_gamma_threshold(alpha: f64, dof: u64, corrected: bool) -> f64 {
    let p = if corrected { 1.0 - alpha } else { 1.0 - alpha / 2.0 };
    match chi_square_quantile(dof, p) {
        Some(q) if corrected => q / 2.0,
        Some(q) => q,
        None => f64::INFINITY,
    }
}

/// The threshold `γ` itself. Overflows to infinity for large `dof`; the
/// detector works with [`log_gamma_threshold`].
pub fn gamma_threshold(alpha: f64, dof: u64, corrected: bool) -> f64 {
    log_gamma_threshold(alpha, dof, corrected).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub n: usize,
    pub alpha: f64,
    pub dof: u64,
    #[serde(default)]
    pub corrected_threshold: bool,
}

impl DetectorConfig {
    pub fn new(n: usize, alpha: f64, dof: u64, corrected_threshold: bool) -> Result<Self, DetectorError> {
        if n < 2 {
            return Err(DetectorError::InvalidWindow(n));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(DetectorError::InvalidAlpha(alpha));
        }
        Ok(Self {
            n,
            alpha,
            dof,
            corrected_threshold,
        })
    }

    pub fn for_model(model: &SliceModel, n: usize, corrected_threshold: bool) -> Result<Self, DetectorError> {
        Self::new(n, model.alpha, model.dof, corrected_threshold)
    }

    pub fn log_gamma(&self) -> f64 {
        log_gamma_threshold(self.alpha, self.dof, self.corrected_threshold)
    }
}

/// The last `n` samples of one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorWindow<S> {
    capacity: usize,
    samples: VecDeque<S>,
}

impl<S: Clone + Ord> DetectorWindow<S> {
    pub fn new(n: usize) -> Self {
        Self {
            capacity: n,
            samples: VecDeque::with_capacity(n),
        }
    }

    pub fn from_samples(n: usize, samples: &[S]) -> Self {
        let mut w = Self::new(n);
        for s in samples {
            w.push(s.clone());
        }
        w
    }

    pub fn push(&mut self, sample: S) {
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back(sample);
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_full(&self) -> bool {
        self.samples.len() == self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &S> {
        self.samples.iter()
    }

    pub fn counts(&self) -> TransitionCounts<S> {
        let seq: Vec<S> = self.samples.iter().cloned().collect();
        TransitionCounts::from_sequence(&seq)
    }
}

/// MLE of the window's own transition matrix over the states it visits.
pub fn window_mle<S: Clone + Ord>(window: &DetectorWindow<S>) -> Result<TransitionMatrix<S>, DetectorError> {
    if window.len() < 2 {
        return Err(DetectorError::WindowTooShort(window.len()));
    }
    Ok(fit_transitions(&window.counts())?)
}

/// `ln L = Σ ln Q̂(z'|z) − ln P̂(z'|z)` over the window's transitions.
/// Positive infinity when some transition is impossible under `p_hat`,
/// or touches a state `p_hat` has never seen.
pub fn likelihood_ratio<S: Clone + Ord>(
    window: &DetectorWindow<S>,
    p_hat: &TransitionMatrix<S>,
) -> Result<f64, DetectorError> {
    if window.len() < 2 {
        return Err(DetectorError::WindowTooShort(window.len()));
    }
    let space = p_hat.space();
    let mut pairs: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut outgoing: BTreeMap<usize, u64> = BTreeMap::new();
    let mut prev: Option<usize> = None;
    for s in window.iter() {
        let Some(j) = space.index_of(s) else {
            return Ok(f64::INFINITY);
        };
        if let Some(i) = prev {
            *pairs.entry((i, j)).or_default() += 1;
            *outgoing.entry(i).or_default() += 1;
        }
        prev = Some(j);
    }
    let mut log_l = 0.0;
    for (&(i, j), &c) in &pairs {
        let p = p_hat.prob(i, j);
        if p <= 0.0 {
            return Ok(f64::INFINITY);
        }
        let q = c as f64 / outgoing[&i] as f64;
        log_l += c as f64 * (q.ln() - p.ln());
    }
    // the in-window MLE maximizes the window likelihood; clear rounding
    Ok(log_l.max(0.0))
}

/// Decision for a full window.
pub fn test<S: Clone + Ord>(
    window: &DetectorWindow<S>,
    p_hat: &TransitionMatrix<S>,
    log_gamma: f64,
) -> Result<Hypothesis, DetectorError> {
    if !window.is_full() {
        return Err(DetectorError::WindowNotFull {
            have: window.len(),
            need: window.capacity(),
        });
    }
    let log_l = likelihood_ratio(window, p_hat)?;
    Ok(if log_l >= log_gamma {
        Hypothesis::Anomalous
    } else {
        Hypothesis::Normal
    })
}

/// Per-slice detector: its window, threshold and the trial model's
/// transition matrix. Before the window fills it answers H0.
#[derive(Debug, Clone)]
pub struct SliceDetector<S: Clone + Ord> {
    window: DetectorWindow<S>,
    log_gamma: f64,
    p_hat: TransitionMatrix<S>,
}

impl<S: Clone + Ord> SliceDetector<S> {
    pub fn new(cfg: &DetectorConfig, p_hat: TransitionMatrix<S>) -> Self {
        Self {
            window: DetectorWindow::new(cfg.n),
            log_gamma: cfg.log_gamma(),
            p_hat,
        }
    }

    pub fn observe(&mut self, sample: S) {
        self.window.push(sample);
    }

    pub fn window(&self) -> &DetectorWindow<S> {
        &self.window
    }

    pub fn log_gamma(&self) -> f64 {
        self.log_gamma
    }

    pub fn decide(&self) -> Hypothesis {
        match test(&self.window, &self.p_hat, self.log_gamma) {
            Ok(h) => h,
            Err(_) => Hypothesis::Normal,
        }
    }
}
