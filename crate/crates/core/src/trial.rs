//! Trial phase: online statistics, the empirical demand pmf, per-slice
//! demand percentiles, the provisioned bandwidth and per-slice transition
//! matrix estimates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::markov::{MarkovError, StateSpace, TransitionMatrix};
use crate::trace::{SliceState, SlotSample};

#[derive(Debug, Error)]
pub enum TrialError {
    #[error("trial series needs at least 2 slots, got {0}")]
    TooShort(usize),
    #[error("slice {slice} has {found} slots, expected {expected}")]
    LengthMismatch {
        slice: usize,
        expected: usize,
        found: usize,
    },
    #[error("no slices given")]
    NoSlices,
    #[error("expected {expected} per-slice targets, got {found}")]
    TargetMismatch { expected: usize, found: usize },
    #[error("SLA target {0} outside (0, 1]")]
    InvalidTarget(f64),
    #[error("false-alarm bound {0} outside (0, 1)")]
    InvalidAlpha(f64),
    #[error(transparent)]
    Markov(#[from] MarkovError),
}

/// Label of a detector chain state: the slice state, plus the demand when
/// the full state-demand chain is modelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChainState {
    pub users: u32,
    pub mcs: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demand: Option<u32>,
}

/// Which process the per-slice detector chain describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainKind {
    /// Chain over the slice state alone; valid when demand is a
    /// deterministic function of the state.
    #[default]
    State,
    /// Chain over (state, demand) pairs.
    StateDemand,
}

impl ChainKind {
    pub fn label(self, sample: &SlotSample) -> ChainState {
        let SliceState { users, mcs } = sample.state;
        ChainState {
            users,
            mcs,
            demand: match self {
                ChainKind::State => None,
                ChainKind::StateDemand => Some(sample.demand),
            },
        }
    }
}

/// Transition and occurrence counts of one state sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionCounts<S: Ord> {
    pub pairs: BTreeMap<(S, S), u64>,
    pub occurrences: BTreeMap<S, u64>,
    pub outgoing: BTreeMap<S, u64>,
}

impl<S: Clone + Ord> Default for TransitionCounts<S> {
    fn default() -> Self {
        Self {
            pairs: BTreeMap::new(),
            occurrences: BTreeMap::new(),
            outgoing: BTreeMap::new(),
        }
    }
}

impl<S: Clone + Ord> TransitionCounts<S> {
    pub fn from_sequence(seq: &[S]) -> Self {
        let mut c = Self::default();
        for s in seq {
            c.observe_state(s);
        }
        for w in seq.windows(2) {
            c.observe_transition(&w[0], &w[1]);
        }
        c
    }

    fn observe_state(&mut self, s: &S) {
        *self.occurrences.entry(s.clone()).or_default() += 1;
    }

    fn observe_transition(&mut self, from: &S, to: &S) {
        *self.pairs.entry((from.clone(), to.clone())).or_default() += 1;
        *self.outgoing.entry(from.clone()).or_default() += 1;
    }
}

/// Maximum-likelihood transition matrix from counts: transitions out of a
/// state divided by the number of transitions leaving it. A state seen only
/// as the final sample gets a self-loop of probability 1.
pub fn fit_transitions<S: Clone + Ord>(counts: &TransitionCounts<S>) -> Result<TransitionMatrix<S>, MarkovError> {
    let space = StateSpace::new(counts.occurrences.keys().cloned().collect())?;
    let n = space.len();
    let mut rows = vec![vec![0.0; n]; n];
    for ((from, to), &c) in &counts.pairs {
        let i = space.index_of(from).ok_or(MarkovError::UnknownState)?;
        let j = space.index_of(to).ok_or(MarkovError::UnknownState)?;
        rows[i][j] = c as f64 / counts.outgoing[from] as f64;
    }
    for (i, row) in rows.iter_mut().enumerate() {
        if !counts.outgoing.contains_key(space.state(i)) {
            log::debug!("state {i} has no outgoing transition; using a self-loop");
            row[i] = 1.0;
        }
    }
    TransitionMatrix::new(space, rows)
}

/// Empirical pmf of the joint demand vector, plus its per-slice marginals
/// and the distribution of the total demand.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalPmf {
    pub joint: BTreeMap<Vec<u32>, u64>,
    pub marginals: Vec<BTreeMap<u32, u64>>,
    pub totals: BTreeMap<u64, u64>,
    pub total: u64,
}

impl EmpiricalPmf {
    pub fn probability(&self, demand: &[u32]) -> f64 {
        self.joint.get(demand).copied().unwrap_or(0) as f64 / self.total as f64
    }

    pub fn marginal_probability(&self, slice: usize, demand: u32) -> f64 {
        self.marginals[slice].get(&demand).copied().unwrap_or(0) as f64 / self.total as f64
    }
}

#[derive(Debug, Clone)]
pub struct TrialStatistics {
    pub pmf: EmpiricalPmf,
    pub transitions: Vec<TransitionCounts<ChainState>>,
}

fn check_lengths<T>(series: &[Vec<T>]) -> Result<usize, TrialError> {
    let first = series.first().ok_or(TrialError::NoSlices)?;
    let len = first.len();
    for (i, s) in series.iter().enumerate() {
        if s.len() != len {
            return Err(TrialError::LengthMismatch {
                slice: i,
                expected: len,
                found: s.len(),
            });
        }
    }
    if len < 2 {
        return Err(TrialError::TooShort(len));
    }
    Ok(len)
}

/// Demand counts over per-slice demand series of equal length.
pub fn demand_pmf(demands: &[Vec<u32>]) -> Result<EmpiricalPmf, TrialError> {
    let len = check_lengths(demands)?;
    let mut joint: BTreeMap<Vec<u32>, u64> = BTreeMap::new();
    let mut totals: BTreeMap<u64, u64> = BTreeMap::new();
    for t in 0..len {
        let w: Vec<u32> = demands.iter().map(|s| s[t]).collect();
        *totals.entry(w.iter().map(|&x| u64::from(x)).sum()).or_default() += 1;
        *joint.entry(w).or_default() += 1;
    }
    let mut marginals = vec![BTreeMap::new(); demands.len()];
    for (w, &c) in &joint {
        for (i, &wi) in w.iter().enumerate() {
            *marginals[i].entry(wi).or_default() += c;
        }
    }
    Ok(EmpiricalPmf {
        joint,
        marginals,
        totals,
        total: len as u64,
    })
}

/// Single pass over the trial series collecting demand and transition
/// statistics.
pub fn collect(series: &[Vec<SlotSample>], chain: ChainKind) -> Result<TrialStatistics, TrialError> {
    check_lengths(series)?;
    let demands: Vec<Vec<u32>> = series.iter().map(|s| s.iter().map(|x| x.demand).collect()).collect();
    let pmf = demand_pmf(&demands)?;
    let transitions = series
        .iter()
        .map(|s| {
            let labels: Vec<ChainState> = s.iter().map(|x| chain.label(x)).collect();
            TransitionCounts::from_sequence(&labels)
        })
        .collect();
    Ok(TrialStatistics { pmf, transitions })
}

/// Cumulative probabilities are compared with this slack so that targets
/// like 0.8 are met by 4 of 5 samples despite rounding.
const CDF_SLACK: f64 = 1e-12;

/// Smallest value in a count histogram whose cumulative fraction reaches
/// `target`, found by binary search over the sorted support.
fn smallest_reaching<K: Copy + Ord>(counts: &BTreeMap<K, u64>, target: f64) -> Option<K> {
    let total: u64 = counts.values().sum();
    if total == 0 {
        return None;
    }
    let keys: Vec<K> = counts.keys().copied().collect();
    let mut acc = 0u64;
    let cdf: Vec<f64> = counts
        .values()
        .map(|&c| {
            acc += c;
            acc as f64 / total as f64
        })
        .collect();
    let k = cdf.partition_point(|&p| p < target - CDF_SLACK);
    Some(keys[k.min(keys.len() - 1)])
}

/// Empirical `p_h`-percentile of one slice's demand.
pub fn percentile_demand(marginal: &BTreeMap<u32, u64>, p_h: f64) -> u32 {
    smallest_reaching(marginal, p_h).unwrap_or(0)
}

/// Smallest `s` with empirical `P(Σ g(W) ≤ s) ≥ target`, where `g` clips
/// each slice at its percentile when `transform` is set.
pub fn provision(pmf: &EmpiricalPmf, w_h: &[u32], target: f64, transform: bool) -> u32 {
    let mut sums: BTreeMap<u64, u64> = BTreeMap::new();
    for (w, &c) in &pmf.joint {
        let s: u64 = w
            .iter()
            .zip(w_h)
            .map(|(&wi, &hi)| u64::from(if transform { wi.min(hi) } else { wi }))
            .sum();
        *sums.entry(s).or_default() += c;
    }
    smallest_reaching(&sums, target).unwrap_or(0) as u32
}

/// Provisioned bandwidth and the per-slice percentiles it was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvisionPlan {
    pub w_c: u32,
    pub w_h: Vec<u32>,
    pub p_h: Vec<f64>,
    pub transform: bool,
}

impl ProvisionPlan {
    /// Total bandwidth reserved when slices do not share.
    pub fn no_sharing_capacity(&self) -> u32 {
        self.w_h.iter().sum()
    }
}

/// Learned normal behaviour of one slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceModel {
    #[serde(flatten)]
    pub chain: TransitionMatrix<ChainState>,
    pub chain_kind: ChainKind,
    pub w_h: u32,
    pub p_h: f64,
    pub alpha: f64,
    pub dof: u64,
}

impl SliceModel {
    pub fn space(&self) -> &StateSpace<ChainState> {
        self.chain.space()
    }
}

/// Degrees of freedom of the window test: `|S|² − |S|`.
pub fn degrees_of_freedom(states: usize) -> u64 {
    let s = states as u64;
    s * s - s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub p_h: Vec<f64>,
    pub alpha: Vec<f64>,
    #[serde(default = "default_transform")]
    pub transform: bool,
    #[serde(default)]
    pub chain: ChainKind,
}

fn default_transform() -> bool {
    true
}

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub plan: ProvisionPlan,
    pub models: Vec<SliceModel>,
    pub stats: TrialStatistics,
}

/// Runs the whole trial-phase estimation.
pub fn fit_trial(series: &[Vec<SlotSample>], cfg: &TrialConfig) -> Result<TrialOutcome, TrialError> {
    let n = series.len();
    for list in [&cfg.p_h, &cfg.alpha] {
        if list.len() != n {
            return Err(TrialError::TargetMismatch {
                expected: n,
                found: list.len(),
            });
        }
    }
    if let Some(&p) = cfg.p_h.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        return Err(TrialError::InvalidTarget(p));
    }
    if let Some(&a) = cfg.alpha.iter().find(|&&a| !(a > 0.0 && a < 1.0)) {
        return Err(TrialError::InvalidAlpha(a));
    }
    let stats = collect(series, cfg.chain)?;
    let w_h: Vec<u32> = (0..n)
        .map(|i| percentile_demand(&stats.pmf.marginals[i], cfg.p_h[i]))
        .collect();
    let target = cfg.p_h.iter().copied().fold(0.0, f64::max);
    let w_c = provision(&stats.pmf, &w_h, target, cfg.transform);
    let models = stats
        .transitions
        .iter()
        .enumerate()
        .map(|(i, counts)| {
            let chain = fit_transitions(counts)?;
            Ok(SliceModel {
                dof: degrees_of_freedom(chain.len()),
                chain,
                chain_kind: cfg.chain,
                w_h: w_h[i],
                p_h: cfg.p_h[i],
                alpha: cfg.alpha[i],
            })
        })
        .collect::<Result<Vec<_>, MarkovError>>()?;
    Ok(TrialOutcome {
        plan: ProvisionPlan {
            w_c,
            w_h,
            p_h: cfg.p_h.clone(),
            transform: cfg.transform,
        },
        models,
        stats,
    })
}
