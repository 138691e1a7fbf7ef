//! Synthetic anomalies: chains with their lowest states removed, spliced
//! into a regular-phase series.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::markov::{sample_trajectory, MarkovError, StateSpace, TransitionMatrix};
use crate::trace::{SliceState, SlotSample};

#[derive(Debug, Error, PartialEq)]
pub enum AnomalyError {
    #[error("removing {removed} of {states} states leaves nothing")]
    AllStatesRemoved { removed: usize, states: usize },
    #[error("surviving states do not form a single communicating class")]
    DisconnectedRemainder,
    #[error("series never enters a surviving state after slot {0}")]
    NoEntryPoint(usize),
    #[error("series of {len} slots is too short for window {n}")]
    SeriesTooShort { len: usize, n: usize },
    #[error("start slot {t_s} outside ({n}, {t_e}]")]
    StartOutOfRange { t_s: usize, n: usize, t_e: usize },
    #[error("slot {0} is not in a surviving state")]
    BadEntryState(usize),
    #[error("beta {0} outside [0, 1)")]
    InvalidBeta(f64),
    #[error("anomaly needs exactly one of `beta` or `remove_k`")]
    AmbiguousRemoval,
    #[error(transparent)]
    Markov(#[from] MarkovError),
}

/// How many of the lowest states to remove.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Removal {
    /// `⌈β·|S|⌉` states.
    Fraction(f64),
    /// Exactly `k` states.
    Count(usize),
}

impl Removal {
    pub fn count(self, states: usize) -> usize {
        match self {
            // slack keeps e.g. 0.5·6 from rounding up to 4
            Removal::Fraction(beta) => ((beta * states as f64) - 1e-9).ceil().max(0.0) as usize,
            Removal::Count(k) => k,
        }
    }
}

/// Which chain loses its lowest states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyChain {
    /// The user-count chain; MCS keeps its recorded values.
    #[default]
    Users,
    /// The joint (users, MCS) chain, ordered by users then MCS.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AnomalyDoc", into = "AnomalyDoc")]
pub struct AnomalySpec {
    pub slice: usize,
    pub removal: Removal,
    pub t_s: Option<usize>,
    pub seed: u64,
    pub chain: AnomalyChain,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnomalyDoc {
    slice: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    remove_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    t_s: Option<usize>,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    chain: AnomalyChain,
}

impl TryFrom<AnomalyDoc> for AnomalySpec {
    type Error = AnomalyError;

    fn try_from(d: AnomalyDoc) -> Result<Self, Self::Error> {
        let removal = match (d.beta, d.remove_k) {
            (Some(b), None) if (0.0..1.0).contains(&b) => Removal::Fraction(b),
            (Some(b), None) => return Err(AnomalyError::InvalidBeta(b)),
            (None, Some(k)) => Removal::Count(k),
            _ => return Err(AnomalyError::AmbiguousRemoval),
        };
        Ok(Self {
            slice: d.slice,
            removal,
            t_s: d.t_s,
            seed: d.seed,
            chain: d.chain,
        })
    }
}

impl From<AnomalySpec> for AnomalyDoc {
    fn from(s: AnomalySpec) -> Self {
        let (beta, remove_k) = match s.removal {
            Removal::Fraction(b) => (Some(b), None),
            Removal::Count(k) => (None, Some(k)),
        };
        Self {
            slice: s.slice,
            beta,
            remove_k,
            t_s: s.t_s,
            seed: s.seed,
            chain: s.chain,
        }
    }
}

/// Deletes the lowest states and moves each surviving row's lost mass onto
/// its largest surviving entry (ties go to the larger state). A row left
/// with no surviving mass becomes a self-loop.
pub fn remove_low_states<S: Clone + Ord>(
    m: &TransitionMatrix<S>,
    removal: Removal,
) -> Result<TransitionMatrix<S>, AnomalyError> {
    let n = m.len();
    let k = removal.count(n);
    if k >= n {
        return Err(AnomalyError::AllStatesRemoved { removed: k, states: n });
    }
    if k == 0 {
        return Ok(m.clone());
    }
    let survivors = k..n;
    let space = StateSpace::new(m.space().states()[k..].to_vec())?;
    let mut rows = Vec::with_capacity(n - k);
    for i in survivors.clone() {
        let full = m.row(i);
        let lost: f64 = full[..k].iter().sum();
        let mut row = full[k..].to_vec();
        let mut top = 0;
        for (j, &p) in row.iter().enumerate() {
            if p >= row[top] {
                top = j;
            }
        }
        if row[top] > 0.0 {
            row[top] += lost;
        } else {
            log::warn!("row {i} has no surviving transition; replacing it by a self-loop");
            row[i - k] = 1.0;
        }
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= sum);
        rows.push(row);
    }
    let out = TransitionMatrix::new(space, rows)?;
    if !out.is_irreducible() {
        return Err(AnomalyError::DisconnectedRemainder);
    }
    Ok(out)
}

/// Start and end slots of the anomaly: the first slot after `n` spent in a
/// surviving state, up to `T_s − n − 1`. An explicit start is used as is.
pub fn choose_anomaly_window<S: Clone + Ord>(
    series: &[S],
    survivors: &StateSpace<S>,
    n: usize,
    t_s_override: Option<usize>,
) -> Result<(usize, usize), AnomalyError> {
    let len = series.len();
    if len <= 2 * n + 1 {
        return Err(AnomalyError::SeriesTooShort { len, n });
    }
    let t_e = len - n - 1;
    if let Some(t_s) = t_s_override {
        if t_s <= n || t_s > t_e {
            return Err(AnomalyError::StartOutOfRange { t_s, n, t_e });
        }
        return Ok((t_s, t_e));
    }
    let t_s = (n + 1..=t_e)
        .find(|&t| survivors.contains(&series[t]))
        .ok_or(AnomalyError::NoEntryPoint(n))?;
    Ok((t_s, t_e))
}

/// Replaces `[t_s, t_e]` by a trajectory of `p_prime` started from
/// `series[t_s]`. The flags mark exactly the replaced slots.
pub fn splice<S: Clone + Ord>(
    series: &[S],
    p_prime: &TransitionMatrix<S>,
    window: (usize, usize),
    seed: u64,
) -> Result<(Vec<S>, Vec<bool>), AnomalyError> {
    let (t_s, t_e) = window;
    let mut out = series.to_vec();
    let mut flags = vec![false; series.len()];
    if t_s > t_e || t_s >= series.len() {
        return Ok((out, flags));
    }
    let t_e = t_e.min(series.len() - 1);
    if !p_prime.space().contains(&series[t_s]) {
        return Err(AnomalyError::BadEntryState(t_s));
    }
    let path = sample_trajectory(p_prime, &series[t_s], t_e - t_s + 1, seed)?;
    out[t_s..=t_e].clone_from_slice(&path);
    flags[t_s..=t_e].iter_mut().for_each(|f| *f = true);
    Ok((out, flags))
}

/// Applies a user-count anomaly to a slot series: the users component is
/// resampled from `p_prime`, the MCS is kept and demand is recomputed.
pub fn splice_users<F>(
    series: &[SlotSample],
    p_prime: &TransitionMatrix<u32>,
    window: (usize, usize),
    seed: u64,
    mut demand: F,
) -> Result<(Vec<SlotSample>, Vec<bool>), AnomalyError>
where
    F: FnMut(SliceState) -> u32,
{
    let users: Vec<u32> = series.iter().map(|s| s.state.users).collect();
    let (users, flags) = splice(&users, p_prime, window, seed)?;
    let out = series
        .iter()
        .zip(&users)
        .zip(&flags)
        .map(|((s, &u), &f)| {
            if !f {
                return *s;
            }
            let state = SliceState::new(u, s.state.mcs);
            SlotSample {
                state,
                demand: demand(state),
            }
        })
        .collect();
    Ok((out, flags))
}
