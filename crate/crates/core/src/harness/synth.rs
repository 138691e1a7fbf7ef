//! Synthetic slice workloads built from user-count and MCS chains.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{HarnessError, Scenario, SourceSpec};
use crate::markov::{
    seeded_rng, stationary_distribution, MarkovError, StateSpace, TrajectorySampler, TransitionMatrix,
};
use crate::trace::{slot_demand, DemandMapTable, SliceState, SlotSample};

fn default_band() -> usize {
    1
}
fn default_stay() -> f64 {
    0.5
}
fn default_bias() -> f64 {
    1.0
}

/// One component of a synthetic slice state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChainSpec {
    Constant {
        value: u32,
    },
    Explicit {
        states: Vec<u32>,
        rows: Vec<Vec<f64>>,
    },
    /// Banded chain over `levels`: each state keeps probability `stay` and
    /// spreads the rest over neighbours within `band` steps with random
    /// weights; upward weights are scaled by `up_bias`, so values below 1
    /// make the top levels rare.
    Random {
        levels: Vec<u32>,
        #[serde(default = "default_band")]
        band: usize,
        #[serde(default = "default_stay")]
        stay: f64,
        #[serde(default = "default_bias")]
        up_bias: f64,
    },
}

impl ChainSpec {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            ChainSpec::Constant { .. } => Ok(()),
            ChainSpec::Explicit { states, rows } => {
                let space = StateSpace::new(states.clone()).map_err(|e| e.to_string())?;
                TransitionMatrix::new(space, rows.clone())
                    .map(|_| ())
                    .map_err(|e| e.to_string())
            }
            ChainSpec::Random {
                levels,
                band,
                stay,
                up_bias,
            } => {
                StateSpace::new(levels.clone()).map_err(|e| e.to_string())?;
                if *band == 0 {
                    return Err("band must be at least 1".into());
                }
                if !(*stay > 0.0 && *stay < 1.0) {
                    return Err(format!("stay {stay} outside (0, 1)"));
                }
                if !(up_bias.is_finite() && *up_bias > 0.0) {
                    return Err(format!("up_bias {up_bias} must be positive"));
                }
                Ok(())
            }
        }
    }

    pub fn to_matrix(&self, seed: u64) -> Result<TransitionMatrix<u32>, MarkovError> {
        match self {
            ChainSpec::Constant { value } => TransitionMatrix::new(StateSpace::new(vec![*value])?, vec![vec![1.0]]),
            ChainSpec::Explicit { states, rows } => {
                TransitionMatrix::new(StateSpace::new(states.clone())?, rows.clone())
            }
            ChainSpec::Random {
                levels,
                band,
                stay,
                up_bias,
            } => random_chain(levels, *band, *stay, *up_bias, seed),
        }
    }
}

/// Random banded birth-death style chain; irreducible and aperiodic.
pub fn random_chain(
    levels: &[u32],
    band: usize,
    stay: f64,
    up_bias: f64,
    seed: u64,
) -> Result<TransitionMatrix<u32>, MarkovError> {
    let space = StateSpace::new(levels.to_vec())?;
    let k = space.len();
    let mut rng = seeded_rng(seed);
    let mut rows = vec![vec![0.0; k]; k];
    for (i, row) in rows.iter_mut().enumerate() {
        if k == 1 {
            row[0] = 1.0;
            break;
        }
        let lo = i.saturating_sub(band);
        let hi = (i + band).min(k - 1);
        let mut total = 0.0;
        for (j, w) in row.iter_mut().enumerate().take(hi + 1).skip(lo) {
            if j == i {
                continue;
            }
            let bias = if j > i { up_bias } else { 1.0 };
            *w = rng.gen_range(0.5..1.5) * bias;
            total += *w;
        }
        for (j, w) in row.iter_mut().enumerate() {
            *w = if j == i { stay } else { *w / total * (1.0 - stay) };
        }
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|w| *w /= sum);
    }
    TransitionMatrix::new(space, rows)
}

/// SplitMix64 finalizer over `(seed, a, b)`; decorrelates per-slice and
/// per-purpose streams derived from one scenario seed.
pub fn splitmix(seed: u64, a: u64, b: u64) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    mix(seed ^ mix(a.wrapping_mul(0x1_0000_0001).wrapping_add(b)))
}

fn trajectory(m: &TransitionMatrix<u32>, length: usize, seed: u64) -> Result<Vec<u32>, MarkovError> {
    let pi = stationary_distribution(m)?;
    let mut rng = seeded_rng(seed);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut start = m.len() - 1;
    for (i, &p) in pi.probs().iter().enumerate() {
        acc += p;
        if u < acc {
            start = i;
            break;
        }
    }
    Ok(TrajectorySampler::new(m)
        .indices(start, length, &mut rng)
        .into_iter()
        .map(|i| *m.space().state(i))
        .collect())
}

/// Trial and regular series of every synthetic slice (`None` for slices
/// read from files). The two phases are consecutive pieces of one
/// stationary trajectory.
#[allow(clippy::type_complexity)]
pub fn synthesize(
    scenario: &Scenario,
    table: &DemandMapTable,
) -> Result<Vec<Option<(Vec<SlotSample>, Vec<SlotSample>)>>, HarnessError> {
    let len = scenario.trial_slots + scenario.regular_slots;
    let mut out = Vec::with_capacity(scenario.slices.len());
    for (i, s) in scenario.slices.iter().enumerate() {
        let SourceSpec::Synthetic { users, mcs } = &s.source else {
            out.push(None);
            continue;
        };
        let idx = i as u64;
        let u_chain = users.to_matrix(splitmix(scenario.seed, idx, 0))?;
        let m_chain = mcs.to_matrix(splitmix(scenario.seed, idx, 2))?;
        let u = trajectory(&u_chain, len, splitmix(scenario.seed, idx, 1))?;
        let m = trajectory(&m_chain, len, splitmix(scenario.seed, idx, 3))?;
        let cfg = scenario.aggregation(i);
        let samples = u
            .iter()
            .zip(&m)
            .map(|(&users, &mcs)| {
                let state = SliceState::new(users, mcs);
                slot_demand(state, &cfg, table)
                    .map(|demand| SlotSample { state, demand })
                    .map_err(|e| HarnessError::config(format!("slices[{i}].source.mcs"), e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let regular = samples[scenario.trial_slots..].to_vec();
        let mut trial = samples;
        trial.truncate(scenario.trial_slots);
        out.push(Some((trial, regular)));
    }
    Ok(out)
}
