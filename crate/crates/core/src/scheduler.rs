//! Per-slot admission: deficit bookkeeping, the max-weight knapsack over
//! slices that passed their test, residual grants and the second round
//! for slices that failed it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::Hypothesis;
use crate::trial::ProvisionPlan;

#[derive(Debug, Error, PartialEq)]
pub enum SchedulerError {
    #[error("leftover {w_r} is not below the smallest unmet demand {min_demand}")]
    PreconditionViolated { w_r: u32, min_demand: u32 },
    #[error("slot allocation {used} exceeds capacity {capacity}")]
    CapacityExceeded { used: u64, capacity: u64 },
    #[error("expected {expected} slices, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("unknown scheme `{0}` (expected NoSh, Sh or ShT<n>)")]
    UnknownScheme(String),
}

/// Relative tolerance for deciding that two knapsack values tie.
pub const VALUE_TIE_TOLERANCE: f64 = 1e-9;

/// Virtual queues `d_i` of unmet SLA obligation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeficitVector(Vec<f64>);

impl DeficitVector {
    pub fn new(p_h: &[f64]) -> Self {
        Self(p_h.to_vec())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn update(&mut self, accepted: &[bool], p_h: &[f64]) {
        self.0 = update_deficits(&self.0, accepted, p_h);
    }
}

/// `d_i ← max(d_i − u_i, 0) + P^H_i`.
pub fn update_deficits(d: &[f64], accepted: &[bool], p_h: &[f64]) -> Vec<f64> {
    d.iter()
        .zip(accepted)
        .zip(p_h)
        .map(|((&di, &u), &p)| (di - if u { 1.0 } else { 0.0 }).max(0.0) + p)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    value: f64,
    demand: u64,
}

fn ties(a: f64, b: f64) -> bool {
    (a - b).abs() <= VALUE_TIE_TOLERANCE * a.abs().max(b.abs()) + f64::MIN_POSITIVE
}

/// `a` strictly preferred to `b`: more value, or tied value and more demand.
fn better(a: Entry, b: Entry) -> bool {
    if ties(a.value, b.value) {
        a.demand > b.demand
    } else {
        a.value > b.value
    }
}

/// Exact 0/1 knapsack by dynamic programming over integer capacity.
///
/// Maximizes `Σ u_i weights_i` under `Σ u_i demands_i ≤ capacity`. Among
/// co-optimal sets the one with larger total demand wins, then the one
/// accepting the earliest indices (the lexicographically smallest index
/// set; items that neither cost nor weigh anything are always accepted).
pub fn knapsack(weights: &[f64], demands: &[u32], capacity: u32) -> Vec<bool> {
    let m = weights.len();
    assert_eq!(m, demands.len(), "weights and demands differ in length");
    let cap = capacity as usize;
    let total: u64 = demands.iter().map(|&w| u64::from(w)).sum();
    if total <= u64::from(capacity) {
        return vec![true; m];
    }
    // best[i][c]: optimum over items i.. with capacity c
    let zero = Entry { value: 0.0, demand: 0 };
    let mut best = vec![vec![zero; cap + 1]; m + 1];
    for i in (0..m).rev() {
        let w = demands[i] as usize;
        for c in 0..=cap {
            let skip = best[i + 1][c];
            best[i][c] = if w <= c {
                let rest = best[i + 1][c - w];
                let take = Entry {
                    value: rest.value + weights[i],
                    demand: rest.demand + w as u64,
                };
                if better(skip, take) {
                    skip
                } else {
                    take
                }
            } else {
                skip
            };
        }
    }
    let mut chosen = vec![false; m];
    let mut c = cap;
    for i in 0..m {
        let w = demands[i] as usize;
        if w > c {
            continue;
        }
        let rest = best[i + 1][c - w];
        let take = Entry {
            value: rest.value + weights[i],
            demand: rest.demand + w as u64,
        };
        if !better(best[i + 1][c], take) {
            chosen[i] = true;
            c -= w;
        }
    }
    chosen
}

/// How leftover bandwidth may be split among unmet slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GrantSpace {
    /// Any amount; the whole leftover goes to the smallest demand.
    #[default]
    Continuous,
    /// Grants are multiples of `step`, filled in ascending-demand order.
    Quantized { step: u32 },
}

/// Splits `w_r` among slices whose demand was not met. Grants are indexed
/// like `demands`. Ties in demand go to the lower index.
pub fn residual_allocate(demands: &[u32], w_r: u32, space: GrantSpace) -> Result<Vec<u32>, SchedulerError> {
    let mut grants = vec![0; demands.len()];
    let mut order: Vec<usize> = (0..demands.len()).collect();
    order.sort_by_key(|&i| (demands[i], i));
    let Some(&first) = order.first() else {
        return Ok(grants);
    };
    if w_r >= demands[first] && w_r > 0 {
        return Err(SchedulerError::PreconditionViolated {
            w_r,
            min_demand: demands[first],
        });
    }
    match space {
        GrantSpace::Continuous => grants[first] = w_r,
        GrantSpace::Quantized { step } => {
            let step = step.max(1);
            let mut left = w_r;
            for &i in &order {
                let g = (left.min(demands[i]) / step) * step;
                grants[i] = g;
                left -= g;
                if left < step {
                    break;
                }
            }
        }
    }
    Ok(grants)
}

/// Sharing policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    /// Each slice keeps its own percentile; leftovers are shared.
    NoSh,
    /// Shared capacity, no testing.
    Sh,
    /// Shared capacity with window-`n` hypothesis tests.
    ShT(usize),
}

impl Scheme {
    pub fn window(self) -> Option<usize> {
        match self {
            Scheme::ShT(n) => Some(n),
            _ => None,
        }
    }

    pub fn capacity(self, plan: &ProvisionPlan) -> u32 {
        match self {
            Scheme::NoSh => plan.no_sharing_capacity(),
            Scheme::Sh | Scheme::ShT(_) => plan.w_c,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::NoSh => f.write_str("NoSh"),
            Scheme::Sh => f.write_str("Sh"),
            Scheme::ShT(n) => write!(f, "ShT{n}"),
        }
    }
}

impl FromStr for Scheme {
    type Err = SchedulerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "NoSh" => Ok(Scheme::NoSh),
            "Sh" => Ok(Scheme::Sh),
            _ => s
                .strip_prefix("ShT")
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n >= 2)
                .map(Scheme::ShT)
                .ok_or_else(|| SchedulerError::UnknownScheme(s.to_string())),
        }
    }
}

impl Serialize for Scheme {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Scheme {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything decided for one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationOutcome {
    pub accepted: Vec<bool>,
    pub in_a: Vec<bool>,
    pub in_b: Vec<bool>,
    pub in_a_r: Vec<bool>,
    pub residual_grants: Vec<u32>,
    /// Bandwidth left after the first-round knapsack.
    pub w_r: u32,
    pub capacity: u32,
    pub contention: bool,
    pub tested: Vec<bool>,
    pub rejected: Vec<bool>,
}

impl AllocationOutcome {
    pub fn used(&self, demands: &[u32]) -> u64 {
        let full: u64 = demands
            .iter()
            .zip(&self.accepted)
            .filter(|(_, &a)| a)
            .map(|(&w, _)| u64::from(w))
            .sum();
        full + self.residual_grants.iter().map(|&g| u64::from(g)).sum::<u64>()
    }
}

fn subset(idx: &[usize], values: &[u32]) -> Vec<u32> {
    idx.iter().map(|&i| values[i]).collect()
}

/// One round: knapsack `members` under `capacity`, then hand the leftover
/// to the unmet members. Returns the leftover and the unmet members.
fn round(
    members: &[usize],
    demands: &[u32],
    deficits: &[f64],
    capacity: u32,
    space: GrantSpace,
    out: &mut AllocationOutcome,
) -> Result<(u32, Vec<usize>), SchedulerError> {
    let w: Vec<u32> = subset(members, demands);
    let d: Vec<f64> = members.iter().map(|&i| deficits[i]).collect();
    // zero demands cost nothing and are always served
    let positive: Vec<usize> = (0..members.len()).filter(|&k| w[k] > 0).collect();
    let pw: Vec<u32> = positive.iter().map(|&k| w[k]).collect();
    let pd: Vec<f64> = positive.iter().map(|&k| d[k]).collect();
    let picks = knapsack(&pd, &pw, capacity);
    let mut take = vec![true; members.len()];
    for (&k, &p) in positive.iter().zip(&picks) {
        take[k] = p;
    }
    let mut used = 0u32;
    let mut unmet = Vec::new();
    for (k, &i) in members.iter().enumerate() {
        if take[k] {
            out.accepted[i] = true;
            used += demands[i];
        } else {
            unmet.push(i);
        }
    }
    let w_r = capacity.checked_sub(used).ok_or(SchedulerError::CapacityExceeded {
        used: u64::from(used),
        capacity: u64::from(capacity),
    })?;
    let grants = residual_allocate(&subset(&unmet, demands), w_r, space)?;
    for (&i, g) in unmet.iter().zip(grants) {
        out.residual_grants[i] = g;
    }
    Ok((w_r, unmet))
}

/// Runs one slot of the regular phase. `test` is called only on
/// contention slots under a testing scheme, once per slice.
pub fn allocate_slot<F>(
    demands: &[u32],
    deficits: &DeficitVector,
    plan: &ProvisionPlan,
    scheme: Scheme,
    space: GrantSpace,
    mut test: F,
) -> Result<AllocationOutcome, SchedulerError>
where
    F: FnMut(usize) -> Hypothesis,
{
    let n = demands.len();
    for len in [deficits.values().len(), plan.w_h.len()] {
        if len != n {
            return Err(SchedulerError::DimensionMismatch {
                expected: n,
                found: len,
            });
        }
    }
    let capacity = scheme.capacity(plan);
    let total: u64 = demands.iter().map(|&w| u64::from(w)).sum();
    let mut out = AllocationOutcome {
        accepted: vec![false; n],
        in_a: vec![false; n],
        in_b: vec![false; n],
        in_a_r: vec![false; n],
        residual_grants: vec![0; n],
        w_r: 0,
        capacity,
        contention: total > u64::from(capacity),
        tested: vec![false; n],
        rejected: vec![false; n],
    };
    if !out.contention {
        out.accepted = vec![true; n];
        out.in_a = vec![true; n];
        out.w_r = capacity - total as u32;
        return Ok(out);
    }
    for (i, (&w, &w_h)) in demands.iter().zip(&plan.w_h).enumerate() {
        out.in_a[i] = match scheme {
            Scheme::Sh => true,
            Scheme::NoSh => w <= w_h,
            Scheme::ShT(_) => {
                out.tested[i] = true;
                let h = test(i);
                out.rejected[i] = h.is_anomalous();
                !out.rejected[i]
            }
        };
        out.in_b[i] = !out.in_a[i];
    }
    let set_a: Vec<usize> = (0..n).filter(|&i| out.in_a[i]).collect();
    let set_b: Vec<usize> = (0..n).filter(|&i| out.in_b[i]).collect();
    let (w_r, unmet_a) = round(&set_a, demands, deficits.values(), capacity, space, &mut out)?;
    out.w_r = w_r;
    for &i in &unmet_a {
        out.in_a_r[i] = true;
    }
    if unmet_a.is_empty() && !set_b.is_empty() {
        round(&set_b, demands, deficits.values(), w_r, space, &mut out)?;
    }
    let used = out.used(demands);
    if used > u64::from(capacity) {
        return Err(SchedulerError::CapacityExceeded {
            used,
            capacity: u64::from(capacity),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(w_c: u32, w_h: Vec<u32>) -> ProvisionPlan {
        let p_h = vec![0.9; w_h.len()];
        ProvisionPlan {
            w_c,
            w_h,
            p_h,
            transform: true,
        }
    }

    #[test]
    fn deficit_examples() {
        assert_eq!(update_deficits(&[0.9], &[true], &[0.9]), vec![0.9]);
        assert_eq!(update_deficits(&[0.9], &[false], &[0.9]), vec![1.8]);
        assert_eq!(update_deficits(&[0.3], &[true], &[0.9]), vec![0.9]);
        let mut d = DeficitVector::new(&[0.9, 0.8]);
        assert_eq!(d.values(), &[0.9, 0.8]);
        d.update(&[false, true], &[0.9, 0.8]);
        assert_eq!(d.values(), &[1.8, 0.8]);
    }

    #[test]
    fn knapsack_examples() {
        assert_eq!(knapsack(&[3.0, 2.0, 1.0], &[5, 5, 5], 10), vec![true, true, false]);
        assert_eq!(knapsack(&[0.1, 0.5], &[3, 4], 7), vec![true, true]);
        assert_eq!(knapsack(&[1.0, 1.0], &[4, 4], 4), vec![true, false]);
        assert!(knapsack(&[], &[], 5).is_empty());
    }

    #[test]
    fn knapsack_prefers_larger_demand_on_value_tie() {
        // {0} and {1} tie on value; {1} uses more bandwidth
        assert_eq!(knapsack(&[1.0, 1.0], &[2, 3], 4), vec![false, true]);
    }

    #[test]
    fn residual_examples() {
        assert_eq!(
            residual_allocate(&[4, 6], 3, GrantSpace::Continuous).unwrap(),
            vec![3, 0]
        );
        assert_eq!(
            residual_allocate(&[4, 6], 0, GrantSpace::Continuous).unwrap(),
            vec![0, 0]
        );
        assert_eq!(
            residual_allocate(&[4, 4], 3, GrantSpace::Continuous).unwrap(),
            vec![3, 0]
        );
        assert_eq!(
            residual_allocate(&[6, 4], 3, GrantSpace::Continuous).unwrap(),
            vec![0, 3]
        );
        assert_eq!(
            residual_allocate(&[4, 6], 5, GrantSpace::Continuous),
            Err(SchedulerError::PreconditionViolated { w_r: 5, min_demand: 4 })
        );
        assert_eq!(
            residual_allocate(&[5, 6], 4, GrantSpace::Quantized { step: 3 }).unwrap(),
            vec![3, 0]
        );
    }

    #[test]
    fn scheme_names() {
        for s in ["NoSh", "Sh", "ShT100"] {
            assert_eq!(s.parse::<Scheme>().unwrap().to_string(), s);
        }
        assert!("ShTx".parse::<Scheme>().is_err());
        assert!("Shared".parse::<Scheme>().is_err());
        assert_eq!(Scheme::NoSh.capacity(&plan(9, vec![4, 7])), 11);
    }

    #[test]
    fn fast_path_ignores_detector() {
        let out = allocate_slot(
            &[3, 4],
            &DeficitVector::new(&[0.9, 0.9]),
            &plan(10, vec![5, 5]),
            Scheme::ShT(10),
            GrantSpace::Continuous,
            |_| Hypothesis::Anomalous,
        )
        .unwrap();
        assert_eq!(out.accepted, vec![true, true]);
        assert!(!out.contention);
        assert_eq!(out.tested, vec![false, false]);
    }

    #[test]
    fn second_round_for_flagged_slice() {
        let out = allocate_slot(
            &[6, 5],
            &DeficitVector::new(&[0.9, 0.9]),
            &plan(10, vec![6, 5]),
            Scheme::ShT(10),
            GrantSpace::Continuous,
            |i| {
                if i == 0 {
                    Hypothesis::Anomalous
                } else {
                    Hypothesis::Normal
                }
            },
        )
        .unwrap();
        assert_eq!(out.accepted, vec![false, true]);
        assert_eq!(out.in_a, vec![false, true]);
        assert_eq!(out.in_b, vec![true, false]);
        assert_eq!(out.w_r, 5);
        assert_eq!(out.residual_grants, vec![5, 0]);
        assert_eq!(out.rejected, vec![true, false]);
    }

    #[test]
    fn sh_puts_everyone_in_a() {
        let out = allocate_slot(
            &[6, 5],
            &DeficitVector::new(&[1.8, 0.9]),
            &plan(10, vec![6, 5]),
            Scheme::Sh,
            GrantSpace::Continuous,
            |_| unreachable!(),
        )
        .unwrap();
        assert_eq!(out.in_a, vec![true, true]);
        assert_eq!(out.accepted, vec![true, false]);
        assert_eq!(out.in_a_r, vec![false, true]);
        assert_eq!(out.residual_grants, vec![0, 4]);
    }

    #[test]
    fn nosh_partitions_by_percentile() {
        let out = allocate_slot(
            &[9, 4],
            &DeficitVector::new(&[5.0, 0.9]),
            &plan(10, vec![6, 5]),
            Scheme::NoSh,
            GrantSpace::Continuous,
            |_| unreachable!(),
        )
        .unwrap();
        assert_eq!(out.capacity, 11);
        assert_eq!(out.in_a, vec![false, true]);
        assert_eq!(out.accepted, vec![false, true]);
        assert_eq!(out.residual_grants, vec![7, 0]);
    }

    #[test]
    fn zero_demand_is_served() {
        let out = allocate_slot(
            &[0, 12, 3],
            &DeficitVector::new(&[0.9, 0.9, 0.9]),
            &plan(10, vec![1, 9, 3]),
            Scheme::Sh,
            GrantSpace::Continuous,
            |_| Hypothesis::Normal,
        )
        .unwrap();
        assert_eq!(out.accepted, vec![true, false, true]);
        assert_eq!(out.residual_grants, vec![0, 7, 0]);
    }
}
