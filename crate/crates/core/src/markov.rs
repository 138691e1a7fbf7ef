//! Finite Markov chains: state spaces, row-stochastic matrices, stationary
//! analysis, seeded trajectory sampling and the trial-length bounds used to
//! size the trial phase.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Row sums must land within this distance of 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// Second eigenvalue moduli this close to 1 are treated as unit modulus.
pub const UNIT_MODULUS_TOLERANCE: f64 = 1e-8;

/// Above this many states the stationary solve switches to power iteration.
pub const DIRECT_SOLVE_LIMIT: usize = 2000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarkovError {
    #[error("state space must contain at least one state")]
    EmptySpace,
    #[error("duplicate state label at position {0}")]
    DuplicateState(usize),
    #[error("expected a {expected}x{expected} matrix, row {row} has {found} entries")]
    DimensionMismatch { expected: usize, row: usize, found: usize },
    #[error("row {row} sums to {sum}, not 1")]
    NotStochastic { row: usize, sum: f64 },
    #[error("entry ({row}, {col}) = {value} is not a probability")]
    InvalidProbability { row: usize, col: usize, value: f64 },
    #[error("chain is reducible: {closed_classes} closed classes")]
    Reducible { closed_classes: usize },
    #[error("chain is periodic: second eigenvalue has unit modulus")]
    Periodic,
    #[error("state is not part of the chain's state space")]
    UnknownState,
    #[error("trajectory length must be at least 1")]
    ZeroLength,
    #[error("invalid sample-size parameters: {0}")]
    InvalidParams(String),
}

/// Ordered, duplicate-free list of state labels with a dense index.
#[derive(Clone, PartialEq, Eq)]
pub struct StateSpace<S> {
    states: Vec<S>,
    index: BTreeMap<S, usize>,
}

impl<S: Clone + Ord> StateSpace<S> {
    pub fn new(states: Vec<S>) -> Result<Self, MarkovError> {
        if states.is_empty() {
            return Err(MarkovError::EmptySpace);
        }
        let mut index = BTreeMap::new();
        for (i, s) in states.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(MarkovError::DuplicateState(i));
            }
        }
        Ok(Self { states, index })
    }

    /// Space over the distinct labels of `labels`, in sorted order.
    pub fn from_observed<'a, I>(labels: I) -> Result<Self, MarkovError>
    where
        I: IntoIterator<Item = &'a S>,
        S: 'a,
    {
        let mut sorted: Vec<S> = labels.into_iter().cloned().collect();
        sorted.sort();
        sorted.dedup();
        Self::new(sorted)
    }

    pub fn index_of(&self, state: &S) -> Option<usize> {
        self.index.get(state).copied()
    }

    pub fn contains(&self, state: &S) -> bool {
        self.index.contains_key(state)
    }

    pub fn state(&self, index: usize) -> &S {
        &self.states[index]
    }

    pub fn states(&self) -> &[S] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

impl<S: fmt::Debug> fmt::Debug for StateSpace<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(&self.states).finish()
    }
}

/// Row-stochastic matrix over a [`StateSpace`].
///
/// Serialises as `{"states": [...], "rows": [[...]]}`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "MatrixDoc<S>",
    into = "MatrixDoc<S>",
    bound(
        serialize = "S: Clone + Ord + Serialize",
        deserialize = "S: Clone + Ord + Deserialize<'de>"
    )
)]
pub struct TransitionMatrix<S: Clone + Ord> {
    space: StateSpace<S>,
    rows: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct MatrixDoc<S> {
    states: Vec<S>,
    rows: Vec<Vec<f64>>,
}

impl<S: Clone + Ord> TryFrom<MatrixDoc<S>> for TransitionMatrix<S> {
    type Error = MarkovError;

    fn try_from(doc: MatrixDoc<S>) -> Result<Self, Self::Error> {
        TransitionMatrix::new(StateSpace::new(doc.states)?, doc.rows)
    }
}

impl<S: Clone + Ord> From<TransitionMatrix<S>> for MatrixDoc<S> {
    fn from(m: TransitionMatrix<S>) -> Self {
        MatrixDoc {
            states: m.space.states,
            rows: m.rows,
        }
    }
}

impl<S: fmt::Debug + Clone + Ord> fmt::Debug for TransitionMatrix<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TransitionMatrix")
            .field("states", &self.space)
            .field("rows", &self.rows)
            .finish()
    }
}

impl<S: Clone + Ord> TransitionMatrix<S> {
    pub fn new(space: StateSpace<S>, rows: Vec<Vec<f64>>) -> Result<Self, MarkovError> {
        let n = space.len();
        if rows.len() != n {
            return Err(MarkovError::DimensionMismatch {
                expected: n,
                row: rows.len(),
                found: rows.len(),
            });
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(MarkovError::DimensionMismatch {
                    expected: n,
                    row: i,
                    found: row.len(),
                });
            }
            for (j, &p) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&p) {
                    return Err(MarkovError::InvalidProbability {
                        row: i,
                        col: j,
                        value: p,
                    });
                }
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(MarkovError::NotStochastic { row: i, sum });
            }
        }
        Ok(Self { space, rows })
    }

    pub fn space(&self) -> &StateSpace<S> {
        &self.space
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.rows[from][to]
    }

    /// Transition probability between labelled states, `None` if either
    /// label is outside the space.
    pub fn prob_of(&self, from: &S, to: &S) -> Option<f64> {
        let i = self.space.index_of(from)?;
        let j = self.space.index_of(to)?;
        Some(self.rows[i][j])
    }

    /// Strongly connected components of the positive-entry graph, each
    /// tagged with whether it is closed (no edge leaves it).
    pub fn communicating_classes(&self) -> Vec<(Vec<usize>, bool)> {
        let comps = strongly_connected(&self.rows);
        let mut comp_of = vec![0usize; self.len()];
        for (c, members) in comps.iter().enumerate() {
            for &v in members {
                comp_of[v] = c;
            }
        }
        comps
            .into_iter()
            .enumerate()
            .map(|(c, members)| {
                let closed = members.iter().all(|&i| {
                    self.rows[i]
                        .iter()
                        .enumerate()
                        .all(|(j, &p)| p <= 0.0 || comp_of[j] == c)
                });
                (members, closed)
            })
            .collect()
    }

    pub fn closed_class_count(&self) -> usize {
        self.communicating_classes()
            .iter()
            .filter(|(_, closed)| *closed)
            .count()
    }

    pub fn is_irreducible(&self) -> bool {
        strongly_connected(&self.rows).len() == 1
    }

    fn cumulative_rows(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|row| {
                let mut acc = 0.0;
                row.iter()
                    .map(|&p| {
                        acc += p;
                        acc
                    })
                    .collect()
            })
            .collect()
    }
}

/// Kosaraju's algorithm, iterative, over edges with positive weight.
fn strongly_connected(rows: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let n = rows.len();
    let succ: Vec<Vec<usize>> = rows.iter().map(|r| (0..n).filter(|&j| r[j] > 0.0).collect()).collect();
    let mut pred = vec![Vec::new(); n];
    for (i, s) in succ.iter().enumerate() {
        for &j in s {
            pred[j].push(i);
        }
    }

    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for root in 0..n {
        if visited[root] {
            continue;
        }
        visited[root] = true;
        let mut stack = vec![(root, 0usize)];
        while let Some((v, next)) = stack.last_mut() {
            if let Some(&w) = succ[*v].get(*next) {
                *next += 1;
                if !visited[w] {
                    visited[w] = true;
                    stack.push((w, 0));
                }
            } else {
                order.push(*v);
                stack.pop();
            }
        }
    }

    let mut assigned = vec![false; n];
    let mut comps = Vec::new();
    for &root in order.iter().rev() {
        if assigned[root] {
            continue;
        }
        assigned[root] = true;
        let mut members = vec![root];
        let mut stack = vec![root];
        while let Some(v) = stack.pop() {
            for &w in &pred[v] {
                if !assigned[w] {
                    assigned[w] = true;
                    members.push(w);
                    stack.push(w);
                }
            }
        }
        members.sort_unstable();
        comps.push(members);
    }
    comps
}

#[derive(Clone, PartialEq)]
pub struct StationaryDistribution<S: Clone + Ord> {
    space: StateSpace<S>,
    probs: Vec<f64>,
}

impl<S: Clone + Ord> StationaryDistribution<S> {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn space(&self) -> &StateSpace<S> {
        &self.space
    }

    pub fn prob_of(&self, state: &S) -> Option<f64> {
        self.space.index_of(state).map(|i| self.probs[i])
    }

    /// `‖πM − π‖∞` against `m`.
    pub fn fixed_point_residual(&self, m: &TransitionMatrix<S>) -> f64 {
        let n = self.probs.len();
        (0..n)
            .map(|j| {
                let flow: f64 = (0..n).map(|i| self.probs[i] * m.prob(i, j)).sum();
                (flow - self.probs[j]).abs()
            })
            .fold(0.0, f64::max)
    }
}

impl<S: fmt::Debug + Clone + Ord> fmt::Debug for StationaryDistribution<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StationaryDistribution")
            .field("states", &self.space)
            .field("probs", &self.probs)
            .finish()
    }
}

/// Unique stationary distribution of a chain with a single closed class.
///
/// Solves `(Mᵀ − I)π = 0` with the last equation replaced by `Σπ = 1`.
/// Chains with more than [`DIRECT_SOLVE_LIMIT`] states use power iteration
/// on the lazy chain `(M + I)/2`.
pub fn stationary_distribution<S: Clone + Ord>(
    m: &TransitionMatrix<S>,
) -> Result<StationaryDistribution<S>, MarkovError> {
    let closed = m.closed_class_count();
    if closed != 1 {
        return Err(MarkovError::Reducible { closed_classes: closed });
    }
    let n = m.len();
    let mut probs = if n > DIRECT_SOLVE_LIMIT {
        power_iteration(m)
    } else {
        let mut a = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                a[(j, i)] = m.prob(i, j);
            }
            a[(i, i)] -= 1.0;
        }
        for j in 0..n {
            a[(n - 1, j)] = 1.0;
        }
        let mut b = nalgebra::DVector::<f64>::zeros(n);
        b[n - 1] = 1.0;
        match a.lu().solve(&b) {
            Some(x) => x.iter().copied().collect(),
            None => power_iteration(m),
        }
    };
    for p in probs.iter_mut() {
        if *p < 0.0 {
            *p = 0.0;
        }
    }
    let total: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= total;
    }
    Ok(StationaryDistribution {
        space: m.space.clone(),
        probs,
    })
}

fn power_iteration<S: Clone + Ord>(m: &TransitionMatrix<S>) -> Vec<f64> {
    let n = m.len();
    let mut pi = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    for _ in 0..1_000_000 {
        next.iter_mut().for_each(|x| *x = 0.0);
        for (i, &mass) in pi.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for (j, &p) in m.row(i).iter().enumerate() {
                next[j] += 0.5 * mass * p;
            }
            next[i] += 0.5 * mass;
        }
        let delta = pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        std::mem::swap(&mut pi, &mut next);
        if delta < 1e-15 {
            break;
        }
    }
    pi
}

/// Seeded generator used for every stochastic output in the crate.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draws trajectories by inverse-CDF lookup on cached cumulative rows.
#[derive(Debug, Clone)]
pub struct TrajectorySampler {
    cumulative: Vec<Vec<f64>>,
}

impl TrajectorySampler {
    pub fn new<S: Clone + Ord>(m: &TransitionMatrix<S>) -> Self {
        Self {
            cumulative: m.cumulative_rows(),
        }
    }

    pub fn step<R: Rng + ?Sized>(&self, from: usize, rng: &mut R) -> usize {
        let row = &self.cumulative[from];
        let u: f64 = rng.gen();
        // first column whose cumulative mass exceeds u; it has positive width
        let k = row.partition_point(|&c| c <= u);
        if k < row.len() {
            return k;
        }
        // rounding left the final cumulative value below u
        let mut last = row.len() - 1;
        while last > 0 && row[last] == row[last - 1] {
            last -= 1;
        }
        last
    }

    pub fn indices<R: Rng + ?Sized>(&self, start: usize, length: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(length);
        if length == 0 {
            return out;
        }
        let mut cur = start;
        out.push(cur);
        for _ in 1..length {
            cur = self.step(cur, rng);
            out.push(cur);
        }
        out
    }
}

/// `length` states starting at `start`, reproducible for a fixed seed.
pub fn sample_trajectory<S: Clone + Ord>(
    m: &TransitionMatrix<S>,
    start: &S,
    length: usize,
    seed: u64,
) -> Result<Vec<S>, MarkovError> {
    let start = m.space.index_of(start).ok_or(MarkovError::UnknownState)?;
    if length == 0 {
        return Err(MarkovError::ZeroLength);
    }
    let mut rng = seeded_rng(seed);
    Ok(TrajectorySampler::new(m)
        .indices(start, length, &mut rng)
        .into_iter()
        .map(|i| m.space.state(i).clone())
        .collect())
}

/// Second-largest eigenvalue modulus.
///
/// Full eigen-decomposition; meant as a diagnostic for chains of up to a
/// few hundred states.
pub fn spectral_gap_lambda<S: Clone + Ord>(m: &TransitionMatrix<S>) -> Result<f64, MarkovError> {
    let n = m.len();
    if n == 1 {
        return Ok(0.0);
    }
    let mat = DMatrix::from_fn(n, n, |i, j| m.prob(i, j));
    let mut moduli: Vec<f64> = mat.complex_eigenvalues().iter().map(|z| z.norm()).collect();
    moduli.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let lambda = moduli[1];
    if lambda >= 1.0 - UNIT_MODULUS_TOLERANCE {
        let closed = m.closed_class_count();
        return Err(if closed > 1 || !m.is_irreducible() {
            MarkovError::Reducible { closed_classes: closed }
        } else {
            MarkovError::Periodic
        });
    }
    Ok(lambda.min(1.0))
}

/// How fast the chain mixes, as needed by the trial-length bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingScale {
    /// Worst-case expected hitting time, in slots.
    HittingTime(f64),
    /// Second eigenvalue modulus, in `[0, 1)`.
    SecondEigenvalue(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSizeParams {
    pub epsilon: f64,
    pub delta: f64,
    pub mixing: MixingScale,
}

impl SampleSizeParams {
    fn base(&self) -> Result<f64, MarkovError> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(MarkovError::InvalidParams(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(MarkovError::InvalidParams(format!(
                "delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        Ok((2.0 / self.delta).ln() / (2.0 * self.epsilon * self.epsilon))
    }
}

/// `⌈H² ln(2/δ) / (2ε²)⌉` slots.
pub fn trial_length_hitting(p: &SampleSizeParams) -> Result<u64, MarkovError> {
    let base = p.base()?;
    match p.mixing {
        MixingScale::HittingTime(h) if h.is_finite() && h >= 1.0 => Ok((h * h * base).ceil() as u64),
        MixingScale::HittingTime(h) => Err(MarkovError::InvalidParams(format!(
            "hitting-time scale must be at least 1, got {h}"
        ))),
        MixingScale::SecondEigenvalue(_) => Err(MarkovError::InvalidParams("hitting-time scale not set".into())),
    }
}

/// `⌈(1+λ)/(1−λ) · ln(2/δ) / (2ε²)⌉` slots.
pub fn trial_length_spectral(p: &SampleSizeParams) -> Result<u64, MarkovError> {
    let base = p.base()?;
    match p.mixing {
        MixingScale::SecondEigenvalue(l) if (0.0..1.0).contains(&l) => Ok(((1.0 + l) / (1.0 - l) * base).ceil() as u64),
        MixingScale::SecondEigenvalue(l) => Err(MarkovError::InvalidParams(format!(
            "lambda must lie in [0, 1), got {l}"
        ))),
        MixingScale::HittingTime(_) => Err(MarkovError::InvalidParams("second eigenvalue not set".into())),
    }
}
