//! Regular-phase runs, metrics and the case grid.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use super::{splitmix, HarnessError, Prepared, Scenario};
use crate::anomaly::{choose_anomaly_window, remove_low_states, splice, splice_users, AnomalyChain, Removal};
use crate::detector::{DetectorConfig, SliceDetector};
use crate::scheduler::{allocate_slot, DeficitVector, Scheme};
use crate::trace::{SliceState, SlotSample};
use crate::trial::ChainState;

/// One cell of the experiment grid: the baseline or one anomaly strength.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub label: String,
    pub removal: Option<Removal>,
}

impl Case {
    pub fn baseline() -> Self {
        Self {
            label: "baseline".into(),
            removal: None,
        }
    }

    pub fn with_removal(removal: Removal) -> Self {
        let label = match removal {
            Removal::Fraction(b) => format!("beta={b}"),
            Removal::Count(k) => format!("k={k}"),
        };
        Self {
            label,
            removal: Some(removal),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotLog {
    pub slot: usize,
    pub slice: usize,
    pub demand: u32,
    pub accepted: bool,
    pub in_a: bool,
    pub in_b: bool,
    pub in_a_r: bool,
    pub residual_grant: u32,
    /// Deficit after this slot's update.
    pub deficit: f64,
    pub tested: bool,
    pub rejected: bool,
    pub anomalous: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub a: Vec<f64>,
    pub rc: Vec<Option<f64>>,
    pub rw: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct SchemeRun {
    pub scheme: Scheme,
    pub prbs: u32,
    pub metrics: Metrics,
    pub logs: Vec<SlotLog>,
    pub contention_slots: usize,
    pub micros_per_slot: f64,
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub case: Case,
    /// Slice carrying the anomaly, when one was injected.
    pub anomalous_slice: Option<usize>,
    pub window: Option<(usize, usize)>,
    pub runs: Vec<SchemeRun>,
}

/// Fraction of slots in which each slice's demand was met in full.
pub fn acceptance_ratios(logs: &[SlotLog], slices: usize) -> Vec<f64> {
    let mut hits = vec![0usize; slices];
    let mut slots = vec![0usize; slices];
    for l in logs {
        slots[l.slice] += 1;
        hits[l.slice] += usize::from(l.accepted);
    }
    hits.iter()
        .zip(&slots)
        .map(|(&h, &s)| if s == 0 { 0.0 } else { h as f64 / s as f64 })
        .collect()
}

/// Correct and wrong rejection ratios per slice; `None` when the slice was
/// never tested in the corresponding condition.
pub fn rejection_ratios(logs: &[SlotLog], slices: usize) -> (Vec<Option<f64>>, Vec<Option<f64>>) {
    // [anomalous?][rejected?]
    let mut tally = vec![[[0usize; 2]; 2]; slices];
    for l in logs.iter().filter(|l| l.tested) {
        tally[l.slice][usize::from(l.anomalous)][usize::from(l.rejected)] += 1;
    }
    let ratio = |c: [usize; 2]| {
        let total = c[0] + c[1];
        (total > 0).then(|| c[1] as f64 / total as f64)
    };
    tally.iter().map(|t| (ratio(t[1]), ratio(t[0]))).unzip()
}

/// Runs the regular phase under one scheme.
pub fn run_scheme(
    prep: &Prepared,
    scenario: &Scenario,
    regular: &[Vec<SlotSample>],
    flags: &[Vec<bool>],
    scheme: Scheme,
) -> Result<SchemeRun, HarnessError> {
    let slices = regular.len();
    let plan = &prep.outcome.plan;
    let models = &prep.outcome.models;
    let mut detectors: Vec<SliceDetector<ChainState>> = match scheme.window() {
        Some(n) => models
            .iter()
            .map(|m| {
                let cfg = DetectorConfig::for_model(m, n, scenario.detector.corrected_threshold)
                    .map_err(|e| HarnessError::config("schemes", e.to_string()))?;
                Ok(SliceDetector::new(&cfg, m.chain.clone()))
            })
            .collect::<Result<_, HarnessError>>()?,
        None => Vec::new(),
    };
    let len = regular[0].len();
    let mut deficits = DeficitVector::new(&plan.p_h);
    let mut logs = Vec::with_capacity(len * slices);
    let mut contention_slots = 0;
    let start = Instant::now();
    for t in 0..len {
        let demands: Vec<u32> = regular.iter().map(|s| s[t].demand).collect();
        for (i, d) in detectors.iter_mut().enumerate() {
            d.observe(models[i].chain_kind.label(&regular[i][t]));
        }
        let out = allocate_slot(&demands, &deficits, plan, scheme, scenario.grant_space, |i| {
            detectors[i].decide()
        })?;
        contention_slots += usize::from(out.contention);
        deficits.update(&out.accepted, &plan.p_h);
        for i in 0..slices {
            logs.push(SlotLog {
                slot: t,
                slice: i,
                demand: demands[i],
                accepted: out.accepted[i],
                in_a: out.in_a[i],
                in_b: out.in_b[i],
                in_a_r: out.in_a_r[i],
                residual_grant: out.residual_grants[i],
                deficit: deficits.values()[i],
                tested: out.tested[i],
                rejected: out.rejected[i],
                anomalous: flags[i][t],
            });
        }
    }
    let micros_per_slot = start.elapsed().as_secs_f64() * 1e6 / len as f64;
    let (rc, rw) = rejection_ratios(&logs, slices);
    Ok(SchemeRun {
        scheme,
        prbs: scheme.capacity(plan),
        metrics: Metrics {
            a: acceptance_ratios(&logs, slices),
            rc,
            rw,
        },
        logs,
        contention_slots,
        micros_per_slot,
    })
}

type Injected = (Vec<Vec<SlotSample>>, Vec<Vec<bool>>, Option<(usize, usize)>);

/// Regular series with the case's anomaly spliced in, plus ground truth.
fn inject(prep: &Prepared, scenario: &Scenario, case: &Case) -> Result<Injected, HarnessError> {
    let slices = prep.regular.len();
    let len = prep.regular[0].len();
    let mut regular = prep.regular.clone();
    let mut flags = vec![vec![false; len]; slices];
    let (Some(removal), Some(spec)) = (case.removal, &scenario.anomaly) else {
        return Ok((regular, flags, None));
    };
    let target = spec.slice;
    let n_max = scenario
        .effective_schemes()
        .iter()
        .filter_map(|s| s.window())
        .max()
        .unwrap_or(0);
    let seed = splitmix(spec.seed, target as u64, 7);
    let (series, f, window) = match spec.chain {
        AnomalyChain::Users => {
            let chain = &prep.user_chains[target];
            if removal.count(chain.len()) == 0 {
                return Ok((regular, flags, None));
            }
            let p_prime = remove_low_states(chain, removal)?;
            let users: Vec<u32> = regular[target].iter().map(|s| s.state.users).collect();
            let window = choose_anomaly_window(&users, p_prime.space(), n_max, spec.t_s)?;
            let mut failure = None;
            let (series, f) = splice_users(&regular[target], &p_prime, window, seed, |state| {
                prep.demand_of(target, state).unwrap_or_else(|e| {
                    failure.get_or_insert(e);
                    0
                })
            })?;
            if let Some(e) = failure {
                return Err(e);
            }
            (series, f, window)
        }
        AnomalyChain::Joint => {
            let chain = &prep.joint_chains[target];
            if removal.count(chain.len()) == 0 {
                return Ok((regular, flags, None));
            }
            let p_prime = remove_low_states(chain, removal)?;
            let states: Vec<SliceState> = regular[target].iter().map(|s| s.state).collect();
            let window = choose_anomaly_window(&states, p_prime.space(), n_max, spec.t_s)?;
            let (spliced, f) = splice(&states, &p_prime, window, seed)?;
            let series = spliced
                .into_iter()
                .map(|state| {
                    Ok(SlotSample {
                        state,
                        demand: prep.demand_of(target, state)?,
                    })
                })
                .collect::<Result<Vec<_>, HarnessError>>()?;
            (series, f, window)
        }
    };
    regular[target] = series;
    flags[target] = f;
    Ok((regular, flags, Some(window)))
}

/// Runs every scheme of the scenario on one case.
pub fn run_case(prep: &Prepared, scenario: &Scenario, case: &Case) -> Result<CaseResult, HarnessError> {
    let (regular, flags, window) = inject(prep, scenario, case)?;
    let runs = scenario
        .effective_schemes()
        .into_iter()
        .map(|s| run_scheme(prep, scenario, &regular, &flags, s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CaseResult {
        case: case.clone(),
        anomalous_slice: window.and(scenario.anomaly.as_ref().map(|a| a.slice)),
        window,
        runs,
    })
}

/// Baseline followed by one case per anomaly strength of the sweep grid.
pub fn build_cases(scenario: &Scenario) -> Vec<Case> {
    let mut cases = vec![Case::baseline()];
    if let Some(sw) = &scenario.sweep {
        cases.extend(sw.beta.iter().map(|&b| Case::with_removal(Removal::Fraction(b))));
        cases.extend(sw.remove_k.iter().map(|&k| Case::with_removal(Removal::Count(k))));
    }
    if cases.len() == 1 {
        if let Some(a) = &scenario.anomaly {
            cases.push(Case::with_removal(a.removal));
        }
    }
    cases
}

/// The scenario's single configured case: its anomaly if any, else the
/// baseline.
pub fn simulate(prep: &Prepared, scenario: &Scenario) -> Result<Vec<CaseResult>, HarnessError> {
    let case = match &scenario.anomaly {
        Some(a) => Case::with_removal(a.removal),
        None => Case::baseline(),
    };
    Ok(vec![run_case(prep, scenario, &case)?])
}

/// Runs all cases of [`build_cases`] on up to `jobs` threads; results keep
/// the case order.
pub fn sweep(prep: &Prepared, scenario: &Scenario, jobs: usize) -> Result<Vec<CaseResult>, HarnessError> {
    let cases = build_cases(scenario);
    let jobs = jobs.clamp(1, cases.len());
    if jobs == 1 {
        return cases.iter().map(|c| run_case(prep, scenario, c)).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<CaseResult, HarnessError>>>> =
        Mutex::new((0..cases.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(case) = cases.get(k) else { break };
                let r = run_case(prep, scenario, case);
                results.lock().expect("result slot lock")[k] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("result slot lock")
        .into_iter()
        .map(|r| r.expect("every case ran"))
        .collect()
}
