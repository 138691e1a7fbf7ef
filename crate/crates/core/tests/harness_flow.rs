use std::path::PathBuf;

use netslice::anomaly::Removal;
use netslice::harness::{self, build_cases, prepare, run_case, run_scheme, synthesize, Case, Scenario, SchemeRun};
use netslice::scheduler::Scheme;
use netslice::trace::write_slot_series;

fn load(rel: &str) -> Scenario {
    Scenario::load(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(rel)).unwrap()
}

fn demo() -> Scenario {
    load("../../scenarios/demo.json")
}

fn isolation() -> Scenario {
    load("tests/data/isolation.json")
}

fn by_scheme(runs: &[SchemeRun], s: Scheme) -> &SchemeRun {
    runs.iter().find(|r| r.scheme == s).unwrap()
}

/// Per-slot accept vectors of the slots where total demand exceeded the
/// shared capacity.
fn contention_decisions(run: &SchemeRun, slices: usize, capacity: u32) -> Vec<(usize, Vec<bool>)> {
    run.logs
        .chunks(slices)
        .filter(|slot| slot.iter().map(|l| u64::from(l.demand)).sum::<u64>() > u64::from(capacity))
        .map(|slot| (slot[0].slot, slot.iter().map(|l| l.accepted).collect()))
        .collect()
}

#[test]
fn baseline_meets_every_sla_under_every_scheme() {
    for scenario in [demo(), isolation()] {
        let prep = prepare(&scenario).unwrap();
        let base = run_case(&prep, &scenario, &Case::baseline()).unwrap();
        assert!(base.anomalous_slice.is_none());
        for run in &base.runs {
            for (i, &a) in run.metrics.a.iter().enumerate() {
                assert!(
                    a >= prep.outcome.plan.p_h[i],
                    "{} {}: a_{i} = {a}",
                    scenario.name,
                    run.scheme
                );
            }
        }
    }
}

#[test]
fn no_sharing_provisions_at_least_shared() {
    let scenario = demo();
    let prep = prepare(&scenario).unwrap();
    let base = run_case(&prep, &scenario, &Case::baseline()).unwrap();
    let plan = &prep.outcome.plan;
    let nosh = by_scheme(&base.runs, Scheme::NoSh).prbs;
    assert_eq!(nosh, plan.w_h.iter().sum::<u32>());
    for run in &base.runs {
        assert!(run.prbs <= nosh);
        assert_eq!(run.prbs, run.scheme.capacity(plan));
    }
}

#[test]
fn testing_rarely_changes_decisions_without_anomaly() {
    for scenario in [demo(), isolation()] {
        let prep = prepare(&scenario).unwrap();
        let slices = prep.regular.len();
        let base = run_case(&prep, &scenario, &Case::baseline()).unwrap();
        let sh = contention_decisions(by_scheme(&base.runs, Scheme::Sh), slices, prep.outcome.plan.w_c);
        let sht = contention_decisions(by_scheme(&base.runs, Scheme::ShT(100)), slices, prep.outcome.plan.w_c);
        assert_eq!(sh.len(), sht.len());
        assert!(!sh.is_empty());
        let same = sh.iter().zip(&sht).filter(|(a, b)| a == b).count();
        let share = same as f64 / sh.len() as f64;
        assert!(
            share >= 0.95,
            "{}: {same}/{} contention slots agree",
            scenario.name,
            sh.len()
        );
    }
}

#[test]
fn zero_strength_anomaly_equals_baseline() {
    let scenario = isolation();
    let prep = prepare(&scenario).unwrap();
    let base = run_case(&prep, &scenario, &Case::baseline()).unwrap();
    for removal in [Removal::Fraction(0.0), Removal::Count(0)] {
        let zero = run_case(&prep, &scenario, &Case::with_removal(removal)).unwrap();
        assert!(zero.anomalous_slice.is_none());
        for (a, b) in zero.runs.iter().zip(&base.runs) {
            assert_eq!(a.logs, b.logs);
            assert_eq!(a.metrics, b.metrics);
        }
    }
}

#[test]
fn single_cell_sweep_is_one_simulation() {
    let mut scenario = isolation();
    scenario.sweep = None;
    scenario.schemes = vec![Scheme::Sh];
    assert_eq!(build_cases(&scenario).len(), 2);
    let prep = prepare(&scenario).unwrap();
    let sim = harness::simulate(&prep, &scenario).unwrap();
    assert_eq!(sim.len(), 1);
    let swept = harness::sweep(&prep, &scenario, 3).unwrap();
    assert_eq!(swept[1].runs[0].logs, sim[0].runs[0].logs);
}

#[test]
fn acceptance_ratio_counts_rejections_and_unserved_slots() {
    let scenario = isolation();
    let prep = prepare(&scenario).unwrap();
    let cases = harness::sweep(&prep, &scenario, 1).unwrap();
    let run = by_scheme(&cases[1].runs, Scheme::ShT(100));
    let t_s = prep.regular[0].len() as f64;
    for i in 0..prep.regular.len() {
        let logs = run.logs.iter().filter(|l| l.slice == i);
        let rejected = logs.clone().filter(|l| l.rejected).count();
        let unserved = logs.filter(|l| !l.rejected && !l.accepted).count();
        let expect = 1.0 - (rejected + unserved) as f64 / t_s;
        assert!((run.metrics.a[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn synthetic_series_are_reproducible() {
    let scenario = demo();
    let table = scenario.table().unwrap();
    let bytes = || {
        let mut out = Vec::new();
        for (trial, regular) in synthesize(&scenario, &table).unwrap().into_iter().flatten() {
            write_slot_series(&mut out, &trial).unwrap();
            write_slot_series(&mut out, &regular).unwrap();
        }
        out
    };
    assert_eq!(bytes(), bytes());
    let mut other = scenario.clone();
    other.override_seed(scenario.seed + 1);
    let first = synthesize(&scenario, &table).unwrap();
    assert_ne!(first, synthesize(&other, &table).unwrap());
}

#[test]
fn fitted_user_chain_recovers_generator() {
    let scenario = isolation();
    let prep = prepare(&scenario).unwrap();
    let harness::SourceSpec::Synthetic { users, .. } = &scenario.slices[0].source else {
        panic!("synthetic slice expected");
    };
    let truth = users.to_matrix(0).unwrap();
    let fit = &prep.user_chains[0];
    assert_eq!(fit.space(), truth.space());
    for i in 0..truth.len() {
        for j in 0..truth.len() {
            assert!((fit.prob(i, j) - truth.prob(i, j)).abs() < 0.05, "entry ({i},{j})");
        }
    }
}

#[test]
fn heavy_tail_gains_from_sharing() {
    let mut scenario = isolation();
    scenario.anomaly = None;
    scenario.sweep = None;
    let prep = prepare(&scenario).unwrap();
    let plan = &prep.outcome.plan;
    assert!(plan.w_c < plan.w_h.iter().sum::<u32>());
}

#[test]
fn shared_capacity_covers_the_trial_itself() {
    let scenario = demo();
    let prep = prepare(&scenario).unwrap();
    let t = prep.trial[0].len();
    let flags = vec![vec![false; t]; prep.trial.len()];
    let run = run_scheme(&prep, &scenario, &prep.trial, &flags, Scheme::Sh).unwrap();
    let max_p = prep.outcome.plan.p_h.iter().cloned().fold(0.0, f64::max);
    for &a in &run.metrics.a {
        assert!(a >= max_p - 1.0 / t as f64, "a = {a}");
    }
}

#[test]
fn anomalous_cases_flag_only_the_window() {
    let scenario = isolation();
    let prep = prepare(&scenario).unwrap();
    let cases = harness::sweep(&prep, &scenario, 2).unwrap();
    let anomalous = &cases[1];
    let (t_s, t_e) = anomalous.window.unwrap();
    let slice = anomalous.anomalous_slice.unwrap();
    for l in &anomalous.runs[0].logs {
        assert_eq!(l.anomalous, l.slice == slice && (t_s..=t_e).contains(&l.slot));
    }
    let before = &cases[0].runs[0].logs;
    for (a, b) in anomalous.runs[0].logs.iter().zip(before) {
        if a.slice != slice || a.slot < t_s {
            assert_eq!(a.demand, b.demand);
        }
    }
}
