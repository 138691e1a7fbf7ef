use proptest::prelude::*;

use netslice::anomaly::{remove_low_states, splice, Removal};
use netslice::detector::{likelihood_ratio, log_gamma_threshold, DetectorWindow, Hypothesis};
use netslice::markov::{sample_trajectory, stationary_distribution, StateSpace, TransitionMatrix};
use netslice::scheduler::{allocate_slot, knapsack, update_deficits, DeficitVector, GrantSpace, Scheme};
use netslice::trial::{demand_pmf, percentile_demand, provision, ProvisionPlan};

/// Exhaustive search with the same objective and tie-break order. The
/// final rule compares 0/1 decision vectors, preferring acceptance of the
/// earliest index; it only differs from comparing sorted index lists when
/// items cost and weigh nothing, and those are always accepted.
fn brute_force(weights: &[f64], demands: &[u32], cap: u32) -> Vec<bool> {
    let m = weights.len();
    let mut best: Option<(f64, u64, Vec<bool>)> = None;
    for mask in 0u32..(1 << m) {
        let idx: Vec<bool> = (0..m).map(|i| mask >> i & 1 == 1).collect();
        let d: u64 = (0..m).filter(|&i| idx[i]).map(|i| u64::from(demands[i])).sum();
        if d > u64::from(cap) {
            continue;
        }
        let v: f64 = (0..m).filter(|&i| idx[i]).map(|i| weights[i]).sum();
        let better = match &best {
            None => true,
            Some((bv, bd, bi)) => {
                if v > *bv {
                    true
                } else if v < *bv {
                    false
                } else if d != *bd {
                    d > *bd
                } else {
                    idx > *bi
                }
            }
        };
        if better {
            best = Some((v, d, idx));
        }
    }
    best.unwrap().2
}

fn chain_strategy(max: usize) -> impl Strategy<Value = TransitionMatrix<usize>> {
    (2..=max).prop_flat_map(|k| {
        prop::collection::vec(prop::collection::vec(0.05f64..1.0, k), k).prop_map(move |raw| {
            let rows = raw
                .into_iter()
                .map(|r| {
                    let s: f64 = r.iter().sum();
                    r.into_iter().map(|x| x / s).collect()
                })
                .collect();
            TransitionMatrix::new(StateSpace::new((0..k).collect()).unwrap(), rows).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn knapsack_matches_enumeration(
        items in prop::collection::vec((0u32..20, 0u32..=50), 0..=10),
        cap in 0u32..=200,
    ) {
        // integer weights keep ties exact for the oracle
        let w: Vec<f64> = items.iter().map(|&(x, _)| f64::from(x)).collect();
        let d: Vec<u32> = items.iter().map(|&(_, y)| y).collect();
        prop_assert_eq!(knapsack(&w, &d, cap), brute_force(&w, &d, cap));
    }

    #[test]
    fn stationary_is_fixed_point(m in chain_strategy(12)) {
        let pi = stationary_distribution(&m).unwrap();
        prop_assert!(pi.fixed_point_residual(&m) < 1e-8);
        prop_assert!((pi.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn percentile_is_minimal(values in prop::collection::vec(0u32..30, 2..80), p in 0.01f64..=1.0) {
        let pmf = demand_pmf(std::slice::from_ref(&values)).unwrap();
        let w = percentile_demand(&pmf.marginals[0], p);
        let n = values.len() as f64;
        let cdf = |x: u32| values.iter().filter(|&&v| v <= x).count() as f64 / n;
        prop_assert!(cdf(w) >= p - 1e-12);
        if let Some(prev) = pmf.marginals[0].range(..w).next_back().map(|(&k, _)| k) {
            prop_assert!(cdf(prev) < p - 1e-12);
        }
    }

    #[test]
    fn provision_bounds(
        pairs in prop::collection::vec((0u32..40, 0u32..40), 2..60),
        p in 0.5f64..=1.0,
    ) {
        let a: Vec<u32> = pairs.iter().map(|x| x.0).collect();
        let b: Vec<u32> = pairs.iter().map(|x| x.1).collect();
        let pmf = demand_pmf(&[a, b]).unwrap();
        let wh = [percentile_demand(&pmf.marginals[0], p), percentile_demand(&pmf.marginals[1], p)];
        let on = provision(&pmf, &wh, p, true);
        let off = provision(&pmf, &wh, p, false);
        prop_assert!(on <= off);
        prop_assert!(on <= wh[0] + wh[1]);
    }

    #[test]
    fn raising_alpha_never_raises_threshold(dof in 1u64..500, a in 0.001f64..0.5, b in 0.001f64..0.5) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        for corrected in [false, true] {
            prop_assert!(log_gamma_threshold(hi, dof, corrected) <= log_gamma_threshold(lo, dof, corrected) + 1e-9);
        }
    }

    #[test]
    fn likelihood_ratio_is_nonnegative(m in chain_strategy(5), seed in 0u64..1000, n in 2usize..120) {
        let seq = sample_trajectory(&m, &0, n, seed).unwrap();
        let w = DetectorWindow::from_samples(n, &seq);
        prop_assert!(likelihood_ratio(&w, &m).unwrap() >= 0.0);
    }

    #[test]
    fn removal_keeps_pattern(m in chain_strategy(8), k in 0usize..7) {
        prop_assume!(k < m.len());
        let p = remove_low_states(&m, Removal::Count(k)).unwrap();
        prop_assert_eq!(p.len(), m.len() - k);
        for i in 0..p.len() {
            let s: f64 = p.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            for j in 0..p.len() {
                if m.prob(i + k, j + k) == 0.0 {
                    prop_assert_eq!(p.prob(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn splice_leaves_outside_untouched(
        m in chain_strategy(6),
        seed in 0u64..500,
        a in 0usize..200,
        len in 1usize..200,
    ) {
        let series = sample_trajectory(&m, &0, 300, seed).unwrap();
        let t_e = (a + len).min(299);
        let (out, flags) = splice(&series, &m, (a, t_e), seed + 1).unwrap();
        for t in 0..300 {
            prop_assert_eq!(flags[t], a <= t && t <= t_e);
            if !flags[t] {
                prop_assert_eq!(out[t], series[t]);
            }
        }
    }

    #[test]
    fn deficits_stay_at_least_target(
        d in prop::collection::vec(0.0f64..5.0, 3),
        u in prop::collection::vec(any::<bool>(), 3),
        p in prop::collection::vec(0.5f64..1.0, 3),
    ) {
        let next = update_deficits(&d, &u, &p);
        for i in 0..3 {
            prop_assert!(next[i] >= p[i]);
        }
    }

    #[test]
    fn slot_never_exceeds_capacity(
        demands in prop::collection::vec(0u32..120, 1..5),
        wh_extra in prop::collection::vec(0u32..60, 5),
        w_c in 1u32..300,
        flags in prop::collection::vec(any::<bool>(), 5),
        deficits in prop::collection::vec(0.5f64..4.0, 5),
        scheme_pick in 0usize..3,
    ) {
        let n = demands.len();
        let plan = ProvisionPlan {
            w_c,
            w_h: wh_extra[..n].to_vec(),
            p_h: vec![0.9; n],
            transform: true,
        };
        let scheme = [Scheme::NoSh, Scheme::Sh, Scheme::ShT(10)][scheme_pick];
        let mut d = DeficitVector::new(&plan.p_h);
        d.update(&vec![false; n], &deficits[..n]);
        let out = allocate_slot(&demands, &d, &plan, scheme, GrantSpace::Continuous, |i| {
            if flags[i] { Hypothesis::Anomalous } else { Hypothesis::Normal }
        }).unwrap();
        prop_assert!(out.used(&demands) <= u64::from(out.capacity));
        for i in 0..n {
            if out.accepted[i] {
                prop_assert_eq!(out.residual_grants[i], 0);
            }
        }
    }
}
