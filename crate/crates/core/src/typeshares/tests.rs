use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::probtab::{MediatorOrder, MediatorSupport};

const TOL: f64 = 1e-9;

fn ordinal_spec(p0: &[f64], p1: &[f64], kind: RestrictionKind) -> IdentifiedSetSpec {
    let support = MediatorSupport::ordinal(p0.len());
    let r = RestrictionSet::realize(kind, &support).unwrap();
    IdentifiedSetSpec::from_marginals(p0.to_vec(), p1.to_vec(), r).unwrap()
}

const CASCADE_P0: [f64; 3] = [0.5, 0.3, 0.2];
const CASCADE_P1: [f64; 3] = [0.3, 0.3, 0.4];

fn theta3(entries: &[((usize, usize), f64)]) -> Vec<f64> {
    let mut t = vec![0.0; 9];
    for &((l, k), v) in entries {
        t[theta_index(3, l, k)] = v;
    }
    t
}

#[test]
fn restriction_strings_parse() {
    assert_eq!(RestrictionKind::parse("monotone").unwrap(), RestrictionKind::Monotone);
    assert_eq!(RestrictionKind::parse("none").unwrap(), RestrictionKind::Unrestricted);
    assert_eq!(RestrictionKind::parse("elementwise").unwrap(), RestrictionKind::ElementwiseMonotone);
    assert_eq!(RestrictionKind::parse("defier_budget:0.05").unwrap(), RestrictionKind::DefierBudget { dbar: 0.05 });
    assert_eq!(
        RestrictionKind::parse("bounded: 1.5, 0.1").unwrap(),
        RestrictionKind::BoundedEffect { kappa: 1.5, dbar: 0.1 }
    );
    for bad in ["defier_budget", "bounded:1", "wiggly", "defier_budget:abc"] {
        assert!(matches!(RestrictionKind::parse(bad), Err(Error::Structural(_))), "{bad}");
    }
}

#[test]
fn binary_monotone_pins_the_defier_cell() {
    let spec = ordinal_spec(&[0.7, 0.3], &[0.5, 0.5], RestrictionKind::Monotone);
    assert_eq!(spec.restriction().rows().len(), 1);
    assert_eq!(spec.restriction().rows()[0], vec![0.0, 0.0, 1.0, 0.0]);
    assert!(spec.is_feasible());
    assert_eq!(spec.marginal_rows().len(), 4);
    assert!(max_type_share(&spec, &[(1, 0)]).unwrap().abs() < TOL);
    // The remaining three shares are free: both extremes of θ₀₁ are reachable.
    assert!((max_type_share(&spec, &[(0, 1)]).unwrap() - 0.2).abs() < TOL);
}

#[test]
fn direct_and_cascade_points_are_feasible() {
    let spec = ordinal_spec(&CASCADE_P0, &CASCADE_P1, RestrictionKind::Monotone);
    assert!(spec.is_feasible());
    let direct = theta3(&[((0, 0), 0.3), ((0, 2), 0.2), ((1, 1), 0.3), ((2, 2), 0.2)]);
    let cascade = theta3(&[((0, 0), 0.3), ((0, 1), 0.2), ((1, 1), 0.1), ((1, 2), 0.2), ((2, 2), 0.2)]);
    assert!(spec.violation(&direct) < TOL);
    assert!(spec.violation(&cascade) < TOL);
}

#[test]
fn monotone_violation_is_infeasible_with_suggestion() {
    let spec = ordinal_spec(&[0.5, 0.5], &[0.8, 0.2], RestrictionKind::Monotone);
    assert!(!spec.is_feasible());
    match theta_kk_min(&spec, 0) {
        Err(Error::Identification { suggested_dbar: Some(d), .. }) => assert!((d - 0.3).abs() < TOL),
        other => panic!("expected identification error, got {other:?}"),
    }
    let (relaxed, dbar) = auto_relax(&spec, &MediatorSupport::ordinal(2)).unwrap();
    assert!((dbar.unwrap() - 0.3).abs() < TOL);
    assert!(relaxed.is_feasible());
    assert_eq!(relaxed.restriction().kind(), &RestrictionKind::DefierBudget { dbar: dbar.unwrap() });
}

#[test]
fn theta_kk_min_on_three_point_example() {
    let spec = ordinal_spec(&CASCADE_P0, &CASCADE_P1, RestrictionKind::Monotone);
    for (k, want) in [0.3, 0.1, 0.2].into_iter().enumerate() {
        assert!((theta_kk_min(&spec, k).unwrap() - want).abs() < TOL);
        assert!((theta_kk_min_closed_form(&CASCADE_P0, &CASCADE_P1, k) - want).abs() < TOL);
    }
}

#[test]
fn equal_marginals_leave_everyone_an_always_taker() {
    let p = [0.1, 0.25, 0.4, 0.25];
    let spec = ordinal_spec(&p, &p, RestrictionKind::Monotone);
    for k in 0..4 {
        assert!((theta_kk_min(&spec, k).unwrap() - p[k]).abs() < TOL);
    }
    let theta = joint_theta_min_exists(&spec).unwrap();
    for l in 0..4 {
        for k in 0..4 {
            let want = if l == k { p[k] } else { 0.0 };
            assert!((theta[theta_index(4, l, k)] - want).abs() < TOL);
        }
    }
}

#[test]
fn unrestricted_binary_allows_defiers() {
    let spec = ordinal_spec(&[0.7, 0.3], &[0.5, 0.5], RestrictionKind::Unrestricted);
    assert!(theta_kk_min(&spec, 1).unwrap().abs() < TOL);
    assert!((max_type_share(&spec, &[(1, 0)]).unwrap() - 0.3).abs() < TOL);
    let all: Vec<(usize, usize)> = (0..2).flat_map(|l| (0..2).map(move |k| (l, k))).collect();
    assert!((max_type_share(&spec, &all).unwrap() - 1.0).abs() < TOL);
    assert!(matches!(max_type_share(&spec, &[(2, 0)]), Err(Error::Structural(_))));
}

#[test]
fn cascade_reproduces_three_point_allocation() {
    let spec = ordinal_spec(&CASCADE_P0, &CASCADE_P1, RestrictionKind::Monotone);
    let theta = joint_theta_min_exists(&spec).unwrap();
    let want = theta3(&[((0, 0), 0.3), ((1, 1), 0.1), ((2, 2), 0.2), ((0, 1), 0.2), ((1, 2), 0.2)]);
    for (a, b) in theta.iter().zip(&want) {
        assert!((a - b).abs() < TOL, "{theta:?}");
    }
}

#[test]
fn cascade_rejects_other_restrictions() {
    let spec = ordinal_spec(&CASCADE_P0, &CASCADE_P1, RestrictionKind::DefierBudget { dbar: 0.1 });
    assert!(matches!(joint_theta_min_exists(&spec), Err(Error::Unsupported(_))));
}

/// Random `(P0, P1)` where `P1` is obtained from `P0` by moving mass upward,
/// so the pair is consistent with monotonicity.
fn random_monotone_pair(rng: &mut ChaCha8Rng, k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut p0: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() + 0.01).collect();
    // Occasionally zero out a point to exercise boundary cases.
    if k > 2 && rng.gen_bool(0.3) {
        p0[rng.gen_range(0..k)] = 0.0;
    }
    let s: f64 = p0.iter().sum();
    p0.iter_mut().for_each(|v| *v /= s);
    let mut p1 = vec![0.0; k];
    for l in 0..k {
        let w: Vec<f64> = (l..k).map(|_| rng.gen::<f64>().powi(2)).collect();
        let ws: f64 = w.iter().sum();
        for (j, wj) in w.iter().enumerate() {
            p1[l + j] += p0[l] * wj / ws;
        }
    }
    (p0, p1)
}

#[test]
fn lp_minimum_matches_closed_form_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let k = rng.gen_range(2..=6);
        let (p0, p1) = random_monotone_pair(&mut rng, k);
        let spec = ordinal_spec(&p0, &p1, RestrictionKind::Monotone);
        assert!(spec.is_feasible());
        let theta = joint_theta_min_exists(&spec).unwrap();
        for m in 0..k {
            let lp = theta_kk_min(&spec, m).unwrap();
            let cf = theta_kk_min_closed_form(&p0, &p1, m);
            assert!((lp - cf).abs() < TOL, "k={m}: lp {lp} vs closed form {cf}");
            assert!((theta[theta_index(k, m, m)] - lp).abs() < TOL);
        }
        for (row, rhs) in spec.marginal_rows() {
            assert!((crate::linprog::dot(&row, &theta) - rhs).abs() < TOL);
        }
    }
}

#[test]
fn cascade_handles_mass_that_must_skip_a_level() {
    let spec = ordinal_spec(&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0], RestrictionKind::Monotone);
    let theta = joint_theta_min_exists(&spec).unwrap();
    assert!((theta[theta_index(3, 0, 2)] - 1.0).abs() < TOL);
}

#[test]
fn monotone_feasibility_matches_survival_dominance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let k = rng.gen_range(2..=5);
        let draw = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let (p0, p1) = (draw(&mut rng), draw(&mut rng));
        let dominates = (0..k).all(|m| p1[m..].iter().sum::<f64>() >= p0[m..].iter().sum::<f64>() - 1e-12);
        let spec = ordinal_spec(&p0, &p1, RestrictionKind::Monotone);
        assert_eq!(spec.is_feasible(), dominates, "p0={p0:?} p1={p1:?}");
    }
}

#[test]
fn theta_kk_min_is_nonincreasing_in_the_defier_budget() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..30 {
        let k = rng.gen_range(2..=4);
        let (p0, p1) = random_monotone_pair(&mut rng, k);
        for m in 0..k {
            let mut prev = f64::INFINITY;
            for step in 0..=10 {
                let spec = ordinal_spec(&p0, &p1, RestrictionKind::DefierBudget { dbar: step as f64 * 0.05 });
                let v = theta_kk_min(&spec, m).unwrap();
                assert!(v <= prev + TOL);
                prev = v;
            }
        }
    }
}

#[test]
fn defier_budget_reaches_unrestricted_extreme() {
    // With 0.3 defier mass allowed, the binary example reaches the
    // unrestricted extreme.
    let spec = ordinal_spec(&[0.7, 0.3], &[0.5, 0.5], RestrictionKind::DefierBudget { dbar: 0.3 });
    assert!((max_type_share(&spec, &[(1, 0)]).unwrap() - 0.3).abs() < TOL);
    assert!(theta_kk_min(&spec, 1).unwrap().abs() < TOL);
    let tight = ordinal_spec(&[0.7, 0.3], &[0.5, 0.5], RestrictionKind::DefierBudget { dbar: 0.1 });
    assert!((max_type_share(&tight, &[(1, 0)]).unwrap() - 0.1).abs() < TOL);
    assert!((theta_kk_min(&tight, 1).unwrap() - 0.2).abs() < TOL);
}

#[test]
fn elementwise_and_bounded_effect_on_vector_support() {
    let support = MediatorSupport::new(
        vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
        MediatorOrder::Partial,
    )
    .unwrap();
    assert!(matches!(RestrictionSet::realize(RestrictionKind::Monotone, &support), Err(Error::Structural(_))));
    let elem = RestrictionSet::realize(RestrictionKind::ElementwiseMonotone, &support).unwrap();
    // Comparable ordered pairs: 4 diagonal + (0,1),(0,2),(0,3),(1,3),(2,3).
    assert_eq!(elem.rows().len(), 16 - 9);
    let bounded = RestrictionSet::realize(RestrictionKind::BoundedEffect { kappa: 1.0, dbar: 0.05 }, &support).unwrap();
    // Only the diagonal corners (distance √2) exceed κ = 1.
    let row = &bounded.rows()[0];
    assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 4);
    assert_eq!(row[theta_index(4, 0, 3)], 1.0);
    assert_eq!(row[theta_index(4, 1, 2)], 1.0);

    let p0 = vec![0.4, 0.2, 0.2, 0.2];
    let p1 = vec![0.2, 0.2, 0.2, 0.4];
    let spec = IdentifiedSetSpec::from_marginals(p0, p1, elem).unwrap();
    assert!(spec.is_feasible());
    assert!(max_type_share(&spec, &[(1, 2), (2, 1)]).unwrap().abs() < TOL);
}

#[test]
fn partial_order_hook_and_custom_rows() {
    let support = MediatorSupport::ordinal(2);
    let precedes = vec![vec![true, true], vec![false, true]];
    let r = RestrictionSet::realize(RestrictionKind::PartialOrder { precedes }, &support).unwrap();
    let mono = RestrictionSet::realize(RestrictionKind::Monotone, &support).unwrap();
    assert_eq!(r.rows(), mono.rows());

    let bad = RestrictionKind::CustomPolyhedron { b: vec![vec![1.0, 1.0, 1.0]], c: vec![1.0] };
    assert!(matches!(RestrictionSet::realize(bad, &support), Err(Error::Structural(_))));
    let empty = RestrictionKind::CustomPolyhedron { b: vec![vec![1.0; 4]], c: vec![-1.0] };
    assert!(matches!(RestrictionSet::realize(empty, &support), Err(Error::Domain(_))));
}
