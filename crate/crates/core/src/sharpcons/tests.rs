use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::bounds::nu_lower_bounds;
use crate::linprog::{solve_lp, LinearProgram};
use crate::typeshares::{build_identified_set, joint_theta_min_exists, RestrictionKind, RestrictionSet};

const TOL: f64 = 1e-9;

fn coupling_lp(f: &[f64], g: &[f64]) -> f64 {
    let q = f.len();
    let mut lp = LinearProgram::new(q * q);
    lp.objective = (0..q * q).map(|i| if i / q == i % q { 0.0 } else { 1.0 }).collect();
    for a in 0..q {
        lp.add_eq((0..q * q).map(|i| if i / q == a { 1.0 } else { 0.0 }).collect(), f[a]);
        lp.add_eq((0..q * q).map(|i| if i % q == a { 1.0 } else { 0.0 }).collect(), g[a]);
    }
    solve_lp(&lp).unwrap().value
}

#[test]
fn tv_examples() {
    let (tv, c) = tv_distance(&[0.4, 0.6], &[0.4, 0.6]).unwrap();
    assert_eq!(tv, 0.0);
    assert_eq!(c, Coupling::diagonal(&[0.4, 0.6]));
    let (tv, c) = tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
    assert_eq!(tv, 1.0);
    assert_eq!(c.get(0, 1), 1.0);
    assert_eq!(c.get(0, 0) + c.get(1, 1) + c.get(1, 0), 0.0);
    let (tv, c) = tv_distance(&[0.7, 0.3], &[0.4, 0.6]).unwrap();
    assert!((tv - 0.3).abs() < TOL);
    assert!((c.disagreement() - 0.3).abs() < TOL);
    assert!(matches!(tv_distance(&[1.0], &[0.5, 0.5]), Err(Error::Structural(_))));
}

#[test]
fn tv_matches_lp_coupling() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let q = rng.gen_range(1..=6);
        let draw = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..q).map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen::<f64>() + 1e-3 }).collect();
            let s: f64 = v.iter().sum();
            if s == 0.0 {
                vec![1.0 / q as f64; q]
            } else {
                v.into_iter().map(|x| x / s).collect::<Vec<_>>()
            }
        };
        let (f, g) = (draw(&mut rng), draw(&mut rng));
        let (tv, c) = tv_distance(&f, &g).unwrap();
        assert!((tv - coupling_lp(&f, &g)).abs() < TOL);
        assert!((c.disagreement() - tv).abs() < 1e-12);
        for (a, b) in c.first_marginal().iter().zip(&f) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in c.second_marginal().iter().zip(&g) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

/// Random shares, then random partial pmfs with the implied marginals. Cells
/// are zeroed at random so that disjoint supports occur.
fn random_instance(rng: &mut ChaCha8Rng) -> (DistTable, Vec<f64>) {
    let k = rng.gen_range(2..=4);
    let q = rng.gen_range(1..=4);
    let mut theta: Vec<f64> = (0..k * k).map(|_| if rng.gen_bool(0.35) { 0.0 } else { rng.gen::<f64>() }).collect();
    if theta.iter().all(|&v| v == 0.0) {
        theta[0] = 1.0;
    }
    let s: f64 = theta.iter().sum();
    theta.iter_mut().for_each(|v| *v /= s);
    let p0: Vec<f64> = (0..k).map(|m| (0..k).map(|l| theta[theta_index(k, m, l)]).sum()).collect();
    let p1: Vec<f64> = (0..k).map(|m| (0..k).map(|l| theta[theta_index(k, l, m)]).sum()).collect();
    let arm = |rng: &mut ChaCha8Rng, p: &[f64]| -> Vec<Vec<f64>> {
        p.iter()
            .map(|&pm| {
                let mut w: Vec<f64> = (0..q).map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen::<f64>() }).collect();
                if w.iter().all(|&v| v == 0.0) {
                    w[rng.gen_range(0..q)] = 1.0;
                }
                let s: f64 = w.iter().sum();
                w.into_iter().map(|v| pm * v / s).collect()
            })
            .collect()
    };
    let a0 = arm(rng, &p0);
    let a1 = arm(rng, &p1);
    (DistTable::ordinal([a0, a1]).unwrap(), theta)
}

#[test]
fn round_trip_reproduces_observables_and_disagreement() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..300 {
        let (table, theta) = random_instance(&mut rng);
        let p = construct_sharp_distribution(&table, &theta).unwrap();
        let rep = verify_consistency(&p, &table);
        assert!(rep.max_deviation < TOL, "{rep:?}");
        assert!(rep.disagreement_gap < TOL, "{rep:?}");
        assert!(rep.others_have_no_direct_effect);
        for &c in p.cases() {
            seen.insert(format!("{c:?}"));
        }
    }
    assert_eq!(seen.len(), 4, "cases exercised: {seen:?}");
}

#[test]
fn identical_arms_have_no_direct_effect() {
    let a = vec![vec![0.2, 0.3], vec![0.1, 0.1], vec![0.2, 0.1]];
    let table = DistTable::ordinal([a.clone(), a]).unwrap();
    let r = RestrictionSet::realize(RestrictionKind::Monotone, table.support()).unwrap();
    let theta = joint_theta_min_exists(&build_identified_set(&table, &r).unwrap()).unwrap();
    let p = construct_sharp_distribution(&table, &theta).unwrap();
    let rep = verify_consistency(&p, &table);
    assert!(rep.max_deviation < TOL);
    assert!(rep.disagreement.iter().all(|&v| v.abs() < TOL));
    assert!(p.cases().iter().all(|&c| c == SharpCase::NoExcess));
}

#[test]
fn binary_instance_disagreement_matches_bound() {
    let table =
        DistTable::ordinal([vec![vec![0.1, 0.5], vec![0.3, 0.1]], vec![vec![0.3, 0.3], vec![0.2, 0.2]]]).unwrap();
    let theta = vec![0.6, 0.0, 0.0, 0.4];
    let p = construct_sharp_distribution(&table, &theta).unwrap();
    let rep = verify_consistency(&p, &table);
    assert!(rep.max_deviation < TOL);
    let r = RestrictionSet::realize(RestrictionKind::Monotone, table.support()).unwrap();
    let nu = nu_lower_bounds(&table, &r).unwrap();
    assert!((rep.disagreement[0] - 1.0 / 3.0).abs() < TOL);
    assert!((rep.disagreement[0] - nu[0]).abs() < TOL);
    assert!((rep.disagreement[1] - nu[1]).abs() < TOL);
}

#[test]
fn full_mediator_shift_has_no_always_takers() {
    let table =
        DistTable::ordinal([vec![vec![0.5, 0.5], vec![0.0, 0.0]], vec![vec![0.0, 0.0], vec![0.9, 0.1]]]).unwrap();
    let p = construct_sharp_distribution(&table, &[0.0, 1.0, 0.0, 0.0]).unwrap();
    assert!(p.cases().iter().all(|&c| c == SharpCase::NoAlwaysTakers));
    let rep = verify_consistency(&p, &table);
    assert!(rep.max_deviation < TOL);
    assert!(rep.target_disagreement.iter().all(Option::is_none));
}

#[test]
fn shares_outside_the_identified_set_are_rejected() {
    let table = DistTable::ordinal([vec![vec![0.5], vec![0.5]], vec![vec![0.5], vec![0.5]]]).unwrap();
    match construct_sharp_distribution(&table, &[0.6, 0.0, 0.0, 0.4]) {
        Err(Error::Precondition(msg)) => assert!(msg.contains("m_0"), "{msg}"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(construct_sharp_distribution(&table, &[0.5, 0.0]), Err(Error::Precondition(_))));
}

#[test]
fn perturbed_shares_show_up_where_they_were_moved() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (table, theta) = loop {
        let (t, th) = random_instance(&mut rng);
        if t.k() >= 3 && th[theta_index(t.k(), 0, 1)] > 0.02 {
            break (t, th);
        }
    };
    let k = table.k();
    let mut p = construct_sharp_distribution(&table, &theta).unwrap();
    // Move 0.01 from type 01 to type 00: arm 1 can change only at m_0 and
    // m_1, arm 0 only at m_0.
    p.theta[theta_index(k, 0, 1)] -= 0.01;
    p.theta[theta_index(k, 0, 0)] += 0.01;
    let rep = verify_consistency(&p, &table);
    assert!(rep.max_deviation > 1e-4);
    assert!(rep.deviation[1][0] > 1e-4 || rep.deviation[1][1] > 1e-4);
    for m in 2..k {
        assert!(rep.deviation[1][m] < TOL);
    }
    assert!(rep.deviation[0][1..].iter().all(|&v| v < TOL));
}
