use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn four_rows() -> RecordSet {
    RecordSet::new(vec![
        Record::scalar(1.0, 0.0, 0),
        Record::scalar(0.0, 0.0, 0),
        Record::scalar(1.0, 1.0, 1),
        Record::scalar(0.0, 1.0, 1),
    ])
    .unwrap()
}

#[test]
fn counting_small_record_set() {
    let t = from_records(&four_rows()).unwrap();
    let (m0, m1) = (t.support().index_of(&[0.0]).unwrap(), t.support().index_of(&[1.0]).unwrap());
    let (y0, y1) = (t.level_of(0.0).unwrap(), t.level_of(1.0).unwrap());
    assert_eq!(t.mass(0, m0, y1), 0.5);
    assert_eq!(t.mass(1, m1, y0), 0.5);
    assert_eq!(t.mass(1, m0, y1), 0.0);
    assert_eq!(t.n_units(), [2, 2]);
}

#[test]
fn degenerate_control_arm() {
    let rs =
        RecordSet::new(vec![Record::scalar(0.0, 0.0, 0), Record::scalar(0.0, 0.0, 0), Record::scalar(2.0, 1.0, 1)])
            .unwrap();
    let t = from_records(&rs).unwrap();
    assert_eq!(t.mass(0, 0, 0), 1.0);
    assert_eq!(t.arm(0).iter().sum::<f64>(), 1.0);
    assert_eq!(t.arm(0).iter().filter(|&&v| v > 0.0).count(), 1);
}

#[test]
fn missing_arm_is_estimation_error() {
    let rs = RecordSet::new(vec![Record::scalar(0.0, 0.0, 1)]).unwrap();
    assert!(matches!(from_records(&rs), Err(Error::Estimation(_))));
}

#[test]
fn non_binary_treatment_is_structural() {
    assert!(matches!(RecordSet::new(vec![Record::scalar(0.0, 0.0, 2)]), Err(Error::Structural(_))));
}

#[test]
fn values_seen_in_one_arm_join_the_sorted_support() {
    let rs =
        RecordSet::new(vec![Record::scalar(0.0, 2.0, 0), Record::scalar(0.0, 0.0, 1), Record::scalar(0.0, 1.0, 1)])
            .unwrap();
    let t = from_records(&rs).unwrap();
    assert_eq!(t.support().points(), &[vec![0.0], vec![1.0], vec![2.0]]);
    assert_eq!(t.support().order(), MediatorOrder::Total);
    assert_eq!(t.marginals(0), vec![0.0, 0.0, 1.0]);
}

#[test]
fn vector_mediators_keep_declaration_order() {
    let rs = RecordSet::new(vec![Record::new(0.0, vec![1.0, 0.0], 0), Record::new(0.0, vec![0.0, 0.0], 1)]).unwrap();
    let t = from_records(&rs).unwrap();
    assert_eq!(t.support().points(), &[vec![1.0, 0.0], vec![0.0, 0.0]]);
    assert_eq!(t.support().order(), MediatorOrder::Partial);
}

#[test]
fn csv_ingestion_and_errors() {
    let ok = "y,d,m1,cluster\n1,0,0,a\n0,1,1,b\n";
    let rs = RecordSet::from_csv_reader(ok.as_bytes()).unwrap();
    assert_eq!(rs.len(), 2);
    assert!(rs.has_clusters());

    let missing = "y,treat,m1\n1,0,0\n";
    let err = RecordSet::from_csv_reader(missing.as_bytes()).unwrap_err();
    assert!(err.to_string().contains("`d`"), "{err}");

    let bad = "y,d,m1\n1,0,0\nx,1,0\n";
    let err = RecordSet::from_csv_reader(bad.as_bytes()).unwrap_err();
    assert!(err.to_string().contains("line 3"), "{err}");

    let ragged = "y,d,m1\n1,0,0\n1,0\n";
    let err = RecordSet::from_csv_reader(ragged.as_bytes()).unwrap_err();
    assert!(err.to_string().contains("line 3"), "{err}");
}

fn table(m1: Vec<Vec<f64>>, m0: Vec<Vec<f64>>) -> DistTable {
    DistTable::ordinal([m0, m1]).unwrap()
}

#[test]
fn delta_sup_matches_subset_enumeration_on_small_example() {
    let t = table(vec![vec![0.3, 0.3], vec![0.4, 0.0]], vec![vec![0.1, 0.5], vec![0.2, 0.2]]);
    let brute = (0..4u32)
        .map(|mask| (0..2).filter(|q| mask >> q & 1 == 1).map(|q| t.mass(1, 0, q) - t.mass(0, 0, q)).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max);
    assert!((delta_sup(&t, 0) - 0.2).abs() < 1e-15);
    assert!((brute - 0.2).abs() < 1e-15);
}

#[test]
fn delta_sup_special_cases() {
    let same = table(vec![vec![0.5, 0.5]], vec![vec![0.5, 0.5]]);
    assert_eq!(delta_sup(&same, 0), 0.0);
    let t = table(vec![vec![0.1, 0.2], vec![0.3, 0.4]], vec![vec![0.0, 0.0], vec![0.5, 0.5]]);
    assert!((delta_sup(&t, 0) - t.marginal(1, 0)).abs() < 1e-15);
}

fn random_pmf(rng: &mut ChaCha8Rng, n: usize, zero_prob: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| if rng.gen_bool(zero_prob) { 0.0 } else { rng.gen::<f64>() }).collect();
    if v.iter().sum::<f64>() == 0.0 {
        v[0] = 1.0;
    }
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn random_table(rng: &mut ChaCha8Rng, k: usize, q: usize) -> DistTable {
    let arm = |rng: &mut ChaCha8Rng| {
        let flat = random_pmf(rng, k * q, 0.2);
        flat.chunks(q).map(|c| c.to_vec()).collect::<Vec<_>>()
    };
    let a0 = arm(rng);
    let a1 = arm(rng);
    DistTable::ordinal([a0, a1]).unwrap()
}

#[test]
fn delta_sup_equals_brute_force_over_all_subsets() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..40 {
        let q = rng.gen_range(1..=12);
        let t = random_table(&mut rng, 2, q);
        for k in 0..2 {
            let mut best = 0.0_f64;
            for mask in 0..(1u32 << q) {
                let s: f64 = (0..q).filter(|i| mask >> i & 1 == 1).map(|i| t.mass(1, k, i) - t.mass(0, k, i)).sum();
                best = best.max(s);
            }
            let ds = delta_sup(&t, k);
            assert!((ds - best).abs() < 1e-12);
            assert!(ds >= 0.0 && ds <= t.marginal(1, k) + 1e-12);
        }
    }
}

#[test]
fn collapsing_four_levels_into_two_bins() {
    let t = table(vec![vec![0.1, 0.2, 0.3, 0.4]], vec![vec![0.4, 0.3, 0.2, 0.1]]);
    let c = discretize_outcome(&t, &[1.0]).unwrap();
    assert_eq!(c.q(), 2);
    assert!((c.mass(1, 0, 0) - 0.3).abs() < 1e-15 && (c.mass(1, 0, 1) - 0.7).abs() < 1e-15);
    assert!((c.mass(0, 0, 0) - 0.7).abs() < 1e-15);
    for d in 0..2 {
        assert!((c.arm(d).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn refinement_weakly_increases_delta_sup() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let t = random_table(&mut rng, 2, 4);
        let four = discretize_outcome(&t, &[0.0, 1.0, 2.0]).unwrap();
        let two = discretize_outcome(&t, &[1.0]).unwrap();
        for k in 0..2 {
            assert!(delta_sup(&two, k) <= delta_sup(&four, k) + 1e-15);
            assert!(delta_sup(&four, k) <= delta_sup(&t, k) + 1e-15);
        }
    }
}

#[test]
fn discretization_is_idempotent_and_validates_cutpoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = random_table(&mut rng, 3, 6);
    let once = discretize_outcome(&t, &[1.0, 3.0]).unwrap();
    let twice = discretize_outcome(&once, &[1.0, 3.0]).unwrap();
    assert_eq!(once, twice);
    assert!(discretize_outcome(&t, &[]).is_err());
    assert!(discretize_outcome(&t, &[2.0, 1.0]).is_err());
    assert!(discretize_outcome(&once, &[2.0]).is_err());
}

#[test]
fn quintiles_of_uniform_draws_split_evenly() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ys: Vec<f64> = (0..100).map(|_| rng.gen::<f64>()).collect();
    let cuts = quantile_cutpoints(&ys, 5).unwrap();
    let bins = bins_from_cutpoints(&cuts).unwrap();
    let mut counts = vec![0; bins.len()];
    for y in &ys {
        counts[bins.iter().position(|b| b.contains(*y)).unwrap()] += 1;
    }
    // Sort-and-split oracle: the j-th bin holds ranks 20j+1 ..= 20(j+1).
    let mut sorted = ys.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    for (j, chunk) in sorted.chunks(20).enumerate() {
        assert!(chunk.iter().all(|y| bins[j].contains(*y)));
    }
    assert_eq!(counts, vec![20; 5]);
}

#[test]
fn ties_at_a_cutpoint_go_to_the_lower_bin() {
    let cuts = quantile_cutpoints(&[1.0, 1.0, 1.0, 2.0], 2).unwrap();
    assert_eq!(cuts, vec![1.0]);
    let bins = bins_from_cutpoints(&cuts).unwrap();
    assert!(bins[0].contains(1.0) && bins[1].contains(2.0));
}

#[test]
fn mediator_binning() {
    let t = table(
        vec![vec![0.1, 0.1], vec![0.2, 0.2], vec![0.3, 0.1]],
        vec![vec![0.2, 0.2], vec![0.1, 0.1], vec![0.2, 0.2]],
    );
    let same = bin_mediator(&t, &[0, 1, 2], 0.0).unwrap();
    assert_eq!(same.table.arms(), t.arms());
    assert_eq!(same.nu_max, 0.0);
    let b = bin_mediator(&t, &[0, 1, 1], 0.1).unwrap();
    assert_eq!(b.table.k(), 2);
    assert!((b.table.mass(1, 1, 0) - 0.5).abs() < 1e-15);
    assert!((b.table.mass(0, 1, 1) - 0.3).abs() < 1e-15);
    assert!(matches!(bin_mediator(&t, &[0, 1], 0.0), Err(Error::Structural(_))));
}

#[test]
fn malformed_tables_are_rejected() {
    assert!(DistTable::ordinal([vec![vec![0.5, 0.4]], vec![vec![0.5, 0.5]]]).is_err());
    assert!(DistTable::ordinal([vec![vec![1.1, -0.1]], vec![vec![0.5, 0.5]]]).is_err());
    assert!(MediatorSupport::new(vec![vec![1.0], vec![0.0]], MediatorOrder::Total).is_err());
    assert!(MediatorSupport::new(vec![vec![1.0], vec![1.0]], MediatorOrder::Partial).is_err());
}
