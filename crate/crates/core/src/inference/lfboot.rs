use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{check_alpha, MomentSystem, TestResult, MIN_DRAWS};
use crate::error::{Error, Result};
use crate::linprog::{dot, solve_lp, LinearProgram, LpStatus};

/// `max(0, min_ω max_j (C₂p̂ − C₁ω)_j / σ_j)` over the studentized rows, with
/// all other rows imposed as constraints on `ω`.
pub fn lf_statistic(system: &MomentSystem) -> Result<f64> {
    let sd = system.row_sd();
    let soft = system.soft_rows();
    if !soft.iter().any(|&s| s) {
        return Err(Error::Degenerate("every moment has zero estimated variance".into()));
    }
    let c2p = system.c2_times(&system.p_hat);
    let n_w = system.n_nuisance();
    let t = n_w;
    let mut lp = LinearProgram::new(n_w + 1);
    lp.free_all();
    for j in 0..system.k * system.k {
        if n_w > 0 {
            lp.set_bounds(j, 0.0, f64::INFINITY);
        }
    }
    let mut obj = vec![0.0; n_w + 1];
    obj[t] = 1.0;
    lp.objective = obj;
    for (j, row) in system.c1.iter().enumerate() {
        let mut a = vec![0.0; n_w + 1];
        a[..row.len()].copy_from_slice(row);
        if soft[j] {
            // (C₂p̂)_j − C₁_j ω ≤ σ_j t
            a.iter_mut().for_each(|v| *v = -*v);
            a[t] = -sd[j];
            lp.add_ub(a, -c2p[j]);
        } else {
            lp.add_ge(a, c2p[j]);
        }
    }
    let sol = solve_lp(&lp)?;
    match sol.status {
        LpStatus::Optimal => Ok(if sol.value < 1e-9 { 0.0 } else { sol.value }),
        LpStatus::Infeasible => {
            Err(Error::Degenerate("a moment with zero estimated variance is violated at the point estimate".into()))
        }
        LpStatus::Unbounded => Err(Error::Solver("least-favorable statistic LP is unbounded".into())),
    }
}

/// Replicate `b` uses `ChaCha8Rng::seed_from_u64(seed)` on stream `b + 1`.
pub(super) fn statistic_and_draws(system: &MomentSystem, draws: usize, seed: u64) -> Result<(f64, Vec<f64>)> {
    if draws < MIN_DRAWS {
        return Err(Error::Precondition(format!("need at least {MIN_DRAWS} bootstrap draws, got {draws}")));
    }
    let stat = lf_statistic(system)?;
    let sd = system.row_sd();
    let soft = system.soft_rows();
    let c2p = system.c2_times(&system.p_hat);
    let boot: Vec<f64> = (0..draws)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64 + 1);
            let p = system.redraw(&mut rng)?;
            let mut worst = 0.0_f64;
            for (j, c) in system.c2.iter().enumerate() {
                if soft[j] {
                    worst = worst.max((dot(c, &p) - c2p[j]) / sd[j]);
                }
            }
            Ok(worst)
        })
        .collect::<Result<_>>()?;
    let mut boot = boot;
    boot.sort_by(|a, b| a.total_cmp(b));
    Ok((stat, boot))
}

/// Order statistic `⌊(1 − α)B⌋ + 1` (1-based, capped at `B`) of sorted draws,
/// so that `stat > cv ⟺ #{T* ≥ stat} < αB`.
pub(super) fn critical_value(sorted: &[f64], alpha: f64) -> f64 {
    let b = sorted.len();
    let idx = (((1.0 - alpha) * b as f64).floor() as usize + 1).min(b);
    sorted[idx - 1]
}

/// Least-favorable bootstrap: every moment is recentered to bind, so draws
/// of `max_j C₂(p* − p̂)_j / σ_j` bound the null distribution of the statistic.
pub fn test_least_favorable_bootstrap(
    system: &MomentSystem,
    alpha: f64,
    draws: usize,
    seed: u64,
) -> Result<TestResult> {
    check_alpha(alpha)?;
    let (stat, boot) = statistic_and_draws(system, draws, seed)?;
    let cv = critical_value(&boot, alpha);
    let exceed = boot.iter().filter(|&&t| t >= stat).count();
    let mut notes = system.warnings.clone();
    notes.push("critical value from least-favorable recentering; may be conservative".into());
    Ok(TestResult {
        method: "lf-boot".into(),
        statistic: stat,
        critical_value: cv,
        p_value: exceed as f64 / draws as f64,
        reject: stat > cv,
        alpha,
        draws: Some(draws),
        seed: Some(seed),
        df: None,
        n_eff: system.n_eff,
        n_moments: system.soft_rows().iter().filter(|&&s| s).count(),
        nuisance_free: system.nuisance_free,
        restriction: system.restriction.clone(),
        relaxed_dbar: system.relaxed_dbar,
        notes,
    })
}
