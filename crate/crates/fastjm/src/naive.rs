//! Naive reference implementations of the scan kernels.
//!
//! These are the "before" versions: a per-query global search for step
//! lookups, per-knot risk-set refiltering for the sums, and a per-query
//! full knot loop for the event-time accumulation. They have identical
//! contracts to the kernels in [`crate::scan`] and deliberately quadratic
//! loop structure; they serve both as correctness oracles in the test
//! suites and as the baseline side of the benchmark harness.
//!
//! All functions take and return values in the original subject order. To
//! keep floating-point differences against the scan kernels at rounding
//! level, the refiltering loops visit subjects in descending-time order,
//! the same order in which the scan kernels accumulate.

use nalgebra::{DMatrix, DVector};

use crate::scan::{Accumulate, ScanStats};

/// Per-query global search through the knots (O(knots) per query).
pub fn naive_step_lookup<T: Accumulate>(
    knot_times: &[f64],
    payload: &[T],
    query_times: &[f64],
    zero: T,
) -> Vec<T> {
    query_times
        .iter()
        .map(|&t| {
            for (j, &kt) in knot_times.iter().enumerate() {
                if t >= kt {
                    return payload[j].clone();
                }
            }
            zero.clone()
        })
        .collect()
}

/// Instrumented variant used by the benchmark harness.
pub fn naive_step_lookup_counted<T: Accumulate>(
    knot_times: &[f64],
    payload: &[T],
    query_times: &[f64],
    zero: T,
    stats: &mut ScanStats,
) -> Vec<T> {
    query_times
        .iter()
        .map(|&t| {
            for (j, &kt) in knot_times.iter().enumerate() {
                stats.comparisons += 1;
                if t >= kt {
                    return payload[j].clone();
                }
            }
            zero.clone()
        })
        .collect()
}

/// Refilters the full subject list at every knot (O(n) per knot).
pub fn naive_suffix_riskset_sums_generic<T: Accumulate>(
    contributions: &[T],
    subject_times: &[f64],
    knot_times: &[f64],
    zero: T,
    stats: &mut ScanStats,
) -> Vec<T> {
    // Visit subjects in descending-time order for summation-order parity
    // with the scan kernel.
    let mut order: Vec<usize> = (0..subject_times.len()).collect();
    order.sort_by(|&a, &b| subject_times[b].partial_cmp(&subject_times[a]).unwrap());
    knot_times
        .iter()
        .map(|&kt| {
            let mut acc = zero.clone();
            for &i in &order {
                stats.comparisons += 1;
                if subject_times[i] >= kt {
                    acc.add_assign(&contributions[i]);
                    stats.additions += contributions[i].element_count() as u64;
                }
            }
            acc
        })
        .collect()
}

pub fn naive_suffix_riskset_sums(
    contributions: &[f64],
    subject_times: &[f64],
    knot_times: &[f64],
) -> Vec<f64> {
    let mut stats = ScanStats::default();
    naive_suffix_riskset_sums_generic(contributions, subject_times, knot_times, 0.0, &mut stats)
}

/// For each query, loops over every knot (O(knots) per query); with the
/// per-knot terms themselves recomputed by refiltering this becomes the
/// O(n^3) standard-error bottleneck.
pub fn naive_prefix_event_accumulate<T: Accumulate>(
    knot_times: &[f64],
    per_knot_terms: &[T],
    query_times: &[f64],
    zero: T,
    stats: &mut ScanStats,
) -> Vec<T> {
    query_times
        .iter()
        .map(|&t| {
            let mut acc = zero.clone();
            for (j, &kt) in knot_times.iter().enumerate() {
                stats.comparisons += 1;
                if kt <= t {
                    acc.add_assign(&per_knot_terms[j]);
                    stats.additions += per_knot_terms[j].element_count() as u64;
                }
            }
            acc
        })
        .collect()
}

/// Fully naive B(T_i) of the score accumulation: for every subject and every
/// knot at or below its observation time, the risk-set numerator and
/// denominator are refiltered from scratch. O(n^3)-shaped by construction.
#[allow(clippy::too_many_arguments)]
pub fn naive_score_accumulation(
    subject_times: &[f64],
    knot_times: &[f64],
    knot_multiplicities: &[f64],
    weights: &[f64],
    weighted_vectors: &[DVector<f64>],
    dim: usize,
    stats: &mut ScanStats,
) -> Vec<DVector<f64>> {
    let mut order: Vec<usize> = (0..subject_times.len()).collect();
    order.sort_by(|&a, &b| subject_times[b].partial_cmp(&subject_times[a]).unwrap());
    subject_times
        .iter()
        .map(|&t| {
            let mut acc = DVector::zeros(dim);
            for (j, &kt) in knot_times.iter().enumerate() {
                stats.comparisons += 1;
                if kt <= t {
                    let mut denom = 0.0;
                    let mut numer = DVector::zeros(dim);
                    for &r in &order {
                        stats.comparisons += 1;
                        if subject_times[r] >= kt {
                            denom += weights[r];
                            numer += &weighted_vectors[r];
                            stats.additions += 1 + dim as u64;
                        }
                    }
                    acc += numer * (knot_multiplicities[j] / (denom * denom));
                    stats.additions += dim as u64;
                }
            }
            acc
        })
        .collect()
}

/// Empirical Bayes extraction without the Remark-1 cache: the population
/// sum `A = sum_l X_l' V_l^{-1} X_l` is recomputed from scratch inside every
/// subject's assembly, making the whole pass O(n^2).
pub fn naive_empirical_bayes(
    dataset: &crate::model::Dataset,
    fit: &crate::lmm::LmmFit,
) -> crate::error::Result<crate::lmm::EBayesState> {
    use crate::linalg::{symmetrize, SpdChol};
    use crate::lmm::{EBayesState, SubjectEb};

    let p = dataset.p();
    let q = dataset.q();
    let stacked: Vec<Option<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)>> = dataset
        .subjects()
        .iter()
        .map(|s| {
            if s.obs.is_empty() {
                return None;
            }
            let n_i = s.obs.len();
            let mut x = DMatrix::zeros(n_i, p);
            let mut z = DMatrix::zeros(n_i, q);
            let mut y = DVector::zeros(n_i);
            for (j, o) in s.obs.iter().enumerate() {
                x.row_mut(j).copy_from(&o.fixed_design.transpose());
                z.row_mut(j).copy_from(&o.random_design.transpose());
                y[j] = o.response;
            }
            Some((x, z, y))
        })
        .collect();

    let prior_sqrt = SpdChol::new(&fit.sigma_hat, "Sigma_hat")?.lower();
    let mut fixed_info = DMatrix::zeros(p, p);
    let mut subjects = Vec::with_capacity(stacked.len());
    for d in &stacked {
        let Some((x, z, y)) = d else {
            subjects.push(SubjectEb {
                b_tilde: DVector::zeros(q),
                h_inv: fit.sigma_hat.clone(),
                h_inv_sqrt: prior_sqrt.clone(),
            });
            continue;
        };
        // Recompute the global sum for this subject (deliberately O(n)).
        let mut a = DMatrix::zeros(p, p);
        for dl in stacked.iter().flatten() {
            let (xl, zl, yl) = dl;
            let n_l = yl.len();
            let v = zl * &fit.sigma_hat * zl.transpose()
                + DMatrix::identity(n_l, n_l) * fit.sigma2_hat;
            let chol = SpdChol::new(&v, "V_l")?;
            a += xl.transpose() * chol.solve_matrix(xl);
        }
        let a_chol = SpdChol::new(&a, "A")?;
        fixed_info = a.clone();

        let n_i = y.len();
        let v = z * &fit.sigma_hat * z.transpose() + DMatrix::identity(n_i, n_i) * fit.sigma2_hat;
        let v_chol = SpdChol::new(&v, "V_i")?;
        let r = y - x * &fit.beta_hat;
        let b_tilde = &fit.sigma_hat * (z.transpose() * v_chol.solve(&r));
        let v_inv_z = v_chol.solve_matrix(z);
        let zt_vinv_z = z.transpose() * &v_inv_z;
        let xt_vinv_z = x.transpose() * &v_inv_z;
        let corr = xt_vinv_z.transpose() * a_chol.solve_matrix(&xt_vinv_z);
        let h_inv = symmetrize(&(&fit.sigma_hat - &fit.sigma_hat * (zt_vinv_z - corr) * &fit.sigma_hat));
        let h_inv_sqrt = SpdChol::new(&h_inv, "H^-1")?.lower();
        subjects.push(SubjectEb {
            b_tilde,
            h_inv,
            h_inv_sqrt,
        });
    }
    Ok(EBayesState {
        subjects,
        fixed_info,
    })
}

/// Matrix-payload refilter used by the naive M-step Hessian assembly.
pub fn naive_riskset_matrix_sums(
    contributions: &[DMatrix<f64>],
    subject_times: &[f64],
    knot_times: &[f64],
    dim_r: usize,
    dim_c: usize,
    stats: &mut ScanStats,
) -> Vec<DMatrix<f64>> {
    naive_suffix_riskset_sums_generic(
        contributions,
        subject_times,
        knot_times,
        DMatrix::zeros(dim_r, dim_c),
        stats,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn naive_suffix_sum_comparison_count_grows_quadratically() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut count = |n: usize| {
            let times: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..50.0)).collect();
            let mut knots: Vec<f64> = (0..n / 2).map(|_| rng.gen_range(0.0..50.0)).collect();
            knots.sort_by(|a, b| b.partial_cmp(a).unwrap());
            knots.dedup();
            let ones = vec![1.0; n];
            let mut stats = ScanStats::default();
            naive_suffix_riskset_sums_generic(&ones, &times, &knots, 0.0, &mut stats);
            stats.total()
        };
        let c500 = count(500);
        let c1000 = count(1000);
        assert!(
            c1000 as f64 / c500 as f64 >= 3.5,
            "expected quadratic growth, got {c500} -> {c1000}"
        );
    }
}
