//! Standalone linear mixed model fit and empirical Bayes extraction.
//!
//! The joint-model EM is initialized from a plain LMM fit of the
//! longitudinal submodel, and the pseudo-adaptive quadrature recenters its
//! nodes at the empirical Bayes estimates `b_tilde_i` with spread
//! `H_i^{-1/2}`. Each `H_i^{-1}` involves the population sum
//! `A = sum_i X_i' V_i^{-1} X_i`; computing that sum once and reusing it
//! across subjects keeps the whole extraction at O(n) matrix assemblies
//! instead of O(n^2).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, SpdChol};
use crate::model::Dataset;

const LOG_2PI: f64 = 1.8378770664093453;

/// Maximum-likelihood estimates of the longitudinal submodel.
#[derive(Debug, Clone)]
pub struct LmmFit {
    pub beta_hat: DVector<f64>,
    pub sigma2_hat: f64,
    pub sigma_hat: DMatrix<f64>,
    pub loglik: f64,
    pub iterations: usize,
}

/// Empirical Bayes estimate of one subject's random effects: posterior mode
/// and a square root of its covariance, used to place quadrature nodes.
#[derive(Debug, Clone)]
pub struct SubjectEb {
    pub b_tilde: DVector<f64>,
    pub h_inv: DMatrix<f64>,
    /// Lower-triangular factor with `h_inv_sqrt * h_inv_sqrt' = h_inv`.
    pub h_inv_sqrt: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct EBayesState {
    pub subjects: Vec<SubjectEb>,
    /// The cached population sum `A = sum_i X_i' V_i^{-1} X_i`.
    pub fixed_info: DMatrix<f64>,
}

/// Stacked per-subject design (rows = visits).
struct SubjectDesign {
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    y: DVector<f64>,
}

fn stack_designs(dataset: &Dataset) -> Vec<Option<SubjectDesign>> {
    dataset
        .subjects()
        .iter()
        .map(|s| {
            if s.obs.is_empty() {
                return None;
            }
            let n_i = s.obs.len();
            let mut x = DMatrix::zeros(n_i, dataset.p());
            let mut z = DMatrix::zeros(n_i, dataset.q());
            let mut y = DVector::zeros(n_i);
            for (j, o) in s.obs.iter().enumerate() {
                x.row_mut(j).copy_from(&o.fixed_design.transpose());
                z.row_mut(j).copy_from(&o.random_design.transpose());
                y[j] = o.response;
            }
            Some(SubjectDesign { x, z, y })
        })
        .collect()
}

/// Pooled Gram matrix with a collinearity diagnostic that names the
/// offending columns.
fn pooled_gram(dataset: &Dataset, designs: &[Option<SubjectDesign>]) -> Result<SpdChol> {
    let p = dataset.p();
    let mut gram = DMatrix::zeros(p, p);
    for d in designs.iter().flatten() {
        gram += d.x.transpose() * &d.x;
    }
    match SpdChol::new(&gram, "pooled fixed-effect design") {
        Ok(c) => Ok(c),
        Err(_) => {
            let eig = gram.symmetric_eigen();
            let (mut min_ix, mut min_val) = (0, f64::INFINITY);
            for (i, &v) in eig.eigenvalues.iter().enumerate() {
                if v < min_val {
                    min_val = v;
                    min_ix = i;
                }
            }
            let null = eig.eigenvectors.column(min_ix);
            let mut cols: Vec<&str> = Vec::new();
            for (j, &v) in null.iter().enumerate() {
                if v.abs() > 0.3 {
                    cols.push(&dataset.fixed_names[j]);
                }
            }
            Err(Error::Singular {
                context: format!(
                    "pooled fixed-effect design is rank deficient; collinear columns: {}",
                    cols.join(", ")
                ),
            })
        }
    }
}

fn marginal_loglik(
    designs: &[Option<SubjectDesign>],
    beta: &DVector<f64>,
    sigma2: f64,
    sigma_mat: &DMatrix<f64>,
) -> Result<f64> {
    let mut ll = 0.0;
    for d in designs.iter().flatten() {
        let n_i = d.y.len();
        let v = &d.z * sigma_mat * d.z.transpose() + DMatrix::identity(n_i, n_i) * sigma2;
        let chol = SpdChol::new(&v, "marginal covariance V_i")?;
        let r = &d.y - &d.x * beta;
        ll += -0.5 * (n_i as f64 * LOG_2PI + chol.log_det() + chol.inv_quadratic(&r));
    }
    Ok(ll)
}

/// Fits the linear mixed model by EM with closed-form updates from the
/// conjugate posterior moments of the random effects, ignoring the survival
/// outcome. Initialization accuracy only needs to place quadrature nodes
/// well, so the default tolerance is modest.
pub fn fit_lmm(dataset: &Dataset, tol: f64, max_iter: usize) -> Result<LmmFit> {
    let designs = stack_designs(dataset);
    let n_used = designs.iter().flatten().count();
    if n_used == 0 {
        return Err(Error::validation(
            "cannot fit the longitudinal submodel: no subject has longitudinal data",
        ));
    }
    let total_obs: usize = designs.iter().flatten().map(|d| d.y.len()).sum();
    let q = dataset.q();
    let gram = pooled_gram(dataset, &designs)?;

    // OLS start.
    let mut xty = DVector::zeros(dataset.p());
    for d in designs.iter().flatten() {
        xty += d.x.transpose() * &d.y;
    }
    let mut beta = gram.solve(&xty);
    let mut sse = 0.0;
    for d in designs.iter().flatten() {
        sse += (&d.y - &d.x * &beta).norm_squared();
    }
    let mut sigma2 = (sse / total_obs as f64).max(1e-8);
    let mut sigma_mat = DMatrix::identity(q, q) * sigma2.max(0.1);

    let mut loglik = marginal_loglik(&designs, &beta, sigma2, &sigma_mat)?;
    let mut iterations = 0;
    for it in 1..=max_iter {
        iterations = it;
        let sigma_inv = SpdChol::new(&sigma_mat, "Sigma")?.inverse();

        // E-step: conjugate posterior moments per subject.
        let mut rhs = DVector::zeros(dataset.p());
        let mut means = Vec::with_capacity(designs.len());
        let mut covs = Vec::with_capacity(designs.len());
        for d in designs.iter().flatten() {
            let h = d.z.transpose() * &d.z / sigma2 + &sigma_inv;
            let h_chol = SpdChol::new(&h, "posterior precision")?;
            let r = &d.y - &d.x * &beta;
            let m = h_chol.solve(&(d.z.transpose() * &r / sigma2));
            rhs += d.x.transpose() * (&d.y - &d.z * &m);
            covs.push(h_chol.inverse());
            means.push(m);
        }

        // M-step.
        let beta_new = gram.solve(&rhs);
        let mut rss = 0.0;
        let mut ebb_sum = DMatrix::zeros(q, q);
        for (d, (m, c)) in designs
            .iter()
            .flatten()
            .zip(means.iter().zip(covs.iter()))
        {
            let r = &d.y - &d.x * &beta_new - &d.z * m;
            rss += r.norm_squared() + (&d.z * c * d.z.transpose()).trace();
            ebb_sum += c + m * m.transpose();
        }
        let sigma2_new = rss / total_obs as f64;
        let sigma_new = symmetrize(&(ebb_sum / n_used as f64));

        let mut delta: f64 = 0.0;
        for (new, old) in beta_new.iter().zip(beta.iter()) {
            delta = delta.max((new - old).abs() / (old.abs() + 1e-3));
        }
        delta = delta.max((sigma2_new - sigma2).abs() / (sigma2.abs() + 1e-3));
        for (new, old) in sigma_new.iter().zip(sigma_mat.iter()) {
            delta = delta.max((new - old).abs() / (old.abs() + 1e-3));
        }

        beta = beta_new;
        sigma2 = sigma2_new;
        sigma_mat = sigma_new;
        // Guard against collapse to an exactly singular Sigma at the
        // boundary; the fit is still reported, just kept factorizable.
        for dgi in 0..q {
            if sigma_mat[(dgi, dgi)] < 1e-10 {
                sigma_mat[(dgi, dgi)] = 1e-10;
            }
        }

        let ll_new = marginal_loglik(&designs, &beta, sigma2, &sigma_mat)?;
        debug_assert!(
            ll_new >= loglik - 1e-8 * loglik.abs().max(1.0),
            "LMM EM log-likelihood decreased: {loglik} -> {ll_new}"
        );
        loglik = ll_new;
        if delta < tol {
            break;
        }
    }

    Ok(LmmFit {
        beta_hat: beta,
        sigma2_hat: sigma2,
        sigma_hat: sigma_mat,
        loglik,
        iterations,
    })
}

/// Empirical Bayes estimates and covariance square roots for all subjects.
///
/// Two passes: the first accumulates the shared sum
/// `A = sum_i X_i' V_i^{-1} X_i`, the second assembles each subject's
/// `b_tilde_i` and `H_i^{-1}` from the cached value. No per-subject step
/// revisits other subjects. Subjects without longitudinal data get the
/// prior: `b_tilde = 0`, `H^{-1} = Sigma_hat`.
pub fn empirical_bayes_all(dataset: &Dataset, fit: &LmmFit) -> Result<EBayesState> {
    let designs = stack_designs(dataset);
    let p = dataset.p();
    let q = dataset.q();

    // Pass 1: accumulate A in subject order.
    let mut fixed_info = DMatrix::zeros(p, p);
    let mut v_chols: Vec<Option<SpdChol>> = Vec::with_capacity(designs.len());
    for (i, d) in designs.iter().enumerate() {
        match d {
            None => v_chols.push(None),
            Some(d) => {
                let n_i = d.y.len();
                let v = &d.z * &fit.sigma_hat * d.z.transpose()
                    + DMatrix::identity(n_i, n_i) * fit.sigma2_hat;
                let chol = SpdChol::new(&v, &format!(
                    "marginal covariance V for subject `{}`",
                    dataset.subjects()[i].id
                ))?;
                fixed_info += d.x.transpose() * chol.solve_matrix(&d.x);
                v_chols.push(Some(chol));
            }
        }
    }
    let a_chol = SpdChol::new(&fixed_info, "cached fixed-information sum A")?;

    // Pass 2: per-subject assembly using the cached A.
    let prior_sqrt = SpdChol::new(&fit.sigma_hat, "Sigma_hat")?.lower();
    let mut subjects = Vec::with_capacity(designs.len());
    for (d, chol) in designs.iter().zip(&v_chols) {
        match (d, chol) {
            (Some(d), Some(v_chol)) => {
                let r = &d.y - &d.x * &fit.beta_hat;
                let v_inv_r = v_chol.solve(&r);
                let v_inv_z = v_chol.solve_matrix(&d.z);
                let b_tilde = &fit.sigma_hat * (d.z.transpose() * v_inv_r);
                // V^{-1} - V^{-1} X A^{-1} X' V^{-1}, applied to Z on both sides.
                let zt_vinv_z = d.z.transpose() * &v_inv_z;
                let xt_vinv_z = d.x.transpose() * &v_inv_z;
                let corr = xt_vinv_z.transpose() * a_chol.solve_matrix(&xt_vinv_z);
                let middle = zt_vinv_z - corr;
                let h_inv =
                    symmetrize(&(&fit.sigma_hat - &fit.sigma_hat * middle * &fit.sigma_hat));
                let h_inv_sqrt = SpdChol::new(&h_inv, "empirical Bayes covariance")?.lower();
                subjects.push(SubjectEb {
                    b_tilde,
                    h_inv,
                    h_inv_sqrt,
                });
            }
            _ => subjects.push(SubjectEb {
                b_tilde: DVector::zeros(q),
                h_inv: fit.sigma_hat.clone(),
                h_inv_sqrt: prior_sqrt.clone(),
            }),
        }
    }

    Ok(EBayesState {
        subjects,
        fixed_info,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LongitudinalObs, Subject};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn lmm_dataset(
        rng: &mut ChaCha12Rng,
        n: usize,
        visits: usize,
        beta: &[f64],
        sigma2: f64,
        sigma_diag: &[f64],
    ) -> Dataset {
        let q = sigma_diag.len();
        let subjects: Vec<Subject> = (0..n)
            .map(|i| {
                let b: Vec<f64> = sigma_diag
                    .iter()
                    .map(|&s| rng.sample::<f64, _>(StandardNormal) * s.sqrt())
                    .collect();
                let x2 = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
                let obs = (0..visits)
                    .map(|j| {
                        let t = j as f64;
                        let fixed = DVector::from_row_slice(&[1.0, t, x2]);
                        let random = DVector::from_fn(q, |d, _| if d == 0 { 1.0 } else { t });
                        let mean = fixed.dot(&DVector::from_row_slice(beta))
                            + random.dot(&DVector::from_row_slice(&b));
                        let y = mean + rng.sample::<f64, _>(StandardNormal) * sigma2.sqrt();
                        LongitudinalObs::new(t, y, fixed, random).unwrap()
                    })
                    .collect();
                Subject {
                    id: format!("s{i}"),
                    obs,
                    surv_covariates: DVector::zeros(1),
                    obs_time: visits as f64,
                    cause: 0,
                }
            })
            .collect();
        Dataset::new(subjects, 1, 3, q, 1).unwrap()
    }

    #[test]
    fn degenerate_random_effect_recovers_ols() {
        // Data generated with b == 0: Sigma_hat collapses toward the
        // boundary and beta_hat matches ordinary least squares.
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let ds = lmm_dataset(&mut rng, 120, 4, &[2.0, -0.5, 1.0], 0.25, &[0.0]);
        let fit = fit_lmm(&ds, 1e-8, 500).unwrap();

        let mut gram = DMatrix::zeros(3, 3);
        let mut xty = DVector::zeros(3);
        for s in ds.subjects() {
            for o in &s.obs {
                gram += &o.fixed_design * o.fixed_design.transpose();
                xty += &o.fixed_design * o.response;
            }
        }
        let ols = gram.try_inverse().unwrap() * xty;
        assert!(
            (fit.beta_hat.clone() - &ols).norm() < 1e-6,
            "beta {} vs OLS {}",
            fit.beta_hat,
            ols
        );
        assert!(fit.sigma_hat.norm() < 1e-2, "Sigma {}", fit.sigma_hat);
    }

    #[test]
    fn loglik_at_convergence_dominates_truth() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let beta = [1.0, 0.5, -1.0];
        let ds = lmm_dataset(&mut rng, 50, 5, &beta, 0.5, &[0.5, 0.25]);
        let fit = fit_lmm(&ds, 1e-7, 500).unwrap();
        let designs = stack_designs(&ds);
        let truth_ll = marginal_loglik(
            &designs,
            &DVector::from_row_slice(&beta),
            0.5,
            &DMatrix::from_partial_diagonal(2, 2, &[0.5, 0.25]),
        )
        .unwrap();
        assert!(
            fit.loglik >= truth_ll,
            "fitted {} < truth {}",
            fit.loglik,
            truth_ll
        );
    }

    #[test]
    fn empty_subject_gets_prior() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut ds = lmm_dataset(&mut rng, 30, 4, &[1.0, 0.2, 0.4], 0.5, &[0.4, 0.2]);
        let mut subjects = ds.subjects().to_vec();
        subjects.push(Subject {
            id: "empty".into(),
            obs: vec![],
            surv_covariates: DVector::zeros(1),
            obs_time: 1.0,
            cause: 0,
        });
        ds = Dataset::new(subjects, 1, 3, 2, 1).unwrap();
        let fit = fit_lmm(&ds, 1e-6, 200).unwrap();
        let eb = empirical_bayes_all(&ds, &fit).unwrap();
        let last = eb.subjects.last().unwrap();
        assert_eq!(last.b_tilde, DVector::zeros(2));
        assert_eq!(last.h_inv, fit.sigma_hat);
    }

    #[test]
    fn scalar_single_observation_conjugate_formula() {
        // q = 1, one observation with x = z = 1:
        // b_tilde = Sigma (y - beta) / (Sigma + sigma2).
        let subject = Subject {
            id: "a".into(),
            obs: vec![LongitudinalObs::new(
                0.0,
                2.0,
                DVector::from_row_slice(&[1.0]),
                DVector::from_row_slice(&[1.0]),
            )
            .unwrap()],
            surv_covariates: DVector::zeros(1),
            obs_time: 1.0,
            cause: 0,
        };
        let ds = Dataset::new(vec![subject], 1, 1, 1, 1).unwrap();
        let fit = LmmFit {
            beta_hat: DVector::from_row_slice(&[0.5]),
            sigma2_hat: 0.3,
            sigma_hat: DMatrix::from_row_slice(1, 1, &[0.7]),
            loglik: 0.0,
            iterations: 0,
        };
        let eb = empirical_bayes_all(&ds, &fit).unwrap();
        let want = 0.7 * (2.0 - 0.5) / (0.7 + 0.3);
        assert_relative_eq!(eb.subjects[0].b_tilde[0], want, epsilon = 1e-12);
    }

    #[test]
    fn cached_sum_matches_naive_recomputation() {
        // The naive oracle recomputes A inside every subject's assembly.
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let ds = lmm_dataset(&mut rng, 200, 4, &[1.0, 0.3, -0.2], 0.4, &[0.5, 0.25]);
        let fit = fit_lmm(&ds, 1e-6, 200).unwrap();
        let eb = empirical_bayes_all(&ds, &fit).unwrap();
        let naive = crate::naive::naive_empirical_bayes(&ds, &fit).unwrap();
        for (i, (a, b)) in eb.subjects.iter().zip(naive.subjects.iter()).enumerate() {
            let db = (a.b_tilde.clone() - &b.b_tilde).norm();
            let dh = (a.h_inv.clone() - &b.h_inv).norm();
            assert!(
                db <= 1e-12 * b.b_tilde.norm().max(1.0),
                "subject {i}: b_tilde differs by {db}"
            );
            assert!(
                dh <= 1e-12 * b.h_inv.norm().max(1.0),
                "subject {i}: H^-1 differs by {dh}"
            );
        }
    }

    #[test]
    fn h_inv_is_spd_and_sqrt_reproduces_it() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let ds = lmm_dataset(&mut rng, 100, 3, &[1.0, 0.3, -0.2], 0.4, &[0.5, 0.25]);
        let fit = fit_lmm(&ds, 1e-6, 200).unwrap();
        let eb = empirical_bayes_all(&ds, &fit).unwrap();
        for s in &eb.subjects {
            let rebuilt = &s.h_inv_sqrt * s.h_inv_sqrt.transpose();
            let rel = (rebuilt - &s.h_inv).norm() / s.h_inv.norm();
            assert!(rel <= 1e-10, "sqrt mismatch {rel}");
            assert!(SpdChol::new(&s.h_inv, "H^-1").is_ok());
        }
    }

    #[test]
    fn rank_deficient_design_names_columns() {
        // Duplicate the time column into x2 so columns 1 and 2 are collinear.
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let subjects: Vec<Subject> = (0..20)
            .map(|i| {
                let obs = (0..3)
                    .map(|j| {
                        let t = j as f64;
                        LongitudinalObs::new(
                            t,
                            rng.gen_range(-1.0..1.0),
                            DVector::from_row_slice(&[1.0, t, t]),
                            DVector::from_row_slice(&[1.0]),
                        )
                        .unwrap()
                    })
                    .collect();
                Subject {
                    id: format!("s{i}"),
                    obs,
                    surv_covariates: DVector::zeros(1),
                    obs_time: 3.0,
                    cause: 0,
                }
            })
            .collect();
        let ds = Dataset::new(subjects, 1, 3, 1, 1).unwrap();
        let err = fit_lmm(&ds, 1e-6, 100).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("beta_1") || msg.contains("beta_2"), "{msg}");
    }

    #[test]
    fn no_longitudinal_data_is_an_error() {
        let subjects = vec![Subject {
            id: "a".into(),
            obs: vec![],
            surv_covariates: DVector::zeros(1),
            obs_time: 1.0,
            cause: 0,
        }];
        let ds = Dataset::new(subjects, 1, 1, 1, 1).unwrap();
        assert!(fit_lmm(&ds, 1e-6, 10).is_err());
    }
}
