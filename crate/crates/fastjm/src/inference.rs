//! Profiled-likelihood standard errors.
//!
//! The parametric component `Omega = (beta, vech(Sigma), sigma2, gamma_1..K,
//! nu_1..K)` gets its covariance from the inverse of the empirical Fisher
//! information `sum_i s_i s_i'`, where `s_i` is the gradient of the i-th
//! subject's profiled log-likelihood with the baseline hazards replaced by
//! their Breslow plug-in. The gamma and nu blocks carry an accumulation term
//! over all event times at or below the subject's observation time; those
//! sums are produced by the scan kernels, so the whole score matrix costs
//! O(n d) instead of O(n^3).
//!
//! The plug-in treats each subject's converged posterior as fixed: the
//! Breslow denominator `sum_r exp(gamma' x2_r) E{exp(nu' b_r)}` varies with
//! `(gamma, nu)` only through the explicit terms shown, with `E` evaluated
//! under the fitted posterior node weights. The finite-difference oracle in
//! the test suite pins this contract.

use nalgebra::{DMatrix, DVector};

use crate::em::{FitResult, KernelBackend};
use crate::error::{Error, Result};
use crate::linalg::{symmetrize, SpdChol};
use crate::model::{Dataset, ParameterSet};
use crate::naive;
use crate::scan::{
    prefix_event_accumulate, step_lookup_scan, suffix_riskset_sums, DescendingKnots, ScanStats,
};

/// Fixed ordering of the parametric component. `vech` walks the lower
/// triangle of Sigma row by row.
#[derive(Debug, Clone)]
pub struct OmegaLayout {
    p: usize,
    q: usize,
    p2: usize,
    k: usize,
    names: Vec<String>,
}

impl OmegaLayout {
    pub fn new(dataset: &Dataset) -> Self {
        let (p, q, p2, k) = (dataset.p(), dataset.q(), dataset.p2(), dataset.n_causes());
        let mut names = Vec::new();
        for j in 0..p {
            names.push(format!("beta[{}]", dataset.fixed_names[j]));
        }
        for r in 0..q {
            for c in 0..=r {
                names.push(format!("Sigma[{r},{c}]"));
            }
        }
        names.push("sigma2".into());
        for cause in 1..=k {
            for j in 0..p2 {
                names.push(format!("gamma{cause}[{}]", dataset.surv_names[j]));
            }
        }
        for cause in 1..=k {
            for j in 0..q {
                names.push(format!("nu{cause}[{}]", dataset.random_names[j]));
            }
        }
        OmegaLayout { p, q, p2, k, names }
    }

    pub fn dim(&self) -> usize {
        self.p + self.q * (self.q + 1) / 2 + 1 + self.k * (self.p2 + self.q)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn beta_range(&self) -> std::ops::Range<usize> {
        0..self.p
    }

    pub fn sigma2_index(&self) -> usize {
        self.p + self.q * (self.q + 1) / 2
    }

    pub fn gamma_offset(&self, cause: usize) -> usize {
        self.sigma2_index() + 1 + (cause - 1) * self.p2
    }

    pub fn nu_offset(&self, cause: usize) -> usize {
        self.sigma2_index() + 1 + self.k * self.p2 + (cause - 1) * self.q
    }

    pub fn pack(&self, params: &ParameterSet) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim());
        let mut ix = 0;
        for j in 0..self.p {
            v[ix] = params.beta[j];
            ix += 1;
        }
        for r in 0..self.q {
            for c in 0..=r {
                v[ix] = params.sigma_mat[(r, c)];
                ix += 1;
            }
        }
        v[ix] = params.sigma2;
        for (kix, cause) in params.causes.iter().enumerate() {
            let g0 = self.gamma_offset(kix + 1);
            for j in 0..self.p2 {
                v[g0 + j] = cause.gamma[j];
            }
            let n0 = self.nu_offset(kix + 1);
            for j in 0..self.q {
                v[n0 + j] = cause.nu[j];
            }
        }
        v
    }

    /// Rebuilds a parameter set from a packed vector, carrying the baselines
    /// over from the template.
    pub fn unpack(&self, omega: &DVector<f64>, template: &ParameterSet) -> ParameterSet {
        let mut params = template.clone();
        let mut ix = 0;
        for j in 0..self.p {
            params.beta[j] = omega[ix];
            ix += 1;
        }
        for r in 0..self.q {
            for c in 0..=r {
                params.sigma_mat[(r, c)] = omega[ix];
                params.sigma_mat[(c, r)] = omega[ix];
                ix += 1;
            }
        }
        params.sigma2 = omega[ix];
        for (kix, cause) in params.causes.iter_mut().enumerate() {
            let g0 = self.gamma_offset(kix + 1);
            for j in 0..self.p2 {
                cause.gamma[j] = omega[g0 + j];
            }
            let n0 = self.nu_offset(kix + 1);
            for j in 0..self.q {
                cause.nu[j] = omega[n0 + j];
            }
        }
        params
    }
}

/// Per-subject profiled scores: row i is the gradient of subject i's
/// profiled log-likelihood at the fitted parameters.
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    pub scores: DMatrix<f64>,
    pub layout: OmegaLayout,
    /// Instrumented operation counts (scan kernels plus row assembly).
    pub stats: ScanStats,
}

impl ScoreMatrix {
    /// Max-norm of the total score; near zero at an interior optimum.
    pub fn total_score_max_norm(&self) -> f64 {
        let d = self.scores.ncols();
        (0..d)
            .map(|j| self.scores.column(j).sum().abs())
            .fold(0.0, f64::max)
    }
}

/// The Breslow plug-in baseline recomputed from the fitted moments, plus the
/// per-knot sums the score rows need. All O(n + q_k) per cause.
struct CauseScanOutputs {
    /// Lambda*(T_i) per subject.
    cum_at_t: Vec<f64>,
    /// B_gamma(T_i) per subject (vector length p2).
    b_gamma: Vec<DVector<f64>>,
    /// B_nu(T_i) per subject (vector length q).
    b_nu: Vec<DVector<f64>>,
    /// Per-knot S1x/S0 and S1b/S0 ratios (indexed by knot).
    ratio_gamma: Vec<DVector<f64>>,
    ratio_nu: Vec<DVector<f64>>,
}

fn cause_scans(
    dataset: &Dataset,
    fit: &FitResult,
    cause_ix: usize,
    backend: KernelBackend,
    stats: &mut ScanStats,
) -> Result<CauseScanOutputs> {
    let n = dataset.n_subjects();
    let p2 = dataset.p2();
    let q = dataset.q();
    let k = cause_ix + 1;
    let knots = dataset.event_times(k);
    let mult = dataset.event_multiplicities(k);
    if knots.is_empty() {
        return Ok(CauseScanOutputs {
            cum_at_t: vec![0.0; n],
            b_gamma: vec![DVector::zeros(p2); n],
            b_nu: vec![DVector::zeros(q); n],
            ratio_gamma: Vec::new(),
            ratio_nu: Vec::new(),
        });
    }
    let gamma = &fit.params.causes[cause_ix].gamma;

    // Per-subject weights in rank order: w_r = exp(x2' gamma) Eexp_r,
    // wx_r = w_r x2_r, wb_r = exp(x2' gamma) Ebexp_r.
    let order = dataset.desc_order().index_map();
    let mut w_rank = Vec::with_capacity(n);
    let mut wx_rank = Vec::with_capacity(n);
    let mut wb_rank = Vec::with_capacity(n);
    for &i in order {
        let s = &dataset.subjects()[i];
        let cm = &fit.moments[i].causes[cause_ix];
        let e = s.surv_covariates.dot(gamma).exp();
        w_rank.push(e * cm.eexp);
        wx_rank.push(&s.surv_covariates * (e * cm.eexp));
        wb_rank.push(&cm.ebexp * e);
    }

    let times: Vec<f64> = dataset.subjects().iter().map(|s| s.obs_time).collect();
    let (s0, s1x, s1b) = match backend {
        KernelBackend::Scan => (
            suffix_riskset_sums(&w_rank, knots, dataset.desc_order(), 0.0, stats)?,
            suffix_riskset_sums(
                &wx_rank,
                knots,
                dataset.desc_order(),
                DVector::zeros(p2),
                stats,
            )?,
            suffix_riskset_sums(
                &wb_rank,
                knots,
                dataset.desc_order(),
                DVector::zeros(q),
                stats,
            )?,
        ),
        KernelBackend::Naive => (
            naive::naive_suffix_riskset_sums_generic(
                &unrank(dataset, &w_rank),
                &times,
                knots,
                0.0,
                stats,
            ),
            naive::naive_suffix_riskset_sums_generic(
                &unrank(dataset, &wx_rank),
                &times,
                knots,
                DVector::zeros(p2),
                stats,
            ),
            naive::naive_suffix_riskset_sums_generic(
                &unrank(dataset, &wb_rank),
                &times,
                knots,
                DVector::zeros(q),
                stats,
            ),
        ),
    };

    // Plug-in baseline jumps and the per-knot accumulation terms of the
    // score: b_kj = d_kj S1 / S0^2.
    let mut jumps = Vec::with_capacity(knots.len());
    let mut bkj_gamma = Vec::with_capacity(knots.len());
    let mut bkj_nu = Vec::with_capacity(knots.len());
    let mut ratio_gamma = Vec::with_capacity(knots.len());
    let mut ratio_nu = Vec::with_capacity(knots.len());
    for j in 0..knots.len() {
        if !(s0[j].is_finite() && s0[j] > 0.0) {
            return Err(Error::EmptyRiskSet {
                cause: k,
                knot: knots[j],
            });
        }
        jumps.push(mult[j] / s0[j]);
        bkj_gamma.push(&s1x[j] * (mult[j] / (s0[j] * s0[j])));
        bkj_nu.push(&s1b[j] * (mult[j] / (s0[j] * s0[j])));
        ratio_gamma.push(&s1x[j] / s0[j]);
        ratio_nu.push(&s1b[j] / s0[j]);
    }

    // Cumulative plug-in hazard at each subject's time, and the accumulated
    // score terms B(T_i).
    let mut cumulative = jumps.clone();
    for j in (0..cumulative.len().saturating_sub(1)).rev() {
        cumulative[j] += cumulative[j + 1];
    }
    let (cum_at_t, b_gamma, b_nu) = match backend {
        KernelBackend::Scan => {
            let knot_view = DescendingKnots::new(knots.to_vec(), cumulative)?;
            let cum_at_t = step_lookup_scan(&knot_view, dataset.desc_order(), 0.0, stats);
            let bg = prefix_event_accumulate(
                &DescendingKnots::new(knots.to_vec(), bkj_gamma)?,
                dataset.desc_order(),
                DVector::zeros(p2),
                stats,
            )?;
            let bn = prefix_event_accumulate(
                &DescendingKnots::new(knots.to_vec(), bkj_nu)?,
                dataset.desc_order(),
                DVector::zeros(q),
                stats,
            )?;
            (cum_at_t, bg, bn)
        }
        KernelBackend::Naive => {
            let cum_at_t =
                naive::naive_step_lookup_counted(knots, &cumulative, &times, 0.0, stats);
            let bg = naive::naive_prefix_event_accumulate(
                knots,
                &bkj_gamma,
                &times,
                DVector::zeros(p2),
                stats,
            );
            let bn = naive::naive_prefix_event_accumulate(
                knots,
                &bkj_nu,
                &times,
                DVector::zeros(q),
                stats,
            );
            (cum_at_t, bg, bn)
        }
    };

    Ok(CauseScanOutputs {
        cum_at_t,
        b_gamma,
        b_nu,
        ratio_gamma,
        ratio_nu,
    })
}

fn unrank<T: Clone>(dataset: &Dataset, ranked: &[T]) -> Vec<T> {
    let mut out: Vec<Option<T>> = vec![None; ranked.len()];
    for (rank, &ix) in dataset.desc_order().index_map().iter().enumerate() {
        out[ix] = Some(ranked[rank].clone());
    }
    out.into_iter().map(Option::unwrap).collect()
}

/// Per-subject score vectors of the profiled log-likelihood at the fit.
pub fn profiled_scores(dataset: &Dataset, fit: &FitResult) -> Result<ScoreMatrix> {
    profiled_scores_with_backend(dataset, fit, KernelBackend::Scan)
}

pub fn profiled_scores_with_backend(
    dataset: &Dataset,
    fit: &FitResult,
    backend: KernelBackend,
) -> Result<ScoreMatrix> {
    if !fit.converged {
        return Err(Error::NotConverged);
    }
    let layout = OmegaLayout::new(dataset);
    let n = dataset.n_subjects();
    let d = layout.dim();
    let (p, q, p2) = (dataset.p(), dataset.q(), dataset.p2());
    let n_causes = dataset.n_causes();
    let params = &fit.params;
    let mut stats = ScanStats::default();

    let per_cause: Vec<CauseScanOutputs> = (0..n_causes)
        .map(|kix| cause_scans(dataset, fit, kix, backend, &mut stats))
        .collect::<Result<Vec<_>>>()?;

    let sigma_chol = SpdChol::new(&params.sigma_mat, "Sigma")?;
    let sigma_inv = sigma_chol.inverse();

    let mut scores = DMatrix::zeros(n, d);
    for (i, s) in dataset.subjects().iter().enumerate() {
        let m = &fit.moments[i];

        // beta and sigma2 blocks from the longitudinal expectations.
        let mut sig2_score = 0.0;
        for o in &s.obs {
            let r = o.response - o.fixed_design.dot(&params.beta);
            let zeb = o.random_design.dot(&m.eb);
            for j in 0..p {
                scores[(i, j)] += o.fixed_design[j] * (r - zeb) / params.sigma2;
            }
            let zz = (o.random_design.transpose() * &m.ebb * &o.random_design)[(0, 0)];
            let e_sq = r * r - 2.0 * r * zeb + zz;
            sig2_score +=
                -0.5 / params.sigma2 + e_sq / (2.0 * params.sigma2 * params.sigma2);
        }
        scores[(i, layout.sigma2_index())] = sig2_score;

        // vech(Sigma) block: G = (Sigma^-1 Ebb Sigma^-1 - Sigma^-1)/2 with
        // off-diagonal entries doubled (each appears twice in Sigma).
        let g = 0.5 * (&sigma_inv * &m.ebb * &sigma_inv - &sigma_inv);
        let mut ix = p;
        for r in 0..q {
            for c in 0..=r {
                scores[(i, ix)] = if r == c { g[(r, c)] } else { 2.0 * g[(r, c)] };
                ix += 1;
            }
        }

        // gamma and nu blocks.
        for kix in 0..n_causes {
            let cause = &params.causes[kix];
            let cm = &m.causes[kix];
            let sc = &per_cause[kix];
            let e_lin = s.surv_covariates.dot(&cause.gamma).exp();
            let g0 = layout.gamma_offset(kix + 1);
            let n0 = layout.nu_offset(kix + 1);

            // Event terms: direct covariate minus the risk-set ratio at the
            // subject's own event time.
            if s.cause == kix + 1 {
                let j = dataset.event_knot_index(i).expect("event knot registered");
                for a in 0..p2 {
                    scores[(i, g0 + a)] += s.surv_covariates[a] - sc.ratio_gamma[j][a];
                }
                for dq in 0..q {
                    scores[(i, n0 + dq)] += m.eb[dq] - sc.ratio_nu[j][dq];
                }
            }
            // Cumulative terms: the accumulated plug-in derivative minus the
            // direct hazard exposure.
            let lam = sc.cum_at_t[i];
            for a in 0..p2 {
                scores[(i, g0 + a)] +=
                    e_lin * cm.eexp * sc.b_gamma[i][a] - lam * e_lin * cm.eexp * s.surv_covariates[a];
            }
            for dq in 0..q {
                scores[(i, n0 + dq)] +=
                    e_lin * cm.eexp * sc.b_nu[i][dq] - lam * e_lin * cm.ebexp[dq];
            }
        }
        stats.additions += d as u64;
    }

    Ok(ScoreMatrix {
        scores,
        layout,
        stats,
    })
}

/// Inverse empirical Fisher information `(sum_i s_i s_i')^{-1}`.
pub fn covariance(scores: &ScoreMatrix) -> Result<DMatrix<f64>> {
    let d = scores.scores.ncols();
    let mut info = DMatrix::zeros(d, d);
    for i in 0..scores.scores.nrows() {
        let row = scores.scores.row(i).transpose();
        info.syger(1.0, &row, &row, 1.0);
    }
    for r in 0..d {
        for c in 0..r {
            info[(c, r)] = info[(r, c)];
        }
    }
    let eig = info.clone().symmetric_eigen();
    let mut evs: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
    evs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let min = evs[0];
    let max = evs[evs.len() - 1];
    if !(min > 0.0) || max / min > 1e12 {
        return Err(Error::Singular {
            context: format!(
                "empirical Fisher information is ill conditioned (eigenvalues {:.3e} .. {:.3e})",
                min, max
            ),
        });
    }
    let chol = SpdChol::new(&info, "empirical Fisher information")?;
    Ok(symmetrize(&chol.inverse()))
}

/// Standard errors of the parametric component: square roots of the diagonal
/// of the inverse empirical Fisher information.
pub fn standard_errors(dataset: &Dataset, fit: &FitResult) -> Result<(OmegaLayout, DVector<f64>)> {
    let scores = profiled_scores(dataset, fit)?;
    let cov = covariance(&scores)?;
    let d = cov.nrows();
    let mut se = DVector::zeros(d);
    for j in 0..d {
        let v = cov[(j, j)];
        if v < 0.0 {
            return Err(Error::invalid(format!(
                "covariance diagonal entry {j} is negative: {v}"
            )));
        }
        se[j] = v.sqrt();
    }
    Ok((scores.layout, se))
}
