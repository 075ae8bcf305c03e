//! The EM loop: quadrature E-step with linear-scan hazard lookup, closed-form
//! M-step updates for the regression, variance and baseline parameters, and a
//! guarded one-step Newton update for the survival coefficients.
//!
//! Every risk-set aggregation goes through the scan kernels (or, when the
//! naive backend is selected for oracle comparisons, through the reference
//! refiltering loops). Reductions across subjects are always combined in
//! subject order, so results are bitwise reproducible regardless of the
//! worker count.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, SpdChol};
use crate::lmm::{empirical_bayes_all, fit_lmm, EBayesState, LmmFit};
use crate::model::{BaselineHazard, CauseParams, Dataset, ParameterSet};
use crate::naive;
use crate::quadrature::{
    gh_rule, moments_from_weights, posterior_weights_ctx, subject_nodes, tensor_grid, NodeSet,
    NodeTransform, QuadratureGrid, SubjectEval, SubjectMoments,
};
use crate::scan::{step_lookup_scan, suffix_riskset_sums, DescendingKnots, ScanStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadMode {
    Standard,
    PseudoAdaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceMetric {
    RelativeParamChange,
    LoglikChange,
}

/// Which risk-set machinery drives the fit. `Naive` exists for the
/// cross-backend equivalence checks and the benchmark harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelBackend {
    Scan,
    Naive,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmConfig {
    pub quad_mode: QuadMode,
    pub n_q: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub metric: ConvergenceMetric,
    #[serde(default = "default_backend")]
    pub backend: KernelBackend,
}

fn default_backend() -> KernelBackend {
    KernelBackend::Scan
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            quad_mode: QuadMode::PseudoAdaptive,
            n_q: 6,
            tol: 1e-4,
            max_iter: 300,
            metric: ConvergenceMetric::RelativeParamChange,
            backend: KernelBackend::Scan,
        }
    }
}

impl EmConfig {
    pub fn standard() -> Self {
        EmConfig {
            quad_mode: QuadMode::Standard,
            n_q: 20,
            ..EmConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tol must be positive"));
        }
        if self.max_iter < 1 {
            return Err(Error::invalid("max_iter must be >= 1"));
        }
        Ok(())
    }
}

/// Evaluation points for the E-step: shared across subjects in standard mode
/// (rebuilt from the current Sigma each iteration), fixed per subject in
/// pseudo-adaptive mode.
#[derive(Debug, Clone)]
pub enum NodeCache {
    Shared(NodeSet),
    PerSubject(Vec<NodeSet>),
}

impl NodeCache {
    pub fn for_subject(&self, i: usize) -> &NodeSet {
        match self {
            NodeCache::Shared(ns) => ns,
            NodeCache::PerSubject(v) => &v[i],
        }
    }
}

/// E-step output: per-subject moments, the observed log-likelihood, and the
/// normalized posterior node weights (kept so expected complete-data
/// objectives can be evaluated at trial parameters).
pub struct EStep {
    pub moments: Vec<SubjectMoments>,
    pub observed_loglik: f64,
    pub weights: Vec<Vec<f64>>,
}

/// Cumulative baseline hazards at every subject's observation time, one
/// lookup scan per cause per iteration.
pub fn cum_hazards_at_observation_times(
    dataset: &Dataset,
    params: &ParameterSet,
    backend: KernelBackend,
    stats: &mut ScanStats,
) -> Result<Vec<Vec<f64>>> {
    let n = dataset.n_subjects();
    let k = params.n_causes();
    let mut out = vec![vec![0.0; k]; n];
    for (ki, cause) in params.causes.iter().enumerate() {
        let values: Vec<f64> = match backend {
            KernelBackend::Scan => {
                let knots = DescendingKnots::new(
                    cause.baseline.knots().to_vec(),
                    cause.baseline.cumulative().to_vec(),
                )?;
                step_lookup_scan(&knots, dataset.desc_order(), 0.0, stats)
            }
            KernelBackend::Naive => {
                let times: Vec<f64> = dataset.subjects().iter().map(|s| s.obs_time).collect();
                naive::naive_step_lookup_counted(
                    cause.baseline.knots(),
                    cause.baseline.cumulative(),
                    &times,
                    0.0,
                    stats,
                )
            }
        };
        for (i, v) in values.into_iter().enumerate() {
            out[i][ki] = v;
        }
    }
    Ok(out)
}

/// One E-step at the given parameters.
pub fn e_step(
    dataset: &Dataset,
    params: &ParameterSet,
    grid: &QuadratureGrid,
    nodes: &NodeCache,
    backend: KernelBackend,
) -> Result<EStep> {
    let mut stats = ScanStats::default();
    let cum = cum_hazards_at_observation_times(dataset, params, backend, &mut stats)?;
    let sigma_chol = SpdChol::new(&params.sigma_mat, "Sigma")?;
    let nus: Vec<&DVector<f64>> = params.causes.iter().map(|c| &c.nu).collect();

    let results: Result<Vec<(SubjectMoments, Vec<f64>)>> = dataset
        .subjects()
        .par_iter()
        .enumerate()
        .map(|(i, subject)| {
            let eval = SubjectEval::new(subject, params, &cum[i], &sigma_chol)?;
            let node_set = nodes.for_subject(i);
            let w = posterior_weights_ctx(&eval, node_set, grid, &subject.id)?;
            let m = moments_from_weights(&w, node_set, &nus);
            Ok((m, w.weights))
        })
        .collect();
    let results = results?;

    let mut moments = Vec::with_capacity(results.len());
    let mut weights = Vec::with_capacity(results.len());
    let mut observed_loglik = 0.0;
    for (m, w) in results {
        observed_loglik += m.marginal_loglik;
        moments.push(m);
        weights.push(w);
    }
    Ok(EStep {
        moments,
        observed_loglik,
        weights,
    })
}

/// Closed-form update of the fixed effects and error variance from the
/// posterior moments. The variance uses the freshly updated beta.
pub fn m_step_regression(
    dataset: &Dataset,
    moments: &[SubjectMoments],
) -> Result<(DVector<f64>, f64)> {
    let p = dataset.p();
    let mut gram = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    let mut n_obs = 0usize;
    for (s, m) in dataset.subjects().iter().zip(moments) {
        for o in &s.obs {
            gram.syger(1.0, &o.fixed_design, &o.fixed_design, 1.0);
            rhs.axpy(o.response - o.random_design.dot(&m.eb), &o.fixed_design, 1.0);
            n_obs += 1;
        }
    }
    for r in 0..p {
        for c in 0..r {
            gram[(c, r)] = gram[(r, c)];
        }
    }
    let chol = SpdChol::new(&gram, "pooled fixed-effect normal equations").map_err(|_| {
        Error::Singular {
            context: "singular normal equations in the regression update".into(),
        }
    })?;
    let beta = chol.solve(&rhs);

    let mut rss = 0.0;
    for (s, m) in dataset.subjects().iter().zip(moments) {
        for o in &s.obs {
            let r = o.response - o.fixed_design.dot(&beta);
            let zeb = o.random_design.dot(&m.eb);
            let zebbz = (o.random_design.transpose() * &m.ebb * &o.random_design)[(0, 0)];
            rss += r * r - 2.0 * r * zeb + zebbz;
        }
    }
    let sigma2 = rss / n_obs as f64;
    if !(sigma2 > 0.0) {
        return Err(Error::invalid(format!(
            "error-variance update is not positive: {sigma2}"
        )));
    }
    Ok((beta, sigma2))
}

/// Closed-form update of the random-effect covariance.
pub fn m_step_sigma(moments: &[SubjectMoments]) -> Result<DMatrix<f64>> {
    let n = moments.len();
    if n == 0 {
        return Err(Error::invalid("no subjects"));
    }
    let q = moments[0].eb.len();
    let mut sum = DMatrix::zeros(q, q);
    for m in moments {
        sum += &m.ebb;
    }
    let sigma = symmetrize(&(sum / n as f64));
    SpdChol::new(&sigma, "Sigma update").map_err(|_| Error::Factorization {
        context: format!("covariance update is not positive definite: {sigma:.6}"),
    })?;
    Ok(sigma)
}

/// Per-subject Breslow weights `exp(x2' gamma_k) E{exp(nu_k' b)}` in the
/// descending-time rank order used by the scans.
fn breslow_weights_ranked(
    dataset: &Dataset,
    moments: &[SubjectMoments],
    params: &ParameterSet,
    cause_ix: usize,
) -> Vec<f64> {
    dataset
        .desc_order()
        .index_map()
        .iter()
        .map(|&i| {
            let s = &dataset.subjects()[i];
            let lin = s.surv_covariates.dot(&params.causes[cause_ix].gamma);
            lin.exp() * moments[i].causes[cause_ix].eexp
        })
        .collect()
}

/// Breslow-type baseline update: jumps `d_kj / S0_kj` at the registered
/// event times, with the weighted risk-set sums from one suffix scan per
/// cause.
pub fn m_step_baseline(
    dataset: &Dataset,
    moments: &[SubjectMoments],
    params: &ParameterSet,
    backend: KernelBackend,
    stats: &mut ScanStats,
) -> Result<Vec<BaselineHazard>> {
    let mut out = Vec::with_capacity(params.n_causes());
    for k in 1..=params.n_causes() {
        let knots = dataset.event_times(k);
        let mult = dataset.event_multiplicities(k);
        let ranked = breslow_weights_ranked(dataset, moments, params, k - 1);
        let s0 = match backend {
            KernelBackend::Scan => {
                suffix_riskset_sums(&ranked, knots, dataset.desc_order(), 0.0, stats)?
            }
            KernelBackend::Naive => {
                let times: Vec<f64> = dataset.subjects().iter().map(|s| s.obs_time).collect();
                let orig = unrank(dataset, &ranked);
                naive::naive_suffix_riskset_sums_generic(&orig, &times, knots, 0.0, stats)
            }
        };
        let mut jumps = Vec::with_capacity(knots.len());
        for (j, (&d, s)) in mult.iter().zip(&s0).enumerate() {
            if !(s.is_finite() && *s > 0.0) {
                return Err(Error::EmptyRiskSet {
                    cause: k,
                    knot: knots[j],
                });
            }
            jumps.push(d / s);
        }
        out.push(BaselineHazard::new(knots.to_vec(), jumps)?);
    }
    Ok(out)
}

fn unrank<T: Clone>(dataset: &Dataset, ranked: &[T]) -> Vec<T> {
    let mut out: Vec<Option<T>> = vec![None; ranked.len()];
    for (rank, &ix) in dataset.desc_order().index_map().iter().enumerate() {
        out[ix] = Some(ranked[rank].clone());
    }
    out.into_iter().map(Option::unwrap).collect()
}

/// Context for evaluating the expected complete-data objective in the
/// survival block at trial `(gamma_k, nu_k)` values: the cached posterior
/// node weights from the E-step.
pub struct QGuard<'a> {
    pub weights: &'a [Vec<f64>],
    pub nodes: &'a NodeCache,
}

/// Expected complete-data objective for cause k as a function of
/// `(gamma_k, nu_k)`, up to terms constant in them. The baseline is held
/// fixed at `new_baseline`; `E{exp(nu' b)}` at trial `nu` is evaluated
/// through the cached posterior node weights.
pub fn survival_q_value(
    dataset: &Dataset,
    moments: &[SubjectMoments],
    cum_at_t: &[f64],
    guard: &QGuard,
    gamma: &DVector<f64>,
    nu: &DVector<f64>,
    cause: usize,
) -> f64 {
    let q = nu.len();
    let mut total = 0.0;
    let mut b = DVector::zeros(q);
    for (i, s) in dataset.subjects().iter().enumerate() {
        let lin = s.surv_covariates.dot(gamma);
        if s.cause == cause {
            total += lin + nu.dot(&moments[i].eb);
        }
        let lam = cum_at_t[i];
        if lam > 0.0 {
            let nodes = guard.nodes.for_subject(i);
            let mut eexp = 0.0;
            for (t, &w) in guard.weights[i].iter().enumerate() {
                for d in 0..q {
                    b[d] = nodes.points[(t, d)];
                }
                eexp += w * nu.dot(&b).exp();
            }
            total -= lam * lin.exp() * eexp;
        }
    }
    total
}

/// Score and expected information for the stacked `(gamma_k, nu_k)` of one
/// cause, assembled per-knot from risk-set sums weighted by the fresh
/// baseline jumps. Returns `None` when the cause has no events.
pub fn survival_score_info(
    dataset: &Dataset,
    moments: &[SubjectMoments],
    params: &ParameterSet,
    new_baseline: &BaselineHazard,
    cause_k: usize,
    backend: KernelBackend,
    stats: &mut ScanStats,
) -> Result<Option<(DVector<f64>, DMatrix<f64>)>> {
    let p2 = dataset.p2();
    let q = dataset.q();
    let dim = p2 + q;
    let k = cause_k;
    let cause = &params.causes[k - 1];
    let knots = dataset.event_times(k);
    if knots.is_empty() {
        return Ok(None);
    }
    let jumps = new_baseline.jumps();

    // Stacked per-subject contributions in rank order:
    //   vector  exp(x2'g) [Eexp x2 ; Ebexp]
    //   matrix  exp(x2'g) [Eexp x2 x2' , x2 Ebexp' ; Ebexp x2' , Ebbexp]
    let ranked_vec: Vec<DVector<f64>> = dataset
        .desc_order()
        .index_map()
        .iter()
        .map(|&i| {
            let s = &dataset.subjects()[i];
            let cm = &moments[i].causes[k - 1];
            let w = s.surv_covariates.dot(&cause.gamma).exp();
            let mut v = DVector::zeros(dim);
            for a in 0..p2 {
                v[a] = w * cm.eexp * s.surv_covariates[a];
            }
            for d in 0..q {
                v[p2 + d] = w * cm.ebexp[d];
            }
            v
        })
        .collect();
    let ranked_mat: Vec<DMatrix<f64>> = dataset
        .desc_order()
        .index_map()
        .iter()
        .map(|&i| {
            let s = &dataset.subjects()[i];
            let cm = &moments[i].causes[k - 1];
            let w = s.surv_covariates.dot(&cause.gamma).exp();
            let mut m = DMatrix::zeros(dim, dim);
            for a in 0..p2 {
                for bq in 0..p2 {
                    m[(a, bq)] = w * cm.eexp * s.surv_covariates[a] * s.surv_covariates[bq];
                }
                for d in 0..q {
                    let v = w * s.surv_covariates[a] * cm.ebexp[d];
                    m[(a, p2 + d)] = v;
                    m[(p2 + d, a)] = v;
                }
            }
            for d in 0..q {
                for e in 0..q {
                    m[(p2 + d, p2 + e)] = w * cm.ebbexp[(d, e)];
                }
            }
            m
        })
        .collect();

    let (s1, s2) = match backend {
        KernelBackend::Scan => {
            let s1 = suffix_riskset_sums(
                &ranked_vec,
                knots,
                dataset.desc_order(),
                DVector::zeros(dim),
                stats,
            )?;
            let s2 = suffix_riskset_sums(
                &ranked_mat,
                knots,
                dataset.desc_order(),
                DMatrix::zeros(dim, dim),
                stats,
            )?;
            (s1, s2)
        }
        KernelBackend::Naive => {
            let times: Vec<f64> = dataset.subjects().iter().map(|s| s.obs_time).collect();
            let s1 = naive::naive_suffix_riskset_sums_generic(
                &unrank(dataset, &ranked_vec),
                &times,
                knots,
                DVector::zeros(dim),
                stats,
            );
            let s2 = naive::naive_riskset_matrix_sums(
                &unrank(dataset, &ranked_mat),
                &times,
                knots,
                dim,
                dim,
                stats,
            );
            (s1, s2)
        }
    };

    // Event part of the score.
    let mut score = DVector::zeros(dim);
    for (i, s) in dataset.subjects().iter().enumerate() {
        if s.cause == k {
            for a in 0..p2 {
                score[a] += s.surv_covariates[a];
            }
            for d in 0..q {
                score[p2 + d] += moments[i].eb[d];
            }
        }
    }
    // Cumulative part and information, both weighted by the new jumps.
    let mut info = DMatrix::zeros(dim, dim);
    for (j, &dl) in jumps.iter().enumerate() {
        score.axpy(-dl, &s1[j], 1.0);
        info += &s2[j] * dl;
    }
    Ok(Some((score, info)))
}

/// One guarded Newton step per cause on the stacked `(gamma_k, nu_k)`.
///
/// Score and information are assembled from per-knot risk-set sums weighted
/// by the fresh baseline jumps. The step is halved (up to 10 times) whenever
/// the expected complete-data objective would decrease; a cause with no
/// events keeps its parameters.
pub fn m_step_survival(
    dataset: &Dataset,
    moments: &[SubjectMoments],
    params: &ParameterSet,
    new_baselines: &[BaselineHazard],
    guard: &QGuard,
    backend: KernelBackend,
    stats: &mut ScanStats,
) -> Result<Vec<(DVector<f64>, DVector<f64>)>> {
    let p2 = dataset.p2();
    let q = dataset.q();
    let mut out = Vec::with_capacity(params.n_causes());

    for k in 1..=params.n_causes() {
        let cause = &params.causes[k - 1];
        let Some((score, info)) = survival_score_info(
            dataset,
            moments,
            params,
            &new_baselines[k - 1],
            k,
            backend,
            stats,
        )?
        else {
            out.push((cause.gamma.clone(), cause.nu.clone()));
            continue;
        };

        let info_chol = SpdChol::new(&info, "survival information").map_err(|_| {
            let eig = info.clone().symmetric_eigen();
            let mut ev: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
            ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
            Error::Singular {
                context: format!(
                    "survival information matrix for cause {k} is singular; eigenvalues {ev:?}"
                ),
            }
        })?;
        let direction = info_chol.solve(&score);
        if direction.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("Newton step for cause {k}"),
            });
        }

        // Guard: never let the objective decrease; halve up to 10 times and
        // keep the old value if even the smallest step fails.
        let cum_at_t = cum_hazard_for_baseline(dataset, &new_baselines[k - 1], backend, stats);
        let q_old = survival_q_value(
            dataset,
            moments,
            &cum_at_t,
            guard,
            &cause.gamma,
            &cause.nu,
            k,
        );
        let mut accepted = (cause.gamma.clone(), cause.nu.clone());
        let mut step = 1.0;
        for _ in 0..=10 {
            let trial = &direction * step;
            let gamma_new = &cause.gamma + trial.rows(0, p2).clone_owned();
            let nu_new = &cause.nu + trial.rows(p2, q).clone_owned();
            let q_new = survival_q_value(
                dataset,
                moments,
                &cum_at_t,
                guard,
                &gamma_new,
                &nu_new,
                k,
            );
            if q_new >= q_old {
                accepted = (gamma_new, nu_new);
                break;
            }
            step *= 0.5;
        }
        out.push(accepted);
    }
    Ok(out)
}

fn cum_hazard_for_baseline(
    dataset: &Dataset,
    baseline: &BaselineHazard,
    backend: KernelBackend,
    stats: &mut ScanStats,
) -> Vec<f64> {
    match backend {
        KernelBackend::Scan => {
            let knots =
                DescendingKnots::new(baseline.knots().to_vec(), baseline.cumulative().to_vec())
                    .expect("baseline knots are sorted by construction");
            step_lookup_scan(&knots, dataset.desc_order(), 0.0, stats)
        }
        KernelBackend::Naive => {
            let times: Vec<f64> = dataset.subjects().iter().map(|s| s.obs_time).collect();
            naive::naive_step_lookup_counted(
                baseline.knots(),
                baseline.cumulative(),
                &times,
                0.0,
                stats,
            )
        }
    }
}

/// Null Breslow start: with `gamma = nu = 0` the weighted risk sets are the
/// plain risk-set sizes and the jumps reduce to the Nelson-Aalen increments.
fn null_breslow(dataset: &Dataset, stats: &mut ScanStats) -> Result<Vec<BaselineHazard>> {
    let ones = vec![1.0; dataset.n_subjects()];
    let mut out = Vec::with_capacity(dataset.n_causes());
    for k in 1..=dataset.n_causes() {
        let knots = dataset.event_times(k);
        let sizes = suffix_riskset_sums(&ones, knots, dataset.desc_order(), 0.0, stats)?;
        let jumps: Vec<f64> = dataset
            .event_multiplicities(k)
            .iter()
            .zip(&sizes)
            .map(|(&d, &r)| d / r)
            .collect();
        out.push(BaselineHazard::new(knots.to_vec(), jumps)?);
    }
    Ok(out)
}

/// Wall-clock per phase, in seconds.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub e_step_s: f64,
    pub m_step_s: f64,
    pub se_s: f64,
    pub total_s: f64,
}

/// Converged fit with everything the standard-error step and the test
/// oracles need: final moments, posterior node weights, and the node sets.
pub struct FitResult {
    pub params: ParameterSet,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub moments: Vec<SubjectMoments>,
    pub weights: Vec<Vec<f64>>,
    pub nodes: NodeCache,
    pub grid: QuadratureGrid,
    pub lmm: LmmFit,
    pub timing: PhaseTiming,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().unwrap()
    }
}

fn max_rel_change(old: &ParameterSet, new: &ParameterSet) -> f64 {
    let mut delta: f64 = 0.0;
    let mut upd = |o: f64, n: f64| {
        delta = delta.max((n - o).abs() / (o.abs() + 1e-3));
    };
    for (o, n) in old.beta.iter().zip(new.beta.iter()) {
        upd(*o, *n);
    }
    upd(old.sigma2, new.sigma2);
    for (o, n) in old.sigma_mat.iter().zip(new.sigma_mat.iter()) {
        upd(*o, *n);
    }
    for (oc, nc) in old.causes.iter().zip(&new.causes) {
        for (o, n) in oc.gamma.iter().zip(nc.gamma.iter()) {
            upd(*o, *n);
        }
        for (o, n) in oc.nu.iter().zip(nc.nu.iter()) {
            upd(*o, *n);
        }
    }
    delta
}

/// Builds the node cache for the current iteration.
fn make_nodes(
    dataset: &Dataset,
    grid: &QuadratureGrid,
    mode: QuadMode,
    sigma: &DMatrix<f64>,
    eb: Option<&EBayesState>,
) -> Result<NodeCache> {
    match mode {
        QuadMode::Standard => Ok(NodeCache::Shared(subject_nodes(
            grid,
            &NodeTransform::Standard { sigma },
        )?)),
        QuadMode::PseudoAdaptive => {
            let eb = eb.ok_or_else(|| {
                Error::invalid("pseudo-adaptive mode requires the empirical Bayes state")
            })?;
            let sets: Result<Vec<NodeSet>> = dataset
                .subjects()
                .par_iter()
                .enumerate()
                .map(|(i, _)| {
                    subject_nodes(
                        grid,
                        &NodeTransform::PseudoAdaptive {
                            b_tilde: &eb.subjects[i].b_tilde,
                            h_inv_sqrt: &eb.subjects[i].h_inv_sqrt,
                        },
                    )
                })
                .collect();
            Ok(NodeCache::PerSubject(sets?))
        }
    }
}

/// Fits the joint model: LMM initialization, pseudo-adaptive (or standard)
/// quadrature E-steps, and the M-step cycle baseline -> survival Newton ->
/// regression -> covariance, until the convergence metric drops below the
/// tolerance.
pub fn em_fit(dataset: &Dataset, config: &EmConfig) -> Result<FitResult> {
    config.validate()?;
    if dataset.n_subjects() == 0 {
        return Err(Error::validation("empty dataset"));
    }
    let t_total = Instant::now();
    let mut warnings = Vec::new();
    let mut stats = ScanStats::default();

    let lmm = fit_lmm(dataset, 1e-6, 500)?;
    let eb = match config.quad_mode {
        QuadMode::PseudoAdaptive => Some(empirical_bayes_all(dataset, &lmm)?),
        QuadMode::Standard => None,
    };

    let rule = gh_rule(config.n_q)?;
    let grid = tensor_grid(&rule, dataset.q())?;

    let mut params = ParameterSet {
        beta: lmm.beta_hat.clone(),
        sigma2: lmm.sigma2_hat,
        sigma_mat: lmm.sigma_hat.clone(),
        causes: null_breslow(dataset, &mut stats)?
            .into_iter()
            .map(|baseline| CauseParams {
                gamma: DVector::zeros(dataset.p2()),
                nu: DVector::zeros(dataset.q()),
                baseline,
            })
            .collect(),
    };

    // Pseudo-adaptive nodes are fixed for the whole fit.
    let mut nodes = make_nodes(dataset, &grid, config.quad_mode, &params.sigma_mat, eb.as_ref())?;

    let mut loglik_trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut e_time = Duration::ZERO;
    let mut m_time = Duration::ZERO;
    let mut last_estep: Option<EStep> = None;

    for it in 1..=config.max_iter {
        iterations = it;
        if config.quad_mode == QuadMode::Standard {
            nodes = make_nodes(dataset, &grid, config.quad_mode, &params.sigma_mat, None)?;
        }

        let t0 = Instant::now();
        let estep = e_step(dataset, &params, &grid, &nodes, config.backend)?;
        e_time += t0.elapsed();
        loglik_trace.push(estep.observed_loglik);

        let t1 = Instant::now();
        let new_baselines =
            m_step_baseline(dataset, &estep.moments, &params, config.backend, &mut stats)?;
        let guard = QGuard {
            weights: &estep.weights,
            nodes: &nodes,
        };
        let survival = m_step_survival(
            dataset,
            &estep.moments,
            &params,
            &new_baselines,
            &guard,
            config.backend,
            &mut stats,
        )?;
        let (beta, sigma2) = m_step_regression(dataset, &estep.moments)?;
        let sigma_mat = m_step_sigma(&estep.moments)?;
        m_time += t1.elapsed();

        let mut new_params = ParameterSet {
            beta,
            sigma2,
            sigma_mat,
            causes: Vec::with_capacity(params.n_causes()),
        };
        for (k, ((gamma, nu), baseline)) in
            survival.into_iter().zip(new_baselines).enumerate()
        {
            let _ = k;
            new_params.causes.push(CauseParams {
                gamma,
                nu,
                baseline,
            });
        }

        let delta = match config.metric {
            ConvergenceMetric::RelativeParamChange => max_rel_change(&params, &new_params),
            ConvergenceMetric::LoglikChange => {
                let m = loglik_trace.len();
                if m < 2 {
                    f64::INFINITY
                } else {
                    (loglik_trace[m - 1] - loglik_trace[m - 2]).abs()
                        / (loglik_trace[m - 1].abs() + 1e-3)
                }
            }
        };
        params = new_params;
        last_estep = Some(estep);
        if delta < config.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        warnings.push(format!(
            "EM did not converge within {} iterations",
            config.max_iter
        ));
    }

    // Final E-step refresh at the fitted parameters.
    if config.quad_mode == QuadMode::Standard {
        nodes = make_nodes(dataset, &grid, config.quad_mode, &params.sigma_mat, None)?;
    }
    let t0 = Instant::now();
    let final_estep = e_step(dataset, &params, &grid, &nodes, config.backend)?;
    e_time += t0.elapsed();
    loglik_trace.push(final_estep.observed_loglik);
    drop(last_estep);

    for w in loglik_trace.windows(2) {
        if w[1] < w[0] - 1e-6 {
            warnings.push(format!(
                "observed log-likelihood decreased by {:.3e} during the fit",
                w[0] - w[1]
            ));
            break;
        }
    }

    Ok(FitResult {
        params,
        loglik_trace,
        iterations,
        converged,
        moments: final_estep.moments,
        weights: final_estep.weights,
        nodes,
        grid,
        lmm,
        timing: PhaseTiming {
            e_step_s: e_time.as_secs_f64(),
            m_step_s: m_time.as_secs_f64(),
            se_s: 0.0,
            total_s: t_total.elapsed().as_secs_f64(),
        },
        warnings,
    })
}
