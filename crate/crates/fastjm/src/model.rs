//! Domain types and log-density evaluation for the joint model.
//!
//! A subject couples a longitudinal trajectory (linear mixed model with
//! random effects `b`) with a competing-risk event time whose cause-specific
//! hazards share the same `b`. Everything here is computed and stored in log
//! scale; exponentiation happens only inside quadrature ratios after
//! max-subtraction.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{require_symmetric, SpdChol};
use crate::scan::DescendingQueries;

const LOG_2PI: f64 = 1.8378770664093453;

/// One longitudinal measurement with its fixed- and random-effect designs.
#[derive(Debug, Clone)]
pub struct LongitudinalObs {
    pub time: f64,
    pub response: f64,
    /// X^(1)(t_ij), length p.
    pub fixed_design: DVector<f64>,
    /// X~^(1)(t_ij), length q.
    pub random_design: DVector<f64>,
}

impl LongitudinalObs {
    pub fn new(
        time: f64,
        response: f64,
        fixed_design: DVector<f64>,
        random_design: DVector<f64>,
    ) -> Result<Self> {
        if !(time.is_finite() && time >= 0.0) {
            return Err(Error::invalid(format!(
                "observation time must be finite and nonnegative, got {time}"
            )));
        }
        let all_finite = response.is_finite()
            && fixed_design.iter().all(|x| x.is_finite())
            && random_design.iter().all(|x| x.is_finite());
        if !all_finite {
            return Err(Error::NonFinite {
                context: "longitudinal observation".into(),
            });
        }
        Ok(Self {
            time,
            response,
            fixed_design,
            random_design,
        })
    }
}

/// One individual: longitudinal observations, survival covariates, observed
/// time and cause indicator (0 = censored).
#[derive(Debug, Clone)]
pub struct Subject {
    pub id: String,
    /// Ascending by time. May be empty (survival data only).
    pub obs: Vec<LongitudinalObs>,
    /// X^(2), time-invariant, length p2.
    pub surv_covariates: DVector<f64>,
    /// T_i.
    pub obs_time: f64,
    /// D_i in {0, ..., K}.
    pub cause: usize,
}

impl Subject {
    pub fn n_obs(&self) -> usize {
        self.obs.len()
    }
}

/// Right-continuous nondecreasing step function with jumps at descending
/// distinct event times of one cause. `cumulative[j]` is the function value
/// on `[knots[j], knots[j-1])`; the function is zero below the smallest knot.
#[derive(Debug, Clone)]
pub struct BaselineHazard {
    knots: Vec<f64>,
    jumps: Vec<f64>,
    cumulative: Vec<f64>,
}

impl BaselineHazard {
    pub fn new(knots: Vec<f64>, jumps: Vec<f64>) -> Result<Self> {
        if knots.len() != jumps.len() {
            return Err(Error::DimensionMismatch {
                field: "baseline jumps",
                expected: knots.len(),
                actual: jumps.len(),
            });
        }
        for (i, w) in knots.windows(2).enumerate() {
            if !(w[0] > w[1]) {
                return Err(Error::Unsorted {
                    index: i + 1,
                    context: "baseline knots must be strictly descending".into(),
                });
            }
        }
        if let Some(i) = jumps.iter().position(|j| !(j.is_finite() && *j >= 0.0)) {
            return Err(Error::invalid(format!(
                "baseline jump at index {i} must be finite and nonnegative, got {}",
                jumps[i]
            )));
        }
        // cumulative[j] = sum of jumps at knots <= knots[j] (suffix in the
        // descending store).
        let mut cumulative = jumps.clone();
        for j in (0..cumulative.len().saturating_sub(1)).rev() {
            cumulative[j] += cumulative[j + 1];
        }
        Ok(Self {
            knots,
            jumps,
            cumulative,
        })
    }

    /// A baseline that is identically zero.
    pub fn empty() -> Self {
        Self {
            knots: Vec::new(),
            jumps: Vec::new(),
            cumulative: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    /// Descending distinct knot times.
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn jumps(&self) -> &[f64] {
        &self.jumps
    }

    /// Cumulative values aligned with the descending knots.
    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    /// Index of the largest knot <= t, if any.
    fn knot_index_at(&self, t: f64) -> Option<usize> {
        let j = self.knots.partition_point(|&k| k > t);
        (j < self.knots.len()).then_some(j)
    }

    /// Lambda_0(t); right-continuous step evaluation.
    pub fn cumulative_at(&self, t: f64) -> f64 {
        self.knot_index_at(t).map_or(0.0, |j| self.cumulative[j])
    }

    /// Jump size at an exact knot time, if t is a knot.
    pub fn jump_at(&self, t: f64) -> Option<f64> {
        self.knot_index_at(t)
            .filter(|&j| self.knots[j] == t)
            .map(|j| self.jumps[j])
    }
}

/// Regression and association parameters of one cause-specific hazard.
#[derive(Debug, Clone)]
pub struct CauseParams {
    /// gamma_k, length p2.
    pub gamma: DVector<f64>,
    /// nu_k, length q.
    pub nu: DVector<f64>,
    pub baseline: BaselineHazard,
}

/// The full parameter set: fixed effects, error variance, random-effect
/// covariance, and per-cause hazard parameters.
#[derive(Debug, Clone)]
pub struct ParameterSet {
    pub beta: DVector<f64>,
    pub sigma2: f64,
    pub sigma_mat: DMatrix<f64>,
    pub causes: Vec<CauseParams>,
}

impl ParameterSet {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2.is_finite() && self.sigma2 > 0.0) {
            return Err(Error::invalid(format!(
                "sigma2 must be positive, got {}",
                self.sigma2
            )));
        }
        require_symmetric(&self.sigma_mat, 1e-10, "Sigma")?;
        SpdChol::new(&self.sigma_mat, "Sigma")?;
        let q = self.sigma_mat.nrows();
        for (k, c) in self.causes.iter().enumerate() {
            if c.nu.len() != q {
                return Err(Error::DimensionMismatch {
                    field: "nu",
                    expected: q,
                    actual: c.nu.len(),
                });
            }
            let _ = k;
        }
        Ok(())
    }

    pub fn n_causes(&self) -> usize {
        self.causes.len()
    }
}

/// A validated collection of subjects with the sorted views and per-cause
/// event-time registries built once at ingestion.
#[derive(Debug, Clone)]
pub struct Dataset {
    subjects: Vec<Subject>,
    n_causes: usize,
    p: usize,
    q: usize,
    p2: usize,
    desc_order: DescendingQueries,
    /// Per cause: distinct uncensored event times, strictly descending.
    event_times: Vec<Vec<f64>>,
    /// Per cause: multiplicities d_kj aligned with `event_times`.
    event_multiplicities: Vec<Vec<f64>>,
    /// For subject i with cause k > 0: index of T_i in event_times[k-1].
    event_knot_index: Vec<Option<usize>>,
    /// Column names for reporting; defaulted when constructed in memory.
    pub fixed_names: Vec<String>,
    pub random_names: Vec<String>,
    pub surv_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        subjects: Vec<Subject>,
        n_causes: usize,
        p: usize,
        q: usize,
        p2: usize,
    ) -> Result<Self> {
        if n_causes < 1 {
            return Err(Error::invalid("n_causes must be >= 1"));
        }
        for s in &subjects {
            if !(s.obs_time.is_finite() && s.obs_time >= 0.0) {
                return Err(Error::validation(format!(
                    "subject `{}`: observation time {} invalid",
                    s.id, s.obs_time
                )));
            }
            if s.cause > n_causes {
                return Err(Error::validation(format!(
                    "subject `{}`: cause {} out of range 0..={}",
                    s.id, s.cause, n_causes
                )));
            }
            if s.surv_covariates.len() != p2 {
                return Err(Error::DimensionMismatch {
                    field: "surv_covariates",
                    expected: p2,
                    actual: s.surv_covariates.len(),
                });
            }
            let mut prev = f64::NEG_INFINITY;
            for o in &s.obs {
                if o.fixed_design.len() != p {
                    return Err(Error::DimensionMismatch {
                        field: "fixed_design",
                        expected: p,
                        actual: o.fixed_design.len(),
                    });
                }
                if o.random_design.len() != q {
                    return Err(Error::DimensionMismatch {
                        field: "random_design",
                        expected: q,
                        actual: o.random_design.len(),
                    });
                }
                if o.time <= prev {
                    return Err(Error::validation(format!(
                        "subject `{}`: observation times must be strictly ascending",
                        s.id
                    )));
                }
                if o.time > s.obs_time {
                    return Err(Error::validation(format!(
                        "subject `{}`: longitudinal time {} exceeds observation time {}",
                        s.id, o.time, s.obs_time
                    )));
                }
                prev = o.time;
            }
        }

        let times: Vec<f64> = subjects.iter().map(|s| s.obs_time).collect();
        let desc_order = DescendingQueries::from_unsorted(&times);

        let mut event_times = vec![Vec::new(); n_causes];
        let mut event_multiplicities = vec![Vec::new(); n_causes];
        for k in 0..n_causes {
            let mut tk: Vec<f64> = subjects
                .iter()
                .filter(|s| s.cause == k + 1)
                .map(|s| s.obs_time)
                .collect();
            tk.sort_by(|a, b| b.partial_cmp(a).unwrap());
            for t in tk {
                if event_times[k].last() == Some(&t) {
                    *event_multiplicities[k].last_mut().unwrap() += 1.0;
                } else {
                    event_times[k].push(t);
                    event_multiplicities[k].push(1.0);
                }
            }
        }
        let event_knot_index = subjects
            .iter()
            .map(|s| {
                if s.cause == 0 {
                    None
                } else {
                    let k = s.cause - 1;
                    let j = event_times[k].partition_point(|&t| t > s.obs_time);
                    debug_assert_eq!(event_times[k][j], s.obs_time);
                    Some(j)
                }
            })
            .collect();

        Ok(Self {
            subjects,
            n_causes,
            p,
            q,
            p2,
            desc_order,
            event_times,
            event_multiplicities,
            event_knot_index,
            fixed_names: (0..p).map(|j| format!("beta_{j}")).collect(),
            random_names: (0..q).map(|j| format!("b_{j}")).collect(),
            surv_names: (0..p2).map(|j| format!("x2_{j}")).collect(),
        })
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_causes(&self) -> usize {
        self.n_causes
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn p2(&self) -> usize {
        self.p2
    }

    pub fn total_obs(&self) -> usize {
        self.subjects.iter().map(|s| s.n_obs()).sum()
    }

    /// Observation times sorted descending with the permutation back to
    /// subject order; built once.
    pub fn desc_order(&self) -> &DescendingQueries {
        &self.desc_order
    }

    /// Distinct uncensored type-k event times, descending. `cause` is 1-based.
    pub fn event_times(&self, cause: usize) -> &[f64] {
        &self.event_times[cause - 1]
    }

    pub fn event_multiplicities(&self, cause: usize) -> &[f64] {
        &self.event_multiplicities[cause - 1]
    }

    /// For an event subject, the index of its T_i in its cause's knot list.
    pub fn event_knot_index(&self, subject: usize) -> Option<usize> {
        self.event_knot_index[subject]
    }

    pub fn n_events(&self, cause: usize) -> usize {
        self.event_multiplicities[cause - 1]
            .iter()
            .map(|&d| d as usize)
            .sum()
    }
}

fn check_dim(field: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            field,
            expected,
            actual,
        });
    }
    Ok(())
}

/// Log-density of a subject's longitudinal observations given random effects
/// `b`: the Gaussian product over visits. Zero for a subject without
/// longitudinal data.
pub fn log_longitudinal_density(
    subject: &Subject,
    b: &DVector<f64>,
    params: &ParameterSet,
) -> Result<f64> {
    let mut ll = 0.0;
    for o in &subject.obs {
        check_dim("beta", o.fixed_design.len(), params.beta.len())?;
        check_dim("b", o.random_design.len(), b.len())?;
        let mean = o.fixed_design.dot(&params.beta) + o.random_design.dot(b);
        let r = o.response - mean;
        ll += -0.5 * (LOG_2PI + params.sigma2.ln()) - r * r / (2.0 * params.sigma2);
    }
    Ok(ll)
}

/// Log-density of the competing-risk outcome given random effects `b`.
///
/// `cum_hazard_at_T[k]` must hold Lambda_0k(T_i) for the current baselines
/// (precomputed by the scan kernels in the fitting loop). For an event of
/// cause k the jump of baseline k at T_i must exist.
pub fn log_survival_density(
    subject: &Subject,
    b: &DVector<f64>,
    params: &ParameterSet,
    cum_hazard_at_t: &[f64],
) -> Result<f64> {
    check_dim("cum_hazard_at_T", params.n_causes(), cum_hazard_at_t.len())?;
    let mut ll = 0.0;
    for (k, cause) in params.causes.iter().enumerate() {
        check_dim("gamma", subject.surv_covariates.len(), cause.gamma.len())?;
        check_dim("nu", b.len(), cause.nu.len())?;
        let lin = subject.surv_covariates.dot(&cause.gamma) + cause.nu.dot(b);
        if subject.cause == k + 1 {
            let jump = cause.baseline.jump_at(subject.obs_time).ok_or({
                Error::EventTimeMissing {
                    cause: k + 1,
                    time: subject.obs_time,
                }
            })?;
            ll += jump.ln() + lin;
        }
        ll -= cum_hazard_at_t[k] * lin.exp();
    }
    Ok(ll)
}

/// Log N_q(b; 0, Sigma) using a shared factorization.
pub fn log_random_effect_density(b: &DVector<f64>, sigma_chol: &SpdChol) -> f64 {
    let q = sigma_chol.dim() as f64;
    -0.5 * (q * LOG_2PI + sigma_chol.log_det() + sigma_chol.inv_quadratic(b))
}

/// Complete-data log-likelihood over the whole dataset for given random
/// effects (one `b` per subject).
pub fn log_complete_data(
    dataset: &Dataset,
    b_all: &[DVector<f64>],
    params: &ParameterSet,
) -> Result<f64> {
    check_dim("b_all", dataset.n_subjects(), b_all.len())?;
    let sigma_chol = SpdChol::new(&params.sigma_mat, "Sigma")?;
    let mut total = 0.0;
    for (s, b) in dataset.subjects().iter().zip(b_all) {
        let cum: Vec<f64> = params
            .causes
            .iter()
            .map(|c| c.baseline.cumulative_at(s.obs_time))
            .collect();
        total += log_longitudinal_density(s, b, params)?;
        total += log_survival_density(s, b, params, &cum)?;
        total += log_random_effect_density(b, &sigma_chol);
    }
    Ok(total)
}
