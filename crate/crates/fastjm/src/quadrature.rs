//! Gauss-Hermite machinery: 1-D rule generation, tensorization over the
//! random-effect dimension, node rescaling for the standard and
//! pseudo-adaptive schemes, and posterior-moment evaluation.
//!
//! Expectations of the form `E{h(b) | Y, C}` are approximated by weighted
//! sums over rescaled abscissas. The combined weight-and-correction factor
//! `log pi_t + ||c_t||^2` is precomputed per grid point; the density is
//! evaluated explicitly at each node and the Gaussian kernel divided back
//! out, so the ratio of sums is exact for `h == 1`. All per-node terms are
//! kept in log scale and normalized with max-subtraction, which keeps the
//! ratios finite for subjects with many longitudinal measurements.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::SpdChol;
use crate::model::{ParameterSet, Subject};

const SQRT_PI: f64 = 1.7724538509055159;
const LOG_2PI: f64 = 1.8378770664093453;

/// One-dimensional Gauss-Hermite rule (weight function `exp(-x^2)`).
#[derive(Debug, Clone)]
pub struct GhRule1d {
    order: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GhRule1d {
    pub fn order(&self) -> usize {
        self.order
    }

    /// Abscissas in ascending order, antisymmetric about zero.
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Builds the order-`n` Gauss-Hermite rule via the Golub-Welsch
/// eigendecomposition of the Jacobi matrix. Nodes are symmetrized exactly
/// about zero so that odd moments vanish identically.
pub fn gh_rule(order: usize) -> Result<GhRule1d> {
    if order < 1 || order > 64 {
        return Err(Error::invalid(format!(
            "quadrature order must be in 1..=64, got {order}"
        )));
    }
    let mut jacobi = DMatrix::zeros(order, order);
    for j in 1..order {
        let off = (j as f64 / 2.0).sqrt();
        jacobi[(j - 1, j)] = off;
        jacobi[(j, j - 1)] = off;
    }
    let eig = jacobi.symmetric_eigen();
    let mut idx: Vec<usize> = (0..order).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let mut nodes: Vec<f64> = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut weights: Vec<f64> = idx
        .iter()
        .map(|&i| {
            let v0 = eig.eigenvectors[(0, i)];
            SQRT_PI * v0 * v0
        })
        .collect();
    // Enforce exact antisymmetry; the eigensolver is only accurate to
    // roundoff and downstream symmetry properties rely on exact pairing.
    let half = order / 2;
    for i in 0..half {
        let j = order - 1 - i;
        let x = 0.5 * (nodes[j] - nodes[i]);
        nodes[i] = -x;
        nodes[j] = x;
        let w = 0.5 * (weights[i] + weights[j]);
        weights[i] = w;
        weights[j] = w;
    }
    if order % 2 == 1 {
        nodes[half] = 0.0;
    }
    Ok(GhRule1d {
        order,
        nodes,
        weights,
    })
}

/// Tensorized grid over `dim` random-effect coordinates.
#[derive(Debug, Clone)]
pub struct QuadratureGrid {
    dim: usize,
    /// `n_points x dim` matrix of raw abscissas c_t.
    points: DMatrix<f64>,
    /// `log pi_t + ||c_t||^2` per row.
    log_weight_adj: Vec<f64>,
}

impl QuadratureGrid {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_points(&self) -> usize {
        self.points.nrows()
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn log_weight_adj(&self) -> &[f64] {
        &self.log_weight_adj
    }
}

/// All `order^dim` combinations of the 1-D rule, with weights multiplied and
/// the exp(||c||^2) correction folded into the log weight.
pub fn tensor_grid(rule: &GhRule1d, dim: usize) -> Result<QuadratureGrid> {
    if dim < 1 {
        return Err(Error::invalid("grid dimension must be >= 1"));
    }
    let n = rule.order();
    let total = (n as f64).powi(dim as i32);
    if total > 1e6 {
        return Err(Error::invalid(format!(
            "grid of {n}^{dim} points exceeds the 1e6 guard; use pseudo-adaptive mode with a smaller order"
        )));
    }
    let total = n.pow(dim as u32);
    let mut points = DMatrix::zeros(total, dim);
    let mut log_weight_adj = Vec::with_capacity(total);
    for t in 0..total {
        let mut rem = t;
        let mut logw = 0.0;
        let mut norm2 = 0.0;
        // Last coordinate varies fastest.
        for d in (0..dim).rev() {
            let i = rem % n;
            rem /= n;
            let x = rule.nodes()[i];
            points[(t, d)] = x;
            logw += rule.weights()[i].ln();
            norm2 += x * x;
        }
        log_weight_adj.push(logw + norm2);
    }
    Ok(QuadratureGrid {
        dim,
        points,
        log_weight_adj,
    })
}

/// How raw abscissas are mapped to evaluation points.
pub enum NodeTransform<'a> {
    /// `sqrt(2) * L * c_t` with `L L^T = Sigma`; recomputed each EM iteration.
    Standard { sigma: &'a DMatrix<f64> },
    /// `b_tilde + sqrt(2) * H^{-1/2} * c_t`; fixed across EM iterations.
    PseudoAdaptive {
        b_tilde: &'a DVector<f64>,
        h_inv_sqrt: &'a DMatrix<f64>,
    },
}

/// Rescaled evaluation points for one subject (or, in standard mode, shared
/// by all subjects), along with the log-Jacobian of the affine transform.
#[derive(Debug, Clone)]
pub struct NodeSet {
    /// `n_points x q` evaluation points.
    pub points: DMatrix<f64>,
    /// `log |det(sqrt(2) * L)|`; cancels in moment ratios and enters only
    /// the marginal log-likelihood.
    pub log_jacobian: f64,
}

pub fn subject_nodes(grid: &QuadratureGrid, transform: &NodeTransform) -> Result<NodeSet> {
    let q = grid.dim();
    let (scale, offset): (DMatrix<f64>, Option<&DVector<f64>>) = match transform {
        NodeTransform::Standard { sigma } => {
            let chol = SpdChol::new(sigma, "Sigma for node rescaling")?;
            (chol.lower(), None)
        }
        NodeTransform::PseudoAdaptive {
            b_tilde,
            h_inv_sqrt,
        } => ((*h_inv_sqrt).clone(), Some(b_tilde)),
    };
    if scale.nrows() != q {
        return Err(Error::DimensionMismatch {
            field: "node transform",
            expected: q,
            actual: scale.nrows(),
        });
    }
    let sqrt2 = std::f64::consts::SQRT_2;
    // points = c * (sqrt(2) L)^T, then the per-subject center added row-wise.
    let mut points = grid.points() * (sqrt2 * &scale).transpose();
    if let Some(center) = offset {
        for mut row in points.row_iter_mut() {
            row += center.transpose();
        }
    }
    let det = scale.determinant();
    if !(det.is_finite() && det > 0.0) {
        return Err(Error::Factorization {
            context: format!("node transform has nonpositive determinant {det}"),
        });
    }
    let log_jacobian = (q as f64) * 0.5 * std::f64::consts::LN_2 + det.ln();
    Ok(NodeSet {
        points,
        log_jacobian,
    })
}

/// Posterior expectations of one subject's random effects under the current
/// parameters: the E-step working set.
#[derive(Debug, Clone)]
pub struct CauseMoments {
    /// E{exp(nu_k' b)}.
    pub eexp: f64,
    /// E{b exp(nu_k' b)}.
    pub ebexp: DVector<f64>,
    /// E{b b' exp(nu_k' b)}.
    pub ebbexp: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct SubjectMoments {
    /// Quadrature approximation of the subject's observed-data log-likelihood
    /// contribution (includes the node-transform log-Jacobian).
    pub marginal_loglik: f64,
    pub eb: DVector<f64>,
    pub ebb: DMatrix<f64>,
    pub causes: Vec<CauseMoments>,
}

/// Per-subject evaluation context: everything that does not depend on the
/// node. Building it once per subject keeps the per-node work at
/// O(n_i + K + q).
pub(crate) struct SubjectEval<'a> {
    residuals: Vec<f64>,
    random_designs: Vec<&'a DVector<f64>>,
    inv_two_sigma2: f64,
    gauss_const: f64,
    /// Per cause: (linear predictor x2'gamma_k, Lambda_k(T_i)).
    cause_ctx: Vec<(f64, f64)>,
    /// log jump + linear predictor for the observed cause, if any.
    event_const: f64,
    event_cause: Option<usize>,
    nus: Vec<&'a DVector<f64>>,
    sigma_chol: &'a SpdChol,
}

impl<'a> SubjectEval<'a> {
    pub(crate) fn new(
        subject: &'a Subject,
        params: &'a ParameterSet,
        cum_hazard_at_t: &[f64],
        sigma_chol: &'a SpdChol,
    ) -> Result<Self> {
        let k = params.n_causes();
        if cum_hazard_at_t.len() != k {
            return Err(Error::DimensionMismatch {
                field: "cum_hazard_at_T",
                expected: k,
                actual: cum_hazard_at_t.len(),
            });
        }
        let residuals: Vec<f64> = subject
            .obs
            .iter()
            .map(|o| o.response - o.fixed_design.dot(&params.beta))
            .collect();
        let random_designs: Vec<&DVector<f64>> =
            subject.obs.iter().map(|o| &o.random_design).collect();
        let mut cause_ctx = Vec::with_capacity(k);
        let mut event_const = 0.0;
        let mut event_cause = None;
        for (ki, c) in params.causes.iter().enumerate() {
            let lin = subject.surv_covariates.dot(&c.gamma);
            cause_ctx.push((lin, cum_hazard_at_t[ki]));
            if subject.cause == ki + 1 {
                let jump = c.baseline.jump_at(subject.obs_time).ok_or({
                    Error::EventTimeMissing {
                        cause: ki + 1,
                        time: subject.obs_time,
                    }
                })?;
                event_const = jump.ln() + lin;
                event_cause = Some(ki);
            }
        }
        Ok(Self {
            residuals,
            random_designs,
            inv_two_sigma2: 1.0 / (2.0 * params.sigma2),
            gauss_const: -0.5 * (LOG_2PI + params.sigma2.ln()) * subject.obs.len() as f64,
            cause_ctx,
            event_const,
            event_cause,
            nus: params.causes.iter().map(|c| &c.nu).collect(),
            sigma_chol,
        })
    }

    /// log f(Y_i, C_i | b) + log N_q(b; 0, Sigma) at a node.
    fn log_density(&self, b: &DVector<f64>) -> f64 {
        let mut ll = self.gauss_const;
        for (r, z) in self.residuals.iter().zip(&self.random_designs) {
            let e = r - z.dot(b);
            ll -= e * e * self.inv_two_sigma2;
        }
        for (ki, (lin, cum)) in self.cause_ctx.iter().enumerate() {
            let nu_b = self.nus[ki].dot(b);
            if self.event_cause == Some(ki) {
                ll += self.event_const + nu_b;
            }
            if *cum > 0.0 {
                ll -= cum * (lin + nu_b).exp();
            }
        }
        let q = self.sigma_chol.dim() as f64;
        ll - 0.5 * (q * LOG_2PI + self.sigma_chol.log_det() + self.sigma_chol.inv_quadratic(b))
    }
}

/// Normalized posterior weights over the rows of a node set, plus the
/// marginal log-likelihood contribution. Exposed so callers can form
/// posterior expectations of arbitrary functions of `b`.
#[derive(Debug, Clone)]
pub struct PosteriorWeights {
    pub weights: Vec<f64>,
    pub marginal_loglik: f64,
}

pub(crate) fn posterior_weights_ctx(
    eval: &SubjectEval,
    nodes: &NodeSet,
    grid: &QuadratureGrid,
    subject_id: &str,
) -> Result<PosteriorWeights> {
    let n_pts = grid.n_points();
    if nodes.points.nrows() != n_pts {
        return Err(Error::DimensionMismatch {
            field: "node rows",
            expected: n_pts,
            actual: nodes.points.nrows(),
        });
    }
    let q = grid.dim();
    let mut log_terms = Vec::with_capacity(n_pts);
    let mut best = f64::NEG_INFINITY;
    let mut b = DVector::zeros(q);
    for t in 0..n_pts {
        for d in 0..q {
            b[d] = nodes.points[(t, d)];
        }
        let lt = eval.log_density(&b) + grid.log_weight_adj()[t];
        if lt > best {
            best = lt;
        }
        log_terms.push(lt);
    }
    if !best.is_finite() {
        return Err(Error::PosteriorMassLost {
            subject: subject_id.to_string(),
        });
    }
    let mut sum = 0.0;
    let mut weights = Vec::with_capacity(n_pts);
    for lt in &log_terms {
        let w = (lt - best).exp();
        sum += w;
        weights.push(w);
    }
    for w in &mut weights {
        *w /= sum;
    }
    Ok(PosteriorWeights {
        weights,
        marginal_loglik: best + sum.ln() + nodes.log_jacobian,
    })
}

pub(crate) fn moments_from_weights(
    weights: &PosteriorWeights,
    nodes: &NodeSet,
    nus: &[&DVector<f64>],
) -> SubjectMoments {
    let q = nodes.points.ncols();
    let n_pts = nodes.points.nrows();
    let mut eb = DVector::zeros(q);
    let mut ebb = DMatrix::zeros(q, q);
    let mut causes: Vec<CauseMoments> = nus
        .iter()
        .map(|_| CauseMoments {
            eexp: 0.0,
            ebexp: DVector::zeros(q),
            ebbexp: DMatrix::zeros(q, q),
        })
        .collect();
    let mut b = DVector::zeros(q);
    for t in 0..n_pts {
        let w = weights.weights[t];
        for d in 0..q {
            b[d] = nodes.points[(t, d)];
        }
        eb.axpy(w, &b, 1.0);
        ebb.syger(w, &b, &b, 1.0);
        for (ki, nu) in nus.iter().enumerate() {
            let e = w * nu.dot(&b).exp();
            let cm = &mut causes[ki];
            cm.eexp += e;
            cm.ebexp.axpy(e, &b, 1.0);
            cm.ebbexp.syger(e, &b, &b, 1.0);
        }
    }
    // syger fills the lower triangle; mirror it.
    for m in std::iter::once(&mut ebb).chain(causes.iter_mut().map(|c| &mut c.ebbexp)) {
        for r in 0..q {
            for c in 0..r {
                m[(c, r)] = m[(r, c)];
            }
        }
    }
    SubjectMoments {
        marginal_loglik: weights.marginal_loglik,
        eb,
        ebb,
        causes,
    }
}

/// Posterior weights over the node rows for one subject.
pub fn posterior_weights(
    subject: &Subject,
    params: &ParameterSet,
    nodes: &NodeSet,
    grid: &QuadratureGrid,
    cum_hazard_at_t: &[f64],
) -> Result<PosteriorWeights> {
    let sigma_chol = SpdChol::new(&params.sigma_mat, "Sigma")?;
    let eval = SubjectEval::new(subject, params, cum_hazard_at_t, &sigma_chol)?;
    posterior_weights_ctx(&eval, nodes, grid, &subject.id)
}

/// All E-step expectations for one subject: `E(b)`, `E(bb')` and the
/// per-cause exponential-tilted moments.
pub fn posterior_moments(
    subject: &Subject,
    params: &ParameterSet,
    nodes: &NodeSet,
    grid: &QuadratureGrid,
    cum_hazard_at_t: &[f64],
) -> Result<SubjectMoments> {
    let weights = posterior_weights(subject, params, nodes, grid, cum_hazard_at_t)?;
    let nus: Vec<&DVector<f64>> = params.causes.iter().map(|c| &c.nu).collect();
    let moments = moments_from_weights(&weights, nodes, &nus);
    debug_assert!({
        let total: f64 = weights.weights.iter().sum();
        (total - 1.0).abs() <= 1e-12
    });
    Ok(moments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BaselineHazard, CauseParams, LongitudinalObs};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn rule_order_one_is_origin() {
        let r = gh_rule(1).unwrap();
        assert_eq!(r.nodes(), &[0.0]);
        assert_relative_eq!(r.weights()[0], SQRT_PI, epsilon = 1e-14);
    }

    #[test]
    fn rule_order_two_matches_hermite_roots() {
        let r = gh_rule(2).unwrap();
        let inv_sqrt2 = 1.0 / std::f64::consts::SQRT_2;
        assert_relative_eq!(r.nodes()[0], -inv_sqrt2, epsilon = 1e-14);
        assert_relative_eq!(r.nodes()[1], inv_sqrt2, epsilon = 1e-14);
        assert_relative_eq!(r.weights()[0], SQRT_PI / 2.0, epsilon = 1e-14);
        assert_relative_eq!(r.weights()[1], SQRT_PI / 2.0, epsilon = 1e-14);
    }

    #[test]
    fn rule_invariants_hold_across_orders() {
        for order in [1, 2, 3, 5, 8, 13, 20, 32, 64] {
            let r = gh_rule(order).unwrap();
            let sum_w: f64 = r.weights().iter().sum();
            assert_relative_eq!(sum_w, SQRT_PI, epsilon = 1e-12);
            let m1: f64 = r.weights().iter().zip(r.nodes()).map(|(w, x)| w * x).sum();
            assert!(m1.abs() < 1e-12, "order {order}: first moment {m1}");
            if order >= 2 {
                // x^2 needs degree-2 exactness, i.e. order >= 2.
                let m2: f64 = r
                    .weights()
                    .iter()
                    .zip(r.nodes())
                    .map(|(w, x)| w * x * x)
                    .sum();
                assert_relative_eq!(m2, SQRT_PI / 2.0, epsilon = 1e-10);
            }
            assert!(r.nodes().windows(2).all(|w| w[0] < w[1]));
            assert!(r.weights().iter().all(|&w| w > 0.0));
        }
    }

    #[test]
    fn rule_order_twenty_integrates_quartic_exactly() {
        let r = gh_rule(20).unwrap();
        let m4: f64 = r
            .weights()
            .iter()
            .zip(r.nodes())
            .map(|(w, x)| w * x.powi(4))
            .sum();
        assert_relative_eq!(m4, 0.75 * SQRT_PI, epsilon = 1e-10);
    }

    #[test]
    fn rule_rejects_out_of_range_order() {
        assert!(gh_rule(0).is_err());
        assert!(gh_rule(65).is_err());
    }

    #[test]
    fn tensor_dim_one_matches_rule() {
        let r = gh_rule(5).unwrap();
        let g = tensor_grid(&r, 1).unwrap();
        assert_eq!(g.n_points(), 5);
        for (i, &x) in r.nodes().iter().enumerate() {
            assert_eq!(g.points()[(i, 0)], x);
            assert_relative_eq!(
                g.log_weight_adj()[i],
                r.weights()[i].ln() + x * x,
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn tensor_two_by_two_enumeration() {
        let r = gh_rule(2).unwrap();
        let g = tensor_grid(&r, 2).unwrap();
        assert_eq!(g.n_points(), 4);
        let want = 2.0 * (SQRT_PI / 2.0).ln() + 1.0;
        for t in 0..4 {
            assert_relative_eq!(g.log_weight_adj()[t], want, epsilon = 1e-12);
            let norm2 = g.points()[(t, 0)].powi(2) + g.points()[(t, 1)].powi(2);
            assert_relative_eq!(norm2, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn tensor_cube_count() {
        let r = gh_rule(6).unwrap();
        let g = tensor_grid(&r, 3).unwrap();
        assert_eq!(g.n_points(), 216);
    }

    #[test]
    fn tensor_guard_rejects_enormous_grids() {
        let r = gh_rule(64).unwrap();
        assert!(tensor_grid(&r, 4).is_err());
    }

    #[test]
    fn standard_nodes_identity_sigma_is_sqrt2_scale() {
        let r = gh_rule(4).unwrap();
        let g = tensor_grid(&r, 1).unwrap();
        let sigma = DMatrix::identity(1, 1);
        let ns = subject_nodes(&g, &NodeTransform::Standard { sigma: &sigma }).unwrap();
        for t in 0..4 {
            assert_relative_eq!(
                ns.points[(t, 0)],
                std::f64::consts::SQRT_2 * g.points()[(t, 0)],
                epsilon = 1e-14
            );
        }
        assert_relative_eq!(ns.log_jacobian, 0.5 * std::f64::consts::LN_2, epsilon = 1e-14);
    }

    #[test]
    fn pseudo_nodes_center_on_b_tilde() {
        let r = gh_rule(3).unwrap();
        let g = tensor_grid(&r, 2).unwrap();
        let b_tilde = DVector::from_row_slice(&[1.5, -0.5]);
        let h = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.1, 0.3]);
        let ns = subject_nodes(
            &g,
            &NodeTransform::PseudoAdaptive {
                b_tilde: &b_tilde,
                h_inv_sqrt: &h,
            },
        )
        .unwrap();
        // The c = 0 row maps exactly to b_tilde.
        let center = g
            .points()
            .row_iter()
            .position(|row| row.iter().all(|&x| x == 0.0))
            .unwrap();
        assert_eq!(ns.points[(center, 0)], 1.5);
        assert_eq!(ns.points[(center, 1)], -0.5);
    }

    #[test]
    fn standard_nodes_factorization_roundtrip() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let a = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0));
        let sigma = &a * a.transpose() + DMatrix::identity(2, 2);
        let r = gh_rule(3).unwrap();
        let g = tensor_grid(&r, 2).unwrap();
        let ns = subject_nodes(&g, &NodeTransform::Standard { sigma: &sigma }).unwrap();
        let l = SpdChol::new(&sigma, "test").unwrap().lower();
        for t in 0..g.n_points() {
            let row = ns.points.row(t).transpose() / std::f64::consts::SQRT_2;
            let c = l.clone().solve_lower_triangular(&row).unwrap();
            for d in 0..2 {
                assert_relative_eq!(c[d], g.points()[(t, d)], epsilon = 1e-12);
            }
        }
    }

    fn prior_only_subject(q: usize, k: usize) -> (Subject, ParameterSet) {
        let params = ParameterSet {
            beta: DVector::zeros(1),
            sigma2: 1.0,
            sigma_mat: DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.25]),
            causes: (0..k)
                .map(|_| CauseParams {
                    gamma: DVector::zeros(1),
                    nu: DVector::from_element(q, 0.3),
                    baseline: BaselineHazard::empty(),
                })
                .collect(),
        };
        let subject = Subject {
            id: "s".into(),
            obs: vec![],
            surv_covariates: DVector::zeros(1),
            obs_time: 1.0,
            cause: 0,
        };
        (subject, params)
    }

    #[test]
    fn weights_normalize_and_prior_moments_recovered() {
        let (subject, params) = prior_only_subject(2, 1);
        let r = gh_rule(8).unwrap();
        let g = tensor_grid(&r, 2).unwrap();
        let ns = subject_nodes(
            &g,
            &NodeTransform::Standard {
                sigma: &params.sigma_mat,
            },
        )
        .unwrap();
        let w = posterior_weights(&subject, &params, &ns, &g, &[0.0]).unwrap();
        let total: f64 = w.weights.iter().sum();
        assert!((total - 1.0).abs() <= 1e-12);
        let m = posterior_moments(&subject, &params, &ns, &g, &[0.0]).unwrap();
        // Prior symmetry: Eb = 0 exactly up to node antisymmetry.
        assert!(m.eb.norm() < 1e-12, "Eb = {}", m.eb);
        // Ebb reproduces Sigma (polynomial exactness).
        assert!((m.ebb.clone() - &params.sigma_mat).norm() < 1e-10);
        // Marginal log-likelihood of "no data" is log(1) = 0.
        assert!(m.marginal_loglik.abs() < 1e-10);
        // E{exp(nu'b)} of a centered Gaussian: exp(nu' Sigma nu / 2).
        let nu = &params.causes[0].nu;
        let want = (0.5 * (nu.transpose() * &params.sigma_mat * nu)[(0, 0)]).exp();
        assert_relative_eq!(m.causes[0].eexp, want, epsilon = 1e-8);
    }

    #[test]
    fn conjugate_normal_posterior_mean_matches_closed_form() {
        // Pure-LMM subject (censored, zero hazards): the posterior is exactly
        // Gaussian with precision H = Z'Z/sigma2 + Sigma^{-1}.
        let q = 2;
        let mut params = prior_only_subject(q, 1).1;
        params.beta = DVector::from_row_slice(&[0.8]);
        params.sigma2 = 5.0;
        let ys = [0.9, 0.3];
        let obs: Vec<LongitudinalObs> = (0..2)
            .map(|j| {
                let z = DVector::from_row_slice(&[1.0, j as f64 * 0.5]);
                LongitudinalObs::new(j as f64, ys[j], DVector::from_row_slice(&[1.0]), z)
                    .unwrap()
            })
            .collect();
        let subject = Subject {
            id: "s".into(),
            obs,
            surv_covariates: DVector::zeros(1),
            obs_time: 10.0,
            cause: 0,
        };
        let r = gh_rule(9).unwrap();
        let g = tensor_grid(&r, q).unwrap();
        let ns = subject_nodes(
            &g,
            &NodeTransform::Standard {
                sigma: &params.sigma_mat,
            },
        )
        .unwrap();
        let m = posterior_moments(&subject, &params, &ns, &g, &[0.0]).unwrap();

        let mut h = params.sigma_mat.clone().try_inverse().unwrap();
        let mut rhs = DVector::zeros(q);
        for o in &subject.obs {
            h += &o.random_design * o.random_design.transpose() / params.sigma2;
            rhs += &o.random_design * (o.response - o.fixed_design.dot(&params.beta))
                / params.sigma2;
        }
        let h_inv = h.clone().try_inverse().unwrap();
        let mu = &h_inv * rhs;
        assert!((m.eb.clone() - &mu).norm() < 1e-8, "Eb {} vs {}", m.eb, mu);
        // Posterior covariance check too: Ebb - Eb Eb' = H^{-1}.
        let cov = m.ebb.clone() - &m.eb * m.eb.transpose();
        assert!((cov - &h_inv).norm() < 1e-7);

        // Pseudo-adaptive nodes centered at the exact posterior make the
        // c-space integrand Gaussian-times-polynomial: near machine exact
        // already at order 6.
        let l = SpdChol::new(&h_inv, "test").unwrap().lower();
        let r6 = gh_rule(6).unwrap();
        let g6 = tensor_grid(&r6, q).unwrap();
        let ns6 = subject_nodes(
            &g6,
            &NodeTransform::PseudoAdaptive {
                b_tilde: &mu,
                h_inv_sqrt: &l,
            },
        )
        .unwrap();
        let m6 = posterior_moments(&subject, &params, &ns6, &g6, &[0.0]).unwrap();
        assert!((m6.eb.clone() - &mu).norm() < 1e-12);
    }

    #[test]
    fn marginal_loglik_matches_closed_form_gaussian() {
        // For the pure-LMM subject the marginal is N(X beta, Z Sigma Z' + sigma2 I).
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let q = 2;
        let mut params = prior_only_subject(q, 1).1;
        params.beta = DVector::from_row_slice(&[0.4]);
        params.sigma2 = 0.8;
        let n_i = 3;
        let obs: Vec<LongitudinalObs> = (0..n_i)
            .map(|j| {
                LongitudinalObs::new(
                    j as f64,
                    rng.gen_range(-1.0..1.0),
                    DVector::from_row_slice(&[1.0]),
                    DVector::from_row_slice(&[1.0, j as f64]),
                )
                .unwrap()
            })
            .collect();
        let subject = Subject {
            id: "s".into(),
            obs,
            surv_covariates: DVector::zeros(1),
            obs_time: 5.0,
            cause: 0,
        };
        let r = gh_rule(40).unwrap();
        let g = tensor_grid(&r, q).unwrap();
        let ns = subject_nodes(
            &g,
            &NodeTransform::Standard {
                sigma: &params.sigma_mat,
            },
        )
        .unwrap();
        let m = posterior_moments(&subject, &params, &ns, &g, &[0.0]).unwrap();

        let mut z = DMatrix::zeros(n_i, q);
        let mut resid = DVector::zeros(n_i);
        for (j, o) in subject.obs.iter().enumerate() {
            z.row_mut(j).copy_from(&o.random_design.transpose());
            resid[j] = o.response - o.fixed_design.dot(&params.beta);
        }
        let v = &z * &params.sigma_mat * z.transpose()
            + DMatrix::identity(n_i, n_i) * params.sigma2;
        let chol = SpdChol::new(&v, "test").unwrap();
        let want = -0.5
            * (n_i as f64 * LOG_2PI + chol.log_det() + chol.inv_quadratic(&resid));
        assert_relative_eq!(m.marginal_loglik, want, epsilon = 1e-9);
    }

    #[test]
    fn moment_refinement_is_monotone() {
        // |Eb(n_q) - Eb(n_q + 4)| shrinks as the rule grows.
        let mut rng = ChaCha12Rng::seed_from_u64(55);
        let q = 2;
        let mut params = prior_only_subject(q, 1).1;
        params.causes[0].nu = DVector::from_row_slice(&[0.8, -0.4]);
        params.causes[0].baseline = BaselineHazard::new(vec![2.0], vec![0.4]).unwrap();
        let obs: Vec<LongitudinalObs> = (0..3)
            .map(|j| {
                LongitudinalObs::new(
                    j as f64,
                    rng.gen_range(-1.0..1.5),
                    DVector::from_row_slice(&[1.0]),
                    DVector::from_row_slice(&[1.0, j as f64 * 0.3]),
                )
                .unwrap()
            })
            .collect();
        let subject = Subject {
            id: "s".into(),
            obs,
            surv_covariates: DVector::from_row_slice(&[0.5]),
            obs_time: 3.0,
            cause: 0,
        };
        params.causes[0].gamma = DVector::from_row_slice(&[0.3]);
        let cum = [params.causes[0].baseline.cumulative_at(3.0)];
        let eb_at = |order: usize| {
            let r = gh_rule(order).unwrap();
            let g = tensor_grid(&r, q).unwrap();
            let ns = subject_nodes(
                &g,
                &NodeTransform::Standard {
                    sigma: &params.sigma_mat,
                },
            )
            .unwrap();
            posterior_moments(&subject, &params, &ns, &g, &cum)
                .unwrap()
                .eb
        };
        let gaps: Vec<f64> = [4usize, 8, 12]
            .iter()
            .map(|&o| (eb_at(o) - eb_at(o + 4)).norm())
            .collect();
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "gaps {gaps:?}");
    }

    #[test]
    fn ebbexp_and_ebb_are_symmetric() {
        let (subject, params) = prior_only_subject(2, 2);
        let r = gh_rule(6).unwrap();
        let g = tensor_grid(&r, 2).unwrap();
        let ns = subject_nodes(
            &g,
            &NodeTransform::Standard {
                sigma: &params.sigma_mat,
            },
        )
        .unwrap();
        let m = posterior_moments(&subject, &params, &ns, &g, &[0.0, 0.0]).unwrap();
        assert!((m.ebb.clone() - m.ebb.transpose()).norm() <= 1e-14);
        for c in &m.causes {
            assert!((c.ebbexp.clone() - c.ebbexp.transpose()).norm() <= 1e-14);
            assert!(c.eexp > 0.0);
        }
    }
}
