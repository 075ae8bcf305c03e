//! Finite-difference oracle for the profiled-likelihood score vectors.
//!
//! The oracle evaluates each subject's profiled log-likelihood directly: at
//! every perturbed parameter vector it rebuilds the Breslow plug-in baseline
//! (with the posterior expectations frozen at the fitted node weights) and
//! re-runs the quadrature sum. Central differences of that function must
//! match every component of the analytic score matrix.

use fastjm::em::{em_fit, EmConfig, NodeCache};
use fastjm::inference::{profiled_scores, OmegaLayout};
use fastjm::linalg::SpdChol;
use fastjm::model::{
    log_longitudinal_density, log_survival_density, BaselineHazard, Dataset, ParameterSet,
};
use fastjm::simulate::{simulate_dataset, CauseTruth, SimConfig};
use nalgebra::DVector;

const LOG_2PI: f64 = 1.8378770664093453;

/// Profiled log-likelihood of one subject at `params`, with the Breslow
/// plug-in rebuilt from the frozen posterior node weights of `fit`.
struct ProfiledOracle<'a> {
    dataset: &'a Dataset,
    nodes: &'a NodeCache,
    grid: &'a fastjm::quadrature::QuadratureGrid,
    weights: &'a [Vec<f64>],
}

impl<'a> ProfiledOracle<'a> {
    /// E{exp(nu' b_r)} under subject r's frozen posterior.
    fn frozen_eexp(&self, r: usize, nu: &DVector<f64>) -> f64 {
        let pts = &self.nodes.for_subject(r).points;
        self.weights[r]
            .iter()
            .enumerate()
            .map(|(t, &w)| {
                let mut dot = 0.0;
                for d in 0..nu.len() {
                    dot += nu[d] * pts[(t, d)];
                }
                w * dot.exp()
            })
            .sum()
    }

    /// Plug-in baselines at the given survival parameters.
    fn plug_in_baselines(&self, params: &ParameterSet) -> Vec<BaselineHazard> {
        (1..=self.dataset.n_causes())
            .map(|k| {
                let knots = self.dataset.event_times(k);
                let mult = self.dataset.event_multiplicities(k);
                let cause = &params.causes[k - 1];
                let eexp: Vec<f64> = (0..self.dataset.n_subjects())
                    .map(|r| {
                        let x2 = &self.dataset.subjects()[r].surv_covariates;
                        x2.dot(&cause.gamma).exp() * self.frozen_eexp(r, &cause.nu)
                    })
                    .collect();
                let jumps: Vec<f64> = knots
                    .iter()
                    .zip(mult)
                    .map(|(&t, &d)| {
                        let s0: f64 = self
                            .dataset
                            .subjects()
                            .iter()
                            .enumerate()
                            .filter(|(_, s)| s.obs_time >= t)
                            .map(|(r, _)| eexp[r])
                            .sum();
                        d / s0
                    })
                    .collect();
                BaselineHazard::new(knots.to_vec(), jumps).unwrap()
            })
            .collect()
    }

    /// log integral f(Y_i | b) f(C_i | b; plug-in) phi(b; Sigma) db by the
    /// fixed-node quadrature sum.
    fn subject_loglik(&self, i: usize, params: &ParameterSet) -> f64 {
        let baselines = self.plug_in_baselines(params);
        let mut plugged = params.clone();
        for (c, b) in plugged.causes.iter_mut().zip(baselines) {
            c.baseline = b;
        }
        let subject = &self.dataset.subjects()[i];
        let cum: Vec<f64> = plugged
            .causes
            .iter()
            .map(|c| c.baseline.cumulative_at(subject.obs_time))
            .collect();
        let chol = SpdChol::new(&plugged.sigma_mat, "oracle Sigma").unwrap();
        let ns = self.nodes.for_subject(i);
        let q = self.grid.dim();
        let mut best = f64::NEG_INFINITY;
        let mut terms = Vec::with_capacity(self.grid.n_points());
        for t in 0..self.grid.n_points() {
            let b = DVector::from_fn(q, |d, _| ns.points[(t, d)]);
            let ll = log_longitudinal_density(subject, &b, &plugged).unwrap()
                + log_survival_density(subject, &b, &plugged, &cum).unwrap()
                - 0.5 * (q as f64 * LOG_2PI + chol.log_det() + chol.inv_quadratic(&b))
                + self.grid.log_weight_adj()[t];
            best = best.max(ll);
            terms.push(ll);
        }
        let sum: f64 = terms.iter().map(|l| (l - best).exp()).sum();
        best + sum.ln() + ns.log_jacobian
    }
}

fn check_scores_against_oracle(config: &SimConfig) {
    let ds = simulate_dataset(config).unwrap();
    let fit = em_fit(
        &ds,
        &EmConfig {
            tol: 1e-9,
            max_iter: 20_000,
            ..EmConfig::default()
        },
    )
    .unwrap();
    assert!(fit.converged, "fit must converge for the oracle comparison");
    let scores = profiled_scores(&ds, &fit).unwrap();
    let layout = OmegaLayout::new(&ds);
    let omega0 = layout.pack(&fit.params);
    let oracle = ProfiledOracle {
        dataset: &ds,
        nodes: &fit.nodes,
        grid: &fit.grid,
        weights: &fit.weights,
    };

    let mut checked = 0usize;
    for a in 0..layout.dim() {
        let h = 1e-5 * (1.0 + omega0[a].abs());
        let mut plus = omega0.clone();
        let mut minus = omega0.clone();
        plus[a] += h;
        minus[a] -= h;
        let params_plus = layout.unpack(&plus, &fit.params);
        let params_minus = layout.unpack(&minus, &fit.params);
        for i in 0..ds.n_subjects() {
            let fd = (oracle.subject_loglik(i, &params_plus)
                - oracle.subject_loglik(i, &params_minus))
                / (2.0 * h);
            let analytic = scores.scores[(i, a)];
            let denom = fd.abs().max(analytic.abs());
            let ok = (fd - analytic).abs() <= 1e-4 * denom
                || (fd - analytic).abs() <= 1e-6;
            assert!(
                ok,
                "component {} ({}) subject {}: fd {fd} vs analytic {analytic}",
                a,
                layout.names()[a],
                ds.subjects()[i].id
            );
            checked += 1;
        }
    }
    assert_eq!(checked, layout.dim() * ds.n_subjects());
}

#[test]
fn profiled_scores_match_finite_differences_two_causes() {
    check_scores_against_oracle(&SimConfig {
        n: 60,
        seed: 4242,
        ..SimConfig::default()
    });
}

#[test]
fn profiled_scores_match_finite_differences_single_cause() {
    check_scores_against_oracle(&SimConfig {
        n: 60,
        seed: 1777,
        causes: vec![CauseTruth {
            lambda0: 0.1,
            gamma: vec![0.4, -0.3],
            nu: vec![0.7, 0.5],
        }],
        ..SimConfig::default()
    });
}
