//! Versioned JSON fit report.
//!
//! Every floating-point value is serialized with 17 significant digits so a
//! parsed report reproduces the in-memory values bit for bit. Reports carry
//! a `report_version` field; the golden-file test pins the schema.

use std::io::Write as _;

use serde::{Deserialize, Serialize};

use crate::em::{EmConfig, FitResult, PhaseTiming};
use crate::error::Result;
use crate::inference::OmegaLayout;
use crate::model::Dataset;
use nalgebra::DVector;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedValue {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CauseReport {
    pub cause: usize,
    pub gamma: Vec<NamedValue>,
    pub nu: Vec<NamedValue>,
    pub n_events: usize,
    pub baseline_knots: usize,
    /// Cumulative baseline hazard at the largest knot.
    pub cum_hazard_total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Estimates {
    pub beta: Vec<NamedValue>,
    pub sigma2: f64,
    /// Row-major random-effect covariance.
    pub sigma: Vec<Vec<f64>>,
    pub causes: Vec<CauseReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadratureReport {
    pub mode: String,
    pub n_q: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub report_version: u32,
    pub n_subjects: usize,
    pub n_causes: usize,
    pub quadrature: QuadratureReport,
    pub converged: bool,
    pub iterations: usize,
    pub loglik: f64,
    pub loglik_trace: Vec<f64>,
    pub estimates: Estimates,
    /// Standard errors in the packed parametric-component order; absent when
    /// SE computation was disabled.
    pub standard_errors: Option<Vec<NamedValue>>,
    pub timing: PhaseTiming,
    pub warnings: Vec<String>,
}

impl Report {
    pub fn from_fit(
        dataset: &Dataset,
        fit: &FitResult,
        config: &EmConfig,
        se: Option<(&OmegaLayout, &DVector<f64>)>,
    ) -> Report {
        let named = |names: &[String], values: &DVector<f64>| -> Vec<NamedValue> {
            names
                .iter()
                .zip(values.iter())
                .map(|(n, &v)| NamedValue {
                    name: n.clone(),
                    value: v,
                })
                .collect()
        };
        let estimates = Estimates {
            beta: named(&dataset.fixed_names, &fit.params.beta),
            sigma2: fit.params.sigma2,
            sigma: (0..dataset.q())
                .map(|r| (0..dataset.q()).map(|c| fit.params.sigma_mat[(r, c)]).collect())
                .collect(),
            causes: fit
                .params
                .causes
                .iter()
                .enumerate()
                .map(|(kix, c)| CauseReport {
                    cause: kix + 1,
                    gamma: named(&dataset.surv_names, &c.gamma),
                    nu: named(&dataset.random_names, &c.nu),
                    n_events: dataset.n_events(kix + 1),
                    baseline_knots: c.baseline.len(),
                    cum_hazard_total: c.baseline.cumulative().first().copied().unwrap_or(0.0),
                })
                .collect(),
        };
        Report {
            report_version: REPORT_VERSION,
            n_subjects: dataset.n_subjects(),
            n_causes: dataset.n_causes(),
            quadrature: QuadratureReport {
                mode: match config.quad_mode {
                    crate::em::QuadMode::Standard => "standard".into(),
                    crate::em::QuadMode::PseudoAdaptive => "pseudo_adaptive".into(),
                },
                n_q: config.n_q,
            },
            converged: fit.converged,
            iterations: fit.iterations,
            loglik: fit.loglik(),
            loglik_trace: fit.loglik_trace.clone(),
            estimates,
            standard_errors: se.map(|(layout, values)| {
                layout
                    .names()
                    .iter()
                    .zip(values.iter())
                    .map(|(n, &v)| NamedValue {
                        name: n.clone(),
                        value: v,
                    })
                    .collect()
            }),
            timing: fit.timing.clone(),
            warnings: fit.warnings.clone(),
        }
    }

    /// Serialized with 17-significant-digit floats.
    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let mut ser = serde_json::Serializer::with_formatter(&mut out, SigDigitFormatter);
        serde::Serialize::serialize(self, &mut ser)?;
        out.push(b'\n');
        Ok(out)
    }

    /// Serialization with the wall-clock fields zeroed; used to compare runs
    /// for bitwise reproducibility.
    pub fn canonical_bytes(&self) -> Result<Vec<u8>> {
        let mut canonical = self.clone();
        canonical.timing = PhaseTiming::default();
        canonical.to_json_bytes()
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_json_bytes()?)?;
        Ok(())
    }

    /// Fixed-width human-readable table of estimates and standard errors.
    pub fn table(&self) -> String {
        let mut rows: Vec<(String, f64, Option<f64>)> = Vec::new();
        let se_value = |name: &str| -> Option<f64> {
            self.standard_errors
                .as_ref()
                .and_then(|se| se.iter().find(|nv| nv.name == name).map(|nv| nv.value))
        };
        for nv in &self.estimates.beta {
            rows.push((
                format!("beta[{}]", nv.name),
                nv.value,
                se_value(&format!("beta[{}]", nv.name)),
            ));
        }
        for (r, row) in self.estimates.sigma.iter().enumerate() {
            for (c, &v) in row.iter().enumerate().take(r + 1) {
                rows.push((format!("Sigma[{r},{c}]"), v, se_value(&format!("Sigma[{r},{c}]"))));
            }
        }
        rows.push(("sigma2".into(), self.estimates.sigma2, se_value("sigma2")));
        for cr in &self.estimates.causes {
            for nv in &cr.gamma {
                let name = format!("gamma{}[{}]", cr.cause, nv.name);
                rows.push((name.clone(), nv.value, se_value(&name)));
            }
            for nv in &cr.nu {
                let name = format!("nu{}[{}]", cr.cause, nv.name);
                rows.push((name.clone(), nv.value, se_value(&name)));
            }
        }
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:>14} {:>14}\n",
            "parameter", "estimate", "std.err"
        ));
        for (name, est, se) in rows {
            out.push_str(&format!(
                "{:<24} {:>14.6} {:>14}\n",
                name,
                est,
                se.map_or("-".into(), |v| format!("{v:.6}"))
            ));
        }
        out.push_str(&format!(
            "log-likelihood {:.6}  iterations {}  converged {}\n",
            self.loglik, self.iterations, self.converged
        ));
        out
    }
}

/// JSON formatter that prints every float with 17 significant digits.
struct SigDigitFormatter;

impl serde_json::ser::Formatter for SigDigitFormatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.16e}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::{em_fit, EmConfig};
    use crate::simulate::{simulate_dataset, SimConfig};

    #[test]
    fn floats_roundtrip_through_json() {
        let ds = simulate_dataset(&SimConfig {
            n: 50,
            seed: 8,
            ..SimConfig::default()
        })
        .unwrap();
        let cfg = EmConfig {
            max_iter: 20,
            tol: 1e-3,
            ..EmConfig::default()
        };
        let fit = em_fit(&ds, &cfg).unwrap();
        let report = Report::from_fit(&ds, &fit, &cfg, None);
        let bytes = report.to_json_bytes().unwrap();
        let parsed: Report = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(parsed.loglik, report.loglik);
        assert_eq!(parsed.estimates.sigma2, report.estimates.sigma2);
        for (a, b) in parsed
            .estimates
            .beta
            .iter()
            .zip(report.estimates.beta.iter())
        {
            assert_eq!(a.value, b.value);
        }
        for (a, b) in parsed.loglik_trace.iter().zip(&report.loglik_trace) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn canonical_bytes_ignore_timing() {
        let ds = simulate_dataset(&SimConfig {
            n: 30,
            seed: 9,
            ..SimConfig::default()
        })
        .unwrap();
        let cfg = EmConfig {
            max_iter: 5,
            tol: 1e-3,
            ..EmConfig::default()
        };
        let fit1 = em_fit(&ds, &cfg).unwrap();
        let fit2 = em_fit(&ds, &cfg).unwrap();
        let r1 = Report::from_fit(&ds, &fit1, &cfg, None);
        let r2 = Report::from_fit(&ds, &fit2, &cfg, None);
        assert_eq!(
            r1.canonical_bytes().unwrap(),
            r2.canonical_bytes().unwrap()
        );
    }

    #[test]
    fn table_mentions_every_parameter() {
        let ds = simulate_dataset(&SimConfig {
            n: 30,
            seed: 10,
            ..SimConfig::default()
        })
        .unwrap();
        let cfg = EmConfig {
            max_iter: 5,
            tol: 1e-3,
            ..EmConfig::default()
        };
        let fit = em_fit(&ds, &cfg).unwrap();
        let report = Report::from_fit(&ds, &fit, &cfg, None);
        let table = report.table();
        for name in ["beta[intercept]", "beta[time]", "sigma2", "gamma1[x1]", "nu2[time]"] {
            assert!(table.contains(name), "missing {name} in\n{table}");
        }
    }
}
