//! Timing harness comparing the scan kernels against the naive reference
//! implementations across sample sizes.
//!
//! Each cell simulates one dataset (seed fixed per size), runs a method, and
//! records the median wall-clock over a few repetitions. Naive cells whose
//! predicted cost exceeds the per-cell budget are skipped and marked, so the
//! quadratic and cubic baselines cannot stall the run. Before any timing,
//! a cross-backend equivalence pass asserts that scan and naive methods
//! produce the same numbers on the smallest size.
//!
//! Timing is single-threaded by default so the comparison measures the
//! algorithms, not parallelism.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::em::{em_fit, EmConfig, KernelBackend};
use crate::error::{Error, Result};
use crate::inference::profiled_scores_with_backend;
use crate::lmm::{empirical_bayes_all, fit_lmm};
use crate::model::Dataset;
use crate::naive;
use crate::scan::{step_lookup_scan, DescendingKnots, ScanStats};
use crate::simulate::{simulate_dataset, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMethod {
    NaiveEm,
    ScanEm,
    NaiveSe,
    ScanSe,
    NaiveLookup,
    ScanLookup,
    NaiveEb,
    ScanEb,
}

impl BenchMethod {
    pub fn name(&self) -> &'static str {
        match self {
            BenchMethod::NaiveEm => "naive_em",
            BenchMethod::ScanEm => "scan_em",
            BenchMethod::NaiveSe => "naive_se",
            BenchMethod::ScanSe => "scan_se",
            BenchMethod::NaiveLookup => "naive_lookup",
            BenchMethod::ScanLookup => "scan_lookup",
            BenchMethod::NaiveEb => "naive_eb",
            BenchMethod::ScanEb => "scan_eb",
        }
    }

    fn scan_partner(&self) -> &'static str {
        match self {
            BenchMethod::NaiveEm | BenchMethod::ScanEm => "scan_em",
            BenchMethod::NaiveSe | BenchMethod::ScanSe => "scan_se",
            BenchMethod::NaiveLookup | BenchMethod::ScanLookup => "scan_lookup",
            BenchMethod::NaiveEb | BenchMethod::ScanEb => "scan_eb",
        }
    }

    fn is_naive(&self) -> bool {
        matches!(
            self,
            BenchMethod::NaiveEm
                | BenchMethod::NaiveSe
                | BenchMethod::NaiveLookup
                | BenchMethod::NaiveEb
        )
    }

    /// Cost-growth exponent used to predict whether a larger cell would
    /// blow the budget.
    fn growth_exponent(&self) -> f64 {
        match self {
            BenchMethod::NaiveSe => 3.0,
            m if m.is_naive() => 2.0,
            _ => 1.0,
        }
    }
}

fn default_sizes() -> Vec<usize> {
    vec![100, 500, 1000, 5000, 10_000, 50_000, 100_000]
}

fn default_methods() -> Vec<BenchMethod> {
    vec![
        BenchMethod::NaiveEm,
        BenchMethod::ScanEm,
        BenchMethod::NaiveSe,
        BenchMethod::ScanSe,
        BenchMethod::NaiveLookup,
        BenchMethod::ScanLookup,
    ]
}

fn default_repetitions() -> usize {
    3
}

fn default_budget() -> f64 {
    60.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchPlan {
    #[serde(default = "default_sizes")]
    pub sizes: Vec<usize>,
    #[serde(default = "default_methods")]
    pub methods: Vec<BenchMethod>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    /// Per-cell budget in seconds; predicted overruns are skipped and marked.
    #[serde(default = "default_budget")]
    pub time_budget_s: f64,
    /// Run the timed cells with the ambient thread pool instead of a
    /// single-threaded one.
    #[serde(default)]
    pub parallel: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for BenchPlan {
    fn default() -> Self {
        BenchPlan {
            sizes: default_sizes(),
            methods: default_methods(),
            repetitions: default_repetitions(),
            time_budget_s: default_budget(),
            parallel: false,
            seed: 0,
        }
    }
}

impl BenchPlan {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("bench sizes must be positive and ascending"));
        }
        if self.repetitions < 1 {
            return Err(Error::invalid("repetitions must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchCell {
    pub n: usize,
    pub method: String,
    /// Median seconds per run; absent when the cell was skipped.
    pub seconds: Option<f64>,
    pub status: String,
    pub fold_change_vs_scan: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchResults {
    pub cells: Vec<BenchCell>,
    /// Calibrated timing overhead of the harness itself.
    pub harness_overhead_s: f64,
}

impl BenchResults {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "n,method,seconds,fold_change_vs_scan,status")?;
        for c in &self.cells {
            writeln!(
                f,
                "{},{},{},{},{}",
                c.n,
                c.method,
                c.seconds.map_or(String::new(), |s| format!("{s}")),
                c.fold_change_vs_scan
                    .map_or(String::new(), |r| format!("{r}")),
                c.status
            )?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "harness overhead: {:.3e} s per measurement\n",
            self.harness_overhead_s
        ));
        out.push_str(&format!(
            "{:>10} {:>14} {:>14} {:>12} {}\n",
            "n", "method", "seconds", "fold", "status"
        ));
        for c in &self.cells {
            out.push_str(&format!(
                "{:>10} {:>14} {:>14} {:>12} {}\n",
                c.n,
                c.method,
                c.seconds.map_or("-".into(), |s| format!("{s:.6}")),
                c.fold_change_vs_scan
                    .map_or("-".into(), |r| format!("{r:.1}")),
                c.status
            ));
        }
        out
    }

    pub fn seconds_for(&self, n: usize, method: &str) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.n == n && c.method == method)
            .and_then(|c| c.seconds)
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

/// Median time over `reps` runs of `f`, with enough inner iterations that a
/// single measurement stays well above the clock overhead.
fn time_once<F: FnMut()>(mut f: F) -> f64 {
    let t0 = Instant::now();
    f();
    t0.elapsed().as_secs_f64()
}

fn timed_cell<F: FnMut()>(reps: usize, mut f: F) -> f64 {
    // First measurement decides whether inner repetition is needed to get
    // the cell above ~5 ms.
    let first = time_once(&mut f);
    if first >= 5e-3 {
        let mut times = vec![first];
        for _ in 1..reps {
            times.push(time_once(&mut f));
        }
        return median(times);
    }
    let inner = ((5e-3 / first.max(1e-9)).ceil() as usize).clamp(1, 1_000_000);
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        for _ in 0..inner {
            f();
        }
        times.push(t0.elapsed().as_secs_f64() / inner as f64);
    }
    median(times)
}

fn bench_em_config(backend: KernelBackend) -> EmConfig {
    // Fixed iteration count so cells measure per-iteration scaling rather
    // than data-dependent convergence paths.
    EmConfig {
        tol: 1e-300,
        max_iter: 5,
        backend,
        ..EmConfig::default()
    }
}

fn run_method(method: BenchMethod, dataset: &Dataset, reps: usize) -> Result<f64> {
    use std::hint::black_box;
    let seconds = match method {
        BenchMethod::ScanEm | BenchMethod::NaiveEm => {
            let backend = if method.is_naive() {
                KernelBackend::Naive
            } else {
                KernelBackend::Scan
            };
            let cfg = bench_em_config(backend);
            timed_cell(reps, || {
                black_box(em_fit(dataset, &cfg).unwrap());
            })
        }
        BenchMethod::ScanSe | BenchMethod::NaiveSe => {
            let backend = if method.is_naive() {
                KernelBackend::Naive
            } else {
                KernelBackend::Scan
            };
            let mut fit = em_fit(
                dataset,
                &EmConfig {
                    tol: 1e-3,
                    max_iter: 50,
                    ..EmConfig::default()
                },
            )?;
            // Timing only: the score pass requires a converged flag.
            fit.converged = true;
            timed_cell(reps, || {
                black_box(profiled_scores_with_backend(dataset, &fit, backend).unwrap());
            })
        }
        BenchMethod::ScanLookup | BenchMethod::NaiveLookup => {
            // Step-function lookups of every subject's cumulative hazard,
            // one pass per cause, on the null Breslow baseline.
            let fitcfg = bench_em_config(KernelBackend::Scan);
            let fit = em_fit(dataset, &fitcfg)?;
            let baselines: Vec<_> = fit.params.causes.iter().map(|c| &c.baseline).collect();
            let times: Vec<f64> = dataset.subjects().iter().map(|s| s.obs_time).collect();
            let naive_mode = method.is_naive();
            timed_cell(reps, || {
                let mut stats = ScanStats::default();
                for b in &baselines {
                    if naive_mode {
                        black_box(naive::naive_step_lookup_counted(
                            b.knots(),
                            b.cumulative(),
                            &times,
                            0.0,
                            &mut stats,
                        ));
                    } else {
                        let knots = DescendingKnots::new(
                            b.knots().to_vec(),
                            b.cumulative().to_vec(),
                        )
                        .unwrap();
                        black_box(step_lookup_scan(
                            &knots,
                            dataset.desc_order(),
                            0.0,
                            &mut stats,
                        ));
                    }
                }
            })
        }
        BenchMethod::ScanEb | BenchMethod::NaiveEb => {
            let fit = fit_lmm(dataset, 1e-4, 100)?;
            let naive_mode = method.is_naive();
            timed_cell(reps, || {
                if naive_mode {
                    black_box(naive::naive_empirical_bayes(dataset, &fit).unwrap());
                } else {
                    black_box(empirical_bayes_all(dataset, &fit).unwrap());
                }
            })
        }
    };
    Ok(seconds)
}

/// Asserts that each selected naive/scan pair produces identical results on
/// the given dataset before any timing happens.
fn equivalence_pass(plan: &BenchPlan, dataset: &Dataset) -> Result<()> {
    let wants = |m: BenchMethod| plan.methods.contains(&m);
    if wants(BenchMethod::NaiveEm) && wants(BenchMethod::ScanEm) {
        let a = em_fit(dataset, &bench_em_config(KernelBackend::Scan))?;
        let b = em_fit(dataset, &bench_em_config(KernelBackend::Naive))?;
        let d = (a.params.beta - b.params.beta).norm();
        if d > 1e-10 {
            return Err(Error::validation(format!(
                "cross-backend EM mismatch: beta differs by {d}"
            )));
        }
    }
    if wants(BenchMethod::NaiveSe) && wants(BenchMethod::ScanSe) {
        let mut fit = em_fit(
            dataset,
            &EmConfig {
                tol: 1e-3,
                max_iter: 50,
                ..EmConfig::default()
            },
        )?;
        fit.converged = true;
        let a = profiled_scores_with_backend(dataset, &fit, KernelBackend::Scan)?;
        let b = profiled_scores_with_backend(dataset, &fit, KernelBackend::Naive)?;
        let d = (&a.scores - &b.scores).norm();
        if d > 1e-10 * b.scores.norm().max(1.0) {
            return Err(Error::validation(format!(
                "cross-backend score mismatch: {d}"
            )));
        }
    }
    Ok(())
}

/// Calibrated cost of one timing measurement.
fn harness_overhead() -> f64 {
    let samples: Vec<f64> = (0..101)
        .map(|_| {
            let t0 = Instant::now();
            std::hint::black_box(());
            t0.elapsed().as_secs_f64()
        })
        .collect();
    median(samples)
}

pub fn run_bench(plan: &BenchPlan, sim: &SimConfig) -> Result<BenchResults> {
    plan.validate()?;
    let body = || run_bench_inner(plan, sim);
    if plan.parallel {
        body()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| Error::invalid(format!("cannot build bench thread pool: {e}")))?;
        pool.install(body)
    }
}

fn run_bench_inner(plan: &BenchPlan, sim: &SimConfig) -> Result<BenchResults> {
    let overhead = harness_overhead();

    // Equivalence before timing, on the smallest size.
    let smallest = SimConfig {
        n: plan.sizes[0],
        seed: sim.seed ^ plan.seed,
        ..sim.clone()
    };
    equivalence_pass(plan, &simulate_dataset(&smallest)?)?;

    let mut cells = Vec::new();
    let mut last_time: std::collections::HashMap<&'static str, (usize, f64)> =
        std::collections::HashMap::new();
    for &n in &plan.sizes {
        let config = SimConfig {
            n,
            seed: sim.seed ^ plan.seed ^ (n as u64),
            ..sim.clone()
        };
        let dataset = simulate_dataset(&config)?;
        let mut scan_times: std::collections::HashMap<&'static str, f64> =
            std::collections::HashMap::new();
        for &method in &plan.methods {
            // Predict from the previous size whether this cell would blow
            // the budget.
            if let Some(&(prev_n, prev_t)) = last_time.get(method.name()) {
                let predicted = prev_t * (n as f64 / prev_n as f64).powf(method.growth_exponent());
                if predicted > plan.time_budget_s {
                    cells.push(BenchCell {
                        n,
                        method: method.name().into(),
                        seconds: None,
                        status: "skipped(budget)".into(),
                        fold_change_vs_scan: None,
                    });
                    continue;
                }
            }
            let seconds = match run_method(method, &dataset, plan.repetitions) {
                Ok(s) => s,
                Err(e) => {
                    cells.push(BenchCell {
                        n,
                        method: method.name().into(),
                        seconds: None,
                        status: format!("failed({e})"),
                        fold_change_vs_scan: None,
                    });
                    continue;
                }
            };
            last_time.insert(method.name(), (n, seconds));
            if !method.is_naive() {
                scan_times.insert(method.name(), seconds);
            }
            let fold = if method.is_naive() {
                scan_times.get(method.scan_partner()).map(|s| seconds / s)
            } else {
                Some(1.0)
            };
            let status = if seconds > plan.time_budget_s {
                "over_budget".to_string()
            } else {
                "ok".to_string()
            };
            cells.push(BenchCell {
                n,
                method: method.name().into(),
                seconds: Some(seconds),
                status,
                fold_change_vs_scan: fold,
            });
        }
    }
    Ok(BenchResults {
        cells,
        harness_overhead_s: overhead,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_validation() {
        let mut plan = BenchPlan::default();
        plan.sizes = vec![500, 100];
        assert!(plan.validate().is_err());
        plan.sizes = vec![100, 500];
        assert!(plan.validate().is_ok());
    }

    #[test]
    fn tiny_bench_produces_cells_and_folds() {
        let plan = BenchPlan {
            sizes: vec![60, 120],
            methods: vec![
                BenchMethod::ScanLookup,
                BenchMethod::NaiveLookup,
                BenchMethod::ScanEb,
                BenchMethod::NaiveEb,
            ],
            repetitions: 1,
            time_budget_s: 30.0,
            parallel: false,
            seed: 3,
        };
        let sim = SimConfig::default();
        let results = run_bench(&plan, &sim).unwrap();
        assert_eq!(results.cells.len(), 8);
        for c in &results.cells {
            if c.method.starts_with("scan") {
                assert_eq!(c.fold_change_vs_scan, Some(1.0), "{c:?}");
            }
            assert!(c.seconds.is_some(), "{c:?}");
        }
        let csv_dir = tempfile::tempdir().unwrap();
        let path = csv_dir.path().join("bench.csv");
        results.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("n,method,seconds,fold_change_vs_scan,status\n"));
    }
}
