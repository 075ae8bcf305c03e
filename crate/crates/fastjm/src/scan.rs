//! Linear-scan kernels over descending event times.
//!
//! Risk sets shrink over time under right censoring, so every aggregation
//! over `R(t) = {r : T_r >= t}` can be computed with a single merged pass
//! over two descending-sorted sequences instead of a nested search. The
//! three kernels here replace the quadratic and cubic loops that otherwise
//! dominate the E-step, the M-step, and standard error estimation:
//!
//! * [`step_lookup_scan`] maps a right-continuous step function (stored at
//!   its knots) onto an arbitrary set of query times,
//! * [`suffix_riskset_sums`] accumulates per-subject contributions into
//!   per-knot risk-set sums,
//! * [`prefix_event_accumulate`] turns per-knot terms `b_kj` into
//!   `B(T_i) = sum_{j : t_kj <= T_i} b_kj` for every subject.
//!
//! All kernels are generic over an additive payload ([`Accumulate`]), so the
//! same code serves scalar Breslow sums, score vectors, and Hessian blocks.
//! Each kernel charges its comparisons and element additions to a
//! [`ScanStats`] counter; tests assert the counts stay linear in the input
//! size.
//!
//! Tie convention: a subject with `T_i` equal to a knot is in that knot's
//! risk set and absorbs the knot's cumulative value (the step functions are
//! right-continuous, intervals are half-open `[t_{k(j+1)}, t_kj)`).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Instrumented operation counts for the scan kernels.
///
/// `comparisons` counts time-ordering comparisons between knot and query
/// times; `additions` counts element-wise payload additions (a vector add of
/// length m charges m). These make the O(n) claims assertable.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ScanStats {
    pub comparisons: u64,
    pub additions: u64,
}

impl ScanStats {
    pub fn total(&self) -> u64 {
        self.comparisons + self.additions
    }

    pub fn merge(&mut self, other: &ScanStats) {
        self.comparisons += other.comparisons;
        self.additions += other.additions;
    }
}

/// Additive payload for the scan kernels: scalars, vectors, or matrices.
///
/// The zero element is always supplied by the caller; the kernels never
/// infer it from the payload itself.
pub trait Accumulate: Clone {
    /// Element-wise `self += other`.
    fn add_assign(&mut self, other: &Self);
    /// Number of scalar elements (used for addition accounting).
    fn element_count(&self) -> usize;
    fn all_finite(&self) -> bool;
}

impl Accumulate for f64 {
    fn add_assign(&mut self, other: &Self) {
        *self += *other;
    }
    fn element_count(&self) -> usize {
        1
    }
    fn all_finite(&self) -> bool {
        self.is_finite()
    }
}

impl Accumulate for DVector<f64> {
    fn add_assign(&mut self, other: &Self) {
        *self += other;
    }
    fn element_count(&self) -> usize {
        self.len()
    }
    fn all_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }
}

impl Accumulate for DMatrix<f64> {
    fn add_assign(&mut self, other: &Self) {
        *self += other;
    }
    fn element_count(&self) -> usize {
        self.len()
    }
    fn all_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }
}

/// Strictly descending knot times with one payload value per knot.
#[derive(Debug, Clone)]
pub struct DescendingKnots<T> {
    times: Vec<f64>,
    payload: Vec<T>,
}

impl<T> DescendingKnots<T> {
    /// Validates strict descent and payload alignment in one O(q) pass.
    pub fn new(times: Vec<f64>, payload: Vec<T>) -> Result<Self> {
        if times.len() != payload.len() {
            return Err(Error::DimensionMismatch {
                field: "knot payload",
                expected: times.len(),
                actual: payload.len(),
            });
        }
        for (i, w) in times.windows(2).enumerate() {
            if !(w[0] > w[1]) {
                return Err(Error::Unsorted {
                    index: i + 1,
                    context: format!("knots must be strictly descending: {} !> {}", w[0], w[1]),
                });
            }
        }
        if let Some(i) = times.iter().position(|t| !t.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("knot time at index {i}"),
            });
        }
        Ok(Self { times, payload })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn payload(&self) -> &[T] {
        &self.payload
    }
}

/// Observation times sorted nonincreasing, with the permutation back to the
/// original subject order. Built once per dataset and reused by every scan.
#[derive(Debug, Clone)]
pub struct DescendingQueries {
    times: Vec<f64>,
    /// `index_map[rank]` is the original subject index of the rank-th query.
    index_map: Vec<usize>,
}

impl DescendingQueries {
    pub fn new(times: Vec<f64>, index_map: Vec<usize>) -> Result<Self> {
        if times.len() != index_map.len() {
            return Err(Error::DimensionMismatch {
                field: "query index_map",
                expected: times.len(),
                actual: index_map.len(),
            });
        }
        for (i, w) in times.windows(2).enumerate() {
            if !(w[0] >= w[1]) {
                return Err(Error::Unsorted {
                    index: i + 1,
                    context: format!("queries must be nonincreasing: {} < {}", w[0], w[1]),
                });
            }
        }
        let mut seen = vec![false; index_map.len()];
        for &ix in &index_map {
            if ix >= seen.len() || seen[ix] {
                return Err(Error::invalid("index_map is not a permutation"));
            }
            seen[ix] = true;
        }
        Ok(Self { times, index_map })
    }

    /// Sorts subject times descending; ties keep the original order so the
    /// permutation is deterministic.
    pub fn from_unsorted(times: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|&a, &b| times[b].partial_cmp(&times[a]).unwrap());
        let sorted = order.iter().map(|&i| times[i]).collect();
        Self {
            times: sorted,
            index_map: order,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Times in descending rank order.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn index_map(&self) -> &[usize] {
        &self.index_map
    }
}

/// Evaluates a right-continuous step function at every query time.
///
/// `knots.payload[j]` must hold the function value on `[times[j], times[j-1])`
/// (cumulative values when the function is a cumulative hazard). Queries at or
/// above the largest knot receive `payload[0]`; queries below the smallest
/// knot receive `zero`. One merged forward pass, at most
/// `knots.len() + queries.len()` comparisons.
///
/// The output is indexed by the *original* subject order.
pub fn step_lookup_scan<T: Accumulate>(
    knots: &DescendingKnots<T>,
    queries: &DescendingQueries,
    zero: T,
    stats: &mut ScanStats,
) -> Vec<T> {
    let mut out = vec![zero; queries.len()];
    let mut j = 0usize;
    for (rank, &t) in queries.times().iter().enumerate() {
        // Advance to the largest knot <= t; each knot is passed at most once
        // across the whole scan.
        while j < knots.len() {
            stats.comparisons += 1;
            if t >= knots.times()[j] {
                break;
            }
            j += 1;
        }
        if j < knots.len() {
            out[queries.index_map()[rank]] = knots.payload()[j].clone();
        }
    }
    out
}

/// Risk-set suffix sums: for each knot `t_kj` (descending), the sum of all
/// contributions with `T_(r) >= t_kj`.
///
/// `contributions` must be aligned with the *rank order* of `queries`. Each
/// contribution is added exactly once across the whole scan, so the total
/// work is O(knots + queries) regardless of how many knots each risk set
/// spans.
pub fn suffix_riskset_sums<T: Accumulate>(
    contributions: &[T],
    knot_times: &[f64],
    queries: &DescendingQueries,
    zero: T,
    stats: &mut ScanStats,
) -> Result<Vec<T>> {
    if contributions.len() != queries.len() {
        return Err(Error::DimensionMismatch {
            field: "contributions",
            expected: queries.len(),
            actual: contributions.len(),
        });
    }
    let mut acc = zero;
    let mut out = Vec::with_capacity(knot_times.len());
    let mut r = 0usize;
    for &knot in knot_times {
        while r < queries.len() {
            stats.comparisons += 1;
            if queries.times()[r] < knot {
                break;
            }
            let c = &contributions[r];
            if !c.all_finite() {
                return Err(Error::NonFinite {
                    context: format!(
                        "risk-set contribution for subject index {}",
                        queries.index_map()[r]
                    ),
                });
            }
            acc.add_assign(c);
            stats.additions += c.element_count() as u64;
            r += 1;
        }
        out.push(acc.clone());
    }
    Ok(out)
}

/// Computes `B(T_i) = sum_{j : t_kj <= T_i} b_kj` for every query.
///
/// One backward pass turns the per-knot terms into knot-level cumulative
/// values (the risk-set decomposition run over knots instead of subjects),
/// then [`step_lookup_scan`] maps them onto the queries. Output indexed by
/// original subject order.
pub fn prefix_event_accumulate<T: Accumulate>(
    per_knot_terms: &DescendingKnots<T>,
    queries: &DescendingQueries,
    zero: T,
    stats: &mut ScanStats,
) -> Result<Vec<T>> {
    let mut cumulative = Vec::with_capacity(per_knot_terms.len());
    let mut acc = zero.clone();
    for (j, term) in per_knot_terms.payload().iter().enumerate().rev() {
        if !term.all_finite() {
            return Err(Error::NonFinite {
                context: format!("per-knot term at index {j}"),
            });
        }
        acc.add_assign(term);
        stats.additions += term.element_count() as u64;
        cumulative.push(acc.clone());
    }
    cumulative.reverse();
    let knots = DescendingKnots::new(per_knot_terms.times().to_vec(), cumulative)?;
    Ok(step_lookup_scan(&knots, queries, zero, stats))
}
