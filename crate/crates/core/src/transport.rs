//! Wasserstein-1 distance between empirical laws.
//!
//! [`w1_exact`] solves the transport LP exactly and is the oracle the two
//! scalable estimators are checked against: [`w1_sliced`] (random 1-D
//! projections, a lower bound up to Monte-Carlo error) and [`w1_sinkhorn`]
//! (entropic regularisation with epsilon annealing).

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::PairedLaws;
use crate::error::{Error, Result};
use crate::rng;

/// Largest side accepted by the exact solver.
pub const EXACT_LIMIT: usize = 512;
/// Above this per-stratum size, [`W1Method::Auto`] switches to slicing.
pub const AUTO_EXACT_LIMIT: usize = 256;
pub const AUTO_PROJECTIONS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum W1Kind {
    Exact,
    Sliced,
    Sinkhorn,
}

/// Estimator parameters and diagnostics, depending on the method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum W1Params {
    Exact {},
    Sliced {
        projections: usize,
        seed: u64,
        mc_std: f64,
    },
    Sinkhorn {
        epsilon: f64,
        iterations: usize,
        residual: f64,
        converged: bool,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct W1Estimate {
    pub value: f64,
    pub method: W1Kind,
    pub n_modal: usize,
    pub n_text: usize,
    pub params: W1Params,
}

/// Method selection for stratified and pooled estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum W1Method {
    Exact,
    Sliced { projections: usize, seed: u64 },
    Sinkhorn { epsilon: f64, max_iter: usize },
    /// Exact when both sides have at most 256 samples, otherwise sliced with
    /// 256 projections.
    #[default]
    Auto,
}

impl W1Method {
    pub fn estimate(&self, a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<W1Estimate> {
        match *self {
            W1Method::Exact => w1_exact(a, b),
            W1Method::Sliced { projections, seed } => w1_sliced(a, b, projections, seed),
            W1Method::Sinkhorn { epsilon, max_iter } => w1_sinkhorn(a, b, epsilon, max_iter),
            W1Method::Auto => {
                if a.nrows() <= AUTO_EXACT_LIMIT && b.nrows() <= AUTO_EXACT_LIMIT {
                    w1_exact(a, b)
                } else {
                    w1_sliced(a, b, AUTO_PROJECTIONS, 0)
                }
            }
        }
    }
}

fn check_inputs(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch(a.ncols(), b.ncols()));
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Empty);
    }
    Ok(())
}

/// Euclidean ground-cost matrix.
pub fn cost_matrix(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| {
        a.row(i)
            .iter()
            .zip(b.row(j).iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    })
}

/// Exact W1 between the uniform empirical measures on the rows of `a` and `b`.
pub fn w1_exact(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<W1Estimate> {
    check_inputs(&a, &b)?;
    let (n, m) = (a.nrows(), b.nrows());
    if n > EXACT_LIMIT || m > EXACT_LIMIT {
        return Err(Error::TransportTooLarge { n, m, limit: EXACT_LIMIT });
    }
    let cost = cost_matrix(a, b);
    let value = if n == m {
        let assignment = hungarian(&cost);
        assignment
            .iter()
            .enumerate()
            .map(|(i, &j)| cost[[i, j]])
            .sum::<f64>()
            / n as f64
    } else {
        transport_cost(&cost)
    };
    Ok(W1Estimate {
        value: value.max(0.0),
        method: W1Kind::Exact,
        n_modal: n,
        n_text: m,
        params: W1Params::Exact {},
    })
}

/// Minimum-cost perfect matching on a square cost matrix (shortest
/// augmenting paths with potentials). Returns the column of each row.
pub fn hungarian(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square matrix");
    // 1-based arrays with a virtual column 0
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Optimal cost of the transport LP between uniform weights `1/n` and `1/m`,
/// solved as an integer min-cost flow (successive shortest paths with
/// Johnson potentials on the dense bipartite graph).
pub fn transport_cost(cost: &Array2<f64>) -> f64 {
    let (flow, total) = transport_plan(cost);
    let mut acc = 0.0;
    for ((i, j), &f) in flow.indexed_iter() {
        if f > 0 {
            acc += f as f64 * cost[[i, j]];
        }
    }
    acc / total as f64
}

/// Integer transport plan between supplies `m/g` (rows) and demands `n/g`
/// (columns); returns the plan and its total mass.
pub fn transport_plan(cost: &Array2<f64>) -> (Array2<i64>, i64) {
    let (n, m) = cost.dim();
    let g = gcd(n, m);
    let mut supply = vec![(m / g) as i64; n];
    let mut demand = vec![(n / g) as i64; m];
    let total = (n * (m / g)) as i64;
    let mut flow = Array2::<i64>::zeros((n, m));
    let mut pot_u = vec![0.0f64; n];
    let mut pot_v = vec![0.0f64; m];
    let mut remaining = total;

    let mut dist_u = vec![0.0f64; n];
    let mut dist_v = vec![0.0f64; m];
    let mut done_u = vec![false; n];
    let mut done_v = vec![false; m];
    let mut parent_u = vec![usize::MAX; n]; // sink we came from
    let mut parent_v = vec![usize::MAX; m]; // source we came from

    while remaining > 0 {
        for i in 0..n {
            dist_u[i] = if supply[i] > 0 { 0.0 } else { f64::INFINITY };
            done_u[i] = false;
            parent_u[i] = usize::MAX;
        }
        dist_v.fill(f64::INFINITY);
        done_v.fill(false);
        parent_v.fill(usize::MAX);

        let target = loop {
            // next closest unsettled node
            let mut best = f64::INFINITY;
            let mut pick: Option<(bool, usize)> = None;
            for i in 0..n {
                if !done_u[i] && dist_u[i] < best {
                    best = dist_u[i];
                    pick = Some((true, i));
                }
            }
            for j in 0..m {
                if !done_v[j] && dist_v[j] < best {
                    best = dist_v[j];
                    pick = Some((false, j));
                }
            }
            match pick.expect("supply and demand balance, so a sink is reachable") {
                (true, i) => {
                    done_u[i] = true;
                    for j in 0..m {
                        if done_v[j] {
                            continue;
                        }
                        let rc = (cost[[i, j]] + pot_u[i] - pot_v[j]).max(0.0);
                        let d = dist_u[i] + rc;
                        if d < dist_v[j] {
                            dist_v[j] = d;
                            parent_v[j] = i;
                        }
                    }
                }
                (false, j) => {
                    done_v[j] = true;
                    if demand[j] > 0 {
                        break j;
                    }
                    for i in 0..n {
                        if done_u[i] || flow[[i, j]] == 0 {
                            continue;
                        }
                        let rc = (-cost[[i, j]] + pot_v[j] - pot_u[i]).max(0.0);
                        let d = dist_v[j] + rc;
                        if d < dist_u[i] {
                            dist_u[i] = d;
                            parent_u[i] = j;
                        }
                    }
                }
            }
        };

        let reach = dist_v[target];
        for i in 0..n {
            pot_u[i] += dist_u[i].min(reach);
        }
        for j in 0..m {
            pot_v[j] += dist_v[j].min(reach);
        }

        // bottleneck along the path
        let mut amount = demand[target];
        let mut j = target;
        let source = loop {
            let i = parent_v[j];
            match parent_u[i] {
                usize::MAX => break i,
                prev => {
                    amount = amount.min(flow[[i, prev]]);
                    j = prev;
                }
            }
        };
        amount = amount.min(supply[source]);

        let mut j = target;
        loop {
            let i = parent_v[j];
            flow[[i, j]] += amount;
            match parent_u[i] {
                usize::MAX => break,
                prev => {
                    flow[[i, prev]] -= amount;
                    j = prev;
                }
            }
        }
        supply[source] -= amount;
        demand[target] -= amount;
        remaining -= amount;
    }
    (flow, total)
}

/// W1 between two uniform empirical measures on the line.
pub fn w1_1d(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut t = 0.0;
    let mut acc = 0.0;
    while i < n && j < m {
        // breakpoints (i+1)/n and (j+1)/m compared exactly in integers
        let left = (i + 1) * m;
        let right = (j + 1) * n;
        let next = if left <= right {
            (i + 1) as f64 / n as f64
        } else {
            (j + 1) as f64 / m as f64
        };
        acc += (next - t) * (a[i] - b[j]).abs();
        t = next;
        if left <= right {
            i += 1;
        }
        if right <= left {
            j += 1;
        }
    }
    acc
}

/// Mean 1-D W1 over random unit projections.
pub fn w1_sliced(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    projections: usize,
    seed: u64,
) -> Result<W1Estimate> {
    check_inputs(&a, &b)?;
    if projections < 8 {
        return Err(Error::InvalidParameter(format!(
            "sliced W1 needs at least 8 projections, got {projections}"
        )));
    }
    let d = a.ncols();
    let mut rng = rng::stream(seed, rng::streams::PROJECTIONS);
    let directions: Vec<Array1<f64>> = (0..projections)
        .map(|_| loop {
            let v: Array1<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.dot(&v).sqrt();
            if norm > 1e-12 {
                break v / norm;
            }
        })
        .collect();
    let values: Vec<f64> = directions
        .iter()
        .map(|u| {
            let mut pa = a.dot(u).to_vec();
            let mut pb = b.dot(u).to_vec();
            w1_1d(&mut pa, &mut pb)
        })
        .collect();
    let mean = values.iter().sum::<f64>() / projections as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (projections as f64 - 1.0);
    Ok(W1Estimate {
        value: mean,
        method: W1Kind::Sliced,
        n_modal: a.nrows(),
        n_text: b.nrows(),
        params: W1Params::Sliced {
            projections,
            seed,
            mc_std: (var / projections as f64).sqrt(),
        },
    })
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Entropic transport cost `<P, C>` with epsilon annealing.
///
/// The regulariser starts at the largest cost and halves each stage until it
/// reaches `epsilon`. Each stage runs at most `max_iter` log-domain Sinkhorn
/// sweeps; the final stage must bring the L1 marginal residual under 1e-6 or
/// the estimate is flagged as unconverged.
pub fn w1_sinkhorn(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    epsilon: f64,
    max_iter: usize,
) -> Result<W1Estimate> {
    check_inputs(&a, &b)?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "sinkhorn epsilon must be positive, got {epsilon}"
        )));
    }
    const TOL: f64 = 1e-6;
    let (n, m) = (a.nrows(), b.nrows());
    let cost = cost_matrix(a, b);
    let log_a = -(n as f64).ln();
    let log_b = -(m as f64).ln();
    let mut f = vec![0.0f64; n];
    let mut g = vec![0.0f64; m];

    let mut eps = cost.iter().fold(0.0f64, |acc, &c| acc.max(c)).max(epsilon);
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    loop {
        let last = eps <= epsilon;
        let stage_tol = if last { TOL } else { 1e-4 };
        let scaled = cost.mapv(|c| -c / eps);
        for it in 0..max_iter.max(1) {
            for i in 0..n {
                let row = scaled.row(i);
                f[i] = -eps * log_sum_exp((0..m).map(|j| g[j] / eps + row[j] + log_b));
            }
            for j in 0..m {
                let col = scaled.column(j);
                g[j] = -eps * log_sum_exp((0..n).map(|i| f[i] / eps + col[i] + log_a));
            }
            iterations += 1;
            if it % 5 == 4 || it + 1 == max_iter {
                residual = (0..n)
                    .map(|i| {
                        let row = scaled.row(i);
                        let mass: f64 = (0..m)
                            .map(|j| ((f[i] + g[j]) / eps + row[j] + log_a + log_b).exp())
                            .sum();
                        (mass - 1.0 / n as f64).abs()
                    })
                    .sum();
                if residual < stage_tol {
                    break;
                }
            }
        }
        if last {
            break;
        }
        eps = (eps / 2.0).max(epsilon);
    }
    let mut value = 0.0;
    for i in 0..n {
        for j in 0..m {
            let p = ((f[i] + g[j] - cost[[i, j]]) / eps + log_a + log_b).exp();
            value += p * cost[[i, j]];
        }
    }
    Ok(W1Estimate {
        value,
        method: W1Kind::Sinkhorn,
        n_modal: n,
        n_text: m,
        params: W1Params::Sinkhorn {
            epsilon,
            iterations,
            residual,
            converged: residual < TOL,
        },
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StratumW1 {
    pub stratum: usize,
    pub weight: f64,
    pub estimate: W1Estimate,
}

/// Stratum-weighted W1 between the conditional laws.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StratifiedW1 {
    pub value: f64,
    pub method: W1Method,
    pub per_stratum: Vec<StratumW1>,
}

/// `E_(C,Y)[W1(P_M(Z|C,Y), P_T(Z|C,Y))]` with weights equal to the shared
/// stratum frequencies.
pub fn stratified_w1(laws: &PairedLaws, method: W1Method) -> Result<StratifiedW1> {
    let modal = laws.modal.features();
    let text = laws.text.features();
    let total = laws.len() as f64;
    let per_stratum = laws
        .strata()
        .into_par_iter()
        .map(|(stratum, mi, ti)| {
            if mi.is_empty() || ti.is_empty() {
                return Err(Error::SparseStratum {
                    stratum,
                    law: if mi.is_empty() { "modal" } else { "text" },
                    count: 0,
                    required: 1,
                });
            }
            let a = modal.select(Axis(0), &mi);
            let b = text.select(Axis(0), &ti);
            Ok(StratumW1 {
                stratum,
                weight: mi.len() as f64 / total,
                estimate: method.estimate(a.view(), b.view())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let value = per_stratum.iter().map(|s| s.weight * s.estimate.value).sum();
    Ok(StratifiedW1 {
        value,
        method,
        per_stratum,
    })
}

/// W1 between the two laws ignoring strata.
pub fn pooled_w1(laws: &PairedLaws, method: W1Method) -> Result<W1Estimate> {
    method.estimate(laws.modal.features().view(), laws.text.features().view())
}
