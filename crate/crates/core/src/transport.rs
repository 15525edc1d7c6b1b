//! Discrete optimal transport with squared Euclidean ground cost.
//!
//! [`wasserstein2_exact`] solves the transportation problem by successive
//! shortest augmenting paths; [`wasserstein2_sinkhorn`] runs log-domain
//! entropic scaling iterations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest combined support the exact solver accepts.
pub const EXACT_SUPPORT_LIMIT: usize = 64;
const WEIGHT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalDistribution {
    support: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl EmpiricalDistribution {
    pub fn new(support: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::contract("distribution needs at least one support point"));
        }
        if support.len() != weights.len() {
            return Err(Error::contract(format!(
                "{} support points but {} weights",
                support.len(),
                weights.len()
            )));
        }
        let dim = support[0].len();
        if support.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
            return Err(Error::contract("support points must be finite and share a dimension"));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::contract("weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::contract(format!("weights sum to {total}, expected 1")));
        }
        Ok(Self { support, weights })
    }

    pub fn uniform(support: Vec<Vec<f64>>) -> Result<Self> {
        let n = support.len().max(1);
        Self::new(support, vec![1.0 / n as f64; n])
    }

    pub fn point(x: Vec<f64>) -> Result<Self> {
        Self::new(vec![x], vec![1.0])
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.support[0].len()
    }

    pub fn support(&self) -> &[Vec<f64>] {
        &self.support
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Coupling between two distributions, row-major `rows x cols`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub rows: usize,
    pub cols: usize,
    pub mass: Vec<f64>,
}

impl TransportPlan {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.mass[i * self.cols + j]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.mass.chunks_exact(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.mass.chunks_exact(self.cols) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out
    }

    /// Largest absolute deviation of either marginal from the given weights.
    pub fn marginal_violation(&self, p: &[f64], q: &[f64]) -> f64 {
        let rows = self.row_sums().iter().zip(p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let cols = self.col_sums().iter().zip(q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        rows.max(cols)
    }

    /// `sum pi_ij * cost_ij`.
    pub fn cost(&self, cost: &[f64]) -> f64 {
        self.mass.iter().zip(cost).map(|(m, c)| m * c).sum()
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Row-major `|P| x |Q|` matrix of squared distances.
pub fn cost_matrix(p: &EmpiricalDistribution, q: &EmpiricalDistribution) -> Result<Vec<f64>> {
    if p.dim() != q.dim() {
        return Err(Error::contract(format!(
            "support dimensions differ: {} vs {}",
            p.dim(),
            q.dim()
        )));
    }
    Ok(p.support
        .iter()
        .flat_map(|a| q.support.iter().map(move |b| squared_distance(a, b)))
        .collect())
}

#[derive(Debug, Clone, Copy)]
struct Arc {
    to: usize,
    cap: f64,
    cost: f64,
    rev: usize,
}

struct FlowNetwork {
    arcs: Vec<Vec<Arc>>,
}

impl FlowNetwork {
    fn new(nodes: usize) -> Self {
        Self {
            arcs: vec![Vec::new(); nodes],
        }
    }

    fn add(&mut self, from: usize, to: usize, cap: f64, cost: f64) -> usize {
        let fwd = self.arcs[from].len();
        let bwd = self.arcs[to].len() + usize::from(from == to);
        self.arcs[from].push(Arc { to, cap, cost, rev: bwd });
        self.arcs[to].push(Arc {
            to: from,
            cap: 0.0,
            cost: -cost,
            rev: fwd,
        });
        fwd
    }

    /// Bellman-Ford shortest paths over arcs with residual capacity.
    fn shortest_path(&self, source: usize, eps: f64) -> (Vec<f64>, Vec<Option<(usize, usize)>>) {
        let n = self.arcs.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut prev = vec![None; n];
        dist[source] = 0.0;
        for _ in 0..n {
            let mut changed = false;
            for u in 0..n {
                if !dist[u].is_finite() {
                    continue;
                }
                for (k, arc) in self.arcs[u].iter().enumerate() {
                    if arc.cap > eps && dist[u] + arc.cost < dist[arc.to] - 1e-14 {
                        dist[arc.to] = dist[u] + arc.cost;
                        prev[arc.to] = Some((u, k));
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        (dist, prev)
    }
}

/// Exact squared-cost transport: returns `(W2, plan)`.
pub fn wasserstein2_exact(
    p: &EmpiricalDistribution,
    q: &EmpiricalDistribution,
) -> Result<(f64, TransportPlan)> {
    let (m, n) = (p.len(), q.len());
    if m + n > EXACT_SUPPORT_LIMIT {
        return Err(Error::SupportTooLarge {
            size: m + n,
            limit: EXACT_SUPPORT_LIMIT,
        });
    }
    let cost = cost_matrix(p, q)?;
    let plan = exact_plan(&p.weights, &q.weights, &cost, m, n);
    let value = plan.cost(&cost).max(0.0).sqrt();
    Ok((value, plan))
}

/// Min-cost flow on the bipartite transportation network.
fn exact_plan(a: &[f64], b: &[f64], cost: &[f64], m: usize, n: usize) -> TransportPlan {
    let source = 0;
    let sink = m + n + 1;
    let mut net = FlowNetwork::new(m + n + 2);
    for (i, &w) in a.iter().enumerate() {
        net.add(source, 1 + i, w, 0.0);
    }
    for (j, &w) in b.iter().enumerate() {
        net.add(1 + m + j, sink, w, 0.0);
    }
    let mut route = vec![0; m * n];
    for i in 0..m {
        for j in 0..n {
            route[i * n + j] = net.add(1 + i, 1 + m + j, f64::INFINITY, cost[i * n + j]);
        }
    }
    // weights may disagree in the last bits; move the smaller total
    let total = a.iter().sum::<f64>().min(b.iter().sum::<f64>());
    let eps = 1e-15;
    let mut moved = 0.0;
    while total - moved > eps {
        let (dist, prev) = net.shortest_path(source, eps);
        if !dist[sink].is_finite() {
            break;
        }
        let mut push = total - moved;
        let mut v = sink;
        while let Some((u, k)) = prev[v] {
            push = push.min(net.arcs[u][k].cap);
            v = u;
        }
        if push <= eps {
            break;
        }
        let mut v = sink;
        while let Some((u, k)) = prev[v] {
            net.arcs[u][k].cap -= push;
            let rev = net.arcs[u][k].rev;
            net.arcs[v][rev].cap += push;
            v = u;
        }
        moved += push;
    }
    let mut mass = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let arc = net.arcs[1 + i][route[i * n + j]];
            // flow is the capacity of the reverse arc
            mass[i * n + j] = net.arcs[arc.to][arc.rev].cap;
        }
    }
    TransportPlan { rows: m, cols: n, mass }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkhornResult {
    /// `sqrt(<plan, cost>)`, comparable to the exact W2.
    pub value: f64,
    /// Entropic objective `<plan, cost> + epsilon * KL(plan | P x Q)`.
    pub objective: f64,
    pub plan: TransportPlan,
    pub converged: bool,
    pub iterations: usize,
}

pub const SINKHORN_TOL: f64 = 1e-9;

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn. Stops once the row-marginal L1 violation (columns
/// are exact after each sweep) drops below [`SINKHORN_TOL`], or after
/// `max_iter` sweeps in total with `converged = false`.
pub fn wasserstein2_sinkhorn(
    p: &EmpiricalDistribution,
    q: &EmpiricalDistribution,
    epsilon: f64,
    max_iter: usize,
) -> Result<SinkhornResult> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::config(format!("epsilon must be positive, got {epsilon}")));
    }
    let cost = cost_matrix(p, q)?;
    Ok(sinkhorn_on_cost(&p.weights, &q.weights, &cost, epsilon, max_iter))
}

fn sinkhorn_on_cost(a: &[f64], b: &[f64], cost: &[f64], eps: f64, max_iter: usize) -> SinkhornResult {
    let (m, n) = (a.len(), b.len());
    let log_a: Vec<f64> = a.iter().map(|w| w.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|w| w.ln()).collect();
    let mut f = vec![0.0; m];
    let mut g = vec![0.0; n];
    let log_plan = |f: &[f64], g: &[f64], e: f64, i: usize, j: usize| (f[i] + g[j] - cost[i * n + j]) / e;

    // Annealing from a coarse epsilon with warm-started potentials; plain
    // iterations at small epsilon stall when the kernel is nearly reducible.
    let max_cost = cost.iter().copied().fold(0.0, f64::max);
    let mut schedule = Vec::new();
    let mut e = max_cost.max(eps);
    while e > eps {
        schedule.push(e);
        e *= 0.5;
    }
    schedule.push(eps);

    let mut converged = false;
    let mut iterations = 0;
    for (stage, &e) in schedule.iter().enumerate() {
        let last = stage + 1 == schedule.len();
        let tol = if last { SINKHORN_TOL } else { 1e-6 };
        converged = false;
        let mut sweeps = 0;
        while iterations < max_iter {
            iterations += 1;
            sweeps += 1;
            for i in 0..m {
                if a[i] == 0.0 {
                    f[i] = f64::NEG_INFINITY;
                    continue;
                }
                let lse = log_sum_exp((0..n).map(|j| (g[j] - cost[i * n + j]) / e));
                f[i] = e * (log_a[i] - lse);
            }
            for j in 0..n {
                if b[j] == 0.0 {
                    g[j] = f64::NEG_INFINITY;
                    continue;
                }
                let lse = log_sum_exp((0..m).map(|i| (f[i] - cost[i * n + j]) / e));
                g[j] = e * (log_b[j] - lse);
            }
            let violation: f64 = (0..m)
                .map(|i| {
                    let row: f64 = (0..n).map(|j| log_plan(&f, &g, e, i, j).exp()).sum();
                    (row - a[i]).abs()
                })
                .sum();
            if violation < tol {
                converged = true;
                break;
            }
            // scaling sweeps converge linearly with a rate that degrades as
            // the plan approaches a permutation; Newton steps on the dual
            // finish the job
            if sweeps >= 10 {
                newton_step(a, b, cost, e, &mut f, &mut g);
            }
        }
    }
    let log_plan = |f: &[f64], g: &[f64], i: usize, j: usize| log_plan(f, g, eps, i, j);
    let mass: Vec<f64> = (0..m)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| {
            let lp = log_plan(&f, &g, i, j);
            if lp.is_nan() {
                0.0
            } else {
                lp.exp()
            }
        })
        .collect();
    let plan = TransportPlan { rows: m, cols: n, mass };
    let transport = plan.cost(cost);
    let mut kl = 0.0;
    for i in 0..m {
        for j in 0..n {
            let pij = plan.get(i, j);
            let ref_mass = a[i] * b[j];
            if pij > 0.0 {
                kl += pij * (pij / ref_mass).ln() - pij + ref_mass;
            } else {
                kl += ref_mass;
            }
        }
    }
    SinkhornResult {
        value: transport.max(0.0).sqrt(),
        objective: transport + eps * kl,
        plan,
        converged,
        iterations,
    }
}

/// One damped Newton ascent step on the entropic dual
/// `<a, f> + <b, g> - e * sum exp((f_i + g_j - C_ij) / e)`, restricted to
/// positive weights, with the last column potential held fixed.
fn newton_step(a: &[f64], b: &[f64], cost: &[f64], e: f64, f: &mut [f64], g: &mut [f64]) -> bool {
    let n = b.len();
    let rows: Vec<usize> = (0..a.len()).filter(|&i| a[i] > 0.0).collect();
    let cols: Vec<usize> = (0..n).filter(|&j| b[j] > 0.0).collect();
    if rows.is_empty() || cols.is_empty() {
        return false;
    }
    let dual = |f: &[f64], g: &[f64]| -> f64 {
        let mut val = 0.0;
        for &i in &rows {
            val += a[i] * f[i];
        }
        for &j in &cols {
            val += b[j] * g[j];
        }
        for &i in &rows {
            for &j in &cols {
                val -= e * ((f[i] + g[j] - cost[i * n + j]) / e).exp();
            }
        }
        val
    };
    let (mr, nc) = (rows.len(), cols.len());
    let k = mr + nc - 1;
    let mut hess = nalgebra::DMatrix::<f64>::zeros(k, k);
    let mut rhs = nalgebra::DVector::<f64>::zeros(k);
    for (ri, &i) in rows.iter().enumerate() {
        rhs[ri] += a[i];
    }
    for (cj, &j) in cols.iter().enumerate() {
        if cj + 1 < nc {
            rhs[mr + cj] += b[j];
        }
    }
    for (ri, &i) in rows.iter().enumerate() {
        for (cj, &j) in cols.iter().enumerate() {
            let pij = ((f[i] + g[j] - cost[i * n + j]) / e).exp();
            rhs[ri] -= pij;
            hess[(ri, ri)] += pij / e;
            if cj + 1 < nc {
                let c = mr + cj;
                rhs[c] -= pij;
                hess[(c, c)] += pij / e;
                hess[(ri, c)] += pij / e;
                hess[(c, ri)] += pij / e;
            }
        }
    }
    let ridge = 1e-14 * (0..k).map(|i| hess[(i, i)]).fold(0.0, f64::max);
    for i in 0..k {
        hess[(i, i)] += ridge;
    }
    let Some(chol) = hess.cholesky() else {
        return false;
    };
    let step = chol.solve(&rhs);
    let slope = step.dot(&rhs);
    if !(slope > 0.0) {
        return false;
    }
    let base = dual(f, g);
    let mut t = 1.0;
    for _ in 0..40 {
        let mut f2 = f.to_vec();
        let mut g2 = g.to_vec();
        for (ri, &i) in rows.iter().enumerate() {
            f2[i] += t * step[ri];
        }
        for (cj, &j) in cols.iter().enumerate().take(nc - 1) {
            g2[j] += t * step[mr + cj];
        }
        let val = dual(&f2, &g2);
        if val.is_finite() && val >= base + 1e-4 * t * slope {
            f.copy_from_slice(&f2);
            g.copy_from_slice(&g2);
            return true;
        }
        t *= 0.5;
    }
    false
}

/// Exact when the combined support fits the exact solver, entropic otherwise.
pub fn wasserstein2_auto(
    p: &EmpiricalDistribution,
    q: &EmpiricalDistribution,
    exact_max: usize,
    epsilon: f64,
) -> Result<(f64, TransportPlan)> {
    if p.len() + q.len() <= exact_max.min(EXACT_SUPPORT_LIMIT) {
        wasserstein2_exact(p, q)
    } else {
        let r = wasserstein2_sinkhorn(p, q, epsilon, 10_000)?;
        Ok((r.value, r.plan))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(points: &[f64]) -> EmpiricalDistribution {
        EmpiricalDistribution::uniform(points.iter().map(|&x| vec![x]).collect()).unwrap()
    }

    #[test]
    fn identity_gives_zero_and_diagonal_plan() {
        let p = line(&[0.0, 1.0, 3.0]);
        let (w, plan) = wasserstein2_exact(&p, &p).unwrap();
        assert!(w.abs() < 1e-12);
        for i in 0..3 {
            assert!((plan.get(i, i) - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn point_masses() {
        let p = EmpiricalDistribution::point(vec![0.0, 0.0]).unwrap();
        let q = EmpiricalDistribution::point(vec![3.0, 4.0]).unwrap();
        assert!((wasserstein2_exact(&p, &q).unwrap().0 - 5.0).abs() < 1e-12);
    }

    #[test]
    fn one_dimensional_benchmark() {
        let p = line(&[0.0, 1.0]);
        let q = line(&[0.0, 2.0]);
        let (w, plan) = wasserstein2_exact(&p, &q).unwrap();
        assert!((w - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(plan.marginal_violation(p.weights(), q.weights()) < 1e-12);
        let s = wasserstein2_sinkhorn(&p, &q, 0.01, 10_000).unwrap();
        assert!(s.converged);
        assert!((s.value - 0.5f64.sqrt()).abs() < 1e-3);
        assert!(s.plan.marginal_violation(p.weights(), q.weights()) < 1e-6);
    }

    #[test]
    fn unequal_weights_split_mass() {
        let p = EmpiricalDistribution::new(vec![vec![0.0], vec![10.0]], vec![0.25, 0.75]).unwrap();
        let q = line(&[1.0, 9.0]);
        let (w, plan) = wasserstein2_exact(&p, &q).unwrap();
        // 0.25 from 0 -> 1, 0.25 from 10 -> 1, 0.5 from 10 -> 9
        let expected = (0.25 * 1.0 + 0.25 * 81.0 + 0.5 * 1.0f64).sqrt();
        assert!((w - expected).abs() < 1e-12);
        assert!(plan.marginal_violation(p.weights(), q.weights()) < 1e-12);
    }

    #[test]
    fn support_limit_and_validation() {
        let big = line(&(0..40).map(|i| i as f64).collect::<Vec<_>>());
        assert!(matches!(
            wasserstein2_exact(&big, &big),
            Err(Error::SupportTooLarge { size: 80, limit: 64 })
        ));
        assert!(wasserstein2_auto(&big, &big, 64, 0.05).is_ok());
        assert!(EmpiricalDistribution::new(vec![vec![0.0]], vec![0.5]).is_err());
        assert!(EmpiricalDistribution::new(vec![vec![0.0], vec![1.0, 2.0]], vec![0.5, 0.5]).is_err());
        assert!(wasserstein2_sinkhorn(&big, &big, 0.0, 10).is_err());
    }

    #[test]
    fn non_convergence_is_flagged() {
        let p = line(&[0.0, 1.0, 2.0]);
        let q = line(&[0.5, 4.0, 7.0]);
        let s = wasserstein2_sinkhorn(&p, &q, 1e-3, 1).unwrap();
        assert!(!s.converged);
        assert!(s.value.is_finite());
    }
}
