// Smallest eigenpairs of symmetric operators: dense solver for small
// problems, shifted Lanczos with full re-orthogonalization above.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

use super::KnowledgeGraph;
use crate::error::{Error, Result};
use crate::seeded_rng;

/// Problems up to this size go to the dense solver under [`EigenMethod::Auto`].
pub const DENSE_LIMIT: usize = 512;

const RESIDUAL_TOL: f64 = 1e-7;

pub trait SymmetricOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], out: &mut [f64]);
    fn to_dense(&self) -> DMatrix<f64>;
    /// Upper bound on the spectral norm; scales the residual tolerance.
    fn norm_bound(&self) -> f64;
}

impl SymmetricOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row(i).iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    fn to_dense(&self) -> DMatrix<f64> {
        self.clone()
    }

    fn norm_bound(&self) -> f64 {
        (0..self.nrows())
            .map(|i| self.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Matrix-free `L = D - A`, or `I - D^{-1/2} A D^{-1/2}` when normalized.
#[derive(Debug, Clone, Copy)]
pub struct LaplacianOperator<'g> {
    pub graph: &'g KnowledgeGraph,
    pub normalized: bool,
}

impl<'g> LaplacianOperator<'g> {
    pub fn new(graph: &'g KnowledgeGraph) -> Self {
        Self {
            graph,
            normalized: false,
        }
    }

    pub fn normalized(graph: &'g KnowledgeGraph) -> Self {
        Self {
            graph,
            normalized: true,
        }
    }

    fn inv_sqrt_degree(&self, v: usize) -> f64 {
        let d = self.graph.degree(v);
        if d > 0.0 {
            1.0 / d.sqrt()
        } else {
            0.0
        }
    }
}

impl SymmetricOperator for LaplacianOperator<'_> {
    fn dim(&self) -> usize {
        self.graph.len()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (v, o) in out.iter_mut().enumerate() {
            if self.normalized {
                let sv = self.inv_sqrt_degree(v);
                let mut acc = if self.graph.degree(v) > 0.0 { x[v] } else { 0.0 };
                for &(u, w) in self.graph.neighbors(v) {
                    acc -= w * sv * self.inv_sqrt_degree(u) * x[u];
                }
                *o = acc;
            } else {
                let mut acc = self.graph.degree(v) * x[v];
                for &(u, w) in self.graph.neighbors(v) {
                    acc -= w * x[u];
                }
                *o = acc;
            }
        }
    }

    fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for v in 0..n {
            if self.normalized {
                if self.graph.degree(v) > 0.0 {
                    m[(v, v)] = 1.0;
                }
                for &(u, w) in self.graph.neighbors(v) {
                    m[(v, u)] -= w * self.inv_sqrt_degree(v) * self.inv_sqrt_degree(u);
                }
            } else {
                m[(v, v)] = self.graph.degree(v);
                for &(u, w) in self.graph.neighbors(v) {
                    m[(v, u)] -= w;
                }
            }
        }
        m
    }

    fn norm_bound(&self) -> f64 {
        if self.normalized {
            2.0
        } else {
            2.0 * self.graph.degrees().iter().copied().fold(0.0, f64::max)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub value: f64,
    /// Unit norm; sign fixed so the largest-magnitude entry is positive.
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EigenMethod {
    /// Dense up to [`DENSE_LIMIT`], Lanczos above.
    #[default]
    Auto,
    Dense,
    Lanczos,
}

/// The `k` smallest eigenpairs in ascending order.
pub fn smallest_eigenpairs<O: SymmetricOperator>(op: &O, k: usize) -> Result<Vec<EigenPair>> {
    smallest_eigenpairs_with(op, k, EigenMethod::Auto)
}

pub fn smallest_eigenpairs_with<O: SymmetricOperator>(
    op: &O,
    k: usize,
    method: EigenMethod,
) -> Result<Vec<EigenPair>> {
    let n = op.dim();
    if k == 0 {
        return Err(Error::contract("smallest_eigenpairs: k must be positive"));
    }
    if k > n {
        return Err(Error::contract(format!("smallest_eigenpairs: k = {k} exceeds dimension {n}")));
    }
    let use_dense = match method {
        EigenMethod::Dense => true,
        EigenMethod::Lanczos => false,
        EigenMethod::Auto => n <= DENSE_LIMIT,
    };
    let pairs = if use_dense {
        dense(op, k)
    } else {
        lanczos_smallest(op, k)?
    };
    let tol = RESIDUAL_TOL * op.norm_bound().max(1.0);
    let worst = pairs
        .iter()
        .map(|p| residual(op, p))
        .fold(0.0, f64::max);
    if worst > tol {
        return Err(Error::Numerical {
            detail: "eigenpair residual above tolerance".into(),
            residual: worst,
        });
    }
    Ok(pairs)
}

/// `|| A v - lambda v ||`.
pub fn residual<O: SymmetricOperator>(op: &O, pair: &EigenPair) -> f64 {
    let mut av = vec![0.0; op.dim()];
    op.apply(&pair.vector, &mut av);
    av.iter()
        .zip(&pair.vector)
        .map(|(a, v)| (a - pair.value * v).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn canonical_sign(mut v: Vec<f64>) -> Vec<f64> {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() + 1e-12 {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

fn dense<O: SymmetricOperator>(op: &O, k: usize) -> Vec<EigenPair> {
    let eig = SymmetricEigen::new(op.to_dense());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    order
        .into_iter()
        .take(k)
        .map(|i| EigenPair {
            value: eig.eigenvalues[i],
            vector: canonical_sign(eig.eigenvectors.column(i).iter().copied().collect()),
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Removes the components along `basis` (twice, for stability).
fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let c = dot(v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
    }
}

/// Lanczos on `shift * I - A` restricted to the complement of `locked`;
/// returns up to `want` Ritz pairs of `A` with the smallest values.
///
/// Every orthogonalization coefficient is kept, so the projected matrix is
/// exact even after restarts or near-breakdowns, when the three-term
/// recurrence alone would drop couplings.
fn lanczos_run<O: SymmetricOperator>(
    op: &O,
    want: usize,
    locked: &[Vec<f64>],
    seed: u64,
    budget: &mut usize,
) -> Result<Vec<EigenPair>> {
    let n = op.dim();
    let shift = op.norm_bound().max(1e-300);
    let tol = 1e-10 * op.norm_bound().max(1.0);
    let capacity = n.saturating_sub(locked.len());
    if capacity == 0 || want == 0 {
        return Ok(Vec::new());
    }
    let mut rng = seeded_rng(seed);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    // coefs[j][i] = <B v_j, v_i> for i <= j
    let mut coefs: Vec<Vec<f64>> = Vec::new();

    let fresh = |rng: &mut rand_chacha::ChaCha8Rng, basis: &[Vec<f64>]| -> Option<Vec<f64>> {
        for _ in 0..8 {
            let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            orthogonalize(&mut v, locked);
            orthogonalize(&mut v, basis);
            if normalize(&mut v) > 1e-8 {
                return Some(v);
            }
        }
        None
    };

    let mut v = fresh(&mut rng, &basis).ok_or_else(|| Error::Numerical {
        detail: "could not draw a Lanczos start vector".into(),
        residual: f64::NAN,
    })?;
    let mut w = vec![0.0; n];
    loop {
        if *budget == 0 {
            return Err(Error::Numerical {
                detail: "Lanczos iteration cap reached".into(),
                residual: f64::NAN,
            });
        }
        *budget -= 1;
        op.apply(&v, &mut w);
        for (wi, vi) in w.iter_mut().zip(&v) {
            *wi = shift * vi - *wi;
        }
        basis.push(v.clone());
        orthogonalize(&mut w, locked);
        let mut column = vec![0.0; basis.len()];
        for _ in 0..2 {
            for (c, b) in column.iter_mut().zip(&basis) {
                let proj = dot(&w, b);
                *c += proj;
                w.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
            }
        }
        coefs.push(column);
        let beta = normalize(&mut w);
        let m = basis.len();

        let exhausted = m >= capacity;
        let breakdown = beta <= 1e-12 * shift;
        if exhausted || breakdown || m % 8 == 0 {
            let eig = SymmetricEigen::new(projected(&coefs));
            let mut order: Vec<usize> = (0..m).collect();
            // largest of the shifted operator = smallest of A
            order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
            let take = want.min(m);
            let ritz = |i: usize| {
                let mut vec = vec![0.0; n];
                for (j, b) in basis.iter().enumerate() {
                    let c = eig.eigenvectors[(j, i)];
                    vec.iter_mut().zip(b).for_each(|(x, y)| *x += c * y);
                }
                normalize(&mut vec);
                EigenPair {
                    value: shift - eig.eigenvalues[i],
                    vector: vec,
                }
            };
            let estimated = order[..take]
                .iter()
                .all(|&i| (beta * eig.eigenvectors[(m - 1, i)]).abs() <= tol);
            if exhausted || (estimated && take == want) {
                let pairs: Vec<EigenPair> = order[..take].iter().map(|&i| ritz(i)).collect();
                // the estimate is optimistic near repeated eigenvalues, so
                // confirm with true residuals
                if exhausted || pairs.iter().all(|p| residual(op, p) <= tol) {
                    return Ok(pairs);
                }
            }
            if breakdown {
                // invariant subspace found; continue from a new direction
                match fresh(&mut rng, &basis) {
                    Some(next) => {
                        v = next;
                        continue;
                    }
                    None => return Ok(Vec::new()),
                }
            }
        }
        std::mem::swap(&mut v, &mut w);
    }
}

/// Symmetric projected matrix from the upper-triangular coefficients.
fn projected(coefs: &[Vec<f64>]) -> DMatrix<f64> {
    let m = coefs.len();
    let mut t = DMatrix::zeros(m, m);
    for (j, column) in coefs.iter().enumerate() {
        for (i, c) in column.iter().enumerate() {
            t[(i, j)] = *c;
            t[(j, i)] = *c;
        }
    }
    t
}

/// Repeats deflated Lanczos runs until no eigenvalue smaller than the
/// current k-th one remains in the complement; this recovers repeated
/// eigenvalues that a single Krylov space cannot see.
fn lanczos_smallest<O: SymmetricOperator>(op: &O, k: usize) -> Result<Vec<EigenPair>> {
    let n = op.dim();
    let mut budget = 50 * n;
    let scale = op.norm_bound().max(1.0);
    let mut found = lanczos_run(op, k, &[], 0x1a2c_0500, &mut budget)?;
    for round in 1..=(k + 2) {
        if found.len() >= n {
            break;
        }
        let locked: Vec<Vec<f64>> = found.iter().map(|p| p.vector.clone()).collect();
        let extra = lanczos_run(op, k.min(n - found.len()), &locked, 0x1a2c_0500 + round as u64, &mut budget)?;
        let kth = found.last().map_or(f64::INFINITY, |p| p.value);
        let improves: Vec<EigenPair> = extra
            .into_iter()
            .filter(|p| found.len() < k || p.value < kth - 1e-9 * scale)
            .collect();
        if improves.is_empty() {
            break;
        }
        found.extend(improves);
        found.sort_by(|a, b| a.value.total_cmp(&b.value));
        found.truncate(k);
    }
    if found.len() < k {
        return Err(Error::Numerical {
            detail: format!("Lanczos produced {} of {k} eigenpairs", found.len()),
            residual: f64::NAN,
        });
    }
    Ok(found
        .into_iter()
        .map(|p| EigenPair {
            value: p.value,
            vector: canonical_sign(p.vector),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::super::test_graphs::*;
    use super::super::laplacian;
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn path3_spectrum() {
        let pairs = smallest_eigenpairs(&laplacian(&path(3)), 3).unwrap();
        let values: Vec<f64> = pairs.iter().map(|p| p.value).collect();
        for (got, want) in values.iter().zip([0.0, 1.0, 3.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-10);
        }
    }

    #[test]
    fn k4_spectrum_and_constant_kernel() {
        let pairs = smallest_eigenpairs(&LaplacianOperator::new(&complete(4)), 4).unwrap();
        for (got, want) in pairs.iter().zip([0.0, 4.0, 4.0, 4.0]) {
            assert_abs_diff_eq!(got.value, want, epsilon = 1e-10);
        }
        let first = &pairs[0].vector;
        assert!(first.iter().all(|x| (x - first[0]).abs() < 1e-8));
    }

    #[test]
    fn k_out_of_range() {
        let l = laplacian(&path(3));
        assert!(smallest_eigenpairs(&l, 0).is_err());
        assert!(smallest_eigenpairs(&l, 4).is_err());
    }

    #[test]
    fn lanczos_matches_dense_with_repeated_zero() {
        // three components, so eigenvalue 0 has multiplicity 3
        let mut edges = Vec::new();
        for c in 0..3 {
            let base = c * 20;
            for i in 0..19 {
                edges.push((base + i, base + i + 1, 1.0 + (i % 3) as f64));
            }
            edges.push((base, base + 10, 0.5));
        }
        let g = from_edges(60, &edges);
        let op = LaplacianOperator::new(&g);
        let dense = smallest_eigenpairs_with(&op, 6, EigenMethod::Dense).unwrap();
        let lanczos = smallest_eigenpairs_with(&op, 6, EigenMethod::Lanczos).unwrap();
        for (d, l) in dense.iter().zip(&lanczos) {
            assert_abs_diff_eq!(d.value, l.value, epsilon = 1e-7);
        }
        assert_abs_diff_eq!(lanczos[2].value, 0.0, epsilon = 1e-8);
        for i in 0..6 {
            for j in 0..i {
                assert!(dot(&lanczos[i].vector, &lanczos[j].vector).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn normalized_operator_matches_dense_form() {
        let g = path(5);
        let op = LaplacianOperator::normalized(&g);
        let dense = op.to_dense();
        let x = [0.3, -1.0, 2.0, 0.5, 0.1];
        let mut a = vec![0.0; 5];
        let mut b = vec![0.0; 5];
        op.apply(&x, &mut a);
        dense.apply(&x, &mut b);
        for (p, q) in a.iter().zip(&b) {
            assert_abs_diff_eq!(p, q, epsilon = 1e-14);
        }
    }
}
