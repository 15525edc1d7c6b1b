//! Hyperboloid (Lorentz) model of hyperbolic space.
//!
//! Points live on the upper sheet `{x : <x,x>_L = -1, x_0 > 0}` of the
//! hyperboloid in Minkowski space, with `<x,y>_L = -x_0 y_0 + sum_i x_i y_i`.
//! Coordinate 0 is time-like; coordinates `1..=n` are space-like.
//!
//! Parameters elsewhere in the crate are stored as unconstrained space-like
//! vectors and lifted with [`project_to_hyperboloid`], so there is exactly one
//! canonical representation of a point.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance (relative to `x_0^2`) for accepting externally supplied points.
pub const INPUT_TOLERANCE: f64 = 1e-6;

/// Below this value of `-<x,y>_L - 1` the distance uses `sqrt(2 s)`.
const NEAR_COINCIDENT: f64 = 1e-12;

/// Below this norm a tangent vector is treated as zero.
const TINY_NORM: f64 = 1e-12;

/// Minkowski bilinear form `-x_0 y_0 + sum_{i>=1} x_i y_i`.
pub fn lorentz_inner(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::contract(format!(
            "lorentz_inner: length mismatch {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::contract("lorentz_inner: vectors need length >= 2"));
    }
    Ok(inner_unchecked(x, y))
}

#[inline]
pub(crate) fn inner_unchecked(x: &[f64], y: &[f64]) -> f64 {
    let space: f64 = x[1..].iter().zip(&y[1..]).map(|(a, b)| a * b).sum();
    space - x[0] * y[0]
}

/// A point on the future sheet of the hyperboloid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LorentzPoint {
    coords: Vec<f64>,
}

impl LorentzPoint {
    /// Validates full `(n+1)`-coordinates.
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::invalid_point("need at least one space-like coordinate"));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid_point("non-finite coordinate"));
        }
        if coords[0] < 1.0 - INPUT_TOLERANCE {
            return Err(Error::invalid_point(format!(
                "time-like coordinate {} is below 1 (lower sheet or off-manifold)",
                coords[0]
            )));
        }
        let violation = (inner_unchecked(&coords, &coords) + 1.0).abs();
        let scale = coords[0] * coords[0];
        if violation > INPUT_TOLERANCE * scale.max(1.0) {
            return Err(Error::invalid_point(format!(
                "constraint violated by {violation:.3e}"
            )));
        }
        Ok(Self { coords })
    }

    /// `(1, 0, ..., 0)` in `H^n`.
    pub fn origin(n: usize) -> Self {
        let mut coords = vec![0.0; n + 1];
        coords[0] = 1.0;
        Self { coords }
    }

    /// Space dimension `n`.
    pub fn dim(&self) -> usize {
        self.coords.len() - 1
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Space-like part `x_1..x_n`.
    pub fn space(&self) -> &[f64] {
        &self.coords[1..]
    }

    pub fn time(&self) -> f64 {
        self.coords[0]
    }

    /// `|<x,x>_L + 1|`.
    pub fn constraint_violation(&self) -> f64 {
        (inner_unchecked(&self.coords, &self.coords) + 1.0).abs()
    }
}

/// Lifts a space-like vector onto the hyperboloid: `(sqrt(1 + |v|^2), v)`.
pub fn project_to_hyperboloid(space: &[f64]) -> Result<LorentzPoint> {
    if space.is_empty() {
        return Err(Error::invalid_point("empty space-like part"));
    }
    if space.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid_point("non-finite coordinate"));
    }
    Ok(lift(space))
}

pub(crate) fn lift(space: &[f64]) -> LorentzPoint {
    let norm_sq: f64 = space.iter().map(|v| v * v).sum();
    let mut coords = Vec::with_capacity(space.len() + 1);
    coords.push((1.0 + norm_sq).sqrt());
    coords.extend_from_slice(space);
    LorentzPoint { coords }
}

/// A vector in the tangent space at `base`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    base: LorentzPoint,
    components: Vec<f64>,
}

impl TangentVector {
    /// Checks `<base, components>_L = 0` (relative tolerance 1e-8).
    pub fn new(base: LorentzPoint, components: Vec<f64>) -> Result<Self> {
        if components.len() != base.coords.len() {
            return Err(Error::contract("tangent vector length does not match base"));
        }
        let ortho = inner_unchecked(&base.coords, &components).abs();
        let scale = base.coords[0] * components.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        if ortho > 1e-8 * scale.max(1.0) {
            return Err(Error::contract(format!(
                "vector is not tangent at base (<x,u>_L = {ortho:.3e})"
            )));
        }
        Ok(Self { base, components })
    }

    pub fn zero(base: &LorentzPoint) -> Self {
        Self {
            components: vec![0.0; base.coords.len()],
            base: base.clone(),
        }
    }

    pub fn base(&self) -> &LorentzPoint {
        &self.base
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    /// `sqrt(<u,u>_L)`, which is non-negative on tangent spaces.
    pub fn norm(&self) -> f64 {
        inner_unchecked(&self.components, &self.components).max(0.0).sqrt()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            base: self.base.clone(),
            components: self.components.iter().map(|c| c * factor).collect(),
        }
    }
}

/// `s = -<x,y>_L - 1`, computed from the difference vector so it stays
/// accurate for nearby points.
fn excess(x: &[f64], y: &[f64]) -> f64 {
    let a = -inner_unchecked(x, y);
    if a > 2.0 {
        return a - 1.0;
    }
    let diff_sq: f64 = x[1..]
        .iter()
        .zip(&y[1..])
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        - (x[0] - y[0]) * (x[0] - y[0]);
    (0.5 * diff_sq).max(0.0)
}

fn arccosh_one_plus(s: f64) -> f64 {
    if s < NEAR_COINCIDENT {
        (2.0 * s).sqrt()
    } else {
        (s + (s * (2.0 + s)).sqrt()).ln_1p()
    }
}

/// `arccosh(-<x,y>_L)`, argument clamped to `[1, inf)`.
pub fn geodesic_distance(x: &LorentzPoint, y: &LorentzPoint) -> f64 {
    debug_assert_eq!(x.coords.len(), y.coords.len());
    arccosh_one_plus(excess(&x.coords, &y.coords))
}

/// Distance between raw coordinate vectors, validating both first.
pub fn geodesic_distance_checked(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::contract("geodesic_distance: dimension mismatch"));
    }
    let x = LorentzPoint::new(x.to_vec())?;
    let y = LorentzPoint::new(y.to_vec())?;
    Ok(geodesic_distance(&x, &y))
}

/// Gradient of `d(lift(x_space), y)` with respect to `x_space`.
///
/// Returns zero when the points coincide (the subgradient at the kink).
pub fn distance_grad_space(x: &LorentzPoint, y: &LorentzPoint) -> Vec<f64> {
    let n = x.dim();
    let s = excess(&x.coords, &y.coords);
    if s < 1e-24 {
        return vec![0.0; n];
    }
    let denom = (s * (2.0 + s)).sqrt();
    let (x0, y0) = (x.coords[0], y.coords[0]);
    (1..=n)
        .map(|i| (y0 * x.coords[i] / x0 - y.coords[i]) / denom)
        .collect()
}

/// Exponential map `cosh(|u|) x + sinh(|u|) u/|u|`, re-projected.
pub fn exp_map(x: &LorentzPoint, u: &TangentVector) -> Result<LorentzPoint> {
    if !same_base(x, &u.base) {
        return Err(Error::contract("exp_map: tangent vector is based elsewhere"));
    }
    Ok(exp_unchecked(x, &u.components))
}

fn same_base(a: &LorentzPoint, b: &LorentzPoint) -> bool {
    a.coords.len() == b.coords.len()
        && a
            .coords
            .iter()
            .zip(&b.coords)
            .all(|(p, q)| (p - q).abs() <= 1e-12 * p.abs().max(1.0))
}

fn exp_unchecked(x: &LorentzPoint, u: &[f64]) -> LorentzPoint {
    let norm = inner_unchecked(u, u).max(0.0).sqrt();
    if !(norm >= TINY_NORM) {
        return x.clone();
    }
    let (c, s) = (norm.cosh(), norm.sinh() / norm);
    let space: Vec<f64> = x.coords[1..]
        .iter()
        .zip(&u[1..])
        .map(|(xi, ui)| c * xi + s * ui)
        .collect();
    lift(&space)
}

/// Inverse of [`exp_map`]; returns the zero vector when `y == x`.
pub fn log_map(x: &LorentzPoint, y: &LorentzPoint) -> Result<TangentVector> {
    if x.coords.len() != y.coords.len() {
        return Err(Error::contract("log_map: dimension mismatch"));
    }
    let d = geodesic_distance(x, y);
    let a = -inner_unchecked(&x.coords, &y.coords);
    let mut u: Vec<f64> = y.coords.iter().zip(&x.coords).map(|(yi, xi)| yi - a * xi).collect();
    let u_norm = inner_unchecked(&u, &u).max(0.0).sqrt();
    if d < TINY_NORM || u_norm < TINY_NORM * 1e-3 {
        return Ok(TangentVector::zero(x));
    }
    let scale = d / u_norm;
    for c in &mut u {
        *c *= scale;
    }
    // remove the residual normal component left by rounding
    let drift = inner_unchecked(&x.coords, &u);
    for (c, xi) in u.iter_mut().zip(&x.coords) {
        *c += drift * xi;
    }
    Ok(TangentVector {
        base: x.clone(),
        components: u,
    })
}

/// Raises the index of an ambient Euclidean gradient (flip component 0) and
/// projects it onto the tangent space at `x`.
pub fn riemannian_gradient(x: &LorentzPoint, euclidean_grad: &[f64]) -> Result<TangentVector> {
    if euclidean_grad.len() != x.coords.len() {
        return Err(Error::contract(format!(
            "gradient has length {}, expected {}",
            euclidean_grad.len(),
            x.coords.len()
        )));
    }
    let mut h = euclidean_grad.to_vec();
    h[0] = -h[0];
    let proj = inner_unchecked(&x.coords, &h);
    for (hi, xi) in h.iter_mut().zip(&x.coords) {
        *hi += proj * xi;
    }
    // second pass absorbs cancellation when |h| is large relative to x
    let residual = inner_unchecked(&x.coords, &h);
    for (hi, xi) in h.iter_mut().zip(&x.coords) {
        *hi += residual * xi;
    }
    Ok(TangentVector {
        base: x.clone(),
        components: h,
    })
}

/// One Riemannian SGD step: `exp_x(-lr * grad_R)`, re-projected.
pub fn rsgd_step(x: &LorentzPoint, euclidean_grad: &[f64], lr: f64) -> Result<LorentzPoint> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::config(format!("learning rate must be positive, got {lr}")));
    }
    if euclidean_grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::divergence(0, "non-finite gradient in rsgd_step"));
    }
    let grad = riemannian_gradient(x, euclidean_grad)?;
    let step: Vec<f64> = grad.components.iter().map(|c| -lr * c).collect();
    let next = exp_unchecked(x, &step);
    if next.coords.iter().any(|c| !c.is_finite()) {
        return Err(Error::divergence(0, "rsgd_step left the representable range"));
    }
    Ok(next)
}

/// Tangent at the origin, returned as its space-like part.
pub fn log_origin(y: &LorentzPoint) -> Vec<f64> {
    let r: f64 = y.space().iter().map(|v| v * v).sum::<f64>().sqrt();
    if r < 1e-300 {
        return vec![0.0; y.dim()];
    }
    let d = r.asinh();
    y.space().iter().map(|v| v * d / r).collect()
}

/// Inverse of [`log_origin`].
pub fn exp_origin(v: &[f64]) -> LorentzPoint {
    let norm: f64 = v.iter().map(|c| c * c).sum::<f64>().sqrt();
    if norm < TINY_NORM {
        return lift(v);
    }
    let s = norm.sinh() / norm;
    let space: Vec<f64> = v.iter().map(|c| c * s).collect();
    lift(&space)
}

/// Writes `lorentz <n> <count>` followed by one row of space-like coordinates
/// per point.
pub fn write_embeddings<W: Write>(mut out: W, points: &[LorentzPoint]) -> Result<()> {
    let n = points.first().map_or(0, |p| p.dim());
    writeln!(out, "lorentz {} {}", n, points.len())?;
    for p in points {
        if p.dim() != n {
            return Err(Error::contract("mixed dimensions in embedding file"));
        }
        let row: Vec<String> = p.space().iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    Ok(())
}

/// Reads the format produced by [`write_embeddings`]; the time-like
/// coordinate is reconstructed by projection.
pub fn read_embeddings<R: BufRead>(input: R) -> Result<Vec<LorentzPoint>> {
    let parse_err = |line: usize, detail: String| Error::Parse {
        source_name: "embeddings".into(),
        line,
        detail,
    };
    let mut lines = input.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header".into()))?;
    let header = header?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 3 || fields[0] != "lorentz" {
        return Err(parse_err(1, format!("bad header {header:?}")));
    }
    let n: usize = fields[1].parse().map_err(|e| parse_err(1, format!("{e}")))?;
    let count: usize = fields[2].parse().map_err(|e| parse_err(1, format!("{e}")))?;
    let mut points = Vec::with_capacity(count);
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(idx + 1, format!("{e}")))?;
        if row.len() != n {
            return Err(parse_err(idx + 1, format!("expected {n} values, got {}", row.len())));
        }
        points.push(project_to_hyperboloid(&row)?);
    }
    if points.len() != count {
        return Err(parse_err(0, format!("header says {count} rows, found {}", points.len())));
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn p(coords: &[f64]) -> LorentzPoint {
        LorentzPoint::new(coords.to_vec()).unwrap()
    }

    #[test]
    fn inner_examples() {
        let s2 = 2f64.sqrt();
        assert_eq!(lorentz_inner(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap(), -1.0);
        assert_eq!(lorentz_inner(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert_relative_eq!(lorentz_inner(&[s2, 1.0, 0.0], &[s2, 0.0, 1.0]).unwrap(), -2.0, epsilon = 1e-15);
        assert!(matches!(lorentz_inner(&[1.0, 0.0], &[1.0, 0.0, 0.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn distance_examples() {
        let o = LorentzPoint::origin(2);
        assert_eq!(geodesic_distance(&o, &o), 0.0);
        let y = project_to_hyperboloid(&[1.0, 0.0]).unwrap();
        assert_relative_eq!(y.time(), 2f64.sqrt());
        // arccosh(sqrt 2) = ln(sqrt2 + 1)
        assert_relative_eq!(geodesic_distance(&o, &y), (2f64.sqrt() + 1.0).ln(), epsilon = 1e-15);
        assert_relative_eq!(geodesic_distance(&o, &y), 0.881_373_587_019_543, epsilon = 1e-12);
    }

    #[test]
    fn off_manifold_rejected() {
        assert!(matches!(
            geodesic_distance_checked(&[1.0, 0.5, 0.0], &[1.0, 0.0, 0.0]),
            Err(Error::InvalidPoint(_))
        ));
        assert!(matches!(project_to_hyperboloid(&[f64::NAN]), Err(Error::InvalidPoint(_))));
    }

    #[test]
    fn exp_closed_form() {
        let o = LorentzPoint::origin(2);
        let t = 1.3;
        let u = TangentVector::new(o.clone(), vec![0.0, t, 0.0]).unwrap();
        let y = exp_map(&o, &u).unwrap();
        assert_relative_eq!(y.coords()[0], t.cosh(), epsilon = 1e-12);
        assert_relative_eq!(y.coords()[1], t.sinh(), epsilon = 1e-12);
        assert_eq!(exp_map(&o, &TangentVector::zero(&o)).unwrap(), o);
    }

    #[test]
    fn exp_rejects_foreign_base() {
        let o = LorentzPoint::origin(2);
        let other = project_to_hyperboloid(&[0.5, 0.0]).unwrap();
        let u = TangentVector::zero(&other);
        assert!(matches!(exp_map(&o, &u), Err(Error::Contract(_))));
    }

    #[test]
    fn log_closed_form() {
        let o = LorentzPoint::origin(2);
        let y = p(&[1f64.cosh(), 1f64.sinh(), 0.0]);
        let u = log_map(&o, &y).unwrap();
        assert_relative_eq!(u.components()[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(u.components()[1], 1.0, epsilon = 1e-12);
        assert_relative_eq!(u.components()[2], 0.0, epsilon = 1e-12);
        let z = log_map(&y, &y).unwrap();
        assert!(z.components().iter().all(|c| *c == 0.0));
    }

    #[test]
    fn riemannian_gradient_zero_and_orthogonal() {
        let x = project_to_hyperboloid(&[0.3, -1.2, 0.7]).unwrap();
        let u = riemannian_gradient(&x, &[0.0; 4]).unwrap();
        assert!(u.components().iter().all(|c| *c == 0.0));
        let u = riemannian_gradient(&x, &[2.0, -1.0, 0.5, 3.0]).unwrap();
        assert!(inner_unchecked(x.coords(), u.components()).abs() < 1e-10);
        assert!(riemannian_gradient(&x, &[1.0]).is_err());
    }

    #[test]
    fn rsgd_zero_gradient_is_identity() {
        let x = project_to_hyperboloid(&[0.3, -1.2]).unwrap();
        assert_eq!(rsgd_step(&x, &[0.0; 3], 0.1).unwrap(), x);
        assert!(matches!(rsgd_step(&x, &[f64::NAN, 0.0, 0.0], 0.1), Err(Error::Divergence { .. })));
        assert!(rsgd_step(&x, &[0.0; 3], 0.0).is_err());
    }

    #[test]
    fn near_coincident_distance_is_small_and_finite() {
        let x = project_to_hyperboloid(&[0.5, 0.5]).unwrap();
        let y = project_to_hyperboloid(&[0.5 + 1e-9, 0.5]).unwrap();
        let d = geodesic_distance(&x, &y);
        assert!(d > 0.0 && d < 1e-8);
        let g = distance_grad_space(&x, &y);
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn origin_log_exp_roundtrip() {
        let y = project_to_hyperboloid(&[0.4, -2.0, 1.5]).unwrap();
        let v = log_origin(&y);
        let back = exp_origin(&v);
        for (a, b) in back.coords().iter().zip(y.coords()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        let norm: f64 = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        assert_relative_eq!(norm, geodesic_distance(&LorentzPoint::origin(3), &y), epsilon = 1e-12);
    }

    #[test]
    fn embedding_file_roundtrip() {
        let pts = vec![
            project_to_hyperboloid(&[0.1, 0.2]).unwrap(),
            project_to_hyperboloid(&[-3.0, 1e-7]).unwrap(),
        ];
        let mut buf = Vec::new();
        write_embeddings(&mut buf, &pts).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("lorentz 2 2\n"));
        let back = read_embeddings(&buf[..]).unwrap();
        assert_eq!(back, pts);
        assert!(read_embeddings(&b"lorentz 2 3\n1 2\n"[..]).is_err());
    }
}
