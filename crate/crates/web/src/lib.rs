//! Three operations for the static demo page. Inputs and outputs are JSON
//! strings so the page needs no generated bindings beyond the function names.

use serde::{Deserialize, Serialize};

use hyperrag_core::lorentz::{self, LorentzPoint};
use hyperrag_core::spectral::{self, CheegerReport, Edge, KnowledgeGraph, Vertex};
use hyperrag_core::transport::{self, EmpiricalDistribution};

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error(transparent)]
    Core(#[from] hyperrag_core::Error),
    #[error("bad input: {0}")]
    Input(#[from] serde_json::Error),
    #[error("point {0:?} is not inside the unit disk")]
    OutsideDisk([f64; 2]),
}

pub type DemoResult<T> = Result<T, DemoError>;

fn disk_to_hyperboloid(p: [f64; 2]) -> DemoResult<LorentzPoint> {
    let r2 = p[0] * p[0] + p[1] * p[1];
    if !(r2 < 1.0) {
        return Err(DemoError::OutsideDisk(p));
    }
    let s = 2.0 / (1.0 - r2);
    Ok(lorentz::project_to_hyperboloid(&[s * p[0], s * p[1]])?)
}

fn hyperboloid_to_disk(x: &LorentzPoint) -> [f64; 2] {
    let c = x.coords();
    [c[1] / (1.0 + c[0]), c[2] / (1.0 + c[0])]
}

#[derive(Debug, Serialize)]
pub struct Geodesic {
    pub distance: f64,
    /// Samples along the geodesic in Poincaré disk coordinates.
    pub path: Vec<[f64; 2]>,
}

/// Distance between two disk points and the geodesic joining them,
/// traced with the exponential map of the scaled logarithm.
pub fn geodesic(a: [f64; 2], b: [f64; 2], samples: usize) -> DemoResult<Geodesic> {
    let (x, y) = (disk_to_hyperboloid(a)?, disk_to_hyperboloid(b)?);
    let v = lorentz::log_map(&x, &y)?;
    let steps = samples.max(2);
    let path = (0..steps)
        .map(|i| {
            let t = i as f64 / (steps - 1) as f64;
            let u = lorentz::TangentVector::new(x.clone(), v.components().iter().map(|c| t * c).collect())?;
            Ok(hyperboloid_to_disk(&lorentz::exp_map(&x, &u)?))
        })
        .collect::<DemoResult<_>>()?;
    Ok(Geodesic {
        distance: lorentz::geodesic_distance(&x, &y),
        path,
    })
}

#[derive(Debug, Serialize)]
pub struct Transport {
    pub exact: f64,
    pub sinkhorn: f64,
    pub converged: bool,
    /// `(i, j, mass)` for every exact-plan entry above 1e-12.
    pub exact_plan: Vec<(usize, usize, f64)>,
    pub sinkhorn_plan: Vec<(usize, usize, f64)>,
}

fn sparse(plan: &transport::TransportPlan) -> Vec<(usize, usize, f64)> {
    (0..plan.rows)
        .flat_map(|i| (0..plan.cols).map(move |j| (i, j)))
        .map(|(i, j)| (i, j, plan.get(i, j)))
        .filter(|t| t.2 > 1e-12)
        .collect()
}

/// Exact and entropic W2 between two uniform 2-D point clouds.
pub fn transport_plans(p: &[[f64; 2]], q: &[[f64; 2]], epsilon: f64) -> DemoResult<Transport> {
    let cloud = |pts: &[[f64; 2]]| EmpiricalDistribution::uniform(pts.iter().map(|v| v.to_vec()).collect());
    let (p, q) = (cloud(p)?, cloud(q)?);
    let (exact, plan) = transport::wasserstein2_exact(&p, &q)?;
    let s = transport::wasserstein2_sinkhorn(&p, &q, epsilon, 20_000)?;
    Ok(Transport {
        exact,
        sinkhorn: s.value,
        converged: s.converged,
        exact_plan: sparse(&plan),
        sinkhorn_plan: sparse(&s.plan),
    })
}

#[derive(Debug, Deserialize)]
pub struct GraphInput {
    pub vertices: usize,
    pub edges: Vec<(usize, usize, f64)>,
}

/// Cheeger report for an undirected weighted edge list.
pub fn cheeger(input: &GraphInput) -> DemoResult<CheegerReport> {
    let vertices = (0..input.vertices)
        .map(|i| Vertex {
            id: format!("v{i}"),
            label: String::new(),
            features: Vec::new(),
        })
        .collect();
    let edges = input.edges.iter().map(|&(u, v, weight)| Edge { u, v, weight }).collect();
    let graph = KnowledgeGraph::new(vertices, edges, Vec::new())?;
    Ok(spectral::cheeger_check(&graph)?)
}

/// JSON adapters shared by the wasm exports.
pub mod json {
    use super::*;

    #[derive(Deserialize)]
    struct GeodesicInput {
        a: [f64; 2],
        b: [f64; 2],
        #[serde(default = "default_samples")]
        samples: usize,
    }

    fn default_samples() -> usize {
        64
    }

    #[derive(Deserialize)]
    struct TransportInput {
        p: Vec<[f64; 2]>,
        q: Vec<[f64; 2]>,
        epsilon: f64,
    }

    pub fn geodesic(input: &str) -> DemoResult<String> {
        let g: GeodesicInput = serde_json::from_str(input)?;
        Ok(serde_json::to_string(&super::geodesic(g.a, g.b, g.samples)?)?)
    }

    pub fn transport(input: &str) -> DemoResult<String> {
        let t: TransportInput = serde_json::from_str(input)?;
        Ok(serde_json::to_string(&transport_plans(&t.p, &t.q, t.epsilon)?)?)
    }

    pub fn cheeger(input: &str) -> DemoResult<String> {
        let g: GraphInput = serde_json::from_str(input)?;
        Ok(serde_json::to_string(&super::cheeger(&g)?)?)
    }
}

#[cfg(target_arch = "wasm32")]
mod bindings {
    use wasm_bindgen::prelude::*;

    fn js(r: super::DemoResult<String>) -> Result<String, JsError> {
        r.map_err(|e| JsError::new(&e.to_string()))
    }

    #[wasm_bindgen]
    pub fn geodesic(input: &str) -> Result<String, JsError> {
        js(super::json::geodesic(input))
    }

    #[wasm_bindgen]
    pub fn transport(input: &str) -> Result<String, JsError> {
        js(super::json::transport(input))
    }

    #[wasm_bindgen]
    pub fn cheeger(input: &str) -> Result<String, JsError> {
        js(super::json::cheeger(input))
    }
}
