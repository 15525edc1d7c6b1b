use hyperrag_web::{cheeger, geodesic, json, transport_plans, GraphInput};

#[test]
fn geodesic_through_origin_is_a_diameter() {
    let g = geodesic([-0.5, 0.0], [0.5, 0.0], 9).unwrap();
    // Disk radius r sits at hyperbolic distance 2 artanh(r) from the origin.
    assert!((g.distance - 4.0 * 0.5f64.atanh()).abs() < 1e-9);
    assert_eq!(g.path.len(), 9);
    assert!(g.path.iter().all(|p| p[1].abs() < 1e-9));
    assert!(g.path[4][0].abs() < 1e-9);
    assert!((g.path[0][0] + 0.5).abs() < 1e-9 && (g.path[8][0] - 0.5).abs() < 1e-9);
}

#[test]
fn geodesic_bows_toward_the_origin() {
    let g = geodesic([0.6, 0.3], [0.6, -0.3], 33).unwrap();
    let mid = g.path[16];
    assert!(mid[1].abs() < 1e-9);
    assert!(mid[0] < 0.6 - 1e-3, "{mid:?}");
}

#[test]
fn points_outside_the_disk_are_rejected() {
    assert!(geodesic([1.0, 0.0], [0.0, 0.0], 4).is_err());
    assert!(json::geodesic(r#"{"a": [0.1, 0.1]}"#).is_err());
}

#[test]
fn transport_matches_translation() {
    let p = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
    let q: Vec<[f64; 2]> = p.iter().map(|v| [v[0] + 3.0, v[1] + 4.0]).collect();
    let t = transport_plans(&p, &q, 0.01).unwrap();
    assert!((t.exact - 5.0).abs() < 1e-9);
    assert!(t.converged);
    assert!(t.sinkhorn >= t.exact - 1e-9);
    assert_eq!(t.exact_plan.len(), 3);
    assert!(t.exact_plan.iter().all(|&(i, j, m)| i == j && (m - 1.0 / 3.0).abs() < 1e-12));
}

#[test]
fn cheeger_on_a_path() {
    let r = cheeger(&GraphInput {
        vertices: 3,
        edges: vec![(0, 1, 1.0), (1, 2, 1.0)],
    })
    .unwrap();
    assert!((r.lambda2 - 1.0).abs() < 1e-9);
    assert!(r.satisfied);
    let out = json::cheeger(r#"{"vertices": 4, "edges": [[0,1,1],[1,2,1],[2,3,1],[3,0,1]]}"#).unwrap();
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["satisfied"], true);
}
