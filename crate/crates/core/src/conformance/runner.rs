// The case battery behind `conformance run`.

use rand::Rng;

use super::*;
use crate::alignment::{self, AlignmentPair, EmbeddingTable, EncoderDims, Encoder};
use crate::crm::{self, CrmExample, RelevanceHead};
use crate::generation::{self, ToyGenerator, TokenDistributionSequence, TokenSequence, TransportMode};
use crate::lorentz::{self, project_to_hyperboloid, LorentzPoint};
use crate::spectral::{self, EigenMethod, LaplacianOperator, RefineOptions, RelevanceVector};
use crate::transport;

pub const MODULES: [&str; 7] = [
    "lorentz_geometry",
    "embedding_alignment",
    "spectral_refine",
    "crm_gate",
    "generation_loss",
    "pipeline",
    "conformance_suite",
];

type Cases = Vec<OracleResult>;

/// Runs every case whose module name contains `filter` (all when `None`).
pub fn run(filter: Option<&str>) -> Result<Vec<OracleResult>> {
    let selected: Vec<&str> = MODULES
        .iter()
        .copied()
        .filter(|m| filter.is_none_or(|f| m.contains(f)))
        .collect();
    if selected.is_empty() {
        return Err(Error::config(format!(
            "no module matches {:?}; known modules: {}",
            filter.unwrap_or(""),
            MODULES.join(", ")
        )));
    }
    let mut out = Vec::new();
    for m in selected {
        let cases = match m {
            "lorentz_geometry" => lorentz_cases()?,
            "embedding_alignment" => alignment_cases()?,
            "spectral_refine" => spectral_cases()?,
            "crm_gate" => crm_cases()?,
            "generation_loss" => generation_cases()?,
            "pipeline" => pipeline_cases()?,
            _ => oracle_self_cases()?,
        };
        out.extend(cases);
    }
    Ok(out)
}

pub(crate) fn random_point<R: Rng>(rng: &mut R, n: usize, radius: f64) -> LorentzPoint {
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-radius..radius)).collect();
    project_to_hyperboloid(&v).expect("finite input")
}

fn lorentz_cases() -> Result<Cases> {
    const M: &str = "lorentz_geometry";
    let mut cases = Vec::new();
    let mut rng = seeded_rng(11);
    let x = project_to_hyperboloid(&[1.0, 0.0])?;
    cases.push(OracleResult::numeric(M, "project (1,0) time coordinate", 2f64.sqrt(), x.time(), 1e-15));

    let (mut tri, mut inv, mut sym) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let a = random_point(&mut rng, 4, 2.0);
        let b = random_point(&mut rng, 4, 2.0);
        let c = random_point(&mut rng, 4, 2.0);
        let (ab, bc, ac) = (
            lorentz::geodesic_distance(&a, &b),
            lorentz::geodesic_distance(&b, &c),
            lorentz::geodesic_distance(&a, &c),
        );
        tri = tri.max(ac - ab - bc);
        sym = sym.max((ab - lorentz::geodesic_distance(&b, &a)).abs());
        let back = lorentz::exp_map(&a, &lorentz::log_map(&a, &b)?)?;
        inv = inv.max(
            back.coords()
                .iter()
                .zip(b.coords())
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max),
        );
    }
    cases.push(OracleResult::at_most(M, "triangle inequality excess, 200 triples", 0.0, tri, 1e-9));
    cases.push(OracleResult::numeric(M, "symmetry, 200 pairs", 0.0, sym, 0.0));
    cases.push(OracleResult::at_most(M, "exp(log) round trip, 200 pairs", 0.0, inv, 1e-8));

    let mut worst = 0.0f64;
    for _ in 0..50 {
        let a = random_point(&mut rng, 3, 1.0);
        let b = random_point(&mut rng, 3, 1.0);
        let d = lorentz::geodesic_distance(&a, &b);
        if !(0.01..=5.0).contains(&d) {
            continue;
        }
        let analytic = lorentz::distance_grad_space(&a, &b);
        let fd = finite_difference_grad(
            |s| lorentz::geodesic_distance(&project_to_hyperboloid(s).expect("finite"), &b),
            a.space(),
            1e-6,
        );
        worst = worst.max(relative_error(&analytic, &fd.values, 1e-3));
    }
    cases.push(OracleResult::at_most(M, "distance gradient vs central differences", 0.0, worst, 1e-4));

    let mut x = random_point(&mut rng, 5, 1.0);
    let mut drift = 0.0f64;
    for _ in 0..1000 {
        let g: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        x = lorentz::rsgd_step(&x, &g, 0.05)?;
        drift = drift.max(x.constraint_violation());
    }
    cases.push(OracleResult::at_most(M, "RSGD drift over 1000 steps", 0.0, drift, 1e-9));
    Ok(cases)
}

fn alignment_cases() -> Result<Cases> {
    const M: &str = "embedding_alignment";
    let mut cases = Vec::new();
    let dims = EncoderDims {
        visual: 1,
        textual: 1,
        graph: 1,
        query: 2,
    };
    // Query at the origin, one positive per modality at spatial (1, 0).
    let mut table = EmbeddingTable::zeros(dims, 2);
    for map in table.maps.values_mut() {
        map.weights[0] = 1.0;
    }
    let items: Vec<KnowledgeItem> = [Modality::Visual, Modality::Textual, Modality::GraphTriplet]
        .iter()
        .enumerate()
        .map(|(i, &m)| KnowledgeItem {
            id: format!("i{i}"),
            modality: m,
            features: vec![1.0],
        })
        .collect();
    let q = Query {
        id: "q".into(),
        visual_features: vec![0.0],
        text_features: vec![0.0],
    };
    let refs: Vec<&KnowledgeItem> = items.iter().collect();
    let loss = alignment::geo_loss(&table, &[AlignmentPair { query: &q, positives: &refs }])?;
    cases.push(OracleResult::numeric(
        M,
        "geo_loss hand value, three modalities at arccosh(sqrt 2)",
        3.0 * 2f64.sqrt().acosh(),
        loss,
        1e-12,
    ));

    let (corpus, _, _) = three_cluster_corpus(2, 17, 5, 3);
    let table = EmbeddingTable::random(corpus.encoder_dims()?, 6, 1);
    let mut agree = true;
    for query in &corpus.queries {
        let got: Vec<String> = alignment::retrieve_topk(&table, query, &corpus.items[..50], 50)?
            .into_iter()
            .map(|(i, _)| i.id.clone())
            .collect();
        let qp = table.embed_query(query)?;
        let mut scan: Vec<(f64, String)> = corpus.items[..50]
            .iter()
            .map(|i| {
                let p = table.embed_item(i).expect("dims match");
                (lorentz::geodesic_distance(&qp, &p), i.id.clone())
            })
            .collect();
        scan.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        agree &= scan.into_iter().map(|(_, id)| id).collect::<Vec<_>>() == got;
    }
    cases.push(OracleResult::discrete(M, "top-k equals exhaustive scan on 50 items", agree));

    let map = table.map(Encoder::Item(Modality::Visual))?;
    let l = map.operator_norm();
    let mut rng = seeded_rng(5);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..100 {
        let x: Vec<f64> = (0..map.in_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let dx: Vec<f64> = (0..map.in_dim).map(|_| rng.random_range(-0.1..0.1)).collect();
        let y: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + b).collect();
        let d = lorentz::geodesic_distance(
            &table.embed(&x, Encoder::Item(Modality::Visual))?,
            &table.embed(&y, Encoder::Item(Modality::Visual))?,
        );
        let norm = dx.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(d - l * norm);
    }
    cases.push(OracleResult::at_most(M, "Lipschitz bound from operator norm", 0.0, worst, 1e-12));
    Ok(cases)
}

fn spectral_cases() -> Result<Cases> {
    const M: &str = "spectral_refine";
    let mut cases = Vec::new();
    let path = KnowledgeGraph::new(
        plain_vertices(3),
        vec![Edge { u: 0, v: 1, weight: 1.0 }, Edge { u: 1, v: 2, weight: 1.0 }],
        vec![],
    )?;
    for (name, g) in [("P3", path), ("K4", two_cliques(4, 0, 0.0))] {
        let oracle = dense_eigs(&dense_laplacian(&g))?;
        let got = spectral::smallest_eigenpairs(&LaplacianOperator::new(&g), g.len())?;
        for (i, (o, p)) in oracle.iter().zip(&got).enumerate() {
            cases.push(OracleResult::numeric(M, format!("{name} eigenvalue {i}"), *o, p.value, 1e-7));
        }
    }
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let g = random_graph(30, 0.15, true, 100 + seed);
        let oracle = dense_eigs(&dense_laplacian(&g))?;
        let got = spectral::smallest_eigenpairs_with(&LaplacianOperator::new(&g), 5, EigenMethod::Lanczos)?;
        for (o, p) in oracle.iter().zip(&got) {
            worst = worst.max((o - p.value).abs());
        }
    }
    cases.push(OracleResult::at_most(M, "Lanczos vs Jacobi, 10 random graphs", 0.0, worst, 1e-7));

    let mut cheeger_ok = true;
    for seed in 0..20 {
        let g = random_graph(20, 0.2, true, 200 + seed);
        cheeger_ok &= spectral::cheeger_check(&g)?.satisfied;
    }
    cases.push(OracleResult::discrete(M, "Cheeger bound on 20 random connected graphs", cheeger_ok));

    let g = two_cliques(5, 6, 0.0);
    let mut r = vec![0.0; 11];
    r[..5].iter_mut().for_each(|x| *x = 1.0);
    let eta = 5.0;
    let oracle = subset_bruteforce(&g, &r, eta, 1.0)?;
    let got = spectral::refine_subgraph(&g, &RelevanceVector::new(r.clone())?, eta, RefineOptions::default())?;
    cases.push(OracleResult::discrete(M, "two-clique instance recovers clique A", got.vertices == oracle.vertices && got.vertices == (0..5).collect::<Vec<_>>()));

    let mut worst_ratio = 0.0f64;
    let mut rng = seeded_rng(17);
    for seed in 0..30 {
        let n = rng.random_range(4..=SUBSET_LIMIT);
        let g = random_graph(n, 0.35, true, 300 + seed);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let eta = 0.5 * r.iter().sum::<f64>();
        let best = subset_bruteforce(&g, &r, eta, 1.0)?;
        let got = spectral::refine_subgraph(&g, &RelevanceVector::new(r)?, eta, RefineOptions::default())?;
        worst_ratio = worst_ratio.max(got.objective / best.objective.max(1e-12));
    }
    cases.push(OracleResult::at_most(M, "sweep objective / brute-force optimum, 30 instances", 2.0, worst_ratio, 1e-9));
    Ok(cases)
}

fn crm_cases() -> Result<Cases> {
    const M: &str = "crm_gate";
    let mut cases = vec![
        OracleResult::discrete(M, "sigma = theta retrieves", crm::decide(0.5, 0.5)),
        OracleResult::discrete(M, "sigma 0.9 > theta 0.5 skips", !crm::decide(0.9, 0.5)),
    ];
    let q = Query {
        id: "q".into(),
        visual_features: vec![0.0],
        text_features: vec![0.0],
    };
    let doc = KnowledgeItem {
        id: "d".into(),
        modality: Modality::Textual,
        features: vec![1.0],
    };
    let mut head = RelevanceHead::zeros(2, 1, 1);
    let last = head.params.len() - 1;
    head.params[last] = 4.0;
    cases.push(OracleResult::numeric(
        M,
        "relevance of raw score 4",
        1.0 / (1.0 + (-4.0f64).exp()),
        crm::relevance(&head, &q, &doc)?,
        1e-15,
    ));
    let zero = RelevanceHead::zeros(2, 1, 1);
    let ex = CrmExample {
        query: &q,
        positives: vec![&doc],
        negatives: vec![],
    };
    cases.push(OracleResult::numeric(M, "single positive at r = 0.5", 2f64.ln(), crm::crm_loss(&zero, &[ex])?, 1e-12));

    let sep = crm_separable_corpus(2);
    let examples: Vec<CrmExample<'_>> = sep
        .queries
        .iter()
        .zip(&sep.labels)
        .map(|(q, (p, n))| CrmExample {
            query: q,
            positives: p.iter().map(|&i| &sep.items[i]).collect(),
            negatives: n.iter().map(|&i| &sep.items[i]).collect(),
        })
        .collect();
    let head = RelevanceHead::random(8, 4, 6, 3);
    let (analytic_loss, analytic) = crm::crm_loss_grad(&head, &examples)?;
    let fd = finite_difference_grad(
        |p| {
            let mut h = head.clone();
            h.params.copy_from_slice(p);
            crm::crm_loss(&h, &examples).unwrap_or(f64::NAN)
        },
        &head.params,
        1e-6,
    );
    cases.push(OracleResult::at_most(
        M,
        "L_CRM gradient vs central differences",
        0.0,
        relative_error(&analytic, &fd.values, 1e-3),
        1e-4,
    ));

    let gating = calibrated_gating(1000, 0.7, 9);
    let config = crm::CrmConfig {
        hidden: 16,
        lr: 1e-2,
        epochs: 400,
        batch_size: 8,
        ..crm::CrmConfig::default()
    };
    let (trained, theta, trace) = crm::train_crm(head, &examples, &gating, &config)?;
    cases.push(OracleResult::at_most(M, "separable corpus loss ratio", 0.05, trace.last().copied().unwrap_or(analytic_loss) / trace[0], 0.0));
    let mut correct = 0;
    let mut total = 0;
    for ex in &examples {
        for d in &ex.positives {
            correct += usize::from(crm::relevance(&trained, ex.query, d)? > 0.5);
            total += 1;
        }
        for d in &ex.negatives {
            correct += usize::from(crm::relevance(&trained, ex.query, d)? <= 0.5);
            total += 1;
        }
    }
    cases.push(OracleResult::numeric(M, "separable corpus classification accuracy", 1.0, correct as f64 / total as f64, 0.0));
    let (grid, _) = best_threshold_bruteforce(&gating);
    cases.push(OracleResult::discrete(M, "fitted theta is a brute-force optimum", grid.contains(&theta)));
    cases.push(OracleResult::numeric(M, "fitted theta near 0.70", 0.70, theta, 0.01 + 1e-12));
    Ok(cases)
}

fn generation_cases() -> Result<Cases> {
    const M: &str = "generation_loss";
    let mut cases = Vec::new();
    let uniform = TokenDistributionSequence::new(vec![vec![0.25; 4]; 3])?;
    let target = TokenSequence::new(vec![0, 3, 1], 4)?;
    cases.push(OracleResult::numeric(M, "uniform vocab-4 length-3 local loss", 3.0 * 4f64.ln(), generation::local_loss(&uniform, &target)?, 1e-9));
    cases.push(OracleResult::numeric(M, "dropout p(0)", 0.5, generation::query_dropout_prob(0, 50.0)?, 1e-12));
    cases.push(OracleResult::numeric(M, "dropout p(T)", 0.5 / std::f64::consts::E, generation::query_dropout_prob(50, 50.0)?, 1e-12));

    let line = |xs: &[f64]| EmpiricalDistribution::uniform(xs.iter().map(|x| vec![*x]).collect());
    let (p, q) = (line(&[0.0, 1.0])?, line(&[0.0, 2.0])?);
    cases.push(OracleResult::numeric(M, "1-D benchmark, enumeration", 0.5f64.sqrt(), ot_bruteforce(&p, &q)?, 1e-12));
    cases.push(OracleResult::numeric(M, "1-D benchmark, exact solver", 0.5f64.sqrt(), transport::wasserstein2_exact(&p, &q)?.0, 1e-9));
    let s = transport::wasserstein2_sinkhorn(&p, &q, 0.01, 10_000)?;
    cases.push(OracleResult::numeric(M, "1-D benchmark, Sinkhorn eps 0.01", 0.5f64.sqrt(), s.value, 1e-3));

    let mut rng = seeded_rng(21);
    let mut worst = 0.0f64;
    let mut worst_marginal = 0.0f64;
    for _ in 0..40 {
        let (p, q) = random_ot_instance(&mut rng)?;
        let oracle = ot_bruteforce(&p, &q)?;
        let (w, plan) = transport::wasserstein2_exact(&p, &q)?;
        worst = worst.max((oracle - w).abs());
        worst_marginal = worst_marginal.max(plan.marginal_violation(p.weights(), q.weights()));
    }
    cases.push(OracleResult::at_most(M, "exact solver vs enumeration, 40 instances", 0.0, worst, 1e-9));
    cases.push(OracleResult::at_most(M, "exact plan marginal violation", 0.0, worst_marginal, 1e-6));

    let gen = ToyGenerator::new(5, 3, 4, 2, 3, 8)?;
    let mut gen = gen;
    gen.params.iter_mut().for_each(|w| *w = rng.random_range(-0.5..0.5));
    let query = Query {
        id: "q".into(),
        visual_features: vec![0.3, -0.2],
        text_features: vec![0.5, 0.1],
    };
    let cond = gen.condition(&query, &[0.2, -0.4])?;
    let answer = TokenSequence::new(vec![1, 4, 2], 5)?;
    let mode = TransportMode::Entropic { epsilon: 0.05 };
    let mut analytic = vec![0.0; gen.params.len()];
    generation::example_loss(&gen, &cond, &answer, 0.5, mode, Some((&mut analytic, 1.0)))?;
    let fd = finite_difference_grad(
        |p| {
            let mut g = gen.clone();
            g.params.copy_from_slice(p);
            generation::example_loss(&g, &cond, &answer, 0.5, mode, None).map_or(f64::NAN, |x| x.total)
        },
        &gen.params,
        1e-5,
    );
    cases.push(OracleResult::at_most(M, "entropic generator gradient vs central differences", 0.0, relative_error(&analytic, &fd.values, 1e-3), 1e-3));
    Ok(cases)
}

/// Random instance in 1-3 dimensions with supports of 1-4 points and random
/// weights, small enough for vertex enumeration.
pub(crate) fn random_ot_instance<R: Rng>(rng: &mut R) -> Result<(EmpiricalDistribution, EmpiricalDistribution)> {
    let dim = rng.random_range(1..=3);
    let side = |rng: &mut R, len: usize| {
        let support: Vec<Vec<f64>> = (0..len)
            .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let raw: Vec<f64> = (0..len).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = raw.iter().sum();
        EmpiricalDistribution::new(support, raw.into_iter().map(|w| w / s).collect())
    };
    let m = rng.random_range(1..=4);
    let n = rng.random_range(1..=(OT_CELL_LIMIT / m).min(4));
    Ok((side(rng, m)?, side(rng, n)?))
}

fn pipeline_cases() -> Result<Cases> {
    const M: &str = "pipeline";
    let mut cases = vec![OracleResult::numeric(
        M,
        "total_loss (1, 2, 4) with beta 0.2 gamma 0.3",
        2.8,
        crate::pipeline::total_loss(1.0, 2.0, 4.0, 0.2, 0.3)?,
        1e-12,
    )];
    let spec = crate::pipeline::SynthSpec {
        num_queries: 12,
        num_items: 24,
        num_clusters: 3,
        graph_size: 15,
        feature_dim: 6,
        vocab: 6,
        answer_len: 2,
        ..Default::default()
    };
    let (bundle, _) = crate::pipeline::synth_bundle(&spec)?;
    let config = crate::pipeline::PipelineConfig {
        dim: 4,
        k: 3,
        hidden: 8,
        epochs: 3,
        batch_size: 4,
        crm_epochs: 5,
        retrieve_k: 4,
        ..Default::default()
    };
    let (_, reports) = crate::pipeline::run_training(&config, &bundle)?;
    let worst = reports
        .iter()
        .map(|r| {
            let expect = config.beta * r.l_crm + config.gamma * r.l_geo + (1.0 - config.beta - config.gamma) * r.l_gen;
            (r.l_total - expect).abs()
        })
        .fold(0.0, f64::max);
    cases.push(OracleResult::at_most(M, "weighted-loss identity on every report", 0.0, worst, 1e-9));
    Ok(cases)
}

/// The oracles checked against closed forms, so a broken oracle cannot
/// silently approve a broken implementation.
fn oracle_self_cases() -> Result<Cases> {
    const M: &str = "conformance_suite";
    let g = finite_difference_grad(|p| p[0] * p[0] + 3.0 * p[1], &[2.0, 1.0], 1e-5);
    let mut cases = vec![
        OracleResult::numeric(M, "central differences on a quadratic, d/dx", 4.0, g.values[0], 1e-9),
        OracleResult::numeric(M, "central differences on a quadratic, d/dy", 3.0, g.values[1], 1e-9),
    ];
    let p = EmpiricalDistribution::uniform(vec![vec![1.0], vec![-1.0]])?;
    cases.push(OracleResult::numeric(M, "enumeration W2(P, P)", 0.0, ot_bruteforce(&p, &p)?, 1e-12));
    let k4 = dense_eigs(&dense_laplacian(&two_cliques(4, 0, 0.0)))?;
    cases.push(OracleResult::numeric(M, "Jacobi K4 largest eigenvalue", 4.0, k4[3], 1e-12));
    let r = vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
    let best = subset_bruteforce(&two_cliques(4, 4, 0.1), &r, 4.0, 1.0)?;
    cases.push(OracleResult::discrete(M, "exhaustive subset search on two cliques", best.vertices == vec![0, 1, 2, 3]));
    Ok(cases)
}
