use super::*;
use crate::formats::GatingLabel;

fn tiny_spec(noise: f64) -> SynthSpec {
    SynthSpec {
        num_queries: 24,
        num_items: 48,
        num_clusters: 3,
        graph_size: 30,
        noise_frac: noise,
        seed: 5,
        feature_dim: 6,
        vocab: 8,
        answer_len: 3,
        answerable_frac: 0.4,
    }
}

fn tiny_config() -> PipelineConfig {
    PipelineConfig {
        dim: 8,
        k: 4,
        hidden: 16,
        epochs: 6,
        batch_size: 8,
        crm_epochs: 20,
        retrieve_k: 5,
        seed: 3,
        ..PipelineConfig::default()
    }
}

#[test]
fn total_loss_examples() {
    let third = 1.0 / 3.0;
    assert!((total_loss(3.0, 3.0, 3.0, third, third).unwrap() - 3.0).abs() < 1e-12);
    assert!((total_loss(1.0, 2.0, 4.0, 0.2, 0.3).unwrap() - 2.8).abs() < 1e-12);
    let v = total_loss(1.0, 5.0, 2.0, 0.25, 0.5).unwrap();
    assert!((1.0..=5.0).contains(&v));
    assert!(matches!(total_loss(1.0, 1.0, 1.0, 0.5, 0.5), Err(Error::Config(_))));
    assert!(matches!(total_loss(1.0, 1.0, 1.0, 0.0, 0.5), Err(Error::Config(_))));
}

#[test]
fn config_validation() {
    assert!(PipelineConfig::default().validate().is_ok());
    let bad = PipelineConfig {
        beta: 0.6,
        gamma: 0.4,
        ..PipelineConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let parsed: PipelineConfig = serde_json::from_str(r#"{"beta": 0.2, "epochs": 3}"#).unwrap();
    assert_eq!(parsed.epochs, 3);
    assert_eq!(parsed.dim, 128);
    assert!(serde_json::from_str::<PipelineConfig>(r#"{"betta": 0.2}"#).is_err());
}

#[test]
fn reports_satisfy_weighted_identity_and_loss_falls() {
    let (bundle, _) = synth_bundle(&tiny_spec(0.0)).unwrap();
    let cfg = tiny_config();
    let (_, reports) = run_training(&cfg, &bundle).unwrap();
    assert_eq!(reports.len(), cfg.epochs);
    for r in &reports {
        let expect = total_loss(r.l_crm, r.l_geo, r.l_gen, cfg.beta, cfg.gamma).unwrap();
        assert!((r.l_total - expect).abs() <= 1e-9, "{r:?}");
        assert!((0.0..=1.0).contains(&r.delta_rate));
        let gen = cfg.alpha * r.l_local + (1.0 - cfg.alpha) * r.l_global;
        assert!((r.l_gen - gen).abs() <= 1e-9);
    }
    assert!(reports.last().unwrap().l_total < reports[0].l_total);
}

#[test]
fn single_answer_corpus_never_retrieves() {
    let (mut bundle, _) = synth_bundle(&tiny_spec(0.0)).unwrap();
    for (_, a) in bundle.qa.iter_mut() {
        *a = vec![1, 2, 3];
    }
    for (_, g) in bundle.gating.iter_mut() {
        *g = GatingLabel::Answerable;
    }
    let (components, reports) = run_training(&tiny_config(), &bundle).unwrap();
    assert!(components.theta < 1.0);
    for r in &reports {
        assert_eq!(r.delta_rate, 0.0);
        assert_eq!(r.crm_updates, 0);
        assert_eq!(r.geo_updates, 0);
        assert_eq!(r.l_crm, 0.0);
        assert_eq!(r.l_geo, 0.0);
    }
    let kb = KnowledgeBase::from_bundle(&bundle, 4).unwrap();
    let out = answer_query(&components, &kb, &bundle.queries[0]).unwrap();
    assert!(!out.decision.delta);
    assert!(out.subgraph.is_none());
    assert!(out.retrieved.is_empty());
    assert!(out.timing.iter().all(|t| t.stage != "retrieve"));
}

#[test]
fn align_all_queries_overrides_the_gate() {
    let (mut bundle, _) = synth_bundle(&tiny_spec(0.0)).unwrap();
    for (_, a) in bundle.qa.iter_mut() {
        *a = vec![1, 2, 3];
    }
    for (_, g) in bundle.gating.iter_mut() {
        *g = GatingLabel::Answerable;
    }
    let cfg = PipelineConfig {
        align_all_queries: true,
        ..tiny_config()
    };
    let (_, reports) = run_training(&cfg, &bundle).unwrap();
    assert!(reports.iter().all(|r| r.geo_updates > 0 && r.crm_updates == 0));
}

#[test]
fn answers_are_deterministic_and_gating_consistent() {
    let (bundle, _) = synth_bundle(&tiny_spec(0.0)).unwrap();
    let cfg = tiny_config();
    let (components, _) = run_training(&cfg, &bundle).unwrap();
    let kb = KnowledgeBase::from_bundle(&bundle, cfg.k).unwrap();
    let mut saw = [false, false];
    for q in &bundle.queries {
        let a = answer_query(&components, &kb, q).unwrap();
        let b = answer_query(&components, &kb, q).unwrap();
        assert_eq!(a.answer, b.answer);
        assert_eq!(a.decision, b.decision);
        assert_eq!(a.subgraph, b.subgraph);
        assert_eq!(a.subgraph.is_some(), a.decision.delta);
        saw[a.decision.delta as usize] = true;
    }
    assert!(saw[0] && saw[1], "expected both gate outcomes");
}

#[test]
fn filtered_documents_are_planted_positives() {
    let spec = SynthSpec {
        feature_dim: 12,
        ..tiny_spec(0.25)
    };
    let (bundle, _) = synth_bundle(&spec).unwrap();
    let cfg = PipelineConfig {
        hidden: 64,
        crm_epochs: 100,
        ..tiny_config()
    };
    let (components, _) = run_training(&cfg, &bundle).unwrap();
    let kb = KnowledgeBase::from_bundle(&bundle, cfg.k).unwrap();
    let cases = eval_cases(&bundle).unwrap();
    for case in &cases {
        let out = answer_query(&components, &kb, &case.query).unwrap();
        for (id, r) in &out.decision.relevant {
            assert!(*r > 0.5);
            assert!(case.relevant.contains(id), "{} kept {id}", case.query.id);
        }
    }
}

#[test]
fn evaluation_metrics_in_range_and_reproducible() {
    let (bundle, _) = synth_bundle(&tiny_spec(0.0)).unwrap();
    let cfg = tiny_config();
    let cases = eval_cases(&bundle).unwrap();
    let kb = KnowledgeBase::from_bundle(&bundle, cfg.k).unwrap();
    let run = || {
        let (c, _) = run_training(&cfg, &bundle).unwrap();
        evaluate(&c, &kb, &cases).unwrap()
    };
    let (a, lat) = run();
    let (b, _) = run();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert!((0.0..=1.0).contains(&a.accuracy));
    assert!((-1.0..=1.0).contains(&a.coherence));
    assert!((0.0..=1.0).contains(&a.precision));
    assert!(lat.mean_seconds >= 0.0);
}

#[test]
fn echoing_generator_scores_full_accuracy() {
    let (bundle, _) = synth_bundle(&tiny_spec(0.0)).unwrap();
    let cfg = tiny_config();
    let (mut c, _) = run_training(&cfg, &bundle).unwrap();
    // Bias every position toward the gold answer via the constant input.
    let gen = &mut c.generator;
    gen.params.iter_mut().for_each(|p| *p = 0.0);
    let gold = [1usize, 2, 3];
    let d = gen.cond_dim();
    for (t, &tok) in gold.iter().enumerate() {
        gen.params[t * gen.vocab * d + tok * d + d - 1] = 50.0;
    }
    let kb = KnowledgeBase::from_bundle(&bundle, cfg.k).unwrap();
    let mut cases = eval_cases(&bundle).unwrap();
    for case in &mut cases {
        case.answer = TokenSequence::new(gold.to_vec(), c.generator.vocab).unwrap();
    }
    let (report, _) = evaluate(&c, &kb, &cases).unwrap();
    assert_eq!(report.accuracy, 1.0);
    assert!((report.coherence - 1.0).abs() < 1e-12);
}

#[test]
fn everything_relevant_gives_full_precision() {
    let (bundle, _) = synth_bundle(&tiny_spec(0.0)).unwrap();
    let cfg = PipelineConfig {
        crm_enabled: false,
        ..tiny_config()
    };
    let (c, _) = run_training(&cfg, &bundle).unwrap();
    let kb = KnowledgeBase::from_bundle(&bundle, cfg.k).unwrap();
    let all: BTreeSet<String> = bundle.items.iter().map(|i| i.id.clone()).collect();
    let mut cases = eval_cases(&bundle).unwrap();
    for case in &mut cases {
        case.relevant = all.clone();
    }
    let (report, _) = evaluate(&c, &kb, &cases).unwrap();
    assert_eq!(report.precision, 1.0);
    assert_eq!(report.retrieval_rate, 1.0);
}

#[test]
fn empty_eval_set_rejected() {
    let (bundle, _) = synth_bundle(&tiny_spec(0.0)).unwrap();
    let (c, _) = run_training(&tiny_config(), &bundle).unwrap();
    let kb = KnowledgeBase::from_bundle(&bundle, 4).unwrap();
    assert!(matches!(evaluate(&c, &kb, &[]), Err(Error::Contract(_))));
}

#[test]
fn unknown_ids_are_contract_errors() {
    let (mut bundle, _) = synth_bundle(&tiny_spec(0.0)).unwrap();
    bundle.positives.push(("q0000".into(), "nope".into()));
    assert!(matches!(run_training(&tiny_config(), &bundle), Err(Error::Contract(_))));
}

