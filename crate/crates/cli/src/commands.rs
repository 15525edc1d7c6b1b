use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use hyperrag_core::alignment::{self, AlignConfig, AlignmentCorpus, EmbeddingTable, KnowledgeItem, Query};
use hyperrag_core::conformance;
use hyperrag_core::crm;
use hyperrag_core::formats::{self, GatingLabel};
use hyperrag_core::generation::{self, GenConfig, GenExample, ToyGenerator, TokenSequence, TransportMode};
use hyperrag_core::lorentz;
use hyperrag_core::pipeline::{self, Bundle, Components, Gate, KnowledgeBase, PipelineConfig, SynthSpec};
use hyperrag_core::spectral::{self, KnowledgeGraph, RefineOptions};
use hyperrag_core::transport::{self, EmpiricalDistribution};
use hyperrag_core::{seeded_rng, Error};

use crate::args::*;
use crate::{CliError, CliResult};

const ALIGN_FILE: &str = "align.json";
const ITEM_EMBEDDINGS_FILE: &str = "item_embeddings.txt";
const GATE_FILE: &str = "gate.json";
const GENERATOR_FILE: &str = "generator.json";
const COMPONENTS_FILE: &str = "components.json";

struct Ctx {
    config: PipelineConfig,
    seed: Option<u64>,
    out: PathBuf,
    bundle_dir: PathBuf,
}

impl Ctx {
    fn bundle(&self) -> CliResult<Bundle> {
        if !self.bundle_dir.exists() {
            return Err(CliError::MissingArtifact {
                path: self.bundle_dir.display().to_string(),
                hint: "hyperrag synth",
            });
        }
        Ok(Bundle::read_dir(&self.bundle_dir)?)
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn load<T: serde::de::DeserializeOwned>(&self, name: &str, hint: &'static str) -> CliResult<T> {
        let path = self.artifact(name);
        let text = fs::read_to_string(&path).map_err(|_| CliError::MissingArtifact {
            path: path.display().to_string(),
            hint,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    fn save<T: Serialize>(&self, name: &str, value: &T) -> CliResult<()> {
        fs::create_dir_all(&self.out)?;
        fs::write(self.artifact(name), serde_json::to_vec(value)?)?;
        Ok(())
    }
}

/// Line-delimited records on stdout, mirrored to `<out>/<name>` when a
/// trace file is requested.
struct Records {
    stdout: std::io::StdoutLock<'static>,
    trace: Option<BufWriter<fs::File>>,
}

impl Records {
    fn stdout() -> Self {
        Self {
            stdout: std::io::stdout().lock(),
            trace: None,
        }
    }

    fn traced(ctx: &Ctx, name: &str) -> CliResult<Self> {
        fs::create_dir_all(&ctx.out)?;
        let file = fs::File::create(ctx.artifact(name))?;
        Ok(Self {
            trace: Some(BufWriter::new(file)),
            ..Self::stdout()
        })
    }

    fn emit<T: Serialize>(&mut self, record: &T) -> CliResult<()> {
        let line = serde_json::to_string(record)?;
        writeln!(self.stdout, "{line}")?;
        if let Some(t) = self.trace.as_mut() {
            writeln!(t, "{line}")?;
        }
        Ok(())
    }
}

fn load_config(path: &Path) -> CliResult<PipelineConfig> {
    let text = fs::read_to_string(path)?;
    let bad = |detail: String| CliError::ConfigFile {
        path: path.display().to_string(),
        detail,
    };
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| bad(e.to_string()))
    } else {
        toml::from_str(&text).map_err(|e| bad(e.to_string()))
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let mut config = match &cli.config {
        Some(p) => load_config(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    let bundle_dir = cli.bundle.clone().unwrap_or_else(|| cli.out.join("bundle"));
    let ctx = Ctx {
        config,
        seed: cli.seed,
        out: cli.out,
        bundle_dir,
    };
    match cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Align(AlignCommand::Train(a)) => align_train(&ctx, a),
        Command::Align(AlignCommand::Retrieve { query_id, k }) => align_retrieve(&ctx, &query_id, k),
        Command::Crm(CrmCommand::Train { labels, gating, hidden }) => crm_train(&ctx, labels, gating, hidden),
        Command::Crm(CrmCommand::Gate { query_id }) => crm_gate(&ctx, &query_id),
        Command::Refine(a) => refine(&ctx, a),
        Command::Cheeger { graph } => cheeger(&ctx, graph),
        Command::Gen(GenCommand::Train { alpha, dropout_t, epochs }) => gen_train(&ctx, alpha, dropout_t, epochs),
        Command::Gen(GenCommand::Eval { exact_ot_max, epsilon }) => gen_eval(&ctx, exact_ot_max, epsilon),
        Command::TrainAll => train_all(&ctx),
        Command::Answer { query_id } => answer(&ctx, &query_id),
        Command::Eval => eval(&ctx),
        Command::Bench { repeats } => bench(&ctx, repeats),
        Command::Conformance(ConformanceCommand::Run { filter }) => conformance_run(filter.as_deref()),
    }
}

fn synth(ctx: &Ctx, a: SynthArgs) -> CliResult<()> {
    let d = SynthSpec::default();
    let spec = SynthSpec {
        num_queries: a.queries.unwrap_or(d.num_queries),
        num_items: a.items.unwrap_or(d.num_items),
        num_clusters: a.clusters.unwrap_or(d.num_clusters),
        graph_size: a.graph_size.unwrap_or(d.graph_size),
        noise_frac: a.noise.unwrap_or(d.noise_frac),
        answerable_frac: a.answerable.unwrap_or(d.answerable_frac),
        feature_dim: a.feature_dim.unwrap_or(d.feature_dim),
        seed: ctx.seed.unwrap_or(d.seed),
        ..d
    };
    let (bundle, truth) = pipeline::synth_bundle(&spec)?;
    bundle.write_dir(&ctx.bundle_dir)?;
    fs::write(ctx.bundle_dir.join("ground_truth.json"), serde_json::to_vec(&truth)?)?;
    fs::write(ctx.bundle_dir.join("synth.json"), serde_json::to_vec_pretty(&spec)?)?;
    Records::stdout().emit(&json!({
        "bundle": ctx.bundle_dir,
        "queries": bundle.queries.len(),
        "items": bundle.items.len(),
        "vertices": bundle.graph.len(),
        "edges": bundle.graph.edges().len(),
        "triplets": bundle.graph.triplets().len(),
    }))
}

fn find_query<'b>(queries: &'b [Query], id: &str) -> CliResult<&'b Query> {
    queries
        .iter()
        .find(|q| q.id == id)
        .ok_or_else(|| Error::contract(format!("unknown query id {id}")).into())
}

fn align_train(ctx: &Ctx, a: AlignTrainArgs) -> CliResult<()> {
    let dir = &ctx.bundle_dir;
    let items = formats::read_file(&a.corpus.unwrap_or_else(|| dir.join(pipeline::synth::CORPUS_FILE)), formats::read_corpus)?;
    let queries = formats::read_file(&a.queries.unwrap_or_else(|| dir.join(pipeline::synth::QUERIES_FILE)), formats::read_queries)?;
    let pairs = formats::read_file(
        &a.positives.unwrap_or_else(|| dir.join(pipeline::synth::POSITIVES_FILE)),
        formats::read_positives,
    )?;
    let index = |ids: Vec<&str>, id: &str, what: &str| {
        ids.iter()
            .position(|x| *x == id)
            .ok_or_else(|| Error::contract(format!("positives name unknown {what} {id}")))
    };
    let qids: Vec<&str> = queries.iter().map(|q| q.id.as_str()).collect();
    let iids: Vec<&str> = items.iter().map(|i| i.id.as_str()).collect();
    let positives = pairs
        .iter()
        .map(|(q, i)| Ok((index(qids.clone(), q, "query")?, index(iids.clone(), i, "item")?)))
        .collect::<Result<Vec<_>, Error>>()?;
    let corpus = AlignmentCorpus { queries, items, positives };
    let config = AlignConfig {
        dim: a.dim.unwrap_or(ctx.config.dim),
        lr: a.lr.unwrap_or(ctx.config.align_lr),
        epochs: a.epochs.unwrap_or(ctx.config.epochs),
        batch_size: ctx.config.batch_size,
        seed: ctx.config.seed,
        line_search: a.line_search,
    };
    let (table, trace) = alignment::train_alignment(&corpus, &config)?;
    let mut out = Records::traced(ctx, "align_trace.jsonl")?;
    for (epoch, loss) in trace.iter().enumerate() {
        out.emit(&json!({ "epoch": epoch, "l_geo": loss }))?;
    }
    ctx.save(ALIGN_FILE, &table)?;
    let points = corpus
        .items
        .iter()
        .map(|i| table.embed_item(i))
        .collect::<Result<Vec<_>, Error>>()?;
    formats::write_file(&ctx.artifact(ITEM_EMBEDDINGS_FILE), |w| lorentz::write_embeddings(w, &points))?;
    Ok(())
}

fn align_retrieve(ctx: &Ctx, query_id: &str, k: usize) -> CliResult<()> {
    let table: EmbeddingTable = ctx.load(ALIGN_FILE, "hyperrag align train")?;
    let bundle = ctx.bundle()?;
    let q = find_query(&bundle.queries, query_id)?;
    let mut out = Records::stdout();
    for (rank, (item, d)) in alignment::retrieve_topk(&table, q, &bundle.items, k)?.into_iter().enumerate() {
        out.emit(&json!({ "query_id": query_id, "rank": rank + 1, "item_id": item.id, "distance": d }))?;
    }
    Ok(())
}

fn crm_train(ctx: &Ctx, labels: Option<PathBuf>, gating: Option<PathBuf>, hidden: Option<usize>) -> CliResult<()> {
    let mut bundle = ctx.bundle()?;
    if let Some(p) = labels {
        bundle.labels = formats::read_file(&p, formats::read_labels)?;
    }
    if let Some(p) = gating {
        bundle.gating = formats::read_file(&p, formats::read_gating)?;
    }
    let config = PipelineConfig {
        hidden: hidden.unwrap_or(ctx.config.hidden),
        ..ctx.config.clone()
    };
    let gate = pipeline::train_gate(&config, &bundle)?;
    let samples = bundle
        .gating
        .iter()
        .map(|(id, label)| {
            let q = find_query(&bundle.queries, id)?;
            Ok((gate.answer_bank.confidence(q)?, label.needs_retrieval()))
        })
        .collect::<CliResult<Vec<_>>>()?;
    ctx.save(GATE_FILE, &gate)?;
    Records::stdout().emit(&json!({
        "theta": gate.theta,
        "gating_accuracy": crm::gating_accuracy(&samples, gate.theta),
        "gating_samples": samples.len(),
        "answerable": bundle.gating.iter().filter(|(_, g)| *g == GatingLabel::Answerable).count(),
    }))
}

fn crm_gate(ctx: &Ctx, query_id: &str) -> CliResult<()> {
    let gate: Gate = ctx.load(GATE_FILE, "hyperrag crm train")?;
    let bundle = ctx.bundle()?;
    let q = find_query(&bundle.queries, query_id)?;
    let sigma = gate.answer_bank.confidence(q)?;
    let delta = crm::decide(sigma, gate.theta);
    let mut relevant = Vec::new();
    if delta {
        // Candidates are the aligned top-k when an alignment exists,
        // otherwise the whole corpus.
        let candidates: Vec<&KnowledgeItem> = match ctx.load::<EmbeddingTable>(ALIGN_FILE, "") {
            Ok(table) => alignment::retrieve_topk(&table, q, &bundle.items, ctx.config.retrieve_k.min(bundle.items.len()))?
                .into_iter()
                .map(|(i, _)| i)
                .collect(),
            Err(_) => bundle.items.iter().collect(),
        };
        relevant = crm::filter_relevant(&gate.doc_head, q, &candidates)?
            .into_iter()
            .map(|(d, r)| json!({ "id": d.id, "relevance": r }))
            .collect();
    }
    Records::stdout().emit(&json!({
        "query_id": query_id,
        "sigma": sigma,
        "theta": gate.theta,
        "delta": delta,
        "relevant": relevant,
    }))
}

fn graph_at(ctx: &Ctx, graph: Option<PathBuf>) -> CliResult<KnowledgeGraph> {
    let dir = graph.unwrap_or_else(|| ctx.bundle_dir.join(pipeline::synth::GRAPH_DIR));
    Ok(formats::read_graph_dir(&dir)?)
}

fn refine(ctx: &Ctx, a: RefineArgs) -> CliResult<()> {
    let gate: Gate = ctx.load(GATE_FILE, "hyperrag crm train")?;
    let graph = graph_at(ctx, a.graph)?;
    let queries = formats::read_file(&ctx.bundle_dir.join(pipeline::synth::QUERIES_FILE), formats::read_queries)?;
    let q = find_query(&queries, &a.query_id)?;
    let r = spectral::relevance_vector(q, &graph, &gate.vertex_head)?;
    let eta = a.eta_frac.unwrap_or(ctx.config.eta_frac) * r.total();
    let options = RefineOptions {
        k: a.k.unwrap_or(ctx.config.k),
        rho: a.rho.unwrap_or(ctx.config.rho),
    };
    let s = spectral::refine_subgraph(&graph, &r, eta, options)?;
    let ids: Vec<&str> = s.vertices.iter().map(|&v| graph.vertices()[v].id.as_str()).collect();
    let triplets: Vec<String> = spectral::extract_triplets(&s, &graph)
        .iter()
        .map(|t| format!("{} {} {}", graph.vertices()[t.head].id, t.relation, graph.vertices()[t.tail].id))
        .collect();
    Records::stdout().emit(&json!({
        "query_id": a.query_id,
        "vertices": ids,
        "eta": s.eta,
        "relevance_mass": s.relevance_mass,
        "smoothness": s.smoothness,
        "cut": s.cut,
        "objective": s.objective,
        "fallback": s.fallback,
        "triplets": triplets,
    }))
}

fn cheeger(ctx: &Ctx, graph: Option<PathBuf>) -> CliResult<()> {
    let graph = graph_at(ctx, graph)?;
    let report = spectral::cheeger_check(&graph)?;
    Records::stdout().emit(&report)
}

/// Queries with answers, conditioned on the query alone.
fn gen_data(bundle: &Bundle) -> CliResult<(Vec<GenExample>, usize, usize)> {
    let vocab = bundle.qa.iter().flat_map(|(_, a)| a.iter().copied()).max().map_or(2, |m| (m + 1).max(2));
    let len = bundle.qa.first().map_or(0, |(_, a)| a.len());
    let data = bundle
        .qa
        .iter()
        .map(|(id, a)| {
            Ok(GenExample {
                query: find_query(&bundle.queries, id)?.clone(),
                evidence: Vec::new(),
                answer: TokenSequence::new(a.clone(), vocab)?,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok((data, vocab, len))
}

fn gen_train(ctx: &Ctx, alpha: Option<f64>, dropout_t: Option<f64>, epochs: Option<usize>) -> CliResult<()> {
    let bundle = ctx.bundle()?;
    let (data, vocab, len) = gen_data(&bundle)?;
    let first = data.first().ok_or_else(|| Error::contract("bundle has no question-answer pairs"))?;
    let qdim = first.query.visual_features.len() + first.query.text_features.len();
    let c = &ctx.config;
    let gen = ToyGenerator::new(vocab, len, qdim, 0, c.token_dim, c.seed)?;
    let config = GenConfig {
        alpha: alpha.unwrap_or(c.alpha),
        dropout_t_decay: dropout_t.unwrap_or(c.dropout_t_decay),
        epochs: epochs.unwrap_or(c.epochs),
        batch_size: c.batch_size,
        lr: c.gen_lr,
        weight_decay: c.weight_decay,
        seed: c.seed,
        transport: c.transport(),
    };
    let (gen, trace) = generation::train_generation(gen, &data, &config)?;
    let mut out = Records::traced(ctx, "gen_trace.jsonl")?;
    for e in &trace.epochs {
        out.emit(e)?;
    }
    ctx.save(GENERATOR_FILE, &gen)
}

fn gen_eval(ctx: &Ctx, exact_ot_max: Option<usize>, epsilon: Option<f64>) -> CliResult<()> {
    let gen: ToyGenerator = ctx.load(GENERATOR_FILE, "hyperrag gen train")?;
    let bundle = ctx.bundle()?;
    let (data, _, _) = gen_data(&bundle)?;
    let mode = TransportMode::Auto {
        exact_max: exact_ot_max.unwrap_or(ctx.config.exact_ot_max),
        epsilon: epsilon.unwrap_or(ctx.config.epsilon),
    };
    let parts = generation::dataset_loss(&gen, &data, ctx.config.alpha, mode)?;
    Records::stdout().emit(&json!({
        "examples": data.len(),
        "l_local": parts.local,
        "l_global": parts.global,
        "l_gen": parts.total,
        "exact_match": generation::exact_match(&gen, &data)?,
    }))
}

fn train_all(ctx: &Ctx) -> CliResult<()> {
    let bundle = ctx.bundle()?;
    let (components, reports) = pipeline::run_training(&ctx.config, &bundle)?;
    let mut out = Records::traced(ctx, "train.jsonl")?;
    for r in &reports {
        out.emit(r)?;
    }
    ctx.save(COMPONENTS_FILE, &components)
}

fn trained(ctx: &Ctx) -> CliResult<(Components, Bundle, KnowledgeBase)> {
    let components: Components = ctx.load(COMPONENTS_FILE, "hyperrag train-all")?;
    let bundle = ctx.bundle()?;
    let kb = KnowledgeBase::from_bundle(&bundle, components.config.k)?;
    Ok((components, bundle, kb))
}

fn answer(ctx: &Ctx, query_id: &str) -> CliResult<()> {
    let (components, bundle, kb) = trained(ctx)?;
    let q = find_query(&bundle.queries, query_id)?;
    let a = pipeline::answer_query(&components, &kb, q)?;
    let subgraph: Option<Vec<&str>> = a
        .subgraph
        .as_ref()
        .map(|s| s.vertices.iter().map(|&v| kb.graph.vertices()[v].id.as_str()).collect());
    Records::stdout().emit(&json!({
        "query_id": query_id,
        "answer": a.answer.tokens(),
        "sigma": a.decision.sigma,
        "theta": a.decision.theta,
        "delta": a.decision.delta,
        "retrieved": a.retrieved,
        "relevant": a.decision.relevant,
        "subgraph": subgraph,
        "timing": a.timing,
    }))
}

fn eval(ctx: &Ctx) -> CliResult<()> {
    let (components, bundle, kb) = trained(ctx)?;
    let cases = pipeline::eval_cases(&bundle)?;
    let mut out = Records::traced(ctx, "eval.jsonl")?;
    for case in &cases {
        let a = pipeline::answer_query(&components, &kb, &case.query)?;
        let kept = a.decision.relevant.len();
        let hits = a.decision.relevant.iter().filter(|(id, _)| case.relevant.contains(id)).count();
        out.emit(&json!({
            "query_id": case.query.id,
            "correct": a.answer == case.answer,
            "delta": a.decision.delta,
            "kept": kept,
            "relevant_kept": hits,
        }))?;
    }
    let (report, _) = pipeline::evaluate(&components, &kb, &cases)?;
    out.emit(&json!({ "report": report }))?;
    ctx.save("eval_report.json", &report)
}

fn time_per_call(iterations: usize, mut f: impl FnMut() -> hyperrag_core::Result<()>) -> CliResult<f64> {
    let start = Instant::now();
    for _ in 0..iterations {
        f()?;
    }
    Ok(start.elapsed().as_secs_f64() / iterations as f64)
}

fn bench(ctx: &Ctx, repeats: usize) -> CliResult<()> {
    use rand::Rng;
    let mut out = Records::traced(ctx, "bench.jsonl")?;
    let mut rng = seeded_rng(ctx.config.seed);
    let points: Vec<_> = (0..64)
        .map(|_| {
            let v: Vec<f64> = (0..ctx.config.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            lorentz::project_to_hyperboloid(&v)
        })
        .collect::<Result<_, _>>()?;
    let secs = time_per_call(10_000, || {
        std::hint::black_box(lorentz::geodesic_distance(&points[0], &points[1]));
        Ok(())
    })?;
    out.emit(&json!({ "op": "geodesic_distance", "dim": ctx.config.dim, "mean_seconds": secs }))?;
    let cloud = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| {
        EmpiricalDistribution::uniform((0..n).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
    };
    let (p, q) = (cloud(&mut rng, 32)?, cloud(&mut rng, 32)?);
    let secs = time_per_call(20, || transport::wasserstein2_exact(&p, &q).map(|_| ()))?;
    out.emit(&json!({ "op": "wasserstein2_exact", "support": 32, "mean_seconds": secs }))?;
    let secs = time_per_call(20, || transport::wasserstein2_sinkhorn(&p, &q, ctx.config.epsilon, 10_000).map(|_| ()))?;
    out.emit(&json!({ "op": "wasserstein2_sinkhorn", "support": 32, "mean_seconds": secs }))?;

    let (components, bundle, kb) = trained(ctx)?;
    let secs = time_per_call(3, || spectral::cheeger_check(&kb.graph).map(|_| ()))?;
    out.emit(&json!({ "op": "cheeger_check", "vertices": kb.graph.len(), "mean_seconds": secs }))?;
    let cases = pipeline::eval_cases(&bundle)?;
    for run in 0..repeats.max(1) {
        let (_, latency) = pipeline::evaluate(&components, &kb, &cases)?;
        out.emit(&json!({ "op": "answer_query", "run": run, "latency": latency }))?;
    }
    Ok(())
}

fn conformance_run(filter: Option<&str>) -> CliResult<()> {
    let results = conformance::run(filter)?;
    let mut out = Records::stdout();
    for r in &results {
        out.emit(r)?;
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    out.emit(&json!({ "cases": results.len(), "failed": failed }))?;
    if failed > 0 {
        return Err(CliError::ConformanceFailed(failed));
    }
    Ok(())
}
