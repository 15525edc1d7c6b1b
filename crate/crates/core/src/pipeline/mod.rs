//! Two-phase training, gated inference and evaluation.
//!
//! Phase 1 fits the document relevance head, the vertex relevance head and
//! the gate threshold θ. Phase 2 walks the queries in mini-batches: gated
//! queries retrieve, align, refine and generate; the rest generate from the
//! query alone and contribute only the generation loss.

pub mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    accumulate_pair_grad, rank_by_distance, AlignmentPair, EmbeddingTable, EncoderDims,
    KnowledgeItem, Modality, Query,
};
use crate::crm::{
    self, accumulate_crm_grad, CrmConfig, CrmExample, RelevanceHead, RetrievalDecision,
};
use crate::error::{Error, Result};
use crate::generation::{
    self, apply_query_dropout, dropout_seed, example_loss, query_dropout_prob, ToyGenerator,
    TokenSequence, TransportMode,
};
use crate::lorentz::log_origin;
use crate::optim::{AdamW, AdamWConfig};
use crate::scorer::{Candidate, DotProductScorer, QueryView};
use crate::seeded_rng;
use crate::spectral::{
    embed_triplet, extract_triplets, refine_subgraph_with, relevance_vector, smallest_eigenpairs,
    EigenPair, KnowledgeGraph, LaplacianOperator, Subgraph,
};

pub use synth::{synth_bundle, Bundle, GroundTruth, SynthSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Hyperbolic dimension n.
    pub dim: usize,
    /// Eigenvectors swept during refinement.
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// AdamW rate of the document head during Phase 2.
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// η as a fraction of the query's total vertex relevance.
    pub eta_frac: f64,
    pub rho: f64,
    /// Entropic regularization when the transport support exceeds
    /// `exact_ot_max`.
    pub epsilon: f64,
    pub exact_ot_max: usize,
    pub dropout_t_decay: f64,
    /// Documents retrieved before filtering.
    pub retrieve_k: usize,
    /// Hidden width of both relevance heads.
    pub hidden: usize,
    pub crm_lr: f64,
    pub crm_epochs: usize,
    /// AdamW rate of the encoders, which start from random maps.
    pub align_lr: f64,
    /// AdamW rate of the generator, which starts from zero.
    pub gen_lr: f64,
    pub token_dim: usize,
    /// Softmax temperature of the answer-bank confidence.
    pub confidence_scale: f64,
    /// Also train alignment on queries the gate answers directly.
    pub align_all_queries: bool,
    /// With the CRM off every query retrieves and nothing is filtered.
    pub crm_enabled: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            k: 10,
            alpha: 0.7,
            beta: 0.3,
            gamma: 0.3,
            lr: 1e-4,
            weight_decay: 1e-2,
            epochs: 20,
            batch_size: 32,
            seed: 42,
            eta_frac: 0.5,
            rho: 1.0,
            epsilon: 0.01,
            exact_ot_max: crate::transport::EXACT_SUPPORT_LIMIT,
            dropout_t_decay: 100.0,
            retrieve_k: 10,
            hidden: 512,
            crm_lr: 1e-3,
            crm_epochs: 30,
            align_lr: 1e-2,
            gen_lr: 1e-2,
            token_dim: 16,
            confidence_scale: 1.0,
            align_all_queries: false,
            crm_enabled: true,
        }
    }
}

fn open_unit(x: f64) -> bool {
    x > 0.0 && x < 1.0
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        check_weights(self.beta, self.gamma)?;
        if !open_unit(self.alpha) {
            return Err(Error::config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.dim < 2 {
            return Err(Error::config("dim must be at least 2"));
        }
        if self.k == 0 || self.retrieve_k == 0 || self.hidden == 0 || self.token_dim == 0 {
            return Err(Error::config("k, retrieve_k, hidden and token_dim must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("crm_lr", self.crm_lr),
            ("align_lr", self.align_lr),
            ("gen_lr", self.gen_lr),
            ("epsilon", self.epsilon),
            ("dropout_t_decay", self.dropout_t_decay),
            ("confidence_scale", self.confidence_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) || !(self.rho >= 0.0) {
            return Err(Error::config("weight_decay and rho must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.eta_frac) {
            return Err(Error::config(format!("eta_frac must lie in [0, 1], got {}", self.eta_frac)));
        }
        Ok(())
    }

    pub fn transport(&self) -> TransportMode {
        TransportMode::Auto {
            exact_max: self.exact_ot_max,
            epsilon: self.epsilon,
        }
    }
}

fn check_weights(beta: f64, gamma: f64) -> Result<()> {
    if !open_unit(beta) || !open_unit(gamma) {
        return Err(Error::config(format!("beta and gamma must lie in (0, 1), got {beta}, {gamma}")));
    }
    if beta + gamma >= 1.0 {
        return Err(Error::config(format!("beta + gamma must be < 1, got {}", beta + gamma)));
    }
    Ok(())
}

/// `beta * l_crm + gamma * l_geo + (1 - beta - gamma) * l_gen`.
pub fn total_loss(l_crm: f64, l_geo: f64, l_gen: f64, beta: f64, gamma: f64) -> Result<f64> {
    check_weights(beta, gamma)?;
    Ok(beta * l_crm + gamma * l_geo + (1.0 - beta - gamma) * l_gen)
}

/// Per-epoch means over the queries seen; gated-off queries count as zero
/// in the retrieval terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub l_crm: f64,
    pub l_geo: f64,
    pub l_local: f64,
    pub l_global: f64,
    pub l_gen: f64,
    pub l_total: f64,
    pub delta_rate: f64,
    /// Batches in this epoch that stepped the document head.
    pub crm_updates: usize,
    /// Batches in this epoch that stepped the encoders.
    pub geo_updates: usize,
}

/// Finite candidate answers with prototype text features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerBank {
    pub answers: Vec<Vec<usize>>,
    pub prototypes: Vec<Vec<f64>>,
    pub scale: f64,
}

impl AnswerBank {
    /// One candidate per distinct answer; its prototype is the mean text
    /// feature vector of the queries carrying that answer.
    pub fn from_pairs(pairs: &[(&Query, &[usize])], scale: f64) -> Result<Self> {
        let mut groups: BTreeMap<Vec<usize>, (Vec<f64>, usize)> = BTreeMap::new();
        for (q, a) in pairs {
            let entry = groups
                .entry(a.to_vec())
                .or_insert_with(|| (vec![0.0; q.text_features.len()], 0));
            if entry.0.len() != q.text_features.len() {
                return Err(Error::config("queries disagree on text feature dimension"));
            }
            entry.0.iter_mut().zip(&q.text_features).for_each(|(s, x)| *s += x);
            entry.1 += 1;
        }
        if groups.is_empty() {
            return Err(Error::contract("answer bank needs at least one answer"));
        }
        let (answers, prototypes) = groups
            .into_iter()
            .map(|(a, (sum, n))| (a, sum.into_iter().map(|s| s / n as f64).collect()))
            .unzip();
        Ok(Self {
            answers,
            prototypes,
            scale,
        })
    }

    /// σ: the largest softmax probability over the candidates.
    pub fn confidence(&self, query: &Query) -> Result<f64> {
        let ids: Vec<String> = (0..self.answers.len()).map(|i| format!("a{i}")).collect();
        let candidates: Vec<Candidate<'_>> = ids
            .iter()
            .zip(&self.prototypes)
            .map(|(id, p)| Candidate {
                id,
                modality: Modality::Textual,
                features: p,
            })
            .collect();
        crm::confidence(&DotProductScorer::new(self.scale, QueryView::Text), query, &candidates)
    }
}

/// Everything produced by training; serializable as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub config: PipelineConfig,
    pub table: EmbeddingTable,
    pub doc_head: RelevanceHead,
    pub vertex_head: RelevanceHead,
    pub theta: f64,
    pub generator: ToyGenerator,
    pub answer_bank: AnswerBank,
}

/// The read-only knowledge the pipeline retrieves from, with the cached
/// Laplacian spectrum.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    pub items: Vec<KnowledgeItem>,
    pub graph: KnowledgeGraph,
    pub pairs: Vec<EigenPair>,
}

impl KnowledgeBase {
    pub fn new(items: Vec<KnowledgeItem>, graph: KnowledgeGraph, k: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::contract("knowledge base needs at least one item"));
        }
        if graph.is_empty() {
            return Err(Error::contract("knowledge base needs a non-empty graph"));
        }
        let k = k.min(graph.len()).max(1);
        let pairs = smallest_eigenpairs(&LaplacianOperator::new(&graph), k)
            .map_err(|e| e.at_stage("spectrum"))?;
        Ok(Self { items, graph, pairs })
    }

    pub fn from_bundle(bundle: &Bundle, k: usize) -> Result<Self> {
        Self::new(bundle.items.clone(), bundle.graph.clone(), k)
    }

    /// Refines the graph for one query with the vertex head.
    fn refine(&self, head: &RelevanceHead, query: &Query, config: &PipelineConfig) -> Result<Subgraph> {
        let r = relevance_vector(query, &self.graph, head)?;
        let eta = config.eta_frac * r.total();
        refine_subgraph_with(&self.graph, &r, eta, config.rho, &self.pairs)
    }

    fn triplet_tangents(&self, table: &EmbeddingTable, subgraph: &Subgraph) -> Result<Vec<Vec<f64>>> {
        extract_triplets(subgraph, &self.graph)
            .into_iter()
            .map(|t| Ok(log_origin(&embed_triplet(table, &self.graph, t)?)))
            .collect()
    }
}

fn encoder_dims(bundle: &Bundle) -> Result<EncoderDims> {
    let q = bundle
        .queries
        .first()
        .ok_or_else(|| Error::contract("bundle has no queries"))?;
    let query = q.visual_features.len() + q.text_features.len();
    let vertex_dim = bundle.graph.vertices().first().map(|v| v.features.len());
    let mut dims: BTreeMap<Modality, usize> = BTreeMap::new();
    for item in &bundle.items {
        let d = *dims.entry(item.modality).or_insert(item.features.len());
        if d != item.features.len() {
            return Err(Error::config(format!("item {} has inconsistent feature length", item.id)));
        }
    }
    let fallback = dims.values().next().copied().or(vertex_dim).unwrap_or(1);
    let graph = dims.get(&Modality::GraphTriplet).copied().or(vertex_dim).unwrap_or(fallback);
    if let Some(v) = vertex_dim {
        if v != graph {
            return Err(Error::config(format!(
                "graph vertices have {v} features, graph-triplet items {graph}"
            )));
        }
    }
    Ok(EncoderDims {
        visual: dims.get(&Modality::Visual).copied().unwrap_or(fallback),
        textual: dims.get(&Modality::Textual).copied().unwrap_or(fallback),
        graph,
        query,
    })
}

/// Bundle contents resolved to indices.
struct Indexed<'b> {
    bundle: &'b Bundle,
    vertex_items: Vec<KnowledgeItem>,
    positives: Vec<Vec<&'b KnowledgeItem>>,
    labels: Vec<(Vec<usize>, Vec<usize>)>,
    vertex_labels: Vec<(Vec<usize>, Vec<usize>)>,
    needs_retrieval: Vec<Option<bool>>,
    answers: Vec<Option<TokenSequence>>,
    vocab: usize,
    answer_len: usize,
}

impl<'b> Indexed<'b> {
    fn new(bundle: &'b Bundle) -> Result<Self> {
        let nq = bundle.queries.len();
        if nq == 0 {
            return Err(Error::contract("bundle has no queries"));
        }
        let query_index = id_index(bundle.queries.iter().map(|q| q.id.as_str()), "query")?;
        let item_index = id_index(bundle.items.iter().map(|i| i.id.as_str()), "item")?;
        let lookup = |map: &BTreeMap<&str, usize>, id: &str, what: &str| {
            map.get(id)
                .copied()
                .ok_or_else(|| Error::contract(format!("unknown {what} id {id}")))
        };
        let mut positives = vec![Vec::new(); nq];
        for (q, i) in &bundle.positives {
            let qi = lookup(&query_index, q, "query")?;
            positives[qi].push(&bundle.items[lookup(&item_index, i, "item")?]);
        }
        let mut labels = vec![(Vec::new(), Vec::new()); nq];
        for rec in &bundle.labels {
            let qi = lookup(&query_index, &rec.query_id, "query")?;
            let ii = lookup(&item_index, &rec.item_id, "item")?;
            if rec.positive {
                labels[qi].0.push(ii);
            } else {
                labels[qi].1.push(ii);
            }
        }
        let mut vertex_labels = vec![(Vec::new(), Vec::new()); nq];
        for rec in &bundle.vertex_labels {
            let qi = lookup(&query_index, &rec.query_id, "query")?;
            let vi = bundle
                .graph
                .vertex_index(&rec.item_id)
                .ok_or_else(|| Error::contract(format!("unknown vertex id {}", rec.item_id)))?;
            if rec.positive {
                vertex_labels[qi].0.push(vi);
            } else {
                vertex_labels[qi].1.push(vi);
            }
        }
        let mut needs_retrieval = vec![None; nq];
        for (q, label) in &bundle.gating {
            needs_retrieval[lookup(&query_index, q, "query")?] = Some(label.needs_retrieval());
        }
        let vocab = bundle
            .qa
            .iter()
            .flat_map(|(_, a)| a.iter().copied())
            .max()
            .map_or(0, |m| m + 1)
            .max(2);
        let answer_len = bundle.qa.first().map_or(0, |(_, a)| a.len());
        let mut answers = vec![None; nq];
        for (q, a) in &bundle.qa {
            if a.len() != answer_len {
                return Err(Error::config("all answers must have the same length"));
            }
            answers[lookup(&query_index, q, "query")?] = Some(TokenSequence::new(a.clone(), vocab)?);
        }
        if answer_len == 0 {
            return Err(Error::contract("bundle has no question-answer pairs"));
        }
        let vertex_items = bundle
            .graph
            .vertices()
            .iter()
            .map(|v| KnowledgeItem {
                id: v.id.clone(),
                modality: Modality::GraphTriplet,
                features: v.features.clone(),
            })
            .collect();
        Ok(Self {
            bundle,
            vertex_items,
            positives,
            labels,
            vertex_labels,
            needs_retrieval,
            answers,
            vocab,
            answer_len,
        })
    }

    fn crm_examples<'s>(
        &'s self,
        labels: &[(Vec<usize>, Vec<usize>)],
        docs: &'s [KnowledgeItem],
    ) -> Vec<CrmExample<'s>> {
        self.bundle
            .queries
            .iter()
            .zip(labels)
            .filter(|(_, (p, n))| !p.is_empty() || !n.is_empty())
            .map(|(q, (p, n))| CrmExample {
                query: q,
                positives: p.iter().map(|&i| &docs[i]).collect(),
                negatives: n.iter().map(|&i| &docs[i]).collect(),
            })
            .collect()
    }
}

fn id_index<'a>(ids: impl Iterator<Item = &'a str>, what: &str) -> Result<BTreeMap<&'a str, usize>> {
    let mut map = BTreeMap::new();
    for (i, id) in ids.enumerate() {
        if map.insert(id, i).is_some() {
            return Err(Error::contract(format!("duplicate {what} id {id}")));
        }
    }
    Ok(map)
}

fn sub_seed(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn crm_config(config: &PipelineConfig, seed: u64) -> CrmConfig {
    CrmConfig {
        hidden: config.hidden,
        lr: config.crm_lr,
        weight_decay: config.weight_decay,
        epochs: config.crm_epochs,
        batch_size: config.batch_size,
        seed,
    }
}

/// Phase 1: document head and θ.
fn phase_one(
    config: &PipelineConfig,
    ix: &Indexed<'_>,
    bank: &AnswerBank,
    dims: EncoderDims,
) -> Result<(RelevanceHead, f64)> {
    let bundle = ix.bundle;
    let item_dim = bundle.items[0].features.len();
    let head = RelevanceHead::random(dims.query, item_dim, config.hidden, sub_seed(config.seed, 1));
    let mut gating = Vec::new();
    for (q, need) in bundle.queries.iter().zip(&ix.needs_retrieval) {
        if let Some(need) = need {
            gating.push((bank.confidence(q)?, *need));
        }
    }
    let examples = ix.crm_examples(&ix.labels, &bundle.items);
    if examples.is_empty() {
        let theta = if gating.is_empty() { 0.5 } else { crm::fit_threshold(&gating)? };
        return Ok((head, theta));
    }
    let (head, theta, _) = crm::train_crm(head, &examples, &gating, &crm_config(config, config.seed))
        .map_err(|e| e.at_stage("phase 1: document relevance"))?;
    Ok((head, theta))
}

/// The vertex head scores graph entities for refinement; it is trained in
/// Phase 1 whether or not the gate is enabled.
fn vertex_head(config: &PipelineConfig, ix: &Indexed<'_>, dims: EncoderDims) -> Result<RelevanceHead> {
    let vertex_dim = ix.bundle.graph.vertices()[0].features.len();
    let head = RelevanceHead::random(dims.query, vertex_dim, config.hidden, sub_seed(config.seed, 2));
    let examples = ix.crm_examples(&ix.vertex_labels, &ix.vertex_items);
    if examples.is_empty() {
        return Ok(head);
    }
    Ok(crm::train_crm(head, &examples, &[], &crm_config(config, sub_seed(config.seed, 3)))
        .map_err(|e| e.at_stage("phase 1: vertex relevance"))?
        .0)
}

/// The Phase 1 products: everything that is frozen during Phase 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub doc_head: RelevanceHead,
    pub vertex_head: RelevanceHead,
    pub theta: f64,
    pub answer_bank: AnswerBank,
}

/// Runs Phase 1 alone.
pub fn train_gate(config: &PipelineConfig, bundle: &Bundle) -> Result<Gate> {
    config.validate()?;
    let ix = Indexed::new(bundle)?;
    gate_from(config, bundle, &ix, encoder_dims(bundle)?)
}

fn gate_from(config: &PipelineConfig, bundle: &Bundle, ix: &Indexed<'_>, dims: EncoderDims) -> Result<Gate> {
    let qa_pairs: Vec<(&Query, &[usize])> = bundle
        .queries
        .iter()
        .zip(&ix.answers)
        .filter_map(|(q, a)| a.as_ref().map(|a| (q, a.tokens())))
        .collect();
    let answer_bank = AnswerBank::from_pairs(&qa_pairs, config.confidence_scale)?;
    let (doc_head, theta) = if config.crm_enabled {
        phase_one(config, ix, &answer_bank, dims)?
    } else {
        let item_dim = bundle.items[0].features.len();
        (RelevanceHead::zeros(dims.query, item_dim, config.hidden), 0.0)
    };
    let vertex_head = vertex_head(config, ix, dims)?;
    Ok(Gate {
        doc_head,
        vertex_head,
        theta,
        answer_bank,
    })
}

#[derive(Default)]
struct EpochSums {
    crm: f64,
    geo: f64,
    local: f64,
    global: f64,
    gen: f64,
    total: f64,
    gated: usize,
    count: usize,
}

/// Runs both phases and returns the trained components with one
/// [`LossReport`] per epoch.
pub fn run_training(config: &PipelineConfig, bundle: &Bundle) -> Result<(Components, Vec<LossReport>)> {
    config.validate()?;
    let ix = Indexed::new(bundle)?;
    let dims = encoder_dims(bundle)?;
    let kb = KnowledgeBase::from_bundle(bundle, config.k)?;

    let Gate {
        mut doc_head,
        vertex_head,
        theta,
        answer_bank,
    } = gate_from(config, bundle, &ix, dims)?;

    // Phase 2.
    let mut table = EmbeddingTable::random(dims, config.dim, sub_seed(config.seed, 4));
    let mut generator = ToyGenerator::new(
        ix.vocab,
        ix.answer_len,
        dims.query,
        config.dim,
        config.token_dim,
        sub_seed(config.seed, 5),
    )?;
    let mut head_opt = AdamW::new(AdamWConfig::with_lr(config.lr, config.weight_decay), doc_head.params.len())?;
    let mut table_opt = AdamW::new(
        AdamWConfig::with_lr(config.align_lr, config.weight_decay),
        table.params().len(),
    )?;
    let mut gen_opt = AdamW::new(
        AdamWConfig::with_lr(config.gen_lr, config.weight_decay),
        generator.params.len(),
    )?;

    // σ, θ and the vertex head are frozen in Phase 2, so the gate and the
    // refined subgraph of each query are fixed.
    let trainable: Vec<usize> = (0..bundle.queries.len()).filter(|&i| ix.answers[i].is_some()).collect();
    let mut gate = vec![true; bundle.queries.len()];
    let mut subgraphs: Vec<Option<Subgraph>> = vec![None; bundle.queries.len()];
    for &i in &trainable {
        let q = &bundle.queries[i];
        if config.crm_enabled {
            gate[i] = crm::decide(answer_bank.confidence(q)?, theta);
        }
        if gate[i] {
            subgraphs[i] = Some(
                kb.refine(&vertex_head, q, config)
                    .map_err(|e| e.at_stage(format!("phase 2: refine {}", q.id)))?,
            );
        }
    }

    let (b, g) = (config.beta, config.gamma);
    let w_gen = 1.0 - b - g;
    let mode = config.transport();
    let mut rng = seeded_rng(sub_seed(config.seed, 6));
    let mut order = trainable.clone();
    let mut step: u64 = 0;
    let mut reports = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sums = EpochSums::default();
        let (mut crm_updates, mut geo_updates) = (0, 0);
        for chunk in order.chunks(config.batch_size) {
            let current = step;
            let stage = move |e: Error| e.at_stage(format!("phase 2: step {current}"));
            let scale = 1.0 / chunk.len() as f64;
            let p_drop = query_dropout_prob(step, config.dropout_t_decay)?;
            let points = kb
                .items
                .iter()
                .map(|it| table.embed_item(it))
                .collect::<Result<Vec<_>>>()
                .map_err(stage)?;
            let mut head_grad = vec![0.0; doc_head.params.len()];
            let mut table_grad = table.zeros_like();
            let mut gen_grad = vec![0.0; generator.params.len()];
            let (mut head_touched, mut table_touched) = (false, false);
            for &qi in chunk {
                let query = &bundle.queries[qi];
                let answer = ix.answers[qi].as_ref().expect("trainable queries have answers");
                let (mut l_crm, mut l_geo) = (0.0, 0.0);
                let mut evidence = vec![0.0; config.dim];
                if gate[qi] {
                    sums.gated += 1;
                    let (pos, neg) = &ix.labels[qi];
                    if config.crm_enabled && (!pos.is_empty() || !neg.is_empty()) {
                        let ex = CrmExample {
                            query,
                            positives: pos.iter().map(|&i| &bundle.items[i]).collect(),
                            negatives: neg.iter().map(|&i| &bundle.items[i]).collect(),
                        };
                        l_crm = accumulate_crm_grad(&doc_head, &[ex], b * scale, &mut head_grad)
                            .map_err(stage)?;
                        head_touched = true;
                    }
                    let q_point = table.embed_query(query).map_err(stage)?;
                    let k = config.retrieve_k.min(kb.items.len());
                    let ranked = rank_by_distance(&q_point, &kb.items, &points, k);
                    let docs: Vec<&KnowledgeItem> = ranked.iter().map(|(i, _)| &kb.items[*i]).collect();
                    let kept: Vec<usize> = if config.crm_enabled {
                        let relevant = crm::filter_relevant(&doc_head, query, &docs).map_err(stage)?;
                        let ids: BTreeSet<&str> = relevant.iter().map(|(d, _)| d.id.as_str()).collect();
                        ranked.iter().map(|(i, _)| *i).filter(|i| ids.contains(kb.items[*i].id.as_str())).collect()
                    } else {
                        ranked.iter().map(|(i, _)| *i).collect()
                    };
                    if !ix.positives[qi].is_empty() {
                        let pair = AlignmentPair {
                            query,
                            positives: &ix.positives[qi],
                        };
                        l_geo = accumulate_pair_grad(&table, &pair, &mut table_grad, g * scale).map_err(stage)?;
                        table_touched = true;
                    }
                    let d_rel: Vec<Vec<f64>> = kept.iter().map(|&i| log_origin(&points[i])).collect();
                    let sub = subgraphs[qi].as_ref().expect("gated queries are refined");
                    let triplets = kb.triplet_tangents(&table, sub).map_err(stage)?;
                    evidence = generation::evidence_summary(config.dim, &d_rel, &triplets).map_err(stage)?;
                } else if config.align_all_queries && !ix.positives[qi].is_empty() {
                    let pair = AlignmentPair {
                        query,
                        positives: &ix.positives[qi],
                    };
                    l_geo = accumulate_pair_grad(&table, &pair, &mut table_grad, g * scale).map_err(stage)?;
                    table_touched = true;
                }
                let masked = apply_query_dropout(query, p_drop, dropout_seed(config.seed, step, qi as u64));
                let cond = generator.condition(&masked, &evidence).map_err(stage)?;
                let parts = example_loss(
                    &generator,
                    &cond,
                    answer,
                    config.alpha,
                    mode,
                    Some((&mut gen_grad, w_gen * scale)),
                )
                .map_err(stage)?;
                let total = b * l_crm + g * l_geo + w_gen * parts.total;
                if !total.is_finite() {
                    return Err(stage(Error::divergence(step as usize, format!("L_total = {total}"))));
                }
                sums.crm += l_crm;
                sums.geo += l_geo;
                sums.local += parts.local;
                sums.global += parts.global;
                sums.gen += parts.total;
                sums.total += total;
                sums.count += 1;
            }
            if head_touched {
                head_opt.step(&mut doc_head.params, &head_grad).map_err(stage)?;
                crm_updates += 1;
            }
            if table_touched {
                let mut params = table.params();
                table_opt.step(&mut params, &table_grad.params()).map_err(stage)?;
                table.set_params(&params);
                geo_updates += 1;
            }
            gen_opt.step(&mut generator.params, &gen_grad).map_err(stage)?;
            step += 1;
            if !doc_head.is_finite() || !table.is_finite() || !generator.is_finite() {
                return Err(stage(Error::divergence(step as usize, "non-finite parameters")));
            }
        }
        let n = sums.count.max(1) as f64;
        reports.push(LossReport {
            epoch,
            step,
            l_crm: sums.crm / n,
            l_geo: sums.geo / n,
            l_local: sums.local / n,
            l_global: sums.global / n,
            l_gen: sums.gen / n,
            l_total: sums.total / n,
            delta_rate: sums.gated as f64 / n,
            crm_updates,
            geo_updates,
        });
        log::debug!("epoch {epoch}: L_total = {:.6}", sums.total / n);
    }

    Ok((
        Components {
            config: config.clone(),
            table,
            doc_head,
            vertex_head,
            theta,
            generator,
            answer_bank,
        },
        reports,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub answer: TokenSequence,
    pub decision: RetrievalDecision,
    /// Top-k ids before filtering; empty when the gate skipped retrieval.
    pub retrieved: Vec<String>,
    pub subgraph: Option<Subgraph>,
    pub timing: Vec<StageTiming>,
}

fn timed<T>(timing: &mut Vec<StageTiming>, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().map_err(|e| e.at_stage(stage))?;
    timing.push(StageTiming {
        stage: stage.to_string(),
        seconds: start.elapsed().as_secs_f64(),
    });
    Ok(out)
}

/// Gate, then optionally retrieve, filter and refine, then generate.
pub fn answer_query(components: &Components, kb: &KnowledgeBase, query: &Query) -> Result<Answer> {
    let c = components;
    let config = &c.config;
    let mut timing = Vec::new();
    let sigma = timed(&mut timing, "gate", || c.answer_bank.confidence(query))?;
    let delta = !config.crm_enabled || crm::decide(sigma, c.theta);
    let mut decision = RetrievalDecision {
        sigma,
        theta: c.theta,
        delta,
        relevant: Vec::new(),
    };
    let mut retrieved = Vec::new();
    let mut subgraph = None;
    let mut d_rel = Vec::new();
    let mut triplets = Vec::new();
    if delta {
        let ranked = timed(&mut timing, "retrieve", || {
            let q = c.table.embed_query(query)?;
            let points = kb
                .items
                .iter()
                .map(|it| c.table.embed_item(it))
                .collect::<Result<Vec<_>>>()?;
            let k = config.retrieve_k.min(kb.items.len());
            Ok(rank_by_distance(&q, &kb.items, &points, k)
                .into_iter()
                .map(|(i, _)| (i, points[i].clone()))
                .collect::<Vec<_>>())
        })?;
        retrieved = ranked.iter().map(|(i, _)| kb.items[*i].id.clone()).collect();
        let kept = timed(&mut timing, "filter", || {
            let docs: Vec<&KnowledgeItem> = ranked.iter().map(|(i, _)| &kb.items[*i]).collect();
            if config.crm_enabled {
                crm::filter_relevant(&c.doc_head, query, &docs)
            } else {
                docs.into_iter()
                    .map(|d| Ok((d, crm::relevance(&c.doc_head, query, d)?)))
                    .collect()
            }
        })?;
        decision.relevant = kept.iter().map(|(d, r)| (d.id.clone(), *r)).collect();
        let kept_ids: BTreeSet<&str> = kept.iter().map(|(d, _)| d.id.as_str()).collect();
        d_rel = ranked
            .iter()
            .filter(|(i, _)| kept_ids.contains(kb.items[*i].id.as_str()))
            .map(|(_, p)| log_origin(p))
            .collect();
        let sub = timed(&mut timing, "refine", || kb.refine(&c.vertex_head, query, config))?;
        triplets = timed(&mut timing, "triplets", || kb.triplet_tangents(&c.table, &sub))?;
        subgraph = Some(sub);
    }
    let (answer, _) = timed(&mut timing, "generate", || {
        generation::generate(&c.generator, query, &d_rel, &triplets, c.generator.answer_len)
    })?;
    Ok(Answer {
        answer,
        decision,
        retrieved,
        subgraph,
        timing,
    })
}

/// One evaluation query with its reference answer and relevant item ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase {
    pub query: Query,
    pub answer: TokenSequence,
    pub relevant: BTreeSet<String>,
}

/// Cases for every bundle query that has an answer.
pub fn eval_cases(bundle: &Bundle) -> Result<Vec<EvalCase>> {
    let ix = Indexed::new(bundle)?;
    Ok(bundle
        .queries
        .iter()
        .enumerate()
        .filter_map(|(i, q)| {
            ix.answers[i].as_ref().map(|a| EvalCase {
                query: q.clone(),
                answer: a.clone(),
                relevant: ix.positives[i].iter().map(|d| d.id.clone()).collect(),
            })
        })
        .collect())
}

/// Deterministic quality metrics. Wall-clock latency lives in
/// [`LatencyReport`] so that identical runs serialize identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub queries: usize,
    pub accuracy: f64,
    pub coherence: f64,
    /// Relevant share of the filtered documents over gated queries; 0 when
    /// nothing was retrieved.
    pub precision: f64,
    pub retrieval_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub mean_seconds: f64,
    /// Mean seconds per stage over the queries that ran it.
    pub stages: BTreeMap<String, f64>,
}

fn mean_embedding(gen: &ToyGenerator, tokens: &[usize]) -> Vec<f64> {
    let mut e = vec![0.0; gen.embed_dim()];
    for &t in tokens {
        e.iter_mut().zip(&gen.token_embeddings[t]).for_each(|(a, b)| *a += b);
    }
    e
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0)
}

/// Runs [`answer_query`] on every case, in order.
pub fn evaluate(
    components: &Components,
    kb: &KnowledgeBase,
    cases: &[EvalCase],
) -> Result<(EvalReport, LatencyReport)> {
    if cases.is_empty() {
        return Err(Error::contract("evaluate: empty evaluation set"));
    }
    let gen = &components.generator;
    let (mut hits, mut coherence, mut gated) = (0usize, 0.0, 0usize);
    let (mut relevant_kept, mut kept) = (0usize, 0usize);
    let mut latency = 0.0;
    let mut stage_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for case in cases {
        let start = Instant::now();
        let out = answer_query(components, kb, &case.query)?;
        latency += start.elapsed().as_secs_f64();
        for t in &out.timing {
            let e = stage_sums.entry(t.stage.clone()).or_default();
            e.0 += t.seconds;
            e.1 += 1;
        }
        if out.answer == case.answer {
            hits += 1;
        }
        coherence += cosine(
            &mean_embedding(gen, out.answer.tokens()),
            &mean_embedding(gen, case.answer.tokens()),
        );
        if out.decision.delta {
            gated += 1;
            kept += out.decision.relevant.len();
            relevant_kept += out
                .decision
                .relevant
                .iter()
                .filter(|(id, _)| case.relevant.contains(id))
                .count();
        }
    }
    let n = cases.len() as f64;
    let report = EvalReport {
        queries: cases.len(),
        accuracy: hits as f64 / n,
        coherence: coherence / n,
        precision: if kept == 0 {
            0.0
        } else {
            relevant_kept as f64 / kept as f64
        },
        retrieval_rate: gated as f64 / n,
    };
    let latency = LatencyReport {
        mean_seconds: latency / n,
        stages: stage_sums
            .into_iter()
            .map(|(k, (s, c))| (k, s / c as f64))
            .collect(),
    };
    Ok((report, latency))
}

#[cfg(test)]
mod tests;
