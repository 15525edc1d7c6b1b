//! Answer generation losses and a small linear generator.
//!
//! The generator reads `[query features ; evidence summary ; 1]` and emits
//! one softmax per answer position. Its loss blends token cross-entropy with
//! the 2-Wasserstein distance between expected token embeddings and the
//! reference answer's token embeddings.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::alignment::Query;
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::seeded_rng;
use crate::transport::{self, EmpiricalDistribution, TransportPlan};

const PROB_CLAMP: f64 = 1e-12;
const ROW_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, vocab: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::contract("token sequence must be non-empty"));
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::contract(format!("token {t} outside vocabulary of {vocab}")));
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One probability row per position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistributionSequence(Vec<Vec<f64>>);

impl TokenDistributionSequence {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        for (t, row) in rows.iter().enumerate() {
            if row.iter().any(|p| !(*p >= 0.0)) {
                return Err(Error::contract(format!("row {t} has a negative or NaN entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_TOL {
                return Err(Error::contract(format!("row {t} sums to {s}")));
            }
        }
        Ok(Self(rows))
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Token cross-entropy summed over positions.
pub fn local_loss(pred: &TokenDistributionSequence, target: &TokenSequence) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::contract(format!(
            "prediction has {} positions, target {}",
            pred.len(),
            target.len()
        )));
    }
    let mut total = 0.0;
    for (row, &y) in pred.rows().iter().zip(target.tokens()) {
        let p = *row
            .get(y)
            .ok_or_else(|| Error::contract(format!("token {y} outside prediction row")))?;
        total -= p.max(PROB_CLAMP).ln();
    }
    Ok(total)
}

/// `alpha * local + (1 - alpha) * global`, alpha strictly inside (0, 1).
pub fn gen_loss(local: f64, global_w2: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(alpha * local + (1.0 - alpha) * global_w2)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// `0.5 * exp(-t / t_decay)`.
pub fn query_dropout_prob(t: u64, t_decay: f64) -> Result<f64> {
    if !(t_decay > 0.0) {
        return Err(Error::config(format!("dropout decay must be positive, got {t_decay}")));
    }
    Ok(0.5 * (-(t as f64) / t_decay).exp())
}

/// Zeroes the visual and the text block independently with probability `p`.
pub fn apply_query_dropout(query: &Query, p: f64, seed: u64) -> Query {
    let mut rng = seeded_rng(seed);
    let mut out = query.clone();
    if rng.random::<f64>() < p {
        out.visual_features.iter_mut().for_each(|v| *v = 0.0);
    }
    if rng.random::<f64>() < p {
        out.text_features.iter_mut().for_each(|v| *v = 0.0);
    }
    out
}

/// Linear next-token model. Position `t` has its own weight block over the
/// condition `[query ; evidence ; 1]`, and a shared transition matrix adds a
/// column indexed by the previous token.
///
/// Parameter layout: `answer_len` blocks of `vocab x cond_dim` (row-major),
/// then `vocab x vocab` transitions (row = next token, column = previous).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyGenerator {
    pub vocab: usize,
    pub answer_len: usize,
    pub query_dim: usize,
    pub evidence_dim: usize,
    /// Fixed (untrained) embedding per token, used by the transport term.
    pub token_embeddings: Vec<Vec<f64>>,
    pub params: Vec<f64>,
}

impl ToyGenerator {
    /// Zero parameters; token embeddings are standard normal scaled by
    /// `1/sqrt(embed_dim)`, drawn from `seed`.
    pub fn new(
        vocab: usize,
        answer_len: usize,
        query_dim: usize,
        evidence_dim: usize,
        embed_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if vocab == 0 || answer_len == 0 || embed_dim == 0 {
            return Err(Error::config("vocab, answer_len and embed_dim must be positive"));
        }
        let mut rng = seeded_rng(seed);
        let scale = 1.0 / (embed_dim as f64).sqrt();
        let token_embeddings = (0..vocab)
            .map(|_| {
                (0..embed_dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        scale * z
                    })
                    .collect::<Vec<f64>>()
            })
            .collect();
        let cond = query_dim + evidence_dim + 1;
        Ok(Self {
            vocab,
            answer_len,
            query_dim,
            evidence_dim,
            token_embeddings,
            params: vec![0.0; answer_len * vocab * cond + vocab * vocab],
        })
    }

    pub fn cond_dim(&self) -> usize {
        self.query_dim + self.evidence_dim + 1
    }

    pub fn embed_dim(&self) -> usize {
        self.token_embeddings[0].len()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn transition_offset(&self) -> usize {
        self.answer_len * self.vocab * self.cond_dim()
    }

    /// `[query features ; evidence ; 1]`.
    pub fn condition(&self, query: &Query, evidence: &[f64]) -> Result<Vec<f64>> {
        let q = query.visual_features.len() + query.text_features.len();
        if q != self.query_dim || evidence.len() != self.evidence_dim {
            return Err(Error::config(format!(
                "generator expects {}+{} condition features, got {}+{}",
                self.query_dim,
                self.evidence_dim,
                q,
                evidence.len()
            )));
        }
        let mut c = query.concat_features();
        c.extend_from_slice(evidence);
        c.push(1.0);
        Ok(c)
    }

    fn logits(&self, cond: &[f64], t: usize, prev: Option<usize>) -> Vec<f64> {
        let d = self.cond_dim();
        let block = &self.params[t * self.vocab * d..(t + 1) * self.vocab * d];
        let mut out: Vec<f64> = block
            .chunks_exact(d)
            .map(|row| row.iter().zip(cond).map(|(w, c)| w * c).sum())
            .collect();
        if let Some(p) = prev {
            let off = self.transition_offset();
            for (v, o) in out.iter_mut().enumerate() {
                *o += self.params[off + v * self.vocab + p];
            }
        }
        out
    }

    /// Per-position distributions with the given previous tokens (teacher
    /// forcing when `prev` comes from the reference answer).
    fn forward(&self, cond: &[f64], prev: &[usize], len: usize) -> Vec<Vec<f64>> {
        (0..len)
            .map(|t| {
                let p = if t == 0 { None } else { Some(prev[t - 1]) };
                softmax(&self.logits(cond, t, p))
            })
            .collect()
    }

    /// Probability-weighted mean token embedding.
    fn expected_embedding(&self, probs: &[f64]) -> Vec<f64> {
        let mut e = vec![0.0; self.embed_dim()];
        for (p, emb) in probs.iter().zip(&self.token_embeddings) {
            e.iter_mut().zip(emb).for_each(|(a, b)| *a += p * b);
        }
        e
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Mean of the evidence tangents, or zeros when there is none.
pub fn evidence_summary(dim: usize, d_rel: &[Vec<f64>], triplets: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; dim];
    let mut count = 0;
    for v in d_rel.iter().chain(triplets) {
        if v.len() != dim {
            return Err(Error::config(format!("evidence vector of length {} expected {dim}", v.len())));
        }
        out.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        count += 1;
    }
    if count > 0 {
        out.iter_mut().for_each(|a| *a /= count as f64);
    }
    Ok(out)
}

/// Greedy decoding of up to `min(max_len, answer_len)` tokens; ties go to
/// the lowest token index.
pub fn generate(
    gen: &ToyGenerator,
    query: &Query,
    d_rel: &[Vec<f64>],
    subgraph_triplets: &[Vec<f64>],
    max_len: usize,
) -> Result<(TokenSequence, TokenDistributionSequence)> {
    if max_len == 0 {
        return Err(Error::contract("max_len must be at least 1"));
    }
    let evidence = evidence_summary(gen.evidence_dim, d_rel, subgraph_triplets)?;
    decode(gen, &gen.condition(query, &evidence)?, max_len)
}

/// Greedy decoding from a ready condition vector.
pub fn decode(
    gen: &ToyGenerator,
    cond: &[f64],
    max_len: usize,
) -> Result<(TokenSequence, TokenDistributionSequence)> {
    let len = max_len.min(gen.answer_len);
    let mut tokens = Vec::with_capacity(len);
    let mut rows = Vec::with_capacity(len);
    for t in 0..len {
        let probs = softmax(&gen.logits(cond, t, tokens.last().copied()));
        let mut best = 0;
        for (v, p) in probs.iter().enumerate() {
            if *p > probs[best] {
                best = v;
            }
        }
        tokens.push(best);
        rows.push(probs);
    }
    Ok((
        TokenSequence::new(tokens, gen.vocab)?,
        TokenDistributionSequence::new(rows)?,
    ))
}

/// How the transport term is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TransportMode {
    /// Exact W2 when the combined support is at most `exact_max`, entropic
    /// beyond.
    Auto { exact_max: usize, epsilon: f64 },
    /// Always `sqrt` of the entropic objective; smooth in the generator.
    Entropic { epsilon: f64 },
}

impl Default for TransportMode {
    fn default() -> Self {
        TransportMode::Auto {
            exact_max: transport::EXACT_SUPPORT_LIMIT,
            epsilon: 0.01,
        }
    }
}

/// `(value, plan)` of the transport term between predicted and reference
/// embeddings.
fn transport_term(
    predicted: &[Vec<f64>],
    reference: &[Vec<f64>],
    mode: TransportMode,
) -> Result<(f64, TransportPlan, f64)> {
    let p = EmpiricalDistribution::uniform(predicted.to_vec())?;
    let q = EmpiricalDistribution::uniform(reference.to_vec())?;
    match mode {
        TransportMode::Auto { exact_max, epsilon } => {
            if p.len() + q.len() <= exact_max.min(transport::EXACT_SUPPORT_LIMIT) {
                let (w, plan) = transport::wasserstein2_exact(&p, &q)?;
                Ok((w, plan, w * w))
            } else {
                entropic_term(&p, &q, epsilon)
            }
        }
        TransportMode::Entropic { epsilon } => entropic_term(&p, &q, epsilon),
    }
}

fn entropic_term(
    p: &EmpiricalDistribution,
    q: &EmpiricalDistribution,
    epsilon: f64,
) -> Result<(f64, TransportPlan, f64)> {
    let r = transport::wasserstein2_sinkhorn(p, q, epsilon, 10_000)?;
    let obj = r.objective.max(0.0);
    Ok((obj.sqrt(), r.plan, obj))
}

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenExample {
    pub query: Query,
    /// Evidence summary, length `evidence_dim`.
    pub evidence: Vec<f64>,
    pub answer: TokenSequence,
}

/// Loss components for one example or a batch mean.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GenLossParts {
    pub local: f64,
    pub global: f64,
    pub total: f64,
}

/// Teacher-forced loss of one example; when `grad` is given, adds
/// `scale * d(total)/d(params)` to it.
pub fn example_loss(
    gen: &ToyGenerator,
    cond: &[f64],
    answer: &TokenSequence,
    alpha: f64,
    mode: TransportMode,
    grad: Option<(&mut [f64], f64)>,
) -> Result<GenLossParts> {
    check_alpha(alpha)?;
    let y = answer.tokens();
    if y.len() != gen.answer_len {
        return Err(Error::contract(format!(
            "answer has {} tokens, generator emits {}",
            y.len(),
            gen.answer_len
        )));
    }
    if let Some(bad) = y.iter().find(|&&t| t >= gen.vocab) {
        return Err(Error::contract(format!("token {bad} outside vocabulary")));
    }
    let probs = gen.forward(cond, y, y.len());
    let local: f64 = probs.iter().zip(y).map(|(p, &t)| -p[t].max(PROB_CLAMP).ln()).sum();
    let predicted: Vec<Vec<f64>> = probs.iter().map(|p| gen.expected_embedding(p)).collect();
    let reference: Vec<Vec<f64>> = y.iter().map(|&t| gen.token_embeddings[t].clone()).collect();
    let (global, plan, squared) = transport_term(&predicted, &reference, mode)?;
    let total = alpha * local + (1.0 - alpha) * global;

    if let Some((grad, scale)) = grad {
        let d = gen.cond_dim();
        let v = gen.vocab;
        let off = gen.transition_offset();
        // d global / d squared
        let outer = if squared > 1e-24 { 0.5 / squared.sqrt() } else { 0.0 };
        for t in 0..y.len() {
            let p = &probs[t];
            let mut dlogit = vec![0.0; v];
            // cross-entropy: p - onehot, unless the clamp is active
            if p[y[t]] > PROB_CLAMP {
                for (k, dl) in dlogit.iter_mut().enumerate() {
                    *dl += alpha * (p[k] - if k == y[t] { 1.0 } else { 0.0 });
                }
            }
            if outer > 0.0 {
                // d squared / d e_t = 2 sum_k pi_tk (e_t - r_k)
                let mut ge = vec![0.0; gen.embed_dim()];
                for (k, r) in reference.iter().enumerate() {
                    let pi = plan.get(t, k);
                    for ((g, e), rv) in ge.iter_mut().zip(&predicted[t]).zip(r) {
                        *g += 2.0 * pi * (e - rv);
                    }
                }
                let dp: Vec<f64> = gen
                    .token_embeddings
                    .iter()
                    .map(|emb| emb.iter().zip(&ge).map(|(a, b)| a * b).sum::<f64>())
                    .collect();
                let mean: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                let w = (1.0 - alpha) * outer;
                for k in 0..v {
                    dlogit[k] += w * p[k] * (dp[k] - mean);
                }
            }
            let block = t * v * d;
            for (k, dl) in dlogit.iter().enumerate() {
                if *dl == 0.0 {
                    continue;
                }
                let row = &mut grad[block + k * d..block + (k + 1) * d];
                row.iter_mut().zip(cond).for_each(|(g, c)| *g += scale * dl * c);
                if t > 0 {
                    grad[off + k * v + y[t - 1]] += scale * dl;
                }
            }
        }
    }
    Ok(GenLossParts { local, global, total })
}

/// Batch means of the loss components (no dropout).
pub fn dataset_loss(
    gen: &ToyGenerator,
    data: &[GenExample],
    alpha: f64,
    mode: TransportMode,
) -> Result<GenLossParts> {
    if data.is_empty() {
        return Err(Error::contract("empty generation dataset"));
    }
    let mut acc = GenLossParts::default();
    for ex in data {
        let cond = gen.condition(&ex.query, &ex.evidence)?;
        let parts = example_loss(gen, &cond, &ex.answer, alpha, mode, None)?;
        acc.local += parts.local;
        acc.global += parts.global;
        acc.total += parts.total;
    }
    let n = data.len() as f64;
    Ok(GenLossParts {
        local: acc.local / n,
        global: acc.global / n,
        total: acc.total / n,
    })
}

/// Fraction of examples whose greedy decode equals the reference.
pub fn exact_match(gen: &ToyGenerator, data: &[GenExample]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for ex in data {
        let cond = gen.condition(&ex.query, &ex.evidence)?;
        let (tokens, _) = decode(gen, &cond, gen.answer_len)?;
        if tokens == ex.answer {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub alpha: f64,
    pub dropout_t_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub transport: TransportMode,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            dropout_t_decay: 100.0,
            epochs: 20,
            batch_size: 32,
            lr: 1e-2,
            weight_decay: 0.0,
            seed: 0,
            transport: TransportMode::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenEpoch {
    pub epoch: usize,
    pub local: f64,
    pub global: f64,
    pub total: f64,
    /// Dropout probability used at the last step of the epoch.
    pub dropout: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenTrace {
    /// Epoch 0 is the untrained generator.
    pub epochs: Vec<GenEpoch>,
    /// Dropout probability at every optimizer step, indexed by step.
    pub dropout_schedule: Vec<f64>,
}

/// Seed for the dropout mask of one example at one step.
pub fn dropout_seed(seed: u64, step: u64, index: u64) -> u64 {
    seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
}

/// Mini-batch AdamW on the blended loss with query dropout. Step `t`
/// (counted from 0) masks with probability `0.5 * exp(-t / T_decay)`.
pub fn train_generation(
    mut gen: ToyGenerator,
    data: &[GenExample],
    config: &GenConfig,
) -> Result<(ToyGenerator, GenTrace)> {
    if data.is_empty() {
        return Err(Error::contract("train_generation: empty dataset"));
    }
    check_alpha(config.alpha)?;
    if config.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    query_dropout_prob(0, config.dropout_t_decay)?;
    let mut opt = AdamW::new(
        AdamWConfig::with_lr(config.lr, config.weight_decay),
        gen.params.len(),
    )?;
    let mut rng = seeded_rng(config.seed ^ 0x6e6e_0001);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = GenTrace::default();
    let initial = dataset_loss(&gen, data, config.alpha, config.transport)?;
    trace.epochs.push(GenEpoch {
        epoch: 0,
        local: initial.local,
        global: initial.global,
        total: initial.total,
        dropout: query_dropout_prob(0, config.dropout_t_decay)?,
    });
    let mut step: u64 = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut p = 0.0;
        for chunk in order.chunks(config.batch_size) {
            p = query_dropout_prob(step, config.dropout_t_decay)?;
            trace.dropout_schedule.push(p);
            let mut grad = vec![0.0; gen.params.len()];
            let scale = 1.0 / chunk.len() as f64;
            let mut loss = 0.0;
            for &i in chunk {
                let ex = &data[i];
                let masked = apply_query_dropout(&ex.query, p, dropout_seed(config.seed, step, i as u64));
                let cond = gen.condition(&masked, &ex.evidence)?;
                let parts = example_loss(
                    &gen,
                    &cond,
                    &ex.answer,
                    config.alpha,
                    config.transport,
                    Some((&mut grad, scale)),
                )?;
                loss += parts.total * scale;
            }
            if !loss.is_finite() {
                return Err(Error::divergence(step as usize, format!("L_gen = {loss}")));
            }
            opt.step(&mut gen.params, &grad)?;
            step += 1;
        }
        if !gen.is_finite() {
            return Err(Error::divergence(step as usize, "non-finite generator weights"));
        }
        let parts = dataset_loss(&gen, data, config.alpha, config.transport)?;
        trace.epochs.push(GenEpoch {
            epoch,
            local: parts.local,
            global: parts.global,
            total: parts.total,
            dropout: p,
        });
    }
    Ok((gen, trace))
}

/// Question-answer pairs whose answers are a linear function of the query
/// features, so the generator can fit them exactly. Each position's token is
/// the argmax of a hidden random linear map; queries whose answer margins
/// fall below `0.5` are redrawn.
pub fn synthetic_qa(
    count: usize,
    vocab: usize,
    answer_len: usize,
    block_dim: usize,
    evidence_dim: usize,
    seed: u64,
) -> Result<Vec<GenExample>> {
    if vocab < 2 || answer_len == 0 || block_dim == 0 {
        return Err(Error::config("synthetic_qa needs vocab >= 2 and positive sizes"));
    }
    let mut rng = seeded_rng(seed);
    let qdim = 2 * block_dim;
    let teacher: Vec<Vec<f64>> = (0..answer_len * vocab)
        .map(|_| (0..qdim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > 1000 * count.max(1) {
            return Err(Error::Numerical {
                detail: "could not draw well-separated answers".into(),
                residual: f64::NAN,
            });
        }
        let features: Vec<f64> = (0..qdim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut tokens = Vec::with_capacity(answer_len);
        let mut ok = true;
        for t in 0..answer_len {
            let scores: Vec<f64> = (0..vocab)
                .map(|v| teacher[t * vocab + v].iter().zip(&features).map(|(a, b)| a * b).sum())
                .collect();
            let mut idx: Vec<usize> = (0..vocab).collect();
            idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
            if scores[idx[0]] - scores[idx[1]] < 0.5 {
                ok = false;
                break;
            }
            tokens.push(idx[0]);
        }
        if !ok {
            continue;
        }
        let evidence: Vec<f64> = (0..evidence_dim).map(|_| rng.random_range(-0.1..0.1)).collect();
        out.push(GenExample {
            query: Query {
                id: format!("qa{}", out.len()),
                visual_features: features[..block_dim].to_vec(),
                text_features: features[block_dim..].to_vec(),
            },
            evidence,
            answer: TokenSequence::new(tokens, vocab)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(dim: usize) -> Query {
        Query {
            id: "q".into(),
            visual_features: vec![1.0; dim],
            text_features: vec![2.0; dim],
        }
    }

    #[test]
    fn local_loss_examples() {
        let uniform = TokenDistributionSequence::new(vec![vec![0.25; 4]; 3]).unwrap();
        let target = TokenSequence::new(vec![0, 3, 1], 4).unwrap();
        assert!((local_loss(&uniform, &target).unwrap() - 3.0 * 4f64.ln()).abs() < 1e-12);
        let exact = TokenDistributionSequence::new(vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
            vec![0.0, 1.0, 0.0, 0.0],
        ])
        .unwrap();
        assert_eq!(local_loss(&exact, &target).unwrap(), 0.0);
        let short = TokenSequence::new(vec![0], 4).unwrap();
        assert!(matches!(local_loss(&uniform, &short), Err(Error::Contract(_))));
        assert!(TokenDistributionSequence::new(vec![vec![0.5, 0.4]]).is_err());
    }

    #[test]
    fn gen_loss_examples() {
        assert!((gen_loss(1.0, 0.0, 0.7).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(gen_loss(2.5, 2.5, 0.3).unwrap(), 2.5);
        assert!(gen_loss(1.0, 1.0, 1.0).is_err());
        assert!(gen_loss(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn dropout_schedule() {
        assert_eq!(query_dropout_prob(0, 100.0).unwrap(), 0.5);
        assert!((query_dropout_prob(100, 100.0).unwrap() - 0.5 / std::f64::consts::E).abs() < 1e-12);
        assert!(query_dropout_prob(5, 100.0).unwrap() > query_dropout_prob(6, 100.0).unwrap());
        assert!(query_dropout_prob(1, 0.0).is_err());
    }

    #[test]
    fn dropout_extremes() {
        let query = q(3);
        assert_eq!(apply_query_dropout(&query, 0.0, 9), query);
        let all = apply_query_dropout(&query, 1.0, 9);
        assert!(all.visual_features.iter().chain(&all.text_features).all(|v| *v == 0.0));
        assert_eq!(apply_query_dropout(&query, 0.4, 5), apply_query_dropout(&query, 0.4, 5));
    }

    #[test]
    fn zero_generator_is_uniform_and_emits_token_zero() {
        let gen = ToyGenerator::new(5, 3, 4, 2, 3, 1).unwrap();
        let (tokens, dists) = generate(&gen, &q(2), &[vec![0.5, 0.5]], &[], 10).unwrap();
        assert_eq!(tokens.tokens(), &[0, 0, 0]);
        for row in dists.rows() {
            for p in row {
                assert!((p - 0.2).abs() < 1e-15);
            }
        }
        assert!(generate(&gen, &q(2), &[], &[], 0).is_err());
    }

    fn random_generator(seed: u64) -> ToyGenerator {
        let mut gen = ToyGenerator::new(4, 3, 4, 2, 3, seed).unwrap();
        let mut rng = seeded_rng(seed + 1);
        gen.params.iter_mut().for_each(|p| *p = rng.random_range(-0.5..0.5));
        gen
    }

    fn check_gradient(mode: TransportMode, alpha: f64, tol: f64) {
        let gen = random_generator(3);
        let cond = gen.condition(&q(2), &[0.3, -0.1]).unwrap();
        let answer = TokenSequence::new(vec![1, 3, 0], 4).unwrap();
        let mut grad = vec![0.0; gen.params.len()];
        example_loss(&gen, &cond, &answer, alpha, mode, Some((&mut grad, 1.0))).unwrap();
        let h = 1e-5;
        for i in 0..gen.params.len() {
            let mut g = gen.clone();
            g.params[i] += h;
            let up = example_loss(&g, &cond, &answer, alpha, mode, None).unwrap().total;
            g.params[i] -= 2.0 * h;
            let down = example_loss(&g, &cond, &answer, alpha, mode, None).unwrap().total;
            let fd = (up - down) / (2.0 * h);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-3);
            assert!(err < tol, "param {i}: fd {fd} analytic {}", grad[i]);
        }
    }

    #[test]
    fn gradient_local_only_limit() {
        check_gradient(TransportMode::default(), 0.999_999, 1e-5);
    }

    #[test]
    fn gradient_entropic_transport() {
        check_gradient(TransportMode::Entropic { epsilon: 0.05 }, 0.3, 1e-3);
    }

    #[test]
    fn gradient_exact_transport() {
        check_gradient(TransportMode::default(), 0.5, 1e-4);
    }

    #[test]
    fn synthetic_qa_is_deterministic() {
        let a = synthetic_qa(10, 8, 3, 4, 2, 7).unwrap();
        assert_eq!(a, synthetic_qa(10, 8, 3, 4, 2, 7).unwrap());
        assert_eq!(a.len(), 10);
    }
}
