//! Retrieval gating: answer confidence against a threshold, a learned
//! relevance head over `(query, document)` pairs and its contrastive
//! training loop.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{KnowledgeItem, Query};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::scorer::{Candidate, Scorer};
use crate::{seeded_rng, sigmoid};

/// Probabilities are clamped to this before taking logarithms.
pub const LOG_CLAMP: f64 = 1e-12;

/// Softmax over the raw candidate scores; returns the largest probability.
pub fn confidence<S: Scorer + ?Sized>(
    scorer: &S,
    query: &Query,
    candidates: &[Candidate<'_>],
) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::contract("confidence needs at least one candidate answer"));
    }
    let scores = candidates
        .iter()
        .map(|c| scorer.score(query, c))
        .collect::<Result<Vec<f64>>>()?;
    max_softmax(&scores)
}

/// Largest softmax probability of `scores`.
pub fn max_softmax(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::contract("softmax of an empty score list"));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Scorer {
            id: "candidate".into(),
            detail: format!("non-finite score {bad}"),
        });
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    Ok(1.0 / denom)
}

/// `true` means retrieve (δ = 1). Retrieval is skipped only when `sigma`
/// strictly exceeds `theta`.
pub fn decide(sigma: f64, theta: f64) -> bool {
    !(sigma > theta)
}

/// Output of the gate for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalDecision {
    pub sigma: f64,
    pub theta: f64,
    /// δ: whether retrieval runs.
    pub delta: bool,
    /// Retained document ids with their relevance, in input order.
    pub relevant: Vec<(String, f64)>,
}

/// Two-layer tanh network over `[query features ; item features]` producing
/// one raw score. Parameters live in one flat vector:
/// `W1 (hidden x input, row-major) | b1 | w2 | b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceHead {
    pub query_dim: usize,
    pub item_dim: usize,
    pub hidden: usize,
    pub params: Vec<f64>,
}

impl RelevanceHead {
    pub fn zeros(query_dim: usize, item_dim: usize, hidden: usize) -> Self {
        let len = Self::param_len(query_dim + item_dim, hidden);
        Self {
            query_dim,
            item_dim,
            hidden,
            params: vec![0.0; len],
        }
    }

    /// Uniform `±1/sqrt(fan_in)` weights, zero biases.
    pub fn random(query_dim: usize, item_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut head = Self::zeros(query_dim, item_dim, hidden);
        let mut rng = seeded_rng(seed);
        let input = head.input_dim();
        let b1 = 1.0 / (input.max(1) as f64).sqrt();
        for w in &mut head.params[..hidden * input] {
            *w = rng.random_range(-b1..=b1);
        }
        let b2 = 1.0 / (hidden.max(1) as f64).sqrt();
        let start = hidden * input + hidden;
        for w in &mut head.params[start..start + hidden] {
            *w = rng.random_range(-b2..=b2);
        }
        head
    }

    fn param_len(input: usize, hidden: usize) -> usize {
        hidden * input + 2 * hidden + 1
    }

    pub fn input_dim(&self) -> usize {
        self.query_dim + self.item_dim
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn input(&self, query: &Query, item: &[f64]) -> Result<Vec<f64>> {
        let q = query.visual_features.len() + query.text_features.len();
        if q != self.query_dim || item.len() != self.item_dim {
            return Err(Error::config(format!(
                "relevance head expects {}+{} features, got {}+{}",
                self.query_dim,
                self.item_dim,
                q,
                item.len()
            )));
        }
        let mut x = query.concat_features();
        x.extend_from_slice(item);
        Ok(x)
    }

    fn hidden_activations(&self, x: &[f64]) -> Vec<f64> {
        let d = self.input_dim();
        let (w1, rest) = self.params.split_at(self.hidden * d);
        let b1 = &rest[..self.hidden];
        w1.chunks_exact(d)
            .zip(b1)
            .map(|(row, b)| (row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b).tanh())
            .collect()
    }

    fn output(&self, h: &[f64]) -> f64 {
        let start = self.hidden * self.input_dim() + self.hidden;
        let w2 = &self.params[start..start + self.hidden];
        let b2 = self.params[start + self.hidden];
        w2.iter().zip(h).map(|(w, v)| w * v).sum::<f64>() + b2
    }

    /// Raw (pre-sigmoid) score for `item_features`.
    pub fn raw_score(&self, query: &Query, item_features: &[f64]) -> Result<f64> {
        let x = self.input(query, item_features)?;
        let h = self.hidden_activations(&x);
        Ok(self.output(&h))
    }

    /// Adds `scale * d(raw score)/d(params)` to `grad`, given the hidden
    /// activations `h` for input `x`.
    fn accumulate_score_grad(&self, x: &[f64], h: &[f64], scale: f64, grad: &mut [f64]) {
        let d = self.input_dim();
        let hdim = self.hidden;
        let w2_start = hdim * d + hdim;
        for j in 0..hdim {
            let w2 = self.params[w2_start + j];
            let pre = scale * w2 * (1.0 - h[j] * h[j]);
            if pre != 0.0 {
                let row = &mut grad[j * d..(j + 1) * d];
                row.iter_mut().zip(x).for_each(|(g, v)| *g += pre * v);
                grad[hdim * d + j] += pre;
            }
            grad[w2_start + j] += scale * h[j];
        }
        grad[w2_start + hdim] += scale;
    }
}

/// The head's raw score, so a trained head can drive
/// [`crate::spectral::relevance_vector`].
impl Scorer for RelevanceHead {
    fn score(&self, query: &Query, candidate: &Candidate<'_>) -> Result<f64> {
        self.raw_score(query, candidate.features)
    }
}

/// Sigmoid of the head's raw score.
pub fn relevance(head: &RelevanceHead, query: &Query, doc: &KnowledgeItem) -> Result<f64> {
    Ok(sigmoid(head.raw_score(query, &doc.features)?))
}

/// Documents with relevance strictly above 0.5, in input order.
pub fn filter_relevant<'d>(
    head: &RelevanceHead,
    query: &Query,
    docs: &[&'d KnowledgeItem],
) -> Result<Vec<(&'d KnowledgeItem, f64)>> {
    let mut kept = Vec::new();
    for &doc in docs {
        let r = relevance(head, query, doc)?;
        if r > 0.5 {
            kept.push((doc, r));
        }
    }
    Ok(kept)
}

/// One query with labelled documents.
#[derive(Debug, Clone)]
pub struct CrmExample<'a> {
    pub query: &'a Query,
    pub positives: Vec<&'a KnowledgeItem>,
    pub negatives: Vec<&'a KnowledgeItem>,
}

/// `-log(max(sigmoid(s), 1e-12))`, computed without forming the sigmoid.
fn neg_log_sigmoid(s: f64) -> f64 {
    // softplus(-s)
    let sp = if s > 0.0 {
        (-s).exp().ln_1p()
    } else {
        -s + s.exp().ln_1p()
    };
    sp.min(-LOG_CLAMP.ln())
}

/// Loss and d(loss)/d(score) for one labelled score; the derivative is zero
/// where the clamp is active.
fn labelled_term(s: f64, positive: bool) -> (f64, f64) {
    let signed = if positive { s } else { -s };
    let loss = neg_log_sigmoid(signed);
    let clamped = loss >= -LOG_CLAMP.ln();
    let d = if clamped {
        0.0
    } else {
        -(1.0 - sigmoid(signed))
    };
    (loss, if positive { d } else { -d })
}

fn check_example(ex: &CrmExample<'_>) -> Result<()> {
    if ex.positives.is_empty() && ex.negatives.is_empty() {
        return Err(Error::contract(format!(
            "query {} has neither positives nor negatives",
            ex.query.id
        )));
    }
    Ok(())
}

fn labelled<'e>(ex: &'e CrmExample<'_>) -> impl Iterator<Item = (&'e KnowledgeItem, bool)> {
    ex.positives
        .iter()
        .map(|d| (*d, true))
        .chain(ex.negatives.iter().map(|d| (*d, false)))
}

/// Summed negative log-likelihood of the labels.
pub fn crm_loss(head: &RelevanceHead, batch: &[CrmExample<'_>]) -> Result<f64> {
    let mut total = 0.0;
    for ex in batch {
        check_example(ex)?;
        for (doc, positive) in labelled(ex) {
            let s = head.raw_score(ex.query, &doc.features)?;
            total += labelled_term(s, positive).0;
        }
    }
    Ok(total)
}

/// [`crm_loss`] and its gradient with respect to `head.params`.
pub fn crm_loss_grad(head: &RelevanceHead, batch: &[CrmExample<'_>]) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; head.params.len()];
    let total = accumulate_crm_grad(head, batch, 1.0, &mut grad)?;
    Ok((total, grad))
}

/// Adds `scale * d(crm_loss)/d(params)` to `grad`; returns the loss.
pub fn accumulate_crm_grad(
    head: &RelevanceHead,
    batch: &[CrmExample<'_>],
    scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let mut total = 0.0;
    for ex in batch {
        check_example(ex)?;
        for (doc, positive) in labelled(ex) {
            let x = head.input(ex.query, &doc.features)?;
            let h = head.hidden_activations(&x);
            let (loss, ds) = labelled_term(head.output(&h), positive);
            total += loss;
            if ds != 0.0 {
                head.accumulate_score_grad(&x, &h, scale * ds, grad);
            }
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrmConfig {
    pub hidden: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CrmConfig {
    fn default() -> Self {
        Self {
            hidden: 512,
            lr: 1e-3,
            weight_decay: 1e-2,
            epochs: 50,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Held-out gating supervision: `(sigma, needs_retrieval)`.
pub type GatingSample = (f64, bool);

/// Fraction of samples where [`decide`] agrees with the label.
pub fn gating_accuracy(samples: &[GatingSample], theta: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let correct = samples
        .iter()
        .filter(|(sigma, needs)| decide(*sigma, theta) == *needs)
        .count();
    correct as f64 / samples.len() as f64
}

/// Grid search over `{0.00, 0.01, ..., 1.00}` for the most accurate
/// threshold. Among equally accurate values the first maximal run of grid
/// points wins, and its midpoint (rounded down to the grid) is returned.
pub fn fit_threshold(samples: &[GatingSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("fit_threshold: no gating samples"));
    }
    let acc: Vec<f64> = (0..=100)
        .map(|i| gating_accuracy(samples, i as f64 / 100.0))
        .collect();
    let best = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let start = acc.iter().position(|&a| a == best).unwrap_or(0);
    let end = start + acc[start..].iter().take_while(|&&a| a == best).count() - 1;
    Ok(((start + end) / 2) as f64 / 100.0)
}

/// Mini-batch AdamW on [`crm_loss`] followed by threshold fitting.
/// Returns the head, θ and the full-set loss before training and after each
/// epoch.
pub fn train_crm(
    mut head: RelevanceHead,
    examples: &[CrmExample<'_>],
    gating: &[GatingSample],
    config: &CrmConfig,
) -> Result<(RelevanceHead, f64, Vec<f64>)> {
    if examples.is_empty() {
        return Err(Error::contract("train_crm: no labelled queries"));
    }
    let has_pos = examples.iter().any(|e| !e.positives.is_empty());
    let has_neg = examples.iter().any(|e| !e.negatives.is_empty());
    if !has_pos || !has_neg {
        return Err(Error::contract("train_crm needs both positive and negative labels"));
    }
    if config.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let mut opt = AdamW::new(
        AdamWConfig::with_lr(config.lr, config.weight_decay),
        head.params.len(),
    )?;
    let mut rng = seeded_rng(config.seed ^ 0xc0ff_ee00);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let initial = crm_loss(&head, examples)?;
    if !initial.is_finite() {
        return Err(Error::divergence(0, format!("L_CRM = {initial}")));
    }
    let mut trace = vec![initial];
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let batch: Vec<CrmExample<'_>> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let (loss, grad) = crm_loss_grad(&head, &batch)?;
            if !loss.is_finite() {
                return Err(Error::divergence(step, format!("L_CRM = {loss}")));
            }
            opt.step(&mut head.params, &grad)?;
        }
        let loss = crm_loss(&head, examples)?;
        if !loss.is_finite() || !head.is_finite() {
            return Err(Error::divergence(step, format!("L_CRM = {loss}")));
        }
        trace.push(loss);
    }
    let theta = if gating.is_empty() {
        0.5
    } else {
        fit_threshold(gating)?
    };
    Ok((head, theta, trace))
}
