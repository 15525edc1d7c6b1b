//! Hyperbolic embedding tables and geodesic alignment.
//!
//! Each modality (and the query side) gets its own affine map from raw
//! features to space-like coordinates, lifted onto the hyperboloid. Training
//! minimizes the mean geodesic distance between a query and its positives.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lorentz::{self, geodesic_distance, LorentzPoint};
use crate::seeded_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visual,
    Textual,
    GraphTriplet,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Visual, Modality::Textual, Modality::GraphTriplet];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Textual => "textual",
            Modality::GraphTriplet => "graph_triplet",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visual" => Ok(Modality::Visual),
            "textual" => Ok(Modality::Textual),
            "graph_triplet" | "graph" => Ok(Modality::GraphTriplet),
            other => Err(Error::config(format!("unknown modality {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeItem {
    pub id: String,
    pub modality: Modality,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub visual_features: Vec<f64>,
    pub text_features: Vec<f64>,
}

impl Query {
    /// `[visual ; text]`, the input of the query encoder.
    pub fn concat_features(&self) -> Vec<f64> {
        let mut out = self.visual_features.clone();
        out.extend_from_slice(&self.text_features);
        out
    }
}

/// Which affine map of the table to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Encoder {
    Item(Modality),
    Query,
}

/// `x -> W x + b`, weights stored row-major (`out_dim` rows).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AffineMap {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Entries uniform in `±1/sqrt(in_dim)`, zero bias.
    pub fn random<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weights
            .chunks_exact(self.in_dim.max(1))
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .take(self.out_dim)
            .collect()
    }

    /// Spectral norm via power iteration on `W^T W`; the Lipschitz constant
    /// of the map.
    pub fn operator_norm(&self) -> f64 {
        if self.in_dim == 0 || self.out_dim == 0 {
            return 0.0;
        }
        let mut v = vec![1.0 / (self.in_dim as f64).sqrt(); self.in_dim];
        let mut sigma = 0.0;
        for _ in 0..500 {
            let wv: Vec<f64> = self
                .weights
                .chunks_exact(self.in_dim)
                .map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum())
                .collect();
            let mut wtwv = vec![0.0; self.in_dim];
            for (row, s) in self.weights.chunks_exact(self.in_dim).zip(&wv) {
                for (acc, w) in wtwv.iter_mut().zip(row) {
                    *acc += w * s;
                }
            }
            let norm = wtwv.iter().map(|c| c * c).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            let next = norm.sqrt();
            v = wtwv.into_iter().map(|c| c / norm).collect();
            if (next - sigma).abs() <= 1e-13 * next {
                return next;
            }
            sigma = next;
        }
        sigma
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    /// Adds `g_space ⊗ x` into a gradient buffer of the same shape.
    fn accumulate(&self, grad: &mut AffineMap, x: &[f64], g_space: &[f64], scale: f64) {
        for (row, (g, gb)) in grad
            .weights
            .chunks_exact_mut(self.in_dim.max(1))
            .zip(g_space.iter().zip(grad.bias.iter_mut()))
        {
            let gs = g * scale;
            *gb += gs;
            for (w, xv) in row.iter_mut().zip(x) {
                *w += gs * xv;
            }
        }
    }

    fn axpy(&mut self, alpha: f64, other: &AffineMap) {
        for (w, g) in self.weights.iter_mut().zip(&other.weights) {
            *w += alpha * g;
        }
        for (b, g) in self.bias.iter_mut().zip(&other.bias) {
            *b += alpha * g;
        }
    }

    fn norm_sq(&self) -> f64 {
        self.weights.iter().chain(&self.bias).map(|v| v * v).sum()
    }
}

/// One affine encoder per item modality plus one for queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub maps: BTreeMap<Modality, AffineMap>,
    pub query: AffineMap,
}

/// Input feature dimensions of each encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub visual: usize,
    pub textual: usize,
    pub graph: usize,
    pub query: usize,
}

impl EmbeddingTable {
    pub fn zeros(dims: EncoderDims, n: usize) -> Self {
        let mut maps = BTreeMap::new();
        maps.insert(Modality::Visual, AffineMap::zeros(dims.visual, n));
        maps.insert(Modality::Textual, AffineMap::zeros(dims.textual, n));
        maps.insert(Modality::GraphTriplet, AffineMap::zeros(dims.graph, n));
        Self {
            dim: n,
            maps,
            query: AffineMap::zeros(dims.query, n),
        }
    }

    pub fn random(dims: EncoderDims, n: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut maps = BTreeMap::new();
        maps.insert(Modality::Visual, AffineMap::random(dims.visual, n, &mut rng));
        maps.insert(Modality::Textual, AffineMap::random(dims.textual, n, &mut rng));
        maps.insert(Modality::GraphTriplet, AffineMap::random(dims.graph, n, &mut rng));
        let query = AffineMap::random(dims.query, n, &mut rng);
        Self { dim: n, maps, query }
    }

    pub fn map(&self, encoder: Encoder) -> Result<&AffineMap> {
        match encoder {
            Encoder::Query => Ok(&self.query),
            Encoder::Item(m) => self
                .maps
                .get(&m)
                .ok_or_else(|| Error::config(format!("no encoder for modality {m}"))),
        }
    }

    fn map_mut(&mut self, encoder: Encoder) -> &mut AffineMap {
        match encoder {
            Encoder::Query => &mut self.query,
            Encoder::Item(m) => self.maps.get_mut(&m).expect("encoder present"),
        }
    }

    /// Encodes `features` and lifts the result onto `H^n`.
    pub fn embed(&self, features: &[f64], encoder: Encoder) -> Result<LorentzPoint> {
        let map = self.map(encoder)?;
        if features.len() != map.in_dim {
            return Err(Error::config(format!(
                "{encoder:?} expects {} features, got {}",
                map.in_dim,
                features.len()
            )));
        }
        lorentz::project_to_hyperboloid(&map.apply(features))
    }

    pub fn embed_item(&self, item: &KnowledgeItem) -> Result<LorentzPoint> {
        self.embed(&item.features, Encoder::Item(item.modality))
    }

    pub fn embed_query(&self, query: &Query) -> Result<LorentzPoint> {
        self.embed(&query.concat_features(), Encoder::Query)
    }

    pub fn is_finite(&self) -> bool {
        self.query.is_finite() && self.maps.values().all(AffineMap::is_finite)
    }

    /// Same shape, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            dim: self.dim,
            maps: self
                .maps
                .iter()
                .map(|(m, a)| (*m, AffineMap::zeros(a.in_dim, a.out_dim)))
                .collect(),
            query: AffineMap::zeros(self.query.in_dim, self.query.out_dim),
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &EmbeddingTable) {
        self.query.axpy(alpha, &other.query);
        for (m, map) in self.maps.iter_mut() {
            if let Some(g) = other.maps.get(m) {
                map.axpy(alpha, g);
            }
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.query.norm_sq() + self.maps.values().map(AffineMap::norm_sq).sum::<f64>()
    }

    /// Flattened parameters in a fixed order (query map, then modalities).
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for map in std::iter::once(&self.query).chain(self.maps.values()) {
            out.extend_from_slice(&map.weights);
            out.extend_from_slice(&map.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) {
        let mut offset = 0;
        for map in std::iter::once(&mut self.query).chain(self.maps.values_mut()) {
            let nw = map.weights.len();
            map.weights.copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = map.bias.len();
            map.bias.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
    }
}

/// One query with its positive knowledge items.
#[derive(Debug, Clone, Copy)]
pub struct AlignmentPair<'a> {
    pub query: &'a Query,
    pub positives: &'a [&'a KnowledgeItem],
}

/// Per-modality mean distance, summed over the modalities present.
fn pair_loss(
    table: &EmbeddingTable,
    pair: &AlignmentPair<'_>,
    mut grad: Option<(&mut EmbeddingTable, f64)>,
) -> Result<f64> {
    if pair.positives.is_empty() {
        return Err(Error::contract(format!("query {} has no positives", pair.query.id)));
    }
    let q_features = pair.query.concat_features();
    let q_point = table.embed(&q_features, Encoder::Query)?;
    let mut counts: BTreeMap<Modality, usize> = BTreeMap::new();
    for item in pair.positives {
        *counts.entry(item.modality).or_default() += 1;
    }
    let mut total = 0.0;
    let mut q_grad = vec![0.0; table.dim];
    for item in pair.positives {
        let encoder = Encoder::Item(item.modality);
        let point = table.embed(&item.features, encoder)?;
        let weight = 1.0 / counts[&item.modality] as f64;
        total += weight * geodesic_distance(&q_point, &point);
        if let Some((g, scale)) = grad.as_mut() {
            let gq = lorentz::distance_grad_space(&q_point, &point);
            let gi = lorentz::distance_grad_space(&point, &q_point);
            for (acc, v) in q_grad.iter_mut().zip(&gq) {
                *acc += weight * v;
            }
            let map = table.map(encoder)?;
            map.accumulate(g.map_mut(encoder), &item.features, &gi, weight * *scale);
        }
    }
    if let Some((g, scale)) = grad {
        table.query.accumulate(&mut g.query, &q_features, &q_grad, scale);
    }
    Ok(total)
}

/// Batch mean of the per-query alignment loss.
pub fn geo_loss(table: &EmbeddingTable, batch: &[AlignmentPair<'_>]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("geo_loss: empty batch"));
    }
    let mut sum = 0.0;
    for pair in batch {
        sum += pair_loss(table, pair, None)?;
    }
    Ok(sum / batch.len() as f64)
}

/// [`geo_loss`] together with its gradient with respect to every encoder
/// parameter.
pub fn geo_loss_grad(
    table: &EmbeddingTable,
    batch: &[AlignmentPair<'_>],
) -> Result<(f64, EmbeddingTable)> {
    if batch.is_empty() {
        return Err(Error::contract("geo_loss: empty batch"));
    }
    let mut grad = table.zeros_like();
    let scale = 1.0 / batch.len() as f64;
    let mut sum = 0.0;
    for pair in batch {
        sum += pair_loss(table, pair, Some((&mut grad, scale)))?;
    }
    Ok((sum * scale, grad))
}

/// Single-query loss with a weighted gradient accumulated into `grad`.
pub fn accumulate_pair_grad(
    table: &EmbeddingTable,
    pair: &AlignmentPair<'_>,
    grad: &mut EmbeddingTable,
    scale: f64,
) -> Result<f64> {
    pair_loss(table, pair, Some((grad, scale)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub dim: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Full-batch steps with backtracking instead of shuffled mini-batches;
    /// the loss trace is then non-increasing.
    pub line_search: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            lr: 1e-4,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            line_search: false,
        }
    }
}

/// Queries, items and the positive relation between them.
#[derive(Debug, Clone, Default)]
pub struct AlignmentCorpus {
    pub queries: Vec<Query>,
    pub items: Vec<KnowledgeItem>,
    /// `(query index, item index)` pairs.
    pub positives: Vec<(usize, usize)>,
}

impl AlignmentCorpus {
    pub fn encoder_dims(&self) -> Result<EncoderDims> {
        let query = self
            .queries
            .first()
            .map(|q| q.visual_features.len() + q.text_features.len())
            .ok_or_else(|| Error::contract("corpus has no queries"))?;
        let dim_of = |m: Modality| {
            self.items
                .iter()
                .find(|i| i.modality == m)
                .map(|i| i.features.len())
        };
        let any = self
            .items
            .first()
            .map(|i| i.features.len())
            .ok_or_else(|| Error::contract("corpus has no items"))?;
        Ok(EncoderDims {
            visual: dim_of(Modality::Visual).unwrap_or(any),
            textual: dim_of(Modality::Textual).unwrap_or(any),
            graph: dim_of(Modality::GraphTriplet).unwrap_or(any),
            query,
        })
    }

    /// Positive item references grouped per query, in query order; queries
    /// without positives are skipped.
    pub fn grouped(&self) -> Vec<(usize, Vec<&KnowledgeItem>)> {
        let mut per_query: BTreeMap<usize, Vec<&KnowledgeItem>> = BTreeMap::new();
        for &(q, i) in &self.positives {
            per_query.entry(q).or_default().push(&self.items[i]);
        }
        per_query.into_iter().collect()
    }
}

/// Mini-batch gradient descent on [`geo_loss`] starting from a seeded random
/// table. Returns the table and the full-corpus loss before training followed
/// by the loss after each epoch.
pub fn train_alignment(
    corpus: &AlignmentCorpus,
    config: &AlignConfig,
) -> Result<(EmbeddingTable, Vec<f64>)> {
    let table = EmbeddingTable::random(corpus.encoder_dims()?, config.dim, config.seed);
    train_alignment_from(table, corpus, config)
}

pub fn train_alignment_from(
    mut table: EmbeddingTable,
    corpus: &AlignmentCorpus,
    config: &AlignConfig,
) -> Result<(EmbeddingTable, Vec<f64>)> {
    if !(config.lr > 0.0) {
        return Err(Error::config("alignment lr must be positive"));
    }
    if config.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let grouped = corpus.grouped();
    if grouped.is_empty() {
        return Err(Error::contract("alignment corpus has no positive pairs"));
    }
    let pairs: Vec<AlignmentPair<'_>> = grouped
        .iter()
        .map(|(q, items)| AlignmentPair {
            query: &corpus.queries[*q],
            positives: items.as_slice(),
        })
        .collect();

    let mut rng = seeded_rng(config.seed ^ 0x5eed_a11e);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs + 1);
    let mut current = geo_loss(&table, &pairs)?;
    check_finite(current, 0)?;
    trace.push(current);
    let mut step = 0usize;
    let mut step_size = config.lr;

    for _epoch in 0..config.epochs {
        if config.line_search {
            step += 1;
            let (loss, grad) = geo_loss_grad(&table, &pairs)?;
            check_finite(loss, step)?;
            let g2 = grad.norm_sq();
            let mut accepted = false;
            let mut trial_size = step_size * 2.0;
            for _ in 0..60 {
                let mut trial = table.clone();
                trial.axpy(-trial_size, &grad);
                let trial_loss = geo_loss(&trial, &pairs)?;
                if trial_loss.is_finite() && trial_loss <= loss - 1e-4 * trial_size * g2 {
                    table = trial;
                    current = trial_loss;
                    step_size = trial_size;
                    accepted = true;
                    break;
                }
                trial_size *= 0.5;
            }
            if !accepted {
                current = loss;
            }
        } else {
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch_size) {
                step += 1;
                let batch: Vec<AlignmentPair<'_>> = chunk.iter().map(|&i| pairs[i]).collect();
                let (loss, grad) = geo_loss_grad(&table, &batch)?;
                check_finite(loss, step)?;
                table.axpy(-config.lr, &grad);
                if !table.is_finite() {
                    return Err(Error::divergence(step, "non-finite encoder weights"));
                }
            }
            current = geo_loss(&table, &pairs)?;
        }
        check_finite(current, step)?;
        trace.push(current);
    }
    Ok((table, trace))
}

fn check_finite(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::divergence(step, format!("geo_loss became {loss}")))
    }
}

/// Exhaustive top-k by ascending geodesic distance, ties by ascending id.
pub fn retrieve_topk<'c>(
    table: &EmbeddingTable,
    query: &Query,
    corpus: &'c [KnowledgeItem],
    k: usize,
) -> Result<Vec<(&'c KnowledgeItem, f64)>> {
    if corpus.is_empty() {
        return Err(Error::contract("retrieve_topk: empty corpus"));
    }
    if k > corpus.len() {
        return Err(Error::contract(format!(
            "retrieve_topk: k = {k} exceeds corpus size {}",
            corpus.len()
        )));
    }
    let q = table.embed_query(query)?;
    let points = corpus
        .iter()
        .map(|item| table.embed_item(item))
        .collect::<Result<Vec<_>>>()?;
    let ranked = rank_by_distance(&q, corpus, &points, k);
    Ok(ranked.into_iter().map(|(i, d)| (&corpus[i], d)).collect())
}

/// Ranks precomputed item embeddings; returns `(index, distance)`.
pub fn rank_by_distance(
    query: &LorentzPoint,
    items: &[KnowledgeItem],
    points: &[LorentzPoint],
    k: usize,
) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (i, geodesic_distance(query, p)))
        .collect();
    scored.sort_by(|a, b| {
        a.1.total_cmp(&b.1)
            .then_with(|| items[a.0].id.cmp(&items[b.0].id))
    });
    scored.truncate(k);
    scored
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn item(id: &str, modality: Modality, features: Vec<f64>) -> KnowledgeItem {
        KnowledgeItem {
            id: id.into(),
            modality,
            features,
        }
    }

    fn dims(d: usize) -> EncoderDims {
        EncoderDims {
            visual: d,
            textual: d,
            graph: d,
            query: 2 * d,
        }
    }

    /// Identity-like table: every encoder copies the first feature into the
    /// first space coordinate.
    fn copy_table() -> EmbeddingTable {
        let mut t = EmbeddingTable::zeros(dims(1), 2);
        for map in t.maps.values_mut() {
            map.weights[0] = 1.0;
        }
        t.query.weights[0] = 1.0;
        t
    }

    #[test]
    fn zero_table_embeds_to_origin() {
        let t = EmbeddingTable::zeros(dims(3), 4);
        let p = t.embed(&[1.0, -2.0, 5.0], Encoder::Item(Modality::Visual)).unwrap();
        assert_eq!(p, LorentzPoint::origin(4));
    }

    #[test]
    fn embed_checks_dimension_and_modality() {
        let t = EmbeddingTable::zeros(dims(3), 4);
        assert!(matches!(t.embed(&[1.0], Encoder::Query), Err(Error::Config(_))));
        assert!(matches!("audio".parse::<Modality>(), Err(Error::Config(_))));
    }

    #[test]
    fn geo_loss_single_pair_hand_value() {
        let t = copy_table();
        let q = Query {
            id: "q".into(),
            visual_features: vec![0.0],
            text_features: vec![0.0],
        };
        let v = item("v", Modality::Visual, vec![1.0]);
        let tx = item("t", Modality::Textual, vec![1.0]);
        let positives = [&v, &tx];
        let loss = geo_loss(&t, &[AlignmentPair { query: &q, positives: &positives }]).unwrap();
        let expected = 2.0 * 2f64.sqrt().acosh();
        assert_relative_eq!(loss, expected, epsilon = 1e-12);

        let only_visual = [&v];
        let loss = geo_loss(&t, &[AlignmentPair { query: &q, positives: &only_visual }]).unwrap();
        assert_relative_eq!(loss, expected / 2.0, epsilon = 1e-12);
        assert!(geo_loss(&t, &[]).is_err());
    }

    #[test]
    fn geo_loss_zero_when_coincident() {
        let t = copy_table();
        let q = Query {
            id: "q".into(),
            visual_features: vec![0.7],
            text_features: vec![0.0],
        };
        let v = item("v", Modality::Visual, vec![0.7]);
        let positives = [&v];
        assert_eq!(geo_loss(&t, &[AlignmentPair { query: &q, positives: &positives }]).unwrap(), 0.0);
    }

    #[test]
    fn geo_gradient_matches_finite_differences() {
        let table = EmbeddingTable::random(dims(3), 4, 9);
        let q = Query {
            id: "q".into(),
            visual_features: vec![0.3, -0.2, 0.9],
            text_features: vec![1.0, 0.1, -0.4],
        };
        let a = item("a", Modality::Visual, vec![0.5, 0.5, -1.0]);
        let b = item("b", Modality::Textual, vec![-0.3, 0.8, 0.2]);
        let c = item("c", Modality::Textual, vec![0.1, 0.0, 0.6]);
        let positives = [&a, &b, &c];
        let batch = [AlignmentPair { query: &q, positives: &positives }];
        let (_, grad) = geo_loss_grad(&table, &batch).unwrap();
        let analytic = grad.params();
        let base = table.params();
        let h = 1e-6;
        for i in 0..base.len() {
            let mut t = table.clone();
            let mut p = base.clone();
            p[i] += h;
            t.set_params(&p);
            let up = geo_loss(&t, &batch).unwrap();
            p[i] -= 2.0 * h;
            t.set_params(&p);
            let down = geo_loss(&t, &batch).unwrap();
            let fd = (up - down) / (2.0 * h);
            assert!((fd - analytic[i]).abs() <= 1e-6 + 1e-5 * fd.abs(), "param {i}: {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn optimal_table_trace_stays_zero() {
        let q = Query {
            id: "q0".into(),
            visual_features: vec![0.4],
            text_features: vec![0.0],
        };
        let corpus = AlignmentCorpus {
            queries: vec![q],
            items: vec![item("i0", Modality::Visual, vec![0.4])],
            positives: vec![(0, 0)],
        };
        let config = AlignConfig {
            dim: 2,
            lr: 0.1,
            epochs: 5,
            batch_size: 4,
            seed: 1,
            line_search: false,
        };
        let (_, trace) = train_alignment_from(copy_table(), &corpus, &config).unwrap();
        assert_eq!(trace, vec![0.0; 6]);
    }

    #[test]
    fn retrieve_edge_cases() {
        let t = copy_table();
        let q = Query {
            id: "q".into(),
            visual_features: vec![1.0],
            text_features: vec![0.0],
        };
        assert!(retrieve_topk(&t, &q, &[], 0).is_err());
        let corpus = vec![
            item("b", Modality::Visual, vec![2.0]),
            item("a", Modality::Visual, vec![0.0]),
            item("self", Modality::Textual, vec![1.0]),
        ];
        assert!(retrieve_topk(&t, &q, &corpus, 0).unwrap().is_empty());
        assert!(retrieve_topk(&t, &q, &corpus, 4).is_err());
        let ranked = retrieve_topk(&t, &q, &corpus, 3).unwrap();
        assert_eq!(ranked[0].0.id, "self");
        assert_eq!(ranked[0].1, 0.0);
        assert!(ranked.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn ties_break_by_id() {
        let t = EmbeddingTable::zeros(dims(1), 2);
        let q = Query {
            id: "q".into(),
            visual_features: vec![1.0],
            text_features: vec![0.0],
        };
        let corpus = vec![
            item("c", Modality::Visual, vec![2.0]),
            item("a", Modality::Visual, vec![0.0]),
            item("b", Modality::Textual, vec![1.0]),
        ];
        let ids: Vec<&str> = retrieve_topk(&t, &q, &corpus, 3)
            .unwrap()
            .iter()
            .map(|(i, _)| i.id.as_str())
            .collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn operator_norm_of_diagonal() {
        let map = AffineMap {
            in_dim: 2,
            out_dim: 2,
            weights: vec![3.0, 0.0, 0.0, -5.0],
            bias: vec![0.0, 0.0],
        };
        assert_relative_eq!(map.operator_norm(), 5.0, epsilon = 1e-9);
    }
}
