//! Deterministic scoring functions standing in for a multimodal language
//! model: `(query, candidate) -> raw real score`.

use std::collections::HashMap;

use crate::alignment::{EmbeddingTable, Encoder, Modality, Query};
use crate::error::{Error, Result};
use crate::lorentz::geodesic_distance;

/// Anything a query can be scored against: a knowledge item, a graph vertex
/// or a candidate answer.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub id: &'a str,
    pub modality: Modality,
    pub features: &'a [f64],
}

pub trait Scorer {
    fn score(&self, query: &Query, candidate: &Candidate<'_>) -> Result<f64>;
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn score(&self, query: &Query, candidate: &Candidate<'_>) -> Result<f64> {
        (**self).score(query, candidate)
    }
}

/// Negative geodesic distance between the query and candidate embeddings.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingScorer<'t> {
    pub table: &'t EmbeddingTable,
}

impl Scorer for EmbeddingScorer<'_> {
    fn score(&self, query: &Query, candidate: &Candidate<'_>) -> Result<f64> {
        let q = self.table.embed_query(query)?;
        let c = self
            .table
            .embed(candidate.features, Encoder::Item(candidate.modality))
            .map_err(|e| Error::Scorer {
                id: candidate.id.to_string(),
                detail: e.to_string(),
            })?;
        Ok(-geodesic_distance(&q, &c))
    }
}

/// Which part of the query a [`DotProductScorer`] reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QueryView {
    Visual,
    Text,
    /// Element-wise mean of the visual and text features.
    #[default]
    Mean,
}

/// `scale * <query view, candidate features>`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DotProductScorer {
    pub scale: f64,
    pub view: QueryView,
}

impl DotProductScorer {
    pub fn new(scale: f64, view: QueryView) -> Self {
        Self { scale, view }
    }
}

impl Scorer for DotProductScorer {
    fn score(&self, query: &Query, candidate: &Candidate<'_>) -> Result<f64> {
        let dot = |q: &[f64]| -> Result<f64> {
            if q.len() != candidate.features.len() {
                return Err(Error::Scorer {
                    id: candidate.id.to_string(),
                    detail: format!(
                        "feature length {} does not match query length {}",
                        candidate.features.len(),
                        q.len()
                    ),
                });
            }
            Ok(q.iter().zip(candidate.features).map(|(a, b)| a * b).sum())
        };
        let raw = match self.view {
            QueryView::Visual => dot(&query.visual_features)?,
            QueryView::Text => dot(&query.text_features)?,
            QueryView::Mean => {
                if query.visual_features.len() != query.text_features.len() {
                    return Err(Error::Scorer {
                        id: candidate.id.to_string(),
                        detail: "visual and text blocks differ in length".into(),
                    });
                }
                let mean: Vec<f64> = query
                    .visual_features
                    .iter()
                    .zip(&query.text_features)
                    .map(|(a, b)| 0.5 * (a + b))
                    .collect();
                dot(&mean)?
            }
        };
        Ok(self.scale * raw)
    }
}

/// Fixed `(query id, candidate id) -> score` table, mainly for tests.
#[derive(Debug, Clone, Default)]
pub struct TableScorer {
    pub scores: HashMap<(String, String), f64>,
    pub default: Option<f64>,
}

impl TableScorer {
    pub fn constant(value: f64) -> Self {
        Self {
            scores: HashMap::new(),
            default: Some(value),
        }
    }

    pub fn insert(&mut self, query: &str, candidate: &str, score: f64) {
        self.scores.insert((query.to_string(), candidate.to_string()), score);
    }
}

impl Scorer for TableScorer {
    fn score(&self, query: &Query, candidate: &Candidate<'_>) -> Result<f64> {
        self.scores
            .get(&(query.id.clone(), candidate.id.to_string()))
            .copied()
            .or(self.default)
            .ok_or_else(|| Error::Scorer {
                id: candidate.id.to_string(),
                detail: format!("no score for query {}", query.id),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn query() -> Query {
        Query {
            id: "q".into(),
            visual_features: vec![1.0, 0.0],
            text_features: vec![0.0, 3.0],
        }
    }

    #[test]
    fn dot_product_views() {
        let c = Candidate {
            id: "c",
            modality: Modality::Textual,
            features: &[2.0, 1.0],
        };
        assert_eq!(DotProductScorer::new(1.0, QueryView::Visual).score(&query(), &c).unwrap(), 2.0);
        assert_eq!(DotProductScorer::new(2.0, QueryView::Text).score(&query(), &c).unwrap(), 6.0);
        assert_eq!(DotProductScorer::new(1.0, QueryView::Mean).score(&query(), &c).unwrap(), 2.5);
        let bad = Candidate {
            id: "bad",
            modality: Modality::Textual,
            features: &[1.0],
        };
        let err = DotProductScorer::new(1.0, QueryView::Mean).score(&query(), &bad).unwrap_err();
        assert!(matches!(err, Error::Scorer { ref id, .. } if id == "bad"));
    }

    #[test]
    fn table_lookup_and_default() {
        let mut t = TableScorer::default();
        t.insert("q", "a", 4.0);
        let a = Candidate {
            id: "a",
            modality: Modality::Visual,
            features: &[],
        };
        let b = Candidate { id: "b", ..a };
        assert_eq!(t.score(&query(), &a).unwrap(), 4.0);
        assert!(t.score(&query(), &b).is_err());
        t.default = Some(-1.0);
        assert_eq!(t.score(&query(), &b).unwrap(), -1.0);
    }

    #[test]
    fn embedding_scorer_is_negative_distance() {
        let dims = crate::alignment::EncoderDims {
            visual: 2,
            textual: 2,
            graph: 2,
            query: 4,
        };
        let table = EmbeddingTable::zeros(dims, 3);
        let c = Candidate {
            id: "c",
            modality: Modality::Visual,
            features: &[1.0, 1.0],
        };
        assert_eq!(EmbeddingScorer { table: &table }.score(&query(), &c).unwrap(), 0.0);
    }
}
