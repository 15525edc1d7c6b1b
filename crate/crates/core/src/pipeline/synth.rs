// Planted synthetic bundles: clustered queries and items, distractors,
// community-structured knowledge graph and memorizable answers.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::alignment::{KnowledgeItem, Modality, Query};
use crate::error::{Error, Result};
use crate::formats::{self, GatingLabel, LabelRecord};
use crate::seeded_rng;
use crate::spectral::{Edge, KnowledgeGraph, Triplet, Vertex};

pub const CORPUS_FILE: &str = "corpus.tsv";
pub const QUERIES_FILE: &str = "queries.tsv";
pub const POSITIVES_FILE: &str = "positives.tsv";
pub const LABELS_FILE: &str = "labels.tsv";
pub const VERTEX_LABELS_FILE: &str = "vertex_labels.tsv";
pub const GATING_FILE: &str = "gating.tsv";
pub const QA_FILE: &str = "qa.tsv";
pub const GRAPH_DIR: &str = "graph";

const FEATURE_NOISE: f64 = 0.3;
/// Scale of the answer key planted in an answerable query's text features.
const ANSWER_KEY_SCALE: f64 = 4.0;
/// Marker block appended to every item: `+1` for genuine items, `-1` for
/// distractors. Queries carry no marker.
const MARKER_DIMS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_queries: usize,
    pub num_items: usize,
    pub num_clusters: usize,
    pub graph_size: usize,
    pub noise_frac: f64,
    pub seed: u64,
    /// Item, vertex and per-block query feature dimension.
    pub feature_dim: usize,
    pub vocab: usize,
    pub answer_len: usize,
    /// Fraction of queries whose text features encode their answer.
    pub answerable_frac: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_queries: 200,
            num_items: 500,
            num_clusters: 8,
            graph_size: 300,
            noise_frac: 0.0,
            seed: 42,
            feature_dim: 16,
            vocab: 32,
            answer_len: 4,
            answerable_frac: 0.35,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.num_queries == 0
            || self.num_items == 0
            || self.num_clusters == 0
            || self.graph_size == 0
        {
            return Err(Error::config("synth counts must all be at least 1"));
        }
        if !(0.0..1.0).contains(&self.noise_frac) {
            return Err(Error::config(format!("noise_frac must be in [0, 1), got {}", self.noise_frac)));
        }
        if !(0.0..=1.0).contains(&self.answerable_frac) {
            return Err(Error::config("answerable_frac must be in [0, 1]"));
        }
        if self.feature_dim <= MARKER_DIMS {
            return Err(Error::config(format!("feature_dim must exceed {MARKER_DIMS}")));
        }
        if self.vocab < 2 || self.answer_len == 0 {
            return Err(Error::config("vocab >= 2 and answer_len >= 1 required"));
        }
        Ok(())
    }
}

/// Everything training and evaluation read from disk.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub queries: Vec<Query>,
    pub items: Vec<KnowledgeItem>,
    pub positives: Vec<(String, String)>,
    pub labels: Vec<LabelRecord>,
    pub vertex_labels: Vec<LabelRecord>,
    pub gating: Vec<(String, GatingLabel)>,
    pub graph: KnowledgeGraph,
    pub qa: Vec<(String, Vec<usize>)>,
}

/// What the generator planted; not written to disk beyond what the bundle
/// files already imply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub clusters: usize,
    pub query_cluster: Vec<usize>,
    /// `None` for distractors.
    pub item_cluster: Vec<Option<usize>>,
    pub vertex_community: Vec<usize>,
    pub answerable: Vec<bool>,
}

fn gaussian<R: Rng>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

fn noisy<R: Rng>(rng: &mut R, center: &[f64]) -> Vec<f64> {
    center
        .iter()
        .map(|c| {
            let z: f64 = StandardNormal.sample(rng);
            c + FEATURE_NOISE * z
        })
        .collect()
}

fn with_marker(mut content: Vec<f64>, genuine: bool) -> Vec<f64> {
    let m = if genuine { 1.0 } else { -1.0 };
    content.extend(std::iter::repeat_n(m, MARKER_DIMS));
    content
}

/// Generates a bundle. Clusters are assigned round-robin, so with at least
/// as many queries as clusters every cluster has a query; item cluster `c`
/// is drawn only from clusters that own a query.
pub fn synth_bundle(spec: &SynthSpec) -> Result<(Bundle, GroundTruth)> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed);
    let c_count = spec.num_clusters.min(spec.num_queries);
    let f = spec.feature_dim;
    let content_dim = f - MARKER_DIMS;

    let centers: Vec<Vec<f64>> = (0..c_count).map(|_| gaussian(&mut rng, content_dim, 1.0)).collect();
    let keys: Vec<Vec<f64>> = (0..c_count)
        .map(|_| {
            let v = gaussian(&mut rng, f, 1.0);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let answers = distinct_answers(&mut rng, c_count, spec.vocab, spec.answer_len);

    // Queries.
    let mut queries = Vec::with_capacity(spec.num_queries);
    let mut query_cluster = Vec::with_capacity(spec.num_queries);
    let mut answerable = Vec::with_capacity(spec.num_queries);
    for i in 0..spec.num_queries {
        let c = i % c_count;
        let is_answerable = rng.random_bool(spec.answerable_frac);
        let mut visual = noisy(&mut rng, &centers[c]);
        visual.extend(gaussian(&mut rng, MARKER_DIMS, FEATURE_NOISE));
        let text = if is_answerable {
            let scaled: Vec<f64> = keys[c].iter().map(|k| ANSWER_KEY_SCALE * k).collect();
            noisy(&mut rng, &scaled)
        } else {
            gaussian(&mut rng, f, FEATURE_NOISE)
        };
        queries.push(Query {
            id: format!("q{i:04}"),
            visual_features: visual,
            text_features: text,
        });
        query_cluster.push(c);
        answerable.push(is_answerable);
    }

    // Items: genuine first, distractors last.
    let n_distractors = ((spec.noise_frac * spec.num_items as f64).round() as usize).min(spec.num_items - 1);
    let n_genuine = spec.num_items - n_distractors;
    let modalities = [Modality::Visual, Modality::Textual, Modality::GraphTriplet];
    let mut items = Vec::with_capacity(spec.num_items);
    let mut item_cluster = Vec::with_capacity(spec.num_items);
    for j in 0..spec.num_items {
        let c = j % c_count;
        let genuine = j < n_genuine;
        let features = with_marker(noisy(&mut rng, &centers[c]), genuine);
        items.push(KnowledgeItem {
            id: format!("d{j:04}"),
            modality: modalities[(j / c_count) % 3],
            features,
        });
        item_cluster.push(genuine.then_some(c));
    }
    let members: Vec<Vec<usize>> = (0..c_count)
        .map(|c| (0..n_genuine).filter(|&j| j % c_count == c).collect())
        .collect();
    let decoys: Vec<Vec<usize>> = (0..c_count)
        .map(|c| (n_genuine..spec.num_items).filter(|&j| j % c_count == c).collect())
        .collect();

    let mut positives = Vec::new();
    let mut labels = Vec::new();
    for (q, &c) in queries.iter().zip(&query_cluster) {
        for &j in &members[c] {
            positives.push((q.id.clone(), items[j].id.clone()));
        }
        let pos: Vec<usize> = members[c].choose_multiple(&mut rng, 5).copied().collect();
        let mut neg: Vec<usize> = decoys[c].choose_multiple(&mut rng, 3).copied().collect();
        let others: Vec<usize> = (0..n_genuine).filter(|&j| j % c_count != c).collect();
        neg.extend(others.choose_multiple(&mut rng, 5).copied());
        for j in pos {
            labels.push(LabelRecord {
                query_id: q.id.clone(),
                item_id: items[j].id.clone(),
                positive: true,
            });
        }
        for j in neg {
            labels.push(LabelRecord {
                query_id: q.id.clone(),
                item_id: items[j].id.clone(),
                positive: false,
            });
        }
    }

    let (graph, vertex_community) = community_graph(&mut rng, spec.graph_size, c_count, &centers)?;
    let mut vertex_labels = Vec::new();
    for (q, &c) in queries.iter().zip(&query_cluster) {
        let inside: Vec<usize> = (0..graph.len()).filter(|&v| vertex_community[v] == c).collect();
        let outside: Vec<usize> = (0..graph.len()).filter(|&v| vertex_community[v] != c).collect();
        for (set, positive) in [(inside, true), (outside, false)] {
            for v in set.choose_multiple(&mut rng, 4) {
                vertex_labels.push(LabelRecord {
                    query_id: q.id.clone(),
                    item_id: graph.vertices()[*v].id.clone(),
                    positive,
                });
            }
        }
    }

    let gating = queries
        .iter()
        .zip(&answerable)
        .map(|(q, &a)| {
            let label = if a {
                GatingLabel::Answerable
            } else {
                GatingLabel::NeedsRetrieval
            };
            (q.id.clone(), label)
        })
        .collect();
    let qa = queries
        .iter()
        .zip(&query_cluster)
        .map(|(q, &c)| (q.id.clone(), answers[c].clone()))
        .collect();

    let bundle = Bundle {
        queries,
        items,
        positives,
        labels,
        vertex_labels,
        gating,
        graph,
        qa,
    };
    let truth = GroundTruth {
        clusters: c_count,
        query_cluster,
        item_cluster,
        vertex_community,
        answerable,
    };
    Ok((bundle, truth))
}

fn distinct_answers<R: Rng>(rng: &mut R, count: usize, vocab: usize, len: usize) -> Vec<Vec<usize>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    let capacity = (vocab as f64).powi(len as i32);
    while out.len() < count {
        let a: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
        // With fewer possible answers than clusters, repeats are unavoidable.
        if seen.insert(a.clone()) || seen.len() as f64 >= capacity {
            out.push(a);
        }
    }
    out
}

/// Vertices `v` belong to community `v mod c`. Each community is chained
/// along its members and consecutive communities are linked once, so the
/// graph is always connected; extra edges are drawn densely inside and
/// sparsely across communities.
fn community_graph<R: Rng>(
    rng: &mut R,
    n: usize,
    c_count: usize,
    centers: &[Vec<f64>],
) -> Result<(KnowledgeGraph, Vec<usize>)> {
    let community: Vec<usize> = (0..n).map(|v| v % c_count).collect();
    let vertices: Vec<Vertex> = (0..n)
        .map(|v| Vertex {
            id: format!("e{v:04}"),
            label: format!("entity_{v}"),
            features: with_marker(noisy(rng, &centers[community[v]]), true),
        })
        .collect();
    let mut pairs = BTreeSet::new();
    let add = |pairs: &mut BTreeSet<(usize, usize)>, a: usize, b: usize| {
        if a != b {
            pairs.insert((a.min(b), a.max(b)));
        }
    };
    for v in 0..n {
        if v + c_count < n {
            add(&mut pairs, v, v + c_count);
        }
    }
    for c in 1..c_count.min(n) {
        add(&mut pairs, c - 1, c);
    }
    let size = n.div_ceil(c_count).max(1) as f64;
    let p_in = (6.0 / size).min(1.0);
    let p_out = (0.5 / n as f64).min(1.0);
    for a in 0..n {
        for b in a + 1..n {
            let p = if community[a] == community[b] { p_in } else { p_out };
            if rng.random_bool(p) {
                add(&mut pairs, a, b);
            }
        }
    }
    let mut edges = Vec::with_capacity(pairs.len());
    let mut triplets = Vec::with_capacity(pairs.len());
    for (u, v) in pairs {
        edges.push(Edge {
            u,
            v,
            weight: rng.random_range(0.5..1.5),
        });
        let relation = if community[u] == community[v] {
            format!("rel{}", community[u] % 3)
        } else {
            "linked_to".to_string()
        };
        triplets.push(Triplet {
            head: u,
            relation,
            tail: v,
        });
    }
    Ok((KnowledgeGraph::new(vertices, edges, triplets)?, community))
}

impl Bundle {
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        formats::write_file(&dir.join(CORPUS_FILE), |w| formats::write_corpus(w, &self.items))?;
        formats::write_file(&dir.join(QUERIES_FILE), |w| formats::write_queries(w, &self.queries))?;
        formats::write_file(&dir.join(POSITIVES_FILE), |w| formats::write_positives(w, &self.positives))?;
        formats::write_file(&dir.join(LABELS_FILE), |w| formats::write_labels(w, &self.labels))?;
        formats::write_file(&dir.join(VERTEX_LABELS_FILE), |w| {
            formats::write_labels(w, &self.vertex_labels)
        })?;
        formats::write_file(&dir.join(GATING_FILE), |w| formats::write_gating(w, &self.gating))?;
        formats::write_file(&dir.join(QA_FILE), |w| formats::write_qa(w, &self.qa))?;
        formats::write_graph_dir(&dir.join(GRAPH_DIR), &self.graph)
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        Ok(Self {
            items: formats::read_file(&dir.join(CORPUS_FILE), formats::read_corpus)?,
            queries: formats::read_file(&dir.join(QUERIES_FILE), formats::read_queries)?,
            positives: formats::read_file(&dir.join(POSITIVES_FILE), formats::read_positives)?,
            labels: formats::read_file(&dir.join(LABELS_FILE), formats::read_labels)?,
            vertex_labels: formats::read_file(&dir.join(VERTEX_LABELS_FILE), formats::read_labels)?,
            gating: formats::read_file(&dir.join(GATING_FILE), formats::read_gating)?,
            qa: formats::read_file(&dir.join(QA_FILE), formats::read_qa)?,
            graph: formats::read_graph_dir(&dir.join(GRAPH_DIR))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(noise: f64, clusters: usize, seed: u64) -> SynthSpec {
        SynthSpec {
            num_queries: 20,
            num_items: 60,
            num_clusters: clusters,
            graph_size: 40,
            noise_frac: noise,
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn clean_bundle_items_have_one_cluster_with_a_query() {
        let (b, t) = synth_bundle(&small(0.0, 4, 1)).unwrap();
        assert!(t.item_cluster.iter().all(|c| c.is_some()));
        for c in t.item_cluster.iter().flatten() {
            assert!(t.query_cluster.contains(c));
        }
        // every item is a positive of some query
        let pos: BTreeSet<&str> = b.positives.iter().map(|(_, i)| i.as_str()).collect();
        assert_eq!(pos.len(), b.items.len());
    }

    #[test]
    fn distractors_are_never_positive() {
        let (b, t) = synth_bundle(&small(0.2, 4, 2)).unwrap();
        let n_dis = t.item_cluster.iter().filter(|c| c.is_none()).count();
        assert_eq!(n_dis, 12);
        for (_, item) in &b.positives {
            let j = b.items.iter().position(|i| &i.id == item).unwrap();
            assert!(t.item_cluster[j].is_some());
        }
    }

    #[test]
    fn single_cluster_graph_is_connected() {
        for seed in 0..5 {
            let (b, _) = synth_bundle(&small(0.0, 1, seed)).unwrap();
            assert!(b.graph.is_connected());
        }
        let (b, _) = synth_bundle(&small(0.0, 5, 9)).unwrap();
        assert!(b.graph.is_connected());
    }

    #[test]
    fn same_seed_same_files() {
        let dir = std::env::temp_dir().join(format!("synth-det-{}", std::process::id()));
        let spec = small(0.2, 3, 7);
        let (a, _) = synth_bundle(&spec).unwrap();
        let (b, _) = synth_bundle(&spec).unwrap();
        a.write_dir(&dir.join("a")).unwrap();
        b.write_dir(&dir.join("b")).unwrap();
        for f in [CORPUS_FILE, QUERIES_FILE, LABELS_FILE, QA_FILE, GATING_FILE] {
            let x = std::fs::read(dir.join("a").join(f)).unwrap();
            let y = std::fs::read(dir.join("b").join(f)).unwrap();
            assert_eq!(x, y, "{f}");
        }
        let back = Bundle::read_dir(&dir.join("a")).unwrap();
        assert_eq!(back.items, a.items);
        assert_eq!(back.qa, a.qa);
        assert_eq!(back.graph.edges(), a.graph.edges());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn zero_counts_rejected() {
        let mut s = small(0.0, 2, 0);
        s.num_items = 0;
        assert!(matches!(synth_bundle(&s), Err(Error::Config(_))));
    }
}
