//! Tab-separated file formats.
//!
//! | file | columns |
//! |------|---------|
//! | corpus | `id  modality  f1,f2,...` |
//! | queries | `id  v1,v2,...  t1,t2,...` (visual block, text block) |
//! | positives | `query_id  item_id` |
//! | labels | `query_id  item_id  pos\|neg` |
//! | gating | `query_id  answerable\|needs_retrieval` |
//! | qa | `query_id  tok1,tok2,...` |
//! | graph `edges.tsv` | `u  v  weight` (vertex ids) |
//! | graph `vertices.tsv` | `id  label  f1,f2,...` |
//! | graph `triplets.tsv` | `head  relation  tail` (vertex ids) |
//!
//! Blank lines and lines starting with `#` are ignored. Numbers are written
//! in Rust's shortest round-trip form, so write-read-write is byte-stable.

use std::fmt::Display;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::{KnowledgeItem, Modality, Query};
use crate::error::{Error, Result};
use crate::spectral::{Edge, KnowledgeGraph, Triplet, Vertex};

pub const EDGES_FILE: &str = "edges.tsv";
pub const VERTICES_FILE: &str = "vertices.tsv";
pub const TRIPLETS_FILE: &str = "triplets.tsv";

struct Line<'a> {
    source: &'a str,
    number: usize,
    fields: Vec<&'a str>,
}

impl Line<'_> {
    fn error(&self, detail: impl Into<String>) -> Error {
        Error::Parse {
            source_name: self.source.to_string(),
            line: self.number,
            detail: detail.into(),
        }
    }

    fn expect(&self, count: usize) -> Result<()> {
        if self.fields.len() == count {
            Ok(())
        } else {
            Err(self.error(format!("expected {count} tab-separated fields, found {}", self.fields.len())))
        }
    }

    fn floats(&self, idx: usize) -> Result<Vec<f64>> {
        parse_list(self.fields[idx], |s| s.parse::<f64>().ok().filter(|v| v.is_finite()))
            .map_err(|bad| self.error(format!("bad number {bad:?}")))
    }
}

fn parse_list<T>(field: &str, parse: impl Fn(&str) -> Option<T>) -> std::result::Result<Vec<T>, String> {
    if field.trim().is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(',')
        .map(|s| parse(s.trim()).ok_or_else(|| s.to_string()))
        .collect()
}

fn for_each_line<R: BufRead>(
    input: R,
    source: &str,
    mut f: impl FnMut(&Line<'_>) -> Result<()>,
) -> Result<()> {
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parsed = Line {
            source,
            number: i + 1,
            fields: trimmed.split('\t').collect(),
        };
        f(&parsed)?;
    }
    Ok(())
}

fn join<T: Display>(values: &[T]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?))
}

fn source_name(path: &Path) -> String {
    path.display().to_string()
}

pub fn read_corpus<R: BufRead>(input: R, source: &str) -> Result<Vec<KnowledgeItem>> {
    let mut out = Vec::new();
    for_each_line(input, source, |l| {
        l.expect(3)?;
        let modality: Modality = l.fields[1].parse().map_err(|e: Error| l.error(e.to_string()))?;
        out.push(KnowledgeItem {
            id: l.fields[0].to_string(),
            modality,
            features: l.floats(2)?,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn write_corpus<W: Write>(mut out: W, items: &[KnowledgeItem]) -> Result<()> {
    for item in items {
        writeln!(out, "{}\t{}\t{}", item.id, item.modality, join(&item.features))?;
    }
    Ok(())
}

pub fn read_queries<R: BufRead>(input: R, source: &str) -> Result<Vec<Query>> {
    let mut out = Vec::new();
    for_each_line(input, source, |l| {
        l.expect(3)?;
        out.push(Query {
            id: l.fields[0].to_string(),
            visual_features: l.floats(1)?,
            text_features: l.floats(2)?,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn write_queries<W: Write>(mut out: W, queries: &[Query]) -> Result<()> {
    for q in queries {
        writeln!(out, "{}\t{}\t{}", q.id, join(&q.visual_features), join(&q.text_features))?;
    }
    Ok(())
}

pub fn read_positives<R: BufRead>(input: R, source: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for_each_line(input, source, |l| {
        l.expect(2)?;
        out.push((l.fields[0].to_string(), l.fields[1].to_string()));
        Ok(())
    })?;
    Ok(out)
}

pub fn write_positives<W: Write>(mut out: W, pairs: &[(String, String)]) -> Result<()> {
    for (q, i) in pairs {
        writeln!(out, "{q}\t{i}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub query_id: String,
    pub item_id: String,
    pub positive: bool,
}

pub fn read_labels<R: BufRead>(input: R, source: &str) -> Result<Vec<LabelRecord>> {
    let mut out = Vec::new();
    for_each_line(input, source, |l| {
        l.expect(3)?;
        let positive = match l.fields[2] {
            "pos" => true,
            "neg" => false,
            other => return Err(l.error(format!("label must be pos or neg, found {other:?}"))),
        };
        out.push(LabelRecord {
            query_id: l.fields[0].to_string(),
            item_id: l.fields[1].to_string(),
            positive,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn write_labels<W: Write>(mut out: W, labels: &[LabelRecord]) -> Result<()> {
    for r in labels {
        let tag = if r.positive { "pos" } else { "neg" };
        writeln!(out, "{}\t{}\t{tag}", r.query_id, r.item_id)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingLabel {
    Answerable,
    NeedsRetrieval,
}

impl GatingLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            GatingLabel::Answerable => "answerable",
            GatingLabel::NeedsRetrieval => "needs_retrieval",
        }
    }

    pub fn needs_retrieval(self) -> bool {
        self == GatingLabel::NeedsRetrieval
    }
}

pub fn read_gating<R: BufRead>(input: R, source: &str) -> Result<Vec<(String, GatingLabel)>> {
    let mut out = Vec::new();
    for_each_line(input, source, |l| {
        l.expect(2)?;
        let label = match l.fields[1] {
            "answerable" => GatingLabel::Answerable,
            "needs_retrieval" => GatingLabel::NeedsRetrieval,
            other => return Err(l.error(format!("unknown gating label {other:?}"))),
        };
        out.push((l.fields[0].to_string(), label));
        Ok(())
    })?;
    Ok(out)
}

pub fn write_gating<W: Write>(mut out: W, labels: &[(String, GatingLabel)]) -> Result<()> {
    for (q, label) in labels {
        writeln!(out, "{q}\t{}", label.as_str())?;
    }
    Ok(())
}

pub fn read_qa<R: BufRead>(input: R, source: &str) -> Result<Vec<(String, Vec<usize>)>> {
    let mut out = Vec::new();
    for_each_line(input, source, |l| {
        l.expect(2)?;
        let tokens = parse_list(l.fields[1], |s| s.parse::<usize>().ok())
            .map_err(|bad| l.error(format!("bad token id {bad:?}")))?;
        if tokens.is_empty() {
            return Err(l.error("empty answer"));
        }
        out.push((l.fields[0].to_string(), tokens));
        Ok(())
    })?;
    Ok(out)
}

pub fn write_qa<W: Write>(mut out: W, pairs: &[(String, Vec<usize>)]) -> Result<()> {
    for (q, tokens) in pairs {
        writeln!(out, "{q}\t{}", join(tokens))?;
    }
    Ok(())
}

/// Reads `vertices.tsv`, `edges.tsv` and (if present) `triplets.tsv`.
pub fn read_graph_dir(dir: &Path) -> Result<KnowledgeGraph> {
    let vpath = dir.join(VERTICES_FILE);
    let mut vertices = Vec::new();
    for_each_line(open(&vpath)?, &source_name(&vpath), |l| {
        l.expect(3)?;
        vertices.push(Vertex {
            id: l.fields[0].to_string(),
            label: l.fields[1].to_string(),
            features: l.floats(2)?,
        });
        Ok(())
    })?;
    let index: std::collections::HashMap<&str, usize> =
        vertices.iter().enumerate().map(|(i, v)| (v.id.as_str(), i)).collect();
    let lookup = |l: &Line<'_>, id: &str| {
        index
            .get(id)
            .copied()
            .ok_or_else(|| l.error(format!("unknown vertex {id:?}")))
    };

    let epath = dir.join(EDGES_FILE);
    let mut edges = Vec::new();
    for_each_line(open(&epath)?, &source_name(&epath), |l| {
        l.expect(3)?;
        let weight = l.fields[2]
            .trim()
            .parse::<f64>()
            .map_err(|_| l.error(format!("bad weight {:?}", l.fields[2])))?;
        edges.push(Edge {
            u: lookup(l, l.fields[0])?,
            v: lookup(l, l.fields[1])?,
            weight,
        });
        Ok(())
    })?;

    let tpath = dir.join(TRIPLETS_FILE);
    let mut triplets = Vec::new();
    if tpath.exists() {
        for_each_line(open(&tpath)?, &source_name(&tpath), |l| {
            l.expect(3)?;
            triplets.push(Triplet {
                head: lookup(l, l.fields[0])?,
                relation: l.fields[1].to_string(),
                tail: lookup(l, l.fields[2])?,
            });
            Ok(())
        })?;
    }
    KnowledgeGraph::new(vertices, edges, triplets)
}

pub fn write_graph_dir(dir: &Path, graph: &KnowledgeGraph) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let vs = graph.vertices();
    let mut out = create(&dir.join(VERTICES_FILE))?;
    for v in vs {
        writeln!(out, "{}\t{}\t{}", v.id, v.label, join(&v.features))?;
    }
    out.flush()?;
    let mut out = create(&dir.join(EDGES_FILE))?;
    for e in graph.edges() {
        writeln!(out, "{}\t{}\t{}", vs[e.u].id, vs[e.v].id, e.weight)?;
    }
    out.flush()?;
    let mut out = create(&dir.join(TRIPLETS_FILE))?;
    for t in graph.triplets() {
        writeln!(out, "{}\t{}\t{}", vs[t.head].id, t.relation, vs[t.tail].id)?;
    }
    out.flush()?;
    Ok(())
}

/// Opens `path` and applies one of the readers above.
pub fn read_file<T>(path: &Path, reader: impl FnOnce(BufReader<File>, &str) -> Result<T>) -> Result<T> {
    reader(open(path)?, &source_name(path))
}

/// Creates `path` and applies one of the writers above.
pub fn write_file(path: &Path, writer: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut out = create(path)?;
    writer(&mut out)?;
    out.flush()?;
    Ok(())
}
