//! File formats shared by every stage: the JSONL graph stream and the CSV
//! score and feature streams.
//!
//! Graph stream lines look like
//! `{"t":0,"atoms":[{"nodes":[{"kind":"c","class":"car","id":1}],"edges":[[0,1]],"attrs":{"0":[[..],[..],"ff00"]}}]}`.
//! Nodes are written sorted by (kind, class name, id), edges as sorted index
//! pairs in lexicographic order, so equal graphs serialize to equal bytes.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AtomicGraph, AttributeLevel, AttributeSet, ClassCatalog, MultiGraph, NodeKind, NodeRef};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub kind: NodeKind,
    pub class: String,
    pub id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LevelRecord {
    Numbers(Vec<f64>),
    Bytes(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AtomRecord {
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<[usize; 2]>,
    #[serde(default)]
    pub attrs: BTreeMap<usize, Vec<LevelRecord>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub t: u64,
    pub atoms: Vec<AtomRecord>,
}

pub(crate) fn encode_level(level: &AttributeLevel) -> LevelRecord {
    match level {
        AttributeLevel::Scalars(v) | AttributeLevel::Features(v) => LevelRecord::Numbers(v.clone()),
        AttributeLevel::Opaque(b) => LevelRecord::Bytes(hex::encode(b)),
    }
}

fn decode_level(position: usize, level: &LevelRecord) -> Result<AttributeLevel> {
    match (position, level) {
        (0, LevelRecord::Numbers(v)) => Ok(AttributeLevel::Scalars(v.clone())),
        (1, LevelRecord::Numbers(v)) => Ok(AttributeLevel::Features(v.clone())),
        (p, LevelRecord::Bytes(s)) if p >= 2 => hex::decode(s)
            .map(AttributeLevel::Opaque)
            .map_err(|e| Error::input(format!("attribute level {}: {e}", p + 1))),
        (p, _) => Err(Error::input(format!(
            "attribute level {} has the wrong payload type",
            p + 1
        ))),
    }
}

pub fn encode_atom(graph: &AtomicGraph, catalog: &ClassCatalog) -> AtomRecord {
    let mut order: Vec<&NodeRef> = graph.nodes().iter().collect();
    order.sort_by(|a, b| {
        (a.kind, catalog.name_of(a), a.instance_id).cmp(&(b.kind, catalog.name_of(b), b.instance_id))
    });
    let index: BTreeMap<&NodeRef, usize> = order.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    let nodes = order
        .iter()
        .map(|n| NodeRecord {
            kind: n.kind,
            class: catalog.name_of(n).to_string(),
            id: n.instance_id,
        })
        .collect();
    let mut edges: Vec<[usize; 2]> = graph
        .edges()
        .iter()
        .filter_map(|(a, b)| {
            let (i, j) = (*index.get(a)?, *index.get(b)?);
            Some([i.min(j), i.max(j)])
        })
        .collect();
    edges.sort_unstable();
    let attrs = graph
        .attributes()
        .iter()
        .filter_map(|(n, set)| {
            let i = *index.get(n)?;
            Some((i, set.levels.iter().map(encode_level).collect()))
        })
        .collect();
    AtomRecord { nodes, edges, attrs }
}

pub fn decode_atom(record: &AtomRecord, catalog: &ClassCatalog) -> Result<AtomicGraph> {
    let mut refs = Vec::with_capacity(record.nodes.len());
    let mut g = AtomicGraph::new();
    for n in &record.nodes {
        let class_id = catalog
            .class_id(n.kind, &n.class)
            .ok_or_else(|| Error::input(format!("unknown {} class `{}`", n.kind.tag(), n.class)))?;
        let node = NodeRef {
            kind: n.kind,
            class_id,
            instance_id: n.id,
        };
        refs.push(node);
        g.add_node(node);
    }
    for [i, j] in &record.edges {
        let (Some(a), Some(b)) = (refs.get(*i), refs.get(*j)) else {
            return Err(Error::input(format!("edge [{i},{j}] indexes past the node list")));
        };
        g.add_edge(*a, *b);
    }
    for (i, levels) in &record.attrs {
        let node = *refs
            .get(*i)
            .ok_or_else(|| Error::input(format!("attributes for node index {i} which does not exist")))?;
        let levels = levels
            .iter()
            .enumerate()
            .map(|(p, l)| decode_level(p, l))
            .collect::<Result<Vec<_>>>()?;
        g.set_attributes(node, AttributeSet::new(levels));
    }
    Ok(g)
}

/// Canonical JSON of one atomic graph.
pub fn canonical_atom_json(graph: &AtomicGraph, catalog: &ClassCatalog) -> String {
    serde_json::to_string(&encode_atom(graph, catalog)).expect("atom records always serialize")
}

pub fn encode_frame(mg: &MultiGraph, catalog: &ClassCatalog) -> FrameRecord {
    FrameRecord {
        t: mg.time_index,
        atoms: mg.atoms.iter().map(|a| encode_atom(a, catalog)).collect(),
    }
}

pub fn decode_frame(record: &FrameRecord, catalog: &ClassCatalog) -> Result<MultiGraph> {
    let atoms = record
        .atoms
        .iter()
        .map(|a| decode_atom(a, catalog))
        .collect::<Result<Vec<_>>>()?;
    let mg = MultiGraph {
        time_index: record.t,
        atoms,
    };
    if !mg.is_node_disjoint() {
        return Err(Error::input(format!("frame {} has atoms sharing nodes", record.t)));
    }
    Ok(mg)
}

pub fn read_graph_stream(reader: impl BufRead, catalog: &ClassCatalog) -> Result<Vec<MultiGraph>> {
    let mut frames = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: FrameRecord = serde_json::from_str(&line)
            .map_err(|e| Error::input(format!("graph stream line {}: {e}", lineno + 1)))?;
        frames.push(decode_frame(&record, catalog)?);
    }
    Ok(frames)
}

pub fn write_graph_stream(mut writer: impl Write, frames: &[MultiGraph], catalog: &ClassCatalog) -> Result<()> {
    for mg in frames {
        serde_json::to_writer(&mut writer, &encode_frame(mg, catalog))?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// One row of a score CSV (`t,pattern,score`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub t: u64,
    pub pattern: String,
    pub score: f64,
}

pub fn read_score_rows(reader: impl std::io::Read) -> Result<Vec<ScoreRow>> {
    read_rows(reader)
}

/// Reads any headered CSV into serde rows.
pub fn read_rows<T: serde::de::DeserializeOwned>(reader: impl std::io::Read) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_rows<T: Serialize>(writer: impl Write, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One feature-vector observation (`t,track_id,v0..v{d-1}`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub t: u64,
    pub track_id: u64,
    pub vector: Vec<f64>,
}

pub fn read_feature_rows(reader: impl std::io::Read) -> Result<Vec<FeatureRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |k: usize| -> Result<&str> {
            rec.get(k)
                .ok_or_else(|| Error::input(format!("feature row {} is too short", i + 1)))
        };
        let parse_err = |e: std::num::ParseIntError| Error::input(format!("feature row {}: {e}", i + 1));
        let t = field(0)?.trim().parse().map_err(parse_err)?;
        let track_id = field(1)?.trim().parse().map_err(parse_err)?;
        let vector = (2..rec.len())
            .map(|k| {
                field(k)?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::input(format!("feature row {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(FeatureRow { t, track_id, vector });
    }
    Ok(rows)
}

pub fn write_feature_rows(writer: impl Write, rows: &[FeatureRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let dim = rows.first().map_or(0, |r| r.vector.len());
    let mut header = vec!["t".to_string(), "track_id".to_string()];
    header.extend((0..dim).map(|k| format!("v{k}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.t.to_string(), r.track_id.to_string()];
        rec.extend(r.vector.iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
