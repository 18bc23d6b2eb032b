//! Encoder-only inference: node embeddings from the online LM and GNN, the
//! node/edge/graph readouts, and the TSV embedding format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{self, EdgeFeatureTable};
use crate::graph_store::{ContextSubgraph, TextAttributedGraph};
use crate::lm;
use crate::model::ModelState;
use crate::ppr::{context_subgraph, contextual_subgraphs_for_task, PprParams, TaskLevel};
use crate::tensor::Matrix;
use crate::text::tokenize;

/// Rows aligned with `node_ids` (dense graph ids).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: Matrix,
    pub node_ids: Vec<usize>,
}

impl EmbeddingMatrix {
    pub fn new(rows: Matrix, node_ids: Vec<usize>) -> Result<Self> {
        if rows.rows() != node_ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} rows for {} node ids",
                rows.rows(),
                node_ids.len()
            )));
        }
        if !rows.is_finite() {
            return Err(Error::InvalidParameter("embedding has non-finite entries".into()));
        }
        Ok(Self { rows, node_ids })
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn position(&self, node: usize) -> Option<usize> {
        self.node_ids.iter().position(|&v| v == node)
    }

    pub fn row_of(&self, node: usize) -> Result<&[f64]> {
        self.position(node)
            .map(|i| self.rows.row(i))
            .ok_or(Error::AnchorNotInSet(node))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub level: TaskLevel,
    pub anchors: Vec<usize>,
}

impl AnchorSpec {
    pub fn node(v: usize) -> Self {
        Self { level: TaskLevel::Node, anchors: vec![v] }
    }

    pub fn edge(v: usize, u: usize) -> Self {
        Self { level: TaskLevel::Edge, anchors: vec![v, u] }
    }

    /// Graph level over every node of `g`.
    pub fn graph(g: &TextAttributedGraph) -> Self {
        Self { level: TaskLevel::Graph, anchors: (0..g.num_nodes()).collect() }
    }

    pub fn validate(&self, num_nodes: usize) -> Result<()> {
        let arity_ok = match self.level {
            TaskLevel::Node => self.anchors.len() == 1,
            TaskLevel::Edge => self.anchors.len() == 2,
            TaskLevel::Graph => self.anchors.len() == num_nodes,
        };
        if !arity_ok {
            return Err(Error::InvalidParameter(format!(
                "{:?} level does not take {} anchors",
                self.level,
                self.anchors.len()
            )));
        }
        match self.anchors.iter().find(|&&a| a >= num_nodes) {
            Some(&a) => Err(Error::NodeOutOfRange(a)),
            None => Ok(()),
        }
    }
}

/// Which representation inference returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    /// Propagated `[CLS]` (GNN output).
    #[default]
    Gnn,
    /// Language-model `[CLS]` before propagation; diagnostics only.
    LmCls,
}

impl std::str::FromStr for EmbeddingSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gnn" => Ok(Self::Gnn),
            "lm_cls" => Ok(Self::LmCls),
            other => Err(Error::InvalidParameter(format!("unknown embedding source {other:?}"))),
        }
    }
}

fn edge_features(state: &ModelState, g: &TextAttributedGraph) -> Result<Option<EdgeFeatureTable>> {
    match g.edge_texts() {
        Some(_) => Ok(Some(gnn::encode_edge_features(
            &state.online,
            &state.config.lm,
            &state.vocab,
            g,
        )?)),
        None => Ok(None),
    }
}

/// Unmasked text → LM `[CLS]` → online GNN, for every node of `sub`.
pub fn embed_nodes(state: &ModelState, sub: &ContextSubgraph, g: &TextAttributedGraph) -> Result<EmbeddingMatrix> {
    let seqs: Vec<Vec<usize>> = sub
        .local_to_global
        .iter()
        .map(|&v| tokenize(&state.vocab, g.node_text(v), state.config.lm.max_len).ids)
        .collect();
    let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
    let cls = lm::lm_cls(&state.online, &state.config.lm, &refs)?;
    let edge_feats = edge_features(state, g)?;
    let out = state.gnn_forward(sub, &cls, edge_feats.as_ref(), false)?;
    EmbeddingMatrix::new(out, sub.local_to_global.clone())
}

/// Node / edge / graph readout over per-subgraph embeddings.
pub fn readout(level: TaskLevel, emb: &[EmbeddingMatrix], anchors: &AnchorSpec) -> Result<Vec<f64>> {
    let arity = match level {
        TaskLevel::Edge => 2,
        _ => 1,
    };
    if emb.len() != arity {
        return Err(Error::InvalidParameter(format!(
            "{level:?} readout takes {arity} embedding set(s), got {}",
            emb.len()
        )));
    }
    match level {
        TaskLevel::Node => {
            let &[v] = anchors.anchors.as_slice() else {
                return Err(Error::InvalidParameter("node readout takes one anchor".into()));
            };
            Ok(emb[0].row_of(v)?.to_vec())
        }
        TaskLevel::Edge => {
            let &[v, u] = anchors.anchors.as_slice() else {
                return Err(Error::InvalidParameter("edge readout takes two anchors".into()));
            };
            let mut out = emb[0].row_of(v)?.to_vec();
            out.extend_from_slice(emb[1].row_of(u)?);
            Ok(out)
        }
        TaskLevel::Graph => {
            let m = &emb[0].rows;
            if m.rows() == 0 {
                return Err(Error::InvalidParameter("graph readout over zero nodes".into()));
            }
            let mut mean = m.sum_rows().into_vec();
            for x in &mut mean {
                *x /= m.rows() as f64;
            }
            Ok(mean)
        }
    }
}

/// Contextual subgraphs → embeddings → readout.
pub fn unified_embedding(
    state: &ModelState,
    g: &TextAttributedGraph,
    anchors: &AnchorSpec,
    ppr: &PprParams,
) -> Result<Vec<f64>> {
    anchors.validate(g.num_nodes())?;
    let subs = contextual_subgraphs_for_task(g, &anchors.anchors, anchors.level, ppr)?;
    let embs = subs
        .iter()
        .map(|s| embed_nodes(state, s, g))
        .collect::<Result<Vec<_>>>()?;
    readout(anchors.level, &embs, anchors)
}

/// Node-level embedding of every node in its own PPR context. The LM `[CLS]`
/// of each node is computed once and shared by all subgraphs containing it.
pub fn embed_all_nodes(
    state: &ModelState,
    g: &TextAttributedGraph,
    ppr: &PprParams,
    source: EmbeddingSource,
) -> Result<EmbeddingMatrix> {
    let n = g.num_nodes();
    let seqs: Vec<Vec<usize>> = g
        .node_texts()
        .iter()
        .map(|t| tokenize(&state.vocab, t, state.config.lm.max_len).ids)
        .collect();
    let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
    let cls = lm::lm_cls(&state.online, &state.config.lm, &refs)?;
    if source == EmbeddingSource::LmCls {
        return EmbeddingMatrix::new(cls, (0..n).collect());
    }
    let edge_feats = edge_features(state, g)?;
    let mut data = Vec::with_capacity(n * state.config.d());
    for v in 0..n {
        let sub = context_subgraph(g, v, ppr)?;
        let x = cls.select_rows(&sub.local_to_global);
        let out = state.gnn_forward(&sub, &x, edge_feats.as_ref(), false)?;
        data.extend_from_slice(out.row(sub.anchor_local));
    }
    EmbeddingMatrix::new(Matrix::from_vec(n, state.config.d(), data), (0..n).collect())
}

/// `%.9g`-style rendering: nine significant digits, trailing zeros trimmed.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{x:.8e}");
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        trim_zeros(&s).to_string()
    } else {
        let m = trim_zeros(mant);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Header `#dim=<d>`, then `node_id<TAB>f1 f2 … fd` using original node ids.
pub fn write_embeddings_tsv<W: Write>(w: &mut W, emb: &EmbeddingMatrix, g: &TextAttributedGraph) -> Result<()> {
    writeln!(w, "#dim={}", emb.dim())?;
    for (i, &v) in emb.node_ids.iter().enumerate() {
        let id = g.original_ids().get(v).ok_or(Error::NodeOutOfRange(v))?;
        let vals: Vec<String> = emb.rows.row(i).iter().map(|&x| format_sig9(x)).collect();
        writeln!(w, "{id}\t{}", vals.join(" "))?;
    }
    Ok(())
}

pub fn save_embeddings_tsv(path: &Path, emb: &EmbeddingMatrix, g: &TextAttributedGraph) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_embeddings_tsv(&mut w, emb, g)?;
    w.flush()?;
    Ok(())
}

/// Parsed TSV: original ids in file order and the row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub ids: Vec<i64>,
    pub rows: Matrix,
}

impl EmbeddingTable {
    pub fn row_index(&self, id: i64) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }
}

pub fn load_embeddings_tsv(path: &Path) -> Result<EmbeddingTable> {
    let bad = |line: usize, message: String| Error::MalformedRecord {
        path: path.display().to_string(),
        line,
        message,
    };
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| bad(1, "missing header".into()))??;
    let dim: usize = header
        .strip_prefix("#dim=")
        .and_then(|d| d.trim().parse().ok())
        .ok_or_else(|| bad(1, format!("expected #dim=<d>, got {header:?}")))?;
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let (id, vals) = line
            .split_once('\t')
            .ok_or_else(|| bad(lineno, "missing tab".into()))?;
        ids.push(id.trim().parse().map_err(|e| bad(lineno, format!("bad id: {e}")))?);
        let before = data.len();
        for tok in vals.split_whitespace() {
            data.push(tok.parse::<f64>().map_err(|e| bad(lineno, format!("bad value {tok:?}: {e}")))?);
        }
        if data.len() - before != dim {
            return Err(bad(lineno, format!("expected {dim} values, got {}", data.len() - before)));
        }
    }
    Ok(EmbeddingTable {
        rows: Matrix::from_vec(ids.len(), dim, data),
        ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::GatConfig;
    use crate::graph_store::EdgeInput;
    use crate::lm::LmConfig;
    use crate::model::ModelConfig;
    use crate::optim::AdamWSettings;
    use crate::text::build_vocab;

    fn fixture() -> (TextAttributedGraph, ModelState) {
        let texts = ["red apple fruit", "green apple", "blue car engine", "fast car", "apple car"];
        let edges = [(0, 1), (1, 4), (4, 3), (3, 2)];
        let g = TextAttributedGraph::from_edges(
            texts.iter().map(|s| s.to_string()).collect(),
            edges.iter().map(|&(src, dst)| EdgeInput { src, dst, text: None }).collect(),
            None,
            None,
        )
        .unwrap();
        let vocab = build_vocab(&texts, 32).unwrap();
        let cfg = ModelConfig {
            lm: LmConfig { vocab_size: 0, d: 8, num_layers: 1, num_heads: 2, max_len: 8, dropout: 0.2 },
            gnn: GatConfig { num_layers: 2, d: 8, num_heads: 2, ..GatConfig::default() },
        };
        let state = ModelState::new(cfg, vocab, AdamWSettings::new(1e-3, 0.0), 4).unwrap();
        (g, state)
    }

    #[test]
    fn readout_cases() {
        let e = EmbeddingMatrix::new(Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]), vec![7]).unwrap();
        assert_eq!(readout(TaskLevel::Node, std::slice::from_ref(&e), &AnchorSpec::node(7)).unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(matches!(
            readout(TaskLevel::Node, &[e], &AnchorSpec::node(8)),
            Err(Error::AnchorNotInSet(8))
        ));
        let hv = EmbeddingMatrix::new(Matrix::from_rows(&[vec![1.0, 0.0]]), vec![0]).unwrap();
        let hu = EmbeddingMatrix::new(Matrix::from_rows(&[vec![0.0, 1.0]]), vec![1]).unwrap();
        assert_eq!(
            readout(TaskLevel::Edge, &[hv, hu], &AnchorSpec::edge(0, 1)).unwrap(),
            vec![1.0, 0.0, 0.0, 1.0]
        );
        let all = EmbeddingMatrix::new(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]), vec![0, 1]).unwrap();
        let spec = AnchorSpec { level: TaskLevel::Graph, anchors: vec![0, 1] };
        assert_eq!(readout(TaskLevel::Graph, &[all], &spec).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn unified_embedding_shapes_and_composition() {
        let (g, state) = fixture();
        let ppr = PprParams { topk: 3, ..PprParams::default() };
        let checksum = state.online.checksum();
        assert_eq!(unified_embedding(&state, &g, &AnchorSpec::node(2), &ppr).unwrap().len(), 8);
        let vu = unified_embedding(&state, &g, &AnchorSpec::edge(0, 3), &ppr).unwrap();
        let uv = unified_embedding(&state, &g, &AnchorSpec::edge(3, 0), &ppr).unwrap();
        assert_eq!(vu.len(), 16);
        assert_eq!(vu[..8], uv[8..]);
        assert_eq!(vu[8..], uv[..8]);
        let spec = AnchorSpec::graph(&g);
        let whole = embed_nodes(&state, &g.whole(), &g).unwrap();
        assert_eq!(
            unified_embedding(&state, &g, &spec, &ppr).unwrap(),
            readout(TaskLevel::Graph, &[whole], &spec).unwrap()
        );
        assert!(unified_embedding(&state, &g, &AnchorSpec { level: TaskLevel::Edge, anchors: vec![1] }, &ppr).is_err());
        assert_eq!(state.online.checksum(), checksum);
    }

    #[test]
    fn batched_inference_matches_per_subgraph_embedding() {
        let (g, state) = fixture();
        let ppr = PprParams { topk: 3, ..PprParams::default() };
        let all = embed_all_nodes(&state, &g, &ppr, EmbeddingSource::Gnn).unwrap();
        for v in 0..g.num_nodes() {
            let single = unified_embedding(&state, &g, &AnchorSpec::node(v), &ppr).unwrap();
            assert_eq!(all.rows.row(v), single.as_slice());
        }
        assert_eq!(all, embed_all_nodes(&state, &g, &ppr, EmbeddingSource::Gnn).unwrap());
        let lm_only = embed_all_nodes(&state, &g, &ppr, EmbeddingSource::LmCls).unwrap();
        assert_eq!(lm_only.rows.shape(), (5, 8));
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(1.0), "1");
        assert_eq!(format_sig9(-0.5), "-0.5");
        assert_eq!(format_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(format_sig9(123456789.4), "123456789");
        assert_eq!(format_sig9(1234567890.0), "1.23456789e+09");
        assert_eq!(format_sig9(1.5e-7), "1.5e-07");
        assert_eq!(format_sig9(0.0001), "0.0001");
        assert_eq!(format_sig9(2.0f64.sqrt()), "1.41421356");
    }

    #[test]
    fn tsv_round_trip() {
        let (g, state) = fixture();
        let ppr = PprParams { topk: 3, ..PprParams::default() };
        let emb = embed_all_nodes(&state, &g, &ppr, EmbeddingSource::Gnn).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.tsv");
        save_embeddings_tsv(&p, &emb, &g).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("#dim=8\n0\t"));
        let back = load_embeddings_tsv(&p).unwrap();
        assert_eq!(back.ids, vec![0, 1, 2, 3, 4]);
        let rel = back
            .rows
            .data()
            .iter()
            .zip(emb.rows.data())
            .map(|(a, b)| (a - b).abs() / b.abs().max(1e-300))
            .fold(0.0, f64::max);
        assert!(rel < 1e-8);
    }
}
