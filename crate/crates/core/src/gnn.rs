//! Graph attention propagation over node `[CLS]` embeddings.
//!
//! Layer `l` computes `z = H W + b` (one block of width `d` per head),
//! attends over each node's neighborhood plus a self loop, averages the
//! heads, applies the nonlinearity and optionally adds the layer input back.
//! With edge features, the message from `u` to `v` is `z_u ⊙ x_{e_uv}`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Activation, AttentionAdjacency, Tape, Var};
use crate::error::{Error, Result};
use crate::graph_store::{ContextSubgraph, TextAttributedGraph};
use crate::lm::{self, linear, LmConfig, Mode};
use crate::params::{Bound, ParamStore};
use crate::tensor::Matrix;
use crate::text::{tokenize, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatConfig {
    pub num_layers: usize,
    pub d: usize,
    pub num_heads: usize,
    pub attention_dropout: f64,
    pub nonlinearity: Activation,
    pub residual: bool,
}

impl Default for GatConfig {
    fn default() -> Self {
        Self {
            num_layers: 3,
            d: 64,
            num_heads: 4,
            attention_dropout: 0.0,
            nonlinearity: Activation::Elu,
            residual: true,
        }
    }
}

impl GatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::InvalidParameter("num_gnn_layers must be >= 1".into()));
        }
        if self.num_heads == 0 || !self.d.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidParameter(format!(
                "gnn width {} must be a multiple of num_heads {}",
                self.d, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.attention_dropout) {
            return Err(Error::InvalidParameter("attention_dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Edge vectors aligned with the parent graph's CSR entries.
#[derive(Debug, Clone)]
pub struct EdgeFeatureTable {
    pub rows: Arc<Matrix>,
}

pub fn init_gnn_params<R: Rng + ?Sized>(cfg: &GatConfig, rng: &mut R, store: &mut ParamStore) {
    let d = cfg.d;
    let h = cfg.num_heads;
    let bd = 1.0 / (d as f64).sqrt();
    for l in 0..cfg.num_layers {
        let p = format!("gnn.layer{l}");
        store.insert(format!("{p}.w"), Matrix::uniform(d, h * d, bd, rng));
        store.insert(format!("{p}.b"), Matrix::zeros(1, h * d));
        store.insert(format!("{p}.a_src"), Matrix::uniform(h, d, bd, rng));
        store.insert(format!("{p}.a_dst"), Matrix::uniform(h, d, bd, rng));
    }
}

/// Self loop first, then neighbors in ascending local id.
pub fn attention_adjacency(sub: &ContextSubgraph, edge_feats: Option<&EdgeFeatureTable>) -> AttentionAdjacency {
    let n = sub.num_nodes();
    let mut offsets = Vec::with_capacity(n + 1);
    let mut sources = Vec::with_capacity(n + sub.num_edge_entries());
    let mut edge_rows = Vec::with_capacity(sources.capacity());
    offsets.push(0);
    for v in 0..n {
        sources.push(v);
        edge_rows.push(None);
        let lo = sub.csr_offsets[v];
        for (i, &u) in sub.neighbors(v).iter().enumerate() {
            sources.push(u);
            edge_rows.push(edge_feats.map(|_| sub.parent_edges[lo + i]));
        }
        offsets.push(sources.len());
    }
    AttentionAdjacency {
        offsets,
        sources,
        edge_rows,
        edge_features: edge_feats.map(|t| t.rows.clone()),
    }
}

/// Returns the output variable and, per layer, the graph-attention variable.
pub fn gnn_forward_tape(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    cfg: &GatConfig,
    adj: &Arc<AttentionAdjacency>,
    x: Var,
    mode: &mut Mode<'_>,
) -> (Var, Vec<Var>) {
    let mut h = x;
    let mut attn_vars = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let pre = format!("{prefix}.layer{l}");
        let z = linear(tape, p, h, &format!("{pre}.w"), &format!("{pre}.b"));
        let keep = match mode {
            Mode::Train(rng) if cfg.attention_dropout > 0.0 => {
                let pdrop = cfg.attention_dropout;
                let scale = 1.0 / (1.0 - pdrop);
                Some(
                    (0..adj.sources.len() * cfg.num_heads)
                        .map(|_| if rng.gen::<f64>() < pdrop { 0.0 } else { scale })
                        .collect(),
                )
            }
            _ => None,
        };
        let agg = tape.graph_attention(
            z,
            p.var(&format!("{pre}.a_src")),
            p.var(&format!("{pre}.a_dst")),
            adj.clone(),
            cfg.num_heads,
            keep,
        );
        attn_vars.push(agg);
        let act = tape.activation(agg, cfg.nonlinearity);
        h = if cfg.residual { tape.add(act, h) } else { act };
    }
    (h, attn_vars)
}

/// Evaluation-mode propagation with an explicit parameter set (`gnn.*` keys).
pub fn gnn_forward(
    params: &ParamStore,
    cfg: &GatConfig,
    sub: &ContextSubgraph,
    cls: &Matrix,
    edge_feats: Option<&EdgeFeatureTable>,
) -> Result<Matrix> {
    if cls.rows() != sub.num_nodes() || cls.cols() != cfg.d {
        return Err(Error::ShapeMismatch(format!(
            "cls matrix is {}x{}, subgraph has {} nodes and width {}",
            cls.rows(),
            cls.cols(),
            sub.num_nodes(),
            cfg.d
        )));
    }
    if let Some(t) = edge_feats {
        if t.rows.cols() != cfg.d {
            return Err(Error::ShapeMismatch("edge feature width != d".into()));
        }
    }
    let adj = Arc::new(attention_adjacency(sub, edge_feats));
    let mut tape = Tape::new();
    let bound = params.with_prefix("gnn.").bind(&mut tape, false);
    let x = tape.constant(cls.clone());
    let (out, _) = gnn_forward_tape(&mut tape, &bound, "gnn", cfg, &adj, x, &mut Mode::Eval);
    Ok(tape.value(out).clone())
}

/// Runs each edge text through the language model once; identical texts
/// share one encoding. No gradient flows through the result.
pub fn encode_edge_features(
    lm_params: &ParamStore,
    lm_cfg: &LmConfig,
    vocab: &Vocab,
    g: &TextAttributedGraph,
) -> Result<EdgeFeatureTable> {
    let texts = g.edge_texts().ok_or(Error::NoEdgeTexts)?;
    let mut distinct: Vec<&str> = texts.iter().map(String::as_str).collect();
    distinct.sort_unstable();
    distinct.dedup();
    let seqs: Vec<Vec<usize>> = distinct
        .iter()
        .map(|t| tokenize(vocab, t, lm_cfg.max_len).ids)
        .collect();
    let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
    let cls = lm::lm_cls(lm_params, lm_cfg, &refs)?;
    let mut data = Vec::with_capacity(texts.len() * lm_cfg.d);
    for t in texts {
        let i = distinct.binary_search(&t.as_str()).expect("text indexed above");
        data.extend_from_slice(cls.row(i));
    }
    Ok(EdgeFeatureTable {
        rows: Arc::new(Matrix::from_vec(texts.len(), lm_cfg.d, data)),
    })
}
