//! Approximate personalized PageRank by forward push, and the top-k
//! contextual subgraphs built from it.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_store::{ContextSubgraph, TextAttributedGraph};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PprParams {
    /// Teleport (restart) probability.
    pub alpha: f64,
    /// Push threshold: a node is pushed while `r(u) >= epsilon * deg(u)`.
    pub epsilon: f64,
    pub topk: usize,
}

impl Default for PprParams {
    fn default() -> Self {
        Self {
            alpha: 0.15,
            epsilon: 1e-6,
            topk: 128,
        }
    }
}

impl PprParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha must be in (0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if self.topk == 0 {
            return Err(Error::InvalidParameter("topk must be >= 1".into()));
        }
        Ok(())
    }
}

/// Sparse PPR estimate, keyed by node id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PprScores {
    pub entries: BTreeMap<usize, f64>,
}

impl PprScores {
    pub fn get(&self, v: usize) -> f64 {
        self.entries.get(&v).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.entries.values().sum()
    }
}

/// Push estimate together with the leftover residual mass.
#[derive(Debug, Clone)]
pub struct PushState {
    pub scores: PprScores,
    pub residuals: BTreeMap<usize, f64>,
    pub pushes: usize,
}

pub fn approximate_ppr(g: &TextAttributedGraph, anchor: usize, params: &PprParams) -> Result<PprScores> {
    Ok(forward_push(g, anchor, params)?.scores)
}

/// Forward push with a FIFO work queue. Nodes enter the queue in the order
/// their residual first crosses the threshold; neighbors are visited in
/// ascending id order.
pub fn forward_push(g: &TextAttributedGraph, anchor: usize, params: &PprParams) -> Result<PushState> {
    params.validate()?;
    if anchor >= g.num_nodes() {
        return Err(Error::NodeOutOfRange(anchor));
    }
    let mut scores = BTreeMap::new();
    if g.degree(anchor) == 0 || params.alpha == 1.0 {
        scores.insert(anchor, 1.0);
        return Ok(PushState {
            scores: PprScores { entries: scores },
            residuals: BTreeMap::new(),
            pushes: 0,
        });
    }
    // Dense scratch sized to the graph; only touched entries are reported.
    let n = g.num_nodes();
    let mut p = vec![0.0; n];
    let mut r = vec![0.0; n];
    let mut queued = vec![false; n];
    let mut touched = vec![anchor];
    let mut seen = vec![false; n];
    seen[anchor] = true;
    r[anchor] = 1.0;
    let mut queue = VecDeque::from([anchor]);
    queued[anchor] = true;
    let mut pushes = 0;
    while let Some(u) = queue.pop_front() {
        queued[u] = false;
        let deg = g.degree(u);
        let ru = r[u];
        if ru < params.epsilon * deg as f64 {
            continue;
        }
        pushes += 1;
        p[u] += params.alpha * ru;
        r[u] = 0.0;
        let share = (1.0 - params.alpha) * ru / deg as f64;
        for &w in g.neighbors_unchecked(u) {
            if !seen[w] {
                seen[w] = true;
                touched.push(w);
            }
            r[w] += share;
            if !queued[w] && r[w] >= params.epsilon * g.degree(w) as f64 {
                queued[w] = true;
                queue.push_back(w);
            }
        }
    }
    let mut residuals = BTreeMap::new();
    for &v in &touched {
        if p[v] > 0.0 {
            scores.insert(v, p[v]);
        }
        if r[v] > 0.0 {
            residuals.insert(v, r[v]);
        }
    }
    Ok(PushState {
        scores: PprScores { entries: scores },
        residuals,
        pushes,
    })
}

/// Anchor plus the `k` highest-scoring other nodes (ties: ascending id).
/// The result is sorted ascending.
pub fn top_k_context(scores: &PprScores, anchor: usize, k: usize) -> Vec<usize> {
    let mut ranked: Vec<(usize, f64)> = scores
        .entries
        .iter()
        .filter(|&(&v, &s)| v != anchor && s > 0.0)
        .map(|(&v, &s)| (v, s))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out: Vec<usize> = ranked.into_iter().take(k).map(|(v, _)| v).collect();
    out.push(anchor);
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskLevel {
    Node,
    Edge,
    Graph,
}

impl std::str::FromStr for TaskLevel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "node" => Ok(Self::Node),
            "edge" => Ok(Self::Edge),
            "graph" => Ok(Self::Graph),
            other => Err(Error::InvalidParameter(format!("unknown task level {other:?}"))),
        }
    }
}

/// PPR contextual subgraph of a single anchor.
pub fn context_subgraph(g: &TextAttributedGraph, anchor: usize, params: &PprParams) -> Result<ContextSubgraph> {
    let scores = approximate_ppr(g, anchor, params)?;
    let nodes = top_k_context(&scores, anchor, params.topk);
    g.induced_subgraph(&nodes, anchor)
}

pub fn contextual_subgraphs_for_task(
    g: &TextAttributedGraph,
    anchors: &[usize],
    level: TaskLevel,
    params: &PprParams,
) -> Result<Vec<ContextSubgraph>> {
    match level {
        TaskLevel::Node => {
            if anchors.len() != 1 {
                return Err(Error::InvalidParameter(format!(
                    "node level takes 1 anchor, got {}",
                    anchors.len()
                )));
            }
            Ok(vec![context_subgraph(g, anchors[0], params)?])
        }
        TaskLevel::Edge => {
            if anchors.len() != 2 {
                return Err(Error::InvalidParameter(format!(
                    "edge level takes 2 anchors, got {}",
                    anchors.len()
                )));
            }
            Ok(vec![
                context_subgraph(g, anchors[0], params)?,
                context_subgraph(g, anchors[1], params)?,
            ])
        }
        TaskLevel::Graph => Ok(vec![g.whole()]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_store::EdgeInput;

    fn graph(n: usize, edges: &[(usize, usize)]) -> TextAttributedGraph {
        TextAttributedGraph::from_edges(
            vec![String::new(); n],
            edges
                .iter()
                .map(|&(src, dst)| EdgeInput { src, dst, text: None })
                .collect(),
            None,
            None,
        )
        .unwrap()
    }

    /// Power iteration of `pi = alpha e_s + (1 - alpha) P^T pi`.
    fn power_iteration(g: &TextAttributedGraph, s: usize, alpha: f64) -> Vec<f64> {
        let n = g.num_nodes();
        let mut pi = vec![0.0; n];
        pi[s] = 1.0;
        for _ in 0..10_000 {
            let mut next = vec![0.0; n];
            next[s] += alpha;
            for u in 0..n {
                let d = g.degree(u) as f64;
                for &w in g.neighbors_unchecked(u) {
                    next[w] += (1.0 - alpha) * pi[u] / d;
                }
            }
            let delta = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            pi = next;
            if delta < 1e-15 {
                break;
            }
        }
        pi
    }

    #[test]
    fn trivial_cases() {
        let one = graph(1, &[]);
        let s = approximate_ppr(&one, 0, &PprParams::default()).unwrap();
        assert_eq!(s.entries, BTreeMap::from([(0, 1.0)]));

        let p = graph(3, &[(0, 1), (1, 2)]);
        let params = PprParams { alpha: 1.0, ..Default::default() };
        let s = approximate_ppr(&p, 1, &params).unwrap();
        assert_eq!(s.entries, BTreeMap::from([(1, 1.0)]));
    }

    #[test]
    fn path_matches_power_iteration() {
        let g = graph(3, &[(0, 1), (1, 2)]);
        let params = PprParams { alpha: 0.15, epsilon: 1e-9, topk: 128 };
        let state = forward_push(&g, 0, &params).unwrap();
        let oracle = power_iteration(&g, 0, 0.15);
        for (v, o) in oracle.iter().enumerate() {
            assert!((state.scores.get(v) - o).abs() < 1e-6, "node {v}");
        }
        for (&v, &r) in &state.residuals {
            assert!(r < params.epsilon * g.degree(v) as f64);
        }
    }

    #[test]
    fn top_k_ordering_and_ties() {
        let s = PprScores {
            entries: BTreeMap::from([(0, 0.5), (1, 0.3), (2, 0.2)]),
        };
        assert_eq!(top_k_context(&s, 0, 1), vec![0, 1]);
        assert_eq!(top_k_context(&s, 0, 10), vec![0, 1, 2]);
        let tie = PprScores {
            entries: BTreeMap::from([(0, 0.4), (3, 0.2), (1, 0.2), (2, 0.2)]),
        };
        assert_eq!(top_k_context(&tie, 0, 2), vec![0, 1, 2]);
        // anchor is kept even without a score
        assert_eq!(top_k_context(&s, 9, 1), vec![0, 9]);
    }

    #[test]
    fn task_levels() {
        let g = graph(4, &[(0, 1), (1, 2), (2, 3)]);
        let p = PprParams::default();
        let node = contextual_subgraphs_for_task(&g, &[1], TaskLevel::Node, &p).unwrap();
        assert_eq!(node.len(), 1);
        assert_eq!(node[0].anchor_global(), 1);
        let edge = contextual_subgraphs_for_task(&g, &[3, 0], TaskLevel::Edge, &p).unwrap();
        assert_eq!(
            edge.iter().map(ContextSubgraph::anchor_global).collect::<Vec<_>>(),
            vec![3, 0]
        );
        let mol = graph(20, &(0..19).map(|i| (i, i + 1)).collect::<Vec<_>>());
        let whole = contextual_subgraphs_for_task(&mol, &[], TaskLevel::Graph, &p).unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!(whole[0].num_nodes(), 20);
        assert!(contextual_subgraphs_for_task(&g, &[1], TaskLevel::Edge, &p).is_err());
        assert!(contextual_subgraphs_for_task(&g, &[1, 2], TaskLevel::Node, &p).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(PprParams { alpha: 0.0, ..Default::default() }.validate().is_err());
        assert!(PprParams { epsilon: 0.0, ..Default::default() }.validate().is_err());
        assert!(PprParams { topk: 0, ..Default::default() }.validate().is_err());
    }
}
