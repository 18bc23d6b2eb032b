//! Immutable text-attributed graphs in symmetrized CSR form.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextAttributedGraph {
    num_nodes: usize,
    csr_offsets: Vec<usize>,
    csr_targets: Vec<usize>,
    node_texts: Vec<String>,
    edge_texts: Option<Vec<String>>,
    labels: Option<Vec<Option<String>>>,
    splits: Option<Splits>,
    original_ids: Vec<i64>,
}

/// One undirected input edge, before symmetrization.
#[derive(Debug, Clone)]
pub struct EdgeInput {
    pub src: usize,
    pub dst: usize,
    pub text: Option<String>,
}

impl TextAttributedGraph {
    /// Builds a graph from dense node ids. Directions are deduplicated and
    /// every edge is stored in both CSR rows; self loops are dropped.
    pub fn from_edges(
        node_texts: Vec<String>,
        edges: Vec<EdgeInput>,
        labels: Option<Vec<Option<String>>>,
        splits: Option<Splits>,
    ) -> Result<Self> {
        let n = node_texts.len();
        let original_ids = (0..n as i64).collect();
        Self::build(node_texts, edges, labels, splits, original_ids)
    }

    fn build(
        node_texts: Vec<String>,
        edges: Vec<EdgeInput>,
        labels: Option<Vec<Option<String>>>,
        splits: Option<Splits>,
        original_ids: Vec<i64>,
    ) -> Result<Self> {
        let n = node_texts.len();
        let any_text = edges.iter().any(|e| e.text.is_some());
        let mut pairs: BTreeMap<(usize, usize), Option<String>> = BTreeMap::new();
        for e in edges {
            if e.src >= n || e.dst >= n {
                return Err(Error::DanglingEndpoint {
                    src: e.src as i64,
                    dst: e.dst as i64,
                });
            }
            if e.src == e.dst {
                continue;
            }
            let key = (e.src.min(e.dst), e.src.max(e.dst));
            let slot = pairs.entry(key).or_insert(None);
            if slot.is_none() {
                *slot = e.text;
            }
        }
        let mut adj: Vec<Vec<(usize, Option<&str>)>> = vec![Vec::new(); n];
        for (&(u, v), text) in &pairs {
            adj[u].push((v, text.as_deref()));
            adj[v].push((u, text.as_deref()));
        }
        let mut csr_offsets = Vec::with_capacity(n + 1);
        let mut csr_targets = Vec::with_capacity(pairs.len() * 2);
        let mut edge_texts = any_text.then(Vec::new);
        csr_offsets.push(0);
        for row in &mut adj {
            row.sort_by_key(|&(t, _)| t);
            for &(t, text) in row.iter() {
                csr_targets.push(t);
                if let Some(et) = edge_texts.as_mut() {
                    et.push(text.unwrap_or_default().to_string());
                }
            }
            csr_offsets.push(csr_targets.len());
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::InvalidGraph(format!(
                    "label vector has {} entries for {n} nodes",
                    l.len()
                )));
            }
        }
        let g = Self {
            num_nodes: n,
            csr_offsets,
            csr_targets,
            node_texts,
            edge_texts,
            labels,
            splits,
            original_ids,
        };
        g.validate()?;
        Ok(g)
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes;
        let bad = |m: String| Err(Error::InvalidGraph(m));
        if self.csr_offsets.len() != n + 1 || self.csr_offsets[0] != 0 {
            return bad("csr_offsets must have num_nodes+1 entries starting at 0".into());
        }
        if self.csr_offsets.windows(2).any(|w| w[0] > w[1]) {
            return bad("csr_offsets must be nondecreasing".into());
        }
        if self.csr_offsets[n] != self.csr_targets.len() {
            return bad("csr_offsets[n] != len(csr_targets)".into());
        }
        if let Some(&t) = self.csr_targets.iter().find(|&&t| t >= n) {
            return bad(format!("target {t} out of range"));
        }
        if self.node_texts.len() != n || self.original_ids.len() != n {
            return bad("one text and one original id per node required".into());
        }
        if let Some(et) = &self.edge_texts {
            if et.len() != self.csr_targets.len() {
                return bad("edge_texts must align with csr_targets".into());
            }
        }
        for u in 0..n {
            for &v in self.neighbors_unchecked(u) {
                if self.neighbors_unchecked(v).binary_search(&u).is_err() {
                    return bad(format!("edge ({u},{v}) has no reverse entry"));
                }
            }
        }
        if let Some(s) = &self.splits {
            let mut seen = vec![false; n];
            for &v in s.train.iter().chain(&s.valid).chain(&s.test) {
                if v >= n {
                    return bad(format!("split node {v} out of range"));
                }
                if seen[v] {
                    return bad(format!("node {v} appears in more than one split"));
                }
                seen[v] = true;
            }
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Number of directed CSR entries (twice the undirected edge count).
    pub fn num_edge_entries(&self) -> usize {
        self.csr_targets.len()
    }

    pub fn csr_offsets(&self) -> &[usize] {
        &self.csr_offsets
    }

    pub fn csr_targets(&self) -> &[usize] {
        &self.csr_targets
    }

    pub fn node_texts(&self) -> &[String] {
        &self.node_texts
    }

    pub fn node_text(&self, v: usize) -> &str {
        &self.node_texts[v]
    }

    pub fn edge_texts(&self) -> Option<&[String]> {
        self.edge_texts.as_deref()
    }

    pub fn labels(&self) -> Option<&[Option<String>]> {
        self.labels.as_deref()
    }

    pub fn label(&self, v: usize) -> Option<&str> {
        self.labels.as_ref().and_then(|l| l[v].as_deref())
    }

    pub fn splits(&self) -> Option<&Splits> {
        self.splits.as_ref()
    }

    /// Input-file id of each dense node.
    pub fn original_ids(&self) -> &[i64] {
        &self.original_ids
    }

    pub fn degree(&self, v: usize) -> usize {
        self.csr_offsets[v + 1] - self.csr_offsets[v]
    }

    pub fn neighbors(&self, v: usize) -> Result<&[usize]> {
        if v >= self.num_nodes {
            return Err(Error::NodeOutOfRange(v));
        }
        Ok(self.neighbors_unchecked(v))
    }

    #[inline]
    pub fn neighbors_unchecked(&self, v: usize) -> &[usize] {
        &self.csr_targets[self.csr_offsets[v]..self.csr_offsets[v + 1]]
    }

    /// Undirected edges `(u, v)` with `u < v`, ascending.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.csr_targets.len() / 2);
        for u in 0..self.num_nodes {
            for &v in self.neighbors_unchecked(u) {
                if u < v {
                    out.push((u, v));
                }
            }
        }
        out
    }

    /// CSR position of the entry `u -> v`, if present.
    pub fn edge_index(&self, u: usize, v: usize) -> Option<usize> {
        self.neighbors_unchecked(u)
            .binary_search(&v)
            .ok()
            .map(|i| self.csr_offsets[u] + i)
    }

    /// Distinct labels in ascending order.
    pub fn label_set(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .labels
            .iter()
            .flatten()
            .flatten()
            .cloned()
            .collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn dense_id(&self, original: i64) -> Option<usize> {
        if self.original_ids.windows(2).all(|w| w[0] < w[1]) {
            self.original_ids.binary_search(&original).ok()
        } else {
            self.original_ids.iter().position(|&o| o == original)
        }
    }

    /// Extracts the subgraph induced by `node_set`. Local ids follow
    /// ascending global id.
    pub fn induced_subgraph(&self, node_set: &[usize], anchor: usize) -> Result<ContextSubgraph> {
        let mut nodes = node_set.to_vec();
        nodes.sort_unstable();
        nodes.dedup();
        if let Some(&bad) = nodes.iter().find(|&&v| v >= self.num_nodes) {
            return Err(Error::NodeOutOfRange(bad));
        }
        let anchor_local = nodes
            .binary_search(&anchor)
            .map_err(|_| Error::AnchorNotInSet(anchor))?;
        let mut offsets = Vec::with_capacity(nodes.len() + 1);
        let mut targets = Vec::new();
        let mut parent_edges = Vec::new();
        offsets.push(0);
        for &g in &nodes {
            let base = self.csr_offsets[g];
            for (i, t) in self.neighbors_unchecked(g).iter().enumerate() {
                if let Ok(local) = nodes.binary_search(t) {
                    targets.push(local);
                    parent_edges.push(base + i);
                }
            }
            offsets.push(targets.len());
        }
        Ok(ContextSubgraph {
            local_to_global: nodes,
            anchor_local,
            csr_offsets: offsets,
            csr_targets: targets,
            parent_edges,
        })
    }

    /// The whole graph as a context subgraph anchored at node 0.
    pub fn whole(&self) -> ContextSubgraph {
        ContextSubgraph {
            local_to_global: (0..self.num_nodes).collect(),
            anchor_local: 0,
            csr_offsets: self.csr_offsets.clone(),
            csr_targets: self.csr_targets.clone(),
            parent_edges: (0..self.csr_targets.len()).collect(),
        }
    }
}

/// Anchor-centred induced subgraph with local ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextSubgraph {
    pub local_to_global: Vec<usize>,
    pub anchor_local: usize,
    pub csr_offsets: Vec<usize>,
    pub csr_targets: Vec<usize>,
    /// Parent CSR position of every local entry.
    pub parent_edges: Vec<usize>,
}

impl ContextSubgraph {
    pub fn num_nodes(&self) -> usize {
        self.local_to_global.len()
    }

    pub fn num_edge_entries(&self) -> usize {
        self.csr_targets.len()
    }

    pub fn anchor_global(&self) -> usize {
        self.local_to_global[self.anchor_local]
    }

    pub fn neighbors(&self, local: usize) -> &[usize] {
        &self.csr_targets[self.csr_offsets[local]..self.csr_offsets[local + 1]]
    }

    pub fn local_of(&self, global: usize) -> Option<usize> {
        self.local_to_global.binary_search(&global).ok()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRecord {
    id: i64,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeRecord {
    src: i64,
    dst: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitsRecord {
    #[serde(default)]
    train: Vec<i64>,
    #[serde(default)]
    valid: Vec<i64>,
    #[serde(default)]
    test: Vec<i64>,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

/// Reads the node/edge JSON Lines files (and optional splits object).
/// Node ids are remapped to `0..n` in ascending id order.
pub fn load_tag(
    nodes_path: &Path,
    edges_path: &Path,
    splits_path: Option<&Path>,
) -> Result<TextAttributedGraph> {
    let mut nodes: Vec<NodeRecord> = read_jsonl::<NodeRecord>(nodes_path)?
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    nodes.sort_by_key(|r| r.id);
    if let Some(w) = nodes.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(Error::DuplicateNode(w[0].id));
    }
    let original_ids: Vec<i64> = nodes.iter().map(|r| r.id).collect();
    let lookup = |id: i64| original_ids.binary_search(&id).ok();
    let any_label = nodes.iter().any(|r| r.label.is_some());
    let labels = any_label.then(|| nodes.iter().map(|r| r.label.clone()).collect());
    let texts: Vec<String> = nodes.into_iter().map(|r| r.text).collect();

    let mut edges = Vec::new();
    for (_, e) in read_jsonl::<EdgeRecord>(edges_path)? {
        match (lookup(e.src), lookup(e.dst)) {
            (Some(src), Some(dst)) => edges.push(EdgeInput {
                src,
                dst,
                text: e.text,
            }),
            _ => {
                return Err(Error::DanglingEndpoint {
                    src: e.src,
                    dst: e.dst,
                })
            }
        }
    }

    let splits = match splits_path {
        None => None,
        Some(p) => {
            let rec: SplitsRecord = serde_json::from_reader(BufReader::new(File::open(p)?))
                .map_err(|e| Error::MalformedRecord {
                    path: p.display().to_string(),
                    line: e.line(),
                    message: e.to_string(),
                })?;
            let map = |ids: Vec<i64>| -> Result<Vec<usize>> {
                ids.into_iter()
                    .map(|id| {
                        lookup(id).ok_or_else(|| {
                            Error::InvalidGraph(format!("split references unknown node {id}"))
                        })
                    })
                    .collect()
            };
            Some(Splits {
                train: map(rec.train)?,
                valid: map(rec.valid)?,
                test: map(rec.test)?,
            })
        }
    };
    TextAttributedGraph::build(texts, edges, labels, splits, original_ids)
}

/// Writes the graph back out in the `load_tag` formats, using original ids.
pub fn save_tag(
    g: &TextAttributedGraph,
    nodes_path: &Path,
    edges_path: &Path,
    splits_path: Option<&Path>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(nodes_path)?);
    for v in 0..g.num_nodes() {
        let rec = NodeRecord {
            id: g.original_ids[v],
            text: g.node_texts[v].clone(),
            label: g.label(v).map(str::to_string),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let mut w = BufWriter::new(File::create(edges_path)?);
    for (u, v) in g.undirected_edges() {
        let text = g
            .edge_texts()
            .map(|et| et[g.edge_index(u, v).expect("edge present")].clone());
        let rec = EdgeRecord {
            src: g.original_ids[u],
            dst: g.original_ids[v],
            text,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    if let (Some(p), Some(s)) = (splits_path, g.splits()) {
        let orig = |ids: &[usize]| ids.iter().map(|&v| g.original_ids[v]).collect();
        let rec = SplitsRecord {
            train: orig(&s.train),
            valid: orig(&s.valid),
            test: orig(&s.test),
        };
        let mut w = BufWriter::new(File::create(p)?);
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
        w.flush()?;
    }
    Ok(())
}

/// Content words drawn from the class vocabulary per synthetic node.
pub const SYNTH_CLASS_WORDS: usize = 8;
/// Shared noise words per synthetic node.
pub const SYNTH_NOISE_WORDS: usize = 4;

/// Deterministic pronounceable pseudo-words for synthetic corpora.
pub fn synthetic_vocabulary(count: usize) -> Vec<String> {
    const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    (0..count)
        .map(|i| {
            let a = ONSETS[i % 12];
            let b = VOWELS[(i / 12) % 5];
            let c = ONSETS[(i / 60 + 7 * i) % 12];
            let d = VOWELS[(i / 3) % 5];
            format!("{a}{b}{c}{d}{}", i / 60)
        })
        .collect()
}

/// Stochastic block model fixture. Vocabulary word `i` belongs to class
/// `i % (num_classes + 1)`; the last residue class is shared noise.
pub fn generate_synthetic_tag(
    num_classes: usize,
    nodes_per_class: usize,
    intra_p: f64,
    inter_p: f64,
    vocab_words: &[String],
    seed: u64,
) -> TextAttributedGraph {
    let intra_p = intra_p.clamp(0.0, 1.0);
    let inter_p = inter_p.clamp(0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = num_classes * nodes_per_class;
    let groups = num_classes + 1;
    let mut class_words: Vec<Vec<&str>> = vec![Vec::new(); groups];
    for (i, w) in vocab_words.iter().enumerate() {
        class_words[i % groups].push(w);
    }
    let class_of = |v: usize| v / nodes_per_class.max(1);

    let mut texts = Vec::with_capacity(n);
    for v in 0..n {
        let c = class_of(v);
        let mut words: Vec<&str> = Vec::new();
        if !class_words[c].is_empty() {
            for _ in 0..SYNTH_CLASS_WORDS {
                words.push(class_words[c][rng.gen_range(0..class_words[c].len())]);
            }
        }
        let noise = &class_words[num_classes];
        if !noise.is_empty() {
            for _ in 0..SYNTH_NOISE_WORDS {
                words.push(noise[rng.gen_range(0..noise.len())]);
            }
        }
        words.shuffle(&mut rng);
        texts.push(words.join(" "));
    }

    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if class_of(u) == class_of(v) {
                intra_p
            } else {
                inter_p
            };
            if rng.gen::<f64>() < p {
                edges.push(EdgeInput {
                    src: u,
                    dst: v,
                    text: None,
                });
            }
        }
    }

    let labels = (0..n).map(|v| Some(class_of(v).to_string())).collect();
    let mut splits = Splits::default();
    for c in 0..num_classes {
        let mut members: Vec<usize> = (c * nodes_per_class..(c + 1) * nodes_per_class).collect();
        members.shuffle(&mut rng);
        let n_train = nodes_per_class * 6 / 10;
        let n_valid = nodes_per_class * 2 / 10;
        splits.train.extend_from_slice(&members[..n_train]);
        splits.valid.extend_from_slice(&members[n_train..n_train + n_valid]);
        splits.test.extend_from_slice(&members[n_train + n_valid..]);
    }
    splits.train.sort_unstable();
    splits.valid.sort_unstable();
    splits.test.sort_unstable();

    TextAttributedGraph::from_edges(texts, edges, Some(labels), Some(splits))
        .expect("synthetic graph is valid by construction")
}
