//! Instruction-tuning export: prompt templates per graph domain, rendered with
//! node markers whose embeddings are referenced by row index.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::{AnchorSpec, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::graph_store::TextAttributedGraph;
use crate::ppr::{approximate_ppr, top_k_context, PprParams, TaskLevel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Citation,
    Products,
    Web,
    Knowledge,
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "citation" => Ok(Self::Citation),
            "products" => Ok(Self::Products),
            "web" => Ok(Self::Web),
            "knowledge" => Ok(Self::Knowledge),
            other => Err(Error::InvalidParameter(format!("unknown domain {other:?}"))),
        }
    }
}

pub const NODE_V: &str = "{NODE_V}";
pub const NODE_U: &str = "{NODE_U}";
pub const NEIGHBORS: &str = "{NEIGHBORS}";
pub const TITLE: &str = "{TITLE}";
pub const ABSTRACT: &str = "{ABSTRACT}";
pub const NAME: &str = "{NAME}";
pub const CONTENT: &str = "{CONTENT}";
pub const NAME_U: &str = "{NAME_U}";
pub const CONTENT_U: &str = "{CONTENT_U}";
pub const CANDIDATE_LABELS: &str = "{CANDIDATE_LABELS}";

pub const ANSWER_SUFFIX: &str = "Answer: ";

const CITATION: &str = "Given a citation graph, node represents academic paper with a specific topic. {NODE_V} is featured with its content: {TITLE}, {ABSTRACT}. {NODE_V} and its contextual neighbor nodes {NEIGHBORS} are highly correlated. Question: Which category should {NODE_V} be classified as? Please strictly classify the paper into one of the following categories:{CANDIDATE_LABELS}. Answer: ";
const PRODUCTS: &str = "Given a products graph, node represents a product sold in Amazon with a specific category. {NODE_V} is featured with its content: {CONTENT}. {NODE_V} and its contextual neighbor nodes {NEIGHBORS} are highly correlated. Question: Which category should {NODE_V} be classified as? Please strictly classify the product into one of the following categories:{CANDIDATE_LABELS}. Answer: ";
const WEB: &str = "Given a Wikipedia graph, node represents Wikipedia page with a specific category. {NODE_V} is featured with its content: {NAME},{CONTENT}. {NODE_V} and its contextual neighbor nodes {NEIGHBORS} are highly correlated. Question: Which category should {NODE_V} be classified as? Please strictly classify the Wikipedia page into one of the following categories:{CANDIDATE_LABELS}. Answer: ";
const KNOWLEDGE: &str = "Given a knowledge graph, edge between two entities represents a relation with a specific category. Node one {NODE_V} is featured with its content: {NAME},{CONTENT}. Node two {NODE_U} is featured with its content: {NAME_U},{CONTENT_U}. Question: Which category should the relation between node one Node one {NODE_V} and node two {NODE_U} be classified as? Please strictly classify the relation into one of the following categories:{CANDIDATE_LABELS}. Answer: ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub domain: Domain,
    pub body: String,
}

impl PromptTemplate {
    pub fn builtin(domain: Domain) -> Self {
        let body = match domain {
            Domain::Citation => CITATION,
            Domain::Products => PRODUCTS,
            Domain::Web => WEB,
            Domain::Knowledge => KNOWLEDGE,
        };
        Self { domain, body: body.to_string() }
    }

    pub fn required_placeholders(domain: Domain) -> &'static [&'static str] {
        match domain {
            Domain::Citation => &[NODE_V, NEIGHBORS, TITLE, ABSTRACT, CANDIDATE_LABELS],
            Domain::Products => &[NODE_V, NEIGHBORS, CONTENT, CANDIDATE_LABELS],
            Domain::Web => &[NODE_V, NEIGHBORS, NAME, CONTENT, CANDIDATE_LABELS],
            Domain::Knowledge => &[NODE_V, NODE_U, NAME, CONTENT, NAME_U, CONTENT_U, CANDIDATE_LABELS],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = Self::required_placeholders(self.domain)
            .iter()
            .find(|p| !self.body.contains(**p))
        {
            return Err(Error::MissingPlaceholder(format!("template lacks {p}")));
        }
        if !self.body.ends_with(ANSWER_SUFFIX) {
            return Err(Error::MissingPlaceholder(format!("template must end with {ANSWER_SUFFIX:?}")));
        }
        Ok(())
    }

    fn arity(&self) -> usize {
        if self.domain == Domain::Knowledge {
            2
        } else {
            1
        }
    }
}

pub const MARKER_V: &str = "<node_v>";
pub const MARKER_U: &str = "<node_u>";

pub fn neighbor_marker(i: usize) -> String {
    format!("<node_{}>", i + 1)
}

/// Splits node text into a heading and a body: at the first newline, else
/// after the first sentence. Text without either is all heading.
pub fn split_heading(text: &str) -> (&str, &str) {
    if let Some((h, b)) = text.split_once('\n') {
        return (h.trim(), b.trim());
    }
    if let Some(i) = text.find(". ") {
        return (text[..i].trim(), text[i + 2..].trim());
    }
    (text.trim(), "")
}

/// Up to `cap` contextual neighbors of `v`, by descending PPR score.
pub fn contextual_neighbors(g: &TextAttributedGraph, v: usize, ppr: &PprParams, cap: usize) -> Result<Vec<usize>> {
    let scores = approximate_ppr(g, v, ppr)?;
    let mut ranked: Vec<(usize, f64)> = top_k_context(&scores, v, ppr.topk)
        .into_iter()
        .filter(|&u| u != v)
        .map(|u| (u, scores.get(u)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(cap);
    Ok(ranked.into_iter().map(|(u, _)| u).collect())
}

/// Fills a template. `neighbors` supplies the marker list for domains that
/// mention contextual nodes; only its length matters for the text.
pub fn render_prompt(
    template: &PromptTemplate,
    g: &TextAttributedGraph,
    anchors: &AnchorSpec,
    neighbors: &[usize],
    candidate_labels: &[String],
) -> Result<String> {
    template.validate()?;
    if candidate_labels.is_empty() {
        return Err(Error::MissingPlaceholder("no candidate labels".into()));
    }
    if anchors.anchors.len() != template.arity() {
        return Err(Error::MissingPlaceholder(format!(
            "{:?} template needs {} anchor(s), got {}",
            template.domain,
            template.arity(),
            anchors.anchors.len()
        )));
    }
    if let Some(&a) = anchors.anchors.iter().find(|&&a| a >= g.num_nodes()) {
        return Err(Error::NodeOutOfRange(a));
    }
    let v = anchors.anchors[0];
    let text_v = g.node_text(v);
    let (head_v, body_v) = split_heading(text_v);
    let markers: Vec<String> = (0..neighbors.len()).map(neighbor_marker).collect();
    let mut out = template.body.clone();
    let mut sub = |key: &str, value: &str| out = out.replace(key, value);
    sub(NODE_V, MARKER_V);
    sub(NODE_U, MARKER_U);
    sub(NEIGHBORS, &format!("{{{}}}", markers.join("; ")));
    sub(TITLE, head_v);
    sub(ABSTRACT, body_v);
    match template.domain {
        Domain::Products => sub(CONTENT, text_v.trim()),
        _ => {
            sub(NAME, head_v);
            sub(CONTENT, body_v);
        }
    }
    if let Some(&u) = anchors.anchors.get(1) {
        let (head_u, body_u) = split_heading(g.node_text(u));
        sub(NAME_U, head_u);
        sub(CONTENT_U, body_u);
    }
    sub(CANDIDATE_LABELS, &format!("[{}]", candidate_labels.join(", ")));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub prompt: String,
    /// Rows of the companion embedding file, in marker order
    /// (`<node_v>`, then `<node_u>` or `<node_1>`, `<node_2>`, ...).
    pub embedding_rows: Vec<usize>,
    pub target: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub embeddings: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExportOptions {
    pub neighbor_cap: usize,
    pub ppr: PprParams,
    pub inline: bool,
}

impl Default for ExportOptions {
    fn default() -> Self {
        Self {
            neighbor_cap: 8,
            ppr: PprParams::default(),
            inline: false,
        }
    }
}

/// Builds records in ascending anchor order. Node domains use `anchors` (the
/// labeled split); the knowledge domain emits one record per undirected edge
/// with its edge text as the target.
pub fn build_instruction_records(
    g: &TextAttributedGraph,
    emb: &EmbeddingMatrix,
    anchors: &[usize],
    template: &PromptTemplate,
    opts: &ExportOptions,
) -> Result<Vec<InstructionRecord>> {
    template.validate()?;
    let row = |v: usize| {
        emb.position(v)
            .ok_or_else(|| Error::MissingPlaceholder(format!("node {v} has no embedding row")))
    };
    let inline = |rows: &[usize]| {
        opts.inline
            .then(|| rows.iter().map(|&r| emb.rows.row(r).to_vec()).collect())
    };
    let mut records = Vec::new();
    if template.domain == Domain::Knowledge {
        let texts = g.edge_texts().ok_or(Error::NoEdgeTexts)?;
        let mut labels: Vec<String> = texts.to_vec();
        labels.sort_unstable();
        labels.dedup();
        for (v, u) in g.undirected_edges() {
            let idx = g.edge_index(v, u).expect("edge from the edge list");
            let prompt = render_prompt(template, g, &AnchorSpec::edge(v, u), &[], &labels)?;
            let rows = vec![row(v)?, row(u)?];
            records.push(InstructionRecord {
                prompt,
                embeddings: inline(&rows),
                embedding_rows: rows,
                target: texts[idx].clone(),
            });
        }
        return Ok(records);
    }
    let labels = g.label_set();
    let mut sorted = anchors.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    for v in sorted {
        if v >= g.num_nodes() {
            return Err(Error::NodeOutOfRange(v));
        }
        let target = g.label(v).ok_or(Error::UnlabeledAnchor(v))?.to_string();
        let neighbors = contextual_neighbors(g, v, &opts.ppr, opts.neighbor_cap)?;
        let prompt = render_prompt(template, g, &AnchorSpec::node(v), &neighbors, &labels)?;
        let mut rows = vec![row(v)?];
        for &u in &neighbors {
            rows.push(row(u)?);
        }
        records.push(InstructionRecord {
            prompt,
            embeddings: inline(&rows),
            embedding_rows: rows,
            target,
        });
    }
    Ok(records)
}

/// Writes JSON Lines and returns the record count.
pub fn emit_instruction_dataset(
    g: &TextAttributedGraph,
    emb: &EmbeddingMatrix,
    anchors: &[usize],
    template: &PromptTemplate,
    opts: &ExportOptions,
    out_path: &Path,
) -> Result<usize> {
    let records = build_instruction_records(g, emb, anchors, template, opts)?;
    let mut w = BufWriter::new(File::create(out_path)?);
    for r in &records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(records.len())
}

/// Anchor level implied by a domain.
pub fn domain_level(domain: Domain) -> TaskLevel {
    match domain {
        Domain::Knowledge => TaskLevel::Edge,
        _ => TaskLevel::Node,
    }
}
