//! Masked graph modeling with a latent regression onto an EMA target network.
//!
//! One step: build the union of the anchors' PPR subgraphs, mask every node's
//! text, run the online LM and GNN, decode the masked tokens conditioned on
//! the propagated `[CLS]`, regress a projection of the online `[CLS]` onto the
//! target network's output for the unmasked text, then update and apply EMA.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::gnn::{self, attention_adjacency, EdgeFeatureTable, GatConfig};
use crate::graph_store::{ContextSubgraph, EdgeInput, TextAttributedGraph};
use crate::lm::{self, linear, LmConfig, Mode};
use crate::model::{decoder_forward_tape, ModelConfig, ModelState};
use crate::optim::AdamWSettings;
use crate::params::Bound;
use crate::ppr::{approximate_ppr, top_k_context, PprParams};
use crate::seeding::{derive_rng, derive_seed, STREAM_EPOCH, STREAM_INIT, STREAM_STEP};
use crate::tensor::{cosine, Matrix};
use crate::text::{build_vocab, mask_tokens, tokenize, MaskedSequence, TokenSequence};

/// Which online representation is projected onto the target output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentSource {
    /// The language model's `[CLS]` rows for the masked text (before propagation).
    #[default]
    LmCls,
    /// The online GNN output.
    GnnCls,
}

impl std::str::FromStr for LatentSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lm_cls" => Ok(Self::LmCls),
            "gnn_cls" => Ok(Self::GnnCls),
            other => Err(Error::InvalidParameter(format!("unknown latent_source {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub mask_rate: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub lambda: f64,
    pub batch_anchors: usize,
    pub epochs: u64,
    /// Overrides `epochs` when set.
    pub steps: Option<u64>,
    pub seed: u64,
    pub latent_source: LatentSource,
    pub ppr: PprParams,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mask_rate: 0.75,
            lr: 1e-3,
            weight_decay: 0.001,
            ema_decay: 0.996,
            lambda: 0.1,
            batch_anchors: 8,
            epochs: 1,
            steps: None,
            seed: 0,
            latent_source: LatentSource::LmCls,
            ppr: PprParams::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return bad("mask_rate must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema_decay must be in [0, 1]");
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda must be >= 0");
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr must be > 0 and weight_decay >= 0");
        }
        if self.batch_anchors == 0 {
            return bad("batch_anchors must be >= 1");
        }
        self.ppr.validate()
    }

    pub fn optimizer(&self) -> AdamWSettings {
        AdamWSettings::new(self.lr, self.weight_decay)
    }

    pub fn steps_per_epoch(&self, num_nodes: usize) -> u64 {
        num_nodes.div_ceil(self.batch_anchors) as u64
    }

    pub fn total_steps(&self, num_nodes: usize) -> u64 {
        self.steps
            .unwrap_or(self.epochs * self.steps_per_epoch(num_nodes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub loss_mask: f64,
    pub loss_latent: f64,
    pub loss_total: f64,
    pub masked_token_count: usize,
    pub grad_norm: f64,
    /// Nodes whose latent cosine was undefined (zero-norm row).
    pub latent_zero_rows: usize,
}

/// Mean cross-entropy over every masked position of every node, with one
/// global normalizer. Returns 0 when nothing is masked.
pub fn mlm_loss(logits: &[Matrix], masked: &[MaskedSequence], originals: &[TokenSequence]) -> Result<f64> {
    if logits.len() != masked.len() || masked.len() != originals.len() {
        return Err(Error::ShapeMismatch("mlm_loss inputs differ in node count".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ((lg, m), o) in logits.iter().zip(masked).zip(originals) {
        if m.ids.len() != o.ids.len() || lg.rows() < m.ids.len() {
            return Err(Error::ShapeMismatch("mlm_loss sequence lengths differ".into()));
        }
        for (i, _) in m.mask_flags.iter().enumerate().filter(|(_, f)| **f) {
            let row = lg.row(i);
            let tgt = o.ids[i];
            if tgt >= row.len() {
                return Err(Error::ShapeMismatch(format!("target id {tgt} outside logits")));
            }
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            total += lse - row[tgt];
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentLoss {
    pub value: f64,
    pub zero_rows: usize,
}

/// Mean of `1 - cos` over rows. Zero-norm rows count as cosine 0 and are
/// reported (and logged) rather than rejected.
pub fn latent_loss(projected: &Matrix, target: &Matrix) -> Result<LatentLoss> {
    if projected.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "projected {:?} vs target {:?}",
            projected.shape(),
            target.shape()
        )));
    }
    let n = projected.rows();
    let mut total = 0.0;
    let mut zero_rows = 0;
    for i in 0..n {
        match cosine(projected.row(i), target.row(i)) {
            Some(c) => total += 1.0 - c,
            None => {
                zero_rows += 1;
                total += 1.0;
            }
        }
    }
    if zero_rows > 0 {
        log::warn!("latent loss: {zero_rows} zero-norm row(s) treated as cosine 0");
    }
    Ok(LatentLoss {
        value: if n == 0 { 0.0 } else { total / n as f64 },
        zero_rows,
    })
}

/// Everything random about a step, fixed before any forward pass.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub sub: ContextSubgraph,
    pub originals: Vec<TokenSequence>,
    pub masked: Vec<MaskedSequence>,
    pub edge_feats: Option<EdgeFeatureTable>,
}

impl PreparedBatch {
    pub fn masked_count(&self) -> usize {
        self.masked.iter().map(MaskedSequence::masked_count).sum()
    }
}

/// Union of the anchors' top-k PPR neighborhoods, tokenized and masked.
pub fn prepare_batch(
    state: &ModelState,
    g: &TextAttributedGraph,
    anchors: &[usize],
    mask_rate: f64,
    ppr: &PprParams,
    rng: &mut ChaCha8Rng,
) -> Result<PreparedBatch> {
    let Some(&first) = anchors.first() else {
        return Err(Error::EmptyBatch);
    };
    let mut nodes = BTreeSet::new();
    for &a in anchors {
        let scores = approximate_ppr(g, a, ppr)?;
        nodes.extend(top_k_context(&scores, a, ppr.topk));
    }
    let nodes: Vec<usize> = nodes.into_iter().collect();
    let sub = g.induced_subgraph(&nodes, first)?;
    let max_len = state.config.lm.max_len;
    let originals: Vec<TokenSequence> = sub
        .local_to_global
        .iter()
        .map(|&v| tokenize(&state.vocab, g.node_text(v), max_len))
        .collect();
    let masked = originals.iter().map(|s| mask_tokens(s, mask_rate, rng)).collect();
    let edge_feats = match g.edge_texts() {
        Some(_) => Some(gnn::encode_edge_features(
            &state.online,
            &state.config.lm,
            &state.vocab,
            g,
        )?),
        None => None,
    };
    Ok(PreparedBatch {
        sub,
        originals,
        masked,
        edge_feats,
    })
}

/// How the latent target is obtained when building the loss.
#[derive(Debug, Clone, Copy)]
pub enum TargetMode<'a> {
    /// Run the target network on the tape; `trainable` registers the EMA
    /// parameters as gradient leaves so the isolation can be audited.
    OnTape { trainable: bool },
    /// Use a precomputed target (finite-difference probes).
    Fixed(&'a Matrix),
}

pub struct LossGraph {
    pub tape: Tape,
    pub online: Bound,
    pub target: Option<Bound>,
    pub loss_mask: Var,
    pub loss_latent: Var,
    pub total: Var,
    pub target_value: Matrix,
    pub latent_zero_rows: usize,
    pub masked_count: usize,
}

impl LossGraph {
    pub fn scalar(&self, v: Var) -> f64 {
        self.tape.value(v).to_scalar()
    }
}

/// Builds the fused objective on a fresh tape.
pub fn build_loss(
    state: &ModelState,
    batch: &PreparedBatch,
    lambda: f64,
    latent_source: LatentSource,
    mode: &mut Mode<'_>,
    target_mode: TargetMode<'_>,
) -> Result<LossGraph> {
    let cfg = &state.config;
    let mut tape = Tape::new();
    let online = state.online.bind(&mut tape, true);
    let adj = Arc::new(attention_adjacency(&batch.sub, batch.edge_feats.as_ref()));

    let seqs: Vec<&[usize]> = batch.masked.iter().map(|m| m.ids.as_slice()).collect();
    let out = lm::lm_forward_tape(&mut tape, &online, &cfg.lm, &seqs, mode)?;
    let cls = tape.gather_rows(out.hidden, out.cls_rows());
    let (gnn_out, _) = gnn::gnn_forward_tape(&mut tape, &online, "gnn", &cfg.gnn, &adj, cls, mode);

    let mut rows = Vec::new();
    let mut owners = Vec::new();
    let mut targets = Vec::new();
    for (v, (m, o)) in batch.masked.iter().zip(&batch.originals).enumerate() {
        let (start, len) = out.segments[v];
        for (i, _) in m.mask_flags.iter().enumerate().filter(|(_, f)| **f) {
            debug_assert!(i < len, "masked positions are never padding");
            rows.push(start + i);
            owners.push(v);
            targets.push(o.ids[i]);
        }
    }
    let masked_count = rows.len();
    let tok = tape.gather_rows(out.hidden, rows);
    let ctx = tape.gather_rows(gnn_out, owners);
    let logits = decoder_forward_tape(&mut tape, &online, tok, ctx);
    let loss_mask = tape.cross_entropy(logits, targets);

    let (target_value, target) = match target_mode {
        TargetMode::Fixed(m) => (m.clone(), None),
        TargetMode::OnTape { trainable } => {
            let tb = state.target_gnn.bind(&mut tape, trainable);
            let clean: Vec<&[usize]> = batch.originals.iter().map(|s| s.ids.as_slice()).collect();
            let t_out = lm::lm_forward_tape(&mut tape, &online, &cfg.lm, &clean, &mut Mode::Eval)?;
            let t_cls = tape.gather_rows(t_out.hidden, t_out.cls_rows());
            let (t, _) = gnn::gnn_forward_tape(&mut tape, &tb, "gnn", &cfg.gnn, &adj, t_cls, &mut Mode::Eval);
            let t = tape.detach(t);
            (tape.value(t).clone(), Some(tb))
        }
    };

    let source = match latent_source {
        LatentSource::LmCls => cls,
        LatentSource::GnnCls => gnn_out,
    };
    let z = linear(&mut tape, &online, source, "projector.w", "projector.b");
    let latent_zero_rows = latent_loss(tape.value(z), &target_value)?.zero_rows;
    let loss_latent = tape.cosine_loss(z, target_value.clone());
    let total = tape.add_scaled(loss_mask, loss_latent, lambda);
    Ok(LossGraph {
        tape,
        online,
        target,
        loss_mask,
        loss_latent,
        total,
        target_value,
        latent_zero_rows,
        masked_count,
    })
}

/// One optimization step. All randomness (masking, dropout) comes from `rng`.
pub fn train_step(
    state: &mut ModelState,
    g: &TextAttributedGraph,
    anchors: &[usize],
    cfg: &PretrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepReport> {
    let batch = prepare_batch(state, g, anchors, cfg.mask_rate, &cfg.ppr, rng)?;
    let lg = build_loss(
        state,
        &batch,
        cfg.lambda,
        cfg.latent_source,
        &mut Mode::Train(rng),
        TargetMode::OnTape { trainable: false },
    )?;
    let report = StepReport {
        step: state.step,
        loss_mask: lg.scalar(lg.loss_mask),
        loss_latent: lg.scalar(lg.loss_latent),
        loss_total: lg.scalar(lg.total),
        masked_token_count: lg.masked_count,
        grad_norm: 0.0,
        latent_zero_rows: lg.latent_zero_rows,
    };
    if !report.loss_total.is_finite() {
        return Err(Error::NonFiniteLoss(state.step));
    }
    let mut grads = lg.tape.backward(lg.total);
    let mut by_name = BTreeMap::new();
    let mut sq = 0.0;
    for (name, &var) in lg.online.iter() {
        if let Some(gm) = grads.take(var) {
            sq += gm.frobenius_sq();
            by_name.insert(name.clone(), gm);
        }
    }
    state.optimizer.step(&mut state.online, &by_name);
    state.ema_update(cfg.ema_decay);
    state.step += 1;
    Ok(StepReport {
        grad_norm: sq.sqrt(),
        ..report
    })
}

/// Fresh model for `g`: vocabulary from node and edge texts, seeded weights.
pub fn init_state(g: &TextAttributedGraph, model: ModelConfig, cfg: &PretrainConfig) -> Result<ModelState> {
    let mut corpus: Vec<&str> = g.node_texts().iter().map(String::as_str).collect();
    if let Some(et) = g.edge_texts() {
        corpus.extend(et.iter().map(String::as_str));
    }
    let vocab = build_vocab(&corpus, model.lm.vocab_size)?;
    ModelState::new(model, vocab, cfg.optimizer(), derive_seed(cfg.seed, STREAM_INIT, 0))
}

/// Anchors for global step `step`: batches over a per-epoch seeded shuffle.
pub fn anchors_for_step(num_nodes: usize, cfg: &PretrainConfig, step: u64) -> Vec<usize> {
    let spe = cfg.steps_per_epoch(num_nodes).max(1);
    let epoch = step / spe;
    let b = (step % spe) as usize;
    let mut perm: Vec<usize> = (0..num_nodes).collect();
    perm.shuffle(&mut derive_rng(cfg.seed, STREAM_EPOCH, epoch));
    let lo = b * cfg.batch_anchors;
    let hi = (lo + cfg.batch_anchors).min(num_nodes);
    perm[lo..hi].to_vec()
}

/// Where and how often to write checkpoints during [`run_pretraining`].
#[derive(Debug, Clone)]
pub struct CheckpointPolicy {
    pub dir: PathBuf,
    /// Intermediate checkpoint every this many steps (0 = final only).
    pub every: u64,
    /// Echoed verbatim into every manifest.
    pub run_echo: serde_json::Value,
}

impl CheckpointPolicy {
    pub fn step_dir(&self, step: u64) -> PathBuf {
        self.dir.join(format!("step-{step:06}"))
    }
}

/// Continues training from `state.step` up to the configured total. The step
/// RNG depends only on `(seed, step)`, so a resumed run replays exactly.
pub fn run_pretraining(
    state: &mut ModelState,
    g: &TextAttributedGraph,
    cfg: &PretrainConfig,
    checkpoints: Option<&CheckpointPolicy>,
    on_step: &mut dyn FnMut(&StepReport) -> Result<()>,
) -> Result<Vec<StepReport>> {
    cfg.validate()?;
    let total = cfg.total_steps(g.num_nodes());
    let mut log = Vec::new();
    while state.step < total {
        let anchors = anchors_for_step(g.num_nodes(), cfg, state.step);
        let mut rng = derive_rng(cfg.seed, STREAM_STEP, state.step);
        let report = train_step(state, g, &anchors, cfg, &mut rng)?;
        log::debug!(
            "step {} loss {:.5} (mask {:.5}, latent {:.5})",
            report.step,
            report.loss_total,
            report.loss_mask,
            report.loss_latent
        );
        on_step(&report)?;
        log.push(report);
        if let Some(cp) = checkpoints {
            if cp.every > 0 && state.step.is_multiple_of(cp.every) && state.step < total {
                state.save(&cp.step_dir(state.step), &cp.run_echo)?;
            }
        }
    }
    if let Some(cp) = checkpoints {
        state.save(&cp.dir, &cp.run_echo)?;
    }
    Ok(log)
}

/// Initializes and trains from scratch.
pub fn pretrain(
    g: &TextAttributedGraph,
    model: ModelConfig,
    cfg: &PretrainConfig,
    checkpoints: Option<&CheckpointPolicy>,
) -> Result<(ModelState, Vec<StepReport>)> {
    cfg.validate()?;
    let mut state = init_state(g, model, cfg)?;
    let log = run_pretraining(&mut state, g, cfg, checkpoints, &mut |_| Ok(()))?;
    Ok((state, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// Normwise relative error per parameter tensor.
    pub groups: BTreeMap<String, f64>,
    pub max_rel_error: f64,
    pub worst_group: String,
    pub tolerance: f64,
    pub passed: bool,
    pub num_scalars: usize,
    pub loss: f64,
    pub masked_count: usize,
    /// Largest analytic gradient magnitude on any target-network parameter.
    pub target_grad_max: f64,
    /// Largest analytic gradient magnitude on the projector.
    pub projector_grad_max: f64,
}

pub const FD_STEP: f64 = 1e-5;
/// Gradient magnitudes below this are treated as zero when forming the
/// relative error, so floating-point noise in exactly-zero groups does not count.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Central finite differences over every online parameter, evaluation mode,
/// with the target held at its unperturbed value (stop-gradient semantics).
pub fn gradient_check(
    state: &ModelState,
    batch: &PreparedBatch,
    lambda: f64,
    latent_source: LatentSource,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let base = build_loss(
        state,
        batch,
        lambda,
        latent_source,
        &mut Mode::Eval,
        TargetMode::OnTape { trainable: true },
    )?;
    let grads = base.tape.backward(base.total);
    let max_of = |m: Option<&Matrix>| m.map_or(0.0, Matrix::max_abs);
    let target_grad_max = base
        .target
        .as_ref()
        .map_or(0.0, |tb| tb.iter().map(|(_, &v)| max_of(grads.get(v))).fold(0.0, f64::max));
    let projector_grad_max = ["projector.w", "projector.b"]
        .iter()
        .map(|n| max_of(grads.get(base.online.var(n))))
        .fold(0.0, f64::max);
    let target = base.target_value.clone();
    let eval = |probe: &ModelState| -> Result<f64> {
        let lg = build_loss(
            probe,
            batch,
            lambda,
            latent_source,
            &mut Mode::Eval,
            TargetMode::Fixed(&target),
        )?;
        Ok(lg.scalar(lg.total))
    };

    let mut probe = state.clone();
    let mut groups = BTreeMap::new();
    let names: Vec<String> = state.online.names().cloned().collect();
    for name in &names {
        let shape = state.online.expect(name).shape();
        let analytic = grads
            .get(base.online.var(name))
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1));
        let mut diff_max: f64 = 0.0;
        let mut num_max: f64 = 0.0;
        for i in 0..analytic.data().len() {
            let orig = probe.online.expect(name).data()[i];
            probe.online.get_mut(name).unwrap().data_mut()[i] = orig + FD_STEP;
            let up = eval(&probe)?;
            probe.online.get_mut(name).unwrap().data_mut()[i] = orig - FD_STEP;
            let down = eval(&probe)?;
            probe.online.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            diff_max = diff_max.max((numeric - analytic.data()[i]).abs());
            num_max = num_max.max(numeric.abs());
        }
        let denom = analytic.max_abs().max(num_max).max(REL_ERROR_FLOOR);
        groups.insert(name.clone(), diff_max / denom);
    }
    let (worst_group, max_rel_error) = groups
        .iter()
        .fold((String::new(), 0.0), |(wn, wv), (n, &v)| {
            if v > wv {
                (n.clone(), v)
            } else {
                (wn, wv)
            }
        });
    Ok(GradCheckReport {
        passed: max_rel_error <= tolerance && target_grad_max == 0.0,
        groups,
        max_rel_error,
        worst_group,
        tolerance,
        num_scalars: state.online.num_scalars(),
        loss: base.scalar(base.total),
        masked_count: base.masked_count,
        target_grad_max,
        projector_grad_max,
    })
}

/// Micro configuration for gradient checks: width 8, vocabulary 16, a
/// 4-node graph with edge texts.
pub fn micro_fixture(seed: u64, lambda: f64, latent_source: LatentSource) -> Result<(ModelState, PreparedBatch, PretrainConfig)> {
    let texts = [
        "alpha beta gamma",
        "beta delta epsilon",
        "gamma zeta eta alpha",
        "theta iota beta",
    ];
    let edges = [(0, 1, "kappa"), (1, 2, "lambda"), (2, 3, "kappa"), (0, 2, "lambda")];
    let g = TextAttributedGraph::from_edges(
        texts.iter().map(|t| t.to_string()).collect(),
        edges
            .iter()
            .map(|&(src, dst, t)| EdgeInput {
                src,
                dst,
                text: Some(t.to_string()),
            })
            .collect(),
        None,
        None,
    )?;
    let model = ModelConfig {
        lm: LmConfig {
            vocab_size: 16,
            d: 8,
            num_layers: 2,
            num_heads: 2,
            max_len: 8,
            dropout: 0.2,
        },
        gnn: GatConfig {
            num_layers: 2,
            d: 8,
            num_heads: 2,
            ..GatConfig::default()
        },
    };
    let cfg = PretrainConfig {
        mask_rate: 0.5,
        lambda,
        latent_source,
        seed,
        batch_anchors: 4,
        ppr: PprParams {
            topk: 3,
            ..PprParams::default()
        },
        ..PretrainConfig::default()
    };
    let state = init_state(&g, model, &cfg)?;
    let mut rng = derive_rng(seed, STREAM_STEP, 0);
    let batch = prepare_batch(&state, &g, &[0, 1, 2, 3], cfg.mask_rate, &cfg.ppr, &mut rng)?;
    Ok((state, batch, cfg))
}
