//! Model parameters: language model, online and EMA target GNN, decoder,
//! MLM head, projector and optimizer state, plus checkpoint I/O.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::gnn::{self, EdgeFeatureTable, GatConfig};
use crate::graph_store::ContextSubgraph;
use crate::lm::{self, linear, LmConfig};
use crate::optim::{AdamW, AdamWSettings};
use crate::params::{read_tensors, write_tensors, Bound, ParamStore};
use crate::tensor::Matrix;
use crate::text::{TokenSequence, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub lm: LmConfig,
    pub gnn: GatConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        self.gnn.validate()?;
        if self.lm.d != self.gnn.d {
            return Err(Error::InvalidParameter("LM and GNN widths differ".into()));
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.lm.d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub vocab: Vocab,
    /// Trainable parameters: `lm.*`, `gnn.*`, `decoder.*`, `mlm_head.*`, `projector.*`.
    pub online: ParamStore,
    /// EMA copy of the `gnn.*` tensors; never handed to the optimizer.
    pub target_gnn: ParamStore,
    pub optimizer: AdamW,
    pub step: u64,
}

pub fn init_head_params(d: usize, vocab_size: usize, rng: &mut ChaCha8Rng, store: &mut ParamStore) {
    let b = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    store.insert("decoder.w", Matrix::uniform(2 * d, d, b(2 * d), rng));
    store.insert("decoder.b", Matrix::zeros(1, d));
    store.insert("mlm_head.w1", Matrix::uniform(d, d, b(d), rng));
    store.insert("mlm_head.b1", Matrix::zeros(1, d));
    store.insert("mlm_head.w2", Matrix::uniform(d, vocab_size, b(d), rng));
    store.insert("mlm_head.b2", Matrix::zeros(1, vocab_size));
    store.insert("projector.w", Matrix::uniform(d, d, b(d), rng));
    store.insert("projector.b", Matrix::zeros(1, d));
}

/// Nonlinearity between the two MLM head layers.
pub const MLM_HEAD_ACTIVATION: Activation = Activation::Gelu;

/// `[E_v ‖ cls] → decoder → head` on tape; both inputs have one row per token.
pub fn decoder_forward_tape(tape: &mut Tape, p: &Bound, token_rows: Var, cls_rows: Var) -> Var {
    let cat = tape.concat_cols(token_rows, cls_rows);
    let h = linear(tape, p, cat, "decoder.w", "decoder.b");
    let m = linear(tape, p, h, "mlm_head.w1", "mlm_head.b1");
    let m = tape.activation(m, MLM_HEAD_ACTIVATION);
    linear(tape, p, m, "mlm_head.w2", "mlm_head.b2")
}

impl ModelState {
    /// Fresh parameters; `config.lm.vocab_size` is taken from `vocab`.
    pub fn new(mut config: ModelConfig, vocab: Vocab, optimizer: AdamWSettings, seed: u64) -> Result<Self> {
        config.lm.vocab_size = vocab.len();
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut online = ParamStore::new();
        lm::init_lm_params(&config.lm, &mut rng, &mut online);
        gnn::init_gnn_params(&config.gnn, &mut rng, &mut online);
        init_head_params(config.d(), config.lm.vocab_size, &mut rng, &mut online);
        let target_gnn = online.with_prefix("gnn.");
        let optimizer = AdamW::new(optimizer, &online);
        Ok(Self {
            config,
            vocab,
            online,
            target_gnn,
            optimizer,
            step: 0,
        })
    }

    pub fn lm_params(&self) -> ParamStore {
        self.online.with_prefix("lm.")
    }

    /// `ξ' ← τ ξ' + (1 − τ) ξ`; the LM needs no update since it is shared.
    pub fn ema_update(&mut self, tau: f64) {
        for (name, t) in self.target_gnn.iter_mut() {
            let src = self.online.expect(name);
            for (tv, sv) in t.data_mut().iter_mut().zip(src.data()) {
                *tv = tau * *tv + (1.0 - tau) * sv;
            }
        }
    }

    /// Hidden states per sequence and the stacked `[CLS]` rows (evaluation mode).
    pub fn lm_forward(&self, seqs: &[&[usize]]) -> Result<(Vec<Matrix>, Matrix)> {
        lm::lm_encode(&self.online, &self.config.lm, seqs)
    }

    pub fn gnn_forward(
        &self,
        sub: &ContextSubgraph,
        cls: &Matrix,
        edge_feats: Option<&EdgeFeatureTable>,
        use_target: bool,
    ) -> Result<Matrix> {
        let params = if use_target {
            &self.target_gnn
        } else {
            &self.online
        };
        gnn::gnn_forward(params, &self.config.gnn, sub, cls, edge_feats)
    }

    /// `E'_cls = f'_GNN(G, f_LM(t)[cls])` on unmasked text, no gradients.
    pub fn target_forward(
        &self,
        sub: &ContextSubgraph,
        unmasked: &[TokenSequence],
        edge_feats: Option<&EdgeFeatureTable>,
    ) -> Result<Matrix> {
        let seqs: Vec<&[usize]> = unmasked.iter().map(|s| s.ids.as_slice()).collect();
        let cls = lm::lm_cls(&self.online, &self.config.lm, &seqs)?;
        self.gnn_forward(sub, &cls, edge_feats, true)
    }

    /// Decoder + MLM head logits for one node: `(n_v + 2) × vocab`.
    pub fn decode_logits(&self, masked_hidden: &Matrix, gnn_cls: &[f64]) -> Result<Matrix> {
        let d = self.config.d();
        if masked_hidden.cols() != d || gnn_cls.len() != d {
            return Err(Error::ShapeMismatch(format!(
                "decoder expects width {d}, got hidden {} and cls {}",
                masked_hidden.cols(),
                gnn_cls.len()
            )));
        }
        decode_with(&self.online, masked_hidden, gnn_cls)
    }

    // ---- checkpoints ----

    pub fn save(&self, dir: &Path, manifest_extra: &serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join(CHECKPOINT_FILE))?);
        write_tensors(
            &mut w,
            &[
                ("online", &self.online),
                ("target", &self.target_gnn),
                ("adam_m", &self.optimizer.m),
                ("adam_v", &self.optimizer.v),
            ],
        )?;
        w.flush()?;
        write_json(&dir.join(VOCAB_FILE), &self.vocab)?;
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.to_string(),
            step: self.step,
            optimizer_steps: self.optimizer.t,
            model: self.config,
            optimizer: self.optimizer.settings,
            run: manifest_extra.clone(),
        };
        write_json(&dir.join(MANIFEST_FILE), &manifest)
    }

    pub fn load(dir: &Path) -> Result<(Self, CheckpointManifest)> {
        let manifest: CheckpointManifest =
            serde_json::from_reader(BufReader::new(File::open(dir.join(MANIFEST_FILE))?))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format {}", manifest.format)));
        }
        let vocab: Vocab = serde_json::from_reader(BufReader::new(File::open(dir.join(VOCAB_FILE))?))?;
        let vocab = Vocab::from_map(vocab.token_to_id().clone())?;
        let mut groups = read_tensors(&mut BufReader::new(File::open(dir.join(CHECKPOINT_FILE))?))?;
        let mut take = |k: &str| {
            groups
                .remove(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor group {k}")))
        };
        let online = take("online")?;
        let target_gnn = take("target")?;
        let m = take("adam_m")?;
        let v = take("adam_v")?;
        let state = Self {
            config: manifest.model,
            vocab,
            online,
            target_gnn,
            optimizer: AdamW {
                settings: manifest.optimizer,
                t: manifest.optimizer_steps,
                m,
                v,
            },
            step: manifest.step,
        };
        Ok((state, manifest))
    }
}

pub(crate) fn decode_with(params: &ParamStore, masked_hidden: &Matrix, gnn_cls: &[f64]) -> Result<Matrix> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let rows = masked_hidden.rows();
    let tok = tape.constant(masked_hidden.clone());
    let cls = tape.constant(Matrix::from_vec(1, gnn_cls.len(), gnn_cls.to_vec()));
    let cls_b = tape.gather_rows(cls, vec![0; rows]);
    let logits = decoder_forward_tape(&mut tape, &bound, tok, cls_b);
    Ok(tape.value(logits).clone())
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const CHECKPOINT_FORMAT: &str = "tagmae-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub step: u64,
    pub optimizer_steps: u64,
    pub model: ModelConfig,
    pub optimizer: AdamWSettings,
    /// Resolved run configuration echoed by the caller.
    pub run: serde_json::Value,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}
