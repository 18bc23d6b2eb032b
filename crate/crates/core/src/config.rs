//! Flat run configuration with profiles and layered overrides
//! (profile defaults < file < environment < flags).

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::autograd::Activation;
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::gnn::GatConfig;
use crate::instruct::ExportOptions;
use crate::lm::LmConfig;
use crate::model::ModelConfig;
use crate::ppr::PprParams;
use crate::pretrain::{LatentSource, PretrainConfig};

/// Environment variables `TAGMAE_<KEY>` (upper-cased key) override file values.
pub const ENV_PREFIX: &str = "TAGMAE_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub deterministic: bool,
    // language model
    pub vocab_size: usize,
    pub d: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub max_len: usize,
    pub dropout: f64,
    // graph attention
    pub gnn_layers: usize,
    pub gnn_heads: usize,
    pub gnn_residual: bool,
    pub gnn_nonlinearity: Activation,
    pub attention_dropout: f64,
    // sampling
    pub ppr_alpha: f64,
    pub ppr_epsilon: f64,
    pub topk: usize,
    // pre-training
    pub mask_rate: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub lambda: f64,
    pub batch_anchors: usize,
    pub epochs: u64,
    pub steps: Option<u64>,
    pub latent_source: LatentSource,
    pub checkpoint_every: u64,
    // evaluation
    pub probe_lr: f64,
    pub probe_epochs: usize,
    pub probe_patience: usize,
    pub probe_eval_every: usize,
    pub probe_bias: bool,
    pub ways: usize,
    pub shots: usize,
    pub num_tasks: usize,
    pub max_queries: usize,
    // instruction export
    pub neighbor_cap: usize,
}

impl RunConfig {
    pub fn desk() -> Self {
        let ppr = PprParams::default();
        let probe = ProbeConfig::default();
        Self {
            profile: Profile::Desk,
            seed: 0,
            deterministic: false,
            vocab_size: 512,
            d: 64,
            lm_layers: 2,
            lm_heads: 4,
            max_len: 32,
            dropout: 0.2,
            gnn_layers: 3,
            gnn_heads: 4,
            gnn_residual: true,
            gnn_nonlinearity: Activation::Elu,
            attention_dropout: 0.0,
            ppr_alpha: ppr.alpha,
            ppr_epsilon: ppr.epsilon,
            topk: ppr.topk,
            mask_rate: 0.75,
            lr: 1e-3,
            weight_decay: 0.001,
            ema_decay: 0.996,
            lambda: 0.1,
            batch_anchors: 8,
            epochs: 1,
            steps: None,
            latent_source: LatentSource::LmCls,
            checkpoint_every: 0,
            probe_lr: probe.lr,
            probe_epochs: probe.epochs,
            probe_patience: probe.patience,
            probe_eval_every: probe.eval_every,
            probe_bias: probe.bias,
            ways: 3,
            shots: crate::eval::DEFAULT_SHOTS,
            num_tasks: crate::eval::DEFAULT_NUM_TASKS,
            max_queries: crate::eval::DEFAULT_MAX_QUERIES,
            neighbor_cap: ExportOptions::default().neighbor_cap,
        }
    }

    /// Published pre-training hyper-parameters at full width.
    pub fn paper() -> Self {
        Self {
            profile: Profile::Paper,
            vocab_size: 30522,
            d: 768,
            lm_layers: 12,
            lm_heads: 12,
            max_len: 512,
            lr: 2e-5,
            ..Self::desk()
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.pretrain().validate()?;
        self.probe().validate()?;
        if self.ways == 0 || self.shots == 0 || self.num_tasks == 0 || self.max_queries == 0 {
            return Err(Error::Config("ways, shots, num_tasks and max_queries must be >= 1".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            lm: LmConfig {
                vocab_size: self.vocab_size,
                d: self.d,
                num_layers: self.lm_layers,
                num_heads: self.lm_heads,
                max_len: self.max_len,
                dropout: self.dropout,
            },
            gnn: GatConfig {
                num_layers: self.gnn_layers,
                d: self.d,
                num_heads: self.gnn_heads,
                attention_dropout: self.attention_dropout,
                nonlinearity: self.gnn_nonlinearity,
                residual: self.gnn_residual,
            },
        }
    }

    pub fn ppr(&self) -> PprParams {
        PprParams {
            alpha: self.ppr_alpha,
            epsilon: self.ppr_epsilon,
            topk: self.topk,
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            mask_rate: self.mask_rate,
            lr: self.lr,
            weight_decay: self.weight_decay,
            ema_decay: self.ema_decay,
            lambda: self.lambda,
            batch_anchors: self.batch_anchors,
            epochs: self.epochs,
            steps: self.steps,
            seed: self.seed,
            latent_source: self.latent_source,
            ppr: self.ppr(),
        }
    }

    pub fn probe(&self) -> ProbeConfig {
        ProbeConfig {
            lr: self.probe_lr,
            epochs: self.probe_epochs,
            patience: self.probe_patience,
            eval_every: self.probe_eval_every,
            bias: self.probe_bias,
        }
    }

    pub fn export_options(&self, inline: bool) -> ExportOptions {
        ExportOptions {
            neighbor_cap: self.neighbor_cap,
            ppr: self.ppr(),
            inline,
        }
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Parses `key=value`; the value is read as JSON when possible, else as a string.
pub fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected key=value, got {s:?}")))?;
    Ok((k.trim().to_string(), parse_scalar(v.trim())))
}

fn parse_scalar(v: &str) -> Value {
    serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()))
}

/// Collects `TAGMAE_*` variables as lower-case keys.
pub fn env_overrides<I: IntoIterator<Item = (String, String)>>(vars: I) -> Map<String, Value> {
    vars.into_iter()
        .filter_map(|(k, v)| {
            k.strip_prefix(ENV_PREFIX)
                .map(|key| (key.to_ascii_lowercase(), parse_scalar(&v)))
        })
        .collect()
}

fn read_file(path: &Path) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path)?;
    if text.trim().is_empty() {
        return Ok(Map::new());
    }
    match serde_json::from_str::<Value>(&text)? {
        Value::Object(m) => Ok(m),
        _ => Err(Error::Config(format!("{} must hold a JSON object", path.display()))),
    }
}

/// Resolves a configuration. The profile is chosen by the highest layer that
/// names one; its defaults are then overlaid by file, environment and flags.
pub fn resolve_config(
    file: Option<&Path>,
    env: Map<String, Value>,
    flags: Map<String, Value>,
) -> Result<RunConfig> {
    let file = match file {
        Some(p) => read_file(p)?,
        None => Map::new(),
    };
    let layers = [file, env, flags];
    let profile = match layers.iter().rev().find_map(|m| m.get("profile")) {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| Error::Config(format!("profile: {e}")))?,
        None => Profile::Desk,
    };
    let Value::Object(mut merged) = RunConfig::for_profile(profile).to_json() else {
        unreachable!("config serializes to an object")
    };
    for layer in layers {
        merged.extend(layer);
    }
    let cfg: RunConfig =
        serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// File plus flags only (no environment).
pub fn parse_config(file: Option<&Path>, flags: Map<String, Value>) -> Result<RunConfig> {
    resolve_config(file, Map::new(), flags)
}
