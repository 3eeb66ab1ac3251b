//! Run configuration: flat key=value text with `#` comments, strict key
//! checking, and flag overrides. Every run logs its fully resolved config,
//! and checkpoints embed the same lines verbatim.

use std::path::Path;

use crate::error::{Error, Result};
use crate::layer::ExpertKind;
use crate::model::{FfnMode, ModelConfig};
use crate::routing::RouterKind;
use crate::train::TrainConfig;

/// Merged model + training + data parameters.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: String,
    pub val_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk_default(),
            train: TrainConfig::default(),
            corpus: String::new(),
            val_fraction: 0.1,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("key '{key}': expected bool, got '{v}'"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{v}'")))
}

impl RunConfig {
    /// Apply one key=value setting. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "d_model" => self.model.d_model = parse_num(key, v)?,
            "heads" => self.model.heads = parse_num(key, v)?,
            "layers" => {
                self.model.layers = parse_num(key, v)?;
                // a uniform hop list follows the layer count
                if self.model.hops.len() != self.model.layers {
                    let h = self.model.hops.first().copied().unwrap_or(1);
                    self.model.hops = vec![h; self.model.layers];
                }
            }
            "vocab" => self.model.vocab = parse_num(key, v)?,
            "seq_len" => self.model.seq_len = parse_num(key, v)?,
            "ffn_mode" => self.model.ffn_mode = FfnMode::parse(v)?,
            "d_ff" => self.model.d_ff = parse_num(key, v)?,
            "experts" => self.model.num_experts = parse_num(key, v)?,
            "d_space" => self.model.d_space = parse_num(key, v)?,
            "top_k" => self.model.k = parse_num(key, v)?,
            "hops" => {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|s| parse_num::<usize>(key, s.trim()))
                    .collect::<Result<_>>()?;
                self.model.hops = if parts.len() == 1 {
                    vec![parts[0]; self.model.layers]
                } else {
                    parts
                };
            }
            "expert_kind" => {
                self.model.expert = match v {
                    "static" => ExpertKind::Static,
                    "mlp" => {
                        let rank = match self.model.expert {
                            ExpertKind::Mlp { rank } => rank,
                            ExpertKind::Static => 1,
                        };
                        ExpertKind::Mlp { rank }
                    }
                    _ => return Err(Error::Config(format!("key '{key}': unknown kind '{v}'"))),
                }
            }
            "expert_rank" => {
                let rank = parse_num(key, v)?;
                self.model.expert = match self.model.expert {
                    ExpertKind::Static => ExpertKind::Static,
                    ExpertKind::Mlp { .. } => ExpertKind::Mlp { rank },
                };
            }
            "router" => self.model.router = RouterKind::parse(v)?,
            "tau" => self.model.tau = parse_num(key, v)?,
            "kinematic" => self.model.kinematic = parse_bool(key, v)?,
            "decoupled" => self.model.decoupled = parse_bool(key, v)?,
            "magnitude_alpha" => {
                self.model.magnitude_alpha =
                    if v == "none" { None } else { Some(parse_num(key, v)?) };
            }
            "balance_alpha" => self.model.balance_alpha = parse_num(key, v)?,
            "dropout" => self.model.dropout = parse_num(key, v)?,
            "rope_base" => self.model.rope_base = parse_num(key, v)?,
            "hash_by_position" => self.model.hash_by_position = parse_bool(key, v)?,
            "steps" => self.train.steps = parse_num(key, v)?,
            "lr" => self.train.lr = parse_num(key, v)?,
            "warmup_steps" => self.train.warmup_steps = parse_num(key, v)?,
            "final_lr_fraction" => self.train.final_lr_fraction = parse_num(key, v)?,
            "beta1" => self.train.beta1 = parse_num(key, v)?,
            "beta2" => self.train.beta2 = parse_num(key, v)?,
            "adam_eps" => self.train.eps = parse_num(key, v)?,
            "weight_decay" => self.train.weight_decay = parse_num(key, v)?,
            "clip_norm" => self.train.clip_norm = parse_num(key, v)?,
            "grad_accum" => self.train.grad_accum = parse_num(key, v)?,
            "batch_size" => self.train.batch_size = parse_num(key, v)?,
            "seed" => self.train.seed = parse_num(key, v)?,
            "checkpoint_every" => self.train.checkpoint_every = parse_num(key, v)?,
            "eval_every" => self.train.eval_every = parse_num(key, v)?,
            "val_batches" => self.train.val_batches = parse_num(key, v)?,
            "log_every" => self.train.log_every = parse_num(key, v)?,
            "corpus" => self.corpus = v.to_string(),
            "val_fraction" => self.val_fraction = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Parse `key=value` lines; `#` starts a comment, blank lines skipped.
    pub fn apply_lines(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("{}: {e}", path.as_ref().display())))?;
        let mut cfg = RunConfig::default();
        cfg.apply_lines(&text)?;
        Ok(cfg)
    }

    pub fn from_lines(lines: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in lines {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Canonical serialization: fixed key order, round-trips through `set`.
    pub fn to_lines(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let t = &self.train;
        let hops =
            m.hops.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(",");
        let (expert_kind, expert_rank) = match m.expert {
            ExpertKind::Static => ("static", 1),
            ExpertKind::Mlp { rank } => ("mlp", rank),
        };
        let pairs: Vec<(&str, String)> = vec![
            ("d_model", m.d_model.to_string()),
            ("heads", m.heads.to_string()),
            ("layers", m.layers.to_string()),
            ("vocab", m.vocab.to_string()),
            ("seq_len", m.seq_len.to_string()),
            ("ffn_mode", m.ffn_mode.as_str().to_string()),
            ("d_ff", m.d_ff.to_string()),
            ("experts", m.num_experts.to_string()),
            ("d_space", m.d_space.to_string()),
            ("top_k", m.k.to_string()),
            ("hops", hops),
            ("expert_kind", expert_kind.to_string()),
            ("expert_rank", expert_rank.to_string()),
            ("router", m.router.as_str().to_string()),
            ("tau", m.tau.to_string()),
            ("kinematic", m.kinematic.to_string()),
            ("decoupled", m.decoupled.to_string()),
            (
                "magnitude_alpha",
                m.magnitude_alpha.map(|a| a.to_string()).unwrap_or_else(|| "none".to_string()),
            ),
            ("balance_alpha", m.balance_alpha.to_string()),
            ("dropout", m.dropout.to_string()),
            ("rope_base", m.rope_base.to_string()),
            ("hash_by_position", m.hash_by_position.to_string()),
            ("steps", t.steps.to_string()),
            ("lr", t.lr.to_string()),
            ("warmup_steps", t.warmup_steps.to_string()),
            ("final_lr_fraction", t.final_lr_fraction.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("adam_eps", t.eps.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("clip_norm", t.clip_norm.to_string()),
            ("grad_accum", t.grad_accum.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("seed", t.seed.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("eval_every", t.eval_every.to_string()),
            ("val_batches", t.val_batches.to_string()),
            ("log_every", t.log_every.to_string()),
            ("corpus", self.corpus.clone()),
            ("val_fraction", self.val_fraction.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}
