//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected.
//! [`RunConfig::to_text`] writes every key, so parse → serialize → parse
//! is the identity.

use std::path::Path;

use crate::decoder::{DecoderConfig, DecoderMode};
use crate::encoders::TowerConfig;
use crate::error::{config_err, Error, Result};
use crate::sa_pruner::AggInit;
use crate::scene::SceneSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VisualMode {
    /// Cue + anchor + aggregation tokens.
    Pruned,
    /// Every patch reaches the decoder (unpruned baseline).
    Dense,
}

impl VisualMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pruned" => Ok(VisualMode::Pruned),
            "dense" => Ok(VisualMode::Dense),
            _ => Err(config_err!("visual_mode must be pruned or dense, got {s:?}")),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VisualMode::Pruned => "pruned",
            VisualMode::Dense => "dense",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub grid_side: usize,
    pub num_objects: usize,
    pub num_types: usize,
    pub vocab_size: usize,
    pub instr_len: usize,
    pub chunk_len: usize,
    pub noise_std: f64,
    pub arms: usize,
    pub ratio: usize,
    pub cue_tokens: usize,
    /// Softmax temperature of the cue weights over patches.
    pub cue_temperature: f64,
    pub visual_mode: VisualMode,
    pub mode: DecoderMode,
    pub tower_blocks: usize,
    pub sem_width: usize,
    pub spa_width: usize,
    pub tower_heads: usize,
    pub hook_depths: Vec<usize>,
    pub dense_fusion: bool,
    pub instr_blocks: usize,
    pub fuser_hidden: usize,
    pub sa_rounds: usize,
    pub agg_init: AggInit,
    pub decoder_layers: usize,
    pub decoder_width: usize,
    pub decoder_heads: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_interval: usize,
    pub eval_count: usize,
    pub data_count: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub bench_reps: usize,
    pub bench_warmup: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            grid_side: 8,
            num_objects: 3,
            num_types: 6,
            vocab_size: 64,
            instr_len: 8,
            chunk_len: 8,
            noise_std: 0.1,
            arms: 1,
            ratio: 8,
            cue_tokens: 5,
            cue_temperature: 1.0,
            visual_mode: VisualMode::Pruned,
            mode: DecoderMode::Coupled,
            tower_blocks: 12,
            sem_width: 32,
            spa_width: 32,
            tower_heads: 4,
            hook_depths: vec![2, 6, 10],
            dense_fusion: true,
            instr_blocks: 2,
            fuser_hidden: 64,
            sa_rounds: 1,
            agg_init: AggInit::Zero,
            decoder_layers: 2,
            decoder_width: 64,
            decoder_heads: 4,
            learning_rate: 1e-3,
            warmup_fraction: 0.05,
            steps: 2000,
            batch_size: 8,
            eval_interval: 200,
            eval_count: 200,
            data_count: 2000,
            grad_clip: 1.0,
            bench_reps: 20,
            bench_warmup: 3,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| config_err!("invalid value {v:?} for key {key}"))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(config_err!("invalid value {v:?} for key {key} (true or false)")),
    }
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| num(key, p.trim())).collect()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = num(key, v)?,
            "grid_side" => self.grid_side = num(key, v)?,
            "num_objects" => self.num_objects = num(key, v)?,
            "num_types" => self.num_types = num(key, v)?,
            "vocab_size" => self.vocab_size = num(key, v)?,
            "instr_len" => self.instr_len = num(key, v)?,
            "chunk_len" => self.chunk_len = num(key, v)?,
            "noise_std" => self.noise_std = num(key, v)?,
            "arms" => self.arms = num(key, v)?,
            "ratio" => self.ratio = num(key, v)?,
            "cue_tokens" => self.cue_tokens = num(key, v)?,
            "cue_temperature" => self.cue_temperature = num(key, v)?,
            "visual_mode" => self.visual_mode = VisualMode::parse(v)?,
            "mode" => self.mode = DecoderMode::parse(v)?,
            "tower_blocks" => self.tower_blocks = num(key, v)?,
            "sem_width" => self.sem_width = num(key, v)?,
            "spa_width" => self.spa_width = num(key, v)?,
            "tower_heads" => self.tower_heads = num(key, v)?,
            "hook_depths" => self.hook_depths = list(key, v)?,
            "dense_fusion" => self.dense_fusion = boolean(key, v)?,
            "instr_blocks" => self.instr_blocks = num(key, v)?,
            "fuser_hidden" => self.fuser_hidden = num(key, v)?,
            "sa_rounds" => self.sa_rounds = num(key, v)?,
            "agg_init" => self.agg_init = AggInit::parse(v)?,
            "decoder_layers" => self.decoder_layers = num(key, v)?,
            "decoder_width" => self.decoder_width = num(key, v)?,
            "decoder_heads" => self.decoder_heads = num(key, v)?,
            "learning_rate" => self.learning_rate = num(key, v)?,
            "warmup_fraction" => self.warmup_fraction = num(key, v)?,
            "steps" => self.steps = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "eval_interval" => self.eval_interval = num(key, v)?,
            "eval_count" => self.eval_count = num(key, v)?,
            "data_count" => self.data_count = num(key, v)?,
            "grad_clip" => self.grad_clip = num(key, v)?,
            "bench_reps" => self.bench_reps = num(key, v)?,
            "bench_warmup" => self.bench_warmup = num(key, v)?,
            _ => return Err(config_err!("unknown config key {key:?}")),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let hooks = self
            .hook_depths
            .iter()
            .map(|h| h.to_string())
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("seed", self.seed.to_string()),
            ("grid_side", self.grid_side.to_string()),
            ("num_objects", self.num_objects.to_string()),
            ("num_types", self.num_types.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("instr_len", self.instr_len.to_string()),
            ("chunk_len", self.chunk_len.to_string()),
            ("noise_std", self.noise_std.to_string()),
            ("arms", self.arms.to_string()),
            ("ratio", self.ratio.to_string()),
            ("cue_tokens", self.cue_tokens.to_string()),
            ("cue_temperature", self.cue_temperature.to_string()),
            ("visual_mode", self.visual_mode.as_str().to_string()),
            ("mode", self.mode.as_str().to_string()),
            ("tower_blocks", self.tower_blocks.to_string()),
            ("sem_width", self.sem_width.to_string()),
            ("spa_width", self.spa_width.to_string()),
            ("tower_heads", self.tower_heads.to_string()),
            ("hook_depths", hooks),
            ("dense_fusion", self.dense_fusion.to_string()),
            ("instr_blocks", self.instr_blocks.to_string()),
            ("fuser_hidden", self.fuser_hidden.to_string()),
            ("sa_rounds", self.sa_rounds.to_string()),
            ("agg_init", self.agg_init.as_str().to_string()),
            ("decoder_layers", self.decoder_layers.to_string()),
            ("decoder_width", self.decoder_width.to_string()),
            ("decoder_heads", self.decoder_heads.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("warmup_fraction", self.warmup_fraction.to_string()),
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
            ("eval_count", self.eval_count.to_string()),
            ("data_count", self.data_count.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("bench_reps", self.bench_reps.to_string()),
            ("bench_warmup", self.bench_warmup.to_string()),
        ]
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {}: expected key = value, got {raw:?}", n + 1))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| config_err!("line {}: {}", n + 1, strip(&e)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| config_err!("override must be key=value, got {kv:?}"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn scene(&self) -> SceneSpec {
        SceneSpec {
            grid_side: self.grid_side,
            num_objects: self.num_objects,
            num_types: self.num_types,
            vocab_size: self.vocab_size,
            instr_len: self.instr_len,
            chunk_len: self.chunk_len,
            noise_std: self.noise_std,
        }
    }

    pub fn sem_tower(&self) -> TowerConfig {
        TowerConfig {
            blocks: self.tower_blocks,
            width: self.sem_width,
            heads: self.tower_heads,
            hook_depths: self.hook_depths.clone(),
        }
    }

    pub fn spa_tower(&self) -> TowerConfig {
        TowerConfig {
            width: self.spa_width,
            ..self.sem_tower()
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            layers: self.decoder_layers,
            width: self.decoder_width,
            heads: self.decoder_heads,
            chunk_len: self.chunk_len,
            arms: self.arms,
            mode: self.mode,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn validate(&self) -> Result<()> {
        self.scene().validate()?;
        self.sem_tower().validate()?;
        self.spa_tower().validate()?;
        self.decoder().validate()?;
        if self.arms != 1 {
            return Err(config_err!(
                "synthetic episodes are single-arm; arms must be 1 for the pipeline"
            ));
        }
        if self.instr_blocks == 0 {
            return Err(config_err!("instr_blocks must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(config_err!("warmup_fraction must lie in [0, 1]"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err!("learning_rate must be positive"));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(config_err!("grad_clip must be finite and >= 0"));
        }
        if !(self.cue_temperature > 0.0 && self.cue_temperature.is_finite()) {
            return Err(config_err!("cue_temperature must be positive"));
        }
        if self.bench_reps < 5 {
            return Err(config_err!("bench_reps must be >= 5"));
        }
        if self.visual_mode == VisualMode::Pruned {
            crate::efficiency::split_budget(self.num_patches(), self.ratio, self.cue_tokens)?;
        }
        Ok(())
    }
}

/// Error text without the variant prefix.
fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
