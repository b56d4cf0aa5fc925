//! Typed placeholders and single-pass bidirectional chunk decoding.
//!
//! Sequence order: `[Z | q | instruction | placeholders]`. Placeholders are
//! laid out as `(arm, step, type)`; each is a learned type embedding plus a
//! sinusoidal step code (plus an arm embedding with more than one arm).

use std::cell::Cell;

use crate::error::{config_err, shape_err, Result};
use crate::numerics::nn::{sinusoidal, Block, Builder, Linear};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::scene::ACTION_DIM;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderMode {
    /// Translation, rotation and gripper tokens per step.
    Coupled,
    /// One token per step carrying all three heads.
    Lite,
    /// One token per degree of freedom.
    Conventional,
}

impl DecoderMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "coupled" => Ok(DecoderMode::Coupled),
            "lite" => Ok(DecoderMode::Lite),
            "conventional" => Ok(DecoderMode::Conventional),
            _ => Err(config_err!("unknown decoder mode {s:?} (coupled, lite, conventional)")),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DecoderMode::Coupled => "coupled",
            DecoderMode::Lite => "lite",
            DecoderMode::Conventional => "conventional",
        }
    }

    pub fn tokens_per_step(self) -> usize {
        match self {
            DecoderMode::Coupled => 3,
            DecoderMode::Lite => 1,
            DecoderMode::Conventional => ACTION_DIM,
        }
    }
}

/// Action placeholder tokens per chunk.
pub fn coupler_token_count(chunk_len: usize, arms: usize, mode: DecoderMode) -> usize {
    mode.tokens_per_step() * chunk_len * arms
}

/// Widths of the translation, rotation and gripper heads.
pub const HEAD_DIMS: [usize; 3] = [3, 3, 1];

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub chunk_len: usize,
    pub arms: usize,
    pub mode: DecoderMode,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            width: 64,
            heads: 4,
            chunk_len: 8,
            arms: 1,
            mode: DecoderMode::Coupled,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(config_err!(
                "decoder width {} not divisible by {} heads",
                self.width,
                self.heads
            ));
        }
        if self.chunk_len == 0 || self.arms == 0 {
            return Err(config_err!("chunk_len and arms must be >= 1"));
        }
        Ok(())
    }

    pub fn placeholder_count(&self) -> usize {
        coupler_token_count(self.chunk_len, self.arms, self.mode)
    }

    pub fn sequence_len(&self, z_rows: usize, instr_len: usize) -> usize {
        z_rows + 1 + instr_len + self.placeholder_count()
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub q_proj: Linear,
    pub instr_proj: Linear,
    /// `tokens_per_step × width`.
    pub type_embeddings: ParamId,
    pub arm_embeddings: Option<ParamId>,
    pub blocks: Vec<Block>,
    /// Typed heads (coupled, lite) or one scalar head per DoF (conventional).
    pub heads: Vec<Linear>,
    invocations: Cell<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    pub sequence: Var,
    /// Placeholder rows after decoding.
    pub hidden: Var,
    /// `K × 7·arms`.
    pub chunk: Var,
}

impl Decoder {
    pub fn new(b: &mut Builder, cfg: DecoderConfig, instr_width: usize) -> Result<Self> {
        cfg.validate()?;
        let mut s = b.scope("decoder");
        let d = cfg.width;
        let q_proj = Linear::new(&mut s, "q_proj", ACTION_DIM * cfg.arms, d, true)?;
        let instr_proj = Linear::new(&mut s, "instr_proj", instr_width, d, true)?;
        let type_embeddings = s.embedding("type_embeddings", &[cfg.mode.tokens_per_step(), d])?;
        let arm_embeddings = if cfg.arms > 1 {
            Some(s.embedding("arm_embeddings", &[cfg.arms, d])?)
        } else {
            None
        };
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(&mut s, &format!("block{i}"), d, cfg.heads))
            .collect::<Result<Vec<_>>>()?;
        let heads = match cfg.mode {
            DecoderMode::Coupled | DecoderMode::Lite => {
                let names = ["head_trans", "head_rot", "head_grip"];
                names
                    .iter()
                    .zip(HEAD_DIMS)
                    .map(|(n, w)| Linear::new(&mut s, n, d, w, true))
                    .collect::<Result<Vec<_>>>()?
            }
            DecoderMode::Conventional => (0..ACTION_DIM)
                .map(|u| Linear::new(&mut s, &format!("head_dof{u}"), d, 1, true))
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(Self {
            cfg,
            q_proj,
            instr_proj,
            type_embeddings,
            arm_embeddings,
            blocks,
            heads,
            invocations: Cell::new(0),
        })
    }

    /// Number of completed [`Decoder::parallel_decode`] calls.
    pub fn invocations(&self) -> usize {
        self.invocations.get()
    }

    pub fn reset_invocations(&self) {
        self.invocations.set(0);
    }

    /// Placeholders in `(arm, step, type)` order with explicit step positions.
    pub fn placeholders_at(&self, g: &mut Graph, store: &ParamStore, steps: &[usize]) -> Result<Var> {
        let tps = self.cfg.mode.tokens_per_step();
        let mut type_idx = Vec::new();
        let mut arm_idx = Vec::new();
        let mut positions = Vec::new();
        for a in 0..self.cfg.arms {
            for &st in steps {
                for u in 0..tps {
                    type_idx.push(u);
                    arm_idx.push(a);
                    positions.push(st);
                }
            }
        }
        let table = g.param(store, self.type_embeddings);
        let typed = g.gather_rows(table, &type_idx)?;
        let pe = g.constant(sinusoidal(&positions, self.cfg.width));
        let mut p = g.add(typed, pe)?;
        if let Some(id) = self.arm_embeddings {
            let arms = g.param(store, id);
            let ar = g.gather_rows(arms, &arm_idx)?;
            p = g.add(p, ar)?;
        }
        Ok(p)
    }

    pub fn build_sequence(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: Var,
        proprio: &[f64],
        instr: Var,
    ) -> Result<Var> {
        let steps: Vec<usize> = (0..self.cfg.chunk_len).collect();
        self.build_sequence_with_steps(g, store, z, proprio, instr, &steps)
    }

    pub fn build_sequence_with_steps(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: Var,
        proprio: &[f64],
        instr: Var,
        steps: &[usize],
    ) -> Result<Var> {
        if g.value(z).cols() != self.cfg.width {
            return Err(shape_err!(
                "Z width {} does not match decoder width {}",
                g.value(z).cols(),
                self.cfg.width
            ));
        }
        if proprio.len() != ACTION_DIM * self.cfg.arms {
            return Err(shape_err!(
                "proprio has {} values, expected {}",
                proprio.len(),
                ACTION_DIM * self.cfg.arms
            ));
        }
        let q = g.constant(Tensor::row_vector(proprio));
        let q_tok = self.q_proj.forward(g, store, q)?;
        let l_tok = self.instr_proj.forward(g, store, instr)?;
        let p = self.placeholders_at(g, store, steps)?;
        g.concat_rows(&[z, q_tok, l_tok, p])
    }

    /// One bidirectional pass over the whole sequence.
    pub fn parallel_decode(&self, g: &mut Graph, store: &ParamStore, seq: Var) -> Result<Var> {
        let mut x = seq;
        for blk in &self.blocks {
            x = blk.forward(g, store, x)?;
        }
        self.invocations.set(self.invocations.get() + 1);
        Ok(x)
    }

    /// Maps placeholder hidden states to a `K × 7·arms` chunk.
    pub fn decode_heads(&self, g: &mut Graph, store: &ParamStore, hidden: Var) -> Result<Var> {
        let (k, arms) = (self.cfg.chunk_len, self.cfg.arms);
        let tps = self.cfg.mode.tokens_per_step();
        let rows = g.value(hidden).rows();
        if rows != tps * k * arms {
            return Err(shape_err!(
                "{rows} placeholder rows do not match layout {arms} arms × {k} steps × {tps} tokens"
            ));
        }
        let rows_of = |u: usize| -> Vec<usize> { (0..k * arms).map(|r| r * tps + u).collect() };
        let mut cols = Vec::with_capacity(self.heads.len());
        match self.cfg.mode {
            DecoderMode::Coupled | DecoderMode::Conventional => {
                for (u, head) in self.heads.iter().enumerate() {
                    let h = g.gather_rows(hidden, &rows_of(u))?;
                    cols.push(head.forward(g, store, h)?);
                }
            }
            DecoderMode::Lite => {
                for head in &self.heads {
                    cols.push(head.forward(g, store, hidden)?);
                }
            }
        }
        // rows ordered (arm, step); put each arm into its own column block
        let per_row = g.concat_cols(&cols)?;
        if arms == 1 {
            return Ok(per_row);
        }
        let blocks = (0..arms)
            .map(|a| g.slice_rows(per_row, a * k, k))
            .collect::<Result<Vec<_>>>()?;
        g.concat_cols(&blocks)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: Var,
        proprio: &[f64],
        instr: Var,
    ) -> Result<DecoderOutput> {
        let sequence = self.build_sequence(g, store, z, proprio, instr)?;
        self.decode_sequence(g, store, sequence)
    }

    pub fn decode_sequence(&self, g: &mut Graph, store: &ParamStore, sequence: Var) -> Result<DecoderOutput> {
        let out = self.parallel_decode(g, store, sequence)?;
        let p = self.cfg.placeholder_count();
        let l = g.value(out).rows();
        let hidden = g.slice_rows(out, l - p, p)?;
        let chunk = self.decode_heads(g, store, hidden)?;
        Ok(DecoderOutput {
            sequence,
            hidden,
            chunk,
        })
    }
}

/// Mean squared error over every entry.
pub fn chunk_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    if g.value(pred).shape() != g.value(target).shape() {
        return Err(shape_err!(
            "chunk loss shapes differ: prediction {:?}, target {:?}",
            g.value(pred).shape(),
            g.value(target).shape()
        ));
    }
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// Gripper columns snapped to {0, 1} at 0.5.
pub fn threshold_gripper(chunk: &Tensor) -> Tensor {
    let mut out = chunk.clone();
    let cols = out.cols();
    for r in 0..out.rows() {
        for c in (ACTION_DIM - 1..cols).step_by(ACTION_DIM) {
            let v = out.get(r, c);
            out.set(r, c, if v >= 0.5 { 1.0 } else { 0.0 });
        }
    }
    out
}
