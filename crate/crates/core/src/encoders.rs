//! Semantic and spatial patch towers plus the instruction encoder.

use std::collections::BTreeMap;

use crate::error::{config_err, shape_err, Error, Result};
use crate::numerics::nn::{sinusoidal, Block, Builder, LayerNorm, Linear};
use crate::numerics::{derive_seed, Graph, ParamId, ParamStore, Rng, Tensor, Var};
use crate::scene::Episode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TowerRole {
    Semantic,
    Spatial,
}

impl TowerRole {
    pub fn prefix(self) -> &'static str {
        match self {
            TowerRole::Semantic => "tower.sem",
            TowerRole::Spatial => "tower.spa",
        }
    }

    fn noise_stream(self) -> u64 {
        match self {
            TowerRole::Semantic => 0x5E4A,
            TowerRole::Spatial => 0x59A7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TowerConfig {
    pub blocks: usize,
    pub width: usize,
    pub heads: usize,
    /// Block indices after which features are handed to the fuser.
    pub hook_depths: Vec<usize>,
}

impl Default for TowerConfig {
    fn default() -> Self {
        Self {
            blocks: 12,
            width: 32,
            heads: 4,
            hook_depths: vec![2, 6, 10],
        }
    }
}

impl TowerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(config_err!(
                "tower width {} not divisible by {} heads",
                self.width,
                self.heads
            ));
        }
        if !self.width.is_multiple_of(4) {
            return Err(config_err!("tower width {} must be a multiple of 4", self.width));
        }
        if self.hook_depths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err!(
                "hook depths {:?} not strictly increasing",
                self.hook_depths
            ));
        }
        if let Some(&last) = self.hook_depths.last() {
            if last >= self.blocks {
                return Err(config_err!("hook depth {last} >= block count {}", self.blocks));
            }
        }
        Ok(())
    }
}

/// Per-hook snapshots (taken before any injection) and final tokens.
#[derive(Clone, Debug)]
pub struct FeatureStack {
    pub per_hook: BTreeMap<usize, Var>,
    pub final_tokens: Var,
}

/// 2-D sinusoidal code: first half encodes the row, second half the column.
pub fn grid_position_encoding(grid_side: usize, width: usize) -> Tensor {
    let n = grid_side * grid_side;
    let half = width / 2;
    let rows: Vec<usize> = (0..n).map(|i| i / grid_side).collect();
    let cols: Vec<usize> = (0..n).map(|i| i % grid_side).collect();
    let pr = sinusoidal(&rows, half);
    let pc = sinusoidal(&cols, half);
    let mut t = Tensor::zeros(&[n, width]);
    for i in 0..n {
        for j in 0..half {
            t.set(i, j, pr.get(i, j));
            t.set(i, half + j, pc.get(i, j));
        }
    }
    t
}

#[derive(Clone, Debug)]
pub struct Tower {
    pub role: TowerRole,
    pub cfg: TowerConfig,
    pub type_table: ParamId,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
    num_codes: usize,
}

impl Tower {
    pub fn new(b: &mut Builder, role: TowerRole, cfg: TowerConfig, num_types: usize) -> Result<Self> {
        cfg.validate()?;
        let mut s = b.scope(role.prefix());
        let num_codes = num_types + 1;
        let type_table = s.embedding("type_table", &[num_codes, cfg.width])?;
        let blocks = (0..cfg.blocks)
            .map(|i| Block::new(&mut s, &format!("block{i}"), cfg.width, cfg.heads))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::new(&mut s, "final_norm", cfg.width)?;
        Ok(Self {
            role,
            cfg,
            type_table,
            blocks,
            final_norm,
            num_codes,
        })
    }

    /// Type-table lookup + grid position code + seeded Gaussian noise.
    pub fn embed_patches(&self, g: &mut Graph, store: &ParamStore, ep: &Episode, noise_std: f64) -> Result<Var> {
        let codes: Vec<usize> = ep.patch_types.iter().map(|&c| c as usize).collect();
        if let Some(&bad) = codes.iter().find(|&&c| c >= self.num_codes) {
            return Err(Error::Input(format!(
                "patch type {bad} outside table of {} codes",
                self.num_codes
            )));
        }
        let side = ep.grid_side();
        if side * side != codes.len() {
            return Err(Error::Input(format!(
                "{} patches do not form a square grid",
                codes.len()
            )));
        }
        let table = g.param(store, self.type_table);
        let rows = g.gather_rows(table, &codes)?;
        let mut fixed = grid_position_encoding(side, self.cfg.width);
        if noise_std > 0.0 {
            let mut rng = Rng::new(derive_seed(ep.seed, self.role.noise_stream()));
            fixed.data_mut().iter_mut().for_each(|v| *v += noise_std * rng.normal());
        }
        let fixed = g.constant(fixed);
        g.add(rows, fixed)
    }

    pub fn block(&self, g: &mut Graph, store: &ParamStore, index: usize, x: Var) -> Result<Var> {
        self.blocks[index].forward(g, store, x)
    }

    pub fn finish(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.final_norm.forward(g, store, x)
    }
}

/// Hook callback: receives the hook depth and current tokens, returns the
/// residual injection (same shape).
pub type HookFn<'a> = dyn FnMut(&mut Graph, usize, Var) -> Result<Var> + 'a;

/// Callback that injects nothing.
pub fn null_hook(g: &mut Graph, _depth: usize, x: Var) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    Ok(g.constant(Tensor::zeros(&shape)))
}

pub(crate) fn check_injection(g: &Graph, x: Var, inj: Var) -> Result<()> {
    if g.value(inj).shape() != g.value(x).shape() {
        return Err(shape_err!(
            "hook injection {:?} does not match tokens {:?}",
            g.value(inj).shape(),
            g.value(x).shape()
        ));
    }
    Ok(())
}

pub fn tower_forward(
    tower: &Tower,
    g: &mut Graph,
    store: &ParamStore,
    patches: Var,
    hook: &mut HookFn<'_>,
) -> Result<FeatureStack> {
    if g.value(patches).cols() != tower.cfg.width {
        return Err(shape_err!(
            "patches {:?} do not match tower width {}",
            g.value(patches).shape(),
            tower.cfg.width
        ));
    }
    let mut x = patches;
    let mut per_hook = BTreeMap::new();
    for i in 0..tower.cfg.blocks {
        x = tower.block(g, store, i, x)?;
        if tower.cfg.hook_depths.contains(&i) {
            per_hook.insert(i, x);
            let inj = hook(g, i, x)?;
            check_injection(g, x, inj)?;
            x = g.add(x, inj)?;
        }
    }
    let final_tokens = tower.finish(g, store, x)?;
    Ok(FeatureStack { per_hook, final_tokens })
}

#[derive(Clone, Copy, Debug)]
pub struct InstructionEmbedding {
    /// `M×width` contextual token features.
    pub tokens: Var,
    /// `1×pooled_width`: projection of the token mean.
    pub pooled: Var,
}

#[derive(Clone, Debug)]
pub struct InstructionEncoder {
    pub table: ParamId,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
    pub pool: Linear,
    pub vocab_size: usize,
    pub width: usize,
}

impl InstructionEncoder {
    pub fn new(
        b: &mut Builder,
        vocab_size: usize,
        width: usize,
        heads: usize,
        blocks: usize,
        pooled_width: usize,
    ) -> Result<Self> {
        let mut s = b.scope("instr");
        let table = s.embedding("table", &[vocab_size, width])?;
        let blocks = (0..blocks)
            .map(|i| Block::new(&mut s, &format!("block{i}"), width, heads))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::new(&mut s, "final_norm", width)?;
        let pool = Linear::new(&mut s, "pool", width, pooled_width, true)?;
        Ok(Self {
            table,
            blocks,
            final_norm,
            pool,
            vocab_size,
            width,
        })
    }

    pub fn embed(&self, g: &mut Graph, store: &ParamStore, ids: &[u32]) -> Result<InstructionEmbedding> {
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::Input(format!(
                "instruction token {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        let table = g.param(store, self.table);
        let rows = g.gather_rows(table, &idx)?;
        let positions: Vec<usize> = (0..idx.len()).collect();
        let pe = g.constant(sinusoidal(&positions, self.width));
        let mut x = g.add(rows, pe)?;
        for blk in &self.blocks {
            x = blk.forward(g, store, x)?;
        }
        let tokens = self.final_norm.forward(g, store, x)?;
        let mean = g.mean_rows(tokens)?;
        let pooled = self.pool.forward(g, store, mean)?;
        Ok(InstructionEmbedding { tokens, pooled })
    }
}
