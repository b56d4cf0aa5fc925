//! The assembled pipeline: towers, pruners, fusers and decoder.

use crate::config::{RunConfig, VisualMode};
use crate::decoder::{chunk_loss, Decoder};
use crate::efficiency::{config_budget, split_budget, TokenBudget};
use crate::encoders::{FeatureStack, InstructionEncoder, Tower, TowerRole};
use crate::error::{shape_err, Result};
use crate::fuser::{assemble_z, dual_tower_forward, project_vl, sparse_fuse, Fuser};
use crate::id_pruner::{IdPruner, Selection};
use crate::numerics::nn::Builder;
use crate::numerics::{derive_seed, Graph, ParamStore, Rng, Tensor, Var};
use crate::sa_pruner::{SaOutput, SaPruner};
use crate::scene::{Episode, ACTION_DIM};

/// Parameter-name prefixes, one per trainable module.
pub const MODULE_PREFIXES: [&str; 7] = [
    "tower.sem/",
    "tower.spa/",
    "instr/",
    "id_pruner/",
    "sa/",
    "fuser/",
    "decoder/",
];

// independent init streams so toggling one module leaves the others unchanged
const STREAM_SEM: u64 = 1;
const STREAM_SPA: u64 = 2;
const STREAM_INSTR: u64 = 3;
const STREAM_ID: u64 = 4;
const STREAM_SA: u64 = 5;
const STREAM_FUSER: u64 = 6;
const STREAM_DECODER: u64 = 7;

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: RunConfig,
    pub store: ParamStore,
    pub sem: Tower,
    pub spa: Tower,
    pub instr: InstructionEncoder,
    pub id_pruner: IdPruner,
    pub sa: SaPruner,
    pub fuser: Fuser,
    pub decoder: Decoder,
    pub budget: TokenBudget,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `K×7` raw prediction.
    pub chunk: Var,
    pub z: Var,
    pub instr_tokens: Var,
    pub sem: FeatureStack,
    pub spa: FeatureStack,
    /// Present in pruned mode.
    pub selection: Option<Selection>,
    pub sa: Option<SaOutput>,
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let budget = config_budget(cfg)?;
        // dense mode still owns pruner parameters; any valid split will do
        let (k, h) = split_budget(cfg.num_patches(), cfg.ratio, cfg.cue_tokens).unwrap_or((1, 1));
        let stream = |s: u64| Rng::new(derive_seed(cfg.seed, s));

        let mut rng = stream(STREAM_SEM);
        let sem = Tower::new(
            &mut Builder::new(&mut store, &mut rng),
            TowerRole::Semantic,
            cfg.sem_tower(),
            cfg.num_types,
        )?;
        let mut rng = stream(STREAM_SPA);
        let spa = Tower::new(
            &mut Builder::new(&mut store, &mut rng),
            TowerRole::Spatial,
            cfg.spa_tower(),
            cfg.num_types,
        )?;
        let mut rng = stream(STREAM_INSTR);
        let instr = InstructionEncoder::new(
            &mut Builder::new(&mut store, &mut rng),
            cfg.vocab_size,
            cfg.sem_width,
            cfg.tower_heads,
            cfg.instr_blocks,
            cfg.spa_width,
        )?;
        let mut rng = stream(STREAM_ID);
        let mut id_pruner = IdPruner::new(
            &mut Builder::new(&mut store, &mut rng),
            cfg.sem_width,
            cfg.sem_width,
            k,
            h,
        )?;
        id_pruner.temperature = cfg.cue_temperature;
        let mut rng = stream(STREAM_SA);
        let sa = SaPruner::new(
            &mut Builder::new(&mut store, &mut rng),
            cfg.spa_width,
            cfg.spa_width,
            cfg.tower_heads,
            h,
            cfg.sa_rounds,
            cfg.agg_init,
        )?;
        let mut rng = stream(STREAM_FUSER);
        let fuser = Fuser::new(
            &mut Builder::new(&mut store, &mut rng),
            &cfg.hook_depths,
            cfg.dense_fusion,
            cfg.sem_width,
            cfg.spa_width,
            cfg.fuser_hidden,
            cfg.decoder_width,
        )?;
        let mut rng = stream(STREAM_DECODER);
        let decoder = Decoder::new(&mut Builder::new(&mut store, &mut rng), cfg.decoder(), cfg.sem_width)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            sem,
            spa,
            instr,
            id_pruner,
            sa,
            fuser,
            decoder,
            budget,
        })
    }

    pub fn forward(&self, g: &mut Graph, ep: &Episode) -> Result<ModelOutput> {
        let n = self.cfg.num_patches();
        if ep.patch_types.len() != n || ep.instruction.len() != self.cfg.instr_len {
            return Err(shape_err!(
                "episode has {} patches and {} instruction tokens; model expects {} and {}",
                ep.patch_types.len(),
                ep.instruction.len(),
                n,
                self.cfg.instr_len
            ));
        }
        let s = &self.store;
        let noise = self.cfg.noise_std;
        let sem_in = self.sem.embed_patches(g, s, ep, noise)?;
        let spa_in = self.spa.embed_patches(g, s, ep, noise)?;
        let text = self.instr.embed(g, s, &ep.instruction)?;
        let (sem, spa) = dual_tower_forward(g, s, &self.sem, &self.spa, sem_in, spa_in, self.fuser.dense_map())?;

        let (z, selection, sa) = match self.cfg.visual_mode {
            VisualMode::Pruned => {
                let sel = self.id_pruner.prune(g, s, sem.final_tokens, text.tokens)?;
                let sa = self.sa.forward(g, s, spa.final_tokens, text.pooled)?;
                let z_fusion = sparse_fuse(g, s, &self.fuser.sparse, sel.anchors.vectors, sa.agg)?;
                let z_vl = project_vl(g, s, &self.fuser.vl, sel.cues.vectors)?;
                let set = assemble_z(g, z_vl, z_fusion)?;
                (set.z, Some(sel), Some(sa))
            }
            VisualMode::Dense => {
                let z = sparse_fuse(g, s, &self.fuser.sparse, sem.final_tokens, spa.final_tokens)?;
                (z, None, None)
            }
        };
        let dec = self.decoder.forward(g, s, z, &ep.proprio, text.tokens)?;
        Ok(ModelOutput {
            chunk: dec.chunk,
            z,
            instr_tokens: text.tokens,
            sem,
            spa,
            selection,
            sa,
        })
    }

    /// Chunk MSE against the episode's ground truth.
    pub fn loss(&self, g: &mut Graph, ep: &Episode) -> Result<(Var, ModelOutput)> {
        let out = self.forward(g, ep)?;
        if ep.action_chunk.shape() != [self.cfg.chunk_len, ACTION_DIM * self.cfg.arms] {
            return Err(shape_err!(
                "target chunk {:?} does not match model output [{}, {}]",
                ep.action_chunk.shape(),
                self.cfg.chunk_len,
                ACTION_DIM * self.cfg.arms
            ));
        }
        let target = g.constant(ep.action_chunk.clone());
        let loss = chunk_loss(g, out.chunk, target)?;
        Ok((loss, out))
    }

    pub fn predict(&self, ep: &Episode) -> Result<Prediction> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, ep)?;
        Ok(Prediction {
            chunk: g.value(out.chunk).clone(),
            anchors: out.selection.map(|s| s.anchors.indices),
        })
    }

    /// Parameters whose name starts with `prefix`.
    pub fn module_params(&self, prefix: &str) -> Vec<crate::numerics::ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
            .collect()
    }

    /// Zeroes the output layer of every dense fusion MLP.
    pub fn zero_dense_fusion_outputs(&mut self) -> Result<()> {
        let ids: Vec<_> = self.fuser.dense.values().flat_map(|d| d.mlp.fc2.params()).collect();
        for id in ids {
            let shape = self.store.get(id).value.shape().to_vec();
            self.store.set_value(id, Tensor::zeros(&shape))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub chunk: Tensor,
    pub anchors: Option<Vec<usize>>,
}
