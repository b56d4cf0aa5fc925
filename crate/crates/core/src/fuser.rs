//! Hierarchical fusion of the two visual streams.
//!
//! Dense fusion runs at every hook depth over all `N` patches and feeds a
//! residual injection back into each tower; its MLP output layer starts at
//! zero. Sparse fusion merges anchors with aggregation rows after pruning.
//! `Z` is `[Z_vl ; Z_fusion]` in that order.

use std::collections::BTreeMap;

use crate::encoders::{check_injection, FeatureStack, Tower};
use crate::error::{config_err, shape_err, Result};
use crate::numerics::nn::{Builder, Linear, Mlp};
use crate::numerics::{Graph, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct DenseFuser {
    pub mlp: Mlp,
    pub inject_sem: Linear,
    pub inject_spa: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct DenseOutput {
    /// `N×d_v` fused features.
    pub fused: Var,
    pub inject_sem: Var,
    pub inject_spa: Var,
}

impl DenseFuser {
    pub fn new(b: &mut Builder, name: &str, d_sem: usize, d_spa: usize, hidden: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            mlp: Mlp::zero_output(&mut s, "mlp", d_sem + d_spa, hidden, d_sem)?,
            inject_sem: Linear::new(&mut s, "inject_sem", d_sem, d_sem, false)?,
            inject_spa: Linear::new(&mut s, "inject_spa", d_sem, d_spa, false)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, sem: Var, spa: Var) -> Result<DenseOutput> {
        let (ns, nd) = (g.value(sem).rows(), g.value(spa).rows());
        if ns != nd {
            return Err(shape_err!(
                "dense fusion row counts differ: semantic {ns}, spatial {nd}"
            ));
        }
        let cat = g.concat_cols(&[sem, spa])?;
        let fused = self.mlp.forward(g, store, cat)?;
        Ok(DenseOutput {
            fused,
            inject_sem: self.inject_sem.forward(g, store, fused)?,
            inject_spa: self.inject_spa.forward(g, store, fused)?,
        })
    }
}

/// Runs both towers block by block, exchanging features at each shared
/// hook depth. With `fusers = None` the towers are independent.
pub fn dual_tower_forward(
    g: &mut Graph,
    store: &ParamStore,
    sem: &Tower,
    spa: &Tower,
    sem_in: Var,
    spa_in: Var,
    fusers: Option<&BTreeMap<usize, DenseFuser>>,
) -> Result<(FeatureStack, FeatureStack)> {
    if sem.cfg.blocks != spa.cfg.blocks || sem.cfg.hook_depths != spa.cfg.hook_depths {
        return Err(config_err!("towers must share block count and hook depths"));
    }
    let (mut x, mut y) = (sem_in, spa_in);
    let (mut hx, mut hy) = (BTreeMap::new(), BTreeMap::new());
    for i in 0..sem.cfg.blocks {
        x = sem.block(g, store, i, x)?;
        y = spa.block(g, store, i, y)?;
        if sem.cfg.hook_depths.contains(&i) {
            hx.insert(i, x);
            hy.insert(i, y);
            if let Some(f) = fusers.and_then(|m| m.get(&i)) {
                let out = f.forward(g, store, x, y)?;
                check_injection(g, x, out.inject_sem)?;
                check_injection(g, y, out.inject_spa)?;
                x = g.add(x, out.inject_sem)?;
                y = g.add(y, out.inject_spa)?;
            }
        }
    }
    let fx = sem.finish(g, store, x)?;
    let fy = spa.finish(g, store, y)?;
    Ok((
        FeatureStack {
            per_hook: hx,
            final_tokens: fx,
        },
        FeatureStack {
            per_hook: hy,
            final_tokens: fy,
        },
    ))
}

/// Row-wise concat of anchors and aggregation rows, then MLP to `d_l`.
pub fn sparse_fuse(g: &mut Graph, store: &ParamStore, mlp: &Mlp, anchors: Var, agg: Var) -> Result<Var> {
    let (ha, hg) = (g.value(anchors).rows(), g.value(agg).rows());
    if ha != hg {
        return Err(shape_err!(
            "sparse fusion needs equal row counts: {ha} anchor rows vs {hg} aggregation rows"
        ));
    }
    let cat = g.concat_cols(&[anchors, agg])?;
    mlp.forward(g, store, cat)
}

pub fn project_vl(g: &mut Graph, store: &ParamStore, mlp: &Mlp, cues: Var) -> Result<Var> {
    if g.value(cues).rows() == 0 {
        return Err(config_err!("no cue tokens to project"));
    }
    mlp.forward(g, store, cues)
}

#[derive(Clone, Copy, Debug)]
pub struct FusedVisualSet {
    pub z_vl: Var,
    pub z_fusion: Var,
    pub z: Var,
}

pub fn assemble_z(g: &mut Graph, z_vl: Var, z_fusion: Var) -> Result<FusedVisualSet> {
    let (a, b) = (g.value(z_vl).cols(), g.value(z_fusion).cols());
    if a != b {
        return Err(shape_err!("Z widths differ: cue rows {a}, fusion rows {b}"));
    }
    let z = g.concat_rows(&[z_vl, z_fusion])?;
    Ok(FusedVisualSet { z_vl, z_fusion, z })
}

#[derive(Clone, Debug)]
pub struct Fuser {
    /// Keyed by hook depth; empty when dense fusion is disabled.
    pub dense: BTreeMap<usize, DenseFuser>,
    pub sparse: Mlp,
    pub vl: Mlp,
}

impl Fuser {
    pub fn new(
        b: &mut Builder,
        hooks: &[usize],
        dense: bool,
        d_sem: usize,
        d_spa: usize,
        hidden: usize,
        d_l: usize,
    ) -> Result<Self> {
        let mut s = b.scope("fuser");
        // sparse and cue paths first: their initialisation must not depend on `dense`
        let sparse = Mlp::new(&mut s, "sparse", d_sem + d_spa, hidden, d_l)?;
        let vl = Mlp::new(&mut s, "vl", d_sem, hidden, d_l)?;
        let mut map = BTreeMap::new();
        if dense {
            for &h in hooks {
                map.insert(h, DenseFuser::new(&mut s, &format!("dense{h}"), d_sem, d_spa, hidden)?);
            }
        }
        Ok(Self { dense: map, sparse, vl })
    }

    /// Dense fusers, or `None` when disabled.
    pub fn dense_map(&self) -> Option<&BTreeMap<usize, DenseFuser>> {
        (!self.dense.is_empty()).then_some(&self.dense)
    }
}
