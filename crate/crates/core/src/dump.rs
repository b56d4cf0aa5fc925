//! Attention and cue-word dumps as PGM heatmaps and CSV tables.

use std::path::{Path, PathBuf};

use crate::config::VisualMode;
use crate::error::{config_err, Error, Result};
use crate::id_pruner::{lv_scores, vl_saliency};
use crate::model::Model;
use crate::numerics::{Graph, Tensor};
use crate::scene::Episode;
use crate::svt::{self, Record};

/// Everything the dump writes, before serialisation.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub grid_side: usize,
    /// `k` rows of `N` patch weights.
    pub cue_maps: Vec<Vec<f64>>,
    pub cue_indices: Vec<usize>,
    pub anchor_indices: Vec<usize>,
    pub anchor_scores: Vec<f64>,
    /// `A` rows of `N` head-averaged last-round weights onto patches.
    pub agg_maps: Vec<Vec<f64>>,
    /// `N×M` cosine similarities.
    pub similarity: Tensor,
    /// Softmax over instruction positions of the cue saliency; sums to 1.
    pub saliency: Vec<f64>,
}

/// Softmax over a score vector.
pub fn normalize_saliency(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn attention_maps(model: &Model, ep: &Episode) -> Result<AttentionMaps> {
    if model.cfg.visual_mode != VisualMode::Pruned {
        return Err(config_err!("attention dumps need visual_mode = pruned"));
    }
    let mut g = Graph::new();
    let out = model.forward(&mut g, ep)?;
    let (sel, sa) = match (out.selection, out.sa) {
        (Some(s), Some(a)) => (s, a),
        _ => return Err(config_err!("pruned forward produced no selection")),
    };
    let n = model.cfg.num_patches();
    let s = g.value(sel.similarity.s).clone();
    let w = g.value(sel.cues.weights);
    let cue_maps = (0..w.rows()).map(|j| w.row(j).to_vec()).collect();

    let scores = lv_scores(&s);
    let anchor_scores = sel.anchors.indices.iter().map(|&i| scores[i]).collect();

    let heads = sa.last_weights.len() as f64;
    let mut agg_maps = vec![vec![0.0; n]; model.sa.agg_count];
    for p in &sa.last_weights {
        let p = g.value(*p);
        for (a, map) in agg_maps.iter_mut().enumerate() {
            for (i, v) in map.iter_mut().enumerate() {
                *v += p.get(n + a, i) / heads;
            }
        }
    }
    Ok(AttentionMaps {
        grid_side: model.cfg.grid_side,
        cue_maps,
        cue_indices: sel.cues.indices,
        anchor_indices: sel.anchors.indices,
        anchor_scores,
        agg_maps,
        saliency: normalize_saliency(&vl_saliency(&s)),
        similarity: s,
    })
}

/// Plain (P2) greymap; values are min-max scaled to 0..=255.
pub fn pgm(side: usize, values: &[f64]) -> String {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut s = format!("P2\n{side} {side}\n255\n");
    for r in 0..side {
        let row: Vec<String> = (0..side)
            .map(|c| {
                let v = values[r * side + c];
                let q = if span > 0.0 {
                    ((v - lo) / span * 255.0).round()
                } else {
                    0.0
                };
                format!("{}", q as u8)
            })
            .collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn anchor_mask(side: usize, anchors: &[usize]) -> Vec<f64> {
    let mut m = vec![0.0; side * side];
    for &i in anchors {
        m[i] = 1.0;
    }
    m
}

fn write(dir: &Path, name: &str, text: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    files.push(path);
    Ok(())
}

/// Writes `cue_{j}.pgm`, `anchor_mask.pgm`, `agg_{a}.pgm`, `S.svt`,
/// `anchors.csv` and `saliency.csv` into `dir`; returns the paths written.
pub fn dump_attention(model: &Model, ep: &Episode, dir: &Path) -> Result<Vec<PathBuf>> {
    let maps = attention_maps(model, ep)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let side = maps.grid_side;
    let mut files = Vec::new();
    for (j, m) in maps.cue_maps.iter().enumerate() {
        write(dir, &format!("cue_{j}.pgm"), &pgm(side, m), &mut files)?;
    }
    write(
        dir,
        "anchor_mask.pgm",
        &pgm(side, &anchor_mask(side, &maps.anchor_indices)),
        &mut files,
    )?;
    for (a, m) in maps.agg_maps.iter().enumerate() {
        write(dir, &format!("agg_{a}.pgm"), &pgm(side, m), &mut files)?;
    }

    let s_path = dir.join("S.svt");
    svt::write_file(&s_path, &[Record::f64("S", &maps.similarity)])?;
    files.push(s_path);

    let mut csv = String::from("rank,patch,row,col,score,target\n");
    for (rank, (&p, sc)) in maps.anchor_indices.iter().zip(&maps.anchor_scores).enumerate() {
        let (r, c) = (p / side, p % side);
        csv.push_str(&format!("{rank},{p},{r},{c},{sc:e},{}\n", ep.target_mask[p] as u8));
    }
    write(dir, "anchors.csv", &csv, &mut files)?;

    let mut csv = String::from("position,token,saliency,cue\n");
    for (j, v) in maps.saliency.iter().enumerate() {
        let cue = maps.cue_indices.contains(&j) as u8;
        csv.push_str(&format!("{j},{},{v:e},{cue}\n", ep.instruction[j]));
    }
    write(dir, "saliency.csv", &csv, &mut files)?;
    Ok(files)
}
