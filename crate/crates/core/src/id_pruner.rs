//! Instruction-driven pruning of the semantic stream.
//!
//! `S = normalize(V) · normalize(L·W)ᵀ` is `N×M`. Column sums rank
//! instruction tokens (cue words); each selected column's patch softmax
//! mixes the visual rows into one cue vector. Row sums rank patches; the
//! top rows are copied verbatim as anchors.

use std::cmp::Ordering;

use crate::error::{config_err, shape_err, Result};
use crate::numerics::nn::{Builder, Linear};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// Indices of the `count` largest scores; ties go to the lower index.
pub fn top_indices(scores: &[f64], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    idx.truncate(count);
    idx
}

/// Column sums of `S`, one per instruction token.
pub fn vl_saliency(s: &Tensor) -> Vec<f64> {
    s.column_sums()
}

/// Row sums of `S`, one per visual token.
pub fn lv_scores(s: &Tensor) -> Vec<f64> {
    s.row_sums()
}

pub fn select_cues(s: &Tensor, k: usize) -> Result<Vec<usize>> {
    let m = s.cols();
    if k == 0 || k > m {
        return Err(config_err!("cue count k={k} must be in 1..={m}"));
    }
    Ok(top_indices(&vl_saliency(s), k))
}

pub fn select_anchors(s: &Tensor, h: usize) -> Result<Vec<usize>> {
    let n = s.rows();
    if h == 0 || h > n {
        return Err(config_err!("anchor count h={h} must be in 1..={n}"));
    }
    Ok(top_indices(&lv_scores(s), h))
}

#[derive(Clone, Copy, Debug)]
pub struct Similarity {
    /// `N×M` cosine similarities.
    pub s: Var,
    /// Visual plus projected instruction rows with zero norm.
    pub zero_norm_rows: usize,
}

#[derive(Clone, Debug)]
pub struct CueTokens {
    pub indices: Vec<usize>,
    /// `k×N` patch weights, rows sum to 1.
    pub weights: Var,
    /// `k×d_v`.
    pub vectors: Var,
}

#[derive(Clone, Debug)]
pub struct AnchorTokens {
    pub indices: Vec<usize>,
    /// `h×d_v` copies of the visual rows at `indices`.
    pub vectors: Var,
}

#[derive(Clone, Debug)]
pub struct Selection {
    pub similarity: Similarity,
    pub cues: CueTokens,
    pub anchors: AnchorTokens,
}

impl Selection {
    pub fn token_count(&self) -> usize {
        self.cues.indices.len() + self.anchors.indices.len()
    }
}

/// Cosine of every visual row against every projected instruction row.
pub fn build_similarity(g: &mut Graph, visual: Var, projected: Var) -> Result<Similarity> {
    if g.value(visual).cols() != g.value(projected).cols() {
        return Err(shape_err!(
            "similarity widths differ: visual {:?}, projected instruction {:?}",
            g.value(visual).shape(),
            g.value(projected).shape()
        ));
    }
    let (vn, zv) = g.row_normalize(visual)?;
    let (pn, zp) = g.row_normalize(projected)?;
    let s = g.matmul_nt(vn, pn)?;
    Ok(Similarity {
        s,
        zero_norm_rows: zv + zp,
    })
}

pub fn vl_mapping(g: &mut Graph, s: Var, visual: Var, k: usize) -> Result<CueTokens> {
    vl_mapping_tempered(g, s, visual, k, 1.0)
}

/// [`vl_mapping`] with patch weights `softmax(S_{·,p} / temperature)`.
pub fn vl_mapping_tempered(g: &mut Graph, s: Var, visual: Var, k: usize, temperature: f64) -> Result<CueTokens> {
    let indices = select_cues(g.value(s), k)?;
    let cols = g.gather_cols(s, &indices)?;
    let mut cols_t = g.transpose(cols)?;
    if temperature != 1.0 {
        cols_t = g.scale(cols_t, 1.0 / temperature);
    }
    let weights = g.row_softmax(cols_t)?;
    let vectors = g.matmul(weights, visual)?;
    Ok(CueTokens {
        indices,
        weights,
        vectors,
    })
}

pub fn lv_filtering(g: &mut Graph, s: Var, visual: Var, h: usize) -> Result<AnchorTokens> {
    let indices = select_anchors(g.value(s), h)?;
    let vectors = g.gather_rows(visual, &indices)?;
    Ok(AnchorTokens { indices, vectors })
}

/// Learned instruction-to-visual projection plus the two selection paths.
#[derive(Clone, Debug)]
pub struct IdPruner {
    pub w_l: Linear,
    pub k: usize,
    pub h: usize,
    pub temperature: f64,
}

impl IdPruner {
    pub fn new(b: &mut Builder, instr_width: usize, visual_width: usize, k: usize, h: usize) -> Result<Self> {
        let mut s = b.scope("id_pruner");
        Ok(Self {
            w_l: Linear::new(&mut s, "w_l", instr_width, visual_width, false)?,
            k,
            h,
            temperature: 1.0,
        })
    }

    pub fn prune(&self, g: &mut Graph, store: &ParamStore, visual: Var, instr: Var) -> Result<Selection> {
        let (n, m) = (g.value(visual).rows(), g.value(instr).rows());
        if self.k + self.h > n + m {
            return Err(config_err!("k+h={} exceeds N+M={}", self.k + self.h, n + m));
        }
        let projected = self.w_l.forward(g, store, instr)?;
        let similarity = build_similarity(g, visual, projected)?;
        let cues = vl_mapping_tempered(g, similarity.s, visual, self.k, self.temperature)?;
        let anchors = lv_filtering(g, similarity.s, visual, self.h)?;
        Ok(Selection {
            similarity,
            cues,
            anchors,
        })
    }
}

/// Fraction of target patches present among the anchors.
pub fn selection_recall(anchors: &[usize], target_mask: &[bool]) -> f64 {
    let total = target_mask.iter().filter(|&&t| t).count();
    if total == 0 {
        return 0.0;
    }
    let hit = anchors
        .iter()
        .filter(|&&i| target_mask.get(i).copied().unwrap_or(false))
        .count();
    hit as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    }

    #[test]
    fn similarity_matches_pairwise_oracle() {
        let mut rng = Rng::new(17);
        let v = Tensor::uniform(&[6, 4], -2.0, 2.0, &mut rng);
        let l = Tensor::uniform(&[3, 5], -2.0, 2.0, &mut rng);
        let w = Tensor::uniform(&[5, 4], -2.0, 2.0, &mut rng);
        let p = crate::numerics::matmul(&l, &w).unwrap();
        let mut g = Graph::new();
        let (vv, pv) = (g.constant(v.clone()), g.constant(p.clone()));
        let sim = build_similarity(&mut g, vv, pv).unwrap();
        let s = g.value(sim.s);
        for i in 0..6 {
            for j in 0..3 {
                assert!((s.get(i, j) - cos(v.row(i), p.row(j))).abs() <= 1e-12);
            }
        }
        assert_eq!(sim.zero_norm_rows, 0);
    }

    #[test]
    fn similarity_parallel_orthogonal_and_zero() {
        let v = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0], vec![0.0, 0.0]]).unwrap();
        let p = Tensor::from_rows(&[vec![5.0, 0.0]]).unwrap();
        let mut g = Graph::new();
        let (vv, pv) = (g.constant(v), g.constant(p));
        let sim = build_similarity(&mut g, vv, pv).unwrap();
        let s = g.value(sim.s);
        assert!((s.get(0, 0) - 1.0).abs() <= 1e-9);
        assert!(s.get(1, 0).abs() <= 1e-9);
        assert_eq!(s.get(2, 0), 0.0);
        assert_eq!(sim.zero_norm_rows, 1);
    }

    #[test]
    fn selection_edges() {
        let s = Tensor::from_rows(&[vec![0.5], vec![0.5], vec![-0.1]]).unwrap();
        assert_eq!(select_cues(&s, 1).unwrap(), vec![0]);
        assert!(select_cues(&s, 2).is_err());
        assert_eq!(select_anchors(&s, 3).unwrap(), vec![0, 1, 2]);
        assert!(select_anchors(&s, 4).is_err());
        assert!(select_anchors(&s, 0).is_err());

        let dom = Tensor::from_rows(&[vec![-0.2, 0.0], vec![1.0, 1.0], vec![0.0, -0.5]]).unwrap();
        assert_eq!(select_anchors(&dom, 1).unwrap(), vec![1]);
        assert_eq!(select_cues(&dom, 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn cue_vectors_are_convex_combinations() {
        let mut rng = Rng::new(2);
        let v = Tensor::uniform(&[10, 3], -2.0, 2.0, &mut rng);
        let s = Tensor::uniform(&[10, 4], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let (vv, sv) = (g.constant(v.clone()), g.constant(s));
        let cues = vl_mapping(&mut g, sv, vv, 3).unwrap();
        let w = g.value(cues.weights);
        for r in 0..3 {
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            assert!(w.row(r).iter().all(|&x| x >= 0.0));
        }
        let vec = g.value(cues.vectors);
        for c in 0..3 {
            let col: Vec<f64> = (0..10).map(|i| v.get(i, c)).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for r in 0..3 {
                assert!(vec.get(r, c) >= lo - 1e-9 && vec.get(r, c) <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn anchors_copy_rows() {
        let mut rng = Rng::new(5);
        let v = Tensor::uniform(&[8, 3], -2.0, 2.0, &mut rng);
        let s = Tensor::uniform(&[8, 2], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let (vv, sv) = (g.constant(v.clone()), g.constant(s));
        let a = lv_filtering(&mut g, sv, vv, 4).unwrap();
        for (r, &i) in a.indices.iter().enumerate() {
            assert_eq!(g.value(a.vectors).row(r), v.row(i));
        }
    }

    #[test]
    fn prune_token_count() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let p = {
            let mut b = Builder::new(&mut store, &mut rng);
            IdPruner::new(&mut b, 6, 4, 1, 1).unwrap()
        };
        let mut g = Graph::new();
        let v = g.constant(Tensor::uniform(&[16, 4], -1.0, 1.0, &mut rng));
        let l = g.constant(Tensor::uniform(&[4, 6], -1.0, 1.0, &mut rng));
        let sel = p.prune(&mut g, &store, v, l).unwrap();
        assert_eq!(sel.token_count(), 2);
        assert_eq!(g.value(sel.similarity.s).shape(), &[16, 4]);
    }

    #[test]
    fn recall_counts_target_hits() {
        let mask = [false, true, true, false];
        assert_eq!(selection_recall(&[1, 3], &mask), 0.5);
        assert_eq!(selection_recall(&[2, 1, 0], &mask), 1.0);
        assert_eq!(selection_recall(&[0], &mask), 0.0);
    }

    fn sorted_oracle(scores: &[f64], count: usize) -> Vec<usize> {
        // selection sort: repeatedly take the first maximum
        let mut left: Vec<usize> = (0..scores.len()).collect();
        let mut out = Vec::new();
        while out.len() < count {
            let mut best = 0;
            for p in 1..left.len() {
                if scores[left[p]] > scores[left[best]] {
                    best = p;
                }
            }
            out.push(left.remove(best));
        }
        out
    }

    fn quantised(n: usize, m: usize) -> impl Strategy<Value = Tensor> {
        // coarse grid of values forces frequent ties
        proptest::collection::vec(-4i32..=4, n * m)
            .prop_map(move |v| Tensor::matrix(n, m, v.into_iter().map(|x| x as f64 / 4.0).collect()).unwrap())
    }

    proptest! {
        #[test]
        fn shift_invariant_selection(s in quantised(12, 5), c in -12i32..=12, k in 1usize..=5, h in 1usize..=12) {
            // dyadic shift keeps every sum exact, so ties survive the shift
            let mut dy = s.clone();
            dy.data_mut().iter_mut().for_each(|v| *v += c as f64 / 4.0);
            prop_assert_eq!(select_cues(&s, k).unwrap(), select_cues(&dy, k).unwrap());
            prop_assert_eq!(select_anchors(&s, h).unwrap(), select_anchors(&dy, h).unwrap());
        }

        #[test]
        fn selection_matches_oracle(s in quantised(9, 4), k in 1usize..=4, h in 1usize..=9) {
            prop_assert_eq!(select_cues(&s, k).unwrap(), sorted_oracle(&vl_saliency(&s), k));
            prop_assert_eq!(select_anchors(&s, h).unwrap(), sorted_oracle(&lv_scores(&s), h));
        }

        #[test]
        fn permuting_visual_rows(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let v = Tensor::uniform(&[7, 3], -2.0, 2.0, &mut rng);
            let p = Tensor::uniform(&[4, 3], -2.0, 2.0, &mut rng);
            let mut perm: Vec<usize> = (0..7).collect();
            rng.shuffle(&mut perm);
            let run = |v: Tensor| {
                let mut g = Graph::new();
                let (vv, pv) = (g.constant(v), g.constant(p.clone()));
                let sim = build_similarity(&mut g, vv, pv).unwrap();
                let cues = vl_mapping(&mut g, sim.s, vv, 2).unwrap();
                let anchors = lv_filtering(&mut g, sim.s, vv, 3).unwrap();
                (g.value(cues.vectors).clone(), cues.indices, anchors.indices)
            };
            let (c0, ci0, a0) = run(v.clone());
            let (c1, ci1, a1) = run(v.select_rows(&perm));
            prop_assert!(c0.max_abs_diff(&c1) <= 1e-9);
            prop_assert_eq!(ci0, ci1);
            // new row r holds old row perm[r]
            let mapped: Vec<usize> = a1.iter().map(|&r| perm[r]).collect();
            prop_assert_eq!(mapped, a0);
        }

        #[test]
        fn row_scale_invariance(seed in any::<u64>(), scale in 0.01f64..100.0) {
            let mut rng = Rng::new(seed);
            let v = Tensor::uniform(&[5, 3], -2.0, 2.0, &mut rng);
            let p = Tensor::uniform(&[2, 3], -2.0, 2.0, &mut rng);
            let mut v2 = v.clone();
            v2.data_mut()[..3].iter_mut().for_each(|x| *x *= scale);
            let mut g = Graph::new();
            let (a, b, pv) = (g.constant(v), g.constant(v2), g.constant(p));
            let s1 = build_similarity(&mut g, a, pv).unwrap().s;
            let s2 = build_similarity(&mut g, b, pv).unwrap().s;
            prop_assert!(g.value(s1).max_abs_diff(g.value(s2)) <= 1e-9);
            prop_assert!(g.value(s1).data().iter().all(|x| x.abs() <= 1.0 + 1e-9));
        }
    }
}
