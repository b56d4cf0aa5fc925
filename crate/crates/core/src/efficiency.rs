//! Token budgets, analytic FLOPs and wall-clock benchmarking.
//!
//! One multiply-accumulate counts as 2 FLOPs; softmax and normalisation
//! costs are ignored.

use std::time::Instant;

use crate::config::{RunConfig, VisualMode};
use crate::decoder::{coupler_token_count, DecoderMode};
use crate::error::{config_err, Result};
use crate::model::Model;
use crate::numerics::nn::MLP_RATIO;
use crate::numerics::{derive_seed, Graph};
use crate::scene::generate_episode;

/// `L · (8sd² + 4s²d + 4rsd²)`.
pub fn transformer_flops(s: u64, d: u64, layers: u64, mlp_ratio: u64) -> u64 {
    layers * (8 * s * d * d + 4 * s * s * d + 4 * mlp_ratio * s * d * d)
}

pub fn linear_flops(rows: u64, d_in: u64, d_out: u64) -> u64 {
    2 * rows * d_in * d_out
}

pub fn mlp_flops(rows: u64, d_in: u64, hidden: u64, d_out: u64) -> u64 {
    linear_flops(rows, d_in, hidden) + linear_flops(rows, hidden, d_out)
}

/// Splits `N/R` retained tokens into `(k, h)`: `k = k_default` when the
/// budget exceeds it, otherwise half (at least one) of the budget.
pub fn split_budget(n: usize, ratio: usize, k_default: usize) -> Result<(usize, usize)> {
    if ratio == 0 || !n.is_multiple_of(ratio) {
        return Err(config_err!("ratio {ratio} does not divide {n} visual tokens"));
    }
    let z = n / ratio;
    if z < 2 {
        return Err(config_err!(
            "ratio {ratio} leaves {z} tokens; need >= 2 (one cue, one anchor)"
        ));
    }
    if k_default == 0 {
        return Err(config_err!("cue_tokens must be >= 1"));
    }
    let k = if z > k_default { k_default } else { (z / 2).max(1) };
    Ok((k, z - k))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBudget {
    pub visual_in: usize,
    pub visual_out: usize,
    pub cue_tokens: usize,
    pub anchor_tokens: usize,
    /// Equals `anchor_tokens` when pruning.
    pub agg_tokens: usize,
    pub action_tokens_per_step: usize,
    pub action_tokens: usize,
    pub instr_len: usize,
    pub sequence_len: usize,
}

/// `ratio = None` keeps all `n` visual tokens.
pub fn token_budget(
    n: usize,
    ratio: Option<usize>,
    k_default: usize,
    instr_len: usize,
    chunk_len: usize,
    arms: usize,
    mode: DecoderMode,
) -> Result<TokenBudget> {
    let (visual_out, k, h) = match ratio {
        Some(r) => {
            let (k, h) = split_budget(n, r, k_default)?;
            (k + h, k, h)
        }
        None => (n, 0, 0),
    };
    let action_tokens = coupler_token_count(chunk_len, arms, mode);
    Ok(TokenBudget {
        visual_in: n,
        visual_out,
        cue_tokens: k,
        anchor_tokens: h,
        agg_tokens: h,
        action_tokens_per_step: mode.tokens_per_step(),
        action_tokens,
        instr_len,
        sequence_len: visual_out + 1 + instr_len + action_tokens,
    })
}

pub fn config_budget(cfg: &RunConfig) -> Result<TokenBudget> {
    let ratio = match cfg.visual_mode {
        VisualMode::Pruned => Some(cfg.ratio),
        VisualMode::Dense => None,
    };
    token_budget(
        cfg.num_patches(),
        ratio,
        cfg.cue_tokens,
        cfg.instr_len,
        cfg.chunk_len,
        cfg.arms,
        cfg.mode,
    )
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageFlops {
    pub stage: &'static str,
    pub seq_len: usize,
    pub width: usize,
    pub layers: usize,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopsReport {
    pub stages: Vec<StageFlops>,
    pub total: u64,
}

impl FlopsReport {
    fn new(stages: Vec<StageFlops>) -> Self {
        let total = stages.iter().map(|s| s.flops).sum();
        Self { stages, total }
    }

    pub fn stage(&self, name: &str) -> Option<&StageFlops> {
        self.stages.iter().find(|s| s.stage == name)
    }
}

pub fn pipeline_flops(cfg: &RunConfig) -> Result<FlopsReport> {
    let b = config_budget(cfg)?;
    let u = |v: usize| v as u64;
    let r = u(MLP_RATIO);
    let n = cfg.num_patches();
    let (ds, dp, dl, hid) = (cfg.sem_width, cfg.spa_width, cfg.decoder_width, cfg.fuser_hidden);
    let mut st = vec![
        StageFlops {
            stage: "semantic_tower",
            seq_len: n,
            width: ds,
            layers: cfg.tower_blocks,
            flops: transformer_flops(u(n), u(ds), u(cfg.tower_blocks), r),
        },
        StageFlops {
            stage: "spatial_tower",
            seq_len: n,
            width: dp,
            layers: cfg.tower_blocks,
            flops: transformer_flops(u(n), u(dp), u(cfg.tower_blocks), r),
        },
        StageFlops {
            stage: "instruction",
            seq_len: cfg.instr_len,
            width: ds,
            layers: cfg.instr_blocks,
            flops: transformer_flops(u(cfg.instr_len), u(ds), u(cfg.instr_blocks), r),
        },
    ];
    if cfg.dense_fusion && !cfg.hook_depths.is_empty() {
        let per_hook = mlp_flops(u(n), u(ds + dp), u(hid), u(ds)) + linear_flops(u(n), u(ds), u(ds + dp));
        st.push(StageFlops {
            stage: "dense_fusion",
            seq_len: n,
            width: ds + dp,
            layers: cfg.hook_depths.len(),
            flops: u(cfg.hook_depths.len()) * per_hook,
        });
    }
    match cfg.visual_mode {
        VisualMode::Pruned => {
            // attention only, no MLP
            let s = n + b.agg_tokens;
            st.push(StageFlops {
                stage: "sa_attention",
                seq_len: s,
                width: dp,
                layers: cfg.sa_rounds,
                flops: transformer_flops(u(s), u(dp), u(cfg.sa_rounds), 0),
            });
            let fuse = mlp_flops(u(b.anchor_tokens), u(ds + dp), u(hid), u(dl))
                + mlp_flops(u(b.cue_tokens), u(ds), u(hid), u(dl));
            st.push(StageFlops {
                stage: "sparse_fusion",
                seq_len: b.visual_out,
                width: dl,
                layers: 1,
                flops: fuse,
            });
        }
        VisualMode::Dense => st.push(StageFlops {
            stage: "sparse_fusion",
            seq_len: n,
            width: dl,
            layers: 1,
            flops: mlp_flops(u(n), u(ds + dp), u(hid), u(dl)),
        }),
    }
    st.push(StageFlops {
        stage: "decoder",
        seq_len: b.sequence_len,
        width: dl,
        layers: cfg.decoder_layers,
        flops: transformer_flops(u(b.sequence_len), u(dl), u(cfg.decoder_layers), r),
    });
    Ok(FlopsReport::new(st))
}

/// Baseline for efficiency comparisons: every patch kept, 7 tokens per step.
pub fn baseline_of(cfg: &RunConfig) -> RunConfig {
    RunConfig {
        visual_mode: VisualMode::Dense,
        mode: DecoderMode::Conventional,
        ..cfg.clone()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Timing {
    pub median_s: f64,
    pub p95_s: f64,
    pub min_s: f64,
}

/// Nearest-rank summary of `samples` (seconds).
pub fn summarize(samples: &[f64]) -> Timing {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    };
    let p95 = v[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
    Timing {
        median_s: median,
        p95_s: p95,
        min_s: v[0],
    }
}

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub config: String,
    pub stage: &'static str,
    pub seq_len: usize,
    pub flops: u64,
    pub timing: Timing,
    pub actions_per_s: f64,
}

pub const BENCH_HEADER: &str = "config,stage,seq_len,flops,median_s,p95_s,actions_per_s";

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{:.9},{:.9},{:.3}",
            self.config,
            self.stage,
            self.seq_len,
            self.flops,
            self.timing.median_s,
            self.timing.p95_s,
            self.actions_per_s
        )
    }
}

fn time_reps(reps: usize, warmup: usize, mut f: impl FnMut() -> Result<()>) -> Result<Timing> {
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64());
    }
    Ok(summarize(&samples))
}

/// Times the full pipeline and the decoder stage alone on one seeded
/// episode with freshly initialised parameters.
pub fn bench(cfg: &RunConfig, label: &str) -> Result<Vec<BenchRow>> {
    if cfg.bench_reps < 5 {
        return Err(config_err!("bench needs >= 5 repetitions"));
    }
    let model = Model::new(cfg)?;
    let ep = generate_episode(derive_seed(cfg.seed, 0xBE4C), &cfg.scene())?;
    let flops = pipeline_flops(cfg)?;
    let dec = flops.stage("decoder").expect("decoder stage").clone();
    let actions = (cfg.chunk_len * cfg.arms) as f64;

    let total = time_reps(cfg.bench_reps, cfg.bench_warmup, || {
        let mut g = Graph::new();
        model.forward(&mut g, &ep)?;
        Ok(())
    })?;

    // decoder inputs fixed from one full pass
    let mut g0 = Graph::new();
    let out = model.forward(&mut g0, &ep)?;
    let z = g0.value(out.z).clone();
    let instr = g0.value(out.instr_tokens).clone();
    let decoder = &model.decoder;
    let decode = time_reps(cfg.bench_reps, cfg.bench_warmup, || {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let iv = g.constant(instr.clone());
        decoder.forward(&mut g, &model.store, zv, &ep.proprio, iv)?;
        Ok(())
    })?;

    Ok(vec![
        BenchRow {
            config: label.to_string(),
            stage: "decoder",
            seq_len: dec.seq_len,
            flops: dec.flops,
            actions_per_s: actions / decode.median_s,
            timing: decode,
        },
        BenchRow {
            config: label.to_string(),
            stage: "total",
            seq_len: dec.seq_len,
            flops: flops.total,
            actions_per_s: actions / total.median_s,
            timing: total,
        },
    ])
}
