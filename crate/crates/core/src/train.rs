//! Adam training loop, evaluation metrics and checkpoints.

use std::path::Path;

use crate::config::{RunConfig, VisualMode};
use crate::decoder::threshold_gripper;
use crate::efficiency::pipeline_flops;
use crate::error::{config_err, Error, FormatError, Result};
use crate::id_pruner::selection_recall;
use crate::model::Model;
use crate::numerics::{derive_seed, Graph, Rng, Tensor};
use crate::scene::{generate_episodes, Episode, ACTION_DIM};
use crate::svt::{self, Record};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Absolute tolerance of the success proxy on continuous actions.
pub const SUCCESS_TOL: f64 = 0.1;

const STREAM_BATCHES: u64 = 0xBA7C;
const STREAM_EVAL: u64 = 0xE7A1;

/// Held-out episodes derived from the run seed.
pub fn eval_episodes(cfg: &RunConfig) -> Result<Vec<Episode>> {
    generate_episodes(derive_seed(cfg.seed, STREAM_EVAL), cfg.eval_count, &cfg.scene())
}

/// Linear warm-up over the first `warmup_fraction` of steps, then cosine
/// decay to zero at `steps`.
pub fn learning_rate(cfg: &RunConfig, step: usize) -> f64 {
    let total = cfg.steps.max(1);
    let warm = (cfg.warmup_fraction * total as f64).ceil() as usize;
    if step < warm {
        return cfg.learning_rate * (step + 1) as f64 / warm as f64;
    }
    let span = (total - warm).max(1) as f64;
    let t = ((step - warm) as f64 / span).min(1.0);
    cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Tensor> = model
            .store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update from the accumulated gradients.
    pub fn step(&mut self, model: &mut Model, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (i, p) in model.store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = p.grad.data();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_gradients(model: &mut Model, max_norm: f64) -> f64 {
    let norm = model
        .store
        .iter()
        .map(|(_, p)| p.grad.data().iter().map(|g| g * g).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for p in model.store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub mse: f64,
    /// NaN without pruning.
    pub recall: f64,
    pub success: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodePrediction {
    pub chunk: Tensor,
    pub mse: f64,
    pub recall: f64,
    pub success: bool,
}

pub fn score_episode(model: &Model, ep: &Episode) -> Result<EpisodePrediction> {
    let pred = model.predict(ep)?;
    let t = &ep.action_chunk;
    if pred.chunk.shape() != t.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.chunk.shape(),
            t.shape()
        )));
    }
    let mse = pred
        .chunk
        .data()
        .iter()
        .zip(t.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / t.len() as f64;
    let snapped = threshold_gripper(&pred.chunk);
    let mut success = true;
    for r in 0..t.rows() {
        for c in 0..t.cols() {
            let ok = if c % ACTION_DIM == ACTION_DIM - 1 {
                snapped.get(r, c) == t.get(r, c)
            } else {
                (pred.chunk.get(r, c) - t.get(r, c)).abs() < SUCCESS_TOL
            };
            success &= ok;
        }
    }
    let recall = pred
        .anchors
        .as_ref()
        .map_or(f64::NAN, |a| selection_recall(a, &ep.target_mask));
    Ok(EpisodePrediction {
        chunk: pred.chunk,
        mse,
        recall,
        success,
    })
}

pub fn evaluate(model: &Model, episodes: &[Episode]) -> Result<EvalMetrics> {
    if episodes.is_empty() {
        return Ok(EvalMetrics {
            mse: f64::NAN,
            recall: f64::NAN,
            success: f64::NAN,
            count: 0,
        });
    }
    let (mut mse, mut recall, mut success) = (0.0, 0.0, 0.0);
    for ep in episodes {
        let p = score_episode(model, ep)?;
        mse += p.mse;
        recall += p.recall;
        success += p.success as u8 as f64;
    }
    let n = episodes.len() as f64;
    Ok(EvalMetrics {
        mse: mse / n,
        recall: recall / n,
        success: success / n,
        count: episodes.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub batch_loss: f64,
    pub train_mse: f64,
    pub eval_mse: f64,
    pub recall: f64,
    pub success: f64,
    pub tokens: usize,
    pub flops: u64,
}

pub const METRICS_HEADER: &str = "step,lr,batch_loss,train_mse,eval_mse,recall,success,tokens,flops";

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{},{},{},{}",
            self.step,
            self.lr,
            self.batch_loss,
            self.train_mse,
            self.eval_mse,
            self.recall,
            self.success,
            self.tokens,
            self.flops
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<MetricsRow>,
}

/// Episodes whose MSE is logged as `train_mse`: the first `eval_count`.
pub fn train_probe<'a>(cfg: &RunConfig, train: &'a [Episode]) -> &'a [Episode] {
    &train[..cfg.eval_count.min(train.len())]
}

/// Trains from a fresh initialisation. With `out_dir`, the checkpoint and
/// metrics CSV are rewritten at every evaluation, so an abort on a
/// non-finite loss leaves the last good pair on disk.
pub fn train(
    cfg: &RunConfig,
    train_set: &[Episode],
    eval_set: &[Episode],
    out_dir: Option<&Path>,
    log: &mut dyn FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    let mut model = Model::new(cfg)?;
    if train_set.is_empty() && cfg.steps > 0 {
        return Err(config_err!("training set is empty"));
    }
    let tokens = model.budget.visual_out;
    let flops = pipeline_flops(cfg)?.total;
    let mut adam = Adam::new(&model);
    let mut rng = Rng::new(derive_seed(cfg.seed, STREAM_BATCHES));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    let mut metrics = Vec::new();
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);

    let mut record =
        |model: &Model, step: usize, lr: f64, batch_loss: f64, metrics: &mut Vec<MetricsRow>| -> Result<()> {
            let probe = evaluate(model, train_probe(cfg, train_set))?;
            let ev = evaluate(model, eval_set)?;
            let row = MetricsRow {
                step,
                lr,
                batch_loss,
                train_mse: probe.mse,
                eval_mse: ev.mse,
                recall: ev.recall,
                success: ev.success,
                tokens,
                flops,
            };
            log(&row);
            metrics.push(row);
            if let Some(dir) = out_dir {
                save_checkpoint(model, &dir.join("checkpoint.svt"), step)?;
                let path = dir.join("metrics.csv");
                std::fs::write(&path, metrics_csv(metrics)).map_err(|e| Error::io(&path, e))?;
            }
            Ok(())
        };

    record(&model, 0, learning_rate(cfg, 0), f64::NAN, &mut metrics)?;
    for step in 0..cfg.steps {
        model.store.zero_grads();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            let ep = &train_set[order[cursor]];
            cursor += 1;
            let mut g = Graph::new();
            let (loss, _) = model.loss(&mut g, ep)?;
            let l = g.value(loss).item();
            if !l.is_finite() {
                return Err(Error::NonFinite { step });
            }
            batch_loss += l / cfg.batch_size as f64;
            let grads = g.backward(loss)?;
            model.store.accumulate(&grads, 1.0 / cfg.batch_size as f64);
        }
        clip_gradients(&mut model, cfg.grad_clip);
        let lr = learning_rate(cfg, step);
        adam.step(&mut model, lr);
        if model.store.iter().any(|(_, p)| !p.value.is_finite()) {
            return Err(Error::NonFinite { step });
        }
        loss_sum += batch_loss;
        loss_n += 1;
        let done = step + 1;
        if done == cfg.steps || (cfg.eval_interval > 0 && done % cfg.eval_interval == 0) {
            record(&model, done, lr, loss_sum / loss_n as f64, &mut metrics)?;
            loss_sum = 0.0;
            loss_n = 0;
        }
    }
    Ok(TrainOutcome { model, metrics })
}

const CONFIG_RECORD: &str = "config";
const STEP_RECORD: &str = "meta/step";

pub fn checkpoint_records(model: &Model, step: usize) -> Vec<Record> {
    let text = model.cfg.to_text().into_bytes();
    let mut recs = vec![
        Record::u8(CONFIG_RECORD, vec![text.len()], text),
        Record::u32(STEP_RECORD, vec![1], vec![step as u32]),
    ];
    recs.extend(model.store.iter().map(|(_, p)| Record::f64(p.name.clone(), &p.value)));
    recs
}

pub fn save_checkpoint(model: &Model, path: &Path, step: usize) -> Result<()> {
    svt::write_file(path, &checkpoint_records(model, step))
}

/// Rebuilds the model from the embedded config and overwrites every
/// parameter; missing, extra or mis-shaped records are errors.
pub fn model_from_records(records: &[Record]) -> Result<(Model, usize)> {
    let cfg_rec = records
        .iter()
        .find(|r| r.name == CONFIG_RECORD)
        .ok_or_else(|| FormatError::Malformed("checkpoint has no config record".into()))?;
    let text = std::str::from_utf8(cfg_rec.as_u8()?)
        .map_err(|_| FormatError::Malformed("config record is not UTF-8".into()))?;
    let cfg = RunConfig::parse(text)?;
    let step = records
        .iter()
        .find(|r| r.name == STEP_RECORD)
        .and_then(|r| r.as_u32().ok().and_then(|v| v.first().copied()))
        .unwrap_or(0) as usize;
    let mut model = Model::new(&cfg)?;
    let mut seen = 0;
    for r in records {
        if r.name == CONFIG_RECORD || r.name == STEP_RECORD {
            continue;
        }
        let id = model
            .store
            .id(&r.name)
            .ok_or_else(|| Error::Shape(format!("checkpoint parameter {} not in model", r.name)))?;
        model.store.set_value(id, r.as_tensor()?)?;
        seen += 1;
    }
    if seen != model.store.len() {
        return Err(Error::Shape(format!(
            "checkpoint holds {seen} of {} model parameters",
            model.store.len()
        )));
    }
    Ok((model, step))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    Ok(model_from_records(&svt::read_file(path)?)?.0)
}

/// Same as [`load_checkpoint`] but rejects a checkpoint whose model-shaping
/// config differs from `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &RunConfig) -> Result<Model> {
    let model = load_checkpoint(path)?;
    let shape_keys = [
        "grid_side",
        "num_types",
        "vocab_size",
        "instr_len",
        "chunk_len",
        "arms",
        "ratio",
        "cue_tokens",
        "visual_mode",
        "mode",
        "tower_blocks",
        "sem_width",
        "spa_width",
        "tower_heads",
        "hook_depths",
        "dense_fusion",
        "instr_blocks",
        "fuser_hidden",
        "sa_rounds",
        "agg_init",
        "decoder_layers",
        "decoder_width",
        "decoder_heads",
    ];
    let a = model.cfg.entries();
    let b = expected.entries();
    for ((k, va), (_, vb)) in a.iter().zip(&b) {
        if shape_keys.contains(k) && va != vb {
            return Err(config_err!("checkpoint {k} = {va} but config has {vb}"));
        }
    }
    Ok(model)
}

/// Recall is undefined for the dense baseline.
pub fn recall_defined(cfg: &RunConfig) -> bool {
    cfg.visual_mode == VisualMode::Pruned
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub ratio: usize,
    pub tokens: usize,
    pub flops: u64,
    pub eval_mse: f64,
    pub recall: f64,
    pub success: f64,
}

pub const ABLATION_HEADER: &str = "ratio,tokens,flops,eval_mse,recall,success,status";

/// Config of one sweep row: the ratio replaced and the seed mixed with it,
/// so rows differ in init and batch order but share data.
pub fn ablation_config(base: &RunConfig, ratio: usize) -> RunConfig {
    RunConfig {
        ratio,
        seed: base.seed ^ ratio as u64,
        ..base.clone()
    }
}

pub fn ablation_row(
    base: &RunConfig,
    ratio: usize,
    train_set: &[Episode],
    eval_set: &[Episode],
) -> Result<AblationRow> {
    let cfg = ablation_config(base, ratio);
    cfg.validate()?;
    let flops = pipeline_flops(&cfg)?.total;
    let out = train(&cfg, train_set, eval_set, None, &mut |_| {})?;
    let m = evaluate(&out.model, eval_set)?;
    Ok(AblationRow {
        ratio,
        tokens: out.model.budget.visual_out,
        flops,
        eval_mse: m.mse,
        recall: m.recall,
        success: m.success,
    })
}

/// Rows in input order; a failed row keeps its ratio and carries the error
/// text in the status column.
pub fn ablation_csv(rows: &[(usize, Result<AblationRow>)]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for (ratio, row) in rows {
        match row {
            Ok(r) => s.push_str(&format!(
                "{},{},{},{:e},{},{},ok\n",
                r.ratio, r.tokens, r.flops, r.eval_mse, r.recall, r.success
            )),
            Err(e) => s.push_str(&format!("{ratio},,,,,,{}\n", e.to_string().replace([',', '\n'], ";"))),
        }
    }
    s
}
