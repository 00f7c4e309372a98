use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalOptions};
use super::{TrainConfig, TrainError};
use crate::data::{augment, Dataset, SceneSample};
use crate::matching::{match_hands, set_loss, set_loss_graph, GtHand, LossBreakdown, LossWeights};
use crate::model::{build_model, detection_set, forward, forward_graph, normalize_joints, ModelConfig, BACKBONE_PREFIX};
use crate::nn::{adamw_step_grouped, write_checkpoint, AdamWConfig, Gradients, Graph, NnError, OptimState, ParamStore};

const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4531;
const AUGMENT_SALT: u64 = 0x4155_474d_454e_5431;
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub cls_loss: f64,
    pub l1_loss: f64,
    pub lr_transformer: f64,
    pub lr_backbone: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub val_mpjpe_left: Option<f64>,
    pub val_mpjpe_right: Option<f64>,
    pub val_mpjpe_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Step(s) => Some(s),
            LogRecord::Epoch(_) => None,
        })
    }

    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Epoch(e) => Some(e),
            LogRecord::Step(_) => None,
        })
    }

    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("log serializes") + "\n").collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamStore<f64>,
    /// Parameters of the epoch with the lowest mean validation MPJPE.
    pub best: Option<(usize, ParamStore<f64>)>,
    pub log: TrainLog,
    pub steps: u64,
}

/// Ground-truth hands of `sample` in the model's normalized target space.
pub fn gt_hands(sample: &SceneSample, cfg: &ModelConfig) -> Vec<GtHand<f64>> {
    sample
        .hands
        .iter()
        .map(|h| GtHand { side: h.side, joints_norm: normalize_joints(&h.uvd, cfg) })
        .collect()
}

/// Matched set loss of one sample, without gradients.
pub fn sample_loss(
    params: &ParamStore<f64>,
    cfg: &ModelConfig,
    sample: &SceneSample,
    weights: &LossWeights,
) -> Result<LossBreakdown<f64>, TrainError> {
    let det = forward(params, &sample.image, cfg)?;
    let gts = gt_hands(sample, cfg);
    let assignment = match_hands(&det, &gts, weights)?;
    Ok(set_loss(&det, &gts, &assignment, weights)?)
}

fn sample_loss_grad(
    params: &ParamStore<f64>,
    cfg: &ModelConfig,
    sample: &SceneSample,
    weights: &LossWeights,
) -> Result<(LossBreakdown<f64>, Gradients<f64>), TrainError> {
    let mut g = Graph::new();
    let vars = forward_graph(&mut g, params, cfg, &sample.image)?;
    let det = detection_set(&g, vars)?;
    let gts = gt_hands(sample, cfg);
    let assignment = match_hands(&det, &gts, weights)?;
    let lv = set_loss_graph(&mut g, vars, &gts, &assignment, weights)?;
    let grads = g.backward(lv.total, params)?;
    let breakdown = LossBreakdown {
        cls_loss: g.value(lv.cls).item(),
        l1_loss: g.value(lv.l1).item(),
        total: g.value(lv.total).item(),
        weights: *weights,
    };
    Ok((breakdown, grads))
}

/// Runs `f` over `items`, sequentially or on the rayon pool; output order
/// follows input order either way.
pub(crate) fn map_ordered<I: Sync, O: Send>(
    sequential: bool,
    items: &[I],
    f: impl Fn(usize, &I) -> O + Sync + Send,
) -> Vec<O> {
    if sequential {
        items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
    } else {
        items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
}

fn mean_breakdown(parts: &[LossBreakdown<f64>], weights: &LossWeights) -> LossBreakdown<f64> {
    let n = parts.len().max(1) as f64;
    let sum = |f: fn(&LossBreakdown<f64>) -> f64| parts.iter().map(f).sum::<f64>() / n;
    LossBreakdown { cls_loss: sum(|b| b.cls_loss), l1_loss: sum(|b| b.l1_loss), total: sum(|b| b.total), weights: *weights }
}

/// Mean set loss over `ds` without augmentation.
pub fn dataset_loss(
    params: &ParamStore<f64>,
    cfg: &ModelConfig,
    ds: &Dataset,
    weights: &LossWeights,
    sequential: bool,
) -> Result<LossBreakdown<f64>, TrainError> {
    let parts = map_ordered(sequential, &ds.samples, |_, s| sample_loss(params, cfg, s, weights))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    Ok(mean_breakdown(&parts, weights))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TrainError + '_ {
    move |e| TrainError::Io { path: path.to_path_buf(), message: e.to_string() }
}

struct Outputs {
    dir: PathBuf,
    log: fs::File,
    model_config: serde_json::Value,
}

impl Outputs {
    fn create(dir: &Path, cfg: &ModelConfig) -> Result<Self, TrainError> {
        fs::create_dir_all(dir.join("checkpoints")).map_err(io_err(dir))?;
        let path = dir.join(LOG_FILE);
        let log = fs::File::create(&path).map_err(io_err(&path))?;
        let model_config = serde_json::to_value(cfg).expect("config serializes");
        Ok(Self { dir: dir.to_path_buf(), log, model_config })
    }

    fn record(&mut self, rec: &LogRecord) -> Result<(), TrainError> {
        let line = serde_json::to_string(rec).expect("log serializes");
        writeln!(self.log, "{line}").map_err(io_err(&self.dir.join(LOG_FILE)))
    }

    fn checkpoint(&self, name: &str, params: &ParamStore<f64>, step: u64) -> Result<(), TrainError> {
        Ok(write_checkpoint(&self.dir.join(name), params, step, Some(self.model_config.clone()))?)
    }
}

/// Trains a freshly initialized model on `train_set`.
///
/// Each step takes the next `batch_size` samples of a per-epoch shuffle,
/// optionally flips each one, matches and differentiates every sample
/// independently, and applies one AdamW step on the batch-mean gradient
/// (backbone parameters at `lr_backbone`, the rest at `lr_transformer`).
/// With `out_dir`, writes `train_log.jsonl`, `checkpoints/epoch-NNN` after
/// every epoch, `final`, and `best` when a validation set is given.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    let n = train_set.samples.len();
    if n == 0 {
        return Err(TrainError::Data("training set is empty".into()));
    }
    for s in &train_set.samples {
        let img = &s.image;
        if (img.height(), img.width()) != (model_cfg.image_height, model_cfg.image_width) {
            return Err(TrainError::Data(format!(
                "sample {} is {}x{}, model expects {}x{}",
                s.id,
                img.height(),
                img.width(),
                model_cfg.image_height,
                model_cfg.image_width
            )));
        }
    }

    let mut out = out_dir.map(|d| Outputs::create(d, model_cfg)).transpose()?;
    let mut params = build_model::<f64>(model_cfg, cfg.seed)?;
    let mut state = OptimState::new(&params);
    let adam = AdamWConfig { lr: cfg.lr_transformer, weight_decay: cfg.weight_decay, ..AdamWConfig::default() };
    let mut log = TrainLog::default();
    let mut best: Option<(usize, f64, ParamStore<f64>)> = None;
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.total_epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
        shuffle_rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut shuffle_rng);
        let (lr_t, lr_b) = cfg.lrs_at(epoch);

        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            step += 1;
            let first = (epoch * n + b * cfg.batch_size) as u64;
            let results = map_ordered(cfg.deterministic, batch, |k, &idx| {
                let sample = &train_set.samples[idx];
                let sample = if cfg.augment {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ AUGMENT_SALT);
                    rng.set_stream(first + k as u64);
                    augment(sample, &mut rng)
                } else {
                    sample.clone()
                };
                sample_loss_grad(&params, model_cfg, &sample, &cfg.loss)
            });
            let mut grads = Gradients::zeros_like(&params);
            let mut parts = Vec::with_capacity(batch.len());
            for r in results {
                let (loss, g) = match r {
                    Err(TrainError::Nn(NnError::NonFiniteLoss(loss))) => {
                        return Err(TrainError::NonFiniteLoss { step, loss })
                    }
                    other => other?,
                };
                grads.accumulate(&g)?;
                parts.push(loss);
            }
            grads.scale(1.0 / batch.len() as f64);
            let mean = mean_breakdown(&parts, &cfg.loss);
            if !mean.total.is_finite() || !grads.is_finite() {
                return Err(TrainError::NonFiniteLoss { step, loss: mean.total });
            }
            adamw_step_grouped(&mut params, &grads, &mut state, &adam, |name| {
                if name.starts_with(BACKBONE_PREFIX) {
                    lr_b
                } else {
                    lr_t
                }
            })?;
            let rec = LogRecord::Step(StepRecord {
                step,
                epoch,
                loss: mean.total,
                cls_loss: mean.cls_loss,
                l1_loss: mean.l1_loss,
                lr_transformer: lr_t,
                lr_backbone: lr_b,
            });
            if let Some(o) = out.as_mut() {
                o.record(&rec)?;
            }
            log.records.push(rec);
        }

        let mut rec = EpochRecord { epoch, step, val_mpjpe_left: None, val_mpjpe_right: None, val_mpjpe_mean: None };
        if let Some(val) = val_set {
            let opts = EvalOptions { sequential: cfg.deterministic, ..EvalOptions::default() };
            let report = evaluate(&params, model_cfg, val, &opts)?;
            rec.val_mpjpe_left = report.mpjpe_left;
            rec.val_mpjpe_right = report.mpjpe_right;
            rec.val_mpjpe_mean = report.mean_mpjpe();
            if let Some(m) = rec.val_mpjpe_mean {
                if best.as_ref().map_or(true, |(_, b, _)| m < *b) {
                    best = Some((epoch, m, params.clone()));
                    if let Some(o) = out.as_ref() {
                        o.checkpoint("best", &params, step)?;
                    }
                }
            }
        }
        if let Some(o) = out.as_mut() {
            o.checkpoint(&format!("checkpoints/epoch-{:03}", epoch + 1), &params, step)?;
            o.record(&LogRecord::Epoch(rec.clone()))?;
        }
        log.records.push(LogRecord::Epoch(rec));
    }
    if let Some(o) = out.as_ref() {
        o.checkpoint("final", &params, step)?;
    }
    Ok(TrainOutcome { params, best: best.map(|(e, _, p)| (e, p)), log, steps: step })
}
