//! End-to-end training: Adam with bias correction, reduce-on-plateau
//! scheduling, the per-clip loss assembly, CSV step logging, and
//! bitwise-resumable train-state checkpoints.
//!
//! Every random draw is derived functionally from (seed, epoch, purpose), so
//! resuming from an epoch checkpoint replays the remaining epochs bit for
//! bit.

use std::collections::BTreeMap;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, Clip, VideoSequence};
use crate::error::{Error, Result};
use crate::geom::ObjectModel;
use crate::loss::{self, LossBreakdown, LossTerms};
use crate::model::{ForwardOutput, Model, ParamStore};
use crate::serialize::{self, TensorMap};
use crate::tensor::{Tape, Tensor};

/// Optimizer and loop hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Plateau scheduler: multiply lr by this factor ...
    pub plateau_factor: f64,
    /// ... once this many consecutive epochs fail to improve validation.
    pub plateau_patience: usize,
    /// An epoch improves only if val < best - min_delta.
    pub min_delta: f64,
    pub clip_len: usize,
    pub epochs: usize,
    /// Optimizer steps per epoch.
    pub steps_per_epoch: usize,
    /// Clips averaged into one optimizer step.
    pub batch_clips: usize,
    /// Fixed validation clips drawn per validation sequence.
    pub val_clips_per_seq: usize,
    /// Apply weight decay decoupled from the gradient (off: classic L2
    /// folded into the gradient).
    pub decoupled_decay: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            plateau_factor: 0.9,
            plateau_patience: 3,
            min_delta: 0.0,
            clip_len: 5,
            epochs: 20,
            steps_per_epoch: 32,
            batch_clips: 1,
            val_clips_per_seq: 4,
            decoupled_decay: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.plateau_factor) && self.plateau_factor != 1.0 {
            return Err(Error::InvalidInput {
                op: "TrainConfig",
                msg: format!("lr {} and plateau_factor {} must be positive (factor <= 1)", self.lr, self.plateau_factor),
            });
        }
        if self.clip_len < 2 {
            return Err(Error::InsufficientContext {
                need: 2,
                got: self.clip_len,
            });
        }
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_clips == 0 {
            return Err(Error::InvalidInput {
                op: "TrainConfig",
                msg: "epochs, steps_per_epoch, batch_clips must be >= 1".to_string(),
            });
        }
        Ok(())
    }
}

/// Adam first/second-moment accumulators, keyed like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: TensorMap,
    pub v: TensorMap,
    /// Completed optimizer steps (drives bias correction).
    pub step: u64,
}

impl AdamState {
    pub fn zeros_like(params: &ParamStore) -> AdamState {
        let zero = |map: &TensorMap| -> TensorMap {
            map.iter()
                .map(|(k, (s, d))| (k.clone(), (s.clone(), vec![0.0; d.len()])))
                .collect()
        };
        AdamState {
            m: zero(params.as_map()),
            v: zero(params.as_map()),
            step: 0,
        }
    }
}

/// One Adam update over all parameters. `grads` must cover every parameter;
/// non-finite gradients abort, naming the parameter.
pub fn adam_step(
    params: &mut ParamStore,
    state: &mut AdamState,
    grads: &BTreeMap<String, Vec<f64>>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let grad = grads.get(&name).ok_or_else(|| Error::InvalidInput {
            op: "adam_step",
            msg: format!("missing gradient for parameter {name}"),
        })?;
        if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: "gradient",
                step: t,
                detail: format!("parameter {name} has gradient {bad}"),
            });
        }
        let (_, p) = params.get(&name).expect("iterating own names");
        let mut p = p.to_vec();
        let m = &mut state.m.get_mut(&name).expect("adam state covers params").1;
        let v = &mut state.v.get_mut(&name).expect("adam state covers params").1;
        for i in 0..p.len() {
            let mut g = grad[i];
            if !cfg.decoupled_decay {
                g += cfg.weight_decay * p[i];
            }
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            if cfg.decoupled_decay {
                p[i] -= lr * cfg.weight_decay * p[i];
            }
        }
        params.set(&name, p)?;
    }
    Ok(())
}

/// Reduce-on-plateau bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauState {
    pub best: f64,
    pub bad_epochs: usize,
}

impl Default for PlateauState {
    fn default() -> Self {
        PlateauState {
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }
}

/// Feed one validation value; returns true when the learning rate was
/// reduced this epoch.
pub fn plateau_step(
    state: &mut PlateauState,
    val: f64,
    lr: &mut f64,
    cfg: &TrainConfig,
) -> bool {
    if val < state.best - cfg.min_delta {
        state.best = val;
        state.bad_epochs = 0;
        return false;
    }
    state.bad_epochs += 1;
    if state.bad_epochs >= cfg.plateau_patience {
        *lr *= cfg.plateau_factor;
        state.bad_epochs = 0;
        return true;
    }
    false
}

/// Everything needed to resume training exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    pub plateau: PlateauState,
    /// Completed epochs.
    pub epoch: usize,
    pub lr: f64,
}

impl TrainState {
    pub fn new(model: Model, cfg: &TrainConfig) -> TrainState {
        let adam = AdamState::zeros_like(&model.params);
        TrainState {
            model,
            adam,
            plateau: PlateauState::default(),
            epoch: 0,
            lr: cfg.lr,
        }
    }
}

/// One logged optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub lr: f64,
}

/// Render the training log as CSV with the pinned column set.
pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("step,pose,reg,inner_prod,future,total,lr\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.loss.pose, r.loss.reg, r.loss.inner_prod, r.loss.future, r.loss.total, r.lr
        ));
    }
    out
}

/// Per-epoch summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub lr_reduced: bool,
}

fn splitmix(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derive an independent RNG seed from (seed, epoch, purpose). Purely
/// functional so resumed runs draw the same streams.
pub fn derive_seed(seed: u64, epoch: u64, purpose: u64) -> u64 {
    splitmix(
        seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ purpose.wrapping_mul(0xD1B5_4A32_D192_ED03),
    )
}

const PURPOSE_CLIPS: u64 = 1;
const PURPOSE_JITTER: u64 = 2;
const PURPOSE_DROPOUT: u64 = 3;
const PURPOSE_VAL: u64 = 4;

/// Assemble the four-term loss for one clip's forward output. Pose, reg and
/// inner-product terms are averaged over all (frame, object) tokens; the
/// future term covers the whole clip once.
pub fn clip_loss(
    out: &ForwardOutput,
    gt: &[Vec<(u32, crate::geom::Pose)>],
    models: &BTreeMap<u32, ObjectModel>,
) -> Result<LossTerms> {
    let t = out.objects.len();
    let n = out.objects.first().map_or(0, Vec::len);
    if t == 0 || n == 0 {
        return Err(Error::EmptyInput("clip_loss"));
    }
    let mut pose_sum = Tensor::scalar(0.0);
    let mut reg_sum = Tensor::scalar(0.0);
    let mut inner_sum = Tensor::scalar(0.0);
    for (ti, frame) in out.objects.iter().enumerate() {
        for (oi, est) in frame.iter().enumerate() {
            let (class_id, gt_pose) = &gt[ti][oi];
            let model = models.get(class_id).ok_or_else(|| Error::InvalidInput {
                op: "clip_loss",
                msg: format!("unknown class id {class_id}"),
            })?;
            let q = gt_pose.rotation;
            let q_gt = Tensor::constant(&[4], vec![q.w, q.x, q.y, q.z])?;
            let t_gt = Tensor::constant(&[3], gt_pose.translation.to_vec())?;
            pose_sum = pose_sum.add(&loss::pose_loss(
                &est.quat_raw,
                &est.translation,
                &q_gt,
                &t_gt,
                &model.points,
            )?)?;
            reg_sum = reg_sum.add(&loss::reg_loss(&est.quat_raw)?)?;
            inner_sum = inner_sum.add(&loss::inner_prod_loss(&est.quat_raw, &q_gt)?)?;
        }
    }
    let scale = 1.0 / (t * n) as f64;
    let (future_raw, future) =
        loss::future_loss(&out.z_hat.tensor, &out.z_tilde.tensor)?;
    loss::total_loss(
        pose_sum.scale(scale)?,
        reg_sum.scale(scale)?,
        inner_sum.scale(scale)?,
        future,
        future_raw,
    )
}

struct ClipBatchItem<'a> {
    seq: &'a VideoSequence,
    clip: Clip,
}

fn draw_batch<'a>(
    seqs: &'a [VideoSequence],
    clip_len: usize,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ClipBatchItem<'a>>> {
    (0..count)
        .map(|_| {
            let seq = &seqs[rng.gen_range(0..seqs.len())];
            Ok(ClipBatchItem {
                seq,
                clip: data::sample_clip(seq, clip_len, rng)?,
            })
        })
        .collect()
}

fn run_clip(
    model: &Model,
    seq: &VideoSequence,
    clip: &Clip,
    models: &BTreeMap<u32, ObjectModel>,
    tape: Option<&Tape>,
    jitter_rng: Option<&mut ChaCha8Rng>,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(crate::model::BoundParams, LossTerms)> {
    let bound = model.params.bind(tape)?;
    let features = data::clip_features(seq, clip)?;
    let centers = data::clip_centers(seq, clip, jitter_rng);
    let out = model.forward(&bound, &features, &centers, &seq.intrinsics, dropout_rng)?;
    let terms = clip_loss(&out, &data::clip_poses(seq, clip), models)?;
    Ok((bound, terms))
}

/// Mean validation loss over a fixed (epoch-independent) set of clips.
pub fn validation_loss(
    model: &Model,
    val_seqs: &[VideoSequence],
    models: &BTreeMap<u32, ObjectModel>,
    cfg: &TrainConfig,
) -> Result<f64> {
    if val_seqs.is_empty() {
        return Err(Error::EmptyInput("validation_loss"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0, PURPOSE_VAL));
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in val_seqs {
        for _ in 0..cfg.val_clips_per_seq {
            let clip = data::sample_clip(seq, cfg.clip_len, &mut rng)?;
            let (_, terms) = run_clip(model, seq, &clip, models, None, None, None)?;
            total += terms.breakdown()?.total;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Run `cfg.epochs - state.epoch` remaining epochs. `on_epoch` fires after
/// each epoch (for checkpointing); the returned rows extend the step log.
pub fn train(
    state: &mut TrainState,
    cfg: &TrainConfig,
    train_seqs: &[VideoSequence],
    val_seqs: &[VideoSequence],
    models: &BTreeMap<u32, ObjectModel>,
    mut on_epoch: impl FnMut(&TrainState, &EpochStats) -> Result<()>,
) -> Result<(Vec<LogRow>, Vec<EpochStats>)> {
    cfg.validate()?;
    if train_seqs.is_empty() {
        return Err(Error::EmptyInput("train"));
    }
    let mut log = Vec::new();
    let mut history = Vec::new();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch as u64;
        let mut clip_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch, PURPOSE_CLIPS));
        let mut jitter_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch, PURPOSE_JITTER));
        let mut dropout_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch, PURPOSE_DROPOUT));

        let mut epoch_loss = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let batch = draw_batch(train_seqs, cfg.clip_len, cfg.batch_clips, &mut clip_rng)?;
            let mut grad_sum: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let mut mean = LossBreakdown::default();
            for item in &batch {
                let tape = Tape::new();
                let (bound, terms) = run_clip(
                    &state.model,
                    item.seq,
                    &item.clip,
                    models,
                    Some(&tape),
                    Some(&mut jitter_rng),
                    Some(&mut dropout_rng),
                )?;
                let b = terms.breakdown()?;
                if !b.total.is_finite() {
                    return Err(Error::NonFinite {
                        what: "loss",
                        step: state.adam.step + 1,
                        detail: format!("total loss {}", b.total),
                    });
                }
                mean.accumulate(&b, 1.0 / cfg.batch_clips as f64);
                let grads = terms.total.backward()?;
                for (name, tensor) in &bound {
                    let g = grads.get(tensor)?;
                    let entry = grad_sum
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; g.len()]);
                    for (s, gi) in entry.iter_mut().zip(g.data()) {
                        *s += gi / cfg.batch_clips as f64;
                    }
                }
            }
            adam_step(&mut state.model.params, &mut state.adam, &grad_sum, cfg, state.lr)?;
            epoch_loss += mean.total;
            log.push(LogRow {
                step: state.adam.step,
                loss: mean,
                lr: state.lr,
            });
        }
        let train_loss = epoch_loss / cfg.steps_per_epoch as f64;
        let val_loss = if val_seqs.is_empty() {
            train_loss
        } else {
            validation_loss(&state.model, val_seqs, models, cfg)?
        };
        let lr_reduced = plateau_step(&mut state.plateau, val_loss, &mut state.lr, cfg);
        state.epoch += 1;
        let stats = EpochStats {
            epoch: state.epoch,
            train_loss,
            val_loss,
            lr: state.lr,
            lr_reduced,
        };
        on_epoch(state, &stats)?;
        history.push(stats);
    }
    Ok((log, history))
}

impl LossBreakdown {
    fn accumulate(&mut self, other: &LossBreakdown, w: f64) {
        self.pose += w * other.pose;
        self.reg += w * other.reg;
        self.inner_prod += w * other.inner_prod;
        self.future += w * other.future;
        self.future_raw += w * other.future_raw;
        self.total += w * other.total;
    }
}

const STATE_SCALARS: &str = "state.scalars";

/// Save the full training state (parameters, Adam moments, counters) as one
/// deterministic checkpoint.
pub fn save_train_checkpoint(
    path: &std::path::Path,
    state: &TrainState,
    cfg: &TrainConfig,
) -> Result<()> {
    let mut tensors: TensorMap = TensorMap::new();
    for (k, v) in state.model.params.as_map() {
        tensors.insert(format!("param.{k}"), v.clone());
    }
    for (k, v) in &state.adam.m {
        tensors.insert(format!("adam.m.{k}"), v.clone());
    }
    for (k, v) in &state.adam.v {
        tensors.insert(format!("adam.v.{k}"), v.clone());
    }
    // counters go in a tensor: the binary chunk keeps f64 bits (and
    // infinities) exact, which JSON cannot
    tensors.insert(
        STATE_SCALARS.to_string(),
        (
            vec![5],
            vec![
                state.epoch as f64,
                state.adam.step as f64,
                state.lr,
                state.plateau.best,
                state.plateau.bad_epochs as f64,
            ],
        ),
    );
    let header = serde_json::json!({
        "kind": "train_state",
        "config": state.model.cfg,
        "train_config": cfg,
    });
    serialize::save_checkpoint(path, &header, &tensors)
}

/// Load a training checkpoint saved by [`save_train_checkpoint`].
pub fn load_train_checkpoint(path: &std::path::Path) -> Result<(TrainState, TrainConfig)> {
    let (header, tensors) = serialize::load_checkpoint(path)?;
    if header.get("kind").and_then(|k| k.as_str()) != Some("train_state") {
        return Err(Error::Checkpoint(format!(
            "expected a train_state checkpoint, got kind {:?}",
            header.get("kind")
        )));
    }
    let cfg: crate::model::DecoderConfig = serde_json::from_value(
        header
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("missing config in header".to_string()))?,
    )?;
    let train_cfg: TrainConfig = serde_json::from_value(
        header
            .get("train_config")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("missing train_config in header".to_string()))?,
    )?;
    let mut params = TensorMap::new();
    let mut m = TensorMap::new();
    let mut v = TensorMap::new();
    let mut scalars = None;
    for (k, tensor) in tensors {
        if let Some(rest) = k.strip_prefix("param.") {
            params.insert(rest.to_string(), tensor);
        } else if let Some(rest) = k.strip_prefix("adam.m.") {
            m.insert(rest.to_string(), tensor);
        } else if let Some(rest) = k.strip_prefix("adam.v.") {
            v.insert(rest.to_string(), tensor);
        } else if k == STATE_SCALARS {
            scalars = Some(tensor.1);
        } else {
            return Err(Error::Checkpoint(format!("unexpected tensor {k}")));
        }
    }
    let scalars =
        scalars.ok_or_else(|| Error::Checkpoint("missing state.scalars".to_string()))?;
    if scalars.len() != 5 {
        return Err(Error::Checkpoint(format!(
            "state.scalars must have 5 entries, got {}",
            scalars.len()
        )));
    }
    let state = TrainState {
        model: Model {
            cfg,
            params: ParamStore::from_map(params),
        },
        adam: AdamState {
            m,
            v,
            step: scalars[1] as u64,
        },
        plateau: PlateauState {
            best: scalars[3],
            bad_epochs: scalars[4] as usize,
        },
        epoch: scalars[0] as usize,
        lr: scalars[2],
    };
    Ok((state, train_cfg))
}
