//! Two-stage training: cosine-softmax training of everything, then
//! fine-tuning of the feature extractors against frozen classifier weights.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::data::LabeledDataset;
use crate::heads::{Level, SCALE_FLOOR};
use crate::losses::{combined_cost, BranchTerms, FrozenWeights, LossConfig, LossError, Stage};
use crate::network::{classifier_name, Network, ParamGrads};
use crate::rng::rng_stream;
use crate::tensor::{Tensor, TensorError};
use crate::weightgen::argmax;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite in stage {stage} at epoch {epoch}")]
    Diverged { stage: u8, epoch: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub stage1_lr: f64,
    /// Stage-1 rate is multiplied by `lr_decay` every `lr_step_epochs`.
    pub lr_step_epochs: usize,
    pub lr_decay: f64,
    pub stage1_epochs: usize,
    /// Epochs of each stage run before the plateau test may stop training.
    pub min_epochs: usize,
    pub stage2_lr: f64,
    pub stage2_epochs: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            stage1_lr: 0.02,
            lr_step_epochs: 10,
            lr_decay: 0.1,
            stage1_epochs: 30,
            min_epochs: 10,
            stage2_lr: 2e-3,
            stage2_epochs: 10,
            momentum: 0.9,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size == 0 {
            return Err("trainer.batch_size must be at least 1".into());
        }
        if !(self.stage1_lr > 0.0) || !(self.lr_decay > 0.0) {
            return Err("trainer.stage1_lr and trainer.lr_decay must be positive".into());
        }
        if !(self.stage2_lr >= 0.0) {
            return Err("trainer.stage2_lr must be nonnegative".into());
        }
        if self.lr_step_epochs == 0 {
            return Err("trainer.lr_step_epochs must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err("trainer.momentum must be in [0, 1)".into());
        }
        Ok(())
    }

    pub fn stage1_rate(&self, epoch: usize) -> f64 {
        self.stage1_lr * self.lr_decay.powi((epoch / self.lr_step_epochs) as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// Counts across both stages.
    pub epoch: usize,
    pub stage: u8,
    pub lr: f64,
    /// Epoch means of the per-branch losses, level order.
    pub cosine: [f64; 3],
    pub centric: [f64; 3],
    /// Base-train accuracy (percent) per branch during the epoch.
    pub accuracy: [f64; 3],
    /// Monitored loss on the held-out base split.
    pub monitor: f64,
    pub wall_ms: u128,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch\tstage\tlr\tcs_mid\tcs_high\tcs_relation\tcen_mid\tcen_high\tcen_relation\tacc_mid\tacc_high\tacc_relation\tmonitor";

    /// One tab-separated line per epoch under [`TrainLog::HEADER`]. Wall
    /// time is left out so identical runs give identical text.
    pub fn to_tsv(&self) -> String {
        self.render(false)
    }

    /// As [`TrainLog::to_tsv`] with a trailing `wall_ms` column.
    pub fn to_tsv_timed(&self) -> String {
        self.render(true)
    }

    fn render(&self, timed: bool) -> String {
        let mut out = String::from(Self::HEADER);
        if timed {
            out.push_str("\twall_ms");
        }
        out.push('\n');
        for r in &self.records {
            let _ = write!(out, "{}\t{}\t{:e}", r.epoch, r.stage, r.lr);
            for v in r.cosine.iter().chain(&r.centric).chain(&r.accuracy) {
                let _ = write!(out, "\t{v:.6}");
            }
            let _ = write!(out, "\t{:.6}", r.monitor);
            if timed {
                let _ = write!(out, "\t{}", r.wall_ms);
            }
            out.push('\n');
        }
        out
    }
}

/// Frozen copies of every branch's classifier weights.
pub fn freeze_weights(net: &Network) -> FrozenWeights {
    FrozenWeights::new(
        net.branch(Level::Mid).weights.clone(),
        net.branch(Level::High).weights.clone(),
        net.branch(Level::Relation).weights.clone(),
    )
}

/// Momentum buffers keyed by parameter name.
#[derive(Default)]
pub struct Optimizer {
    velocity: BTreeMap<String, Tensor>,
    momentum: f64,
}

impl Optimizer {
    pub fn new(momentum: f64) -> Self {
        Optimizer {
            velocity: BTreeMap::new(),
            momentum,
        }
    }

    /// `v = μ v + g; p -= lr v` for every parameter that has a gradient.
    pub fn apply(&mut self, net: &mut Network, grads: &ParamGrads, lr: f64) {
        for (name, p) in net.params_mut() {
            let Some(g) = grads.get(&name) else { continue };
            let v = self.velocity.entry(name).or_insert_with(|| Tensor::zeros(g.shape()));
            for ((vi, gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= lr * *vi;
            }
        }
        for level in Level::ALL {
            let s = &mut net.branch_mut(level).scale.data_mut()[0];
            *s = s.max(SCALE_FLOOR);
        }
    }
}

pub struct StepStats {
    pub cosine: [f64; 3],
    pub centric: [f64; 3],
    pub correct: [usize; 3],
}

/// Loss and parameter gradients on one batch. In stage two classifier
/// weights and scales receive no gradient.
pub fn batch_gradients(
    net: &Network,
    batch: &Tensor,
    labels: &[usize],
    frozen: Option<&FrozenWeights>,
    losses: &LossConfig,
    stage: Stage,
) -> Result<(ParamGrads, StepStats), TrainError> {
    let fwd = net.forward(batch)?;
    let terms = Level::ALL.map(|l| {
        let b = net.branch(l);
        BranchTerms {
            features: &fwd.features[l.index()],
            weights: &b.weights,
            scale: &b.scale,
        }
    });
    let cost = combined_cost(terms, frozen, labels, losses, stage)?;
    let mut correct = [0usize; 3];
    for l in Level::ALL {
        let b = net.branch(l);
        let logits = crate::heads::branch_logits(b, &fwd.features[l.index()])?;
        correct[l.index()] = labels.iter().enumerate().filter(|(i, &y)| argmax(logits.row(*i)) == y).count();
    }
    let mut parts = cost.grad.backward(&Tensor::scalar(1.0));
    let scales: Vec<Tensor> = parts.split_off(6);
    let weights: Vec<Tensor> = parts.split_off(3);
    let mut grads = net.backward(&fwd, [&parts[0], &parts[1], &parts[2]]);
    if stage == Stage::One {
        for (l, (w, s)) in Level::ALL.into_iter().zip(weights.into_iter().zip(scales)) {
            grads.insert(classifier_name(l, "weight"), w);
            grads.insert(classifier_name(l, "scale"), s);
        }
    }
    Ok((
        grads,
        StepStats {
            cosine: cost.cosine,
            centric: cost.centric,
            correct,
        },
    ))
}

/// Sum of the branch losses on `data`, evaluated without updates.
pub fn monitored_loss(
    net: &Network,
    data: &LabeledDataset,
    frozen: Option<&FrozenWeights>,
    losses: &LossConfig,
    stage: Stage,
) -> Result<f64, TrainError> {
    let feats = net.embed(data)?;
    let terms = Level::ALL.map(|l| {
        let b = net.branch(l);
        BranchTerms {
            features: &feats[l.index()],
            weights: &b.weights,
            scale: &b.scale,
        }
    });
    let cost = combined_cost(terms, frozen, &data.labels, losses, stage)?;
    Ok(cost.grad.value.item())
}

struct StageRun<'a> {
    stage: Stage,
    epochs: usize,
    frozen: Option<&'a FrozenWeights>,
    first_epoch: usize,
}

fn run_stage(
    net: &mut Network,
    train: &LabeledDataset,
    monitor: &LabeledDataset,
    cfg: &TrainConfig,
    losses: &LossConfig,
    run: StageRun<'_>,
) -> Result<TrainLog, TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    losses.validate().map_err(TrainError::Config)?;
    let stage_no = if run.stage == Stage::One { 1 } else { 2 };
    let mut rng = rng_stream(cfg.seed, 20 + stage_no as u64);
    let mut opt = Optimizer::new(cfg.momentum);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = f64::INFINITY;
    let mut flat = 0;
    for e in 0..run.epochs {
        let started = Instant::now();
        let lr = match run.stage {
            Stage::One => cfg.stage1_rate(e),
            Stage::Two => cfg.stage2_lr,
        };
        order.shuffle(&mut rng);
        let mut cosine = [0.0; 3];
        let mut centric = [0.0; 3];
        let mut correct = [0usize; 3];
        for chunk in order.chunks(cfg.batch_size) {
            let labels = train.labels_of(chunk);
            let (grads, stats) = batch_gradients(net, &train.batch(chunk), &labels, run.frozen, losses, run.stage)?;
            let total: f64 = stats.cosine.iter().chain(&stats.centric).sum();
            if !total.is_finite() || grads.values().any(|g| !g.is_finite()) {
                return Err(TrainError::Diverged {
                    stage: stage_no,
                    epoch: run.first_epoch + e,
                });
            }
            let w = chunk.len() as f64 / train.len() as f64;
            for i in 0..3 {
                cosine[i] += stats.cosine[i] * w;
                centric[i] += stats.centric[i] * w;
                correct[i] += stats.correct[i];
            }
            opt.apply(net, &grads, lr);
        }
        let watched = monitored_loss(net, monitor, run.frozen, losses, run.stage)?;
        if !watched.is_finite() {
            return Err(TrainError::Diverged {
                stage: stage_no,
                epoch: run.first_epoch + e,
            });
        }
        log.records.push(EpochRecord {
            epoch: run.first_epoch + e,
            stage: stage_no,
            lr,
            cosine,
            centric,
            accuracy: correct.map(|c| 100.0 * c as f64 / train.len() as f64),
            monitor: watched,
            wall_ms: started.elapsed().as_millis(),
        });
        if best - watched < losses.epsilon {
            flat += 1;
            if flat >= losses.plateau_window && e + 1 >= cfg.min_epochs {
                break;
            }
        } else {
            flat = 0;
        }
        best = best.min(watched);
    }
    Ok(log)
}

/// Trains every parameter on the summed cosine softmax losses. Stops after
/// `stage1_epochs` or once the held-out loss stops improving.
pub fn train_stage1(
    net: &mut Network,
    train: &LabeledDataset,
    monitor: &LabeledDataset,
    cfg: &TrainConfig,
    losses: &LossConfig,
) -> Result<TrainLog, TrainError> {
    run_stage(
        net,
        train,
        monitor,
        cfg,
        losses,
        StageRun {
            stage: Stage::One,
            epochs: cfg.stage1_epochs,
            frozen: None,
            first_epoch: 0,
        },
    )
}

/// Fine-tunes the feature extractors toward the frozen classifier weights.
/// Classifier weights and scales are left untouched.
pub fn train_stage2(
    net: &mut Network,
    frozen: &FrozenWeights,
    train: &LabeledDataset,
    monitor: &LabeledDataset,
    cfg: &TrainConfig,
    losses: &LossConfig,
    first_epoch: usize,
) -> Result<TrainLog, TrainError> {
    for l in Level::ALL {
        if net.branch(l).weights != *frozen.get(l) {
            return Err(TrainError::Config(format!("{l} classifier differs from its frozen copy")));
        }
    }
    run_stage(
        net,
        train,
        monitor,
        cfg,
        losses,
        StageRun {
            stage: Stage::Two,
            epochs: cfg.stage2_epochs,
            frozen: Some(frozen),
            first_epoch,
        },
    )
}

/// Mean over samples of `‖normalize(f) − normalize(w*_y)‖²` per branch.
pub fn centric_distance(net: &Network, data: &LabeledDataset, frozen: &FrozenWeights) -> Result<[f64; 3], TrainError> {
    let feats = net.embed(data)?;
    let mut out = [0.0; 3];
    for l in Level::ALL {
        let g = crate::losses::weight_centric_loss(&feats[l.index()], frozen.get(l), &data.labels)?;
        out[l.index()] = g.value.item();
    }
    Ok(out)
}
