//! End-to-end training run: initialize, stage 1, freeze, stage 2.

use crate::config::RunConfig;
use crate::data::DatasetPair;
use crate::losses::FrozenWeights;
use crate::network::Network;
use crate::rng::rng_stream;
use crate::trainer::{freeze_weights, train_stage1, train_stage2, TrainError, TrainLog};

/// Stream of `trainer.seed` used for parameter initialization.
const INIT_STREAM: u64 = 1;

pub struct TrainRun {
    /// Parameters at the end of stage 1.
    pub stage1: Network,
    /// Parameters after weight-centric fine-tuning, when it ran.
    pub stage2: Option<Network>,
    pub frozen: FrozenWeights,
    pub log: TrainLog,
}

impl TrainRun {
    /// The most trained network.
    pub fn last(&self) -> &Network {
        self.stage2.as_ref().unwrap_or(&self.stage1)
    }

    pub fn last_epoch(&self) -> usize {
        self.log.records.last().map_or(0, |r| r.epoch)
    }

    pub fn stage1_last_epoch(&self) -> usize {
        self.log.records.iter().filter(|r| r.stage == 1).map(|r| r.epoch).last().unwrap_or(0)
    }
}

pub fn init_network(cfg: &RunConfig, num_classes: usize) -> Result<Network, TrainError> {
    Network::init(
        &cfg.backbone,
        &cfg.heads,
        num_classes,
        &mut rng_stream(cfg.trainer.seed, INIT_STREAM),
    )
    .map_err(TrainError::Config)
}

/// Trains on `pair.base_train`, monitoring `pair.base_test`. Stage 2 runs
/// only when `weight_centric` is set.
pub fn train_run(cfg: &RunConfig, pair: &DatasetPair, weight_centric: bool) -> Result<TrainRun, TrainError> {
    let mut net = init_network(cfg, pair.base_train.label_space.len())?;
    let mut log = train_stage1(&mut net, &pair.base_train, &pair.base_test, &cfg.trainer, &cfg.losses)?;
    let frozen = freeze_weights(&net);
    let stage1 = net.clone();
    let stage2 = if weight_centric {
        let first = log.records.last().map_or(0, |r| r.epoch + 1);
        let more = train_stage2(
            &mut net,
            &frozen,
            &pair.base_train,
            &pair.base_test,
            &cfg.trainer,
            &cfg.losses,
            first,
        )?;
        log.records.extend(more.records);
        Some(net)
    } else {
        None
    };
    Ok(TrainRun { stage1, stage2, frozen, log })
}
