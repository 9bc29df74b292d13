//! Pretraining: pair sampling, the optimisation step, logging,
//! checkpoints and co-optimised online probes.

mod checkpoint;
mod online;
mod sweep;
#[cfg(test)]
mod tests;

use std::path::PathBuf;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{CheckpointState, OnlineState, CHECKPOINT_MAGIC};
pub use online::{OnlineEvalRecord, OnlineProbes, RunningNorm};
pub use sweep::{capsule_sweep, SweepReport, SweepRow, SweepRun};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::ndcore::{adam_step, AdamConfig, AdamState, Graph, ParamSet, Tensor};
use crate::objective::{total_loss, Embeddings, LossBreakdown, LossWeights};
use crate::predictor::quaternion_batch;
use crate::seeding::{derive_rng, derive_seed};
use crate::synthgen::{Dataset, ObjectSplit, TrainingPair};

const STREAM_INIT: u64 = 1;
const STREAM_EPOCH: u64 = 2;
const STREAM_PROBES: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Dataset archive; optional when the dataset is supplied in memory.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Online evaluation every this many epochs; 0 disables it.
    #[serde(default = "defaults::cadence")]
    pub eval_cadence: usize,
    /// Checkpoint every this many epochs; 0 keeps only the final state.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "defaults::val_fraction")]
    pub val_fraction: f64,
}

mod defaults {
    pub fn epochs() -> usize {
        100
    }
    pub fn batch_size() -> usize {
        128
    }
    pub fn cadence() -> usize {
        10
    }
    pub fn val_fraction() -> f64 {
        0.2
    }
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            dataset: None,
            seed,
            model: ModelConfig::default(),
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            loss: LossWeights::default(),
            adam: AdamConfig::default(),
            eval_cadence: defaults::cadence(),
            checkpoint_every: 0,
            val_fraction: defaults::val_fraction(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        self.model.validate()?;
        self.loss.validate()?;
        AdamState::<f32>::new(self.adam, &[])?;
        Ok(())
    }

    /// SHA-256 of the JSON form, ignoring the dataset path.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.dataset = None;
        let json = serde_json::to_vec(&c).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step(StepRecord),
    Eval(OnlineEvalRecord),
}

impl LogRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log record serialises")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub batch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

/// Where training stands: the next batch to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Position {
    pub epoch: usize,
    pub batch: usize,
    pub step: u64,
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub model: Model,
    pub params: ParamSet<f32>,
    pub adam: AdamState<f32>,
    pub online: Option<OnlineProbes>,
    dataset: &'a Dataset,
    split: ObjectSplit,
    position: Position,
    epoch_pairs: Option<(usize, Vec<TrainingPair>)>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, dataset: &'a Dataset) -> Result<Self> {
        config.validate()?;
        let split = dataset.object_split(config.val_fraction)?;
        if split.train.len() < 2 {
            return Err(Error::Config(
                "training split has fewer than two views".into(),
            ));
        }
        let mut params = ParamSet::new();
        let mut rng = derive_rng(config.seed, &[STREAM_INIT]);
        let model = Model::new(config.model.clone(), &mut params, &mut rng)?;
        let adam = AdamState::new(config.adam, params.values())?;
        let online = if config.eval_cadence > 0 {
            Some(OnlineProbes::new(
                model.config.encoder.output_shape().0,
                dataset.manifest.classes,
                derive_seed(config.seed, &[STREAM_PROBES]),
            )?)
        } else {
            None
        };
        Ok(Self {
            config,
            model,
            params,
            adam,
            online,
            dataset,
            split,
            position: Position {
                epoch: 0,
                batch: 0,
                step: 0,
            },
            epoch_pairs: None,
        })
    }

    pub fn position(&self) -> Position {
        self.position
    }

    pub fn split(&self) -> &ObjectSplit {
        &self.split
    }

    pub fn dataset(&self) -> &Dataset {
        self.dataset
    }

    pub fn is_finished(&self) -> bool {
        self.position.epoch >= self.config.epochs
    }

    /// Batches per epoch; a trailing single-pair batch is dropped.
    pub fn batches_per_epoch(&self) -> usize {
        let n = self.split.train.len();
        let full = n / self.config.batch_size;
        full + usize::from(n % self.config.batch_size >= 2)
    }

    fn pairs_for_epoch(&mut self, epoch: usize) -> Result<&[TrainingPair]> {
        if self.epoch_pairs.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut rng: ChaCha8Rng = derive_rng(self.config.seed, &[STREAM_EPOCH, epoch as u64]);
            let pairs = self.dataset.epoch_pairs(&self.split.train, &mut rng)?;
            self.epoch_pairs = Some((epoch, pairs));
        }
        Ok(&self.epoch_pairs.as_ref().expect("just filled").1)
    }

    /// Runs the next batch and returns its log records: the step, then an
    /// online evaluation if the step closed an evaluation epoch.
    pub fn step(&mut self) -> Result<Vec<LogRecord>> {
        if self.is_finished() {
            return Err(Error::Contract("training already finished".into()));
        }
        let Position { epoch, batch, step } = self.position;
        let bs = self.config.batch_size;
        let pairs: Vec<TrainingPair> = {
            let all = self.pairs_for_epoch(epoch)?;
            all[batch * bs..((batch + 1) * bs).min(all.len())].to_vec()
        };
        let record = self.optimise(&pairs).map_err(|e| match e {
            Error::Diverged { .. } => e,
            other => Error::Diverged {
                step,
                epoch,
                batch,
                views: pairs.iter().flat_map(|p| [p.view_a, p.view_b]).collect(),
                components: None,
                cause: other.to_string(),
            },
        })?;
        let mut out = vec![LogRecord::Step(record)];
        self.position.step += 1;
        self.position.batch += 1;
        if self.position.batch >= self.batches_per_epoch() {
            self.position.batch = 0;
            self.position.epoch += 1;
            let finished = self.position.epoch;
            if self.config.eval_cadence > 0 && finished % self.config.eval_cadence == 0 {
                let rec = self.online_eval()?;
                out.push(LogRecord::Eval(rec));
            }
        }
        Ok(out)
    }

    fn optimise(&mut self, pairs: &[TrainingPair]) -> Result<StepRecord> {
        let Position { epoch, batch, step } = self.position;
        let b = pairs.len();
        let mut views: Vec<usize> = pairs.iter().map(|p| p.view_a).collect();
        views.extend(pairs.iter().map(|p| p.view_b));
        let quats: Vec<_> = pairs.iter().map(|p| p.g_rel.canonical()).collect();

        let mut g = Graph::new();
        let p = self.params.bind(&mut g, true)?;
        let x = g.constant(self.dataset.images::<f32>(&views)?)?;
        let out = self.model.forward(&mut g, &p, x)?;
        let pose_a = g.narrow(out.pose, 0, 0, b)?;
        let q = g.constant(quaternion_batch(&quats)?)?;
        let pred = self.model.predictor.forward(&mut g, &p, pose_a, q)?;
        let e = Embeddings {
            act_a: g.narrow(out.act, 0, 0, b)?,
            act_b: g.narrow(out.act, 0, b, b)?,
            pose_a,
            pose_b: g.narrow(out.pose, 0, b, b)?,
            pred,
        };
        let loss = total_loss(&mut g, &e, &self.config.loss)?;
        let losses = loss.breakdown(&g);
        let diverged = |cause: String| Error::Diverged {
            step,
            epoch,
            batch,
            views: views.clone(),
            components: Some(losses),
            cause,
        };
        if !losses.is_finite() {
            return Err(diverged("non-finite loss component".into()));
        }
        let grads = g
            .backward(loss.total)
            .map_err(|e| diverged(e.to_string()))?;
        let gs: Vec<Tensor<f32>> = p.vars().iter().map(|&v| grads.wrt(v)).collect();
        adam_step(self.params.values_mut(), &gs, &mut self.adam)
            .map_err(|e| diverged(e.to_string()))?;
        if let Some(online) = &mut self.online {
            let rep = g.value(out.rep);
            online.train_step(rep, pairs, b)?;
        }
        Ok(StepRecord {
            step,
            epoch,
            batch,
            lr: self.config.adam.lr,
            losses,
        })
    }

    /// Scores the online probes on the validation objects.
    pub fn online_eval(&self) -> Result<OnlineEvalRecord> {
        let online = self
            .online
            .as_ref()
            .ok_or_else(|| Error::Config("online evaluation is disabled".into()))?;
        online.evaluate(
            &self.model,
            &self.params,
            self.dataset,
            &self.split,
            self.position,
        )
    }

    /// Runs to the end, passing each record to `sink`. Checkpoints are
    /// handed to `on_checkpoint` every `checkpoint_every` epochs.
    pub fn run(
        &mut self,
        mut sink: impl FnMut(&LogRecord) -> Result<()>,
        mut on_checkpoint: impl FnMut(&CheckpointState) -> Result<()>,
    ) -> Result<()> {
        while !self.is_finished() {
            let epoch = self.position.epoch;
            for r in self.step()? {
                sink(&r)?;
            }
            let every = self.config.checkpoint_every;
            if every > 0 && self.position.epoch != epoch && self.position.epoch % every == 0 {
                on_checkpoint(&self.checkpoint()?)?;
            }
        }
        Ok(())
    }

    /// Runs to the end and collects the log.
    pub fn run_collect(&mut self) -> Result<Vec<LogRecord>> {
        let mut log = Vec::new();
        self.run(
            |r| {
                log.push(r.clone());
                Ok(())
            },
            |_| Ok(()),
        )?;
        Ok(log)
    }
}

/// Trains from scratch and returns the final state and the full log.
pub fn pretrain(
    config: &TrainConfig,
    dataset: &Dataset,
) -> Result<(CheckpointState, Vec<LogRecord>)> {
    let mut trainer = Trainer::new(config.clone(), dataset)?;
    let log = trainer.run_collect()?;
    Ok((trainer.checkpoint()?, log))
}

/// Online evaluation series from a log.
pub fn eval_series(log: &[LogRecord]) -> Vec<OnlineEvalRecord> {
    log.iter()
        .filter_map(|r| match r {
            LogRecord::Eval(e) => Some(e.clone()),
            LogRecord::Step(_) => None,
        })
        .collect()
}

/// Step records from a log.
pub fn step_series(log: &[LogRecord]) -> Vec<StepRecord> {
    log.iter()
        .filter_map(|r| match r {
            LogRecord::Step(s) => Some(s.clone()),
            LogRecord::Eval(_) => None,
        })
        .collect()
}
