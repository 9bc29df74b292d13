//! Probes trained alongside pretraining on detached encoder outputs.

use serde::{Deserialize, Serialize};

use super::Position;
use crate::error::{Error, Result};
use crate::eval::{canonical_rows, embed_views, ordered_pairs, pair_inputs, quat_targets};
use crate::eval::{r_squared, HeadDepth, Probe, ProbeConfig, ProbeTargets};
use crate::model::Model;
use crate::ndcore::{ParamSet, Tensor};
use crate::synthgen::{Dataset, ObjectSplit, TrainingPair};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineEvalRecord {
    /// Epochs completed.
    pub epoch: usize,
    pub step: u64,
    pub classification_top1: f64,
    pub rotation_r2: f64,
}

/// Per-feature running mean and variance. The first updates average
/// cumulatively, later ones decay at [`RunningNorm::MOMENTUM`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunningNorm {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub count: u64,
}

impl RunningNorm {
    pub const MOMENTUM: f64 = 0.01;
    const EPS: f64 = 1e-5;

    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            count: 0,
        }
    }

    pub fn update(&mut self, x: &Tensor<f32>) -> Result<()> {
        let (rows, d) = self.check(x)?;
        let m = (1.0 / (self.count + 1) as f64).max(Self::MOMENTUM);
        for j in 0..d {
            let col = (0..rows).map(|i| x.data()[i * d + j] as f64);
            let mu = col.clone().sum::<f64>() / rows as f64;
            let var = col.map(|v| (v - mu) * (v - mu)).sum::<f64>() / rows as f64;
            self.mean[j] = ((1.0 - m) * self.mean[j] as f64 + m * mu) as f32;
            self.var[j] = ((1.0 - m) * self.var[j] as f64 + m * var) as f32;
        }
        self.count += 1;
        Ok(())
    }

    pub fn apply(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (_, d) = self.check(x)?;
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                let j = k % d;
                ((v as f64 - self.mean[j] as f64) / (self.var[j] as f64 + Self::EPS).sqrt()) as f32
            })
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    fn check(&self, x: &Tensor<f32>) -> Result<(usize, usize)> {
        match *x.shape() {
            [rows, d] if d == self.mean.len() && rows > 0 => Ok((rows, d)),
            _ => Err(Error::Dimension {
                op: "running_norm",
                lhs: x.shape().to_vec(),
                rhs: vec![self.mean.len()],
            }),
        }
    }
}

/// A linear class probe and a deep relative-rotation probe on the pooled
/// encoder representation, one Adam step each per training batch. Inputs
/// are standardised with running statistics so the probes see a stable
/// scale while the encoder drifts.
#[derive(Clone, Debug)]
pub struct OnlineProbes {
    pub classifier: Probe,
    pub rotation: Probe,
    pub norm: RunningNorm,
}

impl OnlineProbes {
    pub fn new(rep_dim: usize, classes: usize, seed: u64) -> Result<Self> {
        let cls = ProbeConfig::classification(HeadDepth::Shallow).with_seed(seed);
        let rot = ProbeConfig::rotation().with_seed(seed.wrapping_add(1));
        Ok(Self {
            classifier: Probe::new(cls, rep_dim, classes, true)?,
            rotation: Probe::new(rot, 2 * rep_dim, 4, false)?,
            norm: RunningNorm::new(rep_dim),
        })
    }

    /// `rep` holds the `b` first views followed by the `b` second views.
    pub fn train_step(
        &mut self,
        rep: &Tensor<f32>,
        pairs: &[TrainingPair],
        b: usize,
    ) -> Result<()> {
        self.norm.update(rep)?;
        let rep = &self.norm.apply(rep)?;
        let labels: Vec<usize> = pairs
            .iter()
            .chain(pairs)
            .map(|p| p.class_id as usize)
            .collect();
        let classes = self.classifier.out_dim;
        self.classifier
            .step(rep, &ProbeTargets::Classes { labels, classes })?;
        let first: Vec<usize> = (0..b).collect();
        let second: Vec<usize> = (b..2 * b).collect();
        let x = pair_inputs(rep, &first, &second)?;
        let y = quat_targets(pairs.iter().map(|p| p.g_rel.as_array()))?;
        self.rotation.step(&x, &ProbeTargets::Values(y))?;
        Ok(())
    }

    pub fn evaluate(
        &self,
        model: &Model,
        params: &ParamSet<f32>,
        dataset: &Dataset,
        split: &ObjectSplit,
        at: Position,
    ) -> Result<OnlineEvalRecord> {
        let rep = self
            .norm
            .apply(&embed_views(model, params, dataset, &split.val, 256)?.rep)?;
        let labels = split
            .val
            .iter()
            .map(|&v| dataset.records[v].params.class_id as usize)
            .collect();
        let top1 = self.classifier.score(
            &rep,
            &ProbeTargets::Classes {
                labels,
                classes: self.classifier.out_dim,
            },
        )?;
        let (ra, rb, y) = ordered_pairs(dataset, &split.val)?;
        let pred = self.rotation.predict(&pair_inputs(&rep, &ra, &rb)?)?;
        Ok(OnlineEvalRecord {
            epoch: at.epoch,
            step: at.step,
            classification_top1: top1,
            rotation_r2: r_squared(&y, &canonical_rows(&pred))?,
        })
    }
}
