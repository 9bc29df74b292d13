//! Supervised heads trained on frozen embeddings.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{r_squared, top1_accuracy, Standardizer};
use crate::error::{Error, Result};
use crate::ndcore::{adam_step, AdamConfig, AdamState, Graph, ParamSet, Tensor, Var};
use crate::nn::Mlp;
use crate::seeding::derive_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadDepth {
    /// One linear layer.
    Shallow,
    /// `in → hidden → out` with ReLU.
    Deep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub depth: HeadDepth,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl ProbeConfig {
    fn preset(depth: HeadDepth, epochs: usize, batch_size: usize) -> Self {
        Self {
            depth,
            hidden: 1024,
            epochs,
            batch_size,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
        }
    }

    /// Rotation regression: deep head, 100 epochs, batch 256.
    pub fn rotation() -> Self {
        Self::preset(HeadDepth::Deep, 100, 256)
    }

    /// Colour regression: linear head, 17 epochs, batch 256.
    pub fn colour() -> Self {
        Self::preset(HeadDepth::Shallow, 17, 256)
    }

    /// Classification: 100 epochs, batch 64.
    pub fn classification(depth: HeadDepth) -> Self {
        Self::preset(depth, 100, 64)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "probe epochs, batch size and hidden width must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("probe learning rate must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

/// Supervision for a probe.
#[derive(Clone, Debug, PartialEq)]
pub enum ProbeTargets {
    Classes { labels: Vec<usize>, classes: usize },
    Values(Tensor<f32>),
}

impl ProbeTargets {
    pub fn len(&self) -> usize {
        match self {
            Self::Classes { labels, .. } => labels.len(),
            Self::Values(t) => t.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn out_dim(&self) -> usize {
        match self {
            Self::Classes { classes, .. } => *classes,
            Self::Values(t) => t.len() / t.shape()[0].max(1),
        }
    }

    fn select(&self, rows: &[usize]) -> Result<Self> {
        Ok(match self {
            Self::Classes { labels, classes } => Self::Classes {
                labels: rows.iter().map(|&r| labels[r]).collect(),
                classes: *classes,
            },
            Self::Values(t) => Self::Values(t.select_rows(rows)?),
        })
    }
}

/// Incremental probe that can also be stepped one batch at a time, as in
/// co-optimised online evaluation.
#[derive(Clone, Debug)]
pub struct Probe {
    pub config: ProbeConfig,
    pub in_dim: usize,
    pub out_dim: usize,
    classification: bool,
    mlp: Mlp,
    params: ParamSet<f32>,
    adam: AdamState<f32>,
    target_scale: Option<Standardizer>,
}

fn batch_loss(g: &mut Graph<f32>, out: Var, targets: &ProbeTargets) -> Result<Var> {
    match targets {
        ProbeTargets::Classes { labels, classes } => {
            let n = labels.len();
            let mut onehot = vec![0f32; n * classes];
            for (r, &l) in labels.iter().enumerate() {
                onehot[r * classes + l] = 1.0;
            }
            let ls = g.log_softmax(out, 1)?;
            let oh = g.constant(Tensor::new([n, *classes], onehot)?)?;
            let picked = g.mul(ls, oh)?;
            let s = g.sum_axis(picked, 1)?;
            let m = g.mean_all(s)?;
            g.neg(m)
        }
        ProbeTargets::Values(t) => {
            let tv = g.constant(t.clone())?;
            let d = g.sub(out, tv)?;
            let sq = g.square(d)?;
            g.mean_all(sq)
        }
    }
}

impl Probe {
    pub fn new(
        config: ProbeConfig,
        in_dim: usize,
        out_dim: usize,
        classification: bool,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = derive_rng(config.seed, &[0x5052_4f42]);
        let mut params = ParamSet::new();
        let dims = match config.depth {
            HeadDepth::Shallow => vec![in_dim, out_dim],
            HeadDepth::Deep => vec![in_dim, config.hidden, out_dim],
        };
        let mlp = Mlp::new(&mut params, "probe", &dims, &mut rng);
        // a zero output layer starts the probe at the target mean
        let last = mlp.layers.last().expect("non-empty").weight;
        params.set(last, Tensor::zeros(params.get(last).shape().to_vec()))?;
        let adam = AdamState::new(config.adam(), params.values())?;
        Ok(Self {
            config,
            in_dim,
            out_dim,
            classification,
            mlp,
            params,
            adam,
            target_scale: None,
        })
    }

    /// Trains regressors on targets standardised with the statistics of
    /// `t`; predictions are mapped back. Call before the first step.
    pub fn fit_target_scale(&mut self, t: &Tensor<f32>) -> Result<()> {
        if self.classification {
            return Err(Error::Config(
                "target scaling applies to regression probes".into(),
            ));
        }
        self.target_scale = Some(Standardizer::fit(t)?);
        Ok(())
    }

    fn check(&self, x: &Tensor<f32>, targets: &ProbeTargets) -> Result<()> {
        let ok_kind = matches!(targets, ProbeTargets::Classes { .. }) == self.classification;
        if x.ndim() != 2
            || x.shape()[1] != self.in_dim
            || targets.len() != x.shape()[0]
            || !ok_kind
            || targets.out_dim() != self.out_dim
        {
            return Err(Error::Config(format!(
                "probe expects {}→{} inputs, got {:?} with {} targets of width {}",
                self.in_dim,
                self.out_dim,
                x.shape(),
                targets.len(),
                targets.out_dim()
            )));
        }
        if let ProbeTargets::Classes { labels, classes } = targets {
            if labels.iter().any(|&l| l >= *classes) {
                return Err(Error::Config("class label out of range".into()));
            }
        }
        Ok(())
    }

    /// One Adam step on a batch; returns the batch loss.
    pub fn step(&mut self, x: &Tensor<f32>, targets: &ProbeTargets) -> Result<f64> {
        self.check(x, targets)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, true)?;
        let xv = g.constant(x.clone())?;
        let out = self.mlp.forward(&mut g, &p, xv)?;
        let scaled;
        let targets = match (&self.target_scale, targets) {
            (Some(s), ProbeTargets::Values(t)) => {
                scaled = ProbeTargets::Values(s.apply(t)?);
                &scaled
            }
            _ => targets,
        };
        let loss = batch_loss(&mut g, out, targets)?;
        let grads = g.backward(loss)?;
        let gs: Vec<Tensor<f32>> = p.vars().iter().map(|&v| grads.wrt(v)).collect();
        adam_step(self.params.values_mut(), &gs, &mut self.adam)?;
        Ok(g.value(loss).item() as f64)
    }

    /// Minibatch pass over `x` in a shuffled order.
    pub fn epoch<R: Rng + ?Sized>(
        &mut self,
        x: &Tensor<f32>,
        targets: &ProbeTargets,
        rng: &mut R,
    ) -> Result<f64> {
        self.check(x, targets)?;
        let n = x.shape()[0];
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            total +=
                self.step(&x.select_rows(chunk)?, &targets.select(chunk)?)? * chunk.len() as f64;
        }
        Ok(total / n as f64)
    }

    pub fn predict(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        if x.ndim() != 2 || x.shape()[1] != self.in_dim {
            return Err(Error::Config(format!(
                "probe expects {} inputs, got {:?}",
                self.in_dim,
                x.shape()
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false)?;
        let xv = g.constant(x.clone())?;
        let out = self.mlp.forward(&mut g, &p, xv)?;
        match &self.target_scale {
            Some(s) => s.invert(g.value(out)),
            None => Ok(g.value(out).clone()),
        }
    }

    /// Top-1 accuracy for classifiers, R² for regressors.
    pub fn score(&self, x: &Tensor<f32>, targets: &ProbeTargets) -> Result<f64> {
        self.check(x, targets)?;
        let out = self.predict(x)?;
        match targets {
            ProbeTargets::Classes { labels, .. } => top1_accuracy(&out, labels),
            ProbeTargets::Values(t) => r_squared(t, &out),
        }
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn optimizer(&self) -> &AdamState<f32> {
        &self.adam
    }

    /// Replaces weights and optimizer moments, e.g. from a checkpoint.
    pub fn restore(&mut self, values: Vec<Tensor<f32>>, adam: AdamState<f32>) -> Result<()> {
        if values.len() != self.params.len() || adam.first.len() != values.len() {
            return Err(Error::Format(
                "probe state has the wrong number of tensors".into(),
            ));
        }
        for (slot, v) in self.params.values_mut().iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::Format(format!(
                    "probe tensor shape {:?} != {:?}",
                    v.shape(),
                    slot.shape()
                )));
            }
            *slot = v;
        }
        self.adam = adam;
        Ok(())
    }
}

/// Trains a fresh probe for `config.epochs` epochs. `data(epoch, rng)`
/// supplies each epoch's inputs and targets, so pairings can be resampled.
pub fn train_probe_with<F>(
    config: &ProbeConfig,
    in_dim: usize,
    out_dim: usize,
    classification: bool,
    mut data: F,
) -> Result<Probe>
where
    F: FnMut(usize, &mut ChaCha8Rng) -> Result<(Tensor<f32>, ProbeTargets)>,
{
    let mut probe = Probe::new(config.clone(), in_dim, out_dim, classification)?;
    let mut rng = derive_rng(config.seed, &[0x4550_4f43]);
    for e in 0..config.epochs {
        let (x, t) = data(e, &mut rng)?;
        if let (0, ProbeTargets::Values(v)) = (e, &t) {
            probe.fit_target_scale(v)?;
        }
        probe.epoch(&x, &t, &mut rng)?;
    }
    Ok(probe)
}

/// Trains on a fixed set of embeddings.
pub fn train_probe(x: &Tensor<f32>, targets: &ProbeTargets, config: &ProbeConfig) -> Result<Probe> {
    let in_dim = *x
        .shape()
        .get(1)
        .ok_or_else(|| Error::Config("probe inputs must be N×d".into()))?;
    let classification = matches!(targets, ProbeTargets::Classes { .. });
    train_probe_with(config, in_dim, targets.out_dim(), classification, |_, _| {
        Ok((x.clone(), targets.clone()))
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn fast(depth: HeadDepth, epochs: usize) -> ProbeConfig {
        ProbeConfig {
            hidden: 64,
            ..ProbeConfig::preset(depth, epochs, 32)
        }
    }

    #[test]
    fn separable_classes_reach_full_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 100;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = Tensor::from_fn([n, 3], |k| {
            let (r, c) = (k / 3, k % 3);
            let sign = if labels[r] == 0 { -1.0 } else { 1.0 };
            if c == 0 {
                sign * (0.5 + rng.gen_range(0.0..1.0f32))
            } else {
                rng.gen_range(-1.0..1.0f32)
            }
        });
        let t = ProbeTargets::Classes { labels, classes: 2 };
        let probe = train_probe(&x, &t, &fast(HeadDepth::Shallow, 60)).unwrap();
        assert_eq!(probe.score(&x, &t).unwrap(), 1.0);
    }

    #[test]
    fn shuffled_labels_sit_at_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, k) = (2000, 4);
        let x = Tensor::<f32>::randn([n, 8], 1.0, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let t = ProbeTargets::Classes { labels, classes: k };
        let probe = train_probe(&x, &t, &fast(HeadDepth::Shallow, 5)).unwrap();
        let x_test = Tensor::<f32>::randn([n, 8], 1.0, &mut rng);
        let test_labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let acc = probe
            .score(
                &x_test,
                &ProbeTargets::Classes {
                    labels: test_labels,
                    classes: k,
                },
            )
            .unwrap();
        let p = 1.0 / k as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((acc - p).abs() < 3.0 * sigma, "accuracy {acc}");
    }

    #[test]
    fn embedded_quaternions_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 400;
        let q: Vec<[f64; 4]> = (0..n)
            .map(|_| crate::rotations::sample_rotation(&mut rng).1.as_array())
            .collect();
        let t = Tensor::from_fn([n, 4], |k| q[k / 4][k % 4] as f32);
        // the quaternion mixed into noise dims
        let x = Tensor::from_fn([n, 10], |k| {
            let (r, c) = (k / 10, k % 10);
            if c < 4 {
                q[r][c] as f32 * 2.0 + 0.5
            } else {
                rng.gen_range(-1.0..1.0f32)
            }
        });
        let probe = train_probe(
            &x,
            &ProbeTargets::Values(t.clone()),
            &fast(HeadDepth::Deep, 150),
        )
        .unwrap();
        let r2 = probe.score(&x, &ProbeTargets::Values(t)).unwrap();
        assert!(r2 > 0.99, "R² {r2}");
    }

    #[test]
    fn mismatched_dims_are_config_errors() {
        let x = Tensor::<f32>::zeros([4, 3]);
        let t = ProbeTargets::Values(Tensor::zeros([5, 2]));
        assert!(matches!(
            train_probe(&x, &t, &fast(HeadDepth::Shallow, 1)),
            Err(Error::Config(_))
        ));
        let probe = Probe::new(fast(HeadDepth::Shallow, 1), 3, 2, false).unwrap();
        assert!(matches!(
            probe.predict(&Tensor::zeros([2, 4])),
            Err(Error::Config(_))
        ));
        let bad = ProbeTargets::Classes {
            labels: vec![0, 3, 1, 0],
            classes: 2,
        };
        assert!(matches!(
            train_probe(&x, &bad, &fast(HeadDepth::Shallow, 1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::randn([50, 4], 1.0, &mut rng);
        let t = ProbeTargets::Values(Tensor::randn([50, 2], 1.0, &mut rng));
        let a = train_probe(&x, &t, &fast(HeadDepth::Deep, 3)).unwrap();
        let b = train_probe(&x, &t, &fast(HeadDepth::Deep, 3)).unwrap();
        assert_eq!(a.params().checksum(), b.params().checksum());
    }
}
