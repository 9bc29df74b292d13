//! Checkpoint container: `CIEK`, a little-endian `u32` manifest length, the
//! JSON manifest, then every tensor block as little-endian `f32` in the
//! order the manifest lists them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::online::RunningNorm;
use super::{OnlineProbes, Position, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::ndcore::{AdamState, ParamSet, Tensor};
use crate::seeding::derive_rng;
use crate::synthgen::{Dataset, DatasetManifest};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CIEK";
const FORMAT: &str = "capsie-checkpoint-v1";

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug)]
pub struct CheckpointState {
    pub config: TrainConfig,
    pub dataset: DatasetManifest,
    pub position: Position,
    pub params: ParamSet<f32>,
    pub adam: AdamState<f32>,
    pub online: Option<OnlineState>,
}

/// Online probe weights, their optimisers and the input statistics.
#[derive(Clone, Debug)]
pub struct OnlineState {
    pub classifier: (ParamSet<f32>, AdamState<f32>),
    pub rotation: (ParamSet<f32>, AdamState<f32>),
    pub norm: RunningNorm,
}

#[derive(Serialize, Deserialize)]
struct BlockInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: TrainConfig,
    config_hash: String,
    n_caps: usize,
    pose_dim: usize,
    seed: u64,
    dataset: DatasetManifest,
    position: Position,
    adam_step: u64,
    online_adam_steps: Option<[u64; 2]>,
    #[serde(default)]
    online_norm_count: Option<u64>,
    blocks: Vec<BlockInfo>,
}

fn push_set(
    blocks: &mut Vec<(String, Tensor<f32>)>,
    prefix: &str,
    params: &ParamSet<f32>,
    adam: &AdamState<f32>,
) {
    for (i, name) in params.names().iter().enumerate() {
        blocks.push((format!("{prefix}param/{name}"), params.values()[i].clone()));
    }
    for (i, name) in params.names().iter().enumerate() {
        blocks.push((format!("{prefix}adam.m/{name}"), adam.first[i].clone()));
        blocks.push((format!("{prefix}adam.v/{name}"), adam.second[i].clone()));
    }
}

/// Pulls blocks for one parameter set off the front of `blocks`, in the
/// same order [`push_set`] wrote them.
fn take_set(
    blocks: &mut std::collections::VecDeque<(String, Tensor<f32>)>,
    prefix: &str,
    template: &ParamSet<f32>,
    adam: &mut AdamState<f32>,
    step: u64,
) -> Result<ParamSet<f32>> {
    let mut next = |expect: String, shape: &[usize]| -> Result<Tensor<f32>> {
        let (name, t) = blocks
            .pop_front()
            .ok_or_else(|| Error::Format(format!("missing block {expect}")))?;
        if name != expect || t.shape() != shape {
            return Err(Error::Format(format!(
                "expected block {expect} {shape:?}, found {name} {:?}",
                t.shape()
            )));
        }
        Ok(t)
    };
    let mut params = template.clone();
    for (i, name) in template.names().iter().enumerate() {
        params.values_mut()[i] = next(
            format!("{prefix}param/{name}"),
            template.values()[i].shape(),
        )?;
    }
    for (i, name) in template.names().iter().enumerate() {
        let shape = template.values()[i].shape().to_vec();
        adam.first[i] = next(format!("{prefix}adam.m/{name}"), &shape)?;
        adam.second[i] = next(format!("{prefix}adam.v/{name}"), &shape)?;
    }
    adam.step = step;
    Ok(params)
}

impl CheckpointState {
    fn blocks(&self) -> Vec<(String, Tensor<f32>)> {
        let mut blocks = Vec::new();
        push_set(&mut blocks, "", &self.params, &self.adam);
        if let Some(o) = &self.online {
            push_set(
                &mut blocks,
                "online.classifier.",
                &o.classifier.0,
                &o.classifier.1,
            );
            push_set(
                &mut blocks,
                "online.rotation.",
                &o.rotation.0,
                &o.rotation.1,
            );
            let d = o.norm.mean.len();
            for (name, v) in [
                ("online.norm.mean", &o.norm.mean),
                ("online.norm.var", &o.norm.var),
            ] {
                blocks.push((
                    name.into(),
                    Tensor::new([d], v.clone()).expect("length matches"),
                ));
            }
        }
        blocks
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let blocks = self.blocks();
        let manifest = Manifest {
            format: FORMAT.into(),
            config: self.config.clone(),
            config_hash: self.config.hash(),
            n_caps: self.config.model.n_caps,
            pose_dim: self.config.model.pose_dim(),
            seed: self.config.seed,
            dataset: self.dataset.clone(),
            position: self.position,
            adam_step: self.adam.step,
            online_adam_steps: self
                .online
                .as_ref()
                .map(|o| [o.classifier.1.step, o.rotation.1.step]),
            online_norm_count: self.online.as_ref().map(|o| o.norm.count),
            blocks: blocks
                .iter()
                .map(|(n, t)| BlockInfo {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let len =
            u32::try_from(json.len()).map_err(|_| Error::Format("manifest too large".into()))?;
        let mut out = Vec::with_capacity(
            8 + json.len() + 4 * blocks.iter().map(|(_, t)| t.len()).sum::<usize>(),
        );
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &blocks {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint: bad magic".into()));
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let json = bytes
            .get(8..8 + len)
            .ok_or_else(|| Error::Format("checkpoint manifest truncated".into()))?;
        let m: Manifest = serde_json::from_slice(json)?;
        if m.format != FORMAT {
            return Err(Error::Format(format!(
                "unsupported checkpoint format {:?}",
                m.format
            )));
        }
        if m.config.hash() != m.config_hash {
            return Err(Error::Format("checkpoint config hash mismatch".into()));
        }
        let mut offset = 8 + len;
        let mut blocks = std::collections::VecDeque::new();
        for b in &m.blocks {
            let n: usize = b.shape.iter().product();
            let raw = bytes
                .get(offset..offset + 4 * n)
                .ok_or_else(|| Error::Format(format!("block {} truncated", b.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            blocks.push_back((b.name.clone(), Tensor::new(b.shape.clone(), data)?));
            offset += 4 * n;
        }
        if offset != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint blocks",
                bytes.len() - offset
            )));
        }

        let (model_template, _) = build_model(&m.config)?;
        let mut adam = AdamState::new(m.config.adam, model_template.values())?;
        let params = take_set(&mut blocks, "", &model_template, &mut adam, m.adam_step)?;
        let online = match m.online_adam_steps {
            Some([cs, rs]) => {
                let probes = OnlineProbes::new(
                    m.config.model.encoder.output_shape().0,
                    m.dataset.classes,
                    0,
                )?;
                let mut ca = probes.classifier.optimizer().clone();
                let mut ra = probes.rotation.optimizer().clone();
                let cp = take_set(
                    &mut blocks,
                    "online.classifier.",
                    probes.classifier.params(),
                    &mut ca,
                    cs,
                )?;
                let rp = take_set(
                    &mut blocks,
                    "online.rotation.",
                    probes.rotation.params(),
                    &mut ra,
                    rs,
                )?;
                let mut norm = probes.norm.clone();
                norm.count = m
                    .online_norm_count
                    .ok_or_else(|| Error::Format("missing online norm count".into()))?;
                let d = norm.mean.len();
                for (name, dst) in [
                    ("online.norm.mean", &mut norm.mean),
                    ("online.norm.var", &mut norm.var),
                ] {
                    match blocks.pop_front() {
                        Some((n, t)) if n == name && t.shape() == [d] => *dst = t.data().to_vec(),
                        other => {
                            let found = other.map(|(n, _)| n).unwrap_or_else(|| "nothing".into());
                            return Err(Error::Format(format!(
                                "expected block {name} [{d}], found {found}"
                            )));
                        }
                    }
                }
                Some(OnlineState {
                    classifier: (cp, ca),
                    rotation: (rp, ra),
                    norm,
                })
            }
            None => None,
        };
        if let Some((name, _)) = blocks.front() {
            return Err(Error::Format(format!("unexpected block {name}")));
        }
        Ok(Self {
            config: m.config,
            dataset: m.dataset,
            position: m.position,
            params,
            adam,
            online,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// The trained model with its parameters.
    pub fn model(&self) -> Result<(Model, ParamSet<f32>)> {
        let (template, model) = build_model(&self.config)?;
        if template.names() != self.params.names() {
            return Err(Error::Format(
                "checkpoint parameters do not match the model layout".into(),
            ));
        }
        Ok((model, self.params.clone()))
    }
}

fn build_model(config: &TrainConfig) -> Result<(ParamSet<f32>, Model)> {
    let mut params = ParamSet::new();
    let model = Model::new(config.model.clone(), &mut params, &mut derive_rng(0, &[]))?;
    Ok((params, model))
}

impl<'a> Trainer<'a> {
    pub fn checkpoint(&self) -> Result<CheckpointState> {
        Ok(CheckpointState {
            config: self.config.clone(),
            dataset: self.dataset.manifest.clone(),
            position: self.position,
            params: self.params.clone(),
            adam: self.adam.clone(),
            online: self.online.as_ref().map(|o| OnlineState {
                classifier: (
                    o.classifier.params().clone(),
                    o.classifier.optimizer().clone(),
                ),
                rotation: (o.rotation.params().clone(), o.rotation.optimizer().clone()),
                norm: o.norm.clone(),
            }),
        })
    }

    /// Continues from `state`. The dataset must be the one trained on.
    pub fn resume(state: &CheckpointState, dataset: &'a Dataset) -> Result<Self> {
        if state.dataset != dataset.manifest {
            return Err(Error::Contract(
                "checkpoint was trained on a different dataset".into(),
            ));
        }
        let mut t = Trainer::new(state.config.clone(), dataset)?;
        t.params = state.params.clone();
        t.adam = state.adam.clone();
        match (&mut t.online, &state.online) {
            (Some(o), Some(s)) => {
                o.classifier
                    .restore(s.classifier.0.values().to_vec(), s.classifier.1.clone())?;
                o.rotation
                    .restore(s.rotation.0.values().to_vec(), s.rotation.1.clone())?;
                o.norm = s.norm.clone();
            }
            (None, None) => {}
            _ => {
                return Err(Error::Format(
                    "checkpoint online-probe state does not match its config".into(),
                ))
            }
        }
        t.position = state.position;
        Ok(t)
    }
}
