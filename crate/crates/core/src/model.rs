//! Encoder, projector and predictor assembled into one trainable model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::capsnet::{
    global_average_pool, Encoder, EncoderConfig, PrimaryCapsules, SelfRoutingLayer,
    SplitMlpProjector, POSE_DIM,
};
use crate::error::{Error, Result};
use crate::ndcore::{Bound, Graph, ParamSet, Var};
use crate::predictor::HyperPredictor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectorKind {
    Capsule,
    SplitMlp,
}

impl std::str::FromStr for ProjectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "capsule" => Ok(Self::Capsule),
            "split-mlp" | "split-mlp-baseline" => Ok(Self::SplitMlp),
            other => Err(Error::Config(format!("unknown projector kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub n_caps: usize,
    pub projector: ProjectorKind,
    /// Hidden width of the split-MLP baseline heads.
    #[serde(default = "default_split_hidden")]
    pub split_hidden: usize,
    /// Hidden width of the generated predictor MLP; the pose dim when unset.
    #[serde(default)]
    pub predictor_hidden: Option<usize>,
}

fn default_split_hidden() -> usize {
    256
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            n_caps: 16,
            projector: ProjectorKind::Capsule,
            split_hidden: default_split_hidden(),
            predictor_hidden: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.n_caps == 0 {
            return Err(Error::Config("n_caps must be positive".into()));
        }
        Ok(())
    }

    pub fn pose_dim(&self) -> usize {
        self.n_caps * POSE_DIM
    }

    pub fn predictor_hidden(&self) -> usize {
        self.predictor_hidden.unwrap_or_else(|| self.pose_dim())
    }

    /// Width of the pooled encoder representation.
    pub fn rep_dim(&self) -> usize {
        self.encoder.output_shape().0
    }
}

#[derive(Clone, Debug)]
enum Projector {
    Capsule {
        primary: PrimaryCapsules,
        routing: SelfRoutingLayer,
    },
    Split(SplitMlpProjector),
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutputs {
    /// Globally pooled encoder features, `B×C_f`.
    pub rep: Var,
    /// Invariant embedding, `B×n_caps`, rows on the simplex.
    pub act: Var,
    /// Equivariant embedding, `B×(n_caps·16)`.
    pub pose: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    projector: Projector,
    pub predictor: HyperPredictor,
}

impl Model {
    /// Registers every parameter in `params` in a fixed order.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        config: ModelConfig,
        params: &mut ParamSet<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(config.encoder.clone(), params, rng)?;
        let (c, h, w) = config.encoder.output_shape();
        let projector = match config.projector {
            ProjectorKind::Capsule => {
                let primary = PrimaryCapsules::new(params, c, config.n_caps, rng);
                let routing =
                    SelfRoutingLayer::new(params, config.n_caps * h * w, config.n_caps, rng);
                Projector::Capsule { primary, routing }
            }
            ProjectorKind::SplitMlp => Projector::Split(SplitMlpProjector::new(
                params,
                c,
                config.split_hidden,
                config.n_caps,
                config.pose_dim(),
                rng,
            )?),
        };
        let predictor =
            HyperPredictor::new(params, config.pose_dim(), config.predictor_hidden(), rng);
        Ok(Self {
            config,
            encoder,
            projector,
            predictor,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        images: Var,
    ) -> Result<ModelOutputs> {
        let features = self.encoder.forward(g, p, images)?;
        let rep = global_average_pool(g, features)?;
        let b = g.shape(images)[0];
        let (act, pose) = match &self.projector {
            Projector::Capsule { primary, routing } => {
                let grid = primary.forward(g, p, features)?;
                let out = routing.forward(g, p, grid.poses, grid.activations)?;
                let pose = g.reshape(out.poses, [b, self.config.pose_dim()])?;
                (out.activations, pose)
            }
            Projector::Split(split) => {
                let (logits, pose) = split.forward(g, p, rep)?;
                (g.softmax(logits, 1)?, pose)
            }
        };
        Ok(ModelOutputs { rep, act, pose })
    }
}
