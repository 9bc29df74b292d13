//! The evaluation protocol applied to a model over a dataset split.

use serde::{Deserialize, Serialize};

use super::metrics::{r_squared, Standardizer};
use super::probe::{train_probe, train_probe_with, HeadDepth, ProbeConfig, ProbeTargets};
use super::report::MetricReport;
use super::retrieval::{retrieval_metrics, RetrievalReport, ViewInfo};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::ndcore::{Graph, ParamSet, Tensor};
use crate::predictor::{IdentityPredictor, PosePredictor};
use crate::synthgen::{Dataset, ObjectSplit};

/// Frozen model outputs for a set of views, row `i` for view `i`.
#[derive(Clone, Debug)]
pub struct ViewEmbeddings {
    pub rep: Tensor<f32>,
    pub act: Tensor<f32>,
    pub pose: Tensor<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Rep,
    Act,
    Pose,
}

impl ViewEmbeddings {
    pub fn get(&self, kind: EmbeddingKind) -> &Tensor<f32> {
        match kind {
            EmbeddingKind::Rep => &self.rep,
            EmbeddingKind::Act => &self.act,
            EmbeddingKind::Pose => &self.pose,
        }
    }
}

/// Runs the model without gradients over every view of `dataset`.
pub fn embed_dataset(
    model: &Model,
    params: &ParamSet<f32>,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<ViewEmbeddings> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    embed_views(model, params, dataset, &all, batch_size)
}

/// As [`embed_dataset`] for a subset; row `r` holds view `views[r]`.
pub fn embed_views(
    model: &Model,
    params: &ParamSet<f32>,
    dataset: &Dataset,
    views: &[usize],
    batch_size: usize,
) -> Result<ViewEmbeddings> {
    if batch_size == 0 || views.is_empty() {
        return Err(Error::Config(
            "embedding needs a positive batch size and at least one view".into(),
        ));
    }
    let (mut rep, mut act, mut pose) = (Vec::new(), Vec::new(), Vec::new());
    for chunk in views.chunks(batch_size) {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false)?;
        let x = g.constant(dataset.images::<f32>(chunk)?)?;
        let out = model.forward(&mut g, &p, x)?;
        rep.push(g.value(out.rep).clone());
        act.push(g.value(out.act).clone());
        pose.push(g.value(out.pose).clone());
    }
    let cat = |parts: Vec<Tensor<f32>>| Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0);
    Ok(ViewEmbeddings {
        rep: cat(rep)?,
        act: cat(act)?,
        pose: cat(pose)?,
    })
}

/// Probe settings for a full evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub rotation: ProbeConfig,
    pub colour: ProbeConfig,
    pub classification: ProbeConfig,
    /// Head used when classifying from the activation embedding.
    pub act_head: HeadDepth,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            rotation: ProbeConfig::rotation(),
            colour: ProbeConfig::colour(),
            classification: ProbeConfig::classification(HeadDepth::Shallow),
            act_head: HeadDepth::Deep,
            seed: 0,
        }
    }
}

impl EvalProtocol {
    pub fn notes(&self) -> Vec<String> {
        vec![format!(
            "probe epochs: rotation {}, colour {}, classification {} (reference protocol divided by 3)",
            self.rotation.epochs, self.colour.epochs, self.classification.epochs
        )]
    }
}

fn row_index(split: &[usize], n: usize) -> Vec<Option<usize>> {
    let mut idx = vec![None; n];
    for (r, &v) in split.iter().enumerate() {
        idx[v] = Some(r);
    }
    idx
}

/// Standardises with statistics of the training views.
fn standardise(emb: &Tensor<f32>, split: &ObjectSplit) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let train = emb.select_rows(&split.train)?;
    let s = Standardizer::fit(&train)?;
    Ok((s.apply(&train)?, s.apply(&emb.select_rows(&split.val)?)?))
}

pub(crate) fn pair_inputs(
    x: &Tensor<f32>,
    rows_a: &[usize],
    rows_b: &[usize],
) -> Result<Tensor<f32>> {
    let a = x.select_rows(rows_a)?;
    let b = x.select_rows(rows_b)?;
    Tensor::concat(&[&a, &b], 1)
}

pub(crate) fn quat_targets(qs: impl Iterator<Item = [f64; 4]>) -> Result<Tensor<f32>> {
    let d: Vec<f32> = qs.flat_map(|q| q.map(|v| v as f32)).collect();
    let n = d.len() / 4;
    Tensor::new([n, 4], d)
}

/// Flips rows with negative real part, the canonical form of each rotation.
pub(crate) fn canonical_rows(t: &Tensor<f32>) -> Tensor<f32> {
    let mut d = t.data().to_vec();
    for row in d.chunks_mut(4) {
        if row[0] < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
    }
    Tensor::new(t.shape().to_vec(), d).expect("same shape")
}

/// Relative-rotation R² of a deep probe on concatenated view pairs.
///
/// Training pairs are redrawn every epoch from the training views; the
/// score covers every ordered pair of distinct validation views of one
/// object. Targets are raw `q_b ⊗ q_a⁻¹`; the score compares canonical
/// forms.
pub fn rotation_probe(
    emb: &Tensor<f32>,
    dataset: &Dataset,
    split: &ObjectSplit,
    config: &ProbeConfig,
) -> Result<f64> {
    let (train_x, val_x) = standardise(emb, split)?;
    let d = train_x.shape()[1];
    let train_row = row_index(&split.train, dataset.len());
    let probe = train_probe_with(config, 2 * d, 4, false, |_, rng| {
        let pairs = dataset.epoch_pairs(&split.train, rng)?;
        let ra: Vec<usize> = pairs
            .iter()
            .map(|p| train_row[p.view_a].expect("train view"))
            .collect();
        let rb: Vec<usize> = pairs
            .iter()
            .map(|p| train_row[p.view_b].expect("train view"))
            .collect();
        let y = quat_targets(pairs.iter().map(|p| p.g_rel.as_array()))?;
        Ok((pair_inputs(&train_x, &ra, &rb)?, ProbeTargets::Values(y)))
    })?;
    let (ra, rb, y) = ordered_pairs(dataset, &split.val)?;
    let pred = probe.predict(&pair_inputs(&val_x, &ra, &rb)?)?;
    r_squared(&y, &canonical_rows(&pred))
}

/// Every ordered pair of distinct views of one object within `views`, as
/// row indices into `views` plus canonical relative rotations.
pub(crate) fn ordered_pairs(
    dataset: &Dataset,
    views: &[usize],
) -> Result<(Vec<usize>, Vec<usize>, Tensor<f32>)> {
    let row = row_index(views, dataset.len());
    let (mut ra, mut rb, mut qs) = (Vec::new(), Vec::new(), Vec::new());
    for (r, &a) in views.iter().enumerate() {
        let obj = dataset.records[a].params.object_id as usize;
        for b in dataset.views_of_object(obj) {
            if let (true, Some(s)) = (b != a, row[b]) {
                ra.push(r);
                rb.push(s);
                qs.push(dataset.pair(a, b)?.g_rel.canonical().as_array());
            }
        }
    }
    if ra.is_empty() {
        return Err(Error::Config("no view pairs to score".into()));
    }
    Ok((ra, rb, quat_targets(qs.into_iter())?))
}

/// R² of a linear probe from one view's embedding to its two hue factors.
pub fn colour_probe(
    emb: &Tensor<f32>,
    dataset: &Dataset,
    split: &ObjectSplit,
    config: &ProbeConfig,
) -> Result<f64> {
    let (train_x, val_x) = standardise(emb, split)?;
    let hues = |views: &[usize]| {
        let d: Vec<f32> = views
            .iter()
            .flat_map(|&v| {
                let p = &dataset.records[v].params;
                [p.floor_hue as f32, p.light_hue as f32]
            })
            .collect();
        Tensor::new([views.len(), 2], d)
    };
    let probe = train_probe(&train_x, &ProbeTargets::Values(hues(&split.train)?), config)?;
    probe.score(&val_x, &ProbeTargets::Values(hues(&split.val)?))
}

/// Top-1 accuracy of a class probe trained on training objects and scored
/// on validation objects.
pub fn classification_probe(
    emb: &Tensor<f32>,
    dataset: &Dataset,
    split: &ObjectSplit,
    config: &ProbeConfig,
) -> Result<f64> {
    let (train_x, val_x) = standardise(emb, split)?;
    let classes = dataset.manifest.classes;
    let labels = |views: &[usize]| ProbeTargets::Classes {
        labels: views
            .iter()
            .map(|&v| dataset.records[v].params.class_id as usize)
            .collect(),
        classes,
    };
    let probe = train_probe(&train_x, &labels(&split.train), config)?;
    probe.score(&val_x, &labels(&split.val))
}

pub fn view_infos(dataset: &Dataset) -> Vec<ViewInfo> {
    dataset
        .records
        .iter()
        .map(|r| ViewInfo {
            object_id: r.params.object_id as usize,
            quaternion: r.params.quaternion,
        })
        .collect()
}

/// Retrieval on validation objects (`val-val`). Under an object split
/// this coincides with `val-all`.
pub fn retrieval_eval<P: PosePredictor<f32> + ?Sized>(
    pose: &Tensor<f32>,
    dataset: &Dataset,
    split: &ObjectSplit,
    predictor: &P,
) -> Result<RetrievalReport> {
    retrieval_metrics(
        pose,
        &view_infos(dataset),
        predictor,
        &split.val,
        &split.val,
        "val-val",
    )
}

/// Retrieval with the identity map in place of the predictor.
pub fn identity_retrieval(
    pose: &Tensor<f32>,
    dataset: &Dataset,
    split: &ObjectSplit,
) -> Result<RetrievalReport> {
    retrieval_eval(pose, dataset, split, &IdentityPredictor)
}

/// Which parts of the protocol to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalSelection {
    pub classify: bool,
    pub rotation: bool,
    pub colour: bool,
    pub retrieval: bool,
}

impl EvalSelection {
    pub const ALL: Self = Self {
        classify: true,
        rotation: true,
        colour: true,
        retrieval: true,
    };
    pub const NONE: Self = Self {
        classify: false,
        rotation: false,
        colour: false,
        retrieval: false,
    };
}

/// Detailed results of [`evaluate`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResults {
    pub act_top1: Option<f64>,
    pub rep_top1: Option<f64>,
    pub pose_rotation_r2: Option<f64>,
    pub act_rotation_r2: Option<f64>,
    pub pose_colour_r2: Option<f64>,
    pub retrieval: Option<RetrievalReport>,
    pub identity_retrieval: Option<RetrievalReport>,
}

impl EvalResults {
    /// Headline metrics: activation top-1, pose rotation and colour R², and
    /// predictor retrieval.
    pub fn report(
        &self,
        run: &str,
        projector: &str,
        n_caps: usize,
        protocol: &EvalProtocol,
    ) -> MetricReport {
        let mut r = MetricReport::new(run, projector, n_caps);
        r.classification_top1 = self.act_top1;
        r.rotation_r2 = self.pose_rotation_r2;
        r.colour_r2 = self.pose_colour_r2;
        if let Some(ret) = &self.retrieval {
            r.mrr = Some(ret.mrr);
            r.h_at_1 = Some(ret.h_at_1);
            r.h_at_5 = Some(ret.h_at_5);
            r.pre = Some(ret.pre);
        }
        r.notes = protocol.notes();
        r
    }
}

/// Runs the selected probes and retrieval on a trained model.
pub fn evaluate(
    model: &Model,
    params: &ParamSet<f32>,
    dataset: &Dataset,
    split: &ObjectSplit,
    protocol: &EvalProtocol,
    selection: EvalSelection,
) -> Result<EvalResults> {
    let emb = embed_dataset(model, params, dataset, 256)?;
    let mut out = EvalResults::default();
    let seeded = |c: &ProbeConfig, k: u64| {
        c.clone()
            .with_seed(crate::seeding::derive_seed(protocol.seed, &[k]))
    };
    if selection.classify {
        let act_cfg = ProbeConfig {
            depth: protocol.act_head,
            ..seeded(&protocol.classification, 1)
        };
        out.act_top1 = Some(classification_probe(&emb.act, dataset, split, &act_cfg)?);
        out.rep_top1 = Some(classification_probe(
            &emb.rep,
            dataset,
            split,
            &seeded(&protocol.classification, 2),
        )?);
    }
    if selection.rotation {
        out.pose_rotation_r2 = Some(rotation_probe(
            &emb.pose,
            dataset,
            split,
            &seeded(&protocol.rotation, 3),
        )?);
        out.act_rotation_r2 = Some(rotation_probe(
            &emb.act,
            dataset,
            split,
            &seeded(&protocol.rotation, 4),
        )?);
    }
    if selection.colour {
        out.pose_colour_r2 = Some(colour_probe(
            &emb.pose,
            dataset,
            split,
            &seeded(&protocol.colour, 5),
        )?);
    }
    if selection.retrieval {
        let predictor = model.predictor.params(params);
        out.retrieval = Some(retrieval_eval(&emb.pose, dataset, split, &predictor)?);
        out.identity_retrieval = Some(identity_retrieval(&emb.pose, dataset, split)?);
    }
    Ok(out)
}

/// Retrieval MRR on embeddings drawn from a standard normal, for the
/// random baseline on the same archive and split.
pub fn random_embedding_retrieval(
    dataset: &Dataset,
    split: &ObjectSplit,
    dim: usize,
    seed: u64,
) -> Result<RetrievalReport> {
    let mut rng = crate::seeding::derive_rng(seed, &[0x5241_4e44]);
    let emb = Tensor::<f32>::randn([dataset.len(), dim], 1.0, &mut rng);
    retrieval_eval(&emb, dataset, split, &IdentityPredictor)
}
