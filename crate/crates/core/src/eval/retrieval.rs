//! Within-object retrieval of predicted pose embeddings.
//!
//! For every ordered pair `(s, t)` of views of one object, the source
//! embedding is pushed through the predictor with the rotation `s → t`, and
//! the result is compared against the object's other views (the source
//! itself is never a candidate). Distances are Euclidean; equal distances
//! are ordered by view index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::Tensor;
use crate::predictor::PosePredictor;
use crate::rotations::{relative_rotation, rotation_distance, Quaternion};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// Source and retrieval set labels, e.g. `val-val`.
    pub split: String,
    pub mrr: f64,
    pub h_at_1: f64,
    pub h_at_5: f64,
    pub pre: f64,
    pub pairs: usize,
    /// Objects with too few views in the split to form a query.
    pub skipped_objects: usize,
}

/// What retrieval needs to know about each view.
#[derive(Clone, Copy, Debug)]
pub struct ViewInfo {
    pub object_id: usize,
    pub quaternion: Quaternion,
}

/// Ranks of each target and the rotation distance of each nearest
/// neighbour, one entry per query pair.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RetrievalOutcome {
    pub ranks: Vec<usize>,
    pub nn_distances: Vec<f64>,
    pub skipped_objects: usize,
}

impl RetrievalOutcome {
    pub fn report(&self, split: &str) -> Result<RetrievalReport> {
        let n = self.ranks.len();
        if n == 0 {
            return Err(Error::Contract("retrieval produced no query pairs".into()));
        }
        let hits = |k: usize| self.ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64;
        Ok(RetrievalReport {
            split: split.to_string(),
            mrr: self.ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n as f64,
            h_at_1: hits(1),
            h_at_5: hits(5),
            pre: self.nn_distances.iter().sum::<f64>() / n as f64,
            pairs: n,
            skipped_objects: self.skipped_objects,
        })
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum()
}

/// Runs every query. `sources` and `candidates` are view indices into
/// `embeddings`/`views`; a source is only matched against candidates of
/// its own object.
pub fn retrieve<P: PosePredictor<f32> + ?Sized>(
    embeddings: &Tensor<f32>,
    views: &[ViewInfo],
    predictor: &P,
    sources: &[usize],
    candidates: &[usize],
) -> Result<RetrievalOutcome> {
    if embeddings.ndim() != 2 || embeddings.shape()[0] != views.len() {
        return Err(Error::Dimension {
            op: "retrieval_metrics",
            lhs: embeddings.shape().to_vec(),
            rhs: vec![views.len()],
        });
    }
    let mut by_object: std::collections::BTreeMap<usize, (Vec<usize>, Vec<usize>)> =
        Default::default();
    for &s in sources {
        by_object.entry(views[s].object_id).or_default().0.push(s);
    }
    for &c in candidates {
        by_object.entry(views[c].object_id).or_default().1.push(c);
    }
    let mut out = RetrievalOutcome::default();
    for (srcs, cands) in by_object.values_mut() {
        srcs.sort_unstable();
        cands.sort_unstable();
        cands.dedup();
        let mut query_src = Vec::new();
        let mut query_tgt = Vec::new();
        for &s in srcs.iter() {
            for &t in cands.iter() {
                if t != s {
                    query_src.push(s);
                    query_tgt.push(t);
                }
            }
        }
        if srcs.is_empty() {
            continue;
        }
        if query_src.is_empty() {
            out.skipped_objects += 1;
            continue;
        }
        let quats = query_src
            .iter()
            .zip(&query_tgt)
            .map(|(&s, &t)| {
                relative_rotation(
                    &views[s].quaternion.normalized(),
                    &views[t].quaternion.normalized(),
                )
                .map(|q| q.canonical())
            })
            .collect::<Result<Vec<_>>>()?;
        let z = embeddings.select_rows(&query_src)?;
        let pred = predictor.predict(&z, &quats)?;
        for (qi, (&s, &t)) in query_src.iter().zip(&query_tgt).enumerate() {
            let p = pred.row(qi);
            let mut scored: Vec<(f64, usize)> = cands
                .iter()
                .filter(|&&c| c != s)
                .map(|&c| (sq_dist(p, embeddings.row(c)), c))
                .collect();
            scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let rank = 1 + scored
                .iter()
                .position(|&(_, c)| c == t)
                .expect("target is a candidate");
            out.ranks.push(rank);
            let nn = scored[0].1;
            out.nn_distances.push(rotation_distance(
                &views[nn].quaternion.normalized(),
                &views[t].quaternion.normalized(),
            )?);
        }
    }
    Ok(out)
}

/// MRR, H@1, H@5 and PRE for one source/retrieval split.
pub fn retrieval_metrics<P: PosePredictor<f32> + ?Sized>(
    embeddings: &Tensor<f32>,
    views: &[ViewInfo],
    predictor: &P,
    sources: &[usize],
    candidates: &[usize],
    split: &str,
) -> Result<RetrievalReport> {
    retrieve(embeddings, views, predictor, sources, candidates)?.report(split)
}

/// Mean rotation distance between each predicted embedding's nearest
/// neighbour and the true target.
pub fn pre_metric<P: PosePredictor<f32> + ?Sized>(
    embeddings: &Tensor<f32>,
    views: &[ViewInfo],
    predictor: &P,
    sources: &[usize],
    candidates: &[usize],
) -> Result<f64> {
    Ok(retrieval_metrics(embeddings, views, predictor, sources, candidates, "")?.pre)
}
