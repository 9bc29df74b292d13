//! Procedural multi-view dataset of rotated wireframe objects.
//!
//! Every object is a jittered class template seen from `n_views` random
//! rotations. Each view also draws its own floor and light hue, and the
//! light direction angles, which are stored with the view but not drawn.

mod archive;
mod render;
mod shapes;

pub use archive::{checksum_bytes, checksum_file, ARCHIVE_MAGIC, GENERATOR_VERSION};
pub use render::{
    background_colour, hue_colour, line_colour, object_wireframe, project, rasterise, render_view,
    PROJECTION_SCALE,
};
pub use shapes::{template, Wireframe, CLASS_NAMES};

use std::f64::consts::{FRAC_PI_4, TAU};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::Tensor;
use crate::rotations::{
    relative_rotation, sample_rotation, tait_bryan_to_quaternion, Quaternion, TaitBryanAngles,
};
use crate::seeding::{derive_rng, derive_seed};

const STREAM_OBJECT: u64 = 1;
const STREAM_VIEW: u64 = 2;

/// Latent factors of one view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub class_id: u32,
    pub object_id: u32,
    pub angles: TaitBryanAngles,
    pub quaternion: Quaternion,
    pub floor_hue: f64,
    pub light_hue: f64,
    pub light_theta: f64,
    pub light_phi: f64,
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if self.class_id as usize >= CLASS_NAMES.len() {
            return Err(Error::Parameter(format!(
                "class id {} is not a known template",
                self.class_id
            )));
        }
        TaitBryanAngles::new(self.angles.rx(), self.angles.ry(), self.angles.rz())?;
        let ranges = [
            ("floor_hue", self.floor_hue, 1.0),
            ("light_hue", self.light_hue, 1.0),
            ("light_theta", self.light_theta, FRAC_PI_4 + 1e-6),
            ("light_phi", self.light_phi, TAU + 1e-6),
        ];
        for (name, v, hi) in ranges {
            if !(0.0..=hi).contains(&v) {
                return Err(Error::Parameter(format!("{name} = {v} outside [0, {hi}]")));
            }
        }
        Ok(())
    }

    /// The `(floor_hue, light_hue, light_theta, light_phi)` factors.
    pub fn factors(&self) -> [f64; 4] {
        [
            self.floor_hue,
            self.light_hue,
            self.light_theta,
            self.light_phi,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub generator_version: u32,
    pub classes: usize,
    pub objects_per_class: usize,
    pub views: usize,
    pub image_size: usize,
    pub seed: u64,
    /// How training pairs are drawn from the stored views.
    pub pairing: String,
}

impl DatasetManifest {
    pub fn new(
        classes: usize,
        objects_per_class: usize,
        views: usize,
        image_size: usize,
        seed: u64,
    ) -> Self {
        Self {
            format: "CIE1".into(),
            generator_version: GENERATOR_VERSION,
            classes,
            objects_per_class,
            views,
            image_size,
            seed,
            pairing: "resampled-each-epoch".into(),
        }
    }

    pub fn n_objects(&self) -> usize {
        self.classes * self.objects_per_class
    }

    pub fn n_records(&self) -> usize {
        self.n_objects() * self.views
    }

    fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.objects_per_class == 0 || self.views == 0 {
            return Err(Error::Parameter(
                "class, object and view counts must be at least 1".into(),
            ));
        }
        if self.classes > CLASS_NAMES.len() {
            return Err(Error::Parameter(format!(
                "at most {} classes are available",
                CLASS_NAMES.len()
            )));
        }
        if self.image_size < 4 {
            return Err(Error::Parameter(format!(
                "image size {} is too small",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// A view's image (`3×H×W`, channel-major) and its latent factors.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewRecord {
    pub params: SceneParams,
    pub image: Vec<f32>,
}

/// Records ordered by object, then view: record `o·views + v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<ViewRecord>,
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

/// Seed of the per-object shape jitter.
pub fn object_seed(dataset_seed: u64, object_id: u32) -> u64 {
    derive_seed(dataset_seed, &[STREAM_OBJECT, object_id as u64])
}

fn sample_view<R: Rng + ?Sized>(class_id: u32, object_id: u32, rng: &mut R) -> Result<SceneParams> {
    let (angles, _) = sample_rotation(rng);
    // store exactly what the archive can hold so a reload is lossless
    let angles = TaitBryanAngles::new(
        f32_round(angles.rx()),
        f32_round(angles.ry()),
        f32_round(angles.rz()),
    )?;
    let q = tait_bryan_to_quaternion(&angles)?;
    let quaternion = Quaternion::from_array(q.as_array().map(f32_round));
    Ok(SceneParams {
        class_id,
        object_id,
        angles,
        quaternion,
        floor_hue: f32_round(rng.gen_range(0.0..=1.0)),
        light_hue: f32_round(rng.gen_range(0.0..=1.0)),
        light_theta: f32_round(rng.gen_range(0.0..=FRAC_PI_4)),
        light_phi: f32_round(rng.gen_range(0.0..=TAU)),
    })
}

pub fn generate_dataset(
    classes: usize,
    objects_per_class: usize,
    views: usize,
    image_size: usize,
    seed: u64,
) -> Result<Dataset> {
    let manifest = DatasetManifest::new(classes, objects_per_class, views, image_size, seed);
    generate_from_manifest(&manifest)
}

/// Regenerates every record from the manifest alone.
pub fn generate_from_manifest(manifest: &DatasetManifest) -> Result<Dataset> {
    manifest.validate()?;
    if manifest.generator_version != GENERATOR_VERSION {
        return Err(Error::Format(format!(
            "manifest generator version {} differs from {GENERATOR_VERSION}",
            manifest.generator_version
        )));
    }
    let mut records = Vec::with_capacity(manifest.n_records());
    for class_id in 0..manifest.classes as u32 {
        for k in 0..manifest.objects_per_class as u32 {
            let object_id = class_id * manifest.objects_per_class as u32 + k;
            let oseed = object_seed(manifest.seed, object_id);
            let wire = object_wireframe(class_id as usize, oseed)?;
            let mut rng = derive_rng(manifest.seed, &[STREAM_VIEW, object_id as u64]);
            for _ in 0..manifest.views {
                let params = sample_view(class_id, object_id, &mut rng)?;
                let image = rasterise(
                    &wire,
                    &params.quaternion,
                    params.floor_hue,
                    params.light_hue,
                    manifest.image_size,
                );
                records.push(ViewRecord { params, image });
            }
        }
    }
    Ok(Dataset {
        manifest: manifest.clone(),
        records,
    })
}

/// Two views of one object and the rotation between them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingPair {
    pub view_a: usize,
    pub view_b: usize,
    /// `q_b ⊗ q_a⁻¹`.
    pub g_rel: Quaternion,
    pub class_id: u32,
}

/// Train and validation view indices split by object.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_len(&self) -> usize {
        3 * self.manifest.image_size * self.manifest.image_size
    }

    pub fn views_of_object(&self, object_id: usize) -> std::ops::Range<usize> {
        let v = self.manifest.views;
        object_id * v..(object_id + 1) * v
    }

    /// Stacks the images of `indices` into an `n×3×H×W` batch.
    pub fn images<T: crate::scalar::Scalar>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let s = self.manifest.image_size;
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            let r = self
                .records
                .get(i)
                .ok_or_else(|| Error::Parameter(format!("record {i} out of range")))?;
            data.extend(r.image.iter().map(|&v| T::lit(v as f64)));
        }
        Tensor::new([indices.len(), 3, s, s], data)
    }

    pub fn pair(&self, view_a: usize, view_b: usize) -> Result<TrainingPair> {
        let (a, b) = (&self.records[view_a].params, &self.records[view_b].params);
        if a.object_id != b.object_id {
            return Err(Error::Contract(format!(
                "views {view_a} and {view_b} belong to different objects"
            )));
        }
        Ok(TrainingPair {
            view_a,
            view_b,
            g_rel: relative_rotation(&a.quaternion.normalized(), &b.quaternion.normalized())?,
            class_id: a.class_id,
        })
    }

    fn partner<R: Rng + ?Sized>(&self, anchor: usize, rng: &mut R) -> Result<usize> {
        let v = self.manifest.views;
        if v < 2 {
            return Err(Error::Contract(
                "training pairs need at least two views per object".into(),
            ));
        }
        let base = anchor - anchor % v;
        let mut other = rng.gen_range(0..v - 1);
        if other >= anchor % v {
            other += 1;
        }
        Ok(base + other)
    }

    /// Pairs every anchor with a random other view of its object, in a
    /// shuffled order.
    pub fn epoch_pairs<R: Rng + ?Sized>(
        &self,
        anchors: &[usize],
        rng: &mut R,
    ) -> Result<Vec<TrainingPair>> {
        let mut order = anchors.to_vec();
        order.shuffle(rng);
        order
            .into_iter()
            .map(|a| {
                let b = self.partner(a, rng)?;
                self.pair(a, b)
            })
            .collect()
    }

    /// The last `ceil(val_fraction · objects_per_class)` objects of every
    /// class go to validation.
    pub fn object_split(&self, val_fraction: f64) -> Result<ObjectSplit> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::Config(format!(
                "validation fraction {val_fraction} outside [0, 1)"
            )));
        }
        let m = &self.manifest;
        let n_val = ((m.objects_per_class as f64) * val_fraction).ceil() as usize;
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for class in 0..m.classes {
            for k in 0..m.objects_per_class {
                let views = self.views_of_object(class * m.objects_per_class + k);
                if k + n_val >= m.objects_per_class {
                    val.extend(views);
                } else {
                    train.extend(views);
                }
            }
        }
        Ok(ObjectSplit { train, val })
    }
}

/// Draws one random pair: a uniform view plus a different view of the same
/// object.
pub fn sample_training_pair<R: Rng + ?Sized>(
    dataset: &Dataset,
    rng: &mut R,
) -> Result<TrainingPair> {
    let a = rng.gen_range(0..dataset.len());
    let b = dataset.partner(a, rng)?;
    dataset.pair(a, b)
}
