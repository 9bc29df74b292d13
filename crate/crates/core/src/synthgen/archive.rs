//! Binary archive: magic, `u32` manifest length, JSON manifest, then fixed
//! size little-endian records.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Dataset, DatasetManifest, SceneParams, ViewRecord};
use crate::error::{Error, Result};
use crate::rotations::{Quaternion, TaitBryanAngles};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"CIE1";
pub const GENERATOR_VERSION: u32 = 1;

/// Scalar fields after the image: 2 ids, 3 angles, 4 quaternion, 4 factors.
const TAIL_WORDS: usize = 13;

impl Dataset {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let rec_len = 4 * (self.image_len() + TAIL_WORDS);
        let mut out = Vec::with_capacity(8 + manifest.len() + rec_len * self.records.len());
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for r in &self.records {
            if r.image.len() != self.image_len() {
                return Err(Error::Format(format!(
                    "record image has {} values",
                    r.image.len()
                )));
            }
            for v in &r.image {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let p = &r.params;
            out.extend_from_slice(&p.class_id.to_le_bytes());
            out.extend_from_slice(&p.object_id.to_le_bytes());
            let floats = p
                .angles
                .as_array()
                .into_iter()
                .chain(p.quaternion.as_array())
                .chain(p.factors());
            for v in floats {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != ARCHIVE_MAGIC {
            return Err(Error::Format("missing CIE1 magic".into()));
        }
        let mlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = bytes
            .get(8..8 + mlen)
            .ok_or_else(|| Error::Format("truncated manifest".into()))?;
        let manifest: DatasetManifest = serde_json::from_slice(body)?;
        let image_len = 3 * manifest.image_size * manifest.image_size;
        let rec_len = 4 * (image_len + TAIL_WORDS);
        let data = &bytes[8 + mlen..];
        if data.len() != rec_len * manifest.n_records() {
            return Err(Error::Format(format!(
                "expected {} record bytes, found {}",
                rec_len * manifest.n_records(),
                data.len()
            )));
        }
        let word = |chunk: &[u8], i: usize| -> [u8; 4] {
            chunk[4 * i..4 * i + 4].try_into().expect("4 bytes")
        };
        let mut records = Vec::with_capacity(manifest.n_records());
        for chunk in data.chunks_exact(rec_len) {
            let image = (0..image_len)
                .map(|i| f32::from_le_bytes(word(chunk, i)))
                .collect();
            let f = |i: usize| f32::from_le_bytes(word(chunk, image_len + i)) as f64;
            let params = SceneParams {
                class_id: u32::from_le_bytes(word(chunk, image_len)),
                object_id: u32::from_le_bytes(word(chunk, image_len + 1)),
                angles: TaitBryanAngles::new(f(2), f(3), f(4))?,
                quaternion: Quaternion::new(f(5), f(6), f(7), f(8)),
                floor_hue: f(9),
                light_hue: f(10),
                light_theta: f(11),
                light_phi: f(12),
            };
            params.validate()?;
            records.push(ViewRecord { params, image });
        }
        Ok(Self { manifest, records })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        Ok(checksum_bytes(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// SHA-256 of the serialised archive.
    pub fn checksum(&self) -> Result<String> {
        Ok(checksum_bytes(&self.to_bytes()?))
    }
}

pub fn checksum_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn checksum_file(path: &Path) -> Result<String> {
    Ok(checksum_bytes(&fs::read(path)?))
}
