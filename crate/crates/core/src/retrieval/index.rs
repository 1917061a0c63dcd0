//! Pre-encoded warehouse.
//!
//! File layout (little-endian): magic `PRIX`, version u16, encoder hash as
//! 32 raw bytes, feature width `d` u32, record count u64, then per record:
//! part_id u64, `d` f32 feature values, centroid 3×f32, scale f32, axis 3×f32,
//! axis kind u8, object_class u16, part_label u16.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::dataprep::Part;
use crate::error::{Error, Result};
use crate::geometry::{AxisKind, PoseMeta};
use crate::gradcore::checkpoint::Reader;
use crate::partencoder::{EncoderSnapshot, FeatureVec};

pub const MAGIC: [u8; 4] = *b"PRIX";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct IndexRecord {
    pub part_id: u64,
    pub feature: FeatureVec,
    pub pose: PoseMeta,
    pub part_label: u16,
    pub object_class: u16,
}

/// Immutable, sorted by part id.
#[derive(Clone, Debug, PartialEq)]
pub struct WarehouseIndex {
    encoder_hash: String,
    d: usize,
    records: Vec<IndexRecord>,
}

/// Encodes every part once. Contract violations name the offending part.
pub fn build_index(parts: &[&Part], encoder: &EncoderSnapshot) -> Result<WarehouseIndex> {
    if parts.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let mut records = parts
        .par_iter()
        .map(|p| {
            let feature = encoder.encode(&p.cloud).map_err(|e| e.for_part(p.part_id))?;
            Ok(IndexRecord {
                part_id: p.part_id,
                feature,
                pose: p.pose,
                part_label: p.part_label,
                object_class: p.object_class,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    records.sort_by_key(|r| r.part_id);
    if let Some(w) = records.windows(2).find(|w| w[0].part_id == w[1].part_id) {
        return Err(Error::InvalidInput(format!("duplicate part id {}", w[0].part_id)));
    }
    Ok(WarehouseIndex {
        encoder_hash: encoder.hash().to_string(),
        d: encoder.d(),
        records,
    })
}

impl WarehouseIndex {
    /// Index over already-encoded records, for features that did not come
    /// from [`build_index`] (benchmarks, imports).
    pub fn from_records(encoder_hash: &str, d: usize, mut records: Vec<IndexRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if hex::decode(encoder_hash).map_or(true, |h| h.len() != 32) {
            return Err(Error::InvalidInput("encoder hash is not 32 hex bytes".into()));
        }
        if let Some(r) = records.iter().find(|r| r.feature.len() != d) {
            return Err(Error::ShapeMismatch {
                op: "index record",
                detail: format!("part {} has {} features, index width is {d}", r.part_id, r.feature.len()),
            });
        }
        records.sort_by_key(|r| r.part_id);
        if let Some(w) = records.windows(2).find(|w| w[0].part_id == w[1].part_id) {
            return Err(Error::InvalidInput(format!("duplicate part id {}", w[0].part_id)));
        }
        Ok(WarehouseIndex {
            encoder_hash: encoder_hash.to_string(),
            d,
            records,
        })
    }

    pub fn encoder_hash(&self) -> &str {
        &self.encoder_hash
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[IndexRecord] {
        &self.records
    }

    pub fn get(&self, part_id: u64) -> Option<&IndexRecord> {
        self.records
            .binary_search_by_key(&part_id, |r| r.part_id)
            .ok()
            .map(|i| &self.records[i])
    }

    /// Fails unless the index was built with the encoder identified by `hash`.
    pub fn check_encoder(&self, hash: &str) -> Result<()> {
        if self.encoder_hash != hash {
            return Err(Error::HashMismatch {
                expected: hash.to_string(),
                found: self.encoder_hash.clone(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let hash = hex::decode(&self.encoder_hash)
            .ok()
            .filter(|h| h.len() == 32)
            .ok_or_else(|| Error::InvalidInput("encoder hash is not 32 hex bytes".into()))?;
        let mut out = Vec::with_capacity(50 + self.records.len() * (4 * self.d + 47));
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&hash);
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.part_id.to_le_bytes());
            for v in &r.feature {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in r.pose.centroid {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&r.pose.scale.to_le_bytes());
            for v in r.pose.axis {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.push(r.pose.axis_kind.to_u8());
            out.extend_from_slice(&r.object_class.to_le_bytes());
            out.extend_from_slice(&r.part_label.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                expected: VERSION,
                found: version,
            });
        }
        let encoder_hash = hex::encode(r.take(32, "encoder hash")?);
        let d = r.u32("d")? as usize;
        let count = r.u64("count")?;
        let mut records = Vec::new();
        for _ in 0..count {
            let part_id = r.u64("part_id")?;
            let feature = (0..d).map(|_| r.f32("feature")).collect::<Result<Vec<f32>>>()?;
            let mut centroid = [0f32; 3];
            for c in &mut centroid {
                *c = r.f32("centroid")?;
            }
            let scale = r.f32("scale")?;
            let mut axis = [0f32; 3];
            for a in &mut axis {
                *a = r.f32("axis")?;
            }
            let kind = r.take(1, "axis_kind")?[0];
            let axis_kind = AxisKind::from_u8(kind)
                .ok_or_else(|| Error::InvalidInput(format!("unknown axis kind {kind}")))?;
            let object_class = r.u16("object_class")?;
            let part_label = r.u16("part_label")?;
            let pose = PoseMeta {
                centroid,
                scale,
                axis,
                axis_kind,
            };
            pose.validate()?;
            records.push(IndexRecord {
                part_id,
                feature,
                pose,
                part_label,
                object_class,
            });
        }
        if !r.at_end() {
            return Err(Error::InvalidInput("trailing bytes after index".into()));
        }
        if records.windows(2).any(|w| w[0].part_id >= w[1].part_id) {
            return Err(Error::InvalidInput("index records not sorted by part id".into()));
        }
        Ok(WarehouseIndex {
            encoder_hash,
            d,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// SHA-256 of the serialized index.
    pub fn checksum(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}
