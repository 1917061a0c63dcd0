//! Binary part bundle.
//!
//! Little-endian: magic `PREP`, version u16, part_id u64, object_class u16,
//! part_label u16, count u32, centroid 3×f32, scale f32, axis 3×f32,
//! axis_kind u8, then `count` xyz triples as f32.

use std::io::{Read, Write};
use std::path::Path;

use super::Part;
use crate::error::{Error, Result};
use crate::geometry::{AxisKind, PointCloud, PoseMeta};
use crate::gradcore::checkpoint::Reader;

pub const MAGIC: [u8; 4] = *b"PREP";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 8 + 2 + 2 + 4 + 12 + 4 + 12 + 1;

pub fn part_to_bytes(part: &Part) -> Vec<u8> {
    let pts = part.cloud.points();
    let mut out = Vec::with_capacity(HEADER_LEN + pts.len() * 12);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&part.part_id.to_le_bytes());
    out.extend_from_slice(&part.object_class.to_le_bytes());
    out.extend_from_slice(&part.part_label.to_le_bytes());
    out.extend_from_slice(&(pts.len() as u32).to_le_bytes());
    for v in part.pose.centroid {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&part.pose.scale.to_le_bytes());
    for v in part.pose.axis {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(part.pose.axis_kind.to_u8());
    for p in pts {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses one bundle. `source_object` is not stored in the bundle and comes
/// back empty; dataset loading fills it from the manifest.
pub fn part_from_bytes(bytes: &[u8]) -> Result<Part> {
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
    let part_id = r.u64("part_id")?;
    let object_class = r.u16("object_class")?;
    let part_label = r.u16("part_label")?;
    let count = r.u32("count")? as usize;
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
    let raw = r.take(count.checked_mul(12).ok_or(Error::Truncated("points"))?, "points")?;
    if !r.at_end() {
        return Err(Error::InvalidInput("trailing bytes after part bundle".into()));
    }
    let points = raw
        .chunks_exact(12)
        .map(|c| {
            [
                f32::from_le_bytes(c[0..4].try_into().unwrap()),
                f32::from_le_bytes(c[4..8].try_into().unwrap()),
                f32::from_le_bytes(c[8..12].try_into().unwrap()),
            ]
        })
        .collect();
    let pose = PoseMeta {
        centroid,
        scale,
        axis,
        axis_kind,
    };
    pose.validate()?;
    Ok(Part {
        cloud: PointCloud::new(points)?,
        pose,
        part_label,
        object_class,
        source_object: String::new(),
        part_id,
    })
}

pub fn write_part(path: &Path, part: &Part) -> Result<()> {
    std::fs::File::create(path)?.write_all(&part_to_bytes(part))?;
    Ok(())
}

pub fn read_part(path: &Path) -> Result<Part> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    part_from_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_part(seed: u64) -> Part {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..300);
        let pts = (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        Part {
            cloud: PointCloud::new(pts).unwrap(),
            pose: PoseMeta {
                centroid: [rng.random(), rng.random(), rng.random()],
                scale: rng.random_range(0.01..2.0),
                axis: [0.0, 0.6, 0.8],
                axis_kind: AxisKind::Planar,
            },
            part_label: rng.random_range(0..8),
            object_class: rng.random_range(0..3),
            source_object: String::new(),
            part_id: rng.random(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for seed in 0..20 {
            let p = random_part(seed);
            let back = part_from_bytes(&part_to_bytes(&p)).unwrap();
            assert_eq!(back, p);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.part");
        let p = random_part(99);
        write_part(&path, &p).unwrap();
        assert_eq!(read_part(&path).unwrap(), p);
    }

    #[test]
    fn damaged_bundles_give_distinct_errors() {
        let bytes = part_to_bytes(&random_part(5));
        for cut in [2, 10, HEADER_LEN - 1, HEADER_LEN + 5, bytes.len() - 1] {
            assert!(matches!(part_from_bytes(&bytes[..cut]), Err(Error::Truncated(_))));
        }
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"PLY ");
        assert!(matches!(part_from_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes;
        bad[4..6].copy_from_slice(&2u16.to_le_bytes());
        assert!(matches!(part_from_bytes(&bad), Err(Error::VersionMismatch { found: 2, .. })));
    }
}
