//! Immutable reference database: per-object rotation-labeled feature
//! pyramids, precomputed farthest-point anchors, and binary persistence.

use crate::features::{
    read_f32_block, read_u32, write_f32_block, FeaturePyramid, PyramidLayout, ScaleMap,
};
use crate::so3::{fps_select, Rotation};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Magic bytes of the database file format.
pub const DB_MAGIC: &[u8; 4] = b"ORDB";
/// Supported database file version.
pub const DB_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DbError {
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("object '{category}' supplies {have} references but k_ac = {need}")]
    InsufficientReferences {
        category: String,
        have: usize,
        need: usize,
    },
    #[error("bad database file: {0}")]
    Format(String),
    #[error("unsupported database version {found}, supported: {supported}")]
    Version { found: u32, supported: u32 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    So3(#[from] crate::so3::So3Error),
    #[error(transparent)]
    Pyramid(#[from] crate::features::PyramidError),
}

/// One rotation-labeled reference; its index is its position within the
/// object's entry list.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEntry {
    pub rotation: Rotation,
    pub pyramid: FeaturePyramid,
}

/// All references of one object plus its farthest-point anchor indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectRefs {
    pub category: String,
    pub entries: Vec<ReferenceEntry>,
    pub anchor_ids: Vec<u32>,
}

/// Immutable after build/load; safe for unrestricted concurrent reads.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceDB {
    pub objects: Vec<ObjectRefs>,
    pub layout: PyramidLayout,
}

/// Input to [`build`]: one object's labeled references.
#[derive(Debug)]
pub struct ObjectSource {
    pub category: String,
    pub references: Vec<(Rotation, FeaturePyramid)>,
}

/// Assemble a database: validates that every pyramid shares one layout and
/// selects `k_ac` anchors per object by farthest point sampling (seeded at
/// index 0). Deterministic for identical inputs.
pub fn build(sources: Vec<ObjectSource>, k_ac: usize) -> Result<ReferenceDB, DbError> {
    if sources.is_empty() {
        return Err(DbError::ConfigMismatch("no objects supplied".into()));
    }
    if k_ac == 0 {
        return Err(DbError::ConfigMismatch("k_ac must be at least 1".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for src in &sources {
        if !seen.insert(src.category.clone()) {
            return Err(DbError::ConfigMismatch(format!(
                "duplicate category '{}'",
                src.category
            )));
        }
        if src.references.len() < k_ac {
            return Err(DbError::InsufficientReferences {
                category: src.category.clone(),
                have: src.references.len(),
                need: k_ac,
            });
        }
    }

    let layout = sources[0].references[0].1.layout();
    for src in &sources {
        for (_, pyr) in &src.references {
            pyr.validate()?;
            if pyr.layout() != layout {
                return Err(DbError::ConfigMismatch(format!(
                    "object '{}' has pyramid layout {:?}, database uses {:?}",
                    src.category,
                    pyr.layout(),
                    layout
                )));
            }
        }
    }

    let mut objects = Vec::with_capacity(sources.len());
    for src in sources {
        let rotations: Vec<Rotation> = src.references.iter().map(|(r, _)| *r).collect();
        let anchor_ids = fps_select(&rotations, k_ac, 0)?
            .into_iter()
            .map(|i| i as u32)
            .collect();
        objects.push(ObjectRefs {
            category: src.category,
            entries: src
                .references
                .into_iter()
                .map(|(rotation, pyramid)| ReferenceEntry { rotation, pyramid })
                .collect(),
            anchor_ids,
        });
    }
    Ok(ReferenceDB { objects, layout })
}

impl ReferenceDB {
    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn total_references(&self) -> usize {
        self.objects.iter().map(|o| o.entries.len()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<(), DbError> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut file)
    }

    pub fn write<W: Write>(&self, out: &mut W) -> Result<(), DbError> {
        out.write_all(DB_MAGIC)?;
        out.write_all(&DB_VERSION.to_le_bytes())?;
        out.write_all(&(self.objects.len() as u32).to_le_bytes())?;
        out.write_all(&(self.layout.scale_dims.len() as u32).to_le_bytes())?;
        out.write_all(&self.layout.channels.to_le_bytes())?;
        for &(h, w) in &self.layout.scale_dims {
            out.write_all(&h.to_le_bytes())?;
            out.write_all(&w.to_le_bytes())?;
        }
        for obj in &self.objects {
            let label = obj.category.as_bytes();
            out.write_all(&(label.len() as u32).to_le_bytes())?;
            out.write_all(label)?;
            out.write_all(&(obj.entries.len() as u32).to_le_bytes())?;
            out.write_all(&(obj.anchor_ids.len() as u32).to_le_bytes())?;
            for id in &obj.anchor_ids {
                out.write_all(&id.to_le_bytes())?;
            }
            for entry in &obj.entries {
                for v in entry.rotation.to_row_major() {
                    out.write_all(&v.to_le_bytes())?;
                }
                for scale in &entry.pyramid.scales {
                    write_f32_block(out, &scale.data)?;
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ReferenceDB, DbError> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        ReferenceDB::read(&mut file)
    }

    pub fn read<R: Read>(input: &mut R) -> Result<ReferenceDB, DbError> {
        let mut magic = [0u8; 4];
        read_bytes(input, &mut magic)?;
        if &magic != DB_MAGIC {
            return Err(DbError::Format(format!(
                "bad magic {magic:?}, expected {DB_MAGIC:?}"
            )));
        }
        let version = db_u32(input)?;
        if version != DB_VERSION {
            return Err(DbError::Version {
                found: version,
                supported: DB_VERSION,
            });
        }
        let num_objects = db_u32(input)? as usize;
        let num_scales = db_u32(input)? as usize;
        let channels = db_u32(input)?;
        if num_objects == 0 || num_scales == 0 || channels == 0 {
            return Err(DbError::Format("zero-sized database header".into()));
        }
        let mut scale_dims = Vec::with_capacity(num_scales);
        for _ in 0..num_scales {
            let h = db_u32(input)?;
            let w = db_u32(input)?;
            scale_dims.push((h, w));
        }
        let layout = PyramidLayout {
            scale_dims,
            channels,
        };

        let mut objects = Vec::with_capacity(num_objects);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..num_objects {
            let label_len = db_u32(input)? as usize;
            let mut label = vec![0u8; label_len];
            read_bytes(input, &mut label)?;
            let category = String::from_utf8(label)
                .map_err(|_| DbError::Format("category label is not UTF-8".into()))?;
            if !seen.insert(category.clone()) {
                return Err(DbError::Format(format!(
                    "duplicate category '{category}'"
                )));
            }
            let num_refs = db_u32(input)? as usize;
            let k_ac = db_u32(input)? as usize;
            if k_ac == 0 || k_ac > num_refs {
                return Err(DbError::Format(format!(
                    "object '{category}': k_ac {k_ac} out of range for {num_refs} references"
                )));
            }
            let mut anchor_ids = Vec::with_capacity(k_ac);
            let mut distinct = std::collections::HashSet::new();
            for _ in 0..k_ac {
                let id = db_u32(input)?;
                if id as usize >= num_refs || !distinct.insert(id) {
                    return Err(DbError::Format(format!(
                        "object '{category}': bad anchor id {id}"
                    )));
                }
                anchor_ids.push(id);
            }
            let mut entries = Vec::with_capacity(num_refs);
            for _ in 0..num_refs {
                let mut row = [0.0f64; 9];
                for v in &mut row {
                    let mut buf = [0u8; 8];
                    read_bytes(input, &mut buf)?;
                    *v = f64::from_le_bytes(buf);
                }
                let rotation = Rotation::from_row_major(&row)
                    .map_err(|e| DbError::Format(format!("invalid stored rotation: {e}")))?;
                let mut scales = Vec::with_capacity(layout.scale_dims.len());
                for &(h, w) in &layout.scale_dims {
                    let data =
                        read_f32_block(input, h as usize * w as usize * channels as usize)
                            .map_err(map_pyramid_err)?;
                    scales.push(ScaleMap {
                        height: h as usize,
                        width: w as usize,
                        channels: channels as usize,
                        data,
                    });
                }
                let pyramid = FeaturePyramid { scales };
                pyramid.validate()?;
                entries.push(ReferenceEntry { rotation, pyramid });
            }
            objects.push(ObjectRefs {
                category,
                entries,
                anchor_ids,
            });
        }
        Ok(ReferenceDB { objects, layout })
    }
}

fn db_u32<R: Read>(input: &mut R) -> Result<u32, DbError> {
    read_u32(input).map_err(map_pyramid_err)
}

fn map_pyramid_err(e: crate::features::PyramidError) -> DbError {
    match e {
        crate::features::PyramidError::Format(m) => DbError::Format(m),
        crate::features::PyramidError::Io(io) => DbError::Io(io),
        other => DbError::Pyramid(other),
    }
}

fn read_bytes<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<(), DbError> {
    input.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            DbError::Format("truncated file".into())
        } else {
            DbError::Io(e)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{extract, ExtractorConfig};
    use crate::preproc::GrayImage;
    use crate::so3::{geodesic_distance, sample_rotations};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn test_pyramid(seed: u64) -> FeaturePyramid {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let px: Vec<f64> = (0..128 * 128).map(|_| rng.gen::<f64>()).collect();
        let img = GrayImage::new(128, 128, px).unwrap();
        extract(
            &img,
            &ExtractorConfig {
                scale_dims: vec![(4, 4), (8, 8)],
                channels: 4,
            },
        )
    }

    fn small_sources(objects: usize, refs: usize) -> Vec<ObjectSource> {
        (0..objects)
            .map(|o| {
                let rotations = sample_rotations(refs, 100 + o as u64);
                ObjectSource {
                    category: format!("obj{o}"),
                    references: rotations
                        .into_iter()
                        .enumerate()
                        .map(|(i, r)| (r, test_pyramid(o as u64 * 1000 + i as u64)))
                        .collect(),
                }
            })
            .collect()
    }

    #[test]
    fn build_with_all_anchors_is_a_permutation() {
        let db = build(small_sources(1, 4), 4).unwrap();
        let mut ids = db.objects[0].anchor_ids.clone();
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn rebuild_is_byte_identical() {
        let a = build(small_sources(2, 5), 3).unwrap();
        let b = build(small_sources(2, 5), 3).unwrap();
        let mut ba = Vec::new();
        let mut bb = Vec::new();
        a.write(&mut ba).unwrap();
        b.write(&mut bb).unwrap();
        assert_eq!(ba, bb);
    }

    #[test]
    fn mismatched_layouts_are_rejected() {
        let mut sources = small_sources(2, 4);
        // Re-extract object 1 with a different channel count.
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let px: Vec<f64> = (0..128 * 128).map(|_| rng.gen::<f64>()).collect();
        let img = GrayImage::new(128, 128, px).unwrap();
        let other = extract(
            &img,
            &ExtractorConfig {
                scale_dims: vec![(4, 4), (8, 8)],
                channels: 6,
            },
        );
        sources[1].references[2].1 = other;
        assert!(matches!(
            build(sources, 2),
            Err(DbError::ConfigMismatch(_))
        ));
    }

    #[test]
    fn insufficient_references_are_rejected() {
        assert!(matches!(
            build(small_sources(1, 3), 4),
            Err(DbError::InsufficientReferences { .. })
        ));
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let db = build(small_sources(2, 5), 3).unwrap();
        let mut buf = Vec::new();
        db.write(&mut buf).unwrap();
        let back = ReferenceDB::read(&mut buf.as_slice()).unwrap();
        assert_eq!(db, back);
        // Bit-exact second serialization.
        let mut buf2 = Vec::new();
        back.write(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn corrupted_files_raise_designated_errors() {
        let db = build(small_sources(1, 4), 2).unwrap();
        let mut buf = Vec::new();
        db.write(&mut buf).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[1] = b'!';
        assert!(matches!(
            ReferenceDB::read(&mut bad_magic.as_slice()),
            Err(DbError::Format(_))
        ));

        let mut bad_version = buf.clone();
        bad_version[4..8].copy_from_slice(&99u32.to_le_bytes());
        match ReferenceDB::read(&mut bad_version.as_slice()) {
            Err(DbError::Version { found, supported }) => {
                assert_eq!(found, 99);
                assert_eq!(supported, DB_VERSION);
            }
            other => panic!("expected VersionError, got {other:?}"),
        }

        let truncated = &buf[..buf.len() / 2];
        assert!(matches!(
            ReferenceDB::read(&mut &truncated[..]),
            Err(DbError::Format(_))
        ));
    }

    #[test]
    fn fps_anchors_beat_random_subsets_on_coverage() {
        // Covering radius of the FPS anchors vs the 95th percentile over 100
        // random anchor subsets of the same size.
        let refs = 192;
        let k = 12;
        let rotations = sample_rotations(refs, 31);
        let sources = vec![ObjectSource {
            category: "obj".into(),
            references: rotations
                .iter()
                .enumerate()
                .map(|(i, r)| (*r, test_pyramid(i as u64)))
                .collect(),
        }];
        let db = build(sources, k).unwrap();

        let covering = |anchors: &[usize]| -> f64 {
            rotations
                .iter()
                .map(|r| {
                    anchors
                        .iter()
                        .map(|&a| geodesic_distance(r, &rotations[a]))
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(0.0, f64::max)
        };

        let fps_ids: Vec<usize> = db.objects[0].anchor_ids.iter().map(|&i| i as usize).collect();
        let fps_radius = covering(&fps_ids);

        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let mut random_radii: Vec<f64> = (0..100)
            .map(|_| {
                let mut pool: Vec<usize> = (0..refs).collect();
                // Partial Fisher-Yates for a k-subset.
                for i in 0..k {
                    let j = rng.gen_range(i..refs);
                    pool.swap(i, j);
                }
                covering(&pool[..k])
            })
            .collect();
        random_radii.sort_by(f64::total_cmp);
        let p95 = random_radii[94];
        assert!(
            fps_radius <= p95,
            "FPS covering radius {fps_radius} vs random p95 {p95}"
        );
    }
}
