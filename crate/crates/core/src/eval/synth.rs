//! Synthetic retrieval tasks: procedural objects rendered under arbitrary
//! rotations, feature-level query corruption, training-set construction, and
//! a closed-form score-field database for retrieval-algorithm oracles.

use super::EvalError;
use crate::features::{extract, ExtractorConfig, FeaturePyramid, ScaleMap};
use crate::loss::{TrainCandidate, TrainExample};
use crate::preproc::{local_normalize, GrayImage, NormConfig, STANDARD_SIZE};
use crate::refdb::{build, ObjectSource, ReferenceDB};
use crate::so3::{from_sixd, geodesic_distance, sample_rotations, Rotation, SixDRep};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Where query rotations come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QueryPlacement {
    /// Queries are exact copies of randomly chosen references.
    OnReference,
    /// Queries perturb a chosen reference's rotation by a bounded angle and
    /// are re-rendered at the perturbed orientation.
    Perturbed { max_deg: f64 },
    /// Queries are rendered at fresh uniformly random rotations, independent
    /// of the reference set.
    Uniform,
}

/// Full description of a synthetic task; everything is derived
/// deterministically from `seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthTaskSpec {
    pub seed: u64,
    pub objects: usize,
    pub refs_per_object: usize,
    pub anchors_per_object: usize,
    pub queries: usize,
    pub placement: QueryPlacement,
    /// Std of additive Gaussian noise on query feature values.
    pub feature_noise: f64,
    /// Fraction of locations per scale overwritten with background content.
    pub outlier_fraction: f64,
    pub extractor: ExtractorConfig,
    /// Local normalization settings; `None` disables the step.
    pub local_norm: Option<NormConfig>,
}

impl SynthTaskSpec {
    /// Desk-scale standard task: 4 objects × 2000 references, 128 anchors,
    /// moderately noisy queries near the references.
    pub fn standard(seed: u64) -> Self {
        SynthTaskSpec {
            seed,
            objects: 4,
            refs_per_object: 2000,
            anchors_per_object: 128,
            queries: 200,
            placement: QueryPlacement::Perturbed { max_deg: 5.0 },
            feature_noise: 0.05,
            outlier_fraction: 0.05,
            extractor: ExtractorConfig::default(),
            local_norm: Some(NormConfig::default()),
        }
    }
}

/// A labeled query: ground truth plus the (possibly corrupted) pyramid.
#[derive(Debug, Clone)]
pub struct LabeledQuery {
    pub id: usize,
    pub object_index: usize,
    pub category: String,
    pub rotation: Rotation,
    pub pyramid: FeaturePyramid,
}

/// Generated task: the reference database and the labeled query set.
#[derive(Debug)]
pub struct SynthTask {
    pub spec: SynthTaskSpec,
    pub db: ReferenceDB,
    pub queries: Vec<LabeledQuery>,
}

// Stream tags for deriving independent sub-seeds from the task seed.
const TAG_OBJECT_MODEL: u64 = 1;
const TAG_REF_ROTATIONS: u64 = 2;
const TAG_QUERY: u64 = 3;
const TAG_TRAIN_ANCHOR: u64 = 4;
const TAG_BACKGROUND: u64 = 5;

/// splitmix64-style seed derivation keyed by (base, tag, index).
pub(crate) fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base
        ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Blob {
    point: Vector3<f64>,
    amplitude: f64,
    sigma: f64,
}

/// A procedural object: a constellation of Gaussian blobs on the unit sphere.
/// Rendering is a smooth function of the rotation, so nearby orientations
/// produce nearby images.
pub struct ObjectModel {
    blobs: Vec<Blob>,
}

const BLOBS_PER_OBJECT: usize = 48;
const PROJECTION_SCALE: f64 = 48.0;

impl ObjectModel {
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let blobs = (0..BLOBS_PER_OBJECT)
            .map(|_| {
                let mut p = Vector3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                );
                if p.norm() < 1e-9 {
                    p = Vector3::x();
                }
                Blob {
                    point: p.normalize(),
                    amplitude: rng.gen_range(0.4..1.0),
                    sigma: rng.gen_range(3.0..6.0),
                }
            })
            .collect();
        ObjectModel { blobs }
    }

    /// Orthographic render of the rotated constellation; blobs fade smoothly
    /// as they turn away from the camera.
    pub fn render(&self, rotation: &Rotation) -> GrayImage {
        let mut img = GrayImage::constant(STANDARD_SIZE, STANDARD_SIZE, 0.0);
        let half = STANDARD_SIZE as f64 / 2.0;
        for blob in &self.blobs {
            let q = rotation.matrix() * blob.point;
            let cx = half + PROJECTION_SCALE * q.x;
            let cy = half + PROJECTION_SCALE * q.y;
            let vis = 1.0 / (1.0 + (-4.0 * q.z).exp());
            let gain = blob.amplitude * vis;
            if gain < 1e-4 {
                continue;
            }
            let reach = (3.0 * blob.sigma).ceil() as isize;
            let x0 = ((cx as isize) - reach).max(0);
            let x1 = ((cx as isize) + reach).min(STANDARD_SIZE as isize - 1);
            let y0 = ((cy as isize) - reach).max(0);
            let y1 = ((cy as isize) + reach).min(STANDARD_SIZE as isize - 1);
            let inv2s2 = 1.0 / (2.0 * blob.sigma * blob.sigma);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let dx = x as f64 - cx;
                    let dy = y as f64 - cy;
                    let v = gain * (-(dx * dx + dy * dy) * inv2s2).exp();
                    img.set(y as usize, x as usize, img.get(y as usize, x as usize) + v);
                }
            }
        }
        img
    }
}

fn render_pyramid(model: &ObjectModel, rotation: &Rotation, spec: &SynthTaskSpec) -> FeaturePyramid {
    let img = model.render(rotation);
    let img = match &spec.local_norm {
        Some(cfg) => local_normalize(&img, cfg),
        None => img,
    };
    extract(&img, &spec.extractor)
}

fn random_rotation(rng: &mut ChaCha20Rng) -> Rotation {
    loop {
        let a = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let b = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        if let Ok(r) = from_sixd(&SixDRep { a, b }) {
            return r;
        }
    }
}

fn perturb_rotation(base: &Rotation, max_deg: f64, rng: &mut ChaCha20Rng) -> Rotation {
    let mut axis = Vector3::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    );
    if axis.norm() < 1e-9 {
        axis = Vector3::z();
    }
    let angle = rng.gen_range(0.0..max_deg.to_radians());
    let delta = Rotation::from_axis_angle(&axis, angle);
    Rotation::from_matrix(delta.matrix() * base.matrix())
        .expect("product of rotations is a rotation")
}

/// Corrupt a query pyramid in place: additive feature noise, then overwrite
/// `⌊outlier_fraction·H·W⌋` locations per scale with the background pyramid's
/// vectors at the same locations.
fn corrupt_pyramid(
    pyramid: &mut FeaturePyramid,
    background: Option<&FeaturePyramid>,
    spec: &SynthTaskSpec,
    rng: &mut ChaCha20Rng,
) {
    if spec.feature_noise > 0.0 {
        for scale in &mut pyramid.scales {
            for v in &mut scale.data {
                *v += (spec.feature_noise * rng.sample::<f64, _>(StandardNormal)) as f32;
            }
        }
    }
    if spec.outlier_fraction > 0.0 {
        let background = background.expect("background pyramid required for outliers");
        for (scale, bg) in pyramid.scales.iter_mut().zip(&background.scales) {
            let locations = scale.height * scale.width;
            let count = (spec.outlier_fraction * locations as f64).floor() as usize;
            // Partial Fisher-Yates over the location indices.
            let mut indices: Vec<usize> = (0..locations).collect();
            for i in 0..count {
                let j = rng.gen_range(i..locations);
                indices.swap(i, j);
            }
            let _c = scale.channels;
            for &loc in &indices[..count] {
                let (y, x) = (loc / scale.width, loc % scale.width);
                scale.at_mut(y, x).copy_from_slice(bg.at(y, x));
            }
        }
    }
}

/// Generate a complete task from its spec. Deterministic: each object model,
/// reference rotation set, and query draws from its own derived seed, so the
/// reference sets for a smaller `refs_per_object` are prefixes of larger ones
/// and query sets are independent of the reference count under
/// [`QueryPlacement::Uniform`].
pub fn gen_task(spec: &SynthTaskSpec) -> Result<SynthTask, EvalError> {
    spec.extractor
        .validate()
        .map_err(crate::refdb::DbError::Pyramid)?;

    let models: Vec<ObjectModel> = (0..spec.objects)
        .map(|o| ObjectModel::generate(derive_seed(spec.seed, TAG_OBJECT_MODEL, o as u64)))
        .collect();

    let sources: Vec<ObjectSource> = models
        .iter()
        .enumerate()
        .map(|(o, model)| {
            let rotations = sample_rotations(
                spec.refs_per_object,
                derive_seed(spec.seed, TAG_REF_ROTATIONS, o as u64),
            );
            let references: Vec<(Rotation, FeaturePyramid)> = rotations
                .into_par_iter()
                .map(|rot| (rot, render_pyramid(model, &rot, spec)))
                .collect();
            ObjectSource {
                category: format!("object-{o:02}"),
                references,
            }
        })
        .collect();

    let db = build(sources, spec.anchors_per_object)?;

    let background = ObjectModel::generate(derive_seed(spec.seed, TAG_BACKGROUND, 0));
    let queries: Vec<LabeledQuery> = (0..spec.queries)
        .into_par_iter()
        .map(|qid| {
            let mut rng =
                ChaCha20Rng::seed_from_u64(derive_seed(spec.seed, TAG_QUERY, qid as u64));
            let object_index = rng.gen_range(0..spec.objects);
            let (rotation, mut pyramid) = match spec.placement {
                QueryPlacement::OnReference => {
                    let entry_idx = rng.gen_range(0..spec.refs_per_object);
                    let entry = &db.objects[object_index].entries[entry_idx];
                    (entry.rotation, entry.pyramid.clone())
                }
                QueryPlacement::Perturbed { max_deg } => {
                    let entry_idx = rng.gen_range(0..spec.refs_per_object);
                    let base = db.objects[object_index].entries[entry_idx].rotation;
                    let rot = perturb_rotation(&base, max_deg, &mut rng);
                    let pyr = render_pyramid(&models[object_index], &rot, spec);
                    (rot, pyr)
                }
                QueryPlacement::Uniform => {
                    let rot = random_rotation(&mut rng);
                    let pyr = render_pyramid(&models[object_index], &rot, spec);
                    (rot, pyr)
                }
            };
            let bg_pyramid = if spec.outlier_fraction > 0.0 {
                let bg_rot = random_rotation(&mut rng);
                Some(render_pyramid(&background, &bg_rot, spec))
            } else {
                None
            };
            corrupt_pyramid(&mut pyramid, bg_pyramid.as_ref(), spec, &mut rng);
            LabeledQuery {
                id: qid,
                object_index,
                category: db.objects[object_index].category.clone(),
                rotation,
                pyramid,
            }
        })
        .collect();

    Ok(SynthTask {
        spec: spec.clone(),
        db,
        queries,
    })
}

// ── Training sets ─────────────────────────────────────────────────────────

/// One training anchor: an owned query pyramid plus candidate references
/// identified by (object, entry) index into the task database.
#[derive(Debug, Clone)]
pub struct TrainAnchor {
    pub pyramid: FeaturePyramid,
    pub rotation: Rotation,
    pub object_index: usize,
    pub candidates: Vec<(usize, usize)>,
    pub positive: usize,
}

/// An owned training set; borrow [`TrainSet::examples`] to feed the fitter.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub anchors: Vec<TrainAnchor>,
}

impl TrainSet {
    pub fn examples<'a>(&'a self, db: &'a ReferenceDB) -> Vec<TrainExample<'a>> {
        self.anchors
            .iter()
            .map(|anchor| TrainExample {
                query: &anchor.pyramid,
                rotation: anchor.rotation,
                category: anchor.object_index as u32,
                candidates: anchor
                    .candidates
                    .iter()
                    .map(|&(obj, entry)| {
                        let e = &db.objects[obj].entries[entry];
                        TrainCandidate {
                            pyramid: &e.pyramid,
                            rotation: e.rotation,
                            category: obj as u32,
                        }
                    })
                    .collect(),
                positive: anchor.positive,
            })
            .collect()
    }
}

/// Build `anchor_count` training anchors from the task generator: each anchor
/// is produced like a query, paired with its closest same-object reference as
/// the positive, and grouped with `3·batch_size − 1` random references.
pub fn gen_train_set(
    task: &SynthTask,
    anchor_count: usize,
    batch_size: usize,
    train_seed: u64,
) -> TrainSet {
    let spec = &task.spec;
    let models: Vec<ObjectModel> = (0..spec.objects)
        .map(|o| ObjectModel::generate(derive_seed(spec.seed, TAG_OBJECT_MODEL, o as u64)))
        .collect();
    let background = ObjectModel::generate(derive_seed(spec.seed, TAG_BACKGROUND, 0));
    let candidates_per_anchor = 3 * batch_size;

    let anchors: Vec<TrainAnchor> = (0..anchor_count)
        .into_par_iter()
        .map(|a| {
            let mut rng =
                ChaCha20Rng::seed_from_u64(derive_seed(train_seed, TAG_TRAIN_ANCHOR, a as u64));
            let object_index = rng.gen_range(0..spec.objects);
            let entry_idx = rng.gen_range(0..spec.refs_per_object);
            let base = task.db.objects[object_index].entries[entry_idx].rotation;
            let rotation = match spec.placement {
                QueryPlacement::Uniform => random_rotation(&mut rng),
                QueryPlacement::OnReference => base,
                QueryPlacement::Perturbed { max_deg } => {
                    perturb_rotation(&base, max_deg, &mut rng)
                }
            };
            let mut pyramid = render_pyramid(&models[object_index], &rotation, spec);
            let bg_pyramid = if spec.outlier_fraction > 0.0 {
                let bg_rot = random_rotation(&mut rng);
                Some(render_pyramid(&background, &bg_rot, spec))
            } else {
                None
            };
            corrupt_pyramid(&mut pyramid, bg_pyramid.as_ref(), spec, &mut rng);

            // Positive: nearest same-object reference by geodesic distance.
            let positive_entry = task.db.objects[object_index]
                .entries
                .iter()
                .enumerate()
                .min_by(|(_, x), (_, y)| {
                    geodesic_distance(&rotation, &x.rotation)
                        .total_cmp(&geodesic_distance(&rotation, &y.rotation))
                })
                .map(|(i, _)| i)
                .expect("object has references");

            let mut candidates = Vec::with_capacity(candidates_per_anchor);
            candidates.push((object_index, positive_entry));
            while candidates.len() < candidates_per_anchor {
                let obj = rng.gen_range(0..spec.objects);
                let entry = rng.gen_range(0..spec.refs_per_object);
                if (obj, entry) == (object_index, positive_entry) {
                    continue;
                }
                candidates.push((obj, entry));
            }
            TrainAnchor {
                pyramid,
                rotation,
                object_index,
                candidates,
                positive: 0,
            }
        })
        .collect();

    TrainSet { anchors }
}

// ── Closed-form score fields ──────────────────────────────────────────────

/// Encode `(object, rotation)` into a tiny pyramid whose average-variant
/// pairwise score is a closed-form function of the geodesic distance:
/// same object  → (1 + tr(R₁ᵀR₂)/3) / 2 = (2cos(πd) + 4)/6, strictly
/// decreasing in d; different objects → at most 1/2. Every location carries
/// `vec(R)/√3` in the first nine channels and an object indicator channel.
pub fn unimodal_encode(num_objects: usize, object: usize, rotation: &Rotation) -> FeaturePyramid {
    let channels = 9 + num_objects;
    let mut map = ScaleMap::zeros(2, 2, channels);
    let row = rotation.to_row_major();
    let alpha = std::f64::consts::FRAC_1_SQRT_2 / 3.0f64.sqrt();
    let beta = std::f64::consts::FRAC_1_SQRT_2;
    for y in 0..2 {
        for x in 0..2 {
            let cell = map.at_mut(y, x);
            for (c, v) in row.iter().enumerate() {
                cell[c] = (alpha * v) as f32;
            }
            cell[9 + object] = beta as f32;
        }
    }
    FeaturePyramid { scales: vec![map] }
}

/// Database over which every object's score field (average variant) is
/// strictly decreasing in geodesic distance from the query rotation, with
/// cross-object scores bounded away from the same-object optimum.
pub fn gen_unimodal_db(
    seed: u64,
    objects: usize,
    refs_per_object: usize,
    k_ac: usize,
) -> Result<ReferenceDB, EvalError> {
    let sources = (0..objects)
        .map(|o| {
            let rotations = sample_rotations(
                refs_per_object,
                derive_seed(seed, TAG_REF_ROTATIONS, o as u64),
            );
            ObjectSource {
                category: format!("object-{o:02}"),
                references: rotations
                    .into_iter()
                    .map(|r| (r, unimodal_encode(objects, o, &r)))
                    .collect(),
            }
        })
        .collect();
    Ok(build(sources, k_ac)?)
}
