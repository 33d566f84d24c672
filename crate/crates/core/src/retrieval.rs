//! Query answering over a reference database: exhaustive greedy search (the
//! correctness oracle), anchor-based category recognition, and the iterative
//! coarse-to-fine fast retrieval with a halving rank-radius schedule.

use crate::features::FeaturePyramid;
use crate::fusion::{score_pair, FusionParams, FusionVariant, ScoreScratch};
use crate::refdb::ReferenceDB;
use crate::so3::{fps_select, geodesic_distance, Rotation};
use rayon::prelude::*;
use std::collections::HashMap;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("parameters sized for {params_scales} scales × {params_channels} channels, database uses {db:?}")]
    ParamsMismatch {
        params_scales: usize,
        params_channels: usize,
        db: crate::features::PyramidLayout,
    },
    #[error(transparent)]
    Fusion(#[from] crate::fusion::FusionError),
}

/// Outcome of one retrieval: the predicted category, the retrieved reference
/// and its rotation, plus cost counters.
#[derive(Debug, Clone)]
pub struct RetrievalResult {
    pub category: String,
    pub object_index: usize,
    pub ref_index: usize,
    pub rotation: Rotation,
    pub score: f64,
    /// Number of fusion evaluations performed for this query.
    pub comparisons: u64,
    pub elapsed_s: f64,
}

/// Settings of the fast retrieval refinement.
#[derive(Debug, Clone)]
pub struct FastConfig {
    /// Candidates selected by FPS per refinement iteration.
    pub k_local: usize,
    /// Iteration cap; `None` means ⌈log2 R⌉ for the recognized object.
    pub max_iters: Option<usize>,
}

impl Default for FastConfig {
    fn default() -> Self {
        FastConfig {
            k_local: 32,
            max_iters: None,
        }
    }
}

/// Category recognition outcome: per-object anchor scores and the winner.
#[derive(Debug, Clone)]
pub struct CategoryMatch {
    pub object_index: usize,
    pub category: String,
    /// Entry index (within the winning object) of the best anchor.
    pub anchor_entry: usize,
    pub anchor_score: f64,
    /// Scores aligned with each object's `anchor_ids`.
    pub anchor_scores: Vec<Vec<f64>>,
    pub comparisons: u64,
}

fn check_inputs(
    query: &FeaturePyramid,
    db: &ReferenceDB,
    params: &FusionParams,
    variant: FusionVariant,
) -> Result<(), RetrievalError> {
    if query.layout() != db.layout {
        return Err(RetrievalError::ShapeMismatch(format!(
            "query layout {:?} vs database layout {:?}",
            query.layout(),
            db.layout
        )));
    }
    if variant.is_learned() && !params.matches_layout(&db.layout) {
        return Err(RetrievalError::ParamsMismatch {
            params_scales: params.num_scales(),
            params_channels: params.channels,
            db: db.layout.clone(),
        });
    }
    Ok(())
}

/// Score the query against every reference of every object and return the
/// global argmax (ties: lowest object index, then lowest reference index).
/// Performs exactly `N·R` fusion evaluations.
pub fn greedy_search(
    query: &FeaturePyramid,
    db: &ReferenceDB,
    params: &FusionParams,
    variant: FusionVariant,
) -> Result<RetrievalResult, RetrievalError> {
    check_inputs(query, db, params, variant)?;
    let start = Instant::now();

    let mut comparisons = 0u64;
    let mut best: Option<(f64, usize, usize)> = None;
    for (obj_idx, obj) in db.objects.iter().enumerate() {
        // Parallel scoring, sequential argmax for deterministic tie-breaks.
        let scores: Result<Vec<f64>, RetrievalError> = obj
            .entries
            .par_iter()
            .map_init(ScoreScratch::default, |scratch, entry| {
                Ok(score_pair(query, &entry.pyramid, params, variant, scratch)?)
            })
            .collect();
        let scores = scores?;
        comparisons += scores.len() as u64;
        for (ref_idx, &s) in scores.iter().enumerate() {
            if best.map_or(true, |(bs, _, _)| s > bs) {
                best = Some((s, obj_idx, ref_idx));
            }
        }
    }

    let (score, obj_idx, ref_idx) = best.expect("database has at least one reference");
    Ok(RetrievalResult {
        category: db.objects[obj_idx].category.clone(),
        object_index: obj_idx,
        ref_index: ref_idx,
        rotation: db.objects[obj_idx].entries[ref_idx].rotation,
        score,
        comparisons,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}

/// Score the query against the precomputed anchors of every object; the
/// category of the best anchor wins. Performs exactly `N·k_ac` fusion
/// evaluations.
pub fn recognize_category(
    query: &FeaturePyramid,
    db: &ReferenceDB,
    params: &FusionParams,
    variant: FusionVariant,
) -> Result<CategoryMatch, RetrievalError> {
    check_inputs(query, db, params, variant)?;

    let mut comparisons = 0u64;
    let mut anchor_scores = Vec::with_capacity(db.objects.len());
    let mut best: Option<(f64, usize, usize)> = None;
    for (obj_idx, obj) in db.objects.iter().enumerate() {
        let scores: Result<Vec<f64>, RetrievalError> = obj
            .anchor_ids
            .par_iter()
            .map_init(ScoreScratch::default, |scratch, &id| {
                let entry = &obj.entries[id as usize];
                Ok(score_pair(query, &entry.pyramid, params, variant, scratch)?)
            })
            .collect();
        let scores = scores?;
        comparisons += scores.len() as u64;
        for (a, &s) in scores.iter().enumerate() {
            if best.map_or(true, |(bs, _, _)| s > bs) {
                best = Some((s, obj_idx, obj.anchor_ids[a] as usize));
            }
        }
        anchor_scores.push(scores);
    }

    let (score, obj_idx, anchor_entry) = best.expect("every object has at least one anchor");
    Ok(CategoryMatch {
        object_index: obj_idx,
        category: db.objects[obj_idx].category.clone(),
        anchor_entry,
        anchor_score: score,
        anchor_scores,
        comparisons,
    })
}

/// Anchor-seeded coarse-to-fine retrieval.
///
/// Category recognition fixes the object and the initial estimate (the best
/// initial anchor). Each refinement iteration `j` restricts the search space
/// to the `⌊R/2^j⌋` references nearest (by geodesic distance) to the current
/// estimate's rotation, draws `min(k_local, |space|)` candidates from it by
/// farthest point sampling seeded at the space's nearest member, scores them,
/// and moves the estimate to the best reference scored so far. Iteration
/// stops when the estimate survives an iteration unchanged, the space shrinks
/// below `k_local`, or `max_iters` is reached. Scores are cached per query so
/// revisited candidates cost no additional fusion evaluations.
pub fn fast_retrieve(
    query: &FeaturePyramid,
    db: &ReferenceDB,
    params: &FusionParams,
    variant: FusionVariant,
    cfg: &FastConfig,
) -> Result<RetrievalResult, RetrievalError> {
    let start = Instant::now();
    let recognition = recognize_category(query, db, params, variant)?;
    let obj_idx = recognition.object_index;
    let obj = &db.objects[obj_idx];
    let num_refs = obj.entries.len();
    let k_local = cfg.k_local.max(2);
    let max_iters = cfg
        .max_iters
        .unwrap_or_else(|| (num_refs as f64).log2().ceil() as usize)
        .max(1);

    let mut comparisons = recognition.comparisons;
    let mut cache: HashMap<u32, f64> = HashMap::new();
    for (a, &id) in obj.anchor_ids.iter().enumerate() {
        cache.insert(id, recognition.anchor_scores[obj_idx][a]);
    }

    let mut best_entry = recognition.anchor_entry;
    let mut best_score = recognition.anchor_score;

    let mut scratch = ScoreScratch::default();
    let mut score_entry = |entry_idx: usize,
                           cache: &mut HashMap<u32, f64>,
                           comparisons: &mut u64|
     -> Result<f64, RetrievalError> {
        if let Some(&s) = cache.get(&(entry_idx as u32)) {
            return Ok(s);
        }
        let s = score_pair(
            query,
            &obj.entries[entry_idx].pyramid,
            params,
            variant,
            &mut scratch,
        )?;
        cache.insert(entry_idx as u32, s);
        *comparisons += 1;
        Ok(s)
    };

    for j in 1..=max_iters {
        let radius = num_refs >> j;
        if radius == 0 {
            break;
        }

        // The `radius` nearest references to the current estimate, ordered by
        // (distance, index) for deterministic selection.
        let center = obj.entries[best_entry].rotation;
        let mut by_dist: Vec<(f64, usize)> = obj
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (geodesic_distance(&center, &e.rotation), i))
            .collect();
        by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let space: Vec<usize> = by_dist[..radius].iter().map(|&(_, i)| i).collect();

        // FPS candidates within the space, seeded at its nearest member.
        let candidates: Vec<usize> = if space.len() <= k_local {
            space.clone()
        } else {
            let rotations: Vec<Rotation> =
                space.iter().map(|&i| obj.entries[i].rotation).collect();
            let picks = fps_select(&rotations, k_local, 0)
                .expect("k_local <= space size by construction");
            picks.into_iter().map(|p| space[p]).collect()
        };

        let fully_scanned = space.len() <= k_local;
        let prev_best = best_entry;
        for entry_idx in candidates {
            let s = score_entry(entry_idx, &mut cache, &mut comparisons)?;
            if s > best_score {
                best_score = s;
                best_entry = entry_idx;
            }
        }

        // Convergence is only meaningful once the space fits in one scan: at
        // coarse radii a non-improving FPS batch says nothing about the
        // neighborhood, and stopping there strands the estimate at the
        // initial anchor. Fully scanned spaces are exact: an unchanged (or
        // sub-k_local) ball cannot improve further.
        if fully_scanned && (best_entry == prev_best || space.len() < k_local) {
            break;
        }
    }

    Ok(RetrievalResult {
        category: obj.category.clone(),
        object_index: obj_idx,
        ref_index: best_entry,
        rotation: obj.entries[best_entry].rotation,
        score: best_score,
        comparisons,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}
