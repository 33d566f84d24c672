//! Weighted-infoNCE loss over batched similarity scores, rotation-aware pair
//! weights, and the mini-batch gradient-descent fitter for fusion parameters.

use crate::features::FeaturePyramid;
use crate::fusion::{
    fuse, fuse_backward, similarity_maps, FusionParams, FusionVariant, SimilarityMaps,
};
use crate::so3::{geodesic_distance, Rotation};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use std::io::Write;
use thiserror::Error;

/// Default temperature of the contrastive loss.
pub const DEFAULT_TEMPERATURE: f64 = 0.1;
/// Default lower clamp on same-category pair weights. The raw weight of a
/// positive pair is its geodesic distance, which approaches zero for
/// near-identical rotations and would blow the loss up; the clamp keeps the
/// numerator finite. Configurable via [`FitConfig::weight_floor`].
pub const DEFAULT_WEIGHT_FLOOR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("bad batch: {0}")]
    BadBatch(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (loss {loss})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error(transparent)]
    Fusion(#[from] crate::fusion::FusionError),
}

/// Contrastive weight of a candidate pair: the geodesic distance (floored)
/// within the same category, 1 otherwise.
pub fn pair_weight<C: PartialEq>(ri: &Rotation, rj: &Rotation, ci: &C, cj: &C) -> f64 {
    pair_weight_with_floor(ri, rj, ci, cj, DEFAULT_WEIGHT_FLOOR)
}

pub fn pair_weight_with_floor<C: PartialEq>(
    ri: &Rotation,
    rj: &Rotation,
    ci: &C,
    cj: &C,
    floor: f64,
) -> f64 {
    if ci == cj {
        geodesic_distance(ri, rj).max(floor)
    } else {
        1.0
    }
}

/// Scores and weights of one anchor against its candidate list; `positive`
/// indexes the anchor's positive pair.
#[derive(Debug, Clone)]
pub struct AnchorScores {
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
    pub positive: usize,
}

/// A scored mini-batch: each anchor carries the same number of candidates
/// (3·B under the triplet construction).
#[derive(Debug, Clone)]
pub struct Batch {
    pub temperature: f64,
    pub samples: Vec<AnchorScores>,
}

impl Batch {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.samples.is_empty() {
            return Err(LossError::BadBatch("no samples".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(LossError::BadBatch(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        let len = self.samples[0].scores.len();
        for (i, s) in self.samples.iter().enumerate() {
            if s.scores.len() != len || s.weights.len() != len {
                return Err(LossError::BadBatch(format!(
                    "sample {i} has inconsistent candidate count"
                )));
            }
            if s.positive >= len {
                return Err(LossError::BadBatch(format!(
                    "sample {i} positive index {} out of range",
                    s.positive
                )));
            }
            if s.scores.iter().any(|v| !v.is_finite()) {
                return Err(LossError::BadBatch(format!("sample {i} non-finite score")));
            }
            if s.weights.iter().any(|&w| !(w > 0.0)) {
                return Err(LossError::BadBatch(format!(
                    "sample {i} has a non-positive weight"
                )));
            }
        }
        Ok(())
    }
}

/// Mean over anchors of `−log[exp(s_ij/τ)·w_ij / Σ_k exp(s_ik/τ)·w_ik]`,
/// stabilized by subtracting the per-anchor maximum of `s/τ`.
pub fn loss(batch: &Batch) -> f64 {
    let tau = batch.temperature;
    let mut total = 0.0;
    for sample in &batch.samples {
        let m = sample
            .scores
            .iter()
            .map(|s| s / tau)
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = sample
            .scores
            .iter()
            .zip(&sample.weights)
            .map(|(s, w)| (s / tau - m).exp() * w)
            .sum();
        let numer =
            (sample.scores[sample.positive] / tau - m).exp() * sample.weights[sample.positive];
        total += -(numer / denom).ln();
    }
    total / batch.samples.len() as f64
}

/// Exact gradients `∂loss/∂s_ik` for every score, in batch layout.
///
/// Per anchor: `(p̃_k − [k = positive]) / (τ·B)` with `p̃` the weighted
/// softmax over that anchor's scores.
pub fn loss_grad(batch: &Batch) -> Vec<Vec<f64>> {
    let tau = batch.temperature;
    let b = batch.samples.len() as f64;
    batch
        .samples
        .iter()
        .map(|sample| {
            let m = sample
                .scores
                .iter()
                .map(|s| s / tau)
                .fold(f64::NEG_INFINITY, f64::max);
            let unnorm: Vec<f64> = sample
                .scores
                .iter()
                .zip(&sample.weights)
                .map(|(s, w)| (s / tau - m).exp() * w)
                .collect();
            let total: f64 = unnorm.iter().sum();
            unnorm
                .iter()
                .enumerate()
                .map(|(k, u)| {
                    let p = u / total;
                    let indicator = if k == sample.positive { 1.0 } else { 0.0 };
                    (p - indicator) / (tau * b)
                })
                .collect()
        })
        .collect()
}

// ── Fitting ───────────────────────────────────────────────────────────────

/// Gradient-descent settings for [`fit_fusion`].
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub temperature: f64,
    pub variant: FusionVariant,
    /// Use the rotation-aware pair weights; plain infoNCE otherwise.
    pub weighted: bool,
    pub weight_floor: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 16,
            seed: 0,
            temperature: DEFAULT_TEMPERATURE,
            variant: FusionVariant::Adaptive,
            weighted: true,
            weight_floor: DEFAULT_WEIGHT_FLOOR,
        }
    }
}

/// One candidate of a training anchor.
#[derive(Debug, Clone, Copy)]
pub struct TrainCandidate<'a> {
    pub pyramid: &'a FeaturePyramid,
    pub rotation: Rotation,
    pub category: u32,
}

/// A training anchor: the query pyramid plus its candidate list, one of which
/// (`positive`) is the closest same-category reference.
#[derive(Debug, Clone)]
pub struct TrainExample<'a> {
    pub query: &'a FeaturePyramid,
    pub rotation: Rotation,
    pub category: u32,
    pub candidates: Vec<TrainCandidate<'a>>,
    pub positive: usize,
}

/// Fitted parameters plus the per-epoch mean loss trace.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub params: FusionParams,
    pub epoch_losses: Vec<f64>,
}

struct AnchorPass {
    sample: AnchorScores,
    maps: Vec<SimilarityMaps>,
}

/// Mini-batch gradient descent on the fusion parameters under the
/// (optionally weighted) infoNCE loss. Deterministic for a fixed seed.
pub fn fit_fusion(
    examples: &[TrainExample<'_>],
    cfg: &FitConfig,
    init: &FusionParams,
) -> Result<FitReport, LossError> {
    if examples.is_empty() {
        return Err(LossError::EmptyTrainingSet);
    }
    if !cfg.variant.is_learned() {
        return Err(LossError::Fusion(crate::fusion::FusionError::NotLearnable(
            cfg.variant,
        )));
    }
    for (i, ex) in examples.iter().enumerate() {
        if ex.candidates.is_empty() || ex.positive >= ex.candidates.len() {
            return Err(LossError::BadBatch(format!(
                "example {i}: {} candidates, positive {}",
                ex.candidates.len(),
                ex.positive
            )));
        }
    }

    let mut params = init.clone();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;

        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            // Forward: score every candidate of every anchor in the chunk.
            // Ordered collect keeps the reduction deterministic under rayon.
            let passes: Result<Vec<AnchorPass>, LossError> = chunk
                .par_iter()
                .map(|&ex_idx| {
                    let ex = &examples[ex_idx];
                    let mut scores = Vec::with_capacity(ex.candidates.len());
                    let mut weights = Vec::with_capacity(ex.candidates.len());
                    let mut maps = Vec::with_capacity(ex.candidates.len());
                    for cand in &ex.candidates {
                        let m = similarity_maps(ex.query, cand.pyramid)?;
                        scores.push(fuse(&m, &params, cfg.variant));
                        maps.push(m);
                        weights.push(if cfg.weighted {
                            pair_weight_with_floor(
                                &ex.rotation,
                                &cand.rotation,
                                &ex.category,
                                &cand.category,
                                cfg.weight_floor,
                            )
                        } else {
                            1.0
                        });
                    }
                    Ok(AnchorPass {
                        sample: AnchorScores {
                            scores,
                            weights,
                            positive: ex.positive,
                        },
                        maps,
                    })
                })
                .collect();
            let passes = passes?;

            let batch = Batch {
                temperature: cfg.temperature,
                samples: passes.iter().map(|p| p.sample.clone()).collect(),
            };
            batch.validate()?;
            let batch_loss = loss(&batch);
            if !batch_loss.is_finite() {
                return Err(LossError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    loss: batch_loss,
                });
            }
            epoch_loss += batch_loss * chunk.len() as f64;

            let score_grads = loss_grad(&batch);

            // Backward per anchor in parallel, then a sequential sum so the
            // result does not depend on thread scheduling.
            let partials: Result<Vec<FusionParams>, LossError> = passes
                .par_iter()
                .zip(&score_grads)
                .map(|(pass, grads)| {
                    let mut acc = params.zeros_like();
                    for (m, &g) in pass.maps.iter().zip(grads) {
                        if g == 0.0 {
                            continue;
                        }
                        let gp = fuse_backward(m, &params, cfg.variant, g)?;
                        acc.add_scaled(&gp, 1.0);
                    }
                    Ok(acc)
                })
                .collect();
            let mut total_grad = params.zeros_like();
            for p in partials? {
                total_grad.add_scaled(&p, 1.0);
            }

            params.add_scaled(&total_grad, -cfg.learning_rate);
            if !params.is_finite() {
                return Err(LossError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    loss: f64::NAN,
                });
            }
        }

        history.push(epoch_loss / examples.len() as f64);
    }

    Ok(FitReport {
        params,
        epoch_losses: history,
    })
}

/// Write the loss trace as `epoch,mean_loss` CSV.
pub fn write_loss_history_csv<W: Write>(history: &[f64], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "epoch,mean_loss")?;
    for (epoch, l) in history.iter().enumerate() {
        writeln!(out, "{epoch},{l}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::ScaleMap;
    use crate::so3::sample_rotations;
    use nalgebra::Vector3;
    use rand::Rng;

    fn uniform_batch(b: usize) -> Batch {
        Batch {
            temperature: DEFAULT_TEMPERATURE,
            samples: (0..b)
                .map(|_| AnchorScores {
                    scores: vec![0.3; 3 * b],
                    weights: vec![1.0; 3 * b],
                    positive: 0,
                })
                .collect(),
        }
    }

    fn random_batch(seed: u64, b: usize) -> Batch {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Batch {
            temperature: DEFAULT_TEMPERATURE,
            samples: (0..b)
                .map(|_| {
                    let n = 3 * b;
                    AnchorScores {
                        scores: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                        weights: (0..n).map(|_| rng.gen_range(0.05..1.0)).collect(),
                        positive: rng.gen_range(0..n),
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn pair_weight_branches() {
        let rots = sample_rotations(2, 5);
        // Different categories always weigh 1.
        assert_eq!(pair_weight(&rots[0], &rots[1], &0u32, &1u32), 1.0);
        // Same category: the geodesic distance. A quarter turn is 0.5.
        let rz90 = Rotation::from_axis_angle(&Vector3::z(), std::f64::consts::FRAC_PI_2);
        let d = pair_weight(&Rotation::identity(), &rz90, &0u32, &0u32);
        assert!((d - 0.5).abs() < 1e-12);
        // Identical rotations clamp to the floor instead of 0.
        let w = pair_weight(&rots[0], &rots[0], &0u32, &0u32);
        assert_eq!(w, DEFAULT_WEIGHT_FLOOR);
    }

    #[test]
    fn uniform_batch_loss_is_ln_3b() {
        let batch = uniform_batch(2);
        assert!((loss(&batch) - 6.0f64.ln()).abs() < 1e-9);
        let batch = uniform_batch(16);
        assert!((loss(&batch) - 48.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn dominant_positive_drives_loss_to_zero() {
        let mut batch = uniform_batch(2);
        batch.samples[0].scores[0] = 100.0;
        batch.samples[1].scores[0] = 100.0;
        assert!(loss(&batch) < 1e-9);
    }

    #[test]
    fn scalar_hand_evaluated_case() {
        // B = 1, scores (1, 0, 0), τ = 0.1, uniform weights:
        // ℓ = −log(e^10 / (e^10 + 2)) = log(1 + 2e^−10).
        let batch = Batch {
            temperature: 0.1,
            samples: vec![AnchorScores {
                scores: vec![1.0, 0.0, 0.0],
                weights: vec![1.0; 3],
                positive: 0,
            }],
        };
        let expected = (2.0 * (-10.0f64).exp()).ln_1p();
        assert!((loss(&batch) - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_is_shift_invariant() {
        for seed in 0..20u64 {
            let batch = random_batch(seed, 4);
            let base = loss(&batch);
            let mut shifted = batch.clone();
            for s in &mut shifted.samples {
                for v in &mut s.scores {
                    *v += 7.25;
                }
            }
            assert!((loss(&shifted) - base).abs() < 1e-9);
        }
    }

    #[test]
    fn lowering_the_positive_score_increases_loss() {
        for seed in 0..100u64 {
            let batch = random_batch(seed, 3);
            let base = loss(&batch);
            let mut worse = batch.clone();
            for s in &mut worse.samples {
                let p = s.positive;
                s.scores[p] -= 0.2;
            }
            assert!(loss(&worse) > base);
        }
    }

    #[test]
    fn uniform_gradient_matches_closed_form() {
        let b = 2;
        let batch = uniform_batch(b);
        let grads = loss_grad(&batch);
        let expected = (1.0 / batch.temperature) * (1.0 / (3.0 * b as f64) - 1.0) / b as f64;
        for g in &grads {
            assert!((g[0] - expected).abs() < 1e-12, "positive grad {}", g[0]);
        }
    }

    #[test]
    fn gradients_sum_to_zero_per_anchor() {
        for seed in 0..20u64 {
            let batch = random_batch(seed, 4);
            for g in loss_grad(&batch) {
                let sum: f64 = g.iter().sum();
                assert!(sum.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20u64 {
            let batch = random_batch(seed, 3);
            let analytic = loss_grad(&batch);
            let step = 1e-4;
            let mut worst = 0.0f64;
            for (i, sample_grads) in analytic.iter().enumerate() {
                for (k, &a) in sample_grads.iter().enumerate() {
                    let mut plus = batch.clone();
                    plus.samples[i].scores[k] += step;
                    let mut minus = batch.clone();
                    minus.samples[i].scores[k] -= step;
                    let n = (loss(&plus) - loss(&minus)) / (2.0 * step);
                    worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-6));
                }
            }
            assert!(worst < 1e-3, "seed {seed}: max rel err {worst}");
        }
    }

    #[test]
    fn batch_validation_rejects_malformed_input() {
        let mut batch = uniform_batch(2);
        batch.samples[0].positive = 99;
        assert!(batch.validate().is_err());
        let mut batch = uniform_batch(2);
        batch.temperature = 0.0;
        assert!(batch.validate().is_err());
        let mut batch = uniform_batch(2);
        batch.samples[1].scores[0] = f64::NAN;
        assert!(batch.validate().is_err());
    }

    // Small synthetic training setup shared by the fit tests.
    fn tiny_pyramids(seed: u64, count: usize) -> Vec<FeaturePyramid> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| FeaturePyramid {
                scales: vec![
                    {
                        let mut m = ScaleMap::zeros(3, 3, 4);
                        for v in &mut m.data {
                            *v = rng.gen_range(-1.0f32..1.0);
                        }
                        m
                    },
                    {
                        let mut m = ScaleMap::zeros(5, 5, 4);
                        for v in &mut m.data {
                            *v = rng.gen_range(-1.0f32..1.0);
                        }
                        m
                    },
                ],
            })
            .collect()
    }

    fn tiny_examples<'a>(
        pyramids: &'a [FeaturePyramid],
        rotations: &[Rotation],
    ) -> Vec<TrainExample<'a>> {
        // Anchor i: query = pyramid i, positive = itself among 6 candidates.
        (0..4)
            .map(|i| {
                let candidates: Vec<TrainCandidate<'a>> = (0..6)
                    .map(|k| {
                        let idx = (i + k) % pyramids.len();
                        TrainCandidate {
                            pyramid: &pyramids[idx],
                            rotation: rotations[idx],
                            category: (idx % 2) as u32,
                        }
                    })
                    .collect();
                TrainExample {
                    query: &pyramids[i],
                    rotation: rotations[i],
                    category: (i % 2) as u32,
                    candidates,
                    positive: 0,
                }
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_keeps_params_and_loss_constant() {
        let pyramids = tiny_pyramids(1, 8);
        let rotations = sample_rotations(8, 2);
        let examples = tiny_examples(&pyramids, &rotations);
        let init = FusionParams::random_init(2, 4, 8, 3);
        let cfg = FitConfig {
            learning_rate: 0.0,
            epochs: 3,
            batch_size: 2,
            ..FitConfig::default()
        };
        let report = fit_fusion(&examples, &cfg, &init).unwrap();
        assert_eq!(report.params, init);
        for w in report.epoch_losses.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_is_deterministic_for_fixed_seed() {
        let pyramids = tiny_pyramids(4, 8);
        let rotations = sample_rotations(8, 5);
        let examples = tiny_examples(&pyramids, &rotations);
        let init = FusionParams::random_init(2, 4, 8, 6);
        let cfg = FitConfig {
            epochs: 4,
            batch_size: 2,
            learning_rate: 1e-2,
            seed: 9,
            ..FitConfig::default()
        };
        let a = fit_fusion(&examples, &cfg, &init).unwrap();
        let b = fit_fusion(&examples, &cfg, &init).unwrap();
        assert_eq!(a.epoch_losses, b.epoch_losses);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn zero_epochs_returns_init_and_empty_history() {
        let pyramids = tiny_pyramids(1, 8);
        let rotations = sample_rotations(8, 2);
        let examples = tiny_examples(&pyramids, &rotations);
        let init = FusionParams::random_init(2, 4, 8, 3);
        let cfg = FitConfig {
            epochs: 0,
            ..FitConfig::default()
        };
        let report = fit_fusion(&examples, &cfg, &init).unwrap();
        assert_eq!(report.params, init);
        assert!(report.epoch_losses.is_empty());

        let mut csv = Vec::new();
        write_loss_history_csv(&report.epoch_losses, &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap(), "epoch,mean_loss\n");
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let init = FusionParams::zeros(2, 4, 8);
        assert!(matches!(
            fit_fusion(&[], &FitConfig::default(), &init),
            Err(LossError::EmptyTrainingSet)
        ));
    }
}
