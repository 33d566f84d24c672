//! Finite-difference verification of the analytic gradients: the fusion
//! backward pass and the loss score gradients, checked on seeded random
//! instances.

use super::synth::derive_seed;
use crate::features::{FeaturePyramid, ScaleMap};
use crate::fusion::{fuse, fuse_backward, similarity_maps, FusionParams, FusionVariant};
use crate::loss::{loss, loss_grad, AnchorScores, Batch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub fusion_max_rel_err: f64,
    pub loss_max_rel_err: f64,
    pub instances: usize,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.fusion_max_rel_err.max(self.loss_max_rel_err)
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn random_pyramid(dims: &[(usize, usize)], channels: usize, rng: &mut ChaCha20Rng) -> FeaturePyramid {
    FeaturePyramid {
        scales: dims
            .iter()
            .map(|&(h, w)| {
                let mut m = ScaleMap::zeros(h, w, channels);
                for v in &mut m.data {
                    *v = rng.gen_range(-1.0f32..1.0);
                }
                m
            })
            .collect(),
    }
}

/// Check `fuse_backward` against central finite differences on one seeded
/// random instance; returns the max relative error over all parameters.
pub fn check_fusion_instance(seed: u64, variant: FusionVariant) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let dims = [(3usize, 3usize), (5, 5)];
    let channels = 4;
    let a = random_pyramid(&dims, channels, &mut rng);
    let b = random_pyramid(&dims, channels, &mut rng);
    let maps = similarity_maps(&a, &b).expect("matching layouts");
    let params = FusionParams::random_init(dims.len(), channels, 8, seed ^ 0xABCD);

    let analytic = fuse_backward(&maps, &params, variant, 1.0)
        .expect("learned variant")
        .flatten();
    let flat = params.flatten();
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for (i, &a_i) in analytic.iter().enumerate() {
        let mut plus = flat.clone();
        plus[i] += FD_STEP;
        probe.assign_flat(&plus);
        let fp = fuse(&maps, &probe, variant);
        let mut minus = flat.clone();
        minus[i] -= FD_STEP;
        probe.assign_flat(&minus);
        let fm = fuse(&maps, &probe, variant);
        worst = worst.max(rel_err(a_i, (fp - fm) / (2.0 * FD_STEP)));
    }
    worst
}

/// Check `loss_grad` against central finite differences on one seeded random
/// batch; returns the max relative error over all scores.
pub fn check_loss_instance(seed: u64) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let b = 3usize;
    let batch = Batch {
        temperature: 0.1,
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
    };
    let analytic = loss_grad(&batch);
    let mut worst = 0.0f64;
    for (i, sample) in analytic.iter().enumerate() {
        for (k, &a) in sample.iter().enumerate() {
            let mut plus = batch.clone();
            plus.samples[i].scores[k] += FD_STEP;
            let mut minus = batch.clone();
            minus.samples[i].scores[k] -= FD_STEP;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}

/// Run `instances` seeded checks of both gradient paths. The fusion variants
/// cycle through adaptive / sigmoid-only / softmax-only.
pub fn run_gradient_check(seed: u64, instances: usize) -> GradCheckReport {
    let variants = [
        FusionVariant::Adaptive,
        FusionVariant::SigmoidOnly,
        FusionVariant::SoftmaxOnly,
    ];
    let mut fusion_worst = 0.0f64;
    let mut loss_worst = 0.0f64;
    for i in 0..instances {
        let inst_seed = derive_seed(seed, 0x6AD, i as u64);
        fusion_worst = fusion_worst.max(check_fusion_instance(inst_seed, variants[i % 3]));
        loss_worst = loss_worst.max(check_loss_instance(inst_seed ^ 0x5555));
    }
    GradCheckReport {
        fusion_max_rel_err: fusion_worst,
        loss_max_rel_err: loss_worst,
        instances,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_check_passes_on_default_instances() {
        let report = run_gradient_check(1, 6);
        assert!(
            report.max_rel_err() < 1e-3,
            "max rel err {}",
            report.max_rel_err()
        );
    }
}
