//! Benchmark harness: accuracy/latency runs over labeled query sets, the
//! reference-count sweep, and the fusion/normalization/loss ablation grid.

use super::synth::{gen_task, gen_train_set, LabeledQuery, SynthTaskSpec};
use super::{class_acc, rota_acc, EvalError, EvalRecord};
use crate::fusion::{FusionParams, FusionVariant, DEFAULT_HIDDEN};
use crate::loss::{fit_fusion, FitConfig};
use crate::refdb::ReferenceDB;
use crate::retrieval::{fast_retrieve, greedy_search, FastConfig};
use crate::so3::geodesic_distance;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Retrieval strategy under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Greedy,
    Fast,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Greedy => "greedy",
            Method::Fast => "fast",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "greedy" => Ok(Method::Greedy),
            "fast" => Ok(Method::Fast),
            other => Err(format!("unknown method '{other}' (valid: greedy, fast)")),
        }
    }
}

/// Aggregate metrics of one benchmark run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub method: String,
    pub variant: String,
    pub class_acc: f64,
    pub rota_acc: f64,
    pub mean_comparisons: f64,
    pub mean_elapsed_s: f64,
    pub config: serde_json::Value,
}

/// Records plus summary of one run.
#[derive(Debug, Clone)]
pub struct BenchmarkRun {
    pub records: Vec<EvalRecord>,
    pub summary: BenchmarkSummary,
}

/// Evaluate every query with the chosen method and variant. Queries run
/// concurrently as pure reads; accuracy metrics are deterministic, latency
/// fields are not.
pub fn run_benchmark(
    db: &ReferenceDB,
    queries: &[LabeledQuery],
    method: Method,
    variant: FusionVariant,
    params: &FusionParams,
    fast_cfg: &FastConfig,
    threshold_deg: f64,
) -> Result<BenchmarkRun, EvalError> {
    let records: Result<Vec<EvalRecord>, EvalError> = queries
        .par_iter()
        .map(|q| {
            let result = match method {
                Method::Greedy => greedy_search(&q.pyramid, db, params, variant)?,
                Method::Fast => fast_retrieve(&q.pyramid, db, params, variant, fast_cfg)?,
            };
            Ok(EvalRecord {
                query_id: q.id,
                true_category: q.category.clone(),
                true_rotation: q.rotation,
                pred_category: result.category.clone(),
                pred_rotation: result.rotation,
                geodesic_error: geodesic_distance(&result.rotation, &q.rotation),
                comparisons: result.comparisons,
                elapsed_s: result.elapsed_s,
            })
        })
        .collect();
    let records = records?;

    let n = records.len() as f64;
    let summary = BenchmarkSummary {
        method: method.as_str().into(),
        variant: variant.as_str().into(),
        class_acc: class_acc(&records)?,
        rota_acc: rota_acc(&records, threshold_deg)?,
        mean_comparisons: records.iter().map(|r| r.comparisons as f64).sum::<f64>() / n,
        mean_elapsed_s: records.iter().map(|r| r.elapsed_s).sum::<f64>() / n,
        config: serde_json::json!({
            "queries": records.len(),
            "objects": db.num_objects(),
            "references": db.total_references(),
            "threshold_deg": threshold_deg,
            "k_local": fast_cfg.k_local,
        }),
    };
    Ok(BenchmarkRun { records, summary })
}

/// Write per-query records as CSV.
pub fn write_records_csv<W: Write>(records: &[EvalRecord], out: &mut W) -> std::io::Result<()> {
    writeln!(
        out,
        "query_id,true_category,pred_category,geodesic_error,comparisons,elapsed_s"
    )?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.query_id, r.true_category, r.pred_category, r.geodesic_error, r.comparisons, r.elapsed_s
        )?;
    }
    Ok(())
}

/// One row of the reference-count sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub refs_per_object: usize,
    pub class_acc: f64,
    pub rota_acc: f64,
    pub mean_comparisons: f64,
    pub mean_elapsed_s: f64,
}

/// Re-generate the task at each reference count (reference sets nest by
/// construction) and benchmark it. Query sets are identical across counts
/// when the base spec uses uniform query placement.
pub fn run_reference_sweep(
    base: &SynthTaskSpec,
    ref_counts: &[usize],
    method: Method,
    variant: FusionVariant,
    params: &FusionParams,
    fast_cfg: &FastConfig,
    threshold_deg: f64,
) -> Result<Vec<SweepRow>, EvalError> {
    let mut rows = Vec::with_capacity(ref_counts.len());
    for &refs in ref_counts {
        let mut spec = base.clone();
        spec.refs_per_object = refs;
        spec.anchors_per_object = spec.anchors_per_object.min(refs);
        let task = gen_task(&spec)?;
        let run = run_benchmark(
            &task.db,
            &task.queries,
            method,
            variant,
            params,
            fast_cfg,
            threshold_deg,
        )?;
        rows.push(SweepRow {
            refs_per_object: refs,
            class_acc: run.summary.class_acc,
            rota_acc: run.summary.rota_acc,
            mean_comparisons: run.summary.mean_comparisons,
            mean_elapsed_s: run.summary.mean_elapsed_s,
        });
    }
    Ok(rows)
}

/// Settings of the ablation grid.
#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub task: SynthTaskSpec,
    pub fit: FitConfig,
    pub train_anchors: usize,
    pub train_seed: u64,
    pub threshold_deg: f64,
    pub method: Method,
    pub fast: FastConfig,
    /// Also run the grid with local normalization disabled.
    pub sweep_local_norm: bool,
    /// Also run the fitted variants with unweighted infoNCE.
    pub sweep_loss_weighting: bool,
}

/// One ablation cell. `weighted` is `None` for the average variant, which
/// has no fitted parameters and therefore no loss axis.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub local_norm: bool,
    pub weighted: Option<bool>,
    pub class_acc: f64,
    pub rota_acc: f64,
    pub mean_comparisons: f64,
    pub final_loss: Option<f64>,
}

/// Fit the learned variants and benchmark every requested grid cell.
pub fn run_ablation(cfg: &AblationConfig) -> Result<Vec<AblationRow>, EvalError> {
    let norm_settings: Vec<bool> = if cfg.sweep_local_norm {
        vec![true, false]
    } else {
        vec![true]
    };
    let weight_settings: Vec<bool> = if cfg.sweep_loss_weighting {
        vec![true, false]
    } else {
        vec![true]
    };

    let mut rows = Vec::new();
    for &norm_on in &norm_settings {
        let mut spec = cfg.task.clone();
        if !norm_on {
            spec.local_norm = None;
        }
        let task = gen_task(&spec)?;
        let train = gen_train_set(&task, cfg.train_anchors, cfg.fit.batch_size, cfg.train_seed);
        let examples = train.examples(&task.db);

        // Unfitted baseline: plain averaging.
        let zero = FusionParams::zeros(
            task.db.layout.scale_dims.len(),
            task.db.layout.channels as usize,
            DEFAULT_HIDDEN,
        );
        let avg = run_benchmark(
            &task.db,
            &task.queries,
            cfg.method,
            FusionVariant::Average,
            &zero,
            &cfg.fast,
            cfg.threshold_deg,
        )?;
        rows.push(AblationRow {
            variant: "average".into(),
            local_norm: norm_on,
            weighted: None,
            class_acc: avg.summary.class_acc,
            rota_acc: avg.summary.rota_acc,
            mean_comparisons: avg.summary.mean_comparisons,
            final_loss: None,
        });

        for &weighted in &weight_settings {
            for variant in [
                FusionVariant::Adaptive,
                FusionVariant::SigmoidOnly,
                FusionVariant::SoftmaxOnly,
            ] {
                let mut fit_cfg = cfg.fit.clone();
                fit_cfg.variant = variant;
                fit_cfg.weighted = weighted;
                let init = FusionParams::random_init(
                    task.db.layout.scale_dims.len(),
                    task.db.layout.channels as usize,
                    DEFAULT_HIDDEN,
                    fit_cfg.seed,
                );
                let report = fit_fusion(&examples, &fit_cfg, &init)?;
                let run = run_benchmark(
                    &task.db,
                    &task.queries,
                    cfg.method,
                    variant,
                    &report.params,
                    &cfg.fast,
                    cfg.threshold_deg,
                )?;
                rows.push(AblationRow {
                    variant: variant.as_str().into(),
                    local_norm: norm_on,
                    weighted: Some(weighted),
                    class_acc: run.summary.class_acc,
                    rota_acc: run.summary.rota_acc,
                    mean_comparisons: run.summary.mean_comparisons,
                    final_loss: report.epoch_losses.last().copied(),
                });
            }
        }
    }
    Ok(rows)
}

/// Render ablation rows as CSV.
pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], out: &mut W) -> std::io::Result<()> {
    writeln!(
        out,
        "variant,local_norm,weighted,class_acc,rota_acc,mean_comparisons,final_loss"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.variant,
            r.local_norm,
            r.weighted.map_or(String::from(""), |w| w.to_string()),
            r.class_acc,
            r.rota_acc,
            r.mean_comparisons,
            r.final_loss.map_or(String::from(""), |l| l.to_string()),
        )?;
    }
    Ok(())
}
