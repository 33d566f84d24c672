//! Accuracy metrics, synthetic task generation, and the benchmark harness.

pub mod bench;
pub mod gradcheck;
pub mod synth;

use crate::so3::Rotation;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no evaluation records")]
    EmptyEval,
    #[error(transparent)]
    Retrieval(#[from] crate::retrieval::RetrievalError),
    #[error(transparent)]
    Db(#[from] crate::refdb::DbError),
    #[error(transparent)]
    Loss(#[from] crate::loss::LossError),
    #[error(transparent)]
    So3(#[from] crate::so3::So3Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One evaluated query: ground truth, prediction, and retrieval cost.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub query_id: usize,
    pub true_category: String,
    pub true_rotation: Rotation,
    pub pred_category: String,
    pub pred_rotation: Rotation,
    /// Normalized geodesic error in [0, 1].
    pub geodesic_error: f64,
    pub comparisons: u64,
    pub elapsed_s: f64,
}

/// Fraction of records whose predicted category matches the true one.
pub fn class_acc(records: &[EvalRecord]) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyEval);
    }
    let hits = records
        .iter()
        .filter(|r| r.pred_category == r.true_category)
        .count();
    Ok(hits as f64 / records.len() as f64)
}

/// Fraction of records with the correct category AND a geodesic error below
/// the threshold. The threshold is given in degrees and compared in
/// normalized units (degrees / 180).
pub fn rota_acc(records: &[EvalRecord], threshold_degrees: f64) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyEval);
    }
    let threshold = threshold_degrees / 180.0;
    let hits = records
        .iter()
        .filter(|r| r.pred_category == r.true_category && r.geodesic_error < threshold)
        .count();
    Ok(hits as f64 / records.len() as f64)
}
