//! Quadratic least-squares calibration: counts -> force.
//!
//! Raw counts are normalized to zero mean and unit scale, expanded into the
//! full degree-2 polynomial basis (10 terms including cross products), and
//! fitted per force axis by ordinary least squares. The solver runs on an
//! orthogonal factorization (SVD) rather than the normal equations; when the
//! design matrix is rank-deficient it falls back to the minimum-norm
//! solution and flags the fit.

use crate::acquisition::SyncedRecord;
use crate::metrics;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::path::Path;
use thiserror::Error;

/// Length of the quadratic feature vector.
pub const FEATURE_COUNT: usize = 10;

/// Fewest usable records `fit` accepts (twice the feature count).
pub const MIN_TRAINING_RECORDS: usize = 20;

/// Schema tag of a single-model file.
pub const MODEL_SCHEMA: &str = "tcal-model v1";

/// Schema tag of a multi-taxel bundle file.
pub const BUNDLE_SCHEMA: &str = "tcal-bundle v1";

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("i/o error")]
    Io(#[from] std::io::Error),
    #[error("model parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("insufficient data: {found} usable records, need {MIN_TRAINING_RECORDS}")]
    InsufficientData { found: usize },
    #[error("invalid normalization: {0}")]
    InvalidNormalization(String),
    #[error("model schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("least-squares solve failed: {0}")]
    Solve(String),
}

/// Per-axis count statistics used to center and scale raw counts before
/// feature expansion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub scale: [f64; 3],
}

impl Normalization {
    /// Mean and population standard deviation of the given counts; axes with
    /// (near-)zero spread fall back to unit scale.
    pub fn from_counts<'a, I: Iterator<Item = &'a [i16; 3]> + Clone>(counts: I) -> Self {
        let mut n = 0usize;
        let mut mean = [0.0f64; 3];
        for c in counts.clone() {
            n += 1;
            for a in 0..3 {
                mean[a] += c[a] as f64;
            }
        }
        let n = n.max(1) as f64;
        for m in &mut mean {
            *m /= n;
        }
        let mut var = [0.0f64; 3];
        for c in counts {
            for a in 0..3 {
                let d = c[a] as f64 - mean[a];
                var[a] += d * d;
            }
        }
        let mut scale = [0.0f64; 3];
        for a in 0..3 {
            scale[a] = (var[a] / n).sqrt();
            if scale[a] < 1e-9 {
                scale[a] = 1.0;
            }
        }
        Self { mean, scale }
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        for a in 0..3 {
            if !(self.scale[a] > 0.0 && self.scale[a].is_finite() && self.mean[a].is_finite()) {
                return Err(CalibrationError::InvalidNormalization(format!(
                    "axis {a}: mean {}, scale {}",
                    self.mean[a], self.scale[a]
                )));
            }
        }
        Ok(())
    }

    pub fn apply(&self, counts: [i16; 3]) -> [f64; 3] {
        let mut u = [0.0f64; 3];
        for a in 0..3 {
            u[a] = (counts[a] as f64 - self.mean[a]) / self.scale[a];
        }
        u
    }
}

/// Degree-2 polynomial basis over normalized counts u = (counts - mean)/scale:
/// [1, ux, uy, uz, ux^2, uy^2, uz^2, ux*uy, ux*uz, uy*uz].
pub fn expand_features(counts: [i16; 3], norm: &Normalization) -> [f64; FEATURE_COUNT] {
    let [x, y, z] = norm.apply(counts);
    [1.0, x, y, z, x * x, y * y, z * z, x * y, x * z, y * z]
}

/// A fitted per-taxel calibration: 3x10 weight matrix over the quadratic
/// features plus the normalization it was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationModel {
    pub schema: String,
    pub taxel_id: u8,
    /// Rows are the Fx, Fy, Fz coefficient vectors.
    pub weights: [[f64; FEATURE_COUNT]; 3],
    pub norm_mean: [f64; 3],
    pub norm_scale: [f64; 3],
    pub n_samples: usize,
    #[serde(rename = "train_rmse_N")]
    pub train_rmse_n: [f64; 3],
}

impl CalibrationModel {
    pub fn normalization(&self) -> Normalization {
        Normalization {
            mean: self.norm_mean,
            scale: self.norm_scale,
        }
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        if self.schema != MODEL_SCHEMA {
            return Err(CalibrationError::SchemaMismatch(format!(
                "expected {MODEL_SCHEMA:?}, found {:?}",
                self.schema
            )));
        }
        self.normalization().validate()?;
        let finite = self.weights.iter().flatten().all(|w| w.is_finite())
            && self.train_rmse_n.iter().all(|r| r.is_finite() && *r >= 0.0);
        if !finite {
            return Err(CalibrationError::InvalidModel(
                "weights and residuals must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Training diagnostics reported alongside a fitted model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub n_samples: usize,
    pub mae_n: [f64; 3],
    pub rmse_n: [f64; 3],
    /// Ratio of largest to smallest singular value of the design matrix
    /// (infinite when the smallest is zero).
    pub condition: f64,
    /// True when singular values below the rank threshold were dropped and
    /// the minimum-norm solution was used.
    pub rank_deficient: bool,
}

impl fmt::Display for TrainReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "fitted on {} samples", self.n_samples)?;
        writeln!(f, "axis  train MAE [N]  train RMSE [N]")?;
        for (axis, a) in ["X", "Y", "Z"].iter().zip(0..3) {
            writeln!(f, "{axis}     {:<13.6}  {:<14.6}", self.mae_n[a], self.rmse_n[a])?;
        }
        write!(f, "design condition: {:.3e}", self.condition)?;
        if self.rank_deficient {
            write!(f, " (rank-deficient; minimum-norm solution)")?;
        }
        Ok(())
    }
}

/// Fits a quadratic calibration for one taxel. Records for other taxels and
/// clamp-flagged records are excluded; at least [`MIN_TRAINING_RECORDS`]
/// usable records must remain. Normalization statistics come from the
/// training counts themselves.
pub fn fit(
    records: &[SyncedRecord],
    taxel_id: u8,
) -> Result<(CalibrationModel, TrainReport), CalibrationError> {
    let usable = usable_records(records, taxel_id)?;
    let norm = Normalization::from_counts(usable.iter().map(|r| &r.counts));
    fit_usable(&usable, taxel_id, &norm)
}

/// Same as [`fit`] but with caller-supplied normalization statistics.
/// Least-squares predictions are invariant to this choice on full-rank data;
/// only the reported weights change.
pub fn fit_with_normalization(
    records: &[SyncedRecord],
    taxel_id: u8,
    norm: &Normalization,
) -> Result<(CalibrationModel, TrainReport), CalibrationError> {
    norm.validate()?;
    let usable = usable_records(records, taxel_id)?;
    fit_usable(&usable, taxel_id, norm)
}

fn usable_records(
    records: &[SyncedRecord],
    taxel_id: u8,
) -> Result<Vec<&SyncedRecord>, CalibrationError> {
    let usable: Vec<&SyncedRecord> = records
        .iter()
        .filter(|r| r.taxel_id == taxel_id && !r.clamp_flag)
        .collect();
    if usable.len() < MIN_TRAINING_RECORDS {
        return Err(CalibrationError::InsufficientData {
            found: usable.len(),
        });
    }
    Ok(usable)
}

fn fit_usable(
    usable: &[&SyncedRecord],
    taxel_id: u8,
    norm: &Normalization,
) -> Result<(CalibrationModel, TrainReport), CalibrationError> {
    let n = usable.len();
    let design = DMatrix::<f64>::from_fn(n, FEATURE_COUNT, |i, j| {
        expand_features(usable[i].counts, norm)[j]
    });
    let targets = DMatrix::<f64>::from_fn(n, 3, |i, j| usable[i].force_n[j]);

    let svd = design.clone().svd(true, true);
    let sv = &svd.singular_values;
    let sigma_max = sv.max();
    let sigma_min = sv.min();
    // LAPACK-style rank threshold relative to the largest singular value.
    let tol = sigma_max * f64::EPSILON * n.max(FEATURE_COUNT) as f64;
    let rank = sv.iter().filter(|&&s| s > tol).count();
    let solution = svd
        .solve(&targets, tol)
        .map_err(|e| CalibrationError::Solve(e.to_string()))?;

    let mut weights = [[0.0f64; FEATURE_COUNT]; 3];
    for axis in 0..3 {
        for j in 0..FEATURE_COUNT {
            weights[axis][j] = solution[(j, axis)];
        }
    }

    let pred_matrix = design * &solution;
    let pred: Vec<[f64; 3]> = (0..n)
        .map(|i| [pred_matrix[(i, 0)], pred_matrix[(i, 1)], pred_matrix[(i, 2)]])
        .collect();
    let truth: Vec<[f64; 3]> = usable.iter().map(|r| r.force_n).collect();
    let mae_n = metrics::mae(&pred, &truth).expect("non-empty training set");
    let rmse_n = metrics::rmse(&pred, &truth).expect("non-empty training set");

    let model = CalibrationModel {
        schema: MODEL_SCHEMA.to_string(),
        taxel_id,
        weights,
        norm_mean: norm.mean,
        norm_scale: norm.scale,
        n_samples: n,
        train_rmse_n: rmse_n,
    };
    let report = TrainReport {
        n_samples: n,
        mae_n,
        rmse_n,
        condition: sigma_max / sigma_min,
        rank_deficient: rank < FEATURE_COUNT,
    };
    Ok((model, report))
}

/// Predicted 3-axis force for one raw count triple: W * phi(counts).
pub fn predict(model: &CalibrationModel, counts: [i16; 3]) -> [f64; 3] {
    let phi = expand_features(counts, &model.normalization());
    std::array::from_fn(|axis| {
        model.weights[axis].iter().zip(&phi).map(|(w, p)| w * p).sum()
    })
}

/// Writes a model as canonical JSON (fixed field order, shortest round-trip
/// floats), so identical models serialize to identical bytes.
pub fn save_model(model: &CalibrationModel, path: &Path) -> Result<(), CalibrationError> {
    model.validate()?;
    let mut text = serde_json::to_string_pretty(model).expect("model serialization cannot fail");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<CalibrationModel, CalibrationError> {
    let text = fs::read_to_string(path)?;
    let model: CalibrationModel =
        serde_json::from_str(&text).map_err(|e| CalibrationError::Parse {
            line: e.line(),
            msg: e.to_string(),
        })?;
    model.validate()?;
    Ok(model)
}

/// A set of per-taxel models for one fingertip (up to 20, unique taxel ids).
/// Taxels are always fitted one at a time; the bundle is packaging only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBundle {
    pub schema: String,
    pub models: Vec<CalibrationModel>,
}

impl ModelBundle {
    pub fn new(models: Vec<CalibrationModel>) -> Result<Self, CalibrationError> {
        let bundle = Self {
            schema: BUNDLE_SCHEMA.to_string(),
            models,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        if self.schema != BUNDLE_SCHEMA {
            return Err(CalibrationError::SchemaMismatch(format!(
                "expected {BUNDLE_SCHEMA:?}, found {:?}",
                self.schema
            )));
        }
        if self.models.is_empty() || self.models.len() > 20 {
            return Err(CalibrationError::InvalidModel(format!(
                "bundle must hold 1..=20 models, found {}",
                self.models.len()
            )));
        }
        let mut seen = [false; 20];
        for m in &self.models {
            m.validate()?;
            let id = m.taxel_id as usize;
            if id >= 20 {
                return Err(CalibrationError::InvalidModel(format!(
                    "taxel id {} out of range",
                    m.taxel_id
                )));
            }
            if seen[id] {
                return Err(CalibrationError::InvalidModel(format!(
                    "duplicate model for taxel {}",
                    m.taxel_id
                )));
            }
            seen[id] = true;
        }
        Ok(())
    }

    pub fn model_for(&self, taxel_id: u8) -> Option<&CalibrationModel> {
        self.models.iter().find(|m| m.taxel_id == taxel_id)
    }
}

pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<(), CalibrationError> {
    bundle.validate()?;
    let mut text = serde_json::to_string_pretty(bundle).expect("bundle serialization cannot fail");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle, CalibrationError> {
    let text = fs::read_to_string(path)?;
    let bundle: ModelBundle = serde_json::from_str(&text).map_err(|e| CalibrationError::Parse {
        line: e.line(),
        msg: e.to_string(),
    })?;
    bundle.validate()?;
    Ok(bundle)
}
