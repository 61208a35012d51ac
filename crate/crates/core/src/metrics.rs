//! Per-axis force error metrics and evaluation report rendering.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction/truth length mismatch: {pred} vs {truth}")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("cannot compute metrics over an empty series")]
    Empty,
    #[error("report parse error: {0}")]
    Parse(String),
}

fn check_lengths(
    pred: &[[f64; 3]],
    truth: &[[f64; 3]],
) -> Result<(), MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// Mean absolute error per axis, in the unit of the inputs.
pub fn mae(pred: &[[f64; 3]], truth: &[[f64; 3]]) -> Result<[f64; 3], MetricsError> {
    check_lengths(pred, truth)?;
    let n = pred.len() as f64;
    let mut acc = [0.0f64; 3];
    for (p, t) in pred.iter().zip(truth) {
        for a in 0..3 {
            acc[a] += (p[a] - t[a]).abs();
        }
    }
    for v in &mut acc {
        *v /= n;
    }
    Ok(acc)
}

/// Root-mean-square error per axis, in the unit of the inputs.
pub fn rmse(pred: &[[f64; 3]], truth: &[[f64; 3]]) -> Result<[f64; 3], MetricsError> {
    check_lengths(pred, truth)?;
    let n = pred.len() as f64;
    let mut acc = [0.0f64; 3];
    for (p, t) in pred.iter().zip(truth) {
        for a in 0..3 {
            let d = p[a] - t[a];
            acc[a] += d * d;
        }
    }
    for v in &mut acc {
        *v = (*v / n).sqrt();
    }
    Ok(acc)
}

/// Evaluation summary for one labeled dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    pub n: usize,
    pub mae_n: [f64; 3],
    pub rmse_n: [f64; 3],
}

impl EvalReport {
    pub fn new(
        dataset: &str,
        pred: &[[f64; 3]],
        truth: &[[f64; 3]],
    ) -> Result<Self, MetricsError> {
        Ok(Self {
            dataset: dataset.to_string(),
            n: pred.len(),
            mae_n: mae(pred, truth)?,
            rmse_n: rmse(pred, truth)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(Self::Text),
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(MetricsError::Parse(format!(
                "unknown report format {other:?} (expected text, json, or csv)"
            ))),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Text => "text",
            Self::Json => "json",
            Self::Csv => "csv",
        })
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct AxisErrors {
    mae: f64,
    rmse: f64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct ReportAxes {
    #[serde(rename = "X")]
    x: AxisErrors,
    #[serde(rename = "Y")]
    y: AxisErrors,
    #[serde(rename = "Z")]
    z: AxisErrors,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct ReportJson {
    dataset: String,
    n: usize,
    axes: ReportAxes,
}

impl From<&EvalReport> for ReportJson {
    fn from(r: &EvalReport) -> Self {
        let axis = |a: usize| AxisErrors {
            mae: r.mae_n[a],
            rmse: r.rmse_n[a],
        };
        Self {
            dataset: r.dataset.clone(),
            n: r.n,
            axes: ReportAxes {
                x: axis(0),
                y: axis(1),
                z: axis(2),
            },
        }
    }
}

/// Renders a report in the requested format. Text uses two decimals for
/// human reading; json and csv keep full float precision for tooling.
pub fn render_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Text => {
            let mut out = String::new();
            out.push_str(&format!(
                "dataset: {} ({} samples)\n",
                report.dataset, report.n
            ));
            out.push_str("axis  MAE [N]  RMSE [N]\n");
            for (axis, a) in ["X", "Y", "Z"].iter().zip(0..3) {
                out.push_str(&format!(
                    "{axis}     {:<7.2}  {:<8.2}\n",
                    report.mae_n[a], report.rmse_n[a]
                ));
            }
            out
        }
        ReportFormat::Json => {
            let mut text = serde_json::to_string_pretty(&ReportJson::from(report))
                .expect("report serialization cannot fail");
            text.push('\n');
            text
        }
        ReportFormat::Csv => {
            let mut out = String::from("axis,mae_N,rmse_N\n");
            for (axis, a) in ["X", "Y", "Z"].iter().zip(0..3) {
                out.push_str(&format!(
                    "{axis},{},{}\n",
                    report.mae_n[a], report.rmse_n[a]
                ));
            }
            out
        }
    }
}

/// Parses a report previously rendered as json.
pub fn parse_report_json(text: &str) -> Result<EvalReport, MetricsError> {
    let parsed: ReportJson =
        serde_json::from_str(text).map_err(|e| MetricsError::Parse(e.to_string()))?;
    Ok(EvalReport {
        dataset: parsed.dataset,
        n: parsed.n,
        mae_n: [parsed.axes.x.mae, parsed.axes.y.mae, parsed.axes.z.mae],
        rmse_n: [parsed.axes.x.rmse, parsed.axes.y.rmse, parsed.axes.z.rmse],
    })
}
