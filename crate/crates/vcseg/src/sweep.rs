//! Hyper-parameter sweep harness: one training run per value, shared seed
//! and dataset, evaluated with the k-means and linear protocols.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{eval_kmeans_knn, eval_linear, EvalProtocol};
use crate::trainer::{train, TrainConfig};

/// Which hyper-parameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    LambdaV,
    LambdaC,
    Concepts,
    Beta,
    BankBatches,
}

impl SweepParam {
    pub fn name(&self) -> &'static str {
        match self {
            SweepParam::LambdaV => "lambda_v",
            SweepParam::LambdaC => "lambda_c",
            SweepParam::Concepts => "concepts",
            SweepParam::Beta => "beta",
            SweepParam::BankBatches => "bank_batches",
        }
    }
}

/// A sweep: parameter, values, and the base configuration every cell shares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<f64>,
    pub base: TrainConfig,
    #[serde(default = "default_true")]
    pub eval_kmeans: bool,
    #[serde(default = "default_true")]
    pub eval_linear: bool,
}

fn default_true() -> bool {
    true
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::invalid("sweep needs at least one value"));
        }
        if !(self.eval_kmeans || self.eval_linear) {
            return Err(Error::invalid("sweep needs at least one eval protocol"));
        }
        for &v in &self.values {
            self.configure(v)?;
        }
        Ok(())
    }

    /// The cell configuration for one swept value.
    pub fn configure(&self, value: f64) -> Result<TrainConfig> {
        let mut config = self.base.clone();
        let as_count = |value: f64, what: &str| -> Result<usize> {
            if value < 0.0 || value.fract() != 0.0 {
                return Err(Error::invalid(format!("{what} must be a non-negative integer")));
            }
            Ok(value as usize)
        };
        match self.param {
            SweepParam::LambdaV => config.weights.lambda_v = value,
            SweepParam::LambdaC => config.weights.lambda_c = value,
            SweepParam::Beta => config.weights.beta = value,
            SweepParam::Concepts => config.concepts = as_count(value, "concepts")?,
            SweepParam::BankBatches => config.bank_batches = as_count(value, "bank_batches")?,
        }
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: SweepSpec = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::format(path, format!("{e}")))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::format(path, format!("{e}")))?
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// One sweep cell outcome; failures are recorded, not fatal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub miou_kmeans: Option<f64>,
    pub miou_linear: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
    /// Training runs actually executed.
    pub runs_executed: usize,
}

impl SweepTable {
    /// Aligned text table: value | mIoU (k-means) | mIoU (LC).
    pub fn text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:>12} | {:>14} | {:>10}\n",
            self.param.name(),
            "mIoU (k-means)",
            "mIoU (LC)"
        ));
        out.push_str(&format!("{:->12}-+-{:->14}-+-{:->10}\n", "", "", ""));
        for row in &self.rows {
            let fmt = |v: Option<f64>| match v {
                Some(x) => format!("{x:.4}"),
                None => "-".to_string(),
            };
            out.push_str(&format!(
                "{:>12} | {:>14} | {:>10}{}\n",
                trim_float(row.value),
                fmt(row.miou_kmeans),
                fmt(row.miou_linear),
                row.error
                    .as_ref()
                    .map(|e| format!("  ! {e}"))
                    .unwrap_or_default()
            ));
        }
        out
    }
}

fn trim_float(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Run the sweep: one training per value on the shared dataset and seed.
///
/// Per-cell failures are recorded in the row and remaining cells still run.
pub fn run_sweep(
    dataset: &Dataset,
    spec: &SweepSpec,
    protocol: &EvalProtocol,
) -> Result<SweepTable> {
    spec.validate()?;
    let mut rows = Vec::with_capacity(spec.values.len());
    let mut runs_executed = 0usize;
    for &value in &spec.values {
        let row = match run_cell(dataset, spec, protocol, value, &mut runs_executed) {
            Ok((mk, ml)) => SweepRow {
                value,
                miou_kmeans: mk,
                miou_linear: ml,
                error: None,
            },
            Err(e) => SweepRow {
                value,
                miou_kmeans: None,
                miou_linear: None,
                error: Some(e.to_string()),
            },
        };
        rows.push(row);
    }
    Ok(SweepTable {
        param: spec.param,
        rows,
        runs_executed,
    })
}

fn run_cell(
    dataset: &Dataset,
    spec: &SweepSpec,
    protocol: &EvalProtocol,
    value: f64,
    runs_executed: &mut usize,
) -> Result<(Option<f64>, Option<f64>)> {
    let config = spec.configure(value)?;
    let (model, _log) = train(dataset, &config)?;
    *runs_executed += 1;
    let miou_kmeans = if spec.eval_kmeans {
        Some(eval_kmeans_knn(&model, dataset, protocol)?.miou.mean)
    } else {
        None
    };
    let miou_linear = if spec.eval_linear {
        Some(eval_linear(&model, dataset, protocol)?.miou.mean)
    } else {
        None
    };
    Ok((miou_kmeans, miou_linear))
}
