//! Ablation grids: one row per grid point, seed-paired (only the axis
//! value varies between rows), emitted as CSV.

use std::path::Path;

use crate::extractive::InitMode;
use crate::templates::TemplateVariant;

use super::train::train;
use super::{HarnessError, RunConfig, Strategy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    TemplateVariant,
    DataFractionGrid,
    LengthBuckets,
    InitModeGrid,
    Convergence,
}

impl std::str::FromStr for AblationAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "template_variant" => Ok(Self::TemplateVariant),
            "data_fraction_grid" => Ok(Self::DataFractionGrid),
            "length_buckets" => Ok(Self::LengthBuckets),
            "init_mode_grid" => Ok(Self::InitModeGrid),
            "convergence" => Ok(Self::Convergence),
            other => Err(format!(
                "unknown axis '{other}' (expected template_variant, data_fraction_grid, \
                 length_buckets, init_mode_grid, or convergence)"
            )),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), HarnessError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

/// Run one ablation axis from a base config. Every grid point inherits the
/// base seed, so rows differ only in the axis value.
pub fn run_ablation(base: &RunConfig, axis: AblationAxis) -> Result<AblationReport, HarnessError> {
    match axis {
        AblationAxis::TemplateVariant => {
            if base.strategy != Strategy::Template {
                return Err(HarnessError::Config(
                    "template_variant axis requires the template strategy".into(),
                ));
            }
            let mut rows = Vec::new();
            for variant in [
                TemplateVariant::LabelIndex,
                TemplateVariant::Keyword,
                TemplateVariant::KeywordExpansion,
                TemplateVariant::WikiFile,
            ] {
                let mut cfg = base.clone();
                cfg.template_variant = variant;
                cfg.out_dir = None;
                let out = train(&cfg)?;
                rows.push(vec![
                    format!("{variant:?}"),
                    fmt(out.metrics.error_rate),
                    fmt(out.metrics.micro_f1),
                ]);
            }
            Ok(AblationReport {
                axis,
                header: vec!["template_variant".into(), "error_rate".into(), "micro_f1".into()],
                rows,
            })
        }
        AblationAxis::DataFractionGrid => {
            let mut rows = Vec::new();
            for fraction in [0.2, 0.4, 0.6, 0.8, 1.0] {
                let mut cfg = base.clone();
                cfg.data_fraction = fraction;
                cfg.out_dir = None;
                let out = train(&cfg)?;
                rows.push(vec![
                    fmt(fraction),
                    fmt(out.metrics.error_rate),
                    fmt(out.metrics.micro_f1),
                ]);
            }
            Ok(AblationReport {
                axis,
                header: vec!["data_fraction".into(), "error_rate".into(), "micro_f1".into()],
                rows,
            })
        }
        AblationAxis::LengthBuckets => {
            let mut cfg = base.clone();
            let bounds = cfg.eval_buckets.clone().unwrap_or_else(|| vec![100, 250, 500]);
            cfg.eval_buckets = Some(bounds.clone());
            cfg.out_dir = None;
            let out = train(&cfg)?;
            let mut rows = Vec::new();
            for (bound, m) in &out.metrics.buckets {
                let label = if *bound == usize::MAX {
                    "inf".to_string()
                } else {
                    bound.to_string()
                };
                rows.push(vec![
                    label,
                    m.n_examples.to_string(),
                    fmt(m.error_rate),
                    fmt(m.micro_f1),
                ]);
            }
            Ok(AblationReport {
                axis,
                header: vec![
                    "bucket_upper_bound".into(),
                    "examples".into(),
                    "error_rate".into(),
                    "micro_f1".into(),
                ],
                rows,
            })
        }
        AblationAxis::InitModeGrid => {
            if base.strategy != Strategy::Extractive {
                return Err(HarnessError::Config(
                    "init_mode_grid axis requires the extractive strategy".into(),
                ));
            }
            let mut rows = Vec::new();
            for mode in [InitMode::Dummy, InitMode::RougeL, InitMode::Random] {
                let mut cfg = base.clone();
                cfg.init_mode = mode;
                cfg.out_dir = None;
                let out = train(&cfg)?;
                rows.push(vec![
                    format!("{mode:?}"),
                    fmt(out.metrics.error_rate),
                    fmt(out.metrics.micro_f1),
                ]);
            }
            Ok(AblationReport {
                axis,
                header: vec!["init_mode".into(), "error_rate".into(), "micro_f1".into()],
                rows,
            })
        }
        AblationAxis::Convergence => {
            let mut cfg = base.clone();
            cfg.out_dir = None;
            let out = train(&cfg)?;
            let rows = out
                .epoch_log
                .iter()
                .map(|r| {
                    vec![
                        r.epoch.to_string(),
                        fmt(r.test_error),
                        fmt(r.test_micro_f1),
                        fmt(r.mean_train_loss),
                    ]
                })
                .collect();
            Ok(AblationReport {
                axis,
                header: vec![
                    "epoch".into(),
                    "test_error".into(),
                    "test_micro_f1".into(),
                    "train_loss".into(),
                ],
                rows,
            })
        }
    }
}
