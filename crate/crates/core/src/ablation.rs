//! Ablation harness: trains and evaluates each variant of the three
//! studies on one shared split and reports a mean over seeds.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::pipeline::{init_weights, PipelineConfig, WristInputMode};
use crate::pose2pose::RegressorInput;
use crate::synth::Sample;
use crate::train::{dataset_metrics, train, RunConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    /// Hand features given to the body rotation regressor.
    WristInput,
    /// Body features added into the hand backbone.
    FingerBodyFeature,
    /// Per-joint inputs of the rotation regressors.
    RegressorInput,
}

impl Study {
    pub const ALL: [Study; 3] = [Study::WristInput, Study::FingerBodyFeature, Study::RegressorInput];

    pub fn as_str(&self) -> &'static str {
        match self {
            Study::WristInput => "wrist_input",
            Study::FingerBodyFeature => "finger_body_feature",
            Study::RegressorInput => "regressor_input",
        }
    }

    pub fn header(&self) -> (&'static str, &'static str) {
        match self {
            Study::WristInput => ("Inputs for 3D wrist prediction", "MPVPE (Hands)"),
            Study::FingerBodyFeature => ("Settings", "PA MPVPE (Hands)"),
            Study::RegressorInput => ("Inputs for 3D joint rotations", "PA MPVPE (All)"),
        }
    }

    /// The reported number, in mm.
    pub fn metric(&self, r: &MetricReport) -> f64 {
        match self {
            Study::WristInput => r.hands_pelvis_mpvpe,
            Study::FingerBodyFeature => r.hands_avg.pa_mpvpe,
            Study::RegressorInput => r.all.pa_mpvpe,
        }
    }

    /// `(setting, label)` of every variant, in table order.
    pub fn variants(&self) -> Vec<(String, &'static str)> {
        match self {
            Study::WristInput => WristInputMode::ALL.iter().map(|m| (m.as_str().to_string(), m.label())).collect(),
            Study::FingerBodyFeature => vec![
                ("on".to_string(), "With body features"),
                ("off".to_string(), "Without body features"),
            ],
            Study::RegressorInput => RegressorInput::ALL.iter().map(|m| (m.as_str().to_string(), m.label())).collect(),
        }
    }

    /// `base` with one variant applied; the other two switches keep the
    /// full model's setting.
    pub fn configure(&self, base: &PipelineConfig, setting: &str) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig {
            wrist_input_mode: WristInputMode::BodyPlusMcp,
            finger_body_feature: false,
            regressor_input: RegressorInput::Coord3dPlusFeat,
            ..base.clone()
        };
        match self {
            Study::WristInput => cfg.wrist_input_mode = setting.parse()?,
            Study::FingerBodyFeature => {
                cfg.finger_body_feature = match setting {
                    "on" => true,
                    "off" => false,
                    other => return Err(Error::UnknownMode(other.to_string())),
                }
            }
            Study::RegressorInput => cfg.regressor_input = setting.parse()?,
        }
        Ok(cfg)
    }
}

impl FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::UnknownMode(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub study: Study,
    pub setting: String,
    pub label: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    /// Mean metrics over seeds.
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub train_size: usize,
    pub test_size: usize,
    pub rows: Vec<AblationRow>,
}

/// Trains every variant of `studies` once per seed and evaluates it on `test`.
pub fn run_ablation(
    base: &RunConfig,
    studies: &[Study],
    seeds: &[u64],
    train_set: &[Sample],
    test_set: &[Sample],
    mut progress: impl FnMut(&str),
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for study in studies {
        for (setting, label) in study.variants() {
            let pcfg = study.configure(&base.pipeline, &setting)?;
            let mut reports = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let run = RunConfig {
                    pipeline: pcfg.clone(),
                    seed,
                    ..base.clone()
                };
                let weights = init_weights(&run.pipeline, seed)?;
                let (pipe, tr) = train(&run, weights, train_set, |_| {})?;
                let report = dataset_metrics(&pipe, test_set)?;
                progress(&format!(
                    "{} {setting} seed {seed}: {} steps, loss {:.4} -> {:.4}, metric {:.3}",
                    study.as_str(),
                    tr.steps,
                    tr.initial_loss,
                    tr.final_loss,
                    study.metric(&report)
                ));
                reports.push(report);
            }
            let per_seed: Vec<f64> = reports.iter().map(|r| study.metric(r)).collect();
            rows.push(AblationRow {
                study: *study,
                setting,
                label: label.to_string(),
                mean: per_seed.iter().sum::<f64>() / per_seed.len() as f64,
                per_seed,
                report: MetricReport::mean(&reports),
            });
        }
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        train_size: train_set.len(),
        test_size: test_set.len(),
        rows,
    })
}

impl AblationReport {
    /// One plain-text table per study, metric in mm.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for study in Study::ALL {
            let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.study == study).collect();
            if rows.is_empty() {
                continue;
            }
            let (left, right) = study.header();
            let width = rows.iter().map(|r| r.label.len()).chain([left.len()]).max().unwrap_or(0);
            let _ = writeln!(out, "{left:<width$} | {right}");
            let _ = writeln!(out, "{}-+-{}", "-".repeat(width), "-".repeat(right.len()));
            for r in rows {
                let _ = writeln!(out, "{:<width$} | {:.2}", r.label, r.mean);
            }
            out.push('\n');
        }
        out
    }
}
