//! JSON summary and CSV tables of a cohort run.

use serde::Serialize;

use super::{CohortOutcome, PatientResult, PipelineConfig};
use crate::features::MrmrPick;
use crate::metrics::BlandAltman;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineReport {
    pub name: String,
    pub dice: f64,
    pub reference_dice: Option<f64>,
    pub fep: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatientReport {
    pub id: String,
    pub dice: f64,
    pub jaccard: f64,
    pub precision: f64,
    pub npv: f64,
    pub reference_dice: Option<f64>,
    pub fep_auto: f64,
    pub fep_gt: f64,
    pub fep_reference: Option<f64>,
    pub baselines: Vec<BaselineReport>,
}

impl From<&PatientResult> for PatientReport {
    fn from(r: &PatientResult) -> Self {
        PatientReport {
            id: r.id.clone(),
            dice: r.metrics.dice,
            jaccard: r.metrics.jaccard,
            precision: r.metrics.precision,
            npv: r.metrics.npv,
            reference_dice: r.reference_metrics.as_ref().map(|m| m.dice),
            fep_auto: r.fep_auto,
            fep_gt: r.fep_gt,
            fep_reference: r.fep_reference,
            baselines: r
                .baselines
                .iter()
                .map(|b| BaselineReport {
                    name: b.name.clone(),
                    dice: b.metrics.dice,
                    reference_dice: b.reference_metrics.as_ref().map(|m| m.dice),
                    fep: b.fep,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub patients: usize,
    pub superpixels: usize,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub ber: f64,
    pub auc: Option<f64>,
    pub single_class_folds: usize,
    pub mean_dice: f64,
    pub sd_dice: f64,
    pub mean_reference_dice: Option<f64>,
    pub mean_fep_auto: f64,
    pub mean_fep_gt: f64,
    /// (baseline, mean Dice vs ground truth, mean Dice vs reference)
    pub baseline_dice: Vec<(String, f64, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohortReport {
    pub config: String,
    pub features: Vec<String>,
    pub rho: f64,
    pub gamma: f64,
    pub selection: Option<Vec<MrmrPick>>,
    pub summary: Summary,
    pub bland_altman: Option<BlandAltman>,
    pub patients: Vec<PatientReport>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, sd)
}

impl CohortReport {
    pub fn new(outcome: &CohortOutcome, cfg: &PipelineConfig) -> Self {
        let patients: Vec<PatientReport> =
            outcome.patients.iter().map(PatientReport::from).collect();
        let dice: Vec<f64> = patients.iter().map(|p| p.dice).collect();
        let (mean_dice, sd_dice) = mean_sd(&dice);
        let refs: Vec<f64> = patients.iter().filter_map(|p| p.reference_dice).collect();
        let v = &outcome.validation;
        let baseline_dice = cfg
            .baselines
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let d: Vec<f64> = patients.iter().map(|p| p.baselines[i].dice).collect();
                let r: Vec<f64> = patients
                    .iter()
                    .filter_map(|p| p.baselines[i].reference_dice)
                    .collect();
                (
                    b.to_string(),
                    mean_sd(&d).0,
                    (!r.is_empty()).then(|| mean_sd(&r).0),
                )
            })
            .collect();
        CohortReport {
            config: cfg.to_text(),
            features: cfg.features.clone(),
            rho: outcome.params.rho,
            gamma: outcome.params.gamma,
            selection: outcome.selection.clone(),
            summary: Summary {
                patients: patients.len(),
                superpixels: v.report.n,
                accuracy: v.report.accuracy,
                sensitivity: v.report.sensitivity,
                specificity: v.report.specificity,
                ber: v.report.ber,
                auc: v.report.auc,
                single_class_folds: v.single_class_folds,
                mean_dice,
                sd_dice,
                mean_reference_dice: (!refs.is_empty()).then(|| mean_sd(&refs).0),
                mean_fep_auto: mean_sd(&patients.iter().map(|p| p.fep_auto).collect::<Vec<_>>()).0,
                mean_fep_gt: mean_sd(&patients.iter().map(|p| p.fep_gt).collect::<Vec<_>>()).0,
                baseline_dice,
            },
            bland_altman: outcome.bland_altman.clone(),
            patients,
        }
    }

    pub fn to_json(&self) -> String {
        // NaN (undefined sensitivity etc.) is written as null.
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// One row per patient: metrics, FEP and baseline Dice.
    pub fn patients_csv(&self) -> String {
        let mut s = String::from(
            "patient,dice,jaccard,precision,npv,reference_dice,fep_auto,fep_gt,fep_reference",
        );
        if let Some(p) = self.patients.first() {
            for b in &p.baselines {
                s.push_str(&format!(",dice_{0},reference_dice_{0},fep_{0}", b.name));
            }
        }
        s.push('\n');
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for p in &self.patients {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}",
                p.id,
                p.dice,
                p.jaccard,
                p.precision,
                p.npv,
                opt(p.reference_dice),
                p.fep_auto,
                p.fep_gt,
                opt(p.fep_reference)
            ));
            for b in &p.baselines {
                s.push_str(&format!(",{},{},{}", b.dice, opt(b.reference_dice), b.fep));
            }
            s.push('\n');
        }
        s
    }
}
