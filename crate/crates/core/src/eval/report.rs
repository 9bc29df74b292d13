//! Metric reports in JSON and CSV form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column order of the tabular report.
pub const METRIC_NAMES: [&str; 7] = [
    "classification_top1",
    "rotation_r2",
    "colour_r2",
    "mrr",
    "h_at_1",
    "h_at_5",
    "pre",
];

/// One run's evaluation results. Missing entries were not evaluated.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub run: String,
    pub projector: String,
    pub n_caps: usize,
    pub classification_top1: Option<f64>,
    pub rotation_r2: Option<f64>,
    pub colour_r2: Option<f64>,
    pub mrr: Option<f64>,
    pub h_at_1: Option<f64>,
    pub h_at_5: Option<f64>,
    pub pre: Option<f64>,
    /// Free-form protocol notes, e.g. probe epoch scaling.
    #[serde(default)]
    pub notes: Vec<String>,
}

impl MetricReport {
    pub fn new(run: impl Into<String>, projector: impl Into<String>, n_caps: usize) -> Self {
        Self {
            run: run.into(),
            projector: projector.into(),
            n_caps,
            ..Default::default()
        }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "classification_top1" => self.classification_top1,
            "rotation_r2" => self.rotation_r2,
            "colour_r2" => self.colour_r2,
            "mrr" => self.mrr,
            "h_at_1" => self.h_at_1,
            "h_at_5" => self.h_at_5,
            "pre" => self.pre,
            _ => None,
        }
    }

    /// Fills every metric that is unset here but set in `other`.
    pub fn merge(&mut self, other: &MetricReport) {
        let pairs = [
            (&mut self.classification_top1, other.classification_top1),
            (&mut self.rotation_r2, other.rotation_r2),
            (&mut self.colour_r2, other.colour_r2),
            (&mut self.mrr, other.mrr),
            (&mut self.h_at_1, other.h_at_1),
            (&mut self.h_at_5, other.h_at_5),
            (&mut self.pre, other.pre),
        ];
        for (slot, v) in pairs {
            if v.is_some() {
                *slot = v;
            }
        }
        for n in &other.notes {
            if !self.notes.contains(n) {
                self.notes.push(n.clone());
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// One row per report: `run,projector,n_caps` followed by [`METRIC_NAMES`].
/// Unevaluated metrics are empty cells.
pub fn reports_to_csv(reports: &[MetricReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["run", "projector", "n_caps"];
    header.extend(METRIC_NAMES);
    w.write_record(&header)?;
    for r in reports {
        let mut row = vec![r.run.clone(), r.projector.clone(), r.n_caps.to_string()];
        row.extend(
            METRIC_NAMES
                .iter()
                .map(|m| r.metric(m).map(|v| format!("{v:.6}")).unwrap_or_default()),
        );
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_one_row_per_report_and_named_columns() {
        let mut a = MetricReport::new("a", "capsule", 16);
        a.rotation_r2 = Some(0.5);
        let mut b = MetricReport::new("b", "split-mlp", 16);
        b.mrr = Some(0.25);
        let text = reports_to_csv(&[a, b]).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(
            lines[0],
            "run,projector,n_caps,classification_top1,rotation_r2,colour_r2,mrr,h_at_1,h_at_5,pre"
        );
        assert_eq!(lines[1], "a,capsule,16,,0.500000,,,,,");
        assert_eq!(lines[2], "b,split-mlp,16,,,,0.250000,,,");
    }

    #[test]
    fn json_round_trip_and_merge() {
        let mut a = MetricReport::new("r", "capsule", 8);
        a.colour_r2 = Some(-0.01);
        let mut b = MetricReport::new("r", "capsule", 8);
        b.pre = Some(0.3);
        b.notes.push("probe epochs scaled".into());
        a.merge(&b);
        let back: MetricReport = serde_json::from_str(&a.to_json().unwrap()).unwrap();
        assert_eq!(back, a);
        assert_eq!(
            (back.colour_r2, back.pre, back.notes.len()),
            (Some(-0.01), Some(0.3), 1)
        );
    }
}
