//! Annotation time saving from saving-band counts, and report export.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::mask::mask_iou;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{0}: instance count is zero")]
    NoInstances(String),
    #[error("{label}: band counts {bands} exceed instance count {n}")]
    BandOverflow { label: String, bands: u64, n: u64 },
    #[error("duplicate row for {0}")]
    Duplicate(String),
    #[error("no tallies to aggregate")]
    Empty,
}

pub const ALL_LABEL: &str = "all";

/// Instances per saving band for one class (or `all`). Instances with less
/// than 50% saved are the remainder `n - (g95 + g75 + g50)` and count as zero.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SavingBandTally {
    pub defect_class: String,
    pub instance_count: u64,
    pub g95: u64,
    pub g75: u64,
    pub g50: u64,
}

impl SavingBandTally {
    pub fn new(defect_class: impl Into<String>, instance_count: u64, g95: u64, g75: u64, g50: u64) -> Self {
        Self { defect_class: defect_class.into(), instance_count, g95, g75, g50 }
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.instance_count == 0 {
            return Err(MetricsError::NoInstances(self.defect_class.clone()));
        }
        let bands = self.g95 + self.g75 + self.g50;
        if bands > self.instance_count {
            return Err(MetricsError::BandOverflow { label: self.defect_class.clone(), bands, n: self.instance_count });
        }
        Ok(())
    }
}

/// `(0.95 g95 + 0.75 g75 + 0.50 g50) / n`, using each band's lower bound.
pub fn relative_time_saving(t: &SavingBandTally) -> Result<f64, MetricsError> {
    t.validate()?;
    let weighted = 95 * t.g95 + 75 * t.g75 + 50 * t.g50;
    Ok(weighted as f64 / (100 * t.instance_count) as f64)
}

/// Nearest integer percent, halves rounded up.
pub fn percent(fraction: f64) -> i64 {
    (fraction * 100.0).round() as i64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    #[serde(flatten)]
    pub tally: SavingBandTally,
    pub relative_time_saving: f64,
    pub time_saved_percent: i64,
}

impl ReportRow {
    fn from_tally(tally: SavingBandTally) -> Result<Self, MetricsError> {
        let s = relative_time_saving(&tally)?;
        Ok(Self { tally, relative_time_saving: s, time_saved_percent: percent(s) })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSavingReport {
    pub classes: Vec<ReportRow>,
    /// Computed on the column sums, not as a mean of class savings.
    pub all: ReportRow,
}

pub fn aggregate(tallies: &[SavingBandTally]) -> Result<TimeSavingReport, MetricsError> {
    if tallies.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut seen = HashSet::new();
    let mut sum = SavingBandTally::new(ALL_LABEL, 0, 0, 0, 0);
    let mut classes = Vec::with_capacity(tallies.len());
    for t in tallies {
        if !seen.insert(t.defect_class.as_str()) || t.defect_class == ALL_LABEL {
            return Err(MetricsError::Duplicate(t.defect_class.clone()));
        }
        classes.push(ReportRow::from_tally(t.clone())?);
        sum.instance_count += t.instance_count;
        sum.g95 += t.g95;
        sum.g75 += t.g75;
        sum.g50 += t.g50;
    }
    Ok(TimeSavingReport { classes, all: ReportRow::from_tally(sum)? })
}

impl TimeSavingReport {
    /// Columns: defect, instance count, the three band counts, percent saved.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["defect", "instance_count", "95", "75", "50", "time_saved_percent", "relative_time_saving"])
            .expect("in-memory write");
        for row in self.classes.iter().chain(std::iter::once(&self.all)) {
            let t = &row.tally;
            w.write_record([
                t.defect_class.clone(),
                t.instance_count.to_string(),
                t.g95.to_string(),
                t.g75.to_string(),
                t.g50.to_string(),
                row.time_saved_percent.to_string(),
                format!("{:.6}", row.relative_time_saving),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Reads tallies from CSV with header `defect,instance_count,95,75,50`
/// (extra columns and an `all` row are ignored).
pub fn tallies_from_csv(text: &str) -> Result<Vec<SavingBandTally>, csv::Error> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
        let num = |i: usize| -> Result<u64, csv::Error> {
            field(i).parse().map_err(|e: std::num::ParseIntError| {
                csv::Error::from(std::io::Error::new(std::io::ErrorKind::InvalidData, format!("column {}: {e}", i + 1)))
            })
        };
        if field(0) == ALL_LABEL {
            continue;
        }
        out.push(SavingBandTally::new(field(0), num(1)?, num(2)?, num(3)?, num(4)?));
    }
    Ok(out)
}

/// Saving band from mask overlap. Experimental: IoU is not the quantity the
/// bands describe (editing effort), and no result depends on this helper.
pub fn experimental_band_from_iou(iou: f64) -> Option<u8> {
    match iou {
        v if v >= 0.9 => Some(95),
        v if v >= 0.75 => Some(75),
        v if v >= 0.5 => Some(50),
        _ => None,
    }
}
