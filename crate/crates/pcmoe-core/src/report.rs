//! Tradeoff-table emission: flattens serve reports into CSV rows suitable
//! for external plotting.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::serve::ServeReport;

/// One row of the tradeoff table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub policy: String,
    pub expert_ratio: f64,
    pub accuracy: f64,
    pub fidelity: f64,
    pub peak_memory: u64,
    pub mean_latency: f64,
    pub mean_io: f64,
}

impl From<&ServeReport> for TradeoffRow {
    fn from(r: &ServeReport) -> Self {
        TradeoffRow {
            policy: r.policy.clone(),
            expert_ratio: r.expert_ratio,
            accuracy: r.accuracy,
            fidelity: r.fidelity,
            peak_memory: r.peak_resident_bytes,
            mean_latency: r.mean_latency_ms,
            mean_io: r.mean_io_rate,
        }
    }
}

/// Rows for the given reports, sorted by (policy, expert_ratio).
pub fn tradeoff_rows(reports: &[ServeReport]) -> Result<Vec<TradeoffRow>> {
    if reports.is_empty() {
        return Err(Error::invalid("no reports to tabulate"));
    }
    let mut rows: Vec<TradeoffRow> = reports.iter().map(TradeoffRow::from).collect();
    rows.sort_by(|a, b| {
        a.policy.cmp(&b.policy).then(
            a.expert_ratio
                .partial_cmp(&b.expert_ratio)
                .unwrap_or(std::cmp::Ordering::Equal),
        )
    });
    Ok(rows)
}

pub fn write_tradeoff_csv(rows: &[TradeoffRow], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tradeoff_csv(reader: impl Read) -> Result<Vec<TradeoffRow>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut rows = Vec::new();
    for row in r.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

/// Write the tradeoff table for a set of reports to `path`.
pub fn save_tradeoff(reports: &[ServeReport], path: impl AsRef<Path>) -> Result<()> {
    let rows = tradeoff_rows(reports)?;
    let file = fs::File::create(path)?;
    write_tradeoff_csv(&rows, file)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(policy: &str, ratio: f64) -> ServeReport {
        ServeReport {
            policy: policy.to_string(),
            expert_ratio: ratio,
            accuracy: 0.5 + ratio / 4.0,
            fidelity: 0.125,
            num_samples: 8,
            peak_resident_bytes: (1000.0 * ratio) as u64,
            mean_latency_ms: 2.5,
            mean_compute_ms: 2.0,
            mean_stall_ms: 0.5,
            total_io_bytes: 640,
            mean_io_rate: 32.0,
            peak_io_rate: 64.0,
            final_resident: vec![vec![0, 1]],
        }
    }

    #[test]
    fn single_reference_report_yields_one_full_ratio_row() {
        let r = ServeReport {
            policy: "reference".into(),
            expert_ratio: 1.0,
            ..report("reference", 1.0)
        };
        let rows = tradeoff_rows(&[r]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].policy, "reference");
        assert_eq!(rows[0].expert_ratio, 1.0);
    }

    #[test]
    fn rows_sort_by_policy_then_ratio() {
        let reports = vec![
            report("pc", 0.75),
            report("magnitude-keep", 0.5),
            report("pc", 0.25),
        ];
        let rows = tradeoff_rows(&reports).unwrap();
        let keys: Vec<(String, f64)> = rows
            .iter()
            .map(|r| (r.policy.clone(), r.expert_ratio))
            .collect();
        assert_eq!(
            keys,
            vec![
                ("magnitude-keep".to_string(), 0.5),
                ("pc".to_string(), 0.25),
                ("pc".to_string(), 0.75),
            ]
        );
    }

    #[test]
    fn empty_reports_error() {
        assert!(tradeoff_rows(&[]).is_err());
    }

    #[test]
    fn csv_round_trip_preserves_values() {
        let reports = vec![report("pc", 0.5), report("random-keep", 0.5)];
        let rows = tradeoff_rows(&reports).unwrap();
        let mut buf = Vec::new();
        write_tradeoff_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text
            .starts_with("policy,expert_ratio,accuracy,fidelity,peak_memory,mean_latency,mean_io"));
        let back = read_tradeoff_csv(buf.as_slice()).unwrap();
        assert_eq!(rows, back);
    }
}
