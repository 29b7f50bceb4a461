//! Metric and trace export.
//!
//! The CSV has one train row and one test row per epoch:
//! `epoch,split,top1,top5,E_layer_1..E_layer_L,seconds`. Floats print in
//! Rust's shortest round-trip form, so re-parsing recovers the in-memory
//! values exactly and identical runs produce identical bytes (the seconds
//! column aside).

use crate::error::Result;
use crate::runner::MetricsRecord;
use pclab_core::pcgraph::EnergyReport;
use std::fs;
use std::path::Path;

pub fn csv_header(depth: usize) -> String {
    let mut cols = vec!["epoch".to_string(), "split".into(), "top1".into(), "top5".into()];
    cols.extend((1..=depth).map(|l| format!("E_layer_{l}")));
    cols.push("seconds".into());
    cols.join(",")
}

pub fn export_metrics_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let depth = records.first().map(|r| r.layer_energies.len()).unwrap_or(0);
    let mut out = String::new();
    out.push_str(&csv_header(depth));
    out.push('\n');
    for r in records {
        let energies: Vec<String> = r.layer_energies.iter().map(|e| format!("{e}")).collect();
        let e = energies.join(",");
        out.push_str(&format!(
            "{},train,{},{},{},{}\n",
            r.epoch, r.train_top1, r.train_top5, e, r.seconds
        ));
        out.push_str(&format!(
            "{},test,{},{},{},{}\n",
            r.epoch, r.test_top1, r.test_top5, e, r.seconds
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// JSON document with the probe batch's per-relaxation-step energies, one
/// trace per epoch.
pub fn export_energy_trace(traces: &[Vec<EnergyReport>], path: &Path) -> Result<()> {
    #[derive(serde::Serialize)]
    struct TraceDoc<'a> {
        schema_version: u32,
        probe_traces: &'a [Vec<EnergyReport>],
    }
    let doc = TraceDoc {
        schema_version: 1,
        probe_traces: traces,
    };
    let json = serde_json::to_string_pretty(&doc).map_err(pclab_core::Error::from)?;
    fs::write(path, json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(epoch: usize) -> MetricsRecord {
        MetricsRecord {
            epoch,
            train_top1: 0.5,
            train_top5: 0.9,
            test_top1: 0.4375,
            test_top5: 0.875,
            layer_energies: vec![1.25e-7, 3.0, 0.01],
            seconds: 1.5,
        }
    }

    #[test]
    fn csv_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        export_metrics_csv(&[record(1), record(2)], &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,split,top1,top5,E_layer_1,E_layer_2,E_layer_3,seconds"
        );
        // One train and one test row per epoch.
        assert_eq!(text.lines().count(), 1 + 2 * 2);
        let row = text.lines().nth(1).unwrap();
        assert!(row.starts_with("1,train,0.5,0.9,"));
    }

    #[test]
    fn csv_energies_roundtrip_through_text() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rec = record(1);
        export_metrics_csv(&[rec.clone()], &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
        for (i, want) in rec.layer_energies.iter().enumerate() {
            let got: f64 = row[4 + i].parse().unwrap();
            assert_eq!(got.to_bits(), want.to_bits());
        }
    }

    #[test]
    fn trace_json_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        let traces = vec![vec![EnergyReport {
            per_layer: vec![0.5, 0.125],
            total: 0.625,
            t: 1,
        }]];
        export_energy_trace(&traces, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(doc["schema_version"], 1);
        let back: Vec<Vec<EnergyReport>> =
            serde_json::from_value(doc["probe_traces"].clone()).unwrap();
        assert_eq!(back[0][0].total.to_bits(), 0.625f64.to_bits());
        assert_eq!(back[0][0].per_layer.len(), 2);
    }
}
