//! Policy comparison rows and their text, CSV and JSON renderings.

use serde::{Deserialize, Serialize};
use v2x_nlos::engine::SweepCell;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Table,
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub policy: String,
    pub avg_prr: f64,
    pub relay_switches: f64,
    pub per: f64,
}

impl From<&SweepCell> for ReportRow {
    fn from(c: &SweepCell) -> Self {
        Self {
            policy: c.policy.to_string(),
            avg_prr: c.mean_prr,
            relay_switches: c.mean_switches,
            per: 1.0 - c.mean_prr,
        }
    }
}

/// Descending average PRR; equal PRRs keep their input order.
pub fn sort_rows(rows: &mut [ReportRow]) {
    rows.sort_by(|a, b| b.avg_prr.total_cmp(&a.avg_prr));
}

fn percent(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

pub fn render_report(rows: &[ReportRow], format: Format) -> anyhow::Result<String> {
    let mut rows = rows.to_vec();
    sort_rows(&mut rows);
    Ok(match format {
        Format::Table => {
            let mut s = format!("{:<16} {:>9} {:>9} {:>9}\n", "policy", "avg PRR", "switches", "PER");
            for r in &rows {
                s.push_str(&format!(
                    "{:<16} {:>9} {:>9.2} {:>9}\n",
                    r.policy,
                    percent(r.avg_prr),
                    r.relay_switches,
                    percent(r.per)
                ));
            }
            s
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in &rows {
                w.serialize(r)?;
            }
            String::from_utf8(w.into_inner()?)?
        }
        Format::Json => serde_json::to_string_pretty(&rows)? + "\n",
    })
}
