use std::fmt::Write;
use std::str::FromStr;

use super::{percent, MetricReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
}

impl FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "json" => Ok(ReportFormat::Json),
            _ => Err(format!("unknown report format `{s}` (text or json)")),
        }
    }
}

/// Deterministic rendering. Sections with nothing to show are left out.
pub fn render_report(r: &MetricReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(r).expect("reports serialize") + "\n",
        ReportFormat::Text => text(r),
    }
}

fn text(r: &MetricReport) -> String {
    let mut s = String::new();
    if r.protocol_id.is_empty() {
        s.push_str("Campaign report\n");
    } else {
        let _ = writeln!(s, "Campaign report: {}", r.protocol_id);
    }
    if r.partial {
        s.push_str("Status: partial (campaign did not complete)\n");
    }
    let t = &r.totals;
    let _ = writeln!(s, "Cases: {} generated, {} observed, {} passed, {} errors", t.generated, t.observed, t.passed, t.errors);
    if t.fallback > 0 {
        let _ = writeln!(s, "Fallback cases: {}", t.fallback);
    }
    let _ = writeln!(s, "TCPR: {}", percent(r.tcpr));
    if !r.etn_per_cycle.is_empty() {
        let cycles: Vec<String> = r.etn_per_cycle.iter().map(|c| format!("cycle {} = {}", c.cycle, c.crashes)).collect();
        let _ = writeln!(s, "ETN: {} (total {})", cycles.join(", "), r.etn_total());
    }
    if let Some(c) = &r.coverage {
        let _ = writeln!(s, "Coverage: {} ({}/{} combos)", percent(c.ratio()), c.covered, c.total);
    }
    if !r.entropy_per_field.is_empty() {
        s.push_str("Entropy (bits):\n");
        for (f, h) in &r.entropy_per_field {
            let _ = writeln!(s, "  {f}: {h:.4}");
        }
    }
    if let Some(m) = r.entropy_macro {
        let _ = writeln!(s, "Entropy macro-average: {m:.4} bits");
    }
    if !r.reasons.is_empty() {
        s.push_str("Outcomes:\n");
        for (k, n) in &r.reasons {
            let _ = writeln!(s, "  {k}: {n}");
        }
    }
    s
}
