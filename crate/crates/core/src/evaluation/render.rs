use std::fmt::Write;

use super::{ClassMetrics, EvalReport};
use crate::feature_store::Label;

/// Display scale used by the text tables.
pub fn percent(v: f64) -> f64 {
    v * 100.0
}

fn cells(out: &mut String, m: Option<ClassMetrics>) {
    match m {
        Some(m) => {
            for v in [m.acc, m.f1, m.auc] {
                let _ = write!(out, " {:>6.2}", percent(v));
            }
        }
        None => out.push_str("    n/a    n/a    n/a"),
    }
    out.push_str(" |");
}

/// Fixed-width comparison table: one row per model, ACC/F1/AUC for every
/// class and the totals, in percent with two decimals.
pub fn render_table(rows: &[(&str, &EvalReport)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let groups: Vec<String> = Label::ALL.iter().map(|l| l.name().to_string()).chain(["total".into()]).collect();
    let mut out = String::new();
    let _ = write!(out, "{:name_w$} |", "model");
    for g in &groups {
        let _ = write!(out, " {g:^20} |");
    }
    out.push('\n');
    let _ = write!(out, "{:name_w$} |", "");
    for _ in &groups {
        out.push_str("    ACC     F1    AUC |");
    }
    out.push('\n');
    out.push_str(&"-".repeat(name_w + 1 + groups.len() * 23));
    out.push('\n');
    for (name, report) in rows {
        let _ = write!(out, "{name:name_w$} |");
        for l in Label::ALL {
            cells(&mut out, report.per_class.get(&l).copied().flatten());
        }
        cells(&mut out, Some(report.totals));
        out.push('\n');
    }
    out
}
