//! Table rendering.
//!
//! A cell shows a metric, its standard deviation and its ceiling, all in
//! percent with one decimal: `12.9 ±0.4 (60.4)`. Rounding is half-up on the
//! decimal value and happens only here.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Round `x` half-up (away from zero on ties) to one decimal.
///
/// `x` is first printed to 9 decimals so that binary noise such as
/// `0.1 + 0.2 - 0.3` or `12.949999999` from `0.1295 * 100` does not decide
/// the tie.
pub fn format_one_decimal(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let negative = x < 0.0;
    let digits = format!("{:.9}", x.abs());
    let (int_part, frac) = digits.split_once('.').expect("fixed-point format has a dot");
    let mut tenths: u64 = int_part.parse::<u64>().expect("integer part") * 10 + u64::from(frac.as_bytes()[0] - b'0');
    if frac.as_bytes()[1] >= b'5' {
        tenths += 1;
    }
    let sign = if negative && tenths != 0 { "-" } else { "" };
    format!("{sign}{}.{}", tenths / 10, tenths % 10)
}

/// A fraction rendered as percent.
pub fn percent(fraction: f64) -> String {
    format_one_decimal(fraction * 100.0)
}

/// One table entry; fields are fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub value: f64,
    pub std: f64,
    pub ceiling: f64,
}

impl ReportCell {
    pub fn render(&self) -> String {
        format!(
            "{} ±{} ({})",
            percent(self.value),
            percent(self.std),
            percent(self.ceiling)
        )
    }
}

pub const MISSING_CELL: &str = "–";

/// Category-by-model grid. `rows[i].1[j]` is the cell of row `i`, column `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<ReportCell>>)>,
}

impl Table {
    fn rendered_rows(&self) -> Vec<(String, Vec<String>)> {
        self.rows
            .iter()
            .map(|(name, cells)| {
                let cells = cells
                    .iter()
                    .map(|c| c.map_or_else(|| MISSING_CELL.to_string(), |c| c.render()))
                    .collect();
                (name.clone(), cells)
            })
            .collect()
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        writeln!(out, "### {}\n", self.title).unwrap();
        writeln!(out, "| Category | {} |", self.columns.join(" | ")).unwrap();
        writeln!(out, "|---|{}", "---:|".repeat(self.columns.len())).unwrap();
        for (name, cells) in self.rendered_rows() {
            writeln!(out, "| {name} | {} |", cells.join(" | ")).unwrap();
        }
        out
    }

    pub fn to_plain_text(&self) -> String {
        let rows = self.rendered_rows();
        let width = |s: &str| s.chars().count();
        let first = rows
            .iter()
            .map(|(n, _)| width(n))
            .chain([width("Category")])
            .max()
            .unwrap_or(0);
        let col_widths: Vec<usize> = self
            .columns
            .iter()
            .enumerate()
            .map(|(j, c)| {
                rows.iter()
                    .map(|(_, cells)| width(&cells[j]))
                    .chain([width(c)])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let pad = |s: &str, w: usize| format!("{s}{}", " ".repeat(w.saturating_sub(width(s))));
        let lpad = |s: &str, w: usize| format!("{}{s}", " ".repeat(w.saturating_sub(width(s))));

        let mut out = String::new();
        writeln!(out, "{}", self.title).unwrap();
        let mut header = pad("Category", first);
        for (c, w) in self.columns.iter().zip(&col_widths) {
            header.push_str("  ");
            header.push_str(&lpad(c, *w));
        }
        writeln!(out, "{}", header.trim_end()).unwrap();
        writeln!(out, "{}", "-".repeat(width(header.trim_end()))).unwrap();
        for (name, cells) in rows {
            let mut line = pad(&name, first);
            for (cell, w) in cells.iter().zip(&col_widths) {
                line.push_str("  ");
                line.push_str(&lpad(cell, *w));
            }
            writeln!(out, "{}", line.trim_end()).unwrap();
        }
        out
    }
}
