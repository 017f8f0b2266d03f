use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::manifest::ImagePair;
use crate::error::{Error, Result};

/// Percentage rounded to two decimals, as reported.
pub fn round2(pct: f64) -> f64 {
    (pct * 100.0).round() / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleRate {
    pub style: String,
    pub passed: usize,
    pub total: usize,
}

impl StyleRate {
    /// Unrounded percentage; 0 for an empty style.
    pub fn percent(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.passed as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsabilityReport {
    pub styles: Vec<StyleRate>,
}

impl UsabilityReport {
    /// Unweighted mean of per-style percentages.
    pub fn average(&self) -> f64 {
        if self.styles.is_empty() {
            return 0.0;
        }
        self.styles.iter().map(StyleRate::percent).sum::<f64>() / self.styles.len() as f64
    }

    pub fn style(&self, name: &str) -> Option<&StyleRate> {
        self.styles.iter().find(|s| s.style == name)
    }
}

/// Per-style PASS rates. Every pair must already carry a verdict.
pub fn usability_rate(pairs: &[ImagePair]) -> Result<UsabilityReport> {
    let mut by: BTreeMap<&str, StyleRate> = BTreeMap::new();
    for p in pairs {
        let usable = p
            .usable()
            .ok_or_else(|| Error::Validation(format!("pair `{}` has not been filtered", p.id)))?;
        let e = by.entry(&p.style).or_insert_with(|| StyleRate {
            style: p.style.clone(),
            passed: 0,
            total: 0,
        });
        e.total += 1;
        e.passed += usize::from(usable);
    }
    Ok(UsabilityReport {
        styles: by.into_values().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub style: String,
    pub format: Option<String>,
    pub before: f64,
    pub after: f64,
}

impl ComparisonRow {
    pub fn delta(&self) -> f64 {
        self.after - self.before
    }
}

/// First-round against last-round usability per style.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsabilityComparison {
    pub before_label: String,
    pub after_label: String,
    /// Sorted by descending delta.
    pub rows: Vec<ComparisonRow>,
    pub average_before: f64,
    pub average_after: f64,
}

impl UsabilityComparison {
    /// Styles present in either report; a style absent from one side counts
    /// as 0 there. `formats` supplies the expansion column.
    pub fn new(
        before_label: &str,
        before: &UsabilityReport,
        after_label: &str,
        after: &UsabilityReport,
        formats: &BTreeMap<String, String>,
    ) -> Self {
        let mut names: Vec<&str> = before.styles.iter().chain(&after.styles).map(|s| s.style.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        let pct = |r: &UsabilityReport, n: &str| r.style(n).map_or(0.0, StyleRate::percent);
        let mut rows: Vec<ComparisonRow> = names
            .into_iter()
            .map(|n| ComparisonRow {
                style: n.to_string(),
                format: formats.get(n).cloned(),
                before: pct(before, n),
                after: pct(after, n),
            })
            .collect();
        rows.sort_by(|a, b| b.delta().total_cmp(&a.delta()).then_with(|| a.style.cmp(&b.style)));
        // averages run over the same rows, so an absent style counts as 0 here too
        let mean = |f: fn(&ComparisonRow) -> f64| {
            if rows.is_empty() {
                0.0
            } else {
                rows.iter().map(f).sum::<f64>() / rows.len() as f64
            }
        };
        let (average_before, average_after) = (mean(|r| r.before), mean(|r| r.after));
        Self {
            before_label: before_label.to_string(),
            after_label: after_label.to_string(),
            rows,
            average_before,
            average_after,
        }
    }

    pub fn average_delta(&self) -> f64 {
        self.average_after - self.average_before
    }

    /// Style, expansion format, before, after and delta columns with an
    /// average row. `top` limits the style rows.
    pub fn to_table(&self, top: Option<usize>) -> String {
        let rows = &self.rows[..top.map_or(self.rows.len(), |k| k.min(self.rows.len()))];
        let w = rows.iter().map(|r| r.style.len()).max().unwrap_or(0).max(10);
        let mut s = format!(
            "{:<w$}  {:>9}  {:>9}  {:>7}  format\n",
            "style", self.before_label, self.after_label, "delta"
        );
        for r in rows {
            s.push_str(&format!(
                "{:<w$}  {:>9.2}  {:>9.2}  {:>7.2}  {}\n",
                r.style,
                r.before,
                r.after,
                r.delta(),
                r.format.as_deref().unwrap_or("-")
            ));
        }
        s.push_str(&format!(
            "{:<w$}  {:>9.2}  {:>9.2}  {:>7.2}  -\n",
            "Average",
            self.average_before,
            self.average_after,
            self.average_delta()
        ));
        s
    }
}
