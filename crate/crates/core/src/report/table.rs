use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::data::DatasetName;
use crate::eval::MetricsReport;
use crate::train::Pipeline;

pub const DEFAULT_FRACS: [f64; 4] = [0.05, 0.1, 0.25, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosthocCell {
    pub pa: f64,
    pub ace: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpvitCell {
    pub lambda: f64,
    pub pa: f64,
    pub ace: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub frac: f64,
    pub posthoc: Option<PosthocCell>,
    pub expvit: Option<ExpvitCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub dataset: DatasetName,
    pub rows: Vec<TableRow>,
    pub blackbox_acc: Option<f64>,
}

fn same_frac(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-9
}

fn r3(v: f64) -> String {
    format!("{v:.3}")
}

impl ResultsTable {
    /// Builds the table for one dataset. Later ledger records for the same
    /// cell supersede earlier ones; among λ values the one with the highest
    /// PA + ACE represents each frac.
    pub fn from_ledger(records: &[MetricsReport], dataset: DatasetName, fracs: &[f64]) -> Self {
        let mut latest: BTreeMap<&str, &MetricsReport> = BTreeMap::new();
        for r in records.iter().filter(|r| r.dataset == dataset) {
            latest.insert(&r.cell, r);
        }
        let mut ordered: Vec<&MetricsReport> = latest.into_values().collect();
        ordered.sort_by(|a, b| a.cell.cmp(&b.cell));

        let blackbox_acc = records
            .iter()
            .rev()
            .find(|r| r.dataset == dataset && r.method == Pipeline::Posthoc)
            .map(|r| r.acc);

        let rows = fracs
            .iter()
            .map(|&frac| {
                let posthoc = ordered
                    .iter()
                    .rfind(|r| r.method == Pipeline::Posthoc && same_frac(r.frac, frac))
                    .map(|r| PosthocCell { pa: r.pa, ace: r.ace });
                let mut best: Option<&MetricsReport> = None;
                for r in ordered
                    .iter()
                    .filter(|r| r.method == Pipeline::Expvit && same_frac(r.frac, frac))
                {
                    if best.is_none_or(|b| r.pa + r.ace > b.pa + b.ace) {
                        best = Some(r);
                    }
                }
                let expvit = best.map(|r| ExpvitCell {
                    lambda: r.lambda.unwrap_or(f64::NAN),
                    pa: r.pa,
                    ace: r.ace,
                    acc: r.acc,
                });
                TableRow { frac, posthoc, expvit }
            })
            .collect();
        ResultsTable {
            dataset,
            rows,
            blackbox_acc,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.blackbox_acc.is_some() && self.rows.iter().all(|r| r.posthoc.is_some() && r.expvit.is_some())
    }

    /// Which method wins PA and ACE on a row, at display precision.
    fn winners(row: &TableRow) -> (Option<&'static str>, Option<&'static str>) {
        let (Some(p), Some(e)) = (row.posthoc, row.expvit) else {
            return (None, None);
        };
        let pick = |a: f64, b: f64| {
            let (a, b) = ((a * 1000.0).round(), (b * 1000.0).round());
            if a > b {
                "posthoc"
            } else if b > a {
                "expvit"
            } else {
                "tie"
            }
        };
        (Some(pick(p.pa, e.pa)), Some(pick(p.ace, e.ace)))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "frac,posthoc_pa,posthoc_ace,lambda,expvit_pa,expvit_ace,expvit_acc,best_pa,best_ace,blackbox_acc\n",
        );
        let bb = self.blackbox_acc.map(r3).unwrap_or_default();
        for row in &self.rows {
            let (pp, pa) = row.posthoc.map(|c| (r3(c.pa), r3(c.ace))).unwrap_or_default();
            let (l, ep, ea, ec) = row
                .expvit
                .map(|c| (format!("{}", c.lambda), r3(c.pa), r3(c.ace), r3(c.acc)))
                .unwrap_or_default();
            let (wp, wa) = Self::winners(row);
            writeln!(
                s,
                "{},{pp},{pa},{l},{ep},{ea},{ec},{},{},{bb}",
                row.frac,
                wp.unwrap_or(""),
                wa.unwrap_or("")
            )
            .expect("write to string");
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let bold = |v: String, on: bool| if on { format!("**{v}**") } else { v };
        let mut s = String::new();
        writeln!(
            s,
            "| frac | post-hoc PA | post-hoc ACE | λ | expViT PA | expViT ACE | expViT ACC |"
        )
        .unwrap();
        writeln!(s, "|---|---|---|---|---|---|---|").unwrap();
        for row in &self.rows {
            let (wp, wa) = Self::winners(row);
            let post = |win: Option<&str>| matches!(win, Some("posthoc") | Some("tie"));
            let exp = |win: Option<&str>| matches!(win, Some("expvit") | Some("tie"));
            let (pp, pa) = match row.posthoc {
                Some(c) => (bold(r3(c.pa), post(wp)), bold(r3(c.ace), post(wa))),
                None => ("-".into(), "-".into()),
            };
            let (l, ep, ea, ec) = match row.expvit {
                Some(c) => (
                    format!("{}", c.lambda),
                    bold(r3(c.pa), exp(wp)),
                    bold(r3(c.ace), exp(wa)),
                    r3(c.acc),
                ),
                None => ("-".into(), "-".into(), "-".into(), "-".into()),
            };
            writeln!(s, "| {} | {pp} | {pa} | {l} | {ep} | {ea} | {ec} |", row.frac).unwrap();
        }
        writeln!(s).unwrap();
        match self.blackbox_acc {
            Some(a) => writeln!(
                s,
                "Post-hoc explainer ViT vs. expViT on {}. Black-box model had ACC of {}",
                self.dataset,
                r3(a)
            ),
            None => writeln!(
                s,
                "Post-hoc explainer ViT vs. expViT on {}. Black-box ACC unavailable",
                self.dataset
            ),
        }
        .unwrap();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::tests::record;

    fn ledger() -> Vec<MetricsReport> {
        let mut v = Vec::new();
        for (i, &f) in DEFAULT_FRACS.iter().enumerate() {
            v.push(record(Pipeline::Posthoc, f, None, 0.80 + 0.01 * i as f64, 0.2, 0.993));
            v.push(record(Pipeline::Expvit, f, Some(0.9), 0.93, 0.42, 0.97));
            v.push(record(Pipeline::Expvit, f, Some(0.5), 0.60, 0.10, 0.97));
        }
        v
    }

    #[test]
    fn four_rows_with_best_lambda() {
        let t = ResultsTable::from_ledger(&ledger(), DatasetName::Mnist, &DEFAULT_FRACS);
        assert_eq!(t.rows.len(), 4);
        assert!(t.is_complete());
        assert!(t.rows.iter().all(|r| r.expvit.unwrap().lambda == 0.9));
        assert_eq!(t.blackbox_acc, Some(0.993));
    }

    #[test]
    fn csv_and_markdown_carry_the_same_numbers() {
        let t = ResultsTable::from_ledger(&ledger(), DatasetName::Mnist, &DEFAULT_FRACS);
        let csv = t.to_csv();
        let md = t.to_markdown();
        let nums = |s: &str| -> Vec<String> {
            s.split(|c: char| !(c.is_ascii_digit() || c == '.'))
                .filter(|t| t.len() == 5 && t.starts_with("0."))
                .map(String::from)
                .collect()
        };
        let mut a = nums(&csv);
        let mut b = nums(&md);
        a.sort();
        a.dedup();
        b.sort();
        b.dedup();
        assert_eq!(a, b);
        assert!(md.contains("Black-box model had ACC of 0.993"));
        assert!(md.contains("**0.930**"));
        assert!(csv
            .lines()
            .next()
            .unwrap()
            .starts_with("frac,posthoc_pa,posthoc_ace,lambda,expvit_pa,expvit_ace,expvit_acc"));
    }

    #[test]
    fn missing_cells_leave_gaps() {
        let mut l = ledger();
        l.retain(|r| !(r.method == Pipeline::Posthoc && r.frac == 0.25));
        let t = ResultsTable::from_ledger(&l, DatasetName::Mnist, &DEFAULT_FRACS);
        assert!(!t.is_complete());
        assert!(t.to_markdown().contains("| 0.25 | - | - |"));
        assert!(t.to_csv().contains("\n0.25,,,0.9,"));
    }

    #[test]
    fn later_records_supersede() {
        let mut l = ledger();
        let mut again = record(Pipeline::Expvit, 0.05, Some(0.9), 0.5, 0.1, 0.9);
        again.cell = l[1].cell.clone();
        l.push(again);
        let t = ResultsTable::from_ledger(&l, DatasetName::Mnist, &DEFAULT_FRACS);
        assert_eq!(t.rows[0].expvit.unwrap().pa, 0.6); // the 0.5 lambda now wins
    }
}
