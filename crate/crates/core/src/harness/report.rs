//! Result file naming, per-run summaries and the aggregated report table.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tta::{aggregate_runs, read_result, stream_accuracy};

/// `{dir}/{label}__tp{period}__seed{seed}.jsonl`
pub fn result_path(dir: &Path, label: &str, period: usize, seed: u64) -> PathBuf {
    dir.join(format!("{label}__tp{period}__seed{seed}.jsonl"))
}

/// Inverse of [`result_path`] on the file name.
pub fn parse_result_name(name: &str) -> Option<(String, usize, u64)> {
    let stem = name.strip_suffix(".jsonl")?;
    let mut parts = stem.rsplitn(3, "__");
    let seed = parts.next()?.strip_prefix("seed")?.parse().ok()?;
    let period = parts.next()?.strip_prefix("tp")?.parse().ok()?;
    let label = parts.next()?.to_string();
    Some((label, period, seed))
}

/// Accuracy of one method at one period across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub period: usize,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// 95% t-interval half-width; absent with a single seed.
    pub half_width: Option<f64>,
}

impl RunSummary {
    pub fn new(label: &str, period: usize, runs: &[(u64, f64)]) -> Result<Self> {
        let accuracies: Vec<f64> = runs.iter().map(|r| r.1).collect();
        let (mean, half_width) = if accuracies.len() >= 2 {
            let (m, h) = aggregate_runs(&accuracies)?;
            (m, Some(h))
        } else {
            (accuracies.first().copied().unwrap_or(f64::NAN), None)
        };
        Ok(Self {
            label: label.to_string(),
            period,
            seeds: runs.iter().map(|r| r.0).collect(),
            accuracies,
            mean,
            half_width,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub period: usize,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    /// Per-domain accuracy averaged over seeds.
    pub per_domain: BTreeMap<String, f64>,
    pub mean: f64,
    pub half_width: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub domains: Vec<String>,
    pub rows: Vec<ReportRow>,
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn mean_ci(mean: f64, half: Option<f64>) -> String {
    match half {
        Some(h) => format!("{} ± {}", pct(mean), pct(h)),
        None => pct(mean),
    }
}

/// Aligns columns: the first left-justified, the rest right-justified.
pub fn format_table(header: &[String], rows: &[Vec<String>]) -> String {
    let width = |i: usize| {
        rows.iter()
            .map(|r| r[i].chars().count())
            .chain([header[i].chars().count()])
            .max()
            .unwrap_or(0)
    };
    let widths: Vec<usize> = (0..header.len()).map(width).collect();
    let line = |cells: &[String]| {
        let mut out = String::new();
        for (i, c) in cells.iter().enumerate() {
            let pad = widths[i] - c.chars().count();
            if i == 0 {
                out.push_str(c);
                out.push_str(&" ".repeat(pad));
            } else {
                out.push_str("  ");
                out.push_str(&" ".repeat(pad));
                out.push_str(c);
            }
        }
        out.trim_end().to_string()
    };
    let mut text = line(header);
    text.push('\n');
    text.push_str(&"-".repeat(text.trim_end().chars().count()));
    text.push('\n');
    for r in rows {
        text.push_str(&line(r));
        text.push('\n');
    }
    text
}

/// Accuracy table over run summaries (sweep and ablation outputs).
pub fn summary_table(first: &str, rows: &[(String, &RunSummary)]) -> String {
    let header = [first, "T_p", "n", "accuracy (%)"].map(String::from).to_vec();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(name, s)| vec![name.clone(), s.period.to_string(), s.seeds.len().to_string(), mean_ci(s.mean, s.half_width)])
        .collect();
    format_table(&header, &body)
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut header = vec!["method".to_string(), "T_p".into(), "n".into()];
        header.extend(self.domains.iter().cloned());
        header.push("mean (%)".into());
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut cells = vec![r.method.clone(), r.period.to_string(), r.seeds.len().to_string()];
                cells.extend(self.domains.iter().map(|d| r.per_domain.get(d).map_or("-".into(), |&v| pct(v))));
                cells.push(mean_ci(r.mean, r.half_width));
                cells
            })
            .collect();
        format_table(&header, &body)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else if path.file_name().and_then(|n| n.to_str()).and_then(parse_result_name).is_some() {
            out.push(path);
        }
    }
    Ok(())
}

/// Aggregates every result file under `dir`. Accuracies are recomputed from
/// the per-step records, not read from the stored summaries.
pub fn build_report(dir: &Path) -> Result<Report> {
    let mut files = Vec::new();
    if dir.is_dir() {
        collect_files(dir, &mut files)?;
    }
    if files.is_empty() {
        return Err(Error::NoResults(dir.to_path_buf()));
    }
    files.sort();
    type Runs = Vec<(u64, f64, Vec<(String, f64)>)>;
    let mut groups: BTreeMap<(String, usize), Runs> = BTreeMap::new();
    let mut domains = BTreeSet::new();
    for f in &files {
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let (label, period, seed) = parse_result_name(name).expect("filtered by name");
        let (result, _) = read_result(f)?;
        let (acc, per) = stream_accuracy(&result);
        let per: Vec<(String, f64)> = per.into_iter().map(|d| (d.name, d.accuracy)).collect();
        domains.extend(per.iter().map(|p| p.0.clone()));
        groups.entry((label, period)).or_default().push((seed, acc, per));
    }
    let mut rows = Vec::new();
    for ((method, period), mut runs) in groups {
        runs.sort_by_key(|r| r.0);
        let summary = RunSummary::new(&method, period, &runs.iter().map(|r| (r.0, r.1)).collect::<Vec<_>>())?;
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (_, _, per) in &runs {
            for (d, a) in per {
                let e = sums.entry(d.clone()).or_default();
                e.0 += a;
                e.1 += 1;
            }
        }
        rows.push(ReportRow {
            method,
            period,
            seeds: summary.seeds,
            accuracies: summary.accuracies,
            per_domain: sums.into_iter().map(|(d, (s, n))| (d, s / n as f64)).collect(),
            mean: summary.mean,
            half_width: summary.half_width,
        });
    }
    Ok(Report {
        domains: domains.into_iter().collect(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn result_names_round_trip() {
        let p = result_path(Path::new("r"), "meta_ours_sample", 10, 3);
        let name = p.file_name().unwrap().to_str().unwrap();
        assert_eq!(parse_result_name(name), Some(("meta_ours_sample".into(), 10, 3)));
        assert_eq!(parse_result_name("beta_0.001__tp1__seed0.jsonl"), Some(("beta_0.001".into(), 1, 0)));
        assert_eq!(parse_result_name("notes.jsonl"), None);
    }

    #[test]
    fn table_alignment() {
        let t = format_table(&["a".into(), "bb".into()], &[vec!["long".into(), "1".into()]]);
        assert_eq!(t, "a     bb\n--------\nlong   1\n");
    }
}
