//! Seed-averaged tables over the runs of one scenario directory.

use std::collections::BTreeMap;
use std::path::Path;

use incdet::distill::Method;
use incdet::eval::{group_labels, joint_ratio, markdown_table, GroupLabels, GroupMeans};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::layout::ScenarioDir;
use crate::plot;
use crate::prepare::write_pretty_json;
use crate::run::RunReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub base: Option<f64>,
    pub intermediate: Option<f64>,
    pub new: Option<f64>,
    pub all: Option<f64>,
    pub joint_ratio: Option<f64>,
    /// Seed-mean headline metric after each step.
    pub per_step: Vec<f64>,
}

impl AggregateRow {
    pub fn groups(&self) -> GroupMeans {
        GroupMeans {
            base: self.base,
            intermediate: self.intermediate,
            new: self.new,
            all: self.all,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub scenario: String,
    pub metric: String,
    pub labels: Option<GroupLabels>,
    pub rows: Vec<AggregateRow>,
    /// `(method, seed)` pairs expected but without a report.
    pub missing: Vec<(Method, u64)>,
}

fn mean(v: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = v.into_iter().flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Every `<method>/<seed>/report/report.json` under the scenario directory.
pub fn load_reports(dir: &ScenarioDir) -> CliResult<Vec<RunReport>> {
    let mut out = Vec::new();
    for m in Method::ALL {
        let mdir = dir.0.join(m.name());
        let Ok(entries) = std::fs::read_dir(&mdir) else { continue };
        let mut seeds: Vec<u64> = entries
            .filter_map(|e| e.ok()?.file_name().to_str()?.parse().ok())
            .collect();
        seeds.sort_unstable();
        for seed in seeds {
            let path = dir.run(m, seed).report_json();
            if !path.exists() {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
            let r: RunReport = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            out.push(r);
        }
    }
    Ok(out)
}

/// Averages reports per method. `expected` lists the pairs that should exist.
pub fn aggregate(scenario: &str, reports: &[RunReport], expected: &[(Method, u64)]) -> Aggregate {
    let mut by_method: BTreeMap<usize, Vec<&RunReport>> = BTreeMap::new();
    for r in reports {
        let idx = Method::ALL.iter().position(|&m| m == r.method).expect("known method");
        by_method.entry(idx).or_default().push(r);
    }
    let mut rows: Vec<AggregateRow> = by_method
        .values()
        .map(|rs| {
            let steps = rs.iter().map(|r| r.per_step.len()).max().unwrap_or(0);
            let per_step = (0..steps)
                .map(|t| mean(rs.iter().map(|r| r.per_step.get(t).map(|s| s.headline))).unwrap_or(0.0))
                .collect();
            let mut hashes: Vec<&str> = rs.iter().map(|r| r.config_hash.as_str()).collect();
            hashes.dedup();
            AggregateRow {
                method: rs[0].method,
                seeds: rs.iter().map(|r| r.seed).collect(),
                config_hash: hashes.join(","),
                base: mean(rs.iter().map(|r| r.report.groups.base)),
                intermediate: mean(rs.iter().map(|r| r.report.groups.intermediate)),
                new: mean(rs.iter().map(|r| r.report.groups.new)),
                all: mean(rs.iter().map(|r| r.report.groups.all)),
                joint_ratio: None,
                per_step,
            }
        })
        .collect();
    let joint_all = rows.iter().find(|r| r.method == Method::Joint).and_then(|r| r.all);
    if let Some(j) = joint_all {
        for r in &mut rows {
            r.joint_ratio = r.all.and_then(|a| joint_ratio(a, j).ok());
        }
    }
    let have: Vec<(Method, u64)> = reports.iter().map(|r| (r.method, r.seed)).collect();
    let missing = expected.iter().filter(|p| !have.contains(p)).copied().collect();
    let first = reports.first();
    Aggregate {
        scenario: scenario.to_string(),
        metric: first.map(|r| r.report.metric.label().to_string()).unwrap_or_default(),
        labels: first.map(|r| r.report.labels.clone()),
        rows,
        missing,
    }
}

impl Aggregate {
    pub fn to_markdown(&self) -> String {
        let mut s = format!("# {} ({})\n\n", self.scenario, self.metric);
        match &self.labels {
            Some(labels) => {
                let rows: Vec<(String, GroupMeans, Option<f64>)> = self
                    .rows
                    .iter()
                    .map(|r| (r.method.label().to_string(), r.groups(), r.joint_ratio))
                    .collect();
                s.push_str(&markdown_table(labels, &rows));
                s.push('\n');
                for r in &self.rows {
                    s.push_str(&format!("- {}: seeds {:?}, config `{}`\n", r.method.label(), r.seeds, r.config_hash));
                }
            }
            None => s.push_str("No completed runs.\n"),
        }
        if !self.missing.is_empty() {
            s.push_str("\nMissing runs:\n");
            for (m, seed) in &self.missing {
                s.push_str(&format!("- {m} seed {seed}\n"));
            }
        }
        s
    }

    pub fn to_csv(&self) -> CliResult<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| CliError::Run(format!("csv: {e}"));
        w.write_record(["method", "seeds", "config_hash", "base", "intermediate", "new", "all", "joint_ratio"])
            .map_err(csv_err)?;
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
            w.write_record([
                r.method.name().to_string(),
                seeds.join(" "),
                r.config_hash.clone(),
                f(r.base),
                f(r.intermediate),
                f(r.new),
                f(r.all),
                f(r.joint_ratio),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Run(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Writes `summary.{md,csv,json}` and the plots.
    pub fn write(&self, dir: &ScenarioDir) -> CliResult<()> {
        let put = |p: &Path, text: &str| -> CliResult<()> {
            if let Some(d) = p.parent() {
                std::fs::create_dir_all(d).map_err(|e| CliError::io(format!("creating {}", d.display()), e))?;
            }
            std::fs::write(p, text).map_err(|e| CliError::io(format!("writing {}", p.display()), e))
        };
        put(&dir.summary("md"), &self.to_markdown())?;
        put(&dir.summary("csv"), &self.to_csv()?)?;
        write_pretty_json(&dir.summary("json"), self)?;
        if let Some(labels) = &self.labels {
            put(&dir.plot("groups"), &plot::group_bars(self, labels))?;
            put(&dir.plot("forgetting"), &plot::forgetting_curves(self))?;
        }
        Ok(())
    }
}

/// Parses a summary CSV back into `(method, [base, intermediate, new, all, ratio])`.
pub fn parse_csv(text: &str) -> CliResult<Vec<(String, [Option<f64>; 5])>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::Config(format!("csv: {e}")))?;
        let num = |i: usize| -> CliResult<Option<f64>> {
            let s = &rec[i];
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|e| CliError::Config(format!("csv value '{s}': {e}")))
            }
        };
        out.push((rec[0].to_string(), [num(3)?, num(4)?, num(5)?, num(6)?, num(7)?]));
    }
    Ok(out)
}

/// Labels for a scenario without any report, for empty tables.
pub fn labels_for(steps: &[Vec<u32>]) -> GroupLabels {
    group_labels(steps)
}
