//! Summaries over finished runs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

use super::scenario::{MetricsRow, METRICS_FIXED_COLUMNS};

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSummary {
    pub scenario: String,
    pub rounds: usize,
    pub final_accuracy: f64,
    pub final_asr: Option<f64>,
    pub asr_at_40: Option<f64>,
    pub max_asr: Option<f64>,
    /// From a `cross_domain.csv` next to the metrics file, when present.
    pub cross_domain: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsolatedVsGlobal {
    pub global: String,
    pub isolated: String,
    pub global_mean: f64,
    pub isolated_off_diagonal_mean: f64,
    pub isolated_diagonal_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub summaries: Vec<ScenarioSummary>,
    pub comparisons: Vec<IsolatedVsGlobal>,
    /// `scenario,round,accuracy,loss,asr` for every row of every input.
    pub plot_csv: String,
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    parse_metrics_csv(&text).map_err(|e| match e {
        Error::MalformedCsv(m) => Error::MalformedCsv(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r
        .headers()
        .map_err(|e| Error::MalformedCsv(e.to_string()))?
        .clone();
    for (k, want) in METRICS_FIXED_COLUMNS.iter().enumerate() {
        if header.get(k) != Some(*want) {
            return Err(Error::MalformedCsv(format!("column {k} should be `{want}`")));
        }
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::MalformedCsv(e.to_string()))?;
        let num = |k: usize| -> Result<f64> {
            rec.get(k)
                .unwrap_or("")
                .parse::<f64>()
                .map_err(|e| Error::MalformedCsv(format!("row {}: column {k}: {e}", line + 1)))
        };
        let opt = |k: usize| -> Result<Option<f64>> {
            match rec.get(k).unwrap_or("") {
                "" => Ok(None),
                _ => num(k).map(Some),
            }
        };
        let consensus = (METRICS_FIXED_COLUMNS.len()..rec.len())
            .map(opt)
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        rows.push(MetricsRow {
            round: num(0)? as usize,
            accuracy: num(1)?,
            loss: num(2)?,
            asr: opt(3)?,
            accepted: num(4)? as usize,
            slashed_total: num(5)?,
            reward_trainers: num(6)?,
            reward_validators: num(7)?,
            consensus,
        });
    }
    Ok(rows)
}

fn read_cross_domain(path: &Path) -> Result<Matrix> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|e| Error::MalformedCsv(format!("{}: {e}", path.display()))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Matrix::from_rows(rows)
}

fn scenario_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if stem == "metrics" {
        if let Some(dir) = path.parent().and_then(Path::file_name) {
            return dir.to_string_lossy().into_owned();
        }
    }
    stem
}

pub fn summarize(path: &Path) -> Result<ScenarioSummary> {
    let rows = read_metrics_csv(path)?;
    let last = rows
        .last()
        .ok_or_else(|| Error::MalformedCsv(format!("{}: no data rows", path.display())))?;
    let sibling: PathBuf = path.with_file_name("cross_domain.csv");
    let cross_domain = if sibling.exists() {
        Some(read_cross_domain(&sibling)?)
    } else {
        None
    };
    Ok(ScenarioSummary {
        scenario: scenario_name(path),
        rounds: rows.len(),
        final_accuracy: last.accuracy,
        final_asr: last.asr,
        asr_at_40: rows.iter().find(|r| r.round == 40).and_then(|r| r.asr),
        max_asr: rows.iter().filter_map(|r| r.asr).reduce(f64::max),
        cross_domain,
    })
}

/// Mean of the off-diagonal entries of a square matrix.
pub fn off_diagonal_mean(m: &Matrix) -> f64 {
    let n = m.rows().min(m.cols());
    let mut sum = 0.0;
    let mut count = 0;
    for a in 0..n {
        for b in 0..n {
            if a != b {
                sum += m.get(a, b);
                count += 1;
            }
        }
    }
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

pub fn diagonal_mean(m: &Matrix) -> f64 {
    let n = m.rows().min(m.cols());
    (0..n).map(|a| m.get(a, a)).sum::<f64>() / n as f64
}

pub fn report(paths: &[PathBuf]) -> Result<Report> {
    if paths.is_empty() {
        return Err(Error::Empty("report needs at least one metrics file".into()));
    }
    let summaries = paths.iter().map(|p| summarize(p)).collect::<Result<Vec<_>>>()?;

    let mut comparisons = Vec::new();
    for g in &summaries {
        let Some(gm) = g.cross_domain.as_ref().filter(|m| m.rows() == 1) else {
            continue;
        };
        for s in &summaries {
            let Some(sm) = s.cross_domain.as_ref().filter(|m| m.rows() > 1) else {
                continue;
            };
            comparisons.push(IsolatedVsGlobal {
                global: g.scenario.clone(),
                isolated: s.scenario.clone(),
                global_mean: gm.row(0).iter().sum::<f64>() / gm.cols() as f64,
                isolated_off_diagonal_mean: off_diagonal_mean(sm),
                isolated_diagonal_mean: diagonal_mean(sm),
            });
        }
    }

    let mut plot_csv = String::from("scenario,round,accuracy,loss,asr\n");
    for (p, s) in paths.iter().zip(&summaries) {
        for r in read_metrics_csv(p)? {
            let asr = r.asr.map(|a| a.to_string()).unwrap_or_default();
            writeln!(plot_csv, "{},{},{},{},{}", s.scenario, r.round, r.accuracy, r.loss, asr)
                .expect("write to string");
        }
    }
    Ok(Report {
        summaries,
        comparisons,
        plot_csv,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Report {
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("scenario,rounds,final_accuracy,final_asr,asr_at_40,max_asr\n");
        for s in &self.summaries {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                s.scenario,
                s.rounds,
                s.final_accuracy,
                opt(s.final_asr),
                opt(s.asr_at_40),
                opt(s.max_asr)
            )
            .expect("write to string");
        }
        out
    }

    pub fn markdown(&self) -> String {
        let mut out = String::from("# Run summary\n\n| scenario | rounds | final acc | final ASR | ASR@40 |\n|---|---|---|---|---|\n");
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.1}%", 100.0 * x));
        for s in &self.summaries {
            writeln!(
                out,
                "| {} | {} | {} | {} | {} |",
                s.scenario,
                s.rounds,
                pct(Some(s.final_accuracy)),
                pct(s.final_asr),
                pct(s.asr_at_40)
            )
            .expect("write to string");
        }
        for s in &self.summaries {
            let Some(m) = &s.cross_domain else { continue };
            writeln!(out, "\n## Cross-domain accuracy: {}\n", s.scenario).expect("write to string");
            let mut header = String::from("| model |");
            let mut rule = String::from("|---|");
            for b in 0..m.cols() {
                write!(header, " d{b} |").expect("write to string");
                rule.push_str("---|");
            }
            writeln!(out, "{header}\n{rule}").expect("write to string");
            for a in 0..m.rows() {
                let cells: Vec<String> = m.row(a).iter().map(|v| format!("{:.3}", v)).collect();
                writeln!(out, "| {a} | {} |", cells.join(" | ")).expect("write to string");
            }
        }
        if !self.comparisons.is_empty() {
            out.push_str("\n## Isolated vs global\n\n| global | isolated | global mean | isolated off-diagonal | isolated diagonal |\n|---|---|---|---|---|\n");
            for c in &self.comparisons {
                writeln!(
                    out,
                    "| {} | {} | {:.3} | {:.3} | {:.3} |",
                    c.global, c.isolated, c.global_mean, c.isolated_off_diagonal_mean, c.isolated_diagonal_mean
                )
                .expect("write to string");
            }
        }
        out
    }

    /// Writes `summary.csv`, `summary.md`, and `plot.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("summary.csv"), self.summary_csv())?;
        std::fs::write(dir.join("summary.md"), self.markdown())?;
        std::fs::write(dir.join("plot.csv"), &self.plot_csv)?;
        Ok(())
    }
}
