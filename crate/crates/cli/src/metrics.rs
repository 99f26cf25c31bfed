//! Append-only CSV metrics log.
//!
//! Training rows fill the loss columns, evaluation rows fill `n_steps`,
//! `metric` and `value`. `wall_ms` is written as `NA` so that identical runs
//! produce identical files.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use maniflow_core::tasks::EvalReport;
use maniflow_core::train::StepStats;

pub const HEADER: &str = "row,step,fm_loss,ct_loss,joint_loss,grad_norm,wall_ms,n_steps,metric,value";

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn train_row(s: &StepStats) -> String {
    format!("train,{},{},{},{},{},NA,,,", s.step, opt(s.fm_loss), opt(s.ct_loss), s.joint_loss, s.grad_norm)
}

pub fn eval_rows(step: u64, report: &EvalReport) -> Vec<String> {
    report.rows.iter().map(|r| format!("eval,{step},,,,,NA,{},{},{}", r.n_steps, r.metric, r.value)).collect()
}

fn row_step(line: &str) -> Result<u64> {
    let step = line.split(',').nth(1).with_context(|| format!("malformed metrics row: {line}"))?;
    step.parse().with_context(|| format!("bad step in metrics row: {line}"))
}

pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
    last_step: u64,
}

impl MetricsLog {
    /// Starts a fresh log.
    pub fn create(path: &Path) -> Result<Self> {
        let mut f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        writeln!(f, "{HEADER}")?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(f), last_step: 0 })
    }

    /// Reopens a log for a run resumed at `step`, dropping rows written after
    /// that step by the interrupted run.
    pub fn resume(path: &Path, step: u64) -> Result<Self> {
        if !path.exists() {
            return Self::create(path);
        }
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            bail!("{} does not start with the metrics header", path.display());
        }
        let mut kept = vec![HEADER.to_string()];
        let mut last = 0;
        for line in lines {
            let s = row_step(line)?;
            if s <= step {
                kept.push(line.to_string());
                last = last.max(s);
            }
        }
        fs::write(path, kept.join("\n") + "\n")?;
        let f = OpenOptions::new().append(true).open(path)?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(f), last_step: last })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn write_line(&mut self, step: u64, line: &str) -> Result<()> {
        ensure!(step >= self.last_step, "metrics step {step} after {}", self.last_step);
        self.last_step = step;
        writeln!(self.out, "{line}")?;
        Ok(())
    }

    pub fn log_train(&mut self, s: &StepStats) -> Result<()> {
        self.write_line(s.step, &train_row(s))
    }

    pub fn log_eval(&mut self, step: u64, report: &EvalReport) -> Result<()> {
        for line in eval_rows(step, report) {
            self.write_line(step, &line)?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// A parsed log row.
#[derive(Debug, Clone, PartialEq)]
pub enum LogRow {
    Train { step: u64, fm_loss: Option<f64>, ct_loss: Option<f64>, joint_loss: f64, grad_norm: f64 },
    Eval { step: u64, n_steps: usize, metric: String, value: f64 },
}

pub fn parse(text: &str) -> Result<Vec<LogRow>> {
    let mut lines = text.lines();
    match lines.next() {
        None => return Ok(Vec::new()),
        Some(h) if h == HEADER => {}
        Some(h) => bail!("unexpected metrics header: {h}"),
    }
    let num = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            Ok(Some(s.parse().with_context(|| format!("bad number {s:?}"))?))
        }
    };
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            ensure!(f.len() == 10, "metrics row has {} fields: {line}", f.len());
            let step = f[1].parse().with_context(|| format!("bad step: {line}"))?;
            match f[0] {
                "train" => Ok(LogRow::Train {
                    step,
                    fm_loss: num(f[2])?,
                    ct_loss: num(f[3])?,
                    joint_loss: num(f[4])?.context("missing joint loss")?,
                    grad_norm: num(f[5])?.context("missing gradient norm")?,
                }),
                "eval" => Ok(LogRow::Eval {
                    step,
                    n_steps: f[7].parse().with_context(|| format!("bad n_steps: {line}"))?,
                    metric: f[8].to_string(),
                    value: num(f[9])?.context("missing value")?,
                }),
                other => bail!("unknown row type {other:?}"),
            }
        })
        .collect()
}

/// Writes an evaluation report as `n_steps,metric,value`.
pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let mut s = String::from("n_steps,metric,value\n");
    for r in &report.rows {
        s.push_str(&format!("{},{},{}\n", r.n_steps, r.metric, r.value));
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}
