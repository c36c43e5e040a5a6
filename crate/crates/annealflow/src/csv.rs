//! Plain CSV writers. Reals are written with 17 significant digits so they
//! read back bit-exactly.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use annealflow_core::annealing::IterationReport;
use annealflow_core::diffgraph::Dense;
use annealflow_core::metrics::MetricsReport;
use annealflow_core::training::StepReport;

use crate::RunError;

pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Appends rows to a CSV file, writing `header` first if the file is new
/// or empty.
pub struct CsvWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &str) -> Result<Self, RunError> {
        let file = File::create(path).map_err(RunError::io(path))?;
        let mut w = Self { path: path.to_path_buf(), out: BufWriter::new(file) };
        w.line(header)?;
        Ok(w)
    }

    pub fn append(path: &Path, header: &str) -> Result<Self, RunError> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(RunError::io(path))?;
        let mut w = Self { path: path.to_path_buf(), out: BufWriter::new(file) };
        if fresh {
            w.line(header)?;
        }
        Ok(w)
    }

    pub fn line(&mut self, row: &str) -> Result<(), RunError> {
        writeln!(self.out, "{row}").map_err(RunError::io(&self.path))
    }

    pub fn flush(&mut self) -> Result<(), RunError> {
        self.out.flush().map_err(RunError::io(&self.path))
    }
}

impl Drop for CsvWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

/// Columns of `metrics.csv`. Each row is one of
/// * `pretrain`: final loss and target evaluations of pretraining,
/// * `anneal`: one annealing iteration,
/// * `eval`: the final evaluation.
///
/// Columns that do not apply to a row kind are left empty.
pub const METRICS_HEADER: &str = "kind,stage,t_from,t_to,buffer_ess,mean_logw,max_logw,resample_entropy,final_loss,\
target_evals,aborted_steps,nll,nll_sentinels,reverse_ess,hist_kld,hist_kld_reweighted,nll_samples,ess_samples,\
clip_fraction,modes_covered,modes_total";

const METRICS_COLUMNS: usize = 21;

fn metrics_row(cells: &[(usize, String)]) -> String {
    let mut row = vec![String::new(); METRICS_COLUMNS];
    for (i, c) in cells {
        row[*i] = c.clone();
    }
    row.join(",")
}

pub fn pretrain_row(temperature: f64, final_loss: f64, target_evals: u64, aborted: usize) -> String {
    metrics_row(&[
        (0, "pretrain".into()),
        (1, "0".into()),
        (2, num(temperature)),
        (3, num(temperature)),
        (8, num(final_loss)),
        (9, target_evals.to_string()),
        (10, aborted.to_string()),
    ])
}

pub fn iteration_row(r: &IterationReport) -> String {
    metrics_row(&[
        (0, "anneal".into()),
        (1, r.iteration.to_string()),
        (2, num(r.t_from)),
        (3, num(r.t_to)),
        (4, num(r.buffer_ess)),
        (5, num(r.mean_logw)),
        (6, num(r.max_logw)),
        (7, num(r.resample_entropy)),
        (8, num(r.final_loss)),
        (9, r.target_evals.to_string()),
        (10, r.aborted_steps.to_string()),
    ])
}

/// `coverage` is `(covered, total)` when mode coverage was measured.
pub fn eval_row(stage: usize, temperature: f64, m: &MetricsReport, coverage: Option<(usize, usize)>) -> String {
    let row = format!(
        "eval,{stage},{t},{t},,,,,,,,{}",
        m.to_csv_row(),
        t = num(temperature)
    );
    match coverage {
        Some((c, n)) => format!("{row},{c},{n}"),
        None => format!("{row},,"),
    }
}

pub const CURVES_HEADER: &str = "stage,step,loss,lr,grad_norm,removed,excluded";

pub fn curve_row(stage: usize, step: usize, r: &StepReport) -> String {
    format!(
        "{stage},{step},{},{},{},{},{}",
        num(r.loss),
        num(r.lr),
        num(r.grad_norm),
        r.removed,
        r.excluded
    )
}

/// One point per row, no header.
pub fn points_csv(x: &Dense) -> String {
    let mut s = String::with_capacity(x.rows() * x.cols() * 25);
    for r in 0..x.rows() {
        let row: Vec<String> = x.row(r).iter().map(|&v| num(v)).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<(), RunError> {
    std::fs::write(path, text).map_err(RunError::io(path))
}
