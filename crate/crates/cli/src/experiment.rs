//! Mechanism-by-seed sweeps comparing the transformed imputer with the
//! identity baseline.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use serde_json::json;
use tdm_core::data::format_value;
use tdm_core::imputer::{impute, Mode};
use tdm_core::mask::{apply_mask, generate as generate_mask};
use tdm_core::metrics::evaluate;
use tdm_core::{Dataset, Mechanism};

use crate::args::ExperimentArgs;
use crate::commands::{elapsed, load_complete, mask_spec};
use crate::manifest::{io_err, OutputDir};
use crate::{CliError, CliResult, THREADS_ENV};

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const RESULTS_HEADER: &str = "mechanism,seed,method,mae,rmse,w22,runtime_seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub mechanism: Mechanism,
    pub seed: u64,
    pub method: &'static str,
    pub mae: f64,
    pub rmse: f64,
    pub w22: Option<f64>,
    pub runtime_seconds: f64,
}

impl ResultRow {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.mechanism,
            self.seed,
            self.method,
            format_value(self.mae),
            format_value(self.rmse),
            self.w22.map(format_value).unwrap_or_default(),
            format_value(self.runtime_seconds)
        )
    }
}

pub fn method_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Tdm => "tdm",
        Mode::BaselineIdentity => "baseline",
    }
}

/// Worker count: one when deterministic, else `TDM_THREADS` or the number
/// of available cores, never more than `cells`.
pub fn thread_count(deterministic: bool, cells: usize) -> CliResult<usize> {
    if deterministic {
        return Ok(1);
    }
    let cap = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    Ok(cap.min(cells).max(1))
}

fn run_cell(truth: &Dataset, mechanism: Mechanism, seed: u64, a: &ExperimentArgs) -> CliResult<Vec<ResultRow>> {
    let spec = mask_spec(mechanism, &a.shape, seed);
    let mask = generate_mask(truth, &spec)?.mask;
    let masked = apply_mask(truth, &mask)?;
    let mut rows = Vec::with_capacity(2);
    for mode in [Mode::Tdm, Mode::BaselineIdentity] {
        let cfg = tdm_core::TrainConfig {
            mode,
            seed,
            ..a.train.config()
        };
        let start = Instant::now();
        let out = impute(&masked, &cfg)?;
        let runtime_seconds = elapsed(start, a.output.deterministic);
        let report = evaluate(&out.imputed, truth, &mask, a.max_n)?;
        rows.push(ResultRow {
            mechanism,
            seed,
            method: method_name(mode),
            mae: report.mae,
            rmse: report.rmse,
            w22: report.w22,
            runtime_seconds,
        });
    }
    Ok(rows)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Mean and sample standard deviation per (mechanism, method), plus the
/// number of seeds on which the method's MAE is strictly below the other
/// method's.
pub fn summarize(rows: &[ResultRow]) -> String {
    let mut groups: Vec<((Mechanism, &str), Vec<&ResultRow>)> = Vec::new();
    for r in rows {
        match groups.iter_mut().find(|(k, _)| *k == (r.mechanism, r.method)) {
            Some((_, v)) => v.push(r),
            None => groups.push(((r.mechanism, r.method), vec![r])),
        }
    }
    let mut by_seed: BTreeMap<(String, u64), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        by_seed.entry((r.mechanism.to_string(), r.seed)).or_default().push(r);
    }
    let mut out = String::from(
        "mechanism,method,runs,mae_mean,mae_std,rmse_mean,rmse_std,w22_mean,w22_std,runtime_mean,mae_wins\n",
    );
    for ((mechanism, method), members) in &groups {
        let pick = |f: fn(&ResultRow) -> Option<f64>| members.iter().filter_map(|r| f(r)).collect::<Vec<_>>();
        let fmt = |xs: Vec<f64>| {
            if xs.is_empty() {
                (String::new(), String::new())
            } else {
                let (m, s) = mean_std(&xs);
                (format_value(m), format_value(s))
            }
        };
        let (mae_m, mae_s) = fmt(pick(|r| Some(r.mae)));
        let (rmse_m, rmse_s) = fmt(pick(|r| Some(r.rmse)));
        let (w_m, w_s) = fmt(pick(|r| r.w22));
        let (rt_m, _) = fmt(pick(|r| Some(r.runtime_seconds)));
        let wins = members
            .iter()
            .filter(|r| {
                by_seed[&(mechanism.to_string(), r.seed)]
                    .iter()
                    .filter(|o| o.method != *method)
                    .all(|o| r.mae < o.mae)
            })
            .count();
        out.push_str(&format!(
            "{mechanism},{method},{},{mae_m},{mae_s},{rmse_m},{rmse_s},{w_m},{w_s},{rt_m},{wins}\n",
            members.len()
        ));
    }
    out
}

pub fn run(a: &ExperimentArgs) -> CliResult<()> {
    if a.mechanisms.is_empty() || a.seeds == 0 {
        return Err(CliError::Usage("need at least one mechanism and one seed".into()));
    }
    let start = Instant::now();
    let truth = load_complete(&a.input)?;
    let cells: Vec<(Mechanism, u64)> = a
        .mechanisms
        .iter()
        .flat_map(|&m| (0..a.seeds).map(move |k| (Mechanism::from(m), a.train.seed + k)))
        .collect();
    let threads = thread_count(a.output.deterministic, cells.len())?;

    let config = json!({
        "input": a.input.display().to_string(),
        "mechanisms": cells.iter().map(|c| c.0).collect::<Vec<_>>().chunks(a.seeds as usize).map(|c| c[0]).collect::<Vec<_>>(),
        "seeds": cells.iter().take(a.seeds as usize).map(|c| c.1).collect::<Vec<_>>(),
        "rate": a.shape.rate,
        "observed_fraction": a.shape.observed_fraction,
        "quantile": a.shape.quantile,
        "max_n": a.max_n,
        "train": a.train.config(),
    });
    let mut out = OutputDir::create(&a.output.output_dir, "experiment", config)?;
    out.add_input(&a.input)?;

    let results_path = out.path(RESULTS_FILE);
    let file = File::create(&results_path).map_err(|e| io_err(&results_path, e))?;
    let mut writer = BufWriter::new(file);
    let mut emit = |line: &str| -> CliResult<()> {
        writeln!(writer, "{line}")
            .and_then(|_| writer.flush())
            .map_err(|e| CliError::from(io_err(&results_path, e)))
    };
    emit(RESULTS_HEADER)?;

    let next = AtomicUsize::new(0);
    let cancelled = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<(usize, CliResult<Vec<ResultRow>>)>();
    let mut rows: Vec<ResultRow> = Vec::new();
    let mut failure: Option<CliError> = None;
    std::thread::scope(|scope| {
        for _ in 0..threads {
            let tx = tx.clone();
            let (next, cancelled, cells, truth) = (&next, &cancelled, &cells, &truth);
            scope.spawn(move || loop {
                if cancelled.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(mechanism, seed)) = cells.get(i) else { break };
                if tx.send((i, run_cell(truth, mechanism, seed, a))).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        // flush rows in cell order as soon as a contiguous prefix is ready
        let mut pending: BTreeMap<usize, CliResult<Vec<ResultRow>>> = BTreeMap::new();
        let mut written = 0;
        for (i, result) in rx {
            pending.insert(i, result);
            while failure.is_none() {
                let Some(result) = pending.remove(&written) else { break };
                written += 1;
                match result.and_then(|cell_rows| {
                    for r in &cell_rows {
                        emit(&r.csv_line())?;
                    }
                    Ok(cell_rows)
                }) {
                    Ok(cell_rows) => rows.extend(cell_rows),
                    Err(e) => {
                        cancelled.store(true, Ordering::SeqCst);
                        failure = Some(e);
                    }
                }
            }
        }
    });
    out.record(RESULTS_FILE)?;

    if let Some(e) = failure {
        out.manifest_mut().details = json!({ "completed_rows": rows.len(), "error": e.to_string() });
        out.finish()?;
        return Err(e);
    }
    out.write_text(SUMMARY_FILE, &summarize(&rows))?;
    out.manifest_mut().details = json!({ "rows": rows.len(), "threads": threads });
    out.manifest_mut().runtime_seconds = elapsed(start, a.output.deterministic);
    out.finish()?;
    Ok(())
}
