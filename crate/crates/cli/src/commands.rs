use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde_json::json;
use tdm_core::data::{derive_mask, format_value, load_csv_detect, write_csv};
use tdm_core::imputer::{impute_with, TrainConfig};
use tdm_core::inn::StackCheckpoint;
use tdm_core::mask::{apply_mask, generate as generate_mask};
use tdm_core::metrics::{evaluate, DEFAULT_W22_MAX_N};
use tdm_core::rng::{seeded_rng, streams};
use tdm_core::theory::{run_check, CheckName};
use tdm_core::{synth, Dataset, MaskSpec, MissingMask, StandardizationParams, TdmError};

use crate::args::{CheckArgs, Command, EvalArgs, ImputeArgs, MaskArgs, SynthArgs};
use crate::manifest::OutputDir;
use crate::{experiment, Cli, CliError, CliResult};

pub fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(a) => synth_cmd(&a),
        Command::Mask(a) => mask_cmd(&a),
        Command::Impute(a) => impute_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Check(a) => check_cmd(&a),
        Command::Experiment(a) => experiment::run(&a),
    }
}

/// Wall-clock seconds since `start`, or zero in deterministic mode.
pub(crate) fn elapsed(start: Instant, deterministic: bool) -> f64 {
    if deterministic {
        0.0
    } else {
        start.elapsed().as_secs_f64()
    }
}

pub(crate) fn load_complete(path: &Path) -> CliResult<Dataset> {
    let data = load_csv_detect(path)?;
    if data.has_missing() {
        return Err(CliError::Data(format!("{} must be complete (no missing cells)", path.display())));
    }
    Ok(data)
}

fn write_dataset(out: &mut OutputDir, name: &str, data: &Dataset) -> CliResult<()> {
    let path = out.path(name);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| crate::manifest::io_err(parent, e))?;
    }
    write_csv(data, &path)?;
    out.record(name)
}

fn write_mask(out: &mut OutputDir, name: &str, mask: &MissingMask) -> CliResult<()> {
    mask.write_csv(out.path(name))?;
    out.record(name)
}

fn synth_cmd(a: &SynthArgs) -> CliResult<()> {
    let start = Instant::now();
    let kind = synth::SynthKind::from(a.kind);
    let data = synth::generate(kind, a.n, a.noise, a.seed)?;
    let config = json!({
        "kind": kind,
        "n": a.n,
        "noise": a.noise,
        "seed": a.seed,
        "missing_rows": a.missing_rows,
    });
    let mut out = OutputDir::create(&a.output.output_dir, "synth", config)?;
    write_dataset(&mut out, "data.csv", &data)?;
    if let Some(frac) = a.missing_rows {
        let mut rng = seeded_rng(a.seed, streams::MASK);
        let mask = synth::one_missing_per_row(data.n_rows(), data.n_cols(), frac, &mut rng)?;
        write_mask(&mut out, "mask.csv", &mask)?;
        write_dataset(&mut out, "masked.csv", &apply_mask(&data, &mask)?)?;
        out.manifest_mut().details = json!({ "achieved_rate": mask.rate(), "n_missing": mask.missing_count() });
    }
    out.manifest_mut().runtime_seconds = elapsed(start, a.output.deterministic);
    out.finish()?;
    Ok(())
}

pub(crate) fn mask_spec(mechanism: tdm_core::Mechanism, shape: &crate::args::MaskShapeArgs, seed: u64) -> MaskSpec {
    MaskSpec {
        observed_col_fraction: shape.observed_fraction,
        quantile_p: shape.quantile,
        ..MaskSpec::new(mechanism, shape.rate, seed)
    }
}

fn mask_cmd(a: &MaskArgs) -> CliResult<()> {
    let start = Instant::now();
    let data = load_complete(&a.input)?;
    let spec = mask_spec(a.mechanism.into(), &a.shape, a.seed);
    let outcome = generate_mask(&data, &spec)?;
    let mut out = OutputDir::create(&a.output.output_dir, "mask", &spec)?;
    out.add_input(&a.input)?;
    write_mask(&mut out, "mask.csv", &outcome.mask)?;
    write_dataset(&mut out, "masked.csv", &apply_mask(&data, &outcome.mask)?)?;
    out.manifest_mut().details = serde_json::to_value(&outcome).map_err(TdmError::from)?;
    out.manifest_mut().runtime_seconds = elapsed(start, a.output.deterministic);
    out.finish()?;
    Ok(())
}

#[derive(serde::Serialize)]
struct ImputeCheckpoint<'a> {
    iterations: usize,
    standardization: &'a StandardizationParams,
    stack: Option<StackCheckpoint>,
}

fn impute_cmd(a: &ImputeArgs) -> CliResult<()> {
    let start = Instant::now();
    let data = load_csv_detect(&a.input)?;
    let mask = derive_mask(&data)?;
    let truth = a.truth.as_deref().map(load_complete).transpose()?;
    let cfg: TrainConfig = a.train.config();

    let mut progress = String::from("iteration,mae,rmse\n");
    let result = impute_with(&data, &cfg, |it, current| {
        if let Some(t) = &truth {
            if mask.missing_count() > 0 {
                let r = evaluate(current, t, &mask, 0)?;
                let _ = writeln!(progress, "{it},{},{}", format_value(r.mae), format_value(r.rmse));
            }
        }
        Ok(())
    })?;
    let runtime = elapsed(start, a.output.deterministic);

    let mut out = OutputDir::create(
        &a.output.output_dir,
        "impute",
        json!({ "input": a.input.display().to_string(), "train": &cfg }),
    )?;
    out.add_input(&a.input)?;
    if let Some(p) = &a.truth {
        out.add_input(p)?;
    }
    write_dataset(&mut out, "imputed.csv", &result.imputed)?;

    let mut trace = String::from("iteration,loss\n");
    for (i, l) in result.scaled.trace.loss_per_iter.iter().enumerate() {
        let _ = writeln!(trace, "{},{}", i + 1, format_value(*l));
    }
    out.write_text("trace.csv", &trace)?;
    out.manifest_mut().trace_path = Some("trace.csv".into());
    if truth.is_some() && cfg.checkpoint_every > 0 {
        out.write_text("progress.csv", &progress)?;
    }

    let stack = result.scaled.stack.as_ref();
    out.write_json(
        "checkpoint.json",
        &ImputeCheckpoint {
            iterations: cfg.iterations,
            standardization: &result.params,
            stack: stack.map(|s| s.to_checkpoint()),
        },
    )?;
    if let Some(stack) = stack {
        let views = stack.forward_views(result.scaled.imputed.values().view())?;
        for (k, v) in views.into_iter().enumerate() {
            write_dataset(&mut out, &format!("views/block_{}.csv", k + 1), &Dataset::new(v)?)?;
        }
    }

    if let (Some(t), true) = (&truth, mask.missing_count() > 0) {
        let mut report = evaluate(&result.imputed, t, &mask, DEFAULT_W22_MAX_N)?;
        report.runtime_seconds = runtime;
        out.manifest_mut().metrics = Some(report);
    }
    out.manifest_mut().details = json!({
        "mode": cfg.mode,
        "effective_batch_size": result.scaled.batch_size,
        "epsilon": result.scaled.epsilon,
        "n_missing": mask.missing_count(),
        "final_loss": result.scaled.trace.loss_per_iter.last(),
    });
    out.manifest_mut().runtime_seconds = runtime;
    out.finish()?;
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> CliResult<()> {
    let imputed = load_complete(&a.imputed)?;
    let truth = load_complete(&a.truth)?;
    let mask = MissingMask::load_csv(&a.mask)?;
    let report = evaluate(&imputed, &truth, &mask, a.max_n)?;
    println!("{}", serde_json::to_string(&report).map_err(TdmError::from)?);
    if let Some(dir) = &a.output_dir {
        let mut out = OutputDir::create(dir, "eval", json!({ "max_n": a.max_n }))?;
        for p in [&a.imputed, &a.truth, &a.mask] {
            out.add_input(p)?;
        }
        out.write_json("metrics.json", &report)?;
        out.manifest_mut().metrics = Some(report);
        out.finish()?;
    }
    Ok(())
}

fn check_cmd(a: &CheckArgs) -> CliResult<()> {
    let names: Vec<CheckName> = if a.which == "all" {
        CheckName::ALL.to_vec()
    } else {
        vec![a.which.parse().map_err(|e: TdmError| CliError::Usage(e.to_string()))?]
    };
    let mut lines = String::new();
    let mut failed = 0;
    for name in &names {
        let report = run_check(*name, a.trials.unwrap_or(name.default_trials()), a.seed)?;
        let line = report.to_json_line();
        println!("{line}");
        lines.push_str(&line);
        lines.push('\n');
        failed += usize::from(!report.passed);
    }
    if let Some(dir) = &a.output_dir {
        let mut out = OutputDir::create(dir, "check", json!({ "which": a.which, "trials": a.trials, "seed": a.seed }))?;
        out.write_text("checks.jsonl", &lines)?;
        out.finish()?;
    }
    if failed > 0 {
        return Err(CliError::CheckFailed {
            failed,
            total: names.len(),
        });
    }
    Ok(())
}
