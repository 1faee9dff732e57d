use std::fs;
use std::path::Path;

use tdm_cli::{run, EXIT_CHECK, EXIT_DATA, EXIT_OK, EXIT_USAGE};
use tdm_core::data::{load_csv_detect, write_csv};
use tdm_core::{Dataset, MissingMask};

fn tdm(args: &[&str]) -> u8 {
    run(std::iter::once("tdm").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Synthesises two-circles data with one hidden coordinate in 40% of rows.
fn synth(dir: &Path) {
    let code = tdm(&["synth", "--kind", "two-circles", "--n", "80", "--missing-rows", "0.4", "--seed", "5", "--output-dir", p(dir)]);
    assert_eq!(code, EXIT_OK);
}

#[test]
fn synth_writes_data_mask_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let data = load_csv_detect(tmp.path().join("data.csv")).unwrap();
    assert_eq!((data.n_rows(), data.n_cols()), (80, 2));
    let mask = MissingMask::load_csv(tmp.path().join("mask.csv")).unwrap();
    assert_eq!(mask.missing_count(), 32);
    assert!(mask.flags().rows().into_iter().all(|r| r.iter().filter(|&&f| f).count() <= 1));
    let m = json(&tmp.path().join("manifest.json"));
    assert_eq!(m["command"], "synth");
    for name in ["data.csv", "mask.csv", "masked.csv"] {
        assert_eq!(m["outputs"][name].as_str().unwrap().len(), 64);
    }
}

#[test]
fn impute_preserves_observed_cells_and_fills_all() {
    let tmp = tempfile::tempdir().unwrap();
    let s = tmp.path().join("s");
    let out = tmp.path().join("i");
    synth(&s);
    let code = tdm(&[
        "impute", "--input", p(&s.join("masked.csv")), "--truth", p(&s.join("data.csv")),
        "--iters", "60", "--batch-size", "16", "--checkpoint-every", "20", "--output-dir", p(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    let masked = load_csv_detect(s.join("masked.csv")).unwrap();
    let imputed = load_csv_detect(out.join("imputed.csv")).unwrap();
    assert!(!imputed.has_missing());
    for (a, b) in masked.values().iter().zip(imputed.values()) {
        if !a.is_nan() {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 61);
    let progress = fs::read_to_string(out.join("progress.csv")).unwrap();
    assert_eq!(progress.lines().count(), 4);
    for k in 1..=3 {
        assert!(out.join(format!("views/block_{k}.csv")).exists());
    }
    let m = json(&out.join("manifest.json"));
    assert!(m["metrics"]["mae"].as_f64().unwrap().is_finite());
    assert_eq!(m["details"]["effective_batch_size"], 16);
    let ckpt = json(&out.join("checkpoint.json"));
    assert_eq!(ckpt["iterations"], 60);
    assert!(ckpt["stack"].is_object());
}

#[test]
fn baseline_mode_has_no_views() {
    let tmp = tempfile::tempdir().unwrap();
    let s = tmp.path().join("s");
    let out = tmp.path().join("b");
    synth(&s);
    let code = tdm(&[
        "impute", "--input", p(&s.join("masked.csv")), "--mode", "baseline", "--solver", "sinkhorn",
        "--iters", "20", "--output-dir", p(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    assert!(!out.join("views").exists());
    let m = json(&out.join("manifest.json"));
    assert!(m["details"]["epsilon"].as_f64().unwrap() > 0.0);
    assert!(json(&out.join("checkpoint.json"))["stack"].is_null());
}

#[test]
fn mask_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let s = tmp.path().join("s");
    synth(&s);
    let m = tmp.path().join("m");
    let code = tdm(&["mask", "--input", p(&s.join("data.csv")), "--mechanism", "mnarq", "--rate", "0.2", "--output-dir", p(&m)]);
    assert_eq!(code, EXIT_OK);
    let mask = MissingMask::load_csv(m.join("mask.csv")).unwrap();
    assert!((mask.rate() - 0.2).abs() < 0.1);
    // the truth scored against itself has zero error
    let e = tmp.path().join("e");
    let code = tdm(&[
        "eval", "--imputed", p(&s.join("data.csv")), "--truth", p(&s.join("data.csv")),
        "--mask", p(&m.join("mask.csv")), "--output-dir", p(&e),
    ]);
    assert_eq!(code, EXIT_OK);
    let metrics = json(&e.join("metrics.json"));
    assert_eq!(metrics["mae"], 0.0);
    assert_eq!(metrics["w22"], 0.0);
}

#[test]
fn experiment_writes_long_and_summary_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let s = tmp.path().join("s");
    synth(&s);
    let out = tmp.path().join("x");
    let code = tdm(&[
        "experiment", "--input", p(&s.join("data.csv")), "--mechanisms", "mcar,mar,mnarl,mnarq",
        "--seeds", "2", "--iters", "10", "--batch-size", "8", "--rate", "0.2", "--output-dir", p(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    let lines: Vec<&str> = results.lines().collect();
    assert_eq!(lines[0], "mechanism,seed,method,mae,rmse,w22,runtime_seconds");
    assert_eq!(lines.len(), 17);
    assert!(lines[1].starts_with("mcar,0,tdm,"));
    assert!(lines[16].starts_with("mnarq,1,baseline,"));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 9);
    for line in summary.lines().skip(1) {
        assert!(line.split(',').nth(2) == Some("2"), "{line}");
    }
}

#[test]
fn check_command_reports_and_fails_on_violation() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(tdm(&["check", "union", "--trials", "10", "--output-dir", p(tmp.path())]), EXIT_OK);
    let lines = fs::read_to_string(tmp.path().join("checks.jsonl")).unwrap();
    assert!(lines.starts_with("{\"name\":\"union\""));
    assert_eq!(tdm(&["check", "nonsense"]), EXIT_USAGE);
    // the exit code for a failed check is distinct from usage and data errors
    assert!(![EXIT_OK, EXIT_USAGE, EXIT_DATA].contains(&EXIT_CHECK));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    assert_eq!(tdm(&[]), EXIT_USAGE);
    assert_eq!(tdm(&["--help"]), EXIT_OK);
    assert_eq!(tdm(&["synth", "--kind", "nope", "--output-dir", p(&out)]), EXIT_USAGE);
    assert_eq!(tdm(&["impute", "--input", p(&tmp.path().join("missing.csv")), "--output-dir", p(&out)]), EXIT_DATA);

    // a fully missing column cannot be imputed
    let bad = tmp.path().join("bad.csv");
    let values = ndarray::array![[1.0, f64::NAN], [2.0, f64::NAN], [3.0, f64::NAN]];
    write_csv(&Dataset::new(values).unwrap(), &bad).unwrap();
    assert_eq!(tdm(&["impute", "--input", p(&bad), "--iters", "5", "--output-dir", p(&out)]), EXIT_DATA);

    // masking needs complete input
    assert_eq!(tdm(&["mask", "--input", p(&bad), "--output-dir", p(&out)]), EXIT_DATA);
    // invalid settings are usage errors
    let s = tmp.path().join("s");
    synth(&s);
    assert_eq!(tdm(&["mask", "--input", p(&s.join("data.csv")), "--rate", "1.5", "--output-dir", p(&out)]), EXIT_USAGE);
}

#[test]
fn headerless_and_headed_inputs_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let plain = tmp.path().join("plain.csv");
    let headed = tmp.path().join("headed.csv");
    fs::write(&plain, "1,2\n3,\n5,6\n7,8\n").unwrap();
    fs::write(&headed, "a,b\n1,2\n3,NaN\n5,6\n7,8\n").unwrap();
    for (input, dir) in [(&plain, "p"), (&headed, "h")] {
        let code = tdm(&["impute", "--input", p(input), "--mode", "baseline", "--iters", "5", "--deterministic", "--output-dir", p(&tmp.path().join(dir))]);
        assert_eq!(code, EXIT_OK);
    }
    let a = load_csv_detect(tmp.path().join("p/imputed.csv")).unwrap();
    let b = load_csv_detect(tmp.path().join("h/imputed.csv")).unwrap();
    assert_eq!(a.values(), b.values());
    assert_eq!(b.col_names().unwrap(), ["a", "b"]);
}
