//! End-to-end checks of the command-line surface: flag documentation,
//! reference outputs, determinism of emitted files, and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_g3class"))
}

fn run_ok(args: &[&str]) -> Output {
    let output = bin().args(args).output().expect("binary runs");
    assert!(
        output.status.success(),
        "g3class {args:?} failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

fn stdout_of(args: &[&str]) -> String {
    String::from_utf8(run_ok(args).stdout).expect("stdout is UTF-8")
}

#[test]
fn help_documents_canonical_flags() {
    let cases: &[(&str, &[&str])] = &[
        ("simulate", &["--fock", "--qlp", "--events", "--seed", "--out", "--text"]),
        ("correlate", &["--input", "--tau-max", "--sections"]),
        ("oracle", &["--table1", "--fock", "--order", "--qlp"]),
        ("dataset-gen", &["--grid", "--measurements", "--seed", "--out"]),
        ("dataset-split", &["--input", "--fractions", "--seed"]),
        ("train", &["--train", "--val", "--epochs", "--batch-size", "--learning-rate"]),
        ("eval", &["--test", "--weights", "--baseline", "--target"]),
        ("classify", &["--input", "--weights", "--baseline", "--g2", "--g3"]),
        (
            "serve",
            &["--listen", "--stdio", "--weights", "--window", "--emit-every", "--max-gap"],
        ),
    ];
    for (subcommand, flags) in cases {
        let help = stdout_of(&[subcommand, "--help"]);
        for flag in *flags {
            assert!(
                help.contains(flag),
                "`{subcommand} --help` does not document {flag}"
            );
        }
    }
    // --config is global.
    assert!(stdout_of(&["--help"]).contains("--config"));
}

#[test]
fn oracle_prints_reference_table() {
    let table = stdout_of(&["oracle", "--table1"]);
    let expected = [
        "0.00\t1.00\t1.00\t1.00\t1.00\t1.00\t1.00",
        "0.25\t0.75\t0.75\t0.88\t0.75\t0.92\t0.81",
        "0.50\t0.50\t0.50\t0.75\t0.50\t0.83\t0.61",
        "0.75\t0.25\t0.25\t0.62\t0.25\t0.75\t0.42",
        "1.00\t0.00\t0.00\t0.50\t0.00\t0.67\t0.22",
    ];
    for row in expected {
        assert!(table.contains(row), "missing row {row:?} in:\n{table}");
    }
}

#[test]
fn oracle_evaluates_single_point() {
    let out = stdout_of(&["oracle", "--fock", "3", "--order", "3", "--qlp", "0.5"]);
    assert!(out.contains("0.611111"), "got {out}");
}

#[test]
fn classify_baseline_reference_point() {
    let out = stdout_of(&["classify", "--baseline", "--g2", "0.50", "--g3", "0.00"]);
    assert_eq!(out.trim(), "F2 qlp=1.000");
}

fn tmp_out(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("g3class-cli-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn simulate_correlate_pipeline_suppresses_center() {
    let out = tmp_out("pipeline");
    let out_s = out.to_str().unwrap();
    run_ok(&[
        "simulate", "--fock", "2", "--qlp", "1.0", "--events", "100000", "--seed", "7", "--out",
        out_s,
    ]);
    let record = out.join("record.fldr");
    assert!(record.exists());

    let text = stdout_of(&[
        "correlate",
        "--input",
        record.to_str().unwrap(),
        "--out",
        out_s,
    ]);
    assert!(out.join("map.flg3").exists());
    assert!(out.join("map.tsv").exists());

    // Two photons cannot produce a triple coincidence.
    let g3_zero: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("g3_zero="))
        .and_then(|rest| rest.split_whitespace().next())
        .and_then(|v| v.parse().ok())
        .expect("critical values printed");
    assert!(g3_zero < 0.02, "center value {g3_zero}");
    let _ = std::fs::remove_dir_all(&out);
}

#[test]
fn repeated_runs_emit_identical_files() {
    let a = tmp_out("det-a");
    let b = tmp_out("det-b");
    for out in [&a, &b] {
        run_ok(&[
            "simulate", "--fock", "3", "--qlp", "0.5", "--events", "2000", "--seed", "99",
            "--out",
            out.to_str().unwrap(),
            "--text",
        ]);
        run_ok(&[
            "correlate",
            "--input",
            out.join("record.fldr").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
    }
    for name in ["record.fldr", "record.tsv", "map.flg3", "map.tsv"] {
        assert_eq!(
            read(&a.join(name)),
            read(&b.join(name)),
            "{name} differs between identical runs"
        );
    }
    let _ = std::fs::remove_dir_all(&a);
    let _ = std::fs::remove_dir_all(&b);
}

#[test]
fn config_file_env_and_flag_precedence() {
    let out = tmp_out("config");
    let config = out.join("run.conf");
    std::fs::write(&config, "fock = 2\nqlp = 1.0\nevents = 500\nseed = 5\n").unwrap();
    let config_s = config.to_str().unwrap();
    let out_s = out.to_str().unwrap();

    // Config file supplies everything.
    run_ok(&["simulate", "--config", config_s, "--out", out_s]);
    let from_config = read(&out.join("record.fldr"));

    // Environment overrides the config file.
    let output = bin()
        .args(["simulate", "--config", config_s, "--out", out_s])
        .env("G3CLASS_SEED", "6")
        .output()
        .unwrap();
    assert!(output.status.success());
    let from_env = read(&out.join("record.fldr"));
    assert_ne!(from_config, from_env);

    // An explicit flag overrides the environment.
    let output = bin()
        .args(["simulate", "--config", config_s, "--seed", "5", "--out", out_s])
        .env("G3CLASS_SEED", "6")
        .output()
        .unwrap();
    assert!(output.status.success());
    assert_eq!(read(&out.join("record.fldr")), from_config);
    let _ = std::fs::remove_dir_all(&out);
}

#[test]
fn error_exit_codes() {
    // Unknown flag: usage error, exit 2.
    let output = bin().args(["simulate", "--bogus"]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));

    // Missing input file: runtime error, exit 1, one-line diagnostic.
    let output = bin()
        .args(["correlate", "--input", "/nonexistent/record.fldr"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("error:"), "stderr: {stderr}");

    // Invalid domain argument.
    let output = bin()
        .args(["simulate", "--fock", "5", "--qlp", "1.0", "--events", "10"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn dataset_roundtrip_through_cli() {
    let out = tmp_out("dataset");
    let out_s = out.to_str().unwrap();
    let grid = out.join("grid.txt");
    std::fs::write(&grid, "1 0.0 300\n2 1.0 300\n3 0.75 300\n").unwrap();

    run_ok(&[
        "dataset-gen",
        "--grid",
        grid.to_str().unwrap(),
        "--measurements",
        "10",
        "--seed",
        "3",
        "--out",
        out_s,
    ]);
    assert!(out.join("dataset.flds").exists());
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("sample_count = 30"));

    run_ok(&[
        "dataset-split",
        "--input",
        out.join("dataset.flds").to_str().unwrap(),
        "--seed",
        "4",
        "--out",
        out_s,
    ]);
    for name in ["train.flds", "validation.flds", "test.flds", "split_manifest.txt"] {
        assert!(out.join(name).exists(), "{name} missing");
    }
    let _ = std::fs::remove_dir_all(&out);
}

#[test]
fn serve_stdio_round_trip() {
    use std::io::Write;
    let mut child = bin()
        .args([
            "serve", "--stdio", "--baseline", "--window", "200", "--emit-every", "100",
        ])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    {
        let mut stdin = child.stdin.take().unwrap();
        for t in 0..200 {
            writeln!(stdin, "EVT {t} 1 1 1").unwrap();
        }
        writeln!(stdin, "garbage").unwrap();
        writeln!(stdin, "QUIT").unwrap();
    }
    let output = child.wait_with_output().unwrap();
    assert!(output.status.success());
    let text = String::from_utf8(output.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3, "got: {text}");
    assert!(lines[0].starts_with("CLS 0 99 COH"));
    assert!(lines[1].starts_with("CLS 0 199 COH"));
    assert_eq!(lines[2], "ERR bad-line");
}
