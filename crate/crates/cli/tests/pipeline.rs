use std::path::Path;
use std::process::Command as Proc;

use shiftshare_cli::config::RunConfig;
use shiftshare_cli::{execute, Cli, Command};

const SMALL: &str = r#"
sim_n_zones = 24
sim_n_states = 6
sim_n_years = 12
event_lo = -3
event_hi = 3
placebo_draws = 20
ring_edges = [300.0, 600.0]
balance_characteristics = ["ln_mfg_emp"]
weak_iv_tau = 0.3
"#;

fn cli(cmd: Command, dir: &Path, extra: &str) -> Cli {
    cli_with(SMALL, cmd, dir, extra)
}

fn cli_with(base: &str, cmd: Command, dir: &Path, extra: &str) -> Cli {
    let cfg = dir.join("config.toml");
    std::fs::write(&cfg, format!("{base}{extra}")).unwrap();
    Cli { command: cmd, config: Some(cfg), seed: None, out: Some(dir.join("out")), threads: Some(2) }
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("out/manifest.json")).unwrap()).unwrap()
}

fn outputs(m: &serde_json::Value) -> Vec<String> {
    m["outputs"].as_array().unwrap().iter().map(|o| o["path"].as_str().unwrap().to_string()).collect()
}

#[test]
fn simulate_then_estimate_lists_truth_and_recovery() {
    let dir = tempfile::tempdir().unwrap();
    execute(&cli(Command::Run, dir.path(), "")).unwrap();
    let m = manifest(dir.path());
    let files = outputs(&m);
    for f in [
        "truth.json",
        "recovery.json",
        "estimates.csv",
        "probabilities.csv",
        "instruments.csv",
        "fit_results.csv",
        "diagnostics.csv",
        "event_study.csv",
        "rotemberg.csv",
        "balance.csv",
        "rings.csv",
        "placebo.csv",
        "counterfactual.csv",
        "states.csv",
        "spec_curve.csv",
    ] {
        assert!(files.iter().any(|p| p == f), "{f} missing from manifest");
    }
    assert!(m["outputs"].as_array().unwrap().iter().all(|o| o["sha256"].as_str().unwrap().len() == 64));
    assert_eq!(m["switches"]["data"], "simulated");
    let rec: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/recovery.json")).unwrap()).unwrap();
    assert_eq!(rec[0]["parameter"], "phi");
    assert_eq!(rec[0]["truth"], 0.06);
}

#[test]
fn identical_config_gives_identical_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let c = cli(Command::Diagnose, dir.path(), "");
    execute(&c).unwrap();
    let first = std::fs::read(dir.path().join("out/manifest.json")).unwrap();
    execute(&c).unwrap();
    let second = std::fs::read(dir.path().join("out/manifest.json")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn missing_column_aborts_naming_it_and_leaves_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let err = execute(&cli(Command::Fit, dir.path(), "controls = [\"no_such_column\"]\n")).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("no_such_column"));
    let left: Vec<_> = std::fs::read_dir(dir.path().join("out")).unwrap().collect();
    assert!(left.is_empty());
}

#[test]
fn files_round_trip_through_ingest() {
    let dir = tempfile::tempdir().unwrap();
    execute(&cli(Command::Simulate, dir.path(), "")).unwrap();
    let data = dir.path().join("out");
    let sim_fit = dir.path().join("sim_fit");
    std::fs::create_dir(&sim_fit).unwrap();
    execute(&cli(Command::Fit, &sim_fit, "")).unwrap();
    let file_fit = dir.path().join("file_fit");
    std::fs::create_dir(&file_fit).unwrap();
    execute(&cli(Command::Fit, &file_fit, &format!("data_dir = {:?}\n", data.to_str().unwrap()))).unwrap();
    let a = std::fs::read_to_string(sim_fit.join("out/fit_results.csv")).unwrap();
    let b = std::fs::read_to_string(file_fit.join("out/fit_results.csv")).unwrap();
    let coef = |s: &str| -> f64 {
        s.lines().find(|l| l.starts_with("all_2sls,m,")).unwrap().split(',').nth(2).unwrap().parse().unwrap()
    };
    assert!((coef(&a) - coef(&b)).abs() < 1e-9 * coef(&a).abs());
    assert_eq!(manifest(&file_fit)["inputs"].as_array().unwrap().len(), 7);
}

#[test]
fn one_cell_grid_matches_the_pipeline_estimate() {
    let dir = tempfile::tempdir().unwrap();
    // Default 50-zone world: the small one has weak instruments.
    let extra = "instruments = [\"b\", \"b_sigma\"]\n";
    execute(&cli_with("", Command::Fit, dir.path(), extra)).unwrap();
    let fit = std::fs::read_to_string(dir.path().join("out/fit_results.csv")).unwrap();
    let phi: f64 =
        fit.lines().find(|l| l.starts_with("all_2sls,m,")).unwrap().split(',').nth(2).unwrap().parse().unwrap();
    execute(&cli_with("", Command::SpecCurve, dir.path(), extra)).unwrap();
    let curve: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/spec_curve.json")).unwrap()).unwrap();
    assert_eq!(curve["n_cells"], 1);
    assert_eq!(curve["rows"].as_array().unwrap().len(), 1, "cell filtered: {curve}");
    assert_eq!(curve["rows"][0]["estimate"].as_f64().unwrap(), phi);
}

#[test]
fn two_by_two_grid_on_simulated_data() {
    let dir = tempfile::tempdir().unwrap();
    let extra = "grid_instruments = [\"b\", \"b+b_sigma\"]\ngrid_state_year_fe = [false, true]\n";
    execute(&cli(Command::SpecCurve, dir.path(), extra)).unwrap();
    let curve: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/spec_curve.json")).unwrap()).unwrap();
    let rows = curve["rows"].as_array().unwrap();
    let n = |k: &str| curve[k].as_u64().unwrap() as usize;
    assert_eq!(n("n_cells"), 4);
    assert_eq!(rows.len() + n("n_filtered") + n("n_failed"), 4);
    let est: Vec<f64> = rows.iter().map(|r| r["estimate"].as_f64().unwrap()).collect();
    assert!(est.windows(2).all(|w| w[0] <= w[1]));
    for r in rows {
        let (b, se) = (r["estimate"].as_f64().unwrap(), r["se"].as_f64().unwrap());
        assert!((b - 0.06).abs() < 3.0 * se, "{b} ± {se}");
    }
}

#[test]
fn binary_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_shiftshare");
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    let run = |body: &str| {
        std::fs::write(&cfg, format!("{SMALL}{body}")).unwrap();
        Proc::new(exe)
            .args(["fit", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()])
            .output()
            .unwrap()
    };
    assert_eq!(run("").status.code(), Some(0));
    assert_eq!(run("unknown_key = 3\n").status.code(), Some(2));
    let est = run("instruments = [\"ln_net_tax\"]\ncontrols = []\nfe = [\"zone\", \"state_x_year\"]\n");
    assert_eq!(est.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&est.stderr).contains("stage `fit`"));
    let bad = Proc::new(exe).args(["fit", "--threads", "many"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cli(Command::Ingest, dir.path(), "seed = 5\n");
    c.seed = Some(9);
    assert_eq!(shiftshare_cli::resolve_config(&c).unwrap().seed, 9);
    assert_eq!(RunConfig::default().seed, 42);
}
