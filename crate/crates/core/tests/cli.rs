//! End-to-end tests of the `eotlab` binary: file schemas, exit codes,
//! manifests and rerun determinism.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use eotlab::cli::RunManifest;
use eotlab::coupling::read_plan;
use eotlab::runner::sha256_hex;
use tempfile::TempDir;

fn eotlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eotlab")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn run(dir: &TempDir, args: &[&str], config: &str, out: &str) -> (i32, PathBuf, String) {
    let cfg = write_config(dir.path(), "cfg.json", config);
    let out = dir.path().join(out);
    let mut full: Vec<&str> = args.to_vec();
    let (c, o) = (cfg.to_str().unwrap().to_string(), out.to_str().unwrap().to_string());
    full.extend(["--config", &c, "--out", &o]);
    let res = eotlab(&full);
    (res.status.code().unwrap_or(-1), out, String::from_utf8_lossy(&res.stderr).into_owned())
}

/// Header and rows of a CSV file; every row must match the header width.
fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    let rows: Vec<Vec<String>> = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    assert!(rows.iter().all(|row| row.len() == header.len()));
    (header, rows)
}

fn check_manifest(out: &Path, config_text: &str) -> RunManifest {
    let m: RunManifest = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.config_snapshot, config_text);
    assert_eq!(fs::read_to_string(out.join("config.json")).unwrap(), config_text);
    for e in &m.outputs {
        let data = fs::read(out.join(&e.file)).unwrap_or_else(|_| panic!("{} listed but missing", e.file));
        assert_eq!(sha256_hex(&data), e.sha256, "hash mismatch for {}", e.file);
    }
    m
}

const UNIFORM64: &str = r#"{"grid": {"n": 64}, "density": {"name": "uniform"}}"#;
const WAVY64: &str = r#"{"grid": {"n": 64}, "density": {"name": "perturbed_uniform", "amplitude": 0.2}}"#;

fn cfg(extra: &str) -> String {
    format!(r#"{{"source": {WAVY64}, "target": {UNIFORM64}, {extra}}}"#)
}

#[test]
fn expansion_report_has_one_row_per_epsilon_plus_regression() {
    let dir = TempDir::new().unwrap();
    let c = format!(r#"{{"source": {UNIFORM64}, "eps_ladder": [0.3, 0.2, 0.12]}}"#);
    let (code, out, _) = run(&dir, &["experiment", "expansion"], &c, "o");
    assert_eq!(code, 0);
    let (h, rows) = read_csv(&out.join("report.csv"));
    assert_eq!(
        h,
        ["row", "epsilon", "ot_eps", "ot", "remainder", "under_resolved", "iterations", "converged", "slope", "intercept"]
    );
    assert_eq!(rows.len(), 4);
    assert!(rows[..3].iter().all(|r| r[0] == "epsilon" && r[1].parse::<f64>().is_ok()));
    assert_eq!(rows[3][0], "regression");
    assert!(rows[3][8].parse::<f64>().unwrap() > 0.0);
    let trace: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("trace.json")).unwrap()).unwrap();
    assert_eq!(trace["rows"].as_array().unwrap().len(), 3);
    let m = check_manifest(&out, &c);
    assert_eq!(m.status["expansion"], "ok");
    assert_eq!(m.exit_code, 0);
}

#[test]
fn every_experiment_emits_its_documented_schema() {
    let dir = TempDir::new().unwrap();
    let cases: [(&str, String, &[&str]); 5] = [
        (
            "longtraj",
            format!(r#"{{"source": {UNIFORM64}, "eps_ladder": [0.25, 0.2], "R0": 0.1}}"#),
            &[
                "row", "R", "epsilon", "energy_ratio", "mass_ratio", "long_energy", "long_mass", "e_5r", "iterations",
                "converged", "mass_slope", "energy_slope",
            ],
        ),
        (
            "quasimin",
            cfg(r#""eps_ladder": [0.1, 0.2], "R0": 0.2"#),
            &[
                "plan", "epsilon", "R", "Lambda", "lhs", "competitor_cost", "defect", "pr_mass", "eps2_mass", "energy_2r",
                "normalized_defect", "energy_relative_defect", "degenerate",
            ],
        ),
        (
            "onestep",
            cfg(r#""epsilon": 0.05, "R0": 0.5, "thresholds": {"eps1": 1.0}"#),
            &[
                "R", "theta", "e_before", "e_after", "d_before", "d_after", "improved", "b_0", "b_1", "gamma", "det_a",
                "fit_residual",
            ],
        ),
        (
            "campanato",
            cfg(r#""epsilon": 0.05, "R0": 0.6"#),
            &["R", "E", "D", "long_energy", "long_mass", "defect_beta0"],
        ),
        (
            "softlemma",
            cfg(r#""epsilon": 0.05, "R0": 0.5, "rho_ladder": [0.1, 0.2]"#),
            &["rho", "mass", "bound", "constant", "scales_ordered"],
        ),
    ];
    for (name, c, header) in cases {
        let (code, out, err) = run(&dir, &["experiment", name], &c, name);
        assert_eq!(code, 0, "{name}: {err}");
        let (h, rows) = read_csv(&out.join("report.csv"));
        assert_eq!(h, header, "{name}");
        assert!(!rows.is_empty(), "{name}");
        serde_json::from_str::<serde_json::Value>(&fs::read_to_string(out.join("trace.json")).unwrap()).unwrap();
        check_manifest(&out, &c);
        if name == "campanato" {
            let trace: serde_json::Value =
                serde_json::from_str(&fs::read_to_string(out.join("trace.json")).unwrap()).unwrap();
            assert!(trace.get("residual_vs_energy").is_some());
            let (dh, drows) = read_csv(&out.join("defects.csv"));
            assert_eq!(dh, ["row", "R", "defect_beta0", "e0_plus_d0", "eps2_over_r2", "ratio"]);
            assert_eq!(drows.last().unwrap()[0], "fitted_constant");
            assert_eq!(drows.len(), rows.len() + 1);
        }
        if name == "quasimin" {
            let (dh, _) = read_csv(&out.join("defects.csv"));
            assert_eq!(dh, header);
            assert_eq!(rows.last().unwrap()[0], "exact");
        }
    }
}

#[test]
fn campanato_on_the_diagonal_plan_has_zero_energy() {
    let dir = TempDir::new().unwrap();
    let c = format!(r#"{{"source": {UNIFORM64}, "plan": "diagonal", "epsilon": 0.02, "R0": 0.8}}"#);
    let (code, out, _) = run(&dir, &["experiment", "campanato"], &c, "o");
    assert_eq!(code, 0);
    let (_, rows) = read_csv(&out.join("report.csv"));
    assert!(rows.len() >= 3);
    assert!(rows.iter().all(|r| r[1].parse::<f64>().unwrap() == 0.0));
    let trace: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("trace.json")).unwrap()).unwrap();
    assert_eq!(trace["stop_reason"], "reached_epsilon_scale");
    assert!(trace["residual_vs_energy"].is_null());
}

#[test]
fn solve_writes_plan_and_summary_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let c = cfg(r#""epsilon": 0.1, "gibbs_samples": 2000, "seed": 11"#);
    let (code, a, _) = run(&dir, &["solve"], &c, "a");
    assert_eq!(code, 0);
    let (code_b, b, _) = run(&dir, &["solve"], &c, "b");
    assert_eq!(code_b, 0);
    for f in ["summary.json", "plan.bin", "plan.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let (header, mass) = read_plan(&a.join("plan.bin")).unwrap();
    assert_eq!((header.n_source, header.n_target), (64, 64));
    assert_eq!(header.epsilon, Some(0.1));
    assert!((mass.iter().sum::<f64>() - 2.0).abs() < 1e-9);
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    for key in ["cost", "entropy", "iterations", "marg_err", "converged"] {
        assert!(!s[key].is_null(), "{key}");
    }
    assert!(s["gibbs_max_rel_error"].as_f64().unwrap() < 1e-6);
    check_manifest(&a, &c);
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = TempDir::new().unwrap();
    let c = cfg(r#""epsilon": 0.2, "gibbs_samples": 100"#);
    let (code, out, _) = run(&dir, &["solve", "--seed", "42"], &c, "o");
    assert_eq!(code, 0);
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["seed"], 42);
}

#[test]
fn single_atom_marginals_cost_nothing() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("one.csv"), "index_0,weight\n0,0.0\n1,1.0\n").unwrap();
    fs::write(
        dir.path().join("one.json"),
        r#"{"dim": 1, "h": 1.0, "origin_offset": [0.0], "extent": [2], "alpha": 0.5}"#,
    )
    .unwrap();
    for plan in ["sinkhorn", "exact"] {
        let c = format!(r#"{{"source": {{"file": "one.csv"}}, "plan": "{plan}", "epsilon": 0.1}}"#);
        let (code, out, _) = run(&dir, &["solve"], &c, plan);
        assert_eq!(code, 0);
        let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
        assert_eq!(s["cost"].as_f64().unwrap(), 0.0);
        let m = check_manifest(&out, &c);
        assert_eq!(m.input_hashes.len(), 3);
    }
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = TempDir::new().unwrap();
    let (code, _, err) = run(&dir, &["experiment", "nonsense"], &cfg(r#""epsilon": 0.1"#), "o");
    assert_eq!(code, 2);
    assert!(err.contains("expansion, longtraj, quasimin, onestep, campanato, softlemma"));

    let mismatch = format!(
        r#"{{"source": {UNIFORM64}, "target": {{"grid": {{"n": 64}}, "density": {{"name": "uniform", "value": 1.1}}}}, "epsilon": 0.1}}"#
    );
    let (code, _, err) = run(&dir, &["solve"], &mismatch, "o2");
    assert_eq!(code, 2);
    assert!(err.contains("relative gap"), "{err}");

    let (code, _, _) = run(&dir, &["solve"], r#"{"source": {"grid": {"n": 8}}, "epsilon": 0.1}"#, "o3");
    assert_eq!(code, 2);
    let (code, _, _) = run(&dir, &["solve"], "{not json", "o4");
    assert_eq!(code, 2);
    let (code, _, _) = run(&dir, &["experiment", "campanato"], &cfg(r#""epsilon": 0.1"#), "o5");
    assert_eq!(code, 2, "missing R0");
    let out = eotlab(&["solve", "--config", dir.path().join("absent.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn non_convergence_exits_3_and_still_writes_files() {
    let dir = TempDir::new().unwrap();
    let c = cfg(r#""epsilon": 0.05, "max_iter": 3, "ladder": false"#);
    let (code, out, _) = run(&dir, &["solve"], &c, "o");
    assert_eq!(code, 3);
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["converged"], false);
    assert!(out.join("plan.bin").exists());
    let m = check_manifest(&out, &c);
    assert_eq!(m.status["solve"], "not_converged");
}

#[test]
fn domain_and_filesystem_errors_exit_with_code_4() {
    let dir = TempDir::new().unwrap();
    // B_{7R} does not fit inside [-1, 1].
    let c = format!(r#"{{"source": {UNIFORM64}, "eps_ladder": [0.2], "R0": 0.5}}"#);
    let (code, out, _) = run(&dir, &["experiment", "longtraj"], &c, "o");
    assert_eq!(code, 4);
    let m = check_manifest(&out, &c);
    assert!(m.status["longtraj"].starts_with("error"));

    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let cfg_path = write_config(dir.path(), "ok.json", &cfg(r#""epsilon": 0.2"#));
    let res = eotlab(&[
        "solve",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        blocker.join("sub").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(4));
}

#[test]
fn missing_output_directories_are_created() {
    let dir = TempDir::new().unwrap();
    let (code, out, _) = run(&dir, &["solve"], &cfg(r#""epsilon": 0.2"#), "deep/nested/out");
    assert_eq!(code, 0);
    assert!(out.join("summary.json").exists());
}

#[test]
fn output_dir_from_config_is_used_without_flag() {
    let dir = TempDir::new().unwrap();
    let target = dir.path().join("from_cfg");
    let c = cfg(&format!(r#""epsilon": 0.2, "output_dir": {:?}"#, target.to_str().unwrap()));
    let p = write_config(dir.path(), "c.json", &c);
    let res = eotlab(&["solve", "--config", p.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0));
    assert!(target.join("summary.json").exists());
}
