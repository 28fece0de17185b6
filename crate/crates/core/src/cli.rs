//! Command-line front end: argument parsing, exit codes and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Error;
use crate::runner::{experiment, sha256_hex, solve, Artifacts, Status, EXPERIMENTS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_DOMAIN: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "eotlab", version, about = "Entropic optimal transport experiments on grid measures")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one transport problem and write the plan and a summary.
    Solve(Common),
    /// Run a named experiment (expansion, longtraj, quasimin, onestep, campanato, softlemma).
    Experiment {
        name: String,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `output_dir`; default `out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct OutputEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact: String,
    pub version: String,
    pub command: String,
    /// Raw text of the config file as read.
    pub config_snapshot: String,
    pub seed: u64,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: Vec<OutputEntry>,
    /// Per experiment: `ok`, `not_converged` or `error: ...`.
    pub status: BTreeMap<String, String>,
    pub exit_code: i32,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Input(_) | Error::Json(_) => EXIT_CONFIG,
        _ => EXIT_DOMAIN,
    }
}

fn input_hashes(cfg: &RunConfig, config_path: &Path, config_bytes: &[u8]) -> BTreeMap<String, String> {
    let mut h = BTreeMap::new();
    h.insert(config_path.display().to_string(), sha256_hex(config_bytes));
    let base = config_path.parent().unwrap_or(Path::new("."));
    for m in std::iter::once(&cfg.source).chain(cfg.target.as_ref()) {
        if let Some(f) = &m.file {
            let p = base.join(f);
            for q in [p.clone(), p.with_extension("json")] {
                if let Ok(b) = fs::read(&q) {
                    h.insert(q.display().to_string(), sha256_hex(&b));
                }
            }
        }
    }
    h
}

/// Runs the parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let (label, name, common) = match &cli.command {
        Command::Solve(c) => ("solve".to_string(), None, c),
        Command::Experiment { name, common } => (format!("experiment {name}"), Some(name.as_str()), common),
    };
    if let Some(n) = name {
        if !EXPERIMENTS.contains(&n) {
            eprintln!("error: unknown experiment `{n}`; valid names: {}", EXPERIMENTS.join(", "));
            return EXIT_CONFIG;
        }
    }
    let started = now_ms();
    let bytes = match fs::read(&common.config) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("error: cannot read config {}: {e}", common.config.display());
            return EXIT_CONFIG;
        }
    };
    let text = String::from_utf8_lossy(&bytes).into_owned();
    let mut cfg = match RunConfig::from_json(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let out_dir = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let mut out = match Artifacts::create(&out_dir) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: cannot create output directory {}: {e}", out_dir.display());
            return EXIT_DOMAIN;
        }
    };
    let base = common.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    let result = match name {
        None => solve(&cfg, &base, &mut out),
        Some(n) => experiment(n, &cfg, &base, &mut out),
    };
    let (code, status) = match &result {
        Ok(Status::Ok) => (EXIT_OK, "ok".to_string()),
        Ok(Status::NotConverged) => (EXIT_NOT_CONVERGED, "not_converged".to_string()),
        Err(e) => (exit_code(e), format!("error: {e}")),
    };
    match &result {
        Ok(Status::NotConverged) => eprintln!("warning: solver did not converge; outputs are flagged"),
        Err(e) => eprintln!("error: {e}"),
        _ => {}
    }
    if let Err(e) = write_manifest(&mut out, &cfg, &common.config, &bytes, &text, &label, name, started, code, status) {
        eprintln!("error: cannot write manifest: {e}");
        return if code == EXIT_OK { EXIT_DOMAIN } else { code };
    }
    code
}

#[allow(clippy::too_many_arguments)]
fn write_manifest(
    out: &mut Artifacts,
    cfg: &RunConfig,
    config_path: &Path,
    bytes: &[u8],
    text: &str,
    label: &str,
    name: Option<&str>,
    started: u128,
    code: i32,
    status: String,
) -> crate::Result<()> {
    out.bytes("config.json", bytes)?;
    let mut outputs = Vec::new();
    for f in &out.files {
        let data = fs::read(out.dir.join(f))?;
        outputs.push(OutputEntry {
            file: f.clone(),
            sha256: sha256_hex(&data),
        });
    }
    let manifest = RunManifest {
        artifact: "eotlab".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: label.into(),
        config_snapshot: text.into(),
        seed: cfg.seed,
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
        input_hashes: input_hashes(cfg, config_path, bytes),
        outputs,
        status: BTreeMap::from([(name.unwrap_or("solve").to_string(), status)]),
        exit_code: code,
    };
    out.json("manifest.json", &manifest)
}
