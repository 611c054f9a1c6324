//! The `bevstream` command line.
//!
//! Every subcommand reads an optional TOML config (`--config`), applies
//! `--set key=value` overrides on top of it, writes its artifacts into
//! `--out` and records a `<subcommand>.manifest.json` next to them.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{bench_sweep, emit_report_csv, emit_report_json, summary_text, BenchConfig};
use crate::check::{all_passed, emit_results_csv, run_checks, summarize, CheckConfig, Suite};
use crate::error::{BevError, Result};
use crate::fusion::{read_stream, validate_stream, write_stream, RecurrentFuser};
use crate::geometry::write_trajectory_csv;
use crate::grid::ConvKernel;
use crate::sim::{simulate, SceneConfig};
use crate::temporal::{run_frame_drop_experiment, FrameDropConfig, FrameDropRow};

pub const THREADS_ENV: &str = "BEVSTREAM_THREADS";
pub const FRAMEDROP_HEADER: &str = "fmr,mode,ave_mps,seed";

#[derive(Debug, Parser)]
#[command(
    name = "bevstream",
    version,
    about = "Recurrent temporal fusion of BEV feature grids"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML config for the subcommand.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for every random draw [default: 7].
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Write JSON instead of CSV where both are supported.
    #[arg(long, global = true)]
    pub json: bool,
    /// Config override, e.g. `--set height=64` or `--set ego.initial.yaw=0.3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic scene into a replay file (requires `--config`).
    Simulate,
    /// Stream a replay file through the recurrent fuser.
    Replay {
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
    },
    /// Run the equivalence suites; exits nonzero if any case fails.
    Check {
        /// Suites to run [default: all].
        #[arg(long = "suite", value_delimiter = ',', num_args = 1..)]
        suites: Option<Vec<Suite>>,
        /// Perturb the memory kernel mid-stream to prove the oracle catches it.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Velocity error versus frame missing rate, with and without interval embedding.
    Framedrop {
        /// Number of consecutive seeds starting at `--seed`.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Latency, state size and parameters of both fusion styles over the window grid.
    Bench,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Replay { .. } => "replay",
            Command::Check { .. } => "check",
            Command::Framedrop { .. } => "framedrop",
            Command::Bench => "bench",
        }
    }
}

/// Kernels and stability knob for `replay`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayConfig {
    pub kernel_size: usize,
    /// Absolute row sum of the seeded memory kernel; below 1 keeps long streams bounded.
    pub memory_gain: f64,
    /// `BEVK` files; when absent the kernels are drawn from the seed.
    pub v_mem: Option<PathBuf>,
    pub v_cur: Option<PathBuf>,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            kernel_size: 3,
            memory_gain: 0.9,
            v_mem: None,
            v_cur: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub path: String,
    /// Absent for files holding wall-clock timings.
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subcommand: String,
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub config: serde_json::Value,
    pub outputs: Vec<OutputEntry>,
}

/// Parses a config file (or nothing) with overrides applied.
pub fn load_config<T: DeserializeOwned>(path: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut table: toml::Table = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| BevError::Config(format!("cannot read {}: {e}", p.display())))?;
            text.parse()
                .map_err(|e: toml::de::Error| BevError::Config(e.to_string()))?
        }
        None => toml::Table::new(),
    };
    for item in overrides {
        apply_override(&mut table, item)?;
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| BevError::Config(e.to_string()))
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| BevError::Config(format!("override `{item}` is not KEY=VALUE")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(BevError::Config(format!("bad override key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("non-empty key");
    let mut node = table;
    for p in parents {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| BevError::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Run<'a> {
    common: &'a CommonArgs,
    subcommand: &'static str,
    outputs: Vec<OutputEntry>,
}

impl Run<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.common.out.join(name)
    }

    fn record(&mut self, name: &str, deterministic: bool) -> Result<()> {
        let bytes = fs::read(self.path(name))?;
        self.outputs.push(OutputEntry {
            path: name.to_owned(),
            sha256: deterministic.then(|| sha256_hex(&bytes)),
        });
        Ok(())
    }

    fn write_with(
        &mut self,
        name: &str,
        deterministic: bool,
        f: impl FnOnce(&mut BufWriter<File>) -> Result<()>,
    ) -> Result<()> {
        let mut w = BufWriter::new(File::create(self.path(name))?);
        f(&mut w)?;
        w.flush()?;
        drop(w);
        self.record(name, deterministic)
    }

    fn finish<C: Serialize>(self, seed: u64, config: &C) -> Result<()> {
        let config = serde_json::to_value(config).map_err(|e| BevError::Format(e.to_string()))?;
        let canonical = serde_json::to_vec(&config).map_err(|e| BevError::Format(e.to_string()))?;
        let manifest = Manifest {
            subcommand: self.subcommand.to_owned(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            seed,
            config_sha256: sha256_hex(&canonical),
            config,
            outputs: self.outputs,
        };
        let path = self
            .common
            .out
            .join(format!("{}.manifest.json", self.subcommand));
        let mut text =
            serde_json::to_string_pretty(&manifest).map_err(|e| BevError::Format(e.to_string()))?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}

/// Outcome of a subcommand that completed without I/O or config errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    ChecksFailed,
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    fs::create_dir_all(&cli.common.out)?;
    let mut run = Run {
        common: &cli.common,
        subcommand: cli.command.name(),
        outputs: Vec::new(),
    };
    let common = &cli.common;
    match &cli.command {
        Command::Simulate => {
            let config = common
                .config
                .as_deref()
                .ok_or_else(|| BevError::Config("simulate requires --config PATH".into()))?;
            let mut scene: SceneConfig = load_config(Some(config), &common.overrides)?;
            if let Some(seed) = common.seed {
                scene.seed = seed;
            }
            scene.validate()?;
            let frames = simulate(&scene)?;
            run.write_with("stream.bevs", true, |w| write_stream(w, &frames))?;
            let rows: Vec<_> = frames.iter().map(|f| (f.timestamp, f.ego_pose)).collect();
            run.write_with("trajectory.csv", true, |w| write_trajectory_csv(w, &rows))?;
            println!(
                "simulate: {} frames -> {}",
                frames.len(),
                run.path("stream.bevs").display()
            );
            run.finish(scene.seed, &scene)?;
        }
        Command::Replay { input } => {
            let config: ReplayConfig = load_config(common.config.as_deref(), &common.overrides)?;
            let seed = common.seed.unwrap_or(crate::DEFAULT_SEED);
            let frames = read_stream(BufReader::new(File::open(input)?))?;
            validate_stream(&frames)?;
            let channels = frames[0].grid.channels();
            let fuser = replay_fuser(&config, channels, seed)?;
            let mut state = fuser.new_state(*frames[0].grid.geometry(), 0);
            let mut summary = Vec::with_capacity(frames.len());
            for f in &frames {
                let fused = fuser.step(&mut state, f)?;
                summary.push((
                    f.frame_index,
                    f.timestamp,
                    fused.max_abs(),
                    fused.data().iter().sum::<f64>(),
                ));
            }
            run.write_with("replay.csv", true, |w| {
                let mut out = csv::Writer::from_writer(w);
                out.write_record(["frame_index", "timestamp", "max_abs", "sum"])?;
                for (i, t, m, s) in &summary {
                    out.write_record([i.to_string(), t.to_string(), m.to_string(), s.to_string()])?;
                }
                out.flush()?;
                Ok(())
            })?;
            run.write_with("memory.bevg", true, |w| state.memory.write_to(w))?;
            println!(
                "replay: fused {} frames from {}",
                frames.len(),
                input.display()
            );
            run.finish(seed, &config)?;
        }
        Command::Check {
            suites,
            inject_fault,
        } => {
            let mut config: CheckConfig = load_config(common.config.as_deref(), &common.overrides)?;
            if *inject_fault {
                config.fault = Some(config.fault.unwrap_or_default());
            }
            let seed = common.seed.unwrap_or(crate::DEFAULT_SEED);
            let suites = suites.clone().unwrap_or_else(|| Suite::ALL.to_vec());
            let results = run_checks(&suites, &config, seed)?;
            for r in summarize(&results) {
                println!(
                    "{:<5} {:<10} {:<28} max_residual={:.3e} tol={:.1e}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.suite.as_str(),
                    r.case,
                    r.residual,
                    r.tolerance
                );
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("check: {} cases, {failed} failed", results.len());
            run.write_with("check.csv", true, |w| emit_results_csv(&results, w))?;
            run.finish(
                seed,
                &CheckRun {
                    suites: &suites,
                    config: &config,
                },
            )?;
            if !all_passed(&results) {
                return Ok(Outcome::ChecksFailed);
            }
        }
        Command::Framedrop { seeds } => {
            let config: FrameDropConfig = load_config(common.config.as_deref(), &common.overrides)?;
            config.validate()?;
            let base = common.seed.unwrap_or(crate::DEFAULT_SEED);
            let per_seed: Vec<Vec<FrameDropRow>> = (base..base + seeds)
                .into_par_iter()
                .map(|s| run_frame_drop_experiment(&config, s))
                .collect::<Result<_>>()?;
            let rows: Vec<FrameDropRow> = per_seed.into_iter().flatten().collect();
            if common.json {
                run.write_with("framedrop.json", true, |w| {
                    serde_json::to_writer_pretty(w, &rows)
                        .map_err(|e| BevError::Format(e.to_string()))
                })?;
            } else {
                run.write_with("framedrop.csv", true, |w| emit_framedrop_csv(&rows, w))?;
            }
            for r in &rows {
                println!(
                    "fmr={:.2} mode={:<8} seed={} ave={:.4} m/s",
                    r.fmr,
                    r.mode.as_str(),
                    r.seed,
                    r.ave_mps
                );
            }
            run.finish(
                base,
                &FrameDropRun {
                    seeds: *seeds,
                    config: &config,
                },
            )?;
        }
        Command::Bench => {
            let config: BenchConfig = load_config(common.config.as_deref(), &common.overrides)?;
            let seed = common.seed.unwrap_or(crate::DEFAULT_SEED);
            let reports = bench_sweep(&config, seed)?;
            if common.json {
                run.write_with("bench.json", false, |w| emit_report_json(&reports, w))?;
            } else {
                run.write_with("bench.csv", false, |w| emit_report_csv(&reports, w))?;
            }
            print!("{}", summary_text(&reports));
            run.finish(seed, &config)?;
        }
    }
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct CheckRun<'a> {
    suites: &'a [Suite],
    config: &'a CheckConfig,
}

#[derive(Serialize)]
struct FrameDropRun<'a> {
    seeds: u64,
    config: &'a FrameDropConfig,
}

fn replay_fuser(config: &ReplayConfig, channels: usize, seed: u64) -> Result<RecurrentFuser> {
    let load =
        |p: &Path| -> Result<ConvKernel> { ConvKernel::read_from(BufReader::new(File::open(p)?)) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let taps = (channels * config.kernel_size * config.kernel_size) as f64;
    let v_mem = match &config.v_mem {
        Some(p) => load(p)?,
        None => ConvKernel::random(
            channels,
            channels,
            config.kernel_size,
            config.kernel_size,
            config.memory_gain / taps,
            &mut rng,
        ),
    };
    let v_cur = match &config.v_cur {
        Some(p) => load(p)?,
        None => ConvKernel::random(
            channels,
            channels,
            config.kernel_size,
            config.kernel_size,
            1.0 / taps,
            &mut rng,
        ),
    };
    RecurrentFuser::new(v_mem, v_cur)
}

pub fn emit_framedrop_csv<W: Write>(rows: &[FrameDropRow], writer: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(writer);
    out.write_record(FRAMEDROP_HEADER.split(','))?;
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Caps the global rayon pool at `BEVSTREAM_THREADS` when set.
fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|n| *n > 0).ok_or_else(|| {
        BevError::Config(format!(
            "{THREADS_ENV} must be a positive integer, got `{raw}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| BevError::Config(e.to_string()))
}

/// Exit codes: 0 success, 1 failed checks or runtime error, 2 usage or config error.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| run(&cli));
    match result {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::ChecksFailed) => ExitCode::from(1),
        Err(e @ (BevError::Config(_) | BevError::InvalidRate(_))) => {
            eprintln!("bevstream {}: {e}", cli.command.name());
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("bevstream {}: {e}", cli.command.name());
            ExitCode::from(1)
        }
    }
}
