//! Per-frame latency, retained-state size and parameter count of recurrent
//! versus sliding-window fusion as the window grows.
//!
//! Timings cover the fusion modules only (warp, concat, convolution); frame
//! generation happens outside the timed region. State size is exact
//! accounting of the feature grids a fuser keeps between frames.

use std::io::{Read, Write};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BevError, Result};
use crate::fusion::{FrameInput, ParallelFuser, RecurrentFuser};
use crate::geometry::{GridGeometry, Pose2};
use crate::grid::{ConvKernel, FeatureGrid};

pub const REPORT_HEADER: &str = "mode,k,frames,lat_mean_s,lat_p50_s,lat_p95_s,state_bytes,params";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Recurrent,
    Parallel,
}

impl FusionMode {
    pub const ALL: [FusionMode; 2] = [FusionMode::Recurrent, FusionMode::Parallel];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mode: FusionMode,
    pub k: usize,
    /// Timed frames.
    pub frames: usize,
    pub lat_mean_s: f64,
    pub lat_p50_s: f64,
    pub lat_p95_s: f64,
    pub state_bytes: usize,
    pub params: usize,
}

/// Workload shape shared by every run of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub resolution: f64,
    pub kernel_size: usize,
    /// Frames per pass beyond the `k - 1` needed to fill the window.
    pub timed_frames: usize,
    pub repetitions: usize,
    /// Ego displacement per frame along x, meters.
    pub ego_step: f64,
    pub k_grid: Vec<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            channels: 80,
            height: 128,
            width: 128,
            resolution: 0.8,
            kernel_size: 3,
            timed_frames: 3,
            repetitions: 1,
            ego_step: 1.0,
            k_grid: vec![1, 2, 4, 8, 16],
        }
    }
}

impl BenchConfig {
    pub fn geometry(&self) -> Result<GridGeometry> {
        GridGeometry::new(self.height, self.width, self.resolution)
    }
}

/// Bytes a fuser retains between frames at steady state.
pub fn analytic_state_bytes(
    mode: FusionMode,
    k: usize,
    channels: usize,
    geometry: &GridGeometry,
) -> usize {
    let grid = channels * geometry.cells() * std::mem::size_of::<f64>();
    match mode {
        FusionMode::Recurrent => grid,
        FusionMode::Parallel => k * grid,
    }
}

/// Deterministic synthetic frame `index` of the benchmark stream.
fn bench_frame(
    geometry: GridGeometry,
    channels: usize,
    ego_step: f64,
    seed: u64,
    index: usize,
) -> FrameInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    FrameInput::new(
        FeatureGrid::random(geometry, channels, 1.0, &mut rng),
        index as f64 * 0.5,
        Pose2::new(index as f64 * ego_step, 0.0, 0.0),
        index as u64,
    )
}

enum Fuser {
    Recurrent(RecurrentFuser, crate::fusion::FusionState),
    Parallel(ParallelFuser),
}

impl Fuser {
    fn step(&mut self, frame: FrameInput) -> Result<()> {
        match self {
            Fuser::Recurrent(f, state) => f.step(state, &frame).map(|_| ()),
            Fuser::Parallel(p) => p.step(frame).map(|_| ()),
        }
    }

    fn push_only(&mut self, frame: FrameInput) -> Result<()> {
        match self {
            Fuser::Recurrent(f, state) => f.step(state, &frame).map(|_| ()),
            Fuser::Parallel(p) => p.push(frame),
        }
    }

    fn reset(&mut self) {
        match self {
            Fuser::Recurrent(_, state) => state.reset(),
            Fuser::Parallel(p) => p.reset(),
        }
    }

    fn retained_bytes(&self) -> usize {
        match self {
            Fuser::Recurrent(_, state) => state.retained_bytes(),
            Fuser::Parallel(p) => p.retained_bytes(),
        }
    }

    fn params(&self) -> usize {
        match self {
            Fuser::Recurrent(f, _) => f.param_count(),
            Fuser::Parallel(p) => p.param_count(),
        }
    }
}

/// Times one fusion style at window `k`.
///
/// Both modes time the fusion of the same `n_frames - k + 1` frames per pass,
/// the ones for which a full window exists. The parallel fuser is first filled
/// with the `k - 1` preceding frames; the recurrent fuser is primed with one
/// preceding frame so its memory is non-zero. One fused frame is run before
/// timing starts.
pub fn bench_fusion(
    mode: FusionMode,
    k: usize,
    n_frames: usize,
    config: &BenchConfig,
    seed: u64,
) -> Result<BenchReport> {
    if k == 0 || n_frames < k {
        return Err(BevError::InsufficientFrames {
            window: k,
            frames: n_frames,
        });
    }
    let geometry = config.geometry()?;
    let c = config.channels;
    let ks = config.kernel_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut fuser = match mode {
        FusionMode::Recurrent => {
            let scale = 1.0 / (2 * c * ks * ks) as f64;
            let f = RecurrentFuser::new(
                ConvKernel::random(c, c, ks, ks, scale, &mut rng),
                ConvKernel::random(c, c, ks, ks, scale, &mut rng),
            )?;
            let state = f.new_state(geometry, 0);
            Fuser::Recurrent(f, state)
        }
        FusionMode::Parallel => {
            let scale = 1.0 / (k * c * ks * ks) as f64;
            Fuser::Parallel(ParallelFuser::new(
                ConvKernel::random(c, k * c, ks, ks, scale, &mut rng),
                k,
            )?)
        }
    };
    // Stream positions 1..=n_frames are the workload; position 0 only primes the recurrent memory.
    let frame = |pos: usize| bench_frame(geometry, c, config.ego_step, seed, pos);
    let prime = |fuser: &mut Fuser| -> Result<()> {
        match fuser {
            Fuser::Recurrent(..) => fuser.push_only(frame(k - 1)),
            Fuser::Parallel(_) => (1..k).try_for_each(|pos| fuser.push_only(frame(pos))),
        }
    };

    prime(&mut fuser)?;
    fuser.step(frame(k))?;

    let mut samples: Vec<Duration> = Vec::with_capacity(config.repetitions * (n_frames - k + 1));
    let mut state_bytes = 0;
    for _ in 0..config.repetitions.max(1) {
        fuser.reset();
        prime(&mut fuser)?;
        for pos in k..=n_frames {
            let f = frame(pos);
            let start = Instant::now();
            fuser.step(f)?;
            samples.push(start.elapsed());
            state_bytes = state_bytes.max(fuser.retained_bytes());
        }
    }

    let mut secs: Vec<f64> = samples.iter().map(Duration::as_secs_f64).collect();
    secs.sort_by(f64::total_cmp);
    Ok(BenchReport {
        mode,
        k,
        frames: secs.len(),
        lat_mean_s: secs.iter().sum::<f64>() / secs.len() as f64,
        lat_p50_s: percentile(&secs, 0.50),
        lat_p95_s: percentile(&secs, 0.95),
        state_bytes,
        params: fuser.params(),
    })
}

/// Nearest-rank percentile of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Runs both modes over `config.k_grid`, recurrent rows first.
pub fn bench_sweep(config: &BenchConfig, seed: u64) -> Result<Vec<BenchReport>> {
    let mut reports = Vec::new();
    for mode in FusionMode::ALL {
        for &k in &config.k_grid {
            reports.push(bench_fusion(
                mode,
                k,
                k - 1 + config.timed_frames,
                config,
                seed,
            )?);
        }
    }
    Ok(reports)
}

pub fn emit_report_csv<W: Write>(reports: &[BenchReport], writer: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(writer);
    out.write_record(REPORT_HEADER.split(','))?;
    for r in reports {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn emit_report_json<W: Write>(reports: &[BenchReport], writer: W) -> Result<()> {
    serde_json::to_writer_pretty(writer, reports).map_err(|e| BevError::Format(e.to_string()))
}

pub fn parse_report_csv<R: Read>(reader: R) -> Result<Vec<BenchReport>> {
    let mut input = csv::Reader::from_reader(reader);
    let header: Vec<String> = input.headers()?.iter().map(str::to_owned).collect();
    if header.join(",") != REPORT_HEADER {
        return Err(BevError::Format(format!(
            "unexpected report header {header:?}"
        )));
    }
    input
        .deserialize()
        .map(|r| r.map_err(BevError::from))
        .collect()
}

/// Human-readable table plus a note on what was measured.
pub fn summary_text(reports: &[BenchReport]) -> String {
    let mut s = String::from(
        "# fusion-module latency only (warp + concat + conv); backbone and heads excluded\n",
    );
    s.push_str(&format!(
        "{:<10} {:>3} {:>6} {:>12} {:>12} {:>12} {:>14} {:>10}\n",
        "mode", "k", "frames", "mean_ms", "p50_ms", "p95_ms", "state_bytes", "params"
    ));
    for r in reports {
        s.push_str(&format!(
            "{:<10} {:>3} {:>6} {:>12.3} {:>12.3} {:>12.3} {:>14} {:>10}\n",
            match r.mode {
                FusionMode::Recurrent => "recurrent",
                FusionMode::Parallel => "parallel",
            },
            r.k,
            r.frames,
            r.lat_mean_s * 1e3,
            r.lat_p50_s * 1e3,
            r.lat_p95_s * 1e3,
            r.state_bytes,
            r.params
        ));
    }
    s
}
