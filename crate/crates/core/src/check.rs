//! Self-verification suites: chained recurrence against its closed-form
//! unroll, the kernel-split identity of sliding-window fusion, zero-memory
//! start-up, and the geometry/resampling laws both rest on.
//!
//! Every case reports its residual next to the tolerance it was judged by.

use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{BevError, Result};
use crate::fusion::{
    oracle_margins, parallel_fuse, parallel_fuse_split, unrolled_oracle, FrameInput, RecurrentFuser,
};
use crate::geometry::{relative_transform, GridGeometry, GridTransform, Pose2};
use crate::grid::{channel_split, conv2d, grid_sample, ConvKernel, FeatureGrid, Margins};

pub const RESULT_HEADER: &str = "suite,case,seed,param,residual,tolerance,passed";

#[derive(
    Debug,
    Clone,
    Copy,
    PartialEq,
    Eq,
    Hash,
    PartialOrd,
    Ord,
    Serialize,
    Deserialize,
    clap::ValueEnum,
)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    /// Chained recurrent steps vs the closed-form unroll.
    Oracle,
    /// Full window convolution vs the sum of per-frame chunk convolutions.
    Split,
    /// First step from zero memory.
    ZeroInit,
    /// Pose group laws, transform composition, warp exactness.
    Geometry,
}

impl Suite {
    pub const ALL: [Suite; 4] = [
        Suite::Oracle,
        Suite::Split,
        Suite::ZeroInit,
        Suite::Geometry,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Oracle => "oracle",
            Suite::Split => "split",
            Suite::ZeroInit => "zero_init",
            Suite::Geometry => "geometry",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Test hook: after `after_step` recurrent steps, `magnitude` is added to
/// every weight of the memory kernel. The oracle keeps the original kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultInjection {
    pub after_step: usize,
    pub magnitude: f64,
}

impl Default for FaultInjection {
    fn default() -> Self {
        Self {
            after_step: 2,
            magnitude: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckConfig {
    pub seeds: usize,
    pub max_len: usize,
    pub max_window: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub resolution: f64,
    pub kernel_size: usize,
    /// Largest per-step ego translation, in cells, for the oracle streams.
    pub max_step_cells: i64,
    /// Pose triples for the geometry suite.
    pub geometry_samples: usize,
    pub tolerance: f64,
    pub geometry_tolerance: f64,
    pub fault: Option<FaultInjection>,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            seeds: 20,
            max_len: 8,
            max_window: 5,
            height: 32,
            width: 32,
            channels: 4,
            resolution: 0.8,
            kernel_size: 3,
            max_step_cells: 1,
            geometry_samples: 1000,
            tolerance: 1e-6,
            geometry_tolerance: 1e-9,
            fault: None,
        }
    }
}

impl CheckConfig {
    pub fn geometry(&self) -> Result<GridGeometry> {
        GridGeometry::new(self.height, self.width, self.resolution)
    }

    fn case_seed(base: u64, suite: Suite, seed_index: usize, param: usize) -> u64 {
        base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
            ^ ((suite as u64) << 56)
            ^ ((param as u64) << 32)
            ^ seed_index as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub suite: Suite,
    pub case: String,
    pub seed: u64,
    /// Sequence length, window size or sample count, depending on the case.
    pub param: usize,
    pub residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn within(
        suite: Suite,
        case: &str,
        seed: u64,
        param: usize,
        residual: f64,
        tolerance: f64,
    ) -> Self {
        Self {
            suite,
            case: case.to_owned(),
            seed,
            param,
            residual,
            tolerance,
            passed: residual <= tolerance,
        }
    }

    /// Tolerance zero means bit-exact; `passed` is decided by the caller.
    fn exact(
        suite: Suite,
        case: &str,
        seed: u64,
        param: usize,
        residual: f64,
        passed: bool,
    ) -> Self {
        Self {
            suite,
            case: case.to_owned(),
            seed,
            param,
            residual,
            tolerance: 0.0,
            passed,
        }
    }
}

fn random_kernel(
    rng: &mut ChaCha8Rng,
    out: usize,
    inp: usize,
    size: usize,
    row_sum: f64,
) -> ConvKernel {
    // Uniform in [-s, s) with s chosen so every output row's absolute sum stays below `row_sum`.
    ConvKernel::random(
        out,
        inp,
        size,
        size,
        row_sum / (inp * size * size) as f64,
        rng,
    )
}

/// Stream of random grids whose ego moves by whole cells each frame.
fn integer_motion_stream(
    rng: &mut ChaCha8Rng,
    geometry: GridGeometry,
    channels: usize,
    len: usize,
    max_step: i64,
) -> Vec<FrameInput> {
    let (mut col, mut row) = (0i64, 0i64);
    (0..len)
        .map(|i| {
            if i > 0 {
                col += rng.random_range(-max_step..=max_step);
                row += rng.random_range(-max_step..=max_step);
            }
            let pose = Pose2::new(
                col as f64 * geometry.resolution,
                row as f64 * geometry.resolution,
                0.0,
            );
            let grid = FeatureGrid::random(geometry, channels, 1.0, rng);
            FrameInput::new(grid, i as f64 * 0.5, pose, i as u64)
        })
        .collect()
}

fn random_pose(rng: &mut ChaCha8Rng, extent: f64) -> Pose2 {
    Pose2::new(
        rng.random_range(-extent..extent),
        rng.random_range(-extent..extent),
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    )
}

fn oracle_case(
    config: &CheckConfig,
    seed_index: usize,
    len: usize,
    base: u64,
) -> Result<CheckResult> {
    let seed = CheckConfig::case_seed(base, Suite::Oracle, seed_index, len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geometry = config.geometry()?;
    let c = config.channels;
    let v_mem = random_kernel(&mut rng, c, c, config.kernel_size, 0.9);
    let v_cur = random_kernel(&mut rng, c, c, config.kernel_size, 1.0);
    let frames = integer_motion_stream(&mut rng, geometry, c, len, config.max_step_cells);

    let mut fuser = RecurrentFuser::new(v_mem.clone(), v_cur.clone())?;
    let mut state = fuser.new_state(geometry, 0);
    let mut chained = None;
    for (i, f) in frames.iter().enumerate() {
        if let Some(fault) = config.fault.filter(|fault| fault.after_step == i) {
            fuser
                .v_mem_mut()
                .weights_mut()
                .iter_mut()
                .for_each(|w| *w += fault.magnitude);
        }
        chained = Some(fuser.step(&mut state, f)?);
    }
    let chained = chained.ok_or(BevError::EmptyStream)?;
    let oracle = unrolled_oracle(&frames, &v_mem, &v_cur)?;
    let margins =
        oracle_margins(&frames, v_mem.radius().max(v_cur.radius()))?.ok_or_else(|| {
            BevError::InvalidGeometry("oracle stream is not an integer translation".into())
        })?;
    if margins.interior_cells(&geometry) == 0 {
        return Ok(CheckResult::within(
            Suite::Oracle,
            "chained_vs_unrolled",
            seed,
            len,
            f64::INFINITY,
            config.tolerance,
        ));
    }
    let residual = chained.interior_max_abs_diff(&oracle, margins)?;
    Ok(CheckResult::within(
        Suite::Oracle,
        "chained_vs_unrolled",
        seed,
        len,
        residual,
        config.tolerance,
    ))
}

fn split_case(config: &CheckConfig, seed_index: usize, k: usize, base: u64) -> Result<CheckResult> {
    let seed = CheckConfig::case_seed(base, Suite::Split, seed_index, k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geometry = config.geometry()?;
    let c = config.channels;
    // One frame more than the window, under arbitrary (fractional, rotating) motion.
    let history: Vec<FrameInput> = (0..=k)
        .map(|i| {
            let pose = random_pose(&mut rng, 4.0);
            FrameInput::new(
                FeatureGrid::random(geometry, c, 1.0, &mut rng),
                i as f64 * 0.5,
                pose,
                i as u64,
            )
        })
        .collect();
    let u = random_kernel(&mut rng, c, k * c, config.kernel_size, 1.0);
    let whole = parallel_fuse(&history, k, &u)?;
    let split = parallel_fuse_split(&history, k, &channel_split(&u, k)?)?;
    let residual = whole.max_abs_diff(&split)?;
    Ok(CheckResult::within(
        Suite::Split,
        "window_vs_chunk_sum",
        seed,
        k,
        residual,
        config.tolerance,
    ))
}

fn zero_init_cases(config: &CheckConfig, seed_index: usize, base: u64) -> Result<Vec<CheckResult>> {
    let seed = CheckConfig::case_seed(base, Suite::ZeroInit, seed_index, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geometry = config.geometry()?;
    let c = config.channels;
    let fuser = RecurrentFuser::new(
        random_kernel(&mut rng, c, c, config.kernel_size, 0.9),
        random_kernel(&mut rng, c, c, config.kernel_size, 1.0),
    )?;
    let frames = integer_motion_stream(&mut rng, geometry, c, 3, config.max_step_cells);

    let mut state = fuser.new_state(geometry, 0);
    let first = fuser.step(&mut state, &frames[0])?;
    let direct = conv2d(&frames[0].grid, fuser.v_cur())?;
    let mut results = vec![CheckResult::exact(
        Suite::ZeroInit,
        "first_step_is_current_conv",
        seed,
        1,
        first.max_abs_diff(&direct)?,
        first.bit_eq(&direct),
    )];

    for f in &frames[1..] {
        fuser.step(&mut state, f)?;
    }
    state.reset();
    let after_reset = fuser.step(&mut state, &frames[0])?;
    results.push(CheckResult::exact(
        Suite::ZeroInit,
        "reset_matches_fresh_stream",
        seed,
        frames.len(),
        after_reset.max_abs_diff(&first)?,
        after_reset.bit_eq(&first),
    ));
    Ok(results)
}

/// `out[row][col] = src[row + dr][col + dc]`, zero outside; written cell by cell.
pub fn index_shift_reference(src: &FeatureGrid, dc: i64, dr: i64) -> FeatureGrid {
    let mut out = FeatureGrid::zeros(*src.geometry(), src.channels());
    let (h, w) = (src.height() as i64, src.width() as i64);
    for c in 0..src.channels() {
        for row in 0..h {
            for col in 0..w {
                let (sr, sc) = (row + dr, col + dc);
                if (0..h).contains(&sr) && (0..w).contains(&sc) {
                    out.set(
                        c,
                        row as usize,
                        col as usize,
                        src.get(c, sr as usize, sc as usize),
                    );
                }
            }
        }
    }
    out
}

fn pose_residual(a: &Pose2, b: &Pose2) -> f64 {
    let dyaw = crate::geometry::normalize_angle(a.yaw - b.yaw).abs();
    (a.x - b.x).abs().max((a.y - b.y).abs()).max(dyaw)
}

fn geometry_cases(config: &CheckConfig, base: u64) -> Result<Vec<CheckResult>> {
    let seed = CheckConfig::case_seed(base, Suite::Geometry, 0, config.geometry_samples);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geometry = config.geometry()?;
    let n = config.geometry_samples;
    let tol = config.geometry_tolerance;

    let (mut assoc, mut neutral, mut cancel, mut chain) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..n {
        let (a, b, c) = (
            random_pose(&mut rng, 20.0),
            random_pose(&mut rng, 20.0),
            random_pose(&mut rng, 20.0),
        );
        assoc = assoc.max(pose_residual(
            &a.compose(&b).compose(&c),
            &a.compose(&b.compose(&c)),
        ));
        neutral = neutral
            .max(pose_residual(&Pose2::identity().compose(&a), &a))
            .max(pose_residual(&a.compose(&Pose2::identity()), &a));
        cancel = cancel
            .max(pose_residual(&a.compose(&a.inverse()), &Pose2::identity()))
            .max(pose_residual(&a.inverse().compose(&a), &Pose2::identity()));
        let t_ac = relative_transform(&a, &c, &geometry)?;
        let t_ab = relative_transform(&a, &b, &geometry)?;
        let t_bc = relative_transform(&b, &c, &geometry)?;
        chain = chain.max(GridTransform::compose(&t_bc, &t_ab).max_abs_diff(&t_ac));
    }
    let mut results = vec![
        CheckResult::within(Suite::Geometry, "pose_associativity", seed, n, assoc, tol),
        CheckResult::within(Suite::Geometry, "pose_identity", seed, n, neutral, tol),
        CheckResult::within(Suite::Geometry, "pose_inverse", seed, n, cancel, tol),
        CheckResult::within(
            Suite::Geometry,
            "transform_composition",
            seed,
            n,
            chain,
            tol,
        ),
    ];

    let c = config.channels;
    let kernel = random_kernel(&mut rng, c, c, config.kernel_size, 1.0);
    let radius = kernel.radius();
    let (mut shift_exact, mut shift_residual) = (true, 0.0f64);
    let mut commute = 0.0f64;
    let mut compose_exact = true;
    let mut compose_residual = 0.0f64;
    for _ in 0..config.seeds.max(1) {
        let grid = FeatureGrid::random(geometry, c, 1.0, &mut rng);
        let (dc, dr) = (rng.random_range(-4..=4i64), rng.random_range(-4..=4i64));
        let t = GridTransform::translation(dc as f64, dr as f64);
        let warped = grid_sample(&grid, &t);
        let reference = index_shift_reference(&grid, dc, dr);
        shift_exact &= warped.bit_eq(&reference);
        shift_residual = shift_residual.max(warped.max_abs_diff(&reference)?);

        let lhs = conv2d(&warped, &kernel)?;
        let rhs = grid_sample(&conv2d(&grid, &kernel)?, &t);
        let m = Margins {
            left: radius + dc.unsigned_abs() as usize,
            right: radius + dc.unsigned_abs() as usize,
            top: radius + dr.unsigned_abs() as usize,
            bottom: radius + dr.unsigned_abs() as usize,
        };
        commute = commute.max(lhs.interior_max_abs_diff(&rhs, m)?);

        let (ec, er) = (rng.random_range(-4..=4i64), rng.random_range(-4..=4i64));
        let inner = GridTransform::translation(ec as f64, er as f64);
        let twice = grid_sample(&grid_sample(&grid, &inner), &t);
        let once = grid_sample(&grid, &GridTransform::compose(&inner, &t));
        let span = |a: i64, b: i64| (a.unsigned_abs() + b.unsigned_abs()) as usize;
        let mm = Margins {
            left: span(dc, ec),
            right: span(dc, ec),
            top: span(dr, er),
            bottom: span(dr, er),
        };
        let d = twice.interior_max_abs_diff(&once, mm)?;
        compose_exact &= d == 0.0;
        compose_residual = compose_residual.max(d);
    }
    let trials = config.seeds.max(1);
    results.push(CheckResult::exact(
        Suite::Geometry,
        "integer_shift_exact",
        seed,
        trials,
        shift_residual,
        shift_exact,
    ));
    results.push(CheckResult::within(
        Suite::Geometry,
        "warp_conv_commute",
        seed,
        trials,
        commute,
        config.tolerance,
    ));
    results.push(CheckResult::exact(
        Suite::Geometry,
        "warp_composition_exact",
        seed,
        trials,
        compose_residual,
        compose_exact,
    ));
    Ok(results)
}

/// Runs the selected suites. Cases within a suite run in parallel; the
/// result order is fixed by (suite, seed index, parameter).
pub fn run_checks(
    suites: &[Suite],
    config: &CheckConfig,
    base_seed: u64,
) -> Result<Vec<CheckResult>> {
    if suites.is_empty() {
        return Err(BevError::Config("no check suite selected".into()));
    }
    if config.seeds == 0 || config.max_len == 0 || config.max_window == 0 {
        return Err(BevError::Config(
            "seeds, max_len and max_window must be at least 1".into(),
        ));
    }
    config.geometry()?;
    let mut selected = suites.to_vec();
    selected.sort();
    selected.dedup();

    let mut out = Vec::new();
    for suite in selected {
        let batch: Vec<CheckResult> = match suite {
            Suite::Oracle => cartesian(config.seeds, 1..=config.max_len)
                .into_par_iter()
                .map(|(s, len)| oracle_case(config, s, len, base_seed))
                .collect::<Result<_>>()?,
            Suite::Split => cartesian(config.seeds, 1..=config.max_window)
                .into_par_iter()
                .map(|(s, k)| split_case(config, s, k, base_seed))
                .collect::<Result<_>>()?,
            Suite::ZeroInit => (0..config.seeds)
                .into_par_iter()
                .map(|s| zero_init_cases(config, s, base_seed))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect(),
            Suite::Geometry => geometry_cases(config, base_seed)?,
        };
        out.extend(batch);
    }
    Ok(out)
}

fn cartesian(seeds: usize, params: std::ops::RangeInclusive<usize>) -> Vec<(usize, usize)> {
    (0..seeds)
        .flat_map(|s| params.clone().map(move |p| (s, p)))
        .collect()
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    !results.is_empty() && results.iter().all(|r| r.passed)
}

/// Worst case per (suite, case), in first-seen order.
pub fn summarize(results: &[CheckResult]) -> Vec<CheckResult> {
    let mut worst: Vec<CheckResult> = Vec::new();
    for r in results {
        match worst
            .iter_mut()
            .find(|w| w.suite == r.suite && w.case == r.case)
        {
            Some(w) => {
                let worse =
                    (w.passed && !r.passed) || (w.passed == r.passed && r.residual > w.residual);
                if worse {
                    *w = r.clone();
                }
            }
            None => worst.push(r.clone()),
        }
    }
    worst
}

pub fn emit_results_csv<W: Write>(results: &[CheckResult], writer: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(writer);
    out.write_record(RESULT_HEADER.split(','))?;
    for r in results {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
