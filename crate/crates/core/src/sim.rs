//! Synthetic BEV scenes standing in for a camera backbone.
//!
//! Each object is a Gaussian blob drawn into its own feature channel at its
//! position relative to the ego vehicle. The ego follows piecewise-constant
//! body-frame velocity and yaw rate, integrated in closed form.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{BevError, Result};
use crate::fusion::FrameInput;
use crate::geometry::{GridGeometry, Pose2};
use crate::grid::FeatureGrid;

/// Blobs are drawn out to this many standard deviations.
const BLOB_EXTENT_SIGMAS: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectSpec {
    /// World position at t = 0, meters.
    pub position: [f64; 2],
    /// World velocity, m/s.
    pub velocity: [f64; 2],
    /// Gaussian standard deviation, meters.
    pub radius: f64,
    pub amplitude: f64,
    pub channel: usize,
    /// The object stops being rendered after this time (seconds).
    pub visible_until: Option<f64>,
}

impl Default for ObjectSpec {
    fn default() -> Self {
        Self {
            position: [0.0, 0.0],
            velocity: [0.0, 0.0],
            radius: 1.6,
            amplitude: 1.0,
            channel: 0,
            visible_until: None,
        }
    }
}

impl ObjectSpec {
    pub fn world_position(&self, t: f64) -> (f64, f64) {
        (
            self.position[0] + self.velocity[0] * t,
            self.position[1] + self.velocity[1] * t,
        )
    }

    pub fn visible_at(&self, t: f64) -> bool {
        self.visible_until.is_none_or(|until| t <= until)
    }
}

/// Constant body-frame twist held for `duration` seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EgoSegment {
    pub duration: f64,
    /// Body-frame velocity, m/s.
    pub velocity: [f64; 2],
    /// rad/s.
    pub yaw_rate: f64,
}

impl Default for EgoSegment {
    fn default() -> Self {
        Self {
            duration: f64::INFINITY,
            velocity: [0.0, 0.0],
            yaw_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EgoSpec {
    pub initial: Pose2,
    /// The last segment is held past its duration.
    pub segments: Vec<EgoSegment>,
}

impl Default for EgoSpec {
    fn default() -> Self {
        Self {
            initial: Pose2::identity(),
            segments: vec![EgoSegment {
                velocity: [2.0, 0.0],
                ..EgoSegment::default()
            }],
        }
    }
}

/// Rigid displacement after holding a body twist for `dt` seconds.
fn twist_exp(vx: f64, vy: f64, yaw_rate: f64, dt: f64) -> Pose2 {
    let theta = yaw_rate * dt;
    if theta.abs() < 1e-12 {
        return Pose2::new(vx * dt, vy * dt, theta);
    }
    let (s, c) = theta.sin_cos();
    Pose2::new(
        (s * vx - (1.0 - c) * vy) / yaw_rate,
        ((1.0 - c) * vx + s * vy) / yaw_rate,
        theta,
    )
}

impl EgoSpec {
    pub fn pose_at(&self, t: f64) -> Pose2 {
        let mut pose = self.initial;
        let mut remaining = t;
        for (i, seg) in self.segments.iter().enumerate() {
            if remaining <= 0.0 {
                break;
            }
            let last = i + 1 == self.segments.len();
            let dt = if last {
                remaining
            } else {
                remaining.min(seg.duration)
            };
            pose = pose.compose(&twist_exp(
                seg.velocity[0],
                seg.velocity[1],
                seg.yaw_rate,
                dt,
            ));
            remaining -= dt;
        }
        pose
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Seconds.
    pub duration: f64,
    /// Seconds between ticks.
    pub nominal_interval: f64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Meters per cell.
    pub resolution: f64,
    pub objects: Vec<ObjectSpec>,
    pub ego: EgoSpec,
    pub seed: u64,
    /// Standard deviation of additive Gaussian feature noise.
    pub noise_std: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            duration: 10.0,
            nominal_interval: 0.5,
            channels: 4,
            height: 128,
            width: 128,
            resolution: 0.8,
            objects: vec![
                ObjectSpec {
                    position: [12.0, 6.0],
                    velocity: [3.0, 0.0],
                    channel: 0,
                    ..ObjectSpec::default()
                },
                ObjectSpec {
                    position: [-8.0, -10.0],
                    velocity: [1.0, 1.5],
                    channel: 1,
                    ..ObjectSpec::default()
                },
                ObjectSpec {
                    position: [20.0, -4.0],
                    velocity: [0.0, 0.0],
                    channel: 2,
                    ..ObjectSpec::default()
                },
            ],
            ego: EgoSpec::default(),
            seed: crate::DEFAULT_SEED,
            noise_std: 0.0,
        }
    }
}

impl SceneConfig {
    pub fn geometry(&self) -> Result<GridGeometry> {
        GridGeometry::new(self.height, self.width, self.resolution)
    }

    pub fn frame_count(&self) -> usize {
        ((self.duration / self.nominal_interval) + 1e-9).floor() as usize
    }

    pub fn timestamp(&self, tick: usize) -> f64 {
        tick as f64 * self.nominal_interval
    }

    pub fn validate(&self) -> Result<()> {
        let geometry = self
            .geometry()
            .map_err(|e| BevError::Config(e.to_string()))?;
        if !(self.nominal_interval > 0.0) {
            return Err(BevError::Config(format!(
                "nominal_interval must be positive, got {}",
                self.nominal_interval
            )));
        }
        if !(self.duration > 0.0) || self.frame_count() == 0 {
            return Err(BevError::Config(format!(
                "duration {} yields no frames at interval {}",
                self.duration, self.nominal_interval
            )));
        }
        if self.channels == 0 {
            return Err(BevError::Config("channels must be at least 1".into()));
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(BevError::Config(format!(
                "invalid noise_std {}",
                self.noise_std
            )));
        }
        let (hx, hy) = geometry.half_range();
        let start = self.ego.pose_at(0.0).inverse();
        for (i, obj) in self.objects.iter().enumerate() {
            if obj.channel >= self.channels {
                return Err(BevError::Config(format!(
                    "object {i} uses channel {} but the grid has {}",
                    obj.channel, self.channels
                )));
            }
            if !(obj.radius > 0.0) {
                return Err(BevError::Config(format!(
                    "object {i} radius must be positive"
                )));
            }
            let (x, y) = start.transform_point(obj.position[0], obj.position[1]);
            if x.abs() > hx || y.abs() > hy {
                return Err(BevError::Config(format!(
                    "object {i} starts at ({x:.2}, {y:.2}) m, outside the perception range"
                )));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| BevError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Position of an object in the ego frame at `tick`, meters.
    pub fn object_in_ego(&self, object: &ObjectSpec, tick: usize) -> (f64, f64) {
        let t = self.timestamp(tick);
        let (wx, wy) = object.world_position(t);
        self.ego.pose_at(t).inverse().transform_point(wx, wy)
    }
}

/// Isotropic Gaussian feature blob in grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    /// Fractional `(col, row)`.
    pub center: (f64, f64),
    /// Standard deviation in cells.
    pub radius: f64,
    pub amplitude: f64,
}

impl Blob {
    /// Integral of the continuous Gaussian over the plane.
    pub fn analytic_mass(&self) -> f64 {
        self.amplitude * 2.0 * std::f64::consts::PI * self.radius * self.radius
    }

    /// Adds the blob into one channel; cells outside the grid are dropped.
    pub fn render_into(&self, grid: &mut FeatureGrid, channel: usize) {
        let (h, w) = (grid.height() as isize, grid.width() as isize);
        let reach = (BLOB_EXTENT_SIGMAS * self.radius).ceil() as isize;
        let (cc, cr) = self.center;
        if !cc.is_finite() || !cr.is_finite() {
            return;
        }
        let col0 = (cc.round() as isize - reach).max(0);
        let col1 = (cc.round() as isize + reach).min(w - 1);
        let row0 = (cr.round() as isize - reach).max(0);
        let row1 = (cr.round() as isize + reach).min(h - 1);
        let inv = 1.0 / (2.0 * self.radius * self.radius);
        for row in row0..=row1 {
            for col in col0..=col1 {
                let (dc, dr) = (col as f64 - cc, row as f64 - cr);
                let v = self.amplitude * (-(dc * dc + dr * dr) * inv).exp();
                let (r, c) = (row as usize, col as usize);
                grid.set(channel, r, c, grid.get(channel, r, c) + v);
            }
        }
    }
}

fn render_tick(config: &SceneConfig, geometry: GridGeometry, tick: usize) -> FrameInput {
    let t = config.timestamp(tick);
    let pose = config.ego.pose_at(t);
    let to_ego = pose.inverse();
    let mut grid = FeatureGrid::zeros(geometry, config.channels);
    for obj in config.objects.iter().filter(|o| o.visible_at(t)) {
        let (wx, wy) = obj.world_position(t);
        let (ex, ey) = to_ego.transform_point(wx, wy);
        Blob {
            center: geometry.metric_to_cell(ex, ey),
            radius: obj.radius / geometry.resolution,
            amplitude: obj.amplitude,
        }
        .render_into(&mut grid, obj.channel);
    }
    if config.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(tick as u64);
        let normal = Normal::new(0.0, config.noise_std).expect("validated noise_std");
        grid.data_mut()
            .iter_mut()
            .for_each(|v| *v += normal.sample(&mut rng));
    }
    FrameInput::new(grid, t, pose, tick as u64)
}

/// Renders one frame per tick; deterministic in the config (including its seed).
pub fn simulate(config: &SceneConfig) -> Result<Vec<FrameInput>> {
    config.validate()?;
    let geometry = config.geometry()?;
    Ok((0..config.frame_count())
        .into_par_iter()
        .map(|tick| render_tick(config, geometry, tick))
        .collect())
}

/// Per-frame keep flags. One uniform draw per frame, so for a fixed seed the
/// frames dropped at a lower rate are a subset of those dropped at a higher one.
pub fn drop_mask(len: usize, fmr: f64, seed: u64) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&fmr) {
        return Err(BevError::InvalidRate(fmr));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..len)
        .map(|i| {
            let u: f64 = rng.random();
            i == 0 || u >= fmr
        })
        .collect())
}

/// Removes each non-first frame independently with probability `fmr`.
pub fn drop_frames(stream: &[FrameInput], fmr: f64, seed: u64) -> Result<Vec<FrameInput>> {
    let keep = drop_mask(stream.len(), fmr, seed)?;
    Ok(stream
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(f, _)| f.clone())
        .collect())
}
