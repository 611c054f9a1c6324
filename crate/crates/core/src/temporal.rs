//! Recurrent embedding of inter-frame intervals and an analytic velocity
//! readout used to measure robustness against dropped frames.
//!
//! The interval `dt` is broadcast as a constant plane, passed through two
//! convolution layers, and fused recurrently: `E_i = e(dt * 1)`,
//! `Ebar_i = [Ebar_{i-1}; E_i] * K`.
//!
//! The velocity readout is a hand-built stand-in for a learned head. The fused
//! memory carries each object's current blob in one channel block and the
//! ego-aligned blob from the previous surviving frame in a second block (see
//! [`displacement_kernels`]); velocity is centroid displacement over an
//! interval that is either assumed nominal or decoded from the embedding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BevError, Result};
use crate::fusion::{FrameInput, FusionState, RecurrentFuser};
use crate::geometry::GridGeometry;
use crate::grid::{
    all_ones, channel_concat, conv2d, kernel_concat, Activation, ConvKernel, FeatureGrid, Margins,
};
use crate::sim::{drop_frames, simulate, EgoSegment, EgoSpec, ObjectSpec, SceneConfig};

/// Intervals (seconds) used to calibrate the interval decoder.
pub const CALIBRATION_INTERVALS: [f64; 4] = [0.5, 1.0, 1.5, 2.0];

/// `e(.)` (two conv layers) plus the recurrent fusion kernel `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalEmbedder {
    layer1: ConvKernel,
    layer2: ConvKernel,
    fuse_kernel: ConvKernel,
    embed_channels: usize,
    activation: Activation,
}

impl TemporalEmbedder {
    pub fn new(
        layer1: ConvKernel,
        layer2: ConvKernel,
        fuse_kernel: ConvKernel,
        activation: Activation,
    ) -> Result<Self> {
        let embed_channels = layer2.out_channels();
        if layer1.in_channels() != 1 {
            return Err(BevError::Shape(format!(
                "first embedding layer must read one plane, reads {}",
                layer1.in_channels()
            )));
        }
        if layer2.in_channels() != layer1.out_channels() {
            return Err(BevError::Shape(format!(
                "embedding layers disagree: {} -> {}",
                layer1.out_channels(),
                layer2.in_channels()
            )));
        }
        if fuse_kernel.in_channels() != 2 * embed_channels
            || fuse_kernel.out_channels() != embed_channels
        {
            return Err(BevError::Shape(format!(
                "K must map {} -> {embed_channels} channels, is {} -> {}",
                2 * embed_channels,
                fuse_kernel.in_channels(),
                fuse_kernel.out_channels()
            )));
        }
        Ok(Self {
            layer1,
            layer2,
            fuse_kernel,
            embed_channels,
            activation,
        })
    }

    /// Seeded 1x1 linear layers with the default fusion kernel.
    ///
    /// Layer 1 and row 0 of layer 2 use positive weights so channel 0 responds
    /// to `dt` with a nonzero slope; other rows have random sign.
    pub fn seeded(embed_channels: usize, hidden: usize, seed: u64) -> Result<Self> {
        if embed_channels == 0 || hidden == 0 {
            return Err(BevError::Shape("embedding widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer1 = ConvKernel::zeros(hidden, 1, 1, 1);
        for h in 0..hidden {
            layer1.set(h, 0, 0, 0, rng.random_range(0.5..1.0));
        }
        let mut layer2 = ConvKernel::zeros(embed_channels, hidden, 1, 1);
        for o in 0..embed_channels {
            for h in 0..hidden {
                let w = if o == 0 {
                    rng.random_range(0.5..1.0)
                } else {
                    rng.random_range(-1.0..1.0)
                };
                layer2.set(o, h, 0, 0, w / hidden as f64);
            }
        }
        Self::new(
            layer1,
            layer2,
            default_fuse_kernel(embed_channels, 1),
            Activation::Identity,
        )
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_fuse_kernel(self, fuse_kernel: ConvKernel) -> Result<Self> {
        Self::new(self.layer1, self.layer2, fuse_kernel, self.activation)
    }

    pub fn embed_channels(&self) -> usize {
        self.embed_channels
    }

    pub fn fuse_kernel(&self) -> &ConvKernel {
        &self.fuse_kernel
    }

    pub fn param_count(&self) -> usize {
        self.layer1.param_count() + self.layer2.param_count() + self.fuse_kernel.param_count()
    }

    /// Border width beyond which a single embedding step is spatially constant.
    pub fn interior_margin(&self) -> usize {
        self.layer1.radius() + self.layer2.radius() + self.fuse_kernel.radius()
    }

    /// `e(plane)` without validating the plane's value.
    pub fn apply(&self, plane: &FeatureGrid) -> Result<FeatureGrid> {
        let mut hidden = conv2d(plane, &self.layer1)?;
        self.activation.apply(&mut hidden);
        conv2d(&hidden, &self.layer2)
    }

    pub fn embed_interval(&self, dt: f64, geometry: GridGeometry) -> Result<FeatureGrid> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(BevError::InvalidInterval(dt));
        }
        self.apply(&all_ones(geometry, 1, dt)?)
    }

    pub fn new_state(&self, geometry: GridGeometry) -> EmbeddingState {
        EmbeddingState {
            embedding: FeatureGrid::zeros(geometry, self.embed_channels),
        }
    }

    /// `Ebar_i = [Ebar_{i-1}; e(dt * 1)] * K`.
    pub fn step(&self, state: &EmbeddingState, dt: f64) -> Result<EmbeddingState> {
        let current = self.embed_interval(dt, *state.embedding.geometry())?;
        let stacked = channel_concat(&state.embedding, &current)?;
        Ok(EmbeddingState {
            embedding: conv2d(&stacked, &self.fuse_kernel)?,
        })
    }
}

/// `K` with a history-free channel block and a leaky-average block.
///
/// Channel 0 copies the current interval embedding; the remaining channels
/// average history and current equally.
pub fn default_fuse_kernel(embed_channels: usize, size: usize) -> ConvKernel {
    let mut k_mem = ConvKernel::identity(embed_channels, size, 0.5);
    let mut k_cur = ConvKernel::identity(embed_channels, size, 0.5);
    let mid = size / 2;
    k_mem.set(0, 0, mid, mid, 0.0);
    k_cur.set(0, 0, mid, mid, 1.0);
    kernel_concat(&[k_mem, k_cur]).expect("matching chunk shapes")
}

/// Recurrent embedding `Ebar_i`, zero at stream start.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingState {
    pub embedding: FeatureGrid,
}

pub fn embed_interval(
    e: &TemporalEmbedder,
    dt: f64,
    geometry: GridGeometry,
) -> Result<FeatureGrid> {
    e.embed_interval(dt, geometry)
}

pub fn embed_step(state: &EmbeddingState, e: &TemporalEmbedder, dt: f64) -> Result<EmbeddingState> {
    e.step(state, dt)
}

/// Linear map from the interior mean of one embedding channel back to `dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntervalDecoder {
    pub channel: usize,
    pub margin: usize,
    slope: f64,
    intercept: f64,
}

impl IntervalDecoder {
    /// Least-squares fit of `mean = slope * dt + intercept` over single steps from a zero state.
    pub fn calibrate(
        embedder: &TemporalEmbedder,
        geometry: GridGeometry,
        channel: usize,
        intervals: &[f64],
    ) -> Result<Self> {
        if channel >= embedder.embed_channels() {
            return Err(BevError::Calibration(format!(
                "channel {channel} out of range for {} embedding channels",
                embedder.embed_channels()
            )));
        }
        if intervals.len() < 2 {
            return Err(BevError::Calibration(
                "need at least two calibration intervals".into(),
            ));
        }
        let margin = embedder.interior_margin();
        let zero = embedder.new_state(geometry);
        let values = intervals
            .iter()
            .map(|dt| {
                Ok(embedder
                    .step(&zero, *dt)?
                    .embedding
                    .interior_mean(channel, Margins::uniform(margin)))
            })
            .collect::<Result<Vec<f64>>>()?;
        let n = intervals.len() as f64;
        let mean_t = intervals.iter().sum::<f64>() / n;
        let mean_v = values.iter().sum::<f64>() / n;
        let var_v: f64 = values.iter().map(|v| (v - mean_v).powi(2)).sum();
        let var_t: f64 = intervals.iter().map(|t| (t - mean_t).powi(2)).sum();
        if var_v <= f64::EPSILON * mean_v.abs().max(1.0) || var_t == 0.0 {
            return Err(BevError::Calibration(format!(
                "embedding channel {channel} does not vary with the interval"
            )));
        }
        let cov: f64 = intervals
            .iter()
            .zip(&values)
            .map(|(t, v)| (t - mean_t) * (v - mean_v))
            .sum();
        let slope = cov / var_t;
        Ok(Self {
            channel,
            margin,
            slope,
            intercept: mean_v - slope * mean_t,
        })
    }

    pub fn decode(&self, embedding: &FeatureGrid) -> f64 {
        let v = embedding.interior_mean(self.channel, Margins::uniform(self.margin));
        (v - self.intercept) / self.slope
    }
}

/// Kernels that make the fused memory `[B_i ; warp(B_prev)]`.
///
/// `V_cur` copies the frame into the first block, `V_mem` moves the first
/// block of the aligned memory into the second and drops the rest.
pub fn displacement_kernels(feature_channels: usize, size: usize) -> (ConvKernel, ConvKernel) {
    let c = feature_channels;
    let mid = size / 2;
    let mut v_mem = ConvKernel::zeros(2 * c, 2 * c, size, size);
    let mut v_cur = ConvKernel::zeros(2 * c, c, size, size);
    for ch in 0..c {
        v_mem.set(c + ch, ch, mid, mid, 1.0);
        v_cur.set(ch, ch, mid, mid, 1.0);
    }
    (v_mem, v_cur)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntervalMode {
    /// Assume every interval equals the nominal one.
    Fixed,
    /// Decode the interval from the fused embedding.
    Embedded,
}

impl IntervalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            IntervalMode::Fixed => "fixed",
            IntervalMode::Embedded => "embedded",
        }
    }
}

/// Query for one object: its feature channel and approximate current cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectCell {
    pub channel: usize,
    pub col: f64,
    pub row: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityReadout {
    pub feature_channels: usize,
    /// Half-width (cells) of the centroid window around each query cell.
    pub window_radius: usize,
    pub nominal_interval: f64,
    pub decoder: IntervalDecoder,
}

impl VelocityReadout {
    pub fn interval(&self, embedding: &FeatureGrid, mode: IntervalMode) -> f64 {
        match mode {
            IntervalMode::Fixed => self.nominal_interval,
            IntervalMode::Embedded => self.decoder.decode(embedding),
        }
    }

    /// Ego-frame velocity (m/s) per object. An object with no evidence in
    /// either block reads as zero.
    pub fn read(
        &self,
        memory: &FeatureGrid,
        embedding: &FeatureGrid,
        objects: &[ObjectCell],
        mode: IntervalMode,
    ) -> Result<Vec<[f64; 2]>> {
        if memory.channels() != 2 * self.feature_channels {
            return Err(BevError::Shape(format!(
                "memory has {} channels, readout expects {}",
                memory.channels(),
                2 * self.feature_channels
            )));
        }
        let dt = self.interval(embedding, mode);
        objects
            .iter()
            .map(|obj| {
                if obj.channel >= self.feature_channels
                    || !(0.0..memory.width() as f64).contains(&obj.col)
                    || !(0.0..memory.height() as f64).contains(&obj.row)
                {
                    return Err(BevError::Shape(format!(
                        "object query {obj:?} out of bounds"
                    )));
                }
                let cur = window_centroid(memory, obj.channel, obj, self.window_radius);
                let prev = window_centroid(
                    memory,
                    self.feature_channels + obj.channel,
                    obj,
                    self.window_radius,
                );
                Ok(match (cur, prev) {
                    (Some((c1, r1)), Some((c0, r0))) => {
                        let res = memory.resolution();
                        [(c1 - c0) * res / dt, (r1 - r0) * res / dt]
                    }
                    _ => [0.0, 0.0],
                })
            })
            .collect()
    }
}

pub fn velocity_readout(
    memory: &FeatureGrid,
    embedding: &FeatureGrid,
    object_cells: &[ObjectCell],
    mode: IntervalMode,
    readout: &VelocityReadout,
) -> Result<Vec<[f64; 2]>> {
    readout.read(memory, embedding, object_cells, mode)
}

fn window_centroid(
    grid: &FeatureGrid,
    channel: usize,
    at: &ObjectCell,
    radius: usize,
) -> Option<(f64, f64)> {
    let (cc, cr) = (at.col.round() as isize, at.row.round() as isize);
    let r = radius as isize;
    let col0 = (cc - r).max(0) as usize;
    let col1 = ((cc + r) as usize).min(grid.width() - 1);
    let row0 = (cr - r).max(0) as usize;
    let row1 = ((cr + r) as usize).min(grid.height() - 1);
    let (mut mass, mut sc, mut sr) = (0.0, 0.0, 0.0);
    for row in row0..=row1 {
        for col in col0..=col1 {
            let v = grid.get(channel, row, col).max(0.0);
            mass += v;
            sc += v * col as f64;
            sr += v * row as f64;
        }
    }
    (mass > 1e-12).then(|| (sc / mass, sr / mass))
}

/// Recurrent feature fusion and interval embedding advanced together.
#[derive(Debug, Clone)]
pub struct TemporalFusion {
    pub fuser: RecurrentFuser,
    pub embedder: TemporalEmbedder,
}

impl TemporalFusion {
    pub fn new_state(&self, geometry: GridGeometry) -> FusionState {
        self.fuser
            .new_state(geometry, self.embedder.embed_channels())
    }

    /// Fuses the frame; the embedding advances from the second frame on, when an interval exists.
    pub fn step(&self, state: &mut FusionState, frame: &FrameInput) -> Result<FeatureGrid> {
        let dt = state.last_timestamp.map(|t| frame.timestamp - t);
        let fused = self.fuser.step(state, frame)?;
        if let Some(dt) = dt {
            let next = self.embedder.step(
                &EmbeddingState {
                    embedding: std::mem::replace(
                        &mut state.embedding,
                        FeatureGrid::zeros(*fused.geometry(), 0),
                    ),
                },
                dt,
            )?;
            state.embedding = next.embedding;
        }
        Ok(fused)
    }
}

/// Frame-drop experiment settings. Objects are redrawn per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameDropConfig {
    pub duration: f64,
    pub nominal_interval: f64,
    pub height: usize,
    pub width: usize,
    pub resolution: f64,
    pub object_count: usize,
    /// Objects start uniformly within this distance (m) of the ego on each axis.
    pub spawn_extent: f64,
    /// Object speed relative to the ego's world velocity, m/s.
    pub min_relative_speed: f64,
    pub max_relative_speed: f64,
    pub blob_radius: f64,
    pub ego_velocity: [f64; 2],
    pub ego_yaw_rate: f64,
    pub fmr_grid: Vec<f64>,
    pub embed_channels: usize,
    pub embed_hidden: usize,
    pub window_radius: usize,
    /// Per-cell Gaussian feature noise. Keeps the zero-drop error above zero.
    pub noise_std: f64,
}

impl Default for FrameDropConfig {
    fn default() -> Self {
        Self {
            duration: 16.0,
            nominal_interval: 0.5,
            height: 128,
            width: 128,
            resolution: 0.8,
            object_count: 4,
            spawn_extent: 12.0,
            min_relative_speed: 0.5,
            max_relative_speed: 1.5,
            blob_radius: 1.6,
            ego_velocity: [1.0, 0.0],
            ego_yaw_rate: 0.0,
            fmr_grid: vec![0.0, 0.25, 0.5],
            embed_channels: 8,
            embed_hidden: 8,
            window_radius: 16,
            noise_std: 0.01,
        }
    }
}

impl FrameDropConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(bad) = self.fmr_grid.iter().find(|f| !(0.0..1.0).contains(*f)) {
            return Err(BevError::InvalidRate(*bad));
        }
        if self.object_count == 0 {
            return Err(BevError::Config("object_count must be at least 1".into()));
        }
        if !(self.min_relative_speed >= 0.0 && self.max_relative_speed >= self.min_relative_speed) {
            return Err(BevError::Config("relative speed range is empty".into()));
        }
        Ok(())
    }

    /// Scene for one seed: one object per channel, speeds and headings drawn from the seed.
    pub fn scene(&self, seed: u64) -> SceneConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let objects = (0..self.object_count)
            .map(|ch| {
                let speed = if self.max_relative_speed > self.min_relative_speed {
                    rng.random_range(self.min_relative_speed..self.max_relative_speed)
                } else {
                    self.min_relative_speed
                };
                let heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                ObjectSpec {
                    position: [
                        rng.random_range(-self.spawn_extent..=self.spawn_extent),
                        rng.random_range(-self.spawn_extent..=self.spawn_extent),
                    ],
                    velocity: [
                        self.ego_velocity[0] + speed * heading.cos(),
                        self.ego_velocity[1] + speed * heading.sin(),
                    ],
                    radius: self.blob_radius,
                    amplitude: 1.0,
                    channel: ch,
                    visible_until: None,
                }
            })
            .collect();
        SceneConfig {
            duration: self.duration,
            nominal_interval: self.nominal_interval,
            channels: self.object_count,
            height: self.height,
            width: self.width,
            resolution: self.resolution,
            objects,
            ego: EgoSpec {
                initial: Default::default(),
                segments: vec![EgoSegment {
                    velocity: self.ego_velocity,
                    yaw_rate: self.ego_yaw_rate,
                    ..EgoSegment::default()
                }],
            },
            seed,
            noise_std: self.noise_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDropRow {
    pub fmr: f64,
    pub mode: IntervalMode,
    pub ave_mps: f64,
    pub seed: u64,
}

/// Mean velocity error (m/s) per FMR and interval mode for one seed.
///
/// The same seed drives the scene and the drop pattern, so drops at a lower
/// rate are a subset of those at a higher one.
pub fn run_frame_drop_experiment(config: &FrameDropConfig, seed: u64) -> Result<Vec<FrameDropRow>> {
    config.validate()?;
    let scene = config.scene(seed);
    let stream = simulate(&scene)?;
    let geometry = scene.geometry()?;
    let c = scene.channels;
    let (v_mem, v_cur) = displacement_kernels(c, 3);
    let pipeline = TemporalFusion {
        fuser: RecurrentFuser::new(v_mem, v_cur)?,
        embedder: TemporalEmbedder::seeded(config.embed_channels, config.embed_hidden, seed)?,
    };
    let readout = VelocityReadout {
        feature_channels: c,
        window_radius: config.window_radius,
        nominal_interval: scene.nominal_interval,
        decoder: IntervalDecoder::calibrate(
            &pipeline.embedder,
            geometry,
            0,
            &CALIBRATION_INTERVALS,
        )?,
    };
    let modes = [IntervalMode::Fixed, IntervalMode::Embedded];

    let mut rows = Vec::with_capacity(config.fmr_grid.len() * modes.len());
    for &fmr in &config.fmr_grid {
        let kept = drop_frames(&stream, fmr, seed)?;
        let mut state = pipeline.new_state(geometry);
        let mut err_sum = [0.0f64; 2];
        let mut count = 0usize;
        for (i, frame) in kept.iter().enumerate() {
            let memory = pipeline.step(&mut state, frame)?;
            if i == 0 {
                continue;
            }
            let tick = frame.frame_index as usize;
            let pose = frame.ego_pose;
            let queries: Vec<ObjectCell> = scene
                .objects
                .iter()
                .map(|o| {
                    let (x, y) = scene.object_in_ego(o, tick);
                    let (col, row) = geometry.metric_to_cell(x, y);
                    ObjectCell {
                        channel: o.channel,
                        col,
                        row,
                    }
                })
                .collect();
            for (m, mode) in modes.iter().enumerate() {
                let est = readout.read(&memory, &state.embedding, &queries, *mode)?;
                for (o, v) in scene.objects.iter().zip(&est) {
                    let truth = pose.inverse().rotate_vector(o.velocity[0], o.velocity[1]);
                    err_sum[m] += (v[0] - truth.0).hypot(v[1] - truth.1);
                }
            }
            count += scene.objects.len();
        }
        for (m, mode) in modes.iter().enumerate() {
            rows.push(FrameDropRow {
                fmr,
                mode: *mode,
                ave_mps: if count > 0 {
                    err_sum[m] / count as f64
                } else {
                    0.0
                },
                seed,
            });
        }
    }
    Ok(rows)
}
