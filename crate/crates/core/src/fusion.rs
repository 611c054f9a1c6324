//! Temporal fusion of BEV grids.
//!
//! Two styles share the same warp-concat-convolve building block:
//!
//! * parallel (sliding window): keep the last `k` frames, warp them into the
//!   newest ego frame, stack them along channels and convolve with one kernel
//!   `U` of `k * C` input channels;
//! * recurrent: keep a single memory grid `M` and update it per frame as
//!   `M_i = warp(M_{i-1}) * V_mem + B_i * V_cur`.
//!
//! Unrolling the recurrence gives `M_i = sum_j warp(B_j, P_ij) * V_cur * V_mem^(i-j)`,
//! which [`unrolled_oracle`] evaluates directly from the poses. For streams
//! whose relative transforms are integer cell shifts the two agree on the
//! interior returned by [`oracle_margins`]; fractional or rotated warps do not
//! commute with convolution, so only a residual can be reported there.

use std::collections::VecDeque;
use std::io::{Read, Write};

use crate::error::{BevError, Result};
use crate::geometry::{relative_transform, GridGeometry, Pose2};
use crate::grid::{
    channel_concat_all, conv2d, conv2d_accumulate, conv2d_repeat, expect_magic, grid_sample,
    kernel_concat, read_f64, read_u32, read_u64, Activation, ConvKernel, FeatureGrid, Margins,
};

pub const STREAM_MAGIC: &[u8; 4] = b"BEVS";
pub const STREAM_VERSION: u32 = 1;
pub const STATE_MAGIC: &[u8; 4] = b"BEVM";

/// One element of a sensor stream.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub grid: FeatureGrid,
    /// Seconds.
    pub timestamp: f64,
    pub ego_pose: Pose2,
    pub frame_index: u64,
}

impl FrameInput {
    pub fn new(grid: FeatureGrid, timestamp: f64, ego_pose: Pose2, frame_index: u64) -> Self {
        Self {
            grid,
            timestamp,
            ego_pose,
            frame_index,
        }
    }
}

/// Checks strictly increasing timestamps and a common grid layout.
pub fn validate_stream(frames: &[FrameInput]) -> Result<()> {
    let Some(first) = frames.first() else {
        return Err(BevError::EmptyStream);
    };
    for pair in frames.windows(2) {
        if !(pair[1].timestamp > pair[0].timestamp) {
            return Err(BevError::StreamOrder {
                previous: pair[0].timestamp,
                current: pair[1].timestamp,
            });
        }
        if !pair[1].grid.same_layout(&first.grid) {
            return Err(BevError::Shape(format!(
                "frame {} layout differs from the stream's first frame",
                pair[1].frame_index
            )));
        }
    }
    Ok(())
}

/// Recurrent memory carried between frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionState {
    pub memory: FeatureGrid,
    /// Recurrent interval embedding; maintained by `temporal`, carried here.
    pub embedding: FeatureGrid,
    pub last_pose: Pose2,
    pub last_timestamp: Option<f64>,
    pub frames_seen: u64,
}

impl FusionState {
    pub fn new(geometry: GridGeometry, memory_channels: usize, embed_channels: usize) -> Self {
        Self {
            memory: FeatureGrid::zeros(geometry, memory_channels),
            embedding: FeatureGrid::zeros(geometry, embed_channels),
            last_pose: Pose2::identity(),
            last_timestamp: None,
            frames_seen: 0,
        }
    }

    pub fn geometry(&self) -> &GridGeometry {
        self.memory.geometry()
    }

    pub fn reset(&mut self) {
        self.memory.fill(0.0);
        self.embedding.fill(0.0);
        self.last_pose = Pose2::identity();
        self.last_timestamp = None;
        self.frames_seen = 0;
    }

    /// Bytes of feature data retained between frames (memory plus embedding).
    pub fn retained_bytes(&self) -> usize {
        self.memory.payload_bytes() + self.embedding.payload_bytes()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(STATE_MAGIC)?;
        self.memory.write_to(&mut w)?;
        self.embedding.write_to(&mut w)?;
        for v in [self.last_pose.x, self.last_pose.y, self.last_pose.yaw] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&[u8::from(self.last_timestamp.is_some())])?;
        w.write_all(&self.last_timestamp.unwrap_or(0.0).to_le_bytes())?;
        w.write_all(&self.frames_seen.to_le_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        expect_magic(&mut r, STATE_MAGIC)?;
        let memory = FeatureGrid::read_from(&mut r)?;
        let embedding = FeatureGrid::read_from(&mut r)?;
        let (x, y, yaw) = (read_f64(&mut r)?, read_f64(&mut r)?, read_f64(&mut r)?);
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let ts = read_f64(&mut r)?;
        let frames_seen = read_u64(&mut r)?;
        Ok(Self {
            memory,
            embedding,
            last_pose: Pose2::new(x, y, yaw),
            last_timestamp: (flag[0] != 0).then_some(ts),
            frames_seen,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }
}

/// Returns a zeroed copy of `state` with the same layout.
pub fn reset(state: &FusionState) -> FusionState {
    let mut fresh = state.clone();
    fresh.reset();
    fresh
}

/// The two kernel chunks of the recurrent update.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentFuser {
    v_mem: ConvKernel,
    v_cur: ConvKernel,
    activation: Activation,
}

impl RecurrentFuser {
    pub fn new(v_mem: ConvKernel, v_cur: ConvKernel) -> Result<Self> {
        if v_mem.in_channels() != v_mem.out_channels() {
            return Err(BevError::Shape(format!(
                "V_mem must map memory to memory, got {} -> {}",
                v_mem.in_channels(),
                v_mem.out_channels()
            )));
        }
        if v_cur.out_channels() != v_mem.out_channels() {
            return Err(BevError::Shape(format!(
                "V_cur writes {} channels but memory has {}",
                v_cur.out_channels(),
                v_mem.out_channels()
            )));
        }
        Ok(Self {
            v_mem,
            v_cur,
            activation: Activation::Identity,
        })
    }

    /// Splits a joint kernel `V` over `[memory; frame]` input channels.
    pub fn from_joint(v: &ConvKernel) -> Result<Self> {
        let mem = v.out_channels();
        if v.in_channels() <= mem {
            return Err(BevError::Shape(format!(
                "joint kernel has {} inputs, needs more than the {mem} memory channels",
                v.in_channels()
            )));
        }
        let taps = v.kernel_h() * v.kernel_w();
        let cur = v.in_channels() - mem;
        let mut v_mem = ConvKernel::zeros(mem, mem, v.kernel_h(), v.kernel_w());
        let mut v_cur = ConvKernel::zeros(mem, cur, v.kernel_h(), v.kernel_w());
        for (o, row) in v.weights().chunks(v.in_channels() * taps).enumerate() {
            v_mem.weights_mut()[o * mem * taps..(o + 1) * mem * taps]
                .copy_from_slice(&row[..mem * taps]);
            v_cur.weights_mut()[o * cur * taps..(o + 1) * cur * taps]
                .copy_from_slice(&row[mem * taps..]);
        }
        Self::new(v_mem, v_cur)
    }

    /// Pointwise nonlinearity after the update. Breaks the unrolled identity.
    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn v_mem(&self) -> &ConvKernel {
        &self.v_mem
    }

    pub fn v_mem_mut(&mut self) -> &mut ConvKernel {
        &mut self.v_mem
    }

    pub fn v_cur(&self) -> &ConvKernel {
        &self.v_cur
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn joint_kernel(&self) -> Result<ConvKernel> {
        kernel_concat(&[self.v_mem.clone(), self.v_cur.clone()])
    }

    pub fn memory_channels(&self) -> usize {
        self.v_mem.out_channels()
    }

    pub fn frame_channels(&self) -> usize {
        self.v_cur.in_channels()
    }

    pub fn param_count(&self) -> usize {
        self.v_mem.param_count() + self.v_cur.param_count()
    }

    pub fn new_state(&self, geometry: GridGeometry, embed_channels: usize) -> FusionState {
        FusionState::new(geometry, self.memory_channels(), embed_channels)
    }

    /// Advances `state` by one frame in place and returns the fused grid (the new memory).
    pub fn step(&self, state: &mut FusionState, frame: &FrameInput) -> Result<FeatureGrid> {
        if let Some(prev) = state.last_timestamp {
            if !(frame.timestamp > prev) {
                return Err(BevError::StreamOrder {
                    previous: prev,
                    current: frame.timestamp,
                });
            }
        }
        if frame.grid.channels() != self.v_cur.in_channels() {
            return Err(BevError::Shape(format!(
                "frame has {} channels, V_cur expects {}",
                frame.grid.channels(),
                self.v_cur.in_channels()
            )));
        }
        if state.memory.channels() != self.v_mem.in_channels() {
            return Err(BevError::Shape(format!(
                "memory has {} channels, V_mem expects {}",
                state.memory.channels(),
                self.v_mem.in_channels()
            )));
        }
        if frame.grid.geometry() != state.memory.geometry() {
            return Err(BevError::Shape(
                "frame geometry differs from memory geometry".into(),
            ));
        }

        let mut fused = conv2d(&frame.grid, &self.v_cur)?;
        // Zero memory contributes nothing; skipping it keeps the first step bit-identical to B * V_cur.
        if state.frames_seen > 0 {
            let t = relative_transform(&frame.ego_pose, &state.last_pose, state.memory.geometry())?;
            let aligned = grid_sample(&state.memory, &t);
            conv2d_accumulate(&aligned, &self.v_mem, &mut fused)?;
        }
        self.activation.apply(&mut fused);

        state.memory.clone_from(&fused);
        state.last_pose = frame.ego_pose;
        state.last_timestamp = Some(frame.timestamp);
        state.frames_seen += 1;
        Ok(fused)
    }
}

/// Functional form of [`RecurrentFuser::step`].
pub fn recurrent_step(
    state: &FusionState,
    frame: &FrameInput,
    v_mem: &ConvKernel,
    v_cur: &ConvKernel,
) -> Result<(FusionState, FeatureGrid)> {
    let fuser = RecurrentFuser::new(v_mem.clone(), v_cur.clone())?;
    let mut next = state.clone();
    let fused = fuser.step(&mut next, frame)?;
    Ok((next, fused))
}

/// Runs a fresh recurrent stream over `frames` and returns the final memory.
pub fn run_recurrent(fuser: &RecurrentFuser, frames: &[FrameInput]) -> Result<FeatureGrid> {
    let first = frames.first().ok_or(BevError::EmptyStream)?;
    let mut state = fuser.new_state(*first.grid.geometry(), 0);
    let mut last = None;
    for f in frames {
        last = Some(fuser.step(&mut state, f)?);
    }
    Ok(last.expect("non-empty stream"))
}

fn window(history: &[FrameInput], k: usize) -> Result<&[FrameInput]> {
    if k == 0 || history.len() < k {
        return Err(BevError::InsufficientHistory {
            window: k,
            available: history.len(),
        });
    }
    Ok(&history[history.len() - k..])
}

/// Warps every frame of the window into the newest frame's grid; the newest is passed through.
fn aligned_window(frames: &[FrameInput]) -> Result<Vec<FeatureGrid>> {
    let newest = frames.last().expect("non-empty window");
    let geometry = *newest.grid.geometry();
    let (older, _) = frames.split_at(frames.len() - 1);
    let mut out = Vec::with_capacity(frames.len());
    for f in older {
        if !f.grid.same_layout(&newest.grid) {
            return Err(BevError::Shape(format!(
                "frame {} layout differs from the newest frame",
                f.frame_index
            )));
        }
        let t = relative_transform(&newest.ego_pose, &f.ego_pose, &geometry)?;
        out.push(grid_sample(&f.grid, &t));
    }
    out.push(newest.grid.clone());
    Ok(out)
}

/// Sliding-window fusion: `[warp(B_{i-k+1}); ...; warp(B_{i-1}); B_i] * U`.
pub fn parallel_fuse(history: &[FrameInput], k: usize, u: &ConvKernel) -> Result<FeatureGrid> {
    let frames = window(history, k)?;
    let per_frame = frames[0].grid.channels();
    if u.in_channels() != k * per_frame {
        return Err(BevError::Shape(format!(
            "U has {} input channels, window needs {} x {per_frame}",
            u.in_channels(),
            k
        )));
    }
    let aligned = aligned_window(frames)?;
    let refs: Vec<&FeatureGrid> = aligned.iter().collect();
    conv2d(&channel_concat_all(&refs)?, u)
}

/// Split form of [`parallel_fuse`]: `sum_j warp(B_{i-k+j}) * U_j`.
pub fn parallel_fuse_split(
    history: &[FrameInput],
    k: usize,
    chunks: &[ConvKernel],
) -> Result<FeatureGrid> {
    let frames = window(history, k)?;
    if chunks.len() != k {
        return Err(BevError::Shape(format!(
            "{} kernel chunks for a window of {k}",
            chunks.len()
        )));
    }
    let out_channels = chunks[0].out_channels();
    let aligned = aligned_window(frames)?;
    let mut acc = FeatureGrid::zeros(*frames[0].grid.geometry(), out_channels);
    for (grid, chunk) in aligned.iter().zip(chunks) {
        conv2d_accumulate(grid, chunk, &mut acc)?;
    }
    Ok(acc)
}

/// Streaming sliding-window fuser retaining exactly `k` frames.
#[derive(Debug, Clone)]
pub struct ParallelFuser {
    u: ConvKernel,
    k: usize,
    window: VecDeque<FrameInput>,
}

impl ParallelFuser {
    pub fn new(u: ConvKernel, k: usize) -> Result<Self> {
        if k == 0 || !u.in_channels().is_multiple_of(k) {
            return Err(BevError::Shape(format!(
                "U with {} input channels cannot serve a window of {k}",
                u.in_channels()
            )));
        }
        Ok(Self {
            u,
            k,
            window: VecDeque::with_capacity(k),
        })
    }

    pub fn window_len(&self) -> usize {
        self.k
    }

    pub fn param_count(&self) -> usize {
        self.u.param_count()
    }

    pub fn kernel(&self) -> &ConvKernel {
        &self.u
    }

    /// Appends a frame, evicting the oldest when the window is full. No fusion.
    pub fn push(&mut self, frame: FrameInput) -> Result<()> {
        if let Some(last) = self.window.back() {
            if !(frame.timestamp > last.timestamp) {
                return Err(BevError::StreamOrder {
                    previous: last.timestamp,
                    current: frame.timestamp,
                });
            }
        }
        if self.window.len() == self.k {
            self.window.pop_front();
        }
        self.window.push_back(frame);
        Ok(())
    }

    /// Fuses the current window; `None` until `k` frames have arrived.
    pub fn fuse(&mut self) -> Result<Option<FeatureGrid>> {
        if self.window.len() < self.k {
            return Ok(None);
        }
        let frames = self.window.make_contiguous();
        parallel_fuse(frames, self.k, &self.u).map(Some)
    }

    /// `push` then `fuse`.
    pub fn step(&mut self, frame: FrameInput) -> Result<Option<FeatureGrid>> {
        self.push(frame)?;
        self.fuse()
    }

    pub fn reset(&mut self) {
        self.window.clear();
    }

    /// Bytes of feature data held in the window.
    pub fn retained_bytes(&self) -> usize {
        self.window.iter().map(|f| f.grid.payload_bytes()).sum()
    }
}

/// Closed-form unroll of the recurrence:
/// `sum_{j=1..i} warp(B_j, P_ij) * V_cur * V_mem^(i-j)`, with every `P_ij`
/// built directly from the pose pair rather than by chaining per-step warps.
pub fn unrolled_oracle(
    frames: &[FrameInput],
    v_mem: &ConvKernel,
    v_cur: &ConvKernel,
) -> Result<FeatureGrid> {
    let newest = frames.last().ok_or(BevError::EmptyStream)?;
    let geometry = *newest.grid.geometry();
    let n = frames.len();
    let mut acc = FeatureGrid::zeros(geometry, v_cur.out_channels());
    for (j, frame) in frames.iter().enumerate() {
        let t = relative_transform(&newest.ego_pose, &frame.ego_pose, &geometry)?;
        let aligned = grid_sample(&frame.grid, &t);
        let term = conv2d_repeat(&conv2d(&aligned, v_cur)?, v_mem, n - 1 - j)?;
        acc.add_assign(&term)?;
    }
    Ok(acc)
}

/// Border cells on which chained recurrent steps and [`unrolled_oracle`]
/// agree exactly, for a stream whose relative transforms are integer shifts.
///
/// Frame `m`'s contribution to the newest memory reaches cell `x` from
/// `x + S_m ± r (n - m + 1)`, where `S_m` is the shift from the newest grid to
/// frame `m`'s grid; every such box must stay inside the grid in both
/// coordinate frames. This is never wider than `n * (r + max per-step shift)`.
/// Returns `None` if any transform is not an integer shift.
pub fn oracle_margins(frames: &[FrameInput], radius: usize) -> Result<Option<Margins>> {
    let newest = frames.last().ok_or(BevError::EmptyStream)?;
    let geometry = *newest.grid.geometry();
    let n = frames.len();
    let mut margins = Margins::default();
    for (m, frame) in frames.iter().enumerate() {
        let t = relative_transform(&newest.ego_pose, &frame.ego_pose, &geometry)?;
        let Some((dc, dr)) = t.integer_shift() else {
            return Ok(None);
        };
        let reach = radius * (n - m);
        margins.left = margins.left.max(reach + (-dc).max(0) as usize);
        margins.right = margins.right.max(reach + dc.max(0) as usize);
        margins.top = margins.top.max(reach + (-dr).max(0) as usize);
        margins.bottom = margins.bottom.max(reach + dr.max(0) as usize);
    }
    Ok(Some(margins))
}

/// Writes a replay file: magic `BEVS`, u32 version, u64 record count, then per
/// record a `BEVG` grid blob, f64 timestamp, f64 x, y, yaw and u64 frame index.
/// All integers and floats little-endian.
pub fn write_stream<W: Write>(mut w: W, frames: &[FrameInput]) -> Result<()> {
    w.write_all(STREAM_MAGIC)?;
    w.write_all(&STREAM_VERSION.to_le_bytes())?;
    w.write_all(&(frames.len() as u64).to_le_bytes())?;
    for f in frames {
        f.grid.write_to(&mut w)?;
        for v in [f.timestamp, f.ego_pose.x, f.ego_pose.y, f.ego_pose.yaw] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&f.frame_index.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_stream<R: Read>(mut r: R) -> Result<Vec<FrameInput>> {
    expect_magic(&mut r, STREAM_MAGIC)?;
    let version = read_u32(&mut r)?;
    if version != STREAM_VERSION {
        return Err(BevError::Format(format!(
            "unsupported stream version {version}"
        )));
    }
    let count = read_u64(&mut r)?;
    let mut frames = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let grid = FeatureGrid::read_from(&mut r)?;
        let timestamp = read_f64(&mut r)?;
        let (x, y, yaw) = (read_f64(&mut r)?, read_f64(&mut r)?, read_f64(&mut r)?);
        let frame_index = read_u64(&mut r)?;
        frames.push(FrameInput::new(
            grid,
            timestamp,
            Pose2::new(x, y, yaw),
            frame_index,
        ));
    }
    Ok(frames)
}
