//! Reference implementations written for clarity, not speed. They share no
//! code with the library's convolution or sampling paths.
#![allow(dead_code)]

use bevstream::fusion::FrameInput;
use bevstream::geometry::{GridGeometry, GridTransform, Pose2};
use bevstream::grid::{ConvKernel, FeatureGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Zero-padded stride-1 correlation, one output cell at a time.
pub fn naive_conv(input: &FeatureGrid, kernel: &ConvKernel) -> FeatureGrid {
    let (h, w) = (input.height() as isize, input.width() as isize);
    let (ry, rx) = (
        (kernel.kernel_h() / 2) as isize,
        (kernel.kernel_w() / 2) as isize,
    );
    let mut out = FeatureGrid::zeros(*input.geometry(), kernel.out_channels());
    for o in 0..kernel.out_channels() {
        for row in 0..h {
            for col in 0..w {
                let mut acc = 0.0;
                for i in 0..kernel.in_channels() {
                    for ky in 0..kernel.kernel_h() {
                        for kx in 0..kernel.kernel_w() {
                            let (sr, sc) = (row + ky as isize - ry, col + kx as isize - rx);
                            if sr >= 0 && sr < h && sc >= 0 && sc < w {
                                acc += kernel.get(o, i, ky, kx)
                                    * input.get(i, sr as usize, sc as usize);
                            }
                        }
                    }
                }
                out.set(o, row as usize, col as usize, acc);
            }
        }
    }
    out
}

pub fn naive_conv_repeat(input: &FeatureGrid, kernel: &ConvKernel, times: usize) -> FeatureGrid {
    (0..times).fold(input.clone(), |g, _| naive_conv(&g, kernel))
}

/// `out[row][col] = src[row + dr][col + dc]`, zero outside.
pub fn index_shift(src: &FeatureGrid, dc: i64, dr: i64) -> FeatureGrid {
    let mut out = FeatureGrid::zeros(*src.geometry(), src.channels());
    let (h, w) = (src.height() as i64, src.width() as i64);
    for c in 0..src.channels() {
        for row in 0..h {
            for col in 0..w {
                let (sr, sc) = (row + dr, col + dc);
                if sr >= 0 && sr < h && sc >= 0 && sc < w {
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

/// Bilinear read of one channel at a fractional `(col, row)`; zero outside.
pub fn bilinear_at(src: &FeatureGrid, c: usize, col: f64, row: f64) -> f64 {
    let (c0, r0) = (col.floor(), row.floor());
    let (fc, fr) = (col - c0, row - r0);
    let mut acc = 0.0;
    for (dc, dr, wgt) in [
        (0.0, 0.0, (1.0 - fc) * (1.0 - fr)),
        (1.0, 0.0, fc * (1.0 - fr)),
        (0.0, 1.0, (1.0 - fc) * fr),
        (1.0, 1.0, fc * fr),
    ] {
        let (cc, rr) = (c0 + dc, r0 + dr);
        if cc >= 0.0 && rr >= 0.0 && cc < src.width() as f64 && rr < src.height() as f64 {
            acc += wgt * src.get(c, rr as usize, cc as usize);
        }
    }
    acc
}

pub fn naive_sample(src: &FeatureGrid, t: &GridTransform) -> FeatureGrid {
    let mut out = FeatureGrid::zeros(*src.geometry(), src.channels());
    for c in 0..src.channels() {
        for row in 0..src.height() {
            for col in 0..src.width() {
                let (sc, sr) = t.apply(col as f64, row as f64);
                out.set(c, row, col, bilinear_at(src, c, sc, sr));
            }
        }
    }
    out
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Kernel whose absolute row sums stay below `row_sum`.
pub fn bounded_kernel(
    rng: &mut ChaCha8Rng,
    out: usize,
    inp: usize,
    size: usize,
    row_sum: f64,
) -> ConvKernel {
    ConvKernel::random(
        out,
        inp,
        size,
        size,
        row_sum / (inp * size * size) as f64,
        rng,
    )
}

/// Random grids with the ego stepping by whole cells; returns the frames
/// and each frame's cumulative `(col, row)` cell offset.
pub fn integer_stream(
    rng: &mut ChaCha8Rng,
    geometry: GridGeometry,
    channels: usize,
    len: usize,
    max_step: i64,
) -> (Vec<FrameInput>, Vec<(i64, i64)>) {
    let (mut col, mut row) = (0i64, 0i64);
    let mut offsets = Vec::with_capacity(len);
    let frames = (0..len)
        .map(|i| {
            if i > 0 {
                col += rng.random_range(-max_step..=max_step);
                row += rng.random_range(-max_step..=max_step);
            }
            offsets.push((col, row));
            let pose = Pose2::new(
                col as f64 * geometry.resolution,
                row as f64 * geometry.resolution,
                0.0,
            );
            FrameInput::new(
                FeatureGrid::random(geometry, channels, 1.0, rng),
                i as f64 * 0.5,
                pose,
                i as u64,
            )
        })
        .collect();
    (frames, offsets)
}

pub fn static_stream(
    rng: &mut ChaCha8Rng,
    geometry: GridGeometry,
    channels: usize,
    len: usize,
) -> Vec<FrameInput> {
    (0..len)
        .map(|i| {
            FrameInput::new(
                FeatureGrid::random(geometry, channels, 1.0, rng),
                i as f64 * 0.5,
                Pose2::identity(),
                i as u64,
            )
        })
        .collect()
}

pub fn pose_close(a: &Pose2, b: &Pose2, tol: f64) -> bool {
    let dyaw = bevstream::geometry::normalize_angle(a.yaw - b.yaw).abs();
    (a.x - b.x).abs() <= tol && (a.y - b.y).abs() <= tol && dyaw <= tol
}
