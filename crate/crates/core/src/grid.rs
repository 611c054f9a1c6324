//! Dense channel-major feature grids, convolution kernels and the two
//! numerical primitives everything else is built from: zero-padded
//! correlation and bilinear resampling.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BevError, Result};
use crate::geometry::{GridGeometry, GridTransform, INTEGER_SNAP_TOLERANCE};

pub const GRID_MAGIC: &[u8; 4] = b"BEVG";
pub const KERNEL_MAGIC: &[u8; 4] = b"BEVK";

/// Pointwise nonlinearity. Fusion algebra only holds for `Identity`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn eval(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }

    pub fn apply(self, grid: &mut FeatureGrid) {
        if self != Activation::Identity {
            grid.data.iter_mut().for_each(|v| *v = self.eval(*v));
        }
    }
}

/// Cells excluded on each side when comparing grids away from the borders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Margins {
    pub left: usize,
    pub right: usize,
    pub top: usize,
    pub bottom: usize,
}

impl Margins {
    pub const fn uniform(m: usize) -> Self {
        Self {
            left: m,
            right: m,
            top: m,
            bottom: m,
        }
    }

    /// Column and row ranges left over on a grid, empty when the margins swallow it.
    pub fn interior(
        &self,
        geometry: &GridGeometry,
    ) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let c0 = self.left.min(geometry.width);
        let c1 = geometry.width.saturating_sub(self.right).max(c0);
        let r0 = self.top.min(geometry.height);
        let r1 = geometry.height.saturating_sub(self.bottom).max(r0);
        (c0..c1, r0..r1)
    }

    pub fn interior_cells(&self, geometry: &GridGeometry) -> usize {
        let (cols, rows) = self.interior(geometry);
        cols.len() * rows.len()
    }
}

/// Dense `C x H x W` feature map in channel-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    channels: usize,
    geometry: GridGeometry,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(geometry: GridGeometry, channels: usize) -> Self {
        Self {
            channels,
            geometry,
            data: vec![0.0; channels * geometry.cells()],
        }
    }

    pub fn from_vec(geometry: GridGeometry, channels: usize, data: Vec<f64>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != channels * geometry.cells() {
            return Err(BevError::Shape(format!(
                "expected {} values for {}x{}x{}, got {}",
                channels * geometry.cells(),
                channels,
                geometry.height,
                geometry.width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(BevError::NonFinite("feature grid"));
        }
        Ok(Self {
            channels,
            geometry,
            data,
        })
    }

    /// Uniform random values in `[-scale, scale)`.
    pub fn random<R: Rng + ?Sized>(
        geometry: GridGeometry,
        channels: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let data = (0..channels * geometry.cells())
            .map(|_| rng.random_range(-1.0..1.0) * scale)
            .collect();
        Self {
            channels,
            geometry,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn height(&self) -> usize {
        self.geometry.height
    }

    pub fn width(&self) -> usize {
        self.geometry.width
    }

    pub fn resolution(&self) -> f64 {
        self.geometry.resolution
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Bytes held by the dense payload.
    pub fn payload_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f64>()
    }

    #[inline]
    fn index(&self, c: usize, row: usize, col: usize) -> usize {
        (c * self.geometry.height + row) * self.geometry.width + col
    }

    #[inline]
    pub fn get(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[self.index(c, row, col)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, row: usize, col: usize, v: f64) {
        let i = self.index(c, row, col);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.geometry.cells();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.geometry.cells();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_layout(&self, other: &FeatureGrid) -> bool {
        self.channels == other.channels && self.geometry == other.geometry
    }

    fn check_layout(&self, other: &FeatureGrid, what: &str) -> Result<()> {
        if !self.same_layout(other) {
            return Err(BevError::Shape(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.channels,
                self.height(),
                self.width(),
                other.channels,
                other.height(),
                other.width()
            )));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &FeatureGrid) -> Result<()> {
        self.check_layout(other, "add")?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &FeatureGrid) -> Result<f64> {
        self.interior_max_abs_diff(other, Margins::default())
    }

    /// Largest elementwise difference over the cells left after removing `margins`.
    pub fn interior_max_abs_diff(&self, other: &FeatureGrid, margins: Margins) -> Result<f64> {
        self.check_layout(other, "compare")?;
        let (cols, rows) = margins.interior(&self.geometry);
        let mut worst = 0.0f64;
        for c in 0..self.channels {
            for row in rows.clone() {
                for col in cols.clone() {
                    worst = worst.max((self.get(c, row, col) - other.get(c, row, col)).abs());
                }
            }
        }
        Ok(worst)
    }

    /// Mean of one channel over the interior cells.
    pub fn interior_mean(&self, channel: usize, margins: Margins) -> f64 {
        let (cols, rows) = margins.interior(&self.geometry);
        let n = cols.len() * rows.len();
        if n == 0 {
            return 0.0;
        }
        let mut sum = 0.0;
        for row in rows {
            for col in cols.clone() {
                sum += self.get(channel, row, col);
            }
        }
        sum / n as f64
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &FeatureGrid) -> bool {
        self.same_layout(other)
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(GRID_MAGIC)?;
        for dim in [self.channels, self.height(), self.width()] {
            w.write_all(&dim_to_u32(dim)?.to_le_bytes())?;
        }
        w.write_all(&self.resolution().to_le_bytes())?;
        write_f64s(&mut w, &self.data)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        expect_magic(&mut r, GRID_MAGIC)?;
        let channels = read_u32(&mut r)? as usize;
        let height = read_u32(&mut r)? as usize;
        let width = read_u32(&mut r)? as usize;
        let resolution = read_f64(&mut r)?;
        let geometry = GridGeometry::new(height, width, resolution)?;
        let data = read_f64s(&mut r, channels * height * width)?;
        Self::from_vec(geometry, channels, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.encoded_len());
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn encoded_len(&self) -> usize {
        4 + 3 * 4 + 8 + self.payload_bytes()
    }

    /// Exports one channel as `row,col,value` records.
    pub fn write_channel_csv<W: Write>(&self, channel: usize, w: W) -> Result<()> {
        if channel >= self.channels {
            return Err(BevError::Shape(format!(
                "channel {channel} out of range for {} channels",
                self.channels
            )));
        }
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["row", "col", "value"])?;
        for row in 0..self.height() {
            for col in 0..self.width() {
                out.write_record(&[
                    row.to_string(),
                    col.to_string(),
                    self.get(channel, row, col).to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Convolution weights laid out `[out][in][kh][kw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    out_channels: usize,
    in_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    weights: Vec<f64>,
}

impl ConvKernel {
    pub fn zeros(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
    ) -> Self {
        Self {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            weights: vec![0.0; out_channels * in_channels * kernel_h * kernel_w],
        }
    }

    pub fn from_vec(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if weights.len() != out_channels * in_channels * kernel_h * kernel_w {
            return Err(BevError::Shape(format!(
                "kernel {out_channels}x{in_channels}x{kernel_h}x{kernel_w} needs {} weights, got {}",
                out_channels * in_channels * kernel_h * kernel_w,
                weights.len()
            )));
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(BevError::NonFinite("kernel"));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            weights,
        })
    }

    /// Channel identity with the unit weight on the center tap, scaled by `gain`.
    pub fn identity(channels: usize, size: usize, gain: f64) -> Self {
        let mut k = Self::zeros(channels, channels, size, size);
        let (r, c) = (size / 2, size / 2);
        for ch in 0..channels {
            k.set(ch, ch, r, c, gain);
        }
        k
    }

    /// Uniform random weights in `[-scale, scale)`.
    pub fn random<R: Rng + ?Sized>(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let weights = (0..out_channels * in_channels * kernel_h * kernel_w)
            .map(|_| rng.random_range(-1.0..1.0) * scale)
            .collect();
        Self {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            weights,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel_h(&self) -> usize {
        self.kernel_h
    }

    pub fn kernel_w(&self) -> usize {
        self.kernel_w
    }

    /// Larger of the two half-extents.
    pub fn radius(&self) -> usize {
        (self.kernel_h / 2).max(self.kernel_w / 2)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn param_count(&self) -> usize {
        self.weights.len()
    }

    #[inline]
    fn index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * self.kernel_h + ky) * self.kernel_w + kx
    }

    #[inline]
    pub fn get(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weights[self.index(o, i, ky, kx)]
    }

    #[inline]
    pub fn set(&mut self, o: usize, i: usize, ky: usize, kx: usize, v: f64) {
        let idx = self.index(o, i, ky, kx);
        self.weights[idx] = v;
    }

    pub fn scale(&mut self, factor: f64) {
        self.weights.iter_mut().for_each(|w| *w *= factor);
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|w| *w == 0.0)
    }

    /// Induced bound on the operator norm: max over output channels of summed `|w|`.
    pub fn abs_row_sum(&self) -> f64 {
        let per_out = self.in_channels * self.kernel_h * self.kernel_w;
        self.weights
            .chunks(per_out.max(1))
            .map(|row| row.iter().map(|w| w.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(KERNEL_MAGIC)?;
        for dim in [
            self.out_channels,
            self.in_channels,
            self.kernel_h,
            self.kernel_w,
        ] {
            w.write_all(&dim_to_u32(dim)?.to_le_bytes())?;
        }
        write_f64s(&mut w, &self.weights)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        expect_magic(&mut r, KERNEL_MAGIC)?;
        let out = read_u32(&mut r)? as usize;
        let inp = read_u32(&mut r)? as usize;
        let kh = read_u32(&mut r)? as usize;
        let kw = read_u32(&mut r)? as usize;
        let weights = read_f64s(&mut r, out * inp * kh * kw)?;
        Self::from_vec(out, inp, kh, kw, weights)
    }
}

/// Splits a kernel along its input channels into `n` equal chunks.
pub fn channel_split(kernel: &ConvKernel, n: usize) -> Result<Vec<ConvKernel>> {
    if n == 0 || !kernel.in_channels.is_multiple_of(n) {
        return Err(BevError::Shape(format!(
            "cannot split {} input channels into {n} equal chunks",
            kernel.in_channels
        )));
    }
    let per = kernel.in_channels / n;
    Ok((0..n)
        .map(|j| {
            let mut chunk =
                ConvKernel::zeros(kernel.out_channels, per, kernel.kernel_h, kernel.kernel_w);
            let taps = kernel.kernel_h * kernel.kernel_w;
            for o in 0..kernel.out_channels {
                let src = kernel.index(o, j * per, 0, 0);
                let dst = chunk.index(o, 0, 0, 0);
                chunk.weights[dst..dst + per * taps]
                    .copy_from_slice(&kernel.weights[src..src + per * taps]);
            }
            chunk
        })
        .collect())
}

/// Stacks kernels along their input channels (inverse of [`channel_split`]).
pub fn kernel_concat(chunks: &[ConvKernel]) -> Result<ConvKernel> {
    let first = chunks
        .first()
        .ok_or_else(|| BevError::Shape("no kernels to concatenate".into()))?;
    if chunks.iter().any(|k| {
        k.out_channels != first.out_channels
            || k.kernel_h != first.kernel_h
            || k.kernel_w != first.kernel_w
    }) {
        return Err(BevError::Shape(
            "kernel chunks disagree on out channels or size".into(),
        ));
    }
    let in_total: usize = chunks.iter().map(|k| k.in_channels).sum();
    let taps = first.kernel_h * first.kernel_w;
    let mut weights = Vec::with_capacity(first.out_channels * in_total * taps);
    for o in 0..first.out_channels {
        for k in chunks {
            let start = k.index(o, 0, 0, 0);
            weights.extend_from_slice(&k.weights[start..start + k.in_channels * taps]);
        }
    }
    ConvKernel::from_vec(
        first.out_channels,
        in_total,
        first.kernel_h,
        first.kernel_w,
        weights,
    )
}

/// Output rows processed together; keeps the accumulator tile cache resident.
const ROW_BLOCK: usize = 8;

/// Zero-padded, stride-1 correlation ("same" output size).
pub fn conv2d(input: &FeatureGrid, kernel: &ConvKernel) -> Result<FeatureGrid> {
    let mut out = FeatureGrid::zeros(input.geometry, kernel.out_channels);
    conv2d_accumulate(input, kernel, &mut out)?;
    Ok(out)
}

/// `out += conv2d(input, kernel)`.
pub fn conv2d_accumulate(
    input: &FeatureGrid,
    kernel: &ConvKernel,
    out: &mut FeatureGrid,
) -> Result<()> {
    if input.channels != kernel.in_channels {
        return Err(BevError::Shape(format!(
            "conv2d: input has {} channels, kernel expects {}",
            input.channels, kernel.in_channels
        )));
    }
    if kernel.kernel_h.is_multiple_of(2) || kernel.kernel_w.is_multiple_of(2) {
        return Err(BevError::UnsupportedKernel(format!(
            "even kernel size {}x{}",
            kernel.kernel_h, kernel.kernel_w
        )));
    }
    if out.channels != kernel.out_channels || out.geometry != input.geometry {
        return Err(BevError::Shape(
            "conv2d: accumulator layout mismatch".into(),
        ));
    }
    let (h, w) = (input.height(), input.width());
    let hw = h * w;
    if kernel.kernel_h == 3 && kernel.kernel_w == 3 && w >= 3 {
        let zero_row = vec![0.0; w];
        for row0 in (0..h).step_by(ROW_BLOCK) {
            let rows = row0..(row0 + ROW_BLOCK).min(h);
            for i in 0..kernel.in_channels {
                let in_plane = &input.data[i * hw..(i + 1) * hw];
                for o in 0..kernel.out_channels {
                    let start = kernel.index(o, i, 0, 0);
                    let taps: &[f64; 9] = kernel.weights[start..start + 9]
                        .try_into()
                        .expect("3x3 taps");
                    if taps.iter().all(|t| *t == 0.0) {
                        continue;
                    }
                    let out_plane = &mut out.data[o * hw..(o + 1) * hw];
                    accumulate_3x3(in_plane, out_plane, taps, &zero_row, h, w, rows.clone());
                }
            }
        }
        return Ok(());
    }
    let (ry, rx) = (
        (kernel.kernel_h / 2) as isize,
        (kernel.kernel_w / 2) as isize,
    );

    for row0 in (0..h).step_by(ROW_BLOCK) {
        let row1 = (row0 + ROW_BLOCK).min(h);
        for i in 0..kernel.in_channels {
            let in_plane = &input.data[i * hw..(i + 1) * hw];
            for o in 0..kernel.out_channels {
                let out_plane = &mut out.data[o * hw..(o + 1) * hw];
                for ky in 0..kernel.kernel_h {
                    let dy = ky as isize - ry;
                    for kx in 0..kernel.kernel_w {
                        let wgt = kernel.get(o, i, ky, kx);
                        if wgt == 0.0 {
                            continue;
                        }
                        let dx = kx as isize - rx;
                        let c0 = (-dx).max(0) as usize;
                        let c1 = (w as isize - dx).min(w as isize).max(0) as usize;
                        if c0 >= c1 {
                            continue;
                        }
                        for row in row0..row1 {
                            let src_row = row as isize + dy;
                            if src_row < 0 || src_row >= h as isize {
                                continue;
                            }
                            let dst = &mut out_plane[row * w + c0..row * w + c1];
                            let s0 = (src_row as usize * w) as isize + c0 as isize + dx;
                            let src = &in_plane[s0 as usize..s0 as usize + (c1 - c0)];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wgt * s;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// All nine taps of one (out, in) channel pair per accumulator pass.
#[inline]
fn accumulate_3x3(
    in_plane: &[f64],
    out_plane: &mut [f64],
    t: &[f64; 9],
    zero_row: &[f64],
    h: usize,
    w: usize,
    rows: std::ops::Range<usize>,
) {
    for row in rows {
        let up = if row > 0 {
            &in_plane[(row - 1) * w..row * w]
        } else {
            zero_row
        };
        let mid = &in_plane[row * w..(row + 1) * w];
        let dn = if row + 1 < h {
            &in_plane[(row + 1) * w..(row + 2) * w]
        } else {
            zero_row
        };
        let dst = &mut out_plane[row * w..(row + 1) * w];

        dst[0] += t[1] * up[0]
            + t[2] * up[1]
            + t[4] * mid[0]
            + t[5] * mid[1]
            + t[7] * dn[0]
            + t[8] * dn[1];
        let n = w - 2;
        let (u0, u1, u2) = (&up[..n], &up[1..n + 1], &up[2..n + 2]);
        let (m0, m1, m2) = (&mid[..n], &mid[1..n + 1], &mid[2..n + 2]);
        let (d0, d1, d2) = (&dn[..n], &dn[1..n + 1], &dn[2..n + 2]);
        let inner = &mut dst[1..n + 1];
        for c in 0..n {
            inner[c] += t[0] * u0[c]
                + t[1] * u1[c]
                + t[2] * u2[c]
                + t[3] * m0[c]
                + t[4] * m1[c]
                + t[5] * m2[c]
                + t[6] * d0[c]
                + t[7] * d1[c]
                + t[8] * d2[c];
        }
        let e = w - 1;
        dst[e] += t[0] * up[e - 1]
            + t[1] * up[e]
            + t[3] * mid[e - 1]
            + t[4] * mid[e]
            + t[6] * dn[e - 1]
            + t[7] * dn[e];
    }
}

/// Applies `kernel` `times` times in a row; `times == 0` returns a copy.
pub fn conv2d_repeat(
    input: &FeatureGrid,
    kernel: &ConvKernel,
    times: usize,
) -> Result<FeatureGrid> {
    let mut cur = input.clone();
    for _ in 0..times {
        cur = conv2d(&cur, kernel)?;
    }
    Ok(cur)
}

/// Stacks `a` over `b` along channels; `a`'s planes come first.
pub fn channel_concat(a: &FeatureGrid, b: &FeatureGrid) -> Result<FeatureGrid> {
    channel_concat_all(&[a, b])
}

pub fn channel_concat_all(grids: &[&FeatureGrid]) -> Result<FeatureGrid> {
    let first = grids
        .first()
        .ok_or_else(|| BevError::Shape("nothing to concatenate".into()))?;
    if let Some(bad) = grids.iter().find(|g| g.geometry != first.geometry) {
        return Err(BevError::Shape(format!(
            "concat: spatial {}x{}@{} vs {}x{}@{}",
            first.height(),
            first.width(),
            first.resolution(),
            bad.height(),
            bad.width(),
            bad.resolution()
        )));
    }
    let channels = grids.iter().map(|g| g.channels).sum();
    let mut data = Vec::with_capacity(channels * first.geometry.cells());
    for g in grids {
        data.extend_from_slice(&g.data);
    }
    Ok(FeatureGrid {
        channels,
        geometry: first.geometry,
        data,
    })
}

/// Bilinear resampling: output cell `c` reads the source at `t.apply(c)`.
/// Taps outside the source contribute zero. Coordinates within
/// [`INTEGER_SNAP_TOLERANCE`] of an integer are read without interpolation,
/// so integer shifts (and the identity) are copied bit-exactly.
pub fn grid_sample(src: &FeatureGrid, t: &GridTransform) -> FeatureGrid {
    if let Some((dc, dr)) = t.integer_shift() {
        return shift_integer(src, dc, dr);
    }
    let (h, w) = (src.height(), src.width());
    let hw = h * w;
    // Per output cell: up to four (source index, weight) taps.
    let mut taps: Vec<[(usize, f64); 4]> = Vec::with_capacity(hw);
    for row in 0..h {
        for col in 0..w {
            let (sc, sr) = t.apply(col as f64, row as f64);
            taps.push(bilinear_taps(sc, sr, w, h));
        }
    }
    let mut out = FeatureGrid::zeros(src.geometry, src.channels);
    for c in 0..src.channels {
        let in_plane = &src.data[c * hw..(c + 1) * hw];
        let out_plane = &mut out.data[c * hw..(c + 1) * hw];
        for (o, cell_taps) in out_plane.iter_mut().zip(&taps) {
            let mut acc = 0.0;
            for &(idx, wgt) in cell_taps {
                if wgt != 0.0 {
                    acc += wgt * in_plane[idx];
                }
            }
            *o = acc;
        }
    }
    out
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() <= INTEGER_SNAP_TOLERANCE {
        r
    } else {
        v
    }
}

fn bilinear_taps(sc: f64, sr: f64, w: usize, h: usize) -> [(usize, f64); 4] {
    let (sc, sr) = (snap(sc), snap(sr));
    let (c0, r0) = (sc.floor(), sr.floor());
    let (fc, fr) = (sc - c0, sr - r0);
    let mut taps = [(0usize, 0.0f64); 4];
    let corners = [
        (c0, r0, (1.0 - fc) * (1.0 - fr)),
        (c0 + 1.0, r0, fc * (1.0 - fr)),
        (c0, r0 + 1.0, (1.0 - fc) * fr),
        (c0 + 1.0, r0 + 1.0, fc * fr),
    ];
    for (slot, (cc, rr, wgt)) in taps.iter_mut().zip(corners) {
        if wgt != 0.0 && cc >= 0.0 && rr >= 0.0 && cc < w as f64 && rr < h as f64 {
            *slot = (rr as usize * w + cc as usize, wgt);
        }
    }
    taps
}

/// `out[row][col] = src[row + dr][col + dc]`, zero outside.
fn shift_integer(src: &FeatureGrid, dc: i64, dr: i64) -> FeatureGrid {
    let (h, w) = (src.height() as i64, src.width() as i64);
    let hw = (h * w) as usize;
    let mut out = FeatureGrid::zeros(src.geometry, src.channels);
    let c0 = (-dc).clamp(0, w);
    let c1 = (w - dc).clamp(0, w);
    if c0 >= c1 {
        return out;
    }
    for c in 0..src.channels {
        let in_plane = &src.data[c * hw..(c + 1) * hw];
        let out_plane = &mut out.data[c * hw..(c + 1) * hw];
        for row in 0..h {
            let sr = row + dr;
            if sr < 0 || sr >= h {
                continue;
            }
            let d = (row * w + c0) as usize;
            let s = (sr * w + c0 + dc) as usize;
            let n = (c1 - c0) as usize;
            out_plane[d..d + n].copy_from_slice(&in_plane[s..s + n]);
        }
    }
    out
}

/// Constant field `scale` with the given geometry.
pub fn all_ones(geometry: GridGeometry, channels: usize, scale: f64) -> Result<FeatureGrid> {
    if channels == 0 {
        return Err(BevError::Shape(
            "all_ones needs at least one channel".into(),
        ));
    }
    let mut g = FeatureGrid::zeros(geometry, channels);
    g.fill(scale);
    Ok(g)
}

fn dim_to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| BevError::Format(format!("dimension {v} exceeds u32")))
}

pub(crate) fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    if &buf != magic {
        return Err(BevError::Format(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&buf)
        )));
    }
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
        .collect())
}

fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}
