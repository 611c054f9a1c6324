//! Planar ego poses and the grid-space resampling transforms they induce.
//!
//! A [`Pose2`] maps ego coordinates into the world frame. Grid cells are
//! addressed as `(col, row)` with `x` running along columns and `y` along
//! rows; the ego origin sits at cell `((W-1)/2, (H-1)/2)`.

use std::f64::consts::PI;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{BevError, Result};

/// Offsets closer than this to an integer are treated as exact cell shifts.
pub const INTEGER_SNAP_TOLERANCE: f64 = 1e-9;

/// Wraps an angle into `(-pi, pi]`. Angles already in range are returned untouched.
pub fn normalize_angle(yaw: f64) -> f64 {
    if yaw > -PI && yaw <= PI {
        return yaw;
    }
    let wrapped = yaw.rem_euclid(2.0 * PI);
    if wrapped > PI {
        wrapped - 2.0 * PI
    } else {
        wrapped
    }
}

/// SE(2) rigid pose: position in meters, heading in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Default for Pose2 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose2 {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: normalize_angle(yaw),
        }
    }

    pub const fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            yaw: 0.0,
        }
    }

    /// Rigid motion "apply `other`, then `self`".
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.yaw + other.yaw,
        )
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2::new(
            -(c * self.x + s * self.y),
            -(-s * self.x + c * self.y),
            -self.yaw,
        )
    }

    /// Maps a point expressed in this pose's frame into the parent frame.
    pub fn transform_point(&self, px: f64, py: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (self.x + c * px - s * py, self.y + s * px + c * py)
    }

    /// Rotates a free vector (no translation) into the parent frame.
    pub fn rotate_vector(&self, vx: f64, vy: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (c * vx - s * vy, s * vx + c * vy)
    }
}

pub fn pose_compose(a: &Pose2, b: &Pose2) -> Pose2 {
    a.compose(b)
}

pub fn pose_inverse(p: &Pose2) -> Pose2 {
    p.inverse()
}

/// Spatial layout of a BEV grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub height: usize,
    pub width: usize,
    /// Meters per cell.
    pub resolution: f64,
}

impl GridGeometry {
    pub fn new(height: usize, width: usize, resolution: f64) -> Result<Self> {
        let geometry = Self {
            height,
            width,
            resolution,
        };
        geometry.validate()?;
        Ok(geometry)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0) || !self.resolution.is_finite() {
            return Err(BevError::InvalidGeometry(format!(
                "resolution must be positive, got {}",
                self.resolution
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(BevError::InvalidGeometry(format!(
                "empty grid {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Cell coordinate `(col, row)` of the ego origin.
    pub fn center(&self) -> (f64, f64) {
        (
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Ego-frame metric point to fractional `(col, row)`.
    pub fn metric_to_cell(&self, x: f64, y: f64) -> (f64, f64) {
        let (cx, cy) = self.center();
        (cx + x / self.resolution, cy + y / self.resolution)
    }

    pub fn cell_to_metric(&self, col: f64, row: f64) -> (f64, f64) {
        let (cx, cy) = self.center();
        ((col - cx) * self.resolution, (row - cy) * self.resolution)
    }

    /// Half-extent of the perception range along x and y, in meters.
    pub fn half_range(&self) -> (f64, f64) {
        (
            self.width as f64 * self.resolution / 2.0,
            self.height as f64 * self.resolution / 2.0,
        )
    }
}

/// Affine map from destination-grid `(col, row)` to source-grid `(col, row)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridTransform {
    /// Row-major `[[a, b, c], [d, e, f]]`: `col' = a col + b row + c`, `row' = d col + e row + f`.
    pub m: [[f64; 3]; 2],
}

impl GridTransform {
    pub const fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    pub const fn translation(dcol: f64, drow: f64) -> Self {
        Self {
            m: [[1.0, 0.0, dcol], [0.0, 1.0, drow]],
        }
    }

    #[inline]
    pub fn apply(&self, col: f64, row: f64) -> (f64, f64) {
        let [[a, b, c], [d, e, f]] = self.m;
        (a * col + b * row + c, d * col + e * row + f)
    }

    /// `outer ∘ inner`: maps through `inner` first.
    pub fn compose(outer: &GridTransform, inner: &GridTransform) -> GridTransform {
        let [[a, b, c], [d, e, f]] = outer.m;
        let [[p, q, r], [s, t, u]] = inner.m;
        GridTransform {
            m: [
                [a * p + b * s, a * q + b * t, a * r + b * u + c],
                [d * p + e * s, d * q + e * t, d * r + e * u + f],
            ],
        }
    }

    pub fn max_abs_diff(&self, other: &GridTransform) -> f64 {
        self.m
            .iter()
            .flatten()
            .zip(other.m.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// The integer `(dcol, drow)` shift, if this transform is one.
    pub fn integer_shift(&self) -> Option<(i64, i64)> {
        let [[a, b, c], [d, e, f]] = self.m;
        let tol = INTEGER_SNAP_TOLERANCE;
        let near = |v: f64, target: f64| (v - target).abs() <= tol;
        if !(near(a, 1.0) && near(b, 0.0) && near(d, 0.0) && near(e, 1.0)) {
            return None;
        }
        let (rc, rf) = (c.round(), f.round());
        if near(c, rc) && near(f, rf) {
            Some((rc as i64, rf as i64))
        } else {
            None
        }
    }
}

/// Transform that resamples a grid rendered at `src_pose` into the grid frame of `dst_pose`.
pub fn relative_transform(
    dst_pose: &Pose2,
    src_pose: &Pose2,
    geometry: &GridGeometry,
) -> Result<GridTransform> {
    geometry.validate()?;
    // dst ego -> world -> src ego
    let rel = src_pose.inverse().compose(dst_pose);
    let (s, c) = rel.yaw.sin_cos();
    let (cx, cy) = geometry.center();
    let tx = rel.x / geometry.resolution + cx - (c * cx - s * cy);
    let ty = rel.y / geometry.resolution + cy - (s * cx + c * cy);
    Ok(GridTransform {
        m: [[c, -s, tx], [s, c, ty]],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

/// Writes `t,x,y,yaw` rows with a header.
pub fn write_trajectory_csv<W: Write>(writer: W, rows: &[(f64, Pose2)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    for (t, p) in rows {
        out.serialize(TrajectoryRow {
            t: *t,
            x: p.x,
            y: p.y,
            yaw: p.yaw,
        })?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trajectory_csv<R: Read>(reader: R) -> Result<Vec<(f64, Pose2)>> {
    let mut input = csv::Reader::from_reader(reader);
    input
        .deserialize::<TrajectoryRow>()
        .map(|row| {
            let row = row?;
            Ok((row.t, Pose2::new(row.x, row.y, row.yaw)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: &Pose2, b: &Pose2, tol: f64) -> bool {
        (a.x - b.x).abs() <= tol
            && (a.y - b.y).abs() <= tol
            && normalize_angle(a.yaw - b.yaw).abs() <= tol
    }

    #[test]
    fn compose_examples() {
        let p = Pose2::new(1.5, -2.0, 0.3);
        assert_eq!(Pose2::identity().compose(&p), p);
        assert_eq!(
            Pose2::new(1.0, 0.0, 0.0).compose(&Pose2::new(2.0, 0.0, 0.0)),
            Pose2::new(3.0, 0.0, 0.0)
        );
        let r = Pose2::new(0.0, 0.0, FRAC_PI_2).compose(&Pose2::new(1.0, 0.0, 0.0));
        assert!(close(&r, &Pose2::new(0.0, 1.0, FRAC_PI_2), 1e-12), "{r:?}");
    }

    #[test]
    fn inverse_examples() {
        assert!(close(&Pose2::identity().inverse(), &Pose2::identity(), 0.0));
        assert!(close(
            &Pose2::new(3.0, 0.0, 0.0).inverse(),
            &Pose2::new(-3.0, 0.0, 0.0),
            0.0
        ));
        let inv = Pose2::new(1.0, 2.0, FRAC_PI_2).inverse();
        assert!(
            close(&inv, &Pose2::new(-2.0, 1.0, -FRAC_PI_2), 1e-12),
            "{inv:?}"
        );
    }

    #[test]
    fn yaw_is_normalized() {
        assert_eq!(Pose2::new(0.0, 0.0, PI).yaw, PI);
        assert!((Pose2::new(0.0, 0.0, -PI).yaw - PI).abs() < 1e-12);
        assert!((Pose2::new(0.0, 0.0, 3.0 * PI).yaw - PI).abs() < 1e-12);
        assert!((Pose2::new(0.0, 0.0, -FRAC_PI_2 - 2.0 * PI).yaw + FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn equal_poses_give_identity_transform() {
        let g = GridGeometry::new(16, 16, 0.8).unwrap();
        let p = Pose2::new(4.2, -1.0, 0.7);
        let t = relative_transform(&p, &p, &g).unwrap();
        assert!(t.max_abs_diff(&GridTransform::identity()) < 1e-12);
    }

    #[test]
    fn one_cell_ego_step_is_unit_shift() {
        let g = GridGeometry::new(16, 16, 0.8).unwrap();
        let older = Pose2::new(0.0, 0.0, 0.0);
        let newer = Pose2::new(0.8, 0.0, 0.0);
        let t = relative_transform(&newer, &older, &g).unwrap();
        assert_eq!(t.integer_shift(), Some((1, 0)));
    }

    #[test]
    fn quarter_turn_rotates_about_center() {
        // 9x9 grid: center cell (4, 4).
        let g = GridGeometry::new(9, 9, 1.0).unwrap();
        let src = Pose2::identity();
        let dst = Pose2::new(0.0, 0.0, FRAC_PI_2);
        let t = relative_transform(&dst, &src, &g).unwrap();
        let (c, r) = t.apply(4.0, 4.0);
        assert!((c - 4.0).abs() < 1e-12 && (r - 4.0).abs() < 1e-12);
        // dst ego +x (one cell right of center) is world +y, i.e. src cell (4, 5).
        let (c, r) = t.apply(5.0, 4.0);
        assert!(
            (c - 4.0).abs() < 1e-12 && (r - 5.0).abs() < 1e-12,
            "{c} {r}"
        );
        // dst ego +y is world -x, i.e. src cell (3, 4).
        let (c, r) = t.apply(4.0, 5.0);
        assert!(
            (c - 3.0).abs() < 1e-12 && (r - 4.0).abs() < 1e-12,
            "{c} {r}"
        );
    }

    #[test]
    fn nonpositive_resolution_rejected() {
        let g = GridGeometry {
            height: 4,
            width: 4,
            resolution: 0.0,
        };
        let p = Pose2::identity();
        assert!(matches!(
            relative_transform(&p, &p, &g),
            Err(BevError::InvalidGeometry(_))
        ));
        assert!(GridGeometry::new(4, 4, -1.0).is_err());
    }

    #[test]
    fn trajectory_csv_roundtrip() {
        let rows = vec![
            (0.0, Pose2::new(0.0, 0.0, 0.0)),
            (0.5, Pose2::new(0.4, -0.1, 0.02)),
        ];
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,x,y,yaw\n"));
        assert_eq!(read_trajectory_csv(buf.as_slice()).unwrap(), rows);
    }
}
