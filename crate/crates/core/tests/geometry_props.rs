mod common;

use std::f64::consts::PI;

use bevstream::geometry::{
    normalize_angle, relative_transform, GridGeometry, GridTransform, Pose2,
};
use common::pose_close;
use proptest::prelude::*;

fn pose() -> impl Strategy<Value = Pose2> {
    (-50.0..50.0f64, -50.0..50.0f64, -PI..PI).prop_map(|(x, y, yaw)| Pose2::new(x, y, yaw))
}

fn geometry() -> GridGeometry {
    GridGeometry::new(128, 128, 0.8).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn compose_is_associative(a in pose(), b in pose(), c in pose()) {
        let left = a.compose(&b).compose(&c);
        let right = a.compose(&b.compose(&c));
        prop_assert!(pose_close(&left, &right, 1e-9), "{left:?} vs {right:?}");
    }

    #[test]
    fn identity_is_neutral_and_inverse_cancels(a in pose()) {
        let id = Pose2::identity();
        prop_assert!(pose_close(&id.compose(&a), &a, 1e-9));
        prop_assert!(pose_close(&a.compose(&id), &a, 1e-9));
        prop_assert!(pose_close(&a.compose(&a.inverse()), &id, 1e-9));
        prop_assert!(pose_close(&a.inverse().compose(&a), &id, 1e-9));
    }

    #[test]
    fn yaw_stays_in_half_open_range(a in pose(), b in pose()) {
        let yaw = a.compose(&b).yaw;
        prop_assert!(yaw > -PI && yaw <= PI);
        prop_assert!(a.inverse().yaw > -PI && a.inverse().yaw <= PI);
    }

    #[test]
    fn transforms_compose_along_pose_chains(a in pose(), b in pose(), c in pose()) {
        let g = geometry();
        let t_ac = relative_transform(&a, &c, &g).unwrap();
        let t_ab = relative_transform(&a, &b, &g).unwrap();
        let t_bc = relative_transform(&b, &c, &g).unwrap();
        // dst cell in a -> cell in b -> cell in c
        let chained = GridTransform::compose(&t_bc, &t_ab);
        prop_assert!(chained.max_abs_diff(&t_ac) <= 1e-9, "{:?} vs {:?}", chained, t_ac);
    }

    #[test]
    fn transform_maps_destination_cell_to_source_cell(dst in pose(), src in pose(), wx in -60.0..60.0f64, wy in -60.0..60.0f64) {
        let g = geometry();
        let t = relative_transform(&dst, &src, &g).unwrap();
        let (dx, dy) = dst.inverse().transform_point(wx, wy);
        let (sx, sy) = src.inverse().transform_point(wx, wy);
        let (dc, dr) = g.metric_to_cell(dx, dy);
        let (sc, sr) = g.metric_to_cell(sx, sy);
        let (mc, mr) = t.apply(dc, dr);
        prop_assert!((mc - sc).abs() <= 1e-9 && (mr - sr).abs() <= 1e-9);
    }

    #[test]
    fn equal_poses_give_identity(a in pose()) {
        let t = relative_transform(&a, &a, &geometry()).unwrap();
        prop_assert!(t.max_abs_diff(&GridTransform::identity()) <= 1e-9);
        prop_assert_eq!(t.integer_shift(), Some((0, 0)));
    }

    #[test]
    fn normalization_preserves_direction(yaw in -100.0..100.0f64) {
        let n = normalize_angle(yaw);
        prop_assert!(n > -PI && n <= PI);
        prop_assert!((n.sin() - yaw.sin()).abs() < 1e-9 && (n.cos() - yaw.cos()).abs() < 1e-9);
    }
}

#[test]
fn hand_computed_poses() {
    let q = Pose2::new(0.0, 0.0, PI / 2.0).compose(&Pose2::new(1.0, 0.0, 0.0));
    assert!(pose_close(&q, &Pose2::new(0.0, 1.0, PI / 2.0), 1e-12));
    let inv = Pose2::new(1.0, 2.0, PI / 2.0).inverse();
    assert!(pose_close(&inv, &Pose2::new(-2.0, 1.0, -PI / 2.0), 1e-12));
    let sum = Pose2::new(1.0, 0.0, 0.0).compose(&Pose2::new(2.0, 0.0, 0.0));
    assert!(pose_close(&sum, &Pose2::new(3.0, 0.0, 0.0), 0.0));
}

#[test]
fn one_cell_step_is_unit_grid_shift() {
    let g = geometry();
    let t = relative_transform(&Pose2::new(0.8, 0.0, 0.0), &Pose2::identity(), &g).unwrap();
    assert_eq!(t.integer_shift(), Some((1, 0)));
    let t = relative_transform(&Pose2::new(0.0, -1.6, 0.0), &Pose2::identity(), &g).unwrap();
    assert_eq!(t.integer_shift(), Some((0, -2)));
}

#[test]
fn quarter_turn_rotates_about_center() {
    let g = GridGeometry::new(9, 9, 1.0).unwrap();
    let t = relative_transform(&Pose2::new(0.0, 0.0, PI / 2.0), &Pose2::identity(), &g).unwrap();
    // A point one cell ahead of the new heading was one cell to the left (+y) before.
    let (c, r) = t.apply(5.0, 4.0);
    assert!((c - 4.0).abs() < 1e-12 && (r - 5.0).abs() < 1e-12);
    let (c, r) = t.apply(4.0, 4.0);
    assert!((c - 4.0).abs() < 1e-12 && (r - 4.0).abs() < 1e-12);
}

#[test]
fn nonpositive_resolution_is_rejected() {
    assert!(GridGeometry::new(4, 4, 0.0).is_err());
    assert!(GridGeometry::new(4, 4, -1.0).is_err());
}
