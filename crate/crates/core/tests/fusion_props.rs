mod common;

use bevstream::fusion::{
    oracle_margins, parallel_fuse, parallel_fuse_split, read_stream, recurrent_step, reset,
    run_recurrent, unrolled_oracle, write_stream, FrameInput, FusionState, ParallelFuser,
    RecurrentFuser,
};
use bevstream::geometry::{GridGeometry, Pose2};
use bevstream::grid::{channel_split, conv2d, kernel_concat, ConvKernel, FeatureGrid, Margins};
use bevstream::BevError;
use common::{
    bounded_kernel, index_shift, integer_stream, naive_conv, naive_conv_repeat, rng, static_stream,
};
use proptest::prelude::*;
use rand::Rng;

fn g32() -> GridGeometry {
    GridGeometry::new(32, 32, 0.8).unwrap()
}

/// The unrolled sum built only from test-side references: per-frame index
/// shifts from the cumulative cell offsets and direct-sum convolutions.
fn reference_unroll(
    frames: &[FrameInput],
    offsets: &[(i64, i64)],
    v_mem: &ConvKernel,
    v_cur: &ConvKernel,
) -> FeatureGrid {
    let n = frames.len();
    let (nc, nr) = offsets[n - 1];
    let mut acc = FeatureGrid::zeros(*frames[0].grid.geometry(), v_cur.out_channels());
    for (j, (f, (oc, or))) in frames.iter().zip(offsets).enumerate() {
        // Newest-frame cell x sits at x + (newest offset - frame offset) in frame j.
        let aligned = index_shift(&f.grid, nc - oc, nr - or);
        acc.add_assign(&naive_conv_repeat(
            &naive_conv(&aligned, v_cur),
            v_mem,
            n - 1 - j,
        ))
        .unwrap();
    }
    acc
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn recurrence_matches_unroll(seed in any::<u64>(), len in 1usize..=8) {
        let mut r = rng(seed);
        let v_mem = bounded_kernel(&mut r, 4, 4, 3, 0.9);
        let v_cur = bounded_kernel(&mut r, 4, 4, 3, 1.0);
        let (frames, offsets) = integer_stream(&mut r, g32(), 4, len, 1);
        let fuser = RecurrentFuser::new(v_mem.clone(), v_cur.clone()).unwrap();
        let chained = run_recurrent(&fuser, &frames).unwrap();
        let oracle = unrolled_oracle(&frames, &v_mem, &v_cur).unwrap();
        let reference = reference_unroll(&frames, &offsets, &v_mem, &v_cur);
        let m = oracle_margins(&frames, 1).unwrap().unwrap();
        prop_assert!(m.interior_cells(&g32()) > 0);
        // Looser, closed-form bound: len * (radius + max per-step shift) per side.
        let loose = Margins::uniform(len * 2);
        prop_assert!(m.left <= loose.left && m.right <= loose.right && m.top <= loose.top && m.bottom <= loose.bottom);
        prop_assert!(chained.interior_max_abs_diff(&oracle, m).unwrap() <= 1e-6);
        prop_assert!(chained.interior_max_abs_diff(&reference, m).unwrap() <= 1e-6);
        prop_assert!(oracle.interior_max_abs_diff(&reference, m).unwrap() <= 1e-9);
    }

    #[test]
    fn window_form_matches_split_form(seed in any::<u64>(), k in 1usize..=5, extra in 0usize..3) {
        let mut r = rng(seed);
        let g = GridGeometry::new(16, 16, 0.8).unwrap();
        let history: Vec<FrameInput> = (0..k + extra)
            .map(|i| {
                let pose = Pose2::new(r.random_range(-3.0..3.0), r.random_range(-3.0..3.0), r.random_range(-0.5..0.5));
                FrameInput::new(FeatureGrid::random(g, 3, 1.0, &mut r), i as f64, pose, i as u64)
            })
            .collect();
        let u = ConvKernel::random(2, 3 * k, 3, 3, 0.2, &mut r);
        let whole = parallel_fuse(&history, k, &u).unwrap();
        let split = parallel_fuse_split(&history, k, &channel_split(&u, k).unwrap()).unwrap();
        prop_assert!(whole.max_abs_diff(&split).unwrap() <= 1e-6);
    }

    #[test]
    fn state_layout_is_fixed(seed in any::<u64>()) {
        let mut r = rng(seed);
        let fuser = RecurrentFuser::new(bounded_kernel(&mut r, 2, 2, 3, 0.9), bounded_kernel(&mut r, 2, 2, 3, 1.0)).unwrap();
        let (frames, _) = integer_stream(&mut r, GridGeometry::new(12, 12, 0.8).unwrap(), 2, 64, 1);
        let mut state = fuser.new_state(*frames[0].grid.geometry(), 3);
        let mut sizes = Vec::new();
        for f in &frames {
            fuser.step(&mut state, f).unwrap();
            sizes.push((state.to_bytes().len(), state.retained_bytes()));
        }
        prop_assert_eq!(sizes[1], sizes[63]);
        let back = FusionState::read_from(state.to_bytes().as_slice()).unwrap();
        prop_assert_eq!(back, state);
    }
}

#[test]
fn two_frame_expansion_by_hand() {
    let mut r = rng(3);
    let g = GridGeometry::new(10, 10, 1.0).unwrap();
    let frames = static_stream(&mut r, g, 2, 2);
    let v_mem = bounded_kernel(&mut r, 2, 2, 3, 0.9);
    let v_cur = bounded_kernel(&mut r, 2, 2, 3, 1.0);
    let fuser = RecurrentFuser::new(v_mem.clone(), v_cur.clone()).unwrap();
    let got = run_recurrent(&fuser, &frames).unwrap();
    let mut want = naive_conv(&naive_conv(&frames[0].grid, &v_cur), &v_mem);
    want.add_assign(&naive_conv(&frames[1].grid, &v_cur))
        .unwrap();
    assert!(got.max_abs_diff(&want).unwrap() <= 1e-6);

    let four = static_stream(&mut r, g, 2, 4);
    let chained = run_recurrent(&fuser, &four).unwrap();
    let oracle = unrolled_oracle(&four, &v_mem, &v_cur).unwrap();
    assert!(chained.max_abs_diff(&oracle).unwrap() <= 1e-6);
}

#[test]
fn first_step_and_memoryless_limit() {
    let mut r = rng(4);
    let g = GridGeometry::new(12, 12, 0.8).unwrap();
    let (frames, _) = integer_stream(&mut r, g, 3, 5, 1);
    let v_cur = bounded_kernel(&mut r, 3, 3, 3, 1.0);
    let v_mem = bounded_kernel(&mut r, 3, 3, 3, 0.9);
    let state = FusionState::new(g, 3, 0);
    let (next, first) = recurrent_step(&state, &frames[0], &v_mem, &v_cur).unwrap();
    assert!(first.bit_eq(&conv2d(&frames[0].grid, &v_cur).unwrap()));
    assert_eq!(next.frames_seen, 1);
    assert_eq!(next.last_timestamp, Some(frames[0].timestamp));

    let memoryless = RecurrentFuser::new(ConvKernel::zeros(3, 3, 3, 3), v_cur.clone()).unwrap();
    let mut s = memoryless.new_state(g, 0);
    for f in &frames {
        let out = memoryless.step(&mut s, f).unwrap();
        assert!(out.max_abs_diff(&conv2d(&f.grid, &v_cur).unwrap()).unwrap() <= 1e-12);
    }
}

#[test]
fn reset_semantics() {
    let mut r = rng(5);
    let g = GridGeometry::new(12, 12, 0.8).unwrap();
    let fuser = RecurrentFuser::new(
        bounded_kernel(&mut r, 2, 2, 3, 0.9),
        bounded_kernel(&mut r, 2, 2, 3, 1.0),
    )
    .unwrap();
    let (frames, _) = integer_stream(&mut r, g, 2, 4, 1);
    let mut s = fuser.new_state(g, 4);
    let fresh_first = fuser.step(&mut s, &frames[0]).unwrap();
    for f in &frames[1..] {
        fuser.step(&mut s, f).unwrap();
    }
    let cleared = reset(&s);
    assert!(cleared.memory.is_zero() && cleared.embedding.is_zero());
    assert_eq!(cleared.frames_seen, 0);
    assert_eq!(reset(&cleared), cleared);

    s.reset();
    let again = fuser.step(&mut s, &frames[0]).unwrap();
    assert!(again.bit_eq(&fresh_first));
}

#[test]
fn out_of_order_frames_are_rejected() {
    let mut r = rng(6);
    let g = GridGeometry::new(8, 8, 0.8).unwrap();
    let fuser = RecurrentFuser::new(
        ConvKernel::identity(1, 3, 0.5),
        ConvKernel::identity(1, 3, 1.0),
    )
    .unwrap();
    let frames = static_stream(&mut r, g, 1, 2);
    let mut s = fuser.new_state(g, 0);
    fuser.step(&mut s, &frames[1]).unwrap();
    assert!(matches!(
        fuser.step(&mut s, &frames[0]),
        Err(BevError::StreamOrder { .. })
    ));
    assert!(matches!(
        fuser.step(&mut s, &frames[1]),
        Err(BevError::StreamOrder { .. })
    ));
    assert!(matches!(
        unrolled_oracle(&[], fuser.v_mem(), fuser.v_cur()),
        Err(BevError::EmptyStream)
    ));
}

#[test]
fn parallel_examples() {
    let mut r = rng(7);
    let g = GridGeometry::new(10, 10, 0.8).unwrap();
    let frames = static_stream(&mut r, g, 2, 3);
    let u = ConvKernel::random(2, 2, 3, 3, 0.3, &mut r);
    assert!(parallel_fuse(&frames, 1, &u)
        .unwrap()
        .bit_eq(&conv2d(&frames[2].grid, &u).unwrap()));

    let id2 = kernel_concat(&[
        ConvKernel::identity(2, 3, 1.0),
        ConvKernel::identity(2, 3, 1.0),
    ])
    .unwrap();
    let mut want = frames[1].grid.clone();
    want.add_assign(&frames[2].grid).unwrap();
    assert!(
        parallel_fuse(&frames, 2, &id2)
            .unwrap()
            .max_abs_diff(&want)
            .unwrap()
            <= 1e-12
    );

    let zero_first = [ConvKernel::zeros(2, 2, 3, 3), u.clone()];
    let got = parallel_fuse_split(&frames, 2, &zero_first).unwrap();
    assert!(
        got.max_abs_diff(&conv2d(&frames[2].grid, &u).unwrap())
            .unwrap()
            <= 1e-12
    );
    let zeros = [ConvKernel::zeros(2, 2, 3, 3), ConvKernel::zeros(2, 2, 3, 3)];
    assert!(parallel_fuse_split(&frames, 2, &zeros).unwrap().is_zero());

    assert!(matches!(
        parallel_fuse(&frames, 4, &u),
        Err(BevError::InsufficientHistory {
            window: 4,
            available: 3
        })
    ));
    assert!(matches!(
        parallel_fuse(&frames, 2, &u),
        Err(BevError::Shape(_))
    ));
}

#[test]
fn streaming_parallel_fuser_matches_batch() {
    let mut r = rng(8);
    let g = GridGeometry::new(12, 12, 0.8).unwrap();
    let (frames, _) = integer_stream(&mut r, g, 2, 6, 2);
    let u = ConvKernel::random(2, 6, 3, 3, 0.2, &mut r);
    let mut p = ParallelFuser::new(u.clone(), 3).unwrap();
    for (i, f) in frames.iter().enumerate() {
        let out = p.step(f.clone()).unwrap();
        if i < 2 {
            assert!(out.is_none());
        } else {
            let batch = parallel_fuse(&frames[..=i], 3, &u).unwrap();
            assert!(out.unwrap().bit_eq(&batch));
            assert_eq!(p.retained_bytes(), 3 * frames[0].grid.payload_bytes());
        }
    }
}

#[test]
fn frame_order_matters_only_to_the_recurrence() {
    let mut r = rng(9);
    let g = GridGeometry::new(16, 16, 0.8).unwrap();
    let frames = static_stream(&mut r, g, 2, 4);
    let mut swapped = frames.clone();
    let (ga, gb) = (swapped[0].grid.clone(), swapped[2].grid.clone());
    swapped[0].grid = gb;
    swapped[2].grid = ga;

    // Non-commuting, non-identity memory kernel: distance in time changes the operator.
    let v_mem = bounded_kernel(&mut r, 2, 2, 3, 0.9);
    let v_cur = ConvKernel::identity(2, 3, 1.0);
    let fuser = RecurrentFuser::new(v_mem, v_cur).unwrap();
    let a = run_recurrent(&fuser, &frames).unwrap();
    let b = run_recurrent(&fuser, &swapped).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() > 1e-3);

    let chunk = ConvKernel::random(2, 2, 3, 3, 0.3, &mut r);
    let equal = vec![chunk; 4];
    let pa = parallel_fuse_split(&frames, 4, &equal).unwrap();
    let pb = parallel_fuse_split(&swapped, 4, &equal).unwrap();
    assert!(pa.max_abs_diff(&pb).unwrap() <= 1e-12);
}

#[test]
fn static_point_lands_on_its_cell() {
    // A world-fixed point feature observed every frame while the ego moves whole cells.
    let g = GridGeometry::new(40, 40, 0.8).unwrap();
    // Odd half-cells: with an even grid the ego center sits between cells.
    let (px, py) = (5.5 * 0.8, -3.5 * 0.8);
    let fuser = RecurrentFuser::new(
        ConvKernel::identity(1, 1, 1.0),
        ConvKernel::identity(1, 1, 1.0),
    )
    .unwrap();
    let mut state = fuser.new_state(g, 0);
    let steps = [
        (1, 0),
        (1, 1),
        (0, -1),
        (2, 0),
        (-1, 1),
        (1, 0),
        (0, 0),
        (1, -1),
    ];
    let (mut col, mut row) = (0i64, 0i64);
    for (i, (dc, dr)) in steps.iter().enumerate() {
        col += dc;
        row += dr;
        let pose = Pose2::new(col as f64 * 0.8, row as f64 * 0.8, 0.0);
        let (ex, ey) = pose.inverse().transform_point(px, py);
        let (c, rr) = g.metric_to_cell(ex, ey);
        let mut grid = FeatureGrid::zeros(g, 1);
        grid.set(0, rr.round() as usize, c.round() as usize, 1.0);
        let mut fused = fuser
            .step(&mut state, &FrameInput::new(grid, i as f64, pose, i as u64))
            .unwrap();
        fused.scale(1.0 / (i + 1) as f64);
        assert!((c - c.round()).abs() < 1e-9 && (rr - rr.round()).abs() < 1e-9);
        assert_eq!(
            fused.get(0, rr.round() as usize, c.round() as usize),
            1.0,
            "step {i}"
        );
        assert_eq!(fused.data().iter().filter(|v| **v != 0.0).count(), 1);
    }
}

#[test]
fn replay_file_round_trips() {
    let mut r = rng(10);
    let (frames, _) = integer_stream(&mut r, GridGeometry::new(6, 7, 0.5).unwrap(), 2, 5, 1);
    let mut buf = Vec::new();
    write_stream(&mut buf, &frames).unwrap();
    assert_eq!(read_stream(buf.as_slice()).unwrap(), frames);
    buf[0] = b'X';
    assert!(matches!(
        read_stream(buf.as_slice()),
        Err(BevError::Format(_))
    ));
}
