use std::path::PathBuf;

use proptest::prelude::*;
use skattn::golden::{check_golden, golden_cases, GOLDEN_FOCAL, GOLDEN_SIZE};
use skattn::imaging::Image;
use skattn::pose::{
    box_blur, perspective_project, projected_corner_pixels, random_blur_augment, rasterize_box_edges, rt_transform,
    toy_patch_encoder, CameraIntrinsics, PoseImage, PoseRT, BOX_HALF_EXTENTS, EDGE_COLORS,
};

mod common;
use common::{nalgebra_corners, CASES};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/raster")
}

#[test]
fn fixtures_match_fresh_renders_byte_for_byte() {
    for c in check_golden(&fixtures()).unwrap() {
        assert!(c.pixels_match && c.sidecar_match, "{}", c.name);
    }
    let dir = tempfile::tempdir().unwrap();
    for case in golden_cases().unwrap() {
        let path = dir.path().join("x.png");
        case.render().unwrap().save_png(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(case.png_path(&fixtures())).unwrap(), "{}", case.name);
    }
}

#[test]
fn fixture_corners_match_independent_projection() {
    for (name, yaw, pitch, roll, t) in CASES {
        let want = nalgebra_corners(yaw, pitch, roll, t, GOLDEN_FOCAL, GOLDEN_SIZE);
        let sidecar: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(fixtures().join(format!("{name}.json"))).unwrap()).unwrap();
        let stored: Vec<(i64, i64)> = serde_json::from_value(sidecar["corners"].clone()).unwrap();
        assert_eq!(stored, want.to_vec(), "{name} sidecar");
        let img = PoseImage::load_png(fixtures().join(format!("{name}.png"))).unwrap();
        for (x, y) in want {
            assert_ne!(img.pixel(x as usize, y as usize), [0, 0, 0], "{name} corner ({x},{y}) not drawn");
        }
        let cam = CameraIntrinsics::centered(GOLDEN_FOCAL, GOLDEN_SIZE);
        let ours = projected_corner_pixels(&PoseRT::from_euler(yaw, pitch, roll, t), &cam, BOX_HALF_EXTENTS).unwrap();
        assert_eq!(ours, want, "{name}");
    }
}

#[test]
fn half_turn_yaw_swaps_left_and_right_colors() {
    let cam = CameraIntrinsics::centered(40.0, 64);
    let front =
        rasterize_box_edges(&PoseRT::identity_at([0.0, 0.0, 5.0]), &cam, BOX_HALF_EXTENTS, (64, 64), &EDGE_COLORS)
            .unwrap();
    let back = rasterize_box_edges(
        &PoseRT::from_euler(std::f64::consts::PI, 0.0, 0.0, [0.0, 0.0, 5.0]),
        &cam,
        BOX_HALF_EXTENTS,
        (64, 64),
        &EDGE_COLORS,
    )
    .unwrap();
    let corners = nalgebra_corners(0.0, 0.0, 0.0, [0.0, 0.0, 5.0], 40.0, 64);
    let mid_y = ((corners[1].1 + corners[2].1) / 2) as usize;
    let (left_x, right_x) = (corners[0].0 as usize, corners[1].0 as usize);
    assert_eq!(front.pixel(right_x, mid_y), EDGE_COLORS[1]);
    assert_eq!(front.pixel(left_x, mid_y), EDGE_COLORS[3]);
    assert_eq!(back.pixel(right_x, mid_y), EDGE_COLORS[3]);
    assert_eq!(back.pixel(left_x, mid_y), EDGE_COLORS[1]);
}

#[test]
fn pure_depth_increase_shrinks_the_box() {
    let cam = CameraIntrinsics::centered(40.0, 64);
    let diag = |z: f64| {
        let c = projected_corner_pixels(&PoseRT::identity_at([0.0, 0.0, z]), &cam, BOX_HALF_EXTENTS).unwrap();
        (((c[2].0 - c[0].0).pow(2) + (c[2].1 - c[0].1).pow(2)) as f64).sqrt()
    };
    assert!(diag(10.0) < diag(5.0));
}

fn rotation() -> impl Strategy<Value = (f64, f64, f64)> {
    (-3.0f64..3.0, -1.5f64..1.5, -3.0f64..3.0)
}

proptest! {
    #[test]
    fn rigid_transform_preserves_distances((yaw, pitch, roll) in rotation(), t in prop::array::uniform3(-3.0f64..3.0),
                                           pts in prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 2..6)) {
        let pose = PoseRT::from_euler(yaw, pitch, roll, t);
        let moved = rt_transform(&pts, &pose).unwrap();
        let dist = |a: &[f64; 3], b: &[f64; 3]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                prop_assert!((dist(&pts[i], &pts[j]) - dist(&moved[i], &moved[j])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn raster_colors_stay_in_palette((yaw, pitch, roll) in (-0.8f64..0.8, -0.6f64..0.6, -3.0f64..3.0),
                                     tx in -0.5f64..0.5, tz in 4.0f64..9.0) {
        let cam = CameraIntrinsics::centered(40.0, 64);
        if let Ok(img) = rasterize_box_edges(&PoseRT::from_euler(yaw, pitch, roll, [tx, 0.0, tz]), &cam, BOX_HALF_EXTENTS, (64, 64), &EDGE_COLORS) {
            for c in img.colors() {
                prop_assert!(c == [0, 0, 0] || EDGE_COLORS.contains(&c));
            }
        }
    }

    #[test]
    fn doubling_depth_halves_offset(x in -2.0f64..2.0, y in -2.0f64..2.0, z in 1.0f64..10.0) {
        let cam = CameraIntrinsics::new(100.0, 100.0, 64.0, 64.0).unwrap();
        let p = perspective_project(&[[x, y, z], [x, y, 2.0 * z]], &cam).unwrap();
        prop_assert!(((p[0][0] - 64.0) - 2.0 * (p[1][0] - 64.0)).abs() < 1e-9);
        prop_assert!(((p[0][1] - 64.0) - 2.0 * (p[1][1] - 64.0)).abs() < 1e-9);
    }

    #[test]
    fn blur_preserves_mean_of_interior_patches(seed in any::<u64>(), lo in 0.0f64..2.0, span in 0.0f64..2.0) {
        // constant 4-pixel border, varied interior
        let data: Vec<f64> = (0..256)
            .map(|i| {
                let (y, x) = (i / 16, i % 16);
                if (4..12).contains(&y) && (4..12).contains(&x) { ((i * 37 + 11) % 97) as f64 / 96.0 } else { 0.4 }
            })
            .collect();
        let patch = Image::new(1, 16, 16, data).unwrap();
        let out = random_blur_augment(&patch, (lo, lo + span), seed);
        prop_assert!((out.mean() - patch.mean()).abs() <= 1.0 / 255.0);
        prop_assert_eq!(out, random_blur_augment(&patch, (lo, lo + span), seed));
    }

    #[test]
    fn encoder_output_is_unit_norm(seed in any::<u64>(), v in prop::collection::vec(0.0f64..1.0, 256)) {
        prop_assume!(v.iter().any(|&x| x > 0.0));
        let patch = Image::new(1, 16, 16, v).unwrap();
        let e = toy_patch_encoder(&patch, 32, seed);
        prop_assert!((e.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn constant_patch_survives_blur() {
    let patch = Image::filled(1, 16, 16, 0.3);
    for r in 0..4 {
        assert!(box_blur(&patch, r).data.iter().all(|v| (v - 0.3).abs() < 1e-15));
    }
}
