//! Pose-raster fixtures: a fixed set of poses rendered to PNG with a JSON
//! sidecar describing the pose, camera and projected corners.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::pose::{
    projected_corner_pixels, rasterize_box_edges, CameraIntrinsics, PoseImage, PoseRT, BOX_HALF_EXTENTS, EDGE_COLORS,
};

pub const GOLDEN_SIZE: usize = 64;
pub const GOLDEN_FOCAL: f64 = 40.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoldenCase {
    pub name: String,
    pub pose: PoseRT,
    pub camera: CameraIntrinsics,
    pub size: usize,
    pub half_extents: (f64, f64),
    pub corners: [(i64, i64); 4],
}

impl GoldenCase {
    fn new(name: &str, pose: PoseRT) -> Result<Self> {
        let camera = CameraIntrinsics::centered(GOLDEN_FOCAL, GOLDEN_SIZE);
        let corners = projected_corner_pixels(&pose, &camera, BOX_HALF_EXTENTS)?;
        Ok(Self { name: name.to_string(), pose, camera, size: GOLDEN_SIZE, half_extents: BOX_HALF_EXTENTS, corners })
    }

    pub fn render(&self) -> Result<PoseImage> {
        rasterize_box_edges(&self.pose, &self.camera, self.half_extents, (self.size, self.size), &EDGE_COLORS)
    }

    pub fn png_path(&self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.png", self.name))
    }

    pub fn json_path(&self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.json", self.name))
    }
}

/// Identity pose plus one rotation about each axis.
pub fn golden_cases() -> Result<Vec<GoldenCase>> {
    let t = [0.0, 0.0, 5.0];
    Ok(vec![
        GoldenCase::new("identity", PoseRT::identity_at(t))?,
        GoldenCase::new("roll", PoseRT::from_euler(0.0, 0.0, 0.4, t))?,
        GoldenCase::new("yaw", PoseRT::from_euler(0.5, 0.0, 0.0, [0.3, 0.0, 5.0]))?,
        GoldenCase::new("pitch", PoseRT::from_euler(0.0, -0.45, 0.15, [0.0, -0.2, 5.5]))?,
    ])
}

pub fn write_golden(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for case in golden_cases()? {
        case.render()?.save_png(case.png_path(dir))?;
        std::fs::write(case.json_path(dir), serde_json::to_string_pretty(&case)?)?;
    }
    Ok(())
}

/// Outcome of comparing one case with its fixture.
#[derive(Clone, Debug, PartialEq)]
pub struct GoldenCheck {
    pub name: String,
    pub pixels_match: bool,
    pub sidecar_match: bool,
}

pub fn check_golden(dir: &Path) -> Result<Vec<GoldenCheck>> {
    golden_cases()?
        .into_iter()
        .map(|case| {
            let stored = PoseImage::load_png(case.png_path(dir))?;
            let sidecar: GoldenCase = serde_json::from_str(&std::fs::read_to_string(case.json_path(dir))?)?;
            Ok(GoldenCheck { pixels_match: stored == case.render()?, sidecar_match: sidecar == case, name: case.name })
        })
        .collect()
}
