//! Projects the head box for a few poses and writes the edge rasters as PNG.

use skattn::pose::{
    projected_corner_pixels, rasterize_box_edges, CameraIntrinsics, PoseRT, BOX_HALF_EXTENTS, EDGE_COLORS,
};
use skattn::Result;

fn main() -> Result<()> {
    let out = std::env::temp_dir().join("skattn-pose");
    std::fs::create_dir_all(&out)?;
    let cam = CameraIntrinsics::centered(40.0, 64);
    let poses = [
        ("front", PoseRT::identity_at([0.0, 0.0, 5.0])),
        ("roll", PoseRT::from_euler(0.0, 0.0, 0.5, [0.0, 0.0, 5.0])),
        ("yaw", PoseRT::from_euler(0.6, 0.0, 0.0, [0.4, 0.0, 5.0])),
        ("far", PoseRT::identity_at([0.0, 0.0, 9.0])),
    ];
    for (name, pose) in poses {
        let corners = projected_corner_pixels(&pose, &cam, BOX_HALF_EXTENTS)?;
        let img = rasterize_box_edges(&pose, &cam, BOX_HALF_EXTENTS, (64, 64), &EDGE_COLORS)?;
        let path = out.join(format!("{name}.png"));
        img.save_png(&path)?;
        println!("{name}: corners {corners:?} -> {}", path.display());
    }
    Ok(())
}
