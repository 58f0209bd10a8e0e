//! Driving conditions: the head-pose box raster and the expression tokens.
//!
//! The head pose is encoded by drawing a planar rectangle, posed by the head
//! rotation/translation and perspective-projected, with each edge in its own
//! colour. Expression is a 3-token sequence built from 51 blendshape
//! coefficients plus embeddings of blurred eye and mouth patches.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::NodeId;
use crate::imaging::Image;
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;

pub const NUM_COEFFICIENTS: usize = 51;
const ROTATION_TOL: f64 = 1e-9;

/// Head-frame half extents `(a, b)` of the canonical box.
pub const BOX_HALF_EXTENTS: (f64, f64) = (1.0, 1.4);

/// Edge colours in drawing order: top, right, bottom, left.
pub const EDGE_COLORS: [[u8; 3]; 4] = [[255, 0, 0], [0, 255, 0], [0, 0, 255], [255, 255, 0]];

/// Rigid head transform in camera space (x right, y down, z forward).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRT {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl PoseRT {
    /// Validates `RᵀR = I` and `det R = +1` to 1e-9.
    pub fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        let p = Self { rotation, translation };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > ROTATION_TOL {
                    return Err(Error::InvalidRotation(format!("RᵀR[{i}][{j}] = {dot}")));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::InvalidRotation(format!("det R = {det}")));
        }
        Ok(())
    }

    pub fn identity_at(translation: [f64; 3]) -> Self {
        Self { rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], translation }
    }

    /// `R = Rz(roll) · Ry(yaw) · Rx(pitch)`, angles in radians.
    pub fn from_euler(yaw: f64, pitch: f64, roll: f64, translation: [f64; 3]) -> Self {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let (sr, cr) = roll.sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
        let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let rz = [[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]];
        let rotation = mat3_mul(&rz, &mat3_mul(&ry, &rx));
        Self { rotation, translation }
    }

    /// In-plane rotation angle (about the optical axis).
    pub fn roll(&self) -> f64 {
        self.rotation[1][0].atan2(self.rotation[0][0])
    }
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 || !fx.is_finite() || !fy.is_finite() {
            return Err(Error::InvalidConfig(format!("focal lengths must be positive, got ({fx}, {fy})")));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Symmetric camera centred on a `size × size` image.
    pub fn centered(focal: f64, size: usize) -> Self {
        Self { fx: focal, fy: focal, cx: size as f64 / 2.0, cy: size as f64 / 2.0 }
    }
}

/// `R·p + t` for every point.
pub fn rt_transform(points: &[[f64; 3]], pose: &PoseRT) -> Result<Vec<[f64; 3]>> {
    pose.validate()?;
    let (r, t) = (&pose.rotation, &pose.translation);
    Ok(points
        .iter()
        .map(|p| {
            let mut q = [0.0; 3];
            for i in 0..3 {
                q[i] = r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + t[i];
            }
            q
        })
        .collect())
}

/// `u = fx·x/z + cx`, `v = fy·y/z + cy`; every `z` must be positive.
pub fn perspective_project(points: &[[f64; 3]], cam: &CameraIntrinsics) -> Result<Vec<[f64; 2]>> {
    points
        .iter()
        .enumerate()
        .map(|(index, p)| {
            if p[2] <= 0.0 {
                return Err(Error::BehindCamera { index, z: p[2] });
            }
            Ok([cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy])
        })
        .collect()
}

/// Rasterized pose box, 8-bit RGB, row-major `[y][x][rgb]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoseImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl PoseImage {
    pub fn black(width: usize, height: usize) -> Self {
        Self { width, height, rgb: vec![0; width * height * 3] }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return;
        }
        let i = (y as usize * self.width + x as usize) * 3;
        self.rgb[i..i + 3].copy_from_slice(&c);
    }

    /// Distinct non-black colours present.
    pub fn colors(&self) -> Vec<[u8; 3]> {
        let mut v: Vec<[u8; 3]> = self.rgb.chunks(3).map(|c| [c[0], c[1], c[2]]).filter(|c| *c != [0, 0, 0]).collect();
        v.sort();
        v.dedup();
        v
    }

    /// Planar `[3,H,W]` tensor scaled to `[0,1]`.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.width * self.height;
        let mut data = vec![0.0; 3 * hw];
        for (p, px) in self.rgb.chunks(3).enumerate() {
            for c in 0..3 {
                data[c * hw + p] = px[c] as f64 / 255.0;
            }
        }
        Tensor::new(&[3, self.height, self.width], data).expect("pose image shape")
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        image::save_buffer(path, &self.rgb, self.width as u32, self.height as u32, image::ExtendedColorType::Rgb8)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Ok(Self { width: img.width() as usize, height: img.height() as usize, rgb: img.into_raw() })
    }
}

/// Integer midpoint line from `a` to `b` inclusive.
pub fn line_pixels(a: (i64, i64), b: (i64, i64)) -> Vec<(i64, i64)> {
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx - dy) as usize + 1);
    loop {
        out.push((x, y));
        if x == b.0 && y == b.1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    out
}

/// Head-frame corners of the canonical box in drawing order: top-left,
/// top-right, bottom-right, bottom-left (y grows downward).
pub fn box_corners(half_extents: (f64, f64)) -> [[f64; 3]; 4] {
    let (a, b) = half_extents;
    [[-a, -b, 0.0], [a, -b, 0.0], [a, b, 0.0], [-a, b, 0.0]]
}

/// Pixel coordinates of the four projected corners (rounded to nearest).
pub fn projected_corner_pixels(
    pose: &PoseRT,
    cam: &CameraIntrinsics,
    half_extents: (f64, f64),
) -> Result<[(i64, i64); 4]> {
    let world = rt_transform(&box_corners(half_extents), pose)?;
    let uv = perspective_project(&world, cam)?;
    let mut px = [(0i64, 0i64); 4];
    for (i, p) in uv.iter().enumerate() {
        px[i] = (p[0].round() as i64, p[1].round() as i64);
    }
    for i in 0..4 {
        for j in i + 1..4 {
            if px[i] == px[j] {
                return Err(Error::DegenerateProjection(format!("corners {i} and {j} both land on {:?}", px[i])));
            }
        }
    }
    Ok(px)
}

/// Draws the posed box: 1-pixel edges over black, order top, right, bottom,
/// left, later edges overwriting shared corner pixels. Off-image pixels are
/// clipped.
pub fn rasterize_box_edges(
    pose: &PoseRT,
    cam: &CameraIntrinsics,
    half_extents: (f64, f64),
    image_size: (usize, usize),
    edge_colors: &[[u8; 3]; 4],
) -> Result<PoseImage> {
    let px = projected_corner_pixels(pose, cam, half_extents)?;
    let mut img = PoseImage::black(image_size.0, image_size.1);
    for e in 0..4 {
        for (x, y) in line_pixels(px[e], px[(e + 1) % 4]) {
            img.put(x, y, edge_colors[e]);
        }
    }
    Ok(img)
}

/// Box blur with an integer radius drawn uniformly from `strength` by a
/// seeded generator. Borders replicate the edge pixel.
pub fn random_blur_augment(patch: &Image, strength: (f64, f64), seed: u64) -> Image {
    let (lo, hi) = strength;
    assert!(lo >= 0.0 && lo <= hi, "blur strength must satisfy 0 <= min <= max");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    box_blur(patch, r.round() as usize)
}

/// Separable box filter of radius `r` with clamped borders.
pub fn box_blur(img: &Image, r: usize) -> Image {
    if r == 0 {
        return img.clone();
    }
    let (h, w) = (img.height, img.width);
    let norm = (2 * r + 1) as f64;
    let mut tmp = img.clone();
    for c in 0..img.channels {
        for y in 0..h {
            for x in 0..w {
                let s: f64 = (-(r as i64)..=r as i64)
                    .map(|d| img.get(c, y, (x as i64 + d).clamp(0, w as i64 - 1) as usize))
                    .sum();
                tmp.set(c, y, x, s / norm);
            }
        }
    }
    let mut out = tmp.clone();
    for c in 0..img.channels {
        for y in 0..h {
            for x in 0..w {
                let s: f64 = (-(r as i64)..=r as i64)
                    .map(|d| tmp.get(c, (y as i64 + d).clamp(0, h as i64 - 1) as usize, x))
                    .sum();
                out.set(c, y, x, s / norm);
            }
        }
    }
    out
}

/// Side of the grayscale grid the patch encoder sees.
pub const PATCH_SIDE: usize = 16;

/// Fixed random projection of a 16×16 grayscale patch, L2-normalized.
/// Stands in for a pretrained image encoder.
#[derive(Clone, Debug)]
pub struct PatchEncoder {
    pub dim: usize,
    projection: Tensor,
}

impl PatchEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = PATCH_SIDE * PATCH_SIDE;
        Self { dim, projection: Tensor::randn(&[dim, n], 1.0 / (n as f64).sqrt(), &mut rng) }
    }

    /// Embedding of `patch`; an all-zero patch maps to the zero vector.
    pub fn encode(&self, patch: &Image) -> Vec<f64> {
        let gray = patch.to_gray().resize(PATCH_SIDE, PATCH_SIDE);
        let n = PATCH_SIDE * PATCH_SIDE;
        let p = self.projection.data();
        let mut out: Vec<f64> =
            (0..self.dim).map(|i| crate::kernels::dot(&p[i * n..(i + 1) * n], &gray.data)).collect();
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            out.iter_mut().for_each(|v| *v /= norm);
        }
        out
    }
}

/// Convenience wrapper matching the free-function form.
pub fn toy_patch_encoder(patch: &Image, dim: usize, seed: u64) -> Vec<f64> {
    PatchEncoder::new(dim, seed).encode(patch)
}

/// 51 blendshape coefficients in `[0,1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpressionCoefficients(Vec<f64>);

impl ExpressionCoefficients {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != NUM_COEFFICIENTS {
            return Err(shape_err(
                "expression_coefficients",
                format!("expected {NUM_COEFFICIENTS}, got {}", values.len()),
            ));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig("expression coefficients must lie in [0,1]".into()));
        }
        Ok(Self(values))
    }

    pub fn neutral() -> Self {
        Self(vec![0.0; NUM_COEFFICIENTS])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Learned maps of the expression branch, stored under `{prefix}.*`.
#[derive(Clone, Debug)]
pub struct ExpressionProjection {
    pub prefix: String,
    pub dim: usize,
}

impl ExpressionProjection {
    pub fn new(prefix: impl Into<String>, dim: usize) -> Self {
        Self { prefix: prefix.into(), dim }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let d = self.dim;
        store.init_normal(format!("{}.coef.w", self.prefix), &[NUM_COEFFICIENTS, d], NUM_COEFFICIENTS, 1.0, rng);
        store.init_zeros(format!("{}.coef.b", self.prefix), &[d]);
        for part in ["eye", "mouth"] {
            store.init_normal(format!("{}.{part}.w", self.prefix), &[d, d], d, 1.0, rng);
            store.init_zeros(format!("{}.{part}.b", self.prefix), &[d]);
        }
    }
}

/// Patch embeddings computed outside the graph (the encoder is fixed).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbeddings {
    pub eye: Vec<f64>,
    pub mouth: Vec<f64>,
}

impl PatchEmbeddings {
    pub fn from_patches(encoder: &PatchEncoder, eye: &Image, mouth: &Image) -> Self {
        Self { eye: encoder.encode(eye), mouth: encoder.encode(mouth) }
    }
}

/// Builds the `[3, D]` expression token sequence: coefficient token, eye
/// token, mouth token.
pub fn assemble_expression_features(
    ctx: &mut Ctx,
    coeffs: &ExpressionCoefficients,
    patches: &PatchEmbeddings,
    proj: &ExpressionProjection,
) -> Result<NodeId> {
    let d = proj.dim;
    if patches.eye.len() != d || patches.mouth.len() != d {
        return Err(shape_err(
            "assemble_expression_features",
            format!("patch embeddings {}/{} vs width {d}", patches.eye.len(), patches.mouth.len()),
        ));
    }
    let c = ctx.g.constant(Tensor::new(&[1, NUM_COEFFICIENTS], coeffs.values().to_vec())?);
    let p = &proj.prefix;
    let coef_tok = ctx.linear(c, &format!("{p}.coef.w"), Some(&format!("{p}.coef.b")))?;
    let eye = ctx.g.constant(Tensor::new(&[1, d], patches.eye.clone())?);
    let eye_tok = ctx.linear(eye, &format!("{p}.eye.w"), Some(&format!("{p}.eye.b")))?;
    let mouth = ctx.g.constant(Tensor::new(&[1, d], patches.mouth.clone())?);
    let mouth_tok = ctx.linear(mouth, &format!("{p}.mouth.w"), Some(&format!("{p}.mouth.b")))?;
    ctx.g.concat(&[coef_tok, eye_tok, mouth_tok], 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::params::Trainable;

    #[test]
    fn rt_examples() {
        let p = [[1.0, 0.0, 0.0]];
        assert_eq!(rt_transform(&p, &PoseRT::identity_at([0.0; 3])).unwrap(), p.to_vec());
        assert_eq!(rt_transform(&p, &PoseRT::identity_at([0.0, 0.0, 5.0])).unwrap(), vec![[1.0, 0.0, 5.0]]);
        let rz = PoseRT::from_euler(0.0, 0.0, std::f64::consts::FRAC_PI_2, [0.0; 3]);
        let q = rt_transform(&p, &rz).unwrap()[0];
        assert!((q[0]).abs() < 1e-12 && (q[1] - 1.0).abs() < 1e-12 && q[2].abs() < 1e-12);
    }

    #[test]
    fn invalid_rotation_rejected() {
        let bad = PoseRT { rotation: [[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], translation: [0.0; 3] };
        assert!(matches!(rt_transform(&[[0.0; 3]], &bad), Err(Error::InvalidRotation(_))));
        let reflect = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(PoseRT::new(reflect, [0.0; 3]).is_err());
    }

    #[test]
    fn projection_examples() {
        let cam = CameraIntrinsics::new(100.0, 100.0, 64.0, 64.0).unwrap();
        assert_eq!(perspective_project(&[[0.0, 0.0, 3.0]], &cam).unwrap(), vec![[64.0, 64.0]]);
        assert_eq!(perspective_project(&[[1.0, 0.0, 2.0]], &cam).unwrap(), vec![[114.0, 64.0]]);
        let near = perspective_project(&[[1.0, 0.5, 2.0]], &cam).unwrap()[0];
        let far = perspective_project(&[[1.0, 0.5, 4.0]], &cam).unwrap()[0];
        assert!(((near[0] - 64.0) / 2.0 - (far[0] - 64.0)).abs() < 1e-12);
        assert!(matches!(perspective_project(&[[0.0, 0.0, 0.0]], &cam), Err(Error::BehindCamera { index: 0, .. })));
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn line_endpoints_and_connectivity() {
        let px = line_pixels((0, 0), (5, -3));
        assert_eq!(px.first(), Some(&(0, 0)));
        assert_eq!(px.last(), Some(&(5, -3)));
        for w in px.windows(2) {
            assert!((w[0].0 - w[1].0).abs() <= 1 && (w[0].1 - w[1].1).abs() <= 1);
        }
        assert_eq!(line_pixels((2, 2), (2, 2)), vec![(2, 2)]);
    }

    #[test]
    fn identity_box_is_centered_rectangle() {
        let cam = CameraIntrinsics::centered(40.0, 64);
        let img =
            rasterize_box_edges(&PoseRT::identity_at([0.0, 0.0, 5.0]), &cam, BOX_HALF_EXTENTS, (64, 64), &EDGE_COLORS)
                .unwrap();
        assert_eq!(img.colors().len(), 4);
        // top edge at v = 32 - 40*1.4/5 = 20.8 -> 21, left at u = 32 - 8 = 24
        assert_eq!(img.pixel(32, 21), EDGE_COLORS[0]);
        assert_eq!(img.pixel(24, 32), EDGE_COLORS[3]);
        assert_eq!(img.pixel(32, 32), [0, 0, 0]);
        // the top-left corner is shared by left (drawn last) and top
        assert_eq!(img.pixel(24, 21), EDGE_COLORS[3]);
    }

    #[test]
    fn degenerate_box() {
        let cam = CameraIntrinsics::centered(1.0, 8);
        let far = PoseRT::identity_at([0.0, 0.0, 1000.0]);
        assert!(matches!(
            rasterize_box_edges(&far, &cam, BOX_HALF_EXTENTS, (8, 8), &EDGE_COLORS),
            Err(Error::DegenerateProjection(_))
        ));
    }

    #[test]
    fn blur_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..3 * 12 * 12).map(|_| rng.gen_range(0.0..1.0)).collect();
        let patch = Image::new(3, 12, 12, data).unwrap();
        assert_eq!(random_blur_augment(&patch, (0.0, 0.0), 5), patch);
        let flat = Image::filled(3, 12, 12, 0.4);
        let b = random_blur_augment(&flat, (1.0, 4.0), 9);
        assert!(b.data.iter().all(|&v| (v - 0.4).abs() < 1e-15));
        assert_eq!(random_blur_augment(&patch, (1.0, 3.0), 7), random_blur_augment(&patch, (1.0, 3.0), 7));
    }

    #[test]
    fn encoder_cases() {
        let enc = PatchEncoder::new(32, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let patch = Image::new(1, 16, 16, (0..256).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let e = enc.encode(&patch);
        assert!((e.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        assert!(enc.encode(&Image::filled(1, 16, 16, 0.0)).iter().all(|&v| v == 0.0));
        assert_eq!(toy_patch_encoder(&patch, 32, 11), e);
    }

    #[test]
    fn coefficients_validated() {
        assert!(ExpressionCoefficients::new(vec![0.0; 50]).is_err());
        assert!(ExpressionCoefficients::new(vec![1.5; 51]).is_err());
        assert!(ExpressionCoefficients::new(vec![0.5; 51]).is_ok());
    }

    #[test]
    fn expression_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let proj = ExpressionProjection::new("expr", 8);
        let mut store = ParamStore::new();
        proj.init(&mut store, &mut rng);
        let zeros = PatchEmbeddings { eye: vec![0.0; 8], mouth: vec![0.0; 8] };
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &store, Trainable::Nothing);
        let t = assemble_expression_features(&mut ctx, &ExpressionCoefficients::neutral(), &zeros, &proj).unwrap();
        assert_eq!(ctx.g.shape(t), &[3, 8]);
        assert!(ctx.g.value(t).data().iter().all(|&v| v == 0.0));
        let bad = PatchEmbeddings { eye: vec![0.0; 7], mouth: vec![0.0; 8] };
        assert!(assemble_expression_features(&mut ctx, &ExpressionCoefficients::neutral(), &bad, &proj).is_err());
    }
}
