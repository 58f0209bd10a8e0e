//! Procedural talking-head data: an ellipse face whose pose follows a
//! [`PoseRT`] and whose eyes and mouth open with the first two expression
//! coefficients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::FrameCondition;
use crate::config::{DataConfig, ModelConfig};
use crate::error::Result;
use crate::imaging::Image;
use crate::pose::{
    random_blur_augment, rasterize_box_edges, CameraIntrinsics, ExpressionCoefficients, PatchEmbeddings, PatchEncoder,
    PoseImage, PoseRT, NUM_COEFFICIENTS, PATCH_SIDE,
};
use crate::tensor::Tensor;

/// Coefficient that closes the eyes.
pub const BLINK: usize = 0;
/// Coefficient that opens the mouth.
pub const JAW_OPEN: usize = 1;

const SUPERSAMPLE: usize = 4;
const EYE_CENTERS: [(f64, f64); 2] = [(-0.4, -0.3), (0.4, -0.3)];
const EYE_HALF: (f64, f64) = (0.26, 0.18);
const MOUTH_CENTER: (f64, f64) = (0.0, 0.55);
const MOUTH_HALF_WIDTH: f64 = 0.42;
const MOUTH_HALF_HEIGHT: (f64, f64) = (0.04, 0.3);

/// Per-subject appearance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    pub skin: [f64; 3],
    pub eye: [f64; 3],
    pub mouth: [f64; 3],
    pub background: [f64; 3],
    /// Head ellipse half axes in head units.
    pub axes: (f64, f64),
}

impl Identity {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let skin = [rng.gen_range(0.55..0.95), rng.gen_range(0.4..0.8), rng.gen_range(0.3..0.7)];
        let eye = [rng.gen_range(0.0..0.25), rng.gen_range(0.0..0.25), rng.gen_range(0.05..0.4)];
        let mouth = [rng.gen_range(0.45..0.8), rng.gen_range(0.0..0.2), rng.gen_range(0.05..0.25)];
        let background = [rng.gen_range(0.0..0.25); 3];
        Self { skin, eye, mouth, background, axes: (rng.gen_range(0.8..0.95), rng.gen_range(1.1..1.3)) }
    }
}

/// What a head-frame point shows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Region {
    Outside,
    Skin,
    Eye,
    Mouth,
}

fn eye_half_height(coeffs: &[f64]) -> f64 {
    EYE_HALF.1 * (1.0 - coeffs[BLINK])
}

fn mouth_half_height(coeffs: &[f64]) -> f64 {
    MOUTH_HALF_HEIGHT.0 + (MOUTH_HALF_HEIGHT.1 - MOUTH_HALF_HEIGHT.0) * coeffs[JAW_OPEN]
}

fn inside_ellipse(x: f64, y: f64, c: (f64, f64), a: f64, b: f64) -> bool {
    if a <= 0.0 || b <= 0.0 {
        return false;
    }
    let (dx, dy) = ((x - c.0) / a, (y - c.1) / b);
    dx * dx + dy * dy <= 1.0
}

fn classify(id: &Identity, coeffs: &[f64], x: f64, y: f64) -> Region {
    if !inside_ellipse(x, y, (0.0, 0.0), id.axes.0, id.axes.1) {
        return Region::Outside;
    }
    let eh = eye_half_height(coeffs);
    if EYE_CENTERS.iter().any(|&c| inside_ellipse(x, y, c, EYE_HALF.0, eh)) {
        return Region::Eye;
    }
    if inside_ellipse(x, y, MOUTH_CENTER, MOUTH_HALF_WIDTH, mouth_half_height(coeffs)) {
        return Region::Mouth;
    }
    Region::Skin
}

/// Whether a head-frame point can ever show an eye or mouth.
fn in_expression_region(x: f64, y: f64) -> bool {
    EYE_CENTERS.iter().any(|&c| inside_ellipse(x, y, c, EYE_HALF.0, EYE_HALF.1))
        || inside_ellipse(x, y, MOUTH_CENTER, MOUTH_HALF_WIDTH, MOUTH_HALF_HEIGHT.1)
}

fn shade(id: &Identity, region: Region) -> [f64; 4] {
    let (rgb, matte) = match region {
        Region::Outside => (id.background, 0.0),
        Region::Skin => (id.skin, 1.0),
        Region::Eye => (id.eye, 1.0),
        Region::Mouth => (id.mouth, 1.0),
    };
    [rgb[0], rgb[1], rgb[2], matte]
}

/// Head-frame point seen through raster coordinate `(u, v)`, if the ray
/// meets the head plane in front of the camera.
fn unproject(pose: &PoseRT, cam: &CameraIntrinsics, u: f64, v: f64) -> Option<(f64, f64)> {
    let d = [(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0];
    let r = &pose.rotation;
    let t = &pose.translation;
    let n = [r[0][2], r[1][2], r[2][2]];
    let nd = n[0] * d[0] + n[1] * d[1] + n[2] * d[2];
    if nd.abs() < 1e-12 {
        return None;
    }
    let s = (n[0] * t[0] + n[1] * t[1] + n[2] * t[2]) / nd;
    if s <= 0.0 {
        return None;
    }
    let p = [s * d[0] - t[0], s * d[1] - t[1], s * d[2] - t[2]];
    // Rᵀ p
    let x = r[0][0] * p[0] + r[1][0] * p[1] + r[2][0] * p[2];
    let y = r[0][1] * p[0] + r[1][1] * p[1] + r[2][1] * p[2];
    Some((x, y))
}

/// Renders a `[4, size, size]` image (RGB + head matte). `cam` is given in
/// pose-raster pixels; `raster_scale` raster pixels make one output pixel.
pub fn render_face(
    id: &Identity,
    pose: &PoseRT,
    coeffs: &ExpressionCoefficients,
    cam: &CameraIntrinsics,
    size: usize,
    raster_scale: f64,
) -> Image {
    let c = coeffs.values();
    let mut img = Image::filled(4, size, size, 0.0);
    let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for py in 0..size {
        for px in 0..size {
            let mut acc = [0.0; 4];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let fx = (px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64) * raster_scale - 0.5;
                    let fy = (py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64) * raster_scale - 0.5;
                    let region = match unproject(pose, cam, fx, fy) {
                        Some((x, y)) => classify(id, c, x, y),
                        None => Region::Outside,
                    };
                    let s = shade(id, region);
                    for k in 0..4 {
                        acc[k] += s[k];
                    }
                }
            }
            for k in 0..4 {
                img.set(k, py, px, acc[k] / n);
            }
        }
    }
    img
}

/// Binary `[1, size, size]` mask of pixels that any expression can touch,
/// dilated by one pixel.
pub fn region_mask(pose: &PoseRT, cam: &CameraIntrinsics, size: usize, raster_scale: f64) -> Tensor {
    let mut hit = vec![false; size * size];
    for py in 0..size {
        for px in 0..size {
            'sub: for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let fx = (px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64) * raster_scale - 0.5;
                    let fy = (py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64) * raster_scale - 0.5;
                    if let Some((x, y)) = unproject(pose, cam, fx, fy) {
                        if in_expression_region(x, y) {
                            hit[py * size + px] = true;
                            break 'sub;
                        }
                    }
                }
            }
        }
    }
    let mut out = vec![0.0; size * size];
    for y in 0..size as i64 {
        for x in 0..size as i64 {
            let near = (-1..=1).any(|dy| {
                (-1..=1).any(|dx| {
                    let (yy, xx) = (y + dy, x + dx);
                    yy >= 0 && xx >= 0 && yy < size as i64 && xx < size as i64 && hit[(yy * size as i64 + xx) as usize]
                })
            });
            if near {
                out[(y * size as i64 + x) as usize] = 1.0;
            }
        }
    }
    Tensor::new(&[1, size, size], out).expect("mask shape")
}

/// Head-frame window rendered to a square RGB patch.
fn render_patch(id: &Identity, coeffs: &ExpressionCoefficients, center: (f64, f64), half: f64) -> Image {
    let c = coeffs.values();
    let side = PATCH_SIDE;
    let mut img = Image::filled(3, side, side, 0.0);
    for py in 0..side {
        for px in 0..side {
            let x = center.0 + half * (2.0 * (px as f64 + 0.5) / side as f64 - 1.0);
            let y = center.1 + half * (2.0 * (py as f64 + 0.5) / side as f64 - 1.0);
            let s = shade(id, classify(id, c, x, y));
            for k in 0..3 {
                img.set(k, py, px, s[k]);
            }
        }
    }
    img
}

/// Left-eye crop in the head frame, independent of pose.
pub fn eye_patch(id: &Identity, coeffs: &ExpressionCoefficients) -> Image {
    render_patch(id, coeffs, EYE_CENTERS[0], 0.4)
}

pub fn mouth_patch(id: &Identity, coeffs: &ExpressionCoefficients) -> Image {
    render_patch(id, coeffs, MOUTH_CENTER, 0.5)
}

/// One reference/driving pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub identity: Identity,
    pub reference: Image,
    pub driving: Image,
    pub pose: PoseRT,
    pub coeffs: ExpressionCoefficients,
    pub pose_image: PoseImage,
    pub eye_patch: Image,
    pub mouth_patch: Image,
    /// `[1, s, s]` eye/mouth mask at latent resolution.
    pub mask: Tensor,
}

impl SynthSample {
    /// Frame condition with patches optionally blurred by `blur = (range, seed)`.
    pub fn condition(&self, encoder: &PatchEncoder, blur: Option<((f64, f64), u64)>) -> FrameCondition {
        let (eye, mouth) = match blur {
            Some((range, seed)) => (
                random_blur_augment(&self.eye_patch, range, seed),
                random_blur_augment(&self.mouth_patch, range, seed ^ 0x9e37_79b9),
            ),
            None => (self.eye_patch.clone(), self.mouth_patch.clone()),
        };
        FrameCondition {
            pose: self.pose_image.clone(),
            coeffs: self.coeffs.clone(),
            patches: PatchEmbeddings::from_patches(encoder, &eye, &mouth),
        }
    }
}

/// Renderer bound to one model and data configuration.
#[derive(Clone, Debug)]
pub struct Synth {
    pub model: ModelConfig,
    pub data: DataConfig,
}

impl Synth {
    pub fn new(model: &ModelConfig, data: &DataConfig) -> Self {
        Self { model: model.clone(), data: data.clone() }
    }

    fn raster_scale(&self) -> f64 {
        self.model.pose_image_size as f64 / self.model.latent_size as f64
    }

    pub fn canonical_pose(&self) -> PoseRT {
        let z = 0.5 * (self.data.depth_range.0 + self.data.depth_range.1);
        PoseRT::identity_at([0.0, 0.0, z])
    }

    pub fn random_pose<R: Rng + ?Sized>(&self, rng: &mut R) -> PoseRT {
        let d = &self.data;
        let sym = |rng: &mut R, m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        let roll = sym(rng, d.max_roll);
        let yaw = sym(rng, d.max_yaw);
        let pitch = sym(rng, d.max_pitch);
        let tx = sym(rng, d.max_shift);
        let ty = sym(rng, d.max_shift);
        let tz = rng.gen_range(d.depth_range.0..=d.depth_range.1);
        PoseRT::from_euler(yaw, pitch, roll, [tx, ty, tz])
    }

    /// First `active_coefficients` drawn uniformly in `[0,1]`, the rest zero.
    pub fn random_coeffs<R: Rng + ?Sized>(&self, rng: &mut R) -> ExpressionCoefficients {
        let mut v = vec![0.0; NUM_COEFFICIENTS];
        for x in v.iter_mut().take(self.data.active_coefficients) {
            *x = rng.gen_range(0.0..=1.0);
        }
        ExpressionCoefficients::new(v).expect("coefficients in range")
    }

    pub fn render(&self, id: &Identity, pose: &PoseRT, coeffs: &ExpressionCoefficients) -> Image {
        render_face(id, pose, coeffs, &self.model.camera(), self.model.latent_size, self.raster_scale())
    }

    pub fn pose_image(&self, pose: &PoseRT) -> Result<PoseImage> {
        let s = self.model.pose_image_size;
        rasterize_box_edges(pose, &self.model.camera(), self.model.box_half_extents, (s, s), &self.model.edge_colors)
    }

    pub fn reference_image(&self, id: &Identity) -> Image {
        self.render(id, &self.canonical_pose(), &ExpressionCoefficients::neutral())
    }

    /// Driving frame for `id` at `pose` with `coeffs`.
    pub fn sample(&self, id: &Identity, pose: PoseRT, coeffs: ExpressionCoefficients) -> Result<SynthSample> {
        Ok(SynthSample {
            identity: id.clone(),
            reference: self.reference_image(id),
            driving: self.render(id, &pose, &coeffs),
            pose_image: self.pose_image(&pose)?,
            eye_patch: eye_patch(id, &coeffs),
            mouth_patch: mouth_patch(id, &coeffs),
            mask: region_mask(&pose, &self.model.camera(), self.model.latent_size, self.raster_scale()),
            pose,
            coeffs,
        })
    }

    /// `n` independent subjects, one driving frame each.
    pub fn dataset(&self, n: usize, seed: u64) -> Result<Vec<SynthSample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let id = Identity::random(&mut rng);
                let pose = self.random_pose(&mut rng);
                let coeffs = self.random_coeffs(&mut rng);
                self.sample(&id, pose, coeffs)
            })
            .collect()
    }

    /// A smooth `len`-frame driving sequence for one subject: pose and
    /// expression interpolate between two random keyframes.
    pub fn clip(&self, len: usize, seed: u64) -> Result<Vec<SynthSample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let id = Identity::random(&mut rng);
        let key = |rng: &mut ChaCha8Rng| {
            let d = &self.data;
            let sym = |rng: &mut ChaCha8Rng, m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
            let e = [sym(rng, d.max_yaw), sym(rng, d.max_pitch), sym(rng, d.max_roll)];
            let t = [sym(rng, d.max_shift), sym(rng, d.max_shift), rng.gen_range(d.depth_range.0..=d.depth_range.1)];
            (e, t, self.random_coeffs(rng))
        };
        let (e0, t0, c0) = key(&mut rng);
        let (e1, t1, c1) = key(&mut rng);
        (0..len)
            .map(|i| {
                let s = if len > 1 { i as f64 / (len - 1) as f64 } else { 0.0 };
                let lerp = |a: f64, b: f64| a + s * (b - a);
                let pose = PoseRT::from_euler(
                    lerp(e0[0], e1[0]),
                    lerp(e0[1], e1[1]),
                    lerp(e0[2], e1[2]),
                    [lerp(t0[0], t1[0]), lerp(t0[1], t1[1]), lerp(t0[2], t1[2])],
                );
                let coeffs: Vec<f64> = c0.values().iter().zip(c1.values()).map(|(&a, &b)| lerp(a, b)).collect();
                self.sample(&id, pose, ExpressionCoefficients::new(coeffs)?)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth() -> Synth {
        Synth::new(&ModelConfig::default(), &DataConfig::default())
    }

    #[test]
    fn deterministic() {
        let s = synth();
        assert_eq!(s.dataset(3, 11).unwrap(), s.dataset(3, 11).unwrap());
    }

    #[test]
    fn head_visible_and_masked() {
        let s = synth();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let id = Identity::random(&mut rng);
        let img = s.reference_image(&id);
        let matte: f64 = img.data[3 * 256..].iter().sum();
        assert!(matte > 30.0 && matte < 200.0, "head area {matte}");
        let m = region_mask(&s.canonical_pose(), &s.model.camera(), 16, 2.0);
        assert!(m.sum() > 4.0 && m.sum() < 200.0);
    }
}
