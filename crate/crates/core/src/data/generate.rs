use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{template_hand_local, DataError, GenConfig, HandAnnotation, SceneSample};
use crate::geometry::{xyz_to_uvd, CameraIntrinsics, HandSide, JointSet3D, JointSetUVD, NUM_JOINTS};
use crate::hand_model::SkeletonTopology;
use crate::image::Image;

/// Horizontal band (fraction of the width) the wrist is placed in, per side.
const WRIST_U_RANGE: [[f64; 2]; 2] = [[0.2, 0.55], [0.45, 0.8]];
/// Vertical band for the wrist; fingers extend upward from it.
const WRIST_V_RANGE: [f64; 2] = [0.7, 0.95];
const BONE_INTENSITY: f32 = 0.6;
const DISTRACTOR_INTENSITY: f32 = 0.3;

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// `Rz(c) * Ry(b) * Rx(a)`, angles in radians.
fn rotation(a: f64, b: f64, c: f64) -> [[f64; 3]; 3] {
    let (sa, ca) = (libm::sin(a), libm::cos(a));
    let (sb, cb) = (libm::sin(b), libm::cos(b));
    let (sc, cc) = (libm::sin(c), libm::cos(c));
    [
        [cc * cb, cc * sb * sa - sc * ca, cc * sb * ca + sc * sa],
        [sc * cb, sc * sb * sa + cc * ca, sc * sb * ca - cc * sa],
        [-sb, cb * sa, cb * ca],
    ]
}

fn rotate(r: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
    [
        r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
        r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
        r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
    ]
}

fn place_hand(
    cfg: &GenConfig,
    cam: &CameraIntrinsics<f64>,
    side: HandSide,
    local: &[[f64; 3]; NUM_JOINTS],
    rng: &mut ChaCha8Rng,
) -> Result<HandAnnotation, DataError> {
    let scale = cfg.subject_scale_factor * uniform(rng, cfg.scale_jitter[0], cfg.scale_jitter[1]);
    let lim = cfg.rotation_jitter_deg.to_radians();
    let r = rotation(uniform(rng, -lim, lim), uniform(rng, -lim, lim), uniform(rng, -lim, lim));
    let mirror = if side == HandSide::Left { -1.0 } else { 1.0 };
    let offsets: Vec<[f64; 3]> = local
        .iter()
        .map(|p| rotate(&r, [mirror * scale * p[0], scale * p[1], scale * p[2]]))
        .collect();

    // Wrist depth range that keeps every joint inside the configured depth range.
    let oz_min = offsets.iter().map(|o| o[2]).fold(f64::INFINITY, f64::min);
    let oz_max = offsets.iter().map(|o| o[2]).fold(f64::NEG_INFINITY, f64::max);
    let (z_lo, z_hi) = (cfg.depth_range[0] - oz_min, cfg.depth_range[1] - oz_max);
    if !(z_lo <= z_hi) {
        return Err(DataError::Config(format!(
            "depth_range {:?} cannot hold a hand spanning {:.1} mm in depth",
            cfg.depth_range,
            oz_max - oz_min
        )));
    }
    let z = uniform(rng, z_lo, z_hi);
    let [u0, u1] = WRIST_U_RANGE[side.class_index()];
    let u = cam.width * uniform(rng, u0, u1);
    let v = cam.height * uniform(rng, WRIST_V_RANGE[0], WRIST_V_RANGE[1]);
    let wrist = [(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z];

    let mut joints = [[0.0; 3]; NUM_JOINTS];
    for (j, o) in joints.iter_mut().zip(&offsets) {
        *j = [wrist[0] + o[0], wrist[1] + o[1], wrist[2] + o[2]];
        // Guard against rounding just past the range ends.
        j[2] = j[2].clamp(cfg.depth_range[0], cfg.depth_range[1]);
    }
    let xyz = JointSet3D::new(joints)?;
    let uvd = xyz_to_uvd(&xyz, cam)?;
    Ok(HandAnnotation { side, uvd, xyz: Some(xyz) })
}

/// Distance from `p` to the segment `a`-`b`.
fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (qx * qx + qy * qy).sqrt()
}

/// Pixel rows/columns whose centers lie within `reach` of the box `lo..hi`.
fn pixel_span(lo: f64, hi: f64, reach: f64, n: usize) -> std::ops::Range<usize> {
    let start = (lo - reach - 0.5).floor().max(0.0);
    let end = (hi + reach - 0.5).ceil() + 1.0;
    let end = end.clamp(0.0, n as f64);
    if start >= end {
        return 0..0;
    }
    start as usize..end as usize
}

/// Single-channel intensity map of one hand: anti-aliased bones plus
/// Gaussian joint blobs, combined with `max`. Pixel `(r, c)` is sampled at
/// its center `(c + 0.5, r + 0.5)`.
fn render_hand(uvd: &JointSetUVD<f64>, topo: &SkeletonTopology, cfg: &GenConfig, h: usize, w: usize) -> Vec<f32> {
    let mut map = vec![0.0f32; h * w];
    let j = uvd.joints();
    let half = 0.5 * cfg.bone_width_px;
    for &(p, c) in topo.edges() {
        let (a, b) = ([j[p][0], j[p][1]], [j[c][0], j[c][1]]);
        let reach = half + 1.0;
        for r in pixel_span(a[1].min(b[1]), a[1].max(b[1]), reach, h) {
            for col in pixel_span(a[0].min(b[0]), a[0].max(b[0]), reach, w) {
                let d = segment_distance([col as f64 + 0.5, r as f64 + 0.5], a, b);
                let cover = (half + 0.5 - d).clamp(0.0, 1.0) as f32 * BONE_INTENSITY;
                let px = &mut map[r * w + col];
                *px = px.max(cover);
            }
        }
    }
    let sigma = cfg.joint_sigma_px;
    let reach = 4.0 * sigma;
    for q in j {
        for r in pixel_span(q[1], q[1], reach, h) {
            for col in pixel_span(q[0], q[0], reach, w) {
                let (dx, dy) = (col as f64 + 0.5 - q[0], r as f64 + 0.5 - q[1]);
                let val = libm::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma)) as f32;
                let px = &mut map[r * w + col];
                *px = px.max(val);
            }
        }
    }
    map
}

/// Channel 0 holds the left hand, channel 1 the right, channel 2 both.
fn render_scene(hands: &[HandAnnotation], topo: &SkeletonTopology, cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Image {
    let (h, w) = (cfg.image_height, cfg.image_width);
    let mut img = Image::zeros(h, w, 3);
    if cfg.distractor {
        let (hf, wf) = (h as f64, w as f64);
        let (x0, y0) = (uniform(rng, 0.0, 0.7 * wf), uniform(rng, 0.0, 0.7 * hf));
        let (x1, y1) = (x0 + uniform(rng, 0.15, 0.3) * wf, y0 + uniform(rng, 0.15, 0.3) * hf);
        for r in 0..h {
            for c in 0..w {
                let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
                if px >= x0 && px < x1 && py >= y0 && py < y1 {
                    for ch in 0..3 {
                        *img.get_mut(r, c, ch) = DISTRACTOR_INTENSITY;
                    }
                }
            }
        }
    }
    for hand in hands {
        let map = render_hand(&hand.uvd, topo, cfg, h, w);
        let ch = hand.side.class_index();
        for r in 0..h {
            for c in 0..w {
                let val = map[r * w + c];
                for k in [ch, 2] {
                    let px = img.get_mut(r, c, k);
                    *px = px.max(val);
                }
            }
        }
    }
    img
}

/// Sample `index` of the dataset described by `cfg`.
pub fn generate_sample(cfg: &GenConfig, topo: &SkeletonTopology, index: usize) -> Result<SceneSample, DataError> {
    let cam = cfg.camera()?;
    let local = template_hand_local(topo);
    let mut rng = cfg.sample_rng(index);
    let mut hands = Vec::with_capacity(2);
    for side in HandSide::BOTH {
        if rng.gen::<f64>() < cfg.presence_prob {
            hands.push(place_hand(cfg, &cam, side, &local, &mut rng)?);
        }
    }
    let image = render_scene(&hands, topo, cfg, &mut rng);
    Ok(SceneSample { id: index, image, hands, camera: cam })
}

/// Samples `0..cfg.n_samples`; each draws from its own RNG stream, so the
/// parallel map is deterministic.
pub fn generate_dataset(cfg: &GenConfig, topo: &SkeletonTopology) -> Result<Vec<SceneSample>, DataError> {
    cfg.validate()?;
    (0..cfg.n_samples).into_par_iter().map(|i| generate_sample(cfg, topo, i)).collect()
}
