//! Deterministic synthetic two-hand scenes, their on-disk format, and the
//! horizontal-flip augmentation.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`): sample `i` of a dataset
//! draws from stream `i` of the generator seeded with the config seed, so
//! every sample is reproducible on its own and generation order does not
//! matter.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, GeometryError, HandSide, JointSet3D, JointSetUVD, NUM_JOINTS};
use crate::hand_model::{HandModelError, SkeletonTopology};
use crate::image::Image;

mod augment;
mod generate;
mod io;

pub use augment::{augment, flip_sample};
pub use generate::{generate_dataset, generate_sample};
pub use io::{decode_image, encode_image, read_dataset, read_meta, write_dataset, Counts, DatasetMeta, IMAGE_MAGIC, IMAGE_VERSION, META_VERSION};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid data config: {0}")]
    Config(String),
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    HandModel(#[from] HandModelError),
}

/// In-plane finger angles (degrees from the wrist-up direction), thumb to pinky.
pub const FINGER_ANGLES_DEG: [f64; 5] = [-40.0, -15.0, 0.0, 15.0, 35.0];

/// Bone lengths in mm, proximal to distal, thumb to pinky.
pub const BONE_LENGTHS_MM: [[f64; 4]; 5] = [
    [45.0, 35.0, 28.0, 25.0],
    [90.0, 40.0, 25.0, 22.0],
    [85.0, 45.0, 28.0, 24.0],
    [80.0, 42.0, 26.0, 23.0],
    [75.0, 32.0, 20.0, 20.0],
];

/// Depth at which [`template_hand`] places the template's wrist.
pub const TEMPLATE_DEPTH_MM: f64 = 500.0;

/// Canonical right hand in its local frame: wrist at the origin, fingers
/// straight and fanned in the `z = 0` plane, pointing toward `-y` (image up).
pub fn template_hand_local(topo: &SkeletonTopology) -> [[f64; 3]; NUM_JOINTS] {
    let mut joints = [[0.0; 3]; NUM_JOINTS];
    // Bone `e` of the standard topology belongs to finger e / 4, segment e % 4.
    for (e, &(parent, child)) in topo.edges().iter().enumerate() {
        let (finger, seg) = (e / 4, e % 4);
        let a = FINGER_ANGLES_DEG[finger].to_radians();
        let len = BONE_LENGTHS_MM[finger][seg];
        let p = joints[parent];
        joints[child] = [p[0] + len * a.sin(), p[1] - len * a.cos(), p[2]];
    }
    joints
}

/// The template placed on the optical axis at [`TEMPLATE_DEPTH_MM`].
pub fn template_hand(topo: &SkeletonTopology) -> JointSet3D<f64> {
    let mut j = template_hand_local(topo);
    for p in j.iter_mut() {
        p[2] += TEMPLATE_DEPTH_MM;
    }
    JointSet3D::new(j).expect("template depths are positive")
}

/// Mirror image of the right template across `x = 0`.
pub fn template_hand_left(topo: &SkeletonTopology) -> JointSet3D<f64> {
    template_hand(topo).map(|[x, y, z]| [-x, y, z]).expect("mirroring keeps depths")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub seed: u64,
    pub n_samples: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Defaults to `fx = fy = image_width`, principal point at the center.
    pub intrinsics: Option<CameraIntrinsics<f64>>,
    /// Every joint depth lies in this range (mm).
    pub depth_range: [f64; 2],
    /// Each Euler angle is drawn uniformly within ± this many degrees.
    pub rotation_jitter_deg: f64,
    pub subject_scale_factor: f64,
    /// `subject_scale_factor` used for the `test-shifted` split.
    pub shifted_scale_factor: f64,
    pub scale_jitter: [f64; 2],
    /// Probability that each side is present in a frame.
    pub presence_prob: f64,
    pub joint_sigma_px: f64,
    pub bone_width_px: f64,
    /// Draw a random gray rectangle behind the hands.
    pub distractor: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_samples: 512,
            image_height: 32,
            image_width: 32,
            intrinsics: None,
            depth_range: [300.0, 800.0],
            rotation_jitter_deg: 20.0,
            subject_scale_factor: 1.0,
            shifted_scale_factor: 1.3,
            scale_jitter: [0.85, 1.15],
            presence_prob: 0.9,
            joint_sigma_px: 0.7,
            bone_width_px: 1.0,
            distractor: false,
        }
    }
}

impl GenConfig {
    pub fn camera(&self) -> Result<CameraIntrinsics<f64>, DataError> {
        let cam = match self.intrinsics {
            Some(c) => c,
            None => {
                let (w, h) = (self.image_width as f64, self.image_height as f64);
                CameraIntrinsics { fx: w, fy: w, cx: w / 2.0, cy: h / 2.0, width: w, height: h }
            }
        };
        cam.validate()?;
        if cam.width != self.image_width as f64 || cam.height != self.image_height as f64 {
            return Err(DataError::Config("intrinsics width/height differ from the image size".into()));
        }
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: &str| Err(DataError::Config(m.to_string()));
        if self.image_height == 0 || self.image_width == 0 {
            return err("image size must be positive");
        }
        let [z0, z1] = self.depth_range;
        if !(z0 > 0.0 && z1 > z0 && z1.is_finite()) {
            return err("depth_range must satisfy 0 < min < max");
        }
        let [s0, s1] = self.scale_jitter;
        if !(s0 > 0.0 && s1 >= s0 && s1.is_finite()) {
            return err("scale_jitter must satisfy 0 < min <= max");
        }
        for f in [self.subject_scale_factor, self.shifted_scale_factor] {
            if !(f > 0.0 && f.is_finite()) {
                return err("scale factors must be positive");
            }
        }
        if !(0.0..=1.0).contains(&self.presence_prob) {
            return err("presence_prob must lie in [0, 1]");
        }
        if !(self.rotation_jitter_deg >= 0.0 && self.rotation_jitter_deg < 90.0) {
            return err("rotation_jitter_deg must lie in [0, 90)");
        }
        if !(self.joint_sigma_px > 0.0 && self.bone_width_px > 0.0) {
            return err("render sizes must be positive");
        }
        self.camera()?;
        Ok(())
    }

    /// Generator for sample `index`.
    pub fn sample_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }
}

/// Dataset splits. Each split draws from its own seed; `TestShifted` also
/// replaces the subject scale factor with `shifted_scale_factor`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
    TestShifted,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::TestShifted];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::TestShifted => "test-shifted",
        }
    }

    fn seed_offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
            Split::TestShifted => 3,
        }
    }

    /// Generator config for this split of `base`.
    pub fn config(self, base: &GenConfig) -> GenConfig {
        let mut cfg = base.clone();
        cfg.seed = base.seed.wrapping_add(self.seed_offset().wrapping_mul(0x9E37_79B9_7F4A_7C15));
        if self == Split::TestShifted {
            cfg.subject_scale_factor = base.shifted_scale_factor;
        }
        cfg
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown split {s:?} (expected train, val, test or test-shifted)"))
    }
}

/// Generates `split` of `base` as an in-memory dataset with its manifest.
pub fn generate_split(base: &GenConfig, split: Split, topo: &SkeletonTopology) -> Result<Dataset, DataError> {
    let cfg = split.config(base);
    let samples = generate_dataset(&cfg, topo)?;
    let meta = DatasetMeta::new(cfg, Some(split.name().to_string()), &samples)?;
    Ok(Dataset { meta, samples })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandAnnotation {
    pub side: HandSide,
    pub uvd: JointSetUVD<f64>,
    /// Absent once a sample has been flipped.
    pub xyz: Option<JointSet3D<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub id: usize,
    pub image: Image,
    /// At most one hand per side, left before right.
    pub hands: Vec<HandAnnotation>,
    pub camera: CameraIntrinsics<f64>,
}

impl SceneSample {
    pub fn hand(&self, side: HandSide) -> Option<&HandAnnotation> {
        self.hands.iter().find(|h| h.side == side)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<SceneSample>,
}

impl Dataset {
    /// Every annotated 3D hand with its side.
    pub fn hands_3d(&self) -> impl Iterator<Item = (HandSide, &JointSet3D<f64>)> {
        self.samples
            .iter()
            .flat_map(|s| s.hands.iter().filter_map(|h| h.xyz.as_ref().map(|x| (h.side, x))))
    }
}
