//! Pinhole camera model, UVD/XYZ conversion, the global pose error and
//! horizontal-flip math.
//!
//! Metric quantities are millimeters, image quantities are pixels. A pixel
//! with column index `c` covers `[c, c + 1)` and has its center at `c + 0.5`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Number of hand joints.
pub const NUM_JOINTS: usize = 21;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("joint {joint} has non-positive depth {depth}")]
    NonPositiveDepth { joint: usize, depth: f64 },
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("joint {joint} is not finite")]
    NonFinite { joint: usize },
    #[error("expected 21 joints, got {0}")]
    JointCount(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HandSide {
    Left,
    Right,
}

impl HandSide {
    pub const BOTH: [HandSide; 2] = [HandSide::Left, HandSide::Right];

    pub fn flipped(self) -> Self {
        match self {
            HandSide::Left => HandSide::Right,
            HandSide::Right => HandSide::Left,
        }
    }

    /// Class index used by the classification head (`Left = 0`, `Right = 1`).
    pub fn class_index(self) -> usize {
        match self {
            HandSide::Left => 0,
            HandSide::Right => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HandSide::Left => "left",
            HandSide::Right => "right",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: T,
    pub height: T,
}

impl<T: Scalar> CameraIntrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: T, height: T) -> Result<Self, GeometryError> {
        let cam = Self { fx, fy, cx, cy, width, height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.width, self.height]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(GeometryError::InvalidIntrinsics("non-finite parameter".into()));
        }
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return Err(GeometryError::InvalidIntrinsics("focal lengths must be positive".into()));
        }
        if self.cx < T::zero() || self.cx > self.width || self.cy < T::zero() || self.cy > self.height {
            return Err(GeometryError::InvalidIntrinsics(
                "principal point must lie inside the image".into(),
            ));
        }
        Ok(())
    }
}

fn check_depths<T: Scalar>(joints: &[[T; 3]; NUM_JOINTS]) -> Result<(), GeometryError> {
    for (i, j) in joints.iter().enumerate() {
        if !(j[0].is_finite() && j[1].is_finite() && j[2].is_finite()) {
            return Err(GeometryError::NonFinite { joint: i });
        }
        if j[2] <= T::zero() {
            return Err(GeometryError::NonPositiveDepth { joint: i, depth: j[2].to_f64_lossy() });
        }
    }
    Ok(())
}

/// 21 joints as `(u px, v px, d mm)`; every depth is positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(transparent)]
pub struct JointSetUVD<T> {
    joints: [[T; 3]; NUM_JOINTS],
}

/// 21 joints as camera-frame `(x, y, z)` in mm; every `z` is positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(transparent)]
pub struct JointSet3D<T> {
    joints: [[T; 3]; NUM_JOINTS],
}

macro_rules! joint_set_common {
    ($ty:ident) => {
        impl<T: Scalar> $ty<T> {
            pub fn new(joints: [[T; 3]; NUM_JOINTS]) -> Result<Self, GeometryError> {
                check_depths(&joints)?;
                Ok(Self { joints })
            }

            pub fn from_slice(joints: &[[T; 3]]) -> Result<Self, GeometryError> {
                let arr: [[T; 3]; NUM_JOINTS] =
                    joints.try_into().map_err(|_| GeometryError::JointCount(joints.len()))?;
                Self::new(arr)
            }

            pub fn joints(&self) -> &[[T; 3]; NUM_JOINTS] {
                &self.joints
            }

            pub fn joint(&self, i: usize) -> [T; 3] {
                self.joints[i]
            }

            /// Lossy conversion to another scalar type.
            pub fn cast<U: Scalar>(&self) -> $ty<U> {
                let mut out = [[U::zero(); 3]; NUM_JOINTS];
                for (o, j) in out.iter_mut().zip(self.joints.iter()) {
                    *o = [U::of(j[0].to_f64_lossy()), U::of(j[1].to_f64_lossy()), U::of(j[2].to_f64_lossy())];
                }
                $ty { joints: out }
            }
        }

        impl<'de, T: Scalar + Deserialize<'de>> Deserialize<'de> for $ty<T> {
            fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
                let joints = <[[T; 3]; NUM_JOINTS]>::deserialize(de)?;
                Self::new(joints).map_err(serde::de::Error::custom)
            }
        }
    };
}

joint_set_common!(JointSetUVD);
joint_set_common!(JointSet3D);

impl<T: Scalar> JointSetUVD<T> {
    /// Returns the pose with every depth multiplied by `k`; `(u, v)` are copied untouched.
    pub fn with_depth_scaled(&self, k: T) -> Result<Self, GeometryError> {
        let mut joints = self.joints;
        for j in joints.iter_mut() {
            j[2] = j[2] * k;
        }
        Self::new(joints)
    }
}

impl<T: Scalar> JointSet3D<T> {
    /// Applies `f` to every joint; the result must keep `z > 0`.
    pub fn map(&self, mut f: impl FnMut([T; 3]) -> [T; 3]) -> Result<Self, GeometryError> {
        let mut joints = self.joints;
        for j in joints.iter_mut() {
            *j = f(*j);
        }
        Self::new(joints)
    }
}

pub fn uvd_to_xyz<T: Scalar>(
    pose: &JointSetUVD<T>,
    cam: &CameraIntrinsics<T>,
) -> Result<JointSet3D<T>, GeometryError> {
    check_depths(&pose.joints)?;
    let mut out = [[T::zero(); 3]; NUM_JOINTS];
    for (o, &[u, v, d]) in out.iter_mut().zip(pose.joints.iter()) {
        *o = [(u - cam.cx) * d / cam.fx, (v - cam.cy) * d / cam.fy, d];
    }
    Ok(JointSet3D { joints: out })
}

pub fn xyz_to_uvd<T: Scalar>(
    pose: &JointSet3D<T>,
    cam: &CameraIntrinsics<T>,
) -> Result<JointSetUVD<T>, GeometryError> {
    check_depths(&pose.joints)?;
    let mut out = [[T::zero(); 3]; NUM_JOINTS];
    for (o, &[x, y, z]) in out.iter_mut().zip(pose.joints.iter()) {
        *o = [cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy, z];
    }
    Ok(JointSetUVD { joints: out })
}

/// Mean per-joint Euclidean distance in mm, with no root, scale or
/// rotation alignment of any kind.
pub fn mpjpe<T: Scalar>(pred: &JointSet3D<T>, gt: &JointSet3D<T>) -> T {
    let total: T = pred
        .joints
        .iter()
        .zip(gt.joints.iter())
        .map(|(p, g)| distance(p, g))
        .sum();
    total / T::of(NUM_JOINTS as f64)
}

#[inline]
pub(crate) fn distance<T: Scalar>(a: &[T; 3], b: &[T; 3]) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Mirrors annotations about the vertical image axis: `u' = W - u`, side swapped.
pub fn hflip_uvd<T: Scalar>(
    pose: &JointSetUVD<T>,
    side: HandSide,
    image_width: T,
) -> (JointSetUVD<T>, HandSide) {
    let mut joints = pose.joints;
    for j in joints.iter_mut() {
        j[0] = image_width - j[0];
    }
    (JointSetUVD { joints }, side.flipped())
}
