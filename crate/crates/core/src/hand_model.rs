//! Hand skeleton topology, the hand-scale statistic, training-set mean
//! scales and mean-scale depth rescaling.
//!
//! The hand scale of a 3D pose is the mean Euclidean length of its 20
//! bones. It is invariant to rigid motion and exactly linear in uniform
//! scaling, so multiplying every depth of a UVD pose by `k` multiplies its
//! back-projected scale by exactly `k`. Rescaling exploits this to move a
//! predicted hand along its viewing rays until its scale equals a target.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{distance, uvd_to_xyz, CameraIntrinsics, GeometryError, HandSide, JointSet3D, JointSetUVD, NUM_JOINTS};
use crate::scalar::Scalar;

pub const NUM_BONES: usize = NUM_JOINTS - 1;

/// Poses whose scale falls below this many millimeters carry no scale information.
pub const DEGENERATE_SCALE_MM: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HandModelError {
    #[error("degenerate pose: hand scale {0} mm is below the 1e-6 mm threshold")]
    DegeneratePose(f64),
    #[error("no training samples for the {0:?} hand")]
    EmptySide(HandSide),
    #[error("target scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("invalid skeleton topology: {0}")]
    InvalidTopology(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Parent/child bone list forming a tree rooted at the wrist (joint 0).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkeletonTopology {
    edges: [(usize, usize); NUM_BONES],
}

/// Finger order used throughout: thumb, index, middle, ring, pinky.
pub const FINGER_NAMES: [&str; 5] = ["thumb", "index", "middle", "ring", "pinky"];

impl SkeletonTopology {
    /// Wrist is joint 0; finger `f` owns joints `4f+1 ..= 4f+4`, proximal to distal.
    pub fn standard() -> Self {
        let mut edges = [(0, 0); NUM_BONES];
        for finger in 0..5 {
            let base = 4 * finger;
            edges[base] = (0, base + 1);
            for k in 1..4 {
                edges[base + k] = (base + k, base + k + 1);
            }
        }
        Self { edges }
    }

    pub fn new(edges: [(usize, usize); NUM_BONES]) -> Result<Self, HandModelError> {
        let mut parent = [usize::MAX; NUM_JOINTS];
        for &(p, c) in &edges {
            if p >= NUM_JOINTS || c >= NUM_JOINTS {
                return Err(HandModelError::InvalidTopology(format!("edge ({p}, {c}) out of range")));
            }
            if c == 0 {
                return Err(HandModelError::InvalidTopology("wrist cannot be a child".into()));
            }
            if parent[c] != usize::MAX {
                return Err(HandModelError::InvalidTopology(format!("joint {c} has two parents")));
            }
            parent[c] = p;
        }
        // Every joint must reach the wrist without revisiting a joint.
        for start in 1..NUM_JOINTS {
            let mut j = start;
            let mut hops = 0;
            while j != 0 {
                j = parent[j];
                hops += 1;
                if j == usize::MAX || hops > NUM_JOINTS {
                    return Err(HandModelError::InvalidTopology(format!(
                        "joint {start} is not connected to the wrist"
                    )));
                }
            }
        }
        Ok(Self { edges })
    }

    pub fn edges(&self) -> &[(usize, usize); NUM_BONES] {
        &self.edges
    }
}

impl Default for SkeletonTopology {
    fn default() -> Self {
        Self::standard()
    }
}

/// Mean bone length of `pose` in mm.
pub fn hand_scale<T: Scalar>(pose: &JointSet3D<T>, topo: &SkeletonTopology) -> Result<T, HandModelError> {
    let joints = pose.joints();
    let total: T = topo
        .edges
        .iter()
        .map(|&(p, c)| distance(&joints[p], &joints[c]))
        .sum();
    let scale = total / T::of(NUM_BONES as f64);
    if !(scale >= T::of(DEGENERATE_SCALE_MM)) {
        return Err(HandModelError::DegeneratePose(scale.to_f64_lossy()));
    }
    Ok(scale)
}

/// Per-side mean hand scale over a training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleStats<T> {
    pub mean_scale_left: T,
    pub mean_scale_right: T,
    pub n_left: usize,
    pub n_right: usize,
}

/// Which training mean a hand is rescaled toward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RescaleTarget {
    /// Each hand toward its own side's mean.
    #[default]
    PerSide,
    /// Both hands toward the count-weighted mean over both sides.
    Pooled,
}

impl<T: Scalar> ScaleStats<T> {
    pub fn mean(&self, side: HandSide) -> T {
        match side {
            HandSide::Left => self.mean_scale_left,
            HandSide::Right => self.mean_scale_right,
        }
    }

    pub fn count(&self, side: HandSide) -> usize {
        match side {
            HandSide::Left => self.n_left,
            HandSide::Right => self.n_right,
        }
    }

    pub fn pooled_mean(&self) -> T {
        let nl = T::of(self.n_left as f64);
        let nr = T::of(self.n_right as f64);
        (self.mean_scale_left * nl + self.mean_scale_right * nr) / (nl + nr)
    }

    pub fn target(&self, side: HandSide, mode: RescaleTarget) -> T {
        match mode {
            RescaleTarget::PerSide => self.mean(side),
            RescaleTarget::Pooled => self.pooled_mean(),
        }
    }
}

pub fn compute_mean_scale<'a, T: Scalar>(
    poses: impl IntoIterator<Item = (HandSide, &'a JointSet3D<T>)>,
    topo: &SkeletonTopology,
) -> Result<ScaleStats<T>, HandModelError> {
    let mut sums = [T::zero(); 2];
    let mut counts = [0usize; 2];
    for (side, pose) in poses {
        let s = hand_scale(pose, topo)?;
        sums[side.class_index()] += s;
        counts[side.class_index()] += 1;
    }
    for side in HandSide::BOTH {
        if counts[side.class_index()] == 0 {
            return Err(HandModelError::EmptySide(side));
        }
    }
    Ok(ScaleStats {
        mean_scale_left: sums[0] / T::of(counts[0] as f64),
        mean_scale_right: sums[1] / T::of(counts[1] as f64),
        n_left: counts[0],
        n_right: counts[1],
    })
}

/// Multiplies every depth of `pose` by `target_scale / hand_scale(uvd_to_xyz(pose))`.
///
/// `(u, v)` are left bitwise unchanged, so the result reprojects to the same
/// pixels while its 3D reconstruction has exactly the target scale.
pub fn rescale_depth<T: Scalar>(
    pose: &JointSetUVD<T>,
    cam: &CameraIntrinsics<T>,
    target_scale: T,
    topo: &SkeletonTopology,
) -> Result<JointSetUVD<T>, HandModelError> {
    if !(target_scale > T::zero()) || !target_scale.is_finite() {
        return Err(HandModelError::NonPositiveScale(target_scale.to_f64_lossy()));
    }
    let current = hand_scale(&uvd_to_xyz(pose, cam)?, topo)?;
    Ok(pose.with_depth_scaled(target_scale / current)?)
}
