use serde::{Deserialize, Serialize};

use super::train::map_ordered;
use super::TrainError;
use crate::data::Dataset;
use crate::geometry::{mpjpe, uvd_to_xyz, CameraIntrinsics, HandSide, JointSet3D, JointSetUVD};
use crate::hand_model::{rescale_depth, RescaleTarget, ScaleStats, SkeletonTopology};
use crate::model::{decode_predictions, forward, ModelConfig};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalOptions {
    /// Rescale each predicted hand toward the training mean scale before lifting to 3D.
    pub rescale: bool,
    pub scale_stats: Option<ScaleStats<f64>>,
    pub target: RescaleTarget,
    /// Process frames on the calling thread only.
    pub sequential: bool,
}

/// The decoded prediction for one side of a frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictedHand {
    pub side: HandSide,
    pub query_index: usize,
    pub confidence: f64,
    pub predicted_as_side: bool,
    pub uvd: JointSetUVD<f64>,
    /// `uvd` lifted with the frame's intrinsics, without rescaling.
    pub xyz: JointSet3D<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FramePrediction {
    pub id: usize,
    /// Left first, then right.
    pub hands: Vec<PredictedHand>,
}

impl FramePrediction {
    pub fn hand(&self, side: HandSide) -> Option<&PredictedHand> {
        self.hands.iter().find(|h| h.side == side)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub id: usize,
    pub side: HandSide,
    pub mpjpe_mm: f64,
    pub query_index: usize,
    pub confidence: f64,
    /// The selected query's most probable class is this side.
    pub classified_correctly: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean over frames where the side is present; `None` without such frames.
    pub mpjpe_left: Option<f64>,
    pub mpjpe_right: Option<f64>,
    pub n_frames_left: usize,
    pub n_frames_right: usize,
    pub accuracy_left: Option<f64>,
    pub accuracy_right: Option<f64>,
    pub rescaling_applied: bool,
    pub records: Vec<FrameRecord>,
}

impl EvalReport {
    pub fn mpjpe(&self, side: HandSide) -> Option<f64> {
        match side {
            HandSide::Left => self.mpjpe_left,
            HandSide::Right => self.mpjpe_right,
        }
    }

    pub fn accuracy(&self, side: HandSide) -> Option<f64> {
        match side {
            HandSide::Left => self.accuracy_left,
            HandSide::Right => self.accuracy_right,
        }
    }

    /// Mean of the per-side MPJPEs that exist.
    pub fn mean_mpjpe(&self) -> Option<f64> {
        let v: Vec<f64> = [self.mpjpe_left, self.mpjpe_right].into_iter().flatten().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_text(&self) -> String {
        let fmt = |x: Option<f64>, k: f64| x.map_or("-".to_string(), |v| format!("{:.2}", v * k));
        let mut s = format!("rescaling: {}\n", if self.rescaling_applied { "on" } else { "off" });
        s += &format!("{:<6} {:>8} {:>12} {:>10}\n", "side", "frames", "mpjpe (mm)", "acc (%)");
        for side in HandSide::BOTH {
            let n = match side {
                HandSide::Left => self.n_frames_left,
                HandSide::Right => self.n_frames_right,
            };
            s += &format!(
                "{:<6} {:>8} {:>12} {:>10}\n",
                side.name(),
                n,
                fmt(self.mpjpe(side), 1.0),
                fmt(self.accuracy(side), 100.0)
            );
        }
        s
    }
}

/// Decodes one prediction per side for every frame.
pub fn predict(
    params: &ParamStore<f64>,
    cfg: &ModelConfig,
    ds: &Dataset,
    sequential: bool,
) -> Result<Vec<FramePrediction>, TrainError> {
    map_ordered(sequential, &ds.samples, |_, s| {
        let det = forward(params, &s.image, cfg)?;
        let hands = decode_predictions(&det, cfg)?
            .into_iter()
            .map(|d| {
                Ok(PredictedHand {
                    side: d.side,
                    query_index: d.query_index,
                    confidence: d.confidence,
                    predicted_as_side: d.predicted_as_side,
                    xyz: uvd_to_xyz(&d.uvd, &s.camera)?,
                    uvd: d.uvd,
                })
            })
            .collect::<Result<Vec<_>, TrainError>>()?;
        Ok(FramePrediction { id: s.id, hands })
    })
    .into_iter()
    .collect()
}

fn frame_error(
    pred: &PredictedHand,
    gt: &JointSet3D<f64>,
    cam: &CameraIntrinsics<f64>,
    rescale_to: Option<f64>,
    topo: &SkeletonTopology,
) -> Result<f64, TrainError> {
    let uvd = match rescale_to {
        Some(target) => rescale_depth(&pred.uvd, cam, target, topo)?,
        None => pred.uvd,
    };
    Ok(mpjpe(&uvd_to_xyz(&uvd, cam)?, gt))
}

/// Per-side MPJPE of `preds` against the 3D ground truth of `ds`, with no
/// root alignment. Frames pair up by position and must carry the same ids.
pub fn score(
    ds: &Dataset,
    preds: &[FramePrediction],
    opts: &EvalOptions,
    topo: &SkeletonTopology,
) -> Result<EvalReport, TrainError> {
    if opts.rescale && opts.scale_stats.is_none() {
        return Err(TrainError::MissingScaleStats);
    }
    if preds.len() != ds.samples.len() {
        return Err(TrainError::Data(format!("{} predictions for {} frames", preds.len(), ds.samples.len())));
    }
    let stats = if opts.rescale { opts.scale_stats } else { None };
    let per_frame = map_ordered(opts.sequential, &ds.samples, |i, s| {
        let pred = &preds[i];
        if pred.id != s.id {
            return Err(TrainError::Data(format!("prediction {i} has id {}, frame has id {}", pred.id, s.id)));
        }
        let mut out = Vec::with_capacity(s.hands.len());
        for h in &s.hands {
            let gt = h.xyz.as_ref().ok_or_else(|| TrainError::Data(format!("frame {} lacks 3D ground truth", s.id)))?;
            let p = pred
                .hand(h.side)
                .ok_or_else(|| TrainError::Data(format!("frame {} has no {} prediction", s.id, h.side.name())))?;
            let target = stats.map(|st| st.target(h.side, opts.target));
            out.push(FrameRecord {
                id: s.id,
                side: h.side,
                mpjpe_mm: frame_error(p, gt, &s.camera, target, topo)?,
                query_index: p.query_index,
                confidence: p.confidence,
                classified_correctly: p.predicted_as_side,
            });
        }
        Ok(out)
    });
    let mut records = Vec::new();
    for r in per_frame {
        records.extend(r?);
    }

    let side_stats = |side: HandSide| {
        let mine: Vec<&FrameRecord> = records.iter().filter(|r| r.side == side).collect();
        let n = mine.len();
        if n == 0 {
            return (None, 0, None);
        }
        let err = mine.iter().map(|r| r.mpjpe_mm).sum::<f64>() / n as f64;
        let acc = mine.iter().filter(|r| r.classified_correctly).count() as f64 / n as f64;
        (Some(err), n, Some(acc))
    };
    let (mpjpe_left, n_frames_left, accuracy_left) = side_stats(HandSide::Left);
    let (mpjpe_right, n_frames_right, accuracy_right) = side_stats(HandSide::Right);
    Ok(EvalReport {
        mpjpe_left,
        mpjpe_right,
        n_frames_left,
        n_frames_right,
        accuracy_left,
        accuracy_right,
        rescaling_applied: stats.is_some(),
        records,
    })
}

/// [`predict`] followed by [`score`].
pub fn evaluate(
    params: &ParamStore<f64>,
    cfg: &ModelConfig,
    ds: &Dataset,
    opts: &EvalOptions,
) -> Result<EvalReport, TrainError> {
    if opts.rescale && opts.scale_stats.is_none() {
        return Err(TrainError::MissingScaleStats);
    }
    let preds = predict(params, cfg, ds, opts.sequential)?;
    score(ds, &preds, opts, &SkeletonTopology::standard())
}
