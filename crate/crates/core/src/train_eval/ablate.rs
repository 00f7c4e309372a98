use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalOptions};
use super::train::train;
use super::{TrainConfig, TrainError};
use crate::data::{generate_split, Dataset, GenConfig, Split};
use crate::geometry::HandSide;
use crate::hand_model::{compute_mean_scale, ScaleStats, SkeletonTopology};
use crate::model::{DepthMode, ModelConfig};
use crate::nn::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationVariant {
    pub name: String,
    /// Image side multiplier relative to the base config; the patch size
    /// grows with it so every variant sees the same token grid.
    pub resolution_factor: usize,
    pub depth_mode: DepthMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Training split generator; validation, test and shifted-test splits derive from it.
    pub data: GenConfig,
    /// Frames in each validation and test split.
    pub eval_samples: usize,
    pub variants: Vec<AblationVariant>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let v = |name: &str, resolution_factor, depth_mode| AblationVariant {
            name: name.to_string(),
            resolution_factor,
            depth_mode,
        };
        Self {
            model: ModelConfig::tiny(),
            train: TrainConfig::default(),
            data: GenConfig::default(),
            eval_samples: 128,
            variants: vec![
                v("small/relative", 1, DepthMode::RootPlusRelative),
                v("small/absolute", 1, DepthMode::AbsolutePerJoint),
                v("large/absolute", 2, DepthMode::AbsolutePerJoint),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SideErrors {
    pub left: Option<f64>,
    pub right: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub image_size: [usize; 2],
    pub depth_mode: DepthMode,
    pub test_rescale_off: SideErrors,
    pub test_rescale_on: SideErrors,
    pub shifted_rescale_off: SideErrors,
    pub shifted_rescale_on: SideErrors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub units: String,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub steps_per_run: u64,
    pub shifted_scale_factor: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Aligned plain-text rendering, MPJPE in mm as left/right pairs.
    pub fn to_text(&self) -> String {
        let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.1}"));
        let pair = |e: &SideErrors| format!("{}/{}", f(e.left), f(e.right));
        let mut s = format!(
            "MPJPE ({}, left/right); {} training frames, {} steps per run, shifted split scale x{}\n",
            self.units, self.train_samples, self.steps_per_run, self.shifted_scale_factor
        );
        let head = ["variant", "input", "test", "test+rescale", "shifted", "shifted+rescale"];
        s += &format!("{:<16} {:>7} {:>13} {:>13} {:>13} {:>16}\n", head[0], head[1], head[2], head[3], head[4], head[5]);
        for r in &self.rows {
            s += &format!(
                "{:<16} {:>7} {:>13} {:>13} {:>13} {:>16}\n",
                r.name,
                format!("{}x{}", r.image_size[0], r.image_size[1]),
                pair(&r.test_rescale_off),
                pair(&r.test_rescale_on),
                pair(&r.shifted_rescale_off),
                pair(&r.shifted_rescale_on)
            );
        }
        s
    }
}

struct Splits {
    train: Dataset,
    val: Dataset,
    test: Dataset,
    shifted: Dataset,
    stats: ScaleStats<f64>,
}

fn scaled_data(base: &GenConfig, k: usize) -> GenConfig {
    let mut g = base.clone();
    g.image_height *= k;
    g.image_width *= k;
    g.intrinsics = base.intrinsics.map(|c| {
        let k = k as f64;
        crate::geometry::CameraIntrinsics {
            fx: c.fx * k,
            fy: c.fy * k,
            cx: c.cx * k,
            cy: c.cy * k,
            width: c.width * k,
            height: c.height * k,
        }
    });
    g.joint_sigma_px *= k as f64;
    g.bone_width_px *= k as f64;
    g
}

fn make_splits(base: &GenConfig, eval_samples: usize, topo: &SkeletonTopology) -> Result<Splits, TrainError> {
    let eval_cfg = GenConfig { n_samples: eval_samples, ..base.clone() };
    let train = generate_split(base, Split::Train, topo)?;
    let stats = compute_mean_scale(train.hands_3d(), topo)?;
    Ok(Splits {
        val: generate_split(&eval_cfg, Split::Val, topo)?,
        test: generate_split(&eval_cfg, Split::Test, topo)?,
        shifted: generate_split(&eval_cfg, Split::TestShifted, topo)?,
        train,
        stats,
    })
}

fn errors(
    params: &ParamStore<f64>,
    cfg: &ModelConfig,
    ds: &Dataset,
    stats: &ScaleStats<f64>,
    rescale: bool,
    sequential: bool,
) -> Result<SideErrors, TrainError> {
    let opts = EvalOptions { rescale, scale_stats: Some(*stats), sequential, ..Default::default() };
    let r = evaluate(params, cfg, ds, &opts)?;
    Ok(SideErrors { left: r.mpjpe(HandSide::Left), right: r.mpjpe(HandSide::Right) })
}

/// Trains every variant to completion under the same schedule and reports
/// per-side MPJPE on the test and scale-shifted test splits, with and
/// without rescaling toward the training-split mean hand scale. The final
/// parameters of each run are evaluated.
pub fn ablate(cfg: &AblationConfig, topo: &SkeletonTopology) -> Result<AblationTable, TrainError> {
    if cfg.variants.is_empty() {
        return Err(TrainError::Config("ablation needs at least one variant".into()));
    }
    let mut cache: Vec<(usize, Splits)> = Vec::new();
    let mut rows = Vec::with_capacity(cfg.variants.len());
    let mut steps = 0;
    let seq = cfg.train.deterministic;
    for v in &cfg.variants {
        let k = v.resolution_factor;
        if k == 0 {
            return Err(TrainError::Config(format!("variant {}: resolution_factor must be positive", v.name)));
        }
        if !cache.iter().any(|(f, _)| *f == k) {
            cache.push((k, make_splits(&scaled_data(&cfg.data, k), cfg.eval_samples, topo)?));
        }
        let splits = &cache.iter().find(|(f, _)| *f == k).expect("inserted above").1;
        let model = ModelConfig {
            image_height: cfg.model.image_height * k,
            image_width: cfg.model.image_width * k,
            patch_size: cfg.model.patch_size * k,
            depth_mode: v.depth_mode,
            ..cfg.model.clone()
        };
        let out = train(&model, &cfg.train, &splits.train, Some(&splits.val), None)?;
        steps = out.steps;
        let p = &out.params;
        rows.push(AblationRow {
            name: v.name.clone(),
            image_size: [model.image_height, model.image_width],
            depth_mode: v.depth_mode,
            test_rescale_off: errors(p, &model, &splits.test, &splits.stats, false, seq)?,
            test_rescale_on: errors(p, &model, &splits.test, &splits.stats, true, seq)?,
            shifted_rescale_off: errors(p, &model, &splits.shifted, &splits.stats, false, seq)?,
            shifted_rescale_on: errors(p, &model, &splits.shifted, &splits.stats, true, seq)?,
        });
    }
    Ok(AblationTable {
        units: "mm".into(),
        train_samples: cfg.data.n_samples,
        eval_samples: cfg.eval_samples,
        steps_per_run: steps,
        shifted_scale_factor: cfg.data.shifted_scale_factor,
        rows,
    })
}
