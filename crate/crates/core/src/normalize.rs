//! Body (global) and limb (local) normalization, and the full
//! detect → normalize → refine → de-normalize pipeline.
//!
//! Body normalization rotates every channel about the torso center until the
//! center→neck direction points straight up. Limb normalization then rotates
//! a limb's three channels about its root joint until root→middle points
//! straight down. Both rotations are undone on the final points.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{signed_angle_between, warp_map, Point, Transform2D, DOWN, UP};
use crate::nnet::TinyNet;
use crate::scoremap::{extract_channels, ProbMapping, ScoreMap};
use crate::skeleton::{torso_center, KeypointSet, Skeleton, NUM_LIMBS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformFlag {
    Applied,
    /// The defining joints (nearly) coincided; identity used instead.
    DegenerateIdentity,
    /// Normalization switched off for this stage.
    Disabled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTransform {
    pub transform: Transform2D,
    pub flag: TransformFlag,
}

impl StageTransform {
    pub fn disabled() -> Self {
        StageTransform {
            transform: Transform2D::identity(),
            flag: TransformFlag::Disabled,
        }
    }

    fn degenerate() -> Self {
        StageTransform {
            transform: Transform2D::identity(),
            flag: TransformFlag::DegenerateIdentity,
        }
    }
}

/// Transforms applied to one image, kept for de-normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub body: StageTransform,
    pub limbs: [StageTransform; NUM_LIMBS],
}

impl NormalizationRecord {
    pub fn identity() -> Self {
        NormalizationRecord {
            body: StageTransform::disabled(),
            limbs: [StageTransform::disabled(); NUM_LIMBS],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormalizeConfig {
    /// Below this joint separation (px) a stage falls back to identity.
    pub eps_pos: f64,
    /// Orientation tolerance (degrees) for post-normalization checks.
    pub theta_tol_deg: f64,
    /// Blur applied before every argmax.
    pub blur_sigma: f64,
    /// Mapping applied to detector maps before extraction.
    pub detector_mapping: ProbMapping,
    pub normalize_body: bool,
    pub normalize_limbs: bool,
    /// Zero-pad detector maps before any rotation so rotated content is not
    /// clipped. Results are reported in the unpadded frame.
    pub pad_before_warp: bool,
    /// Padding width (px) used when `pad_before_warp` is set.
    pub pad_margin: usize,
}

impl Default for NormalizeConfig {
    fn default() -> Self {
        NormalizeConfig {
            eps_pos: 1e-3,
            theta_tol_deg: 3.0,
            blur_sigma: 1.5,
            detector_mapping: ProbMapping::Identity,
            normalize_body: true,
            normalize_limbs: true,
            pad_before_warp: false,
            pad_margin: 8,
        }
    }
}

/// Rotation about the torso center that makes center→neck point up.
pub fn body_transform_params(kp: &KeypointSet, sk: &Skeleton, eps_pos: f64) -> StageTransform {
    let c = torso_center(kp, sk);
    let v = kp.points[sk.neck_index] - c;
    if v.norm() < eps_pos {
        return StageTransform::degenerate();
    }
    let theta = signed_angle_between(v, UP).expect("non-zero vector");
    StageTransform {
        transform: Transform2D::rotation(theta, c),
        flag: TransformFlag::Applied,
    }
}

/// Rotate all channels (joints and background) by the body transform.
pub fn body_normalize(m: &ScoreMap, t: &Transform2D) -> ScoreMap {
    let all: Vec<usize> = (0..m.channels()).collect();
    warp_map(m, t, &all)
}

/// Rotation about the limb root that makes root→middle point down.
pub fn limb_transform_params(kp: &KeypointSet, sk: &Skeleton, limb_index: usize, eps_pos: f64) -> StageTransform {
    let limb = sk.limb_defs[limb_index];
    let root = kp.points[limb.root];
    let v = kp.points[limb.middle] - root;
    if v.norm() < eps_pos {
        return StageTransform::degenerate();
    }
    let theta = signed_angle_between(v, DOWN).expect("non-zero vector");
    StageTransform {
        transform: Transform2D::rotation(theta, root),
        flag: TransformFlag::Applied,
    }
}

/// Rotate only the limb's three joint channels.
pub fn limb_normalize(m: &ScoreMap, sk: &Skeleton, limb_index: usize, t: &Transform2D) -> ScoreMap {
    warp_map(m, t, &sk.limb_defs[limb_index].joints())
}

/// Signed angle (radians) between center→neck and straight up.
pub fn body_angle(kp: &KeypointSet, sk: &Skeleton) -> Option<f64> {
    let v = kp.points[sk.neck_index] - torso_center(kp, sk);
    signed_angle_between(v, UP).ok().map(|t| -t)
}

/// Signed angle (radians) between root→middle of a limb and straight down.
pub fn limb_angle(kp: &KeypointSet, sk: &Skeleton, limb_index: usize) -> Option<f64> {
    let l = sk.limb_defs[limb_index];
    signed_angle_between(kp.points[l.middle] - kp.points[l.root], DOWN)
        .ok()
        .map(|t| -t)
}

/// Joints whose final estimate comes from a limb branch: middle and end.
fn limb_owned(sk: &Skeleton, limb_index: usize) -> [usize; 2] {
    let l = sk.limb_defs[limb_index];
    [l.middle, l.end]
}

/// Apply the record's forward transforms to points: the body transform to
/// every joint, then each limb transform to that limb's middle and end.
pub fn normalize_points(kp: &KeypointSet, rec: &NormalizationRecord, sk: &Skeleton) -> KeypointSet {
    let mut out = kp.map_points(|p| rec.body.transform.apply(p));
    for (li, st) in rec.limbs.iter().enumerate() {
        for j in limb_owned(sk, li) {
            out.points[j] = st.transform.apply(out.points[j]);
        }
    }
    out
}

/// Undo [`normalize_points`]: inverse limb rotation for limb-owned joints,
/// then the inverse body rotation for everything.
pub fn denormalize_points(kp: &KeypointSet, rec: &NormalizationRecord, sk: &Skeleton) -> KeypointSet {
    let mut out = kp.clone();
    for (li, st) in rec.limbs.iter().enumerate() {
        let inv = st.transform.invert();
        for j in limb_owned(sk, li) {
            out.points[j] = inv.apply(out.points[j]);
        }
    }
    let body_inv = rec.body.transform.invert();
    out.map_points(|p| body_inv.apply(p))
}

/// A refinement stage: either a trained network or a pass-through stub.
#[derive(Debug, Clone, PartialEq)]
pub enum Refiner {
    /// Returns its input untouched; positions are read from the input
    /// channels of the requested joints.
    PassThrough,
    /// A network whose output channel `i` estimates the `i`-th requested joint.
    Net(TinyNet),
}

/// Maps produced by a refiner together with where to read each joint.
#[derive(Debug, Clone)]
pub struct RefinedMaps {
    pub maps: ScoreMap,
    pub mapping: ProbMapping,
    /// `channel_of[i]` holds the estimate for the `i`-th requested joint.
    pub channel_of: Vec<usize>,
}

impl Refiner {
    /// Refine `input` for the given joints. `input_mapping` is the mapping
    /// appropriate for the input maps themselves.
    pub fn refine(&self, input: &ScoreMap, joints: &[usize], input_mapping: ProbMapping) -> Result<RefinedMaps> {
        match self {
            Refiner::PassThrough => Ok(RefinedMaps {
                maps: input.clone(),
                mapping: input_mapping,
                channel_of: joints.to_vec(),
            }),
            Refiner::Net(net) => Ok(RefinedMaps {
                maps: net.predict(input)?,
                mapping: ProbMapping::Identity,
                channel_of: (0..joints.len()).collect(),
            }),
        }
    }
}

impl RefinedMaps {
    pub fn positions(&self, blur_sigma: f64) -> Vec<Point> {
        extract_channels(&self.maps, &self.channel_of, blur_sigma, self.mapping)
    }
}

/// The global refinement network plus one network per limb.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementNets {
    pub global: Refiner,
    pub limbs: [Refiner; NUM_LIMBS],
}

impl RefinementNets {
    pub fn pass_through() -> Self {
        RefinementNets {
            global: Refiner::PassThrough,
            limbs: std::array::from_fn(|_| Refiner::PassThrough),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// Final estimates in the input image frame.
    pub keypoints: KeypointSet,
    /// Estimates after the global stage only, in the input image frame.
    pub stage1: KeypointSet,
    /// Direct extraction from the detector maps.
    pub detector: KeypointSet,
    pub record: NormalizationRecord,
}

/// Intermediate products of the global stage, shared by training-corpus
/// builders and the full pipeline.
#[derive(Debug, Clone)]
pub struct GlobalStage {
    pub detector: KeypointSet,
    pub body: StageTransform,
    /// Body-normalized detector maps (`K + 1` channels).
    pub normalized_input: ScoreMap,
    pub refined: RefinedMaps,
    /// Global-stage estimates in the body-normalized frame.
    pub positions: KeypointSet,
}

pub fn run_global_stage(detector_maps: &ScoreMap, sk: &Skeleton, cfg: &NormalizeConfig, global: &Refiner) -> Result<GlobalStage> {
    let k = sk.num_joints();
    let joints: Vec<usize> = (0..k).collect();
    let detector = KeypointSet::new(extract_channels(detector_maps, &joints, cfg.blur_sigma, cfg.detector_mapping));
    let body = if cfg.normalize_body {
        body_transform_params(&detector, sk, cfg.eps_pos)
    } else {
        StageTransform::disabled()
    };
    let normalized_input = body_normalize(detector_maps, &body.transform);
    let refined = global.refine(&normalized_input, &joints, cfg.detector_mapping)?;
    let positions = KeypointSet::new(refined.positions(cfg.blur_sigma));
    Ok(GlobalStage {
        detector,
        body,
        normalized_input,
        refined,
        positions,
    })
}

/// `K + 1`-channel input for the limb stage: the global stage's joint maps
/// followed by the body-normalized detector background.
pub fn limb_stage_input(g: &GlobalStage, sk: &Skeleton) -> Result<ScoreMap> {
    let k = sk.num_joints();
    if g.refined.maps.channels() == g.normalized_input.channels() && g.refined.channel_of == (0..k).collect::<Vec<_>>() {
        return Ok(g.refined.maps.clone());
    }
    let joints = g.refined.maps.select_channels(&g.refined.channel_of);
    let bg = g.normalized_input.select_channels(&[g.normalized_input.channels() - 1]);
    ScoreMap::concat(&[&joints, &bg])
}

/// Limb-normalized input for one limb branch plus the transform used.
pub fn limb_branch_input(
    stage_input: &ScoreMap,
    positions: &KeypointSet,
    sk: &Skeleton,
    limb_index: usize,
    cfg: &NormalizeConfig,
) -> (ScoreMap, StageTransform) {
    let st = if cfg.normalize_limbs {
        limb_transform_params(positions, sk, limb_index, cfg.eps_pos)
    } else {
        StageTransform::disabled()
    };
    (limb_normalize(stage_input, sk, limb_index, &st.transform), st)
}

/// Detect → body-normalize → global refine → limb-normalize → limb refine
/// → de-normalize.
///
/// Each stage derives its transform from positions extracted at the stage
/// before it. Limb middle and end joints come from the limb branches; every
/// other joint keeps its global-stage estimate.
pub fn run_pipeline(detector_maps: &ScoreMap, sk: &Skeleton, cfg: &NormalizeConfig, nets: &RefinementNets) -> Result<PipelineOutput> {
    let margin = if cfg.pad_before_warp { cfg.pad_margin } else { 0 };
    let padded;
    let maps = if margin > 0 {
        padded = detector_maps.pad(margin);
        &padded
    } else {
        detector_maps
    };

    let g = run_global_stage(maps, sk, cfg, &nets.global)?;
    let mut record = NormalizationRecord {
        body: g.body,
        limbs: [StageTransform::disabled(); NUM_LIMBS],
    };
    let stage_input = limb_stage_input(&g, sk)?;
    let mut final_norm = g.positions.clone();
    for (li, refiner) in nets.limbs.iter().enumerate() {
        let (input, st) = limb_branch_input(&stage_input, &g.positions, sk, li, cfg);
        record.limbs[li] = st;
        let limb = sk.limb_defs[li];
        let out = refiner.refine(&input, &limb.joints(), cfg.detector_mapping)?;
        let pts = out.positions(cfg.blur_sigma);
        final_norm.points[limb.middle] = pts[1];
        final_norm.points[limb.end] = pts[2];
    }

    let body_inv = record.body.transform.invert();
    let unpad = |kp: KeypointSet| {
        let off = Point::new(margin as f64, margin as f64);
        kp.map_points(|p| p - off)
    };
    Ok(PipelineOutput {
        keypoints: unpad(denormalize_points(&final_norm, &record, sk)),
        stage1: unpad(g.positions.map_points(|p| body_inv.apply(p))),
        detector: unpad(g.detector),
        record,
    })
}
