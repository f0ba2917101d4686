//! The normalization ablation: train global refinement with and without
//! body normalization plus the four limb networks on simulated detector
//! maps, then score every arm on a held-out set.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::metrics::{pck, EvalConfig, EvalReport};
use crate::nnet::TinyNet;
use crate::normalize::{
    body_angle, limb_branch_input, limb_stage_input, run_global_stage, run_pipeline, NormalizeConfig, Refiner,
    RefinementNets, StageTransform, TransformFlag,
};
use crate::refine::{train_refinement, RefineExample, RefineNetSpec, RefinementTrainer, TrainConfig};
use crate::scoremap::gaussian_targets;
use crate::skeleton::{KeypointSet, Skeleton, NUM_LIMBS};
use crate::synthdata::{generate_sample, Sample, SynthConfig};

/// Which refinement network a training pair is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Global,
    Limb(usize),
}

impl std::str::FromStr for StageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(StageKind::Global),
            _ => s
                .strip_prefix("limb")
                .and_then(|i| i.parse::<usize>().ok())
                .filter(|&i| i < NUM_LIMBS)
                .map(StageKind::Limb)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown stage {s:?} (global, limb0..limb3)"))),
        }
    }
}

/// Global-stage training pair: detector maps (body-normalized when
/// `cfg.normalize_body`) and Gaussian targets for every joint, moved by the
/// same transform.
pub fn global_example(sample: &Sample, sk: &Skeleton, cfg: &NormalizeConfig, sigma: f64) -> Result<(RefineExample, StageTransform)> {
    let g = run_global_stage(&sample.detector, sk, cfg, &Refiner::PassThrough)?;
    let (h, w) = (sample.detector.height(), sample.detector.width());
    let t = &g.body.transform;
    let pts: Vec<Point> = sample.annotation.keypoints.points.iter().map(|&p| t.apply(p)).collect();
    let joints: Vec<usize> = (0..sk.num_joints()).collect();
    let target = gaussian_targets(&pts, &joints, sigma, h, w);
    Ok((
        RefineExample {
            input: g.normalized_input,
            target,
        },
        g.body,
    ))
}

/// Training pairs for all four limb networks from one sample, built on the
/// output of a trained global stage.
pub fn limb_examples(
    sample: &Sample,
    sk: &Skeleton,
    cfg: &NormalizeConfig,
    global: &Refiner,
    sigma: f64,
) -> Result<Vec<RefineExample>> {
    let g = run_global_stage(&sample.detector, sk, cfg, global)?;
    let stage_input = limb_stage_input(&g, sk)?;
    let (h, w) = (sample.detector.height(), sample.detector.width());
    let body = &g.body.transform;
    (0..NUM_LIMBS)
        .map(|li| {
            let (input, st) = limb_branch_input(&stage_input, &g.positions, sk, li, cfg);
            let limb = sk.limb_defs[li];
            let pts: Vec<Point> = limb
                .joints()
                .iter()
                .map(|&j| st.transform.apply(body.apply(sample.annotation.keypoints.points[j])))
                .collect();
            Ok(RefineExample {
                input,
                target: gaussian_targets(&pts, &[0, 1, 2], sigma, h, w),
            })
        })
        .collect()
}

/// Check that a loaded network fits `stage`: K+1 input channels (joints
/// and background), and K (global) or 3 (limb) outputs.
pub fn check_stage_net(net: &TinyNet, sk: &Skeleton, stage: StageKind) -> Result<()> {
    let k = sk.num_joints();
    let want = match stage {
        StageKind::Global => k,
        StageKind::Limb(_) => 3,
    };
    let got = (net.input_channels(), net.output_channels());
    if got != (Some(k + 1), Some(want)) {
        return Err(Error::SchemaMismatch(format!(
            "{stage:?} network needs {} inputs and {want} outputs, checkpoint has {:?} and {:?}",
            k + 1,
            got.0,
            got.1
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub synth: SynthConfig,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub n_eval: usize,
    pub net: RefineNetSpec,
    pub global: TrainConfig,
    pub limb: TrainConfig,
    pub normalize: NormalizeConfig,
    pub eval: EvalConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let k = crate::skeleton::NUM_JOINTS;
        AblationConfig {
            synth: SynthConfig::default(),
            train_seed: 1,
            eval_seed: 2,
            n_eval: 300,
            net: RefineNetSpec::compact(k, k),
            global: TrainConfig::default(),
            limb: TrainConfig::default(),
            // rotating unpadded 64×64 maps clips joints near the corners
            normalize: NormalizeConfig {
                pad_before_warp: true,
                ..NormalizeConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

/// Orientation of the training inputs of the normalized global arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleContract {
    pub checked: usize,
    /// Samples whose body transform fell back to identity.
    pub degenerate: usize,
    /// Largest body angle (degrees) of the detector estimates after their
    /// body transform.
    pub max_angle_deg: f64,
    pub tolerance_deg: f64,
}

impl AngleContract {
    pub fn holds(&self) -> bool {
        self.max_angle_deg <= self.tolerance_deg
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub detector: EvalReport,
    pub stage1_norm: EvalReport,
    pub stage1_plain: EvalReport,
    pub stage2: EvalReport,
    pub angle_contract: AngleContract,
    pub final_losses: FinalLosses,
    pub seconds: f64,
}

/// Mean loss over the last 100 steps of each training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinalLosses {
    pub global_norm: f64,
    pub global_plain: f64,
    pub limbs: Vec<f64>,
}

fn tail_mean(curve: &[f64]) -> f64 {
    let tail = &curve[curve.len().saturating_sub(100)..];
    if tail.is_empty() {
        return f64::NAN;
    }
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Trained networks of the ablation.
#[derive(Debug, Clone)]
pub struct AblationNets {
    pub global_norm: TinyNet,
    pub global_plain: TinyNet,
    pub limbs: Vec<TinyNet>,
}

/// Train the global network on the `cfg.global.steps` training samples,
/// one fresh sample per step. Sample `i` of the training corpus feeds step
/// `i` (cycling if fine-tuning runs past the end).
pub fn train_global(cfg: &AblationConfig, sk: &Skeleton, normalize_body: bool) -> Result<(TinyNet, Vec<f64>, AngleContract)> {
    let ncfg = NormalizeConfig {
        normalize_body,
        ..cfg.normalize
    };
    let sigma = cfg.synth.groundtruth.gauss_sigma;
    let mut contract = AngleContract {
        checked: 0,
        degenerate: 0,
        max_angle_deg: 0.0,
        tolerance_deg: cfg.normalize.theta_tol_deg,
    };
    let net = cfg.net.with_outputs(sk.num_joints()).build()?;
    let n = cfg.global.steps.max(1);
    let out = train_refinement(net, &cfg.global, |step| {
        let sample = generate_sample(&cfg.synth, sk, cfg.train_seed, step % n)?;
        let (ex, body) = global_example(&sample, sk, &ncfg, sigma)?;
        if normalize_body {
            let det = crate::scoremap::extract_positions(&sample.detector, sk, ncfg.blur_sigma, ncfg.detector_mapping);
            contract.checked += 1;
            if body.flag == TransformFlag::DegenerateIdentity {
                contract.degenerate += 1;
            } else {
                let moved = det.map_points(|p| body.transform.apply(p));
                let a = body_angle(&moved, sk).unwrap_or(0.0).abs().to_degrees();
                contract.max_angle_deg = contract.max_angle_deg.max(a);
            }
        }
        Ok(ex)
    })?;
    Ok((out.net, out.curve, contract))
}

/// Train the four limb networks in lockstep on the output of `global`; the
/// global stage runs once per training sample.
pub fn train_limbs(cfg: &AblationConfig, sk: &Skeleton, global: &TinyNet) -> Result<(Vec<TinyNet>, Vec<Vec<f64>>)> {
    let refiner = Refiner::Net(global.clone());
    let sigma = cfg.synth.groundtruth.gauss_sigma;
    let n = cfg.limb.steps.max(1);
    let mut trainers = (0..NUM_LIMBS)
        .map(|li| {
            let tc = TrainConfig {
                seed: cfg.limb.seed.wrapping_add(li as u64),
                ..cfg.limb
            };
            RefinementTrainer::new(cfg.net.with_outputs(3).build()?, &tc)
        })
        .collect::<Result<Vec<_>>>()?;
    for step in 0..cfg.limb.steps + cfg.limb.fine_tune_steps {
        let sample = generate_sample(&cfg.synth, sk, cfg.train_seed, step % n)?;
        let examples = limb_examples(&sample, sk, &cfg.normalize, &refiner, sigma)?;
        for (t, ex) in trainers.iter_mut().zip(examples) {
            t.step(ex)?;
        }
    }
    Ok(trainers
        .into_iter()
        .map(|t| {
            let o = t.finish();
            (o.net, o.curve)
        })
        .unzip())
}

/// Estimates of every arm on the held-out samples.
#[derive(Debug, Clone, Default)]
pub struct ArmPredictions {
    pub groundtruth: Vec<KeypointSet>,
    pub detector: Vec<KeypointSet>,
    pub stage1_norm: Vec<KeypointSet>,
    pub stage1_plain: Vec<KeypointSet>,
    pub stage2: Vec<KeypointSet>,
}

pub fn predict_arms(cfg: &AblationConfig, sk: &Skeleton, nets: &AblationNets) -> Result<ArmPredictions> {
    let with_limbs = RefinementNets {
        global: Refiner::Net(nets.global_norm.clone()),
        limbs: std::array::from_fn(|li| Refiner::Net(nets.limbs[li].clone())),
    };
    let plain = RefinementNets {
        global: Refiner::Net(nets.global_plain.clone()),
        limbs: std::array::from_fn(|_| Refiner::PassThrough),
    };
    let plain_cfg = NormalizeConfig {
        normalize_body: false,
        normalize_limbs: false,
        ..cfg.normalize
    };
    let mut arms = ArmPredictions::default();
    for i in 0..cfg.n_eval {
        let sample = generate_sample(&cfg.synth, sk, cfg.eval_seed, i)?;
        let full = run_pipeline(&sample.detector, sk, &cfg.normalize, &with_limbs)?;
        let p = run_pipeline(&sample.detector, sk, &plain_cfg, &plain)?;
        arms.groundtruth.push(sample.annotation.keypoints);
        arms.detector.push(full.detector);
        arms.stage1_norm.push(full.stage1);
        arms.stage1_plain.push(p.stage1);
        arms.stage2.push(full.keypoints);
    }
    Ok(arms)
}

pub fn train_ablation(cfg: &AblationConfig, sk: &Skeleton) -> Result<(AblationNets, AngleContract, FinalLosses)> {
    if cfg.eval_seed == cfg.train_seed {
        return Err(Error::Config("evaluation seed must differ from the training seed".into()));
    }
    cfg.synth.validate()?;
    let (global_norm, c_norm, contract) = train_global(cfg, sk, true)?;
    let (global_plain, c_plain, _) = train_global(cfg, sk, false)?;
    let (limbs, c_limbs) = train_limbs(cfg, sk, &global_norm)?;
    let losses = FinalLosses {
        global_norm: tail_mean(&c_norm),
        global_plain: tail_mean(&c_plain),
        limbs: c_limbs.iter().map(|c| tail_mean(c)).collect(),
    };
    Ok((
        AblationNets {
            global_norm,
            global_plain,
            limbs,
        },
        contract,
        losses,
    ))
}

pub fn score_arms(arms: &ArmPredictions, sk: &Skeleton, eval: &EvalConfig) -> Result<[EvalReport; 4]> {
    let gts = &arms.groundtruth;
    Ok([
        pck(&arms.detector, gts, sk, eval)?,
        pck(&arms.stage1_norm, gts, sk, eval)?,
        pck(&arms.stage1_plain, gts, sk, eval)?,
        pck(&arms.stage2, gts, sk, eval)?,
    ])
}

/// Train everything, then evaluate the four arms.
pub fn run_ablation(cfg: &AblationConfig, sk: &Skeleton) -> Result<(AblationReport, AblationNets)> {
    let start = Instant::now();
    let (nets, angle_contract, final_losses) = train_ablation(cfg, sk)?;
    let arms = predict_arms(cfg, sk, &nets)?;
    let [detector, stage1_norm, stage1_plain, stage2] = score_arms(&arms, sk, &cfg.eval)?;
    Ok((
        AblationReport {
            detector,
            stage1_norm,
            stage1_plain,
            stage2,
            angle_contract,
            final_losses,
            seconds: start.elapsed().as_secs_f64(),
        },
        nets,
    ))
}
