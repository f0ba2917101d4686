//! Refinement networks, multi-scale fusion and the training loops.

mod multiscale;

pub use multiscale::{
    scale_points, term_stride, train_multiscale, MultiScaleConfig, MultiScaleDetector, MultiScaleOutputs,
    MultiScaleTrainOutcome, ScaleEval, ScaleTargets,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::{init_gaussian, Conv2d, Layer, LossKind, LossNorm, LossSpec, Padding, Sgd, TinyNet};
use crate::scoremap::ScoreMap;

/// Widths and kernel sizes of a four-layer refinement network
/// `conv k1 → w1, relu, conv k2 → w2, relu, conv k3 → w2, relu, conv 1×1 → J,
/// sigmoid-like`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineNetSpec {
    /// Joint channels in; the input has `k + 1` channels.
    pub k: usize,
    /// Joint channels out.
    pub j: usize,
    pub widths: [usize; 2],
    pub kernels: [usize; 3],
}

impl RefineNetSpec {
    /// 9×9 → 128, 15×15 → 128, 15×15 → 128, 1×1 → J.
    pub fn full(k: usize, j: usize) -> Self {
        RefineNetSpec {
            k,
            j,
            widths: [128, 128],
            kernels: [9, 15, 15],
        }
    }

    /// Same topology narrowed for single-core training at 64×64.
    pub fn compact(k: usize, j: usize) -> Self {
        RefineNetSpec {
            k,
            j,
            widths: [16, 16],
            kernels: [9, 7, 7],
        }
    }

    pub fn with_outputs(self, j: usize) -> Self {
        RefineNetSpec { j, ..self }
    }

    pub fn build(&self) -> Result<TinyNet> {
        if self.k == 0 || self.j == 0 || self.widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("degenerate refinement spec {self:?}")));
        }
        if self.kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::InvalidArgument("refinement kernels must be odd".into()));
        }
        let [w1, w2] = self.widths;
        let [k1, k2, k3] = self.kernels;
        TinyNet::new(vec![
            Layer::conv(k1, self.k + 1, w1),
            Layer::Relu,
            Layer::conv(k2, w1, w2),
            Layer::Relu,
            Layer::conv(k3, w2, w2),
            Layer::Relu,
            Layer::conv(1, w2, self.j),
            Layer::SigmoidLike { w: 1.0, b: 0.0 },
        ])
    }
}

/// The full-width refinement network for `k` input joints and `j` outputs.
pub fn build_refine_net(k: usize, j: usize) -> Result<TinyNet> {
    RefineNetSpec::full(k, j).build()
}

/// Per-pixel linear combination of same-shaped maps: a 1×1 convolution over
/// their channel concatenation.
pub fn fuse_scales(maps: &[&ScoreMap], weights: &Conv2d) -> Result<ScoreMap> {
    let first = maps.first().ok_or_else(|| Error::InvalidArgument("no maps to fuse".into()))?;
    if let Some(m) = maps.iter().find(|m| m.shape() != first.shape()) {
        return Err(Error::shape(format!("{:?}", first.shape()), format!("{:?}", m.shape())));
    }
    if weights.kh != 1 || weights.kw != 1 || weights.cin != maps.len() * first.channels() {
        return Err(Error::shape(
            format!("1x1 fusion over {} channels", maps.len() * first.channels()),
            format!("{}x{} over {}", weights.kh, weights.kw, weights.cin),
        ));
    }
    weights.forward(&ScoreMap::concat(maps)?)
}

/// Fusion weights that blend scale `i` with scalar `w[i]`, channel by
/// channel.
pub fn scale_weights(channels: usize, w: &[f64]) -> Conv2d {
    let n = w.len();
    let mut c = Conv2d::new(1, 1, n * channels, channels, 1, Padding::Same);
    for out in 0..channels {
        for (s, &ws) in w.iter().enumerate() {
            c.weight[out * n * channels + s * channels + out] = ws;
        }
    }
    c
}

/// Supervised outputs of the multi-scale detector: per-scale detections
/// (coarse to fine) and the two fusions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossTerm {
    D1,
    D2,
    D3,
    F1,
    F2,
}

/// Losses active in each phase of progressive training.
pub fn progressive_schedule(phase: usize) -> Result<Vec<LossTerm>> {
    use LossTerm::*;
    match phase {
        1 => Ok(vec![D1]),
        2 => Ok(vec![D1, D2, F1]),
        3 => Ok(vec![D1, D2, D3, F1, F2]),
        p => Err(Error::InvalidArgument(format!("training phase {p} (expected 1, 2 or 3)"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Extra steps at `fine_tune_lr` after the main run.
    pub fine_tune_steps: usize,
    pub fine_tune_lr: f64,
    pub init_variance: f64,
    pub loss_norm: LossNorm,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            lr: 0.3,
            momentum: 0.0,
            fine_tune_steps: 0,
            fine_tune_lr: 0.06,
            init_variance: 0.001,
            loss_norm: LossNorm::PerPixel,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.fine_tune_lr > 0.0
            && self.init_variance > 0.0
            && (0.0..1.0).contains(&self.momentum);
        if !ok {
            return Err(Error::Config(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

/// One supervised pair: normalized input maps and normalized Gaussian
/// targets (every joint labelled).
#[derive(Debug, Clone)]
pub struct RefineExample {
    pub input: ScoreMap,
    pub target: ScoreMap,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: TinyNet,
    /// Loss before each update, main run then fine-tuning.
    pub curve: Vec<f64>,
}

/// Stepwise training of one refinement network with sigmoid cross-entropy,
/// one example per step.
#[derive(Debug, Clone)]
pub struct RefinementTrainer {
    net: TinyNet,
    cfg: TrainConfig,
    opt: Sgd,
    curve: Vec<f64>,
}

impl RefinementTrainer {
    /// Initializes `net` from `cfg.init_variance` and `cfg.seed`.
    pub fn new(mut net: TinyNet, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        init_gaussian(&mut net, cfg.init_variance, cfg.seed);
        Ok(RefinementTrainer {
            net,
            cfg: *cfg,
            opt: Sgd::new(cfg.lr, cfg.momentum),
            curve: Vec::with_capacity(cfg.steps + cfg.fine_tune_steps),
        })
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.steps + self.cfg.fine_tune_steps
    }

    pub fn steps_done(&self) -> usize {
        self.curve.len()
    }

    pub fn net(&self) -> &TinyNet {
        &self.net
    }

    /// One update; returns the loss before it.
    pub fn step(&mut self, ex: RefineExample) -> Result<f64> {
        let step = self.curve.len();
        if step == self.cfg.steps {
            self.opt = Sgd::new(self.cfg.fine_tune_lr, self.cfg.momentum);
        }
        let acts = self.net.forward(&ex.input)?;
        let loss = LossSpec::new(LossKind::SigmoidXentAll, ex.target).with_norm(self.cfg.loss_norm);
        let (grads, value) = self.net.backward(&acts, &loss)?;
        self.curve.push(value);
        if !value.is_finite() || !grads.flatten().iter().all(|g| g.is_finite()) {
            return Err(Error::DivergenceDetected {
                step,
                loss: value,
                curve: std::mem::take(&mut self.curve),
            });
        }
        self.opt.step(&mut self.net, &grads);
        Ok(value)
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            net: self.net,
            curve: self.curve,
        }
    }
}

/// Initialize `net` and train it for `cfg.steps + cfg.fine_tune_steps`
/// steps; `example(step)` supplies the pair for each step.
pub fn train_refinement(
    net: TinyNet,
    cfg: &TrainConfig,
    mut example: impl FnMut(usize) -> Result<RefineExample>,
) -> Result<TrainOutcome> {
    let mut t = RefinementTrainer::new(net, cfg)?;
    for step in 0..t.total_steps() {
        t.step(example(step)?)?;
    }
    Ok(t.finish())
}
