//! A toy encoder-decoder detector with outputs at strides 4, 2 and 1, deep
//! supervision on each scale and two 1×1 fusions of upsampled scales.
//!
//! ```text
//! x ─ enc1 ─ a1 ─ enc2 ─ a2 ─ head1 ─ D1                 (H/4)
//!            │           └ up ┐
//!            └───────────── + ─ dec2 ─ b2 ─ head2 ─ D2   (H/2)
//! x ──────────────────────────────── [up b2, x] ─ dec3 ─ b3 ─ head3 ─ D3  (H)
//! F1 = fuse1[up D1, D2]        F2 = fuse2[up² D1, up D2, D3]
//! ```
//!
//! Outputs are logits over `J + 1` classes (joints plus background) trained
//! with the visible-only softmax loss against disk labels rendered at each
//! output's resolution. A low-resolution pixel `x` stands for the full
//! resolution position `s·x`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fuse_scales, progressive_schedule, scale_weights, LossTerm};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::nnet::{
    init_gaussian, upsample2x, upsample2x_backward, Activations, Conv2d, Layer, LossKind, LossNorm, LossSpec, Padding,
    TinyNet,
};
use crate::scoremap::{argmax_row_major, groundtruth_radius, make_groundtruth, score_to_prob, GroundtruthSpec, ProbMapping, ScoreMap};
use crate::skeleton::{KeypointSet, Skeleton};

const TERMS: [LossTerm; 5] = [LossTerm::D1, LossTerm::D2, LossTerm::D3, LossTerm::F1, LossTerm::F2];

/// Stride of each term's output relative to the input.
pub fn term_stride(t: LossTerm) -> usize {
    match t {
        LossTerm::D1 => 4,
        LossTerm::D2 | LossTerm::F1 => 2,
        LossTerm::D3 | LossTerm::F2 => 1,
    }
}

fn term_index(t: LossTerm) -> usize {
    TERMS.iter().position(|&u| u == t).unwrap()
}

/// Keypoints in the frame of an output with the given stride.
pub fn scale_points(kp: &KeypointSet, stride: usize) -> KeypointSet {
    let s = stride as f64;
    kp.map_points(|p| Point::new(p.x / s, p.y / s))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultiScaleConfig {
    pub width: usize,
    /// Steps spent in each of the three phases.
    pub phase_steps: [usize; 3],
    pub lr: f64,
    pub init_variance: f64,
    /// Weight of each loss term, in `D1, D2, D3, F1, F2` order.
    pub term_weights: [f64; 5],
    pub loss_norm: LossNorm,
    pub radius_factor: f64,
    pub seed: u64,
}

impl Default for MultiScaleConfig {
    fn default() -> Self {
        MultiScaleConfig {
            width: 16,
            phase_steps: [600, 600, 1200],
            lr: 0.03,
            init_variance: 0.02,
            term_weights: [1.0; 5],
            loss_norm: LossNorm::PerPixel,
            radius_factor: 0.15,
            seed: 0,
        }
    }
}

/// Logits of every output.
#[derive(Debug, Clone)]
pub struct MultiScaleOutputs {
    pub d1: ScoreMap,
    pub d2: ScoreMap,
    pub d3: ScoreMap,
    pub f1: ScoreMap,
    pub f2: ScoreMap,
}

impl MultiScaleOutputs {
    pub fn get(&self, t: LossTerm) -> &ScoreMap {
        match t {
            LossTerm::D1 => &self.d1,
            LossTerm::D2 => &self.d2,
            LossTerm::D3 => &self.d3,
            LossTerm::F1 => &self.f1,
            LossTerm::F2 => &self.f2,
        }
    }

    /// Full-resolution joint positions read from one output.
    pub fn positions(&self, t: LossTerm, joints: usize) -> Vec<Point> {
        let m = self.get(t);
        let p = score_to_prob(m, ProbMapping::Softmax);
        let s = term_stride(t) as f64;
        (0..joints)
            .map(|j| {
                let q = argmax_row_major(p.channel(j), m.width());
                Point::new(s * q.x, s * q.y)
            })
            .collect()
    }
}

struct Cache {
    x: ScoreMap,
    enc1: Activations,
    enc2: Activations,
    head1: Activations,
    dec2: Activations,
    head2: Activations,
    dec3: Activations,
    head3: Activations,
    c1: ScoreMap,
    c2: ScoreMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleDetector {
    pub enc1: TinyNet,
    pub enc2: TinyNet,
    pub head1: TinyNet,
    pub dec2: TinyNet,
    pub head2: TinyNet,
    pub dec3: TinyNet,
    pub head3: TinyNet,
    pub fuse1: Conv2d,
    pub fuse2: Conv2d,
}

fn strided(cin: usize, cout: usize) -> Layer {
    Layer::Conv2d(Conv2d::new(3, 3, cin, cout, 2, Padding::Same))
}

fn split(m: &ScoreMap, sizes: &[usize]) -> Vec<ScoreMap> {
    let mut start = 0;
    sizes
        .iter()
        .map(|&n| {
            let idx: Vec<usize> = (start..start + n).collect();
            start += n;
            m.select_channels(&idx)
        })
        .collect()
}

fn add_into(acc: &mut Option<ScoreMap>, g: ScoreMap) {
    match acc {
        Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
        None => *acc = Some(g),
    }
}

impl MultiScaleDetector {
    /// `cin` input channels, `classes` output classes, `width` feature
    /// channels throughout.
    pub fn new(cin: usize, classes: usize, width: usize) -> Result<Self> {
        let f = width;
        Ok(MultiScaleDetector {
            enc1: TinyNet::new(vec![strided(cin, f), Layer::Relu, Layer::conv(3, f, f), Layer::Relu])?,
            enc2: TinyNet::new(vec![strided(f, f), Layer::Relu, Layer::conv(3, f, f), Layer::Relu])?,
            head1: TinyNet::new(vec![Layer::conv(1, f, classes)])?,
            dec2: TinyNet::new(vec![Layer::conv(3, f, f), Layer::Relu])?,
            head2: TinyNet::new(vec![Layer::conv(1, f, classes)])?,
            dec3: TinyNet::new(vec![Layer::conv(3, f + cin, f), Layer::Relu])?,
            head3: TinyNet::new(vec![Layer::conv(1, f, classes)])?,
            fuse1: scale_weights(classes, &[0.5, 0.5]),
            fuse2: scale_weights(classes, &[1.0 / 3.0; 3]),
        })
    }

    fn nets(&self) -> [&TinyNet; 7] {
        [&self.enc1, &self.enc2, &self.head1, &self.dec2, &self.head2, &self.dec3, &self.head3]
    }

    fn nets_mut(&mut self) -> [&mut TinyNet; 7] {
        [
            &mut self.enc1,
            &mut self.enc2,
            &mut self.head1,
            &mut self.dec2,
            &mut self.head2,
            &mut self.dec3,
            &mut self.head3,
        ]
    }

    pub fn classes(&self) -> usize {
        self.fuse1.cout
    }

    /// Gaussian initialization of the convolutions; fusions start as plain
    /// averages of their inputs.
    pub fn init(&mut self, variance: f64, seed: u64) {
        for (i, n) in self.nets_mut().into_iter().enumerate() {
            init_gaussian(n, variance, seed.wrapping_add(i as u64));
        }
        let c = self.classes();
        self.fuse1 = scale_weights(c, &[0.5, 0.5]);
        self.fuse2 = scale_weights(c, &[1.0 / 3.0; 3]);
    }

    pub fn parameters(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.nets().iter().flat_map(|n| n.parameters()).collect();
        for f in [&self.fuse1, &self.fuse2] {
            p.extend(&f.weight);
            p.extend(&f.bias);
        }
        p
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        let total = self.parameters().len();
        if values.len() != total {
            return Err(Error::shape(total, values.len()));
        }
        let mut at = 0;
        for n in self.nets_mut() {
            let k = n.param_count();
            n.set_parameters(&values[at..at + k])?;
            at += k;
        }
        for f in [&mut self.fuse1, &mut self.fuse2] {
            let (w, b) = (f.weight.len(), f.bias.len());
            f.weight.copy_from_slice(&values[at..at + w]);
            f.bias.copy_from_slice(&values[at + w..at + w + b]);
            at += w + b;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.parameters().len()
    }

    fn forward_cached(&self, x: &ScoreMap) -> Result<(Cache, MultiScaleOutputs)> {
        if x.height() % 4 != 0 || x.width() % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "input {}x{} is not divisible by 4",
                x.height(),
                x.width()
            )));
        }
        let enc1 = self.enc1.forward(x)?;
        let enc2 = self.enc2.forward(enc1.output())?;
        let head1 = self.head1.forward(enc2.output())?;
        let mut s2 = upsample2x(enc2.output());
        s2.data_mut().iter_mut().zip(enc1.output().data()).for_each(|(a, b)| *a += b);
        let dec2 = self.dec2.forward(&s2)?;
        let head2 = self.head2.forward(dec2.output())?;
        let s3 = ScoreMap::concat(&[&upsample2x(dec2.output()), x])?;
        let dec3 = self.dec3.forward(&s3)?;
        let head3 = self.head3.forward(dec3.output())?;
        let (d1, d2, d3) = (head1.output().clone(), head2.output().clone(), head3.output().clone());
        let up1 = upsample2x(&d1);
        let c1 = ScoreMap::concat(&[&up1, &d2])?;
        let f1 = fuse_scales(&[&up1, &d2], &self.fuse1)?;
        let (up11, up2) = (upsample2x(&up1), upsample2x(&d2));
        let c2 = ScoreMap::concat(&[&up11, &up2, &d3])?;
        let f2 = fuse_scales(&[&up11, &up2, &d3], &self.fuse2)?;
        let cache = Cache {
            x: x.clone(),
            enc1,
            enc2,
            head1,
            dec2,
            head2,
            dec3,
            head3,
            c1,
            c2,
        };
        Ok((cache, MultiScaleOutputs { d1, d2, d3, f1, f2 }))
    }

    pub fn forward(&self, x: &ScoreMap) -> Result<MultiScaleOutputs> {
        Ok(self.forward_cached(x)?.1)
    }

    /// Flat parameter gradient given `dL/d(output)` for each term that has
    /// one, in `D1, D2, D3, F1, F2` order.
    fn backward(&self, cache: &Cache, mut g: [Option<ScoreMap>; 5]) -> Vec<f64> {
        let c = self.classes();
        let zeros = |n: &TinyNet| vec![0.0; n.param_count()];
        let mut fuse_grads = Vec::new();
        for (fi, (fuse, input)) in [(&self.fuse1, &cache.c1), (&self.fuse2, &cache.c2)].into_iter().enumerate() {
            match g[3 + fi].take() {
                Some(gf) => {
                    let (w, b, gx) = fuse.backward(input, &gf, true);
                    fuse_grads.push((w, b));
                    let parts = split(&gx.unwrap(), &vec![c; 2 + fi]);
                    let h = cache.head3.output().height();
                    let w3 = cache.head3.output().width();
                    if fi == 0 {
                        add_into(&mut g[0], upsample2x_backward(&parts[0], h / 4, w3 / 4));
                        add_into(&mut g[1], parts[1].clone());
                    } else {
                        let to_half = upsample2x_backward(&parts[0], h / 2, w3 / 2);
                        add_into(&mut g[0], upsample2x_backward(&to_half, h / 4, w3 / 4));
                        add_into(&mut g[1], upsample2x_backward(&parts[1], h / 2, w3 / 2));
                        add_into(&mut g[2], parts[2].clone());
                    }
                }
                None => fuse_grads.push((vec![0.0; fuse.weight.len()], vec![0.0; fuse.bias.len()])),
            }
        }
        let mut ga1: Option<ScoreMap> = None;
        let mut ga2: Option<ScoreMap> = None;
        let mut gb2: Option<ScoreMap> = None;
        let (mut p_head3, mut p_dec3, mut p_head2, mut p_dec2, mut p_head1) = (
            zeros(&self.head3),
            zeros(&self.dec3),
            zeros(&self.head2),
            zeros(&self.dec2),
            zeros(&self.head1),
        );
        if let Some(gd3) = g[2].take() {
            let n = self.head3.layers.len();
            let (gr, gx) = self.head3.backward_from(&cache.head3, n, gd3, true);
            p_head3 = gr.flatten();
            let n = self.dec3.layers.len();
            let (gr, gs3) = self.dec3.backward_from(&cache.dec3, n, gx.unwrap(), true);
            p_dec3 = gr.flatten();
            let f = cache.dec2.output().channels();
            let parts = split(&gs3.unwrap(), &[f, cache.x.channels()]);
            let b2 = cache.dec2.output();
            add_into(&mut gb2, upsample2x_backward(&parts[0], b2.height(), b2.width()));
        }
        if let Some(gd2) = g[1].take() {
            let n = self.head2.layers.len();
            let (gr, gx) = self.head2.backward_from(&cache.head2, n, gd2, true);
            p_head2 = gr.flatten();
            add_into(&mut gb2, gx.unwrap());
        }
        if let Some(gb2) = gb2 {
            let n = self.dec2.layers.len();
            let (gr, gs2) = self.dec2.backward_from(&cache.dec2, n, gb2, true);
            p_dec2 = gr.flatten();
            let gs2 = gs2.unwrap();
            let a2 = cache.enc2.output();
            add_into(&mut ga2, upsample2x_backward(&gs2, a2.height(), a2.width()));
            add_into(&mut ga1, gs2);
        }
        if let Some(gd1) = g[0].take() {
            let n = self.head1.layers.len();
            let (gr, gx) = self.head1.backward_from(&cache.head1, n, gd1, true);
            p_head1 = gr.flatten();
            add_into(&mut ga2, gx.unwrap());
        }
        let mut p_enc2 = zeros(&self.enc2);
        if let Some(ga2) = ga2 {
            let n = self.enc2.layers.len();
            let (gr, gx) = self.enc2.backward_from(&cache.enc2, n, ga2, true);
            p_enc2 = gr.flatten();
            add_into(&mut ga1, gx.unwrap());
        }
        let mut p_enc1 = zeros(&self.enc1);
        if let Some(ga1) = ga1 {
            let n = self.enc1.layers.len();
            p_enc1 = self.enc1.backward_from(&cache.enc1, n, ga1, false).0.flatten();
        }
        let mut flat = Vec::with_capacity(self.param_count());
        for p in [p_enc1, p_enc2, p_head1, p_dec2, p_head2, p_dec3, p_head3] {
            flat.extend(p);
        }
        for (w, b) in fuse_grads {
            flat.extend(w);
            flat.extend(b);
        }
        flat
    }

    /// Weighted loss over the active terms and its flat parameter gradient.
    pub fn loss_and_gradient(
        &self,
        x: &ScoreMap,
        targets: &ScaleTargets,
        active: &[LossTerm],
        weights: &[f64; 5],
        norm: LossNorm,
    ) -> Result<(f64, Vec<f64>)> {
        let (cache, out) = self.forward_cached(x)?;
        let mut total = 0.0;
        let mut g: [Option<ScoreMap>; 5] = Default::default();
        for &t in active {
            let i = term_index(t);
            let (target, mask) = targets.for_stride(term_stride(t));
            let spec = LossSpec::new(LossKind::SoftmaxXentVisible, target.clone())
                .with_mask(mask.to_vec())
                .with_norm(norm);
            let (v, mut dz) = spec.evaluate(out.get(t))?;
            total += weights[i] * v;
            dz.data_mut().iter_mut().for_each(|d| *d *= weights[i]);
            g[i] = Some(dz);
        }
        Ok((total, self.backward(&cache, g)))
    }
}

/// Disk labels and visibility masks at strides 4, 2 and 1.
#[derive(Debug, Clone)]
pub struct ScaleTargets {
    pub labels: [ScoreMap; 3],
    pub masks: [Vec<f64>; 3],
}

impl ScaleTargets {
    /// Labels cover visible joints; pixels inside an occluded joint's disk
    /// are masked out.
    pub fn new(kp: &KeypointSet, sk: &Skeleton, radius_factor: f64, height: usize, width: usize) -> Result<Self> {
        let spec = GroundtruthSpec {
            radius_factor,
            visible_only: true,
            ..GroundtruthSpec::disk()
        };
        let mut labels = Vec::with_capacity(3);
        let mut masks = Vec::with_capacity(3);
        for s in [4, 2, 1] {
            let (h, w) = (height / s, width / s);
            let kps = scale_points(kp, s);
            labels.push(make_groundtruth(&kps, sk, &spec, h, w)?);
            let r = groundtruth_radius(&kps, sk, radius_factor).unwrap_or(spec.min_radius);
            let mut mask = vec![1.0; h * w];
            for j in (0..kps.len()).filter(|&j| !kps.visible[j]) {
                let q = kps.points[j];
                for y in 0..h {
                    for x in 0..w {
                        if Point::new(x as f64, y as f64).distance(q) <= r {
                            mask[y * w + x] = 0.0;
                        }
                    }
                }
            }
            masks.push(mask);
        }
        Ok(ScaleTargets {
            labels: labels.try_into().unwrap(),
            masks: masks.try_into().unwrap(),
        })
    }

    fn for_stride(&self, stride: usize) -> (&ScoreMap, &[f64]) {
        let i = match stride {
            4 => 0,
            2 => 1,
            _ => 2,
        };
        (&self.labels[i], &self.masks[i])
    }
}

#[derive(Debug, Clone)]
pub struct MultiScaleTrainOutcome {
    pub detector: MultiScaleDetector,
    /// Loss before each update, across all phases.
    pub curve: Vec<f64>,
}

/// Progressive training: phase `p` optimizes the loss set of
/// [`progressive_schedule`]`(p)` for `phase_steps[p - 1]` steps, each on one
/// example drawn uniformly from `examples`.
pub fn train_multiscale(
    examples: &[(ScoreMap, ScaleTargets)],
    classes: usize,
    cfg: &MultiScaleConfig,
) -> Result<MultiScaleTrainOutcome> {
    let first = examples.first().ok_or(Error::EmptyEval)?;
    if !(cfg.lr > 0.0 && cfg.init_variance > 0.0 && cfg.width > 0) {
        return Err(Error::Config(format!("invalid multi-scale config {cfg:?}")));
    }
    let mut det = MultiScaleDetector::new(first.0.channels(), classes, cfg.width)?;
    det.init(cfg.init_variance, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::new();
    let mut params = det.parameters();
    for phase in 1..=3 {
        let active = progressive_schedule(phase)?;
        for _ in 0..cfg.phase_steps[phase - 1] {
            let (x, t) = &examples[rng.random_range(0..examples.len())];
            let (loss, grad) = det.loss_and_gradient(x, t, &active, &cfg.term_weights, cfg.loss_norm)?;
            if !loss.is_finite() || !grad.iter().all(|g| g.is_finite()) {
                let step = curve.len();
                curve.push(loss);
                return Err(Error::DivergenceDetected { step, loss, curve });
            }
            curve.push(loss);
            params.iter_mut().zip(&grad).for_each(|(p, g)| *p -= cfg.lr * g);
            det.set_parameters(&params)?;
        }
    }
    Ok(MultiScaleTrainOutcome { detector: det, curve })
}

/// Per-output predictions over a set of inputs.
#[derive(Debug, Clone)]
pub struct ScaleEval {
    pub term: LossTerm,
    pub predictions: Vec<KeypointSet>,
}

impl MultiScaleDetector {
    pub fn evaluate(&self, inputs: &[ScoreMap], joints: usize) -> Result<Vec<ScaleEval>> {
        let mut evals: Vec<ScaleEval> = TERMS
            .iter()
            .map(|&term| ScaleEval {
                term,
                predictions: Vec::with_capacity(inputs.len()),
            })
            .collect();
        for x in inputs {
            let out = self.forward(x)?;
            for e in &mut evals {
                e.predictions.push(KeypointSet::new(out.positions(e.term, joints)));
            }
        }
        Ok(evals)
    }
}
