//! Synthetic articulated poses, simulated detector maps, augmentation and
//! the annotation / corpus file formats.

mod annotations;
mod corpus;

pub use annotations::{
    decode_annotation, decode_annotations, encode_annotation, encode_annotations, read_annotation, read_annotations,
    write_annotation, write_annotations, Annotation,
};
pub use corpus::{
    generate_corpus, generate_sample, read_corpus, read_index, read_sample, sample_id, write_corpus, CorpusIndex, Sample,
    SynthConfig,
};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_6, PI, TAU};

use crate::error::{Error, Result};
use crate::geometry::{mat_vec, resample_plane, rotation_matrix, Point, DOWN, UP};
use crate::scoremap::{render_gaussian, ScoreMap};
use crate::skeleton::*;

/// Segment lengths in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoneLengths {
    /// Vertical distance between the shoulder line and the hip line.
    pub torso: f64,
    pub shoulder_width: f64,
    pub hip_width: f64,
    /// Shoulder line to neck.
    pub neck: f64,
    /// Neck to head top.
    pub head: f64,
    pub upper_arm: f64,
    pub forearm: f64,
    pub thigh: f64,
    pub shin: f64,
}

impl Default for BoneLengths {
    fn default() -> Self {
        BoneLengths {
            torso: 20.0,
            shoulder_width: 12.0,
            hip_width: 9.0,
            neck: 5.0,
            head: 7.0,
            upper_arm: 8.0,
            forearm: 7.0,
            thigh: 9.0,
            shin: 8.0,
        }
    }
}

impl BoneLengths {
    fn values(&self) -> [f64; 9] {
        [
            self.torso,
            self.shoulder_width,
            self.hip_width,
            self.neck,
            self.head,
            self.upper_arm,
            self.forearm,
            self.thigh,
            self.shin,
        ]
    }

    pub fn scaled(&self, s: f64) -> Self {
        let v = self.values().map(|x| x * s);
        BoneLengths {
            torso: v[0],
            shoulder_width: v[1],
            hip_width: v[2],
            neck: v[3],
            head: v[4],
            upper_arm: v[5],
            forearm: v[6],
            thigh: v[7],
            shin: v[8],
        }
    }
}

/// Angle ranges `[lo, hi]` in radians. Limb angles are measured from the
/// hanging-down direction, positive away from the body's midline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AngleRanges {
    pub global: [f64; 2],
    pub head: [f64; 2],
    pub shoulder: [f64; 2],
    pub elbow: [f64; 2],
    pub hip: [f64; 2],
    pub knee: [f64; 2],
}

impl Default for AngleRanges {
    fn default() -> Self {
        AngleRanges {
            global: [-PI, PI],
            head: [-0.4, 0.4],
            shoulder: [-0.6, 2.6],
            elbow: [0.0, 1.8],
            hip: [-0.3, 1.0],
            knee: [-1.4, 0.0],
        }
    }
}

impl AngleRanges {
    fn all(&self) -> [[f64; 2]; 6] {
        [self.global, self.head, self.shoulder, self.elbow, self.hip, self.knee]
    }

    /// Every range collapsed to zero width at 0.
    pub fn fixed() -> Self {
        AngleRanges {
            global: [0.0; 2],
            head: [0.0; 2],
            shoulder: [0.0; 2],
            elbow: [0.0; 2],
            hip: [0.0; 2],
            knee: [0.0; 2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseSamplerConfig {
    pub height: usize,
    pub width: usize,
    pub bones: BoneLengths,
    pub angles: AngleRanges,
    /// Joints must lie at least this far inside the canvas border.
    pub margin: f64,
    /// Per-joint probability of being marked invisible.
    pub occlusion_prob: f64,
}

impl Default for PoseSamplerConfig {
    fn default() -> Self {
        PoseSamplerConfig {
            height: 64,
            width: 64,
            bones: BoneLengths::default(),
            angles: AngleRanges::default(),
            margin: 4.0,
            occlusion_prob: 0.1,
        }
    }
}

impl PoseSamplerConfig {
    /// Canvas and bones scaled by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        PoseSamplerConfig {
            height: (self.height as f64 * s).round() as usize,
            width: (self.width as f64 * s).round() as usize,
            bones: self.bones.scaled(s),
            margin: self.margin * s,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bones.values().iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("bone lengths must be positive".into()));
        }
        for [lo, hi] in self.angles.all() {
            if !(lo <= hi) || lo < -PI || hi > PI {
                return Err(Error::Config(format!("angle range [{lo}, {hi}] must lie within [-pi, pi]")));
            }
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::Config("occlusion_prob must be in [0, 1]".into()));
        }
        if self.height == 0 || self.width == 0 || !(self.margin >= 0.0) {
            return Err(Error::Config("canvas must be non-empty and margin non-negative".into()));
        }
        Ok(())
    }

    pub fn canvas_center(&self) -> Point {
        Point::new((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0)
    }
}

fn draw(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn rotate(v: Point, a: f64) -> Point {
    mat_vec(&rotation_matrix(a), v)
}

/// Upright pose centred on the origin, before the global rotation.
fn body_frame_pose(cfg: &PoseSamplerConfig, rng: &mut impl Rng) -> Vec<Point> {
    let b = &cfg.bones;
    let a = &cfg.angles;
    let mut p = vec![Point::default(); NUM_JOINTS];
    let (ht, sw, hw) = (b.torso / 2.0, b.shoulder_width / 2.0, b.hip_width / 2.0);
    // The person faces the viewer: their right side is on the image left.
    p[R_SHOULDER] = Point::new(-sw, -ht);
    p[L_SHOULDER] = Point::new(sw, -ht);
    p[R_HIP] = Point::new(-hw, ht);
    p[L_HIP] = Point::new(hw, ht);
    p[NECK] = Point::new(0.0, -ht - b.neck);
    p[HEAD_TOP] = p[NECK] + rotate(UP, draw(rng, a.head)) * b.head;
    // side = +1 turns away from the midline on the image-left side
    for (side, root, mid, end, upper, lower, r1, r2) in [
        (1.0, R_SHOULDER, R_ELBOW, R_WRIST, b.upper_arm, b.forearm, a.shoulder, a.elbow),
        (-1.0, L_SHOULDER, L_ELBOW, L_WRIST, b.upper_arm, b.forearm, a.shoulder, a.elbow),
        (1.0, R_HIP, R_KNEE, R_ANKLE, b.thigh, b.shin, a.hip, a.knee),
        (-1.0, L_HIP, L_KNEE, L_ANKLE, b.thigh, b.shin, a.hip, a.knee),
    ] {
        let d1 = rotate(DOWN, side * draw(rng, r1));
        let d2 = rotate(d1, side * draw(rng, r2));
        p[mid] = p[root] + d1 * upper;
        p[end] = p[mid] + d2 * lower;
    }
    p
}

fn inside(p: Point, cfg: &PoseSamplerConfig) -> bool {
    let m = cfg.margin;
    p.x >= m && p.y >= m && p.x <= cfg.width as f64 - 1.0 - m && p.y <= cfg.height as f64 - 1.0 - m
}

/// Draw one pose: an upright kinematic tree with sampled joint angles,
/// rotated about its torso center by a sampled global angle and placed at
/// the canvas center.
///
/// Poses that leave the canvas are redrawn up to 100 times; after that the
/// last draw is shrunk about the canvas center until it fits. A shrink below
/// one quarter reports [`Error::CanvasTooSmall`].
pub fn sample_pose(cfg: &PoseSamplerConfig, rng: &mut impl Rng) -> Result<KeypointSet> {
    cfg.validate()?;
    let cc = cfg.canvas_center();
    let mut pts = Vec::new();
    for _ in 0..100 {
        let body = body_frame_pose(cfg, rng);
        let r = rotation_matrix(draw(rng, cfg.angles.global));
        pts = body.into_iter().map(|p| mat_vec(&r, p) + cc).collect::<Vec<_>>();
        if pts.iter().all(|&p| inside(p, cfg)) {
            break;
        }
    }
    if !pts.iter().all(|&p| inside(p, cfg)) {
        let half_w = (cfg.width as f64 - 1.0) / 2.0 - cfg.margin;
        let half_h = (cfg.height as f64 - 1.0) / 2.0 - cfg.margin;
        let reach_x = pts.iter().map(|p| (p.x - cc.x).abs()).fold(0.0, f64::max);
        let reach_y = pts.iter().map(|p| (p.y - cc.y).abs()).fold(0.0, f64::max);
        let s = (half_w / reach_x).min(half_h / reach_y);
        if !(s >= 0.25) {
            return Err(Error::CanvasTooSmall {
                height: cfg.height,
                width: cfg.width,
            });
        }
        pts = pts.into_iter().map(|p| (p - cc) * s + cc).collect();
    }
    let visible = (0..NUM_JOINTS)
        .map(|_| cfg.occlusion_prob == 0.0 || rng.random::<f64>() >= cfg.occlusion_prob)
        .collect();
    Ok(KeypointSet { points: pts, visible })
}

/// Detector error model applied to Gaussian groundtruth maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    /// Standard deviation (px, per axis) of the peak displacement.
    pub jitter_sigma: f64,
    /// Amplitudes are scaled by `1 + U(-a, a)`.
    pub amplitude_noise: f64,
    pub false_peak_prob: f64,
    /// Spurious peak height relative to the channel maximum.
    pub false_peak_gain: f64,
    pub false_peak_sigma: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            jitter_sigma: 2.0,
            amplitude_noise: 0.2,
            false_peak_prob: 0.2,
            false_peak_gain: 1.3,
            false_peak_sigma: 2.0,
        }
    }
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec {
            jitter_sigma: 0.0,
            amplitude_noise: 0.0,
            false_peak_prob: 0.0,
            false_peak_gain: 0.0,
            false_peak_sigma: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.jitter_sigma >= 0.0
            && (0.0..=1.0).contains(&self.amplitude_noise)
            && (0.0..=1.0).contains(&self.false_peak_prob)
            && self.false_peak_gain >= 0.0
            && self.false_peak_sigma > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid noise spec {self:?}")));
        }
        Ok(())
    }
}

/// Corrupt every joint channel of a Gaussian groundtruth stack: shift the
/// peak by `N(0, σ²)` per axis, rescale its amplitude, and with the
/// configured probability add a spurious peak at a uniform location. The
/// background channel is copied.
pub fn simulate_detector(gt: &ScoreMap, spec: &NoiseSpec, rng: &mut impl Rng) -> ScoreMap {
    let (c, h, w) = gt.shape();
    let mut out = gt.clone();
    let normal = (spec.jitter_sigma > 0.0).then(|| Normal::new(0.0, spec.jitter_sigma).unwrap());
    for ch in 0..c.saturating_sub(1) {
        if let Some(n) = &normal {
            let d = Point::new(n.sample(rng), n.sample(rng));
            let shifted = resample_plane(gt.channel(ch), h, w, |q| q - d);
            out.channel_mut(ch).copy_from_slice(&shifted);
        }
        if spec.amplitude_noise > 0.0 {
            let s = 1.0 + rng.random_range(-spec.amplitude_noise..=spec.amplitude_noise);
            out.channel_mut(ch).iter_mut().for_each(|v| *v *= s);
        }
        if spec.false_peak_prob > 0.0 && rng.random::<f64>() < spec.false_peak_prob {
            let peak = gt.channel(ch).iter().fold(0.0f64, |a, &b| a.max(b));
            let at = Point::new(rng.random_range(0.0..w as f64 - 1.0), rng.random_range(0.0..h as f64 - 1.0));
            render_gaussian(out.channel_mut(ch), h, w, at, spec.false_peak_sigma, spec.false_peak_gain * peak);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationMode {
    /// Any angle in `[0, 2π)`.
    Full,
    /// `±30°`.
    Limited,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentParams {
    pub scale: [f64; 2],
    pub flip_prob: f64,
    pub rotation: RotationMode,
}

impl AugmentParams {
    pub fn full_rotation() -> Self {
        AugmentParams {
            scale: [0.8, 1.25],
            flip_prob: 0.5,
            rotation: RotationMode::Full,
        }
    }

    pub fn limited_rotation() -> Self {
        AugmentParams {
            rotation: RotationMode::Limited,
            ..Self::full_rotation()
        }
    }

    pub fn identity() -> Self {
        AugmentParams {
            scale: [1.0, 1.0],
            flip_prob: 0.0,
            rotation: RotationMode::None,
        }
    }
}

/// A drawn augmentation: `p ↦ c + s·R(θ)·F(p − c)` where `F` mirrors x when
/// `flip` is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub scale: f64,
    pub flip: bool,
    pub theta: f64,
    pub center: Point,
}

impl Augmentation {
    pub fn draw(params: &AugmentParams, center: Point, rng: &mut impl Rng) -> Self {
        let scale = draw(rng, params.scale);
        let flip = params.flip_prob > 0.0 && rng.random::<f64>() < params.flip_prob;
        let theta = match params.rotation {
            RotationMode::Full => rng.random_range(0.0..TAU),
            RotationMode::Limited => rng.random_range(-FRAC_PI_6..=FRAC_PI_6),
            RotationMode::None => 0.0,
        };
        Augmentation {
            scale,
            flip,
            theta,
            center,
        }
    }

    pub fn apply(&self, p: Point) -> Point {
        let mut d = p - self.center;
        if self.flip {
            d.x = -d.x;
        }
        if self.theta != 0.0 {
            d = rotate(d, self.theta);
        }
        d * self.scale + self.center
    }

    pub fn apply_inverse(&self, p: Point) -> Point {
        let mut d = (p - self.center) * (1.0 / self.scale);
        if self.theta != 0.0 {
            d = rotate(d, -self.theta);
        }
        if self.flip {
            d.x = -d.x;
        }
        d + self.center
    }

    /// Transform keypoints; a flip also swaps left/right labels.
    pub fn keypoints(&self, kp: &KeypointSet, sk: &Skeleton) -> KeypointSet {
        let mut out = kp.clone();
        for j in 0..kp.len() {
            let to = if self.flip { sk.mirror_joint(j) } else { j };
            out.points[to] = self.apply(kp.points[j]);
            out.visible[to] = kp.visible[j];
        }
        out
    }

    /// Warp every channel (joint channels relabelled under a flip).
    pub fn map(&self, m: &ScoreMap, sk: &Skeleton) -> ScoreMap {
        let (c, h, w) = m.shape();
        let mut out = ScoreMap::zeros(c, h, w);
        let identity = self.scale == 1.0 && !self.flip && self.theta == 0.0;
        for ch in 0..c {
            let to = if self.flip && ch < sk.num_joints() { sk.mirror_joint(ch) } else { ch };
            let plane = if identity {
                m.channel(ch).to_vec()
            } else {
                resample_plane(m.channel(ch), h, w, |q| self.apply_inverse(q))
            };
            out.channel_mut(to).copy_from_slice(&plane);
        }
        out
    }
}

/// Draw one augmentation about the canvas center and apply it to the
/// keypoints and, if given, the maps.
pub fn augment(
    kp: &KeypointSet,
    map: Option<&ScoreMap>,
    params: &AugmentParams,
    sk: &Skeleton,
    center: Point,
    rng: &mut impl Rng,
) -> (KeypointSet, Option<ScoreMap>, Augmentation) {
    let a = Augmentation::draw(params, center, rng);
    (a.keypoints(kp, sk), map.map(|m| a.map(m, sk)), a)
}

/// Stick-figure rendering: one channel per bone holding
/// `exp(-d²/2σ²)` of the distance to the segment.
pub fn render_sticks(kp: &KeypointSet, sk: &Skeleton, height: usize, width: usize, sigma: f64) -> ScoreMap {
    let bones = sk.bones();
    let mut m = ScoreMap::zeros(bones.len(), height, width);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (c, &(a, b)) in bones.iter().enumerate() {
        let (pa, pb) = (kp.points[a], kp.points[b]);
        let ab = pb - pa;
        let len2 = ab.dot(ab);
        let plane = m.channel_mut(c);
        for y in 0..height {
            for x in 0..width {
                let q = Point::new(x as f64, y as f64);
                let t = if len2 > 0.0 { ((q - pa).dot(ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let d = q - (pa + ab * t);
                plane[y * width + x] = (-d.dot(d) * inv).exp();
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoremap::{extract_positions, make_groundtruth, GroundtruthSpec, ProbMapping};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn fixed_ranges_give_canonical_pose() {
        let cfg = PoseSamplerConfig {
            angles: AngleRanges::fixed(),
            occlusion_prob: 0.0,
            ..Default::default()
        };
        let a = sample_pose(&cfg, &mut rng(1)).unwrap();
        let b = sample_pose(&cfg, &mut rng(2)).unwrap();
        assert_eq!(a, b);
        let sk = canonical_skeleton();
        let c = torso_center(&a, &sk);
        assert_eq!(c, cfg.canvas_center());
        assert_eq!(a.points[NECK], c + Point::new(0.0, -15.0));
        assert_eq!(a.points[L_WRIST], a.points[L_SHOULDER] + Point::new(0.0, 15.0));
    }

    #[test]
    fn fixed_quarter_turn_makes_neck_horizontal() {
        let mut cfg = PoseSamplerConfig::default();
        cfg.angles.global = [FRAC_PI_2; 2];
        let sk = canonical_skeleton();
        let kp = sample_pose(&cfg, &mut rng(3)).unwrap();
        let v = kp.points[NECK] - torso_center(&kp, &sk);
        assert!(v.y.abs() < 1e-6 && v.x.abs() > 1.0);
    }

    #[test]
    fn bone_lengths_hold_and_joints_fit() {
        let cfg = PoseSamplerConfig::default();
        let b = cfg.bones;
        let mut r = rng(4);
        for _ in 0..200 {
            let kp = sample_pose(&cfg, &mut r).unwrap();
            for (root, mid, end, l1, l2) in [
                (L_SHOULDER, L_ELBOW, L_WRIST, b.upper_arm, b.forearm),
                (R_SHOULDER, R_ELBOW, R_WRIST, b.upper_arm, b.forearm),
                (L_HIP, L_KNEE, L_ANKLE, b.thigh, b.shin),
                (R_HIP, R_KNEE, R_ANKLE, b.thigh, b.shin),
            ] {
                let d1 = kp.points[mid].distance(kp.points[root]);
                let d2 = kp.points[end].distance(kp.points[mid]);
                // a shrunk pose keeps ratios, so compare ratios first
                assert!((d1 / d2 - l1 / l2).abs() < 1e-6);
            }
            assert!(kp.points.iter().all(|&p| inside(p, &cfg)));
        }
    }

    #[test]
    fn tiny_canvas_is_rejected() {
        let cfg = PoseSamplerConfig {
            height: 8,
            width: 8,
            ..Default::default()
        };
        assert!(matches!(sample_pose(&cfg, &mut rng(0)), Err(Error::CanvasTooSmall { .. })));
    }

    fn gt_for(kp: &KeypointSet) -> ScoreMap {
        make_groundtruth(kp, &canonical_skeleton(), &GroundtruthSpec::default(), 64, 64).unwrap()
    }

    #[test]
    fn zero_noise_is_bit_exact_and_extracts_groundtruth() {
        let cfg = PoseSamplerConfig::default();
        let mut r = rng(5);
        let sk = canonical_skeleton();
        let mut kp = sample_pose(&cfg, &mut r).unwrap();
        kp.points.iter_mut().for_each(|p| *p = Point::new(p.x.round(), p.y.round()));
        let gt = gt_for(&kp);
        let out = simulate_detector(&gt, &NoiseSpec::none(), &mut r);
        assert_eq!(out, gt);
        let ex = extract_positions(&out, &sk, 1.5, ProbMapping::Identity);
        assert_eq!(ex.points, kp.points);
    }

    #[test]
    fn jitter_error_magnitude() {
        // 1000 joints with σ = 2: mean radial error ≈ σ·√(π/2) ≈ 2.5
        let sk = canonical_skeleton();
        let cfg = PoseSamplerConfig::default();
        let spec = NoiseSpec {
            jitter_sigma: 2.0,
            ..NoiseSpec::none()
        };
        let mut r = rng(6);
        let (mut total, mut n) = (0.0, 0);
        while n < 1000 {
            let kp = sample_pose(&cfg, &mut r).unwrap();
            let det = simulate_detector(&gt_for(&kp), &spec, &mut r);
            let ex = extract_positions(&det, &sk, 1.5, ProbMapping::Identity);
            for j in 0..NUM_JOINTS {
                total += ex.points[j].distance(kp.points[j]);
                n += 1;
            }
        }
        let mean = total / n as f64;
        assert!((1.5..=3.5).contains(&mean), "mean error {mean}");
    }

    #[test]
    fn strong_false_peak_wins() {
        let sk = canonical_skeleton();
        let truth = Point::new(10.0, 10.0);
        let kp = KeypointSet::new(vec![truth; NUM_JOINTS]);
        let gt = gt_for(&kp);
        let spec = NoiseSpec {
            false_peak_prob: 1.0,
            false_peak_gain: 2.0,
            ..NoiseSpec::none()
        };
        let mut far = 0;
        for seed in 0..40 {
            let det = simulate_detector(&gt, &spec, &mut rng(seed));
            let ex = extract_positions(&det, &sk, 1.5, ProbMapping::Identity);
            for j in 0..NUM_JOINTS {
                // the spurious peak alone is det - gt
                let extra: Vec<f64> = det.channel(j).iter().zip(gt.channel(j)).map(|(a, b)| a - b).collect();
                let spur = crate::scoremap::argmax_row_major(&extra, 64);
                // reflective blur pulls peaks within ~3 px of the border onto the edge
                let interior = [spur.x, spur.y].iter().all(|v| (4.0..=59.0).contains(v));
                if interior && spur.distance(truth) > 6.0 {
                    far += 1;
                    assert!(ex.points[j].distance(spur) <= 1.5, "seed {seed} joint {j} {:?} {:?}", ex.points[j], spur);
                }
            }
        }
        assert!(far > 300, "{far}");
    }

    #[test]
    fn identity_augmentation_is_noop() {
        let sk = canonical_skeleton();
        let kp = sample_pose(&PoseSamplerConfig::default(), &mut rng(7)).unwrap();
        let gt = gt_for(&kp);
        let c = PoseSamplerConfig::default().canvas_center();
        let (k2, m2, _) = augment(&kp, Some(&gt), &AugmentParams::identity(), &sk, c, &mut rng(8));
        assert_eq!(k2, kp);
        assert_eq!(m2.unwrap(), gt);
    }

    #[test]
    fn double_flip_restores() {
        let sk = canonical_skeleton();
        let kp = sample_pose(&PoseSamplerConfig::default(), &mut rng(9)).unwrap();
        let a = Augmentation {
            scale: 1.0,
            flip: true,
            theta: 0.0,
            center: Point::new(31.5, 31.5),
        };
        let once = a.keypoints(&kp, &sk);
        assert_ne!(once.points[L_WRIST].x, kp.points[R_WRIST].x);
        assert_eq!(once.points[L_WRIST].y, kp.points[R_WRIST].y);
        let twice = a.keypoints(&once, &sk);
        for j in 0..NUM_JOINTS {
            assert!(twice.points[j].distance(kp.points[j]) < 1e-12);
            assert_eq!(twice.visible[j], kp.visible[j]);
        }
    }

    #[test]
    fn scaling_about_center() {
        let sk = canonical_skeleton();
        let kp = sample_pose(&PoseSamplerConfig::default(), &mut rng(10)).unwrap();
        let c = Point::new(31.5, 31.5);
        let a = Augmentation {
            scale: 1.25,
            flip: false,
            theta: 0.0,
            center: c,
        };
        let out = a.keypoints(&kp, &sk);
        for j in 0..NUM_JOINTS {
            let want = (kp.points[j] - c) * 1.25;
            let got = out.points[j] - c;
            assert!((want.x - got.x).abs() < 1e-12 && (want.y - got.y).abs() < 1e-12);
        }
    }

    #[test]
    fn map_augmentation_tracks_keypoints() {
        let sk = canonical_skeleton();
        let cfg = PoseSamplerConfig::default();
        let mut r = rng(11);
        let kp = sample_pose(&cfg, &mut r).unwrap();
        let params = AugmentParams {
            scale: [0.9, 1.1],
            flip_prob: 1.0,
            rotation: RotationMode::Limited,
        };
        let (k2, m2, _) = augment(&kp, Some(&gt_for(&kp)), &params, &sk, cfg.canvas_center(), &mut r);
        let ex = extract_positions(&m2.unwrap(), &sk, 1.5, ProbMapping::Identity);
        for j in 0..NUM_JOINTS {
            let p = k2.points[j];
            if p.x >= 0.0 && p.y >= 0.0 && p.x <= 63.0 && p.y <= 63.0 {
                assert!(ex.points[j].distance(p) <= 1.0, "joint {j}");
            }
        }
    }

    #[test]
    fn sticks_peak_on_bones() {
        let sk = canonical_skeleton();
        let kp = sample_pose(&PoseSamplerConfig::default(), &mut rng(12)).unwrap();
        let m = render_sticks(&kp, &sk, 64, 64, 1.0);
        assert_eq!(m.channels(), sk.bones().len());
        for (c, &(a, b)) in sk.bones().iter().enumerate() {
            let mid = (kp.points[a] + kp.points[b]) * 0.5;
            let v = m.get(c, mid.y.round() as usize, mid.x.round() as usize);
            assert!(v > 0.3, "bone {c}: {v}");
        }
    }

    proptest! {
        #[test]
        fn augmentation_preserves_length_ratios(seed in 0u64..1000) {
            let sk = canonical_skeleton();
            let cfg = PoseSamplerConfig::default();
            let mut r = rng(seed);
            let kp = sample_pose(&cfg, &mut r).unwrap();
            let (k2, _, a) = augment(&kp, None, &AugmentParams::full_rotation(), &sk, cfg.canvas_center(), &mut r);
            for &(p, q) in &sk.bones() {
                let before = kp.points[p].distance(kp.points[q]);
                let (p2, q2) = if a.flip { (sk.mirror_joint(p), sk.mirror_joint(q)) } else { (p, q) };
                let after = k2.points[p2].distance(k2.points[q2]);
                prop_assert!((after - a.scale * before).abs() < 1e-9);
            }
        }
    }
}
