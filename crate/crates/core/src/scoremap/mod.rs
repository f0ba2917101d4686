//! Score maps: the `(K+1) × H × W` stacks passed between pipeline stages,
//! plus groundtruth rendering, probability mappings, blurring and joint
//! position extraction.

mod smap;

pub use smap::{decode_smap, encode_smap, read_smap, write_smap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::skeleton::{KeypointSet, Skeleton};

/// A stack of real-valued maps, channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ScoreMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ScoreMap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let n = channels * height * width;
        if data.len() != n {
            return Err(Error::shape(
                format!("{channels}x{height}x{width} = {n} values"),
                data.len(),
            ));
        }
        Ok(ScoreMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &ScoreMap) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Copy of the listed channels, in the listed order.
    pub fn select_channels(&self, channels: &[usize]) -> ScoreMap {
        let mut out = ScoreMap::zeros(channels.len(), self.height, self.width);
        for (dst, &c) in channels.iter().enumerate() {
            out.channel_mut(dst).copy_from_slice(self.channel(c));
        }
        out
    }

    /// Stack maps of equal spatial size along the channel axis.
    pub fn concat(maps: &[&ScoreMap]) -> Result<ScoreMap> {
        let first = maps
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero maps".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut channels = 0;
        for m in maps {
            if (m.height, m.width) != (h, w) {
                return Err(Error::shape(format!("{h}x{w}"), format!("{}x{}", m.height, m.width)));
            }
            data.extend_from_slice(&m.data);
            channels += m.channels;
        }
        ScoreMap::from_vec(channels, h, w, data)
    }

    /// Zero-pad every side by `margin` pixels.
    pub fn pad(&self, margin: usize) -> ScoreMap {
        let (h, w) = (self.height + 2 * margin, self.width + 2 * margin);
        let mut out = ScoreMap::zeros(self.channels, h, w);
        for c in 0..self.channels {
            for y in 0..self.height {
                let src = &self.channel(c)[y * self.width..(y + 1) * self.width];
                let start = (y + margin) * w + margin;
                out.channel_mut(c)[start..start + self.width].copy_from_slice(src);
            }
        }
        out
    }

    pub fn dot(&self, other: &ScoreMap) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundtruthMode {
    /// Binary disks of radius `radius_factor · |l-shoulder − r-hip|`.
    Disk,
    /// Unnormalized Gaussians with peak value 1.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundtruthSpec {
    pub mode: GroundtruthMode,
    pub radius_factor: f64,
    pub gauss_sigma: f64,
    /// Radius substituted when the body-scale joints coincide. Zero disables
    /// the substitution and surfaces [`Error::DegenerateBody`].
    pub min_radius: f64,
    /// Label visible joints only (detection supervision). Refinement
    /// supervision labels every joint.
    pub visible_only: bool,
}

impl Default for GroundtruthSpec {
    fn default() -> Self {
        GroundtruthSpec {
            mode: GroundtruthMode::Gaussian,
            radius_factor: 0.15,
            gauss_sigma: 2.0,
            min_radius: 1.0,
            visible_only: false,
        }
    }
}

impl GroundtruthSpec {
    pub fn disk() -> Self {
        GroundtruthSpec {
            mode: GroundtruthMode::Disk,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius_factor > 0.0) || !(self.gauss_sigma > 0.0) || self.min_radius < 0.0 {
            return Err(Error::Config(format!("invalid groundtruth spec {self:?}")));
        }
        Ok(())
    }
}

/// `factor · |p_l-shoulder − p_r-hip|`.
pub fn groundtruth_radius(kp: &KeypointSet, sk: &Skeleton, factor: f64) -> Result<f64> {
    let d = kp.points[sk.l_shoulder()].distance(kp.points[sk.r_hip()]);
    if d == 0.0 {
        return Err(Error::DegenerateBody);
    }
    Ok(factor * d)
}

/// Render a `(K+1)`-channel groundtruth stack for one person.
///
/// Disk mode labels every pixel within distance `r` (inclusive) of a joint;
/// a pixel inside several disks goes to the nearest joint, ties to the lower
/// index, and the last channel marks pixels owned by no joint. Gaussian mode
/// writes `exp(-d²/2σ²)` per joint and leaves the background channel zero.
pub fn make_groundtruth(
    kp: &KeypointSet,
    sk: &Skeleton,
    spec: &GroundtruthSpec,
    height: usize,
    width: usize,
) -> Result<ScoreMap> {
    kp.validate(sk)?;
    let k = kp.len();
    let labeled: Vec<bool> = (0..k).map(|j| !spec.visible_only || kp.visible[j]).collect();
    let mut m = ScoreMap::zeros(k + 1, height, width);
    match spec.mode {
        GroundtruthMode::Disk => {
            let r = match groundtruth_radius(kp, sk, spec.radius_factor) {
                Err(Error::DegenerateBody) if spec.min_radius > 0.0 => spec.min_radius,
                other => other?,
            };
            for y in 0..height {
                for x in 0..width {
                    let p = Point::new(x as f64, y as f64);
                    let mut best: Option<(usize, f64)> = None;
                    for j in (0..k).filter(|&j| labeled[j]) {
                        let d = p.distance(kp.points[j]);
                        if d <= r && best.is_none_or(|(_, bd)| d < bd) {
                            best = Some((j, d));
                        }
                    }
                    let c = best.map_or(k, |(j, _)| j);
                    m.set(c, y, x, 1.0);
                }
            }
        }
        GroundtruthMode::Gaussian => {
            for j in (0..k).filter(|&j| labeled[j]) {
                render_gaussian(m.channel_mut(j), height, width, kp.points[j], spec.gauss_sigma, 1.0);
            }
        }
    }
    Ok(m)
}

/// Add `gain · exp(-|p − center|² / 2σ²)` to every pixel of `plane`.
pub fn render_gaussian(plane: &mut [f64], height: usize, width: usize, center: Point, sigma: f64, gain: f64) {
    let inv = 1.0 / (2.0 * sigma * sigma);
    for y in 0..height {
        let dy = y as f64 - center.y;
        for x in 0..width {
            let dx = x as f64 - center.x;
            plane[y * width + x] += gain * (-(dx * dx + dy * dy) * inv).exp();
        }
    }
}

/// Gaussian maps for the listed joints only, one channel each.
pub fn gaussian_targets(points: &[Point], joints: &[usize], sigma: f64, height: usize, width: usize) -> ScoreMap {
    let mut m = ScoreMap::zeros(joints.len(), height, width);
    for (c, &j) in joints.iter().enumerate() {
        render_gaussian(m.channel_mut(c), height, width, points[j], sigma, 1.0);
    }
    m
}

/// Normalized 1-D Gaussian taps on `[-⌈3σ⌉, ⌈3σ⌉]`.
pub fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Mirror an out-of-range index back into `0..n` (edge pixel not repeated).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Separable Gaussian blur of one `height × width` plane.
pub fn blur_plane(plane: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel_1d(sigma);
    let radius = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0;
            for (t, kv) in kernel.iter().enumerate() {
                acc += kv * row[reflect(x as isize + t as isize - radius, width)];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (t, kv) in kernel.iter().enumerate() {
                acc += kv * tmp[reflect(y as isize + t as isize - radius, height) * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Per-channel Gaussian blur, kernel truncated at `±⌈3σ⌉` and renormalized,
/// reflective boundary.
pub fn gaussian_blur(m: &ScoreMap, sigma: f64) -> ScoreMap {
    assert!(sigma > 0.0, "blur sigma must be positive");
    let mut out = m.clone();
    for c in 0..m.channels() {
        let b = blur_plane(m.channel(c), m.height(), m.width(), sigma);
        out.channel_mut(c).copy_from_slice(&b);
    }
    out
}

/// Mapping from raw scores to probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProbMapping {
    /// Per-pixel softmax across all channels.
    Softmax,
    /// Elementwise `1 / (1 + e^-(w·x + b))`.
    SigmoidLike { w: f64, b: f64 },
    #[default]
    Identity,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn score_to_prob(m: &ScoreMap, mode: ProbMapping) -> ScoreMap {
    match mode {
        ProbMapping::Identity => m.clone(),
        ProbMapping::SigmoidLike { w, b } => {
            let mut out = m.clone();
            for v in out.data_mut() {
                *v = sigmoid(w * *v + b);
            }
            out
        }
        ProbMapping::Softmax => {
            let mut out = m.clone();
            let n = m.plane_len();
            let c = m.channels();
            let data = out.data_mut();
            for p in 0..n {
                let max = (0..c).map(|ch| data[ch * n + p]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for ch in 0..c {
                    let e = (data[ch * n + p] - max).exp();
                    data[ch * n + p] = e;
                    sum += e;
                }
                for ch in 0..c {
                    data[ch * n + p] /= sum;
                }
            }
            out
        }
    }
}

/// Location of the largest value; the first in row-major order wins ties.
pub fn argmax_row_major(plane: &[f64], width: usize) -> Point {
    let mut best = 0;
    for (i, v) in plane.iter().enumerate() {
        if *v > plane[best] {
            best = i;
        }
    }
    Point::new((best % width) as f64, (best / width) as f64)
}

/// Positions of the maxima of the listed channels after mapping and blur.
pub fn extract_channels(m: &ScoreMap, channels: &[usize], blur_sigma: f64, mode: ProbMapping) -> Vec<Point> {
    assert!(blur_sigma > 0.0, "blur sigma must be positive");
    let mapped;
    let src = if mode == ProbMapping::Identity {
        m
    } else {
        mapped = score_to_prob(m, mode);
        &mapped
    };
    channels
        .iter()
        .map(|&c| {
            let b = blur_plane(src.channel(c), m.height(), m.width(), blur_sigma);
            argmax_row_major(&b, m.width())
        })
        .collect()
}

/// Joint positions from the first `K` channels of `m`; the background
/// channel, if present, only takes part in the probability mapping. All
/// joints are reported visible.
pub fn extract_positions(m: &ScoreMap, sk: &Skeleton, blur_sigma: f64, mode: ProbMapping) -> KeypointSet {
    let k = sk.num_joints();
    assert!(m.channels() >= k, "need at least {k} joint channels, got {}", m.channels());
    let joints: Vec<usize> = (0..k).collect();
    KeypointSet::new(extract_channels(m, &joints, blur_sigma, mode))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{canonical_skeleton, L_SHOULDER, NUM_JOINTS, R_HIP};
    use proptest::prelude::*;

    fn kp_with(pairs: &[(usize, Point)]) -> KeypointSet {
        let mut pts = vec![Point::new(1.0, 1.0); NUM_JOINTS];
        for (j, p) in pairs {
            pts[*j] = *p;
        }
        KeypointSet::new(pts)
    }

    #[test]
    fn radius_examples() {
        let sk = canonical_skeleton();
        let kp = kp_with(&[(L_SHOULDER, Point::new(10., 10.)), (R_HIP, Point::new(10., 50.))]);
        assert!((groundtruth_radius(&kp, &sk, 0.15).unwrap() - 6.0).abs() < 1e-12);
        let kp = kp_with(&[(L_SHOULDER, Point::new(0., 0.)), (R_HIP, Point::new(30., 40.))]);
        assert!((groundtruth_radius(&kp, &sk, 0.15).unwrap() - 7.5).abs() < 1e-12);
        let kp = kp_with(&[(L_SHOULDER, Point::new(3., 3.)), (R_HIP, Point::new(3., 3.))]);
        assert!(matches!(groundtruth_radius(&kp, &sk, 0.15), Err(Error::DegenerateBody)));
    }

    fn spread_pose() -> KeypointSet {
        let pts = (0..NUM_JOINTS)
            .map(|j| Point::new(4.0 + 3.0 * (j % 5) as f64, 3.0 + 5.0 * (j / 5) as f64))
            .collect();
        KeypointSet::new(pts)
    }

    #[test]
    fn gaussian_groundtruth_values() {
        let sk = canonical_skeleton();
        let kp = spread_pose();
        let spec = GroundtruthSpec { gauss_sigma: 2.0, ..Default::default() };
        let m = make_groundtruth(&kp, &sk, &spec, 24, 24).unwrap();
        let p = kp.points[0];
        assert_eq!(m.get(0, p.y as usize, p.x as usize), 1.0);
        // one sigma to the right
        let v = m.get(0, p.y as usize, p.x as usize + 2);
        assert!((v - (-0.5f64).exp()).abs() < 1e-12);
        assert!((v - 0.6065).abs() < 1e-4);
        assert!(m.channel(NUM_JOINTS).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn disk_boundary_is_inclusive() {
        let sk = canonical_skeleton();
        // l-shoulder (10,10), r-hip (10,50) gives r = 6 exactly.
        let mut kp = kp_with(&[(L_SHOULDER, Point::new(10., 10.)), (R_HIP, Point::new(10., 50.))]);
        for j in 0..NUM_JOINTS {
            if j != L_SHOULDER && j != R_HIP {
                kp.points[j] = Point::new(50.0, 50.0);
            }
        }
        let m = make_groundtruth(&kp, &sk, &GroundtruthSpec::disk(), 60, 60).unwrap();
        assert_eq!(m.get(L_SHOULDER, 10, 16), 1.0);
        assert_eq!(m.get(L_SHOULDER, 10, 17), 0.0);
        assert_eq!(m.get(NUM_JOINTS, 10, 17), 1.0);
    }

    #[test]
    fn disk_overlap_goes_to_nearest_then_lower_index() {
        let sk = canonical_skeleton();
        let mut kp = kp_with(&[(L_SHOULDER, Point::new(10., 10.)), (R_HIP, Point::new(10., 50.))]);
        kp.points[0] = Point::new(30.0, 30.0);
        kp.points[1] = Point::new(34.0, 30.0);
        for j in 2..NUM_JOINTS {
            if j != L_SHOULDER && j != R_HIP {
                kp.points[j] = Point::new(55.0, 5.0);
            }
        }
        let m = make_groundtruth(&kp, &sk, &GroundtruthSpec::disk(), 60, 60).unwrap();
        assert_eq!(m.get(0, 30, 31), 1.0);
        assert_eq!(m.get(1, 30, 33), 1.0);
        // equidistant pixel
        assert_eq!(m.get(0, 30, 32), 1.0);
        assert_eq!(m.get(1, 30, 32), 0.0);
    }

    #[test]
    fn disk_visible_only_skips_occluded() {
        let sk = canonical_skeleton();
        let mut kp = spread_pose();
        kp.visible[0] = false;
        let spec = GroundtruthSpec { visible_only: true, ..GroundtruthSpec::disk() };
        let m = make_groundtruth(&kp, &sk, &spec, 24, 24).unwrap();
        assert!(m.channel(0).iter().all(|v| *v == 0.0));
        let spec = GroundtruthSpec::disk();
        let m = make_groundtruth(&kp, &sk, &spec, 24, 24).unwrap();
        assert!(m.channel(0).iter().any(|v| *v == 1.0));
    }

    #[test]
    fn degenerate_body_falls_back_to_min_radius() {
        let sk = canonical_skeleton();
        let kp = kp_with(&[(L_SHOULDER, Point::new(5., 5.)), (R_HIP, Point::new(5., 5.))]);
        let spec = GroundtruthSpec { min_radius: 0.0, ..GroundtruthSpec::disk() };
        assert!(matches!(make_groundtruth(&kp, &sk, &spec, 8, 8), Err(Error::DegenerateBody)));
        let spec = GroundtruthSpec { min_radius: 1.0, ..GroundtruthSpec::disk() };
        assert!(make_groundtruth(&kp, &sk, &spec, 8, 8).is_ok());
    }

    #[test]
    fn blur_preserves_constants() {
        let m = ScoreMap::from_vec(2, 7, 9, vec![0.25; 2 * 7 * 9]).unwrap();
        let b = gaussian_blur(&m, 1.3);
        assert!(b.max_abs_diff(&m) < 1e-15);
    }

    #[test]
    fn blur_impulse_center_matches_2d_kernel() {
        let mut m = ScoreMap::zeros(1, 15, 15);
        m.set(0, 7, 7, 1.0);
        let b = gaussian_blur(&m, 1.0);
        // direct evaluation of the truncated, renormalized 2-D kernel
        let mut total = 0.0;
        for i in -3i32..=3 {
            for j in -3i32..=3 {
                total += (-((i * i + j * j) as f64) / 2.0).exp();
            }
        }
        assert!((b.get(0, 7, 7) - 1.0 / total).abs() < 1e-14);
    }

    #[test]
    fn blur_is_linear() {
        let mut a = ScoreMap::zeros(1, 30, 30);
        a.set(0, 8, 8, 1.0);
        let mut b = ScoreMap::zeros(1, 30, 30);
        b.set(0, 20, 22, 2.0);
        let mut ab = a.clone();
        ab.set(0, 20, 22, 2.0);
        let lhs = gaussian_blur(&ab, 1.5);
        let (ba, bb) = (gaussian_blur(&a, 1.5), gaussian_blur(&b, 1.5));
        for i in 0..lhs.data().len() {
            assert!((lhs.data()[i] - ba.data()[i] - bb.data()[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(9, 5), 1);
        assert_eq!(reflect(-7, 1), 0);
    }

    #[test]
    fn prob_mappings() {
        let m = ScoreMap::from_vec(4, 2, 2, vec![0.7; 16]).unwrap();
        let s = score_to_prob(&m, ProbMapping::Softmax);
        assert!(s.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
        let z = ScoreMap::from_vec(1, 1, 1, vec![0.0]).unwrap();
        assert_eq!(score_to_prob(&z, ProbMapping::SigmoidLike { w: 1.0, b: 0.0 }).data()[0], 0.5);
        let one = ScoreMap::from_vec(1, 1, 1, vec![1.0]).unwrap();
        let v = score_to_prob(&one, ProbMapping::SigmoidLike { w: 2.0, b: 1.0 }).data()[0];
        assert!((v - 1.0 / (1.0 + (-3.0f64).exp())).abs() < 1e-15);
        assert!((v - 0.9526).abs() < 1e-4);
        assert_eq!(score_to_prob(&one, ProbMapping::Identity), one);
    }

    #[test]
    fn argmax_tie_break_is_row_major() {
        let w = 12;
        let mut plane = vec![0.0; w * 8];
        plane[5 * w + 2] = 1.0;
        plane[w + 9] = 1.0;
        assert_eq!(argmax_row_major(&plane, w), Point::new(9.0, 1.0));
    }

    #[test]
    fn extract_single_impulse_and_interior_ties() {
        let sk = canonical_skeleton();
        let mut m = ScoreMap::zeros(NUM_JOINTS + 1, 16, 16);
        m.set(4, 3, 7, 1.0);
        let kp = extract_positions(&m, &sk, 1.5, ProbMapping::Identity);
        assert_eq!(kp.points[4], Point::new(7.0, 3.0));

        let mut m = ScoreMap::zeros(NUM_JOINTS + 1, 32, 32);
        m.set(2, 15, 12, 1.0);
        m.set(2, 11, 19, 1.0);
        let kp = extract_positions(&m, &sk, 1.5, ProbMapping::Identity);
        assert_eq!(kp.points[2], Point::new(19.0, 11.0));
        assert!(kp.visible.iter().all(|v| *v));
    }

    #[test]
    fn extract_matches_exhaustive_scan() {
        use rand::{Rng, SeedableRng};
        let sk = canonical_skeleton();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut m = ScoreMap::zeros(NUM_JOINTS + 1, 20, 24);
        for v in m.data_mut() {
            *v = rng.random::<f64>() * 0.3;
        }
        m.set(5, 12, 6, 3.0);
        let kp = extract_positions(&m, &sk, 1.5, ProbMapping::Identity);
        let blurred = gaussian_blur(&m, 1.5);
        for j in 0..NUM_JOINTS {
            let (mut bx, mut by, mut bv) = (0, 0, f64::NEG_INFINITY);
            for y in 0..20 {
                for x in 0..24 {
                    if blurred.get(j, y, x) > bv {
                        (bx, by, bv) = (x, y, blurred.get(j, y, x));
                    }
                }
            }
            assert_eq!(kp.points[j], Point::new(bx as f64, by as f64));
        }
        assert_eq!(kp.points[5], Point::new(6.0, 12.0));
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(vals in prop::collection::vec(-30.0f64..30.0, 5 * 6)) {
            let m = ScoreMap::from_vec(5, 2, 3, vals).unwrap();
            let s = score_to_prob(&m, ProbMapping::Softmax);
            for p in 0..6 {
                let sum: f64 = (0..5).map(|c| s.channel(c)[p]).sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
            }
            prop_assert!(s.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn extraction_invariant_to_positive_affine_rescale(
            vals in prop::collection::vec(0.0f64..1.0, 15 * 10 * 10),
            scale in 0.1f64..10.0,
            shift in -5.0f64..5.0,
        ) {
            let sk = canonical_skeleton();
            let m = ScoreMap::from_vec(15, 10, 10, vals).unwrap();
            // a strong peak per channel keeps the comparison away from near-ties
            let mut m = m;
            for c in 0..NUM_JOINTS {
                m.set(c, (c * 3) % 10, (c * 7) % 10, 20.0);
            }
            let mut r = m.clone();
            for v in r.data_mut() {
                *v = *v * scale + shift;
            }
            let a = extract_positions(&m, &sk, 1.5, ProbMapping::Identity);
            let b = extract_positions(&r, &sk, 1.5, ProbMapping::Identity);
            prop_assert_eq!(a.points, b.points);
        }

        #[test]
        fn disk_labels_partition_the_image(dx in 0.0f64..3.0, dy in 0.0f64..3.0) {
            let sk = canonical_skeleton();
            let kp = spread_pose().map_points(|p| p + Point::new(dx, dy));
            let m = make_groundtruth(&kp, &sk, &GroundtruthSpec::disk(), 24, 24).unwrap();
            for p in 0..m.plane_len() {
                let ones = (0..m.channels()).filter(|&c| m.channel(c)[p] == 1.0).count();
                let zeros = (0..m.channels()).filter(|&c| m.channel(c)[p] == 0.0).count();
                prop_assert_eq!(ones, 1);
                prop_assert_eq!(zeros, m.channels() - 1);
            }
        }

        #[test]
        fn blur_preserves_interior_mass(
            vals in prop::collection::vec(0.0f64..1.0, 16),
            sigma in 0.5f64..2.0,
        ) {
            let mut m = ScoreMap::zeros(1, 30, 30);
            for (i, v) in vals.iter().enumerate() {
                m.set(0, 13 + i / 4, 13 + i % 4, *v);
            }
            let b = gaussian_blur(&m, sigma);
            let before: f64 = m.data().iter().sum();
            let after: f64 = b.data().iter().sum();
            prop_assert!((before - after).abs() < 1e-6);
        }
    }
}
