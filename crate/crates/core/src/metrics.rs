//! PCK / AUC evaluation and compactness of relative joint positions.

use std::fmt::Write as _;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::normalize::{body_transform_params, limb_transform_params, normalize_points, NormalizationRecord, StageTransform};
use crate::skeleton::{torso_center, KeypointSet, Skeleton, NUM_LIMBS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RefMode {
    /// `|l-shoulder − r-hip|`.
    #[default]
    Torso,
    /// `|head-top − neck|`.
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub alpha: f64,
    pub ref_mode: RefMode,
    /// AUC integrates total PCK over `α ∈ {0, step, …, auc_max}`.
    pub auc_max: f64,
    pub auc_step: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            alpha: 0.2,
            ref_mode: RefMode::Torso,
            auc_max: 0.5,
            auc_step: 0.01,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.auc_step > 0.0) || !(self.auc_max >= 0.0) {
            return Err(Error::Config(format!("invalid eval config {self:?}")));
        }
        Ok(())
    }

    /// The sampled thresholds, computed as `auc_max · i / n` so the grid
    /// points are as exact as the endpoints allow.
    pub fn auc_alphas(&self) -> Vec<f64> {
        let n = (self.auc_max / self.auc_step).round() as usize;
        if n == 0 {
            return vec![0.0];
        }
        (0..=n).map(|i| self.auc_max * i as f64 / n as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Per-joint PCK in percent, canonical joint order.
    #[serde(serialize_with = "ordered_map", deserialize_with = "pairs_from_map")]
    pub per_joint: Vec<(String, f64)>,
    pub total: f64,
    pub auc: f64,
    pub n_images: usize,
}

fn ordered_map<S: Serializer>(pairs: &[(String, f64)], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_map(pairs.iter().map(|(k, v)| (k, v)))
}

fn pairs_from_map<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<(String, f64)>, D::Error> {
    struct Pairs;
    impl<'de> Visitor<'de> for Pairs {
        type Value = Vec<(String, f64)>;
        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            f.write_str("a map of joint name to percentage")
        }
        fn visit_map<A: MapAccess<'de>>(self, mut m: A) -> std::result::Result<Self::Value, A::Error> {
            let mut out = Vec::new();
            while let Some(kv) = m.next_entry()? {
                out.push(kv);
            }
            Ok(out)
        }
    }
    d.deserialize_map(Pairs)
}

impl EvalReport {
    pub fn joint(&self, name: &str) -> Option<f64> {
        self.per_joint.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// Mean PCK over the given joints.
    pub fn mean_over(&self, joints: &[usize]) -> f64 {
        joints.iter().map(|&j| self.per_joint[j].1).sum::<f64>() / joints.len() as f64
    }
}

pub fn reference_length(gt: &KeypointSet, sk: &Skeleton, mode: RefMode) -> f64 {
    match mode {
        RefMode::Torso => gt.points[sk.l_shoulder()].distance(gt.points[sk.r_hip()]),
        RefMode::Head => gt.points[sk.head_index].distance(gt.points[sk.neck_index]),
    }
}

/// Distance and reference length per (image, joint).
fn distances(preds: &[KeypointSet], gts: &[KeypointSet], sk: &Skeleton, mode: RefMode) -> Result<Vec<(Vec<f64>, f64)>> {
    if preds.len() != gts.len() {
        return Err(Error::shape(format!("{} predictions", gts.len()), preds.len()));
    }
    if gts.is_empty() {
        return Err(Error::EmptyEval);
    }
    preds
        .iter()
        .zip(gts)
        .map(|(p, g)| {
            p.validate(sk)?;
            g.validate(sk)?;
            let d = p.points.iter().zip(&g.points).map(|(a, b)| a.distance(*b)).collect();
            Ok((d, reference_length(g, sk, mode)))
        })
        .collect()
}

fn per_joint_at(dists: &[(Vec<f64>, f64)], k: usize, alpha: f64) -> Vec<f64> {
    let n = dists.len() as f64;
    (0..k)
        .map(|j| {
            let hits = dists.iter().filter(|(d, lr)| d[j] <= alpha * lr).count();
            100.0 * hits as f64 / n
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per-joint and total PCK at `cfg.alpha`, plus AUC.
///
/// A joint counts as correct when `|pred − gt| ≤ α·l_r` (inclusive); the
/// total is the unweighted mean over joints.
pub fn pck(preds: &[KeypointSet], gts: &[KeypointSet], sk: &Skeleton, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let dists = distances(preds, gts, sk, cfg.ref_mode)?;
    let k = sk.num_joints();
    let per = per_joint_at(&dists, k, cfg.alpha);
    let auc = cfg
        .auc_alphas()
        .iter()
        .map(|&a| mean(&per_joint_at(&dists, k, a)))
        .sum::<f64>()
        / cfg.auc_alphas().len() as f64;
    Ok(EvalReport {
        per_joint: sk.joint_names.iter().map(|n| n.to_string()).zip(per.iter().copied()).collect(),
        total: mean(&per),
        auc,
        n_images: gts.len(),
    })
}

/// Mean of total PCK over the configured threshold grid, in percent.
pub fn auc(preds: &[KeypointSet], gts: &[KeypointSet], sk: &Skeleton, cfg: &EvalConfig) -> Result<f64> {
    Ok(pck(preds, gts, sk, cfg)?.auc)
}

/// Side-by-side per-joint table, one column per report.
pub fn format_table(columns: &[(&str, &EvalReport)]) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<12}", "joint");
    for (name, _) in columns {
        let _ = write!(s, " {name:>14}");
    }
    s.push('\n');
    if let Some((_, first)) = columns.first() {
        for (j, (joint, _)) in first.per_joint.iter().enumerate() {
            let _ = write!(s, "{joint:<12}");
            for (_, r) in columns {
                let _ = write!(s, " {:>14.2}", r.per_joint[j].1);
            }
            s.push('\n');
        }
    }
    for (label, f) in [("total", (|r: &EvalReport| r.total) as fn(&EvalReport) -> f64), ("auc", |r| r.auc)] {
        let _ = write!(s, "{label:<12}");
        for (_, r) in columns {
            let _ = write!(s, " {:>14.2}", f(r));
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    Joint(usize),
    TorsoCenter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Raw,
    BodyNormalized,
    LimbNormalized,
}

/// Normalization transforms computed from annotated points.
pub fn point_record(kp: &KeypointSet, sk: &Skeleton, stage: Stage) -> NormalizationRecord {
    let mut rec = NormalizationRecord::identity();
    if stage == Stage::Raw {
        return rec;
    }
    rec.body = body_transform_params(kp, sk, 1e-3);
    if stage == Stage::LimbNormalized {
        let body = kp.map_points(|p| rec.body.transform.apply(p));
        rec.limbs = std::array::from_fn::<StageTransform, NUM_LIMBS, _>(|l| limb_transform_params(&body, sk, l, 1e-3));
    }
    rec
}

/// `p_joint − p_ref` per sample after the stage's transforms are applied to
/// the annotated points.
pub fn relative_positions(corpus: &[KeypointSet], sk: &Skeleton, joint: usize, reference: Reference, stage: Stage) -> Vec<Point> {
    corpus
        .iter()
        .map(|kp| {
            let n = normalize_points(kp, &point_record(kp, sk, stage), sk);
            let r = match reference {
                Reference::Joint(j) => n.points[j],
                Reference::TorsoCenter => torso_center(&n, sk),
            };
            n.points[joint] - r
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Compactness {
    /// Trace of the `n − 1` sample covariance (px²).
    pub cov_trace: f64,
    /// Nearest-rank 90th percentile of the distance to the centroid (px).
    pub r90: f64,
}

pub fn compactness(cloud: &[Point]) -> Result<Compactness> {
    let n = cloud.len();
    if n < 2 {
        return Err(Error::TooFewPoints(n));
    }
    let c = cloud.iter().fold(Point::default(), |a, &p| a + p) * (1.0 / n as f64);
    let ss: f64 = cloud.iter().map(|&p| (p - c).dot(p - c)).sum();
    let mut d: Vec<f64> = cloud.iter().map(|&p| p.distance(c)).collect();
    d.sort_by(f64::total_cmp);
    let rank = (0.9 * n as f64).ceil() as usize;
    Ok(Compactness {
        cov_trace: ss / (n - 1) as f64,
        r90: d[rank.max(1) - 1],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{canonical_skeleton, L_SHOULDER, L_WRIST, NECK, NUM_JOINTS, R_HIP};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::TAU;

    fn body(lr: f64) -> KeypointSet {
        let mut pts: Vec<Point> = (0..NUM_JOINTS).map(|j| Point::new(j as f64 * 3.0, 7.0)).collect();
        pts[L_SHOULDER] = Point::new(0.0, 0.0);
        pts[R_HIP] = Point::new(0.0, lr);
        KeypointSet::new(pts)
    }

    #[test]
    fn perfect_and_inclusive() {
        let sk = canonical_skeleton();
        let gt = body(100.0);
        let r = pck(&[gt.clone()], &[gt.clone()], &sk, &EvalConfig::default()).unwrap();
        assert_eq!(r.total, 100.0);
        assert_eq!(r.auc, 100.0);
        let mut p = gt.clone();
        p.points[3].x += 20.0;
        let r = pck(&[p], &[gt], &sk, &EvalConfig::default()).unwrap();
        assert_eq!(r.per_joint[3].1, 100.0);
    }

    #[test]
    fn one_joint_off_by_25() {
        let sk = canonical_skeleton();
        let gt = body(100.0);
        let mut p = gt.clone();
        p.points[5].y += 25.0;
        let r = pck(&[p], &[gt], &sk, &EvalConfig::default()).unwrap();
        for (j, (_, v)) in r.per_joint.iter().enumerate() {
            assert_eq!(*v, if j == 5 { 0.0 } else { 100.0 });
        }
        assert!((r.total - 1300.0 / 14.0).abs() < 1e-12);
    }

    #[test]
    fn auc_step_function() {
        // every joint offset by exactly 0.25·l_r: correct for α ∈ {0.25, …, 0.50}
        let sk = canonical_skeleton();
        let gt = body(100.0);
        let p = gt.map_points(|q| q + Point::new(15.0, 20.0));
        let a = auc(&[p], &[gt], &sk, &EvalConfig::default()).unwrap();
        assert_eq!(a, 2600.0 / 51.0);
        assert!((a - 50.98).abs() < 0.005);
    }

    #[test]
    fn far_predictions_score_zero_and_empty_errors() {
        let sk = canonical_skeleton();
        let gt = body(10.0);
        let p = gt.map_points(|q| q + Point::new(6.0, 0.0));
        assert_eq!(auc(&[p], &[gt], &sk, &EvalConfig::default()).unwrap(), 0.0);
        assert!(matches!(pck(&[], &[], &sk, &EvalConfig::default()), Err(Error::EmptyEval)));
    }

    #[test]
    fn head_mode_uses_head_segment() {
        let sk = canonical_skeleton();
        let mut gt = body(100.0);
        gt.points[NECK] = Point::new(50.0, 50.0);
        gt.points[sk.head_index] = Point::new(50.0, 40.0);
        assert_eq!(reference_length(&gt, &sk, RefMode::Head), 10.0);
        let mut p = gt.clone();
        p.points[0].x += 2.5;
        let cfg = EvalConfig {
            ref_mode: RefMode::Head,
            ..Default::default()
        };
        assert_eq!(pck(&[p], &[gt], &sk, &cfg).unwrap().per_joint[0].1, 0.0);
    }

    #[test]
    fn report_json_keeps_joint_order() {
        let sk = canonical_skeleton();
        let gt = body(100.0);
        let r = pck(&[gt.clone()], &[gt], &sk, &EvalConfig::default()).unwrap();
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.find("r-ankle").unwrap() < text.find("head-top").unwrap());
        let back: EvalReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
        let table = format_table(&[("a", &r), ("b", &r)]);
        assert_eq!(table.lines().count(), 1 + NUM_JOINTS + 2);
        assert!(table.lines().nth(1).unwrap().starts_with("r-ankle"));
    }

    #[test]
    fn compactness_examples() {
        let same = vec![Point::new(3.0, 4.0); 10];
        assert_eq!(compactness(&same).unwrap(), Compactness { cov_trace: 0.0, r90: 0.0 });
        let circle: Vec<Point> = (0..360)
            .map(|i| {
                let t = TAU * i as f64 / 360.0;
                Point::new(t.cos(), t.sin())
            })
            .collect();
        let c = compactness(&circle).unwrap();
        assert!((c.cov_trace - 360.0 / 359.0).abs() < 1e-9);
        assert!((c.r90 - 1.0).abs() < 1e-9);
        assert!(matches!(compactness(&same[..1]), Err(Error::TooFewPoints(1))));
    }

    #[test]
    fn compactness_matches_direct_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let n = rng.random_range(2..50);
            let cloud: Vec<Point> = (0..n)
                .map(|_| Point::new(rng.random_range(-9.0..9.0), rng.random_range(-3.0..12.0)))
                .collect();
            let mx = cloud.iter().map(|p| p.x).sum::<f64>() / n as f64;
            let my = cloud.iter().map(|p| p.y).sum::<f64>() / n as f64;
            let vx = cloud.iter().map(|p| (p.x - mx).powi(2)).sum::<f64>() / (n - 1) as f64;
            let vy = cloud.iter().map(|p| (p.y - my).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((compactness(&cloud).unwrap().cov_trace - (vx + vy)).abs() < 1e-9);
        }
    }

    #[test]
    fn body_stage_collapses_rotated_copies() {
        let sk = canonical_skeleton();
        let base = body(40.0);
        let c = torso_center(&base, &sk);
        let corpus: Vec<KeypointSet> = (0..36)
            .map(|i| {
                let t = crate::geometry::Transform2D::rotation(TAU * i as f64 / 36.0, c);
                base.map_points(|p| t.apply(p))
            })
            .collect();
        let raw = relative_positions(&corpus, &sk, NECK, Reference::TorsoCenter, Stage::Raw);
        let norm = relative_positions(&corpus, &sk, NECK, Reference::TorsoCenter, Stage::BodyNormalized);
        assert!(compactness(&raw).unwrap().cov_trace > 1.0);
        for p in &norm {
            assert!(p.distance(norm[0]) < 1e-6);
        }
        // raw stage is a plain difference
        assert_eq!(raw[0], base.points[NECK] - c);
    }

    #[test]
    fn limb_stage_matches_standalone_trig() {
        let sk = canonical_skeleton();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let kp = KeypointSet::new(
                (0..NUM_JOINTS)
                    .map(|_| Point::new(rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)))
                    .collect(),
            );
            let got = relative_positions(&[kp.clone()], &sk, L_WRIST, Reference::Joint(L_SHOULDER), Stage::LimbNormalized)[0];
            // body: rotate so center→neck points up; limb: shoulder→elbow points down
            let rot = |v: Point, a: f64| Point::new(a.cos() * v.x - a.sin() * v.y, a.sin() * v.x + a.cos() * v.y);
            let c = torso_center(&kp, &sk);
            let vn = kp.points[NECK] - c;
            let a1 = -vn.x.atan2(-vn.y);
            let sh = rot(kp.points[L_SHOULDER] - c, a1);
            let el = rot(kp.points[sk.limb_defs[0].middle] - c, a1);
            let wr = rot(kp.points[L_WRIST] - c, a1);
            let u = el - sh;
            let a2 = u.x.atan2(u.y);
            let want = rot(wr - sh, a2);
            assert!(got.distance(want) < 1e-9, "{got:?} vs {want:?}");
        }
    }

    proptest! {
        #[test]
        fn pck_monotone_and_isometry_invariant(seed in 0u64..500, a1 in 0.01f64..0.5, a2 in 0.01f64..0.5, theta in -3.0f64..3.0) {
            let sk = canonical_skeleton();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut ChaCha8Rng| KeypointSet::new((0..NUM_JOINTS).map(|_| Point::new(rng.random_range(0.0..64.0), rng.random_range(0.0..64.0))).collect());
            let gts: Vec<_> = (0..5).map(|_| mk(&mut rng)).collect();
            let preds: Vec<_> = gts.iter().map(|g| {
                let mut k = g.clone();
                k.points.iter_mut().for_each(|p| *p = *p + Point::new(rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)));
                k
            }).collect();
            let (lo, hi) = (a1.min(a2), a1.max(a2));
            let at = |a: f64| pck(&preds, &gts, &sk, &EvalConfig { alpha: a, ..Default::default() }).unwrap().total;
            prop_assert!(at(lo) <= at(hi));
            let t = crate::geometry::Transform2D::rotation(theta, Point::new(7.0, -3.0));
            let mv = |v: &[KeypointSet]| v.iter().map(|k| k.map_points(|p| t.apply(p) + Point::new(100.0, 5.0))).collect::<Vec<_>>();
            let moved = pck(&mv(&preds), &mv(&gts), &sk, &EvalConfig { alpha: hi, ..Default::default() }).unwrap().total;
            // isometries can move a distance across the threshold by rounding only
            prop_assert!((moved - at(hi)).abs() <= 100.0 / 70.0 + 1e-9);
        }

        #[test]
        fn compactness_scales(s in 0.1f64..10.0, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cloud: Vec<Point> = (0..30).map(|_| Point::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0))).collect();
            let a = compactness(&cloud).unwrap();
            let b = compactness(&cloud.iter().map(|&p| p * s).collect::<Vec<_>>()).unwrap();
            prop_assert!((b.cov_trace - s * s * a.cov_trace).abs() <= 1e-9 * b.cov_trace.max(1.0));
            prop_assert!((b.r90 - s * a.r90).abs() <= 1e-9 * b.r90.max(1.0));
        }
    }
}
