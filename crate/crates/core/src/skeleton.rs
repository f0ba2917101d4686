//! The 14-joint body schema shared by every other module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;

/// Number of joints in the canonical schema.
pub const NUM_JOINTS: usize = 14;
pub const NUM_LIMBS: usize = 4;

pub const R_ANKLE: usize = 0;
pub const R_KNEE: usize = 1;
pub const R_HIP: usize = 2;
pub const L_HIP: usize = 3;
pub const L_KNEE: usize = 4;
pub const L_ANKLE: usize = 5;
pub const R_WRIST: usize = 6;
pub const R_ELBOW: usize = 7;
pub const R_SHOULDER: usize = 8;
pub const L_SHOULDER: usize = 9;
pub const L_ELBOW: usize = 10;
pub const L_WRIST: usize = 11;
pub const NECK: usize = 12;
pub const HEAD_TOP: usize = 13;

const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "r-ankle",
    "r-knee",
    "r-hip",
    "l-hip",
    "l-knee",
    "l-ankle",
    "r-wrist",
    "r-elbow",
    "r-shoulder",
    "l-shoulder",
    "l-elbow",
    "l-wrist",
    "neck",
    "head-top",
];

/// A limb as (root, middle, end) joint indices, e.g. shoulder, elbow, wrist.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limb {
    pub name: &'static str,
    pub root: usize,
    pub middle: usize,
    pub end: usize,
}

impl Limb {
    pub fn joints(&self) -> [usize; 3] {
        [self.root, self.middle, self.end]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skeleton {
    pub joint_names: [&'static str; NUM_JOINTS],
    pub limb_defs: [Limb; NUM_LIMBS],
    /// l-shoulder, r-shoulder, l-hip, r-hip.
    pub torso_joints: [usize; 4],
    pub neck_index: usize,
    pub head_index: usize,
}

/// The fixed 14-joint skeleton in LSP joint order.
pub fn canonical_skeleton() -> Skeleton {
    let sk = Skeleton {
        joint_names: JOINT_NAMES,
        limb_defs: [
            Limb { name: "l-arm", root: L_SHOULDER, middle: L_ELBOW, end: L_WRIST },
            Limb { name: "r-arm", root: R_SHOULDER, middle: R_ELBOW, end: R_WRIST },
            Limb { name: "l-leg", root: L_HIP, middle: L_KNEE, end: L_ANKLE },
            Limb { name: "r-leg", root: R_HIP, middle: R_KNEE, end: R_ANKLE },
        ],
        torso_joints: [L_SHOULDER, R_SHOULDER, L_HIP, R_HIP],
        neck_index: NECK,
        head_index: HEAD_TOP,
    };
    debug_assert!(sk.validate().is_ok());
    sk
}

impl Default for Skeleton {
    fn default() -> Self {
        canonical_skeleton()
    }
}

impl Skeleton {
    pub fn num_joints(&self) -> usize {
        NUM_JOINTS
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| *n == name)
    }

    pub fn l_shoulder(&self) -> usize {
        self.torso_joints[0]
    }

    pub fn r_hip(&self) -> usize {
        self.torso_joints[3]
    }

    /// Index of the limb containing `joint`, if any.
    pub fn limb_of(&self, joint: usize) -> Option<usize> {
        self.limb_defs.iter().position(|l| l.joints().contains(&joint))
    }

    /// Joint index with left and right exchanged (identity for center joints).
    pub fn mirror_joint(&self, joint: usize) -> usize {
        let name = self.joint_names[joint];
        let swapped = if let Some(rest) = name.strip_prefix("l-") {
            format!("r-{rest}")
        } else if let Some(rest) = name.strip_prefix("r-") {
            format!("l-{rest}")
        } else {
            return joint;
        };
        self.joint_index(&swapped).unwrap_or(joint)
    }

    /// Segments drawn when rendering a stick figure.
    pub fn bones(&self) -> Vec<(usize, usize)> {
        let [ls, rs, lh, rh] = self.torso_joints;
        let mut bones = vec![
            (self.head_index, self.neck_index),
            (self.neck_index, ls),
            (self.neck_index, rs),
            (ls, lh),
            (rs, rh),
            (lh, rh),
        ];
        for l in &self.limb_defs {
            bones.push((l.root, l.middle));
            bones.push((l.middle, l.end));
        }
        bones
    }

    pub fn validate(&self) -> Result<()> {
        let k = NUM_JOINTS;
        let bad = |m: String| Err(Error::InvalidSkeleton(m));
        for l in &self.limb_defs {
            let j = l.joints();
            if j.iter().any(|&i| i >= k) {
                return bad(format!("limb {} has an out-of-range joint", l.name));
            }
            if j[0] == j[1] || j[1] == j[2] || j[0] == j[2] {
                return bad(format!("limb {} repeats a joint", l.name));
            }
            if !self.torso_joints.contains(&l.root) {
                return bad(format!("limb {} root is not a torso joint", l.name));
            }
        }
        for (i, a) in self.limb_defs.iter().enumerate() {
            for b in &self.limb_defs[i + 1..] {
                if a.end == b.end {
                    return bad(format!("joint {} ends two limbs", a.end));
                }
            }
        }
        if self.torso_joints.iter().any(|&i| i >= k) || self.neck_index >= k || self.head_index >= k {
            return bad("joint index out of range".into());
        }
        Ok(())
    }
}

/// Joint coordinates for one person in image pixels, plus visibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub points: Vec<Point>,
    pub visible: Vec<bool>,
}

impl KeypointSet {
    /// All joints visible.
    pub fn new(points: Vec<Point>) -> Self {
        let visible = vec![true; points.len()];
        KeypointSet { points, visible }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self, sk: &Skeleton) -> Result<()> {
        if self.points.len() != sk.num_joints() || self.visible.len() != sk.num_joints() {
            return Err(Error::SchemaMismatch(format!(
                "expected {} joints, found {} points / {} visibility flags",
                sk.num_joints(),
                self.points.len(),
                self.visible.len()
            )));
        }
        if let Some(i) = self.points.iter().position(|p| !p.is_finite()) {
            return Err(Error::SchemaMismatch(format!("joint {i} has a non-finite coordinate")));
        }
        Ok(())
    }

    /// Apply `f` to every point, keeping visibility.
    pub fn map_points(&self, f: impl Fn(Point) -> Point) -> Self {
        KeypointSet {
            points: self.points.iter().map(|&p| f(p)).collect(),
            visible: self.visible.clone(),
        }
    }
}

/// Mean of the four torso joints. Visibility is ignored.
pub fn torso_center(kp: &KeypointSet, sk: &Skeleton) -> Point {
    let s = sk
        .torso_joints
        .iter()
        .fold(Point::default(), |acc, &j| acc + kp.points[j]);
    s * 0.25
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn with_torso(pts: [(f64, f64); 4]) -> KeypointSet {
        let sk = canonical_skeleton();
        let mut points = vec![Point::default(); NUM_JOINTS];
        for (j, (x, y)) in sk.torso_joints.iter().zip(pts) {
            points[*j] = Point::new(x, y);
        }
        KeypointSet::new(points)
    }

    #[test]
    fn canonical_schema() {
        let sk = canonical_skeleton();
        assert_eq!(sk.joint_names[12], "neck");
        assert!(sk
            .limb_defs
            .iter()
            .any(|l| (l.root, l.middle, l.end) == (L_SHOULDER, L_ELBOW, L_WRIST)));
        let mut torso = sk.torso_joints;
        torso.sort();
        assert_eq!(torso, [R_HIP, L_HIP, R_SHOULDER, L_SHOULDER]);
        sk.validate().unwrap();
    }

    #[test]
    fn mirror_pairs() {
        let sk = canonical_skeleton();
        assert_eq!(sk.mirror_joint(L_WRIST), R_WRIST);
        assert_eq!(sk.mirror_joint(R_HIP), L_HIP);
        assert_eq!(sk.mirror_joint(NECK), NECK);
        for j in 0..NUM_JOINTS {
            assert_eq!(sk.mirror_joint(sk.mirror_joint(j)), j);
        }
    }

    #[test]
    fn validate_rejects_bad_limbs() {
        let mut sk = canonical_skeleton();
        sk.limb_defs[0].end = sk.limb_defs[1].end;
        assert!(sk.validate().is_err());
        let mut sk = canonical_skeleton();
        sk.limb_defs[2].root = NECK;
        assert!(sk.validate().is_err());
    }

    #[test]
    fn torso_center_examples() {
        let sk = canonical_skeleton();
        let c = torso_center(&with_torso([(0., 0.), (2., 0.), (0., 2.), (2., 2.)]), &sk);
        assert_eq!(c, Point::new(1.0, 1.0));
        let c = torso_center(&with_torso([(5., 7.); 4]), &sk);
        assert_eq!(c, Point::new(5.0, 7.0));
        let c = torso_center(&with_torso([(10., 10.), (30., 10.), (12., 50.), (28., 50.)]), &sk);
        assert_eq!(c, Point::new(20.0, 30.0));
    }

    proptest! {
        #[test]
        fn torso_center_translation_equivariant(
            pts in prop::array::uniform4((-100.0f64..100.0, -100.0f64..100.0)),
            tx in -50.0f64..50.0, ty in -50.0f64..50.0,
        ) {
            let sk = canonical_skeleton();
            let kp = with_torso(pts);
            let t = Point::new(tx, ty);
            let moved = kp.map_points(|p| p + t);
            let a = torso_center(&moved, &sk);
            let b = torso_center(&kp, &sk) + t;
            prop_assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9);
        }

        #[test]
        fn torso_center_permutation_invariant(
            pts in prop::array::uniform4((-100.0f64..100.0, -100.0f64..100.0)),
        ) {
            let sk = canonical_skeleton();
            let a = torso_center(&with_torso(pts), &sk);
            let b = torso_center(&with_torso([pts[3], pts[1], pts[0], pts[2]]), &sk);
            prop_assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9);
        }
    }
}
