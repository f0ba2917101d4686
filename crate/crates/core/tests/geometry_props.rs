use std::f64::consts::PI;

use proptest::prelude::*;

use posenorm::geometry::{rotation_matrix, mat_vec, signed_angle_between, warp_backward, warp_map, Point, Transform2D, UP};
use posenorm::scoremap::ScoreMap;

fn point(range: f64) -> impl Strategy<Value = Point> {
    (-range..range, -range..range).prop_map(|(x, y)| Point::new(x, y))
}

fn map(c: usize, h: usize, w: usize) -> impl Strategy<Value = ScoreMap> {
    prop::collection::vec(-1.0f64..1.0, c * h * w).prop_map(move |v| ScoreMap::from_vec(c, h, w, v).unwrap())
}

proptest! {
    #[test]
    fn inverse_undoes_transform(theta in -PI..PI, c in point(100.0), p in point(200.0)) {
        let t = Transform2D::rotation(theta, c);
        prop_assert!(t.invert().apply(t.apply(p)).distance(p) < 1e-9);
        prop_assert!(t.apply(t.invert().apply(p)).distance(p) < 1e-9);
    }

    #[test]
    fn rotations_preserve_distances(theta in -PI..PI, c in point(50.0), p in point(100.0), q in point(100.0)) {
        let t = Transform2D::rotation(theta, c);
        prop_assert!((t.apply(p).distance(t.apply(q)) - p.distance(q)).abs() < 1e-9);
        prop_assert!(t.apply(c).distance(c) < 1e-12);
        prop_assert!(t.orthonormality_error() < 1e-12);
    }

    #[test]
    fn signed_angle_aligns_with_target(v in point(10.0)) {
        prop_assume!(v.norm() > 1e-6);
        let theta = signed_angle_between(v, UP).unwrap();
        prop_assert!(theta > -PI && theta <= PI);
        let r = mat_vec(&rotation_matrix(theta), v);
        prop_assert!(r.x.abs() < 1e-9 * v.norm().max(1.0));
        prop_assert!(r.y < 0.0);
    }

    #[test]
    fn warp_backward_is_the_adjoint(m in map(2, 7, 9), g in map(2, 7, 9), theta in -PI..PI, c in point(8.0)) {
        let t = Transform2D::rotation(theta, c);
        let lhs = warp_map(&m, &t, &[0, 1]).dot(&g);
        let rhs = m.dot(&warp_backward(&g, &t, &[0, 1]));
        prop_assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn unselected_channels_are_untouched(m in map(3, 6, 6), theta in -PI..PI) {
        let t = Transform2D::rotation(theta, Point::new(2.5, 2.5));
        let out = warp_map(&m, &t, &[1]);
        prop_assert_eq!(out.channel(0), m.channel(0));
        prop_assert_eq!(out.channel(2), m.channel(2));
    }

    #[test]
    fn warping_never_amplifies(m in map(1, 8, 8), theta in -PI..PI, c in point(8.0)) {
        // bilinear weights are a convex combination or a partial one at the border
        let out = warp_map(&m, &Transform2D::rotation(theta, c), &[0]);
        prop_assert!(out.max_abs() <= m.max_abs() + 1e-12);
    }
}
