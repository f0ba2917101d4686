//! Numerical property suites: transform and warp round trips, the warp
//! adjoint identity, and finite-difference gradient checks.

use std::f64::consts::{FRAC_PI_2, PI};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::geometry::{warp_backward, warp_map, Point, Transform2D};
use crate::nnet::{check_gradients, init_gaussian, Conv2d, GradCheckReport, Layer, LossKind, LossSpec, Padding, TinyNet};
use crate::scoremap::{render_gaussian, ScoreMap};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelfCheckOptions {
    pub seed: u64,
    /// Replace the warp adjoint with the inverse warp, which is not its
    /// adjoint. For exercising the harness only.
    pub break_adjoint: bool,
}

impl Default for SelfCheckOptions {
    fn default() -> Self {
        SelfCheckOptions {
            seed: 0,
            break_adjoint: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    /// The measured quantity and its bound.
    pub detail: String,
    pub seconds: f64,
}

fn random_map(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> ScoreMap {
    let data = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    ScoreMap::from_vec(c, h, w, data).unwrap()
}

fn random_transform(rng: &mut ChaCha8Rng, extent: f64) -> Transform2D {
    let theta = rng.random_range(-PI..PI);
    let c = Point::new(rng.random_range(0.0..extent), rng.random_range(0.0..extent));
    Transform2D::rotation(theta, c)
}

/// Largest `|t⁻¹(t(p)) − p|` over `n` random pairs.
pub fn point_roundtrip_error(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let t = random_transform(&mut rng, 100.0);
        let p = Point::new(rng.random_range(-50.0..150.0), rng.random_range(-50.0..150.0));
        let back = t.invert().apply(t.apply(p));
        worst = worst.max(back.distance(p));
    }
    worst
}

/// Quarter-turn warps against an index-permutation oracle, and the round
/// trip of a square map about its center. Returns the number of mismatching
/// values (zero when everything is bit-exact).
pub fn aligned_warp_mismatches(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let (h, w) = (rng.random_range(3..24), rng.random_range(3..24));
        let m = random_map(2, h, w, &mut rng);
        let k = rng.random_range(1..4);
        // integer centers keep the pixel grid on itself
        let (cx, cy) = (rng.random_range(0..w) as i64, rng.random_range(0..h) as i64);
        let t = Transform2D::rotation(k as f64 * FRAC_PI_2, Point::new(cx as f64, cy as f64));
        let out = warp_map(&m, &t, &[0, 1]);
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                // source pixel: undo k quarter turns, (dx, dy) -> (dy, -dx)
                let (mut dx, mut dy) = (x - cx, y - cy);
                for _ in 0..k {
                    (dx, dy) = (dy, -dx);
                }
                let (sx, sy) = (cx + dx, cy + dy);
                let inside = (0..w as i64).contains(&sx) && (0..h as i64).contains(&sy);
                for ch in 0..2 {
                    let want = if inside { m.get(ch, sy as usize, sx as usize) } else { 0.0 };
                    if out.get(ch, y as usize, x as usize).to_bits() != want.to_bits() {
                        bad += 1;
                    }
                }
            }
        }

        let n = rng.random_range(3..24);
        let sq = random_map(1, n, n, &mut rng);
        let mid = (n as f64 - 1.0) / 2.0;
        let t = Transform2D::rotation(k as f64 * FRAC_PI_2, Point::new(mid, mid));
        let back = warp_map(&warp_map(&sq, &t, &[0]), &t.invert(), &[0]);
        bad += sq.data().iter().zip(back.data()).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
    }
    bad
}

/// Worst `max |warp⁻¹(warp(m)) − m| / max |m|` over smooth maps whose
/// support stays inside the disk inscribed in the canvas. Bilinear
/// resampling loses about `1/(8σ²)` of the peak per pass, so the maps here
/// use σ between 5 and 7 px.
pub fn smooth_warp_roundtrip_ratio(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (64, 64);
    let mid = Point::new(31.5, 31.5);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let mut m = ScoreMap::zeros(1, h, w);
        for _ in 0..rng.random_range(1..4) {
            let p = mid + Point::new(rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0));
            render_gaussian(m.channel_mut(0), h, w, p, rng.random_range(5.0..7.0), rng.random_range(0.5..1.5));
        }
        let t = Transform2D::rotation(rng.random_range(-PI..PI), mid);
        let back = warp_map(&warp_map(&m, &t, &[0]), &t.invert(), &[0]);
        worst = worst.max(back.max_abs_diff(&m) / m.max_abs());
    }
    worst
}

/// Largest `|⟨warp(m), g⟩ − ⟨m, warp_backward(g)⟩|` over random cases.
pub fn adjoint_gap(cases: usize, seed: u64, broken: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (c, h, w) = (rng.random_range(1..4), rng.random_range(4..32), rng.random_range(4..32));
        let m = random_map(c, h, w, &mut rng);
        let g = random_map(c, h, w, &mut rng);
        let channels: Vec<usize> = (0..c).filter(|_| rng.random_bool(0.7)).collect();
        let t = random_transform(&mut rng, h.max(w) as f64);
        let lhs = warp_map(&m, &t, &channels).dot(&g);
        let gb = if broken {
            warp_map(&g, &t.invert(), &channels)
        } else {
            warp_backward(&g, &t, &channels)
        };
        worst = worst.max((lhs - m.dot(&gb)).abs());
    }
    worst
}

/// conv 3×3 (2→4), relu, conv 3×3 (4→4), relu, conv 1×1 (4→`cout`), and an
/// optional sigmoid-like output.
pub fn three_layer_net(cout: usize, sigmoid: bool, seed: u64) -> TinyNet {
    let mut layers = vec![
        Layer::conv(3, 2, 4),
        Layer::Relu,
        Layer::Conv2d(Conv2d::new(3, 3, 4, 4, 1, Padding::Same)),
        Layer::Relu,
        Layer::conv(1, 4, cout),
    ];
    if sigmoid {
        layers.push(Layer::SigmoidLike { w: 1.0, b: 0.0 });
    }
    let mut net = TinyNet::new(layers).expect("consistent shapes");
    init_gaussian(&mut net, 0.25, seed);
    if let Some(Layer::SigmoidLike { w, b }) = net.layers.last_mut() {
        *w = 0.8;
        *b = 0.1;
    }
    net
}

/// Finite-difference checks of the sigmoid cross-entropy (through a
/// sigmoid-like output) and of the masked softmax cross-entropy.
pub fn gradient_reports(seed: u64) -> Result<[GradCheckReport; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (8, 8);
    let net = three_layer_net(3, true, seed);
    let x = random_map(2, h, w, &mut rng);
    let mut t = random_map(3, h, w, &mut rng);
    t.data_mut().iter_mut().for_each(|v| *v = (*v + 1.0) / 2.0);
    let sig = check_gradients(&net, &x, &LossSpec::new(LossKind::SigmoidXentAll, t), 1e-3)?;

    let net = three_layer_net(3, false, seed + 1);
    let x = random_map(2, h, w, &mut rng);
    let mut t = ScoreMap::zeros(3, h, w);
    let mut mask = vec![1.0; h * w];
    for (p, m) in mask.iter_mut().enumerate() {
        t.channel_mut(rng.random_range(0..3))[p] = 1.0;
        if rng.random_bool(0.15) {
            *m = 0.0;
        }
    }
    let soft = check_gradients(&net, &x, &LossSpec::new(LossKind::SoftmaxXentVisible, t).with_mask(mask), 1e-3)?;
    Ok([sig, soft])
}

fn timed(name: &'static str, f: impl FnOnce() -> (bool, String)) -> SuiteResult {
    let start = Instant::now();
    let (passed, detail) = f();
    SuiteResult {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Run every suite.
pub fn run_suites(opts: &SelfCheckOptions) -> Vec<SuiteResult> {
    let s = opts.seed;
    vec![
        timed("point-roundtrip", || {
            let e = point_roundtrip_error(1000, s);
            (e <= 1e-9, format!("max error {e:.3e} px (bound 1e-9)"))
        }),
        timed("aligned-warp", || {
            let bad = aligned_warp_mismatches(50, s);
            (bad == 0, format!("{bad} values differ from the permutation oracle"))
        }),
        timed("smooth-warp-roundtrip", || {
            let r = smooth_warp_roundtrip_ratio(50, s);
            (r <= 0.02, format!("max error {:.3}% of map max (bound 2%)", 100.0 * r))
        }),
        timed("adjoint", || {
            let gap = adjoint_gap(100, s, opts.break_adjoint);
            (gap <= 1e-6, format!("max inner-product gap {gap:.3e} (bound 1e-6)"))
        }),
        timed("gradients", || match gradient_reports(s) {
            Ok([a, b]) => {
                let worst = a.max_rel_err.max(b.max_rel_err);
                (
                    worst <= 1e-4,
                    format!(
                        "sigmoid {:.2e} over {} params, softmax {:.2e} over {} params (bound 1e-4)",
                        a.max_rel_err, a.checked, b.max_rel_err, b.checked
                    ),
                )
            }
            Err(e) => (false, e.to_string()),
        }),
    ]
}
