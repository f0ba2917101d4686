//! Central finite-difference check of back-propagated gradients.
//!
//! The reference loss is recomputed from the network's *output* with plain
//! formulas (no shared code with [`LossSpec::evaluate`]), so a bug in either
//! the loss gradient or any layer's backward pass shows up as a mismatch.

use super::{Layer, LossKind, LossNorm, LossSpec, TinyNet};
use crate::error::Result;
use crate::scoremap::ScoreMap;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over all checked parameters.
    pub max_rel_err: f64,
    /// Flat index (see [`TinyNet::parameters`]) of that parameter.
    pub worst_param: usize,
    pub checked: usize,
    /// Parameters skipped because a ±ε step flipped a ReLU, where the loss
    /// is not differentiable.
    pub skipped_kinks: usize,
}

/// Loss of `net` on `x`, computed from the output alone.
pub fn reference_loss(net: &TinyNet, x: &ScoreMap, loss: &LossSpec) -> Result<f64> {
    let y = net.predict(x)?;
    let n = y.plane_len();
    let w = |p: usize| loss.mask.as_ref().map_or(1.0, |m| m[p]);
    let s = match loss.norm {
        LossNorm::Sum => 1.0,
        LossNorm::PerPixel => 1.0 / n as f64,
    };
    let t = loss.target.data();
    let ys = y.data();
    let mut total = 0.0;
    match loss.kind {
        LossKind::SigmoidXentAll => {
            let sigmoid_out = matches!(net.layers.last(), Some(Layer::SigmoidLike { .. }));
            for i in 0..ys.len() {
                let p = if sigmoid_out { ys[i] } else { 1.0 / (1.0 + (-ys[i]).exp()) };
                total -= s * w(i % n) * (t[i] * p.ln() + (1.0 - t[i]) * (1.0 - p).ln());
            }
        }
        LossKind::SoftmaxXentVisible => {
            let c = y.channels();
            for p in 0..n {
                let denom: f64 = (0..c).map(|ch| ys[ch * n + p].exp()).sum();
                for ch in 0..c {
                    let prob = ys[ch * n + p].exp() / denom;
                    total -= s * w(p) * t[ch * n + p] * prob.ln();
                }
            }
        }
    }
    Ok(total)
}

fn relu_pattern(net: &TinyNet, x: &ScoreMap) -> Result<Vec<bool>> {
    let acts = net.forward(x)?;
    let mut out = Vec::new();
    for (i, l) in net.layers.iter().enumerate() {
        if matches!(l, Layer::Relu) {
            out.extend(acts.values[i].data().iter().map(|v| *v > 0.0));
        }
    }
    Ok(out)
}

/// Compare every analytic parameter gradient against
/// `(L(p + ε) − L(p − ε)) / 2ε`.
///
/// Relative error is `|a − n| / max(|a|, |n|)`; pairs where both values are
/// below `1e-10` count as exact.
pub fn check_gradients(net: &TinyNet, x: &ScoreMap, loss: &LossSpec, eps: f64) -> Result<GradCheckReport> {
    let acts = net.forward(x)?;
    let (grads, _) = net.backward(&acts, loss)?;
    let analytic = grads.flatten();
    let base = net.parameters();
    let base_pattern = relu_pattern(net, x)?;
    let mut probe = net.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: 0,
        checked: 0,
        skipped_kinks: 0,
    };
    let mut params = base.clone();
    for i in 0..base.len() {
        params[i] = base[i] + eps;
        probe.set_parameters(&params)?;
        let up = reference_loss(&probe, x, loss)?;
        let kink_up = relu_pattern(&probe, x)? != base_pattern;
        params[i] = base[i] - eps;
        probe.set_parameters(&params)?;
        let down = reference_loss(&probe, x, loss)?;
        let kink_down = relu_pattern(&probe, x)? != base_pattern;
        params[i] = base[i];
        if kink_up || kink_down {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let scale = a.abs().max(numeric.abs());
        let rel = if scale < 1e-10 { 0.0 } else { (a - numeric).abs() / scale };
        report.checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_param = i;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{init_gaussian, Conv2d, Padding};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> ScoreMap {
        let data = (0..c * h * w).map(|_| rng.random_range(lo..hi)).collect();
        ScoreMap::from_vec(c, h, w, data).unwrap()
    }

    fn three_layer(sigmoid: bool, cout: usize, seed: u64) -> TinyNet {
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
        let mut net = TinyNet::new(layers).unwrap();
        init_gaussian(&mut net, 0.25, seed);
        if let Some(Layer::SigmoidLike { w, b }) = net.layers.last_mut() {
            *w = 0.8;
            *b = 0.1;
        }
        net
    }

    #[test]
    fn sigmoid_loss_gradients_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = three_layer(true, 3, 2);
        let x = random_map(2, 8, 8, &mut rng, -1.0, 1.0);
        let t = random_map(3, 8, 8, &mut rng, 0.0, 1.0);
        let r = check_gradients(&net, &x, &LossSpec::new(LossKind::SigmoidXentAll, t), 1e-3).unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
        assert!(r.checked > net.param_count() * 9 / 10, "{r:?}");
    }

    #[test]
    fn softmax_loss_gradients_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = three_layer(false, 3, 4);
        let x = random_map(2, 8, 8, &mut rng, -1.0, 1.0);
        let mut t = ScoreMap::zeros(3, 8, 8);
        let mut mask = vec![1.0; 64];
        for p in 0..64 {
            t.channel_mut(rng.random_range(0..3))[p] = 1.0;
            if p % 7 == 0 {
                mask[p] = 0.0;
            }
        }
        let spec = LossSpec::new(LossKind::SoftmaxXentVisible, t).with_mask(mask);
        let r = check_gradients(&net, &x, &spec, 1e-3).unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }

    #[test]
    fn sigmoid_like_parameters_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = TinyNet::new(vec![Layer::conv(1, 1, 1), Layer::SigmoidLike { w: 1.3, b: -0.2 }]).unwrap();
        let mut net = net;
        if let Layer::Conv2d(c) = &mut net.layers[0] {
            c.weight[0] = 0.7;
        }
        let x = random_map(1, 4, 4, &mut rng, -2.0, 2.0);
        let t = random_map(1, 4, 4, &mut rng, 0.0, 1.0);
        let r = check_gradients(&net, &x, &LossSpec::new(LossKind::SigmoidXentAll, t), 1e-3).unwrap();
        assert_eq!(r.checked, 4);
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }
}
