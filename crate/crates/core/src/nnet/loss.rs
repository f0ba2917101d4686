use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoremap::{sigmoid, ScoreMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Per-pixel softmax over all channels against one-hot labels. Pixels
    /// with mask weight 0 (inside an occluded joint's disk) are skipped.
    SoftmaxXentVisible,
    /// Elementwise sigmoid cross-entropy against targets in `[0, 1]`, every
    /// joint supervised.
    SigmoidXentAll,
}

/// How per-pixel loss terms are reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    /// Plain sum over pixels and channels.
    #[default]
    Sum,
    /// Sum divided by the number of pixels of one plane.
    PerPixel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    pub target: ScoreMap,
    /// Optional per-pixel weight over one `H × W` plane.
    pub mask: Option<Vec<f64>>,
    pub norm: LossNorm,
}

impl LossSpec {
    pub fn new(kind: LossKind, target: ScoreMap) -> Self {
        LossSpec {
            kind,
            target,
            mask: None,
            norm: LossNorm::Sum,
        }
    }

    pub fn with_mask(mut self, mask: Vec<f64>) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn with_norm(mut self, norm: LossNorm) -> Self {
        self.norm = norm;
        self
    }

    fn scale(&self) -> f64 {
        match self.norm {
            LossNorm::Sum => 1.0,
            LossNorm::PerPixel => 1.0 / self.target.plane_len() as f64,
        }
    }

    /// Loss value and its gradient with respect to the logits `z`.
    pub fn evaluate(&self, z: &ScoreMap) -> Result<(f64, ScoreMap)> {
        if z.shape() != self.target.shape() {
            return Err(Error::shape(format!("{:?}", self.target.shape()), format!("{:?}", z.shape())));
        }
        let n = z.plane_len();
        if let Some(m) = &self.mask {
            if m.len() != n {
                return Err(Error::shape(format!("mask of {n} pixels"), m.len()));
            }
        }
        let weight = |p: usize| self.mask.as_ref().map_or(1.0, |m| m[p]);
        let s = self.scale();
        let mut grad = ScoreMap::zeros(z.channels(), z.height(), z.width());
        let mut total = 0.0;
        match self.kind {
            LossKind::SigmoidXentAll => {
                let (zs, ts, gs) = (z.data(), self.target.data(), grad.data_mut());
                for i in 0..zs.len() {
                    let wgt = weight(i % n) * s;
                    if wgt == 0.0 {
                        continue;
                    }
                    let (zi, ti) = (zs[i], ts[i]);
                    total += wgt * (zi.max(0.0) - zi * ti + (-zi.abs()).exp().ln_1p());
                    gs[i] = wgt * (sigmoid(zi) - ti);
                }
            }
            LossKind::SoftmaxXentVisible => {
                let c = z.channels();
                let (zs, ts) = (z.data(), self.target.data());
                let gs = grad.data_mut();
                for p in 0..n {
                    let wgt = weight(p) * s;
                    if wgt == 0.0 {
                        continue;
                    }
                    let max = (0..c).map(|ch| zs[ch * n + p]).fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + (0..c).map(|ch| (zs[ch * n + p] - max).exp()).sum::<f64>().ln();
                    let tsum: f64 = (0..c).map(|ch| ts[ch * n + p]).sum();
                    for ch in 0..c {
                        let i = ch * n + p;
                        let logp = zs[i] - lse;
                        total -= wgt * ts[i] * logp;
                        gs[i] = wgt * (logp.exp() * tsum - ts[i]);
                    }
                }
            }
        }
        Ok((total, grad))
    }
}
