//! A small convolutional network engine: batch-of-one forward and backward
//! passes over [`ScoreMap`] tensors, two cross-entropy losses, SGD and
//! Gaussian initialization.
//!
//! Convolutions are cross-correlations (no kernel flip) with a per-output
//! bias, computed through im2col and a dense matrix product.

mod checkpoint;
mod gradcheck;
mod loss;

pub use checkpoint::{decode_tnet, encode_tnet, read_tnet, write_tnet};
pub use gradcheck::{check_gradients, reference_loss, GradCheckReport};
pub use loss::{LossKind, LossNorm, LossSpec};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoremap::{sigmoid, ScoreMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2` on each side; preserves size at stride 1.
    Same,
    Valid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub padding: Padding,
    /// `[cout][cin][kh][kw]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new(kh: usize, kw: usize, cin: usize, cout: usize, stride: usize, padding: Padding) -> Self {
        assert!(stride >= 1, "stride must be at least 1");
        if padding == Padding::Same {
            assert!(kh % 2 == 1 && kw % 2 == 1, "same padding needs odd kernels");
        }
        Conv2d {
            kh,
            kw,
            cin,
            cout,
            stride,
            padding,
            weight: vec![0.0; cout * cin * kh * kw],
            bias: vec![0.0; cout],
        }
    }

    fn pads(&self) -> (usize, usize) {
        match self.padding {
            Padding::Same => ((self.kh - 1) / 2, (self.kw - 1) / 2),
            Padding::Valid => (0, 0),
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = self.pads();
        if h + 2 * ph < self.kh || w + 2 * pw < self.kw {
            return Err(Error::shape(
                format!("input of at least {}x{}", self.kh, self.kw),
                format!("{h}x{w}"),
            ));
        }
        Ok((
            (h + 2 * ph - self.kh) / self.stride + 1,
            (w + 2 * pw - self.kw) / self.stride + 1,
        ))
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Unfold `x` into a `(cin·kh·kw) × (oh·ow)` row-major matrix.
    fn im2col(&self, x: &ScoreMap, oh: usize, ow: usize) -> Vec<f64> {
        let (h, w) = (x.height() as isize, x.width() as isize);
        let (ph, pw) = self.pads();
        let p = oh * ow;
        let mut col = vec![0.0; self.patch_len() * p];
        for ci in 0..self.cin {
            let plane = x.channel(ci);
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &mut col[((ci * self.kh + i) * self.kw + j) * p..][..p];
                    for oy in 0..oh {
                        let sy = (oy * self.stride + i) as isize - ph as isize;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        let src = &plane[sy as usize * w as usize..][..w as usize];
                        let dst = &mut row[oy * ow..][..ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let sx = (ox * self.stride + j) as isize - pw as isize;
                            if sx >= 0 && sx < w {
                                *d = src[sx as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> ScoreMap {
        let (ph, pw) = self.pads();
        let p = oh * ow;
        let mut gx = ScoreMap::zeros(self.cin, h, w);
        for ci in 0..self.cin {
            let plane = gx.channel_mut(ci);
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &col[((ci * self.kh + i) * self.kw + j) * p..][..p];
                    for oy in 0..oh {
                        let sy = (oy * self.stride + i) as isize - ph as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let sx = (ox * self.stride + j) as isize - pw as isize;
                            if sx >= 0 && sx < w as isize {
                                plane[sy as usize * w + sx as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn forward(&self, x: &ScoreMap) -> Result<ScoreMap> {
        if x.channels() != self.cin {
            return Err(Error::shape(format!("{} input channels", self.cin), x.channels()));
        }
        let (oh, ow) = self.output_size(x.height(), x.width())?;
        let p = oh * ow;
        let mut out = vec![0.0; self.cout * p];
        for (o, b) in self.bias.iter().enumerate() {
            out[o * p..(o + 1) * p].fill(*b);
        }
        if self.kh == 1 && self.kw == 1 && self.stride == 1 {
            gemm(self.cout, self.cin, p, &self.weight, x.data(), &mut out, 1.0);
        } else {
            let col = self.im2col(x, oh, ow);
            gemm(self.cout, self.patch_len(), p, &self.weight, &col, &mut out, 1.0);
        }
        ScoreMap::from_vec(self.cout, oh, ow, out)
    }

    /// Parameter gradients and (optionally) the input gradient.
    pub fn backward(&self, x: &ScoreMap, gy: &ScoreMap, need_input: bool) -> (Vec<f64>, Vec<f64>, Option<ScoreMap>) {
        let (oh, ow) = (gy.height(), gy.width());
        let p = oh * ow;
        let k = self.patch_len();
        let pointwise = self.kh == 1 && self.kw == 1 && self.stride == 1;
        let col_owned;
        let col: &[f64] = if pointwise {
            x.data()
        } else {
            col_owned = self.im2col(x, oh, ow);
            &col_owned
        };
        let mut gw = vec![0.0; self.cout * k];
        // gW = gY · colᵀ
        gemm_t(self.cout, p, k, gy.data(), col, &mut gw);
        let gb = (0..self.cout).map(|o| gy.channel(o).iter().sum()).collect();
        let gx = need_input.then(|| {
            // gCol = Wᵀ · gY
            let mut gcol = vec![0.0; k * p];
            gemm_tn(k, self.cout, p, &self.weight, gy.data(), &mut gcol);
            if pointwise {
                ScoreMap::from_vec(self.cin, x.height(), x.width(), gcol).unwrap()
            } else {
                self.col2im(&gcol, x.height(), x.width(), oh, ow)
            }
        });
        (gw, gb, gx)
    }
}

/// `c (m×n) = a (m×k) · b (k×n) + beta·c`, row-major.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: bounds asserted above; strides describe dense row-major storage.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c (m×n) = a (m×k) · bᵀ` where `b` is stored `n×k`.
fn gemm_t(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    // SAFETY: bounds asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c (m×n) = aᵀ · b` where `a` is stored `k×m` and `b` is `k×n`.
fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: bounds asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Relu,
    /// Nearest-neighbour ×2 upsampling.
    Upsample2x,
    /// Elementwise `1 / (1 + e^-(w·x + b))` with learnable scalars.
    SigmoidLike { w: f64, b: f64 },
}

impl Layer {
    pub fn conv(k: usize, cin: usize, cout: usize) -> Layer {
        Layer::Conv2d(Conv2d::new(k, k, cin, cout, 1, Padding::Same))
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv2d(c) => c.weight.len() + c.bias.len(),
            Layer::SigmoidLike { .. } => 2,
            Layer::Relu | Layer::Upsample2x => 0,
        }
    }

    pub fn forward(&self, x: &ScoreMap) -> Result<ScoreMap> {
        match self {
            Layer::Conv2d(c) => c.forward(x),
            Layer::Relu => {
                let mut y = x.clone();
                y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                Ok(y)
            }
            Layer::Upsample2x => Ok(upsample2x(x)),
            Layer::SigmoidLike { w, b } => {
                let mut y = x.clone();
                y.data_mut().iter_mut().for_each(|v| *v = sigmoid(w * *v + b));
                Ok(y)
            }
        }
    }

    /// Given the layer input `x`, its output `y` and `dL/dy`, return the
    /// parameter gradient and `dL/dx`.
    pub fn backward(&self, x: &ScoreMap, y: &ScoreMap, gy: &ScoreMap, need_input: bool) -> (LayerGrad, Option<ScoreMap>) {
        match self {
            Layer::Conv2d(c) => {
                let (w, b, gx) = c.backward(x, gy, need_input);
                (LayerGrad::Conv { w, b }, gx)
            }
            Layer::Relu => {
                let mut gx = gy.clone();
                for (g, v) in gx.data_mut().iter_mut().zip(x.data()) {
                    if *v <= 0.0 {
                        *g = 0.0;
                    }
                }
                (LayerGrad::None, Some(gx))
            }
            Layer::Upsample2x => (LayerGrad::None, Some(upsample2x_backward(gy, x.height(), x.width()))),
            Layer::SigmoidLike { w, .. } => {
                let mut dz = gy.clone();
                for (d, p) in dz.data_mut().iter_mut().zip(y.data()) {
                    *d *= p * (1.0 - p);
                }
                sigmoid_affine_backward(*w, x, dz)
            }
        }
    }
}

/// Gradients of `z = w·x + b` given `dL/dz`.
fn sigmoid_affine_backward(w: f64, x: &ScoreMap, mut dz: ScoreMap) -> (LayerGrad, Option<ScoreMap>) {
    let gw = dz.data().iter().zip(x.data()).map(|(d, v)| d * v).sum();
    let gb = dz.data().iter().sum();
    dz.data_mut().iter_mut().for_each(|d| *d *= w);
    (LayerGrad::SigmoidLike { w: gw, b: gb }, Some(dz))
}

pub fn upsample2x(x: &ScoreMap) -> ScoreMap {
    let (c, h, w) = x.shape();
    let mut y = ScoreMap::zeros(c, 2 * h, 2 * w);
    for ch in 0..c {
        let src = x.channel(ch);
        let dst = y.channel_mut(ch);
        for yy in 0..2 * h {
            for xx in 0..2 * w {
                dst[yy * 2 * w + xx] = src[(yy / 2) * w + xx / 2];
            }
        }
    }
    y
}

pub fn upsample2x_backward(gy: &ScoreMap, h: usize, w: usize) -> ScoreMap {
    let c = gy.channels();
    let mut gx = ScoreMap::zeros(c, h, w);
    for ch in 0..c {
        let src = gy.channel(ch);
        let dst = gx.channel_mut(ch);
        for yy in 0..2 * h {
            for xx in 0..2 * w {
                dst[(yy / 2) * w + xx / 2] += src[yy * 2 * w + xx];
            }
        }
    }
    gx
}

/// Gradient of one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrad {
    Conv { w: Vec<f64>, b: Vec<f64> },
    SigmoidLike { w: f64, b: f64 },
    None,
}

impl LayerGrad {
    fn zeros_like(layer: &Layer) -> LayerGrad {
        match layer {
            Layer::Conv2d(c) => LayerGrad::Conv {
                w: vec![0.0; c.weight.len()],
                b: vec![0.0; c.bias.len()],
            },
            Layer::SigmoidLike { .. } => LayerGrad::SigmoidLike { w: 0.0, b: 0.0 },
            _ => LayerGrad::None,
        }
    }

    fn values(&self) -> Vec<f64> {
        match self {
            LayerGrad::Conv { w, b } => w.iter().chain(b).copied().collect(),
            LayerGrad::SigmoidLike { w, b } => vec![*w, *b],
            LayerGrad::None => vec![],
        }
    }

    fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        match self {
            LayerGrad::Conv { w, b } => w.iter_mut().chain(b.iter_mut()).for_each(f),
            LayerGrad::SigmoidLike { w, b } => {
                f(w);
                f(b);
            }
            LayerGrad::None => {}
        }
    }
}

/// Parameter gradients for a whole [`TinyNet`], one entry per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<LayerGrad>);

impl Gradients {
    pub fn zeros_like(net: &TinyNet) -> Self {
        Gradients(net.layers.iter().map(LayerGrad::zeros_like).collect())
    }

    /// All entries in parameter declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.0.iter().flat_map(LayerGrad::values).collect()
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            match (a, b) {
                (LayerGrad::Conv { w, b }, LayerGrad::Conv { w: w2, b: b2 }) => {
                    w.iter_mut().zip(w2).for_each(|(x, y)| *x += y);
                    b.iter_mut().zip(b2).for_each(|(x, y)| *x += y);
                }
                (LayerGrad::SigmoidLike { w, b }, LayerGrad::SigmoidLike { w: w2, b: b2 }) => {
                    *w += w2;
                    *b += b2;
                }
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.0 {
            g.for_each_mut(|v| *v *= s);
        }
    }
}

/// Every intermediate tensor of a forward pass; `values[0]` is the input and
/// `values[i + 1]` the output of layer `i`.
#[derive(Debug, Clone)]
pub struct Activations {
    pub values: Vec<ScoreMap>,
}

impl Activations {
    pub fn output(&self) -> &ScoreMap {
        self.values.last().expect("activations hold at least the input")
    }
}

/// An ordered stack of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyNet {
    pub layers: Vec<Layer>,
}

impl TinyNet {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let net = TinyNet { layers };
        net.check_shapes()?;
        Ok(net)
    }

    fn check_shapes(&self) -> Result<()> {
        let mut channels: Option<usize> = None;
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Conv2d(c) => {
                    if c.weight.len() != c.cout * c.cin * c.kh * c.kw || c.bias.len() != c.cout {
                        return Err(Error::shape(format!("layer {i} parameter sizes"), "mismatch"));
                    }
                    if let Some(ch) = channels {
                        if ch != c.cin {
                            return Err(Error::shape(format!("layer {i}: {ch} input channels"), c.cin));
                        }
                    }
                    channels = Some(c.cout);
                }
                Layer::SigmoidLike { .. } | Layer::Relu | Layer::Upsample2x => {}
            }
        }
        Ok(())
    }

    /// Channels expected by the first convolution, if any.
    pub fn input_channels(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            Layer::Conv2d(c) => Some(c.cin),
            _ => None,
        })
    }

    pub fn output_channels(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l {
            Layer::Conv2d(c) => Some(c.cout),
            _ => None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn forward(&self, x: &ScoreMap) -> Result<Activations> {
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(x.clone());
        for l in &self.layers {
            let y = l.forward(values.last().unwrap())?;
            values.push(y);
        }
        Ok(Activations { values })
    }

    /// Forward pass keeping only the output.
    pub fn predict(&self, x: &ScoreMap) -> Result<ScoreMap> {
        let mut cur = x.clone();
        for l in &self.layers {
            cur = l.forward(&cur)?;
        }
        Ok(cur)
    }

    /// Back-propagate `dL/d(output of layer upto-1)` down to the input.
    pub fn backward_from(&self, acts: &Activations, upto: usize, grad: ScoreMap, need_input: bool) -> (Gradients, Option<ScoreMap>) {
        let mut grads = Gradients::zeros_like(self);
        let mut g = grad;
        for i in (0..upto).rev() {
            let want_input = need_input || i > 0;
            let (lg, gx) = self.layers[i].backward(&acts.values[i], &acts.values[i + 1], &g, want_input);
            grads.0[i] = lg;
            match gx {
                Some(gx) => g = gx,
                None => return (grads, None),
            }
        }
        (grads, Some(g))
    }

    /// Loss value and parameter gradients for a forward pass.
    ///
    /// A sigmoid cross-entropy loss placed after a final `SigmoidLike` layer
    /// is evaluated on that layer's pre-activation, which keeps saturated
    /// outputs numerically stable.
    pub fn backward(&self, acts: &Activations, loss: &LossSpec) -> Result<(Gradients, f64)> {
        let (g, _, value) = self.backward_with_input(acts, loss, false)?;
        Ok((g, value))
    }

    pub fn backward_with_input(
        &self,
        acts: &Activations,
        loss: &LossSpec,
        need_input: bool,
    ) -> Result<(Gradients, Option<ScoreMap>, f64)> {
        let n = self.layers.len();
        if acts.values.len() != n + 1 {
            return Err(Error::shape(format!("{} activations", n + 1), acts.values.len()));
        }
        if let (LossKind::SigmoidXentAll, Some(Layer::SigmoidLike { w, b })) = (loss.kind, self.layers.last()) {
            let x = &acts.values[n - 1];
            let mut z = x.clone();
            z.data_mut().iter_mut().for_each(|v| *v = w * *v + b);
            let (value, dz) = loss.evaluate(&z)?;
            let (lg, gx) = sigmoid_affine_backward(*w, x, dz);
            let (mut grads, gin) = self.backward_from(acts, n - 1, gx.unwrap(), need_input);
            grads.0[n - 1] = lg;
            return Ok((grads, gin, value));
        }
        let (value, gout) = loss.evaluate(acts.output())?;
        let (grads, gin) = self.backward_from(acts, n, gout, need_input);
        Ok((grads, gin, value))
    }

    /// All parameters in declaration order (weights then bias per conv).
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            match l {
                Layer::Conv2d(c) => {
                    out.extend_from_slice(&c.weight);
                    out.extend_from_slice(&c.bias);
                }
                Layer::SigmoidLike { w, b } => out.extend([*w, *b]),
                _ => {}
            }
        }
        out
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::shape(self.param_count(), values.len()));
        }
        let mut it = values.iter().copied();
        self.for_each_param_mut(|p| *p = it.next().unwrap());
        Ok(())
    }

    fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for l in &mut self.layers {
            match l {
                Layer::Conv2d(c) => c.weight.iter_mut().chain(c.bias.iter_mut()).for_each(&mut f),
                Layer::SigmoidLike { w, b } => {
                    f(w);
                    f(b);
                }
                _ => {}
            }
        }
    }

    fn zip_params_grads(&mut self, grads: &Gradients, mut f: impl FnMut(&mut f64, f64)) {
        for (l, g) in self.layers.iter_mut().zip(&grads.0) {
            match (l, g) {
                (Layer::Conv2d(c), LayerGrad::Conv { w, b }) => {
                    c.weight.iter_mut().zip(w).for_each(|(p, g)| f(p, *g));
                    c.bias.iter_mut().zip(b).for_each(|(p, g)| f(p, *g));
                }
                (Layer::SigmoidLike { w, b }, LayerGrad::SigmoidLike { w: gw, b: gb }) => {
                    f(w, *gw);
                    f(b, *gb);
                }
                _ => {}
            }
        }
    }
}

/// `p ← p − lr·g` for every parameter.
pub fn sgd_step(net: &mut TinyNet, grads: &Gradients, lr: f64) {
    net.zip_params_grads(grads, |p, g| *p -= lr * g);
}

/// SGD with optional classical momentum (`momentum = 0` is plain SGD).
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Option<Gradients>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd { lr, momentum, velocity: None }
    }

    pub fn step(&mut self, net: &mut TinyNet, grads: &Gradients) {
        if self.momentum == 0.0 {
            sgd_step(net, grads, self.lr);
            return;
        }
        let v = self.velocity.get_or_insert_with(|| Gradients::zeros_like(net));
        v.scale(self.momentum);
        v.add_assign(grads);
        sgd_step(net, v, self.lr);
    }
}

/// Draw every convolution weight from `N(0, variance)`, zero the biases, and
/// reset sigmoid-like layers to `w = 1, b = 0`.
pub fn init_gaussian(net: &mut TinyNet, variance: f64, seed: u64) {
    assert!(variance > 0.0, "variance must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, variance.sqrt()).unwrap();
    for l in &mut net.layers {
        match l {
            Layer::Conv2d(c) => {
                c.weight.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
                c.bias.fill(0.0);
            }
            Layer::SigmoidLike { w, b } => {
                *w = 1.0;
                *b = 0.0;
            }
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> ScoreMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        ScoreMap::from_vec(c, h, w, data).unwrap()
    }

    #[test]
    fn pointwise_conv_scales() {
        let mut conv = Conv2d::new(1, 1, 1, 1, 1, Padding::Same);
        conv.weight[0] = 2.0;
        let net = TinyNet::new(vec![Layer::Conv2d(conv)]).unwrap();
        let x = ScoreMap::from_vec(1, 3, 3, vec![3.0; 9]).unwrap();
        let y = net.predict(&x).unwrap();
        assert!(y.data().iter().all(|v| *v == 6.0));
    }

    #[test]
    fn relu_forward() {
        let x = ScoreMap::from_vec(1, 1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(Layer::Relu.forward(&x).unwrap().data(), &[0.0, 0.0, 2.0]);
    }

    // Dense cross-correlation, written independently of im2col.
    fn naive_conv(c: &Conv2d, x: &ScoreMap) -> ScoreMap {
        let (oh, ow) = c.output_size(x.height(), x.width()).unwrap();
        let (ph, pw) = c.pads();
        let mut y = ScoreMap::zeros(c.cout, oh, ow);
        for o in 0..c.cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = c.bias[o];
                    for ci in 0..c.cin {
                        for i in 0..c.kh {
                            for j in 0..c.kw {
                                let sy = (oy * c.stride + i) as isize - ph as isize;
                                let sx = (ox * c.stride + j) as isize - pw as isize;
                                if sy >= 0 && sx >= 0 && (sy as usize) < x.height() && (sx as usize) < x.width() {
                                    acc += c.weight[((o * c.cin + ci) * c.kh + i) * c.kw + j]
                                        * x.get(ci, sy as usize, sx as usize);
                                }
                            }
                        }
                    }
                    y.set(o, oy, ox, acc);
                }
            }
        }
        y
    }

    #[test]
    fn impulse_response_is_flipped_kernel() {
        let mut conv = Conv2d::new(3, 3, 1, 1, 1, Padding::Same);
        for (i, w) in conv.weight.iter_mut().enumerate() {
            *w = (i + 1) as f64;
        }
        let mut x = ScoreMap::zeros(1, 7, 7);
        x.set(0, 3, 3, 1.0);
        let y = conv.forward(&x).unwrap();
        for di in 0..3 {
            for dj in 0..3 {
                // output at (3 + 1 - di, 3 + 1 - dj) reads the impulse through tap (di, dj)
                assert_eq!(y.get(0, 4 - di, 4 - dj), conv.weight[di * 3 + dj]);
            }
        }
        assert_eq!(y.max_abs_diff(&naive_conv(&conv, &x)), 0.0);
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, stride, padding) in &[(3, 1, Padding::Same), (5, 2, Padding::Same), (3, 2, Padding::Valid), (1, 1, Padding::Same)] {
            let mut conv = Conv2d::new(k, k, 3, 4, stride, padding);
            conv.weight.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
            conv.bias.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
            let x = random_map(3, 9, 8, 7);
            let y = conv.forward(&x).unwrap();
            assert!(y.max_abs_diff(&naive_conv(&conv, &x)) < 1e-12);
        }
    }

    #[test]
    fn same_padding_preserves_size() {
        let conv = Conv2d::new(15, 15, 2, 2, 1, Padding::Same);
        assert_eq!(conv.output_size(10, 12).unwrap(), (10, 12));
        let conv = Conv2d::new(3, 3, 2, 2, 2, Padding::Same);
        assert_eq!(conv.output_size(16, 16).unwrap(), (8, 8));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let net = TinyNet::new(vec![Layer::conv(3, 2, 1)]).unwrap();
        assert!(matches!(net.forward(&ScoreMap::zeros(3, 4, 4)), Err(Error::ShapeMismatch { .. })));
        assert!(TinyNet::new(vec![Layer::conv(3, 2, 4), Layer::conv(3, 5, 1)]).is_err());
    }

    #[test]
    fn conv_is_linear_without_bias() {
        let mut net = TinyNet::new(vec![Layer::conv(3, 2, 3)]).unwrap();
        init_gaussian(&mut net, 0.1, 5);
        let x = random_map(2, 6, 6, 9);
        let mut ax = x.clone();
        ax.data_mut().iter_mut().for_each(|v| *v *= -2.5);
        let y = net.predict(&x).unwrap();
        let ay = net.predict(&ax).unwrap();
        for (a, b) in y.data().iter().zip(ay.data()) {
            assert!((a * -2.5 - b).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_and_adjoint() {
        let x = random_map(2, 3, 4, 2);
        let y = upsample2x(&x);
        assert_eq!(y.shape(), (2, 6, 8));
        assert_eq!(y.get(1, 5, 7), x.get(1, 2, 3));
        let g = random_map(2, 6, 8, 3);
        let gx = upsample2x_backward(&g, 3, 4);
        assert!((y.dot(&g) - x.dot(&gx)).abs() < 1e-12);
    }

    #[test]
    fn sgd_arithmetic() {
        let mut net = TinyNet::new(vec![Layer::SigmoidLike { w: 1.0, b: 0.0 }]).unwrap();
        sgd_step(&mut net, &Gradients(vec![LayerGrad::SigmoidLike { w: 2.0, b: 0.0 }]), 0.001);
        assert_eq!(net.layers[0], Layer::SigmoidLike { w: 0.998, b: 0.0 });
        let before = net.clone();
        sgd_step(&mut net, &Gradients(vec![LayerGrad::SigmoidLike { w: 5.0, b: 1.0 }]), 0.0);
        assert_eq!(net, before);
    }

    #[test]
    fn momentum_zero_is_plain_sgd() {
        let mut a = TinyNet::new(vec![Layer::conv(3, 1, 2)]).unwrap();
        init_gaussian(&mut a, 0.01, 1);
        let mut b = a.clone();
        let g = {
            let acts = a.forward(&random_map(1, 5, 5, 4)).unwrap();
            let target = random_map(2, 5, 5, 6);
            let loss = LossSpec::new(LossKind::SigmoidXentAll, target.map01());
            a.backward(&acts, &loss).unwrap().0
        };
        sgd_step(&mut a, &g, 0.01);
        Sgd::new(0.01, 0.0).step(&mut b, &g);
        assert_eq!(a, b);
    }

    #[test]
    fn init_statistics_and_determinism() {
        let mut net = TinyNet::new(vec![
            Layer::conv(9, 50, 25),
            Layer::Relu,
            Layer::conv(1, 25, 3),
            Layer::SigmoidLike { w: 3.0, b: 2.0 },
        ])
        .unwrap();
        init_gaussian(&mut net, 0.001, 42);
        let Layer::Conv2d(c) = &net.layers[0] else { unreachable!() };
        assert!(c.weight.len() > 100_000);
        let n = c.weight.len() as f64;
        let mean = c.weight.iter().sum::<f64>() / n;
        let var = c.weight.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((0.0009..=0.0011).contains(&var), "sample variance {var}");
        assert!(c.bias.iter().all(|b| *b == 0.0));
        assert_eq!(net.layers[3], Layer::SigmoidLike { w: 1.0, b: 0.0 });
        let mut again = net.clone();
        init_gaussian(&mut again, 0.001, 42);
        assert_eq!(again.parameters(), net.parameters());
    }

    #[test]
    fn training_reduces_loss_on_regression_toy() {
        let mut net = TinyNet::new(vec![Layer::conv(3, 1, 1), Layer::SigmoidLike { w: 1.0, b: 0.0 }]).unwrap();
        init_gaussian(&mut net, 0.01, 3);
        let x = random_map(1, 8, 8, 11);
        let mut target = ScoreMap::zeros(1, 8, 8);
        for (t, v) in target.data_mut().iter_mut().zip(x.data()) {
            *t = if *v > 0.0 { 1.0 } else { 0.0 };
        }
        let loss = LossSpec::new(LossKind::SigmoidXentAll, target);
        let mut curve = vec![];
        for _ in 0..50 {
            let acts = net.forward(&x).unwrap();
            let (g, l) = net.backward(&acts, &loss).unwrap();
            curve.push(l);
            sgd_step(&mut net, &g, 0.05);
        }
        assert!(curve[49] < curve[0]);
    }

    trait Map01 {
        fn map01(&self) -> ScoreMap;
    }

    impl Map01 for ScoreMap {
        fn map01(&self) -> ScoreMap {
            let mut m = self.clone();
            m.data_mut().iter_mut().for_each(|v| *v = (*v + 1.0) / 2.0);
            m
        }
    }
}
