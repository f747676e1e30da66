//! Layer primitives with hand-written backward passes.
//!
//! Backward functions accumulate parameter gradients into a container of the
//! same type as the parameters (`+=`), and return the input gradient.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::params::{visit_array, visit_array_mut, Role, Visitor, VisitorMut};

pub type Rng64 = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

pub fn xavier_uniform(out: usize, inp: usize, rng: &mut Rng64) -> Array2<f64> {
    let a = (6.0 / (out + inp) as f64).sqrt();
    let u = Uniform::new_inclusive(-a, a).expect("finite bound");
    Array2::from_shape_fn((out, inp), |_| u.sample(rng))
}

pub fn normal(shape: (usize, usize), std: f64, rng: &mut Rng64) -> Array2<f64> {
    let n = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn(shape, |_| n.sample(rng))
}

/// Inverted-dropout mask: entries are `0` or `1/(1 − rate)`. Draws nothing
/// when `rate` is zero.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut Rng64) -> Vec<f64> {
    if rate <= 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[out × in]`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn new(out: usize, inp: usize, rng: &mut Rng64) -> Self {
        Linear {
            w: xavier_uniform(out, inp, rng),
            b: Array1::zeros(out),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    /// Returns `∂L/∂x`; accumulates into `grad` when given.
    pub fn backward(&self, x: ArrayView2<f64>, gy: ArrayView2<f64>, grad: Option<&mut Linear>) -> Array2<f64> {
        if let Some(g) = grad {
            g.w += &gy.t().dot(&x);
            g.b += &gy.sum_axis(Axis(0));
        }
        gy.dot(&self.w)
    }

    pub fn visit(&self, prefix: &str, role: Role, f: &mut Visitor<'_>) {
        visit_array(f, prefix, "weight", &self.w, role);
        visit_array(f, prefix, "bias", &self.b, role);
    }

    pub fn visit_mut(&mut self, prefix: &str, role: Role, f: &mut VisitorMut<'_>) {
        visit_array_mut(f, prefix, "weight", &mut self.w, role);
        visit_array_mut(f, prefix, "bias", &mut self.b, role);
    }
}

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.to_owned();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.axis_iter_mut(Axis(0)).zip(rstd.iter_mut()) {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *r = 1.0 / (var + LN_EPS).sqrt();
            row *= *r;
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache, gy: ArrayView2<f64>, grad: Option<&mut LayerNorm>) -> Array2<f64> {
        if let Some(g) = grad {
            g.gamma += &(&gy * &cache.xhat).sum_axis(Axis(0));
            g.beta += &gy.sum_axis(Axis(0));
        }
        let d = gy.ncols() as f64;
        let gxhat = &gy * &self.gamma;
        let mut gx = Array2::zeros(gy.raw_dim());
        for (((mut out, gh), xh), &r) in gx
            .axis_iter_mut(Axis(0))
            .zip(gxhat.axis_iter(Axis(0)))
            .zip(cache.xhat.axis_iter(Axis(0)))
            .zip(cache.rstd.iter())
        {
            let s1 = gh.sum();
            let s2 = gh.dot(&xh);
            Zip::from(&mut out)
                .and(&gh)
                .and(&xh)
                .for_each(|o, &g, &x| *o = r / d * (d * g - s1 - x * s2));
        }
        gx
    }

    pub fn visit(&self, prefix: &str, role: Role, f: &mut Visitor<'_>) {
        visit_array(f, prefix, "weight", &self.gamma, role);
        visit_array(f, prefix, "bias", &self.beta, role);
    }

    pub fn visit_mut(&mut self, prefix: &str, role: Role, f: &mut VisitorMut<'_>) {
        visit_array_mut(f, prefix, "weight", &mut self.gamma, role);
        visit_array_mut(f, prefix, "bias", &mut self.beta, role);
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_C: f64 = 0.044715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Row-wise softmax.
pub fn softmax_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Gradient through [`softmax_rows`] given its output `p`.
pub fn softmax_rows_backward(p: ArrayView2<f64>, gp: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(p.raw_dim());
    for ((mut o, pr), gr) in out
        .axis_iter_mut(Axis(0))
        .zip(p.axis_iter(Axis(0)))
        .zip(gp.axis_iter(Axis(0)))
    {
        let dot = pr.dot(&gr);
        Zip::from(&mut o)
            .and(&pr)
            .and(&gr)
            .for_each(|o, &p, &g| *o = p * (g - dot));
    }
    out
}

/// Output and input index ranges for a shift of `d` along an axis of `n`.
fn shift_ranges(n: usize, d: isize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let n = n as isize;
    let lo = (-d).max(0);
    let hi = (n - d).min(n);
    if lo >= hi {
        return (0..0, 0..0);
    }
    ((lo as usize)..(hi as usize), ((lo + d) as usize)..((hi + d) as usize))
}

/// 3×3 convolution, stride 1, zero padding 1 (cross-correlation form).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    /// `[out × in × 3 × 3]`
    pub w: Array4<f64>,
    pub b: Array1<f64>,
}

impl Conv3x3 {
    /// Uniform in `±1/√fan_in`, biases zero.
    pub fn new(out: usize, inp: usize, rng: &mut Rng64) -> Self {
        let bound = 1.0 / ((inp * 9) as f64).sqrt();
        let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Conv3x3 {
            w: Array4::from_shape_fn((out, inp, 3, 3), |_| u.sample(rng)),
            b: Array1::zeros(out),
        }
    }

    pub fn forward(&self, x: ArrayView3<f64>) -> Array3<f64> {
        let (cin, h, w) = x.dim();
        let cout = self.w.dim().0;
        let mut y = Array3::zeros((cout, h, w));
        for o in 0..cout {
            let mut yo = y.index_axis_mut(Axis(0), o);
            yo.fill(self.b[o]);
            for c in 0..cin {
                let xc = x.index_axis(Axis(0), c);
                for ky in 0..3 {
                    let (ry, rx_y) = shift_ranges(h, ky as isize - 1);
                    for kx in 0..3 {
                        let (cx, rx_x) = shift_ranges(w, kx as isize - 1);
                        let k = self.w[[o, c, ky, kx]];
                        Zip::from(yo.slice_mut(s![ry.clone(), cx]))
                            .and(xc.slice(s![rx_y.clone(), rx_x]))
                            .for_each(|a, &b| *a += k * b);
                    }
                }
            }
        }
        y
    }

    pub fn backward(&self, x: ArrayView3<f64>, gy: ArrayView3<f64>, grad: Option<&mut Conv3x3>) -> Array3<f64> {
        let (cin, h, w) = x.dim();
        let cout = self.w.dim().0;
        let mut gx = Array3::zeros((cin, h, w));
        let mut gw = grad;
        for o in 0..cout {
            let go = gy.index_axis(Axis(0), o);
            if let Some(g) = gw.as_deref_mut() {
                g.b[o] += go.sum();
            }
            for c in 0..cin {
                let xc = x.index_axis(Axis(0), c);
                for ky in 0..3 {
                    let (ry, rx_y) = shift_ranges(h, ky as isize - 1);
                    for kx in 0..3 {
                        let (cx, rx_x) = shift_ranges(w, kx as isize - 1);
                        let gslice = go.slice(s![ry.clone(), cx]);
                        if let Some(g) = gw.as_deref_mut() {
                            let xs = xc.slice(s![rx_y.clone(), rx_x.clone()]);
                            g.w[[o, c, ky, kx]] += Zip::from(&gslice)
                                .and(&xs)
                                .fold(0.0, |acc, &a, &b| acc + a * b);
                        }
                        let k = self.w[[o, c, ky, kx]];
                        Zip::from(gx.slice_mut(s![c, rx_y.clone(), rx_x]))
                            .and(&gslice)
                            .for_each(|a, &b| *a += k * b);
                    }
                }
            }
        }
        gx
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch statistics over the spatial positions of one image.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub xhat: Array3<f64>,
    pub rstd: Array1<f64>,
    pub mode: Mode,
    /// Batch mean and unbiased variance, for the running-statistics update.
    pub batch_mean: Array1<f64>,
    pub batch_var_unbiased: Array1<f64>,
}

pub fn batchnorm_forward(
    x: ArrayView3<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
    running_mean: ArrayView1<f64>,
    running_var: ArrayView1<f64>,
    eps: f64,
    mode: Mode,
) -> (Array3<f64>, BatchNormCache) {
    let (c, h, w) = x.dim();
    let n = (h * w) as f64;
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(c);
    let mut bm = Array1::zeros(c);
    let mut bv = Array1::zeros(c);
    for (ch, mut plane) in xhat.axis_iter_mut(Axis(0)).enumerate() {
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = plane.sum() / n;
                let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                bm[ch] = mean;
                bv[ch] = if n > 1.0 { var * n / (n - 1.0) } else { var };
                (mean, var)
            }
            Mode::Eval => (running_mean[ch], running_var[ch]),
        };
        rstd[ch] = 1.0 / (var + eps).sqrt();
        let r = rstd[ch];
        plane.mapv_inplace(|v| (v - mean) * r);
    }
    let mut y = xhat.clone();
    for (ch, mut plane) in y.axis_iter_mut(Axis(0)).enumerate() {
        let (g, b) = (gamma[ch], beta[ch]);
        plane.mapv_inplace(|v| g * v + b);
    }
    (
        y,
        BatchNormCache {
            xhat,
            rstd,
            mode,
            batch_mean: bm,
            batch_var_unbiased: bv,
        },
    )
}

/// Returns `(∂L/∂x, ∂L/∂γ, ∂L/∂β)`.
pub fn batchnorm_backward(
    cache: &BatchNormCache,
    gamma: ArrayView1<f64>,
    gy: ArrayView3<f64>,
) -> (Array3<f64>, Array1<f64>, Array1<f64>) {
    let (c, h, w) = gy.dim();
    let n = (h * w) as f64;
    let mut gx = Array3::zeros((c, h, w));
    let mut gg = Array1::zeros(c);
    let mut gb = Array1::zeros(c);
    for ch in 0..c {
        let g = gy.index_axis(Axis(0), ch);
        let xh = cache.xhat.index_axis(Axis(0), ch);
        let sum_g = g.sum();
        let sum_gx = Zip::from(&g).and(&xh).fold(0.0, |a, &p, &q| a + p * q);
        gg[ch] = sum_gx;
        gb[ch] = sum_g;
        let k = gamma[ch] * cache.rstd[ch];
        let mut out = gx.index_axis_mut(Axis(0), ch);
        match cache.mode {
            Mode::Train => Zip::from(&mut out)
                .and(&g)
                .and(&xh)
                .for_each(|o, &gi, &xi| *o = k / n * (n * gi - sum_g - xi * sum_gx)),
            Mode::Eval => Zip::from(&mut out).and(&g).for_each(|o, &gi| *o = k * gi),
        }
    }
    (gx, gg, gb)
}
