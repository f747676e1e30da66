//! Spectral Magnitude Aligner: reshapes the Fourier magnitude of an image
//! with a small convolutional enhancer while keeping the phase, then blends
//! the result back into the input.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis, Zip};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{irfft2, irfft2_adjoint, rfft2, rfft2_adjoint};
use crate::nn::{
    batchnorm_backward, batchnorm_forward, dropout_mask, BatchNormCache, Conv3x3, Mode, Rng64,
    BN_EPS, BN_MOMENTUM,
};
use crate::params::{visit_array, visit_array_mut, ParamSet, Role, Visitor, VisitorMut};

pub const HIDDEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmaConfig {
    pub lambda: f64,
}

impl Default for SmaConfig {
    fn default() -> Self {
        SmaConfig { lambda: 0.05 }
    }
}

impl SmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnhancerParams {
    pub conv1: Conv3x3,
    pub bn_gamma: Array1<f64>,
    pub bn_beta: Array1<f64>,
    pub bn_running_mean: Array1<f64>,
    pub bn_running_var: Array1<f64>,
    pub conv2: Conv3x3,
    pub momentum: f64,
    pub eps: f64,
    pub dropout_rate: f64,
    pub trainable: bool,
}

impl EnhancerParams {
    pub fn new(dropout_rate: f64, rng: &mut Rng64) -> Self {
        EnhancerParams {
            conv1: Conv3x3::new(HIDDEN, 1, rng),
            bn_gamma: Array1::ones(HIDDEN),
            bn_beta: Array1::zeros(HIDDEN),
            bn_running_mean: Array1::zeros(HIDDEN),
            bn_running_var: Array1::ones(HIDDEN),
            conv2: Conv3x3::new(1, HIDDEN, rng),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            dropout_rate,
            trainable: true,
        }
    }

    /// Folds one forward pass's batch statistics into the running estimates.
    pub fn update_running(&mut self, stats: &BnStats) {
        let m = self.momentum;
        self.bn_running_mean = &self.bn_running_mean * (1.0 - m) + &stats.mean * m;
        self.bn_running_var = &self.bn_running_var * (1.0 - m) + &stats.var_unbiased * m;
    }
}

impl ParamSet for EnhancerParams {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        let role = if self.trainable { Role::Trainable } else { Role::Frozen };
        visit_array(f, prefix, "conv1.weight", &self.conv1.w, role);
        visit_array(f, prefix, "conv1.bias", &self.conv1.b, role);
        visit_array(f, prefix, "bn.weight", &self.bn_gamma, role);
        visit_array(f, prefix, "bn.bias", &self.bn_beta, role);
        visit_array(f, prefix, "bn.running_mean", &self.bn_running_mean, Role::Buffer);
        visit_array(f, prefix, "bn.running_var", &self.bn_running_var, Role::Buffer);
        visit_array(f, prefix, "conv2.weight", &self.conv2.w, role);
        visit_array(f, prefix, "conv2.bias", &self.conv2.b, role);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        let role = if self.trainable { Role::Trainable } else { Role::Frozen };
        visit_array_mut(f, prefix, "conv1.weight", &mut self.conv1.w, role);
        visit_array_mut(f, prefix, "conv1.bias", &mut self.conv1.b, role);
        visit_array_mut(f, prefix, "bn.weight", &mut self.bn_gamma, role);
        visit_array_mut(f, prefix, "bn.bias", &mut self.bn_beta, role);
        visit_array_mut(f, prefix, "bn.running_mean", &mut self.bn_running_mean, Role::Buffer);
        visit_array_mut(f, prefix, "bn.running_var", &mut self.bn_running_var, Role::Buffer);
        visit_array_mut(f, prefix, "conv2.weight", &mut self.conv2.w, role);
        visit_array_mut(f, prefix, "conv2.bias", &mut self.conv2.b, role);
    }
}

#[derive(Debug, Clone)]
pub struct MagnitudePhase {
    pub magnitude: Array2<f64>,
    pub phase: Array2<f64>,
}

pub fn decompose(hs: ArrayView2<Complex64>) -> MagnitudePhase {
    MagnitudePhase {
        magnitude: hs.mapv(|c| c.norm()),
        phase: hs.mapv(|c| c.arg()),
    }
}

/// `A'·e^{iφ}`; a negative `A'` flips the phase by π.
pub fn recombine(magnitude: ArrayView2<f64>, phase: ArrayView2<f64>) -> Array2<Complex64> {
    let mut out = Array2::zeros(magnitude.raw_dim());
    Zip::from(&mut out)
        .and(&magnitude)
        .and(&phase)
        .for_each(|o, &a, &p| *o = Complex64::from_polar(a, p));
    out
}

#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Array1<f64>,
    pub var_unbiased: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct EnhancerCache {
    input: Array3<f64>,
    bn: BatchNormCache,
    relu_out: Array3<f64>,
    mask: Vec<f64>,
    dropped: Array3<f64>,
}

impl EnhancerCache {
    /// Which ReLU units were active.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.relu_out.iter().map(|&v| v > 0.0).collect()
    }

    /// Batch statistics to fold into the running estimates (train mode).
    pub fn bn_stats(&self) -> Option<BnStats> {
        (self.bn.mode == Mode::Train).then(|| BnStats {
            mean: self.bn.batch_mean.clone(),
            var_unbiased: self.bn.batch_var_unbiased.clone(),
        })
    }
}

/// conv → batch norm → ReLU → dropout → conv, on a single-channel map.
pub fn enhancer_forward(
    a: ArrayView2<f64>,
    p: &EnhancerParams,
    mode: Mode,
    rng: &mut Rng64,
) -> (Array2<f64>, EnhancerCache) {
    let input = a.to_owned().insert_axis(Axis(0));
    let pre_bn = p.conv1.forward(input.view());
    let (bn_out, bn) = batchnorm_forward(
        pre_bn.view(),
        p.bn_gamma.view(),
        p.bn_beta.view(),
        p.bn_running_mean.view(),
        p.bn_running_var.view(),
        p.eps,
        mode,
    );
    let relu_out = bn_out.mapv(|v| v.max(0.0));
    let mask = match mode {
        Mode::Train => dropout_mask(relu_out.len(), p.dropout_rate, rng),
        Mode::Eval => vec![1.0; relu_out.len()],
    };
    let mut dropped = relu_out.clone();
    for (d, m) in dropped.iter_mut().zip(&mask) {
        *d *= m;
    }
    let out = p.conv2.forward(dropped.view()).index_axis_move(Axis(0), 0);
    (
        out,
        EnhancerCache {
            input,
            bn,
            relu_out,
            mask,
            dropped,
        },
    )
}

/// Returns `∂L/∂A`; accumulates parameter gradients into `grad`.
pub fn enhancer_backward(
    g_out: ArrayView2<f64>,
    cache: &EnhancerCache,
    p: &EnhancerParams,
    grad: &mut EnhancerParams,
) -> Array2<f64> {
    let g3 = g_out.to_owned().insert_axis(Axis(0));
    let mut g_drop = p.conv2.backward(cache.dropped.view(), g3.view(), Some(&mut grad.conv2));
    for ((g, m), r) in g_drop.iter_mut().zip(&cache.mask).zip(cache.relu_out.iter()) {
        *g *= if *r > 0.0 { *m } else { 0.0 };
    }
    let (g_bn, gg, gb) = batchnorm_backward(&cache.bn, p.bn_gamma.view(), g_drop.view());
    grad.bn_gamma += &gg;
    grad.bn_beta += &gb;
    let g_in = p
        .conv1
        .backward(cache.input.view(), g_bn.view(), Some(&mut grad.conv1));
    g_in.index_axis_move(Axis(0), 0)
}

#[derive(Debug, Clone)]
pub struct SmaCache {
    pub spectrum: Array2<Complex64>,
    pub magnitude: Array2<f64>,
    /// Unit phasors `F/|F|` (1 where `F = 0`).
    pub phasor: Array2<Complex64>,
    pub enhanced_magnitude: Array2<f64>,
    pub enhanced_spectrum: Array2<Complex64>,
    pub enhanced_image: Array2<f64>,
    pub enhancer: EnhancerCache,
    pub lambda: f64,
}

/// `I + λ(I_enh − I)` with `I_enh = irfft2(E(|F|)·F/|F|)`.
pub fn sma_forward(
    image: ArrayView2<f64>,
    p: &EnhancerParams,
    cfg: &SmaConfig,
    mode: Mode,
    rng: &mut Rng64,
) -> Result<(Array2<f64>, SmaCache)> {
    let (h, w) = image.dim();
    if h < 2 {
        return Err(Error::Shape(format!("image height {h} < 2")));
    }
    let spectrum = rfft2(image)?;
    let magnitude = spectrum.mapv(|c| c.norm());
    let phasor = spectrum.mapv(|c| {
        let r = c.norm();
        if r > 0.0 {
            c / r
        } else {
            Complex64::new(1.0, 0.0)
        }
    });
    let (enhanced_magnitude, enhancer) = enhancer_forward(magnitude.view(), p, mode, rng);
    let enhanced_spectrum = &phasor * &enhanced_magnitude.mapv(|a| Complex64::new(a, 0.0));
    let enhanced_image = irfft2(enhanced_spectrum.view(), h, w)?;
    let out = if cfg.lambda == 0.0 {
        image.to_owned()
    } else {
        &image + &((&enhanced_image - &image) * cfg.lambda)
    };
    Ok((
        out,
        SmaCache {
            spectrum,
            magnitude,
            phasor,
            enhanced_magnitude,
            enhanced_spectrum,
            enhanced_image,
            enhancer,
            lambda: cfg.lambda,
        },
    ))
}

/// Returns `∂L/∂I`; accumulates enhancer gradients into `grad`.
pub fn sma_backward(
    g_out: ArrayView2<f64>,
    cache: &SmaCache,
    p: &EnhancerParams,
    grad: &mut EnhancerParams,
) -> Array2<f64> {
    let lam = cache.lambda;
    let w = g_out.ncols();
    let mut g_in = g_out.mapv(|g| g * (1.0 - lam));
    let g_enh = g_out.mapv(|g| g * lam);
    let g_spec = irfft2_adjoint(g_enh.view());

    // F' = A'·u
    let mut g_amag = Array2::zeros(cache.magnitude.raw_dim());
    Zip::from(&mut g_amag)
        .and(&cache.phasor)
        .and(&g_spec)
        .for_each(|o, u, g| *o = u.re * g.re + u.im * g.im);
    let g_u = &g_spec * &cache.enhanced_magnitude.mapv(|a| Complex64::new(a, 0.0));

    let g_mag = enhancer_backward(g_amag.view(), &cache.enhancer, p, grad);

    // u = F/|F|, A = |F|
    let mut g_f = Array2::<Complex64>::zeros(cache.spectrum.raw_dim());
    Zip::from(&mut g_f)
        .and(&cache.spectrum)
        .and(&cache.phasor)
        .and(&g_u)
        .and(&g_mag)
        .for_each(|o, f, u, gu, &ga| {
            let r = f.norm();
            let radial = *u * ga;
            *o = if r > 0.0 {
                let along = u.re * gu.re + u.im * gu.im;
                (gu - u * along) / r + radial
            } else {
                radial
            };
        });
    g_in += &rfft2_adjoint(g_f.view(), w);
    g_in
}
