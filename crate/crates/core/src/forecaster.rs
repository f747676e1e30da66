//! Two-branch forecaster and its training loop.
//!
//! Each variable of a window is rendered to an image and sent through two
//! branches that share one backbone. The spectral branch passes the visible
//! region through the magnitude aligner; the structural branch feeds the raw
//! image with temporal grounding and LoRA attached. The branch forecasts are
//! mixed by a learned `β ∈ [0, 1]`.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{LoraConfig, LoraSet, TgaParams};
use crate::backbone::{self, AdapterGrads, Adapters, BackboneCache, BackboneConfig, BackboneParams};
use crate::data::TimeSeriesWindow;
use crate::error::{Error, Result};
use crate::gradcheck::{central_difference, rel_err, Probe};
use crate::nn::{Mode, Rng64};
use crate::params::{join, layout, load_flat, to_flat, value_count, visit_scalar, visit_scalar_mut, zeros_like, ParamSet, Role, Visitor, VisitorMut};
use crate::rendering::{self, grayscale, reconstruct, reconstruct_adjoint, to_three_channel, Interpolation, RenderSpec, RenderedImage};
use crate::sma::{sma_backward, sma_forward, BnStats, EnhancerParams, SmaCache, SmaConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub render: RenderSpec,
    pub backbone: BackboneConfig,
    pub sma: SmaConfig,
    /// Dropout inside the magnitude enhancer.
    pub sma_dropout: f64,
    pub lora: LoraConfig,
    /// Attach temporal grounding to the structural branch.
    pub tga: bool,
    /// Initial fusion weight.
    pub beta: f64,
    /// When false β stays at its initial value.
    pub learn_beta: bool,
}

impl ModelConfig {
    /// 64×64 images, 16-pixel patches, every visible column kept.
    pub fn desk() -> Self {
        let backbone = BackboneConfig::desk();
        ModelConfig {
            render: RenderSpec {
                periodicity: 24,
                image_height: backbone.image_height,
                image_width: backbone.image_width,
                patch_size: backbone.patch_size,
                align_const: 1.0,
                interpolation: Interpolation::Bilinear,
            },
            backbone,
            sma: SmaConfig::default(),
            sma_dropout: 0.1,
            lora: LoraConfig::default(),
            tga: true,
            beta: 0.5,
            learn_beta: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.render.validate()?;
        self.backbone.validate()?;
        self.sma.validate()?;
        self.lora.validate(self.backbone.d_model)?;
        let (r, b) = (&self.render, &self.backbone);
        if (r.image_height, r.image_width, r.patch_size) != (b.image_height, b.image_width, b.patch_size) {
            return Err(Error::Config(format!(
                "rendered images are {}x{} with patch {}, backbone expects {}x{} with patch {}",
                r.image_height, r.image_width, r.patch_size, b.image_height, b.image_width, b.patch_size
            )));
        }
        if !(0.0..1.0).contains(&self.sma_dropout) {
            return Err(Error::Config(format!("sma_dropout {} outside [0, 1)", self.sma_dropout)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} outside [0, 1]", self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub enhancer: EnhancerParams,
    pub tga: Option<TgaParams>,
    pub lora: LoraSet,
    pub backbone: BackboneParams,
    /// Stored unclamped between updates; the training loop clamps after each step.
    pub beta: f64,
}

impl ModelParams {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng64::seed_from_u64(seed);
        let backbone = BackboneParams::new(cfg.backbone, &mut rng)?;
        let enhancer = EnhancerParams::new(cfg.sma_dropout, &mut rng);
        let d = cfg.backbone.d_model;
        let tga = if cfg.tga { Some(TgaParams::new(d, &mut rng)?) } else { None };
        let lora = LoraSet::new(cfg.backbone.e_layers, d, &cfg.lora, &mut rng)?;
        Ok(ModelParams {
            cfg,
            enhancer,
            tga,
            lora,
            backbone,
            beta: cfg.beta,
        })
    }

    fn beta_role(&self) -> Role {
        if self.cfg.learn_beta {
            Role::Trainable
        } else {
            Role::Frozen
        }
    }
}

impl ParamSet for ModelParams {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.enhancer.visit(&join(prefix, "sma"), f);
        if let Some(t) = &self.tga {
            t.visit(&join(prefix, "tga"), f);
        }
        self.lora.visit(&join(prefix, "lora"), f);
        self.backbone.visit(&join(prefix, "backbone"), f);
        visit_scalar(f, prefix, "beta", &self.beta, self.beta_role());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        let role = self.beta_role();
        self.enhancer.visit_mut(&join(prefix, "sma"), f);
        if let Some(t) = &mut self.tga {
            t.visit_mut(&join(prefix, "tga"), f);
        }
        self.lora.visit_mut(&join(prefix, "lora"), f);
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        visit_scalar_mut(f, prefix, "beta", &mut self.beta, role);
    }
}

pub fn clamp_beta(beta: f64) -> f64 {
    beta.clamp(0.0, 1.0)
}

/// `β·y_st + (1 − β)·y_sp`.
pub fn fuse(y_st: ArrayView2<f64>, y_sp: ArrayView2<f64>, beta: f64) -> Result<Array2<f64>> {
    if y_st.dim() != y_sp.dim() {
        return Err(Error::Shape(format!(
            "structural output {:?}, spectral output {:?}",
            y_st.dim(),
            y_sp.dim()
        )));
    }
    let mut out = Array2::zeros(y_st.raw_dim());
    Zip::from(&mut out)
        .and(y_st)
        .and(y_sp)
        .for_each(|o, &a, &b| *o = beta * a + (1.0 - beta) * b);
    Ok(out)
}

struct VarCache {
    image: RenderedImage,
    sma: SmaCache,
    spectral: BackboneCache,
    structural: BackboneCache,
}

pub struct WindowCache {
    vars: Vec<VarCache>,
    /// `[H × N]`, normalized.
    pub y_st: Array2<f64>,
    pub y_sp: Array2<f64>,
    pub beta: f64,
}

impl WindowCache {
    /// Batch statistics of every enhancer pass, in variable order.
    pub fn bn_stats(&self) -> Vec<BnStats> {
        self.vars.iter().filter_map(|v| v.sma.enhancer.bn_stats()).collect()
    }

    fn relu_pattern(&self) -> Vec<bool> {
        self.vars.iter().flat_map(|v| v.sma.enhancer.relu_pattern()).collect()
    }
}

fn structural_adapters(p: &ModelParams) -> Adapters<'_> {
    Adapters {
        tga: p.tga.as_ref(),
        lora: Some(&p.lora),
    }
}

/// Normalized-space forecast `[H × N]` for one window.
pub fn forward_window(
    p: &ModelParams,
    w: &TimeSeriesWindow,
    mode: Mode,
    rng: &mut Rng64,
) -> Result<(Array2<f64>, WindowCache)> {
    let images = rendering::render(w, &p.cfg.render)?;
    let (h, n) = (w.horizon(), w.n_vars());
    let mut y_st = Array2::zeros((h, n));
    let mut y_sp = Array2::zeros((h, n));
    let mut vars = Vec::with_capacity(n);
    for (j, image) in images.into_iter().enumerate() {
        let n_vis = image.visible_patch_cols();

        let (vis, sma) = sma_forward(image.visible(), &p.enhancer, &p.cfg.sma, mode, rng)?;
        let sp_in = to_three_channel(image.compose(vis.view()).view());
        let (sp_out, spectral) = backbone::forward(&p.backbone, sp_in.view(), n_vis, Adapters::default(), mode, rng)?;
        let sp = reconstruct(grayscale(sp_out.view()).view(), &image)?;

        let st_in = to_three_channel(image.pixels.view());
        let (st_out, structural) = backbone::forward(&p.backbone, st_in.view(), n_vis, structural_adapters(p), mode, rng)?;
        let st = reconstruct(grayscale(st_out.view()).view(), &image)?;

        for t in 0..h {
            y_sp[[t, j]] = sp[t];
            y_st[[t, j]] = st[t];
        }
        vars.push(VarCache {
            image,
            sma,
            spectral,
            structural,
        });
    }
    let beta = clamp_beta(p.beta);
    let y = fuse(y_st.view(), y_sp.view(), beta)?;
    Ok((y, WindowCache { vars, y_st, y_sp, beta }))
}

/// Backpropagates `∂L/∂ŷ` (normalized space) into `grad`.
pub fn backward_window(p: &ModelParams, cache: &WindowCache, g_y: ArrayView2<f64>, grad: &mut ModelParams) -> Result<()> {
    if g_y.dim() != cache.y_st.dim() {
        return Err(Error::Shape(format!(
            "gradient {:?} for a forecast of {:?}",
            g_y.dim(),
            cache.y_st.dim()
        )));
    }
    if p.cfg.learn_beta {
        grad.beta += Zip::from(g_y)
            .and(&cache.y_st)
            .and(&cache.y_sp)
            .fold(0.0, |a, &g, &st, &sp| a + g * (st - sp));
    }
    let beta = cache.beta;
    let base_trainable = !p.backbone.cfg.frozen;
    let spectral_input = p.enhancer.trainable && p.cfg.sma.lambda > 0.0;
    let to_image = |scale: f64, j: usize, image: &RenderedImage| {
        let g: Vec<f64> = g_y.column(j).iter().map(|v| v * scale).collect();
        to_three_channel((reconstruct_adjoint(&g, image) / 3.0).view())
    };

    for (j, v) in cache.vars.iter().enumerate() {
        if beta != 0.0 {
            let g3 = to_image(beta, j, &v.image);
            let adapter_grads = AdapterGrads {
                tga: grad.tga.as_mut().filter(|t| t.trainable),
                lora: Some(&mut grad.lora).filter(|l| l.trainable),
            };
            let bb = base_trainable.then_some(&mut grad.backbone);
            backbone::backward(&p.backbone, &v.structural, structural_adapters(p), g3.view(), bb, adapter_grads, false)?;
        }
        if beta != 1.0 {
            let g3 = to_image(1.0 - beta, j, &v.image);
            let no_adapters = AdapterGrads { tga: None, lora: None };
            let bb = base_trainable.then_some(&mut grad.backbone);
            let g_in = backbone::backward(&p.backbone, &v.spectral, Adapters::default(), g3.view(), bb, no_adapters, spectral_input)?;
            if let Some(g_in) = g_in {
                let g_img = g_in.sum_axis(Axis(0));
                let g_vis = g_img.slice(s![.., ..v.image.visible_width]);
                sma_backward(g_vis, &v.sma, &p.enhancer, &mut grad.enhancer);
            }
        }
    }
    Ok(())
}

fn check_pair(pred: ArrayView2<f64>, truth: ArrayView2<f64>) -> Result<()> {
    if pred.dim() != truth.dim() {
        return Err(Error::Shape(format!("prediction {:?}, truth {:?}", pred.dim(), truth.dim())));
    }
    if pred.is_empty() {
        return Err(Error::InsufficientData("empty prediction".into()));
    }
    Ok(())
}

pub fn mse(pred: ArrayView2<f64>, truth: ArrayView2<f64>) -> Result<f64> {
    check_pair(pred, truth)?;
    let s = Zip::from(pred).and(truth).fold(0.0, |a, &p, &t| a + (p - t) * (p - t));
    Ok(s / pred.len() as f64)
}

pub fn mae(pred: ArrayView2<f64>, truth: ArrayView2<f64>) -> Result<f64> {
    check_pair(pred, truth)?;
    let s = Zip::from(pred).and(truth).fold(0.0, |a, &p, &t| a + (p - t).abs());
    Ok(s / pred.len() as f64)
}

#[derive(Debug, Clone)]
pub struct ForecastOutcome {
    /// `[H × N]`, original units.
    pub prediction: Array2<f64>,
    /// Branch forecasts in normalized units.
    pub y_st: Array2<f64>,
    pub y_sp: Array2<f64>,
    pub mse: f64,
    pub mae: f64,
}

/// Eval-mode forecast scored against the window's target.
pub fn forecast(p: &ModelParams, w: &TimeSeriesWindow) -> Result<ForecastOutcome> {
    let mut rng = Rng64::seed_from_u64(0);
    let (y, cache) = forward_window(p, w, Mode::Eval, &mut rng)?;
    let prediction = w.denormalize(y.view());
    if prediction.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("denormalized forecast".into()));
    }
    Ok(ForecastOutcome {
        mse: mse(prediction.view(), w.target.view())?,
        mae: mae(prediction.view(), w.target.view())?,
        prediction,
        y_st: cache.y_st,
        y_sp: cache.y_sp,
    })
}

/// Eval-mode forecast `[H × N]` in original units from a raw `[T × N]` context.
pub fn predict(p: &ModelParams, context: Array2<f64>, horizon: usize, norm_const: f64) -> Result<Array2<f64>> {
    if context.nrows() == 0 || context.ncols() == 0 || horizon == 0 {
        return Err(Error::InsufficientData(format!(
            "context {:?} with horizon {horizon}",
            context.dim()
        )));
    }
    let n = context.ncols();
    let w = TimeSeriesWindow::new(0, context, Array2::zeros((horizon, n)), norm_const);
    let (y, _) = forward_window(p, &w, Mode::Eval, &mut Rng64::seed_from_u64(0))?;
    let out = w.denormalize(y.view());
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("denormalized forecast".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

fn mean_metrics(per_window: &[(f64, f64)]) -> Result<Metrics> {
    if per_window.is_empty() {
        return Err(Error::InsufficientData("no windows to evaluate".into()));
    }
    let n = per_window.len() as f64;
    Ok(Metrics {
        mse: per_window.iter().map(|m| m.0).sum::<f64>() / n,
        mae: per_window.iter().map(|m| m.1).sum::<f64>() / n,
    })
}

pub fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Unweighted mean of per-window metrics in original units.
pub fn evaluate(p: &ModelParams, windows: &[TimeSeriesWindow], workers: usize) -> Result<Metrics> {
    if windows.is_empty() {
        return Err(Error::InsufficientData("no windows to evaluate".into()));
    }
    let per: Vec<(f64, f64)> = thread_pool(workers)?.install(|| {
        windows
            .par_iter()
            .map(|w| forecast(p, w).map(|o| (o.mse, o.mae)))
            .collect::<Result<_>>()
    })?;
    mean_metrics(&per)
}

/// Repeats the last `period` context steps over the horizon.
pub fn seasonal_naive(w: &TimeSeriesWindow, period: usize) -> Result<Array2<f64>> {
    let t = w.lookback();
    if period == 0 || period > t {
        return Err(Error::Config(format!("seasonal period {period} outside [1, {t}]")));
    }
    let mut out = Array2::zeros(w.target.raw_dim());
    for k in 0..w.horizon() {
        out.row_mut(k).assign(&w.context.row(t - period + k % period));
    }
    Ok(out)
}

pub fn seasonal_naive_metrics(windows: &[TimeSeriesWindow], period: usize) -> Result<Metrics> {
    let per = windows
        .iter()
        .map(|w| {
            let y = seasonal_naive(w, period)?;
            Ok((mse(y.view(), w.target.view())?, mae(y.view(), w.target.view())?))
        })
        .collect::<Result<Vec<_>>>()?;
    mean_metrics(&per)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// Bias-corrected Adam update of every trainable value of `params`.
pub fn adam_step(params: &mut dyn ParamSet, grads: &dyn ParamSet, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    let g = to_flat(grads);
    let n = value_count(params);
    if g.len() != n || state.m.len() != n {
        return Err(Error::Shape(format!(
            "{n} parameters, {} gradients, optimizer state of {}",
            g.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let b1c = 1.0 - cfg.beta1.powi(state.step as i32);
    let b2c = 1.0 - cfg.beta2.powi(state.step as i32);
    let mut off = 0;
    params.visit_mut("", &mut |_, _, data, role| {
        if role == Role::Trainable {
            for (k, x) in data.iter_mut().enumerate() {
                let i = off + k;
                state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g[i];
                state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = state.m[i] / b1c;
                let v_hat = state.v[i] / b2c;
                *x -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        off += data.len();
    });
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub workers: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 10,
            patience: 3,
            seed: 2024,
            workers: 1,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        if !(a.lr >= 0.0 && a.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be finite and non-negative", a.lr)));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean normalized-space training loss over the epoch's windows.
    pub train_mse: f64,
    pub val_mse: f64,
    pub val_mae: f64,
    pub beta: f64,
    pub gate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Validation and test metrics of the untrained model.
    pub initial_val: Metrics,
    pub initial_test: Metrics,
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the retained weights; `None` keeps the initial ones.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub test: Metrics,
    pub baseline: Metrics,
}

/// Deterministic stream seed from a tuple of counters.
pub fn stream_seed(parts: &[u64]) -> u64 {
    let mut x = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        x ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(x << 6).wrapping_add(x >> 2);
        x = Rng64::seed_from_u64(x).random();
    }
    x
}

struct StepOut {
    loss: f64,
    grad: Vec<f64>,
    bn: Vec<BnStats>,
}

/// One window's training contribution; gradients are pre-divided by `batch`.
fn window_step(p: &ModelParams, w: &TimeSeriesWindow, batch: usize, rng: &mut Rng64) -> Result<StepOut> {
    let (y, cache) = forward_window(p, w, Mode::Train, rng)?;
    let target = w.normalized_target();
    let loss = mse(y.view(), target.view())?;
    let k = 2.0 / (y.len() * batch) as f64;
    let g = (&y - &target) * k;
    let mut grad = zeros_like(p);
    backward_window(p, &cache, g.view(), &mut grad)?;
    Ok(StepOut {
        loss,
        grad: to_flat(&grad),
        bn: cache.bn_stats(),
    })
}

fn epoch_record(p: &ModelParams, epoch: usize, train_mse: f64, val: Metrics) -> EpochRecord {
    EpochRecord {
        epoch,
        train_mse,
        val_mse: val.mse,
        val_mae: val.mae,
        beta: p.beta,
        gate: p.tga.as_ref().map(|t| t.gate()),
    }
}

/// Trains `p` in place, leaving it at the best validation checkpoint.
pub fn train(
    p: &mut ModelParams,
    train: &[TimeSeriesWindow],
    val: &[TimeSeriesWindow],
    test: &[TimeSeriesWindow],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    p.cfg.validate()?;
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(Error::InsufficientData(format!(
            "{} train, {} validation and {} test windows",
            train.len(),
            val.len(),
            test.len()
        )));
    }
    let pool = thread_pool(cfg.workers)?;
    let period = p.cfg.render.periodicity;
    let baseline = seasonal_naive_metrics(test, period)?;
    let initial_val = evaluate(p, val, cfg.workers)?;
    let initial_test = evaluate(p, test, cfg.workers)?;

    let mut state = AdamState::new(value_count(p));
    let mut grad = zeros_like(p);
    let mut best = (initial_val.mse, p.clone(), None);
    let mut epochs = Vec::new();
    let mut bad = 0;
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut Rng64::seed_from_u64(stream_seed(&[cfg.seed, epoch as u64])));
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let snapshot = &*p;
            let outs: Vec<StepOut> = pool.install(|| {
                chunk
                    .par_iter()
                    .map(|&i| {
                        let mut rng = Rng64::seed_from_u64(stream_seed(&[cfg.seed, epoch as u64, step as u64, i as u64]));
                        window_step(snapshot, &train[i], chunk.len(), &mut rng)
                    })
                    .collect::<Result<_>>()
            })?;
            let mut total = vec![0.0; outs[0].grad.len()];
            for o in &outs {
                loss_sum += o.loss;
                total.iter_mut().zip(&o.grad).for_each(|(t, g)| *t += g);
            }
            load_flat(&mut grad, &total);
            adam_step(p, &grad, &mut state, &cfg.adam)?;
            p.beta = clamp_beta(p.beta);
            if p.enhancer.trainable {
                for stats in outs.iter().flat_map(|o| &o.bn) {
                    p.enhancer.update_running(stats);
                }
            }
        }
        let v = evaluate(p, val, cfg.workers)?;
        epochs.push(epoch_record(p, epoch, loss_sum / train.len() as f64, v));
        if v.mse < best.0 {
            best = (v.mse, p.clone(), Some(epoch));
            bad = 0;
        } else {
            bad += 1;
            if bad > cfg.patience {
                stopped_early = epoch + 1 < cfg.epochs;
                break;
            }
        }
    }
    *p = best.1;
    Ok(TrainReport {
        initial_val,
        initial_test,
        epochs,
        best_epoch: best.2,
        stopped_early,
        test: evaluate(p, test, cfg.workers)?,
        baseline,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradGroup {
    Sma,
    Tga,
    Lora,
    Beta,
    Backbone,
}

impl GradGroup {
    pub const ALL: [GradGroup; 5] = [GradGroup::Sma, GradGroup::Tga, GradGroup::Lora, GradGroup::Beta, GradGroup::Backbone];

    fn prefix(self) -> &'static str {
        match self {
            GradGroup::Sma => "sma.",
            GradGroup::Tga => "tga.",
            GradGroup::Lora => "lora.",
            GradGroup::Beta => "beta",
            GradGroup::Backbone => "backbone.",
        }
    }

    /// Largest accepted relative error.
    pub fn bound(self) -> f64 {
        match self {
            GradGroup::Backbone => 1e-3,
            GradGroup::Beta => 1e-6,
            _ => 1e-4,
        }
    }
}

impl std::str::FromStr for GradGroup {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sma" => Ok(GradGroup::Sma),
            "tga" => Ok(GradGroup::Tga),
            "lora" => Ok(GradGroup::Lora),
            "beta" => Ok(GradGroup::Beta),
            "backbone" => Ok(GradGroup::Backbone),
            other => Err(Error::Config(format!(
                "unknown gradient group {other:?} (sma, tga, lora, beta, backbone)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: GradGroup,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
    pub bound: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub fault: f64,
    pub groups: Vec<GroupCheck>,
    pub passed: bool,
}

/// Small model on which every parameter group carries gradient.
pub fn gradcheck_model(seed: u64) -> Result<(ModelParams, TimeSeriesWindow)> {
    let backbone = BackboneConfig {
        patch_size: 2,
        d_model: 16,
        n_heads: 2,
        e_layers: 2,
        d_layers: 1,
        d_ff: 24,
        dropout: 0.1,
        frozen: false,
        image_height: 8,
        image_width: 8,
    };
    let cfg = ModelConfig {
        render: RenderSpec {
            periodicity: 4,
            image_height: 8,
            image_width: 8,
            patch_size: 2,
            align_const: 1.0,
            interpolation: Interpolation::Bilinear,
        },
        backbone,
        sma: SmaConfig { lambda: 0.5 },
        sma_dropout: 0.1,
        lora: LoraConfig { rank: 2, alpha: 4.0, dropout: 0.1 },
        tga: true,
        beta: 0.4,
        learn_beta: true,
    };
    let mut p = ModelParams::new(cfg, seed)?;
    let mut rng = Rng64::seed_from_u64(stream_seed(&[seed, 1]));
    p.lora.randomize_b(0.1, &mut rng);
    if let Some(t) = &mut p.tga {
        t.w_fusion = 0.3;
    }
    let (t, h) = (16, 4);
    let series = Array2::from_shape_fn((t + h, 2), |(i, j)| {
        (i as f64 * 1.3 + j as f64).sin() + 0.3 * rng.random::<f64>()
    });
    let w = TimeSeriesWindow::new(
        0,
        series.slice(s![..t, ..]).to_owned(),
        series.slice(s![t.., ..]).to_owned(),
        1.0,
    );
    Ok((p, w))
}

/// Finite-difference check of the composite training loss on
/// [`gradcheck_model`]. Analytic gradients are multiplied by `fault`
/// (1 for a real check) before comparison.
pub fn gradcheck(groups: &[GradGroup], seed: u64, samples: usize, fault: f64) -> Result<GradcheckReport> {
    let (p, w) = gradcheck_model(seed)?;
    let target = w.normalized_target();
    let fwd_seed = stream_seed(&[seed, 2]);
    let loss_at = |q: &ModelParams| -> Result<(f64, Array2<f64>, WindowCache)> {
        let mut rng = Rng64::seed_from_u64(fwd_seed);
        let (y, cache) = forward_window(q, &w, Mode::Train, &mut rng)?;
        Ok((mse(y.view(), target.view())?, y, cache))
    };
    let (_, y, cache) = loss_at(&p)?;
    let g = (&y - &target) * (2.0 / y.len() as f64);
    let mut grad = zeros_like(&p);
    backward_window(&p, &cache, g.view(), &mut grad)?;
    let analytic = to_flat(&grad);
    let base = to_flat(&p);
    let tensors = layout(&p);

    let mut pick = Rng64::seed_from_u64(stream_seed(&[seed, 3]));
    let mut out = Vec::new();
    for &group in groups {
        let idx: Vec<(usize, &str)> = tensors
            .iter()
            .filter(|(name, _, _, role)| name.starts_with(group.prefix()) && *role != Role::Buffer)
            .flat_map(|(name, off, len, _)| (*off..off + len).map(move |i| (i, name.as_str())))
            .collect();
        if idx.is_empty() {
            return Err(Error::Config(format!("gradient group {group:?} has no parameters")));
        }
        let chosen: Vec<(usize, &str)> = if idx.len() <= samples {
            idx
        } else {
            idx.choose_multiple(&mut pick, samples).copied().collect()
        };
        let mut worst = (0.0, String::new());
        for &(i, name) in &chosen {
            let mut err = None;
            let numeric = central_difference(
                |t| {
                    let mut flat = base.clone();
                    flat[i] += t;
                    let mut q = p.clone();
                    load_flat(&mut q, &flat);
                    match loss_at(&q) {
                        Ok((loss, _, c)) => Probe { loss, pattern: c.relu_pattern() },
                        Err(e) => {
                            err.get_or_insert(e);
                            Probe::smooth(f64::NAN)
                        }
                    }
                },
                1e-5,
            );
            if let Some(e) = err {
                return Err(e);
            }
            let r = rel_err(analytic[i] * fault, numeric);
            if r.is_nan() || r > worst.0 {
                worst = (r, format!("{name}[{}]", i - tensors.iter().find(|t| t.0 == name).map_or(0, |t| t.1)));
            }
        }
        out.push(GroupCheck {
            group,
            checked: chosen.len(),
            max_rel_err: worst.0,
            worst: worst.1,
            bound: group.bound(),
            passed: worst.0 < group.bound(),
        });
    }
    Ok(GradcheckReport {
        seed,
        fault,
        passed: out.iter().all(|g| g.passed),
        groups: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_series, windows, SynthSpec};
    use ndarray::array;

    fn tiny_cfg() -> ModelConfig {
        let (p, _) = gradcheck_model(0).unwrap();
        p.cfg
    }

    fn tiny_windows(n: usize, seed: u64) -> Vec<TimeSeriesWindow> {
        let ds = synth_series(&SynthSpec {
            length: 20 + n,
            period: 4,
            seed,
            n_vars: 2,
            ..SynthSpec::default()
        })
        .unwrap();
        windows(&ds.as_segment(), 16, 4, 1, 1.0).unwrap()
    }

    #[test]
    fn clamp_and_fuse_examples() {
        assert_eq!(clamp_beta(1.5), 1.0);
        assert_eq!(clamp_beta(-0.2), 0.0);
        assert_eq!(clamp_beta(0.37), 0.37);
        let st = array![[2.0], [1.0]];
        let sp = array![[4.0], [-1.0]];
        assert_eq!(fuse(st.view(), sp.view(), 1.0).unwrap(), st);
        assert_eq!(fuse(st.view(), sp.view(), 0.0).unwrap(), sp);
        assert_eq!(fuse(st.view(), sp.view(), 0.5).unwrap()[[0, 0]], 3.0);
        let scaled = fuse((&st * 3.0).view(), (&sp * 3.0).view(), 0.3).unwrap();
        let base = fuse(st.view(), sp.view(), 0.3).unwrap();
        assert!(Zip::from(&scaled).and(&base).all(|&a, &b| (a - 3.0 * b).abs() < 1e-12));
        assert!(fuse(st.view(), array![[1.0]].view(), 0.5).is_err());
    }

    #[test]
    fn metric_examples() {
        let p = array![[1.0, 2.0]];
        let t = array![[1.0, 4.0]];
        assert_eq!(mse(p.view(), t.view()).unwrap(), 2.0);
        assert_eq!(mae(p.view(), t.view()).unwrap(), 1.0);
        assert_eq!(mse(t.view(), t.view()).unwrap(), 0.0);
        assert_eq!(mae((-&p).view(), (-&t).view()).unwrap(), 1.0);
        assert!(mse(p.view(), array![[1.0]].view()).is_err());
    }

    #[test]
    fn adam_examples() {
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut p = TgaParams::new(2, &mut crate::nn::tests::rng(0)).unwrap();
        let before = p.clone();
        let mut state = AdamState::new(value_count(&p));
        let z = zeros_like(&p);
        adam_step(&mut p, &z, &mut state, &cfg).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step, 1);

        let mut p = before.clone();
        let mut g = zeros_like(&p);
        crate::params::fill(&mut g, 1.0);
        let mut state = AdamState::new(value_count(&p));
        adam_step(&mut p, &g, &mut state, &cfg).unwrap();
        // m̂ = 1, v̂ = 1: Δ = −lr / (1 + ε)
        let expect = -0.1 / (1.0 + 1e-8);
        assert!(((p.w_fusion - before.w_fusion) - expect).abs() < 1e-15);

        let mut frozen = before.clone();
        frozen.trainable = false;
        let mut state = AdamState::new(value_count(&frozen));
        for _ in 0..3 {
            adam_step(&mut frozen, &g, &mut state, &cfg).unwrap();
        }
        assert_eq!(frozen.w_proj, before.w_proj);
    }

    #[test]
    fn beta_extremes_select_one_branch() {
        let w = &tiny_windows(1, 3)[0];
        let mut p = ModelParams::new(tiny_cfg(), 5).unwrap();
        p.beta = 0.0;
        let o = forecast(&p, w).unwrap();
        assert_eq!(w.normalize_values(o.prediction.view()).dim(), o.y_sp.dim());
        let (y, c) = forward_window(&p, w, Mode::Eval, &mut Rng64::seed_from_u64(0)).unwrap();
        assert_eq!(y, c.y_sp);
        p.beta = 1.0;
        let (y, c) = forward_window(&p, w, Mode::Eval, &mut Rng64::seed_from_u64(0)).unwrap();
        assert_eq!(y, c.y_st);
    }

    #[test]
    fn identical_variables_forecast_identically() {
        let w = &tiny_windows(1, 4)[0];
        let mut ctx = w.context.clone();
        let mut tgt = w.target.clone();
        let c0 = ctx.column(0).to_owned();
        ctx.column_mut(1).assign(&c0);
        let t0 = tgt.column(0).to_owned();
        tgt.column_mut(1).assign(&t0);
        let w = TimeSeriesWindow::new(0, ctx, tgt, 1.0);
        let p = ModelParams::new(tiny_cfg(), 1).unwrap();
        let o = forecast(&p, &w).unwrap();
        assert_eq!(o.prediction.column(0), o.prediction.column(1));
        assert_eq!(forecast(&p, &w).unwrap().prediction, o.prediction);
    }

    #[test]
    fn startup_branches_agree_without_sma_and_gate() {
        let mut cfg = tiny_cfg();
        cfg.sma.lambda = 0.0;
        cfg.tga = false;
        let p = ModelParams::new(cfg, 2).unwrap();
        let o = forecast(&p, &tiny_windows(1, 5)[0]).unwrap();
        assert_eq!(o.y_st, o.y_sp);
    }

    #[test]
    fn beta_gradient_closed_form() {
        let (p, w) = gradcheck_model(7).unwrap();
        let (y, c) = forward_window(&p, &w, Mode::Eval, &mut Rng64::seed_from_u64(0)).unwrap();
        let g = y.mapv(|v| v.sin());
        let mut grad = zeros_like(&p);
        backward_window(&p, &c, g.view(), &mut grad).unwrap();
        let expect: f64 = Zip::from(&g).and(&c.y_st).and(&c.y_sp).fold(0.0, |a, &g, &s, &q| a + g * (s - q));
        assert!((grad.beta - expect).abs() <= 1e-10 * expect.abs().max(1.0));
    }

    #[test]
    fn gradcheck_passes_and_flags_faults() {
        let r = gradcheck(&GradGroup::ALL, 11, 12, 1.0).unwrap();
        assert!(r.passed, "{r:#?}");
        let bad = gradcheck(&[GradGroup::Lora, GradGroup::Beta], 11, 4, 1.1).unwrap();
        assert!(bad.groups.iter().all(|g| !g.passed), "{bad:#?}");
    }

    #[test]
    fn seasonal_naive_repeats_last_period() {
        let ctx = Array2::from_shape_fn((6, 1), |(i, _)| i as f64);
        let w = TimeSeriesWindow::new(0, ctx, Array2::zeros((5, 1)), 1.0);
        let y = seasonal_naive(&w, 2).unwrap();
        assert_eq!(y.column(0).to_vec(), vec![4.0, 5.0, 4.0, 5.0, 4.0]);
        assert!(seasonal_naive(&w, 7).is_err());
    }

    #[test]
    fn evaluate_is_mean_of_windows() {
        let ws = tiny_windows(3, 6);
        let p = ModelParams::new(tiny_cfg(), 3).unwrap();
        let m = evaluate(&p, &ws, 2).unwrap();
        let per: Vec<_> = ws.iter().map(|w| forecast(&p, w).unwrap()).collect();
        let mean = per.iter().map(|o| o.mse).sum::<f64>() / ws.len() as f64;
        assert!((m.mse - mean).abs() <= 1e-12 * mean);
        assert!(evaluate(&p, &[], 1).is_err());
    }

    #[test]
    fn training_is_deterministic_and_keeps_beta_in_range() {
        let ws = tiny_windows(12, 8);
        let cfg = TrainConfig {
            batch_size: 4,
            epochs: 3,
            patience: 5,
            seed: 9,
            workers: 1,
            adam: AdamConfig { lr: 0.05, ..AdamConfig::default() },
        };
        let run = |workers| {
            let mut p = ModelParams::new(tiny_cfg(), 4).unwrap();
            let r = train(&mut p, &ws[..8], &ws[8..10], &ws[10..], &TrainConfig { workers, ..cfg }).unwrap();
            (r, to_flat(&p))
        };
        let (a, pa) = run(1);
        let (b, pb) = run(3);
        assert_eq!(a, b);
        assert!(pa.iter().zip(&pb).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.epochs.iter().all(|e| (0.0..=1.0).contains(&e.beta)));
    }

    #[test]
    fn zero_lr_keeps_losses_constant() {
        let ws = tiny_windows(10, 2);
        let mut cfg = tiny_cfg();
        cfg.sma.lambda = 0.0;
        cfg.sma_dropout = 0.0;
        cfg.backbone.dropout = 0.0;
        cfg.lora.dropout = 0.0;
        let mut p = ModelParams::new(cfg, 1).unwrap();
        let before = to_flat(&p);
        let tc = TrainConfig {
            batch_size: 3,
            epochs: 3,
            patience: 5,
            adam: AdamConfig { lr: 0.0, ..AdamConfig::default() },
            ..TrainConfig::default()
        };
        let r = train(&mut p, &ws[..6], &ws[6..8], &ws[8..], &tc).unwrap();
        let e = &r.epochs;
        assert!(e.iter().all(|x| (x.train_mse - e[0].train_mse).abs() < 1e-12 && x.val_mse == e[0].val_mse));
        assert_eq!(e.len(), 3);
        assert_eq!(to_flat(&p)[..100], before[..100]);
    }

    #[test]
    fn patience_zero_stops_on_first_plateau() {
        let ws = tiny_windows(8, 1);
        let mut cfg = tiny_cfg();
        cfg.sma.lambda = 0.0;
        let mut p = ModelParams::new(cfg, 1).unwrap();
        let tc = TrainConfig {
            batch_size: 2,
            epochs: 6,
            patience: 0,
            adam: AdamConfig { lr: 0.0, ..AdamConfig::default() },
            ..TrainConfig::default()
        };
        let r = train(&mut p, &ws[..4], &ws[4..6], &ws[6..], &tc).unwrap();
        assert_eq!(r.epochs.len(), 1);
        assert!(r.stopped_early);
        assert!(train(&mut p, &[], &ws[4..6], &ws[6..], &tc).is_err());
    }

    #[test]
    fn frozen_backbone_untouched_by_training() {
        let ws = tiny_windows(6, 3);
        let mut cfg = tiny_cfg();
        cfg.backbone.frozen = true;
        let mut p = ModelParams::new(cfg, 1).unwrap();
        let before = p.backbone.clone();
        let tc = TrainConfig {
            batch_size: 2,
            epochs: 2,
            patience: 5,
            adam: AdamConfig { lr: 0.1, ..AdamConfig::default() },
            ..TrainConfig::default()
        };
        train(&mut p, &ws[..4], &ws[4..5], &ws[5..], &tc).unwrap();
        assert_eq!(p.backbone, before);
    }
}
