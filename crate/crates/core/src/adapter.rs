//! Temporal Grounding Adapter and low-rank adapters for the structural
//! branch.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{dropout_mask, normal, sigmoid, xavier_uniform, Linear, Mode, Rng64};
use crate::params::{join, visit_array, visit_array_mut, visit_scalar, visit_scalar_mut, ParamSet, Role, Visitor, VisitorMut};

pub const LORA_INIT_STD: f64 = 0.02;

/// `[0, 1, …, L−1]`.
pub fn temporal_indices(l: usize) -> Vec<usize> {
    (0..l).collect()
}

/// Temporal index of each patch of a `rows × cols` grid, listed in row-major
/// patch order. Time runs down each column and then across columns, so patch
/// `(r, c)` gets `c·rows + r`.
pub fn patch_time_index(rows: usize, cols: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(c * rows + r);
        }
    }
    out
}

/// `P[i, 2k] = sin(i/ω_k)`, `P[i, 2k+1] = cos(i/ω_k)`, `ω_k = 10000^{2k/D}`.
pub fn sinusoid_table(l: usize, d: usize) -> Result<Array2<f64>> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::Config(format!("sinusoid width {d} must be even and positive")));
    }
    let mut t = Array2::zeros((l, d));
    for k in 0..d / 2 {
        let omega = 10000f64.powf(2.0 * k as f64 / d as f64);
        for i in 0..l {
            let a = i as f64 / omega;
            t[[i, 2 * k]] = a.sin();
            t[[i, 2 * k + 1]] = a.cos();
        }
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TgaParams {
    /// `[D × D]`
    pub w_proj: Array2<f64>,
    pub w_fusion: f64,
    pub trainable: bool,
}

impl TgaParams {
    pub fn new(d: usize, rng: &mut Rng64) -> Result<Self> {
        if d == 0 || !d.is_multiple_of(2) {
            return Err(Error::Config(format!("TGA width {d} must be even and positive")));
        }
        Ok(TgaParams {
            w_proj: xavier_uniform(d, d, rng),
            w_fusion: 0.0,
            trainable: true,
        })
    }

    pub fn gate(&self) -> f64 {
        sigmoid(self.w_fusion)
    }
}

impl ParamSet for TgaParams {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        let role = if self.trainable { Role::Trainable } else { Role::Frozen };
        visit_array(f, prefix, "proj.weight", &self.w_proj, role);
        visit_scalar(f, prefix, "fusion", &self.w_fusion, role);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        let role = if self.trainable { Role::Trainable } else { Role::Frozen };
        visit_array_mut(f, prefix, "proj.weight", &mut self.w_proj, role);
        visit_scalar_mut(f, prefix, "fusion", &mut self.w_fusion, role);
    }
}

#[derive(Debug, Clone)]
pub struct TgaCache {
    table: Array2<f64>,
    projected: Array2<f64>,
    gate: f64,
}

/// `X + σ(w)·(P W_projᵀ)`, where `table` holds the sinusoid rows of the
/// tokens in `x`.
pub fn tga_forward(x: ArrayView2<f64>, p: &TgaParams, table: ArrayView2<f64>) -> Result<(Array2<f64>, TgaCache)> {
    if x.dim() != table.dim() || p.w_proj.dim() != (x.ncols(), x.ncols()) {
        return Err(Error::Shape(format!(
            "TGA tokens {:?}, table {:?}, projection {:?}",
            x.dim(),
            table.dim(),
            p.w_proj.dim()
        )));
    }
    let projected = table.dot(&p.w_proj.t());
    let gate = p.gate();
    let y = &x + &(&projected * gate);
    Ok((
        y,
        TgaCache {
            table: table.to_owned(),
            projected,
            gate,
        },
    ))
}

/// Accumulates `W_proj` and `w_fusion` gradients; the input gradient is the
/// upstream gradient unchanged.
pub fn tga_backward(gy: ArrayView2<f64>, cache: &TgaCache, grad: &mut TgaParams) {
    let g = cache.gate;
    grad.w_fusion += g * (1.0 - g) * (&gy * &cache.projected).sum();
    grad.w_proj += &(gy.t().dot(&cache.table) * g);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            alpha: 16.0,
            dropout: 0.1,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.rank == 0 || self.rank > d {
            return Err(Error::Config(format!("LoRA rank {} outside [1, {d}]", self.rank)));
        }
        if !self.scale().is_finite() {
            return Err(Error::Config("LoRA scale is not finite".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("LoRA dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactor {
    /// `[r × D]`
    pub a: Array2<f64>,
    /// `[D × r]`
    pub b: Array2<f64>,
    pub scale: f64,
}

impl LoraFactor {
    /// `A ~ N(0, 0.02²)`, `B = 0`.
    pub fn new(d: usize, cfg: &LoraConfig, rng: &mut Rng64) -> Self {
        LoraFactor {
            a: normal((cfg.rank, d), LORA_INIT_STD, rng),
            b: Array2::zeros((d, cfg.rank)),
            scale: cfg.scale(),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }
}

/// `W + s·B·A`.
pub fn lora_apply(w: ArrayView2<f64>, f: &LoraFactor) -> Result<Array2<f64>> {
    let (r, d_in) = f.a.dim();
    if f.b.ncols() != r || w.dim() != (f.b.nrows(), d_in) {
        return Err(Error::Shape(format!(
            "weight {:?} does not match B {:?} · A {:?}",
            w.dim(),
            f.b.dim(),
            f.a.dim()
        )));
    }
    Ok(&w + &(f.b.dot(&f.a) * f.scale))
}

#[derive(Debug, Clone)]
pub struct LoraCache {
    mask: Array2<f64>,
    x_drop: Array2<f64>,
    h: Array2<f64>,
}

/// `x Wᵀ + b + s·(drop(x) Aᵀ) Bᵀ`; with no factor this is the plain layer.
pub fn lora_linear_forward(
    base: &Linear,
    factor: Option<&LoraFactor>,
    x: ArrayView2<f64>,
    dropout: f64,
    mode: Mode,
    rng: &mut Rng64,
) -> (Array2<f64>, Option<LoraCache>) {
    let y = base.forward(x);
    let Some(f) = factor else { return (y, None) };
    let mask = match mode {
        Mode::Train => Array2::from_shape_vec(x.raw_dim(), dropout_mask(x.len(), dropout, rng))
            .expect("mask matches input"),
        Mode::Eval => Array2::ones(x.raw_dim()),
    };
    let x_drop = &x * &mask;
    let h = x_drop.dot(&f.a.t());
    let y = y + &(h.dot(&f.b.t()) * f.scale);
    (y, Some(LoraCache { mask, x_drop, h }))
}

/// Returns `∂L/∂x`; base-weight gradients go to `base_grad` when given and
/// factor gradients to `factor_grad`.
pub fn lora_linear_backward(
    base: &Linear,
    factor: Option<&LoraFactor>,
    cache: Option<&LoraCache>,
    x: ArrayView2<f64>,
    gy: ArrayView2<f64>,
    base_grad: Option<&mut Linear>,
    factor_grad: Option<&mut LoraFactor>,
) -> Array2<f64> {
    let mut gx = base.backward(x, gy, base_grad);
    if let (Some(f), Some(c)) = (factor, cache) {
        let s = f.scale;
        let gh = gy.dot(&f.b) * s;
        if let Some(fg) = factor_grad {
            fg.b += &(gy.t().dot(&c.h) * s);
            fg.a += &gh.t().dot(&c.x_drop);
        }
        gx += &(gh.dot(&f.a) * &c.mask);
    }
    gx
}

/// Q, K and V factors for every encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraSet {
    pub layers: Vec<[LoraFactor; 3]>,
    pub dropout: f64,
    pub trainable: bool,
}

impl LoraSet {
    pub fn new(n_layers: usize, d: usize, cfg: &LoraConfig, rng: &mut Rng64) -> Result<Self> {
        cfg.validate(d)?;
        let layers = (0..n_layers)
            .map(|_| {
                [
                    LoraFactor::new(d, cfg, rng),
                    LoraFactor::new(d, cfg, rng),
                    LoraFactor::new(d, cfg, rng),
                ]
            })
            .collect();
        Ok(LoraSet {
            layers,
            dropout: cfg.dropout,
            trainable: true,
        })
    }

    /// Random `B` as well as `A`, for tests and gradient checks.
    pub fn randomize_b(&mut self, std: f64, rng: &mut Rng64) {
        let n = Normal::new(0.0, std).expect("positive std");
        for layer in &mut self.layers {
            for f in layer.iter_mut() {
                f.b.mapv_inplace(|_| n.sample(rng));
            }
        }
    }
}

const QKV: [&str; 3] = ["q", "k", "v"];

impl ParamSet for LoraSet {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        let role = if self.trainable { Role::Trainable } else { Role::Frozen };
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, fac) in QKV.iter().zip(layer) {
                let p = join(prefix, &format!("layers.{i}.{name}"));
                visit_array(f, &p, "A", &fac.a, role);
                visit_array(f, &p, "B", &fac.b, role);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        let role = if self.trainable { Role::Trainable } else { Role::Frozen };
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, fac) in QKV.iter().zip(layer.iter_mut()) {
                let p = join(prefix, &format!("layers.{i}.{name}"));
                visit_array_mut(f, &p, "A", &mut fac.a, role);
                visit_array_mut(f, &p, "B", &mut fac.b, role);
            }
        }
    }
}

/// Numerical rank: singular values of `m` above `tol`, by one-sided Jacobi
/// orthogonalization of the columns.
pub fn numerical_rank(m: ArrayView2<f64>, tol: f64) -> usize {
    let mut u = m.to_owned();
    let n = u.ncols();
    for _ in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (cp, cq) = (u.column(p), u.column(q));
                let alpha = cp.dot(&cp);
                let beta = cq.dot(&cq);
                let gamma = cp.dot(&cq);
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..u.nrows() {
                    let (a, b) = (u[[k, p]], u[[k, q]]);
                    u[[k, p]] = c * a - s * b;
                    u[[k, q]] = s * a + c * b;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let sv: Array1<f64> = u.axis_iter(Axis(1)).map(|c| c.dot(&c).sqrt()).collect();
    sv.iter().filter(|&&v| v > tol).count()
}

/// Sinusoid rows for the given temporal indices.
pub fn select_rows(table: ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    table.select(Axis(0), idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, rel_err, Probe};
    use crate::nn::tests::{rand2, rng};
    use crate::params::{layout, load_flat, to_flat, zeros_like};
    use rand::SeedableRng;

    #[test]
    fn indices() {
        assert_eq!(temporal_indices(4), vec![0, 1, 2, 3]);
        assert_eq!(temporal_indices(1), vec![0]);
        assert_eq!(temporal_indices((224 / 16) * (224 / 16)).len(), 196);
        let idx = patch_time_index(2, 3);
        assert_eq!(idx, vec![0, 2, 4, 1, 3, 5]);
        let mut s = patch_time_index(4, 7);
        s.sort();
        assert_eq!(s, temporal_indices(28));
    }

    #[test]
    fn sinusoid_values() {
        let t = sinusoid_table(3, 8).unwrap();
        for k in 0..4 {
            assert_eq!(t[[0, 2 * k]], 0.0);
            assert_eq!(t[[0, 2 * k + 1]], 1.0);
        }
        assert!((t[[1, 0]] - 1f64.sin()).abs() < 1e-12);
        assert!((t[[1, 1]] - 1f64.cos()).abs() < 1e-12);
        assert!((t[[1, 0]] - 0.8414710).abs() < 1e-7);
        assert!(sinusoid_table(3, 7).is_err());
    }

    #[test]
    fn sinusoid_rows_are_distinct() {
        let t = sinusoid_table(2000, 8).unwrap();
        let mut min = f64::INFINITY;
        for i in 0..t.nrows() {
            for j in i + 1..t.nrows() {
                let d = (&t.row(i) - &t.row(j)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                min = min.min(d);
            }
        }
        assert!(min > 1e-6);
        assert!(t.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn tga_edges() {
        let mut r = rng(1);
        let mut p = TgaParams::new(4, &mut r).unwrap();
        let x = rand2(3, 4, &mut r);
        let table = sinusoid_table(3, 4).unwrap();
        assert_eq!(p.gate(), 0.5);
        p.w_fusion = -40.0;
        let (y, c) = tga_forward(x.view(), &p, table.view()).unwrap();
        let pmax = c.projected.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let d = (&y - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(d < 1e-12 * pmax);
        p.w_fusion = 0.3;
        p.w_proj.fill(0.0);
        assert_eq!(tga_forward(x.view(), &p, table.view()).unwrap().0, x);
        assert!(TgaParams::new(5, &mut r).is_err());
    }

    #[test]
    fn lora_apply_examples() {
        let w = Array2::from_shape_fn((2, 2), |(i, j)| (i * 2 + j) as f64 + 0.25);
        let mut r = rng(2);
        let cfg = LoraConfig { rank: 1, alpha: 1.0, dropout: 0.0 };
        let f = LoraFactor::new(2, &cfg, &mut r);
        assert_eq!(lora_apply(w.view(), &f).unwrap(), w);
        let f = LoraFactor {
            a: ndarray::array![[0.0, 1.0]],
            b: ndarray::array![[1.0], [0.0]],
            scale: 1.0,
        };
        assert_eq!(
            lora_apply(Array2::zeros((2, 2)).view(), &f).unwrap(),
            ndarray::array![[0.0, 1.0], [0.0, 0.0]]
        );
        assert_eq!(LoraConfig { rank: 4, alpha: 16.0, dropout: 0.1 }.scale(), 4.0);
        assert!(lora_apply(Array2::zeros((3, 2)).view(), &f).is_err());
    }

    #[test]
    fn lora_rank_bound() {
        let mut r = rng(3);
        let f = LoraFactor {
            a: rand2(2, 6, &mut r),
            b: rand2(6, 2, &mut r),
            scale: 3.0,
        };
        let w = rand2(6, 6, &mut r);
        let delta = &lora_apply(w.view(), &f).unwrap() - &w;
        assert!(numerical_rank(delta.view(), 1e-10) <= 2);
        assert_eq!(numerical_rank(w.view(), 1e-10), 6);
    }

    #[test]
    fn lora_linear_matches_merged_weight() {
        let mut r = rng(4);
        let base = Linear::new(5, 5, &mut r);
        let mut f = LoraFactor::new(5, &LoraConfig { rank: 2, alpha: 4.0, dropout: 0.0 }, &mut r);
        f.b = rand2(5, 2, &mut r);
        let x = rand2(3, 5, &mut r);
        let (y, _) = lora_linear_forward(&base, Some(&f), x.view(), 0.0, Mode::Eval, &mut r);
        let merged = Linear {
            w: lora_apply(base.w.view(), &f).unwrap(),
            b: base.b.clone(),
        };
        assert!((&y - &merged.forward(x.view())).iter().all(|d| d.abs() < 1e-12));
    }

    /// TGA followed by a LoRA-wrapped projection, with a random linear loss.
    fn tga_lora_loss(
        tga: &TgaParams,
        base: &Linear,
        f: &LoraFactor,
        x: &Array2<f64>,
        table: &Array2<f64>,
        wt: &Array2<f64>,
        seed: u64,
    ) -> f64 {
        let (z, _) = tga_forward(x.view(), tga, table.view()).unwrap();
        let (y, _) = lora_linear_forward(base, Some(f), z.view(), 0.2, Mode::Train, &mut Rng64::seed_from_u64(seed));
        (y * wt).sum()
    }

    #[test]
    fn tga_lora_gradients() {
        let (d, l, seed) = (8, 6, 77);
        let mut r = rng(5);
        let mut tga = TgaParams::new(d, &mut r).unwrap();
        tga.w_fusion = 0.3;
        let base = Linear::new(d, d, &mut r);
        let mut f = LoraFactor::new(d, &LoraConfig { rank: 2, alpha: 4.0, dropout: 0.2 }, &mut r);
        f.b = rand2(d, 2, &mut r);
        let x = rand2(l, d, &mut r);
        let table = sinusoid_table(l, d).unwrap();
        let wt = rand2(l, d, &mut r);

        let (z, tc) = tga_forward(x.view(), &tga, table.view()).unwrap();
        let (_, lc) = lora_linear_forward(&base, Some(&f), z.view(), 0.2, Mode::Train, &mut Rng64::seed_from_u64(seed));
        let mut gt = zeros_like(&tga);
        let mut gf = LoraFactor { a: Array2::zeros(f.a.raw_dim()), b: Array2::zeros(f.b.raw_dim()), scale: f.scale };
        let gz = lora_linear_backward(&base, Some(&f), lc.as_ref(), z.view(), wt.view(), None, Some(&mut gf));
        tga_backward(gz.view(), &tc, &mut gt);

        let h = 1e-5;
        let flat = to_flat(&tga);
        let gflat = to_flat(&gt);
        for (_, off, len, _) in layout(&tga) {
            for i in off..off + len {
                let num = central_difference(
                    |t| {
                        let mut v = flat.clone();
                        v[i] += t;
                        let mut q = tga.clone();
                        load_flat(&mut q, &v);
                        Probe::smooth(tga_lora_loss(&q, &base, &f, &x, &table, &wt, seed))
                    },
                    h,
                );
                assert!(rel_err(gflat[i], num) < 1e-4, "tga {i}");
            }
        }
        for which in 0..2 {
            let n = if which == 0 { f.a.len() } else { f.b.len() };
            for i in 0..n {
                let num = central_difference(
                    |t| {
                        let mut q = f.clone();
                        let m = if which == 0 { &mut q.a } else { &mut q.b };
                        m.as_slice_mut().unwrap()[i] += t;
                        Probe::smooth(tga_lora_loss(&tga, &base, &q, &x, &table, &wt, seed))
                    },
                    h,
                );
                let a = if which == 0 { gf.a.as_slice().unwrap()[i] } else { gf.b.as_slice().unwrap()[i] };
                assert!(rel_err(a, num) < 1e-4, "factor {which} {i}");
            }
        }
    }

    #[test]
    fn zero_b_and_zero_projection_gradients() {
        let mut r = rng(6);
        let d = 4;
        let base = Linear::new(d, d, &mut r);
        let f = LoraFactor::new(d, &LoraConfig { rank: 2, alpha: 4.0, dropout: 0.0 }, &mut r);
        let x = rand2(3, d, &mut r);
        let gy = rand2(3, d, &mut r);
        let (_, c) = lora_linear_forward(&base, Some(&f), x.view(), 0.0, Mode::Eval, &mut r);
        let mut gf = LoraFactor { a: Array2::zeros(f.a.raw_dim()), b: Array2::zeros(f.b.raw_dim()), scale: f.scale };
        lora_linear_backward(&base, Some(&f), c.as_ref(), x.view(), gy.view(), None, Some(&mut gf));
        assert!(gf.a.iter().all(|&v| v == 0.0));
        assert!(gf.b.iter().any(|&v| v != 0.0));

        let mut tga = TgaParams::new(d, &mut r).unwrap();
        tga.w_proj.fill(0.0);
        let table = sinusoid_table(3, d).unwrap();
        let (_, tc) = tga_forward(x.view(), &tga, table.view()).unwrap();
        let mut gt = zeros_like(&tga);
        tga_backward(gy.view(), &tc, &mut gt);
        assert_eq!(gt.w_fusion, 0.0);
    }
}
