//! Periodic folding of a 1-D series into a grayscale image and the inverse
//! mapping from a decoded image back to a forecast.
//!
//! The folded grid is `P` rows (one per phase of the period) by `F` columns
//! (one per period), so `grid[r, c] = x[c·P + r]` and consecutive time steps
//! run down a column. The visible region of the rendered image holds the
//! resized context grid; the masked region to its right stands for the
//! horizon and is filled with zeros.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesWindow;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderSpec {
    pub periodicity: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub align_const: f64,
    pub interpolation: Interpolation,
}

impl Default for RenderSpec {
    fn default() -> Self {
        RenderSpec {
            periodicity: 24,
            image_height: 224,
            image_width: 224,
            patch_size: 16,
            align_const: 0.4,
            interpolation: Interpolation::Bilinear,
        }
    }
}

impl RenderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.periodicity == 0 || self.patch_size == 0 {
            return Err(Error::Config("periodicity and patch_size must be positive".into()));
        }
        if self.image_height == 0
            || self.image_width == 0
            || !self.image_height.is_multiple_of(self.patch_size)
            || !self.image_width.is_multiple_of(self.patch_size)
        {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            )));
        }
        if !(self.align_const > 0.0 && self.align_const <= 1.0) {
            return Err(Error::Config(format!(
                "align_const {} outside (0, 1]",
                self.align_const
            )));
        }
        Ok(())
    }

    pub fn patch_cols(&self) -> usize {
        self.image_width / self.patch_size
    }

    pub fn patch_rows(&self) -> usize {
        self.image_height / self.patch_size
    }
}

/// Left padding that makes `len` a multiple of `period`.
pub fn pad_len(len: usize, period: usize) -> usize {
    (period - len % period) % period
}

/// Prepends copies of `x[0]` so the length becomes a multiple of `period`.
pub fn pad_left_replicate(x: &[f64], period: usize) -> Vec<f64> {
    assert!(!x.is_empty() && period > 0);
    let pl = pad_len(x.len(), period);
    let mut out = vec![x[0]; pl];
    out.extend_from_slice(x);
    out
}

/// `grid[r, c] = x[c·period + r]`, shape `period × len/period`.
pub fn fold_to_grid(x: &[f64], period: usize) -> Result<Array2<f64>> {
    if period == 0 || !x.len().is_multiple_of(period) {
        return Err(Error::Shape(format!(
            "series length {} is not divisible by periodicity {period}",
            x.len()
        )));
    }
    let cols = x.len() / period;
    Ok(Array2::from_shape_fn((period, cols), |(r, c)| x[c * period + r]))
}

/// Column-major read-out, the inverse of [`fold_to_grid`].
pub fn unfold_grid(grid: ArrayView2<f64>) -> Vec<f64> {
    grid.t().iter().copied().collect()
}

/// One-dimensional linear interpolation plan with half-pixel centers.
#[derive(Debug, Clone)]
struct Interp1 {
    src_len: usize,
    lo: Vec<usize>,
    hi: Vec<usize>,
    t: Vec<f64>,
}

impl Interp1 {
    fn new(src_len: usize, dst_len: usize) -> Self {
        let scale = src_len as f64 / dst_len as f64;
        let max = (src_len - 1) as f64;
        let mut lo = Vec::with_capacity(dst_len);
        let mut hi = Vec::with_capacity(dst_len);
        let mut t = Vec::with_capacity(dst_len);
        for i in 0..dst_len {
            let src = if src_len == dst_len {
                i as f64
            } else {
                ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, max)
            };
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(src_len - 1);
            lo.push(i0);
            hi.push(i1);
            t.push(src - i0 as f64);
        }
        Interp1 { src_len, lo, hi, t }
    }

    fn is_identity(&self) -> bool {
        self.lo.len() == self.src_len
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let (a, b) = (x[self.lo[k]], x[self.hi[k]]);
            *o = a + self.t[k] * (b - a);
        }
    }

    fn apply_adjoint(&self, g: &[f64], out: &mut [f64]) {
        for (k, gk) in g.iter().enumerate() {
            out[self.lo[k]] += (1.0 - self.t[k]) * gk;
            out[self.hi[k]] += self.t[k] * gk;
        }
    }
}

/// Bilinear resize with half-pixel sampling and edge clamping. Equal
/// dimensions return an exact copy.
pub fn resize_bilinear(grid: ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = grid.dim();
    assert!(h > 0 && w > 0 && out_h > 0 && out_w > 0, "empty resize");
    let ry = Interp1::new(h, out_h);
    let rx = Interp1::new(w, out_w);
    let rows = if ry.is_identity() {
        grid.to_owned()
    } else {
        let mut tmp = Array2::zeros((out_h, w));
        for c in 0..w {
            let col: Vec<f64> = grid.column(c).to_vec();
            let mut dst = vec![0.0; out_h];
            ry.apply(&col, &mut dst);
            tmp.column_mut(c).assign(&ndarray::ArrayView1::from(&dst));
        }
        tmp
    };
    if rx.is_identity() {
        return rows;
    }
    let mut out = Array2::zeros((out_h, out_w));
    for r in 0..out_h {
        let src: Vec<f64> = rows.row(r).to_vec();
        let mut dst = vec![0.0; out_w];
        rx.apply(&src, &mut dst);
        out.row_mut(r).assign(&ndarray::ArrayView1::from(&dst));
    }
    out
}

/// Adjoint of [`resize_bilinear`] from `(in_h, in_w)` to `grad.dim()`.
pub fn resize_bilinear_adjoint(grad: ArrayView2<f64>, in_h: usize, in_w: usize) -> Array2<f64> {
    let (out_h, out_w) = grad.dim();
    let ry = Interp1::new(in_h, out_h);
    let rx = Interp1::new(in_w, out_w);
    let mut cols = Array2::zeros((out_h, in_w));
    for r in 0..out_h {
        let g: Vec<f64> = grad.row(r).to_vec();
        let mut dst = vec![0.0; in_w];
        if rx.is_identity() {
            dst.copy_from_slice(&g);
        } else {
            rx.apply_adjoint(&g, &mut dst);
        }
        cols.row_mut(r).assign(&ndarray::ArrayView1::from(&dst));
    }
    let mut out = Array2::zeros((in_h, in_w));
    for c in 0..in_w {
        let g: Vec<f64> = cols.column(c).to_vec();
        let mut dst = vec![0.0; in_h];
        if ry.is_identity() {
            dst.copy_from_slice(&g);
        } else {
            ry.apply_adjoint(&g, &mut dst);
        }
        out.column_mut(c).assign(&ndarray::ArrayView1::from(&dst));
    }
    out
}

/// Visible and masked pixel widths.
///
/// The visible share of patch columns is `round(cols · T/(T+H) · align_const)`
/// clamped to `[1, cols − 1]`.
pub fn layout_widths(lookback: usize, horizon: usize, spec: &RenderSpec) -> Result<(usize, usize)> {
    spec.validate()?;
    if lookback == 0 || horizon == 0 {
        return Err(Error::Config("lookback and horizon must be positive".into()));
    }
    let cols = spec.patch_cols();
    if cols < 2 {
        return Err(Error::Config(format!(
            "image width {} leaves {cols} patch column(s); need at least one visible and one masked",
            spec.image_width
        )));
    }
    let share = lookback as f64 / (lookback + horizon) as f64;
    let raw = (cols as f64 * share * spec.align_const).round() as usize;
    let n_vis = raw.clamp(1, cols - 1);
    let w_vis = n_vis * spec.patch_size;
    Ok((w_vis, spec.image_width - w_vis))
}

#[derive(Debug, Clone)]
pub struct RenderedImage {
    /// `[image_height × (visible_width + masked_width)]`
    pub pixels: Array2<f64>,
    pub visible_width: usize,
    pub masked_width: usize,
    pub pad_len: usize,
    /// Context periods `F` before resizing.
    pub periods_context: usize,
    /// Periods spanned by the whole image at the visible region's scale.
    pub periods_total: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub spec: RenderSpec,
}

impl RenderedImage {
    pub fn visible(&self) -> ArrayView2<'_, f64> {
        self.pixels.slice(s![.., ..self.visible_width])
    }

    pub fn total_width(&self) -> usize {
        self.visible_width + self.masked_width
    }

    /// Visible patch columns of the backbone grid.
    pub fn visible_patch_cols(&self) -> usize {
        self.visible_width / self.spec.patch_size
    }

    /// Builds the image with `visible` as the left region and zeros elsewhere.
    pub fn compose(&self, visible: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.spec.image_height, self.total_width()));
        out.slice_mut(s![.., ..self.visible_width]).assign(&visible);
        out
    }
}

fn geometry(lookback: usize, horizon: usize, spec: &RenderSpec) -> Result<(usize, usize, usize, usize, usize)> {
    let (w_vis, w_mask) = layout_widths(lookback, horizon, spec)?;
    let p = spec.periodicity;
    let pl = pad_len(lookback, p);
    let f_ctx = (lookback + pl) / p;
    let w_total = w_vis + w_mask;
    let f_total = ((w_total * f_ctx) as f64 / w_vis as f64).round() as usize;
    if f_total * p < pl + lookback + horizon {
        return Err(Error::Config(format!(
            "horizon {horizon} does not fit: the image spans {} steps at the visible scale, need {}",
            f_total * p,
            pl + lookback + horizon
        )));
    }
    Ok((w_vis, w_mask, pl, f_ctx, f_total))
}

/// Renders one normalized context series.
pub fn render_series(context: &[f64], horizon: usize, spec: &RenderSpec) -> Result<RenderedImage> {
    if context.is_empty() {
        return Err(Error::InsufficientData("empty context".into()));
    }
    let (w_vis, w_mask, pl, f_ctx, f_total) = geometry(context.len(), horizon, spec)?;
    let padded = pad_left_replicate(context, spec.periodicity);
    let grid = fold_to_grid(&padded, spec.periodicity)?;
    let visible = resize_bilinear(grid.view(), spec.image_height, w_vis);
    let mut pixels = Array2::zeros((spec.image_height, w_vis + w_mask));
    pixels.slice_mut(s![.., ..w_vis]).assign(&visible);
    Ok(RenderedImage {
        pixels,
        visible_width: w_vis,
        masked_width: w_mask,
        pad_len: pl,
        periods_context: f_ctx,
        periods_total: f_total,
        lookback: context.len(),
        horizon,
        spec: *spec,
    })
}

/// Renders every variable of the window's normalized context.
pub fn render(w: &TimeSeriesWindow, spec: &RenderSpec) -> Result<Vec<RenderedImage>> {
    let ctx = w.normalized_context();
    ctx.axis_iter(Axis(1))
        .map(|col| render_series(&col.to_vec(), w.horizon(), spec))
        .collect()
}

/// Image of the whole context + horizon series at the rendered scale: the
/// ground truth a perfect decoder would emit. Steps past the horizon repeat
/// the last target value.
pub fn render_full(context: &[f64], target: &[f64], spec: &RenderSpec) -> Result<Array2<f64>> {
    let (w_vis, w_mask, _, _, f_total) = geometry(context.len(), target.len(), spec)?;
    let mut series = pad_left_replicate(context, spec.periodicity);
    series.extend_from_slice(target);
    let last = *series.last().expect("non-empty");
    series.resize(f_total * spec.periodicity, last);
    let grid = fold_to_grid(&series, spec.periodicity)?;
    Ok(resize_bilinear(grid.view(), spec.image_height, w_vis + w_mask))
}

/// `[3 × H × W]` with identical channels.
pub fn to_three_channel(img: ArrayView2<f64>) -> Array3<f64> {
    let (h, w) = img.dim();
    let mut out = Array3::zeros((3, h, w));
    for mut ch in out.axis_iter_mut(Axis(0)) {
        ch.assign(&img);
    }
    out
}

/// Channel mean.
pub fn grayscale(img: ArrayView3<f64>) -> Array2<f64> {
    img.sum_axis(Axis(0)) / img.dim().0 as f64
}

/// Decoded grayscale image → normalized-space forecast of length `horizon`.
pub fn reconstruct(decoded: ArrayView2<f64>, prov: &RenderedImage) -> Result<Vec<f64>> {
    let expect = (prov.spec.image_height, prov.total_width());
    if decoded.dim() != expect {
        return Err(Error::Shape(format!(
            "decoded image is {:?}, provenance expects {:?}",
            decoded.dim(),
            expect
        )));
    }
    let grid = resize_bilinear(decoded, prov.spec.periodicity, prov.periods_total);
    let series = unfold_grid(grid.view());
    let from = prov.pad_len + prov.lookback;
    Ok(series[from..from + prov.horizon].to_vec())
}

/// Gradient of a loss w.r.t. the decoded image given its gradient w.r.t.
/// the forecast returned by [`reconstruct`].
pub fn reconstruct_adjoint(grad: &[f64], prov: &RenderedImage) -> Array2<f64> {
    let p = prov.spec.periodicity;
    let mut series = vec![0.0; p * prov.periods_total];
    let from = prov.pad_len + prov.lookback;
    series[from..from + prov.horizon].copy_from_slice(grad);
    let grid = fold_to_grid(&series, p).expect("length is a multiple of the period");
    resize_bilinear_adjoint(grid.view(), prov.spec.image_height, prov.total_width())
}
