//! Desk-scale masked-autoencoder vision transformer.
//!
//! The encoder sees only the visible patches. The decoder fills the masked
//! grid positions with a learned mask token, adds its own positional
//! embedding and predicts every patch's pixels.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::adapter::{
    lora_linear_backward, lora_linear_forward, patch_time_index, sinusoid_table, tga_backward,
    tga_forward, LoraCache, LoraFactor, LoraSet, TgaCache, TgaParams,
};
use crate::error::{Error, Result};
use crate::nn::{
    dropout_mask, gelu, gelu_grad, normal, softmax_rows, softmax_rows_backward, LayerNorm,
    LayerNormCache, Linear, Mode, Rng64,
};
use crate::params::{join, visit_array, visit_array_mut, ParamSet, Role, Visitor, VisitorMut};

pub const IN_CHANS: usize = 3;
const POS_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub e_layers: usize,
    pub d_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub frozen: bool,
    pub image_height: usize,
    pub image_width: usize,
}

impl BackboneConfig {
    pub fn desk() -> Self {
        BackboneConfig {
            patch_size: 16,
            d_model: 64,
            n_heads: 4,
            e_layers: 2,
            d_layers: 1,
            d_ff: 256,
            dropout: 0.1,
            frozen: true,
            image_height: 64,
            image_width: 64,
        }
    }

    pub fn full_scale() -> Self {
        BackboneConfig {
            d_model: 512,
            n_heads: 8,
            d_ff: 2048,
            image_height: 224,
            image_width: 224,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("backbone sizes must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !self.image_height.is_multiple_of(self.patch_size) || !self.image_width.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image {}x{} not divisible by patch {}",
                self.image_height, self.image_width, self.patch_size
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch_size, self.image_width / self.patch_size)
    }

    pub fn n_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_dim(&self) -> usize {
        IN_CHANS * self.patch_size * self.patch_size
    }

    fn role(&self) -> Role {
        if self.frozen {
            Role::Frozen
        } else {
            Role::Trainable
        }
    }
}

/// `[C × H × W]` → `[L × p²C]`, patches in reading order, each flattened as
/// `(row, col, channel)`.
pub fn patchify(img: ArrayView3<f64>, p: usize) -> Result<Array2<f64>> {
    let (c, h, w) = img.dim();
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!("image {h}x{w} not divisible by patch {p}")));
    }
    let (rows, cols) = (h / p, w / p);
    let mut out = Array2::zeros((rows * cols, p * p * c));
    for r in 0..rows {
        for cc in 0..cols {
            let mut row = out.row_mut(r * cols + cc);
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..c {
                        row[(py * p + px) * c + ch] = img[[ch, r * p + py, cc * p + px]];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`] for a `rows × cols` grid.
pub fn unpatchify(x: ArrayView2<f64>, p: usize, rows: usize, cols: usize, c: usize) -> Result<Array3<f64>> {
    if x.dim() != (rows * cols, p * p * c) {
        return Err(Error::Shape(format!(
            "{:?} patches do not form a {rows}x{cols} grid of {p}px, {c}-channel patches",
            x.dim()
        )));
    }
    let mut img = Array3::zeros((c, rows * p, cols * p));
    for r in 0..rows {
        for cc in 0..cols {
            let row = x.row(r * cols + cc);
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..c {
                        img[[ch, r * p + py, cc * p + px]] = row[(py * p + px) * c + ch];
                    }
                }
            }
        }
    }
    Ok(img)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    fn new(d: usize, d_ff: usize, rng: &mut Rng64) -> Self {
        Block {
            ln1: LayerNorm::new(d),
            q: Linear::new(d, d, rng),
            k: Linear::new(d, d, rng),
            v: Linear::new(d, d, rng),
            o: Linear::new(d, d, rng),
            ln2: LayerNorm::new(d),
            fc1: Linear::new(d_ff, d, rng),
            fc2: Linear::new(d, d_ff, rng),
        }
    }

    fn visit(&self, prefix: &str, role: Role, f: &mut Visitor<'_>) {
        self.ln1.visit(&join(prefix, "ln1"), role, f);
        self.q.visit(&join(prefix, "attn.q"), role, f);
        self.k.visit(&join(prefix, "attn.k"), role, f);
        self.v.visit(&join(prefix, "attn.v"), role, f);
        self.o.visit(&join(prefix, "attn.o"), role, f);
        self.ln2.visit(&join(prefix, "ln2"), role, f);
        self.fc1.visit(&join(prefix, "mlp.fc1"), role, f);
        self.fc2.visit(&join(prefix, "mlp.fc2"), role, f);
    }

    fn visit_mut(&mut self, prefix: &str, role: Role, f: &mut VisitorMut<'_>) {
        self.ln1.visit_mut(&join(prefix, "ln1"), role, f);
        self.q.visit_mut(&join(prefix, "attn.q"), role, f);
        self.k.visit_mut(&join(prefix, "attn.k"), role, f);
        self.v.visit_mut(&join(prefix, "attn.v"), role, f);
        self.o.visit_mut(&join(prefix, "attn.o"), role, f);
        self.ln2.visit_mut(&join(prefix, "ln2"), role, f);
        self.fc1.visit_mut(&join(prefix, "mlp.fc1"), role, f);
        self.fc2.visit_mut(&join(prefix, "mlp.fc2"), role, f);
    }
}

#[derive(Debug, Clone)]
struct BlockCache {
    ln1_out: Array2<f64>,
    ln1: LayerNormCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    lora: [Option<LoraCache>; 3],
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    mask1: Array2<f64>,
    ln2_out: Array2<f64>,
    ln2: LayerNormCache,
    h1: Array2<f64>,
    a1: Array2<f64>,
    mask2: Array2<f64>,
}

fn residual_mask(shape: (usize, usize), rate: f64, mode: Mode, rng: &mut Rng64) -> Array2<f64> {
    match mode {
        Mode::Train if rate > 0.0 => {
            Array2::from_shape_vec(shape, dropout_mask(shape.0 * shape.1, rate, rng)).expect("mask shape")
        }
        _ => Array2::ones(shape),
    }
}

struct BlockCtx<'a> {
    n_heads: usize,
    dropout: f64,
    lora: Option<&'a [LoraFactor; 3]>,
    lora_dropout: f64,
    mode: Mode,
}

/// Scaled dot-product attention per head; returns the concatenated head
/// outputs and the attention weights.
pub fn attention(q: ArrayView2<f64>, k: ArrayView2<f64>, v: ArrayView2<f64>, n_heads: usize) -> (Array2<f64>, Vec<Array2<f64>>) {
    let (n, d) = q.dim();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((n, d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        let p = softmax_rows(scores.view());
        out.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    (out, probs)
}

fn block_forward(b: &Block, x: Array2<f64>, ctx: &BlockCtx, rng: &mut Rng64) -> (Array2<f64>, BlockCache) {
    let (ln1_out, ln1) = b.ln1.forward(x.view());
    let mut lora: [Option<LoraCache>; 3] = [None, None, None];
    let mut qkv = Vec::with_capacity(3);
    for (i, lin) in [&b.q, &b.k, &b.v].into_iter().enumerate() {
        let f = ctx.lora.map(|l| &l[i]);
        let (y, c) = lora_linear_forward(lin, f, ln1_out.view(), ctx.lora_dropout, ctx.mode, rng);
        lora[i] = c;
        qkv.push(y);
    }
    let v = qkv.pop().expect("v");
    let k = qkv.pop().expect("k");
    let q = qkv.pop().expect("q");
    let (attn, probs) = attention(q.view(), k.view(), v.view(), ctx.n_heads);
    let proj = b.o.forward(attn.view());
    let mask1 = residual_mask(proj.dim(), ctx.dropout, ctx.mode, rng);
    let x1 = &x + &(&proj * &mask1);

    let (ln2_out, ln2) = b.ln2.forward(x1.view());
    let h1 = b.fc1.forward(ln2_out.view());
    let a1 = h1.mapv(gelu);
    let m = b.fc2.forward(a1.view());
    let mask2 = residual_mask(m.dim(), ctx.dropout, ctx.mode, rng);
    let x2 = &x1 + &(&m * &mask2);
    (
        x2,
        BlockCache {
            ln1_out,
            ln1,
            q,
            k,
            v,
            lora,
            probs,
            attn,
            mask1,
            ln2_out,
            ln2,
            h1,
            a1,
            mask2,
        },
    )
}

fn block_backward(
    b: &Block,
    c: &BlockCache,
    g_out: Array2<f64>,
    n_heads: usize,
    lora: Option<&[LoraFactor; 3]>,
    mut grad: Option<&mut Block>,
    mut lora_grad: Option<&mut [LoraFactor; 3]>,
) -> Array2<f64> {
    // MLP branch
    let g_m = &g_out * &c.mask2;
    let g_a1 = b.fc2.backward(c.a1.view(), g_m.view(), grad.as_deref_mut().map(|g| &mut g.fc2));
    let g_h1 = &g_a1 * &c.h1.mapv(gelu_grad);
    let g_ln2 = b.fc1.backward(c.ln2_out.view(), g_h1.view(), grad.as_deref_mut().map(|g| &mut g.fc1));
    let mut g_x1 = g_out;
    g_x1 += &b.ln2.backward(&c.ln2, g_ln2.view(), grad.as_deref_mut().map(|g| &mut g.ln2));

    // attention branch
    let g_proj = &g_x1 * &c.mask1;
    let g_attn = b.o.backward(c.attn.view(), g_proj.view(), grad.as_deref_mut().map(|g| &mut g.o));
    let (n, d) = c.q.dim();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut g_q = Array2::zeros((n, d));
    let mut g_k = Array2::zeros((n, d));
    let mut g_v = Array2::zeros((n, d));
    for (h, p) in c.probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let go = g_attn.slice(cols);
        let g_p = go.dot(&c.v.slice(cols).t());
        g_v.slice_mut(cols).assign(&p.t().dot(&go));
        let g_s = softmax_rows_backward(p.view(), g_p.view()) * scale;
        g_q.slice_mut(cols).assign(&g_s.dot(&c.k.slice(cols)));
        g_k.slice_mut(cols).assign(&g_s.t().dot(&c.q.slice(cols)));
    }
    let mut g_ln1 = Array2::zeros((n, d));
    for (i, (lin, g)) in [&b.q, &b.k, &b.v].into_iter().zip([g_q, g_k, g_v]).enumerate() {
        let base_grad = grad.as_deref_mut().map(|gb| match i {
            0 => &mut gb.q,
            1 => &mut gb.k,
            _ => &mut gb.v,
        });
        let fg = lora_grad.as_deref_mut().map(|l| &mut l[i]);
        g_ln1 += &lora_linear_backward(
            lin,
            lora.map(|l| &l[i]),
            c.lora[i].as_ref(),
            c.ln1_out.view(),
            g.view(),
            base_grad,
            fg,
        );
    }
    let mut g_x = g_x1;
    g_x += &b.ln1.backward(&c.ln1, g_ln1.view(), grad.map(|g| &mut g.ln1));
    g_x
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub cfg: BackboneConfig,
    pub patch_embed: Linear,
    pub pos_embed: Array2<f64>,
    pub encoder: Vec<Block>,
    pub decoder_embed: Linear,
    pub mask_token: Array1<f64>,
    pub decoder_pos_embed: Array2<f64>,
    pub decoder: Vec<Block>,
    pub decoder_norm: LayerNorm,
    pub pred: Linear,
}

impl BackboneParams {
    pub fn new(cfg: BackboneConfig, rng: &mut Rng64) -> Result<Self> {
        cfg.validate()?;
        let (d, l) = (cfg.d_model, cfg.n_patches());
        Ok(BackboneParams {
            patch_embed: Linear::new(d, cfg.patch_dim(), rng),
            pos_embed: normal((l, d), POS_INIT_STD, rng),
            encoder: (0..cfg.e_layers).map(|_| Block::new(d, cfg.d_ff, rng)).collect(),
            decoder_embed: Linear::new(d, d, rng),
            mask_token: normal((1, d), POS_INIT_STD, rng).index_axis_move(Axis(0), 0),
            decoder_pos_embed: normal((l, d), POS_INIT_STD, rng),
            decoder: (0..cfg.d_layers).map(|_| Block::new(d, cfg.d_ff, rng)).collect(),
            decoder_norm: LayerNorm::new(d),
            pred: Linear::new(cfg.patch_dim(), d, rng),
            cfg,
        })
    }
}

impl ParamSet for BackboneParams {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        let role = self.cfg.role();
        self.patch_embed.visit(&join(prefix, "patch_embed"), role, f);
        visit_array(f, prefix, "pos_embed", &self.pos_embed, role);
        for (i, b) in self.encoder.iter().enumerate() {
            b.visit(&join(prefix, &format!("encoder.{i}")), role, f);
        }
        self.decoder_embed.visit(&join(prefix, "decoder_embed"), role, f);
        visit_array(f, prefix, "mask_token", &self.mask_token, role);
        visit_array(f, prefix, "decoder_pos_embed", &self.decoder_pos_embed, role);
        for (i, b) in self.decoder.iter().enumerate() {
            b.visit(&join(prefix, &format!("decoder.{i}")), role, f);
        }
        self.decoder_norm.visit(&join(prefix, "decoder_norm"), role, f);
        self.pred.visit(&join(prefix, "pred"), role, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        let role = self.cfg.role();
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), role, f);
        visit_array_mut(f, prefix, "pos_embed", &mut self.pos_embed, role);
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("encoder.{i}")), role, f);
        }
        self.decoder_embed.visit_mut(&join(prefix, "decoder_embed"), role, f);
        visit_array_mut(f, prefix, "mask_token", &mut self.mask_token, role);
        visit_array_mut(f, prefix, "decoder_pos_embed", &mut self.decoder_pos_embed, role);
        for (i, b) in self.decoder.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("decoder.{i}")), role, f);
        }
        self.decoder_norm.visit_mut(&join(prefix, "decoder_norm"), role, f);
        self.pred.visit_mut(&join(prefix, "pred"), role, f);
    }
}

/// Optional structural-branch adapters.
#[derive(Debug, Clone, Copy, Default)]
pub struct Adapters<'a> {
    pub tga: Option<&'a TgaParams>,
    pub lora: Option<&'a LoraSet>,
}

pub struct AdapterGrads<'a> {
    pub tga: Option<&'a mut TgaParams>,
    pub lora: Option<&'a mut LoraSet>,
}

#[derive(Debug, Clone)]
pub struct BackboneCache {
    visible: Vec<usize>,
    patches: Array2<f64>,
    tga: Option<TgaCache>,
    enc_in: Array2<f64>,
    enc: Vec<BlockCache>,
    enc_out: Array2<f64>,
    dec: Vec<BlockCache>,
    norm_out: Array2<f64>,
    norm: LayerNormCache,
    image_dim: (usize, usize, usize),
}

impl BackboneCache {
    /// Encoder output for the visible tokens.
    pub fn latent(&self) -> ArrayView2<'_, f64> {
        self.enc_out.view()
    }

    /// Input of the first encoder block.
    pub fn encoder_input(&self) -> ArrayView2<'_, f64> {
        self.enc_in.view()
    }

    /// Attention weights of every head of every encoder layer.
    pub fn encoder_attention(&self) -> Vec<&Array2<f64>> {
        self.enc.iter().flat_map(|c| c.probs.iter()).collect()
    }
}

/// Grid positions of the visible patches (the first `n_vis_cols` patch
/// columns), in reading order.
pub fn visible_positions(rows: usize, cols: usize, n_vis_cols: usize) -> Vec<usize> {
    (0..rows)
        .flat_map(|r| (0..n_vis_cols).map(move |c| r * cols + c))
        .collect()
}

fn check_finite<'a>(values: impl IntoIterator<Item = &'a f64>, what: &str) -> Result<()> {
    if let Some((pos, v)) = values.into_iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what}: entry {pos} is {v}")));
    }
    Ok(())
}

/// Runs encoder and decoder on a `[3 × H × W]` image whose first
/// `n_vis_cols` patch columns are visible. Returns the reconstructed image.
pub fn forward(
    p: &BackboneParams,
    image: ArrayView3<f64>,
    n_vis_cols: usize,
    adapters: Adapters,
    mode: Mode,
    rng: &mut Rng64,
) -> Result<(Array3<f64>, BackboneCache)> {
    let cfg = &p.cfg;
    let expect = (IN_CHANS, cfg.image_height, cfg.image_width);
    if image.dim() != expect {
        return Err(Error::Shape(format!("image {:?}, backbone expects {:?}", image.dim(), expect)));
    }
    let (rows, cols) = cfg.grid();
    if n_vis_cols == 0 || n_vis_cols > cols {
        return Err(Error::Shape(format!("{n_vis_cols} visible patch columns of {cols}")));
    }
    if let Some(l) = adapters.lora {
        if l.layers.len() != p.encoder.len() {
            return Err(Error::Shape(format!(
                "{} LoRA layers for {} encoder layers",
                l.layers.len(),
                p.encoder.len()
            )));
        }
    }
    check_finite(image.iter(), "input image")?;

    let visible = visible_positions(rows, cols, n_vis_cols);
    let all = patchify(image, cfg.patch_size)?;
    let patches = all.select(Axis(0), &visible);
    let mut x = p.patch_embed.forward(patches.view());
    let tga = match adapters.tga {
        Some(t) => {
            let time = patch_time_index(rows, cols);
            let idx: Vec<usize> = visible.iter().map(|&k| time[k]).collect();
            let table = sinusoid_table(rows * cols, cfg.d_model)?.select(Axis(0), &idx);
            let (y, c) = tga_forward(x.view(), t, table.view())?;
            x = y;
            Some(c)
        }
        None => None,
    };
    x += &p.pos_embed.select(Axis(0), &visible);
    let enc_in = x.clone();

    let mut enc = Vec::with_capacity(p.encoder.len());
    for (i, b) in p.encoder.iter().enumerate() {
        let ctx = BlockCtx {
            n_heads: cfg.n_heads,
            dropout: cfg.dropout,
            lora: adapters.lora.map(|l| &l.layers[i]),
            lora_dropout: adapters.lora.map_or(0.0, |l| l.dropout),
            mode,
        };
        let (y, c) = block_forward(b, x, &ctx, rng);
        x = y;
        enc.push(c);
    }
    check_finite(x.iter(), "encoder output")?;
    let enc_out = x;

    let z = p.decoder_embed.forward(enc_out.view());
    let mut full = Array2::zeros((rows * cols, cfg.d_model));
    for mut row in full.axis_iter_mut(Axis(0)) {
        row.assign(&p.mask_token);
    }
    for (j, &k) in visible.iter().enumerate() {
        full.row_mut(k).assign(&z.row(j));
    }
    full += &p.decoder_pos_embed;
    let mut y = full;
    let mut dec = Vec::with_capacity(p.decoder.len());
    for b in &p.decoder {
        let ctx = BlockCtx {
            n_heads: cfg.n_heads,
            dropout: cfg.dropout,
            lora: None,
            lora_dropout: 0.0,
            mode,
        };
        let (o, c) = block_forward(b, y, &ctx, rng);
        y = o;
        dec.push(c);
    }
    let (norm_out, norm) = p.decoder_norm.forward(y.view());
    let pred = p.pred.forward(norm_out.view());
    check_finite(pred.iter(), "decoder prediction")?;
    let img = unpatchify(pred.view(), cfg.patch_size, rows, cols, IN_CHANS)?;
    Ok((
        img,
        BackboneCache {
            visible,
            patches,
            tga,
            enc_in,
            enc,
            enc_out,
            dec,
            norm_out,
            norm,
            image_dim: expect,
        },
    ))
}

/// Backpropagates `∂L/∂image_out`. Base-weight gradients accumulate into
/// `grad` when given, adapter gradients into `adapter_grads`. Returns
/// `∂L/∂image_in` when `input_grad` is set.
pub fn backward(
    p: &BackboneParams,
    cache: &BackboneCache,
    adapters: Adapters,
    g_image: ArrayView3<f64>,
    mut grad: Option<&mut BackboneParams>,
    adapter_grads: AdapterGrads,
    input_grad: bool,
) -> Result<Option<Array3<f64>>> {
    let cfg = &p.cfg;
    if g_image.dim() != cache.image_dim {
        return Err(Error::Shape(format!(
            "gradient {:?} for an image of {:?}",
            g_image.dim(),
            cache.image_dim
        )));
    }
    let (rows, cols) = cfg.grid();
    let g_pred = patchify(g_image, cfg.patch_size)?;
    let g_norm = p.pred.backward(cache.norm_out.view(), g_pred.view(), grad.as_deref_mut().map(|g| &mut g.pred));
    let mut g = p
        .decoder_norm
        .backward(&cache.norm, g_norm.view(), grad.as_deref_mut().map(|g| &mut g.decoder_norm));
    for (i, (b, c)) in p.decoder.iter().zip(&cache.dec).enumerate().rev() {
        g = block_backward(b, c, g, cfg.n_heads, None, grad.as_deref_mut().map(|gp| &mut gp.decoder[i]), None);
    }
    if let Some(gp) = grad.as_deref_mut() {
        gp.decoder_pos_embed += &g;
        let mut is_vis = vec![false; rows * cols];
        for &k in &cache.visible {
            is_vis[k] = true;
        }
        for (k, row) in g.axis_iter(Axis(0)).enumerate() {
            if !is_vis[k] {
                gp.mask_token += &row;
            }
        }
    }
    let g_z = g.select(Axis(0), &cache.visible);
    let mut g = p
        .decoder_embed
        .backward(cache.enc_out.view(), g_z.view(), grad.as_deref_mut().map(|g| &mut g.decoder_embed));

    let AdapterGrads { tga: tga_grad, lora: mut lora_grad } = adapter_grads;
    for (i, (b, c)) in p.encoder.iter().zip(&cache.enc).enumerate().rev() {
        let lg = lora_grad.as_deref_mut().map(|l| &mut l.layers[i]);
        g = block_backward(
            b,
            c,
            g,
            cfg.n_heads,
            adapters.lora.map(|l| &l.layers[i]),
            grad.as_deref_mut().map(|gp| &mut gp.encoder[i]),
            lg,
        );
    }
    if let Some(gp) = grad.as_deref_mut() {
        for (j, &k) in cache.visible.iter().enumerate() {
            let mut row = gp.pos_embed.row_mut(k);
            row += &g.row(j);
        }
    }
    if let (Some(tc), Some(tg)) = (cache.tga.as_ref(), tga_grad) {
        tga_backward(g.view(), tc, tg);
    }
    let g_patches = p
        .patch_embed
        .backward(cache.patches.view(), g.view(), grad.map(|g| &mut g.patch_embed));
    if !input_grad {
        return Ok(None);
    }
    let mut g_all = Array2::zeros((rows * cols, cfg.patch_dim()));
    for (j, &k) in cache.visible.iter().enumerate() {
        g_all.row_mut(k).assign(&g_patches.row(j));
    }
    Ok(Some(unpatchify(g_all.view(), cfg.patch_size, rows, cols, IN_CHANS)?))
}

/// Sum of `w ⊙ image` as a scalar loss; used by gradient checks.
pub fn weighted_sum(image: &Array3<f64>, w: &Array3<f64>) -> f64 {
    Zip::from(image).and(w).fold(0.0, |a, &x, &y| a + x * y)
}
