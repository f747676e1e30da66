//! Flat `key = value` run configuration.
//!
//! One line per setting, `#` starts a comment. Every key has a default, so an
//! empty file is a complete configuration. Flag overrides use the same
//! `key=value` syntax and are applied after the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::LoraConfig;
use crate::backbone::BackboneConfig;
use crate::data::{SplitSpec, SynthKind, SynthSpec};
use crate::error::{Error, Result};
use crate::forecaster::{AdamConfig, ModelConfig, TrainConfig};
use crate::rendering::{Interpolation, RenderSpec};
use crate::sma::SmaConfig;
use crate::spectral::{DEFAULT_F_HI, DEFAULT_F_LO};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// CSV file; empty selects the synthetic generator.
    pub data_path: String,
    pub synth_kind: SynthKind,
    pub synth_length: usize,
    pub synth_period: usize,
    pub synth_amplitude: f64,
    pub synth_noise_std: f64,
    pub synth_harmonics: usize,
    pub synth_vars: usize,
    pub synth_seed: u64,

    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub few_shot: f64,
    pub lookback: usize,
    pub horizon: usize,
    pub stride: usize,
    pub eval_stride: usize,
    pub norm_const: f64,

    pub periodicity: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub align_const: f64,

    pub d_model: usize,
    pub n_heads: usize,
    pub e_layers: usize,
    pub d_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub frozen: bool,

    pub lambda: f64,
    pub sma_dropout: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
    pub tga: bool,
    pub beta: f64,
    pub learn_beta: bool,

    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub workers: usize,

    pub pss_samples: usize,
    pub pss_f_lo: f64,
    pub pss_f_hi: f64,
    pub gradcheck_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthSpec::default();
        let model = ModelConfig::desk();
        let train = TrainConfig::default();
        let (b, r) = (model.backbone, model.render);
        RunConfig {
            data_path: String::new(),
            synth_kind: synth.kind,
            synth_length: synth.length,
            synth_period: synth.period,
            synth_amplitude: synth.amplitude,
            synth_noise_std: synth.noise_std,
            synth_harmonics: synth.harmonics,
            synth_vars: synth.n_vars,
            synth_seed: synth.seed,
            train_frac: 0.7,
            val_frac: 0.1,
            test_frac: 0.2,
            few_shot: 1.0,
            lookback: 288,
            horizon: 96,
            stride: 1,
            eval_stride: 1,
            norm_const: 0.4,
            periodicity: r.periodicity,
            image_height: r.image_height,
            image_width: r.image_width,
            patch_size: r.patch_size,
            align_const: r.align_const,
            d_model: b.d_model,
            n_heads: b.n_heads,
            e_layers: b.e_layers,
            d_layers: b.d_layers,
            d_ff: b.d_ff,
            dropout: b.dropout,
            frozen: b.frozen,
            lambda: model.sma.lambda,
            sma_dropout: model.sma_dropout,
            lora_rank: model.lora.rank,
            lora_alpha: model.lora.alpha,
            lora_dropout: model.lora.dropout,
            tga: model.tga,
            beta: model.beta,
            learn_beta: model.learn_beta,
            lr: train.adam.lr,
            batch_size: train.batch_size,
            epochs: train.epochs,
            patience: train.patience,
            adam_beta1: train.adam.beta1,
            adam_beta2: train.adam.beta2,
            adam_eps: train.adam.eps,
            seed: train.seed,
            workers: train.workers,
            pss_samples: 100,
            pss_f_lo: DEFAULT_F_LO,
            pss_f_hi: DEFAULT_F_HI,
            gradcheck_samples: 16,
        }
    }
}

/// Every accepted key, in file order.
pub const KEYS: &[&str] = &[
    "data_path", "synth_kind", "synth_length", "synth_period", "synth_amplitude", "synth_noise_std",
    "synth_harmonics", "synth_vars", "synth_seed", "train_frac", "val_frac", "test_frac", "few_shot",
    "lookback", "horizon", "stride", "eval_stride", "norm_const", "periodicity", "image_height",
    "image_width", "patch_size", "align_const", "d_model", "n_heads", "e_layers", "d_layers", "d_ff",
    "dropout", "frozen", "lambda", "sma_dropout", "lora_rank", "lora_alpha", "lora_dropout", "tga",
    "beta", "learn_beta", "lr", "batch_size", "epochs", "patience", "adam_beta1", "adam_beta2",
    "adam_eps", "seed", "workers", "pss_samples", "pss_f_lo", "pss_f_hi", "gradcheck_samples",
];

fn nearest(key: &str) -> &'static str {
    KEYS.iter()
        .copied()
        .min_by_key(|k| strsim::damerau_levenshtein(key, k))
        .expect("non-empty key list")
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        macro_rules! put {
            ($($name:ident),* $(,)?) => {
                match key {
                    "data_path" => self.data_path = v.to_string(),
                    "synth_kind" => self.synth_kind = v.parse()?,
                    $(stringify!($name) => self.$name = parse(key, v)?,)*
                    _ => {
                        return Err(Error::Config(format!(
                            "unknown key {key:?}; did you mean {:?}?",
                            nearest(key)
                        )))
                    }
                }
            };
        }
        put!(
            synth_length, synth_period, synth_amplitude, synth_noise_std, synth_harmonics, synth_vars,
            synth_seed, train_frac, val_frac, test_frac, few_shot, lookback, horizon, stride, eval_stride,
            norm_const, periodicity, image_height, image_width, patch_size, align_const, d_model, n_heads,
            e_layers, d_layers, d_ff, dropout, frozen, lambda, sma_dropout, lora_rank, lora_alpha,
            lora_dropout, tga, beta, learn_beta, lr, batch_size, epochs, patience, adam_beta1, adam_beta2,
            adam_eps, seed, workers, pss_samples, pss_f_lo, pss_f_hi, gradcheck_samples,
        );
        Ok(())
    }

    /// Applies `key = value` lines.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected `key = value`", no + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("{origin}:{}: {}", no + 1, strip(e))))?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let json = serde_json::to_value(self).expect("plain struct");
        KEYS.iter()
            .map(|k| match &json[k] {
                serde_json::Value::String(s) => format!("{k} = {s}\n"),
                v => format!("{k} = {v}\n"),
            })
            .collect()
    }

    pub fn data_path(&self) -> Option<PathBuf> {
        (!self.data_path.is_empty()).then(|| PathBuf::from(&self.data_path))
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            kind: self.synth_kind,
            length: self.synth_length,
            period: self.synth_period,
            amplitude: self.synth_amplitude,
            noise_std: self.synth_noise_std,
            seed: self.synth_seed,
            harmonics: self.synth_harmonics,
            n_vars: self.synth_vars,
        }
    }

    pub fn split_spec(&self) -> Result<SplitSpec> {
        SplitSpec::new(self.train_frac, self.val_frac, self.test_frac, self.lookback, self.horizon)
    }

    pub fn render_spec(&self) -> RenderSpec {
        RenderSpec {
            periodicity: self.periodicity,
            image_height: self.image_height,
            image_width: self.image_width,
            patch_size: self.patch_size,
            align_const: self.align_const,
            interpolation: Interpolation::Bilinear,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            render: self.render_spec(),
            backbone: BackboneConfig {
                patch_size: self.patch_size,
                d_model: self.d_model,
                n_heads: self.n_heads,
                e_layers: self.e_layers,
                d_layers: self.d_layers,
                d_ff: self.d_ff,
                dropout: self.dropout,
                frozen: self.frozen,
                image_height: self.image_height,
                image_width: self.image_width,
            },
            sma: SmaConfig { lambda: self.lambda },
            sma_dropout: self.sma_dropout,
            lora: LoraConfig {
                rank: self.lora_rank,
                alpha: self.lora_alpha,
                dropout: self.lora_dropout,
            },
            tga: self.tga,
            beta: self.beta,
            learn_beta: self.learn_beta,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            patience: self.patience,
            seed: self.seed,
            workers: self.workers,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
        }
    }

    /// Checks every value against its owning module.
    pub fn validate(&self) -> Result<()> {
        self.split_spec()?;
        self.model_config().validate()?;
        self.train_config().validate()?;
        if self.stride == 0 || self.eval_stride == 0 {
            return Err(Error::Config("stride and eval_stride must be positive".into()));
        }
        if !(self.norm_const > 0.0 && self.norm_const.is_finite()) {
            return Err(Error::Config(format!("norm_const {} must be positive", self.norm_const)));
        }
        if !(self.pss_f_lo >= 0.0 && self.pss_f_lo < self.pss_f_hi) {
            return Err(Error::Config(format!(
                "pss band ({}, {}) is empty",
                self.pss_f_lo, self.pss_f_hi
            )));
        }
        Ok(())
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

/// Defaults, then `file`, then `overrides`; the result is validated.
pub fn parse_config<S: AsRef<str>>(file: Option<&Path>, overrides: &[S]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.apply_text(&text, &path.display().to_string())?;
    }
    cfg.apply_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let mut c = RunConfig::default();
        c.apply_text("", "x").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn comments_and_overrides() {
        let mut c = RunConfig::default();
        c.apply_text("# header\nlr = 0.5  # trailing\n\nepochs=3\n", "f").unwrap();
        c.apply_overrides(&["lr=0.01"]).unwrap();
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.epochs, 3);
    }

    #[test]
    fn unknown_key_suggests_nearest() {
        let err = RunConfig::default().set("lrr", "1").unwrap_err().to_string();
        assert!(err.contains("\"lr\""), "{err}");
        let err = RunConfig::default()
            .apply_text("epochs = 2\nbatchsize = 4\n", "cfg")
            .unwrap_err()
            .to_string();
        assert!(err.contains("cfg:2") && err.contains("batch_size"), "{err}");
    }

    #[test]
    fn bad_values() {
        let mut c = RunConfig::default();
        assert!(c.set("epochs", "ten").is_err());
        assert!(c.set("frozen", "maybe").is_err());
        assert!(c.apply_text("no equals sign", "f").is_err());
        c.set("patch_size", "7").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn text_roundtrip() {
        let mut c = RunConfig::default();
        c.set("data_path", "a/b.csv").unwrap();
        c.set("synth_kind", "noise").unwrap();
        c.set("lr", "0.125").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text(), "t").unwrap();
        assert_eq!(back, c);
        assert_eq!(c.to_text().lines().count(), KEYS.len());
    }
}
