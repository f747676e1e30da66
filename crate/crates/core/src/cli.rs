//! Command-line front end. [`run`] returns the process exit code: 0 on
//! success, 1 when a numerical check fails, 2 on I/O or configuration errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::s;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{parse_config, RunConfig};
use crate::data::TimeSeriesWindow;
use crate::error::{Error, Result};
use crate::forecaster::{self, GradGroup};
use crate::pipeline::{init_model, load_dataset, prepare, train_run};
use crate::rendering::{self, reconstruct, render_full};
use crate::spectral::{
    ascii_text_to_image, load_grayscale_image, pss_of_image, pss_of_series, synth_power_law_image, ModalityStats,
};
use crate::{ntf, pgm};

#[derive(Parser, Debug)]
#[command(name = "ssda", version, about = "Render, analyse and forecast time series through an image backbone")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Worker threads (results do not depend on this).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render one window of the dataset to images.
    Render {
        #[command(flatten)]
        common: Common,
        /// First context step of the window.
        #[arg(long, default_value_t = 0)]
        start: usize,
    },
    /// Power-spectrum slopes of rendered series and optional images or text.
    Pss {
        #[command(flatten)]
        common: Common,
        /// Also measure these PGM images.
        #[arg(long)]
        image: Vec<PathBuf>,
        /// Also measure this text file rendered as an image.
        #[arg(long)]
        text: Option<PathBuf>,
        /// Side length for images and text.
        #[arg(long, default_value_t = 224)]
        size: usize,
        /// Repeat the series measurement at each periodicity.
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<usize>,
    },
    /// Write a synthetic image with a prescribed spectral slope.
    SynthImage {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value_t = 224)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and write the best checkpoint with its report.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on the test windows.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Forecast one test window with a checkpoint.
    Forecast {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test window index.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Finite-difference check of every gradient group.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Subset of sma, tga, lora, beta, backbone.
        #[arg(long, value_delimiter = ',')]
        groups: Vec<String>,
        /// Multiplies analytic gradients before comparison.
        #[arg(long, default_value_t = 1.0)]
        fault: f64,
    },
}

/// Result of a subcommand: whether its checks passed.
type Outcome = Result<bool>;

fn config_of(c: &Common) -> Result<RunConfig> {
    let mut cfg = parse_config(c.config.as_deref(), &c.set)?;
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&c.out).map_err(|e| Error::io(&c.out, e))?;
    Ok(cfg)
}

fn write_json(dir: &Path, name: &str, cfg: &RunConfig, body: Value) -> Result<()> {
    let mut doc = json!({ "config": cfg });
    if let (Value::Object(d), Value::Object(b)) = (&mut doc, body) {
        d.extend(b);
    }
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(&doc)? + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("plain data")
}

fn cmd_render(c: &Common, start: usize) -> Outcome {
    let cfg = config_of(c)?;
    let ds = load_dataset(&cfg)?;
    let (t, h) = (cfg.lookback, cfg.horizon);
    if start + t + h > ds.len() {
        return Err(Error::InsufficientData(format!(
            "window at {start} needs {} steps, dataset has {}",
            t + h,
            ds.len()
        )));
    }
    let w = TimeSeriesWindow::new(
        start,
        ds.values.slice(s![start..start + t, ..]).to_owned(),
        ds.values.slice(s![start + t..start + t + h, ..]).to_owned(),
        cfg.norm_const,
    );
    let spec = cfg.render_spec();
    let images = rendering::render(&w, &spec)?;
    let (ctx, tgt) = (w.normalized_context(), w.normalized_target());
    let mut vars = Vec::new();
    for (j, img) in images.iter().enumerate() {
        let file = format!("render_var{j}.pgm");
        let range = pgm::write_pgm16(c.out.join(&file), &img.pixels)?;
        let full = render_full(&ctx.column(j).to_vec(), &tgt.column(j).to_vec(), &spec)?;
        let back = reconstruct(full.view(), img)?;
        let err = back
            .iter()
            .zip(tgt.column(j))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        vars.push(json!({
            "variable": j,
            "file": file,
            "min": range.min,
            "max": range.max,
            "visible_width": img.visible_width,
            "masked_width": img.masked_width,
            "pad_len": img.pad_len,
            "periods_context": img.periods_context,
            "periods_total": img.periods_total,
            "truth_roundtrip_max_err": err,
        }));
    }
    println!(
        "rendered {} variable(s) at step {start}: {}x{} image, {} visible columns",
        images.len(),
        spec.image_height,
        spec.image_width,
        images[0].visible_width
    );
    write_json(&c.out, "render.json", &cfg, json!({ "start": start, "variables": vars }))?;
    Ok(true)
}

fn stats_json(s: &ModalityStats) -> Value {
    json!({ "mean_alpha": s.mean, "std_alpha": s.std, "n": s.n })
}

fn cmd_pss(c: &Common, images: &[PathBuf], text: Option<&Path>, size: usize, sweep: &[usize]) -> Outcome {
    let cfg = config_of(c)?;
    let ds = load_dataset(&cfg)?;
    let band = (cfg.pss_f_lo, cfg.pss_f_hi);
    let (stats, samples) = pss_of_series(&ds, &cfg.render_spec(), cfg.pss_samples, cfg.lookback, band, cfg.seed)?;
    println!(
        "series: mean alpha {:.4} (std {:.4}, n = {}) at periodicity {}",
        stats.mean, stats.std, stats.n, cfg.periodicity
    );
    let mut body = json!({
        "mean_alpha": stats.mean,
        "std_alpha": stats.std,
        "n": stats.n,
        "samples": samples.iter().map(|s| json!({
            "start": s.start, "variable": s.variable, "alpha": s.fit.alpha, "r_squared": s.fit.r_squared,
        })).collect::<Vec<_>>(),
    });
    let mut rows = Vec::new();
    for &p in sweep {
        let spec = crate::rendering::RenderSpec { periodicity: p, ..cfg.render_spec() };
        let (s, _) = pss_of_series(&ds, &spec, cfg.pss_samples, cfg.lookback, band, cfg.seed)?;
        println!("  periodicity {p}: mean alpha {:.4}", s.mean);
        rows.push(json!({ "periodicity": p, "mean_alpha": s.mean, "std_alpha": s.std, "n": s.n }));
    }
    body["sweep"] = Value::Array(rows);
    if !images.is_empty() {
        let mut files = Vec::new();
        let mut alphas = Vec::new();
        for p in images {
            let fit = pss_of_image(load_grayscale_image(p, size)?.view(), band.0, band.1)?;
            println!("{}: alpha {:.4}", p.display(), fit.alpha);
            alphas.push(fit.alpha);
            files.push(json!({ "path": p.display().to_string(), "alpha": fit.alpha, "r_squared": fit.r_squared }));
        }
        // a spread needs two images
        let mut summary = match ModalityStats::from_alphas(alphas.clone()) {
            Ok(s) => stats_json(&s),
            Err(_) => json!({ "mean_alpha": alphas[0], "std_alpha": null, "n": 1 }),
        };
        summary["files"] = Value::Array(files);
        body["images"] = summary;
    }
    if let Some(path) = text {
        let t = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let fit = pss_of_image(ascii_text_to_image(&t, size, size)?.view(), band.0, band.1)?;
        println!("text: alpha {:.4}", fit.alpha);
        body["text"] = to_value(&fit);
    }
    write_json(&c.out, "pss.json", &cfg, body)?;
    Ok(true)
}

fn cmd_synth_image(c: &Common, alpha: f64, size: usize, seed: u64) -> Outcome {
    let cfg = config_of(c)?;
    if !(alpha.is_finite() && size >= 8) {
        return Err(Error::Config(format!("alpha {alpha} must be finite and size {size} at least 8")));
    }
    let img = synth_power_law_image(alpha, size, size, seed);
    let range = pgm::write_pgm16(c.out.join("synth.pgm"), &img)?;
    let fit = pss_of_image(img.view(), cfg.pss_f_lo, cfg.pss_f_hi)?;
    println!("synthetic image: target alpha {alpha}, fitted {:.4}", fit.alpha);
    write_json(
        &c.out,
        "synth.json",
        &cfg,
        json!({
            "alpha": alpha, "size": size, "seed": seed, "file": "synth.pgm",
            "min": range.min, "max": range.max, "fit": fit,
        }),
    )?;
    Ok(true)
}

fn cmd_train(c: &Common) -> Outcome {
    let cfg = config_of(c)?;
    let (p, report) = train_run(&cfg)?;
    ntf::save(c.out.join("model.ntf"), &p)?;
    let snap = c.out.join("config.txt");
    std::fs::write(&snap, cfg.to_text()).map_err(|e| Error::io(&snap, e))?;
    for e in &report.epochs {
        println!(
            "epoch {:>2}: train {:.5}  val mse {:.5}  beta {:.4}",
            e.epoch, e.train_mse, e.val_mse, e.beta
        );
    }
    println!(
        "test mse {:.5} mae {:.5} (seasonal naive {:.5}, untrained {:.5})",
        report.test.mse, report.test.mae, report.baseline.mse, report.initial_test.mse
    );
    write_json(&c.out, "report.json", &cfg, json!({ "report": report, "checkpoint": "model.ntf" }))?;
    Ok(true)
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<forecaster::ModelParams> {
    ntf::load_into(checkpoint, &init_model(cfg)?)
}

fn cmd_eval(c: &Common, checkpoint: &Path) -> Outcome {
    let cfg = config_of(c)?;
    let p = load_model(&cfg, checkpoint)?;
    let data = prepare(&cfg)?;
    let m = forecaster::evaluate(&p, &data.test, cfg.workers)?;
    let base = forecaster::seasonal_naive_metrics(&data.test, cfg.periodicity)?;
    println!(
        "test mse {:.5} mae {:.5} over {} windows (seasonal naive {:.5})",
        m.mse,
        m.mae,
        data.test.len(),
        base.mse
    );
    write_json(
        &c.out,
        "eval.json",
        &cfg,
        json!({ "test": m, "baseline": base, "windows": data.test.len(), "beta": p.beta }),
    )?;
    Ok(true)
}

fn cmd_forecast(c: &Common, checkpoint: &Path, index: usize) -> Outcome {
    let cfg = config_of(c)?;
    let p = load_model(&cfg, checkpoint)?;
    let data = prepare(&cfg)?;
    let w = data.test.get(index).ok_or_else(|| {
        Error::Config(format!("test window {index} out of range ({} windows)", data.test.len()))
    })?;
    let o = forecaster::forecast(&p, w)?;
    let path = c.out.join("forecast.csv");
    let mut wr = csv::Writer::from_path(&path)?;
    wr.write_record(["step", "variable", "prediction", "truth"])?;
    for ((t, j), v) in o.prediction.indexed_iter() {
        wr.write_record(&[t.to_string(), j.to_string(), v.to_string(), w.target[[t, j]].to_string()])?;
    }
    wr.flush().map_err(|e| Error::io(&path, e))?;
    println!("window {index} (start {}): mse {:.5} mae {:.5}", w.start, o.mse, o.mae);
    write_json(
        &c.out,
        "forecast.json",
        &cfg,
        json!({
            "index": index, "start": w.start, "mse": o.mse, "mae": o.mae, "csv": "forecast.csv",
            "prediction": o.prediction.columns().into_iter().map(|c| c.to_vec()).collect::<Vec<_>>(),
        }),
    )?;
    Ok(true)
}

fn cmd_gradcheck(c: &Common, groups: &[String], fault: f64) -> Outcome {
    let cfg = config_of(c)?;
    let groups = if groups.is_empty() {
        GradGroup::ALL.to_vec()
    } else {
        groups.iter().map(|g| g.parse()).collect::<Result<Vec<_>>>()?
    };
    let r = forecaster::gradcheck(&groups, cfg.seed, cfg.gradcheck_samples, fault)?;
    for g in &r.groups {
        println!(
            "{:<9} {:>3} checked  max rel err {:.3e} (bound {:.0e})  {}",
            format!("{:?}", g.group).to_lowercase(),
            g.checked,
            g.max_rel_err,
            g.bound,
            if g.passed { "ok" } else { "FAIL" }
        );
    }
    write_json(&c.out, "gradcheck.json", &cfg, json!({ "gradcheck": r }))?;
    Ok(r.passed)
}

fn dispatch(cmd: &Command) -> Outcome {
    match cmd {
        Command::Render { common, start } => cmd_render(common, *start),
        Command::Pss {
            common,
            image,
            text,
            size,
            sweep,
        } => cmd_pss(common, image, text.as_deref(), *size, sweep),
        Command::SynthImage { common, alpha, size, seed } => cmd_synth_image(common, *alpha, *size, *seed),
        Command::Train { common } => cmd_train(common),
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint),
        Command::Forecast {
            common,
            checkpoint,
            index,
        } => cmd_forecast(common, checkpoint, *index),
        Command::Gradcheck { common, groups, fault } => cmd_gradcheck(common, groups, *fault),
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli.command) {
        Ok(true) => 0,
        Ok(false) => {
            eprintln!("check failed");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io_or_config() {
                2
            } else {
                1
            }
        }
    }
}
