//! Config → dataset → windows → model, shared by the binary and the C API.

use crate::config::RunConfig;
use crate::data::{chronological_split, few_shot_subset, load_csv, synth_series, windows, Dataset, TimeSeriesWindow};
use crate::error::Result;
use crate::forecaster::{self, ModelParams, TrainReport};

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.data_path() {
        Some(p) => load_csv(p),
        None => synth_series(&cfg.synth_spec()),
    }
}

pub struct Prepared {
    pub dataset: Dataset,
    pub train: Vec<TimeSeriesWindow>,
    pub val: Vec<TimeSeriesWindow>,
    pub test: Vec<TimeSeriesWindow>,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let dataset = load_dataset(cfg)?;
    let split = cfg.split_spec()?;
    let s = chronological_split(&dataset, &split)?;
    let train_seg = if cfg.few_shot < 1.0 {
        few_shot_subset(&s.train, cfg.few_shot, split.window_len())?
    } else {
        s.train
    };
    let (t, h, k) = (cfg.lookback, cfg.horizon, cfg.norm_const);
    Ok(Prepared {
        train: windows(&train_seg, t, h, cfg.stride, k)?,
        val: windows(&s.val, t, h, cfg.eval_stride, k)?,
        test: windows(&s.test, t, h, cfg.eval_stride, k)?,
        dataset,
    })
}

/// Fresh model seeded from `cfg.seed`.
pub fn init_model(cfg: &RunConfig) -> Result<ModelParams> {
    ModelParams::new(cfg.model_config(), cfg.seed)
}

pub fn train_run(cfg: &RunConfig) -> Result<(ModelParams, TrainReport)> {
    let data = prepare(cfg)?;
    let mut p = init_model(cfg)?;
    let report = forecaster::train(&mut p, &data.train, &data.val, &data.test, &cfg.train_config())?;
    Ok((p, report))
}
