//! Run directories: training artifacts, evaluation outputs and cross-run
//! comparison.
//!
//! A run directory holds `config.cfg`, `checkpoint`, `trainlog.json`,
//! `cmc.csv`, `variation.csv` (training identities) and `summary.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{DataSource, Mode, TrainConfig};
use crate::data::{load_csv, split_identities, synth_generate, Dataset, Split};
use crate::error::{Error, Result};
use crate::evaluation::{cmc_single_shot, variation_stats, CmcResult, DistanceMode, VariationStats};
use crate::model::ModelParams;
use crate::numeric::{streams, Rng};
use crate::train::{train, TrainLog};

pub const CONFIG_FILE: &str = "config.cfg";
pub const CHECKPOINT_FILE: &str = "checkpoint";
pub const TRAINLOG_FILE: &str = "trainlog.json";
pub const CMC_FILE: &str = "cmc.csv";
pub const VARIATION_FILE: &str = "variation.csv";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn load_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Synth => {
            let mut synth = cfg.synth.clone();
            synth.seed = cfg.seed;
            synth_generate(&synth)
        }
        DataSource::Csv(path) => load_csv(path),
    }
}

pub fn prepare_split(cfg: &TrainConfig) -> Result<Split> {
    split_identities(&load_dataset(cfg)?, cfg.test_fraction, cfg.seed)
}

/// Embedding distance for the embedding baseline, the metric head otherwise.
pub fn distance_mode_for(mode: Mode) -> DistanceMode {
    match mode {
        Mode::TripletEmbed => DistanceMode::Embed,
        _ => DistanceMode::Metric,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariationSummary {
    pub intra_mean: f64,
    pub inter_mean: f64,
    pub intra_pairs: usize,
    pub inter_pairs: usize,
}

impl From<&VariationStats> for VariationSummary {
    fn from(v: &VariationStats) -> Self {
        Self {
            intra_mean: v.intra_mean,
            inter_mean: v.inter_mean,
            intra_pairs: v.intra_pairs,
            inter_pairs: v.inter_pairs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub distance_mode: DistanceMode,
    pub protocol: String,
    pub trials: usize,
    pub probes: usize,
    pub gallery_size: usize,
    pub train_identities: usize,
    pub test_identities: usize,
    pub rank1: f64,
    pub cmc: Vec<f64>,
    pub train_variation: VariationSummary,
    pub test_variation: VariationSummary,
    pub final_epoch_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub summary: RunSummary,
    pub cmc: CmcResult,
    pub train_variation: VariationStats,
    pub test_variation: VariationStats,
}

/// CMC on the held-out identities plus variation statistics on both sides.
pub fn evaluate(cfg: &TrainConfig, params: &ModelParams, split: &Split, log: Option<&TrainLog>) -> Result<Evaluation> {
    let dm = distance_mode_for(cfg.mode);
    let mut rng = Rng::with_stream(cfg.seed, streams::EVAL);
    let cmc = cmc_single_shot(params, &split.test, dm, cfg.eval_trials, &mut rng)?;
    let train_variation = variation_stats(params, &split.train, dm)?;
    let test_variation = variation_stats(params, &split.test, dm)?;
    let summary = RunSummary {
        mode: cfg.mode,
        seed: cfg.seed,
        distance_mode: dm,
        protocol: cmc.protocol.clone(),
        trials: cmc.trials,
        probes: cmc.probes,
        gallery_size: cmc.gallery_size,
        train_identities: split.train.identities().len(),
        test_identities: split.test.identities().len(),
        rank1: cmc.rank1(),
        cmc: cmc.rank_accuracy.clone(),
        train_variation: (&train_variation).into(),
        test_variation: (&test_variation).into(),
        final_epoch_loss: log.and_then(|l| l.epochs.last()).map(|e| e.loss),
    };
    Ok(Evaluation {
        summary,
        cmc,
        train_variation,
        test_variation,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })
}

/// Trains per `cfg` and writes config, checkpoint and log into `dir`.
pub fn train_run(cfg: &TrainConfig, dir: &Path) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let split = prepare_split(cfg)?;
    let (params, log) = train(cfg, &split.train)?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    params.save(&dir.join(CHECKPOINT_FILE))?;
    log.save(&dir.join(TRAINLOG_FILE))?;
    Ok((params, log))
}

/// Evaluates the checkpoint in `dir` on the split its config describes and
/// writes the CMC, variation and summary files.
pub fn eval_run(dir: &Path, trials: Option<usize>) -> Result<RunSummary> {
    let mut cfg = TrainConfig::load(&dir.join(CONFIG_FILE))?;
    if let Some(t) = trials {
        cfg.eval_trials = t;
    }
    let params = ModelParams::load(&dir.join(CHECKPOINT_FILE))?;
    let log_path = dir.join(TRAINLOG_FILE);
    let log: Option<TrainLog> = if log_path.exists() { Some(read_json(&log_path)?) } else { None };
    let split = prepare_split(&cfg)?;
    let ev = evaluate(&cfg, &params, &split, log.as_ref())?;
    ev.cmc.write_csv(&dir.join(CMC_FILE))?;
    ev.train_variation.write_csv(&dir.join(VARIATION_FILE))?;
    write_json(&dir.join(SUMMARY_FILE), &ev.summary)?;
    Ok(ev.summary)
}

pub fn load_summary(dir: &Path) -> Result<RunSummary> {
    read_json(&dir.join(SUMMARY_FILE))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub run: PathBuf,
    pub mode: Mode,
    pub seed: u64,
    pub rank1: f64,
    pub train_intra_mean: f64,
    pub train_inter_mean: f64,
    pub test_intra_mean: f64,
    pub test_inter_mean: f64,
}

/// Side-by-side rank-1 and variation means of evaluated runs.
pub fn compare_runs(dirs: &[PathBuf]) -> Result<Vec<ComparisonRow>> {
    if dirs.len() < 2 {
        return Err(Error::Config("report needs at least two run directories".into()));
    }
    dirs.iter()
        .map(|d| {
            let s = load_summary(d)?;
            Ok(ComparisonRow {
                run: d.clone(),
                mode: s.mode,
                seed: s.seed,
                rank1: s.rank1,
                train_intra_mean: s.train_variation.intra_mean,
                train_inter_mean: s.train_variation.inter_mean,
                test_intra_mean: s.test_variation.intra_mean,
                test_inter_mean: s.test_variation.inter_mean,
            })
        })
        .collect()
}

pub fn format_comparison(rows: &[ComparisonRow]) -> String {
    let mut out = format!(
        "{:<28} {:<24} {:>6} {:>8} {:>11} {:>11} {:>11} {:>11}\n",
        "run", "mode", "seed", "rank1", "train_intra", "train_inter", "test_intra", "test_inter"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<28} {:<24} {:>6} {:>8.4} {:>11.4} {:>11.4} {:>11.4} {:>11.4}\n",
            r.run.display(),
            r.mode.name(),
            r.seed,
            r.rank1,
            r.train_intra_mean,
            r.train_inter_mean,
            r.test_intra_mean,
            r.test_inter_mean
        ));
    }
    out
}
