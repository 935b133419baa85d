//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};

use crate::config::{TrainConfig, KEYS};
use crate::equivalence::run_equivalence_suite;
use crate::error::{Error, Result};
use crate::gradcheck::{format_report, run_gradcheck};
use crate::run::{compare_runs, eval_run, format_comparison, load_dataset, train_run};

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

fn config_args() -> Vec<Arg> {
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .value_parser(value_parser!(PathBuf))
        .help("key = value configuration file; flags override its entries")];
    args.extend(KEYS.iter().map(|k| {
        Arg::new(*k)
            .long(flag(k))
            .value_name("VALUE")
            .help(format!("Override config key '{k}'"))
    }));
    args
}

fn json_out() -> Arg {
    Arg::new("json")
        .long("json")
        .value_name("FILE")
        .value_parser(value_parser!(PathBuf))
        .help("Also write the report as JSON")
}

pub fn command() -> Command {
    Command::new("quadnet")
        .about("Quadruplet and triplet metric learning with CMC evaluation")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("synth")
                .about("Generate a synthetic identity dataset as CSV")
                .arg(
                    Arg::new("out")
                        .long("out")
                        .required(true)
                        .value_name("FILE")
                        .value_parser(value_parser!(PathBuf)),
                )
                .args(config_args()),
        )
        .subcommand(
            Command::new("train")
                .about("Train a model and write config, checkpoint and log into a run directory")
                .arg(
                    Arg::new("out")
                        .long("out")
                        .required(true)
                        .value_name("DIR")
                        .value_parser(value_parser!(PathBuf)),
                )
                .args(config_args()),
        )
        .subcommand(
            Command::new("eval")
                .about("Evaluate a run directory: CMC, variation histogram and summary")
                .arg(
                    Arg::new("run")
                        .long("run")
                        .required(true)
                        .value_name("DIR")
                        .value_parser(value_parser!(PathBuf)),
                )
                .arg(
                    Arg::new("trials")
                        .long("trials")
                        .value_name("N")
                        .value_parser(value_parser!(usize)),
                ),
        )
        .subcommand(
            Command::new("gradcheck")
                .about("Run every finite-difference gradient suite")
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .default_value("0")
                        .value_parser(value_parser!(u64)),
                )
                .arg(json_out()),
        )
        .subcommand(
            Command::new("equivalence")
                .about("Check the contrastive/quadruplet relations and the ranking-vs-classification example")
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .default_value("0")
                        .value_parser(value_parser!(u64)),
                )
                .arg(
                    Arg::new("triples")
                        .long("triples")
                        .default_value("1000000")
                        .value_parser(value_parser!(usize)),
                )
                .arg(
                    Arg::new("batches")
                        .long("batches")
                        .default_value("1000")
                        .value_parser(value_parser!(usize)),
                )
                .arg(json_out()),
        )
        .subcommand(
            Command::new("report")
                .about("Compare evaluated run directories")
                .arg(
                    Arg::new("runs")
                        .required(true)
                        .num_args(2..)
                        .action(ArgAction::Append)
                        .value_name("DIR")
                        .value_parser(value_parser!(PathBuf)),
                )
                .arg(json_out()),
        )
}

fn build_config(m: &ArgMatches) -> Result<TrainConfig> {
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    for key in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn write_json_file<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn dispatch(m: &ArgMatches, out: &mut dyn Write) -> Result<ExitCode> {
    let io = |e: std::io::Error| Error::io("<stdout>", e);
    match m.subcommand() {
        Some(("synth", m)) => {
            let cfg = build_config(m)?;
            let path = m.get_one::<PathBuf>("out").expect("required");
            let ds = load_dataset(&cfg)?;
            ds.write_csv(path)?;
            writeln!(out, "wrote {} samples to {}", ds.len(), path.display()).map_err(io)?;
        }
        Some(("train", m)) => {
            let cfg = build_config(m)?;
            let dir = m.get_one::<PathBuf>("out").expect("required");
            let (_, log) = train_run(&cfg, dir)?;
            for e in &log.epochs {
                writeln!(
                    out,
                    "epoch {:>3} loss {:.6} active {:.3} alpha1 {:.4} alpha2 {:.4} ({:.2}s)",
                    e.epoch, e.loss, e.active_fraction, e.alpha1, e.alpha2, e.wall_seconds
                )
                .map_err(io)?;
            }
            writeln!(out, "run written to {}", dir.display()).map_err(io)?;
        }
        Some(("eval", m)) => {
            let dir = m.get_one::<PathBuf>("run").expect("required");
            let s = eval_run(dir, m.get_one::<usize>("trials").copied())?;
            writeln!(
                out,
                "{} rank-1 {:.4} over {} trials; train intra/inter {:.4}/{:.4}; test intra/inter {:.4}/{:.4}",
                s.mode,
                s.rank1,
                s.trials,
                s.train_variation.intra_mean,
                s.train_variation.inter_mean,
                s.test_variation.intra_mean,
                s.test_variation.inter_mean
            )
            .map_err(io)?;
        }
        Some(("gradcheck", m)) => {
            let report = run_gradcheck(*m.get_one::<u64>("seed").expect("default"))?;
            write!(out, "{}", format_report(&report)).map_err(io)?;
            if let Some(path) = m.get_one::<PathBuf>("json") {
                write_json_file(path, &report)?;
            }
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Some(("equivalence", m)) => {
            let report = run_equivalence_suite(
                *m.get_one::<u64>("seed").expect("default"),
                *m.get_one::<usize>("triples").expect("default"),
                *m.get_one::<usize>("batches").expect("default"),
            )?;
            let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Json {
                path: "<stdout>".into(),
                source: e,
            })?;
            writeln!(out, "{text}").map_err(io)?;
            if let Some(path) = m.get_one::<PathBuf>("json") {
                write_json_file(path, &report)?;
            }
            let p = &report.preference;
            let ok = report.max_identity_max_deviation == 0.0
                && report.sum_equivalence_max_deviation < 1e-9
                && report.half_ratio_max_deviation < 1e-9
                && p.classification_prefers_case2
                && p.ranking_prefers_case1;
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
        Some(("report", m)) => {
            let dirs: Vec<PathBuf> = m.get_many::<PathBuf>("runs").expect("required").cloned().collect();
            let rows = compare_runs(&dirs)?;
            write!(out, "{}", format_comparison(&rows)).map_err(io)?;
            if let Some(path) = m.get_one::<PathBuf>("json") {
                write_json_file(path, &rows)?;
            }
        }
        _ => unreachable!("subcommand is required"),
    }
    Ok(ExitCode::SUCCESS)
}

/// Parses `args` (including the program name) and runs the subcommand,
/// writing normal output to `out`. Usage errors print clap's message.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match dispatch(&matches, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
