use std::fs;
use std::path::{Path, PathBuf};

use unravel_core::checkpoint::{self, Model};
use unravel_core::data::{desk_task, load_csv, Dataset};
use unravel_core::desk;
use unravel_core::gradflow::{effective_band, gradient_profile, SamplingPlan};
use unravel_core::lesion::{lesion_multi, lesion_single, reorder_experiment, LesionReport};
use unravel_core::numerics::Mode;
use unravel_core::paths::{binomial_exact, effective_fraction, path_length_pmf, remaining_fraction};
use unravel_core::resnet::{Architecture, ResidualNet};
use unravel_core::training::{linear_survival, train, train_effective_paths, train_stochastic_depth, TrainHistory};

use crate::args::*;
use crate::config::{Regime, RunConfig};
use crate::error::CliError;
use crate::manifest::{RunManifest, MANIFEST_FILE};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.csv";

/// Runs `cli`. `config` overrides `--config` (used by replay).
pub fn run(cli: &Cli, config: Option<RunConfig>) -> Result<(), CliError> {
    if let Command::Replay(r) = &cli.command {
        return replay(cli, r);
    }
    let out = cli
        .out
        .clone()
        .ok_or_else(|| CliError::Validation("--out is required".into()))?;
    let seed = match (&cli.command, cli.seed) {
        (Command::Paths(_), s) => s,
        (_, Some(s)) => Some(s),
        (c, None) => return Err(CliError::Validation(format!("--seed is required for `{}`", c.name()))),
    };
    fs::create_dir_all(&out)?;
    match &cli.command {
        Command::Train(a) => {
            let seed = seed.expect("checked above");
            let mut cfg = match (config, &cli.config) {
                (Some(c), _) => c,
                (None, Some(path)) => {
                    let text = fs::read_to_string(path).map_err(|e| CliError::input(&path.display().to_string(), e))?;
                    RunConfig::parse(&text)?
                }
                (None, None) => RunConfig::from_train_config(&desk::train_config(seed), Regime::Standard),
            };
            cfg.seed = seed;
            cfg.validate()?;
            if a.model == ModelKind::Feedforward && cfg.regime != Regime::Standard {
                return Err(CliError::Validation("config key `regime`: feedforward models only train with standard".into()));
            }
            RunManifest::new(cli, Some(cfg.clone()), vec![], &out, &[CHECKPOINT_FILE, HISTORY_FILE, MANIFEST_FILE]).write(&out)?;
            cmd_train(a, &cfg, &out)
        }
        Command::Lesion(a) => {
            let seed = seed.expect("checked above");
            RunManifest::new(cli, None, vec![show(&a.checkpoint)], &out, &["lesion.csv", MANIFEST_FILE]).write(&out)?;
            let model = load_model(&a.checkpoint)?;
            let data = eval_data(&a.data, seed, false)?;
            let report = match (a.mode, model) {
                (LesionMode::Single, Model::Residual(net)) => lesion_single(&net, &data)?,
                (LesionMode::Single, Model::Feedforward(net)) => lesion_single(&net, &data)?,
                (LesionMode::Multi, Model::Residual(net)) => lesion_multi(&net, &data, &a.k, a.trials, seed)?,
                (LesionMode::Multi, Model::Feedforward(_)) => {
                    return Err(CliError::Validation("multi-block lesions need a residual checkpoint".into()))
                }
            };
            write_report(&report, &out.join("lesion.csv"))
        }
        Command::Reorder(a) => {
            let seed = seed.expect("checked above");
            RunManifest::new(cli, None, vec![show(&a.checkpoint)], &out, &["reorder.csv", MANIFEST_FILE]).write(&out)?;
            let net = load_residual(&a.checkpoint)?;
            let data = eval_data(&a.data, seed, false)?;
            let report = reorder_experiment(&net, &data, &a.swaps, a.trials, seed, a.stage_local)?;
            write_report(&report, &out.join("reorder.csv"))
        }
        Command::Gradflow(a) => {
            let seed = seed.expect("checked above");
            RunManifest::new(cli, None, vec![show(&a.checkpoint)], &out, &["gradflow.csv", MANIFEST_FILE]).write(&out)?;
            cmd_gradflow(a, seed, &out)
        }
        Command::Paths(a) => {
            RunManifest::new(cli, None, vec![], &out, &["pmf.csv", "remaining.csv", "band.csv", MANIFEST_FILE]).write(&out)?;
            cmd_paths(a, &out)
        }
        Command::Replay(_) => unreachable!("handled above"),
    }
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn replay(cli: &Cli, r: &ReplayArgs) -> Result<(), CliError> {
    let manifest = RunManifest::read(&r.manifest)?;
    let mut again = manifest.invocation;
    if matches!(again.command, Command::Replay(_)) {
        return Err(CliError::Validation("manifest records a replay".into()));
    }
    again.out = Some(
        cli.out
            .clone()
            .ok_or_else(|| CliError::Validation("--out is required".into()))?,
    );
    if cli.jobs.is_some() {
        again.jobs = cli.jobs;
    }
    run(&again, manifest.config)
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    checkpoint::load(path).map_err(|e| CliError::input(&show(path), e))
}

fn load_residual(path: &Path) -> Result<ResidualNet, CliError> {
    match load_model(path)? {
        Model::Residual(n) => Ok(n),
        Model::Feedforward(_) => Err(CliError::Validation(format!("{}: expected a residual checkpoint", show(path)))),
    }
}

fn read_csv(path: &PathBuf) -> Result<Dataset, CliError> {
    load_csv(path).map_err(|e| CliError::input(&show(path), e))
}

/// The CSV given, else the test (or train) split of the spiral task.
fn eval_data(a: &DataArgs, seed: u64, train_split: bool) -> Result<Dataset, CliError> {
    match &a.data {
        Some(p) => read_csv(p),
        None => {
            let (train, test) = desk_task(a.data_seed.unwrap_or(seed))?;
            Ok(if train_split { train } else { test })
        }
    }
}

fn write_report(report: &LesionReport, path: &Path) -> Result<(), CliError> {
    fs::write(path, report.to_csv()?)?;
    Ok(())
}

fn cmd_train(a: &TrainArgs, cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let (train_set, test_set) = match (&a.train_data, &a.test_data) {
        (Some(tr), Some(te)) => (read_csv(tr)?, read_csv(te)?),
        _ => desk_task(a.data_seed.unwrap_or(cfg.seed))?,
    };
    let (dims, classes) = (train_set.dims(), train_set.classes);
    let tc = cfg.train_config();
    let history: TrainHistory = match a.model {
        ModelKind::Feedforward => {
            let net = unravel_core::resnet::FeedforwardNet::new(
                dims,
                classes,
                a.layers,
                a.width,
                &mut unravel_core::rng::stream_rng(cfg.seed, desk::INIT_STREAM),
            )?;
            let (net, h) = train(net, &train_set, &test_set, &tc)?;
            checkpoint::save_feedforward(&net, out.join(CHECKPOINT_FILE))?;
            h
        }
        ModelKind::Residual => {
            let arch = match a.arch {
                ArchKind::Uniform => Architecture::uniform(dims, classes, a.blocks, a.width),
                ArchKind::ThreeStage => {
                    if a.blocks == 0 || a.blocks % 3 != 0 {
                        return Err(CliError::Validation(format!("--blocks {}: three-stage needs a positive multiple of 3", a.blocks)));
                    }
                    Architecture::three_stage(dims, classes, a.blocks / 3)
                }
            };
            let net = desk::residual_net(&arch, cfg.seed)?;
            let n = net.n();
            let (net, h) = match cfg.regime {
                Regime::Standard => train(net, &train_set, &test_set, &tc)?,
                Regime::EffectivePaths => {
                    let m = cfg.m.expect("validated");
                    if m > n {
                        return Err(CliError::Validation(format!("config key `m`: {m} exceeds {n} blocks")));
                    }
                    train_effective_paths(net, &train_set, &test_set, &tc, m)?
                }
                Regime::StochasticDepth => {
                    train_stochastic_depth(net, &train_set, &test_set, &tc, &linear_survival(n, cfg.survival_final()))?
                }
            };
            checkpoint::save_residual(&net, out.join(CHECKPOINT_FILE))?;
            h
        }
    };
    fs::write(out.join(HISTORY_FILE), history.to_csv()?)?;
    if let Some(e) = history.final_test_error() {
        println!("final test error {e}");
    }
    Ok(())
}

/// `0,4,8` or `lo..hi:step` (inclusive, step defaults to 1).
pub fn parse_lengths(text: &str) -> Result<Vec<usize>, CliError> {
    let bad = || CliError::Validation(format!("--lengths `{text}`: expected `0,4,8` or `0..24:2`"));
    if let Some((lo, rest)) = text.split_once("..") {
        let (hi, step) = match rest.split_once(':') {
            Some((h, s)) => (h, s.trim().parse::<usize>().map_err(|_| bad())?),
            None => (rest, 1),
        };
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim().parse().map_err(|_| bad())?;
        if step == 0 || lo > hi {
            return Err(bad());
        }
        Ok((lo..=hi).step_by(step).collect())
    } else {
        text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
    }
}

fn cmd_gradflow(a: &GradflowArgs, seed: u64, out: &Path) -> Result<(), CliError> {
    let net = load_residual(&a.checkpoint)?;
    let data = eval_data(&a.data, seed, true)?;
    let lengths = match &a.lengths {
        Some(s) => parse_lengths(s)?,
        None => (0..=net.n()).step_by(2).collect(),
    };
    let mut plan = SamplingPlan::new(a.samples, a.batch_size, seed);
    if a.eval_mode {
        plan.mode = Mode::Eval;
    }
    let profile = gradient_profile(&net, &data, &lengths, &plan)?;
    let pmf = path_length_pmf(net.n());
    fs::write(out.join("gradflow.csv"), profile.to_csv(&pmf)?)?;
    let r = profile.log_norm_correlation();
    println!("correlation(k, mean log2 norm) {r}");
    match effective_band(&profile, &pmf, a.coverage) {
        Ok((lo, hi)) => println!("effective band {lo}..={hi} at coverage {}", a.coverage),
        Err(e) => println!("effective band unavailable: {e}"),
    }
    if a.assert_decay && !(r < -0.9) {
        return Err(CliError::Runtime(format!("gradient does not decay with path length: correlation {r} >= -0.9")));
    }
    Ok(())
}

fn cmd_paths(a: &PathsArgs, out: &Path) -> Result<(), CliError> {
    let n = a.n;
    let pmf = path_length_pmf(n);
    let mut w = csv::Writer::from_path(out.join("pmf.csv")).map_err(|e| CliError::Runtime(e.to_string()))?;
    let csv_err = |e: csv::Error| CliError::Runtime(e.to_string());
    w.write_record(["k", "count", "pmf"]).map_err(csv_err)?;
    for (k, p) in pmf.pmf.iter().enumerate() {
        w.write_record([k.to_string(), binomial_exact(n, k).to_string(), format!("{p}")]).map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("remaining.csv")).map_err(csv_err)?;
    w.write_record(["x", "deleted", "remaining_fraction"]).map_err(csv_err)?;
    if let Some(d) = a.deleted {
        for x in 0..=n {
            w.write_record([x.to_string(), d.to_string(), format!("{}", remaining_fraction(n, d, x)?)]).map_err(csv_err)?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("band.csv")).map_err(csv_err)?;
    w.write_record(["k_lo", "k_hi", "fraction"]).map_err(csv_err)?;
    if let Some(band) = &a.band {
        let [lo, hi] = band[..] else {
            return Err(CliError::Validation("--band expects `lo,hi`".into()));
        };
        let f = effective_fraction(&pmf, lo, hi)?;
        w.write_record([lo.to_string(), hi.to_string(), format!("{f}")]).map_err(csv_err)?;
        println!("fraction of paths with length {lo}..={hi}: {f}");
    }
    w.flush()?;
    Ok(())
}
