//! Experiment runner behind the `adinfohrl` binary: multi-seed training with
//! metrics and checkpoints on disk, checkpoint evaluation, and cross-seed
//! aggregation of metrics tables.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use adinfohrl::agent::{Agent, EvalRecord, EvalStats};
use adinfohrl::checkpoint;
use adinfohrl::config::parse_override;
use adinfohrl::{load_config, ExperimentConfig, Mode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] adinfohrl::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{0}")]
    Usage(String),
    #[error("cannot aggregate runs: {0}")]
    Aggregation(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> CliError + '_ {
    move |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const ABORT_CHECKPOINT: &str = "abort.ckpt";

/// Where command-line overrides come from, applied in this order on top of
/// the config file.
#[derive(Clone, Debug, Default)]
pub struct ConfigSources {
    pub config: Option<PathBuf>,
    pub sets: Vec<String>,
    pub mode: Option<String>,
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
}

pub fn resolve_config(sources: &ConfigSources) -> Result<ExperimentConfig> {
    let mut overrides = sources
        .sets
        .iter()
        .map(|s| parse_override(s))
        .collect::<adinfohrl::Result<Vec<_>>>()?;
    if let Some(mode) = &sources.mode {
        overrides.push(("mode".into(), toml::Value::String(mode.clone())));
    }
    if let Some(seeds) = &sources.seeds {
        let list = seeds.iter().map(|&s| toml::Value::Integer(s as i64)).collect();
        overrides.push(("seeds".into(), toml::Value::Array(list)));
    }
    if let Some(out) = &sources.out {
        overrides.push(("output_dir".into(), toml::Value::String(out.display().to_string())));
    }
    Ok(load_config(sources.config.as_deref(), &overrides)?)
}

pub fn run_dir(output_dir: &Path, seed: u64) -> PathBuf {
    output_dir.join(format!("seed_{seed}"))
}

pub fn metrics_header(option_count: usize) -> Vec<String> {
    let mut header: Vec<String> = [
        "step",
        "eval_return_mean",
        "eval_return_std",
        "critic_loss_1",
        "critic_loss_2",
        "option_loss",
        "mi_estimate",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..option_count).map(|o| format!("usage_{o}")));
    header.push("option_action_separation".into());
    header.push("terminal_rate".into());
    header
}

fn prepare_run_dirs(config: &ExperimentConfig, overwrite: bool) -> Result<Vec<PathBuf>> {
    let root = Path::new(&config.output_dir);
    fs::create_dir_all(root).map_err(io_err(root))?;
    let dirs: Vec<PathBuf> = config.seeds.iter().map(|&s| run_dir(root, s)).collect();
    for dir in &dirs {
        if dir.exists() && !overwrite {
            return Err(CliError::Usage(format!(
                "{} already exists; pass --overwrite to replace it",
                dir.display()
            )));
        }
    }
    for dir in &dirs {
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(io_err(dir))?;
        }
        let ckpt = dir.join(CHECKPOINT_DIR);
        fs::create_dir_all(&ckpt).map_err(io_err(&ckpt))?;
        let cfg = dir.join(CONFIG_FILE);
        fs::write(&cfg, config.to_toml_string()).map_err(io_err(&cfg))?;
    }
    let echo = root.join(CONFIG_FILE);
    fs::write(&echo, config.to_toml_string()).map_err(io_err(&echo))?;
    Ok(dirs)
}

fn train_one(config: &ExperimentConfig, seed: u64, dir: &Path, log: &mut dyn Write) -> Result<Vec<EvalRecord>> {
    let metrics_path = dir.join(METRICS_FILE);
    let mut writer = csv::Writer::from_path(&metrics_path).map_err(csv_err(&metrics_path))?;
    writer
        .write_record(metrics_header(config.effective_option_count()))
        .map_err(csv_err(&metrics_path))?;
    let ckpt_dir = dir.join(CHECKPOINT_DIR);

    let mut agent = Agent::new(config.clone(), seed)?;
    let mut observer = |agent: &Agent, rec: &EvalRecord| -> adinfohrl::Result<()> {
        let row: Vec<String> = std::iter::once(rec.step.to_string())
            .chain(rec.values()[1..].iter().map(|v| v.to_string()))
            .collect();
        writer
            .write_record(&row)
            .and_then(|_| writer.flush().map_err(csv::Error::from))
            .map_err(|e| adinfohrl::Error::Io(std::io::Error::other(e.to_string())))?;
        checkpoint::save(agent, &ckpt_dir.join(format!("step_{:09}.ckpt", rec.step)))?;
        let _ = writeln!(
            log,
            "seed {seed} step {}: return {:.4} ± {:.4}",
            rec.step, rec.eval_return_mean, rec.eval_return_std
        );
        Ok(())
    };
    match agent.run(&mut observer) {
        Ok(report) => {
            checkpoint::save(&agent, &ckpt_dir.join(FINAL_CHECKPOINT))?;
            Ok(report.records)
        }
        Err(err) => {
            // Keep the state that produced the failure for inspection.
            let path = ckpt_dir.join(ABORT_CHECKPOINT);
            match checkpoint::save(&agent, &path) {
                Ok(()) => {
                    let _ = writeln!(log, "seed {seed}: aborted, diagnostic checkpoint at {}", path.display());
                }
                Err(save_err) => {
                    let _ = writeln!(log, "seed {seed}: aborted, diagnostic checkpoint failed: {save_err}");
                }
            }
            Err(err.into())
        }
    }
}

/// Trains one run per configured seed under `output_dir/seed_<k>`. Existing
/// run directories are refused unless `overwrite` is set.
pub fn cmd_train(config: &ExperimentConfig, overwrite: bool, log: &mut dyn Write) -> Result<Vec<PathBuf>> {
    let config = config.clone().resolve()?;
    let dirs = prepare_run_dirs(&config, overwrite)?;
    for (&seed, dir) in config.seeds.iter().zip(&dirs) {
        train_one(&config, seed, dir, log)?;
    }
    Ok(dirs)
}

/// Evaluates a checkpoint greedily for `episodes` episodes.
pub fn cmd_eval(path: &Path, episodes: usize, seed: u64, out: &mut dyn Write) -> Result<EvalStats> {
    let agent = checkpoint::load(path)?;
    let mut env = agent.make_env()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stats = agent.evaluate(env.as_mut(), episodes, &mut rng)?;
    let usage: Vec<String> = stats
        .option_usage
        .iter()
        .enumerate()
        .map(|(o, u)| format!("{o}:{u:.3}"))
        .collect();
    let write = |out: &mut dyn Write| -> std::io::Result<()> {
        writeln!(out, "episodes {}", stats.returns.len())?;
        writeln!(out, "return mean {:.6} std {:.6}", stats.mean, stats.std)?;
        writeln!(out, "terminal rate {:.3}", stats.terminal_rate)?;
        writeln!(out, "option usage {}", usage.join(" "))
    };
    write(out).map_err(io_err(path))?;
    Ok(stats)
}

/// One run's evaluation curve as read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub dir: PathBuf,
    pub mode: Mode,
    pub steps: Vec<u64>,
    pub returns: Vec<f64>,
}

pub fn read_run(dir: &Path) -> Result<RunMetrics> {
    let cfg_path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?;
    let config = ExperimentConfig::from_toml_str(&text)?;
    let metrics_path = dir.join(METRICS_FILE);
    let mut reader = csv::Reader::from_path(&metrics_path).map_err(csv_err(&metrics_path))?;
    let headers = reader.headers().map_err(csv_err(&metrics_path))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Aggregation(format!("{} has no `{name}` column", metrics_path.display())))
    };
    let (step_col, ret_col) = (column("step")?, column("eval_return_mean")?);
    let mut steps = Vec::new();
    let mut returns = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err(&metrics_path))?;
        let parse = |i: usize| -> Result<f64> {
            record[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CliError::Aggregation(format!("{}: bad value `{}`", metrics_path.display(), &record[i])))
        };
        steps.push(parse(step_col)? as u64);
        returns.push(parse(ret_col)?);
    }
    if steps.is_empty() {
        return Err(CliError::Aggregation(format!("{} has no rows", metrics_path.display())));
    }
    Ok(RunMetrics {
        dir: dir.to_path_buf(),
        mode: config.mode,
        steps,
        returns,
    })
}

/// Run directories named directly, or found one level below a sweep root.
pub fn collect_run_dirs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for path in paths {
        if path.join(METRICS_FILE).is_file() {
            dirs.push(path.clone());
            continue;
        }
        let mut found: Vec<PathBuf> = fs::read_dir(path)
            .map_err(io_err(path))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(METRICS_FILE).is_file())
            .collect();
        if found.is_empty() {
            return Err(CliError::Aggregation(format!("no completed runs under {}", path.display())));
        }
        found.sort();
        dirs.extend(found);
    }
    Ok(dirs)
}

/// Mean and sample standard deviation; a single value has deviation 0.
pub fn mean_and_sample_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub mode: Mode,
    /// `None` marks the final-performance summary row.
    pub step: Option<u64>,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
}

/// Cross-seed mean and sample standard deviation of the evaluation return
/// per interval and mode, followed by one final-performance row per mode.
pub fn aggregate(runs: &[RunMetrics]) -> Result<Vec<ReportRow>> {
    let first = runs
        .first()
        .ok_or_else(|| CliError::Aggregation("no runs given".into()))?;
    if let Some(other) = runs.iter().find(|r| r.steps != first.steps) {
        return Err(CliError::Aggregation(format!(
            "evaluation steps of {} differ from {}",
            other.dir.display(),
            first.dir.display()
        )));
    }
    let mut by_mode: BTreeMap<&str, Vec<&RunMetrics>> = BTreeMap::new();
    for run in runs {
        by_mode.entry(run.mode.name()).or_default().push(run);
    }
    let mut rows = Vec::new();
    for group in by_mode.values() {
        let mode = group[0].mode;
        for (i, &step) in first.steps.iter().enumerate() {
            let values: Vec<f64> = group.iter().map(|r| r.returns[i]).collect();
            let (mean, std) = mean_and_sample_std(&values);
            rows.push(ReportRow { mode, step: Some(step), runs: group.len(), mean, std });
        }
        let finals: Vec<f64> = group.iter().map(|r| *r.returns.last().unwrap()).collect();
        let (mean, std) = mean_and_sample_std(&finals);
        rows.push(ReportRow { mode, step: None, runs: group.len(), mean, std });
    }
    Ok(rows)
}

pub fn write_report(rows: &[ReportRow], out: &mut dyn Write) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    let err = |e| CliError::Csv {
        path: PathBuf::from("<report>"),
        source: e,
    };
    writer
        .write_record(["mode", "step", "runs", "return_mean", "return_std"])
        .map_err(err)?;
    for row in rows {
        let step = row.step.map_or_else(|| "final".to_string(), |s| s.to_string());
        writer
            .write_record([
                row.mode.name().to_string(),
                step,
                row.runs.to_string(),
                row.mean.to_string(),
                row.std.to_string(),
            ])
            .map_err(err)?;
    }
    writer.flush().map_err(|e| CliError::Io {
        path: PathBuf::from("<report>"),
        source: e,
    })
}

pub fn cmd_report(paths: &[PathBuf], out: &mut dyn Write) -> Result<Vec<ReportRow>> {
    let dirs = collect_run_dirs(paths)?;
    let runs = dirs.iter().map(|d| read_run(d)).collect::<Result<Vec<_>>>()?;
    let rows = aggregate(&runs)?;
    write_report(&rows, out)?;
    Ok(rows)
}
