use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{ArgGroup, Parser, Subcommand, ValueEnum};
use log::info;

use tsadapt::config::{config_help, ConfigError, RunConfig};
use tsadapt::data::{load_csv, prepare_domain, synth_generate, write_csv, DataError, DomainData, RawSeries, SeriesDataset, SynthSpec};
use tsadapt::decomposition::{decompose, default_k_cut, fourier_split, DecompError, DEFAULT_K_TREND};
use tsadapt::forecaster::{load_checkpoint, save_checkpoint, DualBranchForecaster, ForecastError};
use tsadapt::proxy::{FileProxy, ModelProxy, Proxy, ProxyError};
use tsadapt::training::{adapt_target, evaluate, pretrain_source, StepRecord, TrainError, TrainReport};
use tsadapt::Tensor;

#[derive(Parser)]
#[command(name = "tsadapt", version, about = "Source-free domain adaptation for time-series forecasting")]
#[command(after_long_help = exit_code_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Method {
    /// Moving-average trend, seasonal = input - trend.
    Ma,
    /// Low DFT bins (k <= k_cut) as trend, the rest as seasonal.
    Dft,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source model; writes model.ckpt, report.jsonl, summary.json.
    #[command(after_long_help = config_help())]
    Pretrain {
        /// JSON run config (all keys optional).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Source-domain CSV.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a frozen source model to target data with a frozen proxy.
    #[command(after_long_help = config_help())]
    #[command(group(ArgGroup::new("proxy").required(true).args(["proxy_ckpt", "proxy_file"])))]
    Adapt {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Source checkpoint written by `pretrain`.
        #[arg(long)]
        source_ckpt: PathBuf,
        /// Proxy forecaster checkpoint.
        #[arg(long)]
        proxy_ckpt: Option<PathBuf>,
        /// Precomputed proxy predictions (see `predict`).
        #[arg(long)]
        proxy_file: Option<PathBuf>,
        /// Target-domain CSV.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print {mse, mae} of a checkpoint on one split, in original units.
    #[command(after_long_help = config_help())]
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Also write metrics.json into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a file proxy (normalized predictions for every window of a split).
    #[command(after_long_help = config_help())]
    Predict {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Split every channel into seasonal and trend CSVs.
    Decompose {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "ma")]
        method: Method,
        /// Kernel length (ma, default 25) or cut-off bin (dft, default max(1, L/40)).
        #[arg(long)]
        k: Option<usize>,
        /// Timestamp column; auto-detected when omitted.
        #[arg(long)]
        date_column: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn report.jsonl into plot-ready CSV tables.
    Report {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic trend + sine + noise series.
    Synth {
        #[arg(long, default_value_t = 1000)]
        length: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        /// Per-channel slope; repeat or give one for all channels.
        #[arg(long, num_args = 1.., default_values_t = [0.0])]
        slope: Vec<f64>,
        #[arg(long, default_value_t = 24.0)]
        period: f64,
        #[arg(long, default_value_t = 1.0)]
        amplitude: f64,
        #[arg(long, default_value_t = 0.1)]
        noise_std: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code_help() -> String {
    "Exit codes: 0 success, 1 usage, 2 config, 3 data or I/O, 4 numeric divergence.\n\n".to_string() + &config_help()
}

/// Error tagged with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn classify(error: &anyhow::Error) -> u8 {
    for cause in error.chain() {
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::Divergence { .. } => 4,
                TrainError::InvalidConfig(_) | TrainError::ArchitectureMismatch => 2,
                _ => continue,
            };
        }
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<ForecastError>() {
            return match e {
                ForecastError::InvalidConfig(_) | ForecastError::Incompatible(_) => 2,
                _ => 3,
            };
        }
        if let Some(e) = cause.downcast_ref::<ProxyError>() {
            return match e {
                ProxyError::InvalidStrength(_) | ProxyError::InvalidTemperature(_) => 2,
                _ => 3,
            };
        }
        if cause.is::<DataError>() || cause.is::<DecompError>() || cause.is::<std::io::Error>() {
            return 3;
        }
    }
    3
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn describe(error: &anyhow::Error) -> String {
    let mut out = error.to_string();
    for cause in error.chain().skip(1) {
        let text = cause.to_string();
        if !out.contains(&text) {
            out.push_str(": ");
            out.push_str(&text);
        }
    }
    out
}

fn config_error(message: String) -> anyhow::Error {
    ConfigError::Invalid(message).into()
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn load_series(path: &Path, config: &RunConfig) -> Result<RawSeries> {
    Ok(load_csv(path, config.data.date_column.as_deref())?)
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

fn pick(domain: &DomainData, split: SplitArg) -> &SeriesDataset {
    match split {
        SplitArg::Train => &domain.train,
        SplitArg::Val => &domain.val,
        SplitArg::Test => &domain.test,
    }
}

/// Writes report.jsonl, summary.json, timing.json and the effective config.
fn write_run(out: &Path, report: &TrainReport, config: &RunConfig, started: Instant) -> Result<()> {
    let path = out.join("report.jsonl");
    report.write_jsonl(&path).with_context(|| format!("cannot write {}", path.display()))?;
    let path = out.join("summary.json");
    report.write_summary(&path).with_context(|| format!("cannot write {}", path.display()))?;
    write_file(&out.join("config.json"), config.to_json_pretty())?;
    let timing = serde_json::json!({ "wall_clock_seconds": started.elapsed().as_secs_f64() });
    write_file(&out.join("timing.json"), format!("{timing}\n"))
}

/// On divergence, keeps the partial report before failing.
fn finish_training(result: std::result::Result<TrainReport, TrainError>, out: &Path, config: &RunConfig, started: Instant) -> Result<TrainReport> {
    match result {
        Ok(report) => Ok(report),
        Err(TrainError::Divergence { step, reason, mut report }) => {
            report.summary.config = config.to_value();
            write_run(out, &report, config, started)?;
            Err(TrainError::Divergence { step, reason, report }.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_pretrain(config: Option<&Path>, data: &Path, out: &Path) -> Result<()> {
    let started = Instant::now();
    let config = load_config(config)?;
    let series = load_series(data, &config)?;
    create_out(out)?;
    let domain = prepare_domain(&series, config.data.lookback, config.data.horizon, config.split_ratios(), None)?;
    let mut model = DualBranchForecaster::new(config.tsfe(series.channels()))?;
    info!("pretraining on {} windows ({} parameters)", domain.train.len(), model.params().num_scalars());
    let result = pretrain_source(&mut model, &domain.train, Some(&domain.val), &config.settings());
    let mut report = finish_training(result, out, &config, started)?;
    if config.output.evaluate_test {
        report.summary.test = Some(evaluate(&model, &domain.test, config.output.eval_batch_size)?);
    }
    report.summary.config = config.to_value();
    save_checkpoint(&model, out.join("model.ckpt"))?;
    write_run(out, &report, &config, started)?;
    if let Some(m) = report.summary.test {
        println!("{}", serde_json::json!({ "mse": m.mse, "mae": m.mae }));
    }
    Ok(())
}

fn cmd_adapt(config: Option<&Path>, source_ckpt: &Path, proxy_ckpt: Option<&Path>, proxy_file: Option<&Path>, data: &Path, out: &Path) -> Result<()> {
    let started = Instant::now();
    let config = load_config(config)?;
    let series = load_series(data, &config)?;
    let source = load_checkpoint(source_ckpt)?;
    let expected = config.tsfe(series.channels());
    if source.config() != &expected {
        return Err(config_error(format!(
            "source checkpoint architecture {:?} does not match config and data {:?}",
            source.config(),
            expected
        )));
    }
    let (l, h, c) = (expected.lookback, expected.horizon, expected.channels);
    let proxy: Box<dyn Proxy> = match (proxy_ckpt, proxy_file) {
        (Some(p), _) => {
            let model = load_checkpoint(p)?;
            let pc = model.config();
            if (pc.lookback, pc.horizon, pc.channels) != (l, h, c) {
                return Err(config_error(format!(
                    "proxy checkpoint geometry (l={}, H={}, C={}) differs from (l={l}, H={h}, C={c})",
                    pc.lookback, pc.horizon, pc.channels
                )));
            }
            Box::new(ModelProxy::new(model))
        }
        (None, Some(f)) => Box::new(FileProxy::load(f, h, c)?),
        (None, None) => unreachable!("clap enforces the proxy group"),
    };
    create_out(out)?;
    let fraction = Some((config.data.target_fraction, config.data.subsample, config.train.seed));
    let domain = prepare_domain(&series, l, h, config.split_ratios(), fraction)?;
    info!("adapting on {} target windows", domain.train.len());
    let result = adapt_target(&source, proxy.as_ref(), &domain.train, Some(&domain.val), &config.settings());
    let (target, report) = match result {
        Ok((t, r)) => (Some(t), Ok(r)),
        Err(e) => (None, Err(e)),
    };
    let mut report = finish_training(report, out, &config, started)?;
    let target = target.expect("present on success");
    if config.output.evaluate_test {
        report.summary.test = Some(evaluate(&target, &domain.test, config.output.eval_batch_size)?);
    }
    report.summary.config = config.to_value();
    save_checkpoint(&target, out.join("model.ckpt"))?;
    write_run(out, &report, &config, started)?;
    if let Some(m) = report.summary.test {
        println!("{}", serde_json::json!({ "mse": m.mse, "mae": m.mae }));
    }
    Ok(())
}

/// Loads a checkpoint and windows `data` with its geometry.
fn checkpoint_domain(config: Option<&Path>, ckpt: &Path, data: &Path) -> Result<(RunConfig, DualBranchForecaster, DomainData)> {
    let config = load_config(config)?;
    let model = load_checkpoint(ckpt)?;
    let series = load_series(data, &config)?;
    let mc = model.config();
    if mc.channels != series.channels() {
        return Err(config_error(format!("checkpoint expects {} channels, data has {}", mc.channels, series.channels())));
    }
    let domain = prepare_domain(&series, mc.lookback, mc.horizon, config.split_ratios(), None)?;
    Ok((config, model, domain))
}

fn cmd_eval(config: Option<&Path>, ckpt: &Path, data: &Path, split: SplitArg, out: Option<&Path>) -> Result<()> {
    let (config, model, domain) = checkpoint_domain(config, ckpt, data)?;
    let m = evaluate(&model, pick(&domain, split), config.output.eval_batch_size)?;
    let json = serde_json::json!({ "mse": m.mse, "mae": m.mae });
    println!("{json}");
    if let Some(dir) = out {
        create_out(dir)?;
        write_file(&dir.join("metrics.json"), format!("{json}\n"))?;
    }
    Ok(())
}

fn cmd_predict(config: Option<&Path>, ckpt: &Path, data: &Path, split: SplitArg, out: &Path) -> Result<()> {
    let (config, model, domain) = checkpoint_domain(config, ckpt, data)?;
    let dataset = pick(&domain, split);
    let mut proxy = FileProxy::new(model.config().horizon, model.config().channels);
    let positions: Vec<usize> = (0..dataset.len()).collect();
    for chunk in positions.chunks(config.output.eval_batch_size) {
        let batch = dataset.batch(chunk);
        proxy.insert_batch(&batch, &model.predict(&batch.x)?)?;
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_out(dir)?;
    }
    proxy.save(out)?;
    info!("wrote {} windows to {}", proxy.len(), out.display());
    Ok(())
}

fn cmd_decompose(data: &Path, method: Method, k: Option<usize>, date_column: Option<&str>, out: &Path) -> Result<()> {
    let series = load_csv(data, date_column)?;
    let (len, channels) = (series.len(), series.channels());
    let x = Tensor::new(vec![1, len, channels], series.values().to_vec())?;
    let parts = match method {
        Method::Ma => decompose(&x, k.unwrap_or(DEFAULT_K_TREND))?,
        Method::Dft => fourier_split(&x, k.unwrap_or_else(|| default_k_cut(len)))?,
    };
    create_out(out)?;
    let names = series.channel_names().to_vec();
    let timestamps = series.timestamps().map(<[String]>::to_vec);
    for (name, tensor) in [("seasonal", &parts.seasonal), ("trend", &parts.trend)] {
        let component = RawSeries::new(tensor.data().to_vec(), names.clone(), timestamps.clone())?;
        write_csv(&component, out.join(format!("{name}.csv")))?;
    }
    let path = out.join("reconstruction.csv");
    let mut writer = csv::Writer::from_path(&path).with_context(|| format!("cannot write {}", path.display()))?;
    writer.write_record(["row", "max_abs_error"])?;
    let mut worst: f64 = 0.0;
    for r in 0..len {
        let mut row_err: f64 = 0.0;
        for c in 0..channels {
            let i = r * channels + c;
            row_err = row_err.max((parts.seasonal.data()[i] + parts.trend.data()[i] - series.get(r, c)).abs());
        }
        worst = worst.max(row_err);
        writer.write_record([r.to_string(), format!("{row_err}")])?;
    }
    writer.flush()?;
    println!("{}", serde_json::json!({ "rows": len, "channels": channels, "max_abs_reconstruction_error": worst }));
    Ok(())
}

fn cmd_report(report: &Path, out: &Path) -> Result<()> {
    let records = TrainReport::read_jsonl(report).with_context(|| format!("cannot read report {}", report.display()))?;
    create_out(out)?;
    let path = out.join("loss_curve.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("cannot write {}", path.display()))?;
    w.write_record(StepRecord::COLUMNS)?;
    for r in &records {
        let mut row = vec![r.step.to_string()];
        row.extend(r.values().iter().map(|v| format!("{v}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    let path = out.join("proxy_trajectory.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("cannot write {}", path.display()))?;
    w.write_record(["step", "e_t", "C_t"])?;
    for r in &records {
        w.write_record([r.step.to_string(), format!("{}", r.e_t), format!("{}", r.c_t)])?;
    }
    w.flush()?;
    println!("{}", serde_json::json!({ "steps": records.len() }));
    Ok(())
}

fn cmd_synth(spec: SynthSpec, out: &Path) -> Result<()> {
    let series = synth_generate(&spec)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_out(dir)?;
    }
    write_csv(&series, out)?;
    Ok(())
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let result = match cli.command {
        Command::Pretrain { config, data, out } => cmd_pretrain(config.as_deref(), &data, &out),
        Command::Adapt {
            config,
            source_ckpt,
            proxy_ckpt,
            proxy_file,
            data,
            out,
        } => cmd_adapt(config.as_deref(), &source_ckpt, proxy_ckpt.as_deref(), proxy_file.as_deref(), &data, &out),
        Command::Eval { config, ckpt, data, split, out } => cmd_eval(config.as_deref(), &ckpt, &data, split, out.as_deref()),
        Command::Predict { config, ckpt, data, split, out } => cmd_predict(config.as_deref(), &ckpt, &data, split, &out),
        Command::Decompose {
            data,
            method,
            k,
            date_column,
            out,
        } => cmd_decompose(&data, method, k, date_column.as_deref(), &out),
        Command::Report { report, out } => cmd_report(&report, &out),
        Command::Synth {
            length,
            channels,
            slope,
            period,
            amplitude,
            noise_std,
            seed,
            out,
        } => {
            let spec = SynthSpec {
                length,
                channels,
                slopes: slope,
                period,
                amplitude,
                noise_std,
                seed,
            };
            cmd_synth(spec, &out)
        }
    };
    result.map_err(|error| Failure {
        code: classify(&error),
        error,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, error }) => {
            eprintln!("error: {}", describe(&error));
            ExitCode::from(code)
        }
    }
}
