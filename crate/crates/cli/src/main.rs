use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use swq_core::baselines::{BaselineError, Ewma, LastValue, LatencyPredictor};
use swq_core::controller::{ControllerError, SelectorConfig};
use swq_core::evalkit::experiments::{
    evaluate_on, fine_tune_at, fit_linreg_baseline, index_at, recorded_latencies, run_ablation, run_closed_loop,
    run_sensitivity, s1_l4s_tail, test_bases, train_model, write_rows_csv, AblationGrid, AblationKind,
    ExperimentConfig, ExperimentError, Policy, Prepared, SweepSpec,
};
use swq_core::evalkit::{reduction_pct, EvalError, PredictorEval};
use swq_core::netsim::{SimConfig, SimError};
use swq_core::predictor::{
    build_window, describe, load_checkpoint, predict, save_checkpoint, LossConfig, NormStats, PredictorError,
    Visibility,
};
use swq_core::tensor_nn::TensorError;
use swq_core::trace_model::{load_trace_csv, save_trace_csv, Trace, TraceError};

const EXIT_HELP: &str = "\
Exit codes:
  0  success
  2  usage error (bad flags or arguments)
  3  I/O error (missing or unreadable input, unwritable output)
  4  parse error (malformed config, trace or checkpoint; unsupported schema)
  5  invalid input (configuration or invariant violation)
  6  numeric failure (non-finite values, singular fit)

Errors are printed on one line as: error: kind=<kind> msg=\"<message>\"
The global seed falls back to the SWQ_SEED environment variable. A flag
overrides the config file, which overrides the built-in default.";

#[derive(Parser)]
#[command(name = "swq", version, about = "Packet-latency prediction and L4S queue-selection lab", after_help = EXIT_HELP)]
struct Cli {
    /// Seed for every random choice (overrides config files).
    #[arg(long, global = true, env = "SWQ_SEED")]
    seed: Option<u64>,
    /// Print the parameter count, schema version and normalization digest of a checkpoint.
    #[arg(long, value_name = "CHECKPOINT")]
    describe: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Option<Cmd>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the network simulator and write the packet trace (CSV).
    Simulate {
        /// Simulator configuration, JSON or TOML.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        duration_s: Option<f64>,
        /// Write run statistics as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Pre-train a predictor on the training span of a trace.
    Train {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Experiment configuration (spans, model, training budget), JSON or TOML.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, value_enum)]
        loss: Option<LossKind>,
        #[arg(long)]
        windows: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fine-tune the output layers on the span that precedes `--at-s`.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        at_s: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        span_s: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Predict the next B latencies after one stream index.
    Predict {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        base: usize,
    },
    /// Score sharp-change prediction on a span of a trace.
    Evaluate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scored span in simulated seconds (defaults to the test span).
        #[arg(long)]
        from_s: Option<f64>,
        #[arg(long)]
        to_s: Option<f64>,
        /// Allowed index offset when matching predicted to true changes.
        #[arg(long)]
        slack: Option<usize>,
        #[arg(long)]
        delta_abs_ms: Option<f64>,
        #[arg(long)]
        delta_rel: Option<f64>,
        /// Metrics CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-loop run in which a policy picks the queue of each ECT packet.
    L4sRun {
        /// Simulator configuration, JSON or TOML (defaults to the L4S-selection topology).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PolicyKind::Default)]
        policy: PolicyKind,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Selector parameters, JSON.
        #[arg(long)]
        selector: Option<PathBuf>,
        /// Only divert when the classic queue looked faster at the last ACK.
        #[arg(long)]
        guard: bool,
        #[arg(long)]
        duration_s: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Tail metrics as JSON.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Sensitivity sweep over environment parameters.
    Sweep {
        /// Sweep specification, JSON (defaults to the full grid).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Loss-function, fine-tune-interval or batch-size ablation.
    Ablation {
        #[arg(long, value_enum)]
        kind: AblationArg,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Interval and batch-size grids, JSON.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Same as the global --describe flag.
    Describe { checkpoint: PathBuf },
}

#[derive(clap::Args)]
struct ModelArgs {
    #[arg(long, conflicts_with = "baseline")]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    baseline: Option<BaselineKind>,
    /// Horizon of the baseline predictors.
    #[arg(long, default_value_t = 8)]
    horizon: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossKind {
    ChangePoint,
    Mse,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum BaselineKind {
    LastValue,
    Ewma,
    Linreg,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum PolicyKind {
    Default,
    Oracle,
    Model,
    LastValue,
    Ewma,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    LossFunction,
    FinetuneInterval,
    BatchSize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Usage,
    Io,
    Parse,
    Invalid,
    Numeric,
}

impl Kind {
    fn code(self) -> u8 {
        match self {
            Kind::Usage => 2,
            Kind::Io => 3,
            Kind::Parse => 4,
            Kind::Invalid => 5,
            Kind::Numeric => 6,
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Kind::Usage => "usage",
            Kind::Io => "io",
            Kind::Parse => "parse",
            Kind::Invalid => "invalid",
            Kind::Numeric => "numeric",
        };
        f.write_str(s)
    }
}

#[derive(Debug)]
struct CliError {
    kind: Kind,
    msg: String,
}

fn err(kind: Kind, msg: impl fmt::Display) -> CliError {
    CliError {
        kind,
        msg: msg.to_string(),
    }
}

impl From<TraceError> for CliError {
    fn from(e: TraceError) -> Self {
        let kind = match &e {
            TraceError::Io { .. } => Kind::Io,
            TraceError::Invalid { .. } => Kind::Invalid,
            _ => Kind::Parse,
        };
        err(kind, e)
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        let kind = match &e {
            SimError::Parse(_) => Kind::Parse,
            _ => Kind::Invalid,
        };
        err(kind, e)
    }
}

impl From<PredictorError> for CliError {
    fn from(e: PredictorError) -> Self {
        let kind = match &e {
            PredictorError::Io(_) => Kind::Io,
            PredictorError::Checkpoint(_) | PredictorError::UnsupportedVersion(_) => Kind::Parse,
            PredictorError::NonFinite(_) | PredictorError::Tensor(TensorError::NonFiniteGradient { .. }) => {
                Kind::Numeric
            }
            _ => Kind::Invalid,
        };
        err(kind, e)
    }
}

impl From<BaselineError> for CliError {
    fn from(e: BaselineError) -> Self {
        let kind = if matches!(e, BaselineError::Singular) {
            Kind::Numeric
        } else {
            Kind::Invalid
        };
        err(kind, e)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        err(Kind::Invalid, e)
    }
}

impl From<ControllerError> for CliError {
    fn from(e: ControllerError) -> Self {
        err(Kind::Invalid, e)
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Sim(e) => e.into(),
            ExperimentError::Predictor(e) => e.into(),
            ExperimentError::Baseline(e) => e.into(),
            ExperimentError::Eval(e) => e.into(),
            ExperimentError::Controller(e) => e.into(),
            ExperimentError::Config(m) => err(Kind::Invalid, m),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| err(Kind::Io, format!("{}: {e}", path.display())))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| err(Kind::Io, format!("{}: {e}", path.display())))
}

/// JSON, or TOML when the file name ends in `.toml`.
fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    let parsed = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| err(Kind::Parse, format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| err(Kind::Invalid, e))?;
    write_bytes(path, format!("{text}\n").as_bytes())
}

fn sim_config(path: Option<&Path>, fallback: SimConfig, seed: Option<u64>) -> Result<SimConfig> {
    let mut cfg = match path {
        Some(p) => load_config(p)?,
        None => fallback,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn experiment_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = match path {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.sim.seed = s;
    }
    Ok(cfg)
}

/// A loaded trace cut at the configured spans. Spans are clipped to the
/// trace, and either may be empty.
fn prepared(trace: Trace, cfg: &ExperimentConfig) -> Prepared {
    let stream = swq_core::netsim::monitored_stream(&trace);
    let train = index_at(&stream, cfg.train_span_s[0])..index_at(&stream, cfg.train_span_s[1]);
    let test = index_at(&stream, cfg.test_span_s[0])..index_at(&stream, cfg.test_span_s[1]);
    let norm = NormStats::fit(&stream[train.clone()], cfg.model.window, cfg.norm_stride);
    Prepared {
        trace,
        stream,
        train,
        test,
        norm,
    }
}

fn load_predictor(args: &ModelArgs, prep: &Prepared, cfg: &ExperimentConfig) -> Result<Box<dyn LatencyPredictor>> {
    let window = cfg.model.window;
    match (&args.checkpoint, args.baseline) {
        (Some(p), _) => Ok(Box::new(load_checkpoint(p)?)),
        (None, Some(BaselineKind::LastValue)) => Ok(Box::new(LastValue {
            horizon: args.horizon,
            window,
        })),
        (None, Some(BaselineKind::Ewma)) => Ok(Box::new(Ewma {
            gain: cfg.ewma_gain,
            horizon: args.horizon,
            window,
        })),
        (None, Some(BaselineKind::Linreg)) => Ok(Box::new(fit_linreg_baseline(prep, cfg, args.horizon)?)),
        (None, None) => Err(err(Kind::Usage, "give --checkpoint or --baseline")),
    }
}

fn cmd_simulate(config: Option<&Path>, out: &Path, duration: Option<f64>, report: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut cfg = sim_config(config, SimConfig::default(), seed)?;
    if let Some(d) = duration {
        cfg.duration_s = d;
        cfg.validate()?;
    }
    let (trace, rep) = swq_core::netsim::run_simulation_with_report(&cfg, None)?;
    save_trace_csv(&trace, out)?;
    if let Some(p) = report {
        write_json(p, &rep)?;
    }
    println!("wrote {} records to {}", trace.len(), out.display());
    Ok(())
}

fn summarize(name: &str, e: &PredictorEval) {
    let s = &e.score;
    let mut notes = Vec::new();
    if s.predicted_count == 0 {
        notes.push("precision is 1.0 by definition when no change is predicted");
    }
    let recall = if s.true_count == 0 {
        notes.push("recall is undefined without true sharp changes");
        "N/A".to_string()
    } else {
        format!("{:.4}", s.recall)
    };
    let sharp = e.mse_on_sharp().map_or("N/A".to_string(), |v| format!("{v:.3}"));
    println!("model       precision  recall  f1      true  predicted  matched  mse_sharp_ms2  mse_ms2");
    println!(
        "{name:<11} {:<10.4} {recall:<7} {:<7.4} {:<5} {:<10} {:<8} {sharp:<14} {:.3}",
        s.precision, s.f1, s.true_count, s.predicted_count, s.matched_count, e.mse
    );
    for n in notes {
        println!("note: {n}");
    }
}

fn run() -> Result<()> {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            return Err(err(Kind::Usage, first));
        }
    };
    let seed = cli.seed;
    if let Some(p) = &cli.describe {
        return cmd_describe(p);
    }
    let Some(cmd) = cli.cmd else {
        return Err(err(Kind::Usage, "no subcommand given; see --help"));
    };
    match cmd {
        Cmd::Simulate {
            config,
            out,
            duration_s,
            report,
        } => cmd_simulate(config.as_deref(), &out, duration_s, report.as_deref(), seed),
        Cmd::Train {
            trace,
            out,
            config,
            horizon,
            loss,
            windows,
            epochs,
        } => {
            let mut cfg = experiment_config(config.as_deref(), seed)?;
            if let Some(w) = windows {
                cfg.train_windows = w;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let loss = match loss {
                Some(LossKind::Mse) => LossConfig::mse(),
                _ => cfg.train.loss,
            };
            let prep = prepared(load_trace_csv(&trace)?, &cfg);
            if prep.train.len() < cfg.model.window {
                return Err(err(Kind::Invalid, format!("training span holds only {} packets", prep.train.len())));
            }
            let (model, report) = train_model(&prep, &cfg, horizon.unwrap_or(cfg.model.horizon), loss)?;
            save_checkpoint(&model, &out)?;
            println!(
                "trained {} steps, loss {:.4} -> {:.4}; wrote {}",
                report.steps,
                report.initial_loss,
                report.epoch_losses.last().copied().unwrap_or(report.initial_loss),
                out.display()
            );
            Ok(())
        }
        Cmd::Finetune {
            checkpoint,
            trace,
            at_s,
            out,
            config,
            span_s,
            steps,
        } => {
            let mut cfg = experiment_config(config.as_deref(), seed)?;
            if let Some(s) = span_s {
                cfg.finetune_span_s = s;
            }
            if let Some(s) = steps {
                cfg.finetune.steps = s;
            }
            let model = load_checkpoint(&checkpoint)?;
            let prep = prepared(load_trace_csv(&trace)?, &cfg);
            let tuned = fine_tune_at(model, &prep, &cfg, at_s)?;
            save_checkpoint(&tuned, &out)?;
            println!("fine-tuned on [{}, {}) s; wrote {}", at_s - cfg.finetune_span_s, at_s, out.display());
            Ok(())
        }
        Cmd::Predict { model, trace, base } => {
            let cfg = experiment_config(None, seed)?;
            let prep = prepared(load_trace_csv(&trace)?, &cfg);
            if base >= prep.stream.len() {
                return Err(err(Kind::Invalid, format!("base {base} beyond stream of {}", prep.stream.len())));
            }
            let batch = match &model.checkpoint {
                Some(p) => {
                    let m = load_checkpoint(p)?;
                    let w = build_window(&prep.stream, base, m.config.window, Visibility::AsRecorded);
                    predict(&m, &w, base)?
                }
                None => {
                    let p = load_predictor(&model, &prep, &cfg)?;
                    let w = build_window(&prep.stream, base, p.window(), Visibility::AsRecorded);
                    swq_core::predictor::PredictionBatch {
                        base_index: base,
                        horizon: p.horizon(),
                        predicted_latency_ms: p.predict_window(&w)?,
                    }
                }
            };
            println!("{}", serde_json::to_string(&batch).map_err(|e| err(Kind::Invalid, e))?);
            Ok(())
        }
        Cmd::Evaluate {
            model,
            trace,
            config,
            from_s,
            to_s,
            slack,
            delta_abs_ms,
            delta_rel,
            out,
        } => {
            let mut cfg = experiment_config(config.as_deref(), seed)?;
            if let Some(s) = slack {
                cfg.slack = s;
            }
            if delta_abs_ms.is_some() || delta_rel.is_some() {
                cfg.thresholds = swq_core::trace_model::SharpChangeThresholds::new(
                    delta_abs_ms.unwrap_or(cfg.thresholds.delta_abs_ms),
                    delta_rel.unwrap_or(cfg.thresholds.delta_rel),
                )
                .map_err(|e| err(Kind::Invalid, e))?;
            }
            if let Some(f) = from_s {
                cfg.test_span_s[0] = f;
            }
            if let Some(t) = to_s {
                cfg.test_span_s[1] = t;
            }
            let prep = prepared(load_trace_csv(&trace)?, &cfg);
            let predictor = load_predictor(&model, &prep, &cfg)?;
            let h = predictor.horizon();
            let bases = test_bases(&prep, &cfg, h);
            if bases.is_empty() {
                return Err(err(Kind::Invalid, "scored span is too short for one prediction batch"));
            }
            let e = evaluate_on(&prep, &cfg, predictor.as_ref(), &bases)?;
            let name = predictor.name().to_string();
            summarize(&name, &e);
            if let Some(p) = out {
                let row = MetricsRow::new(&name, &e);
                let mut buf = Vec::new();
                write_rows_csv(&[row], &mut buf).map_err(|e| err(Kind::Io, e))?;
                write_bytes(&p, &buf)?;
            }
            Ok(())
        }
        Cmd::L4sRun {
            config,
            policy,
            checkpoint,
            selector,
            guard,
            duration_s,
            out,
            metrics,
        } => {
            let mut sim = sim_config(config.as_deref(), SimConfig::l4s_selection(), seed)?;
            if let Some(d) = duration_s {
                sim.duration_s = d;
                sim.validate()?;
            }
            let sel: SelectorConfig = match &selector {
                Some(p) => load_config(p)?,
                None => SelectorConfig::default(),
            };
            sel.check()?;
            cmd_l4s_run(&sim, policy, checkpoint.as_deref(), &sel, guard, &out, metrics.as_deref())
        }
        Cmd::Sweep { spec, out, jobs } => {
            let mut spec: SweepSpec = match &spec {
                Some(p) => load_config(p)?,
                None => SweepSpec::default(),
            };
            if let Some(s) = seed {
                spec.experiment.seed = s;
                spec.experiment.sim.seed = s;
            }
            let rows = run_sensitivity(&spec, jobs);
            let mut buf = Vec::new();
            write_rows_csv(&rows, &mut buf).map_err(|e| err(Kind::Io, e))?;
            write_bytes(&out, &buf)?;
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            println!("{} rows ({failed} failed) written to {}", rows.len(), out.display());
            Ok(())
        }
        Cmd::Ablation { kind, config, grid, out } => {
            let cfg = experiment_config(config.as_deref(), seed)?;
            let grid: AblationGrid = match &grid {
                Some(p) => load_config(p)?,
                None => AblationGrid::default(),
            };
            let kind = match kind {
                AblationArg::LossFunction => AblationKind::LossFunction,
                AblationArg::FinetuneInterval => AblationKind::FinetuneInterval,
                AblationArg::BatchSize => AblationKind::BatchSize,
            };
            let rows = run_ablation(kind, &cfg, &grid)?;
            let mut buf = Vec::new();
            write_rows_csv(&rows, &mut buf).map_err(|e| err(Kind::Io, e))?;
            write_bytes(&out, &buf)?;
            println!("setting     f1");
            for r in &rows {
                println!("{:<11} {}", r.setting, r.f1.map_or(r.status.clone(), |f| format!("{f:.4}")));
            }
            Ok(())
        }
        Cmd::Describe { checkpoint } => cmd_describe(&checkpoint),
    }
}

#[derive(Serialize)]
struct MetricsRow {
    model: String,
    precision: f64,
    recall: Option<f64>,
    f1: f64,
    true_events: usize,
    predicted_events: usize,
    matched_events: usize,
    mse_on_sharp_ms2: Option<f64>,
    mse_ms2: f64,
    targets: usize,
}

impl MetricsRow {
    fn new(name: &str, e: &PredictorEval) -> Self {
        MetricsRow {
            model: name.into(),
            precision: e.score.precision,
            recall: (e.score.true_count > 0).then_some(e.score.recall),
            f1: e.score.f1,
            true_events: e.score.true_count,
            predicted_events: e.score.predicted_count,
            matched_events: e.score.matched_count,
            mse_on_sharp_ms2: e.mse_on_sharp(),
            mse_ms2: e.mse,
            targets: e.targets,
        }
    }
}

#[derive(Serialize)]
struct LoopMetrics {
    policy: String,
    p50_ms: f64,
    p90_ms: f64,
    p99_ms: f64,
    packets: usize,
    default_p99_ms: Option<f64>,
    p99_reduction_pct: Option<f64>,
    stats: Option<swq_core::controller::SelectorStats>,
}

fn cmd_l4s_run(
    sim: &SimConfig,
    policy: PolicyKind,
    checkpoint: Option<&Path>,
    sel: &SelectorConfig,
    guard: bool,
    out: &Path,
    metrics: Option<&Path>,
) -> Result<()> {
    let default = run_closed_loop(sim, Policy::Default, sel, guard)?;
    let window = ExperimentConfig::default().model.window;
    let model_box: Option<Box<dyn LatencyPredictor>> = match policy {
        PolicyKind::Model => {
            let p = checkpoint.ok_or_else(|| err(Kind::Usage, "--policy model needs --checkpoint"))?;
            Some(Box::new(load_checkpoint(p)?))
        }
        PolicyKind::LastValue => Some(Box::new(LastValue {
            horizon: sel.horizon,
            window,
        })),
        PolicyKind::Ewma => Some(Box::new(Ewma {
            gain: ExperimentConfig::default().ewma_gain,
            horizon: sel.horizon,
            window,
        })),
        _ => None,
    };
    let base = s1_l4s_tail(sim, &default.trace)?.p99;
    let run = match (policy, model_box.as_deref()) {
        (PolicyKind::Default, _) => default,
        (PolicyKind::Oracle, _) => run_closed_loop(sim, Policy::Oracle(recorded_latencies(&default.trace)), sel, guard)?,
        (_, Some(m)) => run_closed_loop(sim, Policy::Model(m), sel, guard)?,
        (_, None) => return Err(err(Kind::Usage, "policy needs a predictor")),
    };
    save_trace_csv(&run.trace, out)?;
    let tail = s1_l4s_tail(sim, &run.trace)?;
    let base = (policy != PolicyKind::Default).then_some(base);
    let m = LoopMetrics {
        policy: policy_name(policy).to_string(),
        p50_ms: tail.p50,
        p90_ms: tail.p90,
        p99_ms: tail.p99,
        packets: tail.count,
        default_p99_ms: base,
        p99_reduction_pct: base.map(|b| reduction_pct(b, tail.p99)),
        stats: run.stats,
    };
    match (base, m.p99_reduction_pct) {
        (Some(b), Some(r)) => println!("policy {} p99 {:.3} ms (default {b:.3} ms, reduction {r:.2}%)", m.policy, m.p99_ms),
        _ => println!("policy {} p99 {:.3} ms", m.policy, m.p99_ms),
    }
    if let Some(p) = metrics {
        write_json(p, &m)?;
    }
    Ok(())
}

fn policy_name(p: PolicyKind) -> &'static str {
    match p {
        PolicyKind::Default => "default",
        PolicyKind::Oracle => "oracle",
        PolicyKind::Model => "model",
        PolicyKind::LastValue => "last-value",
        PolicyKind::Ewma => "ewma",
    }
}

fn cmd_describe(path: &Path) -> Result<()> {
    let m = load_checkpoint(path)?;
    let d = describe(&m);
    println!("trainable_parameters {}", d.trainable_parameters);
    println!("schema_version {}", d.schema_version);
    println!("norm_digest {}", d.norm_digest);
    println!("config {}", serde_json::to_string(&d.config).map_err(|e| err(Kind::Invalid, e))?);
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: kind={} msg={:?}", e.kind, e.msg);
            ExitCode::from(e.kind.code())
        }
    }
}
