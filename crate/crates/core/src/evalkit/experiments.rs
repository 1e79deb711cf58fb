//! Train/fine-tune/test protocol, ablations, sensitivity sweeps and
//! closed-loop runs.

use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{delivered_latencies, reduction_pct, TailStats};
use super::protocol::{evaluate_predictor, segment_bases, PredictorEval};
use super::EvalError;
use crate::baselines::{fit_linreg, Ewma, LastValue, LatencyPredictor, LinRegWindowModel};
use crate::controller::{BatchedSelector, DefaultSelector, ModelSource, OracleSource, SelectorConfig, SelectorStats};
use crate::netsim::{monitored_stream, run_simulation_with_report, CcAlgorithm, SimConfig, SimReport, Topology};
use crate::predictor::{
    fine_tune, train, Dataset, FineTuneConfig, LossConfig, ModelConfig, ModelParams, NormStats, TrainConfig,
    TrainReport, Visibility,
};
use crate::trace_model::{PacketRecord, SharpChangeThresholds, Trace};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("simulation: {0}")]
    Sim(#[from] crate::netsim::SimError),
    #[error("predictor: {0}")]
    Predictor(#[from] crate::predictor::PredictorError),
    #[error("baseline: {0}")]
    Baseline(#[from] crate::baselines::BaselineError),
    #[error("evaluation: {0}")]
    Eval(#[from] EvalError),
    #[error("controller: {0}")]
    Controller(#[from] crate::controller::ControllerError),
    #[error("configuration: {0}")]
    Config(String),
}

/// One experiment: environment, protocol spans (simulated seconds) and
/// training budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub train_span_s: [f64; 2],
    pub test_span_s: [f64; 2],
    /// Length of the fine-tuning span that precedes each update point.
    pub finetune_span_s: f64,
    pub model: ModelConfig,
    pub train_windows: usize,
    pub train: TrainConfig,
    pub finetune_windows: usize,
    pub finetune: FineTuneConfig,
    pub eval_segments: usize,
    pub segment_len: usize,
    pub norm_stride: usize,
    pub linreg_lags: usize,
    pub linreg_lambda: f64,
    pub ewma_gain: f64,
    pub thresholds: SharpChangeThresholds,
    pub slack: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            sim: SimConfig {
                duration_s: 600.0,
                ..SimConfig::default()
            },
            train_span_s: [10.0, 300.0],
            test_span_s: [300.0, 600.0],
            finetune_span_s: 60.0,
            model: ModelConfig::default(),
            train_windows: 6000,
            train: TrainConfig {
                epochs: 5,
                ..TrainConfig::default()
            },
            finetune_windows: 1000,
            finetune: FineTuneConfig {
                steps: 200,
                ..FineTuneConfig::default()
            },
            eval_segments: 300,
            segment_len: 64,
            norm_stride: 97,
            linreg_lags: 16,
            linreg_lambda: 1.0,
            ewma_gain: 0.125,
            thresholds: SharpChangeThresholds::default(),
            slack: 0,
            seed: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn check(&self) -> Result<(), ExperimentError> {
        let [a, b] = self.train_span_s;
        let [c, d] = self.test_span_s;
        if !(0.0 <= a && a < b && b <= c && c < d) {
            return Err(ExperimentError::Config(format!(
                "spans must satisfy 0 <= train start < train end <= test start < test end, got {:?} {:?}",
                self.train_span_s, self.test_span_s
            )));
        }
        if d > self.sim.duration_s {
            return Err(ExperimentError::Config(format!(
                "test span ends at {d} s but the simulation lasts {} s",
                self.sim.duration_s
            )));
        }
        if self.segment_len == 0 || self.eval_segments == 0 || self.train_windows == 0 {
            return Err(ExperimentError::Config(
                "segment_len, eval_segments and train_windows must be >= 1".into(),
            ));
        }
        self.model.check()?;
        Ok(())
    }
}

/// Packets sent in the last second are mostly un-ACKed when the run stops.
const TAIL_GUARD_S: f64 = 1.0;

/// First stream index sent at or after `t_s`.
pub fn index_at(stream: &[PacketRecord], t_s: f64) -> usize {
    stream.partition_point(|r| r.send_time_ms < t_s * 1000.0)
}

/// A simulated trace cut into the protocol's spans.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub trace: Trace,
    pub stream: Vec<PacketRecord>,
    pub train: Range<usize>,
    pub test: Range<usize>,
    pub norm: NormStats,
}

impl Prepared {
    pub fn from_trace(trace: Trace, cfg: &ExperimentConfig) -> Result<Self, ExperimentError> {
        let stream = monitored_stream(&trace);
        let last_s = stream.last().map_or(0.0, |r| r.send_time_ms / 1000.0);
        let end_s = cfg.test_span_s[1].min(last_s - TAIL_GUARD_S);
        let train = index_at(&stream, cfg.train_span_s[0])..index_at(&stream, cfg.train_span_s[1]);
        let test = index_at(&stream, cfg.test_span_s[0])..index_at(&stream, end_s);
        let need = cfg.model.window + cfg.model.horizon + 1;
        if train.len() < need || test.len() < need {
            return Err(ExperimentError::Config(format!(
                "spans hold {} train / {} test packets, need at least {need}",
                train.len(),
                test.len()
            )));
        }
        let norm = NormStats::fit(&stream[train.clone()], cfg.model.window, cfg.norm_stride);
        Ok(Prepared {
            trace,
            stream,
            train,
            test,
            norm,
        })
    }

    pub fn stream_index_at(&self, t_s: f64) -> usize {
        index_at(&self.stream, t_s)
    }
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, ExperimentError> {
    cfg.check()?;
    let (trace, _) = run_simulation_with_report(&cfg.sim, None)?;
    Prepared::from_trace(trace, cfg)
}

/// `n` uniform bases in `range` whose `horizon` targets stay inside it.
pub fn sample_bases(range: Range<usize>, n: usize, horizon: usize, seed: u64) -> Vec<usize> {
    if range.end <= range.start + horizon + 1 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hi = range.end - horizon;
    (0..n).map(|_| rng.random_range(range.start..hi)).collect()
}

pub fn train_model(
    prep: &Prepared,
    cfg: &ExperimentConfig,
    horizon: usize,
    loss: LossConfig,
) -> Result<(ModelParams, TrainReport), ExperimentError> {
    let mc = ModelConfig { horizon, ..cfg.model };
    let bases = sample_bases(prep.train.clone(), cfg.train_windows, horizon, cfg.seed);
    let data = Dataset::from_bases(&prep.stream, &bases, mc.window, horizon, Visibility::AsRecorded);
    let init = ModelParams::init(mc, prep.norm.clone(), cfg.seed)?;
    let tc = TrainConfig {
        loss,
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    Ok(train(init, &data, &tc)?)
}

/// Head-only fine-tuning on the span that ends at `at_s`.
pub fn fine_tune_at(
    model: ModelParams,
    prep: &Prepared,
    cfg: &ExperimentConfig,
    at_s: f64,
) -> Result<ModelParams, ExperimentError> {
    let range = prep.stream_index_at(at_s - cfg.finetune_span_s)..prep.stream_index_at(at_s);
    let h = model.config.horizon;
    let bases = sample_bases(range, cfg.finetune_windows, h, cfg.seed ^ at_s.to_bits());
    let data = Dataset::from_bases(&prep.stream, &bases, model.config.window, h, Visibility::AsRecorded);
    let fc = FineTuneConfig {
        seed: cfg.seed,
        ..cfg.finetune.clone()
    };
    Ok(fine_tune(model, &data, &fc)?)
}

/// Scored batch bases over the test span. Using a common segment length
/// keeps every horizon dividing it on the same target packets.
pub fn test_bases(prep: &Prepared, cfg: &ExperimentConfig, horizon: usize) -> Vec<usize> {
    segment_bases(prep.test.start, prep.test.end, horizon, cfg.eval_segments, cfg.segment_len)
}

pub fn evaluate_on(
    prep: &Prepared,
    cfg: &ExperimentConfig,
    predictor: &dyn LatencyPredictor,
    bases: &[usize],
) -> Result<PredictorEval, ExperimentError> {
    Ok(evaluate_predictor(
        &prep.stream,
        predictor,
        bases,
        Visibility::AsRecorded,
        &cfg.thresholds,
        cfg.slack,
    )?)
}

/// Ridge regression over the last `linreg_lags` packets, fitted on the
/// training windows whose targets are all ACKed.
pub fn fit_linreg_baseline(prep: &Prepared, cfg: &ExperimentConfig, horizon: usize) -> Result<LinRegWindowModel, ExperimentError> {
    let bases = sample_bases(prep.train.clone(), cfg.train_windows, horizon, cfg.seed);
    let data = Dataset::from_bases(&prep.stream, &bases, cfg.model.window, horizon, Visibility::AsRecorded);
    let (w, t): (Vec<_>, Vec<_>) = data
        .samples
        .into_iter()
        .filter(|s| s.targets.iter().all(Option::is_some))
        .map(|s| (s.window, s.targets.into_iter().flatten().collect::<Vec<f64>>()))
        .unzip();
    Ok(fit_linreg(&w, &t, cfg.linreg_lags, cfg.linreg_lambda, &prep.norm)?)
}

/// The three reference predictors for one horizon.
pub fn baselines(prep: &Prepared, cfg: &ExperimentConfig, horizon: usize) -> Result<Vec<Box<dyn LatencyPredictor>>, ExperimentError> {
    let w = cfg.model.window;
    Ok(vec![
        Box::new(LastValue { horizon, window: w }),
        Box::new(Ewma {
            gain: cfg.ewma_gain,
            horizon,
            window: w,
        }),
        Box::new(fit_linreg_baseline(prep, cfg, horizon)?),
    ])
}

/// Score with periodic fine-tuning every `interval_s` over the test span.
/// Each update starts from the previous model and uses the preceding
/// `finetune_span_s`; batches are scored by the model in force at their base.
pub fn evaluate_with_finetune_interval(
    prep: &Prepared,
    cfg: &ExperimentConfig,
    model: &ModelParams,
    interval_s: f64,
) -> Result<PredictorEval, ExperimentError> {
    if !(interval_s.is_finite() && interval_s > 0.0) {
        return Err(ExperimentError::Config(format!("fine-tune interval {interval_s} must be > 0")));
    }
    let bases = test_bases(prep, cfg, model.config.horizon);
    let [start, end] = cfg.test_span_s;
    let mut current = model.clone();
    let mut parts = Vec::new();
    let mut k = 0u32;
    loop {
        let at = start + k as f64 * interval_s;
        if at >= end {
            break;
        }
        current = fine_tune_at(current, prep, cfg, at)?;
        let lo = prep.stream_index_at(at);
        let hi = prep.stream_index_at(at + interval_s);
        let mine: Vec<usize> = bases.iter().copied().filter(|&b| b >= lo && b < hi).collect();
        if !mine.is_empty() {
            parts.push(evaluate_on(prep, cfg, &current, &mine)?);
        }
        k += 1;
    }
    Ok(merge_evals(&parts))
}

pub fn merge_evals(parts: &[PredictorEval]) -> PredictorEval {
    let mut out = PredictorEval::default();
    let (mut t, mut p, mut m) = (0, 0, 0);
    let mut sq = 0.0;
    for e in parts {
        t += e.score.true_count;
        p += e.score.predicted_count;
        m += e.score.matched_count;
        out.sharp_sse += e.sharp_sse;
        out.sharp_count += e.sharp_count;
        sq += e.mse * e.targets as f64;
        out.targets += e.targets;
    }
    out.score = super::ChangeScore::from_counts(t, p, m);
    out.mse = if out.targets == 0 { 0.0 } else { sq / out.targets as f64 };
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    LossFunction,
    FinetuneInterval,
    BatchSize,
}

impl std::str::FromStr for AblationKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.replace('-', "_").as_str() {
            "loss_function" | "loss" => Ok(AblationKind::LossFunction),
            "finetune_interval" | "interval" => Ok(AblationKind::FinetuneInterval),
            "batch_size" | "batch" => Ok(AblationKind::BatchSize),
            _ => Err(format!("unknown ablation {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationGrid {
    pub finetune_intervals_min: Vec<f64>,
    pub batch_sizes: Vec<usize>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            finetune_intervals_min: vec![0.5, 1.0, 2.0, 5.0, 10.0],
            batch_sizes: vec![1, 2, 4, 8, 16, 32],
        }
    }
}

/// One result row. Metrics are empty when the cell failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: String,
    pub setting: String,
    pub status: String,
    pub f1: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub true_events: Option<usize>,
    pub predicted_events: Option<usize>,
    pub mse_on_sharp_ms2: Option<f64>,
}

impl AblationRow {
    fn new(kind: AblationKind, setting: String, r: Result<PredictorEval, ExperimentError>) -> Self {
        let ablation = serde_json::to_value(kind)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        match r {
            Ok(e) => AblationRow {
                ablation,
                setting,
                status: "ok".into(),
                f1: Some(e.score.f1),
                precision: Some(e.score.precision),
                recall: Some(e.score.recall),
                true_events: Some(e.score.true_count),
                predicted_events: Some(e.score.predicted_count),
                mse_on_sharp_ms2: e.mse_on_sharp(),
            },
            Err(err) => AblationRow {
                ablation,
                setting,
                status: format!("failed: {err}"),
                f1: None,
                precision: None,
                recall: None,
                true_events: None,
                predicted_events: None,
                mse_on_sharp_ms2: None,
            },
        }
    }
}

/// Run one ablation on the experiment's environment. Failed cells become
/// rows with a `failed` status.
pub fn run_ablation(kind: AblationKind, cfg: &ExperimentConfig, grid: &AblationGrid) -> Result<Vec<AblationRow>, ExperimentError> {
    let prep = prepare(cfg)?;
    let mut rows = Vec::new();
    match kind {
        AblationKind::LossFunction => {
            for (name, loss) in [("mse", LossConfig::mse()), ("change_point", cfg.train.loss)] {
                let r = train_model(&prep, cfg, cfg.model.horizon, loss)
                    .and_then(|(m, _)| evaluate_on(&prep, cfg, &m, &test_bases(&prep, cfg, cfg.model.horizon)));
                rows.push(AblationRow::new(kind, name.into(), r));
            }
        }
        AblationKind::FinetuneInterval => {
            let (model, _) = train_model(&prep, cfg, cfg.model.horizon, cfg.train.loss)?;
            for &m in &grid.finetune_intervals_min {
                let r = evaluate_with_finetune_interval(&prep, cfg, &model, m * 60.0);
                rows.push(AblationRow::new(kind, format!("{m}"), r));
            }
        }
        AblationKind::BatchSize => {
            for &b in &grid.batch_sizes {
                let r = train_model(&prep, cfg, b, cfg.train.loss)
                    .and_then(|(m, _)| evaluate_on(&prep, cfg, &m, &test_bases(&prep, cfg, b)));
                rows.push(AblationRow::new(kind, format!("{b}"), r));
            }
        }
    }
    Ok(rows)
}

/// How the closed loop picks queues for the monitored ECT packets.
pub enum Policy<'a> {
    Default,
    /// Latencies of a recorded default run, by stream index.
    Oracle(Vec<Option<f64>>),
    Model(&'a dyn LatencyPredictor),
}

pub struct ClosedLoopRun {
    pub trace: Trace,
    pub report: SimReport,
    pub stats: Option<SelectorStats>,
}

pub fn run_closed_loop(
    sim: &SimConfig,
    policy: Policy<'_>,
    selector: &SelectorConfig,
    guard: bool,
) -> Result<ClosedLoopRun, ExperimentError> {
    let (trace, report, stats) = match policy {
        Policy::Default => {
            let mut s = DefaultSelector;
            let (t, r) = run_simulation_with_report(sim, Some(&mut s))?;
            (t, r, None)
        }
        Policy::Oracle(recorded) => {
            let mut s = BatchedSelector::new(*selector, OracleSource { recorded }, guard)?;
            let (t, r) = run_simulation_with_report(sim, Some(&mut s))?;
            (t, r, Some(s.stats))
        }
        Policy::Model(model) => {
            let mut s = BatchedSelector::new(*selector, ModelSource::new(model), guard)?;
            let (t, r) = run_simulation_with_report(sim, Some(&mut s))?;
            (t, r, Some(s.stats))
        }
    };
    Ok(ClosedLoopRun { trace, report, stats })
}

/// Monitored L4S-class flows of sender S1 (flow ids are assigned L4S first).
pub fn s1_l4s_filter(sim: &SimConfig) -> impl Fn(&PacketRecord) -> bool {
    let n = sim.n_l4s_flows;
    move |r: &PacketRecord| r.flow_id < n
}

/// Delivered-latency tail of the S1 L4S flows in one run.
pub fn s1_l4s_tail(sim: &SimConfig, trace: &Trace) -> Result<TailStats, ExperimentError> {
    let keep = s1_l4s_filter(sim);
    Ok(TailStats::from_values(&delivered_latencies(&trace.records, &keep))?)
}

pub fn recorded_latencies(trace: &Trace) -> Vec<Option<f64>> {
    monitored_stream(trace).iter().map(|r| r.latency_ms).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepDimension {
    Flows,
    QueueBdp,
    DelayMs,
    Cc,
}

impl SweepDimension {
    fn name(self) -> &'static str {
        match self {
            SweepDimension::Flows => "flows",
            SweepDimension::QueueBdp => "queue_bdp",
            SweepDimension::DelayMs => "delay_ms",
            SweepDimension::Cc => "cc",
        }
    }

    /// Apply one grid value. Flow counts keep the default 10:4 L4S/classic
    /// mix and the default aggregate offered load.
    pub fn apply(self, sim: &mut SimConfig, value: &str) -> Result<(), ExperimentError> {
        let num = || {
            value
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v > 0.0)
                .ok_or_else(|| ExperimentError::Config(format!("{} value {value:?} is not a positive number", self.name())))
        };
        match self {
            SweepDimension::Flows => {
                let n = num()?.round() as u32;
                if n < 2 {
                    return Err(ExperimentError::Config("flows must be >= 2".into()));
                }
                let base = SimConfig::default();
                let total_load = base.base_rate_mbps * (base.n_l4s_flows + base.n_classic_flows) as f64;
                let l4s = ((n as f64) * 10.0 / 14.0).round().clamp(1.0, n as f64 - 1.0) as u32;
                sim.n_l4s_flows = l4s;
                sim.n_classic_flows = n - l4s;
                sim.base_rate_mbps = total_load / n as f64;
            }
            SweepDimension::QueueBdp => sim.queue_capacity_bdp_multiple = num()?,
            SweepDimension::DelayMs => sim.propagation_delay_ms = num()?,
            SweepDimension::Cc => {
                sim.classic_cc = match value {
                    "cubic" => CcAlgorithm::CubicLike,
                    "bbr" => CcAlgorithm::BbrLike,
                    "dctcp" => CcAlgorithm::DctcpL4S,
                    _ => return Err(ExperimentError::Config(format!("unknown cc {value:?}"))),
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAxis {
    pub dimension: SweepDimension,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Transformer,
    LastValue,
    Ewma,
    Linreg,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Transformer => "transformer",
            ModelKind::LastValue => "last-value",
            ModelKind::Ewma => "ewma",
            ModelKind::Linreg => "linreg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub axes: Vec<SweepAxis>,
    pub models: Vec<ModelKind>,
    /// Also run each cell's environment in the L4S-selection topology and
    /// report the P99 reduction of the model-driven controller.
    pub closed_loop: bool,
    pub closed_loop_duration_s: f64,
    pub selector: SelectorConfig,
    pub experiment: ExperimentConfig,
}

impl Default for SweepSpec {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        SweepSpec {
            axes: vec![
                SweepAxis {
                    dimension: SweepDimension::Flows,
                    values: s(&["10", "20", "50", "100", "500"]),
                },
                SweepAxis {
                    dimension: SweepDimension::QueueBdp,
                    values: s(&["2", "5", "10", "15", "20"]),
                },
                SweepAxis {
                    dimension: SweepDimension::DelayMs,
                    values: s(&["20", "40", "100", "150", "200"]),
                },
                SweepAxis {
                    dimension: SweepDimension::Cc,
                    values: s(&["cubic", "bbr", "dctcp"]),
                },
            ],
            models: vec![ModelKind::Transformer, ModelKind::LastValue, ModelKind::Ewma, ModelKind::Linreg],
            closed_loop: true,
            closed_loop_duration_s: 60.0,
            selector: SelectorConfig::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub dimension: String,
    pub value: String,
    pub model: String,
    pub status: String,
    pub f1: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub true_events: Option<usize>,
    pub p99_reduction_pct: Option<f64>,
}

fn failed_row(dim: SweepDimension, value: &str, model: &str, err: &ExperimentError) -> SweepRow {
    SweepRow {
        dimension: dim.name().into(),
        value: value.into(),
        model: model.into(),
        status: format!("failed: {err}"),
        f1: None,
        precision: None,
        recall: None,
        true_events: None,
        p99_reduction_pct: None,
    }
}

fn sweep_cell(spec: &SweepSpec, dim: SweepDimension, value: &str) -> Vec<SweepRow> {
    let mut cfg = spec.experiment.clone();
    let names: Vec<&str> = spec.models.iter().map(|m| m.name()).collect();
    let fail_all = |e: ExperimentError| names.iter().map(|m| failed_row(dim, value, m, &e)).collect::<Vec<_>>();
    if let Err(e) = dim.apply(&mut cfg.sim, value) {
        return fail_all(e);
    }
    let prep = match prepare(&cfg) {
        Ok(p) => p,
        Err(e) => return fail_all(e),
    };
    let h = cfg.model.horizon;
    let bases = test_bases(&prep, &cfg, h);
    let loop_sim = SimConfig {
        topology: Topology::L4SSelection,
        n_l4s_flows: 6,
        n_classic_flows: 4,
        n_cross_flows: Some(10),
        duration_s: spec.closed_loop_duration_s,
        ..cfg.sim.clone()
    };
    let default_p99 = if spec.closed_loop {
        Some(run_closed_loop(&loop_sim, Policy::Default, &spec.selector, true).and_then(|r| s1_l4s_tail(&loop_sim, &r.trace)))
    } else {
        None
    };
    spec.models
        .iter()
        .map(|&kind| {
            let model: Result<Box<dyn LatencyPredictor>, ExperimentError> = match kind {
                ModelKind::Transformer => {
                    train_model(&prep, &cfg, h, cfg.train.loss).map(|(m, _)| Box::new(m) as Box<dyn LatencyPredictor>)
                }
                ModelKind::LastValue => Ok(Box::new(LastValue {
                    horizon: h,
                    window: cfg.model.window,
                })),
                ModelKind::Ewma => Ok(Box::new(Ewma {
                    gain: cfg.ewma_gain,
                    horizon: h,
                    window: cfg.model.window,
                })),
                ModelKind::Linreg => fit_linreg_baseline(&prep, &cfg, h).map(|m| Box::new(m) as Box<dyn LatencyPredictor>),
            };
            let row = model.and_then(|m| {
                let e = evaluate_on(&prep, &cfg, m.as_ref(), &bases)?;
                let p99 = match &default_p99 {
                    None => None,
                    Some(base) => {
                        let base = base.as_ref().map_err(|e| ExperimentError::Config(e.to_string()))?;
                        let run = run_closed_loop(&loop_sim, Policy::Model(m.as_ref()), &spec.selector, true)?;
                        let treat = s1_l4s_tail(&loop_sim, &run.trace)?;
                        Some(reduction_pct(base.p99, treat.p99))
                    }
                };
                Ok(SweepRow {
                    dimension: dim.name().into(),
                    value: value.into(),
                    model: kind.name().into(),
                    status: "ok".into(),
                    f1: Some(e.score.f1),
                    precision: Some(e.score.precision),
                    recall: Some(e.score.recall),
                    true_events: Some(e.score.true_count),
                    p99_reduction_pct: p99,
                })
            });
            row.unwrap_or_else(|e| failed_row(dim, value, kind.name(), &e))
        })
        .collect()
}

fn value_key(v: &str) -> (u8, f64, String) {
    match v.parse::<f64>() {
        Ok(x) => (0, x, String::new()),
        Err(_) => (1, 0.0, v.to_string()),
    }
}

/// Run every cell of the sweep on up to `jobs` threads. Rows come back
/// sorted by (dimension, value, model) whatever the completion order.
pub fn run_sensitivity(spec: &SweepSpec, jobs: usize) -> Vec<SweepRow> {
    let cells: Vec<(SweepDimension, String)> = spec
        .axes
        .iter()
        .flat_map(|a| a.values.iter().map(move |v| (a.dimension, v.clone())))
        .collect();
    let next = AtomicUsize::new(0);
    let rows = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, cells.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((dim, value)) = cells.get(i) else {
                    break;
                };
                let out = sweep_cell(spec, *dim, value);
                rows.lock().expect("sweep rows lock").extend(out);
            });
        }
    });
    let mut rows = rows.into_inner().expect("sweep rows lock");
    rows.sort_by(|a, b| {
        (a.dimension.as_str(), value_key(&a.value), a.model.as_str())
            .partial_cmp(&(b.dimension.as_str(), value_key(&b.value), b.model.as_str()))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    rows
}

/// CSV with a header row and the fields in declaration order.
pub fn write_rows_csv<T: Serialize, W: std::io::Write>(rows: &[T], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
