//! Reference predictors sharing the model's window → B-vector interface.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::predictor::{predict, ContextWindow, ModelParams, NormStats, PredictorError, N_FEATURES};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum BaselineError {
    #[error("window has no ACKed row")]
    NoAckedRow,
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("normal equations are singular; use a ridge factor > 0")]
    Singular,
    #[error("shape: {0}")]
    Shape(String),
}

/// Anything that maps a context window to the next `horizon()` latencies.
pub trait LatencyPredictor {
    fn name(&self) -> &str;
    fn horizon(&self) -> usize;
    fn window(&self) -> usize;
    fn predict_window(&self, window: &ContextWindow) -> Result<Vec<f64>, PredictorError>;
}

impl LatencyPredictor for ModelParams {
    fn name(&self) -> &str {
        "transformer"
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn window(&self) -> usize {
        self.config.window
    }

    fn predict_window(&self, window: &ContextWindow) -> Result<Vec<f64>, PredictorError> {
        Ok(predict(self, window, 0)?.predicted_latency_ms)
    }
}

fn to_predictor_err(e: BaselineError) -> PredictorError {
    PredictorError::Config(e.to_string())
}

pub fn predict_last_value(window: &ContextWindow, horizon: usize) -> Result<Vec<f64>, BaselineError> {
    let last = window.acked_latencies().last().ok_or(BaselineError::NoAckedRow)?;
    Ok(vec![last; horizon])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EwmaState {
    pub level: f64,
    pub gain: f64,
}

impl EwmaState {
    pub fn new(level: f64, gain: f64) -> Result<Self, BaselineError> {
        if !(gain > 0.0 && gain <= 1.0) {
            return Err(BaselineError::Invalid(format!("EWMA gain {gain} not in (0, 1]")));
        }
        Ok(EwmaState { level, gain })
    }

    pub fn update(&mut self, x: f64) {
        self.level = (1.0 - self.gain) * self.level + self.gain * x;
    }
}

/// Fold the window's ACKed latencies into `state` and return `horizon`
/// copies of the resulting level.
pub fn predict_ewma(state: &mut EwmaState, window: &ContextWindow, horizon: usize) -> Vec<f64> {
    for x in window.acked_latencies() {
        state.update(x);
    }
    vec![state.level; horizon]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LastValue {
    pub horizon: usize,
    pub window: usize,
}

impl LatencyPredictor for LastValue {
    fn name(&self) -> &str {
        "last-value"
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn window(&self) -> usize {
        self.window
    }
    fn predict_window(&self, window: &ContextWindow) -> Result<Vec<f64>, PredictorError> {
        predict_last_value(window, self.horizon).map_err(to_predictor_err)
    }
}

/// Stateless EWMA predictor: the level starts at the window's first ACKed
/// latency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ewma {
    pub gain: f64,
    pub horizon: usize,
    pub window: usize,
}

impl LatencyPredictor for Ewma {
    fn name(&self) -> &str {
        "ewma"
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn window(&self) -> usize {
        self.window
    }
    fn predict_window(&self, window: &ContextWindow) -> Result<Vec<f64>, PredictorError> {
        let first = window
            .acked_latencies()
            .next()
            .ok_or_else(|| to_predictor_err(BaselineError::NoAckedRow))?;
        let mut state = EwmaState::new(first, self.gain).map_err(to_predictor_err)?;
        Ok(predict_ewma(&mut state, window, self.horizon))
    }
}

/// Ridge regression from the last `lags` normalized feature rows (plus an
/// intercept) to the next `horizon` latencies in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinRegWindowModel {
    pub lags: usize,
    pub horizon: usize,
    pub window: usize,
    pub lambda: f64,
    pub norm: NormStats,
    /// `(lags·F + 1) × horizon`, row-major; the last row is the intercept.
    pub coefficients: Vec<f64>,
}

impl LinRegWindowModel {
    pub fn n_inputs(&self) -> usize {
        self.lags * N_FEATURES + 1
    }

    fn design_row(lags: usize, norm: &NormStats, window: &ContextWindow) -> Result<Vec<f64>, BaselineError> {
        if window.len() < lags {
            return Err(BaselineError::Shape(format!("window {} shorter than {lags} lags", window.len())));
        }
        let m = window.to_matrix(norm);
        let mut row = m[(window.len() - lags) * N_FEATURES..].to_vec();
        row.push(1.0);
        Ok(row)
    }
}

/// Solve `(XᵀX + λI) β = XᵀY` for the window features and targets.
pub fn fit_linreg(
    windows: &[ContextWindow],
    targets: &[Vec<f64>],
    lags: usize,
    lambda: f64,
    norm: &NormStats,
) -> Result<LinRegWindowModel, BaselineError> {
    if windows.is_empty() || windows.len() != targets.len() {
        return Err(BaselineError::Shape(format!(
            "{} windows vs {} target vectors",
            windows.len(),
            targets.len()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) || lags == 0 {
        return Err(BaselineError::Invalid(format!("lambda {lambda}, lags {lags}")));
    }
    let horizon = targets[0].len();
    if horizon == 0 || targets.iter().any(|t| t.len() != horizon) {
        return Err(BaselineError::Shape("target vectors must share a nonzero length".into()));
    }
    let p = lags * N_FEATURES + 1;
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DMatrix::<f64>::zeros(p, horizon);
    for (w, t) in windows.iter().zip(targets) {
        let x = DVector::from_vec(LinRegWindowModel::design_row(lags, norm, w)?);
        xtx += &x * x.transpose();
        xty += &x * DVector::from_column_slice(t).transpose();
    }
    for i in 0..p {
        xtx[(i, i)] += lambda;
    }
    let beta = if lambda > 0.0 {
        xtx.cholesky().ok_or(BaselineError::Singular)?.solve(&xty)
    } else {
        let lu = xtx.clone().full_piv_lu();
        let max_diag = (0..p).map(|i| xtx[(i, i)].abs()).fold(0.0, f64::max);
        let min_pivot = lu.u().diagonal().iter().map(|d| d.abs()).fold(f64::INFINITY, f64::min);
        if !(min_pivot > 1e-12 * max_diag.max(1.0)) {
            return Err(BaselineError::Singular);
        }
        lu.solve(&xty).ok_or(BaselineError::Singular)?
    };
    let mut coefficients = Vec::with_capacity(p * horizon);
    for i in 0..p {
        for j in 0..horizon {
            coefficients.push(beta[(i, j)]);
        }
    }
    if coefficients.iter().any(|c| !c.is_finite()) {
        return Err(BaselineError::Singular);
    }
    Ok(LinRegWindowModel {
        lags,
        horizon,
        window: windows[0].len(),
        lambda,
        norm: norm.clone(),
        coefficients,
    })
}

pub fn predict_linreg(model: &LinRegWindowModel, window: &ContextWindow) -> Result<Vec<f64>, BaselineError> {
    let x = LinRegWindowModel::design_row(model.lags, &model.norm, window)?;
    Ok((0..model.horizon)
        .map(|j| {
            x.iter()
                .enumerate()
                .map(|(i, xi)| xi * model.coefficients[i * model.horizon + j])
                .sum()
        })
        .collect())
}

impl LatencyPredictor for LinRegWindowModel {
    fn name(&self) -> &str {
        "linreg"
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn window(&self) -> usize {
        self.window
    }
    fn predict_window(&self, window: &ContextWindow) -> Result<Vec<f64>, PredictorError> {
        predict_linreg(self, window).map_err(to_predictor_err)
    }
}
