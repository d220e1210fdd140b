//! Fit-quality metrics, parity data and cross-validation.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::calibration::{
    fit, CalibrationError, Experiment, FitReport, Observable, OptimizerSettings,
};
use crate::kinetics::{DecompositionMode, KineticParameters};
use crate::pfr::{self, SolverOptions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("metric needs at least {needed} values, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("prediction and measurement lists differ in length ({predictions} vs {measurements})")]
    LengthMismatch {
        predictions: usize,
        measurements: usize,
    },
    #[error("R² is undefined for measurements without variance")]
    ZeroVariance,
}

#[derive(Debug, Error)]
pub enum ValidationError {
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error("cross-validation needs at least 2 experiments, got {0}")]
    TooFewExperiments(usize),
    #[error("invalid fold count {folds} for {experiments} experiments")]
    InvalidFolds { folds: usize, experiments: usize },
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn check_lengths(predictions: &[f64], measurements: &[f64]) -> Result<(), MetricError> {
    if predictions.len() != measurements.len() {
        return Err(MetricError::LengthMismatch {
            predictions: predictions.len(),
            measurements: measurements.len(),
        });
    }
    Ok(())
}

/// Coefficient of determination `1 − SS_res / SS_tot`.
pub fn r_squared(predictions: &[f64], measurements: &[f64]) -> Result<f64, MetricError> {
    check_lengths(predictions, measurements)?;
    if measurements.len() < 2 {
        return Err(MetricError::TooFew {
            needed: 2,
            got: measurements.len(),
        });
    }
    let mean = measurements.iter().sum::<f64>() / measurements.len() as f64;
    let ss_tot: f64 = measurements.iter().map(|m| (m - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(MetricError::ZeroVariance);
    }
    let ss_res: f64 = predictions
        .iter()
        .zip(measurements)
        .map(|(p, m)| (p - m).powi(2))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Mean absolute error.
pub fn mae(predictions: &[f64], measurements: &[f64]) -> Result<f64, MetricError> {
    check_lengths(predictions, measurements)?;
    if measurements.is_empty() {
        return Err(MetricError::TooFew { needed: 1, got: 0 });
    }
    let sum: f64 = predictions
        .iter()
        .zip(measurements)
        .map(|(p, m)| (p - m).abs())
        .sum();
    Ok(sum / measurements.len() as f64)
}

/// One measured value and its simulated counterpart.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub experiment: String,
    pub kind: Observable,
    pub measured: f64,
    pub simulated: f64,
}

/// Simulates every experiment and pairs each measurement with its model
/// value. Heats are compared per zone when the record has zone data and as
/// totals otherwise.
pub fn predictions(
    params: &KineticParameters,
    experiments: &[Experiment],
    solver: &SolverOptions,
) -> Result<Vec<Prediction>, CalibrationError> {
    let per_experiment: Vec<Result<Vec<Prediction>, CalibrationError>> = experiments
        .par_iter()
        .map(|e| {
            let (outcome, _) = pfr::simulate(&e.inputs, params, solver).map_err(|source| {
                CalibrationError::Solve {
                    experiment: e.id.clone(),
                    source,
                }
            })?;
            let o = outcome.observables(params);
            let pair = |kind, measured, simulated| Prediction {
                experiment: e.id.clone(),
                kind,
                measured,
                simulated,
            };
            let mut out = Vec::new();
            if let Some(b) = e.record.band_area {
                out.push(pair(Observable::BandArea, b, o.band_area));
            }
            if let Some(q) = &e.record.zone_heats {
                if q.len() == 1 {
                    out.push(pair(Observable::Heat, q[0], o.total_heat()));
                } else if q.len() == o.zone_heats.len() {
                    out.extend(
                        q.iter()
                            .zip(&o.zone_heats)
                            .map(|(m, s)| pair(Observable::Heat, *m, *s)),
                    );
                } else {
                    return Err(CalibrationError::Data(format!(
                        "experiment {} has {} zone heats but the reactor has {} zones",
                        e.id,
                        q.len(),
                        o.zone_heats.len()
                    )));
                }
            }
            if let Some(g) = e.record.gas_flow_rate {
                out.push(pair(Observable::GasFlow, g, o.gas_flow));
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::new();
    for p in per_experiment {
        all.extend(p?);
    }
    Ok(all)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObservableMetrics {
    pub count: usize,
    /// `None` with fewer than two values or no measurement variance.
    pub r_squared: Option<f64>,
    pub mae: f64,
}

/// Metrics per observable; `None` where no data of that kind exist.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricSet {
    pub band_area: Option<ObservableMetrics>,
    pub heat: Option<ObservableMetrics>,
    pub gas_flow: Option<ObservableMetrics>,
}

impl MetricSet {
    pub fn from_predictions(predictions: &[Prediction]) -> Self {
        let of = |kind: Observable| {
            let (sim, meas): (Vec<f64>, Vec<f64>) = predictions
                .iter()
                .filter(|p| p.kind == kind)
                .map(|p| (p.simulated, p.measured))
                .unzip();
            if meas.is_empty() {
                return None;
            }
            Some(ObservableMetrics {
                count: meas.len(),
                r_squared: r_squared(&sim, &meas).ok(),
                mae: mae(&sim, &meas).expect("non-empty paired lists"),
            })
        };
        Self {
            band_area: of(Observable::BandArea),
            heat: of(Observable::Heat),
            gas_flow: of(Observable::GasFlow),
        }
    }

    pub fn get(&self, kind: Observable) -> Option<&ObservableMetrics> {
        match kind {
            Observable::BandArea => self.band_area.as_ref(),
            Observable::Heat => self.heat.as_ref(),
            Observable::GasFlow => self.gas_flow.as_ref(),
        }
    }
}

pub const PARITY_HEADER: &str = "experiment_id,kind,measured,simulated";

pub fn write_parity<W: Write>(mut out: W, predictions: &[Prediction]) -> std::io::Result<()> {
    writeln!(out, "{PARITY_HEADER}")?;
    for p in predictions {
        writeln!(
            out,
            "{},{},{},{}",
            p.experiment, p.kind, p.measured, p.simulated
        )?;
    }
    Ok(())
}

/// Simulates all experiments with `params` and writes the parity CSV.
pub fn parity_export(
    params: &KineticParameters,
    experiments: &[Experiment],
    path: impl AsRef<Path>,
) -> Result<Vec<Prediction>, ValidationError> {
    let path = path.as_ref();
    let preds = predictions(params, experiments, &SolverOptions::default())?;
    let io_err = |source| ValidationError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = std::io::BufWriter::new(file);
    write_parity(&mut w, &preds).map_err(io_err)?;
    w.flush().map_err(io_err)?;
    Ok(preds)
}

/// How experiments are split into test sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldScheme {
    /// One experiment per fold.
    LeaveOneOut,
    /// `k` folds, experiment `i` in fold `i mod k`.
    Grouped(usize),
}

/// Test-set indices of each fold.
pub fn fold_assignments(
    n_experiments: usize,
    scheme: FoldScheme,
) -> Result<Vec<Vec<usize>>, ValidationError> {
    let k = match scheme {
        FoldScheme::LeaveOneOut => n_experiments,
        FoldScheme::Grouped(k) => k,
    };
    if k < 2 || k > n_experiments {
        return Err(ValidationError::InvalidFolds {
            folds: k,
            experiments: n_experiments,
        });
    }
    let mut folds = vec![Vec::new(); k];
    for i in 0..n_experiments {
        folds[i % k].push(i);
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossValSettings {
    /// Settings of every fold's fit; each fold offsets the seed by its index.
    pub optimizer: OptimizerSettings,
    pub folds: FoldScheme,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub test_experiments: Vec<String>,
    /// Observables measured in the test set.
    pub observables: Vec<Observable>,
    pub parameters: Option<Vec<f64>>,
    pub converged: bool,
    pub error: Option<String>,
    /// Indexed by [`Observable::index`].
    pub train_mae: [Option<f64>; 3],
    pub test_mae: [Option<f64>; 3],
    pub test_predictions: Vec<Prediction>,
}

impl FoldResult {
    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossValReport {
    pub mode: DecompositionMode,
    pub settings: CrossValSettings,
    pub folds: Vec<FoldResult>,
    /// Mean of the per-fold training MAE.
    pub train_mae: [Option<f64>; 3],
    /// MAE over all held-out predictions.
    pub test_mae: [Option<f64>; 3],
    pub failed_folds: usize,
}

impl CrossValReport {
    pub fn is_complete(&self) -> bool {
        self.failed_folds == 0
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cross-validation report serializes")
    }
}

pub const CROSSVAL_HEADER: &str = "fold,observable,train_mae,test_mae,converged";

/// One row per fold. `observable` lists the observables of the test set
/// joined by `+`; the MAE columns follow the same order.
pub fn write_crossval<W: Write>(mut out: W, report: &CrossValReport) -> std::io::Result<()> {
    writeln!(out, "{CROSSVAL_HEADER}")?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for f in &report.folds {
        let kinds: Vec<&str> = f.observables.iter().map(|o| o.as_str()).collect();
        let train: Vec<String> = f
            .observables
            .iter()
            .map(|o| fmt(f.train_mae[o.index()]))
            .collect();
        let test: Vec<String> = f
            .observables
            .iter()
            .map(|o| fmt(f.test_mae[o.index()]))
            .collect();
        writeln!(
            out,
            "{},{},{},{},{}",
            f.fold,
            kinds.join("+"),
            train.join("+"),
            test.join("+"),
            f.converged
        )?;
    }
    Ok(())
}

fn mae_by_kind(predictions: &[Prediction]) -> [Option<f64>; 3] {
    let m = MetricSet::from_predictions(predictions);
    Observable::ALL.map(|k| m.get(k).map(|x| x.mae))
}

fn run_fold(
    fold: usize,
    test: &[usize],
    experiments: &[Experiment],
    settings: &CrossValSettings,
    mode: DecompositionMode,
) -> FoldResult {
    let test_set: Vec<Experiment> = test.iter().map(|&i| experiments[i].clone()).collect();
    let train_set: Vec<Experiment> = experiments
        .iter()
        .enumerate()
        .filter(|(i, _)| !test.contains(i))
        .map(|(_, e)| e.clone())
        .collect();
    let observables: Vec<Observable> = Observable::ALL
        .into_iter()
        .filter(|k| test_set.iter().any(|e| e.has(*k)))
        .collect();
    let mut result = FoldResult {
        fold,
        test_experiments: test_set.iter().map(|e| e.id.clone()).collect(),
        observables,
        parameters: None,
        converged: false,
        error: None,
        train_mae: [None; 3],
        test_mae: [None; 3],
        test_predictions: Vec::new(),
    };

    let mut optimizer = settings.optimizer.clone();
    optimizer.seed = optimizer.seed.wrapping_add((fold as u64) << 32);
    // a term the training set cannot inform is dropped for this fold
    for k in Observable::ALL {
        if !train_set.iter().any(|e| e.has(k)) {
            optimizer.weights[k.index()] = 0.0;
        }
    }
    let report: FitReport = match fit(&train_set, &optimizer, mode) {
        Ok(r) => r,
        Err(e) => {
            result.error = Some(e.to_string());
            return result;
        }
    };
    result.converged = report.converged;
    result.parameters = Some(report.parameters.clone());
    result.train_mae = Observable::ALL.map(|k| report.metrics.get(k).map(|m| m.mae));
    match predictions(&report.kinetics, &test_set, &SolverOptions::default()) {
        Ok(p) => {
            result.test_mae = mae_by_kind(&p);
            result.test_predictions = p;
        }
        Err(e) => result.error = Some(e.to_string()),
    }
    result
}

/// Refits on every training split and evaluates the held-out experiments.
/// Folds that fail are kept in the report and excluded from the aggregates.
pub fn cross_validate(
    experiments: &[Experiment],
    settings: &CrossValSettings,
    mode: DecompositionMode,
) -> Result<CrossValReport, ValidationError> {
    if experiments.len() < 2 {
        return Err(ValidationError::TooFewExperiments(experiments.len()));
    }
    let assignments = fold_assignments(experiments.len(), settings.folds)?;
    let folds: Vec<FoldResult> = assignments
        .par_iter()
        .enumerate()
        .map(|(i, test)| {
            let r = run_fold(i, test, experiments, settings, mode);
            match &r.error {
                None => log::info!("fold {i}: test {:?}", r.test_mae),
                Some(e) => log::warn!("fold {i} failed: {e}"),
            }
            r
        })
        .collect();

    let ok: Vec<&FoldResult> = folds.iter().filter(|f| f.succeeded()).collect();
    let mut train_mae = [None; 3];
    for k in Observable::ALL {
        let vals: Vec<f64> = ok.iter().filter_map(|f| f.train_mae[k.index()]).collect();
        if !vals.is_empty() {
            train_mae[k.index()] = Some(vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    let pooled: Vec<Prediction> = ok
        .iter()
        .flat_map(|f| f.test_predictions.iter().cloned())
        .collect();
    Ok(CrossValReport {
        mode,
        settings: settings.clone(),
        failed_folds: folds.len() - ok.len(),
        test_mae: mae_by_kind(&pooled),
        train_mae,
        folds,
    })
}
