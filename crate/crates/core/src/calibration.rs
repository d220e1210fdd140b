//! Weighted least-squares identification of the kinetic parameters.
//!
//! The three cost terms (band area, zone heats, gas flow) are each
//! normalized by half the sum of squared measurements and combined with a
//! weight vector λ:
//!
//! ```text
//! J = Σ_k λ_k · J_k / J_k0,    J_k = ½ Σ (simulated − measured)²
//! ```
//!
//! `J` is minimized with a bound-constrained Levenberg–Marquardt method on
//! the residual vector `r̃ = sqrt(λ_k / J_k0) · r`, started from several
//! random points.

pub mod lm;

use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dataio::{derive_inputs, DataError, ExperimentRecord, ReactorConfig, SimulationInputs};
use crate::kinetics::{
    ArrheniusParams, DecompositionMode, DecompositionModel, InputScaling, KineticParameters,
    NeuralDecomposition, HIDDEN, INPUTS, NN_PARAM_COUNT,
};
use crate::pfr::{self, KineticOutcome, SolveError, SolverOptions, StepGrid};
use crate::validation::{self, MetricSet};

pub use lm::Termination;

/// Measured quantity kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    BandArea,
    Heat,
    GasFlow,
}

impl Observable {
    pub const ALL: [Observable; 3] = [Observable::BandArea, Observable::Heat, Observable::GasFlow];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Observable::BandArea => "band_area",
            Observable::Heat => "heat",
            Observable::GasFlow => "gas_flow",
        }
    }
}

impl std::fmt::Display for Observable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A record together with its derived simulation inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    /// `mixer-01`, `calorimeter-17`, ...
    pub id: String,
    pub record: ExperimentRecord,
    pub inputs: SimulationInputs,
}

impl Experiment {
    pub fn new(
        id: impl Into<String>,
        record: ExperimentRecord,
        reactor: &ReactorConfig,
    ) -> Result<Self, DataError> {
        let inputs = derive_inputs(&record, reactor)?;
        Ok(Self {
            id: id.into(),
            record,
            inputs,
        })
    }

    pub fn has(&self, kind: Observable) -> bool {
        match kind {
            Observable::BandArea => self.record.band_area.is_some(),
            Observable::Heat => self.record.zone_heats.is_some(),
            Observable::GasFlow => self.record.gas_flow_rate.is_some(),
        }
    }
}

/// Wraps records of one setup, numbering them `<setup>-NN` from 1.
pub fn experiments_from_records(
    records: &[ExperimentRecord],
    reactor: &ReactorConfig,
) -> Result<Vec<Experiment>, DataError> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Experiment::new(
                format!("{}-{:02}", r.setup.as_str(), i + 1),
                r.clone(),
                reactor,
            )
        })
        .collect()
}

/// The 57 bundled experiments: mixer first, then calorimeter.
pub fn bundled_experiments() -> Vec<Experiment> {
    use crate::dataio::bundled;
    let mut all = experiments_from_records(&bundled::mixer_records(), &bundled::mixer_reactor())
        .expect("bundled mixer data are consistent");
    all.extend(
        experiments_from_records(
            &bundled::calorimeter_records(),
            &bundled::calorimeter_reactor(),
        )
        .expect("bundled calorimeter data are consistent"),
    );
    all
}

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("{0}")]
    InvalidSettings(String),
    #[error("{0}")]
    Data(String),
    #[error("experiment {experiment}: {source}")]
    Solve {
        experiment: String,
        #[source]
        source: SolveError,
    },
    #[error("all {starts} starts failed to reach a finite cost")]
    AllStartsFailed { starts: usize },
}

/// Packing of [`KineticParameters`] into a flat vector with bounds.
///
/// Neural mode: `[log_a1, ea1, gamma, dh1, dh2, W1 (row-major), b1, W2, b2]`.
/// Arrhenius mode: `[log_a1, ea1, log_a2, ea2, gamma, dh1, dh2]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParameterLayout {
    pub mode: DecompositionMode,
    pub input_scaling: InputScaling,
}

impl ParameterLayout {
    pub fn new(mode: DecompositionMode) -> Self {
        Self {
            mode,
            input_scaling: InputScaling::default(),
        }
    }

    pub fn dim(&self) -> usize {
        match self.mode {
            DecompositionMode::Neural => 5 + NN_PARAM_COUNT,
            DecompositionMode::Arrhenius => 7,
        }
    }

    pub fn gamma_index(&self) -> usize {
        match self.mode {
            DecompositionMode::Neural => 2,
            DecompositionMode::Arrhenius => 4,
        }
    }

    /// Indices of ΔH₁ and ΔH₂.
    pub fn enthalpy_indices(&self) -> [usize; 2] {
        let g = self.gamma_index();
        [g + 1, g + 2]
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = vec!["log_a1".into(), "ea1".into()];
        match self.mode {
            DecompositionMode::Arrhenius => {
                names.extend(["log_a2", "ea2", "gamma", "dh1", "dh2"].map(String::from));
            }
            DecompositionMode::Neural => {
                names.extend(["gamma", "dh1", "dh2"].map(String::from));
                for j in 0..HIDDEN {
                    for i in 0..INPUTS {
                        names.push(format!("w1_{j}{i}"));
                    }
                }
                names.extend((0..HIDDEN).map(|j| format!("b1_{j}")));
                names.extend((0..HIDDEN).map(|j| format!("w2_{j}")));
                names.push("b2".into());
            }
        }
        names
    }

    /// Lower and upper bounds.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![0.0, 0.0];
        let mut hi = vec![40.0, 2.0e5];
        let tail_lo = [1.0, 0.0, 0.0];
        let tail_hi = [1.0e4, 5.0e5, 5.0e5];
        match self.mode {
            DecompositionMode::Arrhenius => {
                lo.extend([-20.0, 0.0]);
                hi.extend([40.0, 2.0e5]);
                lo.extend(tail_lo);
                hi.extend(tail_hi);
            }
            DecompositionMode::Neural => {
                lo.extend(tail_lo);
                hi.extend(tail_hi);
                lo.extend([-10.0; NN_PARAM_COUNT]);
                hi.extend([10.0; NN_PARAM_COUNT]);
            }
        }
        (lo, hi)
    }

    pub fn pack(&self, params: &KineticParameters) -> Result<Vec<f64>, CalibrationError> {
        let mut x = vec![params.synthesis.log_a, params.synthesis.activation_energy];
        let tail = [
            params.gamma,
            params.enthalpy_synthesis,
            params.enthalpy_decomposition,
        ];
        match (&params.decomposition, self.mode) {
            (DecompositionModel::Arrhenius(p), DecompositionMode::Arrhenius) => {
                x.extend([p.log_a, p.activation_energy]);
                x.extend(tail);
            }
            (DecompositionModel::Neural(nn), DecompositionMode::Neural) => {
                x.extend(tail);
                x.extend(nn.to_flat());
            }
            (model, mode) => {
                return Err(CalibrationError::InvalidSettings(format!(
                    "parameters are in {} mode, layout expects {mode}",
                    model.mode()
                )))
            }
        }
        Ok(x)
    }

    pub fn unpack(&self, x: &[f64]) -> KineticParameters {
        assert_eq!(x.len(), self.dim(), "parameter vector length");
        let synthesis = ArrheniusParams {
            log_a: x[0],
            activation_energy: x[1],
        };
        let g = self.gamma_index();
        let decomposition = match self.mode {
            DecompositionMode::Arrhenius => DecompositionModel::Arrhenius(ArrheniusParams {
                log_a: x[2],
                activation_energy: x[3],
            }),
            DecompositionMode::Neural => DecompositionModel::Neural(
                NeuralDecomposition::from_flat(&x[5..], self.input_scaling),
            ),
        };
        KineticParameters {
            synthesis,
            decomposition,
            gamma: x[g],
            enthalpy_synthesis: x[g + 1],
            enthalpy_decomposition: x[g + 2],
        }
    }

    /// Uniform draw within bounds; network entries from `[-0.5, 0.5]`.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let (lo, hi) = self.bounds();
        let nn_start = match self.mode {
            DecompositionMode::Neural => 5,
            DecompositionMode::Arrhenius => usize::MAX,
        };
        (0..self.dim())
            .map(|i| {
                if i >= nn_start {
                    rng.random_range(-0.5..=0.5)
                } else {
                    rng.random_range(lo[i]..=hi[i])
                }
            })
            .collect()
    }

    /// Whether an index enters the forward solve (everything except γ and
    /// the enthalpies).
    fn is_kinetic(&self, i: usize) -> bool {
        let g = self.gamma_index();
        !(g..g + 3).contains(&i)
    }
}

/// One least-squares term.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostTerm {
    /// `½ Σ residual²`
    pub value: f64,
    /// Simulated minus measured, in experiment order.
    pub residuals: Vec<f64>,
}

fn half_sum_squares(v: &[f64]) -> f64 {
    0.5 * v.iter().map(|r| r * r).sum::<f64>()
}

fn solve_outcome(
    e: &Experiment,
    params: &KineticParameters,
    solver: &SolverOptions,
) -> Result<KineticOutcome, CalibrationError> {
    pfr::simulate(&e.inputs, params, solver)
        .map(|(o, _)| o)
        .map_err(|source| CalibrationError::Solve {
            experiment: e.id.clone(),
            source,
        })
}

fn require(e: &Experiment, kind: Observable) -> Result<(), CalibrationError> {
    if e.has(kind) {
        Ok(())
    } else {
        Err(CalibrationError::Data(format!(
            "experiment {} has no {kind} measurement",
            e.id
        )))
    }
}

/// Simulated-minus-measured heats of one experiment: per zone, or a single
/// total when the record stores only the total.
fn heat_residuals(e: &Experiment, zone_heats: &[f64]) -> Result<Vec<f64>, CalibrationError> {
    let measured = e.record.zone_heats.as_ref().expect("checked by caller");
    if measured.len() == 1 {
        Ok(vec![zone_heats.iter().sum::<f64>() - measured[0]])
    } else if measured.len() == zone_heats.len() {
        Ok(zone_heats
            .iter()
            .zip(measured)
            .map(|(s, m)| s - m)
            .collect())
    } else {
        Err(CalibrationError::Data(format!(
            "experiment {} has {} zone heats but the reactor has {} zones",
            e.id,
            measured.len(),
            zone_heats.len()
        )))
    }
}

/// `J₁ = ½ Σ (B_sim − B_exp)²`.
pub fn cost_ftir(
    params: &KineticParameters,
    experiments: &[Experiment],
) -> Result<CostTerm, CalibrationError> {
    let solver = SolverOptions::default();
    let mut residuals = Vec::with_capacity(experiments.len());
    for e in experiments {
        require(e, Observable::BandArea)?;
        let o = solve_outcome(e, params, &solver)?.observables(params);
        residuals.push(o.band_area - e.record.band_area.unwrap());
    }
    Ok(CostTerm {
        value: half_sum_squares(&residuals),
        residuals,
    })
}

/// `J₂ = ½ Σ_m Σ_i (q_sim − q_exp)²`.
pub fn cost_heat(
    params: &KineticParameters,
    experiments: &[Experiment],
) -> Result<CostTerm, CalibrationError> {
    let solver = SolverOptions::default();
    let mut residuals = Vec::new();
    for e in experiments {
        require(e, Observable::Heat)?;
        let o = solve_outcome(e, params, &solver)?.observables(params);
        residuals.extend(heat_residuals(e, &o.zone_heats)?);
    }
    Ok(CostTerm {
        value: half_sum_squares(&residuals),
        residuals,
    })
}

/// `J₃ = ½ Σ (G_sim − G_exp)²`.
pub fn cost_gas(
    params: &KineticParameters,
    experiments: &[Experiment],
) -> Result<CostTerm, CalibrationError> {
    let solver = SolverOptions::default();
    let mut residuals = Vec::with_capacity(experiments.len());
    for e in experiments {
        require(e, Observable::GasFlow)?;
        let o = solve_outcome(e, params, &solver)?.observables(params);
        residuals.push(o.gas_flow - e.record.gas_flow_rate.unwrap());
    }
    Ok(CostTerm {
        value: half_sum_squares(&residuals),
        residuals,
    })
}

/// `J = Σ λ_k J_k / J_k0`; terms with zero weight are skipped.
pub fn scalarize(costs: [f64; 3], weights: [f64; 3], normalizers: [f64; 3]) -> f64 {
    (0..3)
        .filter(|&k| weights[k] != 0.0)
        .map(|k| weights[k] * costs[k] / normalizers[k])
        .sum()
}

/// `J_k0 = ½ Σ measurement²` per observable.
pub fn normalizers(experiments: &[Experiment]) -> [f64; 3] {
    let mut n = [0.0; 3];
    for e in experiments {
        if let Some(b) = e.record.band_area {
            n[0] += 0.5 * b * b;
        }
        if let Some(q) = &e.record.zone_heats {
            n[1] += 0.5 * q.iter().map(|v| v * v).sum::<f64>();
        }
        if let Some(g) = e.record.gas_flow_rate {
            n[2] += 0.5 * g * g;
        }
    }
    n
}

/// Residuals of one experiment, simulated minus measured.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResiduals {
    pub experiment: String,
    pub band_area: Option<f64>,
    pub heat: Vec<f64>,
    pub gas_flow: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostBreakdown {
    /// Raw `J₁, J₂, J₃`.
    pub terms: [f64; 3],
    pub normalizers: [f64; 3],
    pub weights: [f64; 3],
    pub total: f64,
    pub residuals: Vec<ExperimentResiduals>,
}

/// Solver, optimizer and weighting choices for [`fit`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizerSettings {
    pub n_starts: usize,
    pub seed: u64,
    /// Levenberg–Marquardt iterations per start.
    pub max_iterations: usize,
    /// Relative central-difference step.
    pub gradient_step: f64,
    /// Stop when an accepted step lowers `J` by less than this fraction.
    pub cost_tolerance: f64,
    /// Stop when the range-scaled projected gradient falls below this
    /// fraction of `J`.
    pub gradient_tolerance: f64,
    /// Stop when a step moves every parameter by less than this fraction of
    /// its bound range.
    pub step_tolerance: f64,
    /// λ for band area, heat and gas flow.
    pub weights: [f64; 3],
    /// Integrator settings during fits. Tighter than the forward-solve
    /// defaults so that difference quotients of small gas flows stay
    /// accurate; trial points exceeding the step limit are rejected.
    pub solver: SolverOptions,
    /// Replaces the default bounds when set.
    pub bounds: Option<(Vec<f64>, Vec<f64>)>,
    /// Initial point of the first start instead of a random draw.
    pub warm_start: Option<Vec<f64>>,
    /// Random redraws allowed when an initial point cannot be simulated.
    pub max_resamples: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            n_starts: 20,
            seed: 0,
            max_iterations: 300,
            gradient_step: 1e-5,
            cost_tolerance: 1e-10,
            gradient_tolerance: 1e-10,
            step_tolerance: 1e-12,
            weights: [1.0, 1.0, 1.0],
            solver: SolverOptions {
                rtol: 1e-10,
                atol: 1e-9,
                max_steps: 100_000,
                ..SolverOptions::default()
            },
            bounds: None,
            warm_start: None,
            max_resamples: 200,
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self, layout: &ParameterLayout) -> Result<(), CalibrationError> {
        let bad = |m: String| Err(CalibrationError::InvalidSettings(m));
        if self.n_starts == 0 {
            return bad("n_starts must be at least 1".into());
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1".into());
        }
        for (name, v) in [
            ("gradient_step", self.gradient_step),
            ("cost_tolerance", self.cost_tolerance),
            ("gradient_tolerance", self.gradient_tolerance),
            ("step_tolerance", self.step_tolerance),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return bad(format!(
                "weights must be finite and non-negative, got {:?}",
                self.weights
            ));
        }
        if self.weights.iter().all(|w| *w == 0.0) {
            return bad("at least one weight must be positive".into());
        }
        if let Some((lo, hi)) = &self.bounds {
            if lo.len() != layout.dim() || hi.len() != layout.dim() {
                return bad(format!("bounds must have {} entries", layout.dim()));
            }
            if lo.iter().zip(hi).any(|(l, h)| !(l < h)) {
                return bad("every lower bound must be below its upper bound".into());
            }
        }
        if let Some(x) = &self.warm_start {
            if x.len() != layout.dim() {
                return bad(format!("warm start must have {} entries", layout.dim()));
            }
        }
        Ok(())
    }
}

/// The scalarized objective over a fixed experiment set.
pub struct Objective<'a> {
    experiments: &'a [Experiment],
    layout: ParameterLayout,
    weights: [f64; 3],
    normalizers: [f64; 3],
    /// `sqrt(λ_k / J_k0)`, zero for inactive terms.
    scales: [f64; 3],
    solver: SolverOptions,
    gradient_step: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

/// Nominal solve of one experiment, `None` when it carries no active term.
type Nominal = Option<(KineticOutcome, StepGrid)>;

impl<'a> Objective<'a> {
    pub fn new(
        experiments: &'a [Experiment],
        mode: DecompositionMode,
        settings: &OptimizerSettings,
    ) -> Result<Self, CalibrationError> {
        let layout = ParameterLayout::new(mode);
        settings.validate(&layout)?;
        let normalizers = normalizers(experiments);
        let mut scales = [0.0; 3];
        for kind in Observable::ALL {
            let k = kind.index();
            if settings.weights[k] == 0.0 {
                continue;
            }
            if !(normalizers[k] > 0.0) {
                return Err(CalibrationError::Data(format!(
                    "{kind} has a positive weight but no non-zero measurements"
                )));
            }
            scales[k] = (settings.weights[k] / normalizers[k]).sqrt();
        }
        for e in experiments {
            if let Some(q) = &e.record.zone_heats {
                if q.len() != 1 && q.len() != e.inputs.reactor.n_zones {
                    return Err(CalibrationError::Data(format!(
                        "experiment {} has {} zone heats but its reactor has {} zones",
                        e.id,
                        q.len(),
                        e.inputs.reactor.n_zones
                    )));
                }
            }
        }
        let (lower, upper) = settings.bounds.clone().unwrap_or_else(|| layout.bounds());
        Ok(Self {
            experiments,
            layout,
            weights: settings.weights,
            normalizers,
            scales,
            solver: settings.solver,
            gradient_step: settings.gradient_step,
            lower,
            upper,
        })
    }

    pub fn layout(&self) -> &ParameterLayout {
        &self.layout
    }

    pub fn bounds(&self) -> (&[f64], &[f64]) {
        (&self.lower, &self.upper)
    }

    pub fn normalizers(&self) -> [f64; 3] {
        self.normalizers
    }

    fn active(&self, e: &Experiment) -> bool {
        Observable::ALL
            .iter()
            .any(|&k| self.scales[k.index()] > 0.0 && e.has(k))
    }

    /// Appends the weighted residuals of `e` for the given outcome.
    fn push_residuals(
        &self,
        e: &Experiment,
        o: &KineticOutcome,
        p: &KineticParameters,
        out: &mut Vec<f64>,
    ) {
        let [s1, s2, s3] = self.scales;
        if s1 > 0.0 {
            if let Some(b) = e.record.band_area {
                out.push(s1 * (o.dan_liquid_outlet / p.gamma - b));
            }
        }
        if s2 > 0.0 {
            if let Some(q) = &e.record.zone_heats {
                let heats = o
                    .zone_turnover
                    .iter()
                    .map(|t| p.enthalpy_synthesis * t[0] + p.enthalpy_decomposition * t[1]);
                if q.len() == 1 {
                    out.push(s2 * (heats.sum::<f64>() - q[0]));
                } else {
                    out.extend(heats.zip(q).map(|(s, m)| s2 * (s - m)));
                }
            }
        }
        if s3 > 0.0 {
            if let Some(g) = e.record.gas_flow_rate {
                out.push(s3 * (o.gas_flow - g));
            }
        }
    }

    /// Derivatives of the weighted residuals of `e` with respect to γ, ΔH₁
    /// and ΔH₂, appended row by row.
    fn push_analytic_rows(
        &self,
        e: &Experiment,
        o: &KineticOutcome,
        p: &KineticParameters,
        out: &mut Vec<[f64; 3]>,
    ) {
        let [s1, s2, s3] = self.scales;
        if s1 > 0.0 && e.record.band_area.is_some() {
            out.push([-s1 * o.dan_liquid_outlet / (p.gamma * p.gamma), 0.0, 0.0]);
        }
        if s2 > 0.0 {
            if let Some(q) = &e.record.zone_heats {
                if q.len() == 1 {
                    let (t1, t2) = o
                        .zone_turnover
                        .iter()
                        .fold((0.0, 0.0), |(a, b), t| (a + t[0], b + t[1]));
                    out.push([0.0, s2 * t1, s2 * t2]);
                } else {
                    out.extend(o.zone_turnover.iter().map(|t| [0.0, s2 * t[0], s2 * t[1]]));
                }
            }
        }
        if s3 > 0.0 && e.record.gas_flow_rate.is_some() {
            out.push([0.0; 3]);
        }
    }

    fn nominal(&self, params: &KineticParameters) -> Result<Vec<Nominal>, CalibrationError> {
        self.experiments
            .par_iter()
            .map(|e| {
                if !self.active(e) {
                    return Ok(None);
                }
                pfr::simulate(&e.inputs, params, &self.solver)
                    .map(Some)
                    .map_err(|source| CalibrationError::Solve {
                        experiment: e.id.clone(),
                        source,
                    })
            })
            .collect()
    }

    fn assemble(&self, params: &KineticParameters, nominal: &[Nominal]) -> Vec<f64> {
        let mut r = Vec::new();
        for (e, n) in self.experiments.iter().zip(nominal) {
            if let Some((o, _)) = n {
                self.push_residuals(e, o, params, &mut r);
            }
        }
        r
    }

    /// Weighted residual vector `r̃` with `J = ½‖r̃‖²`.
    pub fn residuals(&self, x: &[f64]) -> Result<Vec<f64>, CalibrationError> {
        let params = self.layout.unpack(x);
        let nominal = self.nominal(&params)?;
        Ok(self.assemble(&params, &nominal))
    }

    pub fn value(&self, x: &[f64]) -> Result<f64, CalibrationError> {
        Ok(half_sum_squares(&self.residuals(x)?))
    }

    /// `J` and `∇J = Jacᵀ r̃`.
    pub fn gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>), CalibrationError> {
        let params = self.layout.unpack(x);
        let nominal = self.nominal(&params)?;
        let r = self.assemble(&params, &nominal);
        let jac = self.jacobian_at(x, &r, &nominal).ok_or_else(|| {
            CalibrationError::Data(
                "Jacobian evaluation failed at every perturbation direction".into(),
            )
        })?;
        let g = jac.tr_mul(&nalgebra::DVector::from_column_slice(&r));
        Ok((half_sum_squares(&r), g.iter().cloned().collect()))
    }

    fn jacobian_at(&self, x: &[f64], r: &[f64], nominal: &[Nominal]) -> Option<DMatrix<f64>> {
        let n = x.len();
        let m = r.len();
        let params = self.layout.unpack(x);
        let mut jac = DMatrix::zeros(m, n);

        let mut analytic = Vec::with_capacity(m);
        for (e, nom) in self.experiments.iter().zip(nominal) {
            if let Some((o, _)) = nom {
                self.push_analytic_rows(e, o, &params, &mut analytic);
            }
        }
        debug_assert_eq!(analytic.len(), m);
        let g = self.layout.gamma_index();
        for (row, a) in analytic.iter().enumerate() {
            for c in 0..3 {
                jac[(row, g + c)] = a[c];
            }
        }

        let kinetic: Vec<usize> = (0..n).filter(|&i| self.layout.is_kinetic(i)).collect();
        let columns: Vec<Option<Vec<f64>>> = kinetic
            .par_iter()
            .map(|&i| self.difference_column(x, i, r, nominal))
            .collect();
        for (&i, col) in kinetic.iter().zip(columns) {
            let col = col?;
            for row in 0..m {
                jac[(row, i)] = col[row];
            }
        }
        Some(jac)
    }

    /// Weighted residuals at `x` with the nominal step grids replayed.
    fn replayed(&self, x: &[f64], len: usize, nominal: &[Nominal]) -> Option<Vec<f64>> {
        let params = self.layout.unpack(x);
        let mut r = Vec::with_capacity(len);
        for (e, nom) in self.experiments.iter().zip(nominal) {
            if let Some((_, grid)) = nom {
                let o = pfr::replay(&e.inputs, &params, grid, &self.solver).ok()?;
                self.push_residuals(e, &o, &params, &mut r);
            }
        }
        Some(r)
    }

    /// Central difference along parameter `i` over the nominal step grids;
    /// one-sided next to a bound or when one side cannot be integrated.
    fn difference_column(
        &self,
        x: &[f64],
        i: usize,
        r: &[f64],
        nominal: &[Nominal],
    ) -> Option<Vec<f64>> {
        let h = self.gradient_step * x[i].abs().max(1e-3 * (self.upper[i] - self.lower[i]));
        let shifted = |step: f64| {
            let mut xp = x.to_vec();
            xp[i] = (x[i] + step).clamp(self.lower[i], self.upper[i]);
            let actual = xp[i] - x[i];
            if actual == 0.0 {
                return None;
            }
            self.replayed(&xp, r.len(), nominal).map(|rp| (actual, rp))
        };
        match (shifted(h), shifted(-h)) {
            (Some((hu, up)), Some((hd, dn))) => Some(
                up.iter()
                    .zip(&dn)
                    .map(|(a, b)| (a - b) / (hu - hd))
                    .collect(),
            ),
            (Some((hs, rs)), None) | (None, Some((hs, rs))) => {
                Some(rs.iter().zip(r).map(|(a, b)| (a - b) / hs).collect())
            }
            (None, None) => None,
        }
    }

    /// Raw cost terms and residuals, evaluated with the default forward-solve
    /// options like every other reported quantity.
    pub fn breakdown(&self, x: &[f64]) -> Result<CostBreakdown, CalibrationError> {
        let params = self.layout.unpack(x);
        let solver = SolverOptions::default();
        let mut terms = [0.0; 3];
        let mut residuals = Vec::with_capacity(self.experiments.len());
        for e in self.experiments {
            let o = solve_outcome(e, &params, &solver)?.observables(&params);
            let band_area = e.record.band_area.map(|b| o.band_area - b);
            let heat = if e.has(Observable::Heat) {
                heat_residuals(e, &o.zone_heats)?
            } else {
                Vec::new()
            };
            let gas_flow = e.record.gas_flow_rate.map(|g| o.gas_flow - g);
            terms[0] += band_area.map_or(0.0, |v| 0.5 * v * v);
            terms[1] += half_sum_squares(&heat);
            terms[2] += gas_flow.map_or(0.0, |v| 0.5 * v * v);
            residuals.push(ExperimentResiduals {
                experiment: e.id.clone(),
                band_area,
                heat,
                gas_flow,
            });
        }
        Ok(CostBreakdown {
            terms,
            normalizers: self.normalizers,
            weights: self.weights,
            total: scalarize(terms, self.weights, self.normalizers),
            residuals,
        })
    }
}

impl lm::LeastSquares for Objective<'_> {
    type State = Vec<Nominal>;

    fn residuals(&self, x: &[f64]) -> Option<(Vec<f64>, Self::State)> {
        let params = self.layout.unpack(x);
        let nominal = self.nominal(&params).ok()?;
        let r = self.assemble(&params, &nominal);
        r.iter().all(|v| v.is_finite()).then_some((r, nominal))
    }

    fn jacobian(&self, x: &[f64], residuals: &[f64], state: &Self::State) -> Option<DMatrix<f64>> {
        self.jacobian_at(x, residuals, state)
    }
}

/// Outcome of one local optimization.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StartSummary {
    pub index: usize,
    /// Random draws rejected before a simulable initial point was found.
    pub resamples: usize,
    pub initial_cost: Option<f64>,
    pub final_cost: Option<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Option<Termination>,
    #[serde(skip)]
    pub parameters: Option<Vec<f64>>,
}

impl StartSummary {
    pub fn converged(&self) -> bool {
        self.termination.is_some_and(Termination::converged)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub mode: DecompositionMode,
    pub parameter_names: Vec<String>,
    pub parameters: Vec<f64>,
    pub cost: CostBreakdown,
    pub metrics: MetricSet,
    pub best_start: usize,
    pub converged: bool,
    pub starts: Vec<StartSummary>,
    pub settings: OptimizerSettings,
    pub seed: u64,
    pub wall_time_s: f64,
    #[serde(skip)]
    pub kinetics: KineticParameters,
}

impl FitReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fit report serializes")
    }

    /// Parameter value by name.
    pub fn parameter(&self, name: &str) -> Option<f64> {
        self.parameter_names
            .iter()
            .position(|n| n == name)
            .map(|i| self.parameters[i])
    }
}

fn run_start(
    objective: &Objective<'_>,
    settings: &OptimizerSettings,
    index: usize,
) -> StartSummary {
    let lm_settings = lm::LmSettings {
        max_iterations: settings.max_iterations,
        ftol: settings.cost_tolerance,
        gtol: settings.gradient_tolerance,
        xtol: settings.step_tolerance,
    };
    let (lower, upper) = objective.bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed.wrapping_add(index as u64));
    let mut summary = StartSummary {
        index,
        resamples: 0,
        initial_cost: None,
        final_cost: None,
        iterations: 0,
        evaluations: 0,
        termination: None,
        parameters: None,
    };
    let clamp = |x: Vec<f64>| -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, v)| v.clamp(lower[i], upper[i]))
            .collect()
    };
    let mut x0 = match (&settings.warm_start, index) {
        (Some(x), 0) => clamp(x.clone()),
        _ => clamp(objective.layout().sample(&mut rng)),
    };
    loop {
        if let Some(out) = lm::minimize(objective, &x0, lower, upper, &lm_settings) {
            summary.initial_cost = Some(out.initial_cost);
            summary.final_cost = Some(out.cost);
            summary.iterations = out.iterations;
            summary.evaluations = out.evaluations;
            summary.termination = Some(out.termination);
            summary.parameters = Some(out.x);
            return summary;
        }
        if summary.resamples >= settings.max_resamples {
            log::debug!("start {index}: no simulable initial point");
            return summary;
        }
        summary.resamples += 1;
        x0 = clamp(objective.layout().sample(&mut rng));
    }
}

/// Multi-start fit. Starts run in parallel; the best is chosen by lowest
/// `J`, ties going to the lower start index.
pub fn fit(
    experiments: &[Experiment],
    settings: &OptimizerSettings,
    mode: DecompositionMode,
) -> Result<FitReport, CalibrationError> {
    let clock = Instant::now();
    let objective = Objective::new(experiments, mode, settings)?;
    let starts: Vec<StartSummary> = (0..settings.n_starts)
        .into_par_iter()
        .map(|i| {
            let s = run_start(&objective, settings, i);
            log::info!(
                "start {:>3}: J = {:.6e} after {} iterations ({:?})",
                i,
                s.final_cost.unwrap_or(f64::NAN),
                s.iterations,
                s.termination
            );
            s
        })
        .collect();
    let best = starts
        .iter()
        .filter(|s| s.final_cost.is_some_and(f64::is_finite))
        .min_by(|a, b| a.final_cost.unwrap().total_cmp(&b.final_cost.unwrap()))
        .ok_or(CalibrationError::AllStartsFailed {
            starts: settings.n_starts,
        })?;
    let x = best
        .parameters
        .clone()
        .expect("finished start has parameters");
    let kinetics = objective.layout().unpack(&x);
    let cost = objective.breakdown(&x)?;
    let predictions = validation::predictions(&kinetics, experiments, &SolverOptions::default())?;
    let metrics = MetricSet::from_predictions(&predictions);
    Ok(FitReport {
        mode,
        parameter_names: objective.layout().names(),
        parameters: x,
        cost,
        metrics,
        best_start: best.index,
        converged: starts.iter().any(StartSummary::converged),
        starts,
        settings: settings.clone(),
        seed: settings.seed,
        wall_time_s: clock.elapsed().as_secs_f64(),
        kinetics,
    })
}
