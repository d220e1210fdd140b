//! Grey-box plug-flow reactor: axial integration and measurement models.
//!
//! State along the axis is the vector of total-volume concentrations
//! `[X_j](z)`. All nitrogen is in the gas phase, whose volume fraction
//! follows from the ideal gas law; the bulk velocity follows from a
//! constant mixture mass flux. The balance is integrated as
//!
//! ```text
//! d[X_j]/dz = (α_liquid / u) · Σ_k ν_jk · Q_k
//! ```
//!
//! with rates evaluated at liquid-phase concentrations `[X_j] / α_liquid`.
//! Temperature and pressure are uniform along the reactor.
//!
//! Alongside the concentrations the integrator carries the cumulative
//! turnover `A · ∫ α_liquid · Q_k dz` [mol/s] of each reaction, so zone heats
//! are differences of integrated quantities rather than a separate
//! quadrature.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::dataio::{ReactorConfig, SimulationInputs, ATMOSPHERE};
use crate::kinetics::{
    self, synthesis_rate, DecompositionModel, KineticParameters, KineticsError,
    NeuralDecomposition, GAS_CONSTANT,
};
use crate::ode;
use crate::species::{net_production, Species, M_N2, N_REACTIONS, N_SPECIES};

/// Reference temperature of the gas flow measurement [K].
pub const REFERENCE_TEMPERATURE: f64 = 293.15;
/// m³/s to mL/min.
pub const M3_PER_S_TO_ML_PER_MIN: f64 = 6.0e7;

/// Concentrations followed by the two cumulative turnovers.
const DIM: usize = N_SPECIES + N_REACTIONS;

const AAN: usize = Species::AminoacetonitrileHcl.index();
const NITRITE: usize = Species::SodiumNitrite.index();
const DAN: usize = Species::Dan.index();
const N2: usize = Species::Nitrogen.index();

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error(
        "gas volume fraction {alpha_gas:.6} reached the limit at z = {z:.6e} m \
         (T = {temperature:.2} K, p = {pressure:.0} Pa)"
    )]
    GasOverflow {
        z: f64,
        alpha_gas: f64,
        temperature: f64,
        pressure: f64,
    },
    #[error("step limit of {steps} exceeded at z = {z:.6e} m")]
    StepLimit { z: f64, steps: usize },
    /// Typically a runaway in which gas formation speeds up faster than the
    /// integrator can follow.
    #[error("step size underflow at z = {z:.6e} m (alpha_gas = {alpha_gas:.4})")]
    StepSizeUnderflow { z: f64, alpha_gas: f64 },
    #[error("non-finite state at z = {z:.6e} m")]
    NonFinite { z: f64 },
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("{0}")]
    Domain(String),
    #[error(transparent)]
    Kinetics(#[from] KineticsError),
}

impl SolveError {
    /// Axial position of the failure, when known.
    pub fn position(&self) -> Option<f64> {
        match self {
            SolveError::GasOverflow { z, .. }
            | SolveError::StepLimit { z, .. }
            | SolveError::StepSizeUnderflow { z, .. }
            | SolveError::NonFinite { z } => Some(*z),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverOptions {
    pub rtol: f64,
    /// Absolute tolerance on concentrations [mol/m³].
    pub atol: f64,
    /// Limit on attempted steps.
    pub max_steps: usize,
    /// Gas fraction at which the closure is declared invalid.
    pub alpha_max: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-6,
            max_steps: 1_000_000,
            alpha_max: 0.999,
        }
    }
}

/// Ideal-gas density of N2 [kg/m³].
pub fn gas_density(pressure: f64, temperature: f64) -> Result<f64, SolveError> {
    if !(pressure > 0.0) || !(temperature > 0.0) {
        return Err(SolveError::Domain(format!(
            "gas density needs positive p and T, got p = {pressure} Pa, T = {temperature} K"
        )));
    }
    Ok(pressure * M_N2 / (GAS_CONSTANT * temperature))
}

/// N2 density at 1 atm and 20 °C.
pub fn reference_gas_density() -> f64 {
    ATMOSPHERE * M_N2 / (GAS_CONSTANT * REFERENCE_TEMPERATURE)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseClosure {
    pub alpha_gas: f64,
    pub alpha_liquid: f64,
    /// Bulk velocity [m/s].
    pub velocity: f64,
}

/// Phase fractions and velocity for the given concentrations.
pub fn closure(
    concentrations: &[f64; N_SPECIES],
    inputs: &SimulationInputs,
) -> Result<PhaseClosure, SolveError> {
    closure_with(concentrations, inputs, SolverOptions::default().alpha_max)
}

pub fn closure_with(
    concentrations: &[f64; N_SPECIES],
    inputs: &SimulationInputs,
    alpha_max: f64,
) -> Result<PhaseClosure, SolveError> {
    let frame = Frame::new(inputs, alpha_max)?;
    frame
        .phases(concentrations[N2])
        .map_err(|alpha_gas| frame.overflow(f64::NAN, alpha_gas))
}

/// Operating conditions shared by every evaluation of one solve.
#[derive(Debug, Clone, Copy)]
struct Frame {
    temperature: f64,
    pressure: f64,
    rho_gas: f64,
    rho_liquid: f64,
    mass_flux: f64,
    area: f64,
    alpha_max: f64,
}

impl Frame {
    fn new(inputs: &SimulationInputs, alpha_max: f64) -> Result<Self, SolveError> {
        let rho_gas = gas_density(inputs.absolute_pressure, inputs.temperature)?;
        if !(inputs.inlet_velocity > 0.0) || !inputs.inlet_velocity.is_finite() {
            return Err(SolveError::Domain(format!(
                "inlet velocity must be positive, got {}",
                inputs.inlet_velocity
            )));
        }
        if inputs.inlet_concentrations.iter().any(|c| !(*c >= 0.0)) {
            return Err(SolveError::Domain(
                "inlet concentrations must be non-negative".into(),
            ));
        }
        let rho_liquid = inputs.reactor.liquid_density;
        let mut frame = Self {
            temperature: inputs.temperature,
            pressure: inputs.absolute_pressure,
            rho_gas,
            rho_liquid,
            mass_flux: 0.0,
            area: inputs.reactor.cross_section_area,
            alpha_max,
        };
        let alpha_in = inputs.inlet_concentrations[N2] * M_N2 / rho_gas;
        if alpha_in >= alpha_max {
            return Err(frame.overflow(0.0, alpha_in));
        }
        frame.mass_flux =
            (rho_liquid * (1.0 - alpha_in) + rho_gas * alpha_in) * inputs.inlet_velocity;
        Ok(frame)
    }

    /// `Err(alpha_gas)` when the gas fraction is at or above the limit.
    #[inline]
    fn phases(&self, c_n2: f64) -> Result<PhaseClosure, f64> {
        let alpha_gas = c_n2.max(0.0) * M_N2 / self.rho_gas;
        if !(alpha_gas < self.alpha_max) {
            return Err(alpha_gas);
        }
        let alpha_liquid = 1.0 - alpha_gas;
        let velocity = self.mass_flux / (self.rho_liquid * alpha_liquid + self.rho_gas * alpha_gas);
        Ok(PhaseClosure {
            alpha_gas,
            alpha_liquid,
            velocity,
        })
    }

    fn overflow(&self, z: f64, alpha_gas: f64) -> SolveError {
        SolveError::GasOverflow {
            z,
            alpha_gas,
            temperature: self.temperature,
            pressure: self.pressure,
        }
    }
}

// Built once per solve, so the variant size does not matter.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, Copy)]
enum Decomposition {
    FirstOrder(f64),
    Neural(NeuralDecomposition),
}

/// Right-hand side with rate coefficients resolved for one set of conditions.
#[derive(Debug, Clone, Copy)]
struct Model {
    frame: Frame,
    k_synthesis: f64,
    decomposition: Decomposition,
}

impl Model {
    fn new(
        inputs: &SimulationInputs,
        params: &KineticParameters,
        alpha_max: f64,
    ) -> Result<Self, SolveError> {
        let frame = Frame::new(inputs, alpha_max)?;
        let k_synthesis = kinetics::rate_constant(&params.synthesis, inputs.temperature)?;
        let decomposition = match &params.decomposition {
            DecompositionModel::Arrhenius(p) => {
                Decomposition::FirstOrder(p.rate_constant(inputs.temperature)?)
            }
            DecompositionModel::Neural(nn) => Decomposition::Neural(*nn),
        };
        Ok(Self {
            frame,
            k_synthesis,
            decomposition,
        })
    }

    /// Reaction rates at liquid-phase concentrations.
    #[inline]
    fn rates(&self, c: &[f64], alpha_liquid: f64) -> [f64; N_REACTIONS] {
        let inv = 1.0 / alpha_liquid;
        let q1 = synthesis_rate(self.k_synthesis, c[AAN] * inv, c[NITRITE] * inv);
        let dan = (c[DAN] * inv).max(0.0);
        let q2 = if dan == 0.0 {
            0.0
        } else {
            match &self.decomposition {
                Decomposition::FirstOrder(k) => k * dan,
                Decomposition::Neural(nn) => {
                    nn.forward(dan, self.frame.temperature, self.frame.pressure) * dan
                }
            }
        };
        [q1, q2]
    }

    /// Full derivative; `Err(alpha_gas)` signals a closure overflow.
    #[inline]
    fn derivative(&self, y: &[f64; DIM]) -> Result<[f64; DIM], f64> {
        let ph = self.frame.phases(y[N2])?;
        let q = self.rates(y, ph.alpha_liquid);
        let factor = ph.alpha_liquid / ph.velocity;
        let prod = net_production(q);
        let mut dy = [0.0; DIM];
        for j in 0..N_SPECIES {
            dy[j] = factor * prod[j];
        }
        let a = self.frame.area * ph.alpha_liquid;
        dy[N_SPECIES] = a * q[0];
        dy[N_SPECIES + 1] = a * q[1];
        Ok(dy)
    }

    fn sample(&self, z: f64, y: &[f64; DIM], dy: &[f64; DIM]) -> MixtureState {
        let ph = self
            .frame
            .phases(y[N2])
            .expect("accepted states are below the gas limit");
        let mut concentrations = [0.0; N_SPECIES];
        concentrations.copy_from_slice(&y[..N_SPECIES]);
        MixtureState {
            z,
            concentrations,
            alpha_gas: ph.alpha_gas,
            alpha_liquid: ph.alpha_liquid,
            velocity: ph.velocity,
            rho_gas: self.frame.rho_gas,
            turnover: [y[N_SPECIES], y[N_SPECIES + 1]],
            turnover_density: [dy[N_SPECIES], dy[N_SPECIES + 1]],
        }
    }
}

/// Mixture state at one axial position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureState {
    /// [m]
    pub z: f64,
    /// Total-volume concentrations [mol/m³].
    pub concentrations: [f64; N_SPECIES],
    pub alpha_gas: f64,
    pub alpha_liquid: f64,
    /// [m/s]
    pub velocity: f64,
    /// [kg/m³]
    pub rho_gas: f64,
    /// Cumulative `A ∫ α_liquid Q_k dz` from the inlet [mol/s].
    pub turnover: [f64; N_REACTIONS],
    /// `A α_liquid Q_k` at this position [mol/(s·m)].
    pub turnover_density: [f64; N_REACTIONS],
}

impl MixtureState {
    pub fn concentration(&self, s: Species) -> f64 {
        self.concentrations[s.index()]
    }

    /// `(ρ_liquid α_liquid + ρ_gas α_gas) u` [kg/(m²·s)].
    pub fn mass_flux(&self, liquid_density: f64) -> f64 {
        (liquid_density * self.alpha_liquid + self.rho_gas * self.alpha_gas) * self.velocity
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SolverStats {
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub rhs_evaluations: usize,
}

/// Solved axial profile from inlet to outlet.
#[derive(Debug, Clone, PartialEq)]
pub struct AxialProfile {
    pub samples: Vec<MixtureState>,
    pub stats: SolverStats,
    /// Reactor the profile was computed for.
    pub reactor: ReactorConfig,
}

impl AxialProfile {
    pub fn inlet(&self) -> &MixtureState {
        &self.samples[0]
    }

    pub fn outlet(&self) -> &MixtureState {
        self.samples.last().expect("profile has samples")
    }

    /// Cumulative turnover at `z`, interpolated with cubic Hermite
    /// polynomials between samples.
    pub fn turnover_at(&self, z: f64) -> [f64; N_REACTIONS] {
        let s = &self.samples;
        let idx = s.partition_point(|m| m.z < z);
        if idx < s.len() && s[idx].z == z {
            return s[idx].turnover;
        }
        if idx == 0 {
            return s[0].turnover;
        }
        if idx >= s.len() {
            return self.outlet().turnover;
        }
        let (a, b) = (&s[idx - 1], &s[idx]);
        let h = b.z - a.z;
        let t = (z - a.z) / h;
        let (t2, t3) = (t * t, t * t * t);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        let mut out = [0.0; N_REACTIONS];
        for k in 0..N_REACTIONS {
            out[k] = h00 * a.turnover[k]
                + h10 * h * a.turnover_density[k]
                + h01 * b.turnover[k]
                + h11 * h * b.turnover_density[k];
        }
        out
    }

    pub fn observables(&self, params: &KineticParameters) -> Observables {
        Observables {
            band_area: band_area(self, params.gamma),
            zone_heats: zone_heats(
                self,
                params.enthalpy_synthesis,
                params.enthalpy_decomposition,
                &self.reactor,
            ),
            gas_flow: gas_flow_rate(self, &self.reactor),
        }
    }

    /// Writes `z_m`, one column per species, `alpha_gas`, `u_m_s`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "z_m")?;
        for s in Species::ALL {
            write!(out, ",{}_mol_m3", s.label())?;
        }
        writeln!(out, ",alpha_gas,u_m_s")?;
        for m in &self.samples {
            write!(out, "{:e}", m.z)?;
            for c in m.concentrations {
                write!(out, ",{c:e}")?;
            }
            writeln!(out, ",{:e},{:e}", m.alpha_gas, m.velocity)?;
        }
        Ok(())
    }
}

/// Simulated measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct Observables {
    /// [a.u.]
    pub band_area: f64,
    /// [W] per zone.
    pub zone_heats: Vec<f64>,
    /// [mL/min] at 1 atm and 20 °C.
    pub gas_flow: f64,
}

impl Observables {
    pub fn total_heat(&self) -> f64 {
        self.zone_heats.iter().sum()
    }

    /// One-line summary: `band_area_au=..,q1_W=..,...,gas_flow_ml_min=..`.
    pub fn summary_line(&self) -> String {
        let mut s = format!("band_area_au={}", self.band_area);
        for (i, q) in self.zone_heats.iter().enumerate() {
            s.push_str(&format!(",q{}_W={}", i + 1, q));
        }
        s.push_str(&format!(",gas_flow_ml_min={}", self.gas_flow));
        s
    }
}

/// Outlet liquid-phase DAN concentration over γ.
pub fn band_area(profile: &AxialProfile, gamma: f64) -> f64 {
    let out = profile.outlet();
    out.concentration(Species::Dan) / out.alpha_liquid / gamma
}

/// Heat released in each zone of `reactor` [W].
pub fn zone_heats(
    profile: &AxialProfile,
    dh_synthesis: f64,
    dh_decomposition: f64,
    reactor: &ReactorConfig,
) -> Vec<f64> {
    let ext: Vec<[f64; N_REACTIONS]> = reactor
        .zone_bounds
        .iter()
        .map(|&z| profile.turnover_at(z))
        .collect();
    ext.windows(2)
        .map(|w| dh_synthesis * (w[1][0] - w[0][0]) + dh_decomposition * (w[1][1] - w[0][1]))
        .collect()
}

/// Outlet N2 flow converted to 1 atm and 20 °C [mL/min].
pub fn gas_flow_rate(profile: &AxialProfile, reactor: &ReactorConfig) -> f64 {
    let out = profile.outlet();
    outlet_gas_flow(
        reactor.cross_section_area,
        out.velocity,
        out.concentration(Species::Nitrogen),
    )
}

fn outlet_gas_flow(area: f64, velocity: f64, c_n2: f64) -> f64 {
    area * velocity * c_n2 * M_N2 / reference_gas_density() * M3_PER_S_TO_ML_PER_MIN
}

/// `d[X_j]/dz` for every species at `state`.
pub fn rhs(
    state: &MixtureState,
    params: &KineticParameters,
    inputs: &SimulationInputs,
) -> Result<[f64; N_SPECIES], SolveError> {
    let model = Model::new(inputs, params, 1.0)?;
    if !(state.alpha_liquid > 0.0) {
        return Err(model.frame.overflow(state.z, state.alpha_gas));
    }
    if !(state.velocity > 0.0) {
        return Err(SolveError::InvalidState(format!(
            "velocity must be positive, got {}",
            state.velocity
        )));
    }
    let q = model.rates(&state.concentrations, state.alpha_liquid);
    let prod = net_production(q);
    let factor = state.alpha_liquid / state.velocity;
    Ok(prod.map(|p| factor * p))
}

/// Initial state for `inputs`.
pub fn inlet_state(inputs: &SimulationInputs) -> Result<MixtureState, SolveError> {
    let frame = Frame::new(inputs, SolverOptions::default().alpha_max)?;
    let ph = frame
        .phases(inputs.inlet_concentrations[N2])
        .map_err(|a| frame.overflow(0.0, a))?;
    Ok(MixtureState {
        z: 0.0,
        concentrations: inputs.inlet_concentrations,
        alpha_gas: ph.alpha_gas,
        alpha_liquid: ph.alpha_liquid,
        velocity: ph.velocity,
        rho_gas: frame.rho_gas,
        turnover: [0.0; N_REACTIONS],
        turnover_density: [0.0; N_REACTIONS],
    })
}

/// Integrates from the inlet to the outlet with default options.
pub fn solve(
    inputs: &SimulationInputs,
    params: &KineticParameters,
) -> Result<AxialProfile, SolveError> {
    solve_with(inputs, params, &SolverOptions::default())
}

pub fn solve_with(
    inputs: &SimulationInputs,
    params: &KineticParameters,
    options: &SolverOptions,
) -> Result<AxialProfile, SolveError> {
    let model = Model::new(inputs, params, options.alpha_max)?;
    let mut samples = Vec::new();
    let stats = integrate(&model, inputs, options, |z, y, dy, _| {
        samples.push(model.sample(z, y, dy));
    })?;
    Ok(AxialProfile {
        samples,
        stats,
        reactor: inputs.reactor.clone(),
    })
}

/// The parts of the outlet and zone data that do not depend on γ or the
/// enthalpies.
#[derive(Debug, Clone, PartialEq)]
pub struct KineticOutcome {
    /// Outlet liquid-phase DAN concentration [mol/m³].
    pub dan_liquid_outlet: f64,
    /// Turnover of both reactions inside each zone [mol/s].
    pub zone_turnover: Vec<[f64; N_REACTIONS]>,
    /// [mL/min] at reference conditions.
    pub gas_flow: f64,
}

impl KineticOutcome {
    pub fn observables(&self, params: &KineticParameters) -> Observables {
        Observables {
            band_area: self.dan_liquid_outlet / params.gamma,
            zone_heats: self
                .zone_turnover
                .iter()
                .map(|t| params.enthalpy_synthesis * t[0] + params.enthalpy_decomposition * t[1])
                .collect(),
            gas_flow: self.gas_flow,
        }
    }
}

/// Accepted step endpoints of an adaptive solve, reusable for fixed-step
/// replays with perturbed parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGrid {
    pub points: Vec<f64>,
    /// Indices into `points` that are zone boundaries.
    pub boundaries: Vec<usize>,
}

struct OutcomeBuilder<'a> {
    model: &'a Model,
    boundary_turnover: Vec<[f64; N_REACTIONS]>,
    last: [f64; DIM],
}

impl<'a> OutcomeBuilder<'a> {
    fn new(model: &'a Model, n_zones: usize) -> Self {
        Self {
            model,
            boundary_turnover: Vec::with_capacity(n_zones + 1),
            last: [0.0; DIM],
        }
    }

    fn observe(&mut self, y: &[f64; DIM], boundary: bool) {
        if boundary {
            self.boundary_turnover
                .push([y[N_SPECIES], y[N_SPECIES + 1]]);
        }
        self.last = *y;
    }

    fn finish(self) -> KineticOutcome {
        let y = self.last;
        let ph = self
            .model
            .frame
            .phases(y[N2])
            .expect("accepted states are below the gas limit");
        let zone_turnover = self
            .boundary_turnover
            .windows(2)
            .map(|w| [w[1][0] - w[0][0], w[1][1] - w[0][1]])
            .collect();
        KineticOutcome {
            dan_liquid_outlet: y[DAN] / ph.alpha_liquid,
            zone_turnover,
            gas_flow: outlet_gas_flow(self.model.frame.area, ph.velocity, y[N2]),
        }
    }
}

/// Adaptive solve that keeps only what the measurement models need, plus
/// the step grid.
pub fn simulate(
    inputs: &SimulationInputs,
    params: &KineticParameters,
    options: &SolverOptions,
) -> Result<(KineticOutcome, StepGrid), SolveError> {
    let model = Model::new(inputs, params, options.alpha_max)?;
    let mut builder = OutcomeBuilder::new(&model, inputs.reactor.n_zones);
    let mut grid = StepGrid {
        points: Vec::new(),
        boundaries: Vec::new(),
    };
    integrate(&model, inputs, options, |z, y, _, boundary| {
        if boundary {
            grid.boundaries.push(grid.points.len());
        }
        grid.points.push(z);
        builder.observe(y, boundary);
    })?;
    Ok((builder.finish(), grid))
}

/// Fixed-step Cash–Karp integration over a previously accepted grid.
///
/// The result is a smooth function of the parameters for a fixed grid,
/// which is what finite-difference sensitivities need.
pub fn replay(
    inputs: &SimulationInputs,
    params: &KineticParameters,
    grid: &StepGrid,
    options: &SolverOptions,
) -> Result<KineticOutcome, SolveError> {
    let model = Model::new(inputs, params, options.alpha_max)?;
    let f = |y: &[f64; DIM]| model.derivative(y);
    let mut builder = OutcomeBuilder::new(&model, inputs.reactor.n_zones);
    let mut y = initial_vector(inputs);
    let mut next_boundary = grid.boundaries.iter().peekable();
    for (i, &z) in grid.points.iter().enumerate() {
        if i > 0 {
            let h = z - grid.points[i - 1];
            let k1 = f(&y).map_err(|a| model.frame.overflow(grid.points[i - 1], a))?;
            let s = ode::step(&f, &y, &k1, h).map_err(|a| model.frame.overflow(z, a))?;
            y = s.y;
            if y.iter().any(|v| !v.is_finite()) {
                return Err(SolveError::NonFinite { z });
            }
        }
        let boundary = next_boundary.next_if(|&&b| b == i).is_some();
        builder.observe(&y, boundary);
    }
    f(&y).map_err(|a| model.frame.overflow(inputs.reactor.length, a))?;
    Ok(builder.finish())
}

fn initial_vector(inputs: &SimulationInputs) -> [f64; DIM] {
    let mut y = [0.0; DIM];
    y[..N_SPECIES].copy_from_slice(&inputs.inlet_concentrations);
    y
}

/// Adaptive integration over the zones of the reactor. `observe` receives
/// `(z, y, f(y), is_zone_boundary)` for the inlet and every accepted step.
fn integrate(
    model: &Model,
    inputs: &SimulationInputs,
    options: &SolverOptions,
    mut observe: impl FnMut(f64, &[f64; DIM], &[f64; DIM], bool),
) -> Result<SolverStats, SolveError> {
    if !(options.rtol > 0.0) || !(options.atol > 0.0) {
        return Err(SolveError::Domain("tolerances must be positive".into()));
    }
    let reactor = &inputs.reactor;
    let length = reactor.length;
    let mut stats = SolverStats::default();
    let f = |y: &[f64; DIM]| model.derivative(y);

    let mut atol = [options.atol; DIM];
    let flux_atol = options.atol * model.frame.area * inputs.inlet_velocity;
    atol[N_SPECIES] = flux_atol;
    atol[N_SPECIES + 1] = flux_atol;
    let max_inlet = inputs
        .inlet_concentrations
        .iter()
        .cloned()
        .fold(0.0, f64::max);
    let negative_floor = -1e-10 * max_inlet.max(1.0);

    let mut y = initial_vector(inputs);
    let mut k1 = f(&y).map_err(|a| model.frame.overflow(0.0, a))?;
    stats.rhs_evaluations += 1;
    observe(0.0, &y, &k1, true);

    let mut h = initial_step(&f, &y, &k1, &atol, options.rtol, length, &mut stats);
    let mut attempts = 0usize;

    for w in reactor.zone_bounds.windows(2) {
        let (mut z, end) = (w[0], w[1]);
        while z < end {
            if attempts >= options.max_steps {
                return Err(SolveError::StepLimit {
                    z,
                    steps: options.max_steps,
                });
            }
            attempts += 1;
            let remaining = end - z;
            let last = h >= remaining * (1.0 - 1e-12);
            let z_new = if last { end } else { z + h };
            // the effective step is what a replay over the grid will see
            let h_try = z_new - z;
            if h_try <= 16.0 * f64::EPSILON * z.abs().max(length) {
                return Err(SolveError::StepSizeUnderflow {
                    z,
                    alpha_gas: y[N2] * M_N2 / model.frame.rho_gas,
                });
            }
            stats.rhs_evaluations += 5;
            let step = match ode::step(&f, &y, &k1, h_try) {
                Ok(s) => s,
                Err(alpha_gas) => {
                    // a trial stage crossed the gas limit; retry smaller and
                    // give up once the step cannot shrink further
                    stats.rejected_steps += 1;
                    h = h_try * 0.25;
                    if h <= 1e-12 * length {
                        return Err(model.frame.overflow(z, alpha_gas));
                    }
                    continue;
                }
            };
            if step.y.iter().any(|v| !v.is_finite()) {
                stats.rejected_steps += 1;
                h = h_try * 0.25;
                if h <= 1e-12 * length {
                    return Err(SolveError::NonFinite { z });
                }
                continue;
            }
            let mut err: f64 = 0.0;
            for i in 0..DIM {
                let sc = atol[i] + options.rtol * y[i].abs().max(step.y[i].abs());
                err = err.max(step.error[i].abs() / sc);
            }
            let undershoot = step.y[..N_SPECIES].iter().any(|&c| c < negative_floor);
            if err <= 1.0 && !undershoot {
                y = step.y;
                k1 = f(&y).map_err(|a| model.frame.overflow(z_new, a))?;
                stats.rhs_evaluations += 1;
                stats.accepted_steps += 1;
                observe(z_new, &y, &k1, last);
                let factor = if err == 0.0 {
                    5.0
                } else {
                    (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
                };
                let proposed = h_try * factor;
                // a step shortened to hit a boundary says nothing about the
                // admissible step size
                h = if last { proposed.max(h) } else { proposed };
                z = z_new;
            } else {
                stats.rejected_steps += 1;
                let factor = if undershoot {
                    0.5
                } else {
                    (0.9 * err.powf(-0.25)).clamp(0.1, 0.9)
                };
                h = h_try * factor;
            }
        }
    }
    Ok(stats)
}

fn initial_step(
    f: &impl Fn(&[f64; DIM]) -> Result<[f64; DIM], f64>,
    y0: &[f64; DIM],
    f0: &[f64; DIM],
    atol: &[f64; DIM],
    rtol: f64,
    length: f64,
    stats: &mut SolverStats,
) -> f64 {
    let rms = |v: &dyn Fn(usize) -> f64| -> f64 {
        ((0..DIM).map(|i| v(i).powi(2)).sum::<f64>() / DIM as f64).sqrt()
    };
    let sc: Vec<f64> = (0..DIM).map(|i| atol[i] + rtol * y0[i].abs()).collect();
    let d0 = rms(&|i| y0[i] / sc[i]);
    let d1 = rms(&|i| f0[i] / sc[i]);
    if d1 <= 1e-15 {
        return length;
    }
    let h0 = if d0 < 1e-5 {
        1e-6 * length
    } else {
        (0.01 * d0 / d1).min(length)
    };
    let mut y1 = *y0;
    for i in 0..DIM {
        y1[i] += h0 * f0[i];
    }
    stats.rhs_evaluations += 1;
    let d2 = match f(&y1) {
        Ok(f1) => rms(&|i| (f1[i] - f0[i]) / sc[i]) / h0,
        Err(_) => return h0 * 1e-3,
    };
    let dmax = d1.max(d2);
    let h1 = if dmax <= 1e-15 {
        (h0 * 1e-3).max(1e-6 * length)
    } else {
        (0.01 / dmax).powf(0.2)
    };
    (100.0 * h0).min(h1).min(length)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{bundled, SimulationInputs};
    use crate::kinetics::{ArrheniusParams, DecompositionMode, InputScaling};
    use approx::assert_relative_eq;

    fn greybox_like() -> KineticParameters {
        KineticParameters {
            synthesis: ArrheniusParams::new(18.1, 72570.0).unwrap(),
            decomposition: DecompositionModel::Arrhenius(
                ArrheniusParams::new(11.8, 60000.0).unwrap(),
            ),
            gamma: 295.45,
            enthalpy_synthesis: 135.7e3,
            enthalpy_decomposition: 26.0e3,
        }
    }

    fn calorimeter_inputs(t_c: f64, tau: f64, gauge_bar: f64) -> SimulationInputs {
        SimulationInputs::at_conditions(
            &bundled::calorimeter_reactor(),
            t_c + 273.15,
            tau,
            gauge_bar * 1e5,
        )
        .unwrap()
    }

    #[test]
    fn gas_density_values() {
        let rho = gas_density(101_325.0, 293.15).unwrap();
        // 101325 * 0.028014 / (8.314 * 293.15) with 50-digit arithmetic
        assert_relative_eq!(rho, 1.164_640_311_078_584_5, max_relative = 1e-14);
        assert_relative_eq!(
            gas_density(202_650.0, 293.15).unwrap(),
            2.0 * rho,
            max_relative = 1e-15
        );
        assert_relative_eq!(
            gas_density(101_325.0, 586.3).unwrap(),
            0.5 * rho,
            max_relative = 1e-15
        );
        assert!(gas_density(0.0, 300.0).is_err());
        assert!(gas_density(1e5, -1.0).is_err());
        assert_eq!(reference_gas_density(), rho);
    }

    #[test]
    fn closure_cases() {
        let inputs = calorimeter_inputs(20.0, 50.0, 0.0);
        let mut c = inputs.inlet_concentrations;
        let ph = closure(&c, &inputs).unwrap();
        assert_eq!(ph.alpha_gas, 0.0);
        assert_eq!(ph.velocity, inputs.inlet_velocity);

        let rho = gas_density(inputs.absolute_pressure, inputs.temperature).unwrap();
        c[N2] = 0.5 * rho / M_N2;
        let ph = closure(&c, &inputs).unwrap();
        assert_relative_eq!(ph.alpha_gas, 0.5, max_relative = 1e-14);
        assert_relative_eq!(
            ph.velocity / inputs.inlet_velocity,
            1.997_673_428_996_220_4,
            max_relative = 1e-12
        );

        c[N2] = rho / M_N2;
        assert!(matches!(
            closure(&c, &inputs),
            Err(SolveError::GasOverflow { .. })
        ));
    }

    #[test]
    fn rhs_zero_kinetics() {
        let inputs = calorimeter_inputs(70.0, 26.7, 0.0);
        let params = KineticParameters::inert(DecompositionMode::Neural);
        let mut state = inlet_state(&inputs).unwrap();
        state.concentrations[DAN] = 300.0;
        assert_eq!(rhs(&state, &params, &inputs).unwrap(), [0.0; N_SPECIES]);
    }

    #[test]
    fn rhs_conserved_combinations() {
        let inputs = calorimeter_inputs(55.0, 53.3, 3.0);
        let params = greybox_like();
        let mut state = inlet_state(&inputs).unwrap();
        state.concentrations[AAN] = 600.0;
        state.concentrations[NITRITE] = 800.0;
        state.concentrations[DAN] = 390.0;
        state.concentrations[N2] = 10.0;
        let ph = closure(&state.concentrations, &inputs).unwrap();
        state.alpha_gas = ph.alpha_gas;
        state.alpha_liquid = ph.alpha_liquid;
        state.velocity = ph.velocity;
        let d = rhs(&state, &params, &inputs).unwrap();
        let scale = d.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!((d[AAN] + d[DAN] + d[N2]).abs() <= 1e-14 * scale);
        assert!((d[NITRITE] + d[DAN] + d[N2]).abs() <= 1e-14 * scale);
    }

    #[test]
    fn rhs_at_inlet() {
        let inputs = calorimeter_inputs(35.0, 26.7, 0.0);
        let d = rhs(&inlet_state(&inputs).unwrap(), &greybox_like(), &inputs).unwrap();
        assert_eq!(d[N2], 0.0);
        assert!(d[DAN] > 0.0);
        assert!(d[AAN] < 0.0);
    }

    #[test]
    fn rhs_rejects_full_gas() {
        let inputs = calorimeter_inputs(35.0, 26.7, 0.0);
        let mut state = inlet_state(&inputs).unwrap();
        state.alpha_liquid = 0.0;
        state.alpha_gas = 1.0;
        assert!(matches!(
            rhs(&state, &greybox_like(), &inputs),
            Err(SolveError::GasOverflow { .. })
        ));
    }

    #[test]
    fn zero_kinetics_profile_is_constant() {
        let inputs = calorimeter_inputs(70.0, 26.7, 0.0);
        let params = KineticParameters::inert(DecompositionMode::Arrhenius);
        let profile = solve(&inputs, &params).unwrap();
        for s in &profile.samples {
            assert_eq!(s.concentrations, inputs.inlet_concentrations);
            assert_eq!(s.velocity, inputs.inlet_velocity);
        }
        let obs = profile.observables(&params);
        assert_eq!(obs.band_area, 0.0);
        assert_eq!(obs.gas_flow, 0.0);
        assert_eq!(obs.zone_heats, vec![0.0; 7]);
    }

    #[test]
    fn synthesis_only_conserves_educt() {
        let inputs = calorimeter_inputs(35.0, 53.3, 0.0);
        let mut params = greybox_like();
        params.decomposition =
            DecompositionModel::Neural(NeuralDecomposition::zeros(InputScaling::default()));
        let out = *solve(&inputs, &params).unwrap().outlet();
        assert_eq!(out.concentrations[N2], 0.0);
        let expected = inputs.inlet_concentrations[AAN] - out.concentrations[AAN];
        assert_relative_eq!(out.concentrations[DAN], expected, max_relative = 1e-12);
    }

    #[test]
    fn profile_invariants() {
        let inputs = calorimeter_inputs(70.0, 106.7, 6.0);
        let profile = solve(&inputs, &greybox_like()).unwrap();
        let first = profile.inlet();
        let flux0 = first.mass_flux(1000.0);
        let mut prev = first;
        for s in &profile.samples[1..] {
            assert!(s.z > prev.z);
            assert!(s.concentrations[N2] >= prev.concentrations[N2]);
            assert!(s.concentrations[AAN] <= prev.concentrations[AAN]);
            assert_eq!(s.alpha_gas + s.alpha_liquid, 1.0);
            assert_relative_eq!(s.mass_flux(1000.0), flux0, max_relative = 1e-12);
            prev = s;
        }
        assert_eq!(profile.outlet().z, inputs.reactor.length);
        for b in &inputs.reactor.zone_bounds {
            assert!(profile.samples.iter().any(|s| s.z == *b));
        }
    }

    #[test]
    fn tolerance_refinement_is_consistent() {
        let inputs = calorimeter_inputs(55.0, 26.7, 3.0);
        let params = greybox_like();
        let coarse = solve(&inputs, &params).unwrap();
        let fine = solve_with(
            &inputs,
            &params,
            &SolverOptions {
                rtol: 0.5e-8,
                atol: 0.5e-6,
                ..Default::default()
            },
        )
        .unwrap();
        for (a, b) in coarse
            .outlet()
            .concentrations
            .iter()
            .zip(fine.outlet().concentrations)
        {
            assert!((a - b).abs() <= 10.0 * 1e-8 * b.abs() + 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn simulate_and_replay_match_profile() {
        let inputs = calorimeter_inputs(55.0, 53.3, 0.0);
        let params = greybox_like();
        let profile = solve(&inputs, &params).unwrap();
        let (outcome, grid) = simulate(&inputs, &params, &SolverOptions::default()).unwrap();
        let a = profile.observables(&params);
        let b = outcome.observables(&params);
        assert_eq!(a.band_area, b.band_area);
        assert_eq!(a.gas_flow, b.gas_flow);
        for (x, y) in a.zone_heats.iter().zip(&b.zone_heats) {
            assert_relative_eq!(*x, *y, max_relative = 1e-12);
        }
        let replayed = replay(&inputs, &params, &grid, &SolverOptions::default()).unwrap();
        assert_eq!(replayed, outcome);
        assert_eq!(grid.boundaries.len(), 8);
    }

    #[test]
    fn measurement_models() {
        let inputs = calorimeter_inputs(55.0, 53.3, 0.0);
        let params = greybox_like();
        let profile = solve(&inputs, &params).unwrap();
        let b1 = band_area(&profile, 300.0);
        assert_relative_eq!(band_area(&profile, 600.0), 0.5 * b1, max_relative = 1e-15);
        let out = profile.outlet();
        assert_relative_eq!(
            b1 * 300.0,
            out.concentrations[DAN] / out.alpha_liquid,
            max_relative = 1e-15
        );

        let heats = zone_heats(
            &profile,
            params.enthalpy_synthesis,
            params.enthalpy_decomposition,
            &inputs.reactor,
        );
        let single = inputs.reactor.rezoned(1).unwrap();
        let total = zone_heats(
            &profile,
            params.enthalpy_synthesis,
            params.enthalpy_decomposition,
            &single,
        );
        assert_relative_eq!(heats.iter().sum::<f64>(), total[0], max_relative = 1e-12);
        assert!(heats.iter().all(|&q| q >= 0.0));
        // heat decays along the channel
        assert!(heats[0] > heats[6]);
    }

    #[test]
    fn hermite_interpolation_off_grid() {
        let inputs = calorimeter_inputs(35.0, 106.7, 3.0);
        let params = greybox_like();
        let profile = solve(&inputs, &params).unwrap();
        let seg = inputs.reactor.rezoned(13).unwrap();
        let heats = zone_heats(&profile, 1.0, 0.0, &seg);
        let whole = profile.outlet().turnover[0];
        assert_relative_eq!(heats.iter().sum::<f64>(), whole, max_relative = 1e-12);
        // compare against a solve whose grid contains the 13-zone bounds
        let direct_inputs = SimulationInputs {
            reactor: seg.clone(),
            ..inputs.clone()
        };
        let direct = solve(&direct_inputs, &params).unwrap();
        let direct_heats = zone_heats(&direct, 1.0, 0.0, &seg);
        for (a, b) in heats.iter().zip(&direct_heats) {
            assert!(
                (a - b).abs() <= 1e-4 * b.abs().max(whole * 1e-6),
                "{a} vs {b}"
            );
        }
    }

    #[test]
    fn gas_flow_at_reference_conditions() {
        // at 1 atm and 20 °C the conversion factor is one
        let inputs = calorimeter_inputs(20.0, 106.7, 0.0);
        let mut params = greybox_like();
        params.decomposition =
            DecompositionModel::Arrhenius(ArrheniusParams::new(-12.0, 0.0).unwrap());
        let profile = solve(&inputs, &params).unwrap();
        let out = profile.outlet();
        let volumetric = inputs.reactor.cross_section_area * out.velocity * out.alpha_gas * 6.0e7;
        assert!(volumetric > 0.0);
        assert_relative_eq!(
            gas_flow_rate(&profile, &inputs.reactor),
            volumetric,
            max_relative = 1e-12
        );
    }

    #[test]
    fn heavy_decomposition_overflows() {
        let inputs = calorimeter_inputs(70.0, 106.7, 0.0);
        let mut params = greybox_like();
        params.decomposition =
            DecompositionModel::Arrhenius(ArrheniusParams::new(0.0, 0.0).unwrap());
        match solve(&inputs, &params) {
            Err(SolveError::GasOverflow { z, temperature, .. }) => {
                assert!(z > 0.0 && z < inputs.reactor.length);
                assert_eq!(temperature, inputs.temperature);
            }
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn step_limit_reported() {
        let inputs = calorimeter_inputs(70.0, 106.7, 0.0);
        let opts = SolverOptions {
            max_steps: 3,
            ..Default::default()
        };
        assert!(matches!(
            solve_with(&inputs, &greybox_like(), &opts),
            Err(SolveError::StepLimit { steps: 3, .. })
        ));
    }

    #[test]
    fn profile_csv_layout() {
        let inputs = calorimeter_inputs(35.0, 26.7, 0.0);
        let profile = solve(&inputs, &greybox_like()).unwrap();
        let mut buf = Vec::new();
        profile.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(
            header,
            "z_m,aan_hcl_mol_m3,nano2_mol_m3,dan_mol_m3,nacl_mol_m3,h2o_mol_m3,n2_mol_m3,carbene_mol_m3,alpha_gas,u_m_s"
        );
        assert_eq!(text.lines().count(), profile.samples.len() + 1);
    }
}
