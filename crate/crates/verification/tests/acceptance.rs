//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero when any gating criterion fails.

use std::time::{Duration, Instant};

use diazoflow::calibration::{
    self, Experiment, FitReport, Observable, OptimizerSettings, ParameterLayout,
};
use diazoflow::dataio::{
    bundled, celsius_to_kelvin, ReactorConfig, SimulationInputs, ATMOSPHERE, PA_PER_BAR,
};
use diazoflow::kinetics::{
    decomposition_rate, ArrheniusParams, DecompositionMode, DecompositionModel, KineticParameters,
    NeuralDecomposition, GAS_CONSTANT,
};
use diazoflow::pfr::{self, SolveError};
use diazoflow::species::{Species, M_N2, N_SPECIES, STOICHIOMETRY};
use diazoflow::validation::{self, CrossValSettings, FoldScheme};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    /// Informational criteria are printed but never fail the run.
    gating: bool,
    detail: String,
}

impl Outcome {
    fn gate(passed: bool, detail: String) -> Self {
        Self {
            passed,
            gating: true,
            detail,
        }
    }
}

fn within_runtime(elapsed: Duration, limit_s: u64) -> (bool, String) {
    let ok = elapsed <= Duration::from_secs(limit_s);
    (
        ok,
        format!("{:.1} s of {} s", elapsed.as_secs_f64(), limit_s),
    )
}

fn reference_arrhenius() -> KineticParameters {
    KineticParameters {
        synthesis: ArrheniusParams::new(18.1, 72_570.0).unwrap(),
        decomposition: DecompositionModel::Arrhenius(
            ArrheniusParams::new(11.82, 60_000.0).unwrap(),
        ),
        gamma: 295.45,
        enthalpy_synthesis: 135_700.0,
        enthalpy_decomposition: 26_000.0,
    }
}

fn random_parameters(rng: &mut ChaCha8Rng) -> KineticParameters {
    let mode = if rng.random_bool(0.5) {
        DecompositionMode::Neural
    } else {
        DecompositionMode::Arrhenius
    };
    let layout = ParameterLayout::new(mode);
    let mut x = layout.sample(rng);
    // Keep the synthesis rate in the range the experiments probe, so the
    // samples exercise partial conversion rather than instant completion.
    x[0] = rng.random_range(8.0..24.0);
    x[1] = rng.random_range(4.0e4..1.0e5);
    if mode == DecompositionMode::Arrhenius {
        x[2] = rng.random_range(0.0..20.0);
        x[3] = rng.random_range(4.0e4..1.0e5);
    }
    layout.unpack(&x)
}

fn random_inputs(rng: &mut ChaCha8Rng, reactors: &[ReactorConfig; 2]) -> SimulationInputs {
    let reactor = &reactors[rng.random_range(0..2)];
    SimulationInputs::at_conditions(
        reactor,
        celsius_to_kelvin(rng.random_range(20.0..70.0)),
        rng.random_range(10.0..300.0),
        rng.random_range(0.0..6.0) * PA_PER_BAR,
    )
    .unwrap()
}

fn reactors() -> [ReactorConfig; 2] {
    [bundled::mixer_reactor(), bundled::calorimeter_reactor()]
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let reactors = reactors();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut solved, mut overflowed, mut diverged) = (0, 0, 0);
    let mut worst = [0.0f64; 3];
    let mut violations = Vec::new();
    let aan = Species::AminoacetonitrileHcl.index();
    let no2 = Species::SodiumNitrite.index();
    let dan = Species::Dan.index();
    let n2 = Species::Nitrogen.index();
    while solved < 200 {
        let params = random_parameters(&mut rng);
        let inputs = random_inputs(&mut rng, &reactors);
        let profile = match pfr::solve(&inputs, &params) {
            Ok(p) => p,
            // Draws whose trajectory leaves the model's domain have no profile
            // to check; they are counted, not sampled.
            Err(SolveError::GasOverflow { .. }) => {
                overflowed += 1;
                continue;
            }
            Err(SolveError::StepSizeUnderflow { .. } | SolveError::StepLimit { .. }) => {
                diverged += 1;
                continue;
            }
            Err(e) => {
                violations.push(format!("solve failed: {e}"));
                solved += 1;
                continue;
            }
        };
        solved += 1;
        let inlet = profile.inlet();
        let sum_a =
            inlet.concentrations[aan] + inlet.concentrations[dan] + inlet.concentrations[n2];
        let sum_b =
            inlet.concentrations[no2] + inlet.concentrations[dan] + inlet.concentrations[n2];
        let flux0 = inlet.mass_flux(inputs.reactor.liquid_density);
        let mut previous_n2 = f64::NEG_INFINITY;
        for m in &profile.samples {
            let c = &m.concentrations;
            let da = ((c[aan] + c[dan] + c[n2]) - sum_a).abs() / sum_a;
            let db = ((c[no2] + c[dan] + c[n2]) - sum_b).abs() / sum_b;
            let dflux = (m.mass_flux(inputs.reactor.liquid_density) - flux0).abs() / flux0;
            worst = [worst[0].max(da), worst[1].max(db), worst[2].max(dflux)];
            if m.alpha_gas + m.alpha_liquid != 1.0 {
                violations.push(format!(
                    "alpha sum {} at z = {}",
                    m.alpha_gas + m.alpha_liquid,
                    m.z
                ));
            }
            if c[n2] < previous_n2 {
                violations.push(format!("[N2] decreased at z = {}", m.z));
            }
            previous_n2 = c[n2];
        }
    }
    let (time_ok, time) = within_runtime(start.elapsed(), 60);
    let ok = violations.is_empty()
        && worst[0] <= 1e-6
        && worst[1] <= 1e-6
        && worst[2] <= 1e-8
        && time_ok;
    let mut detail = format!(
        "200 samples ({overflowed} gas-overflow and {diverged} non-convergent draws skipped); max rel. drift AAN-sum {:.1e}, nitrite-sum {:.1e}, ρu {:.1e}; {time}",
        worst[0], worst[1], worst[2]
    );
    if let Some(v) = violations.first() {
        detail.push_str(&format!("; {} violations, first: {v}", violations.len()));
    }
    Outcome::gate(ok, detail)
}

/// Explicit Euler on the species balances plus the two turnover integrals,
/// written out from the model equations without the library integrator.
fn euler_observables(
    inputs: &SimulationInputs,
    params: &KineticParameters,
    steps: usize,
) -> [f64; 3] {
    let reactor = &inputs.reactor;
    let t = inputs.temperature;
    let p = inputs.absolute_pressure;
    let rho_g = p * M_N2 / (GAS_CONSTANT * t);
    let rho_l = reactor.liquid_density;
    let flux = rho_l * inputs.inlet_velocity;
    let k1 =
        (params.synthesis.log_a - params.synthesis.activation_energy / (GAS_CONSTANT * t)).exp();
    let phases = |c: &[f64; N_SPECIES]| {
        let alpha_g = c[Species::Nitrogen.index()] * M_N2 / rho_g;
        let alpha_l = 1.0 - alpha_g;
        (alpha_l, flux / (rho_l * alpha_l + rho_g * alpha_g))
    };
    let h = reactor.length / steps as f64;
    let mut c = inputs.inlet_concentrations;
    let mut turnover = [0.0f64; 2];
    for _ in 0..steps {
        let (alpha_l, u) = phases(&c);
        let q1 = k1
            * (c[Species::AminoacetonitrileHcl.index()] / alpha_l).max(0.0)
            * (c[Species::SodiumNitrite.index()] / alpha_l).max(0.0);
        let c_dan = c[Species::Dan.index()] / alpha_l;
        let q2 = decomposition_rate(&params.decomposition, c_dan, t, p).unwrap();
        for (j, row) in STOICHIOMETRY.iter().enumerate() {
            c[j] += h * alpha_l / u * (row[0] * q1 + row[1] * q2);
        }
        turnover[0] += h * reactor.cross_section_area * alpha_l * q1;
        turnover[1] += h * reactor.cross_section_area * alpha_l * q2;
    }
    let (alpha_l, u) = phases(&c);
    let band = c[Species::Dan.index()] / alpha_l / params.gamma;
    let heat =
        params.enthalpy_synthesis * turnover[0] + params.enthalpy_decomposition * turnover[1];
    let rho_ref = ATMOSPHERE * M_N2 / (GAS_CONSTANT * 293.15);
    let gas =
        reactor.cross_section_area * u * c[Species::Nitrogen.index()] * M_N2 / rho_ref * 6.0e7;
    [band, heat, gas]
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let params = reference_arrhenius();
    let reactor = bundled::calorimeter_reactor();
    let conditions = [(20.0, 106.7, 0.0), (45.0, 60.0, 3.0), (70.0, 26.7, 6.0)];
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for (celsius, tau, bar) in conditions {
        let inputs = SimulationInputs::at_conditions(
            &reactor,
            celsius_to_kelvin(celsius),
            tau,
            bar * PA_PER_BAR,
        )
        .unwrap();
        let o = pfr::solve(&inputs, &params).unwrap().observables(&params);
        let adaptive = [o.band_area, o.total_heat(), o.gas_flow];
        let oracle = euler_observables(&inputs, &params, 1_000_000);
        let rel: Vec<f64> = adaptive
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs() / b.abs())
            .collect();
        worst = rel.iter().fold(worst, |m, v| m.max(*v));
        lines.push(format!(
            "{celsius} °C/{bar} bar: {:.1e}",
            rel.iter().cloned().fold(0.0, f64::max)
        ));
    }
    let (time_ok, time) = within_runtime(start.elapsed(), 300);
    Outcome::gate(
        worst <= 1e-4 && time_ok,
        format!(
            "max rel. deviation from 10⁶-step Euler {worst:.2e} ({}); {time}",
            lines.join(", ")
        ),
    )
}

fn synthetic(params: &KineticParameters, mut experiments: Vec<Experiment>) -> Vec<Experiment> {
    for e in &mut experiments {
        let o = pfr::solve(&e.inputs, params).unwrap().observables(params);
        if e.record.band_area.is_some() {
            e.record.band_area = Some(o.band_area);
        }
        if e.record.zone_heats.is_some() {
            e.record.zone_heats = Some(vec![o.total_heat()]);
        }
        if e.record.gas_flow_rate.is_some() {
            e.record.gas_flow_rate = Some(o.gas_flow);
        }
    }
    experiments
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let truth = reference_arrhenius();
    let all = calibration::bundled_experiments();
    // Five mixer and seven calorimeter conditions spread over T and τ.
    let picked = [0, 7, 13, 22, 24, 26, 27, 33, 40, 47, 52, 56];
    let experiments = synthetic(&truth, picked.iter().map(|&i| all[i].clone()).collect());
    let settings = OptimizerSettings {
        n_starts: 10,
        seed: 1,
        ..OptimizerSettings::default()
    };
    let report = calibration::fit(&experiments, &settings, DecompositionMode::Arrhenius).unwrap();
    let ea1 = report.kinetics.synthesis.activation_energy;
    let gamma = report.kinetics.gamma;
    let e_ea = (ea1 - truth.synthesis.activation_energy).abs() / truth.synthesis.activation_energy;
    let e_gamma = (gamma - truth.gamma).abs() / truth.gamma;
    let j0: f64 = settings.weights.iter().sum();
    let (time_ok, time) = within_runtime(start.elapsed(), 600);
    Outcome::gate(
        e_ea <= 0.01 && e_gamma <= 0.01 && report.cost.total < 1e-6 * j0 && time_ok,
        format!(
            "12 conditions, 10 starts: Ea1 {ea1:.1} J/mol ({:.2e} rel.), γ {gamma:.3} ({:.2e} rel.), J/J₀ = {:.2e}; {time}",
            e_ea,
            e_gamma,
            report.cost.total / j0
        ),
    )
}

fn neural_fit() -> (FitReport, Duration) {
    let start = Instant::now();
    let settings = OptimizerSettings {
        n_starts: 20,
        seed: 0,
        ..OptimizerSettings::default()
    };
    let report = calibration::fit(
        &calibration::bundled_experiments(),
        &settings,
        DecompositionMode::Neural,
    )
    .unwrap();
    (report, start.elapsed())
}

fn criterion_4(report: &FitReport, elapsed: Duration) -> Outcome {
    let r2 = |kind| {
        report
            .metrics
            .get(kind)
            .and_then(|m| m.r_squared)
            .unwrap_or(f64::NEG_INFINITY)
    };
    let (band, heat, gas) = (
        r2(Observable::BandArea),
        r2(Observable::Heat),
        r2(Observable::GasFlow),
    );
    let (time_ok, time) = within_runtime(elapsed, 1800);
    Outcome::gate(
        band >= 0.80 && heat >= 0.85 && gas >= 0.85 && time_ok,
        format!(
            "NN mode, 20 starts, J = {:.4}: R² band area {band:.3} (≥ 0.80), heat {heat:.3} (≥ 0.85), gas flow {gas:.3} (≥ 0.85); {time}",
            report.cost.total
        ),
    )
}

fn criterion_5(report: &FitReport) -> Outcome {
    let ea1 = report.kinetics.synthesis.activation_energy / 1e3;
    let dh1 = report.kinetics.enthalpy_synthesis / 1e3;
    let ok = (50.0..=100.0).contains(&ea1) && (90.0..=180.0).contains(&dh1);
    Outcome {
        passed: ok,
        gating: false,
        detail: format!(
            "Ea1 {ea1:.2} kJ/mol in [50, 100] (reference fits 72.57–80.25), ΔH1 {dh1:.1} kJ/mol in [90, 180] (reference fits 122.7–135.7)"
        ),
    }
}

fn criterion_6(full_fit: &FitReport) -> Outcome {
    let start = Instant::now();
    // Each fold refits from the full-data optimum with a single local run.
    let settings = CrossValSettings {
        optimizer: OptimizerSettings {
            n_starts: 1,
            seed: 0,
            warm_start: Some(full_fit.parameters.clone()),
            ..OptimizerSettings::default()
        },
        folds: FoldScheme::LeaveOneOut,
    };
    let experiments = calibration::bundled_experiments();
    let report =
        validation::cross_validate(&experiments, &settings, DecompositionMode::Neural).unwrap();
    let mut ok = report.folds.len() == 57 && report.is_complete();
    let mut parts = Vec::new();
    for kind in Observable::ALL {
        let (train, test) = (
            report.train_mae[kind.index()],
            report.test_mae[kind.index()],
        );
        match (train, test) {
            (Some(a), Some(b)) => {
                ok &= b <= 2.0 * a;
                parts.push(format!(
                    "{} {:.3}/{:.3} = {:.2}",
                    kind.as_str(),
                    b,
                    a,
                    b / a
                ));
            }
            _ => {
                ok = false;
                parts.push(format!("{} missing", kind.as_str()));
            }
        }
    }
    Outcome::gate(
        ok,
        format!(
            "{} folds ({} failed), per-fold multistart 1 warm-started from the full fit; test/train MAE: {}; {:.1} s",
            report.folds.len(),
            report.failed_folds,
            parts.join(", "),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_7() -> Outcome {
    let layout = ParameterLayout::new(DecompositionMode::Neural);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut violations = 0;
    for _ in 0..10_000 {
        let weights: Vec<f64> = (0..diazoflow::kinetics::NN_PARAM_COUNT)
            .map(|_| rng.random_range(-10.0..=10.0))
            .collect();
        let net = NeuralDecomposition::from_flat(&weights, layout.input_scaling);
        let c = rng.random_range(0.0..3000.0);
        let t = rng.random_range(250.0..400.0);
        let p = rng.random_range(ATMOSPHERE..8.0e5);
        let f = net.forward(c, t, p);
        let q2 = decomposition_rate(&DecompositionModel::Neural(net), c, t, p).unwrap();
        if !(f >= 0.0) || !(q2 >= 0.0) {
            violations += 1;
        }
    }
    Outcome::gate(
        violations == 0,
        format!("10⁴ random networks: {violations} violations"),
    )
}

fn criterion_8() -> Outcome {
    let mut failures = Vec::new();
    let mut checked = 0;
    for mode in [DecompositionMode::Neural, DecompositionMode::Arrhenius] {
        let params = KineticParameters::inert(mode);
        for reactor in reactors() {
            for (celsius, tau, bar) in [(20.0, 26.7, 0.0), (45.0, 60.0, 1.4), (70.0, 300.0, 6.0)] {
                let inputs = SimulationInputs::at_conditions(
                    &reactor,
                    celsius_to_kelvin(celsius),
                    tau,
                    bar * PA_PER_BAR,
                )
                .unwrap();
                let profile = pfr::solve(&inputs, &params).unwrap();
                let o = profile.observables(&params);
                checked += 1;
                let label = format!("{mode}/{}/{celsius} °C", reactor.name);
                if profile.outlet().concentrations != inputs.inlet_concentrations {
                    failures.push(format!("{label}: outlet differs from inlet"));
                }
                if o.band_area != 0.0 || o.gas_flow != 0.0 || o.zone_heats.iter().any(|q| *q != 0.0)
                {
                    failures.push(format!("{label}: nonzero observable {}", o.summary_line()));
                }
            }
        }
    }
    let mut detail = format!("{checked} inert simulations");
    if let Some(f) = failures.first() {
        detail.push_str(&format!("; {} failures, first: {f}", failures.len()));
    }
    Outcome::gate(failures.is_empty(), detail)
}

fn report(number: usize, title: &str, outcome: &Outcome) {
    let status = match (outcome.passed, outcome.gating) {
        (true, _) => "PASS",
        (false, true) => "FAIL",
        (false, false) => "FAIL (informational)",
    };
    println!("criterion {number} [{title}] {status}: {}", outcome.detail);
}

fn main() {
    let mut gating_failures = 0;
    let mut record = |number, title, outcome: Outcome| {
        report(number, title, &outcome);
        if outcome.gating && !outcome.passed {
            gating_failures += 1;
        }
    };
    record(1, "forward invariants", criterion_1());
    record(2, "integrator oracle", criterion_2());
    record(3, "self-consistency identification", criterion_3());
    let (fit, fit_time) = neural_fit();
    record(4, "bundled-data fit quality", criterion_4(&fit, fit_time));
    record(5, "parameter plausibility", criterion_5(&fit));
    record(6, "cross-validation", criterion_6(&fit));
    record(7, "non-negative decomposition", criterion_7());
    record(8, "zero-kinetics identity", criterion_8());
    if gating_failures > 0 {
        println!("{gating_failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
