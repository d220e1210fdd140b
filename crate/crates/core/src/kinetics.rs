//! Reaction rates for the two-reaction network.
//!
//! The synthesis (diazotization) always follows a second-order Arrhenius
//! law. The decomposition is either a first-order Arrhenius law or a small
//! neural network `f([DAN], T, p)` multiplying the DAN concentration; the
//! network uses `max(0, x³)` after both layers so its output never goes
//! negative.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Universal gas constant [J/(K·mol)].
pub const GAS_CONSTANT: f64 = 8.314;

/// Hidden layer width of the decomposition network.
pub const HIDDEN: usize = 4;
/// Network inputs: DAN concentration, temperature, pressure.
pub const INPUTS: usize = 3;
/// Trainable entries of the network (16 weights, 5 biases).
pub const NN_PARAM_COUNT: usize = HIDDEN * INPUTS + HIDDEN + HIDDEN + 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KineticsError {
    #[error("temperature must be positive, got {0} K")]
    NonPositiveTemperature(f64),
    #[error("invalid kinetic parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrheniusParams {
    /// Natural log of the pre-exponential factor.
    pub log_a: f64,
    /// Activation energy [J/mol].
    pub activation_energy: f64,
}

impl ArrheniusParams {
    pub fn new(log_a: f64, activation_energy: f64) -> Result<Self, KineticsError> {
        let p = Self {
            log_a,
            activation_energy,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), KineticsError> {
        if !self.log_a.is_finite() {
            return Err(KineticsError::InvalidParameter(format!(
                "log_A must be finite, got {}",
                self.log_a
            )));
        }
        if !(self.activation_energy >= 0.0) || !self.activation_energy.is_finite() {
            return Err(KineticsError::InvalidParameter(format!(
                "activation energy must be finite and non-negative, got {}",
                self.activation_energy
            )));
        }
        Ok(())
    }

    pub fn rate_constant(&self, temperature: f64) -> Result<f64, KineticsError> {
        rate_constant(self, temperature)
    }
}

/// Arrhenius rate coefficient `exp(log_A - E_a / (R T))`.
pub fn rate_constant(params: &ArrheniusParams, temperature: f64) -> Result<f64, KineticsError> {
    if !(temperature > 0.0) {
        return Err(KineticsError::NonPositiveTemperature(temperature));
    }
    Ok((params.log_a - params.activation_energy / (GAS_CONSTANT * temperature)).exp())
}

/// Second-order synthesis rate `kf · [AAN] · [NO2-]` in mol/(m³·s).
///
/// Negative inputs (integrator undershoot) are treated as zero.
#[inline]
pub fn synthesis_rate(kf: f64, c_aan: f64, c_nitrite: f64) -> f64 {
    kf * c_aan.max(0.0) * c_nitrite.max(0.0)
}

/// The network activation `max(0, x³)`.
#[inline]
pub fn activation(x: f64) -> f64 {
    if x > 0.0 {
        x * x * x
    } else {
        0.0
    }
}

/// Derivative of [`activation`]; the subgradient at the kink is 0.
#[inline]
pub fn activation_derivative(x: f64) -> f64 {
    if x > 0.0 {
        3.0 * x * x
    } else {
        0.0
    }
}

/// Fixed affine map applied to `([DAN], T, p)` before the first layer:
/// `x̃_i = (x_i - offset_i) / scale_i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub offset: [f64; INPUTS],
    pub scale: [f64; INPUTS],
}

impl Default for InputScaling {
    fn default() -> Self {
        Self {
            offset: [0.0, 293.15, 0.0],
            scale: [1000.0, 50.0, 1.0e5],
        }
    }
}

impl InputScaling {
    /// No-op scaling, handy for hand-checking network arithmetic.
    pub fn identity() -> Self {
        Self {
            offset: [0.0; INPUTS],
            scale: [1.0; INPUTS],
        }
    }

    #[inline]
    pub fn apply(&self, x: [f64; INPUTS]) -> [f64; INPUTS] {
        let mut out = [0.0; INPUTS];
        for i in 0..INPUTS {
            out[i] = (x[i] - self.offset[i]) / self.scale[i];
        }
        out
    }

    fn validate(&self) -> Result<(), KineticsError> {
        for i in 0..INPUTS {
            if !self.offset[i].is_finite() || !self.scale[i].is_finite() || self.scale[i] == 0.0 {
                return Err(KineticsError::InvalidParameter(format!(
                    "input scaling entry {i} must be finite with a nonzero scale"
                )));
            }
        }
        Ok(())
    }
}

/// Single-hidden-layer network for the DAN decomposition frequency `f` [1/s].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuralDecomposition {
    pub w1: [[f64; INPUTS]; HIDDEN],
    pub b1: [f64; HIDDEN],
    pub w2: [f64; HIDDEN],
    pub b2: f64,
    #[serde(default)]
    pub input_scaling: InputScaling,
}

impl Default for NeuralDecomposition {
    fn default() -> Self {
        Self::zeros(InputScaling::default())
    }
}

impl NeuralDecomposition {
    pub fn zeros(input_scaling: InputScaling) -> Self {
        Self {
            w1: [[0.0; INPUTS]; HIDDEN],
            b1: [0.0; HIDDEN],
            w2: [0.0; HIDDEN],
            b2: 0.0,
            input_scaling,
        }
    }

    /// Builds a network from its 21 trainable entries, ordered as
    /// `W1` (row-major), `b1`, `W2`, `b2`.
    pub fn from_flat(values: &[f64], input_scaling: InputScaling) -> Self {
        assert_eq!(values.len(), NN_PARAM_COUNT, "network parameter count");
        let mut nn = Self::zeros(input_scaling);
        let mut it = values.iter().copied();
        for row in nn.w1.iter_mut() {
            for w in row.iter_mut() {
                *w = it.next().unwrap();
            }
        }
        for b in nn.b1.iter_mut() {
            *b = it.next().unwrap();
        }
        for w in nn.w2.iter_mut() {
            *w = it.next().unwrap();
        }
        nn.b2 = it.next().unwrap();
        nn
    }

    /// Inverse of [`NeuralDecomposition::from_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(NN_PARAM_COUNT);
        for row in &self.w1 {
            out.extend_from_slice(row);
        }
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.push(self.b2);
        out
    }

    fn validate(&self) -> Result<(), KineticsError> {
        if self.to_flat().iter().any(|v| !v.is_finite()) {
            return Err(KineticsError::InvalidParameter(
                "network weights and biases must be finite".into(),
            ));
        }
        self.input_scaling.validate()
    }

    #[inline]
    pub fn forward(&self, c_dan: f64, temperature: f64, pressure: f64) -> f64 {
        nn_forward(self, c_dan, temperature, pressure)
    }

    /// Output `f` together with `∂f/∂θ` for the 21 trainable entries, in the
    /// order of [`NeuralDecomposition::to_flat`].
    pub fn forward_with_gradient(
        &self,
        c_dan: f64,
        temperature: f64,
        pressure: f64,
    ) -> (f64, [f64; NN_PARAM_COUNT]) {
        let x = self.input_scaling.apply([c_dan, temperature, pressure]);
        let mut pre = [0.0; HIDDEN];
        let mut hidden = [0.0; HIDDEN];
        let mut out_pre = self.b2;
        for j in 0..HIDDEN {
            let w = &self.w1[j];
            pre[j] = self.b1[j] + w[0] * x[0] + w[1] * x[1] + w[2] * x[2];
            hidden[j] = activation(pre[j]);
            out_pre += self.w2[j] * hidden[j];
        }
        let f = activation(out_pre);
        let d_out = activation_derivative(out_pre);

        let mut grad = [0.0; NN_PARAM_COUNT];
        let (g_w1, rest) = grad.split_at_mut(HIDDEN * INPUTS);
        let (g_b1, rest) = rest.split_at_mut(HIDDEN);
        let (g_w2, g_b2) = rest.split_at_mut(HIDDEN);
        g_b2[0] = d_out;
        for j in 0..HIDDEN {
            g_w2[j] = d_out * hidden[j];
            let d_hidden = d_out * self.w2[j] * activation_derivative(pre[j]);
            g_b1[j] = d_hidden;
            for i in 0..INPUTS {
                g_w1[j * INPUTS + i] = d_hidden * x[i];
            }
        }
        (f, grad)
    }
}

/// Decomposition frequency `f = σ(W2 · σ(W1 · x̃ + b1) + b2)` [1/s].
#[inline]
pub fn nn_forward(net: &NeuralDecomposition, c_dan: f64, temperature: f64, pressure: f64) -> f64 {
    let x = net.input_scaling.apply([c_dan, temperature, pressure]);
    let mut out = net.b2;
    for j in 0..HIDDEN {
        let w = &net.w1[j];
        let pre = net.b1[j] + w[0] * x[0] + w[1] * x[1] + w[2] * x[2];
        out += net.w2[j] * activation(pre);
    }
    activation(out)
}

/// Which form the decomposition rate takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecompositionMode {
    #[serde(rename = "nn")]
    Neural,
    #[serde(rename = "arrhenius")]
    Arrhenius,
}

impl DecompositionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DecompositionMode::Neural => "nn",
            DecompositionMode::Arrhenius => "arrhenius",
        }
    }
}

impl std::fmt::Display for DecompositionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DecompositionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nn" | "neural" => Ok(DecompositionMode::Neural),
            "arrhenius" => Ok(DecompositionMode::Arrhenius),
            other => Err(format!(
                "unknown decomposition mode `{other}` (expected nn or arrhenius)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecompositionModel {
    Arrhenius(ArrheniusParams),
    Neural(NeuralDecomposition),
}

impl DecompositionModel {
    pub fn mode(&self) -> DecompositionMode {
        match self {
            DecompositionModel::Arrhenius(_) => DecompositionMode::Arrhenius,
            DecompositionModel::Neural(_) => DecompositionMode::Neural,
        }
    }

    pub fn rate(&self, c_dan: f64, temperature: f64, pressure: f64) -> Result<f64, KineticsError> {
        decomposition_rate(self, c_dan, temperature, pressure)
    }
}

/// Decomposition rate `Q2` [mol/(m³·s)], first order in DAN for both forms.
pub fn decomposition_rate(
    model: &DecompositionModel,
    c_dan: f64,
    temperature: f64,
    pressure: f64,
) -> Result<f64, KineticsError> {
    let c = c_dan.max(0.0);
    if c == 0.0 {
        return Ok(0.0);
    }
    match model {
        DecompositionModel::Arrhenius(p) => Ok(rate_constant(p, temperature)? * c),
        DecompositionModel::Neural(nn) => {
            if !(temperature > 0.0) {
                return Err(KineticsError::NonPositiveTemperature(temperature));
            }
            Ok(nn_forward(nn, c, temperature, pressure) * c)
        }
    }
}

/// Everything the grey-box model can calibrate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KineticParameters {
    pub synthesis: ArrheniusParams,
    pub decomposition: DecompositionModel,
    /// Band-area proportionality factor γ [mol/m³ per a.u.].
    pub gamma: f64,
    /// Heat released per mole of DAN formed [J/mol].
    pub enthalpy_synthesis: f64,
    /// Heat released per mole of DAN decomposed [J/mol].
    pub enthalpy_decomposition: f64,
}

impl KineticParameters {
    /// Parameters with every rate exactly zero.
    pub fn inert(mode: DecompositionMode) -> Self {
        let dead = ArrheniusParams {
            log_a: -1.0e3,
            activation_energy: 0.0,
        };
        let decomposition = match mode {
            DecompositionMode::Arrhenius => DecompositionModel::Arrhenius(dead),
            DecompositionMode::Neural => DecompositionModel::Neural(NeuralDecomposition::default()),
        };
        Self {
            synthesis: dead,
            decomposition,
            gamma: 300.0,
            enthalpy_synthesis: 1.0e5,
            enthalpy_decomposition: 3.0e4,
        }
    }

    pub fn validate(&self) -> Result<(), KineticsError> {
        self.synthesis.validate()?;
        match &self.decomposition {
            DecompositionModel::Arrhenius(p) => p.validate()?,
            DecompositionModel::Neural(nn) => nn.validate()?,
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(KineticsError::InvalidParameter(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        if !self.enthalpy_synthesis.is_finite() || !self.enthalpy_decomposition.is_finite() {
            return Err(KineticsError::InvalidParameter(
                "enthalpies must be finite".into(),
            ));
        }
        Ok(())
    }

    /// Reads the TOML parameter file format.
    pub fn from_toml_str(text: &str) -> Result<Self, ParamFileError> {
        let file: ParameterFile = toml::from_str(text)?;
        let params = Self::from(file);
        params.validate()?;
        Ok(params)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(&ParameterFile::from(*self)).expect("parameter file serializes")
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, ParamFileError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ParamFileError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), ParamFileError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml_string()).map_err(|source| ParamFileError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

#[derive(Debug, Error)]
pub enum ParamFileError {
    #[error("cannot access parameter file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed parameter file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Invalid(#[from] KineticsError),
}

/// On-disk layout of [`KineticParameters`].
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParameterFile {
    log_a1: f64,
    /// [J/mol]
    ea1: f64,
    gamma: f64,
    /// [J/mol]
    dh1: f64,
    /// [J/mol]
    dh2: f64,
    decomposition: DecompositionFile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode")]
enum DecompositionFile {
    #[serde(rename = "arrhenius")]
    Arrhenius { log_a2: f64, ea2: f64 },
    #[serde(rename = "nn")]
    Neural(NeuralDecomposition),
}

impl From<KineticParameters> for ParameterFile {
    fn from(p: KineticParameters) -> Self {
        let decomposition = match p.decomposition {
            DecompositionModel::Arrhenius(a) => DecompositionFile::Arrhenius {
                log_a2: a.log_a,
                ea2: a.activation_energy,
            },
            DecompositionModel::Neural(nn) => DecompositionFile::Neural(nn),
        };
        Self {
            log_a1: p.synthesis.log_a,
            ea1: p.synthesis.activation_energy,
            gamma: p.gamma,
            dh1: p.enthalpy_synthesis,
            dh2: p.enthalpy_decomposition,
            decomposition,
        }
    }
}

impl From<ParameterFile> for KineticParameters {
    fn from(f: ParameterFile) -> Self {
        let decomposition = match f.decomposition {
            DecompositionFile::Arrhenius { log_a2, ea2 } => {
                DecompositionModel::Arrhenius(ArrheniusParams {
                    log_a: log_a2,
                    activation_energy: ea2,
                })
            }
            DecompositionFile::Neural(nn) => DecompositionModel::Neural(nn),
        };
        Self {
            synthesis: ArrheniusParams {
                log_a: f.log_a1,
                activation_energy: f.ea1,
            },
            decomposition,
            gamma: f.gamma,
            enthalpy_synthesis: f.dh1,
            enthalpy_decomposition: f.dh2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rate_constant_physical_synthesis_row() {
        // exp(20.6 - 80250 / (8.314 * 293.15)), evaluated with 50-digit arithmetic.
        let p = ArrheniusParams::new(20.6, 80250.0).unwrap();
        let k = rate_constant(&p, 293.15).unwrap();
        assert_relative_eq!(k, 4.432_857_473_398_7e-6, max_relative = 1e-9);
    }

    #[test]
    fn rate_constant_without_activation_energy() {
        let p = ArrheniusParams::new(-3.2, 0.0).unwrap();
        for t in [1.0, 293.15, 1.0e4] {
            assert_eq!(rate_constant(&p, t).unwrap(), (-3.2f64).exp());
        }
    }

    #[test]
    fn rate_constant_increases_with_temperature() {
        let p = ArrheniusParams::new(18.1, 72570.0).unwrap();
        assert!(p.rate_constant(343.15).unwrap() > p.rate_constant(293.15).unwrap());
    }

    #[test]
    fn rate_constant_rejects_non_positive_temperature() {
        let p = ArrheniusParams::new(1.0, 1.0).unwrap();
        assert_eq!(
            rate_constant(&p, 0.0),
            Err(KineticsError::NonPositiveTemperature(0.0))
        );
        assert!(rate_constant(&p, -5.0).is_err());
    }

    #[test]
    fn arrhenius_validation() {
        assert!(ArrheniusParams::new(f64::NAN, 1.0).is_err());
        assert!(ArrheniusParams::new(1.0, -1.0).is_err());
    }

    #[test]
    fn synthesis_rate_cases() {
        assert_eq!(synthesis_rate(3.0, 0.0, 10.0), 0.0);
        assert_eq!(synthesis_rate(1.0, 1000.0, 1200.0), 1.2e6);
        let q = synthesis_rate(2.5e-4, 300.0, 420.0);
        assert_relative_eq!(
            synthesis_rate(2.5e-4, 600.0, 840.0),
            4.0 * q,
            max_relative = 1e-15
        );
    }

    #[test]
    fn zero_network_outputs_zero() {
        let nn = NeuralDecomposition::default();
        assert_eq!(nn.forward(800.0, 330.0, 2.0e5), 0.0);
    }

    #[test]
    fn hand_evaluated_network() {
        let mut nn = NeuralDecomposition::zeros(InputScaling::identity());
        nn.w1[0] = [2.0, 0.0, 0.0];
        nn.w2[0] = 0.5;
        // hidden σ(2) = 8, output σ(0.5 * 8) = 64
        assert_eq!(nn_forward(&nn, 1.0, 0.0, 0.0), 64.0);
    }

    #[test]
    fn negative_preactivations_give_zero() {
        let mut nn = NeuralDecomposition::zeros(InputScaling::default());
        nn.b1 = [-1.0; HIDDEN];
        nn.w2 = [5.0; HIDDEN];
        nn.b2 = -0.1;
        assert_eq!(nn.forward(500.0, 300.0, 1.0e5), 0.0);
    }

    #[test]
    fn decomposition_rate_cases() {
        let arr = DecompositionModel::Arrhenius(ArrheniusParams::new(-10.5, 0.0).unwrap());
        let q = decomposition_rate(&arr, 1000.0, 300.0, 1.0e5).unwrap();
        assert_relative_eq!(q, 1000.0 * (-10.5f64).exp(), max_relative = 1e-15);
        assert_relative_eq!(q, 2.753_644_934_974_7e-2, max_relative = 1e-9);
        assert_eq!(decomposition_rate(&arr, 0.0, 300.0, 1.0e5).unwrap(), 0.0);

        let nn = DecompositionModel::Neural(NeuralDecomposition::default());
        assert_eq!(nn.rate(750.0, 340.0, 3.0e5).unwrap(), 0.0);
        assert!(arr.rate(10.0, -1.0, 1.0e5).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let values: Vec<f64> = (0..NN_PARAM_COUNT).map(|i| i as f64 * 0.1 - 1.0).collect();
        let nn = NeuralDecomposition::from_flat(&values, InputScaling::default());
        assert_eq!(nn.to_flat(), values);
        assert_eq!(NN_PARAM_COUNT, 21);
    }

    #[test]
    fn random_networks_never_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let flat: Vec<f64> = (0..NN_PARAM_COUNT)
                .map(|_| rng.random_range(-10.0..10.0))
                .collect();
            let nn = NeuralDecomposition::from_flat(&flat, InputScaling::default());
            let c = rng.random_range(0.0..2000.0);
            let t = rng.random_range(273.0..373.0);
            let p = rng.random_range(1.0e5..8.0e5);
            let f = nn.forward(c, t, p);
            assert!(f >= 0.0);
            let q = decomposition_rate(&DecompositionModel::Neural(nn), c, t, p).unwrap();
            assert!(q >= 0.0);
        }
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 100 {
            let flat: Vec<f64> = (0..NN_PARAM_COUNT)
                .map(|_| rng.random_range(-1.5..1.5))
                .collect();
            let nn = NeuralDecomposition::from_flat(&flat, InputScaling::default());
            let c = rng.random_range(0.0..1500.0);
            let t = rng.random_range(290.0..345.0);
            let p = rng.random_range(1.0e5..7.0e5);

            // skip points close to an activation kink
            let x = nn.input_scaling.apply([c, t, p]);
            let pre: Vec<f64> = (0..HIDDEN)
                .map(|j| nn.b1[j] + (0..INPUTS).map(|i| nn.w1[j][i] * x[i]).sum::<f64>())
                .collect();
            let out_pre = nn.b2
                + (0..HIDDEN)
                    .map(|j| nn.w2[j] * activation(pre[j]))
                    .sum::<f64>();
            if pre
                .iter()
                .chain(std::iter::once(&out_pre))
                .any(|v| v.abs() < 1e-3)
            {
                continue;
            }

            let (f, grad) = nn.forward_with_gradient(c, t, p);
            assert_eq!(f, nn.forward(c, t, p));
            for k in 0..NN_PARAM_COUNT {
                let h = 1e-6 * flat[k].abs().max(1e-3);
                let mut up = flat.clone();
                let mut dn = flat.clone();
                up[k] += h;
                dn[k] -= h;
                let fd = (NeuralDecomposition::from_flat(&up, nn.input_scaling).forward(c, t, p)
                    - NeuralDecomposition::from_flat(&dn, nn.input_scaling).forward(c, t, p))
                    / (2.0 * h);
                let scale = grad[k].abs().max(1e-8 * f.abs().max(1.0));
                assert!(
                    (fd - grad[k]).abs() <= 1e-5 * scale,
                    "param {k}: analytic {} vs fd {}",
                    grad[k],
                    fd
                );
            }
            checked += 1;
        }
    }

    #[test]
    fn parameter_file_round_trip() {
        let mut nn = NeuralDecomposition::default();
        nn.w1[1] = [0.25, -0.5, 1.0];
        nn.b2 = 0.125;
        let params = KineticParameters {
            synthesis: ArrheniusParams::new(18.1, 72570.0).unwrap(),
            decomposition: DecompositionModel::Neural(nn),
            gamma: 295.45,
            enthalpy_synthesis: 135.7e3,
            enthalpy_decomposition: 26.0e3,
        };
        let text = params.to_toml_string();
        assert!(text.contains("mode = \"nn\""));
        assert_eq!(KineticParameters::from_toml_str(&text).unwrap(), params);

        let arr = KineticParameters {
            decomposition: DecompositionModel::Arrhenius(ArrheniusParams::new(-10.5, 0.0).unwrap()),
            ..params
        };
        let text = arr.to_toml_string();
        assert!(text.contains("mode = \"arrhenius\""));
        assert_eq!(KineticParameters::from_toml_str(&text).unwrap(), arr);
    }

    #[test]
    fn parameter_file_rejects_bad_values() {
        let text = r#"
log_a1 = 18.1
ea1 = -5.0
gamma = 295.0
dh1 = 1.0
dh2 = 1.0
[decomposition]
mode = "arrhenius"
log_a2 = 0.0
ea2 = 0.0
"#;
        assert!(matches!(
            KineticParameters::from_toml_str(text),
            Err(ParamFileError::Invalid(_))
        ));
        assert!(matches!(
            KineticParameters::from_toml_str("log_a1 = 1"),
            Err(ParamFileError::Toml(_))
        ));
    }
}
