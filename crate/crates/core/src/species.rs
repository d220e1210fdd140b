//! Chemical species of the diazotization / decomposition network and the
//! stoichiometry of its two reactions.
//!
//! Reaction 1 (diazotization):
//! `H2NCH2CN·HCl + NaNO2 -> N2CHCN + NaCl + 2 H2O`
//!
//! Reaction 2 (decomposition):
//! `N2CHCN -> N2 + :CHCN`

/// Standard atomic weights in kg/mol.
mod atomic {
    pub const H: f64 = 1.008e-3;
    pub const C: f64 = 12.011e-3;
    pub const N: f64 = 14.007e-3;
    pub const O: f64 = 15.999e-3;
    pub const NA: f64 = 22.990e-3;
    pub const CL: f64 = 35.45e-3;
}

/// Number of tracked species.
pub const N_SPECIES: usize = 7;
/// Number of reactions.
pub const N_REACTIONS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Species {
    /// Aminoacetonitrile hydrochloride, educt A.
    AminoacetonitrileHcl,
    /// Sodium nitrite, educt B.
    SodiumNitrite,
    /// Diazo acetonitrile.
    Dan,
    SodiumChloride,
    Water,
    Nitrogen,
    /// Cyanomethylene carbene formed by decomposition.
    Carbene,
}

impl Species {
    pub const ALL: [Species; N_SPECIES] = [
        Species::AminoacetonitrileHcl,
        Species::SodiumNitrite,
        Species::Dan,
        Species::SodiumChloride,
        Species::Water,
        Species::Nitrogen,
        Species::Carbene,
    ];

    #[inline]
    pub const fn index(self) -> usize {
        self as usize
    }

    /// Column label used in CSV output.
    pub const fn label(self) -> &'static str {
        match self {
            Species::AminoacetonitrileHcl => "aan_hcl",
            Species::SodiumNitrite => "nano2",
            Species::Dan => "dan",
            Species::SodiumChloride => "nacl",
            Species::Water => "h2o",
            Species::Nitrogen => "n2",
            Species::Carbene => "carbene",
        }
    }

    /// Molar mass in kg/mol, summed from the atomic composition.
    pub const fn molar_mass(self) -> f64 {
        use atomic::*;
        match self {
            // C2H5ClN2
            Species::AminoacetonitrileHcl => 2.0 * C + 5.0 * H + CL + 2.0 * N,
            // NaNO2
            Species::SodiumNitrite => NA + N + 2.0 * O,
            // C2HN3
            Species::Dan => 2.0 * C + H + 3.0 * N,
            Species::SodiumChloride => NA + CL,
            Species::Water => 2.0 * H + O,
            Species::Nitrogen => 2.0 * N,
            // C2HN
            Species::Carbene => 2.0 * C + H + N,
        }
    }
}

/// Molar mass of N2 in kg/mol.
pub const M_N2: f64 = Species::Nitrogen.molar_mass();

/// Net stoichiometric coefficients `nu[species][reaction]` (products positive).
pub const STOICHIOMETRY: [[f64; N_REACTIONS]; N_SPECIES] = [
    [-1.0, 0.0],
    [-1.0, 0.0],
    [1.0, -1.0],
    [1.0, 0.0],
    [2.0, 0.0],
    [0.0, 1.0],
    [0.0, 1.0],
];

/// Net rate of formation of every species for reaction rates `q` [mol/(m³·s)].
#[inline]
pub fn net_production(q: [f64; N_REACTIONS]) -> [f64; N_SPECIES] {
    let mut out = [0.0; N_SPECIES];
    for (o, nu) in out.iter_mut().zip(STOICHIOMETRY.iter()) {
        *o = nu[0] * q[0] + nu[1] * q[1];
    }
    out
}
