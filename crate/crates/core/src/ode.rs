//! Embedded Cash–Karp 5(4) Runge–Kutta step for autonomous systems.
//!
//! The fifth-order solution is propagated (local extrapolation). All of its
//! weights are non-negative, so a component whose derivative has a fixed
//! sign at every stage moves monotonically across a step.

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 3.0 / 5.0;
const C6: f64 = 7.0 / 8.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 3.0 / 10.0;
const A42: f64 = -9.0 / 10.0;
const A43: f64 = 6.0 / 5.0;
const A51: f64 = -11.0 / 54.0;
const A52: f64 = 5.0 / 2.0;
const A53: f64 = -70.0 / 27.0;
const A54: f64 = 35.0 / 27.0;
const A61: f64 = 1631.0 / 55296.0;
const A62: f64 = 175.0 / 512.0;
const A63: f64 = 575.0 / 13824.0;
const A64: f64 = 44275.0 / 110592.0;
const A65: f64 = 253.0 / 4096.0;

/// Fifth-order weights.
pub const B5: [f64; 6] = [
    37.0 / 378.0,
    0.0,
    250.0 / 621.0,
    125.0 / 594.0,
    0.0,
    512.0 / 1771.0,
];
/// Embedded fourth-order weights.
pub const B4: [f64; 6] = [
    2825.0 / 27648.0,
    0.0,
    18575.0 / 48384.0,
    13525.0 / 55296.0,
    277.0 / 14336.0,
    1.0 / 4.0,
];

/// Stage abscissae; unused for autonomous systems but kept for reference.
pub const NODES: [f64; 6] = [0.0, C2, C3, C4, 1.0, C6];

#[inline]
fn combo<const N: usize>(y: &[f64; N], h: f64, terms: &[(f64, &[f64; N])]) -> [f64; N] {
    let mut out = *y;
    for (coef, k) in terms {
        let s = h * coef;
        for i in 0..N {
            out[i] += s * k[i];
        }
    }
    out
}

/// Result of one embedded step.
pub struct Step<const N: usize> {
    /// Fifth-order solution.
    pub y: [f64; N],
    /// Difference between the fifth- and fourth-order solutions.
    pub error: [f64; N],
}

/// Takes one step of size `h` from `y`, where `k1 = f(y)` is already known.
#[inline]
pub fn step<const N: usize, E>(
    f: &impl Fn(&[f64; N]) -> Result<[f64; N], E>,
    y: &[f64; N],
    k1: &[f64; N],
    h: f64,
) -> Result<Step<N>, E> {
    let k2 = f(&combo(y, h, &[(A21, k1)]))?;
    let k3 = f(&combo(y, h, &[(A31, k1), (A32, &k2)]))?;
    let k4 = f(&combo(y, h, &[(A41, k1), (A42, &k2), (A43, &k3)]))?;
    let k5 = f(&combo(
        y,
        h,
        &[(A51, k1), (A52, &k2), (A53, &k3), (A54, &k4)],
    ))?;
    let k6 = f(&combo(
        y,
        h,
        &[(A61, k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)],
    ))?;
    let ks = [k1, &k2, &k3, &k4, &k5, &k6];
    let mut out = *y;
    let mut error = [0.0; N];
    for i in 0..N {
        let mut inc = 0.0;
        let mut err = 0.0;
        for s in 0..6 {
            inc += B5[s] * ks[s][i];
            err += (B5[s] - B4[s]) * ks[s][i];
        }
        out[i] += h * inc;
        error[i] = h * err;
    }
    Ok(Step { y: out, error })
}
