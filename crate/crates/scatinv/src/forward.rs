//! Forward scattering and bound-state solvers: direct radial integration,
//! variable-phase (phase equation) integration for single and coupled
//! channels with real or complex potentials, and bound-state search with
//! deuteron-type observables.
//!
//! These solvers are the cross-checking oracle for the inversion machinery:
//! every reconstructed potential is pushed back through them and compared
//! against the input phase curves.
//!
//! Conventions: potentials are `2mV` in fm^-2 (the radial equation reads
//! `-chi'' + [l(l+1)/r^2 + V] chi = q^2 chi`). Coupled phases are
//! Blatt-Biedenharn eigenphases `(delta_1, delta_2, epsilon)` defined by
//! `S = R(eps) diag(e^{2i d1}, e^{2i d2}) R(eps)^T`.

use nalgebra::Matrix2;
use num_complex::Complex64;
use thiserror::Error;

use crate::quad;
use crate::specfun::{riccati_bessel_deriv_pair, riccati_bessel_pair, riccati_hankel, riccati_hankel_deriv};

pub type CMat2 = Matrix2<Complex64>;

const PI: f64 = std::f64::consts::PI;

#[derive(Debug, Error)]
pub enum ForwardError {
    #[error("step size underflow at r = {0} (stiff or singular potential)")]
    StepUnderflow(f64),
    #[error("asymptotic matching failed: {0}")]
    MatchingFailure(String),
    #[error("eigenphase extraction degenerate at r = {0}")]
    Degeneracy(f64),
}

pub type Result<T> = std::result::Result<T, ForwardError>;

// ---------------------------------------------------------------------------
// Adaptive Dormand-Prince 5(4) integrator over complex state vectors.
// ---------------------------------------------------------------------------

const DP_C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const DP_B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

struct OdeOptions {
    rtol: f64,
    atol: f64,
    /// Integration restarts at each breakpoint so discontinuous right-hand
    /// sides (square wells) do not degrade the order.
    breakpoints: Vec<f64>,
    /// Upper bound on the step, mainly to force dense output when the
    /// trajectory is interpolated afterwards.
    max_step: f64,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions {
            rtol: 1e-10,
            atol: 1e-12,
            breakpoints: Vec::new(),
            max_step: f64::INFINITY,
        }
    }
}

/// Integrate dy/dt = f(t, y) from a to b; calls `on_step(t, y)` after every
/// accepted step (including the initial point). The observer may request a
/// stop by returning false (state remains valid at the last accepted t).
fn integrate<F, O>(f: &F, a: f64, b: f64, y: &mut Vec<Complex64>, opts: &OdeOptions, on_step: &mut O) -> Result<f64>
where
    F: Fn(f64, &[Complex64], &mut [Complex64]),
    O: FnMut(f64, &[Complex64]) -> bool,
{
    let mut segments: Vec<f64> = opts
        .breakpoints
        .iter()
        .copied()
        .filter(|&t| t > a && t < b)
        .collect();
    segments.sort_by(|p, q| p.partial_cmp(q).unwrap());
    segments.push(b);

    let n = y.len();
    let mut k = vec![vec![Complex64::new(0.0, 0.0); n]; 7];
    let mut t = a;
    if !on_step(t, y) {
        return Ok(t);
    }
    let mut h = ((b - a) / 100.0).min(0.1).max(1e-8);

    for &seg_end in &segments {
        while t < seg_end {
            h = h.min(seg_end - t).min(opts.max_step);
            if h < 1e-14 * (1.0 + t.abs()) {
                return Err(ForwardError::StepUnderflow(t));
            }
            f(t, y, &mut k[0]);
            let mut ytmp = vec![Complex64::new(0.0, 0.0); n];
            for s in 0..6 {
                for i in 0..n {
                    let mut acc = y[i];
                    for (j, kj) in k.iter().enumerate().take(s + 1) {
                        if DP_A[s][j] != 0.0 {
                            acc += h * DP_A[s][j] * kj[i];
                        }
                    }
                    ytmp[i] = acc;
                }
                f(t + DP_C[s] * h, &ytmp, &mut k[s + 1]);
            }
            // 5th-order solution and embedded error estimate.
            let mut err = 0.0_f64;
            let mut y5 = vec![Complex64::new(0.0, 0.0); n];
            for i in 0..n {
                let mut v5 = y[i];
                let mut v4 = y[i];
                for (j, kj) in k.iter().enumerate() {
                    if DP_B5[j] != 0.0 {
                        v5 += h * DP_B5[j] * kj[i];
                    }
                    if DP_B4[j] != 0.0 {
                        v4 += h * DP_B4[j] * kj[i];
                    }
                }
                y5[i] = v5;
                let scale = opts.atol + opts.rtol * v5.norm().max(y[i].norm());
                err = err.max((v5 - v4).norm() / scale);
            }
            if err <= 1.0 {
                t += h;
                *y = y5;
                if !on_step(t, y) {
                    return Ok(t);
                }
            }
            let factor = if err > 0.0 {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            } else {
                5.0
            };
            h *= factor;
        }
    }
    Ok(t)
}

// ---------------------------------------------------------------------------
// Variable phase method, single channel.
// ---------------------------------------------------------------------------

/// Accumulated phase function delta(r) and its terminal value.
#[derive(Debug, Clone)]
pub struct PhaseFunction {
    pub r: Vec<f64>,
    pub delta: Vec<Complex64>,
    pub terminal: Complex64,
}

const R_ORIGIN: f64 = 1e-4;

fn double_factorial(n: i32) -> f64 {
    let mut p = 1.0;
    let mut m = n;
    while m > 1 {
        p *= m as f64;
        m -= 2;
    }
    p
}

/// Born-term seed for the phase accumulated on (0, r0]: the integrand is
/// ~ -(V/q) j_l(qr)^2 with j_l ~ (qr)^{l+1}/(2l+1)!!.
fn origin_seed_single(v0: Complex64, q: f64, l: i32, r0: f64) -> Complex64 {
    let df = double_factorial(2 * l + 1);
    let p = 2 * l + 3;
    -v0 / q * q.powi(2 * l + 2) * r0.powi(p) / (p as f64 * df * df)
}

/// Integrate the phase equation
/// `d delta/dr = -(1/q) V(r) (j_l(qr) cos delta - n_l(qr) sin delta)^2`
/// from the origin to r_max. Complex potentials give complex phases.
pub fn phase_eq_single<V>(v: &V, r_max: f64, q: f64, l: i32) -> Result<PhaseFunction>
where
    V: Fn(f64) -> Complex64 + ?Sized,
{
    phase_eq_single_opts(v, r_max, q, l, &[])
}

pub fn phase_eq_single_opts<V>(
    v: &V,
    r_max: f64,
    q: f64,
    l: i32,
    breakpoints: &[f64],
) -> Result<PhaseFunction>
where
    V: Fn(f64) -> Complex64 + ?Sized,
{
    assert!(q > 0.0 && r_max > R_ORIGIN);
    let rhs = |r: f64, y: &[Complex64], dy: &mut [Complex64]| {
        let (j, n) = riccati_bessel_pair(l, q * r).expect("positive argument");
        let s = j * y[0].cos() - n * y[0].sin();
        dy[0] = -v(r) / q * s * s;
    };
    let mut y = vec![origin_seed_single(v(R_ORIGIN), q, l, R_ORIGIN)];
    let mut rs = Vec::new();
    let mut ds = Vec::new();
    let opts = OdeOptions {
        breakpoints: breakpoints.to_vec(),
        ..OdeOptions::default()
    };
    integrate(
        &rhs,
        R_ORIGIN,
        r_max,
        &mut y,
        &opts,
        &mut |t, y: &[Complex64]| {
            rs.push(t);
            ds.push(y[0]);
            true
        },
    )?;
    Ok(PhaseFunction {
        terminal: *ds.last().unwrap(),
        r: rs,
        delta: ds,
    })
}

// ---------------------------------------------------------------------------
// Variable phase method, two coupled channels (matrix Riccati form).
// ---------------------------------------------------------------------------

/// Blatt-Biedenharn phase triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoupledPhases {
    pub delta1: Complex64,
    pub delta2: Complex64,
    pub epsilon: Complex64,
}

#[derive(Debug, Clone)]
pub struct CoupledPhaseFunction {
    pub r: Vec<f64>,
    pub phases: Vec<CoupledPhases>,
    pub terminal: CoupledPhases,
}

/// Eigen-decompose a complex symmetric 2x2 tangent matrix K into
/// `(t1, t2, eps)` with `K = R(eps) diag(t1,t2) R(eps)^T`, choosing the
/// eps branch (mod pi/2, with the associated eigenvalue swap) closest to
/// `eps_prev`.
pub(crate) fn tangent_eigen(k: &CMat2, eps_prev: Complex64) -> (Complex64, Complex64, Complex64) {
    let diff = k[(0, 0)] - k[(1, 1)];
    let half = Complex64::new(0.5, 0.0);
    let a = if diff.norm() < 1e-14 * (k[(0, 1)].norm() + 1.0) && k[(0, 1)].norm() < 1e-14 {
        // Fully degenerate: any rotation works, keep the previous one.
        eps_prev
    } else {
        half * (2.0 * k[(0, 1)] / diff).atan()
    };
    // Branch: eps = a + m*(pi/2) nearest to the previous value.
    let m = ((eps_prev - a).re / (PI / 2.0)).round();
    let eps = a + m * PI / 2.0;
    let (c, s) = (eps.cos(), eps.sin());
    // diag = R^T K R
    let t1 = c * c * k[(0, 0)] + 2.0 * c * s * k[(0, 1)] + s * s * k[(1, 1)];
    let t2 = s * s * k[(0, 0)] - 2.0 * c * s * k[(0, 1)] + c * c * k[(1, 1)];
    (t1, t2, eps)
}

/// atan with the branch shifted by multiples of pi to land nearest `prev`.
fn atan_near(t: Complex64, prev: Complex64) -> Complex64 {
    let base = t.atan();
    let k = ((prev - base).re / PI).round();
    base + k * PI
}

/// Phase from the inverse-tangent representation: delta = pi/2 - atan(m)
/// (mod pi), branch nearest `prev`.
fn acot_near(m: Complex64, prev: Complex64) -> Complex64 {
    let base = PI / 2.0 - m.atan();
    let k = ((prev - base).re / PI).round();
    base + k * PI
}

/// Integrate the coupled phase equations for a symmetric 2x2 potential.
///
/// The authoritative form integrated here is the matrix Riccati equation for
/// the tangent matrix `K(r)`:
/// `K' = -(1/q)(j - K n) V (j - n K)`, with diagonal j = diag(j_l1, j_l2),
/// n = diag(n_l1, n_l2) at qr. When `K` grows large (an eigenphase crossing
/// pi/2) integration switches to `M = K^{-1}`:
/// `M' = (1/q)(M j - n) V (j M - n)`. Eigenphases and mixing are extracted
/// with branch-continuity tracking, so the terminal values carry the full
/// accumulated (Levinson) phases. This avoids the sin(delta1 - delta2)
/// denominators of the scalar eigenphase equations entirely.
pub fn phase_eq_coupled<V>(v: &V, r_max: f64, q: f64, l1: i32, l2: i32) -> Result<CoupledPhaseFunction>
where
    V: Fn(f64) -> CMat2 + ?Sized,
{
    assert!(q > 0.0 && r_max > R_ORIGIN);
    let jn = |r: f64| {
        let (j1, n1) = riccati_bessel_pair(l1, q * r).expect("positive argument");
        let (j2, n2) = riccati_bessel_pair(l2, q * r).expect("positive argument");
        (j1, n1, j2, n2)
    };
    let rhs_k = |r: f64, y: &[Complex64], dy: &mut [Complex64]| {
        let (j1, n1, j2, n2) = jn(r);
        let k = CMat2::new(y[0], y[1], y[1], y[2]);
        let jm = CMat2::new(j1.into(), 0.0.into(), 0.0.into(), j2.into());
        let nm = CMat2::new(n1.into(), 0.0.into(), 0.0.into(), n2.into());
        let left = jm - k * nm;
        let right = jm - nm * k;
        let d = -(left * v(r) * right) / Complex64::new(q, 0.0);
        dy[0] = d[(0, 0)];
        dy[1] = 0.5 * (d[(0, 1)] + d[(1, 0)]);
        dy[2] = d[(1, 1)];
    };
    let rhs_m = |r: f64, y: &[Complex64], dy: &mut [Complex64]| {
        let (j1, n1, j2, n2) = jn(r);
        let m = CMat2::new(y[0], y[1], y[1], y[2]);
        let jm = CMat2::new(j1.into(), 0.0.into(), 0.0.into(), j2.into());
        let nm = CMat2::new(n1.into(), 0.0.into(), 0.0.into(), n2.into());
        let left = m * jm - nm;
        let right = jm * m - nm;
        let d = (left * v(r) * right) / Complex64::new(q, 0.0);
        dy[0] = d[(0, 0)];
        dy[1] = 0.5 * (d[(0, 1)] + d[(1, 0)]);
        dy[2] = d[(1, 1)];
    };

    // Representation switch thresholds (hysteresis so we do not thrash).
    const SWITCH_HI: f64 = 8.0;
    const SWITCH_LO: f64 = 4.0;

    let mut in_k_rep = true;
    let mut y = vec![Complex64::new(0.0, 0.0); 3]; // K = 0 at the origin
    let mut r_cur = R_ORIGIN;

    let mut rs: Vec<f64> = Vec::new();
    let mut phases: Vec<CoupledPhases> = Vec::new();
    let mut prev = CoupledPhases {
        delta1: Complex64::new(0.0, 0.0),
        delta2: Complex64::new(0.0, 0.0),
        epsilon: Complex64::new(0.0, 0.0),
    };

    // Dense output: the trajectory is spline-interpolated by consumers
    // (consistency integrals, absorption fitting), so cap the step.
    let opts = OdeOptions {
        max_step: 0.04,
        ..OdeOptions::default()
    };
    while r_cur < r_max {
        let mut switch = false;
        {
            let mut observer = |t: f64, y: &[Complex64]| {
                let mat = CMat2::new(y[0], y[1], y[1], y[2]);
                let (e1, e2, eps) = tangent_eigen(&mat, prev.epsilon);
                let (d1, d2) = if in_k_rep {
                    (atan_near(e1, prev.delta1), atan_near(e2, prev.delta2))
                } else {
                    (acot_near(e1, prev.delta1), acot_near(e2, prev.delta2))
                };
                prev = CoupledPhases {
                    delta1: d1,
                    delta2: d2,
                    epsilon: eps,
                };
                rs.push(t);
                phases.push(prev);
                let norm = mat.norm();
                let want_switch = if in_k_rep { norm > SWITCH_HI } else { norm > 1.0 / SWITCH_LO };
                if want_switch && t > R_ORIGIN {
                    switch = true;
                    return false;
                }
                true
            };
            r_cur = if in_k_rep {
                integrate(&rhs_k, r_cur, r_max, &mut y, &opts, &mut observer)?
            } else {
                integrate(&rhs_m, r_cur, r_max, &mut y, &opts, &mut observer)?
            };
        }
        if switch {
            // Invert the symmetric 2x2 state in place.
            let det = y[0] * y[2] - y[1] * y[1];
            if det.norm() < 1e-300 {
                return Err(ForwardError::Degeneracy(r_cur));
            }
            let (a, b, c) = (y[2] / det, -y[1] / det, y[0] / det);
            y[0] = a;
            y[1] = b;
            y[2] = c;
            in_k_rep = !in_k_rep;
        }
    }
    Ok(CoupledPhaseFunction {
        terminal: prev,
        r: rs,
        phases,
    })
}

// ---------------------------------------------------------------------------
// Direct radial integration with asymptotic matching.
// ---------------------------------------------------------------------------

/// Phase shift by direct integration of the radial equation
/// `u'' = [l(l+1)/r^2 + V - q^2] u` and log-derivative matching at r_max;
/// returns the principal-branch delta (complex for complex V).
pub fn direct_scatter<V>(v: &V, r_max: f64, q: f64, l: i32) -> Result<Complex64>
where
    V: Fn(f64) -> Complex64 + ?Sized,
{
    direct_scatter_opts(v, r_max, q, l, &[])
}

pub fn direct_scatter_opts<V>(
    v: &V,
    r_max: f64,
    q: f64,
    l: i32,
    breakpoints: &[f64],
) -> Result<Complex64>
where
    V: Fn(f64) -> Complex64 + ?Sized,
{
    let r0 = 1e-6_f64;
    let rhs = |r: f64, y: &[Complex64], dy: &mut [Complex64]| {
        dy[0] = y[1];
        dy[1] = (Complex64::new(l as f64 * (l + 1) as f64 / (r * r) - q * q, 0.0) + v(r)) * y[0];
    };
    let mut y = vec![
        Complex64::new(r0.powi(l + 1), 0.0),
        Complex64::new((l + 1) as f64 * r0.powi(l), 0.0),
    ];
    let opts = OdeOptions {
        breakpoints: breakpoints.to_vec(),
        ..OdeOptions::default()
    };
    integrate(&rhs, r0, r_max, &mut y, &opts, &mut |_t, _y: &[Complex64]| true)?;
    let gamma = y[1] / y[0];
    let (j, n) = riccati_bessel_pair(l, q * r_max).map_err(|e| ForwardError::MatchingFailure(e.to_string()))?;
    let (jd, nd) = riccati_bessel_deriv_pair(l, q * r_max).unwrap();
    // u ~ j cos(delta) - n sin(delta)  =>  tan(delta) = (q j' - gamma j)/(q n' - gamma n)
    let t = (q * jd - gamma * j) / (q * nd - gamma * n);
    Ok(t.atan())
}

/// Coupled phase shifts by direct 2x2 integration; returns principal-branch
/// Blatt-Biedenharn `(delta1, delta2, epsilon)`.
pub fn direct_scatter_coupled<V>(
    v: &V,
    r_max: f64,
    q: f64,
    l1: i32,
    l2: i32,
) -> Result<CoupledPhases>
where
    V: Fn(f64) -> CMat2 + ?Sized,
{
    let k = direct_tangent_matrix(v, r_max, q, l1, l2)?;
    let zero = Complex64::new(0.0, 0.0);
    let (t1, t2, eps) = tangent_eigen(&k, zero);
    Ok(CoupledPhases {
        delta1: t1.atan(),
        delta2: t2.atan(),
        epsilon: eps,
    })
}

/// Coupled S matrix `S = (1 + iK)(1 - iK)^{-1}` by direct 2x2 integration
/// started at `r0` with the indicial exponents of the local potential.
///
/// Unlike the variable-phase route this has no eigenphase-degeneracy
/// singularities, so it stays robust for reconstructed potentials whose
/// higher-wave channel carries a strong `c/r^2` core (pass the inner grid
/// boundary as `r0` so the core's modified regular behavior `r^{nu+1}` is
/// used instead of the free `r^{l+1}`).
pub fn direct_s_matrix<V>(v: &V, r0: f64, r_max: f64, q: f64, l1: i32, l2: i32) -> Result<CMat2>
where
    V: Fn(f64) -> CMat2 + ?Sized,
{
    let k = direct_tangent_matrix_from(v, r0, r_max, q, l1, l2)?;
    let i = Complex64::new(0.0, 1.0);
    let id = CMat2::identity();
    let denom = (id - k * i)
        .try_inverse()
        .ok_or_else(|| ForwardError::MatchingFailure("singular 1 - iK".into()))?;
    Ok((id + k * i) * denom)
}

/// Tangent (K) matrix from direct integration of two independent regular
/// solutions: `K = B A^{-1}` with `u = j A - n B` at the matching radius.
/// Starts at `r0 = 1e-6`, appropriate for potentials regular at the origin.
pub fn direct_tangent_matrix<V>(v: &V, r_max: f64, q: f64, l1: i32, l2: i32) -> Result<CMat2>
where
    V: Fn(f64) -> CMat2 + ?Sized,
{
    direct_tangent_matrix_from(v, 1e-6, r_max, q, l1, l2)
}

/// Like [`direct_tangent_matrix`] but started at `r0` with per-channel
/// indicial exponents `nu` solving `nu(nu+1) = l(l+1) + r0^2 V_cc(r0)`, so a
/// short-range `c/r^2` core below the potential's tabulated range is entered
/// through its modified regular behavior `u ~ r^{nu+1}`. Errors in this
/// boundary mixture decay outward (the irregular component dies as
/// `r^{-nu}`), so the result is insensitive to the exact core shape.
pub fn direct_tangent_matrix_from<V>(
    v: &V,
    r0: f64,
    r_max: f64,
    q: f64,
    l1: i32,
    l2: i32,
) -> Result<CMat2>
where
    V: Fn(f64) -> CMat2 + ?Sized,
{
    let rhs = |r: f64, y: &[Complex64], dy: &mut [Complex64]| {
        // y = [u1, w1, u1', w1', u2, w2, u2', w2'] for the two solutions.
        let vm = v(r);
        let c1 = Complex64::new(l1 as f64 * (l1 + 1) as f64 / (r * r) - q * q, 0.0);
        let c2 = Complex64::new(l2 as f64 * (l2 + 1) as f64 / (r * r) - q * q, 0.0);
        for s in 0..2 {
            let (u, w, du, dw) = (y[4 * s], y[4 * s + 1], y[4 * s + 2], y[4 * s + 3]);
            dy[4 * s] = du;
            dy[4 * s + 1] = dw;
            dy[4 * s + 2] = (c1 + vm[(0, 0)]) * u + vm[(0, 1)] * w;
            dy[4 * s + 3] = vm[(1, 0)] * u + (c2 + vm[(1, 1)]) * w;
        }
    };
    let zero = Complex64::new(0.0, 0.0);
    let one = Complex64::new(1.0, 0.0);
    let v0 = v(r0);
    let nu_of = |l: i32, vcc: Complex64| -> Complex64 {
        let c = Complex64::new((l * (l + 1)) as f64, 0.0) + r0 * r0 * vcc;
        0.5 * ((one + 4.0 * c).sqrt() - one)
    };
    let nu1 = nu_of(l1, v0[(0, 0)]);
    let nu2 = nu_of(l2, v0[(1, 1)]);
    let rc = Complex64::new(r0, 0.0);
    let mut y = vec![zero; 8];
    y[0] = rc.powc(nu1 + one);
    y[2] = (nu1 + one) * rc.powc(nu1);
    y[5] = rc.powc(nu2 + one);
    y[7] = (nu2 + one) * rc.powc(nu2);
    let opts = OdeOptions::default();
    integrate(&rhs, r0, r_max, &mut y, &opts, &mut |_t, _y: &[Complex64]| true)?;

    let (j1, n1) = riccati_bessel_pair(l1, q * r_max).map_err(|e| ForwardError::MatchingFailure(e.to_string()))?;
    let (jd1, nd1) = riccati_bessel_deriv_pair(l1, q * r_max).unwrap();
    let (j2, n2) = riccati_bessel_pair(l2, q * r_max).unwrap();
    let (jd2, nd2) = riccati_bessel_deriv_pair(l2, q * r_max).unwrap();
    // A = n' u - n u'/q, B = j' u - j u'/q  (per channel row), for each
    // solution column; then K = B A^{-1}.
    let mut a = CMat2::zeros();
    let mut b = CMat2::zeros();
    for s in 0..2 {
        let (u, w, du, dw) = (y[4 * s], y[4 * s + 1], y[4 * s + 2], y[4 * s + 3]);
        a[(0, s)] = nd1 * u - n1 * du / q;
        a[(1, s)] = nd2 * w - n2 * dw / q;
        b[(0, s)] = jd1 * u - j1 * du / q;
        b[(1, s)] = jd2 * w - j2 * dw / q;
    }
    let ainv = a
        .try_inverse()
        .ok_or_else(|| ForwardError::MatchingFailure("singular matching matrix".into()))?;
    let k = b * ainv;
    // Symmetrize (exact for symmetric V up to integration error).
    Ok(CMat2::new(
        k[(0, 0)],
        0.5 * (k[(0, 1)] + k[(1, 0)]),
        0.5 * (k[(0, 1)] + k[(1, 0)]),
        k[(1, 1)],
    ))
}

// ---------------------------------------------------------------------------
// Eigenphase-integral consistency (quadrature form of the phase system).
// ---------------------------------------------------------------------------

/// The nine integrals I_ij of the scalar coupled phase system, evaluated by
/// quadrature along stored phase functions: row sums reproduce the terminal
/// phases (delta1, delta2, epsilon).
///
/// Integrand shorthand: `s_ab = D_{l_a}(qr) sin(deltahat_{l_a}(qr) + delta_b(r))`.
pub fn phase_integral_matrix<V>(
    v: &V,
    traj: &CoupledPhaseFunction,
    q: f64,
    l1: i32,
    l2: i32,
) -> [[Complex64; 3]; 3]
where
    V: Fn(f64) -> CMat2 + ?Sized,
{
    use crate::interp::CubicSpline;
    let re: Vec<f64> = traj.phases.iter().map(|p| p.delta1.re).collect();
    let im: Vec<f64> = traj.phases.iter().map(|p| p.delta1.im).collect();
    let d1r = CubicSpline::natural(traj.r.clone(), re);
    let d1i = CubicSpline::natural(traj.r.clone(), im);
    let re: Vec<f64> = traj.phases.iter().map(|p| p.delta2.re).collect();
    let im: Vec<f64> = traj.phases.iter().map(|p| p.delta2.im).collect();
    let d2r = CubicSpline::natural(traj.r.clone(), re);
    let d2i = CubicSpline::natural(traj.r.clone(), im);
    let re: Vec<f64> = traj.phases.iter().map(|p| p.epsilon.re).collect();
    let im: Vec<f64> = traj.phases.iter().map(|p| p.epsilon.im).collect();
    let epr = CubicSpline::natural(traj.r.clone(), re);
    let epi = CubicSpline::natural(traj.r.clone(), im);

    let r_max = *traj.r.last().unwrap();
    let mut out = [[Complex64::new(0.0, 0.0); 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = quad::integrate(
                &|r: f64| {
                    if r < R_ORIGIN {
                        return Complex64::new(0.0, 0.0);
                    }
                    let d1 = Complex64::new(d1r.eval(r), d1i.eval(r));
                    let d2 = Complex64::new(d2r.eval(r), d2i.eval(r));
                    let ep = Complex64::new(epr.eval(r), epi.eval(r));
                    let vm = v(r);
                    let a1 = crate::specfun::amplitude_phase(l1, q * r).unwrap();
                    let a2 = crate::specfun::amplitude_phase(l2, q * r).unwrap();
                    let s = |a: &crate::specfun::AmplitudePhase, d: Complex64| {
                        a.amplitude * (Complex64::new(a.phase, 0.0) + d).sin()
                    };
                    let (s11, s12) = (s(&a1, d1), s(&a1, d2));
                    let (s21, s22) = (s(&a2, d1), s(&a2, d2));
                    let (v1, v2, vt) = (vm[(0, 0)], vm[(1, 1)], vm[(0, 1)]);
                    match (i, j) {
                        (0, 0) => -v1 / q * ep.cos().powu(2) * s11 * s11,
                        (0, 1) => -v2 / q * ep.sin().powu(2) * s21 * s21,
                        (0, 2) => -vt / q * (2.0 * ep).sin() * s21 * s11,
                        (1, 0) => -v1 / q * ep.sin().powu(2) * s12 * s12,
                        (1, 1) => -v2 / q * ep.cos().powu(2) * s22 * s22,
                        (1, 2) => vt / q * (2.0 * ep).sin() * s22 * s12,
                        // Mixing-parameter row; the 1/sin(d1-d2) factor is
                        // cancelled analytically in the bracket where possible.
                        (2, 0) => {
                            (2.0 * ep).sin() / (2.0 * q) * v1 * s11 * s12 / (d1 - d2).sin()
                        }
                        (2, 1) => {
                            -(2.0 * ep).sin() / (2.0 * q) * v2 * s21 * s22 / (d1 - d2).sin()
                        }
                        (2, 2) => {
                            -vt / q * (ep.cos().powu(2) * s11 * s22 - ep.sin().powu(2) * s21 * s12)
                                / (d1 - d2).sin()
                        }
                        _ => unreachable!(),
                    }
                },
                R_ORIGIN,
                r_max,
                1e-9,
            );
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Bound states.
// ---------------------------------------------------------------------------

/// Single-channel bound state at imaginary momentum `i kappa`.
#[derive(Debug, Clone)]
pub struct BoundState {
    pub kappa: f64,
    pub r: Vec<f64>,
    pub u: Vec<f64>,
    /// Asymptotic normalization: u(r) -> a_s * hat{h}_l(i kappa r) phase-fixed
    /// to the real decaying form (= a_s e^{-kappa r} for l = 0).
    pub a_s: f64,
}

/// Real decaying free solution `i^{l+1} h_l^+(i kappa r)` and derivative.
fn decaying_free(l: i32, kappa: f64, r: f64) -> (f64, f64) {
    let z = Complex64::new(0.0, kappa * r);
    let phase = Complex64::i().powi(l + 1);
    let h = (phase * riccati_hankel(l, z).unwrap()).re;
    let hd = (phase * Complex64::i() * kappa * riccati_hankel_deriv(l, z).unwrap()).re;
    (h, hd)
}

/// Mismatch of inward/outward log-derivatives at the matching radius;
/// bound states are its zeros in kappa.
fn shoot_single<V>(v: &V, l: i32, kappa: f64, r_match: f64) -> f64
where
    V: Fn(f64) -> f64 + ?Sized,
{
    let q2 = -kappa * kappa;
    let rhs = |r: f64, y: &[Complex64], dy: &mut [Complex64]| {
        dy[0] = y[1];
        dy[1] = Complex64::new((l as f64 * (l + 1) as f64 / (r * r) - q2 + v(r)) * y[0].re, 0.0);
    };
    let r0 = 1e-6_f64;
    let mut y = vec![
        Complex64::new(r0.powi(l + 1), 0.0),
        Complex64::new((l + 1) as f64 * r0.powi(l), 0.0),
    ];
    let opts = OdeOptions::default();
    integrate(&rhs, r0, r_match, &mut y, &opts, &mut |_t, _y: &[Complex64]| true).unwrap();
    let (uo, duo) = (y[0].re, y[1].re);
    let (ui, dui) = decaying_free(l, kappa, r_match);
    // Normalized Wronskian; sign changes locate the eigenvalues.
    (uo * dui - duo * ui) / (uo.hypot(duo) * ui.hypot(dui))
}

/// Locate bound states of a real single-channel potential with
/// `kappa` in `(kappa_min, kappa_max)` (fm^-1), by scan + bisection on the
/// matching Wronskian. `r_match` should sit inside the potential range,
/// `r_max` beyond it.
pub fn find_bound_states<V>(
    v: &V,
    l: i32,
    kappa_range: (f64, f64),
    r_match: f64,
    r_max: f64,
) -> Vec<BoundState>
where
    V: Fn(f64) -> f64 + ?Sized,
{
    let (k_lo, k_hi) = kappa_range;
    let n_scan = 200;
    let mut kappas = Vec::new();
    let mut prev_k = k_lo.max(1e-4);
    let mut prev_w = shoot_single(v, l, prev_k, r_match);
    for i in 1..=n_scan {
        let k = k_lo.max(1e-4) + (k_hi - k_lo.max(1e-4)) * i as f64 / n_scan as f64;
        let w = shoot_single(v, l, k, r_match);
        if prev_w * w < 0.0 {
            let (mut a, mut b) = (prev_k, k);
            let mut wa = prev_w;
            for _ in 0..80 {
                let m = 0.5 * (a + b);
                let wm = shoot_single(v, l, m, r_match);
                if wa * wm <= 0.0 {
                    b = m;
                } else {
                    a = m;
                    wa = wm;
                }
            }
            kappas.push(0.5 * (a + b));
        }
        prev_k = k;
        prev_w = w;
    }
    kappas
        .into_iter()
        .map(|kappa| build_bound_state(v, l, kappa, r_match, r_max))
        .collect()
}

fn build_bound_state<V>(v: &V, l: i32, kappa: f64, r_match: f64, r_max: f64) -> BoundState
where
    V: Fn(f64) -> f64 + ?Sized,
{
    // Tabulate outward solution to r_match, exterior via the free decaying
    // form scaled to match, then normalize.
    let n = 2400;
    let r0 = 1e-6;
    let h = (r_match - r0) / n as f64;
    let q2 = -kappa * kappa;
    let rhs = |r: f64, y: &[Complex64], dy: &mut [Complex64]| {
        dy[0] = y[1];
        dy[1] = Complex64::new((l as f64 * (l + 1) as f64 / (r * r) - q2 + v(r)) * y[0].re, 0.0);
    };
    let mut y = vec![
        Complex64::new(r0.powi(l + 1), 0.0),
        Complex64::new((l + 1) as f64 * r0.powi(l), 0.0),
    ];
    let mut rs = vec![r0];
    let mut us = vec![y[0].re];
    let opts = OdeOptions::default();
    for i in 1..=n {
        let target = r0 + h * i as f64;
        integrate(&rhs, rs[rs.len() - 1], target, &mut y, &opts, &mut |_t, _y: &[Complex64]| true).unwrap();
        rs.push(target);
        us.push(y[0].re);
    }
    // Exterior: a_s * free(r), continuous at r_match.
    let (f_match, _) = decaying_free(l, kappa, r_match);
    let scale = us[us.len() - 1] / f_match;
    let mut r = r_match;
    while r < r_max {
        r += 0.02;
        rs.push(r);
        us.push(scale * decaying_free(l, kappa, r).0);
    }
    // Normalize: trapezoid on the tabulated grid plus analytic-free tail.
    let mut norm2 = 0.0;
    for i in 1..rs.len() {
        norm2 += 0.5 * (us[i] * us[i] + us[i - 1] * us[i - 1]) * (rs[i] - rs[i - 1]);
    }
    let tail = quad::integrate_tail(
        &|t| {
            let f = scale * decaying_free(l, kappa, t).0;
            Complex64::new(f * f, 0.0)
        },
        *rs.last().unwrap(),
        2.0 * kappa,
        1e-12,
    )
    .re;
    norm2 += tail;
    let nrm = norm2.sqrt();
    BoundState {
        kappa,
        a_s: scale / nrm,
        r: rs,
        u: us.into_iter().map(|u| u / nrm).collect(),
    }
}

/// Two-channel bound state (deuteron-type): S-wave u, D-wave w.
#[derive(Debug, Clone)]
pub struct CoupledBoundState {
    pub kappa: f64,
    pub r: Vec<f64>,
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    /// S-channel asymptotic normalization (u -> a_s e^{-kappa r}).
    pub a_s: f64,
    /// D/S asymptotic ratio.
    pub eta: f64,
}

fn shoot_coupled<V>(
    v: &V,
    l1: i32,
    l2: i32,
    kappa: f64,
    r_match: f64,
) -> (f64, nalgebra::Matrix4<f64>)
where
    V: Fn(f64) -> CMat2 + ?Sized,
{
    let q2 = -kappa * kappa;
    let rhs = |r: f64, y: &[Complex64], dy: &mut [Complex64]| {
        let vm = v(r);
        let c1 = l1 as f64 * (l1 + 1) as f64 / (r * r) - q2;
        let c2 = l2 as f64 * (l2 + 1) as f64 / (r * r) - q2;
        for s in 0..2 {
            let (u, w, du, dw) = (y[4 * s], y[4 * s + 1], y[4 * s + 2], y[4 * s + 3]);
            dy[4 * s] = du;
            dy[4 * s + 1] = dw;
            dy[4 * s + 2] = (Complex64::new(c1, 0.0) + vm[(0, 0)]) * u + vm[(0, 1)] * w;
            dy[4 * s + 3] = vm[(1, 0)] * u + (Complex64::new(c2, 0.0) + vm[(1, 1)]) * w;
        }
    };
    let r0 = 1e-6_f64;
    let zero = Complex64::new(0.0, 0.0);
    let mut y = vec![zero; 8];
    y[0] = Complex64::new(r0.powi(l1 + 1), 0.0);
    y[2] = Complex64::new((l1 + 1) as f64 * r0.powi(l1), 0.0);
    y[5] = Complex64::new(r0.powi(l2 + 1), 0.0);
    y[7] = Complex64::new((l2 + 1) as f64 * r0.powi(l2), 0.0);
    let opts = OdeOptions::default();
    integrate(&rhs, r0, r_match, &mut y, &opts, &mut |_t, _y: &[Complex64]| true).unwrap();

    let (f1, fd1) = decaying_free(l1, kappa, r_match);
    let (f2, fd2) = decaying_free(l2, kappa, r_match);
    // Columns: outward sol 1, outward sol 2, -exterior ch1, -exterior ch2;
    // rows: u, w, u', w' continuity.
    let mut m = nalgebra::Matrix4::<f64>::zeros();
    for s in 0..2 {
        m[(0, s)] = y[4 * s].re;
        m[(1, s)] = y[4 * s + 1].re;
        m[(2, s)] = y[4 * s + 2].re;
        m[(3, s)] = y[4 * s + 3].re;
    }
    m[(0, 2)] = -f1;
    m[(2, 2)] = -fd1;
    m[(1, 3)] = -f2;
    m[(3, 3)] = -fd2;
    // Normalize columns so the determinant scale is kappa-independent.
    let mut mn = m;
    for c in 0..4 {
        let s = mn.column(c).norm();
        if s > 0.0 {
            for r in 0..4 {
                mn[(r, c)] /= s;
            }
        }
    }
    (mn.determinant(), m)
}

/// Locate the coupled-channel bound state nearest the given kappa window and
/// build the normalized (u, w) wavefunction with asymptotic amplitudes.
pub fn find_coupled_bound_state<V>(
    v: &V,
    l1: i32,
    l2: i32,
    kappa_range: (f64, f64),
    r_match: f64,
    r_max: f64,
) -> Option<CoupledBoundState>
where
    V: Fn(f64) -> CMat2 + ?Sized,
{
    let n_scan = 120;
    let (k_lo, k_hi) = kappa_range;
    let mut found = None;
    let mut prev_k = k_lo;
    let mut prev_d = shoot_coupled(v, l1, l2, prev_k, r_match).0;
    for i in 1..=n_scan {
        let k = k_lo + (k_hi - k_lo) * i as f64 / n_scan as f64;
        let d = shoot_coupled(v, l1, l2, k, r_match).0;
        if prev_d * d < 0.0 {
            let (mut a, mut b) = (prev_k, k);
            let mut da = prev_d;
            for _ in 0..80 {
                let m = 0.5 * (a + b);
                let dm = shoot_coupled(v, l1, l2, m, r_match).0;
                if da * dm <= 0.0 {
                    b = m;
                } else {
                    a = m;
                    da = dm;
                }
            }
            found = Some(0.5 * (a + b));
            break;
        }
        prev_k = k;
        prev_d = d;
    }
    let kappa = found?;
    Some(build_coupled_bound_state(v, l1, l2, kappa, r_match, r_max))
}

fn build_coupled_bound_state<V>(
    v: &V,
    l1: i32,
    l2: i32,
    kappa: f64,
    r_match: f64,
    r_max: f64,
) -> CoupledBoundState
where
    V: Fn(f64) -> CMat2 + ?Sized,
{
    let (_, m) = shoot_coupled(v, l1, l2, kappa, r_match);
    // Null vector of the matching matrix via SVD.
    let svd = m.svd(true, true);
    let vt = svd.v_t.unwrap();
    let c = vt.row(3).transpose(); // right singular vector of smallest value
    let (c1, c2, c3, c4) = (c[0], c[1], c[2], c[3]);

    // Interior tabulation.
    let n = 2400;
    let r0 = 1e-6_f64;
    let h = (r_match - r0) / n as f64;
    let q2 = -kappa * kappa;
    let rhs = |r: f64, y: &[Complex64], dy: &mut [Complex64]| {
        let vm = v(r);
        let cc1 = l1 as f64 * (l1 + 1) as f64 / (r * r) - q2;
        let cc2 = l2 as f64 * (l2 + 1) as f64 / (r * r) - q2;
        for s in 0..2 {
            let (u, w, du, dw) = (y[4 * s], y[4 * s + 1], y[4 * s + 2], y[4 * s + 3]);
            dy[4 * s] = du;
            dy[4 * s + 1] = dw;
            dy[4 * s + 2] = (Complex64::new(cc1, 0.0) + vm[(0, 0)]) * u + vm[(0, 1)] * w;
            dy[4 * s + 3] = vm[(1, 0)] * u + (Complex64::new(cc2, 0.0) + vm[(1, 1)]) * w;
        }
    };
    let zero = Complex64::new(0.0, 0.0);
    let mut y = vec![zero; 8];
    y[0] = Complex64::new(r0.powi(l1 + 1), 0.0);
    y[2] = Complex64::new((l1 + 1) as f64 * r0.powi(l1), 0.0);
    y[5] = Complex64::new(r0.powi(l2 + 1), 0.0);
    y[7] = Complex64::new((l2 + 1) as f64 * r0.powi(l2), 0.0);
    let mut rs = vec![r0];
    let mut us = vec![c1 * y[0].re + c2 * y[4].re];
    let mut ws = vec![c1 * y[1].re + c2 * y[5].re];
    let opts = OdeOptions::default();
    let mut r_cur = r0;
    for i in 1..=n {
        let target = r0 + h * i as f64;
        integrate(&rhs, r_cur, target, &mut y, &opts, &mut |_t, _y: &[Complex64]| true).unwrap();
        r_cur = target;
        rs.push(target);
        us.push(c1 * y[0].re + c2 * y[4].re);
        ws.push(c1 * y[1].re + c2 * y[5].re);
    }
    // Exterior from the decaying free forms.
    let mut r = r_match;
    while r < r_max {
        r += 0.02;
        rs.push(r);
        us.push(c3 * decaying_free(l1, kappa, r).0);
        ws.push(c4 * decaying_free(l2, kappa, r).0);
    }
    let mut norm2 = 0.0;
    for i in 1..rs.len() {
        let f = us[i] * us[i] + ws[i] * ws[i];
        let fp = us[i - 1] * us[i - 1] + ws[i - 1] * ws[i - 1];
        norm2 += 0.5 * (f + fp) * (rs[i] - rs[i - 1]);
    }
    let r_last = *rs.last().unwrap();
    norm2 += quad::integrate_tail(
        &|t| {
            let fu = c3 * decaying_free(l1, kappa, t).0;
            let fw = c4 * decaying_free(l2, kappa, t).0;
            Complex64::new(fu * fu + fw * fw, 0.0)
        },
        r_last,
        2.0 * kappa,
        1e-12,
    )
    .re;
    let nrm = norm2.sqrt() * c3.signum(); // fix overall sign: a_s > 0
    CoupledBoundState {
        kappa,
        a_s: c3 / nrm,
        eta: c4 / c3,
        r: rs,
        u: us.into_iter().map(|u| u / nrm).collect(),
        w: ws.into_iter().map(|w| w / nrm).collect(),
    }
}

/// Deuteron-type observables from a normalized coupled bound state:
/// matter radius `r_d = sqrt(1/4 \int r^2 (u^2+w^2) dr)` and point-like
/// quadrupole `Q = 1/20 \int r^2 w (sqrt(8) u - w) dr`.
pub fn deuteron_observables(bs: &CoupledBoundState) -> (f64, f64) {
    let mut i_r2 = 0.0;
    let mut i_q = 0.0;
    for i in 1..bs.r.len() {
        let f = |j: usize| {
            let (r, u, w) = (bs.r[j], bs.u[j], bs.w[j]);
            (r * r * (u * u + w * w), r * r * w * (8.0_f64.sqrt() * u - w))
        };
        let (a1, b1) = f(i - 1);
        let (a2, b2) = f(i);
        let h = bs.r[i] - bs.r[i - 1];
        i_r2 += 0.5 * (a1 + a2) * h;
        i_q += 0.5 * (b1 + b2) * h;
    }
    // Analytic-form tail beyond the tabulated range.
    let r_last = *bs.r.last().unwrap();
    let (c_u, c_w) = (
        bs.u.last().unwrap() / decaying_free(0, bs.kappa, r_last).0,
        bs.w.last().unwrap() / decaying_free(2, bs.kappa, r_last).0,
    );
    i_r2 += quad::integrate_tail(
        &|t| {
            let u = c_u * decaying_free(0, bs.kappa, t).0;
            let w = c_w * decaying_free(2, bs.kappa, t).0;
            Complex64::new(t * t * (u * u + w * w), 0.0)
        },
        r_last,
        2.0 * bs.kappa,
        1e-12,
    )
    .re;
    i_q += quad::integrate_tail(
        &|t| {
            let u = c_u * decaying_free(0, bs.kappa, t).0;
            let w = c_w * decaying_free(2, bs.kappa, t).0;
            Complex64::new(t * t * w * (8.0_f64.sqrt() * u - w), 0.0)
        },
        r_last,
        2.0 * bs.kappa,
        1e-12,
    )
    .re;
    ((0.25 * i_r2).sqrt(), i_q / 20.0)
}
