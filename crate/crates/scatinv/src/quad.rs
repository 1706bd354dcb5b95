//! Adaptive quadrature for complex-valued integrands.
//!
//! A recursive Gauss-Kronrod (G7/K15) scheme on finite intervals, plus a
//! wrapper for tail integrals over `[x, inf)` of integrands with a known
//! exponential decay rate. Used as the independent oracle for the closed-form
//! overlap integrals and for Marchenko residual checks.

use num_complex::Complex64;

/// Kronrod-15 nodes on [-1, 1] (positive half; symmetric).
const XGK: [f64; 8] = [
    0.991455371120813,
    0.949107912342759,
    0.864864423359769,
    0.741531185599394,
    0.586087235467691,
    0.405845151377397,
    0.207784955007898,
    0.0,
];

/// Kronrod-15 weights matching `XGK`.
const WGK: [f64; 8] = [
    0.022935322010529,
    0.063092092629979,
    0.104790010322250,
    0.140653259715525,
    0.169004726639267,
    0.190350578064785,
    0.204432940075298,
    0.209482141084728,
];

/// Gauss-7 weights for the embedded rule (nodes are XGK[1], XGK[3], ...).
const WG: [f64; 4] = [
    0.129484966168870,
    0.279705391489277,
    0.381830050505119,
    0.417959183673469,
];

fn gk15<F: Fn(f64) -> Complex64>(f: &F, a: f64, b: f64) -> (Complex64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);

    let mut kronrod = Complex64::new(0.0, 0.0);
    let mut gauss = Complex64::new(0.0, 0.0);

    for (j, (&x, &wk)) in XGK.iter().zip(WGK.iter()).enumerate() {
        let v = if x == 0.0 {
            f(center)
        } else {
            f(center - half * x) + f(center + half * x)
        };
        kronrod += wk * v;
        if j % 2 == 1 {
            gauss += WG[j / 2] * v;
        }
    }
    let result = kronrod * half;
    let err = ((kronrod - gauss) * half).norm();
    (result, err)
}

/// Adaptive integration of `f` over `[a, b]` by recursive bisection.
///
/// `tol` is an absolute error target; recursion stops once the local K15-G7
/// discrepancy is below the subinterval's share of it.
pub fn integrate<F: Fn(f64) -> Complex64>(f: &F, a: f64, b: f64, tol: f64) -> Complex64 {
    fn recurse<F: Fn(f64) -> Complex64>(
        f: &F,
        a: f64,
        b: f64,
        tol: f64,
        depth: usize,
    ) -> Complex64 {
        let (val, err) = gk15(f, a, b);
        // The relative floor keeps large-magnitude integrands from demanding
        // more precision than f64 arithmetic can deliver on the panel.
        if err <= tol.max(5e-15 * val.norm()) || depth >= 30 {
            return val;
        }
        let m = 0.5 * (a + b);
        recurse(f, a, m, 0.5 * tol, depth + 1) + recurse(f, m, b, 0.5 * tol, depth + 1)
    }
    recurse(f, a, b, tol, 0)
}

/// Integral of `f` over `[x, inf)` for an integrand decaying at least as
/// fast as `exp(-decay * t)`. The tail is truncated where the decay factor
/// drops below 1e-18 of its value at `x`.
pub fn integrate_tail<F: Fn(f64) -> Complex64>(f: &F, x: f64, decay: f64, tol: f64) -> Complex64 {
    assert!(decay > 0.0, "tail quadrature needs a positive decay rate");
    let span = 18.0 * std::f64::consts::LN_10 / decay;
    let b = x + span;
    // Split at a few decay lengths so the adaptive rule sees the scale.
    let m = x + (6.0 / decay).min(span * 0.5);
    integrate(f, x, m, 0.5 * tol) + integrate(f, m, b, 0.5 * tol)
}

/// Real-valued convenience wrapper around [`integrate`].
pub fn integrate_real<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    integrate(&|t| Complex64::new(f(t), 0.0), a, b, tol).re
}
