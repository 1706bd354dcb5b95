//! Rational (diagonal Pade) S-matrix machinery: parity-constrained
//! polynomial pairs, collocation fitting to phase-shift curves, high-momentum
//! tail extrapolation through an exponential model potential, spectral
//! decomposition into upper-half-plane poles with residue weights, and the
//! phase-convention conversions needed to move between data parametrizations.
//!
//! Conventions. Single channel: `tan(-delta) = f1/f2` with `f1` odd,
//! `f2` even, `deg f1 = deg f2 - 1`, `f2(0) = 1`, so that
//! `S = (f2 - i f1)/(f2 + i f1) = e^{2i delta}`. Coupled channels use the
//! half-angle per channel, `tan(-delta_i/2) = f1_i/f2_i`, and
//! `tan(-eps) = f1_mix/f2_mix` for the mixing parameter; the assembled 2x2 S
//! is the product form with diagonal entries
//! `(channel ratio)^2 (f2m^2 - f1m^2)/(f2m^2 + f1m^2)` and off-diagonal
//! `-2i f2m f1m/(f2m^2 + f1m^2)` times both channel ratios, which with these
//! sign conventions equals the bar-phase (Stapp-type) matrix
//! `S12 = i e^{i(d1+d2)} sin 2eps`.

use nalgebra::{DMatrix, DVector, Matrix2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forward;
use crate::interp::CubicSpline;
use crate::specfun;

pub type CMat2 = Matrix2<Complex64>;

const PI: f64 = std::f64::consts::PI;

#[derive(Debug, Error)]
pub enum SMatrixError {
    #[error("node count must be even and >= 2, got {0}")]
    BadNodeCount(usize),
    #[error("collocation system is singular (nodes too close or curve degenerate)")]
    SingularSystem,
    #[error("S-matrix pole at q = {q} within clearance {clearance} of the real axis")]
    RealAxisPole { q: Complex64, clearance: f64 },
    #[error("polynomial root search did not converge")]
    RootsNoConvergence,
    #[error("contour residue extraction did not converge (error {0:.2e})")]
    ContourNoConvergence(f64),
    #[error("tail model misses the data: best fit at {best:.2} error bars (> 3)")]
    TailFitFailure { best: f64 },
    #[error("non-physical S-matrix row: |S| = {smod} > 1")]
    NonPhysicalS { smod: f64 },
}

pub type Result<T> = std::result::Result<T, SMatrixError>;

// ---------------------------------------------------------------------------
// Parity-constrained polynomials.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Parity {
    Even,
    Odd,
}

/// Polynomial in q containing only even or only odd powers; `coeffs[k]`
/// multiplies `q^{2k}` (even) or `q^{2k+1}` (odd).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParityPolynomial {
    pub parity: Parity,
    pub coeffs: Vec<f64>,
}

impl ParityPolynomial {
    pub fn new(parity: Parity, mut coeffs: Vec<f64>) -> Self {
        // Canonical degree: strip a trailing run of zeros (keep one entry).
        while coeffs.len() > 1 && *coeffs.last().unwrap() == 0.0 {
            coeffs.pop();
        }
        if coeffs.is_empty() {
            coeffs.push(0.0);
        }
        ParityPolynomial { parity, coeffs }
    }

    pub fn zero(parity: Parity) -> Self {
        ParityPolynomial {
            parity,
            coeffs: vec![0.0],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|&c| c == 0.0)
    }

    fn power(&self, k: usize) -> i32 {
        match self.parity {
            Parity::Even => 2 * k as i32,
            Parity::Odd => 2 * k as i32 + 1,
        }
    }

    /// Degree in q (0 for the zero polynomial).
    pub fn degree(&self) -> i32 {
        let mut top = 0;
        for (k, &c) in self.coeffs.iter().enumerate() {
            if c != 0.0 {
                top = self.power(k);
            }
        }
        top
    }

    pub fn eval(&self, q: Complex64) -> Complex64 {
        // Horner in q^2 with a possible leading factor q.
        let q2 = q * q;
        let mut acc = Complex64::new(0.0, 0.0);
        for &c in self.coeffs.iter().rev() {
            acc = acc * q2 + c;
        }
        match self.parity {
            Parity::Even => acc,
            Parity::Odd => acc * q,
        }
    }

    pub fn eval_real(&self, q: f64) -> f64 {
        let q2 = q * q;
        let mut acc = 0.0;
        for &c in self.coeffs.iter().rev() {
            acc = acc * q2 + c;
        }
        match self.parity {
            Parity::Even => acc,
            Parity::Odd => acc * q,
        }
    }

    pub fn deriv(&self, q: Complex64) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for (k, &c) in self.coeffs.iter().enumerate() {
            let p = self.power(k);
            if p > 0 {
                acc += c * (p as f64) * q.powi(p - 1);
            }
        }
        acc
    }

    /// Dense power-indexed coefficients (index = power of q).
    pub fn dense(&self) -> Vec<f64> {
        let deg = self.degree() as usize;
        let mut out = vec![0.0; deg + 1];
        for (k, &c) in self.coeffs.iter().enumerate() {
            let p = self.power(k) as usize;
            if p <= deg {
                out[p] = c;
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Rational S-matrices.
// ---------------------------------------------------------------------------

/// Single-channel diagonal Pade S-matrix `S = (f2 - i f1)/(f2 + i f1)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RationalSMatrix {
    pub f1: ParityPolynomial,
    pub f2: ParityPolynomial,
    pub l: i32,
}

impl RationalSMatrix {
    pub fn identity(l: i32) -> Self {
        RationalSMatrix {
            f1: ParityPolynomial::zero(Parity::Odd),
            f2: ParityPolynomial::new(Parity::Even, vec![1.0]),
            l,
        }
    }

    pub fn eval(&self, q: Complex64) -> Complex64 {
        let f1 = self.f1.eval(q);
        let f2 = self.f2.eval(q);
        (f2 - Complex64::i() * f1) / (f2 + Complex64::i() * f1)
    }

    /// Phase shift mod pi on the real axis.
    pub fn delta_mod_pi(&self, q: f64) -> f64 {
        (-self.f1.eval_real(q)).atan2(self.f2.eval_real(q))
    }

    /// Denominator `g = f2 + i f1` as dense complex coefficients.
    pub fn denominator(&self) -> Vec<Complex64> {
        dense_complex(&self.f2, &self.f1)
    }
}

/// `f2 + i f1` as a dense complex-coefficient polynomial.
fn dense_complex(f2: &ParityPolynomial, f1: &ParityPolynomial) -> Vec<Complex64> {
    let d2 = f2.dense();
    let d1 = f1.dense();
    let n = d2.len().max(d1.len());
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    for (p, &c) in d2.iter().enumerate() {
        out[p] += c;
    }
    for (p, &c) in d1.iter().enumerate() {
        out[p] += Complex64::i() * c;
    }
    while out.len() > 1 && out.last().unwrap().norm() == 0.0 {
        out.pop();
    }
    out
}

/// Coupled-channel Pade S-matrix: three (f1, f2) pairs — per channel
/// (half-angle phases) and mixing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoupledRationalSMatrix {
    pub f1_ch1: ParityPolynomial,
    pub f2_ch1: ParityPolynomial,
    pub f1_ch2: ParityPolynomial,
    pub f2_ch2: ParityPolynomial,
    pub f1_mix: ParityPolynomial,
    pub f2_mix: ParityPolynomial,
    pub l1: i32,
    pub l2: i32,
}

impl CoupledRationalSMatrix {
    /// Channel half-angle ratio `(f2 - i f1)/(f2 + i f1) = e^{i delta}`.
    fn ratio(f1: &ParityPolynomial, f2: &ParityPolynomial, q: Complex64) -> Complex64 {
        let a = f1.eval(q);
        let b = f2.eval(q);
        (b - Complex64::i() * a) / (b + Complex64::i() * a)
    }

    pub fn eval(&self, q: Complex64) -> CMat2 {
        let r1 = Self::ratio(&self.f1_ch1, &self.f2_ch1, q);
        let r2 = Self::ratio(&self.f1_ch2, &self.f2_ch2, q);
        let am = self.f1_mix.eval(q);
        let bm = self.f2_mix.eval(q);
        let den = bm * bm + am * am;
        let c2e = (bm * bm - am * am) / den; // cos 2eps
        let s2e = -2.0 * bm * am / den; // sin 2eps (mix fits tan(-eps) = f1/f2)
        let off = Complex64::i() * s2e * r1 * r2;
        CMat2::new(r1 * r1 * c2e, off, off, r2 * r2 * c2e)
    }

    pub fn denominators(&self) -> [Vec<Complex64>; 4] {
        // Zeros of the first two give double diagonal poles; the mix factors
        // f2m + i f1m and f2m - i f1m each give simple poles.
        let neg_f1_mix = ParityPolynomial::new(
            Parity::Odd,
            self.f1_mix.coeffs.iter().map(|c| -c).collect(),
        );
        [
            dense_complex(&self.f2_ch1, &self.f1_ch1),
            dense_complex(&self.f2_ch2, &self.f1_ch2),
            dense_complex(&self.f2_mix, &self.f1_mix),
            dense_complex(&self.f2_mix, &neg_f1_mix),
        ]
    }
}

// ---------------------------------------------------------------------------
// Phase-shift data records.
// ---------------------------------------------------------------------------

/// One momentum point of (possibly coupled, possibly absorptive) phase data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseRecord {
    /// Center-of-mass momentum, fm^-1.
    pub q: f64,
    /// Phase shift (channel 1), radians.
    pub delta: f64,
    pub delta_err: f64,
    /// Second-channel phase for coupled waves.
    pub delta2: Option<f64>,
    pub delta2_err: Option<f64>,
    /// Mixing parameter for coupled waves.
    pub epsilon: Option<f64>,
    pub epsilon_err: Option<f64>,
    /// Inelasticity angle: |S| = cos^2 rho.
    pub rho: f64,
    pub rho_err: f64,
}

impl PhaseRecord {
    pub fn elastic(q: f64, delta: f64, delta_err: f64) -> Self {
        PhaseRecord {
            q,
            delta,
            delta_err,
            delta2: None,
            delta2_err: None,
            epsilon: None,
            epsilon_err: None,
            rho: 0.0,
            rho_err: 0.0,
        }
    }

    pub fn with_rho(mut self, rho: f64, rho_err: f64) -> Self {
        self.rho = rho;
        self.rho_err = rho_err;
        self
    }
}

// ---------------------------------------------------------------------------
// Collocation fitting.
// ---------------------------------------------------------------------------

/// Chebyshev-spaced nodes on (0, q_max] (all strictly interior of [0, q_max]).
pub fn chebyshev_nodes(n: usize, q_max: f64) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * q_max * (1.0 - (PI * (2 * i + 1) as f64 / (2 * n) as f64).cos()))
        .collect()
}

/// Core collocation solve: find (f1 odd, f2 even, f2(0) = 1) with
/// `f1(q_i) cos phi_i + f2(q_i) sin phi_i = 0` at the nodes. The first
/// `lead` odd coefficients of f1 are pinned to zero so the fitted phase
/// opens as `q^{2 lead + 1}`: the threshold law of an angular-momentum-`lead`
/// phase shift. Without this constraint the fitted S-matrix violates
/// `S - 1 = O(q^{2l+1})` at the origin and the spectral (residue)
/// representation of the inversion kernel loses its q = 0 contribution,
/// which surfaces as a spurious `-l(l+1)/r^2` core in the reconstruction.
fn fit_ratio(
    phi: &dyn Fn(f64) -> f64,
    q_max: f64,
    n: usize,
    lead: usize,
) -> Result<(ParityPolynomial, ParityPolynomial)> {
    if n < 2 || n % 2 != 0 || n < 2 * lead + 2 {
        return Err(SMatrixError::BadNodeCount(n));
    }
    let nodes = chebyshev_nodes(n, q_max);
    // Unknowns: a_0..a_{na-1} (powers t^{2 lead + 1}, t^{2 lead + 3}, ..)
    // and b_1..b_{nb} (powers t^2, t^4, ..) in the scaled variable
    // t = q/q_max, with na + nb = n and deg f2 >= deg f1 + 1 so S -> 1 at
    // infinity. When the curve is exactly rational of lower degree the
    // square system is rank deficient (any common polynomial factor solves
    // it); in that case we retry with fewer coefficients, keeping all n
    // rows, until the least-squares problem is full rank — this pins the
    // minimal-degree representative and avoids spurious pole pairs.
    let phis: Vec<f64> = nodes.iter().map(|&q| phi(q)).collect();
    let mut na = (n - lead) / 2; // odd coefficients kept
    let mut nb = n - na; // even coefficients kept (beyond the fixed constant)
    // Largest still-consistent solution seen while probing smaller sizes.
    let mut best: Option<(usize, usize, DVector<f64>, Vec<f64>)> = None;
    loop {
        let m = na + nb;
        let mut mat = DMatrix::<f64>::zeros(n, m);
        let mut rhs = DVector::<f64>::zeros(n);
        for (i, &q) in nodes.iter().enumerate() {
            let (sp, cp) = phis[i].sin_cos();
            let t = q / q_max;
            for k in 0..na {
                mat[(i, k)] = t.powi(2 * (k + lead) as i32 + 1) * cp;
            }
            for k in 0..nb {
                mat[(i, na + k)] = t.powi(2 * k as i32 + 2) * sp;
            }
            rhs[i] = -sp;
        }
        // Column scaling (dead columns — e.g. all sin phi = 0 — get a zero
        // coefficient automatically through the pseudo-inverse).
        let mut scale = vec![1.0; m];
        for c in 0..m {
            let s = mat.column(c).norm();
            if s > 1e-300 {
                scale[c] = s;
                for r in 0..n {
                    mat[(r, c)] /= s;
                }
            } else {
                scale[c] = 1.0;
                for r in 0..n {
                    mat[(r, c)] = 0.0;
                }
            }
        }
        let svd = mat.clone().svd(true, true);
        let smax = svd.singular_values.iter().fold(0.0_f64, |x, &v| x.max(v));
        let rank = svd
            .singular_values
            .iter()
            .filter(|&&v| v > 1e-10 * smax.max(1e-300))
            .count();
        let live = (0..m).filter(|&c| mat.column(c).norm() > 0.0).count();
        let sol = svd
            .solve(&rhs, 1e-12 * smax.max(1e-300))
            .map_err(|_| SMatrixError::SingularSystem)?;
        let resid = (&mat * &sol - &rhs).amax();
        if resid <= 1e-9 && rank < live && (na > 1 || nb > 1) {
            // Overcomplete but still consistent: remember this solution and
            // try fewer coefficients. If the shrunken system can no longer
            // reproduce the curve the deficiency was mere basis collinearity
            // and we fall back to the recorded fit.
            best = Some((na, nb, sol, scale));
            na = (na - 1).max(1);
            nb = (nb - 1).max(1);
            continue;
        }
        let (na, nb, sol, scale) = if resid <= 1e-9 {
            (na, nb, sol, scale)
        } else if let Some(b) = best {
            b
        } else {
            return Err(SMatrixError::SingularSystem);
        };
        // Unscale columns and undo the t -> q substitution.
        let mut a = vec![0.0; na + lead];
        let mut b = vec![0.0; nb + 1];
        b[0] = 1.0;
        for k in 0..na {
            a[k + lead] = sol[k] / scale[k] / q_max.powi(2 * (k + lead) as i32 + 1);
        }
        for k in 0..nb {
            b[k + 1] = sol[na + k] / scale[na + k] / q_max.powi(2 * k as i32 + 2);
        }
        // Snap numerically-dead trailing terms so canonical degrees are
        // honest (compare contributions at the q_max scale).
        let clean = |v: &mut Vec<f64>| {
            let top = v
                .iter()
                .enumerate()
                .fold(0.0_f64, |x, (k, &c)| x.max((c * q_max.powi(2 * k as i32)).abs()));
            let thresh = 1e-10 * top.max(1e-300);
            while v.len() > 1 {
                let k = v.len() - 1;
                if (v[k] * q_max.powi(2 * k as i32)).abs() < thresh {
                    v.pop();
                } else {
                    break;
                }
            }
        };
        clean(&mut a);
        clean(&mut b);
        return Ok((
            ParityPolynomial::new(Parity::Odd, a),
            ParityPolynomial::new(Parity::Even, b),
        ));
    }
}

fn check_real_axis_clearance(den: &[Complex64], clearance: f64) -> Result<Vec<Complex64>> {
    let roots = poly_roots(den)?;
    for &r in &roots {
        if r.im.abs() < clearance {
            return Err(SMatrixError::RealAxisPole {
                q: r,
                clearance,
            });
        }
    }
    Ok(roots)
}

/// Fit a single-channel rational S-matrix to a continuous phase curve
/// `delta(q)` on (0, q_max] at `n` (even) Chebyshev collocation nodes.
pub fn fit_pade_single(
    curve: &dyn Fn(f64) -> f64,
    q_max: f64,
    n: usize,
    l: i32,
) -> Result<RationalSMatrix> {
    let (f1, f2) = fit_ratio(curve, q_max, n, l.max(0) as usize)?;
    let s = RationalSMatrix { f1, f2, l };
    check_real_axis_clearance(&s.denominator(), 1e-6 * q_max)?;
    Ok(s)
}

/// Fit the three polynomial pairs of a coupled S-matrix: half-angle channel
/// phases `tan(-delta_i/2) = f1_i/f2_i` and mixing `tan(-eps) = f1m/f2m`.
pub fn fit_pade_coupled(
    delta1: &dyn Fn(f64) -> f64,
    delta2: &dyn Fn(f64) -> f64,
    epsilon: &dyn Fn(f64) -> f64,
    q_max: f64,
    n: (usize, usize, usize),
    l1: i32,
    l2: i32,
) -> Result<CoupledRationalSMatrix> {
    let (f1_ch1, f2_ch1) = fit_ratio(&|q| 0.5 * delta1(q), q_max, n.0, l1.max(0) as usize)?;
    let (f1_ch2, f2_ch2) = fit_ratio(&|q| 0.5 * delta2(q), q_max, n.1, l2.max(0) as usize)?;
    // Mixing threshold: tan eps ~ q^{l1 + l2 + 1}.
    let (f1_mix, f2_mix) = fit_ratio(epsilon, q_max, n.2, ((l1 + l2).max(0) / 2) as usize)?;
    let s = CoupledRationalSMatrix {
        f1_ch1,
        f2_ch1,
        f1_ch2,
        f2_ch2,
        f1_mix,
        f2_mix,
        l1,
        l2,
    };
    for den in s.denominators().iter() {
        check_real_axis_clearance(den, 1e-6 * q_max)?;
    }
    Ok(s)
}

// ---------------------------------------------------------------------------
// Polynomial roots (Durand-Kerner simultaneous iteration).
// ---------------------------------------------------------------------------

/// All complex roots of `sum_k coeffs[k] z^k` (leading coefficient nonzero
/// after trimming). Degree 0 returns an empty set.
pub fn poly_roots(coeffs: &[Complex64]) -> Result<Vec<Complex64>> {
    let mut c: Vec<Complex64> = coeffs.to_vec();
    while c.len() > 1 && c.last().unwrap().norm() == 0.0 {
        c.pop();
    }
    let deg = c.len() - 1;
    if deg == 0 {
        return Ok(Vec::new());
    }
    let lead = c[deg];
    let monic: Vec<Complex64> = c.iter().map(|&x| x / lead).collect();
    let eval = |z: Complex64| {
        let mut acc = Complex64::new(0.0, 0.0);
        for &ck in monic.iter().rev() {
            acc = acc * z + ck;
        }
        acc
    };
    // Cauchy-type radius for starting points.
    let radius = 1.0
        + monic[..deg]
            .iter()
            .map(|x| x.norm())
            .fold(0.0_f64, f64::max);
    let seed = Complex64::new(0.4, 0.9);
    let mut z: Vec<Complex64> = (0..deg).map(|k| radius * seed.powu(k as u32 + 1)).collect();
    let tol = 1e-14 * radius;
    let mut converged = false;
    for _ in 0..600 {
        let mut max_step = 0.0_f64;
        for i in 0..deg {
            let mut denom = Complex64::new(1.0, 0.0);
            for j in 0..deg {
                if j != i {
                    denom *= z[i] - z[j];
                }
            }
            if denom.norm() == 0.0 {
                // Perturb coincident iterates.
                z[i] += Complex64::new(1e-8 * radius, 1e-8 * radius);
                max_step = f64::INFINITY;
                continue;
            }
            let step = eval(z[i]) / denom;
            z[i] -= step;
            max_step = max_step.max(step.norm());
        }
        if max_step < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(SMatrixError::RootsNoConvergence);
    }
    // Newton polish.
    let dmonic: Vec<Complex64> = monic
        .iter()
        .enumerate()
        .skip(1)
        .map(|(k, &ck)| ck * k as f64)
        .collect();
    let deval = |zz: Complex64| {
        let mut acc = Complex64::new(0.0, 0.0);
        for &ck in dmonic.iter().rev() {
            acc = acc * zz + ck;
        }
        acc
    };
    for zi in z.iter_mut() {
        for _ in 0..3 {
            let d = deval(*zi);
            if d.norm() > 0.0 {
                *zi -= eval(*zi) / d;
            }
        }
    }
    Ok(z)
}

// ---------------------------------------------------------------------------
// Spectral decomposition.
// ---------------------------------------------------------------------------

/// One separable kernel term: weight attached to momentum beta (Im beta > 0).
#[derive(Debug, Clone, Copy)]
pub struct SpectralTerm {
    pub beta: Complex64,
    pub weight: Complex64,
}

/// One S-matrix pole with its Laurent data: for a simple pole only `q1`
/// (the kernel weight `b_i`) is nonzero; for a double pole `q2` carries the
/// second-order coefficient of `i (S - 1)` and the kernel gains the
/// `x h' h + h y h'` companion terms.
#[derive(Debug, Clone, Copy)]
pub struct SpectralPole {
    pub beta: Complex64,
    pub order: u8,
    pub q1: Complex64,
    pub q2: Complex64,
}

/// Spectral content of a single-channel S-matrix: the Marchenko input data.
/// Kernel: `F(x,y) = sum poles [q1 h(bx)h(by) + q2 (x h'(bx)h(by)
/// + h(bx) y h'(by))] - sum bound M_j^2 h(i k x) h(i k y)` where h' is the
/// derivative in the full argument bx.
#[derive(Debug, Clone)]
pub struct SpectralData {
    pub l: i32,
    pub poles: Vec<SpectralPole>,
    /// (kappa, M): bound state at q = i kappa with asymptotic normalization M.
    pub bound_states: Vec<(f64, f64)>,
}

impl SpectralData {
    /// Kernel terms for the separable-kernel inversion, valid when every
    /// pole is simple: pole weights `b_i` plus bound-state weights `-M^2`.
    ///
    /// Panics if a second-order pole is present (those need the extended
    /// kernel form and do not reduce to plain `b h h` terms).
    pub fn terms(&self) -> Vec<SpectralTerm> {
        assert!(
            self.poles.iter().all(|p| p.order == 1),
            "terms() requires simple poles only"
        );
        let mut out: Vec<SpectralTerm> = self
            .poles
            .iter()
            .map(|p| SpectralTerm {
                beta: p.beta,
                weight: p.q1,
            })
            .collect();
        for &(kappa, m) in &self.bound_states {
            out.push(SpectralTerm {
                beta: Complex64::new(0.0, kappa),
                weight: Complex64::new(-m * m, 0.0),
            });
        }
        out
    }
}

/// Upper-half-plane poles and Laurent weights of a single-channel rational
/// S-matrix. Simple poles use the closed form
/// `b_i = 2 f1(beta_i)/(f2'(beta_i) + i f1'(beta_i))`, equal to
/// `i lim (q - beta)(S(q) - 1)`; clustered denominator roots are treated as
/// one double pole with both coefficients extracted by contour quadrature.
pub fn spectral_decompose(
    s: &RationalSMatrix,
    bound_states: &[(f64, f64)],
    q_scale: f64,
) -> Result<SpectralData> {
    let roots = check_real_axis_clearance(&s.denominator(), 1e-6 * q_scale)?;
    let upper: Vec<Complex64> = roots.into_iter().filter(|r| r.im > 0.0).collect();
    // Cluster multiple roots (double poles come out of Durand-Kerner as a
    // tight pair around the true root).
    let merge_tol = 1e-7 * q_scale;
    let mut clusters: Vec<(Complex64, u8)> = Vec::new();
    'outer: for beta in upper {
        for c in clusters.iter_mut() {
            if (c.0 - beta).norm() < merge_tol {
                // Keep the running mean as the cluster center.
                let n = c.1 as f64;
                c.0 = (c.0 * n + beta) / (n + 1.0);
                c.1 += 1;
                continue 'outer;
            }
        }
        clusters.push((beta, 1));
    }
    let mut poles = Vec::new();
    for (idx, &(beta, order)) in clusters.iter().enumerate() {
        if order == 1 {
            let b =
                2.0 * s.f1.eval(beta) / (s.f2.deriv(beta) + Complex64::i() * s.f1.deriv(beta));
            poles.push(SpectralPole {
                beta,
                order: 1,
                q1: b,
                q2: Complex64::new(0.0, 0.0),
            });
        } else {
            let mut radius = 0.45 * beta.im;
            for (jdx, &(other, _)) in clusters.iter().enumerate() {
                if jdx != idx {
                    radius = radius.min(0.45 * (beta - other).norm());
                }
            }
            let f = |q: Complex64| Complex64::i() * (s.eval(q) - 1.0);
            let q1 = contour_coeff_scalar(&f, beta, radius, 1)?;
            let q2 = contour_coeff_scalar(&f, beta, radius, 2)?;
            poles.push(SpectralPole {
                beta,
                order: 2,
                q1,
                q2,
            });
        }
    }
    poles.sort_by(|p, r| {
        (p.beta.re, p.beta.im)
            .partial_cmp(&(r.beta.re, r.beta.im))
            .unwrap()
    });
    Ok(SpectralData {
        l: s.l,
        poles,
        bound_states: bound_states.to_vec(),
    })
}

/// One coupled pole: Laurent matrices of `i (S - I)` at beta. The kernel
/// contribution is `H(bx) q1 H(by) + x H'(bx) q2 H(by) + H(bx) q2 y H'(by)`
/// (q2 = 0 for simple poles).
#[derive(Debug, Clone, Copy)]
pub struct CoupledPole {
    pub beta: Complex64,
    pub order: u8,
    pub q1: CMat2,
    pub q2: CMat2,
}

#[derive(Debug, Clone)]
pub struct CoupledSpectralData {
    pub l1: i32,
    pub l2: i32,
    pub poles: Vec<CoupledPole>,
    /// (kappa, M^2): bound state at q = i kappa with its quadratic
    /// normalization matrix; the kernel term is -H(i kappa x) M^2 H(i kappa y).
    pub bound_states: Vec<(f64, nalgebra::Matrix2<f64>)>,
}

/// Poles of the assembled coupled S-matrix with residue matrices extracted
/// by contour quadrature of the Laurent coefficients; channel-denominator
/// zeros give second-order (diagonal) poles, mixing-factor zeros first-order.
pub fn spectral_decompose_coupled(
    s: &CoupledRationalSMatrix,
    bound_states: &[(f64, nalgebra::Matrix2<f64>)],
    q_scale: f64,
) -> Result<CoupledSpectralData> {
    let dens = s.denominators();
    let mut candidates: Vec<(Complex64, u8)> = Vec::new();
    for (which, den) in dens.iter().enumerate() {
        let roots = check_real_axis_clearance(den, 1e-6 * q_scale)?;
        let order = if which < 2 { 2 } else { 1 };
        for r in roots.into_iter().filter(|r| r.im > 0.0) {
            candidates.push((r, order));
        }
    }
    // Merge coincident roots across factors (keep the highest order).
    let merge_tol = 1e-7 * q_scale;
    let mut merged: Vec<(Complex64, u8)> = Vec::new();
    'outer: for (beta, order) in candidates {
        for m in merged.iter_mut() {
            if (m.0 - beta).norm() < merge_tol {
                m.1 = m.1.max(order);
                continue 'outer;
            }
        }
        merged.push((beta, order));
    }
    merged.sort_by(|p, r| (p.0.re, p.0.im).partial_cmp(&(r.0.re, r.0.im)).unwrap());

    // Contour extraction of i*(S - I) Laurent coefficients at each pole.
    let mut poles = Vec::new();
    for (idx, &(beta, order)) in merged.iter().enumerate() {
        let mut radius = 0.45 * beta.im;
        for (jdx, &(other, _)) in merged.iter().enumerate() {
            if jdx != idx {
                radius = radius.min(0.45 * (beta - other).norm());
            }
        }
        let f = |q: Complex64| {
            let m = s.eval(q);
            (m - CMat2::identity()) * Complex64::i()
        };
        let a1 = contour_coeff(&f, beta, radius, 1)?;
        let a2 = if order == 2 {
            contour_coeff(&f, beta, radius, 2)?
        } else {
            CMat2::zeros()
        };
        poles.push(CoupledPole {
            beta,
            order,
            q1: a1,
            q2: a2,
        });
    }
    Ok(CoupledSpectralData {
        l1: s.l1,
        l2: s.l2,
        poles,
        bound_states: bound_states.to_vec(),
    })
}

/// Laurent coefficient of `(q - beta)^{-m}` of a matrix function by trapezoid
/// contour quadrature, with a doubled-resolution convergence check.
fn contour_coeff(
    f: &dyn Fn(Complex64) -> CMat2,
    beta: Complex64,
    radius: f64,
    m: i32,
) -> Result<CMat2> {
    let run = |points: usize| {
        let mut acc = CMat2::zeros();
        for k in 0..points {
            let theta = 2.0 * PI * k as f64 / points as f64;
            let w = radius * Complex64::new(theta.cos(), theta.sin());
            acc += f(beta + w) * w.powi(m);
        }
        acc / Complex64::new(points as f64, 0.0)
    };
    let coarse = run(96);
    let fine = run(192);
    let err = (fine - coarse).norm();
    if err > 1e-9 * (1.0 + fine.norm()) {
        return Err(SMatrixError::ContourNoConvergence(err));
    }
    Ok(fine)
}

/// Scalar version of [`contour_coeff`] for single-channel double poles.
fn contour_coeff_scalar(
    f: &dyn Fn(Complex64) -> Complex64,
    beta: Complex64,
    radius: f64,
    m: i32,
) -> Result<Complex64> {
    let run = |points: usize| {
        let mut acc = Complex64::new(0.0, 0.0);
        for k in 0..points {
            let theta = 2.0 * PI * k as f64 / points as f64;
            let w = radius * Complex64::new(theta.cos(), theta.sin());
            acc += f(beta + w) * w.powi(m);
        }
        acc / points as f64
    };
    let coarse = run(96);
    let fine = run(192);
    let err = (fine - coarse).norm();
    if err > 1e-9 * (1.0 + fine.norm()) {
        return Err(SMatrixError::ContourNoConvergence(err));
    }
    Ok(fine)
}

/// True when the pole multiset is invariant under beta -> -conj(beta).
pub fn conjugate_paired(poles: &[Complex64], tol: f64) -> bool {
    poles.iter().all(|&b| {
        let partner = -b.conj();
        poles.iter().any(|&c| (c - partner).norm() < tol)
    })
}

// ---------------------------------------------------------------------------
// Tail extrapolation through an exponential model potential.
// ---------------------------------------------------------------------------

/// Exponential model potential `V(r) = A e^{-b r}` (A in fm^-2, b in fm^-1).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TailModel {
    pub a: f64,
    pub b: f64,
}

impl TailModel {
    fn phase(&self, q: f64, l: i32) -> f64 {
        if self.a == 0.0 {
            return 0.0;
        }
        let a = Complex64::new(self.a, 0.0);
        let b = self.b.max(0.05);
        let r_max = (40.0 / b).clamp(15.0, 120.0);
        forward::phase_eq_single(&move |r: f64| a * (-b * r).exp(), r_max, q, l)
            .map(|p| p.terminal.re)
            .unwrap_or(f64::NAN)
    }
}

/// Composite phase curve: data spline on low q, model-potential phase beyond,
/// blended smoothly (C^1) across a window below `q_join`.
#[derive(Debug, Clone)]
pub struct TailCurve {
    data: CubicSpline,
    model: CubicSpline,
    q_join: f64,
    window: f64,
    pub model_params: TailModel,
}

impl TailCurve {
    pub fn eval(&self, q: f64) -> f64 {
        if q >= self.q_join {
            return self.model.eval(q);
        }
        let lo = self.q_join - self.window;
        if q <= lo {
            return self.data.eval(q);
        }
        let t = (q - lo) / self.window;
        let sm = t * t * (3.0 - 2.0 * t); // C^1 smoothstep
        (1.0 - sm) * self.data.eval(q) + sm * self.model.eval(q)
    }

    pub fn q_max(&self) -> f64 {
        self.model.x_max()
    }
}

/// Extend sampled phase data past `q_data_max` out to `q_big` by fitting the
/// exponential model potential so its forward-solved phase passes inside the
/// error bars near the end of the data, then blending.
pub fn extrapolate_tail(
    samples: &[PhaseRecord],
    l: i32,
    q_big: f64,
    guess: TailModel,
) -> Result<TailCurve> {
    assert!(samples.len() >= 4, "tail fitting needs at least 4 samples");
    let qs: Vec<f64> = samples.iter().map(|r| r.q).collect();
    let ds: Vec<f64> = samples.iter().map(|r| r.delta).collect();
    let q_data_max = *qs.last().unwrap();
    let data_spline = CubicSpline::natural(qs.clone(), ds.clone());

    // Matching window: the upper quarter of the data, at least 4 points.
    let mut window: Vec<&PhaseRecord> = samples.iter().filter(|r| r.q >= 0.75 * q_data_max).collect();
    if window.len() < 4 {
        window = samples.iter().rev().take(4).collect();
    }

    let all_zero = samples.iter().all(|r| r.delta.abs() < 1e-12);
    let best = if all_zero {
        TailModel { a: 0.0, b: guess.b.max(1.0) }
    } else {
        let objective = |p: &[f64]| {
            let model = TailModel {
                a: p[0],
                b: p[1].abs().max(0.05),
            };
            let mut sum = 0.0;
            for r in &window {
                let err = if r.delta_err > 0.0 { r.delta_err } else { 1e-3 };
                let d = model.phase(r.q, l);
                if !d.is_finite() {
                    return f64::INFINITY;
                }
                sum += ((d - r.delta) / err).powi(2);
            }
            sum
        };
        let start = vec![guess.a, guess.b.max(0.05)];
        let fitted = nelder_mead(&objective, &start, 0.3, 200);
        TailModel {
            a: fitted[0],
            b: fitted[1].abs().max(0.05),
        }
    };

    // Gate: model must come within 3 error bars across the window.
    let mut worst = 0.0_f64;
    for r in &window {
        let err = if r.delta_err > 0.0 { r.delta_err } else { 1e-3 };
        worst = worst.max((best.phase(r.q, l) - r.delta).abs() / err);
    }
    if worst > 3.0 {
        return Err(SMatrixError::TailFitFailure { best: worst });
    }

    // Tabulate the model phase from inside the blend window out to q_big.
    let blend_w = 0.15 * q_data_max;
    let lo = (q_data_max - 1.5 * blend_w).max(0.05 * q_data_max);
    let n_tab = 80;
    let mut mq = Vec::with_capacity(n_tab);
    let mut md = Vec::with_capacity(n_tab);
    for i in 0..n_tab {
        let q = lo + (q_big - lo) * i as f64 / (n_tab - 1) as f64;
        mq.push(q);
        md.push(best.phase(q, l));
    }
    Ok(TailCurve {
        data: data_spline,
        model: CubicSpline::natural(mq, md),
        q_join: q_data_max,
        window: blend_w,
        model_params: best,
    })
}

/// Plain Nelder-Mead minimization (used only for the 2-parameter tail fit).
fn nelder_mead(f: &dyn Fn(&[f64]) -> f64, start: &[f64], step: f64, iters: usize) -> Vec<f64> {
    let n = start.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((start.to_vec(), f(start)));
    for i in 0..n {
        let mut p = start.to_vec();
        p[i] += if p[i].abs() > 1e-12 { step * p[i] } else { step };
        let v = f(&p);
        simplex.push((p, v));
    }
    for _ in 0..iters {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let centroid: Vec<f64> = (0..n)
            .map(|d| simplex[..n].iter().map(|(p, _)| p[d]).sum::<f64>() / n as f64)
            .collect();
        let worst = simplex[n].clone();
        let refl: Vec<f64> = (0..n)
            .map(|d| centroid[d] + (centroid[d] - worst.0[d]))
            .collect();
        let fr = f(&refl);
        if fr < simplex[0].1 {
            let exp: Vec<f64> = (0..n)
                .map(|d| centroid[d] + 2.0 * (centroid[d] - worst.0[d]))
                .collect();
            let fe = f(&exp);
            simplex[n] = if fe < fr { (exp, fe) } else { (refl, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (refl, fr);
        } else {
            let contr: Vec<f64> = (0..n)
                .map(|d| centroid[d] + 0.5 * (worst.0[d] - centroid[d]))
                .collect();
            let fc = f(&contr);
            if fc < worst.1 {
                simplex[n] = (contr, fc);
            } else {
                // Shrink toward the best vertex.
                let best = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    for d in 0..n {
                        v.0[d] = best[d] + 0.5 * (v.0[d] - best[d]);
                    }
                    v.1 = f(&v.0);
                }
            }
        }
        let spread = simplex.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
        let spread_max = simplex.iter().map(|(_, v)| *v).fold(0.0_f64, f64::max);
        if spread_max - spread < 1e-12 * (1.0 + spread) {
            break;
        }
    }
    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    simplex[0].0.clone()
}

// ---------------------------------------------------------------------------
// Data-format conversions.
// ---------------------------------------------------------------------------

/// Convert a K-matrix style row (delta-tilde, rho-tilde) to the
/// `S = cos^2 rho e^{2 i delta}` convention:
/// `S = (1 - K_i + i K_r)/(1 + K_i - i K_r)`, `K_r = tan(delta-tilde)`,
/// `K_i = tan^2(rho-tilde)`. The returned delta is principal-branch.
pub fn kmatrix_to_srecord(delta_tilde: f64, rho_tilde: f64) -> Result<(f64, f64)> {
    let kr = delta_tilde.tan();
    let ki = rho_tilde.tan().powi(2);
    let num = Complex64::new(1.0 - ki, kr);
    let den = Complex64::new(1.0 + ki, -kr);
    let s = num / den;
    let smod = s.norm();
    if smod > 1.0 + 1e-12 {
        return Err(SMatrixError::NonPhysicalS { smod });
    }
    let rho = smod.min(1.0).sqrt().acos();
    Ok((0.5 * s.arg(), rho))
}

/// Assemble S from Blatt-Biedenharn eigenphases:
/// `S = R(eps) diag(e^{2i d1}, e^{2i d2}) R(eps)^T`.
pub fn s_from_bb(d1: Complex64, d2: Complex64, eps: Complex64) -> CMat2 {
    let e1 = (2.0 * Complex64::i() * d1).exp();
    let e2 = (2.0 * Complex64::i() * d2).exp();
    let (c, s) = (eps.cos(), eps.sin());
    CMat2::new(
        c * c * e1 + s * s * e2,
        c * s * (e1 - e2),
        c * s * (e1 - e2),
        s * s * e1 + c * c * e2,
    )
}

/// Assemble S from bar (Stapp-type) phases:
/// diagonal `e^{2i d} cos 2eps`, off-diagonal `i e^{i(d1+d2)} sin 2eps`.
pub fn s_from_stapp(d1: Complex64, d2: Complex64, eps: Complex64) -> CMat2 {
    let c2e = (2.0 * eps).cos();
    let s2e = (2.0 * eps).sin();
    let off = Complex64::i() * ((d1 + d2) * Complex64::i()).exp() * s2e;
    CMat2::new(
        (2.0 * Complex64::i() * d1).exp() * c2e,
        off,
        off,
        (2.0 * Complex64::i() * d2).exp() * c2e,
    )
}

fn log_branch_near(z: Complex64, prev: Complex64) -> Complex64 {
    // value v with e^{iv} = z, v nearest prev (v = -i ln z + 2 pi k).
    let base = -Complex64::i() * z.ln();
    let k = ((prev - base).re / (2.0 * PI)).round();
    base + k * 2.0 * PI
}

/// Bar (Stapp-type) phases from a symmetric 2x2 S, complex-capable;
/// `prev` anchors the branches for continuity along a scan.
pub fn stapp_from_s(s: &CMat2, prev: Option<(Complex64, Complex64, Complex64)>) -> (Complex64, Complex64, Complex64) {
    let zero = Complex64::new(0.0, 0.0);
    let (p1, p2, pe) = prev.unwrap_or((zero, zero, zero));
    let det = s[(0, 0)] * s[(1, 1)] - s[(0, 1)] * s[(1, 0)];
    // det S = e^{2i(d1+d2)}
    let sum = 0.5 * log_branch_near(det, 2.0 * (p1 + p2)); // = d1 + d2
    let s2e = -Complex64::i() * s[(0, 1)] * (-Complex64::i() * sum).exp();
    let eps = 0.5 * asin_near(s2e, 2.0 * pe);
    let c2e = (2.0 * eps).cos();
    let d1 = if c2e.norm() > 1e-12 {
        0.5 * log_branch_near(s[(0, 0)] / c2e, 2.0 * p1)
    } else {
        p1
    };
    (d1, sum - d1, eps)
}

fn asin_near(z: Complex64, prev: Complex64) -> Complex64 {
    // asin branches: v = asin(z) + 2 pi k  or  v = pi - asin(z) + 2 pi k.
    let a = z.asin();
    let cand1 = a + 2.0 * PI * ((prev - a).re / (2.0 * PI)).round();
    let b = PI - a;
    let cand2 = b + 2.0 * PI * ((prev - b).re / (2.0 * PI)).round();
    if (cand1 - prev).norm() <= (cand2 - prev).norm() {
        cand1
    } else {
        cand2
    }
}

/// Blatt-Biedenharn eigenphases from a symmetric 2x2 S via the Cayley
/// transform `K = -i (S - I)(S + I)^{-1}`, complex-capable.
pub fn bb_from_s(s: &CMat2, prev: Option<(Complex64, Complex64, Complex64)>) -> (Complex64, Complex64, Complex64) {
    let zero = Complex64::new(0.0, 0.0);
    let (p1, p2, pe) = prev.unwrap_or((zero, zero, zero));
    let i = Complex64::i();
    let num = s - CMat2::identity();
    let den = (s + CMat2::identity())
        .try_inverse()
        .expect("S + I singular (phase at pi/2 exactly)");
    let k = num * den * (-i);
    let off = (k[(0, 1)] + k[(1, 0)]) * 0.5;
    let k = CMat2::new(k[(0, 0)], off, off, k[(1, 1)]);
    let (t1, t2, eps) = crate::forward::tangent_eigen(&k, pe);
    let near = |t: Complex64, p: Complex64| {
        let base = t.atan();
        base + PI * ((p - base).re / PI).round()
    };
    (near(t1, p1), near(t2, p2), eps)
}
