//! End-to-end orchestration: data ingestion, relativistic kinematics, full
//! inversion runs, and report emission.
//!
//! The pipeline turns a phase-shift table (lab energies, degrees) into a
//! local potential: ingest → tail extrapolation → rational S-matrix fit →
//! spectral decomposition → Marchenko inversion → forward round-trip check →
//! absorption-scaling determination → report. Potentials are stored in
//! `2mV` units (fm^-2), matching the radial equation `u'' + (q^2 - 2mV)u = 0`,
//! with MeV values emitted alongside via the configured reduced mass.

use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::forward;
use crate::marchenko1;
use crate::marchenko2;
use crate::optical;
use crate::smatrix::{self, PhaseRecord, TailModel};

/// hbar * c in MeV fm.
pub const HBARC: f64 = 197.326_980_4;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("input error: {0}")]
    Input(String),
    #[error("round-trip gate exceeded: max phase deviation {max_dev:.3e} rad > gate {gate:.3e}")]
    GateExceeded { max_dev: f64, gate: f64 },
    #[error("stage {stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

impl PipelineError {
    /// Stable CLI exit code: 0 success, 2 gate failure, 3 input error,
    /// 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Input(_) => 3,
            PipelineError::GateExceeded { .. } => 2,
            PipelineError::Stage { .. } => 1,
        }
    }
}

fn stage<E: std::fmt::Display>(name: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage: name,
        message: e.to_string(),
    }
}

// ---------------------------------------------------------------------------
// Configuration.
// ---------------------------------------------------------------------------

/// Bound-state input: binding energy plus asymptotic normalization (and the
/// D/S ratio for a coupled pair).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundStateInput {
    pub e_mev: f64,
    /// Asymptotic normalization A_S (fm^-1/2).
    pub a_s: f64,
    /// D/S asymptotic ratio; coupled waves only.
    #[serde(default)]
    pub eta: Option<f64>,
}

fn default_r_max() -> f64 {
    12.0
}
fn default_grid_n() -> usize {
    1200
}
fn default_fit_n() -> usize {
    8
}
fn default_fit_n_coupled() -> [usize; 3] {
    [6, 6, 6]
}
fn default_gate() -> f64 {
    2e-3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelConfig {
    /// Projectile mass, MeV (fixed-target convention: m1 carries T_lab).
    pub m1_mev: f64,
    /// Target mass, MeV.
    pub m2_mev: f64,
    /// Free-form partial-wave label, e.g. "1S0" or "3SD1".
    pub wave: String,
    pub l: i32,
    /// Second partial wave of a coupled pair; its presence selects the
    /// coupled path.
    #[serde(default)]
    pub l2: Option<i32>,
    /// Levinson offset: multiples of pi added to the channel-1 phase so that
    /// delta(0) = n pi counts bound (including forbidden) states.
    #[serde(default)]
    pub levinson_n: u32,
    /// Flip the sign of the mixing parameter on ingest (PWA convention
    /// bridge; leaves the S-matrix physics unchanged together with the
    /// Levinson offset).
    #[serde(default)]
    pub flip_epsilon: bool,
    #[serde(default)]
    pub bound_states: Vec<BoundStateInput>,
    /// Fit window upper edge, fm^-1; must exceed the largest data momentum.
    pub q_max: f64,
    #[serde(default = "default_r_max")]
    pub r_max: f64,
    #[serde(default = "default_grid_n")]
    pub grid_n: usize,
    #[serde(default = "default_fit_n")]
    pub fit_n: usize,
    #[serde(default = "default_fit_n_coupled")]
    pub fit_n_coupled: [usize; 3],
    /// Round-trip gate on max |delta_model - delta_data|, radians.
    #[serde(default = "default_gate")]
    pub gate: f64,
}

impl ChannelConfig {
    pub fn reduced_mass_mev(&self) -> f64 {
        self.m1_mev * self.m2_mev / (self.m1_mev + self.m2_mev)
    }

    pub fn is_coupled(&self) -> bool {
        self.l2.is_some()
    }

    /// Binding energy (MeV) to bound-state momentum kappa (fm^-1).
    pub fn kappa_of(&self, e_mev: f64) -> f64 {
        (2.0 * self.reduced_mass_mev() * e_mev).sqrt() / HBARC
    }

    /// MeV per fm^-2 for the stored 2mV potentials.
    pub fn mev_per_fm2(&self) -> f64 {
        HBARC * HBARC / (2.0 * self.reduced_mass_mev())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m1_mev > 0.0 && self.m2_mev > 0.0) {
            return Err(PipelineError::Input("masses must be positive".into()));
        }
        if !(self.q_max > 0.0 && self.r_max > 0.0) {
            return Err(PipelineError::Input("q_max and r_max must be positive".into()));
        }
        if self.grid_n < 10 {
            return Err(PipelineError::Input("grid_n too small".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical (serde_json) form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn load_config(path: &Path) -> Result<ChannelConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?;
    let cfg: ChannelConfig = serde_json::from_str(&text)
        .map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Kinematics.
// ---------------------------------------------------------------------------

/// Center-of-mass momentum (fm^-1) of a fixed-target collision: projectile
/// m1 with lab kinetic energy T_lab on an m2 at rest.
pub fn cm_momentum(t_lab_mev: f64, m1_mev: f64, m2_mev: f64) -> f64 {
    let (m1, m2) = (m1_mev, m2_mev);
    let m_sq = m1 * m1 + m2 * m2 + 2.0 * m2 * (m1 + t_lab_mev);
    let q2 = m_sq / 4.0 - (m1 * m1 + m2 * m2) / 2.0
        + (m1 * m1 - m2 * m2).powi(2) / (4.0 * m_sq);
    q2.max(0.0).sqrt() / HBARC
}

/// Inverse of [`cm_momentum`]: lab kinetic energy from the cm momentum.
pub fn lab_energy(q_fm: f64, m1_mev: f64, m2_mev: f64) -> f64 {
    let q = q_fm * HBARC;
    let (s1, s2) = (m1_mev * m1_mev, m2_mev * m2_mev);
    // M^2 solves x^2 - 2(s1 + s2 + 2 q^2) x + (s1 - s2)^2 = 0 (larger root).
    let b = s1 + s2 + 2.0 * q * q;
    let m_sq = b + (b * b - (s1 - s2).powi(2)).sqrt();
    (m_sq - s1 - s2 - 2.0 * m1_mev * m2_mev) / (2.0 * m2_mev)
}

// ---------------------------------------------------------------------------
// Ingestion.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhaseConvention {
    /// Phases and inelasticity angles given directly.
    DeltaRho,
    /// Arndt-style K-matrix parameters, converted per row.
    TypeK,
}

/// One raw data row; angles in degrees, energies in MeV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawRow {
    #[serde(rename = "T_lab_MeV")]
    pub t_lab_mev: f64,
    pub delta_deg: f64,
    #[serde(default)]
    pub delta_err_deg: f64,
    #[serde(default)]
    pub delta2_deg: Option<f64>,
    #[serde(default)]
    pub delta2_err_deg: Option<f64>,
    #[serde(default)]
    pub eps_deg: Option<f64>,
    #[serde(default)]
    pub eps_err_deg: Option<f64>,
    #[serde(default)]
    pub rho_deg: f64,
    #[serde(default)]
    pub rho_err_deg: f64,
}

fn record_from_row(row: &RawRow, cfg: &ChannelConfig, convention: PhaseConvention, row_no: usize) -> Result<PhaseRecord> {
    let deg = std::f64::consts::PI / 180.0;
    let q = cm_momentum(row.t_lab_mev, cfg.m1_mev, cfg.m2_mev);
    if q <= 0.0 {
        return Err(PipelineError::Input(format!(
            "row {row_no}: T_lab = {} gives q = 0",
            row.t_lab_mev
        )));
    }
    let (mut delta, mut rho) = (row.delta_deg * deg, row.rho_deg * deg);
    if convention == PhaseConvention::TypeK {
        let (d, r) = smatrix::kmatrix_to_srecord(delta, rho)
            .map_err(|e| PipelineError::Input(format!("row {row_no}: {e}")))?;
        delta = d;
        rho = r;
    }
    delta += cfg.levinson_n as f64 * std::f64::consts::PI;
    let eps_sign = if cfg.flip_epsilon { -1.0 } else { 1.0 };
    Ok(PhaseRecord {
        q,
        delta,
        delta_err: row.delta_err_deg * deg,
        delta2: row.delta2_deg.map(|d| d * deg),
        delta2_err: row.delta2_err_deg.map(|d| d * deg),
        epsilon: row.eps_deg.map(|d| d * deg * eps_sign),
        epsilon_err: row.eps_err_deg.map(|d| d * deg),
        rho,
        rho_err: row.rho_err_deg * deg,
    })
}

pub fn ingest(
    path: &Path,
    format: DataFormat,
    convention: PhaseConvention,
    cfg: &ChannelConfig,
) -> Result<Vec<PhaseRecord>> {
    let rows: Vec<RawRow> = match format {
        DataFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new()
                .trim(csv::Trim::All)
                .from_path(path)
                .map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?;
            let mut rows = Vec::new();
            for (i, rec) in reader.deserialize::<RawRow>().enumerate() {
                rows.push(rec.map_err(|e| {
                    PipelineError::Input(format!("{} row {}: {e}", path.display(), i + 1))
                })?);
            }
            rows
        }
        DataFormat::Json => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?
        }
    };
    let mut records = rows
        .iter()
        .enumerate()
        .map(|(i, row)| record_from_row(row, cfg, convention, i + 1))
        .collect::<Result<Vec<_>>>()?;
    records.sort_by(|a, b| a.q.partial_cmp(&b.q).unwrap());
    Ok(records)
}

// ---------------------------------------------------------------------------
// Report.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct PoleEntry {
    pub beta_re: f64,
    pub beta_im: f64,
    pub order: u8,
}

#[derive(Debug, Clone, Serialize)]
pub struct PotentialRow {
    pub r_fm: f64,
    /// Channel columns: one (re, im) pair for a single wave; (11, 22, 12)
    /// pairs for a coupled pair. Units: 2mV, fm^-2.
    pub v: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AlphaEntry {
    pub q: f64,
    pub t_lab_mev: f64,
    pub alpha: Vec<f64>,
    pub provenance: String,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct BoundStateReport {
    pub kappa: f64,
    pub e_mev: f64,
    pub a_s: f64,
    pub eta: Option<f64>,
    /// Matter radius (fm) and point-like quadrupole moment (fm^2) for a
    /// coupled S-D pair.
    pub r_d: Option<f64>,
    pub q_moment: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub condition_warnings: Vec<(f64, f64)>,
    /// max |delta_model - delta_data| over data momenta (mod pi), radians.
    pub round_trip_max_dev: f64,
    /// delta(0+) - delta(q_max) in units of pi.
    pub levinson_drop_over_pi: f64,
    /// Coupled only: sensitivity row-sum error and potential asymmetry.
    pub row_sum_error: Option<f64>,
    pub potential_asymmetry: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub config: ChannelConfig,
    pub config_hash: String,
    pub coupled: bool,
    pub units: &'static str,
    pub mev_per_fm2: f64,
    /// Fitted numerator/denominator coefficients in ascending even/odd
    /// powers of q (one pair per fitted curve).
    pub fit_coefficients: Vec<(Vec<f64>, Vec<f64>)>,
    pub poles: Vec<PoleEntry>,
    pub potential: Vec<PotentialRow>,
    pub bound_state: Option<BoundStateReport>,
    pub alpha: Vec<AlphaEntry>,
    pub diagnostics: Diagnostics,
    /// RFC 3339 wall-clock stamp; excluded from determinism guarantees.
    pub timestamp: String,
}

fn timestamp_now() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("unix:{secs}")
}

fn wrap_mod_pi(x: f64) -> f64 {
    let pi = std::f64::consts::PI;
    x - pi * (x / pi).round()
}

fn uniform_grid(r_max: f64, n: usize) -> Vec<f64> {
    (1..=n).map(|k| r_max * k as f64 / n as f64).collect()
}

// ---------------------------------------------------------------------------
// Single-channel run.
// ---------------------------------------------------------------------------

/// Everything the single-channel pipeline produces in memory.
pub struct SingleRun {
    pub report: RunReport,
    pub potential: marchenko1::RadialPotential,
    pub curve: smatrix::TailCurve,
}

pub fn run_single(cfg: &ChannelConfig, records: &[PhaseRecord]) -> Result<SingleRun> {
    cfg.validate()?;
    if records.len() < 4 {
        return Err(PipelineError::Input(format!(
            "need at least 4 records, got {}",
            records.len()
        )));
    }
    let l = cfg.l;
    // Tail extrapolation up to the fit window edge.
    let curve = smatrix::extrapolate_tail(records, l, cfg.q_max, TailModel { a: -0.5, b: 1.0 })
        .map_err(stage("tail"))?;
    let delta_fn = |q: f64| curve.eval(q);
    let s = smatrix::fit_pade_single(&delta_fn, cfg.q_max, cfg.fit_n, l).map_err(stage("fit"))?;
    let bound: Vec<(f64, f64)> = cfg
        .bound_states
        .iter()
        .map(|b| (cfg.kappa_of(b.e_mev), b.a_s))
        .collect();
    let spec = smatrix::spectral_decompose(&s, &bound, cfg.q_max).map_err(stage("spectral"))?;
    let grid = uniform_grid(cfg.r_max, cfg.grid_n);
    let sol = marchenko1::solve_output_kernel(&spec, &grid).map_err(stage("marchenko"))?;
    let v = marchenko1::extract_potential(&sol);

    // Forward round trip at the data momenta.
    let vf = |r: f64| v.eval(r);
    let mut max_dev = 0.0_f64;
    for rec in records {
        let d = forward::phase_eq_single(&vf, cfg.r_max, rec.q, l)
            .map_err(stage("forward"))?
            .terminal;
        max_dev = max_dev.max(wrap_mod_pi(d.re - rec.delta).abs());
    }
    // Levinson drop diagnostic across the fit window.
    let d_lo = forward::phase_eq_single(&vf, cfg.r_max, 0.02 * cfg.q_max, l)
        .map_err(stage("forward"))?
        .terminal
        .re;
    let d_hi = forward::phase_eq_single(&vf, cfg.r_max, cfg.q_max, l)
        .map_err(stage("forward"))?
        .terminal
        .re;
    let levinson = (d_lo - d_hi) / std::f64::consts::PI;

    // Bound-state recovery check when configured.
    let bound_state = if let Some(b) = cfg.bound_states.first() {
        let kappa0 = cfg.kappa_of(b.e_mev);
        let vr = |r: f64| v.eval(r).re;
        let found = forward::find_bound_states(
            &vr,
            l,
            (0.3 * kappa0, 3.0 * kappa0),
            1.0,
            cfg.r_max,
        );
        found.first().map(|bs| BoundStateReport {
            kappa: bs.kappa,
            e_mev: (HBARC * bs.kappa).powi(2) / (2.0 * cfg.reduced_mass_mev()),
            a_s: bs.a_s,
            eta: None,
            r_d: None,
            q_moment: None,
        })
    } else {
        None
    };

    // Absorption scaling.
    let init: Vec<f64> = records
        .iter()
        .map(|r| optical::alpha_predict_single(r.delta, r.rho).unwrap_or(0.0))
        .collect();
    let scaling =
        optical::alpha_refine_single(&v, records, l, &init).map_err(stage("optical"))?;
    let alpha: Vec<AlphaEntry> = scaling
        .entries
        .iter()
        .map(|e| AlphaEntry {
            q: e.q,
            t_lab_mev: lab_energy(e.q, cfg.m1_mev, cfg.m2_mev),
            alpha: e.alpha.clone(),
            provenance: match e.provenance {
                optical::Provenance::Predicted => "predicted".into(),
                optical::Provenance::Refined => "refined".into(),
            },
            converged: e.converged,
        })
        .collect();

    let report = RunReport {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        coupled: false,
        units: "2mV_fm^-2",
        mev_per_fm2: cfg.mev_per_fm2(),
        fit_coefficients: vec![(s.f1.dense(), s.f2.dense())],
        poles: spec
            .poles
            .iter()
            .map(|p| PoleEntry {
                beta_re: p.beta.re,
                beta_im: p.beta.im,
                order: p.order,
            })
            .collect(),
        potential: v
            .grid
            .iter()
            .zip(&v.values)
            .map(|(&r, val)| PotentialRow {
                r_fm: r,
                v: vec![[val.re, val.im]],
            })
            .collect(),
        bound_state,
        alpha,
        diagnostics: Diagnostics {
            condition_warnings: sol.cond_warnings.clone(),
            round_trip_max_dev: max_dev,
            levinson_drop_over_pi: levinson,
            row_sum_error: None,
            potential_asymmetry: None,
        },
        timestamp: timestamp_now(),
    };
    if max_dev > cfg.gate {
        return Err(PipelineError::GateExceeded {
            max_dev,
            gate: cfg.gate,
        });
    }
    Ok(SingleRun {
        report,
        potential: v,
        curve,
    })
}

// ---------------------------------------------------------------------------
// Coupled run.
// ---------------------------------------------------------------------------

pub struct CoupledRun {
    pub report: RunReport,
    pub potential: marchenko2::CoupledPotential,
}

fn coupled_component_records(records: &[PhaseRecord]) -> Result<[Vec<PhaseRecord>; 3]> {
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    for (i, r) in records.iter().enumerate() {
        let d2 = r.delta2.ok_or_else(|| {
            PipelineError::Input(format!("record {} lacks delta2 for a coupled wave", i + 1))
        })?;
        let ep = r.epsilon.ok_or_else(|| {
            PipelineError::Input(format!("record {} lacks epsilon for a coupled wave", i + 1))
        })?;
        out[0].push(PhaseRecord::elastic(r.q, r.delta, r.delta_err));
        out[1].push(PhaseRecord::elastic(r.q, d2, r.delta2_err.unwrap_or(0.0)));
        out[2].push(PhaseRecord::elastic(r.q, ep, r.epsilon_err.unwrap_or(0.0)));
    }
    Ok(out)
}

pub fn run_coupled(cfg: &ChannelConfig, records: &[PhaseRecord]) -> Result<CoupledRun> {
    cfg.validate()?;
    let l1 = cfg.l;
    let l2 = cfg
        .l2
        .ok_or_else(|| PipelineError::Input("coupled run needs l2".into()))?;
    if records.len() < 4 {
        return Err(PipelineError::Input(format!(
            "need at least 4 records, got {}",
            records.len()
        )));
    }
    let comps = coupled_component_records(records)?;
    let guess = TailModel { a: -0.5, b: 1.0 };
    let c1 = smatrix::extrapolate_tail(&comps[0], l1, cfg.q_max, guess).map_err(stage("tail"))?;
    let c2 = smatrix::extrapolate_tail(&comps[1], l2, cfg.q_max, guess).map_err(stage("tail"))?;
    let ce = smatrix::extrapolate_tail(&comps[2], l1, cfg.q_max, guess).map_err(stage("tail"))?;
    let n = cfg.fit_n_coupled;
    let s = smatrix::fit_pade_coupled(
        &|q| c1.eval(q),
        &|q| c2.eval(q),
        &|q| ce.eval(q),
        cfg.q_max,
        (n[0], n[1], n[2]),
        l1,
        l2,
    )
    .map_err(stage("fit"))?;
    let bound: Vec<(f64, nalgebra::Matrix2<f64>)> = cfg
        .bound_states
        .iter()
        .map(|b| {
            let eta = b.eta.unwrap_or(0.0);
            let a2 = b.a_s * b.a_s;
            (
                cfg.kappa_of(b.e_mev),
                nalgebra::Matrix2::new(a2, a2 * eta, a2 * eta, a2 * eta * eta),
            )
        })
        .collect();
    let spec =
        smatrix::spectral_decompose_coupled(&s, &bound, cfg.q_max).map_err(stage("spectral"))?;
    let grid = uniform_grid(cfg.r_max, cfg.grid_n);
    let sol = marchenko2::solve_coupled_kernel(&spec, &grid).map_err(stage("marchenko"))?;
    let v = marchenko2::extract_coupled_potential(&sol).map_err(stage("marchenko"))?;

    // Forward round trip in the bar-phase convention, tracking branches
    // upward in momentum.
    let vf = |r: f64| v.eval(r);
    let mut max_dev = 0.0_f64;
    let mut prev = None;
    for rec in records {
        let t = forward::phase_eq_coupled(&vf, cfg.r_max, rec.q, l1, l2)
            .map_err(stage("forward"))?
            .terminal;
        let sm = smatrix::s_from_bb(t.delta1, t.delta2, t.epsilon);
        let (b1, b2, be) = smatrix::stapp_from_s(&sm, prev);
        prev = Some((b1, b2, be));
        max_dev = max_dev.max(wrap_mod_pi(b1.re - rec.delta).abs());
        max_dev = max_dev.max(wrap_mod_pi(b2.re - rec.delta2.unwrap()).abs());
        max_dev = max_dev.max(wrap_mod_pi(be.re - rec.epsilon.unwrap()).abs());
    }

    // Bound state of the reconstructed potential.
    let bound_state = if let Some(b) = cfg.bound_states.first() {
        let kappa0 = cfg.kappa_of(b.e_mev);
        forward::find_coupled_bound_state(
            &vf,
            l1,
            l2,
            (0.5 * kappa0, 2.0 * kappa0),
            1.0,
            cfg.r_max,
        )
        .map(|bs| {
            let (r_d, q_mom) = forward::deuteron_observables(&bs);
            BoundStateReport {
                kappa: bs.kappa,
                e_mev: (HBARC * bs.kappa).powi(2) / (2.0 * cfg.reduced_mass_mev()),
                a_s: bs.a_s,
                eta: Some(bs.eta),
                r_d: Some(r_d),
                q_moment: Some(q_mom),
            }
        })
    } else {
        None
    };

    // Absorption scalings at absorptive energies: targets take the measured
    // rho as a common eigenphase absorption (Im delta1 = Im delta2 =
    // -ln(cos^2 rho)/2, Im epsilon = 0).
    let mut alpha = Vec::new();
    let mut row_sum_error = 0.0_f64;
    for rec in records {
        if rec.rho == 0.0 {
            alpha.push(AlphaEntry {
                q: rec.q,
                t_lab_mev: lab_energy(rec.q, cfg.m1_mev, cfg.m2_mev),
                alpha: vec![0.0; 3],
                provenance: "predicted".into(),
                converged: true,
            });
            continue;
        }
        let t = -(rec.rho.cos().powi(2)).ln() / 2.0;
        let res = optical::alpha_predict_coupled(&v, rec.q, [t, t, 0.0], l1, l2)
            .map_err(stage("optical"))?;
        row_sum_error = row_sum_error.max(res.row_sum_error);
        alpha.push(AlphaEntry {
            q: rec.q,
            t_lab_mev: lab_energy(rec.q, cfg.m1_mev, cfg.m2_mev),
            alpha: res.alpha.to_vec(),
            provenance: "predicted".into(),
            converged: true,
        });
    }

    let d_lo = forward::phase_eq_coupled(&vf, cfg.r_max, 0.02 * cfg.q_max, l1, l2)
        .map_err(stage("forward"))?
        .terminal;
    let d_hi = forward::phase_eq_coupled(&vf, cfg.r_max, cfg.q_max, l1, l2)
        .map_err(stage("forward"))?
        .terminal;
    let levinson = (d_lo.delta1.re - d_hi.delta1.re) / std::f64::consts::PI;

    let report = RunReport {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        coupled: true,
        units: "2mV_fm^-2",
        mev_per_fm2: cfg.mev_per_fm2(),
        fit_coefficients: vec![
            (s.f1_ch1.dense(), s.f2_ch1.dense()),
            (s.f1_ch2.dense(), s.f2_ch2.dense()),
            (s.f1_mix.dense(), s.f2_mix.dense()),
        ],
        poles: spec
            .poles
            .iter()
            .map(|p| PoleEntry {
                beta_re: p.beta.re,
                beta_im: p.beta.im,
                order: p.order,
            })
            .collect(),
        potential: v
            .grid
            .iter()
            .enumerate()
            .map(|(i, &r)| PotentialRow {
                r_fm: r,
                v: vec![
                    [v.v11[i].re, v.v11[i].im],
                    [v.v22[i].re, v.v22[i].im],
                    [v.v12[i].re, v.v12[i].im],
                ],
            })
            .collect(),
        bound_state,
        alpha,
        diagnostics: Diagnostics {
            condition_warnings: sol.cond_warnings.clone(),
            round_trip_max_dev: max_dev,
            levinson_drop_over_pi: levinson,
            row_sum_error: Some(row_sum_error),
            potential_asymmetry: Some(v.asymmetry),
        },
        timestamp: timestamp_now(),
    };
    if max_dev > cfg.gate {
        return Err(PipelineError::GateExceeded {
            max_dev,
            gate: cfg.gate,
        });
    }
    Ok(CoupledRun {
        report,
        potential: v,
    })
}

// ---------------------------------------------------------------------------
// Emission.
// ---------------------------------------------------------------------------

/// Potential table as CSV: `r_fm` plus one (ReV, ImV) column pair per
/// channel, in fm^-2.
pub fn potential_csv(report: &RunReport) -> String {
    let mut out = String::new();
    if report.coupled {
        out.push_str("r_fm,ReV11,ImV11,ReV22,ImV22,ReV12,ImV12\n");
    } else {
        out.push_str("r_fm,ReV,ImV\n");
    }
    for row in &report.potential {
        out.push_str(&format!("{:.6}", row.r_fm));
        for pair in &row.v {
            out.push_str(&format!(",{:.10e},{:.10e}", pair[0], pair[1]));
        }
        out.push('\n');
    }
    out
}

pub fn report_json(report: &RunReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

// ---------------------------------------------------------------------------
// Synthetic data generation (testing aid).
// ---------------------------------------------------------------------------

/// Generate single-channel rows from an exponential well `2mV = depth *
/// exp(-r / range)` (fm^-2), optionally absorptive via `(1 + i alpha) V`.
pub fn synth_single(
    cfg: &ChannelConfig,
    depth: f64,
    range: f64,
    alpha: f64,
    n_rows: usize,
) -> Result<Vec<RawRow>> {
    let vr = move |r: f64| Complex64::new(depth * (-r / range).exp(), 0.0) * Complex64::new(1.0, alpha);
    let deg = 180.0 / std::f64::consts::PI;
    let mut rows = Vec::with_capacity(n_rows);
    for i in 1..=n_rows {
        let q = 0.9 * cfg.q_max * i as f64 / n_rows as f64;
        let d = forward::phase_eq_single(&vr, cfg.r_max.max(25.0), q, cfg.l)
            .map_err(stage("synth"))?
            .terminal;
        let (delta, rho) = optical::inelasticity_of(d).map_err(stage("synth"))?;
        rows.push(RawRow {
            t_lab_mev: lab_energy(q, cfg.m1_mev, cfg.m2_mev),
            delta_deg: (delta - cfg.levinson_n as f64 * std::f64::consts::PI) * deg,
            delta_err_deg: 0.0,
            delta2_deg: None,
            delta2_err_deg: None,
            eps_deg: None,
            eps_err_deg: None,
            rho_deg: rho * deg,
            rho_err_deg: 0.0,
        });
    }
    Ok(rows)
}

pub fn rows_to_csv(rows: &[RawRow], coupled: bool) -> String {
    let mut out = String::new();
    if coupled {
        out.push_str("T_lab_MeV,delta_deg,delta_err_deg,delta2_deg,delta2_err_deg,eps_deg,eps_err_deg,rho_deg,rho_err_deg\n");
        for r in rows {
            out.push_str(&format!(
                "{:.6},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8}\n",
                r.t_lab_mev,
                r.delta_deg,
                r.delta_err_deg,
                r.delta2_deg.unwrap_or(0.0),
                r.delta2_err_deg.unwrap_or(0.0),
                r.eps_deg.unwrap_or(0.0),
                r.eps_err_deg.unwrap_or(0.0),
                r.rho_deg,
                r.rho_err_deg
            ));
        }
    } else {
        out.push_str("T_lab_MeV,delta_deg,delta_err_deg,rho_deg,rho_err_deg\n");
        for r in rows {
            out.push_str(&format!(
                "{:.6},{:.8},{:.8},{:.8},{:.8}\n",
                r.t_lab_mev, r.delta_deg, r.delta_err_deg, r.rho_deg, r.rho_err_deg
            ));
        }
    }
    out
}
