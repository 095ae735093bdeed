//! Full-order H∞ dynamic output-feedback synthesis.
//!
//! The controller `ẋ_k = A_k x_k + B_k y`, `u = C_k x_k` is found through the
//! usual linearizing change of variables: the LMIs are solved for
//! `(X, Y, Â, B̂, Ĉ, η)`, `I − YX` is factored as `NMᵀ`, and the realization
//! is recovered in closed form. [`robust`] adds norm-bounded uncertainty in
//! the state matrix.

pub mod robust;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::lmi::{self, AffineExpr, LmiConstraint, LmiError, LmiProgram, Sense, SolveDiagnostics, SolveOptions, Var};
use crate::matrix_json;
use crate::modal::{self, ModalError, Tolerances};
use crate::par::Exec;
use crate::platoon::{self, LinearizedPlatoon, PerformanceWeights, PlantMatrices, PlatoonError};

pub use robust::{
    beta_ranges, build_uncertainty, entry_ranges, synthesize_robust, ParamSpread, UncertaintyModel,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error(transparent)]
    Plant(#[from] PlatoonError),
    #[error(transparent)]
    Modal(#[from] ModalError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("(A, B) is not stabilizable: {0}")]
    NotStabilizable(String),
    #[error("(A, C) is not detectable: {0}")]
    NotDetectable(String),
    #[error("plant has {0} uncontrollable mode(s) at the origin; reduce the ring model or allow marginal synthesis")]
    MarginalMode(usize),
    #[error("synthesis LMIs are infeasible ({})", .0.message)]
    Infeasible(Box<SolveDiagnostics>),
    #[error(transparent)]
    Solver(LmiError),
    #[error("I − YX is ill-conditioned (cond {cond:.3e})")]
    RecoveryIllConditioned { cond: f64 },
    #[error("closed-loop verification failed: {0}")]
    VerificationFailed(String),
    #[error("robust verification failed at sample {sample}: {reason}")]
    RobustVerificationFailed { sample: usize, reason: String },
    #[error("uncertainty ranges are all degenerate")]
    EmptyUncertainty,
    #[error("invalid uncertainty ranges: {0}")]
    InvalidRanges(String),
}

impl From<LmiError> for SynthError {
    fn from(e: LmiError) -> Self {
        match e {
            LmiError::Infeasible(d) => SynthError::Infeasible(d),
            other => SynthError::Solver(other),
        }
    }
}

/// Descriptive data stored alongside a controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerMeta {
    pub gamma: f64,
    pub road: String,
    /// Designed on the reduced ring model.
    pub reduced: bool,
    pub weights: PerformanceWeights,
    pub n_vehicles: usize,
    pub observed: Vec<usize>,
    pub v_star_mps: f64,
    #[serde(default)]
    pub robust: bool,
}

/// Strictly proper dynamic output-feedback controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Controller {
    #[serde(rename = "A_k", with = "matrix_json")]
    pub a_k: DMatrix<f64>,
    #[serde(rename = "B_k", with = "matrix_json")]
    pub b_k: DMatrix<f64>,
    #[serde(rename = "C_k", with = "matrix_json")]
    pub c_k: DMatrix<f64>,
    pub meta: ControllerMeta,
}

impl Controller {
    pub fn order(&self) -> usize {
        self.a_k.nrows()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("controller serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        let c: Controller = serde_json::from_str(s)?;
        let n = c.a_k.nrows();
        if !c.a_k.is_square() || c.b_k.nrows() != n || c.c_k.ncols() != n {
            return Err(serde::de::Error::custom(format!(
                "inconsistent controller shapes A_k {:?}, B_k {:?}, C_k {:?}",
                c.a_k.shape(),
                c.b_k.shape(),
                c.c_k.shape()
            )));
        }
        Ok(c)
    }
}

/// Closed-loop `(Ā, B̄, C̄)` with state `(x, x_k)`.
pub fn closed_loop(
    plant: &PlantMatrices,
    a: &DMatrix<f64>,
    a_k: &DMatrix<f64>,
    b_k: &DMatrix<f64>,
    c_k: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let bck = &plant.b * c_k;
    let bkc = b_k * &plant.c;
    let acl = linalg::block(&[vec![Some(a), Some(&bck)], vec![Some(&bkc), Some(a_k)]]);
    let zero_d = DMatrix::zeros(a_k.nrows(), plant.bd.ncols());
    let bcl = linalg::block(&[vec![Some(&plant.bd)], vec![Some(&zero_d)]]);
    let dck = &plant.dz * c_k;
    let ccl = linalg::block(&[vec![Some(&plant.cz), Some(&dck)]]);
    (acl, bcl, ccl)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthOptions {
    /// Permit a plant with uncontrollable modes at the origin (full ring).
    pub allow_marginal: bool,
    pub lmi: SolveOptions,
    /// Relative slack of the independent `‖T_zd‖_∞ ≤ γ` check.
    pub verify_tol: f64,
    pub tolerances: Tolerances,
    /// Largest acceptable condition number of `I − YX`.
    pub max_cond: f64,
    pub robust_samples: usize,
    pub seed: u64,
    pub exec: Exec,
    /// After minimizing γ, re-solve with γ capped at `(1 + gamma_backoff)·γ*`
    /// for a certificate away from `I − YX` singular. `0` keeps the
    /// optimal point, whose controller gains can be enormous.
    pub gamma_backoff: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            allow_marginal: false,
            lmi: SolveOptions::default(),
            verify_tol: 1e-2,
            tolerances: Tolerances::default(),
            max_cond: 1e12,
            robust_samples: 50,
            seed: 0,
            exec: Exec::default(),
            gamma_backoff: 2e-3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthDiagnostics {
    pub solve: SolveDiagnostics,
    pub lmi_max_violation: f64,
    pub cond_i_minus_yx: f64,
    pub nm_residual_rel: f64,
    pub closed_loop_abscissa: f64,
    pub closed_loop_hinf: f64,
    /// `λ_max` of the BRL matrix at `P = Λ₂Λ₁⁻¹`.
    pub certificate_max_eig: f64,
    pub robust_samples_checked: usize,
    pub robust_worst_hinf: f64,
    pub routed_to_nominal: bool,
    /// `γ*` of the unconstrained minimization, before back-off.
    #[serde(default)]
    pub gamma_optimal: f64,
    /// The back-off re-solve succeeded and produced the controller.
    #[serde(default)]
    pub centered: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisResult {
    pub controller: Controller,
    pub gamma: f64,
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub n: DMatrix<f64>,
    pub diagnostics: SynthDiagnostics,
}

impl SynthesisResult {
    /// Lyapunov certificate `P = Λ₂ Λ₁⁻¹` of the closed loop.
    pub fn certificate(&self) -> Result<DMatrix<f64>, SynthError> {
        certificate(&self.x, &self.y, &self.m, &self.n)
    }
}

/// `P = [[I, Y], [0, Nᵀ]] · [[X, I], [Mᵀ, 0]]⁻¹`.
pub fn certificate(x: &DMatrix<f64>, y: &DMatrix<f64>, m: &DMatrix<f64>, n: &DMatrix<f64>) -> Result<DMatrix<f64>, SynthError> {
    let k = x.nrows();
    let eye = DMatrix::identity(k, k);
    let l1 = linalg::block(&[vec![Some(x), Some(&eye)], vec![Some(&m.transpose()), None]]);
    let l2 = linalg::block(&[vec![Some(&eye), Some(y)], vec![None, Some(&n.transpose())]]);
    let inv = l1
        .lu()
        .try_inverse()
        .ok_or_else(|| SynthError::VerificationFailed("Λ₁ is singular".into()))?;
    Ok(linalg::symmetrize(&(l2 * inv)))
}

/// Decision variables of the synthesis program.
pub(crate) struct SynthVars {
    pub x: Var,
    pub y: Var,
    pub ahat: Var,
    pub bhat: Var,
    pub chat: Var,
    pub eta: Var,
}

/// Coupling constraint and the main H∞ block of the nominal program, with
/// room for extra trailing blocks.
pub(crate) fn nominal_program(plant: &PlantMatrices, a: &DMatrix<f64>, extra: &[usize]) -> (LmiProgram, SynthVars, LmiConstraint) {
    let nx = a.nrows();
    let (p, q) = (plant.c.nrows(), plant.b.ncols());
    let (nd, nz) = (plant.bd.ncols(), plant.cz.nrows());
    let mut prog = LmiProgram::new();
    let v = SynthVars {
        x: prog.sym("X", nx),
        y: prog.sym("Y", nx),
        ahat: prog.mat("Ahat", nx, nx),
        bhat: prog.mat("Bhat", nx, p),
        chat: prog.mat("Chat", q, nx),
        eta: prog.scalar("eta"),
    };
    prog.constrain(
        LmiConstraint::new("coupling", &[nx, nx], Sense::PositiveDefinite)
            .block(0, 0, v.x)
            .block(0, 1, AffineExpr::identity(nx))
            .block(1, 1, v.y),
    )
    .expect("coupling constraint is well formed");

    let mut sizes = vec![nx, nx, nd, nz];
    sizes.extend_from_slice(extra);
    let main = LmiConstraint::new("hinf", &sizes, Sense::NegativeDefinite)
        .block(0, 0, (v.x.expr().lmul(a) + v.chat.expr().lmul(&plant.b)).plus_transpose())
        .block(0, 1, v.ahat.expr().transpose() + AffineExpr::constant(a))
        .block(0, 2, AffineExpr::constant(&plant.bd))
        .block(0, 3, v.x.expr().rmul(&plant.cz.transpose()) + v.chat.expr().transpose().rmul(&plant.dz.transpose()))
        .block(1, 1, (v.y.expr().rmul(a) + v.bhat.expr().rmul(&plant.c)).plus_transpose())
        .block(1, 2, v.y.expr().rmul(&plant.bd))
        .block(1, 3, AffineExpr::constant(&plant.cz.transpose()))
        .block(2, 2, -v.eta.times(&DMatrix::identity(nd, nd)))
        .block(3, 3, AffineExpr::constant(&-DMatrix::identity(nz, nz)));
    (prog, v, main)
}

/// Check the structural preconditions of synthesis on `(A, B, C)`.
pub(crate) fn check_preconditions(plant: &PlantMatrices, a: &DMatrix<f64>, opts: &SynthOptions) -> Result<(), SynthError> {
    let rep = modal::pbh_report(a, &plant.b, &plant.c, &opts.tolerances)?;
    if !rep.stabilizable {
        return Err(SynthError::NotStabilizable(format!(
            "{} uncontrollable mode(s) with Re λ ≥ 0",
            rep.uncontrollable_unstable
        )));
    }
    if rep.uncontrollable_at_origin > 0 && !opts.allow_marginal {
        return Err(SynthError::MarginalMode(rep.uncontrollable_at_origin));
    }
    if !rep.detectable {
        let bad = rep
            .modes
            .iter()
            .filter(|m| !m.observable && m.re >= -opts.tolerances.stab_tol)
            .count();
        return Err(SynthError::NotDetectable(format!("{bad} unobservable mode(s) with Re λ ≥ 0")));
    }
    Ok(())
}

/// `(A_k, B_k, C_k)` from the LMI variables; also returns `(M, N)` and the
/// conditioning data.
#[allow(clippy::too_many_arguments)]
pub fn recover_controller(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    ahat: &DMatrix<f64>,
    bhat: &DMatrix<f64>,
    chat: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    max_cond: f64,
) -> Result<Recovery, SynthError> {
    let k = x.nrows();
    let imyx = DMatrix::identity(k, k) - y * x;
    let svd = linalg::to_faer(&imyx).svd().map_err(|_| LinalgError::SvdFailure)?;
    let u = linalg::from_faer(svd.U());
    let v = linalg::from_faer(svd.V());
    let s: Vec<f64> = (0..k).map(|i| svd.S()[i]).collect();
    let smax = s.iter().copied().fold(0.0, f64::max);
    let smin = s.iter().copied().fold(f64::INFINITY, f64::min);
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(cond <= max_cond) {
        return Err(SynthError::RecoveryIllConditioned { cond });
    }
    let sq = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(k, s.iter().map(|x| x.sqrt())));
    let isq = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(k, s.iter().map(|x| 1.0 / x.sqrt())));
    let n = &u * &sq;
    let m = &v * &sq;
    let residual = (&n * m.transpose() - &imyx).norm() / imyx.norm();
    if !(residual < 1e-8) {
        return Err(SynthError::RecoveryIllConditioned { cond });
    }
    let n_inv = &isq * u.transpose();
    let m_inv_t = &v * &isq;
    let b_k = &n_inv * bhat;
    let c_k = chat * &m_inv_t;
    let a_k = &n_inv * (ahat - &n * &b_k * c * x - y * b * &c_k * m.transpose() - y * a * x) * &m_inv_t;
    Ok(Recovery { a_k, b_k, c_k, m, n, cond, residual })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recovery {
    pub a_k: DMatrix<f64>,
    pub b_k: DMatrix<f64>,
    pub c_k: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub n: DMatrix<f64>,
    pub cond: f64,
    pub residual: f64,
}

/// Stability of the closed loop, its H∞ norm and the BRL certificate check.
pub(crate) struct Verification {
    pub abscissa: f64,
    pub hinf: f64,
    pub cert_max_eig: f64,
}

/// Remove the conserved ring mode from a full-ring closed loop by
/// restricting the plant part to `Σ s̄ᵢ = 0`.
fn deflate_marginal(
    acl: &DMatrix<f64>,
    bcl: &DMatrix<f64>,
    ccl: &DMatrix<f64>,
    nx: usize,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (tr, tl) = platoon::reduction_maps(nx / 2);
    let nk = acl.nrows() - nx;
    let eye = DMatrix::identity(nk, nk);
    let r = linalg::block_diag(&[&tr, &eye]);
    let l = linalg::block_diag(&[&tl, &eye]);
    (&r * acl * &l, &r * bcl, ccl * &l)
}

pub(crate) fn verify(
    plant: &PlantMatrices,
    a: &DMatrix<f64>,
    rec: &Recovery,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    gamma: f64,
    opts: &SynthOptions,
) -> Result<Verification, SynthError> {
    let (acl, bcl, ccl) = closed_loop(plant, a, &rec.a_k, &rec.b_k, &rec.c_k);
    let p = certificate(x, y, &rec.m, &rec.n)?;
    let cert_max_eig = linalg::max_sym_eigenvalue(&modal::brl_matrix(&acl, &bcl, &ccl, &p, gamma))?;
    let (acl, bcl, ccl) = if opts.allow_marginal && a.nrows() % 2 == 0 && is_ring_like(plant, a) {
        deflate_marginal(&acl, &bcl, &ccl, a.nrows())
    } else {
        (acl, bcl, ccl)
    };
    let abscissa = linalg::spectral_abscissa(&acl)?;
    if !(abscissa < 0.0) {
        return Err(SynthError::VerificationFailed(format!("closed loop not Hurwitz (abscissa {abscissa:.3e})")));
    }
    let hinf = modal::hinf_norm(&acl, &bcl, &ccl)?;
    if !(hinf <= gamma * (1.0 + opts.verify_tol)) {
        return Err(SynthError::VerificationFailed(format!(
            "‖T_zd‖∞ = {hinf:.6} exceeds γ = {gamma:.6} beyond tolerance"
        )));
    }
    Ok(Verification { abscissa, hinf, cert_max_eig })
}

/// Full ring plant: total spacing is conserved (`ρᵀA = 0`, `ρᵀB = 0`).
fn is_ring_like(plant: &PlantMatrices, a: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    let rho = DMatrix::from_fn(1, n, |_, j| if j % 2 == 0 { 1.0 } else { 0.0 });
    (&rho * a).norm() == 0.0 && (&rho * &plant.b).norm() == 0.0 && (&rho * &plant.bd).norm() == 0.0
}

/// Nominal H∞ synthesis on an arbitrary plant realization.
pub fn synthesize_nominal(plant: &PlantMatrices, opts: &SynthOptions) -> Result<SynthesisResult, SynthError> {
    plant.check_dims()?;
    check_preconditions(plant, &plant.a, opts)?;
    let build = || {
        let (mut prog, v, main) = nominal_program(plant, &plant.a, &[]);
        prog.constrain(main)?;
        Ok((prog, v))
    };
    let (sol, v, back) = solve_two_stage(&build, opts)?;
    let mut res = finish(plant, &plant.a, &sol, &v, opts, placeholder_meta())?;
    back.record(&mut res.diagnostics);
    Ok(res)
}

/// The first-stage nominal program (minimize `η`), e.g. for
/// [`LmiProgram::assemble`] and export.
pub fn nominal_lmi_program(plant: &PlantMatrices) -> Result<LmiProgram, SynthError> {
    plant.check_dims()?;
    let (mut prog, v, main) = nominal_program(plant, &plant.a, &[]);
    prog.constrain(main)?;
    prog.minimize(v.eta.expr())?;
    Ok(prog)
}

/// Outcome of the γ back-off stage.
pub(crate) struct Backoff {
    gamma_optimal: f64,
    centered: bool,
}

impl Backoff {
    pub(crate) fn record(&self, d: &mut SynthDiagnostics) {
        d.gamma_optimal = self.gamma_optimal;
        d.centered = self.centered;
    }
}

/// Minimize `η`, then (if `opts.gamma_backoff > 0`) re-solve as a pure
/// feasibility problem with `η ≤ (1+b)²η*`. The interior-point method ends
/// near the analytic center of that set instead of on the boundary where
/// `I − YX` turns singular. `build` returns the program without objective.
pub(crate) fn solve_two_stage(
    build: &dyn Fn() -> Result<(LmiProgram, SynthVars), LmiError>,
    opts: &SynthOptions,
) -> Result<(lmi::LmiSolution, SynthVars, Backoff), SynthError> {
    let (mut prog, v) = build()?;
    prog.minimize(v.eta.expr())?;
    let sol = lmi::solve(&prog, &opts.lmi)?;
    let eta_opt = sol.scalar(v.eta).max(0.0);
    let mut back = Backoff { gamma_optimal: eta_opt.sqrt(), centered: false };
    if !(opts.gamma_backoff > 0.0) {
        return Ok((sol, v, back));
    }
    let (mut prog2, v2) = build()?;
    let eta_cap = eta_opt * (1.0 + opts.gamma_backoff).powi(2);
    prog2.constrain(
        LmiConstraint::new("gamma_cap", &[1], Sense::NegativeDefinite)
            .non_strict()
            .block(0, 0, v2.eta.expr() - AffineExpr::constant(&DMatrix::from_element(1, 1, eta_cap))),
    )?;
    prog2.minimize(AffineExpr::zeros(1, 1))?;
    match lmi::solve(&prog2, &opts.lmi) {
        Ok(sol2) => {
            back.centered = true;
            Ok((sol2, v2, back))
        }
        // the optimal point is still a valid (if stiff) design
        Err(_) => Ok((sol, v, back)),
    }
}

pub(crate) fn placeholder_meta() -> ControllerMeta {
    ControllerMeta {
        gamma: 0.0,
        road: String::new(),
        reduced: false,
        weights: PerformanceWeights::unit(),
        n_vehicles: 0,
        observed: Vec::new(),
        v_star_mps: 0.0,
        robust: false,
    }
}

pub(crate) fn finish(
    plant: &PlantMatrices,
    a: &DMatrix<f64>,
    sol: &lmi::LmiSolution,
    v: &SynthVars,
    opts: &SynthOptions,
    mut meta: ControllerMeta,
) -> Result<SynthesisResult, SynthError> {
    let eta = sol.scalar(v.eta);
    let gamma = eta.max(0.0).sqrt();
    let (x, y) = (sol.value(v.x).clone(), sol.value(v.y).clone());
    let rec = recover_controller(
        &x,
        &y,
        sol.value(v.ahat),
        sol.value(v.bhat),
        sol.value(v.chat),
        a,
        &plant.b,
        &plant.c,
        opts.max_cond,
    )?;
    let ver = verify(plant, a, &rec, &x, &y, gamma, opts)?;
    meta.gamma = gamma;
    Ok(SynthesisResult {
        controller: Controller { a_k: rec.a_k, b_k: rec.b_k, c_k: rec.c_k, meta },
        gamma,
        x,
        y,
        m: rec.m,
        n: rec.n,
        diagnostics: SynthDiagnostics {
            solve: sol.diagnostics.clone(),
            lmi_max_violation: sol.max_violation,
            cond_i_minus_yx: rec.cond,
            nm_residual_rel: rec.residual,
            closed_loop_abscissa: ver.abscissa,
            closed_loop_hinf: ver.hinf,
            certificate_max_eig: ver.cert_max_eig,
            ..Default::default()
        },
    })
}

/// Metadata describing a platoon design.
pub fn meta_for(plant: &LinearizedPlatoon, reduced: bool) -> ControllerMeta {
    ControllerMeta {
        gamma: 0.0,
        road: plant.spec.road.name().to_string(),
        reduced,
        weights: plant.weights,
        n_vehicles: plant.spec.n,
        observed: plant.spec.observed.clone(),
        v_star_mps: plant.eq.v_star,
        robust: false,
    }
}

/// Nominal synthesis for a platoon: ring plants are reduced unless
/// `full_ring` is set, in which case `opts.allow_marginal` must be too.
pub fn synthesize_platoon(plant: &LinearizedPlatoon, full_ring: bool, opts: &SynthOptions) -> Result<SynthesisResult, SynthError> {
    let reduce = plant.spec.road.is_ring() && !full_ring;
    let mut res = if reduce {
        synthesize_nominal(&platoon::reduce_ring(plant)?.matrices, opts)?
    } else {
        synthesize_nominal(&plant.matrices, opts)?
    };
    let gamma = res.gamma;
    res.controller.meta = ControllerMeta { gamma, ..meta_for(plant, reduce) };
    Ok(res)
}
