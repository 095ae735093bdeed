//! Robust synthesis against interval uncertainty in the state matrix.
//!
//! Entry ranges `[a_min, a_max]` are covered by `A = A_N + L F R` with
//! `‖F‖ ≤ 1`, `A_N` the entrywise midpoint and `L = ϱI`, `R = ρI`,
//! `ρϱ = ½‖A_max − A_min‖_F`. The extra Young-inequality terms enter the
//! H∞ block through three multipliers `ε₁, ε₂, ε₃ > 0`.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    check_preconditions, closed_loop, finish, nominal_program, placeholder_meta, solve_two_stage, synthesize_nominal, SynthError, SynthVars,
    SynthOptions, SynthesisResult,
};
use crate::linalg;
use crate::lmi::{AffineExpr, LmiConstraint, LmiError, LmiProgram, Sense};
use crate::matrix_json;
use crate::modal;
pub use crate::ovm::ParamSpread;
use crate::ovm::{self, Betas, VehicleParams};
use crate::par;
use crate::platoon::{self, LinearizedPlatoon, PlantMatrices};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyModel {
    #[serde(with = "matrix_json")]
    pub a_nominal: DMatrix<f64>,
    #[serde(with = "matrix_json")]
    pub l: DMatrix<f64>,
    #[serde(with = "matrix_json")]
    pub r: DMatrix<f64>,
    pub rho: f64,
    pub varrho: f64,
    pub rho_varrho: f64,
    #[serde(with = "matrix_json")]
    pub a_min: DMatrix<f64>,
    #[serde(with = "matrix_json")]
    pub a_max: DMatrix<f64>,
}

impl UncertaintyModel {
    /// `A_N + L F R`.
    pub fn perturbed(&self, f: &DMatrix<f64>) -> DMatrix<f64> {
        &self.a_nominal + &self.l * f * &self.r
    }
}

/// Midpoint model and `L = ϱI`, `R = ρI` covering the entry ranges.
pub fn build_uncertainty(a_min: &DMatrix<f64>, a_max: &DMatrix<f64>) -> Result<UncertaintyModel, SynthError> {
    if a_min.shape() != a_max.shape() || !a_min.is_square() {
        return Err(SynthError::InvalidRanges(format!(
            "range bounds {:?} and {:?} must be equal square shapes",
            a_min.shape(),
            a_max.shape()
        )));
    }
    if let Some((k, _)) = a_min.iter().zip(a_max.iter()).enumerate().find(|(_, (lo, hi))| !(lo <= hi)) {
        let (i, j) = (k % a_min.nrows(), k / a_min.nrows());
        return Err(SynthError::InvalidRanges(format!("entry ({i},{j}) has a_min > a_max")));
    }
    let rho_varrho = 0.5 * (a_max - a_min).norm();
    if rho_varrho == 0.0 {
        return Err(SynthError::EmptyUncertainty);
    }
    let n = a_min.nrows();
    let s = rho_varrho.sqrt();
    Ok(UncertaintyModel {
        a_nominal: (a_min + a_max) * 0.5,
        l: DMatrix::identity(n, n) * s,
        r: DMatrix::identity(n, n) * s,
        rho: s,
        varrho: s,
        rho_varrho,
        a_min: a_min.clone(),
        a_max: a_max.clone(),
    })
}

/// Extreme linearization coefficients of a driver whose parameters lie in
/// the box `nominal ± spread`, linearized at speed `v_star`.
///
/// `β₁ = α V′(s*)` is increasing in `α` and decreasing in `s_go` at fixed
/// `v*`, and `β₂ = α + θ`, `β₃ = θ` are monotone, so the extremes sit at
/// corners of the box.
pub fn beta_ranges(nominal: &VehicleParams, spread: &ParamSpread, v_star: f64) -> Result<(Betas, Betas), SynthError> {
    let mut lo = Betas::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut hi = Betas::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for da in [-1.0, 1.0] {
        for dt in [-1.0, 1.0] {
            for ds in [-1.0, 1.0] {
                let p = VehicleParams {
                    alpha: nominal.alpha + da * spread.alpha,
                    theta: nominal.theta + dt * spread.theta,
                    s_go: nominal.s_go + ds * spread.s_go_m,
                    ..*nominal
                };
                p.validate().map_err(|e| SynthError::InvalidRanges(e.to_string()))?;
                let s = ovm::equilibrium_spacing(&p, v_star).map_err(|e| SynthError::InvalidRanges(e.to_string()))?;
                let b = Betas::new(p.alpha * ovm::desired_speed_slope(&p, s), p.alpha + p.theta, p.theta);
                lo = Betas::new(lo.beta1.min(b.beta1), lo.beta2.min(b.beta2), lo.beta3.min(b.beta3));
                hi = Betas::new(hi.beta1.max(b.beta1), hi.beta2.max(b.beta2), hi.beta3.max(b.beta3));
            }
        }
    }
    Ok((lo, hi))
}

/// Entrywise state-matrix ranges for per-vehicle coefficient ranges, in
/// full or reduced ring coordinates.
pub fn entry_ranges(plant: &LinearizedPlatoon, lo: &[Betas], hi: &[Betas], reduced: bool) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = plant.spec.n;
    let a_lo = platoon::state_matrix(n, &plant.spec.road, lo);
    let a_hi = platoon::state_matrix(n, &plant.spec.road, hi);
    let (a_lo, a_hi) = if reduced {
        let (tr, tl) = platoon::reduction_maps(n);
        (&tr * a_lo * &tl, &tr * a_hi * &tl)
    } else {
        (a_lo, a_hi)
    };
    (a_lo.zip_map(&a_hi, f64::min), a_lo.zip_map(&a_hi, f64::max))
}

/// Uncertainty model of a platoon whose drivers `2..=n` vary within
/// `spread` around `params[1..]`.
pub fn platoon_uncertainty(
    plant: &LinearizedPlatoon,
    params: &[VehicleParams],
    spread: &ParamSpread,
    reduced: bool,
) -> Result<UncertaintyModel, SynthError> {
    if params.len() != plant.spec.n {
        return Err(SynthError::InvalidRanges(format!(
            "{} parameter sets for {} vehicles",
            params.len(),
            plant.spec.n
        )));
    }
    let (lo, hi): (Vec<Betas>, Vec<Betas>) = params[1..]
        .iter()
        .map(|p| beta_ranges(p, spread, plant.eq.v_star))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .unzip();
    let (a_min, a_max) = entry_ranges(plant, &lo, &hi, reduced);
    build_uncertainty(&a_min, &a_max)
}

/// Random `F` with `‖F‖₂ = 1`.
pub fn sample_contraction(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
    let s = linalg::spectral_norm(&f).unwrap_or(1.0);
    f / s
}

/// Robust synthesis; the controller is recovered with `A_N` and checked on
/// `opts.robust_samples` random admissible plants.
pub fn synthesize_robust(
    plant: &PlantMatrices,
    unc: &UncertaintyModel,
    opts: &SynthOptions,
) -> Result<SynthesisResult, SynthError> {
    let nominal_plant = PlantMatrices { a: unc.a_nominal.clone(), ..plant.clone() };
    if unc.rho_varrho == 0.0 {
        let mut res = synthesize_nominal(&nominal_plant, opts)?;
        res.diagnostics.routed_to_nominal = true;
        return Ok(res);
    }
    nominal_plant.check_dims()?;
    let nx = unc.a_nominal.nrows();
    if plant.a.shape() != unc.a_nominal.shape() || unc.l.shape() != (nx, nx) || unc.r.shape() != (nx, nx) {
        return Err(SynthError::InvalidRanges(format!(
            "uncertainty model of size {:?} does not fit a {nx}-state plant",
            unc.a_nominal.shape()
        )));
    }
    let an = &unc.a_nominal;
    check_preconditions(&nominal_plant, an, opts)?;

    let build = || robust_program(&nominal_plant, unc);
    let (sol, v, back) = solve_two_stage(&build, opts)?;
    let mut meta = placeholder_meta();
    meta.robust = true;
    let mut res = finish(&nominal_plant, an, &sol, &v, opts, meta)?;
    back.record(&mut res.diagnostics);

    let gamma = res.gamma;
    let k = &res.controller;
    let checks = par::map_range(opts.exec, opts.robust_samples, |s| {
        let f = sample_contraction(nx, opts.seed.wrapping_add(s as u64));
        let a = unc.perturbed(&f);
        let (acl, bcl, ccl) = closed_loop(plant, &a, &k.a_k, &k.b_k, &k.c_k);
        let abscissa = linalg::spectral_abscissa(&acl).map_err(|e| e.to_string())?;
        if !(abscissa < 0.0) {
            return Err(format!("closed loop not Hurwitz (abscissa {abscissa:.3e})"));
        }
        let h = modal::hinf_norm(&acl, &bcl, &ccl).map_err(|e| e.to_string())?;
        if !(h <= gamma * (1.0 + opts.verify_tol)) {
            return Err(format!("‖T_zd‖∞ = {h:.6} exceeds γ = {gamma:.6}"));
        }
        Ok(h)
    });
    let mut worst: f64 = 0.0;
    for (sample, c) in checks.into_iter().enumerate() {
        match c {
            Ok(h) => worst = worst.max(h),
            Err(reason) => return Err(SynthError::RobustVerificationFailed { sample, reason }),
        }
    }
    res.diagnostics.robust_samples_checked = opts.robust_samples;
    res.diagnostics.robust_worst_hinf = worst;
    Ok(res)
}

/// Constraints of the robust program at plant `nominal_plant` (`A = A_N`).
fn robust_program(nominal_plant: &PlantMatrices, unc: &UncertaintyModel) -> Result<(LmiProgram, SynthVars), LmiError> {
    let nx = unc.a_nominal.nrows();
    let (mut prog, v, main) = nominal_program(nominal_plant, &unc.a_nominal, &[nx; 5]);
    let e1 = prog.scalar("eps1");
    let e2 = prog.scalar("eps2");
    let e3 = prog.scalar("eps3");
    let eye = DMatrix::identity(nx, nx);
    let llt = &unc.l * unc.l.transpose();
    let rtr = unc.r.transpose() * &unc.r;
    let rt = unc.r.transpose();
    let main = main
        .block(0, 0, e1.times(&llt) + e2.times(&llt))
        .block(1, 1, e3.times(&rtr))
        .block(0, 4, v.x.expr().rmul(&rt))
        .block(4, 4, -e1.times(&eye))
        .block(1, 5, AffineExpr::constant(&rt))
        .block(5, 5, -e2.times(&eye))
        .block(1, 6, v.y.expr().rmul(&unc.l))
        .block(6, 6, -e3.times(&eye))
        .block(0, 7, v.x.expr().rmul(&rt))
        .block(7, 7, AffineExpr::constant(&-&eye))
        .block(1, 8, v.y.expr().rmul(&unc.l))
        .block(8, 8, AffineExpr::constant(&-&eye));
    prog.constrain(main)?;
    for (name, e) in [("eps1_pos", e1), ("eps2_pos", e2), ("eps3_pos", e3)] {
        prog.constrain(LmiConstraint::new(name, &[1], Sense::PositiveDefinite).block(0, 0, e))?;
    }
    Ok((prog, v))
}

/// The first-stage robust program (minimize `η`), e.g. for
/// [`LmiProgram::assemble`] and export.
pub fn robust_lmi_program(plant: &PlantMatrices, unc: &UncertaintyModel) -> Result<LmiProgram, SynthError> {
    let nominal_plant = PlantMatrices { a: unc.a_nominal.clone(), ..plant.clone() };
    nominal_plant.check_dims()?;
    let (mut prog, v) = robust_program(&nominal_plant, unc)?;
    prog.minimize(v.eta.expr())?;
    Ok(prog)
}

/// Robust synthesis for a platoon with drivers varying within `spread`.
pub fn synthesize_platoon_robust(
    plant: &LinearizedPlatoon,
    params: &[VehicleParams],
    spread: &ParamSpread,
    full_ring: bool,
    opts: &SynthOptions,
) -> Result<(SynthesisResult, UncertaintyModel), SynthError> {
    let reduce = plant.spec.road.is_ring() && !full_ring;
    let unc = platoon_uncertainty(plant, params, spread, reduce)?;
    let base = if reduce { platoon::reduce_ring(plant)?.matrices } else { plant.matrices.clone() };
    let mut res = synthesize_robust(&base, &unc, opts)?;
    let gamma = res.gamma;
    res.controller.meta = super::ControllerMeta { gamma, robust: true, ..super::meta_for(plant, reduce) };
    Ok((res, unc))
}
