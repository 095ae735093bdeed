//! Optimal-velocity car-following model.
//!
//! Each human-driven vehicle accelerates according to
//! `H(v, s, ṡ) = α (V(s) − v) + θ ṡ`, where `V` is a piecewise desired-speed
//! curve with a raised-cosine middle branch. This module evaluates the model,
//! finds equilibria (common velocity, per-vehicle spacing) and linearizes the
//! acceleration law around them.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative bisection tolerance for all equilibrium solves.
const BISECTION_REL_TOL: f64 = 1e-10;
const BISECTION_MAX_ITER: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OvmError {
    #[error("invalid vehicle parameters: {0}")]
    InvalidParams(String),
    #[error("no equilibrium: {0}")]
    NoEquilibrium(String),
    #[error("degenerate linearization for vehicle {index}: {reason}")]
    DegenerateLinearization { index: usize, reason: String },
}

/// OVM parameters of one vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleParams {
    /// Headway sensitivity α (1/s).
    pub alpha: f64,
    /// Relative-velocity sensitivity θ (1/s).
    pub theta: f64,
    /// Stopping spacing (m); desired speed is zero below it.
    pub s_st: f64,
    /// Free-flow spacing (m); desired speed saturates above it.
    pub s_go: f64,
    /// Saturation speed (m/s).
    pub v_max: f64,
}

impl VehicleParams {
    pub fn new(alpha: f64, theta: f64, s_st: f64, s_go: f64, v_max: f64) -> Result<Self, OvmError> {
        let p = Self { alpha, theta, s_st, s_go, v_max };
        p.validate()?;
        Ok(p)
    }

    /// The nominal human driver used throughout the experiments.
    pub fn nominal() -> Self {
        Self { alpha: 0.6, theta: 0.9, s_st: 5.0, s_go: 35.0, v_max: 30.0 }
    }

    pub fn validate(&self) -> Result<(), OvmError> {
        let finite = [self.alpha, self.theta, self.s_st, self.s_go, self.v_max]
            .iter()
            .all(|x| x.is_finite());
        if !finite {
            return Err(OvmError::InvalidParams("non-finite parameter".into()));
        }
        if self.alpha <= 0.0 {
            return Err(OvmError::InvalidParams(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.theta < 0.0 {
            return Err(OvmError::InvalidParams(format!("theta must be >= 0, got {}", self.theta)));
        }
        if self.v_max <= 0.0 {
            return Err(OvmError::InvalidParams(format!("v_max must be > 0, got {}", self.v_max)));
        }
        if !(0.0 < self.s_st && self.s_st < self.s_go) {
            return Err(OvmError::InvalidParams(format!(
                "need 0 < s_st < s_go, got s_st={} s_go={}",
                self.s_st, self.s_go
            )));
        }
        Ok(())
    }

    fn span(&self) -> f64 {
        self.s_go - self.s_st
    }
}

/// Half-widths of the driver-parameter intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpread {
    pub alpha: f64,
    pub theta: f64,
    pub s_go_m: f64,
}

impl ParamSpread {
    /// `α ± 0.1`, `θ ± 0.1`, `s_go ± 5 m`.
    pub fn ring_default() -> Self {
        Self { alpha: 0.1, theta: 0.1, s_go_m: 5.0 }
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self { alpha: self.alpha * k, theta: self.theta * k, s_go_m: self.s_go_m * k }
    }
}

/// Independent uniform draws `base ± spread` of `α`, `θ` and `s_go` for `n`
/// vehicles.
pub fn sample_params(base: &VehicleParams, spread: &ParamSpread, n: usize, seed: u64) -> Vec<VehicleParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |w: f64| if w > 0.0 { rng.random_range(-w..=w) } else { 0.0 };
    (0..n)
        .map(|_| {
            let alpha = base.alpha + u(spread.alpha);
            let theta = base.theta + u(spread.theta);
            let s_go = base.s_go + u(spread.s_go_m);
            VehicleParams { alpha, theta, s_go, ..*base }
        })
        .collect()
}

/// Linearization coefficients of one vehicle around an equilibrium.
///
/// `β1 = ∂H/∂s`, `β2 = ∂H/∂ṡ − ∂H/∂v`, `β3 = ∂H/∂ṡ`; all three must be
/// strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Betas {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
}

impl Betas {
    pub fn new(beta1: f64, beta2: f64, beta3: f64) -> Self {
        Self { beta1, beta2, beta3 }
    }

    pub fn is_valid(&self) -> bool {
        self.beta1 > 0.0 && self.beta2 > 0.0 && self.beta3 > 0.0
    }
}

/// Uniform-flow operating point: common speed and per-vehicle spacings.
///
/// `s_star[0]` belongs to vehicle 1 (the automated vehicle).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub v_star: f64,
    pub s_star: Vec<f64>,
}

/// How the ring-road closure `Σ s* = D` is satisfied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClosureMode {
    /// Keep the prescribed `v*`; vehicle 1 takes the residual spacing.
    #[default]
    FixedVStar,
    /// Solve `v*` so that every vehicle, including vehicle 1, sits at its own
    /// OVM equilibrium spacing.
    Closed,
}

/// Desired speed `V(s)`.
pub fn desired_speed(p: &VehicleParams, s: f64) -> f64 {
    if s <= p.s_st {
        0.0
    } else if s >= p.s_go {
        p.v_max
    } else {
        0.5 * p.v_max * (1.0 - (PI * (s - p.s_st) / p.span()).cos())
    }
}

/// Slope `V'(s)`; zero on both flat branches.
pub fn desired_speed_slope(p: &VehicleParams, s: f64) -> f64 {
    if s <= p.s_st || s >= p.s_go {
        0.0
    } else {
        0.5 * p.v_max * PI / p.span() * (PI * (s - p.s_st) / p.span()).sin()
    }
}

/// OVM acceleration `α (V(s) − v) + θ ṡ`.
pub fn acceleration(p: &VehicleParams, v: f64, s: f64, s_dot: f64) -> f64 {
    p.alpha * (desired_speed(p, s) - v) + p.theta * s_dot
}

/// Spacing at which a vehicle is in equilibrium at speed `v_star`.
pub fn equilibrium_spacing(p: &VehicleParams, v_star: f64) -> Result<f64, OvmError> {
    p.validate()?;
    if !(v_star > 0.0 && v_star < p.v_max) {
        return Err(OvmError::NoEquilibrium(format!(
            "v*={v_star} outside the open interval (0, {})",
            p.v_max
        )));
    }
    let tol = BISECTION_REL_TOL * p.v_max;
    let (mut lo, mut hi) = (p.s_st, p.s_go);
    for _ in 0..BISECTION_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        let r = desired_speed(p, mid) - v_star;
        if r.abs() < tol || hi - lo < f64::EPSILON * hi {
            return Ok(mid);
        }
        if r < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Equilibrium of a ring of length `ring_length`.
///
/// `all_params[0]` describes vehicle 1. In [`ClosureMode::FixedVStar`] its
/// parameters are ignored and it absorbs the residual spacing; in
/// [`ClosureMode::Closed`] every vehicle follows its own OVM law and `v*` is
/// found by bisection on the monotone total spacing.
pub fn ring_equilibrium(
    all_params: &[VehicleParams],
    ring_length: f64,
    mode: ClosureMode,
    v_star: f64,
) -> Result<Equilibrium, OvmError> {
    if all_params.len() < 2 {
        return Err(OvmError::InvalidParams("a platoon needs at least 2 vehicles".into()));
    }
    for p in all_params.iter().skip(usize::from(mode == ClosureMode::FixedVStar)) {
        p.validate()?;
    }
    match mode {
        ClosureMode::FixedVStar => {
            let mut s_star = Vec::with_capacity(all_params.len());
            s_star.push(0.0);
            for p in &all_params[1..] {
                s_star.push(equilibrium_spacing(p, v_star)?);
            }
            let rest: f64 = s_star[1..].iter().sum();
            let residual = ring_length - rest;
            if residual <= 0.0 {
                return Err(OvmError::NoEquilibrium(format!(
                    "human-driven spacings sum to {rest} m, leaving no room on a {ring_length} m ring"
                )));
            }
            s_star[0] = residual;
            Ok(Equilibrium { v_star, s_star })
        }
        ClosureMode::Closed => equilibrium_velocity_for_ring(all_params, ring_length),
    }
}

/// Solve the ring closure `Σ s_i*(v*) = D` for `v*` with every vehicle on its
/// own OVM curve.
pub fn equilibrium_velocity_for_ring(
    all_params: &[VehicleParams],
    ring_length: f64,
) -> Result<Equilibrium, OvmError> {
    if all_params.len() < 2 {
        return Err(OvmError::InvalidParams("a platoon needs at least 2 vehicles".into()));
    }
    for p in all_params {
        p.validate()?;
    }
    let min_total: f64 = all_params.iter().map(|p| p.s_st).sum();
    let max_total: f64 = all_params.iter().map(|p| p.s_go).sum();
    if !(ring_length > min_total && ring_length < max_total) {
        return Err(OvmError::NoEquilibrium(format!(
            "ring length {ring_length} m outside ({min_total}, {max_total})"
        )));
    }
    // A common v* must stay below every vehicle's saturation speed.
    let v_cap = all_params.iter().map(|p| p.v_max).fold(f64::INFINITY, f64::min);
    let total = |v: f64| -> Result<f64, OvmError> {
        all_params.iter().map(|p| equilibrium_spacing(p, v)).sum()
    };
    let tol = BISECTION_REL_TOL * ring_length;
    let (mut lo, mut hi) = (0.0_f64, v_cap);
    let probe = v_cap * (1.0 - 1e-12);
    if total(probe)? < ring_length - tol {
        return Err(OvmError::NoEquilibrium(format!(
            "ring length {ring_length} m needs a speed above the slowest saturation speed {v_cap} m/s"
        )));
    }
    let mut v = 0.5 * (lo + hi);
    for _ in 0..BISECTION_MAX_ITER {
        v = 0.5 * (lo + hi);
        let r = total(v)? - ring_length;
        if r.abs() < tol || hi - lo < f64::EPSILON * v_cap {
            break;
        }
        if r < 0.0 {
            lo = v;
        } else {
            hi = v;
        }
    }
    let s_star = all_params
        .iter()
        .map(|p| equilibrium_spacing(p, v))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Equilibrium { v_star: v, s_star })
}

/// Linearize vehicle `index` (1-based, human-driven) around `eq`.
pub fn linearize(p: &VehicleParams, eq: &Equilibrium, index: usize) -> Result<Betas, OvmError> {
    p.validate()?;
    let s = *eq
        .s_star
        .get(index.wrapping_sub(1))
        .ok_or_else(|| OvmError::InvalidParams(format!("vehicle {index} not in equilibrium")))?;
    let slope = desired_speed_slope(p, s);
    let betas = Betas::new(p.alpha * slope, p.alpha + p.theta, p.theta);
    if betas.beta1 <= 0.0 {
        return Err(OvmError::DegenerateLinearization {
            index,
            reason: format!("spacing {s} m lies on a flat branch of V, so beta1 = 0"),
        });
    }
    if betas.beta3 <= 0.0 {
        return Err(OvmError::DegenerateLinearization {
            index,
            reason: "theta = 0 gives beta3 = 0".into(),
        });
    }
    Ok(betas)
}

/// Linearize every human-driven vehicle (indices 2..=n).
pub fn linearize_all(all_params: &[VehicleParams], eq: &Equilibrium) -> Result<Vec<Betas>, OvmError> {
    all_params
        .iter()
        .enumerate()
        .skip(1)
        .map(|(i, p)| linearize(p, eq, i + 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference() -> VehicleParams {
        VehicleParams::nominal()
    }

    /// Independent oracle: bisection on `V(s) = target` written against the
    /// closed-form curve only.
    fn bisect_speed(p: &VehicleParams, target: f64) -> f64 {
        let (mut a, mut b) = (p.s_st, p.s_go);
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            let v = 0.5 * p.v_max * (1.0 - (PI * (m - p.s_st) / (p.s_go - p.s_st)).cos());
            if v < target {
                a = m
            } else {
                b = m
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn desired_speed_branches() {
        let p = reference();
        assert_eq!(desired_speed(&p, 5.0), 0.0);
        assert!((desired_speed(&p, 20.0) - 15.0).abs() < 1e-12);
        assert_eq!(desired_speed(&p, 40.0), 30.0);
        assert!((bisect_speed(&p, 15.0) - 20.0).abs() < 1e-9);
    }

    #[test]
    fn acceleration_examples() {
        let p = reference();
        assert!(acceleration(&p, 15.0, 20.0, 0.0).abs() < 1e-12);
        assert_eq!(acceleration(&p, 0.0, 5.0, 0.0), 0.0);
        assert!((acceleration(&p, 15.0, 20.0, 2.0) - 1.8).abs() < 1e-12);
    }

    #[test]
    fn equilibrium_spacing_examples() {
        let p = reference();
        assert!((equilibrium_spacing(&p, 15.0).unwrap() - 20.0).abs() < 1e-8);
        assert!(matches!(equilibrium_spacing(&p, 30.0), Err(OvmError::NoEquilibrium(_))));
        assert!(matches!(equilibrium_spacing(&p, 0.0), Err(OvmError::NoEquilibrium(_))));
        let q = VehicleParams::new(0.6, 0.9, 5.0, 30.0, 30.0).unwrap();
        let s = equilibrium_spacing(&q, 15.0).unwrap();
        assert!((s - 17.5).abs() < 1e-8);
        assert!((s - bisect_speed(&q, 15.0)).abs() < 1e-8);
    }

    #[test]
    fn ring_closure_examples() {
        let params = vec![reference(); 20];
        let eq = equilibrium_velocity_for_ring(&params, 400.0).unwrap();
        assert!((eq.v_star - 15.0).abs() < 1e-6);
        assert!(eq.s_star.iter().all(|s| (s - 20.0).abs() < 1e-6));
        assert!(matches!(
            equilibrium_velocity_for_ring(&params, 2000.0),
            Err(OvmError::NoEquilibrium(_))
        ));
        let eq2 = equilibrium_velocity_for_ring(&params[..2], 40.0).unwrap();
        assert!((eq2.v_star - 15.0).abs() < 1e-6);
        assert!((eq2.s_star[0] - 20.0).abs() < 1e-6 && (eq2.s_star[1] - 20.0).abs() < 1e-6);
    }

    #[test]
    fn fixed_v_star_gives_residual_to_vehicle_one() {
        let mut params = vec![reference(); 4];
        params[2].s_go = 30.0;
        let eq = ring_equilibrium(&params, 80.0, ClosureMode::FixedVStar, 15.0).unwrap();
        assert!((eq.s_star[2] - 17.5).abs() < 1e-8);
        assert!((eq.s_star.iter().sum::<f64>() - 80.0).abs() < 1e-9);
        assert!((eq.s_star[0] - (80.0 - 20.0 - 17.5 - 20.0)).abs() < 1e-8);
        assert!(ring_equilibrium(&params, 50.0, ClosureMode::FixedVStar, 15.0).is_err());
    }

    #[test]
    fn linearize_examples() {
        let p = reference();
        let eq = Equilibrium { v_star: 15.0, s_star: vec![20.0, 20.0] };
        let b = linearize(&p, &eq, 2).unwrap();
        assert!((b.beta1 - 0.6 * PI / 2.0).abs() < 1e-12);
        assert!((b.beta2 - 1.5).abs() < 1e-12 && (b.beta3 - 0.9).abs() < 1e-12);

        // finite-difference oracle on H
        let h = 1e-6;
        let fd_s = (acceleration(&p, 15.0, 20.0 + h, 0.0) - acceleration(&p, 15.0, 20.0 - h, 0.0)) / (2.0 * h);
        assert!((fd_s - b.beta1).abs() < 1e-6);

        let flat = VehicleParams { alpha: 1.0, theta: 0.0, ..p };
        assert!(matches!(linearize(&flat, &eq, 2), Err(OvmError::DegenerateLinearization { .. })));
        let sat = Equilibrium { v_star: 15.0, s_star: vec![20.0, 35.0] };
        assert!(matches!(linearize(&p, &sat, 2), Err(OvmError::DegenerateLinearization { .. })));
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(VehicleParams::new(0.0, 0.9, 5.0, 35.0, 30.0).is_err());
        assert!(VehicleParams::new(0.6, -0.1, 5.0, 35.0, 30.0).is_err());
        assert!(VehicleParams::new(0.6, 0.9, 35.0, 5.0, 30.0).is_err());
        assert!(VehicleParams::new(0.6, 0.9, 5.0, 35.0, 0.0).is_err());
    }
}
