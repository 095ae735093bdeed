//! Linearized state-space model of a mixed platoon.
//!
//! State ordering is per vehicle, `x = (s̄₁, v̄₁, s̄₂, v̄₂, …, s̄ₙ, v̄ₙ)`, where
//! vehicle 1 is the automated vehicle. On a ring the total spacing is
//! conserved, which leaves one uncontrollable eigenvalue at the origin; the
//! [`ReducedPlatoon`] removes it by eliminating `s̄₁ = −Σ_{i≥2} s̄ᵢ`.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix_json;
use crate::ovm::{self, Betas, ClosureMode, Equilibrium, OvmError, VehicleParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlatoonError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid platoon spec: {0}")]
    InvalidSpec(String),
    #[error("invalid performance weights: {0}")]
    InvalidWeights(String),
    #[error("model reduction requires a ring road")]
    NotRing,
    #[error(transparent)]
    Ovm(#[from] OvmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Road {
    Ring { length_m: f64 },
    Open,
}

impl Road {
    pub fn is_ring(&self) -> bool {
        matches!(self, Road::Ring { .. })
    }

    /// Number of control inputs of the automated vehicle.
    pub fn input_count(&self) -> usize {
        match self {
            Road::Ring { .. } => 1,
            Road::Open => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Road::Ring { .. } => "ring",
            Road::Open => "open",
        }
    }
}

/// Topology and linearization data of a platoon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatoonSpec {
    pub n: usize,
    pub road: Road,
    /// Coefficients of vehicles `2..=n`, in order.
    pub hdv_betas: Vec<Betas>,
    /// Sorted 1-based ids of the vehicles whose states the controller
    /// receives; always contains 1.
    pub observed: Vec<usize>,
}

impl PlatoonSpec {
    pub fn new(n: usize, road: Road, hdv_betas: Vec<Betas>, observed: &[usize]) -> Result<Self, PlatoonError> {
        if n < 2 {
            return Err(PlatoonError::InvalidSpec(format!("need n >= 2 vehicles, got {n}")));
        }
        if hdv_betas.len() != n - 1 {
            return Err(PlatoonError::DimensionMismatch(format!(
                "{} beta triples for {} human-driven vehicles",
                hdv_betas.len(),
                n - 1
            )));
        }
        if let Some((i, b)) = hdv_betas.iter().enumerate().find(|(_, b)| !b.is_valid()) {
            return Err(PlatoonError::InvalidSpec(format!(
                "vehicle {} has non-positive coefficients {b:?}",
                i + 2
            )));
        }
        if let Road::Ring { length_m } = road {
            if !(length_m > 0.0) {
                return Err(PlatoonError::InvalidSpec(format!("ring length {length_m} must be > 0")));
            }
        }
        let observed: BTreeSet<usize> = observed.iter().copied().collect();
        if let Some(bad) = observed.iter().find(|&&j| j == 0 || j > n) {
            return Err(PlatoonError::InvalidSpec(format!("observed vehicle {bad} not in 1..={n}")));
        }
        if !observed.contains(&1) {
            return Err(PlatoonError::InvalidSpec("vehicle 1 must observe its own state".into()));
        }
        Ok(Self {
            n,
            road,
            hdv_betas,
            observed: observed.into_iter().collect(),
        })
    }

    pub fn state_dim(&self) -> usize {
        2 * self.n
    }
}

/// The automated vehicle plus `k` vehicles behind it and `k` ahead of it
/// (ahead wraps to the end of the index range on a ring).
pub fn neighbor_set(n: usize, k: usize) -> Vec<usize> {
    let mut s = BTreeSet::from([1]);
    for d in 1..=k.min(n.saturating_sub(1)) {
        s.insert(1 + d);
        s.insert(n + 1 - d);
    }
    s.into_iter().filter(|&j| j >= 1 && j <= n).collect()
}

/// Penalties of the performance output `z`.
///
/// On a ring only `gamma_u` is used; on an open road `gamma_u` weights `u₁`
/// and `gamma_u2` weights `u₂`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerformanceWeights {
    pub gamma_s: f64,
    pub gamma_v: f64,
    pub gamma_u: f64,
    #[serde(default = "one")]
    pub gamma_u2: f64,
}

fn one() -> f64 {
    1.0
}

impl PerformanceWeights {
    /// Weights used for the ring-road experiments.
    pub fn ring_default() -> Self {
        Self { gamma_s: 0.03, gamma_v: 0.15, gamma_u: 1.0, gamma_u2: 1.0 }
    }

    pub fn unit() -> Self {
        Self { gamma_s: 1.0, gamma_v: 1.0, gamma_u: 1.0, gamma_u2: 1.0 }
    }

    pub fn validate(&self) -> Result<(), PlatoonError> {
        let all = [self.gamma_s, self.gamma_v, self.gamma_u, self.gamma_u2];
        if all.iter().all(|g| g.is_finite() && *g > 0.0) {
            Ok(())
        } else {
            Err(PlatoonError::InvalidWeights(format!("all penalties must be > 0, got {self:?}")))
        }
    }

    /// Diagonal state weight `T` (squared penalties).
    pub fn state_weight(&self, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(2 * n, 2 * n, |i, j| match (i == j, i % 2) {
            (true, 0) => self.gamma_s * self.gamma_s,
            (true, _) => self.gamma_v * self.gamma_v,
            _ => 0.0,
        })
    }

    /// Diagonal input weight `Q` (squared penalties).
    pub fn input_weight(&self, road: &Road) -> DMatrix<f64> {
        match road {
            Road::Ring { .. } => DMatrix::from_element(1, 1, self.gamma_u * self.gamma_u),
            Road::Open => DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
                self.gamma_u * self.gamma_u,
                self.gamma_u2 * self.gamma_u2,
            ])),
        }
    }
}

/// Matrices of `ẋ = Ax + Bu + B_d d`, `z = C_z x + D_z u`, `y = Cx`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantMatrices {
    #[serde(with = "matrix_json")]
    pub a: DMatrix<f64>,
    #[serde(with = "matrix_json")]
    pub b: DMatrix<f64>,
    #[serde(with = "matrix_json")]
    pub c: DMatrix<f64>,
    #[serde(with = "matrix_json")]
    pub bd: DMatrix<f64>,
    #[serde(with = "matrix_json")]
    pub cz: DMatrix<f64>,
    #[serde(with = "matrix_json")]
    pub dz: DMatrix<f64>,
}

impl PlantMatrices {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn check_dims(&self) -> Result<(), PlatoonError> {
        let n = self.a.nrows();
        let ok = self.a.is_square()
            && self.b.nrows() == n
            && self.c.ncols() == n
            && self.bd.nrows() == n
            && self.cz.ncols() == n
            && self.dz.nrows() == self.cz.nrows()
            && self.dz.ncols() == self.b.ncols();
        if ok {
            Ok(())
        } else {
            Err(PlatoonError::DimensionMismatch(format!(
                "A {:?}, B {:?}, C {:?}, Bd {:?}, Cz {:?}, Dz {:?}",
                self.a.shape(),
                self.b.shape(),
                self.c.shape(),
                self.bd.shape(),
                self.cz.shape(),
                self.dz.shape()
            )))
        }
    }
}

/// Full `2n`-state linearization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearizedPlatoon {
    pub matrices: PlantMatrices,
    pub eq: Equilibrium,
    pub spec: PlatoonSpec,
    pub weights: PerformanceWeights,
}

/// Ring model on the invariant subspace `Σ s̄ᵢ = 0`, state
/// `(v̄₁, s̄₂, v̄₂, …, s̄ₙ, v̄ₙ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedPlatoon {
    pub matrices: PlantMatrices,
    /// `(2n−1) × 2n`, drops `s̄₁`.
    #[serde(with = "matrix_json")]
    pub t_reduce: DMatrix<f64>,
    /// `2n × (2n−1)`, restores `s̄₁ = −Σ_{i≥2} s̄ᵢ`.
    #[serde(with = "matrix_json")]
    pub t_lift: DMatrix<f64>,
    pub eq: Equilibrium,
    pub spec: PlatoonSpec,
    pub weights: PerformanceWeights,
}

/// State matrix `A` for linearization coefficients of vehicles `2..=n`.
pub fn state_matrix(n: usize, road: &Road, hdv_betas: &[Betas]) -> DMatrix<f64> {
    assert_eq!(hdv_betas.len(), n - 1, "one beta triple per human-driven vehicle");
    let nx = 2 * n;
    let mut a = DMatrix::zeros(nx, nx);
    // J1
    a[(0, 1)] = -1.0;
    if road.is_ring() {
        // J2: vehicle 1 follows vehicle n
        a[(0, nx - 1)] = 1.0;
    }
    for (k, b) in hdv_betas.iter().enumerate() {
        let r = 2 * (k + 1);
        // A_{i1}: coupling to predecessor velocity
        a[(r, r - 1)] = 1.0;
        a[(r + 1, r - 1)] = b.beta3;
        // A_{i2}
        a[(r, r + 1)] = -1.0;
        a[(r + 1, r)] = b.beta1;
        a[(r + 1, r + 1)] = -b.beta2;
    }
    a
}

/// Assemble the linearized plant.
pub fn build_plant(
    spec: &PlatoonSpec,
    eq: &Equilibrium,
    w: &PerformanceWeights,
) -> Result<LinearizedPlatoon, PlatoonError> {
    w.validate()?;
    let n = spec.n;
    if spec.hdv_betas.len() != n - 1 {
        return Err(PlatoonError::DimensionMismatch(format!(
            "{} beta triples for {} human-driven vehicles",
            spec.hdv_betas.len(),
            n - 1
        )));
    }
    if eq.s_star.len() != n {
        return Err(PlatoonError::DimensionMismatch(format!(
            "equilibrium has {} spacings for {n} vehicles",
            eq.s_star.len()
        )));
    }
    let nx = 2 * n;
    let q = spec.road.input_count();

    let a = state_matrix(n, &spec.road, &spec.hdv_betas);

    let mut bm = DMatrix::zeros(nx, q);
    match spec.road {
        Road::Ring { .. } => bm[(1, 0)] = 1.0,
        Road::Open => {
            bm[(0, 0)] = 1.0;
            bm[(1, 1)] = 1.0;
        }
    }

    let m = spec.observed.len();
    let mut c = DMatrix::zeros(2 * m, nx);
    for (k, &j) in spec.observed.iter().enumerate() {
        c[(2 * k, 2 * j - 2)] = 1.0;
        c[(2 * k + 1, 2 * j - 1)] = 1.0;
    }

    let mut bd = DMatrix::zeros(nx, n);
    for i in 0..n {
        bd[(2 * i + 1, i)] = 1.0;
    }

    let mut cz = DMatrix::zeros(nx + q, nx);
    for i in 0..n {
        cz[(2 * i, 2 * i)] = w.gamma_s;
        cz[(2 * i + 1, 2 * i + 1)] = w.gamma_v;
    }
    let mut dz = DMatrix::zeros(nx + q, q);
    dz[(nx, 0)] = w.gamma_u;
    if q == 2 {
        dz[(nx + 1, 1)] = w.gamma_u2;
    }

    Ok(LinearizedPlatoon {
        matrices: PlantMatrices { a, b: bm, c, bd, cz, dz },
        eq: eq.clone(),
        spec: spec.clone(),
        weights: *w,
    })
}

/// Linearize a platoon straight from vehicle parameters.
///
/// `params[0]` is vehicle 1; on a ring its parameters only matter in
/// [`ClosureMode::Closed`]. On an open road vehicle 1's nominal spacing to the
/// virtual leader is its own OVM equilibrium spacing.
pub fn platoon_from_params(
    params: &[VehicleParams],
    road: Road,
    v_star: f64,
    mode: ClosureMode,
    observed: &[usize],
    w: &PerformanceWeights,
) -> Result<LinearizedPlatoon, PlatoonError> {
    let eq = match road {
        Road::Ring { length_m } => ovm::ring_equilibrium(params, length_m, mode, v_star)?,
        Road::Open => {
            let s_star = params
                .iter()
                .map(|p| ovm::equilibrium_spacing(p, v_star))
                .collect::<Result<Vec<_>, _>>()?;
            Equilibrium { v_star, s_star }
        }
    };
    let betas = ovm::linearize_all(params, &eq)?;
    let spec = PlatoonSpec::new(params.len(), road, betas, observed)?;
    build_plant(&spec, &eq, w)
}

/// Coordinate maps between the full ring state and the reduced state.
pub fn reduction_maps(n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let nx = 2 * n;
    let t_reduce = DMatrix::from_fn(nx - 1, nx, |i, j| if j == i + 1 { 1.0 } else { 0.0 });
    let mut t_lift = DMatrix::zeros(nx, nx - 1);
    for k in 0..nx - 1 {
        t_lift[(k + 1, k)] = 1.0;
    }
    // s̄_i for i >= 2 sits at reduced index 2(i-1) - 1
    for i in 2..=n {
        t_lift[(0, 2 * (i - 1) - 1)] = -1.0;
    }
    (t_reduce, t_lift)
}

/// Deflate the conserved total-spacing mode of a ring plant.
pub fn reduce_ring(plant: &LinearizedPlatoon) -> Result<ReducedPlatoon, PlatoonError> {
    if !plant.spec.road.is_ring() {
        return Err(PlatoonError::NotRing);
    }
    let (t_reduce, t_lift) = reduction_maps(plant.spec.n);
    let m = &plant.matrices;
    let matrices = PlantMatrices {
        a: &t_reduce * &m.a * &t_lift,
        b: &t_reduce * &m.b,
        c: &m.c * &t_lift,
        bd: &t_reduce * &m.bd,
        cz: &m.cz * &t_lift,
        dz: m.dz.clone(),
    };
    Ok(ReducedPlatoon {
        matrices,
        t_reduce,
        t_lift,
        eq: plant.eq.clone(),
        spec: plant.spec.clone(),
        weights: plant.weights,
    })
}
