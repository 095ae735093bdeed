//! Block linear matrix inequalities over matrix variables, lowered to a
//! standard-form SDP and solved by a pluggable backend.
//!
//! ```
//! use nalgebra::DMatrix;
//! use platoon_core::lmi::{AffineExpr, LmiConstraint, LmiProgram, Sense, SolveOptions};
//!
//! // minimize η s.t. [[−η, 1], [1, −η]] ⪯ 0
//! let mut prog = LmiProgram::new();
//! let eta = prog.scalar("eta");
//! let one = AffineExpr::identity(1);
//! let minus_eta = -eta.times(&DMatrix::identity(1, 1));
//! prog.constrain(
//!     LmiConstraint::new("c", &[1, 1], Sense::NegativeDefinite)
//!         .non_strict()
//!         .block(0, 0, minus_eta.clone())
//!         .block(0, 1, one)
//!         .block(1, 1, minus_eta),
//! )
//! .unwrap();
//! prog.minimize(eta.expr()).unwrap();
//! let sol = platoon_core::lmi::solve(&prog, &SolveOptions::default()).unwrap();
//! assert!((sol.objective_value - 1.0).abs() < 1e-6);
//! ```

pub mod conic;
pub mod expr;
pub mod ipm;

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use conic::ConicProblem;
pub use expr::{AffineExpr, Var};
pub use ipm::{InteriorPoint, IpmSettings};

use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    PositiveDefinite,
    NegativeDefinite,
}

/// Convergence and timing information reported by a backend.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub relative_gap: f64,
    pub mu: f64,
    pub elapsed_s: f64,
    pub message: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmiError {
    #[error("malformed program: {0}")]
    Malformed(String),
    #[error("block matrix is not symmetric: {0}")]
    NonSymmetric(String),
    #[error("LMI program is infeasible ({})", .0.message)]
    Infeasible(Box<SolveDiagnostics>),
    #[error("numerical trouble in SDP solve ({})", .0.message)]
    NumericalTrouble(Box<SolveDiagnostics>),
}

/// Symmetric block matrix of affine expressions constrained to be definite.
///
/// Only blocks with `i <= j` are stored; `(j, i)` is the transpose of
/// `(i, j)`. Missing blocks are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LmiConstraint {
    pub(crate) name: String,
    pub(crate) sizes: Vec<usize>,
    pub(crate) blocks: BTreeMap<(usize, usize), AffineExpr>,
    pub(crate) sense: Sense,
    pub(crate) strict: bool,
}

impl LmiConstraint {
    /// Strict constraint `M ≻ 0` or `M ≺ 0` with block sizes `sizes`.
    pub fn new(name: &str, sizes: &[usize], sense: Sense) -> Self {
        Self {
            name: name.to_string(),
            sizes: sizes.to_vec(),
            blocks: BTreeMap::new(),
            sense,
            strict: true,
        }
    }

    /// Drop the strictness margin (`⪰` / `⪯`).
    pub fn non_strict(mut self) -> Self {
        self.strict = false;
        self
    }

    /// Add `e` to block `(i, j)`; for `i > j` its transpose goes to `(j, i)`.
    pub fn block(mut self, i: usize, j: usize, e: impl Into<AffineExpr>) -> Self {
        let (key, e) = if i <= j { ((i, j), e.into()) } else { ((j, i), e.into().transpose()) };
        let merged = match self.blocks.remove(&key) {
            Some(old) => old + e,
            None => e,
        };
        self.blocks.insert(key, merged);
        self
    }

    pub fn dim(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// Dense value of the full block matrix.
    pub fn eval(&self, values: &[DMatrix<f64>]) -> DMatrix<f64> {
        let n = self.dim();
        let starts: Vec<usize> = self
            .sizes
            .iter()
            .scan(0, |a, s| {
                let o = *a;
                *a += s;
                Some(o)
            })
            .collect();
        let mut m = DMatrix::zeros(n, n);
        for (&(i, j), e) in &self.blocks {
            let v = e.eval(values);
            m.view_mut((starts[i], starts[j]), v.shape()).copy_from(&v);
            if i != j {
                m.view_mut((starts[j], starts[i]), (v.ncols(), v.nrows()))
                    .copy_from(&v.transpose());
            }
        }
        m
    }
}

/// Decision variables, block constraints and a linear objective.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LmiProgram {
    pub(crate) vars: Vec<Var>,
    pub(crate) names: Vec<String>,
    pub(crate) constraints: Vec<LmiConstraint>,
    pub(crate) objective: Option<AffineExpr>,
}

impl LmiProgram {
    pub fn new() -> Self {
        Self::default()
    }

    fn add_var(&mut self, name: &str, rows: usize, cols: usize, symmetric: bool) -> Var {
        let v = Var { id: self.vars.len(), rows, cols, symmetric };
        self.vars.push(v);
        self.names.push(name.to_string());
        v
    }

    pub fn sym(&mut self, name: &str, n: usize) -> Var {
        self.add_var(name, n, n, true)
    }

    pub fn mat(&mut self, name: &str, rows: usize, cols: usize) -> Var {
        self.add_var(name, rows, cols, false)
    }

    pub fn scalar(&mut self, name: &str) -> Var {
        self.add_var(name, 1, 1, true)
    }

    pub fn n_scalars(&self) -> usize {
        self.vars.iter().map(Var::dof).sum()
    }

    fn check_vars(&self, e: &AffineExpr) -> Result<(), LmiError> {
        for v in e.vars() {
            if self.vars.get(v.id) != Some(&v) {
                return Err(LmiError::Malformed(format!("variable {v:?} does not belong to this program")));
            }
        }
        Ok(())
    }

    pub fn minimize(&mut self, obj: AffineExpr) -> Result<(), LmiError> {
        if obj.shape() != (1, 1) {
            return Err(LmiError::Malformed(format!("objective must be 1x1, got {:?}", obj.shape())));
        }
        self.check_vars(&obj)?;
        self.objective = Some(obj);
        Ok(())
    }

    pub fn constrain(&mut self, c: LmiConstraint) -> Result<(), LmiError> {
        if c.sizes.is_empty() || c.sizes.contains(&0) {
            return Err(LmiError::Malformed(format!("constraint '{}' has empty blocks", c.name)));
        }
        for (&(i, j), e) in &c.blocks {
            let want = match (c.sizes.get(i), c.sizes.get(j)) {
                (Some(&r), Some(&k)) => (r, k),
                _ => {
                    return Err(LmiError::Malformed(format!(
                        "constraint '{}' block ({i},{j}) out of range",
                        c.name
                    )))
                }
            };
            if e.shape() != want {
                return Err(LmiError::Malformed(format!(
                    "constraint '{}' block ({i},{j}) is {:?}, expected {want:?}",
                    c.name,
                    e.shape()
                )));
            }
            self.check_vars(e)?;
        }
        self.constraints.push(c);
        Ok(())
    }

    /// Lower to standard form with the strictness margins of `opts`.
    pub fn assemble(&self, opts: &SolveOptions) -> Result<ConicProblem, LmiError> {
        let margin = |m0: &DMatrix<f64>| opts.strict_margin.unwrap_or(opts.strict_rel * m0.norm().max(1.0));
        conic::assemble(self, margin)
    }

    /// Largest violation of the constraints (ignoring strictness) at
    /// `values`, computed by dense evaluation of each block matrix.
    pub fn max_violation(&self, values: &[DMatrix<f64>]) -> f64 {
        self.constraints
            .iter()
            .map(|c| {
                let m = c.eval(values);
                let v = match c.sense {
                    Sense::PositiveDefinite => -linalg::min_sym_eigenvalue(&m).unwrap_or(f64::NEG_INFINITY),
                    Sense::NegativeDefinite => linalg::max_sym_eigenvalue(&m).unwrap_or(f64::INFINITY),
                };
                v.max(0.0)
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// Absolute strictness margin; `None` uses `strict_rel · max(1, ‖M₀‖_F)`
    /// per constraint, `M₀` being its constant part.
    pub strict_margin: Option<f64>,
    pub strict_rel: f64,
    pub feas_tol: f64,
    pub ipm: IpmSettings,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { strict_margin: None, strict_rel: 1e-7, feas_tol: 1e-6, ipm: IpmSettings::default() }
    }
}

/// Solver status; only `Optimal` solutions are returned as values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    NumericalTrouble,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmiSolution {
    pub status: SolveStatus,
    pub values: BTreeMap<String, DMatrix<f64>>,
    pub objective_value: f64,
    pub max_violation: f64,
    pub diagnostics: SolveDiagnostics,
    by_id: Vec<DMatrix<f64>>,
}

impl LmiSolution {
    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.by_id[v.id]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.by_id[v.id][(0, 0)]
    }

    /// Values indexed by variable id, as taken by [`AffineExpr::eval`].
    pub fn all_values(&self) -> &[DMatrix<f64>] {
        &self.by_id
    }
}

/// Backend outcome.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendFailure {
    Infeasible(SolveDiagnostics),
    Stalled(SolveDiagnostics),
}

/// Anything that can minimize `cᵀy` over `F₀ + Σ y_k F_k ⪰ 0`.
pub trait SdpBackend {
    fn solve_conic(&self, p: &ConicProblem) -> Result<(Vec<f64>, SolveDiagnostics), BackendFailure>;
}

/// Solve with the native interior-point backend.
pub fn solve(prog: &LmiProgram, opts: &SolveOptions) -> Result<LmiSolution, LmiError> {
    solve_with(prog, opts, &InteriorPoint::new(opts.ipm))
}

pub fn solve_with(prog: &LmiProgram, opts: &SolveOptions, backend: &dyn SdpBackend) -> Result<LmiSolution, LmiError> {
    let t0 = Instant::now();
    let conic = prog.assemble(opts)?;
    let (y, mut diag) = backend.solve_conic(&conic).map_err(|f| match f {
        BackendFailure::Infeasible(d) => LmiError::Infeasible(Box::new(d)),
        BackendFailure::Stalled(d) => LmiError::NumericalTrouble(Box::new(d)),
    })?;
    diag.elapsed_s = t0.elapsed().as_secs_f64();
    let by_id: Vec<DMatrix<f64>> = conic::unpack(&prog.vars, &y)
        .into_iter()
        .zip(&prog.vars)
        .map(|(m, v)| if v.symmetric { linalg::symmetrize(&m) } else { m })
        .collect();
    let max_violation = prog.max_violation(&by_id);
    if !(max_violation <= opts.feas_tol) {
        diag.message = format!("returned point violates constraints by {max_violation:.3e}");
        return Err(LmiError::NumericalTrouble(Box::new(diag)));
    }
    let objective_value = prog.objective.as_ref().map_or(0.0, |o| o.eval(&by_id)[(0, 0)]);
    let values = prog.names.iter().cloned().zip(by_id.iter().cloned()).collect();
    Ok(LmiSolution {
        status: SolveStatus::Optimal,
        values,
        objective_value,
        max_violation,
        diagnostics: diag,
        by_id,
    })
}
