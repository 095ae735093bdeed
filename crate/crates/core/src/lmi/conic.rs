//! Standard-form semidefinite program assembled from an [`LmiProgram`].
//!
//! The program is
//!
//! ```text
//! minimize   cᵀy + c₀
//! subject to S_j(y) = F_{j,0} + Σ_k y_k F_{j,k} ⪰ 0   for every cone j
//! ```
//!
//! where `y` stacks the free scalars of all variables. Matrices are stored
//! as upper-triangle triplets `(row, col, value)`.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::expr::{AffineExpr, Term, Var};
use super::{LmiConstraint, LmiError, LmiProgram, Sense};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientMatrix {
    pub var: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cone {
    pub dim: usize,
    pub constant: Vec<(usize, usize, f64)>,
    pub coefficients: Vec<CoefficientMatrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConicProblem {
    pub version: u32,
    pub n_vars: usize,
    pub objective: Vec<f64>,
    pub objective_constant: f64,
    pub cones: Vec<Cone>,
}

impl ConicProblem {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("conic problem serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Dense `S_j(y)` for every cone.
    pub fn slacks(&self, y: &[f64]) -> Vec<DMatrix<f64>> {
        self.cones
            .iter()
            .map(|c| {
                let mut s = DMatrix::zeros(c.dim, c.dim);
                add_sym(&mut s, &c.constant, 1.0);
                for f in &c.coefficients {
                    add_sym(&mut s, &f.entries, y[f.var]);
                }
                s
            })
            .collect()
    }
}

pub(crate) fn add_sym(m: &mut DMatrix<f64>, upper: &[(usize, usize, f64)], k: f64) {
    for &(i, j, v) in upper {
        m[(i, j)] += k * v;
        if i != j {
            m[(j, i)] += k * v;
        }
    }
}

/// Offsets of each variable's scalars in `y`.
pub(crate) fn offsets(vars: &[Var]) -> (Vec<usize>, usize) {
    let mut off = Vec::with_capacity(vars.len());
    let mut n = 0;
    for v in vars {
        off.push(n);
        n += v.dof();
    }
    (off, n)
}

/// Position of entry `(i, j)` among a variable's free scalars.
fn scalar_index(v: &Var, i: usize, j: usize) -> usize {
    if v.symmetric {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        j * (j + 1) / 2 + i
    } else {
        j * v.rows + i
    }
}

/// Basis entries of every scalar of `v`, in scalar order.
fn basis(v: &Var) -> Vec<Vec<(usize, usize)>> {
    let mut out = vec![Vec::new(); v.dof()];
    for j in 0..v.cols {
        for i in 0..v.rows {
            if v.symmetric && i > j {
                continue;
            }
            let k = scalar_index(v, i, j);
            out[k].push((i, j));
            if v.symmetric && i != j {
                out[k].push((j, i));
            }
        }
    }
    out
}

/// Rebuild variable values from the stacked scalars.
pub(crate) fn unpack(vars: &[Var], y: &[f64]) -> Vec<DMatrix<f64>> {
    let (off, _) = offsets(vars);
    vars.iter()
        .zip(off)
        .map(|(v, o)| DMatrix::from_fn(v.rows, v.cols, |i, j| y[o + scalar_index(v, i, j)]))
        .collect()
}

type Sparse = Vec<Vec<(usize, f64)>>;

fn sparse_cols(m: &Option<DMatrix<f64>>, n: usize) -> Sparse {
    match m {
        None => (0..n).map(|p| vec![(p, 1.0)]).collect(),
        Some(m) => (0..m.ncols())
            .map(|p| (0..m.nrows()).filter(|&r| m[(r, p)] != 0.0).map(|r| (r, m[(r, p)])).collect())
            .collect(),
    }
}

fn sparse_rows(m: &Option<DMatrix<f64>>, n: usize) -> Sparse {
    match m {
        None => (0..n).map(|q| vec![(q, 1.0)]).collect(),
        Some(m) => (0..m.nrows())
            .map(|q| (0..m.ncols()).filter(|&c| m[(q, c)] != 0.0).map(|c| (c, m[(q, c)])).collect())
            .collect(),
    }
}

/// Accumulates `expr` placed at `(r0, c0)` into `coef[(scalar, row, col)]`.
/// With `transpose_too` the transpose is also placed at `(c0, r0)`.
fn accumulate(
    expr: &AffineExpr,
    vars: &[Var],
    off: &[usize],
    r0: usize,
    c0: usize,
    transpose_too: bool,
    coef: &mut BTreeMap<(usize, usize, usize), f64>,
    constant: &mut DMatrix<f64>,
) {
    let mut put = |k: usize, r: usize, c: usize, v: f64| {
        *coef.entry((k, r0 + r, c0 + c)).or_insert(0.0) += v;
        if transpose_too {
            *coef.entry((k, c0 + c, r0 + r)).or_insert(0.0) += v;
        }
    };
    for t in &expr.terms {
        match t {
            Term::Linear { left, var, transposed, right, scale } => {
                let v = vars[var.id];
                let (vr, vc) = if *transposed { (v.cols, v.rows) } else { (v.rows, v.cols) };
                let lc = sparse_cols(left, vr);
                let rr = sparse_rows(right, vc);
                for (k, entries) in basis(&v).into_iter().enumerate() {
                    for (p, q) in entries {
                        let (p, q) = if *transposed { (q, p) } else { (p, q) };
                        for &(r, lv) in &lc[p] {
                            for &(c, rv) in &rr[q] {
                                put(off[var.id] + k, r, c, scale * lv * rv);
                            }
                        }
                    }
                }
            }
            Term::Scaled { var, matrix } => {
                for c in 0..matrix.ncols() {
                    for r in 0..matrix.nrows() {
                        if matrix[(r, c)] != 0.0 {
                            put(off[var.id], r, c, matrix[(r, c)]);
                        }
                    }
                }
            }
        }
    }
    if let Some(m) = &expr.constant {
        let mut v = constant.view_mut((r0, c0), m.shape());
        v += m;
        if transpose_too {
            let mut v = constant.view_mut((c0, r0), (m.ncols(), m.nrows()));
            v += m.transpose();
        }
    }
}

fn sym_tol(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
}

/// Cone of one block constraint, with the strictness margin applied.
pub(crate) fn assemble_constraint(
    con: &LmiConstraint,
    vars: &[Var],
    off: &[usize],
    margin: impl Fn(&DMatrix<f64>) -> f64,
) -> Result<Cone, LmiError> {
    let dim: usize = con.sizes.iter().sum();
    let starts: Vec<usize> = con
        .sizes
        .iter()
        .scan(0, |acc, s| {
            let o = *acc;
            *acc += s;
            Some(o)
        })
        .collect();
    let mut coef = BTreeMap::new();
    let mut constant = DMatrix::zeros(dim, dim);
    for (&(bi, bj), e) in &con.blocks {
        accumulate(e, vars, off, starts[bi], starts[bj], bi != bj, &mut coef, &mut constant);
    }
    for (&(k, r, c), &v) in &coef {
        let w = coef.get(&(k, c, r)).copied().unwrap_or(0.0);
        if !sym_tol(v, w) {
            return Err(LmiError::NonSymmetric(format!(
                "constraint '{}' entry ({r},{c}) of scalar {k}: {v} vs {w}",
                con.name
            )));
        }
    }
    for r in 0..dim {
        for c in r + 1..dim {
            if !sym_tol(constant[(r, c)], constant[(c, r)]) {
                return Err(LmiError::NonSymmetric(format!(
                    "constraint '{}' constant entry ({r},{c})",
                    con.name
                )));
            }
        }
    }
    let sign = match con.sense {
        Sense::PositiveDefinite => 1.0,
        Sense::NegativeDefinite => -1.0,
    };
    let eps = if con.strict { margin(&constant) } else { 0.0 };
    let mut s0 = constant * sign;
    for i in 0..dim {
        s0[(i, i)] -= eps;
    }
    let mut const_trip = Vec::new();
    for c in 0..dim {
        for r in 0..=c {
            let v = 0.5 * (s0[(r, c)] + s0[(c, r)]);
            if v != 0.0 {
                const_trip.push((r, c, v));
            }
        }
    }
    let mut coefficients: Vec<CoefficientMatrix> = Vec::new();
    for (&(k, r, c), &v) in &coef {
        if r > c || v == 0.0 {
            continue;
        }
        let v = 0.5 * (v + coef.get(&(k, c, r)).copied().unwrap_or(0.0));
        match coefficients.last_mut() {
            Some(last) if last.var == k => last.entries.push((r, c, sign * v)),
            _ => coefficients.push(CoefficientMatrix { var: k, entries: vec![(r, c, sign * v)] }),
        }
    }
    Ok(Cone { dim, constant: const_trip, coefficients })
}

/// Linear objective `(c, c₀)` from a 1×1 expression.
pub(crate) fn assemble_objective(obj: &AffineExpr, vars: &[Var], off: &[usize], n: usize) -> (Vec<f64>, f64) {
    let mut coef = BTreeMap::new();
    let mut constant = DMatrix::zeros(1, 1);
    accumulate(obj, vars, off, 0, 0, false, &mut coef, &mut constant);
    let mut c = vec![0.0; n];
    for ((k, _, _), v) in coef {
        c[k] += v;
    }
    (c, constant[(0, 0)])
}

/// Assemble the full conic problem.
pub fn assemble(prog: &LmiProgram, margin: impl Fn(&DMatrix<f64>) -> f64 + Copy) -> Result<ConicProblem, LmiError> {
    let (off, n) = offsets(&prog.vars);
    let cones = prog
        .constraints
        .iter()
        .map(|c| assemble_constraint(c, &prog.vars, &off, margin))
        .collect::<Result<Vec<_>, _>>()?;
    let (objective, objective_constant) = match &prog.objective {
        Some(o) => assemble_objective(o, &prog.vars, &off, n),
        None => (vec![0.0; n], 0.0),
    };
    Ok(ConicProblem { version: FORMAT_VERSION, n_vars: n, objective, objective_constant, cones })
}
