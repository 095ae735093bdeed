//! Affine matrix expressions over matrix-valued decision variables.

use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::DMatrix;

/// Handle to a decision variable of an [`super::LmiProgram`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var {
    pub(crate) id: usize,
    pub rows: usize,
    pub cols: usize,
    pub symmetric: bool,
}

impl Var {
    pub fn expr(self) -> AffineExpr {
        AffineExpr {
            rows: self.rows,
            cols: self.cols,
            constant: None,
            terms: vec![Term::Linear {
                left: None,
                var: self,
                transposed: false,
                right: None,
                scale: 1.0,
            }],
        }
    }

    /// `self · m` for a 1×1 variable and a constant matrix `m`.
    pub fn times(self, m: &DMatrix<f64>) -> AffineExpr {
        assert!(self.rows == 1 && self.cols == 1, "times() needs a scalar variable");
        AffineExpr {
            rows: m.nrows(),
            cols: m.ncols(),
            constant: None,
            terms: vec![Term::Scaled { var: self, matrix: m.clone() }],
        }
    }

    /// Number of free scalars.
    pub fn dof(&self) -> usize {
        if self.symmetric {
            self.rows * (self.rows + 1) / 2
        } else {
            self.rows * self.cols
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Term {
    /// `scale · left · op(var) · right`, `None` meaning identity.
    Linear {
        left: Option<DMatrix<f64>>,
        var: Var,
        transposed: bool,
        right: Option<DMatrix<f64>>,
        scale: f64,
    },
    /// `var · matrix` for a scalar variable.
    Scaled { var: Var, matrix: DMatrix<f64> },
}

/// `constant + Σ terms`, a `rows × cols` matrix affine in the variables.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineExpr {
    pub rows: usize,
    pub cols: usize,
    pub(crate) constant: Option<DMatrix<f64>>,
    pub(crate) terms: Vec<Term>,
}

impl AffineExpr {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, constant: None, terms: Vec::new() }
    }

    pub fn constant(m: &DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            constant: Some(m.clone()),
            terms: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::constant(&DMatrix::identity(n, n))
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// `m · self`.
    pub fn lmul(mut self, m: &DMatrix<f64>) -> Self {
        assert_eq!(m.ncols(), self.rows, "lmul shape mismatch");
        self.rows = m.nrows();
        self.constant = self.constant.map(|c| m * c);
        for t in &mut self.terms {
            match t {
                Term::Linear { left, .. } => {
                    *left = Some(match left.take() {
                        Some(l) => m * l,
                        None => m.clone(),
                    })
                }
                Term::Scaled { matrix, .. } => *matrix = m * &*matrix,
            }
        }
        self
    }

    /// `self · m`.
    pub fn rmul(mut self, m: &DMatrix<f64>) -> Self {
        assert_eq!(m.nrows(), self.cols, "rmul shape mismatch");
        self.cols = m.ncols();
        self.constant = self.constant.map(|c| c * m);
        for t in &mut self.terms {
            match t {
                Term::Linear { right, .. } => {
                    *right = Some(match right.take() {
                        Some(r) => r * m,
                        None => m.clone(),
                    })
                }
                Term::Scaled { matrix, .. } => *matrix = &*matrix * m,
            }
        }
        self
    }

    pub fn transpose(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            constant: self.constant.map(|c| c.transpose()),
            terms: self
                .terms
                .into_iter()
                .map(|t| match t {
                    Term::Linear { left, var, transposed, right, scale } => Term::Linear {
                        left: right.map(|r| r.transpose()),
                        var,
                        transposed: !transposed,
                        right: left.map(|l| l.transpose()),
                        scale,
                    },
                    Term::Scaled { var, matrix } => Term::Scaled { var, matrix: matrix.transpose() },
                })
                .collect(),
        }
    }

    /// `self + selfᵀ`.
    pub fn plus_transpose(self) -> Self {
        let t = self.clone().transpose();
        self + t
    }

    pub fn is_constant(&self) -> bool {
        self.terms.is_empty()
    }

    /// Dense value for the given variable values (indexed by variable id).
    pub fn eval(&self, values: &[DMatrix<f64>]) -> DMatrix<f64> {
        let mut out = self
            .constant
            .clone()
            .unwrap_or_else(|| DMatrix::zeros(self.rows, self.cols));
        for t in &self.terms {
            match t {
                Term::Linear { left, var, transposed, right, scale } => {
                    let v = &values[var.id];
                    let mut m = if *transposed { v.transpose() } else { v.clone() };
                    if let Some(l) = left {
                        m = l * m;
                    }
                    if let Some(r) = right {
                        m *= r;
                    }
                    out += m * *scale;
                }
                Term::Scaled { var, matrix } => out += matrix * values[var.id][(0, 0)],
            }
        }
        out
    }

    pub(crate) fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.terms.iter().map(|t| match t {
            Term::Linear { var, .. } | Term::Scaled { var, .. } => *var,
        })
    }
}

impl From<Var> for AffineExpr {
    fn from(v: Var) -> Self {
        v.expr()
    }
}

impl Add for AffineExpr {
    type Output = AffineExpr;
    fn add(mut self, rhs: AffineExpr) -> AffineExpr {
        assert_eq!(self.shape(), rhs.shape(), "adding expressions of different shapes");
        self.constant = match (self.constant, rhs.constant) {
            (Some(a), Some(b)) => Some(a + b),
            (a, b) => a.or(b),
        };
        self.terms.extend(rhs.terms);
        self
    }
}

impl Neg for AffineExpr {
    type Output = AffineExpr;
    fn neg(self) -> AffineExpr {
        self * -1.0
    }
}

impl Sub for AffineExpr {
    type Output = AffineExpr;
    fn sub(self, rhs: AffineExpr) -> AffineExpr {
        self + (-rhs)
    }
}

impl Mul<f64> for AffineExpr {
    type Output = AffineExpr;
    fn mul(mut self, k: f64) -> AffineExpr {
        self.constant = self.constant.map(|c| c * k);
        for t in &mut self.terms {
            match t {
                Term::Linear { scale, .. } => *scale *= k,
                Term::Scaled { matrix, .. } => *matrix *= k,
            }
        }
        self
    }
}
