//! Eigenstructure analysis: PBH rank tests per eigenvalue, the H∞ norm of a
//! stable system and bounded-real-lemma certificates.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, C64};
use crate::lmi::{self, AffineExpr, LmiConstraint, LmiError, LmiProgram, Sense, SolveOptions};
use crate::par::{self, Exec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModalError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("system matrix is not Hurwitz (spectral abscissa {0:.3e})")]
    NotHurwitz(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("gamma must be positive, got {0}")]
    InvalidGamma(f64),
    #[error("LMI solve failed: {0}")]
    SolverFailure(#[from] LmiError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// PBH rank threshold relative to `‖A‖_F`.
    pub rank_tol_rel: f64,
    /// Modes with `Re λ ≥ −stab_tol` count as not asymptotically stable.
    pub stab_tol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { rank_tol_rel: 1e-7, stab_tol: 1e-8 }
    }
}

/// PBH verdict for one eigenvalue (or one conjugate pair, reported with
/// `im ≥ 0`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeVerdict {
    pub re: f64,
    pub im: f64,
    /// Algebraic multiplicity of the eigenvalue cluster.
    pub multiplicity: usize,
    pub controllable: bool,
    pub observable: bool,
    /// `σ_min([λI − A, B])`
    pub residual_ctrb: f64,
    /// `σ_min([λI − Aᵀ, Cᵀ])`
    pub residual_obsv: f64,
    /// Number of independent uncontrollable directions at this eigenvalue.
    pub uncontrollable_dim: usize,
    pub unobservable_dim: usize,
}

impl ModeVerdict {
    pub fn lambda(&self) -> C64 {
        C64::new(self.re, self.im)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub state_dim: usize,
    pub modes: Vec<ModeVerdict>,
    /// Every mode with `Re λ ≥ −stab_tol` is controllable, except modes at
    /// the origin, which are tallied in `uncontrollable_at_origin`.
    pub stabilizable: bool,
    pub detectable: bool,
    pub controllable: bool,
    pub observable: bool,
    /// Uncontrollable eigenvalues with `|λ| ≤ rank_tol`, counted with
    /// multiplicity of their uncontrollable directions.
    pub uncontrollable_at_origin: usize,
    /// Uncontrollable modes with `Re λ ≥ −stab_tol` away from the origin.
    pub uncontrollable_unstable: usize,
    pub spectral_abscissa: f64,
    pub rank_tol: f64,
}

/// Groups eigenvalues closer than `tol` and returns `(mean, count)` for the
/// clusters with nonnegative imaginary part.
fn clusters(ev: &[C64], tol: f64) -> Vec<(C64, usize)> {
    let mut used = vec![false; ev.len()];
    let mut out = Vec::new();
    for i in 0..ev.len() {
        if used[i] {
            continue;
        }
        let mut members = vec![i];
        used[i] = true;
        // transitive closure
        let mut k = 0;
        while k < members.len() {
            let z = ev[members[k]];
            for j in 0..ev.len() {
                if !used[j] && (ev[j] - z).norm() <= tol {
                    used[j] = true;
                    members.push(j);
                }
            }
            k += 1;
        }
        let mean = members.iter().map(|&j| ev[j]).sum::<C64>() / members.len() as f64;
        if mean.im >= -tol {
            let mean = if mean.im.abs() <= tol { C64::new(mean.re, 0.0) } else { mean };
            out.push((mean, members.len()));
        }
    }
    out.sort_by(|a, b| (a.0.re, a.0.im).partial_cmp(&(b.0.re, b.0.im)).unwrap());
    out
}

fn complexify(m: &DMatrix<f64>) -> DMatrix<C64> {
    m.map(|x| C64::new(x, 0.0))
}

/// `σ_min` and the number of singular values below `tol` of `[λI − A, B]`.
fn pbh_rank(a: &DMatrix<f64>, b: &DMatrix<f64>, lambda: C64, tol: f64) -> Result<(f64, usize), LinalgError> {
    let n = a.nrows();
    let mut m = DMatrix::<C64>::zeros(n, n + b.ncols());
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] = -C64::new(a[(i, j)], 0.0);
        }
        m[(i, i)] += lambda;
        for j in 0..b.ncols() {
            m[(i, n + j)] = C64::new(b[(i, j)], 0.0);
        }
    }
    let sv = linalg::singular_values_complex(&m)?;
    let smin = sv.last().copied().unwrap_or(0.0);
    let deficient = sv.iter().filter(|&&s| s <= tol).count();
    Ok((smin, deficient))
}

/// PBH controllability/observability analysis of `(A, B, C)`.
pub fn pbh_report(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    tol: &Tolerances,
) -> Result<AnalysisReport, ModalError> {
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n || c.ncols() != n {
        return Err(ModalError::DimensionMismatch(format!(
            "A {:?}, B {:?}, C {:?}",
            a.shape(),
            b.shape(),
            c.shape()
        )));
    }
    let rank_tol = tol.rank_tol_rel * a.norm().max(f64::MIN_POSITIVE);
    let ev = linalg::eigenvalues(a)?;
    let cl_tol = 1e-6 * a.norm().max(1.0);
    let groups = clusters(&ev, cl_tol);
    let at = a.transpose();
    let ct = c.transpose();
    let verdicts = par::map_slice(Exec::default(), &groups, |&(lambda, mult)| {
        let (rc, dc) = pbh_rank(a, b, lambda, rank_tol)?;
        let (ro, d_o) = pbh_rank(&at, &ct, lambda, rank_tol)?;
        Ok::<_, LinalgError>(ModeVerdict {
            re: lambda.re,
            im: lambda.im,
            multiplicity: mult,
            controllable: dc == 0,
            observable: d_o == 0,
            residual_ctrb: rc,
            residual_obsv: ro,
            uncontrollable_dim: dc.min(mult),
            unobservable_dim: d_o.min(mult),
        })
    });
    let modes = verdicts.into_iter().collect::<Result<Vec<_>, _>>()?;
    let unstable = |m: &&ModeVerdict| m.re >= -tol.stab_tol;
    let at_origin = |m: &ModeVerdict| m.lambda().norm() <= rank_tol.max(cl_tol);
    let pair = |m: &ModeVerdict| if m.im != 0.0 { 2 } else { 1 };
    let uncontrollable_at_origin = modes
        .iter()
        .filter(|m| !m.controllable && at_origin(m))
        .map(|m| m.uncontrollable_dim)
        .sum();
    let uncontrollable_unstable = modes
        .iter()
        .filter(unstable)
        .filter(|m| !m.controllable && !at_origin(m))
        .map(|m| m.uncontrollable_dim * pair(m))
        .sum::<usize>();
    let detectable = modes.iter().filter(unstable).all(|m| m.observable);
    Ok(AnalysisReport {
        state_dim: n,
        stabilizable: uncontrollable_unstable == 0,
        detectable,
        controllable: modes.iter().all(|m| m.controllable),
        observable: modes.iter().all(|m| m.observable),
        uncontrollable_at_origin,
        uncontrollable_unstable,
        spectral_abscissa: ev.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max),
        rank_tol,
        modes,
    })
}

/// `σ_max(C (iωI − A)⁻¹ B)`.
pub fn gain_at(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, omega: f64) -> Result<f64, LinalgError> {
    let n = a.nrows();
    let mut m = -complexify(a);
    for i in 0..n {
        m[(i, i)] += C64::new(0.0, omega);
    }
    let x = m.lu().solve(&complexify(b)).ok_or(LinalgError::SvdFailure)?;
    let g = complexify(c) * x;
    Ok(linalg::singular_values_complex(&g)?.first().copied().unwrap_or(0.0))
}

/// `‖C (sI − A)⁻¹ B‖_∞` to relative accuracy `1e-6`.
///
/// The lower bound is raised by evaluating the gain at the imaginary-axis
/// eigenvalues of the Hamiltonian `H(γ)` and between them; a level `γ` whose
/// Hamiltonian has no genuine imaginary eigenvalue is an upper bound.
pub fn hinf_norm(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<f64, ModalError> {
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n || c.ncols() != n {
        return Err(ModalError::DimensionMismatch(format!(
            "A {:?}, B {:?}, C {:?}",
            a.shape(),
            b.shape(),
            c.shape()
        )));
    }
    let ev = linalg::eigenvalues(a)?;
    let abscissa = ev.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    if !(abscissa < -1e-9) {
        return Err(ModalError::NotHurwitz(abscissa));
    }
    if b.ncols() == 0 || c.nrows() == 0 {
        return Ok(0.0);
    }
    const REL: f64 = 1e-6;
    // initial lower bound: DC gain and gains at the modal frequencies
    let mut freqs = vec![0.0];
    freqs.extend(ev.iter().filter(|z| z.im > 0.0).map(|z| z.norm()));
    let mut lb = 0.0f64;
    for &w in &freqs {
        lb = lb.max(gain_at(a, b, c, w)?);
    }
    if lb == 0.0 {
        return Ok(0.0);
    }
    let bbt = b * b.transpose();
    let ctc = c.transpose() * c;
    let at = a.transpose();
    for _ in 0..200 {
        let gamma = (1.0 + 2.0 * REL) * lb;
        let h = linalg::block(&[
            vec![Some(a), Some(&(&bbt / (gamma * gamma)))],
            vec![Some(&-&ctc), Some(&-&at)],
        ]);
        let hn = h.norm();
        let mut omegas: Vec<f64> = linalg::eigenvalues(&h)?
            .into_iter()
            .filter(|z| z.im >= 0.0 && z.re.abs() <= 1e-7 * (hn + z.norm()))
            .map(|z| z.im)
            .collect();
        if omegas.is_empty() {
            return Ok(gamma);
        }
        omegas.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let mut probe = omegas.clone();
        probe.extend(omegas.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        let mut best = lb;
        for &w in &probe {
            best = best.max(gain_at(a, b, c, w)?);
        }
        if best < gamma {
            // candidates were numerical artifacts, γ is above the peak
            return Ok(gamma);
        }
        lb = best;
    }
    Ok((1.0 + 2.0 * REL) * lb)
}

/// Bounded-real-lemma matrix
/// `[[AᵀP + PA, PB, Cᵀ], [BᵀP, −γ²I, 0], [C, 0, −I]]`.
pub fn brl_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, p: &DMatrix<f64>, gamma: f64) -> DMatrix<f64> {
    let tl = a.transpose() * p + p * a;
    let pb = p * b;
    let g2 = DMatrix::identity(b.ncols(), b.ncols()) * (-gamma * gamma);
    let mi = -DMatrix::identity(c.nrows(), c.nrows());
    linalg::block(&[
        vec![Some(&tl), Some(&pb), Some(&c.transpose())],
        vec![Some(&pb.transpose()), Some(&g2), None],
        vec![Some(c), None, Some(&mi)],
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrlOutcome {
    pub feasible: bool,
    /// `−λ_max` of the BRL matrix at the returned `P`; positive iff feasible.
    pub margin: f64,
    #[serde(with = "crate::matrix_json")]
    pub p: DMatrix<f64>,
}

/// Search for `P ≻ 0` with `BRL(P) ≺ 0` at level `γ` by minimizing the
/// largest eigenvalue of the BRL matrix over `P ⪰ 10⁻⁶ I`.
pub fn brl_check(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, gamma: f64) -> Result<BrlOutcome, ModalError> {
    if !(gamma > 0.0) {
        return Err(ModalError::InvalidGamma(gamma));
    }
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n || c.ncols() != n {
        return Err(ModalError::DimensionMismatch(format!(
            "A {:?}, B {:?}, C {:?}",
            a.shape(),
            b.shape(),
            c.shape()
        )));
    }
    let (nd, nz) = (b.ncols(), c.nrows());
    let mut prog = LmiProgram::new();
    let p = prog.sym("P", n);
    let t = prog.scalar("t");
    let eye = |k: usize| DMatrix::identity(k, k);
    prog.constrain(
        LmiConstraint::new("brl", &[n, nd, nz], Sense::NegativeDefinite)
            .non_strict()
            .block(0, 0, p.expr().rmul(a).plus_transpose() - t.times(&eye(n)))
            .block(0, 1, p.expr().rmul(b))
            .block(0, 2, AffineExpr::constant(&c.transpose()))
            .block(1, 1, AffineExpr::constant(&(eye(nd) * (-gamma * gamma))) - t.times(&eye(nd)))
            .block(2, 2, AffineExpr::constant(&-eye(nz)) - t.times(&eye(nz))),
    )?;
    prog.constrain(
        LmiConstraint::new("pos", &[n], Sense::PositiveDefinite)
            .non_strict()
            .block(0, 0, p.expr() - AffineExpr::constant(&(eye(n) * 1e-6))),
    )?;
    prog.minimize(t.expr())?;
    let sol = lmi::solve(&prog, &SolveOptions::default())?;
    let pv = sol.value(p).clone();
    let margin = -linalg::max_sym_eigenvalue(&brl_matrix(a, b, c, &pv, gamma))?;
    let pos = linalg::min_sym_eigenvalue(&pv)? > 0.0;
    Ok(BrlOutcome { feasible: margin > 0.0 && pos, margin, p: pv })
}
