//! Infeasible primal-dual interior-point method for block-diagonal SDPs,
//! using the HKM search direction with a Mehrotra predictor-corrector.
//!
//! The backend treats the LMI problem `min cᵀy s.t. Z = Σ y_k F_k − G ⪰ 0`
//! as the dual of `max ⟨G, X⟩ s.t. ⟨F_k, X⟩ = c_k, X ⪰ 0`, with
//! `G = −F₀`.

use faer::linalg::solvers::Solve;
use faer::{Mat, Side};
use nalgebra::DMatrix;

use super::conic::{add_sym, ConicProblem};
use super::{BackendFailure, SdpBackend, SolveDiagnostics};
use crate::linalg;
use crate::par::{self, Exec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpmSettings {
    pub max_iter: usize,
    /// Relative primal/dual residual target.
    pub tol_feas: f64,
    /// Relative duality-gap target.
    pub tol_gap: f64,
    /// A primal ray with `‖𝒜(X)‖ / ⟨G, X⟩` below this proves infeasibility.
    pub tol_infeas: f64,
    /// Fraction of the distance to the cone boundary taken per step.
    pub step_fraction: f64,
    pub exec: Exec,
}

impl Default for IpmSettings {
    fn default() -> Self {
        Self {
            max_iter: 120,
            tol_feas: 1e-9,
            tol_gap: 1e-8,
            tol_infeas: 1e-8,
            step_fraction: 0.95,
            exec: Exec::default(),
        }
    }
}

/// The native SDP backend.
#[derive(Debug, Clone, Copy, Default)]
pub struct InteriorPoint {
    pub settings: IpmSettings,
}

impl InteriorPoint {
    pub fn new(settings: IpmSettings) -> Self {
        Self { settings }
    }
}

/// One cone with both triangles of every coefficient, sorted by variable.
struct ConeData {
    dim: usize,
    g: DMatrix<f64>,
    /// `(var, row, col, value)`
    entries: Vec<(usize, usize, usize, f64)>,
    /// `entries[var_start[k]..var_start[k + 1]]` belong to variable `k`.
    var_start: Vec<usize>,
}

impl ConeData {
    fn new(c: &super::conic::Cone, m: usize) -> Self {
        let mut g = DMatrix::zeros(c.dim, c.dim);
        add_sym(&mut g, &c.constant, -1.0);
        let mut entries = Vec::new();
        for f in &c.coefficients {
            for &(i, j, v) in &f.entries {
                entries.push((f.var, i, j, v));
                if i != j {
                    entries.push((f.var, j, i, v));
                }
            }
        }
        entries.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));
        let mut var_start = vec![0; m + 1];
        for e in &entries {
            var_start[e.0 + 1] += 1;
        }
        for k in 0..m {
            var_start[k + 1] += var_start[k];
        }
        Self { dim: c.dim, g, entries, var_start }
    }

    fn var_entries(&self, k: usize) -> &[(usize, usize, usize, f64)] {
        &self.entries[self.var_start[k]..self.var_start[k + 1]]
    }
}

struct Problem {
    m: usize,
    c: Vec<f64>,
    cones: Vec<ConeData>,
}

type Block = Vec<DMatrix<f64>>;

impl Problem {
    /// `𝒜(M)_k = Σ_cones tr(F_k M)`.
    fn a_op(&self, mats: &[DMatrix<f64>]) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for (cone, mm) in self.cones.iter().zip(mats) {
            for &(k, a, b, v) in &cone.entries {
                out[k] += v * mm[(b, a)];
            }
        }
        out
    }

    /// `𝒜ᵀ(y) = Σ_k y_k F_k`.
    fn at_op(&self, y: &[f64]) -> Block {
        self.cones
            .iter()
            .map(|cone| {
                let mut s = DMatrix::zeros(cone.dim, cone.dim);
                for &(k, a, b, v) in &cone.entries {
                    s[(a, b)] += v * y[k];
                }
                s
            })
            .collect()
    }

    /// Upper triangle of `O_kl = Σ_cones tr(F_k W F_l X)`, row-major into `o`.
    fn schur(&self, w: &Block, x: &Block, o: &mut [f64], exec: Exec) {
        let m = self.m;
        par::for_each_chunk_mut(exec, o, m, |k, row| {
            row.iter_mut().for_each(|v| *v = 0.0);
            for ((cone, wc), xc) in self.cones.iter().zip(w).zip(x) {
                let fk = cone.var_entries(k);
                if fk.is_empty() {
                    continue;
                }
                let n = cone.dim;
                // Q = X F_k W, column-major
                let mut q = vec![0.0; n * n];
                for &(_, a, b, v) in fk {
                    let xa = xc.column(a);
                    for c in 0..n {
                        let coef = v * wc[(b, c)];
                        if coef != 0.0 {
                            let col = &mut q[c * n..(c + 1) * n];
                            for (d, qd) in col.iter_mut().enumerate() {
                                *qd += coef * xa[d];
                            }
                        }
                    }
                }
                for &(l, c, d, v) in &cone.entries[cone.var_start[k]..] {
                    row[l] += v * q[c * n + d];
                }
            }
        });
    }
}

fn inner(a: &Block, b: &Block) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn frob(a: &Block) -> f64 {
    a.iter().map(|x| x.norm_squared()).sum::<f64>().sqrt()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest `α` with `M + αΔ ⪰ 0` (infinite if `Δ ⪰ 0`).
fn max_step(m: &Block, d: &Block) -> f64 {
    let mut best = f64::INFINITY;
    for (mc, dc) in m.iter().zip(d) {
        let Some(ch) = mc.clone().cholesky() else { return 0.0 };
        let l = ch.l();
        let Some(t) = l.solve_lower_triangular(dc) else { return 0.0 };
        let Some(s) = l.solve_lower_triangular(&t.transpose()) else { return 0.0 };
        let lam = linalg::min_sym_eigenvalue(&s).unwrap_or(f64::NEG_INFINITY);
        if lam < 0.0 {
            best = best.min(-1.0 / lam);
        }
    }
    best
}

struct Direction {
    dy: Vec<f64>,
    dx: Block,
    dz: Block,
}

impl SdpBackend for InteriorPoint {
    fn solve_conic(&self, p: &ConicProblem) -> Result<(Vec<f64>, SolveDiagnostics), BackendFailure> {
        let s = self.settings;
        let m = p.n_vars;
        let prob = Problem {
            m,
            c: p.objective.clone(),
            cones: p.cones.iter().map(|c| ConeData::new(c, m)).collect(),
        };
        let dims: Vec<usize> = prob.cones.iter().map(|c| c.dim).collect();
        let big_n: usize = dims.iter().sum();
        let mut diag = SolveDiagnostics::default();
        if big_n == 0 {
            diag.message = "no constraints".into();
            return if prob.c.iter().all(|&c| c == 0.0) {
                Ok((vec![0.0; m], diag))
            } else {
                diag.message = "objective unbounded without constraints".into();
                Err(BackendFailure::Stalled(diag))
            };
        }

        // starting point
        let mut fnorm = vec![0.0f64; m];
        for cone in &prob.cones {
            for &(k, _, _, v) in &cone.entries {
                fnorm[k] += v * v;
            }
        }
        let fnorm: Vec<f64> = fnorm.into_iter().map(f64::sqrt).collect();
        let g_norm = prob.cones.iter().map(|c| c.g.norm_squared()).sum::<f64>().sqrt();
        let c_norm = norm(&prob.c);
        let nf = big_n as f64;
        let alpha0 = (0..m)
            .map(|k| nf * (1.0 + prob.c[k].abs()) / (1.0 + fnorm[k]))
            .fold(1.0, f64::max);
        let beta0 = (1.0 + fnorm.iter().copied().fold(g_norm, f64::max)) / nf.sqrt();
        let mut x: Block = dims.iter().map(|&d| DMatrix::identity(d, d) * (10.0 * alpha0)).collect();
        let mut z: Block = dims.iter().map(|&d| DMatrix::identity(d, d) * (10.0 * beta0)).collect();
        let mut y = vec![0.0; m];
        let g: Block = prob.cones.iter().map(|c| c.g.clone()).collect();

        let mut o = vec![0.0; m * m];
        let mut last_mu = f64::INFINITY;
        let mut slow = 0usize;

        for it in 0..=s.max_iter {
            diag.iterations = it;
            let mu = inner(&x, &z) / nf;
            let ax = prob.a_op(&x);
            let rp: Vec<f64> = prob.c.iter().zip(&ax).map(|(c, a)| c - a).collect();
            let aty = prob.at_op(&y);
            let rd: Block = aty.iter().zip(&g).zip(&z).map(|((a, g), z)| a - g - z).collect();
            let pobj = inner(&g, &x);
            let dobj = prob.c.iter().zip(&y).map(|(c, y)| c * y).sum::<f64>();
            let pinf = norm(&rp) / (1.0 + c_norm);
            let dinf = frob(&rd) / (1.0 + g_norm);
            let gap = (dobj - pobj).abs() / (1.0 + dobj.abs() + pobj.abs());
            diag.primal_residual = pinf;
            diag.dual_residual = dinf;
            diag.relative_gap = gap;
            diag.mu = mu;

            if pinf < s.tol_feas && dinf < s.tol_feas && gap < s.tol_gap {
                diag.message = "optimal".into();
                return Ok((y, diag));
            }
            if pobj > 0.0 && norm(&ax) / pobj < s.tol_infeas {
                diag.message = format!("primal ray found: ‖𝒜(X)‖/⟨G,X⟩ = {:.2e}", norm(&ax) / pobj);
                return Err(BackendFailure::Infeasible(diag));
            }
            if it == s.max_iter || slow >= 8 {
                return finish_stalled(y, diag, (pobj, dobj, nf), norm(&ax), "iteration limit or stalled progress");
            }

            // W = Z⁻¹
            let mut w = Vec::with_capacity(z.len());
            for zc in &z {
                match zc.clone().cholesky() {
                    Some(ch) => w.push(linalg::symmetrize(&ch.inverse())),
                    None => return finish_stalled(y, diag, (pobj, dobj, nf), norm(&ax), "lost positive definiteness of Z"),
                }
            }

            prob.schur(&w, &x, &mut o, s.exec);
            let Some(chol) = factor_schur(&o, m) else {
                return finish_stalled(y, diag, (pobj, dobj, nf), norm(&ax), "Schur complement factorization failed");
            };

            let wrdx: Block = w.iter().zip(&rd).zip(&x).map(|((w, r), x)| w * r * x).collect();
            let a_wrdx = prob.a_op(&wrdx);

            // ΔX = sym(−X − W ΔZ X + extra)
            let direction = |rhs: Vec<f64>, extra: Option<&Block>| {
                let mut b = Mat::<f64>::from_fn(m, 1, |i, _| rhs[i]);
                chol.solve_in_place(b.as_mut());
                let dy: Vec<f64> = (0..m).map(|i| b[(i, 0)]).collect();
                let dz: Block = prob.at_op(&dy).into_iter().zip(&rd).map(|(a, r)| a + r).collect();
                let dx: Block = (0..dz.len())
                    .map(|j| {
                        let mut t = -&x[j] - &w[j] * &dz[j] * &x[j];
                        if let Some(e) = extra {
                            t += &e[j];
                        }
                        linalg::symmetrize(&t)
                    })
                    .collect();
                Direction { dy, dx, dz }
            };
            let steps = |d: &Direction| {
                let ap = (s.step_fraction * max_step(&x, &d.dx)).min(1.0);
                let ad = (s.step_fraction * max_step(&z, &d.dz)).min(1.0);
                (ap, ad)
            };

            // predictor
            let rhs: Vec<f64> = prob.c.iter().zip(&a_wrdx).map(|(c, a)| -c - a).collect();
            let pred = direction(rhs, None);
            let (ap, ad) = steps(&pred);
            let x_aff: Block = x.iter().zip(&pred.dx).map(|(x, d)| x + d * ap).collect();
            let z_aff: Block = z.iter().zip(&pred.dz).map(|(z, d)| z + d * ad).collect();
            let mu_aff = inner(&x_aff, &z_aff) / nf;
            let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);

            // corrector
            let corr: Block = (0..x.len())
                .map(|j| linalg::symmetrize(&(&w[j] * &pred.dz[j] * &pred.dx[j])))
                .collect();
            let target: Block = w.iter().map(|w| w * (sigma * mu)).collect();
            let mut shift = target.clone();
            for (t, c) in shift.iter_mut().zip(&corr) {
                *t -= c;
            }
            let a_shift = prob.a_op(&shift);
            let rhs: Vec<f64> = (0..m).map(|k| a_shift[k] - prob.c[k] - a_wrdx[k]).collect();
            let cor = direction(rhs, Some(&shift));
            let (ap, ad) = steps(&cor);

            for j in 0..x.len() {
                x[j] += &cor.dx[j] * ap;
                z[j] += &cor.dz[j] * ad;
            }
            for (yk, d) in y.iter_mut().zip(&cor.dy) {
                *yk += ad * d;
            }

            if mu > 0.9 * last_mu && ap.max(ad) < 1e-3 {
                slow += 1;
            } else {
                slow = 0;
            }
            last_mu = last_mu.min(mu);
        }
        unreachable!("loop returns at max_iter")
    }
}

fn factor_schur(o: &[f64], m: usize) -> Option<faer::linalg::solvers::Llt<f64>> {
    let maxd = (0..m).map(|i| o[i * m + i].abs()).fold(0.0, f64::max).max(1e-300);
    let mut reg = 0.0;
    for _ in 0..6 {
        let mat = Mat::<f64>::from_fn(m, m, |i, j| {
            let v = if j >= i { o[i * m + j] } else { o[j * m + i] };
            if i == j {
                v + reg
            } else {
                v
            }
        });
        if let Ok(ch) = mat.llt(Side::Lower) {
            return Some(ch);
        }
        reg = if reg == 0.0 { 1e-14 * maxd } else { reg * 100.0 };
    }
    None
}

fn finish_stalled(
    y: Vec<f64>,
    mut diag: SolveDiagnostics,
    (pobj, dobj, n_total): (f64, f64, f64),
    ax_norm: f64,
    why: &str,
) -> Result<(Vec<f64>, SolveDiagnostics), BackendFailure> {
    // `y` only has to be feasible for the LMIs, which the caller re-checks
    // independently; a vanishing complementarity with a small dual residual
    // means no further progress on the objective is possible.
    let near_optimal = diag.relative_gap < 1e-6 || diag.mu * n_total < 1e-8 * (1.0 + dobj.abs());
    if diag.dual_residual < 1e-7 && diag.primal_residual < 1e-5 && near_optimal {
        diag.message = format!("solved to reduced accuracy ({why})");
        return Ok((y, diag));
    }
    if pobj > 0.0 && ax_norm / pobj < 1e-6 {
        diag.message = format!("approximate primal ray: ‖𝒜(X)‖/⟨G,X⟩ = {:.2e} ({why})", ax_norm / pobj);
        return Err(BackendFailure::Infeasible(diag));
    }
    diag.message = why.to_string();
    Err(BackendFailure::Stalled(diag))
}
