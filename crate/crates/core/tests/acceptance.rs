//! Acceptance suite: one PASS/FAIL line per criterion on stderr.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use platoon_core::linalg;
use platoon_core::lmi::{self, LmiConstraint, LmiProgram, Sense, SolveOptions};
use platoon_core::modal::{self, Tolerances};
use platoon_core::ovm::{self, Betas, ClosureMode, Equilibrium, ParamSpread, VehicleParams};
use platoon_core::par::Exec;
use platoon_core::platoon::{
    self, build_plant, neighbor_set, platoon_from_params, LinearizedPlatoon, PerformanceWeights, PlatoonSpec, Road,
};
use platoon_core::sim::{self, Disturbance, InitialState, Scenario};
use platoon_core::synth::{self, robust, SynthOptions, SynthesisResult};

const N: usize = 20;
const RING_M: f64 = 400.0;

fn report(criterion: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {criterion}: {verdict} | {detail}");
}

fn ring_drivers() -> Vec<VehicleParams> {
    ovm::sample_params(&VehicleParams::nominal(), &ParamSpread::ring_default(), N, 1)
}

fn ring_plant(v_star: f64) -> LinearizedPlatoon {
    platoon_from_params(
        &ring_drivers(),
        Road::Ring { length_m: RING_M },
        v_star,
        ClosureMode::FixedVStar,
        &neighbor_set(N, 5),
        &PerformanceWeights::ring_default(),
    )
    .unwrap()
}

struct Design {
    result: SynthesisResult,
    seconds: f64,
}

/// Reduced-ring nominal designs, computed once per speed.
fn design(v_star: f64) -> &'static Result<Design, String> {
    static CELLS: [OnceLock<Result<Design, String>>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    let idx = match v_star as u32 {
        14 => 0,
        15 => 1,
        16 => 2,
        _ => panic!("no cached design for v* = {v_star}"),
    };
    CELLS[idx].get_or_init(|| {
        let t = Instant::now();
        synth::synthesize_platoon(&ring_plant(v_star), false, &SynthOptions::default())
            .map(|result| Design { result, seconds: t.elapsed().as_secs_f64() })
            .map_err(|e| e.to_string())
    })
}

fn stop_and_go_scenario(v_star: f64) -> Scenario {
    Scenario {
        road: Road::Ring { length_m: RING_M },
        vehicles: ring_drivers(),
        v_star_mps: v_star,
        init: InitialState::Uniform { velocity_mps: 15.0, velocity_spread_mps: 4.0 },
        disturbances: Vec::new(),
        horizon_s: 100.0,
        dt_s: 0.01,
        seed: 7,
    }
}

fn braking_scenario() -> Scenario {
    Scenario {
        init: InitialState::Equilibrium { velocity_spread_mps: 0.0 },
        disturbances: vec![Disturbance { vehicle: 7, start_s: 20.0, duration_s: 3.0, accel_mps2: -3.0 }],
        ..stop_and_go_scenario(15.0)
    }
}

fn random_betas(rng: &mut ChaCha8Rng, n: usize) -> Vec<Betas> {
    (1..n)
        .map(|_| Betas::new(rng.random_range(0.05..2.0), rng.random_range(0.05..3.0), rng.random_range(0.05..2.0)))
        .collect()
}

#[test]
fn criterion_1_structural_properties() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let tol = Tolerances::default();
    let exact_tol = Tolerances { rank_tol_rel: 1e-12, ..tol };
    let mut loose_flags = 0;
    let mut failures = Vec::new();
    let draws = 120;
    for k in 0..draws {
        let n = 3 + k % 10;
        let betas = random_betas(&mut rng, n);
        let eq = Equilibrium { v_star: 15.0, s_star: vec![20.0; n] };
        for road in [Road::Ring { length_m: 20.0 * n as f64 }, Road::Open] {
            let spec = PlatoonSpec::new(n, road, betas.clone(), &[1]).unwrap();
            let plant = build_plant(&spec, &eq, &PerformanceWeights::ring_default()).unwrap();
            let m = &plant.matrices;
            let r = modal::pbh_report(&m.a, &m.b, &m.c, &tol).unwrap();
            let uncontrollable: Vec<_> = r.modes.iter().filter(|md| !md.controllable).collect();
            let ok_ctrb = if road.is_ring() {
                if uncontrollable.iter().map(|md| md.uncontrollable_dim).sum::<usize>() > 1 {
                    loose_flags += 1;
                }
                // exact count: stable modes can be weakly controllable, far above roundoff
                let exact = modal::pbh_report(&m.a, &m.b, &m.c, &exact_tol).unwrap();
                let unc: Vec<_> = exact.modes.iter().filter(|md| !md.controllable).collect();
                let dims: usize = unc.iter().map(|md| md.uncontrollable_dim).sum();
                dims == 1 && unc[0].lambda().norm() < 1e-7
            } else {
                uncontrollable.iter().all(|md| md.re < 0.0)
            };
            let ok_obsv = r.modes.iter().filter(|md| md.re >= 0.0).all(|md| md.observable);
            if !(ok_ctrb && ok_obsv) {
                failures.push(format!("draw {k} n={n} {}: ctrb {ok_ctrb} obsv {ok_obsv}", road.name()));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 30.0;
    report(
        1,
        pass,
        &format!(
            "{draws} draws x 2 roads, n in 3..=12, ring rank tol 1e-12*|A|_F ({loose_flags} ring draws show extra weakly \
             controllable stable modes at the default 1e-7), {} failures, {secs:.1} s (limit 30 s) {failures:?}",
            failures.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_linearization_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let p = VehicleParams::new(
            rng.random_range(0.3..1.0),
            rng.random_range(0.3..1.2),
            rng.random_range(2.0..8.0),
            rng.random_range(25.0..45.0),
            rng.random_range(20.0..35.0),
        )
        .unwrap();
        let span = p.s_go - p.s_st;
        let s = p.s_st + span * rng.random_range(0.02..0.98);
        let v = ovm::desired_speed(&p, s);
        let b = ovm::linearize(&p, &Equilibrium { v_star: v, s_star: vec![s] }, 1).unwrap();
        let h = 1e-4;
        let d_s = (ovm::acceleration(&p, v, s + h, 0.0) - ovm::acceleration(&p, v, s - h, 0.0)) / (2.0 * h);
        let d_v = (ovm::acceleration(&p, v + h, s, 0.0) - ovm::acceleration(&p, v - h, s, 0.0)) / (2.0 * h);
        let d_sd = (ovm::acceleration(&p, v, s, h) - ovm::acceleration(&p, v, s, -h)) / (2.0 * h);
        for (analytic, fd) in [(b.beta1, d_s), (b.beta2, d_sd - d_v), (b.beta3, d_sd)] {
            worst = worst.max((analytic - fd).abs() / analytic.abs().max(1.0));
        }
    }
    let pass = worst < 1e-5;
    report(2, pass, &format!("1000 samples, worst scaled |beta - FD| = {worst:.2e} (limit 1e-5)"));
    assert!(pass);
}

#[test]
fn criterion_3_nominal_synthesis() {
    let d = match design(15.0) {
        Ok(d) => d,
        Err(e) => {
            report(3, false, &format!("synthesis failed: {e}"));
            panic!("{e}");
        }
    };
    let r = &d.result;
    let reduced = platoon::reduce_ring(&ring_plant(15.0)).unwrap().matrices;
    let k = &r.controller;
    let (acl, bcl, ccl) = synth::closed_loop(&reduced, &reduced.a, &k.a_k, &k.b_k, &k.c_k);
    let abscissa = linalg::spectral_abscissa(&acl).unwrap();
    let hinf = modal::hinf_norm(&acl, &bcl, &ccl).unwrap();
    let p = r.certificate().unwrap();
    let p_min = linalg::min_sym_eigenvalue(&linalg::symmetrize(&p)).unwrap();
    let brl = modal::brl_matrix(&acl, &bcl, &ccl, &p, r.gamma);
    let violation = linalg::max_sym_eigenvalue(&linalg::symmetrize(&brl)).unwrap().max(0.0).max(-p_min);
    let pass = abscissa < 0.0 && hinf <= r.gamma * 1.01 && violation < 1e-6 && d.seconds < 300.0;
    report(
        3,
        pass,
        &format!(
            "gamma {:.5}, order {}, abscissa {abscissa:.4}, ||T_zd|| {hinf:.5} (<= {:.5}), certificate violation {violation:.2e} (< 1e-6), {:.1} s (< 300 s)",
            r.gamma,
            k.order(),
            r.gamma * 1.01,
            d.seconds
        ),
    );
    assert!(pass);
}

/// Smallest real `ΔA` that leaves `(A + ΔA, B)` with an uncontrollable
/// eigenvalue at the origin: `ΔA = −w wᵀA` for the unit `w ⊥ B` minimizing
/// `‖wᵀA‖`.
fn uncontrollability_witness(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let qr = b.clone().qr();
    let q_full = qr.q().resize(n, n, 0.0);
    // complete B's column space to an orthonormal basis and keep the complement
    let mut basis = DMatrix::<f64>::identity(n, n);
    basis.columns_mut(0, b.ncols()).copy_from(&q_full.columns(0, b.ncols()));
    let q = basis.qr().q();
    let comp = q.columns(b.ncols(), n - b.ncols()).into_owned();
    let m = comp.transpose() * a;
    let svd = m.clone().svd(true, false);
    let (i_min, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .unwrap();
    let z = svd.u.unwrap().column(i_min).into_owned();
    let w = &comp * z;
    -(&w * (w.transpose() * a))
}

#[test]
fn criterion_4_robust_synthesis() {
    let drivers = vec![VehicleParams::nominal(); N];
    let plant = platoon_from_params(
        &drivers,
        Road::Ring { length_m: RING_M },
        15.0,
        ClosureMode::FixedVStar,
        &neighbor_set(N, 5),
        &PerformanceWeights::ring_default(),
    )
    .unwrap();
    let opts = SynthOptions { robust_samples: 50, ..SynthOptions::default() };
    let unc = robust::platoon_uncertainty(&plant, &drivers, &ParamSpread::ring_default(), true).unwrap();
    let reduced = platoon::reduce_ring(&plant).unwrap().matrices;
    match robust::synthesize_platoon_robust(&plant, &drivers, &ParamSpread::ring_default(), false, &opts) {
        Ok((r, unc)) => {
            let k = &r.controller;
            let mut worst: f64 = 0.0;
            let mut all_ok = true;
            for s in 0..50 {
                let f = robust::sample_contraction(unc.a_nominal.nrows(), 10_000 + s);
                let (acl, bcl, ccl) = synth::closed_loop(&reduced, &unc.perturbed(&f), &k.a_k, &k.b_k, &k.c_k);
                let stable = linalg::spectral_abscissa(&acl).unwrap() < 0.0;
                let h = if stable { modal::hinf_norm(&acl, &bcl, &ccl).unwrap() } else { f64::INFINITY };
                worst = worst.max(h);
                all_ok &= stable && h <= r.gamma * 1.01;
            }
            let nominal_plant = platoon::PlantMatrices { a: unc.a_nominal.clone(), ..reduced.clone() };
            let nominal = synth::synthesize_nominal(&nominal_plant, &SynthOptions::default()).unwrap();
            let pass = all_ok && r.gamma >= nominal.gamma;
            report(
                4,
                pass,
                &format!(
                    "gamma_robust {:.5}, worst sampled ||T_zd|| {worst:.5}, gamma_nominal(A_N) {:.5}",
                    r.gamma, nominal.gamma
                ),
            );
            assert!(pass);
        }
        Err(e) => {
            // Explain the infeasibility: an admissible perturbation that no
            // controller can stabilize.
            let da = uncontrollability_witness(&unc.a_nominal, &reduced.b);
            let f = &da / unc.rho_varrho;
            let f_norm = linalg::spectral_norm(&f).unwrap();
            let perturbed = unc.perturbed(&f);
            let rep = modal::pbh_report(&perturbed, &reduced.b, &reduced.c, &Tolerances::default()).unwrap();
            let frozen = rep.uncontrollable_at_origin + rep.uncontrollable_unstable;
            report(
                4,
                false,
                &format!(
                    "robust LMIs infeasible ({e}); rho*varrho = {:.4}, yet F = dA/(rho*varrho) with ||F|| = {f_norm:.4} <= 1 \
                     gives A_N + LFR {frozen} uncontrollable eigenvalue(s) with Re >= 0, so no controller meets the criterion",
                    unc.rho_varrho
                ),
            );
            panic!("robust synthesis infeasible: {e}");
        }
    }
}

#[test]
fn criterion_5_stop_and_go() {
    let base = stop_and_go_scenario(15.0);
    let hdv = sim::simulate(&base, None).map(|t| t.velocity_amplitude(80.0));
    let mut detail = format!("all-HDV amplitude over [80,100] s: {hdv:?} (> 1 m/s)");
    let mut pass = matches!(hdv, Ok(a) if a > 1.0);
    for v_star in [14.0, 15.0, 16.0] {
        let dev = match design(v_star) {
            Ok(d) => sim::simulate(&stop_and_go_scenario(v_star), Some(&d.result.controller))
                .map(|t| t.max_velocity_deviation(v_star, 60.0))
                .map_err(|e| e.to_string()),
            Err(e) => Err(e.clone()),
        };
        pass &= matches!(dev, Ok(x) if x < 0.1);
        detail.push_str(&format!("; v*={v_star}: max |v - v*| for t >= 60 s = {dev:?} (< 0.1)"));
    }
    report(5, pass, &detail);
    assert!(pass);
}

#[test]
fn criterion_6_braking_pulse() {
    let sc = braking_scenario();
    let w = PerformanceWeights::ring_default();
    let without = sim::simulate(&sc, None).unwrap();
    let k = &design(15.0).as_ref().expect("nominal design").result.controller;
    let with = sim::simulate(&sc, Some(k)).unwrap();
    let (m0, m1) = (sim::compute_metrics(&without, &without.eq, &w), sim::compute_metrics(&with, &with.eq, &w));
    let closure = without.closure_error().max(with.closure_error());
    let pass = m1.quadratic_cost < m0.quadratic_cost
        && m1.max_spacing_error_cav < m0.max_spacing_error_cav
        && closure <= 4e-7;
    report(
        6,
        pass,
        &format!(
            "cost {:.4} vs {:.4} without CAV, max CAV spacing error {:.4} vs {:.4} m, ring closure error {closure:.2e} m (<= 4e-7)",
            m1.quadratic_cost, m0.quadratic_cost, m1.max_spacing_error_cav, m0.max_spacing_error_cav
        ),
    );
    assert!(pass);
}

fn random_stable(rng: &mut ChaCha8Rng) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let n = rng.random_range(2..=6);
    let (m, p) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let mut g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let shift = linalg::spectral_abscissa(&g).unwrap() + rng.random_range(0.2..1.0);
    for i in 0..n {
        g[(i, i)] -= shift;
    }
    let b = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
    let c = DMatrix::from_fn(p, n, |_, _| rng.random_range(-1.0..1.0));
    (g, b, c)
}

#[test]
fn criterion_7_numerical_infrastructure() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_rel: f64 = 0.0;
    for _ in 0..20 {
        let (a, b, c) = random_stable(&mut rng);
        let h = modal::hinf_norm(&a, &b, &c).unwrap();
        let mut sweep = modal::gain_at(&a, &b, &c, 0.0).unwrap();
        for k in 0..9_999 {
            let w = 10f64.powf(-3.0 + 6.0 * k as f64 / 9_998.0);
            sweep = sweep.max(modal::gain_at(&a, &b, &c, w).unwrap());
        }
        worst_rel = worst_rel.max((h - sweep).abs() / sweep);
    }

    // LMI solutions checked by dense evaluation of the constraints
    let mut worst_violation: f64 = 0.0;
    let mut worst_lyap: f64 = f64::NEG_INFINITY;
    for _ in 0..5 {
        let (a, _, _) = random_stable(&mut rng);
        let n = a.nrows();
        let mut prog = LmiProgram::new();
        let p = prog.sym("P", n);
        let lyap = p.expr().lmul(&a.transpose()).plus_transpose();
        prog.constrain(LmiConstraint::new("lyap", &[n], Sense::NegativeDefinite).block(0, 0, lyap)).unwrap();
        prog.constrain(
            LmiConstraint::new("pos", &[n], Sense::PositiveDefinite)
                .non_strict()
                .block(0, 0, p.expr() - lmi::AffineExpr::identity(n)),
        )
        .unwrap();
        prog.minimize(p.expr().lmul(&DMatrix::from_element(1, n, 1.0)).rmul(&DMatrix::from_element(n, 1, 1.0))).unwrap();
        let sol = lmi::solve(&prog, &SolveOptions::default()).unwrap();
        worst_violation = worst_violation.max(sol.max_violation);
        let pv = sol.value(p);
        worst_lyap = worst_lyap.max(linalg::max_sym_eigenvalue(&(a.transpose() * pv + pv * &a)).unwrap());
    }
    let synth_violation = design(15.0).as_ref().map(|d| d.result.diagnostics.lmi_max_violation).unwrap_or(f64::INFINITY);
    worst_violation = worst_violation.max(synth_violation);

    let sc = braking_scenario();
    let k = &design(15.0).as_ref().expect("nominal design").result.controller;
    let first = sim::simulate(&sc, Some(k)).unwrap();
    let batch = sim::simulate_many(&[sc.clone(), sc.clone()], Some(k), Exec::Parallel);
    let seq = sim::simulate_many(std::slice::from_ref(&sc), Some(k), Exec::Sequential);
    let reproducible = batch.iter().chain(seq.iter()).all(|r| r.as_ref().ok() == Some(&first));

    let pass = worst_rel < 1e-3 && worst_violation < 1e-6 && worst_lyap < 0.0 && reproducible;
    report(
        7,
        pass,
        &format!(
            "hinf vs 1e4-point sweep worst rel diff {worst_rel:.2e} (< 1e-3); LMI re-check violation {worst_violation:.2e} (< 1e-6), \
             Lyapunov max eig {worst_lyap:.2e}; bit-reproducible sims {reproducible}"
        ),
    );
    assert!(pass);
}
