use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use platoon_core::linalg;
use platoon_core::lmi::{self, AffineExpr, LmiConstraint, LmiProgram, Sense, SolveOptions};
use platoon_core::modal::{self, Tolerances};
use platoon_core::ovm::{self, Betas, ClosureMode, Equilibrium, ParamSpread, VehicleParams};
use platoon_core::platoon::{self, build_plant, neighbor_set, platoon_from_params, PerformanceWeights, PlatoonSpec, Road};
use platoon_core::sim::{self, InitialState, Scenario};
use platoon_core::synth::{self, robust, Controller, SynthOptions};

fn betas_strategy(n: usize) -> impl Strategy<Value = Vec<Betas>> {
    prop::collection::vec((0.05..2.0f64, 0.05..3.0f64, 0.05..2.0f64), n - 1)
        .prop_map(|v| v.into_iter().map(|(a, b, c)| Betas::new(a, b, c)).collect())
}

fn plant_strategy() -> impl Strategy<Value = (usize, Vec<Betas>)> {
    (3usize..=12).prop_flat_map(|n| (Just(n), betas_strategy(n)))
}

fn params_strategy() -> impl Strategy<Value = VehicleParams> {
    (0.3..1.0f64, 0.3..1.2f64, 2.0..8.0f64, 25.0..45.0f64, 20.0..35.0f64)
        .prop_map(|(a, t, s0, s1, v)| VehicleParams::new(a, t, s0, s1, v).unwrap())
}

fn stable_triple() -> impl Strategy<Value = (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    (2usize..=5, 1usize..=2, 1usize..=2, 0.1..1.0f64).prop_flat_map(|(n, m, p, margin)| {
        (
            prop::collection::vec(-1.0..1.0f64, n * n),
            prop::collection::vec(-1.0..1.0f64, n * m),
            prop::collection::vec(-1.0..1.0f64, p * n),
        )
            .prop_map(move |(a, b, c)| {
                let mut a = DMatrix::from_vec(n, n, a);
                let shift = linalg::spectral_abscissa(&a).unwrap() + margin;
                for i in 0..n {
                    a[(i, i)] -= shift;
                }
                (a, DMatrix::from_vec(n, m, b), DMatrix::from_vec(p, n, c))
            })
    })
}

fn plant_for(n: usize, road: Road, betas: Vec<Betas>, observed: &[usize]) -> platoon::PlantMatrices {
    let spec = PlatoonSpec::new(n, road, betas, observed).unwrap();
    let eq = Equilibrium { v_star: 15.0, s_star: vec![20.0; n] };
    build_plant(&spec, &eq, &PerformanceWeights::ring_default()).unwrap().matrices
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn desired_speed_is_monotone(p in params_strategy(), a in 0.0..60.0f64, b in 0.0..60.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(ovm::desired_speed(&p, lo) <= ovm::desired_speed(&p, hi));
    }

    #[test]
    fn equilibrium_spacing_inverts_desired_speed(p in params_strategy(), f in 0.01..0.99f64) {
        let v = f * p.v_max;
        let s = ovm::equilibrium_spacing(&p, v).unwrap();
        prop_assert!((ovm::desired_speed(&p, s) - v).abs() <= 1e-9 * p.v_max);
    }

    #[test]
    fn conserved_quantities_are_left_null_vectors((n, betas) in plant_strategy()) {
        let ring = platoon::state_matrix(n, &Road::Ring { length_m: 20.0 * n as f64 }, &betas);
        let rho = DVector::from_fn(2 * n, |r, _| if r % 2 == 0 { 1.0 } else { 0.0 });
        prop_assert_eq!((ring.transpose() * rho).amax(), 0.0);
        let open = platoon::state_matrix(n, &Road::Open, &betas);
        let mut rho = DVector::zeros(2 * n);
        rho[1] = 1.0;
        prop_assert_eq!((open.transpose() * rho).amax(), 0.0);
    }

    #[test]
    fn ring_has_one_uncontrollable_mode_at_origin((n, betas) in plant_strategy()) {
        let m = plant_for(n, Road::Ring { length_m: 20.0 * n as f64 }, betas, &[1]);
        let tol = Tolerances { rank_tol_rel: 1e-12, ..Tolerances::default() };
        let r = modal::pbh_report(&m.a, &m.b, &m.c, &tol).unwrap();
        let unc: Vec<_> = r.modes.iter().filter(|md| !md.controllable).collect();
        prop_assert_eq!(unc.iter().map(|md| md.uncontrollable_dim).sum::<usize>(), 1);
        prop_assert!(unc[0].lambda().norm() < 1e-7);
        prop_assert!(r.modes.iter().filter(|md| md.re >= 0.0).all(|md| md.observable));
    }

    #[test]
    fn open_road_is_stabilizable_and_detectable((n, betas) in plant_strategy()) {
        let m = plant_for(n, Road::Open, betas, &[1]);
        let r = modal::pbh_report(&m.a, &m.b, &m.c, &Tolerances::default()).unwrap();
        prop_assert!(r.modes.iter().filter(|md| md.re >= 0.0).all(|md| md.controllable && md.observable));
    }

    #[test]
    fn pbh_verdicts_ignore_input_scaling((n, betas) in plant_strategy(), c in 0.1..10.0f64) {
        // Near the default threshold a weakly controllable mode can flip
        // with the input scale, so compare exact structure.
        let m = plant_for(n, Road::Ring { length_m: 20.0 * n as f64 }, betas, &[1]);
        let tol = Tolerances { rank_tol_rel: 1e-12, ..Tolerances::default() };
        let r1 = modal::pbh_report(&m.a, &m.b, &m.c, &tol).unwrap();
        let r2 = modal::pbh_report(&m.a, &(&m.b * c), &m.c, &tol).unwrap();
        let v1: Vec<bool> = r1.modes.iter().map(|md| md.controllable).collect();
        let v2: Vec<bool> = r2.modes.iter().map(|md| md.controllable).collect();
        prop_assert_eq!(v1, v2);
    }

    #[test]
    fn reduction_maps_are_inverse(n in 2usize..30) {
        let (t_reduce, t_lift) = platoon::reduction_maps(n);
        prop_assert_eq!(t_reduce * t_lift, DMatrix::identity(2 * n - 1, 2 * n - 1));
    }

    #[test]
    fn hinf_bounds_every_frequency((a, b, c) in stable_triple(), w in 0.0..50.0f64) {
        let h = modal::hinf_norm(&a, &b, &c).unwrap();
        prop_assert!(modal::gain_at(&a, &b, &c, w).unwrap() <= h * (1.0 + 1e-9));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn hinf_matches_a_dense_sweep((a, b, c) in stable_triple()) {
        let h = modal::hinf_norm(&a, &b, &c).unwrap();
        let mut sweep = modal::gain_at(&a, &b, &c, 0.0).unwrap();
        for k in 0..10_000 {
            let w = 10f64.powf(-3.0 + 6.0 * k as f64 / 9_999.0);
            sweep = sweep.max(modal::gain_at(&a, &b, &c, w).unwrap());
        }
        prop_assert!((h - sweep).abs() <= 1e-3 * sweep, "hinf {} sweep {}", h, sweep);
    }

    #[test]
    fn brl_certificate_bounds_the_norm((a, b, c) in stable_triple(), g in 0.5..3.0f64) {
        let h = modal::hinf_norm(&a, &b, &c).unwrap();
        let out = modal::brl_check(&a, &b, &c, g * h).unwrap();
        if out.feasible {
            prop_assert!(h <= g * h * (1.0 + 1e-6));
            prop_assert!(linalg::max_sym_eigenvalue(&modal::brl_matrix(&a, &b, &c, &out.p, g * h)).unwrap() < 0.0);
        }
        if g > 1.05 {
            prop_assert!(out.feasible);
        }
        if g < 0.95 {
            prop_assert!(!out.feasible);
        }
    }

    #[test]
    fn lmi_assembly_and_verification_are_reproducible((a, _, _) in stable_triple()) {
        let n = a.nrows();
        let mut prog = LmiProgram::new();
        let p = prog.sym("P", n);
        prog.constrain(
            LmiConstraint::new("lyap", &[n], Sense::NegativeDefinite).block(0, 0, p.expr().lmul(&a.transpose()).plus_transpose()),
        )
        .unwrap();
        prog.constrain(
            LmiConstraint::new("floor", &[n], Sense::PositiveDefinite).non_strict().block(0, 0, p.expr() - AffineExpr::identity(n)),
        )
        .unwrap();
        let ones = DMatrix::from_element(n, 1, 1.0);
        prog.minimize(p.expr().lmul(&ones.transpose()).rmul(&ones)).unwrap();
        let opts = SolveOptions::default();
        prop_assert_eq!(prog.assemble(&opts).unwrap(), prog.assemble(&opts).unwrap());
        let sol = lmi::solve(&prog, &opts).unwrap();
        prop_assert!((prog.max_violation(sol.all_values()) - sol.max_violation).abs() <= 1e-10);
        prop_assert!(sol.max_violation <= 1e-6);
    }
}

fn ring_scenario(params: Vec<VehicleParams>, spread: f64, seed: u64, horizon_s: f64, dt_s: f64) -> Scenario {
    let n = params.len();
    Scenario {
        road: Road::Ring { length_m: 20.0 * n as f64 },
        vehicles: params,
        v_star_mps: 15.0,
        init: InitialState::Uniform { velocity_mps: 15.0, velocity_spread_mps: spread },
        disturbances: Vec::new(),
        horizon_s,
        dt_s,
        seed,
    }
}

fn drivers_strategy() -> impl Strategy<Value = Vec<VehicleParams>> {
    (3usize..=8, any::<u64>()).prop_map(|(n, seed)| ovm::sample_params(&VehicleParams::nominal(), &ParamSpread::ring_default(), n, seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ring_spacings_close_at_every_step(params in drivers_strategy(), spread in 0.0..6.0f64, seed in any::<u64>()) {
        let sc = ring_scenario(params, spread, seed, 30.0, 0.01);
        let traj = match sim::simulate(&sc, None) {
            Ok(t) => t,
            Err(sim::SimError::Collision { trajectory, .. }) => *trajectory,
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        prop_assert!(traj.closure_error() <= 1e-9 * 20.0 * traj.n as f64);
    }

    #[test]
    fn runs_are_deterministic(params in drivers_strategy(), seed in any::<u64>()) {
        let sc = ring_scenario(params, 3.0, seed, 10.0, 0.01);
        prop_assert_eq!(sim::simulate(&sc, None), sim::simulate(&sc, None));
    }

    #[test]
    fn halving_the_step_barely_moves_the_end_state(params in drivers_strategy(), seed in any::<u64>()) {
        let coarse = sim::simulate(&ring_scenario(params.clone(), 0.5, seed, 10.0, 0.01), None).unwrap();
        let fine = sim::simulate(&ring_scenario(params, 0.5, seed, 10.0, 0.005), None).unwrap();
        prop_assume!(coarse.events.is_empty() && fine.events.is_empty());
        let (a, b) = (coarse.len() - 1, fine.len() - 1);
        for i in 0..coarse.n {
            let dv = (coarse.v[a][i] - fine.v[b][i]).abs() / fine.v[b][i].abs().max(1.0);
            let dp = (coarse.p[a][i] - fine.p[b][i]).abs() / fine.p[b][i].abs().max(1.0);
            prop_assert!(dv < 1e-4 && dp < 1e-4, "vehicle {}: dv {:e} dp {:e}", i + 1, dv, dp);
        }
    }
}

const LIN_N: usize = 4;

fn small_ring_controller() -> &'static Controller {
    static K: OnceLock<Controller> = OnceLock::new();
    K.get_or_init(|| {
        let plant = platoon_from_params(
            &vec![VehicleParams::nominal(); LIN_N],
            Road::Ring { length_m: 20.0 * LIN_N as f64 },
            ovm::desired_speed(&VehicleParams::nominal(), 20.0),
            ClosureMode::FixedVStar,
            &neighbor_set(LIN_N, 1),
            &PerformanceWeights::ring_default(),
        )
        .unwrap();
        synth::synthesize_platoon(&plant, false, &SynthOptions::default()).unwrap().controller
    })
}

fn rk4_linear(a: &DMatrix<f64>, x0: &DVector<f64>, dt: f64, steps: usize) -> Vec<DVector<f64>> {
    let mut out = vec![x0.clone()];
    let mut x = x0.clone();
    for _ in 0..steps {
        let k1 = a * &x;
        let k2 = a * (&x + &k1 * (dt / 2.0));
        let k3 = a * (&x + &k2 * (dt / 2.0));
        let k4 = a * (&x + &k3 * dt);
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        out.push(x.clone());
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn small_deviations_follow_the_linearization(dev in prop::collection::vec(-1.0..1.0f64, 2 * LIN_N)) {
        let k = small_ring_controller();
        let p = VehicleParams::nominal();
        let v_star = k.meta.v_star_mps;
        let scale = 1e-4;
        // spacing deviations must sum to zero on the ring
        let mean_s = (0..LIN_N).map(|i| dev[2 * i]).sum::<f64>() / LIN_N as f64;
        let x0 = DVector::from_fn(2 * LIN_N, |r, _| scale * if r % 2 == 0 { dev[r] - mean_s } else { dev[r] });
        let sc = Scenario {
            road: Road::Ring { length_m: 20.0 * LIN_N as f64 },
            vehicles: vec![p; LIN_N],
            v_star_mps: v_star,
            init: InitialState::Explicit {
                spacing_m: (0..LIN_N).map(|i| 20.0 + x0[2 * i]).collect(),
                velocity_mps: (0..LIN_N).map(|i| v_star + x0[2 * i + 1]).collect(),
            },
            disturbances: Vec::new(),
            horizon_s: 10.0,
            dt_s: 0.01,
            seed: 0,
        };
        let traj = sim::simulate(&sc, Some(k)).unwrap();
        prop_assert!(traj.events.is_empty(), "{:?}", &traj.events[..traj.events.len().min(5)]);

        let plant = platoon_from_params(
            &vec![p; LIN_N],
            sc.road,
            v_star,
            ClosureMode::FixedVStar,
            &k.meta.observed,
            &PerformanceWeights::ring_default(),
        )
        .unwrap();
        let (acl, _, _) = synth::closed_loop(&plant.matrices, &plant.matrices.a, &k.a_k, &k.b_k, &k.c_k);
        let mut z0 = DVector::zeros(acl.nrows());
        z0.rows_mut(0, 2 * LIN_N).copy_from(&x0);
        let lin = rk4_linear(&acl, &z0, 0.001, 10_000);
        let peak = lin.iter().map(|z| z.rows(0, 2 * LIN_N).amax()).fold(0.0, f64::max);
        let mut worst: f64 = 0.0;
        for step in (0..traj.len()).step_by(10) {
            let z = &lin[step * 10];
            worst = worst.max((traj.deviation(step) - z.rows(0, 2 * LIN_N)).amax());
        }
        prop_assert!(worst < 1e-2 * peak, "deviation error {:e} vs peak {:e}", worst, peak);
    }
}

fn small_ring_plant(seed: u64) -> (platoon::LinearizedPlatoon, Vec<VehicleParams>) {
    let params = ovm::sample_params(&VehicleParams::nominal(), &ParamSpread::ring_default(), 3, seed);
    let plant = platoon_from_params(
        &params,
        Road::Ring { length_m: 60.0 },
        15.0,
        ClosureMode::FixedVStar,
        &[1, 2, 3],
        &PerformanceWeights::ring_default(),
    )
    .unwrap();
    (plant, params)
}

#[test]
fn enlarging_uncertainty_never_lowers_robust_gamma() {
    let opts = SynthOptions::default();
    for seed in 0..10 {
        let (plant, params) = small_ring_plant(seed);
        let base = ParamSpread::ring_default().scaled(0.05);
        let (small, _) = robust::synthesize_platoon_robust(&plant, &params, &base, false, &opts).unwrap();
        let (large, _) = robust::synthesize_platoon_robust(&plant, &params, &base.scaled(2.0), false, &opts).unwrap();
        assert!(
            large.gamma >= small.gamma * (1.0 - 1e-6),
            "seed {seed}: gamma {} at 2x ranges < {}",
            large.gamma,
            small.gamma
        );
    }
}

#[test]
fn robust_gamma_dominates_nominal_on_the_midpoint_plant() {
    let (plant, params) = small_ring_plant(3);
    let (r, unc) =
        robust::synthesize_platoon_robust(&plant, &params, &ParamSpread::ring_default().scaled(0.1), false, &SynthOptions::default())
            .unwrap();
    let reduced = platoon::reduce_ring(&plant).unwrap().matrices;
    let mid = platoon::PlantMatrices { a: unc.a_nominal.clone(), ..reduced };
    let nominal = synth::synthesize_nominal(&mid, &SynthOptions::default()).unwrap();
    assert!(r.gamma >= nominal.gamma * (1.0 - 1e-6), "robust {} < nominal {}", r.gamma, nominal.gamma);
}

#[test]
fn vanishing_ranges_recover_the_nominal_gamma() {
    let (plant, _) = small_ring_plant(5);
    let m = platoon::reduce_ring(&plant).unwrap().matrices;
    let a_min = m.a.map(|x| x - 0.5e-9);
    let a_max = m.a.map(|x| x + 0.5e-9);
    let unc = robust::build_uncertainty(&a_min, &a_max).unwrap();
    assert!(unc.rho_varrho > 0.0);
    let opts = SynthOptions::default();
    let rob = robust::synthesize_robust(&m, &unc, &opts).unwrap();
    let nom = synth::synthesize_nominal(&m, &opts).unwrap();
    assert!(!rob.diagnostics.routed_to_nominal);
    assert!((rob.gamma - nom.gamma).abs() <= 0.05 * nom.gamma, "robust {} nominal {}", rob.gamma, nom.gamma);
}
