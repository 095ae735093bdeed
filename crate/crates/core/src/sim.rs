//! Nonlinear closed-loop simulation of a mixed platoon.
//!
//! Human drivers follow the OVM, vehicle 1 is driven by an optional dynamic
//! controller, and every vehicle has an automatic brake plus acceleration
//! limits. Vehicles, leader (open road) and controller state are advanced
//! together with fixed-step RK4.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ovm::{self, ClosureMode, Equilibrium, OvmError, VehicleParams};
use crate::par::{self, Exec};
use crate::platoon::{PerformanceWeights, Road};
use crate::synth::Controller;

/// Hardest braking (m/s²).
pub const A_MIN: f64 = -5.0;
/// Strongest acceleration (m/s²).
pub const A_MAX: f64 = 2.0;
/// Velocity band used by the settling metric (m/s).
pub const SETTLE_BAND_MPS: f64 = 0.1;

pub const FLAG_BRAKE: u8 = 1;
pub const FLAG_SAT_LOW: u8 = 2;
pub const FLAG_SAT_HIGH: u8 = 4;
pub const FLAG_STOPPED: u8 = 8;

fn default_dt() -> f64 {
    0.01
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Ovm(#[from] OvmError),
    #[error("collision: vehicle {vehicle} reached spacing {spacing_m:.4} m at t = {t_s:.2} s")]
    Collision {
        vehicle: usize,
        t_s: f64,
        spacing_m: f64,
        /// Everything up to and including the colliding step.
        trajectory: Box<Trajectory>,
    },
    /// The state stopped being finite, typically a controller too stiff for
    /// the chosen `dt_s`.
    #[error("simulation diverged at t = {t_s:.2} s (non-finite state)")]
    Diverged { t_s: f64, trajectory: Box<Trajectory> },
}

/// Acceleration pulse added to one vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Disturbance {
    /// 1-based vehicle id.
    pub vehicle: usize,
    pub start_s: f64,
    pub duration_s: f64,
    pub accel_mps2: f64,
}

impl Disturbance {
    fn active(&self, t: f64) -> bool {
        t >= self.start_s && t < self.start_s + self.duration_s
    }
}

/// How the platoon starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialState {
    /// Equilibrium spacings; velocities `v* + U[−spread, spread]`.
    Equilibrium { velocity_spread_mps: f64 },
    /// Equal spacings (`D/n` on a ring, the mean equilibrium spacing on an
    /// open road); velocities `velocity_mps + U[−spread, spread]`.
    Uniform { velocity_mps: f64, velocity_spread_mps: f64 },
    /// Every spacing and velocity given (vehicle 1 first).
    Explicit { spacing_m: Vec<f64>, velocity_mps: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub road: Road,
    /// Driver parameters, vehicle 1 first. Vehicle 1 uses its entry only
    /// when it runs without a controller.
    pub vehicles: Vec<VehicleParams>,
    pub v_star_mps: f64,
    pub init: InitialState,
    #[serde(default)]
    pub disturbances: Vec<Disturbance>,
    pub horizon_s: f64,
    #[serde(default = "default_dt")]
    pub dt_s: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Scenario {
    pub fn n(&self) -> usize {
        self.vehicles.len()
    }

    pub fn steps(&self) -> usize {
        (self.horizon_s / self.dt_s).round() as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let n = self.n();
        let cfg = |m: String| Err(SimError::Config(m));
        if n < 2 {
            return cfg(format!("need at least 2 vehicles, got {n}"));
        }
        if !(self.dt_s > 0.0 && self.dt_s.is_finite()) {
            return cfg(format!("dt must be > 0, got {}", self.dt_s));
        }
        if !(self.horizon_s > 0.0 && self.horizon_s.is_finite()) {
            return cfg(format!("horizon must be > 0, got {}", self.horizon_s));
        }
        if !(self.v_star_mps > 0.0 && self.v_star_mps.is_finite()) {
            return cfg(format!("v* must be > 0, got {}", self.v_star_mps));
        }
        if let Road::Ring { length_m } = self.road {
            if !(length_m > 0.0) {
                return cfg(format!("ring length must be > 0, got {length_m}"));
            }
        }
        for p in &self.vehicles {
            p.validate()?;
        }
        for d in &self.disturbances {
            if d.vehicle == 0 || d.vehicle > n {
                return cfg(format!("disturbance on vehicle {} not in 1..={n}", d.vehicle));
            }
            if !(d.start_s >= 0.0 && d.duration_s > 0.0 && d.accel_mps2.is_finite()) {
                return cfg(format!("malformed disturbance {d:?}"));
            }
            if d.start_s + d.duration_s > self.horizon_s + 1e-9 {
                return cfg(format!("disturbance on vehicle {} ends after the horizon", d.vehicle));
            }
        }
        match &self.init {
            InitialState::Equilibrium { velocity_spread_mps: w } | InitialState::Uniform { velocity_spread_mps: w, .. } => {
                if !(*w >= 0.0 && w.is_finite()) {
                    return cfg(format!("velocity spread must be >= 0, got {w}"));
                }
            }
            InitialState::Explicit { spacing_m, velocity_mps } => {
                if spacing_m.len() != n || velocity_mps.len() != n {
                    return cfg(format!(
                        "explicit initial state has {} spacings and {} velocities for {n} vehicles",
                        spacing_m.len(),
                        velocity_mps.len()
                    ));
                }
                if spacing_m.iter().any(|&s| !(s > 0.0)) || velocity_mps.iter().any(|&v| !(v >= 0.0)) {
                    return cfg("explicit spacings must be > 0 and velocities >= 0".into());
                }
                if let Road::Ring { length_m } = self.road {
                    let total: f64 = spacing_m.iter().sum();
                    if (total - length_m).abs() > 1e-9 * length_m {
                        return cfg(format!("explicit spacings sum to {total} m on a {length_m} m ring"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Operating point the controller regulates to. On a ring vehicle 1
    /// takes the spacing the human drivers leave over.
    pub fn equilibrium(&self) -> Result<Equilibrium, SimError> {
        match self.road {
            Road::Ring { length_m } => Ok(ovm::ring_equilibrium(
                &self.vehicles,
                length_m,
                ClosureMode::FixedVStar,
                self.v_star_mps,
            )?),
            Road::Open => {
                let s_star = self
                    .vehicles
                    .iter()
                    .map(|p| ovm::equilibrium_spacing(p, self.v_star_mps))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(Equilibrium { v_star: self.v_star_mps, s_star })
            }
        }
    }

    fn initial(&self, eq: &Equilibrium) -> (Vec<f64>, Vec<f64>) {
        let n = self.n();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut draw = |center: f64, w: f64| {
            let v = if w > 0.0 { center + rng.random_range(-w..=w) } else { center };
            v.max(0.0)
        };
        match &self.init {
            InitialState::Equilibrium { velocity_spread_mps } => {
                let v = (0..n).map(|_| draw(self.v_star_mps, *velocity_spread_mps)).collect();
                (eq.s_star.clone(), v)
            }
            InitialState::Uniform { velocity_mps, velocity_spread_mps } => {
                let gap = match self.road {
                    Road::Ring { length_m } => length_m / n as f64,
                    Road::Open => eq.s_star.iter().sum::<f64>() / n as f64,
                };
                let v = (0..n).map(|_| draw(*velocity_mps, *velocity_spread_mps)).collect();
                (vec![gap; n], v)
            }
            InitialState::Explicit { spacing_m, velocity_mps } => (spacing_m.clone(), velocity_mps.clone()),
        }
    }
}

/// Onset of a limiter or brake.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub t_s: f64,
    pub vehicle: usize,
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    SafetyBrake,
    SaturatedLow,
    SaturatedHigh,
    Stopped,
}

impl EventKind {
    const ALL: [(u8, EventKind); 4] = [
        (FLAG_BRAKE, EventKind::SafetyBrake),
        (FLAG_SAT_LOW, EventKind::SaturatedLow),
        (FLAG_SAT_HIGH, EventKind::SaturatedHigh),
        (FLAG_STOPPED, EventKind::Stopped),
    ];

    pub fn name(self) -> &'static str {
        match self {
            EventKind::SafetyBrake => "brake",
            EventKind::SaturatedLow => "sat_low",
            EventKind::SaturatedHigh => "sat_high",
            EventKind::Stopped => "stopped",
        }
    }
}

/// Sampled simulation output; per-vehicle series are indexed `[step][vehicle]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub road: Road,
    pub n: usize,
    pub dt_s: f64,
    pub eq: Equilibrium,
    pub controlled: bool,
    pub t: Vec<f64>,
    /// Unwrapped positions (m); vehicle 1 starts at 0.
    pub p: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub s: Vec<Vec<f64>>,
    /// Applied acceleration after braking and limits.
    pub accel: Vec<Vec<f64>>,
    /// Raw controller output; empty rows without a controller.
    pub control: Vec<Vec<f64>>,
    pub flags: Vec<Vec<u8>>,
    pub events: Vec<SimEvent>,
    /// End of the last disturbance pulse (0 without disturbances).
    pub disturbance_end_s: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Deviation state `(s̄₁, v̄₁, …, s̄ₙ, v̄ₙ)` at step `k`.
    pub fn deviation(&self, k: usize) -> DVector<f64> {
        DVector::from_fn(2 * self.n, |r, _| {
            let i = r / 2;
            if r % 2 == 0 {
                self.s[k][i] - self.eq.s_star[i]
            } else {
                self.v[k][i] - self.eq.v_star
            }
        })
    }

    /// CSV with header `t,veh,p,v,s,u,event`, one row per vehicle every
    /// `stride` steps. `u` is the applied acceleration; `event` lists the
    /// active limiters separated by `|`.
    pub fn write_csv<W: Write>(&self, mut w: W, stride: usize) -> io::Result<()> {
        let stride = stride.max(1);
        writeln!(w, "t,veh,p,v,s,u,event")?;
        let last = self.len().saturating_sub(1);
        for k in (0..self.len()).filter(|&k| k % stride == 0 || k == last) {
            for i in 0..self.n {
                let ev: Vec<&str> = EventKind::ALL
                    .iter()
                    .filter(|(f, _)| self.flags[k][i] & f != 0)
                    .map(|(_, e)| e.name())
                    .collect();
                writeln!(
                    w,
                    "{},{},{},{},{},{},{}",
                    self.t[k],
                    i + 1,
                    self.p[k][i],
                    self.v[k][i],
                    self.s[k][i],
                    self.accel[k][i],
                    ev.join("|")
                )?;
            }
        }
        Ok(())
    }

    pub fn to_csv(&self, stride: usize) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf, stride).expect("writing to memory");
        String::from_utf8(buf).expect("csv is ascii")
    }

    /// Largest half peak-to-peak velocity swing of any vehicle over `t ≥ t_from`.
    pub fn velocity_amplitude(&self, t_from: f64) -> f64 {
        (0..self.n)
            .map(|i| {
                let (lo, hi) = self
                    .t
                    .iter()
                    .zip(&self.v)
                    .filter(|(t, _)| **t >= t_from)
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, v)| (lo.min(v[i]), hi.max(v[i])));
                if hi >= lo { 0.5 * (hi - lo) } else { 0.0 }
            })
            .fold(0.0, f64::max)
    }

    /// `max |vᵢ(t) − v_ref|` over all vehicles and `t ≥ t_from`.
    pub fn max_velocity_deviation(&self, v_ref: f64, t_from: f64) -> f64 {
        self.t
            .iter()
            .zip(&self.v)
            .filter(|(t, _)| **t >= t_from)
            .flat_map(|(_, v)| v.iter().map(move |x| (x - v_ref).abs()))
            .fold(0.0, f64::max)
    }

    /// Worst `|Σ sᵢ − D|` over the run (0 on an open road).
    pub fn closure_error(&self) -> f64 {
        match self.road {
            Road::Ring { length_m } => self
                .s
                .iter()
                .map(|s| (s.iter().sum::<f64>() - length_m).abs())
                .fold(0.0, f64::max),
            Road::Open => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `max_t |s₁(t) − s₁*|` (m).
    pub max_spacing_error_cav: f64,
    /// `Σ dt·x̄ᵀ T x̄`.
    pub state_cost: f64,
    /// `Σ dt·uᵀ Q u`.
    pub input_cost: f64,
    pub quadratic_cost: f64,
    /// First time after the last disturbance from which every velocity stays
    /// within the settling band; `None` if that never happens.
    pub settle_time_s: Option<f64>,
    pub min_spacing_m: f64,
}

/// Performance figures of a finished run, measured against `eq`.
pub fn compute_metrics(traj: &Trajectory, eq: &Equilibrium, weights: &PerformanceWeights) -> Metrics {
    let n = traj.n;
    let t_w = weights.state_weight(n);
    let q_w = weights.input_weight(&traj.road);
    let dt = traj.dt_s;
    let steps = traj.len().saturating_sub(1);

    let mut state_cost = 0.0;
    let mut input_cost = 0.0;
    let mut max_err = 0.0_f64;
    let mut min_spacing = f64::INFINITY;
    let mut last_outside: Option<usize> = None;
    for k in 0..traj.len() {
        let s = &traj.s[k];
        let v = &traj.v[k];
        max_err = max_err.max((s[0] - eq.s_star[0]).abs());
        min_spacing = s.iter().copied().fold(min_spacing, f64::min);
        if v.iter().any(|x| (x - eq.v_star).abs() >= SETTLE_BAND_MPS) {
            last_outside = Some(k);
        }
        if k < steps {
            let mut x = 0.0;
            for i in 0..n {
                let ds = s[i] - eq.s_star[i];
                let dv = v[i] - eq.v_star;
                x += t_w[(2 * i, 2 * i)] * ds * ds + t_w[(2 * i + 1, 2 * i + 1)] * dv * dv;
            }
            state_cost += dt * x;
            let u = &traj.control[k];
            if !u.is_empty() {
                let uv = DVector::from_column_slice(u);
                input_cost += dt * (uv.transpose() * &q_w * &uv)[(0, 0)];
            }
        }
    }
    let settle_time_s = match last_outside {
        None => Some(traj.disturbance_end_s),
        Some(k) if k + 1 < traj.len() => Some(traj.t[k + 1].max(traj.disturbance_end_s)),
        Some(_) => None,
    };
    Metrics {
        max_spacing_error_cav: max_err,
        state_cost,
        input_cost,
        quadratic_cost: state_cost + input_cost,
        settle_time_s,
        min_spacing_m: min_spacing,
    }
}

struct Loop<'a> {
    sc: &'a Scenario,
    eq: &'a Equilibrium,
    n: usize,
    ctrl: Option<&'a Controller>,
    observed: &'a [usize],
}

struct Eval {
    deriv: Vec<f64>,
    accel: Vec<f64>,
    control: Vec<f64>,
    flags: Vec<u8>,
}

// State layout: [p₀ (open-road leader), p₁..pₙ, v₁..vₙ, x_k].
impl Loop<'_> {
    fn v(&self, x: &[f64], i: usize) -> f64 {
        x[self.n + i]
    }

    fn spacings(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut s = Vec::with_capacity(n);
        s.push(match self.sc.road {
            Road::Ring { length_m } => x[n] + length_m - x[1],
            Road::Open => x[0] - x[1],
        });
        for i in 2..=n {
            s.push(x[i - 1] - x[i]);
        }
        s
    }

    fn eval(&self, t: f64, x: &[f64]) -> Eval {
        let n = self.n;
        let s = self.spacings(x);
        let v_star = self.eq.v_star;
        let mut deriv = vec![0.0; x.len()];

        let control = match self.ctrl {
            Some(k) => {
                let xk = DVector::from_column_slice(&x[2 * n + 1..]);
                let mut y = DVector::zeros(2 * self.observed.len());
                for (r, &j) in self.observed.iter().enumerate() {
                    y[2 * r] = s[j - 1] - self.eq.s_star[j - 1];
                    y[2 * r + 1] = self.v(x, j) - v_star;
                }
                let dxk = &k.a_k * &xk + &k.b_k * y;
                deriv[2 * n + 1..].copy_from_slice(dxk.as_slice());
                (&k.c_k * xk).as_slice().to_vec()
            }
            None => Vec::new(),
        };

        let leader_v = match self.sc.road {
            Road::Open => {
                let u1 = if control.len() == 2 { control[0] } else { 0.0 };
                (v_star + u1).max(0.0)
            }
            Road::Ring { .. } => 0.0,
        };
        deriv[0] = leader_v;

        let mut accel = vec![0.0; n];
        let mut flags = vec![0u8; n];
        for i in 1..=n {
            let vi = self.v(x, i);
            let v_pred = match (i, self.sc.road) {
                (1, Road::Ring { .. }) => self.v(x, n),
                (1, Road::Open) => leader_v,
                _ => self.v(x, i - 1),
            };
            let si = s[i - 1];
            let mut a = if i == 1 && !control.is_empty() {
                *control.last().expect("non-empty")
            } else {
                ovm::acceleration(&self.sc.vehicles[i - 1], vi, si, v_pred - vi)
            };
            a += self
                .sc
                .disturbances
                .iter()
                .filter(|d| d.vehicle == i && d.active(t))
                .map(|d| d.accel_mps2)
                .sum::<f64>();
            let mut f = 0u8;
            if si <= 0.0 || (vi * vi - v_pred * v_pred) / (2.0 * si) >= A_MIN.abs() {
                a = A_MIN;
                f |= FLAG_BRAKE;
            }
            if a < A_MIN {
                a = A_MIN;
                f |= FLAG_SAT_LOW;
            } else if a > A_MAX {
                a = A_MAX;
                f |= FLAG_SAT_HIGH;
            }
            if vi <= 0.0 && a < 0.0 {
                a = 0.0;
                f |= FLAG_STOPPED;
            }
            deriv[i] = vi.max(0.0);
            deriv[n + i] = a;
            accel[i - 1] = a;
            flags[i - 1] = f;
        }
        Eval { deriv, accel, control, flags }
    }
}

fn check_controller(sc: &Scenario, k: &Controller) -> Result<(), SimError> {
    let n = sc.n();
    let m = &k.meta;
    let cfg = |msg: String| Err(SimError::Config(msg));
    if m.n_vehicles != n {
        return cfg(format!("controller designed for {} vehicles, scenario has {n}", m.n_vehicles));
    }
    if m.road != sc.road.name() {
        return cfg(format!("controller designed for a {} road, scenario uses {}", m.road, sc.road.name()));
    }
    if m.observed.is_empty() || m.observed.iter().any(|&j| j == 0 || j > n) {
        return cfg(format!("controller observes vehicles {:?} outside 1..={n}", m.observed));
    }
    let nk = k.order();
    if k.a_k.ncols() != nk || k.b_k.nrows() != nk || k.c_k.ncols() != nk {
        return cfg("controller matrices have inconsistent orders".into());
    }
    if k.b_k.ncols() != 2 * m.observed.len() {
        return cfg(format!(
            "B_k has {} columns for {} observed vehicles",
            k.b_k.ncols(),
            m.observed.len()
        ));
    }
    if k.c_k.nrows() != sc.road.input_count() {
        return cfg(format!("C_k has {} rows, the road needs {}", k.c_k.nrows(), sc.road.input_count()));
    }
    if (m.v_star_mps - sc.v_star_mps).abs() > 1e-9 * sc.v_star_mps.max(1.0) {
        return cfg(format!(
            "controller designed for v* = {} m/s, scenario uses {}",
            m.v_star_mps, sc.v_star_mps
        ));
    }
    Ok(())
}

/// Integrate the scenario. Without a controller vehicle 1 drives like the
/// others, using its own OVM parameters.
pub fn simulate(sc: &Scenario, controller: Option<&Controller>) -> Result<Trajectory, SimError> {
    sc.validate()?;
    if let Some(k) = controller {
        check_controller(sc, k)?;
    }
    let n = sc.n();
    let eq = sc.equilibrium()?;
    let (s0, v0) = sc.initial(&eq);
    let observed: &[usize] = controller.map(|k| k.meta.observed.as_slice()).unwrap_or(&[]);
    let lp = Loop { sc, eq: &eq, n, ctrl: controller, observed };

    let nk = controller.map_or(0, Controller::order);
    let mut x = vec![0.0; 2 * n + 1 + nk];
    x[1] = 0.0;
    for i in 2..=n {
        x[i] = x[i - 1] - s0[i - 1];
    }
    x[0] = s0[0];
    x[n + 1..=2 * n].copy_from_slice(&v0);

    let steps = sc.steps();
    let dt = sc.dt_s;
    let mut traj = Trajectory {
        road: sc.road,
        n,
        dt_s: dt,
        eq: eq.clone(),
        controlled: controller.is_some(),
        t: Vec::with_capacity(steps + 1),
        p: Vec::with_capacity(steps + 1),
        v: Vec::with_capacity(steps + 1),
        s: Vec::with_capacity(steps + 1),
        accel: Vec::with_capacity(steps + 1),
        control: Vec::with_capacity(steps + 1),
        flags: Vec::with_capacity(steps + 1),
        events: Vec::new(),
        disturbance_end_s: sc
            .disturbances
            .iter()
            .map(|d| d.start_s + d.duration_s)
            .fold(0.0, f64::max),
    };
    let mut prev_flags = vec![0u8; n];

    let mut record = |traj: &mut Trajectory, t: f64, x: &[f64], e: &Eval| {
        traj.t.push(t);
        traj.p.push(x[1..=n].to_vec());
        traj.v.push(x[n + 1..=2 * n].to_vec());
        traj.s.push(lp.spacings(x));
        traj.accel.push(e.accel.clone());
        traj.control.push(e.control.clone());
        traj.flags.push(e.flags.clone());
        for (i, (&f, pf)) in e.flags.iter().zip(prev_flags.iter_mut()).enumerate() {
            for (bit, kind) in EventKind::ALL {
                if f & bit != 0 && *pf & bit == 0 {
                    traj.events.push(SimEvent { t_s: t, vehicle: i + 1, kind });
                }
            }
            *pf = f;
        }
    };

    let axpy = |x: &[f64], k: &[f64], h: f64| -> Vec<f64> { x.iter().zip(k).map(|(a, b)| a + h * b).collect() };
    for step in 0..steps {
        let t = step as f64 * dt;
        let k1 = lp.eval(t, &x);
        record(&mut traj, t, &x, &k1);
        let k2 = lp.eval(t + 0.5 * dt, &axpy(&x, &k1.deriv, 0.5 * dt));
        let k3 = lp.eval(t + 0.5 * dt, &axpy(&x, &k2.deriv, 0.5 * dt));
        let k4 = lp.eval(t + dt, &axpy(&x, &k3.deriv, dt));
        for (j, xj) in x.iter_mut().enumerate() {
            *xj += dt / 6.0 * (k1.deriv[j] + 2.0 * k2.deriv[j] + 2.0 * k3.deriv[j] + k4.deriv[j]);
        }
        if x.iter().any(|xj| !xj.is_finite()) {
            return Err(SimError::Diverged { t_s: t + dt, trajectory: Box::new(traj) });
        }
        for vi in &mut x[n + 1..=2 * n] {
            *vi = vi.max(0.0);
        }
        let s = lp.spacings(&x);
        if let Some((i, &si)) = s.iter().enumerate().find(|(_, &si)| si <= 0.0) {
            let t_next = (step + 1) as f64 * dt;
            let e = lp.eval(t_next, &x);
            record(&mut traj, t_next, &x, &e);
            return Err(SimError::Collision {
                vehicle: i + 1,
                t_s: t_next,
                spacing_m: si,
                trajectory: Box::new(traj),
            });
        }
    }
    let t_end = steps as f64 * dt;
    let e = lp.eval(t_end, &x);
    record(&mut traj, t_end, &x, &e);
    Ok(traj)
}

/// Run independent scenarios, optionally in parallel; results keep input order.
pub fn simulate_many(
    scenarios: &[Scenario],
    controller: Option<&Controller>,
    exec: Exec,
) -> Vec<Result<Trajectory, SimError>> {
    par::map_slice(exec, scenarios, |sc| simulate(sc, controller))
}

/// Output matrix picking `(s̄ⱼ, v̄ⱼ)` of the observed vehicles out of the
/// deviation state; this is the `y` fed to the controller.
pub fn measurement_matrix(n: usize, observed: &[usize]) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(2 * observed.len(), 2 * n);
    for (k, &j) in observed.iter().enumerate() {
        c[(2 * k, 2 * j - 2)] = 1.0;
        c[(2 * k + 1, 2 * j - 1)] = 1.0;
    }
    c
}
