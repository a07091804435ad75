//! Time-driven and event-triggered CBF/CLF-QP controllers for the two CAVs.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::barrier::{
    assemble_qp, nominal_rows, BarrierParams, ClfParams, ConstraintRow, ControlBounds, OtherMotion, QpWeights,
    RoadLimits, Scene, N_DECISION,
};
use crate::error::{Error, Result};
use crate::qp::{solve, QpStatus};
use crate::robust::{build_uncertainty_box, robustify_rows, BoundVectors, ControlSigns, RobustOptions};
use crate::vehicle::{
    measure_error, measure_error_rate, AdaptiveEstimator, ControlInput, StateDerivative, VehicleState,
};

/// Channels with `|z_j|` at or below this are treated as sign-agnostic.
const SIGN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    /// Re-solve at a fixed period `delta`.
    Time,
    /// Re-solve when a trigger condition fires.
    Event,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub mode: ControlMode,
    /// Period of the time-driven controller [s].
    pub delta: f64,
    pub bounds: BoundVectors<f64>,
    /// Lane-completion tolerance on `|y_C - l|` [m].
    pub epsilon: f64,
    /// Abort horizon [s].
    #[serde(rename = "T_f")]
    pub t_final: f64,
    /// Use the true HDV state and nominal drift instead of the adaptive model.
    pub hdv_known: bool,
    #[serde(default)]
    pub robust: RobustOptions,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            mode: ControlMode::Event,
            delta: 0.05,
            bounds: BoundVectors::default(),
            epsilon: 0.3,
            t_final: 15.0,
            hdv_known: false,
            robust: RobustOptions::default(),
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.delta) || !pos(self.epsilon) || !pos(self.t_final) {
            return Err(Error::Config("delta, epsilon and T_f must be positive".into()));
        }
        self.bounds.validate()
    }
}

/// The four vehicles, in trigger tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VehicleId {
    #[serde(rename = "1")]
    One,
    C,
    U,
    H,
}

impl VehicleId {
    pub const TRIGGER_ORDER: [VehicleId; 4] = [VehicleId::One, VehicleId::C, VehicleId::U, VehicleId::H];

    pub fn label(self) -> &'static str {
        match self {
            VehicleId::One => "1",
            VehicleId::C => "C",
            VehicleId::U => "U",
            VehicleId::H => "H",
        }
    }
}

/// State component, in trigger tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    X,
    Y,
    Theta,
    V,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::X, Component::Y, Component::Theta, Component::V];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// First solve at `t_0`.
    Initial,
    #[serde(rename = "event1_error")]
    Event1Error,
    #[serde(rename = "event2_error_rate")]
    Event2ErrorRate,
    #[serde(rename = "event3_state_drift")]
    Event3StateDrift,
    Periodic,
    InfeasibleFallback,
    Termination,
    Abort,
}

/// Which monitored quantity crossed which bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerDetail {
    /// `None` for the HDV error and error-rate monitors.
    pub vehicle: Option<VehicleId>,
    pub component: Component,
    /// Monitored value at the trigger micro-step (before synchronization).
    pub value: f64,
    /// Monitored value one micro-step earlier.
    pub previous: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trigger {
    pub kind: EventKind,
    pub detail: TriggerDetail,
}

/// Quantities watched between events.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Monitors {
    /// HDV state error `x_H - x̄_H`.
    pub error: [f64; 4],
    /// HDV error rate `ẋ_H - ẋ̄_H`.
    pub error_rate: [f64; 4],
    /// `x_i(t) - x_i(t_k)` for vehicles in [`VehicleId::TRIGGER_ORDER`]; the HDV entry tracks its estimate.
    pub drift: [[f64; 4]; 4],
}

/// First crossed bound, if any, with tie-break order Event 1, Event 2, Event 3,
/// components `(x, y, θ, v)` and vehicles `(1, C, U, H)`.
///
/// A bound is reached when `|value| >= bound`. Without an adaptive model the
/// error monitors are ignored.
pub fn detect_trigger(
    now: &Monitors,
    previous: &Monitors,
    bounds: &BoundVectors<f64>,
    adaptive: bool,
) -> Option<Trigger> {
    let hit = |kind, vehicle, j: usize, value: f64, prev: f64, bound: f64| {
        (value.abs() >= bound).then_some(Trigger {
            kind,
            detail: TriggerDetail {
                vehicle,
                component: Component::ALL[j],
                value,
                previous: prev,
                bound,
            },
        })
    };
    if adaptive {
        for j in 0..4 {
            if let Some(t) = hit(
                EventKind::Event1Error,
                None,
                j,
                now.error[j],
                previous.error[j],
                bounds.w[j],
            ) {
                return Some(t);
            }
        }
        for j in 0..4 {
            if let Some(t) = hit(
                EventKind::Event2ErrorRate,
                None,
                j,
                now.error_rate[j],
                previous.error_rate[j],
                bounds.nu[j],
            ) {
                return Some(t);
            }
        }
    }
    for (i, vehicle) in VehicleId::TRIGGER_ORDER.iter().enumerate() {
        let s = match vehicle {
            VehicleId::One => &bounds.s_1,
            VehicleId::C => &bounds.s_c,
            VehicleId::U => &bounds.s_u,
            VehicleId::H => &bounds.s_h,
        };
        for j in 0..4 {
            if let Some(t) = hit(
                EventKind::Event3StateDrift,
                Some(*vehicle),
                j,
                now.drift[i][j],
                previous.drift[i][j],
                s[j],
            ) {
                return Some(t);
            }
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Complete,
    Abort,
}

/// `Some(outcome)` once the maneuver has ended.
pub fn check_termination(y_c: f64, t: f64, lane_width: f64, cfg: &ControllerConfig) -> Option<Outcome> {
    if (y_c - lane_width).abs() <= cfg.epsilon {
        Some(Outcome::Complete)
    } else if t >= cfg.t_final {
        Some(Outcome::Abort)
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpPass {
    Nominal,
    Robust,
    RobustRetry,
}

/// Solver diagnostics for one QP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpDiagnostics {
    pub pass: QpPass,
    pub status: QpStatus,
    pub iterations: usize,
    /// Absent unless the solve reached optimality.
    pub kkt_residual: Option<f64>,
    pub objective: Option<f64>,
    /// Wall-clock time; kept out of serialized logs so they stay byte-reproducible.
    #[serde(skip)]
    pub solve_time: Duration,
}

/// Result of one controller update.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlUpdate {
    pub controls: [ControlInput<f64>; 2],
    pub feasible: bool,
    pub sign_oscillation: bool,
    pub qps: Vec<QpDiagnostics>,
}

/// Measurements available at a control instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldView {
    pub cav_c: VehicleState<f64>,
    pub cav_1: VehicleState<f64>,
    pub hdv: VehicleState<f64>,
    /// Measured HDV state derivative.
    pub hdv_rate: StateDerivative<f64>,
    pub slow: VehicleState<f64>,
}

/// Everything static the controller needs from the scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlParams {
    pub limits: RoadLimits<f64>,
    pub control_bounds: ControlBounds<f64>,
    pub barrier: BarrierParams<f64>,
    pub clf: ClfParams<f64>,
    pub weights: QpWeights<f64>,
    pub wheelbase: f64,
    pub config: ControllerConfig,
}

/// Anchor of the Event-3 drift monitors.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Anchor {
    /// In [`VehicleId::TRIGGER_ORDER`].
    states: [VehicleState<f64>; 4],
}

/// Controller for both CAVs, owning the HDV estimate.
#[derive(Debug, Clone)]
pub struct Controller {
    params: ControlParams,
    estimator: AdaptiveEstimator<f64>,
    anchor: Option<Anchor>,
    previous: Monitors,
    controls: [ControlInput<f64>; 2],
}

impl Controller {
    pub fn new(params: ControlParams, hdv_initial: VehicleState<f64>) -> Self {
        Self {
            params,
            estimator: AdaptiveEstimator::new(hdv_initial),
            anchor: None,
            previous: Monitors::default(),
            controls: [ControlInput::zero(); 2],
        }
    }

    pub fn params(&self) -> &ControlParams {
        &self.params
    }

    pub fn estimator(&self) -> &AdaptiveEstimator<f64> {
        &self.estimator
    }

    pub fn controls(&self) -> [ControlInput<f64>; 2] {
        self.controls
    }

    fn adaptive(&self) -> bool {
        !self.params.config.hdv_known
    }

    /// HDV state as the controller tracks it (estimate, or truth when known).
    fn tracked_hdv(&self, view: &WorldView) -> VehicleState<f64> {
        if self.adaptive() {
            self.estimator.state
        } else {
            view.hdv
        }
    }

    /// Current monitor values.
    pub fn monitors(&self, view: &WorldView) -> Monitors {
        let mut m = Monitors::default();
        if self.adaptive() {
            m.error = measure_error(&view.hdv, &self.estimator.state).to_array();
            let model = self.estimator.rate(self.params.wheelbase);
            m.error_rate = measure_error_rate(&view.hdv_rate, &model).to_array();
        }
        if let Some(anchor) = &self.anchor {
            let now = [view.cav_1, view.cav_c, view.slow, self.tracked_hdv(view)];
            for i in 0..4 {
                let a = anchor.states[i].to_array();
                let b = now[i].to_array();
                m.drift[i] = std::array::from_fn(|j| b[j] - a[j]);
            }
        }
        m
    }

    /// Event-mode trigger check at a micro-step. Also records the monitor values
    /// so the next check can report them as `previous`.
    pub fn check_trigger(&mut self, view: &WorldView) -> Option<Trigger> {
        let now = self.monitors(view);
        let hit = detect_trigger(&now, &self.previous, &self.params.config.bounds, self.adaptive());
        self.previous = now;
        hit
    }

    /// Advances the HDV estimate by one micro-step.
    pub fn propagate(&mut self, dt: f64) {
        if self.adaptive() {
            self.estimator.propagate(dt, self.params.wheelbase);
        }
    }

    /// Synchronizes the HDV model (adaptive mode) and builds the current scene.
    fn synchronized_scene(&mut self, view: &WorldView) -> Scene<f64> {
        let hdv_motion = if self.adaptive() {
            self.estimator
                .synchronize(&view.hdv, &view.hdv_rate, self.params.wheelbase);
            let model = self.estimator.rate(self.params.wheelbase);
            OtherMotion::Adaptive {
                terms: self.estimator.terms,
                error: measure_error(&view.hdv, &self.estimator.state),
                error_rate: measure_error_rate(&view.hdv_rate, &model),
            }
        } else {
            OtherMotion::Drift
        };
        Scene {
            cav_c: view.cav_c,
            cav_1: view.cav_1,
            hdv: self.tracked_hdv(view),
            hdv_motion,
            slow: view.slow,
        }
    }

    /// Solves for new controls at a control instant and re-anchors the monitors.
    pub fn update(&mut self, view: &WorldView) -> ControlUpdate {
        let scene = self.synchronized_scene(view);
        let update = match self.params.config.mode {
            ControlMode::Time => self.solve_nominal(&scene),
            ControlMode::Event => self.solve_event(&scene),
        };
        self.controls = update.controls;
        self.anchor = Some(Anchor {
            states: [view.cav_1, view.cav_c, view.slow, scene.hdv],
        });
        self.previous = self.monitors(view);
        update
    }

    fn rows(&self, scene: &Scene<f64>) -> Vec<ConstraintRow<f64>> {
        let p = &self.params;
        nominal_rows(scene, &p.limits, &p.barrier, &p.clf)
    }

    fn solve_rows(&self, rows: &[ConstraintRow<f64>], pass: QpPass) -> (Option<[f64; N_DECISION]>, QpDiagnostics) {
        let p = &self.params;
        let qp = assemble_qp(rows, &p.weights, &p.control_bounds).expect("validated QP data");
        let sol = solve(&qp);
        let diag = QpDiagnostics {
            pass,
            status: sol.status,
            iterations: sol.iterations,
            kkt_residual: sol.is_optimal().then_some(sol.kkt_residual),
            objective: sol.is_optimal().then(|| qp.objective(&sol.z)),
            solve_time: sol.solve_time,
        };
        let z = sol.is_optimal().then(|| std::array::from_fn(|j| sol.z[j]));
        (z, diag)
    }

    fn fallback(&self, qps: Vec<QpDiagnostics>) -> ControlUpdate {
        let brake = ControlInput::new(self.params.control_bounds.u_min, 0.0);
        ControlUpdate {
            controls: [brake, brake],
            feasible: false,
            sign_oscillation: false,
            qps,
        }
    }

    fn controls_from(z: &[f64; N_DECISION]) -> [ControlInput<f64>; 2] {
        [ControlInput::new(z[0], z[1]), ControlInput::new(z[2], z[3])]
    }

    fn solve_nominal(&self, scene: &Scene<f64>) -> ControlUpdate {
        let (z, diag) = self.solve_rows(&self.rows(scene), QpPass::Nominal);
        match z {
            Some(z) => ControlUpdate {
                controls: Self::controls_from(&z),
                feasible: true,
                sign_oscillation: false,
                qps: vec![diag],
            },
            None => self.fallback(vec![diag]),
        }
    }

    fn solve_event(&self, scene: &Scene<f64>) -> ControlUpdate {
        let p = &self.params;
        let rows = self.rows(scene);
        let (z1, d1) = self.solve_rows(&rows, QpPass::Nominal);
        let mut qps = vec![d1];
        let Some(z1) = z1 else {
            return self.fallback(qps);
        };
        let bx = build_uncertainty_box(scene, &p.config.bounds, 0.0).expect("validated bounds");
        let robust = |signs: &ControlSigns| robustify_rows(&rows, &bx, &p.limits, &p.barrier, signs, &p.config.robust);

        let signs1 = ControlSigns::from_solution(&z1);
        let (z2, d2) = self.solve_rows(&robust(&signs1), QpPass::Robust);
        qps.push(d2);
        let Some(z2) = z2 else {
            return self.fallback(qps);
        };
        if signs1.consistent_with(&z2, SIGN_TOL) {
            return ControlUpdate {
                controls: Self::controls_from(&z2),
                feasible: true,
                sign_oscillation: false,
                qps,
            };
        }

        let signs2 = ControlSigns::from_solution(&z2);
        let (z3, d3) = self.solve_rows(&robust(&signs2), QpPass::RobustRetry);
        qps.push(d3);
        let Some(z3) = z3 else {
            return ControlUpdate {
                controls: Self::controls_from(&z2),
                feasible: true,
                sign_oscillation: true,
                qps,
            };
        };
        if signs2.consistent_with(&z3, SIGN_TOL) {
            return ControlUpdate {
                controls: Self::controls_from(&z3),
                feasible: true,
                sign_oscillation: false,
                qps,
            };
        }

        // Still oscillating: keep whichever candidate has the larger worst-case margin
        // over the box, evaluating each channel at its least favourable coefficient.
        let lo = robust(&ControlSigns([true; 4]));
        let hi = robust(&ControlSigns([false; 4]));
        let chosen = if worst_case_margin(&lo, &hi, &z3) > worst_case_margin(&lo, &hi, &z2) {
            z3
        } else {
            z2
        };
        log::debug!("control-sign oscillation between robust passes");
        ControlUpdate {
            controls: Self::controls_from(&chosen),
            feasible: true,
            sign_oscillation: true,
            qps,
        }
    }
}

/// Smallest scaled CBF margin of `z` when every control coefficient may take
/// either of its two extreme values.
fn worst_case_margin(lo: &[ConstraintRow<f64>], hi: &[ConstraintRow<f64>], z: &[f64; N_DECISION]) -> f64 {
    let mut worst = f64::INFINITY;
    for (a, b) in lo.iter().zip(hi) {
        if !a.is_cbf() {
            continue;
        }
        let mut m = a.c_f;
        let mut scale: f64 = 1.0;
        for j in 0..N_DECISION {
            m += (a.c_g[j] * z[j]).min(b.c_g[j] * z[j]);
            scale = scale.max(a.c_g[j].abs()).max(b.c_g[j].abs());
        }
        worst = worst.min(m / scale);
    }
    worst
}

/// Controls from the nominal QP at a scene, without synchronization or state.
pub fn nominal_controls(params: &ControlParams, scene: &Scene<f64>) -> Option<[ControlInput<f64>; 2]> {
    let c = Controller::new(*params, scene.hdv);
    match c.solve_nominal(scene) {
        u if u.feasible => Some(u.controls),
        _ => None,
    }
}

/// Controls from the event-mode two-pass solve at a scene, without synchronization.
pub fn event_controls(params: &ControlParams, scene: &Scene<f64>) -> Option<[ControlInput<f64>; 2]> {
    let c = Controller::new(*params, scene.hdv);
    match c.solve_event(scene) {
        u if u.feasible => Some(u.controls),
        _ => None,
    }
}
