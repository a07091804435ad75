//! Scripted and external HDV driving policies.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::vehicle::{ControlInput, VehicleState};

/// Physical limits applied to any HDV control before it enters the dynamics.
pub const HDV_U_LIMIT: f64 = 7.0;
pub const HDV_PHI_LIMIT: f64 = PI / 4.0;

/// Proportional lane-hold steering toward the fast-lane center `y = lane_width`.
pub fn lane_hold_steering(hdv: &VehicleState<f64>, lane_width: f64) -> f64 {
    let limit = 0.2 * PI;
    (-0.5 * (hdv.y - lane_width) - 1.0 * hdv.theta).clamp(-limit, limit)
}

/// Clamps to the HDV's physical limits; the flag reports whether anything changed.
pub fn clamp_hdv_control(c: ControlInput<f64>) -> (ControlInput<f64>, bool) {
    c.clamped_sym(HDV_U_LIMIT, HDV_PHI_LIMIT)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomParams {
    pub u_max: f64,
    pub phi_max: f64,
    /// Fixed resampling period [s]. When absent, a new sample is drawn at
    /// every control instant of the CAV controller.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tick: Option<f64>,
}

impl Default for RandomParams {
    fn default() -> Self {
        Self {
            u_max: 1.7,
            phi_max: 0.2 * PI,
            tick: None,
        }
    }
}

/// Accelerates toward the speed cap regardless of the CAVs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggressiveParams {
    pub accel: f64,
    pub v_cap: f64,
}

impl Default for AggressiveParams {
    fn default() -> Self {
        Self {
            accel: 1.7,
            v_cap: 35.0,
        }
    }
}

/// Yields once C starts moving over while close: brakes until C is clearly ahead.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConservativeParams {
    pub decel: f64,
    /// Longitudinal distance [m] within which C's merge triggers yielding.
    pub proximity: f64,
    /// Lateral speed of C [m/s] read as a merge attempt.
    pub merge_lateral_speed: f64,
}

impl Default for ConservativeParams {
    fn default() -> Self {
        Self {
            decel: 2.0,
            proximity: 30.0,
            merge_lateral_speed: 0.1,
        }
    }
}

/// Alternates between accelerating and braking with random dwell times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HesitantParams {
    pub accel: f64,
    /// Dwell-time range [s].
    pub dwell: [f64; 2],
}

impl Default for HesitantParams {
    fn default() -> Self {
        Self {
            accel: 3.0,
            dwell: [2.0, 4.0],
        }
    }
}

/// A control instruction for an externally driven HDV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HdvCommand {
    Manual {
        u: f64,
        phi: f64,
    },
    /// No recent input: zero acceleration and lane-hold steering.
    DeadMan,
}

impl HdvCommand {
    pub fn resolve(&self, hdv: &VehicleState<f64>, lane_width: f64) -> ControlInput<f64> {
        match *self {
            HdvCommand::Manual { u, phi } => ControlInput::new(u, phi),
            HdvCommand::DeadMan => ControlInput::new(0.0, lane_hold_steering(hdv, lane_width)),
        }
    }
}

/// A command taking effect at micro-step `step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedCommand {
    pub step: u64,
    pub command: HdvCommand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HdvPolicy {
    Random(RandomParams),
    Aggressive(AggressiveParams),
    Conservative(ConservativeParams),
    Hesitant(HesitantParams),
    /// Zero acceleration and zero steering.
    Zero,
    /// Commands injected at run time by a live session.
    External,
    /// Commands replayed from a recorded session, sorted by step.
    Replay {
        commands: Vec<TimedCommand>,
    },
}

impl Default for HdvPolicy {
    fn default() -> Self {
        HdvPolicy::Random(RandomParams::default())
    }
}

impl HdvPolicy {
    pub fn archetype(name: &str) -> Option<Self> {
        match name {
            "aggressive" => Some(HdvPolicy::Aggressive(AggressiveParams::default())),
            "conservative" => Some(HdvPolicy::Conservative(ConservativeParams::default())),
            "hesitant" => Some(HdvPolicy::Hesitant(HesitantParams::default())),
            "random" => Some(HdvPolicy::default()),
            "zero" => Some(HdvPolicy::Zero),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            HdvPolicy::Random(_) => "random",
            HdvPolicy::Aggressive(_) => "aggressive",
            HdvPolicy::Conservative(_) => "conservative",
            HdvPolicy::Hesitant(_) => "hesitant",
            HdvPolicy::Zero => "zero",
            HdvPolicy::External => "external",
            HdvPolicy::Replay { .. } => "replay",
        }
    }
}

/// What a policy may observe at a micro-step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyView {
    pub hdv: VehicleState<f64>,
    pub cav_c: VehicleState<f64>,
    /// Lateral speed of C.
    pub cav_c_lateral_speed: f64,
    pub lane_width: f64,
}

/// A policy together with its internal state and random stream.
#[derive(Debug, Clone)]
pub struct PolicyRunner {
    policy: HdvPolicy,
    rng: ChaCha8Rng,
    dt: f64,
    held: ControlInput<f64>,
    yielding: bool,
    hesitant_sign: f64,
    next_switch: u64,
    replay_index: usize,
    external: HdvCommand,
}

impl PolicyRunner {
    pub fn new(policy: HdvPolicy, mut rng: ChaCha8Rng, dt: f64) -> Self {
        let hesitant_sign = if let HdvPolicy::Hesitant(_) = policy {
            if rng.gen::<bool>() {
                1.0
            } else {
                -1.0
            }
        } else {
            1.0
        };
        Self {
            policy,
            rng,
            dt,
            held: ControlInput::zero(),
            yielding: false,
            hesitant_sign,
            next_switch: 0,
            replay_index: 0,
            external: HdvCommand::Manual { u: 0.0, phi: 0.0 },
        }
    }

    pub fn policy(&self) -> &HdvPolicy {
        &self.policy
    }

    /// Installs the command an external policy follows from the next call on.
    pub fn set_external(&mut self, cmd: HdvCommand) {
        self.external = cmd;
    }

    pub fn external(&self) -> HdvCommand {
        self.external
    }

    fn steps(&self, seconds: f64) -> u64 {
        ((seconds / self.dt).round() as u64).max(1)
    }

    fn resample(&mut self, p: &RandomParams) {
        let u = self.rng.gen_range(-p.u_max..=p.u_max);
        let phi = self.rng.gen_range(-p.phi_max..=p.phi_max);
        self.held = ControlInput::new(u, phi);
    }

    /// Tells the policy that the CAV controller re-solves at this micro-step.
    /// Returns true if the HDV control changed as a result.
    pub fn on_control_instant(&mut self) -> bool {
        match &self.policy {
            HdvPolicy::Random(p) if p.tick.is_none() => {
                let p = *p;
                self.resample(&p);
                true
            }
            _ => false,
        }
    }

    /// Unclamped HDV control for micro-step `step`.
    pub fn control(&mut self, step: u64, view: &PolicyView) -> ControlInput<f64> {
        let hold = lane_hold_steering(&view.hdv, view.lane_width);
        match &self.policy {
            &HdvPolicy::Random(p) => {
                if p.tick.is_some_and(|tick| step.is_multiple_of(self.steps(tick))) {
                    self.resample(&p);
                }
                self.held
            }
            &HdvPolicy::Aggressive(p) => {
                let u = if view.hdv.v < p.v_cap { p.accel } else { 0.0 };
                ControlInput::new(u, hold)
            }
            &HdvPolicy::Conservative(p) => {
                let gap = view.cav_c.x - view.hdv.x;
                if !self.yielding && view.cav_c_lateral_speed > p.merge_lateral_speed && gap.abs() < p.proximity {
                    self.yielding = true;
                } else if self.yielding && gap > p.proximity {
                    self.yielding = false;
                }
                let u = if self.yielding { -p.decel } else { 0.0 };
                ControlInput::new(u, hold)
            }
            &HdvPolicy::Hesitant(p) => {
                if step >= self.next_switch {
                    if step > 0 {
                        self.hesitant_sign = -self.hesitant_sign;
                    }
                    let dwell = self.rng.gen_range(p.dwell[0]..=p.dwell[1]);
                    self.next_switch = step + self.steps(dwell);
                }
                ControlInput::new(self.hesitant_sign * p.accel, hold)
            }
            HdvPolicy::Zero => ControlInput::zero(),
            HdvPolicy::External => self.external.resolve(&view.hdv, view.lane_width),
            HdvPolicy::Replay { commands } => {
                while self.replay_index < commands.len() && commands[self.replay_index].step <= step {
                    self.external = commands[self.replay_index].command;
                    self.replay_index += 1;
                }
                self.external.resolve(&view.hdv, view.lane_width)
            }
        }
    }
}
