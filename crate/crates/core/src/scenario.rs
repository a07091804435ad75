//! Scenario configuration and its TOML file format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::barrier::{BarrierParams, ClfParams, ControlBounds, QpWeights, RoadLimits};
use crate::controller::{ControlMode, ControlParams, ControllerConfig};
use crate::error::{Error, Result};
use crate::policy::HdvPolicy;
use crate::vehicle::{DisturbanceConfig, VehicleState};

/// Initial states of the four vehicles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialStates {
    #[serde(rename = "C")]
    pub cav_c: VehicleState<f64>,
    #[serde(rename = "1")]
    pub cav_1: VehicleState<f64>,
    #[serde(rename = "H")]
    pub hdv: VehicleState<f64>,
    /// The slow vehicle keeps this speed throughout.
    #[serde(rename = "U")]
    pub slow: VehicleState<f64>,
}

impl Default for InitialStates {
    fn default() -> Self {
        Self {
            cav_c: VehicleState::new(20.0, 0.0, 0.0, 25.0),
            cav_1: VehicleState::new(50.0, 4.0, 0.0, 29.0),
            hdv: VehicleState::new(10.0, 4.0, 0.0, 28.0),
            slow: VehicleState::new(60.0, 0.0, 0.0, 20.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClfRates {
    /// `m_1..m_4`: C speed, 1 speed, C lane, 1 lane.
    pub m: [f64; 4],
}

impl Default for ClfRates {
    fn default() -> Self {
        Self { m: [1.0; 4] }
    }
}

/// Everything needed to reproduce a run, apart from the HDV policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// Integration step [s].
    pub micro_step: f64,
    pub lane_width: f64,
    /// Wheelbase `L_w` [m].
    pub wheelbase: f64,
    /// `[v_min, v_max]` for the CAVs [m/s].
    pub speed_limits: [f64; 2],
    pub control_bounds: ControlBounds<f64>,
    /// Desired speed [m/s].
    pub v_d: f64,
    pub initial: InitialStates,
    pub barrier: BarrierParams<f64>,
    pub clf: ClfRates,
    pub weights: QpWeights<f64>,
    pub disturbance: DisturbanceConfig,
    pub controller: ControllerConfig,
    /// Policy used when the caller does not supply one.
    pub hdv_policy: HdvPolicy,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            micro_step: 1e-3,
            lane_width: 4.0,
            wheelbase: 2.7,
            speed_limits: [15.0, 35.0],
            control_bounds: ControlBounds::default(),
            v_d: 30.0,
            initial: InitialStates::default(),
            barrier: BarrierParams::default(),
            clf: ClfRates::default(),
            weights: QpWeights::default(),
            disturbance: DisturbanceConfig::default(),
            controller: ControllerConfig::default(),
            hdv_policy: HdvPolicy::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Parse(e.to_string().trim_end().to_string()))
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn with_mode(mut self, mode: ControlMode) -> Self {
        self.controller.mode = mode;
        self
    }

    pub fn limits(&self) -> RoadLimits<f64> {
        RoadLimits {
            lane_width: self.lane_width,
            v_min: self.speed_limits[0],
            v_max: self.speed_limits[1],
        }
    }

    pub fn clf_params(&self) -> ClfParams<f64> {
        ClfParams {
            m: self.clf.m,
            v_d: self.v_d,
            lane_width: self.lane_width,
        }
    }

    pub fn control_params(&self) -> ControlParams {
        ControlParams {
            limits: self.limits(),
            control_bounds: self.control_bounds,
            barrier: self.barrier,
            clf: self.clf_params(),
            weights: self.weights,
            wheelbase: self.wheelbase,
            config: self.controller,
        }
    }

    /// Micro-steps per time-driven control period.
    pub fn steps_per_period(&self) -> u64 {
        (self.controller.delta / self.micro_step).round().max(1.0) as u64
    }

    /// Checks every invariant; returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.micro_step) || !pos(self.lane_width) || !pos(self.wheelbase) {
            return Err(Error::Config(
                "micro_step, lane_width and wheelbase must be positive".into(),
            ));
        }
        let [v_min, v_max] = self.speed_limits;
        if !(v_min < v_max) {
            return Err(Error::InvalidInterval {
                what: "speed_limits".into(),
                lo: v_min,
                hi: v_max,
            });
        }
        let cb = &self.control_bounds;
        if !(cb.u_min < cb.u_max) || !(cb.phi_min < cb.phi_max) {
            return Err(Error::Config("control bounds must satisfy min < max".into()));
        }
        if !self.disturbance.is_well_ordered() {
            return Err(Error::Config("disturbance ranges must be ordered".into()));
        }
        self.barrier.validate()?;
        self.controller.validate()?;
        let w = &self.weights;
        if [w.alpha_u_c, w.alpha_u_1, w.alpha_phi]
            .iter()
            .chain(&w.p)
            .any(|x| !(*x >= 0.0))
        {
            return Err(Error::Config("QP weights must be non-negative".into()));
        }
        if self.clf.m.iter().any(|m| !pos(*m)) {
            return Err(Error::Config("CLF rates must be positive".into()));
        }
        for (name, s) in [
            ("C", &self.initial.cav_c),
            ("1", &self.initial.cav_1),
            ("H", &self.initial.hdv),
            ("U", &self.initial.slow),
        ] {
            if s.to_array().iter().any(|x| !x.is_finite()) {
                return Err(Error::Config(format!("initial state of {name} must be finite")));
            }
        }
        let period = self.steps_per_period() as f64 * self.micro_step;
        if (period - self.controller.delta).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "delta = {} is not a multiple of micro_step = {}",
                self.controller.delta, self.micro_step
            )));
        }

        let mut warnings = Vec::new();
        if self.controller.mode == ControlMode::Event {
            let b = &self.controller.bounds;
            let speed = |s: &VehicleState<f64>| s.v.abs().max(1e-9);
            for (name, s, state) in [
                ("C", &b.s_c, &self.initial.cav_c),
                ("1", &b.s_1, &self.initial.cav_1),
                ("U", &b.s_u, &self.initial.slow),
                ("H", &b.s_h, &self.initial.hdv),
            ] {
                let mean_interval = s[0] / speed(state);
                if mean_interval < 5.0 * self.micro_step {
                    warnings.push(format!(
                        "s_x = {} for vehicle {name} at {} m/s implies about {:.2} ms between events, below 5 micro-steps",
                        s[0],
                        state.v,
                        mean_interval * 1e3
                    ));
                }
            }
        }
        Ok(warnings)
    }
}
