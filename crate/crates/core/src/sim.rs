//! The world loop, trajectory log and run metrics.

use std::io::{BufRead, Write};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::barrier::{barrier_value, BarrierParams, PairId};
use crate::controller::{
    check_termination, ControlMode, Controller, EventKind, Outcome, QpDiagnostics, TriggerDetail, WorldView,
};
use crate::error::{Error, Result};
use crate::policy::{clamp_hdv_control, HdvCommand, HdvPolicy, PolicyRunner, PolicyView};
use crate::scenario::ScenarioConfig;
use crate::vehicle::{
    cav_derivative, drift_derivative, hdv_true_derivative_with, integrate_step, ControlInput, VehicleState,
};

/// Version of the JSONL log layout.
pub const LOG_SCHEMA: u32 = 1;

const DISTURBANCE_STREAM: u64 = 1;
const POLICY_STREAM: u64 = 2;

/// The two random streams of a run. Cases sharing a seed see identical draws.
pub fn rng_streams(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut dist = ChaCha8Rng::seed_from_u64(seed);
    dist.set_stream(DISTURBANCE_STREAM);
    let mut policy = ChaCha8Rng::seed_from_u64(seed);
    policy.set_stream(POLICY_STREAM);
    (dist, policy)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BarrierValues {
    #[serde(rename = "CH")]
    pub ch: f64,
    #[serde(rename = "1C")]
    pub one_c: f64,
    #[serde(rename = "1H")]
    pub one_h: f64,
    #[serde(rename = "CU")]
    pub cu: f64,
}

impl BarrierValues {
    pub fn from_fn(mut f: impl FnMut(PairId) -> f64) -> Self {
        Self {
            ch: f(PairId::CH),
            one_c: f(PairId::OneC),
            one_h: f(PairId::OneH),
            cu: f(PairId::CU),
        }
    }

    /// True-state barrier values.
    pub fn of(states: &WorldStates, params: &BarrierParams<f64>) -> Self {
        Self::from_fn(|pair| {
            let (ego, other) = match pair {
                PairId::CH => (&states.cav_c, &states.hdv),
                PairId::OneC => (&states.cav_1, &states.cav_c),
                PairId::OneH => (&states.cav_1, &states.hdv),
                PairId::CU => (&states.cav_c, &states.slow),
            };
            barrier_value(pair, ego, other, params)
        })
    }

    pub fn get(&self, pair: PairId) -> f64 {
        match pair {
            PairId::CH => self.ch,
            PairId::OneC => self.one_c,
            PairId::OneH => self.one_h,
            PairId::CU => self.cu,
        }
    }

    pub fn min(&self) -> f64 {
        self.ch.min(self.one_c).min(self.one_h).min(self.cu)
    }

    fn min_with(&self, other: &Self) -> Self {
        Self::from_fn(|p| self.get(p).min(other.get(p)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldStates {
    #[serde(rename = "C")]
    pub cav_c: VehicleState<f64>,
    #[serde(rename = "1")]
    pub cav_1: VehicleState<f64>,
    #[serde(rename = "H")]
    pub hdv: VehicleState<f64>,
    #[serde(rename = "U")]
    pub slow: VehicleState<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AppliedControls {
    #[serde(rename = "C")]
    pub cav_c: ControlInput<f64>,
    #[serde(rename = "1")]
    pub cav_1: ControlInput<f64>,
    /// After clamping to the physical HDV limits.
    #[serde(rename = "H")]
    pub hdv: ControlInput<f64>,
}

/// World at `t = step * micro_step` and the controls held over the following micro-step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub t: f64,
    pub states: WorldStates,
    pub controls: AppliedControls,
    pub barriers: BarrierValues,
    /// Controller's HDV estimate; absent when the HDV model is known.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hdv_estimate: Option<VehicleState<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub step: u64,
    pub t: f64,
    pub kind: EventKind,
    /// What prompted a fallback solve.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cause: Option<EventKind>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub detail: Option<TriggerDetail>,
    /// Controls for C and 1 from this instant on.
    pub controls: [ControlInput<f64>; 2],
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub qps: Vec<QpDiagnostics>,
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    pub sign_oscillation: bool,
}

impl EventRecord {
    /// Whether the controller solved for new controls here.
    pub fn is_control_instant(&self) -> bool {
        !matches!(self.kind, EventKind::Termination | EventKind::Abort)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub schema: u32,
    pub seed: u64,
    pub config: ScenarioConfig,
    pub policy: HdvPolicy,
}

/// Counters for conditions that degrade the run without stopping it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Degradation {
    pub infeasible_fallbacks: u64,
    pub sign_oscillations: u64,
    pub hdv_clamped_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub header: LogHeader,
    pub steps: Vec<StepRecord>,
    pub events: Vec<EventRecord>,
    pub outcome: Outcome,
    pub t_f: f64,
    pub degraded: Degradation,
    /// Wall-clock QP times; not serialized so that logs stay reproducible.
    #[serde(skip)]
    pub solve_times: Vec<Duration>,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogLine<'a> {
    Header(&'a LogHeader),
    Event(&'a EventRecord),
    Step(&'a StepRecord),
    Summary {
        outcome: Outcome,
        t_f: f64,
        degraded: &'a Degradation,
        metrics: &'a Metrics,
    },
}

#[derive(Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum OwnedLogLine {
    Header(LogHeader),
    Event(EventRecord),
    Step(StepRecord),
    Summary {
        outcome: Outcome,
        t_f: f64,
        degraded: Degradation,
    },
}

impl TrajectoryLog {
    /// Reads a log written by [`TrajectoryLog::write_jsonl`].
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut header = None;
        let mut steps = Vec::new();
        let mut events = Vec::new();
        let mut summary = None;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: OwnedLogLine =
                serde_json::from_str(&line).map_err(|e| Error::Parse(format!("log line {}: {e}", i + 1)))?;
            match parsed {
                OwnedLogLine::Header(h) => header = Some(h),
                OwnedLogLine::Event(e) => events.push(e),
                OwnedLogLine::Step(s) => steps.push(s),
                OwnedLogLine::Summary { outcome, t_f, degraded } => summary = Some((outcome, t_f, degraded)),
            }
        }
        let header = header.ok_or_else(|| Error::Parse("log has no header line".into()))?;
        if header.schema != LOG_SCHEMA {
            return Err(Error::Parse(format!(
                "log schema {} is not supported (expected {LOG_SCHEMA})",
                header.schema
            )));
        }
        let (outcome, t_f, degraded) = summary.ok_or_else(|| Error::Parse("log has no summary line".into()))?;
        Ok(Self {
            header,
            steps,
            events,
            outcome,
            t_f,
            degraded,
            solve_times: Vec::new(),
        })
    }

    /// Writes one JSON object per line: header, events and steps in step order
    /// (an event precedes the step record of its instant), then a summary.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let mut line = |l: &LogLine| -> Result<()> {
            serde_json::to_writer(&mut w, l)?;
            w.write_all(b"\n")?;
            Ok(())
        };
        line(&LogLine::Header(&self.header))?;
        let mut events = self.events.iter().peekable();
        for s in &self.steps {
            while let Some(e) = events.next_if(|e| e.step <= s.step) {
                line(&LogLine::Event(e))?;
            }
            line(&LogLine::Step(s))?;
        }
        for e in events {
            line(&LogLine::Event(e))?;
        }
        let metrics = compute_metrics(self);
        line(&LogLine::Summary {
            outcome: self.outcome,
            t_f: self.t_f,
            degraded: &self.degraded,
            metrics: &metrics,
        })?;
        w.flush()?;
        Ok(())
    }

    pub fn to_jsonl_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_jsonl(&mut out).expect("writing to memory");
        out
    }

    pub fn control_instants(&self) -> impl Iterator<Item = &EventRecord> {
        self.events.iter().filter(|e| e.is_control_instant())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MergeSide {
    /// C ends up ahead of the HDV.
    #[serde(rename = "A-HDV")]
    Ahead,
    #[serde(rename = "B-HDV")]
    Behind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveTiming {
    pub count: usize,
    pub mean_ms: f64,
    pub max_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Minimum true barrier value per pair over all micro-steps.
    pub min_barrier: BarrierValues,
    pub outcome: Outcome,
    pub t_f: f64,
    /// `sum u_C^2 dt` over the maneuver.
    pub energy: f64,
    /// Only for completed runs.
    pub merge_side: Option<MergeSide>,
    pub trigger_count: usize,
    #[serde(skip)]
    pub solve_timing: Option<SolveTiming>,
}

impl Metrics {
    pub fn safety(&self) -> f64 {
        self.min_barrier.ch
    }

    pub fn violated(&self) -> bool {
        self.min_barrier.min() < 0.0
    }
}

pub fn compute_metrics(log: &TrajectoryLog) -> Metrics {
    let inf = f64::INFINITY;
    let min_barrier = log.steps.iter().fold(
        BarrierValues {
            ch: inf,
            one_c: inf,
            one_h: inf,
            cu: inf,
        },
        |m, s| m.min_with(&s.barriers),
    );
    let dt = log.header.config.micro_step;
    let held = log.steps.len().saturating_sub(1);
    let energy = log.steps[..held]
        .iter()
        .map(|s| s.controls.cav_c.u * s.controls.cav_c.u * dt)
        .sum();
    let merge_side = match (log.outcome, log.steps.last()) {
        (Outcome::Complete, Some(last)) => Some(if last.states.cav_c.x > last.states.hdv.x {
            MergeSide::Ahead
        } else {
            MergeSide::Behind
        }),
        _ => None,
    };
    let solve_timing = (!log.solve_times.is_empty()).then(|| {
        let ms: Vec<f64> = log.solve_times.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        SolveTiming {
            count: ms.len(),
            mean_ms: ms.iter().sum::<f64>() / ms.len() as f64,
            max_ms: ms.iter().cloned().fold(0.0, f64::max),
        }
    });
    Metrics {
        min_barrier,
        outcome: log.outcome,
        t_f: log.t_f,
        energy,
        merge_side,
        trigger_count: log.control_instants().count(),
        solve_timing,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Running,
    Finished(Outcome),
}

/// One world: four vehicles, the controller, the HDV policy and the log being built.
#[derive(Debug, Clone)]
pub struct Simulation {
    config: ScenarioConfig,
    controller: Controller,
    policy: PolicyRunner,
    disturbance_rng: ChaCha8Rng,
    states: WorldStates,
    step: u64,
    status: RunStatus,
    steps: Vec<StepRecord>,
    events: Vec<EventRecord>,
    degraded: Degradation,
    solve_times: Vec<Duration>,
    period: u64,
}

impl Simulation {
    pub fn new(config: ScenarioConfig, policy: HdvPolicy) -> Result<Self> {
        for w in config.validate()? {
            log::warn!("{w}");
        }
        let (disturbance_rng, policy_rng) = rng_streams(config.seed);
        let init = config.initial;
        Ok(Self {
            controller: Controller::new(config.control_params(), init.hdv),
            policy: PolicyRunner::new(policy, policy_rng, config.micro_step),
            disturbance_rng,
            states: WorldStates {
                cav_c: init.cav_c,
                cav_1: init.cav_1,
                hdv: init.hdv,
                slow: init.slow,
            },
            step: 0,
            status: RunStatus::Running,
            steps: Vec::new(),
            events: Vec::new(),
            degraded: Degradation::default(),
            solve_times: Vec::new(),
            period: config.steps_per_period(),
            config,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn status(&self) -> RunStatus {
        self.status
    }

    /// Index of the next micro-step to be computed.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.config.micro_step
    }

    pub fn states(&self) -> &WorldStates {
        &self.states
    }

    pub fn barriers(&self) -> BarrierValues {
        BarrierValues::of(&self.states, &self.config.barrier)
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn events(&self) -> &[EventRecord] {
        &self.events
    }

    /// Command followed by an external policy from the next micro-step on.
    pub fn set_external_command(&mut self, cmd: HdvCommand) {
        self.policy.set_external(cmd);
    }

    fn finish(&mut self, outcome: Outcome) {
        let t = self.time();
        let held = self.controller.controls();
        self.steps.push(StepRecord {
            step: self.step,
            t,
            states: self.states,
            controls: AppliedControls {
                cav_c: held[0],
                cav_1: held[1],
                hdv: ControlInput::zero(),
            },
            barriers: self.barriers(),
            hdv_estimate: self.estimate(),
        });
        self.events.push(EventRecord {
            step: self.step,
            t,
            kind: match outcome {
                Outcome::Complete => EventKind::Termination,
                Outcome::Abort => EventKind::Abort,
            },
            cause: None,
            detail: None,
            controls: held,
            qps: Vec::new(),
            sign_oscillation: false,
        });
        self.status = RunStatus::Finished(outcome);
    }

    fn estimate(&self) -> Option<VehicleState<f64>> {
        (!self.config.controller.hdv_known).then(|| self.controller.estimator().state)
    }

    /// Advances one micro-step. Returns the status afterwards.
    pub fn advance(&mut self) -> RunStatus {
        if self.status != RunStatus::Running {
            return self.status;
        }
        let cfg = &self.config;
        let dt = cfg.micro_step;
        let t = self.time();
        if let Some(outcome) = check_termination(self.states.cav_c.y, t, cfg.lane_width, &cfg.controller) {
            self.finish(outcome);
            return self.status;
        }

        let held = self.controller.controls();
        let view = PolicyView {
            hdv: self.states.hdv,
            cav_c: self.states.cav_c,
            cav_c_lateral_speed: cav_derivative(&self.states.cav_c, &held[0], cfg.wheelbase).y,
            lane_width: cfg.lane_width,
        };
        let (mut u_h, mut clamped) = clamp_hdv_control(self.policy.control(self.step, &view));
        let d = cfg.disturbance.sample(&mut self.disturbance_rng);
        let hdv_rate = hdv_true_derivative_with(&self.states.hdv, &u_h, cfg.wheelbase, &d);
        let mut world = WorldView {
            cav_c: self.states.cav_c,
            cav_1: self.states.cav_1,
            hdv: self.states.hdv,
            hdv_rate,
            slow: self.states.slow,
        };

        let trigger = if self.step == 0 {
            Some((EventKind::Initial, None))
        } else {
            match cfg.controller.mode {
                ControlMode::Time => self
                    .step
                    .is_multiple_of(self.period)
                    .then_some((EventKind::Periodic, None)),
                ControlMode::Event => self
                    .controller
                    .check_trigger(&world)
                    .map(|tr| (tr.kind, Some(tr.detail))),
            }
        };
        if let Some((kind, detail)) = trigger {
            // Triggers see the HDV input held so far; the controller synchronizes
            // on whatever the HDV applies from this instant on.
            if self.policy.on_control_instant() {
                (u_h, clamped) = clamp_hdv_control(self.policy.control(self.step, &view));
                world.hdv_rate = hdv_true_derivative_with(&self.states.hdv, &u_h, self.config.wheelbase, &d);
            }
            let update = self.controller.update(&world);
            self.solve_times.extend(update.qps.iter().map(|q| q.solve_time));
            if update.sign_oscillation {
                self.degraded.sign_oscillations += 1;
            }
            let (kind, cause) = if update.feasible {
                (kind, None)
            } else {
                self.degraded.infeasible_fallbacks += 1;
                (EventKind::InfeasibleFallback, Some(kind))
            };
            self.events.push(EventRecord {
                step: self.step,
                t,
                kind,
                cause,
                detail,
                controls: update.controls,
                qps: update.qps,
                sign_oscillation: update.sign_oscillation,
            });
        }

        if clamped {
            self.degraded.hdv_clamped_steps += 1;
        }
        let cfg = &self.config;
        let [u_c, u_1] = self.controller.controls();
        self.steps.push(StepRecord {
            step: self.step,
            t,
            states: self.states,
            controls: AppliedControls {
                cav_c: u_c,
                cav_1: u_1,
                hdv: u_h,
            },
            barriers: BarrierValues::of(&self.states, &cfg.barrier),
            hdv_estimate: (!cfg.controller.hdv_known).then(|| self.controller.estimator().state),
        });

        let lw = cfg.wheelbase;
        let floor = |mut s: VehicleState<f64>| {
            s.v = s.v.max(0.0);
            s
        };
        self.states = WorldStates {
            cav_c: floor(integrate_step(&self.states.cav_c, |s| cav_derivative(s, &u_c, lw), dt)),
            cav_1: floor(integrate_step(&self.states.cav_1, |s| cav_derivative(s, &u_1, lw), dt)),
            hdv: floor(integrate_step(
                &self.states.hdv,
                |s| hdv_true_derivative_with(s, &u_h, lw, &d),
                dt,
            )),
            slow: integrate_step(&self.states.slow, drift_derivative, dt),
        };
        self.controller.propagate(dt);
        self.step += 1;
        self.status
    }

    /// Runs until the maneuver completes or aborts.
    pub fn run_to_end(&mut self) -> Outcome {
        loop {
            if let RunStatus::Finished(o) = self.advance() {
                return o;
            }
        }
    }

    /// The log so far. For a running world `outcome` is provisional.
    pub fn into_log(self) -> TrajectoryLog {
        let (outcome, t_f) = self.outcome_so_far();
        TrajectoryLog {
            header: LogHeader {
                schema: LOG_SCHEMA,
                seed: self.config.seed,
                policy: self.policy.policy().clone(),
                config: self.config,
            },
            steps: self.steps,
            events: self.events,
            outcome,
            t_f,
            degraded: self.degraded,
            solve_times: self.solve_times,
        }
    }

    /// Like [`Simulation::into_log`], without consuming the world.
    pub fn to_log(&self) -> TrajectoryLog {
        let (outcome, t_f) = self.outcome_so_far();
        TrajectoryLog {
            header: LogHeader {
                schema: LOG_SCHEMA,
                seed: self.config.seed,
                policy: self.policy.policy().clone(),
                config: self.config.clone(),
            },
            steps: self.steps.clone(),
            events: self.events.clone(),
            outcome,
            t_f,
            degraded: self.degraded,
            solve_times: self.solve_times.clone(),
        }
    }

    fn outcome_so_far(&self) -> (Outcome, f64) {
        match self.status {
            RunStatus::Finished(o) => (o, self.time()),
            RunStatus::Running => (Outcome::Abort, self.time()),
        }
    }
}

/// Runs a full scenario with the given HDV policy.
pub fn run_scenario(config: ScenarioConfig, policy: HdvPolicy) -> Result<TrajectoryLog> {
    let mut sim = Simulation::new(config, policy)?;
    sim.run_to_end();
    Ok(sim.into_log())
}
