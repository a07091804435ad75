//! The paced world behind a live session. Wall-clock time is passed in
//! explicitly so the logic runs the same under a real or a scripted clock.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use mixedlane_core::barrier::Cav;
use mixedlane_core::controller::Outcome;
use mixedlane_core::policy::{clamp_hdv_control, HdvCommand, HdvPolicy, TimedCommand};
use mixedlane_core::scenario::ScenarioConfig;
use mixedlane_core::sim::{RunStatus, Simulation, TrajectoryLog};
use mixedlane_core::Control;

use crate::protocol::{Axes, ClientMsg, EventMarker, RunState, ServerMsg, StateFrame, PROTOCOL_VERSION};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct SessionConfig {
    /// Named scenarios a client may reset to.
    pub scenarios: BTreeMap<String, ScenarioConfig>,
    pub default_scenario: String,
    /// Real-time factor; 0 starts paused.
    pub pacing: f64,
    pub dead_man_after: Duration,
    pub frame_interval: Duration,
}

impl SessionConfig {
    pub fn single(name: &str, scenario: ScenarioConfig) -> Self {
        Self {
            scenarios: BTreeMap::from([(name.to_string(), scenario)]),
            default_scenario: name.to_string(),
            pacing: 1.0,
            dead_man_after: Duration::from_millis(500),
            frame_interval: Duration::from_secs(1) / 30,
        }
    }
}

/// A finished run together with the HDV commands that drove it.
#[derive(Debug, Clone)]
pub struct RecordedRun {
    pub session: u64,
    pub run: u64,
    pub scenario: String,
    pub commands: Vec<TimedCommand>,
    /// Its header names the replay policy, so replaying reproduces it byte for byte.
    pub log: TrajectoryLog,
}

impl RecordedRun {
    pub fn replay_policy(&self) -> HdvPolicy {
        HdvPolicy::Replay {
            commands: self.commands.clone(),
        }
    }
}

struct ActiveRun {
    id: u64,
    scenario: String,
    sim: Simulation,
    commands: Vec<TimedCommand>,
    /// Simulated seconds owed to the wall clock.
    target: f64,
    last_tick: Instant,
    last_input: Instant,
    dead_man: bool,
    event_cursor: usize,
    recorded: bool,
}

pub struct Session {
    id: u64,
    config: SessionConfig,
    run: Option<ActiveRun>,
    runs_started: u64,
    pacing: f64,
    paused: bool,
    seq: u64,
    last_frame: Option<Instant>,
    finished: Vec<RecordedRun>,
}

impl Session {
    pub fn new(id: u64, config: SessionConfig) -> Result<Self> {
        if !config.scenarios.contains_key(&config.default_scenario) {
            return Err(Error::UnknownScenario(config.default_scenario.clone()));
        }
        for sc in config.scenarios.values() {
            sc.validate()?;
        }
        if !(config.pacing >= 0.0 && config.pacing.is_finite()) {
            return Err(Error::Malformed("pacing must be a finite non-negative factor".into()));
        }
        Ok(Self {
            id,
            pacing: config.pacing,
            config,
            run: None,
            runs_started: 0,
            paused: false,
            seq: 0,
            last_frame: None,
            finished: Vec::new(),
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn is_active(&self) -> bool {
        self.run.as_ref().is_some_and(|r| r.sim.status() == RunStatus::Running)
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    /// Micro-step index of the current run.
    pub fn step(&self) -> Option<u64> {
        self.run.as_ref().map(|r| r.sim.step())
    }

    pub fn time(&self) -> Option<f64> {
        self.run.as_ref().map(|r| r.sim.time())
    }

    pub fn dead_man(&self) -> bool {
        self.run.as_ref().is_some_and(|r| r.dead_man)
    }

    /// Starts a run. A pacing factor of 0 starts paused; resuming then runs at real time.
    pub fn start(&mut self, scenario: Option<&str>, pacing: Option<f64>, now: Instant) -> Result<u64> {
        if self.is_active() {
            return Err(Error::Busy);
        }
        self.begin(scenario, pacing, now)
    }

    /// Abandons any current run and starts a fresh one.
    pub fn reset(&mut self, scenario: Option<&str>, now: Instant) -> Result<u64> {
        let name = scenario
            .or(self.run.as_ref().map(|r| r.scenario.as_str()))
            .map(str::to_owned);
        self.begin(name.as_deref(), None, now)
    }

    fn begin(&mut self, scenario: Option<&str>, pacing: Option<f64>, now: Instant) -> Result<u64> {
        let name = scenario.unwrap_or(&self.config.default_scenario).to_string();
        let config = self
            .config
            .scenarios
            .get(&name)
            .cloned()
            .ok_or_else(|| Error::UnknownScenario(name.clone()))?;
        let sim = Simulation::new(config, HdvPolicy::External)?;
        if let Some(p) = pacing {
            self.pacing = p;
        }
        self.paused = self.pacing == 0.0;
        if self.paused {
            self.pacing = 1.0;
        }
        self.runs_started += 1;
        self.run = Some(ActiveRun {
            id: self.runs_started,
            scenario: name,
            sim,
            commands: Vec::new(),
            target: 0.0,
            last_tick: now,
            last_input: now,
            dead_man: false,
            event_cursor: 0,
            recorded: false,
        });
        self.last_frame = None;
        Ok(self.runs_started)
    }

    pub fn hello(&self) -> ServerMsg {
        let (name, config) = match &self.run {
            Some(r) => (r.scenario.clone(), r.sim.config().clone()),
            None => {
                let name = self.config.default_scenario.clone();
                let config = self.config.scenarios[&name].clone();
                (name, config)
            }
        };
        let axes = [("C", Cav::C), ("1", Cav::One)]
            .into_iter()
            .map(|(k, cav)| {
                let (a, b) = config.barrier.axes(cav);
                (k.to_string(), Axes { a, b })
            })
            .collect();
        ServerMsg::Hello {
            proto: PROTOCOL_VERSION,
            session: self.id,
            run: self.run.as_ref().map_or(0, |r| r.id),
            scenario: name,
            lane_width: config.lane_width,
            micro_step: config.micro_step,
            axes,
            frame_hz: 1.0 / self.config.frame_interval.as_secs_f64(),
        }
    }

    /// Applies one client message; returns the replies for that client.
    pub fn handle(&mut self, msg: ClientMsg, now: Instant) -> Vec<ServerMsg> {
        match self.try_handle(msg, now) {
            Ok(replies) => replies,
            Err(e) => vec![ServerMsg::error(&e)],
        }
    }

    fn try_handle(&mut self, msg: ClientMsg, now: Instant) -> Result<Vec<ServerMsg>> {
        match msg {
            ClientMsg::Control { u, phi, .. } => {
                let ack = self.apply_control(Control::new(u, phi), now)?;
                Ok(vec![ack])
            }
            ClientMsg::Pause => {
                self.catch_up(now);
                self.paused = true;
                Ok(vec![ServerMsg::ack("pause")])
            }
            ClientMsg::Resume => {
                if let Some(r) = &mut self.run {
                    r.last_tick = now;
                }
                self.paused = false;
                Ok(vec![ServerMsg::ack("resume")])
            }
            ClientMsg::Reset { scenario } => {
                self.reset(scenario.as_deref(), now)?;
                Ok(vec![ServerMsg::ack("reset"), self.hello()])
            }
            ClientMsg::Start { scenario, pacing } => {
                self.start(scenario.as_deref(), pacing, now)?;
                Ok(vec![ServerMsg::ack("start"), self.hello()])
            }
        }
    }

    /// Clamps and installs a human control from the next micro-step on.
    pub fn apply_control(&mut self, requested: Control, now: Instant) -> Result<ServerMsg> {
        if !self.is_active() {
            return Err(Error::NoActiveRun);
        }
        let run = self.run.as_mut().expect("active run");
        let (applied, clamped) = clamp_hdv_control(requested);
        let cmd = HdvCommand::Manual {
            u: applied.u,
            phi: applied.phi,
        };
        let step = run.sim.step();
        run.sim.set_external_command(cmd);
        run.commands.push(TimedCommand { step, command: cmd });
        run.last_input = now;
        run.dead_man = false;
        Ok(ServerMsg::Ack {
            of: "control".into(),
            u: Some(applied.u),
            phi: Some(applied.phi),
            clamped: Some(clamped),
            step: Some(step),
        })
    }

    /// Advances the world to the paced target for `now`.
    fn catch_up(&mut self, now: Instant) {
        let paused = self.paused;
        let pacing = self.pacing;
        let dead_man_after = self.config.dead_man_after;
        let Some(run) = &mut self.run else { return };
        if run.sim.status() != RunStatus::Running {
            return;
        }
        let elapsed = now.saturating_duration_since(run.last_tick);
        run.last_tick = now;
        if paused {
            return;
        }
        run.target += elapsed.as_secs_f64() * pacing;
        if !run.dead_man && now.saturating_duration_since(run.last_input) > dead_man_after {
            run.dead_man = true;
            let step = run.sim.step();
            run.sim.set_external_command(HdvCommand::DeadMan);
            run.commands.push(TimedCommand {
                step,
                command: HdvCommand::DeadMan,
            });
        }
        let dt = run.sim.config().micro_step;
        while (run.sim.step() as f64 + 1.0) * dt <= run.target + 1e-9 {
            if let RunStatus::Finished(_) = run.sim.advance() {
                break;
            }
        }
        if run.sim.status() != RunStatus::Running && !run.recorded {
            run.recorded = true;
            self.finished.push(record(self.id, run));
        }
    }

    /// Advances the paced world and returns a state frame when one is due.
    pub fn tick(&mut self, now: Instant) -> Option<ServerMsg> {
        self.catch_up(now);
        let due = self
            .last_frame
            .is_none_or(|t| now.saturating_duration_since(t) >= self.config.frame_interval);
        if !due || self.run.is_none() {
            return None;
        }
        self.last_frame = Some(now);
        Some(self.frame())
    }

    /// A state frame for the current world, consuming pending event markers.
    pub fn frame(&mut self) -> ServerMsg {
        let paused = self.paused;
        self.seq += 1;
        let seq = self.seq;
        let run = self.run.as_mut().expect("a run exists");
        let sim = &run.sim;
        let config = sim.config();
        let states = *sim.states();
        let ellipses = [("C", Cav::C, states.cav_c.v), ("1", Cav::One, states.cav_1.v)]
            .into_iter()
            .map(|(k, cav, v)| {
                let (a, b) = config.barrier.axes(cav);
                (k.to_string(), Axes { a: a * v, b: b * v })
            })
            .collect();
        let events = sim.events()[run.event_cursor..]
            .iter()
            .map(|e| EventMarker { t: e.t, kind: e.kind })
            .collect();
        run.event_cursor = sim.events().len();
        let status = match sim.status() {
            RunStatus::Running => RunState::Running,
            RunStatus::Finished(Outcome::Complete) => RunState::Complete,
            RunStatus::Finished(Outcome::Abort) => RunState::Abort,
        };
        ServerMsg::State(Box::new(StateFrame {
            seq,
            run: run.id,
            t: sim.time(),
            step: sim.step(),
            vehicles: states,
            barriers: sim.barriers(),
            ellipses,
            hdv_control: sim.steps().last().map_or(Control::zero(), |s| s.controls.hdv),
            dead_man: run.dead_man,
            paused,
            events,
            status,
        }))
    }

    /// Runs that ended since the last call.
    pub fn take_finished(&mut self) -> Vec<RecordedRun> {
        std::mem::take(&mut self.finished)
    }
}

fn record(session: u64, run: &ActiveRun) -> RecordedRun {
    let mut log = run.sim.to_log();
    log.header.policy = HdvPolicy::Replay {
        commands: run.commands.clone(),
    };
    RecordedRun {
        session,
        run: run.id,
        scenario: run.scenario.clone(),
        commands: run.commands.clone(),
        log,
    }
}
