//! A scripted headless client speaking the wire protocol to a real server.

use std::net::TcpStream;
use std::time::{Duration, Instant};

use mixedlane_core::barrier::Cav;
use mixedlane_core::controller::ControlMode;
use mixedlane_core::scenario::ScenarioConfig;
use mixedlane_core::sim::run_scenario;
use mixedlane_live::protocol::{RunState, StateFrame};
use mixedlane_live::{ClientMsg, Server, ServerHandle, ServerMsg, SessionConfig};
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message, WebSocket};

struct Client {
    ws: WebSocket<MaybeTlsStream<TcpStream>>,
}

impl Client {
    fn connect(server: &ServerHandle) -> Self {
        let (ws, _) = tungstenite::connect(format!("ws://{}", server.local_addr())).unwrap();
        if let MaybeTlsStream::Plain(s) = ws.get_ref() {
            s.set_read_timeout(Some(Duration::from_millis(20))).unwrap();
        }
        Self { ws }
    }

    fn send(&mut self, msg: &ClientMsg) {
        self.ws.send(Message::text(msg.to_text())).unwrap();
    }

    fn recv(&mut self) -> Option<ServerMsg> {
        match self.ws.read() {
            Ok(Message::Text(t)) => Some(ServerMsg::parse(&t).unwrap()),
            Ok(_) => None,
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) =>
            {
                None
            }
            Err(e) => panic!("{e}"),
        }
    }

    fn recv_until(&mut self, within: Duration, mut pred: impl FnMut(&ServerMsg) -> bool) -> Vec<ServerMsg> {
        let end = Instant::now() + within;
        let mut seen = Vec::new();
        while Instant::now() < end {
            if let Some(m) = self.recv() {
                let done = pred(&m);
                seen.push(m);
                if done {
                    return seen;
                }
            }
        }
        panic!(
            "condition not met; last messages: {:?}",
            seen.iter().rev().take(3).collect::<Vec<_>>()
        );
    }
}

fn state(m: &ServerMsg) -> Option<&StateFrame> {
    match m {
        ServerMsg::State(f) => Some(f),
        _ => None,
    }
}

fn serve(mode: ControlMode, pacing: f64) -> ServerHandle {
    let mut cfg = SessionConfig::single("default", ScenarioConfig::default().with_mode(mode));
    cfg.pacing = pacing;
    Server::bind("127.0.0.1:0", cfg).unwrap().spawn()
}

#[test]
fn headless_session_round_trip() {
    let server = serve(ControlMode::Event, 1.0);
    let mut c = Client::connect(&server);
    let hello = c.recv_until(Duration::from_secs(2), |m| matches!(m, ServerMsg::Hello { .. }));
    let ServerMsg::Hello {
        proto,
        lane_width,
        axes,
        ..
    } = hello.last().unwrap().clone()
    else {
        unreachable!()
    };
    assert_eq!(proto, 1);
    assert_eq!(lane_width, 4.0);

    // A second client is turned away while this one holds the session.
    let mut other = Client::connect(&server);
    let busy = other.recv_until(Duration::from_secs(2), |m| matches!(m, ServerMsg::Error { .. }));
    assert!(matches!(busy.last(), Some(ServerMsg::Error { msg }) if msg.contains("busy")));
    c.send(&ClientMsg::Start {
        scenario: None,
        pacing: None,
    });
    c.recv_until(
        Duration::from_secs(2),
        |m| matches!(m, ServerMsg::Error { msg } if msg.contains("busy")),
    );

    c.send(&ClientMsg::Control {
        u: 10.0,
        phi: 0.0,
        t: Some(0.0),
    });
    let acks = c.recv_until(Duration::from_secs(2), |m| matches!(m, ServerMsg::Ack { .. }));
    assert!(matches!(
        acks.last(),
        Some(ServerMsg::Ack { u: Some(u), clamped: Some(true), .. }) if *u == 7.0
    ));

    // Control frames at 20 Hz for a second.
    let mut frames = Vec::new();
    let start = Instant::now();
    let mut next_send = start;
    while start.elapsed() < Duration::from_secs(1) {
        if Instant::now() >= next_send {
            c.send(&ClientMsg::Control {
                u: 0.5,
                phi: 0.0,
                t: Some(start.elapsed().as_millis() as f64),
            });
            next_send += Duration::from_millis(50);
        }
        if let Some(m) = c.recv() {
            if let Some(f) = state(&m) {
                frames.push(f.clone());
            }
        }
    }
    assert!(frames.len() >= 20, "{}", frames.len());
    for w in frames.windows(2) {
        assert!(w[1].seq > w[0].seq && w[1].t >= w[0].t);
    }
    let (a_c, b_c) = (axes["C"].a, axes["C"].b);
    let (a_1, b_1) = ScenarioConfig::default().barrier.axes(Cav::One);
    for f in &frames {
        let (vc, v1) = (f.vehicles.cav_c.v, f.vehicles.cav_1.v);
        assert!((f.ellipses["C"].a - a_c * vc).abs() < 1e-9 && (f.ellipses["C"].b - b_c * vc).abs() < 1e-9);
        assert!((f.ellipses["1"].a - a_1 * v1).abs() < 1e-9 && (f.ellipses["1"].b - b_1 * v1).abs() < 1e-9);
        assert!(!f.dead_man);
        assert_eq!(f.status, RunState::Running);
    }

    // Silence: the dead man takes over after 500 ms.
    let silent = Instant::now();
    let seen = c.recv_until(Duration::from_secs(2), |m| state(m).is_some_and(|f| f.dead_man));
    let waited = silent.elapsed();
    assert!(
        waited >= Duration::from_millis(450) && waited < Duration::from_millis(700),
        "{waited:?}"
    );
    assert!(seen.iter().filter_map(state).rev().skip(1).all(|f| !f.dead_man));

    c.send(&ClientMsg::Pause);
    c.recv_until(
        Duration::from_secs(1),
        |m| matches!(m, ServerMsg::Ack { of, .. } if of == "pause"),
    );
    let t_paused = c.recv_until(Duration::from_secs(1), |m| state(m).is_some_and(|f| f.paused));
    let t_paused = state(t_paused.last().unwrap()).unwrap().t;
    std::thread::sleep(Duration::from_millis(200));
    let later = c.recv_until(Duration::from_secs(1), |m| state(m).is_some());
    assert_eq!(state(later.last().unwrap()).unwrap().t, t_paused);

    c.send(&ClientMsg::Reset { scenario: None });
    let after = c.recv_until(Duration::from_secs(2), |m| matches!(m, ServerMsg::Hello { run: 2, .. }));
    assert!(after
        .iter()
        .any(|m| matches!(m, ServerMsg::Ack { of, .. } if of == "reset")));
    drop(c);
    server.shutdown();
}

/// At factor 1.0 the streamed clock tracks wall time within 2 %.
#[test]
fn real_time_pacing() {
    let server = serve(ControlMode::Event, 1.0);
    let mut c = Client::connect(&server);
    let first = c.recv_until(Duration::from_secs(2), |m| state(m).is_some());
    let (wall0, t0) = (Instant::now(), state(first.last().unwrap()).unwrap().t);
    let last = c.recv_until(Duration::from_secs(4), |m| state(m).is_some_and(|f| f.t - t0 >= 2.5));
    let sim = state(last.last().unwrap()).unwrap().t - t0;
    let wall = wall0.elapsed().as_secs_f64();
    assert!((sim - wall).abs() <= 0.02 * wall + 0.04, "sim {sim} wall {wall}");
    server.shutdown();
}

#[test]
fn recorded_session_replays_exactly() {
    let server = serve(ControlMode::Event, 8.0);
    let mut c = Client::connect(&server);
    let start = Instant::now();
    let mut n = 0u32;
    let mut end = None;
    while start.elapsed() < Duration::from_secs(20) {
        if n < 40 {
            n += 1;
            let u = (n as f64 * 0.7).sin() * 2.0;
            c.send(&ClientMsg::Control {
                u,
                phi: 0.02 * (n as f64).cos(),
                t: None,
            });
        }
        if let Some(m) = c.recv() {
            if let Some(f) = state(&m).filter(|f| f.status != RunState::Running) {
                end = Some(f.status);
                break;
            }
        }
    }
    assert!(end.is_some(), "run did not finish");
    let run = server.finished_runs().recv_timeout(Duration::from_secs(5)).unwrap();
    assert!(!run.commands.is_empty());
    let replayed = run_scenario(run.log.header.config.clone(), run.replay_policy()).unwrap();
    assert_eq!(replayed.to_jsonl_bytes(), run.log.to_jsonl_bytes());
    if run.log.degraded.infeasible_fallbacks == 0 {
        assert!(replayed.steps.iter().all(|s| s.barriers.min() >= 0.0));
    }
    server.shutdown();
}
