//! Wire format: one JSON object per WebSocket text frame, tagged by `type`.

use std::collections::BTreeMap;

use mixedlane_core::controller::EventKind;
use mixedlane_core::sim::{BarrierValues, WorldStates};
use mixedlane_core::Control;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMsg {
    /// HDV acceleration and steering; `t` is the client's clock in ms.
    Control {
        u: f64,
        phi: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        t: Option<f64>,
    },
    Pause,
    Resume,
    /// Restarts from the named scenario, or the current one.
    Reset {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scenario: Option<String>,
    },
    /// Starts a run when none is active.
    Start {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scenario: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pacing: Option<f64>,
    },
}

impl ClientMsg {
    pub fn parse(text: &str) -> Result<Self> {
        let msg: Self = serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))?;
        if let ClientMsg::Control { u, phi, .. } = msg {
            if !u.is_finite() || !phi.is_finite() {
                return Err(Error::Malformed("u and phi must be finite".into()));
            }
        }
        if let ClientMsg::Start { pacing: Some(p), .. } = msg {
            if !(p >= 0.0 && p.is_finite()) {
                return Err(Error::Malformed("pacing must be a finite non-negative factor".into()));
            }
        }
        Ok(msg)
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axes {
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Running,
    Complete,
    Abort,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventMarker {
    pub t: f64,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    /// Increases by one per frame over the whole session.
    pub seq: u64,
    pub run: u64,
    pub t: f64,
    pub step: u64,
    pub vehicles: WorldStates,
    pub barriers: BarrierValues,
    /// Current ellipse semi-axes `(a v, b v)` around C and 1.
    pub ellipses: BTreeMap<String, Axes>,
    /// HDV control applied over the last micro-step.
    pub hdv_control: Control,
    pub dead_man: bool,
    pub paused: bool,
    /// Events since the previous frame.
    pub events: Vec<EventMarker>,
    pub status: RunState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMsg {
    Hello {
        proto: u32,
        session: u64,
        run: u64,
        scenario: String,
        lane_width: f64,
        micro_step: f64,
        /// Ellipse semi-axis factors per CAV; multiply by speed.
        axes: BTreeMap<String, Axes>,
        frame_hz: f64,
    },
    State(Box<StateFrame>),
    Ack {
        of: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        u: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        phi: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        clamped: Option<bool>,
        /// Micro-step from which the command applies.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        step: Option<u64>,
    },
    Error {
        msg: String,
    },
}

impl ServerMsg {
    pub fn ack(of: &str) -> Self {
        ServerMsg::Ack {
            of: of.into(),
            u: None,
            phi: None,
            clamped: None,
            step: None,
        }
    }

    pub fn error(e: &Error) -> Self {
        ServerMsg::Error { msg: e.to_string() }
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn client_messages_use_normative_names() {
        assert_eq!(
            ClientMsg::parse(r#"{"type":"control","u":1.5,"phi":-0.1,"t":1200}"#).unwrap(),
            ClientMsg::Control {
                u: 1.5,
                phi: -0.1,
                t: Some(1200.0)
            }
        );
        assert_eq!(ClientMsg::parse(r#"{"type":"pause"}"#).unwrap(), ClientMsg::Pause);
        assert_eq!(ClientMsg::parse(r#"{"type":"resume"}"#).unwrap(), ClientMsg::Resume);
        assert_eq!(
            ClientMsg::parse(r#"{"type":"reset","scenario":"default"}"#).unwrap(),
            ClientMsg::Reset {
                scenario: Some("default".into())
            }
        );
    }

    #[test]
    fn malformed_messages_are_rejected() {
        for bad in [
            r#"{"type":"control","u":1}"#,
            r#"{"type":"control","u":"x","phi":0}"#,
            r#"{"type":"steer"}"#,
            r#"{"type":"start","pacing":-1}"#,
            "not json",
        ] {
            assert!(matches!(ClientMsg::parse(bad), Err(Error::Malformed(_))), "{bad}");
        }
    }

    #[test]
    fn hello_frame_shape() {
        let hello = ServerMsg::Hello {
            proto: PROTOCOL_VERSION,
            session: 1,
            run: 1,
            scenario: "default".into(),
            lane_width: 4.0,
            micro_step: 1e-3,
            axes: BTreeMap::from([("C".to_string(), Axes { a: 0.6, b: 0.1 })]),
            frame_hz: 30.0,
        };
        let v: serde_json::Value = serde_json::from_str(&hello.to_text()).unwrap();
        assert_eq!(v["type"], "hello");
        assert_eq!(v["proto"], 1);
        assert_eq!(v["axes"]["C"]["a"], 0.6);
        assert_eq!(ServerMsg::parse(&hello.to_text()).unwrap(), hello);
    }
}
