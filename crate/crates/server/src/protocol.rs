//! Frames exchanged on the `/session` endpoint. Every frame is a single
//! JSON object with `type`, `session` and `seq`; unknown fields are ignored.

use serde::{Deserialize, Serialize};

use collabarm_core::arbiter::Actor;
use collabarm_core::env::{TaskSpec, WorldState};
use collabarm_core::expert::Command;

pub const PROTOCOL: &str = "collabarm-session/1";
pub const ENDPOINT: &str = "/session";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame<B> {
    pub session: String,
    pub seq: u64,
    #[serde(flatten)]
    pub body: B,
}

impl<B: Serialize> Frame<B> {
    /// Single-line JSON text.
    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("frames serialize")
    }
}

impl<B: for<'de> Deserialize<'de>> Frame<B> {
    pub fn parse(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

pub type ClientFrame = Frame<ClientBody>;
pub type ServerFrame = Frame<ServerBody>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Controller,
    Observer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TurnState {
    /// No episode has started yet.
    Idle,
    PolicyRunning,
    AwaitingExpert,
    Terminal,
}

/// Frames sent by a client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientBody {
    /// First frame on a connection. An empty `session` opens a new session;
    /// an existing id joins (or resumes) it.
    Hello {
        #[serde(default)]
        protocol: Option<String>,
        /// Ask for observer access even if the controller slot is free.
        #[serde(default)]
        role: Option<Role>,
    },
    Start {
        task: String,
        seed: u64,
        /// Schedule label such as `N=4` or `expert-only`; defaults to the
        /// server's configured ratio.
        #[serde(default)]
        setting: Option<String>,
    },
    Action {
        command: String,
        /// Turn id from the `action_request` being answered.
        #[serde(default)]
        turn: Option<u64>,
    },
    Abort {
        #[serde(default)]
        reason: Option<String>,
    },
    Heartbeat {},
}

/// Scene description carried by state frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub task: String,
    pub gripper: [f64; 2],
    pub gripper_closed: bool,
    pub object: [f64; 2],
    pub articulation: f64,
    pub target: [f64; 2],
    /// Mechanism anchor for articulated tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<[f64; 2]>,
}

impl Scene {
    pub fn from_state(s: &WorldState) -> Self {
        Self {
            task: s.task.name().to_string(),
            gripper: s.gripper_pos,
            gripper_closed: s.gripper_closed,
            object: s.object_pos,
            articulation: s.articulation,
            target: s.target_pos,
            anchor: s.anchor(),
        }
    }
}

/// Frames sent by the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerBody {
    Hello {
        protocol: String,
        role: Role,
        turn_state: TurnState,
        setting: String,
        commands: Vec<String>,
        tasks: Vec<String>,
        heartbeat_ms: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        notice: Option<String>,
    },
    Start {
        episode: u64,
        task: String,
        seed: u64,
        setting: String,
        spec: TaskSpec,
    },
    State {
        episode: u64,
        step: u32,
        /// Actor of the step that produced this state; absent at reset.
        #[serde(default)]
        actor: Option<Actor>,
        scene: Scene,
        success: bool,
        turn_state: TurnState,
    },
    ActionRequest {
        episode: u64,
        turn: u64,
        /// 1-based step the command will drive.
        step: u32,
        timeout_ms: u64,
        /// Unix time in milliseconds after which the turn expires.
        deadline_ms: u64,
        scene: Scene,
        commands: Vec<String>,
    },
    Ack {
        ref_seq: u64,
        turn: u64,
        command: String,
        applied: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        notice: Option<String>,
    },
    Reject {
        #[serde(default)]
        ref_seq: Option<u64>,
        reason: String,
    },
    Result {
        episode: u64,
        success: bool,
        steps: u32,
        expert_steps: u32,
        ticks: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    Abort {
        episode: u64,
        reason: String,
    },
    Heartbeat {
        turn_state: TurnState,
    },
}

impl ServerBody {
    pub fn kind(&self) -> &'static str {
        match self {
            ServerBody::Hello { .. } => "hello",
            ServerBody::Start { .. } => "start",
            ServerBody::State { .. } => "state",
            ServerBody::ActionRequest { .. } => "action_request",
            ServerBody::Ack { .. } => "ack",
            ServerBody::Reject { .. } => "reject",
            ServerBody::Result { .. } => "result",
            ServerBody::Abort { .. } => "abort",
            ServerBody::Heartbeat { .. } => "heartbeat",
        }
    }
}

pub fn command_names() -> Vec<String> {
    Command::ALL.iter().map(|c| c.name().to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn client_frames_parse_with_unknown_fields() {
        let f = ClientFrame::parse(r#"{"type":"action","session":"s1","seq":4,"command":"up","turn":2,"extra":[1,2]}"#)
            .unwrap();
        assert_eq!(f.seq, 4);
        assert_eq!(f.body, ClientBody::Action { command: "up".into(), turn: Some(2) });
        let f = ClientFrame::parse(r#"{"type":"heartbeat","session":"","seq":0,"note":"x"}"#).unwrap();
        assert_eq!(f.body, ClientBody::Heartbeat {});
    }

    #[test]
    fn missing_envelope_fields_are_malformed() {
        assert!(ClientFrame::parse(r#"{"type":"heartbeat","seq":1}"#).is_err());
        assert!(ClientFrame::parse(r#"{"type":"heartbeat","session":"s"}"#).is_err());
        assert!(ClientFrame::parse(r#"{"type":"dance","session":"s","seq":1}"#).is_err());
    }

    #[test]
    fn server_frames_round_trip_on_one_line() {
        let f = ServerFrame {
            session: "s1".into(),
            seq: 9,
            body: ServerBody::Ack { ref_seq: 3, turn: 1, command: "grip".into(), applied: false, notice: Some("dropped".into()) },
        };
        let text = f.to_text();
        assert!(!text.contains('\n'));
        assert!(text.contains(r#""type":"ack""#));
        assert_eq!(ServerFrame::parse(&text).unwrap(), f);
        let hb = ServerFrame { session: "s1".into(), seq: 10, body: ServerBody::Heartbeat { turn_state: TurnState::AwaitingExpert } };
        assert!(hb.to_text().contains(r#""turn_state":"awaiting-expert""#));
    }
}
