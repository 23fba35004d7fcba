//! JSON text messages exchanged with interactive clients.
//!
//! Every message is an object `{"seq": n, "kind": ..., <payload fields>}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::safety_index::SafetyIndexParams;
use crate::sim::{RunMetrics, Scenario, Simulation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub seq: u64,
    #[serde(flatten)]
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    State(StatePayload),
    Metrics(RunMetrics),
    Control(ControlPayload),
    ScenarioCmd(ScenarioCmdPayload),
    ParamUpdate(ParamUpdatePayload),
    Error(ErrorPayload),
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::State(_) => "state",
            Payload::Metrics(_) => "metrics",
            Payload::Control(_) => "control",
            Payload::ScenarioCmd(_) => "scenario_cmd",
            Payload::ParamUpdate(_) => "param_update",
            Payload::Error(_) => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireCapsule {
    pub p0: [f64; 3],
    pub p1: [f64; 3],
    pub r: f64,
    /// `"robot"` or `"agent<i>"`.
    pub owner: String,
    pub link: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatePayload {
    pub t: f64,
    pub theta: Vec<f64>,
    pub capsules: Vec<WireCapsule>,
    pub d: f64,
    pub phi: f64,
    pub active: bool,
    pub robot_link: usize,
    pub agent_link: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPayload {
    pub target_xyz: [f64; 3],
    pub agent_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioOp {
    Start,
    Pause,
    Reset,
    Load,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioCmdPayload {
    pub op: ScenarioOp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Box<Scenario>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamUpdatePayload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_min: Option<f64>,
}

impl ParamUpdatePayload {
    /// `params` with the present fields replaced.
    pub fn apply_to(&self, params: &SafetyIndexParams) -> SafetyIndexParams {
        SafetyIndexParams::new(
            self.d_min.unwrap_or(params.d_min),
            self.lambda1.unwrap_or(params.lambda1),
            self.lambda2.unwrap_or(params.lambda2),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub code: String,
    pub detail: String,
}

impl ErrorPayload {
    pub fn new(code: &str, detail: impl Into<String>) -> Self {
        Self { code: code.into(), detail: detail.into() }
    }
}

impl Message {
    pub fn new(seq: u64, payload: Payload) -> Self {
        Self { seq, payload }
    }

    pub fn parse(text: &str) -> std::result::Result<Self, ErrorPayload> {
        serde_json::from_str(text).map_err(|e| ErrorPayload::new("malformed", e.to_string()))
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("wire messages serialize")
    }
}

/// World state after the latest step. Fails before the first step.
pub fn state_payload(sim: &Simulation) -> Result<StatePayload> {
    let last = sim.last_telemetry().ok_or_else(|| Error::Config("no step has been taken".into()))?;
    let capsules = sim
        .capsule_snapshot()?
        .into_iter()
        .map(|(p0, p1, r, owner, link)| WireCapsule { p0, p1, r, owner, link })
        .collect();
    Ok(StatePayload {
        t: sim.time(),
        theta: sim.robot().theta.iter().copied().collect(),
        capsules,
        d: last.d,
        phi: last.phi,
        active: last.active,
        robot_link: last.robot_link,
        agent_link: last.agent_link,
    })
}

/// Applies a world mutation between steps. Only control and param_update mutate the simulation.
pub fn apply_mutation(sim: &mut Simulation, payload: &Payload) -> Result<()> {
    match payload {
        Payload::Control(c) => sim.push_input(c.agent_id, c.target_xyz),
        Payload::ParamUpdate(p) => sim.set_params(p.apply_to(&sim.scenario.params)),
        other => Err(Error::Config(format!("'{}' is not a world mutation", other.kind()))),
    }
}
