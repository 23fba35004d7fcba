//! Scripted benchmark scenarios for the default arm and human.
//!
//! The arm idles at [`HOME`] while a human facing −x walks up to it. Every
//! script keeps the root speed under 1.5 m/s for all jitter draws.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::agents::{AgentsConfig, DriverKind, DynamicAgentConfig, Interpolation, OffsetWaypoint, RootPose, RootWaypoint, ScriptedTrajectory};
use crate::jpc::{ReplanConfig, Task};
use crate::safeguard::SsaParams;
use crate::safety_index::{ConstraintForm, SafetyIndexParams};

use super::{SafeguardMode, Scenario, ScriptJitter, DEFAULT_TAU};

pub const HUMAN_SPEED_BOUND: f64 = 1.5;
pub const HUMAN_ACCEL_BOUND: f64 = 5.0;

fn wp(t: f64, x: f64) -> RootWaypoint {
    RootWaypoint { t, x, y: 0.0, yaw: PI }
}

fn human(root: Vec<RootWaypoint>, joint_offsets: BTreeMap<String, Vec<OffsetWaypoint>>) -> AgentsConfig {
    AgentsConfig {
        statics: Vec::new(),
        dynamic: vec![DynamicAgentConfig {
            label: "human".into(),
            skeleton: None,
            driver: DriverKind::Scripted,
            script: Some(ScriptedTrajectory {
                root,
                joint_offsets,
                interpolation: Interpolation::MinimumJerk,
            }),
            initial_root: None,
            speed_bound: HUMAN_SPEED_BOUND,
            accel_bound: HUMAN_ACCEL_BOUND,
            smoothing: 0.0,
            staleness_s: None,
        }],
    }
}

/// Home pose the arm idles in while the human approaches.
pub const HOME: [f64; 6] = [0.0, 0.0, 0.1, 0.0, 0.3, 0.0];

/// Pick-and-place style sweep of the base and shoulder.
pub fn sweep_task() -> Task {
    let w = |a: f64, b: f64| vec![a, b, 0.1, 0.0, 0.3, 0.0];
    Task::new(vec![w(0.35, 0.1), w(-0.35, -0.05), w(0.35, 0.1), w(-0.35, -0.05), w(0.0, 0.0)], 1.6)
}

/// Holds the home pose.
pub fn idle_task() -> Task {
    Task::new(vec![HOME.to_vec()], 0.8)
}

fn base(name: &str, agents: AgentsConfig, duration_s: f64) -> Scenario {
    Scenario {
        name: name.into(),
        chain: None,
        agents,
        initial_theta: HOME.to_vec(),
        task: idle_task(),
        params: SafetyIndexParams::default(),
        ssa: SsaParams::default(),
        cost: None,
        jerk_limits_deg: None,
        tau: DEFAULT_TAU,
        mode: SafeguardMode::Jssa,
        constraint_form: ConstraintForm::Gradient,
        duration_s,
        seed: 0,
        jitter: None,
        replan: ReplanConfig::default(),
    }
}

/// Jitter used for randomized variants. Depth only moves the stop point away from the arm.
pub fn variant_jitter() -> ScriptJitter {
    ScriptJitter {
        time_scale: [1.0, 1.25],
        delay: [0.0, 0.4],
        lateral: [-0.2, 0.2],
        depth: [0.0, 0.15],
    }
}

/// Walks straight at the idle arm, pauses, and walks back.
pub fn head_on() -> Scenario {
    base(
        "head_on",
        human(vec![wp(0.0, 3.0), wp(0.5, 3.0), wp(7.5, 1.3), wp(9.0, 1.3), wp(12.0, 3.0)], BTreeMap::new()),
        12.8,
    )
}

/// Approaches, slows to a stop in front of the arm and turns straight back.
pub fn decelerating_approach() -> Scenario {
    base("decelerating_approach", human(vec![wp(0.0, 3.0), wp(8.0, 1.3), wp(11.0, 3.0)], BTreeMap::new()), 12.0)
}

/// Walks up, raises the right hand towards the tool, lowers it and leaves.
pub fn handover() -> Scenario {
    let hand = |t: f64, offset: [f64; 3]| OffsetWaypoint { t, offset };
    let mut offsets = BTreeMap::new();
    offsets.insert(
        "r_hand".to_string(),
        vec![
            hand(0.0, [0.05, -0.25, 0.80]),
            hand(6.5, [0.05, -0.25, 0.80]),
            hand(8.5, [0.30, -0.12, 1.00]),
            hand(9.5, [0.30, -0.12, 1.00]),
            hand(11.0, [0.05, -0.25, 0.80]),
        ],
    );
    base(
        "handover",
        human(vec![wp(0.0, 3.0), wp(6.5, 1.4), wp(11.2, 1.4), wp(14.0, 3.0)], offsets),
        14.4,
    )
}

/// Human steered by external targets, starting 2.5 m in front of the idle arm.
/// A target stays in force until replaced.
pub fn interactive() -> Scenario {
    let mut agents = human(Vec::new(), BTreeMap::new());
    let h = &mut agents.dynamic[0];
    h.driver = DriverKind::External;
    h.script = None;
    h.initial_root = Some(RootPose { x: 2.5, y: 0.0, yaw: PI });
    h.staleness_s = Some(3600.0);
    base("interactive", agents, 3600.0)
}

pub fn standard_scenarios() -> Vec<Scenario> {
    vec![head_on(), decelerating_approach(), handover()]
}

/// `count` seeded variants (seeds `1..=count`) of each standard scenario.
pub fn randomized_suite(count: u64) -> Vec<Scenario> {
    standard_scenarios()
        .into_iter()
        .flat_map(|s| {
            (1..=count).map(move |seed| {
                let mut v = s.clone().with_seed(seed);
                v.jitter = Some(variant_jitter());
                v
            })
        })
        .collect()
}

/// The scenario used for parameter sweeps and the safeguard comparison.
pub fn standardized_approach() -> Scenario {
    decelerating_approach()
}

pub fn by_name(name: &str) -> Option<Scenario> {
    if name == "interactive" {
        return Some(interactive());
    }
    standard_scenarios().into_iter().find(|s| s.name == name)
}
