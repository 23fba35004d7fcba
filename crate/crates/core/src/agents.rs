//! Environment model: static obstacles and capsule-skeleton dynamic agents.
//!
//! Dynamic agents are predicted with a constant-velocity model. Their joint
//! positions come from a driver (a time-stamped script or an external target
//! stream); velocities are backward differences clamped to the agent's speed
//! bound, and the acceleration fed to prediction is always zero.

use std::collections::BTreeMap;

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AgentCapsule, Capsule, PointState};

/// Default time after which an external target is considered stale (s).
pub const DEFAULT_STALENESS: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapsuleConfig {
    pub p0: [f64; 3],
    pub p1: [f64; 3],
    pub radius: f64,
}

impl CapsuleConfig {
    pub fn to_capsule(&self) -> Result<Capsule> {
        Capsule::new(self.p0.into(), self.p1.into(), self.radius)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaticAgent {
    pub label: String,
    pub capsules: Vec<Capsule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonJoint {
    pub name: String,
    /// Offset in the agent root frame (x forward, y left, z up).
    pub offset: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonCapsule {
    pub name: String,
    pub from: String,
    pub to: String,
    pub radius: f64,
}

/// Named joints rigidly offset from a planar root pose, and capsules spanning joint pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanSkeleton {
    pub joints: Vec<SkeletonJoint>,
    pub capsules: Vec<SkeletonCapsule>,
}

impl Default for HumanSkeleton {
    /// Six-capsule human: head, core body, right arm, left arm, right leg,
    /// left leg. Dimensions are approximate.
    fn default() -> Self {
        let joint = |name: &str, offset: [f64; 3]| SkeletonJoint {
            name: name.into(),
            offset,
        };
        let capsule = |name: &str, from: &str, to: &str, radius: f64| SkeletonCapsule {
            name: name.into(),
            from: from.into(),
            to: to.into(),
            radius,
        };
        Self {
            joints: vec![
                joint("head_top", [0.0, 0.0, 1.75]),
                joint("neck", [0.0, 0.0, 1.55]),
                joint("chest", [0.0, 0.0, 1.40]),
                joint("pelvis", [0.0, 0.0, 0.95]),
                joint("r_shoulder", [0.0, -0.20, 1.40]),
                joint("r_hand", [0.05, -0.25, 0.80]),
                joint("l_shoulder", [0.0, 0.20, 1.40]),
                joint("l_hand", [0.05, 0.25, 0.80]),
                joint("r_hip", [0.0, -0.10, 0.90]),
                joint("r_foot", [0.0, -0.10, 0.05]),
                joint("l_hip", [0.0, 0.10, 0.90]),
                joint("l_foot", [0.0, 0.10, 0.05]),
            ],
            capsules: vec![
                capsule("head", "neck", "head_top", 0.10),
                capsule("core", "pelvis", "chest", 0.15),
                capsule("right_arm", "r_shoulder", "r_hand", 0.06),
                capsule("left_arm", "l_shoulder", "l_hand", 0.06),
                capsule("right_leg", "r_hip", "r_foot", 0.06),
                capsule("left_leg", "l_hip", "l_foot", 0.06),
            ],
        }
    }
}

impl HumanSkeleton {
    pub fn joint_index(&self, name: &str) -> Result<usize> {
        self.joints
            .iter()
            .position(|j| j.name == name)
            .ok_or_else(|| Error::Config(format!("unknown skeleton joint '{name}'")))
    }

    fn capsule_indices(&self) -> Result<Vec<(usize, usize, f64)>> {
        self.capsules
            .iter()
            .map(|c| {
                if !(c.radius > 0.0) {
                    return Err(Error::Config(format!("skeleton capsule '{}' needs a positive radius", c.name)));
                }
                Ok((self.joint_index(&c.from)?, self.joint_index(&c.to)?, c.radius))
            })
            .collect()
    }
}

/// Planar root pose: position in the XY plane and heading about Z.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RootPose {
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub yaw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Linear,
    /// Rest-to-rest quintic blend between consecutive waypoints.
    #[default]
    MinimumJerk,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RootWaypoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub yaw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetWaypoint {
    pub t: f64,
    pub offset: [f64; 3],
}

/// Time-stamped root motion plus optional per-joint offset keyframes.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScriptedTrajectory {
    pub root: Vec<RootWaypoint>,
    #[serde(default)]
    pub joint_offsets: BTreeMap<String, Vec<OffsetWaypoint>>,
    #[serde(default)]
    pub interpolation: Interpolation,
}

fn blend(mode: Interpolation, u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    match mode {
        Interpolation::Linear => u,
        Interpolation::MinimumJerk => u * u * u * (10.0 - 15.0 * u + 6.0 * u * u),
    }
}

/// Locates `t` in a monotone time list: (segment start index, blend parameter).
fn locate(times: &[f64], t: f64) -> (usize, f64) {
    if t <= times[0] || times.len() == 1 {
        return (0, 0.0);
    }
    let last = times.len() - 1;
    if t >= times[last] {
        return (last - 1, 1.0);
    }
    let i = times.partition_point(|&x| x <= t) - 1;
    (i, (t - times[i]) / (times[i + 1] - times[i]))
}

impl ScriptedTrajectory {
    pub fn validate(&self) -> Result<()> {
        if self.root.is_empty() {
            return Err(Error::Config("script needs at least one root waypoint".into()));
        }
        let monotone = |ts: &mut dyn Iterator<Item = f64>| {
            let v: Vec<f64> = ts.collect();
            v.windows(2).all(|w| w[1] > w[0]) && v.iter().all(|x| x.is_finite())
        };
        if !monotone(&mut self.root.iter().map(|w| w.t)) {
            return Err(Error::Config("root waypoint timestamps must be strictly increasing".into()));
        }
        for (name, keys) in &self.joint_offsets {
            if keys.is_empty() || !monotone(&mut keys.iter().map(|w| w.t)) {
                return Err(Error::Config(format!("offset keyframes for '{name}' must be non-empty and increasing")));
            }
        }
        Ok(())
    }

    pub fn root_at(&self, t: f64) -> RootPose {
        let times: Vec<f64> = self.root.iter().map(|w| w.t).collect();
        let (i, u) = locate(&times, t);
        let a = &self.root[i];
        let b = self.root.get(i + 1).unwrap_or(a);
        let s = blend(self.interpolation, u);
        RootPose {
            x: a.x + (b.x - a.x) * s,
            y: a.y + (b.y - a.y) * s,
            yaw: a.yaw + (b.yaw - a.yaw) * s,
        }
    }

    pub fn offset_at(&self, joint: &str, t: f64) -> Option<Vector3<f64>> {
        let keys = self.joint_offsets.get(joint)?;
        let times: Vec<f64> = keys.iter().map(|w| w.t).collect();
        let (i, u) = locate(&times, t);
        let a = Vector3::from(keys[i].offset);
        let b = keys.get(i + 1).map_or(a, |k| Vector3::from(k.offset));
        Some(a + (b - a) * blend(self.interpolation, u))
    }
}

/// A target for an externally steered agent's root.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExternalInput {
    pub target: [f64; 3],
    /// Simulation time at which the input was received.
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Driver {
    Scripted(ScriptedTrajectory),
    External {
        last_input: Option<ExternalInput>,
        staleness: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionBounds {
    /// Maximum point speed (m/s).
    pub speed: f64,
    /// Maximum point acceleration (m/s²).
    pub accel: f64,
}

impl Default for MotionBounds {
    fn default() -> Self {
        Self { speed: 1.5, accel: 5.0 }
    }
}

/// A moving agent built from a capsule skeleton.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicAgent {
    pub label: String,
    pub skeleton: HumanSkeleton,
    /// World state of each skeleton joint; `a` is always zero.
    pub joints: Vec<PointState>,
    /// Backward-difference acceleration estimate per joint, for logging.
    pub accel_estimate: Vec<Vector3<f64>>,
    pub root: RootPose,
    /// Root velocity of the external driver's last update.
    pub root_velocity: Vector3<f64>,
    pub driver: Driver,
    pub bounds: MotionBounds,
    /// Exponential smoothing factor in `[0, 1)` for the velocity estimate.
    pub smoothing: f64,
    capsule_joints: Vec<(usize, usize, f64)>,
    initialized: bool,
}

fn place(root: &RootPose, offset: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(root.x, root.y, 0.0) + Rotation3::from_axis_angle(&Vector3::z_axis(), root.yaw) * offset
}

fn clamp_norm(v: Vector3<f64>, bound: f64) -> Vector3<f64> {
    let n = v.norm();
    if n > bound && n > 0.0 {
        v * (bound / n)
    } else {
        v
    }
}

impl DynamicAgent {
    pub fn new(label: impl Into<String>, skeleton: HumanSkeleton, driver: Driver, bounds: MotionBounds, root: RootPose) -> Result<Self> {
        if !(bounds.speed > 0.0) || !(bounds.accel > 0.0) {
            return Err(Error::Config("agent speed and acceleration bounds must be positive".into()));
        }
        if let Driver::Scripted(script) = &driver {
            script.validate()?;
            for name in script.joint_offsets.keys() {
                skeleton.joint_index(name)?;
            }
        }
        let capsule_joints = skeleton.capsule_indices()?;
        let root = match &driver {
            Driver::Scripted(script) => script.root_at(script.root[0].t),
            Driver::External { .. } => root,
        };
        let mut agent = Self {
            label: label.into(),
            joints: vec![PointState::default(); skeleton.joints.len()],
            accel_estimate: vec![Vector3::zeros(); skeleton.joints.len()],
            skeleton,
            root,
            root_velocity: Vector3::zeros(),
            driver,
            bounds,
            smoothing: 0.0,
            capsule_joints,
            initialized: false,
        };
        let positions = agent.positions_for(root, agent.script_time_origin());
        for (state, p) in agent.joints.iter_mut().zip(positions) {
            state.p = p;
        }
        Ok(agent)
    }

    fn script_time_origin(&self) -> f64 {
        match &self.driver {
            Driver::Scripted(s) => s.root[0].t,
            Driver::External { .. } => 0.0,
        }
    }

    fn positions_for(&self, root: RootPose, t: f64) -> Vec<Vector3<f64>> {
        self.skeleton
            .joints
            .iter()
            .map(|j| {
                let offset = match &self.driver {
                    Driver::Scripted(s) => s.offset_at(&j.name, t),
                    Driver::External { .. } => None,
                }
                .unwrap_or_else(|| Vector3::from(j.offset));
                place(&root, &offset)
            })
            .collect()
    }

    /// Capsules with endpoint kinematics, labelled with this agent's id.
    pub fn capsules(&self, agent_id: usize) -> Vec<AgentCapsule> {
        self.capsule_joints
            .iter()
            .enumerate()
            .map(|(link, &(a, b, radius))| AgentCapsule {
                agent: agent_id,
                link,
                start: self.joints[a],
                end: self.joints[b],
                radius,
            })
            .collect()
    }

    /// Constant-velocity prediction of the agent `tau` seconds ahead.
    pub fn predict(&self, tau: f64) -> DynamicAgent {
        let mut next = self.clone();
        next.joints = predict_points(&self.joints, tau);
        next
    }

    /// Moves the agent to its driver's position at time `t`, `tau` after the
    /// previous update, and refreshes velocity estimates.
    pub fn advance_driver(&mut self, t: f64, tau: f64, input: Option<ExternalInput>) -> Result<()> {
        if !(tau > 0.0) {
            return Err(Error::InvalidParameter("agent update step must be positive".into()));
        }
        let new_root = match &mut self.driver {
            Driver::Scripted(script) => script.root_at(t),
            Driver::External { last_input, staleness } => {
                if let Some(i) = input {
                    *last_input = Some(i);
                }
                let fresh = last_input.filter(|i| t - i.time <= *staleness);
                let velocity = match fresh {
                    Some(i) => {
                        let here = Vector3::new(self.root.x, self.root.y, 0.0);
                        let to_target = Vector3::new(i.target[0], i.target[1], 0.0) - here;
                        let dist = to_target.norm();
                        let desired = if dist > 1e-12 {
                            // Braking-curve speed so the root settles on the target.
                            let speed = self.bounds.speed.min((2.0 * self.bounds.accel * dist).sqrt()).min(dist / tau);
                            to_target * (speed / dist)
                        } else {
                            Vector3::zeros()
                        };
                        let change = clamp_norm(desired - self.root_velocity, self.bounds.accel * tau);
                        self.root_velocity + change
                    }
                    None => self.root_velocity,
                };
                self.root_velocity = clamp_norm(velocity, self.bounds.speed);
                RootPose {
                    x: self.root.x + self.root_velocity.x * tau,
                    y: self.root.y + self.root_velocity.y * tau,
                    yaw: self.root.yaw,
                }
            }
        };
        let positions = self.positions_for(new_root, t);
        for (k, p) in positions.into_iter().enumerate() {
            let state = &mut self.joints[k];
            let (v, a_est) = if self.initialized {
                let raw = (p - state.p) / tau;
                let smoothed = state.v * self.smoothing + raw * (1.0 - self.smoothing);
                let v = clamp_norm(smoothed, self.bounds.speed);
                (v, clamp_norm((v - state.v) / tau, self.bounds.accel))
            } else {
                (Vector3::zeros(), Vector3::zeros())
            };
            *state = PointState { p, v, a: Vector3::zeros() };
            self.accel_estimate[k] = a_est;
        }
        self.root = new_root;
        self.initialized = true;
        Ok(())
    }
}

/// Constant-velocity update of a set of points: `p + τv`, velocity kept, acceleration zero.
pub fn predict_points(points: &[PointState], tau: f64) -> Vec<PointState> {
    points
        .iter()
        .map(|s| PointState {
            p: s.p + s.v * tau,
            v: s.v,
            a: Vector3::zeros(),
        })
        .collect()
}

/// All agents around the robot.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Environment {
    pub dynamic: Vec<DynamicAgent>,
    pub statics: Vec<StaticAgent>,
}

impl Environment {
    /// Every agent capsule. Dynamic agents come first (ids `0..n_dynamic`),
    /// then static agents.
    pub fn capsules(&self) -> Vec<AgentCapsule> {
        let mut out = Vec::new();
        for (id, agent) in self.dynamic.iter().enumerate() {
            out.extend(agent.capsules(id));
        }
        let offset = self.dynamic.len();
        for (k, agent) in self.statics.iter().enumerate() {
            out.extend(agent.capsules.iter().enumerate().map(|(link, c)| AgentCapsule {
                agent: offset + k,
                link,
                start: PointState::at(c.p0),
                end: PointState::at(c.p1),
                radius: c.radius,
            }));
        }
        out
    }

    pub fn advance(&mut self, t: f64, tau: f64, inputs: &BTreeMap<usize, ExternalInput>) -> Result<()> {
        for (id, agent) in self.dynamic.iter_mut().enumerate() {
            agent.advance_driver(t, tau, inputs.get(&id).copied())?;
        }
        Ok(())
    }
}

/// JSON description of one dynamic agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicAgentConfig {
    #[serde(default = "default_label")]
    pub label: String,
    #[serde(default)]
    pub skeleton: Option<HumanSkeleton>,
    pub driver: DriverKind,
    #[serde(default)]
    pub script: Option<ScriptedTrajectory>,
    /// Initial root pose for externally driven agents.
    #[serde(default)]
    pub initial_root: Option<RootPose>,
    pub speed_bound: f64,
    pub accel_bound: f64,
    #[serde(default)]
    pub smoothing: f64,
    #[serde(default)]
    pub staleness_s: Option<f64>,
}

fn default_label() -> String {
    "human".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverKind {
    Scripted,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticAgentConfig {
    #[serde(default)]
    pub label: String,
    pub capsules: Vec<CapsuleConfig>,
}

/// JSON description of the environment.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentsConfig {
    #[serde(default, rename = "static")]
    pub statics: Vec<StaticAgentConfig>,
    #[serde(default)]
    pub dynamic: Vec<DynamicAgentConfig>,
}

impl AgentsConfig {
    pub fn build(&self) -> Result<Environment> {
        let statics = self
            .statics
            .iter()
            .map(|s| {
                Ok(StaticAgent {
                    label: s.label.clone(),
                    capsules: s.capsules.iter().map(CapsuleConfig::to_capsule).collect::<Result<_>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dynamic = self
            .dynamic
            .iter()
            .map(|d| {
                let driver = match d.driver {
                    DriverKind::Scripted => Driver::Scripted(
                        d.script
                            .clone()
                            .ok_or_else(|| Error::Config(format!("scripted agent '{}' has no script", d.label)))?,
                    ),
                    DriverKind::External => Driver::External {
                        last_input: None,
                        staleness: d.staleness_s.unwrap_or(DEFAULT_STALENESS),
                    },
                };
                if !(0.0..1.0).contains(&d.smoothing) {
                    return Err(Error::Config("velocity smoothing must lie in [0, 1)".into()));
                }
                let mut agent = DynamicAgent::new(
                    d.label.clone(),
                    d.skeleton.clone().unwrap_or_default(),
                    driver,
                    MotionBounds {
                        speed: d.speed_bound,
                        accel: d.accel_bound,
                    },
                    d.initial_root.unwrap_or_default(),
                )?;
                agent.smoothing = d.smoothing;
                Ok(agent)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Environment { dynamic, statics })
    }
}
