//! Closed-loop simulation at a fixed control step: scenario loading, the step
//! function, metrics, parameter sweeps and safeguard comparisons.

pub mod library;
mod metrics;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{AgentsConfig, Environment, ExternalInput};
use crate::error::{ensure_dim, Error, Result};
use crate::geometry::robot_capsules;
use crate::jpc::{ReplanConfig, ReplanController, ReplanEvent, Task};
use crate::kinematics::{step_joint_state, ChainConfig, JerkBounds, JointState, KinematicChain, DEFAULT_JERK_LIMITS_DEG};
use crate::safeguard::{jssa_step, ssa_step, CostMatrix, Fallback, SafeguardContext, SsaParams};
use crate::safety_index::{ConstraintForm, SafetyIndexParams};

pub use metrics::{read_telemetry_csv, write_metrics_csv, write_sweep_csv, write_telemetry_csv, RunMetrics, SweepRow, TelemetryRecord, TELEMETRY_FIXED_COLUMNS};

/// Default control step (s).
pub const DEFAULT_TAU: f64 = 0.008;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafeguardMode {
    #[default]
    Jssa,
    Ssa,
    Off,
}

/// Seeded perturbation of the scripted agents' root waypoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScriptJitter {
    /// Multiplier range on script time.
    pub time_scale: [f64; 2],
    /// Start delay range (s).
    pub delay: [f64; 2],
    /// Offset range along y, applied to every waypoint (m).
    pub lateral: [f64; 2],
    /// Offset range along x, applied to every waypoint but the first and last (m).
    pub depth: [f64; 2],
}

impl Default for ScriptJitter {
    fn default() -> Self {
        Self {
            time_scale: [1.0, 1.0],
            delay: [0.0, 0.0],
            lateral: [0.0, 0.0],
            depth: [0.0, 0.0],
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    /// Robot description; the default six-axis arm when absent.
    #[serde(default)]
    pub chain: Option<ChainConfig>,
    pub agents: AgentsConfig,
    pub initial_theta: Vec<f64>,
    pub task: Task,
    #[serde(default)]
    pub params: SafetyIndexParams,
    #[serde(default)]
    pub ssa: SsaParams,
    /// Projection weight `V`; identity when absent.
    #[serde(default)]
    pub cost: Option<Vec<Vec<f64>>>,
    /// Symmetric jerk limits (deg/s³); the default arm's limits when absent.
    #[serde(default)]
    pub jerk_limits_deg: Option<Vec<f64>>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub mode: SafeguardMode,
    #[serde(default)]
    pub constraint_form: ConstraintForm,
    pub duration_s: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub jitter: Option<ScriptJitter>,
    #[serde(default)]
    pub replan: ReplanConfig,
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("scenario: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn steps(&self) -> Result<u64> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("time step must be positive, got {}", self.tau)));
        }
        let ratio = self.duration_s / self.tau;
        let steps = ratio.round();
        if !(self.duration_s > 0.0) || (ratio - steps).abs() > 1e-6 * ratio.max(1.0) {
            return Err(Error::Config(format!(
                "duration {} s is not a positive multiple of the time step {} s",
                self.duration_s, self.tau
            )));
        }
        Ok(steps as u64)
    }

    pub fn chain(&self) -> Result<KinematicChain> {
        match &self.chain {
            Some(c) => KinematicChain::from_config(c.clone()),
            None => Ok(KinematicChain::default_six_dof()),
        }
    }

    pub fn bounds(&self, dof: usize) -> Result<JerkBounds> {
        let limits = self.jerk_limits_deg.clone().unwrap_or_else(|| DEFAULT_JERK_LIMITS_DEG.to_vec());
        ensure_dim("jerk limits", dof, limits.len())?;
        JerkBounds::symmetric_degrees(&limits)
    }

    pub fn weight(&self, dof: usize) -> Result<CostMatrix> {
        match &self.cost {
            None => Ok(CostMatrix::identity(dof)),
            Some(rows) => {
                ensure_dim("cost matrix rows", dof, rows.len())?;
                for r in rows {
                    ensure_dim("cost matrix columns", dof, r.len())?;
                }
                CostMatrix::new(DMatrix::from_fn(dof, dof, |i, j| rows[i][j]))
            }
        }
    }

    /// Agents after applying the seeded jitter.
    pub fn agents_config(&self) -> AgentsConfig {
        let mut cfg = self.agents.clone();
        if let Some(j) = &self.jitter {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            for agent in &mut cfg.dynamic {
                let scale = draw(&mut rng, j.time_scale);
                let delay = draw(&mut rng, j.delay);
                let dy = draw(&mut rng, j.lateral);
                let dx = draw(&mut rng, j.depth);
                let Some(script) = agent.script.as_mut() else { continue };
                let last = script.root.len().saturating_sub(1);
                for (i, w) in script.root.iter_mut().enumerate() {
                    w.t = delay + w.t * scale;
                    w.y += dy;
                    if i != 0 && i != last {
                        w.x += dx;
                    }
                }
                for keys in script.joint_offsets.values_mut() {
                    for k in keys.iter_mut() {
                        k.t = delay + k.t * scale;
                    }
                }
            }
        }
        cfg
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_mode(mut self, mode: SafeguardMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_params(mut self, params: SafetyIndexParams) -> Self {
        self.params = params;
        self
    }
}

/// Result of one safeguard evaluation inside the loop.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub telemetry: TelemetryRecord,
    pub events: Vec<ReplanEvent>,
}

/// `(p0, p1, radius, owner, link)` of one capsule in the world.
pub type CapsuleRow = ([f64; 3], [f64; 3], f64, String, usize);

/// World state `x = [q; E]` plus the controller and last telemetry.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub scenario: Scenario,
    chain: KinematicChain,
    bounds: JerkBounds,
    weight: CostMatrix,
    environment: Environment,
    robot: JointState,
    controller: ReplanController,
    step: u64,
    inputs: BTreeMap<usize, ExternalInput>,
    last: Option<TelemetryRecord>,
}

impl Simulation {
    pub fn new(scenario: Scenario) -> Result<Self> {
        scenario.steps()?;
        let chain = scenario.chain()?;
        let n = chain.dof();
        ensure_dim("initial joint angles", n, scenario.initial_theta.len())?;
        let bounds = scenario.bounds(n)?;
        let weight = scenario.weight(n)?;
        scenario.params.check().map_err(|e| Error::Config(e.to_string()))?;
        if scenario.mode == SafeguardMode::Ssa {
            scenario.ssa.check()?;
        }
        let agents = scenario.agents_config();
        for a in &agents.dynamic {
            if let Some(script) = &a.script {
                let speed = max_script_speed(script, scenario.tau);
                if speed > a.speed_bound + 1e-9 {
                    return Err(Error::Config(format!(
                        "script of '{}' moves its root at {speed:.3} m/s, above its bound {} m/s",
                        a.label, a.speed_bound
                    )));
                }
            }
        }
        let environment = agents.build()?;
        let robot = JointState::at_rest(DVector::from_column_slice(&scenario.initial_theta));
        let controller = ReplanController::new(&scenario.task, &robot, &bounds, scenario.tau, &scenario.replan)?;
        Ok(Self {
            scenario,
            chain,
            bounds,
            weight,
            environment,
            robot,
            controller,
            step: 0,
            inputs: BTreeMap::new(),
            last: None,
        })
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.scenario.tau
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn robot(&self) -> &JointState {
        &self.robot
    }

    pub fn chain(&self) -> &KinematicChain {
        &self.chain
    }

    pub fn bounds(&self) -> &JerkBounds {
        &self.bounds
    }

    pub fn environment(&self) -> &Environment {
        &self.environment
    }

    pub fn controller(&self) -> &ReplanController {
        &self.controller
    }

    pub fn last_telemetry(&self) -> Option<&TelemetryRecord> {
        self.last.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.scenario.steps().map_or(true, |n| self.step >= n)
    }

    /// Replaces the safety index parameters from the next step on.
    pub fn set_params(&mut self, params: SafetyIndexParams) -> Result<()> {
        params.check()?;
        self.scenario.params = params;
        Ok(())
    }

    /// Queues a target for an externally driven agent; applied at the next step.
    pub fn push_input(&mut self, agent: usize, target: [f64; 3]) -> Result<()> {
        if agent >= self.environment.dynamic.len() {
            return Err(Error::InvalidParameter(format!("no dynamic agent {agent}")));
        }
        self.inputs.insert(agent, ExternalInput { target, time: self.time() });
        Ok(())
    }

    /// Robot and agent capsules at the current state:
    /// `(p0, p1, radius, owner, link)` with owner `"robot"` or the agent id.
    pub fn capsule_snapshot(&self) -> Result<Vec<CapsuleRow>> {
        let mut out = Vec::new();
        for rc in robot_capsules(&self.chain, &self.robot.theta)? {
            out.push((rc.world.p0.into(), rc.world.p1.into(), rc.world.radius, "robot".to_string(), rc.link));
        }
        for ac in self.environment.capsules() {
            let c = ac.capsule();
            out.push((c.p0.into(), c.p1.into(), c.radius, format!("agent{}", ac.agent), ac.link + 1));
        }
        Ok(out)
    }

    /// Advances the world by one control step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let tau = self.scenario.tau;
        let t = self.time();
        let inputs = std::mem::take(&mut self.inputs);
        self.environment.advance(t, tau, &inputs)?;
        let (epoch, u_nom) = self.controller.next_command();
        let ctx = SafeguardContext {
            chain: &self.chain,
            environment: &self.environment,
            bounds: &self.bounds,
            tau,
        };
        let monitor = jssa_step(&u_nom, &self.robot, &ctx, &self.scenario.params, &self.weight, self.scenario.constraint_form)?;
        let outcome = match self.scenario.mode {
            SafeguardMode::Jssa => monitor,
            SafeguardMode::Ssa => ssa_step(&u_nom, &self.robot, &ctx, &self.scenario.ssa)?,
            SafeguardMode::Off => {
                let mut passthrough = monitor;
                passthrough.u_safe = u_nom.clone();
                passthrough.active = false;
                passthrough.fallback_used = Fallback::None;
                passthrough
            }
        };
        self.robot = step_joint_state(&self.robot, &outcome.u_safe, tau)?;
        let d = &outcome.diagnostics;
        let record = TelemetryRecord {
            step: self.step,
            t,
            d: d.d,
            d_dot: d.d_dot,
            d_ddot: d.d_ddot,
            phi: d.phi,
            active: outcome.active,
            fallback: outcome.fallback_used,
            u_nom: u_nom.0.iter().copied().collect(),
            u_safe: outcome.u_safe.0.iter().copied().collect(),
            robot_link: d.robot_link,
            agent: d.agent,
            agent_link: d.agent_link + 1,
            epoch,
            pre_clip_violations: d.pre_clip_violations,
            s: d.s,
            lu_safe: d.lu_safe,
        };
        let events = self.controller.observe(self.step, t, outcome.active, &self.robot)?;
        self.step += 1;
        self.last = Some(record.clone());
        Ok(StepRecord { telemetry: record, events })
    }
}

/// Fastest root speed of a script, by differencing at the control step.
pub fn max_script_speed(script: &crate::agents::ScriptedTrajectory, tau: f64) -> f64 {
    let (Some(first), Some(last)) = (script.root.first(), script.root.last()) else {
        return 0.0;
    };
    let steps = ((last.t - first.t) / tau).ceil() as usize;
    let mut prev = script.root_at(first.t);
    let mut best: f64 = 0.0;
    for k in 1..=steps {
        let p = script.root_at(first.t + k as f64 * tau);
        best = best.max(((p.x - prev.x).powi(2) + (p.y - prev.y).powi(2)).sqrt() / tau);
        prev = p;
    }
    best
}

/// Complete record of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub telemetry: Vec<TelemetryRecord>,
    pub metrics: RunMetrics,
    pub events: Vec<(u64, ReplanEvent)>,
    pub discarded_epochs: Vec<u64>,
}

pub fn run(scenario: &Scenario) -> Result<RunResult> {
    let steps = scenario.steps()?;
    let mut sim = Simulation::new(scenario.clone())?;
    let mut telemetry = Vec::with_capacity(steps as usize);
    let mut events = Vec::new();
    for _ in 0..steps {
        let rec = sim.step()?;
        events.extend(rec.events.into_iter().map(|e| (rec.telemetry.step, e)));
        telemetry.push(rec.telemetry);
    }
    let metrics = RunMetrics::from_log(&telemetry, scenario.tau, scenario.params.d_min);
    Ok(RunResult {
        telemetry,
        metrics,
        events,
        discarded_epochs: sim.controller.discarded_epochs().to_vec(),
    })
}

/// One run per `(λ₁, λ₂)` cell, in row-major order of the grid.
pub fn sweep(base: &Scenario, lambda1: &[f64], lambda2: &[f64]) -> Result<Vec<SweepRow>> {
    if lambda1.is_empty() || lambda2.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let cells: Vec<(f64, f64)> = lambda1.iter().flat_map(|&a| lambda2.iter().map(move |&b| (a, b))).collect();
    cells
        .par_iter()
        .map(|&(l1, l2)| {
            let mut params = base.params;
            params.lambda1 = l1;
            params.lambda2 = l2;
            let result = run(&base.clone().with_params(params))?;
            Ok(SweepRow {
                lambda1: l1,
                lambda2: l2,
                metrics: result.metrics,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeComparison {
    pub jssa: RunResult,
    pub ssa: RunResult,
}

/// The same scenario under the jerk-level safeguard and the baseline.
pub fn compare_modes(scenario: &Scenario) -> Result<ModeComparison> {
    let (jssa, ssa) = rayon::join(
        || run(&scenario.clone().with_mode(SafeguardMode::Jssa)),
        || run(&scenario.clone().with_mode(SafeguardMode::Ssa)),
    );
    Ok(ModeComparison { jssa: jssa?, ssa: ssa? })
}
