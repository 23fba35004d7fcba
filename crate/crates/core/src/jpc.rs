//! Jerk-bounded position controller: open-loop jerk buffers that track joint
//! waypoints, braking profiles, and the replan state machine.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, ensure_finite, Error, Result};
use crate::kinematics::{JerkBounds, JerkCommand, JointState};

/// Shortest segment, in control steps.
pub const MIN_SEGMENT_STEPS: usize = 3;
const MAX_SCALING_ROUNDS: usize = 64;

/// Joint-space waypoints reached every `sample_time_s` seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub waypoints: Vec<Vec<f64>>,
    pub sample_time_s: f64,
}

impl Task {
    pub fn new(waypoints: Vec<Vec<f64>>, sample_time_s: f64) -> Self {
        Self { waypoints, sample_time_s }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("task: {e}")))
    }

    pub fn hold(theta: &DVector<f64>, sample_time_s: f64) -> Self {
        Self::new(vec![theta.iter().copied().collect()], sample_time_s)
    }

    pub fn steps_per_waypoint(&self, tau: f64) -> Result<usize> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidParameter(format!("time step must be positive, got {tau}")));
        }
        if !(self.sample_time_s > 0.0) || !self.sample_time_s.is_finite() {
            return Err(Error::TaskInfeasible(format!(
                "sample time {} s leaves no time between waypoints",
                self.sample_time_s
            )));
        }
        let ratio = self.sample_time_s / tau;
        let steps = ratio.round();
        if (ratio - steps).abs() > 1e-6 * ratio.max(1.0) || steps < 1.0 {
            return Err(Error::TaskInfeasible(format!(
                "sample time {} s is not a multiple of the control step {tau} s",
                self.sample_time_s
            )));
        }
        Ok(steps as usize)
    }

    pub fn validate(&self, dof: usize, tau: f64) -> Result<usize> {
        if self.waypoints.is_empty() {
            return Err(Error::TaskInfeasible("task has no waypoints".into()));
        }
        for w in &self.waypoints {
            ensure_dim("waypoint", dof, w.len())?;
            ensure_finite("waypoint", w.iter())?;
        }
        self.steps_per_waypoint(tau)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferOrigin {
    Task,
    Internal,
    Host,
}

/// Queue of jerk commands with a read cursor and the epoch it was issued under.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandBuffer {
    pub epoch: u64,
    pub origin: BufferOrigin,
    pub commands: Vec<DVector<f64>>,
    pub cursor: usize,
    /// State the buffer was generated from.
    pub start: JointState,
    /// Waypoints and the buffer index at which each is reached.
    pub waypoints: Vec<DVector<f64>>,
    pub waypoint_steps: Vec<usize>,
    /// Steps per waypoint after time scaling.
    pub segment_steps: usize,
}

impl CommandBuffer {
    pub fn empty(start: JointState, origin: BufferOrigin) -> Self {
        Self {
            epoch: 0,
            origin,
            commands: Vec::new(),
            cursor: 0,
            start,
            waypoints: Vec::new(),
            waypoint_steps: Vec::new(),
            segment_steps: 0,
        }
    }

    pub fn dof(&self) -> usize {
        self.start.dof()
    }

    pub fn len(&self) -> usize {
        self.commands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.commands.is_empty()
    }

    pub fn remaining(&self) -> usize {
        self.commands.len().saturating_sub(self.cursor)
    }

    pub fn is_exhausted(&self) -> bool {
        self.cursor >= self.commands.len()
    }

    /// Pops the command under the cursor; zero jerk once exhausted.
    pub fn next_command(&mut self) -> JerkCommand {
        match self.commands.get(self.cursor) {
            Some(u) => {
                self.cursor += 1;
                JerkCommand(u.clone())
            }
            None => JerkCommand::zeros(self.dof()),
        }
    }

    /// Number of waypoints whose scheduled step has been executed.
    pub fn waypoints_passed(&self) -> usize {
        self.waypoint_steps.iter().filter(|&&s| s <= self.cursor).count()
    }

    pub fn duration(&self, tau: f64) -> f64 {
        self.commands.len() as f64 * tau
    }

    /// Integrates the whole buffer from its start state.
    pub fn rollout(&self, tau: f64) -> Vec<JointState> {
        let mut out = Vec::with_capacity(self.commands.len() + 1);
        let mut q = self.start.clone();
        out.push(q.clone());
        for u in &self.commands {
            q = step_state(&q, u, tau);
            out.push(q.clone());
        }
        out
    }

    pub fn write_csv<W: Write>(&self, writer: W, tau: f64) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let n = self.dof();
        let mut header = vec!["step".to_string(), "t".to_string(), "epoch".to_string()];
        header.extend((0..n).map(|j| format!("u{j}")));
        header.extend((0..n).map(|j| format!("theta{j}")));
        w.write_record(&header).map_err(csv_err)?;
        let states = self.rollout(tau);
        for (k, u) in self.commands.iter().enumerate() {
            let mut row = vec![k.to_string(), format!("{}", k as f64 * tau), self.epoch.to_string()];
            row.extend(u.iter().map(|v| format!("{v}")));
            row.extend(states[k + 1].theta.iter().map(|v| format!("{v}")));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Config(format!("buffer csv: {e}")))?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("buffer csv: {e}"))
}

/// Same update as [`crate::kinematics::step_joint_state`], without validation.
fn step_state(q: &JointState, u: &DVector<f64>, tau: f64) -> JointState {
    let n = q.dof();
    let mut next = q.clone();
    for j in 0..n {
        let (x, v, a) = step_scalar((q.theta[j], q.theta_dot[j], q.theta_ddot[j]), u[j], tau);
        next.theta[j] = x;
        next.theta_dot[j] = v;
        next.theta_ddot[j] = a;
    }
    next
}

fn step_scalar((x, v, a): (f64, f64, f64), u: f64, tau: f64) -> (f64, f64, f64) {
    let tau2 = tau * tau;
    let tau3 = tau2 * tau;
    (x + v * tau + a * (0.5 * tau2) + u * (tau3 / 6.0), v + a * tau + u * (0.5 * tau2), a + u * tau)
}

/// Least-norm `w` with `M w = r` and `lo ≤ w ≤ hi`, or `None` when no such
/// `w` was found. Solved on the dual: `w(y) = clip(Mᵀy)`, Newton steps on
/// the free components with backtracking.
pub fn box_least_norm(m: &DMatrix<f64>, r: &DVector<f64>, lo: &[f64], hi: &[f64]) -> Option<DVector<f64>> {
    let (rows, cols) = m.shape();
    if r.len() != rows || lo.len() != cols || hi.len() != cols {
        return None;
    }
    let mut mn = m.clone();
    let mut rn = r.clone();
    for i in 0..rows {
        let norm = m.row(i).norm();
        if norm == 0.0 {
            if r[i] != 0.0 {
                return None;
            }
            continue;
        }
        mn.row_mut(i).scale_mut(1.0 / norm);
        rn[i] /= norm;
    }
    let primal = |y: &DVector<f64>| -> DVector<f64> {
        let raw = mn.transpose() * y;
        DVector::from_iterator(cols, (0..cols).map(|j| raw[j].clamp(lo[j], hi[j])))
    };
    let dual = |y: &DVector<f64>, w: &DVector<f64>| -> f64 { rn.dot(y) - y.dot(&(&mn * w)) + 0.5 * w.norm_squared() };
    let tol = 1e-13 * (1.0 + rn.amax());
    let mut y = DVector::zeros(rows);
    let mut w = primal(&y);
    let mut q = dual(&y, &w);
    for _ in 0..500 {
        let grad = &rn - &mn * &w;
        if grad.amax() <= tol {
            return Some(w);
        }
        let raw = mn.transpose() * &y;
        let mut h = DMatrix::<f64>::zeros(rows, rows);
        for j in 0..cols {
            if raw[j] > lo[j] && raw[j] < hi[j] {
                let c = mn.column(j);
                h += c * c.transpose();
            }
        }
        h += DMatrix::identity(rows, rows) * 1e-12;
        let step = match h.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => grad.clone(),
        };
        let slope = grad.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let y_try = &y + &step * t;
            let w_try = primal(&y_try);
            let q_try = dual(&y_try, &w_try);
            if q_try >= q + 1e-4 * t * slope || (&rn - &mn * &w_try).amax() <= tol {
                y = y_try;
                w = w_try;
                q = q_try;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    ((&rn - &mn * &w).amax() <= 1e-10 * (1.0 + rn.amax())).then_some(w)
}

/// Rows mapping a `k`-step jerk sequence to the change in final
/// `(position, velocity, acceleration)`.
fn endpoint_rows(k: usize, tau: f64, with_position: bool) -> DMatrix<f64> {
    let tau2 = tau * tau;
    let tau3 = tau2 * tau;
    let rows = if with_position { 3 } else { 2 };
    DMatrix::from_fn(rows, k, |i, j| {
        let m = (k - 1 - j) as f64;
        let which = if with_position { i } else { i + 1 };
        match which {
            0 => tau3 * (1.0 / 6.0 + 0.5 * m + 0.5 * m * m),
            1 => tau2 * (0.5 + m),
            _ => tau,
        }
    })
}

/// Quintic on `[0, dur]` matching position, velocity and acceleration at both ends.
#[derive(Debug, Clone, Copy)]
struct Quintic {
    c: [f64; 6],
}

impl Quintic {
    fn new((x0, v0, a0): (f64, f64, f64), (x1, v1, a1): (f64, f64, f64), dur: f64) -> Self {
        let h = x1 - x0;
        let (d, d2) = (dur, dur * dur);
        let (d3, d4, d5) = (d2 * d, d2 * d2, d2 * d2 * d);
        Self {
            c: [
                x0,
                v0,
                0.5 * a0,
                (20.0 * h - (8.0 * v1 + 12.0 * v0) * d - (3.0 * a0 - a1) * d2) / (2.0 * d3),
                (-30.0 * h + (14.0 * v1 + 16.0 * v0) * d + (3.0 * a0 - 2.0 * a1) * d2) / (2.0 * d4),
                (12.0 * h - 6.0 * (v1 + v0) * d + (a1 - a0) * d2) / (2.0 * d5),
            ],
        }
    }

    fn acceleration(&self, t: f64) -> f64 {
        let c = &self.c;
        2.0 * c[2] + t * (6.0 * c[3] + t * (12.0 * c[4] + t * 20.0 * c[5]))
    }
}

/// Velocities at interior waypoints: mean of adjacent slopes, zero where the
/// motion reverses; rest at the final waypoint.
fn waypoint_velocities(points: &[f64], seg: f64) -> Vec<f64> {
    let n = points.len();
    (0..n)
        .map(|i| {
            if i + 1 >= n || i == 0 {
                return 0.0;
            }
            let before = (points[i] - points[i - 1]) / seg;
            let after = (points[i + 1] - points[i]) / seg;
            if before * after <= 0.0 {
                0.0
            } else {
                0.5 * (before + after)
            }
        })
        .collect()
}

/// Jerk sequence of one joint for `segments` segments of `k` steps each, or
/// `None` when an endpoint correction within the bounds does not exist.
fn joint_profile(start: (f64, f64, f64), targets: &[f64], k: usize, tau: f64, lo: f64, hi: f64) -> Option<Vec<f64>> {
    let seg = k as f64 * tau;
    let mut knots = Vec::with_capacity(targets.len() + 1);
    knots.push(start.0);
    knots.extend_from_slice(targets);
    let vel = waypoint_velocities(&knots, seg);
    let rows = endpoint_rows(k, tau, true);
    let mut out = Vec::with_capacity(k * targets.len());
    let mut state = start;
    for (i, &target) in targets.iter().enumerate() {
        let goal = (target, vel[i + 1], 0.0);
        let poly = Quintic::new(state, goal, seg);
        let nominal: Vec<f64> = (0..k)
            .map(|s| (poly.acceleration((s + 1) as f64 * tau) - poly.acceleration(s as f64 * tau)) / tau)
            .collect();
        let mut end = state;
        for &u in &nominal {
            end = step_scalar(end, u, tau);
        }
        let residual = DVector::from_column_slice(&[goal.0 - end.0, goal.1 - end.1, goal.2 - end.2]);
        let wlo: Vec<f64> = nominal.iter().map(|u| lo - u).collect();
        let whi: Vec<f64> = nominal.iter().map(|u| hi - u).collect();
        if wlo.iter().chain(whi.iter()).any(|v| !v.is_finite()) || wlo.iter().zip(&whi).any(|(a, b)| a > b) {
            return None;
        }
        let fix = box_least_norm(&rows, &residual, &wlo, &whi)?;
        for (s, u) in nominal.iter().enumerate() {
            let u = (u + fix[s]).clamp(lo, hi);
            state = step_scalar(state, u, tau);
            out.push(u);
        }
    }
    Some(out)
}

fn violation_ratio(u: &[f64], lo: f64, hi: f64) -> f64 {
    u.iter()
        .map(|&v| if v > 0.0 { v / hi } else if v < 0.0 { v / lo } else { 0.0 })
        .fold(0.0, f64::max)
}

/// Jerk buffer through the task waypoints from `initial`, ending at rest.
///
/// Segments start at `sample_time_s` each and are stretched uniformly until
/// every joint's sequence fits its bounds.
pub fn generate(task: &Task, initial: &JointState, bounds: &JerkBounds, tau: f64) -> Result<CommandBuffer> {
    let n = initial.dof();
    initial.validate()?;
    ensure_dim("jerk bounds", n, bounds.dof())?;
    let base_steps = task.validate(n, tau)?;
    let waypoints: Vec<DVector<f64>> = task.waypoints.iter().map(|w| DVector::from_column_slice(w)).collect();
    let mut k = base_steps.max(MIN_SEGMENT_STEPS);
    for _ in 0..MAX_SCALING_ROUNDS {
        let mut profiles = Vec::with_capacity(n);
        let mut worst: f64 = 0.0;
        for j in 0..n {
            let targets: Vec<f64> = waypoints.iter().map(|w| w[j]).collect();
            let start = (initial.theta[j], initial.theta_dot[j], initial.theta_ddot[j]);
            match joint_profile(start, &targets, k, tau, bounds.min[j], bounds.max[j]) {
                Some(p) => {
                    worst = worst.max(violation_ratio(&p, bounds.min[j], bounds.max[j]));
                    profiles.push(p);
                }
                None => {
                    worst = f64::INFINITY;
                    break;
                }
            }
        }
        if worst <= 1.0 {
            let total = k * waypoints.len();
            let commands = (0..total).map(|s| DVector::from_iterator(n, profiles.iter().map(|p| p[s]))).collect();
            return Ok(CommandBuffer {
                epoch: 0,
                origin: BufferOrigin::Task,
                commands,
                cursor: 0,
                start: initial.clone(),
                waypoint_steps: (1..=waypoints.len()).map(|i| i * k).collect(),
                waypoints,
                segment_steps: k,
            });
        }
        let factor = if worst.is_finite() { worst.cbrt() } else { 1.5 };
        k = ((k as f64 * factor).ceil() as usize).max(k + 1);
    }
    Err(Error::TaskInfeasible("time scaling did not reach the jerk bounds".into()))
}

/// Continuous-time minimum duration to bring `(velocity, acceleration)` to
/// rest under `|jerk| ≤ limit`.
pub fn velocity_nulling_time(velocity: f64, acceleration: f64, limit: f64) -> f64 {
    let (x, y, j) = (velocity, acceleration, limit);
    let sigma = x + y * y.abs() / (2.0 * j);
    if sigma > 0.0 {
        (y + 2.0 * (j * x + 0.5 * y * y).sqrt()) / j
    } else if sigma < 0.0 {
        (-y + 2.0 * (-j * x + 0.5 * y * y).sqrt()) / j
    } else {
        y.abs() / j
    }
}

/// Shortest jerk sequence of one joint reaching zero velocity and acceleration.
fn nulling_profile(v: f64, a: f64, tau: f64, lo: f64, hi: f64) -> Result<Vec<f64>> {
    if v == 0.0 && a == 0.0 {
        return Ok(Vec::new());
    }
    let limit = lo.abs().min(hi);
    if !(limit > 0.0) {
        return Err(Error::TaskInfeasible("joint has no jerk authority to stop".into()));
    }
    let t_star = velocity_nulling_time(v, a, limit);
    let mut k = ((t_star / tau) - 1e-9).ceil().max(2.0) as usize;
    loop {
        let rows = endpoint_rows(k, tau, false);
        let rhs = DVector::from_column_slice(&[-v - k as f64 * tau * a, -a]);
        if let Some(u) = box_least_norm(&rows, &rhs, &vec![lo; k], &vec![hi; k]) {
            return Ok(u.iter().map(|x| x.clamp(lo, hi)).collect());
        }
        k += 1;
        if k as f64 * tau > 10.0 * t_star + 1.0 {
            return Err(Error::TaskInfeasible("could not stop joint within bounds".into()));
        }
    }
}

/// Brings every joint to rest as fast as the bounds allow; joints that stop
/// early hold with zero jerk.
pub fn internal_replan(q: &JointState, bounds: &JerkBounds, tau: f64) -> Result<CommandBuffer> {
    q.validate()?;
    ensure_dim("jerk bounds", q.dof(), bounds.dof())?;
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter("time step must be positive".into()));
    }
    let n = q.dof();
    let profiles = (0..n)
        .map(|j| nulling_profile(q.theta_dot[j], q.theta_ddot[j], tau, bounds.min[j], bounds.max[j]))
        .collect::<Result<Vec<_>>>()?;
    let len = profiles.iter().map(Vec::len).max().unwrap_or(0);
    let commands = (0..len)
        .map(|s| DVector::from_iterator(n, profiles.iter().map(|p| p.get(s).copied().unwrap_or(0.0))))
        .collect();
    let mut buffer = CommandBuffer::empty(q.clone(), BufferOrigin::Internal);
    buffer.commands = commands;
    Ok(buffer)
}

/// New buffer through the remaining waypoints: stop first, then follow the
/// task from the resulting rest state.
pub fn host_replan(task_remaining: &Task, q: &JointState, bounds: &JerkBounds, tau: f64) -> Result<CommandBuffer> {
    let stop = internal_replan(q, bounds, tau)?;
    let rest = stop.rollout(tau).pop().unwrap_or_else(|| q.clone());
    let rest = JointState::at_rest(rest.theta);
    let follow = generate(task_remaining, &rest, bounds, tau)?;
    let offset = stop.len();
    let mut commands = stop.commands;
    commands.extend(follow.commands);
    Ok(CommandBuffer {
        epoch: 0,
        origin: BufferOrigin::Host,
        commands,
        cursor: 0,
        start: q.clone(),
        waypoint_steps: follow.waypoint_steps.iter().map(|s| s + offset).collect(),
        waypoints: follow.waypoints,
        segment_steps: follow.segment_steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplanKind {
    Host,
    Internal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplanRequest {
    pub kind: ReplanKind,
    pub trigger_time: f64,
    pub state: JointState,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplanConfig {
    /// Inactive steps after an internal replan before the host is asked.
    pub debounce_steps: usize,
    pub host_latency_s: f64,
}

impl Default for ReplanConfig {
    fn default() -> Self {
        Self {
            debounce_steps: 5,
            host_latency_s: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReplanEvent {
    Internal { epoch: u64 },
    HostRequested { epoch: u64, deliver_step: u64 },
    HostDelivered { epoch: u64 },
    HostDiscarded { epoch: u64 },
}

#[derive(Debug, Clone, PartialEq)]
struct PendingHost {
    epoch: u64,
    guard_epoch: u64,
    deliver_step: u64,
    task: Task,
}

/// Owns the active buffer and swaps it at step boundaries in response to the
/// safeguard's activity.
#[derive(Debug, Clone)]
pub struct ReplanController {
    buffer: CommandBuffer,
    next_epoch: u64,
    sample_time_s: f64,
    pending: Option<PendingHost>,
    awaiting_host: bool,
    inactive_steps: usize,
    was_active: bool,
    remaining: Vec<Vec<f64>>,
    discarded: Vec<u64>,
    requests: Vec<ReplanRequest>,
    bounds: JerkBounds,
    tau: f64,
    latency_steps: u64,
    debounce: usize,
}

impl ReplanController {
    pub fn new(task: &Task, q: &JointState, bounds: &JerkBounds, tau: f64, cfg: &ReplanConfig) -> Result<Self> {
        if !(cfg.host_latency_s >= 0.0) || !cfg.host_latency_s.is_finite() {
            return Err(Error::InvalidParameter("host latency must be non-negative".into()));
        }
        let mut buffer = generate(task, q, bounds, tau)?;
        buffer.epoch = 1;
        Ok(Self {
            buffer,
            next_epoch: 2,
            sample_time_s: task.sample_time_s,
            pending: None,
            awaiting_host: false,
            inactive_steps: 0,
            was_active: false,
            remaining: task.waypoints.clone(),
            discarded: Vec::new(),
            requests: Vec::new(),
            bounds: bounds.clone(),
            tau,
            latency_steps: (cfg.host_latency_s / tau).round() as u64,
            debounce: cfg.debounce_steps,
        })
    }

    pub fn buffer(&self) -> &CommandBuffer {
        &self.buffer
    }

    pub fn epoch(&self) -> u64 {
        self.buffer.epoch
    }

    pub fn discarded_epochs(&self) -> &[u64] {
        &self.discarded
    }

    pub fn requests(&self) -> &[ReplanRequest] {
        &self.requests
    }

    pub fn host_pending(&self) -> bool {
        self.pending.is_some()
    }

    /// Nominal command for this step with the epoch it belongs to.
    pub fn next_command(&mut self) -> (u64, JerkCommand) {
        (self.buffer.epoch, self.buffer.next_command())
    }

    fn install(&mut self, mut buffer: CommandBuffer, epoch: u64) {
        if matches!(buffer.origin, BufferOrigin::Task | BufferOrigin::Host) {
            self.remaining = buffer.waypoints.iter().map(|w| w.iter().copied().collect()).collect();
        }
        buffer.epoch = epoch;
        self.buffer = buffer;
    }

    fn take_epoch(&mut self) -> u64 {
        let e = self.next_epoch;
        self.next_epoch += 1;
        e
    }

    fn remaining_task(&self) -> Task {
        let mut waypoints: Vec<Vec<f64>> = if matches!(self.buffer.origin, BufferOrigin::Task | BufferOrigin::Host) {
            self.remaining[self.buffer.waypoints_passed().min(self.remaining.len())..].to_vec()
        } else {
            self.remaining.clone()
        };
        if waypoints.is_empty() {
            waypoints = self.remaining.last().cloned().into_iter().collect();
        }
        Task::new(waypoints, self.sample_time_s)
    }

    /// Updates the state machine after step `step` (state `q` at time `t`).
    pub fn observe(&mut self, step: u64, t: f64, active: bool, q: &JointState) -> Result<Vec<ReplanEvent>> {
        let mut events = Vec::new();
        if active {
            if let Some(p) = self.pending.take() {
                self.discarded.push(p.epoch);
                events.push(ReplanEvent::HostDiscarded { epoch: p.epoch });
            }
            self.inactive_steps = 0;
            self.was_active = true;
            return Ok(events);
        }
        if self.was_active {
            self.was_active = false;
            let task = self.remaining_task();
            self.remaining = task.waypoints;
            let buffer = internal_replan(q, &self.bounds, self.tau)?;
            let epoch = self.take_epoch();
            self.install(buffer, epoch);
            self.requests.push(ReplanRequest {
                kind: ReplanKind::Internal,
                trigger_time: t,
                state: q.clone(),
            });
            events.push(ReplanEvent::Internal { epoch });
            self.awaiting_host = true;
            self.inactive_steps = 0;
        } else if self.awaiting_host && self.pending.is_none() {
            self.inactive_steps += 1;
            if self.inactive_steps >= self.debounce {
                let epoch = self.take_epoch();
                let deliver_step = step + self.latency_steps;
                self.pending = Some(PendingHost {
                    epoch,
                    guard_epoch: self.buffer.epoch,
                    deliver_step,
                    task: self.remaining_task(),
                });
                self.requests.push(ReplanRequest {
                    kind: ReplanKind::Host,
                    trigger_time: t,
                    state: q.clone(),
                });
                events.push(ReplanEvent::HostRequested { epoch, deliver_step });
            }
        }
        if self.pending.as_ref().is_some_and(|p| step >= p.deliver_step) {
            let p = self.pending.take().expect("checked above");
            if p.guard_epoch == self.buffer.epoch {
                let buffer = host_replan(&p.task, q, &self.bounds, self.tau)?;
                self.install(buffer, p.epoch);
                self.awaiting_host = false;
                events.push(ReplanEvent::HostDelivered { epoch: p.epoch });
            } else {
                self.discarded.push(p.epoch);
                events.push(ReplanEvent::HostDiscarded { epoch: p.epoch });
            }
        }
        Ok(events)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bounds1(limit: f64) -> JerkBounds {
        JerkBounds::symmetric(&[limit]).unwrap()
    }

    #[test]
    fn hold_task_is_all_zero() {
        let q = JointState::at_rest(DVector::from_column_slice(&[0.3, -0.2]));
        let b = generate(&Task::hold(&q.theta, 0.4), &q, &JerkBounds::symmetric(&[10.0, 10.0]).unwrap(), 0.008).unwrap();
        assert_eq!(b.len(), 50);
        assert!(b.commands.iter().all(|u| u.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn exhausted_buffer_yields_zero() {
        let q = JointState::at_rest(DVector::zeros(1));
        let mut b = generate(&Task::new(vec![vec![0.1]], 0.08), &q, &bounds1(1000.0), 0.008).unwrap();
        let first = b.commands[0].clone();
        assert_eq!(b.next_command().0, first);
        for _ in 0..b.len() {
            b.next_command();
        }
        assert!(b.is_exhausted());
        assert_eq!(b.next_command().0[0], 0.0);
    }

    #[test]
    fn nulling_time_double_ramp() {
        assert!((velocity_nulling_time(1.0, 0.0, 4.0) - 1.0).abs() < 1e-15);
        assert!((velocity_nulling_time(0.0, 2.0, 4.0) - 0.5 - 2.0 * (0.5f64 * 4.0).sqrt() / 4.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_tasks() {
        let q = JointState::at_rest(DVector::zeros(1));
        let b = bounds1(10.0);
        assert!(matches!(generate(&Task::new(vec![vec![1.0]], 0.0), &q, &b, 0.008), Err(Error::TaskInfeasible(_))));
        assert!(matches!(generate(&Task::new(vec![vec![1.0]], 0.011), &q, &b, 0.008), Err(Error::TaskInfeasible(_))));
        assert!(matches!(generate(&Task::new(vec![], 0.08), &q, &b, 0.008), Err(Error::TaskInfeasible(_))));
        assert!(generate(&Task::new(vec![vec![1.0, 2.0]], 0.08), &q, &b, 0.008).is_err());
    }

    #[test]
    fn task_json_round_trip() {
        let t = Task::from_json(r#"{"waypoints": [[0.1, 0.2]], "sample_time_s": 1.0}"#).unwrap();
        assert_eq!(t.waypoints, vec![vec![0.1, 0.2]]);
        assert!(Task::from_json("{}").is_err());
    }
}
