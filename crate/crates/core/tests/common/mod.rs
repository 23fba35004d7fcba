#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3xX, RowDVector, SVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use jssa_core::jpc::{generate, internal_replan, ReplanConfig, ReplanController, ReplanEvent, Task};
use jssa_core::sim::{run, write_telemetry_csv, Scenario};
use jssa_core::geometry::{critical_pair, distance_derivatives, robot_capsules, AgentCapsule, CriticalPair, PointState};
use jssa_core::kinematics::{step_joint_state, JerkBounds, JerkCommand, JointState, KinematicChain};
use jssa_core::safeguard::qp::solve;
use jssa_core::safeguard::{kkt_residual, CostMatrix, QpProblem, QpStatus};
use jssa_core::safety_index::{build_constraint, ConstraintForm, SafetyIndexParams};

pub const TAU: f64 = 0.008;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn chain() -> KinematicChain {
    KinematicChain::default_six_dof()
}

pub fn bounds() -> JerkBounds {
    JerkBounds::default_six_dof()
}

/// Joint ranges the arm works in.
pub const WORK_RANGES: [[f64; 2]; 6] = [[-1.57, 1.57], [-0.5, 0.8], [-0.3, 1.2], [-1.0, 1.0], [-1.3, 1.3], [-PI, PI]];

pub fn random_state(r: &mut ChaCha8Rng, speed: f64, accel: f64) -> JointState {
    let theta = DVector::from_iterator(6, WORK_RANGES.iter().map(|w| r.random_range(w[0]..=w[1])));
    let theta_dot = DVector::from_iterator(6, (0..6).map(|_| r.random_range(-speed..=speed)));
    let theta_ddot = DVector::from_iterator(6, (0..6).map(|_| r.random_range(-accel..=accel)));
    JointState { theta, theta_dot, theta_ddot }
}

pub fn random_unit(r: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

pub fn random_in_bounds(r: &mut ChaCha8Rng, b: &JerkBounds) -> DVector<f64> {
    if r.random_bool(0.5) {
        DVector::from_iterator(b.dof(), (0..b.dof()).map(|i| if r.random_bool(0.5) { b.min[i] } else { b.max[i] }))
    } else {
        DVector::from_iterator(b.dof(), (0..b.dof()).map(|i| r.random_range(b.min[i]..=b.max[i])))
    }
}

/// Joint angles along the zero-jerk curve through `q` at time `t`.
pub fn theta_at(q: &JointState, t: f64) -> DVector<f64> {
    &q.theta + &q.theta_dot * t + &q.theta_ddot * (0.5 * t * t)
}

/// Central-difference Jacobian of a link-fixed point.
pub fn fd_jacobian(chain: &KinematicChain, theta: &DVector<f64>, link: usize, local: &Vector3<f64>) -> Matrix3xX<f64> {
    let h = 1e-6;
    let mut j = Matrix3xX::zeros(theta.len());
    for i in 0..theta.len() {
        let mut tp = theta.clone();
        let mut tm = theta.clone();
        tp[i] += h;
        tm[i] -= h;
        let d = (chain.point_position(&tp, link, local).unwrap() - chain.point_position(&tm, link, local).unwrap()) / (2.0 * h);
        j.set_column(i, &d);
    }
    j
}

/// `dJ/dt` and `d²J/dt²` by differencing the Jacobian along the zero-jerk time curve.
pub fn time_derivatives_of_jacobian(chain: &KinematicChain, q: &JointState, link: usize, local: &Vector3<f64>) -> (Matrix3xX<f64>, Matrix3xX<f64>) {
    let jac = |t: f64| chain.jacobian(&theta_at(q, t), link, local).unwrap();
    let h1 = 1e-5;
    let j_dot = (jac(h1) - jac(-h1)) / (2.0 * h1);
    let h2 = 1e-3;
    let (jp, j0, jm, jp2, jm2) = (jac(h2), jac(0.0), jac(-h2), jac(2.0 * h2), jac(-2.0 * h2));
    let j_ddot = (-jp2 + jp * 16.0 - j0 * 30.0 + jm * 16.0 - jm2) / (12.0 * h2 * h2);
    (j_dot, j_ddot)
}

/// Position, velocity and acceleration of a link-fixed point at state `q`,
/// with `J̇` from a directional difference.
pub fn point_state(chain: &KinematicChain, q: &JointState, link: usize, local: &Vector3<f64>) -> PointState {
    let j = chain.jacobian(&q.theta, link, local).unwrap();
    let h = 1e-6;
    let jp = chain.jacobian(&(&q.theta + &q.theta_dot * h), link, local).unwrap();
    let jm = chain.jacobian(&(&q.theta - &q.theta_dot * h), link, local).unwrap();
    let j_dot = (jp - jm) / (2.0 * h);
    PointState {
        p: chain.point_position(&q.theta, link, local).unwrap(),
        v: &j * &q.theta_dot,
        a: &j * &q.theta_ddot + j_dot * &q.theta_dot,
    }
}

/// `φ · d_core` written out from the distance and its derivatives.
pub fn phi_d_oracle(params: &SafetyIndexParams, delta: &SVector<f64, 9>, radius_sum: f64) -> f64 {
    let p = Vector3::new(delta[0], delta[1], delta[2]);
    let v = Vector3::new(delta[3], delta[4], delta[5]);
    let a = Vector3::new(delta[6], delta[7], delta[8]);
    let dc = p.norm();
    let d_dot = p.dot(&v) / dc;
    let d_ddot = (v.norm_squared() + p.dot(&a) - d_dot * d_dot) / dc;
    let surface = dc - radius_sum;
    let phi = params.d_min * params.d_min - surface * surface - params.lambda1 * d_dot - params.lambda2 * d_ddot;
    phi * dc
}

pub fn relative(m: &PointState, h: &PointState) -> SVector<f64, 9> {
    let mut out = SVector::<f64, 9>::zeros();
    out.fixed_rows_mut::<3>(0).copy_from(&(m.p - h.p));
    out.fixed_rows_mut::<3>(3).copy_from(&(m.v - h.v));
    out.fixed_rows_mut::<3>(6).copy_from(&(m.a - h.a));
    out
}

pub fn sphere_agent(p: Vector3<f64>, v: Vector3<f64>, a: Vector3<f64>, radius: f64) -> AgentCapsule {
    let s = PointState { p, v, a };
    AgentCapsule { agent: 0, link: 0, start: s, end: s, radius }
}

/// A robot state with a sphere agent placed at surface distance `d` from a
/// random point of a random robot capsule, and the resulting critical pair.
pub struct PairSample {
    pub q: JointState,
    pub agent: AgentCapsule,
    pub pair: CriticalPair,
}

pub fn random_pair(r: &mut ChaCha8Rng, chain: &KinematicChain, d_range: (f64, f64), speed: f64, accel: f64) -> PairSample {
    loop {
        let q = random_state(r, speed, accel);
        let caps = robot_capsules(chain, &q.theta).unwrap();
        let c = &caps[r.random_range(0..caps.len())];
        let anchor = c.world.point_at(r.random::<f64>());
        let radius = r.random_range(0.05..0.2);
        let d = r.random_range(d_range.0..d_range.1);
        let p = anchor + random_unit(r) * (d + radius + c.world.radius);
        let v = random_unit(r) * r.random_range(0.0..1.5);
        let a = random_unit(r) * r.random_range(0.0..5.0);
        let agent = sphere_agent(p, v, a, radius);
        let pair = critical_pair(chain, &q, &caps, std::slice::from_ref(&agent)).unwrap();
        if pair.distance >= d_range.0 {
            return PairSample { q, agent, pair };
        }
    }
}

/// Box- and half-space-constrained weighted projection solved by enumerating
/// every active set. Returns `None` when no point of the box satisfies `l·u ≥ s`.
pub fn enumerate_qp(nominal: &DVector<f64>, l: &RowDVector<f64>, s: f64, lo: &DVector<f64>, hi: &DVector<f64>, v: &DMatrix<f64>) -> Option<(DVector<f64>, f64)> {
    let n = nominal.len();
    let objective = |u: &DVector<f64>| {
        let e = u - nominal;
        (e.transpose() * v * &e)[0]
    };
    let feasible = |u: &DVector<f64>| {
        (0..n).all(|i| u[i] >= lo[i] - 1e-9 && u[i] <= hi[i] + 1e-9) && (l * u)[0] >= s - 1e-9 * (1.0 + s.abs())
    };
    let mut best: Option<(DVector<f64>, f64)> = None;
    let total = 3usize.pow(n as u32);
    for code in 0..total {
        let mut state = vec![0u8; n];
        let mut c = code;
        for st in state.iter_mut() {
            *st = (c % 3) as u8;
            c /= 3;
        }
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == 0).collect();
        let mut fixed = DVector::zeros(n);
        for i in 0..n {
            fixed[i] = match state[i] {
                1 => lo[i],
                2 => hi[i],
                _ => 0.0,
            };
        }
        for with_constraint in [false, true] {
            let m = free.len();
            let rows = m + usize::from(with_constraint);
            if rows == 0 {
                let u = fixed.clone();
                if feasible(&u) {
                    let f = objective(&u);
                    if best.as_ref().is_none_or(|b| f < b.1) {
                        best = Some((u, f));
                    }
                }
                continue;
            }
            // Stationarity on the free block, optionally with l·u = s.
            let mut k = DMatrix::zeros(rows, rows);
            let mut rhs = DVector::zeros(rows);
            for (a, &i) in free.iter().enumerate() {
                for (b, &j) in free.iter().enumerate() {
                    k[(a, b)] = v[(i, j)];
                }
                let mut r = 0.0;
                for j in 0..n {
                    r += v[(i, j)] * nominal[j];
                    if state[j] != 0 {
                        r -= v[(i, j)] * fixed[j];
                    }
                }
                rhs[a] = r;
            }
            if with_constraint {
                for (a, &i) in free.iter().enumerate() {
                    k[(a, m)] = -l[i];
                    k[(m, a)] = l[i];
                }
                let mut r = s;
                for j in 0..n {
                    if state[j] != 0 {
                        r -= l[j] * fixed[j];
                    }
                }
                rhs[m] = r;
            }
            let Some(sol) = k.lu().solve(&rhs) else { continue };
            let mut u = fixed.clone();
            for (a, &i) in free.iter().enumerate() {
                u[i] = sol[a];
            }
            if with_constraint && m < rows && sol[m] < -1e-9 {
                continue;
            }
            if feasible(&u) {
                let f = objective(&u);
                if best.as_ref().is_none_or(|b| f < b.1) {
                    best = Some((u, f));
                }
            }
        }
    }
    best
}

/// A random symmetric positive definite matrix with condition number up to about 100.
pub fn random_spd(r: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
    let q = a.qr().q();
    let d = DMatrix::from_diagonal(&DVector::from_iterator(n, (0..n).map(|_| 10f64.powf(r.random_range(-1.0..1.0)))));
    let m = &q * d * q.transpose();
    (&m + m.transpose()) * 0.5
}

pub fn random_diag(r: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_iterator(n, (0..n).map(|_| 10f64.powf(r.random_range(-1.0..1.0)))))
}

/// Random QP instance on the default jerk box: `(nominal, l, s, V)`.
pub fn random_qp(r: &mut ChaCha8Rng, b: &JerkBounds, dense: bool) -> (DVector<f64>, RowDVector<f64>, f64, DMatrix<f64>) {
    let n = b.dof();
    let nominal = DVector::from_iterator(n, (0..n).map(|i| r.random_range(1.3 * b.min[i]..1.3 * b.max[i])));
    let l = RowDVector::from_iterator(n, (0..n).map(|_| if r.random_bool(0.1) { 0.0 } else { r.random_range(-1.0..1.0) }));
    let reach: f64 = (0..n).map(|i| (l[i] * b.min[i]).max(l[i] * b.max[i])).sum();
    let s = reach * r.random_range(-0.5..1.05);
    let v = if dense { random_spd(r, n) } else { random_diag(r, n) };
    (nominal, l, s, v)
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / b.abs().max(floor)
}

pub fn mat_rel_err(a: &Matrix3xX<f64>, b: &Matrix3xX<f64>, floor: f64) -> f64 {
    (a - b).norm() / b.norm().max(floor)
}

/// Worst `|(S − Lu) − φ(x_{k+1})·d_{k+1}|` over `count` random states and commands.
pub fn worst_linearization_error(form: ConstraintForm, count: usize, seed: u64) -> f64 {
    let ch = chain();
    let b = bounds();
    let params = SafetyIndexParams::default();
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let s = random_pair(&mut r, &ch, (0.05, 1.0), 1.0, 5.0);
        let agent_next = s.pair.agent_point.propagate(TAU);
        let c = build_constraint(&params, &ch, &s.pair, &agent_next, &s.q, TAU, form).unwrap();
        let u = random_in_bounds(&mut r, &b);
        let q1 = step_joint_state(&s.q, &JerkCommand(u.clone()), TAU).unwrap();
        let m1 = point_state(&ch, &q1, s.pair.robot_link, &s.pair.robot_local_point);
        let exact = phi_d_oracle(&params, &relative(&m1, &agent_next), s.pair.radius_sum);
        worst = worst.max((c.s - (&c.l * &u)[0] - exact).abs());
    }
    worst
}

/// Worst relative errors of `J̇` and `J̈` over `count` random states.
pub fn jacobian_derivative_errors(count: usize, seed: u64) -> (f64, f64) {
    let ch = chain();
    let mut r = rng(seed);
    let (mut e1, mut e2) = (0.0f64, 0.0f64);
    for _ in 0..count {
        let q = random_state(&mut r, 1.0, 5.0);
        let link = r.random_range(1..=6);
        let local = Vector3::new(r.random_range(-0.1..0.1), r.random_range(-0.1..0.1), r.random_range(-0.1..0.2));
        let bundle = ch.point_jacobian_bundle(&q, link, &local).unwrap();
        let (j_dot, j_ddot) = time_derivatives_of_jacobian(&ch, &q, link, &local);
        e1 = e1.max(mat_rel_err(&bundle.j_dot, &j_dot, 1e-3));
        e2 = e2.max(mat_rel_err(&bundle.j_ddot, &j_ddot, 1e-3));
    }
    (e1, e2)
}

/// Worst relative errors of `ḋ` and `d̈` against differentiating the
/// rolled-out core distance, over `count` random pairs.
pub fn distance_rate_errors(count: usize, seed: u64) -> (f64, f64) {
    let ch = chain();
    let mut r = rng(seed);
    let (mut e1, mut e2) = (0.0f64, 0.0f64);
    for _ in 0..count {
        let s = random_pair(&mut r, &ch, (0.05, 1.0), 1.0, 5.0);
        let dd = distance_derivatives(&s.pair).unwrap();
        let local = s.pair.robot_local_point;
        let h = s.agent.start;
        let core = |t: f64| {
            let m = ch.point_position(&theta_at(&s.q, t), s.pair.robot_link, &local).unwrap();
            (m - (h.p + h.v * t + h.a * (0.5 * t * t))).norm()
        };
        let e = 1e-4;
        let d_dot = (core(e) - core(-e)) / (2.0 * e);
        let e = 1e-3;
        let d_ddot = (core(e) - 2.0 * core(0.0) + core(-e)) / (e * e);
        e1 = e1.max(rel_err(dd.d_dot, d_dot, 1e-2));
        e2 = e2.max(rel_err(dd.d_ddot, d_ddot, 1e-1));
    }
    (e1, e2)
}

#[derive(Debug, Default)]
pub struct QpOracleReport {
    pub instances: usize,
    pub infeasible: usize,
    pub worst_objective_gap: f64,
    pub worst_kkt: f64,
    /// Instances whose solution disagrees with the oracle beyond tolerance.
    pub mismatches: usize,
}

/// Relative objective tolerance against the enumeration oracle.
pub const QP_OBJECTIVE_TOL: f64 = 1e-6;
pub const QP_KKT_TOL: f64 = 1e-8;

/// Solves `count` random instances (alternating diagonal and dense `V`) and
/// compares each with [`enumerate_qp`].
pub fn qp_oracle_run(count: usize, seed: u64) -> QpOracleReport {
    let b = bounds();
    let mut r = rng(seed);
    let mut rep = QpOracleReport::default();
    for i in 0..count {
        let (nominal, l, s, v) = random_qp(&mut r, &b, i % 2 == 1);
        let weight = CostMatrix::new(v.clone()).unwrap();
        let problem = QpProblem {
            nominal: &nominal,
            l: &l,
            s,
            lo: &b.min,
            hi: &b.max,
            weight: &weight,
        };
        let sol = solve(&problem).unwrap();
        rep.instances += 1;
        match enumerate_qp(&nominal, &l, s, &b.min, &b.max, &v) {
            Some((_, best)) => {
                let gap = (sol.objective - best).abs() / best.abs().max(1.0);
                let kkt = kkt_residual(&problem, &sol.u);
                rep.worst_objective_gap = rep.worst_objective_gap.max(gap);
                rep.worst_kkt = rep.worst_kkt.max(kkt);
                if gap > QP_OBJECTIVE_TOL || kkt > QP_KKT_TOL || sol.status == QpStatus::Infeasible {
                    rep.mismatches += 1;
                }
            }
            None => {
                rep.infeasible += 1;
                if sol.status != QpStatus::Infeasible || sol.u != problem.max_effort_point() {
                    rep.mismatches += 1;
                }
            }
        }
    }
    rep
}

/// Proptest configuration without on-disk failure persistence.
pub fn quiet_config(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases,
        failure_persistence: None,
        ..proptest::test_runner::Config::default()
    }
}

fn random_task(r: &mut ChaCha8Rng) -> Task {
    let count = r.random_range(1..5);
    let waypoints = (0..count)
        .map(|_| WORK_RANGES.iter().map(|w| r.random_range(w[0]..w[1])).collect())
        .collect();
    Task::new(waypoints, TAU * r.random_range(40..150) as f64)
}

fn rollout(start: &JointState, commands: &[DVector<f64>]) -> Vec<JointState> {
    let mut out = vec![start.clone()];
    for u in commands {
        let next = step_joint_state(out.last().unwrap(), &JerkCommand(u.clone()), TAU).unwrap();
        out.push(next);
    }
    out
}

fn within_bounds(commands: &[DVector<f64>], b: &JerkBounds) -> bool {
    commands.iter().all(|u| b.contains(&JerkCommand(u.clone())))
}

/// Worst waypoint miss (rad) of generated buffers, and whether every command
/// stayed inside the jerk box.
pub fn jpc_tracking_error(count: usize, seed: u64) -> (f64, bool) {
    let b = bounds();
    let mut r = rng(seed);
    let (mut worst, mut inside) = (0.0f64, true);
    for i in 0..count {
        let task = random_task(&mut r);
        let start = if i % 2 == 0 {
            JointState::at_rest(DVector::from_iterator(6, WORK_RANGES.iter().map(|w| r.random_range(w[0]..w[1]))))
        } else {
            random_state(&mut r, 0.5, 2.0)
        };
        let buffer = generate(&task, &start, &b, TAU).unwrap();
        let states = rollout(&start, &buffer.commands);
        for (w, &k) in task.waypoints.iter().zip(buffer.waypoint_steps.iter()) {
            for j in 0..6 {
                worst = worst.max((states[k].theta[j] - w[j]).abs());
            }
        }
        inside &= within_bounds(&buffer.commands, &b);
    }
    (worst, inside)
}

/// Largest residual `|θ̇|`, `|θ̈|` after internal replans from random states.
pub fn internal_replan_residual(count: usize, seed: u64) -> (f64, bool) {
    let b = bounds();
    let mut r = rng(seed);
    let (mut worst, mut inside) = (0.0f64, true);
    for _ in 0..count {
        let q = random_state(&mut r, 1.0, 5.0);
        let buffer = internal_replan(&q, &b, TAU).unwrap();
        let end = rollout(&q, &buffer.commands).pop().unwrap();
        worst = worst.max(end.theta_dot.amax()).max(end.theta_ddot.amax());
        inside &= within_bounds(&buffer.commands, &b);
    }
    (worst, inside)
}

#[derive(Debug, Default)]
pub struct EpochAudit {
    /// Commands executed under an epoch that was later discarded.
    pub stale: usize,
    /// Times the executed epoch went backwards.
    pub regressions: usize,
    pub delivered: usize,
    pub discarded: usize,
}

/// Drives a replan controller with bursts of safeguard activity and audits
/// the epochs of the executed commands.
pub fn replan_epoch_audit(latency_s: f64, seed: u64) -> EpochAudit {
    let b = bounds();
    let mut r = rng(seed);
    let task = Task::new(vec![vec![0.8, 0.3, 0.6, 0.2, -0.4, 1.0], vec![-0.6, 0.1, 0.2, -0.3, 0.5, -1.0]], 1.2);
    let mut q = JointState::at_rest(DVector::zeros(6));
    let cfg = ReplanConfig {
        debounce_steps: 5,
        host_latency_s: latency_s,
    };
    let mut ctl = ReplanController::new(&task, &q, &b, TAU, &cfg).unwrap();
    let mut executed = Vec::new();
    let mut audit = EpochAudit::default();
    let mut active_left = 0usize;
    for step in 0..3000u64 {
        let (epoch, u) = ctl.next_command();
        executed.push(epoch);
        q = step_joint_state(&q, &u, TAU).unwrap();
        if active_left == 0 && r.random_bool(0.004) {
            active_left = r.random_range(1..60);
        }
        let active = active_left > 0;
        active_left = active_left.saturating_sub(1);
        for e in ctl.observe(step, step as f64 * TAU, active, &q).unwrap() {
            match e {
                ReplanEvent::HostDelivered { .. } => audit.delivered += 1,
                ReplanEvent::HostDiscarded { .. } => audit.discarded += 1,
                _ => {}
            }
        }
    }
    audit.stale = executed.iter().filter(|e| ctl.discarded_epochs().contains(e)).count();
    audit.regressions = executed.windows(2).filter(|w| w[1] < w[0]).count();
    audit
}

/// Same audit on a full simulated run of `scenario` with the given host latency.
pub fn scenario_epoch_audit(scenario: &Scenario, latency_s: f64) -> EpochAudit {
    let mut s = scenario.clone();
    s.replan.host_latency_s = latency_s;
    let result = run(&s).unwrap();
    let epochs: Vec<u64> = result.telemetry.iter().map(|t| t.epoch).collect();
    EpochAudit {
        stale: epochs.iter().filter(|e| result.discarded_epochs.contains(e)).count(),
        regressions: epochs.windows(2).filter(|w| w[1] < w[0]).count(),
        delivered: result.events.iter().filter(|(_, e)| matches!(e, ReplanEvent::HostDelivered { .. })).count(),
        discarded: result.discarded_epochs.len(),
    }
}

/// Telemetry of `scenario` rendered as CSV bytes.
pub fn telemetry_bytes(scenario: &Scenario) -> Vec<u8> {
    let result = run(scenario).unwrap();
    let mut buf = Vec::new();
    write_telemetry_csv(&result.telemetry, &mut buf).unwrap();
    buf
}

/// Emitted commands outside the jerk box, and commands checked, over one run.
pub fn jerk_bound_audit(scenario: &Scenario) -> (usize, usize) {
    let b = scenario.bounds(6).unwrap();
    let result = run(scenario).unwrap();
    let bad = result.telemetry.iter().filter(|t| !b.contains(&JerkCommand::from_slice(&t.u_safe))).count();
    (bad, result.telemetry.len())
}
