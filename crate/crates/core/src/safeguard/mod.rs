//! Safe-control synthesis: the jerk-level safeguard and the acceleration-level
//! baseline it is compared against.

pub mod qp;

use nalgebra::{DVector, RowDVector, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::agents::Environment;
use crate::error::{ensure_dim, Error, Result};
use crate::geometry::{critical_pair, distance_derivatives, robot_capsules, CriticalPair, DEGENERATE_DISTANCE};
use crate::kinematics::{JerkBounds, JerkCommand, JointState, KinematicChain};
use crate::safety_index::{build_constraint, ConstraintForm, LinearizedConstraint, SafetyIndexParams};

pub use qp::{kkt_residual, CostMatrix, QpProblem, QpSolution, QpStatus};

/// Tolerance for reporting a command as modified.
pub const ACTIVE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    #[default]
    None,
    Clip,
    MaxBrake,
}

impl Fallback {
    pub fn as_str(self) -> &'static str {
        match self {
            Fallback::None => "none",
            Fallback::Clip => "clip",
            Fallback::MaxBrake => "max_brake",
        }
    }
}

/// Per-step quantities logged alongside the command.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Diagnostics {
    /// Surface distance of the critical pair.
    pub d: f64,
    pub d_dot: f64,
    pub d_ddot: f64,
    pub phi: f64,
    pub s: f64,
    pub lu_nominal: f64,
    pub lu_safe: f64,
    pub robot_capsule: usize,
    pub robot_link: usize,
    pub agent: usize,
    pub agent_link: usize,
    /// Components of the unclipped command outside the bounds (baseline only).
    pub pre_clip_violations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SafeControlOutcome {
    pub u_safe: JerkCommand,
    pub active: bool,
    pub constraint: Option<LinearizedConstraint>,
    pub fallback_used: Fallback,
    pub objective_value: f64,
    pub diagnostics: Diagnostics,
}

fn differs(a: &DVector<f64>, b: &DVector<f64>) -> bool {
    a.iter().zip(b.iter()).any(|(x, y)| (x - y).abs() > ACTIVE_TOLERANCE)
}

fn check_command(u_nom: &JerkCommand, bounds: &JerkBounds) -> Result<()> {
    ensure_dim("nominal jerk", bounds.dof(), u_nom.dof())?;
    if u_nom.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("nominal jerk"));
    }
    Ok(())
}

/// Minimal V-weighted modification of `u_nom` satisfying `L u ≥ S` within
/// the jerk bounds.
pub fn project_safe(
    u_nom: &JerkCommand,
    constraint: &LinearizedConstraint,
    bounds: &JerkBounds,
    weight: &CostMatrix,
) -> Result<SafeControlOutcome> {
    check_command(u_nom, bounds)?;
    let problem = QpProblem {
        nominal: &u_nom.0,
        l: &constraint.l,
        s: constraint.s,
        lo: &bounds.min,
        hi: &bounds.max,
        weight,
    };
    let sol = qp::solve(&problem)?;
    let fallback_used = if sol.status == QpStatus::Infeasible {
        Fallback::MaxBrake
    } else {
        Fallback::None
    };
    let lu_nominal = (&constraint.l * &u_nom.0)[0];
    let lu_safe = (&constraint.l * &sol.u)[0];
    Ok(SafeControlOutcome {
        active: differs(&sol.u, &u_nom.0),
        objective_value: sol.objective,
        u_safe: JerkCommand(sol.u),
        constraint: Some(constraint.clone()),
        fallback_used,
        diagnostics: Diagnostics {
            s: constraint.s,
            lu_nominal,
            lu_safe,
            ..Diagnostics::default()
        },
    })
}

/// Jerk that decelerates every joint as hard as the bounds allow: opposes the
/// joint velocity, or the joint acceleration for joints already at rest.
pub fn brake_command(q: &JointState, bounds: &JerkBounds) -> JerkCommand {
    let n = bounds.dof();
    JerkCommand(DVector::from_iterator(
        n,
        (0..n).map(|i| {
            let sign = if q.theta_dot[i] != 0.0 {
                q.theta_dot[i].signum()
            } else {
                q.theta_ddot[i].signum()
            };
            if sign > 0.0 {
                bounds.min[i]
            } else if sign < 0.0 {
                bounds.max[i]
            } else {
                0.0
            }
        }),
    ))
}

fn brake_outcome(u_nom: &JerkCommand, q: &JointState, bounds: &JerkBounds, weight: Option<&CostMatrix>, diagnostics: Diagnostics) -> SafeControlOutcome {
    let u = brake_command(q, bounds);
    SafeControlOutcome {
        active: differs(&u.0, &u_nom.0),
        objective_value: weight.map_or_else(|| (&u.0 - &u_nom.0).norm_squared(), |w| w.objective(&u.0, &u_nom.0)),
        u_safe: u,
        constraint: None,
        fallback_used: Fallback::MaxBrake,
        diagnostics,
    }
}

fn pair_diagnostics(pair: &CriticalPair) -> Diagnostics {
    Diagnostics {
        d: pair.distance,
        robot_capsule: pair.robot_capsule,
        robot_link: pair.robot_link,
        agent: pair.agent,
        agent_link: pair.agent_link,
        ..Diagnostics::default()
    }
}

/// Everything the safeguard needs besides the nominal command and joint state.
#[derive(Debug, Clone, Copy)]
pub struct SafeguardContext<'a> {
    pub chain: &'a KinematicChain,
    pub environment: &'a Environment,
    pub bounds: &'a JerkBounds,
    pub tau: f64,
}

/// One step of the jerk-level safeguard.
pub fn jssa_step(
    u_nom: &JerkCommand,
    q: &JointState,
    ctx: &SafeguardContext<'_>,
    params: &SafetyIndexParams,
    weight: &CostMatrix,
    form: ConstraintForm,
) -> Result<SafeControlOutcome> {
    check_command(u_nom, ctx.bounds)?;
    ensure_dim("joint state", ctx.chain.dof(), q.dof())?;
    q.validate()?;
    let robot = robot_capsules(ctx.chain, &q.theta)?;
    let agents = ctx.environment.capsules();
    let pair = critical_pair(ctx.chain, q, &robot, &agents)?;
    let mut diag = pair_diagnostics(&pair);
    let dd = match distance_derivatives(&pair) {
        Ok(dd) => dd,
        Err(Error::DegenerateDistance(_)) => return Ok(brake_outcome(u_nom, q, ctx.bounds, Some(weight), diag)),
        Err(e) => return Err(e),
    };
    diag.d_dot = dd.d_dot;
    diag.d_ddot = dd.d_ddot;
    diag.phi = params.phi(dd.surface, dd.d_dot, dd.d_ddot);
    let agent_next = pair.agent_point.propagate(ctx.tau);
    let constraint = match build_constraint(params, ctx.chain, &pair, &agent_next, q, ctx.tau, form) {
        Ok(c) if c.valid => c,
        Ok(_) | Err(Error::DegenerateDistance(_)) => return Ok(brake_outcome(u_nom, q, ctx.bounds, Some(weight), diag)),
        Err(e) => return Err(e),
    };
    let mut out = project_safe(u_nom, &constraint, ctx.bounds, weight)?;
    out.diagnostics = Diagnostics {
        s: out.diagnostics.s,
        lu_nominal: out.diagnostics.lu_nominal,
        lu_safe: out.diagnostics.lu_safe,
        ..diag
    };
    Ok(out)
}

/// Parameters of the acceleration-level baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsaParams {
    pub d_min: f64,
    pub lambda1: f64,
}

impl Default for SsaParams {
    fn default() -> Self {
        Self { d_min: 0.05, lambda1: 3.0 }
    }
}

impl SsaParams {
    pub fn check(&self) -> Result<()> {
        if !(self.lambda1 > 0.0) || !(self.d_min >= 0.0) || !self.lambda1.is_finite() || !self.d_min.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "baseline needs lambda1 > 0 and d_min >= 0, got lambda1 = {}, d_min = {}",
                self.lambda1, self.d_min
            )));
        }
        Ok(())
    }

    pub fn phi(&self, d: f64, d_dot: f64) -> f64 {
        self.d_min * self.d_min - d * d - self.lambda1 * d_dot
    }
}

/// `φ·d_core` for the baseline index at relative position/velocity `(p, v)`.
fn ssa_phi_times_distance(params: &SsaParams, p: &Vector3<f64>, v: &Vector3<f64>, radius_sum: f64) -> f64 {
    let c = p.norm();
    let surface = c - radius_sum;
    c * (params.d_min * params.d_min - surface * surface) - params.lambda1 * p.dot(v)
}

/// Linearization of the baseline index in joint acceleration: `L θ̈ ≥ S`.
pub fn build_ssa_constraint(
    params: &SsaParams,
    pair: &CriticalPair,
    agent_next: &crate::geometry::PointState,
    q: &JointState,
    tau: f64,
) -> Result<LinearizedConstraint> {
    let jdot_qdot = &pair.bundle.j_dot * &q.theta_dot;
    let p = pair.robot_point.p + pair.robot_point.v * tau + jdot_qdot * (0.5 * tau * tau) - agent_next.p;
    let v = pair.robot_point.v + jdot_qdot * tau - agent_next.v;
    let c = p.norm();
    if !(c > DEGENERATE_DISTANCE) {
        return Err(Error::DegenerateDistance(c));
    }
    let surface = c - pair.radius_sum;
    let dm2 = params.d_min * params.d_min;
    let dc = dm2 - surface * surface - 2.0 * c * surface;
    let g_p = p * (dc / c) - v * params.lambda1;
    let g_v = -p * params.lambda1;
    let weights = -(g_p * (0.5 * tau * tau) + g_v * tau);
    let l: RowDVector<f64> = weights.transpose() * &pair.bundle.j;
    let s = ssa_phi_times_distance(params, &p, &v, pair.radius_sum);
    let mut delta_cap = SVector::<f64, 9>::zeros();
    delta_cap.fixed_rows_mut::<3>(0).copy_from(&p);
    delta_cap.fixed_rows_mut::<3>(3).copy_from(&v);
    let valid = s.is_finite() && l.iter().all(|x| x.is_finite());
    Ok(LinearizedConstraint { l, s, delta_cap, valid })
}

/// One step of the acceleration-level baseline: project the nominal next
/// acceleration, difference it back into jerk and saturate.
pub fn ssa_step(u_nom: &JerkCommand, q: &JointState, ctx: &SafeguardContext<'_>, params: &SsaParams) -> Result<SafeControlOutcome> {
    params.check()?;
    check_command(u_nom, ctx.bounds)?;
    ensure_dim("joint state", ctx.chain.dof(), q.dof())?;
    q.validate()?;
    if !(ctx.tau > 0.0) {
        return Err(Error::InvalidParameter("time step must be positive".into()));
    }
    let robot = robot_capsules(ctx.chain, &q.theta)?;
    let agents = ctx.environment.capsules();
    let pair = critical_pair(ctx.chain, q, &robot, &agents)?;
    let mut diag = pair_diagnostics(&pair);
    let dd = match distance_derivatives(&pair) {
        Ok(dd) => dd,
        Err(Error::DegenerateDistance(_)) => return Ok(brake_outcome(u_nom, q, ctx.bounds, None, diag)),
        Err(e) => return Err(e),
    };
    diag.d_dot = dd.d_dot;
    diag.d_ddot = dd.d_ddot;
    diag.phi = params.phi(dd.surface, dd.d_dot);
    let agent_next = pair.agent_point.propagate(ctx.tau);
    let constraint = match build_ssa_constraint(params, &pair, &agent_next, q, ctx.tau) {
        Ok(c) if c.valid => c,
        Ok(_) | Err(Error::DegenerateDistance(_)) => return Ok(brake_outcome(u_nom, q, ctx.bounds, None, diag)),
        Err(e) => return Err(e),
    };
    let acc_nom = &q.theta_ddot + &u_nom.0 * ctx.tau;
    let margin = (&constraint.l * &acc_nom)[0] - constraint.s;
    diag.s = constraint.s;
    diag.lu_nominal = (&constraint.l * &acc_nom)[0];
    if margin >= 0.0 {
        diag.lu_safe = diag.lu_nominal;
        let u = ctx.bounds.clip(u_nom);
        let clipped = differs(&u.0, &u_nom.0);
        diag.pre_clip_violations = ctx.bounds.count_violations(u_nom);
        return Ok(SafeControlOutcome {
            active: clipped,
            objective_value: (&u.0 - &u_nom.0).norm_squared(),
            u_safe: if clipped { u } else { u_nom.clone() },
            constraint: Some(constraint),
            fallback_used: if clipped { Fallback::Clip } else { Fallback::None },
            diagnostics: diag,
        });
    }
    let norm2 = constraint.l.norm_squared();
    if !(norm2 > 0.0) {
        return Ok(brake_outcome(u_nom, q, ctx.bounds, None, diag));
    }
    let acc_safe = &acc_nom + constraint.l.transpose() * (-margin / norm2);
    let raw = JerkCommand((&acc_safe - &q.theta_ddot) / ctx.tau);
    diag.pre_clip_violations = ctx.bounds.count_violations(&raw);
    let u = ctx.bounds.clip(&raw);
    let fallback_used = if diag.pre_clip_violations > 0 { Fallback::Clip } else { Fallback::None };
    let acc_applied = &q.theta_ddot + &u.0 * ctx.tau;
    diag.lu_safe = (&constraint.l * &acc_applied)[0];
    Ok(SafeControlOutcome {
        active: differs(&u.0, &u_nom.0),
        objective_value: (&u.0 - &u_nom.0).norm_squared(),
        u_safe: u,
        constraint: Some(constraint),
        fallback_used,
        diagnostics: diag,
    })
}
