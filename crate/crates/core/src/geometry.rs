//! Capsule geometry, minimum distance and the critical point pair.

use nalgebra::{SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{JointState, KinematicChain, PointJacobianBundle};

/// Core distances at or below this are treated as contact with an undefined direction.
pub const DEGENERATE_DISTANCE: f64 = 1e-9;

/// Segment swept by a sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    pub p0: Vector3<f64>,
    pub p1: Vector3<f64>,
    pub radius: f64,
}

impl Capsule {
    pub fn new(p0: Vector3<f64>, p1: Vector3<f64>, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::InvalidParameter(format!("capsule radius must be positive, got {radius}")));
        }
        if !p0.iter().chain(p1.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("capsule endpoints"));
        }
        Ok(Self { p0, p1, radius })
    }

    pub fn sphere(center: Vector3<f64>, radius: f64) -> Result<Self> {
        Self::new(center, center, radius)
    }

    pub fn point_at(&self, s: f64) -> Vector3<f64> {
        self.p0 + (self.p1 - self.p0) * s
    }
}

/// Position, velocity and acceleration of a point.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PointState {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub a: Vector3<f64>,
}

impl PointState {
    pub fn at(p: Vector3<f64>) -> Self {
        Self {
            p,
            ..Default::default()
        }
    }

    pub fn to_vector(&self) -> SVector<f64, 9> {
        let mut out = SVector::<f64, 9>::zeros();
        out.fixed_rows_mut::<3>(0).copy_from(&self.p);
        out.fixed_rows_mut::<3>(3).copy_from(&self.v);
        out.fixed_rows_mut::<3>(6).copy_from(&self.a);
        out
    }

    /// Constant-acceleration propagation over `tau` (zero jerk).
    pub fn propagate(&self, tau: f64) -> Self {
        Self {
            p: self.p + self.v * tau + self.a * (0.5 * tau * tau),
            v: self.v + self.a * tau,
            a: self.a,
        }
    }

    pub fn lerp(a: &PointState, b: &PointState, t: f64) -> Self {
        Self {
            p: a.p + (b.p - a.p) * t,
            v: a.v + (b.v - a.v) * t,
            a: a.a + (b.a - a.a) * t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapsuleDistance {
    /// Surface distance; negative on penetration.
    pub distance: f64,
    /// Distance between the segment witnesses.
    pub core_distance: f64,
    pub witness_a: Vector3<f64>,
    pub witness_b: Vector3<f64>,
    pub s: f64,
    pub t: f64,
}

/// Closest points between segments `[p0, p1]` and `[q0, q1]` as parameters `(s, t)`.
///
/// For parallel segments the witness set is not unique; the pair with the
/// smallest `s`, then smallest `t`, is returned.
pub fn closest_segment_params(p0: &Vector3<f64>, p1: &Vector3<f64>, q0: &Vector3<f64>, q1: &Vector3<f64>) -> (f64, f64) {
    const EPS: f64 = 1e-14;
    let d1 = p1 - p0;
    let d2 = q1 - q0;
    let r = p0 - q0;
    let a = d1.norm_squared();
    let e = d2.norm_squared();
    let f = d2.dot(&r);
    if a <= EPS && e <= EPS {
        return (0.0, 0.0);
    }
    if a <= EPS {
        return (0.0, (f / e).clamp(0.0, 1.0));
    }
    let c = d1.dot(&r);
    if e <= EPS {
        return ((-c / a).clamp(0.0, 1.0), 0.0);
    }
    let b = d1.dot(&d2);
    let denom = a * e - b * b;
    if denom <= 1e-12 * a * e {
        return parallel_params(p0, p1, q0, q1);
    }
    let mut s = ((b * f - c * e) / denom).clamp(0.0, 1.0);
    let mut t = (b * s + f) / e;
    if t < 0.0 {
        t = 0.0;
        s = (-c / a).clamp(0.0, 1.0);
    } else if t > 1.0 {
        t = 1.0;
        s = ((b - c) / a).clamp(0.0, 1.0);
    }
    (s, t)
}

fn project_param(x: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let d = b - a;
    ((x - a).dot(&d) / d.norm_squared()).clamp(0.0, 1.0)
}

fn parallel_params(p0: &Vector3<f64>, p1: &Vector3<f64>, q0: &Vector3<f64>, q1: &Vector3<f64>) -> (f64, f64) {
    // For parallel segments an optimum always lies on an endpoint of one of them.
    let candidates = [
        (0.0, project_param(p0, q0, q1)),
        (1.0, project_param(p1, q0, q1)),
        (project_param(q0, p0, p1), 0.0),
        (project_param(q1, p0, p1), 1.0),
    ];
    let dist = |(s, t): (f64, f64)| ((p0 + (p1 - p0) * s) - (q0 + (q1 - q0) * t)).norm();
    let best = candidates.iter().map(|&c| dist(c)).fold(f64::INFINITY, f64::min);
    let tol = 1e-12 * (1.0 + best);
    candidates
        .iter()
        .copied()
        .filter(|&c| dist(c) <= best + tol)
        .min_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)))
        .expect("four candidates")
}

/// Surface distance between two capsules with the segment witnesses.
pub fn capsule_distance(a: &Capsule, b: &Capsule) -> CapsuleDistance {
    let (s, t) = closest_segment_params(&a.p0, &a.p1, &b.p0, &b.p1);
    let witness_a = a.point_at(s);
    let witness_b = b.point_at(t);
    let core_distance = (witness_a - witness_b).norm();
    CapsuleDistance {
        distance: core_distance - a.radius - b.radius,
        core_distance,
        witness_a,
        witness_b,
        s,
        t,
    }
}

/// A robot capsule placed in the world at the current configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotCapsule {
    /// Position in the chain's capsule list.
    pub index: usize,
    pub link: usize,
    pub local_p0: Vector3<f64>,
    pub local_p1: Vector3<f64>,
    pub world: Capsule,
}

/// Places every capsule of the chain at joint angles `theta`.
pub fn robot_capsules(chain: &KinematicChain, theta: &nalgebra::DVector<f64>) -> Result<Vec<RobotCapsule>> {
    let frames = chain.forward_kinematics(theta)?;
    chain
        .capsules()
        .iter()
        .enumerate()
        .map(|(index, c)| {
            let local_p0 = Vector3::from(c.p0);
            let local_p1 = Vector3::from(c.p1);
            let frame = &frames[c.link];
            Ok(RobotCapsule {
                index,
                link: c.link,
                local_p0,
                local_p1,
                world: Capsule::new(
                    frame.transform_point(&local_p0.into()).coords,
                    frame.transform_point(&local_p1.into()).coords,
                    c.radius,
                )?,
            })
        })
        .collect()
}

/// An agent capsule with the kinematic state of its two endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentCapsule {
    pub agent: usize,
    /// Capsule index within the agent.
    pub link: usize,
    pub start: PointState,
    pub end: PointState,
    pub radius: f64,
}

impl AgentCapsule {
    pub fn capsule(&self) -> Capsule {
        Capsule {
            p0: self.start.p,
            p1: self.end.p,
            radius: self.radius,
        }
    }

    pub fn state_at(&self, t: f64) -> PointState {
        PointState::lerp(&self.start, &self.end, t)
    }
}

/// Closest robot/agent point pair with its kinematics.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticalPair {
    /// Core (segment) point on the robot.
    pub robot_point: PointState,
    /// Core (segment) point on the agent.
    pub agent_point: PointState,
    /// Surface distance.
    pub distance: f64,
    pub core_distance: f64,
    pub radius_sum: f64,
    pub robot_capsule: usize,
    pub robot_link: usize,
    pub agent: usize,
    pub agent_link: usize,
    pub robot_local_point: Vector3<f64>,
    /// Segment parameter of the agent witness.
    pub agent_param: f64,
    pub bundle: PointJacobianBundle,
}

impl CriticalPair {
    /// Relative state `δ = M − H` of the core points.
    pub fn relative_state(&self) -> SVector<f64, 9> {
        self.robot_point.to_vector() - self.agent_point.to_vector()
    }
}

/// Globally closest pair over all robot × agent capsules.
///
/// Ties keep the lowest `(robot capsule, agent capsule)` pair in iteration
/// order. The robot witness is treated as fixed on its link for the step.
pub fn critical_pair(
    chain: &KinematicChain,
    q: &JointState,
    robot: &[RobotCapsule],
    agents: &[AgentCapsule],
) -> Result<CriticalPair> {
    if robot.is_empty() {
        return Err(Error::EmptyCapsuleSet("robot"));
    }
    if agents.is_empty() {
        return Err(Error::EmptyCapsuleSet("agents"));
    }
    let mut best: Option<(usize, usize, CapsuleDistance)> = None;
    for (ri, rc) in robot.iter().enumerate() {
        for (ai, ac) in agents.iter().enumerate() {
            let cd = capsule_distance(&rc.world, &ac.capsule());
            if best.as_ref().is_none_or(|(_, _, b)| cd.distance < b.distance) {
                best = Some((ri, ai, cd));
            }
        }
    }
    let (ri, ai, cd) = best.expect("non-empty capsule sets");
    let rc = &robot[ri];
    let ac = &agents[ai];
    let robot_local_point = rc.local_p0 + (rc.local_p1 - rc.local_p0) * cd.s;
    let bundle = chain.point_jacobian_bundle(q, rc.link, &robot_local_point)?;
    let robot_point = PointState {
        p: cd.witness_a,
        v: bundle.velocity(q),
        a: bundle.acceleration(q),
    };
    let mut agent_point = ac.state_at(cd.t);
    agent_point.p = cd.witness_b;
    Ok(CriticalPair {
        robot_point,
        agent_point,
        distance: cd.distance,
        core_distance: cd.core_distance,
        radius_sum: rc.world.radius + ac.radius,
        robot_capsule: rc.index,
        robot_link: rc.link,
        agent: ac.agent,
        agent_link: ac.link,
        robot_local_point,
        agent_param: cd.t,
        bundle,
    })
}

/// The quadratic forms of the relative state picked out by the selector
/// matrices: `‖δp‖²`, `δp·δv`, `‖δv‖²`, `δp·δa`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectorForms {
    pub pp: f64,
    pub pv: f64,
    pub vv: f64,
    pub pa: f64,
}

impl SelectorForms {
    pub fn of(delta: &SVector<f64, 9>) -> Self {
        let p = delta.fixed_rows::<3>(0);
        let v = delta.fixed_rows::<3>(3);
        let a = delta.fixed_rows::<3>(6);
        Self {
            pp: p.dot(&p),
            pv: p.dot(&v),
            vv: v.dot(&v),
            pa: p.dot(&a),
        }
    }
}

/// Selector matrix `U_k` (k = 1..4) as a dense 9×9 matrix.
pub fn selector_matrix(k: usize) -> SMatrix<f64, 9, 9> {
    let (row, col) = match k {
        1 => (0, 0),
        2 => (0, 3),
        3 => (3, 3),
        4 => (0, 6),
        _ => panic!("selector index must be 1..=4"),
    };
    let mut u = SMatrix::<f64, 9, 9>::zeros();
    for i in 0..3 {
        u[(row + i, col + i)] = 1.0;
    }
    u
}

/// Distance and its first two time derivatives for the critical pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceDerivatives {
    pub core: f64,
    pub surface: f64,
    pub d_dot: f64,
    pub d_ddot: f64,
}

/// `ḋ` and `d̈` from the relative core-point state; radii are constant so the
/// derivatives of the surface distance are the same.
pub fn distance_derivatives_of(delta: &SVector<f64, 9>, radius_sum: f64) -> Result<DistanceDerivatives> {
    let forms = SelectorForms::of(delta);
    let d = forms.pp.sqrt();
    if !(d > DEGENERATE_DISTANCE) {
        return Err(Error::DegenerateDistance(d));
    }
    let d_dot = forms.pv / d;
    let d_ddot = -d_dot * d_dot / d + forms.vv / d + forms.pa / d;
    Ok(DistanceDerivatives {
        core: d,
        surface: d - radius_sum,
        d_dot,
        d_ddot,
    })
}

pub fn distance_derivatives(pair: &CriticalPair) -> Result<DistanceDerivatives> {
    distance_derivatives_of(&pair.relative_state(), pair.radius_sum)
}
