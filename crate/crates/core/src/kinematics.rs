//! Serial-arm kinematics under jerk control.
//!
//! The robot is a chain of revolute joints whose state is the stacked
//! `(theta, theta_dot, theta_ddot)` triple. Joint jerk is the control input,
//! so [`step_joint_state`] is an exact constant-jerk (triple integrator) update.
//! Point Jacobians are translational only; their first and second time
//! derivatives are taken along the motion implied by the current state.

use nalgebra::{DVector, Isometry3, Matrix3xX, Point3, Translation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, ensure_finite, Error, Result};

/// Per-joint jerk limits of the reference 6-DOF arm, in degrees per second cubed.
pub const DEFAULT_JERK_LIMITS_DEG: [f64; 6] = [3798.0, 3408.0, 3505.0, 7011.0, 7011.0, 10712.0];

/// Step used for the directional finite differences of the Jacobian (rad).
pub const JACOBIAN_FD_STEP: f64 = 1e-5;

/// Joint positions, velocities and accelerations.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub theta: DVector<f64>,
    pub theta_dot: DVector<f64>,
    pub theta_ddot: DVector<f64>,
}

impl JointState {
    pub fn new(theta: DVector<f64>, theta_dot: DVector<f64>, theta_ddot: DVector<f64>) -> Result<Self> {
        let state = Self {
            theta,
            theta_dot,
            theta_ddot,
        };
        state.validate()?;
        Ok(state)
    }

    /// State with the given joint angles and zero velocity and acceleration.
    pub fn at_rest(theta: DVector<f64>) -> Self {
        let n = theta.len();
        Self {
            theta,
            theta_dot: DVector::zeros(n),
            theta_ddot: DVector::zeros(n),
        }
    }

    pub fn dof(&self) -> usize {
        self.theta.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.theta.len();
        if n == 0 {
            return Err(Error::InvalidParameter("joint state must have at least one joint".into()));
        }
        ensure_dim("joint velocity", n, self.theta_dot.len())?;
        ensure_dim("joint acceleration", n, self.theta_ddot.len())?;
        ensure_finite(
            "joint state",
            self.theta.iter().chain(self.theta_dot.iter()).chain(self.theta_ddot.iter()),
        )
    }

    pub fn is_at_rest(&self, tol: f64) -> bool {
        self.theta_dot.amax() <= tol && self.theta_ddot.amax() <= tol
    }
}

/// Joint jerk command (rad/s^3).
#[derive(Debug, Clone, PartialEq)]
pub struct JerkCommand(pub DVector<f64>);

impl JerkCommand {
    pub fn zeros(n: usize) -> Self {
        Self(DVector::zeros(n))
    }

    pub fn from_slice(values: &[f64]) -> Self {
        Self(DVector::from_column_slice(values))
    }

    pub fn dof(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

/// Box bounds on joint jerk with `min <= 0 <= max` per joint.
#[derive(Debug, Clone, PartialEq)]
pub struct JerkBounds {
    pub min: DVector<f64>,
    pub max: DVector<f64>,
}

impl JerkBounds {
    pub fn new(min: DVector<f64>, max: DVector<f64>) -> Result<Self> {
        ensure_dim("jerk bounds", min.len(), max.len())?;
        ensure_finite("jerk bounds", min.iter().chain(max.iter()))?;
        if min.iter().any(|&v| v > 0.0) || max.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidParameter("jerk bounds must satisfy min <= 0 <= max".into()));
        }
        Ok(Self { min, max })
    }

    pub fn symmetric(limits: &[f64]) -> Result<Self> {
        let max = DVector::from_iterator(limits.len(), limits.iter().map(|v| v.abs()));
        Self::new(-max.clone(), max)
    }

    /// Symmetric bounds from limits given in degrees per second cubed.
    pub fn symmetric_degrees(limits_deg: &[f64]) -> Result<Self> {
        let rad: Vec<f64> = limits_deg.iter().map(|v| v.to_radians()).collect();
        Self::symmetric(&rad)
    }

    pub fn default_six_dof() -> Self {
        Self::symmetric_degrees(&DEFAULT_JERK_LIMITS_DEG).expect("static limits are valid")
    }

    pub fn dof(&self) -> usize {
        self.min.len()
    }

    /// Exact componentwise membership test.
    pub fn contains(&self, u: &JerkCommand) -> bool {
        u.dof() == self.dof()
            && u.0
                .iter()
                .zip(self.min.iter().zip(self.max.iter()))
                .all(|(&v, (&lo, &hi))| v >= lo && v <= hi)
    }

    pub fn clip(&self, u: &JerkCommand) -> JerkCommand {
        JerkCommand(DVector::from_iterator(
            u.dof(),
            u.0.iter()
                .zip(self.min.iter().zip(self.max.iter()))
                .map(|(&v, (&lo, &hi))| v.clamp(lo, hi)),
        ))
    }

    /// Number of components of `u` outside the box.
    pub fn count_violations(&self, u: &JerkCommand) -> usize {
        u.0.iter()
            .zip(self.min.iter().zip(self.max.iter()))
            .filter(|(&v, (&lo, &hi))| v < lo || v > hi)
            .count()
    }
}

/// Exact triple-integrator update of the joint state under constant jerk `u`
/// held for `tau` seconds.
pub fn step_joint_state(q: &JointState, u: &JerkCommand, tau: f64) -> Result<JointState> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidParameter(format!("time step must be positive, got {tau}")));
    }
    q.validate()?;
    ensure_dim("jerk command", q.dof(), u.dof())?;
    ensure_finite("jerk command", u.0.iter())?;
    let tau2 = tau * tau;
    let tau3 = tau2 * tau;
    let theta = &q.theta + &q.theta_dot * tau + &q.theta_ddot * (0.5 * tau2) + &u.0 * (tau3 / 6.0);
    let theta_dot = &q.theta_dot + &q.theta_ddot * tau + &u.0 * (0.5 * tau2);
    let theta_ddot = &q.theta_ddot + &u.0 * tau;
    Ok(JointState {
        theta,
        theta_dot,
        theta_ddot,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OriginTransform {
    pub xyz: [f64; 3],
    /// Roll, pitch, yaw (rad), applied as fixed-axis X, then Y, then Z.
    #[serde(default)]
    pub rpy: [f64; 3],
}

impl OriginTransform {
    fn isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(
            Translation3::new(self.xyz[0], self.xyz[1], self.xyz[2]),
            UnitQuaternion::from_euler_angles(self.rpy[0], self.rpy[1], self.rpy[2]),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    /// Rotation axis in the joint frame.
    pub axis: [f64; 3],
    /// Pose of the joint frame relative to the parent link frame.
    pub origin_transform: OriginTransform,
    /// Position limits (rad); used for sampling, not enforced by the controller.
    #[serde(default)]
    pub limits: Option<[f64; 2]>,
}

/// A capsule rigidly attached to a link. Link 0 is the fixed base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapsuleAttachment {
    pub link: usize,
    pub p0: [f64; 3],
    pub p1: [f64; 3],
    pub radius: f64,
}

/// JSON form of a [`KinematicChain`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub joints: Vec<JointSpec>,
    pub capsules: Vec<CapsuleAttachment>,
}

#[derive(Debug, Clone)]
struct Joint {
    origin: Isometry3<f64>,
    axis: Unit<Vector3<f64>>,
    limits: (f64, f64),
}

/// World origin and world axis of a joint.
type JointAxis = (Point3<f64>, Vector3<f64>);

/// Revolute serial chain with capsule geometry.
#[derive(Debug, Clone)]
pub struct KinematicChain {
    joints: Vec<Joint>,
    capsules: Vec<CapsuleAttachment>,
    config: ChainConfig,
}

impl KinematicChain {
    pub fn from_config(config: ChainConfig) -> Result<Self> {
        if config.joints.is_empty() {
            return Err(Error::Config("chain needs at least one joint".into()));
        }
        let mut joints = Vec::with_capacity(config.joints.len());
        for (i, spec) in config.joints.iter().enumerate() {
            let axis = Vector3::from(spec.axis);
            if !(axis.norm() > 1e-12) || !axis.iter().all(|v| v.is_finite()) {
                return Err(Error::Config(format!("joint {} has a degenerate axis", i + 1)));
            }
            let limits = match spec.limits {
                Some([lo, hi]) if lo <= hi => (lo, hi),
                Some(_) => return Err(Error::Config(format!("joint {} has inverted limits", i + 1))),
                None => (-std::f64::consts::PI, std::f64::consts::PI),
            };
            joints.push(Joint {
                origin: spec.origin_transform.isometry(),
                axis: Unit::new_normalize(axis),
                limits,
            });
        }
        for (i, c) in config.capsules.iter().enumerate() {
            if !(c.radius > 0.0) {
                return Err(Error::Config(format!("capsule {i} must have a positive radius")));
            }
            if c.link > joints.len() {
                return Err(Error::Config(format!(
                    "capsule {i} references link {} but the chain has {} links",
                    c.link,
                    joints.len()
                )));
            }
        }
        Ok(Self {
            joints,
            capsules: config.capsules.clone(),
            config,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: ChainConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("chain config: {e}")))?;
        Self::from_config(config)
    }

    pub fn config(&self) -> &ChainConfig {
        &self.config
    }

    /// Approximate geometry of a compact 6-DOF industrial arm (~0.9 m reach).
    ///
    /// Link lengths are approximate; nothing downstream depends on them
    /// numerically. At zero angles the upper arm is vertical and the forearm
    /// points along +X.
    pub fn default_six_dof() -> Self {
        let deg = |a: f64, b: f64| Some([a.to_radians(), b.to_radians()]);
        let joint = |xyz: [f64; 3], axis: [f64; 3], limits| JointSpec {
            axis,
            origin_transform: OriginTransform { xyz, rpy: [0.0; 3] },
            limits,
        };
        let capsule = |link, p0, p1, radius| CapsuleAttachment { link, p0, p1, radius };
        let config = ChainConfig {
            joints: vec![
                joint([0.0, 0.0, 0.0], [0.0, 0.0, 1.0], deg(-170.0, 170.0)),
                joint([0.05, 0.0, 0.33], [0.0, 1.0, 0.0], deg(-100.0, 145.0)),
                joint([0.0, 0.0, 0.44], [0.0, 1.0, 0.0], deg(-70.0, 200.0)),
                joint([0.0, 0.0, 0.035], [1.0, 0.0, 0.0], deg(-190.0, 190.0)),
                joint([0.42, 0.0, 0.0], [0.0, 1.0, 0.0], deg(-125.0, 125.0)),
                joint([0.08, 0.0, 0.0], [1.0, 0.0, 0.0], deg(-360.0, 360.0)),
            ],
            capsules: vec![
                capsule(1, [0.0, 0.0, 0.05], [0.05, 0.0, 0.33], 0.08),
                capsule(2, [0.0, 0.0, 0.0], [0.0, 0.0, 0.44], 0.07),
                capsule(3, [0.0, 0.0, 0.035], [0.42, 0.0, 0.035], 0.06),
                capsule(5, [0.0, 0.0, 0.0], [0.08, 0.0, 0.0], 0.05),
                capsule(6, [0.0, 0.0, 0.0], [0.10, 0.0, 0.0], 0.04),
            ],
        };
        Self::from_config(config).expect("default chain is valid")
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn capsules(&self) -> &[CapsuleAttachment] {
        &self.capsules
    }

    pub fn joint_limits(&self) -> Vec<(f64, f64)> {
        self.joints.iter().map(|j| j.limits).collect()
    }

    fn check_theta(&self, theta: &DVector<f64>) -> Result<()> {
        ensure_dim("joint angles", self.dof(), theta.len())?;
        ensure_finite("joint angles", theta.iter())
    }

    fn check_link(&self, link: usize) -> Result<()> {
        if link > self.dof() {
            Err(Error::InvalidLink {
                index: link,
                links: self.dof() + 1,
            })
        } else {
            Ok(())
        }
    }

    /// World poses of all link frames; index 0 is the base, index `i` the
    /// link driven by joint `i`.
    pub fn forward_kinematics(&self, theta: &DVector<f64>) -> Result<Vec<Isometry3<f64>>> {
        self.check_theta(theta)?;
        Ok(self.frames(theta).0)
    }

    /// Link frames plus, per joint, the world origin and world axis.
    fn frames(&self, theta: &DVector<f64>) -> (Vec<Isometry3<f64>>, Vec<JointAxis>) {
        let mut frames = Vec::with_capacity(self.dof() + 1);
        let mut axes = Vec::with_capacity(self.dof());
        let mut current = Isometry3::identity();
        frames.push(current);
        for (joint, &angle) in self.joints.iter().zip(theta.iter()) {
            let joint_frame = current * joint.origin;
            let origin = Point3::from(joint_frame.translation.vector);
            let axis = joint_frame.rotation * joint.axis.into_inner();
            axes.push((origin, axis));
            current = joint_frame * UnitQuaternion::from_axis_angle(&joint.axis, angle);
            frames.push(current);
        }
        (frames, axes)
    }

    /// World position of a point fixed in a link frame.
    pub fn point_position(&self, theta: &DVector<f64>, link: usize, local: &Vector3<f64>) -> Result<Vector3<f64>> {
        self.check_theta(theta)?;
        self.check_link(link)?;
        let frames = self.frames(theta).0;
        Ok((frames[link] * Point3::from(*local)).coords)
    }

    /// Translational Jacobian of a link-fixed point.
    pub fn jacobian(&self, theta: &DVector<f64>, link: usize, local: &Vector3<f64>) -> Result<Matrix3xX<f64>> {
        self.check_theta(theta)?;
        self.check_link(link)?;
        Ok(self.jacobian_unchecked(theta, link, local))
    }

    fn jacobian_unchecked(&self, theta: &DVector<f64>, link: usize, local: &Vector3<f64>) -> Matrix3xX<f64> {
        let (frames, axes) = self.frames(theta);
        let point = frames[link] * Point3::from(*local);
        let mut jac = Matrix3xX::zeros(self.dof());
        for (i, (origin, axis)) in axes.iter().enumerate().take(link) {
            jac.set_column(i, &axis.cross(&(point - origin)));
        }
        jac
    }

    /// Jacobian of a link-fixed point together with its first and second
    /// time derivatives along the motion implied by `q`.
    pub fn point_jacobian_bundle(
        &self,
        q: &JointState,
        link: usize,
        local: &Vector3<f64>,
    ) -> Result<PointJacobianBundle> {
        q.validate()?;
        self.check_theta(&q.theta)?;
        self.check_link(link)?;
        let h = JACOBIAN_FD_STEP;
        let jac = |theta: &DVector<f64>| self.jacobian_unchecked(theta, link, local);
        let j0 = jac(&q.theta);
        let point = self.point_position(&q.theta, link, local)?;

        let speed = q.theta_dot.norm();
        let (j_dot, curvature) = if speed > 0.0 {
            let dir = &q.theta_dot / speed;
            let jp = jac(&(&q.theta + &dir * h));
            let jm = jac(&(&q.theta - &dir * h));
            let first = (&jp - &jm) * (speed / (2.0 * h));
            let second = (&jp - &j0 * 2.0 + &jm) * (speed * speed / (h * h));
            (first, second)
        } else {
            (Matrix3xX::zeros(self.dof()), Matrix3xX::zeros(self.dof()))
        };

        let accel = q.theta_ddot.norm();
        let drift = if accel > 0.0 {
            let dir = &q.theta_ddot / accel;
            let jp = jac(&(&q.theta + &dir * h));
            let jm = jac(&(&q.theta - &dir * h));
            (jp - jm) * (accel / (2.0 * h))
        } else {
            Matrix3xX::zeros(self.dof())
        };

        Ok(PointJacobianBundle {
            j: j0,
            j_dot,
            j_ddot: curvature + drift,
            point,
        })
    }
}

/// `J`, `dJ/dt` and `d²J/dt²` of one link-fixed point at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct PointJacobianBundle {
    pub j: Matrix3xX<f64>,
    pub j_dot: Matrix3xX<f64>,
    pub j_ddot: Matrix3xX<f64>,
    pub point: Vector3<f64>,
}

impl PointJacobianBundle {
    pub fn velocity(&self, q: &JointState) -> Vector3<f64> {
        &self.j * &q.theta_dot
    }

    pub fn acceleration(&self, q: &JointState) -> Vector3<f64> {
        &self.j * &q.theta_ddot + &self.j_dot * &q.theta_dot
    }

    /// Cartesian jerk at zero joint jerk: `J̈ θ̇ + 2 J̇ θ̈`.
    pub fn drift_jerk(&self, q: &JointState) -> Vector3<f64> {
        &self.j_ddot * &q.theta_dot + &self.j_dot * &q.theta_ddot * 2.0
    }
}

/// Cartesian jerk of the bundle's point: `J̈ θ̇ + 2 J̇ θ̈ + J u`.
pub fn cartesian_jerk_of_point(bundle: &PointJacobianBundle, q: &JointState, u: &JerkCommand) -> Result<Vector3<f64>> {
    ensure_dim("joint state", bundle.j.ncols(), q.dof())?;
    ensure_dim("jerk command", bundle.j.ncols(), u.dof())?;
    Ok(bundle.drift_jerk(q) + &bundle.j * &u.0)
}
