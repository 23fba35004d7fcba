//! Safety index `φ = d_min² − d² − λ₁ḋ − λ₂d̈`, its parameter checks, and the
//! one-step linearized constraint `L u ≥ S` on joint jerk.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DVector, RowDVector, SVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CriticalPair, PointState, SelectorForms, DEGENERATE_DISTANCE};
use crate::kinematics::{step_joint_state, JerkBounds, JerkCommand, JointState, KinematicChain, PointJacobianBundle};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationFlags {
    pub roots_negative_real: bool,
    pub minimax_passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyIndexParams {
    /// Safety margin (m).
    pub d_min: f64,
    /// Weight on `ḋ` (s).
    pub lambda1: f64,
    /// Weight on `d̈` (s²).
    pub lambda2: f64,
    #[serde(default)]
    pub validated: ValidationFlags,
}

impl Default for SafetyIndexParams {
    fn default() -> Self {
        Self::new(0.05, 3.0, 1.0)
    }
}

impl SafetyIndexParams {
    pub fn new(d_min: f64, lambda1: f64, lambda2: f64) -> Self {
        let mut p = Self {
            d_min,
            lambda1,
            lambda2,
            validated: ValidationFlags::default(),
        };
        p.validated.roots_negative_real = p.roots_negative_real();
        p
    }

    pub fn check(&self) -> Result<()> {
        if !(self.d_min > 0.0) || !self.d_min.is_finite() {
            return Err(Error::InvalidParameter(format!("d_min must be positive, got {}", self.d_min)));
        }
        if !self.lambda1.is_finite() || !self.lambda2.is_finite() {
            return Err(Error::NonFinite("safety index weights"));
        }
        Ok(())
    }

    /// Whether all roots of `1 + λ₁s + λ₂s² = 0` are negative real.
    pub fn roots_negative_real(&self) -> bool {
        validate_roots(self.lambda1, self.lambda2)
    }

    pub fn phi(&self, d: f64, d_dot: f64, d_ddot: f64) -> f64 {
        phi(self, d, d_dot, d_ddot)
    }
}

pub fn phi(params: &SafetyIndexParams, d: f64, d_dot: f64, d_ddot: f64) -> f64 {
    params.d_min * params.d_min - d * d - params.lambda1 * d_dot - params.lambda2 * d_ddot
}

/// `λ₂ = 0` degenerates to the single root `−1/λ₁`.
pub fn validate_roots(lambda1: f64, lambda2: f64) -> bool {
    if lambda2 == 0.0 {
        lambda1 > 0.0
    } else {
        lambda1 > 0.0 && lambda2 > 0.0 && lambda1 * lambda1 >= 4.0 * lambda2
    }
}

/// Discrete-time point propagation matrices applied blockwise.
pub(crate) fn apply_b(jerk: &Vector3<f64>, tau: f64) -> SVector<f64, 9> {
    let mut out = SVector::<f64, 9>::zeros();
    out.fixed_rows_mut::<3>(0).copy_from(&(jerk * (tau * tau * tau / 6.0)));
    out.fixed_rows_mut::<3>(3).copy_from(&(jerk * (0.5 * tau * tau)));
    out.fixed_rows_mut::<3>(6).copy_from(&(jerk * tau));
    out
}

/// `φ · d_core` evaluated at a relative core-point state, with the surface
/// distance `d_core − radius_sum` inside `φ`.
pub fn phi_times_distance(params: &SafetyIndexParams, delta: &SVector<f64, 9>, radius_sum: f64) -> f64 {
    let f = SelectorForms::of(delta);
    let c = f.pp.sqrt();
    let surface = c - radius_sum;
    let dm2 = params.d_min * params.d_min;
    c * (dm2 - surface * surface) - params.lambda1 * f.pv - params.lambda2 * (-f.pv * f.pv / f.pp + f.vv + f.pa)
}

/// Gradient of [`phi_times_distance`] with respect to `δ`.
fn phi_times_distance_gradient(params: &SafetyIndexParams, delta: &SVector<f64, 9>, radius_sum: f64) -> SVector<f64, 9> {
    let p: Vector3<f64> = delta.fixed_rows::<3>(0).into();
    let v: Vector3<f64> = delta.fixed_rows::<3>(3).into();
    let a: Vector3<f64> = delta.fixed_rows::<3>(6).into();
    let f = SelectorForms::of(delta);
    let c = f.pp.sqrt();
    let surface = c - radius_sum;
    let dm2 = params.d_min * params.d_min;
    let (l1, l2) = (params.lambda1, params.lambda2);
    let dc = dm2 - surface * surface - 2.0 * c * surface;
    let w = f.pv;
    let grad_p = p * (dc / c) - v * l1 + (v * (2.0 * w / f.pp) - p * (2.0 * w * w / (f.pp * f.pp))) * l2 - a * l2;
    let grad_v = -p * l1 + p * (2.0 * l2 * w / f.pp) - v * (2.0 * l2);
    let grad_a = -p * l2;
    let mut g = SVector::<f64, 9>::zeros();
    g.fixed_rows_mut::<3>(0).copy_from(&grad_p);
    g.fixed_rows_mut::<3>(3).copy_from(&grad_v);
    g.fixed_rows_mut::<3>(6).copy_from(&grad_a);
    g
}

/// Which first-order term is used for `L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintForm {
    /// First-order expansion of `φ·d` at the exact zero-jerk next state,
    /// through the discrete joint-to-point input map.
    #[default]
    Gradient,
    /// Full gradient of `φ·d` at the Cartesian prediction `Δ` along `B^C J`.
    Cartesian,
    /// `L = 2(λ₁ΔᵀU₂ + λ₂ΔᵀU₃ + λ₂ΔᵀU₄) B^C J`, treating the selector
    /// matrices as if they were symmetric.
    Printed,
}

/// `L u ≥ S` encodes the linearized requirement `φ(x_{k+1})·d_{k+1} ≤ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedConstraint {
    pub l: RowDVector<f64>,
    pub s: f64,
    /// Relative state at `k+1` under zero joint jerk.
    pub delta_cap: SVector<f64, 9>,
    pub valid: bool,
}

impl LinearizedConstraint {
    pub fn margin(&self, u: &DVector<f64>) -> f64 {
        (&self.l * u)[0] - self.s
    }

    pub fn satisfied_by(&self, u: &DVector<f64>) -> bool {
        self.margin(u) >= 0.0
    }
}

/// Relative state at `k+1` with zero joint jerk, from the Cartesian
/// third-order propagation of the robot point.
pub fn predicted_relative_state(pair: &CriticalPair, agent_next: &PointState, q: &JointState, tau: f64) -> SVector<f64, 9> {
    let robot_free = pair.robot_point.propagate(tau).to_vector() + apply_b(&pair.bundle.drift_jerk(q), tau);
    robot_free - agent_next.to_vector()
}

/// Robot witness point after one zero-jerk step, evaluated on the chain.
fn exact_free_step(chain: &KinematicChain, pair: &CriticalPair, q: &JointState, tau: f64) -> Result<(SVector<f64, 9>, PointJacobianBundle)> {
    let q1 = step_joint_state(q, &JerkCommand::zeros(q.dof()), tau)?;
    let b1 = chain.point_jacobian_bundle(&q1, pair.robot_link, &pair.robot_local_point)?;
    let m = PointState {
        p: b1.point,
        v: b1.velocity(&q1),
        a: b1.acceleration(&q1),
    };
    Ok((m.to_vector(), b1))
}

pub fn build_constraint(
    params: &SafetyIndexParams,
    chain: &KinematicChain,
    pair: &CriticalPair,
    agent_next: &PointState,
    q: &JointState,
    tau: f64,
    form: ConstraintForm,
) -> Result<LinearizedConstraint> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter("time step must be positive".into()));
    }
    let exact = match form {
        ConstraintForm::Gradient => Some(exact_free_step(chain, pair, q, tau)?),
        _ => None,
    };
    let delta_cap = match &exact {
        Some((m, _)) => m - agent_next.to_vector(),
        None => predicted_relative_state(pair, agent_next, q, tau),
    };
    let core = delta_cap.fixed_rows::<3>(0).norm();
    if !(core > DEGENERATE_DISTANCE) || pair.core_distance <= DEGENERATE_DISTANCE {
        return Err(Error::DegenerateDistance(core.min(pair.core_distance)));
    }
    let s = phi_times_distance(params, &delta_cap, pair.radius_sum);
    let l = match (form, &exact) {
        (ConstraintForm::Gradient, Some((_, b1))) => {
            // ∂θ₁/∂u = τ³/6, ∂θ̇₁/∂u = τ²/2, ∂θ̈₁/∂u = τ; the J̇ terms come
            // from v = Jθ̇ and the θ̇-quadratic part of a = Jθ̈ + J̇θ̇.
            let g = phi_times_distance_gradient(params, &delta_cap, pair.radius_sum);
            let gp: Vector3<f64> = g.fixed_rows::<3>(0).into();
            let gv: Vector3<f64> = g.fixed_rows::<3>(3).into();
            let ga: Vector3<f64> = g.fixed_rows::<3>(6).into();
            let t2 = tau * tau;
            let t3 = t2 * tau;
            let on_j = gp * (t3 / 6.0) + gv * (0.5 * t2) + ga * tau;
            let on_j_dot = gv * (t3 / 6.0) + ga * t2;
            -(on_j.transpose() * &b1.j + on_j_dot.transpose() * &b1.j_dot)
        }
        _ => {
            let weights: Vector3<f64> = match form {
                ConstraintForm::Printed => {
                    let p: Vector3<f64> = delta_cap.fixed_rows::<3>(0).into();
                    let v: Vector3<f64> = delta_cap.fixed_rows::<3>(3).into();
                    (p * (params.lambda1 * 0.5 * tau * tau) + v * (params.lambda2 * 0.5 * tau * tau) + p * (params.lambda2 * tau)) * 2.0
                }
                _ => {
                    let g = phi_times_distance_gradient(params, &delta_cap, pair.radius_sum);
                    -(g.fixed_rows::<3>(0) * (tau * tau * tau / 6.0) + g.fixed_rows::<3>(3) * (0.5 * tau * tau) + g.fixed_rows::<3>(6) * tau)
                }
            };
            weights.transpose() * &pair.bundle.j
        }
    };
    let valid = s.is_finite() && l.iter().all(|v| v.is_finite());
    Ok(LinearizedConstraint {
        l,
        s,
        delta_cap,
        valid,
    })
}

/// Sampling domain and budget for the minimax feasibility check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinimaxConfig {
    pub budget: usize,
    pub seed: u64,
    /// Largest surface distance sampled (m).
    pub d_max: f64,
    /// Bound on `|ḋ|` (m/s).
    pub rel_speed_bound: f64,
    /// Bound on `|d̈|`; samples whose `d̈` (solved from `φ = 0`) exceeds it are unreachable.
    pub rel_accel_bound: f64,
    /// Bound on each `|θ̇_i|` (rad/s).
    pub joint_speed_bound: f64,
    /// Bound on each `|θ̈_i|` (rad/s²).
    pub joint_accel_bound: f64,
    /// Joint ranges for configuration sampling; chain limits when absent.
    pub theta_ranges: Option<Vec<[f64; 2]>>,
    /// Robot capsules the critical point may lie on; all when absent.
    pub capsules: Option<Vec<usize>>,
}

impl Default for MinimaxConfig {
    fn default() -> Self {
        Self {
            budget: 100_000,
            seed: 0,
            d_max: 1.0,
            rel_speed_bound: 1.5,
            rel_accel_bound: 5.0,
            joint_speed_bound: 1.0,
            joint_accel_bound: 5.0,
            theta_ranges: None,
            capsules: None,
        }
    }
}

impl MinimaxConfig {
    /// Operating region of the default arm: critical points on the wrist and
    /// tool capsules, joints inside the task workspace, moderate joint rates.
    pub fn tool_region() -> Self {
        Self {
            joint_speed_bound: 0.5,
            joint_accel_bound: 2.0,
            theta_ranges: Some(vec![[-1.57, 1.57], [-0.5, 0.8], [-0.3, 1.2], [-1.0, 1.0], [-1.3, 1.3], [-PI, PI]]),
            capsules: Some(vec![3, 4]),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimaxSample {
    pub index: usize,
    pub d: f64,
    pub d_dot: f64,
    pub d_ddot: f64,
    pub capsule: usize,
    /// Position of the witness along the capsule axis, in `[0, 1]`.
    pub segment_param: f64,
    pub theta: Vec<f64>,
    pub theta_dot: Vec<f64>,
    pub theta_ddot: Vec<f64>,
    /// Unit direction from the agent point to the robot point.
    pub direction: [f64; 3],
    /// `min_u −2dḋ − λ₁d̈ − λ₂ d⃛(u)` at this sample.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimaxReport {
    pub roots_negative_real: bool,
    /// Root condition holds and no sampled state exceeds zero.
    pub passed: bool,
    pub sampled_passed: bool,
    pub worst_value: f64,
    pub worst: Option<MinimaxSample>,
    pub evaluated: usize,
    pub unreachable: usize,
    pub seed: u64,
}

const STRATA: usize = 16;

fn unit_vector(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Samples states with `φ = 0` and reports the largest value of
/// `min_{u∈U} −2dḋ − λ₁d̈ − λ₂d⃛(u)`; passes when that maximum is `≤ 0`.
///
/// Each sample is a pure function of `(seed, index)`, so a larger budget only
/// adds evidence. Relative motion is taken along the line between the
/// critical points and agents carry no jerk, so `d⃛ = n·(J̈θ̇ + 2J̇θ̈ + Ju)`.
pub fn verify_minimax(params: &SafetyIndexParams, bounds: &JerkBounds, chain: &KinematicChain, cfg: &MinimaxConfig) -> Result<MinimaxReport> {
    params.check()?;
    if cfg.budget == 0 {
        return Err(Error::InvalidParameter("minimax budget must be at least 1".into()));
    }
    if bounds.dof() != chain.dof() {
        return Err(Error::DimensionMismatch {
            context: "jerk bounds",
            expected: chain.dof(),
            found: bounds.dof(),
        });
    }
    if !(cfg.d_max > params.d_min) {
        return Err(Error::InvalidParameter("d_max must exceed d_min".into()));
    }
    let ranges: Vec<[f64; 2]> = match &cfg.theta_ranges {
        Some(r) if r.len() == chain.dof() => r.clone(),
        Some(r) => {
            return Err(Error::DimensionMismatch {
                context: "theta ranges",
                expected: chain.dof(),
                found: r.len(),
            })
        }
        None => chain.joint_limits().into_iter().map(|(a, b)| [a, b]).collect(),
    };
    let capsules: Vec<usize> = cfg.capsules.clone().unwrap_or_else(|| (0..chain.capsules().len()).collect());
    if capsules.is_empty() || capsules.iter().any(|&c| c >= chain.capsules().len()) {
        return Err(Error::InvalidParameter("minimax capsule selection is empty or out of range".into()));
    }

    let evaluate = |index: usize| -> Option<MinimaxSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index as u64);
        let n = chain.dof();
        let stratum_d = index % STRATA;
        let stratum_v = (index / STRATA) % STRATA;
        let d = params.d_min + (stratum_d as f64 + rng.random::<f64>()) / STRATA as f64 * (cfg.d_max - params.d_min);
        let (d_dot, d_ddot) = if params.lambda2 != 0.0 {
            let d_dot = -cfg.rel_speed_bound + (stratum_v as f64 + rng.random::<f64>()) / STRATA as f64 * 2.0 * cfg.rel_speed_bound;
            (d_dot, (params.d_min * params.d_min - d * d - params.lambda1 * d_dot) / params.lambda2)
        } else {
            let d_ddot = -cfg.rel_accel_bound + (stratum_v as f64 + rng.random::<f64>()) / STRATA as f64 * 2.0 * cfg.rel_accel_bound;
            ((params.d_min * params.d_min - d * d) / params.lambda1, d_ddot)
        };
        let theta = DVector::from_iterator(n, ranges.iter().map(|r| rng.random_range(r[0]..=r[1])));
        let theta_dot = DVector::from_iterator(n, (0..n).map(|_| rng.random_range(-1.0..=1.0) * cfg.joint_speed_bound));
        let theta_ddot = DVector::from_iterator(n, (0..n).map(|_| rng.random_range(-1.0..=1.0) * cfg.joint_accel_bound));
        let capsule = capsules[rng.random_range(0..capsules.len())];
        let s: f64 = rng.random();
        let direction = unit_vector(&mut rng);
        if d_ddot.abs() > cfg.rel_accel_bound || d_dot.abs() > cfg.rel_speed_bound {
            return None;
        }
        let att = &chain.capsules()[capsule];
        let local = Vector3::from(att.p0) + (Vector3::from(att.p1) - Vector3::from(att.p0)) * s;
        let q = JointState {
            theta,
            theta_dot,
            theta_ddot,
        };
        let bundle = chain.point_jacobian_bundle(&q, att.link, &local).ok()?;
        let drift = direction.dot(&bundle.drift_jerk(&q));
        let g = bundle.j.transpose() * direction;
        let best_control: f64 = g
            .iter()
            .zip(bounds.min.iter().zip(bounds.max.iter()))
            .map(|(&gi, (&lo, &hi))| (gi * lo).max(gi * hi))
            .sum();
        let value = -2.0 * d * d_dot - params.lambda1 * d_ddot - params.lambda2 * (drift + best_control);
        Some(MinimaxSample {
            index,
            d,
            d_dot,
            d_ddot,
            capsule,
            segment_param: s,
            theta: q.theta.iter().copied().collect(),
            theta_dot: q.theta_dot.iter().copied().collect(),
            theta_ddot: q.theta_ddot.iter().copied().collect(),
            direction: direction.into(),
            value,
        })
    };

    let (worst, evaluated) = (0..cfg.budget)
        .into_par_iter()
        .map(|i| match evaluate(i) {
            Some(s) => (Some(s), 1usize),
            None => (None, 0usize),
        })
        .reduce(
            || (None, 0),
            |(a, na), (b, nb)| {
                let pick = match (a, b) {
                    (Some(a), Some(b)) => {
                        if b.value > a.value || (b.value == a.value && b.index < a.index) {
                            Some(b)
                        } else {
                            Some(a)
                        }
                    }
                    (a, None) => a,
                    (None, b) => b,
                };
                (pick, na + nb)
            },
        );
    let worst_value = worst.as_ref().map_or(f64::NEG_INFINITY, |s| s.value);
    let roots = params.roots_negative_real();
    Ok(MinimaxReport {
        roots_negative_real: roots,
        passed: roots && evaluated > 0 && worst_value <= 0.0,
        sampled_passed: evaluated > 0 && worst_value <= 0.0,
        worst_value,
        worst,
        evaluated,
        unreachable: cfg.budget - evaluated,
        seed: cfg.seed,
    })
}

/// Grid for phase-surface export.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceGrid {
    pub d: (f64, f64, usize),
    pub d_dot: (f64, f64, usize),
    pub d_ddot: (f64, f64, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSample {
    pub d: f64,
    pub d_dot: f64,
    pub d_ddot: f64,
    pub phi: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub d_min: f64,
}

fn linspace((lo, hi, n): (f64, f64, usize)) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Samples of the `φ = 0` surface followed by the `φ₀ = 0` plane (`d = d_min`).
pub fn export_phase_surface(params: &SafetyIndexParams, grid: &SurfaceGrid) -> Result<Vec<SurfaceSample>> {
    params.check()?;
    let finite = [grid.d.0, grid.d.1, grid.d_dot.0, grid.d_dot.1, grid.d_ddot.0, grid.d_ddot.1];
    if !finite.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("surface grid"));
    }
    let sample = |d: f64, d_dot: f64, d_ddot: f64| SurfaceSample {
        d,
        d_dot,
        d_ddot,
        phi: params.phi(d, d_dot, d_ddot),
        lambda1: params.lambda1,
        lambda2: params.lambda2,
        d_min: params.d_min,
    };
    let dm2 = params.d_min * params.d_min;
    let mut out = Vec::new();
    for d in linspace(grid.d) {
        if params.lambda2 != 0.0 {
            for d_dot in linspace(grid.d_dot) {
                out.push(sample(d, d_dot, (dm2 - d * d - params.lambda1 * d_dot) / params.lambda2));
            }
        } else {
            for d_ddot in linspace(grid.d_ddot) {
                out.push(sample(d, (dm2 - d * d) / params.lambda1, d_ddot));
            }
        }
    }
    for d_dot in linspace(grid.d_dot) {
        for d_ddot in linspace(grid.d_ddot) {
            out.push(sample(params.d_min, d_dot, d_ddot));
        }
    }
    Ok(out)
}

pub fn write_surface_csv<W: Write>(samples: &[SurfaceSample], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for s in samples {
        w.serialize(s).map_err(|e| Error::Config(format!("surface csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::Config(format!("surface csv: {e}")))
}

/// `ḋ` at which `φ` crosses zero for fixed `d` and `d̈`.
pub fn approach_speed_threshold(params: &SafetyIndexParams, d: f64, d_ddot: f64) -> f64 {
    (params.d_min * params.d_min - d * d - params.lambda2 * d_ddot) / params.lambda1
}

/// `d̈` at which `φ` crosses zero for fixed `d` and `ḋ`.
pub fn acceleration_threshold(params: &SafetyIndexParams, d: f64, d_dot: f64) -> f64 {
    (params.d_min * params.d_min - d * d - params.lambda1 * d_dot) / params.lambda2
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn phi_direct_substitution() {
        let p = SafetyIndexParams::new(0.05, 3.0, 1.0);
        assert_relative_eq!(p.phi(0.5, 0.0, 0.0), -0.2475, epsilon = 1e-15);
        assert_eq!(p.phi(0.05, 0.0, 0.0), 0.0);
    }

    #[test]
    fn root_condition() {
        assert!(validate_roots(3.0, 1.0));
        assert!(!validate_roots(1.0, 1.0));
        assert!(validate_roots(2.0, 1.0));
        assert!(validate_roots(3.0, 0.0));
        assert!(!validate_roots(-1.0, 0.0));
        assert!(!validate_roots(-3.0, 1.0));
    }

    #[test]
    fn phi_partials() {
        let p = SafetyIndexParams::new(0.05, 3.0, 1.0);
        let h = 1e-6;
        for &(d, dd, ddd) in &[(0.3, -0.2, 0.5), (1.2, 0.4, -1.0)] {
            let dphi_dd = (p.phi(d + h, dd, ddd) - p.phi(d - h, dd, ddd)) / (2.0 * h);
            assert!(dphi_dd < 0.0);
            assert_relative_eq!(p.phi(d, dd + 1.0, ddd) - p.phi(d, dd, ddd), -3.0, epsilon = 1e-12);
            assert_relative_eq!(p.phi(d, dd, ddd + 1.0) - p.phi(d, dd, ddd), -1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn surface_lambda2_zero_slice_is_plane() {
        let p = SafetyIndexParams::new(0.05, 3.0, 0.0);
        let grid = SurfaceGrid {
            d: (0.05, 1.0, 5),
            d_dot: (-1.0, 1.0, 3),
            d_ddot: (-2.0, 2.0, 3),
        };
        let samples = export_phase_surface(&p, &grid).unwrap();
        for s in &samples[..15] {
            assert_relative_eq!(s.d * s.d + 3.0 * s.d_dot, 0.0025, epsilon = 1e-12);
        }
        assert!(samples[15..].iter().all(|s| s.d == 0.05));
    }

    #[test]
    fn thresholds_move_with_weights() {
        let low = SafetyIndexParams::new(0.05, 3.0, 1.0);
        let high_l1 = SafetyIndexParams::new(0.05, 8.0, 1.0);
        let high_l2 = SafetyIndexParams::new(0.05, 3.0, 2.0);
        let (d, d_ddot, d_dot) = (0.6, 0.0, 0.0);
        assert!(approach_speed_threshold(&high_l1, d, d_ddot).abs() < approach_speed_threshold(&low, d, d_ddot).abs());
        assert!(acceleration_threshold(&high_l2, d, d_dot).abs() < acceleration_threshold(&low, d, d_dot).abs());
    }

    #[test]
    fn surface_csv_header() {
        let p = SafetyIndexParams::default();
        let grid = SurfaceGrid {
            d: (0.1, 0.2, 2),
            d_dot: (0.0, 0.0, 1),
            d_ddot: (0.0, 0.0, 1),
        };
        let mut buf = Vec::new();
        write_surface_csv(&export_phase_surface(&p, &grid).unwrap(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("d,d_dot,d_ddot,phi,lambda1,lambda2,d_min\n"));
        assert_eq!(text.lines().count(), 4);
    }
}
