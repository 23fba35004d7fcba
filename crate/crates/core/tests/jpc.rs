mod common;

use common::*;
use nalgebra::DVector;

use jssa_core::jpc::{host_replan, Task};
use jssa_core::sim::library;

#[test]
fn buffers_hit_waypoints_within_bounds() {
    let (err, inside) = jpc_tracking_error(200, 51);
    assert!(err <= 1e-6, "waypoint miss {err}");
    assert!(inside);
}

#[test]
fn internal_replan_comes_to_rest() {
    let (res, inside) = internal_replan_residual(500, 52);
    assert!(res < 1e-9, "residual {res}");
    assert!(inside);
}

#[test]
fn host_replan_stops_then_resumes_task() {
    let b = bounds();
    let mut r = rng(53);
    let q = random_state(&mut r, 1.0, 5.0);
    let task = Task::new(vec![vec![0.2, 0.1, 0.4, 0.0, 0.2, 0.0]], 0.8);
    let buffer = host_replan(&task, &q, &b, TAU).unwrap();
    let states = buffer.rollout(TAU);
    let k = buffer.waypoint_steps[0];
    assert!((&states[k].theta - DVector::from_vec(task.waypoints[0].clone())).amax() <= 1e-6);
    assert!(states.last().unwrap().is_at_rest(1e-9));
}

#[test]
fn no_stale_epochs_under_latency() {
    for latency in [0.0, 0.1, 0.5, 2.0] {
        let audit = replan_epoch_audit(latency, 54);
        assert_eq!(audit.stale, 0, "latency {latency}: {audit:?}");
        assert_eq!(audit.regressions, 0, "latency {latency}: {audit:?}");
        assert!(audit.delivered + audit.discarded > 0, "latency {latency}: {audit:?}");
        let sim = scenario_epoch_audit(&library::head_on(), latency);
        assert_eq!(sim.stale, 0, "latency {latency}: {sim:?}");
        assert_eq!(sim.regressions, 0, "latency {latency}: {sim:?}");
    }
    assert!(replan_epoch_audit(2.0, 54).discarded > 0);
}
