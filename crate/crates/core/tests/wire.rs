mod common;

use proptest::prelude::*;

use common::*;
use jssa_core::sim::{library, RunMetrics, Simulation};
use jssa_core::wire::{
    apply_mutation, state_payload, ControlPayload, ErrorPayload, Message, ParamUpdatePayload, Payload, ScenarioCmdPayload, ScenarioOp,
    StatePayload, WireCapsule,
};

fn finite() -> impl Strategy<Value = f64> {
    -1e6f64..1e6
}

fn capsule() -> impl Strategy<Value = WireCapsule> {
    (prop::array::uniform3(finite()), prop::array::uniform3(finite()), 0.0f64..1.0, "robot|agent[0-9]", 0usize..10)
        .prop_map(|(p0, p1, r, owner, link)| WireCapsule { p0, p1, r, owner, link })
}

fn state() -> impl Strategy<Value = StatePayload> {
    (finite(), prop::collection::vec(finite(), 6), prop::collection::vec(capsule(), 0..8), finite(), finite(), any::<bool>(), 0usize..7, 1usize..12).prop_map(
        |(t, theta, capsules, d, phi, active, robot_link, agent_link)| StatePayload {
            t,
            theta,
            capsules,
            d,
            phi,
            active,
            robot_link,
            agent_link,
        },
    )
}

fn metrics() -> impl Strategy<Value = RunMetrics> {
    (prop::array::uniform8(0.0f64..10.0), prop::option::of(0.0f64..10.0), prop::option::of(0.0f64..10.0), prop::array::uniform5(0usize..5000)).prop_map(
        |(f, first, last, n)| RunMetrics {
            min_distance: f[0],
            first_trigger: first,
            last_trigger: last,
            active_duration: f[1],
            mean_critical_velocity: f[2],
            mean_critical_acceleration: f[3],
            active_mean_critical_velocity: f[4],
            active_mean_critical_acceleration: f[5],
            violations: n[0],
            fallback_steps: n[1],
            max_brake_steps: n[2],
            pre_clip_violations: n[3],
            steps: n[4],
        },
    )
}

fn payload() -> impl Strategy<Value = Payload> {
    prop_oneof![
        state().prop_map(Payload::State),
        metrics().prop_map(Payload::Metrics),
        (prop::array::uniform3(finite()), 0usize..4).prop_map(|(target_xyz, agent_id)| Payload::Control(ControlPayload { target_xyz, agent_id })),
        prop_oneof![Just(ScenarioOp::Start), Just(ScenarioOp::Pause), Just(ScenarioOp::Reset)]
            .prop_map(|op| Payload::ScenarioCmd(ScenarioCmdPayload { op, scenario: None })),
        Just(Payload::ScenarioCmd(ScenarioCmdPayload {
            op: ScenarioOp::Load,
            scenario: Some(Box::new(library::handover())),
        })),
        (prop::option::of(0.1f64..10.0), prop::option::of(0.1f64..10.0), prop::option::of(0.01f64..0.2))
            .prop_map(|(lambda1, lambda2, d_min)| Payload::ParamUpdate(ParamUpdatePayload { lambda1, lambda2, d_min })),
        ("[a-z_]{1,12}", ".{0,40}").prop_map(|(code, detail)| Payload::Error(ErrorPayload { code, detail })),
    ]
}

proptest! {
    #![proptest_config(quiet_config(256))]

    #[test]
    fn messages_round_trip(seq in any::<u64>(), payload in payload()) {
        let m = Message::new(seq, payload);
        let text = m.to_text();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(v["kind"].as_str().unwrap(), m.payload.kind());
        prop_assert_eq!(v["seq"].as_u64().unwrap(), seq);
        prop_assert_eq!(Message::parse(&text).unwrap(), m);
    }
}

#[test]
fn unknown_kind_and_missing_fields_are_malformed() {
    for text in [r#"{"seq":1,"kind":"teleport"}"#, r#"{"seq":1,"kind":"control","agent_id":0}"#, r#"{"kind":"state"}"#, "[]"] {
        assert_eq!(Message::parse(text).unwrap_err().code, "malformed", "{text}");
    }
}

/// Walks the interactive human to `target` for `steps` steps; returns the
/// time of the first safeguard activation, if any.
fn walk(sim: &mut Simulation, target: [f64; 3], steps: usize) -> Option<f64> {
    let control = Payload::Control(ControlPayload { target_xyz: target, agent_id: 0 });
    apply_mutation(sim, &control).unwrap();
    let mut first = None;
    for _ in 0..steps {
        let rec = sim.step().unwrap();
        if rec.telemetry.active && first.is_none() {
            first = Some(rec.telemetry.t);
        }
    }
    first
}

/// Second approach of the same walk, with or without raising `λ₁` before it.
fn second_approach_trigger(raise: bool) -> f64 {
    let mut sim = Simulation::new(library::interactive()).unwrap();
    walk(&mut sim, [0.6, 0.0, 0.0], 500).expect("first approach triggers");
    walk(&mut sim, [2.5, 0.0, 0.0], 600);
    if raise {
        let update = Payload::ParamUpdate(ParamUpdatePayload {
            lambda1: Some(8.0),
            ..ParamUpdatePayload::default()
        });
        apply_mutation(&mut sim, &update).unwrap();
        assert_eq!(sim.scenario.params.lambda1, 8.0);
    }
    let start = sim.time();
    walk(&mut sim, [0.6, 0.0, 0.0], 500).expect("second approach triggers") - start
}

#[test]
fn raising_lambda1_triggers_earlier() {
    let base = second_approach_trigger(false);
    let raised = second_approach_trigger(true);
    assert!(raised < base, "raised {raised} s, base {base} s");
}

#[test]
fn control_takes_effect_on_next_step() {
    let mut sim = Simulation::new(library::interactive()).unwrap();
    for _ in 0..10 {
        sim.step().unwrap();
    }
    let root_x = |sim: &Simulation| state_payload(sim).unwrap().capsules.iter().find(|c| c.owner == "agent0").unwrap().p0[0];
    let before = root_x(&sim);
    sim.step().unwrap();
    assert_eq!(root_x(&sim), before);
    apply_mutation(&mut sim, &Payload::Control(ControlPayload { target_xyz: [0.0, 0.0, 0.0], agent_id: 0 })).unwrap();
    sim.step().unwrap();
    assert!(root_x(&sim) < before);
}

#[test]
fn state_echo_matches_telemetry() {
    let mut sim = Simulation::new(library::head_on()).unwrap();
    assert!(state_payload(&sim).is_err());
    for _ in 0..700 {
        let rec = sim.step().unwrap();
        let s = state_payload(&sim).unwrap();
        assert_eq!(s.d, rec.telemetry.d);
        assert_eq!(s.phi, rec.telemetry.phi);
        assert_eq!(s.active, rec.telemetry.active);
        assert_eq!(s.agent_link, rec.telemetry.agent_link);
    }
}

#[test]
fn mutations_reject_bad_input() {
    let mut sim = Simulation::new(library::interactive()).unwrap();
    let bad_agent = Payload::Control(ControlPayload { target_xyz: [0.0; 3], agent_id: 7 });
    assert!(apply_mutation(&mut sim, &bad_agent).is_err());
    let bad_dmin = Payload::ParamUpdate(ParamUpdatePayload { d_min: Some(-1.0), ..ParamUpdatePayload::default() });
    assert!(apply_mutation(&mut sim, &bad_dmin).is_err());
    assert_eq!(sim.scenario.params.d_min, 0.05);
    assert!(apply_mutation(&mut sim, &Payload::Error(ErrorPayload::new("x", "y"))).is_err());
}
