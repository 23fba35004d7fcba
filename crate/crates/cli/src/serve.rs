//! Real-time websocket endpoint.
//!
//! The sim loop owns the world. Connection threads parse client messages and
//! queue them; the loop drains the queue between steps. Outgoing messages get
//! their seq from one counter under the hub lock, so every connection sees
//! strictly increasing seq and all clients see the same state stream.

use std::collections::BTreeMap;
use std::io::{ErrorKind, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use anyhow::Context;
use tungstenite::Message as WsMessage;

use jssa_core::sim::{RunMetrics, Scenario, Simulation, TelemetryRecord};
use jssa_core::wire::{self, ErrorPayload, Message, Payload, ScenarioOp};

/// Broadcast a state message every this many steps (25 Hz at 125 Hz).
pub const STATE_EVERY: u64 = 5;
const POLL: Duration = Duration::from_millis(5);

#[derive(Default)]
struct Hub {
    next_seq: u64,
    next_id: u64,
    clients: BTreeMap<u64, Sender<String>>,
}

impl Hub {
    fn register(&mut self, tx: Sender<String>) -> u64 {
        self.next_id += 1;
        self.clients.insert(self.next_id, tx);
        self.next_id
    }

    /// Sends to one client, or to all when `to` is `None`.
    fn send(&mut self, to: Option<u64>, payload: Payload) {
        self.next_seq += 1;
        let text = Message::new(self.next_seq, payload).to_text();
        match to {
            Some(id) => {
                if let Some(tx) = self.clients.get(&id) {
                    if tx.send(text).is_err() {
                        self.clients.remove(&id);
                    }
                }
            }
            None => self.clients.retain(|_, tx| tx.send(text.clone()).is_ok()),
        }
    }
}

type SharedHub = Arc<Mutex<Hub>>;

fn hub_send(hub: &SharedHub, to: Option<u64>, payload: Payload) {
    hub.lock().expect("hub lock").send(to, payload);
}

pub fn serve(scenario: Scenario, bind: &str, port: u16, paused: bool) -> anyhow::Result<()> {
    let listener = TcpListener::bind((bind, port)).with_context(|| format!("binding {bind}:{port}"))?;
    let addr = listener.local_addr()?;
    let hub: SharedHub = Arc::default();
    let (inbound_tx, inbound_rx) = mpsc::channel();
    {
        let hub = hub.clone();
        thread::spawn(move || accept_loop(listener, hub, inbound_tx));
    }
    println!("listening on ws://{addr}");
    std::io::stdout().flush()?;
    sim_loop(scenario, hub, inbound_rx, !paused)
}

fn accept_loop(listener: TcpListener, hub: SharedHub, inbound: Sender<(u64, Payload)>) {
    for stream in listener.incoming().flatten() {
        let hub = hub.clone();
        let inbound = inbound.clone();
        thread::spawn(move || {
            if let Err(e) = connection(stream, hub, inbound) {
                eprintln!("connection closed: {e:#}");
            }
        });
    }
}

fn connection(stream: TcpStream, hub: SharedHub, inbound: Sender<(u64, Payload)>) -> anyhow::Result<()> {
    stream.set_nodelay(true)?;
    let mut ws = tungstenite::accept(stream).map_err(|e| anyhow::anyhow!("handshake: {e}"))?;
    ws.get_ref().set_read_timeout(Some(POLL))?;
    let (tx, rx) = mpsc::channel();
    let id = hub.lock().expect("hub lock").register(tx);
    let result = pump(&mut ws, id, &hub, &inbound, &rx);
    hub.lock().expect("hub lock").clients.remove(&id);
    result
}

fn pump(
    ws: &mut tungstenite::WebSocket<TcpStream>,
    id: u64,
    hub: &SharedHub,
    inbound: &Sender<(u64, Payload)>,
    outbound: &Receiver<String>,
) -> anyhow::Result<()> {
    loop {
        match ws.read() {
            Ok(WsMessage::Text(text)) => match Message::parse(&text) {
                Ok(m) => {
                    if inbound.send((id, m.payload)).is_err() {
                        return Ok(());
                    }
                }
                Err(e) => hub_send(hub, Some(id), Payload::Error(e)),
            },
            Ok(WsMessage::Binary(_)) => hub_send(hub, Some(id), Payload::Error(ErrorPayload::new("malformed", "binary frames are not supported"))),
            Ok(WsMessage::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(e.into()),
        }
        while let Ok(text) = outbound.try_recv() {
            ws.send(WsMessage::text(text))?;
        }
    }
}

struct World {
    base: Scenario,
    sim: Simulation,
    log: Vec<TelemetryRecord>,
    running: bool,
}

impl World {
    fn new(base: Scenario, running: bool) -> anyhow::Result<Self> {
        let sim = Simulation::new(base.clone())?;
        Ok(Self { base, sim, log: Vec::new(), running })
    }

    fn handle(&mut self, payload: Payload) -> Result<(), ErrorPayload> {
        match payload {
            Payload::Control(_) | Payload::ParamUpdate(_) => {
                wire::apply_mutation(&mut self.sim, &payload).map_err(|e| ErrorPayload::new("rejected", e.to_string()))
            }
            Payload::ScenarioCmd(cmd) => match cmd.op {
                ScenarioOp::Start => {
                    self.running = true;
                    Ok(())
                }
                ScenarioOp::Pause => {
                    self.running = false;
                    Ok(())
                }
                ScenarioOp::Reset => self.reload(self.base.clone()),
                ScenarioOp::Load => match cmd.scenario {
                    Some(s) => self.reload(*s),
                    None => Err(ErrorPayload::new("rejected", "load needs a scenario")),
                },
            },
            other => Err(ErrorPayload::new("unexpected_kind", format!("clients may not send '{}'", other.kind()))),
        }
    }

    fn reload(&mut self, scenario: Scenario) -> Result<(), ErrorPayload> {
        let sim = Simulation::new(scenario.clone()).map_err(|e| ErrorPayload::new("rejected", e.to_string()))?;
        self.base = scenario;
        self.sim = sim;
        self.log.clear();
        Ok(())
    }
}

fn sim_loop(scenario: Scenario, hub: SharedHub, inbound: Receiver<(u64, Payload)>, running: bool) -> anyhow::Result<()> {
    let mut world = World::new(scenario, running)?;
    let period = Duration::from_secs_f64(world.base.tau);
    let mut deadline = Instant::now();
    loop {
        while let Ok((id, payload)) = inbound.try_recv() {
            if let Err(e) = world.handle(payload) {
                hub_send(&hub, Some(id), Payload::Error(e));
            }
        }
        if world.running && !world.sim.is_finished() {
            let rec = world.sim.step()?;
            world.log.push(rec.telemetry);
            if world.sim.step_index() % STATE_EVERY == 0 {
                hub_send(&hub, None, Payload::State(wire::state_payload(&world.sim)?));
            }
            if world.sim.is_finished() {
                let s = &world.sim.scenario;
                let metrics = RunMetrics::from_log(&world.log, s.tau, s.params.d_min);
                hub_send(&hub, None, Payload::Metrics(metrics));
                world.running = false;
            }
        }
        deadline += period;
        let now = Instant::now();
        if deadline > now {
            thread::sleep(deadline - now);
        } else {
            deadline = now;
        }
    }
}
