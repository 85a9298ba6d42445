use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{Context, Message, RequestChannel, Role, TransportError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkFaults {
    pub base_latency_ms: u64,
    pub jitter_ms: u64,
    pub drop_prob: f64,
    pub dup_prob: f64,
    /// Extra uniform delay in `[0, w]`; when zero the link is FIFO.
    pub reorder_window_ms: u64,
}

impl Default for LinkFaults {
    fn default() -> Self {
        Self {
            base_latency_ms: 5,
            jitter_ms: 0,
            drop_prob: 0.0,
            dup_prob: 0.0,
            reorder_window_ms: 0,
        }
    }
}

impl LinkFaults {
    pub fn reliable() -> Self {
        Self {
            base_latency_ms: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [("drop_prob", self.drop_prob), ("dup_prob", self.dup_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceEvent {
    Deliver,
    Drop,
    /// Delivered bytes that did not decode.
    Reject,
    /// Addressed to a killed role.
    Dead,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub t_ms: u64,
    pub from: String,
    pub to: String,
    pub msg_type: String,
    pub event: TraceEvent,
}

/// A message that landed at an address with no role behind it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub t_ms: u64,
    pub from: String,
    pub msg: Message,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("time horizon {horizon_ms} ms exceeded with {} events pending: {}", undelivered.len(), undelivered.join("; "))]
    HorizonExceeded {
        horizon_ms: u64,
        undelivered: Vec<String>,
    },
}

enum EventKind {
    Deliver {
        from: String,
        to: String,
        frame: Vec<u8>,
    },
    Timer {
        role: String,
        id: u64,
    },
}

struct Event {
    t_ms: u64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        (self.t_ms, self.seq) == (other.t_ms, other.seq)
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.t_ms, self.seq).cmp(&(other.t_ms, other.seq))
    }
}

impl Event {
    fn describe(&self) -> String {
        match &self.kind {
            EventKind::Deliver { from, to, frame } => {
                let ty = frame.get(4).copied().unwrap_or(0);
                format!("t={} {from}->{to} type={ty:#04x}", self.t_ms)
            }
            EventKind::Timer { role, id } => format!("t={} timer {id} at {role}", self.t_ms),
        }
    }
}

struct Link {
    faults: LinkFaults,
    rng: Xoshiro256PlusPlus,
    last_delivery_ms: u64,
}

fn link_rng(seed: u64, from: &str, to: &str) -> Xoshiro256PlusPlus {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update(from.as_bytes());
    h.update([0]);
    h.update(to.as_bytes());
    Xoshiro256PlusPlus::from_seed(h.finalize().into())
}

fn unit(rng: &mut Xoshiro256PlusPlus) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

fn upto(rng: &mut Xoshiro256PlusPlus, max: u64) -> u64 {
    if max == 0 {
        0
    } else {
        rng.next_u64() % (max + 1)
    }
}

struct SimCtx {
    now_ms: u64,
    sends: Vec<(String, Message)>,
    timers: Vec<(u64, u64)>,
}

impl Context for SimCtx {
    fn now_ms(&self) -> u64 {
        self.now_ms
    }

    fn send(&mut self, to: &str, msg: Message) {
        self.sends.push((to.to_string(), msg));
    }

    fn set_timer(&mut self, delay_ms: u64, timer_id: u64) {
        self.timers.push((delay_ms, timer_id));
    }
}

/// Single-threaded discrete-event simulator. Virtual time only moves when an
/// event is processed or the caller advances it.
pub struct Simulator {
    seed: u64,
    now_ms: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<Event>>,
    roles: BTreeMap<String, Box<dyn Role>>,
    dead: BTreeSet<String>,
    mailboxes: BTreeMap<String, VecDeque<Envelope>>,
    default_faults: LinkFaults,
    overrides: BTreeMap<(String, String), LinkFaults>,
    links: BTreeMap<(String, String), Link>,
    trace: Vec<TraceEntry>,
    record_frames: bool,
    frames: Vec<Vec<u8>>,
    faults_suspended: bool,
}

impl Simulator {
    pub fn new(seed: u64, start_ms: u64) -> Self {
        Self {
            seed,
            now_ms: start_ms,
            seq: 0,
            queue: BinaryHeap::new(),
            roles: BTreeMap::new(),
            dead: BTreeSet::new(),
            mailboxes: BTreeMap::new(),
            default_faults: LinkFaults::default(),
            overrides: BTreeMap::new(),
            links: BTreeMap::new(),
            trace: Vec::new(),
            record_frames: false,
            frames: Vec::new(),
            faults_suspended: false,
        }
    }

    pub fn now_ms(&self) -> u64 {
        self.now_ms
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add_role(&mut self, addr: &str, role: Box<dyn Role>) {
        self.dead.remove(addr);
        self.roles.insert(addr.to_string(), role);
    }

    pub fn has_role(&self, addr: &str) -> bool {
        self.roles.contains_key(addr)
    }

    pub fn role_addrs(&self) -> impl Iterator<Item = &str> {
        self.roles.keys().map(String::as_str)
    }

    /// Remove a role; later deliveries to it are traced as dead.
    pub fn kill(&mut self, addr: &str) -> Option<Box<dyn Role>> {
        let role = self.roles.remove(addr);
        if role.is_some() {
            self.dead.insert(addr.to_string());
        }
        role
    }

    pub fn role<T: 'static>(&self, addr: &str) -> Option<&T> {
        self.roles.get(addr)?.as_any().downcast_ref()
    }

    pub fn role_mut<T: 'static>(&mut self, addr: &str) -> Option<&mut T> {
        self.roles.get_mut(addr)?.as_any_mut().downcast_mut()
    }

    pub fn role_state(&self, addr: &str) -> Option<serde_json::Value> {
        self.roles.get(addr)?.state_json()
    }

    pub fn set_default_faults(&mut self, faults: LinkFaults) {
        self.default_faults = faults;
        for ((from, to), link) in self.links.iter_mut() {
            if !self.overrides.contains_key(&(from.clone(), to.clone())) {
                link.faults = faults;
            }
        }
    }

    /// Faults for the directed link `from -> to`.
    pub fn set_link(&mut self, from: &str, to: &str, faults: LinkFaults) {
        let key = (from.to_string(), to.to_string());
        if let Some(link) = self.links.get_mut(&key) {
            link.faults = faults;
        }
        self.overrides.insert(key, faults);
    }

    /// Keep a copy of every frame put on the wire.
    pub fn record_frames(&mut self, on: bool) {
        self.record_frames = on;
    }

    pub fn frames(&self) -> &[Vec<u8>] {
        &self.frames
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    pub fn take_mailbox(&mut self, addr: &str) -> Vec<Envelope> {
        self.mailboxes
            .remove(addr)
            .map(Vec::from)
            .unwrap_or_default()
    }

    fn push(&mut self, t_ms: u64, kind: EventKind) {
        self.seq += 1;
        self.queue.push(Reverse(Event {
            t_ms,
            seq: self.seq,
            kind,
        }));
    }

    fn trace_event(&mut self, from: &str, to: &str, msg_type: &str, event: TraceEvent) {
        self.trace.push(TraceEntry {
            t_ms: self.now_ms,
            from: from.to_string(),
            to: to.to_string(),
            msg_type: msg_type.to_string(),
            event,
        });
    }

    /// Put one message on the `from -> to` link, subject to its faults.
    /// Returns the number of scheduled deliveries (0, 1 or 2).
    pub fn sim_send(&mut self, from: &str, to: &str, msg: &Message) -> usize {
        if self.faults_suspended {
            self.inject_reliable(from, to, msg.clone());
            return 1;
        }
        let frame = msg.to_frame().expect("simulated messages fit a frame");
        let key = (from.to_string(), to.to_string());
        let faults = self
            .overrides
            .get(&key)
            .copied()
            .unwrap_or(self.default_faults);
        let seed = self.seed;
        let link = self.links.entry(key).or_insert_with(|| Link {
            faults,
            rng: link_rng(seed, from, to),
            last_delivery_ms: 0,
        });
        let drop = unit(&mut link.rng) < link.faults.drop_prob;
        let dup = unit(&mut link.rng) < link.faults.dup_prob;
        if drop {
            self.trace_event(from, to, msg.msg_type().name(), TraceEvent::Drop);
            return 0;
        }
        let copies = if dup { 2 } else { 1 };
        let mut times = Vec::with_capacity(copies);
        for _ in 0..copies {
            let f = link.faults;
            let mut t = self.now_ms + f.base_latency_ms + upto(&mut link.rng, f.jitter_ms);
            if f.reorder_window_ms > 0 {
                t += upto(&mut link.rng, f.reorder_window_ms);
            } else {
                t = t.max(link.last_delivery_ms);
            }
            link.last_delivery_ms = link.last_delivery_ms.max(t);
            times.push(t);
        }
        if self.record_frames {
            self.frames.push(frame.clone());
        }
        for t in times {
            self.push(
                t,
                EventKind::Deliver {
                    from: from.to_string(),
                    to: to.to_string(),
                    frame: frame.clone(),
                },
            );
        }
        copies
    }

    /// While suspended every send is a single delivery after one
    /// millisecond and link RNGs are left untouched.
    pub fn suspend_faults(&mut self, on: bool) {
        self.faults_suspended = on;
    }

    /// Send from outside the simulated roles (a wallet, harness or CLI).
    pub fn inject(&mut self, from: &str, to: &str, msg: Message) -> usize {
        self.sim_send(from, to, &msg)
    }

    /// Send bypassing link faults: one delivery after one millisecond.
    pub fn inject_reliable(&mut self, from: &str, to: &str, msg: Message) {
        let frame = msg.to_frame().expect("simulated messages fit a frame");
        if self.record_frames {
            self.frames.push(frame.clone());
        }
        self.push(
            self.now_ms + 1,
            EventKind::Deliver {
                from: from.to_string(),
                to: to.to_string(),
                frame,
            },
        );
    }

    fn dispatch(&mut self, ev: Event) {
        self.now_ms = self.now_ms.max(ev.t_ms);
        match ev.kind {
            EventKind::Deliver { from, to, frame } => {
                let msg = match Message::from_frame(&frame) {
                    Ok(m) => m,
                    Err(e) => {
                        log::debug!("rejecting frame {from}->{to}: {e}");
                        self.trace_event(&from, &to, "?", TraceEvent::Reject);
                        return;
                    }
                };
                let name = msg.msg_type().name();
                if self.dead.contains(&to) {
                    self.trace_event(&from, &to, name, TraceEvent::Dead);
                    return;
                }
                self.trace_event(&from, &to, name, TraceEvent::Deliver);
                let now = self.now_ms;
                match self.roles.get_mut(&to) {
                    Some(role) => {
                        let mut ctx = SimCtx {
                            now_ms: now,
                            sends: Vec::new(),
                            timers: Vec::new(),
                        };
                        role.on_message(&mut ctx, &from, msg);
                        self.apply(&to, ctx);
                    }
                    None => self.mailboxes.entry(to).or_default().push_back(Envelope {
                        t_ms: now,
                        from,
                        msg,
                    }),
                }
            }
            EventKind::Timer { role, id } => {
                let now = self.now_ms;
                if let Some(r) = self.roles.get_mut(&role) {
                    let mut ctx = SimCtx {
                        now_ms: now,
                        sends: Vec::new(),
                        timers: Vec::new(),
                    };
                    r.on_timer(&mut ctx, id);
                    self.apply(&role, ctx);
                }
            }
        }
    }

    fn apply(&mut self, me: &str, ctx: SimCtx) {
        for (to, msg) in ctx.sends {
            self.sim_send(me, &to, &msg);
        }
        for (delay, id) in ctx.timers {
            self.push(
                self.now_ms + delay,
                EventKind::Timer {
                    role: me.to_string(),
                    id,
                },
            );
        }
    }

    /// Process the next event, if any.
    pub fn step(&mut self) -> bool {
        match self.queue.pop() {
            Some(Reverse(ev)) => {
                self.dispatch(ev);
                true
            }
            None => false,
        }
    }

    /// Process events until none remain. Fails without processing further if
    /// the next event lies beyond `horizon_ms`.
    pub fn run_until_idle(&mut self, horizon_ms: u64) -> Result<&[TraceEntry], SimError> {
        let start = self.trace.len();
        while let Some(Reverse(next)) = self.queue.peek() {
            if next.t_ms > horizon_ms {
                let mut pending: Vec<&Event> = self.queue.iter().map(|r| &r.0).collect();
                pending.sort();
                return Err(SimError::HorizonExceeded {
                    horizon_ms,
                    undelivered: pending.iter().map(|e| e.describe()).collect(),
                });
            }
            self.step();
        }
        Ok(&self.trace[start..])
    }

    /// Process every event due at or before `t_ms`, then set the clock to it.
    pub fn run_until(&mut self, t_ms: u64) {
        while let Some(Reverse(next)) = self.queue.peek() {
            if next.t_ms > t_ms {
                break;
            }
            self.step();
        }
        self.now_ms = self.now_ms.max(t_ms);
    }

    /// Run until a message lands in `addr`'s mailbox or `deadline_ms` passes.
    pub fn run_until_mail(&mut self, addr: &str, deadline_ms: u64) -> Option<Envelope> {
        loop {
            if let Some(env) = self.mailboxes.get_mut(addr).and_then(VecDeque::pop_front) {
                return Some(env);
            }
            match self.queue.peek() {
                Some(Reverse(next)) if next.t_ms <= deadline_ms => {
                    self.step();
                }
                _ => {
                    self.now_ms = self.now_ms.max(deadline_ms);
                    return None;
                }
            }
        }
    }
}

/// Request/response over the simulator. Link faults are suspended for the
/// exchange.
pub struct SimChannel<'a> {
    pub sim: &'a mut Simulator,
    pub client: String,
    pub timeout_ms: u64,
}

impl<'a> SimChannel<'a> {
    pub fn new(sim: &'a mut Simulator, client: &str) -> Self {
        Self {
            sim,
            client: client.to_string(),
            timeout_ms: 10_000,
        }
    }
}

impl RequestChannel for SimChannel<'_> {
    fn request(&mut self, to: &str, msg: Message) -> Result<Message, TransportError> {
        if !self.sim.has_role(to) {
            return Err(TransportError::Unreachable {
                to: to.to_string(),
                detail: "no such role".into(),
            });
        }
        // Anything already waiting is a late or duplicated reply to an
        // earlier request.
        self.sim.take_mailbox(&self.client);
        self.sim.inject_reliable(&self.client, to, msg);
        let deadline = self.sim.now_ms() + self.timeout_ms;
        let was = std::mem::replace(&mut self.sim.faults_suspended, true);
        let reply = self.sim.run_until_mail(&self.client, deadline);
        self.sim.faults_suspended = was;
        reply
            .map(|env| env.msg)
            .ok_or_else(|| TransportError::Timeout {
                to: to.to_string(),
                waited_ms: self.timeout_ms,
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::LocationFixMsg;
    use crate::token::{GeoCell, TimeStamp};
    use std::any::Any;

    /// Echoes every message back to its sender.
    struct Echo;

    impl Role for Echo {
        fn on_message(&mut self, ctx: &mut dyn Context, from: &str, msg: Message) {
            ctx.send(from, msg);
        }
        fn as_any(&self) -> &dyn Any {
            self
        }
        fn as_any_mut(&mut self) -> &mut dyn Any {
            self
        }
    }

    fn fix(t: u64) -> Message {
        Message::LocationFix(LocationFixMsg {
            device_id: "d".into(),
            cell: GeoCell::new(0, 0).unwrap(),
            t: TimeStamp(t),
            accepted: None,
        })
    }

    fn faults(drop: f64, dup: f64) -> LinkFaults {
        LinkFaults {
            drop_prob: drop,
            dup_prob: dup,
            ..LinkFaults::default()
        }
    }

    #[test]
    fn delivery_counts() {
        let mut sim = Simulator::new(1, 0);
        sim.set_link("a", "b", faults(0.0, 0.0));
        assert_eq!(sim.inject("a", "b", fix(1)), 1);
        sim.set_link("a", "b", faults(1.0, 0.0));
        assert_eq!(sim.inject("a", "b", fix(2)), 0);
        sim.set_link("a", "b", faults(0.0, 1.0));
        assert_eq!(sim.inject("a", "b", fix(3)), 2);
        sim.run_until_idle(u64::MAX).unwrap();
        let got: Vec<Message> = sim.take_mailbox("b").into_iter().map(|e| e.msg).collect();
        assert_eq!(got, vec![fix(1), fix(3), fix(3)]);
        assert_eq!(
            sim.trace().iter().filter(|e| e.event == TraceEvent::Drop).count(),
            1
        );
    }

    #[test]
    fn empty_run_has_empty_trace() {
        let mut sim = Simulator::new(1, 0);
        assert!(sim.run_until_idle(0).unwrap().is_empty());
    }

    fn echo_trace(seed: u64) -> Vec<TraceEntry> {
        let mut sim = Simulator::new(seed, 1000);
        sim.set_default_faults(LinkFaults {
            base_latency_ms: 3,
            jitter_ms: 20,
            drop_prob: 0.2,
            dup_prob: 0.2,
            reorder_window_ms: 10,
        });
        sim.add_role("echo", Box::new(Echo));
        for i in 0..50 {
            sim.inject("client", "echo", fix(i));
        }
        sim.run_until_idle(u64::MAX).unwrap();
        sim.trace().to_vec()
    }

    #[test]
    fn same_seed_same_trace() {
        assert_eq!(echo_trace(7), echo_trace(7));
        assert_ne!(echo_trace(7), echo_trace(8));
    }

    #[test]
    fn fifo_without_reorder_window() {
        let mut sim = Simulator::new(3, 0);
        sim.set_link(
            "a",
            "b",
            LinkFaults {
                jitter_ms: 50,
                ..LinkFaults::default()
            },
        );
        for i in 0..100 {
            sim.inject("a", "b", fix(i));
        }
        sim.run_until_idle(u64::MAX).unwrap();
        let got: Vec<Message> = sim.take_mailbox("b").into_iter().map(|e| e.msg).collect();
        assert_eq!(got, (0..100).map(fix).collect::<Vec<_>>());
    }

    #[test]
    fn horizon_reports_pending() {
        let mut sim = Simulator::new(1, 0);
        sim.inject("a", "b", fix(1));
        let err = sim.run_until_idle(2).unwrap_err();
        let SimError::HorizonExceeded { undelivered, .. } = err;
        assert_eq!(undelivered.len(), 1);
        assert!(undelivered[0].contains("a->b"));
    }

    #[test]
    fn channel_round_trip_and_dead_role() {
        let mut sim = Simulator::new(1, 0);
        sim.add_role("echo", Box::new(Echo));
        let reply = SimChannel::new(&mut sim, "me").request("echo", fix(4)).unwrap();
        assert_eq!(reply, fix(4));
        sim.kill("echo");
        sim.inject("me", "echo", fix(5));
        sim.run_until_idle(u64::MAX).unwrap();
        assert_eq!(sim.trace().last().unwrap().event, TraceEvent::Dead);
    }

    #[test]
    fn undecodable_frames_are_rejected() {
        let mut sim = Simulator::new(1, 0);
        sim.push(
            1,
            EventKind::Deliver {
                from: "x".into(),
                to: "y".into(),
                frame: vec![0, 0, 0, 1, 0x77],
            },
        );
        sim.run_until_idle(10).unwrap();
        assert_eq!(sim.trace()[0].event, TraceEvent::Reject);
    }
}
