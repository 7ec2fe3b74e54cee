use super::{Env, FaultAction, FaultSchedule, LatencyModel, MetricsSink, NodeId, SimTime};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::panic::{self, AssertUnwindSafe};
use thiserror::Error;

/// A node's behavior. The engine calls exactly one handler at a time.
pub trait Process {
    type Msg: Clone + fmt::Debug;
    type Timer: Clone + fmt::Debug;

    fn on_start(&mut self, _ctx: &mut Ctx<'_, Self::Msg, Self::Timer>) {}
    fn on_message(&mut self, ctx: &mut Ctx<'_, Self::Msg, Self::Timer>, from: NodeId, msg: Self::Msg);
    fn on_timer(&mut self, ctx: &mut Ctx<'_, Self::Msg, Self::Timer>, timer: Self::Timer);
    /// Drop volatile state. Durable state survives until restart.
    fn on_crash(&mut self) {}
    fn on_restart(&mut self, _ctx: &mut Ctx<'_, Self::Msg, Self::Timer>) {}
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("cannot run backwards: requested {requested} but clock is at {now}")]
    TimeReversal { requested: SimTime, now: SimTime },
    #[error("handler panicked on {node} at {time}: {message}")]
    HandlerPanic { time: SimTime, node: NodeId, message: String },
    #[error("simulation was aborted by an earlier handler panic")]
    Aborted,
}

/// One processed event, kept only when tracing is enabled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRecord {
    pub time: SimTime,
    pub seq: u64,
    pub text: String,
}

enum Effect<M, T> {
    Send(NodeId, M),
    Timer(u64, T),
}

/// Handler-side view of the engine.
pub struct Ctx<'a, M, T> {
    now: SimTime,
    me: NodeId,
    rng: &'a mut ChaCha8Rng,
    effects: &'a mut Vec<Effect<M, T>>,
    metrics: &'a mut MetricsSink,
}

impl<M, T> Env<M, T> for Ctx<'_, M, T> {
    fn now(&self) -> SimTime {
        self.now
    }

    fn me(&self) -> NodeId {
        self.me
    }

    fn send(&mut self, to: NodeId, msg: M) {
        self.effects.push(Effect::Send(to, msg));
    }

    fn set_timer(&mut self, after_ms: u64, timer: T) {
        self.effects.push(Effect::Timer(after_ms, timer));
    }

    fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    fn metric(&mut self, name: &str, value: f64) {
        self.metrics.record(self.now, Some(self.me), name, value);
    }
}

enum Event<M, T> {
    Deliver { from: NodeId, to: NodeId, incarnation: u64, msg: M },
    Timer { node: NodeId, incarnation: u64, timer: T },
    Fault(FaultAction),
}

struct Slot<P> {
    process: P,
    online: bool,
    incarnation: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SimStats {
    pub events: u64,
    pub sent: u64,
    pub dropped_at_send: u64,
    pub dropped_at_delivery: u64,
    pub crashes: u64,
    pub restarts: u64,
}

/// The engine: nodes, clock, queue, network.
pub struct Simulation<P: Process> {
    slots: Vec<Slot<P>>,
    queue: BTreeMap<(SimTime, u64), Event<P::Msg, P::Timer>>,
    seq: u64,
    now: SimTime,
    latency: LatencyModel,
    net_rng: ChaCha8Rng,
    node_rng: ChaCha8Rng,
    partitions: Vec<(BTreeSet<NodeId>, BTreeSet<NodeId>)>,
    metrics: MetricsSink,
    trace: Option<Vec<TraceRecord>>,
    stats: SimStats,
    aborted: bool,
    effects: Vec<Effect<P::Msg, P::Timer>>,
}

impl<P: Process> Simulation<P> {
    /// Builds the simulation and runs every node's `on_start` at time zero.
    ///
    /// Node `i` in `nodes` gets address `NodeId(i)`; the latency model must
    /// cover at least that many nodes.
    pub fn new(nodes: Vec<P>, latency: LatencyModel, seed: u64) -> Self {
        assert!(latency.len() >= nodes.len(), "latency model smaller than node count");
        let mut sim = Simulation {
            slots: nodes
                .into_iter()
                .map(|process| Slot { process, online: true, incarnation: 0 })
                .collect(),
            queue: BTreeMap::new(),
            seq: 0,
            now: SimTime::ZERO,
            net_rng: ChaCha8Rng::seed_from_u64(latency.seed() ^ seed.rotate_left(17)),
            node_rng: ChaCha8Rng::seed_from_u64(seed),
            latency,
            partitions: Vec::new(),
            metrics: MetricsSink::new(),
            trace: None,
            stats: SimStats::default(),
            aborted: false,
            effects: Vec::new(),
        };
        for i in 0..sim.slots.len() {
            let id = NodeId(i as u32);
            sim.invoke(id, |p, ctx| p.on_start(ctx))
                .expect("on_start handler panicked");
        }
        sim
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> &[TraceRecord] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn stats(&self) -> SimStats {
        self.stats
    }

    pub fn latency(&self) -> &LatencyModel {
        &self.latency
    }

    pub fn metrics(&self) -> &MetricsSink {
        &self.metrics
    }

    pub fn metrics_mut(&mut self) -> &mut MetricsSink {
        &mut self.metrics
    }

    pub fn take_metrics(&mut self) -> MetricsSink {
        std::mem::take(&mut self.metrics)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &P {
        &self.slots[id.index()].process
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut P {
        &mut self.slots[id.index()].process
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &P)> {
        self.slots.iter().enumerate().map(|(i, s)| (NodeId(i as u32), &s.process))
    }

    pub fn is_online(&self, id: NodeId) -> bool {
        self.slots[id.index()].online
    }

    pub fn online_nodes(&self) -> Vec<NodeId> {
        (0..self.slots.len())
            .map(|i| NodeId(i as u32))
            .filter(|n| self.is_online(*n))
            .collect()
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    pub fn separated(&self, a: NodeId, b: NodeId) -> bool {
        self.partitions.iter().any(|(left, right)| {
            (left.contains(&a) && right.contains(&b)) || (left.contains(&b) && right.contains(&a))
        })
    }

    /// Runs `f` on an online node at the current time, applying its effects.
    /// Returns `None` if the node is crashed.
    pub fn with_node<R>(
        &mut self,
        id: NodeId,
        f: impl FnOnce(&mut P, &mut Ctx<'_, P::Msg, P::Timer>) -> R,
    ) -> Option<R> {
        if !self.is_online(id) {
            return None;
        }
        self.invoke(id, f).ok()
    }

    pub fn schedule_fault(&mut self, at: SimTime, action: FaultAction) {
        let at = at.max(self.now);
        self.push(at, Event::Fault(action));
    }

    pub fn load_faults(&mut self, schedule: &FaultSchedule) {
        for (t, action) in &schedule.entries {
            self.schedule_fault(*t, action.clone());
        }
    }

    /// Applies a fault immediately.
    pub fn apply_fault(&mut self, action: FaultAction) -> Result<(), SimError> {
        self.record_trace(format!("fault {action:?}"));
        match action {
            FaultAction::Crash { node } => {
                let slot = &mut self.slots[node.index()];
                if slot.online {
                    slot.online = false;
                    slot.incarnation += 1;
                    slot.process.on_crash();
                    self.stats.crashes += 1;
                    self.metrics.record(self.now, Some(node), "crash", 1.0);
                }
            }
            FaultAction::Restart { node } => {
                if !self.slots[node.index()].online {
                    self.slots[node.index()].online = true;
                    self.stats.restarts += 1;
                    self.metrics.record(self.now, Some(node), "restart", 1.0);
                    self.invoke(node, |p, ctx| p.on_restart(ctx))?;
                }
            }
            FaultAction::Partition { a, b } => {
                self.partitions.push((a.into_iter().collect(), b.into_iter().collect()));
            }
            FaultAction::Heal => self.partitions.clear(),
        }
        Ok(())
    }

    pub fn crash(&mut self, node: NodeId) {
        self.apply_fault(FaultAction::Crash { node }).expect("crash has no handler");
    }

    pub fn restart(&mut self, node: NodeId) -> Result<(), SimError> {
        self.apply_fault(FaultAction::Restart { node })
    }

    /// Processes every event with time `<= t`, then sets the clock to `t`.
    pub fn run_until(&mut self, t: SimTime) -> Result<u64, SimError> {
        if self.aborted {
            return Err(SimError::Aborted);
        }
        if t < self.now {
            return Err(SimError::TimeReversal { requested: t, now: self.now });
        }
        let mut count = 0;
        while let Some((&(at, _), _)) = self.queue.first_key_value() {
            if at > t {
                break;
            }
            self.step()?;
            count += 1;
        }
        self.now = t;
        Ok(count)
    }

    pub fn run_for(&mut self, ms: u64) -> Result<u64, SimError> {
        self.run_until(self.now.after(ms))
    }

    /// Processes at most `max` events; the clock follows the last event.
    pub fn run_events(&mut self, max: u64) -> Result<u64, SimError> {
        let mut count = 0;
        while count < max && !self.queue.is_empty() {
            self.step()?;
            count += 1;
        }
        Ok(count)
    }

    /// Runs until `done` holds (checked after each event) or `deadline` passes.
    pub fn run_until_cond(
        &mut self,
        deadline: SimTime,
        mut done: impl FnMut(&Self) -> bool,
    ) -> Result<bool, SimError> {
        if done(self) {
            return Ok(true);
        }
        while let Some((&(at, _), _)) = self.queue.first_key_value() {
            if at > deadline {
                break;
            }
            self.step()?;
            if done(self) {
                return Ok(true);
            }
        }
        self.now = self.now.max(deadline);
        Ok(done(self))
    }

    /// Processes the next event, returning its time.
    pub fn step(&mut self) -> Result<Option<SimTime>, SimError> {
        if self.aborted {
            return Err(SimError::Aborted);
        }
        let Some(((at, seq), event)) = self.queue.pop_first() else {
            return Ok(None);
        };
        debug_assert!(at >= self.now, "event scheduled in the past");
        self.now = at;
        self.stats.events += 1;
        match event {
            Event::Deliver { from, to, incarnation, msg } => {
                let slot = &self.slots[to.index()];
                if !slot.online || slot.incarnation != incarnation || self.separated(from, to) {
                    self.stats.dropped_at_delivery += 1;
                    self.record_trace_seq(seq, || format!("drop {from}->{to} {msg:?}"));
                    return Ok(Some(at));
                }
                self.record_trace_seq(seq, || format!("deliver {from}->{to} {msg:?}"));
                self.invoke(to, |p, ctx| p.on_message(ctx, from, msg))?;
            }
            Event::Timer { node, incarnation, timer } => {
                let slot = &self.slots[node.index()];
                if !slot.online || slot.incarnation != incarnation {
                    return Ok(Some(at));
                }
                self.record_trace_seq(seq, || format!("timer {node} {timer:?}"));
                self.invoke(node, |p, ctx| p.on_timer(ctx, timer))?;
            }
            Event::Fault(action) => self.apply_fault(action)?,
        }
        Ok(Some(at))
    }

    fn push(&mut self, at: SimTime, event: Event<P::Msg, P::Timer>) {
        self.queue.insert((at, self.seq), event);
        self.seq += 1;
    }

    fn record_trace(&mut self, text: String) {
        let seq = self.seq;
        self.record_trace_seq(seq, || text);
    }

    fn record_trace_seq(&mut self, seq: u64, text: impl FnOnce() -> String) {
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceRecord { time: self.now, seq, text: text() });
        }
    }

    fn invoke<R>(
        &mut self,
        id: NodeId,
        f: impl FnOnce(&mut P, &mut Ctx<'_, P::Msg, P::Timer>) -> R,
    ) -> Result<R, SimError> {
        let mut effects = std::mem::take(&mut self.effects);
        let now = self.now;
        let slot = &mut self.slots[id.index()];
        let result = {
            let mut ctx = Ctx {
                now,
                me: id,
                rng: &mut self.node_rng,
                effects: &mut effects,
                metrics: &mut self.metrics,
            };
            let process = &mut slot.process;
            panic::catch_unwind(AssertUnwindSafe(|| f(process, &mut ctx)))
        };
        let result = match result {
            Ok(r) => r,
            Err(payload) => {
                self.aborted = true;
                let message = payload
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| payload.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "non-string panic payload".to_string());
                return Err(SimError::HandlerPanic { time: now, node: id, message });
            }
        };
        for effect in effects.drain(..) {
            match effect {
                Effect::Send(to, msg) => self.enqueue_send(id, to, msg),
                Effect::Timer(after, timer) => {
                    let incarnation = self.slots[id.index()].incarnation;
                    self.push(now.after(after), Event::Timer { node: id, incarnation, timer });
                }
            }
        }
        self.effects = effects;
        Ok(result)
    }

    fn enqueue_send(&mut self, from: NodeId, to: NodeId, msg: P::Msg) {
        let receiver = &self.slots[to.index()];
        if !self.slots[from.index()].online || !receiver.online || self.separated(from, to) {
            self.stats.dropped_at_send += 1;
            return;
        }
        let incarnation = receiver.incarnation;
        let delay = self.latency.sample(from, to, &mut self.net_rng);
        self.stats.sent += 1;
        self.push(self.now.after(delay), Event::Deliver { from, to, incarnation, msg });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Echo node: replies to pings, logs everything it sees.
    #[derive(Default)]
    struct Echo {
        seen: Vec<(SimTime, String)>,
        volatile: u32,
    }

    #[derive(Clone, Debug)]
    enum Msg {
        Ping(u32),
        #[allow(dead_code)] // only read through Debug
        Pong(u32),
    }

    impl Process for Echo {
        type Msg = Msg;
        type Timer = u32;

        fn on_message(&mut self, ctx: &mut Ctx<'_, Msg, u32>, from: NodeId, msg: Msg) {
            self.seen.push((ctx.now(), format!("{msg:?}")));
            self.volatile += 1;
            if let Msg::Ping(x) = msg {
                ctx.send(from, Msg::Pong(x));
            }
        }

        fn on_timer(&mut self, ctx: &mut Ctx<'_, Msg, u32>, timer: u32) {
            self.seen.push((ctx.now(), format!("timer {timer}")));
        }

        fn on_crash(&mut self) {
            self.volatile = 0;
        }
    }

    fn pair(latency: f64, jitter: f64) -> Simulation<Echo> {
        let lat = LatencyModel::new(vec![vec![0.0, latency], vec![latency, 0.0]], jitter, 5).unwrap();
        Simulation::new(vec![Echo::default(), Echo::default()], lat, 1)
    }

    #[test]
    fn zero_jitter_delivery_time() {
        let mut sim = pair(10.0, 0.0);
        sim.run_until(SimTime(3)).unwrap();
        sim.with_node(NodeId(0), |_, ctx| ctx.send(NodeId(1), Msg::Ping(1)));
        sim.run_until(SimTime(100)).unwrap();
        assert_eq!(sim.node(NodeId(1)).seen, vec![(SimTime(13), "Ping(1)".to_string())]);
        assert_eq!(sim.node(NodeId(0)).seen, vec![(SimTime(23), "Pong(1)".to_string())]);
    }

    #[test]
    fn crashed_receiver_gets_nothing() {
        let mut sim = pair(10.0, 0.0);
        sim.crash(NodeId(1));
        sim.with_node(NodeId(0), |_, ctx| ctx.send(NodeId(1), Msg::Ping(1)));
        assert_eq!(sim.pending_events(), 0);
        assert_eq!(sim.stats().dropped_at_send, 1);
    }

    #[test]
    fn crash_mid_flight_and_restart_clears_inbox() {
        let mut sim = pair(10.0, 0.0);
        sim.with_node(NodeId(0), |_, ctx| ctx.send(NodeId(1), Msg::Ping(1)));
        sim.with_node(NodeId(1), |_, ctx| ctx.set_timer(20, 7));
        sim.run_until(SimTime(5)).unwrap();
        sim.crash(NodeId(1));
        sim.restart(NodeId(1)).unwrap();
        sim.run_until(SimTime(50)).unwrap();
        assert!(sim.node(NodeId(1)).seen.is_empty());
        assert_eq!(sim.stats().dropped_at_delivery, 1);
    }

    #[test]
    fn partition_blocks_both_ways() {
        let mut sim = pair(10.0, 0.0);
        sim.apply_fault(FaultAction::Partition { a: vec![NodeId(0)], b: vec![NodeId(1)] }).unwrap();
        sim.with_node(NodeId(1), |_, ctx| ctx.send(NodeId(0), Msg::Ping(1)));
        assert_eq!(sim.pending_events(), 0);
        sim.apply_fault(FaultAction::Heal).unwrap();
        sim.with_node(NodeId(1), |_, ctx| ctx.send(NodeId(0), Msg::Ping(2)));
        assert_eq!(sim.pending_events(), 1);
    }

    #[test]
    fn empty_queue_advances_clock() {
        let mut sim = pair(10.0, 0.0);
        assert_eq!(sim.run_until(SimTime(500)).unwrap(), 0);
        assert_eq!(sim.now(), SimTime(500));
        assert!(matches!(sim.run_until(SimTime(10)), Err(SimError::TimeReversal { .. })));
    }

    #[test]
    fn same_tick_events_fifo_and_reproducible() {
        let run = || {
            let mut sim = pair(10.0, 0.3);
            sim.enable_trace();
            sim.with_node(NodeId(0), |_, ctx| {
                ctx.set_timer(5, 1);
                ctx.set_timer(5, 2);
                for i in 0..20 {
                    ctx.send(NodeId(1), Msg::Ping(i));
                }
            });
            sim.run_until(SimTime(1000)).unwrap();
            sim.trace().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        let timers: Vec<_> = a.iter().filter(|r| r.text.starts_with("timer")).collect();
        assert_eq!(timers[0].text, "timer n0 1");
        assert_eq!(timers[1].text, "timer n0 2");
        assert!(timers[0].seq < timers[1].seq);
    }

    #[test]
    fn scheduled_crash_takes_effect() {
        let mut sim = pair(10.0, 0.0);
        sim.load_faults(
            &FaultSchedule::new(vec![(SimTime(30), FaultAction::Crash { node: NodeId(1) })]).unwrap(),
        );
        sim.run_until(SimTime(29)).unwrap();
        assert!(sim.is_online(NodeId(1)));
        sim.run_until(SimTime(30)).unwrap();
        assert!(!sim.is_online(NodeId(1)));
    }

    struct Bomb;
    impl Process for Bomb {
        type Msg = ();
        type Timer = ();
        fn on_message(&mut self, _: &mut Ctx<'_, (), ()>, _: NodeId, _: ()) {}
        fn on_timer(&mut self, _: &mut Ctx<'_, (), ()>, _: ()) {
            panic!("boom");
        }
    }

    #[test]
    fn handler_panic_aborts_with_diagnostic() {
        let mut sim = Simulation::new(vec![Bomb], LatencyModel::uniform(1, 1.0), 0);
        sim.with_node(NodeId(0), |_, ctx| ctx.set_timer(4, ()));
        let err = sim.run_until(SimTime(10)).unwrap_err();
        assert_eq!(
            err,
            SimError::HandlerPanic { time: SimTime(4), node: NodeId(0), message: "boom".into() }
        );
        assert_eq!(sim.run_until(SimTime(20)).unwrap_err(), SimError::Aborted);
    }
}
