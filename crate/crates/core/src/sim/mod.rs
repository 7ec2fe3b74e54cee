//! Deterministic discrete-event engine.
//!
//! The engine owns every node, a virtual clock in milliseconds and a single
//! ordered event queue. Events at equal time run in the order they were
//! scheduled, so a run is fully determined by its configuration and seed.
//!
//! Protocols are written against the [`Env`] trait rather than the engine
//! itself, which lets a composed node hand a narrowed environment to each of
//! its sub-protocols (see [`Env::scoped`]).

mod engine;
mod fault;
mod latency;
mod metrics;

pub use engine::{Ctx, Process, SimError, Simulation, TraceRecord};
pub use fault::{FaultAction, FaultSchedule, FaultScheduleError};
pub use latency::{LatencyError, LatencyModel};
pub use metrics::{MetricRecord, MetricsSink};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::marker::PhantomData;

/// Virtual time in simulated milliseconds.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn ms(self) -> u64 {
        self.0
    }

    pub fn after(self, delay_ms: u64) -> SimTime {
        SimTime(self.0.saturating_add(delay_ms))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ms", self.0)
    }
}

/// Opaque simulator address of a node (the "physical address" of a peer).
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Side-effect interface a protocol handler sees.
///
/// Sends are fire-and-forget: the engine may silently drop them (crashed
/// receiver, partition), so callers that need an answer must arm a timer.
pub trait Env<M, T> {
    fn now(&self) -> SimTime;
    fn me(&self) -> NodeId;
    fn send(&mut self, to: NodeId, msg: M);
    fn set_timer(&mut self, after_ms: u64, timer: T);
    fn rng(&mut self) -> &mut ChaCha8Rng;
    fn metric(&mut self, name: &str, value: f64);

    /// Narrow this environment to a sub-protocol with its own message and
    /// timer types.
    fn scoped<M2, T2, FM, FT>(&mut self, wrap_msg: FM, wrap_timer: FT) -> Scoped<'_, Self, M, T, FM, FT>
    where
        Self: Sized,
        FM: Fn(M2) -> M,
        FT: Fn(T2) -> T,
    {
        Scoped {
            inner: self,
            wrap_msg,
            wrap_timer,
            _types: PhantomData,
        }
    }
}

/// An [`Env`] adapter produced by [`Env::scoped`].
pub struct Scoped<'a, E, M, T, FM, FT> {
    inner: &'a mut E,
    wrap_msg: FM,
    wrap_timer: FT,
    _types: PhantomData<fn() -> (M, T)>,
}

impl<E, M, T, M2, T2, FM, FT> Env<M2, T2> for Scoped<'_, E, M, T, FM, FT>
where
    E: Env<M, T>,
    FM: Fn(M2) -> M,
    FT: Fn(T2) -> T,
{
    fn now(&self) -> SimTime {
        self.inner.now()
    }

    fn me(&self) -> NodeId {
        self.inner.me()
    }

    fn send(&mut self, to: NodeId, msg: M2) {
        let msg = (self.wrap_msg)(msg);
        self.inner.send(to, msg);
    }

    fn set_timer(&mut self, after_ms: u64, timer: T2) {
        let timer = (self.wrap_timer)(timer);
        self.inner.set_timer(after_ms, timer);
    }

    fn rng(&mut self) -> &mut ChaCha8Rng {
        self.inner.rng()
    }

    fn metric(&mut self, name: &str, value: f64) {
        self.inner.metric(name, value);
    }
}
