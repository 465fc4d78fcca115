use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use arc_swap::ArcSwap;
use parking_lot::Mutex;
use serde::Deserialize;

use super::join::DEFAULT_JOIN_TIMEOUT;
use super::{dispatch_tenant, stable_hash64, Event, JoinBuffer, Payload, PipelineError, ProcessorConfig, TenantSplit};
use crate::cube::fnv1a64;

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
#[error("{0}")]
pub struct OperatorError(pub String);

impl OperatorError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

pub(crate) enum Output<P> {
    Forward(Event<P>),
    To(String, Event<P>),
    Complete(Event<P>),
    Fail(Event<P>, Failure),
}

pub(crate) enum Failure {
    Message(String),
    Error(PipelineError),
}

/// Collects what an operator invocation produced.
pub struct Emitter<P> {
    pub(crate) outputs: Vec<Output<P>>,
}

impl<P> Default for Emitter<P> {
    fn default() -> Self {
        Self { outputs: Vec::new() }
    }
}

impl<P> Emitter<P> {
    /// Sends to every successor. A sink completes the request instead.
    pub fn emit(&mut self, event: Event<P>) {
        self.outputs.push(Output::Forward(event));
    }

    /// Sends to one named successor.
    pub fn emit_to(&mut self, target: impl Into<String>, event: Event<P>) {
        self.outputs.push(Output::To(target.into(), event));
    }

    /// Finishes the request with this event's payload as the response.
    pub fn complete(&mut self, event: Event<P>) {
        self.outputs.push(Output::Complete(event));
    }

    /// Terminates the request with a stage failure.
    pub fn fail(&mut self, event: Event<P>, message: impl Into<String>) {
        self.outputs.push(Output::Fail(event, Failure::Message(message.into())));
    }

    pub fn fail_with(&mut self, event: Event<P>, error: PipelineError) {
        self.outputs.push(Output::Fail(event, Failure::Error(error)));
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

/// A unit of work run by a stage processor over a batch of events.
///
/// Every input event must end up emitted, completed or failed. Returning
/// `Err` fails every event of the batch that was not already accounted for.
pub trait Operator<P: Payload>: Send + Sync {
    fn process(&self, batch: Vec<Event<P>>, out: &mut Emitter<P>) -> Result<(), OperatorError>;

    /// Called periodically while the stage is idle.
    fn tick(&self, _now: Instant, _out: &mut Emitter<P>) {}

    /// Called once at shutdown to flush held events.
    fn drain(&self, _out: &mut Emitter<P>) {}
}

pub struct BuildContext<'a> {
    pub processor: &'a ProcessorConfig,
    pub tenants: Option<Arc<ArcSwap<TenantSplit>>>,
}

impl BuildContext<'_> {
    /// Deserialises the processor's `settings`, treating null as `{}`.
    pub fn settings<T: serde::de::DeserializeOwned>(&self) -> Result<T, String> {
        let value = if self.processor.settings.is_null() {
            serde_json::Value::Object(Default::default())
        } else {
            self.processor.settings.clone()
        };
        serde_json::from_value(value).map_err(|e| format!("settings of {}: {e}", self.processor.id))
    }
}

pub type OperatorFactory<P> =
    Arc<dyn Fn(&BuildContext<'_>) -> Result<Arc<dyn Operator<P>>, String> + Send + Sync>;

/// Operator kinds available to `compile`.
pub struct OperatorRegistry<P: Payload> {
    factories: HashMap<String, OperatorFactory<P>>,
}

impl<P: Payload> Default for OperatorRegistry<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P: Payload> Clone for OperatorRegistry<P> {
    fn clone(&self) -> Self {
        Self {
            factories: self.factories.clone(),
        }
    }
}

impl<P: Payload> OperatorRegistry<P> {
    /// Registry with the built-in kinds: `identity`, `join`, `dispatch`,
    /// `delay` and `fault`.
    pub fn new() -> Self {
        let mut r = Self {
            factories: HashMap::new(),
        };
        r.register("identity", |_| Ok(Arc::new(Identity) as Arc<dyn Operator<P>>));
        r.register("join", |ctx| {
            let timeout = ctx
                .processor
                .join_timeout_ms
                .map(Duration::from_millis)
                .unwrap_or(DEFAULT_JOIN_TIMEOUT);
            Ok(Arc::new(JoinOperator::new(ctx.processor.id.clone(), timeout)) as Arc<dyn Operator<P>>)
        });
        r.register("dispatch", |ctx| {
            let tenants = ctx
                .tenants
                .clone()
                .ok_or_else(|| "dispatch processor requires a tenants table".to_string())?;
            Ok(Arc::new(Dispatch { tenants }) as Arc<dyn Operator<P>>)
        });
        r.register("delay", |ctx| {
            let s: DelaySettings = ctx.settings()?;
            Ok(Arc::new(DelayOperator::from_settings(&ctx.processor.id, s)) as Arc<dyn Operator<P>>)
        });
        r.register("fault", |ctx| {
            let s: FaultSettings = ctx.settings()?;
            if s.every == 0 {
                return Err("fault.every must be positive".into());
            }
            Ok(Arc::new(Fault { every: s.every }) as Arc<dyn Operator<P>>)
        });
        r
    }

    pub fn register<F>(&mut self, kind: impl Into<String>, factory: F)
    where
        F: Fn(&BuildContext<'_>) -> Result<Arc<dyn Operator<P>>, String> + Send + Sync + 'static,
    {
        self.factories.insert(kind.into(), Arc::new(factory));
    }

    pub fn contains(&self, kind: &str) -> bool {
        self.factories.contains_key(kind)
    }

    pub fn kinds(&self) -> Vec<String> {
        let mut k: Vec<String> = self.factories.keys().cloned().collect();
        k.sort();
        k
    }

    pub(crate) fn factory(&self, kind: &str) -> Option<&OperatorFactory<P>> {
        self.factories.get(kind)
    }
}

struct Identity;

impl<P: Payload> Operator<P> for Identity {
    fn process(&self, batch: Vec<Event<P>>, out: &mut Emitter<P>) -> Result<(), OperatorError> {
        batch.into_iter().for_each(|e| out.emit(e));
        Ok(())
    }
}

struct JoinOperator<P> {
    stage: String,
    buffer: Mutex<JoinBuffer<P>>,
}

impl<P: Payload> JoinOperator<P> {
    fn new(stage: String, timeout: Duration) -> Self {
        Self {
            stage,
            buffer: Mutex::new(JoinBuffer::new(timeout)),
        }
    }

    fn fail_expired(&self, expired: Vec<Event<P>>, out: &mut Emitter<P>) {
        for ev in expired {
            let err = PipelineError::JoinTimeout {
                request_id: ev.request_id,
                stage: self.stage.clone(),
            };
            out.fail_with(ev, err);
        }
    }
}

impl<P: Payload> Operator<P> for JoinOperator<P> {
    fn process(&self, batch: Vec<Event<P>>, out: &mut Emitter<P>) -> Result<(), OperatorError> {
        let now = Instant::now();
        let mut buf = self.buffer.lock();
        for ev in batch {
            if let Some(merged) = buf.offer(ev, now) {
                out.emit(merged);
            }
        }
        let expired = buf.expire(now);
        drop(buf);
        self.fail_expired(expired, out);
        Ok(())
    }

    fn tick(&self, now: Instant, out: &mut Emitter<P>) {
        let expired = self.buffer.lock().expire(now);
        self.fail_expired(expired, out);
    }

    fn drain(&self, out: &mut Emitter<P>) {
        let held = self.buffer.lock().drain();
        for ev in held {
            out.fail_with(ev, PipelineError::Closed);
        }
    }
}

struct Dispatch {
    tenants: Arc<ArcSwap<TenantSplit>>,
}

impl<P: Payload> Operator<P> for Dispatch {
    fn process(&self, batch: Vec<Event<P>>, out: &mut Emitter<P>) -> Result<(), OperatorError> {
        let split = self.tenants.load();
        for ev in batch {
            if split.weights.is_empty() {
                out.fail_with(ev, PipelineError::NoTenants);
                continue;
            }
            match dispatch_tenant(ev.clone(), &split) {
                Ok((tagged, entry)) => out.emit_to(entry, tagged),
                Err(e) => out.fail_with(ev, e),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct DelaySettings {
    pub base_us: u64,
    pub slow_factor: u64,
    pub slow_fraction: f64,
    pub seed: Option<u64>,
}

impl Default for DelaySettings {
    fn default() -> Self {
        Self {
            base_us: 1000,
            slow_factor: 50,
            slow_fraction: 0.01,
            seed: None,
        }
    }
}

/// Simulated remote call: each event has a service time fixed by its
/// request id, and one invocation sleeps for the slowest event in its batch.
#[derive(Debug, Clone)]
pub struct DelayOperator {
    base: Duration,
    slow: Duration,
    slow_fraction: f64,
    seed: u64,
}

impl DelayOperator {
    pub fn from_settings(stage: &str, s: DelaySettings) -> Self {
        Self {
            base: Duration::from_micros(s.base_us),
            slow: Duration::from_micros(s.base_us * s.slow_factor.max(1)),
            slow_fraction: s.slow_fraction.clamp(0.0, 1.0),
            seed: s.seed.unwrap_or_else(|| fnv1a64(stage.as_bytes())),
        }
    }

    pub fn service_time(&self, request_id: u64) -> Duration {
        let u = (stable_hash64(request_id ^ self.seed) >> 11) as f64 / (1u64 << 53) as f64;
        if u < self.slow_fraction {
            self.slow
        } else {
            self.base
        }
    }
}

impl<P: Payload> Operator<P> for DelayOperator {
    fn process(&self, batch: Vec<Event<P>>, out: &mut Emitter<P>) -> Result<(), OperatorError> {
        let wait = batch
            .iter()
            .map(|e| self.service_time(e.request_id))
            .max()
            .unwrap_or_default();
        std::thread::sleep(wait);
        batch.into_iter().for_each(|e| out.emit(e));
        Ok(())
    }
}

#[derive(Debug, Clone, Deserialize)]
struct FaultSettings {
    every: u64,
}

/// Fails requests whose id is a multiple of `every`; passes the rest.
struct Fault {
    every: u64,
}

impl<P: Payload> Operator<P> for Fault {
    fn process(&self, batch: Vec<Event<P>>, out: &mut Emitter<P>) -> Result<(), OperatorError> {
        for ev in batch {
            if ev.request_id % self.every == 0 {
                out.fail(ev, "injected fault");
            } else {
                out.emit(ev);
            }
        }
        Ok(())
    }
}
