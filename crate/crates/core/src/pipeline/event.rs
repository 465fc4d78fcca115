use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

/// Data carried between stages. `merge` recombines the fragments of one
/// request at a join; fragments arrive in `fragment_index` order.
pub trait Payload: Clone + Send + 'static {
    fn merge(fragments: Vec<Self>) -> Self;
}

impl Payload for () {
    fn merge(_: Vec<Self>) -> Self {}
}

impl Payload for u64 {
    fn merge(fragments: Vec<Self>) -> Self {
        fragments.into_iter().fold(0, u64::wrapping_add)
    }
}

impl<T: Clone + Send + 'static> Payload for Vec<T> {
    fn merge(fragments: Vec<Self>) -> Self {
        fragments.into_iter().flatten().collect()
    }
}

/// One stage visit, in microseconds since the request was submitted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub enqueued_us: u64,
    pub started_us: u64,
    pub finished_us: u64,
}

impl StageTiming {
    pub fn queue_wait_us(&self) -> u64 {
        self.started_us.saturating_sub(self.enqueued_us)
    }

    pub fn service_us(&self) -> u64 {
        self.finished_us.saturating_sub(self.started_us)
    }
}

#[derive(Debug, Clone)]
pub struct Event<P> {
    pub request_id: u64,
    pub tenant: Option<String>,
    pub fragment_index: u32,
    pub fragment_total: u32,
    pub deadline: Option<Instant>,
    pub payload: P,
    pub trace: Vec<StageTiming>,
    pub(crate) ticket: u64,
    pub(crate) submitted: Instant,
    pub(crate) enqueued: Instant,
}

impl<P> Event<P> {
    pub(crate) fn new(
        ticket: u64,
        request_id: u64,
        tenant: Option<String>,
        deadline: Option<Instant>,
        payload: P,
    ) -> Self {
        let now = Instant::now();
        Self {
            request_id,
            tenant,
            fragment_index: 0,
            fragment_total: 1,
            deadline,
            payload,
            trace: Vec::new(),
            ticket,
            submitted: now,
            enqueued: now,
        }
    }

    /// Event with the same request metadata and a different payload.
    pub fn with_payload<Q>(&self, payload: Q) -> Event<Q> {
        Event {
            request_id: self.request_id,
            tenant: self.tenant.clone(),
            fragment_index: self.fragment_index,
            fragment_total: self.fragment_total,
            deadline: self.deadline,
            payload,
            trace: self.trace.clone(),
            ticket: self.ticket,
            submitted: self.submitted,
            enqueued: self.enqueued,
        }
    }

    /// Splits into `payloads.len()` fragments that a downstream join will
    /// recombine.
    pub fn split(self, payloads: Vec<P>) -> Vec<Event<P>> {
        let total = payloads.len() as u32;
        payloads
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                let mut ev = self.with_payload(p);
                ev.fragment_index = i as u32;
                ev.fragment_total = total;
                ev
            })
            .collect()
    }

    pub fn is_fragment(&self) -> bool {
        self.fragment_total > 1
    }

    pub fn expired(&self, now: Instant) -> bool {
        self.deadline.is_some_and(|d| now >= d)
    }

    /// Time since submission.
    pub fn age(&self) -> Duration {
        self.submitted.elapsed()
    }

    pub(crate) fn since_submit_us(&self, t: Instant) -> u64 {
        t.saturating_duration_since(self.submitted).as_micros() as u64
    }
}

/// Terminal successful outcome of a request.
#[derive(Debug, Clone)]
pub struct Completed<P> {
    pub request_id: u64,
    pub tenant: Option<String>,
    pub payload: P,
    pub trace: Vec<StageTiming>,
    pub latency: Duration,
}
