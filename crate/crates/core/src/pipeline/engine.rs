use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, RecvTimeoutError, SendTimeoutError, Sender};
use parking_lot::Mutex;

use super::operator::{Failure, Output};
use super::{Completed, Emitter, Event, Payload, PipelineError, PipelineGraph, StageSnapshot, StageStats, StageTiming};
use crate::cpu::thread_cpu_time;

const IDLE_TICK: Duration = Duration::from_millis(20);
const SEND_RETRY: Duration = Duration::from_millis(50);

/// A request entering the pipeline.
#[derive(Debug, Clone)]
pub struct Submission<P> {
    pub request_id: u64,
    pub tenant: Option<String>,
    pub deadline: Option<Instant>,
    pub payload: P,
}

impl<P> Submission<P> {
    pub fn new(request_id: u64, payload: P) -> Self {
        Self {
            request_id,
            tenant: None,
            deadline: None,
            payload,
        }
    }

    pub fn with_deadline(mut self, deadline: Instant) -> Self {
        self.deadline = Some(deadline);
        self
    }

    pub fn with_timeout(self, timeout: Duration) -> Self {
        self.with_deadline(Instant::now() + timeout)
    }

    pub fn with_tenant(mut self, tenant: impl Into<String>) -> Self {
        self.tenant = Some(tenant.into());
        self
    }
}

type Callback<P> = Box<dyn FnOnce(Result<Completed<P>, PipelineError>) + Send>;

struct Shared<P: Payload> {
    graph: Arc<PipelineGraph<P>>,
    senders: Vec<Sender<Event<P>>>,
    receivers: Vec<Receiver<Event<P>>>,
    stats: Vec<StageStats>,
    pending: Mutex<HashMap<u64, Callback<P>>>,
    next_ticket: AtomicU64,
    shutdown: AtomicBool,
    submitted: AtomicU64,
    completed: AtomicU64,
    failed: AtomicU64,
    duplicate_outcomes: AtomicU64,
}

/// Running instance of a compiled graph.
pub struct Pipeline<P: Payload> {
    shared: Arc<Shared<P>>,
    workers: Vec<JoinHandle<()>>,
}

impl<P: Payload> Pipeline<P> {
    /// Creates the channels and spawns `parallelism` workers per processor.
    pub fn start(graph: Arc<PipelineGraph<P>>) -> Self {
        let (senders, receivers): (Vec<_>, Vec<_>) = graph
            .processors
            .iter()
            .map(|p| bounded(p.channel_capacity))
            .unzip();
        let shared = Arc::new(Shared {
            stats: graph.processors.iter().map(|_| StageStats::default()).collect(),
            graph,
            senders,
            receivers,
            pending: Mutex::new(HashMap::new()),
            next_ticket: AtomicU64::new(1),
            shutdown: AtomicBool::new(false),
            submitted: AtomicU64::new(0),
            completed: AtomicU64::new(0),
            failed: AtomicU64::new(0),
            duplicate_outcomes: AtomicU64::new(0),
        });
        let mut workers = Vec::new();
        for (i, p) in shared.graph.processors.iter().enumerate() {
            for w in 0..p.parallelism {
                let shared = Arc::clone(&shared);
                let handle = std::thread::Builder::new()
                    .name(format!("{}-{w}", p.id))
                    .spawn(move || worker_loop(&shared, i))
                    .expect("spawn stage worker");
                workers.push(handle);
            }
        }
        Self { shared, workers }
    }

    pub fn graph(&self) -> &Arc<PipelineGraph<P>> {
        &self.shared.graph
    }

    /// Enqueues a request; `done` receives its single terminal outcome.
    /// Blocks while the source channel is full.
    pub fn submit<F>(&self, submission: Submission<P>, done: F)
    where
        F: FnOnce(Result<Completed<P>, PipelineError>) + Send + 'static,
    {
        let sh = &self.shared;
        sh.submitted.fetch_add(1, Ordering::Relaxed);
        if sh.shutdown.load(Ordering::Acquire) {
            sh.failed.fetch_add(1, Ordering::Relaxed);
            done(Err(PipelineError::Closed));
            return;
        }
        if submission.deadline.is_some_and(|d| Instant::now() >= d) {
            sh.failed.fetch_add(1, Ordering::Relaxed);
            done(Err(PipelineError::DeadlineExceeded {
                request_id: submission.request_id,
                stage: None,
            }));
            return;
        }
        let ticket = sh.next_ticket.fetch_add(1, Ordering::Relaxed);
        sh.pending.lock().insert(ticket, Box::new(done));
        let ev = Event::new(
            ticket,
            submission.request_id,
            submission.tenant,
            submission.deadline,
            submission.payload,
        );
        let sources: Vec<usize> = (0..sh.graph.len())
            .filter(|&i| sh.graph.predecessors[i].is_empty())
            .collect();
        if sources.len() == 1 {
            sh.send(sources[0], ev);
        } else {
            let payloads = vec![ev.payload.clone(); sources.len()];
            for (src, frag) in sources.into_iter().zip(ev.split(payloads)) {
                sh.send(src, frag);
            }
        }
    }

    /// Submits and waits for the outcome.
    pub fn execute(&self, submission: Submission<P>) -> Result<Completed<P>, PipelineError> {
        let (tx, rx) = bounded(1);
        self.submit(submission, move |r| {
            let _ = tx.send(r);
        });
        rx.recv().unwrap_or(Err(PipelineError::Closed))
    }

    pub fn stage_stats(&self) -> Vec<StageSnapshot> {
        let sh = &self.shared;
        sh.graph
            .processors
            .iter()
            .enumerate()
            .map(|(i, p)| sh.stats[i].snapshot(&p.id, sh.receivers[i].len(), p.channel_capacity))
            .collect()
    }

    pub fn queue_depth(&self, stage: &str) -> Option<usize> {
        self.shared.graph.position(stage).map(|i| self.shared.receivers[i].len())
    }

    pub fn submitted(&self) -> u64 {
        self.shared.submitted.load(Ordering::Relaxed)
    }

    pub fn completed(&self) -> u64 {
        self.shared.completed.load(Ordering::Relaxed)
    }

    pub fn failed(&self) -> u64 {
        self.shared.failed.load(Ordering::Relaxed)
    }

    /// Outcomes reported for a request that had already finished, such as
    /// the surviving fragment of a request whose other branch failed. Never
    /// reaches the caller.
    pub fn duplicate_outcomes(&self) -> u64 {
        self.shared.duplicate_outcomes.load(Ordering::Relaxed)
    }

    pub fn in_flight(&self) -> usize {
        self.shared.pending.lock().len()
    }

    /// Stops the workers and fails every request still in flight with
    /// `Closed`.
    pub fn shutdown(&mut self) {
        let sh = Arc::clone(&self.shared);
        sh.shutdown.store(true, Ordering::Release);
        for h in self.workers.drain(..) {
            let _ = h.join();
        }
        for (i, p) in sh.graph.processors.iter().enumerate() {
            let mut em = Emitter::default();
            p.operator.drain(&mut em);
            for out in em.outputs {
                let ev = match out {
                    Output::Forward(e) | Output::To(_, e) | Output::Complete(e) | Output::Fail(e, _) => e,
                };
                sh.finish_err(ev.ticket, PipelineError::Closed);
            }
            while let Ok(ev) = sh.receivers[i].try_recv() {
                sh.finish_err(ev.ticket, PipelineError::Closed);
            }
        }
        let rest: Vec<Callback<P>> = sh.pending.lock().drain().map(|(_, cb)| cb).collect();
        for cb in rest {
            sh.failed.fetch_add(1, Ordering::Relaxed);
            cb(Err(PipelineError::Closed));
        }
    }
}

impl<P: Payload> Drop for Pipeline<P> {
    fn drop(&mut self) {
        if !self.workers.is_empty() {
            self.shutdown();
        }
    }
}

fn worker_loop<P: Payload>(sh: &Shared<P>, stage: usize) {
    let rx = &sh.receivers[stage];
    let batch_size = sh.graph.processors[stage].batch_size;
    while !sh.shutdown.load(Ordering::Acquire) {
        match rx.recv_timeout(IDLE_TICK) {
            Ok(first) => {
                let mut batch = Vec::with_capacity(batch_size);
                batch.push(first);
                while batch.len() < batch_size {
                    match rx.try_recv() {
                        Ok(ev) => batch.push(ev),
                        Err(_) => break,
                    }
                }
                sh.run_batch(stage, batch);
            }
            Err(RecvTimeoutError::Timeout) => {
                let mut em = Emitter::default();
                sh.graph.processors[stage].operator.tick(Instant::now(), &mut em);
                if !em.is_empty() {
                    sh.route(stage, em, Instant::now());
                }
            }
            Err(RecvTimeoutError::Disconnected) => break,
        }
    }
}

impl<P: Payload> Shared<P> {
    fn send(&self, stage: usize, mut ev: Event<P>) {
        ev.enqueued = Instant::now();
        let tx = &self.senders[stage];
        loop {
            match tx.send_timeout(ev, SEND_RETRY) {
                Ok(()) => {
                    self.stats[stage].observe_depth(tx.len());
                    return;
                }
                Err(SendTimeoutError::Timeout(back)) | Err(SendTimeoutError::Disconnected(back)) => {
                    if self.shutdown.load(Ordering::Acquire) {
                        self.finish_err(back.ticket, PipelineError::Closed);
                        return;
                    }
                    ev = back;
                }
            }
        }
    }

    fn run_batch(&self, stage: usize, batch: Vec<Event<P>>) {
        let proc = &self.graph.processors[stage];
        let stats = &self.stats[stage];
        let start = Instant::now();
        stats.events_in.fetch_add(batch.len() as u64, Ordering::Relaxed);

        let mut live = Vec::with_capacity(batch.len());
        let mut meta = Vec::with_capacity(batch.len());
        for mut ev in batch {
            if ev.expired(start) {
                stats.failures.fetch_add(1, Ordering::Relaxed);
                let err = PipelineError::DeadlineExceeded {
                    request_id: ev.request_id,
                    stage: Some(proc.id.clone()),
                };
                self.finish_err(ev.ticket, err);
                continue;
            }
            ev.trace.push(StageTiming {
                stage: proc.id.clone(),
                enqueued_us: ev.since_submit_us(ev.enqueued),
                started_us: ev.since_submit_us(start),
                finished_us: 0,
            });
            meta.push((ev.ticket, ev.request_id, ev.enqueued));
            live.push(ev);
        }
        if live.is_empty() {
            return;
        }

        let cpu0 = thread_cpu_time();
        let mut em = Emitter::default();
        let result = proc.operator.process(live, &mut em);
        let finished = Instant::now();
        stats.add_cpu(thread_cpu_time().saturating_sub(cpu0), finished - start);
        stats.invocations.fetch_add(1, Ordering::Relaxed);
        for (_, _, enq) in &meta {
            stats.record_latency(finished.saturating_duration_since(*enq).as_micros() as u64);
        }

        if let Err(e) = result {
            let accounted: HashSet<u64> = em
                .outputs
                .iter()
                .map(|o| match o {
                    Output::Forward(e) | Output::To(_, e) | Output::Complete(e) | Output::Fail(e, _) => e.ticket,
                })
                .collect();
            for (ticket, request_id, _) in &meta {
                if !accounted.contains(ticket) {
                    stats.failures.fetch_add(1, Ordering::Relaxed);
                    self.finish_err(
                        *ticket,
                        PipelineError::StageFailure {
                            request_id: *request_id,
                            stage: proc.id.clone(),
                            message: e.0.clone(),
                        },
                    );
                }
            }
        }
        self.route(stage, em, finished);
    }

    fn route(&self, stage: usize, em: Emitter<P>, finished: Instant) {
        let proc = &self.graph.processors[stage];
        let stats = &self.stats[stage];
        let close = |ev: &mut Event<P>| {
            let f = ev.since_submit_us(finished);
            if let Some(t) = ev
                .trace
                .iter_mut()
                .rev()
                .find(|t| t.stage == proc.id && t.finished_us == 0)
            {
                t.finished_us = f.max(t.started_us);
            }
        };
        for out in em.outputs {
            match out {
                Output::Forward(mut ev) => {
                    close(&mut ev);
                    stats.events_out.fetch_add(1, Ordering::Relaxed);
                    let succ = &self.graph.successors[stage];
                    match succ.len() {
                        0 => self.finish_ok(ev),
                        1 => self.send(succ[0], ev),
                        k if ev.is_fragment() => {
                            stats.failures.fetch_add(1, Ordering::Relaxed);
                            let err = PipelineError::StageFailure {
                                request_id: ev.request_id,
                                stage: proc.id.clone(),
                                message: format!("cannot fan a fragment out to {k} successors"),
                            };
                            self.finish_err(ev.ticket, err);
                        }
                        k => {
                            let payloads = vec![ev.payload.clone(); k];
                            for (&next, frag) in succ.iter().zip(ev.split(payloads)) {
                                self.send(next, frag);
                            }
                        }
                    }
                }
                Output::To(target, mut ev) => {
                    close(&mut ev);
                    match self.graph.position(&target) {
                        Some(j) if self.graph.successors[stage].contains(&j) => {
                            stats.events_out.fetch_add(1, Ordering::Relaxed);
                            self.send(j, ev);
                        }
                        _ => {
                            stats.failures.fetch_add(1, Ordering::Relaxed);
                            let err = PipelineError::StageFailure {
                                request_id: ev.request_id,
                                stage: proc.id.clone(),
                                message: format!("{target:?} is not a successor"),
                            };
                            self.finish_err(ev.ticket, err);
                        }
                    }
                }
                Output::Complete(mut ev) => {
                    close(&mut ev);
                    stats.events_out.fetch_add(1, Ordering::Relaxed);
                    self.finish_ok(ev);
                }
                Output::Fail(mut ev, failure) => {
                    close(&mut ev);
                    stats.failures.fetch_add(1, Ordering::Relaxed);
                    let err = match failure {
                        Failure::Error(e) => e,
                        Failure::Message(message) => PipelineError::StageFailure {
                            request_id: ev.request_id,
                            stage: proc.id.clone(),
                            message,
                        },
                    };
                    self.finish_err(ev.ticket, err);
                }
            }
        }
    }

    fn finish_ok(&self, ev: Event<P>) {
        let cb = self.pending.lock().remove(&ev.ticket);
        match cb {
            Some(cb) => {
                self.completed.fetch_add(1, Ordering::Relaxed);
                cb(Ok(Completed {
                    request_id: ev.request_id,
                    tenant: ev.tenant,
                    latency: ev.submitted.elapsed(),
                    payload: ev.payload,
                    trace: ev.trace,
                }));
            }
            None => {
                self.duplicate_outcomes.fetch_add(1, Ordering::Relaxed);
            }
        }
    }

    fn finish_err(&self, ticket: u64, err: PipelineError) {
        let cb = self.pending.lock().remove(&ticket);
        match cb {
            Some(cb) => {
                self.failed.fetch_add(1, Ordering::Relaxed);
                cb(Err(err));
            }
            None => {
                self.duplicate_outcomes.fetch_add(1, Ordering::Relaxed);
            }
        }
    }
}
