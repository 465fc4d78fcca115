use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Instant;

use parking_lot::Mutex;

use super::operator::{Failure, Output};
use super::{Completed, Emitter, Event, Payload, PipelineError, PipelineGraph, StageTiming, Submission};

/// Synchronous batch-at-a-time baseline over a linear chain.
///
/// Each worker takes `batch_size` requests and walks them through every stage
/// together: a stage starts only after the previous stage has finished the
/// whole batch, so one slow request holds up its batch mates.
pub struct LegacyRunner<P: Payload> {
    graph: Arc<PipelineGraph<P>>,
    chain: Vec<usize>,
    workers: usize,
    batch_size: usize,
}

impl<P: Payload> LegacyRunner<P> {
    pub fn new(graph: Arc<PipelineGraph<P>>, workers: usize, batch_size: usize) -> Result<Self, PipelineError> {
        if workers == 0 || batch_size == 0 {
            return Err(PipelineError::InvalidConfig(
                "legacy runner needs positive workers and batch_size".into(),
            ));
        }
        let n = graph.len();
        let linear = (0..n).all(|i| graph.successors[i].len() <= 1 && graph.predecessors[i].len() <= 1);
        let sources: Vec<usize> = (0..n).filter(|&i| graph.predecessors[i].is_empty()).collect();
        if !linear || sources.len() != 1 {
            return Err(PipelineError::InvalidConfig(
                "legacy runner only supports a linear chain".into(),
            ));
        }
        let mut chain = vec![sources[0]];
        while let Some(&next) = graph.successors[*chain.last().unwrap()].first() {
            chain.push(next);
        }
        Ok(Self {
            graph,
            chain,
            workers,
            batch_size,
        })
    }

    /// Runs every submission to completion; outcomes are in input order.
    pub fn run(&self, submissions: Vec<Submission<P>>) -> Vec<Result<Completed<P>, PipelineError>> {
        let total = submissions.len();
        let queue: Mutex<VecDeque<(usize, Submission<P>)>> =
            Mutex::new(submissions.into_iter().enumerate().collect());
        let results: Mutex<Vec<Option<Result<Completed<P>, PipelineError>>>> =
            Mutex::new((0..total).map(|_| None).collect());
        std::thread::scope(|s| {
            for _ in 0..self.workers {
                s.spawn(|| loop {
                    let batch: Vec<(usize, Submission<P>)> = {
                        let mut q = queue.lock();
                        let k = self.batch_size.min(q.len());
                        q.drain(..k).collect()
                    };
                    if batch.is_empty() {
                        break;
                    }
                    for (idx, outcome) in self.run_batch(batch) {
                        results.lock()[idx] = Some(outcome);
                    }
                });
            }
        });
        results
            .into_inner()
            .into_iter()
            .map(|r| r.unwrap_or(Err(PipelineError::Closed)))
            .collect()
    }

    fn run_batch(&self, batch: Vec<(usize, Submission<P>)>) -> Vec<(usize, Result<Completed<P>, PipelineError>)> {
        let mut done = Vec::with_capacity(batch.len());
        let mut events: Vec<Event<P>> = Vec::with_capacity(batch.len());
        for (idx, sub) in batch {
            if sub.deadline.is_some_and(|d| Instant::now() >= d) {
                let err = PipelineError::DeadlineExceeded {
                    request_id: sub.request_id,
                    stage: None,
                };
                done.push((idx, Err(err)));
                continue;
            }
            events.push(Event::new(idx as u64, sub.request_id, sub.tenant, sub.deadline, sub.payload));
        }
        for (pos, &stage) in self.chain.iter().enumerate() {
            if events.is_empty() {
                break;
            }
            let proc = &self.graph.processors[stage];
            let start = Instant::now();
            for ev in events.iter_mut() {
                ev.trace.push(StageTiming {
                    stage: proc.id.clone(),
                    enqueued_us: ev.since_submit_us(ev.enqueued),
                    started_us: ev.since_submit_us(start),
                    finished_us: 0,
                });
            }
            let tickets: Vec<(u64, u64)> = events.iter().map(|e| (e.ticket, e.request_id)).collect();
            let mut em = Emitter::default();
            let result = proc.operator.process(std::mem::take(&mut events), &mut em);
            let finished = Instant::now();
            let last = pos + 1 == self.chain.len();
            let mut seen = Vec::new();
            for out in em.outputs {
                let (mut ev, fail) = match out {
                    Output::Forward(e) | Output::To(_, e) => (e, None),
                    Output::Complete(e) => {
                        seen.push(e.ticket);
                        done.push((e.ticket as usize, Ok(completed(e))));
                        continue;
                    }
                    Output::Fail(e, f) => (e, Some(f)),
                };
                seen.push(ev.ticket);
                let f = ev.since_submit_us(finished);
                if let Some(t) = ev.trace.last_mut() {
                    t.finished_us = f.max(t.started_us);
                }
                ev.enqueued = finished;
                match fail {
                    Some(f) => {
                        let err = match f {
                            Failure::Error(e) => e,
                            Failure::Message(message) => PipelineError::StageFailure {
                                request_id: ev.request_id,
                                stage: proc.id.clone(),
                                message,
                            },
                        };
                        done.push((ev.ticket as usize, Err(err)));
                    }
                    None if last => done.push((ev.ticket as usize, Ok(completed(ev)))),
                    None => events.push(ev),
                }
            }
            if let Err(e) = result {
                for (ticket, request_id) in tickets {
                    if !seen.contains(&ticket) {
                        done.push((
                            ticket as usize,
                            Err(PipelineError::StageFailure {
                                request_id,
                                stage: proc.id.clone(),
                                message: e.0.clone(),
                            }),
                        ));
                    }
                }
            }
        }
        done
    }
}

fn completed<P>(ev: Event<P>) -> Completed<P> {
    Completed {
        request_id: ev.request_id,
        tenant: ev.tenant,
        latency: ev.submitted.elapsed(),
        payload: ev.payload,
        trace: ev.trace,
    }
}
