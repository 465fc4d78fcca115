use std::collections::{BTreeMap, HashMap};
use std::time::{Duration, Instant};

use super::{Event, Payload};

pub const DEFAULT_JOIN_TIMEOUT: Duration = Duration::from_secs(1);

struct PendingJoin<P> {
    first_seen: Instant,
    total: u32,
    fragments: BTreeMap<u32, Event<P>>,
}

/// Accumulates request fragments until all of them have arrived.
pub struct JoinBuffer<P> {
    timeout: Duration,
    pending: HashMap<u64, PendingJoin<P>>,
}

impl<P: Payload> JoinBuffer<P> {
    pub fn new(timeout: Duration) -> Self {
        Self {
            timeout,
            pending: HashMap::new(),
        }
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    /// Number of requests with fragments outstanding.
    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn contains(&self, request_id: u64) -> bool {
        self.pending
            .values()
            .any(|p| p.fragments.values().next().is_some_and(|e| e.request_id == request_id))
    }

    /// Adds a fragment; returns the merged event once the set is complete.
    /// Unfragmented events pass straight through. A repeated fragment index
    /// is ignored.
    pub fn offer(&mut self, event: Event<P>, now: Instant) -> Option<Event<P>> {
        if event.fragment_total <= 1 {
            return Some(event);
        }
        let ticket = event.ticket;
        let entry = self.pending.entry(ticket).or_insert_with(|| PendingJoin {
            first_seen: now,
            total: event.fragment_total,
            fragments: BTreeMap::new(),
        });
        entry.fragments.entry(event.fragment_index).or_insert(event);
        if entry.fragments.len() < entry.total as usize {
            return None;
        }
        let done = self.pending.remove(&ticket).expect("entry present");
        Some(merge(done.fragments))
    }

    /// Removes requests whose first fragment is older than the timeout and
    /// returns one representative event for each, for error reporting.
    pub fn expire(&mut self, now: Instant) -> Vec<Event<P>> {
        let timeout = self.timeout;
        let stale: Vec<u64> = self
            .pending
            .iter()
            .filter(|(_, p)| now.saturating_duration_since(p.first_seen) >= timeout)
            .map(|(t, _)| *t)
            .collect();
        stale
            .into_iter()
            .filter_map(|t| self.pending.remove(&t))
            .filter_map(|p| p.fragments.into_values().next())
            .collect()
    }

    /// Drops everything, returning one event per abandoned request.
    pub fn drain(&mut self) -> Vec<Event<P>> {
        self.pending
            .drain()
            .filter_map(|(_, p)| p.fragments.into_values().next())
            .collect()
    }
}

fn merge<P: Payload>(fragments: BTreeMap<u32, Event<P>>) -> Event<P> {
    let mut iter = fragments.into_values();
    let first = iter.next().expect("at least one fragment");
    let mut trace = first.trace.clone();
    let mut payloads = vec![first.payload.clone()];
    for ev in iter {
        for t in ev.trace {
            if !trace.contains(&t) {
                trace.push(t);
            }
        }
        payloads.push(ev.payload);
    }
    let mut merged = first.with_payload(P::merge(payloads));
    merged.fragment_index = 0;
    merged.fragment_total = 1;
    merged.trace = trace;
    merged
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fragments(ticket: u64, n: u32) -> Vec<Event<Vec<u32>>> {
        Event::new(ticket, ticket, None, None, vec![])
            .split((0..n).map(|i| vec![i * 10, i * 10 + 1]).collect())
    }

    #[test]
    fn fires_once_all_fragments_arrive() {
        let mut jb = JoinBuffer::new(DEFAULT_JOIN_TIMEOUT);
        let now = Instant::now();
        let mut frags = fragments(7, 3);
        let last = frags.pop().unwrap();
        for f in frags {
            assert!(jb.offer(f, now).is_none());
        }
        let merged = jb.offer(last, now).unwrap();
        assert_eq!(merged.payload, vec![0, 1, 10, 11, 20, 21]);
        assert_eq!(merged.fragment_total, 1);
        assert!(jb.is_empty());
    }

    #[test]
    fn stale_fragments_expire() {
        let mut jb = JoinBuffer::new(Duration::from_millis(10));
        let now = Instant::now();
        let mut frags = fragments(1, 2);
        jb.offer(frags.remove(0), now);
        assert!(jb.expire(now + Duration::from_millis(5)).is_empty());
        let expired = jb.expire(now + Duration::from_millis(10));
        assert_eq!(expired.len(), 1);
        assert!(jb.is_empty());
    }

    #[test]
    fn unfragmented_passes_through() {
        let mut jb = JoinBuffer::new(DEFAULT_JOIN_TIMEOUT);
        let ev = Event::new(1, 1, None, None, vec![5u32]);
        assert_eq!(jb.offer(ev, Instant::now()).unwrap().payload, vec![5]);
    }

    proptest::proptest! {
        #[test]
        fn merge_is_arrival_order_insensitive(
            n in 2u32..7,
            perm_seed in proptest::collection::vec(0u32..1000, 7),
        ) {
            let now = Instant::now();
            let mut order: Vec<usize> = (0..n as usize).collect();
            order.sort_by_key(|&i| perm_seed[i]);
            let mut jb = JoinBuffer::new(DEFAULT_JOIN_TIMEOUT);
            let mut frags: Vec<Option<Event<Vec<u32>>>> = fragments(3, n).into_iter().map(Some).collect();
            let mut merged = None;
            for (k, &i) in order.iter().enumerate() {
                let out = jb.offer(frags[i].take().unwrap(), now);
                proptest::prop_assert_eq!(out.is_some(), k + 1 == n as usize);
                merged = merged.or(out);
            }
            let expected: Vec<u32> = (0..n).flat_map(|i| [i * 10, i * 10 + 1]).collect();
            proptest::prop_assert_eq!(merged.unwrap().payload, expected);
            proptest::prop_assert!(jb.is_empty());
        }
    }
}
