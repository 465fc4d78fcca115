use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;

use super::payload::{group_of, ItemState, RankPayload, SignedGroups};
use super::ModelBundle;
use crate::cpu::spin_cpu;
use crate::cube::{sign_str, FeatureSignature};
use crate::pipeline::{Emitter, Event, Operator, OperatorError, OperatorRegistry};
use crate::request::{ScoredItem, ShedItem};
use crate::scorer::{assemble_signed, FeatureGroups};
use crate::cache::QueryCache;
use crate::shedding::{shed, CutoffTracker, OverloadDetector, PruningModel, SheddingFeatures};

/// Counters shared by the serving operators.
#[derive(Debug, Default)]
pub struct ServingCounters {
    pub scorer_items: AtomicU64,
    pub scorer_batches: AtomicU64,
    pub mixed_generation_batches: AtomicU64,
    pub shed_items: AtomicU64,
    pub query_cache_hits: AtomicU64,
    pub cube_invocations: AtomicU64,
}

pub struct ShedState {
    pub model: Option<PruningModel>,
    pub detector: OverloadDetector,
    pub tracker: CutoffTracker,
    pub slate: usize,
}

/// State the operators reach through the registry closures.
pub struct OpContext {
    pub counters: Arc<ServingCounters>,
    pub query_cache: Option<Arc<QueryCache>>,
    pub shedding: Option<Arc<ShedState>>,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(default)]
struct Cost {
    /// Fixed CPU per operator invocation, microseconds.
    invocation_us: u64,
    /// CPU per request in the batch.
    request_us: u64,
    /// CPU per candidate item in the batch.
    item_us: u64,
    /// CPU per backing-cube fetch (cube stage only).
    fetch_us: u64,
}

impl Cost {
    fn charge(&self, requests: usize, items: usize) {
        let us = self.invocation_us + self.request_us * requests as u64 + self.item_us * items as u64;
        spin_cpu(Duration::from_micros(us));
    }
}

fn missing(ev: Event<RankPayload>, out: &mut Emitter<RankPayload>, what: &str) {
    out.fail(ev, format!("payload has no {what}"));
}

fn sign_groups(groups: &FeatureGroups, keep: &std::collections::BTreeSet<String>) -> SignedGroups {
    groups
        .iter()
        .filter(|(g, _)| keep.contains(*g))
        .map(|(g, raw)| (g.clone(), raw.iter().map(|f| sign_str(f)).collect()))
        .collect()
}

struct UserFeatures(Cost);

impl Operator<RankPayload> for UserFeatures {
    fn process(&self, batch: Vec<Event<RankPayload>>, out: &mut Emitter<RankPayload>) -> Result<(), OperatorError> {
        self.0.charge(batch.len(), 0);
        for mut ev in batch {
            let (Some(req), Some(bundle)) = (&ev.payload.request, &ev.payload.bundle) else {
                missing(ev, out, "request");
                continue;
            };
            ev.payload.user = Some(sign_groups(&req.user_features, &bundle.groups));
            out.emit(ev);
        }
        Ok(())
    }
}

struct ItemFeatures(Cost);

impl Operator<RankPayload> for ItemFeatures {
    fn process(&self, batch: Vec<Event<RankPayload>>, out: &mut Emitter<RankPayload>) -> Result<(), OperatorError> {
        let items: usize = batch
            .iter()
            .map(|e| e.payload.request.as_ref().map_or(0, |r| r.candidates.len()))
            .sum();
        self.0.charge(batch.len(), items);
        for mut ev in batch {
            let (Some(req), Some(bundle)) = (&ev.payload.request, &ev.payload.bundle) else {
                missing(ev, out, "request");
                continue;
            };
            let items = req
                .candidates
                .iter()
                .enumerate()
                .map(|(index, c)| ItemState {
                    index,
                    item: c.item,
                    escore: c.escore,
                    groups: sign_groups(&c.features, &bundle.groups),
                })
                .collect();
            ev.payload.items = Some(items);
            out.emit(ev);
        }
        Ok(())
    }
}

/// Orders candidates by estimated score, descending and stable.
struct ItemProcess(Cost);

impl Operator<RankPayload> for ItemProcess {
    fn process(&self, batch: Vec<Event<RankPayload>>, out: &mut Emitter<RankPayload>) -> Result<(), OperatorError> {
        let items: usize = batch.iter().map(|e| e.payload.items.as_ref().map_or(0, Vec::len)).sum();
        self.0.charge(batch.len(), items);
        for mut ev in batch {
            let Some(items) = ev.payload.items.as_mut() else {
                missing(ev, out, "items");
                continue;
            };
            items.sort_by(|a, b| b.escore.total_cmp(&a.escore));
            out.emit(ev);
        }
        Ok(())
    }
}

struct Shed {
    state: Option<Arc<ShedState>>,
    counters: Arc<ServingCounters>,
}

impl Operator<RankPayload> for Shed {
    fn process(&self, batch: Vec<Event<RankPayload>>, out: &mut Emitter<RankPayload>) -> Result<(), OperatorError> {
        let Some(st) = &self.state else {
            batch.into_iter().for_each(|e| out.emit(e));
            return Ok(());
        };
        for mut ev in batch {
            let Some(items) = ev.payload.items.as_mut() else {
                missing(ev, out, "items");
                continue;
            };
            let n = items.len();
            let rate = st.detector.arrive(ev.payload.now);
            let overloaded = st.detector.overloaded(rate);
            let escores: Vec<f32> = items.iter().map(|i| i.escore).collect();
            let qid = ev.tenant.as_deref().map_or(0, |t| crate::cube::fnv1a64(t.as_bytes()));
            let features = SheddingFeatures::from_escores(st.detector.quota(rate), st.tracker.previous(), qid, &escores);
            let keep = match &st.model {
                Some(m) => shed(m, &features, n, st.slate, overloaded).keep,
                None => n,
            };
            st.tracker.record(if n == 0 { 0.0 } else { 1.0 - keep as f64 / n as f64 });
            if keep < n {
                let cut = items.split_off(keep);
                self.counters.shed_items.fetch_add(cut.len() as u64, Ordering::Relaxed);
                ev.payload.shed.extend(cut.into_iter().map(|i| ShedItem {
                    item: i.item,
                    escore: i.escore,
                }));
            }
            out.emit(ev);
        }
        Ok(())
    }
}

struct QueryLookup {
    cache: Option<Arc<QueryCache>>,
    counters: Arc<ServingCounters>,
}

impl Operator<RankPayload> for QueryLookup {
    fn process(&self, batch: Vec<Event<RankPayload>>, out: &mut Emitter<RankPayload>) -> Result<(), OperatorError> {
        let Some(cache) = &self.cache else {
            batch.into_iter().for_each(|e| out.emit(e));
            return Ok(());
        };
        for mut ev in batch {
            let (Some(req), Some(items)) = (ev.payload.request.clone(), ev.payload.items.take()) else {
                missing(ev, out, "items");
                continue;
            };
            let gen = ev.payload.generation();
            let now = ev.payload.now;
            let mut pending = Vec::with_capacity(items.len());
            for it in items {
                match cache.get(req.user, it.item, gen, now) {
                    Some(score) => {
                        self.counters.query_cache_hits.fetch_add(1, Ordering::Relaxed);
                        ev.payload.scored.push((
                            it.index,
                            ScoredItem {
                                item: it.item,
                                score,
                                cache_hit: true,
                                heads: BTreeMap::new(),
                            },
                        ));
                    }
                    None => pending.push(it),
                }
            }
            ev.payload.items = Some(pending);
            out.emit(ev);
        }
        Ok(())
    }
}

fn same_bundle(a: &Arc<ModelBundle>, b: &Arc<ModelBundle>) -> bool {
    Arc::ptr_eq(a, b)
}

/// Splits a batch into runs that share one bundle, keeping batch order
/// inside each run.
fn by_bundle(batch: Vec<Event<RankPayload>>) -> (Vec<(Arc<ModelBundle>, Vec<Event<RankPayload>>)>, Vec<Event<RankPayload>>) {
    let mut groups: Vec<(Arc<ModelBundle>, Vec<Event<RankPayload>>)> = Vec::new();
    let mut orphans = Vec::new();
    for ev in batch {
        let Some(b) = ev.payload.bundle.clone() else {
            orphans.push(ev);
            continue;
        };
        match groups.iter_mut().find(|(g, _)| same_bundle(g, &b)) {
            Some((_, evs)) => evs.push(ev),
            None => groups.push((b, vec![ev])),
        }
    }
    (groups, orphans)
}

struct CubeFetch {
    cost: Cost,
    counters: Arc<ServingCounters>,
}

impl Operator<RankPayload> for CubeFetch {
    fn process(&self, batch: Vec<Event<RankPayload>>, out: &mut Emitter<RankPayload>) -> Result<(), OperatorError> {
        self.counters.cube_invocations.fetch_add(1, Ordering::Relaxed);
        spin_cpu(Duration::from_micros(self.cost.invocation_us));
        let (groups, orphans) = by_bundle(batch);
        orphans.into_iter().for_each(|e| missing(e, out, "model bundle"));
        for (bundle, evs) in groups {
            let mut keys: Vec<FeatureSignature> = Vec::new();
            let mut spans = Vec::with_capacity(evs.len());
            for ev in &evs {
                let start = keys.len();
                let pending = ev.payload.items.as_deref().unwrap_or(&[]);
                if !pending.is_empty() {
                    if let Some(user) = &ev.payload.user {
                        keys.extend(user.iter().flat_map(|(_, s)| s.iter().copied()));
                    }
                    for it in pending {
                        keys.extend(it.groups.iter().flat_map(|(_, s)| s.iter().copied()));
                    }
                }
                spans.push(start..keys.len());
            }
            let got = match bundle.cache.get(&bundle.cube, &keys) {
                Ok(g) => g,
                Err(e) => {
                    let msg = e.to_string();
                    evs.into_iter().for_each(|ev| out.fail(ev, msg.clone()));
                    continue;
                }
            };
            spin_cpu(Duration::from_micros(self.cost.fetch_us * got.backing_fetches as u64));
            let mut values = got.values;
            for (mut ev, span) in evs.into_iter().zip(spans) {
                let mut params = HashMap::with_capacity(span.len());
                for (k, v) in keys[span.clone()].iter().zip(values[span].iter_mut()) {
                    if let Some(p) = v.take() {
                        params.entry(*k).or_insert(p.embedding);
                    }
                }
                ev.payload.params = Some(Arc::new(params));
                out.emit(ev);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default)]
pub struct DnnSettings {
    pub invocation_us: u64,
    /// Heads to run; empty runs the bundle's first head.
    pub heads: Vec<String>,
}

struct Dnn {
    settings: DnnSettings,
    cache: Option<Arc<QueryCache>>,
    counters: Arc<ServingCounters>,
}

impl Dnn {
    fn score_group(&self, bundle: &ModelBundle, evs: &mut [Event<RankPayload>]) -> Result<(), String> {
        let names: Vec<&str> = if self.settings.heads.is_empty() {
            vec![bundle.heads[0].name.as_str()]
        } else {
            self.settings.heads.iter().map(String::as_str).collect()
        };
        let dim = bundle.cube.embedding_dim();
        let empty = SignedGroups::new();
        let mut per_head: Vec<Vec<f32>> = Vec::with_capacity(names.len());
        for name in &names {
            let head = bundle.head(name).ok_or_else(|| format!("bundle has no head {name:?}"))?;
            if head.model.generation != bundle.generation
                || evs.iter().any(|e| e.payload.generation() != head.model.generation)
            {
                self.counters.mixed_generation_batches.fetch_add(1, Ordering::Relaxed);
                return Err("mixed model generations in one batch".into());
            }
            let mut inputs = Vec::new();
            let mut rows = 0usize;
            for ev in evs.iter() {
                let items = ev.payload.items.as_deref().unwrap_or(&[]);
                if items.is_empty() {
                    continue;
                }
                let user = ev.payload.user.as_ref().unwrap_or(&empty);
                let params = ev.payload.params.as_deref().ok_or("payload has no parameters")?;
                for it in items {
                    let x = assemble_signed(
                        |g| group_of(user, g).or_else(|| group_of(&it.groups, g)),
                        &head.slots,
                        dim,
                        |sig| params.get(&sig).map(Vec::as_slice),
                    )
                    .map_err(|e| e.to_string())?;
                    inputs.extend_from_slice(&x);
                    rows += 1;
                }
            }
            let scores = if rows == 0 {
                Vec::new()
            } else {
                self.counters.scorer_batches.fetch_add(1, Ordering::Relaxed);
                self.counters.scorer_items.fetch_add(rows as u64, Ordering::Relaxed);
                head.model.forward_batch(&inputs).map_err(|e| e.to_string())?
            };
            per_head.push(scores);
        }
        let mut row = 0usize;
        for ev in evs.iter_mut() {
            let items = ev.payload.items.take().unwrap_or_default();
            let user = ev.payload.request.as_ref().map_or(0, |r| r.user);
            for it in items {
                let score = per_head[0][row];
                let heads = if names.len() > 1 {
                    names.iter().zip(&per_head).map(|(n, s)| (n.to_string(), s[row])).collect()
                } else {
                    BTreeMap::new()
                };
                row += 1;
                if let Some(c) = &self.cache {
                    c.put(user, it.item, bundle.generation, score, ev.payload.now);
                }
                ev.payload.scored.push((
                    it.index,
                    ScoredItem {
                        item: it.item,
                        score,
                        cache_hit: false,
                        heads,
                    },
                ));
            }
            ev.payload.scored.sort_by_key(|(i, _)| *i);
            ev.payload.items = Some(Vec::new());
        }
        Ok(())
    }
}

impl Operator<RankPayload> for Dnn {
    fn process(&self, batch: Vec<Event<RankPayload>>, out: &mut Emitter<RankPayload>) -> Result<(), OperatorError> {
        spin_cpu(Duration::from_micros(self.settings.invocation_us));
        let (groups, orphans) = by_bundle(batch);
        orphans.into_iter().for_each(|e| missing(e, out, "model bundle"));
        for (bundle, mut evs) in groups {
            match self.score_group(&bundle, &mut evs) {
                Ok(()) => evs.into_iter().for_each(|e| out.emit(e)),
                Err(msg) => evs.into_iter().for_each(|e| out.fail(e, msg.clone())),
            }
        }
        Ok(())
    }
}

/// Registry with the built-in kinds plus `user_features`, `item_features`,
/// `item_process`, `shed`, `query_cache`, `cube` and `dnn`.
pub fn serving_registry(ctx: Arc<OpContext>) -> OperatorRegistry<RankPayload> {
    let mut r = OperatorRegistry::new();
    r.register("user_features", |b| Ok(Arc::new(UserFeatures(b.settings()?)) as _));
    r.register("item_features", |b| Ok(Arc::new(ItemFeatures(b.settings()?)) as _));
    r.register("item_process", |b| Ok(Arc::new(ItemProcess(b.settings()?)) as _));
    let c = Arc::clone(&ctx);
    r.register("shed", move |_| {
        Ok(Arc::new(Shed {
            state: c.shedding.clone(),
            counters: Arc::clone(&c.counters),
        }) as _)
    });
    let c = Arc::clone(&ctx);
    r.register("query_cache", move |_| {
        Ok(Arc::new(QueryLookup {
            cache: c.query_cache.clone(),
            counters: Arc::clone(&c.counters),
        }) as _)
    });
    let c = Arc::clone(&ctx);
    r.register("cube", move |b| {
        Ok(Arc::new(CubeFetch {
            cost: b.settings()?,
            counters: Arc::clone(&c.counters),
        }) as _)
    });
    let c = Arc::clone(&ctx);
    r.register("dnn", move |b| {
        Ok(Arc::new(Dnn {
            settings: b.settings()?,
            cache: c.query_cache.clone(),
            counters: Arc::clone(&c.counters),
        }) as _)
    });
    r
}
