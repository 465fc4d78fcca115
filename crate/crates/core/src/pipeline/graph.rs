use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use arc_swap::ArcSwap;

use super::{BuildContext, Operator, OperatorRegistry, Payload, PipelineConfig, PipelineError, TenantSplit};

/// A compiled processor: operator plus channel and scheduling settings.
pub struct StageProcessor<P: Payload> {
    pub id: String,
    pub kind: String,
    pub operator: Arc<dyn Operator<P>>,
    pub batch_size: usize,
    pub parallelism: usize,
    pub channel_capacity: usize,
}

impl<P: Payload> std::fmt::Debug for StageProcessor<P> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StageProcessor")
            .field("id", &self.id)
            .field("kind", &self.kind)
            .field("batch_size", &self.batch_size)
            .field("parallelism", &self.parallelism)
            .field("channel_capacity", &self.channel_capacity)
            .finish()
    }
}

/// Validated, immutable DAG. Processor `i` owns channel `i`; every inbound
/// edge of a processor feeds that one channel.
pub struct PipelineGraph<P: Payload> {
    pub(crate) processors: Vec<StageProcessor<P>>,
    pub(crate) index: HashMap<String, usize>,
    pub(crate) successors: Vec<Vec<usize>>,
    pub(crate) predecessors: Vec<Vec<usize>>,
    pub(crate) topo: Vec<usize>,
    pub(crate) tenants: Option<Arc<ArcSwap<TenantSplit>>>,
    config: PipelineConfig,
}

impl<P: Payload> std::fmt::Debug for PipelineGraph<P> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PipelineGraph")
            .field("topo_order", &self.topo_order())
            .finish()
    }
}

/// Validates `config` and instantiates each processor's operator.
pub fn compile<P: Payload>(
    config: &PipelineConfig,
    registry: &OperatorRegistry<P>,
) -> Result<PipelineGraph<P>, PipelineError> {
    let mut index = HashMap::new();
    for (i, p) in config.processors.iter().enumerate() {
        if index.insert(p.id.clone(), i).is_some() {
            return Err(PipelineError::DuplicateId(p.id.clone()));
        }
        if p.batch_size == 0 || p.parallelism == 0 {
            return Err(PipelineError::InvalidConfig(format!(
                "processor {:?}: batch_size and parallelism must be positive",
                p.id
            )));
        }
        if p.effective_capacity() < p.batch_size {
            return Err(PipelineError::InvalidConfig(format!(
                "processor {:?}: channel_capacity {} is below batch_size {}",
                p.id,
                p.effective_capacity(),
                p.batch_size
            )));
        }
        if !registry.contains(&p.kind) {
            return Err(PipelineError::UnknownOperator {
                id: p.id.clone(),
                kind: p.kind.clone(),
            });
        }
    }
    if config.processors.is_empty() {
        return Err(PipelineError::InvalidConfig("pipeline has no processors".into()));
    }

    let n = config.processors.len();
    let mut successors = vec![Vec::new(); n];
    let mut predecessors = vec![Vec::new(); n];
    for e in &config.edges {
        let (Some(&a), Some(&b)) = (index.get(&e.from), index.get(&e.to)) else {
            return Err(PipelineError::DanglingEdge {
                from: e.from.clone(),
                to: e.to.clone(),
            });
        };
        if !successors[a].contains(&b) {
            successors[a].push(b);
            predecessors[b].push(a);
        }
    }

    let topo = topological_order(&successors, &predecessors).map_err(|cycle| {
        PipelineError::CycleDetected(cycle.into_iter().map(|i| config.processors[i].id.clone()).collect())
    })?;

    let tenants = match &config.tenants {
        None => None,
        Some(t) => {
            let split = TenantSplit::new(t.split.clone(), t.entries.clone());
            split.validate()?;
            for entry in split.entries.values() {
                if !index.contains_key(entry) {
                    return Err(PipelineError::DanglingEdge {
                        from: "<tenants>".into(),
                        to: entry.clone(),
                    });
                }
            }
            Some(Arc::new(ArcSwap::from_pointee(split)))
        }
    };

    let mut processors = Vec::with_capacity(n);
    for p in &config.processors {
        let ctx = BuildContext {
            processor: p,
            tenants: tenants.clone(),
        };
        let factory = registry.factory(&p.kind).expect("kind checked above");
        let operator = factory(&ctx).map_err(|msg| PipelineError::InvalidConfig(msg))?;
        processors.push(StageProcessor {
            id: p.id.clone(),
            kind: p.kind.clone(),
            operator,
            batch_size: p.batch_size,
            parallelism: p.parallelism,
            channel_capacity: p.effective_capacity(),
        });
    }

    let graph = PipelineGraph {
        processors,
        index,
        successors,
        predecessors,
        topo,
        tenants,
        config: config.clone(),
    };
    if let Some(t) = &graph.tenants {
        graph.check_tenant_entries(&t.load())?;
    }
    Ok(graph)
}

/// Kahn's algorithm, preferring lower config index among ready nodes. On a
/// cycle returns the processors that could not be ordered.
fn topological_order(succ: &[Vec<usize>], pred: &[Vec<usize>]) -> Result<Vec<usize>, Vec<usize>> {
    let n = succ.len();
    let mut indeg: Vec<usize> = pred.iter().map(Vec::len).collect();
    let mut ready: std::collections::BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &j in &succ[i] {
            indeg[j] -= 1;
            if indeg[j] == 0 {
                ready.insert(j);
            }
        }
    }
    if order.len() == n {
        Ok(order)
    } else {
        Err((0..n).filter(|i| indeg[*i] > 0).collect())
    }
}

impl<P: Payload> PipelineGraph<P> {
    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.processors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.processors.is_empty()
    }

    pub fn processors(&self) -> &[StageProcessor<P>] {
        &self.processors
    }

    pub fn processor(&self, id: &str) -> Option<&StageProcessor<P>> {
        self.index.get(id).map(|&i| &self.processors[i])
    }

    pub fn topo_order(&self) -> Vec<&str> {
        self.topo.iter().map(|&i| self.processors[i].id.as_str()).collect()
    }

    pub fn sources(&self) -> Vec<&str> {
        self.ids_where(|i| self.predecessors[i].is_empty())
    }

    pub fn sinks(&self) -> Vec<&str> {
        self.ids_where(|i| self.successors[i].is_empty())
    }

    pub fn successors(&self, id: &str) -> Vec<&str> {
        self.index
            .get(id)
            .map(|&i| self.successors[i].iter().map(|&j| self.processors[j].id.as_str()).collect())
            .unwrap_or_default()
    }

    /// Upstream processors that feed `id`'s single channel.
    pub fn channel_inputs(&self, id: &str) -> Vec<&str> {
        self.index
            .get(id)
            .map(|&i| self.predecessors[i].iter().map(|&j| self.processors[j].id.as_str()).collect())
            .unwrap_or_default()
    }

    /// One channel per processor regardless of fan-in.
    pub fn channel_count(&self) -> usize {
        self.processors.len()
    }

    pub fn tenant_split(&self) -> Option<Arc<TenantSplit>> {
        self.tenants.as_ref().map(|t| t.load_full())
    }

    /// Replaces the tenant table. Entries must name existing processors that
    /// follow a dispatch stage; the topology itself never changes.
    pub fn swap_tenants(&self, split: TenantSplit) -> Result<(), PipelineError> {
        let slot = self
            .tenants
            .as_ref()
            .ok_or_else(|| PipelineError::InvalidConfig("pipeline has no tenants table".into()))?;
        split.validate()?;
        self.check_tenant_entries(&split)?;
        slot.store(Arc::new(split));
        Ok(())
    }

    fn check_tenant_entries(&self, split: &TenantSplit) -> Result<(), PipelineError> {
        for entry in split.entries.values() {
            let Some(&e) = self.index.get(entry) else {
                return Err(PipelineError::DanglingEdge {
                    from: "<tenants>".into(),
                    to: entry.clone(),
                });
            };
            let fed_by_dispatch = self.predecessors[e]
                .iter()
                .any(|&p| self.processors[p].kind == "dispatch");
            if !fed_by_dispatch {
                return Err(PipelineError::InvalidConfig(format!(
                    "tenant entry {entry:?} is not downstream of a dispatch processor"
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    fn ids_where(&self, f: impl Fn(usize) -> bool) -> Vec<&str> {
        (0..self.processors.len())
            .filter(|&i| f(i))
            .map(|i| self.processors[i].id.as_str())
            .collect()
    }

    /// Processor ids in config order, with their configured fan-in.
    pub fn describe(&self) -> BTreeMap<String, Vec<String>> {
        self.processors
            .iter()
            .map(|p| {
                (
                    p.id.clone(),
                    self.channel_inputs(&p.id).into_iter().map(String::from).collect(),
                )
            })
            .collect()
    }
}
