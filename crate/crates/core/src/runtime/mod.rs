//! Inference sessions over a shared, read-only weight store.

mod arena;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub use arena::{replay, Arena, ArenaCounters, BufferHandle, CheckedOut, ReusePolicy, TraceEvent};

use crate::error::{Error, Result};
use crate::graph::{execute_with, ExecOptions, ExecStats, Graph, NamedTensors, Weight, WeightSource};

/// Immutable weight map shared by every session of a process.
///
/// Cloning shares the same storage; [`SharedWeights::ref_count`] reports
/// how many handles (sessions included) are alive.
#[derive(Debug, Clone)]
pub struct SharedWeights {
    inner: Arc<BTreeMap<String, Weight>>,
}

impl SharedWeights {
    pub fn new(weights: BTreeMap<String, Weight>) -> Self {
        Self {
            inner: Arc::new(weights),
        }
    }

    /// Moves the weights out of `graph`, leaving it weightless.
    pub fn take_from(graph: &mut Graph) -> Self {
        Self::new(std::mem::take(&mut graph.weights))
    }

    pub fn ref_count(&self) -> usize {
        Arc::strong_count(&self.inner)
    }

    pub fn total_bytes(&self) -> usize {
        self.inner.values().map(Weight::payload_bytes).sum()
    }

    pub fn len(&self) -> usize {
        self.inner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.inner.keys().map(String::as_str)
    }

    /// True when both handles point at the same storage.
    pub fn same_storage(&self, other: &SharedWeights) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }
}

impl WeightSource for SharedWeights {
    fn weight(&self, name: &str) -> Option<&Weight> {
        self.inner.get(name)
    }
}

static NEXT_SESSION: AtomicU64 = AtomicU64::new(1);

/// One inference context: a graph, a handle on the shared weights and a
/// private activation arena. Sessions are `Send` and independent, so each
/// worker thread owns one.
#[derive(Debug)]
pub struct Session {
    id: u64,
    graph: Arc<Graph>,
    weights: SharedWeights,
    arena: Arena,
    last_stats: ExecStats,
}

/// Binds `graph` to `weights`; every weight the active nodes read must resolve.
pub fn create_session(graph: Arc<Graph>, weights: &SharedWeights) -> Result<Session> {
    graph.validate()?;
    for node in &graph.nodes {
        for name in node.op.weight_refs() {
            if weights.weight(name).is_none() {
                return Err(Error::Binding(name.to_string()));
            }
        }
    }
    Ok(Session {
        id: NEXT_SESSION.fetch_add(1, Ordering::Relaxed),
        graph,
        weights: weights.clone(),
        arena: Arena::new(),
        last_stats: ExecStats::default(),
    })
}

/// Runs one inference request.
pub fn session_infer(session: &mut Session, inputs: &NamedTensors) -> Result<NamedTensors> {
    session.infer(inputs)
}

impl Session {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn weights(&self) -> &SharedWeights {
        &self.weights
    }

    pub fn arena(&self) -> &Arena {
        &self.arena
    }

    pub fn last_stats(&self) -> ExecStats {
        self.last_stats
    }

    pub fn infer(&mut self, inputs: &NamedTensors) -> Result<NamedTensors> {
        let (out, stats) = execute_with(&self.graph, &self.weights, inputs, &mut self.arena, ExecOptions::default())?;
        self.last_stats = stats;
        Ok(out)
    }
}
