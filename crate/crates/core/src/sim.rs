//! An in-process cluster: nodes share one store and one registry, and hop
//! handoffs are queued instead of crossing a network.
//!
//! Used by tests that need exact control over where a node dies. Halting a
//! node is done through the shared [`RecordingSink`]; [`SimCluster::kill`]
//! then plays the supervisor's part.

use std::collections::{BTreeSet, VecDeque};
use std::sync::{Arc, Mutex};

use crate::events::{Emitter, RecordingSink};
use crate::registry::{verify_blob, JobRecord, Registry, RegistryError, DEFAULT_LEASE};
use crate::runtime::{
    load_checkpoint, resume, run_claimed, AppRegistry, HopRequest, LinkError, LoadedCheckpoint, NodeDescriptor,
    NodeEnv, PeerLink, RetryPolicy, SchedulerLink, TaskOutcome,
};
use crate::store::{BlobKey, BlobStore};

pub struct SimCluster {
    pub store: Arc<dyn BlobStore>,
    pub registry: Mutex<Registry>,
    pub apps: Arc<AppRegistry>,
    pub sink: Arc<RecordingSink>,
    pub retry: RetryPolicy,
    alive: Mutex<BTreeSet<String>>,
    pending: Mutex<VecDeque<(String, LoadedCheckpoint)>>,
}

fn registry_link_error(e: RegistryError) -> LinkError {
    LinkError::rejected(e.kind(), e.to_string())
}

struct SimLink {
    cluster: Arc<SimCluster>,
}

impl SchedulerLink for SimLink {
    fn publish_job(&self, job_id: &str, status: &str, keys: &[BlobKey], sequence: u64) -> Result<(), LinkError> {
        let store = self.cluster.store.clone();
        let check = move |k: &BlobKey, role| verify_blob(store.as_ref(), k, role);
        self.cluster
            .registry
            .lock()
            .unwrap()
            .publish_job(job_id, status, keys, sequence, &check)
            .map(drop)
            .map_err(registry_link_error)
    }

    fn get_job(&self, job_id: &str) -> Result<JobRecord, LinkError> {
        self.cluster.registry.lock().unwrap().get_job(job_id).map_err(registry_link_error)
    }

    fn lookup_node(&self, node_id: &str) -> Result<Option<NodeDescriptor>, LinkError> {
        Ok(self
            .cluster
            .alive
            .lock()
            .unwrap()
            .contains(node_id)
            .then(|| SimCluster::descriptor(node_id)))
    }
}

impl PeerLink for SimLink {
    fn request_hop(&self, dest: &NodeDescriptor, req: &HopRequest) -> Result<(), LinkError> {
        let c = &self.cluster;
        if !c.alive.lock().unwrap().contains(&dest.node_id) {
            return Err(LinkError::Unreachable(dest.node_id.clone()));
        }
        let env = c.env(&dest.node_id);
        let loaded = load_checkpoint(&req.job_id, &req.manifest_key, &env)
            .map_err(|e| LinkError::rejected(e.kind(), e.to_string()))?;
        c.registry
            .lock()
            .unwrap()
            .claim(&req.job_id, &dest.node_id, Some(&req.source_node))
            .map_err(registry_link_error)?;
        c.pending.lock().unwrap().push_back((dest.node_id.clone(), loaded));
        Ok(())
    }
}

impl SimCluster {
    pub fn new(store: Arc<dyn BlobStore>, apps: AppRegistry) -> Arc<Self> {
        Arc::new(Self {
            store,
            registry: Mutex::new(Registry::in_memory(DEFAULT_LEASE)),
            apps: Arc::new(apps),
            sink: Arc::new(RecordingSink::new()),
            retry: RetryPolicy::immediate(3),
            alive: Mutex::default(),
            pending: Mutex::default(),
        })
    }

    fn descriptor(node_id: &str) -> NodeDescriptor {
        NodeDescriptor::new(node_id, "sim", 0)
    }

    pub fn add_node(&self, node_id: &str) {
        self.alive.lock().unwrap().insert(node_id.to_string());
    }

    pub fn env(self: &Arc<Self>, node_id: &str) -> NodeEnv {
        let link = Arc::new(SimLink { cluster: self.clone() });
        NodeEnv {
            node: Self::descriptor(node_id),
            store: self.store.clone(),
            scheduler: link.clone(),
            peers: link,
            apps: self.apps.clone(),
            events: Emitter::new(node_id, self.sink.clone()),
            retry: self.retry,
        }
    }

    /// Removes a node and releases its claims, as the supervisor does after
    /// a preemption. Handoffs queued for it are lost with it.
    pub fn kill(&self, node_id: &str) -> Vec<String> {
        self.alive.lock().unwrap().remove(node_id);
        self.pending.lock().unwrap().retain(|(n, _)| n != node_id);
        self.registry.lock().unwrap().requeue_dead(node_id).unwrap()
    }

    /// Runs queued handoffs until none are left. Returns each outcome with
    /// the node that produced it.
    pub fn drain(self: &Arc<Self>) -> Vec<(String, TaskOutcome)> {
        let mut out = Vec::new();
        loop {
            let next = self.pending.lock().unwrap().pop_front();
            let Some((node, loaded)) = next else { break };
            let env = self.env(&node);
            let outcome = resume(loaded, &env);
            let halted = outcome == TaskOutcome::Halted;
            out.push((node, outcome));
            if halted {
                break;
            }
        }
        out
    }

    /// One pull by `node`: claim the next job, run it, and follow its hops.
    /// Returns `None` when there is nothing to claim.
    pub fn pull(self: &Arc<Self>, node_id: &str) -> Option<Vec<(String, TaskOutcome)>> {
        let rec = self.registry.lock().unwrap().next_job(node_id).unwrap()?;
        let env = self.env(node_id);
        let first = run_claimed(&rec, &env)?;
        if let TaskOutcome::Failed { .. } = first {
            let _ = self.registry.lock().unwrap().release(&rec.job_id, node_id);
        }
        let halted = first == TaskOutcome::Halted;
        let mut out = vec![(node_id.to_string(), first)];
        if !halted {
            out.extend(self.drain());
        }
        Some(out)
    }
}
