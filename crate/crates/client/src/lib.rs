//! Blocking clients for the agent and scheduler services.
//!
//! [`SchedulerClient`] implements [`SchedulerLink`] and [`PeerClient`]
//! implements [`PeerLink`], so a node runtime can talk to real services
//! through them. Transport failures surface as [`LinkError::Unreachable`];
//! error replies as [`LinkError::Rejected`] with the service's error kind.

pub mod wire;

use std::io;
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use navhop_core::kvdoc::KvDoc;
use navhop_core::registry::{parse_job_list, JobRecord, JobStatus};
use navhop_core::runtime::{HopRequest, LinkError, NodeDescriptor, PeerLink, SchedulerLink};
use navhop_core::store::BlobKey;

pub use wire::{read_frame, write_frame};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// One service endpoint.
#[derive(Debug, Clone)]
pub struct Client {
    addr: String,
    timeout: Duration,
}

fn unreachable(addr: &str, e: io::Error) -> LinkError {
    LinkError::Unreachable(format!("{addr}: {e}"))
}

impl Client {
    pub fn new(addr: impl Into<String>) -> Self {
        Self {
            addr: addr.into(),
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    fn connect(&self) -> Result<TcpStream, LinkError> {
        let sa = self
            .addr
            .to_socket_addrs()
            .map_err(|e| unreachable(&self.addr, e))?
            .next()
            .ok_or_else(|| LinkError::Unreachable(format!("{}: no address", self.addr)))?;
        let stream = TcpStream::connect_timeout(&sa, self.timeout).map_err(|e| unreachable(&self.addr, e))?;
        stream.set_read_timeout(Some(self.timeout)).ok();
        stream.set_write_timeout(Some(self.timeout)).ok();
        stream.set_nodelay(true).ok();
        Ok(stream)
    }

    /// Sends a request and returns the raw reply, `None` if the service
    /// closed the connection without answering.
    pub fn exchange(&self, req: &KvDoc) -> Result<Option<KvDoc>, LinkError> {
        let mut stream = self.connect()?;
        write_frame(&mut stream, req.encode().as_bytes()).map_err(|e| unreachable(&self.addr, e))?;
        match read_frame(&mut stream).map_err(|e| unreachable(&self.addr, e))? {
            None => Ok(None),
            Some(body) => KvDoc::decode(&body)
                .map(Some)
                .map_err(|e| LinkError::rejected("BadReply", e.to_string())),
        }
    }

    /// Sends a request and returns the payload of an `ok` reply.
    pub fn call(&self, req: &KvDoc) -> Result<KvDoc, LinkError> {
        match self.exchange(req)? {
            Some(reply) => wire::into_result(reply),
            None => Err(LinkError::Unreachable(format!("{}: closed without reply", self.addr))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SchedulerClient {
    client: Client,
}

impl SchedulerClient {
    pub fn new(addr: impl Into<String>) -> Self {
        Self {
            client: Client::new(addr),
        }
    }

    pub fn from_client(client: Client) -> Self {
        Self { client }
    }

    pub fn addr(&self) -> &str {
        self.client.addr()
    }

    pub fn list_jobs(&self) -> Result<Vec<(String, JobStatus)>, LinkError> {
        let reply = self.client.call(&wire::request("list_jobs"))?;
        parse_job_list(reply.require("jobs").map_err(wire::bad_request)?).map_err(wire::bad_request)
    }

    /// The raw `jobs` field of `list_jobs`, exactly as the scheduler sent it.
    pub fn list_jobs_raw(&self) -> Result<String, LinkError> {
        let reply = self.client.call(&wire::request("list_jobs"))?;
        Ok(reply.require("jobs").map_err(wire::bad_request)?.to_string())
    }

    /// Claims the next unfinished job for `node`.
    pub fn next_job(&self, node: &str) -> Result<Option<JobRecord>, LinkError> {
        let reply = self.client.call(&wire::request("get_job").with("node", node))?;
        match reply.get("found") {
            Some("false") => Ok(None),
            _ => wire::take_record(&reply).map(Some),
        }
    }

    pub fn submit(&self, job_id: &str, app_name: &str, input_keys: &[BlobKey]) -> Result<JobRecord, LinkError> {
        let req = wire::request("submit_job")
            .with("job_id", job_id)
            .with("app_name", app_name)
            .with("input_keys", wire::join_keys(input_keys));
        wire::take_record(&self.client.call(&req)?)
    }

    pub fn claim(&self, job_id: &str, node: &str, from: Option<&str>) -> Result<JobRecord, LinkError> {
        let mut req = wire::request("claim_job").with("job_id", job_id).with("node", node);
        if let Some(f) = from {
            req.set("from", f);
        }
        wire::take_record(&self.client.call(&req)?)
    }

    pub fn release(&self, job_id: &str, node: &str) -> Result<(), LinkError> {
        let req = wire::request("release_job").with("job_id", job_id).with("node", node);
        self.client.call(&req).map(drop)
    }

    pub fn requeue_dead(&self, node: &str) -> Result<Vec<String>, LinkError> {
        let reply = self.client.call(&wire::request("requeue_dead").with("node", node))?;
        Ok(wire::split_list(reply.get("jobs").unwrap_or("")))
    }

    pub fn heartbeat(&self, node: &str, addr: &str) -> Result<(), LinkError> {
        let req = wire::request("heartbeat").with("node", node).with("addr", addr);
        self.client.call(&req).map(drop)
    }
}

impl SchedulerLink for SchedulerClient {
    fn publish_job(&self, job_id: &str, status: &str, keys: &[BlobKey], sequence: u64) -> Result<(), LinkError> {
        let req = wire::request("publish_job")
            .with("job_id", job_id)
            .with("status", status)
            .with("keys", wire::join_keys(keys))
            .with("sequence", sequence);
        self.client.call(&req).map(drop)
    }

    fn get_job(&self, job_id: &str) -> Result<JobRecord, LinkError> {
        wire::take_record(&self.client.call(&wire::request("get_job").with("job_id", job_id))?)
    }

    fn lookup_node(&self, node_id: &str) -> Result<Option<NodeDescriptor>, LinkError> {
        let reply = self.client.call(&wire::request("lookup_node").with("node", node_id))?;
        match reply.get("addr") {
            Some(addr) if !addr.is_empty() => Ok(NodeDescriptor::from_addr(node_id, addr)),
            _ => Ok(None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Health {
    pub node_id: String,
    pub running_jobs: Vec<String>,
    pub uptime_ms: u64,
    pub accepting: bool,
}

#[derive(Debug, Clone)]
pub struct AgentClient {
    client: Client,
}

impl AgentClient {
    pub fn new(addr: impl Into<String>) -> Self {
        Self {
            client: Client::new(addr),
        }
    }

    pub fn from_client(client: Client) -> Self {
        Self { client }
    }

    pub fn hop(&self, req: &HopRequest) -> Result<(), LinkError> {
        let doc = wire::request("hop")
            .with("job_id", &req.job_id)
            .with("manifest_key", &req.manifest_key)
            .with("source_node", &req.source_node);
        self.client.call(&doc).map(drop)
    }

    pub fn start(&self, job_id: &str, app_name: &str) -> Result<(), LinkError> {
        let doc = wire::request("start").with("job_id", job_id).with("app_name", app_name);
        self.client.call(&doc).map(drop)
    }

    pub fn health(&self) -> Result<Health, LinkError> {
        let r = self.client.call(&wire::request("health"))?;
        Ok(Health {
            node_id: r.require("node_id").map_err(wire::bad_request)?.to_string(),
            running_jobs: wire::split_list(r.get("running_jobs").unwrap_or("")),
            uptime_ms: r.require_parsed("uptime_ms").map_err(wire::bad_request)?,
            accepting: r.get("accepting") != Some("false"),
        })
    }

    /// Asks the agent to terminate. The agent never answers; a closed
    /// connection is success.
    pub fn kill(&self, mode: &str, grace_ms: Option<u64>) -> Result<(), LinkError> {
        let mut doc = wire::request("kill").with("mode", mode);
        if let Some(g) = grace_ms {
            doc.set("grace_ms", g);
        }
        match self.client.exchange(&doc) {
            Ok(None) => Ok(()),
            Ok(Some(reply)) => wire::into_result(reply).map(drop),
            // the process may die before the reply read completes
            Err(LinkError::Unreachable(_)) => Ok(()),
            Err(e) => Err(e),
        }
    }
}

/// Delivers hop handoffs to whichever agent the descriptor names.
#[derive(Debug, Clone)]
pub struct PeerClient {
    timeout: Duration,
}

impl PeerClient {
    pub fn new(timeout: Duration) -> Self {
        Self { timeout }
    }
}

impl Default for PeerClient {
    fn default() -> Self {
        Self::new(DEFAULT_TIMEOUT)
    }
}

impl PeerLink for PeerClient {
    fn request_hop(&self, dest: &NodeDescriptor, req: &HopRequest) -> Result<(), LinkError> {
        AgentClient::from_client(Client::new(dest.addr()).with_timeout(self.timeout)).hop(req)
    }
}
