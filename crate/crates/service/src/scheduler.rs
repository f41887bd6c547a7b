//! The job registry behind the wire protocol.
//!
//! Every mutation goes through one mutex-guarded [`Registry`], so requests
//! observe a single total order. With a store root configured, published
//! manifests and products are checked against the store before they are
//! accepted.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use navhop_client::wire;
use navhop_core::kvdoc::KvDoc;
use navhop_core::registry::{format_job_list, no_blob_check, verify_blob, Registry, RegistryError};
use navhop_core::store::{BlobKey, LocalDirStore};
use tokio::net::TcpListener;

#[derive(Debug, Clone)]
pub struct SchedulerConfig {
    pub journal: Option<PathBuf>,
    pub lease: Duration,
    pub store_root: Option<PathBuf>,
}

pub struct Scheduler {
    registry: Mutex<Registry>,
    store: Option<LocalDirStore>,
}

fn reg_error(e: RegistryError) -> KvDoc {
    wire::error(e.kind(), e)
}

fn field<'a>(req: &'a KvDoc, key: &str) -> Result<&'a str, KvDoc> {
    req.require(key).map_err(|e| wire::error("BadRequest", e))
}

fn keys(req: &KvDoc, key: &str) -> Result<Vec<BlobKey>, KvDoc> {
    wire::split_keys(req.get(key).unwrap_or("")).map_err(|e| wire::error("BadRequest", e))
}

fn record_reply(rec: &navhop_core::registry::JobRecord) -> KvDoc {
    let mut doc = wire::ok();
    wire::put_record(&mut doc, rec);
    doc
}

impl Scheduler {
    pub fn open(cfg: &SchedulerConfig) -> Result<Self, String> {
        let registry = match &cfg.journal {
            Some(p) => Registry::open(p, cfg.lease).map_err(|e| e.to_string())?,
            None => Registry::in_memory(cfg.lease),
        };
        let store = match &cfg.store_root {
            Some(root) => Some(LocalDirStore::open(root).map_err(|e| e.to_string())?),
            None => None,
        };
        Ok(Self {
            registry: Mutex::new(registry),
            store,
        })
    }

    pub fn handle(&self, req: &KvDoc) -> KvDoc {
        self.dispatch(req).unwrap_or_else(|reply| reply)
    }

    fn dispatch(&self, req: &KvDoc) -> Result<KvDoc, KvDoc> {
        let service = field(req, wire::SERVICE)?;
        let mut reg = self.registry.lock().unwrap_or_else(|p| p.into_inner());
        match service {
            "list_jobs" => Ok(wire::ok().with("jobs", format_job_list(&reg.list_jobs()))),
            "get_job" => match req.get("job_id") {
                Some(id) => reg.get_job(id).map(|r| record_reply(&r)).map_err(reg_error),
                None => match reg.next_job(field(req, "node")?).map_err(reg_error)? {
                    Some(r) => Ok(record_reply(&r).with("found", "true")),
                    None => Ok(wire::ok().with("found", "false")),
                },
            },
            "publish_job" => {
                let sequence = req.parsed_or("sequence", 0u64).map_err(|e| wire::error("BadRequest", e))?;
                let keys = keys(req, "keys")?;
                let checked = |k: &BlobKey, role| match &self.store {
                    Some(store) => verify_blob(store, k, role),
                    None => no_blob_check(k, role),
                };
                reg.publish_job(field(req, "job_id")?, field(req, "status")?, &keys, sequence, &checked)
                    .map(|r| record_reply(&r))
                    .map_err(reg_error)
            }
            "submit_job" => reg
                .submit(field(req, "job_id")?, field(req, "app_name")?, &keys(req, "input_keys")?)
                .map(|r| record_reply(&r))
                .map_err(reg_error),
            "claim_job" => reg
                .claim(field(req, "job_id")?, field(req, "node")?, req.get("from"))
                .map(|r| record_reply(&r))
                .map_err(reg_error),
            "release_job" => reg
                .release(field(req, "job_id")?, field(req, "node")?)
                .map(|()| wire::ok())
                .map_err(reg_error),
            "requeue_dead" => reg
                .requeue_dead(field(req, "node")?)
                .map(|jobs| wire::ok().with("jobs", jobs.join(",")))
                .map_err(reg_error),
            "heartbeat" => {
                reg.heartbeat(field(req, "node")?, req.get("addr").unwrap_or(""));
                Ok(wire::ok())
            }
            "lookup_node" => Ok(match reg.lookup_node(field(req, "node")?) {
                Some(addr) => wire::ok().with("found", "true").with("addr", addr),
                None => wire::ok().with("found", "false"),
            }),
            other => Err(wire::error("BadRequest", format!("unknown service {other:?}"))),
        }
    }
}

pub async fn serve(listener: TcpListener, scheduler: Arc<Scheduler>) {
    let handler = Arc::new(move |req: KvDoc| {
        let s = scheduler.clone();
        async move {
            let reply = tokio::task::spawn_blocking(move || s.handle(&req))
                .await
                .unwrap_or_else(|e| wire::error("Internal", e));
            Some(reply)
        }
    });
    crate::net::serve(listener, handler).await
}
