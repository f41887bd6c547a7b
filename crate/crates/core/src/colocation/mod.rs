//! Fine-to-coarse footprint co-location as stage machines.
//!
//! Three variants share the same stage bodies and so produce identical
//! `match.txt` products:
//!
//! * [`PUBLISH_APP`] checkpoints through the scheduler after the reads and
//!   after the vector computations, then publishes the product.
//! * [`HOP_APP`] hops to the data node to read, back home to compute, and
//!   to the data node again to write.
//! * [`SEQUENTIAL_APP`] runs the pipeline with no checkpoint at all.
//!
//! Inputs live under `job-<id>/input/`: `fine.txt`, `coarse.txt` and
//! `params.txt` (a kvdoc with `radius` and, for the hop variant, `data_node`).

pub mod geo;
pub mod granule;

use std::collections::BTreeMap;

pub use geo::{angle, match_footprints, to_ecef, Ecef, MatchProduct, Pair, DEFAULT_RADIUS, EARTH_RADIUS_KM};
pub use granule::{gen_granules, Granule, GranuleError, Instrument, Sample};

use crate::kvdoc::KvDoc;
use crate::layout;
use crate::runtime::{AppRegistry, Directive, PublishStatus, StageCtx, StageError, StageMachine, PRODUCTS_VAR};
use crate::state::Value;
use crate::store::{BlobKey, BlobStore, StoreError};

pub const PUBLISH_APP: &str = "colocation";
pub const HOP_APP: &str = "colocation-hop";
pub const SEQUENTIAL_APP: &str = "colocation-seq";

pub const FINE_INPUT: &str = "fine.txt";
pub const COARSE_INPUT: &str = "coarse.txt";
pub const PARAMS_INPUT: &str = "params.txt";
pub const PRODUCT_NAME: &str = "match.txt";

const HOME_VAR: &str = "home";
const RADIUS_VAR: &str = "radius";
const MATCH_VAR: &str = "match";

#[derive(Debug, Clone, PartialEq)]
pub struct JobParams {
    pub radius: f64,
    pub data_node: Option<String>,
}

impl JobParams {
    pub fn to_kvdoc(&self) -> KvDoc {
        let mut doc = KvDoc::new().with("radius", self.radius);
        if let Some(n) = &self.data_node {
            doc.set("data_node", n);
        }
        doc
    }

    pub fn from_kvdoc(doc: &KvDoc) -> Result<Self, String> {
        let radius: f64 = doc.parsed_or("radius", DEFAULT_RADIUS).map_err(|e| e.to_string())?;
        if radius.is_nan() || radius <= 0.0 {
            return Err(format!("radius must be positive, got {radius}"));
        }
        Ok(Self {
            radius,
            data_node: doc.get("data_node").map(str::to_string),
        })
    }
}

/// Writes the generated granules and parameters for `job_id` and returns the
/// input keys to submit the job with.
pub fn stage_inputs(
    store: &dyn BlobStore,
    job_id: &str,
    seed: u64,
    n_fine: usize,
    n_coarse: usize,
    params: &JobParams,
) -> Result<Vec<BlobKey>, StoreError> {
    let (fine, coarse) = gen_granules(seed, n_fine, n_coarse);
    let blobs = [
        (FINE_INPUT, fine.to_text().into_bytes()),
        (COARSE_INPUT, coarse.to_text().into_bytes()),
        (PARAMS_INPUT, params.to_kvdoc().encode().into_bytes()),
    ];
    let mut keys = Vec::new();
    for (name, bytes) in blobs {
        let key = layout::input_key(job_id, name)?;
        store.put_atomic(&key, &bytes)?;
        keys.push(key);
    }
    Ok(keys)
}

fn read_input(ctx: &StageCtx<'_>, name: &str) -> Result<Vec<u8>, StageError> {
    let key = layout::input_key(&ctx.state.job_id, name).map_err(StageError::failed)?;
    ctx.store.get(&key).map_err(|e| StageError::failed(format!("{key}: {e}")))
}

fn load_params(ctx: &StageCtx<'_>) -> Result<JobParams, StageError> {
    let raw = read_input(ctx, PARAMS_INPUT)?;
    let doc = KvDoc::decode(&raw).map_err(|e| StageError::failed(format!("{PARAMS_INPUT}: {e}")))?;
    JobParams::from_kvdoc(&doc).map_err(StageError::failed)
}

fn float_var<'s>(ctx: &'s StageCtx<'_>, name: &str) -> Result<&'s [f64], StageError> {
    ctx.state
        .get(name)
        .and_then(Value::as_float_array)
        .ok_or_else(|| StageError::failed(format!("missing variable {name}")))
}

fn read_granule(ctx: &mut StageCtx<'_>, prefix: &str, input: &str, want: Instrument) -> Result<Directive, StageError> {
    if ctx.state.get(RADIUS_VAR).is_none() {
        let params = load_params(ctx)?;
        ctx.state.set(RADIUS_VAR, Value::Float(params.radius));
    }
    let raw = read_input(ctx, input)?;
    ctx.mark(&format!("read {prefix}"))?;
    let text = String::from_utf8(raw).map_err(|_| StageError::failed(format!("{input} is not UTF-8")))?;
    let g = Granule::parse(&text).map_err(|e| StageError::failed(format!("{input}: {e}")))?;
    if g.instrument != want {
        return Err(StageError::failed(format!("{input} holds a {} granule", g.instrument.as_str())));
    }
    let col = |f: fn(&Sample) -> f64| Value::FloatArray(g.samples.iter().map(f).collect());
    ctx.state.set(&format!("{prefix}_id"), Value::Str(g.granule_id.clone()));
    ctx.state.set(&format!("{prefix}_lat"), col(|s| s.lat));
    ctx.state.set(&format!("{prefix}_lon"), col(|s| s.lon));
    ctx.state.set(&format!("{prefix}_val"), col(|s| s.value));
    Ok(Directive::Continue)
}

fn compute_ecef(ctx: &mut StageCtx<'_>, prefix: &str) -> Result<Directive, StageError> {
    let lat = float_var(ctx, &format!("{prefix}_lat"))?;
    let lon = float_var(ctx, &format!("{prefix}_lon"))?;
    if lat.len() != lon.len() {
        return Err(StageError::failed(format!("{prefix} coordinate arrays differ in length")));
    }
    let mut flat = Vec::with_capacity(lat.len() * 3);
    for (&la, &lo) in lat.iter().zip(lon) {
        let e = to_ecef(la, lo);
        flat.extend([e.x, e.y, e.z]);
    }
    ctx.mark(&format!("ecef {prefix}"))?;
    ctx.state.set(&format!("{prefix}_ecef"), Value::FloatArray(flat));
    Ok(Directive::Continue)
}

fn unflatten(flat: &[f64]) -> Vec<Ecef> {
    flat.chunks_exact(3).map(|c| Ecef { x: c[0], y: c[1], z: c[2] }).collect()
}

fn run_match(ctx: &mut StageCtx<'_>) -> Result<Directive, StageError> {
    let fine = unflatten(float_var(ctx, "fine_ecef")?);
    let coarse = unflatten(float_var(ctx, "coarse_ecef")?);
    let radius = ctx
        .state
        .get(RADIUS_VAR)
        .and_then(Value::as_float)
        .ok_or_else(|| StageError::failed("missing radius"))?;
    ctx.mark("match")?;
    let product = match_footprints(&fine, &coarse, radius);
    ctx.state.set(MATCH_VAR, Value::Str(product.to_text()));
    Ok(Directive::Continue)
}

/// Moves the match text into the products map and drops the working arrays.
fn write_product(ctx: &mut StageCtx<'_>) -> Result<Directive, StageError> {
    let text = match ctx.state.remove(MATCH_VAR) {
        Some(Value::Str(t)) => t,
        _ => return Err(StageError::failed("no match result")),
    };
    let keep = [HOME_VAR, RADIUS_VAR];
    ctx.state.vars.retain(|k, _| keep.contains(&k.as_str()));
    let products = BTreeMap::from([(PRODUCT_NAME.to_string(), Value::Bytes(text.into_bytes()))]);
    ctx.state.set(PRODUCTS_VAR, Value::Map(products));
    Ok(Directive::Continue)
}

fn read_fine(ctx: &mut StageCtx<'_>) -> Result<Directive, StageError> {
    read_granule(ctx, "fine", FINE_INPUT, Instrument::Fine)
}

fn read_coarse(ctx: &mut StageCtx<'_>) -> Result<Directive, StageError> {
    read_granule(ctx, "coarse", COARSE_INPUT, Instrument::Coarse)
}

/// Checkpoints after the reads (line 9) and after the vectors (line 12),
/// then publishes the product (line 15).
pub fn build_publish_variant() -> StageMachine {
    StageMachine::new(PUBLISH_APP)
        .stage_at_line(7, "read fine", read_fine)
        .stage_at_line(8, "read coarse", read_coarse)
        .stage_at_line(9, "publish ckpt", |_| Ok(Directive::Publish(PublishStatus::Ckpt)))
        .stage_at_line(10, "coarse ecef", |ctx| compute_ecef(ctx, "coarse"))
        .stage_at_line(11, "fine ecef", |ctx| compute_ecef(ctx, "fine"))
        .stage_at_line(12, "publish ckpt", |_| Ok(Directive::Publish(PublishStatus::Ckpt)))
        .stage_at_line(13, "match", run_match)
        .stage_at_line(14, "write product", write_product)
        .stage_at_line(15, "publish finished", |_| Ok(Directive::Publish(PublishStatus::Finished)))
}

fn data_node(ctx: &StageCtx<'_>) -> Result<String, StageError> {
    load_params(ctx)?
        .data_node
        .ok_or_else(|| StageError::failed("params.txt has no data_node"))
}

/// Reads on the data node, computes on the node the job started on, and
/// writes on the data node again. The product is published on completion.
pub fn build_hop_variant() -> StageMachine {
    StageMachine::new(HOP_APP)
        .stage_at_line(1, "hop to data", |ctx| {
            let dest = data_node(ctx)?;
            ctx.state.set(HOME_VAR, Value::Str(ctx.node_id.to_string()));
            Ok(Directive::Hop(dest))
        })
        .stage_at_line(2, "read fine", read_fine)
        .stage_at_line(3, "read coarse", read_coarse)
        .stage_at_line(4, "hop home", |ctx| {
            let home = ctx
                .state
                .get(HOME_VAR)
                .and_then(Value::as_str)
                .ok_or_else(|| StageError::failed("missing home node"))?;
            Ok(Directive::Hop(home.to_string()))
        })
        .stage_at_line(5, "coarse ecef", |ctx| compute_ecef(ctx, "coarse"))
        .stage_at_line(6, "fine ecef", |ctx| compute_ecef(ctx, "fine"))
        .stage_at_line(7, "match", run_match)
        .stage_at_line(8, "hop to data", |ctx| Ok(Directive::Hop(data_node(ctx)?)))
        .stage_at_line(9, "write product", write_product)
        .auto_finish(true)
}

/// The same pipeline with no checkpoint or hop; the reference run.
pub fn build_sequential_variant() -> StageMachine {
    StageMachine::new(SEQUENTIAL_APP)
        .stage("read fine", read_fine)
        .stage("read coarse", read_coarse)
        .stage("coarse ecef", |ctx| compute_ecef(ctx, "coarse"))
        .stage("fine ecef", |ctx| compute_ecef(ctx, "fine"))
        .stage("match", run_match)
        .stage("write product", write_product)
        .auto_finish(true)
}

pub fn register_apps(apps: &mut AppRegistry) {
    apps.register(build_publish_variant())
        .register(build_hop_variant())
        .register(build_sequential_variant());
}

pub fn all_apps() -> AppRegistry {
    let mut apps = AppRegistry::new();
    register_apps(&mut apps);
    apps
}
