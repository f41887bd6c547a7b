use std::path::PathBuf;
use std::sync::Arc;

use navhop_core::colocation::{self, gen_granules, match_footprints, to_ecef, Ecef, JobParams, MatchProduct};
use navhop_core::events::EventKind;
use navhop_core::layout;
use navhop_core::registry::JobStatus;
use navhop_core::runtime::TaskOutcome;
use navhop_core::sim::SimCluster;
use navhop_core::store::{BlobStore, MemStore};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Compares against a committed file; `NAVHOP_BLESS=1` rewrites it instead.
fn golden(name: &str, actual: &str) {
    let path = fixture(name);
    if std::env::var_os("NAVHOP_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
    }
    let want = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(want == actual, "{name} differs from the committed fixture");
}

/// Exhaustive nearest neighbour, written independently of the library.
fn brute_force(fine: &[(f64, f64)], coarse: &[(f64, f64)], radius: f64) -> Vec<Option<(usize, f64)>> {
    let r = 6371.0_f64;
    let vec3 = |(lat, lon): (f64, f64)| {
        let (p, l) = (lat * std::f64::consts::PI / 180.0, lon * std::f64::consts::PI / 180.0);
        [r * p.cos() * l.cos(), r * p.cos() * l.sin(), r * p.sin()]
    };
    let sep = |a: [f64; 3], b: [f64; 3]| {
        let c = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
        let cn = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        cn.atan2(a[0] * b[0] + a[1] * b[1] + a[2] * b[2])
    };
    fine.iter()
        .map(|&f| {
            let fv = vec3(f);
            let mut best: Option<(usize, f64)> = None;
            for (ci, &c) in coarse.iter().enumerate() {
                let d = sep(fv, vec3(c));
                if d <= radius && best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((ci, d));
                }
            }
            best
        })
        .collect()
}

fn assert_matches_oracle(product: &MatchProduct, oracle: &[Option<(usize, f64)>]) {
    let mut pairs = product.pairs.iter();
    let mut unmatched = product.unmatched.iter();
    for (fi, want) in oracle.iter().enumerate() {
        match want {
            Some((ci, d)) => {
                let p = pairs.next().expect("missing pair");
                assert_eq!((p.fine, p.coarse), (fi, *ci));
                assert!((p.distance - d).abs() <= 1e-12 * d.abs().max(f64::MIN_POSITIVE), "{} vs {d}", p.distance);
            }
            None => assert_eq!(unmatched.next(), Some(&fi)),
        }
    }
    assert!(pairs.next().is_none() && unmatched.next().is_none());
}

fn latlon(g: &colocation::Granule) -> Vec<(f64, f64)> {
    g.samples.iter().map(|s| (s.lat, s.lon)).collect()
}

fn ecef(points: &[(f64, f64)]) -> Vec<Ecef> {
    points.iter().map(|&(la, lo)| to_ecef(la, lo)).collect()
}

#[test]
fn seed7_fixture_is_frozen() {
    let (fine, coarse) = gen_granules(7, 100, 20);
    golden("seed7_fine.txt", &fine.to_text());
    golden("seed7_coarse.txt", &coarse.to_text());
    let product = match_footprints(&ecef(&latlon(&fine)), &ecef(&latlon(&coarse)), 0.05);
    golden("seed7_match.txt", &product.to_text());
    assert!(!product.pairs.is_empty() && !product.unmatched.is_empty());
}

#[test]
fn seed7_matches_brute_force() {
    let (fine, coarse) = gen_granules(7, 100, 20);
    let (f, c) = (latlon(&fine), latlon(&coarse));
    let product = match_footprints(&ecef(&f), &ecef(&c), 0.05);
    assert_matches_oracle(&product, &brute_force(&f, &c, 0.05));
}

type Instance = (Vec<(f64, f64)>, Vec<(f64, f64)>, f64);

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.gen_range(1..=200);
    let m = rng.gen_range(1..=(10_000 / n).min(100));
    // mix of local scenes and whole-globe scatter
    let span = if rng.gen_bool(0.5) { 10.0 } else { 89.0 };
    let mut pts = |k| {
        (0..k)
            .map(|_| (rng.gen_range(-span..=span), rng.gen_range(-179.0..=180.0)))
            .collect::<Vec<_>>()
    };
    let (f, c) = (pts(n), pts(m));
    let radius = rng.gen_range(0.005..0.3);
    (f, c, radius)
}

#[test]
fn random_instances_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..200 {
        let (f, c, radius) = random_instance(&mut rng);
        assert!(f.len() * c.len() <= 10_000);
        assert_matches_oracle(&match_footprints(&ecef(&f), &ecef(&c), radius), &brute_force(&f, &c, radius));
    }
}

proptest! {
    #[test]
    fn product_invariants(seed in any::<u64>(), n in 1usize..60, m in 1usize..30, radius in 0.001f64..0.5) {
        let (fine, coarse) = gen_granules(seed, n, m);
        let p = match_footprints(&ecef(&latlon(&fine)), &ecef(&latlon(&coarse)), radius);
        let mut seen: Vec<usize> = p.pairs.iter().map(|x| x.fine).chain(p.unmatched.iter().copied()).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        prop_assert!(p.pairs.iter().all(|x| x.distance <= radius && x.coarse < m));
        prop_assert_eq!(MatchProduct::from_text(&p.to_text()).unwrap(), p);
    }

    #[test]
    fn longitude_shift_keeps_pairs(seed in any::<u64>(), shift in -150.0f64..150.0) {
        let (fine, coarse) = gen_granules(seed, 40, 10);
        let moved = |g: &colocation::Granule| -> Vec<(f64, f64)> {
            g.samples.iter().map(|s| (s.lat, s.lon + shift)).collect()
        };
        let a = match_footprints(&ecef(&latlon(&fine)), &ecef(&latlon(&coarse)), 0.05);
        let b = match_footprints(&ecef(&moved(&fine)), &ecef(&moved(&coarse)), 0.05);
        let idx = |p: &MatchProduct| p.pairs.iter().map(|x| (x.coarse, x.fine)).collect::<Vec<_>>();
        prop_assert_eq!(idx(&a), idx(&b));
    }
}

fn run_variant(app: &str, data_node: Option<&str>) -> (Arc<SimCluster>, Vec<u8>) {
    let store: Arc<dyn BlobStore> = Arc::new(MemStore::new());
    let c = SimCluster::new(store.clone(), colocation::all_apps());
    c.add_node("A");
    c.add_node("B");
    let params = JobParams {
        radius: 0.05,
        data_node: data_node.map(str::to_string),
    };
    let keys = colocation::stage_inputs(store.as_ref(), "1", 7, 100, 20, &params).unwrap();
    c.registry.lock().unwrap().submit("1", app, &keys).unwrap();
    let outcomes = c.pull("A").unwrap();
    assert!(
        matches!(outcomes.last().unwrap().1, TaskOutcome::Completed(_)),
        "{app}: {outcomes:?}"
    );
    assert_eq!(c.registry.lock().unwrap().get_job("1").unwrap().status, JobStatus::Finished);
    let product = store.get(&layout::product_key("1", "match.txt").unwrap()).unwrap();
    (c, product)
}

#[test]
fn all_variants_produce_the_same_product() {
    let (_, baseline) = run_variant(colocation::SEQUENTIAL_APP, None);
    let (_, published) = run_variant(colocation::PUBLISH_APP, None);
    let (_, hopped) = run_variant(colocation::HOP_APP, Some("B"));
    assert_eq!(published, baseline);
    assert_eq!(hopped, baseline);
    let (fine, coarse) = gen_granules(7, 100, 20);
    let expected = match_footprints(&ecef(&latlon(&fine)), &ecef(&latlon(&coarse)), 0.05).to_text();
    assert_eq!(baseline, expected.into_bytes());
}

#[test]
fn publish_variant_checkpoints_twice_then_finishes() {
    let (c, _) = run_variant(colocation::PUBLISH_APP, None);
    let published: Vec<String> = c
        .sink
        .events()
        .into_iter()
        .filter(|e| e.kind == EventKind::Published)
        .map(|e| e.detail)
        .collect();
    assert_eq!(published, ["ckpt", "ckpt", "finished"]);
}

#[test]
fn hop_variant_node_sequence() {
    let (c, _) = run_variant(colocation::HOP_APP, Some("B"));
    let m = colocation::build_hop_variant();
    let mut body_nodes = Vec::new();
    for e in c.sink.events() {
        if e.kind != EventKind::StageStart {
            continue;
        }
        let stage = &m.stages[e.stage.unwrap() as usize];
        if !stage.label.starts_with("hop") {
            body_nodes.push(e.node);
        }
    }
    assert_eq!(body_nodes, ["B", "B", "A", "A", "A", "B"]);
    let hops = c.sink.events().into_iter().filter(|e| e.kind == EventKind::HopAcked).count();
    assert_eq!(hops, 3);
}

#[test]
fn hop_to_the_current_node_stays_put() {
    let (c, product) = run_variant(colocation::HOP_APP, Some("A"));
    let (_, baseline) = run_variant(colocation::SEQUENTIAL_APP, None);
    assert_eq!(product, baseline);
    let events = c.sink.events();
    assert!(events.iter().all(|e| e.node == "A"));
    assert!(!events.iter().any(|e| e.kind == EventKind::HopRequested || e.kind == EventKind::CmiWritten));
}

#[test]
fn checkpoint_after_reads_is_smaller_than_after_vectors() {
    let (c, _) = run_variant(colocation::PUBLISH_APP, None);
    let sizes: Vec<u64> = c
        .sink
        .events()
        .into_iter()
        .filter(|e| e.kind == EventKind::CmiWritten)
        .map(|e| e.bytes.unwrap())
        .collect();
    assert_eq!(sizes.len(), 2);
    assert!(sizes[0] < sizes[1], "{sizes:?}");
}
