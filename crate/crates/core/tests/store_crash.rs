//! Interrupts an atomic replace at every step it exposes and checks that the
//! blob left behind is always the complete old or the complete new image.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use navhop_core::cmi::{decode_cmi, encode_cmi_at};
use navhop_core::layout;
use navhop_core::store::{BlobStore, FaultHook, Interrupted, LocalDirStore, MemStore, StoreError};

const OFF: usize = usize::MAX;

/// Fails the step whose index equals `target`; counts steps in `seen`.
#[derive(Default)]
struct Trap {
    target: AtomicUsize,
    seen: AtomicUsize,
}

impl Trap {
    fn hook(self: &Arc<Self>) -> FaultHook {
        let t = self.clone();
        t.target.store(OFF, Ordering::SeqCst);
        Arc::new(move |_, _| {
            let n = t.seen.fetch_add(1, Ordering::SeqCst);
            if n == t.target.load(Ordering::SeqCst) {
                Err(Interrupted)
            } else {
                Ok(())
            }
        })
    }

    fn arm(&self, target: usize) {
        self.seen.store(0, Ordering::SeqCst);
        self.target.store(target, Ordering::SeqCst);
    }
}

fn sweep(store: &dyn BlobStore, trap: &Trap) -> (usize, usize) {
    let old = encode_cmi_at("9", 1, 2, &vec![0xAA; 3000], 1_700_000_000);
    let new = encode_cmi_at("9", 2, 5, &vec![0x55; 5000], 1_700_000_100);
    let key = layout::cmi_key("9", 1).unwrap();
    let mut outcomes = (0, 0);
    for target in 0.. {
        trap.arm(OFF);
        store.put_atomic(&key, &old).unwrap();
        trap.arm(target);
        let res = store.put_atomic(&key, &new);
        trap.arm(OFF);

        let after = store.get(&key).unwrap();
        decode_cmi(&after).unwrap_or_else(|e| panic!("torn blob after step {target}: {e}"));
        if after == old {
            outcomes.0 += 1;
        } else {
            assert!(after == new, "blob is neither old nor new after step {target}");
            outcomes.1 += 1;
        }
        match res {
            Ok(_) => break,
            Err(e) => assert_eq!(e, StoreError::Interrupted),
        }
    }
    assert!(outcomes.0 > 0 && outcomes.1 > 0, "{outcomes:?}");
    outcomes
}

#[test]
fn local_dir_store_is_old_or_new_at_every_step() {
    let dir = tempfile::tempdir().unwrap();
    let trap = Arc::new(Trap::default());
    let store = LocalDirStore::open(dir.path()).unwrap().with_chunk_size(1024).with_hook(trap.hook());
    let (old, new) = sweep(&store, &trap);
    // begin, temp, four partial chunks and sync precede the rename
    assert_eq!(old, 7);
    assert!(new >= 1);
    let names: Vec<_> = store.list("job-9").unwrap().into_iter().map(|m| m.key.to_string()).collect();
    assert_eq!(names, ["job-9/ckpt-0000000001.cmi"]);
}

#[test]
fn mem_store_is_old_or_new_at_every_step() {
    let trap = Arc::new(Trap::default());
    let store = MemStore::with_hook(trap.hook());
    sweep(&store, &trap);
}
