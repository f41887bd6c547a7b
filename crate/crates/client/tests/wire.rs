use std::io::{Cursor, ErrorKind, Write};
use std::net::TcpListener;
use std::thread;

use navhop_client::wire::{self, read_frame, write_frame, MAX_FRAME};
use navhop_client::{Client, SchedulerClient};
use navhop_core::kvdoc::KvDoc;
use navhop_core::registry::{JobRecord, JobStatus};
use navhop_core::runtime::LinkError;
use navhop_core::store::BlobKey;
use proptest::prelude::*;

#[test]
fn request_frame_bytes() {
    let body = wire::request("list_jobs").encode();
    let mut out = Vec::new();
    write_frame(&mut out, body.as_bytes()).unwrap();
    assert_eq!(out, b"\x00\x00\x00\x12service=list_jobs\n");
}

#[test]
fn error_reply_bytes() {
    let body = wire::error("StaleSequence", "sequence 1\nis not above 2").encode();
    assert_eq!(body, "result=error\nerror=StaleSequence\nmessage=sequence 1 is not above 2\n");
}

#[test]
fn short_and_oversized_frames() {
    assert!(read_frame(&mut Cursor::new(Vec::new())).unwrap().is_none());
    let e = read_frame(&mut Cursor::new(vec![0, 0])).unwrap_err();
    assert_eq!(e.kind(), ErrorKind::UnexpectedEof);
    let e = read_frame(&mut Cursor::new(vec![0, 0, 0, 5, b'a'])).unwrap_err();
    assert_eq!(e.kind(), ErrorKind::UnexpectedEof);
    let e = read_frame(&mut Cursor::new((MAX_FRAME + 1).to_be_bytes().to_vec())).unwrap_err();
    assert_eq!(e.kind(), ErrorKind::InvalidData);
}

proptest! {
    #[test]
    fn frames_round_trip(body in proptest::collection::vec(any::<u8>(), 0..4096)) {
        let mut out = Vec::new();
        write_frame(&mut out, &body).unwrap();
        prop_assert_eq!(out.len(), body.len() + 4);
        let mut r = Cursor::new(out);
        prop_assert_eq!(read_frame(&mut r).unwrap(), Some(body));
        prop_assert!(read_frame(&mut r).unwrap().is_none());
    }

    #[test]
    fn records_round_trip(
        id in "[a-z0-9]{1,12}",
        seq in any::<u64>(),
        at in any::<i64>(),
        claimed in proptest::option::of("[A-Za-z0-9-]{1,8}"),
        ckpt in any::<bool>(),
    ) {
        let key = |name: &str| BlobKey::parse(&format!("job-{id}/{name}")).unwrap();
        let rec = JobRecord {
            job_id: id.clone(),
            status: if ckpt { JobStatus::Ckpt } else { JobStatus::New },
            app_name: "colocation".into(),
            input_keys: vec![key("input/fine.txt"), key("input/coarse.txt")],
            cmi_manifest_key: ckpt.then(|| key("current.manifest")),
            product_keys: Vec::new(),
            ckpt_sequence: seq,
            claimed_by: claimed,
            updated_at: at,
        };
        let mut doc = wire::ok();
        wire::put_record(&mut doc, &rec);
        let back = KvDoc::decode(doc.encode().as_bytes()).unwrap();
        prop_assert_eq!(wire::take_record(&back).unwrap(), rec);
    }
}

/// Serves one connection with `reply`, or closes it unanswered.
fn one_shot(reply: Option<KvDoc>) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        let req = read_frame(&mut s).unwrap().unwrap();
        assert!(KvDoc::decode(&req).unwrap().get("service").is_some());
        if let Some(r) = reply {
            write_frame(&mut s, r.encode().as_bytes()).unwrap();
            s.flush().unwrap();
        }
    });
    addr
}

#[test]
fn error_replies_become_rejections() {
    let addr = one_shot(Some(wire::error("NotFound", "no job 9")));
    match SchedulerClient::new(addr).list_jobs_raw() {
        Err(LinkError::Rejected { kind, message }) => {
            assert_eq!(kind, "NotFound");
            assert_eq!(message, "no job 9");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_result_field_is_a_bad_reply() {
    let addr = one_shot(Some(KvDoc::new().with("jobs", "[]")));
    let e = Client::new(addr).call(&wire::request("list_jobs")).unwrap_err();
    assert_eq!(e.kind(), "BadReply");
}

#[test]
fn silence_and_no_listener_are_unreachable() {
    let addr = one_shot(None);
    let e = Client::new(addr).call(&wire::request("health")).unwrap_err();
    assert!(matches!(e, LinkError::Unreachable(_)), "{e:?}");

    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    drop(listener);
    let e = Client::new(addr).call(&wire::request("health")).unwrap_err();
    assert!(matches!(e, LinkError::Unreachable(_)), "{e:?}");
}

#[test]
fn documented_example_exchange() {
    let doc = include_str!("../../../PROTOCOL.md");
    let hex = |b: &[u8]| b.iter().map(|x| format!("{x:02x}")).collect::<String>();
    let req = wire::encode_frame(wire::request("get_job").with("job_id", "1").encode().as_bytes()).unwrap();
    let reply = wire::encode_frame(wire::error("NotFound", "job 1 not found").encode().as_bytes()).unwrap();
    assert_eq!((req.len(), reply.len()), (29, 56));
    let (req, reply) = (hex(&req), hex(&reply));
    assert!(doc.contains(&format!("{} {}", &req[..8], &req[8..])), "{req}");
    assert!(doc.contains(&format!("{} {}", &reply[..8], &reply[8..])), "{reply}");
}
