//! Framing and message conventions shared by every service.
//!
//! A frame is a 4-byte big-endian body length followed by that many bytes of
//! UTF-8 kvdoc text. A connection carries one request frame and at most one
//! response frame.

use std::io::{self, Read, Write};

use navhop_core::kvdoc::KvDoc;
use navhop_core::registry::{JobRecord, JobStatus};
use navhop_core::runtime::LinkError;
use navhop_core::store::BlobKey;

pub const MAX_FRAME: u32 = 16 * 1024 * 1024;

pub const SERVICE: &str = "service";
pub const RESULT: &str = "result";
pub const ERROR: &str = "error";
pub const MESSAGE: &str = "message";

pub fn encode_frame(body: &[u8]) -> io::Result<Vec<u8>> {
    let len = u32::try_from(body.len())
        .ok()
        .filter(|&n| n <= MAX_FRAME)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(body);
    Ok(out)
}

pub fn write_frame(w: &mut impl Write, body: &[u8]) -> io::Result<()> {
    w.write_all(&encode_frame(body)?)?;
    w.flush()
}

/// Reads one frame. `Ok(None)` means the peer closed before sending a length.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(io::ErrorKind::UnexpectedEof.into()),
            n => got += n,
        }
    }
    let len = u32::from_be_bytes(len);
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes")));
    }
    let mut body = vec![0; len as usize];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

pub fn request(service: &str) -> KvDoc {
    KvDoc::new().with(SERVICE, service)
}

pub fn ok() -> KvDoc {
    KvDoc::new().with(RESULT, "ok")
}

pub fn error(kind: &str, message: impl ToString) -> KvDoc {
    KvDoc::new()
        .with(RESULT, "error")
        .with(ERROR, kind)
        .with(MESSAGE, message.to_string().replace('\n', " "))
}

/// Splits a reply into its payload or the error it carries.
pub fn into_result(reply: KvDoc) -> Result<KvDoc, LinkError> {
    match reply.get(RESULT) {
        Some("ok") => Ok(reply),
        Some("error") => Err(LinkError::rejected(
            reply.get(ERROR).unwrap_or("Unknown"),
            reply.get(MESSAGE).unwrap_or(""),
        )),
        other => Err(LinkError::rejected("BadReply", format!("result field {other:?}"))),
    }
}

pub fn bad_request(e: impl ToString) -> LinkError {
    LinkError::rejected("BadRequest", e.to_string())
}

/// Comma-separated key list; blob keys never contain commas.
pub fn join_keys(keys: &[BlobKey]) -> String {
    keys.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn split_keys(s: &str) -> Result<Vec<BlobKey>, LinkError> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|k| BlobKey::parse(k).map_err(bad_request)).collect()
}

pub fn split_list(s: &str) -> Vec<String> {
    if s.is_empty() {
        Vec::new()
    } else {
        s.split(',').map(str::to_string).collect()
    }
}

/// Writes a job record's fields into `doc`. The job status goes under
/// `job_status` because `status` would read like the reply status.
pub fn put_record(doc: &mut KvDoc, rec: &JobRecord) {
    doc.set("job_id", &rec.job_id)
        .set("job_status", rec.status)
        .set("app_name", &rec.app_name)
        .set("input_keys", join_keys(&rec.input_keys))
        .set(
            "cmi_manifest_key",
            rec.cmi_manifest_key.as_ref().map(ToString::to_string).unwrap_or_default(),
        )
        .set("product_keys", join_keys(&rec.product_keys))
        .set("ckpt_sequence", rec.ckpt_sequence)
        .set("claimed_by", rec.claimed_by.as_deref().unwrap_or(""))
        .set("updated_at", rec.updated_at);
}

pub fn take_record(doc: &KvDoc) -> Result<JobRecord, LinkError> {
    let field = |k| doc.require(k).map_err(bad_request);
    let status = field("job_status")?;
    let manifest = field("cmi_manifest_key")?;
    let claimed = field("claimed_by")?;
    Ok(JobRecord {
        job_id: field("job_id")?.to_string(),
        status: JobStatus::parse(status).ok_or_else(|| bad_request(format!("job status {status:?}")))?,
        app_name: field("app_name")?.to_string(),
        input_keys: split_keys(field("input_keys")?)?,
        cmi_manifest_key: if manifest.is_empty() {
            None
        } else {
            Some(BlobKey::parse(manifest).map_err(bad_request)?)
        },
        product_keys: split_keys(field("product_keys")?)?,
        ckpt_sequence: doc.require_parsed("ckpt_sequence").map_err(bad_request)?,
        claimed_by: (!claimed.is_empty()).then(|| claimed.to_string()),
        updated_at: doc.require_parsed("updated_at").map_err(bad_request)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_layout() {
        let f = encode_frame(b"service=health\n").unwrap();
        assert_eq!(&f[..4], &[0, 0, 0, 15]);
        assert_eq!(&f[4..], b"service=health\n");
        let mut r = &f[..];
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"service=health\n");
        assert_eq!(read_frame(&mut r).unwrap(), None);
    }

    #[test]
    fn oversized_and_short_frames() {
        let mut big = &(MAX_FRAME + 1).to_be_bytes()[..];
        assert!(read_frame(&mut big).is_err());
        let mut short = &[0u8, 0, 0, 9, b'a'][..];
        assert!(read_frame(&mut short).is_err());
        let mut torn = &[0u8, 0][..];
        assert!(read_frame(&mut torn).is_err());
    }

    #[test]
    fn record_round_trip() {
        let rec = JobRecord {
            job_id: "2".into(),
            status: JobStatus::Ckpt,
            app_name: "colocation".into(),
            input_keys: vec![BlobKey::parse("job-2/input/fine.txt").unwrap(), BlobKey::parse("job-2/input/coarse.txt").unwrap()],
            cmi_manifest_key: Some(BlobKey::parse("job-2/current.manifest").unwrap()),
            product_keys: vec![],
            ckpt_sequence: 3,
            claimed_by: None,
            updated_at: 1_700_000_000,
        };
        let mut doc = ok();
        put_record(&mut doc, &rec);
        let decoded = KvDoc::decode(doc.encode().as_bytes()).unwrap();
        assert_eq!(take_record(&decoded).unwrap(), rec);
    }

    #[test]
    fn error_reply() {
        let e = into_result(error("StaleSequence", "stale sequence 1 (current 2)")).unwrap_err();
        assert_eq!(e.kind(), "StaleSequence");
        assert!(into_result(ok()).is_ok());
    }
}
