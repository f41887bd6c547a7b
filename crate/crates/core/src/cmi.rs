//! Checkpoint memory images and restart manifests.
//!
//! A checkpoint image (`.cmi`) is a small binary container around an
//! application-serialized task state. All integers are little-endian and
//! fixed width; strings are `u16` length-prefixed UTF-8. The trailing
//! SHA-256 digest covers every byte before it, so a truncated or
//! bit-flipped image is always refused. See `FORMAT.md` for the layout.
//!
//! A restart manifest (`.manifest`) names the image blob and the entry point
//! to resume at. The manifest is the commit point of a checkpoint: writers
//! upload the image first and the manifest second.

use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use crate::kvdoc::{KvDoc, KvError};

pub const CMI_MAGIC: [u8; 4] = *b"NHCM";
pub const CMI_FORMAT_VERSION: u16 = 1;
pub const DIGEST_LEN: usize = 32;

/// Bytes in an encoded image besides the job id and the payload.
pub const CMI_FIXED_OVERHEAD: usize = 4 + 2 + 2 + 8 + 4 + 8 + 8 + DIGEST_LEN;

pub const MANIFEST_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CmiError {
    #[error("not a checkpoint image")]
    BadMagic,
    #[error("checkpoint image digest mismatch (corrupt or truncated)")]
    DigestMismatch,
    #[error("unsupported checkpoint format version {0}")]
    VersionUnsupported(u16),
    #[error("malformed checkpoint image: {0}")]
    Malformed(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointImage {
    pub format_version: u16,
    pub job_id: String,
    pub sequence: u64,
    /// Index of the next stage to execute on resume.
    pub stage: u32,
    /// Unix seconds.
    pub created_at: i64,
    pub payload: Vec<u8>,
    pub digest: [u8; DIGEST_LEN],
}

impl CheckpointImage {
    pub fn payload_length(&self) -> u64 {
        self.payload.len() as u64
    }

    pub fn digest_hex(&self) -> String {
        hex_digest(&self.digest)
    }
}

pub fn sha256(bytes: &[u8]) -> [u8; DIGEST_LEN] {
    Sha256::digest(bytes).into()
}

pub fn hex_digest(digest: &[u8; DIGEST_LEN]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn unix_now() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0)
}

/// Encodes an image stamped with the current time.
pub fn encode_cmi(job_id: &str, sequence: u64, stage: u32, payload: &[u8]) -> Vec<u8> {
    encode_cmi_at(job_id, sequence, stage, payload, unix_now())
}

/// Encodes an image with an explicit creation time. Deterministic.
///
/// Panics if `sequence` is zero or the job id is longer than `u16::MAX` bytes.
pub fn encode_cmi_at(
    job_id: &str,
    sequence: u64,
    stage: u32,
    payload: &[u8],
    created_at: i64,
) -> Vec<u8> {
    assert!(sequence >= 1, "checkpoint sequence starts at 1");
    let id_len = u16::try_from(job_id.len()).expect("job id too long for a checkpoint image");
    let mut out = Vec::with_capacity(CMI_FIXED_OVERHEAD + job_id.len() + payload.len());
    out.extend_from_slice(&CMI_MAGIC);
    out.extend_from_slice(&CMI_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&id_len.to_le_bytes());
    out.extend_from_slice(job_id.as_bytes());
    out.extend_from_slice(&sequence.to_le_bytes());
    out.extend_from_slice(&stage.to_le_bytes());
    out.extend_from_slice(&created_at.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    let digest = sha256(&out);
    out.extend_from_slice(&digest);
    out
}

/// A blob is treated as a (possibly damaged) image when its leading bytes
/// agree with the magic in at least three of four positions. Anything else
/// is not an image at all.
fn looks_like_cmi(blob: &[u8]) -> bool {
    if blob.is_empty() {
        return false;
    }
    let n = blob.len().min(4);
    let matching = blob[..n]
        .iter()
        .zip(CMI_MAGIC.iter())
        .filter(|(a, b)| a == b)
        .count();
    if n < 4 {
        matching == n
    } else {
        matching >= 3
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CmiError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.buf.len())
            .ok_or(CmiError::Malformed("field runs past end of image"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CmiError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn decode_cmi(blob: &[u8]) -> Result<CheckpointImage, CmiError> {
    if !looks_like_cmi(blob) {
        return Err(CmiError::BadMagic);
    }
    if blob.len() < CMI_FIXED_OVERHEAD {
        return Err(CmiError::DigestMismatch);
    }
    let (body, stored) = blob.split_at(blob.len() - DIGEST_LEN);
    let digest = sha256(body);
    if digest.as_slice() != stored {
        return Err(CmiError::DigestMismatch);
    }

    let mut r = Reader { buf: body, pos: 0 };
    if r.array::<4>()? != CMI_MAGIC {
        return Err(CmiError::BadMagic);
    }
    let format_version = u16::from_le_bytes(r.array()?);
    if format_version != CMI_FORMAT_VERSION {
        return Err(CmiError::VersionUnsupported(format_version));
    }
    let id_len = u16::from_le_bytes(r.array()?) as usize;
    let job_id = std::str::from_utf8(r.take(id_len)?)
        .map_err(|_| CmiError::Malformed("job id is not UTF-8"))?
        .to_string();
    let sequence = u64::from_le_bytes(r.array()?);
    let stage = u32::from_le_bytes(r.array()?);
    let created_at = i64::from_le_bytes(r.array()?);
    let payload_length = u64::from_le_bytes(r.array()?);
    let remaining = (body.len() - r.pos) as u64;
    if payload_length != remaining {
        return Err(CmiError::Malformed("payload length disagrees with image size"));
    }
    if sequence == 0 {
        return Err(CmiError::Malformed("sequence must be at least 1"));
    }
    let payload = r.take(remaining as usize)?.to_vec();
    Ok(CheckpointImage {
        format_version,
        job_id,
        sequence,
        stage,
        created_at,
        payload,
        digest,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ManifestError {
    #[error("manifest is missing field {0:?}")]
    MissingField(String),
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("manifest disagrees with checkpoint image: {0}")]
    Mismatch(String),
}

impl From<KvError> for ManifestError {
    fn from(e: KvError) -> Self {
        match e {
            KvError::MissingField(f) => ManifestError::MissingField(f),
            other => ManifestError::MalformedManifest(other.to_string()),
        }
    }
}

/// Portable replacement for a restart shell script.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RestartManifest {
    pub job_id: String,
    pub cmi_blob_key: String,
    pub app_name: String,
    pub stage: u32,
    pub sequence: u64,
}

impl RestartManifest {
    pub fn encode(&self) -> Vec<u8> {
        KvDoc::new()
            .with("manifest_version", MANIFEST_VERSION)
            .with("job_id", &self.job_id)
            .with("app_name", &self.app_name)
            .with("cmi_blob_key", &self.cmi_blob_key)
            .with("stage", self.stage)
            .with("sequence", self.sequence)
            .encode()
            .into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ManifestError> {
        let doc = KvDoc::decode(bytes)?;
        let version = doc.require("manifest_version")?;
        if version != MANIFEST_VERSION {
            return Err(ManifestError::MalformedManifest(format!(
                "unsupported manifest version {version:?}"
            )));
        }
        let manifest = Self {
            job_id: doc.require("job_id")?.to_string(),
            app_name: doc.require("app_name")?.to_string(),
            cmi_blob_key: doc.require("cmi_blob_key")?.to_string(),
            stage: doc.require_parsed("stage")?,
            sequence: doc.require_parsed("sequence")?,
        };
        if doc.len() != 6 {
            return Err(ManifestError::MalformedManifest(
                "unexpected extra fields".into(),
            ));
        }
        if manifest.job_id.is_empty() || manifest.app_name.is_empty() {
            return Err(ManifestError::MalformedManifest(
                "job_id and app_name must be non-empty".into(),
            ));
        }
        Ok(manifest)
    }

    /// Cross-check performed before any restart.
    pub fn check_against(&self, image: &CheckpointImage) -> Result<(), ManifestError> {
        if self.job_id != image.job_id {
            return Err(ManifestError::Mismatch(format!(
                "job id {:?} vs {:?}",
                self.job_id, image.job_id
            )));
        }
        if self.stage != image.stage {
            return Err(ManifestError::Mismatch(format!(
                "stage {} vs {}",
                self.stage, image.stage
            )));
        }
        if self.sequence != image.sequence {
            return Err(ManifestError::Mismatch(format!(
                "sequence {} vs {}",
                self.sequence, image.sequence
            )));
        }
        Ok(())
    }
}

pub fn encode_manifest(m: &RestartManifest) -> Vec<u8> {
    m.encode()
}

pub fn decode_manifest(bytes: &[u8]) -> Result<RestartManifest, ManifestError> {
    RestartManifest::decode(bytes)
}
