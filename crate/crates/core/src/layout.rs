//! Blob key conventions shared by every node.
//!
//! ```text
//! job-<id>/input/<name>          job inputs
//! job-<id>/ckpt-<seq>.cmi        checkpoint images, seq zero-padded to 10 digits
//! job-<id>/current.manifest      restart manifest (the checkpoint commit point)
//! job-<id>/product/<name>        published products
//! ```

use crate::store::{BlobKey, StoreError};

pub const MANIFEST_NAME: &str = "current.manifest";
const CMI_PREFIX: &str = "ckpt-";
const CMI_SUFFIX: &str = ".cmi";

pub fn job_namespace(job_id: &str) -> String {
    format!("job-{job_id}")
}

pub fn manifest_key(job_id: &str) -> Result<BlobKey, StoreError> {
    BlobKey::new(job_namespace(job_id), MANIFEST_NAME)
}

pub fn cmi_key(job_id: &str, sequence: u64) -> Result<BlobKey, StoreError> {
    BlobKey::new(job_namespace(job_id), format!("{CMI_PREFIX}{sequence:010}{CMI_SUFFIX}"))
}

pub fn input_key(job_id: &str, name: &str) -> Result<BlobKey, StoreError> {
    BlobKey::new(job_namespace(job_id), format!("input/{name}"))
}

pub fn product_key(job_id: &str, name: &str) -> Result<BlobKey, StoreError> {
    BlobKey::new(job_namespace(job_id), format!("product/{name}"))
}

/// Sequence number encoded in a checkpoint image key name, if it is one.
pub fn cmi_sequence(name: &str) -> Option<u64> {
    name.strip_prefix(CMI_PREFIX)?
        .strip_suffix(CMI_SUFFIX)?
        .parse()
        .ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys() {
        assert_eq!(cmi_key("2", 3).unwrap().to_string(), "job-2/ckpt-0000000003.cmi");
        assert_eq!(manifest_key("2").unwrap().to_string(), "job-2/current.manifest");
        assert_eq!(product_key("1", "match.txt").unwrap().to_string(), "job-1/product/match.txt");
        assert_eq!(cmi_sequence("ckpt-0000000003.cmi"), Some(3));
        assert_eq!(cmi_sequence("current.manifest"), None);
        assert!(manifest_key("bad id").is_err());
    }
}
