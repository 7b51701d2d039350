use std::collections::{HashMap, HashSet};
use std::sync::Mutex;

use base64::Engine;
use sha2::{Digest, Sha256};

use crate::api::ImageRef;

/// Content-addressed PNG store.
#[derive(Default)]
pub struct BlobStore {
    blobs: Mutex<HashMap<String, Vec<u8>>>,
}

pub fn hash_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl BlobStore {
    pub fn put(&self, bytes: Vec<u8>) -> String {
        let hash = hash_hex(&bytes);
        self.blobs.lock().expect("blob lock").entry(hash.clone()).or_insert(bytes);
        hash
    }

    pub fn get(&self, hash: &str) -> Option<Vec<u8>> {
        self.blobs.lock().expect("blob lock").get(hash).cloned()
    }

    /// Drop every blob not in `live`.
    pub fn retain(&self, live: &HashSet<String>) -> usize {
        let mut blobs = self.blobs.lock().expect("blob lock");
        let before = blobs.len();
        blobs.retain(|k, _| live.contains(k));
        before - blobs.len()
    }

    pub fn len(&self) -> usize {
        self.blobs.lock().expect("blob lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn image_ref(hash: &str, bytes: Option<&[u8]>) -> ImageRef {
    ImageRef {
        hash: hash.to_string(),
        url: format!("/blobs/{hash}"),
        png_base64: bytes.map(|b| base64::engine::general_purpose::STANDARD.encode(b)),
    }
}
