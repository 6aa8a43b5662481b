//! Content-addressed response cache.
//!
//! One file per entry under `<root>/<first two hex chars>/<hash>.json`,
//! where the hash is the canonical request digest. Writes go through a
//! uniquely-named temp file in the destination directory followed by a
//! rename, so concurrent readers only ever observe complete entries and
//! concurrent writers of the same entry settle on one winner. There is no
//! in-flight coalescing: two threads missing on the same key at the same
//! moment may both dispatch, and the later write wins harmlessly.
//!
//! A corrupt entry (truncated file, schema drift) is treated as a miss and
//! overwritten on the next dispatch rather than failing the run.

use std::fs;
use std::io::ErrorKind;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{BackendRequest, BackendResponse};
use crate::error::Result;

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    request: serde_json::Value,
    response: BackendResponse,
    created_unix: u64,
}

/// Filesystem-backed cache keyed by request hash.
pub struct CacheStore {
    root: PathBuf,
    tmp_counter: AtomicU64,
}

impl CacheStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(CacheStore { root, tmp_counter: AtomicU64::new(0) })
    }

    pub fn root(&self) -> &std::path::Path {
        &self.root
    }

    fn entry_path(&self, hash: &str) -> PathBuf {
        let shard = hash.get(..2).unwrap_or("00");
        self.root.join(shard).join(format!("{hash}.json"))
    }

    /// Look up a response. Absent and corrupt entries both read as `None`.
    pub fn get(&self, hash: &str) -> Result<Option<BackendResponse>> {
        let bytes = match fs::read(self.entry_path(hash)) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        match serde_json::from_slice::<CacheEntry>(&bytes) {
            Ok(entry) => Ok(Some(entry.response)),
            Err(_) => Ok(None),
        }
    }

    /// Persist a response atomically (temp file + rename in one directory).
    pub fn put(&self, hash: &str, request: &BackendRequest, response: &BackendResponse) -> Result<()> {
        let path = self.entry_path(hash);
        let dir = path.parent().expect("entry path has a shard directory");
        fs::create_dir_all(dir)?;
        let entry = CacheEntry {
            request: serde_json::to_value(request)?,
            response: BackendResponse { from_cache: false, ..response.clone() },
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let tmp = dir.join(format!(
            ".tmp-{hash}-{}-{}",
            std::process::id(),
            self.tmp_counter.fetch_add(1, Ordering::Relaxed)
        ));
        fs::write(&tmp, serde_json::to_vec(&entry)?)?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Message, RequestKind, SamplingParams, Usage};
    use super::*;

    fn request() -> BackendRequest {
        BackendRequest {
            kind: RequestKind::Generate,
            model: "m".into(),
            messages: vec![Message::user("hello")],
            params: SamplingParams::story_generation(),
        }
    }

    fn response(text: &str) -> BackendResponse {
        BackendResponse {
            texts: vec![text.into()],
            token_logprobs: None,
            embeddings: None,
            usage: Usage { prompt_tokens: 1, completion_tokens: 2 },
            from_cache: false,
        }
    }

    #[test]
    fn put_then_get_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let store = CacheStore::open(dir.path()).unwrap();
        let req = request();
        let hash = req.request_hash();
        assert!(store.get(&hash).unwrap().is_none());
        store.put(&hash, &req, &response("out")).unwrap();
        let got = store.get(&hash).unwrap().unwrap();
        assert_eq!(got.texts, vec!["out".to_string()]);
        assert_eq!(got.usage.completion_tokens, 2);
    }

    #[test]
    fn entries_are_sharded_by_hash_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let store = CacheStore::open(dir.path()).unwrap();
        let req = request();
        let hash = req.request_hash();
        store.put(&hash, &req, &response("x")).unwrap();
        let expected = dir.path().join(&hash[..2]).join(format!("{hash}.json"));
        assert!(expected.is_file());
    }

    #[test]
    fn corrupt_entries_read_as_misses() {
        let dir = tempfile::tempdir().unwrap();
        let store = CacheStore::open(dir.path()).unwrap();
        let req = request();
        let hash = req.request_hash();
        store.put(&hash, &req, &response("x")).unwrap();
        fs::write(store.entry_path(&hash), b"{ not json").unwrap();
        assert!(store.get(&hash).unwrap().is_none());
        // and the entry can be rewritten
        store.put(&hash, &req, &response("y")).unwrap();
        assert_eq!(store.get(&hash).unwrap().unwrap().texts, vec!["y".to_string()]);
    }

    #[test]
    fn stored_responses_never_carry_the_cache_flag() {
        let dir = tempfile::tempdir().unwrap();
        let store = CacheStore::open(dir.path()).unwrap();
        let req = request();
        let hash = req.request_hash();
        let mut resp = response("x");
        resp.from_cache = true; // caller bug; the store must not persist it
        store.put(&hash, &req, &resp).unwrap();
        assert!(!store.get(&hash).unwrap().unwrap().from_cache);
    }

    #[test]
    fn concurrent_writers_settle_on_a_complete_entry() {
        let dir = tempfile::tempdir().unwrap();
        let store = std::sync::Arc::new(CacheStore::open(dir.path()).unwrap());
        let req = request();
        let hash = req.request_hash();
        let mut handles = Vec::new();
        for t in 0..8 {
            let store = std::sync::Arc::clone(&store);
            let req = req.clone();
            let hash = hash.clone();
            handles.push(std::thread::spawn(move || {
                store.put(&hash, &req, &response(&format!("v{t}"))).unwrap();
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        let got = store.get(&hash).unwrap().unwrap();
        assert_eq!(got.texts.len(), 1);
        assert!(got.texts[0].starts_with('v'));
    }
}
