//! Content-addressed blob storage for representation assets.
//!
//! Layout under the root directory:
//! `assets/<first two hex>/<resourceId>` for bytes and `meta.ndjson` for
//! metadata records (last record per id wins on reload).

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::dtdo::{RepositoryDescriptor, ACCESS_HTTP_TEMPLATE, ACCESS_INTERNAL, RESOURCE_PLACEHOLDER};
use crate::Timestamp;

pub const DEFAULT_MAX_BYTES: u64 = 256 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum AssetError {
    #[error("asset of {size} bytes exceeds the limit of {max} bytes")]
    TooLarge { size: u64, max: u64 },
    #[error("asset `{0}` not found")]
    NotFound(String),
    #[error("stored bytes of `{0}` do not match their resource id")]
    Integrity(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AssetMetadata {
    pub resource_id: String,
    pub size_bytes: u64,
    pub format: String,
    pub modality: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub uploaded_at: Timestamp,
}

/// Lowercase hex SHA-256.
pub fn resource_id(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn is_resource_id(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

pub struct AssetRepository {
    root: PathBuf,
    max_bytes: u64,
    meta: RwLock<HashMap<String, AssetMetadata>>,
    meta_log: Mutex<File>,
    tmp_counter: AtomicU64,
}

impl AssetRepository {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, AssetError> {
        Self::open_with_limit(root, DEFAULT_MAX_BYTES)
    }

    pub fn open_with_limit(root: impl Into<PathBuf>, max_bytes: u64) -> Result<Self, AssetError> {
        let root = root.into();
        fs::create_dir_all(root.join("assets"))?;
        fs::create_dir_all(root.join("tmp"))?;
        let meta_path = root.join("meta.ndjson");
        let mut meta = HashMap::new();
        if meta_path.exists() {
            for line in BufReader::new(File::open(&meta_path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                // a torn trailing record from a crash is skipped
                if let Ok(m) = serde_json::from_str::<AssetMetadata>(&line) {
                    meta.insert(m.resource_id.clone(), m);
                }
            }
        }
        let meta_log = OpenOptions::new().create(true).append(true).open(&meta_path)?;
        Ok(AssetRepository {
            root,
            max_bytes,
            meta: RwLock::new(meta),
            meta_log: Mutex::new(meta_log),
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn max_bytes(&self) -> u64 {
        self.max_bytes
    }

    fn blob_path(&self, id: &str) -> PathBuf {
        self.root.join("assets").join(&id[..2]).join(id)
    }

    pub fn put(&self, bytes: &[u8], format: &str, modality: &str, name: Option<&str>) -> Result<String, AssetError> {
        let size = bytes.len() as u64;
        if size > self.max_bytes {
            return Err(AssetError::TooLarge {
                size,
                max: self.max_bytes,
            });
        }
        let id = resource_id(bytes);
        let path = self.blob_path(&id);
        if !path.exists() {
            fs::create_dir_all(path.parent().unwrap())?;
            let tmp = self.root.join("tmp").join(format!(
                "{id}.{}.{}",
                std::process::id(),
                self.tmp_counter.fetch_add(1, Ordering::Relaxed)
            ));
            {
                let mut f = File::create(&tmp)?;
                f.write_all(bytes)?;
                f.sync_all()?;
            }
            fs::rename(&tmp, &path)?;
        }

        let mut meta = self.meta.write().unwrap();
        let record = match meta.get(&id) {
            Some(existing) if name.is_none() || existing.name.as_deref() == name => return Ok(id),
            Some(existing) => AssetMetadata {
                name: name.map(str::to_string),
                ..existing.clone()
            },
            None => AssetMetadata {
                resource_id: id.clone(),
                size_bytes: size,
                format: format.to_string(),
                modality: modality.to_string(),
                name: name.map(str::to_string),
                uploaded_at: Timestamp::now(),
            },
        };
        let mut line = serde_json::to_string(&record).expect("metadata serialization");
        line.push('\n');
        let mut log = self.meta_log.lock().unwrap();
        log.write_all(line.as_bytes())?;
        log.flush()?;
        meta.insert(id.clone(), record);
        Ok(id)
    }

    pub fn stat(&self, id: &str) -> Result<AssetMetadata, AssetError> {
        if !is_resource_id(id) {
            return Err(AssetError::NotFound(id.to_string()));
        }
        self.meta
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| AssetError::NotFound(id.to_string()))
    }

    /// Returns the bytes after checking they still hash to `id`.
    pub fn get(&self, id: &str) -> Result<(Vec<u8>, AssetMetadata), AssetError> {
        let meta = self.stat(id)?;
        let bytes = match fs::read(self.blob_path(id)) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(AssetError::NotFound(id.to_string())),
            Err(e) => return Err(e.into()),
        };
        if resource_id(&bytes) != id {
            return Err(AssetError::Integrity(id.to_string()));
        }
        Ok((bytes, meta))
    }

    /// Number of stored blobs on disk.
    pub fn object_count(&self) -> Result<usize, AssetError> {
        let mut n = 0;
        for shard in fs::read_dir(self.root.join("assets"))? {
            n += fs::read_dir(shard?.path())?.count();
        }
        Ok(n)
    }

    pub fn list(&self) -> Vec<AssetMetadata> {
        let mut all: Vec<_> = self.meta.read().unwrap().values().cloned().collect();
        all.sort_by(|a, b| a.resource_id.cmp(&b.resource_id));
        all
    }

    #[doc(hidden)]
    pub fn blob_path_for_tests(&self, id: &str) -> PathBuf {
        self.blob_path(id)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AccessError {
    #[error("unknown access method `{0}`")]
    UnknownMethod(String),
    #[error("malformed url template for access method `{0}`")]
    MalformedTemplate(String),
}

pub fn render_access_url(repo: &RepositoryDescriptor, method: &str, resource_id: &str) -> Result<String, AccessError> {
    let m = repo
        .access_methods
        .iter()
        .find(|m| m.name == method)
        .ok_or_else(|| AccessError::UnknownMethod(method.to_string()))?;
    match m.kind.as_str() {
        ACCESS_HTTP_TEMPLATE => match &m.url_template {
            Some(t) if t.contains(RESOURCE_PLACEHOLDER) => Ok(t.replace(RESOURCE_PLACEHOLDER, resource_id)),
            _ => Err(AccessError::MalformedTemplate(method.to_string())),
        },
        ACCESS_INTERNAL => Ok(format!(
            "{}/dtds/v1/assets/{resource_id}",
            repo.base_uri.trim_end_matches('/')
        )),
        _ => Err(AccessError::UnknownMethod(format!("{method} (kind {})", m.kind))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::dtdo::AccessMethod;
    use crate::EntityId;

    fn repo_desc(methods: Vec<AccessMethod>) -> RepositoryDescriptor {
        RepositoryDescriptor {
            id: EntityId::ngsi("AssetRepositoryDescriptor", "r").unwrap(),
            base_uri: "http://localhost:8080".into(),
            access_methods: methods,
        }
    }

    #[test]
    fn put_get_stat() {
        let dir = tempfile::tempdir().unwrap();
        let repo = AssetRepository::open(dir.path()).unwrap();
        let id = repo.put(b"abc", "glb", "mesh", None).unwrap();
        assert_eq!(id, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert_eq!(repo.put(b"abc", "glb", "mesh", None).unwrap(), id);
        assert_eq!(repo.object_count().unwrap(), 1);
        let (bytes, meta) = repo.get(&id).unwrap();
        assert_eq!(bytes, b"abc");
        assert_eq!(meta.size_bytes, 3);
        assert_eq!((meta.format.as_str(), meta.modality.as_str()), ("glb", "mesh"));
        assert!(repo.blob_path_for_tests(&id).ends_with(format!("assets/ba/{id}")));
    }

    #[test]
    fn empty_blob() {
        let dir = tempfile::tempdir().unwrap();
        let repo = AssetRepository::open(dir.path()).unwrap();
        let id = repo.put(b"", "bin", "other", None).unwrap();
        assert_eq!(id, "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
        assert_eq!(repo.stat(&id).unwrap().size_bytes, 0);
    }

    #[test]
    fn unknown_and_too_large() {
        let dir = tempfile::tempdir().unwrap();
        let repo = AssetRepository::open_with_limit(dir.path(), 4).unwrap();
        assert!(matches!(repo.stat(&"0".repeat(64)), Err(AssetError::NotFound(_))));
        assert!(matches!(repo.get("../meta.ndjson"), Err(AssetError::NotFound(_))));
        assert!(matches!(repo.put(b"hello", "x", "other", None), Err(AssetError::TooLarge { size: 5, max: 4 })));
    }

    #[test]
    fn corruption_detected() {
        let dir = tempfile::tempdir().unwrap();
        let repo = AssetRepository::open(dir.path()).unwrap();
        let id = repo.put(b"abc", "glb", "mesh", None).unwrap();
        fs::write(repo.blob_path_for_tests(&id), b"abd").unwrap();
        assert!(matches!(repo.get(&id), Err(AssetError::Integrity(_))));
    }

    #[test]
    fn metadata_survives_reopen_and_name_updates() {
        let dir = tempfile::tempdir().unwrap();
        let id = {
            let repo = AssetRepository::open(dir.path()).unwrap();
            let id = repo.put(b"mesh", "glb", "mesh", Some("a")).unwrap();
            repo.put(b"mesh", "ignored", "ignored", Some("b")).unwrap();
            id
        };
        let repo = AssetRepository::open(dir.path()).unwrap();
        let meta = repo.stat(&id).unwrap();
        assert_eq!(meta.name.as_deref(), Some("b"));
        assert_eq!(meta.format, "glb");
    }

    #[test]
    fn access_urls() {
        let repo = repo_desc(vec![
            AccessMethod {
                name: "cdn".into(),
                kind: ACCESS_HTTP_TEMPLATE.into(),
                url_template: Some("https://repo.example/a/{resourceId}".into()),
            },
            AccessMethod {
                name: "local".into(),
                kind: ACCESS_INTERNAL.into(),
                url_template: None,
            },
            AccessMethod {
                name: "broken".into(),
                kind: ACCESS_HTTP_TEMPLATE.into(),
                url_template: Some("https://repo.example/a/".into()),
            },
        ]);
        assert_eq!(render_access_url(&repo, "cdn", "ba78").unwrap(), "https://repo.example/a/ba78");
        assert_eq!(
            render_access_url(&repo, "local", "ba78").unwrap(),
            "http://localhost:8080/dtds/v1/assets/ba78"
        );
        assert_eq!(
            render_access_url(&repo, "broken", "x"),
            Err(AccessError::MalformedTemplate("broken".into()))
        );
        assert_eq!(render_access_url(&repo, "nope", "x"), Err(AccessError::UnknownMethod("nope".into())));
    }
}
