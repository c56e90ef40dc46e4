use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::GeneratedPair;
use crate::error::{Error, Result};

/// Content-addressed store for generated images and captions.
///
/// Layout: `<root>/<modality>/<key[0:2]>/<key>.json` sidecar plus payload
/// files next to it, and `<root>/manifest.jsonl`. Every file is written to a
/// temporary file in the target directory and renamed into place; the sidecar
/// goes last, so a visible sidecar implies complete payloads.
#[derive(Debug)]
pub struct AugmentationCache {
    root: PathBuf,
    reads: AtomicUsize,
    writes: AtomicUsize,
    manifest: Mutex<()>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub key: String,
    pub modality: String,
    pub generator_tag: String,
    pub input: String,
    /// Payload file names (images) or the caption strings themselves.
    pub payloads: Vec<String>,
}

#[derive(Serialize)]
struct ManifestLine<'a> {
    key: &'a str,
    #[serde(flatten)]
    pair: &'a GeneratedPair,
    timestamp: u64,
}

pub const IMAGE_MODALITY: &str = "generated-image";
pub const CAPTION_MODALITY: &str = "generated-caption";

impl AugmentationCache {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self {
            root,
            reads: AtomicUsize::new(0),
            writes: AtomicUsize::new(0),
            manifest: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Number of lookups served so far (hits and misses).
    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn writes(&self) -> usize {
        self.writes.load(Ordering::Relaxed)
    }

    /// SHA-256 over the input, the full generation config, and the generator tag.
    pub fn key<C: Serialize>(modality: &str, input: &str, config: &C, tag: &str) -> String {
        let cfg = serde_json::to_string(config).expect("config serializes");
        let mut h = Sha256::new();
        for part in [modality, input, &cfg, tag] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        hex::encode(h.finalize())
    }

    fn dir_for(&self, modality: &str, key: &str) -> PathBuf {
        self.root.join(modality).join(&key[..2])
    }

    pub fn lookup(&self, modality: &str, key: &str) -> Result<Option<Sidecar>> {
        self.reads.fetch_add(1, Ordering::Relaxed);
        let path = self.dir_for(modality, key).join(format!("{key}.json"));
        match std::fs::read(&path) {
            Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    /// Absolute paths of an image sidecar's payload files.
    pub fn image_paths(&self, sidecar: &Sidecar) -> Vec<PathBuf> {
        let dir = self.dir_for(&sidecar.modality, &sidecar.key);
        sidecar.payloads.iter().map(|p| dir.join(p)).collect()
    }

    pub fn store_images(&self, key: &str, input: &str, tag: &str, payloads: &[Vec<u8>]) -> Result<Sidecar> {
        let dir = self.dir_for(IMAGE_MODALITY, key);
        let mut names = Vec::with_capacity(payloads.len());
        for (i, bytes) in payloads.iter().enumerate() {
            let name = format!("{key}.{i}.png");
            atomic_write(&dir, &name, bytes)?;
            names.push(name);
        }
        self.finish(dir, key, IMAGE_MODALITY, input, tag, names)
    }

    pub fn store_captions(&self, key: &str, input: &str, tag: &str, captions: &[String]) -> Result<Sidecar> {
        let dir = self.dir_for(CAPTION_MODALITY, key);
        self.finish(dir, key, CAPTION_MODALITY, input, tag, captions.to_vec())
    }

    fn finish(
        &self,
        dir: PathBuf,
        key: &str,
        modality: &str,
        input: &str,
        tag: &str,
        payloads: Vec<String>,
    ) -> Result<Sidecar> {
        let sidecar = Sidecar {
            key: key.to_string(),
            modality: modality.to_string(),
            generator_tag: tag.to_string(),
            input: input.to_string(),
            payloads,
        };
        atomic_write(&dir, &format!("{key}.json"), &serde_json::to_vec_pretty(&sidecar)?)?;
        self.writes.fetch_add(1, Ordering::Relaxed);
        Ok(sidecar)
    }

    pub fn append_manifest(&self, key: &str, pairs: &[GeneratedPair]) -> Result<()> {
        let _guard = self.manifest.lock().expect("manifest lock poisoned");
        let path = self.root.join("manifest.jsonl");
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let mut buf = Vec::new();
        for pair in pairs {
            serde_json::to_writer(&mut buf, &ManifestLine { key, pair, timestamp })?;
            buf.push(b'\n');
        }
        f.write_all(&buf).map_err(|e| Error::io(&path, e))
    }
}

/// Writes `bytes` to `dir/name` via a temp file and an atomic rename.
pub(crate) fn atomic_write(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    let target = dir.join(name);
    tmp.persist(&target).map_err(|e| Error::io(&target, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_depends_on_every_part() {
        let base = AugmentationCache::key("m", "prompt", &1u32, "tag");
        assert_eq!(base.len(), 64);
        assert_ne!(base, AugmentationCache::key("m", "prompt2", &1u32, "tag"));
        assert_ne!(base, AugmentationCache::key("m", "prompt", &2u32, "tag"));
        assert_ne!(base, AugmentationCache::key("m", "prompt", &1u32, "tag2"));
        // length prefixes keep concatenation boundaries distinct
        assert_ne!(
            AugmentationCache::key("m", "ab", &1u32, "c"),
            AugmentationCache::key("m", "a", &1u32, "bc")
        );
    }

    #[test]
    fn stored_images_are_found_again() {
        let dir = tempfile::tempdir().unwrap();
        let cache = AugmentationCache::open(dir.path()).unwrap();
        let key = AugmentationCache::key(IMAGE_MODALITY, "p", &0u8, "t");
        assert!(cache.lookup(IMAGE_MODALITY, &key).unwrap().is_none());
        cache
            .store_images(&key, "p", "t", &[b"one".to_vec(), b"two".to_vec()])
            .unwrap();
        let sc = cache.lookup(IMAGE_MODALITY, &key).unwrap().unwrap();
        let paths = cache.image_paths(&sc);
        assert_eq!(std::fs::read(&paths[1]).unwrap(), b"two");
        assert_eq!(cache.reads(), 2);
        assert!(paths[0].starts_with(dir.path().join(IMAGE_MODALITY).join(&key[..2])));
    }
}
