//! Content-addressed on-disk cache for scoring runs.
//!
//! One file per request under the cache directory, named by the hex
//! request fingerprint. Each file holds the serialized [`ScoredText`] plus
//! a SHA-256 checksum of that serialization; a corrupted entry (bad JSON
//! or checksum mismatch) is evicted and refetched. Writes go through a
//! temp file and an atomic rename, so concurrent writers of the same key
//! end in a last-writer-wins state with deterministic content.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{sha256_hex, Condition, ProviderError, ScoredText, ScoringProvider};

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    checksum: String,
    scored: ScoredText,
}

/// Persistent cache around any provider. Hits are byte-identical to what
/// the inner provider returned when the entry was stored.
pub struct CachedProvider<P: ScoringProvider> {
    inner: P,
    dir: PathBuf,
}

impl<P: ScoringProvider> CachedProvider<P> {
    pub fn new(inner: P, dir: impl Into<PathBuf>) -> Result<Self, ProviderError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| ProviderError::CacheIo {
            path: dir.display().to_string(),
            source: e,
        })?;
        Ok(CachedProvider { inner, dir })
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }

    pub fn cache_dir(&self) -> &Path {
        &self.dir
    }

    fn entry_path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    fn load(&self, key: &str) -> Option<ScoredText> {
        let path = self.entry_path(key);
        let bytes = fs::read(&path).ok()?;
        match decode_entry(&bytes) {
            Some(scored) => Some(scored),
            None => {
                // Corrupt entry: evict so the next call refetches.
                log::warn!("evicting corrupt cache entry {}", path.display());
                let _ = fs::remove_file(&path);
                None
            }
        }
    }

    fn store(&self, key: &str, scored: &ScoredText) -> Result<(), ProviderError> {
        let payload = serde_json::to_string(scored).expect("ScoredText serializes");
        let entry = CacheEntry {
            checksum: sha256_hex(payload.as_bytes()),
            scored: scored.clone(),
        };
        let bytes = serde_json::to_vec(&entry).expect("cache entry serializes");
        let path = self.entry_path(key);
        let tmp = self.dir.join(format!(
            ".{key}.{}.tmp",
            std::process::id()
        ));
        let io_err = |e: std::io::Error| ProviderError::CacheIo {
            path: path.display().to_string(),
            source: e,
        };
        fs::write(&tmp, &bytes).map_err(io_err)?;
        fs::rename(&tmp, &path).map_err(io_err)?;
        Ok(())
    }

    fn get_or_fetch<F>(
        &self,
        key: String,
        fetch: F,
    ) -> Result<ScoredText, ProviderError>
    where
        F: FnOnce() -> Result<ScoredText, ProviderError>,
    {
        if let Some(hit) = self.load(&key) {
            return Ok(hit);
        }
        let scored = fetch()?;
        self.store(&key, &scored)?;
        Ok(scored)
    }
}

fn decode_entry(bytes: &[u8]) -> Option<ScoredText> {
    let entry: CacheEntry = serde_json::from_slice(bytes).ok()?;
    let payload = serde_json::to_string(&entry.scored).ok()?;
    if sha256_hex(payload.as_bytes()) != entry.checksum {
        return None;
    }
    Some(entry.scored)
}

impl<P: ScoringProvider> ScoringProvider for CachedProvider<P> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn separator(&self) -> &str {
        self.inner.separator()
    }

    fn score_bare(&self, text: &str) -> Result<ScoredText, ProviderError> {
        let key = self.inner.request_fingerprint(Condition::Bare, "", text);
        self.get_or_fetch(key, || self.inner.score_bare(text))
    }

    fn score_with_context(&self, context: &str, text: &str) -> Result<ScoredText, ProviderError> {
        let key = self
            .inner
            .request_fingerprint(Condition::Contextualized, context, text);
        self.get_or_fetch(key, || self.inner.score_with_context(context, text))
    }

    fn request_fingerprint(&self, condition: Condition, context: &str, text: &str) -> String {
        self.inner.request_fingerprint(condition, context, text)
    }
}

/// Cache directory totals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub entries: usize,
    pub bytes: u64,
}

/// Outcome of a verification sweep.
#[derive(Debug, Serialize)]
pub struct CacheVerifyReport {
    pub valid: usize,
    pub evicted: Vec<String>,
}

fn entry_files(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    if !dir.exists() {
        return Ok(files);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("json") && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Counts entries and bytes under a cache directory.
pub fn cache_stats(dir: &Path) -> std::io::Result<CacheStats> {
    let mut stats = CacheStats { entries: 0, bytes: 0 };
    for path in entry_files(dir)? {
        stats.entries += 1;
        stats.bytes += fs::metadata(&path)?.len();
    }
    Ok(stats)
}

/// Removes every entry; returns how many were deleted.
pub fn cache_clear(dir: &Path) -> std::io::Result<usize> {
    let files = entry_files(dir)?;
    let mut removed = 0;
    for path in files {
        fs::remove_file(&path)?;
        removed += 1;
    }
    Ok(removed)
}

/// Checks every entry's checksum; corrupt entries are evicted and listed.
pub fn cache_verify(dir: &Path) -> std::io::Result<CacheVerifyReport> {
    let mut report = CacheVerifyReport {
        valid: 0,
        evicted: Vec::new(),
    };
    for path in entry_files(dir)? {
        let bytes = fs::read(&path)?;
        if decode_entry(&bytes).is_some() {
            report.valid += 1;
        } else {
            fs::remove_file(&path)?;
            report.evicted.push(
                path.file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default(),
            );
        }
    }
    Ok(report)
}
