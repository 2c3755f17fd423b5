//! On-disk gallery cache.
//!
//! One gallery file per `(provider, config hash, image)` under
//! `root/<provider>/<config_hash>/`, with a `.sha256` sidecar holding the
//! digest of the gallery bytes. Both files are written by atomic rename.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::io::{file_key, write_atomic};
use crate::{Error, Result};

use super::MaskGallery;

#[derive(Debug, Clone)]
pub struct GalleryCache {
    root: PathBuf,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl GalleryCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entry_path(&self, image_id: &str, provider: &str, config_hash: &str) -> PathBuf {
        self.root
            .join(provider)
            .join(config_hash)
            .join(format!("{}.p2smask", file_key(image_id)))
    }

    fn checksum_path(entry: &Path) -> PathBuf {
        let mut p = entry.as_os_str().to_owned();
        p.push(".sha256");
        PathBuf::from(p)
    }

    pub fn write(&self, gallery: &MaskGallery) -> Result<PathBuf> {
        let path = self.entry_path(&gallery.image_id, &gallery.provider, &gallery.config_hash);
        let text = gallery.to_text()?;
        write_atomic(&path, text.as_bytes())?;
        write_atomic(
            &Self::checksum_path(&path),
            format!("{}\n", sha256_hex(text.as_bytes())).as_bytes(),
        )?;
        Ok(path)
    }

    /// `Ok(None)` on a miss (including a different config hash);
    /// [`Error::Checksum`] when the entry exists but is corrupt.
    pub fn read(&self, image_id: &str, provider: &str, config_hash: &str) -> Result<Option<MaskGallery>> {
        let path = self.entry_path(image_id, provider, config_hash);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let expected =
            std::fs::read_to_string(Self::checksum_path(&path)).map_err(|_| Error::Checksum(path.clone()))?;
        if expected.trim() != sha256_hex(&bytes) {
            return Err(Error::Checksum(path));
        }
        let text = std::str::from_utf8(&bytes).map_err(|_| Error::Checksum(path.clone()))?;
        let gallery = MaskGallery::from_text(text).map_err(|_| Error::Checksum(path.clone()))?;
        if gallery.image_id != image_id || gallery.provider != provider || gallery.config_hash != config_hash
        {
            return Ok(None);
        }
        Ok(Some(gallery))
    }

    /// Configuration hashes with a directory under `provider`, sorted.
    pub fn config_hashes(&self, provider: &str) -> Result<Vec<String>> {
        let dir = self.root.join(provider);
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut out: Vec<String> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        out.sort();
        Ok(out)
    }

    /// Every verified gallery of one configuration, sorted by image id.
    pub fn list(&self, provider: &str, config_hash: &str) -> Result<Vec<MaskGallery>> {
        let dir = self.root.join(provider).join(config_hash);
        let mut out = Vec::new();
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.extension().is_none_or(|x| x != "p2smask") {
                continue;
            }
            let text = std::fs::read_to_string(&path)?;
            let header = MaskGallery::from_text(&text).map_err(|_| Error::Checksum(path.clone()))?;
            let g = self
                .read(&header.image_id, provider, config_hash)?
                .ok_or_else(|| Error::Checksum(path.clone()))?;
            out.push(g);
        }
        out.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        Ok(out)
    }

    /// Reads an entry, regenerating it with `generate` when missing or
    /// corrupt.
    pub fn get_or_generate(
        &self,
        image_id: &str,
        provider: &str,
        config_hash: &str,
        generate: impl FnOnce() -> Result<MaskGallery>,
    ) -> Result<MaskGallery> {
        match self.read(image_id, provider, config_hash) {
            Ok(Some(g)) => return Ok(g),
            Ok(None) => {}
            Err(Error::Checksum(path)) => {
                log::warn!("corrupt gallery cache entry {}, regenerating", path.display());
            }
            Err(e) => return Err(e),
        }
        let gallery = generate()?;
        self.write(&gallery)?;
        Ok(gallery)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::BinaryMask;

    fn gallery(id: &str, hash: &str) -> MaskGallery {
        MaskGallery {
            image_id: id.into(),
            height: 3,
            width: 4,
            masks: vec![BinaryMask::from_rect(3, 4, 1, 0, 3, 2)],
            provider: "fake".into(),
            config_hash: hash.into(),
        }
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let cache = GalleryCache::new(dir.path());
        let g = gallery("img/001.png", "h1");
        cache.write(&g).unwrap();
        assert_eq!(cache.read("img/001.png", "fake", "h1").unwrap(), Some(g));
    }

    #[test]
    fn stale_config_hash_misses() {
        let dir = tempfile::tempdir().unwrap();
        let cache = GalleryCache::new(dir.path());
        cache.write(&gallery("a", "h1")).unwrap();
        assert_eq!(cache.read("a", "fake", "h2").unwrap(), None);
        assert_eq!(cache.read("b", "fake", "h1").unwrap(), None);
    }

    #[test]
    fn corruption_is_detected_and_regenerated() {
        let dir = tempfile::tempdir().unwrap();
        let cache = GalleryCache::new(dir.path());
        let path = cache.write(&gallery("a", "h1")).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text = text.replace("2,2", "2,3");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(cache.read("a", "fake", "h1"), Err(Error::Checksum(_))));
        let regenerated = cache
            .get_or_generate("a", "fake", "h1", || Ok(gallery("a", "h1")))
            .unwrap();
        assert_eq!(regenerated, gallery("a", "h1"));
        assert!(cache.read("a", "fake", "h1").unwrap().is_some());
    }

    #[test]
    fn lists_entries_of_a_configuration() {
        let dir = tempfile::tempdir().unwrap();
        let cache = GalleryCache::new(dir.path());
        cache.write(&gallery("b", "h1")).unwrap();
        cache.write(&gallery("a", "h1")).unwrap();
        cache.write(&gallery("c", "h2")).unwrap();
        assert_eq!(cache.config_hashes("fake").unwrap(), vec!["h1", "h2"]);
        let ids: Vec<String> = cache
            .list("fake", "h1")
            .unwrap()
            .into_iter()
            .map(|g| g.image_id)
            .collect();
        assert_eq!(ids, vec!["a", "b"]);
    }
}
