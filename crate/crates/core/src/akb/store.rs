use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::{AkbError, Embedder, HashedTrigramEmbedder, KnowledgeBase, KnowledgeTip};
use crate::{Error, Result};

pub const AKB_VERSION: u32 = 1;

/// On-disk form: `{v, frozen, tips: [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AkbDocument {
    pub v: u32,
    #[serde(default)]
    pub frozen: bool,
    pub tips: Vec<KnowledgeTip>,
}

/// Shared, persistent knowledge base.
///
/// Readers take an `Arc` snapshot and never see a half-applied write. Writers
/// are serialized: each one clones the current kb, applies the change,
/// persists the document with temp-file-and-rename, then publishes.
pub struct AkbStore {
    path: Option<PathBuf>,
    current: RwLock<Arc<KnowledgeBase>>,
    writer: Mutex<()>,
}

impl AkbStore {
    pub fn in_memory(kb: KnowledgeBase) -> Self {
        AkbStore { path: None, current: RwLock::new(Arc::new(kb)), writer: Mutex::new(()) }
    }

    /// Opens the document at `path`, or starts an empty unfrozen kb there.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        Self::open_with(path, Arc::new(HashedTrigramEmbedder::default()))
    }

    pub fn open_with(path: impl Into<PathBuf>, embedder: Arc<dyn Embedder>) -> Result<Self> {
        let path = path.into();
        let kb = if path.exists() {
            let doc: AkbDocument = crate::read_json(&path)?;
            if doc.v != AKB_VERSION {
                return Err(Error::InvalidInput(format!("unsupported akb version {} in {}", doc.v, path.display())));
            }
            KnowledgeBase::from_document(doc, embedder)?
        } else {
            KnowledgeBase::new(embedder)
        };
        Ok(AkbStore { path: Some(path), current: RwLock::new(Arc::new(kb)), writer: Mutex::new(()) })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn snapshot(&self) -> Arc<KnowledgeBase> {
        self.current.read().expect("akb lock poisoned").clone()
    }

    pub fn is_frozen(&self) -> bool {
        self.snapshot().is_frozen()
    }

    fn mutate<T>(&self, f: impl FnOnce(&mut KnowledgeBase) -> std::result::Result<T, AkbError>) -> Result<T> {
        let _w = self.writer.lock().expect("akb writer poisoned");
        let mut next = (*self.snapshot()).clone();
        let out = f(&mut next)?;
        if let Some(path) = &self.path {
            crate::write_json_atomic(path, &next.to_document())?;
        }
        *self.current.write().expect("akb lock poisoned") = Arc::new(next);
        Ok(out)
    }

    pub fn add_tip(&self, tip: KnowledgeTip) -> Result<()> {
        self.mutate(|kb| kb.add_tip(tip))
    }

    pub fn update_tip(&self, tip: KnowledgeTip) -> Result<()> {
        self.mutate(|kb| kb.update_tip(tip))
    }

    pub fn delete_tip(&self, id: &str) -> Result<KnowledgeTip> {
        self.mutate(|kb| kb.remove_tip(id))
    }

    /// Adds every tip or none of them.
    pub fn import(&self, tips: Vec<KnowledgeTip>) -> Result<usize> {
        self.mutate(|kb| {
            let n = tips.len();
            for t in tips {
                kb.add_tip(t)?;
            }
            Ok(n)
        })
    }

    /// Idempotent; persists the frozen flag.
    pub fn freeze(&self) -> Result<()> {
        if self.is_frozen() {
            return Ok(());
        }
        self.mutate(|kb| {
            kb.freeze();
            Ok(())
        })
    }

    pub fn export(&self) -> AkbDocument {
        self.snapshot().to_document()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::akb::tests::tip;

    #[test]
    fn persists_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("akb.json");
        let store = AkbStore::open(&path).unwrap();
        store.add_tip(tip("t1", "gitlab", &["*/gitlab/*"], &["merge"])).unwrap();
        store.freeze().unwrap();
        let reopened = AkbStore::open(&path).unwrap();
        assert!(reopened.is_frozen());
        assert_eq!(reopened.snapshot().len(), 1);
        let raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(raw["v"], 1);
        assert_eq!(raw["frozen"], true);
        assert_eq!(raw["tips"][0]["id"], "t1");
    }

    #[test]
    fn failed_import_changes_nothing() {
        let store = AkbStore::in_memory(KnowledgeBase::default());
        let r = store.import(vec![tip("a", "x", &["*"], &[]), tip("a", "x", &["*"], &[])]);
        assert!(r.is_err());
        assert!(store.snapshot().is_empty());
    }

    #[test]
    fn snapshots_are_isolated_from_later_writes() {
        let store = AkbStore::in_memory(KnowledgeBase::default());
        let before = store.snapshot();
        store.add_tip(tip("a", "x", &["*"], &[])).unwrap();
        assert!(before.is_empty());
        assert_eq!(store.snapshot().len(), 1);
    }

    #[test]
    fn frozen_store_rejects_writes() {
        let store = AkbStore::in_memory(KnowledgeBase::default());
        store.freeze().unwrap();
        store.freeze().unwrap();
        assert!(matches!(store.add_tip(tip("a", "x", &["*"], &[])), Err(Error::Akb(AkbError::Frozen))));
    }
}
