use std::collections::BTreeMap;
use std::sync::RwLock;

/// Key/value shape of a map, as seen by the verifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapDesc {
    pub key_size: usize,
    pub value_size: usize,
    pub max_entries: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MapError {
    #[error("size mismatch: map `{map}` expects {expected} bytes, got {got}")]
    SizeMismatch {
        map: String,
        expected: usize,
        got: usize,
    },
    #[error("map `{0}` is full")]
    CapacityExceeded(String),
}

/// A fixed-shape hash map shared between the patch channel (writer) and
/// policy programs. Each operation takes the lock once, so a reader never
/// sees a torn entry.
#[derive(Debug)]
pub struct VmMap {
    pub id: String,
    pub desc: MapDesc,
    entries: RwLock<BTreeMap<Vec<u8>, Vec<u8>>>,
}

impl VmMap {
    pub fn new(id: &str, key_size: usize, value_size: usize, max_entries: usize) -> VmMap {
        VmMap {
            id: id.to_string(),
            desc: MapDesc {
                key_size,
                value_size,
                max_entries,
            },
            entries: RwLock::new(BTreeMap::new()),
        }
    }

    fn check(&self, what: usize, got: usize) -> Result<(), MapError> {
        if what != got {
            return Err(MapError::SizeMismatch {
                map: self.id.clone(),
                expected: what,
                got,
            });
        }
        Ok(())
    }

    pub fn get(&self, key: &[u8]) -> Result<Option<Vec<u8>>, MapError> {
        self.check(self.desc.key_size, key.len())?;
        Ok(self.read().get(key).cloned())
    }

    pub fn put(&self, key: &[u8], value: &[u8]) -> Result<(), MapError> {
        self.check(self.desc.key_size, key.len())?;
        self.check(self.desc.value_size, value.len())?;
        let mut m = self.entries.write().unwrap_or_else(|e| e.into_inner());
        if !m.contains_key(key) && m.len() >= self.desc.max_entries {
            return Err(MapError::CapacityExceeded(self.id.clone()));
        }
        m.insert(key.to_vec(), value.to_vec());
        Ok(())
    }

    /// Returns whether the key was present.
    pub fn delete(&self, key: &[u8]) -> Result<bool, MapError> {
        self.check(self.desc.key_size, key.len())?;
        let mut m = self.entries.write().unwrap_or_else(|e| e.into_inner());
        Ok(m.remove(key).is_some())
    }

    pub fn len(&self) -> usize {
        self.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.entries
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .clear();
    }

    /// Replaces all entries in one step. The caller has checked shapes.
    pub fn replace(&self, entries: BTreeMap<Vec<u8>, Vec<u8>>) {
        *self.entries.write().unwrap_or_else(|e| e.into_inner()) = entries;
    }

    pub fn entries(&self) -> BTreeMap<Vec<u8>, Vec<u8>> {
        self.read().clone()
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, BTreeMap<Vec<u8>, Vec<u8>>> {
        self.entries.read().unwrap_or_else(|e| e.into_inner())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_get_delete() {
        let m = VmMap::new("m", 2, 1, 2);
        assert_eq!(m.get(b"ab").unwrap(), None);
        m.put(b"ab", b"1").unwrap();
        m.put(b"ab", b"2").unwrap();
        assert_eq!(m.get(b"ab").unwrap(), Some(b"2".to_vec()));
        assert!(m.delete(b"ab").unwrap());
        assert!(!m.delete(b"ab").unwrap());
        assert_eq!(m.get(b"ab").unwrap(), None);
    }

    #[test]
    fn size_and_capacity_enforced() {
        let m = VmMap::new("m", 2, 1, 1);
        assert!(matches!(
            m.put(b"a", b"1"),
            Err(MapError::SizeMismatch { .. })
        ));
        assert!(matches!(
            m.put(b"ab", b"12"),
            Err(MapError::SizeMismatch { .. })
        ));
        m.put(b"ab", b"1").unwrap();
        assert_eq!(
            m.put(b"cd", b"1"),
            Err(MapError::CapacityExceeded("m".into()))
        );
        m.put(b"ab", b"3").unwrap();
    }
}
