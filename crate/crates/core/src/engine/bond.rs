//! Persistent per-peer pairing history.
//!
//! One line per peer:
//! `<address-hex> <enc_key_size> <method> <flags-hex> [handle:level ...]`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::abi::{
    BT_KEYS_AUTHENTICATED, METHOD_JUST_WORKS, METHOD_NUMERIC_COMPARISON, METHOD_OOB, METHOD_PASSKEY,
};
use crate::pdu::{Address, AssociationModel};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BondRecord {
    pub peer: Address,
    pub enc_key_size: u8,
    pub method: AssociationModel,
    /// `BT_KEYS_*` bits.
    pub key_flags: u64,
    /// Highest security level each attribute handle was accessed at.
    pub attr_levels: BTreeMap<u16, u8>,
}

impl BondRecord {
    pub fn authenticated(&self) -> bool {
        self.key_flags & BT_KEYS_AUTHENTICATED != 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BondError {
    #[error("bond file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("bond file: {0}")]
    Io(String),
}

pub fn method_code(m: AssociationModel) -> u64 {
    match m {
        AssociationModel::JustWorks => METHOD_JUST_WORKS,
        AssociationModel::PasskeyEntry => METHOD_PASSKEY,
        AssociationModel::NumericComparison => METHOD_NUMERIC_COMPARISON,
        AssociationModel::OutOfBand => METHOD_OOB,
    }
}

pub fn method_name(m: AssociationModel) -> &'static str {
    match m {
        AssociationModel::JustWorks => "JUST_WORKS",
        AssociationModel::PasskeyEntry => "PASSKEY_ENTRY",
        AssociationModel::NumericComparison => "NUMERIC_COMPARISON",
        AssociationModel::OutOfBand => "OOB",
    }
}

fn method_from_name(s: &str) -> Option<AssociationModel> {
    [
        AssociationModel::JustWorks,
        AssociationModel::PasskeyEntry,
        AssociationModel::NumericComparison,
        AssociationModel::OutOfBand,
    ]
    .into_iter()
    .find(|m| method_name(*m) == s)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BondStore {
    records: BTreeMap<Address, BondRecord>,
    path: Option<PathBuf>,
}

impl BondStore {
    /// An empty store that is never written to disk.
    pub fn in_memory() -> BondStore {
        BondStore::default()
    }

    /// Loads `path`; a missing file is an empty store. Updates are written
    /// back to `path`.
    pub fn open(path: &Path) -> Result<BondStore, BondError> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(BondError::Io(e.to_string())),
        };
        let mut s = BondStore::parse(&text)?;
        s.path = Some(path.to_path_buf());
        Ok(s)
    }

    pub fn parse(text: &str) -> Result<BondStore, BondError> {
        let mut records = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: &str| BondError::Parse {
                line: i + 1,
                reason: reason.to_string(),
            };
            let mut f = line.split_whitespace();
            let (Some(addr), Some(size), Some(method), Some(flags)) =
                (f.next(), f.next(), f.next(), f.next())
            else {
                return Err(err("expected address, key size, method and flags"));
            };
            let peer: Address = addr.parse().map_err(|_| err("bad address"))?;
            let enc_key_size: u8 = size.parse().map_err(|_| err("bad key size"))?;
            if !(7..=16).contains(&enc_key_size) {
                return Err(err("key size outside 7..16"));
            }
            let method = method_from_name(method).ok_or_else(|| err("unknown method"))?;
            let key_flags = u64::from_str_radix(flags.trim_start_matches("0x"), 16)
                .map_err(|_| err("bad flags"))?;
            let mut attr_levels = BTreeMap::new();
            for pair in f {
                let (h, l) = pair
                    .split_once(':')
                    .ok_or_else(|| err("bad handle:level"))?;
                let h = u16::from_str_radix(h, 16).map_err(|_| err("bad handle"))?;
                let l: u8 = l.parse().map_err(|_| err("bad level"))?;
                attr_levels.insert(h, l);
            }
            records.insert(
                peer,
                BondRecord {
                    peer,
                    enc_key_size,
                    method,
                    key_flags,
                    attr_levels,
                },
            );
        }
        Ok(BondStore {
            records,
            path: None,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in self.records.values() {
            let _ = write!(
                out,
                "{} {} {} {:#04x}",
                r.peer,
                r.enc_key_size,
                method_name(r.method),
                r.key_flags
            );
            for (h, l) in &r.attr_levels {
                let _ = write!(out, " {h:04x}:{l}");
            }
            out.push('\n');
        }
        out
    }

    pub fn get(&self, peer: &Address) -> Option<&BondRecord> {
        self.records.get(peer)
    }

    pub fn contains(&self, peer: &Address) -> bool {
        self.records.contains_key(peer)
    }

    pub fn records(&self) -> impl Iterator<Item = &BondRecord> {
        self.records.values()
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn set_path(&mut self, path: Option<PathBuf>) {
        self.path = path;
    }

    /// Inserts or replaces a record, keeping recorded attribute levels.
    pub fn upsert(&mut self, mut rec: BondRecord) -> Result<(), BondError> {
        if let Some(old) = self.records.get(&rec.peer) {
            for (h, l) in &old.attr_levels {
                rec.attr_levels.entry(*h).or_insert(*l);
            }
        }
        self.records.insert(rec.peer, rec);
        self.persist()
    }

    /// Raises the recorded level of `handle`; never lowers it.
    pub fn record_attr_level(
        &mut self,
        peer: &Address,
        handle: u16,
        level: u8,
    ) -> Result<(), BondError> {
        let Some(r) = self.records.get_mut(peer) else {
            return Ok(());
        };
        let slot = r.attr_levels.entry(handle).or_insert(0);
        if level <= *slot {
            return Ok(());
        }
        *slot = level;
        self.persist()
    }

    pub fn remove(&mut self, peer: &Address) -> Result<bool, BondError> {
        let had = self.records.remove(peer).is_some();
        if had {
            self.persist()?;
        }
        Ok(had)
    }

    /// Rewrites the backing file via a temporary file and rename.
    fn persist(&self) -> Result<(), BondError> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let io = |e: std::io::Error| BondError::Io(e.to_string());
        let mut tmp = path.clone().into_os_string();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        fs::write(&tmp, self.to_text()).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abi::BT_KEYS_LTK;

    fn rec(size: u8) -> BondRecord {
        BondRecord {
            peer: "c0ffee000001".parse().unwrap(),
            enc_key_size: size,
            method: AssociationModel::PasskeyEntry,
            key_flags: BT_KEYS_LTK | BT_KEYS_AUTHENTICATED,
            attr_levels: BTreeMap::new(),
        }
    }

    #[test]
    fn text_round_trip() {
        let mut s = BondStore::in_memory();
        s.upsert(rec(16)).unwrap();
        s.record_attr_level(&rec(16).peer, 0x10, 2).unwrap();
        let t = s.to_text();
        assert_eq!(t, "c0ffee000001 16 PASSKEY_ENTRY 0x05 0010:2\n");
        assert_eq!(BondStore::parse(&t).unwrap(), s);
    }

    #[test]
    fn levels_never_decrease_and_survive_repairing() {
        let mut s = BondStore::in_memory();
        let p = rec(16).peer;
        s.upsert(rec(16)).unwrap();
        s.record_attr_level(&p, 1, 3).unwrap();
        s.record_attr_level(&p, 1, 2).unwrap();
        s.upsert(rec(16)).unwrap();
        assert_eq!(s.get(&p).unwrap().attr_levels[&1], 3);
    }

    #[test]
    fn persists_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bonds.txt");
        let mut s = BondStore::open(&path).unwrap();
        assert!(s.get(&rec(16).peer).is_none());
        s.upsert(rec(12)).unwrap();
        let back = BondStore::open(&path).unwrap();
        assert_eq!(back.get(&rec(12).peer).unwrap().enc_key_size, 12);
        assert!(!dir.path().join("bonds.txt.tmp").exists());
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(BondStore::parse("c0ffee000001 6 JUST_WORKS 0x04").is_err());
        assert!(BondStore::parse("c0ffee000001 16 MAGIC 0x04").is_err());
        assert!(BondStore::parse("zz 16 JUST_WORKS 0x04").is_err());
        assert!(BondStore::parse("# comment\n\n")
            .unwrap()
            .records()
            .next()
            .is_none());
    }
}
