use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use stateguard::engine::{BondStore, EngineConfig};
use stateguard::replay::{self, corpus, Trace};
use stateguard::rules::default_store;
use stateguard::vm::PolicyStore;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn shipped_policies_match_builtin_rules() {
    let t = tempfile::tempdir().unwrap();
    default_store().unwrap().save_dir(t.path()).unwrap();
    assert_eq!(
        files(&root().join("policies")),
        files(t.path()),
        "policies/ is stale; regenerate with `stateguard export-policies --out policies`"
    );
}

#[test]
fn shipped_corpus_matches_generator() {
    let t = tempfile::tempdir().unwrap();
    corpus::write_corpus(t.path()).unwrap();
    assert_eq!(
        files(&root().join("corpus")),
        files(t.path()),
        "corpus/ is stale; regenerate with `stateguard gen-corpus --out corpus`"
    );
}

#[test]
fn replay_is_deterministic() {
    let store = Arc::new(PolicyStore::load_dir(&root().join("policies")).unwrap());
    let traces: Vec<Trace> = corpus::generate();
    let bonds = BondStore::parse("c0ffee000011 16 PASSKEY_ENTRY 0x05 0010:3\n").unwrap();
    let a = replay::replay_all(&traces, &store, &bonds, &EngineConfig::default());
    let b = replay::replay_all(&traces, &store, &bonds, &EngineConfig::default());
    assert_eq!(a.to_json(), b.to_json());
}
