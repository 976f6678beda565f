//! Policy store: installed programs, the specifications map that binds
//! them to (hook, event, state) keys, malicious paths, and runtime maps.
//!
//! Readers take an `Arc<Snapshot>` and never block the writer; every write
//! builds a new snapshot and swaps it in, so a batch is seen all or nothing.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use super::container::{decode_container, encode_container, ContainerError};
use super::map::{MapDesc, MapError, VmMap};
use super::{verify, Attach, PolicyProgram, VerifiedProgram, VerifierError, MAX_ID_LEN};
use crate::abi::{HookPoint, STATE_ANY};
use crate::fsm::{EventKind, MaliciousPath, PathError, SessionState};

pub const SPECIFICATIONS: &str = "specifications";
pub const SESSION_FLAGS: &str = "session_flags";

/// Map handle of the specifications map (read-only to programs).
pub const MAP_SPECIFICATIONS: u64 = 0;
/// Map handle of the per-peer flag map shared by all sessions.
pub const MAP_SESSION_FLAGS: u64 = 1;

pub const SPEC_KEY_SIZE: usize = 32;
pub const SPEC_VALUE_SIZE: usize = 8;
pub const SPEC_MAX_ENTRIES: usize = 1024;

/// Shapes of the maps programs see, indexed by handle.
pub const MAP_DESCS: [MapDesc; 2] = [
    MapDesc {
        key_size: SPEC_KEY_SIZE,
        value_size: SPEC_VALUE_SIZE,
        max_entries: SPEC_MAX_ENTRIES,
    },
    MapDesc {
        key_size: 8,
        value_size: 8,
        max_entries: 256,
    },
];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("program `{id}` rejected by verifier: {err}")]
    Verifier { id: String, err: VerifierError },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("unknown program `{0}`")]
    UnknownProgram(String),
    #[error("unknown map `{0}`")]
    UnknownMap(String),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error("invalid program id `{0}`")]
    BadId(String),
    #[error("malformed: {0}")]
    Malformed(String),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> StoreError {
        StoreError::Io(e.to_string())
    }
}

/// One specifications entry: `program` runs for `key`, ordered by `seq`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpecKey {
    pub hook: HookPoint,
    pub event: EventKind,
    pub state: Option<SessionState>,
}

impl From<Attach> for SpecKey {
    fn from(a: Attach) -> SpecKey {
        SpecKey {
            hook: a.hook,
            event: a.event,
            state: a.state,
        }
    }
}

/// Encodes a specifications-map key: `[hook, event, state, 0, id (28 bytes,
/// zero-padded)]`.
pub fn spec_key(k: SpecKey, id: &str) -> Result<[u8; SPEC_KEY_SIZE], StoreError> {
    check_id(id)?;
    let mut b = [0u8; SPEC_KEY_SIZE];
    b[0] = k.hook.code();
    b[1] = k.event.code();
    b[2] = k.state.map_or(STATE_ANY, |s| s.code());
    b[4..4 + id.len()].copy_from_slice(id.as_bytes());
    Ok(b)
}

pub fn parse_spec_key(b: &[u8]) -> Result<(SpecKey, String), StoreError> {
    let bad = |w: &str| StoreError::Malformed(format!("specifications key: {w}"));
    if b.len() != SPEC_KEY_SIZE {
        return Err(bad("wrong size"));
    }
    let hook = HookPoint::from_code(b[0]).ok_or_else(|| bad("hook"))?;
    let event = EventKind::from_code(b[1]).ok_or_else(|| bad("event"))?;
    let state = match b[2] {
        STATE_ANY => None,
        c => Some(SessionState::from_code(c).ok_or_else(|| bad("state"))?),
    };
    if b[3] != 0 {
        return Err(bad("reserved byte"));
    }
    let raw = &b[4..];
    let end = raw.iter().position(|&c| c == 0).unwrap_or(raw.len());
    if raw[end..].iter().any(|&c| c != 0) {
        return Err(bad("id padding"));
    }
    let id = std::str::from_utf8(&raw[..end]).map_err(|_| bad("id"))?;
    check_id(id)?;
    Ok((SpecKey { hook, event, state }, id.to_string()))
}

fn check_id(id: &str) -> Result<(), StoreError> {
    let ok = !id.is_empty()
        && id.len() <= MAX_ID_LEN
        && id
            .bytes()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, b'_' | b'-' | b'.'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::BadId(id.to_string()))
    }
}

#[derive(Debug)]
pub struct InstalledProgram {
    pub program: PolicyProgram,
    pub verified: VerifiedProgram,
}

/// Immutable view of the store used by one dispatch.
#[derive(Debug, Clone, Default)]
pub struct Snapshot {
    pub programs: BTreeMap<String, Arc<InstalledProgram>>,
    pub specifications: BTreeMap<[u8; SPEC_KEY_SIZE], u64>,
    pub paths: Vec<MaliciousPath>,
    dispatch: HashMap<(HookPoint, EventKind, SessionState), Vec<Arc<InstalledProgram>>>,
    next_seq: u64,
}

impl Snapshot {
    /// Programs bound to (hook, event) whose state filter admits `state`, in
    /// installation order.
    pub fn dispatch(
        &self,
        hook: HookPoint,
        event: EventKind,
        state: SessionState,
    ) -> &[Arc<InstalledProgram>] {
        self.dispatch
            .get(&(hook, event, state))
            .map_or(&[], |v| v.as_slice())
    }

    pub fn spec_get(&self, key: &[u8]) -> Option<u64> {
        let k: [u8; SPEC_KEY_SIZE] = key.try_into().ok()?;
        self.specifications.get(&k).copied()
    }

    /// Specifications entries decoded, ordered by sequence number.
    pub fn bindings(&self) -> Vec<(SpecKey, String, u64)> {
        let mut v: Vec<_> = self
            .specifications
            .iter()
            .filter_map(|(k, &seq)| parse_spec_key(k).ok().map(|(sk, id)| (sk, id, seq)))
            .collect();
        v.sort_by(|a, b| (a.2, &a.1).cmp(&(b.2, &b.1)));
        v
    }

    fn rebuild(&mut self) {
        let mut table: HashMap<_, Vec<Arc<InstalledProgram>>> = HashMap::new();
        for (k, id, _) in self.bindings() {
            let Some(p) = self.programs.get(&id) else {
                continue;
            };
            for s in SessionState::ALL {
                if k.state.is_none_or(|f| f == s) {
                    table
                        .entry((k.hook, k.event, s))
                        .or_default()
                        .push(p.clone());
                }
            }
        }
        self.dispatch = table;
    }

    fn bump(&mut self) -> u64 {
        self.next_seq += 1;
        self.next_seq
    }

    fn unbind(&mut self, id: &str) {
        self.specifications
            .retain(|k, _| parse_spec_key(k).map_or(true, |(_, i)| i != id));
    }

    fn install(&mut self, p: PolicyProgram, bind: bool) -> Result<(), StoreError> {
        check_id(&p.id)?;
        let verified = verify(&p.bytecode, &MAP_DESCS).map_err(|err| StoreError::Verifier {
            id: p.id.clone(),
            err,
        })?;
        if bind {
            self.unbind(&p.id);
            let key = spec_key(p.attach.into(), &p.id)?;
            self.spec_put(&key, &[])?;
        }
        let id = p.id.clone();
        self.programs.insert(
            id,
            Arc::new(InstalledProgram {
                program: p,
                verified,
            }),
        );
        Ok(())
    }

    /// Empty `value` means "next sequence number".
    fn spec_put(&mut self, key: &[u8], value: &[u8]) -> Result<(), StoreError> {
        parse_spec_key(key)?;
        let seq = match value.len() {
            0 => self.bump(),
            SPEC_VALUE_SIZE => {
                let s = u64::from_le_bytes(value.try_into().expect("length checked"));
                self.next_seq = self.next_seq.max(s);
                s
            }
            n => {
                return Err(MapError::SizeMismatch {
                    map: SPECIFICATIONS.into(),
                    expected: SPEC_VALUE_SIZE,
                    got: n,
                }
                .into())
            }
        };
        let k: [u8; SPEC_KEY_SIZE] = key.try_into().expect("length checked");
        if !self.specifications.contains_key(&k) && self.specifications.len() >= SPEC_MAX_ENTRIES {
            return Err(MapError::CapacityExceeded(SPECIFICATIONS.into()).into());
        }
        self.specifications.insert(k, seq);
        Ok(())
    }
}

/// A single store mutation; [`PolicyStore::apply`] commits a list of them
/// atomically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StoreOp {
    Install(PolicyProgram),
    Remove(String),
    MapPut {
        map: String,
        key: Vec<u8>,
        value: Vec<u8>,
    },
    MapDelete {
        map: String,
        key: Vec<u8>,
    },
}

pub struct PolicyStore {
    current: RwLock<Arc<Snapshot>>,
    session_flags: Arc<VmMap>,
    writer: Mutex<()>,
}

impl Default for PolicyStore {
    fn default() -> Self {
        PolicyStore::new()
    }
}

impl PolicyStore {
    pub fn new() -> PolicyStore {
        let d = MAP_DESCS[MAP_SESSION_FLAGS as usize];
        PolicyStore {
            current: RwLock::new(Arc::new(Snapshot::default())),
            session_flags: Arc::new(VmMap::new(
                SESSION_FLAGS,
                d.key_size,
                d.value_size,
                d.max_entries,
            )),
            writer: Mutex::new(()),
        }
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.current
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
    }

    pub fn session_flags(&self) -> &Arc<VmMap> {
        &self.session_flags
    }

    pub fn map_names() -> [&'static str; 2] {
        [SPECIFICATIONS, SESSION_FLAGS]
    }

    /// Applies `ops` in order. If any fails, nothing is changed.
    pub fn apply(&self, ops: Vec<StoreOp>) -> Result<(), StoreError> {
        let _w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let mut next = (*self.snapshot()).clone();
        let mut flags = self.session_flags.entries();
        let d = self.session_flags.desc;
        for op in ops {
            match op {
                StoreOp::Install(p) => next.install(p, true)?,
                StoreOp::Remove(id) => {
                    if next.programs.remove(&id).is_none() {
                        return Err(StoreError::UnknownProgram(id));
                    }
                    next.unbind(&id);
                }
                StoreOp::MapPut { map, key, value } => match map.as_str() {
                    SPECIFICATIONS => next.spec_put(&key, &value)?,
                    SESSION_FLAGS => {
                        let sz = |expected, got| MapError::SizeMismatch {
                            map: map.clone(),
                            expected,
                            got,
                        };
                        if key.len() != d.key_size {
                            return Err(sz(d.key_size, key.len()).into());
                        }
                        if value.len() != d.value_size {
                            return Err(sz(d.value_size, value.len()).into());
                        }
                        if !flags.contains_key(&key) && flags.len() >= d.max_entries {
                            return Err(MapError::CapacityExceeded(map).into());
                        }
                        flags.insert(key, value);
                    }
                    _ => return Err(StoreError::UnknownMap(map)),
                },
                StoreOp::MapDelete { map, key } => match map.as_str() {
                    SPECIFICATIONS => {
                        parse_spec_key(&key)?;
                        let k: [u8; SPEC_KEY_SIZE] = key.as_slice().try_into().expect("checked");
                        next.specifications.remove(&k);
                    }
                    SESSION_FLAGS => {
                        if key.len() != d.key_size {
                            return Err(MapError::SizeMismatch {
                                map,
                                expected: d.key_size,
                                got: key.len(),
                            }
                            .into());
                        }
                        flags.remove(&key);
                    }
                    _ => return Err(StoreError::UnknownMap(map)),
                },
            }
        }
        next.rebuild();
        self.session_flags.replace(flags);
        *self.current.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(next);
        Ok(())
    }

    pub fn install(&self, p: PolicyProgram) -> Result<(), StoreError> {
        self.apply(vec![StoreOp::Install(p)])
    }

    pub fn remove(&self, id: &str) -> Result<(), StoreError> {
        self.apply(vec![StoreOp::Remove(id.to_string())])
    }

    pub fn map_put(&self, map: &str, key: &[u8], value: &[u8]) -> Result<(), StoreError> {
        self.apply(vec![StoreOp::MapPut {
            map: map.to_string(),
            key: key.to_vec(),
            value: value.to_vec(),
        }])
    }

    pub fn map_delete(&self, map: &str, key: &[u8]) -> Result<(), StoreError> {
        self.apply(vec![StoreOp::MapDelete {
            map: map.to_string(),
            key: key.to_vec(),
        }])
    }

    pub fn set_paths(&self, paths: Vec<MaliciousPath>) {
        let _w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let mut next = (*self.snapshot()).clone();
        next.paths = paths;
        *self.current.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(next);
    }

    /// Canonical serialisation of the whole store, for equality checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let snap = self.snapshot();
        let mut out = Vec::new();
        let mut field = |b: &[u8]| {
            out.extend_from_slice(&(b.len() as u32).to_le_bytes());
            out.extend_from_slice(b);
        };
        for p in snap.programs.values() {
            field(&encode_container(&p.program).unwrap_or_default());
        }
        for (k, v) in &snap.specifications {
            field(k);
            field(&v.to_le_bytes());
        }
        for p in &snap.paths {
            field(p.to_string().as_bytes());
        }
        for (k, v) in self.session_flags.entries() {
            field(&k);
            field(&v);
        }
        out
    }

    /// Loads `*.ifw` containers, `paths.txt` and, if present, `bindings.txt`
    /// (`<hook> <event> <state|ANY> <id> <seq>` per line), which replaces the
    /// attach keys carried by the containers.
    pub fn load_dir(dir: &Path) -> Result<PolicyStore, StoreError> {
        let mut files: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ifw"))
            .collect();
        files.sort();
        let bindings = match fs::read_to_string(dir.join("bindings.txt")) {
            Ok(t) => Some(parse_bindings(&t)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        let mut snap = Snapshot::default();
        for f in files {
            let p = decode_container(&fs::read(&f)?)?;
            snap.install(p, bindings.is_none())?;
        }
        for (k, id, seq) in bindings.unwrap_or_default() {
            snap.spec_put(&spec_key(k, &id)?, &seq.to_le_bytes())?;
        }
        match fs::read_to_string(dir.join("paths.txt")) {
            Ok(t) => snap.paths = MaliciousPath::parse_file(&t)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        snap.rebuild();
        let store = PolicyStore::new();
        *store.current.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(snap);
        Ok(store)
    }

    /// Writes the store in the layout [`PolicyStore::load_dir`] reads,
    /// replacing any containers already in `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<(), StoreError> {
        fs::create_dir_all(dir)?;
        for e in fs::read_dir(dir)? {
            let p = e?.path();
            if p.extension().is_some_and(|x| x == "ifw") {
                fs::remove_file(p)?;
            }
        }
        let snap = self.snapshot();
        for (id, p) in &snap.programs {
            fs::write(dir.join(format!("{id}.ifw")), encode_container(&p.program)?)?;
        }
        let mut b = String::new();
        for (k, id, seq) in snap.bindings() {
            let st = k.state.map_or("ANY", |s| s.name());
            b.push_str(&format!("{} {} {st} {id} {seq}\n", k.hook, k.event));
        }
        fs::write(dir.join("bindings.txt"), b)?;
        let mut p = String::new();
        for path in &snap.paths {
            p.push_str(&format!("{path}\n"));
        }
        fs::write(dir.join("paths.txt"), p)?;
        Ok(())
    }
}

fn parse_bindings(text: &str) -> Result<Vec<(SpecKey, String, u64)>, StoreError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || StoreError::Malformed(format!("bindings.txt line {}: `{line}`", n + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        let [hook, event, state, id, seq] = f[..] else {
            return Err(bad());
        };
        let key = SpecKey {
            hook: HookPoint::from_name(hook).ok_or_else(bad)?,
            event: EventKind::from_name(event).ok_or_else(bad)?,
            state: match state {
                "ANY" => None,
                s => Some(SessionState::from_name(s).ok_or_else(bad)?),
            },
        };
        out.push((key, id.to_string(), seq.parse().map_err(|_| bad())?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::isa::assemble;

    fn prog(id: &str, state: Option<SessionState>, ret: u8) -> PolicyProgram {
        PolicyProgram {
            id: id.into(),
            attach: Attach {
                hook: HookPoint::SmpRx,
                event: EventKind::PacketObserved,
                state,
            },
            bytecode: assemble(&format!("mov r0, {ret}\nexit")).unwrap(),
        }
    }

    fn ids(s: &Snapshot, st: SessionState) -> Vec<String> {
        s.dispatch(HookPoint::SmpRx, EventKind::PacketObserved, st)
            .iter()
            .map(|p| p.program.id.clone())
            .collect()
    }

    #[test]
    fn dispatch_respects_state_filter_and_order() {
        let st = PolicyStore::new();
        st.install(prog("b", Some(SessionState::KeySharing), 1))
            .unwrap();
        st.install(prog("a", None, 0)).unwrap();
        let s = st.snapshot();
        assert_eq!(ids(&s, SessionState::KeySharing), ["b", "a"]);
        assert_eq!(ids(&s, SessionState::Discovery), ["a"]);
        assert!(s
            .dispatch(
                HookPoint::LlTx,
                EventKind::PacketObserved,
                SessionState::KeySharing
            )
            .is_empty());
    }

    #[test]
    fn removing_spec_entry_stops_dispatch() {
        let st = PolicyStore::new();
        st.install(prog("interval", None, 1)).unwrap();
        let key = spec_key(prog("interval", None, 1).attach.into(), "interval").unwrap();
        assert_eq!(st.snapshot().spec_get(&key), Some(1));
        st.map_delete(SPECIFICATIONS, &key).unwrap();
        assert!(ids(&st.snapshot(), SessionState::Standby).is_empty());
        assert!(st.snapshot().programs.contains_key("interval"));
    }

    #[test]
    fn failed_batch_changes_nothing() {
        let st = PolicyStore::new();
        st.install(prog("a", None, 0)).unwrap();
        st.map_put(SESSION_FLAGS, &[1; 8], &[2; 8]).unwrap();
        let before = st.to_bytes();
        let mut bad = prog("c", None, 0);
        bad.bytecode = assemble("mov r0, 0").unwrap();
        let r = st.apply(vec![
            StoreOp::Remove("a".into()),
            StoreOp::MapPut {
                map: SESSION_FLAGS.into(),
                key: vec![3; 8],
                value: vec![4; 8],
            },
            StoreOp::Install(bad),
        ]);
        assert!(matches!(r, Err(StoreError::Verifier { .. })));
        assert_eq!(st.to_bytes(), before);
        assert!(matches!(
            st.remove("zz"),
            Err(StoreError::UnknownProgram(_))
        ));
        assert!(matches!(
            st.map_put("nope", &[], &[]),
            Err(StoreError::UnknownMap(_))
        ));
    }

    #[test]
    fn reinstall_replaces_binding() {
        let st = PolicyStore::new();
        st.install(prog("a", None, 0)).unwrap();
        st.install(prog("a", Some(SessionState::Discovery), 1))
            .unwrap();
        let s = st.snapshot();
        assert_eq!(s.specifications.len(), 1);
        assert_eq!(ids(&s, SessionState::Discovery), ["a"]);
        assert!(ids(&s, SessionState::Standby).is_empty());
    }

    #[test]
    fn dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let st = PolicyStore::new();
        st.install(prog("a", None, 0)).unwrap();
        st.install(prog("b", Some(SessionState::KeySharing), 1))
            .unwrap();
        st.set_paths(vec![MaliciousPath::parse_line(
            "p CONNECTION_BREAK STANDBY:INIT",
            1,
        )
        .unwrap()]);
        st.save_dir(dir.path()).unwrap();
        let back = PolicyStore::load_dir(dir.path()).unwrap();
        assert_eq!(back.to_bytes(), st.to_bytes());
    }

    #[test]
    fn spec_key_round_trip() {
        let k = SpecKey {
            hook: HookPoint::LlRxCtrl,
            event: EventKind::ConnectionEstablished,
            state: None,
        };
        let b = spec_key(k, "conn_interval").unwrap();
        assert_eq!(parse_spec_key(&b).unwrap(), (k, "conn_interval".into()));
        assert!(spec_key(k, &"x".repeat(29)).is_err());
    }
}
