//! Runtime patch channel.
//!
//! ```text
//! "IFW1" | op u8 | body_len u32 LE | body | crc32 LE (over everything before it)
//! ```
//!
//! Request bodies:
//!
//! | op | name       | body                                                   |
//! |----|------------|--------------------------------------------------------|
//! | 1  | INSTALL    | program container                                      |
//! | 2  | REMOVE     | program id                                             |
//! | 3  | MAP_PUT    | name_len u8, name, key_len u16 LE, key, value          |
//! | 4  | MAP_DELETE | name_len u8, name, key                                 |
//! | 5  | LIST       | empty                                                  |
//! | 6  | PING       | anything; echoed back                                  |
//! | 7  | BATCH      | concatenated frames of ops 1-4, applied all or nothing |
//!
//! Every request gets one response frame with op `0x80` and body
//! `status u8 | utf-8 text`.

use std::fmt::Write as _;
use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};

use crate::vm::store::StoreOp;
use crate::vm::{decode_container, encode_container, PolicyProgram, PolicyStore, StoreError};

pub const MAGIC: &[u8; 4] = b"IFW1";
pub const HEADER_LEN: usize = 9;
pub const MAX_BODY: usize = 1 << 20;

pub const OP_INSTALL: u8 = 1;
pub const OP_REMOVE: u8 = 2;
pub const OP_MAP_PUT: u8 = 3;
pub const OP_MAP_DELETE: u8 = 4;
pub const OP_LIST: u8 = 5;
pub const OP_PING: u8 = 6;
pub const OP_BATCH: u8 = 7;
pub const OP_RESPONSE: u8 = 0x80;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    BadCrc = 1,
    Verifier = 2,
    UnknownProgram = 3,
    UnknownMap = 4,
    Malformed = 5,
    UnknownOp = 6,
    SizeMismatch = 7,
    Capacity = 8,
}

impl Status {
    pub fn from_code(c: u8) -> Option<Status> {
        use Status::*;
        [
            Ok,
            BadCrc,
            Verifier,
            UnknownProgram,
            UnknownMap,
            Malformed,
            UnknownOp,
            SizeMismatch,
            Capacity,
        ]
        .get(c as usize)
        .copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: Status,
    pub message: String,
}

impl Response {
    fn ok(message: impl Into<String>) -> Response {
        Response {
            status: Status::Ok,
            message: message.into(),
        }
    }

    fn err(status: Status, message: impl Into<String>) -> Response {
        Response {
            status,
            message: message.into(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok
    }

    pub fn to_frame(&self) -> Vec<u8> {
        let mut body = vec![self.status as u8];
        body.extend_from_slice(self.message.as_bytes());
        encode_frame(OP_RESPONSE, &body)
    }

    pub fn from_frame(raw: &[u8]) -> Result<Response, FrameError> {
        let (op, body) = decode_frame(raw)?;
        if op != OP_RESPONSE {
            return Err(FrameError::Malformed(format!(
                "expected a response, got op {op}"
            )));
        }
        let (&code, text) = body
            .split_first()
            .ok_or_else(|| FrameError::Malformed("empty response".into()))?;
        Ok(Response {
            status: Status::from_code(code)
                .ok_or_else(|| FrameError::Malformed(format!("unknown status {code}")))?,
            message: String::from_utf8_lossy(text).into_owned(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FrameError {
    #[error("bad magic")]
    BadMagic,
    #[error("frame truncated")]
    Truncated,
    #[error("crc mismatch")]
    BadCrc,
    #[error("body of {0} bytes exceeds the frame limit")]
    TooLarge(usize),
    #[error("malformed: {0}")]
    Malformed(String),
}

/// A decoded request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PatchOp {
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
    List,
    Ping(Vec<u8>),
    Batch(Vec<PatchOp>),
}

pub fn encode_frame(op: u8, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + body.len() + 4);
    out.extend_from_slice(MAGIC);
    out.push(op);
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(body);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Length of the frame starting at `raw`, once its header is available.
fn frame_len(raw: &[u8]) -> Result<usize, FrameError> {
    if raw.len() < HEADER_LEN {
        return Err(FrameError::Truncated);
    }
    if &raw[..4] != MAGIC {
        return Err(FrameError::BadMagic);
    }
    let len = u32::from_le_bytes([raw[5], raw[6], raw[7], raw[8]]) as usize;
    if len > MAX_BODY {
        return Err(FrameError::TooLarge(len));
    }
    Ok(HEADER_LEN + len + 4)
}

/// Checks one complete frame and returns its op and body.
pub fn decode_frame(raw: &[u8]) -> Result<(u8, &[u8]), FrameError> {
    let n = frame_len(raw)?;
    if raw.len() < n {
        return Err(FrameError::Truncated);
    }
    if raw.len() > n {
        return Err(FrameError::Malformed(format!(
            "{} trailing bytes",
            raw.len() - n
        )));
    }
    let stored = u32::from_le_bytes([raw[n - 4], raw[n - 3], raw[n - 2], raw[n - 1]]);
    if stored != crc32fast::hash(&raw[..n - 4]) {
        return Err(FrameError::BadCrc);
    }
    Ok((raw[4], &raw[HEADER_LEN..n - 4]))
}

fn name_field(out: &mut Vec<u8>, map: &str) {
    out.push(map.len().min(255) as u8);
    out.extend_from_slice(&map.as_bytes()[..map.len().min(255)]);
}

impl PatchOp {
    pub fn to_frame(&self) -> Vec<u8> {
        match self {
            PatchOp::Install(p) => encode_frame(
                OP_INSTALL,
                &encode_container(p).unwrap_or_else(|_| Vec::new()),
            ),
            PatchOp::Remove(id) => encode_frame(OP_REMOVE, id.as_bytes()),
            PatchOp::MapPut { map, key, value } => {
                let mut b = Vec::new();
                name_field(&mut b, map);
                b.extend_from_slice(&(key.len() as u16).to_le_bytes());
                b.extend_from_slice(key);
                b.extend_from_slice(value);
                encode_frame(OP_MAP_PUT, &b)
            }
            PatchOp::MapDelete { map, key } => {
                let mut b = Vec::new();
                name_field(&mut b, map);
                b.extend_from_slice(key);
                encode_frame(OP_MAP_DELETE, &b)
            }
            PatchOp::List => encode_frame(OP_LIST, &[]),
            PatchOp::Ping(b) => encode_frame(OP_PING, b),
            PatchOp::Batch(ops) => {
                let body: Vec<u8> = ops.iter().flat_map(|o| o.to_frame()).collect();
                encode_frame(OP_BATCH, &body)
            }
        }
    }

    /// Decodes a request frame. The error carries the status to answer
    /// with.
    pub fn from_frame(raw: &[u8]) -> Result<PatchOp, Response> {
        let (op, body) = decode_frame(raw).map_err(|e| match e {
            FrameError::BadCrc => Response::err(Status::BadCrc, e.to_string()),
            FrameError::TooLarge(_) => Response::err(Status::Capacity, e.to_string()),
            _ => Response::err(Status::Malformed, e.to_string()),
        })?;
        let malformed = |m: &str| Response::err(Status::Malformed, m.to_string());
        let name = |b: &[u8]| -> Result<(String, usize), Response> {
            let n = *b.first().ok_or_else(|| malformed("missing map name"))? as usize;
            let s = b
                .get(1..1 + n)
                .ok_or_else(|| malformed("truncated map name"))?;
            let s = std::str::from_utf8(s).map_err(|_| malformed("map name is not utf-8"))?;
            Ok((s.to_string(), 1 + n))
        };
        Ok(match op {
            OP_INSTALL => PatchOp::Install(
                decode_container(body)
                    .map_err(|e| Response::err(Status::Malformed, e.to_string()))?,
            ),
            OP_REMOVE => PatchOp::Remove(
                std::str::from_utf8(body)
                    .map_err(|_| malformed("program id is not utf-8"))?
                    .to_string(),
            ),
            OP_MAP_PUT => {
                let (map, at) = name(body)?;
                let kl = body
                    .get(at..at + 2)
                    .ok_or_else(|| malformed("missing key length"))?;
                let kl = u16::from_le_bytes([kl[0], kl[1]]) as usize;
                let key = body
                    .get(at + 2..at + 2 + kl)
                    .ok_or_else(|| malformed("truncated key"))?;
                PatchOp::MapPut {
                    map,
                    key: key.to_vec(),
                    value: body[at + 2 + kl..].to_vec(),
                }
            }
            OP_MAP_DELETE => {
                let (map, at) = name(body)?;
                PatchOp::MapDelete {
                    map,
                    key: body[at..].to_vec(),
                }
            }
            OP_LIST => PatchOp::List,
            OP_PING => PatchOp::Ping(body.to_vec()),
            OP_BATCH => {
                let mut ops = Vec::new();
                let mut rest = body;
                while !rest.is_empty() {
                    let n = frame_len(rest).map_err(|e| malformed(&e.to_string()))?;
                    let f = rest
                        .get(..n)
                        .ok_or_else(|| malformed("truncated batch entry"))?;
                    let o = PatchOp::from_frame(f)?;
                    if !matches!(
                        o,
                        PatchOp::Install(_)
                            | PatchOp::Remove(_)
                            | PatchOp::MapPut { .. }
                            | PatchOp::MapDelete { .. }
                    ) {
                        return Err(malformed("batches may only carry store updates"));
                    }
                    ops.push(o);
                    rest = &rest[n..];
                }
                PatchOp::Batch(ops)
            }
            other => {
                return Err(Response::err(
                    Status::UnknownOp,
                    format!("unknown op {other:#04x}"),
                ))
            }
        })
    }

    fn into_store_ops(self) -> Vec<StoreOp> {
        match self {
            PatchOp::Install(p) => vec![StoreOp::Install(p)],
            PatchOp::Remove(id) => vec![StoreOp::Remove(id)],
            PatchOp::MapPut { map, key, value } => vec![StoreOp::MapPut { map, key, value }],
            PatchOp::MapDelete { map, key } => vec![StoreOp::MapDelete { map, key }],
            PatchOp::Batch(ops) => ops.into_iter().flat_map(PatchOp::into_store_ops).collect(),
            PatchOp::List | PatchOp::Ping(_) => Vec::new(),
        }
    }
}

fn status_of(e: &StoreError) -> Status {
    match e {
        StoreError::Verifier { .. } => Status::Verifier,
        StoreError::UnknownProgram(_) => Status::UnknownProgram,
        StoreError::UnknownMap(_) => Status::UnknownMap,
        StoreError::Map(crate::vm::MapError::SizeMismatch { .. }) => Status::SizeMismatch,
        StoreError::Map(crate::vm::MapError::CapacityExceeded(_)) => Status::Capacity,
        _ => Status::Malformed,
    }
}

/// One line per binding: `<id> <hook> <event> <state|ANY> <seq>`, then
/// installed programs without a binding as `<id> - - - -`.
pub fn listing(store: &PolicyStore) -> String {
    let snap = store.snapshot();
    let mut out = String::new();
    let bindings = snap.bindings();
    for (k, id, seq) in &bindings {
        let state = k.state.map_or("ANY", |s| s.name());
        let _ = writeln!(out, "{id} {} {} {state} {seq}", k.hook, k.event);
    }
    for id in snap.programs.keys() {
        if !bindings.iter().any(|(_, b, _)| b == id) {
            let _ = writeln!(out, "{id} - - - -");
        }
    }
    out
}

/// Decodes and applies one request frame.
pub fn handle(store: &PolicyStore, frame: &[u8]) -> Response {
    let op = match PatchOp::from_frame(frame) {
        Ok(op) => op,
        Err(r) => return r,
    };
    match op {
        PatchOp::Ping(b) => Response::ok(String::from_utf8_lossy(&b)),
        PatchOp::List => Response::ok(listing(store)),
        op => {
            let ops = op.into_store_ops();
            let n = ops.len();
            match store.apply(ops) {
                Ok(()) => Response::ok(format!("applied {n}")),
                Err(e) => Response::err(status_of(&e), e.to_string()),
            }
        }
    }
}

/// Reads one frame. Returns `None` on a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    let mut head = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut head[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(io::ErrorKind::UnexpectedEof.into()),
            n => got += n,
        }
    }
    let n = frame_len(&head).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    let mut frame = head.to_vec();
    frame.resize(n, 0);
    r.read_exact(&mut frame[HEADER_LEN..])?;
    Ok(Some(frame))
}

/// Serves one connection: frames are applied strictly in order.
pub fn serve_connection(store: &PolicyStore, mut stream: impl Read + Write) -> io::Result<()> {
    loop {
        let frame = match read_frame(&mut stream) {
            Ok(Some(f)) => f,
            Ok(None) => return Ok(()),
            Err(e) if e.kind() == io::ErrorKind::InvalidData => {
                let r = Response::err(Status::Malformed, e.to_string());
                stream.write_all(&r.to_frame())?;
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        let r = handle(store, &frame);
        log::info!("patch op {:#04x}: {:?}", frame[4], r.status);
        stream.write_all(&r.to_frame())?;
    }
}

/// Accepts connections one at a time; later clients wait in the listen
/// backlog until the current one disconnects.
pub fn serve(store: &PolicyStore, listener: TcpListener) -> io::Result<()> {
    for stream in listener.incoming() {
        match stream {
            Ok(s) => {
                if let Err(e) = serve_connection(store, s) {
                    log::warn!("patch connection: {e}");
                }
            }
            Err(e) => log::warn!("accept: {e}"),
        }
    }
    Ok(())
}

pub struct PatchClient {
    stream: TcpStream,
}

impl PatchClient {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<PatchClient> {
        Ok(PatchClient {
            stream: TcpStream::connect(addr)?,
        })
    }

    pub fn send_raw(&mut self, frame: &[u8]) -> io::Result<Response> {
        self.stream.write_all(frame)?;
        let raw = read_frame(&mut self.stream)?.ok_or(io::ErrorKind::UnexpectedEof)?;
        Response::from_frame(&raw).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }

    pub fn request(&mut self, op: &PatchOp) -> io::Result<Response> {
        self.send_raw(&op.to_frame())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rules::{default_programs, store_with};
    use crate::vm::isa::assemble;
    use crate::vm::store::{spec_key, SpecKey, SPECIFICATIONS};
    use proptest::prelude::*;

    fn knob() -> PolicyProgram {
        default_programs()
            .into_iter()
            .find(|p| p.id == "knob_keysize")
            .unwrap()
    }

    fn looping() -> PolicyProgram {
        PolicyProgram {
            id: "spin".into(),
            bytecode: assemble("top: mov r0, 0\nja top\nexit").unwrap(),
            ..knob()
        }
    }

    #[test]
    fn frame_layout() {
        let f = PatchOp::Remove("knob_keysize".into()).to_frame();
        assert_eq!(&f[..4], b"IFW1");
        assert_eq!(f[4], OP_REMOVE);
        assert_eq!(&f[5..9], &12u32.to_le_bytes());
        assert_eq!(&f[9..21], b"knob_keysize");
        assert_eq!(&f[21..], &crc32fast::hash(&f[..21]).to_le_bytes());
    }

    #[test]
    fn ops_round_trip() {
        let ops = vec![
            PatchOp::Install(knob()),
            PatchOp::Remove("x".into()),
            PatchOp::MapPut {
                map: "session_flags".into(),
                key: vec![1; 8],
                value: vec![2; 8],
            },
            PatchOp::MapDelete {
                map: "specifications".into(),
                key: vec![3; 32],
            },
            PatchOp::List,
            PatchOp::Ping(b"hi".to_vec()),
        ];
        for op in &ops {
            assert_eq!(&PatchOp::from_frame(&op.to_frame()).unwrap(), op);
        }
        let batch = PatchOp::Batch(ops[..4].to_vec());
        assert_eq!(PatchOp::from_frame(&batch.to_frame()).unwrap(), batch);
    }

    #[test]
    fn install_remove_and_errors() {
        let store = PolicyStore::new();
        assert!(handle(&store, &PatchOp::Install(knob()).to_frame()).is_ok());
        assert!(listing(&store).starts_with("knob_keysize SMP_RX PAIRING_STARTED KEY_SHARING"));
        let before = store.to_bytes();
        let r = handle(&store, &PatchOp::Install(looping()).to_frame());
        assert_eq!(r.status, Status::Verifier);
        assert_eq!(store.to_bytes(), before);
        let r = handle(&store, &PatchOp::Remove("nope".into()).to_frame());
        assert_eq!(r.status, Status::UnknownProgram);
        let r = handle(
            &store,
            &PatchOp::MapDelete {
                map: "nope".into(),
                key: vec![],
            }
            .to_frame(),
        );
        assert_eq!(r.status, Status::UnknownMap);
        let r = handle(
            &store,
            &PatchOp::MapPut {
                map: "session_flags".into(),
                key: vec![1; 3],
                value: vec![0; 8],
            }
            .to_frame(),
        );
        assert_eq!(r.status, Status::SizeMismatch);
        assert!(handle(&store, &PatchOp::Remove("knob_keysize".into()).to_frame()).is_ok());
        assert!(store.snapshot().programs.is_empty());
    }

    #[test]
    fn corrupted_and_unknown_frames_change_nothing() {
        let store = PolicyStore::new();
        let before = store.to_bytes();
        let mut f = PatchOp::Install(knob()).to_frame();
        f[12] ^= 0xff;
        assert_eq!(handle(&store, &f).status, Status::BadCrc);
        assert_eq!(
            handle(&store, &encode_frame(0x42, b"")).status,
            Status::UnknownOp
        );
        assert_eq!(store.to_bytes(), before);
    }

    #[test]
    fn batch_is_all_or_nothing() {
        let store = PolicyStore::new();
        let before = store.to_bytes();
        let bad = PatchOp::Batch(vec![PatchOp::Install(knob()), PatchOp::Install(looping())]);
        assert_eq!(handle(&store, &bad.to_frame()).status, Status::Verifier);
        assert_eq!(store.to_bytes(), before);
        let good = PatchOp::Batch(
            default_programs()
                .into_iter()
                .take(2)
                .map(PatchOp::Install)
                .collect(),
        );
        assert!(handle(&store, &good.to_frame()).is_ok());
        assert_eq!(store.snapshot().programs.len(), 2);
    }

    #[test]
    fn spec_delete_stops_dispatch() {
        use crate::abi::HookPoint;
        use crate::fsm::{EventKind, SessionState};
        let store = store_with(&default_programs()).unwrap();
        let key = SpecKey {
            hook: HookPoint::LlRxCtrl,
            event: EventKind::PacketObserved,
            state: Some(SessionState::Discovery),
        };
        let snap = store.snapshot();
        let n = snap
            .dispatch(key.hook, key.event, SessionState::Discovery)
            .len();
        let r = handle(
            &store,
            &PatchOp::MapDelete {
                map: SPECIFICATIONS.into(),
                key: spec_key(key, "conn_interval").unwrap().to_vec(),
            }
            .to_frame(),
        );
        assert!(r.is_ok(), "{r:?}");
        let snap = store.snapshot();
        let ids: Vec<_> = snap
            .dispatch(key.hook, key.event, SessionState::Discovery)
            .iter()
            .map(|p| p.program.id.clone())
            .collect();
        assert_eq!(ids.len(), n - 1);
        assert!(!ids.contains(&"conn_interval".to_string()));
    }

    #[test]
    fn tcp_round_trip() {
        let store = std::sync::Arc::new(PolicyStore::new());
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let s = store.clone();
        std::thread::spawn(move || serve(&s, listener));
        let mut c = PatchClient::connect(addr).unwrap();
        let r = c.request(&PatchOp::Ping(b"pong".to_vec())).unwrap();
        assert_eq!(r.message, "pong");
        assert!(c.request(&PatchOp::Install(knob())).unwrap().is_ok());
        assert_eq!(store.snapshot().programs.len(), 1);
        let r = c.request(&PatchOp::List).unwrap();
        assert!(r.message.contains("knob_keysize"));
    }

    proptest! {
        #[test]
        fn arbitrary_frames_never_panic(b in prop::collection::vec(any::<u8>(), 0..80)) {
            let store = PolicyStore::new();
            let _ = handle(&store, &b);
            let mut framed = encode_frame(b.first().copied().unwrap_or(0) % 9, &b);
            let _ = handle(&store, &framed);
            framed.truncate(framed.len() / 2);
            let _ = handle(&store, &framed);
        }
    }
}
