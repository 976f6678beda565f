//! Numeric codes shared between the engine and policy programs.
//!
//! Policy bytecode reads a fixed-layout context block. Everything a program
//! can observe is named here; changing a value breaks installed programs.

/// Verdict returned in `r0`.
pub const VERDICT_PASS: u64 = 0;
pub const VERDICT_REJECT: u64 = 1;

/// Byte offsets of the scalar header fields of the context block.
pub const OFF_STATE: usize = 0;
pub const OFF_EVENT: usize = 8;
pub const OFF_HOOK: usize = 16;
pub const OFF_PDU_KIND: usize = 24;
pub const OFF_PKT_LEN: usize = 32;
pub const OFF_DECODE_STATUS: usize = 40;
pub const OFF_DC_PARAM: usize = 48;

/// Number of 64-bit `dc_param` slots.
pub const DC_SLOTS: usize = 32;

/// Total context block size in bytes.
pub const CTX_SIZE: usize = OFF_DC_PARAM + DC_SLOTS * 8;

/// Byte offset of `dc_param[slot]` within the context block.
pub const fn dc_offset(slot: usize) -> usize {
    OFF_DC_PARAM + slot * 8
}

/// Named `dc_param` slot indices.
pub mod dc {
    pub const SMP_KEYS: usize = 0;
    pub const SMP_KEYS_FLAGS: usize = 1;
    pub const SMP_ENC_SIZE: usize = 2;
    pub const SMP_ENC_SIZE_PREV: usize = 3;
    pub const SMP_METHOD: usize = 4;
    pub const SMP_METHOD_PREV: usize = 5;
    pub const PEER_BONDED: usize = 6;
    pub const ATTR_SEC_LEVEL: usize = 7;
    pub const ATTR_SEC_LEVEL_PREV: usize = 8;
    pub const REPEAT_COUNT: usize = 9;
    pub const INTERVAL: usize = 10;
    pub const CHANNEL_MAP_POPCOUNT: usize = 11;
    pub const HOP: usize = 12;
    pub const REPEAT_THRESHOLD: usize = 13;
    pub const STRICT_KEYSIZE: usize = 14;
    pub const PEER_ADDR: usize = 15;
    pub const SESSION_ID: usize = 16;
    pub const ATT_HANDLE: usize = 17;
    pub const ATT_ERROR: usize = 18;
    pub const L2CAP_LEN: usize = 19;
    pub const L2CAP_CID: usize = 20;
    pub const LINK_ENCRYPTED: usize = 21;
    pub const CHANNEL_MAP_RESERVED: usize = 22;
    pub const PAYLOAD_LEN: usize = 23;

    pub const NAMES: [(&str, usize); 24] = [
        ("SMP_KEYS", SMP_KEYS),
        ("SMP_KEYS_FLAGS", SMP_KEYS_FLAGS),
        ("SMP_ENC_SIZE", SMP_ENC_SIZE),
        ("SMP_ENC_SIZE_PREV", SMP_ENC_SIZE_PREV),
        ("SMP_METHOD", SMP_METHOD),
        ("SMP_METHOD_PREV", SMP_METHOD_PREV),
        ("PEER_BONDED", PEER_BONDED),
        ("ATTR_SEC_LEVEL", ATTR_SEC_LEVEL),
        ("ATTR_SEC_LEVEL_PREV", ATTR_SEC_LEVEL_PREV),
        ("REPEAT_COUNT", REPEAT_COUNT),
        ("INTERVAL", INTERVAL),
        ("CHANNEL_MAP_POPCOUNT", CHANNEL_MAP_POPCOUNT),
        ("HOP", HOP),
        ("REPEAT_THRESHOLD", REPEAT_THRESHOLD),
        ("STRICT_KEYSIZE", STRICT_KEYSIZE),
        ("PEER_ADDR", PEER_ADDR),
        ("SESSION_ID", SESSION_ID),
        ("ATT_HANDLE", ATT_HANDLE),
        ("ATT_ERROR", ATT_ERROR),
        ("L2CAP_LEN", L2CAP_LEN),
        ("L2CAP_CID", L2CAP_CID),
        ("LINK_ENCRYPTED", LINK_ENCRYPTED),
        ("CHANNEL_MAP_RESERVED", CHANNEL_MAP_RESERVED),
        ("PAYLOAD_LEN", PAYLOAD_LEN),
    ];

    pub fn index_of(name: &str) -> Option<usize> {
        NAMES.iter().find(|(n, _)| *n == name).map(|(_, i)| *i)
    }
}

/// Key-type flag bits carried in `SMP_KEYS` / `SMP_KEYS_FLAGS`.
pub const BT_KEYS_AUTHENTICATED: u64 = 1;
pub const BT_KEYS_LTK: u64 = 4;
pub const BT_KEYS_LTK_P256: u64 = 32;

/// Pairing method codes carried in `SMP_METHOD` / `SMP_METHOD_PREV`.
pub const METHOD_NONE: u64 = 0;
pub const METHOD_JUST_WORKS: u64 = 1;
pub const METHOD_PASSKEY: u64 = 2;
pub const METHOD_NUMERIC_COMPARISON: u64 = 3;
pub const METHOD_OOB: u64 = 4;

/// Values of the decode-status header field.
pub const DECODE_OK: u64 = 0;
pub const DECODE_TRUNCATED: u64 = 1;
pub const DECODE_OVERSIZED: u64 = 2;
pub const DECODE_LENGTH_MISMATCH: u64 = 3;
pub const DECODE_ILLEGAL_FIELD: u64 = 4;
pub const DECODE_INVARIANT: u64 = 5;

/// State filter value meaning "any state" in attach keys.
pub const STATE_ANY: u8 = 0xff;

/// Place in the stack where traffic is observed.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
#[repr(u8)]
pub enum HookPoint {
    LlRxCtrl = 0,
    LlRxData = 1,
    LlTx = 2,
    SmpRx = 3,
    SmpTx = 4,
}

impl HookPoint {
    pub const ALL: [HookPoint; 5] = [
        HookPoint::LlRxCtrl,
        HookPoint::LlRxData,
        HookPoint::LlTx,
        HookPoint::SmpRx,
        HookPoint::SmpTx,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<HookPoint> {
        HookPoint::ALL.get(c as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            HookPoint::LlRxCtrl => "LL_RX_CTRL",
            HookPoint::LlRxData => "LL_RX_DATA",
            HookPoint::LlTx => "LL_TX",
            HookPoint::SmpRx => "SMP_RX",
            HookPoint::SmpTx => "SMP_TX",
        }
    }

    pub fn from_name(s: &str) -> Option<HookPoint> {
        HookPoint::ALL.into_iter().find(|h| h.name() == s)
    }

    pub fn is_rx(self) -> bool {
        matches!(
            self,
            HookPoint::LlRxCtrl | HookPoint::LlRxData | HookPoint::SmpRx
        )
    }
}

impl std::fmt::Display for HookPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
