//! Built-in rule set and malicious paths.
//!
//! Rule sources are assembler text in which `$NAME` stands for the context
//! offset of a header field or a `dc_param` slot.

use crate::abi::{dc, dc_offset, HookPoint, *};
use crate::fsm::{EventKind, MaliciousPath, SessionState};
use crate::pdu::PduKind;
use crate::vm::isa::{assemble, AsmError};
use crate::vm::{Attach, PolicyProgram, PolicyStore, StoreError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleSource {
    pub id: &'static str,
    pub attach: Attach,
    pub asm: String,
}

impl RuleSource {
    pub fn compile(&self) -> Result<PolicyProgram, AsmError> {
        Ok(PolicyProgram {
            id: self.id.to_string(),
            attach: self.attach,
            bytecode: assemble(&expand(&self.asm))?,
        })
    }
}

/// Replaces every `$NAME` with its context offset.
pub fn expand(src: &str) -> String {
    let mut out = String::with_capacity(src.len());
    let mut rest = src;
    while let Some(i) = rest.find('$') {
        out.push_str(&rest[..i]);
        let tail = &rest[i + 1..];
        let end = tail
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(tail.len());
        let name = &tail[..end];
        match field_offset(name) {
            Some(off) => out.push_str(&off.to_string()),
            None => {
                out.push('$');
                out.push_str(name);
            }
        }
        rest = &tail[end..];
    }
    out.push_str(rest);
    out
}

fn field_offset(name: &str) -> Option<usize> {
    Some(match name {
        "STATE" => OFF_STATE,
        "EVENT" => OFF_EVENT,
        "HOOK" => OFF_HOOK,
        "PDU_KIND" => OFF_PDU_KIND,
        "PKT_LEN" => OFF_PKT_LEN,
        "DECODE_STATUS" => OFF_DECODE_STATUS,
        _ => dc_offset(dc::index_of(name)?),
    })
}

const KNOB_KEYSIZE: &str = "\
    ldxdw r2, [r1+$SMP_KEYS]
    and r2, 36                      ; LTK | LTK_P256
    jeq r2, 0, pass
    ldxdw r3, [r1+$SMP_ENC_SIZE]
    ldxdw r4, [r1+$SMP_ENC_SIZE_PREV]
    ldxdw r5, [r1+$STRICT_KEYSIZE]
    jeq r5, 0, lax
    jne r3, r4, reject
lax:
    jlt r3, r4, reject
    ldxdw r2, [r1+$SMP_KEYS_FLAGS]
    and r2, 1                       ; authenticated bond
    jeq r2, 0, pass
    ldxdw r5, [r1+$SMP_METHOD]
    jeq r5, 1, reject               ; Just Works
pass:
    mov r0, 0
    exit
reject:
    mov r0, 1
    exit
";

const BLESA_ATTR_LEVEL: &str = "\
    ldxdw r2, [r1+$ATT_HANDLE]
    jeq r2, 0, pass
    ldxdw r3, [r1+$ATTR_SEC_LEVEL]
    ldxdw r4, [r1+$ATTR_SEC_LEVEL_PREV]
    jlt r3, r4, reject
pass:
    mov r0, 0
    exit
reject:
    mov r0, 1
    exit
";

const PIN_KEY_MISSING_DOWNGRADE: &str = "\
    ldxdw r2, [r1+$ATT_ERROR]
    jne r2, 6, pass
    ldxdw r2, [r1+$LINK_ENCRYPTED]
    jne r2, 0, pass
    ldxdw r2, [r1+$ATT_HANDLE]
    jeq r2, 0, pass
    mov r0, 1
    exit
pass:
    mov r0, 0
    exit
";

const CONN_INTERVAL: &str = "\
    ldxdw r2, [r1+$PDU_KIND]
    jne r2, 4, pass
    ldxdw r3, [r1+$INTERVAL]
    jlt r3, 6, reject
    jgt r3, 3200, reject
pass:
    mov r0, 0
    exit
reject:
    mov r0, 1
    exit
";

const CONN_CHAN_MAP: &str = "\
    ldxdw r2, [r1+$PDU_KIND]
    jne r2, 4, pass
    ldxdw r3, [r1+$CHANNEL_MAP_POPCOUNT]
    jlt r3, 2, reject
    ldxdw r3, [r1+$CHANNEL_MAP_RESERVED]
    jne r3, 0, reject
pass:
    mov r0, 0
    exit
reject:
    mov r0, 1
    exit
";

const CONN_HOP: &str = "\
    ldxdw r2, [r1+$PDU_KIND]
    jne r2, 4, pass
    ldxdw r3, [r1+$HOP]
    jlt r3, 5, reject
    jgt r3, 16, reject
pass:
    mov r0, 0
    exit
reject:
    mov r0, 1
    exit
";

const SCAN_REQ_LEN: &str = "\
    ldxdw r2, [r1+$PDU_KIND]
    jne r2, 2, pass
    ldxdw r3, [r1+$PAYLOAD_LEN]
    jne r3, 12, reject
pass:
    mov r0, 0
    exit
reject:
    mov r0, 1
    exit
";

const L2CAP_LEN: &str = "\
    ldxdw r2, [r1+$L2CAP_CID]
    jeq r2, 0, pass
    ldxdw r3, [r1+$L2CAP_LEN]
    add r3, 4
    ldxdw r4, [r1+$PAYLOAD_LEN]
    jne r3, r4, reject
pass:
    mov r0, 0
    exit
reject:
    mov r0, 1
    exit
";

const L2CAP_CID: &str = "\
    ldxdw r2, [r1+$L2CAP_CID]
    jeq r2, 0, pass
    jlt r2, 4, reject
    jgt r2, 6, reject
pass:
    mov r0, 0
    exit
reject:
    mov r0, 1
    exit
";

/// Rejects the packet when it is of kind `kind` and this is at least the
/// `REPEAT_THRESHOLD`-th occurrence in the session window.
fn repeat_rule(kind: PduKind) -> String {
    format!(
        "\
    ldxdw r2, [r1+$PDU_KIND]
    jne r2, {}, pass
    ldxdw r3, [r1+$REPEAT_COUNT]
    add r3, 1
    ldxdw r4, [r1+$REPEAT_THRESHOLD]
    jge r3, r4, reject
pass:
    mov r0, 0
    exit
reject:
    mov r0, 1
    exit
",
        kind.code()
    )
}

fn attach(hook: HookPoint, event: EventKind, state: Option<SessionState>) -> Attach {
    Attach { hook, event, state }
}

/// The built-in rules, in installation order.
pub fn default_rules() -> Vec<RuleSource> {
    use EventKind::{PacketObserved as PO, PairingStarted};
    use HookPoint::*;
    let any = |hook| attach(hook, PO, None);
    let discovery = attach(LlRxCtrl, PO, Some(SessionState::Discovery));
    let r = |id, attach, asm: &str| RuleSource {
        id,
        attach,
        asm: asm.to_string(),
    };
    vec![
        r(
            "knob_keysize",
            attach(SmpRx, PairingStarted, Some(SessionState::KeySharing)),
            KNOB_KEYSIZE,
        ),
        r("blesa_attr_level", any(LlRxData), BLESA_ATTR_LEVEL),
        r(
            "pin_key_missing_downgrade",
            any(LlRxData),
            PIN_KEY_MISSING_DOWNGRADE,
        ),
        r(
            "dup_feature_req",
            any(LlRxCtrl),
            &repeat_rule(PduKind::LlFeatureReq),
        ),
        r(
            "dup_conn_param_req",
            any(LlRxCtrl),
            &repeat_rule(PduKind::LlConnectionParamReq),
        ),
        r(
            "dup_dle_req",
            any(LlRxCtrl),
            &repeat_rule(PduKind::LlLengthReq),
        ),
        r(
            "replay_pairing",
            any(SmpRx),
            &repeat_rule(PduKind::SmpPairingRequest),
        ),
        r(
            "seq_public_keys",
            any(SmpRx),
            &repeat_rule(PduKind::SmpPublicKey),
        ),
        r(
            "repeated_scan_req",
            any(LlRxCtrl),
            &repeat_rule(PduKind::ScanReq),
        ),
        r("conn_interval", discovery, CONN_INTERVAL),
        r("conn_chan_map", discovery, CONN_CHAN_MAP),
        r("conn_hop", discovery, CONN_HOP),
        r("scan_req_len", discovery, SCAN_REQ_LEN),
        r("l2cap_len", any(LlRxData), L2CAP_LEN),
        r("l2cap_cid", any(LlRxData), L2CAP_CID),
    ]
}

pub fn default_programs() -> Vec<PolicyProgram> {
    default_rules()
        .iter()
        .map(|r| r.compile().expect("built-in rule assembles"))
        .collect()
}

pub const DEFAULT_PATHS: &str = "\
# <id> <sink> <STATE:EVENT[+bonded|+unbonded][+pdu=KIND][+rule=ID]> ...
knob PAIRING_EXPLOITATION STANDBY:INIT DISCOVERY:ADVERTISING_STARTED LL_CONNECTION:CONNECTION_ESTABLISHED+bonded KEY_SHARING:PAIRING_STARTED PAIRING_EXPLOITATION:ALERT+rule=knob_keysize
keysize_confusion PAIRING_EXPLOITATION STANDBY:INIT DISCOVERY:ADVERTISING_STARTED LL_CONNECTION:CONNECTION_ESTABLISHED+bonded DATA_EXCHANGE:ENCRYPTION_STARTED+bonded KEY_SHARING:PAIRING_STARTED PAIRING_EXPLOITATION:ALERT+rule=knob_keysize
blesa ENCRYPTION_FAILURE STANDBY:INIT DISCOVERY:ADVERTISING_STARTED LL_CONNECTION:CONNECTION_ESTABLISHED+bonded ENCRYPTION_FAILURE:ALERT+rule=blesa_attr_level
pin_key_missing_downgrade ENCRYPTION_FAILURE STANDBY:INIT DISCOVERY:ADVERTISING_STARTED LL_CONNECTION:CONNECTION_ESTABLISHED DATA_EXCHANGE:PLAINTEXT_DATA_STARTED ENCRYPTION_FAILURE:ALERT+rule=pin_key_missing_downgrade
dup_feature_req CONNECTION_BREAK STANDBY:INIT DISCOVERY:ADVERTISING_STARTED LL_CONNECTION:CONNECTION_ESTABLISHED CONNECTION_BREAK:ALERT+rule=dup_feature_req
dup_conn_param_req CONNECTION_BREAK STANDBY:INIT DISCOVERY:ADVERTISING_STARTED LL_CONNECTION:CONNECTION_ESTABLISHED CONNECTION_BREAK:ALERT+rule=dup_conn_param_req
dup_dle_req CONNECTION_BREAK STANDBY:INIT DISCOVERY:ADVERTISING_STARTED LL_CONNECTION:CONNECTION_ESTABLISHED CONNECTION_BREAK:ALERT+rule=dup_dle_req
replay_pairing PAIRING_EXPLOITATION STANDBY:INIT DISCOVERY:ADVERTISING_STARTED LL_CONNECTION:CONNECTION_ESTABLISHED KEY_SHARING:PAIRING_STARTED PAIRING_EXPLOITATION:ALERT+rule=replay_pairing
seq_public_keys PAIRING_EXPLOITATION STANDBY:INIT DISCOVERY:ADVERTISING_STARTED LL_CONNECTION:CONNECTION_ESTABLISHED KEY_SHARING:PAIRING_STARTED PAIRING_EXPLOITATION:ALERT+rule=seq_public_keys
out_of_order_enc CONNECTION_BREAK STANDBY:INIT DISCOVERY:ADVERTISING_STARTED LL_CONNECTION:CONNECTION_ESTABLISHED+unbonded CONNECTION_BREAK:ALERT+rule=fsm:illegal-ENCRYPTION_STARTED
enc_before_dh CONNECTION_BREAK STANDBY:INIT DISCOVERY:ADVERTISING_STARTED LL_CONNECTION:CONNECTION_ESTABLISHED KEY_SHARING:PAIRING_STARTED CONNECTION_BREAK:ALERT+rule=fsm:illegal-ENCRYPTION_STARTED
repeated_scan_req DISCOVERY_ERROR STANDBY:INIT DISCOVERY:ADVERTISING_STARTED DISCOVERY_ERROR:ALERT+rule=repeated_scan_req
conn_interval CONNECTION_BREAK STANDBY:INIT DISCOVERY:ADVERTISING_STARTED CONNECTION_BREAK:ALERT+rule=conn_interval
conn_chan_map CONNECTION_BREAK STANDBY:INIT DISCOVERY:ADVERTISING_STARTED CONNECTION_BREAK:ALERT+rule=conn_chan_map
conn_hop CONNECTION_BREAK STANDBY:INIT DISCOVERY:ADVERTISING_STARTED CONNECTION_BREAK:ALERT+rule=conn_hop
scan_req_len DISCOVERY_ERROR STANDBY:INIT DISCOVERY:ADVERTISING_STARTED DISCOVERY_ERROR:ALERT+rule=scan_req_len
l2cap_len CONNECTION_BREAK STANDBY:INIT DISCOVERY:ADVERTISING_STARTED LL_CONNECTION:CONNECTION_ESTABLISHED CONNECTION_BREAK:ALERT+rule=l2cap_len
l2cap_cid CONNECTION_BREAK STANDBY:INIT DISCOVERY:ADVERTISING_STARTED LL_CONNECTION:CONNECTION_ESTABLISHED CONNECTION_BREAK:ALERT+rule=l2cap_cid
";

pub fn default_paths() -> Vec<MaliciousPath> {
    MaliciousPath::parse_file(DEFAULT_PATHS).expect("built-in paths parse")
}

/// A store holding every built-in rule and path.
pub fn default_store() -> Result<PolicyStore, StoreError> {
    store_with(&default_programs())
}

/// A store holding `programs` and the built-in paths.
pub fn store_with(programs: &[PolicyProgram]) -> Result<PolicyStore, StoreError> {
    let store = PolicyStore::new();
    store.apply(
        programs
            .iter()
            .cloned()
            .map(crate::vm::store::StoreOp::Install)
            .collect(),
    )?;
    store.set_paths(default_paths());
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::store::MAP_DESCS;
    use crate::vm::{verify, MAX_INSNS};

    #[test]
    fn expand_substitutes_known_names_only() {
        assert_eq!(expand("ldxdw r2, [r1+$PDU_KIND]"), "ldxdw r2, [r1+24]");
        assert_eq!(expand("[r1+$SMP_KEYS]"), "[r1+48]");
        assert_eq!(expand("$NOPE"), "$NOPE");
    }

    #[test]
    fn every_rule_verifies_and_fits() {
        let rules = default_programs();
        assert_eq!(rules.len(), 15);
        for p in &rules {
            let v = verify(&p.bytecode, &MAP_DESCS).unwrap_or_else(|e| panic!("{}: {e}", p.id));
            assert!(p.bytecode.len() <= 512, "{}", p.id);
            assert!(v.len() < MAX_INSNS);
            assert!(v.worst_case() <= 128, "{}", p.id);
        }
    }

    #[test]
    fn paths_round_trip_through_display() {
        let paths = default_paths();
        assert_eq!(paths.len(), 18);
        for p in &paths {
            let back = MaliciousPath::parse_line(&p.to_string(), 1).unwrap();
            assert_eq!(&back, p);
        }
    }

    #[test]
    fn paths_reference_existing_rules() {
        let ids: Vec<_> = default_rules().iter().map(|r| r.id).collect();
        for p in default_paths() {
            let rule = p.steps.last().unwrap().predicate.rule.clone().unwrap();
            assert!(
                rule.starts_with("fsm:") || ids.contains(&rule.as_str()),
                "{rule}"
            );
        }
    }

    #[test]
    fn default_store_loads() {
        let s = default_store().unwrap();
        let snap = s.snapshot();
        assert_eq!(snap.programs.len(), 15);
        assert_eq!(
            snap.dispatch(
                HookPoint::SmpRx,
                EventKind::PairingStarted,
                SessionState::KeySharing
            )
            .len(),
            1
        );
    }
}
