//! State-aware inspection of Bluetooth Low Energy traffic.

pub mod abi;
pub mod engine;
pub mod fsm;
pub mod patch;
pub mod pdu;
pub mod replay;
pub mod rules;
pub mod vm;
