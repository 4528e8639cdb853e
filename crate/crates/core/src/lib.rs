//! Verifiable multi-agent accountability: agent identities bound to Ed25519
//! keys, ledger-anchored policy commitments, signed hash-chained behavioral
//! traces, Merkle-batched anchoring, and an audit engine that checks all of it
//! from the artifacts alone.

pub mod anchor;
pub mod audit;
pub mod canonical;
pub mod fsutil;
pub mod identity;
pub mod policy;
pub mod scenarios;
pub mod trace;

pub use anchor::ledger::{FileLedger, Ledger, LedgerRecord, MemoryLedger, RecordKind};
pub use canonical::{canonical_encode, digest, Digest, Value};
pub use identity::{Did, KeyPair};
