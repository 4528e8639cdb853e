//! Agent identities: Ed25519 keys, `did:ttk` identifiers, and the
//! register/resolve/revoke lifecycle recorded on the ledger.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use rand::RngCore;
use thiserror::Error;

use crate::anchor::ledger::{Ledger, LedgerError, LedgerRecord, RecordKind};
use crate::canonical::{canonical_encode, parse_lower_hex, FieldError, Fields, Value};

pub const DID_PREFIX: &str = "did:ttk:";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdentityError {
    #[error("seed must be exactly 32 bytes, got {0}")]
    MalformedSeed(usize),
    #[error("public key must be exactly 32 bytes, got {0}")]
    MalformedKey(usize),
    #[error("malformed DID {0:?}")]
    MalformedDid(String),
    #[error("malformed signature input: {0}")]
    MalformedInput(String),
    #[error("identity {0} is already registered")]
    AlreadyRegistered(Did),
    #[error("identity {0} has been revoked")]
    RevokedIdentity(Did),
    #[error("identity {0} is already revoked")]
    AlreadyRevoked(Did),
    #[error("identity {0} is not registered")]
    NotFound(Did),
    #[error("key pair does not match {0}")]
    KeyMismatch(Did),
    #[error("malformed key file: {0}")]
    KeyFile(#[from] FieldError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// Self-certifying identifier: `did:ttk:` followed by the hex public key.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Did([u8; 32]);

impl Did {
    pub fn from_public_key(key: [u8; 32]) -> Self {
        Did(key)
    }

    pub fn public_key(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn parse(s: &str) -> Result<Self, IdentityError> {
        let hex = s
            .strip_prefix(DID_PREFIX)
            .ok_or_else(|| IdentityError::MalformedDid(s.to_owned()))?;
        parse_lower_hex::<32>(hex)
            .map(Did)
            .map_err(|_| IdentityError::MalformedDid(s.to_owned()))
    }

    /// Short prefix of the key for human-facing output.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Display for Did {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{DID_PREFIX}{}", hex::encode(self.0))
    }
}

impl fmt::Debug for Did {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Did({self})")
    }
}

impl FromStr for Did {
    type Err = IdentityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Did::parse(s)
    }
}

impl From<Did> for Value {
    fn from(d: Did) -> Self {
        Value::Str(d.to_string())
    }
}

/// Returns the DID for a raw public key.
pub fn did_for(public_key: &[u8]) -> Result<Did, IdentityError> {
    let key: [u8; 32] = public_key
        .try_into()
        .map_err(|_| IdentityError::MalformedKey(public_key.len()))?;
    Ok(Did(key))
}

/// Reads a DID-valued field.
pub(crate) fn did_field(f: &Fields<'_>, key: &str) -> Result<Did, FieldError> {
    Did::parse(f.str(key)?).map_err(|e| FieldError::new(key, e.to_string()))
}

/// A 64-byte Ed25519 signature.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Signature(pub [u8; 64]);

impl Signature {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, crate::canonical::HexError> {
        parse_lower_hex::<64>(s).map(Signature)
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}…)", &self.to_hex()[..16])
    }
}

impl From<Signature> for Value {
    fn from(s: Signature) -> Self {
        Value::Str(s.to_hex())
    }
}

pub(crate) fn sig_field(f: &Fields<'_>, key: &str) -> Result<Signature, FieldError> {
    f.hex::<64>(key).map(Signature)
}

pub struct KeyPair {
    signing: SigningKey,
}

impl KeyPair {
    pub fn public_key(&self) -> [u8; 32] {
        self.signing.verifying_key().to_bytes()
    }

    pub fn private_key(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }

    pub fn did(&self) -> Did {
        Did(self.public_key())
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        Signature(self.signing.sign(message).to_bytes())
    }

    /// Signs the canonical encoding of `value`.
    pub fn sign_value(&self, value: &Value) -> Signature {
        self.sign(&canonical_encode(value))
    }

    pub fn matches(&self, did: &Did) -> bool {
        self.did() == *did
    }

    fn require(&self, did: &Did) -> Result<(), IdentityError> {
        if self.matches(did) {
            Ok(())
        } else {
            Err(IdentityError::KeyMismatch(*did))
        }
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair").field("did", &self.did()).finish_non_exhaustive()
    }
}

impl Clone for KeyPair {
    fn clone(&self) -> Self {
        KeyPair {
            signing: SigningKey::from_bytes(&self.signing.to_bytes()),
        }
    }
}

/// Creates a key pair from a 32-byte seed, or from the OS random source when
/// no seed is supplied.
pub fn generate_keypair(seed: Option<&[u8]>) -> Result<KeyPair, IdentityError> {
    let secret: [u8; 32] = match seed {
        Some(s) => s.try_into().map_err(|_| IdentityError::MalformedSeed(s.len()))?,
        None => {
            let mut buf = [0u8; 32];
            rand::rngs::OsRng.fill_bytes(&mut buf);
            buf
        }
    };
    Ok(KeyPair {
        signing: SigningKey::from_bytes(&secret),
    })
}

/// Ed25519 verification over raw byte inputs.
pub fn verify_signature(
    public_key: &[u8],
    message: &[u8],
    signature: &[u8],
) -> Result<bool, IdentityError> {
    let key: [u8; 32] = public_key.try_into().map_err(|_| {
        IdentityError::MalformedInput(format!("public key of {} bytes", public_key.len()))
    })?;
    let sig: [u8; 64] = signature.try_into().map_err(|_| {
        IdentityError::MalformedInput(format!("signature of {} bytes", signature.len()))
    })?;
    Ok(verify(&Did(key), message, &Signature(sig)))
}

/// Verifies `signature` over `message` under the key embedded in `did`.
/// Keys that are not valid curve points never verify.
pub fn verify(did: &Did, message: &[u8], signature: &Signature) -> bool {
    let Ok(key) = VerifyingKey::from_bytes(&did.0) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&signature.0);
    key.verify_strict(message, &sig).is_ok()
}

pub fn verify_value(did: &Did, value: &Value, signature: &Signature) -> bool {
    verify(did, &canonical_encode(value), signature)
}

/// On-disk key file: `{"did", "public_key_hex", "private_key_hex"}`.
/// Holds secret material and should be readable by its owner only.
pub fn keyfile_value(keypair: &KeyPair) -> Value {
    Value::map([
        ("did", keypair.did().into()),
        ("public_key_hex", Value::str(hex::encode(keypair.public_key()))),
        ("private_key_hex", Value::str(hex::encode(keypair.private_key()))),
    ])
}

pub fn keypair_from_keyfile(value: &Value) -> Result<KeyPair, IdentityError> {
    let f = Fields::new(value, "key file")?.only(&["did", "public_key_hex", "private_key_hex"])?;
    let private = f.hex::<32>("private_key_hex")?;
    let public = f.hex::<32>("public_key_hex")?;
    let did = did_field(&f, "did")?;
    let keypair = generate_keypair(Some(&private))?;
    if keypair.public_key() != public || keypair.did() != did {
        return Err(IdentityError::KeyMismatch(did));
    }
    Ok(keypair)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentIdentity {
    pub did: Did,
    pub public_key: [u8; 32],
    pub metadata: BTreeMap<String, Value>,
    pub registered_at: Option<u64>,
}

impl AgentIdentity {
    pub fn new(did: Did, metadata: BTreeMap<String, Value>) -> Self {
        AgentIdentity {
            did,
            public_key: *did.public_key(),
            metadata,
            registered_at: None,
        }
    }

    fn signed_body(&self) -> BTreeMap<String, Value> {
        [
            ("did".to_owned(), self.did.into()),
            ("public_key".to_owned(), Value::str(hex::encode(self.public_key))),
            ("metadata".to_owned(), Value::Map(self.metadata.clone())),
        ]
        .into_iter()
        .collect()
    }

    pub fn to_value(&self) -> Value {
        let mut m = self.signed_body();
        m.insert(
            "registered_at".to_owned(),
            self.registered_at.map_or(Value::Null, |i| Value::Int(i as i64)),
        );
        Value::Map(m)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RevocationRecord {
    pub did: Did,
    pub revoked_at_ms: i64,
    pub reason: String,
    pub signature: Signature,
}

impl RevocationRecord {
    fn unsigned(did: Did, revoked_at_ms: i64, reason: &str) -> BTreeMap<String, Value> {
        [
            ("did".to_owned(), did.into()),
            ("revoked_at_ms".to_owned(), Value::Int(revoked_at_ms)),
            ("reason".to_owned(), Value::str(reason)),
        ]
        .into_iter()
        .collect()
    }

    pub fn verify(&self) -> bool {
        let body = Self::unsigned(self.did, self.revoked_at_ms, &self.reason);
        verify_value(&self.did, &Value::Map(body), &self.signature)
    }

    fn from_body(body: &BTreeMap<String, Value>) -> Result<Self, FieldError> {
        let value = Value::Map(body.clone());
        let f = Fields::new(&value, "revocation")?.only(&["did", "revoked_at_ms", "reason", "sig"])?;
        Ok(RevocationRecord {
            did: did_field(&f, "did")?,
            revoked_at_ms: f.int("revoked_at_ms")?,
            reason: f.str("reason")?.to_owned(),
            signature: sig_field(&f, "sig")?,
        })
    }
}

/// Registration state of one DID.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Resolution {
    NotFound,
    Registered(AgentIdentity),
    Revoked {
        identity: AgentIdentity,
        revoked_at_ms: i64,
        ledger_index: u64,
    },
}

#[derive(Debug, Clone)]
struct RegistryEntry {
    identity: AgentIdentity,
    revocation: Option<(RevocationRecord, u64)>,
}

/// Identity state folded from ledger records. Records whose signatures do not
/// verify, or which violate the Unregistered → Registered → Revoked order, are
/// ignored.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    entries: HashMap<Did, RegistryEntry>,
}

impl Registry {
    /// Folds one record; returns whether it changed identity state.
    pub fn apply(&mut self, record: &LedgerRecord) -> bool {
        match record.kind {
            RecordKind::Identity => {
                let Some(identity) = identity_from_body(&record.body, record.idx) else {
                    return false;
                };
                if self.entries.contains_key(&identity.did) {
                    return false;
                }
                self.entries.insert(
                    identity.did,
                    RegistryEntry {
                        identity,
                        revocation: None,
                    },
                );
                true
            }
            RecordKind::Revocation => {
                let Ok(rev) = RevocationRecord::from_body(&record.body) else {
                    return false;
                };
                if !rev.verify() {
                    return false;
                }
                match self.entries.get_mut(&rev.did) {
                    Some(entry) if entry.revocation.is_none() => {
                        entry.revocation = Some((rev, record.idx));
                        true
                    }
                    _ => false,
                }
            }
            _ => false,
        }
    }

    pub fn resolve(&self, did: &Did) -> Resolution {
        match self.entries.get(did) {
            None => Resolution::NotFound,
            Some(RegistryEntry {
                identity,
                revocation: None,
            }) => Resolution::Registered(identity.clone()),
            Some(RegistryEntry {
                identity,
                revocation: Some((rev, idx)),
            }) => Resolution::Revoked {
                identity: identity.clone(),
                revoked_at_ms: rev.revoked_at_ms,
                ledger_index: *idx,
            },
        }
    }

    /// Reads every record, failing on the first corrupt one.
    pub fn from_ledger(ledger: &dyn Ledger) -> Result<Self, LedgerError> {
        let mut registry = Registry::default();
        for idx in 0..ledger.len() {
            registry.apply(&ledger.get(idx)?);
        }
        Ok(registry)
    }
}

fn identity_from_body(body: &BTreeMap<String, Value>, idx: u64) -> Option<AgentIdentity> {
    let value = Value::Map(body.clone());
    let f = Fields::new(&value, "identity")
        .and_then(|f| f.only(&["did", "public_key", "metadata", "sig"]))
        .ok()?;
    let did = did_field(&f, "did").ok()?;
    let public_key = f.hex::<32>("public_key").ok()?;
    let signature = sig_field(&f, "sig").ok()?;
    let identity = AgentIdentity {
        did,
        public_key,
        metadata: f.map("metadata").ok()?.clone(),
        registered_at: Some(idx),
    };
    if public_key != *did.public_key() {
        return None;
    }
    verify_value(&did, &Value::Map(identity.signed_body()), &signature).then_some(identity)
}

/// Appends a signed identity record; returns its ledger index.
pub fn register_identity(
    identity: &AgentIdentity,
    keypair: &KeyPair,
    now_ms: i64,
    ledger: &mut dyn Ledger,
) -> Result<u64, IdentityError> {
    keypair.require(&identity.did)?;
    if identity.public_key != *identity.did.public_key() {
        return Err(IdentityError::KeyMismatch(identity.did));
    }
    match Registry::from_ledger(ledger)?.resolve(&identity.did) {
        Resolution::NotFound => {}
        Resolution::Registered(_) => return Err(IdentityError::AlreadyRegistered(identity.did)),
        Resolution::Revoked { .. } => return Err(IdentityError::RevokedIdentity(identity.did)),
    }
    let mut body = identity.signed_body();
    let sig = keypair.sign_value(&Value::Map(body.clone()));
    body.insert("sig".to_owned(), sig.into());
    Ok(ledger.append(RecordKind::Identity, body, now_ms)?.idx)
}

pub fn resolve(did: &str, ledger: &dyn Ledger) -> Result<Resolution, IdentityError> {
    let did = Did::parse(did)?;
    Ok(Registry::from_ledger(ledger)?.resolve(&did))
}

/// Appends a signed revocation record; returns its ledger index.
pub fn revoke_identity(
    did: &Did,
    keypair: &KeyPair,
    reason: &str,
    now_ms: i64,
    ledger: &mut dyn Ledger,
) -> Result<u64, IdentityError> {
    match Registry::from_ledger(ledger)?.resolve(did) {
        Resolution::NotFound => return Err(IdentityError::NotFound(*did)),
        Resolution::Revoked { .. } => return Err(IdentityError::AlreadyRevoked(*did)),
        Resolution::Registered(_) => {}
    }
    keypair.require(did)?;
    let mut body = RevocationRecord::unsigned(*did, now_ms, reason);
    let sig = keypair.sign_value(&Value::Map(body.clone()));
    body.insert("sig".to_owned(), sig.into());
    Ok(ledger.append(RecordKind::Revocation, body, now_ms)?.idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchor::ledger::MemoryLedger;

    fn kp(n: u8) -> KeyPair {
        generate_keypair(Some(&[n; 32])).unwrap()
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        assert_eq!(kp(7).public_key(), kp(7).public_key());
        assert_ne!(kp(7).public_key(), kp(8).public_key());
        let a = generate_keypair(None).unwrap();
        let b = generate_keypair(None).unwrap();
        assert_ne!(a.public_key(), b.public_key());
        assert_eq!(
            generate_keypair(Some(&[0; 31])).unwrap_err(),
            IdentityError::MalformedSeed(31)
        );
    }

    #[test]
    fn rfc8032_test_vector_one() {
        // RFC 8032 section 7.1, TEST 1.
        let seed = hex::decode("9d61b19deffd5a60ba844af492ec2cc44449c5697b326919703bac031cae7f60")
            .unwrap();
        let k = generate_keypair(Some(&seed)).unwrap();
        assert_eq!(
            hex::encode(k.public_key()),
            "d75a980182b10ab7d54bfed3c964073a0ee172f3daa62325af021a68f707511a"
        );
        assert_eq!(
            k.sign(b"").to_hex(),
            "e5564300c360ac729086e2cc806e828a84877f1eb8e5d974d873e06522490155\
             5fb8821590a33bacc61e39701cf9b46bd25bf5f0595bbe24655141438e7a100b"
        );
    }

    #[test]
    fn did_format_and_round_trip() {
        let did = did_for(&[0u8; 32]).unwrap();
        assert_eq!(did.to_string(), format!("did:ttk:{}", "0".repeat(64)));
        let k = kp(3);
        let s = k.did().to_string();
        assert_eq!(s.len(), 72);
        assert!(s[8..].chars().all(|c| matches!(c, '0'..='9' | 'a'..='f')));
        assert_eq!(Did::parse(&s).unwrap().public_key(), &k.public_key());
        assert_eq!(did_for(&[1u8; 31]).unwrap_err(), IdentityError::MalformedKey(31));
        assert!(Did::parse(&s.to_uppercase()).is_err());
        assert!(Did::parse("did:key:abc").is_err());
    }

    #[test]
    fn signature_mutations_fail() {
        let k = kp(1);
        let msg = b"policy conformant action".to_vec();
        let sig = k.sign(&msg);
        let pk = k.public_key();
        assert!(verify_signature(&pk, &msg, &sig.0).unwrap());
        for bit in 0..msg.len() * 8 {
            let mut m = msg.clone();
            m[bit / 8] ^= 1 << (bit % 8);
            assert!(!verify_signature(&pk, &m, &sig.0).unwrap());
        }
        for bit in 0..512 {
            let mut s = sig.0;
            s[bit / 8] ^= 1 << (bit % 8);
            assert!(!verify_signature(&pk, &msg, &s).unwrap());
        }
        assert!(!verify_signature(&kp(2).public_key(), &msg, &sig.0).unwrap());
        assert!(matches!(
            verify_signature(&pk[..31], &msg, &sig.0),
            Err(IdentityError::MalformedInput(_))
        ));
        assert!(matches!(
            verify_signature(&pk, &msg, &sig.0[..63]),
            Err(IdentityError::MalformedInput(_))
        ));
    }

    #[test]
    fn lifecycle_register_resolve_revoke() {
        let mut ledger = MemoryLedger::new();
        let k = kp(5);
        let meta: BTreeMap<_, _> = [("model".to_owned(), Value::str("m-1"))].into_iter().collect();
        let id = AgentIdentity::new(k.did(), meta.clone());
        let did = k.did().to_string();

        assert_eq!(resolve(&did, &ledger).unwrap(), Resolution::NotFound);
        assert_eq!(register_identity(&id, &k, 10, &mut ledger).unwrap(), 0);
        match resolve(&did, &ledger).unwrap() {
            Resolution::Registered(found) => {
                assert_eq!(found.public_key, k.public_key());
                assert_eq!(found.metadata, meta);
                assert_eq!(found.registered_at, Some(0));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(
            register_identity(&id, &k, 11, &mut ledger).unwrap_err(),
            IdentityError::AlreadyRegistered(k.did())
        );
        assert_eq!(
            revoke_identity(&k.did(), &kp(6), "x", 12, &mut ledger).unwrap_err(),
            IdentityError::KeyMismatch(k.did())
        );
        assert_eq!(revoke_identity(&k.did(), &k, "key leaked", 20, &mut ledger).unwrap(), 1);
        assert!(matches!(
            resolve(&did, &ledger).unwrap(),
            Resolution::Revoked { revoked_at_ms: 20, ledger_index: 1, .. }
        ));
        assert_eq!(
            revoke_identity(&k.did(), &k, "again", 21, &mut ledger).unwrap_err(),
            IdentityError::AlreadyRevoked(k.did())
        );
        assert_eq!(
            register_identity(&id, &k, 22, &mut ledger).unwrap_err(),
            IdentityError::RevokedIdentity(k.did())
        );
    }

    #[test]
    fn register_and_revoke_preconditions() {
        let mut ledger = MemoryLedger::new();
        let k = kp(9);
        let id = AgentIdentity::new(k.did(), BTreeMap::new());
        assert_eq!(
            register_identity(&id, &kp(10), 0, &mut ledger).unwrap_err(),
            IdentityError::KeyMismatch(k.did())
        );
        assert_eq!(
            revoke_identity(&k.did(), &k, "r", 0, &mut ledger).unwrap_err(),
            IdentityError::NotFound(k.did())
        );
        assert!(matches!(
            resolve("did:ttk:zz", &ledger),
            Err(IdentityError::MalformedDid(_))
        ));
    }

    #[test]
    fn keyfile_round_trip() {
        let k = kp(4);
        let v = keyfile_value(&k);
        let back = keypair_from_keyfile(&v).unwrap();
        assert_eq!(back.private_key(), k.private_key());
        let mut m = v.as_map().unwrap().clone();
        m.insert("public_key_hex".into(), Value::str(hex::encode(kp(5).public_key())));
        assert!(keypair_from_keyfile(&Value::Map(m)).is_err());
    }
}
