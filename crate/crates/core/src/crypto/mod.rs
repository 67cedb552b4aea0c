//! Length-predictable authenticated public-key sealing and layered onions.
//!
//! A sealed box is `ephemeral header (16) || tag (16) || ciphertext`, so every
//! seal adds exactly [`OVERHEAD`] bytes. The key agreement runs in a small
//! discrete-log group (see [`group`]); the stream and tag come from SHA-256.
//! None of this is meant to be secure, only deterministic and structurally
//! faithful: separate key purposes, authenticated layers, predictable lengths.

mod group;
pub mod onion;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use thiserror::Error;

pub use onion::{
    peel, wrap, OnionMessage, OnionMode, RoutingInstruction, DEFAULT_CELL_SIZE, LAYER_OVERHEAD,
    MAX_ROUTE_LEN,
};

pub const HEADER_LEN: usize = 16;
pub const TAG_LEN: usize = 16;
/// Bytes added by one [`seal`].
pub const OVERHEAD: usize = HEADER_LEN + TAG_LEN;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("key purpose mismatch: expected {expected:?}, got {found:?}")]
    WrongKeyPurpose {
        expected: KeyPurpose,
        found: KeyPurpose,
    },
    #[error("authentication failure")]
    AuthenticationFailure,
    #[error("route is empty")]
    EmptyRoute,
    #[error("route of {0} hops exceeds the maximum of {max}", max = onion::MAX_ROUTE_LEN)]
    RouteTooLong(usize),
    #[error("core of {core} bytes exceeds padded capacity of {capacity} bytes")]
    CoreTooLarge { core: usize, capacity: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KeyPurpose {
    Routing,
    EndToEnd,
}

impl KeyPurpose {
    fn domain(self) -> &'static [u8] {
        match self {
            KeyPurpose::Routing => b"tunnelsim/routing",
            KeyPurpose::EndToEnd => b"tunnelsim/end-to-end",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PublicKey {
    #[serde(with = "hex_bytes")]
    pub bytes: [u8; 16],
    pub purpose: KeyPurpose,
}

impl PublicKey {
    fn element(&self) -> u128 {
        u128::from_be_bytes(self.bytes)
    }

    pub fn to_hex(&self) -> String {
        hex_bytes::encode(&self.bytes)
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({:?}, {})", self.purpose, self.to_hex())
    }
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrivateKey {
    #[serde(with = "hex_bytes")]
    pub bytes: [u8; 16],
    pub purpose: KeyPurpose,
}

impl PrivateKey {
    fn scalar(&self) -> u128 {
        u128::from_be_bytes(self.bytes)
    }
}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PrivateKey({:?}, ..)", self.purpose)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyPair {
    pub public_key: PublicKey,
    pub private_key: PrivateKey,
    pub purpose: KeyPurpose,
}

impl KeyPair {
    pub fn generate<R: RngCore + ?Sized>(purpose: KeyPurpose, rng: &mut R) -> Self {
        let scalar = random_scalar(rng);
        let public = group::pow_mod(group::GENERATOR, scalar);
        KeyPair {
            public_key: PublicKey {
                bytes: public.to_be_bytes(),
                purpose,
            },
            private_key: PrivateKey {
                bytes: scalar.to_be_bytes(),
                purpose,
            },
            purpose,
        }
    }
}

fn random_scalar<R: RngCore + ?Sized>(rng: &mut R) -> u128 {
    loop {
        let mut buf = [0u8; 16];
        rng.fill_bytes(&mut buf);
        let x = u128::from_be_bytes(buf) & group::MODULUS;
        if x > 1 && x < group::MODULUS - 1 {
            return x;
        }
    }
}

pub(crate) fn check_purpose(found: KeyPurpose, expected: KeyPurpose) -> Result<(), CryptoError> {
    if found == expected {
        Ok(())
    } else {
        Err(CryptoError::WrongKeyPurpose { expected, found })
    }
}

/// Symmetric state shared by a seal and its matching open.
pub(crate) struct SessionKey([u8; 32]);

impl SessionKey {
    fn derive(shared: u128, header: &[u8], purpose: KeyPurpose) -> Self {
        let mut h = Sha256::new();
        h.update(purpose.domain());
        h.update(shared.to_be_bytes());
        h.update(header);
        SessionKey(h.finalize().into())
    }

    pub(crate) fn apply_keystream(&self, data: &mut [u8]) {
        keystream_xor(&self.0, b"stream", data);
    }

    pub(crate) fn tag(&self, header: &[u8], ciphertext: &[u8]) -> [u8; TAG_LEN] {
        let mut h = Sha256::new();
        h.update(self.0);
        h.update(b"tag");
        h.update(header);
        h.update((ciphertext.len() as u64).to_le_bytes());
        h.update(ciphertext);
        let digest = h.finalize();
        let mut out = [0u8; TAG_LEN];
        out.copy_from_slice(&digest[..TAG_LEN]);
        out
    }

    /// Deterministic filler bytes bound to this session.
    pub(crate) fn filler(&self, len: usize) -> Vec<u8> {
        let mut out = vec![0u8; len];
        keystream_xor(&self.0, b"filler", &mut out);
        out
    }
}

fn keystream_xor(key: &[u8; 32], label: &[u8], data: &mut [u8]) {
    for (block_idx, chunk) in data.chunks_mut(32).enumerate() {
        let mut h = Sha256::new();
        h.update(key);
        h.update(label);
        h.update((block_idx as u64).to_le_bytes());
        let block = h.finalize();
        for (b, k) in chunk.iter_mut().zip(block.iter()) {
            *b ^= k;
        }
    }
}

/// Derives the session key the holder of `private` shares with whoever
/// produced `header`.
pub(crate) fn recover_session(private: &PrivateKey, header: &[u8]) -> SessionKey {
    let mut h = [0u8; HEADER_LEN];
    h.copy_from_slice(&header[..HEADER_LEN]);
    let ephemeral = u128::from_be_bytes(h) & group::MODULUS;
    let shared = group::pow_mod(ephemeral, private.scalar());
    SessionKey::derive(shared, header, private.purpose)
}

/// Seals `plaintext` to `public`. The output is exactly `plaintext.len() + OVERHEAD` bytes.
pub fn seal<R: RngCore + ?Sized>(public: &PublicKey, plaintext: &[u8], rng: &mut R) -> Vec<u8> {
    let ephemeral = random_scalar(rng);
    let header = group::pow_mod(group::GENERATOR, ephemeral).to_be_bytes();
    let shared = group::pow_mod(public.element(), ephemeral);
    let session = SessionKey::derive(shared, &header, public.purpose);

    let mut out = Vec::with_capacity(plaintext.len() + OVERHEAD);
    out.extend_from_slice(&header);
    out.extend_from_slice(&[0u8; TAG_LEN]);
    out.extend_from_slice(plaintext);
    session.apply_keystream(&mut out[OVERHEAD..]);
    let tag = session.tag(&header, &out[OVERHEAD..]);
    out[HEADER_LEN..OVERHEAD].copy_from_slice(&tag);
    out
}

pub fn open(private: &PrivateKey, sealed: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if sealed.len() < OVERHEAD {
        return Err(CryptoError::AuthenticationFailure);
    }
    let (header, rest) = sealed.split_at(HEADER_LEN);
    let (tag, ciphertext) = rest.split_at(TAG_LEN);
    let session = recover_session(private, header);
    if session.tag(header, ciphertext) != tag {
        return Err(CryptoError::AuthenticationFailure);
    }
    let mut plaintext = ciphertext.to_vec();
    session.apply_keystream(&mut plaintext);
    Ok(plaintext)
}

/// [`seal`] restricted to end-to-end keys.
pub fn seal_end_to_end<R: RngCore + ?Sized>(
    public: &PublicKey,
    plaintext: &[u8],
    rng: &mut R,
) -> Result<Vec<u8>, CryptoError> {
    check_purpose(public.purpose, KeyPurpose::EndToEnd)?;
    Ok(seal(public, plaintext, rng))
}

/// [`open`] restricted to end-to-end keys.
pub fn open_end_to_end(private: &PrivateKey, sealed: &[u8]) -> Result<Vec<u8>, CryptoError> {
    check_purpose(private.purpose, KeyPurpose::EndToEnd)?;
    open(private, sealed)
}

/// Per-hop symmetric layer key used inside tunnels.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerKey(#[serde(with = "hex_bytes")] pub [u8; 32]);

impl fmt::Debug for LayerKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("LayerKey(..)")
    }
}

impl LayerKey {
    pub fn generate<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut k = [0u8; 32];
        rng.fill_bytes(&mut k);
        LayerKey(k)
    }

    /// XORs a keystream bound to `(self, iv)` into `data`; an involution.
    pub fn apply(&self, iv: &[u8], data: &mut [u8]) {
        let mut h = Sha256::new();
        h.update(self.0);
        h.update(iv);
        let subkey: [u8; 32] = h.finalize().into();
        keystream_xor(&subkey, b"layer", data);
    }
}

/// Keyed digest used for pseudonym derivation.
pub fn keyed_digest(key: &[u8], data: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((key.len() as u64).to_le_bytes());
    h.update(key);
    h.update(data);
    h.finalize().into()
}

pub(crate) mod hex_bytes {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn encode(bytes: &[u8]) -> String {
        bytes.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn decode(s: &str) -> Option<Vec<u8>> {
        if s.len() % 2 != 0 {
            return None;
        }
        (0..s.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
            .collect()
    }

    pub fn serialize<S: Serializer, const N: usize>(
        bytes: &[u8; N],
        s: S,
    ) -> Result<S::Ok, S::Error> {
        s.serialize_str(&encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>, const N: usize>(
        d: D,
    ) -> Result<[u8; N], D::Error> {
        let s = String::deserialize(d)?;
        let v = decode(&s).ok_or_else(|| D::Error::custom("invalid hex"))?;
        v.try_into()
            .map_err(|_| D::Error::custom(format!("expected {N} bytes")))
    }
}
