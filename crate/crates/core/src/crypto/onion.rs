//! Layered onion wrap/peel over routing keys.
//!
//! Every layer decrypts to `kind (1) || next-hop address (16, ASCII, zero padded)
//! || inner length (2, BE) || inner`. In [`OnionMode::Naive`] each peel strips
//! exactly [`LAYER_OVERHEAD`] bytes, so the blob length reveals the remaining hop
//! count. In [`OnionMode::Padded`] the peeling hop appends deterministic filler,
//! keeping every blob at `cell_size + LAYER_OVERHEAD` bytes.

use super::{check_purpose, recover_session, seal, CryptoError, KeyPurpose, PrivateKey, PublicKey};
use super::{HEADER_LEN, OVERHEAD, TAG_LEN};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use std::net::Ipv4Addr;

pub const MAX_ROUTE_LEN: usize = 8;
pub const DEFAULT_CELL_SIZE: usize = 1024;

const ADDR_FIELD: usize = 16;
const LAYER_HEADER: usize = 1 + ADDR_FIELD + 2;
/// Bytes each onion layer adds: seal overhead plus the routing header.
pub const LAYER_OVERHEAD: usize = OVERHEAD + LAYER_HEADER;

const KIND_FORWARD: u8 = 0x01;
const KIND_DELIVER: u8 = 0x02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OnionMode {
    Naive,
    Padded { cell_size: usize },
}

impl OnionMode {
    pub fn padded() -> Self {
        OnionMode::Padded {
            cell_size: DEFAULT_CELL_SIZE,
        }
    }

    /// Fixed blob length in padded mode.
    pub fn padded_len(&self) -> Option<usize> {
        match *self {
            OnionMode::Naive => None,
            OnionMode::Padded { cell_size } => Some(cell_size + LAYER_OVERHEAD),
        }
    }

    /// Largest core that fits a route of `hops` layers, if the mode bounds it.
    pub fn core_capacity(&self, hops: usize) -> Option<usize> {
        self.padded_len()
            .map(|len| len.saturating_sub(hops * LAYER_OVERHEAD))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OnionMessage {
    pub mode: OnionMode,
    pub blob: Vec<u8>,
}

impl OnionMessage {
    pub fn len(&self) -> usize {
        self.blob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blob.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RoutingInstruction {
    Forward {
        next_hop: Ipv4Addr,
        inner: OnionMessage,
    },
    Deliver {
        core: Vec<u8>,
    },
}

fn encode_addr(addr: Ipv4Addr) -> [u8; ADDR_FIELD] {
    let mut field = [0u8; ADDR_FIELD];
    let s = addr.to_string();
    field[..s.len()].copy_from_slice(s.as_bytes());
    field
}

fn decode_addr(field: &[u8]) -> Option<Ipv4Addr> {
    let end = field.iter().position(|&b| b == 0).unwrap_or(field.len());
    std::str::from_utf8(&field[..end]).ok()?.parse().ok()
}

/// Wraps `core` so that `route[0]` peels first and `route.last()` receives
/// `Deliver(core)`.
pub fn wrap<R: RngCore + ?Sized>(
    route: &[(PublicKey, Ipv4Addr)],
    core: &[u8],
    mode: OnionMode,
    rng: &mut R,
) -> Result<OnionMessage, CryptoError> {
    if route.is_empty() {
        return Err(CryptoError::EmptyRoute);
    }
    if route.len() > MAX_ROUTE_LEN {
        return Err(CryptoError::RouteTooLong(route.len()));
    }
    for (key, _) in route {
        check_purpose(key.purpose, KeyPurpose::Routing)?;
    }
    if let Some(capacity) = mode.core_capacity(route.len()) {
        if core.len() > capacity {
            return Err(CryptoError::CoreTooLarge {
                core: core.len(),
                capacity,
            });
        }
    }

    let mut inner = core.to_vec();
    for i in (0..route.len()).rev() {
        let mut layer = Vec::with_capacity(LAYER_HEADER + inner.len());
        match route.get(i + 1) {
            Some((_, next)) => {
                layer.push(KIND_FORWARD);
                layer.extend_from_slice(&encode_addr(*next));
            }
            None => {
                layer.push(KIND_DELIVER);
                layer.extend_from_slice(&[0u8; ADDR_FIELD]);
            }
        }
        layer.extend_from_slice(&(inner.len() as u16).to_be_bytes());
        layer.extend_from_slice(&inner);
        inner = seal(&route[i].0, &layer, rng);
    }

    if let Some(len) = mode.padded_len() {
        let start = inner.len();
        inner.resize(len, 0);
        rng.fill_bytes(&mut inner[start..]);
    }
    Ok(OnionMessage { mode, blob: inner })
}

/// Removes one layer with the current hop's routing key.
pub fn peel(private: &PrivateKey, msg: &OnionMessage) -> Result<RoutingInstruction, CryptoError> {
    check_purpose(private.purpose, KeyPurpose::Routing)?;
    let blob = &msg.blob;
    if blob.len() < OVERHEAD + LAYER_HEADER {
        return Err(CryptoError::AuthenticationFailure);
    }
    if let Some(len) = msg.mode.padded_len() {
        if blob.len() != len {
            return Err(CryptoError::AuthenticationFailure);
        }
    }

    let header = &blob[..HEADER_LEN];
    let tag = &blob[HEADER_LEN..OVERHEAD];
    let ciphertext = &blob[OVERHEAD..];
    let session = recover_session(private, header);

    let mut plain = ciphertext.to_vec();
    session.apply_keystream(&mut plain);
    let inner_len = u16::from_be_bytes([plain[LAYER_HEADER - 2], plain[LAYER_HEADER - 1]]) as usize;
    let auth_len = LAYER_HEADER + inner_len;
    let exact = matches!(msg.mode, OnionMode::Naive);
    if auth_len > ciphertext.len() || (exact && auth_len != ciphertext.len()) {
        return Err(CryptoError::AuthenticationFailure);
    }
    if session.tag(header, &ciphertext[..auth_len]) != tag[..TAG_LEN] {
        return Err(CryptoError::AuthenticationFailure);
    }

    let inner = plain[LAYER_HEADER..auth_len].to_vec();
    match plain[0] {
        KIND_DELIVER => Ok(RoutingInstruction::Deliver { core: inner }),
        KIND_FORWARD => {
            let next_hop =
                decode_addr(&plain[1..1 + ADDR_FIELD]).ok_or(CryptoError::AuthenticationFailure)?;
            let mut blob = inner;
            if let Some(len) = msg.mode.padded_len() {
                let fill = session.filler(len - blob.len());
                blob.extend_from_slice(&fill);
            }
            Ok(RoutingInstruction::Forward {
                next_hop,
                inner: OnionMessage {
                    mode: msg.mode,
                    blob,
                },
            })
        }
        _ => Err(CryptoError::AuthenticationFailure),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::KeyPair;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn node(i: u8, rng: &mut ChaCha8Rng) -> (KeyPair, Ipv4Addr) {
        (
            KeyPair::generate(KeyPurpose::Routing, rng),
            Ipv4Addr::new(10, 8, 0, i),
        )
    }

    fn route_of(nodes: &[(KeyPair, Ipv4Addr)]) -> Vec<(PublicKey, Ipv4Addr)> {
        nodes.iter().map(|(k, a)| (k.public_key, *a)).collect()
    }

    fn peel_all(
        nodes: &[(KeyPair, Ipv4Addr)],
        mut msg: OnionMessage,
    ) -> (Vec<Ipv4Addr>, Vec<usize>, Vec<u8>) {
        let mut hops = Vec::new();
        let mut lens = vec![msg.len()];
        for (i, (kp, _)) in nodes.iter().enumerate() {
            match peel(&kp.private_key, &msg).unwrap() {
                RoutingInstruction::Forward { next_hop, inner } => {
                    assert_eq!(next_hop, nodes[i + 1].1);
                    hops.push(next_hop);
                    lens.push(inner.len());
                    msg = inner;
                }
                RoutingInstruction::Deliver { core } => {
                    assert_eq!(i, nodes.len() - 1);
                    return (hops, lens, core);
                }
            }
        }
        panic!("never delivered");
    }

    #[test]
    fn naive_mix_net_example() {
        // Sender .1 routes through .4 and .2 to recipient .3.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let nodes: Vec<_> = [1, 4, 2, 3].iter().map(|&i| node(i, &mut rng)).collect();
        let msg = wrap(&route_of(&nodes), b"Hello Recipient", OnionMode::Naive, &mut rng).unwrap();
        let (hops, _, core) = peel_all(&nodes, msg);
        let expected: Vec<Ipv4Addr> = [4, 2, 3].iter().map(|&i| Ipv4Addr::new(10, 8, 0, i)).collect();
        assert_eq!(hops, expected);
        assert_eq!(core, b"Hello Recipient");
    }

    #[test]
    fn single_hop_delivers_immediately() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = node(9, &mut rng);
        let msg = wrap(&[(n.0.public_key, n.1)], b"core", OnionMode::padded(), &mut rng).unwrap();
        assert_eq!(
            peel(&n.0.private_key, &msg).unwrap(),
            RoutingInstruction::Deliver {
                core: b"core".to_vec()
            }
        );
    }

    #[test]
    fn naive_lengths_grow_by_layer_overhead() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nodes: Vec<_> = (2..5).map(|i| node(i, &mut rng)).collect();
        let core = b"Hello Recipient";
        let lens: Vec<usize> = (1..=3)
            .map(|n| {
                wrap(&route_of(&nodes[..n]), core, OnionMode::Naive, &mut rng)
                    .unwrap()
                    .len()
            })
            .collect();
        // Direct construction: core plus one seal and one routing header per layer.
        let expected: Vec<usize> = (1..=3).map(|n| core.len() + n * (32 + 19)).collect();
        assert_eq!(lens, expected);
    }

    #[test]
    fn naive_peel_strips_constant_overhead() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let nodes: Vec<_> = (2..7).map(|i| node(i, &mut rng)).collect();
        let msg = wrap(&route_of(&nodes), &[1u8; 40], OnionMode::Naive, &mut rng).unwrap();
        let (_, lens, _) = peel_all(&nodes, msg);
        for w in lens.windows(2) {
            assert_eq!(w[0] - w[1], LAYER_OVERHEAD);
        }
    }

    #[test]
    fn padded_length_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let nodes: Vec<_> = (2..6).map(|i| node(i, &mut rng)).collect();
        let msg = wrap(&route_of(&nodes), &[3u8; 300], OnionMode::padded(), &mut rng).unwrap();
        let (_, lens, core) = peel_all(&nodes, msg);
        assert!(lens.iter().all(|&l| l == DEFAULT_CELL_SIZE + LAYER_OVERHEAD));
        assert_eq!(core, vec![3u8; 300]);
    }

    #[test]
    fn wrong_key_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let nodes: Vec<_> = (2..5).map(|i| node(i, &mut rng)).collect();
        let msg = wrap(&route_of(&nodes), b"x", OnionMode::Naive, &mut rng).unwrap();
        assert_eq!(
            peel(&nodes[1].0.private_key, &msg),
            Err(CryptoError::AuthenticationFailure)
        );
    }

    #[test]
    fn tampering_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let nodes: Vec<_> = (2..5).map(|i| node(i, &mut rng)).collect();
        let mut msg = wrap(&route_of(&nodes), b"abc", OnionMode::Naive, &mut rng).unwrap();
        let last = msg.blob.len() - 1;
        msg.blob[last] ^= 0x80;
        assert_eq!(
            peel(&nodes[0].0.private_key, &msg),
            Err(CryptoError::AuthenticationFailure)
        );
    }

    #[test]
    fn route_bounds_and_capacity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        assert_eq!(
            wrap(&[], b"x", OnionMode::Naive, &mut rng),
            Err(CryptoError::EmptyRoute)
        );
        let nodes: Vec<_> = (2..11).map(|i| node(i, &mut rng)).collect();
        assert_eq!(
            wrap(&route_of(&nodes), b"x", OnionMode::Naive, &mut rng),
            Err(CryptoError::RouteTooLong(9))
        );
        let cap = OnionMode::padded().core_capacity(3).unwrap();
        assert_eq!(cap, DEFAULT_CELL_SIZE + LAYER_OVERHEAD - 3 * LAYER_OVERHEAD);
        assert!(wrap(&route_of(&nodes[..3]), &vec![0; cap], OnionMode::padded(), &mut rng).is_ok());
        assert_eq!(
            wrap(&route_of(&nodes[..3]), &vec![0; cap + 1], OnionMode::padded(), &mut rng),
            Err(CryptoError::CoreTooLarge {
                core: cap + 1,
                capacity: cap
            })
        );
    }

    #[test]
    fn end_to_end_keys_cannot_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e2e = KeyPair::generate(KeyPurpose::EndToEnd, &mut rng);
        let addr = Ipv4Addr::new(10, 8, 0, 2);
        assert!(matches!(
            wrap(&[(e2e.public_key, addr)], b"x", OnionMode::Naive, &mut rng),
            Err(CryptoError::WrongKeyPurpose { .. })
        ));
    }
}
