//! Fully replicated network database.
//!
//! Holds two record kinds with no field or index linking one to the other:
//! [`NodeRecord`] (address and routing key) and [`LeaseRecord`] (pseudonym,
//! end-to-end key, inbound gateway).

use crate::crypto::{hex_bytes, keyed_digest, KeyPurpose, PublicKey};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::Ipv4Addr;
use thiserror::Error;

pub type NodeAddr = Ipv4Addr;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetDbError {
    #[error("address {0} is already registered")]
    DuplicateAddress(NodeAddr),
    #[error("direct lease write rejected in strict mode")]
    DirectWriteRejected,
    #[error("lease for {pseudonym} expired at {expiry}s")]
    ExpiredLease { pseudonym: Pseudonym, expiry: f64 },
    #[error("no record for {0}")]
    NotFound(String),
    #[error("requested {requested} hops but only {available} eligible nodes")]
    InsufficientNodes { requested: usize, available: usize },
    #[error("route length must be at least 1")]
    ZeroLength,
    #[error("{0:?} key supplied where a {1:?} key is required")]
    WrongKeyPurpose(KeyPurpose, KeyPurpose),
}

/// Derived identifier for an end-to-end key: 32 hex characters.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pseudonym(String);

const PSEUDONYM_DOMAIN: &[u8] = b"tunnelsim/pseudonym";

impl Pseudonym {
    pub fn derive(end_to_end_key: &PublicKey) -> Self {
        let digest = keyed_digest(PSEUDONYM_DOMAIN, &end_to_end_key.bytes);
        Pseudonym(hex_bytes::encode(&digest[..16]))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for Pseudonym {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Pseudonym({})", self.0)
    }
}

impl fmt::Display for Pseudonym {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub address: NodeAddr,
    pub routing_public_key: PublicKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaseRecord {
    pub pseudonym: Pseudonym,
    pub end_to_end_public_key: PublicKey,
    pub inbound_gateway_address: NodeAddr,
    /// Gateway-local tunnel id the sender addresses.
    pub tunnel_id: u32,
    /// Simulation seconds.
    pub expiry: f64,
}

impl LeaseRecord {
    pub fn new(
        end_to_end_public_key: PublicKey,
        inbound_gateway_address: NodeAddr,
        tunnel_id: u32,
        expiry: f64,
    ) -> Self {
        LeaseRecord {
            pseudonym: Pseudonym::derive(&end_to_end_public_key),
            end_to_end_public_key,
            inbound_gateway_address,
            tunnel_id,
            expiry,
        }
    }
}

/// How a lease reached the database.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PublishVia {
    /// Delivered by the endpoint of one of the owner's outbound tunnels.
    OutboundTunnel { endpoint: NodeAddr },
    /// Written straight from the owning node.
    Direct,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetDb {
    nodes: BTreeMap<NodeAddr, NodeRecord>,
    leases: BTreeMap<Pseudonym, LeaseRecord>,
    #[serde(skip)]
    strict: bool,
}

impl Default for NetDb {
    fn default() -> Self {
        NetDb::new(true)
    }
}

#[derive(Serialize)]
struct Snapshot<'a> {
    nodes: Vec<&'a NodeRecord>,
    leases: Vec<&'a LeaseRecord>,
}

impl NetDb {
    pub fn new(strict: bool) -> Self {
        NetDb {
            nodes: BTreeMap::new(),
            leases: BTreeMap::new(),
            strict,
        }
    }

    pub fn register_node(
        &mut self,
        address: NodeAddr,
        routing_public_key: PublicKey,
    ) -> Result<(), NetDbError> {
        if routing_public_key.purpose != KeyPurpose::Routing {
            return Err(NetDbError::WrongKeyPurpose(
                routing_public_key.purpose,
                KeyPurpose::Routing,
            ));
        }
        if self.nodes.contains_key(&address) {
            return Err(NetDbError::DuplicateAddress(address));
        }
        self.nodes.insert(
            address,
            NodeRecord {
                address,
                routing_public_key,
            },
        );
        Ok(())
    }

    pub fn lookup_node(&self, address: NodeAddr) -> Result<&NodeRecord, NetDbError> {
        self.nodes
            .get(&address)
            .ok_or_else(|| NetDbError::NotFound(address.to_string()))
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn lease_count(&self) -> usize {
        self.leases.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeRecord> {
        self.nodes.values()
    }

    pub fn leases(&self) -> impl Iterator<Item = &LeaseRecord> {
        self.leases.values()
    }

    pub fn publish_lease(
        &mut self,
        lease: LeaseRecord,
        via: PublishVia,
        now: f64,
    ) -> Result<(), NetDbError> {
        if self.strict && via == PublishVia::Direct {
            return Err(NetDbError::DirectWriteRejected);
        }
        if lease.end_to_end_public_key.purpose != KeyPurpose::EndToEnd {
            return Err(NetDbError::WrongKeyPurpose(
                lease.end_to_end_public_key.purpose,
                KeyPurpose::EndToEnd,
            ));
        }
        if lease.expiry <= now {
            return Err(NetDbError::ExpiredLease {
                pseudonym: lease.pseudonym,
                expiry: lease.expiry,
            });
        }
        self.leases.insert(lease.pseudonym.clone(), lease);
        Ok(())
    }

    /// Returns the lease only while it is unexpired at `now`.
    pub fn lookup_lease(&self, pseudonym: &Pseudonym, now: f64) -> Result<&LeaseRecord, NetDbError> {
        match self.leases.get(pseudonym) {
            Some(lease) if lease.expiry > now => Ok(lease),
            _ => Err(NetDbError::NotFound(pseudonym.to_string())),
        }
    }

    /// Uniform sample without replacement of `length` distinct nodes outside `exclude`.
    pub fn sample_route<R: Rng + ?Sized>(
        &self,
        length: usize,
        exclude: &BTreeSet<NodeAddr>,
        rng: &mut R,
    ) -> Result<Vec<(PublicKey, NodeAddr)>, NetDbError> {
        if length == 0 {
            return Err(NetDbError::ZeroLength);
        }
        let eligible: Vec<&NodeRecord> = self
            .nodes
            .values()
            .filter(|n| !exclude.contains(&n.address))
            .collect();
        if eligible.len() < length {
            return Err(NetDbError::InsufficientNodes {
                requested: length,
                available: eligible.len(),
            });
        }
        Ok(index::sample(rng, eligible.len(), length)
            .into_iter()
            .map(|i| (eligible[i].routing_public_key, eligible[i].address))
            .collect())
    }

    /// JSON document with top-level `nodes` and `leases` arrays.
    pub fn snapshot_json(&self) -> String {
        let snap = Snapshot {
            nodes: self.nodes.values().collect(),
            leases: self.leases.values().collect(),
        };
        serde_json::to_string_pretty(&snap).expect("netdb snapshot serializes")
    }

    /// Checks that no lease embeds any routing key and that only the gateway
    /// field carries a node address. Returns the offending pseudonyms.
    pub fn unlinkability_violations(&self) -> Vec<Pseudonym> {
        let keys: Vec<String> = self
            .nodes
            .values()
            .map(|n| n.routing_public_key.to_hex())
            .collect();
        let addrs: Vec<String> = self.nodes.keys().map(|a| a.to_string()).collect();
        self.leases
            .values()
            .filter(|lease| {
                let mut stripped = LeaseRecord::clone(lease);
                stripped.inbound_gateway_address = Ipv4Addr::UNSPECIFIED;
                let text = serde_json::to_string(&stripped).expect("lease serializes");
                keys.iter().any(|k| text.contains(k.as_str()))
                    || addrs.iter().any(|a| text.contains(&format!("\"{a}\"")))
            })
            .map(|l| l.pseudonym.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::KeyPair;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn addr(i: u8) -> NodeAddr {
        Ipv4Addr::new(10, 8, 0, i)
    }

    fn populated(n: u8, rng: &mut ChaCha8Rng) -> NetDb {
        let mut db = NetDb::new(true);
        for i in 0..n {
            let kp = KeyPair::generate(KeyPurpose::Routing, rng);
            db.register_node(addr(i + 2), kp.public_key).unwrap();
        }
        db
    }

    #[test]
    fn register_and_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut db = NetDb::new(true);
        let kp = KeyPair::generate(KeyPurpose::Routing, &mut rng);
        db.register_node(addr(11), kp.public_key).unwrap();
        assert_eq!(db.lookup_node(addr(11)).unwrap().routing_public_key, kp.public_key);
        assert_eq!(
            db.register_node(addr(11), kp.public_key),
            Err(NetDbError::DuplicateAddress(addr(11)))
        );
    }

    #[test]
    fn sixteen_nodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(populated(16, &mut rng).node_count(), 16);
    }

    #[test]
    fn lease_publication_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut db = populated(16, &mut rng);
        let a = KeyPair::generate(KeyPurpose::EndToEnd, &mut rng);
        let lease = LeaseRecord::new(a.public_key, addr(5), 77, 600.0);
        let pseudo = lease.pseudonym.clone();

        assert_eq!(
            db.publish_lease(lease.clone(), PublishVia::Direct, 0.0),
            Err(NetDbError::DirectWriteRejected)
        );
        db.publish_lease(lease.clone(), PublishVia::OutboundTunnel { endpoint: addr(9) }, 0.0)
            .unwrap();
        let found = db.lookup_lease(&pseudo, 10.0).unwrap();
        assert_eq!(found.inbound_gateway_address, addr(5));
        assert!(matches!(
            db.lookup_lease(&pseudo, 600.0),
            Err(NetDbError::NotFound(_))
        ));
        assert!(matches!(
            db.publish_lease(lease, PublishVia::OutboundTunnel { endpoint: addr(9) }, 700.0),
            Err(NetDbError::ExpiredLease { .. })
        ));
    }

    #[test]
    fn pseudonym_is_32_hex_chars() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = KeyPair::generate(KeyPurpose::EndToEnd, &mut rng);
        let p = Pseudonym::derive(&a.public_key);
        assert_eq!(p.as_str().len(), 32);
        assert!(p.as_str().chars().all(|c| c.is_ascii_hexdigit()));
        assert_eq!(p, Pseudonym::derive(&a.public_key));
    }

    #[test]
    fn route_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let db = populated(16, &mut rng);
        let me: BTreeSet<_> = [addr(2)].into();
        let route = db
            .sample_route(3, &me, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        let distinct: BTreeSet<_> = route.iter().map(|r| r.1).collect();
        assert_eq!(distinct.len(), 3);
        assert!(!distinct.contains(&addr(2)));

        let again = db
            .sample_route(3, &me, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        assert_eq!(route, again);

        assert_eq!(
            db.sample_route(16, &me, &mut rng),
            Err(NetDbError::InsufficientNodes {
                requested: 16,
                available: 15
            })
        );
    }

    #[test]
    fn sampling_is_roughly_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let db = populated(8, &mut rng);
        let mut counts = BTreeMap::new();
        for _ in 0..8000 {
            for (_, a) in db.sample_route(2, &BTreeSet::new(), &mut rng).unwrap() {
                *counts.entry(a).or_insert(0usize) += 1;
            }
        }
        // Each node expected 2000 times; binomial sd ~ 39.
        for (_, c) in counts {
            assert!((1800..2200).contains(&c), "{c}");
        }
    }

    #[test]
    fn snapshot_and_audit() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut db = populated(6, &mut rng);
        let a = KeyPair::generate(KeyPurpose::EndToEnd, &mut rng);
        db.publish_lease(
            LeaseRecord::new(a.public_key, addr(5), 1, 600.0),
            PublishVia::OutboundTunnel { endpoint: addr(3) },
            0.0,
        )
        .unwrap();
        let v: serde_json::Value = serde_json::from_str(&db.snapshot_json()).unwrap();
        assert_eq!(v["nodes"].as_array().unwrap().len(), 6);
        assert_eq!(v["leases"].as_array().unwrap().len(), 1);
        assert!(db.unlinkability_violations().is_empty());
    }
}
