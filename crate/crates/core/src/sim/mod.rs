//! Seeded discrete-event simulator of a tunnel-based mix network.
//!
//! Senders onion-wrap each request cell over their outbound tunnel hops and
//! the recipient's inbound gateway. The gateway re-encrypts the end-to-end
//! ciphertext into a fixed-length tunnel message that every inbound hop
//! layers with its own key; only the owner strips all layers. Every link
//! transmission is recorded with transport headers and ground truth, and
//! [`Simulation::capture`] cuts a labelled trace for a set of vantage nodes.

mod churn;
mod config;
mod event;
mod fragment;
pub mod scenario;
mod transport;

pub use churn::{churn_tick, OnlineHistory};
pub use config::{ChurnSpec, LatencySpec, SimConfig};
pub use event::{from_secs, to_secs, SimTime};
pub use fragment::{fragment, reassemble};

use crate::crypto::{
    keyed_digest, open_end_to_end, peel, seal_end_to_end, wrap, CryptoError, KeyPair, KeyPurpose,
    LayerKey, OnionMessage, OnionMode, PublicKey, RoutingInstruction,
};
use crate::netdb::{LeaseRecord, NetDb, NetDbError, NodeAddr, Pseudonym, PublishVia};
use crate::trace::{annotate_tcp, Annotations, Provenance, Trace, TraceRecord};
use config::{CELL_FRAMING, TUNNEL_HEADER};
use event::EventQueue;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;
use transport::{Body, Endpoint, Segment, TransportState};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unknown node {0}")]
    UnknownNode(NodeAddr),
    #[error("node {0} is offline")]
    NodeOffline(NodeAddr),
    #[error("requested {requested} hops but only {available} eligible nodes")]
    InsufficientNodes { requested: usize, available: usize },
    #[error("{0} has no established outbound tunnel to publish through")]
    NoOutboundTunnel(NodeAddr),
    #[error("{0} has no established outbound tunnel")]
    NoTunnel(NodeAddr),
    #[error("no unexpired lease for {0}")]
    UnknownPseudonym(Pseudonym),
    #[error(transparent)]
    NetDb(NetDbError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("scenario: {0}")]
    Scenario(String),
}

impl From<NetDbError> for SimError {
    fn from(e: NetDbError) -> Self {
        match e {
            NetDbError::InsufficientNodes {
                requested,
                available,
            } => SimError::InsufficientNodes {
                requested,
                available,
            },
            other => SimError::NetDb(other),
        }
    }
}

pub type RequestId = u64;

/// Ground-truth class of background traffic.
pub const CLASS_BACKGROUND: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Outbound,
    Inbound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TunnelStatus {
    Building,
    Established,
    EstablishedExploratory,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunnelSpec {
    pub id: usize,
    pub direction: Direction,
    pub owner: NodeAddr,
    /// Outbound: first hop after the owner. Inbound: gateway first.
    pub hops: Vec<NodeAddr>,
    pub created_at: f64,
    pub expires_at: f64,
    pub status: TunnelStatus,
}

impl TunnelSpec {
    pub fn is_established(&self) -> bool {
        matches!(
            self.status,
            TunnelStatus::Established | TunnelStatus::EstablishedExploratory
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeliveredMessage {
    pub request: RequestId,
    pub recipient: NodeAddr,
    pub payload: Vec<u8>,
    pub delivered_at: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LogAction {
    Originate,
    Peel,
    GatewayEncrypt,
    TunnelRelay,
    Deliver,
    PublishLease,
    Drop,
}

/// One processing step at a node. `request` is simulator instrumentation,
/// not something the node could read.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogEntry {
    pub time: f64,
    pub request: Option<RequestId>,
    pub from: Option<NodeAddr>,
    pub to: Option<NodeAddr>,
    pub action: LogAction,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SimStats {
    pub events: u64,
    pub wire_packets: u64,
    pub cells_sent: u64,
    pub cells_delivered: u64,
    pub cells_dropped: u64,
    pub requests_sent: u64,
    pub requests_delivered: u64,
    pub requests_failed: u64,
    pub dropped_offline: u64,
    pub dropped_expired: u64,
    pub auth_failures: u64,
    pub leases_published: u64,
    pub rebuild_failures: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RequestInfo {
    pub sender: NodeAddr,
    pub pseudonym: Option<Pseudonym>,
    pub class: u8,
    pub cells: usize,
    pub sent_at: f64,
    pub recipient: Option<NodeAddr>,
    /// Outbound tunnel hops, then the gateway, then any inbound hops.
    pub outbound_tunnel: Option<usize>,
}

const CORE_TUNNEL_DATA: u8 = 0x10;
const CORE_STORE: u8 = 0x11;
const CORE_DIRECT: u8 = 0x12;

const FLOW_TUNNEL: u64 = 0;
const FLOW_BUILD: u64 = 1 << 32;
const FLOW_BACKGROUND: u64 = 2 << 32;
const FLOW_DIRECT: u64 = 3 << 32;

const BACKGROUND_SIZES: std::ops::RangeInclusive<usize> = 47..=1112;
const RETRANSMIT_DELAY: SimTime = 200_000_000;

#[repr(u64)]
enum Stream {
    Keys = 1,
    Routes,
    Latency,
    Transport,
    Background,
    Churn,
    Crypto,
    Workload,
}

fn stream(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}

struct Node {
    addr: NodeAddr,
    routing: KeyPair,
    e2e: KeyPair,
    port: u16,
    ip_id: u16,
    online: bool,
    hops: BTreeMap<u32, HopState>,
    owned: BTreeMap<u32, usize>,
    partial: BTreeMap<RequestId, Vec<Option<Vec<u8>>>>,
    log: Vec<LogEntry>,
}

struct HopState {
    tunnel: usize,
    key: LayerKey,
    next: usize,
    next_id: u32,
    gateway: bool,
}

struct Tunnel {
    spec: TunnelSpec,
    keys: Vec<LayerKey>,
    /// Per-hop receive ids; for inbound tunnels the owner's id is last.
    ids: Vec<u32>,
    exploratory: bool,
}

#[derive(Clone, Copy)]
struct Tag {
    class: u8,
    request: Option<RequestId>,
    flow: u64,
}

enum Carried {
    Onion(OnionMessage),
    Tunnel { id: u32, data: Vec<u8> },
    Build,
    Noise,
}

struct InFlight {
    src: usize,
    dst: usize,
    carried: Carried,
    tag: Tag,
}

struct WirePacket {
    send: SimTime,
    arrive: SimTime,
    src: usize,
    dst: usize,
    class: u8,
    ip_id: u16,
    segment: Segment,
    /// Data segments that reach an offline node.
    dropped: bool,
    /// Not an ACK or retransmission copy.
    primary: bool,
    request: Option<RequestId>,
}

struct ScheduledRequest {
    sender: NodeAddr,
    pseudonym: Pseudonym,
    payload: Vec<u8>,
    class: u8,
}

enum Event {
    Arrive(usize),
    Local(InFlight),
    TunnelExpire(usize),
    ChurnTick,
    Background(usize),
    Request(Box<ScheduledRequest>),
}

/// A (sender, hop count) direct onion send, for length side-channel studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DirectSend {
    pub request: RequestId,
    pub hops: usize,
}

pub struct Simulation {
    config: SimConfig,
    netdb: NetDb,
    nodes: Vec<Node>,
    index: BTreeMap<NodeAddr, usize>,
    tunnels: Vec<Tunnel>,
    now: SimTime,
    queue: EventQueue<Event>,
    wire: Vec<WirePacket>,
    in_flight: Vec<Option<InFlight>>,
    transport: TransportState,
    rng_routes: ChaCha8Rng,
    rng_latency: ChaCha8Rng,
    rng_crypto: ChaCha8Rng,
    rng_background: ChaCha8Rng,
    rng_churn: ChaCha8Rng,
    rng_workload: ChaCha8Rng,
    background: Vec<(usize, usize)>,
    next_request: RequestId,
    requests: BTreeMap<RequestId, RequestInfo>,
    delivered: Vec<DeliveredMessage>,
    history: OnlineHistory,
    failures: Vec<String>,
    stats: SimStats,
}

fn addresses(first: NodeAddr, n: usize) -> Vec<NodeAddr> {
    let mut out = Vec::with_capacity(n);
    let mut a = u32::from(first);
    while out.len() < n {
        if !matches!(a & 0xff, 0 | 255) {
            out.push(NodeAddr::from(a));
        }
        a = a.wrapping_add(1);
    }
    out
}

fn iv_mask(key: &LayerKey) -> [u8; 16] {
    let d = keyed_digest(&key.0, b"tunnelsim/iv");
    let mut m = [0u8; 16];
    m.copy_from_slice(&d[..16]);
    m
}

fn xor16(a: &mut [u8], b: &[u8; 16]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x ^= y);
}

/// Validates `config`, creates and registers every node with fresh routing and
/// end-to-end key pairs, and schedules background flows and churn ticks.
pub fn build_network(config: SimConfig) -> Result<Simulation, SimError> {
    config.validate()?;
    let seed = config.seed;
    let mut keys_rng = stream(seed, Stream::Keys);
    let mut netdb = NetDb::new(config.strict_netdb);
    let mut nodes = Vec::with_capacity(config.node_count);
    let mut index = BTreeMap::new();
    for (i, addr) in addresses(config.first_address, config.node_count)
        .into_iter()
        .enumerate()
    {
        let routing = KeyPair::generate(KeyPurpose::Routing, &mut keys_rng);
        let e2e = KeyPair::generate(KeyPurpose::EndToEnd, &mut keys_rng);
        let port = keys_rng.random_range(config.port_range.0..config.port_range.1);
        let ip_id = keys_rng.random();
        netdb.register_node(addr, routing.public_key)?;
        index.insert(addr, i);
        nodes.push(Node {
            addr,
            routing,
            e2e,
            port,
            ip_id,
            online: true,
            hops: BTreeMap::new(),
            owned: BTreeMap::new(),
            partial: BTreeMap::new(),
            log: Vec::new(),
        });
    }

    let mut rng_background = stream(seed, Stream::Background);
    let background: Vec<(usize, usize)> = (0..config.background_flows)
        .map(|_| {
            let a = rng_background.random_range(0..config.node_count);
            let mut b = rng_background.random_range(0..config.node_count - 1);
            if b >= a {
                b += 1;
            }
            (a, b)
        })
        .collect();

    let transport = TransportState::new(
        stream(seed, Stream::Transport),
        config.udp_probability,
        config.transport_padding,
        config.ack_probability,
        config.retransmission_probability,
    );
    let mut sim = Simulation {
        netdb,
        nodes,
        index,
        tunnels: Vec::new(),
        now: 0,
        queue: EventQueue::default(),
        wire: Vec::new(),
        in_flight: Vec::new(),
        transport,
        rng_routes: stream(seed, Stream::Routes),
        rng_latency: stream(seed, Stream::Latency),
        rng_crypto: stream(seed, Stream::Crypto),
        rng_background,
        rng_churn: stream(seed, Stream::Churn),
        rng_workload: stream(seed, Stream::Workload),
        background,
        next_request: 1,
        requests: BTreeMap::new(),
        delivered: Vec::new(),
        history: OnlineHistory::default(),
        failures: Vec::new(),
        stats: SimStats::default(),
        config,
    };
    if sim.config.background_rate > 0.0 {
        for f in 0..sim.background.len() {
            let t = sim.background_gap();
            sim.queue.push(t, Event::Background(f));
        }
    }
    // Everyone starts online; the first draw happens one tick in.
    if let Some(churn) = &sim.config.churn {
        let first = from_secs(churn.tick_interval);
        sim.queue.push(first, Event::ChurnTick);
    }
    Ok(sim)
}

impl Simulation {
    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn netdb(&self) -> &NetDb {
        &self.netdb
    }

    /// Current simulation time in seconds.
    pub fn now(&self) -> f64 {
        to_secs(self.now)
    }

    pub fn addresses(&self) -> Vec<NodeAddr> {
        self.nodes.iter().map(|n| n.addr).collect()
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    pub fn stats(&self) -> &SimStats {
        &self.stats
    }

    /// Errors raised by scheduled work (requests, rebuilds) during `run`.
    pub fn failures(&self) -> &[String] {
        &self.failures
    }

    pub fn online_history(&self) -> &OnlineHistory {
        &self.history
    }

    pub fn is_online(&self, addr: NodeAddr) -> Result<bool, SimError> {
        Ok(self.nodes[self.node_index(addr)?].online)
    }

    pub fn listen_port(&self, addr: NodeAddr) -> Result<u16, SimError> {
        Ok(self.nodes[self.node_index(addr)?].port)
    }

    /// The pseudonym a node's service is reachable under.
    pub fn pseudonym_of(&self, addr: NodeAddr) -> Result<Pseudonym, SimError> {
        let node = &self.nodes[self.node_index(addr)?];
        Ok(Pseudonym::derive(&node.e2e.public_key))
    }

    pub fn tunnels(&self) -> impl Iterator<Item = &TunnelSpec> {
        self.tunnels.iter().map(|t| &t.spec)
    }

    pub fn tunnels_of(&self, owner: NodeAddr, direction: Direction) -> Vec<&TunnelSpec> {
        self.tunnels()
            .filter(|t| t.owner == owner && t.direction == direction)
            .collect()
    }

    /// Every node that has served as gateway of one of `owner`'s inbound tunnels.
    pub fn inbound_gateways(&self, owner: NodeAddr) -> Vec<NodeAddr> {
        let set: BTreeSet<NodeAddr> = self
            .tunnels_of(owner, Direction::Inbound)
            .into_iter()
            .map(|t| t.hops[0])
            .collect();
        set.into_iter().collect()
    }

    pub fn delivered(&self) -> &[DeliveredMessage] {
        &self.delivered
    }

    pub fn delivered_to(&self, addr: NodeAddr) -> Vec<&DeliveredMessage> {
        self.delivered.iter().filter(|d| d.recipient == addr).collect()
    }

    pub fn requests(&self) -> &BTreeMap<RequestId, RequestInfo> {
        &self.requests
    }

    pub fn node_log(&self, addr: NodeAddr) -> Result<&[LogEntry], SimError> {
        Ok(&self.nodes[self.node_index(addr)?].log)
    }

    fn node_index(&self, addr: NodeAddr) -> Result<usize, SimError> {
        self.index.get(&addr).copied().ok_or(SimError::UnknownNode(addr))
    }

    fn latency(&mut self) -> SimTime {
        let l = self.config.link_latency;
        let u: f64 = self.rng_latency.random_range(-1.0..=1.0);
        let ms = (l.mean_ms + l.jitter_ms * u).max(0.1);
        (ms * 1e6).round() as SimTime
    }

    fn background_gap(&mut self) -> SimTime {
        let exp = Exp::new(self.config.background_rate).expect("positive rate");
        self.now + from_secs(exp.sample(&mut self.rng_background))
    }

    fn log(&mut self, node: usize, request: Option<RequestId>, from: Option<usize>, to: Option<usize>, action: LogAction) {
        let entry = LogEntry {
            time: to_secs(self.now),
            request,
            from: from.map(|i| self.nodes[i].addr),
            to: to.map(|i| self.nodes[i].addr),
            action,
        };
        self.nodes[node].log.push(entry);
    }

    fn next_ip_id(&mut self, node: usize) -> u16 {
        let n = &mut self.nodes[node];
        n.ip_id = n.ip_id.wrapping_add(1);
        n.ip_id
    }

    fn push_wire(&mut self, packet: WirePacket, flight: Option<InFlight>) -> usize {
        self.wire.push(packet);
        self.in_flight.push(flight);
        self.stats.wire_packets += 1;
        self.wire.len() - 1
    }

    /// Puts `carried` on the link `src -> dst` at time `at`. Returns the wire
    /// index of the data segment, or `None` for node-local delivery.
    fn transmit(&mut self, src: usize, dst: usize, carried: Carried, tag: Tag, at: SimTime, raw: Option<Vec<u8>>) -> Option<usize> {
        let flight = InFlight {
            src,
            dst,
            carried,
            tag,
        };
        if src == dst {
            self.queue.push(at, Event::Local(flight));
            return None;
        }
        let framed: Vec<u8>;
        let body = match (&flight.carried, raw) {
            (_, Some(bytes)) => Body::Raw(bytes),
            (Carried::Onion(m), None) => Body::Framed(&m.blob),
            (Carried::Tunnel { id, data }, None) => {
                let mut v = Vec::with_capacity(4 + data.len());
                v.extend_from_slice(&id.to_be_bytes());
                v.extend_from_slice(data);
                framed = v;
                Body::Framed(&framed)
            }
            (Carried::Build | Carried::Noise, None) => {
                let len = self.config.onion_mode().padded_len().unwrap_or(0);
                let mut v = vec![0u8; len];
                self.rng_crypto.fill_bytes(&mut v);
                framed = v;
                Body::Framed(&framed)
            }
        };
        let sent = self.transport.send(
            Endpoint {
                node: src,
                port: self.nodes[src].port,
            },
            Endpoint {
                node: dst,
                port: self.nodes[dst].port,
            },
            tag.flow,
            body,
        );
        let arrive = at + self.latency();
        let ip_id = self.next_ip_id(src);
        let retransmit = sent.retransmit.then(|| sent.data.clone());
        let idx = self.push_wire(
            WirePacket {
                send: at,
                arrive,
                src,
                dst,
                class: tag.class,
                ip_id,
                segment: sent.data,
                dropped: false,
                primary: true,
                request: tag.request,
            },
            Some(flight),
        );
        self.queue.push(arrive, Event::Arrive(idx));
        if let Some(segment) = retransmit {
            let send = at + RETRANSMIT_DELAY;
            let arrive = send + self.latency();
            let ip_id = self.next_ip_id(src);
            self.push_wire(
                WirePacket {
                    send,
                    arrive,
                    src,
                    dst,
                    class: tag.class,
                    ip_id,
                    segment,
                    dropped: false,
                    primary: false,
                    request: tag.request,
                },
                None,
            );
        }
        if let Some(segment) = sent.ack {
            let ack_arrive = arrive + self.latency();
            let ip_id = self.next_ip_id(dst);
            self.push_wire(
                WirePacket {
                    send: arrive,
                    arrive: ack_arrive,
                    src: dst,
                    dst: src,
                    class: tag.class,
                    ip_id,
                    segment,
                    dropped: false,
                    primary: false,
                    request: tag.request,
                },
                None,
            );
        }
        Some(idx)
    }

    fn established_outbound(&self, owner: usize) -> Vec<usize> {
        let addr = self.nodes[owner].addr;
        self.tunnels
            .iter()
            .enumerate()
            .filter(|(_, t)| {
                t.spec.owner == addr
                    && t.spec.direction == Direction::Outbound
                    && t.spec.is_established()
            })
            .map(|(i, _)| i)
            .collect()
    }

    fn fresh_id(&mut self, node: usize) -> u32 {
        loop {
            let id: u32 = self.rng_routes.random();
            let n = &self.nodes[node];
            if id != 0 && !n.hops.contains_key(&id) && !n.owned.contains_key(&id) {
                return id;
            }
        }
    }

    /// Builds a client tunnel for `owner`. Inbound tunnels publish a lease,
    /// gateway first hop, through one of the owner's outbound tunnels.
    pub fn build_tunnel(&mut self, owner: NodeAddr, direction: Direction, length: usize) -> Result<TunnelSpec, SimError> {
        self.build(owner, direction, length, false)
    }

    /// Outbound tunnel marked exploratory (used for database traffic).
    pub fn build_exploratory_tunnel(&mut self, owner: NodeAddr, length: usize) -> Result<TunnelSpec, SimError> {
        self.build(owner, Direction::Outbound, length, true)
    }

    fn build(&mut self, owner: NodeAddr, direction: Direction, length: usize, exploratory: bool) -> Result<TunnelSpec, SimError> {
        let o = self.node_index(owner)?;
        if !self.nodes[o].online {
            return Err(SimError::NodeOffline(owner));
        }
        let publish_via = if direction == Direction::Inbound {
            let outs = self.established_outbound(o);
            if outs.is_empty() {
                return Err(SimError::NoOutboundTunnel(owner));
            }
            Some(outs[self.rng_routes.random_range(0..outs.len())])
        } else {
            None
        };
        let mut exclude: BTreeSet<NodeAddr> = self
            .nodes
            .iter()
            .filter(|n| !n.online)
            .map(|n| n.addr)
            .collect();
        exclude.insert(owner);
        let route = self.netdb.sample_route(length, &exclude, &mut self.rng_routes)?;
        let hops: Vec<usize> = route.iter().map(|(_, a)| self.index[a]).collect();
        let keys: Vec<LayerKey> = (0..length)
            .map(|_| LayerKey::generate(&mut self.rng_routes))
            .collect();

        let id = self.tunnels.len();
        let now = to_secs(self.now);
        let expires_at = now + self.config.tunnel_lifetime;
        let mut ids = Vec::new();
        if direction == Direction::Inbound {
            ids = hops.iter().map(|&h| self.fresh_id(h)).collect();
            ids.push(self.fresh_id(o));
            for (i, &h) in hops.iter().enumerate() {
                let next = hops.get(i + 1).copied().unwrap_or(o);
                let state = HopState {
                    tunnel: id,
                    key: keys[i].clone(),
                    next,
                    next_id: ids[i + 1],
                    gateway: i == 0,
                };
                self.nodes[h].hops.insert(ids[i], state);
            }
            self.nodes[o].owned.insert(ids[length], id);
        }
        let spec = TunnelSpec {
            id,
            direction,
            owner,
            hops: route.iter().map(|(_, a)| *a).collect(),
            created_at: now,
            expires_at,
            status: if exploratory {
                TunnelStatus::EstablishedExploratory
            } else {
                TunnelStatus::Established
            },
        };
        self.tunnels.push(Tunnel {
            spec: spec.clone(),
            keys,
            ids,
            exploratory,
        });
        self.queue.push(from_secs(expires_at), Event::TunnelExpire(id));

        let build_tag = Tag {
            class: CLASS_BACKGROUND,
            request: None,
            flow: FLOW_BUILD + id as u64,
        };
        let mut t = self.now;
        let mut prev = o;
        for &h in &hops {
            if let Some(w) = self.transmit(prev, h, Carried::Build, build_tag, t, None) {
                t = self.wire[w].arrive;
            }
            prev = h;
        }

        if let Some(via) = publish_via {
            let tunnel = &self.tunnels[id];
            let lease = LeaseRecord::new(
                self.nodes[o].e2e.public_key,
                spec.hops[0],
                tunnel.ids[0],
                now + self.config.lease_lifetime,
            );
            self.publish(o, via, &lease)?;
        }
        Ok(spec)
    }

    fn route_of(&self, tunnel: usize) -> Vec<(PublicKey, NodeAddr)> {
        self.tunnels[tunnel]
            .spec
            .hops
            .iter()
            .map(|a| (self.nodes[self.index[a]].routing.public_key, *a))
            .collect()
    }

    fn publish(&mut self, owner: usize, via: usize, lease: &LeaseRecord) -> Result<(), SimError> {
        let mut core = vec![CORE_STORE];
        core.extend(serde_json::to_vec(lease).expect("lease serializes"));
        let route = self.route_of(via);
        let onion = wrap(&route, &core, self.config.onion_mode(), &mut self.rng_crypto)?;
        let first = self.index[&route[0].1];
        self.log(owner, None, None, Some(first), LogAction::PublishLease);
        let tag = Tag {
            class: CLASS_BACKGROUND,
            request: None,
            flow: FLOW_TUNNEL + via as u64,
        };
        self.transmit(owner, first, Carried::Onion(onion), tag, self.now, None);
        Ok(())
    }

    /// Seals, fragments and onion-wraps `payload` for the lease holder of
    /// `pseudonym`, entering the network now. Every resulting transmission
    /// carries `class` as ground truth.
    pub fn send_request(&mut self, sender: NodeAddr, pseudonym: &Pseudonym, payload: &[u8], class: u8) -> Result<RequestId, SimError> {
        let s = self.node_index(sender)?;
        if !self.nodes[s].online {
            return Err(SimError::NodeOffline(sender));
        }
        let lease = self
            .netdb
            .lookup_lease(pseudonym, to_secs(self.now))
            .map_err(|_| SimError::UnknownPseudonym(pseudonym.clone()))?
            .clone();
        let outs = self.established_outbound(s);
        if outs.is_empty() {
            return Err(SimError::NoTunnel(sender));
        }
        let via = outs[self.rng_routes.random_range(0..outs.len())];
        let gateway = self
            .index
            .get(&lease.inbound_gateway_address)
            .copied()
            .ok_or(SimError::UnknownNode(lease.inbound_gateway_address))?;
        let mut route = self.route_of(via);
        route.push((self.nodes[gateway].routing.public_key, lease.inbound_gateway_address));
        let first = self.index[&route[0].1];

        let request = self.next_request;
        self.next_request += 1;
        let cells = fragment(payload, self.config.cell_capacity());
        let count = cells.len();
        let tag = Tag {
            class,
            request: Some(request),
            flow: FLOW_TUNNEL + via as u64,
        };
        for (i, cell) in cells.into_iter().enumerate() {
            let mut plain = Vec::with_capacity(12 + cell.len());
            plain.extend_from_slice(&request.to_be_bytes());
            plain.extend_from_slice(&(i as u16).to_be_bytes());
            plain.extend_from_slice(&(count as u16).to_be_bytes());
            plain.extend_from_slice(&cell);
            let sealed = seal_end_to_end(&lease.end_to_end_public_key, &plain, &mut self.rng_crypto)?;
            let mut core = Vec::with_capacity(5 + sealed.len());
            core.push(CORE_TUNNEL_DATA);
            core.extend_from_slice(&lease.tunnel_id.to_be_bytes());
            core.extend_from_slice(&sealed);
            debug_assert_eq!(core.len(), CELL_FRAMING + cell.len());
            let onion = wrap(&route, &core, self.config.onion_mode(), &mut self.rng_crypto)?;
            self.log(s, Some(request), None, Some(first), LogAction::Originate);
            self.transmit(s, first, Carried::Onion(onion), tag, self.now, None);
        }
        self.stats.cells_sent += count as u64;
        self.stats.requests_sent += 1;
        self.requests.insert(
            request,
            RequestInfo {
                sender,
                pseudonym: Some(pseudonym.clone()),
                class,
                cells: count,
                sent_at: to_secs(self.now),
                recipient: None,
                outbound_tunnel: Some(via),
            },
        );
        Ok(request)
    }

    /// Queues a request to be sent at `at` seconds; failures are counted in
    /// [`SimStats::requests_failed`] and listed by [`Simulation::failures`].
    pub fn schedule_request(&mut self, at: f64, sender: NodeAddr, pseudonym: Pseudonym, payload: Vec<u8>, class: u8) {
        self.queue.push(
            from_secs(at).max(self.now),
            Event::Request(Box::new(ScheduledRequest {
                sender,
                pseudonym,
                payload,
                class,
            })),
        );
    }

    /// Sends `payload` over a fresh route of `hops` random nodes without
    /// tunnels. The last hop opens the core with its end-to-end key.
    pub fn send_direct_onion(&mut self, sender: NodeAddr, hops: usize, payload: &[u8], mode: OnionMode, class: u8) -> Result<DirectSend, SimError> {
        let s = self.node_index(sender)?;
        let route = self
            .netdb
            .sample_route(hops, &BTreeSet::from([sender]), &mut self.rng_routes)?;
        let last = self.index[&route[hops - 1].1];
        let mut core = vec![CORE_DIRECT];
        core.extend(seal_end_to_end(&self.nodes[last].e2e.public_key, payload, &mut self.rng_crypto)?);
        let onion = wrap(&route, &core, mode, &mut self.rng_crypto)?;
        let request = self.next_request;
        self.next_request += 1;
        let first = self.index[&route[0].1];
        let tag = Tag {
            class,
            request: Some(request),
            flow: FLOW_DIRECT,
        };
        self.log(s, Some(request), None, Some(first), LogAction::Originate);
        self.transmit(s, first, Carried::Onion(onion), tag, self.now, None);
        self.stats.cells_sent += 1;
        self.stats.requests_sent += 1;
        self.requests.insert(
            request,
            RequestInfo {
                sender,
                pseudonym: None,
                class,
                cells: 1,
                sent_at: to_secs(self.now),
                recipient: Some(self.nodes[last].addr),
                outbound_tunnel: None,
            },
        );
        Ok(DirectSend { request, hops })
    }

    /// Processes every event due at or before `until` seconds.
    pub fn run(&mut self, until: f64) {
        let horizon = from_secs(until);
        while let Some((t, event)) = self.queue.pop_until(horizon) {
            self.now = t;
            self.stats.events += 1;
            self.handle(event);
        }
        self.now = self.now.max(horizon);
    }

    fn handle(&mut self, event: Event) {
        match event {
            Event::Arrive(idx) => {
                if let Some(flight) = self.in_flight[idx].take() {
                    if !self.nodes[flight.dst].online {
                        self.wire[idx].dropped = true;
                    }
                    self.receive(flight);
                }
            }
            Event::Local(flight) => self.receive(flight),
            Event::TunnelExpire(id) => self.expire(id),
            Event::ChurnTick => self.churn(),
            Event::Background(f) => self.background_send(f),
            Event::Request(r) => {
                if let Err(e) = self.send_request(r.sender, &r.pseudonym, &r.payload, r.class) {
                    self.stats.requests_failed += 1;
                    self.failures.push(format!("{:.6}s request from {}: {e}", self.now(), r.sender));
                }
            }
        }
    }

    fn drop_cell(&mut self, node: usize, flight: &InFlight) {
        if flight.tag.request.is_some() && matches!(flight.carried, Carried::Onion(_) | Carried::Tunnel { .. }) {
            self.stats.cells_dropped += 1;
        }
        self.log(node, flight.tag.request, Some(flight.src), None, LogAction::Drop);
    }

    fn receive(&mut self, flight: InFlight) {
        let at = flight.dst;
        if !self.nodes[at].online {
            self.stats.dropped_offline += 1;
            self.drop_cell(at, &flight);
            return;
        }
        match &flight.carried {
            Carried::Onion(msg) => match peel(&self.nodes[at].routing.private_key, msg) {
                Ok(RoutingInstruction::Forward { next_hop, inner }) => {
                    let Some(&next) = self.index.get(&next_hop) else {
                        self.drop_cell(at, &flight);
                        return;
                    };
                    self.log(at, flight.tag.request, Some(flight.src), Some(next), LogAction::Peel);
                    self.transmit(at, next, Carried::Onion(inner), flight.tag, self.now, None);
                }
                Ok(RoutingInstruction::Deliver { core }) => self.handle_core(at, &flight, core),
                Err(_) => {
                    self.stats.auth_failures += 1;
                    self.drop_cell(at, &flight);
                }
            },
            Carried::Tunnel { id, data } => {
                let (id, data) = (*id, data.clone());
                if let Some(&tunnel) = self.nodes[at].owned.get(&id) {
                    self.owner_receive(at, tunnel, &flight, data);
                } else if let Some(hop) = self.nodes[at].hops.get(&id) {
                    if hop.gateway {
                        self.drop_cell(at, &flight);
                        return;
                    }
                    let (key, next, next_id, tunnel) = (hop.key.clone(), hop.next, hop.next_id, hop.tunnel);
                    let mut data = data;
                    let (iv, body) = data.split_at_mut(16);
                    key.apply(iv, body);
                    xor16(iv, &iv_mask(&key));
                    self.log(at, flight.tag.request, Some(flight.src), Some(next), LogAction::TunnelRelay);
                    let tag = Tag {
                        flow: FLOW_TUNNEL + tunnel as u64,
                        ..flight.tag
                    };
                    self.transmit(at, next, Carried::Tunnel { id: next_id, data }, tag, self.now, None);
                } else {
                    self.stats.dropped_expired += 1;
                    self.drop_cell(at, &flight);
                }
            }
            Carried::Build | Carried::Noise => {}
        }
    }

    fn handle_core(&mut self, at: usize, flight: &InFlight, core: Vec<u8>) {
        match core.first() {
            Some(&CORE_TUNNEL_DATA) if core.len() >= 5 => {
                let id = u32::from_be_bytes([core[1], core[2], core[3], core[4]]);
                let Some(hop) = self.nodes[at].hops.get(&id).filter(|h| h.gateway) else {
                    self.stats.dropped_expired += 1;
                    self.drop_cell(at, flight);
                    return;
                };
                let (key, next, next_id, tunnel) = (hop.key.clone(), hop.next, hop.next_id, hop.tunnel);
                let sealed = &core[5..];
                let padded = self.config.onion_mode().padded_len().unwrap_or(0);
                let mut data = vec![0u8; padded - 4];
                self.rng_crypto.fill_bytes(&mut data[..16]);
                {
                    let body = &mut data[16..];
                    body[..2].copy_from_slice(&(sealed.len() as u16).to_be_bytes());
                    body[2..2 + sealed.len()].copy_from_slice(sealed);
                }
                let (iv, body) = data.split_at_mut(16);
                key.apply(iv, body);
                xor16(iv, &iv_mask(&key));
                debug_assert_eq!(4 + data.len(), padded);
                debug_assert!(padded >= TUNNEL_HEADER);
                self.log(at, flight.tag.request, Some(flight.src), Some(next), LogAction::GatewayEncrypt);
                let tag = Tag {
                    flow: FLOW_TUNNEL + tunnel as u64,
                    ..flight.tag
                };
                self.transmit(at, next, Carried::Tunnel { id: next_id, data }, tag, self.now, None);
            }
            Some(&CORE_STORE) => {
                let endpoint = self.nodes[at].addr;
                self.log(at, None, Some(flight.src), None, LogAction::PublishLease);
                let result = serde_json::from_slice::<LeaseRecord>(&core[1..])
                    .map_err(|e| e.to_string())
                    .and_then(|lease| {
                        self.netdb
                            .publish_lease(lease, PublishVia::OutboundTunnel { endpoint }, to_secs(self.now))
                            .map_err(|e| e.to_string())
                    });
                match result {
                    Ok(()) => self.stats.leases_published += 1,
                    Err(e) => self.failures.push(format!("{:.6}s lease store at {endpoint}: {e}", self.now())),
                }
            }
            Some(&CORE_DIRECT) => match open_end_to_end(&self.nodes[at].e2e.private_key, &core[1..]) {
                Ok(payload) => {
                    self.log(at, flight.tag.request, Some(flight.src), None, LogAction::Deliver);
                    self.stats.cells_delivered += 1;
                    self.stats.requests_delivered += 1;
                    self.delivered.push(DeliveredMessage {
                        request: flight.tag.request.unwrap_or(0),
                        recipient: self.nodes[at].addr,
                        payload,
                        delivered_at: self.now(),
                    });
                }
                Err(_) => {
                    self.stats.auth_failures += 1;
                    self.drop_cell(at, flight);
                }
            },
            _ => self.drop_cell(at, flight),
        }
    }

    fn owner_receive(&mut self, at: usize, tunnel: usize, flight: &InFlight, mut data: Vec<u8>) {
        let keys = self.tunnels[tunnel].keys.clone();
        let (iv, body) = data.split_at_mut(16);
        let mut ivs = vec![[0u8; 16]; keys.len()];
        let mut cur = [0u8; 16];
        cur.copy_from_slice(iv);
        for i in (0..keys.len()).rev() {
            xor16(&mut cur, &iv_mask(&keys[i]));
            ivs[i] = cur;
        }
        for (k, iv) in keys.iter().zip(&ivs) {
            k.apply(iv, body);
        }
        let len = u16::from_be_bytes([body[0], body[1]]) as usize;
        let plain = body
            .get(2..2 + len)
            .ok_or(CryptoError::AuthenticationFailure)
            .and_then(|sealed| open_end_to_end(&self.nodes[at].e2e.private_key, sealed));
        let plain = match plain {
            Ok(p) if p.len() >= 12 => p,
            _ => {
                self.stats.auth_failures += 1;
                self.drop_cell(at, flight);
                return;
            }
        };
        let request = u64::from_be_bytes(plain[..8].try_into().expect("8 bytes"));
        let idx = u16::from_be_bytes([plain[8], plain[9]]) as usize;
        let count = u16::from_be_bytes([plain[10], plain[11]]) as usize;
        self.log(at, Some(request), Some(flight.src), None, LogAction::Deliver);
        self.stats.cells_delivered += 1;
        let slots = self.nodes[at]
            .partial
            .entry(request)
            .or_insert_with(|| vec![None; count]);
        if idx < slots.len() {
            slots[idx] = Some(plain[12..].to_vec());
        }
        if slots.iter().all(Option::is_some) {
            let cells: Vec<Vec<u8>> = self.nodes[at]
                .partial
                .remove(&request)
                .expect("present")
                .into_iter()
                .flatten()
                .collect();
            if let Some(payload) = reassemble(&cells) {
                let recipient = self.nodes[at].addr;
                if let Some(info) = self.requests.get_mut(&request) {
                    info.recipient = Some(recipient);
                }
                self.stats.requests_delivered += 1;
                self.delivered.push(DeliveredMessage {
                    request,
                    recipient,
                    payload,
                    delivered_at: self.now(),
                });
            }
        }
    }

    fn expire(&mut self, id: usize) {
        let spec = self.tunnels[id].spec.clone();
        self.tunnels[id].spec.status = TunnelStatus::Expired;
        if spec.direction == Direction::Inbound {
            let ids = self.tunnels[id].ids.clone();
            for (i, addr) in spec.hops.iter().enumerate() {
                let h = self.index[addr];
                self.nodes[h].hops.remove(&ids[i]);
            }
            let o = self.index[&spec.owner];
            self.nodes[o].owned.remove(&ids[spec.hops.len()]);
        }
        let exploratory = self.tunnels[id].exploratory;
        if let Err(e) = self.build(spec.owner, spec.direction, spec.hops.len(), exploratory) {
            self.stats.rebuild_failures += 1;
            self.failures.push(format!("{:.6}s rebuild of tunnel {id}: {e}", self.now()));
        }
    }

    fn churn(&mut self) {
        let Some(spec) = self.config.churn.clone() else {
            return;
        };
        let t = self.now();
        let all = self.addresses();
        let online = churn_tick(&spec, t, &all, &mut self.rng_churn);
        for n in &mut self.nodes {
            n.online = online.contains(&n.addr);
        }
        self.history.ticks.push((t, online));
        self.queue.push(self.now + from_secs(spec.tick_interval), Event::ChurnTick);
    }

    fn background_send(&mut self, flow: usize) {
        let (a, b) = self.background[flow];
        if self.nodes[a].online {
            let len = self.rng_background.random_range(BACKGROUND_SIZES);
            let mut bytes = vec![0u8; len];
            self.rng_background.fill_bytes(&mut bytes);
            let tag = Tag {
                class: CLASS_BACKGROUND,
                request: None,
                flow: FLOW_BACKGROUND + flow as u64,
            };
            self.transmit(a, b, Carried::Noise, tag, self.now, Some(bytes));
        }
        let next = self.background_gap();
        self.queue.push(next, Event::Background(flow));
    }

    /// Random draw from the workload stream, for scenario generators.
    pub fn workload_rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng_workload
    }

    /// Every transmission with source or destination in `vantage`, time
    /// stamped on the vantage side, ordered by time, with TCP annotations.
    pub fn capture(&self, vantage: &[NodeAddr]) -> Result<Trace, SimError> {
        let set: BTreeSet<usize> = vantage
            .iter()
            .map(|a| self.node_index(*a))
            .collect::<Result<_, _>>()?;
        let mut picked: Vec<(SimTime, usize)> = self
            .wire
            .iter()
            .enumerate()
            .filter_map(|(i, w)| {
                if set.contains(&w.src) {
                    Some((w.send, i))
                } else if set.contains(&w.dst) && !w.dropped && w.arrive <= self.now {
                    Some((w.arrive, i))
                } else {
                    None
                }
            })
            .filter(|&(t, _)| t <= self.now)
            .collect();
        picked.sort_unstable();
        let mut records: Vec<TraceRecord> = picked
            .into_iter()
            .enumerate()
            .map(|(i, (t, w))| self.record(&self.wire[w], t, i as u64 + 1))
            .collect();
        annotate_tcp(&mut records);
        Ok(Trace::new(records, Provenance::Simulated))
    }

    fn record(&self, w: &WirePacket, t: SimTime, frame: u64) -> TraceRecord {
        let s = &w.segment;
        TraceRecord {
            timestamp: to_secs(t),
            frame_num: frame,
            old_frame_num: frame,
            src_ip: self.nodes[w.src].addr,
            dst_ip: self.nodes[w.dst].addr,
            src_port: s.src_port,
            dst_port: s.dst_port,
            protocol: s.protocol,
            ip_len: s.ip_len(),
            ip_ttl: self.config.ip_ttl,
            ip_id: w.ip_id,
            tcp_seq: s.seq,
            tcp_ack: s.ack,
            tcp_flags: s.flags,
            tcp_window: s.window,
            tcp_dataofs: s.dataofs,
            payload_size: s.payload.len(),
            payload: s.payload.clone(),
            annotations: Annotations::default(),
            ground_truth_class: Some(w.class),
        }
    }

    /// Directed links crossed by the data segments of `request`, in send order.
    pub fn request_links(&self, request: RequestId) -> Vec<(NodeAddr, NodeAddr)> {
        let mut v: Vec<&WirePacket> = self
            .wire
            .iter()
            .filter(|w| w.primary && w.request == Some(request))
            .collect();
        v.sort_by_key(|w| w.send);
        v.into_iter()
            .map(|w| (self.nodes[w.src].addr, self.nodes[w.dst].addr))
            .collect()
    }

    /// Delivered requests for which some processing record at a node other
    /// than the endpoints names both the sender and the recipient.
    pub fn anonymity_violations(&self) -> Vec<RequestId> {
        let mut out = BTreeSet::new();
        for node in &self.nodes {
            for e in &node.log {
                let Some(r) = e.request else { continue };
                let Some(info) = self.requests.get(&r) else { continue };
                let Some(recipient) = info.recipient else { continue };
                if node.addr == info.sender || node.addr == recipient {
                    continue;
                }
                let names = [e.from, e.to];
                if names.contains(&Some(info.sender)) && names.contains(&Some(recipient)) {
                    out.insert(r);
                }
            }
        }
        out.into_iter().collect()
    }

    /// Intermediate nodes whose records for `request`, taken together, name
    /// both endpoints. This happens when one relay sits in both the sender's
    /// outbound tunnel and the recipient's inbound tunnel.
    pub fn linking_observers(&self, request: RequestId) -> Vec<NodeAddr> {
        let Some(info) = self.requests.get(&request) else {
            return Vec::new();
        };
        let Some(recipient) = info.recipient else {
            return Vec::new();
        };
        self.nodes
            .iter()
            .filter(|n| n.addr != info.sender && n.addr != recipient)
            .filter(|n| {
                let seen: BTreeSet<NodeAddr> = n
                    .log
                    .iter()
                    .filter(|e| e.request == Some(request))
                    .flat_map(|e| [e.from, e.to])
                    .flatten()
                    .collect();
                seen.contains(&info.sender) && seen.contains(&recipient)
            })
            .map(|n| n.addr)
            .collect()
    }

    /// Ordered nodes a tunnel request travels: sender, outbound hops,
    /// gateway, inbound hops, recipient.
    pub fn expected_path(&self, request: RequestId) -> Option<Vec<NodeAddr>> {
        let info = self.requests.get(&request)?;
        let recipient = info.recipient?;
        let out = &self.tunnels[info.outbound_tunnel?].spec;
        let inbound = self
            .tunnels
            .iter()
            .filter(|t| t.spec.owner == recipient && t.spec.direction == Direction::Inbound)
            .filter(|t| t.spec.created_at <= info.sent_at)
            .last()?;
        let mut path = vec![info.sender];
        path.extend(&out.hops);
        path.extend(&inbound.spec.hops);
        path.push(recipient);
        Some(path)
    }
}
