//! Synthetic TCP-like and UDP-like link framing.
//!
//! Every blob is wrapped as `[len u16][blob][padding]` and XORed with a
//! per-connection keystream, so payload bytes look uniformly random on the
//! wire. Background messages are sent raw (they are random already).

use crate::crypto::LayerKey;
use crate::trace::{tcp_flags, Protocol};
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

pub(crate) const TCP_HEADERS: usize = 40;
pub(crate) const UDP_HEADERS: usize = 28;
const UDP_IV: usize = 16;
const MAX_PAD: usize = 15;
const EPHEMERAL_PORTS: std::ops::Range<u16> = 32768..61000;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Segment {
    pub protocol: Protocol,
    pub src_port: u16,
    pub dst_port: u16,
    pub seq: u32,
    pub ack: u32,
    pub flags: u8,
    pub window: u16,
    pub dataofs: u8,
    pub payload: Vec<u8>,
}

impl Segment {
    pub fn ip_len(&self) -> u16 {
        let headers = match self.protocol {
            Protocol::Tcp => TCP_HEADERS,
            Protocol::Udp => UDP_HEADERS,
        };
        (headers + self.payload.len()) as u16
    }
}

pub(crate) enum Body<'a> {
    Framed(&'a [u8]),
    Raw(Vec<u8>),
}

pub(crate) struct Sent {
    pub data: Segment,
    /// Pure ACK sent back by the receiver on arrival.
    pub ack: Option<Segment>,
    pub retransmit: bool,
}

struct TcpConn {
    initiator: usize,
    ephemeral_port: u16,
    /// Next sequence number, indexed by direction (0 = from initiator).
    seq: [u32; 2],
    window: [u16; 2],
    key: LayerKey,
}

pub(crate) struct Endpoint {
    pub node: usize,
    pub port: u16,
}

pub(crate) struct TransportState {
    rng: ChaCha8Rng,
    udp_probability: f64,
    padding: bool,
    ack_probability: f64,
    retransmission_probability: f64,
    draws: HashMap<(usize, usize, u64), Protocol>,
    tcp: HashMap<(usize, usize), TcpConn>,
    udp_keys: HashMap<(usize, usize), LayerKey>,
}

impl TransportState {
    pub fn new(
        rng: ChaCha8Rng,
        udp_probability: f64,
        padding: bool,
        ack_probability: f64,
        retransmission_probability: f64,
    ) -> Self {
        TransportState {
            rng,
            udp_probability,
            padding,
            ack_probability,
            retransmission_probability,
            draws: HashMap::new(),
            tcp: HashMap::new(),
            udp_keys: HashMap::new(),
        }
    }

    /// Protocol for `flow` on the directed link, drawn on first use.
    pub fn protocol(&mut self, src: usize, dst: usize, flow: u64) -> Protocol {
        let p = self.udp_probability;
        let rng = &mut self.rng;
        *self.draws.entry((src, dst, flow)).or_insert_with(|| {
            if rng.random_bool(p) {
                Protocol::Udp
            } else {
                Protocol::Tcp
            }
        })
    }

    fn frame(&mut self, blob: &[u8]) -> Vec<u8> {
        let pad = if self.padding {
            self.rng.random_range(0..=MAX_PAD)
        } else {
            0
        };
        let mut plain = Vec::with_capacity(2 + blob.len() + pad);
        plain.extend_from_slice(&(blob.len() as u16).to_be_bytes());
        plain.extend_from_slice(blob);
        let start = plain.len();
        plain.resize(start + pad, 0);
        self.rng.fill_bytes(&mut plain[start..]);
        plain
    }

    pub fn send(&mut self, src: Endpoint, dst: Endpoint, flow: u64, body: Body<'_>) -> Sent {
        match self.protocol(src.node, dst.node, flow) {
            Protocol::Udp => Sent {
                data: self.udp(src, dst, body),
                ack: None,
                retransmit: false,
            },
            Protocol::Tcp => self.tcp(src, dst, body),
        }
    }

    fn udp(&mut self, src: Endpoint, dst: Endpoint, body: Body<'_>) -> Segment {
        let payload = match body {
            Body::Raw(bytes) => bytes,
            Body::Framed(blob) => {
                let pair = (src.node.min(dst.node), src.node.max(dst.node));
                let rng = &mut self.rng;
                let key = self
                    .udp_keys
                    .entry(pair)
                    .or_insert_with(|| LayerKey::generate(rng))
                    .clone();
                let mut iv = [0u8; UDP_IV];
                self.rng.fill_bytes(&mut iv);
                let mut plain = self.frame(blob);
                key.apply(&iv, &mut plain);
                let mut out = iv.to_vec();
                out.extend_from_slice(&plain);
                out
            }
        };
        Segment {
            protocol: Protocol::Udp,
            src_port: src.port,
            dst_port: dst.port,
            seq: 0,
            ack: 0,
            flags: 0,
            window: 0,
            dataofs: 0,
            payload,
        }
    }

    fn tcp(&mut self, src: Endpoint, dst: Endpoint, body: Body<'_>) -> Sent {
        let pair = (src.node.min(dst.node), src.node.max(dst.node));
        if !self.tcp.contains_key(&pair) {
            let conn = TcpConn {
                initiator: src.node,
                ephemeral_port: self.rng.random_range(EPHEMERAL_PORTS),
                seq: [self.rng.random(), self.rng.random()],
                window: [self.rng.random_range(256..4096), self.rng.random_range(256..4096)],
                key: LayerKey::generate(&mut self.rng),
            };
            self.tcp.insert(pair, conn);
        }
        let mut payload = match body {
            Body::Raw(bytes) => bytes,
            Body::Framed(blob) => self.frame(blob),
        };
        let ack_roll = self.rng.random_bool(self.ack_probability);
        let retransmit = self.rng.random_bool(self.retransmission_probability);

        let conn = self.tcp.get_mut(&pair).expect("connection just inserted");
        let dir = usize::from(src.node != conn.initiator);
        let (src_port, dst_port) = if dir == 0 {
            (conn.ephemeral_port, dst.port)
        } else {
            (src.port, conn.ephemeral_port)
        };
        let seq = conn.seq[dir];
        let mut iv = [0u8; 5];
        iv[0] = dir as u8;
        iv[1..].copy_from_slice(&seq.to_be_bytes());
        conn.key.apply(&iv, &mut payload);
        conn.seq[dir] = seq.wrapping_add(payload.len() as u32);
        let data = Segment {
            protocol: Protocol::Tcp,
            src_port,
            dst_port,
            seq,
            ack: conn.seq[1 - dir],
            flags: tcp_flags::PSH | tcp_flags::ACK,
            window: conn.window[dir],
            dataofs: 5,
            payload,
        };
        let ack = ack_roll.then(|| Segment {
            protocol: Protocol::Tcp,
            src_port: dst_port,
            dst_port: src_port,
            seq: conn.seq[1 - dir],
            ack: conn.seq[dir],
            flags: tcp_flags::ACK,
            window: conn.window[1 - dir],
            dataofs: 5,
            payload: Vec::new(),
        });
        Sent {
            data,
            ack,
            retransmit,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn state(udp: f64, padding: bool) -> TransportState {
        TransportState::new(ChaCha8Rng::seed_from_u64(1), udp, padding, 1.0, 0.0)
    }

    fn ep(node: usize, port: u16) -> Endpoint {
        Endpoint { node, port }
    }

    #[test]
    fn tcp_sequence_advances_and_acks_reverse() {
        let mut t = state(0.0, false);
        let a = t.send(ep(0, 9000), ep(1, 9001), 7, Body::Framed(&[1u8; 100]));
        let b = t.send(ep(0, 9000), ep(1, 9001), 7, Body::Framed(&[1u8; 100]));
        assert_eq!(a.data.protocol, Protocol::Tcp);
        assert_eq!(a.data.payload.len(), 102);
        assert_eq!(b.data.seq, a.data.seq.wrapping_add(102));
        assert_eq!(a.data.dst_port, 9001);
        assert!((32768..61000).contains(&a.data.src_port));
        let ack = a.ack.unwrap();
        assert_eq!(ack.ack, b.data.seq);
        assert_eq!((ack.src_port, ack.dst_port), (9001, a.data.src_port));
        assert_eq!(ack.payload.len(), 0);
        assert_eq!(a.data.ip_len(), 142);
        // Reverse direction reuses the connection.
        let r = t.send(ep(1, 9001), ep(0, 9000), 7, Body::Raw(vec![5; 10]));
        assert_eq!((r.data.src_port, r.data.dst_port), (9001, a.data.src_port));
    }

    #[test]
    fn udp_uses_listen_ports_and_hides_length() {
        let mut t = state(1.0, true);
        let s = t.send(ep(2, 9100), ep(3, 9200), 1, Body::Framed(&[0u8; 1075]));
        assert_eq!(s.data.protocol, Protocol::Udp);
        assert_eq!((s.data.src_port, s.data.dst_port), (9100, 9200));
        let n = s.data.payload.len();
        assert!((16 + 2 + 1075..=16 + 2 + 1075 + 15).contains(&n));
        assert_eq!(s.data.ip_len() as usize, n + 28);
        // Zero blob bytes must not survive framing.
        let zeros = s.data.payload.iter().filter(|&&b| b == 0).count();
        assert!(zeros < 20, "{zeros}");
        assert!(s.ack.is_none());
    }

    #[test]
    fn draw_is_sticky_per_flow() {
        let mut t = state(0.5, false);
        let first: Vec<Protocol> = (0..50).map(|f| t.protocol(0, 1, f)).collect();
        let again: Vec<Protocol> = (0..50).map(|f| t.protocol(0, 1, f)).collect();
        assert_eq!(first, again);
        assert!(first.contains(&Protocol::Tcp) && first.contains(&Protocol::Udp));
    }
}
