//! Classic libpcap reader and writer (no pcapng).
//!
//! Accepts microsecond (`0xa1b2c3d4`) and nanosecond (`0xa1b23c4d`) magics in
//! either byte order, with Ethernet (1) or raw IPv4 (101) link types. Only
//! IPv4 TCP/UDP packets become records; everything else is counted and skipped.

use super::{annotate_tcp, Annotations, Protocol, Trace, TraceError, TraceRecord};
use super::Provenance;
use std::net::Ipv4Addr;

pub const LINKTYPE_ETHERNET: u32 = 1;
pub const LINKTYPE_RAW: u32 = 101;

const MAGIC_MICROS: u32 = 0xa1b2_c3d4;
const MAGIC_NANOS: u32 = 0xa1b2_3c4d;
const GLOBAL_HEADER: usize = 24;
const RECORD_HEADER: usize = 16;
const ETHERTYPE_IPV4: u16 = 0x0800;

#[derive(Debug, Clone, PartialEq)]
pub struct ImportedTrace {
    pub trace: Trace,
    /// Records that were not IPv4 TCP/UDP.
    pub skipped: usize,
}

#[derive(Clone, Copy)]
struct Format {
    little_endian: bool,
    nanos: bool,
}

impl Format {
    fn u32(&self, b: &[u8]) -> u32 {
        let a = [b[0], b[1], b[2], b[3]];
        if self.little_endian {
            u32::from_le_bytes(a)
        } else {
            u32::from_be_bytes(a)
        }
    }
}

fn be16(b: &[u8]) -> u16 {
    u16::from_be_bytes([b[0], b[1]])
}

fn be32(b: &[u8]) -> u32 {
    u32::from_be_bytes([b[0], b[1], b[2], b[3]])
}

pub fn import_pcap(bytes: &[u8]) -> Result<ImportedTrace, TraceError> {
    if bytes.len() < 4 {
        return Err(TraceError::BadMagic([0; 4]));
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    let format = match (u32::from_le_bytes(magic), u32::from_be_bytes(magic)) {
        (MAGIC_MICROS, _) => Format { little_endian: true, nanos: false },
        (MAGIC_NANOS, _) => Format { little_endian: true, nanos: true },
        (_, MAGIC_MICROS) => Format { little_endian: false, nanos: false },
        (_, MAGIC_NANOS) => Format { little_endian: false, nanos: true },
        _ => return Err(TraceError::BadMagic(magic)),
    };
    if bytes.len() < GLOBAL_HEADER {
        return Err(TraceError::TruncatedRecord { index: 0, offset: 0 });
    }
    let link_type = format.u32(&bytes[20..24]);
    if link_type != LINKTYPE_ETHERNET && link_type != LINKTYPE_RAW {
        return Err(TraceError::UnsupportedLinkType(link_type));
    }

    let mut records = Vec::new();
    let mut skipped = 0;
    let mut offset = GLOBAL_HEADER;
    let mut index = 0usize;
    while offset < bytes.len() {
        index += 1;
        if bytes.len() - offset < RECORD_HEADER {
            return Err(TraceError::TruncatedRecord { index, offset });
        }
        let hdr = &bytes[offset..offset + RECORD_HEADER];
        let ts_sec = format.u32(&hdr[0..4]);
        let ts_frac = format.u32(&hdr[4..8]);
        let incl_len = format.u32(&hdr[8..12]) as usize;
        let data_start = offset + RECORD_HEADER;
        if bytes.len() - data_start < incl_len {
            return Err(TraceError::TruncatedRecord { index, offset });
        }
        let frame = &bytes[data_start..data_start + incl_len];
        let timestamp = ts_sec as f64
            + ts_frac as f64 / if format.nanos { 1e9 } else { 1e6 };

        let ip = match link_type {
            LINKTYPE_ETHERNET if frame.len() >= 14 && be16(&frame[12..14]) == ETHERTYPE_IPV4 => {
                Some(&frame[14..])
            }
            LINKTYPE_RAW => Some(frame),
            _ => None,
        };
        match ip.and_then(|ip| parse_ipv4(ip, timestamp, index as u64)) {
            Some(r) => records.push(r),
            None => skipped += 1,
        }
        offset = data_start + incl_len;
    }

    annotate_tcp(&mut records);
    Ok(ImportedTrace {
        trace: Trace::new(records, Provenance::PcapImport),
        skipped,
    })
}

fn parse_ipv4(ip: &[u8], timestamp: f64, frame: u64) -> Option<TraceRecord> {
    if ip.len() < 20 || ip[0] >> 4 != 4 {
        return None;
    }
    let ihl = (ip[0] & 0x0f) as usize * 4;
    let total_len = be16(&ip[2..4]) as usize;
    if ihl < 20 || ip.len() < ihl {
        return None;
    }
    // Ethernet may pad short frames; the IP length is authoritative.
    let end = total_len.clamp(ihl, ip.len());
    let l4 = &ip[ihl..end];
    let src_ip = Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]);
    let dst_ip = Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]);

    let mut rec = TraceRecord {
        timestamp,
        frame_num: frame,
        old_frame_num: frame,
        src_ip,
        dst_ip,
        src_port: 0,
        dst_port: 0,
        protocol: Protocol::Tcp,
        ip_len: total_len as u16,
        ip_ttl: ip[8],
        ip_id: be16(&ip[4..6]),
        tcp_seq: 0,
        tcp_ack: 0,
        tcp_flags: 0,
        tcp_window: 0,
        tcp_dataofs: 0,
        payload_size: 0,
        payload: Vec::new(),
        annotations: Annotations::default(),
        ground_truth_class: None,
    };
    match ip[9] {
        6 => {
            if l4.len() < 20 {
                return None;
            }
            let dataofs = l4[12] >> 4;
            let hlen = dataofs as usize * 4;
            if hlen < 20 || l4.len() < hlen {
                return None;
            }
            rec.src_port = be16(&l4[0..2]);
            rec.dst_port = be16(&l4[2..4]);
            rec.tcp_seq = be32(&l4[4..8]);
            rec.tcp_ack = be32(&l4[8..12]);
            rec.tcp_dataofs = dataofs;
            rec.tcp_flags = l4[13];
            rec.tcp_window = be16(&l4[14..16]);
            rec.payload = l4[hlen..].to_vec();
        }
        17 => {
            if l4.len() < 8 {
                return None;
            }
            rec.protocol = Protocol::Udp;
            rec.src_port = be16(&l4[0..2]);
            rec.dst_port = be16(&l4[2..4]);
            let udp_len = (be16(&l4[4..6]) as usize).clamp(8, l4.len());
            rec.payload = l4[8..udp_len].to_vec();
        }
        _ => return None,
    }
    rec.payload_size = rec.payload.len();
    Some(rec)
}

fn ip_checksum(header: &[u8]) -> u16 {
    let mut sum: u32 = header
        .chunks(2)
        .map(|c| u16::from_be_bytes([c[0], *c.get(1).unwrap_or(&0)]) as u32)
        .sum();
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// Serializes records as a little-endian microsecond Ethernet pcap.
/// TCP headers carry no options, so `tcp_dataofs` is written as 5.
pub fn export_pcap(trace: &Trace) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC_MICROS.to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&4u16.to_le_bytes());
    out.extend_from_slice(&0i32.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&65535u32.to_le_bytes());
    out.extend_from_slice(&LINKTYPE_ETHERNET.to_le_bytes());

    for r in &trace.records {
        let l4_header = match r.protocol {
            Protocol::Tcp => 20,
            Protocol::Udp => 8,
        };
        let ip_total = 20 + l4_header + r.payload.len();
        let mut frame = Vec::with_capacity(14 + ip_total);
        frame.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x02, 0x02, 0, 0, 0, 0, 0x01]);
        frame.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());

        let mut ip = [0u8; 20];
        ip[0] = 0x45;
        ip[2..4].copy_from_slice(&(ip_total as u16).to_be_bytes());
        ip[4..6].copy_from_slice(&r.ip_id.to_be_bytes());
        ip[6] = 0x40; // DF
        ip[8] = r.ip_ttl;
        ip[9] = match r.protocol {
            Protocol::Tcp => 6,
            Protocol::Udp => 17,
        };
        ip[12..16].copy_from_slice(&r.src_ip.octets());
        ip[16..20].copy_from_slice(&r.dst_ip.octets());
        let csum = ip_checksum(&ip);
        ip[10..12].copy_from_slice(&csum.to_be_bytes());
        frame.extend_from_slice(&ip);

        frame.extend_from_slice(&r.src_port.to_be_bytes());
        frame.extend_from_slice(&r.dst_port.to_be_bytes());
        match r.protocol {
            Protocol::Tcp => {
                frame.extend_from_slice(&r.tcp_seq.to_be_bytes());
                frame.extend_from_slice(&r.tcp_ack.to_be_bytes());
                frame.push(5 << 4);
                frame.push(r.tcp_flags);
                frame.extend_from_slice(&r.tcp_window.to_be_bytes());
                frame.extend_from_slice(&[0, 0, 0, 0]);
            }
            Protocol::Udp => {
                frame.extend_from_slice(&((8 + r.payload.len()) as u16).to_be_bytes());
                frame.extend_from_slice(&[0, 0]);
            }
        }
        frame.extend_from_slice(&r.payload);

        let secs = r.timestamp.floor();
        let micros = ((r.timestamp - secs) * 1e6).round().min(999_999.0);
        out.extend_from_slice(&(secs as u32).to_le_bytes());
        out.extend_from_slice(&(micros as u32).to_le_bytes());
        out.extend_from_slice(&(frame.len() as u32).to_le_bytes());
        out.extend_from_slice(&(frame.len() as u32).to_le_bytes());
        out.extend_from_slice(&frame);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::testutil::{tcp, udp};

    #[test]
    fn rejects_unknown_magic() {
        assert!(matches!(
            import_pcap(&[0u8; 24]),
            Err(TraceError::BadMagic([0, 0, 0, 0]))
        ));
    }

    #[test]
    fn rejects_unknown_link_type() {
        let mut bytes = export_pcap(&Trace::new(vec![], Provenance::Simulated));
        bytes[20] = 113; // Linux cooked capture
        assert!(matches!(
            import_pcap(&bytes),
            Err(TraceError::UnsupportedLinkType(113))
        ));
    }

    #[test]
    fn export_import_preserves_fields() {
        let mut a = tcp(1, b"hello");
        a.timestamp = 12.5;
        let mut b = udp(2, &[9u8; 40]);
        b.timestamp = 13.000_25;
        let trace = Trace::new(vec![a.clone(), b.clone()], Provenance::Simulated);
        let back = import_pcap(&export_pcap(&trace)).unwrap();
        assert_eq!(back.skipped, 0);
        assert_eq!(back.trace.records.len(), 2);
        let ra = &back.trace.records[0];
        assert_eq!(ra.payload, b"hello");
        assert_eq!(ra.tcp_seq, a.tcp_seq);
        assert_eq!(ra.tcp_ack, a.tcp_ack);
        assert_eq!(ra.ip_len, 45);
        assert_eq!(ra.old_frame_num, 1);
        assert!((back.trace.records[1].timestamp - 13.000_25).abs() < 1e-9);
        assert_eq!(back.trace.records[1].protocol, Protocol::Udp);
        assert_eq!(back.trace.records[1].payload_size, 40);
    }

    #[test]
    fn big_endian_nanosecond_header() {
        let mut le = export_pcap(&Trace::new(vec![udp(1, b"x")], Provenance::Simulated));
        // Rewrite the whole file big-endian with the nanosecond magic.
        let mut be = Vec::new();
        be.extend_from_slice(&MAGIC_NANOS.to_be_bytes());
        be.extend_from_slice(&2u16.to_be_bytes());
        be.extend_from_slice(&4u16.to_be_bytes());
        be.extend_from_slice(&[0; 8]);
        be.extend_from_slice(&65535u32.to_be_bytes());
        be.extend_from_slice(&1u32.to_be_bytes());
        let rec = le.split_off(24);
        be.extend_from_slice(&7u32.to_be_bytes());
        be.extend_from_slice(&500_000_000u32.to_be_bytes());
        let len = u32::from_le_bytes([rec[8], rec[9], rec[10], rec[11]]);
        be.extend_from_slice(&len.to_be_bytes());
        be.extend_from_slice(&len.to_be_bytes());
        be.extend_from_slice(&rec[16..]);
        let t = import_pcap(&be).unwrap();
        assert_eq!(t.trace.records.len(), 1);
        assert!((t.trace.records[0].timestamp - 7.5).abs() < 1e-12);
    }
}
