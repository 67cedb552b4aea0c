use super::{tcp_flags, Protocol, Trace, TraceError, TraceRecord};
use std::collections::{HashMap, HashSet};
use std::net::Ipv4Addr;

type FlowKey = (Ipv4Addr, Ipv4Addr, u16, u16);

fn flow(r: &TraceRecord) -> FlowKey {
    (r.src_ip, r.dst_ip, r.src_port, r.dst_port)
}

/// Marks TCP retransmissions and duplicate ACKs in capture order.
///
/// A data segment whose `(flow, seq)` was already seen is a retransmission; it
/// is a fast retransmission when the reverse flow had already sent three or more
/// duplicate ACKs for that sequence number. A pure ACK whose `(flow, ack)`
/// repeats is a duplicate ACK.
pub fn annotate_tcp(records: &mut [TraceRecord]) {
    let mut segments: HashSet<(FlowKey, u32)> = HashSet::new();
    let mut acks: HashMap<(FlowKey, u32), usize> = HashMap::new();

    for r in records.iter_mut().filter(|r| r.protocol == Protocol::Tcp) {
        let key = flow(r);
        if r.payload_size > 0 {
            if !segments.insert((key, r.tcp_seq)) {
                let reverse = (key.1, key.0, key.3, key.2);
                let acked = acks.get(&(reverse, r.tcp_seq)).copied().unwrap_or(0);
                if acked > 3 {
                    r.annotations.fast_retransmission = true;
                } else {
                    r.annotations.retransmission = true;
                }
            }
        } else if r.tcp_flags & tcp_flags::ACK != 0
            && r.tcp_flags & (tcp_flags::SYN | tcp_flags::FIN) == 0
        {
            let seen = acks.entry((key, r.tcp_ack)).or_insert(0);
            if *seen > 0 {
                r.annotations.duplicate_ack = true;
            }
            *seen += 1;
        }
    }
}

/// Drops retransmissions, duplicate ACKs and zero-payload TCP records, then
/// renumbers `frame_num` from 1. Zero-payload UDP records are kept.
pub fn curate(trace: &Trace) -> Result<Trace, TraceError> {
    if trace.curation_applied {
        return Err(TraceError::AlreadyCurated);
    }
    let records = trace
        .records
        .iter()
        .filter(|r| !r.annotations.any())
        .filter(|r| !(r.protocol == Protocol::Tcp && r.payload_size == 0))
        .enumerate()
        .map(|(i, r)| TraceRecord {
            frame_num: i as u64 + 1,
            ..r.clone()
        })
        .collect();
    Ok(Trace {
        records,
        provenance: trace.provenance,
        curation_applied: true,
    })
}
