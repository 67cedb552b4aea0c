use super::{Protocol, Trace, TraceError, TraceRecord};
use serde::Serialize;
use std::collections::BTreeMap;

/// Plug-in Shannon entropy of the byte histogram, in bits per byte.
pub fn byte_entropy(bytes: &[u8]) -> f64 {
    if bytes.is_empty() {
        return 0.0;
    }
    let mut counts = [0usize; 256];
    for &b in bytes {
        counts[b as usize] += 1;
    }
    let n = bytes.len() as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    // -0.0 for single-symbol input
    h.max(0.0)
}

pub fn payload_entropy(record: &TraceRecord) -> Result<f64, TraceError> {
    if record.payload.is_empty() {
        return Err(TraceError::EmptyPayload);
    }
    Ok(byte_entropy(&record.payload))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PortCount {
    pub protocol: Protocol,
    pub port: u16,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeCount {
    pub size: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryStats {
    /// Packets per (protocol, destination port), most frequent first.
    pub port_counts: Vec<PortCount>,
    /// Fifteen most frequent payload sizes per protocol.
    pub top_sizes: BTreeMap<Protocol, Vec<SizeCount>>,
    /// `(frame_num, bits per byte)` for every payload-bearing record.
    pub entropy_series: Vec<(u64, f64)>,
    pub mean_entropy: Option<f64>,
}

impl SummaryStats {
    pub fn count_for(&self, protocol: Protocol, port: u16) -> usize {
        self.port_counts
            .iter()
            .find(|p| p.protocol == protocol && p.port == port)
            .map_or(0, |p| p.count)
    }

    /// Most frequent payload size for `protocol`.
    pub fn size_mode(&self, protocol: Protocol) -> Option<usize> {
        self.top_sizes.get(&protocol)?.first().map(|s| s.size)
    }
}

const TOP_SIZES: usize = 15;

pub fn summarize(trace: &Trace) -> SummaryStats {
    let mut ports: BTreeMap<(Protocol, u16), usize> = BTreeMap::new();
    let mut sizes: BTreeMap<Protocol, BTreeMap<usize, usize>> = BTreeMap::new();
    let mut entropy_series = Vec::new();

    for r in &trace.records {
        *ports.entry((r.protocol, r.dst_port)).or_default() += 1;
        *sizes.entry(r.protocol).or_default().entry(r.payload_size).or_default() += 1;
        if let Ok(h) = payload_entropy(r) {
            entropy_series.push((r.frame_num, h));
        }
    }

    let mut port_counts: Vec<PortCount> = ports
        .into_iter()
        .map(|((protocol, port), count)| PortCount {
            protocol,
            port,
            count,
        })
        .collect();
    port_counts.sort_by(|a, b| b.count.cmp(&a.count).then(a.protocol.cmp(&b.protocol)).then(a.port.cmp(&b.port)));

    let top_sizes = sizes
        .into_iter()
        .map(|(proto, hist)| {
            let mut v: Vec<SizeCount> = hist
                .into_iter()
                .map(|(size, count)| SizeCount { size, count })
                .collect();
            v.sort_by(|a, b| b.count.cmp(&a.count).then(a.size.cmp(&b.size)));
            v.truncate(TOP_SIZES);
            (proto, v)
        })
        .collect();

    let mean_entropy = if entropy_series.is_empty() {
        None
    } else {
        Some(entropy_series.iter().map(|e| e.1).sum::<f64>() / entropy_series.len() as f64)
    };

    SummaryStats {
        port_counts,
        top_sizes,
        entropy_series,
        mean_entropy,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::testutil::{tcp, udp};
    use crate::trace::Provenance;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn entropy_edge_cases() {
        assert_eq!(byte_entropy(&[0u8; 1000]), 0.0);
        let abab: Vec<u8> = (0..1000).map(|i| if i % 2 == 0 { b'A' } else { b'B' }).collect();
        assert!((byte_entropy(&abab) - 1.0).abs() < 1e-12);
        assert!(matches!(payload_entropy(&tcp(1, b"")), Err(TraceError::EmptyPayload)));
    }

    #[test]
    fn random_payload_is_near_eight_bits() {
        let mut buf = vec![0u8; 1100];
        ChaCha8Rng::seed_from_u64(7).fill_bytes(&mut buf);
        let h = byte_entropy(&buf);
        // Plug-in bias is about 255 / (2 N ln 2) = 0.167 bits below 8.
        assert!(h >= 7.7 && h < 8.0, "{h}");
    }

    #[test]
    fn port_breakdown() {
        let t = Trace::new(
            vec![udp(1, b"a"), udp(2, b"b"), udp(3, b"c")],
            Provenance::PcapImport,
        );
        let s = summarize(&t);
        assert_eq!(s.port_counts.len(), 1);
        assert_eq!(s.count_for(Protocol::Udp, 9156), 3);
        assert_eq!(s.size_mode(Protocol::Udp), Some(1));
    }

    #[test]
    fn empty_trace() {
        let s = summarize(&Trace::new(vec![], Provenance::Simulated));
        assert!(s.port_counts.is_empty());
        assert!(s.top_sizes.is_empty());
        assert!(s.mean_entropy.is_none());
    }

    #[test]
    fn top_sizes_are_capped() {
        let records: Vec<_> = (0..40u64).map(|i| tcp(i, &vec![1u8; i as usize % 20 + 1])).collect();
        let s = summarize(&Trace::new(records, Provenance::Simulated));
        assert_eq!(s.top_sizes[&Protocol::Tcp].len(), 15);
    }
}
