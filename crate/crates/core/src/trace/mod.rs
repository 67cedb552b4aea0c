//! Captured-packet data model and persistence.
//!
//! A trace persists as JSON Lines: an optional first line `{"#trace": {...}}`
//! carrying provenance and the curation flag, then one [`TraceRecord`] per line
//! with the payload base64 encoded.

mod curate;
mod features;
pub mod pcap;
mod stats;

pub use curate::{annotate_tcp, curate};
pub use features::{extract_features, FeatureSet, FeatureVariant, MetaField, PAYLOAD_FEATURES};
pub use stats::{byte_entropy, payload_entropy, summarize, SummaryStats};

use base64::Engine;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::net::Ipv4Addr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("bad pcap magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported link type {0}")]
    UnsupportedLinkType(u32),
    #[error("truncated pcap record {index} at byte offset {offset}")]
    TruncatedRecord { index: usize, offset: usize },
    #[error("trace is already curated")]
    AlreadyCurated,
    #[error("record has an empty payload")]
    EmptyPayload,
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "TCP")]
    Tcp,
    #[serde(rename = "UDP")]
    Udp,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::Tcp => "TCP",
            Protocol::Udp => "UDP",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotations {
    pub retransmission: bool,
    pub fast_retransmission: bool,
    pub duplicate_ack: bool,
}

impl Annotations {
    pub fn any(&self) -> bool {
        self.retransmission || self.fast_retransmission || self.duplicate_ack
    }
}

/// TCP flag bits.
pub mod tcp_flags {
    pub const FIN: u8 = 0x01;
    pub const SYN: u8 = 0x02;
    pub const PSH: u8 = 0x08;
    pub const ACK: u8 = 0x10;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub timestamp: f64,
    pub frame_num: u64,
    pub old_frame_num: u64,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: Protocol,
    pub ip_len: u16,
    pub ip_ttl: u8,
    pub ip_id: u16,
    pub tcp_seq: u32,
    pub tcp_ack: u32,
    pub tcp_flags: u8,
    pub tcp_window: u16,
    pub tcp_dataofs: u8,
    pub payload_size: usize,
    #[serde(with = "b64")]
    pub payload: Vec<u8>,
    pub annotations: Annotations,
    pub ground_truth_class: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Simulated,
    PcapImport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    pub provenance: Provenance,
    pub curation_applied: bool,
}

#[derive(Serialize, Deserialize)]
struct TraceHeader {
    provenance: Provenance,
    curation_applied: bool,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    #[serde(rename = "#trace")]
    header: TraceHeader,
}

const CSV_COLUMNS: [&str; 20] = [
    "timestamp",
    "frame_num",
    "old_frame_num",
    "src_ip",
    "dst_ip",
    "src_port",
    "dst_port",
    "protocol",
    "ip_len",
    "ip_ttl",
    "ip_id",
    "tcp_seq",
    "tcp_ack",
    "tcp_flags",
    "tcp_window",
    "tcp_dataofs",
    "payload_size",
    "retransmission",
    "duplicate_ack",
    "ground_truth_class",
];

impl Trace {
    pub fn new(records: Vec<TraceRecord>, provenance: Provenance) -> Self {
        Trace {
            records,
            provenance,
            curation_applied: false,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), TraceError> {
        let header = HeaderLine {
            header: TraceHeader {
                provenance: self.provenance,
                curation_applied: self.curation_applied,
            },
        };
        serde_json::to_writer(&mut w, &header).map_err(|e| TraceError::Json { line: 1, source: e })?;
        w.write_all(b"\n")?;
        for (i, r) in self.records.iter().enumerate() {
            serde_json::to_writer(&mut w, r).map_err(|e| TraceError::Json {
                line: i + 2,
                source: e,
            })?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_jsonl(&mut out).expect("in-memory write");
        out
    }

    /// Reads JSON Lines; without a header line the trace is assumed uncurated,
    /// simulated if any record carries ground truth, imported otherwise.
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, TraceError> {
        let mut header = None;
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if i == 0 && line.starts_with("{\"#trace\"") {
                let h: HeaderLine = serde_json::from_str(&line)
                    .map_err(|e| TraceError::Json { line: 1, source: e })?;
                header = Some(h.header);
                continue;
            }
            let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| TraceError::Json {
                line: i + 1,
                source: e,
            })?;
            records.push(rec);
        }
        let header = header.unwrap_or_else(|| TraceHeader {
            provenance: if records.iter().any(|r| r.ground_truth_class.is_some()) {
                Provenance::Simulated
            } else {
                Provenance::PcapImport
            },
            curation_applied: false,
        });
        Ok(Trace {
            records,
            provenance: header.provenance,
            curation_applied: header.curation_applied,
        })
    }

    /// CSV of every record field except the payload.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), TraceError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(CSV_COLUMNS)?;
        for r in &self.records {
            let a = &r.annotations;
            out.write_record([
                format!("{:.6}", r.timestamp),
                r.frame_num.to_string(),
                r.old_frame_num.to_string(),
                r.src_ip.to_string(),
                r.dst_ip.to_string(),
                r.src_port.to_string(),
                r.dst_port.to_string(),
                r.protocol.to_string(),
                r.ip_len.to_string(),
                r.ip_ttl.to_string(),
                r.ip_id.to_string(),
                r.tcp_seq.to_string(),
                r.tcp_ack.to_string(),
                r.tcp_flags.to_string(),
                r.tcp_window.to_string(),
                r.tcp_dataofs.to_string(),
                r.payload_size.to_string(),
                (a.retransmission || a.fast_retransmission).to_string(),
                a.duplicate_ack.to_string(),
                r.ground_truth_class.map(|c| c.to_string()).unwrap_or_default(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        STANDARD.decode(s.as_bytes()).map_err(D::Error::custom)
    }
}

/// Base64 helper shared with the CLI.
pub fn encode_payload(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}
