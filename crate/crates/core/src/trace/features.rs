use super::TraceRecord;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Number of leading payload bytes used as features.
pub const PAYLOAD_FEATURES: usize = 256;

/// Per-packet metadata features, in the fixed column order used everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaField {
    TcpSeq,
    DstPort,
    PayloadSize,
    IpLen,
    IpTtl,
    TcpDataofs,
    OldFrameNum,
    FrameNum,
    Timestamp,
    TcpWindow,
    TcpAck,
    TcpFlags,
    SrcPort,
    IpId,
}

impl MetaField {
    pub const ALL: [MetaField; 14] = [
        MetaField::TcpSeq,
        MetaField::DstPort,
        MetaField::PayloadSize,
        MetaField::IpLen,
        MetaField::IpTtl,
        MetaField::TcpDataofs,
        MetaField::OldFrameNum,
        MetaField::FrameNum,
        MetaField::Timestamp,
        MetaField::TcpWindow,
        MetaField::TcpAck,
        MetaField::TcpFlags,
        MetaField::SrcPort,
        MetaField::IpId,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetaField::TcpSeq => "tcp_seq",
            MetaField::DstPort => "dst_port",
            MetaField::PayloadSize => "payload_size",
            MetaField::IpLen => "ip_len",
            MetaField::IpTtl => "ip_ttl",
            MetaField::TcpDataofs => "tcp_dataofs",
            MetaField::OldFrameNum => "old_frame_num",
            MetaField::FrameNum => "frame_num",
            MetaField::Timestamp => "timestamp",
            MetaField::TcpWindow => "tcp_window",
            MetaField::TcpAck => "tcp_ack",
            MetaField::TcpFlags => "tcp_flags",
            MetaField::SrcPort => "src_port",
            MetaField::IpId => "ip_id",
        }
    }

    pub fn value(self, r: &TraceRecord) -> f64 {
        match self {
            MetaField::TcpSeq => r.tcp_seq as f64,
            MetaField::DstPort => r.dst_port as f64,
            MetaField::PayloadSize => r.payload_size as f64,
            MetaField::IpLen => r.ip_len as f64,
            MetaField::IpTtl => r.ip_ttl as f64,
            MetaField::TcpDataofs => r.tcp_dataofs as f64,
            MetaField::OldFrameNum => r.old_frame_num as f64,
            MetaField::FrameNum => r.frame_num as f64,
            MetaField::Timestamp => r.timestamp,
            MetaField::TcpWindow => r.tcp_window as f64,
            MetaField::TcpAck => r.tcp_ack as f64,
            MetaField::TcpFlags => r.tcp_flags as f64,
            MetaField::SrcPort => r.src_port as f64,
            MetaField::IpId => r.ip_id as f64,
        }
    }
}

impl FromStr for MetaField {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MetaField::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown feature {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureVariant {
    /// 14 metadata fields then 256 payload bytes.
    AllRaw,
    /// The 14 metadata fields.
    WithoutPayload,
    /// All raw minus both ports.
    WithoutPort,
    /// 256 payload bytes.
    PayloadOnly,
}

impl FeatureVariant {
    pub const ALL: [FeatureVariant; 4] = [
        FeatureVariant::PayloadOnly,
        FeatureVariant::AllRaw,
        FeatureVariant::WithoutPayload,
        FeatureVariant::WithoutPort,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureVariant::AllRaw => "all-raw",
            FeatureVariant::WithoutPayload => "without-payload",
            FeatureVariant::WithoutPort => "without-port",
            FeatureVariant::PayloadOnly => "payload-only",
        }
    }

    fn meta_fields(self) -> impl Iterator<Item = MetaField> {
        MetaField::ALL.into_iter().filter(move |f| match self {
            FeatureVariant::AllRaw | FeatureVariant::WithoutPayload => true,
            FeatureVariant::WithoutPort => !matches!(f, MetaField::SrcPort | MetaField::DstPort),
            FeatureVariant::PayloadOnly => false,
        })
    }

    fn has_payload(self) -> bool {
        !matches!(self, FeatureVariant::WithoutPayload)
    }
}

impl fmt::Display for FeatureVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        FeatureVariant::ALL
            .into_iter()
            .find(|v| v.name() == norm || (norm == "all-data" && *v == FeatureVariant::AllRaw))
            .ok_or_else(|| format!("unknown feature variant {s:?}"))
    }
}

/// A variant with optional metadata columns removed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureSet {
    pub variant: FeatureVariant,
    #[serde(default)]
    pub dropped: Vec<MetaField>,
}

impl From<FeatureVariant> for FeatureSet {
    fn from(variant: FeatureVariant) -> Self {
        FeatureSet {
            variant,
            dropped: Vec::new(),
        }
    }
}

impl FeatureSet {
    pub fn dropping(variant: FeatureVariant, dropped: &[MetaField]) -> Self {
        FeatureSet {
            variant,
            dropped: dropped.to_vec(),
        }
    }

    pub fn meta_fields(&self) -> Vec<MetaField> {
        self.variant
            .meta_fields()
            .filter(|f| !self.dropped.contains(f))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.meta_fields().len() + if self.variant.has_payload() { PAYLOAD_FEATURES } else { 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of leading metadata columns; the rest are payload bytes.
    pub fn meta_len(&self) -> usize {
        self.meta_fields().len()
    }

    pub fn label(&self) -> String {
        if self.dropped.is_empty() {
            self.variant.name().to_string()
        } else {
            let names: Vec<&str> = self.dropped.iter().map(|f| f.name()).collect();
            format!("{}-minus-{}", self.variant.name(), names.join("+"))
        }
    }

    pub fn columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = self.meta_fields().iter().map(|f| f.name().to_string()).collect();
        if self.variant.has_payload() {
            cols.extend((0..PAYLOAD_FEATURES).map(|i| format!("payload_{i}")));
        }
        cols
    }

    pub fn extract(&self, record: &TraceRecord) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend(self.meta_fields().iter().map(|f| f.value(record)));
        if self.variant.has_payload() {
            out.extend(
                (0..PAYLOAD_FEATURES)
                    .map(|i| record.payload.get(i).map_or(0.0, |&b| b as f64 / 255.0)),
            );
        }
        out
    }
}

pub fn extract_features(record: &TraceRecord, variant: FeatureVariant) -> Vec<f64> {
    FeatureSet::from(variant).extract(record)
}
