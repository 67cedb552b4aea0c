use super::SimError;
use crate::crypto::{OnionMode, LAYER_OVERHEAD, MAX_ROUTE_LEN};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::net::Ipv4Addr;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencySpec {
    pub mean_ms: f64,
    pub jitter_ms: f64,
}

impl Default for LatencySpec {
    fn default() -> Self {
        LatencySpec {
            mean_ms: 5.0,
            jitter_ms: 2.0,
        }
    }
}

/// Diurnal availability model. Non-core nodes are online with probability
/// `base * (1 + amplitude * sin(2 pi t / period))`, redrawn every tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChurnSpec {
    pub base_online_fraction: f64,
    pub diurnal_amplitude: f64,
    pub period: f64,
    #[serde(default)]
    pub stable_core: BTreeSet<Ipv4Addr>,
    #[serde(default = "default_tick")]
    pub tick_interval: f64,
}

fn default_tick() -> f64 {
    60.0
}

impl ChurnSpec {
    pub fn online_probability(&self, t: f64) -> f64 {
        let phase = 2.0 * std::f64::consts::PI * t / self.period;
        (self.base_online_fraction * (1.0 + self.diurnal_amplitude * phase.sin())).clamp(0.0, 1.0)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let lo = self.base_online_fraction * (1.0 - self.diurnal_amplitude);
        let hi = self.base_online_fraction * (1.0 + self.diurnal_amplitude);
        if !(0.0..=1.0).contains(&self.diurnal_amplitude) || lo < 0.0 || hi > 1.0 {
            return Err(SimError::InvalidConfig(format!(
                "churn online probability spans [{lo}, {hi}], outside [0, 1]"
            )));
        }
        if !(self.period > 0.0 && self.tick_interval > 0.0) {
            return Err(SimError::InvalidConfig(
                "churn period and tick_interval must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub node_count: usize,
    pub outbound_tunnel_length: usize,
    pub inbound_tunnel_length: usize,
    /// Seconds.
    pub tunnel_lifetime: f64,
    /// Seconds.
    pub lease_lifetime: f64,
    pub link_latency: LatencySpec,
    pub udp_probability: f64,
    pub cell_size: usize,
    pub background_flows: usize,
    /// Messages per second on each background flow.
    pub background_rate: f64,
    pub churn: Option<ChurnSpec>,
    pub seed: u64,
    pub ip_ttl: u8,
    /// Listening ports are drawn uniformly from this half-open range.
    pub port_range: (u16, u16),
    /// Random per-packet padding inside transport frames.
    pub transport_padding: bool,
    /// Chance that a TCP data segment is answered by a pure ACK.
    pub ack_probability: f64,
    /// Chance that a TCP data segment is sent a second time.
    pub retransmission_probability: f64,
    pub first_address: Ipv4Addr,
    pub strict_netdb: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            node_count: 16,
            outbound_tunnel_length: 3,
            inbound_tunnel_length: 3,
            tunnel_lifetime: 600.0,
            lease_lifetime: 600.0,
            link_latency: LatencySpec::default(),
            udp_probability: 0.6,
            cell_size: crate::crypto::onion::DEFAULT_CELL_SIZE,
            background_flows: 24,
            background_rate: 1.0,
            churn: None,
            seed: 1,
            ip_ttl: 64,
            port_range: (9000, 31000),
            transport_padding: true,
            ack_probability: 0.5,
            retransmission_probability: 0.02,
            first_address: Ipv4Addr::new(10, 8, 0, 2),
            strict_netdb: true,
        }
    }
}

/// Bytes of framing between a fragment cell and the onion core: request id,
/// cell index and count, the end-to-end seal, and the tunnel data header.
pub(crate) const CELL_FRAMING: usize = 12 + crate::crypto::OVERHEAD + 5;
/// Inbound tunnel messages carry a 4-byte tunnel id and 16-byte IV.
pub(crate) const TUNNEL_HEADER: usize = 20;

impl SimConfig {
    pub fn onion_mode(&self) -> OnionMode {
        OnionMode::Padded {
            cell_size: self.cell_size,
        }
    }

    /// Largest fragment that fits one padded onion through the outbound
    /// tunnel plus the inbound gateway.
    pub fn cell_capacity(&self) -> usize {
        let hops = self.outbound_tunnel_length + 1;
        self.onion_mode()
            .core_capacity(hops)
            .unwrap_or(0)
            .saturating_sub(CELL_FRAMING + 2)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        let longest = self.outbound_tunnel_length.max(self.inbound_tunnel_length);
        if self.outbound_tunnel_length == 0 || self.inbound_tunnel_length == 0 {
            return bad("tunnel lengths must be at least 1".into());
        }
        if self.outbound_tunnel_length + 1 > MAX_ROUTE_LEN {
            return bad(format!(
                "outbound_tunnel_length {} exceeds {}",
                self.outbound_tunnel_length,
                MAX_ROUTE_LEN - 1
            ));
        }
        if self.node_count < longest + 2 {
            return bad(format!(
                "node_count {} < tunnel length {} + 2",
                self.node_count, longest
            ));
        }
        if !(0.0..=1.0).contains(&self.udp_probability) {
            return bad(format!("udp_probability {} outside [0, 1]", self.udp_probability));
        }
        for (name, p) in [
            ("ack_probability", self.ack_probability),
            ("retransmission_probability", self.retransmission_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        if !(self.tunnel_lifetime > 0.0 && self.lease_lifetime > 0.0) {
            return bad("durations must be positive".into());
        }
        if !(self.link_latency.mean_ms > 0.0 && self.link_latency.jitter_ms >= 0.0) {
            return bad("link latency mean must be positive and jitter nonnegative".into());
        }
        if !(self.background_rate >= 0.0 && self.background_rate.is_finite()) {
            return bad("background_rate must be a nonnegative number".into());
        }
        if self.port_range.0 == 0 || self.port_range.0 >= self.port_range.1 {
            return bad(format!("empty port range {:?}", self.port_range));
        }
        if self.cell_capacity() == 0 {
            return bad(format!(
                "cell_size {} leaves no room for data through {} hops",
                self.cell_size,
                self.outbound_tunnel_length + 1
            ));
        }
        if self.cell_size + LAYER_OVERHEAD > u16::MAX as usize {
            return bad(format!("cell_size {} too large", self.cell_size));
        }
        if let Some(churn) = &self.churn {
            churn.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        SimConfig::default().validate().unwrap();
        assert_eq!(SimConfig::default().cell_capacity(), 1075 - 4 * 51 - 51);
    }

    #[test]
    fn too_few_nodes() {
        let c = SimConfig {
            node_count: 4,
            ..SimConfig::default()
        };
        assert!(matches!(c.validate(), Err(SimError::InvalidConfig(_))));
        let c = SimConfig {
            node_count: 5,
            ..SimConfig::default()
        };
        c.validate().unwrap();
    }

    #[test]
    fn bad_probabilities() {
        let c = SimConfig {
            udp_probability: 1.5,
            ..SimConfig::default()
        };
        assert!(c.validate().is_err());
        let churn = ChurnSpec {
            base_online_fraction: 0.9,
            diurnal_amplitude: 0.5,
            period: 86400.0,
            stable_core: BTreeSet::new(),
            tick_interval: 60.0,
        };
        assert!(churn.validate().is_err());
    }

    #[test]
    fn tiny_cells_rejected() {
        let c = SimConfig {
            cell_size: 200,
            ..SimConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
