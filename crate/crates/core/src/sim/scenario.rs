//! Declarative scenario scripts.
//!
//! ```toml
//! duration = 240.0              # seconds of simulated time
//!
//! [network]                     # any SimConfig field; omitted ones default
//! node_count = 16
//! seed = 7
//!
//! [[service]]                   # a node reachable under its pseudonym
//! name = "A"
//! node = "10.8.0.11"
//! class = 2                     # ground-truth label of requests to it
//!
//! [[client]]
//! node = "10.8.0.2"
//! outbound_tunnels = 2
//!
//! [[flow]]                      # Poisson request stream client -> service
//! client = "10.8.0.2"
//! service = "A"
//! requests = 200
//! start = 1.0
//! mean_interval = 1.0
//! payload_bytes = [200, 1800]
//!
//! [capture]
//! vantage = ["gateway:A"]       # node address, or gateway:<service>
//! ```

use super::{build_network, Direction, SimConfig, SimError, Simulation};
use crate::netdb::{NodeAddr, Pseudonym};
use crate::trace::Trace;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::Deserialize;
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub duration: f64,
    #[serde(default)]
    pub network: SimConfig,
    #[serde(default, rename = "service")]
    pub services: Vec<ServiceSpec>,
    #[serde(default, rename = "client")]
    pub clients: Vec<ClientSpec>,
    #[serde(default, rename = "flow")]
    pub flows: Vec<FlowSpec>,
    #[serde(default)]
    pub capture: CaptureSpec,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    pub name: String,
    pub node: NodeAddr,
    pub class: u8,
    #[serde(default = "one")]
    pub outbound_tunnels: usize,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSpec {
    pub node: NodeAddr,
    #[serde(default = "two")]
    pub outbound_tunnels: usize,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub client: NodeAddr,
    pub service: String,
    pub requests: usize,
    #[serde(default = "one_f")]
    pub start: f64,
    #[serde(default = "one_f")]
    pub mean_interval: f64,
    #[serde(default = "default_payload")]
    pub payload_bytes: (usize, usize),
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptureSpec {
    #[serde(default)]
    pub vantage: Vec<String>,
}

fn one() -> usize {
    1
}

fn two() -> usize {
    2
}

fn one_f() -> f64 {
    1.0
}

fn default_payload() -> (usize, usize) {
    (200, 1800)
}

/// A finished scenario run.
pub struct ScenarioRun {
    pub sim: Simulation,
    pub vantage: Vec<NodeAddr>,
    pub pseudonyms: BTreeMap<String, Pseudonym>,
}

impl ScenarioRun {
    pub fn capture(&self) -> Result<Trace, SimError> {
        self.sim.capture(&self.vantage)
    }
}

/// HTTP-like request text of exactly `size` bytes (at least the request line).
pub fn http_request<R: Rng + ?Sized>(rng: &mut R, host: &Pseudonym, size: usize) -> Vec<u8> {
    let page: u32 = rng.random_range(0..10_000);
    let mut text = format!(
        "GET /pages/{page}.html HTTP/1.1\r\nHost: {host}.b32.i2p\r\nAccept: text/html\r\nConnection: keep-alive\r\n"
    )
    .into_bytes();
    if text.len() + 4 < size {
        let fill = size - text.len() - 4;
        text.extend_from_slice(b"X-P: ");
        text.extend((0..fill.saturating_sub(5)).map(|_| rng.random_range(b'a'..=b'z')));
    }
    text.extend_from_slice(b"\r\n\r\n");
    text
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        let s: Scenario = toml::from_str(text).map_err(|e| SimError::Scenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<(), SimError> {
        let err = |m: String| Err(SimError::Scenario(m));
        if !(self.duration > 0.0) {
            return err("duration must be positive".into());
        }
        self.network.validate()?;
        let mut names = BTreeMap::new();
        for s in &self.services {
            if s.class < 2 {
                return err(format!("service {}: class {} is reserved for background", s.name, s.class));
            }
            if s.outbound_tunnels == 0 {
                return err(format!("service {}: needs an outbound tunnel to publish its lease", s.name));
            }
            if names.insert(s.name.as_str(), s).is_some() {
                return err(format!("duplicate service {}", s.name));
            }
        }
        for f in &self.flows {
            if !names.contains_key(f.service.as_str()) {
                return err(format!("flow references unknown service {:?}", f.service));
            }
            if !self.clients.iter().any(|c| c.node == f.client) {
                return err(format!("flow client {} is not declared as a [[client]]", f.client));
            }
            if !(f.start > 0.0 && f.mean_interval > 0.0) {
                return err("flow start and mean_interval must be positive".into());
            }
            if f.payload_bytes.0 > f.payload_bytes.1 {
                return err(format!("flow payload_bytes {:?} is not a range", f.payload_bytes));
            }
        }
        for v in &self.capture.vantage {
            if let Some(name) = v.strip_prefix("gateway:") {
                if !names.contains_key(name) {
                    return err(format!("vantage {v:?} names an unknown service"));
                }
            } else if v.parse::<NodeAddr>().is_err() {
                return err(format!("vantage {v:?} is neither an address nor gateway:<service>"));
            }
        }
        Ok(())
    }

    /// Builds the network and tunnels, schedules all flows and runs to `duration`.
    pub fn run(&self) -> Result<ScenarioRun, SimError> {
        let mut sim = build_network(self.network.clone())?;
        let ob = self.network.outbound_tunnel_length;
        let ib = self.network.inbound_tunnel_length;
        for c in &self.clients {
            for _ in 0..c.outbound_tunnels {
                sim.build_tunnel(c.node, Direction::Outbound, ob)?;
            }
        }
        let mut pseudonyms = BTreeMap::new();
        for s in &self.services {
            for _ in 0..s.outbound_tunnels {
                sim.build_exploratory_tunnel(s.node, ob)?;
            }
            sim.build_tunnel(s.node, Direction::Inbound, ib)?;
            pseudonyms.insert(s.name.clone(), sim.pseudonym_of(s.node)?);
        }

        for f in &self.flows {
            let service = self
                .services
                .iter()
                .find(|s| s.name == f.service)
                .expect("validated");
            let p = pseudonyms[&f.service].clone();
            let exp = Exp::new(1.0 / f.mean_interval).expect("positive interval");
            let mut t = f.start;
            for _ in 0..f.requests {
                let rng = sim.workload_rng();
                let size = rng.random_range(f.payload_bytes.0..=f.payload_bytes.1);
                let body = http_request(rng, &p, size);
                let gap = exp.sample(rng);
                sim.schedule_request(t, f.client, p.clone(), body, service.class);
                t += gap;
            }
        }
        sim.run(self.duration);

        let mut vantage = Vec::new();
        for v in &self.capture.vantage {
            match v.strip_prefix("gateway:") {
                Some(name) => {
                    let node = self.services.iter().find(|s| s.name == name).expect("validated").node;
                    vantage.extend(sim.inbound_gateways(node));
                }
                None => vantage.push(v.parse().expect("validated")),
            }
        }
        vantage.sort();
        vantage.dedup();
        Ok(ScenarioRun {
            sim,
            vantage,
            pseudonyms,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SCRIPT: &str = r#"
duration = 20.0

[network]
seed = 3
background_flows = 5

[[service]]
name = "A"
node = "10.8.0.11"
class = 2

[[client]]
node = "10.8.0.2"

[[flow]]
client = "10.8.0.2"
service = "A"
requests = 10
start = 1.0
mean_interval = 0.5

[capture]
vantage = ["gateway:A", "10.8.0.2"]
"#;

    #[test]
    fn runs_script() {
        let s = Scenario::from_toml_str(SCRIPT).unwrap();
        let run = s.run().unwrap();
        assert_eq!(run.sim.delivered_to(NodeAddr::new(10, 8, 0, 11)).len(), 10);
        assert!(run.vantage.contains(&NodeAddr::new(10, 8, 0, 2)));
        assert!(!run.capture().unwrap().is_empty());
    }

    #[test]
    fn reports_location_of_unknown_key() {
        let bad = SCRIPT.replace("background_flows = 5", "background_flow = 5");
        let err = Scenario::from_toml_str(&bad).unwrap_err().to_string();
        assert!(err.contains("line"), "{err}");
        assert!(err.contains("background_flow"), "{err}");
    }

    #[test]
    fn rejects_dangling_references() {
        let bad = SCRIPT.replace("service = \"A\"", "service = \"B\"");
        assert!(Scenario::from_toml_str(&bad).is_err());
        let bad = SCRIPT.replace("gateway:A", "gateway:Z");
        assert!(Scenario::from_toml_str(&bad).is_err());
    }

    #[test]
    fn http_request_has_requested_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Pseudonym::derive(
            &crate::crypto::KeyPair::generate(crate::crypto::KeyPurpose::EndToEnd, &mut rng).public_key,
        );
        for size in [300, 1000, 1800] {
            let r = http_request(&mut rng, &p, size);
            assert_eq!(r.len(), size);
            assert!(r.starts_with(b"GET /pages/"));
        }
    }
}
