use super::ChurnSpec;
use rand::Rng;
use std::collections::BTreeSet;
use std::net::Ipv4Addr;

/// Online set at time `t`: stable-core members always, everyone else with an
/// independent draw at the diurnal probability.
pub fn churn_tick<R: Rng + ?Sized>(
    spec: &ChurnSpec,
    t: f64,
    nodes: &[Ipv4Addr],
    rng: &mut R,
) -> BTreeSet<Ipv4Addr> {
    let p = spec.online_probability(t);
    nodes
        .iter()
        .copied()
        .filter(|a| {
            // Always draw so core membership does not shift the stream.
            let up = rng.random_bool(p);
            spec.stable_core.contains(a) || up
        })
        .collect()
}

/// Time-indexed online sets, as recorded by the simulator.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OnlineHistory {
    pub ticks: Vec<(f64, BTreeSet<Ipv4Addr>)>,
}

impl OnlineHistory {
    pub fn counts(&self) -> Vec<usize> {
        self.ticks.iter().map(|(_, s)| s.len()).collect()
    }
}
