//! Deterministic simulator of an I2P-style mix network with unidirectional
//! tunnels, plus a passive-adversary analysis harness: trace capture and
//! curation, entropy and mutual-information estimates, the Fano bound,
//! k-Means clustering and a small 1D CNN.

pub mod anonymity;
pub mod crypto;
pub mod experiment;
pub mod learn;
pub mod netdb;
pub mod report;
pub mod sim;
pub mod trace;

pub use anonymity::{AnonymityError, FanoReport};
pub use crypto::{CryptoError, KeyPair, KeyPurpose, OnionMessage, OnionMode, PublicKey};
pub use experiment::{run_experiment, ExperimentError, ExperimentId, ExperimentOutcome, ExperimentSpec};
pub use learn::{CnnModel, Dataset, EvalReport, Hyper, KMeansModel, LearnError, TrainReport};
pub use netdb::{LeaseRecord, NetDb, NetDbError, NodeAddr, NodeRecord, Pseudonym};
pub use report::ReportError;
pub use sim::scenario::Scenario;
pub use sim::{build_network, Direction, SimConfig, SimError, Simulation, TunnelSpec};
pub use trace::{FeatureSet, FeatureVariant, MetaField, Protocol, Trace, TraceError, TraceRecord};
