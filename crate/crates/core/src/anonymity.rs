//! Entropies, plug-in mutual information and the Fano lower bound on an
//! adversary's error probability. All logarithms are base 2.

use crate::crypto::OnionMode;
use crate::netdb::NodeAddr;
use crate::sim::{build_network, SimConfig, SimError};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum AnonymityError {
    #[error("probability {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("anonymity set of size {0} makes the bound undefined")]
    DegenerateSet(usize),
    #[error("negative entropy {0}")]
    NegativeEntropy(f64),
    #[error("mutual information {mi} outside [0, H(X) = {entropy}]")]
    InvalidMutualInformation { mi: f64, entropy: f64 },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("no samples")]
    EmptySample,
    #[error("no online sets fall in the window")]
    EmptyWindow,
    #[error(transparent)]
    Sim(#[from] SimError),
}

fn xlog2x(p: f64) -> f64 {
    if p > 0.0 {
        p * p.log2()
    } else {
        0.0
    }
}

fn check_probabilities(ps: &[f64]) -> Result<(), AnonymityError> {
    if ps.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(AnonymityError::InvalidDistribution(
            "probabilities must be finite and nonnegative".into(),
        ));
    }
    let total: f64 = ps.iter().sum();
    if (total - 1.0).abs() > SUM_TOLERANCE {
        return Err(AnonymityError::InvalidDistribution(format!(
            "probabilities sum to {total}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDistribution<T> {
    pub outcomes: Vec<T>,
    pub probabilities: Vec<f64>,
}

impl<T> DiscreteDistribution<T> {
    pub fn new(outcomes: Vec<T>, probabilities: Vec<f64>) -> Result<Self, AnonymityError> {
        if outcomes.len() != probabilities.len() {
            return Err(AnonymityError::InvalidDistribution(
                "outcome and probability counts differ".into(),
            ));
        }
        check_probabilities(&probabilities)?;
        Ok(DiscreteDistribution {
            outcomes,
            probabilities,
        })
    }

    pub fn uniform(outcomes: Vec<T>) -> Result<Self, AnonymityError> {
        let n = outcomes.len();
        DiscreteDistribution::new(outcomes, vec![1.0 / n as f64; n])
    }
}

/// `matrix[i][j] = p(x_outcomes[i], y_outcomes[j])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDistribution<X, Y> {
    pub x_outcomes: Vec<X>,
    pub y_outcomes: Vec<Y>,
    pub matrix: Vec<Vec<f64>>,
}

impl<X: Clone, Y: Clone> JointDistribution<X, Y> {
    pub fn new(x_outcomes: Vec<X>, y_outcomes: Vec<Y>, matrix: Vec<Vec<f64>>) -> Result<Self, AnonymityError> {
        if matrix.len() != x_outcomes.len() || matrix.iter().any(|row| row.len() != y_outcomes.len()) {
            return Err(AnonymityError::InvalidDistribution(
                "matrix shape does not match outcomes".into(),
            ));
        }
        let flat: Vec<f64> = matrix.iter().flatten().copied().collect();
        check_probabilities(&flat)?;
        Ok(JointDistribution {
            x_outcomes,
            y_outcomes,
            matrix,
        })
    }

    pub fn marginal_x(&self) -> DiscreteDistribution<X> {
        DiscreteDistribution {
            outcomes: self.x_outcomes.clone(),
            probabilities: self.matrix.iter().map(|row| row.iter().sum()).collect(),
        }
    }

    pub fn marginal_y(&self) -> DiscreteDistribution<Y> {
        let mut py = vec![0.0; self.y_outcomes.len()];
        for row in &self.matrix {
            for (acc, p) in py.iter_mut().zip(row) {
                *acc += p;
            }
        }
        DiscreteDistribution {
            outcomes: self.y_outcomes.clone(),
            probabilities: py,
        }
    }

    /// `p(x) p(y)` on the same outcome grid.
    pub fn product_of_marginals(&self) -> Self {
        let px = self.marginal_x().probabilities;
        let py = self.marginal_y().probabilities;
        JointDistribution {
            x_outcomes: self.x_outcomes.clone(),
            y_outcomes: self.y_outcomes.clone(),
            matrix: px.iter().map(|a| py.iter().map(|b| a * b).collect()).collect(),
        }
    }
}

/// `h(p) = -p log p - (1-p) log (1-p)`.
pub fn binary_entropy(p: f64) -> Result<f64, AnonymityError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(AnonymityError::OutOfRange(p));
    }
    Ok(-(xlog2x(p) + xlog2x(1.0 - p)))
}

pub fn plugin_entropy<T>(dist: &DiscreteDistribution<T>) -> f64 {
    -dist.probabilities.iter().map(|&p| xlog2x(p)).sum::<f64>()
}

/// Plug-in mutual information, floored at zero.
pub fn plugin_mi<X: Clone, Y: Clone>(joint: &JointDistribution<X, Y>) -> f64 {
    let px = joint.marginal_x().probabilities;
    let py = joint.marginal_y().probabilities;
    let mut mi = 0.0;
    for (i, row) in joint.matrix.iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            if p > 0.0 {
                mi += p * (p / (px[i] * py[j])).log2();
            }
        }
    }
    mi.max(0.0)
}

/// Empirical joint distribution; outcomes are listed in sorted order.
pub fn estimate_joint_from_samples<X, Y>(pairs: &[(X, Y)]) -> Result<JointDistribution<X, Y>, AnonymityError>
where
    X: Ord + Clone,
    Y: Ord + Clone,
{
    if pairs.is_empty() {
        return Err(AnonymityError::EmptySample);
    }
    let xs: Vec<X> = pairs.iter().map(|p| p.0.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let ys: Vec<Y> = pairs.iter().map(|p| p.1.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let xi: BTreeMap<&X, usize> = xs.iter().enumerate().map(|(i, x)| (x, i)).collect();
    let yi: BTreeMap<&Y, usize> = ys.iter().enumerate().map(|(i, y)| (y, i)).collect();
    let mut counts = vec![vec![0usize; ys.len()]; xs.len()];
    for (x, y) in pairs {
        counts[xi[x]][yi[y]] += 1;
    }
    let n = pairs.len() as f64;
    let matrix = counts
        .into_iter()
        .map(|row| row.into_iter().map(|c| c as f64 / n).collect())
        .collect();
    Ok(JointDistribution {
        x_outcomes: xs,
        y_outcomes: ys,
        matrix,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FanoReport {
    pub entropy_x: f64,
    pub mutual_information: f64,
    pub anonymity_set_size: usize,
    pub lower_bound_pe: f64,
    /// The raw bound was negative and has been clamped to zero.
    pub clamped: bool,
}

/// `P_e >= (H(X) - I(X;Y) - 1) / log |Theta|`, using `h(P_e) <= 1`.
pub fn fano_lower_bound(entropy_x: f64, mutual_information: f64, anonymity_set_size: usize) -> Result<FanoReport, AnonymityError> {
    if anonymity_set_size < 2 {
        return Err(AnonymityError::DegenerateSet(anonymity_set_size));
    }
    if !(entropy_x >= 0.0) {
        return Err(AnonymityError::NegativeEntropy(entropy_x));
    }
    if !(mutual_information >= 0.0 && mutual_information <= entropy_x + SUM_TOLERANCE) {
        return Err(AnonymityError::InvalidMutualInformation {
            mi: mutual_information,
            entropy: entropy_x,
        });
    }
    let raw = (entropy_x - mutual_information - 1.0) / (anonymity_set_size as f64).log2();
    Ok(FanoReport {
        entropy_x,
        mutual_information,
        anonymity_set_size,
        lower_bound_pe: raw.clamp(0.0, 1.0),
        clamped: raw < 0.0,
    })
}

/// Bound for a uniform prior over `nodes` candidates with no leakage: the
/// adversary must pick among the `nodes - 1` others.
pub fn uniform_fano(nodes: usize) -> Result<FanoReport, AnonymityError> {
    fano_lower_bound((nodes as f64).log2(), 0.0, nodes.saturating_sub(1))
}

/// Nodes online at every tick whose time lies in `[start, end]`.
pub fn stable_core_reduction<T: Ord + Clone>(online: &[(f64, BTreeSet<T>)], start: f64, end: f64) -> Result<BTreeSet<T>, AnonymityError> {
    let mut window = online.iter().filter(|(t, _)| *t >= start && *t <= end);
    let (_, first) = window.next().ok_or(AnonymityError::EmptyWindow)?;
    Ok(window.fold(first.clone(), |acc, (_, s)| acc.intersection(s).cloned().collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthLeakage {
    pub hop_counts: Vec<usize>,
    pub samples: usize,
    pub entropy_x: f64,
    pub mi_naive: f64,
    pub mi_padded: f64,
}

/// Sends `per_length` direct onions for each route length in `hop_counts`
/// from one sender, captures the sender's outgoing segments, and estimates
/// I(hops; payload size) in naive and padded mode. Transport padding is
/// disabled so that only the onion format can leak.
pub fn length_leakage_demo(config: &SimConfig, hop_counts: &[usize], per_length: usize) -> Result<LengthLeakage, AnonymityError> {
    let run = |mode: OnionMode| -> Result<Vec<(usize, usize)>, AnonymityError> {
        let mut sim = build_network(SimConfig {
            transport_padding: false,
            ack_probability: 0.0,
            retransmission_probability: 0.0,
            background_flows: 0,
            ..config.clone()
        })?;
        let sender: NodeAddr = sim.addresses()[0];
        let mut sent = Vec::new();
        for i in 0..per_length * hop_counts.len() {
            let hops = hop_counts[i % hop_counts.len()];
            sim.send_direct_onion(sender, hops, b"probe", mode, 1)?;
            sent.push(hops);
            let t = sim.now() + 0.001;
            sim.run(t);
        }
        let t = sim.now() + 5.0;
        sim.run(t);
        let trace = sim.capture(&[sender])?;
        let sizes: Vec<usize> = trace
            .records
            .iter()
            .filter(|r| r.src_ip == sender && r.payload_size > 0)
            .map(|r| r.payload_size)
            .collect();
        debug_assert_eq!(sizes.len(), sent.len());
        Ok(sent.into_iter().zip(sizes).collect())
    };
    let naive = run(OnionMode::Naive)?;
    let padded = run(OnionMode::Padded {
        cell_size: config.cell_size,
    })?;
    let joint_naive = estimate_joint_from_samples(&naive)?;
    let joint_padded = estimate_joint_from_samples(&padded)?;
    Ok(LengthLeakage {
        hop_counts: hop_counts.to_vec(),
        samples: naive.len(),
        entropy_x: plugin_entropy(&joint_naive.marginal_x()),
        mi_naive: plugin_mi(&joint_naive),
        mi_padded: plugin_mi(&joint_padded),
    })
}
