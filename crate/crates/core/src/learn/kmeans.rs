use super::LearnError;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const KMEANS_TOLERANCE: f64 = 1e-6;
pub const KMEANS_MAX_ITER: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansModel {
    pub k: usize,
    pub centers: Vec<Vec<f64>>,
    /// Within-cluster sum of squared Euclidean distances.
    pub wcss: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl KMeansModel {
    pub fn assign(&self, point: &[f64]) -> usize {
        nearest(&self.centers, point).0
    }

    pub fn cluster_sizes(&self, points: &[Vec<f64>]) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for p in points {
            sizes[self.assign(p)] += 1;
        }
        sizes
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centers: &[Vec<f64>], p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = dist2(c, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn check(points: &[Vec<f64>], k: usize) -> Result<(), LearnError> {
    if k == 0 || points.is_empty() {
        return Err(LearnError::TooFewSamples {
            needed: k.max(1),
            got: points.len(),
        });
    }
    if k > points.len() {
        return Err(LearnError::KTooLarge { k, n: points.len() });
    }
    let d = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != d) {
        return Err(LearnError::ShapeMismatch {
            expected: d,
            got: p.len(),
        });
    }
    Ok(())
}

fn plus_plus<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        centers.push(points[pick].clone());
        let c = centers.last().expect("just pushed");
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, c));
        }
    }
    centers
}

/// Lloyd iterations from the given centers. Returns the lowest-WCSS state seen.
pub fn kmeans_fit_from(points: &[Vec<f64>], init: Vec<Vec<f64>>, seed: u64) -> Result<KMeansModel, LearnError> {
    let k = init.len();
    check(points, k)?;
    let dim = points[0].len();
    let mut centers = init;
    let mut best: Option<KMeansModel> = None;
    for iteration in 0..=KMEANS_MAX_ITER {
        let mut assign = Vec::with_capacity(points.len());
        let mut wcss = 0.0;
        for p in points {
            let (c, d) = nearest(&centers, p);
            assign.push((c, d));
            wcss += d;
        }
        if best.as_ref().is_none_or(|b| wcss < b.wcss) {
            best = Some(KMeansModel {
                k,
                centers: centers.clone(),
                wcss,
                iterations: iteration,
                seed,
            });
        }
        if iteration == KMEANS_MAX_ITER {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &(c, _)) in points.iter().zip(&assign) {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut next = Vec::with_capacity(k);
        for (sum, n) in sums.into_iter().zip(&counts) {
            if *n == 0 {
                // Reseed an empty cluster at the worst-served point.
                let far = assign
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
                    .map(|(i, _)| i)
                    .expect("points nonempty");
                assign[far].1 = 0.0;
                next.push(points[far].clone());
            } else {
                next.push(sum.into_iter().map(|s| s / *n as f64).collect::<Vec<f64>>());
            }
        }
        let shift = centers
            .iter()
            .zip(&next)
            .map(|(a, b)| dist2(a, b).sqrt())
            .fold(0.0, f64::max);
        centers = next;
        if shift < KMEANS_TOLERANCE {
            let wcss: f64 = points.iter().map(|p| nearest(&centers, p).1).sum();
            if wcss < best.as_ref().expect("set above").wcss {
                best = Some(KMeansModel {
                    k,
                    centers,
                    wcss,
                    iterations: iteration + 1,
                    seed,
                });
            }
            break;
        }
    }
    Ok(best.expect("at least one iteration"))
}

/// k-means++ seeding followed by Lloyd's algorithm.
pub fn kmeans_fit<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Result<KMeansModel, LearnError> {
    check(points, k)?;
    let seed = rng.random();
    let init = plus_plus(points, k, rng);
    kmeans_fit_from(points, init, seed)
}

/// Best-of-`restarts` WCSS for every k in `ks` (ascending). Each k also tries
/// the previous k's best centers plus the worst-served point, which keeps the
/// curve non-increasing.
pub fn elbow_scan<R: Rng + ?Sized>(
    points: &[Vec<f64>],
    ks: std::ops::RangeInclusive<usize>,
    restarts: usize,
    rng: &mut R,
) -> Result<Vec<KMeansModel>, LearnError> {
    let mut out: Vec<KMeansModel> = Vec::new();
    for k in ks {
        check(points, k)?;
        let mut best: Option<KMeansModel> = None;
        for _ in 0..restarts.max(1) {
            let m = kmeans_fit(points, k, rng)?;
            if best.as_ref().is_none_or(|b| m.wcss < b.wcss) {
                best = Some(m);
            }
        }
        if let Some(prev) = out.last().filter(|p| p.k + 1 == k) {
            let far = points
                .iter()
                .max_by(|a, b| nearest(&prev.centers, a).1.total_cmp(&nearest(&prev.centers, b).1))
                .expect("points nonempty");
            let mut init = prev.centers.clone();
            init.push(far.clone());
            let warm = kmeans_fit_from(points, init, prev.seed)?;
            if warm.wcss < best.as_ref().expect("restarts >= 1").wcss {
                best = Some(warm);
            }
        }
        out.push(best.expect("restarts >= 1"));
    }
    Ok(out)
}

/// `(W3 - W4) / (W4 - W5)` from an elbow scan covering k = 3..=5.
pub fn elbow_ratio(scan: &[KMeansModel]) -> Option<f64> {
    let w = |k: usize| scan.iter().find(|m| m.k == k).map(|m| m.wcss);
    let (w3, w4, w5) = (w(3)?, w(4)?, w(5)?);
    Some((w3 - w4) / (w4 - w5))
}
