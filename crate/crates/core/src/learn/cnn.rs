//! Two-block 1D CNN: conv(k=3, same) -> batch norm -> ReLU -> max-pool(2),
//! twice, then global average pooling and a dense head. Activations are
//! stored flat as `[batch][channel][position]`.

use super::{LearnError, Normalization};
use crate::trace::FeatureSet;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

const K: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnArch {
    pub input_len: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub kernel: usize,
    /// 1 for a sigmoid head, otherwise the number of softmax classes.
    pub outputs: usize,
}

impl CnnArch {
    pub fn new(input_len: usize, conv1_filters: usize, conv2_filters: usize, classes: usize) -> Result<Self, LearnError> {
        if input_len < 4 {
            return Err(LearnError::ShapeMismatch {
                expected: 4,
                got: input_len,
            });
        }
        if classes < 2 {
            return Err(LearnError::SingleClass);
        }
        Ok(CnnArch {
            input_len,
            conv1_filters,
            conv2_filters,
            kernel: K,
            outputs: if classes == 2 { 1 } else { classes },
        })
    }

    fn l1(&self) -> usize {
        self.input_len / 2
    }

    fn l2(&self) -> usize {
        self.l1() / 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnParams {
    pub conv1: Vec<f64>,
    pub bn1_gamma: Vec<f64>,
    pub bn1_beta: Vec<f64>,
    pub conv2: Vec<f64>,
    pub bn2_gamma: Vec<f64>,
    pub bn2_beta: Vec<f64>,
    pub dense_w: Vec<f64>,
    pub dense_b: Vec<f64>,
}

pub(crate) const GROUP_NAMES: [&str; 8] = [
    "conv1", "bn1_gamma", "bn1_beta", "conv2", "bn2_gamma", "bn2_beta", "dense_w", "dense_b",
];

impl CnnParams {
    fn zeros(a: &CnnArch) -> Self {
        let (c1, c2) = (a.conv1_filters, a.conv2_filters);
        CnnParams {
            conv1: vec![0.0; c1 * K],
            bn1_gamma: vec![0.0; c1],
            bn1_beta: vec![0.0; c1],
            conv2: vec![0.0; c2 * c1 * K],
            bn2_gamma: vec![0.0; c2],
            bn2_beta: vec![0.0; c2],
            dense_w: vec![0.0; a.outputs * c2],
            dense_b: vec![0.0; a.outputs],
        }
    }

    pub(crate) fn groups(&self) -> [&Vec<f64>; 8] {
        [
            &self.conv1,
            &self.bn1_gamma,
            &self.bn1_beta,
            &self.conv2,
            &self.bn2_gamma,
            &self.bn2_beta,
            &self.dense_w,
            &self.dense_b,
        ]
    }

    pub(crate) fn groups_mut(&mut self) -> [&mut Vec<f64>; 8] {
        [
            &mut self.conv1,
            &mut self.bn1_gamma,
            &mut self.bn1_beta,
            &mut self.conv2,
            &mut self.bn2_gamma,
            &mut self.bn2_beta,
            &mut self.dense_w,
            &mut self.dense_b,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnRunning {
    pub mean1: Vec<f64>,
    pub var1: Vec<f64>,
    pub mean2: Vec<f64>,
    pub var2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnModel {
    pub arch: CnnArch,
    /// Class ids in output order; for a sigmoid head the unit predicts `classes[1]`.
    pub classes: Vec<u8>,
    pub features: FeatureSet,
    pub normalization: Normalization,
    pub params: CnnParams,
    pub running: BnRunning,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    pub seed: u64,
}

/// Values kept from a training-mode forward pass for backpropagation.
pub(crate) struct Cache {
    batch: usize,
    x: Vec<f64>,
    xhat1: Vec<f64>,
    invstd1: Vec<f64>,
    relu1: Vec<f64>,
    pool1: Vec<f64>,
    arg1: Vec<usize>,
    xhat2: Vec<f64>,
    invstd2: Vec<f64>,
    relu2: Vec<f64>,
    arg2: Vec<usize>,
    gap: Vec<f64>,
    pub(crate) mean1: Vec<f64>,
    pub(crate) var1: Vec<f64>,
    pub(crate) mean2: Vec<f64>,
    pub(crate) var2: Vec<f64>,
    pub(crate) logits: Vec<f64>,
}

fn conv_forward(x: &[f64], b: usize, cin: usize, l: usize, w: &[f64], cout: usize) -> Vec<f64> {
    let mut z = vec![0.0; b * cout * l];
    for s in 0..b {
        let xs = &x[s * cin * l..(s + 1) * cin * l];
        for o in 0..cout {
            let zr = &mut z[(s * cout + o) * l..(s * cout + o + 1) * l];
            for i in 0..cin {
                let xr = &xs[i * l..(i + 1) * l];
                let wk = &w[(o * cin + i) * K..(o * cin + i + 1) * K];
                for (zv, xv) in zr[1..].iter_mut().zip(&xr[..l - 1]) {
                    *zv += wk[0] * xv;
                }
                for (zv, xv) in zr.iter_mut().zip(xr) {
                    *zv += wk[1] * xv;
                }
                for (zv, xv) in zr[..l - 1].iter_mut().zip(&xr[1..]) {
                    *zv += wk[2] * xv;
                }
            }
        }
    }
    z
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    dz: &[f64],
    b: usize,
    cin: usize,
    l: usize,
    w: &[f64],
    cout: usize,
    dw: &mut [f64],
    mut dx: Option<&mut [f64]>,
) {
    for s in 0..b {
        let xs = &x[s * cin * l..(s + 1) * cin * l];
        for o in 0..cout {
            let dr = &dz[(s * cout + o) * l..(s * cout + o + 1) * l];
            for i in 0..cin {
                let xr = &xs[i * l..(i + 1) * l];
                let base = (o * cin + i) * K;
                dw[base] += dot(&dr[1..], &xr[..l - 1]);
                dw[base + 1] += dot(dr, xr);
                dw[base + 2] += dot(&dr[..l - 1], &xr[1..]);
                if let Some(dx) = dx.as_deref_mut() {
                    let wk = &w[base..base + K];
                    let dxr = &mut dx[(s * cin + i) * l..(s * cin + i + 1) * l];
                    for (d, g) in dxr[..l - 1].iter_mut().zip(&dr[1..]) {
                        *d += wk[0] * g;
                    }
                    for (d, g) in dxr.iter_mut().zip(dr) {
                        *d += wk[1] * g;
                    }
                    for (d, g) in dxr[1..].iter_mut().zip(&dr[..l - 1]) {
                        *d += wk[2] * g;
                    }
                }
            }
        }
    }
}

fn channel_stats(z: &[f64], b: usize, c: usize, l: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (b * l) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for s in 0..b {
        for ch in 0..c {
            mean[ch] += z[(s * c + ch) * l..(s * c + ch + 1) * l].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for s in 0..b {
        for ch in 0..c {
            let m = mean[ch];
            var[ch] += z[(s * c + ch) * l..(s * c + ch + 1) * l]
                .iter()
                .map(|v| (v - m) * (v - m))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

/// Normalizes `z` in place to x-hat and returns `gamma * xhat + beta`.
#[allow(clippy::too_many_arguments)]
fn bn_apply(z: &mut [f64], b: usize, c: usize, l: usize, mean: &[f64], var: &[f64], eps: f64, gamma: &[f64], beta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut y = vec![0.0; z.len()];
    for s in 0..b {
        for ch in 0..c {
            let r = (s * c + ch) * l..(s * c + ch + 1) * l;
            for (xh, yv) in z[r.clone()].iter_mut().zip(&mut y[r]) {
                *xh = (*xh - mean[ch]) * invstd[ch];
                *yv = gamma[ch] * *xh + beta[ch];
            }
        }
    }
    (y, invstd)
}

#[allow(clippy::too_many_arguments)]
fn bn_backward(dy: &[f64], xhat: &[f64], invstd: &[f64], b: usize, c: usize, l: usize, gamma: &[f64], dgamma: &mut [f64], dbeta: &mut [f64]) -> Vec<f64> {
    let n = (b * l) as f64;
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    for s in 0..b {
        for ch in 0..c {
            let r = (s * c + ch) * l..(s * c + ch + 1) * l;
            sum_dy[ch] += dy[r.clone()].iter().sum::<f64>();
            sum_dy_xhat[ch] += dot(&dy[r.clone()], &xhat[r]);
        }
    }
    for ch in 0..c {
        dgamma[ch] += sum_dy_xhat[ch];
        dbeta[ch] += sum_dy[ch];
    }
    let mut dz = vec![0.0; dy.len()];
    for s in 0..b {
        for ch in 0..c {
            let r = (s * c + ch) * l..(s * c + ch + 1) * l;
            let k = gamma[ch] * invstd[ch] / n;
            for ((d, g), xh) in dz[r.clone()].iter_mut().zip(&dy[r.clone()]).zip(&xhat[r]) {
                *d = k * (n * g - sum_dy[ch] - xh * sum_dy_xhat[ch]);
            }
        }
    }
    dz
}

fn relu(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

/// Max-pool of width 2; an odd trailing element is dropped.
fn pool_forward(x: &[f64], rows: usize, l: usize) -> (Vec<f64>, Vec<usize>) {
    let lo = l / 2;
    let mut out = Vec::with_capacity(rows * lo);
    let mut arg = Vec::with_capacity(rows * lo);
    for r in 0..rows {
        for j in 0..lo {
            let i = r * l + 2 * j;
            let pick = if x[i + 1] > x[i] { i + 1 } else { i };
            out.push(x[pick]);
            arg.push(pick);
        }
    }
    (out, arg)
}

fn pool_backward(d: &[f64], arg: &[usize], len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; len];
    for (g, &i) in d.iter().zip(arg) {
        dx[i] += g;
    }
    dx
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl CnnModel {
    pub fn init<R: Rng + ?Sized>(arch: CnnArch, classes: Vec<u8>, features: FeatureSet, normalization: Normalization, seed: u64, rng: &mut R) -> Self {
        let mut params = CnnParams::zeros(&arch);
        let mut he = |v: &mut Vec<f64>, fan_in: usize| {
            let n = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            v.iter_mut().for_each(|x| *x = n.sample(rng));
        };
        he(&mut params.conv1, K);
        he(&mut params.conv2, arch.conv1_filters * K);
        he(&mut params.dense_w, arch.conv2_filters);
        params.bn1_gamma.fill(1.0);
        params.bn2_gamma.fill(1.0);
        CnnModel {
            arch,
            classes,
            features,
            normalization,
            params,
            running: BnRunning {
                mean1: vec![0.0; arch.conv1_filters],
                var1: vec![1.0; arch.conv1_filters],
                mean2: vec![0.0; arch.conv2_filters],
                var2: vec![1.0; arch.conv2_filters],
            },
            bn_momentum: 0.9,
            bn_epsilon: 1e-5,
            seed,
        }
    }

    fn forward(&self, x: &[f64], b: usize, train: bool) -> Cache {
        let a = &self.arch;
        let p = &self.params;
        let (l, c1, c2) = (a.input_len, a.conv1_filters, a.conv2_filters);
        let (l1, l2) = (a.l1(), a.l2());
        let eps = self.bn_epsilon;

        let mut z1 = conv_forward(x, b, 1, l, &p.conv1, c1);
        let (mean1, var1) = if train {
            channel_stats(&z1, b, c1, l)
        } else {
            (self.running.mean1.clone(), self.running.var1.clone())
        };
        let (mut relu1, invstd1) = bn_apply(&mut z1, b, c1, l, &mean1, &var1, eps, &p.bn1_gamma, &p.bn1_beta);
        relu(&mut relu1);
        let (pool1, arg1) = pool_forward(&relu1, b * c1, l);

        let mut z2 = conv_forward(&pool1, b, c1, l1, &p.conv2, c2);
        let (mean2, var2) = if train {
            channel_stats(&z2, b, c2, l1)
        } else {
            (self.running.mean2.clone(), self.running.var2.clone())
        };
        let (mut relu2, invstd2) = bn_apply(&mut z2, b, c2, l1, &mean2, &var2, eps, &p.bn2_gamma, &p.bn2_beta);
        relu(&mut relu2);
        let (pool2, arg2) = pool_forward(&relu2, b * c2, l1);

        let gap: Vec<f64> = pool2.chunks(l2).map(|r| r.iter().sum::<f64>() / l2 as f64).collect();
        let mut logits = Vec::with_capacity(b * a.outputs);
        for g in gap.chunks(c2) {
            for o in 0..a.outputs {
                logits.push(p.dense_b[o] + dot(&p.dense_w[o * c2..(o + 1) * c2], g));
            }
        }
        Cache {
            batch: b,
            x: x.to_vec(),
            xhat1: z1,
            invstd1,
            relu1,
            pool1,
            arg1,
            xhat2: z2,
            invstd2,
            relu2,
            arg2,
            gap,
            mean1,
            var1,
            mean2,
            var2,
            logits,
        }
    }

    /// Mean cross-entropy and d(loss)/d(logits). `targets` are output indices.
    pub(crate) fn loss(&self, logits: &[f64], targets: &[usize]) -> (f64, Vec<f64>) {
        let o = self.arch.outputs;
        let b = targets.len() as f64;
        let mut loss = 0.0;
        let mut d = vec![0.0; logits.len()];
        if o == 1 {
            for (i, (&z, &t)) in logits.iter().zip(targets).enumerate() {
                let y = t as f64;
                loss += softplus(z) - y * z;
                d[i] = (sigmoid(z) - y) / b;
            }
        } else {
            for (s, (row, &t)) in logits.chunks(o).zip(targets).enumerate() {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
                loss += lse - row[t];
                for (j, z) in row.iter().enumerate() {
                    d[s * o + j] = ((z - lse).exp() - if j == t { 1.0 } else { 0.0 }) / b;
                }
            }
        }
        (loss / b, d)
    }

    fn backward(&self, cache: &Cache, dlogits: &[f64]) -> CnnParams {
        let a = &self.arch;
        let p = &self.params;
        let b = cache.batch;
        let (l, c1, c2, o) = (a.input_len, a.conv1_filters, a.conv2_filters, a.outputs);
        let (l1, l2) = (a.l1(), a.l2());
        let mut g = CnnParams::zeros(a);

        let mut dgap = vec![0.0; b * c2];
        for s in 0..b {
            let gs = &cache.gap[s * c2..(s + 1) * c2];
            for k in 0..o {
                let dl = dlogits[s * o + k];
                g.dense_b[k] += dl;
                for c in 0..c2 {
                    g.dense_w[k * c2 + c] += dl * gs[c];
                    dgap[s * c2 + c] += dl * p.dense_w[k * c2 + c];
                }
            }
        }
        let dpool2: Vec<f64> = dgap.iter().flat_map(|&d| std::iter::repeat_n(d / l2 as f64, l2)).collect();
        let mut dy2 = pool_backward(&dpool2, &cache.arg2, b * c2 * l1);
        for (d, r) in dy2.iter_mut().zip(&cache.relu2) {
            if *r <= 0.0 {
                *d = 0.0;
            }
        }
        let dz2 = bn_backward(&dy2, &cache.xhat2, &cache.invstd2, b, c2, l1, &p.bn2_gamma, &mut g.bn2_gamma, &mut g.bn2_beta);
        let mut dpool1 = vec![0.0; b * c1 * l1];
        conv_backward(&cache.pool1, &dz2, b, c1, l1, &p.conv2, c2, &mut g.conv2, Some(&mut dpool1));
        let mut dy1 = pool_backward(&dpool1, &cache.arg1, b * c1 * l);
        for (d, r) in dy1.iter_mut().zip(&cache.relu1) {
            if *r <= 0.0 {
                *d = 0.0;
            }
        }
        let dz1 = bn_backward(&dy1, &cache.xhat1, &cache.invstd1, b, c1, l, &p.bn1_gamma, &mut g.bn1_gamma, &mut g.bn1_beta);
        conv_backward(&cache.x, &dz1, b, 1, l, &p.conv1, c1, &mut g.conv1, None);
        g
    }

    /// Training-mode loss and gradients on one batch.
    pub(crate) fn train_step(&self, x: &[f64], targets: &[usize]) -> (f64, CnnParams, Cache) {
        let cache = self.forward(x, targets.len(), true);
        let (loss, d) = self.loss(&cache.logits, targets);
        let grads = self.backward(&cache, &d);
        (loss, grads, cache)
    }

    pub(crate) fn update_running(&mut self, cache: &Cache) {
        let m = self.bn_momentum;
        let blend = |run: &mut Vec<f64>, batch: &[f64]| {
            for (r, v) in run.iter_mut().zip(batch) {
                *r = m * *r + (1.0 - m) * v;
            }
        };
        blend(&mut self.running.mean1, &cache.mean1);
        blend(&mut self.running.var1, &cache.var1);
        blend(&mut self.running.mean2, &cache.mean2);
        blend(&mut self.running.var2, &cache.var2);
    }

    /// Inference-mode logits for normalized inputs, flat `[batch][outputs]`.
    pub(crate) fn logits(&self, x: &[f64], b: usize) -> Vec<f64> {
        self.forward(x, b, false).logits
    }

    /// Class probabilities for raw (unnormalized) feature vectors, one row
    /// per vector in `classes` order.
    pub fn predict_proba(&self, vectors: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, LearnError> {
        let mut out = Vec::with_capacity(vectors.len());
        for chunk in vectors.chunks(256) {
            let x = self.prepare(chunk)?;
            for row in self.logits(&x, chunk.len()).chunks(self.arch.outputs) {
                out.push(self.probabilities(row));
            }
        }
        Ok(out)
    }

    pub(crate) fn probabilities(&self, row: &[f64]) -> Vec<f64> {
        if row.len() == 1 {
            let p = sigmoid(row[0]);
            vec![1.0 - p, p]
        } else {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        }
    }

    /// Output index predicted from one row of logits.
    pub(crate) fn decide(&self, row: &[f64]) -> usize {
        if row.len() == 1 {
            usize::from(sigmoid(row[0]) >= 0.5)
        } else {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        }
    }

    /// Normalizes and flattens raw vectors.
    pub(crate) fn prepare(&self, vectors: &[Vec<f64>]) -> Result<Vec<f64>, LearnError> {
        let mut x = Vec::with_capacity(vectors.len() * self.arch.input_len);
        for v in vectors {
            if v.len() != self.arch.input_len {
                return Err(LearnError::ShapeMismatch {
                    expected: self.arch.input_len,
                    got: v.len(),
                });
            }
            x.extend(self.normalization.apply(v));
        }
        Ok(x)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, LearnError> {
        serde_json::from_str(text).map_err(|e| LearnError::Checkpoint(e.to_string()))
    }
}

/// Relative error `|g_a - g_n| / max(|g_a| + |g_n|, tiny)` per parameter group
/// between backprop and central finite differences of the training-mode loss.
pub fn gradient_check(model: &CnnModel, x: &[f64], targets: &[usize], step: f64) -> Vec<(&'static str, f64)> {
    let (_, analytic, _) = model.train_step(x, targets);
    let loss_at = |m: &CnnModel| {
        let c = m.forward(x, targets.len(), true);
        m.loss(&c.logits, targets).0
    };
    let mut probe = model.clone();
    let mut out = Vec::new();
    for (gi, name) in GROUP_NAMES.iter().enumerate() {
        let len = model.params.groups()[gi].len();
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for j in 0..len {
            let orig = probe.params.groups()[gi][j];
            probe.params.groups_mut()[gi][j] = orig + step;
            let up = loss_at(&probe);
            probe.params.groups_mut()[gi][j] = orig - step;
            let down = loss_at(&probe);
            probe.params.groups_mut()[gi][j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.groups()[gi][j];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        out.push((*name, diff2.sqrt() / (a2.sqrt() + n2.sqrt()).max(1e-300)));
    }
    out
}
