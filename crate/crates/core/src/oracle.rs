//! Naive reference implementations used as ground truth in tests.
//!
//! Everything here is written as explicit loops over plain `f64` buffers and
//! deliberately shares no code with the tensor, attention or metrics modules.
//! Attention follows the same index reading as production: row `j` of an
//! attention map is a softmax over sources `i`, and output `j` is
//! `gate * sum_i s[j][i] * value_i + input_j`.

/// Absolute-or-relative closeness test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleTolerance {
    pub absolute: f64,
    pub relative: f64,
}

impl OracleTolerance {
    pub fn new(absolute: f64, relative: f64) -> Self {
        assert!(absolute >= 0.0 && relative >= 0.0, "tolerances must be non-negative");
        OracleTolerance { absolute, relative }
    }

    pub fn close(&self, a: f64, b: f64) -> bool {
        let diff = (a - b).abs();
        diff <= self.absolute || diff <= self.relative * a.abs().max(b.abs())
    }

    /// Index and values of the first disagreeing pair, if any.
    pub fn first_mismatch(&self, a: &[f64], b: &[f64]) -> Option<(usize, f64, f64)> {
        if a.len() != b.len() {
            return Some((a.len().min(b.len()), f64::NAN, f64::NAN));
        }
        a.iter().zip(b).enumerate().find(|(_, (x, y))| !self.close(**x, **y)).map(|(i, (x, y))| (i, *x, *y))
    }
}

/// `(n, c, h, w)` values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "feature map size");
        FeatureMap { n, c, h, w, data }
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        FeatureMap { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    fn idx(&self, b: usize, ch: usize, y: usize, x: usize) -> usize {
        ((b * self.c + ch) * self.h + y) * self.w + x
    }

    pub fn get(&self, b: usize, ch: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(b, ch, y, x)]
    }

    fn set(&mut self, b: usize, ch: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(b, ch, y, x);
        self.data[i] = v;
    }

    /// Value at flattened spatial position `p = y * w + x`.
    fn pos(&self, b: usize, ch: usize, p: usize) -> f64 {
        self.get(b, ch, p / self.w, p % self.w)
    }
}

/// Convolution weights `(out, in, k, k)` with optional bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl ConvSpec {
    pub fn apply(&self, x: &FeatureMap) -> FeatureMap {
        assert_eq!(x.c, self.in_channels, "conv input channels");
        let k = self.kernel;
        let oh = (x.h + 2 * self.padding - k) / self.stride + 1;
        let ow = (x.w + 2 * self.padding - k) / self.stride + 1;
        let mut out = FeatureMap::zeros(x.n, self.out_channels, oh, ow);
        for b in 0..x.n {
            for o in 0..self.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = self.bias.as_ref().map_or(0.0, |bias| bias[o]);
                        for i in 0..self.in_channels {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let y = (oy * self.stride + ky) as isize - self.padding as isize;
                                    let xx = (ox * self.stride + kx) as isize - self.padding as isize;
                                    if y < 0 || xx < 0 || y >= x.h as isize || xx >= x.w as isize {
                                        continue;
                                    }
                                    let wv = self.weight[((o * self.in_channels + i) * k + ky) * k + kx];
                                    acc += wv * x.get(b, i, y as usize, xx as usize);
                                }
                            }
                        }
                        out.set(b, o, oy, ox, acc);
                    }
                }
            }
        }
        out
    }
}

/// Batch normalization parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormSpec {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
}

impl NormSpec {
    /// Normalizes with batch statistics (biased variance) when `training`, running statistics otherwise.
    pub fn apply(&self, x: &FeatureMap, training: bool) -> FeatureMap {
        let mut out = x.clone();
        let count = (x.n * x.h * x.w) as f64;
        for ch in 0..x.c {
            let (mean, var) = if training {
                let mut sum = 0.0;
                for b in 0..x.n {
                    for y in 0..x.h {
                        for xx in 0..x.w {
                            sum += x.get(b, ch, y, xx);
                        }
                    }
                }
                let mean = sum / count;
                let mut sq = 0.0;
                for b in 0..x.n {
                    for y in 0..x.h {
                        for xx in 0..x.w {
                            sq += (x.get(b, ch, y, xx) - mean).powi(2);
                        }
                    }
                }
                (mean, sq / count)
            } else {
                (self.running_mean[ch], self.running_var[ch])
            };
            for b in 0..x.n {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        let v = (x.get(b, ch, y, xx) - mean) / (var + self.eps).sqrt() * self.gamma[ch] + self.beta[ch];
                        out.set(b, ch, y, xx, v);
                    }
                }
            }
        }
        out
    }
}

fn relu(mut x: FeatureMap) -> FeatureMap {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    x
}

/// Convolution (bias-free), batch norm, ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNormSpec {
    pub conv: ConvSpec,
    pub norm: NormSpec,
}

impl ConvNormSpec {
    pub fn apply(&self, x: &FeatureMap, training: bool) -> FeatureMap {
        relu(self.norm.apply(&self.conv.apply(x), training))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionSpec {
    pub query: ConvSpec,
    pub key: ConvSpec,
    pub value: ConvSpec,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Position,
    Channel,
}

/// Output map and attention weights `(n, rows, rows)` flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult {
    pub output: FeatureMap,
    pub attention: Vec<f64>,
}

/// Position attention: `s[j][i] = exp(C_j . B_i) / sum_i exp(C_j . B_i)` with
/// `B` = query and `C` = key projections; `E_j = alpha * sum_i s[j][i] D_i + A_j`.
pub fn position_attention(a: &FeatureMap, spec: &PositionSpec) -> AttentionResult {
    let q = spec.query.apply(a);
    let k = spec.key.apply(a);
    let v = spec.value.apply(a);
    let big_n = a.h * a.w;
    let mut attention = vec![0.0; a.n * big_n * big_n];
    let mut output = a.clone();
    for b in 0..a.n {
        for j in 0..big_n {
            let mut logits = vec![0.0; big_n];
            for (i, logit) in logits.iter_mut().enumerate() {
                for ch in 0..q.c {
                    *logit += k.pos(b, ch, j) * q.pos(b, ch, i);
                }
            }
            let row = softmax(&logits);
            for ch in 0..a.c {
                let mut acc = 0.0;
                for (i, s) in row.iter().enumerate() {
                    acc += s * v.pos(b, ch, i);
                }
                let (y, x) = (j / a.w, j % a.w);
                output.set(b, ch, y, x, spec.alpha * acc + a.get(b, ch, y, x));
            }
            attention[(b * big_n + j) * big_n..(b * big_n + j + 1) * big_n].copy_from_slice(&row);
        }
    }
    AttentionResult { output, attention }
}

/// Channel attention: `x[j][i] = softmax_i(A_j . A_i)`, `E_j = beta * sum_i x[j][i] A_i + A_j`.
pub fn channel_attention(a: &FeatureMap, beta: f64) -> AttentionResult {
    let c = a.c;
    let positions = a.h * a.w;
    let mut attention = vec![0.0; a.n * c * c];
    let mut output = a.clone();
    for b in 0..a.n {
        for j in 0..c {
            let mut logits = vec![0.0; c];
            for (i, logit) in logits.iter_mut().enumerate() {
                for p in 0..positions {
                    *logit += a.pos(b, j, p) * a.pos(b, i, p);
                }
            }
            let row = softmax(&logits);
            for p in 0..positions {
                let mut acc = 0.0;
                for (i, s) in row.iter().enumerate() {
                    acc += s * a.pos(b, i, p);
                }
                let (y, x) = (p / a.w, p % a.w);
                output.set(b, j, y, x, beta * acc + a.get(b, j, y, x));
            }
            attention[(b * c + j) * c..(b * c + j + 1) * c].copy_from_slice(&row);
        }
    }
    AttentionResult { output, attention }
}

/// Dispatches to [`position_attention`] or [`channel_attention`]; `gate` is
/// the channel gate, and the position gate comes from `position`.
pub fn attention(a: &FeatureMap, kind: AttentionKind, position: Option<&PositionSpec>, gate: f64) -> AttentionResult {
    match kind {
        AttentionKind::Position => position_attention(a, position.expect("position attention needs its projections")),
        AttentionKind::Channel => channel_attention(a, gate),
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaBlockSpec {
    pub position_in: ConvNormSpec,
    pub position: PositionSpec,
    pub position_out: ConvNormSpec,
    pub channel_in: ConvNormSpec,
    pub beta: f64,
    pub channel_out: ConvNormSpec,
    pub fuse: ConvSpec,
}

/// Both branches, summed, then the fusing convolution.
pub fn da_block(a: &FeatureMap, spec: &DaBlockSpec, training: bool) -> FeatureMap {
    let p = spec.position_in.apply(a, training);
    let p = spec.position_out.apply(&position_attention(&p, &spec.position).output, training);
    let c = spec.channel_in.apply(a, training);
    let c = spec.channel_out.apply(&channel_attention(&c, spec.beta).output, training);
    let mut sum = p.clone();
    for (s, v) in sum.data.iter_mut().zip(&c.data) {
        *s += v;
    }
    spec.fuse.apply(&sum)
}

/// Affine map with weight stored `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineSpec {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AffineSpec {
    fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| self.bias[o] + (0..self.inputs).map(|i| row[i] * self.weight[i * self.outputs + o]).sum::<f64>())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerSpec {
    pub heads: usize,
    pub attn_norm: (Vec<f64>, Vec<f64>),
    pub query: AffineSpec,
    pub key: AffineSpec,
    pub value: AffineSpec,
    pub out: AffineSpec,
    pub mlp_norm: (Vec<f64>, Vec<f64>),
    pub fc1: AffineSpec,
    pub fc2: AffineSpec,
    pub eps: f64,
}

fn layer_norm_row(row: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    row.iter().enumerate().map(|(i, v)| (v - mean) / (var + eps).sqrt() * gamma[i] + beta[i]).collect()
}

/// One pre-norm encoder layer on a `(t, d)` token matrix, head by head.
/// Returns the new tokens and the `(heads, t, t)` attention weights.
pub fn transformer_layer(tokens: &[Vec<f64>], spec: &TransformerSpec) -> (Vec<Vec<f64>>, Vec<f64>) {
    let t = tokens.len();
    let d = tokens[0].len();
    let dh = d / spec.heads;
    let normed: Vec<Vec<f64>> =
        tokens.iter().map(|r| layer_norm_row(r, &spec.attn_norm.0, &spec.attn_norm.1, spec.eps)).collect();
    let q: Vec<Vec<f64>> = normed.iter().map(|r| spec.query.apply_row(r)).collect();
    let k: Vec<Vec<f64>> = normed.iter().map(|r| spec.key.apply_row(r)).collect();
    let v: Vec<Vec<f64>> = normed.iter().map(|r| spec.value.apply_row(r)).collect();
    let mut mixed = vec![vec![0.0; d]; t];
    let mut weights = vec![0.0; spec.heads * t * t];
    for h in 0..spec.heads {
        for i in 0..t {
            let logits: Vec<f64> = (0..t)
                .map(|j| (0..dh).map(|e| q[i][h * dh + e] * k[j][h * dh + e]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let row = softmax(&logits);
            for (j, s) in row.iter().enumerate() {
                weights[(h * t + i) * t + j] = *s;
                for e in 0..dh {
                    mixed[i][h * dh + e] += s * v[j][h * dh + e];
                }
            }
        }
    }
    let mut out = Vec::with_capacity(t);
    for i in 0..t {
        let attended = spec.out.apply_row(&mixed[i]);
        let x1: Vec<f64> = tokens[i].iter().zip(&attended).map(|(a, b)| a + b).collect();
        let n2 = layer_norm_row(&x1, &spec.mlp_norm.0, &spec.mlp_norm.1, spec.eps);
        let hidden: Vec<f64> =
            spec.fc1.apply_row(&n2).into_iter().map(|z| 0.5 * z * (1.0 + libm::erf(z / 2f64.sqrt()))).collect();
        let mlp = spec.fc2.apply_row(&hidden);
        out.push(x1.iter().zip(&mlp).map(|(a, b)| a + b).collect());
    }
    (out, weights)
}

/// Overlap counts and boundary distances by direct enumeration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsOracle {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub iou: f64,
    pub dice: f64,
    pub hd: f64,
    pub hd95: f64,
    pub sentinel: bool,
}

fn boundary_points(mask: &[bool], h: usize, w: usize) -> Vec<(f64, f64)> {
    let inside =
        |y: isize, x: isize| y >= 0 && x >= 0 && y < h as isize && x < w as isize && mask[y as usize * w + x as usize];
    let mut pts = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !inside(y, x) {
                continue;
            }
            let neighbors = [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)];
            if neighbors.iter().any(|&(ny, nx)| !inside(ny, nx)) {
                pts.push((y as f64, x as f64));
            }
        }
    }
    pts
}

fn nearest_distances(from: &[(f64, f64)], to: &[(f64, f64)]) -> Vec<f64> {
    from.iter()
        .map(|a| to.iter().map(|b| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()).fold(f64::INFINITY, f64::min))
        .collect()
}

fn percentile_95(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = 0.95 * (v.len() - 1) as f64;
    let below = rank.floor() as usize;
    let frac = rank - below as f64;
    if below + 1 < v.len() {
        v[below] * (1.0 - frac) + v[below + 1] * frac
    } else {
        v[below]
    }
}

/// Reference metrics for one binary mask pair. Both empty gives IoU = Dice = 1
/// and distance 0; exactly one empty gives the image diagonal as distance.
pub fn metrics(pred: &[bool], truth: &[bool], h: usize, w: usize) -> MetricsOracle {
    let pred_set: Vec<usize> = (0..h * w).filter(|&i| pred[i]).collect();
    let truth_set: Vec<usize> = (0..h * w).filter(|&i| truth[i]).collect();
    let tp = pred_set.iter().filter(|i| truth_set.contains(i)).count() as u64;
    let fp = pred_set.len() as u64 - tp;
    let fn_ = truth_set.len() as u64 - tp;
    let (iou, dice) = if tp + fp + fn_ == 0 {
        (1.0, 1.0)
    } else {
        (tp as f64 / (tp + fp + fn_) as f64, 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
    };
    let (hd, hd95, sentinel) = match (pred_set.is_empty(), truth_set.is_empty()) {
        (true, true) => (0.0, 0.0, false),
        (false, false) => {
            let a = boundary_points(pred, h, w);
            let b = boundary_points(truth, h, w);
            let ab = nearest_distances(&a, &b);
            let ba = nearest_distances(&b, &a);
            let max = ab.iter().chain(&ba).cloned().fold(0.0, f64::max);
            (max, percentile_95(&ab).max(percentile_95(&ba)), false)
        }
        _ => {
            let diag = ((h * h + w * w) as f64).sqrt();
            (diag, diag, true)
        }
    };
    MetricsOracle { true_pos: tp, false_pos: fp, false_neg: fn_, iou, dice, hd, hd95, sentinel }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_by_one(out: usize, inp: usize, weight: Vec<f64>) -> ConvSpec {
        ConvSpec { out_channels: out, in_channels: inp, kernel: 1, stride: 1, padding: 0, weight, bias: None }
    }

    #[test]
    fn hand_computed_position_map() {
        // One channel, 2x2 image [0, 1, 2, 3]; identity query/key/value, alpha 1.
        let a = FeatureMap::new(1, 1, 2, 2, vec![0.0, 1.0, 2.0, 3.0]);
        let id = one_by_one(1, 1, vec![1.0]);
        let spec = PositionSpec { query: id.clone(), key: id.clone(), value: id, alpha: 1.0 };
        let r = position_attention(&a, &spec);
        // Row j: softmax_i(a_j * a_i).
        for j in 0..4 {
            let logits: Vec<f64> = (0..4).map(|i| (j * i) as f64).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for (i, l) in logits.iter().enumerate() {
                assert!((r.attention[j * 4 + i] - l.exp() / z).abs() < 1e-15);
            }
        }
        // Row 0 is uniform, so output 0 = mean(a) + a_0 = 1.5.
        assert!((r.output.data[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn zero_gates_are_identity() {
        let a = FeatureMap::new(1, 2, 2, 2, (0..8).map(|v| v as f64 * 0.3).collect());
        let spec = PositionSpec {
            query: one_by_one(1, 2, vec![0.5, -0.2]),
            key: one_by_one(1, 2, vec![0.1, 0.4]),
            value: one_by_one(2, 2, vec![1.0, 2.0, 3.0, 4.0]),
            alpha: 0.0,
        };
        assert_eq!(position_attention(&a, &spec).output, a);
        assert_eq!(channel_attention(&a, 0.0).output, a);
    }

    #[test]
    fn metrics_on_small_sets() {
        let pred = [true, true, false];
        let truth = [false, true, true];
        let m = metrics(&pred, &truth, 1, 3);
        assert_eq!((m.true_pos, m.false_pos, m.false_neg), (1, 1, 1));
        assert!((m.iou - 1.0 / 3.0).abs() < 1e-15 && (m.dice - 0.5).abs() < 1e-15);
        let same = metrics(&pred, &pred, 1, 3);
        assert_eq!((same.iou, same.dice, same.hd), (1.0, 1.0, 0.0));
    }
}
