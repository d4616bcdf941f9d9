//! Overlap and boundary-distance metrics on integer label maps.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, TensorError};

/// A 2-D map of class labels in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(TensorError::ShapeMismatch {
                op: "label_map",
                lhs: vec![height, width],
                rhs: vec![labels.len()],
            }
            .into());
        }
        Ok(LabelMap { height, width, labels })
    }

    pub fn mask(&self, class: u8) -> BinaryMask {
        BinaryMask { height: self.height, width: self.width, bits: self.labels.iter().map(|&l| l == class).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Foreground pixels with at least one background 4-neighbor; outside the image counts as background.
    pub fn boundary(&self) -> BinaryMask {
        let (h, w) = (self.height, self.width);
        let at = |y: isize, x: isize| {
            y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && self.bits[y as usize * w + x as usize]
        };
        let bits = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as isize, (i % w) as isize);
                at(y, x) && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1))
            })
            .collect();
        BinaryMask { height: h, width: w, bits }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
}

impl Counts {
    pub fn is_empty(&self) -> bool {
        self.true_pos + self.false_pos + self.false_neg == 0
    }
}

impl std::ops::Add for Counts {
    type Output = Counts;
    fn add(self, o: Counts) -> Counts {
        Counts {
            true_pos: self.true_pos + o.true_pos,
            false_pos: self.false_pos + o.false_pos,
            false_neg: self.false_neg + o.false_neg,
        }
    }
}

pub fn confusion_counts(pred: &LabelMap, truth: &LabelMap, class: u8) -> Result<Counts> {
    if (pred.height, pred.width) != (truth.height, truth.width) {
        return Err(TensorError::ShapeMismatch {
            op: "confusion_counts",
            lhs: vec![pred.height, pred.width],
            rhs: vec![truth.height, truth.width],
        }
        .into());
    }
    let mut c = Counts::default();
    for (&p, &t) in pred.labels.iter().zip(&truth.labels) {
        match (p == class, t == class) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

/// `(iou, dice)`; both are 1 when prediction and truth are both empty.
pub fn iou_and_dice(c: Counts) -> (f64, f64) {
    if c.is_empty() {
        return (1.0, 1.0);
    }
    let (tp, fp, fn_) = (c.true_pos as f64, c.false_pos as f64, c.false_neg as f64);
    (tp / (tp + fp + fn_), 2.0 * tp / (2.0 * tp + fp + fn_))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hausdorff {
    /// Largest boundary-to-boundary distance.
    pub max: f64,
    /// Larger of the two directed 95th-percentile distances.
    pub p95: f64,
    /// Set when exactly one mask is empty; both values are then the image diagonal.
    pub sentinel: bool,
}

/// Exact squared Euclidean distance from every pixel to the nearest set pixel
/// (separable lower-envelope transform). Unreachable pixels stay at `f64::INFINITY`.
fn squared_distance_transform(mask: &BinaryMask) -> Vec<f64> {
    let (h, w) = (mask.height, mask.width);
    let mut d: Vec<f64> = mask.bits.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let mut line = Vec::new();
    let mut out = Vec::new();
    for x in 0..w {
        line.clear();
        line.extend((0..h).map(|y| d[y * w + x]));
        envelope_1d(&line, &mut out);
        for y in 0..h {
            d[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        line.clear();
        line.extend_from_slice(&d[y * w..(y + 1) * w]);
        envelope_1d(&line, &mut out);
        d[y * w..(y + 1) * w].copy_from_slice(&out);
    }
    d
}

fn envelope_1d(f: &[f64], out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    let sites: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if sites.is_empty() {
        return;
    }
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    let cross =
        |p: usize, q: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
    for &q in &sites {
        while let Some(&p) = v.last() {
            if cross(p, q) <= z[v.len() - 1] {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        let boundary = v.last().map_or(f64::NEG_INFINITY, |&p| cross(p, q));
        v.push(q);
        z.push(boundary);
    }
    let mut k = 0;
    for (q, slot) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        *slot = dq * dq + f[v[k]];
    }
}

/// Distances from each boundary pixel of `from` to the nearest boundary pixel of `to`.
fn directed_distances(from: &BinaryMask, to: &BinaryMask) -> Vec<f64> {
    let field = squared_distance_transform(to);
    from.bits.iter().zip(&field).filter(|(&b, _)| b).map(|(_, &d)| d.sqrt()).collect()
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Hausdorff distance between the boundaries of two masks, in pixels.
pub fn hausdorff(a: &BinaryMask, b: &BinaryMask) -> Result<Hausdorff> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(TensorError::ShapeMismatch {
            op: "hausdorff",
            lhs: vec![a.height, a.width],
            rhs: vec![b.height, b.width],
        }
        .into());
    }
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return Ok(Hausdorff { max: 0.0, p95: 0.0, sentinel: false }),
        (true, false) | (false, true) => {
            let diag = ((a.height * a.height + a.width * a.width) as f64).sqrt();
            return Ok(Hausdorff { max: diag, p95: diag, sentinel: true });
        }
        _ => {}
    }
    let (ba, bb) = (a.boundary(), b.boundary());
    let ab = directed_distances(&ba, &bb);
    let ba_d = directed_distances(&bb, &ba);
    let max = ab.iter().chain(&ba_d).copied().fold(0.0, f64::max);
    let p95 = percentile(&ab, 95.0).max(percentile(&ba_d, 95.0));
    Ok(Hausdorff { max, p95, sentinel: false })
}

/// Per-pixel decision: argmax over channels, or `sigmoid >= 0.5` for a single channel.
pub fn decide<F: Scalar>(logits: &Tensor<F>) -> Result<Vec<LabelMap>> {
    let s = logits.shape();
    if s.len() != 4 {
        return Err(TensorError::InvalidShape {
            op: "decide",
            shape: s.to_vec(),
            reason: "logits must be (n, classes, h, w)".into(),
        }
        .into());
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let x = logits.data();
    let hw = h * w;
    (0..n)
        .map(|b| {
            let labels = (0..hw)
                .map(|p| {
                    let at = |k: usize| x[b * c * hw + k * hw + p];
                    if c == 1 {
                        u8::from(at(0) >= F::zero())
                    } else {
                        (1..c).fold(0usize, |best, k| if at(k) > at(best) { k } else { best }) as u8
                    }
                })
                .collect();
            LabelMap::new(h, w, labels)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseMetrics {
    pub case: String,
    pub class: u8,
    #[serde(flatten)]
    pub counts: Counts,
    pub iou: f64,
    pub dice: f64,
    pub hd: f64,
    pub hd95: f64,
    pub hd_sentinel: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: u8,
    pub counts: Counts,
    /// From counts pooled over all cases.
    pub iou: f64,
    pub dice: f64,
    /// Means over cases where the class appears in prediction or truth.
    pub hd: f64,
    pub hd95: f64,
    pub sentinel_cases: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub cases: Vec<CaseMetrics>,
    /// Foreground classes only.
    pub per_class: Vec<ClassMetrics>,
    pub mean_iou: f64,
    pub mean_dice: f64,
    pub mean_hd: f64,
    pub mean_hd95: f64,
}

/// Scores predicted label maps against ground truth for classes `1..label_classes`.
pub fn evaluate_masks(
    preds: &[LabelMap],
    truths: &[LabelMap],
    case_ids: &[String],
    label_classes: usize,
) -> Result<MetricsReport> {
    if preds.len() != truths.len() || preds.len() != case_ids.len() {
        return Err(Error::Data(format!(
            "{} predictions, {} ground-truth maps and {} case ids",
            preds.len(),
            truths.len(),
            case_ids.len()
        )));
    }
    if let Some(bad) = truths.iter().flat_map(|t| &t.labels).find(|&&l| l as usize >= label_classes) {
        return Err(Error::Data(format!("label {bad} outside 0..{label_classes}")));
    }
    let mut cases = Vec::new();
    let mut per_class = Vec::new();
    for class in 1..label_classes as u8 {
        let mut pooled = Counts::default();
        let (mut hd_sum, mut hd95_sum, mut present, mut sentinels) = (0.0, 0.0, 0usize, 0usize);
        for ((p, t), id) in preds.iter().zip(truths).zip(case_ids) {
            let counts = confusion_counts(p, t, class)?;
            let (iou, dice) = iou_and_dice(counts);
            let hd = hausdorff(&p.mask(class), &t.mask(class))?;
            pooled = pooled + counts;
            if !counts.is_empty() {
                present += 1;
                hd_sum += hd.max;
                hd95_sum += hd.p95;
            }
            sentinels += usize::from(hd.sentinel);
            cases.push(CaseMetrics {
                case: id.clone(),
                class,
                counts,
                iou,
                dice,
                hd: hd.max,
                hd95: hd.p95,
                hd_sentinel: hd.sentinel,
            });
        }
        let (iou, dice) = iou_and_dice(pooled);
        let mean = |s: f64| if present == 0 { 0.0 } else { s / present as f64 };
        per_class.push(ClassMetrics {
            class,
            counts: pooled,
            iou,
            dice,
            hd: mean(hd_sum),
            hd95: mean(hd95_sum),
            sentinel_cases: sentinels,
        });
    }
    let k = per_class.len().max(1) as f64;
    let avg = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k;
    Ok(MetricsReport {
        mean_iou: avg(|c| c.iou),
        mean_dice: avg(|c| c.dice),
        mean_hd: avg(|c| c.hd),
        mean_hd95: avg(|c| c.hd95),
        cases,
        per_class,
    })
}

/// Decides labels from `logits` and scores them against `targets` (`n * h * w` labels).
pub fn evaluate_batch<F: Scalar>(logits: &Tensor<F>, targets: &[u8], label_classes: usize) -> Result<MetricsReport> {
    let preds = decide(logits)?;
    let (h, w) = (logits.shape()[2], logits.shape()[3]);
    if targets.len() != preds.len() * h * w {
        return Err(TensorError::ShapeMismatch {
            op: "evaluate_batch",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len()],
        }
        .into());
    }
    let truths = targets.chunks(h * w).map(|c| LabelMap::new(h, w, c.to_vec())).collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = (0..preds.len()).map(|i| i.to_string()).collect();
    evaluate_masks(&preds, &truths, &ids, label_classes)
}

#[derive(Serialize)]
struct CsvRow<'a> {
    case: &'a str,
    class: String,
    tp: u64,
    fp: u64,
    fn_: u64,
    iou: f64,
    dice: f64,
    hd: f64,
    hd95: f64,
    hd_sentinel: usize,
}

impl MetricsReport {
    /// One row per (case, class), then one `mean` row per class and a final
    /// `mean,foreground` row. Columns: case, class, tp, fp, fn, iou, dice, hd, hd95, hd_sentinel.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        let io = |e: csv::Error| Error::Data(format!("writing metrics csv: {e}"));
        w.write_record(["case", "class", "tp", "fp", "fn", "iou", "dice", "hd", "hd95", "hd_sentinel"]).map_err(io)?;
        for c in &self.cases {
            w.serialize(CsvRow {
                case: &c.case,
                class: c.class.to_string(),
                tp: c.counts.true_pos,
                fp: c.counts.false_pos,
                fn_: c.counts.false_neg,
                iou: c.iou,
                dice: c.dice,
                hd: c.hd,
                hd95: c.hd95,
                hd_sentinel: usize::from(c.hd_sentinel),
            })
            .map_err(io)?;
        }
        for c in &self.per_class {
            w.serialize(CsvRow {
                case: "mean",
                class: c.class.to_string(),
                tp: c.counts.true_pos,
                fp: c.counts.false_pos,
                fn_: c.counts.false_neg,
                iou: c.iou,
                dice: c.dice,
                hd: c.hd,
                hd95: c.hd95,
                hd_sentinel: c.sentinel_cases,
            })
            .map_err(io)?;
        }
        let total = self.per_class.iter().fold(Counts::default(), |a, c| a + c.counts);
        w.serialize(CsvRow {
            case: "mean",
            class: "foreground".into(),
            tp: total.true_pos,
            fp: total.false_pos,
            fn_: total.false_neg,
            iou: self.mean_iou,
            dice: self.mean_dice,
            hd: self.mean_hd,
            hd95: self.mean_hd95,
            hd_sentinel: self.per_class.iter().map(|c| c.sentinel_cases).sum(),
        })
        .map_err(io)?;
        w.flush().map_err(|e| Error::io("metrics csv", e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(h: usize, w: usize, labels: &[u8]) -> LabelMap {
        LabelMap::new(h, w, labels.to_vec()).unwrap()
    }

    fn points(h: usize, w: usize, pts: &[(usize, usize)]) -> BinaryMask {
        let mut bits = vec![false; h * w];
        for &(y, x) in pts {
            bits[y * w + x] = true;
        }
        BinaryMask { height: h, width: w, bits }
    }

    #[test]
    fn counting_small_sets() {
        let p = map(1, 3, &[1, 1, 0]);
        let t = map(1, 3, &[0, 1, 1]);
        let c = confusion_counts(&p, &t, 1).unwrap();
        assert_eq!((c.true_pos, c.false_pos, c.false_neg), (1, 1, 1));
        let (iou, dice) = iou_and_dice(c);
        assert!((iou - 1.0 / 3.0).abs() < 1e-15 && (dice - 0.5).abs() < 1e-15);
        assert_eq!(iou_and_dice(Counts::default()), (1.0, 1.0));
        assert!(confusion_counts(&p, &map(3, 1, &[0, 0, 0]), 1).is_err());
    }

    #[test]
    fn single_points_are_euclidean() {
        let a = points(5, 5, &[(0, 0)]);
        let b = points(5, 5, &[(3, 4)]);
        let h = hausdorff(&a, &b).unwrap();
        assert_eq!(h.max, 5.0);
        assert_eq!(h.p95, 5.0);
        assert_eq!(hausdorff(&a, &a).unwrap().max, 0.0);
    }

    #[test]
    fn empty_masks_use_sentinel() {
        let e = points(3, 4, &[]);
        let a = points(3, 4, &[(1, 1)]);
        let h = hausdorff(&e, &a).unwrap();
        assert!(h.sentinel);
        assert_eq!(h.max, 5.0);
        assert_eq!(hausdorff(&e, &e).unwrap().max, 0.0);
    }

    #[test]
    fn interior_pixels_are_not_boundary() {
        let full = BinaryMask { height: 3, width: 3, bits: vec![true; 9] };
        let b = full.boundary();
        assert!(!b.bits[4]);
        assert_eq!(b.bits.iter().filter(|&&x| x).count(), 8);
    }

    #[test]
    fn perfect_logits_score_one() {
        let labels = [0u8, 1, 2, 2, 1, 0, 0, 0];
        let mut logits = vec![0.0f64; 3 * 8];
        for (p, &l) in labels.iter().enumerate() {
            logits[l as usize * 8 + p] = 5.0;
        }
        let x = Tensor::from_vec(&[1, 3, 2, 4], logits).unwrap();
        let r = evaluate_batch(&x, &labels, 3).unwrap();
        assert_eq!(r.mean_dice, 1.0);
        assert_eq!(r.mean_hd95, 0.0);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("case,class,tp,fp,fn,iou,dice,hd,hd95,hd_sentinel\n"));
        assert!(text.trim_end().ends_with(",0"));
    }

    #[test]
    fn background_prediction_scores_zero_dice() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![-1.0f64; 4]).unwrap();
        let r = evaluate_batch(&x, &[0, 1, 1, 0], 2).unwrap();
        assert_eq!(r.per_class[0].dice, 0.0);
        assert!(r.cases[0].hd_sentinel);
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[0.0, 10.0], 95.0), 9.5);
        assert_eq!(percentile(&[3.0], 95.0), 3.0);
    }

    fn mask_strategy() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
        (2usize..9, 2usize..9).prop_flat_map(|(h, w)| {
            (prop::collection::vec(any::<bool>(), h * w), prop::collection::vec(any::<bool>(), h * w)).prop_map(
                move |(a, b)| {
                    (BinaryMask { height: h, width: w, bits: a }, BinaryMask { height: h, width: w, bits: b })
                },
            )
        })
    }

    proptest! {
        #[test]
        fn dice_is_monotone_in_iou(tp in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000) {
            let (iou, dice) = iou_and_dice(Counts { true_pos: tp, false_pos: fp, false_neg: fn_ });
            prop_assert!((dice - 2.0 * iou / (1.0 + iou)).abs() <= 1e-12);
            prop_assert!(0.0 <= iou && iou <= dice && dice <= 1.0);
        }

        #[test]
        fn hausdorff_symmetric_and_ordered((a, b) in mask_strategy()) {
            let ab = hausdorff(&a, &b).unwrap();
            let ba = hausdorff(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab.p95 <= ab.max && ab.max >= 0.0);
            if !a.is_empty() && !b.is_empty() {
                prop_assert_eq!(ab.max == 0.0, a.boundary() == b.boundary());
            }
        }

        #[test]
        fn overlap_ignores_pixel_order(labels in prop::collection::vec((0u8..3, 0u8..3), 1..40), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let n = labels.len();
            let (p, t): (Vec<u8>, Vec<u8>) = labels.iter().copied().unzip();
            let mut perm: Vec<(u8, u8)> = labels.clone();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (pp, tp): (Vec<u8>, Vec<u8>) = perm.into_iter().unzip();
            for class in 0..3 {
                let a = confusion_counts(&map(1, n, &p), &map(1, n, &t), class).unwrap();
                let b = confusion_counts(&map(1, n, &pp), &map(1, n, &tp), class).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
