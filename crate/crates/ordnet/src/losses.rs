//! Training objective and evaluation metrics: cross-entropy, the argmax
//! Jaccard metric, a Lovasz-hinge surrogate for training, and pixel accuracy.
//! Pixels carrying the ignore label are excluded everywhere.

use crate::error::{OrdError, Result};
use crate::tensor::{Tape, Tensor, Value};
use serde::{Deserialize, Serialize};

pub const DEFAULT_IGNORE: u16 = 255;

/// 2-D integer category map with an ignore-label convention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    h: usize,
    w: usize,
    labels: Vec<u16>,
    ignore_label: u16,
}

impl LabelMask {
    pub fn new(h: usize, w: usize, labels: Vec<u16>) -> Result<Self> {
        Self::with_ignore(h, w, labels, DEFAULT_IGNORE)
    }

    pub fn with_ignore(h: usize, w: usize, labels: Vec<u16>, ignore_label: u16) -> Result<Self> {
        if labels.len() != h * w {
            return Err(OrdError::Dimension(format!(
                "{}x{} mask needs {} labels, got {}",
                h,
                w,
                h * w,
                labels.len()
            )));
        }
        Ok(LabelMask {
            h,
            w,
            labels,
            ignore_label,
        })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn ignore_label(&self) -> u16 {
        self.ignore_label
    }

    pub fn at(&self, i: usize, j: usize) -> u16 {
        self.labels[i * self.w + j]
    }

    pub fn is_ignored(&self, i: usize, j: usize) -> bool {
        self.at(i, j) == self.ignore_label
    }

    pub fn num_valid(&self) -> usize {
        self.labels
            .iter()
            .filter(|&&l| l != self.ignore_label)
            .count()
    }

    /// Per-label pixel counts up to `k` (ignored pixels excluded).
    pub fn histogram(&self, k: usize) -> Vec<usize> {
        let mut h = vec![0usize; k];
        for &l in &self.labels {
            if l != self.ignore_label && (l as usize) < k {
                h[l as usize] += 1;
            }
        }
        h
    }
}

/// Argmax over the class axis of an H x W x K logit map.
pub fn argmax_mask(logits: &Tensor) -> Result<LabelMask> {
    if logits.rank() != 3 {
        return Err(OrdError::Dimension(format!(
            "logits must be H x W x K, got {:?}",
            logits.shape()
        )));
    }
    let (h, w, k) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    let mut labels = Vec::with_capacity(h * w);
    for pos in 0..h * w {
        let row = &logits.data()[pos * k..(pos + 1) * k];
        let mut best = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        labels.push(best as u16);
    }
    LabelMask::new(h, w, labels)
}

/// Loss term weights (alpha1 for cross-entropy, alpha2 for the IoU surrogate).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha_ce: f64,
    pub alpha_iou: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha_ce: 1.0,
            alpha_iou: 1.0,
        }
    }
}

fn check_mask(logits: &Tensor, y: &LabelMask) -> Result<(usize, usize, usize)> {
    if logits.rank() != 3 {
        return Err(OrdError::Dimension(format!(
            "logits must be H x W x K, got {:?}",
            logits.shape()
        )));
    }
    let (h, w, k) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    if h != y.height() || w != y.width() {
        return Err(OrdError::Dimension(format!(
            "logits {}x{} vs mask {}x{}",
            h,
            w,
            y.height(),
            y.width()
        )));
    }
    Ok((h, w, k))
}

/// Softmax cross-entropy, mean over non-ignored pixels. The boolean flags the
/// degenerate all-ignored case, where the loss is defined as 0.
pub fn cross_entropy_on_tape(
    tape: &mut Tape,
    logits: Value,
    y: &LabelMask,
) -> Result<(Value, bool)> {
    let (h, w, k) = check_mask(tape.value(logits), y)?;
    let mask = y.clone();
    let data = tape.value(logits).data();
    let mut probs = vec![0.0; h * w * k];
    let mut total = 0.0;
    let mut n_valid = 0usize;
    for pos in 0..h * w {
        let (i, j) = (pos / w, pos % w);
        if mask.is_ignored(i, j) {
            continue;
        }
        let row = &data[pos * k..(pos + 1) * k];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (c, &v) in row.iter().enumerate() {
            let e = (v - mx).exp();
            probs[pos * k + c] = e;
            sum += e;
        }
        for c in 0..k {
            probs[pos * k + c] /= sum;
        }
        let lse = mx + sum.ln();
        total += lse - row[mask.at(i, j) as usize];
        n_valid += 1;
    }
    if n_valid == 0 {
        let zero = tape.push(Tensor::scalar(0.0), vec![logits], Some(Box::new(
            move |tape2, _| vec![Tensor::zeros(tape2.value(logits).shape())],
        )));
        return Ok((zero, true));
    }
    let loss = total / n_valid as f64;
    let node = tape.push(
        Tensor::scalar(loss),
        vec![logits],
        Some(Box::new(move |_, g| {
            let scale = g.item() / n_valid as f64;
            let mut gx = vec![0.0; h * w * k];
            for pos in 0..h * w {
                let (i, j) = (pos / w, pos % w);
                if mask.is_ignored(i, j) {
                    continue;
                }
                for c in 0..k {
                    let onehot = if c == mask.at(i, j) as usize { 1.0 } else { 0.0 };
                    gx[pos * k + c] = scale * (probs[pos * k + c] - onehot);
                }
            }
            vec![Tensor::new(vec![h, w, k], gx).unwrap()]
        })),
    );
    Ok((node, false))
}

pub fn cross_entropy(logits: &Tensor, y: &LabelMask) -> Result<(f64, bool)> {
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let (v, warn) = cross_entropy_on_tape(&mut tape, l, y)?;
    Ok((tape.value(v).item(), warn))
}

/// Jaccard gradient of the Lovasz extension for one class, given ground
/// truth membership in descending-error order.
fn lovasz_grad(gt_sorted: &[f64]) -> Vec<f64> {
    let n = gt_sorted.len();
    let gts: f64 = gt_sorted.iter().sum();
    let mut jaccard = Vec::with_capacity(n);
    let mut inter = gts;
    let mut union = gts;
    for &g in gt_sorted {
        inter -= g;
        union += 1.0 - g;
        jaccard.push(1.0 - inter / union);
    }
    let mut out = jaccard.clone();
    for i in (1..n).rev() {
        out[i] -= jaccard[i - 1];
    }
    out
}

/// Differentiable Jaccard surrogate: per class, hinge errors on the
/// multiclass margin, sorted descending, dotted with the Lovasz-extension
/// gradient of the Jaccard set function. Mean over classes.
pub fn lovasz_on_tape(tape: &mut Tape, logits: Value, y: &LabelMask) -> Result<Value> {
    let (h, w, k) = check_mask(tape.value(logits), y)?;
    let data = tape.value(logits).data();
    let mask = y.clone();
    // valid pixel list
    let valid: Vec<usize> = (0..h * w)
        .filter(|&pos| !mask.is_ignored(pos / w, pos % w))
        .collect();
    if valid.is_empty() {
        let zero = tape.push(
            Tensor::scalar(0.0),
            vec![logits],
            Some(Box::new(move |tape2, _| {
                vec![Tensor::zeros(tape2.value(logits).shape())]
            })),
        );
        return Ok(zero);
    }
    // per class: (pixel, competitor, sign, raw error) in descending-error
    // order plus the lovasz coefficient at that rank
    struct Entry {
        pixel: usize,
        competitor: usize,
        sign: f64,
        error: f64,
        coeff: f64,
    }
    let mut cached: Vec<Vec<Entry>> = Vec::with_capacity(k);
    let mut total = 0.0;
    for class in 0..k {
        let mut entries: Vec<Entry> = valid
            .iter()
            .map(|&pos| {
                let row = &data[pos * k..(pos + 1) * k];
                let mut comp = usize::MAX;
                for c in 0..k {
                    if c == class {
                        continue;
                    }
                    if comp == usize::MAX || row[c] > row[comp] {
                        comp = c;
                    }
                }
                let gt = mask.at(pos / w, pos % w) as usize == class;
                let sign = if gt { 1.0 } else { -1.0 };
                let margin = if k == 1 { row[class] } else { row[class] - row[comp] };
                Entry {
                    pixel: pos,
                    competitor: comp,
                    sign,
                    error: 1.0 - sign * margin,
                    coeff: 0.0,
                }
            })
            .collect();
        entries.sort_by(|a, b| b.error.total_cmp(&a.error));
        let gt_sorted: Vec<f64> = entries
            .iter()
            .map(|e| if e.sign > 0.0 { 1.0 } else { 0.0 })
            .collect();
        let coeffs = lovasz_grad(&gt_sorted);
        for (e, c) in entries.iter_mut().zip(coeffs) {
            e.coeff = c;
            total += e.error.max(0.0) * c;
        }
        cached.push(entries);
    }
    let loss = total / k as f64;
    let node = tape.push(
        Tensor::scalar(loss),
        vec![logits],
        Some(Box::new(move |_, g| {
            let scale = g.item() / k as f64;
            let mut gx = vec![0.0; h * w * k];
            for (class, entries) in cached.iter().enumerate() {
                for e in entries {
                    if e.error <= 0.0 {
                        continue; // hinge inactive
                    }
                    let d = scale * e.coeff;
                    gx[e.pixel * k + class] += d * (-e.sign);
                    if e.competitor != usize::MAX {
                        gx[e.pixel * k + e.competitor] += d * e.sign;
                    }
                }
            }
            vec![Tensor::new(vec![h, w, k], gx).unwrap()]
        })),
    );
    Ok(node)
}

pub fn lovasz_surrogate(logits: &Tensor, y: &LabelMask) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let v = lovasz_on_tape(&mut tape, l, y)?;
    Ok(tape.value(v).item())
}

/// alpha1 * cross_entropy + alpha2 * lovasz_surrogate.
pub fn full_loss_on_tape(
    tape: &mut Tape,
    logits: Value,
    y: &LabelMask,
    cfg: &LossConfig,
) -> Result<(Value, bool)> {
    let (ce, warn) = cross_entropy_on_tape(tape, logits, y)?;
    let iou = lovasz_on_tape(tape, logits, y)?;
    let a = tape.scale(ce, cfg.alpha_ce);
    let b = tape.scale(iou, cfg.alpha_iou);
    let sum = tape.add(a, b)?;
    Ok((sum, warn))
}

pub fn full_loss(logits: &Tensor, y: &LabelMask, cfg: &LossConfig) -> Result<(f64, bool)> {
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let (v, warn) = full_loss_on_tape(&mut tape, l, y, cfg)?;
    Ok((tape.value(v).item(), warn))
}

/// Per-class IoU plus mIoU. `None` marks classes absent from both masks.
#[derive(Debug, Clone)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// Streaming intersection/union counts so set-level metrics aggregate over
/// many images.
#[derive(Debug, Clone)]
pub struct MetricAccumulator {
    k: usize,
    inter: Vec<u64>,
    pred_count: Vec<u64>,
    gt_count: Vec<u64>,
    correct: u64,
    valid: u64,
}

impl MetricAccumulator {
    pub fn new(k: usize) -> Self {
        MetricAccumulator {
            k,
            inter: vec![0; k],
            pred_count: vec![0; k],
            gt_count: vec![0; k],
            correct: 0,
            valid: 0,
        }
    }

    pub fn add(&mut self, pred: &LabelMask, y: &LabelMask) -> Result<()> {
        if pred.height() != y.height() || pred.width() != y.width() {
            return Err(OrdError::Dimension(format!(
                "pred {}x{} vs gt {}x{}",
                pred.height(),
                pred.width(),
                y.height(),
                y.width()
            )));
        }
        for i in 0..y.height() {
            for j in 0..y.width() {
                if y.is_ignored(i, j) {
                    continue;
                }
                let g = y.at(i, j) as usize;
                let p = pred.at(i, j) as usize;
                self.valid += 1;
                if g < self.k {
                    self.gt_count[g] += 1;
                }
                if p < self.k {
                    self.pred_count[p] += 1;
                }
                if p == g {
                    self.correct += 1;
                    if g < self.k {
                        self.inter[g] += 1;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn iou(&self) -> IouReport {
        let mut per_class = Vec::with_capacity(self.k);
        let mut sum = 0.0;
        let mut defined = 0usize;
        for c in 0..self.k {
            let union = self.pred_count[c] + self.gt_count[c] - self.inter[c];
            if union == 0 {
                per_class.push(None); // absent from both, skipped
            } else {
                let iou = self.inter[c] as f64 / union as f64;
                per_class.push(Some(iou));
                sum += iou;
                defined += 1;
            }
        }
        let miou = if defined == 0 { 0.0 } else { sum / defined as f64 };
        IouReport { per_class, miou }
    }

    pub fn pixel_accuracy(&self) -> f64 {
        if self.valid == 0 {
            0.0
        } else {
            self.correct as f64 / self.valid as f64
        }
    }
}

/// Argmax-based Jaccard between a prediction and ground truth.
pub fn jaccard_metric(pred: &LabelMask, y: &LabelMask, k: usize) -> Result<IouReport> {
    let mut acc = MetricAccumulator::new(k);
    acc.add(pred, y)?;
    Ok(acc.iou())
}

/// Fraction of non-ignored pixels predicted correctly.
pub fn pixel_accuracy(pred: &LabelMask, y: &LabelMask) -> Result<f64> {
    let mut acc = MetricAccumulator::new(1);
    acc.add(pred, y)?;
    Ok(acc.pixel_accuracy())
}
