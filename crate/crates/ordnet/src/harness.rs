//! Desk-scale reproduction machinery: synthetic segmentation data, SGD with
//! a polynomial learning-rate schedule, and multi-scale evaluation.

use crate::error::{OrdError, Result};
use crate::losses::{full_loss_on_tape, LabelMask, LossConfig, MetricAccumulator};
use crate::network::{OrdNet, OrdNetConfig};
use crate::tensor::{ops, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// One synthetic image with its exact ground-truth mask.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub mask: LabelMask,
}

/// Label layout of the synthetic data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlobLayout {
    /// Every class has a distinct color; a pixel is classifiable on its own.
    #[default]
    Distinct,
    /// Two classes share one color and are told apart only by whether a
    /// marker blob sits in the same image quadrant, so correct labels need
    /// middle-range context. Requires exactly 4 classes and size % 16 == 0.
    QuadrantContext,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n: usize,
    pub size: usize,
    pub num_classes: usize,
    /// Uniform per-pixel color jitter amplitude.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub layout: BlobLayout,
}

impl SynthConfig {
    pub fn new(seed: u64, n: usize, size: usize, num_classes: usize) -> Self {
        SynthConfig {
            seed,
            n,
            size,
            num_classes,
            noise: default_noise(),
            layout: BlobLayout::Distinct,
        }
    }
}

fn default_noise() -> f64 {
    0.05
}

/// Distinct base color per class, reused by every generated sample.
fn class_color(c: usize) -> [f64; 3] {
    let bits = (c % 7) + 1; // skip all-zeros so classes separate from black
    let tone = 0.85 - 0.25 * ((c / 7) as f64).min(2.0);
    [
        if bits & 1 != 0 { tone } else { 0.05 },
        if bits & 2 != 0 { tone } else { 0.05 },
        if bits & 4 != 0 { tone } else { 0.05 },
    ]
}

/// Deterministic dataset of colored rectangular blobs on a dark background.
/// Blob corners snap to the stride-8 grid so every label region survives the
/// backbone downsampling intact; labels match blob geometry exactly.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    if cfg.num_classes < 2 {
        return Err(OrdError::Argument(format!(
            "synthetic data needs >= 2 classes, got {}",
            cfg.num_classes
        )));
    }
    if !cfg.size.is_multiple_of(8) || cfg.size == 0 {
        return Err(OrdError::Argument(format!(
            "synthetic image size must be a positive multiple of 8, got {}",
            cfg.size
        )));
    }
    if cfg.layout == BlobLayout::QuadrantContext && (cfg.num_classes != 4 || !cfg.size.is_multiple_of(16)) {
        return Err(OrdError::Argument(format!(
            "quadrant_context layout needs 4 classes and size % 16 == 0, got {} classes, size {}",
            cfg.num_classes, cfg.size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cells = cfg.size / 8;
    let mut out = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        // labels on the coarse grid first: background 0, blobs on top
        let mut grid = vec![0u16; cells * cells];
        match cfg.layout {
            BlobLayout::Distinct => {
                // one rectangle per class, each class a distinct color
                for class in 1..cfg.num_classes {
                    let bh = rng.gen_range(1..=cells.div_ceil(2));
                    let bw = rng.gen_range(1..=cells.div_ceil(2));
                    let top = rng.gen_range(0..=cells - bh);
                    let left = rng.gen_range(0..=cells - bw);
                    for i in top..top + bh {
                        for j in left..left + bw {
                            grid[i * cells + j] = class as u16;
                        }
                    }
                }
            }
            BlobLayout::QuadrantContext => {
                // per 2x2-cell quadrant: maybe a marker (class 3), maybe one
                // ambiguous cell whose class (1 or 2) is decided by the
                // marker's presence in the same quadrant
                let q = cells / 2;
                for qi in 0..2usize {
                    for qj in 0..2usize {
                        let spots: Vec<(usize, usize)> = (0..q)
                            .flat_map(|a| (0..q).map(move |b| (qi * q + a, qj * q + b)))
                            .collect();
                        let marker = rng.gen_bool(0.5);
                        let mpos = rng.gen_range(0..spots.len());
                        if marker {
                            let (i, j) = spots[mpos];
                            grid[i * cells + j] = 3;
                        }
                        if rng.gen_bool(0.8) {
                            let mut apos = rng.gen_range(0..spots.len());
                            while marker && apos == mpos {
                                apos = rng.gen_range(0..spots.len());
                            }
                            let (i, j) = spots[apos];
                            grid[i * cells + j] = if marker { 1 } else { 2 };
                        }
                    }
                }
            }
        }
        let mut labels = vec![0u16; cfg.size * cfg.size];
        let mut image = Tensor::zeros(&[cfg.size, cfg.size, 3]);
        for i in 0..cfg.size {
            for j in 0..cfg.size {
                let l = grid[(i / 8) * cells + j / 8];
                labels[i * cfg.size + j] = l;
                // in the context layout classes 1 and 2 render identically
                let paint = match cfg.layout {
                    BlobLayout::Distinct => l as usize,
                    BlobLayout::QuadrantContext => {
                        if l == 2 {
                            1
                        } else {
                            l as usize
                        }
                    }
                };
                let base = class_color(paint);
                for (c, &b) in base.iter().enumerate() {
                    let jitter = rng.gen_range(-cfg.noise..=cfg.noise);
                    image.set(&[i, j, c], b + jitter);
                }
            }
        }
        out.push(Sample {
            image,
            mask: LabelMask::new(cfg.size, cfg.size, labels)?,
        });
    }
    Ok(out)
}

/// Clustered-blob label masks for correlation analysis: each quadrant gets a
/// base label, then a couple of rectangular blobs are overlaid, so labels
/// cluster spatially without following the patch grid exactly.
pub fn synth_blob_masks(seed: u64, n: usize, size: usize, k: usize) -> Result<Vec<LabelMask>> {
    if k < 2 || size < 4 {
        return Err(OrdError::Argument(format!(
            "blob masks need k >= 2 and size >= 4, got k={} size={}",
            k, size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = size / 2;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut labels = vec![0u16; size * size];
        for qi in 0..2usize {
            for qj in 0..2usize {
                let base = rng.gen_range(0..k) as u16;
                for i in qi * half..(qi + 1) * half {
                    for j in qj * half..(qj + 1) * half {
                        labels[i * size + j] = base;
                    }
                }
            }
        }
        for _ in 0..2 {
            let class = rng.gen_range(0..k) as u16;
            let bh = rng.gen_range(1..=half.max(2) / 2);
            let bw = rng.gen_range(1..=half.max(2) / 2);
            let top = rng.gen_range(0..=size - bh);
            let left = rng.gen_range(0..=size - bw);
            for i in top..top + bh {
                for j in left..left + bw {
                    labels[i * size + j] = class;
                }
            }
        }
        out.push(LabelMask::new(size, size, labels)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    #[serde(default = "default_power")]
    pub power: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// 0 selects epochs * batches-per-epoch automatically.
    #[serde(default)]
    pub total_iter: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss: LossConfig,
    pub model: OrdNetConfig,
}

fn default_power() -> f64 {
    0.9
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    1e-4
}

fn default_batch() -> usize {
    1
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.base_lr < 0.0 {
            return Err(OrdError::Argument("base_lr must be >= 0".into()));
        }
        if self.power <= 0.0 {
            return Err(OrdError::Argument("power must be > 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(OrdError::Argument(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// lr = base_lr * (1 - iter/total_iter)^power, for iter in [0, total_iter).
pub fn poly_lr_raw(iter: usize, total_iter: usize, base_lr: f64, power: f64) -> f64 {
    let total = total_iter.max(1);
    let i = iter.min(total - 1);
    base_lr * (1.0 - i as f64 / total as f64).powf(power)
}

/// Schedule from an explicit config (total_iter must already be resolved).
pub fn poly_lr(iter: usize, cfg: &TrainConfig) -> f64 {
    poly_lr_raw(iter, cfg.total_iter, cfg.base_lr, cfg.power)
}

/// SGD with momentum and decoupled-from-nothing classic weight decay:
/// v <- momentum*v + g + wd*p;  p <- p - lr*v.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Tensor>,
}

impl SgdState {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        SgdState {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64) {
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        for ((vi, &gi), pi) in v
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(param.data().to_vec())
        {
            *vi = self.momentum * *vi + gi + self.weight_decay * pi;
        }
        for (pi, &vi) in param.data_mut().iter_mut().zip(v.data()) {
            *pi -= lr * vi;
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub miou: f64,
    pub pixacc: f64,
    pub lr: f64,
}

impl EpochMetrics {
    /// Line-oriented key=value record for machine parsing.
    pub fn to_kv(&self) -> String {
        format!(
            "epoch={} loss={:.6} miou={:.6} pixacc={:.6} lr={:.8}",
            self.epoch, self.loss, self.miou, self.pixacc, self.lr
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: OrdNet,
    pub history: Vec<EpochMetrics>,
    /// Loss went non-finite; `model` is the last finite-loss checkpoint.
    pub diverged: bool,
}

/// Average full-loss gradient over one batch, accumulated by parameter name.
fn batch_gradients(
    model: &OrdNet,
    batch: &[&Sample],
    loss_cfg: &LossConfig,
) -> Result<(f64, HashMap<String, Tensor>)> {
    let mut acc: HashMap<String, Tensor> = HashMap::new();
    let mut loss_sum = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for sample in batch {
        let mut tape = Tape::new();
        let (logits, leaves) = model.forward_on_tape(&mut tape, &sample.image)?;
        let (loss, _) = full_loss_on_tape(&mut tape, logits, &sample.mask, loss_cfg)?;
        loss_sum += tape.value(loss).item();
        let grads = tape.backward(loss)?;
        for (name, leaf) in leaves {
            let g = grads.get(leaf).ok_or_else(|| {
                OrdError::Evaluation(format!("no gradient for parameter {}", name))
            })?;
            match acc.get_mut(&name) {
                Some(t) => {
                    for (a, &b) in t.data_mut().iter_mut().zip(g.data()) {
                        *a += scale * b;
                    }
                }
                None => {
                    acc.insert(name, ops::scale(g, scale));
                }
            }
        }
    }
    Ok((loss_sum * scale, acc))
}

fn dataset_metrics(model: &OrdNet, data: &[Sample], k: usize) -> Result<(f64, f64)> {
    let mut acc = MetricAccumulator::new(k);
    for sample in data {
        let logits = model.forward(&sample.image)?;
        acc.add(&crate::losses::argmax_mask(&logits)?, &sample.mask)?;
    }
    Ok((acc.iou().miou, acc.pixel_accuracy()))
}

/// Full training loop: deterministic under a fixed seed, one metrics record
/// per epoch, divergence abort restoring the last finite-loss checkpoint.
pub fn train(cfg: &TrainConfig, data: &[Sample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(OrdError::Argument("training data must be non-empty".into()));
    }
    let k = cfg.model.num_classes;
    let batches_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_iter = if cfg.total_iter == 0 {
        cfg.epochs * batches_per_epoch
    } else {
        cfg.total_iter
    };
    let mut model = OrdNet::new(cfg.model.clone(), cfg.seed)?;
    let mut checkpoint = model.clone();
    let mut sgd = SgdState::new(cfg.momentum, cfg.weight_decay);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut iter = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let lr = poly_lr_raw(iter, total_iter, cfg.base_lr, cfg.power);
            let (loss, grads) = batch_gradients(&model, &batch, &cfg.loss)?;
            if !loss.is_finite() {
                return Ok(TrainOutcome {
                    model: checkpoint,
                    history,
                    diverged: true,
                });
            }
            for (name, param) in model.named_params_mut() {
                if let Some(g) = grads.get(&name) {
                    sgd.step(&name, param, g, lr);
                }
            }
            epoch_loss += loss;
            iter += 1;
        }
        let (miou, pixacc) = dataset_metrics(&model, data, k)?;
        history.push(EpochMetrics {
            epoch,
            loss: epoch_loss / batches_per_epoch as f64,
            miou,
            pixacc,
            lr: poly_lr_raw(iter.saturating_sub(1), total_iter, cfg.base_lr, cfg.power),
        });
        checkpoint = model.clone();
    }
    Ok(TrainOutcome {
        model,
        history,
        diverged: false,
    })
}

/// Central-difference gradient check of the full loss through the whole
/// network on one synthetic image. Narrow layer widths keep the parameter
/// count small enough for finite differences.
pub fn end_to_end_gradcheck(size: usize, num_classes: usize, seed: u64) -> Result<crate::tensor::GradReport> {
    let mut model_cfg = OrdNetConfig {
        num_classes,
        backbone_channels: [4, 6, 8],
        cq: 2,
        cv: 4,
        head_hidden: 8,
        ..OrdNetConfig::desk(num_classes)
    };
    model_cfg.mr.patches = 2;
    let data = synth_dataset(&SynthConfig::new(seed, 1, size, num_classes))?;
    let sample = &data[0];
    let template = OrdNet::new(model_cfg.clone(), seed)?;
    let params: Vec<(String, Tensor)> = template
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let loss_cfg = LossConfig::default();
    let run = |p: &[(String, Tensor)]| -> Result<(f64, Vec<Tensor>)> {
        let mut model = OrdNet::new(model_cfg.clone(), seed)?;
        for ((_, dst), (_, src)) in model.named_params_mut().into_iter().zip(p) {
            *dst = src.clone();
        }
        let mut tape = Tape::new();
        let (logits, leaves) = model.forward_on_tape(&mut tape, &sample.image)?;
        let (loss, _) = full_loss_on_tape(&mut tape, logits, &sample.mask, &loss_cfg)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let out = leaves
            .iter()
            .map(|(name, leaf)| {
                grads.get(*leaf).cloned().ok_or_else(|| {
                    OrdError::Evaluation(format!("no gradient for parameter {}", name))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((value, out))
    };
    crate::tensor::grad_check(
        &params,
        1e-5,
        |p| run(p).map(|(l, _)| l),
        |p| run(p).map(|(_, g)| g),
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub scales: Vec<f64>,
    #[serde(default)]
    pub flip: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            scales: vec![0.5, 0.75, 1.0, 1.25, 1.5, 1.75],
            flip: false,
        }
    }
}

impl EvalConfig {
    fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.iter().any(|&s| s <= 0.0) {
            return Err(OrdError::Argument(
                "scales must be non-empty and positive".into(),
            ));
        }
        Ok(())
    }
}

/// Logits for one image at one scale, mapped back to native resolution.
/// Scaled extents round to the nearest pixel; the network input is then
/// zero-padded up to the next multiple of 8 and the logits cropped back.
fn scaled_logits(model: &OrdNet, image: &Tensor, scale: f64) -> Result<Tensor> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let th = ((h as f64 * scale).round() as usize).max(1);
    let tw = ((w as f64 * scale).round() as usize).max(1);
    let resized = if th == h && tw == w {
        image.clone()
    } else {
        ops::resize_bilinear(image, th, tw)?
    };
    let padded = if th.is_multiple_of(8) && tw.is_multiple_of(8) {
        resized
    } else {
        ops::pad_to_multiple(&resized, 8)?
    };
    let logits = model.forward(&padded)?;
    let cropped = if logits.shape()[0] == th && logits.shape()[1] == tw {
        logits
    } else {
        ops::crop(&logits, th, tw)?
    };
    if th == h && tw == w {
        Ok(cropped)
    } else {
        ops::resize_bilinear(&cropped, h, w)
    }
}

/// Multi-scale (optionally flip-averaged) evaluation over a dataset.
pub fn evaluate_multiscale(
    model: &OrdNet,
    data: &[Sample],
    cfg: &EvalConfig,
) -> Result<(crate::losses::IouReport, f64)> {
    cfg.validate()?;
    let k = model.cfg.num_classes;
    let mut acc = MetricAccumulator::new(k);
    for sample in data {
        let (h, w) = (sample.image.shape()[0], sample.image.shape()[1]);
        let mut sum = Tensor::zeros(&[h, w, k]);
        let mut count = 0usize;
        for &scale in &cfg.scales {
            let logits = scaled_logits(model, &sample.image, scale)?;
            sum = ops::add(&sum, &logits)?;
            count += 1;
            if cfg.flip {
                let flipped = ops::flip_horizontal(&sample.image)?;
                let fl = scaled_logits(model, &flipped, scale)?;
                sum = ops::add(&sum, &ops::flip_horizontal(&fl)?)?;
                count += 1;
            }
        }
        let avg = ops::scale(&sum, 1.0 / count as f64);
        acc.add(&crate::losses::argmax_mask(&avg)?, &sample.mask)?;
    }
    Ok((acc.iou(), acc.pixel_accuracy()))
}
