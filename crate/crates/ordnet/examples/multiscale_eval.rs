//! Multi-scale, flip-averaged evaluation protocol on synthetic data.

use ordnet::harness::{evaluate_multiscale, synth_dataset, train, EvalConfig, SynthConfig, TrainConfig};
use ordnet::losses::LossConfig;
use ordnet::network::OrdNetConfig;

fn main() -> ordnet::Result<()> {
    let data = synth_dataset(&SynthConfig::new(5, 8, 32, 4))?;
    let cfg = TrainConfig {
        base_lr: 0.1,
        power: 0.9,
        momentum: 0.9,
        weight_decay: 1e-4,
        epochs: 8,
        batch_size: 4,
        total_iter: 0,
        seed: 2,
        loss: LossConfig::default(),
        model: OrdNetConfig::desk(4),
    };
    let model = train(&cfg, &data)?.model;

    let single = EvalConfig {
        scales: vec![1.0],
        flip: false,
    };
    let (iou, pix) = evaluate_multiscale(&model, &data, &single)?;
    println!("protocol=single_scale miou={:.4} pixacc={:.4}", iou.miou, pix);

    let full = EvalConfig {
        flip: true,
        ..EvalConfig::default()
    };
    let (iou, pix) = evaluate_multiscale(&model, &data, &full)?;
    println!(
        "protocol=six_scales_flip scales={:?} miou={:.4} pixacc={:.4}",
        full.scales, iou.miou, pix
    );
    Ok(())
}
