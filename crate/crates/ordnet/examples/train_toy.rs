//! Small end-to-end training run on synthetic blob data, with a checkpoint
//! round-trip at the end.

use ordnet::harness::{synth_dataset, train, SynthConfig, TrainConfig};
use ordnet::losses::LossConfig;
use ordnet::network::OrdNetConfig;

fn main() -> ordnet::Result<()> {
    let data = synth_dataset(&SynthConfig::new(3, 10, 32, 4))?;
    let cfg = TrainConfig {
        base_lr: 0.1,
        power: 0.9,
        momentum: 0.9,
        weight_decay: 1e-4,
        epochs: 10,
        batch_size: 5,
        total_iter: 0,
        seed: 1,
        loss: LossConfig::default(),
        model: OrdNetConfig::desk(4),
    };
    let outcome = train(&cfg, &data)?;
    for epoch in &outcome.history {
        println!("{}", epoch.to_kv());
    }
    println!("diverged={}", outcome.diverged);

    let dir = std::env::temp_dir().join("ordnet_train_toy_ckpt");
    outcome.model.save(&dir)?;
    let reloaded = ordnet::network::OrdNet::load(cfg.model.clone(), &dir)?;
    let same = outcome.model.forward(&data[0].image)? == reloaded.forward(&data[0].image)?;
    println!("checkpoint_roundtrip_identical={}", same);
    Ok(())
}
