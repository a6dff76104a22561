//! Command-line front end. All machine-readable output is line-oriented
//! `key=value` or CSV on stdout; diagnostics go to stderr.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage error,
//! 3 I/O or format error.

use clap::{Args, Parser, Subcommand};
use ordnet::analysis::{aggregate_correlation, flops_estimate, read_pgm};
use ordnet::harness::{
    end_to_end_gradcheck, evaluate_multiscale, synth_dataset, train, EvalConfig, SynthConfig,
    TrainConfig,
};
use ordnet::network::{OrdNet, OrdNetConfig};
use ordnet::{OrdError, Tensor};
use serde::Deserialize;
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "ordnet", version, about = "Omni-range dependency network toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of the end-to-end training gradient.
    Gradcheck {
        /// Image side length (multiple of 8).
        #[arg(long, default_value_t = 8)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Maximum accepted relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Train on synthetic data from a JSON config file.
    Train(TrainArgs),
    /// Multi-scale evaluation of a (fresh or checkpointed) model.
    Eval(EvalArgs),
    /// Dataset statistics and cost estimates.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Wall-clock timing of forward passes across configurations.
    Bench {
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        repeat: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file with TrainConfig fields plus an optional "data" section.
    #[arg(long)]
    config: std::path::PathBuf,
    /// Directory to write the final checkpoint into.
    #[arg(long)]
    out: Option<std::path::PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Comma-separated scale factors.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 0.75, 1.0, 1.25, 1.5, 1.75])]
    scales: Vec<f64>,
    /// Also average with horizontally flipped inputs.
    #[arg(long, default_value_t = false)]
    flip: bool,
    /// Checkpoint directory produced by `train --out`.
    #[arg(long)]
    checkpoint: Option<std::path::PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Aggregate patch correlation over a directory of PGM masks (CSV out).
    Corr {
        /// Partition grid P.
        #[arg(long, default_value_t = 2)]
        patches: usize,
        /// Directory containing .pgm label masks.
        mask_dir: std::path::PathBuf,
    },
    /// Analytic multiply-add counts for one attention module.
    Flops {
        #[arg(long, default_value_t = 60)]
        height: usize,
        #[arg(long, default_value_t = 60)]
        width: usize,
        #[arg(long, default_value_t = 2048)]
        channels: usize,
        #[arg(long, default_value_t = 256)]
        cq: usize,
        #[arg(long, default_value_t = 256)]
        ck: usize,
        #[arg(long, default_value_t = 512)]
        cv: usize,
        #[arg(long, default_value_t = 1)]
        patches: usize,
    },
}

/// Train config file layout: TrainConfig fields at the top level plus an
/// optional synthetic-dataset section.
#[derive(Deserialize)]
struct TrainFile {
    #[serde(flatten)]
    train: TrainConfig,
    #[serde(default = "default_data")]
    data: SynthConfig,
}

fn default_data() -> SynthConfig {
    SynthConfig::new(3, 20, 32, 4)
}

fn exit_code_for(err: &OrdError) -> ExitCode {
    match err {
        OrdError::Io(_) | OrdError::Format(_) => ExitCode::from(3),
        OrdError::Argument(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn run_gradcheck(size: usize, classes: usize, seed: u64, tolerance: f64) -> Result<ExitCode, OrdError> {
    let report = end_to_end_gradcheck(size, classes, seed)?;
    println!("max_rel_diff={:e}", report.max_rel_diff);
    println!("max_abs_diff={:e}", report.max_abs_diff);
    println!("parameters_checked={}", report.per_parameter.len());
    if report.passes(tolerance) {
        println!("gradcheck=pass");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("gradcheck=fail");
        Ok(ExitCode::from(1))
    }
}

fn run_train(args: &TrainArgs) -> Result<ExitCode, OrdError> {
    let text = std::fs::read_to_string(&args.config)?;
    let file: TrainFile = serde_json::from_str(&text)
        .map_err(|e| OrdError::Format(format!("config parse error: {}", e)))?;
    let data = synth_dataset(&file.data)?;
    let outcome = train(&file.train, &data)?;
    for epoch in &outcome.history {
        println!("{}", epoch.to_kv());
    }
    println!("diverged={}", outcome.diverged);
    if let Some(dir) = &args.out {
        outcome.model.save(dir)?;
        println!("checkpoint={}", dir.display());
    }
    Ok(if outcome.diverged {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    })
}

fn run_eval(args: &EvalArgs) -> Result<ExitCode, OrdError> {
    let data = synth_dataset(&SynthConfig::new(args.seed, args.n, args.size, args.classes))?;
    let model = match &args.checkpoint {
        Some(dir) => OrdNet::load(OrdNetConfig::desk(args.classes), dir)?,
        None => OrdNet::new(OrdNetConfig::desk(args.classes), args.seed)?,
    };
    let cfg = EvalConfig {
        scales: args.scales.clone(),
        flip: args.flip,
    };
    let (iou, pixacc) = evaluate_multiscale(&model, &data, &cfg)?;
    println!("miou={:.6}", iou.miou);
    println!("pixacc={:.6}", pixacc);
    for (c, v) in iou.per_class.iter().enumerate() {
        match v {
            Some(iou) => println!("iou_class_{}={:.6}", c, iou),
            None => println!("iou_class_{}=undefined", c),
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn run_corr(patches: usize, mask_dir: &std::path::Path) -> Result<ExitCode, OrdError> {
    let mut masks = Vec::new();
    let mut entries: Vec<_> = std::fs::read_dir(mask_dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(OrdError::Format(format!(
            "no .pgm masks found in {}",
            mask_dir.display()
        )));
    }
    for path in entries {
        masks.push(read_pgm(&path)?);
    }
    let corr = aggregate_correlation(masks.iter(), patches)?;
    print!("{}", corr.to_csv());
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn run_flops(
    height: usize,
    width: usize,
    channels: usize,
    cq: usize,
    ck: usize,
    cv: usize,
    patches: usize,
) -> Result<ExitCode, OrdError> {
    let report = flops_estimate(height, width, channels, cq, ck, cv, patches)?;
    println!("projections={}", report.projections);
    println!("attention_product={}", report.attention_product);
    println!("aggregation={}", report.aggregation);
    println!("total={}", report.total);
    Ok(ExitCode::SUCCESS)
}

fn run_bench(size: usize, repeat: usize, seed: u64) -> Result<ExitCode, OrdError> {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let image = Tensor::rand_uniform(&[size, size, 3], 0.0, 1.0, &mut rng);
    let variants: [(&str, OrdNetConfig); 3] = [
        ("basic_sa", OrdNetConfig::basic_sa(4)),
        ("ordnet_sum_fusion", {
            let mut cfg = OrdNetConfig::desk(4);
            cfg.fusion = ordnet::network::FusionMode::Sum;
            cfg
        }),
        ("ordnet_full", OrdNetConfig::desk(4)),
    ];
    for (name, cfg) in variants {
        let model = OrdNet::new(cfg, seed)?;
        let start = Instant::now();
        for _ in 0..repeat {
            let logits = model.forward(&image)?;
            std::hint::black_box(&logits);
        }
        let per_pass = start.elapsed().as_secs_f64() / repeat as f64;
        println!(
            "variant={} params={} forward_ms={:.3}",
            name,
            model.param_count(),
            per_pass * 1e3
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gradcheck {
            size,
            classes,
            seed,
            tolerance,
        } => run_gradcheck(*size, *classes, *seed, *tolerance),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Analyze(AnalyzeCommand::Corr { patches, mask_dir }) => {
            run_corr(*patches, mask_dir)
        }
        Command::Analyze(AnalyzeCommand::Flops {
            height,
            width,
            channels,
            cq,
            ck,
            cv,
            patches,
        }) => run_flops(*height, *width, *channels, *cq, *ck, *cv, *patches),
        Command::Bench { size, repeat, seed } => run_bench(*size, *repeat, *seed),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {}", err);
            exit_code_for(&err)
        }
    }
}
