use std::path::PathBuf;

use clap::Args;
use lipscert::dataset::synth_dataset;
use lipscert::model::build_model;
use lipscert::train::{train, Schedule, TrainOptions, Verdict};
use lipscert::RngStream;

use crate::{CmdError, CmdResult};

/// Dataset defaults for the CLI runs.
pub const DATASET_PER_CLASS: usize = 64;
pub const DATASET_NOISE_STD: f64 = 0.5;

#[derive(Args)]
pub struct TrainArgs {
    /// Model config JSON (built-in toy config when omitted).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 2e-3)]
    pub lr: f64,
    /// 0 disables warmup (the headline setting).
    #[arg(long, default_value_t = 0)]
    pub warmup_steps: usize,
    /// Metrics CSV output path.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: TrainArgs) -> CmdResult {
    if args.steps == 0 {
        return Err(CmdError::Usage("--steps must be >= 1".into()));
    }
    if args.lr < 0.0 {
        return Err(CmdError::Usage("--lr must be nonnegative".into()));
    }
    let config = super::load_config(args.config.as_deref())?;
    let mut build_rng = RngStream::new(config.seed, 0);
    let mut model =
        build_model(&config, &mut build_rng).map_err(|e| CmdError::Usage(e.to_string()))?;
    let mut data_rng = RngStream::new(config.seed, 1);
    let data = synth_dataset(
        config.n_classes,
        DATASET_PER_CLASS,
        config.image_size,
        DATASET_NOISE_STD,
        &mut data_rng,
    )
    .map_err(|e| CmdError::Usage(e.to_string()))?;
    let opts = TrainOptions {
        steps: args.steps,
        lr: args.lr,
        schedule: Schedule::Cosine,
        warmup_steps: args.warmup_steps,
        ..TrainOptions::default()
    };
    let mut train_rng = RngStream::new(config.seed, 2);
    let metrics = train(&mut model, &data, &opts, &mut train_rng)
        .map_err(|e| CmdError::Usage(e.to_string()))?;
    std::fs::write(&args.out, metrics.to_csv())
        .map_err(|e| CmdError::Usage(format!("cannot write {}: {e}", args.out.display())))?;
    let last = metrics.rows.last().map(|r| r.loss).unwrap_or(f64::NAN);
    eprintln!(
        "verdict: {}; steps: {}; final loss: {last}; train acc: {}; eval acc: {}",
        metrics.verdict.as_str(),
        metrics.rows.len(),
        metrics
            .final_train_accuracy
            .map(|a| format!("{a:.4}"))
            .unwrap_or_else(|| "-".into()),
        metrics
            .final_eval_accuracy
            .map(|a| format!("{a:.4}"))
            .unwrap_or_else(|| "-".into()),
    );
    if metrics.verdict == Verdict::Diverged {
        Err(CmdError::Domain("training diverged".into()))
    } else {
        Ok(())
    }
}
