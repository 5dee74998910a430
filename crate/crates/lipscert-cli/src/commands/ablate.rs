use std::path::PathBuf;

use clap::Args;
use lipscert::dataset::synth_dataset;
use lipscert::train::{ablation_sweep, AblationAxis, TrainOptions};
use lipscert::RngStream;

use crate::{CmdError, CmdResult};

#[derive(Args)]
pub struct AblateArgs {
    /// Axis to sweep: norm, attn, alpha, droppath, warmup, or init.
    #[arg(long)]
    pub axis: String,
    /// Comma-separated values for the axis.
    #[arg(long)]
    pub values: String,
    /// Base model config JSON (built-in toy config when omitted).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Steps per run (short by default so sweeps stay desk-scale).
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    /// Output table CSV.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: AblateArgs) -> CmdResult {
    let axis = AblationAxis::parse(&args.axis).ok_or_else(|| {
        CmdError::Usage(format!(
            "unknown axis {:?}; available: norm, attn, alpha, droppath, warmup, init",
            args.axis
        ))
    })?;
    let values: Vec<String> = args
        .values
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(CmdError::Usage("--values must be a nonempty CSV list".into()));
    }
    if args.steps == 0 {
        return Err(CmdError::Usage("--steps must be >= 1".into()));
    }
    let config = super::load_config(args.config.as_deref())?;
    let mut data_rng = RngStream::new(config.seed, 1);
    let data = synth_dataset(
        config.n_classes,
        super::train::DATASET_PER_CLASS,
        config.image_size,
        super::train::DATASET_NOISE_STD,
        &mut data_rng,
    )
    .map_err(|e| CmdError::Usage(e.to_string()))?;
    let opts = TrainOptions {
        steps: args.steps,
        eval_every: 0,
        ..TrainOptions::default()
    };
    let rows = ablation_sweep(axis, &config, &values, &opts, &data)
        .map_err(|e| CmdError::Usage(e.to_string()))?;
    let mut csv = String::from("axis,value,verdict,final_loss,final_eval_acc,steps_completed,nan\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.axis,
            r.value,
            r.verdict,
            r.final_loss,
            r.final_eval_accuracy
                .map(|a| a.to_string())
                .unwrap_or_else(|| "NaN".into()),
            r.steps_completed,
            if r.nan { 1 } else { 0 }
        ));
        eprintln!("{} = {}: {}", r.axis, r.value, r.verdict);
    }
    std::fs::write(&args.out, csv)
        .map_err(|e| CmdError::Usage(format!("cannot write {}: {e}", args.out.display())))?;
    Ok(())
}
