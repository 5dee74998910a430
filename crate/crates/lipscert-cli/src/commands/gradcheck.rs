use clap::Args;
use lipscert::autodiff::{registry_check, REGISTRY_MODULES};

use crate::{CmdError, CmdResult};

#[derive(Args)]
pub struct GradcheckArgs {
    /// Operation to check (one of the registry names).
    #[arg(long)]
    pub module: String,
    /// Token count or spatial extent of the random instance.
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    /// Channel/feature dimension of the random instance.
    #[arg(long, default_value_t = 8)]
    pub d: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Pass threshold on the max relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(args: GradcheckArgs) -> CmdResult {
    if !REGISTRY_MODULES.contains(&args.module.as_str()) {
        return Err(CmdError::Usage(format!(
            "unknown module {:?}; available: {}",
            args.module,
            REGISTRY_MODULES.join(", ")
        )));
    }
    if args.step <= 0.0 || args.tol <= 0.0 {
        return Err(CmdError::Usage("--step and --tol must be positive".into()));
    }
    let report = registry_check(&args.module, args.n, args.d, args.step, args.tol, args.seed)
        .map_err(|e| CmdError::Usage(e.to_string()))?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    );
    if report.pass {
        Ok(())
    } else {
        Err(CmdError::Domain(format!(
            "gradient check failed: max relative error {} > tol {}",
            report.max_rel_err, report.tol
        )))
    }
}
