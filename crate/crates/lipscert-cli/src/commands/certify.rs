use std::path::PathBuf;

use clap::Args;
use lipscert::cert::{certify_model, CertOptions, PNorm};
use lipscert::model::build_model;
use lipscert::{Error, RngStream};

use crate::{thread_cap, CmdError, CmdResult};

#[derive(Args)]
pub struct CertifyArgs {
    /// Model config JSON (built-in toy config when omitted).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of global/local sample pairs per norm.
    #[arg(long, default_value_t = 1000)]
    pub pairs: usize,
    /// Number of finite-difference Jacobian probe points per norm.
    #[arg(long, default_value_t = 32)]
    pub jac_points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Norm to certify under: 2, inf, or both.
    #[arg(long, default_value = "both")]
    pub norm: String,
    /// Write the CertReport JSON here (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: CertifyArgs) -> CmdResult {
    if args.pairs == 0 {
        return Err(CmdError::Usage("--pairs must be >= 1".into()));
    }
    let norms = match args.norm.as_str() {
        "2" => vec![PNorm::Two],
        "inf" => vec![PNorm::Inf],
        "both" => vec![PNorm::Two, PNorm::Inf],
        other => {
            return Err(CmdError::Usage(format!(
                "--norm must be 2, inf, or both, got {other}"
            )))
        }
    };
    let config = super::load_config(args.config.as_deref())?;
    let mut rng = RngStream::new(config.seed, 0);
    let model = build_model(&config, &mut rng)
        .map_err(|e| CmdError::Usage(format!("cannot build model: {e}")))?;
    let opts = CertOptions {
        pairs: args.pairs,
        jac_points: args.jac_points,
        seed: args.seed,
        norms,
        threads: thread_cap()?,
    };
    let report = match certify_model(&model, &opts) {
        Ok(r) => r,
        Err(e @ Error::NonLipschitz(_)) => return Err(CmdError::Domain(e.to_string())),
        Err(e) => return Err(CmdError::Usage(e.to_string())),
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CmdError::Usage(format!("serialization failed: {e}")))?;
    match &args.out {
        Some(path) => std::fs::write(path, json.as_bytes())
            .map_err(|e| CmdError::Usage(format!("cannot write {}: {e}", path.display())))?,
        None => println!("{json}"),
    }
    for b in &report.bounds {
        eprintln!(
            "norm {}: theoretical {:.6e}, empirical {}, dominance {}",
            b.p_norm.name(),
            b.theoretical,
            b.empirical_value
                .map(|v| format!("{v:.6e}"))
                .unwrap_or_else(|| "diverged".into()),
            if b.dominance_pass { "pass" } else { "FAIL" }
        );
    }
    if report.pass {
        Ok(())
    } else {
        Err(CmdError::Domain("certification failed (see report)".into()))
    }
}
