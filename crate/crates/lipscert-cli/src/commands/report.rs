use std::path::PathBuf;

use clap::Args;

use crate::svg::{render_chart, Row};
use crate::{CmdError, CmdResult};

#[derive(Args)]
pub struct ReportArgs {
    /// Metrics CSV produced by `lipscert train`.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output SVG path.
    #[arg(long)]
    pub svg: PathBuf,
}

pub const METRICS_HEADER: &str = "step,loss,max_act,grad_norm,nan_flag";

/// Parse the metrics CSV (header `step,loss,max_act,grad_norm,nan_flag`).
pub fn parse_metrics_csv(text: &str) -> Result<Vec<Row>, CmdError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == METRICS_HEADER => {}
        other => {
            return Err(CmdError::Usage(format!(
                "bad metrics header: expected {METRICS_HEADER:?}, got {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(CmdError::Usage(format!(
                "row {}: expected 5 fields, got {}",
                i + 2,
                fields.len()
            )));
        }
        let parse = |s: &str, what: &str| -> Result<f64, CmdError> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CmdError::Usage(format!("row {}: bad {what} {s:?}", i + 2)))
        };
        rows.push(Row {
            step: parse(fields[0], "step")?,
            loss: parse(fields[1], "loss")?,
            max_act: parse(fields[2], "max_act")?,
        });
    }
    if rows.is_empty() {
        return Err(CmdError::Usage("metrics CSV contains no data rows".into()));
    }
    Ok(rows)
}

pub fn run(args: ReportArgs) -> CmdResult {
    let text = std::fs::read_to_string(&args.input)
        .map_err(|e| CmdError::Usage(format!("cannot read {}: {e}", args.input.display())))?;
    let rows = parse_metrics_csv(&text)?;
    let svg = render_chart(&rows);
    std::fs::write(&args.svg, svg.as_bytes())
        .map_err(|e| CmdError::Usage(format!("cannot write {}: {e}", args.svg.display())))?;
    Ok(())
}
