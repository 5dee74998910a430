pub mod ablate;
pub mod certify;
pub mod gradcheck;
pub mod report;
pub mod train;

use std::path::Path;

use lipscert::model::ModelConfig;

use crate::CmdError;

/// Load a config file (strict JSON schema) or fall back to the built-in toy
/// config when no path is given.
pub fn load_config(path: Option<&Path>) -> Result<ModelConfig, CmdError> {
    let config = match path {
        None => ModelConfig::toy(),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CmdError::Usage(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CmdError::Usage(format!("invalid config {}: {e}", p.display())))?
        }
    };
    config
        .validate()
        .map_err(|e| CmdError::Usage(format!("invalid config: {e}")))?;
    Ok(config)
}
