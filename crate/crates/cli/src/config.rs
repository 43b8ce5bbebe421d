use std::path::Path;

use elrdyn_core::scenario::ScenarioConfig;

use crate::error::{CliError, Result};

/// Reads and validates a scenario file. Parse errors carry the line and
/// column reported by the JSON parser.
pub fn load(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse(&text).map_err(|msg| CliError::Config(format!("{}:{msg}", path.display())))
}

pub fn parse(text: &str) -> std::result::Result<ScenarioConfig, String> {
    let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| {
        let msg = e.to_string();
        // serde_json appends " at line L column C"; keep only the message
        let bare = msg
            .rsplit_once(" at line ")
            .map_or(msg.as_str(), |(m, _)| m);
        format!("{}:{}: {bare}", e.line(), e.column())
    })?;
    cfg.validate().map_err(|e| format!(" {e}"))?;
    Ok(cfg)
}
