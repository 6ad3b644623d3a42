use std::fs;
use std::path::Path;

use anyhow::anyhow;
use serde::de::DeserializeOwned;

use crate::CliError;

/// Parses one JSON document, naming the offending field on failure.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T, String> {
    let mut de = serde_json::Deserializer::from_str(text);
    let value = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        format!("field `{path}`: {}", e.into_inner())
    })?;
    de.end().map_err(|e| e.to_string())?;
    Ok(value)
}

pub(crate) fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(anyhow!("{}: {e}", path.display())))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = read_text(path)?;
    parse_json(&text).map_err(|m| CliError::Usage(anyhow!("{}: {m}", path.display())))
}
