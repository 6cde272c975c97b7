//! JSON config loading with key-path error messages.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{CliResult, Failure};

/// Reads `path` (exit 2 when unreadable) and parses it strictly (exit 1
/// naming the offending key). Without a path the defaults are used.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Runtime(format!("cannot read config {}: {e}", path.display())))?;
    parse(&text).map_err(|m| Failure::Usage(format!("config {}: {m}", path.display())))
}

pub fn parse<T: DeserializeOwned>(text: &str) -> Result<T, String> {
    let mut de = serde_json::Deserializer::from_str(text);
    let value = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let key = e.path().to_string();
        if key == "." {
            e.inner().to_string()
        } else {
            format!("key `{key}`: {}", e.inner())
        }
    })?;
    de.end().map_err(|e| e.to_string())?;
    Ok(value)
}

/// Semantic validation failures are usage errors.
pub fn check(result: r2d2::Result<()>) -> CliResult {
    result.map_err(|e| Failure::Usage(format!("invalid config: {e}")))
}

pub fn log_resolved<T: Serialize>(what: &str, value: &T) {
    match serde_json::to_string_pretty(value) {
        Ok(json) => log::info!("resolved {what}:\n{json}"),
        Err(e) => log::warn!("cannot print resolved {what}: {e}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use r2d2::TrainConfig;

    #[test]
    fn unknown_key_is_named() {
        let err = parse::<TrainConfig>(r#"{"loss": {"kapa": 0.5}}"#).unwrap_err();
        assert!(err.contains("loss.kapa"), "{err}");
    }

    #[test]
    fn mistyped_value_is_named() {
        let err = parse::<TrainConfig>(r#"{"batch_size": "eight"}"#).unwrap_err();
        assert!(err.contains("batch_size"), "{err}");
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        assert!(parse::<TrainConfig>("{} {}").is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: TrainConfig = parse(r#"{"iterations": 7}"#).unwrap();
        assert_eq!(cfg.iterations, 7);
        assert_eq!(cfg.batch_size, TrainConfig::default().batch_size);
    }
}
