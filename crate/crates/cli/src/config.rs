use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Parsed `--config` file: one table per subcommand.
#[derive(Debug, Default)]
pub struct ConfigFile {
    root: Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let parsed: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        match serde_json::to_value(parsed)? {
            Value::Object(root) => Ok(Self { root }),
            _ => unreachable!("a TOML document is a table"),
        }
    }

    pub fn section(&self, name: &str) -> Option<&Map<String, Value>> {
        self.root.get(name).and_then(Value::as_object)
    }
}

fn explicit_entries(flags: Value) -> Map<String, Value> {
    match flags {
        Value::Object(map) => map
            .into_iter()
            .filter(|(_, v)| !matches!(v, Value::Null | Value::Bool(false)))
            .collect(),
        _ => Map::new(),
    }
}

/// Merge a config section under command-line flags. Flags that were given
/// win; unset options and `false` switches fall back to the file.
pub fn overlay<T: Serialize + DeserializeOwned>(flags: &T, section: Option<&Map<String, Value>>) -> Result<T> {
    let mut merged = section.cloned().unwrap_or_default();
    merged.extend(explicit_entries(serde_json::to_value(flags)?));
    serde_json::from_value(Value::Object(merged)).context("config file has a key of the wrong type")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    struct Demo {
        m: Option<usize>,
        k: Option<usize>,
        verbose: bool,
    }

    fn section(text: &str) -> Map<String, Value> {
        let t: toml::Table = toml::from_str(text).unwrap();
        serde_json::to_value(t).unwrap().as_object().unwrap().clone()
    }

    #[test]
    fn flags_win_over_file() {
        let file = section("m = 10\nk = 3\nverbose = true");
        let flags = Demo { m: Some(20), ..Default::default() };
        assert_eq!(overlay(&flags, Some(&file)).unwrap(), Demo { m: Some(20), k: Some(3), verbose: true });
    }

    #[test]
    fn no_file_keeps_flags() {
        let flags = Demo { k: Some(4), ..Default::default() };
        assert_eq!(overlay(&flags, None).unwrap(), flags);
    }

    #[test]
    fn wrong_type_is_an_error() {
        let file = section("m = \"many\"");
        assert!(overlay(&Demo::default(), Some(&file)).is_err());
    }
}
