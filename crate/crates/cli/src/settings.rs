use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

/// Values from the `--config` file, overridden by explicit flags. Every
/// resolved value is remembered so it can be echoed next to the outputs.
pub struct Settings {
    file: Map<String, Value>,
    effective: Map<String, Value>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Settings, CliError> {
        let file = match path {
            None => Map::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                match serde_json::from_str(&text) {
                    Ok(Value::Object(m)) => m,
                    Ok(_) => return Err(CliError::Config(format!("{}: expected a JSON object", p.display()))),
                    Err(e) => return Err(CliError::Config(format!("{}: {e}", p.display()))),
                }
            }
        };
        Ok(Settings { file, effective: Map::new() })
    }

    /// `flag`, else the config value under `key`, else `default`.
    pub fn pick<T: Serialize + DeserializeOwned>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError> {
        let v = match flag {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(raw) => serde_json::from_value(raw.clone())
                    .map_err(|e| CliError::Config(format!("config key {key:?}: {e}")))?,
                None => default,
            },
        };
        self.record(key, &v);
        Ok(v)
    }

    /// A config value that is not echoed (paths that differ between runs).
    pub fn peek<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.file
            .get(key)
            .map(|raw| serde_json::from_value(raw.clone()).map_err(|e| CliError::Config(format!("config key {key:?}: {e}"))))
            .transpose()
    }

    pub fn record<T: Serialize>(&mut self, key: &str, v: &T) {
        self.effective.insert(key.to_string(), serde_json::to_value(v).expect("serializable"));
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join("effective_config.json");
        let text = serde_json::to_string_pretty(&Value::Object(self.effective.clone())).expect("json") + "\n";
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"seed": 7, "capacity": 100}"#).unwrap();
        let mut s = Settings::load(Some(&p)).unwrap();
        assert_eq!(s.pick("seed", Some(1u64), 0).unwrap(), 1);
        assert_eq!(s.pick("capacity", None, 5usize).unwrap(), 100);
        assert_eq!(s.pick("lo", None, 0.25f64).unwrap(), 0.25);
        s.write(dir.path()).unwrap();
        let echoed: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("effective_config.json")).unwrap()).unwrap();
        assert_eq!(echoed["seed"], 1);
        assert_eq!(echoed["capacity"], 100);
    }

    #[test]
    fn non_object_config_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, "[1]").unwrap();
        assert!(matches!(Settings::load(Some(&p)), Err(CliError::Config(_))));
    }
}
