//! Flat `key = value` config files with command-line overrides.
//!
//! A file holds top-level keys only: scalars and arrays, no tables. Each
//! `--set key=value` replaces or adds one key; the value uses the same
//! syntax as the file, and anything that does not parse is taken as a bare
//! string. Unknown keys are rejected.

use std::path::Path;

use serde::de::DeserializeOwned;
use toml::{Table, Value};

use crate::CliError;

/// The resolved config and the text to echo into manifests: the file as
/// written, followed by one comment line per override.
pub fn load<T: DeserializeOwned>(path: Option<&Path>, sets: &[String]) -> Result<(T, String), CliError> {
    let mut text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut table: Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(format!("config: {}", e.message())))?;
    if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
        return Err(CliError::Config(format!("config key {k} is a table; only flat keys are allowed")));
    }
    if table.contains_key("seed") {
        return Err(CliError::Config("config key seed is not allowed; pass --seed".into()));
    }
    for s in sets {
        let (key, raw) = s.split_once('=').ok_or_else(|| CliError::Config(format!("--set {s}: expected key=value")))?;
        let key = key.trim();
        if key.is_empty() || key == "seed" {
            return Err(CliError::Config(format!("--set {s}: not an overridable key")));
        }
        table.insert(key.to_string(), parse_value(raw.trim()));
        if !text.is_empty() && !text.ends_with('\n') {
            text.push('\n');
        }
        text.push_str(&format!("# --set {key}={}\n", raw.trim()));
    }
    let cfg = T::deserialize(Value::Table(table)).map_err(|e| CliError::Config(format!("config: {}", e.message())))?;
    Ok((cfg, text))
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use serde::Deserialize;

    use super::*;

    #[derive(Debug, Deserialize, PartialEq)]
    #[serde(default, deny_unknown_fields)]
    struct Demo {
        lr: f64,
        steps: usize,
        name: String,
        sizes: Vec<usize>,
    }

    impl Default for Demo {
        fn default() -> Self {
            Self { lr: 0.1, steps: 3, name: "a".into(), sizes: vec![1] }
        }
    }

    fn write(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn file_then_overrides() {
        let f = write("lr = 0.5\nsizes = [2, 3]\n");
        let (d, text): (Demo, _) = load(Some(f.path()), &["steps=9".into(), "name=bob".into()]).unwrap();
        assert_eq!(d, Demo { lr: 0.5, steps: 9, name: "bob".into(), sizes: vec![2, 3] });
        assert!(text.starts_with("lr = 0.5\nsizes = [2, 3]\n"));
        assert!(text.ends_with("# --set steps=9\n# --set name=bob\n"));
    }

    #[test]
    fn defaults_without_file() {
        let (d, text): (Demo, _) = load(None, &[]).unwrap();
        assert_eq!(d, Demo::default());
        assert!(text.is_empty());
    }

    #[test]
    fn unknown_keys_tables_and_bad_values_are_config_errors() {
        let f = write("lr = 0.5\nwarmup = 3\n");
        assert!(matches!(load::<Demo>(Some(f.path()), &[]), Err(CliError::Config(m)) if m.contains("warmup")));
        let f = write("[model]\ndim = 3\n");
        assert!(matches!(load::<Demo>(Some(f.path()), &[]), Err(CliError::Config(_))));
        assert!(matches!(load::<Demo>(None, &["steps=-1".into()]), Err(CliError::Config(_))));
        assert!(matches!(load::<Demo>(None, &["steps".into()]), Err(CliError::Config(_))));
        assert!(matches!(load::<Demo>(None, &["seed=3".into()]), Err(CliError::Config(_))));
        let f = write("seed = 3\n");
        assert!(matches!(load::<Demo>(Some(f.path()), &[]), Err(CliError::Config(_))));
        assert!(matches!(load::<Demo>(Some(Path::new("/nonexistent/x.toml")), &[]), Err(CliError::Config(_))));
    }
}
