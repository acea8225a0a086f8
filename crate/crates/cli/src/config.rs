//! Layered configuration: defaults, then a TOML file, then `key=value`
//! overrides from the command line.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::error::CliError;

/// Merges `over` into `base`, recursing into tables.
fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses one `dotted.key=value` override. The value is read as a TOML
/// literal and falls back to a plain string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value), CliError> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{s}` is not of the form key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(CliError::Usage(format!("override `{s}` has an empty key segment")));
    }
    let value = match toml::from_str::<Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("parsed table holds v"),
        Err(_) => Value::String(raw.trim().to_string()),
    };
    Ok((path, value))
}

fn set_path(table: &mut Table, path: &[String], value: Value) {
    let mut t = table;
    for seg in &path[..path.len() - 1] {
        let entry = t.entry(seg.clone()).or_insert_with(|| Value::Table(Table::new()));
        if !entry.is_table() {
            *entry = Value::Table(Table::new());
        }
        t = entry.as_table_mut().expect("just made a table");
    }
    t.insert(path[path.len() - 1].clone(), value);
}

/// Resolves a config of type `C`: `C::default()`, overlaid by `file` if
/// given, overlaid by `overrides` in order.
pub fn resolve<C>(file: Option<&Path>, overrides: &[(Vec<String>, Value)]) -> Result<C, CliError>
where
    C: Default + Serialize + DeserializeOwned,
{
    resolve_from(&C::default(), file, overrides)
}

/// Like [`resolve`] with `base` in place of the default.
pub fn resolve_from<C>(base: &C, file: Option<&Path>, overrides: &[(Vec<String>, Value)]) -> Result<C, CliError>
where
    C: Serialize + DeserializeOwned,
{
    let mut table = Table::try_from(base).map_err(|e| CliError::Usage(format!("base config: {e}")))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let over: Table = toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        merge(&mut table, over);
    }
    for (path, value) in overrides {
        set_path(&mut table, path, value.clone());
    }
    Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("config: {}", e.message())))
}

/// Writes the effective config as TOML.
pub fn echo<C: Serialize>(cfg: &C, path: &Path) -> Result<(), CliError> {
    let text = toml::to_string(cfg).map_err(|e| CliError::Usage(format!("config: {e}")))?;
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use semi2i::translation::TrainingConfig;

    #[test]
    fn precedence_flag_over_file_over_default() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.toml");
        std::fs::write(&f, "num_epochs = 7\nbase_lr = 0.5\n[network]\nbase_channels = 16\n").unwrap();
        let ov = vec![parse_override("num_epochs=3").unwrap(), parse_override("weights.lambda4=2.5").unwrap()];
        let c: TrainingConfig = resolve(Some(&f), &ov).unwrap();
        assert_eq!(c.num_epochs, 3);
        assert_eq!(c.base_lr, 0.5);
        assert_eq!(c.network.base_channels, 16);
        assert_eq!(c.weights.lambda4, 2.5);
        assert_eq!(c.d_rate, 0.95);
    }

    #[test]
    fn unknown_keys_and_bad_overrides_are_usage_errors() {
        let ov = vec![parse_override("no_such_field=1").unwrap()];
        assert!(matches!(resolve::<TrainingConfig>(None, &ov), Err(CliError::Usage(_))));
        assert!(parse_override("novalue").is_err());
        assert!(parse_override("a..b=1").is_err());
        let (_, v) = parse_override("x=hello").unwrap();
        assert_eq!(v, Value::String("hello".into()));
    }

    #[test]
    fn echo_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.toml");
        let c = TrainingConfig::default();
        echo(&c, &p).unwrap();
        let back: TrainingConfig = resolve(Some(&p), &[]).unwrap();
        assert_eq!(back, c);
    }
}
