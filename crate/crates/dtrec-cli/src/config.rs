//! Flat `key = value` run configuration with sections per module.
//!
//! A config file is TOML restricted to two levels: top-level scalars (`seed`)
//! and one table per module (`[backbone]`, `[train]`, …). `--set a.b=v` flags
//! override file values. Every key a command reads — whether it came from the
//! file, a flag, or a default — is recorded, and `resolved_toml` echoes the
//! complete picture into the run directory so an archived run is exactly
//! re-runnable. Keys nobody read are rejected: a typo'd section or option
//! aborts the run instead of silently meaning "default".

use crate::CliError;
use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use toml::Value;

pub struct FlatConfig {
    root: toml::Table,
    consumed: RefCell<BTreeSet<String>>,
    resolved: RefCell<BTreeMap<String, Value>>,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl FlatConfig {
    /// Read a config file (optional) and layer `--set key=value` overrides
    /// and the `--seed` shorthand on top.
    pub fn load(
        path: Option<&Path>,
        overrides: &[String],
        seed: Option<u64>,
    ) -> Result<Self, CliError> {
        let mut root = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| usage(format!("config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| usage(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for spec in overrides {
            let (key, raw) = spec
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {spec:?}")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(usage(format!("--set expects KEY=VALUE, got {spec:?}")));
            }
            set_path(&mut root, key, parse_value(raw.trim()))?;
        }
        if let Some(s) = seed {
            root.insert("seed".into(), Value::Integer(s as i64));
        }
        Ok(FlatConfig {
            root,
            consumed: RefCell::new(BTreeSet::new()),
            resolved: RefCell::new(BTreeMap::new()),
        })
    }

    fn lookup(&self, path: &str) -> Option<&Value> {
        let (first, rest) = match path.split_once('.') {
            Some((f, r)) => (f, Some(r)),
            None => (path, None),
        };
        let v = self.root.get(first)?;
        match rest {
            None => Some(v),
            Some(r) => v.as_table()?.get(r),
        }
    }

    fn record(&self, path: &str, value: Value) {
        self.consumed.borrow_mut().insert(path.to_string());
        self.resolved.borrow_mut().insert(path.to_string(), value);
    }

    fn type_err(&self, path: &str, want: &str, got: &Value) -> CliError {
        usage(format!("config key {path} must be {want}, got `{got}`"))
    }

    pub fn has(&self, path: &str) -> bool {
        self.lookup(path).is_some()
    }

    pub fn u64_or(&self, path: &str, default: u64) -> Result<u64, CliError> {
        let v = match self.lookup(path) {
            None => default,
            Some(Value::Integer(i)) if *i >= 0 => *i as u64,
            Some(v) => return Err(self.type_err(path, "a non-negative integer", v)),
        };
        self.record(path, Value::Integer(v as i64));
        Ok(v)
    }

    pub fn usize_or(&self, path: &str, default: usize) -> Result<usize, CliError> {
        Ok(self.u64_or(path, default as u64)? as usize)
    }

    pub fn f64_or(&self, path: &str, default: f64) -> Result<f64, CliError> {
        let v = match self.lookup(path) {
            None => default,
            Some(Value::Float(f)) => *f,
            Some(Value::Integer(i)) => *i as f64,
            Some(v) => return Err(self.type_err(path, "a number", v)),
        };
        self.record(path, Value::Float(v));
        Ok(v)
    }

    pub fn bool_or(&self, path: &str, default: bool) -> Result<bool, CliError> {
        let v = match self.lookup(path) {
            None => default,
            Some(Value::Boolean(b)) => *b,
            Some(v) => return Err(self.type_err(path, "a boolean", v)),
        };
        self.record(path, Value::Boolean(v));
        Ok(v)
    }

    pub fn string_or(&self, path: &str, default: &str) -> Result<String, CliError> {
        let v = match self.lookup(path) {
            None => default.to_string(),
            Some(Value::String(s)) => s.clone(),
            Some(v) => return Err(self.type_err(path, "a string", v)),
        };
        self.record(path, Value::String(v.clone()));
        Ok(v)
    }

    pub fn usize_list_or(&self, path: &str, default: &[usize]) -> Result<Vec<usize>, CliError> {
        let v = match self.lookup(path) {
            None => default.to_vec(),
            Some(Value::Array(items)) => {
                let mut out = Vec::with_capacity(items.len());
                for it in items {
                    match it {
                        Value::Integer(i) if *i >= 0 => out.push(*i as usize),
                        other => {
                            return Err(self.type_err(path, "a list of non-negative integers", other))
                        }
                    }
                }
                out
            }
            Some(v) => return Err(self.type_err(path, "a list of non-negative integers", v)),
        };
        self.record(path, Value::Array(v.iter().map(|&i| Value::Integer(i as i64)).collect()));
        Ok(v)
    }

    pub fn u64_list_or(&self, path: &str, default: &[u64]) -> Result<Vec<u64>, CliError> {
        Ok(self.usize_list_or(path, &default.iter().map(|&x| x as usize).collect::<Vec<_>>())?
            .into_iter()
            .map(|x| x as u64)
            .collect())
    }

    pub fn string_list_or(&self, path: &str, default: &[&str]) -> Result<Vec<String>, CliError> {
        let v = match self.lookup(path) {
            None => default.iter().map(|s| s.to_string()).collect(),
            Some(Value::Array(items)) => {
                let mut out = Vec::with_capacity(items.len());
                for it in items {
                    match it {
                        Value::String(s) => out.push(s.clone()),
                        other => return Err(self.type_err(path, "a list of strings", other)),
                    }
                }
                out
            }
            Some(v) => return Err(self.type_err(path, "a list of strings", v)),
        };
        self.record(path, Value::Array(v.iter().map(|s| Value::String(s.clone())).collect()));
        Ok(v)
    }

    /// `[[data.classes]]`-style population segments, as raw tables; the caller
    /// interprets the fields and then records the resolved array via
    /// [`FlatConfig::record_value`].
    pub fn class_tables(&self, path: &str) -> Result<Option<Vec<toml::Table>>, CliError> {
        match self.lookup(path) {
            None => Ok(None),
            Some(Value::Array(items)) => {
                let mut out = Vec::with_capacity(items.len());
                for it in items {
                    match it {
                        Value::Table(t) => out.push(t.clone()),
                        other => return Err(self.type_err(path, "a list of tables", other)),
                    }
                }
                self.consumed.borrow_mut().insert(path.to_string());
                Ok(Some(out))
            }
            Some(v) => Err(self.type_err(path, "a list of tables", v)),
        }
    }

    /// Record a fully-resolved value for the echo (used where a getter built
    /// the value from multiple raw fields).
    pub fn record_value(&self, path: &str, value: Value) {
        self.record(path, value);
    }

    /// Fail on any key present in the file/flags that no getter consumed.
    pub fn reject_unknown(&self) -> Result<(), CliError> {
        let consumed = self.consumed.borrow();
        let mut unknown = Vec::new();
        for (k, v) in &self.root {
            match v {
                Value::Table(t) => {
                    for sub in t.keys() {
                        let path = format!("{k}.{sub}");
                        if !consumed.contains(&path) {
                            unknown.push(path);
                        }
                    }
                }
                _ => {
                    if !consumed.contains(k.as_str()) {
                        unknown.push(k.clone());
                    }
                }
            }
        }
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(usage(format!("unknown config key(s): {}", unknown.join(", "))))
        }
    }

    /// The complete effective configuration — every key read, with its final
    /// value — as a TOML document with deterministic ordering.
    pub fn resolved_toml(&self) -> String {
        let resolved = self.resolved.borrow();
        let mut top: Vec<(&String, &Value)> = Vec::new();
        let mut sections: BTreeMap<&str, Vec<(&str, &Value)>> = BTreeMap::new();
        for (path, value) in resolved.iter() {
            match path.split_once('.') {
                None => top.push((path, value)),
                Some((sec, key)) => sections.entry(sec).or_default().push((key, value)),
            }
        }
        let mut out = String::new();
        for (k, v) in top {
            let _ = writeln!(out, "{k} = {v}");
        }
        for (sec, kvs) in sections {
            let _ = writeln!(out, "\n[{sec}]");
            for (k, v) in kvs {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }
}

/// Parse an override value: anything that reads as a TOML literal (number,
/// boolean, array, quoted string) is taken as such; bare words fall back to
/// strings so `--set backbone.kind=gru` works unquoted.
fn parse_value(raw: &str) -> Value {
    if let Ok(table) = format!("x = {raw}").parse::<toml::Table>() {
        if let Some(v) = table.get("x") {
            return v.clone();
        }
    }
    Value::String(raw.to_string())
}

fn set_path(root: &mut toml::Table, path: &str, value: Value) -> Result<(), CliError> {
    match path.split_once('.') {
        None => {
            root.insert(path.to_string(), value);
        }
        Some((sec, key)) => {
            if key.contains('.') {
                return Err(usage(format!("config keys are at most section.key, got {path:?}")));
            }
            let entry = root
                .entry(sec.to_string())
                .or_insert_with(|| Value::Table(toml::Table::new()));
            match entry {
                Value::Table(t) => {
                    t.insert(key.to_string(), value);
                }
                _ => {
                    return Err(usage(format!(
                        "cannot set {path}: {sec} is not a section"
                    )))
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_from(text: &str, overrides: &[&str]) -> FlatConfig {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, text).unwrap();
        let ov: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        FlatConfig::load(Some(&p), &ov, None).unwrap()
    }

    #[test]
    fn overrides_beat_file_values_and_bare_words_are_strings() {
        let c = cfg_from(
            "seed = 1\n[backbone]\nd_model = 64\nkind = \"attention\"\n",
            &["backbone.d_model=32", "backbone.kind=gru"],
        );
        assert_eq!(c.u64_or("seed", 0).unwrap(), 1);
        assert_eq!(c.usize_or("backbone.d_model", 0).unwrap(), 32);
        assert_eq!(c.string_or("backbone.kind", "attention").unwrap(), "gru");
    }

    #[test]
    fn unread_keys_are_rejected_with_their_full_path() {
        let c = cfg_from("[trian]\nepochs = 3\n", &[]);
        let err = c.reject_unknown().unwrap_err();
        match err {
            CliError::Usage(msg) => assert!(msg.contains("trian.epochs"), "{msg}"),
            other => panic!("expected usage error, got {other:?}"),
        }
    }

    #[test]
    fn echo_contains_defaults_the_file_never_mentioned() {
        let c = cfg_from("[train]\nepochs = 3\n", &[]);
        c.u64_or("train.epochs", 200).unwrap();
        c.f64_or("train.lr", 1e-3).unwrap();
        c.u64_or("seed", 0).unwrap();
        c.reject_unknown().unwrap();
        let echo = c.resolved_toml();
        assert!(echo.contains("seed = 0"), "{echo}");
        assert!(echo.contains("epochs = 3"), "{echo}");
        assert!(echo.contains("lr = 0.001"), "{echo}");
        // The echo itself must be loadable config.
        echo.parse::<toml::Table>().unwrap();
    }

    #[test]
    fn type_mismatches_are_usage_errors() {
        let c = cfg_from("[backbone]\nd_model = \"big\"\n", &[]);
        assert!(matches!(c.usize_or("backbone.d_model", 64), Err(CliError::Usage(_))));
        let c = cfg_from("[data]\nbranching = [4, -1]\n", &[]);
        assert!(matches!(c.usize_list_or("data.branching", &[4]), Err(CliError::Usage(_))));
    }

    #[test]
    fn missing_file_is_a_usage_error() {
        let err =
            FlatConfig::load(Some(Path::new("/nonexistent/nope.toml")), &[], None).unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
    }

    #[test]
    fn array_overrides_parse_as_toml() {
        let c = cfg_from("", &["data.branching=[2, 3]", "ablate.seeds=[0,1]"]);
        assert_eq!(c.usize_list_or("data.branching", &[]).unwrap(), vec![2, 3]);
        assert_eq!(c.u64_list_or("ablate.seeds", &[]).unwrap(), vec![0, 1]);
    }
}
