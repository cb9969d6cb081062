//! Experiment configuration: a JSON object from `--config`, overridden key by
//! key by `--key value` flags, then checked against a per-subcommand schema.

use std::fmt;
use std::path::PathBuf;

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

/// Anything that makes the run refuse to start.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<rangepc::error::Error> for ConfigError {
    fn from(e: rangepc::error::Error) -> Self {
        ConfigError(e.to_string())
    }
}

pub type ConfigResult<T> = Result<T, ConfigError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

/// Keys shared by every subcommand.
#[derive(Debug)]
pub struct Common {
    pub seed: u64,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub format: Format,
}

const COMMON_KEYS: [&str; 5] = ["config", "seed", "threads", "out", "format"];

/// Reads a flag value: JSON when it parses, a list when it has commas, a
/// string otherwise.
fn flag_value(raw: &str) -> Value {
    if let Ok(v) = serde_json::from_str::<Value>(raw) {
        return v;
    }
    if raw.contains(',') {
        return Value::Array(raw.split(',').map(|p| flag_value(p.trim())).collect());
    }
    Value::String(raw.to_string())
}

/// Parses `--key value` pairs into a map with keys lowercased and dashes
/// turned into underscores.
pub fn parse_flags(args: &[String]) -> ConfigResult<Map<String, Value>> {
    let mut out = Map::new();
    let mut it = args.iter();
    while let Some(k) = it.next() {
        let name = k
            .strip_prefix("--")
            .ok_or_else(|| ConfigError(format!("expected --key, found {k:?}")))?
            .to_lowercase()
            .replace('-', "_");
        let v = it.next().ok_or_else(|| ConfigError(format!("flag --{name} needs a value")))?;
        out.insert(name, flag_value(v));
    }
    Ok(out)
}

fn read_file(path: &PathBuf) -> ConfigResult<Map<String, Value>> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
    match serde_json::from_str::<Value>(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(ConfigError(format!("{} must hold a JSON object", path.display()))),
        Err(e) => Err(ConfigError(format!("{}: {e}", path.display()))),
    }
}

fn as_u64(v: &Value, key: &str) -> ConfigResult<u64> {
    match v {
        Value::Number(n) => n.as_u64(),
        Value::String(s) => s.parse().ok(),
        _ => None,
    }
    .ok_or_else(|| ConfigError(format!("{key} must be a non-negative integer, got {v}")))
}

fn as_string(v: &Value, key: &str) -> ConfigResult<String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        _ => Err(ConfigError(format!("{key} must be a string, got {v}"))),
    }
}

/// Merges the file and the flags and splits off the shared keys. The seed
/// falls back to RANGEPC_SEED and then to 0.
pub fn resolve(
    config_path: Option<PathBuf>,
    mut flags: Map<String, Value>,
    env_seed: Option<String>,
) -> ConfigResult<(Common, Map<String, Value>)> {
    let path = match flags.remove("config") {
        Some(v) => Some(PathBuf::from(as_string(&v, "config")?)),
        None => config_path,
    };
    let mut merged = match path {
        Some(p) => read_file(&p)?,
        None => Map::new(),
    };
    if merged.contains_key("config") {
        return Err(ConfigError("config files cannot name another config".into()));
    }
    for (k, v) in flags {
        merged.insert(k, v);
    }
    let seed = match merged.remove("seed") {
        Some(v) => as_u64(&v, "seed")?,
        None => match env_seed {
            Some(s) => s.trim().parse().map_err(|_| ConfigError(format!("RANGEPC_SEED={s:?} is not a u64")))?,
            None => 0,
        },
    };
    let threads = match merged.remove("threads") {
        Some(v) => {
            let n = as_u64(&v, "threads")? as usize;
            if n == 0 {
                return Err(ConfigError("threads must be at least 1".into()));
            }
            Some(n)
        }
        None => None,
    };
    let out = merged.remove("out").map(|v| as_string(&v, "out").map(PathBuf::from)).transpose()?;
    let format = match merged.remove("format") {
        None => Format::Csv,
        Some(v) => match as_string(&v, "format")?.as_str() {
            "csv" => Format::Csv,
            "json" => Format::Json,
            other => return Err(ConfigError(format!("format must be csv or json, got {other:?}"))),
        },
    };
    debug_assert!(COMMON_KEYS.iter().all(|k| !merged.contains_key(*k)));
    Ok((Common { seed, threads, out, format }, merged))
}

/// Deserialises the subcommand keys; unknown keys and type errors are
/// rejected by the schema.
pub fn schema<T: DeserializeOwned>(keys: Map<String, Value>) -> ConfigResult<T> {
    serde_json::from_value(Value::Object(keys)).map_err(|e| ConfigError(e.to_string()))
}

pub fn required<T>(v: Option<T>, key: &str) -> ConfigResult<T> {
    v.ok_or_else(|| ConfigError(format!("missing required key {key}")))
}
