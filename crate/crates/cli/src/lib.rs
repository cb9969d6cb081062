//! Library side of the `rangepc` binary: configuration, subcommands and
//! record rendering, callable in-process.

pub mod commands;
pub mod config;
pub mod output;

pub use commands::{Failure, SUBCOMMANDS};
pub use config::{Common, ConfigError, Format};
pub use output::Record;

/// Resolves flags (with an optional config file and seed fallback), runs the
/// subcommand and renders the record. With `threads` set the run gets its own
/// rayon pool of that size.
pub fn execute(
    name: &str,
    config_path: Option<std::path::PathBuf>,
    flags: serde_json::Map<String, serde_json::Value>,
    env_seed: Option<String>,
) -> Result<(Common, Record, String), Failure> {
    let (common, keys) = config::resolve(config_path, flags, env_seed)?;
    let record = match common.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Failure::Config(ConfigError(e.to_string())))?
            .install(|| commands::run(name, keys, common.seed))?,
        None => commands::run(name, keys, common.seed)?,
    };
    let text = record.render(common.format);
    Ok((common, record, text))
}
