//! Settings precedence: flags > env > config file > defaults.
//!
//! Clap resolves flags, env and defaults. Config-file values are then
//! appended as flags for every argument whose value still comes from its
//! default, and the command line is parsed again.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, CommandFactory, FromArgMatches};

use crate::Cli;

pub enum ParseFailure {
    Clap(clap::Error),
    Config(String),
}

fn matches(argv: &[OsString]) -> Result<ArgMatches, ParseFailure> {
    Cli::command().try_get_matches_from(argv).map_err(ParseFailure::Clap)
}

fn explicit(m: &ArgMatches, id: &str) -> bool {
    matches!(m.try_get_raw(id), Ok(Some(_)))
        && matches!(m.value_source(id), Some(ValueSource::CommandLine | ValueSource::EnvVariable))
}

fn push_value(extra: &mut Vec<OsString>, flag: &str, value: &toml::Value) -> Result<(), String> {
    match value {
        toml::Value::Boolean(true) => extra.push(format!("--{flag}").into()),
        toml::Value::Boolean(false) => {}
        toml::Value::String(s) => extra.push(format!("--{flag}={s}").into()),
        toml::Value::Integer(i) => extra.push(format!("--{flag}={i}").into()),
        toml::Value::Float(f) => extra.push(format!("--{flag}={f:e}").into()),
        toml::Value::Array(items) => {
            for item in items {
                push_value(extra, flag, item)?;
            }
        }
        other => return Err(format!("config key `{flag}` has unsupported value {other}")),
    }
    Ok(())
}

fn append(extra: &mut Vec<OsString>, m: &ArgMatches, table: &toml::Table, skip_tables: bool) -> Result<(), String> {
    for (key, value) in table {
        if value.is_table() {
            if skip_tables {
                continue;
            }
            return Err(format!("config key `{key}` may not be a table here"));
        }
        let id = key.replace('-', "_");
        if id == "config" {
            return Err("config files may not name another config file".into());
        }
        if !explicit(m, &id) {
            push_value(extra, &key.replace('_', "-"), value)?;
        }
    }
    Ok(())
}

/// Parses the command line and merges the config file, if any.
pub fn parse(argv: &[OsString]) -> Result<(Cli, Option<PathBuf>), ParseFailure> {
    let first = matches(argv)?;
    let Some(path) = first.get_one::<PathBuf>("config").cloned() else {
        return Cli::from_arg_matches(&first).map(|c| (c, None)).map_err(ParseFailure::Clap);
    };
    let table = load(&path).map_err(ParseFailure::Config)?;
    let (sub_name, sub_matches) = first.subcommand().expect("subcommand is required");
    let mut extra = Vec::new();
    append(&mut extra, &first, &table, true).map_err(ParseFailure::Config)?;
    if let Some(section) = table.get(sub_name) {
        let section = section.as_table().ok_or_else(|| ParseFailure::Config(format!("`{sub_name}` must be a table")))?;
        append(&mut extra, sub_matches, section, false).map_err(ParseFailure::Config)?;
    }
    let mut full = argv.to_vec();
    full.extend(extra);
    let merged = matches(&full)?;
    Cli::from_arg_matches(&merged).map(|c| (c, Some(path))).map_err(ParseFailure::Clap)
}

fn load(path: &Path) -> Result<toml::Table, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    text.parse::<toml::Table>().map_err(|e| format!("invalid config {}: {e}", path.display()))
}
