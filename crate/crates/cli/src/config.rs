//! Config-file merging. File values are re-injected as flags so clap parses
//! and validates them exactly like command-line input; flags already on the
//! command line win.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, CommandFactory, FromArgMatches};
use log::info;

use crate::args::Cli;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Flag,
    File,
    Default,
}

impl Source {
    fn label(self) -> &'static str {
        match self {
            Source::Flag => "flag",
            Source::File => "config file",
            Source::Default => "default",
        }
    }
}

/// Parsed command line plus the origin of every subcommand parameter.
pub struct Resolved {
    pub cli: Cli,
    pub sources: BTreeMap<String, Source>,
    pub workspace_source: Source,
}

fn parse(argv: &[OsString]) -> Result<ArgMatches, CliError> {
    Cli::command()
        .try_get_matches_from(argv)
        .map_err(CliError::Clap)
}

fn from_command_line(m: &ArgMatches, id: &str) -> bool {
    matches!(
        m.value_source(id),
        Some(ValueSource::CommandLine) | Some(ValueSource::EnvVariable)
    )
}

fn read_table(path: &Path) -> Result<toml::Table, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    text.parse::<toml::Table>()
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

fn scalar(key: &str, value: &toml::Value) -> Result<String, CliError> {
    match value {
        toml::Value::String(s) => Ok(s.clone()),
        toml::Value::Integer(i) => Ok(i.to_string()),
        toml::Value::Float(f) => Ok(f.to_string()),
        toml::Value::Boolean(b) => Ok(b.to_string()),
        _ => Err(CliError::Usage(format!(
            "config key `{key}` must be a string, number or boolean"
        ))),
    }
}

pub fn resolve(argv: Vec<OsString>) -> Result<Resolved, CliError> {
    let first = parse(&argv)?;
    let (sub_name, sub_matches) = first
        .subcommand()
        .ok_or_else(|| CliError::Usage("missing subcommand".into()))?;
    let mut sources = BTreeMap::new();
    let mut extra: Vec<OsString> = Vec::new();
    let mut workspace_from_file: Option<PathBuf> = None;

    if let Some(path) = first.get_one::<PathBuf>("config") {
        let table = read_table(path)?;
        let mut command = Cli::command();
        command.build();
        for (key, value) in &table {
            match (key.as_str(), value) {
                ("workspace", toml::Value::String(w)) => {
                    workspace_from_file = Some(PathBuf::from(w))
                }
                ("workspace", _) => {
                    return Err(CliError::Usage(
                        "config key `workspace` must be a string".into(),
                    ))
                }
                (section, toml::Value::Table(_)) => {
                    if command.find_subcommand(section).is_none() {
                        return Err(CliError::Usage(format!(
                            "unknown config section `{section}`"
                        )));
                    }
                }
                (other, _) => return Err(CliError::Usage(format!("unknown config key `{other}`"))),
            }
        }
        if let Some(toml::Value::Table(section)) = table.get(sub_name) {
            let sub = command
                .find_subcommand(sub_name)
                .expect("parsed subcommand exists");
            for (key, value) in section {
                let arg = sub
                    .get_arguments()
                    .find(|a| a.get_long() == Some(key.as_str()) && !a.is_global_set())
                    .ok_or_else(|| {
                        CliError::Usage(format!("unknown config key `{sub_name}.{key}`"))
                    })?;
                if from_command_line(sub_matches, arg.get_id().as_str()) {
                    continue;
                }
                let long = key.as_str();
                let value = scalar(key, value)?;
                if arg.get_action().takes_values() {
                    extra.push(format!("--{long}").into());
                    extra.push(value.into());
                } else if value == "true" {
                    extra.push(format!("--{long}").into());
                } else if value != "false" {
                    return Err(CliError::Usage(format!(
                        "config key `{key}` must be a boolean"
                    )));
                }
                sources.insert(key.clone(), Source::File);
            }
        }
    }

    let matches = if extra.is_empty() {
        first.clone()
    } else {
        let mut full = argv.clone();
        full.extend(extra);
        parse(&full)?
    };
    let mut cli = Cli::from_arg_matches(&matches).map_err(CliError::Clap)?;

    let workspace_source = if from_command_line(&first, "workspace") {
        Source::Flag
    } else if let Some(w) = workspace_from_file {
        cli.workspace = w;
        Source::File
    } else {
        Source::Default
    };

    let sub = Cli::command()
        .find_subcommand(sub_name)
        .expect("parsed subcommand exists")
        .clone();
    for arg in sub.get_arguments() {
        let id = arg.get_id().as_str();
        let Some(long) = arg.get_long() else { continue };
        if id == "help" || arg.is_global_set() || sources.contains_key(long) {
            continue;
        }
        let source = if from_command_line(sub_matches, id) {
            Source::Flag
        } else {
            Source::Default
        };
        sources.insert(long.to_string(), source);
    }
    Ok(Resolved {
        cli,
        sources,
        workspace_source,
    })
}

impl Resolved {
    /// The effective configuration as a TOML document that `--config` accepts.
    pub fn effective_toml(&self) -> Result<String, CliError> {
        let args = self
            .cli
            .command
            .to_toml()
            .map_err(|e| CliError::Runtime(e.into()))?;
        let mut root = toml::Table::new();
        root.insert(
            "workspace".into(),
            toml::Value::String(self.cli.workspace.display().to_string()),
        );
        root.insert(self.cli.command.name().into(), args);
        toml::to_string(&root).map_err(|e| CliError::Runtime(e.into()))
    }

    pub fn log_sources(&self) {
        let name = self.cli.command.name();
        info!(
            "workspace = {} ({})",
            self.cli.workspace.display(),
            self.workspace_source.label()
        );
        let values = self.cli.command.to_toml().ok();
        for (key, source) in &self.sources {
            let value = values
                .as_ref()
                .and_then(|v| v.get(key))
                .map_or_else(|| "unset".to_string(), |v| v.to_string());
            info!("{name}.{key} = {value} ({})", source.label());
        }
    }
}
