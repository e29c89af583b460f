//! Library side of the `oms-lab` binary: flag parsing, config layering,
//! manifests and the command bodies.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod args;
pub mod commands;
pub mod config;
pub mod manifest;

use std::path::Path;

use anyhow::Result;
use serde_json::{Map, Value};

use args::Cli;
use config::resolve;
use manifest::Manifest;

/// A bad flag, config value or combination of inputs. Exits with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Process exit code for an error returned by [`run`].
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let usage = err
        .chain()
        .any(|e| e.downcast_ref::<UsageError>().is_some());
    if usage {
        2
    } else {
        1
    }
}

/// Resolves the config for `command` and runs it.
pub fn dispatch(command: &str, file: Option<&Path>, flags: Map<String, Value>) -> Result<()> {
    match command {
        "schedule" => commands::schedule(&resolve(file, flags)?),
        "radius" => commands::radius(&resolve(file, flags)?),
        "gen-data" => commands::gen_data(&resolve(file, flags)?),
        "train-denoiser" => commands::train_denoiser_cmd(&resolve(file, flags)?),
        "train-oms" => commands::train_oms_cmd(&resolve(file, flags)?),
        "sample" => commands::sample(&resolve(file, flags)?),
        "report" => commands::report(&resolve(file, flags)?).map(|_| ()),
        "demo" => commands::demo(&resolve(file, flags)?),
        other => Err(UsageError(format!("unknown command `{other}`")).into()),
    }
}

/// Replays the command recorded in a manifest with its resolved config.
pub fn rerun(manifest: &Path) -> Result<()> {
    let m = Manifest::read(manifest)?;
    let Value::Object(config) = m.config else {
        return Err(UsageError(format!(
            "manifest {} has no config object",
            manifest.display()
        ))
        .into());
    };
    // The recorded config is complete, so neither the environment seed nor
    // defaults may shift it: it is applied as the top layer.
    dispatch(&m.command, None, config)
}

pub fn run(cli: Cli) -> Result<()> {
    let workers = cli.workers.max(1);
    oms_lab::par::with_workers(workers, move || match (&cli.from_manifest, &cli.command) {
        (Some(path), None) => rerun(path),
        (Some(_), Some(_)) => Err(UsageError("--from-manifest takes no subcommand".into()).into()),
        (None, Some(cmd)) => dispatch(cmd.name(), cli.config.as_deref(), cmd.overrides()),
        (None, None) => {
            Err(UsageError("a subcommand or --from-manifest is required".into()).into())
        }
    })
}
