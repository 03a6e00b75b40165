//! Command implementations behind the `rankforge` binary.
//!
//! Every command resolves its flags into a full configuration, writes its
//! artifacts into an output directory and leaves one [`RunRecord`] JSON next to
//! them. Exit codes: 0 success, 1 domain failure, 2 usage error.

// NaN must fail validation, so `!(x > 0.0)` is intended.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use chrono::{DateTime, SecondsFormat, Utc};
use serde::Serialize;
use serde_json::Value;

pub mod args;
pub mod checkpoint;
pub mod commands;
pub mod parallel;
pub mod repro;
pub mod tausweep;

pub use args::{Cli, Command};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// A flag combination that cannot run. Maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Exit code for an error: bad configuration is a usage error, everything else a failure.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<rankforge_core::Error>() {
            if matches!(
                e,
                rankforge_core::Error::Config(_) | rankforge_core::Error::Sampling { .. }
            ) {
                return EXIT_USAGE;
            }
        }
    }
    EXIT_FAILURE
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub version: String,
    /// Fully resolved configuration, defaults included.
    pub config: Value,
    pub seed: Option<u64>,
    pub started_at: String,
    pub finished_at: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub outputs: Vec<String>,
    pub metrics: Value,
}

/// Bookkeeping for one command invocation.
pub struct Run {
    command: String,
    record_name: String,
    out_dir: PathBuf,
    started: DateTime<Utc>,
    config: Value,
    seed: Option<u64>,
    outputs: Vec<PathBuf>,
}

fn timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl Run {
    pub fn new(command: &str, out_dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(out_dir)
            .with_context(|| format!("creating output directory {}", out_dir.display()))?;
        Ok(Self {
            command: command.to_string(),
            record_name: format!("run_{command}.json"),
            out_dir: out_dir.to_path_buf(),
            started: Utc::now(),
            config: Value::Null,
            seed: None,
            outputs: Vec::new(),
        })
    }

    pub fn record_name(mut self, name: impl Into<String>) -> Self {
        self.record_name = name.into();
        self
    }

    pub fn configure(&mut self, config: impl Serialize, seed: Option<u64>) -> anyhow::Result<()> {
        self.config = serde_json::to_value(config)?;
        self.seed = seed;
        Ok(())
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    /// Writes `contents` to `name` inside the output directory and records the path.
    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<PathBuf> {
        let path = self.out_dir.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(path.clone());
        Ok(path)
    }

    pub fn produced(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    /// Writes the record for a finished run and returns its path.
    pub fn finish(self, result: &anyhow::Result<Value>) -> anyhow::Result<PathBuf> {
        let (status, error, metrics) = match result {
            Ok(m) => ("ok", None, m.clone()),
            Err(e) => ("failed", Some(format!("{e:#}")), Value::Null),
        };
        let record = RunRecord {
            command: self.command,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config,
            seed: self.seed,
            started_at: timestamp(self.started),
            finished_at: timestamp(Utc::now()),
            status: status.to_string(),
            error,
            outputs: self
                .outputs
                .iter()
                .map(|p| p.display().to_string())
                .collect(),
            metrics,
        };
        let path = self.out_dir.join(&self.record_name);
        fs::write(&path, serde_json::to_string_pretty(&record)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// Runs one parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Tausweep(a) => tausweep::run(&a),
        Command::Repro(a) => repro::run(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

/// Runs `body` inside a [`Run`], always leaving a record unless the flags were unusable.
pub(crate) fn with_record(
    run: Run,
    body: impl FnOnce(&mut Run) -> anyhow::Result<Value>,
) -> anyhow::Result<()> {
    let mut run = run;
    let result = body(&mut run);
    if let Err(e) = &result {
        if exit_code(e) == EXIT_USAGE {
            return result.map(|_| ());
        }
    }
    let path = run.finish(&result)?;
    eprintln!("run record: {}", path.display());
    result.map(|_| ())
}
