//! Output files shared by the subcommands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use uavdet_core::exec;
use uavdet_core::ingest::write_atomic;
use uavdet_core::metrics::EvalConfig;
use uavdet_core::refine::RefineConfig;

use crate::CliError;

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const RUN_META_FILE: &str = "run_meta.json";

/// The effective settings of a run, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunConfig<'a, T: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub workers: usize,
    pub parallel: bool,
    pub settings: &'a T,
}

/// Settings read from `--config`. Missing fields take their defaults and
/// command-line flags override what is set here.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub workers: Option<usize>,
    pub refine: RefineConfig,
    pub eval: EvalConfig,
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

pub fn load_config(path: Option<&Path>) -> Result<ConfigFile, CliError> {
    path.map_or_else(|| Ok(ConfigFile::default()), read_json)
}

/// Flag, then config file, then all cores.
pub fn resolve_workers(flag: Option<usize>, file: Option<usize>) -> usize {
    let w = flag.or(file).unwrap_or(0);
    exec::configure_workers(w);
    if w == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        w
    }
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_owned(),
        source,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    Ok(write_atomic(path, text.as_bytes())?)
}

pub fn to_json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    write_text(path, &to_json(value))
}

/// Tracks a run's wall-clock times for the sidecar file.
pub struct Run {
    dir: PathBuf,
    started: SystemTime,
}

fn unix_ms(t: SystemTime) -> u128 {
    t.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

impl Run {
    /// Creates `dir` and writes the run config into it.
    pub fn start<T: Serialize>(
        dir: &Path,
        command: &str,
        workers: usize,
        settings: &T,
    ) -> Result<Self, CliError> {
        create_dir(dir)?;
        let cfg = RunConfig {
            tool: "uavdet",
            version: env!("CARGO_PKG_VERSION"),
            command,
            workers,
            parallel: exec::is_parallel(),
            settings,
        };
        write_json(&dir.join(RUN_CONFIG_FILE), &cfg)?;
        Ok(Self {
            dir: dir.to_owned(),
            started: SystemTime::now(),
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    pub fn finish(self) -> Result<(), CliError> {
        let meta = serde_json::json!({
            "started_unix_ms": unix_ms(self.started),
            "finished_unix_ms": unix_ms(SystemTime::now()),
        });
        write_json(&self.dir.join(RUN_META_FILE), &meta)
    }
}

/// Parses `WxH`.
pub fn parse_size(s: &str) -> Result<[u32; 2], String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<u32>().map_err(|e| format!("{v:?}: {e}"));
    let size = [parse(w)?, parse(h)?];
    if size.contains(&0) {
        return Err(format!("size {s:?} must be positive"));
    }
    Ok(size)
}
