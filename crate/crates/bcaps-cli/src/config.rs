//! Flag/config-file resolution and the exit-code mapping.
//!
//! Every option can come from the command line or from a `--config`
//! key=value file, flags taking precedence. Clap stores each flag as an
//! `Option`; the `pick*` helpers overlay the two sources and apply the
//! default last, so precedence is flag > config file > built-in.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bcaps::error::Error;

pub enum CliErr {
    /// Bad flags, unreadable config, missing input path. Exit 2.
    Usage(String),
    Lib(Error),
}

pub type CResult<T> = Result<T, CliErr>;

impl CliErr {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliErr::Usage(_) => 2,
            CliErr::Lib(e) => match e {
                Error::Divergence { .. } | Error::NonFiniteGrad { .. } => 3,
                Error::CheckpointParse { .. } | Error::CheckpointMismatch(_) => 4,
                _ => 1,
            },
        }
    }
}

impl fmt::Display for CliErr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliErr::Usage(msg) => write!(f, "{msg}"),
            CliErr::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliErr {
    fn from(e: Error) -> Self {
        CliErr::Lib(e)
    }
}

pub fn usage(msg: impl Into<String>) -> CliErr {
    CliErr::Usage(msg.into())
}

/// Key=value file contents. Keys are normalized to flag spelling
/// (underscores become hyphens); `take` consumes, so whatever is left at
/// `finish` is an unknown key and rejected.
pub struct Kv {
    entries: BTreeMap<String, String>,
    source: PathBuf,
}

impl Kv {
    pub fn empty() -> Kv {
        Kv {
            entries: BTreeMap::new(),
            source: PathBuf::new(),
        }
    }

    pub fn load(path: &Path) -> CResult<Kv> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            usage(format!("--config {}: {e}", path.display()))
        })?;
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                usage(format!(
                    "{}:{}: expected key=value, got '{line}'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            let key = key.trim().replace('_', "-");
            let value = value.trim().to_string();
            if entries.insert(key.clone(), value).is_some() {
                return Err(usage(format!(
                    "{}:{}: duplicate key '{key}'",
                    path.display(),
                    lineno + 1
                )));
            }
        }
        Ok(Kv {
            entries,
            source: path.to_path_buf(),
        })
    }

    pub fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn finish(self) -> CResult<()> {
        if let Some((key, _)) = self.entries.iter().next() {
            return Err(usage(format!(
                "{}: unknown key '{key}'",
                self.source.display()
            )));
        }
        Ok(())
    }
}

pub fn load_kv(path: Option<&Path>) -> CResult<Kv> {
    match path {
        Some(p) => Kv::load(p),
        None => Ok(Kv::empty()),
    }
}

/// Flag > config file > None. The config entry is consumed even when the
/// flag wins, so it never trips `finish`.
pub fn pick_opt<T>(flag: Option<T>, kv: &mut Kv, key: &str) -> CResult<Option<T>>
where
    T: FromStr,
    T::Err: fmt::Display,
{
    let from_file = kv.take(key);
    if flag.is_some() {
        return Ok(flag);
    }
    match from_file {
        Some(text) => text
            .parse()
            .map(Some)
            .map_err(|e| usage(format!("invalid value for {key}: {e}"))),
        None => Ok(None),
    }
}

pub fn pick<T>(flag: Option<T>, kv: &mut Kv, key: &str, default: T) -> CResult<T>
where
    T: FromStr,
    T::Err: fmt::Display,
{
    Ok(pick_opt(flag, kv, key)?.unwrap_or(default))
}

pub fn require_file(path: &Path, flag: &str) -> CResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{flag} {}: no such file", path.display())))
    }
}

pub fn require_dir(path: &Path, flag: &str) -> CResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{flag} {}: no such directory", path.display())))
    }
}

/// Output directory precedence: --out > config file > $BCAPS_OUT_DIR > runs.
pub fn resolve_out(flag: Option<PathBuf>, kv: &mut Kv) -> CResult<PathBuf> {
    Ok(pick_opt(flag, kv, "out")?
        .or_else(|| std::env::var_os("BCAPS_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs")))
}
