use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use mechtest_core::Error;
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    Io(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    /// 2 for input problems, 3 when the identified set is empty, 4 when a
    /// solver fails.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(Error::Identification { .. }) => 3,
            CliError::Core(Error::Solver(_)) => 4,
            _ => 2,
        }
    }

    pub fn to_json(&self) -> Value {
        let (kind, message, suggested) = match self {
            CliError::Core(Error::Identification { message, suggested_dbar }) => {
                ("identification", message.clone(), *suggested_dbar)
            }
            CliError::Core(e) => (e.kind(), e.to_string(), None),
            CliError::Io(m) => ("io", m.clone(), None),
        };
        let mut err = json!({ "kind": kind, "message": message, "exit_code": self.exit_code() });
        if let Some(d) = suggested {
            err["suggested_dbar"] = json!(d);
        }
        json!({ "error": err })
    }
}

pub fn fail(e: &CliError) -> ExitCode {
    eprintln!("{}", e.to_json());
    ExitCode::from(e.exit_code())
}

pub fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Writes pretty JSON to `path`, or to stdout.
pub fn emit_json(value: &impl Serialize, path: Option<&Path>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("outputs serialize");
    match path {
        Some(p) => fs::write(p, text + "\n").map_err(|e| io_err(p, e)),
        None => {
            let mut out = std::io::stdout().lock();
            writeln!(out, "{text}").map_err(|e| CliError::Io(format!("stdout: {e}")))
        }
    }
}

pub fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    csv::Writer::from_path(path).map_err(|e| io_err(path, e))
}

pub fn finish_csv(mut w: csv::Writer<fs::File>, path: &Path) -> Result<(), CliError> {
    w.flush().map_err(|e| io_err(path, e))
}

/// `<path><suffix>`, keeping the full original file name.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn manifest_path(explicit: Option<&PathBuf>, out: Option<&PathBuf>) -> PathBuf {
    match (explicit, out) {
        (Some(p), _) => p.clone(),
        (None, Some(o)) => sibling(o, ".manifest.json"),
        (None, None) => PathBuf::from("mechtest-manifest.json"),
    }
}

#[derive(Debug, Serialize)]
pub struct InputInfo {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
    pub rows: usize,
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a, C: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub core_version: &'static str,
    pub command: &'a str,
    pub argv: &'a [String],
    pub config: &'a C,
    pub seed: Option<u64>,
    pub input: Option<&'a InputInfo>,
    pub outputs: Vec<String>,
}

impl<'a, C: Serialize> Manifest<'a, C> {
    pub fn new(command: &'a str, argv: &'a [String], config: &'a C) -> Self {
        Manifest {
            tool: "mechtest",
            version: env!("CARGO_PKG_VERSION"),
            core_version: mechtest_core::VERSION,
            command,
            argv,
            config,
            seed: None,
            input: None,
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        emit_json(self, Some(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        let ident = Error::Identification { message: "empty".into(), suggested_dbar: Some(0.3) };
        assert_eq!(CliError::Core(ident.clone()).exit_code(), 3);
        assert_eq!(CliError::Core(Error::Solver("cycling".into())).exit_code(), 4);
        for e in [
            Error::Structural(String::new()),
            Error::Estimation(String::new()),
            Error::Domain(String::new()),
            Error::Precondition(String::new()),
            Error::Degenerate(String::new()),
            Error::Unsupported(String::new()),
        ] {
            assert_eq!(CliError::Core(e).exit_code(), 2);
        }
        assert_eq!(CliError::Io("disk".into()).exit_code(), 2);
        let j = CliError::Core(ident).to_json();
        assert_eq!(j["error"]["suggested_dbar"], json!(0.3));
        assert_eq!(j["error"]["kind"], "identification");
    }

    #[test]
    fn sibling_keeps_extension() {
        assert_eq!(sibling(Path::new("out/run.json"), ".plot.csv"), PathBuf::from("out/run.json.plot.csv"));
    }
}
