//! Artifact files: config header, then content, written once via a
//! temporary sibling and a rename.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::{CliError, RunConfig};

fn file_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::File {
        path: path.display().to_string(),
        source,
    }
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| file_err(path, e))
}

/// Writes `path` through `body`; a failed body leaves no file behind.
pub fn write_atomic<F>(path: &Path, body: F) -> Result<(), CliError>
where
    F: FnOnce(&mut dyn Write) -> Result<(), CliError>,
{
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Usage(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp: PathBuf = path.with_file_name(tmp_name);
    let result = (|| {
        let file = fs::File::create(&tmp).map_err(|e| file_err(&tmp, e))?;
        let mut w = BufWriter::new(file);
        body(&mut w)?;
        let file = w.into_inner().map_err(|e| file_err(&tmp, e.into_error()))?;
        file.sync_all().map_err(|e| file_err(&tmp, e))
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(e);
    }
    fs::rename(&tmp, path).map_err(|e| file_err(path, e))
}

/// `# ` lines carrying the seed and the effective configuration.
pub fn csv_header(cfg: &RunConfig, command: &str) -> String {
    format!("# command = {command}\n# seed = {}\n# config = {}\n", cfg.seed, cfg.echo())
}

/// CSV artifact: header block, then whatever `body` writes.
pub fn write_csv<F>(path: &Path, cfg: &RunConfig, command: &str, body: F) -> Result<(), CliError>
where
    F: FnOnce(&mut dyn Write) -> Result<(), CliError>,
{
    write_atomic(path, |w| {
        w.write_all(csv_header(cfg, command).as_bytes())
            .map_err(|e| file_err(path, e))?;
        body(w)
    })
}

/// JSON artifact: the object `doc` with a `run_config` entry added.
pub fn write_json(path: &Path, cfg: &RunConfig, command: &str, mut doc: Value) -> Result<(), CliError> {
    if let Value::Object(m) = &mut doc {
        m.insert(
            "run_config".into(),
            serde_json::json!({ "command": command, "seed": cfg.seed, "config": cfg }),
        );
    }
    write_atomic(path, |w| {
        serde_json::to_writer(&mut *w, &doc)?;
        writeln!(w).map_err(|e| file_err(path, e))
    })
}
