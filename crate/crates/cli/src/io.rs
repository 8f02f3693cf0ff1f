use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use tap_core::AttributeTree;

use crate::error::{CliError, CliResult};

/// Reads a file named on the command line; a missing file is an argument error.
pub fn read_input(path: &Path, what: &str) -> CliResult<String> {
    if !path.is_file() {
        return Err(CliError::args(format!("{what} {} does not exist", path.display())));
    }
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn load_config<C: DeserializeOwned>(path: &Path) -> CliResult<C> {
    let text = read_input(path, "config")?;
    serde_json::from_str(&text).map_err(|e| CliError::args(format!("{}: {e}", path.display())))
}

pub fn read_tree(path: &Path) -> CliResult<AttributeTree> {
    let text = read_input(path, "tree")?;
    Ok(AttributeTree::parse(text.as_bytes())?)
}

pub fn write_text(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    write_text(path, &text)
}

pub fn write_jsonl<S: Serialize>(path: &Path, rows: &[S]) -> CliResult<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).expect("serializable"));
        text.push('\n');
    }
    write_text(path, &text)
}
