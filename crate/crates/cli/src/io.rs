use std::fs;
use std::path::Path;

use crate::error::CliError;

pub fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))
}

pub fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::config(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))
}
