use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, IoContext, Result};

/// Writes through a sibling temporary file and a rename, so readers never
/// see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).at(&tmp)?;
    std::fs::rename(&tmp, path).at(path)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).at(path)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).at(path)?;
    serde_json::from_str(&text).at(path)
}

/// Prepares an output directory. An existing non-empty directory is only
/// replaced with `force`, and only if it carries one of `markers`, files
/// this tool writes into the directories it owns.
pub fn prepare_dir(dir: &Path, force: bool, markers: &[&str]) -> Result<()> {
    match std::fs::read_dir(dir) {
        Ok(mut entries) => {
            if entries.next().is_some() {
                if !force {
                    return Err(Error::Usage(format!("{} exists and is not empty (use --force)", dir.display())));
                }
                if !markers.iter().any(|m| dir.join(m).is_file()) {
                    return Err(Error::Usage(format!(
                        "refusing to replace {}: it was not written by this tool (no {})",
                        dir.display(),
                        markers.join(" or ")
                    )));
                }
                std::fs::remove_dir_all(dir).at(dir)?;
            }
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
        Err(e) => return Err(e).at(dir),
    }
    std::fs::create_dir_all(dir).at(dir)
}
