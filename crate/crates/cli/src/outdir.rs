use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::Fail;

pub const LOCK: &str = ".lock";
pub const CONFIG_ECHO: &str = "config.json";
pub const INPUTS: &str = "inputs.json";

/// Exclusive claim on an output directory, released on drop.
pub struct OutDir {
    pub path: PathBuf,
    lock: PathBuf,
}

impl OutDir {
    pub fn claim(path: &Path) -> Result<OutDir, Fail> {
        fs::create_dir_all(path).map_err(|e| Fail::io(path, e))?;
        let lock = path.join(LOCK);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => Fail::new(
                    1,
                    format!("{} is locked by another run (delete {} if it is stale)", path.display(), lock.display()),
                ),
                _ => Fail::io(&lock, e),
            })?;
        Ok(OutDir {
            path: path.to_path_buf(),
            lock,
        })
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), Fail> {
        let p = self.join(name);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| Fail::io(dir, e))?;
        }
        fs::write(&p, contents).map_err(|e| Fail::io(&p, e))
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

/// Provenance record written beside every command's outputs.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Inputs {
    pub command: String,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub args: BTreeMap<String, String>,
    /// sha256 of every input file, keyed by path.
    pub files: BTreeMap<String, String>,
}

impl Inputs {
    pub fn read(dir: &Path) -> Option<Inputs> {
        let text = fs::read_to_string(dir.join(INPUTS)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("inputs serialize") + "\n"
    }
}
