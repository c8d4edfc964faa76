//! Stage manifests: input hashes recorded after a stage runs, so that a
//! rerun with unchanged inputs can be skipped.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageManifest {
    pub stage: String,
    pub tool_version: String,
    /// SHA-256 of the stage parameters as JSON.
    pub config_hash: String,
    /// SHA-256 per input file or directory.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_bytes(b: &[u8]) -> String {
    hex(&Sha256::digest(b))
}

pub fn hash_json<T: Serialize>(value: &T) -> String {
    hash_bytes(&serde_json::to_vec(value).expect("config serializes"))
}

fn hash_file_into(h: &mut Sha256, path: &Path) -> Result<()> {
    let mut f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            return Ok(());
        }
        h.update(&buf[..n]);
    }
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for e in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let p = e.map_err(|e| CliError::io(dir, e))?.path();
        if p.is_dir() {
            files_under(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Hash of a file, or of every file below a directory together with its
/// relative path.
pub fn hash_path(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        files_under(path, &mut files)?;
        files.sort();
        for f in files {
            let rel = f.strip_prefix(path).unwrap_or(&f);
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0]);
            hash_file_into(&mut h, &f)?;
        }
    } else {
        hash_file_into(&mut h, path)?;
    }
    Ok(hex(&h.finalize()))
}

impl StageManifest {
    pub fn new<C: Serialize>(stage: &str, config: &C, inputs: &[(&str, &Path)]) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (name, p) in inputs {
            map.insert(name.to_string(), hash_path(p)?);
        }
        Ok(StageManifest {
            stage: stage.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: hash_json(config),
            inputs: map,
            outputs: Vec::new(),
        })
    }

    /// True when `path` holds a manifest with the same stage, parameters and
    /// input hashes, and all its outputs still exist.
    pub fn matches_existing(&self, path: &Path) -> bool {
        let Ok(text) = fs::read_to_string(path) else { return false };
        let Ok(old) = serde_json::from_str::<StageManifest>(&text) else { return false };
        old.stage == self.stage
            && old.tool_version == self.tool_version
            && old.config_hash == self.config_hash
            && old.inputs == self.inputs
            && old.outputs.iter().all(|o| o.exists())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(p) = path.parent() {
            fs::create_dir_all(p).map_err(|e| CliError::io(p, e))?;
        }
        let body = serde_json::to_vec_pretty(self)?;
        fs::write(path, body).map_err(|e| CliError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_value() {
        assert_eq!(
            hash_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_freshness() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        fs::write(&input, "one").unwrap();
        let out = dir.path().join("out.txt");
        fs::write(&out, "x").unwrap();
        let mpath = dir.path().join("m.json");
        let mut m = StageManifest::new("s", &1u32, &[("in", &input)]).unwrap();
        m.outputs.push(out.clone());
        assert!(!m.matches_existing(&mpath));
        m.write(&mpath).unwrap();
        assert!(m.matches_existing(&mpath));
        let other_cfg = StageManifest { config_hash: hash_json(&2u32), ..m.clone() };
        assert!(!other_cfg.matches_existing(&mpath));
        fs::write(&input, "two").unwrap();
        assert!(!StageManifest::new("s", &1u32, &[("in", &input)]).unwrap().matches_existing(&mpath));
        fs::remove_file(&out).unwrap();
        assert!(!m.matches_existing(&mpath));
    }

    #[test]
    fn directory_hash_sees_names_and_contents() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("sub/a"), "1").unwrap();
        let h1 = hash_path(dir.path()).unwrap();
        fs::rename(dir.path().join("sub/a"), dir.path().join("sub/b")).unwrap();
        assert_ne!(h1, hash_path(dir.path()).unwrap());
    }
}
