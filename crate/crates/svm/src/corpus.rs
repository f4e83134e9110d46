//! Directory-backed corpus: `<id>_<reason>.bin`, crashes as `<id>.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use specvm_core::fuzz::{InputId, Reason};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoredInput {
    pub id: InputId,
    pub reason: Reason,
    pub bytes: Vec<u8>,
    pub path: PathBuf,
}

pub fn entry_name(id: InputId, reason: Reason) -> String {
    format!("{id}_{}.bin", reason.name())
}

/// Writes an entry unless a file for the same id and reason exists.
pub fn save(dir: &Path, id: InputId, reason: Reason, bytes: &[u8]) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(entry_name(id, reason));
    if !path.exists() {
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(path)
}

pub fn save_crash(dir: &Path, id: InputId, bytes: &[u8]) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(format!("{id}.bin"));
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn parse_name(name: &str) -> Option<(InputId, Reason)> {
    let stem = name.strip_suffix(".bin")?;
    let (id, reason) = stem.split_once('_')?;
    Some((id.parse().ok()?, Reason::from_name(reason)?))
}

/// Corpus entries sorted by file name. Missing directories read as empty;
/// files not following the naming scheme are ignored.
pub fn load(dir: &Path) -> Result<Vec<StoredInput>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut names: Vec<_> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .collect();
    names.sort();
    let mut out = Vec::new();
    for path in names {
        let Some((id, reason)) = path.file_name().and_then(|n| n.to_str()).and_then(parse_name) else { continue };
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        out.push(StoredInput { id, reason, bytes, path });
    }
    Ok(out)
}

/// Every regular file in `dir`, sorted by name, as raw inputs.
pub fn load_raw(dir: &Path) -> Result<Vec<Vec<u8>>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths.iter().map(|p| fs::read(p).with_context(|| format!("reading {}", p.display()))).collect()
}
