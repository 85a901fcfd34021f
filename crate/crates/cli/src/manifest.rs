//! Per-run record written next to each command's primary output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// sha256 of every output file, keyed by path.
    pub checksums: BTreeMap<String, String>,
    pub duration_secs: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries = fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()?;
        entries.sort();
        for entry in entries {
            collect_files(&entry, out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// Checksums every file under `outputs`, directories included recursively.
pub fn checksums(outputs: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    for out in outputs {
        collect_files(out, &mut files)?;
    }
    files
        .into_iter()
        .map(|f| Ok((f.display().to_string(), sha256_file(&f)?)))
        .collect()
}

/// `<out>.manifest.json` beside the primary output.
pub fn manifest_path(primary: &Path) -> PathBuf {
    let name = primary.file_name().map_or_else(|| "run".into(), |n| n.to_string_lossy().into_owned());
    primary.with_file_name(format!("{name}.manifest.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_sits_beside_the_output() {
        assert_eq!(manifest_path(Path::new("out/model.ckpt")), Path::new("out/model.ckpt.manifest.json"));
        assert_eq!(manifest_path(Path::new("data")), Path::new("data.manifest.json"));
    }

    #[test]
    fn checksums_cover_directories() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("d");
        fs::create_dir_all(root.join("sub")).unwrap();
        fs::write(root.join("b.txt"), b"abc").unwrap();
        fs::write(root.join("sub/a.txt"), b"").unwrap();
        let sums = checksums(&[root.clone()]).unwrap();
        assert_eq!(sums.len(), 2);
        let abc = &sums[&root.join("b.txt").display().to_string()];
        assert_eq!(abc, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        let empty = &sums[&root.join("sub/a.txt").display().to_string()];
        assert_eq!(empty, "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }
}
