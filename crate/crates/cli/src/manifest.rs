//! Run manifests: enough to re-run a command and check its outputs.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use panocal_core::rng::hash_bytes;
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub panocal: String,
    pub panocal_core: String,
}

impl Versions {
    pub fn current() -> Self {
        Versions { panocal: env!("CARGO_PKG_VERSION").into(), panocal_core: panocal_core::VERSION.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub bytes: u64,
    /// FNV-1a of the contents, hex.
    pub fnv1a: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    /// Arguments after the program name, without `--out-dir`.
    pub argv: Vec<String>,
    pub seed: u64,
    pub threads: Option<usize>,
    pub versions: Versions,
    pub config: serde_json::Value,
    pub outputs: Vec<OutputFile>,
}

impl Manifest {
    /// Describes `outputs`, paths relative to `dir`.
    pub fn describe(dir: &Path, outputs: &[String]) -> Result<Vec<OutputFile>> {
        outputs
            .iter()
            .map(|name| {
                let bytes = fs::read(dir.join(name)).with_context(|| format!("reading output {name}"))?;
                Ok(OutputFile { path: name.clone(), bytes: bytes.len() as u64, fnv1a: format!("{:016x}", hash_bytes(&bytes)) })
            })
            .collect()
    }

    /// Output entries whose file in `dir` is missing or differs.
    pub fn mismatches(&self, dir: &Path) -> Vec<String> {
        self.outputs
            .iter()
            .filter(|o| match fs::read(dir.join(&o.path)) {
                Ok(b) => b.len() as u64 != o.bytes || format!("{:016x}", hash_bytes(&b)) != o.fnv1a,
                Err(_) => true,
            })
            .map(|o| o.path.clone())
            .collect()
    }
}

/// Drops the program name and any `--out-dir` flag with its value.
pub fn strip_out_dir(argv: &[OsString]) -> Vec<String> {
    let mut out = Vec::new();
    let mut it = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned());
    while let Some(a) = it.next() {
        if a == "--out-dir" {
            it.next();
        } else if !a.starts_with("--out-dir=") {
            out.push(a);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_dir_is_stripped_in_both_forms() {
        let argv: Vec<OsString> =
            ["panocal", "--seed", "3", "--out-dir", "a", "synth", "--out-dir=b", "--scene", "s.json"].map(Into::into).to_vec();
        assert_eq!(strip_out_dir(&argv), ["--seed", "3", "synth", "--scene", "s.json"]);
    }
}
