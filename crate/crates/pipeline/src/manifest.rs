//! Run manifest and atomic file output.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vip_core::recon::ReconStats;

use crate::config::PipelineConfig;
use crate::error::{PipelineError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
/// Present in an output directory while a run is in progress or after it
/// failed; holds the error record in the latter case.
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

/// Writes to a sibling temporary file and renames it into place, so a
/// reader never sees a half-written artifact.
pub fn write_atomic<F>(stage: &'static str, path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> vip_core::Result<()>,
{
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    let file = File::create(&tmp).map_err(PipelineError::io(stage, &tmp))?;
    let mut w = BufWriter::new(file);
    body(&mut w).map_err(PipelineError::stage(stage))?;
    w.flush().map_err(PipelineError::io(stage, &tmp))?;
    w.get_ref().sync_all().map_err(PipelineError::io(stage, &tmp))?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(PipelineError::io(stage, path))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn config_hash(cfg: &PipelineConfig) -> String {
    sha256_hex(cfg.canonical_json().as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub current_on: bool,
    pub seed: u64,
    pub n_frames: u64,
    pub exposure: f64,
    pub live_time: f64,
    pub events_csv: String,
    pub spectrum_csv: String,
    pub recon: ReconStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutputs {
    pub config_ini: String,
    pub calibration_json: String,
    pub difference_csv: String,
    pub limit_json: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timestamps {
    pub written_unix_s: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    /// SHA-256 of the resolved configuration.
    pub config_hash: String,
    pub runs: Vec<RunRecord>,
    pub outputs: StageOutputs,
    /// SHA-256 of every referenced file, by path relative to the manifest.
    pub digests: BTreeMap<String, String>,
    /// Excluded from every hash and from reproducibility comparisons.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamps: Option<Timestamps>,
}

impl RunManifest {
    pub fn referenced_files(&self) -> Vec<&str> {
        let mut v = vec![
            self.outputs.config_ini.as_str(),
            self.outputs.calibration_json.as_str(),
            self.outputs.difference_csv.as_str(),
            self.outputs.limit_json.as_str(),
        ];
        for r in &self.runs {
            v.push(&r.events_csv);
            v.push(&r.spectrum_csv);
        }
        v
    }

    /// Fills `digests` from the files under `dir`.
    pub fn compute_digests(&mut self, dir: &Path) -> Result<()> {
        let mut digests = BTreeMap::new();
        for f in self.referenced_files() {
            let path = dir.join(f);
            let bytes = std::fs::read(&path).map_err(PipelineError::io("manifest", &path))?;
            digests.insert(f.to_string(), sha256_hex(&bytes));
        }
        self.digests = digests;
        Ok(())
    }

    pub fn validate(&self, dir: &Path) -> Result<()> {
        let bad = |msg: String| PipelineError::Stage {
            stage: "manifest",
            source: vip_core::Error::Domain(msg),
        };
        for r in &self.runs {
            if r.live_time != r.n_frames as f64 * r.exposure {
                return Err(bad(format!("run {}: live time does not equal n_frames x exposure", r.name)));
            }
        }
        for f in self.referenced_files() {
            if !dir.join(f).is_file() {
                return Err(bad(format!("referenced file {f} is missing")));
            }
        }
        Ok(())
    }

    pub fn without_timestamps(&self) -> Self {
        Self {
            timestamps: None,
            ..self.clone()
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        self.validate(dir)?;
        write_atomic("manifest", &dir.join(MANIFEST_FILE), |w| {
            serde_json::to_writer_pretty(&mut *w, self)?;
            w.write_all(b"\n")?;
            Ok(())
        })
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(PipelineError::io("manifest", &path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::stage("manifest")(e.into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_leaves_no_partial_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        write_atomic("test", &p, |w| Ok(w.write_all(b"hello")?)).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "hello");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn failed_body_keeps_target_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        std::fs::write(&p, "old").unwrap();
        let e = write_atomic("test", &p, |_| Err(vip_core::Error::Domain("boom".into()))).unwrap_err();
        assert_eq!(e.exit_code(), 3);
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "old");
    }

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
