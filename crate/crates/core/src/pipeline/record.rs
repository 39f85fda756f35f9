//! Run directory bookkeeping: stage graph, checksummed artifact index and
//! the per-run lock.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging;

pub const RECORD_FILE: &str = "run.json";
pub const LOCK_FILE: &str = ".lock";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Preprocess,
    Pair,
    TrainGan,
    Generate,
    EvalGen,
    TrainClf,
    Explain,
    EvalSeg,
    Report,
}

impl Stage {
    /// Execution order of a full run.
    pub const ALL: [Stage; 9] = [
        Stage::Preprocess,
        Stage::Pair,
        Stage::TrainGan,
        Stage::Generate,
        Stage::EvalGen,
        Stage::TrainClf,
        Stage::Explain,
        Stage::EvalSeg,
        Stage::Report,
    ];

    /// Stages evaluated by the report; it needs at least one of them.
    pub const EVALUATIONS: [Stage; 3] = [Stage::EvalGen, Stage::TrainClf, Stage::EvalSeg];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Preprocess => "preprocess",
            Stage::Pair => "pair",
            Stage::TrainGan => "train_gan",
            Stage::Generate => "generate",
            Stage::EvalGen => "eval_gen",
            Stage::TrainClf => "train_clf",
            Stage::Explain => "explain",
            Stage::EvalSeg => "eval_seg",
            Stage::Report => "report",
        }
    }

    /// Hard prerequisites. Generation scoring and the classifier branch only
    /// share the generation stage, so they may run in either order.
    pub fn dependencies(self) -> &'static [Stage] {
        match self {
            Stage::Preprocess => &[],
            Stage::Pair => &[Stage::Preprocess],
            Stage::TrainGan => &[Stage::Pair],
            Stage::Generate => &[Stage::TrainGan],
            Stage::EvalGen => &[Stage::Generate],
            Stage::TrainClf => &[Stage::Generate],
            Stage::Explain => &[Stage::TrainClf],
            Stage::EvalSeg => &[Stage::Preprocess],
            Stage::Report => &[],
        }
    }

    /// Every stage that transitively depends on `self`.
    pub fn dependents(self) -> Vec<Stage> {
        let mut out: Vec<Stage> = Vec::new();
        for s in Stage::ALL {
            if s == Stage::Report && self != Stage::Report {
                out.push(s);
                continue;
            }
            let mut frontier = s.dependencies().to_vec();
            while let Some(d) = frontier.pop() {
                if d == self {
                    out.push(s);
                    break;
                }
                frontier.extend_from_slice(d.dependencies());
            }
        }
        out
    }

    /// Coarse pipeline phase, 1 to 6, used for the stage flags.
    pub fn phase(self) -> usize {
        match self {
            Stage::Preprocess | Stage::Pair => 1,
            Stage::TrainGan | Stage::Generate => 2,
            Stage::EvalGen => 3,
            Stage::TrainClf | Stage::Explain => 4,
            Stage::EvalSeg => 5,
            Stage::Report => 6,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub completed_unix: u64,
    /// Run-relative path to SHA-256 for every file the stage wrote.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config_hash: String,
    pub created_unix: u64,
    pub updated_unix: u64,
    pub stages: BTreeMap<Stage, StageEntry>,
    /// Phase number to completion, derived from `stages` on every save.
    pub stage_flags: BTreeMap<usize, bool>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn rel(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

/// Checksums of every file under `dir`, keyed by path relative to `root`.
pub fn index_dir(root: &Path, dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    if dir.is_dir() {
        walk(dir, &mut files)?;
    }
    files.iter().map(|f| Ok((rel(root, f), file_sha256(f)?))).collect()
}

/// One digest over all file paths and contents under `dir`.
pub fn dir_checksum(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for (path, sum) in index_dir(dir, dir)? {
        h.update(path.as_bytes());
        h.update([0]);
        h.update(sum.as_bytes());
        h.update([b'\n']);
    }
    Ok(hex::encode(h.finalize()))
}

impl RunRecord {
    pub fn new(run_id: &str, config_hash: &str) -> Self {
        let now = unix_now();
        let mut r = RunRecord {
            run_id: run_id.into(),
            config_hash: config_hash.into(),
            created_unix: now,
            updated_unix: now,
            stages: BTreeMap::new(),
            stage_flags: BTreeMap::new(),
        };
        r.refresh_flags();
        r
    }

    pub fn load(run_dir: &Path) -> Result<Option<Self>> {
        let path = run_dir.join(RECORD_FILE);
        if !path.is_file() {
            return Ok(None);
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Some(serde_json::from_slice(&bytes)?))
    }

    pub fn save(&mut self, run_dir: &Path) -> Result<()> {
        self.refresh_flags();
        self.updated_unix = unix_now();
        imaging::write_atomic(&run_dir.join(RECORD_FILE), &serde_json::to_vec_pretty(self)?)
    }

    fn refresh_flags(&mut self) {
        self.stage_flags = (1..=6)
            .map(|phase| {
                let done = Stage::ALL
                    .iter()
                    .filter(|s| s.phase() == phase)
                    .all(|s| self.stages.contains_key(s));
                (phase, done)
            })
            .collect();
    }

    /// True when `stage` is recorded and every indexed file still exists
    /// with its recorded checksum.
    pub fn verify(&self, run_dir: &Path, stage: Stage) -> Result<bool> {
        let Some(entry) = self.stages.get(&stage) else { return Ok(false) };
        for (path, sum) in &entry.artifacts {
            let p = run_dir.join(path);
            if !p.is_file() || &file_sha256(&p)? != sum {
                return Ok(false);
            }
        }
        // A stage directory holding unindexed files has been tampered with.
        Ok(index_dir(run_dir, &run_dir.join(stage.as_str()))?.len() == entry.artifacts.len())
    }

    pub fn complete(&mut self, run_dir: &Path, stage: Stage) -> Result<()> {
        let artifacts = index_dir(run_dir, &run_dir.join(stage.as_str()))?;
        self.stages.insert(stage, StageEntry { completed_unix: unix_now(), artifacts });
        Ok(())
    }

    /// Forgets `stage` and everything downstream of it.
    pub fn invalidate(&mut self, stage: Stage) {
        self.stages.remove(&stage);
        for s in stage.dependents() {
            self.stages.remove(&s);
        }
    }

    pub fn all_flags_set(&self) -> bool {
        self.stage_flags.values().all(|v| *v) && self.stage_flags.len() == 6
    }
}

/// Exclusive lock on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let path = run_dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let holder = fs::read_to_string(&path).unwrap_or_default();
                Err(Error::Config(format!(
                    "run directory {} is locked by process {} (delete {} if that process is gone)",
                    run_dir.display(),
                    holder.trim(),
                    path.display()
                )))
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dependents_follow_the_graph() {
        let d = Stage::Generate.dependents();
        assert!(d.contains(&Stage::EvalGen) && d.contains(&Stage::TrainClf) && d.contains(&Stage::Explain));
        assert!(!d.contains(&Stage::EvalSeg));
        assert!(Stage::Preprocess.dependents().len() == 8);
        assert!(Stage::Report.dependents().is_empty());
        assert_eq!("train-gan".parse::<Stage>().unwrap(), Stage::TrainGan);
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let l = RunLock::acquire(dir.path()).unwrap();
        assert!(RunLock::acquire(dir.path()).is_err());
        drop(l);
        RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn verify_detects_changes() {
        let dir = tempfile::tempdir().unwrap();
        let sd = dir.path().join("pair");
        fs::create_dir_all(&sd).unwrap();
        fs::write(sd.join("a.json"), b"1").unwrap();
        let mut r = RunRecord::new("run-x", "h");
        r.complete(dir.path(), Stage::Pair).unwrap();
        assert!(r.verify(dir.path(), Stage::Pair).unwrap());
        fs::write(sd.join("a.json"), b"2").unwrap();
        assert!(!r.verify(dir.path(), Stage::Pair).unwrap());
        fs::write(sd.join("a.json"), b"1").unwrap();
        fs::write(sd.join("b.json"), b"1").unwrap();
        assert!(!r.verify(dir.path(), Stage::Pair).unwrap());
    }
}
