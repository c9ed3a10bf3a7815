//! Dataset manifests: one entry per SWT1 data file with a train/valid/test split.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::swt1::{self, KIND_FIELD, KIND_STACK};
use crate::types::{RegionId, Task, VariableId};

pub const FORMAT_VERSION: &str = "swt1-manifest/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Assigns the latest distinct timestamps to the held-out splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRule {
    /// Number of latest timestamps assigned to test.
    pub test_last: usize,
    /// Number of timestamps immediately before the test block assigned to valid.
    pub valid_last: usize,
}

impl SplitRule {
    pub fn new(valid_last: usize, test_last: usize) -> Self {
        Self { test_last, valid_last }
    }

    /// Fractions of `n` timestamps, rounded to whole timestamps.
    pub fn fractions(n: usize, valid: f64, test: f64) -> Self {
        let r = |f: f64| ((n as f64) * f).round() as usize;
        Self { test_last: r(test), valid_last: r(valid) }
    }

    /// Split for each distinct timestamp.
    pub fn assign(&self, timestamps: &BTreeSet<i64>) -> BTreeMap<i64, Split> {
        let n = timestamps.len();
        let test_start = n.saturating_sub(self.test_last);
        let valid_start = test_start.saturating_sub(self.valid_last);
        timestamps
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let s = if i >= test_start {
                    Split::Test
                } else if i >= valid_start {
                    Split::Valid
                } else {
                    Split::Train
                };
                (t, s)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the manifest root, `/`-separated.
    pub path: String,
    pub region: RegionId,
    /// `None` for satellite stacks.
    pub variable: Option<VariableId>,
    pub timestamp: i64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: String,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

/// Input/target file pair for one scene and task.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair<'a> {
    pub stack: &'a ManifestEntry,
    pub target: &'a ManifestEntry,
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "swt1") {
            out.push(path);
        }
    }
    Ok(())
}

fn relative(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

/// Scan `root` for SWT1 field/stack files and assign splits by timestamp.
pub fn build_manifest(root: &Path, rule: &SplitRule) -> Result<Manifest> {
    let mut files = Vec::new();
    collect_files(root, &mut files)?;
    files.sort();
    let mut found = Vec::new();
    for path in files {
        let meta = swt1::read_meta(&path)?;
        let kind = meta.get("kind").and_then(|v| v.as_str()).unwrap_or_default();
        if kind != KIND_FIELD && kind != KIND_STACK {
            continue;
        }
        let region: RegionId = swt1::parse_meta(&meta, "region")?;
        let variable = if kind == KIND_FIELD { Some(swt1::parse_meta(&meta, "variable")?) } else { None };
        found.push((relative(root, &path), region, variable, swt1::meta_timestamp(&meta)?));
    }
    if found.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    let splits = rule.assign(&found.iter().map(|f| f.3).collect());
    let entries = found
        .into_iter()
        .map(|(path, region, variable, timestamp)| ManifestEntry { path, region, variable, timestamp, split: splits[&timestamp] })
        .collect();
    let m = Manifest { format_version: FORMAT_VERSION.into(), entries, root: root.to_path_buf() };
    log::info!("manifest: {:?}", m.counts());
    Ok(m)
}

impl Manifest {
    pub fn counts(&self) -> BTreeMap<Split, usize> {
        let mut c = BTreeMap::new();
        for e in &self.entries {
            *c.entry(e.split).or_insert(0) += 1;
        }
        c
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.path) {
                return Err(Error::Header(format!("duplicate manifest path {:?}", e.path)));
            }
            if !self.resolve(e).is_file() {
                return Err(Error::MissingData(format!("manifest entry {:?} does not resolve", e.path)));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Load a manifest; entries resolve relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let mut m: Manifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn variables(&self) -> BTreeSet<VariableId> {
        self.entries.iter().filter_map(|e| e.variable).collect()
    }

    pub fn entries_for(&self, task: Task, split: Option<Split>) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| {
            e.region == task.region && e.variable == Some(task.variable) && split.is_none_or(|s| e.split == s)
        })
    }

    /// Stack/target pairs matched by region and timestamp, ordered by timestamp.
    pub fn pairs(&self, task: Task, split: Option<Split>) -> Vec<Pair<'_>> {
        let stacks: BTreeMap<i64, &ManifestEntry> = self
            .entries
            .iter()
            .filter(|e| e.variable.is_none() && e.region == task.region)
            .map(|e| (e.timestamp, e))
            .collect();
        let mut pairs: Vec<Pair<'_>> = self
            .entries_for(task, split)
            .filter_map(|t| stacks.get(&t.timestamp).map(|s| Pair { stack: s, target: t }))
            .collect();
        pairs.sort_by_key(|p| p.target.timestamp);
        pairs
    }
}
