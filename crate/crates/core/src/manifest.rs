//! Slide-label index: one CSV row per slide.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::taxonomy::StainClass;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub slide_id: String,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub fine_label: StainClass,
    #[serde(default)]
    pub split_hint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read(path).at(path)?;
        let mut rdr = csv::Reader::from_reader(text.as_slice());
        let mut entries = Vec::new();
        for (i, row) in rdr.deserialize::<ManifestEntry>().enumerate() {
            let mut e = row.map_err(|e| Error::Manifest(format!("{} row {}: {e}", path.display(), i + 1)))?;
            if e.split_hint.as_deref() == Some("") {
                e.split_hint = None;
            }
            entries.push(e);
        }
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(e.slide_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate slide_id `{}`", e.slide_id)));
            }
        }
        Ok(Manifest {
            root: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        for e in &self.entries {
            wtr.serialize(e).map_err(|e| Error::Manifest(e.to_string()))?;
        }
        let bytes = wtr.into_inner().map_err(|e| Error::Manifest(e.to_string()))?;
        if let Some(p) = path.parent() {
            std::fs::create_dir_all(p).at(p)?;
        }
        std::fs::write(path, bytes).at(path)
    }

    pub fn slide_path(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    pub fn get(&self, slide_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.slide_id == slide_id)
    }

    pub fn label(&self, slide_id: &str) -> Result<StainClass> {
        self.get(slide_id)
            .map(|e| e.fine_label)
            .ok_or_else(|| Error::Manifest(format!("no label for slide `{slide_id}`")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Keeps only entries whose label satisfies `keep`.
    pub fn filtered(&self, keep: impl Fn(StainClass) -> bool) -> Manifest {
        Manifest {
            root: self.root.clone(),
            entries: self.entries.iter().filter(|e| keep(e.fine_label)).cloned().collect(),
        }
    }
}
