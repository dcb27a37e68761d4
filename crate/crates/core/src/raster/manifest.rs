use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train|test)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path as written in the manifest; relative paths are resolved against
    /// the manifest's directory.
    pub image_path: PathBuf,
    pub seg_path: PathBuf,
    pub class_labels: BTreeSet<u32>,
    pub split: Split,
}

/// Dataset listing: one image/segmentation pair per entry.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// Reads and validates a manifest, checking that every referenced file exists.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = DatasetManifest::parse(&text, root, path)?;
    if manifest.entries.is_empty() {
        warn!("manifest {} has no entries", path.display());
    }
    manifest.check_paths()?;
    Ok(manifest)
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self {
            root: root.into(),
            entries,
        };
        m.check_structure(Path::new("<memory>"))?;
        Ok(m)
    }

    /// Parses manifest text without touching the filesystem. `origin` is only
    /// used in error messages.
    pub fn parse(text: &str, root: impl Into<PathBuf>, origin: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: line_no,
                message,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(err(format!(
                    "expected 4 tab-separated fields, found {}",
                    fields.len()
                )));
            }
            if fields[0].is_empty() || fields[1].is_empty() {
                return Err(err("empty path".into()));
            }
            let mut class_labels = BTreeSet::new();
            for tok in fields[2].split(',').map(str::trim).filter(|t| !t.is_empty()) {
                let c: u32 = tok
                    .parse()
                    .map_err(|_| err(format!("bad class id `{tok}`")))?;
                class_labels.insert(c);
            }
            let split: Split = fields[3].trim().parse().map_err(err)?;
            entries.push(ManifestEntry {
                image_path: PathBuf::from(fields[0]),
                seg_path: PathBuf::from(fields[1]),
                class_labels,
                split,
            });
        }
        let m = Self {
            root: root.into(),
            entries,
        };
        m.check_structure(origin)?;
        Ok(m)
    }

    fn check_structure(&self, origin: &Path) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            let err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message,
            };
            if !seen.insert(&e.image_path) {
                return Err(err(format!("duplicate image path {}", e.image_path.display())));
            }
            if e.split == Split::Train && e.class_labels.is_empty() {
                return Err(err("train entry without class labels".into()));
            }
            if e.class_labels.contains(&0) {
                return Err(err("class id 0 is reserved for background".into()));
            }
        }
        Ok(())
    }

    /// Verifies that every image, segmentation and sidecar file exists.
    pub fn check_paths(&self) -> Result<()> {
        for i in 0..self.entries.len() {
            for p in [self.image_path(i), self.seg_path(i), self.sidecar_path(i)] {
                if !p.is_file() {
                    return Err(Error::MissingFile(p));
                }
            }
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].image_path)
    }

    pub fn seg_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].seg_path)
    }

    pub fn sidecar_path(&self, i: usize) -> PathBuf {
        super::io::sidecar_path(&self.seg_path(i))
    }

    /// Indices of entries in `split`, in manifest order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].split == split)
            .collect()
    }

    /// Distinct class ids over the given split.
    pub fn classes(&self, split: Split) -> BTreeSet<u32> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .flat_map(|e| e.class_labels.iter().copied())
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for DatasetManifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            let classes: Vec<String> = e.class_labels.iter().map(u32::to_string).collect();
            writeln!(
                f,
                "{}\t{}\t{}\t{}",
                e.image_path.display(),
                e.seg_path.display(),
                classes.join(","),
                e.split
            )?;
        }
        Ok(())
    }
}
