//! Line-delimited dataset manifests.
//!
//! Format (`lesionforge-manifest`, version 1): the first line is a JSON header
//! `{"format":"lesionforge-manifest","version":1,"seed":<u64>,"root":"<dir>"}`;
//! every following non-empty line is one JSON [`DatasetRecord`]. Record paths
//! are relative to `root`, which is itself relative to the manifest file.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::BoundingBox;
use crate::error::{Error, Result};

pub const MANIFEST_FORMAT: &str = "lesionforge-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Lesion,
    NonLesion,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Lesion
    }
}

/// `Source` holds non-lesion images reserved for synthesizing augmentations;
/// they never reach the classifier directly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    Source,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::Source];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Source => "source",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Empirical,
    Generated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Lesion,
    NonLesion,
    Generated,
}

/// How a patch record relates to the full image it was cut from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchOrigin {
    pub source_image_id: String,
    pub crop_rect: BoundingBox,
    pub domain: Domain,
    pub scale_factor: u32,
    #[serde(default)]
    pub clamped: bool,
    /// Box in source-image coordinates the crop was placed around, for crops
    /// guided by another image's lesion annotation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guide_box: Option<BoundingBox>,
    /// Lesion image whose annotation guided the crop.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_to: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub image_id: String,
    pub path: PathBuf,
    pub label: Label,
    #[serde(default)]
    pub boxes: Vec<BoundingBox>,
    pub split: Split,
    pub body_part: String,
    pub provenance: Provenance,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<PatchOrigin>,
}

impl DatasetRecord {
    pub fn validate(&self) -> Result<()> {
        match (self.label, self.boxes.is_empty()) {
            (Label::Lesion, true) => {
                return Err(Error::Data(format!("{}: lesion record without bounding boxes", self.image_id)))
            }
            (Label::NonLesion, false) => {
                return Err(Error::Data(format!("{}: non-lesion record carries bounding boxes", self.image_id)))
            }
            _ => {}
        }
        if self.provenance == Provenance::Generated && self.split != Split::Train {
            return Err(Error::Data(format!(
                "{}: generated record assigned to split {}",
                self.image_id,
                self.split.as_str()
            )));
        }
        for b in &self.boxes {
            if !b.is_valid_for(self.width as usize, self.height as usize) {
                return Err(Error::Data(format!(
                    "{}: box {:?} outside {}x{} image",
                    self.image_id, b, self.width, self.height
                )));
            }
        }
        Ok(())
    }

    pub fn aspect_ratio(&self) -> f64 {
        self.height as f64 / self.width as f64
    }

    pub fn area(&self) -> f64 {
        self.width as f64 * self.height as f64
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    seed: u64,
    #[serde(default = "default_root")]
    root: PathBuf,
}

fn default_root() -> PathBuf {
    PathBuf::from(".")
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    /// Directory record paths are relative to, itself relative to the manifest file.
    pub root: PathBuf,
    pub records: Vec<DatasetRecord>,
}

impl DatasetManifest {
    pub fn new(seed: u64, root: impl Into<PathBuf>, records: Vec<DatasetRecord>) -> Self {
        Self { seed, root: root.into(), records }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.image_id.as_str()) {
                return Err(Error::Data(format!("duplicate image_id {}", r.image_id)));
            }
            r.validate()?;
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn subset(&self, split: Split) -> DatasetManifest {
        DatasetManifest::new(self.seed, self.root.clone(), self.split(split).cloned().collect())
    }

    /// Absolute-or-relative path of a record's image for a manifest stored at `manifest_path`.
    pub fn resolve(&self, manifest_dir: &Path, record: &DatasetRecord) -> PathBuf {
        manifest_dir.join(&self.root).join(&record.path)
    }

    pub fn to_jsonl(&self) -> String {
        let header = Header {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            seed: self.seed,
            root: self.root.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(f).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Data(format!("{}: empty manifest", path.display())))?
            .map_err(|e| Error::io(path, e))?;
        let header: Header = serde_json::from_str(&first)
            .map_err(|e| Error::Data(format!("{}: bad manifest header: {}", path.display(), e)))?;
        if header.format != MANIFEST_FORMAT {
            return Err(Error::Data(format!("{}: unknown manifest format {}", path.display(), header.format)));
        }
        if header.version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported manifest version {}",
                path.display(),
                header.version
            )));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DatasetRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {}", path.display(), i + 2, e)))?;
            records.push(rec);
        }
        let m = DatasetManifest::new(header.seed, header.root, records);
        m.validate()?;
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub lesion: usize,
    pub non_lesion: usize,
}

impl fmt::Display for ClassCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.lesion, self.non_lesion)
    }
}

/// Per-split lesion:non-lesion counts. Every split is present, possibly zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestSummary {
    pub counts: BTreeMap<Split, ClassCounts>,
}

impl ManifestSummary {
    pub fn get(&self, split: Split) -> ClassCounts {
        self.counts.get(&split).copied().unwrap_or_default()
    }
}

impl fmt::Display for ManifestSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "split\tlesion:non-lesion")?;
        for (split, c) in &self.counts {
            writeln!(f, "{}\t{}", split.as_str(), c)?;
        }
        Ok(())
    }
}

pub fn manifest_summary(manifest: &DatasetManifest) -> ManifestSummary {
    let mut counts: BTreeMap<Split, ClassCounts> = Split::ALL.iter().map(|&s| (s, ClassCounts::default())).collect();
    for r in &manifest.records {
        let c = counts.entry(r.split).or_default();
        match r.label {
            Label::Lesion => c.lesion += 1,
            Label::NonLesion => c.non_lesion += 1,
        }
    }
    ManifestSummary { counts }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn record(id: &str, label: Label, split: Split) -> DatasetRecord {
        DatasetRecord {
            image_id: id.into(),
            path: PathBuf::from(format!("images/{id}.png")),
            label,
            boxes: if label == Label::Lesion { vec![BoundingBox::new(1, 1, 4, 4)] } else { vec![] },
            split,
            body_part: "humerus".into(),
            provenance: Provenance::Empirical,
            width: 10,
            height: 20,
            origin: None,
        }
    }

    #[test]
    fn empty_manifest_has_zero_counts() {
        let s = manifest_summary(&DatasetManifest::new(0, ".", vec![]));
        for split in Split::ALL {
            assert_eq!(s.get(split), ClassCounts::default());
        }
    }

    #[test]
    fn label_box_consistency_enforced() {
        let mut r = record("a", Label::Lesion, Split::Train);
        r.boxes.clear();
        assert!(r.validate().is_err());
        let mut r = record("b", Label::NonLesion, Split::Train);
        r.boxes.push(BoundingBox::new(0, 0, 1, 1));
        assert!(r.validate().is_err());
        let mut r = record("c", Label::Lesion, Split::Val);
        r.provenance = Provenance::Generated;
        assert!(r.validate().is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let m = DatasetManifest::new(
            1,
            ".",
            vec![record("a", Label::Lesion, Split::Train), record("a", Label::NonLesion, Split::Val)],
        );
        assert!(m.validate().is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::new(
            9,
            "..",
            vec![record("a", Label::Lesion, Split::Train), record("b", Label::NonLesion, Split::Test)],
        );
        let p = dir.path().join("m.jsonl");
        m.save(&p).unwrap();
        assert_eq!(DatasetManifest::load(&p).unwrap(), m);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("{\"format\":\"lesionforge-manifest\",\"version\":1"));
    }

    #[test]
    fn wrong_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, "{\"format\":\"lesionforge-manifest\",\"version\":99,\"seed\":0}\n").unwrap();
        assert!(DatasetManifest::load(&p).is_err());
    }
}
