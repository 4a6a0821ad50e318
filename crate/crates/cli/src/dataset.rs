//! On-disk layout of a prepared dataset directory.
//!
//! ```text
//! <data_dir>/manifest.jsonl        original pages (images/, ocr/ beside it)
//! <data_dir>/vocabulary.json
//! <data_dir>/splits.json           index lists + split hash
//! <data_dir>/augmented/            pseudo pages for the training split
//! ```

use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use etdpc::corpus::{read_manifest, split_hash, PageRecord, Provenance, SplitIndices, Vocabulary};
use etdpc::evalrep::CaseData;
use etdpc::{Error, Result};

pub const MANIFEST: &str = "manifest.jsonl";
pub const VOCABULARY: &str = "vocabulary.json";
pub const SPLITS: &str = "splits.json";
pub const AUGMENTED_DIR: &str = "augmented";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitFile {
    pub hash: String,
    #[serde(flatten)]
    pub indices: SplitIndices,
}

pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Schema(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io(path, e))
}

pub fn read_json<V: DeserializeOwned>(path: &Path) -> Result<V> {
    let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

pub fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A prepared dataset loaded into memory.
#[derive(Debug)]
pub struct Dataset {
    pub train: Vec<PageRecord>,
    pub val: Vec<PageRecord>,
    pub test: Vec<PageRecord>,
    pub augmented: Vec<PageRecord>,
    pub vocabulary: Vocabulary,
    pub split_hash: String,
}

impl Dataset {
    pub fn case_data(&self) -> CaseData<'_> {
        CaseData {
            train: &self.train,
            val: &self.val,
            test: &self.test,
            augmented: &self.augmented,
        }
    }
}

pub fn augmented_manifest(data_dir: &Path) -> PathBuf {
    data_dir.join(AUGMENTED_DIR).join(MANIFEST)
}

fn require(path: PathBuf, hint: &str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::Config(format!("{} not found; {hint}", path.display())))
    }
}

/// Load records, splits and vocabulary. Augmented pages are read only when
/// `with_augmented` is set, and must exist then.
pub fn load_dataset(data_dir: &Path, with_augmented: bool) -> Result<Dataset> {
    let hint = "run `prepare` first";
    let records = read_manifest(&require(data_dir.join(MANIFEST), hint)?)?;
    let splits: SplitFile = read_json(&require(data_dir.join(SPLITS), hint)?)?;
    let vocabulary: Vocabulary = read_json(&require(data_dir.join(VOCABULARY), hint)?)?;
    let n = records.len();
    let all = [&splits.indices.train, &splits.indices.val, &splits.indices.test];
    if all.iter().flat_map(|v| v.iter()).any(|&i| i >= n) {
        return Err(Error::Input(format!("{SPLITS} indexes past the {n} manifest records")));
    }
    let actual = split_hash(&records, &splits.indices);
    if actual != splits.hash {
        return Err(Error::Input(format!(
            "{SPLITS} hash {} does not match the manifest ({actual})",
            splits.hash
        )));
    }
    let augmented = if with_augmented {
        let path = require(augmented_manifest(data_dir), "run `augment` first")?;
        let recs = read_manifest(&path)?;
        if let Some(r) = recs.iter().find(|r| r.provenance != Provenance::Augmented) {
            return Err(Error::Input(format!(
                "{}: {}/{} is not marked AUGMENTED",
                path.display(),
                r.etd_id,
                r.page_number
            )));
        }
        recs
    } else {
        Vec::new()
    };
    let (train, val, test) = splits.indices.select_owned(&records);
    Ok(Dataset {
        train,
        val,
        test,
        augmented,
        vocabulary,
        split_hash: splits.hash,
    })
}
