//! JSON-lines dataset manifest: one page per line, pointing at a grayscale PNG
//! and a Textract-shaped OCR file. Paths are relative to the manifest's directory.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::GrayImage;
use serde::{Deserialize, Serialize};

use super::ocr::{parse_ocr_json, to_ocr_json};
use super::record::{PageRecord, Provenance};
use super::taxonomy::Category;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub etd_id: String,
    pub page_number: u32,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ocr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default = "original")]
    pub provenance: Provenance,
}

fn original() -> Provenance {
    Provenance::Original
}

pub fn read_png(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    Ok(img.into_luma8())
}

pub fn write_png(path: &Path, img: &GrayImage) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Parse manifest lines without touching the referenced files.
pub fn read_entries(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(&line).map_err(|e| Error::Input(format!("{} line {}: {e}", path.display(), i + 1)))?;
        entries.push(entry);
    }
    Ok(entries)
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Load the image and OCR of one entry. A missing `ocr` path yields an error.
pub fn load_entry(base: &Path, entry: &ManifestEntry, label: Category) -> Result<PageRecord> {
    let image = read_png(&base.join(&entry.image))?;
    let ocr_rel = entry
        .ocr
        .as_ref()
        .ok_or_else(|| Error::Input(format!("{}/{}: no OCR file", entry.etd_id, entry.page_number)))?;
    let ocr_path = base.join(ocr_rel);
    let bytes = fs::read(&ocr_path).map_err(|e| Error::io(&ocr_path, e))?;
    let page = parse_ocr_json(&bytes)?;
    let rec = PageRecord {
        etd_id: entry.etd_id.clone(),
        page_number: entry.page_number,
        image,
        blocks: page.blocks,
        full_text: page.full_text,
        label,
        provenance: entry.provenance,
    };
    rec.validate()?;
    Ok(rec)
}

/// Load every labelled page of a manifest. Errors name the offending line.
pub fn read_manifest(path: &Path) -> Result<Vec<PageRecord>> {
    let base = base_dir(path);
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |e: Error| Error::Input(format!("{} line {}: {e}", path.display(), i + 1));
        let entry: ManifestEntry =
            serde_json::from_str(&line).map_err(|e| Error::Input(format!("{} line {}: {e}", path.display(), i + 1)))?;
        let label = entry
            .label
            .as_deref()
            .ok_or_else(|| Error::Input("missing label".into()))
            .and_then(str::parse::<Category>)
            .map_err(at)?;
        records.push(load_entry(&base, &entry, label).map_err(at)?);
    }
    Ok(records)
}

/// File stem used for a record's PNG and OCR files.
pub fn record_stem(rec: &PageRecord) -> String {
    let safe: String = rec
        .etd_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}_p{:05}", rec.page_number)
}

/// Write PNGs, OCR JSON and the manifest itself; returns the manifest entries written.
pub fn write_manifest(path: &Path, records: &[PageRecord]) -> Result<Vec<ManifestEntry>> {
    let base = base_dir(path);
    let images = base.join("images");
    let ocr = base.join("ocr");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    fs::create_dir_all(&ocr).map_err(|e| Error::io(&ocr, e))?;
    let mut out = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::with_capacity(records.len());
    for rec in records {
        let stem = record_stem(rec);
        let image_rel = format!("images/{stem}.png");
        let ocr_rel = format!("ocr/{stem}.json");
        write_png(&base.join(&image_rel), &rec.image)?;
        let ocr_path = base.join(&ocr_rel);
        fs::write(&ocr_path, to_ocr_json(&rec.blocks)).map_err(|e| Error::io(&ocr_path, e))?;
        let entry = ManifestEntry {
            etd_id: rec.etd_id.clone(),
            page_number: rec.page_number,
            image: image_rel,
            ocr: Some(ocr_rel),
            label: Some(rec.label.name().to_string()),
            provenance: rec.provenance,
        };
        let line = serde_json::to_string(&entry).expect("manifest entry serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        entries.push(entry);
    }
    Ok(entries)
}
