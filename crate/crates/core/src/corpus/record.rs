use image::GrayImage;
use serde::{Deserialize, Serialize};

use super::ocr::{full_text_of, OcrBlock};
use super::taxonomy::Category;
use crate::error::{Error, Result};

pub const MIN_IMAGE_SIDE: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Provenance {
    Original,
    Augmented,
}

/// One annotated page.
#[derive(Debug, Clone, PartialEq)]
pub struct PageRecord {
    pub etd_id: String,
    pub page_number: u32,
    pub image: GrayImage,
    pub blocks: Vec<OcrBlock>,
    pub full_text: String,
    pub label: Category,
    pub provenance: Provenance,
}

impl PageRecord {
    /// Build a record whose `full_text` is derived from its `LINE` blocks.
    pub fn new(
        etd_id: impl Into<String>,
        page_number: u32,
        image: GrayImage,
        blocks: Vec<OcrBlock>,
        label: Category,
        provenance: Provenance,
    ) -> Result<Self> {
        let full_text = full_text_of(&blocks);
        let rec = Self {
            etd_id: etd_id.into(),
            page_number,
            image,
            blocks,
            full_text,
            label,
            provenance,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.page_number == 0 {
            return Err(Error::Input(format!("{}: page numbers start at 1", self.key())));
        }
        let (w, h) = self.image.dimensions();
        if w < MIN_IMAGE_SIDE || h < MIN_IMAGE_SIDE {
            return Err(Error::Input(format!(
                "{}: image {w}x{h} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}",
                self.key()
            )));
        }
        if self.full_text != full_text_of(&self.blocks) {
            return Err(Error::Input(format!(
                "{}: full_text does not match its LINE blocks",
                self.key()
            )));
        }
        Ok(())
    }

    /// `etd_id/page_number`, the record locator used in messages and hashes.
    pub fn key(&self) -> String {
        format!("{}/{}", self.etd_id, self.page_number)
    }

    pub fn is_augmented(&self) -> bool {
        self.provenance == Provenance::Augmented
    }
}

/// Per-label counts in taxonomy order.
pub fn class_counts(records: &[PageRecord]) -> [usize; Category::COUNT] {
    let mut counts = [0; Category::COUNT];
    for r in records {
        counts[r.label.index()] += 1;
    }
    counts
}
