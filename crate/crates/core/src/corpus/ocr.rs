//! Reader and writer for the Textract-shaped OCR block JSON.
//!
//! Only `WORD` and `LINE` blocks are kept; every other `BlockType` (`PAGE`,
//! `KEY_VALUE_SET`, ...) is skipped without inspection. Confidence arrives on a
//! 0-100 scale and is stored as a fraction.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

/// Slack allowed on the right / bottom page edge.
pub const BBOX_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum BlockType {
    Word,
    Line,
}

impl BlockType {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockType::Word => "WORD",
            BlockType::Line => "LINE",
        }
    }
}

/// Box in page-relative coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
}

impl BoundingBox {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let BoundingBox {
            left,
            top,
            width,
            height,
        } = *self;
        let fields = [("Left", left), ("Top", top), ("Width", width), ("Height", height)];
        for (name, v) in fields {
            if !v.is_finite() || !(0.0..=1.0 + BBOX_EPS).contains(&v) {
                return Err(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if width <= 0.0 || height <= 0.0 {
            return Err(format!("degenerate box {width} x {height}"));
        }
        if left + width > 1.0 + BBOX_EPS {
            return Err(format!("Left + Width = {} exceeds the page", left + width));
        }
        if top + height > 1.0 + BBOX_EPS {
            return Err(format!("Top + Height = {} exceeds the page", top + height));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrBlock {
    pub id: String,
    pub block_type: BlockType,
    pub text: String,
    /// Fraction in [0, 1].
    pub confidence: f64,
    pub bbox: BoundingBox,
}

/// Parsed OCR output for one page.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OcrPage {
    pub blocks: Vec<OcrBlock>,
    pub full_text: String,
}

/// `LINE` block texts in stored order, joined by newlines.
pub fn full_text_of(blocks: &[OcrBlock]) -> String {
    blocks
        .iter()
        .filter(|b| b.block_type == BlockType::Line)
        .map(|b| b.text.as_str())
        .collect::<Vec<_>>()
        .join("\n")
}

fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (i, l) in bytes.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1).min(l.len());
        }
        offset += l.len() + 1;
    }
    bytes.len()
}

fn field<'a>(obj: &'a Map<String, Value>, name: &str, ctx: &str) -> Result<&'a Value> {
    obj.get(name)
        .ok_or_else(|| Error::Schema(format!("{ctx}: missing field \"{name}\"")))
}

fn number(obj: &Map<String, Value>, name: &str, ctx: &str) -> Result<f64> {
    field(obj, name, ctx)?
        .as_f64()
        .ok_or_else(|| Error::Schema(format!("{ctx}: field \"{name}\" is not a number")))
}

/// Parse one page of Textract-shaped JSON.
pub fn parse_ocr_json(bytes: &[u8]) -> Result<OcrPage> {
    let doc: Value = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        offset: byte_offset(bytes, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let root = doc
        .as_object()
        .ok_or_else(|| Error::Schema("top level is not an object".into()))?;
    let raw_blocks = field(root, "Blocks", "document")?
        .as_array()
        .ok_or_else(|| Error::Schema("\"Blocks\" is not an array".into()))?;

    let mut blocks = Vec::with_capacity(raw_blocks.len());
    for (i, raw) in raw_blocks.iter().enumerate() {
        let ctx = format!("Blocks[{i}]");
        let obj = raw
            .as_object()
            .ok_or_else(|| Error::Schema(format!("{ctx}: not an object")))?;
        let kind = field(obj, "BlockType", &ctx)?
            .as_str()
            .ok_or_else(|| Error::Schema(format!("{ctx}: \"BlockType\" is not a string")))?;
        let block_type = match kind {
            "WORD" => BlockType::Word,
            "LINE" => BlockType::Line,
            _ => continue,
        };
        let id = field(obj, "Id", &ctx)?
            .as_str()
            .ok_or_else(|| Error::Schema(format!("{ctx}: \"Id\" is not a string")))?
            .to_string();
        let ctx = format!("block {id}");
        let text = field(obj, "Text", &ctx)?
            .as_str()
            .ok_or_else(|| Error::Schema(format!("{ctx}: \"Text\" is not a string")))?
            .to_string();
        let confidence = number(obj, "Confidence", &ctx)?;
        if !(0.0..=100.0).contains(&confidence) {
            return Err(Error::Validation {
                block_id: id,
                message: format!("Confidence {confidence} outside [0, 100]"),
            });
        }
        let geometry = field(obj, "Geometry", &ctx)?
            .as_object()
            .ok_or_else(|| Error::Schema(format!("{ctx}: \"Geometry\" is not an object")))?;
        let bb = field(geometry, "BoundingBox", &ctx)?
            .as_object()
            .ok_or_else(|| Error::Schema(format!("{ctx}: \"BoundingBox\" is not an object")))?;
        let bbox = BoundingBox {
            left: number(bb, "Left", &ctx)?,
            top: number(bb, "Top", &ctx)?,
            width: number(bb, "Width", &ctx)?,
            height: number(bb, "Height", &ctx)?,
        };
        if let Err(message) = bbox.validate() {
            return Err(Error::Validation { block_id: id, message });
        }
        blocks.push(OcrBlock {
            id,
            block_type,
            text,
            confidence: confidence / 100.0,
            bbox,
        });
    }
    let full_text = full_text_of(&blocks);
    Ok(OcrPage { blocks, full_text })
}

/// A percentage `p` with `p / 100.0 == fraction` exactly, so that writing and
/// re-reading a block is lossless.
fn percent_of(fraction: f64) -> f64 {
    let mut p = fraction * 100.0;
    if p / 100.0 == fraction {
        return p;
    }
    for _ in 0..8 {
        p = if p / 100.0 < fraction {
            p.next_up()
        } else {
            p.next_down()
        };
        if p / 100.0 == fraction {
            return p;
        }
    }
    fraction * 100.0
}

/// Serialize blocks back into Textract-shaped JSON.
pub fn to_ocr_json(blocks: &[OcrBlock]) -> Vec<u8> {
    let blocks: Vec<Value> = blocks
        .iter()
        .map(|b| {
            json!({
                "BlockType": b.block_type.as_str(),
                "Id": b.id,
                "Text": b.text,
                "Confidence": percent_of(b.confidence),
                "Geometry": {
                    "BoundingBox": {
                        "Left": b.bbox.left,
                        "Top": b.bbox.top,
                        "Width": b.bbox.width,
                        "Height": b.bbox.height,
                    }
                }
            })
        })
        .collect();
    serde_json::to_vec_pretty(&json!({ "Blocks": blocks })).expect("OCR json is serializable")
}
