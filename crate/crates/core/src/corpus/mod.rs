//! Pages, labels, OCR ingestion, vocabulary, splitting and the synthetic corpus.

pub mod manifest;
pub mod ocr;
pub mod record;
pub mod split;
pub mod synthetic;
pub mod taxonomy;
pub mod vocab;

pub use manifest::{read_entries, read_manifest, write_manifest, ManifestEntry};
pub use ocr::{parse_ocr_json, to_ocr_json, BlockType, BoundingBox, OcrBlock, OcrPage};
pub use record::{class_counts, PageRecord, Provenance};
pub use split::{records_hash, split_dataset, split_hash, SplitGrouping, SplitIndices, SplitSpec};
pub use synthetic::{generate_synthetic_corpus, CueMode, SyntheticCorpusSpec};
pub use taxonomy::{Category, CategoryTaxonomy, Level1};
pub use vocab::{build_vocabulary, tokenize, TokenFeatures, Vocabulary};
