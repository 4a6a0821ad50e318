//! Desk-scale stand-in corpus. Every category carries a cue in the image, in
//! the text, or in both, so that unimodal and multimodal models can be told
//! apart by construction.

use image::{GrayImage, Luma};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ocr::{BlockType, BoundingBox, OcrBlock};
use super::record::{PageRecord, Provenance, MIN_IMAGE_SIDE};
use super::taxonomy::Category;
use crate::error::{Error, Result};
use crate::rng::{rng_from, Rng};

pub const BACKGROUND: u8 = 255;
pub const INK: u8 = 30;

/// Which modality carries a category's identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CueMode {
    VisualOnly,
    TextOnly,
    Both,
}

impl CueMode {
    pub fn visual(self) -> bool {
        matches!(self, CueMode::VisualOnly | CueMode::Both)
    }

    pub fn textual(self) -> bool {
        matches!(self, CueMode::TextOnly | CueMode::Both)
    }
}

/// Default cue assignment: six image-only, six text-only, `Chapters` both.
pub const DEFAULT_CUES: [CueMode; Category::COUNT] = [
    CueMode::Both,       // Chapters
    CueMode::VisualOnly, // Appendices
    CueMode::VisualOnly, // ReferenceList
    CueMode::VisualOnly, // TableofContent
    CueMode::VisualOnly, // TitlePage
    CueMode::TextOnly,   // Abstract
    CueMode::TextOnly,   // ListofFigures
    CueMode::TextOnly,   // Acknowledgment
    CueMode::TextOnly,   // ListofTables
    CueMode::VisualOnly, // CurriculumVitae
    CueMode::VisualOnly, // Dedication
    CueMode::TextOnly,   // ChapterAbstract
    CueMode::TextOnly,   // Other
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    pub pages_per_category: usize,
    /// Per-category page counts overriding `pages_per_category`, in taxonomy order.
    pub category_pages: Option<Vec<usize>>,
    /// (height, width) in pixels.
    pub image_size: (u32, u32),
    pub cue_modes: [CueMode; Category::COUNT],
    /// Std-dev of the per-page pixel noise, in intensity units.
    pub pixel_noise: f64,
    /// Maximum per-page layout shift in pixels.
    pub jitter: i32,
    pub words_per_page: (usize, usize),
    /// Probability that a word of a text-cued page is a category keyword.
    pub keyword_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            pages_per_category: 200,
            category_pages: None,
            image_size: (64, 64),
            cue_modes: DEFAULT_CUES,
            pixel_noise: 6.0,
            jitter: 2,
            words_per_page: (24, 40),
            keyword_rate: 0.35,
            seed: 0,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn pages_for(&self, cat: Category) -> usize {
        self.category_pages
            .as_ref()
            .map(|v| v[cat.index()])
            .unwrap_or(self.pages_per_category)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(Error::Config(format!(
                "synthetic image size {h}x{w} is below {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}"
            )));
        }
        if let Some(v) = &self.category_pages {
            if v.len() != Category::COUNT {
                return Err(Error::Config(format!(
                    "category_pages needs {} entries, got {}",
                    Category::COUNT,
                    v.len()
                )));
            }
        } else if self.pages_per_category == 0 {
            return Err(Error::Config("pages_per_category must be positive".into()));
        }
        let (lo, hi) = self.words_per_page;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("bad words_per_page range {lo}..{hi}")));
        }
        if !(0.0..=1.0).contains(&self.keyword_rate) {
            return Err(Error::Config("keyword_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Layout used by a category's pages: its own pattern when the category is
    /// visually cued, the shared paragraph page otherwise.
    pub fn pattern_for(&self, cat: Category) -> Pattern {
        if self.cue_modes[cat.index()].visual() {
            Pattern::OWN[cat.index()]
        } else {
            Pattern::Paragraph
        }
    }
}

/// Geometric page layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pattern {
    Paragraph,
    BodyText,
    TitleCentered,
    TwoColumnLeaders,
    Checker,
    VerticalBars,
    Frame,
    Diagonal,
    BottomHalf,
    CenterBlock,
    Bullets,
    Grid,
    TopBar,
    Scatter,
}

impl Pattern {
    /// Pattern owned by each category (taxonomy order).
    pub const OWN: [Pattern; Category::COUNT] = [
        Pattern::BodyText,
        Pattern::Grid,
        Pattern::Bullets,
        Pattern::TwoColumnLeaders,
        Pattern::TitleCentered,
        Pattern::TopBar,
        Pattern::VerticalBars,
        Pattern::BottomHalf,
        Pattern::Diagonal,
        Pattern::Checker,
        Pattern::CenterBlock,
        Pattern::Frame,
        Pattern::Scatter,
    ];
}

/// Rectangles in page-relative coordinates: (x0, y0, x1, y1).
type Rect = (f64, f64, f64, f64);

fn text_lines(y0: f64, y1: f64, x0: f64, x1: f64, step: f64, out: &mut Vec<Rect>) {
    let mut y = y0;
    let mut row = 0usize;
    while y + 0.03 <= y1 {
        // Words of fixed pseudo-random widths so the template itself is deterministic.
        let mut x = x0;
        let mut k = row * 7;
        while x < x1 {
            let wlen = 0.04 + 0.02 * ((k * 5 + 3) % 4) as f64;
            let xe = (x + wlen).min(x1);
            out.push((x, y, xe, y + 0.03));
            x = xe + 0.02;
            k += 1;
        }
        y += step;
        row += 1;
    }
}

fn pattern_rects(p: Pattern) -> Vec<Rect> {
    let mut r = Vec::new();
    match p {
        Pattern::Paragraph => text_lines(0.30, 0.70, 0.15, 0.85, 0.07, &mut r),
        Pattern::BodyText => text_lines(0.06, 0.94, 0.08, 0.92, 0.06, &mut r),
        Pattern::TitleCentered => {
            r.push((0.20, 0.12, 0.80, 0.20));
            r.push((0.30, 0.28, 0.70, 0.32));
            r.push((0.35, 0.38, 0.65, 0.42));
            r.push((0.40, 0.80, 0.60, 0.84));
        }
        Pattern::TwoColumnLeaders => {
            let mut y = 0.10;
            while y < 0.88 {
                r.push((0.10, y, 0.50, y + 0.03));
                r.push((0.82, y, 0.88, y + 0.03));
                y += 0.08;
            }
        }
        Pattern::Checker => {
            for i in 0..4 {
                for j in 0..4 {
                    if (i + j) % 2 == 0 {
                        let (x, y) = (0.15 + 0.175 * i as f64, 0.15 + 0.175 * j as f64);
                        r.push((x, y, x + 0.175, y + 0.175));
                    }
                }
            }
        }
        Pattern::VerticalBars => {
            for i in 0..5 {
                let x = 0.12 + 0.16 * i as f64;
                r.push((x, 0.10, x + 0.06, 0.90));
            }
        }
        Pattern::Frame => {
            r.push((0.06, 0.06, 0.94, 0.12));
            r.push((0.06, 0.88, 0.94, 0.94));
            r.push((0.06, 0.06, 0.12, 0.94));
            r.push((0.88, 0.06, 0.94, 0.94));
        }
        Pattern::Diagonal => {
            for i in 0..16 {
                let t = i as f64 / 16.0;
                let x = 0.08 + 0.8 * t;
                let y = 0.08 + 0.8 * t;
                r.push((x, y, x + 0.08, y + 0.06));
            }
        }
        Pattern::BottomHalf => text_lines(0.55, 0.92, 0.10, 0.90, 0.07, &mut r),
        Pattern::CenterBlock => {
            r.push((0.38, 0.40, 0.62, 0.44));
            r.push((0.42, 0.50, 0.58, 0.54));
        }
        Pattern::Bullets => {
            let mut y = 0.10;
            while y < 0.88 {
                r.push((0.08, y, 0.13, y + 0.04));
                r.push((0.20, y, 0.70, y + 0.03));
                y += 0.09;
            }
        }
        Pattern::Grid => {
            for i in 0..6 {
                let v = 0.10 + 0.16 * i as f64;
                r.push((v, 0.10, v + 0.02, 0.92));
                r.push((0.10, v, 0.92, v + 0.02));
            }
        }
        Pattern::TopBar => {
            r.push((0.05, 0.05, 0.95, 0.22));
            text_lines(0.30, 0.50, 0.10, 0.90, 0.07, &mut r);
        }
        Pattern::Scatter => {
            let pts = [
                (0.12, 0.70),
                (0.30, 0.15),
                (0.55, 0.62),
                (0.72, 0.28),
                (0.20, 0.40),
                (0.80, 0.80),
                (0.45, 0.85),
                (0.65, 0.08),
                (0.85, 0.50),
                (0.38, 0.35),
            ];
            for (x, y) in pts {
                r.push((x, y, x + 0.08, y + 0.08));
            }
        }
    }
    r
}

fn paint(img: &mut GrayImage, rects: &[Rect], dx: i32, dy: i32) {
    let (w, h) = img.dimensions();
    for &(x0, y0, x1, y1) in rects {
        let px = |f: f64, n: u32| (f * n as f64).round() as i32;
        let (ax, bx) = (px(x0, w) + dx, px(x1, w).max(px(x0, w) + 1) + dx);
        let (ay, by) = (px(y0, h) + dy, px(y1, h).max(px(y0, h) + 1) + dy);
        for y in ay.max(0)..by.min(h as i32) {
            for x in ax.max(0)..bx.min(w as i32) {
                img.put_pixel(x as u32, y as u32, Luma([INK]));
            }
        }
    }
}

/// The noise-free raster of a layout.
pub fn template_raster(pattern: Pattern, height: u32, width: u32) -> GrayImage {
    let mut img = GrayImage::from_pixel(width, height, Luma([BACKGROUND]));
    paint(&mut img, &pattern_rects(pattern), 0, 0);
    img
}

fn keywords(cat: Category) -> &'static [&'static str] {
    match cat {
        Category::Chapters => &[
            "chapter",
            "method",
            "results",
            "experiment",
            "analysis",
            "section",
            "model",
            "discussion",
        ],
        Category::Appendices => &[
            "appendix",
            "supplementary",
            "listing",
            "derivation",
            "raw",
            "additional",
            "tabulated",
            "annex",
        ],
        Category::ReferenceList => &["references", "journal", "proceedings", "vol", "pp", "press", "et", "al"],
        Category::TableofContent => &[
            "contents",
            "page",
            "introduction",
            "conclusion",
            "chapter",
            "part",
            "toc",
            "outline",
        ],
        Category::TitlePage => &[
            "dissertation",
            "submitted",
            "fulfillment",
            "degree",
            "doctor",
            "philosophy",
            "university",
            "faculty",
        ],
        Category::Abstract => &[
            "abstract",
            "summary",
            "propose",
            "findings",
            "contribution",
            "overall",
            "briefly",
            "demonstrates",
        ],
        Category::ListofFigures => &[
            "figure",
            "figures",
            "plot",
            "diagram",
            "illustration",
            "photograph",
            "schematic",
            "fig",
        ],
        Category::Acknowledgment => &[
            "thank",
            "grateful",
            "advisor",
            "support",
            "gratitude",
            "colleagues",
            "encouragement",
            "acknowledge",
        ],
        Category::ListofTables => &[
            "table",
            "tables",
            "tabular",
            "rows",
            "columns",
            "statistics",
            "comparison",
            "tab",
        ],
        Category::CurriculumVitae => &[
            "vita",
            "born",
            "education",
            "employment",
            "awards",
            "publications",
            "birthplace",
            "resume",
        ],
        Category::Dedication => &[
            "dedicated",
            "beloved",
            "memory",
            "mother",
            "father",
            "family",
            "love",
            "wife",
        ],
        Category::ChapterAbstract => &[
            "synopsis",
            "chapter",
            "overview",
            "preview",
            "describes",
            "presents",
            "outlines",
            "precis",
        ],
        Category::Other => &[
            "blank",
            "errata",
            "copyright",
            "reserved",
            "notice",
            "permission",
            "intentionally",
            "preface",
        ],
    }
}

/// Neutral words shared by every category.
fn filler_vocabulary() -> Vec<String> {
    const ONSETS: [&str; 10] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "s"];
    const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];
    const CODAS: [&str; 4] = ["r", "n", "l", "t"];
    let mut out = Vec::new();
    for o in ONSETS {
        for n in NUCLEI {
            for c in CODAS.iter().take(3) {
                out.push(format!("{o}{n}{c}o"));
            }
        }
    }
    out
}

fn page_text(
    cat: Category,
    textual: bool,
    spec: &SyntheticCorpusSpec,
    filler: &[String],
    rng: &mut Rng,
) -> Vec<String> {
    let (lo, hi) = spec.words_per_page;
    let n = rng.random_range(lo..=hi);
    let kw = keywords(cat);
    (0..n)
        .map(|_| {
            if textual && rng.random::<f64>() < spec.keyword_rate {
                kw[rng.random_range(0..kw.len())].to_string()
            } else {
                filler[rng.random_range(0..filler.len())].clone()
            }
        })
        .collect()
}

fn line_blocks(words: &[String], page_id: &str, rng: &mut Rng) -> Vec<OcrBlock> {
    const PER_LINE: usize = 8;
    let n_lines = words.len().div_ceil(PER_LINE).max(1);
    let step = 0.8 / n_lines as f64;
    words
        .chunks(PER_LINE)
        .enumerate()
        .map(|(i, chunk)| OcrBlock {
            id: format!("{page_id}-l{i}"),
            block_type: BlockType::Line,
            text: chunk.join(" "),
            confidence: (rng.random_range(900..=999) as f64) / 1000.0,
            bbox: BoundingBox {
                left: 0.1,
                top: 0.1 + step * i as f64,
                width: 0.8,
                height: (step * 0.8).min(0.05),
            },
        })
        .collect()
}

/// Generate a labelled corpus; bit-identical for equal specs.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<Vec<PageRecord>> {
    spec.validate()?;
    let (h, w) = spec.image_size;
    let filler = filler_vocabulary();
    let noise = Normal::new(0.0, spec.pixel_noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut records = Vec::new();
    for cat in Category::ALL {
        let mode = spec.cue_modes[cat.index()];
        let rects = pattern_rects(spec.pattern_for(cat));
        for page in 0..spec.pages_for(cat) {
            let mut rng = rng_from(spec.seed, &[cat.index() as u64, page as u64]);
            let dx = rng.random_range(-spec.jitter..=spec.jitter);
            let dy = rng.random_range(-spec.jitter..=spec.jitter);
            let mut img = GrayImage::from_pixel(w, h, Luma([BACKGROUND]));
            paint(&mut img, &rects, dx, dy);
            if spec.pixel_noise > 0.0 {
                for p in img.pixels_mut() {
                    let v = p.0[0] as f64 + noise.sample(&mut rng);
                    p.0[0] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
            let words = page_text(cat, mode.textual(), spec, &filler, &mut rng);
            let etd_id = format!("syn-{:02}-{:04}", cat.index(), page / 20);
            let page_id = format!("{etd_id}-{page}");
            let blocks = line_blocks(&words, &page_id, &mut rng);
            records.push(PageRecord::new(
                etd_id,
                (page % 20 + 1) as u32,
                img,
                blocks,
                cat,
                Provenance::Original,
            )?);
        }
    }
    Ok(records)
}
