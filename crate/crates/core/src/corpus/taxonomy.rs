//! The thirteen page categories and their chapter / non-chapter grouping.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// One of the thirteen page categories. The discriminant is the stable label index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Chapters = 0,
    Appendices = 1,
    ReferenceList = 2,
    TableofContent = 3,
    TitlePage = 4,
    Abstract = 5,
    ListofFigures = 6,
    Acknowledgment = 7,
    ListofTables = 8,
    CurriculumVitae = 9,
    Dedication = 10,
    ChapterAbstract = 11,
    Other = 12,
}

/// First-level routing class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level1 {
    Chapter = 0,
    NonChapter = 1,
}

impl Level1 {
    pub const ALL: [Level1; 2] = [Level1::Chapter, Level1::NonChapter];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Level1::Chapter => "CHAPTER",
            Level1::NonChapter => "NONCHAPTER",
        }
    }
}

impl Category {
    pub const COUNT: usize = 13;

    pub const ALL: [Category; 13] = [
        Category::Chapters,
        Category::Appendices,
        Category::ReferenceList,
        Category::TableofContent,
        Category::TitlePage,
        Category::Abstract,
        Category::ListofFigures,
        Category::Acknowledgment,
        Category::ListofTables,
        Category::CurriculumVitae,
        Category::Dedication,
        Category::ChapterAbstract,
        Category::Other,
    ];

    /// The categories the augmentation step tops up.
    pub const MINORITY: [Category; 7] = [
        Category::Abstract,
        Category::ListofFigures,
        Category::Acknowledgment,
        Category::ListofTables,
        Category::CurriculumVitae,
        Category::Dedication,
        Category::ChapterAbstract,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Category> {
        Category::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Chapters => "Chapters",
            Category::Appendices => "Appendices",
            Category::ReferenceList => "ReferenceList",
            Category::TableofContent => "TableofContent",
            Category::TitlePage => "TitlePage",
            Category::Abstract => "Abstract",
            Category::ListofFigures => "ListofFigures",
            Category::Acknowledgment => "Acknowledgment",
            Category::ListofTables => "ListofTables",
            Category::CurriculumVitae => "CurriculumVitae",
            Category::Dedication => "Dedication",
            Category::ChapterAbstract => "ChapterAbstract",
            Category::Other => "Other",
        }
    }

    pub fn level1(self) -> Level1 {
        if self == Category::Chapters {
            Level1::Chapter
        } else {
            Level1::NonChapter
        }
    }

    pub fn is_minority(self) -> bool {
        Category::MINORITY.contains(&self)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        let found = match key.as_str() {
            "references" | "ref" => Some(Category::ReferenceList),
            "toc" | "tableofcontents" => Some(Category::TableofContent),
            "ack" | "acknowledgement" | "acknowledgements" | "acknowledgments" => Some(Category::Acknowledgment),
            "cv" => Some(Category::CurriculumVitae),
            "cabstract" => Some(Category::ChapterAbstract),
            _ => Category::ALL
                .iter()
                .copied()
                .find(|c| c.name().to_ascii_lowercase() == key),
        };
        found.ok_or_else(|| Error::Input(format!("unknown category label {s:?}")))
    }
}

/// The label set a classifier is trained over, with the level mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryTaxonomy {
    labels: Vec<Category>,
}

impl Default for CategoryTaxonomy {
    fn default() -> Self {
        Self::new()
    }
}

impl CategoryTaxonomy {
    pub fn new() -> Self {
        Self {
            labels: Category::ALL.to_vec(),
        }
    }

    pub fn labels(&self) -> &[Category] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn level1_of(&self, label: Category) -> Level1 {
        label.level1()
    }

    /// Classes of the second-level classifier: every label except `Chapters`, in taxonomy order.
    pub fn level2_labels(&self) -> Vec<Category> {
        self.labels
            .iter()
            .copied()
            .filter(|c| c.level1() == Level1::NonChapter)
            .collect()
    }
}
