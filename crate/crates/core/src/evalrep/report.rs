use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::Category;
use crate::error::{Error, Result};
use crate::neural::params::write_json;

use super::ablation::{AblationTable, Experiment};
use super::case::CaseEvaluation;
use super::reference::Reference;
use super::sweep::SweepResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    Markdown,
}

impl Format {
    pub const ALL: [Format; 3] = [Format::Csv, Format::Json, Format::Markdown];
}

/// Everything one run reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportSet {
    pub cases: Vec<CaseEvaluation>,
    pub ablations: Vec<AblationTable>,
    pub sweep: Option<SweepResult>,
}

impl ReportSet {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn row_labels() -> Vec<&'static str> {
    Category::ALL.iter().map(|c| c.name()).chain(["macro"]).collect()
}

fn prf(e: &CaseEvaluation, label: &str) -> [f64; 3] {
    let m = &e.metrics;
    match m.class(label) {
        Some(c) => [c.precision, c.recall, c.f1],
        None => [m.macro_precision, m.macro_recall, m.macro_f1],
    }
}

/// Category rows plus a macro row; `P_x, R_x, F1_x` per case, full precision.
pub fn cases_csv(cases: &[CaseEvaluation]) -> String {
    let mut s = String::from("category");
    for e in cases {
        let x = e.case.letter();
        write!(s, ",P_{x},R_{x},F1_{x}").unwrap();
    }
    s.push('\n');
    for label in row_labels() {
        s.push_str(label);
        for e in cases {
            for v in prf(e, label) {
                write!(s, ",{v}").unwrap();
            }
        }
        s.push('\n');
    }
    s
}

/// Two-decimal table; with a reference, each case gains a reference F1 column.
pub fn cases_markdown(cases: &[CaseEvaluation], reference: Option<&Reference>) -> String {
    let mut head = vec!["Category".to_string()];
    for e in cases {
        let x = e.case.letter();
        head.extend([format!("P_{x}"), format!("R_{x}"), format!("F1_{x}")]);
        if reference.is_some() {
            head.push(format!("F1_{x} (ref)"));
        }
    }
    let mut s = table_header(&head);
    let flagged = reference.map(Reference::inconsistent_rows).unwrap_or_default();
    for label in row_labels() {
        let mut cells = vec![label.to_string()];
        for e in cases {
            let [p, r, f] = prf(e, label);
            let absent = e.metrics.class(label).is_some_and(|c| c.absent);
            let mark = if absent { "†" } else { "" };
            cells.extend([format!("{p:.2}"), format!("{r:.2}"), format!("{f:.2}{mark}")]);
            if let Some(reference) = reference {
                let x = e.case.letter();
                cells.push(match reference.row(x, label) {
                    Some([_, _, f1]) => {
                        let mark = if flagged.contains(&(x.to_string(), label.to_string())) {
                            "‡"
                        } else {
                            ""
                        };
                        format!("{f1:.2}{mark}")
                    }
                    None => "--".into(),
                });
            }
        }
        s.push_str(&table_row(&cells));
    }
    let ids: Vec<String> = cases.iter().map(|e| e.test_hash.chars().take(12).collect()).collect();
    writeln!(s, "\nTest set: {}", ids.join(", ")).unwrap();
    if cases.iter().any(|e| e.metrics.classes.iter().any(|c| c.absent)) {
        s.push_str(
            "\n† category neither present nor predicted in the test set; scored 0 and counted in the macro row.\n",
        );
    }
    if reference.is_some() && !flagged.is_empty() {
        s.push_str("\n‡ reference F1 is not the harmonic mean of its reference P and R; shown as published.\n");
    }
    s
}

/// Accuracy / macro-F1 comparison with reference baselines merged in.
pub fn comparison_markdown(eval: &CaseEvaluation, reference: Option<&Reference>) -> String {
    let mut s = table_header(&["Model".into(), "#param".into(), "Accuracy".into(), "macro F1".into()]);
    if let Some(r) = reference {
        for b in &r.baselines {
            let f1 = b.macro_f1.map_or("-".to_string(), |v| format!("{v:.2}"));
            s.push_str(&table_row(&[
                b.model.clone(),
                b.params.clone(),
                format!("{:.2}", b.accuracy),
                f1,
            ]));
        }
    }
    s.push_str(&table_row(&[
        format!("ETDPC (this run, case {})", eval.case.letter()),
        "-".into(),
        format!("{:.2}", eval.metrics.accuracy),
        format!("{:.2}", eval.metrics.macro_f1),
    ]));
    s
}

pub fn ablation_csv(table: &AblationTable) -> String {
    let mut s = String::from("category");
    for v in &table.variants {
        write!(s, ",F1_{}", v.name).unwrap();
    }
    s.push('\n');
    for label in row_labels() {
        s.push_str(label);
        for v in &table.variants {
            let f = v.metrics.f1_of(label).unwrap_or(v.metrics.macro_f1);
            write!(s, ",{f}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn ablation_markdown(table: &AblationTable, reference: Option<&Reference>) -> String {
    let mut head = vec!["Category".to_string()];
    head.extend(table.variants.iter().map(|v| format!("F1 {}", v.name)));
    let mut s = table_header(&head);
    for label in row_labels() {
        let mut cells = vec![label.to_string()];
        for v in &table.variants {
            cells.push(format!("{:.2}", v.metrics.f1_of(label).unwrap_or(v.metrics.macro_f1)));
        }
        s.push_str(&table_row(&cells));
    }
    if let (Some(r), Experiment::Encoder) = (reference, table.experiment) {
        let [lo, hi] = r.encoder_swap_f1_gain;
        writeln!(
            s,
            "\nReference per-category F1 gain of talking-heads over multi-head: {lo:.2} to {hi:.2}."
        )
        .unwrap();
    }
    s
}

/// Wide, plot-ready layout: one row per fraction, one column per category.
pub fn sweep_csv(sweep: &SweepResult) -> String {
    let mut s = String::from("fraction");
    for c in &sweep.categories {
        write!(s, ",{}", c.name()).unwrap();
    }
    s.push('\n');
    for &f in &sweep.fractions {
        write!(s, "{f}").unwrap();
        for &c in &sweep.categories {
            match sweep.cell(c, f).and_then(|cell| cell.f1) {
                Some(v) => write!(s, ",{v}").unwrap(),
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}

pub fn sweep_markdown(sweep: &SweepResult) -> String {
    let mut head = vec!["Fraction".to_string()];
    head.extend(sweep.categories.iter().map(|c| c.name().to_string()));
    let mut s = table_header(&head);
    for &f in &sweep.fractions {
        let mut cells = vec![format!("{:.0}%", f * 100.0)];
        for &c in &sweep.categories {
            cells.push(match sweep.cell(c, f) {
                Some(cell) => match cell.f1 {
                    Some(v) => format!("{v:.2} (n={})", cell.train_pages),
                    None => "skipped".into(),
                },
                None => "-".into(),
            });
        }
        s.push_str(&table_row(&cells));
    }
    s
}

fn table_header(cells: &[String]) -> String {
    let mut s = table_row(cells);
    s.push_str(&table_row(&vec!["---".to_string(); cells.len()]));
    s
}

fn table_row(cells: &[String]) -> String {
    format!("| {} |\n", cells.join(" | "))
}

fn write_text(path: &Path, text: &str) -> Result<PathBuf> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

/// Write the requested formats into `dir` and return the files written.
pub fn emit_report(
    set: &ReportSet,
    dir: &Path,
    formats: &[Format],
    reference: Option<&Reference>,
) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for &format in formats {
        match format {
            Format::Json => {
                let path = dir.join("report.json");
                write_json(&path, set)?;
                out.push(path);
            }
            Format::Csv => {
                if !set.cases.is_empty() {
                    out.push(write_text(&dir.join("cases.csv"), &cases_csv(&set.cases))?);
                }
                for t in &set.ablations {
                    out.push(write_text(&dir.join(ablation_file(t, "csv")), &ablation_csv(t))?);
                }
                if let Some(sw) = &set.sweep {
                    out.push(write_text(&dir.join("sweep.csv"), &sweep_csv(sw))?);
                }
            }
            Format::Markdown => {
                if let Some(last) = set.cases.last() {
                    out.push(write_text(
                        &dir.join("cases.md"),
                        &cases_markdown(&set.cases, reference),
                    )?);
                    out.push(write_text(
                        &dir.join("comparison.md"),
                        &comparison_markdown(last, reference),
                    )?);
                }
                for t in &set.ablations {
                    out.push(write_text(
                        &dir.join(ablation_file(t, "md")),
                        &ablation_markdown(t, reference),
                    )?);
                }
                if let Some(sw) = &set.sweep {
                    out.push(write_text(&dir.join("sweep.md"), &sweep_markdown(sw))?);
                }
            }
        }
    }
    Ok(out)
}

fn ablation_file(t: &AblationTable, ext: &str) -> String {
    let name = match t.experiment {
        Experiment::Encoder => "encoder",
        Experiment::Modality => "modality",
    };
    format!("ablation_{name}.{ext}")
}
