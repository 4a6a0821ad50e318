use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::Serialize;
use serde_json::json;

use etdpc::augment::{augment_plan, make_balance_plan, BalancePlan, IdentityHook, ParaphraseHook, ShuffleDropoutHook};
use etdpc::corpus::manifest::load_entry;
use etdpc::corpus::{
    build_vocabulary, class_counts, generate_synthetic_corpus, read_entries, read_manifest, split_dataset, split_hash,
    write_manifest, Category, PageRecord, Provenance,
};
use etdpc::evalrep::{
    data_efficiency_sweep, emit_report, evaluate_case, run_ablation, train_case, AblationTable, Case, CaseEvaluation,
    Classifier, Experiment, Format, Reference, ReportSet, SweepResult,
};
use etdpc::model::{HierarchicalClassifier, ModelBundle, LEVEL1_FILE};
use etdpc::rng::{derive_seed, tag};
use etdpc::{Error, ErrorKind, Result, Scalar};

use crate::config::{HookKind, RunConfig};
use crate::dataset::{
    augmented_manifest, io, load_dataset, write_json, SplitFile, AUGMENTED_DIR, MANIFEST, SPLITS, VOCABULARY,
};

pub const ONE_LEVEL_FILE: &str = "model.json";

/// A command failure tagged with the pipeline stage it happened in.
#[derive(Debug)]
pub struct StageError {
    pub stage: String,
    pub error: Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage `{}` failed: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {}

impl StageError {
    pub fn exit_code(&self) -> i32 {
        exit_code(self.error.kind())
    }
}

pub fn exit_code(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Runtime => 4,
    }
}

pub trait AtStage<V> {
    fn at(self, stage: &str) -> std::result::Result<V, StageError>;
}

impl<V> AtStage<V> for Result<V> {
    fn at(self, stage: &str) -> std::result::Result<V, StageError> {
        self.map_err(|error| StageError {
            stage: stage.to_string(),
            error,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PrepareSummary {
    pub records: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub vocabulary: usize,
    pub split_hash: String,
}

/// Normalize a manifest or a synthetic corpus into `data_dir`.
pub fn prepare(cfg: &RunConfig, manifest: Option<&Path>, synthetic: Option<usize>) -> Result<PrepareSummary> {
    let records = match (manifest.or(cfg.paths.manifest.as_deref()), synthetic) {
        (_, Some(n)) => {
            let mut spec = cfg.data.synthetic.clone().unwrap_or_default();
            spec.pages_per_category = n;
            spec.category_pages = None;
            generate_synthetic_corpus(&spec)?
        }
        (Some(path), None) => read_manifest(path)?,
        (None, None) => match &cfg.data.synthetic {
            Some(spec) => generate_synthetic_corpus(spec)?,
            None => {
                return Err(Error::Config(
                    "nothing to prepare: give a manifest or a synthetic corpus size".into(),
                ))
            }
        },
    };
    if let Some(r) = records.iter().find(|r| r.provenance != Provenance::Original) {
        return Err(Error::Provenance(format!("{}/{}", r.etd_id, r.page_number)));
    }
    let split = split_dataset(&records, &cfg.split)?;
    let hash = split_hash(&records, &split);
    let train: Vec<PageRecord> = split.train.iter().map(|&i| records[i].clone()).collect();
    let vocabulary = build_vocabulary(&train, cfg.data.max_vocab)?;

    let dir = &cfg.paths.data_dir;
    let stale = dir.join(AUGMENTED_DIR);
    if stale.exists() {
        warn!("removing augmented pages from an earlier split at {}", stale.display());
        fs::remove_dir_all(&stale).map_err(|e| io(&stale, e))?;
    }
    write_manifest(&dir.join(MANIFEST), &records)?;
    write_json(&dir.join(VOCABULARY), &vocabulary)?;
    let summary = PrepareSummary {
        records: records.len(),
        train: split.train.len(),
        val: split.val.len(),
        test: split.test.len(),
        vocabulary: vocabulary.len(),
        split_hash: hash.clone(),
    };
    write_json(&dir.join(SPLITS), &SplitFile { hash, indices: split })?;
    info!(
        "prepared {} records ({} / {} / {}) in {}",
        summary.records,
        summary.train,
        summary.val,
        summary.test,
        dir.display()
    );
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct AugmentSummary {
    pub plan: BalancePlan,
    pub written: usize,
    pub manifest: PathBuf,
}

/// Top minority categories up to the floor. The pool is the given manifest,
/// or else the training split of the prepared dataset.
pub fn augment(
    cfg: &RunConfig,
    manifest: Option<&Path>,
    floor: Option<i64>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<AugmentSummary> {
    let pool = match manifest {
        Some(path) => read_manifest(path)?,
        None => load_dataset(&cfg.paths.data_dir, false)?.train,
    };
    let originals: Vec<PageRecord> = pool.into_iter().filter(|r| !r.is_augmented()).collect();
    let plan = make_balance_plan(&class_counts(&originals), floor.unwrap_or(cfg.augment.floor))?;
    let mut noise = cfg.noise.clone();
    let mut render = cfg.render.clone();
    if let Some(s) = seed {
        noise.seed = derive_seed(s, &[tag("noise")]);
        render.seed = derive_seed(s, &[tag("render")]);
    }
    let hook: Box<dyn ParaphraseHook> = match cfg.augment.hook {
        HookKind::Identity => Box::new(IdentityHook),
        HookKind::ShuffleDropout => Box::new(ShuffleDropoutHook {
            dropout: cfg.augment.hook_dropout,
        }),
    };
    info!("augmenting {} pages", plan.total());
    let pages = augment_plan(&originals, &plan, &noise, &render, hook.as_ref())?;
    let path = match out {
        Some(dir) => dir.join(MANIFEST),
        None => augmented_manifest(&cfg.paths.data_dir),
    };
    write_manifest(&path, &pages)?;
    write_json(&path.with_file_name("plan.json"), &plan)?;
    Ok(AugmentSummary {
        plan,
        written: pages.len(),
        manifest: path,
    })
}

pub fn case_dir(root: &Path, case: Case) -> PathBuf {
    root.join(format!("case_{}", case.letter()))
}

pub fn save_classifier<T: Scalar>(clf: &Classifier<T>, dir: &Path) -> Result<()> {
    match clf {
        Classifier::OneLevel(b) => b.save(&dir.join(ONE_LEVEL_FILE)),
        Classifier::Hierarchical(h) => h.save_dir(dir),
    }
}

/// Load whichever classifier `dir` holds.
pub fn load_classifier<T: Scalar>(dir: &Path) -> Result<Classifier<T>> {
    if dir.join(ONE_LEVEL_FILE).is_file() {
        Ok(Classifier::OneLevel(ModelBundle::load(&dir.join(ONE_LEVEL_FILE))?))
    } else if dir.join(LEVEL1_FILE).is_file() {
        Ok(Classifier::Hierarchical(HierarchicalClassifier::load_dir(dir)?))
    } else {
        Err(Error::Config(format!(
            "no checkpoint in {}; run `train` first",
            dir.display()
        )))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub case: Case,
    pub dir: PathBuf,
    /// `(role, best epoch, epochs run)`
    pub runs: Vec<(String, usize, usize)>,
}

/// Train a case and write its bundles, histories and optimizer states.
pub fn train<T: Scalar>(cfg: &RunConfig, case: Case, out: Option<&Path>) -> Result<TrainSummary> {
    let data = load_dataset(&cfg.paths.data_dir, case == Case::C)?;
    let (clf, runs) = train_case::<T>(case, &data.case_data(), &cfg.model, &data.vocabulary, &cfg.train)?;
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| case_dir(&cfg.paths.checkpoint_dir, case));
    fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
    save_classifier(&clf, &dir)?;
    let mut summary = Vec::new();
    for run in &runs {
        write_json(&dir.join(format!("history_{}.json", run.role)), &run.history)?;
        write_json(&dir.join(format!("optimizer_{}.json", run.role)), &run.optimizer)?;
        summary.push((run.role.clone(), run.history.best_epoch, run.history.epochs.len()));
    }
    Ok(TrainSummary {
        case,
        dir,
        runs: summary,
    })
}

fn report(set: &ReportSet, dir: &Path) -> Result<Vec<PathBuf>> {
    emit_report(set, dir, &Format::ALL, Some(&Reference::builtin()))
}

/// Score a trained case on the test split and write its report.
pub fn eval<T: Scalar>(cfg: &RunConfig, case: Case, out: Option<&Path>) -> Result<CaseEvaluation> {
    let data = load_dataset(&cfg.paths.data_dir, false)?;
    let clf = load_classifier::<T>(&case_dir(&cfg.paths.checkpoint_dir, case))?;
    let evaluation = evaluate_case(case, &clf, &data.test)?;
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| case_dir(&cfg.paths.output_dir, case));
    let set = ReportSet {
        cases: vec![evaluation.clone()],
        ..ReportSet::default()
    };
    report(&set, &dir)?;
    Ok(evaluation)
}

pub fn ablate<T: Scalar>(
    cfg: &RunConfig,
    experiment: Experiment,
    case: Case,
    out: Option<&Path>,
) -> Result<AblationTable> {
    let data = load_dataset(&cfg.paths.data_dir, case == Case::C)?;
    let table = run_ablation::<T>(
        experiment,
        case,
        &data.case_data(),
        &cfg.model,
        &data.vocabulary,
        &cfg.train,
    )?;
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.output_dir.join("ablation"));
    let set = ReportSet {
        ablations: vec![table.clone()],
        ..ReportSet::default()
    };
    report(&set, &dir)?;
    Ok(table)
}

pub fn sweep<T: Scalar>(
    cfg: &RunConfig,
    categories: &[Category],
    fractions: &[f64],
    case: Case,
    out: Option<&Path>,
) -> Result<SweepResult> {
    let data = load_dataset(&cfg.paths.data_dir, case == Case::C)?;
    let result = data_efficiency_sweep::<T>(
        categories,
        fractions,
        case,
        &data.case_data(),
        &cfg.model,
        &data.vocabulary,
        &cfg.train,
        derive_seed(cfg.train.seed, &[tag("sweep")]),
    )?;
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.output_dir.join("sweep"));
    let set = ReportSet {
        sweep: Some(result.clone()),
        ..ReportSet::default()
    };
    report(&set, &dir)?;
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PredictSummary {
    pub pages: usize,
    pub errors: usize,
}

/// Write one JSON line per manifest entry: a prediction, or an error record
/// when the page cannot be loaded. Labels in the manifest are ignored.
pub fn predict<T: Scalar>(checkpoint: &Path, manifest: &Path, out: &Path) -> Result<PredictSummary> {
    let clf = load_classifier::<T>(checkpoint)?;
    let entries = read_entries(manifest)?;
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut loaded: Vec<std::result::Result<PageRecord, String>> = Vec::with_capacity(entries.len());
    for entry in &entries {
        // The label is a placeholder: prediction never reads it.
        loaded.push(load_entry(&base, entry, Category::Chapters).map_err(|e| e.to_string()));
    }
    let pages: Vec<PageRecord> = loaded.iter().filter_map(|r| r.as_ref().ok().cloned()).collect();
    let start = Instant::now();
    let predictions = if pages.is_empty() {
        Vec::new()
    } else {
        clf.predict(&pages)?
    };
    let secs = start.elapsed().as_secs_f64();
    if !pages.is_empty() {
        info!(
            "predicted {} pages in {secs:.3}s ({:.4}s per page)",
            pages.len(),
            secs / pages.len() as f64
        );
    }

    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    let file = fs::File::create(out).map_err(|e| io(out, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut preds = predictions.iter();
    let mut errors = 0;
    for (entry, rec) in entries.iter().zip(&loaded) {
        let line = match rec {
            Ok(_) => serde_json::to_string(preds.next().expect("one prediction per loaded page")),
            Err(msg) => {
                errors += 1;
                warn!("{}/{}: {msg}", entry.etd_id, entry.page_number);
                serde_json::to_string(&json!({
                    "etd_id": entry.etd_id,
                    "page_number": entry.page_number,
                    "error": msg,
                }))
            }
        }
        .map_err(|e| Error::Schema(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| io(out, e))?;
    }
    w.flush().map_err(|e| io(out, e))?;
    Ok(PredictSummary {
        pages: entries.len(),
        errors,
    })
}

/// prepare, augment (when case c is requested), then train and evaluate each
/// configured case and write the combined report. Artifacts of finished
/// stages stay on disk when a later stage fails.
pub fn end_to_end<T: Scalar>(cfg: &RunConfig) -> std::result::Result<ReportSet, StageError> {
    let prepared = prepare(cfg, None, None).at("prepare")?;
    println!("split hash {}", prepared.split_hash);
    if cfg.cases.contains(&Case::C) {
        augment(cfg, None, None, None, None).at("augment")?;
    }
    let mut set = ReportSet::default();
    for &case in &cfg.cases {
        train::<T>(cfg, case, None).at(&format!("train (case {})", case.letter()))?;
        set.cases
            .push(eval::<T>(cfg, case, None).at(&format!("eval (case {})", case.letter()))?);
    }
    report(&set, &cfg.paths.output_dir).at("report")?;
    Ok(set)
}
