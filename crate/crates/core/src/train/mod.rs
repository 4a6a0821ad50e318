//! Mini-batch training with focal loss, Adam and early stopping on validation loss.

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Category, PageRecord, Provenance, Vocabulary};
use crate::error::{Error, Result};
use crate::evalrep::metrics::compute_index_metrics;
use crate::model::{
    network_forward, EncodedPage, HierarchicalClassifier, ModelBundle, ModelConfig, ModelInput, Target,
};
use crate::neural::kernels::{focal_loss, update_running_stats};
use crate::neural::{adam_step, AdamConfig, Graph, OptimizerState};
use crate::rng::{rng_from, tag};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub optimizer: AdamConfig,
    pub dropout: f64,
    pub focal_gamma: f64,
    /// Epochs without a new best validation loss before stopping.
    pub patience: usize,
    pub seed: u64,
    pub target: Target,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 40,
            optimizer: AdamConfig::default(),
            dropout: 0.8,
            focal_gamma: 2.0,
            patience: 5,
            seed: 0,
            target: Target::OneLevel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::Config(format!(
                "batch_size ({}), patience ({}) and max_epochs ({}) must be >= 1",
                self.batch_size, self.patience, self.max_epochs
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.focal_gamma.is_nan() || self.focal_gamma < 0.0 {
            return Err(Error::Config(format!("focal gamma {} must be >= 0", self.focal_gamma)));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }
}

/// Patience bookkeeping over a stream of validation losses.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    epoch: usize,
    waited: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            epoch: 0,
            waited: 0,
        }
    }

    pub fn observe(&mut self, val_loss: f64) -> Verdict {
        self.epoch += 1;
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = self.epoch;
            self.waited = 0;
            Verdict::Improved
        } else {
            self.waited += 1;
            if self.waited >= self.patience {
                Verdict::Stop
            } else {
                Verdict::Continue
            }
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Shuffled index batches for one epoch. The permutation depends only on
/// `(seed, epoch)`; the final short batch is kept.
pub fn make_batches(
    records: &[PageRecord],
    batch_size: usize,
    seed: u64,
    epoch: usize,
    role: SplitRole,
) -> Result<Vec<Vec<usize>>> {
    if records.is_empty() {
        return Err(Error::Config("cannot batch an empty record set".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    if role != SplitRole::Train {
        check_originals(records)?;
    }
    Ok(shuffled_batches(records.len(), batch_size, seed, epoch))
}

pub fn shuffled_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(seed, &[tag("shuffle"), epoch as u64]));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Hard error when an augmented record sits in an evaluation split.
pub fn check_originals(records: &[PageRecord]) -> Result<()> {
    match records.iter().find(|r| r.provenance == Provenance::Augmented) {
        Some(r) => Err(Error::Provenance(format!("{}/{}", r.etd_id, r.page_number))),
        None => Ok(()),
    }
}

/// Class indices of `records` under `target`; labels outside the target are a config error.
pub fn target_labels(records: &[PageRecord], target: Target) -> Result<Vec<usize>> {
    records
        .iter()
        .map(|r| {
            target.class_of(r.label).ok_or_else(|| {
                Error::Config(format!(
                    "label {} of {}/{} is outside the {target:?} label space",
                    r.label.name(),
                    r.etd_id,
                    r.page_number
                ))
            })
        })
        .collect()
}

/// A trained bundle with its history and the optimizer state after the last epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    pub bundle: ModelBundle<T>,
    pub history: TrainHistory,
    pub optimizer: OptimizerState<T>,
}

/// Loss and macro-F1 of `bundle` on pre-encoded pages, inference mode.
pub fn evaluate_loss<T: Scalar>(
    bundle: &ModelBundle<T>,
    pages: &[EncodedPage<T>],
    labels: &[usize],
    gamma: f64,
    target: Target,
) -> Result<(f64, f64)> {
    let logits = bundle.logits_encoded(pages)?;
    let loss = focal_loss(&logits, labels, gamma)?.as_f64();
    let pred: Vec<usize> = logits
        .rows()
        .into_iter()
        .map(|r| crate::model::argmax(&r.iter().map(|v| v.as_f64()).collect::<Vec<_>>()))
        .collect();
    let names = target.class_names();
    let f1 = compute_index_metrics(labels, &pred, &names)?.macro_f1;
    Ok((loss, f1))
}

/// Train `bundle` on `train`, selecting the epoch with the lowest validation loss.
pub fn train_model<T: Scalar>(
    mut bundle: ModelBundle<T>,
    train: &[PageRecord],
    val: &[PageRecord],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(format!(
            "training needs non-empty train and validation sets (got {} / {})",
            train.len(),
            val.len()
        )));
    }
    check_originals(val)?;
    if bundle.num_classes() != config.target.num_classes() {
        return Err(Error::Config(format!(
            "bundle has {} classes but target {:?} has {}",
            bundle.num_classes(),
            config.target,
            config.target.num_classes()
        )));
    }
    bundle.check()?;
    bundle.config.dropout = config.dropout;
    let y_train = target_labels(train, config.target)?;
    let y_val = target_labels(val, config.target)?;
    let x_train = bundle.encode_all(train);
    let x_val = bundle.encode_all(val);

    let mut optimizer = OptimizerState::new(config.optimizer);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut epochs = Vec::new();
    let mut best = (bundle.params.clone(), bundle.buffers.clone());
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in 1..=config.max_epochs {
        let mut total = 0.0;
        for (bi, batch) in make_batches(train, config.batch_size, config.seed, epoch, SplitRole::Train)?
            .iter()
            .enumerate()
        {
            let loss = train_step(
                &mut bundle,
                &mut optimizer,
                &x_train,
                &y_train,
                batch,
                config,
                epoch,
                bi,
            )?;
            total += loss * batch.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        let (val_loss, val_macro_f1) = evaluate_loss(&bundle, &x_val, &y_val, config.focal_gamma, config.target)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        info!("epoch {epoch}: train loss {train_loss:.4}, val loss {val_loss:.4}, val macro-F1 {val_macro_f1:.3}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_macro_f1,
        });
        match stopper.observe(val_loss) {
            Verdict::Improved => best = (bundle.params.clone(), bundle.buffers.clone()),
            Verdict::Continue => {}
            Verdict::Stop => {
                stop_reason = StopReason::EarlyStopped;
                break;
            }
        }
    }
    (bundle.params, bundle.buffers) = best;
    Ok(TrainOutcome {
        bundle,
        history: TrainHistory {
            epochs,
            best_epoch: stopper.best_epoch(),
            stop_reason,
        },
        optimizer,
    })
}

#[allow(clippy::too_many_arguments)]
fn train_step<T: Scalar>(
    bundle: &mut ModelBundle<T>,
    optimizer: &mut OptimizerState<T>,
    pages: &[EncodedPage<T>],
    labels: &[usize],
    batch: &[usize],
    config: &TrainConfig,
    epoch: usize,
    index: usize,
) -> Result<f64> {
    let refs: Vec<&EncodedPage<T>> = batch.iter().map(|&i| &pages[i]).collect();
    let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
    let input = ModelInput::stack(&refs)?;
    let mut rng = rng_from(config.seed, &[tag("dropout"), epoch as u64, index as u64]);
    let mut g = Graph::new();
    let out = network_forward(
        &mut g,
        &bundle.params,
        &bundle.buffers,
        &bundle.config,
        &input,
        Some(&mut rng),
    )?;
    let loss = g.focal_loss(out.logits, &y, config.focal_gamma)?;
    let value = g.value(loss).iter().next().expect("scalar loss").as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss at epoch {epoch}, batch {}",
            index + 1
        )));
    }
    debug!("epoch {epoch} batch {}: loss {value:.5}", index + 1);
    let grads = g.param_grads(&g.backward(loss));
    adam_step(&mut bundle.params, &grads, optimizer)?;
    update_running_stats(&mut bundle.buffers, &out.bn_stats, bundle.config.bn_momentum)?;
    Ok(value)
}

/// Records relabeled for one hierarchy level; level 2 drops `Chapters`.
pub fn level_subset(records: &[PageRecord], target: Target) -> Vec<PageRecord> {
    records
        .iter()
        .filter(|r| target.class_of(r.label).is_some())
        .cloned()
        .collect()
}

pub struct HierarchicalOutcome<T: Scalar> {
    pub classifier: HierarchicalClassifier<T>,
    pub level1: TrainOutcome<T>,
    pub level2: TrainOutcome<T>,
}

/// Level 1 on every original page, level 2 on non-chapter pages plus
/// `augmented` (training split only).
pub fn train_hierarchical<T: Scalar>(
    model: &ModelConfig,
    vocabulary: &Vocabulary,
    train: &[PageRecord],
    val: &[PageRecord],
    augmented: &[PageRecord],
    level1: &TrainConfig,
    level2: &TrainConfig,
) -> Result<HierarchicalOutcome<T>> {
    if level1.target != Target::Level1 || level2.target != Target::Level2 {
        return Err(Error::Config(
            "hierarchical training needs level1 and level2 targets".into(),
        ));
    }
    if let Some(r) = augmented.iter().find(|r| r.label == Category::Chapters) {
        return Err(Error::Config(format!(
            "augmented record {}/{} is labeled Chapters",
            r.etd_id, r.page_number
        )));
    }
    let b1 = ModelBundle::new(
        ModelConfig {
            num_classes: 2,
            ..model.clone()
        },
        vocabulary.clone(),
        level1.seed,
    )?;
    let o1 = train_model(b1, train, val, level1)?;
    let mut train2 = level_subset(train, Target::Level2);
    train2.extend(augmented.iter().cloned());
    let val2 = level_subset(val, Target::Level2);
    let b2 = ModelBundle::new(
        ModelConfig {
            num_classes: Target::Level2.num_classes(),
            ..model.clone()
        },
        vocabulary.clone(),
        level2.seed,
    )?;
    let o2 = train_model(b2, &train2, &val2, level2)?;
    let classifier = HierarchicalClassifier::new(o1.bundle.clone(), o2.bundle.clone())?;
    Ok(HierarchicalOutcome {
        classifier,
        level1: o1,
        level2: o2,
    })
}
