//! Train / validation / test partitioning.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::record::PageRecord;
use super::taxonomy::Category;
use crate::error::{Error, Result};
use crate::rng::rng_from;

/// How records are kept together when partitioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitGrouping {
    /// Pages are assigned independently (stratified by category when enabled).
    #[default]
    Page,
    /// All pages of one thesis land in the same partition.
    Etd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
    pub grouping: SplitGrouping,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.60,
            val_fraction: 0.25,
            test_fraction: 0.15,
            seed: 0,
            stratified: true,
            grouping: SplitGrouping::Page,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.train_fraction, self.val_fraction, self.test_fraction];
        if fr.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(Error::Config(format!("split fractions must lie in (0, 1), got {fr:?}")));
        }
        let sum: f64 = fr.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Indices into the record slice that was split, each list ascending.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    pub fn select<'a>(
        &self,
        records: &'a [PageRecord],
    ) -> (Vec<&'a PageRecord>, Vec<&'a PageRecord>, Vec<&'a PageRecord>) {
        let pick = |ix: &[usize]| ix.iter().map(|&i| &records[i]).collect::<Vec<_>>();
        (pick(&self.train), pick(&self.val), pick(&self.test))
    }

    pub fn select_owned(&self, records: &[PageRecord]) -> (Vec<PageRecord>, Vec<PageRecord>, Vec<PageRecord>) {
        let pick = |ix: &[usize]| ix.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
        (pick(&self.train), pick(&self.val), pick(&self.test))
    }
}

/// (n_train, n_val, n_test) for a pool of `n`.
fn allocate(n: usize, spec: &SplitSpec) -> (usize, usize, usize) {
    let n_test = ((n as f64) * spec.test_fraction).round() as usize;
    let mut n_val = ((n as f64) * spec.val_fraction).round() as usize;
    if n_test + n_val > n {
        n_val = n - n_test.min(n);
    }
    let n_test = n_test.min(n);
    (n - n_test - n_val, n_val, n_test)
}

/// Partition the records. Augmented records always go to the training split.
pub fn split_dataset(records: &[PageRecord], spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    let mut out = SplitIndices::default();
    let originals: Vec<usize> = (0..records.len()).filter(|&i| !records[i].is_augmented()).collect();
    out.train
        .extend((0..records.len()).filter(|&i| records[i].is_augmented()));

    match spec.grouping {
        SplitGrouping::Page if spec.stratified => {
            for cat in Category::ALL {
                let mut pool: Vec<usize> = originals.iter().copied().filter(|&i| records[i].label == cat).collect();
                if pool.is_empty() {
                    continue;
                }
                if pool.len() < 3 {
                    log::warn!(
                        "category {cat} has only {} record(s); stratified split is best effort",
                        pool.len()
                    );
                }
                pool.shuffle(&mut rng_from(spec.seed, &[cat.index() as u64]));
                assign(&pool, spec, &mut out);
            }
        }
        SplitGrouping::Page => {
            let mut pool = originals.clone();
            pool.shuffle(&mut rng_from(spec.seed, &[u64::MAX]));
            assign(&pool, spec, &mut out);
        }
        SplitGrouping::Etd => split_by_etd(records, &originals, spec, &mut out),
    }

    if out.test.is_empty() && originals.len() >= 2 {
        // Never hand back an empty test split: borrow from train, else val.
        let donor = if out.train.iter().any(|&i| !records[i].is_augmented()) {
            &mut out.train
        } else {
            &mut out.val
        };
        if let Some(pos) = donor.iter().rposition(|&i| !records[i].is_augmented()) {
            let moved = donor.remove(pos);
            out.test.push(moved);
        }
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

fn assign(pool: &[usize], spec: &SplitSpec, out: &mut SplitIndices) {
    let (n_train, n_val, _) = allocate(pool.len(), spec);
    out.train.extend_from_slice(&pool[..n_train]);
    out.val.extend_from_slice(&pool[n_train..n_train + n_val]);
    out.test.extend_from_slice(&pool[n_train + n_val..]);
}

fn split_by_etd(records: &[PageRecord], originals: &[usize], spec: &SplitSpec, out: &mut SplitIndices) {
    let mut groups: Vec<(&str, Vec<usize>)> = Vec::new();
    for &i in originals {
        let id = records[i].etd_id.as_str();
        match groups.iter_mut().find(|(g, _)| *g == id) {
            Some((_, members)) => members.push(i),
            None => groups.push((id, vec![i])),
        }
    }
    groups.shuffle(&mut rng_from(spec.seed, &[u64::MAX - 1]));
    let (_, n_val, n_test) = allocate(originals.len(), spec);
    for (_, members) in groups {
        let target = if out.test.len() < n_test {
            &mut out.test
        } else if out.val.len() < n_val {
            &mut out.val
        } else {
            &mut out.train
        };
        target.extend(members);
    }
}

/// SHA-256 over the record keys of each partition; pins a frozen test set.
pub fn split_hash(records: &[PageRecord], split: &SplitIndices) -> String {
    let mut h = Sha256::new();
    for (name, part) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        h.update(name.as_bytes());
        for &i in part {
            h.update(records[i].key().as_bytes());
            h.update([0u8]);
        }
    }
    hex_digest(h)
}

/// SHA-256 over the keys of one record set, in the given order.
pub fn records_hash<'a>(records: impl IntoIterator<Item = &'a PageRecord>) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(r.key().as_bytes());
        h.update([0u8]);
    }
    hex_digest(h)
}

fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
