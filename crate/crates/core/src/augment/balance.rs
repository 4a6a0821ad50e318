use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Category;
use crate::error::{Error, Result};

pub const DEFAULT_FLOOR: usize = 1000;

/// Number of pseudo pages to generate per label.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BalancePlan {
    pub additional: BTreeMap<Category, usize>,
}

impl BalancePlan {
    pub fn additional_for(&self, label: Category) -> usize {
        self.additional.get(&label).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.additional.values().sum()
    }
}

/// Lift every minority label to `floor` pages; majority labels get nothing.
pub fn make_balance_plan(counts: &[usize; Category::COUNT], floor: i64) -> Result<BalancePlan> {
    if floor <= 0 {
        return Err(Error::Config(format!("balance floor must be positive, got {floor}")));
    }
    let floor = floor as usize;
    let additional = Category::ALL
        .iter()
        .map(|&c| {
            let n = if c.is_minority() {
                floor.saturating_sub(counts[c.index()])
            } else {
                0
            };
            (c, n)
        })
        .collect();
    Ok(BalancePlan { additional })
}
