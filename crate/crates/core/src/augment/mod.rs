//! Pseudo pages for minority categories: paraphrase, wrap at 90 columns,
//! render, then Gaussian noise, salt-and-pepper, blur and contrast.

pub mod balance;
pub mod noise;
pub mod paraphrase;
pub mod render;
pub mod wrap;

use rayon::prelude::*;

pub use balance::{make_balance_plan, BalancePlan, DEFAULT_FLOOR};
pub use noise::{
    additive_gaussian_noise, apply_noise_pipeline, gaussian_blur, linear_contrast, salt_and_pepper, NoiseParams,
    NoiseStage,
};
pub use paraphrase::{paraphrase, IdentityHook, ParaphraseHook, ShuffleDropoutHook};
pub use render::{render_text_image, render_text_page, RenderSpec};
pub use wrap::{wrap_text, DEFAULT_WRAP_WIDTH};

use crate::corpus::{BlockType, Category, OcrBlock, PageRecord, Provenance};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, tag};

/// Make one pseudo page from `source`. `seed` is the sample's own stream.
pub fn augment_one(
    source: &PageRecord,
    index: usize,
    seed: u64,
    noise: &NoiseParams,
    render: &RenderSpec,
    hook: &dyn ParaphraseHook,
) -> Result<PageRecord> {
    let text = paraphrase(&source.full_text, &source.key(), hook, derive_seed(seed, &[1]))?;
    let lines = wrap_text(&text, DEFAULT_WRAP_WIDTH);
    let render = RenderSpec {
        seed: derive_seed(seed, &[2]),
        ..render.clone()
    };
    let page = render_text_page(&lines, &render)?;
    let noise = NoiseParams {
        seed: derive_seed(seed, &[3]),
        ..noise.clone()
    };
    let image = apply_noise_pipeline(&page.image, &noise)?;
    let etd_id = format!("aug-{}", source.label.name());
    let blocks = page
        .lines
        .into_iter()
        .enumerate()
        .map(|(i, (text, bbox))| OcrBlock {
            id: format!("{etd_id}-{}-l{i}", index + 1),
            block_type: BlockType::Line,
            text,
            confidence: 1.0,
            bbox,
        })
        .collect();
    PageRecord::new(
        etd_id,
        index as u32 + 1,
        image,
        blocks,
        source.label,
        Provenance::Augmented,
    )
}

/// Generate `n` pseudo pages of `label`, cycling through its original pages.
///
/// Sample `i` draws from a stream derived from `(noise.seed, label, i)`, so the
/// output does not depend on how the work is scheduled.
pub fn augment_category(
    records: &[PageRecord],
    label: Category,
    n: i64,
    noise: &NoiseParams,
    render: &RenderSpec,
    hook: &dyn ParaphraseHook,
) -> Result<Vec<PageRecord>> {
    if n < 0 {
        return Err(Error::Config(format!("cannot generate {n} samples")));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    noise.validate()?;
    render.validate()?;
    let sources: Vec<&PageRecord> = records
        .iter()
        .filter(|r| r.label == label && !r.is_augmented())
        .collect();
    if sources.is_empty() {
        return Err(Error::UnsatisfiablePlan(format!(
            "no original {label} pages to augment from"
        )));
    }
    (0..n as usize)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(noise.seed, &[tag(label.name()), i as u64]);
            augment_one(sources[i % sources.len()], i, seed, noise, render, hook)
        })
        .collect()
}

/// Execute a whole plan, labels in taxonomy order.
pub fn augment_plan(
    records: &[PageRecord],
    plan: &BalancePlan,
    noise: &NoiseParams,
    render: &RenderSpec,
    hook: &dyn ParaphraseHook,
) -> Result<Vec<PageRecord>> {
    let mut out = Vec::new();
    for (&label, &n) in &plan.additional {
        if n > 0 {
            out.extend(augment_category(records, label, n as i64, noise, render, hook)?);
        }
    }
    Ok(out)
}
