//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line
//! (straight to stdout, so it shows without `--nocapture`) and then asserts.
//!
//! Criteria 7, 8 and 9 train the default desk-scale model on the synthetic
//! corpus and take several minutes each.

use std::io::Write;
use std::time::Instant;

use image::{GrayImage, Luma};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal};

use etdpc::augment::{
    additive_gaussian_noise, augment_category, linear_contrast, make_balance_plan, salt_and_pepper, NoiseParams,
    RenderSpec, ShuffleDropoutHook,
};
use etdpc::corpus::{
    build_vocabulary, class_counts, generate_synthetic_corpus, read_manifest, split_dataset, write_manifest, Category,
    CueMode, Level1, PageRecord, Provenance, SplitSpec, SyntheticCorpusSpec, Vocabulary,
};
use etdpc::evalrep::{
    compute_index_metrics, data_efficiency_sweep, emit_report, evaluate_case, run_ablation, sweep_subset, train_case,
    Case, CaseData, Classifier, Experiment, Format, ReportSet, SWEEP_CATEGORIES, SWEEP_FRACTIONS,
};
use etdpc::model::{argmax, network_forward, ModelBundle, ModelConfig, ModelInput, PredictionRecord};
use etdpc::neural::kernels::{
    attention_layer, gated_gelu_layer, init_attention, init_ffn, init_preact_block, preact_block_layer,
};
use etdpc::neural::{
    focal_loss, grad_check, grad_check_params, multi_head_attention, preact_residual_block, talking_heads_attention,
    AttentionParams, BnMode, Conv2dSpec, GradCheckReport, Graph, ParamStore, Var,
};
use etdpc::rng::{rng_from, Rng};
use etdpc::train::TrainConfig;
use etdpc::Result;

const GRAD_TOL_CONV: f64 = 1e-4;
const GRAD_TOL_DENSE: f64 = 1e-6;
const GRAD_SUITE_BUDGET_S: f64 = 300.0;
const REDUCTION_TOL: f64 = 1e-12;
const LN13_TOL: f64 = 1e-9;
const ROW_SUM_TOL: f64 = 1e-6;
const ATTENTION_CASES: usize = 1000;
const NOISE_SIGMA_REL_TOL: f64 = 0.05;
const BALANCE_FLOOR: i64 = 1000;
const MOCK_MANIFEST_SIZE: usize = 92_371;
const MOCK_TEST_SIZE: usize = 13_856;
const MOCK_TEST_SLACK: usize = 13;
const LEARNABILITY_F1: f64 = 0.90;
const LEARNABILITY_EPOCHS: usize = 10;
const LEARNABILITY_BUDGET_S: f64 = 1800.0;
const CROSS_MODALITY_F1: f64 = 0.20;
const MINORITY_TRAIN_CAP: usize = 20;
const METRIC_SETS: usize = 100;

/// Table 1 page counts in taxonomy order.
const TABLE1_COUNTS: [usize; 13] = [71200, 9891, 3385, 1114, 911, 777, 586, 543, 477, 124, 77, 66, 3220];

fn verdict(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n:>2}: {} | {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = rng_from(seed, &[]);
    let n = Normal::new(0.0, 1.0).unwrap();
    ArrayD::from_shape_fn(IxDyn(shape), |_| n.sample(&mut rng))
}

/// Contract an output with fixed random weights to get a scalar.
fn project(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let w = randn(g.shape(y), 999);
    let c = g.constant(w);
    let m = g.mul(y, c)?;
    Ok(g.sum(m))
}

fn tiny_corpus(pages: usize, seed: u64) -> Vec<PageRecord> {
    generate_synthetic_corpus(&SyntheticCorpusSpec {
        pages_per_category: pages,
        image_size: (32, 32),
        seed,
        ..SyntheticCorpusSpec::default()
    })
    .unwrap()
}

fn tiny_train(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        max_epochs: 3,
        dropout: 0.1,
        seed,
        ..TrainConfig::default()
    }
}

struct Splits {
    train: Vec<PageRecord>,
    val: Vec<PageRecord>,
    test: Vec<PageRecord>,
    vocab: Vocabulary,
}

fn split(records: &[PageRecord], seed: u64) -> Splits {
    let idx = split_dataset(
        records,
        &SplitSpec {
            seed,
            ..SplitSpec::default()
        },
    )
    .unwrap();
    let (train, val, test) = idx.select_owned(records);
    let vocab = build_vocabulary(&train, 5000).unwrap();
    Splits {
        train,
        val,
        test,
        vocab,
    }
}

impl Splits {
    fn data<'a>(&'a self, augmented: &'a [PageRecord]) -> CaseData<'a> {
        CaseData {
            train: &self.train,
            val: &self.val,
            test: &self.test,
            augmented,
        }
    }
}

/// Routing disagreements, counted independently of the library's audit.
fn audit(preds: &[PredictionRecord]) -> usize {
    preds
        .iter()
        .filter(|p| {
            let routed_chapter = argmax(&p.level1_probs) == Level1::Chapter.index();
            let labelled_chapter = p.label == Category::Chapters;
            routed_chapter != labelled_chapter || p.level2_probs.is_some() == routed_chapter
        })
        .count()
}

// ---------------------------------------------------------------- criterion 1

fn full_model_check(layers: usize, seed: u64) -> GradCheckReport {
    let mut cfg = ModelConfig::tiny(3);
    cfg.text.layers = layers;
    cfg.dropout = 0.0;
    let recs = tiny_corpus(1, seed);
    let vocab = build_vocabulary(&recs, 50).unwrap();
    let mut bundle = ModelBundle::<f64>::new(cfg, vocab, seed).unwrap();
    let mut rng = rng_from(seed, &[1]);
    let n = Normal::new(0.0, 0.3).unwrap();
    for (_, v) in bundle.params.iter_mut() {
        v.mapv_inplace(|_| n.sample(&mut rng));
    }
    let enc = bundle.encode_all(&recs[..3]);
    let input = ModelInput::stack(&enc.iter().collect::<Vec<_>>()).unwrap();
    let (config, buffers) = (bundle.config.clone(), bundle.buffers.clone());
    grad_check_params(
        |g, store| {
            let mut rng = rng_from(0, &[]);
            let out = network_forward(g, store, &buffers, &config, &input, Some(&mut rng))?;
            g.focal_loss(out.logits, &[0, 2, 1], 2.0)
        },
        &bundle.params,
        GRAD_TOL_CONV,
    )
    .unwrap()
}

#[test]
fn kernel_gradient_suite() {
    let start = Instant::now();
    let mut results: Vec<(&str, GradCheckReport)> = Vec::new();
    let mut rng = Rng::seed_from_u64(1);

    results.push((
        "linear+add_bias+gelu",
        grad_check(
            |g, v| {
                let y = g.linear(v[0], v[1])?;
                let y = g.add_bias(y, v[2])?;
                let y = g.gelu(y);
                project(g, y)
            },
            &[randn(&[3, 4], 1), randn(&[4, 2], 2), randn(&[2], 3)],
            GRAD_TOL_DENSE,
        )
        .unwrap(),
    ));
    results.push((
        "batch_matmul+permute+reshape",
        grad_check(
            |g, v| {
                let c = g.batch_matmul(v[0], v[1], true)?;
                let p = g.permute(c, &[1, 0, 2])?;
                let r = g.reshape(p, &[2, 6])?;
                project(g, r)
            },
            &[randn(&[2, 3, 4], 4), randn(&[2, 2, 4], 5)],
            GRAD_TOL_DENSE,
        )
        .unwrap(),
    ));
    let mask = Array2::from_shape_fn((2, 4), |(b, j)| j != b + 1);
    results.push((
        "masked softmax",
        grad_check(
            |g, v| {
                let s = g.softmax(v[0], Some(mask.clone()))?;
                project(g, s)
            },
            &[randn(&[2, 3, 4], 6)],
            GRAD_TOL_DENSE,
        )
        .unwrap(),
    ));
    results.push((
        "layer_norm",
        grad_check(
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-6)?;
                project(g, y)
            },
            &[randn(&[2, 3, 5], 7), randn(&[5], 8), randn(&[5], 9)],
            GRAD_TOL_DENSE,
        )
        .unwrap(),
    ));
    results.push((
        "batch_norm (batch statistics)",
        grad_check(
            |g, v| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], None, 1e-5)?;
                project(g, y)
            },
            &[randn(&[3, 2, 2, 3], 10), randn(&[2], 11), randn(&[2], 12)],
            GRAD_TOL_CONV,
        )
        .unwrap(),
    ));
    results.push((
        "conv2d stride 2 + adaptive pool",
        grad_check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], Conv2dSpec { stride: 2, padding: 1 })?;
                let y = g.adaptive_avg_pool(y, 2, 2)?;
                project(g, y)
            },
            &[randn(&[2, 2, 8, 8], 13), randn(&[3, 2, 3, 3], 14)],
            GRAD_TOL_CONV,
        )
        .unwrap(),
    ));
    let ids = ndarray::arr2(&[[0usize, 3, 3], [2, 1, 0]]);
    let weights = ndarray::arr2(&[[0.5, 0.5, 0.0], [0.2, 0.3, 0.5]]);
    results.push((
        "embedding+concat+weighted_sum+mean",
        grad_check(
            |g, v| {
                let e = g.embedding(v[0], ids.clone())?;
                let c = g.concat(&[e, v[1]])?;
                let w = g.weighted_sum(c, weights.clone())?;
                let m = g.mean_axis(c, 1)?;
                let all = g.concat(&[w, m])?;
                project(g, all)
            },
            &[randn(&[4, 3], 15), randn(&[2, 3, 2], 16)],
            GRAD_TOL_DENSE,
        )
        .unwrap(),
    ));
    for gamma in [0.0, 2.0] {
        results.push((
            if gamma == 0.0 {
                "focal loss gamma 0"
            } else {
                "focal loss gamma 2"
            },
            grad_check(
                |g, v| g.focal_loss(v[0], &[1, 0, 4], gamma),
                &[randn(&[3, 5], 17)],
                GRAD_TOL_DENSE,
            )
            .unwrap(),
        ));
    }
    let amask = ndarray::arr2(&[[true, true, false], [true, true, true]]);
    for talking in [false, true] {
        let mut store = ParamStore::new();
        init_attention(&mut store, "a", 4, 2, 2, talking, &mut rng);
        if talking {
            store.insert("a.p_logit", randn(&[2, 2], 18));
            store.insert("a.p_weight", randn(&[2, 2], 19));
        }
        store.insert("x", randn(&[2, 3, 4], 20));
        results.push((
            if talking {
                "talking-heads attention"
            } else {
                "multi-head attention"
            },
            grad_check_params(
                |g, s| {
                    let x = g.param_from(s, "x")?;
                    let out = attention_layer(g, s, "a", 2, x, (x, x), Some(&amask))?;
                    project(g, out.output)
                },
                &store,
                GRAD_TOL_DENSE,
            )
            .unwrap(),
        ));
    }
    let mut store = ParamStore::new();
    init_ffn(&mut store, "f", 3, 4, &mut rng);
    store.insert("x", randn(&[2, 2, 3], 21));
    results.push((
        "gated-GELU feed-forward",
        grad_check_params(
            |g, s| {
                let x = g.param_from(s, "x")?;
                let y = gated_gelu_layer(g, s, "f", x)?;
                project(g, y)
            },
            &store,
            GRAD_TOL_DENSE,
        )
        .unwrap(),
    ));
    let mut bstore = ParamStore::new();
    let mut buffers = ParamStore::new();
    init_preact_block(&mut bstore, &mut buffers, "b", 2, 3, 2, &mut rng);
    bstore.insert("b.conv2", randn(&[3, 3, 3, 3], 22));
    bstore.insert("x", randn(&[2, 2, 4, 4], 23));
    results.push((
        "pre-activation residual block",
        grad_check_params(
            |g, s| {
                let x = g.param_from(s, "x")?;
                let mut stats = Vec::new();
                let y = preact_block_layer(g, s, "b", x, 2, &mut BnMode::Train(&mut stats))?;
                project(g, y)
            },
            &bstore,
            GRAD_TOL_CONV,
        )
        .unwrap(),
    ));
    results.push(("end-to-end toy model", full_model_check(2, 31)));

    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> = results
        .iter()
        .filter(|(_, r)| !r.passed)
        .map(|(n, r)| format!("{n} ({:.2e} >= {:.0e})", r.max_rel_error, r.tolerance))
        .collect();
    let worst = results.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    let pass = failed.is_empty() && secs < GRAD_SUITE_BUDGET_S;
    verdict(
        1,
        pass,
        &format!(
            "{} checks, worst rel. error {worst:.2e}, {secs:.1}s{}",
            results.len(),
            if failed.is_empty() {
                String::new()
            } else {
                format!(", failed: {}", failed.join("; "))
            }
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 2

fn random_attention(rng: &mut Rng, d_model: usize, heads: usize, d_head: usize) -> AttentionParams<f64> {
    let n = Normal::new(0.0, 0.5).unwrap();
    let mut m = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| n.sample(rng));
    let w = heads * d_head;
    AttentionParams {
        heads,
        w_q: m(d_model, w),
        w_k: m(d_model, w),
        w_v: m(d_model, w),
        w_out: m(w, d_model),
        p_logit: None,
        p_weight: None,
    }
}

fn random3(rng: &mut Rng, shape: (usize, usize, usize)) -> Array3<f64> {
    let n = Normal::new(0.0, 1.0).unwrap();
    Array3::from_shape_fn(shape, |_| n.sample(rng))
}

#[test]
fn reduction_identities() {
    let mut rng = Rng::seed_from_u64(2);
    let mut p = random_attention(&mut rng, 6, 3, 2);
    p.p_logit = Some(Array2::eye(3));
    p.p_weight = Some(Array2::eye(3));
    let q = random3(&mut rng, (2, 4, 6));
    let kv = random3(&mut rng, (2, 5, 6));
    let mask = Array2::from_shape_fn((2, 5), |(b, j)| j < 3 + b);
    let th = talking_heads_attention(&q, &kv, &kv, &p, Some(&mask)).unwrap();
    let mh = multi_head_attention(&q, &kv, &kv, &p, Some(&mask)).unwrap();
    let th_gap = (&th.output - &mh.output).iter().fold(0.0f64, |a, b| a.max(b.abs()));

    let logits = randn(&[6, 13], 3).into_dimensionality().unwrap();
    let labels = [0, 4, 12, 7, 7, 1];
    let ce: f64 = labels
        .iter()
        .enumerate()
        .map(|(b, &y)| {
            let row = logits.row(b);
            let lse = row.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum::<f64>()
        / labels.len() as f64;
    let focal_gap = (focal_loss(&logits, &labels, 0.0).unwrap() - ce).abs();
    let uniform = focal_loss(&Array2::<f64>::zeros((1, 13)), &[5], 0.0).unwrap();
    let ln13_gap = (uniform - 13f64.ln()).abs();

    let mut store = ParamStore::new();
    let mut buffers = ParamStore::new();
    init_preact_block(&mut store, &mut buffers, "blk", 3, 3, 1, &mut rng);
    let x = random3(&mut rng, (6, 5, 5))
        .into_shape_with_order((2, 3, 5, 5))
        .unwrap();
    let block_exact = preact_residual_block(&x, &store, "blk", 1, None).unwrap() == x
        && preact_residual_block(&x, &store, "blk", 1, Some(&buffers)).unwrap() == x;

    let mut img = GrayImage::new(64, 48);
    for px in img.pixels_mut() {
        *px = Luma([rng.random()]);
    }
    let contrast_exact = linear_contrast(
        &img,
        &NoiseParams {
            contrast_alpha: 1.0,
            ..NoiseParams::default()
        },
    ) == img;

    let pass =
        th_gap <= REDUCTION_TOL && focal_gap <= REDUCTION_TOL && ln13_gap <= LN13_TOL && block_exact && contrast_exact;
    verdict(
        2,
        pass,
        &format!(
            "talking-heads vs multi-head {th_gap:.1e}, focal(0) vs CE {focal_gap:.1e}, uniform-13 minus ln 13 {ln13_gap:.1e}, \
             zero-residual block exact {block_exact}, contrast(1) exact {contrast_exact}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 3

#[test]
fn attention_contracts() {
    let mut rng = Rng::seed_from_u64(3);
    let mut worst_row = 0.0f64;
    let mut masked_mass = 0usize;
    for case in 0..ATTENTION_CASES {
        let heads = rng.random_range(1..=3);
        let d_model = rng.random_range(2..=6);
        let d_head = rng.random_range(1..=3);
        let (b, lq, lk) = (
            rng.random_range(1..=3),
            rng.random_range(1..=4),
            rng.random_range(1..=6),
        );
        let mut p = random_attention(&mut rng, d_model, heads, d_head);
        let talking = case % 2 == 1;
        if talking {
            let n = Normal::new(0.0, 0.7).unwrap();
            p.p_logit = Some(Array2::from_shape_fn((heads, heads), |_| n.sample(&mut rng)));
            p.p_weight = Some(Array2::from_shape_fn((heads, heads), |_| n.sample(&mut rng)));
        }
        let q = random3(&mut rng, (b, lq, d_model));
        let kv = random3(&mut rng, (b, lk, d_model));
        let mut mask = Array2::from_shape_fn((b, lk), |_| rng.random_bool(0.6));
        for r in 0..b {
            let keep = rng.random_range(0..lk);
            mask[[r, keep]] = true;
        }
        let out = if talking {
            talking_heads_attention(&q, &kv, &kv, &p, Some(&mask)).unwrap()
        } else {
            multi_head_attention(&q, &kv, &kv, &p, Some(&mask)).unwrap()
        };
        let w = &out.weights;
        for bi in 0..b {
            for h in 0..w.dim().1 {
                for i in 0..lq {
                    let mut sum = 0.0;
                    for j in 0..lk {
                        let v = w[[bi, h, i, j]];
                        sum += v;
                        if !mask[[bi, j]] && v != 0.0 {
                            masked_mass += 1;
                        }
                    }
                    worst_row = worst_row.max((sum - 1.0).abs());
                }
            }
        }
    }
    let pass = worst_row <= ROW_SUM_TOL && masked_mass == 0;
    verdict(
        3,
        pass,
        &format!("{ATTENTION_CASES} cases, worst |row sum - 1| {worst_row:.1e}, nonzero masked weights {masked_mass}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn augmentation_statistics() {
    let gray = GrayImage::from_pixel(512, 512, Luma([128]));
    let n = (512 * 512) as f64;
    let mut sp_ok = true;
    let mut sp_detail = Vec::new();
    for (p, seed) in [(0.05, 1u64), (0.3, 2), (0.9, 3)] {
        let out = salt_and_pepper(
            &gray,
            &NoiseParams {
                salt_pepper_p: p,
                seed,
                ..NoiseParams::default()
            },
        );
        let replaced = out.pixels().filter(|px| px.0[0] != 128).count() as f64 / n;
        let sigma = (p * (1.0 - p) / n).sqrt();
        sp_ok &= (replaced - p).abs() <= 3.0 * sigma;
        sp_detail.push(format!("p={p}: {replaced:.4} (3 sigma {:.4})", 3.0 * sigma));
    }
    let mut g_ok = true;
    let mut g_detail = Vec::new();
    for (s, seed) in [(5.0, 4u64), (12.75, 5)] {
        let params = NoiseParams {
            gaussian_noise_scale: (s, s),
            seed,
            ..NoiseParams::default()
        };
        let out = additive_gaussian_noise(&gray, &params);
        let vals: Vec<f64> = out.pixels().map(|px| px.0[0] as f64 - 128.0).collect();
        let mean = vals.iter().sum::<f64>() / n;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        g_ok &= ((sd - s) / s).abs() <= NOISE_SIGMA_REL_TOL;
        g_detail.push(format!("sigma={s}: {sd:.3}"));
    }
    let pool = tiny_corpus(3, 6);
    let noise = NoiseParams {
        seed: 7,
        ..NoiseParams::default()
    };
    let render = RenderSpec {
        seed: 8,
        ..RenderSpec::default()
    };
    let hook = ShuffleDropoutHook::default();
    let run = || augment_category(&pool, Category::Dedication, 4, &noise, &render, &hook).unwrap();
    let (a, b) = (run(), run());
    let replay = a == b && a.len() == 4;

    let pass = sp_ok && g_ok && replay;
    verdict(
        4,
        pass,
        &format!(
            "salt-pepper [{}], gaussian [{}], pipeline replay identical {replay}",
            sp_detail.join(", "),
            g_detail.join(", ")
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn balance_plan_on_table1() {
    let plan = make_balance_plan(&TABLE1_COUNTS, BALANCE_FLOOR).unwrap();
    let mut ok = true;
    let mut detail = Vec::new();
    for c in Category::ALL {
        let before = TABLE1_COUNTS[c.index()];
        let added = plan.additional_for(c);
        if c.is_minority() {
            ok &= before + added >= BALANCE_FLOOR as usize;
            detail.push(format!("{} {before}->{}", c.name(), before + added));
        } else {
            ok &= added == 0;
        }
    }
    ok &= Category::MINORITY.len() == 7;
    verdict(5, ok, &format!("{}; majority additions 0", detail.join(", ")));
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 6

fn labelled(labels: &[Category]) -> Vec<PageRecord> {
    let img = GrayImage::from_pixel(32, 32, Luma([255]));
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| PageRecord {
            etd_id: format!("etd{}", i / 50),
            page_number: i as u32 + 1,
            image: img.clone(),
            blocks: Vec::new(),
            full_text: String::new(),
            label: l,
            provenance: Provenance::Original,
        })
        .collect()
}

#[test]
fn split_contract() {
    let spec = SplitSpec::default();
    let fractions = [spec.train_fraction, spec.val_fraction, spec.test_fraction];
    let mut rng = Rng::seed_from_u64(6);
    let mut worst_dev = 0.0f64;
    let mut partition_ok = true;
    for trial in 0..50 {
        let n = rng.random_range(0..400);
        let labels: Vec<Category> = (0..n).map(|_| Category::ALL[rng.random_range(0..13)]).collect();
        let recs = labelled(&labels);
        let s = split_dataset(&recs, &SplitSpec { seed: trial, ..spec }).unwrap();
        let mut seen = vec![0u8; n];
        for part in [&s.train, &s.val, &s.test] {
            for &i in part {
                seen[i] += 1;
            }
        }
        partition_ok &= seen.iter().all(|&c| c == 1);
        for c in Category::ALL {
            let nc = labels.iter().filter(|&&l| l == c).count() as f64;
            for (part, f) in [&s.train, &s.val, &s.test].iter().zip(fractions) {
                let got = part.iter().filter(|&&i| labels[i] == c).count() as f64;
                worst_dev = worst_dev.max((got - f * nc).abs());
            }
        }
    }
    let mock: Vec<Category> = Category::ALL
        .iter()
        .flat_map(|&c| std::iter::repeat_n(c, TABLE1_COUNTS[c.index()]))
        .collect();
    assert_eq!(mock.len(), MOCK_MANIFEST_SIZE);
    let big = split_dataset(&labelled(&mock), &spec).unwrap();
    let test_n = big.test.len();
    let test_ok = test_n.abs_diff(MOCK_TEST_SIZE) <= MOCK_TEST_SLACK;
    let pass = partition_ok && worst_dev <= 1.0 && test_ok;
    verdict(
        6,
        pass,
        &format!(
            "50 random sets: disjoint exact union {partition_ok}, worst per-category deviation {worst_dev:.2}; \
             {MOCK_MANIFEST_SIZE}-record mock test split {test_n}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 7

#[test]
fn synthetic_learnability() {
    let start = Instant::now();
    let recs = generate_synthetic_corpus(&SyntheticCorpusSpec::default()).unwrap();
    let s = split(&recs, 0);
    let train = TrainConfig {
        max_epochs: LEARNABILITY_EPOCHS,
        ..TrainConfig::default()
    };
    let (clf, _) = train_case::<f32>(Case::B, &s.data(&[]), &ModelConfig::default(), &s.vocab, &train).unwrap();
    let eval = evaluate_case(Case::B, &clf, &s.test).unwrap();
    let violations = audit(&clf.predict(&s.test).unwrap());
    let secs = start.elapsed().as_secs_f64();
    let f1 = eval.metrics.macro_f1;
    let pass = f1 >= LEARNABILITY_F1 && secs < LEARNABILITY_BUDGET_S && violations == 0;
    verdict(
        7,
        pass,
        &format!("case b macro-F1 {f1:.4} after <= {LEARNABILITY_EPOCHS} epochs, {secs:.0}s, routing violations {violations}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 8

#[test]
fn multimodality_dominance() {
    let spec = SyntheticCorpusSpec::default();
    let recs = generate_synthetic_corpus(&spec).unwrap();
    let s = split(&recs, 0);
    let train = TrainConfig {
        max_epochs: LEARNABILITY_EPOCHS,
        ..TrainConfig::default()
    };
    let table = run_ablation::<f32>(
        Experiment::Modality,
        Case::A,
        &s.data(&[]),
        &ModelConfig::default(),
        &s.vocab,
        &train,
    )
    .unwrap();
    let macro_of = |n: &str| table.variant(n).unwrap().macro_f1;
    let (image, text, both) = (macro_of("image_only"), macro_of("text_only"), macro_of("multimodal"));
    let group = |variant: &str, cue: CueMode| {
        let m = table.variant(variant).unwrap();
        let scores: Vec<(Category, f64)> = Category::ALL
            .iter()
            .filter(|c| spec.cue_modes[c.index()] == cue)
            .map(|&c| (c, m.f1_of(c.name()).unwrap()))
            .collect();
        let mean = scores.iter().map(|(_, f)| f).sum::<f64>() / scores.len() as f64;
        (mean, scores)
    };
    let (img_blind, img_scores) = group("image_only", CueMode::TextOnly);
    let (txt_blind, txt_scores) = group("text_only", CueMode::VisualOnly);
    let fmt = |v: &[(Category, f64)]| {
        v.iter()
            .map(|(c, f)| format!("{}={f:.2}", c.name()))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let pass = both > image && both > text && img_blind <= CROSS_MODALITY_F1 && txt_blind <= CROSS_MODALITY_F1;
    verdict(
        8,
        pass,
        &format!(
            "macro-F1 multimodal {both:.3} image-only {image:.3} text-only {text:.3}; \
             image-only on text-cued mean {img_blind:.3} [{}]; text-only on image-cued mean {txt_blind:.3} [{}]",
            fmt(&img_scores),
            fmt(&txt_scores)
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 9

#[test]
fn hierarchy_benefit() {
    let mut rows = Vec::new();
    let mut pass = true;
    for seed in 0..3u64 {
        let pages: Vec<usize> = Category::ALL
            .iter()
            .map(|c| if c.is_minority() { 34 } else { 100 })
            .collect();
        let recs = generate_synthetic_corpus(&SyntheticCorpusSpec {
            category_pages: Some(pages),
            seed,
            ..SyntheticCorpusSpec::default()
        })
        .unwrap();
        let s = split(&recs, seed);
        let counts = class_counts(&s.train);
        let cap = Category::MINORITY.iter().map(|c| counts[c.index()]).max().unwrap();
        pass &= cap <= MINORITY_TRAIN_CAP;
        let train = TrainConfig {
            max_epochs: LEARNABILITY_EPOCHS,
            seed,
            ..TrainConfig::default()
        };
        let mut f1 = [0.0; 2];
        for (k, case) in [Case::A, Case::B].into_iter().enumerate() {
            let (clf, _) = train_case::<f32>(case, &s.data(&[]), &ModelConfig::default(), &s.vocab, &train).unwrap();
            let e = evaluate_case(case, &clf, &s.test).unwrap();
            pass &= e.routing_violations == 0;
            f1[k] = e.metrics.macro_f1;
        }
        pass &= f1[1] >= f1[0];
        rows.push(format!(
            "seed {seed}: a {:.3} b {:.3} (minority train <= {cap})",
            f1[0], f1[1]
        ));
    }
    verdict(9, pass, &rows.join("; "));
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 10

#[test]
fn routing_audit() {
    let recs = tiny_corpus(10, 10);
    let s = split(&recs, 10);
    let noise = NoiseParams {
        seed: 1,
        ..NoiseParams::default()
    };
    let render = RenderSpec {
        page_size: (64, 64),
        margin: 4,
        margin_jitter: 4,
        seed: 2,
        ..RenderSpec::default()
    };
    let aug = augment_category(
        &s.train,
        Category::Dedication,
        4,
        &noise,
        &render,
        &ShuffleDropoutHook::default(),
    )
    .unwrap();
    let model = ModelConfig::tiny(13);
    let mut audited = 0;
    let mut violations = 0;
    for (case, seed) in [(Case::B, 1), (Case::C, 2), (Case::B, 3)] {
        let (clf, _) = train_case::<f64>(case, &s.data(&aug), &model, &s.vocab, &tiny_train(seed)).unwrap();
        for pages in [&s.test, &s.val, &s.train] {
            let preds = clf.predict(pages).unwrap();
            audited += preds.len();
            violations += audit(&preds);
        }
        if let Classifier::Hierarchical(h) = &clf {
            assert_eq!((h.level1.num_classes(), h.level2.num_classes()), (2, 12));
        }
    }
    let pass = violations == 0;
    verdict(
        10,
        pass,
        &format!("{audited} hierarchical predictions over 3 runs, violations {violations}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 11

#[test]
fn metrics_oracle() {
    let mut rng = Rng::seed_from_u64(11);
    let mut mismatches = 0;
    for _ in 0..METRIC_SETS {
        let k = rng.random_range(1..=13);
        let n = rng.random_range(0..=1000);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = truth
            .iter()
            .map(|&t| {
                if rng.random_bool(0.6) {
                    t
                } else {
                    rng.random_range(0..k)
                }
            })
            .collect();
        let names: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let r = compute_index_metrics(&truth, &pred, &name_refs).unwrap();

        let mut ok = r.total == n;
        let mut p_sum = 0.0;
        let mut r_sum = 0.0;
        let mut f_sum = 0.0;
        for c in 0..k {
            let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
            for (&t, &p) in truth.iter().zip(&pred) {
                match (t == c, p == c) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fnn += 1,
                    _ => {}
                }
            }
            let prec = if tp + fp == 0 {
                0.0
            } else {
                tp as f64 / (tp + fp) as f64
            };
            let rec = if tp + fnn == 0 {
                0.0
            } else {
                tp as f64 / (tp + fnn) as f64
            };
            let f1 = if prec + rec == 0.0 {
                0.0
            } else {
                2.0 * prec * rec / (prec + rec)
            };
            let m = &r.classes[c];
            ok &= (m.precision, m.recall, m.f1, m.support, m.predicted) == (prec, rec, f1, tp + fnn, tp + fp);
            for c2 in 0..k {
                let cell = truth.iter().zip(&pred).filter(|&(&t, &p)| t == c && p == c2).count();
                ok &= r.confusion[c][c2] == cell;
            }
            p_sum += prec;
            r_sum += rec;
            f_sum += f1;
        }
        let correct = truth.iter().zip(&pred).filter(|(t, p)| t == p).count();
        let acc = if n == 0 { 0.0 } else { correct as f64 / n as f64 };
        ok &= r.accuracy == acc;
        ok &= (r.macro_precision, r.macro_recall, r.macro_f1) == (p_sum / k as f64, r_sum / k as f64, f_sum / k as f64);
        if !ok {
            mismatches += 1;
        }
    }
    let pass = mismatches == 0;
    verdict(
        11,
        pass,
        &format!("{METRIC_SETS} random label sets, exact mismatches {mismatches}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 12

/// prepare, augment, train a/b/c, eval; returns every report file's bytes.
fn pipeline_once(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let corpus = tiny_corpus(10, 12);
    let manifest = root.join("data/manifest.jsonl");
    write_manifest(&manifest, &corpus).unwrap();
    let recs = read_manifest(&manifest).unwrap();
    let s = split(&recs, 12);

    let plan = make_balance_plan(&class_counts(&s.train), 9).unwrap();
    let noise = NoiseParams {
        seed: 3,
        ..NoiseParams::default()
    };
    let render = RenderSpec {
        page_size: (64, 64),
        margin: 4,
        margin_jitter: 4,
        seed: 4,
        ..RenderSpec::default()
    };
    let aug = etdpc::augment::augment_plan(&s.train, &plan, &noise, &render, &ShuffleDropoutHook::default()).unwrap();
    let aug_manifest = root.join("data/augmented/manifest.jsonl");
    write_manifest(&aug_manifest, &aug).unwrap();
    let aug = read_manifest(&aug_manifest).unwrap();

    let mut set = ReportSet::default();
    for case in Case::ALL {
        let (clf, _) =
            train_case::<f64>(case, &s.data(&aug), &ModelConfig::tiny(13), &s.vocab, &tiny_train(5)).unwrap();
        set.cases.push(evaluate_case(case, &clf, &s.test).unwrap());
    }
    let out = root.join("reports");
    let mut files: Vec<(String, Vec<u8>)> = emit_report(&set, &out, &Format::ALL, None)
        .unwrap()
        .into_iter()
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn determinism_replay() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline_once(a.path());
    let second = pipeline_once(b.path());
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let pass = first.len() == second.len() && differing.is_empty() && !first.is_empty();
    verdict(
        12,
        pass,
        &format!(
            "{} report files across two f64 runs, differing: {:?}",
            first.len(),
            differing
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 13

#[test]
fn data_efficiency_sweep_grid() {
    let recs = tiny_corpus(12, 13);
    let s = split(&recs, 13);
    let model = ModelConfig::tiny(13);
    let train = tiny_train(6);
    let sweep_seed = 77;
    let data = s.data(&[]);
    let result = data_efficiency_sweep::<f64>(
        &SWEEP_CATEGORIES,
        &SWEEP_FRACTIONS,
        Case::A,
        &data,
        &model,
        &s.vocab,
        &train,
        sweep_seed,
    )
    .unwrap();
    let grid_ok = result.cells.len() == SWEEP_FRACTIONS.len() * SWEEP_CATEGORIES.len()
        && result.cells.iter().all(|c| c.f1.is_some());

    let mut nested = true;
    let mut prev: Vec<usize> = Vec::new();
    for f in SWEEP_FRACTIONS {
        let cur = sweep_subset(&s.train, &SWEEP_CATEGORIES, f, sweep_seed);
        nested &= prev.iter().all(|i| cur.contains(i));
        prev = cur;
    }

    let (clf, _) = train_case::<f64>(Case::A, &data, &model, &s.vocab, &train).unwrap();
    let full = evaluate_case(Case::A, &clf, &s.test).unwrap().metrics;
    let mut equal = true;
    for c in SWEEP_CATEGORIES {
        let cell = result.cell(c, 1.0).and_then(|c| c.f1);
        equal &= cell.map(f64::to_bits) == full.f1_of(c.name()).map(f64::to_bits);
    }
    let pass = grid_ok && nested && equal;
    verdict(
        13,
        pass,
        &format!(
            "{} cells ({}x{}), nested subsets {nested}, fraction 1.0 bit-equal to full run {equal}",
            result.cells.len(),
            SWEEP_FRACTIONS.len(),
            SWEEP_CATEGORIES.len()
        ),
    );
    assert!(pass);
}
