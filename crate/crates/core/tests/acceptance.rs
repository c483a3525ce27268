//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use chrono::{TimeZone, Utc};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sodkit::dataset::{
    generate_synthetic, load_record_image, split, DatasetManifest, ImageRecord, QualityFlag, SplitRole,
    SplitStrategy, SynthOptions,
};
use sodkit::evaluator::{evaluate_model, f1_score, macro_f1};
use sodkit::interrater::{
    create_session, fleiss_kappa, interpret_kappa, run_model_rater, AgreementLevel, ImageSource, NextBatch,
    RaterId, RatingMatrix, StudySession,
};
use sodkit::trainer::{argmax, build_model, predict, softmax, train_two_step, Backbone, TrainingConfig};
use sodkit::{ClassLabel, Error, Region, ScoringMethod};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

// ---------------------------------------------------------------------------
// mF1 closure

/// (architecture, region, [(P, R)...], published mF1)
type Row = (&'static str, &'static str, &'static [(f64, f64)], f64);

const MEGYESI_ROWS: [Row; 6] = [
    ("InceptionV3", "head", &[(0.846, 0.805), (0.835, 0.91), (0.698, 0.677), (0.882, 0.778)], 0.806),
    ("InceptionV3", "torso", &[(1.0, 1.0), (0.936, 0.83), (0.683, 0.707), (0.733, 0.892)], 0.845),
    ("InceptionV3", "limbs", &[(0.667, 0.333), (0.94, 0.94), (0.467, 0.5), (0.897, 0.929)], 0.695),
    ("Xception", "head", &[(0.932, 0.842), (0.878, 0.966), (0.887, 0.723), (0.893, 0.926)], 0.878),
    ("Xception", "torso", &[(1.0, 1.0), (0.926, 0.898), (0.754, 0.767), (0.829, 0.872)], 0.881),
    ("Xception", "limbs", &[(0.75, 0.5), (0.924, 0.978), (0.6, 0.214), (0.92, 0.967)], 0.702),
];

const GELDERMAN_ROWS: [Row; 6] = [
    (
        "InceptionV3",
        "head",
        &[(1.0, 0.8), (0.903, 0.933), (0.946, 0.907), (0.8, 0.8), (0.696, 0.8), (0.895, 0.944)],
        0.866,
    ),
    (
        "InceptionV3",
        "torso",
        &[(0.2, 0.5), (0.862, 0.862), (0.954, 0.954), (0.897, 0.833), (0.7, 0.824), (0.833, 0.714)],
        0.749,
    ),
    (
        "InceptionV3",
        "limbs",
        &[(0.75, 0.75), (0.704, 1.0), (0.907, 0.739), (0.696, 0.765), (0.512, 1.0), (1.0, 0.059)],
        0.651,
    ),
    (
        "Xception",
        "head",
        &[(1.0, 0.6), (0.882, 1.0), (0.947, 0.918), (0.806, 0.829), (0.818, 0.9), (1.0, 0.889)],
        0.872,
    ),
    (
        "Xception",
        "torso",
        &[(0.667, 1.0), (0.964, 0.931), (0.974, 0.862), (0.792, 1.0), (0.789, 0.81), (0.944, 0.81)],
        0.875,
    ),
    (
        "Xception",
        "limbs",
        &[(1.0, 1.0), (0.875, 0.947), (0.909, 0.87), (0.75, 0.824), (0.826, 0.905), (1.0, 0.071)],
        0.76,
    ),
];

fn mf1_closure() -> Outcome {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for (method, rows) in [("megyesi", &MEGYESI_ROWS), ("gelderman", &GELDERMAN_ROWS)] {
        for (arch, region, pr, published) in rows.iter() {
            let f1s: Vec<f64> = pr.iter().map(|(p, r)| f1_score(*p, *r)).collect();
            let mf1 = macro_f1(&f1s).map_err(|e| e.to_string())?;
            let dev = (mf1 - published).abs();
            worst = worst.max(dev);
            ensure!(dev <= 0.01, "{method}/{arch}/{region}: recomputed {mf1:.4}, published {published}");
        }
    }
    let xh: Vec<f64> = MEGYESI_ROWS[3].2.iter().map(|(p, r)| f1_score(*p, *r)).collect();
    let xh = macro_f1(&xh).unwrap();
    ensure!(format!("{xh:.3}") == "0.878", "Xception/head/Megyesi gave {xh:.4}");
    let elapsed = started.elapsed();
    ensure!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    Ok(format!("12 rows, max deviation {worst:.4}, {:.1} ms", elapsed.as_secs_f64() * 1e3))
}

// ---------------------------------------------------------------------------
// Landis–Koch banding

fn landis_koch() -> Outcome {
    use AgreementLevel::*;
    let reported = [(0.67, Substantial), (0.637, Substantial), (0.593, Moderate), (0.558, Moderate)];
    let bands = [
        (0.8, AlmostPerfect),
        (1.0, AlmostPerfect),
        (0.6, Substantial),
        (0.4, Moderate),
        (0.2, Fair),
        (0.0, Slight),
        (-0.1, None),
        (-1.0, None),
        (0.8 - 1e-12, Substantial),
        (0.6 - 1e-12, Moderate),
        (0.4 - 1e-12, Fair),
        (0.2 - 1e-12, Slight),
        (-1e-12, None),
    ];
    for (k, want) in reported.iter().chain(&bands) {
        let got = interpret_kappa(*k).map_err(|e| e.to_string())?;
        ensure!(got == *want, "kappa {k}: got {got}, want {want}");
    }
    ensure!(interpret_kappa(1.5).is_err() && interpret_kappa(-1.5).is_err(), "out-of-range kappa accepted");
    Ok(format!("{} reported levels, {} boundary values", reported.len(), bands.len()))
}

// ---------------------------------------------------------------------------
// Fleiss' kappa against an independent oracle

struct OracleKappa {
    kappa: f64,
    se: f64,
    p: f64,
    ci: (f64, f64),
}

/// Standard normal density integrated with adaptive Simpson.
fn normal_two_sided_p(z: f64) -> f64 {
    fn phi(x: f64) -> f64 {
        (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
    }
    fn simpson(a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (phi(a) + 4.0 * phi((a + b) / 2.0) + phi(b))
    }
    fn adaptive(a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = (a + b) / 2.0;
        let (l, r) = (simpson(a, m), simpson(m, b));
        if depth == 0 || (l + r - whole).abs() <= 15.0 * tol {
            l + r + (l + r - whole) / 15.0
        } else {
            adaptive(a, m, l, tol / 2.0, depth - 1) + adaptive(m, b, r, tol / 2.0, depth - 1)
        }
    }
    // Upper tail: integrate from |z| to a point where the density is negligible.
    let a = z.abs();
    let b = a + 40.0;
    2.0 * adaptive(a, b, simpson(a, b), 1e-15, 60)
}

/// Kappa from raw per-rater labels: observed agreement counts agreeing rater
/// pairs directly; the null variance uses the Pe/Σp³ form.
fn oracle(ratings: &[Vec<usize>], k: usize) -> OracleKappa {
    let big_n = ratings.len() as f64;
    let n = ratings[0].len();
    let nf = n as f64;
    let mut agree_pairs = 0.0;
    let mut totals = vec![0.0; k];
    for item in ratings {
        for a in 0..n {
            totals[item[a]] += 1.0;
            for b in 0..n {
                if a != b && item[a] == item[b] {
                    agree_pairs += 1.0;
                }
            }
        }
    }
    let p_bar = agree_pairs / (big_n * nf * (nf - 1.0));
    let p: Vec<f64> = totals.iter().map(|t| t / (big_n * nf)).collect();
    let pe: f64 = p.iter().map(|x| x * x).sum();
    let p3: f64 = p.iter().map(|x| x * x * x).sum();
    let kappa = (p_bar - pe) / (1.0 - pe);
    let var = 2.0 / (big_n * nf * (nf - 1.0)) * (pe + pe * pe - 2.0 * p3) / ((1.0 - pe) * (1.0 - pe));
    let se = var.sqrt();
    OracleKappa {
        kappa,
        se,
        p: normal_two_sided_p(kappa / se),
        ci: (kappa - 1.96 * se, kappa + 1.96 * se),
    }
}

fn categories(k: usize) -> Vec<ClassLabel> {
    (0..k).map(|j| ClassLabel::new(format!("c{j}"))).collect()
}

fn to_matrix(ratings: &[Vec<usize>], k: usize) -> RatingMatrix {
    let counts = ratings
        .iter()
        .map(|item| {
            let mut row = vec![0u32; k];
            for &c in item {
                row[c] += 1;
            }
            row
        })
        .collect();
    RatingMatrix::from_counts(categories(k), counts).unwrap()
}

fn kappa_oracle() -> Outcome {
    let unanimous = RatingMatrix::from_counts(categories(2), vec![vec![3, 0], vec![3, 0], vec![0, 3], vec![0, 3]]).unwrap();
    let k1 = fleiss_kappa(&unanimous).map_err(|e| e.to_string())?.kappa;
    ensure!(k1 == 1.0, "unanimous fixture gave {k1}");

    let hand = RatingMatrix::from_counts(categories(2), vec![vec![3, 0], vec![2, 1], vec![0, 3]]).unwrap();
    let k055 = fleiss_kappa(&hand).map_err(|e| e.to_string())?.kappa;
    ensure!((k055 - 0.55).abs() <= 1e-12, "hand fixture gave {k055}");

    let single = RatingMatrix::from_counts(categories(2), vec![vec![3, 0], vec![3, 0], vec![3, 0]]).unwrap();
    ensure!(
        matches!(fleiss_kappa(&single), Err(Error::DegenerateAgreement)),
        "single-category input did not raise the degenerate-agreement error"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    while checked < 40 {
        let items = rng.gen_range(4..=20);
        let raters = rng.gen_range(2..=6);
        let k = rng.gen_range(2..=6);
        let agreement = rng.gen_range(0.0..1.0);
        let ratings: Vec<Vec<usize>> = (0..items)
            .map(|_| {
                let truth = rng.gen_range(0..k);
                (0..raters)
                    .map(|_| if rng.gen_bool(agreement) { truth } else { rng.gen_range(0..k) })
                    .collect()
            })
            .collect();
        let got = match fleiss_kappa(&to_matrix(&ratings, k)) {
            Ok(r) => r,
            Err(Error::DegenerateAgreement) => continue,
            Err(e) => return Err(e.to_string()),
        };
        let want = oracle(&ratings, k);
        for (name, a, b) in [
            ("kappa", got.kappa, want.kappa),
            ("se", got.se, want.se),
            ("p", got.p_value, want.p),
            ("ci_low", got.ci_low, want.ci.0),
            ("ci_high", got.ci_high, want.ci.1),
        ] {
            let d = (a - b).abs();
            worst = worst.max(d);
            ensure!(d <= 1e-9, "matrix {checked}: {name} {a} vs oracle {b}");
        }
        checked += 1;
    }
    Ok(format!("fixtures exact; {checked} random matrices, max |diff| {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// Two-step training

fn channel_means(manifest: &DatasetManifest, r: &ImageRecord) -> [f64; 3] {
    let img = load_record_image(manifest, r).unwrap();
    let mut sum = [0.0; 3];
    for px in img.pixels() {
        for c in 0..3 {
            sum[c] += px[c] as f64;
        }
    }
    let n = (img.width() * img.height()) as f64;
    sum.map(|s| s / n)
}

/// Nearest-centroid accuracy on the test split using mean colour only.
fn nearest_centroid_accuracy(manifest: &DatasetManifest, method: ScoringMethod) -> f64 {
    let mut centroids: BTreeMap<ClassLabel, ([f64; 3], f64)> = BTreeMap::new();
    for r in manifest.records_with_role(SplitRole::Train) {
        let f = channel_means(manifest, r);
        let e = centroids.entry(r.label(method).unwrap().clone()).or_insert(([0.0; 3], 0.0));
        for c in 0..3 {
            e.0[c] += f[c];
        }
        e.1 += 1.0;
    }
    let test = manifest.records_with_role(SplitRole::Test);
    let hits = test
        .iter()
        .filter(|r| {
            let f = channel_means(manifest, r);
            let best = centroids
                .iter()
                .map(|(label, (s, n))| {
                    let d: f64 = (0..3).map(|c| (f[c] - s[c] / n).powi(2)).sum();
                    (d, label)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap()
                .1;
            best == r.label(method).unwrap()
        })
        .count();
    hits as f64 / test.len() as f64
}

fn two_step_training() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let method = ScoringMethod::Megyesi;
    let schema = method.schema();
    let synth = generate_synthetic(schema, 64, 64, 11, tmp.path(), &SynthOptions::default()).map_err(|e| e.to_string())?;
    let manifest = split(&synth, method, 0.8, SplitStrategy::StratifiedImage, 11).map_err(|e| e.to_string())?;

    let centroid_acc = nearest_centroid_accuracy(&manifest, method);
    ensure!(centroid_acc >= 0.9, "fixture not separable: nearest-centroid accuracy {centroid_acc:.3}");

    let config = TrainingConfig {
        max_epochs_per_stage: 40,
        early_stop_patience: 8,
        seed: 7,
        ..TrainingConfig::for_backbone(Backbone::TinyTest)
    };
    let started = Instant::now();
    let model = build_model(&config, schema).map_err(|e| e.to_string())?;
    let before = model.backbone_fingerprint();
    let model = train_two_step(model, &manifest).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();

    let after_stage1 = model.fingerprints.backbone_prestage2.clone().unwrap_or_default();
    ensure!(after_stage1 == before, "backbone changed during stage 1");
    ensure!(model.backbone_fingerprint() != before, "backbone unchanged after stage 2");

    let train = manifest.records_with_role(SplitRole::Train);
    let hits = train
        .iter()
        .filter(|r| {
            let img = load_record_image(&manifest, r).unwrap();
            predict(&model, &img).unwrap().predicted_label == *r.label(method).unwrap()
        })
        .count();
    let train_acc = hits as f64 / train.len() as f64;
    let test_acc = evaluate_model(&model, &manifest).map_err(|e| e.to_string())?.report.accuracy;
    ensure!(train_acc >= 0.95, "training accuracy {train_acc:.3}");
    ensure!(test_acc >= 0.9, "held-out accuracy {test_acc:.3}");
    ensure!(elapsed.as_secs() < 15 * 60, "training took {elapsed:?}");
    let epochs: Vec<usize> = model.history.stages.iter().map(|s| s.epochs_run).collect();
    Ok(format!(
        "centroid oracle {centroid_acc:.3}, train acc {train_acc:.3}, held-out acc {test_acc:.3}, \
         epochs {epochs:?}, {:.0} s",
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// softmax properties

fn softmax_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let cases = 2000;
    for case in 0..cases {
        let len = rng.gen_range(1..=32);
        let scale = if case % 4 == 0 { 1000.0 } else { 50.0 };
        let z: Vec<f64> = (0..len).map(|_| rng.gen_range(-scale..=scale)).collect();
        let p = softmax(&z).map_err(|e| e.to_string())?;
        ensure!(p.iter().all(|v| v.is_finite() && *v >= 0.0), "case {case}: non-finite output");
        let sum: f64 = p.iter().sum();
        ensure!((sum - 1.0).abs() <= 1e-9, "case {case}: sum {sum}");
        ensure!(argmax(&p) == argmax(&z), "case {case}: argmax moved");
        let c = rng.gen_range(-100.0..=100.0);
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let q = softmax(&shifted).map_err(|e| e.to_string())?;
        let d = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure!(d <= 1e-9, "case {case}: shift by {c} moved probabilities by {d}");
    }
    let extreme = softmax(&[1000.0, -1000.0, 999.0]).map_err(|e| e.to_string())?;
    ensure!(extreme.iter().all(|v| v.is_finite()), "overflow at |z| = 1000");
    Ok(format!("{cases} random vectors"))
}

// ---------------------------------------------------------------------------
// Split contract

fn split_fixture() -> DatasetManifest {
    // Uneven classes and 25 donors, 20 images each.
    let sizes = [200usize, 150, 100, 50];
    let mut labels = Vec::new();
    for (c, n) in sizes.iter().enumerate() {
        labels.extend(std::iter::repeat(c).take(*n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    use rand::seq::SliceRandom;
    labels.shuffle(&mut rng);
    let records = labels
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut l = BTreeMap::new();
            l.insert(ScoringMethod::Megyesi, ClassLabel::new(format!("M-SOD{}", c + 1)));
            ImageRecord {
                image_id: format!("rec-{i:03}"),
                donor_id: format!("donor-{:02}", i / 20),
                captured_at: Utc.with_ymd_and_hms(2022, 1, 1, 0, 0, 0).unwrap() + chrono::Duration::hours(i as i64),
                region: Region::Torso,
                uri: format!("images/rec-{i:03}.png"),
                width: 64,
                height: 64,
                quality_flag: QualityFlag::Ok,
                labels: l,
            }
        })
        .collect();
    DatasetManifest::new(records)
}

fn split_contract() -> Outcome {
    let m = split_fixture();
    ensure!(m.len() == 500, "fixture has {} records", m.len());
    let method = ScoringMethod::Megyesi;
    let mut seeds_checked = 0;
    for seed in 0..10 {
        let a = split(&m, method, 0.8, SplitStrategy::StratifiedImage, seed).map_err(|e| e.to_string())?;
        let b = split(&m, method, 0.8, SplitStrategy::StratifiedImage, seed).map_err(|e| e.to_string())?;
        ensure!(a.split == b.split, "seed {seed}: not deterministic");
        let roles = a.split.as_ref().unwrap();
        ensure!(roles.len() == 500, "seed {seed}: {} records assigned", roles.len());
        let mut per_class: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for r in &m.records {
            let e = per_class.entry(r.label(method).unwrap().to_string()).or_default();
            e.1 += 1;
            if roles[&r.image_id] == SplitRole::Train {
                e.0 += 1;
            }
        }
        for (class, (train, n)) in per_class {
            let target = 0.8 * n as f64;
            ensure!((train as f64 - target).abs() <= 1.0, "seed {seed}: class {class} has {train}/{n} in train");
        }
        let train: BTreeSet<_> = a.records_with_role(SplitRole::Train).iter().map(|r| &r.image_id).collect();
        let test: BTreeSet<_> = a.records_with_role(SplitRole::Test).iter().map(|r| &r.image_id).collect();
        ensure!(train.is_disjoint(&test), "seed {seed}: train and test overlap");
        ensure!(train.len() + test.len() == 500, "seed {seed}: records lost");

        let g = split(&m, method, 0.8, SplitStrategy::DonorGrouped, seed).map_err(|e| e.to_string())?;
        let donors = |role| -> BTreeSet<String> {
            g.records_with_role(role).iter().map(|r| r.donor_id.clone()).collect()
        };
        ensure!(
            donors(SplitRole::Train).is_disjoint(&donors(SplitRole::Test)),
            "seed {seed}: donor in both train and test"
        );
        ensure!(g.split.as_ref().unwrap().len() == 500, "seed {seed}: donor split lost records");
        seeds_checked += 1;
    }
    let a = split(&m, method, 0.8, SplitStrategy::StratifiedImage, 1).unwrap();
    let b = split(&m, method, 0.8, SplitStrategy::StratifiedImage, 2).unwrap();
    ensure!(a.split != b.split, "different seeds gave the same split");
    Ok(format!("500 records, {seeds_checked} seeds, both strategies"))
}

// ---------------------------------------------------------------------------
// Session protocol

struct GeneratedImages;

impl ImageSource for GeneratedImages {
    fn load(&self, image_id: &str) -> sodkit::Result<RgbImage> {
        let h = image_id.bytes().fold(7u32, |acc, b| acc.wrapping_mul(31).wrapping_add(b as u32));
        Ok(RgbImage::from_fn(64, 64, |x, y| {
            Rgb([(h % 251) as u8, ((h / 251) % 251) as u8 ^ (x as u8), (y as u8).wrapping_mul(3)])
        }))
    }
}

fn label_everything(s: &mut StudySession, rater: &str) -> Result<(usize, Vec<ScoringMethod>), String> {
    let mut batches = 0;
    let mut methods = Vec::new();
    while let NextBatch::Batch { method, image_ids, labeled, .. } = s.next_batch(rater).map_err(|e| e.to_string())? {
        let schema = method.schema();
        for (i, img) in image_ids.iter().enumerate().filter(|(_, img)| !labeled.contains(img)) {
            let label = schema.classes[(i + rater.len()) % schema.num_classes()].as_str().to_string();
            s.record_label(rater, img, method, &label, Utc::now()).map_err(|e| e.to_string())?;
        }
        batches += 1;
        methods.push(method);
    }
    Ok((batches, methods))
}

fn session_protocol() -> Outcome {
    let images: Vec<String> = (0..300).map(|i| format!("torso-{i:03}")).collect();
    let raters = vec![
        RaterId::human("human1"),
        RaterId::human("human2"),
        RaterId::human("human3"),
        RaterId::model("model"),
    ];
    let mut s = create_session("acceptance", &images, 50, &ScoringMethod::ALL, raters, 17).map_err(|e| e.to_string())?;

    // Out-of-batch and duplicate submissions.
    let NextBatch::Batch { method, image_ids, .. } = s.next_batch("human1").unwrap() else {
        return Err("fresh session reported done".into());
    };
    let outside = images.iter().find(|i| !image_ids.contains(i)).unwrap();
    let label = method.schema().classes[0].as_str().to_string();
    ensure!(
        matches!(s.record_label("human1", outside, method, &label, Utc::now()), Err(Error::ProtocolViolation(_))),
        "out-of-batch submission accepted"
    );
    s.record_label("human1", &image_ids[0], method, &label, Utc::now()).map_err(|e| e.to_string())?;
    ensure!(
        matches!(
            s.record_label("human1", &image_ids[0], method, &label, Utc::now()),
            Err(Error::DuplicateLabel { .. })
        ),
        "duplicate submission accepted"
    );

    for rater in ["human1", "human2", "human3"] {
        let (batches, methods) = label_everything(&mut s, rater)?;
        ensure!(batches == 12, "{rater}: {batches} batches");
        ensure!(methods.windows(2).all(|w| w[0] != w[1]), "{rater}: methods do not alternate");
    }
    ensure!(s.schedule.len() == 12, "{} batches per rater", s.schedule.len());

    for method in ScoringMethod::ALL {
        let config = TrainingConfig {
            seed: 1,
            ..TrainingConfig::for_backbone(Backbone::TinyTest)
        };
        let model = build_model(&config, method.schema()).map_err(|e| e.to_string())?;
        let added = run_model_rater(&mut s, "model", &model, &GeneratedImages, Utc::now()).map_err(|e| e.to_string())?;
        ensure!(added.len() == 300, "model rater added {} {method} labels", added.len());
        let again = run_model_rater(&mut s, "model", &model, &GeneratedImages, Utc::now()).map_err(|e| e.to_string())?;
        ensure!(again.is_empty(), "re-running the model rater changed labels");
    }
    ensure!(s.label_count() == 2400, "completed study holds {} labels", s.label_count());
    Ok("12 alternating batches per human, 2400 labels, out-of-batch and duplicate rejected".into())
}

// ---------------------------------------------------------------------------
// CLI pipeline

fn sodkit(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_sodkit"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`sodkit {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn write_scripted_labels(dir: &Path) -> Result<(), String> {
    let m = DatasetManifest::read(&dir.join("split.jsonl")).map_err(|e| e.to_string())?;
    let mut rows = vec!["rater_id,image_id,method,label".to_string()];
    for (i, r) in m.records_with_role(SplitRole::Test).iter().enumerate() {
        let truth = r.label(ScoringMethod::Megyesi).unwrap();
        let idx = ScoringMethod::Megyesi.schema().index_of(truth.as_str()).unwrap();
        for (rater, noise) in [("h2", 5), ("h3", 7)] {
            let m_idx = if i % noise == 0 { (idx + 1) % 4 } else { idx };
            let g_idx = [0, 1, 3, 5][m_idx];
            rows.push(format!("{rater},{},megyesi,M-SOD{}", r.image_id, m_idx + 1));
            rows.push(format!("{rater},{},gelderman,G-SOD{}", r.image_id, g_idx + 1));
        }
    }
    std::fs::write(dir.join("labels.csv"), rows.join("\n") + "\n").map_err(|e| e.to_string())
}

fn cli_pipeline() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    sodkit(d, &["synth", "--method", "megyesi", "--per-class", "16", "--seed", "3", "--out", "synth"])?;
    sodkit(d, &["prepare", "validate", "--manifest", "synth/manifest.jsonl"])?;
    sodkit(d, &["prepare", "filter", "--manifest", "synth/manifest.jsonl", "--out-dir", "regions"])?;
    sodkit(
        d,
        &["prepare", "split", "--manifest", "synth/manifest.jsonl", "--method", "megyesi", "--seed", "3", "--out", "split.jsonl"],
    )?;
    sodkit(
        d,
        &[
            "train", "--manifest", "split.jsonl", "--method", "megyesi", "--backbone", "tiny_test", "--epochs", "15",
            "--patience", "5", "--seed", "3", "--out", "model",
        ],
    )?;
    let table4 = sodkit(d, &["evaluate", "--model", "model", "--manifest", "split.jsonl", "--out", "eval.json"])?;
    ensure!(table4.contains("mF1") && table4.contains("M-SOD4"), "unexpected evaluation report:\n{table4}");
    let first = std::fs::read(d.join("eval.json")).map_err(|e| e.to_string())?;
    sodkit(d, &["evaluate", "--model", "model", "--manifest", "split.jsonl", "--out", "eval.json"])?;
    let second = std::fs::read(d.join("eval.json")).map_err(|e| e.to_string())?;
    ensure!(first == second, "evaluate output differs between runs");

    let data = d.join("data");
    let data = data.to_str().unwrap();
    sodkit(
        d,
        &[
            "study", "create", "--data-dir", data, "--session", "S", "--manifest", "split.jsonl", "--raters",
            "h2,h3,model:model", "--batch-size", "4", "--seed", "3",
        ],
    )?;
    write_scripted_labels(d)?;
    sodkit(d, &["study", "import-csv", "--data-dir", data, "--session", "S", "--csv", "labels.csv"])?;
    sodkit(d, &["study", "run-model", "--data-dir", data, "--session", "S", "--model", "model"])?;
    let report = sodkit(
        d,
        &["study", "agreement", "--data-dir", data, "--session", "S", "--raters", "h2,h3,model", "--method", "megyesi"],
    )?;
    ensure!(
        report.contains("kappa") && report.contains("ci_low") && report.contains("ai-human"),
        "unexpected agreement report:\n{report}"
    );
    sodkit(d, &["study", "export", "--data-dir", data, "--session", "S", "--out", "labels_out.csv"])?;
    let row = report.lines().nth(1).unwrap_or("").split_whitespace().collect::<Vec<_>>().join(" ");
    Ok(format!("all steps exit 0; agreement row: {row}"))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("mF1 closure", mf1_closure),
        ("Landis-Koch banding", landis_koch),
        ("Fleiss' kappa oracle equivalence", kappa_oracle),
        ("two-step training invariants", two_step_training),
        ("softmax properties", softmax_properties),
        ("split contract", split_contract),
        ("session protocol", session_protocol),
        ("CLI pipeline smoke", cli_pipeline),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
