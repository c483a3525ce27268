use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::Utc;
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use sodkit::dataset::{
    filter_body_parts, generate_synthetic, sample_donors, split, validate_manifest, write_atomic, DatasetManifest,
    MetadataClassifier, SplitStrategy, SynthOptions, DEFAULT_MIN_CONFIDENCE,
};
use sodkit::evaluator::evaluate_model;
use sodkit::interrater::{
    agreement_table, build_rating_matrix, compare_agreements, export_labels_csv, fleiss_kappa, AgreementRow,
    NextBatch, RaterId, RaterKind, StoredSession, DEFAULT_BATCH_SIZE,
};
use sodkit::service::{create_stored_session, serve, CreateSessionRequest, ServiceConfig, DEFAULT_PORT};
use sodkit::trainer::{build_model, train_two_step, Backbone, TrainedModel, TrainingConfig};
use sodkit::{Error, Region, Result, ScoringMethod};

/// Stage-of-decay image classification and interrater reliability.
#[derive(Debug, Parser)]
#[command(name = "sodkit", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate, sample, filter or split a dataset manifest.
    #[command(subcommand)]
    Prepare(Prepare),
    /// Generate a class-separable synthetic dataset with its manifest.
    Synth(SynthArgs),
    /// Train a classifier with the two-step schedule.
    Train(TrainArgs),
    /// Score a trained model on the test split of a manifest.
    Evaluate(EvaluateArgs),
    /// Classify individual image files.
    Predict(PredictArgs),
    /// Run an interrater study.
    #[command(subcommand)]
    Study(Study),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
enum Prepare {
    /// Check a manifest against the label schemas and split rules.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Keep every image of `donors` randomly chosen donors.
    Sample {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        donors: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Partition records into head, torso and limbs manifests using the
    /// region recorded in the manifest.
    Filter {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory receiving head.jsonl, torso.jsonl and limbs.jsonl.
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MIN_CONFIDENCE)]
        min_confidence: f64,
    },
    /// Assign records to train and test.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        method: ScoringMethod,
        /// Fraction of each class that goes to train.
        #[arg(long, default_value_t = 0.8)]
        ratio: f64,
        /// stratified_image or donor_grouped.
        #[arg(long, default_value_t = SplitStrategy::StratifiedImage)]
        strategy: SplitStrategy,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    method: ScoringMethod,
    #[arg(long)]
    per_class: usize,
    /// Side length of the square images in pixels.
    #[arg(long, default_value_t = 64)]
    image_size: u32,
    #[arg(long, default_value_t = 5)]
    donors: usize,
    /// Stamp every record with this region instead of cycling through all three.
    #[arg(long)]
    region: Option<Region>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; receives images/ and manifest.jsonl.
    #[arg(long, default_value = "synthetic")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    method: ScoringMethod,
    /// JSON training configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// inception_v3, xception or tiny_test.
    #[arg(long)]
    backbone: Option<Backbone>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_stage1: Option<f64>,
    #[arg(long)]
    lr_stage2: Option<f64>,
    /// Disable flip and rotation augmentation.
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory the trained model is written to.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Write the evaluation as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the text report to this file as well as stdout.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Row label of the text report; defaults to the backbone name.
    #[arg(long)]
    label: Option<String>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Image files to classify.
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct DataDir {
    /// Directory holding sessions/ and models/.
    #[arg(long, env = "SODKIT_DATA_DIR", default_value = "sodkit-data")]
    data_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Study {
    /// Create a study session.
    Create {
        #[command(flatten)]
        data: DataDir,
        #[arg(long)]
        session: String,
        /// Manifest the study images come from (its test split if it has one).
        #[arg(long)]
        manifest: PathBuf,
        /// Number of images to sample; all eligible images when omitted.
        #[arg(long)]
        images: Option<usize>,
        /// Comma-separated raters as id or id:kind, e.g. h1,h2,h3,model:model.
        #[arg(long, value_delimiter = ',', required = true)]
        raters: Vec<RaterId>,
        #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
        batch_size: usize,
        #[arg(long, value_delimiter = ',', default_value = "megyesi,gelderman")]
        methods: Vec<ScoringMethod>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Submit labels from a CSV (rater_id,image_id,method,label), following
    /// each rater's batch order exactly as an interactive rater would.
    ImportCsv {
        #[command(flatten)]
        data: DataDir,
        #[arg(long)]
        session: String,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Label every study image with a trained model.
    RunModel {
        #[command(flatten)]
        data: DataDir,
        #[arg(long)]
        session: String,
        /// Rater id of the model rater.
        #[arg(long, default_value = "model")]
        rater: String,
        #[arg(long)]
        model: PathBuf,
        /// Manifest resolving image ids; defaults to the session's manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Show each rater's progress.
    Status {
        #[command(flatten)]
        data: DataDir,
        #[arg(long)]
        session: String,
    },
    /// Export all labels as CSV.
    Export {
        #[command(flatten)]
        data: DataDir,
        #[arg(long)]
        session: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fleiss' kappa for a rater subset, or a human-human vs AI-human
    /// comparison with --humans/--model/--replaced.
    Agreement {
        #[command(flatten)]
        data: DataDir,
        #[arg(long)]
        session: String,
        /// Methods to report; all session methods when omitted.
        #[arg(long, value_delimiter = ',')]
        method: Vec<ScoringMethod>,
        #[arg(long, value_delimiter = ',', conflicts_with_all = ["humans", "model", "replaced"])]
        raters: Vec<String>,
        #[arg(long, value_delimiter = ',', requires_all = ["model", "replaced"])]
        humans: Vec<String>,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        replaced: Option<String>,
        /// Write the rows as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[command(flatten)]
    data: DataDir,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, env = "SODKIT_PORT", default_value_t = DEFAULT_PORT)]
    port: u16,
    /// Bearer token required on every request except /health.
    #[arg(long, env = "SODKIT_TOKEN", hide_env_values = true)]
    token: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Prepare(p) => prepare(p),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Predict(a) => predict(a),
        Command::Study(s) => study(s),
        Command::Serve(a) => {
            let config = ServiceConfig {
                host: a.host,
                port: a.port,
                data_dir: a.data.data_dir,
                token: a.token.filter(|t| !t.is_empty()),
            };
            tokio::runtime::Runtime::new()
                .map_err(|e| Error::InvalidConfig(format!("cannot start runtime: {e}")))?
                .block_on(serve(config))
        }
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn prepare(p: Prepare) -> Result<()> {
    match p {
        Prepare::Validate { manifest } => {
            let report = validate_manifest(&DatasetManifest::read(&manifest)?);
            print_json(&report)?;
            if report.is_empty() {
                Ok(())
            } else {
                Err(Error::Validation(format!("{} violation(s)", report.violations.len())))
            }
        }
        Prepare::Sample {
            manifest,
            donors,
            seed,
            out,
        } => {
            let sampled = sample_donors(&DatasetManifest::read(&manifest)?, donors, seed)?;
            sampled.write(&out)?;
            eprintln!("{} records from {} donors -> {}", sampled.len(), donors, out.display());
            Ok(())
        }
        Prepare::Filter {
            manifest,
            out_dir,
            min_confidence,
        } => {
            let regions = filter_body_parts(&DatasetManifest::read(&manifest)?, &MetadataClassifier, min_confidence)?;
            for (name, m) in [("head", &regions.head), ("torso", &regions.torso), ("limbs", &regions.limbs)] {
                m.write(&out_dir.join(format!("{name}.jsonl")))?;
            }
            print_json(&regions.summary)
        }
        Prepare::Split {
            manifest,
            method,
            ratio,
            strategy,
            seed,
            out,
        } => {
            let m = split(&DatasetManifest::read(&manifest)?, method, ratio, strategy, seed)?;
            m.write(&out)?;
            let counts = m.split.iter().flatten().fold(BTreeMap::new(), |mut acc, (_, role)| {
                *acc.entry(format!("{role:?}").to_lowercase()).or_insert(0usize) += 1;
                acc
            });
            eprintln!("split {} -> {}: {counts:?}", manifest.display(), out.display());
            Ok(())
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let options = SynthOptions {
        donors: a.donors,
        region: a.region,
    };
    let m = generate_synthetic(a.method.schema(), a.per_class, a.image_size, a.seed, &a.out, &options)?;
    eprintln!(
        "{} images ({} per class) -> {}",
        m.len(),
        a.per_class,
        a.out.join("manifest.jsonl").display()
    );
    Ok(())
}

fn training_config(a: &TrainArgs) -> Result<TrainingConfig> {
    let mut value = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<serde_json::Value>(&text)?
        }
        None => serde_json::json!({}),
    };
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::InvalidConfig("training config must be a JSON object".into()))?;
    if let Some(b) = a.backbone {
        obj.insert("backbone".into(), serde_json::to_value(b)?);
    }
    let backbone: Backbone = match obj.get("backbone") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => TrainingConfig::default().backbone,
    };
    if !obj.contains_key("input_size") || a.backbone.is_some() {
        obj.insert("input_size".into(), backbone.input_size().into());
    }
    let mut config: TrainingConfig = serde_json::from_value(value)?;
    if let Some(v) = a.epochs {
        config.max_epochs_per_stage = v;
    }
    if let Some(v) = a.patience {
        config.early_stop_patience = v;
    }
    if let Some(v) = a.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = a.lr_stage1 {
        config.lr_stage1 = v;
    }
    if let Some(v) = a.lr_stage2 {
        config.lr_stage2 = v;
    }
    if a.no_augment {
        config.augmentation = sodkit::trainer::AugmentationConfig::disabled();
    }
    if let Some(v) = a.seed {
        config.seed = v;
    }
    config.validate()?;
    Ok(config)
}

fn train(a: TrainArgs) -> Result<()> {
    let config = training_config(&a)?;
    let manifest = DatasetManifest::read(&a.manifest)?;
    let model = build_model(&config, a.method.schema())?;
    let model = train_two_step(model, &manifest)?;
    model.save(&a.out)?;
    for s in &model.history.stages {
        eprintln!(
            "stage {}: {} epoch(s), best epoch {}, val_loss {:.4} -> {:.4}",
            s.stage, s.epochs_run, s.best_epoch, s.initial_val_loss, s.best_val_loss
        );
    }
    eprintln!(
        "backbone {} -> {}",
        &model.fingerprints.pretrained_backbone[..12],
        &model.backbone_fingerprint()[..12]
    );
    eprintln!("model -> {}", a.out.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let model = TrainedModel::load(&a.model)?;
    let manifest = DatasetManifest::read(&a.manifest)?;
    let eval = evaluate_model(&model, &manifest)?;
    let label = a.label.unwrap_or_else(|| model.backbone.id().to_string());
    let table = eval.report.to_table(&label);
    print!("{table}");
    if let Some(path) = &a.table {
        write_atomic(path, table.as_bytes())?;
    }
    if let Some(path) = &a.out {
        let mut json = serde_json::to_string_pretty(&eval)?;
        json.push('\n');
        write_atomic(path, json.as_bytes())?;
    }
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let model = TrainedModel::load(&a.model)?;
    for path in &a.images {
        let p = model.predict_path(path)?;
        let line = serde_json::json!({
            "image": path,
            "predicted_label": p.predicted_label,
            "class_order": p.class_order,
            "probabilities": p.probabilities,
        });
        println!("{line}");
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct CsvLabel {
    rater_id: String,
    image_id: String,
    method: ScoringMethod,
    label: String,
}

fn read_csv_labels(path: &Path) -> Result<Vec<CsvLabel>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                line: i + 2,
                message: format!("{}: {e}", path.display()),
            })
        })
        .collect()
}

/// Replays CSV labels through the batch protocol. Stops a rater at the first
/// batch image the CSV has no label for.
fn import_csv(stored: &mut StoredSession, rows: Vec<CsvLabel>) -> Result<BTreeMap<String, usize>> {
    let mut order: Vec<String> = Vec::new();
    let mut table: HashMap<(String, String, ScoringMethod), String> = HashMap::new();
    for row in rows {
        if !order.contains(&row.rater_id) {
            order.push(row.rater_id.clone());
        }
        let key = (row.rater_id, row.image_id, row.method);
        if table.insert(key.clone(), row.label).is_some() {
            return Err(Error::DuplicateLabel {
                rater: key.0,
                image_id: key.1,
                method: key.2.id().to_string(),
            });
        }
    }
    let mut added = BTreeMap::new();
    for rater in order {
        let mut n = 0;
        'batches: loop {
            let NextBatch::Batch {
                method,
                image_ids,
                labeled,
                ..
            } = stored.session().next_batch(&rater)?
            else {
                break;
            };
            for image in image_ids.iter().filter(|i| !labeled.contains(i)) {
                let Some(label) = table.get(&(rater.clone(), image.clone(), method)) else {
                    log::warn!("rater {rater}: no {method} label for {image}; stopping");
                    break 'batches;
                };
                stored.record_label(&rater, image, method, label, Utc::now())?;
                n += 1;
            }
        }
        added.insert(rater, n);
    }
    Ok(added)
}

fn study(s: Study) -> Result<()> {
    match s {
        Study::Create {
            data,
            session,
            manifest,
            images,
            raters,
            batch_size,
            methods,
            seed,
        } => {
            let stored = create_stored_session(
                &data.data_dir,
                CreateSessionRequest {
                    session_id: session,
                    raters,
                    image_ids: None,
                    manifest: Some(manifest),
                    images,
                    batch_size,
                    methods,
                    seed,
                },
            )?;
            let sess = stored.session();
            eprintln!(
                "session {}: {} images, {} batches per rater, starting with {}",
                sess.session_id,
                sess.image_ids.len(),
                sess.schedule.len(),
                sess.starting_method
            );
            Ok(())
        }
        Study::ImportCsv { data, session, csv } => {
            let rows = read_csv_labels(&csv)?;
            let mut stored = StoredSession::open(&data.data_dir, &session)?;
            print_json(&import_csv(&mut stored, rows)?)
        }
        Study::RunModel {
            data,
            session,
            rater,
            model,
            manifest,
        } => {
            let model = TrainedModel::load(&model)?;
            let mut stored = StoredSession::open(&data.data_dir, &session)?;
            let path = manifest
                .or_else(|| stored.session().manifest.clone())
                .ok_or_else(|| Error::Validation("session has no manifest; pass --manifest".into()))?;
            let images = DatasetManifest::read(&path)?;
            let added = stored.run_model_rater(&rater, &model, &images, Utc::now())?;
            eprintln!("model rater {rater}: {added} new {} label(s)", model.method);
            Ok(())
        }
        Study::Status { data, session } => {
            let stored = StoredSession::open(&data.data_dir, &session)?;
            print_json(&sodkit::service::ApiSessionView::of(&stored)?)
        }
        Study::Export { data, session, out } => {
            let stored = StoredSession::open(&data.data_dir, &session)?;
            write_atomic(&out, export_labels_csv(stored.session())?.as_bytes())?;
            eprintln!("{} label(s) -> {}", stored.session().label_count(), out.display());
            Ok(())
        }
        Study::Agreement {
            data,
            session,
            method,
            raters,
            humans,
            model,
            replaced,
            json,
        } => {
            let stored = StoredSession::open(&data.data_dir, &session)?;
            let sess = stored.session();
            let methods = if method.is_empty() { sess.methods.clone() } else { method };
            let mut rows: Vec<AgreementRow> = Vec::new();
            for m in methods {
                match (&model, &replaced) {
                    (Some(model), Some(replaced)) => {
                        let c = compare_agreements(sess, &humans, model, replaced, m)?;
                        rows.push(c.human_human);
                        rows.push(c.ai_human);
                    }
                    _ => {
                        if raters.is_empty() {
                            return Err(Error::Validation("pass --raters or --humans/--model/--replaced".into()));
                        }
                        let result = fleiss_kappa(&build_rating_matrix(sess, &raters, m)?)?;
                        let any_model = raters
                            .iter()
                            .any(|r| sess.rater(r).map(|r| r.kind == RaterKind::Model).unwrap_or(false));
                        rows.push(AgreementRow {
                            method: m,
                            agreement: if any_model { "ai-human" } else { "human-human" }.into(),
                            raters: raters.clone(),
                            result,
                        });
                    }
                }
            }
            print!("{}", agreement_table(&rows));
            if let Some(path) = json {
                let mut text = serde_json::to_string_pretty(&rows)?;
                text.push('\n');
                write_atomic(&path, text.as_bytes())?;
            }
            Ok(())
        }
    }
}
