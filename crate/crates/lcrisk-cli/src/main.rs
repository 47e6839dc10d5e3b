//! `lcrisk`: operate the Long-COVID risk pipeline from the command line.
//!
//! Subcommands cover the whole flow: `synth` emits a synthetic cohort with a
//! planted signal, `preprocess` encodes raw event files against pre-trained
//! embeddings, `train`/`crossval` run the reference optimization recipe,
//! `evaluate` produces ROC/AUC and the Youden operating point, `attribute`
//! scores each diagnosis of correctly predicted positives with GradCAM, and
//! `report` aggregates the attributions into per-code time-separation
//! distributions.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
//! failure. Every successful run writes a `*.run.json` manifest capturing the
//! resolved configuration, seeds, and input digests needed to replay it.

mod manifest;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use lcrisk::attribution::{
    attribute_correct_positives, emit_heatmap, read_attributions_jsonl, sanitize_code, summarize,
    write_attributions_jsonl, write_histogram_csv, write_summary_csv,
};
use lcrisk::metrics::{accuracy_at, roc_auc, roc_svg, write_roc_csv, youden_threshold, Confusion};
use lcrisk::nn::{Architecture, Mode, Model, ModelError, ModelSpec};
use lcrisk::preprocess::{
    encode_cohort, ingest_events, load_embeddings, read_code_set, EncodedCohort, Hierarchy,
    PipelineConfig, PreprocessError,
};
use lcrisk::synth::{generate, SynthConfig, SynthError};
use lcrisk::train::{
    cross_validate, fit, score_patients, split, write_epoch_log, TrainConfig, TrainError,
    REFERENCE_NOTE,
};
use manifest::ManifestBuilder;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

fn model_err(e: ModelError) -> CliError {
    match e {
        ModelError::Usage(_) | ModelError::WrongArchitecture { .. } | ModelError::EmptySequence => {
            CliError::Usage(e.to_string())
        }
        _ => CliError::Data(e.to_string()),
    }
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient { .. } => {
            CliError::Numeric(e.to_string())
        }
        TrainError::Config(_) => CliError::Usage(e.to_string()),
        TrainError::Model(m) => model_err(m),
        other => CliError::Data(other.to_string()),
    }
}

fn pre_err(e: PreprocessError) -> CliError {
    CliError::Data(e.to_string())
}

fn synth_err(e: SynthError) -> CliError {
    match e {
        SynthError::Config(_) => CliError::Usage(e.to_string()),
        other => CliError::Data(other.to_string()),
    }
}

fn io_err(context: &str, e: std::io::Error) -> CliError {
    CliError::Data(format!("{context}: {e}"))
}

fn parse_arch(s: &str) -> Result<Architecture, String> {
    s.parse()
}

#[derive(Parser)]
#[command(
    name = "lcrisk",
    version,
    about = "Long-COVID risk modeling over diagnosis-code histories"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with a planted risk signal
    Synth {
        /// JSON config; defaults are used when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the cohort files
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode raw event files into a binary cohort
    Preprocess {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        hierarchy: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        /// Newline-separated post-rollup codes that define the COVID index event
        #[arg(long)]
        covid_codes: PathBuf,
        /// Newline-separated codes stripped to avoid label leakage
        #[arg(long)]
        leak_codes: PathBuf,
        /// Days of post-index history retained
        #[arg(long, default_value_t = 45)]
        window_days: i64,
        /// Tokens per patient (K)
        #[arg(long, default_value_t = 1000)]
        max_len: usize,
        /// Expected embedding width
        #[arg(long, default_value_t = 200)]
        embed_dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model on an encoded cohort
    Train {
        #[arg(long)]
        cohort: PathBuf,
        /// One of: uni-lstm, bi-lstm, bi-lstm-attn, bi-lstm-cnn
        #[arg(long, value_parser = parse_arch)]
        arch: Architecture,
        /// Training config JSON; reference defaults when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Epoch log CSV
        #[arg(long)]
        log: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Stratified k-fold cross-validation
    Crossval {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long, value_parser = parse_arch)]
        arch: Architecture,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Metrics JSON (per-fold AUC, mean, std, Youden threshold, accuracy)
        #[arg(long)]
        out: PathBuf,
        /// Run folds on separate threads (outputs are identical either way)
        #[arg(long)]
        parallel: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score a cohort with a trained model
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        /// ROC curve CSV
        #[arg(long)]
        roc: PathBuf,
        /// ROC curve SVG
        #[arg(long)]
        roc_svg: PathBuf,
        /// Metrics JSON (AUC, Youden threshold, accuracy)
        #[arg(long)]
        metrics: PathBuf,
    },
    /// GradCAM attribution for correctly predicted positives
    Attribute {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        /// Metrics JSON holding the classification threshold (youden_threshold)
        #[arg(long)]
        threshold_from: PathBuf,
        /// JSON-lines output, one object per patient
        #[arg(long)]
        out: PathBuf,
        /// Directory for per-patient heatmap SVGs
        #[arg(long)]
        heatmap_dir: Option<PathBuf>,
    },
    /// Aggregate attributions into per-code time-separation distributions
    Report {
        #[arg(long)]
        attributions: PathBuf,
        /// Number of top codes to keep
        #[arg(long, default_value_t = 9)]
        top: usize,
        /// Summary CSV
        #[arg(long)]
        out: PathBuf,
        /// Directory for per-code separation histograms
        #[arg(long)]
        hist_dir: Option<PathBuf>,
    },
}

/// Flag overrides applied on top of the (optional) config file.
#[derive(Args, Clone)]
struct Overrides {
    /// Training seed (shuffling, splits, folds)
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Model initialization seed
    #[arg(long)]
    model_seed: Option<u64>,
    /// LSTM hidden size
    #[arg(long)]
    hidden: Option<usize>,
    /// LSTM layer count
    #[arg(long)]
    layers: Option<usize>,
    /// Convolution channels (CNN variant)
    #[arg(long)]
    conv_channels: Option<usize>,
    /// Attention width (attention variant)
    #[arg(long)]
    attn_width: Option<usize>,
}

impl Overrides {
    fn train_config(&self, base: Option<&Path>) -> Result<TrainConfig, CliError> {
        let mut config = match base {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| io_err(&format!("read {}", path.display()), e))?;
                TrainConfig::from_json(&text).map_err(train_err)?
            }
            None => TrainConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(max_epochs) = self.max_epochs {
            config.max_epochs = max_epochs;
        }
        if let Some(batch_size) = self.batch_size {
            config.batch_size = batch_size;
        }
        config.validate().map_err(train_err)?;
        Ok(config)
    }

    fn model_spec(&self, arch: Architecture, cohort: &EncodedCohort) -> ModelSpec {
        let mut spec = ModelSpec::new(
            arch,
            cohort.embedding.dim(),
            cohort.max_len,
            self.model_seed.unwrap_or(7),
        );
        if let Some(hidden) = self.hidden {
            spec.hidden = hidden;
            spec.attn_width = hidden;
        }
        if let Some(layers) = self.layers {
            spec.layers = layers;
        }
        if let Some(channels) = self.conv_channels {
            spec.conv_channels = channels;
        }
        if let Some(width) = self.attn_width {
            spec.attn_width = width;
        }
        spec
    }
}

#[derive(Serialize)]
struct EvalReport {
    n_patients: usize,
    auc: f64,
    youden_threshold: f64,
    youden_j: f64,
    accuracy: f64,
    confusion: Confusion,
    note: String,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprint!("{e}");
            std::process::exit(1);
        }
    };
    if let Err(e) = run(cli.command) {
        eprintln!("error: {}", e.message());
        std::process::exit(e.exit_code());
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth { config, out } => cmd_synth(config.as_deref(), &out),
        Command::Preprocess {
            events,
            labels,
            hierarchy,
            embeddings,
            covid_codes,
            leak_codes,
            window_days,
            max_len,
            embed_dim,
            out,
        } => cmd_preprocess(
            &events,
            &labels,
            &hierarchy,
            &embeddings,
            &covid_codes,
            &leak_codes,
            window_days,
            max_len,
            embed_dim,
            &out,
        ),
        Command::Train { cohort, arch, config, out, log, overrides } => {
            cmd_train(&cohort, arch, config.as_deref(), &out, &log, &overrides)
        }
        Command::Crossval { cohort, arch, config, out, parallel, overrides } => {
            cmd_crossval(&cohort, arch, config.as_deref(), &out, parallel, &overrides)
        }
        Command::Evaluate { model, cohort, roc, roc_svg, metrics } => {
            cmd_evaluate(&model, &cohort, &roc, &roc_svg, &metrics)
        }
        Command::Attribute { model, cohort, threshold_from, out, heatmap_dir } => {
            cmd_attribute(&model, &cohort, &threshold_from, &out, heatmap_dir.as_deref())
        }
        Command::Report { attributions, top, out, hist_dir } => {
            cmd_report(&attributions, top, &out, hist_dir.as_deref())
        }
    }
}

fn cmd_synth(config_path: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let config = match config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| io_err(&format!("read {}", path.display()), e))?;
            SynthConfig::from_json(&text).map_err(synth_err)?
        }
        None => SynthConfig::default(),
    };
    let mut manifest = ManifestBuilder::new(
        "synth",
        serde_json::to_value(&config).expect("config serializes"),
        Some(config.seed),
    );
    if let Some(path) = config_path {
        manifest.input(path)?;
    }
    let output = generate(&config, out).map_err(synth_err)?;
    for path in [
        &output.events,
        &output.labels,
        &output.hierarchy,
        &output.embeddings,
        &output.covid_codes,
        &output.leak_codes,
        &output.manifest_path,
    ] {
        manifest.output(path);
    }
    manifest.write(out)?;
    eprintln!(
        "synth: {} patients ({} positive), vocab {}, Bayes AUC {:.4} -> {}",
        config.n_patients,
        output.manifest.patients.iter().filter(|p| p.label == 1).count(),
        config.vocab_size,
        output.manifest.bayes_auc,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_preprocess(
    events: &Path,
    labels: &Path,
    hierarchy_path: &Path,
    embeddings: &Path,
    covid_codes_path: &Path,
    leak_codes_path: &Path,
    window_days: i64,
    max_len: usize,
    embed_dim: usize,
    out: &Path,
) -> Result<(), CliError> {
    if max_len == 0 || window_days < 0 {
        return Err(CliError::Usage("max_len must be positive and window_days non-negative".into()));
    }
    let config = PipelineConfig { window_days, max_len };
    let mut manifest = ManifestBuilder::new(
        "preprocess",
        serde_json::json!({
            "window_days": window_days,
            "max_len": max_len,
            "embed_dim": embed_dim,
        }),
        None,
    );
    for input in [events, labels, hierarchy_path, embeddings, covid_codes_path, leak_codes_path] {
        manifest.input(input)?;
    }

    let records = ingest_events(events, labels).map_err(pre_err)?;
    let hierarchy = Hierarchy::load(hierarchy_path).map_err(pre_err)?;
    let (vocab, table) = load_embeddings(embeddings, embed_dim).map_err(pre_err)?;
    let covid_codes: HashSet<String> = read_code_set(covid_codes_path).map_err(pre_err)?;
    let leak_codes: HashSet<String> = read_code_set(leak_codes_path).map_err(pre_err)?;
    if covid_codes.is_empty() {
        return Err(CliError::Data(format!(
            "{}: COVID code set is empty; every patient would be excluded",
            covid_codes_path.display()
        )));
    }
    let total = records.len();
    let (cohort, exclusions) =
        encode_cohort(records, &hierarchy, &covid_codes, &leak_codes, &config, vocab, table)
            .map_err(pre_err)?;
    cohort.save(out).map_err(pre_err)?;
    manifest.output(out);
    manifest.write(out)?;
    eprintln!(
        "preprocess: encoded {} of {} patients (K={}, vocab {}) -> {}",
        cohort.patients.len(),
        total,
        max_len,
        cohort.vocab.len(),
        out.display()
    );
    if !exclusions.is_empty() {
        eprintln!("preprocess: excluded {} patients without a COVID-set event", exclusions.len());
        for ex in exclusions.iter().take(5) {
            eprintln!("  - {}: {}", ex.patient_id, ex.reason);
        }
        if exclusions.len() > 5 {
            eprintln!("  ... and {} more", exclusions.len() - 5);
        }
    }
    Ok(())
}

fn load_cohort(path: &Path) -> Result<EncodedCohort, CliError> {
    EncodedCohort::load(path).map_err(pre_err)
}

fn load_model_for(cohort: &EncodedCohort, path: &Path) -> Result<Model, CliError> {
    let model = Model::load(path).map_err(model_err)?;
    if model.vocab_size() != cohort.vocab.len() {
        return Err(CliError::Data(format!(
            "model vocabulary ({} ids) does not match cohort vocabulary ({} ids)",
            model.vocab_size(),
            cohort.vocab.len()
        )));
    }
    Ok(model)
}

fn cmd_train(
    cohort_path: &Path,
    arch: Architecture,
    config_path: Option<&Path>,
    out: &Path,
    log_path: &Path,
    overrides: &Overrides,
) -> Result<(), CliError> {
    let cohort = load_cohort(cohort_path)?;
    let config = overrides.train_config(config_path)?;
    let spec = overrides.model_spec(arch, &cohort);

    let mut manifest = ManifestBuilder::new(
        "train",
        serde_json::json!({
            "train": config,
            "model": spec,
        }),
        Some(config.seed),
    );
    manifest.input(cohort_path)?;
    if let Some(path) = config_path {
        manifest.input(path)?;
    }

    let parts = split(&cohort.labels(), config.split, config.seed).map_err(train_err)?;
    let model =
        Model::new(spec, cohort.embedding.weights().clone()).map_err(model_err)?;
    let result = fit(model, &cohort, &parts, &config).map_err(train_err)?;
    result.model.save(out).map_err(model_err)?;
    write_epoch_log(&result.log, log_path).map_err(|e| io_err("write epoch log", e))?;
    manifest.output(out);
    manifest.output(log_path);
    manifest.write(out)?;
    eprintln!(
        "train: {} epochs, best validation loss {:.6} at epoch {} -> {}",
        result.log.len(),
        result.best_val_loss,
        result.best_epoch,
        out.display()
    );
    Ok(())
}

fn cmd_crossval(
    cohort_path: &Path,
    arch: Architecture,
    config_path: Option<&Path>,
    out: &Path,
    parallel: bool,
    overrides: &Overrides,
) -> Result<(), CliError> {
    let cohort = load_cohort(cohort_path)?;
    let config = overrides.train_config(config_path)?;
    let spec = overrides.model_spec(arch, &cohort);

    let mut manifest = ManifestBuilder::new(
        "crossval",
        serde_json::json!({
            "train": config,
            "model": spec,
            "parallel": parallel,
        }),
        Some(config.seed),
    );
    manifest.input(cohort_path)?;
    if let Some(path) = config_path {
        manifest.input(path)?;
    }

    let result = cross_validate(&cohort, &spec, &config, parallel).map_err(train_err)?;
    let text = serde_json::to_string_pretty(&result.report)
        .map_err(|e| CliError::Data(format!("serialize metrics: {e}")))?;
    std::fs::write(out, text).map_err(|e| io_err("write metrics", e))?;
    manifest.output(out);
    manifest.write(out)?;

    println!("model: {}", spec.arch);
    for fold in &result.folds {
        println!("fold {}: AUC {:.4}", fold.fold, fold.auc);
    }
    println!(
        "mean AUC ({}-fold CV): {:.2} +/- {:.2}",
        config.folds, result.report.mean_auc, result.report.std_auc
    );
    println!(
        "best fold {}: Youden threshold {:.4}, accuracy {:.2}%",
        result.report.best_fold,
        result.report.youden_threshold,
        100.0 * result.report.accuracy_at_best_threshold
    );
    Ok(())
}

fn cmd_evaluate(
    model_path: &Path,
    cohort_path: &Path,
    roc_path: &Path,
    svg_path: &Path,
    metrics_path: &Path,
) -> Result<(), CliError> {
    let cohort = load_cohort(cohort_path)?;
    let mut model = load_model_for(&cohort, model_path)?;
    model.set_mode(Mode::Eval);

    let mut manifest = ManifestBuilder::new("evaluate", serde_json::json!({}), None);
    manifest.input(model_path)?;
    manifest.input(cohort_path)?;

    let indices: Vec<usize> = (0..cohort.patients.len()).collect();
    let scores = score_patients(&model, &cohort, &indices, 64).map_err(model_err)?;
    let labels = cohort.labels();
    let (curve, auc) = roc_auc(&scores, &labels).map_err(|e| CliError::Data(e.to_string()))?;
    let (threshold, j) = youden_threshold(&curve);
    let (accuracy, confusion) = accuracy_at(&scores, &labels, threshold);

    write_roc_csv(&curve, roc_path).map_err(|e| io_err("write ROC csv", e))?;
    let svg = roc_svg(&curve, auc, model.spec().arch.as_str());
    std::fs::write(svg_path, svg).map_err(|e| io_err("write ROC svg", e))?;
    let report = EvalReport {
        n_patients: cohort.patients.len(),
        auc,
        youden_threshold: threshold,
        youden_j: j,
        accuracy,
        confusion,
        note: REFERENCE_NOTE.to_string(),
    };
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Data(format!("serialize metrics: {e}")))?;
    std::fs::write(metrics_path, text).map_err(|e| io_err("write metrics", e))?;

    manifest.output(roc_path);
    manifest.output(svg_path);
    manifest.output(metrics_path);
    manifest.write(metrics_path)?;
    eprintln!(
        "evaluate: {} patients, AUC {:.4}, Youden threshold {:.4}, accuracy {:.2}%",
        cohort.patients.len(),
        auc,
        threshold,
        100.0 * accuracy
    );
    Ok(())
}

fn cmd_attribute(
    model_path: &Path,
    cohort_path: &Path,
    threshold_from: &Path,
    out: &Path,
    heatmap_dir: Option<&Path>,
) -> Result<(), CliError> {
    let cohort = load_cohort(cohort_path)?;
    let mut model = load_model_for(&cohort, model_path)?;
    model.set_mode(Mode::Eval);

    let metrics_text = std::fs::read_to_string(threshold_from)
        .map_err(|e| io_err(&format!("read {}", threshold_from.display()), e))?;
    let metrics: serde_json::Value = serde_json::from_str(&metrics_text)
        .map_err(|e| CliError::Data(format!("{}: {e}", threshold_from.display())))?;
    let threshold = metrics
        .get("youden_threshold")
        .and_then(|v| v.as_f64())
        .ok_or_else(|| {
            CliError::Data(format!(
                "{}: missing numeric field 'youden_threshold'",
                threshold_from.display()
            ))
        })?;

    let mut manifest = ManifestBuilder::new(
        "attribute",
        serde_json::json!({ "threshold": threshold }),
        None,
    );
    manifest.input(model_path)?;
    manifest.input(cohort_path)?;
    manifest.input(threshold_from)?;

    let indices: Vec<usize> = (0..cohort.patients.len()).collect();
    let scores = score_patients(&model, &cohort, &indices, 64).map_err(model_err)?;
    let results = attribute_correct_positives(&model, &cohort, &scores, threshold)
        .map_err(|e| match e {
            lcrisk::attribution::AttributionError::Model(m) => model_err(m),
            lcrisk::attribution::AttributionError::Usage(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        })?;
    write_attributions_jsonl(&results, out).map_err(|e| CliError::Data(e.to_string()))?;
    manifest.output(out);

    if let Some(dir) = heatmap_dir {
        std::fs::create_dir_all(dir).map_err(|e| io_err("create heatmap dir", e))?;
        let by_id: std::collections::HashMap<&str, &lcrisk::preprocess::EncodedPatient> =
            cohort.patients.iter().map(|p| (p.patient_id.as_str(), p)).collect();
        for result in &results {
            let patient = by_id[result.patient_id.as_str()];
            let path = dir.join(format!("heatmap_{}.svg", sanitize_code(&result.patient_id)));
            emit_heatmap(result, patient, &cohort.vocab, &path)
                .map_err(|e| CliError::Data(e.to_string()))?;
        }
        manifest.output(dir);
    }
    manifest.write(out)?;
    if results.is_empty() {
        eprintln!("attribute: warning: no correctly predicted positives at threshold {threshold}");
    } else {
        eprintln!(
            "attribute: {} correctly predicted positives at threshold {:.4} -> {}",
            results.len(),
            threshold,
            out.display()
        );
    }
    Ok(())
}

fn cmd_report(
    attributions: &Path,
    top: usize,
    out: &Path,
    hist_dir: Option<&Path>,
) -> Result<(), CliError> {
    let results =
        read_attributions_jsonl(attributions).map_err(|e| CliError::Data(e.to_string()))?;
    let mut manifest = ManifestBuilder::new(
        "report",
        serde_json::json!({ "top": top, "histogram_bin_days": 5 }),
        None,
    );
    manifest.input(attributions)?;

    let summary = summarize(&results);
    write_summary_csv(&summary, top, out).map_err(|e| io_err("write summary", e))?;
    manifest.output(out);
    if let Some(dir) = hist_dir {
        std::fs::create_dir_all(dir).map_err(|e| io_err("create histogram dir", e))?;
        for code in summary.top(top) {
            let path = dir.join(format!("hist_{}.csv", sanitize_code(&code.code)));
            write_histogram_csv(&code.separations, 5, &path)
                .map_err(|e| io_err("write histogram", e))?;
        }
        manifest.output(dir);
    }
    manifest.write(out)?;
    if summary.total_patients == 0 {
        eprintln!("report: warning: no attributed patients; summary is empty");
    } else {
        eprintln!(
            "report: {} patients over {} codes, top {} -> {}",
            summary.total_patients,
            summary.codes.len(),
            top.min(summary.codes.len()),
            out.display()
        );
    }
    Ok(())
}
