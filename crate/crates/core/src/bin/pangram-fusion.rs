//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use pangram_fusion::acoustic::extract_directory;
use pangram_fusion::dataset::{load_manifest, split_participants, FeatureMatrix, SampleRecord, Split};
use pangram_fusion::error_analysis::{build_error_tree, heatmap_matrix, Attribute, ErrorSample, TreeOptions, DEFAULT_BINS, DEFAULT_MAX_DEPTH, DEFAULT_MIN_LEAF};
use pangram_fusion::hypertune::{SearchOptions, SearchSpace};
use pangram_fusion::io::{write_atomic, write_json_atomic, read_json};
use pangram_fusion::metrics::{confusion_and_rates, roc_export, write_roc_csv, DEFAULT_THRESHOLD};
use pangram_fusion::model::Checkpoint;
use pangram_fusion::pipeline::{crossval, predict_records, train_on_split, tune, Architecture};
use pangram_fusion::preprocess::{PlanOptions, PreprocessPlan};
use pangram_fusion::stats::{bias_report_to_csv, subgroup_bias_report};
use pangram_fusion::synth::{generate, SynthSpec};
use pangram_fusion::trainer::TrainConfig;
use pangram_fusion::{exec, Error, Exec};

const SPLIT_RATIOS: (f64, f64, f64) = (0.7, 0.15, 0.15);

#[derive(Parser)]
#[command(name = "pangram-fusion", version, about = "Speech-biomarker screening: features, fusion training, evaluation and auditing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Acoustic feature CSV from a directory of 16 kHz WAV clips.
    Extract(ExtractArgs),
    /// Fit preprocessing on the training split and write transformed features.
    Preprocess(DataArgs),
    /// Split, train and write checkpoint, history and split.
    Train(TrainArgs),
    /// Score a checkpoint and write the report, ROC curve and predictions.
    Evaluate(EvaluateArgs),
    /// Pairwise subgroup accuracy comparisons with Fisher's exact test.
    BiasTest(AuditArgs),
    /// Error tree and error heatmaps over demographics.
    ErrorTree(ErrorTreeArgs),
    /// Random hyperparameter search.
    Tune(TuneArgs),
    /// Generate a synthetic cohort.
    Synth(SynthArgs),
    /// Participant-level k-fold cross validation.
    Crossval(CrossvalArgs),
}

#[derive(Args)]
struct ExtractArgs {
    /// Directory of WAV files.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Feature set as `name=path`; repeat for several sets. Order matters for fusion: source first.
    #[arg(long = "features", value_parser = parse_feature_arg, required = true)]
    features: Vec<(String, PathBuf)>,
    /// JSON training config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed, which also seeds the participant split.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Single,
    Concat,
    Fusion,
    Shared,
}

#[derive(Args)]
struct ModelArgs {
    /// Defaults to single for one feature set and fusion for two.
    #[arg(long, value_enum)]
    arch: Option<ArchArg>,
    /// Common space size for the shared architecture.
    #[arg(long, default_value_t = 64)]
    d_shared: usize,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long = "features", value_parser = parse_feature_arg, required = true)]
    features: Vec<(String, PathBuf)>,
    /// Split JSON written by `train`; only its test participants are scored.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// predictions.csv written by `evaluate`.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ErrorTreeArgs {
    #[command(flatten)]
    audit: AuditArgs,
    #[arg(long, default_value_t = DEFAULT_MAX_DEPTH)]
    max_depth: usize,
    #[arg(long, default_value_t = DEFAULT_MIN_LEAF)]
    min_leaf: usize,
    /// Number of equal-width age bins in heatmaps.
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    /// Heatmap attribute pair `a,b`; repeatable. Defaults to age,sex and sex,ethnicity and age,ethnicity.
    #[arg(long = "heatmap", value_parser = parse_pair)]
    heatmaps: Vec<(Attribute, Attribute)>,
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Concurrent trials; 0 uses every worker.
    #[arg(long, default_value_t = 0)]
    concurrency: usize,
    /// JSON search space; defaults to the built-in table.
    #[arg(long)]
    space: Option<PathBuf>,
    /// Continue an existing trials.jsonl in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 3.0)]
    delta: f64,
    #[arg(long, default_value_t = 0.5)]
    pd_fraction: f64,
    #[arg(long, default_value_t = 0.0)]
    missing_rate: f64,
}

#[derive(Args)]
struct CrossvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 5)]
    k: usize,
}

fn parse_feature_arg(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => Err(format!("expected name=path, got {s:?}")),
    }
}

fn parse_pair(s: &str) -> Result<(Attribute, Attribute), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected a,b, got {s:?}"))?;
    let a: Attribute = a.trim().parse().map_err(|e: Error| e.to_string())?;
    let b: Attribute = b.trim().parse().map_err(|e: Error| e.to_string())?;
    Ok((a, b))
}

/// One scored sample, as written by `evaluate`.
#[derive(Debug, Serialize, Deserialize)]
struct Prediction {
    sample_id: String,
    participant_id: String,
    label: u8,
    score: f64,
    predicted: u8,
    correct: bool,
}

type Res<T> = std::result::Result<T, Error>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    exec::init_from_env();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

fn run(cmd: Command) -> Res<()> {
    match cmd {
        Command::Extract(a) => cmd_extract(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::BiasTest(a) => cmd_bias(a),
        Command::ErrorTree(a) => cmd_error_tree(a),
        Command::Tune(a) => cmd_tune(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Crossval(a) => cmd_crossval(a),
    }
}

fn out_dir(p: &Path) -> Res<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn load_features(specs: &[(String, PathBuf)]) -> Res<Vec<FeatureMatrix>> {
    let mut seen = BTreeSet::new();
    specs
        .iter()
        .map(|(name, path)| {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidInput(format!("feature set {name:?} given twice")));
            }
            FeatureMatrix::load_csv(name, path)
        })
        .collect()
}

struct Loaded {
    records: Vec<SampleRecord>,
    features: Vec<FeatureMatrix>,
    config: TrainConfig,
}

fn load_data(a: &DataArgs) -> Res<Loaded> {
    let mut config = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(Loaded {
        records: load_manifest(&a.manifest)?,
        features: load_features(&a.features)?,
        config,
    })
}

fn architecture(m: &ModelArgs, n_sets: usize) -> Architecture {
    match m.arch {
        None => Architecture::default_for(n_sets),
        Some(ArchArg::Single) => Architecture::Single,
        Some(ArchArg::Concat) => Architecture::Concat,
        Some(ArchArg::Fusion) => Architecture::Fusion,
        Some(ArchArg::Shared) => Architecture::Shared { d_shared: m.d_shared },
    }
}

fn cmd_extract(a: ExtractArgs) -> Res<()> {
    let (matrix, failures) = extract_directory(&a.input, Exec::Parallel)?;
    for (file, err) in &failures {
        eprintln!("skipped {file}: {err}");
    }
    if matrix.is_empty() {
        return Err(Error::InvalidInput(format!("no clip in {} could be processed", a.input.display())));
    }
    out_dir(&a.out)?;
    matrix.write_csv(&a.out.join("acoustic.csv"))?;
    println!("extracted {} clips ({} skipped)", matrix.len(), failures.len());
    Ok(())
}

fn cmd_preprocess(a: DataArgs) -> Res<()> {
    let d = load_data(&a)?;
    let split = split_participants(&d.records, SPLIT_RATIOS, d.config.seed)?;
    let opts = PlanOptions {
        corr_threshold: d.config.corr_threshold(),
        scaling: d.config.scaling(),
        resample: d.config.resample(),
        seed: d.config.random_state,
    };
    out_dir(&a.out)?;
    let mut plans: Vec<PreprocessPlan> = Vec::new();
    for f in &d.features {
        let train_ids: Vec<String> = d
            .records
            .iter()
            .filter(|r| split.train.contains(&r.participant_id) && f.contains(&r.sample_id))
            .map(|r| r.sample_id.clone())
            .collect();
        let plan = PreprocessPlan::fit(&f.select(&train_ids)?, &f.column_names, &f.name, &opts)?;
        plan.apply_matrix(f)?.write_csv(&a.out.join(format!("{}.csv", f.name)))?;
        println!("{}: {} -> {} columns", f.name, plan.input_dim, plan.output_dim());
        plans.push(plan);
    }
    write_json_atomic(&a.out.join("plans.json"), &plans)?;
    write_json_atomic(&a.out.join("split.json"), &split)?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Res<()> {
    let d = load_data(&a.data)?;
    let arch = architecture(&a.model, d.features.len());
    let split = split_participants(&d.records, SPLIT_RATIOS, d.config.seed)?;
    let out = train_on_split(&d.records, &d.features, arch, &split, &d.config, a.model.threshold, Exec::Parallel)?;
    let dir = &a.data.out;
    out_dir(dir)?;
    write_atomic(&dir.join("checkpoint.json"), &out.checkpoint.to_json()?)?;
    write_atomic(&dir.join("history.csv"), &out.history.to_csv()?)?;
    write_json_atomic(&dir.join("split.json"), &split)?;
    write_json_atomic(&dir.join("config.json"), &d.config)?;
    if let Some(r) = &out.test_report {
        write_json_atomic(&dir.join("test_report.json"), r)?;
        println!("test: {}", r.summary());
    }
    println!(
        "best epoch {} of {}, validation AUROC {}",
        out.history.best_epoch,
        out.history.epochs.len(),
        out.history.best_val_auroc.map_or("n/a".into(), |v| format!("{v:.4}"))
    );
    if out.prepared.skipped > 0 {
        eprintln!("{} samples skipped for missing features", out.prepared.skipped);
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Res<()> {
    let bytes = std::fs::read(&a.checkpoint).map_err(|e| Error::Io {
        path: a.checkpoint.clone(),
        source: e,
    })?;
    let ckpt = Checkpoint::from_json(&bytes)?;
    let records = load_manifest(&a.manifest)?;
    let features = load_features(&a.features)?;
    let split: Option<Split> = a.split.as_deref().map(read_json).transpose()?;
    let (recs, scores) = predict_records(&ckpt, &records, &features, split.as_ref().map(|s| &s.test), Exec::Parallel)?;
    let labels: Vec<u8> = recs.iter().map(|r| r.label.as_target()).collect();
    let report = confusion_and_rates(&scores, &labels, a.threshold)?;
    out_dir(&a.out)?;
    write_json_atomic(&a.out.join("eval_report.json"), &report)?;
    let roc = roc_export(&scores, &labels).map(|c| c.points).unwrap_or_default();
    write_roc_csv(&a.out.join("roc.csv"), &roc)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for (r, (&s, &y)) in recs.iter().zip(scores.iter().zip(&labels)) {
        let predicted = u8::from(s >= a.threshold);
        w.serialize(Prediction {
            sample_id: r.sample_id.clone(),
            participant_id: r.participant_id.clone(),
            label: y,
            score: s,
            predicted,
            correct: predicted == y,
        })?;
    }
    let buf = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
    write_atomic(&a.out.join("predictions.csv"), &buf)?;
    println!("{}", report.summary());
    Ok(())
}

/// Manifest records joined with predictions, in prediction order.
fn joined(manifest: &Path, predictions: &Path) -> Res<(Vec<SampleRecord>, Vec<bool>)> {
    let records = load_manifest(manifest)?;
    let mut rdr = csv::Reader::from_path(predictions)?;
    let mut out = Vec::new();
    let mut correct = Vec::new();
    for row in rdr.deserialize() {
        let p: Prediction = row?;
        let rec = records
            .iter()
            .find(|r| r.sample_id == p.sample_id)
            .ok_or_else(|| Error::InvalidInput(format!("prediction for unknown sample {:?}", p.sample_id)))?;
        out.push(rec.clone());
        correct.push(p.correct);
    }
    if out.is_empty() {
        return Err(Error::InvalidInput(format!("{} has no predictions", predictions.display())));
    }
    Ok((out, correct))
}

fn cmd_bias(a: AuditArgs) -> Res<()> {
    let (records, correct) = joined(&a.manifest, &a.predictions)?;
    let report = subgroup_bias_report(&records, &correct)?;
    out_dir(&a.out)?;
    write_atomic(&a.out.join("bias_report.csv"), &bias_report_to_csv(&report)?)?;
    write_json_atomic(&a.out.join("bias_report.json"), &report)?;
    let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.1}%", 100.0 * x));
    for c in &report {
        println!(
            "{:<10} {} ({}, {}) vs {} ({}, {}): p = {} {}",
            c.property,
            c.group_a,
            c.n_a,
            pct(c.accuracy_a),
            c.group_b,
            c.n_b,
            pct(c.accuracy_b),
            c.p_value.map_or("n/a".into(), |p| format!("{p:.4}")),
            match c.significant {
                Some(true) => "significant",
                Some(false) => "",
                None => "untestable",
            }
        );
    }
    Ok(())
}

fn cmd_error_tree(a: ErrorTreeArgs) -> Res<()> {
    let (records, correct) = joined(&a.audit.manifest, &a.audit.predictions)?;
    let samples = ErrorSample::from_records(&records, &correct)?;
    let tree = build_error_tree(
        &samples,
        TreeOptions {
            max_depth: a.max_depth,
            min_leaf: a.min_leaf,
        },
    )?;
    let dir = &a.audit.out;
    out_dir(dir)?;
    write_json_atomic(&dir.join("error_tree.json"), &tree)?;
    let text = tree.render();
    write_atomic(&dir.join("error_tree.txt"), text.as_bytes())?;
    let pairs = if a.heatmaps.is_empty() {
        vec![
            (Attribute::Age, Attribute::Sex),
            (Attribute::Sex, Attribute::Ethnicity),
            (Attribute::Age, Attribute::Ethnicity),
        ]
    } else {
        a.heatmaps
    };
    for (x, y) in pairs {
        heatmap_matrix(&samples, x, y, a.bins)?.write_csv(&dir.join(format!("heatmap_{}_{}.csv", x.as_str(), y.as_str())))?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_tune(a: TuneArgs) -> Res<()> {
    let d = load_data(&a.data)?;
    let arch = architecture(&a.model, d.features.len());
    let space = match &a.space {
        Some(p) => read_json(p)?,
        None => SearchSpace::default(),
    };
    let split = split_participants(&d.records, SPLIT_RATIOS, d.config.seed)?;
    let dir = &a.data.out;
    out_dir(dir)?;
    let opts = SearchOptions {
        n_trials: a.trials,
        seed: a.data.seed.unwrap_or(d.config.seed),
        concurrency: a.concurrency,
        exec: Exec::Parallel,
    };
    let ranked = tune(&d.records, &d.features, arch, &split, &space, &d.config, opts, Some(&dir.join("trials.jsonl")), a.resume)?;
    write_json_atomic(&dir.join("ranking.json"), &ranked)?;
    if let Some(best) = ranked.first().filter(|r| r.outcome.is_some()) {
        write_json_atomic(&dir.join("best_config.json"), &best.config)?;
    }
    for r in ranked.iter().take(5) {
        match (&r.outcome, &r.error) {
            (Some(o), _) => println!(
                "trial {:>3}: validation AUROC {} after {} epochs",
                r.trial,
                o.best_val_auroc.map_or("n/a".into(), |v| format!("{v:.4}")),
                o.epochs_run
            ),
            (None, e) => println!("trial {:>3}: failed ({})", r.trial, e.as_deref().unwrap_or("unknown")),
        }
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Res<()> {
    let spec = SynthSpec {
        n_participants: a.n,
        pd_fraction: a.pd_fraction,
        delta: a.delta,
        missing_rate: a.missing_rate,
        seed: a.seed,
        ..SynthSpec::default()
    };
    let cohort = generate(&spec)?;
    cohort.write(&a.out)?;
    println!("{} participants, {} samples written to {}", a.n, cohort.records.len(), a.out.display());
    Ok(())
}

fn cmd_crossval(a: CrossvalArgs) -> Res<()> {
    let d = load_data(&a.data)?;
    let arch = architecture(&a.model, d.features.len());
    let report = crossval(&d.records, &d.features, arch, a.k, d.config.seed, &d.config, a.model.threshold, Exec::Parallel)?;
    out_dir(&a.data.out)?;
    write_json_atomic(&a.data.out.join("crossval.json"), &report)?;
    for f in &report.folds {
        println!("fold {}: {}", f.fold, f.report.summary());
    }
    if let (Some(m), Some(s)) = (report.mean_auroc, report.std_auroc) {
        println!("mean AUROC {m:.4} (std {s:.4}), mean accuracy {:.4}", report.mean_accuracy);
    }
    Ok(())
}
