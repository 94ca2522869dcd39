use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use claimcheck_core::corpus::{self, CorpusSplit, CorpusStats, Label, LabeledPost};
use claimcheck_core::encoding::EncoderRegistry;
use claimcheck_core::evaluation::{self, EvalReport};
use claimcheck_core::models::{self, build_model, Architecture, Classifier};
use claimcheck_core::textprep::{self, AuditReport, CleaningConfig};
use claimcheck_core::training::{self, PreparedSet};
use claimcheck_core::SCHEMA_VERSION;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::plots;

pub const STATS_FILE: &str = "stats.json";
pub const WORD_COUNT_PLOT: &str = "word_counts.svg";
pub const LABEL_PLOT: &str = "label_distribution.svg";
pub const AUDIT_FILE: &str = "audit.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";
pub const CONFUSION_CSV: &str = "confusion.csv";
pub const CONFUSION_PLOT: &str = "confusion.svg";
pub const EVAL_MANIFEST_FILE: &str = "eval_manifest.json";
pub const COMPARISON_MD: &str = "comparison.md";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const PER_CLASS_MD: &str = "per_class.md";
pub const PER_CLASS_CSV: &str = "per_class.csv";

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn pretty_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output documents serialize");
    s.push('\n');
    s
}

fn file_sha256(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Corpus as read from disk, before cleaning.
pub struct LoadedData {
    /// `None` when a single corpus file is too small to split.
    pub split: Option<CorpusSplit>,
    pub all: Vec<LabeledPost>,
    /// SHA-256 of every input file, keyed by path.
    pub sources: BTreeMap<String, String>,
}

impl LoadedData {
    pub fn require_split(self) -> CliResult<(CorpusSplit, BTreeMap<String, String>)> {
        match self.split {
            Some(split) => Ok((split, self.sources)),
            None => Err(claimcheck_core::Error::Precondition(format!(
                "corpus has {} posts; at least 5 are needed to split",
                self.all.len()
            ))
            .into()),
        }
    }
}

fn load_file(
    config: &RunConfig,
    path: &Path,
    sources: &mut BTreeMap<String, String>,
) -> CliResult<Vec<LabeledPost>> {
    let posts = corpus::load_corpus(path, config.corpus.format_for(path)?)?;
    sources.insert(path.display().to_string(), file_sha256(path)?);
    Ok(posts)
}

/// Loads the configured corpus. A single file is split with the configured
/// fractions and the run seed; three files are taken as the split.
pub fn load_data(config: &RunConfig) -> CliResult<LoadedData> {
    let c = &config.corpus;
    let mut sources = BTreeMap::new();
    if let (Some(train), Some(val), Some(test)) = (&c.train, &c.validation, &c.test) {
        let split = CorpusSplit::from_parts(
            load_file(config, train, &mut sources)?,
            load_file(config, val, &mut sources)?,
            load_file(config, test, &mut sources)?,
        )?;
        let all = split
            .parts()
            .iter()
            .flat_map(|(_, p)| p.iter().cloned())
            .collect();
        return Ok(LoadedData {
            split: Some(split),
            all,
            sources,
        });
    }
    let path = c.path.as_ref().ok_or_else(|| {
        CliError::Usage(
            "no corpus given; set corpus.path (or train/validation/test) or pass --corpus".into(),
        )
    })?;
    let all = load_file(config, path, &mut sources)?;
    let split = if all.len() >= 5 {
        Some(corpus::split_corpus(
            &all,
            c.split_fractions()?,
            config.seed,
        )?)
    } else {
        None
    };
    Ok(LoadedData {
        split,
        all,
        sources,
    })
}

fn clean_split(split: &CorpusSplit, cleaning: &CleaningConfig) -> CliResult<CorpusSplit> {
    Ok(CorpusSplit::from_parts(
        textprep::clean_corpus(&split.train, cleaning),
        textprep::clean_corpus(&split.validation, cleaning),
        textprep::clean_corpus(&split.test, cleaning),
    )?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitLabels {
    pub name: String,
    pub total: usize,
    pub real: usize,
    pub fake: usize,
}

impl SplitLabels {
    fn of(name: &str, posts: &[LabeledPost]) -> Self {
        let fake = posts.iter().filter(|p| p.label == Label::Fake).count();
        SplitLabels {
            name: name.to_string(),
            total: posts.len(),
            real: posts.len() - fake,
            fake,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WordCountSummary {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
    /// Nearest-rank quantiles of cleaned word counts over the whole corpus.
    pub quantile_98: usize,
    pub quantile_99: usize,
    /// The same over the cleaned train split, when there is one.
    pub train_quantile_98: Option<usize>,
    pub train_quantile_99: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StatsDocument {
    pub schema_version: u32,
    pub corpus: CorpusStats,
    pub splits: Vec<SplitLabels>,
    pub word_counts: WordCountSummary,
    pub audit: AuditReport,
}

/// Corpus statistics, cleaning audit, word-count quantiles and the two
/// distribution charts.
pub fn stats(config: &RunConfig) -> CliResult<StatsDocument> {
    let data = load_data(config)?;
    let cleaning = config.cleaning.build()?;
    let corpus_stats = corpus::corpus_stats(&data.all)?;
    let cleaned = textprep::clean_posts(&data.all, &cleaning);
    let counts: Vec<usize> = cleaned.iter().map(|p| p.word_count).collect();

    let mut splits = vec![SplitLabels::of("all", &data.all)];
    let (mut train_q98, mut train_q99) = (None, None);
    if let Some(split) = &data.split {
        for (name, part) in split.parts() {
            splits.push(SplitLabels::of(name, part));
        }
        let train_clean = textprep::clean_posts(&split.train, &cleaning);
        train_q98 = Some(textprep::word_count_quantile(&train_clean, 0.98)?);
        train_q99 = Some(textprep::word_count_quantile(&train_clean, 0.99)?);
    }
    let doc = StatsDocument {
        schema_version: SCHEMA_VERSION,
        corpus: corpus_stats,
        word_counts: WordCountSummary {
            min: counts.iter().copied().min().unwrap_or(0),
            max: counts.iter().copied().max().unwrap_or(0),
            mean: counts.iter().sum::<usize>() as f64 / counts.len() as f64,
            quantile_98: textprep::nearest_rank(&counts, 0.98)?,
            quantile_99: textprep::nearest_rank(&counts, 0.99)?,
            train_quantile_98: train_q98,
            train_quantile_99: train_q99,
        },
        splits,
        audit: textprep::audit_no_loss(&data.all, &cleaning),
    };

    let out = &config.output_dir;
    write_file(&out.join(STATS_FILE), pretty_json(&doc))?;
    write_file(
        &out.join(WORD_COUNT_PLOT),
        plots::word_count_histogram("Distribution of the number of words per post", &counts),
    )?;
    let groups: Vec<(String, [usize; 2])> = doc
        .splits
        .iter()
        .map(|s| (s.name.clone(), [s.real, s.fake]))
        .collect();
    write_file(
        &out.join(LABEL_PLOT),
        plots::grouped_bars(
            "Distribution of labels per split",
            "posts",
            ["real", "fake"],
            &groups,
        ),
    )?;
    Ok(doc)
}

/// Writes the cleaned split as three CSV files plus the audit report.
pub fn preprocess(config: &RunConfig) -> CliResult<AuditReport> {
    let (split, _) = load_data(config)?.require_split()?;
    let cleaning = config.cleaning.build()?;
    let cleaned = clean_split(&split, &cleaning)?;
    let out = config.output_dir.join("clean");
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    for (name, part) in cleaned.parts() {
        corpus::write_corpus(
            out.join(format!("{name}.csv")),
            part,
            corpus::CorpusFormat::Csv,
        )?;
    }
    let all: Vec<LabeledPost> = split
        .parts()
        .iter()
        .flat_map(|(_, p)| p.iter().cloned())
        .collect();
    let audit = textprep::audit_no_loss(&all, &cleaning);
    let doc = json!({ "schema_version": SCHEMA_VERSION, "audit": audit });
    write_file(&config.output_dir.join(AUDIT_FILE), pretty_json(&doc))?;
    Ok(audit)
}

#[derive(Clone, Debug, Serialize)]
pub struct SplitRecord {
    pub size: usize,
    pub checksum: String,
}

fn split_records(split: &CorpusSplit) -> BTreeMap<String, SplitRecord> {
    split
        .parts()
        .iter()
        .map(|(name, part)| {
            (
                name.to_string(),
                SplitRecord {
                    size: part.len(),
                    checksum: corpus::posts_checksum(part),
                },
            )
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainManifest {
    pub schema_version: u32,
    pub command: &'static str,
    pub tool_version: &'static str,
    pub timestamp: String,
    pub config_hash: String,
    pub model_spec_hash: String,
    pub seed: u64,
    pub variant: String,
    pub sources: BTreeMap<String, String>,
    /// Cleaned splits as trained on.
    pub splits: BTreeMap<String, SplitRecord>,
    pub best_epoch: usize,
    pub epoch_wall_time_secs: Vec<f64>,
    pub wall_time_secs: f64,
}

pub struct TrainOutcome {
    pub model: Classifier,
    pub history: training::TrainHistory,
    pub manifest: TrainManifest,
}

/// Trains the configured variant and writes the checkpoint, history,
/// resolved config and manifest under the output directory.
pub fn train(config: &RunConfig, registry: &EncoderRegistry) -> CliResult<TrainOutcome> {
    let started = Instant::now();
    let spec = config.model_spec()?;
    let (split, sources) = load_data(config)?.require_split()?;
    let cleaning = config.cleaning.build()?;
    let mut split = clean_split(&split, &cleaning)?;
    if config.corpus.hparam_subset {
        split = training::hparam_subset(
            &split,
            config.train.hparam_train_fraction,
            config.train.hparam_validation_fraction,
            config.seed,
        )?;
    }
    let model = build_model(spec.clone(), config.seed, registry)?;
    let test_before = corpus::posts_checksum(&split.test);
    let (model, history) = training::train(model, &split, &config.train)?;
    if corpus::posts_checksum(&split.test) != test_before {
        return Err(
            claimcheck_core::Error::Data("test split changed during training".into()).into(),
        );
    }

    let out = &config.output_dir;
    model.save_checkpoint(out.join(CHECKPOINT_DIR))?;
    write_file(&out.join(HISTORY_FILE), history.to_jsonl())?;
    write_file(&out.join(RUN_CONFIG_FILE), pretty_json(config))?;
    let manifest = TrainManifest {
        schema_version: SCHEMA_VERSION,
        command: "train",
        tool_version: env!("CARGO_PKG_VERSION"),
        timestamp: chrono::Utc::now().to_rfc3339(),
        config_hash: config.hash(),
        model_spec_hash: spec.hash(),
        seed: config.seed,
        variant: spec.name.clone(),
        sources,
        splits: split_records(&split),
        best_epoch: history.best_epoch,
        epoch_wall_time_secs: history.epochs.iter().map(|e| e.wall_time_secs).collect(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    write_file(&out.join(MANIFEST_FILE), pretty_json(&manifest))?;
    Ok(TrainOutcome {
        model,
        history,
        manifest,
    })
}

/// Scores a checkpoint on the test split (or on `test_path`) and writes the
/// report, the confusion matrix as CSV and as a heatmap.
pub fn eval(
    config: &RunConfig,
    registry: &EncoderRegistry,
    checkpoint: Option<&Path>,
    test_path: Option<&Path>,
) -> CliResult<EvalReport> {
    let started = Instant::now();
    let checkpoint: PathBuf = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.output_dir.join(CHECKPOINT_DIR));
    let model = Classifier::load_checkpoint(&checkpoint, registry)?;
    let cleaning = config.cleaning.build()?;
    let mut sources = BTreeMap::new();
    let raw_test = match test_path {
        Some(p) => load_file(config, p, &mut sources)?,
        None => {
            let (split, s) = load_data(config)?.require_split()?;
            sources = s;
            split.test
        }
    };
    if raw_test.is_empty() {
        return Err(claimcheck_core::Error::Precondition("test corpus is empty".into()).into());
    }
    let test = textprep::clean_corpus(&raw_test, &cleaning);
    let set = PreparedSet::new(&model, &test)?;
    let probs = training::predict_probs(&model, &set, config.train.batch_size)?;
    let predicted = models::labels_from_probs(&probs, config.eval.threshold)?;
    let cm = evaluation::confusion(&set.labels, &predicted)?;
    let name = &model.spec().name;
    let display =
        Architecture::parse(name).map_or_else(|_| name.clone(), |m| m.display_name().to_string());
    let report = EvalReport::new(
        display.clone(),
        name.clone(),
        cm,
        config.eval.threshold,
        config.hash(),
    )?;

    let out = &config.output_dir;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    report.write(out.join(REPORT_FILE))?;
    write_file(&out.join(CONFUSION_CSV), cm.to_csv())?;
    write_file(
        &out.join(CONFUSION_PLOT),
        plots::confusion_heatmap(
            &format!("Confusion matrix of {display}"),
            ["real", "fake"],
            cm.counts,
        ),
    )?;
    let manifest = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "eval",
        "tool_version": env!("CARGO_PKG_VERSION"),
        "timestamp": chrono::Utc::now().to_rfc3339(),
        "config_hash": config.hash(),
        "model_spec_hash": model.spec().hash(),
        "checkpoint": checkpoint.display().to_string(),
        "sources": sources,
        "test": { "size": raw_test.len(), "checksum": corpus::posts_checksum(&raw_test) },
        "wall_time_secs": started.elapsed().as_secs_f64(),
    });
    write_file(&out.join(EVAL_MANIFEST_FILE), pretty_json(&manifest))?;
    Ok(report)
}

/// Builds the comparison and per-class tables from report files.
pub fn report(
    paths: &[PathBuf],
    out: &Path,
    with_references: bool,
) -> CliResult<evaluation::ComparisonTable> {
    if paths.is_empty() {
        return Err(CliError::Usage(
            "report needs at least one report file".into(),
        ));
    }
    let reports = paths
        .iter()
        .map(EvalReport::read)
        .collect::<claimcheck_core::Result<Vec<_>>>()?;
    let references = if with_references {
        evaluation::reference_rows()
    } else {
        Vec::new()
    };
    let table = evaluation::comparison_table(&reports, &references)?;
    write_file(&out.join(COMPARISON_MD), table.to_markdown())?;
    write_file(&out.join(COMPARISON_CSV), table.to_csv()?)?;
    write_file(
        &out.join(PER_CLASS_MD),
        evaluation::per_class_markdown(&reports),
    )?;
    write_file(
        &out.join(PER_CLASS_CSV),
        evaluation::per_class_csv(&reports)?,
    )?;
    Ok(table)
}

pub(crate) fn print_line(stdout: &mut dyn Write, line: &str) -> CliResult<()> {
    writeln!(stdout, "{line}").map_err(|e| CliError::io("<stdout>", e))
}
