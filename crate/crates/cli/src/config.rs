//! Run configuration: one TOML file per run, with command-line overrides.
//!
//! ```toml
//! seed = 13
//! variant = "roberta"
//! output_dir = "runs/roberta"
//!
//! [corpus]
//! path = "data/corpus.csv"        # or train/validation/test = "..."
//! fractions = [0.6, 0.2, 0.2]
//!
//! [cleaning]
//! remove_stopwords = true
//!
//! [encoder]
//! family = "pretrained"            # or "test"
//! max_len = 56
//!
//! [train]
//! learning_rate = 2e-5
//! batch_size = 32
//! epochs = 3
//! ```
//!
//! Relative paths are resolved against the directory holding the config file.
//! The top-level `seed` drives the split, head initialization, shuffling and
//! dropout; a `seed` key under `[train]` is overwritten by it.

use std::path::{Path, PathBuf};

use claimcheck_core::corpus::{CorpusFormat, SplitFractions};
use claimcheck_core::encoding::EncoderSpec;
use claimcheck_core::models::{Architecture, ModelSpec};
use claimcheck_core::textprep::{self, CleaningConfig, CleaningStep};
use claimcheck_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// One of `bert_lstm`, `bert_dense`, `albert`, `roberta`, `hybrid`.
    pub variant: Option<String>,
    pub output_dir: PathBuf,
    pub corpus: CorpusSection,
    pub cleaning: CleaningSection,
    pub encoder: EncoderSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            variant: None,
            output_dir: PathBuf::from("runs"),
            corpus: CorpusSection::default(),
            cleaning: CleaningSection::default(),
            encoder: EncoderSection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// Single corpus file, split with `fractions` and the run seed.
    pub path: Option<PathBuf>,
    /// Pre-split files; used instead of `path` when all three are given.
    pub train: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// `csv` or `tsv`; inferred from each file extension when absent.
    pub format: Option<String>,
    pub fractions: [f64; 3],
    /// Train on the hyperparameter-search subset instead of the full split.
    pub hparam_subset: bool,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            path: None,
            train: None,
            validation: None,
            test: None,
            format: None,
            fractions: [0.6, 0.2, 0.2],
            hparam_subset: false,
        }
    }
}

impl CorpusSection {
    pub fn split_fractions(&self) -> CliResult<SplitFractions> {
        let [t, v, s] = self.fractions;
        Ok(SplitFractions::new(t, v, s)?)
    }

    pub fn format_for(&self, path: &Path) -> CliResult<CorpusFormat> {
        match self.format.as_deref() {
            None => Ok(CorpusFormat::from_path(path)),
            Some("csv") => Ok(CorpusFormat::Csv),
            Some("tsv") => Ok(CorpusFormat::Tsv),
            Some(other) => Err(CliError::Usage(format!(
                "unknown corpus format `{other}`; valid options: csv, tsv"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleaningSection {
    /// Step order; the default pipeline when absent.
    pub steps: Option<Vec<CleaningStep>>,
    pub remove_stopwords: bool,
    /// Replacement stopword list, one word per line.
    pub stopwords: Option<PathBuf>,
    /// Replacement contraction table, CSV `contraction,expansion`.
    pub contractions: Option<PathBuf>,
}

impl Default for CleaningSection {
    fn default() -> Self {
        CleaningSection {
            steps: None,
            remove_stopwords: true,
            stopwords: None,
            contractions: None,
        }
    }
}

impl CleaningSection {
    pub fn build(&self) -> CliResult<CleaningConfig> {
        let defaults = CleaningConfig::default();
        let stopwords = match &self.stopwords {
            Some(p) => textprep::load_stopwords(p)?,
            None => defaults.stopwords().clone(),
        };
        let contractions = match &self.contractions {
            Some(p) => textprep::load_contractions(p)?,
            None => defaults.contractions().clone(),
        };
        let steps = self
            .steps
            .clone()
            .unwrap_or_else(|| CleaningStep::DEFAULT_ORDER.to_vec());
        let config = CleaningConfig::new(steps, stopwords, contractions)?;
        Ok(if self.remove_stopwords {
            config
        } else {
            config.without_stopword_removal()
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderChoice {
    /// The variant's pretrained backbones, loaded through the adapter registry.
    Pretrained,
    /// Seeded test encoders of width `hidden_width`.
    Test,
}

impl EncoderChoice {
    pub fn parse(s: &str) -> CliResult<Self> {
        match s {
            "pretrained" => Ok(EncoderChoice::Pretrained),
            "test" => Ok(EncoderChoice::Test),
            other => Err(CliError::Usage(format!(
                "unknown encoder family `{other}`; valid options: pretrained, test"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub family: EncoderChoice,
    /// Model input length, special tokens included.
    pub max_len: usize,
    /// Test family only.
    pub hidden_width: usize,
    /// Test family only; the run seed when absent.
    pub seed: Option<u64>,
    /// Pretrained family only: weights locators replacing the default
    /// hub names, one per encoder.
    pub weights: Option<Vec<String>>,
    pub fine_tune: bool,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            family: EncoderChoice::Pretrained,
            max_len: 56,
            hidden_width: 32,
            seed: None,
            weights: None,
            fine_tune: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub threshold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { threshold: 0.5 }
    }
}

/// Command-line values that replace config entries.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub variant: Option<String>,
    pub output_dir: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub encoder: Option<String>,
    pub hidden_width: Option<usize>,
    pub max_len: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
}

impl RunConfig {
    /// Reads `path` (when given) and applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> CliResult<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                let mut c: RunConfig = toml::from_str(&text).map_err(|e| CliError::ConfigFile {
                    path: p.to_path_buf(),
                    message: e.to_string(),
                })?;
                c.resolve_paths(p.parent().unwrap_or(Path::new(".")));
                c
            }
            None => RunConfig::default(),
        };
        config.apply(overrides)?;
        config.train.seed = config.seed;
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for p in [
            &mut self.corpus.path,
            &mut self.corpus.train,
            &mut self.corpus.validation,
            &mut self.corpus.test,
            &mut self.cleaning.stopwords,
            &mut self.cleaning.contractions,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    fn apply(&mut self, o: &Overrides) -> CliResult<()> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(v) = &o.variant {
            self.variant = Some(v.clone());
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
        if let Some(p) = &o.corpus {
            self.corpus.path = Some(p.clone());
            self.corpus.train = None;
            self.corpus.validation = None;
            self.corpus.test = None;
        }
        if let Some(e) = &o.encoder {
            self.encoder.family = EncoderChoice::parse(e)?;
        }
        if let Some(w) = o.hidden_width {
            self.encoder.hidden_width = w;
        }
        if let Some(m) = o.max_len {
            self.encoder.max_len = m;
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        if let Some(b) = o.batch_size {
            self.train.batch_size = b;
        }
        if let Some(lr) = o.learning_rate {
            self.train.learning_rate = lr;
        }
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        if let Some(v) = &self.variant {
            Architecture::parse(v)?;
        }
        self.corpus.split_fractions()?;
        self.train.validate()?;
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(CliError::Usage(format!(
                "eval.threshold must be in (0, 1), got {}",
                self.eval.threshold
            )));
        }
        Ok(())
    }

    pub fn model(&self) -> CliResult<Architecture> {
        let name = self.variant.as_deref().ok_or_else(|| {
            CliError::Usage(
                "no model variant given; set `variant` or pass --variant \
                 (valid options: bert_lstm, bert_dense, albert, roberta, hybrid)"
                    .into(),
            )
        })?;
        Ok(Architecture::parse(name)?)
    }

    pub fn encoder_specs(&self, model: Architecture) -> CliResult<Vec<EncoderSpec>> {
        let e = &self.encoder;
        match e.family {
            EncoderChoice::Test => {
                Ok(model.test_encoders(e.hidden_width, e.seed.unwrap_or(self.seed)))
            }
            EncoderChoice::Pretrained => {
                let mut specs = model.pretrained_encoders();
                if let Some(weights) = &e.weights {
                    if weights.len() != specs.len() {
                        return Err(CliError::Usage(format!(
                            "{} needs {} weights locator(s), got {}",
                            model.key(),
                            specs.len(),
                            weights.len()
                        )));
                    }
                    for (spec, w) in specs.iter_mut().zip(weights) {
                        spec.weights_ref = Some(w.clone());
                    }
                }
                Ok(specs)
            }
        }
    }

    pub fn model_spec(&self) -> CliResult<ModelSpec> {
        let model = self.model()?;
        let mut spec =
            ModelSpec::architecture(model, self.encoder_specs(model)?, self.encoder.max_len);
        spec.fine_tune_encoders = self.encoder.fine_tune;
        spec.validate()?;
        Ok(spec)
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut copy = self.clone();
        copy.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&copy).expect("run config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
