//! Text cleaning pipeline, loss audit and quantile-based sequence length
//! selection.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::LabeledPost;
use crate::error::{Error, Result};

const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords_en.txt");
const DEFAULT_CONTRACTIONS: &str = include_str!("../data/contractions_en.csv");

/// Matches `http(s)://...`, `www....` and bare domains ending in a known TLD,
/// optionally followed by a path.
pub const LINK_PATTERN: &str = r"(?i)(?:https?://\S+|www\.\S+|\b[a-z0-9][a-z0-9-]*(?:\.[a-z0-9-]+)*\.(?:com|org|net|gov|edu|int|mil|io|co|info|biz|ly|me|in|uk|us|ca|au|de|fr|it|es|nl|ru|cn|jp|br|za|ng|pk|bd|news|tv|gl|be|to|ai)\b(?:/\S*)?)";

/// Apostrophe-bearing words; candidates for contraction expansion.
const CONTRACTION_PATTERN: &str = r"(?i)[a-z]*(?:['\u{2019}][a-z]+)+";

// Hard cap on repeated passes; every pass either shrinks the text or expands
// an apostrophe-bearing word into apostrophe-free words, so a fixed point is
// reached long before this.
const MAX_PASSES: usize = 16;

fn link_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(LINK_PATTERN).expect("link pattern compiles"))
}

fn contraction_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(CONTRACTION_PATTERN).expect("contraction pattern compiles"))
}

/// One cleaning transformation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleaningStep {
    Lowercase,
    ExpandContractions,
    RemoveLinks,
    RemoveStopwords,
    RemoveSpecialChars,
    StripNonAscii,
    CollapseWhitespace,
}

impl CleaningStep {
    /// Default order: links go before punctuation stripping destroys them,
    /// and contractions are expanded while apostrophes are still present.
    pub const DEFAULT_ORDER: [CleaningStep; 7] = [
        CleaningStep::Lowercase,
        CleaningStep::RemoveLinks,
        CleaningStep::ExpandContractions,
        CleaningStep::RemoveSpecialChars,
        CleaningStep::StripNonAscii,
        CleaningStep::RemoveStopwords,
        CleaningStep::CollapseWhitespace,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CleaningConfig {
    steps: Vec<CleaningStep>,
    stopwords: BTreeSet<String>,
    contractions: BTreeMap<String, String>,
}

impl Default for CleaningConfig {
    fn default() -> Self {
        CleaningConfig {
            steps: CleaningStep::DEFAULT_ORDER.to_vec(),
            stopwords: parse_stopwords(DEFAULT_STOPWORDS),
            contractions: parse_contractions(DEFAULT_CONTRACTIONS)
                .expect("bundled contraction table is valid"),
        }
    }
}

impl CleaningConfig {
    pub fn new(
        steps: Vec<CleaningStep>,
        stopwords: BTreeSet<String>,
        contractions: BTreeMap<String, String>,
    ) -> Result<Self> {
        let config = CleaningConfig {
            steps,
            stopwords,
            contractions,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Config("cleaning needs at least one step".into()));
        }
        let unique: BTreeSet<_> = self.steps.iter().collect();
        if unique.len() != self.steps.len() {
            return Err(Error::Config(format!(
                "duplicate cleaning step in {:?}",
                self.steps
            )));
        }
        for (key, expansion) in &self.contractions {
            if key.to_lowercase() != *key {
                return Err(Error::Config(format!(
                    "contraction key `{key}` is not lowercase"
                )));
            }
            if expansion.contains(['\'', '\u{2019}']) {
                return Err(Error::Config(format!(
                    "expansion of `{key}` must not contain an apostrophe"
                )));
            }
        }
        Ok(())
    }

    /// Same resources with a different step list.
    pub fn with_steps(&self, steps: Vec<CleaningStep>) -> Result<Self> {
        CleaningConfig::new(steps, self.stopwords.clone(), self.contractions.clone())
    }

    /// Default pipeline without the stopword step, for subword encoders that
    /// expect natural text.
    pub fn without_stopword_removal(&self) -> Self {
        CleaningConfig {
            steps: self
                .steps
                .iter()
                .copied()
                .filter(|s| *s != CleaningStep::RemoveStopwords)
                .collect(),
            ..self.clone()
        }
    }

    pub fn steps(&self) -> &[CleaningStep] {
        &self.steps
    }

    pub fn stopwords(&self) -> &BTreeSet<String> {
        &self.stopwords
    }

    pub fn contractions(&self) -> &BTreeMap<String, String> {
        &self.contractions
    }

    pub fn has_step(&self, step: CleaningStep) -> bool {
        self.steps.contains(&step)
    }
}

/// One word per line; blank lines and `#` comments are ignored.
pub fn parse_stopwords(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

/// CSV with a `contraction,expansion` header.
pub fn parse_contractions(text: &str) -> Result<BTreeMap<String, String>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut map = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let (Some(key), Some(value)) = (record.get(0), record.get(1)) else {
            return Err(Error::Data(format!("malformed contraction row {record:?}")));
        };
        map.insert(key.trim().to_lowercase(), value.trim().to_string());
    }
    Ok(map)
}

pub fn load_stopwords(path: impl AsRef<Path>) -> Result<BTreeSet<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_stopwords(&text))
}

pub fn load_contractions(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_contractions(&text)
}

/// Lowercases ASCII letters, and non-ASCII characters whose lowercase form is
/// itself non-ASCII. Characters such as the Kelvin sign, which lowercase to
/// an ASCII letter, are left alone so that lowercasing commutes with
/// non-ASCII stripping.
fn lowercase(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        if c.is_ascii() {
            out.push(c.to_ascii_lowercase());
        } else {
            let lower: String = c.to_lowercase().collect();
            if lower.is_ascii() || lower.chars().any(|l| l.is_ascii()) {
                out.push(c);
            } else {
                out.push_str(&lower);
            }
        }
    }
    out
}

fn expand_contractions(text: &str, map: &BTreeMap<String, String>) -> String {
    contraction_regex()
        .replace_all(text, |caps: &regex::Captures<'_>| {
            let word = &caps[0];
            let key = word.replace('\u{2019}', "'").to_lowercase();
            match map.get(&key) {
                Some(expansion) => expansion.clone(),
                None => word.to_string(),
            }
        })
        .into_owned()
}

fn remove_links(text: &str) -> String {
    link_regex().replace_all(text, " ").into_owned()
}

fn remove_special_chars(text: &str) -> String {
    text.chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect()
}

fn strip_non_ascii(text: &str) -> String {
    text.chars().filter(char::is_ascii).collect()
}

fn remove_stopwords(text: &str, stopwords: &BTreeSet<String>) -> String {
    text.split_whitespace()
        .filter(|w| !stopwords.contains(*w))
        .collect::<Vec<_>>()
        .join(" ")
}

fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn apply_step(text: &str, step: CleaningStep, config: &CleaningConfig) -> String {
    match step {
        CleaningStep::Lowercase => lowercase(text),
        CleaningStep::ExpandContractions => expand_contractions(text, &config.contractions),
        CleaningStep::RemoveLinks => remove_links(text),
        CleaningStep::RemoveStopwords => remove_stopwords(text, &config.stopwords),
        CleaningStep::RemoveSpecialChars => remove_special_chars(text),
        CleaningStep::StripNonAscii => strip_non_ascii(text),
        CleaningStep::CollapseWhitespace => collapse_whitespace(text),
    }
}

/// Applies the configured steps in order, repeating the pass until the text
/// stops changing. With the default order the second pass is a no-op; custom
/// orders (stopwords before contraction expansion, say) need more than one
/// pass for the result to be a fixed point.
pub fn clean_text(raw: &str, config: &CleaningConfig) -> String {
    let mut current = raw.to_string();
    for _ in 0..MAX_PASSES {
        let next = config
            .steps
            .iter()
            .fold(current.clone(), |acc, step| apply_step(&acc, *step, config));
        if next == current {
            break;
        }
        current = next;
    }
    current
}

/// Whitespace-token count.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanPost {
    pub id: String,
    pub clean_text: String,
    pub word_count: usize,
}

impl CleanPost {
    pub fn new(id: impl Into<String>, clean_text: String) -> Self {
        let word_count = word_count(&clean_text);
        CleanPost {
            id: id.into(),
            clean_text,
            word_count,
        }
    }
}

pub fn clean_post(post: &LabeledPost, config: &CleaningConfig) -> CleanPost {
    CleanPost::new(post.id.clone(), clean_text(&post.text, config))
}

pub fn clean_posts(posts: &[LabeledPost], config: &CleaningConfig) -> Vec<CleanPost> {
    posts.iter().map(|p| clean_post(p, config)).collect()
}

/// Returns the corpus with every text replaced by its cleaned form. Posts
/// that clean to the empty string are kept.
pub fn clean_corpus(posts: &[LabeledPost], config: &CleaningConfig) -> Vec<LabeledPost> {
    posts
        .iter()
        .map(|p| LabeledPost {
            text: clean_text(&p.text, config),
            ..p.clone()
        })
        .collect()
}

/// Result of checking a corpus for texts lost during cleaning.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub total: usize,
    /// Posts whose raw text is empty or whitespace-only.
    pub missing_raw: usize,
    pub missing_raw_ids: Vec<String>,
    /// Posts with raw content that cleaned to the empty string.
    pub empty_after_cleaning: usize,
    pub empty_ids: Vec<String>,
}

impl AuditReport {
    pub fn is_lossless(&self) -> bool {
        self.missing_raw == 0 && self.empty_after_cleaning == 0
    }
}

pub fn audit_no_loss(posts: &[LabeledPost], config: &CleaningConfig) -> AuditReport {
    let mut report = AuditReport {
        total: posts.len(),
        ..Default::default()
    };
    for post in posts {
        if post.text.trim().is_empty() {
            report.missing_raw += 1;
            report.missing_raw_ids.push(post.id.clone());
        } else if word_count(&clean_text(&post.text, config)) == 0 {
            report.empty_after_cleaning += 1;
            report.empty_ids.push(post.id.clone());
        }
    }
    report
}

/// Nearest-rank quantile: the value at 1-based position `ceil(q * n)` of the
/// ascending sort.
pub fn nearest_rank(values: &[usize], q: f64) -> Result<usize> {
    if values.is_empty() {
        return Err(Error::Precondition("quantile of an empty sample".into()));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Config(format!(
            "quantile must be in (0, 1], got {q}"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    // The epsilon absorbs products like 0.98 * 100 landing a hair above 98.
    let rank = ((q * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    Ok(sorted[rank - 1])
}

pub fn word_count_quantile(posts: &[CleanPost], q: f64) -> Result<usize> {
    let counts: Vec<usize> = posts.iter().map(|p| p.word_count).collect();
    nearest_rank(&counts, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Label;
    use proptest::prelude::*;

    #[test]
    fn default_pipeline_example() {
        let cfg = CleaningConfig::default();
        assert_eq!(
            clean_text(
                "Drinking ALCOHOL can't kill the virus! https://x.co/a",
                &cfg
            ),
            "drinking alcohol cannot kill virus"
        );
        assert_eq!(clean_text("", &cfg), "");
    }

    #[test]
    fn bundled_resources() {
        let cfg = CleaningConfig::default();
        assert_eq!(cfg.stopwords().len(), 179);
        assert!(cfg.contractions().len() >= 110);
        assert_eq!(cfg.contractions()["won't"], "will not");
    }

    #[test]
    fn link_forms() {
        let cfg = CleaningConfig::default()
            .with_steps(vec![
                CleaningStep::RemoveLinks,
                CleaningStep::CollapseWhitespace,
            ])
            .unwrap();
        assert_eq!(clean_text("see www.who.int/covid now", &cfg), "see now");
        assert_eq!(clean_text("read bit.ly/3abc and cdc.gov", &cfg), "read and");
        assert_eq!(clean_text("http://t.co/xyz", &cfg), "");
        assert_eq!(clean_text("e.g. this stays", &cfg), "e.g. this stays");
    }

    #[test]
    fn curly_apostrophes_expand() {
        let cfg = CleaningConfig::default()
            .with_steps(vec![
                CleaningStep::Lowercase,
                CleaningStep::ExpandContractions,
            ])
            .unwrap();
        assert_eq!(clean_text("They\u{2019}re here", &cfg), "they are here");
    }

    #[test]
    fn config_validation() {
        let base = CleaningConfig::default();
        assert!(base.with_steps(vec![]).is_err());
        assert!(base
            .with_steps(vec![CleaningStep::Lowercase, CleaningStep::Lowercase])
            .is_err());
        let mut bad = BTreeMap::new();
        bad.insert("Can't".to_string(), "cannot".to_string());
        assert!(CleaningConfig::new(vec![CleaningStep::Lowercase], BTreeSet::new(), bad).is_err());
    }

    #[test]
    fn stopword_flag() {
        let cfg = CleaningConfig::default().without_stopword_removal();
        assert!(!cfg.has_step(CleaningStep::RemoveStopwords));
        assert_eq!(clean_text("The virus is here", &cfg), "the virus is here");
    }

    #[test]
    fn audit_counts() {
        let cfg = CleaningConfig::default();
        let r = audit_no_loss(&[LabeledPost::new("u1", "!!!", Label::Fake)], &cfg);
        assert_eq!(r.empty_after_cleaning, 1);
        assert_eq!(r.empty_ids, vec!["u1".to_string()]);
        assert_eq!(r.missing_raw, 0);

        let r = audit_no_loss(&[], &cfg);
        assert_eq!((r.missing_raw, r.empty_after_cleaning), (0, 0));
        assert!(r.is_lossless());

        let r = audit_no_loss(&[LabeledPost::new("m", "  ", Label::Real)], &cfg);
        assert_eq!(r.missing_raw_ids, vec!["m".to_string()]);
    }

    #[test]
    fn quantile_examples() {
        let ramp: Vec<usize> = (1..=100).collect();
        assert_eq!(nearest_rank(&ramp, 0.98).unwrap(), 98);
        assert_eq!(nearest_rank(&ramp, 0.99).unwrap(), 99);
        assert_eq!(nearest_rank(&ramp, 1.0).unwrap(), 100);
        assert_eq!(nearest_rank(&[7, 7, 7], 0.3).unwrap(), 7);
        assert!(matches!(
            nearest_rank(&[], 0.5),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(nearest_rank(&[1], 0.0), Err(Error::Config(_))));
        assert!(matches!(nearest_rank(&[1], 1.5), Err(Error::Config(_))));
        let posts = vec![CleanPost::new("a", "x y z".into())];
        assert_eq!(word_count_quantile(&posts, 0.5).unwrap(), 3);
    }

    fn step_subsets() -> impl Strategy<Value = Vec<CleaningStep>> {
        (
            Just(CleaningStep::DEFAULT_ORDER.to_vec()).prop_shuffle(),
            1usize..=7,
        )
            .prop_map(|(steps, k)| steps[..k].to_vec())
    }

    fn messy_text() -> impl Strategy<Value = String> {
        prop::collection::vec(
            prop_oneof![
                Just("The".to_string()),
                Just("can't".to_string()),
                Just("Y'all".to_string()),
                Just("https://t.co/x".to_string()),
                Just("www.who.int".to_string()),
                Just("caf\u{e9}".to_string()),
                Just("\u{212a}elvin".to_string()),
                Just("\u{130}stanbul".to_string()),
                Just("!!".to_string()),
                Just("COVID-19".to_string()),
                "[a-zA-Z0-9'., !?-]{0,8}",
                "\\PC{0,6}",
            ],
            0..12,
        )
        .prop_map(|words| words.join(" "))
    }

    proptest! {
        #[test]
        fn cleaning_is_idempotent(steps in step_subsets(), text in messy_text()) {
            let cfg = CleaningConfig::default().with_steps(steps).unwrap();
            let once = clean_text(&text, &cfg);
            prop_assert_eq!(clean_text(&once, &cfg), once);
        }

        #[test]
        fn lowercase_commutes_with_ascii_strip(text in "\\PC{0,40}") {
            prop_assert_eq!(
                lowercase(&strip_non_ascii(&text)),
                strip_non_ascii(&lowercase(&text))
            );
        }

        #[test]
        fn ascii_strip_leaves_no_high_code_points(text in messy_text()) {
            let out = clean_text(&text, &CleaningConfig::default());
            prop_assert!(out.chars().all(|c| (c as u32) <= 127));
        }

        #[test]
        fn quantile_monotone_and_max(
            values in prop::collection::vec(0usize..500, 1..200),
            a in 0.001f64..=1.0,
            b in 0.001f64..=1.0,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(nearest_rank(&values, lo).unwrap() <= nearest_rank(&values, hi).unwrap());
            prop_assert_eq!(nearest_rank(&values, 1.0).unwrap(), *values.iter().max().unwrap());
        }
    }
}
