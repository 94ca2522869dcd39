//! Labeled claim corpora: loading, validation, splitting and summary statistics.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Binary class of a post. `Real` is encoded as 0 and `Fake` as 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Real, Label::Fake];

    pub fn index(self) -> usize {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }

    pub fn from_index(index: usize) -> Option<Label> {
        match index {
            0 => Some(Label::Real),
            1 => Some(Label::Fake),
            _ => None,
        }
    }

    /// Accepts `real`, `fake`, `0` and `1` (case-insensitive, surrounding
    /// whitespace ignored).
    pub fn parse(raw: &str) -> Option<Label> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "real" | "0" => Some(Label::Real),
            "fake" | "1" => Some(Label::Fake),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.index() as u8)
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = u8::deserialize(d)?;
        Label::from_index(v as usize)
            .ok_or_else(|| serde::de::Error::custom(format!("label must be 0 or 1, got {v}")))
    }
}

/// One corpus item.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPost {
    pub id: String,
    pub text: String,
    pub label: Label,
}

impl LabeledPost {
    pub fn new(id: impl Into<String>, text: impl Into<String>, label: Label) -> Self {
        LabeledPost {
            id: id.into(),
            text: text.into(),
            label,
        }
    }
}

/// Column delimiter of a corpus file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Tsv,
    #[default]
    Csv,
}

impl CorpusFormat {
    fn delimiter(self) -> u8 {
        match self {
            CorpusFormat::Tsv => b'\t',
            CorpusFormat::Csv => b',',
        }
    }

    /// Guesses the format from a file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> CorpusFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("tsv") => CorpusFormat::Tsv,
            _ => CorpusFormat::Csv,
        }
    }
}

/// Loads a corpus file with an `id,text,label` header (any column order).
pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Vec<LabeledPost>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(file, format)
}

/// Reads a corpus from any reader. Row order is preserved; unknown labels and
/// duplicate ids are hard errors.
pub fn read_corpus<R: Read>(reader: R, format: CorpusFormat) -> Result<Vec<LabeledPost>> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(format.delimiter())
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |names: &[&str]| -> Result<usize> {
        headers
            .iter()
            .position(|h| names.iter().any(|n| h.trim().eq_ignore_ascii_case(n)))
            .ok_or_else(|| Error::Schema {
                column: names[0].to_string(),
            })
    };
    let id_col = column(&["id"])?;
    // `tweet` is the text column name used by the public release of the claim corpus.
    let text_col = column(&["text", "tweet"])?;
    let label_col = column(&["label"])?;

    let mut posts = Vec::new();
    let mut seen = HashSet::new();
    for record in rdr.records() {
        let record = record?;
        let field = |i: usize| record.get(i).unwrap_or("");
        let id = field(id_col).trim().to_string();
        let raw_label = field(label_col);
        let label = Label::parse(raw_label)
            .ok_or_else(|| Error::Data(format!("row id `{id}`: unknown label `{raw_label}`")))?;
        if !seen.insert(id.clone()) {
            return Err(Error::Data(format!("duplicate id `{id}`")));
        }
        posts.push(LabeledPost {
            id,
            text: field(text_col).to_string(),
            label,
        });
    }
    Ok(posts)
}

/// Writes a corpus with an `id,text,label` header and numeric labels.
pub fn write_corpus(
    path: impl AsRef<Path>,
    posts: &[LabeledPost],
    format: CorpusFormat,
) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_corpus_to(file, posts, format)
}

pub fn write_corpus_to<W: Write>(
    writer: W,
    posts: &[LabeledPost],
    format: CorpusFormat,
) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .delimiter(format.delimiter())
        .from_writer(writer);
    wtr.write_record(["id", "text", "label"])?;
    for post in posts {
        let label = post.label.index().to_string();
        wtr.write_record([post.id.as_str(), post.text.as_str(), label.as_str()])?;
    }
    wtr.flush().map_err(|e| Error::io("<corpus writer>", e))?;
    Ok(())
}

/// Train/validation/test partition of a corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<LabeledPost>,
    pub validation: Vec<LabeledPost>,
    pub test: Vec<LabeledPost>,
}

impl CorpusSplit {
    /// Builds a split from three pre-split lists, checking that each is
    /// non-empty and that no id appears in more than one list.
    pub fn from_parts(
        train: Vec<LabeledPost>,
        validation: Vec<LabeledPost>,
        test: Vec<LabeledPost>,
    ) -> Result<Self> {
        let split = CorpusSplit {
            train,
            validation,
            test,
        };
        split.validate()?;
        Ok(split)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (name, part) in self.parts() {
            if part.is_empty() {
                return Err(Error::Precondition(format!("{name} split is empty")));
            }
            for post in part {
                if !seen.insert(post.id.as_str()) {
                    return Err(Error::Data(format!(
                        "id `{}` appears in more than one split",
                        post.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn parts(&self) -> [(&'static str, &[LabeledPost]); 3] {
        [
            ("train", &self.train),
            ("validation", &self.validation),
            ("test", &self.test),
        ]
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }
}

/// SHA-256 over the ids, texts and labels of `posts`, in order. Fields are
/// length-prefixed so distinct lists never share a digest by concatenation.
pub fn posts_checksum(posts: &[LabeledPost]) -> String {
    let mut hasher = Sha256::new();
    for post in posts {
        for field in [post.id.as_bytes(), post.text.as_bytes()] {
            hasher.update((field.len() as u64).to_le_bytes());
            hasher.update(field);
        }
        hasher.update([post.label.index() as u8]);
    }
    hex::encode(hasher.finalize())
}

/// Fractions of a three-way split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.6,
            validation: 0.2,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self> {
        let f = SplitFractions {
            train,
            validation,
            test,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.validation, self.test];
        if all.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Config(format!(
                "split fractions must be positive, got {all:?}"
            )));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

/// `floor(fraction * n)`, tolerant of representation error such as
/// `0.2 * 10700 = 2140.0000000000002` or `0.3 * 10 = 2.9999999999999996`.
pub(crate) fn floor_share(fraction: f64, n: usize) -> usize {
    let exact = fraction * n as f64;
    let share = (exact + 1e-9).floor();
    (share.max(0.0) as usize).min(n)
}

/// Seeded shuffle split. Validation and test receive `floor(fraction * n)`
/// items; the remainder goes to train. Within each part the original
/// corpus order is kept.
pub fn split_corpus(
    posts: &[LabeledPost],
    fractions: SplitFractions,
    seed: u64,
) -> Result<CorpusSplit> {
    fractions.validate()?;
    if posts.len() < 5 {
        return Err(Error::Precondition(format!(
            "need at least 5 posts to split, got {}",
            posts.len()
        )));
    }
    let n = posts.len();
    let n_val = floor_share(fractions.validation, n);
    let n_test = floor_share(fractions.test, n);
    let n_train = n - n_val - n_test;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |idx: &[usize]| -> Vec<LabeledPost> {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| posts[i].clone()).collect()
    };
    CorpusSplit::from_parts(
        take(&order[..n_train]),
        take(&order[n_train..n_train + n_val]),
        take(&order[n_train + n_val..]),
    )
}

/// Summary statistics of a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total: usize,
    pub per_class_counts: BTreeMap<u8, usize>,
    pub per_class_fraction: BTreeMap<u8, f64>,
    pub distinct_words: usize,
    pub shared_words: usize,
}

const SYNTHETIC_REAL: [&str; 8] = [
    "vaccine",
    "trial",
    "officials",
    "report",
    "hospital",
    "study",
    "data",
    "agency",
];
const SYNTHETIC_FAKE: [&str; 8] = [
    "miracle",
    "hoax",
    "secret",
    "garlic",
    "bleach",
    "microchip",
    "plandemic",
    "cure",
];
const SYNTHETIC_SHARED: [&str; 4] = ["covid", "virus", "today", "new"];

/// Seeded desk-scale corpus whose classes use disjoint content words, so a
/// bag-of-words classifier can separate them exactly. Labels alternate
/// starting with real; ids are `syn0000`, `syn0001`, ...
pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<LabeledPost> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Real } else { Label::Fake };
            let vocab = match label {
                Label::Real => &SYNTHETIC_REAL,
                Label::Fake => &SYNTHETIC_FAKE,
            };
            let len = rng.gen_range(2..=5);
            let mut words: Vec<&str> = (0..len).map(|_| *vocab.choose(&mut rng).unwrap()).collect();
            if rng.gen_bool(0.5) {
                let at = rng.gen_range(0..=words.len());
                words.insert(at, SYNTHETIC_SHARED.choose(&mut rng).unwrap());
            }
            LabeledPost::new(format!("syn{i:04}"), words.join(" "), label)
        })
        .collect()
}

/// Counts, class balance and vocabulary overlap. Words are the
/// whitespace-separated tokens of the lowercased raw text.
pub fn corpus_stats(posts: &[LabeledPost]) -> Result<CorpusStats> {
    if posts.is_empty() {
        return Err(Error::Precondition(
            "corpus_stats on an empty corpus".into(),
        ));
    }
    let mut counts = [0usize; 2];
    let mut vocab: [BTreeSet<String>; 2] = Default::default();
    for post in posts {
        let c = post.label.index();
        counts[c] += 1;
        for word in post.text.to_lowercase().split_whitespace() {
            if !vocab[c].contains(word) {
                vocab[c].insert(word.to_string());
            }
        }
    }
    let total = posts.len();
    let distinct_words = vocab[0].union(&vocab[1]).count();
    let shared_words = vocab[0].intersection(&vocab[1]).count();
    let per_class_counts = Label::ALL
        .iter()
        .map(|l| (l.index() as u8, counts[l.index()]))
        .collect();
    let per_class_fraction = Label::ALL
        .iter()
        .map(|l| (l.index() as u8, counts[l.index()] as f64 / total as f64))
        .collect();
    Ok(CorpusStats {
        total,
        per_class_counts,
        per_class_fraction,
        distinct_words,
        shared_words,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn posts(n: usize) -> Vec<LabeledPost> {
        (0..n)
            .map(|i| {
                let label = if i % 3 == 0 { Label::Fake } else { Label::Real };
                LabeledPost::new(format!("p{i}"), format!("text {i}"), label)
            })
            .collect()
    }

    #[test]
    fn string_labels_are_normalized() {
        let data =
            "id,text,label\nt1,Masks reduce transmission,real\nt2,Alcohol kills the virus,fake\n";
        let loaded = read_corpus(data.as_bytes(), CorpusFormat::Csv).unwrap();
        assert_eq!(loaded[0].id, "t1");
        assert_eq!(loaded[0].label.index(), 0);
        assert_eq!(loaded[1].id, "t2");
        assert_eq!(loaded[1].label.index(), 1);
    }

    #[test]
    fn column_order_is_free_and_tsv_works() {
        let data = "label\tid\ttext\n1\ta\tsome text\n0\tb\tother\n";
        let loaded = read_corpus(data.as_bytes(), CorpusFormat::Tsv).unwrap();
        assert_eq!(loaded[0], LabeledPost::new("a", "some text", Label::Fake));
        assert_eq!(loaded[1], LabeledPost::new("b", "other", Label::Real));
    }

    #[test]
    fn duplicate_id_is_reported() {
        let data = "id,text,label\nx,one,real\ny,two,fake\nx,three,fake\nz,four,real\n";
        let err = read_corpus(data.as_bytes(), CorpusFormat::Csv).unwrap_err();
        assert!(matches!(&err, Error::Data(m) if m.contains("`x`")), "{err}");
    }

    #[test]
    fn unknown_label_names_row() {
        let data = "id,text,label\nr9,hmm,maybe\n";
        let err = read_corpus(data.as_bytes(), CorpusFormat::Csv).unwrap_err();
        assert!(matches!(&err, Error::Data(m) if m.contains("r9")), "{err}");
    }

    #[test]
    fn missing_column_is_named() {
        let data = "id,text\na,b\n";
        let err = read_corpus(data.as_bytes(), CorpusFormat::Csv).unwrap_err();
        assert!(matches!(&err, Error::Schema { column } if column == "label"));
    }

    #[test]
    fn split_sizes() {
        let f = SplitFractions::default();
        assert_eq!(
            split_corpus(&posts(10_700), f, 1).unwrap().sizes(),
            (6420, 2140, 2140)
        );
        assert_eq!(split_corpus(&posts(10), f, 1).unwrap().sizes(), (6, 2, 2));
        assert_eq!(split_corpus(&posts(11), f, 1).unwrap().sizes(), (7, 2, 2));
    }

    #[test]
    fn split_rejects_bad_fractions_and_tiny_corpora() {
        let bad = SplitFractions {
            train: 0.5,
            validation: 0.2,
            test: 0.2,
        };
        assert!(matches!(
            split_corpus(&posts(20), bad, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            split_corpus(&posts(4), SplitFractions::default(), 0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn stats_small_examples() {
        let p = vec![
            LabeledPost::new("1", "a b", Label::Real),
            LabeledPost::new("2", "b c", Label::Fake),
        ];
        let s = corpus_stats(&p).unwrap();
        assert_eq!(s.distinct_words, 3);
        assert_eq!(s.shared_words, 1);

        let single = vec![
            LabeledPost::new("1", "a b", Label::Real),
            LabeledPost::new("2", "b c", Label::Real),
        ];
        assert_eq!(corpus_stats(&single).unwrap().shared_words, 0);
        assert!(corpus_stats(&[]).is_err());
    }

    proptest! {
        #[test]
        fn write_then_load_round_trips(
            rows in prop::collection::vec(("[^\r]{0,40}", any::<bool>()), 1..20),
            tsv in any::<bool>(),
        ) {
            let posts: Vec<_> = rows
                .into_iter()
                .enumerate()
                .map(|(i, (text, fake))| {
                    LabeledPost::new(format!("id{i}"), text, if fake { Label::Fake } else { Label::Real })
                })
                .collect();
            let format = if tsv { CorpusFormat::Tsv } else { CorpusFormat::Csv };
            let mut buf = Vec::new();
            write_corpus_to(&mut buf, &posts, format).unwrap();
            let back = read_corpus(buf.as_slice(), format).unwrap();
            prop_assert_eq!(back, posts);
        }

        #[test]
        fn split_is_reproducible_and_covering(n in 5usize..200, seed in any::<u64>(), other in any::<u64>()) {
            let corpus = posts(n);
            let f = SplitFractions::default();
            let a = split_corpus(&corpus, f, seed).unwrap();
            let b = split_corpus(&corpus, f, seed).unwrap();
            prop_assert_eq!(&a, &b);
            for s in [a, split_corpus(&corpus, f, other).unwrap()] {
                let mut ids: Vec<_> = s.parts().iter().flat_map(|(_, p)| p.iter().map(|x| x.id.clone())).collect();
                ids.sort();
                let mut expected: Vec<_> = corpus.iter().map(|p| p.id.clone()).collect();
                expected.sort();
                prop_assert_eq!(ids, expected);
            }
        }

        #[test]
        fn stats_fractions_sum_to_one(labels in prop::collection::vec(any::<bool>(), 1..300)) {
            let corpus: Vec<_> = labels
                .iter()
                .enumerate()
                .map(|(i, f)| LabeledPost::new(i.to_string(), format!("w{} x", i % 7), if *f { Label::Fake } else { Label::Real }))
                .collect();
            let s = corpus_stats(&corpus).unwrap();
            let sum: f64 = s.per_class_fraction.values().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9);
            prop_assert_eq!(s.per_class_counts.values().sum::<usize>(), s.total);
            prop_assert!(s.shared_words <= s.distinct_words);
        }
    }

    #[test]
    fn checksum_tracks_content_and_order() {
        let a = LabeledPost::new("a", "x y", Label::Real);
        let b = LabeledPost::new("b", "z", Label::Fake);
        let base = posts_checksum(&[a.clone(), b.clone()]);
        assert_eq!(base.len(), 64);
        assert_eq!(base, posts_checksum(&[a.clone(), b.clone()]));
        assert_ne!(base, posts_checksum(&[b.clone(), a.clone()]));
        let relabeled = LabeledPost::new("b", "z", Label::Real);
        assert_ne!(base, posts_checksum(&[a.clone(), relabeled]));
        let shifted = [
            LabeledPost::new("a", "x", Label::Real),
            LabeledPost::new(" yb", "z", Label::Fake),
        ];
        assert_ne!(base, posts_checksum(&shifted));
    }

    #[test]
    fn synthetic_corpus_is_balanced_and_separable() {
        let posts = synthetic_corpus(64, 3);
        assert_eq!(posts, synthetic_corpus(64, 3));
        let stats = corpus_stats(&posts).unwrap();
        assert_eq!(stats.per_class_counts[&0], 32);
        let shared: BTreeSet<&str> = SYNTHETIC_SHARED.into_iter().collect();
        assert!(stats.shared_words <= shared.len());
        for post in &posts {
            let own = match post.label {
                Label::Real => &SYNTHETIC_REAL,
                Label::Fake => &SYNTHETIC_FAKE,
            };
            assert!(post
                .text
                .split(' ')
                .all(|w| own.contains(&w) || shared.contains(w)));
        }
    }
}
