//! Token/mask batches and encoder backbones.
//!
//! Pretrained backbones plug in through [`EncoderRegistry`]; the built-in
//! `test` family is a seeded embedding encoder that needs no weights.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;

/// Environment variable naming the directory searched for pretrained weights.
pub const WEIGHTS_DIR_ENV: &str = "CLAIMCHECK_WEIGHTS_DIR";

/// Vocabulary of the hash tokenizer: three specials plus 4096 hash buckets.
pub const TEST_VOCAB_SIZE: usize = 4099;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderFamily {
    Bert,
    Albert,
    Roberta,
    Test,
}

impl EncoderFamily {
    pub fn name(self) -> &'static str {
        match self {
            EncoderFamily::Bert => "bert",
            EncoderFamily::Albert => "albert",
            EncoderFamily::Roberta => "roberta",
            EncoderFamily::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bert" => Some(EncoderFamily::Bert),
            "albert" => Some(EncoderFamily::Albert),
            "roberta" => Some(EncoderFamily::Roberta),
            "test" => Some(EncoderFamily::Test),
            _ => None,
        }
    }
}

impl fmt::Display for EncoderFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub family: EncoderFamily,
    pub hidden_width: usize,
    /// Only meaningful for the `test` family.
    #[serde(default)]
    pub seed: u64,
    /// Local path or registry name of pretrained weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_ref: Option<String>,
}

impl EncoderSpec {
    pub fn test(hidden_width: usize, seed: u64) -> Self {
        EncoderSpec {
            family: EncoderFamily::Test,
            hidden_width,
            seed,
            weights_ref: None,
        }
    }

    /// Base-size pretrained backbone (hidden width 768).
    pub fn pretrained(family: EncoderFamily, weights_ref: impl Into<String>) -> Self {
        EncoderSpec {
            family,
            hidden_width: 768,
            seed: 0,
            weights_ref: Some(weights_ref.into()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 {
            return Err(Error::Spec("encoder hidden width must be positive".into()));
        }
        Ok(())
    }
}

/// Ids of the special tokens surrounding and padding a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub pad: u32,
    pub start: u32,
    pub end: u32,
}

pub trait Tokenizer: Send + Sync {
    /// Content token ids of `text`, without special tokens.
    fn content_ids(&self, text: &str) -> Vec<u32>;
    fn specials(&self) -> SpecialTokens;
    fn vocab_size(&self) -> usize;
}

/// Whitespace tokenizer mapping each word to an FNV-1a hash bucket.
#[derive(Clone, Copy, Debug, Default)]
pub struct HashTokenizer;

impl HashTokenizer {
    const SPECIALS: SpecialTokens = SpecialTokens {
        pad: 0,
        start: 1,
        end: 2,
    };

    pub fn word_id(word: &str) -> u32 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in word.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        3 + (h % (TEST_VOCAB_SIZE as u64 - 3)) as u32
    }
}

impl Tokenizer for HashTokenizer {
    fn content_ids(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(Self::word_id).collect()
    }

    fn specials(&self) -> SpecialTokens {
        Self::SPECIALS
    }

    fn vocab_size(&self) -> usize {
        TEST_VOCAB_SIZE
    }
}

/// Fixed-length token ids and attention mask, `[batch, max_len]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedBatch {
    pub token_ids: Array2<u32>,
    pub attention_mask: Array2<u8>,
}

impl EncodedBatch {
    pub fn batch_size(&self) -> usize {
        self.token_ids.nrows()
    }

    pub fn seq_len(&self) -> usize {
        self.token_ids.ncols()
    }

    /// Number of unmasked positions in each row.
    pub fn row_lengths(&self) -> Vec<usize> {
        self.attention_mask
            .rows()
            .into_iter()
            .map(|r| r.iter().filter(|m| **m == 1).count())
            .collect()
    }

    /// Checks shapes and that every mask row is a non-empty run of ones
    /// followed by zeros.
    pub fn validate(&self) -> Result<()> {
        if self.token_ids.dim() != self.attention_mask.dim() {
            return Err(Error::Shape(format!(
                "token ids {:?} and mask {:?} differ in shape",
                self.token_ids.dim(),
                self.attention_mask.dim()
            )));
        }
        for (b, row) in self.attention_mask.rows().into_iter().enumerate() {
            let len = row.iter().take_while(|m| **m == 1).count();
            if len == 0 {
                return Err(Error::Shape(format!("mask row {b} has no real tokens")));
            }
            if row.iter().skip(len).any(|m| *m != 0) {
                return Err(Error::Shape(format!(
                    "mask row {b} is not a prefix run of ones"
                )));
            }
        }
        Ok(())
    }

    pub fn select_rows(&self, rows: &[usize]) -> EncodedBatch {
        EncodedBatch {
            token_ids: self.token_ids.select(Axis(0), rows),
            attention_mask: self.attention_mask.select(Axis(0), rows),
        }
    }
}

/// Adds start/end tokens, truncates content to `max_len - 2` tokens and
/// right-pads to `max_len`.
pub fn tokenize_batch<S: AsRef<str>>(
    texts: &[S],
    tokenizer: &dyn Tokenizer,
    max_len: usize,
) -> Result<EncodedBatch> {
    if max_len < 3 {
        return Err(Error::Config(format!(
            "max_len must be at least 3 (two special tokens and one content token), got {max_len}"
        )));
    }
    let sp = tokenizer.specials();
    let mut token_ids = Array2::from_elem((texts.len(), max_len), sp.pad);
    let mut attention_mask = Array2::zeros((texts.len(), max_len));
    for (b, text) in texts.iter().enumerate() {
        let content = tokenizer.content_ids(text.as_ref());
        let kept = content.len().min(max_len - 2);
        let row = std::iter::once(sp.start)
            .chain(content[..kept].iter().copied())
            .chain(std::iter::once(sp.end));
        for (t, id) in row.enumerate() {
            token_ids[[b, t]] = id;
            attention_mask[[b, t]] = 1;
        }
    }
    Ok(EncodedBatch {
        token_ids,
        attention_mask,
    })
}

/// Token-level and sentence-level features of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// `[batch, seq_len, hidden]`
    pub token_features: Array3<f64>,
    /// `[batch, hidden]`
    pub pooled: Array2<f64>,
}

impl EncoderOutput {
    pub fn is_finite(&self) -> bool {
        self.token_features
            .iter()
            .chain(self.pooled.iter())
            .all(|v| v.is_finite())
    }
}

/// An encoder backbone. Read-only after loading, so encoding may run from
/// several threads; training mutates parameters through `params_mut`.
pub trait Encoder: Send + Sync {
    fn spec(&self) -> &EncoderSpec;

    /// Sequence length the encoder accepts.
    fn max_len(&self) -> usize;

    fn tokenizer(&self) -> &dyn Tokenizer;

    fn encode(&self, batch: &EncodedBatch) -> Result<EncoderOutput>;

    /// Trainable parameters, if the backbone exposes any.
    fn params(&self) -> Option<&ParamSet> {
        None
    }

    fn params_mut(&mut self) -> Option<&mut ParamSet> {
        None
    }

    /// Gradient of the loss with respect to `params()`, given gradients with
    /// respect to the token features and/or the pooled vectors.
    fn backward(
        &self,
        _batch: &EncodedBatch,
        _grad_tokens: Option<&Array3<f64>>,
        _grad_pooled: Option<&Array2<f64>>,
    ) -> Result<Vec<f64>> {
        Err(Error::Load(format!(
            "{} backbone does not support fine-tuning",
            self.spec().family
        )))
    }

    fn hidden_width(&self) -> usize {
        self.spec().hidden_width
    }

    fn tokenize(&self, texts: &[&str]) -> Result<EncodedBatch> {
        tokenize_batch(texts, self.tokenizer(), self.max_len())
    }
}

/// Seeded embedding encoder: the feature of token `id` at position `t` is
/// `token_table[id] + position_table[t]`, and the pooled vector is the mean
/// over unmasked positions.
#[derive(Clone, Debug)]
pub struct TestEncoder {
    spec: EncoderSpec,
    max_len: usize,
    params: ParamSet,
    token_off: usize,
    pos_off: usize,
}

impl TestEncoder {
    pub fn new(spec: EncoderSpec, max_len: usize) -> Result<Self> {
        if spec.family != EncoderFamily::Test {
            return Err(Error::Spec(format!(
                "TestEncoder built from a {} spec",
                spec.family
            )));
        }
        spec.validate()?;
        let d = spec.hidden_width;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut params = ParamSet::new();
        // Token table first, then positions in order, so tables for different
        // max_len values agree on their common prefix.
        let token_off = params.add_uniform("embedding.token", &[TEST_VOCAB_SIZE, d], 1.0, &mut rng);
        let pos_off = params.add_uniform("embedding.position", &[max_len, d], 1.0, &mut rng);
        Ok(TestEncoder {
            spec,
            max_len,
            params,
            token_off,
            pos_off,
        })
    }

    fn check_batch(&self, batch: &EncodedBatch) -> Result<()> {
        batch.validate()?;
        if batch.seq_len() != self.max_len {
            return Err(Error::Shape(format!(
                "batch length {} does not match encoder length {}",
                batch.seq_len(),
                self.max_len
            )));
        }
        if let Some(bad) = batch
            .token_ids
            .iter()
            .find(|id| **id as usize >= TEST_VOCAB_SIZE)
        {
            return Err(Error::Shape(format!("token id {bad} outside vocabulary")));
        }
        Ok(())
    }
}

impl Encoder for TestEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &HashTokenizer
    }

    fn encode(&self, batch: &EncodedBatch) -> Result<EncoderOutput> {
        self.check_batch(batch)?;
        let d = self.spec.hidden_width;
        let (b_n, t_n) = (batch.batch_size(), batch.seq_len());
        let v = self.params.values();
        let mut token_features = Array3::zeros((b_n, t_n, d));
        let mut pooled = Array2::zeros((b_n, d));
        for b in 0..b_n {
            let mut len = 0usize;
            for t in 0..t_n {
                let id = batch.token_ids[[b, t]] as usize;
                let tok = &v[self.token_off + id * d..self.token_off + (id + 1) * d];
                let pos = &v[self.pos_off + t * d..self.pos_off + (t + 1) * d];
                let masked = batch.attention_mask[[b, t]] == 1;
                if masked {
                    len += 1;
                }
                for k in 0..d {
                    let f = tok[k] + pos[k];
                    token_features[[b, t, k]] = f;
                    if masked {
                        pooled[[b, k]] += f;
                    }
                }
            }
            let inv = 1.0 / len as f64;
            pooled.row_mut(b).mapv_inplace(|x| x * inv);
        }
        Ok(EncoderOutput {
            token_features,
            pooled,
        })
    }

    fn params(&self) -> Option<&ParamSet> {
        Some(&self.params)
    }

    fn params_mut(&mut self) -> Option<&mut ParamSet> {
        Some(&mut self.params)
    }

    fn backward(
        &self,
        batch: &EncodedBatch,
        grad_tokens: Option<&Array3<f64>>,
        grad_pooled: Option<&Array2<f64>>,
    ) -> Result<Vec<f64>> {
        self.check_batch(batch)?;
        let d = self.spec.hidden_width;
        let mut grad = self.params.zeros_like();
        let lengths = batch.row_lengths();
        for b in 0..batch.batch_size() {
            let inv = 1.0 / lengths[b] as f64;
            for t in 0..batch.seq_len() {
                let masked = batch.attention_mask[[b, t]] == 1;
                let id = batch.token_ids[[b, t]] as usize;
                for k in 0..d {
                    let mut g = grad_tokens.map_or(0.0, |gt| gt[[b, t, k]]);
                    if masked {
                        g += grad_pooled.map_or(0.0, |gp| gp[[b, k]]) * inv;
                    }
                    if g != 0.0 {
                        grad[self.token_off + id * d + k] += g;
                        grad[self.pos_off + t * d + k] += g;
                    }
                }
            }
        }
        Ok(grad)
    }
}

type LoaderFn = dyn Fn(&EncoderSpec, &Path, usize) -> Result<Box<dyn Encoder>> + Send + Sync;

/// Resolves encoder specs to loaded backbones.
///
/// The `test` family is built in. Pretrained families need a loader
/// registered with [`EncoderRegistry::register`]; the loader receives the
/// resolved weights location.
#[derive(Default)]
pub struct EncoderRegistry {
    loaders: HashMap<EncoderFamily, Box<LoaderFn>>,
    weights_dir: Option<PathBuf>,
}

impl EncoderRegistry {
    /// Registry whose weights directory comes from `CLAIMCHECK_WEIGHTS_DIR`.
    pub fn from_env() -> Self {
        EncoderRegistry {
            loaders: HashMap::new(),
            weights_dir: std::env::var_os(WEIGHTS_DIR_ENV).map(PathBuf::from),
        }
    }

    pub fn with_weights_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.weights_dir = Some(dir.into());
        self
    }

    pub fn register<F>(&mut self, family: EncoderFamily, loader: F)
    where
        F: Fn(&EncoderSpec, &Path, usize) -> Result<Box<dyn Encoder>> + Send + Sync + 'static,
    {
        self.loaders.insert(family, Box::new(loader));
    }

    /// A `weights_ref` is tried as a path first, then relative to the
    /// weights directory.
    pub fn resolve_weights(&self, spec: &EncoderSpec) -> Result<PathBuf> {
        let reference = spec.weights_ref.as_deref().ok_or_else(|| {
            Error::Load(format!("{} encoder has no weights reference", spec.family))
        })?;
        let direct = PathBuf::from(reference);
        if direct.exists() {
            return Ok(direct);
        }
        if let Some(dir) = &self.weights_dir {
            let candidate = dir.join(reference);
            if candidate.exists() {
                return Ok(candidate);
            }
        }
        Err(Error::Load(format!(
            "cannot resolve {} weights `{reference}` (searched the path itself and {})",
            spec.family,
            self.weights_dir.as_ref().map_or_else(
                || format!("${WEIGHTS_DIR_ENV} (unset)"),
                |d| d.display().to_string()
            )
        )))
    }

    pub fn load(&self, spec: &EncoderSpec, max_len: usize) -> Result<Box<dyn Encoder>> {
        spec.validate()?;
        if spec.family == EncoderFamily::Test {
            return Ok(Box::new(TestEncoder::new(spec.clone(), max_len)?));
        }
        let path = self.resolve_weights(spec)?;
        let loader = self.loaders.get(&spec.family).ok_or_else(|| {
            Error::Load(format!(
                "no backbone adapter registered for the {} family (weights at {})",
                spec.family,
                path.display()
            ))
        })?;
        let encoder = loader(spec, &path, max_len)?;
        if encoder.hidden_width() != spec.hidden_width {
            return Err(Error::Shape(format!(
                "{} backbone has width {}, spec says {}",
                spec.family,
                encoder.hidden_width(),
                spec.hidden_width
            )));
        }
        Ok(encoder)
    }
}
