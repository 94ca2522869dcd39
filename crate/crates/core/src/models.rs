//! Classifier heads over encoder backbones.
//!
//! Three head variants cover the five architectures:
//!
//! | model              | encoder(s)      | head       |
//! |--------------------|-----------------|------------|
//! | `bert_lstm`        | bert            | `enc_lstm` |
//! | `bert_dense`       | bert            | `enc_dense`|
//! | `albert`           | albert          | `enc_lstm` |
//! | `roberta`          | roberta         | `enc_lstm` |
//! | `hybrid`           | bert + albert   | `hybrid`   |
//!
//! `enc_lstm` runs an LSTM over the unmasked token features and classifies
//! its final hidden state; `enc_dense` and `hybrid` feed the pooled sentence
//! vector(s) through two ReLU layers. All heads end in a single sigmoid unit.
//! Gradients are computed by hand; see the finite-difference tests.

use std::fmt;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Label;
use crate::encoding::{
    EncodedBatch, Encoder, EncoderFamily, EncoderOutput, EncoderRegistry, EncoderSpec,
};
use crate::error::{Error, Result};
use crate::params::{self, ParamSet};
use crate::SCHEMA_VERSION;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    EncLstm,
    EncDense,
    Hybrid,
}

impl HeadVariant {
    pub fn encoder_count(self) -> usize {
        match self {
            HeadVariant::EncLstm | HeadVariant::EncDense => 1,
            HeadVariant::Hybrid => 2,
        }
    }
}

/// The five architectures under comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    BertLstm,
    BertDense,
    Albert,
    Roberta,
    Hybrid,
}

impl Architecture {
    pub const ALL: [Architecture; 5] = [
        Architecture::BertLstm,
        Architecture::BertDense,
        Architecture::Albert,
        Architecture::Roberta,
        Architecture::Hybrid,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Architecture::BertLstm => "bert_lstm",
            Architecture::BertDense => "bert_dense",
            Architecture::Albert => "albert",
            Architecture::Roberta => "roberta",
            Architecture::Hybrid => "hybrid",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Architecture::BertLstm => "BERT",
            Architecture::BertDense => "BERT without LSTM",
            Architecture::Albert => "ALBERT",
            Architecture::Roberta => "RoBERTa",
            Architecture::Hybrid => "Hybrid (BERT+ALBERT)",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|m| m.key() == name.trim())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown model variant `{name}`; valid options: {}",
                    Architecture::ALL.map(Architecture::key).join(", ")
                ))
            })
    }

    pub fn head(self) -> HeadVariant {
        match self {
            Architecture::BertDense => HeadVariant::EncDense,
            Architecture::Hybrid => HeadVariant::Hybrid,
            _ => HeadVariant::EncLstm,
        }
    }

    pub fn families(self) -> &'static [EncoderFamily] {
        match self {
            Architecture::BertLstm | Architecture::BertDense => &[EncoderFamily::Bert],
            Architecture::Albert => &[EncoderFamily::Albert],
            Architecture::Roberta => &[EncoderFamily::Roberta],
            Architecture::Hybrid => &[EncoderFamily::Bert, EncoderFamily::Albert],
        }
    }

    /// Base-size pretrained backbones, referenced by their usual hub names.
    pub fn pretrained_encoders(self) -> Vec<EncoderSpec> {
        self.families()
            .iter()
            .map(|f| {
                let name = match f {
                    EncoderFamily::Bert => "bert-base-uncased",
                    EncoderFamily::Albert => "albert-base-v2",
                    _ => "roberta-base",
                };
                EncoderSpec::pretrained(*f, name)
            })
            .collect()
    }

    /// Test-family encoders of width `d`; a hybrid gets two differently
    /// seeded encoders.
    pub fn test_encoders(self, d: usize, seed: u64) -> Vec<EncoderSpec> {
        (0..self.families().len())
            .map(|i| EncoderSpec::test(d, seed.wrapping_add(i as u64)))
            .collect()
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

/// Declarative description of a classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub variant: HeadVariant,
    pub encoders: Vec<EncoderSpec>,
    pub lstm_units: usize,
    pub dense1_units: usize,
    pub dense2_units: usize,
    /// Dropout after the LSTM (`enc_lstm`) or after the first dense layer.
    pub dropout_a: f64,
    /// Dropout after the second dense layer; unused by `enc_lstm`.
    pub dropout_b: f64,
    /// Model input length, special tokens included.
    pub max_len: usize,
    /// Whether encoder parameters receive gradient updates.
    pub fine_tune_encoders: bool,
}

impl ModelSpec {
    pub fn architecture(model: Architecture, encoders: Vec<EncoderSpec>, max_len: usize) -> Self {
        let variant = model.head();
        ModelSpec {
            name: model.key().to_string(),
            variant,
            encoders,
            lstm_units: 128,
            dense1_units: 128,
            dense2_units: 64,
            dropout_a: if variant == HeadVariant::EncLstm {
                0.2
            } else {
                0.3
            },
            dropout_b: 0.2,
            max_len,
            fine_tune_encoders: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let want = self.variant.encoder_count();
        if self.encoders.len() != want {
            return Err(Error::Spec(format!(
                "{:?} needs exactly {want} encoder(s), got {}",
                self.variant,
                self.encoders.len()
            )));
        }
        for e in &self.encoders {
            e.validate()?;
        }
        if self.lstm_units == 0 || self.dense1_units == 0 || self.dense2_units == 0 {
            return Err(Error::Spec("unit counts must be positive".into()));
        }
        for p in [self.dropout_a, self.dropout_b] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Spec(format!("dropout rate {p} outside [0, 1)")));
            }
        }
        if self.max_len < 3 {
            return Err(Error::Spec(format!("max_len {} is below 3", self.max_len)));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("model spec serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    fn head_input_width(&self) -> usize {
        self.encoders.iter().map(|e| e.hidden_width).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    weight: usize,
    bias: usize,
    fan_in: usize,
    fan_out: usize,
}

impl Linear {
    fn new<R: Rng>(
        p: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let limit = 1.0 / (fan_in as f64).sqrt();
        let weight = p.add_uniform(format!("{name}.weight"), &[fan_in, fan_out], limit, rng);
        let bias = p.add(format!("{name}.bias"), &[fan_out]);
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    fn forward(&self, v: &[f64], x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(&v[self.bias..self.bias + self.fan_out]);
        for (k, xk) in x.iter().enumerate() {
            if *xk == 0.0 {
                continue;
            }
            let row = &v[self.weight + k * self.fan_out..self.weight + (k + 1) * self.fan_out];
            for (yj, wj) in y.iter_mut().zip(row) {
                *yj += xk * wj;
            }
        }
    }

    /// Accumulates weight/bias gradients and writes the input gradient.
    fn backward(&self, v: &[f64], x: &[f64], dy: &[f64], grad: &mut [f64], dx: &mut [f64]) {
        for (gb, d) in grad[self.bias..self.bias + self.fan_out].iter_mut().zip(dy) {
            *gb += d;
        }
        for k in 0..self.fan_in {
            let off = self.weight + k * self.fan_out;
            let row = &v[off..off + self.fan_out];
            dx[k] = row.iter().zip(dy).map(|(w, d)| w * d).sum();
            let xk = x[k];
            if xk != 0.0 {
                for (g, d) in grad[off..off + self.fan_out].iter_mut().zip(dy) {
                    *g += xk * d;
                }
            }
        }
    }
}

/// LSTM with gate blocks ordered `[input, forget, cell, output]`.
#[derive(Clone, Copy, Debug)]
struct Lstm {
    w_ih: usize,
    w_hh: usize,
    bias: usize,
    input: usize,
    hidden: usize,
}

impl Lstm {
    fn new<R: Rng>(p: &mut ParamSet, input: usize, hidden: usize, rng: &mut R) -> Self {
        let g = 4 * hidden;
        let w_ih = p.add_uniform("lstm.w_ih", &[input, g], 1.0 / (input as f64).sqrt(), rng);
        let w_hh = p.add_uniform("lstm.w_hh", &[hidden, g], 1.0 / (hidden as f64).sqrt(), rng);
        let bias = p.add("lstm.bias", &[g]);
        // Forget-gate bias starts at one.
        for v in &mut p.values_mut()[bias + hidden..bias + 2 * hidden] {
            *v = 1.0;
        }
        Lstm {
            w_ih,
            w_hh,
            bias,
            input,
            hidden,
        }
    }

    /// Runs over `steps` (each of width `input`) and returns the per-step
    /// trace; the last `h` is the sequence feature.
    fn forward(&self, v: &[f64], steps: &[&[f64]]) -> LstmTrace {
        let h_n = self.hidden;
        let g_n = 4 * h_n;
        let mut trace = LstmTrace {
            gates: Vec::with_capacity(steps.len()),
            c: Vec::with_capacity(steps.len() + 1),
            h: Vec::with_capacity(steps.len() + 1),
        };
        trace.c.push(vec![0.0; h_n]);
        trace.h.push(vec![0.0; h_n]);
        for x in steps {
            let mut z = v[self.bias..self.bias + g_n].to_vec();
            accumulate_rows(&mut z, x, &v[self.w_ih..], g_n);
            accumulate_rows(&mut z, trace.h.last().unwrap(), &v[self.w_hh..], g_n);
            for j in 0..h_n {
                z[j] = sigmoid(z[j]);
                z[h_n + j] = sigmoid(z[h_n + j]);
                z[2 * h_n + j] = z[2 * h_n + j].tanh();
                z[3 * h_n + j] = sigmoid(z[3 * h_n + j]);
            }
            let c_prev = trace.c.last().unwrap();
            let c: Vec<f64> = (0..h_n)
                .map(|j| z[h_n + j] * c_prev[j] + z[j] * z[2 * h_n + j])
                .collect();
            let h: Vec<f64> = (0..h_n).map(|j| z[3 * h_n + j] * c[j].tanh()).collect();
            trace.gates.push(z);
            trace.c.push(c);
            trace.h.push(h);
        }
        trace
    }

    /// Backpropagation through time from a gradient on the final hidden
    /// state. Returns the gradient for each input step.
    fn backward(
        &self,
        v: &[f64],
        steps: &[&[f64]],
        trace: &LstmTrace,
        dh_last: &[f64],
        grad: &mut [f64],
    ) -> Vec<Vec<f64>> {
        let h_n = self.hidden;
        let g_n = 4 * h_n;
        let mut dh = dh_last.to_vec();
        let mut dc = vec![0.0; h_n];
        let mut dz = vec![0.0; g_n];
        let mut dxs = vec![Vec::new(); steps.len()];
        for t in (0..steps.len()).rev() {
            let gates = &trace.gates[t];
            let c_prev = &trace.c[t];
            let c = &trace.c[t + 1];
            for j in 0..h_n {
                let (i, f, g, o) = (
                    gates[j],
                    gates[h_n + j],
                    gates[2 * h_n + j],
                    gates[3 * h_n + j],
                );
                let tc = c[j].tanh();
                let d_o = dh[j] * tc;
                dc[j] += dh[j] * o * (1.0 - tc * tc);
                dz[j] = dc[j] * g * i * (1.0 - i);
                dz[h_n + j] = dc[j] * c_prev[j] * f * (1.0 - f);
                dz[2 * h_n + j] = dc[j] * i * (1.0 - g * g);
                dz[3 * h_n + j] = d_o * o * (1.0 - o);
                dc[j] *= f;
            }
            for (gb, d) in grad[self.bias..self.bias + g_n].iter_mut().zip(&dz) {
                *gb += d;
            }
            dxs[t] = outer_and_project(&mut grad[self.w_ih..], &v[self.w_ih..], steps[t], &dz, g_n);
            dh = outer_and_project(
                &mut grad[self.w_hh..],
                &v[self.w_hh..],
                &trace.h[t],
                &dz,
                g_n,
            );
        }
        dxs
    }
}

struct LstmTrace {
    gates: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
}

/// `z += x · W` for row-major `W` with rows of width `cols`.
fn accumulate_rows(z: &mut [f64], x: &[f64], w: &[f64], cols: usize) {
    let z = &mut z[..cols];
    let mut k = 0;
    while k + 4 <= x.len() {
        let (x0, x1, x2, x3) = (x[k], x[k + 1], x[k + 2], x[k + 3]);
        let block = &w[k * cols..(k + 4) * cols];
        let (r0, rest) = block.split_at(cols);
        let (r1, rest) = rest.split_at(cols);
        let (r2, r3) = rest.split_at(cols);
        for j in 0..cols {
            z[j] += x0 * r0[j] + x1 * r1[j] + x2 * r2[j] + x3 * r3[j];
        }
        k += 4;
    }
    for (k, xk) in x.iter().enumerate().skip(k) {
        let row = &w[k * cols..(k + 1) * cols];
        for (zj, wj) in z.iter_mut().zip(row) {
            *zj += xk * wj;
        }
    }
}

/// `dW += xᵀ dz` and returns `W dz`.
fn outer_and_project(grad: &mut [f64], w: &[f64], x: &[f64], dz: &[f64], cols: usize) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(k, xk)| {
            let row = &w[k * cols..(k + 1) * cols];
            let g = &mut grad[k * cols..(k + 1) * cols];
            let mut acc = 0.0;
            for ((gj, wj), dj) in g.iter_mut().zip(row).zip(dz) {
                *gj += xk * dj;
                acc += wj * dj;
            }
            acc
        })
        .collect()
}

/// Logistic function, kept strictly inside (0, 1) for finite inputs.
pub fn sigmoid(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

#[derive(Clone, Copy, Debug)]
enum Head {
    Recurrent {
        lstm: Lstm,
        out: Linear,
    },
    Feedforward {
        hidden1: Linear,
        hidden2: Linear,
        out: Linear,
    },
}

/// Features the head consumes.
#[derive(Clone, Debug, PartialEq)]
pub enum HeadInput {
    /// Token features `[batch, seq, hidden]` and the unmasked length of each row.
    Sequence {
        tokens: Array3<f64>,
        lengths: Vec<usize>,
    },
    /// Pooled vectors, concatenated across encoders, `[batch, width]`.
    Pooled(Array2<f64>),
}

impl HeadInput {
    pub fn batch_size(&self) -> usize {
        match self {
            HeadInput::Sequence { tokens, .. } => tokens.dim().0,
            HeadInput::Pooled(x) => x.nrows(),
        }
    }
}

/// Gradient with respect to a [`HeadInput`].
#[derive(Clone, Debug, PartialEq)]
pub enum HeadInputGrad {
    Sequence(Array3<f64>),
    Pooled(Array2<f64>),
}

/// Per-row activations recorded by a head forward pass.
pub struct HeadTrace {
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
    rows: Vec<RowTrace>,
}

enum RowTrace {
    Recurrent {
        lstm: LstmTrace,
        mask: Vec<f64>,
        dropped: Vec<f64>,
    },
    Feedforward {
        a1: Vec<f64>,
        mask1: Vec<f64>,
        d1: Vec<f64>,
        a2: Vec<f64>,
        mask2: Vec<f64>,
        d2: Vec<f64>,
    },
}

/// Inverted-dropout multipliers: `0` or `1 / (1 - rate)`.
fn dropout_mask(n: usize, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Vec<f64> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            (0..n)
                .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                .collect()
        }
        _ => vec![1.0; n],
    }
}

fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// A classifier: encoder backbone(s) plus a trainable head.
pub struct Classifier {
    spec: ModelSpec,
    encoders: Vec<Box<dyn Encoder>>,
    head: Head,
    params: ParamSet,
    mode: Mode,
}

impl fmt::Debug for Classifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Classifier")
            .field("spec", &self.spec)
            .field("head_params", &self.params.len())
            .field("mode", &self.mode)
            .finish()
    }
}

/// Builds the encoders named by `spec` and initializes the head from `seed`.
pub fn build_model(spec: ModelSpec, seed: u64, registry: &EncoderRegistry) -> Result<Classifier> {
    spec.validate()?;
    let encoders = spec
        .encoders
        .iter()
        .map(|e| registry.load(e, spec.max_len))
        .collect::<Result<Vec<_>>>()?;
    Classifier::from_encoders(spec, encoders, seed)
}

impl Classifier {
    pub fn from_encoders(
        spec: ModelSpec,
        encoders: Vec<Box<dyn Encoder>>,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        if encoders.len() != spec.encoders.len() {
            return Err(Error::Spec(format!(
                "spec lists {} encoders, {} supplied",
                spec.encoders.len(),
                encoders.len()
            )));
        }
        for (e, s) in encoders.iter().zip(&spec.encoders) {
            if e.spec() != s || e.max_len() != spec.max_len {
                return Err(Error::Spec(format!(
                    "supplied {} encoder does not match the spec",
                    s.family
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let width = spec.head_input_width();
        let head = match spec.variant {
            HeadVariant::EncLstm => {
                let lstm = Lstm::new(&mut params, width, spec.lstm_units, &mut rng);
                let out = Linear::new(&mut params, "out", spec.lstm_units, 1, &mut rng);
                Head::Recurrent { lstm, out }
            }
            HeadVariant::EncDense | HeadVariant::Hybrid => {
                let hidden1 =
                    Linear::new(&mut params, "dense1", width, spec.dense1_units, &mut rng);
                let hidden2 = Linear::new(
                    &mut params,
                    "dense2",
                    spec.dense1_units,
                    spec.dense2_units,
                    &mut rng,
                );
                let out = Linear::new(&mut params, "out", spec.dense2_units, 1, &mut rng);
                Head::Feedforward {
                    hidden1,
                    hidden2,
                    out,
                }
            }
        };
        Ok(Classifier {
            spec,
            encoders,
            head,
            params,
            mode: Mode::Eval,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Head parameters.
    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn encoders(&self) -> &[Box<dyn Encoder>] {
        &self.encoders
    }

    pub fn encoders_mut(&mut self) -> &mut [Box<dyn Encoder>] {
        &mut self.encoders
    }

    /// Whether encoder `i` is updated during training.
    pub fn encoder_trainable(&self, i: usize) -> bool {
        self.spec.fine_tune_encoders && self.encoders[i].params().is_some()
    }

    /// One batch per encoder, each from that encoder's tokenizer.
    pub fn tokenize(&self, texts: &[&str]) -> Result<Vec<EncodedBatch>> {
        self.encoders.iter().map(|e| e.tokenize(texts)).collect()
    }

    fn check_batches(&self, batches: &[EncodedBatch]) -> Result<usize> {
        if batches.len() != self.encoders.len() {
            return Err(Error::Shape(format!(
                "model has {} encoders, got {} batches",
                self.encoders.len(),
                batches.len()
            )));
        }
        let b = batches[0].batch_size();
        for batch in batches {
            if batch.seq_len() != self.spec.max_len {
                return Err(Error::Shape(format!(
                    "batch length {} does not match model length {}",
                    batch.seq_len(),
                    self.spec.max_len
                )));
            }
            if batch.batch_size() != b {
                return Err(Error::Shape("per-encoder batches differ in size".into()));
            }
        }
        Ok(b)
    }

    /// Runs the encoders and assembles the head's input.
    pub fn head_input(&self, batches: &[EncodedBatch]) -> Result<(HeadInput, Vec<EncoderOutput>)> {
        self.check_batches(batches)?;
        let outputs = self
            .encoders
            .iter()
            .zip(batches)
            .map(|(e, b)| e.encode(b))
            .collect::<Result<Vec<_>>>()?;
        let input = match self.head {
            Head::Recurrent { .. } => HeadInput::Sequence {
                tokens: outputs[0].token_features.clone(),
                lengths: batches[0].row_lengths(),
            },
            Head::Feedforward { .. } => {
                let views: Vec<_> = outputs.iter().map(|o| o.pooled.view()).collect();
                let joined =
                    ndarray::concatenate(ndarray::Axis(1), &views).expect("equal batch sizes");
                HeadInput::Pooled(joined.as_standard_layout().into_owned())
            }
        };
        Ok((input, outputs))
    }

    /// Head forward pass. Dropout is applied only in train mode, with masks
    /// drawn from `rng` in a fixed order.
    pub fn head_forward(&self, input: &HeadInput, rng: &mut ChaCha8Rng) -> Result<HeadTrace> {
        self.head_forward_with(self.params.values(), input, rng)
    }

    /// [`Self::head_forward`] with `values` in place of the head parameters.
    /// `values` must have the layout of [`Self::params`].
    pub fn head_forward_with(
        &self,
        values: &[f64],
        input: &HeadInput,
        rng: &mut ChaCha8Rng,
    ) -> Result<HeadTrace> {
        if values.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "got {} head parameter values, head has {}",
                values.len(),
                self.params.len()
            )));
        }
        let v = values;
        let train = self.mode == Mode::Train;
        let n = input.batch_size();
        let mut trace = HeadTrace {
            probs: Vec::with_capacity(n),
            logits: Vec::with_capacity(n),
            rows: Vec::with_capacity(n),
        };
        for b in 0..n {
            let mut logit = [0.0];
            let row = match (&self.head, input) {
                (Head::Recurrent { lstm, out }, HeadInput::Sequence { tokens, lengths }) => {
                    if tokens.dim().2 != lstm.input {
                        return Err(Error::Shape(format!(
                            "token features have width {}, head expects {}",
                            tokens.dim().2,
                            lstm.input
                        )));
                    }
                    let row = tokens.index_axis(ndarray::Axis(0), b);
                    let row = row.as_slice().expect("standard layout");
                    let steps: Vec<&[f64]> = row.chunks(lstm.input).take(lengths[b]).collect();
                    let lt = lstm.forward(v, &steps);
                    let mask =
                        dropout_mask(lstm.hidden, self.spec.dropout_a, train.then_some(&mut *rng));
                    let dropped: Vec<f64> =
                        lt.h.last()
                            .unwrap()
                            .iter()
                            .zip(&mask)
                            .map(|(h, m)| h * m)
                            .collect();
                    out.forward(v, &dropped, &mut logit);
                    RowTrace::Recurrent {
                        lstm: lt,
                        mask,
                        dropped,
                    }
                }
                (
                    Head::Feedforward {
                        hidden1,
                        hidden2,
                        out,
                    },
                    HeadInput::Pooled(x),
                ) => {
                    if x.ncols() != hidden1.fan_in {
                        return Err(Error::Shape(format!(
                            "pooled features have width {}, head expects {}",
                            x.ncols(),
                            hidden1.fan_in
                        )));
                    }
                    let xr = x.row(b).to_vec();
                    let xr = xr.as_slice();
                    let mut a1 = vec![0.0; hidden1.fan_out];
                    hidden1.forward(v, xr, &mut a1);
                    relu_inplace(&mut a1);
                    let mask1 =
                        dropout_mask(a1.len(), self.spec.dropout_a, train.then_some(&mut *rng));
                    let d1: Vec<f64> = a1.iter().zip(&mask1).map(|(a, m)| a * m).collect();
                    let mut a2 = vec![0.0; hidden2.fan_out];
                    hidden2.forward(v, &d1, &mut a2);
                    relu_inplace(&mut a2);
                    let mask2 =
                        dropout_mask(a2.len(), self.spec.dropout_b, train.then_some(&mut *rng));
                    let d2: Vec<f64> = a2.iter().zip(&mask2).map(|(a, m)| a * m).collect();
                    out.forward(v, &d2, &mut logit);
                    RowTrace::Feedforward {
                        a1,
                        mask1,
                        d1,
                        a2,
                        mask2,
                        d2,
                    }
                }
                _ => return Err(Error::Shape("head input kind does not match head".into())),
            };
            if !logit[0].is_finite() {
                return Err(Error::Shape(format!(
                    "non-finite pre-activation in row {b}"
                )));
            }
            trace.logits.push(logit[0]);
            trace.probs.push(sigmoid(logit[0]));
            trace.rows.push(row);
        }
        Ok(trace)
    }

    /// Backward pass from `d loss / d logit` per row. Returns the head
    /// parameter gradient and the gradient with respect to the head input.
    pub fn head_backward(
        &self,
        input: &HeadInput,
        trace: &HeadTrace,
        dlogits: &[f64],
    ) -> (Vec<f64>, HeadInputGrad) {
        let v = self.params.values();
        let mut grad = self.params.zeros_like();
        let mut dinput = match input {
            HeadInput::Sequence { tokens, .. } => {
                HeadInputGrad::Sequence(Array3::zeros(tokens.dim()))
            }
            HeadInput::Pooled(x) => HeadInputGrad::Pooled(Array2::zeros(x.dim())),
        };
        for (b, row) in trace.rows.iter().enumerate() {
            let dy = [dlogits[b]];
            match (&self.head, row, input, &mut dinput) {
                (
                    Head::Recurrent { lstm, out },
                    RowTrace::Recurrent {
                        lstm: lt,
                        mask,
                        dropped,
                    },
                    HeadInput::Sequence { tokens, lengths },
                    HeadInputGrad::Sequence(dtok),
                ) => {
                    let mut dh = vec![0.0; lstm.hidden];
                    out.backward(v, dropped, &dy, &mut grad, &mut dh);
                    for (g, m) in dh.iter_mut().zip(mask) {
                        *g *= m;
                    }
                    let row = tokens.index_axis(ndarray::Axis(0), b);
                    let row = row.as_slice().expect("standard layout");
                    let steps: Vec<&[f64]> = row.chunks(lstm.input).take(lengths[b]).collect();
                    let dxs = lstm.backward(v, &steps, lt, &dh, &mut grad);
                    for (t, dx) in dxs.iter().enumerate() {
                        for (k, g) in dx.iter().enumerate() {
                            dtok[[b, t, k]] = *g;
                        }
                    }
                }
                (
                    Head::Feedforward {
                        hidden1,
                        hidden2,
                        out,
                    },
                    RowTrace::Feedforward {
                        a1,
                        mask1,
                        d1,
                        a2,
                        mask2,
                        d2,
                    },
                    HeadInput::Pooled(x),
                    HeadInputGrad::Pooled(dx),
                ) => {
                    let mut dd2 = vec![0.0; d2.len()];
                    out.backward(v, d2, &dy, &mut grad, &mut dd2);
                    let da2: Vec<f64> = dd2
                        .iter()
                        .zip(mask2)
                        .zip(a2)
                        .map(|((g, m), a)| if *a > 0.0 { g * m } else { 0.0 })
                        .collect();
                    let mut dd1 = vec![0.0; d1.len()];
                    hidden2.backward(v, d1, &da2, &mut grad, &mut dd1);
                    let da1: Vec<f64> = dd1
                        .iter()
                        .zip(mask1)
                        .zip(a1)
                        .map(|((g, m), a)| if *a > 0.0 { g * m } else { 0.0 })
                        .collect();
                    let xr = x.row(b);
                    let mut dxr = vec![0.0; hidden1.fan_in];
                    hidden1.backward(v, &xr.to_vec(), &da1, &mut grad, &mut dxr);
                    for (k, g) in dxr.into_iter().enumerate() {
                        dx[[b, k]] = g;
                    }
                }
                _ => unreachable!("trace produced by head_forward on the same input"),
            }
        }
        (grad, dinput)
    }

    /// Encoder parameter gradients given the head-input gradient. Frozen
    /// encoders yield `None`.
    pub fn encoder_backward(
        &self,
        batches: &[EncodedBatch],
        dinput: &HeadInputGrad,
    ) -> Result<Vec<Option<Vec<f64>>>> {
        let mut col = 0;
        self.encoders
            .iter()
            .enumerate()
            .map(|(i, enc)| {
                let width = enc.hidden_width();
                let start = col;
                col += width;
                if !self.encoder_trainable(i) {
                    return Ok(None);
                }
                let g = match dinput {
                    HeadInputGrad::Sequence(dt) => enc.backward(&batches[i], Some(dt), None)?,
                    HeadInputGrad::Pooled(dp) => {
                        let part = dp.slice(ndarray::s![.., start..start + width]).to_owned();
                        enc.backward(&batches[i], None, Some(&part))?
                    }
                };
                Ok(Some(g))
            })
            .collect()
    }

    /// Probabilities of the fake class. Dropout is active only in train
    /// mode, using `rng`.
    pub fn forward_with_rng(
        &self,
        batches: &[EncodedBatch],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        let (input, _) = self.head_input(batches)?;
        Ok(self.head_forward(&input, rng)?.probs)
    }

    /// Probabilities of the fake class. In eval mode this is a pure function
    /// of the parameters and the batch.
    pub fn forward(&self, batches: &[EncodedBatch]) -> Result<Vec<f64>> {
        self.forward_with_rng(batches, &mut ChaCha8Rng::seed_from_u64(0))
    }

    pub fn predict(&self, batches: &[EncodedBatch], threshold: f64) -> Result<Vec<Label>> {
        labels_from_probs(&self.forward(batches)?, threshold)
    }

    /// Saves the spec, the encoder specs and all parameters into `dir`.
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let hash = self.spec.hash();
        let spec_file = SpecFile {
            schema_version: SCHEMA_VERSION,
            spec_hash: hash.clone(),
            model: self.spec.clone(),
        };
        write_json(&dir.join(MODEL_SPEC_FILE), &spec_file)?;
        let enc_file = EncodersFile {
            schema_version: SCHEMA_VERSION,
            encoders: self.spec.encoders.clone(),
        };
        write_json(&dir.join(ENCODERS_FILE), &enc_file)?;

        let mut tensors = vec![("head.".to_string(), &self.params)];
        for (i, enc) in self.encoders.iter().enumerate() {
            if let Some(p) = enc.params() {
                tensors.push((format!("encoder{i}."), p));
            }
        }
        let path = dir.join(PARAMS_FILE);
        let mut buf = Vec::new();
        params::write_container(&mut buf, &hash, &tensors).map_err(|e| Error::io(&path, e))?;
        std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))
    }

    /// Loads a checkpoint written by [`Classifier::save_checkpoint`],
    /// refusing it if the stored hash does not match the spec on disk.
    pub fn load_checkpoint(dir: impl AsRef<Path>, registry: &EncoderRegistry) -> Result<Self> {
        let dir = dir.as_ref();
        let spec_file: SpecFile = read_json(&dir.join(MODEL_SPEC_FILE))?;
        let enc_file: EncodersFile = read_json(&dir.join(ENCODERS_FILE))?;
        let spec = spec_file.model;
        let hash = spec.hash();
        if hash != spec_file.spec_hash {
            return Err(Error::Checkpoint(format!(
                "spec hash mismatch: file records {}, spec hashes to {hash}",
                spec_file.spec_hash
            )));
        }
        if enc_file.encoders != spec.encoders {
            return Err(Error::Checkpoint(
                "encoder specs disagree with the model spec".into(),
            ));
        }
        let path = dir.join(PARAMS_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (stored_hash, stored) = params::read_container(bytes.as_slice())?;
        if stored_hash != hash {
            return Err(Error::Checkpoint(format!(
                "spec hash mismatch: parameters were saved for {stored_hash}, spec hashes to {hash}"
            )));
        }
        let mut model = build_model(spec, 0, registry)?;
        params::load_into(&mut model.params, "head.", &stored)?;
        for (i, enc) in model.encoders.iter_mut().enumerate() {
            let prefix = format!("encoder{i}.");
            if let Some(p) = enc.params_mut() {
                if stored.iter().any(|t| t.name.starts_with(&prefix)) {
                    params::load_into(p, &prefix, &stored)?;
                }
            }
        }
        Ok(model)
    }
}

pub const MODEL_SPEC_FILE: &str = "model_spec.json";
pub const ENCODERS_FILE: &str = "encoders.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Serialize, Deserialize)]
struct SpecFile {
    schema_version: u32,
    spec_hash: String,
    model: ModelSpec,
}

#[derive(Serialize, Deserialize)]
struct EncodersFile {
    schema_version: u32,
    encoders: Vec<EncoderSpec>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// `Fake` iff `p >= threshold`.
pub fn labels_from_probs(probs: &[f64], threshold: f64) -> Result<Vec<Label>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "threshold must be in (0, 1), got {threshold}"
        )));
    }
    Ok(probs
        .iter()
        .map(|p| {
            if *p >= threshold {
                Label::Fake
            } else {
                Label::Real
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk(model: Architecture, d: usize, max_len: usize) -> Classifier {
        let spec = ModelSpec::architecture(model, model.test_encoders(d, 11), max_len);
        build_model(spec, 5, &EncoderRegistry::default()).unwrap()
    }

    const TEXTS: [&str; 4] = [
        "masks reduce spread",
        "alcohol kills virus",
        "",
        "vaccine trial results published today",
    ];

    #[test]
    fn variant_names_resolve() {
        for m in Architecture::ALL {
            assert_eq!(Architecture::parse(m.key()).unwrap(), m);
        }
        let err = Architecture::parse("xlnet").unwrap_err();
        assert!(err
            .to_string()
            .contains("bert_lstm, bert_dense, albert, roberta, hybrid"));
        assert_eq!(Architecture::Albert.head(), HeadVariant::EncLstm);
        assert_eq!(Architecture::Roberta.head(), HeadVariant::EncLstm);
    }

    #[test]
    fn spec_validation() {
        let mut spec =
            ModelSpec::architecture(Architecture::Hybrid, vec![EncoderSpec::test(4, 0)], 8);
        assert!(matches!(spec.validate(), Err(Error::Spec(_))));
        spec.encoders.push(EncoderSpec::test(4, 1));
        spec.validate().unwrap();
        spec.dropout_a = 1.0;
        assert!(spec.validate().is_err());
        let spec = ModelSpec::architecture(
            Architecture::BertDense,
            Architecture::BertDense.test_encoders(4, 0),
            8,
        );
        assert_eq!((spec.dropout_a, spec.dropout_b), (0.3, 0.2));
        let spec = ModelSpec::architecture(
            Architecture::Roberta,
            Architecture::Roberta.test_encoders(4, 0),
            8,
        );
        assert_eq!(spec.dropout_a, 0.2);
    }

    #[test]
    fn hybrid_concatenates_pooled_widths() {
        let m = desk(Architecture::Hybrid, 32, 8);
        assert_eq!(
            m.params().entry("dense1.weight").unwrap().shape,
            vec![64, 128]
        );
        assert_eq!(
            m.params().entry("dense2.weight").unwrap().shape,
            vec![128, 64]
        );
        assert_eq!(m.params().entry("out.weight").unwrap().shape, vec![64, 1]);
    }

    #[test]
    fn lstm_head_has_128_units() {
        let m = desk(Architecture::BertLstm, 16, 8);
        assert_eq!(m.params().entry("lstm.w_hh").unwrap().shape, vec![128, 512]);
        assert_eq!(m.params().entry("lstm.w_ih").unwrap().shape, vec![16, 512]);
        assert_eq!(m.params().entry("out.weight").unwrap().shape, vec![128, 1]);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = desk(Architecture::BertDense, 8, 8);
        let b = desk(Architecture::BertDense, 8, 8);
        assert_eq!(a.params(), b.params());
        let spec = ModelSpec::architecture(
            Architecture::BertDense,
            Architecture::BertDense.test_encoders(8, 11),
            8,
        );
        let c = build_model(spec, 6, &EncoderRegistry::default()).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn zeroed_output_layer_gives_one_half() {
        for m in Architecture::ALL {
            let mut model = desk(m, 8, 10);
            for name in ["out.weight", "out.bias"] {
                model.params_mut().tensor_mut(name).unwrap().fill(0.0);
            }
            let batches = model.tokenize(&TEXTS).unwrap();
            let probs = model.forward(&batches).unwrap();
            assert!(probs.iter().all(|p| *p == 0.5));
            let labels = model.predict(&batches, 0.5).unwrap();
            assert!(labels.iter().all(|l| *l == Label::Fake));
        }
    }

    #[test]
    fn eval_forward_is_deterministic_and_in_range() {
        for m in Architecture::ALL {
            let model = desk(m, 8, 10);
            let batches = model.tokenize(&TEXTS).unwrap();
            let a = model.forward(&batches).unwrap();
            let b = model.forward(&batches).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.len(), 4);
            assert!(a.iter().all(|p| p.is_finite() && *p > 0.0 && *p < 1.0));
        }
    }

    #[test]
    fn train_mode_applies_dropout() {
        let mut model = desk(Architecture::BertDense, 8, 10);
        let batches = model.tokenize(&TEXTS).unwrap();
        let eval = model.forward(&batches).unwrap();
        model.set_mode(Mode::Train);
        let train = model
            .forward_with_rng(&batches, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert_ne!(eval, train);
    }

    #[test]
    fn threshold_rule() {
        let labels = labels_from_probs(&[0.2, 0.5, 0.9], 0.5).unwrap();
        assert_eq!(labels, vec![Label::Real, Label::Fake, Label::Fake]);
        assert!(labels_from_probs(&[0.1, 0.3], 0.5)
            .unwrap()
            .iter()
            .all(|l| *l == Label::Real));
        assert!(labels_from_probs(&[0.1], 1.0).is_err());
    }

    #[test]
    fn length_mismatch_is_a_shape_error() {
        let model = desk(Architecture::BertDense, 8, 10);
        let wrong =
            vec![
                crate::encoding::tokenize_batch(&["x"], &crate::encoding::HashTokenizer, 9)
                    .unwrap(),
            ];
        assert!(matches!(model.forward(&wrong), Err(Error::Shape(_))));
        assert!(matches!(model.forward(&[]), Err(Error::Shape(_))));
    }

    #[test]
    fn pooled_heads_ignore_padding_contents() {
        for m in [
            Architecture::BertDense,
            Architecture::Hybrid,
            Architecture::BertLstm,
        ] {
            let model = desk(m, 8, 12);
            let batches = model.tokenize(&TEXTS).unwrap();
            let mut altered = batches.clone();
            for b in &mut altered {
                let mask = b.attention_mask.clone();
                for ((i, t), id) in b.token_ids.indexed_iter_mut() {
                    if mask[[i, t]] == 0 {
                        *id = ((i * 31 + t * 7) % 4000 + 3) as u32;
                    }
                }
            }
            assert_eq!(
                model.forward(&batches).unwrap(),
                model.forward(&altered).unwrap()
            );
        }
    }

    #[test]
    fn checkpoint_round_trip_and_hash_guard() {
        let dir = tempfile::tempdir().unwrap();
        let model = desk(Architecture::Hybrid, 6, 8);
        model.save_checkpoint(dir.path()).unwrap();
        let reg = EncoderRegistry::default();
        let back = Classifier::load_checkpoint(dir.path(), &reg).unwrap();
        let batches = model.tokenize(&TEXTS).unwrap();
        assert_eq!(
            model.forward(&batches).unwrap(),
            back.forward(&batches).unwrap()
        );

        // Edit the spec without updating the recorded hash.
        let path = dir.path().join(MODEL_SPEC_FILE);
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"dense2_units\": 64", "\"dense2_units\": 65");
        std::fs::write(&path, text).unwrap();
        let err = Classifier::load_checkpoint(dir.path(), &reg).unwrap_err();
        assert!(err.to_string().contains("hash mismatch"), "{err}");
    }
}
