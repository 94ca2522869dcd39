//! Analytic head gradients against central finite differences, for every
//! architecture over test encoders (d = 16, T = 8, B = 2).

use claimcheck_core::corpus::Label;
use claimcheck_core::encoding::EncoderRegistry;
use claimcheck_core::gradcheck::{check_head_gradients, GradCheckConfig};
use claimcheck_core::models::{build_model, Architecture, ModelSpec};

fn assert_variant(variant: Architecture) {
    let offset = Architecture::ALL
        .iter()
        .position(|m| *m == variant)
        .unwrap() as u64;
    let spec = ModelSpec::architecture(variant, variant.test_encoders(16, 5 + offset), 8);
    let mut model = build_model(spec, 21 + offset, &EncoderRegistry::default()).unwrap();
    let batches = model.tokenize(&["masks", "alcohol kills virus"]).unwrap();
    assert_eq!(batches[0].seq_len(), 8);
    let total = model.params().len();
    let report = check_head_gradients(
        &mut model,
        &batches,
        &[Label::Real, Label::Fake],
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert_eq!(report.checked, total);
    assert!(
        report.passed(),
        "{}: {} of {} entries disagree (worst relative error {:e}): {:?}",
        variant.key(),
        report.failed,
        report.checked,
        report.worst_relative,
        report.mismatches
    );
}

#[test]
fn bert_lstm_head_gradients() {
    assert_variant(Architecture::BertLstm);
}

#[test]
fn bert_dense_head_gradients() {
    assert_variant(Architecture::BertDense);
}

#[test]
fn albert_head_gradients() {
    assert_variant(Architecture::Albert);
}

#[test]
fn roberta_head_gradients() {
    assert_variant(Architecture::Roberta);
}

#[test]
fn hybrid_head_gradients() {
    assert_variant(Architecture::Hybrid);
}
