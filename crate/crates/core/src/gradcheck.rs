//! Central finite-difference check of head gradients.
//!
//! The loss is BCE over the head output with the encoder features held
//! fixed. Dropout stays on (train mode) with the same mask draw for every
//! evaluation. The loss is then piecewise smooth in each parameter: ReLU
//! units add kinks. When a perturbation straddles a kink, the step is
//! shrunk until it no longer does.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Label;
use crate::encoding::EncodedBatch;
use crate::error::Result;
use crate::models::{Classifier, HeadInput, Mode};
use crate::training::{bce_logit_grad, bce_loss};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Perturbation for `(L(θ + h) - L(θ - h)) / 2h`.
    pub step: f64,
    /// Smallest step tried when the first one straddles a kink.
    pub min_step: f64,
    /// Bound on `|a - n| / max(|a|, |n|)`.
    pub rel_tol: f64,
    /// When `max(|a|, |n|)` is below this, `|a - n|` is compared to
    /// `abs_tol` instead.
    pub floor: f64,
    pub abs_tol: f64,
    pub dropout_seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            min_step: 1e-7,
            rel_tol: 1e-4,
            floor: 1e-7,
            abs_tol: 1e-9,
            dropout_seed: 11,
        }
    }
}

impl GradCheckConfig {
    /// Whether `analytic` and `numeric` agree, with the relative error when
    /// the pair is above the floor.
    pub fn agrees(&self, analytic: f64, numeric: f64) -> (bool, Option<f64>) {
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        if scale < self.floor {
            (diff <= self.abs_tol, None)
        } else {
            let rel = diff / scale;
            (rel <= self.rel_tol, Some(rel))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub numeric: f64,
    /// Step that produced `numeric`.
    pub step: f64,
}

/// Central difference of `f` at `x`, where `fx = f(x)`.
///
/// The configured step is used unless it disagrees with `analytic` and the
/// forward and backward one-sided slopes differ by more than half the
/// disagreement, the signature of a kink inside `[x - h, x + h]`. The step
/// is then divided by ten, down to `min_step`. On a smooth function with a
/// wrong `analytic` the one-sided slopes agree, so no refinement happens.
pub fn central_difference(
    mut f: impl FnMut(f64) -> Result<f64>,
    x: f64,
    fx: f64,
    analytic: f64,
    config: &GradCheckConfig,
) -> Result<Estimate> {
    let mut h = config.step;
    loop {
        let up = f(x + h)?;
        let down = f(x - h)?;
        let numeric = (up - down) / (2.0 * h);
        let forward = (up - fx) / h;
        let backward = (fx - down) / h;
        let straddles = (forward - backward).abs() > 0.5 * (numeric - analytic).abs();
        let next = h / 10.0;
        if config.agrees(analytic, numeric).0 || !straddles || next < config.min_step {
            return Ok(Estimate { numeric, step: h });
        }
        h = next;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failed: usize,
    /// Entries whose estimate needed a step below the configured one.
    pub refined: usize,
    /// Largest relative error among entries above the floor.
    pub worst_relative: f64,
    /// The first few failures.
    pub mismatches: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failed == 0
    }
}

fn loss_at(
    model: &Classifier,
    values: &[f64],
    input: &HeadInput,
    labels: &[Label],
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trace = model.head_forward_with(values, input, &mut rng)?;
    bce_loss(&trace.probs, labels)
}

/// Compares the analytic head gradient with central differences on every
/// head parameter. The model's parameters and mode are restored.
///
/// Parameters are split across the available cores; the report does not
/// depend on the thread count.
pub fn check_head_gradients(
    model: &mut Classifier,
    batches: &[EncodedBatch],
    labels: &[Label],
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let previous = model.mode();
    model.set_mode(Mode::Train);
    let result = run(model, batches, labels, config);
    model.set_mode(previous);
    result
}

struct Outcome {
    index: usize,
    analytic: f64,
    estimate: Estimate,
}

fn numeric_range(
    model: &Classifier,
    input: &HeadInput,
    labels: &[Label],
    analytic: &[f64],
    base_loss: f64,
    range: Range<usize>,
    config: &GradCheckConfig,
) -> Result<Vec<Outcome>> {
    let mut values = model.params().values().to_vec();
    let mut out = Vec::with_capacity(range.len());
    for i in range {
        let original = values[i];
        let estimate = central_difference(
            |x| {
                values[i] = x;
                loss_at(model, &values, input, labels, config.dropout_seed)
            },
            original,
            base_loss,
            analytic[i],
            config,
        );
        values[i] = original;
        out.push(Outcome {
            index: i,
            analytic: analytic[i],
            estimate: estimate?,
        });
    }
    Ok(out)
}

fn run(
    model: &Classifier,
    batches: &[EncodedBatch],
    labels: &[Label],
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (input, _) = model.head_input(batches)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.dropout_seed);
    let trace = model.head_forward(&input, &mut rng)?;
    let dlogits = bce_logit_grad(&trace.probs, labels)?;
    let (analytic, _) = model.head_backward(&input, &trace, &dlogits);
    let base_loss = bce_loss(&trace.probs, labels)?;

    let total = model.params().len();
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(total.max(1));
    let chunk = total.div_ceil(threads).max(1);
    let outcomes = std::thread::scope(|scope| {
        let workers: Vec<_> = (0..total)
            .step_by(chunk)
            .map(|lo| {
                let (input, analytic) = (&input, &analytic);
                scope.spawn(move || {
                    numeric_range(
                        model,
                        input,
                        labels,
                        analytic,
                        base_loss,
                        lo..(lo + chunk).min(total),
                        config,
                    )
                })
            })
            .collect();
        workers
            .into_iter()
            .map(|w| w.join().expect("gradient check worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?;

    let entries = model.params().entries();
    let mut report = GradCheckReport::default();
    for Outcome {
        index,
        analytic: a,
        estimate,
    } in outcomes.into_iter().flatten()
    {
        let numeric = estimate.numeric;
        let (ok, rel) = config.agrees(a, numeric);
        if let Some(rel) = rel {
            report.worst_relative = report.worst_relative.max(rel);
        }
        report.checked += 1;
        if estimate.step < config.step {
            report.refined += 1;
        }
        if !ok {
            report.failed += 1;
            if report.mismatches.len() < 5 {
                let entry = entries
                    .iter()
                    .find(|e| e.range().contains(&index))
                    .expect("index within a tensor");
                report.mismatches.push(Mismatch {
                    tensor: entry.name.clone(),
                    index: index - entry.offset,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::EncoderRegistry;
    use crate::models::{build_model, Architecture, ModelSpec};

    #[test]
    fn restores_parameters_and_mode() {
        let v = Architecture::BertDense;
        let spec = ModelSpec::architecture(v, v.test_encoders(4, 1), 6);
        let mut model = build_model(spec, 1, &EncoderRegistry::default()).unwrap();
        let before = model.params().values().to_vec();
        let batches = model.tokenize(&["a b", "c"]).unwrap();
        let report = check_head_gradients(
            &mut model,
            &batches,
            &[Label::Real, Label::Fake],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.checked, before.len());
        assert_eq!(model.params().values(), before.as_slice());
        assert_eq!(model.mode(), Mode::Eval);
    }

    #[test]
    fn flags_disagreement_from_a_coarse_step() {
        let v = Architecture::BertDense;
        let spec = ModelSpec::architecture(v, v.test_encoders(4, 1), 6);
        let mut model = build_model(spec, 1, &EncoderRegistry::default()).unwrap();
        let batches = model.tokenize(&["a b", "c"]).unwrap();
        // A step far too large for the curvature breaks agreement.
        let config = GradCheckConfig {
            step: 5.0,
            min_step: 5.0,
            ..GradCheckConfig::default()
        };
        let report =
            check_head_gradients(&mut model, &batches, &[Label::Real, Label::Fake], &config)
                .unwrap();
        assert!(!report.passed());
        assert!(!report.mismatches.is_empty());
    }

    #[test]
    fn refines_the_step_across_a_kink() {
        let kink = 3e-5;
        let f = |x: f64| Ok((x - kink).abs());
        let config = GradCheckConfig::default();
        let e = central_difference(f, 0.0, kink, -1.0, &config).unwrap();
        assert_eq!(e.step, 1e-5);
        assert!((e.numeric + 1.0).abs() < 1e-9, "{e:?}");
    }

    #[test]
    fn does_not_refine_a_smooth_mismatch() {
        let f = |x: f64| Ok(x * x);
        let config = GradCheckConfig::default();
        let e = central_difference(f, 1.0, 1.0, 3.0, &config).unwrap();
        assert_eq!(e.step, config.step);
        assert!((e.numeric - 2.0).abs() < 1e-9);
        assert!(!config.agrees(3.0, e.numeric).0);
    }
}
