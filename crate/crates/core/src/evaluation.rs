//! Confusion matrices, per-class metrics, evaluation reports and the
//! comparison tables built from them.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::models::Architecture;
use crate::SCHEMA_VERSION;

const REFERENCE_ROWS: &str = include_str!("../data/reference_rows.csv");

/// 2×2 counts indexed `[gold][predicted]`, class 0 = real, 1 = fake.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 2]; 2],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; 2]; 2]) -> Self {
        ConfusionMatrix { counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        self.counts[0][0] + self.counts[1][1]
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.trace() as f64 / n as f64,
        }
    }

    pub fn row_sum(&self, gold: usize) -> u64 {
        self.counts[gold].iter().sum()
    }

    pub fn column_sum(&self, predicted: usize) -> u64 {
        self.counts[0][predicted] + self.counts[1][predicted]
    }

    /// Matrix with the two class labels exchanged.
    pub fn swapped(&self) -> Self {
        let c = self.counts;
        ConfusionMatrix {
            counts: [[c[1][1], c[1][0]], [c[0][1], c[0][0]]],
        }
    }

    /// `,pred_real,pred_fake` header then one row per gold class.
    pub fn to_csv(&self) -> String {
        let c = self.counts;
        format!(
            "gold\\predicted,real,fake\nreal,{},{}\nfake,{},{}\n",
            c[0][0], c[0][1], c[1][0], c[1][1]
        )
    }
}

/// Counts `[gold][predicted]` over paired label vectors.
pub fn confusion(gold: &[Label], predicted: &[Label]) -> Result<ConfusionMatrix> {
    if gold.len() != predicted.len() {
        return Err(Error::Shape(format!(
            "{} gold labels vs {} predictions",
            gold.len(),
            predicted.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::Precondition("confusion over zero items".into()));
    }
    let mut cm = ConfusionMatrix::default();
    for (g, p) in gold.iter().zip(predicted) {
        cm.counts[g.index()][p.index()] += 1;
    }
    Ok(cm)
}

/// Like [`confusion`] but over raw integer labels, rejecting values other
/// than 0 and 1.
pub fn confusion_from_indices(gold: &[usize], predicted: &[usize]) -> Result<ConfusionMatrix> {
    let convert = |v: &[usize]| -> Result<Vec<Label>> {
        v.iter()
            .map(|x| {
                Label::from_index(*x)
                    .ok_or_else(|| Error::Data(format!("label {x} outside {{0, 1}}")))
            })
            .collect()
    };
    confusion(&convert(gold)?, &convert(predicted)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub real: ClassScore,
    pub fake: ClassScore,
}

impl ClassMetrics {
    pub fn get(&self, label: Label) -> &ClassScore {
        match label {
            Label::Real => &self.real,
            Label::Fake => &self.fake,
        }
    }

    pub fn macro_f1(&self) -> f64 {
        (self.real.f1 + self.fake.f1) / 2.0
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Per-class precision, recall, F1 and support. Empty rows or columns give
/// 0 rather than an error.
pub fn class_metrics(cm: &ConfusionMatrix) -> Result<ClassMetrics> {
    if cm.total() == 0 {
        return Err(Error::Precondition(
            "class metrics of an empty matrix".into(),
        ));
    }
    let score = |c: usize| {
        let precision = ratio(cm.counts[c][c], cm.column_sum(c));
        let recall = ratio(cm.counts[c][c], cm.row_sum(c));
        ClassScore {
            precision,
            recall,
            f1: f1_score(precision, recall),
            support: cm.row_sum(c),
        }
    };
    Ok(ClassMetrics {
        real: score(0),
        fake: score(1),
    })
}

/// Rounds half away from zero at `decimals` places and formats.
///
/// A relative nudge absorbs binary representation error so that, e.g.,
/// 0.985 (stored as 0.98499999...) rounds up to 0.99.
pub fn round_half_up(value: f64, decimals: u32) -> String {
    let scale = 10f64.powi(decimals as i32);
    let scaled = value * scale;
    let nudged = scaled + scaled.signum() * scaled.abs().max(1.0) * 1e-12;
    let rounded = (nudged.abs() + 0.5).floor() * nudged.signum();
    format!("{:.*}", decimals as usize, rounded / scale)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub model_name: String,
    /// Variant key such as `roberta`.
    pub variant: String,
    pub confusion: ConfusionMatrix,
    pub metrics: ClassMetrics,
    pub accuracy: f64,
    pub threshold: f64,
    pub config_hash: String,
    /// Left empty in files written by the CLI, which records timestamps in
    /// a manifest instead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

impl EvalReport {
    pub fn new(
        model_name: impl Into<String>,
        variant: impl Into<String>,
        confusion: ConfusionMatrix,
        threshold: f64,
        config_hash: impl Into<String>,
    ) -> Result<Self> {
        Ok(EvalReport {
            schema_version: SCHEMA_VERSION,
            model_name: model_name.into(),
            variant: variant.into(),
            metrics: class_metrics(&confusion)?,
            accuracy: confusion.accuracy(),
            confusion,
            threshold,
            config_hash: config_hash.into(),
            timestamp: None,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        EvalReport::from_json(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    /// Per-class row as printed after evaluation.
    pub fn table1_line(&self) -> String {
        let f = &self.metrics.fake;
        let r = &self.metrics.real;
        format!(
            "{} | fake P={} R={} F1={} support={} | real P={} R={} F1={} support={}",
            self.model_name,
            round_half_up(f.precision, 2),
            round_half_up(f.recall, 2),
            round_half_up(f.f1, 2),
            f.support,
            round_half_up(r.precision, 2),
            round_half_up(r.recall, 2),
            round_half_up(r.f1, 2),
            r.support,
        )
    }
}

fn variant_rank(variant: &str) -> usize {
    Architecture::ALL
        .iter()
        .position(|m| m.key() == variant)
        .unwrap_or(Architecture::ALL.len())
}

/// Orders reports by the canonical variant order, then by name.
pub fn sort_reports(reports: &mut [EvalReport]) {
    reports.sort_by(|a, b| {
        variant_rank(&a.variant)
            .cmp(&variant_rank(&b.variant))
            .then_with(|| a.model_name.cmp(&b.model_name))
            .then_with(|| a.config_hash.cmp(&b.config_hash))
    });
}

/// Published result on the same corpus, kept verbatim.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub work: String,
    pub method: String,
    pub precision: String,
    pub recall: String,
    pub f1: String,
}

pub fn reference_rows() -> Vec<ReferenceRow> {
    let mut rdr = csv::Reader::from_reader(REFERENCE_ROWS.as_bytes());
    rdr.deserialize()
        .collect::<std::result::Result<_, _>>()
        .expect("bundled reference rows parse")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub work: String,
    pub method: String,
    pub precision: String,
    pub recall: String,
    pub f1: String,
    /// Displayed F1 as a number, used for ranking.
    #[serde(skip)]
    pub f1_value: f64,
    pub best: bool,
}

/// Fake-class precision/recall/F1 of each report next to the reference rows.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

/// Builds the comparison table. Report rows come first in canonical variant
/// order, then the reference rows. The row with the highest displayed F1 is
/// flagged; ties go to the earlier row.
pub fn comparison_table(
    reports: &[EvalReport],
    references: &[ReferenceRow],
) -> Result<ComparisonTable> {
    if reports.is_empty() {
        return Err(Error::Precondition(
            "comparison table needs at least one report".into(),
        ));
    }
    let mut sorted = reports.to_vec();
    sort_reports(&mut sorted);
    let mut rows: Vec<ComparisonRow> = references
        .iter()
        .map(|r| ComparisonRow {
            work: r.work.clone(),
            method: r.method.clone(),
            precision: r.precision.clone(),
            recall: r.recall.clone(),
            f1: r.f1.clone(),
            f1_value: r.f1.parse().unwrap_or(0.0),
            best: false,
        })
        .collect();
    let own: Vec<ComparisonRow> = sorted
        .iter()
        .map(|r| ComparisonRow {
            work: "this work".into(),
            method: r.model_name.clone(),
            precision: round_half_up(r.metrics.fake.precision, 2),
            recall: round_half_up(r.metrics.fake.recall, 2),
            f1: round_half_up(r.metrics.fake.f1, 2),
            f1_value: round_half_up(r.metrics.fake.f1, 2).parse().unwrap_or(0.0),
            best: false,
        })
        .collect();
    rows.splice(0..0, own);
    let best = rows
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |acc, (i, r)| match acc {
            Some((_, v)) if v >= r.f1_value => acc,
            _ => Some((i, r.f1_value)),
        });
    if let Some((i, _)) = best {
        rows[i].best = true;
    }
    Ok(ComparisonTable { rows })
}

impl ComparisonTable {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from(
            "| Work | Method | Precision | Recall | F1-score |\n|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            let f1 = if r.best {
                format!("**{}**", r.f1)
            } else {
                r.f1.clone()
            };
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} |",
                r.work, r.method, r.precision, r.recall, f1
            );
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["work", "method", "precision", "recall", "f1", "best"])?;
        for r in &self.rows {
            w.write_record([
                &r.work,
                &r.method,
                &r.precision,
                &r.recall,
                &r.f1,
                &r.best.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Per-class table (fake and real precision/recall/F1/support per model).
pub fn per_class_markdown(reports: &[EvalReport]) -> String {
    let mut sorted = reports.to_vec();
    sort_reports(&mut sorted);
    let mut out = String::from(
        "| Model | Fake P | Fake R | Fake F1 | Fake support | Real P | Real R | Real F1 | Real support |\n|---|---|---|---|---|---|---|---|---|\n",
    );
    for r in &sorted {
        let (f, re) = (&r.metrics.fake, &r.metrics.real);
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            r.model_name,
            round_half_up(f.precision, 2),
            round_half_up(f.recall, 2),
            round_half_up(f.f1, 2),
            f.support,
            round_half_up(re.precision, 2),
            round_half_up(re.recall, 2),
            round_half_up(re.f1, 2),
            re.support
        );
    }
    out
}

pub fn per_class_csv(reports: &[EvalReport]) -> Result<String> {
    let mut sorted = reports.to_vec();
    sort_reports(&mut sorted);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "model",
        "fake_precision",
        "fake_recall",
        "fake_f1",
        "fake_support",
        "real_precision",
        "real_recall",
        "real_f1",
        "real_support",
    ])?;
    for r in &sorted {
        let (f, re) = (&r.metrics.fake, &r.metrics.real);
        w.write_record([
            r.model_name.clone(),
            round_half_up(f.precision, 2),
            round_half_up(f.recall, 2),
            round_half_up(f.f1, 2),
            f.support.to_string(),
            round_half_up(re.precision, 2),
            round_half_up(re.recall, 2),
            round_half_up(re.f1, 2),
            re.support.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Label::{Fake, Real};
    use proptest::prelude::*;

    /// Reported test-set counts of the strongest model.
    fn published_matrix() -> ConfusionMatrix {
        ConfusionMatrix::from_counts([[1106, 14], [36, 984]])
    }

    #[test]
    fn published_counts_reproduce_per_class_row() {
        let m = class_metrics(&published_matrix()).unwrap();
        let r2 = |x: f64| round_half_up(x, 2);
        assert_eq!(
            (r2(m.fake.precision), r2(m.fake.recall), r2(m.fake.f1)),
            ("0.99".into(), "0.96".into(), "0.98".into())
        );
        assert_eq!(
            (r2(m.real.precision), r2(m.real.recall), r2(m.real.f1)),
            ("0.97".into(), "0.99".into(), "0.98".into())
        );
        assert_eq!((m.fake.support, m.real.support), (1020, 1120));
        assert!((m.fake.precision - 984.0 / 998.0).abs() < 1e-15);
        assert_eq!(published_matrix().trace(), 2090);
    }

    #[test]
    fn confusion_examples() {
        let cm = confusion(&[Real, Real, Fake, Fake], &[Real, Fake, Fake, Real]).unwrap();
        assert_eq!(cm.counts, [[1, 1], [1, 1]]);
        let perfect = confusion(&[Real, Fake, Fake], &[Real, Fake, Fake]).unwrap();
        assert_eq!((perfect.counts[0][1], perfect.counts[1][0]), (0, 0));
        assert!(matches!(confusion(&[Real], &[]), Err(Error::Shape(_))));
        assert!(matches!(
            confusion_from_indices(&[0, 2], &[0, 1]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn metric_examples() {
        let diag = class_metrics(&ConfusionMatrix::from_counts([[5, 0], [0, 3]])).unwrap();
        for s in [diag.real, diag.fake] {
            assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        }
        // fake: TP=3, FP=1, FN=2
        let m = class_metrics(&ConfusionMatrix::from_counts([[4, 1], [2, 3]])).unwrap();
        assert!((m.fake.precision - 0.75).abs() < 1e-15);
        assert!((m.fake.recall - 0.6).abs() < 1e-15);
        assert!((m.fake.f1 - 2.0 * 0.75 * 0.6 / 1.35).abs() < 1e-15);
        assert!((m.fake.f1 - 0.6667).abs() < 1e-4);

        let no_fake_predictions =
            class_metrics(&ConfusionMatrix::from_counts([[3, 0], [2, 0]])).unwrap();
        assert_eq!(no_fake_predictions.fake.precision, 0.0);
        assert_eq!(no_fake_predictions.fake.f1, 0.0);
        assert!(class_metrics(&ConfusionMatrix::default()).is_err());
    }

    #[test]
    fn rounding() {
        assert_eq!(round_half_up(0.985, 2), "0.99");
        assert_eq!(round_half_up(0.9875, 2), "0.99");
        assert_eq!(round_half_up(0.975, 2), "0.98");
        assert_eq!(round_half_up(0.964, 2), "0.96");
        assert_eq!(round_half_up(1.0, 2), "1.00");
        assert_eq!(round_half_up(0.0, 2), "0.00");
    }

    fn report(name: &str, variant: &str, counts: [[u64; 2]; 2]) -> EvalReport {
        EvalReport::new(
            name,
            variant,
            ConfusionMatrix::from_counts(counts),
            0.5,
            "h",
        )
        .unwrap()
    }

    #[test]
    fn comparison_rows_and_best_flag() {
        let roberta = report("RoBERTa", "roberta", [[1106, 14], [36, 984]]);
        let t = comparison_table(std::slice::from_ref(&roberta), &[]).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(
            (
                t.rows[0].precision.as_str(),
                t.rows[0].recall.as_str(),
                t.rows[0].f1.as_str()
            ),
            ("0.99", "0.96", "0.98")
        );

        let refs = reference_rows();
        assert_eq!(refs.len(), 5);
        let t = comparison_table(std::slice::from_ref(&roberta), &refs).unwrap();
        assert_eq!(t.rows.len(), 6);
        assert!(t.rows[0].best);
        assert_eq!(t.rows[1].precision, "0.9333");

        // F1 0.95 vs 0.98.
        let hybrid = report("Hybrid (BERT+ALBERT)", "hybrid", [[1053, 67], [41, 979]]);
        let t = comparison_table(&[hybrid, roberta], &[]).unwrap();
        assert_eq!(t.rows[0].method, "RoBERTa");
        assert!(t.rows[0].best && !t.rows[1].best);
        assert!(t.to_markdown().contains("**0.98**"));
        assert!(comparison_table(&[], &refs).is_err());
    }

    #[test]
    fn report_json_round_trip() {
        let r = report("RoBERTa", "roberta", [[1106, 14], [36, 984]]);
        assert_eq!(EvalReport::from_json(&r.to_json().unwrap()).unwrap(), r);
        assert!(r
            .table1_line()
            .contains("fake P=0.99 R=0.96 F1=0.98 support=1020"));
    }

    fn brute_force(gold: &[Label], pred: &[Label], class: Label) -> ClassScore {
        let tp = gold
            .iter()
            .zip(pred)
            .filter(|(g, p)| **g == class && **p == class)
            .count() as u64;
        let predicted = pred.iter().filter(|p| **p == class).count() as u64;
        let actual = gold.iter().filter(|g| **g == class).count() as u64;
        let precision = if predicted == 0 {
            0.0
        } else {
            tp as f64 / predicted as f64
        };
        let recall = if actual == 0 {
            0.0
        } else {
            tp as f64 / actual as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassScore {
            precision,
            recall,
            f1,
            support: actual,
        }
    }

    fn labels() -> impl Strategy<Value = (Vec<Label>, Vec<Label>)> {
        (1usize..60).prop_flat_map(|n| {
            let v =
                prop::collection::vec(prop::bool::ANY.prop_map(|b| if b { Fake } else { Real }), n);
            (v.clone(), v)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn matches_brute_force((gold, pred) in labels()) {
            let m = class_metrics(&confusion(&gold, &pred).unwrap()).unwrap();
            prop_assert_eq!(m.real, brute_force(&gold, &pred, Real));
            prop_assert_eq!(m.fake, brute_force(&gold, &pred, Fake));
        }

        #[test]
        fn label_swap_transposes((gold, pred) in labels()) {
            let flip = |v: &[Label]| v.iter().map(|l| if *l == Fake { Real } else { Fake }).collect::<Vec<_>>();
            let cm = confusion(&gold, &pred).unwrap();
            let swapped = confusion(&flip(&gold), &flip(&pred)).unwrap();
            prop_assert_eq!(swapped, cm.swapped());
            let (a, b) = (class_metrics(&cm).unwrap(), class_metrics(&swapped).unwrap());
            prop_assert_eq!(a.real, b.fake);
            prop_assert_eq!(a.fake, b.real);
        }

        #[test]
        fn micro_recall_is_accuracy_and_f1_is_bracketed((gold, pred) in labels()) {
            let cm = confusion(&gold, &pred).unwrap();
            let m = class_metrics(&cm).unwrap();
            let micro_recall = (cm.counts[0][0] + cm.counts[1][1]) as f64 / cm.total() as f64;
            prop_assert_eq!(micro_recall, cm.accuracy());
            prop_assert_eq!(m.real.support + m.fake.support, cm.total());
            for s in [m.real, m.fake] {
                if s.precision > 0.0 && s.recall > 0.0 {
                    prop_assert!(s.f1 <= s.precision.max(s.recall) + 1e-15);
                    prop_assert!(s.f1 >= s.precision.min(s.recall) - 1e-15);
                }
            }
        }
    }
}
