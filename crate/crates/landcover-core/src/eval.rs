//! Thresholded multi-label metrics, ROC-AUC, threshold sweeps, and the
//! model-comparison table.
//!
//! Conventions, applied everywhere:
//!
//! * accuracy = exact-match (subset) accuracy over full label vectors;
//! * precision / recall / F1 = micro-averaged over all sample-label decisions;
//! * ROC-AUC = one-vs-rest per label, ties credited 0.5, macro-averaged over
//!   labels that have at least one positive and one negative;
//! * threshold comparison is inclusive (probability >= threshold → detect);
//! * zero denominators resolve to 0 (precision when TP+FP = 0, recall when
//!   TP+FN = 0, F1 when P+R = 0).

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LabelVocabulary;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("probabilities and truth shapes differ: {probs:?} vs {truth:?}")]
    ShapeMismatch {
        probs: (usize, usize),
        truth: (usize, usize),
    },
    #[error("prediction set must contain at least one sample")]
    Empty,
    #[error("probability {value} at ({row}, {col}) outside [0, 1]")]
    ProbabilityRange { value: f64, row: usize, col: usize },
    #[error("vocabulary has {vocab} classes but matrices have {cols} columns")]
    VocabMismatch { vocab: usize, cols: usize },
    #[error("threshold {0} outside [0, 1]")]
    ThresholdRange(f64),
    #[error("threshold grid is empty")]
    EmptyGrid,
    #[error("ROC-AUC undefined: no label column has both a positive and a negative example")]
    UndefinedAuc,
}

/// Per-class probabilities paired with ground truth for a batch of samples.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    probabilities: Array2<f64>,
    truth: Array2<u8>,
    vocab: LabelVocabulary,
}

impl PredictionSet {
    pub fn new(
        probabilities: Array2<f64>,
        truth: Array2<u8>,
        vocab: LabelVocabulary,
    ) -> Result<Self, EvalError> {
        let p_dim = probabilities.dim();
        let t_dim = truth.dim();
        if p_dim != t_dim {
            return Err(EvalError::ShapeMismatch {
                probs: p_dim,
                truth: t_dim,
            });
        }
        if p_dim.0 == 0 {
            return Err(EvalError::Empty);
        }
        if vocab.len() != p_dim.1 {
            return Err(EvalError::VocabMismatch {
                vocab: vocab.len(),
                cols: p_dim.1,
            });
        }
        for ((row, col), &value) in probabilities.indexed_iter() {
            if !(0.0..=1.0).contains(&value) || !value.is_finite() {
                return Err(EvalError::ProbabilityRange { value, row, col });
            }
        }
        debug_assert!(truth.iter().all(|&t| t <= 1), "truth must be binary");
        Ok(Self {
            probabilities,
            truth,
            vocab,
        })
    }

    pub fn probabilities(&self) -> &Array2<f64> {
        &self.probabilities
    }

    pub fn truth(&self) -> &Array2<u8> {
        &self.truth
    }

    pub fn vocab(&self) -> &LabelVocabulary {
        &self.vocab
    }

    pub fn num_samples(&self) -> usize {
        self.probabilities.nrows()
    }

    pub fn num_labels(&self) -> usize {
        self.probabilities.ncols()
    }
}

/// The five comparison statistics for one model at one threshold, on the
/// 0–100 scale used by the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model_name: String,
    pub threshold: f64,
    pub accuracy_pct: f64,
    pub precision_pct: f64,
    pub recall_pct: f64,
    pub f1_pct: f64,
    pub roc_auc_pct: f64,
}

impl MetricsReport {
    /// Checks the internal-consistency invariants: every value in [0, 100]
    /// and F1 within 0.005 pct of the harmonic mean of precision and recall
    /// after rounding to two decimals.
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("accuracy", self.accuracy_pct),
            ("precision", self.precision_pct),
            ("recall", self.recall_pct),
            ("f1", self.f1_pct),
            ("roc_auc", self.roc_auc_pct),
        ] {
            if !(0.0..=100.0).contains(&v) || !v.is_finite() {
                return Err(format!("{name} = {v} outside [0, 100]"));
            }
        }
        let hm = if self.precision_pct + self.recall_pct > 0.0 {
            2.0 * self.precision_pct * self.recall_pct / (self.precision_pct + self.recall_pct)
        } else {
            0.0
        };
        let rounded = |x: f64| (x * 100.0).round() / 100.0;
        if (rounded(self.f1_pct) - rounded(hm)).abs() > 0.005 + 1e-9 {
            return Err(format!(
                "f1 {} is not the harmonic mean of precision {} and recall {} (expected ~{hm:.4})",
                self.f1_pct, self.precision_pct, self.recall_pct
            ));
        }
        Ok(())
    }
}

/// Thresholds every probability with the inclusive convention: 1 iff p >= threshold.
pub fn binarize(probabilities: &Array2<f64>, threshold: f64) -> Result<Array2<u8>, EvalError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(EvalError::ThresholdRange(threshold));
    }
    Ok(probabilities.mapv(|p| u8::from(p >= threshold)))
}

/// Pooled confusion counts over all sample-label decisions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct MicroCounts {
    tp: u64,
    fp: u64,
    fn_: u64,
}

fn micro_counts(decisions: &Array2<u8>, truth: &Array2<u8>) -> MicroCounts {
    let mut c = MicroCounts::default();
    for (&d, &t) in decisions.iter().zip(truth.iter()) {
        match (d, t) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => {}
        }
    }
    c
}

fn precision_recall_f1(c: MicroCounts) -> (f64, f64, f64) {
    let precision = if c.tp + c.fp > 0 {
        c.tp as f64 / (c.tp + c.fp) as f64
    } else {
        0.0
    };
    let recall = if c.tp + c.fn_ > 0 {
        c.tp as f64 / (c.tp + c.fn_) as f64
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (precision, recall, f1)
}

fn subset_accuracy(decisions: &Array2<u8>, truth: &Array2<u8>) -> f64 {
    let exact = decisions
        .rows()
        .into_iter()
        .zip(truth.rows())
        .filter(|(d, t)| d == t)
        .count();
    exact as f64 / decisions.nrows() as f64
}

/// Computes the five comparison statistics at the given decision threshold.
pub fn compute_metrics(
    preds: &PredictionSet,
    threshold: f64,
    model_name: &str,
) -> Result<MetricsReport, EvalError> {
    let decisions = binarize(preds.probabilities(), threshold)?;
    let (precision, recall, f1) = precision_recall_f1(micro_counts(&decisions, preds.truth()));
    let accuracy = subset_accuracy(&decisions, preds.truth());
    let auc = compute_roc_auc(preds)?;
    Ok(MetricsReport {
        model_name: model_name.to_owned(),
        threshold,
        accuracy_pct: accuracy * 100.0,
        precision_pct: precision * 100.0,
        recall_pct: recall * 100.0,
        f1_pct: f1 * 100.0,
        roc_auc_pct: auc.macro_auc * 100.0,
    })
}

/// Macro ROC-AUC plus the per-label detail behind it. Labels with no
/// positive or no negative example carry `None` and are listed in `skipped`.
#[derive(Debug, Clone)]
pub struct AucOutcome {
    pub macro_auc: f64,
    pub per_label: Vec<Option<f64>>,
    pub skipped: Vec<String>,
}

/// One-vs-rest AUC per label, macro-averaged over valid labels.
///
/// Each per-label AUC is the pairwise-comparison statistic: the fraction of
/// (positive, negative) pairs where the positive scores higher, with ties
/// worth 0.5. Computed via average ranks, which is algebraically identical.
pub fn compute_roc_auc(preds: &PredictionSet) -> Result<AucOutcome, EvalError> {
    let n = preds.num_samples();
    let l = preds.num_labels();
    let mut per_label = Vec::with_capacity(l);
    let mut skipped = Vec::new();
    let mut sum = 0.0;
    let mut valid = 0usize;
    for col in 0..l {
        let scores = preds.probabilities().column(col);
        let labels = preds.truth().column(col);
        let positives = labels.iter().filter(|&&t| t == 1).count();
        if positives == 0 || positives == n {
            per_label.push(None);
            skipped.push(preds.vocab().classes()[col].clone());
            continue;
        }
        let auc = binary_auc(scores, labels);
        per_label.push(Some(auc));
        sum += auc;
        valid += 1;
    }
    if valid == 0 {
        return Err(EvalError::UndefinedAuc);
    }
    Ok(AucOutcome {
        macro_auc: sum / valid as f64,
        per_label,
        skipped,
    })
}

/// Rank-statistic AUC for a single label column with average ranks for ties.
fn binary_auc(scores: ArrayView1<'_, f64>, labels: ArrayView1<'_, u8>) -> f64 {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of average ranks (1-based) over positives, tie groups averaged.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }

    let n_pos = labels.iter().filter(|&&t| t == 1).count() as f64;
    let n_neg = n as f64 - n_pos;
    let u = rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0;
    u / (n_pos * n_neg)
}

/// F1 over a grid of thresholds plus the argmax, ties broken toward the
/// smallest threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdSweepResult {
    pub grid: Vec<f64>,
    pub f1_at: Vec<f64>,
    pub best_threshold: f64,
}

/// The default calibration grid: 0.05 to 0.95 in 0.05 steps (19 points).
pub fn default_sweep_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

/// Evaluates micro-F1 at every grid threshold and selects the best one.
pub fn sweep_thresholds(
    preds: &PredictionSet,
    grid: &[f64],
) -> Result<ThresholdSweepResult, EvalError> {
    if grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    let mut f1_at = Vec::with_capacity(grid.len());
    for &threshold in grid {
        let decisions = binarize(preds.probabilities(), threshold)?;
        let (_, _, f1) = precision_recall_f1(micro_counts(&decisions, preds.truth()));
        f1_at.push(f1 * 100.0);
    }
    let mut best = 0;
    for (i, &f1) in f1_at.iter().enumerate() {
        if f1 > f1_at[best] || (f1 == f1_at[best] && grid[i] < grid[best]) {
            best = i;
        }
    }
    Ok(ThresholdSweepResult {
        grid: grid.to_vec(),
        f1_at,
        best_threshold: grid[best],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Text,
    Csv,
    LatexLike,
}

/// Renders the comparison table, one row per report in input order, values
/// formatted to two decimals.
pub fn render_comparison_table(reports: &[MetricsReport], format: TableFormat) -> String {
    const COLUMNS: [&str; 6] = ["Model", "Accuracy", "Precision", "Recall", "F1", "ROC-AUC"];
    let rows: Vec<[String; 6]> = reports
        .iter()
        .map(|r| {
            [
                r.model_name.clone(),
                format!("{:.2}", r.accuracy_pct),
                format!("{:.2}", r.precision_pct),
                format!("{:.2}", r.recall_pct),
                format!("{:.2}", r.f1_pct),
                format!("{:.2}", r.roc_auc_pct),
            ]
        })
        .collect();

    match format {
        TableFormat::Csv => {
            let mut out = COLUMNS.join(",");
            out.push('\n');
            for row in &rows {
                out.push_str(&row.join(","));
                out.push('\n');
            }
            out
        }
        TableFormat::Text => {
            let mut widths = COLUMNS.map(str::len);
            for row in &rows {
                for (w, cell) in widths.iter_mut().zip(row.iter()) {
                    *w = (*w).max(cell.len());
                }
            }
            let mut out = String::new();
            let mut line = |cells: &[String]| {
                let formatted: Vec<String> = cells
                    .iter()
                    .zip(widths.iter())
                    .map(|(c, w)| format!("{c:<w$}"))
                    .collect();
                formatted.join("  ").trim_end().to_owned() + "\n"
            };
            out.push_str(&line(&COLUMNS.map(String::from)));
            for row in &rows {
                out.push_str(&line(row));
            }
            out
        }
        TableFormat::LatexLike => {
            let mut out = String::from(&COLUMNS.join(" & "));
            out.push_str(" \\\\\n\\hline\n");
            for row in &rows {
                out.push_str(&row.join(" & "));
                out.push_str(" \\\\\n");
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn vocab(n: usize) -> LabelVocabulary {
        LabelVocabulary::new((0..n).map(|i| format!("class{i}")).collect()).unwrap()
    }

    fn pset(probs: Array2<f64>, truth: Array2<u8>) -> PredictionSet {
        let l = probs.ncols();
        PredictionSet::new(probs, truth, vocab(l)).unwrap()
    }

    #[test]
    fn binarize_boundary_is_inclusive() {
        let m = binarize(&array![[0.4]], 0.4).unwrap();
        assert_eq!(m, array![[1u8]]);
    }

    #[test]
    fn binarize_zero_threshold_is_all_ones() {
        let m = binarize(&array![[0.0, 0.3], [0.99, 0.5]], 0.0).unwrap();
        assert!(m.iter().all(|&d| d == 1));
    }

    #[test]
    fn binarize_rejects_out_of_range_threshold() {
        assert!(matches!(
            binarize(&array![[0.5]], 1.5),
            Err(EvalError::ThresholdRange(_))
        ));
    }

    #[test]
    fn perfect_predictions_score_100() {
        let p = pset(array![[0.9, 0.2], [0.3, 0.8]], array![[1, 0], [0, 1]]);
        let r = compute_metrics(&p, 0.5, "toy").unwrap();
        assert_eq!(r.accuracy_pct, 100.0);
        assert_eq!(r.precision_pct, 100.0);
        assert_eq!(r.recall_pct, 100.0);
        assert_eq!(r.f1_pct, 100.0);
        r.validate().unwrap();
    }

    #[test]
    fn hand_enumerated_confusion_counts() {
        // binarized [[1,1],[0,0]] vs truth [[1,0],[0,1]]: TP=1, FP=1, FN=1.
        let p = pset(array![[0.9, 0.9], [0.1, 0.1]], array![[1, 0], [0, 1]]);
        let r = compute_metrics(&p, 0.5, "toy").unwrap();
        assert_eq!(r.accuracy_pct, 0.0);
        assert_eq!(r.precision_pct, 50.0);
        assert_eq!(r.recall_pct, 50.0);
        assert_eq!(r.f1_pct, 50.0);
    }

    #[test]
    fn auc_perfect_separation() {
        // One label; positives {0.8, 0.6}, negatives {0.4, 0.2}.
        let p = pset(
            array![[0.8], [0.6], [0.4], [0.2]],
            array![[1], [1], [0], [0]],
        );
        let auc = compute_roc_auc(&p).unwrap();
        assert_eq!(auc.macro_auc, 1.0);
    }

    #[test]
    fn auc_half_from_crossed_pairs() {
        // positives {0.6, 0.2}, negatives {0.4, 0.3}: pairs win, win, lose, lose.
        let p = pset(
            array![[0.6], [0.2], [0.4], [0.3]],
            array![[1], [1], [0], [0]],
        );
        let auc = compute_roc_auc(&p).unwrap();
        assert!((auc.macro_auc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn auc_constant_scores_exactly_half() {
        let p = pset(
            array![[0.7], [0.7], [0.7], [0.7]],
            array![[1], [0], [1], [0]],
        );
        let auc = compute_roc_auc(&p).unwrap();
        assert_eq!(auc.macro_auc, 0.5);
    }

    #[test]
    fn auc_skips_degenerate_columns_and_reports_them() {
        // Column 1 is all-positive, so only column 0 counts.
        let p = pset(
            array![[0.9, 0.5], [0.1, 0.5]],
            array![[1, 1], [0, 1]],
        );
        let auc = compute_roc_auc(&p).unwrap();
        assert_eq!(auc.macro_auc, 1.0);
        assert_eq!(auc.per_label, vec![Some(1.0), None]);
        assert_eq!(auc.skipped, vec!["class1".to_owned()]);
    }

    #[test]
    fn auc_undefined_when_no_column_valid() {
        let p = pset(array![[0.9], [0.1]], array![[1], [1]]);
        assert!(matches!(compute_roc_auc(&p), Err(EvalError::UndefinedAuc)));
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let probs = array![[0.81, 0.13], [0.46, 0.52], [0.12, 0.97], [0.33, 0.33]];
        let truth = array![[1, 0], [0, 1], [0, 1], [1, 0]];
        let a = compute_roc_auc(&pset(probs.clone(), truth.clone()))
            .unwrap()
            .macro_auc;
        // x -> x^3 is strictly monotone on [0, 1].
        let b = compute_roc_auc(&pset(probs.mapv(|p| p.powi(3)), truth))
            .unwrap()
            .macro_auc;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn sweep_tie_breaks_to_smallest_threshold() {
        // Probabilities in {0.05, 0.95} with matching truth: F1 = 100 at
        // every grid point from 0.1 through 0.9.
        let p = pset(
            array![[0.95, 0.05], [0.05, 0.95]],
            array![[1, 0], [0, 1]],
        );
        let grid: Vec<f64> = (1..=9).map(|i| i as f64 * 0.1).collect();
        let sweep = sweep_thresholds(&p, &grid).unwrap();
        assert!(sweep.f1_at.iter().all(|&f1| (f1 - 100.0).abs() < 1e-12));
        assert!((sweep.best_threshold - 0.1).abs() < 1e-12);
    }

    #[test]
    fn sweep_matches_compute_metrics_per_point() {
        let p = pset(
            array![[0.45, 0.35], [0.95, 0.05], [0.35, 0.45], [0.05, 0.95]],
            array![[1, 0], [1, 0], [0, 1], [0, 1]],
        );
        let grid = default_sweep_grid();
        let sweep = sweep_thresholds(&p, &grid).unwrap();
        for (i, &t) in grid.iter().enumerate() {
            let r = compute_metrics(&p, t, "x").unwrap();
            assert!(
                (sweep.f1_at[i] - r.f1_pct).abs() < 1e-12,
                "grid point {t} disagrees"
            );
        }
    }

    #[test]
    fn default_grid_has_19_points() {
        let grid = default_sweep_grid();
        assert_eq!(grid.len(), 19);
        assert!((grid[0] - 0.05).abs() < 1e-12);
        assert!((grid[18] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn table_renders_reference_row_to_two_decimals() {
        let report = MetricsReport {
            model_name: "densenet201".into(),
            threshold: 0.5,
            accuracy_pct: 51.67,
            precision_pct: 88.46,
            recall_pct: 90.16,
            f1_pct: 89.30,
            roc_auc_pct: 98.86,
        };
        report.validate().unwrap();
        let text = render_comparison_table(std::slice::from_ref(&report), TableFormat::Text);
        let row = text.lines().nth(1).unwrap();
        let cells: Vec<&str> = row.split_whitespace().collect();
        assert_eq!(
            cells,
            vec!["densenet201", "51.67", "88.46", "90.16", "89.30", "98.86"]
        );
        let csv = render_comparison_table(&[report], TableFormat::Csv);
        assert!(csv.contains("densenet201,51.67,88.46,90.16,89.30,98.86"));
    }

    #[test]
    fn table_empty_list_is_header_only() {
        let text = render_comparison_table(&[], TableFormat::Text);
        assert_eq!(text.lines().count(), 1);
        let csv = render_comparison_table(&[], TableFormat::Csv);
        assert_eq!(csv, "Model,Accuracy,Precision,Recall,F1,ROC-AUC\n");
    }

    #[test]
    fn csv_table_round_trips() {
        let reports = vec![
            MetricsReport {
                model_name: "a".into(),
                threshold: 0.4,
                accuracy_pct: 51.67,
                precision_pct: 90.23,
                recall_pct: 86.13,
                f1_pct: 88.13,
                roc_auc_pct: 98.69,
            },
            MetricsReport {
                model_name: "b".into(),
                threshold: 0.4,
                accuracy_pct: 49.52,
                precision_pct: 85.53,
                recall_pct: 90.79,
                f1_pct: 88.08,
                roc_auc_pct: 98.73,
            },
        ];
        let rendered = render_comparison_table(&reports, TableFormat::Csv);
        let mut reader = csv::Reader::from_reader(rendered.as_bytes());
        for (record, want) in reader.records().zip(reports.iter()) {
            let record = record.unwrap();
            assert_eq!(&record[0], want.model_name.as_str());
            assert_eq!(record[1].parse::<f64>().unwrap(), want.accuracy_pct);
            assert_eq!(record[5].parse::<f64>().unwrap(), want.roc_auc_pct);
        }
    }

    #[test]
    fn metrics_are_permutation_invariant_over_samples() {
        let probs = array![[0.9, 0.1], [0.4, 0.6], [0.2, 0.8], [0.7, 0.3]];
        let truth = array![[1, 0], [0, 1], [0, 1], [1, 1]];
        let base = compute_metrics(&pset(probs.clone(), truth.clone()), 0.5, "m").unwrap();
        // Reverse the sample order.
        let rev_probs = Array2::from_shape_fn(probs.dim(), |(i, j)| probs[(3 - i, j)]);
        let rev_truth = Array2::from_shape_fn(truth.dim(), |(i, j)| truth[(3 - i, j)]);
        let perm = compute_metrics(&pset(rev_probs, rev_truth), 0.5, "m").unwrap();
        assert_eq!(base.accuracy_pct, perm.accuracy_pct);
        assert_eq!(base.f1_pct, perm.f1_pct);
        assert_eq!(base.roc_auc_pct, perm.roc_auc_pct);
    }

    #[test]
    fn validate_rejects_inconsistent_f1() {
        let report = MetricsReport {
            model_name: "broken".into(),
            threshold: 0.5,
            accuracy_pct: 50.0,
            precision_pct: 80.0,
            recall_pct: 80.0,
            f1_pct: 70.0,
            roc_auc_pct: 90.0,
        };
        assert!(report.validate().is_err());
    }
}
