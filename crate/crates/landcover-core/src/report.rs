//! Aggregates per-tile prediction records into the two distribution views:
//! share of all detections per class, and per-image detection frequency.
//! Both are computed from the same per-class detection counts, so they stay
//! mutually proportional by construction.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dataset::LabelVocabulary;
use crate::inference::PredictionRecord;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("record {record_id:?} carries {got} decisions, vocabulary has {expected}")]
    VectorLength {
        record_id: String,
        expected: usize,
        got: usize,
    },
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Per-class detection counts with both percentage views derived from them.
///
/// `frequency_pct[c]` = detections of c / number of images, as a percentage;
/// `share_pct[c]` = detections of c / total detections, as a percentage.
/// When no detection exists the shares are undefined and `has_detections`
/// is false (no division takes place).
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateDistribution {
    pub classes: Vec<String>,
    pub per_class_count: Vec<u64>,
    pub n_images: usize,
    pub frequency_pct: Vec<f64>,
    pub share_pct: Vec<f64>,
    pub has_detections: bool,
}

/// Counts, per class, the records whose decision bit is set, and derives
/// the two percentage views.
pub fn aggregate(
    records: &[PredictionRecord],
    vocab: &LabelVocabulary,
) -> Result<AggregateDistribution, ReportError> {
    let l = vocab.len();
    let mut counts = vec![0u64; l];
    for record in records {
        if record.decisions.len() != l {
            return Err(ReportError::VectorLength {
                record_id: record.record_id.clone(),
                expected: l,
                got: record.decisions.len(),
            });
        }
        for (count, &d) in counts.iter_mut().zip(record.decisions.iter()) {
            *count += u64::from(d);
        }
    }
    let n_images = records.len();
    let total: u64 = counts.iter().sum();
    let frequency_pct = counts
        .iter()
        .map(|&c| {
            if n_images == 0 {
                0.0
            } else {
                c as f64 / n_images as f64 * 100.0
            }
        })
        .collect();
    let share_pct = counts
        .iter()
        .map(|&c| {
            if total == 0 {
                0.0
            } else {
                c as f64 / total as f64 * 100.0
            }
        })
        .collect();
    Ok(AggregateDistribution {
        classes: vocab.classes().to_vec(),
        per_class_count: counts,
        n_images,
        frequency_pct,
        share_pct,
        has_detections: total > 0,
    })
}

/// The files produced by [`emit_chart_data`].
#[derive(Debug, Clone)]
pub struct ChartOutputs {
    pub share_csv: PathBuf,
    pub frequency_csv: PathBuf,
    pub share_svg: Option<PathBuf>,
    pub frequency_svg: Option<PathBuf>,
}

/// Writes `share.csv` and `frequency.csv` (classes sorted by descending
/// value, full precision) and, when `render_charts` is set, a pie and a bar
/// chart as SVG.
pub fn emit_chart_data(
    dist: &AggregateDistribution,
    out_dir: &Path,
    render_charts: bool,
) -> Result<ChartOutputs, ReportError> {
    std::fs::create_dir_all(out_dir).map_err(|source| ReportError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;

    let share_csv = out_dir.join("share.csv");
    write_sorted_csv(&share_csv, "class,share_pct", &dist.classes, &dist.share_pct)?;
    let frequency_csv = out_dir.join("frequency.csv");
    write_sorted_csv(
        &frequency_csv,
        "class,frequency_pct",
        &dist.classes,
        &dist.frequency_pct,
    )?;

    let (share_svg, frequency_svg) = if render_charts {
        let pie = out_dir.join("share_pie.svg");
        write_file(&pie, &render_pie_svg(dist))?;
        let bar = out_dir.join("frequency_bar.svg");
        write_file(&bar, &render_bar_svg(dist))?;
        (Some(pie), Some(bar))
    } else {
        (None, None)
    };

    Ok(ChartOutputs {
        share_csv,
        frequency_csv,
        share_svg,
        frequency_svg,
    })
}

fn write_sorted_csv(
    path: &Path,
    header: &str,
    classes: &[String],
    values: &[f64],
) -> Result<(), ReportError> {
    let mut rows: Vec<(&String, f64)> = classes.iter().zip(values.iter().copied()).collect();
    rows.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut text = String::from(header);
    text.push('\n');
    for (class, value) in rows {
        let _ = writeln!(text, "{class},{value}");
    }
    write_file(path, &text)
}

fn write_file(path: &Path, text: &str) -> Result<(), ReportError> {
    std::fs::write(path, text).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

const PALETTE: [&str; 10] = [
    "#4c78a8", "#f58518", "#54a24b", "#e45756", "#72b7b2", "#eeca3b", "#b279a2", "#ff9da6",
    "#9d755d", "#bab0ac",
];

fn render_pie_svg(dist: &AggregateDistribution) -> String {
    let mut svg = String::from(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"420\" height=\"320\" viewBox=\"0 0 420 320\">\n",
    );
    let (cx, cy, r) = (150.0, 160.0, 120.0);
    let mut angle = -std::f64::consts::FRAC_PI_2;
    let mut legend_y = 40.0;
    for (i, (class, &share)) in dist.classes.iter().zip(dist.share_pct.iter()).enumerate() {
        if share <= 0.0 {
            continue;
        }
        let sweep = share / 100.0 * std::f64::consts::TAU;
        let (x0, y0) = (cx + r * angle.cos(), cy + r * angle.sin());
        let end = angle + sweep;
        let (x1, y1) = (cx + r * end.cos(), cy + r * end.sin());
        let large = if sweep > std::f64::consts::PI { 1 } else { 0 };
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            svg,
            "<path d=\"M{cx:.2},{cy:.2} L{x0:.2},{y0:.2} A{r:.2},{r:.2} 0 {large} 1 {x1:.2},{y1:.2} Z\" fill=\"{color}\"/>"
        );
        let _ = writeln!(
            svg,
            "<rect x=\"300\" y=\"{:.1}\" width=\"12\" height=\"12\" fill=\"{color}\"/><text x=\"318\" y=\"{:.1}\" font-size=\"12\">{class} {share:.1}%</text>",
            legend_y, legend_y + 10.0
        );
        legend_y += 20.0;
        angle = end;
    }
    svg.push_str("</svg>\n");
    svg
}

fn render_bar_svg(dist: &AggregateDistribution) -> String {
    let mut rows: Vec<(&String, f64)> = dist
        .classes
        .iter()
        .zip(dist.frequency_pct.iter().copied())
        .collect();
    rows.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let height = 40 + rows.len() * 24;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"520\" height=\"{height}\" viewBox=\"0 0 520 {height}\">\n"
    );
    for (i, (class, freq)) in rows.iter().enumerate() {
        let y = 20 + i * 24;
        let w = freq / 100.0 * 300.0;
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            svg,
            "<text x=\"110\" y=\"{}\" font-size=\"12\" text-anchor=\"end\">{class}</text><rect x=\"120\" y=\"{}\" width=\"{w:.2}\" height=\"16\" fill=\"{color}\"/><text x=\"{:.2}\" y=\"{}\" font-size=\"12\">{freq:.2}%</text>",
            y + 12, y, 126.0 + w, y + 12
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(names: &[&str]) -> LabelVocabulary {
        LabelVocabulary::new(names.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    fn record(id: &str, decisions: Vec<u8>) -> PredictionRecord {
        let probs = decisions.iter().map(|&d| f64::from(d) * 0.9 + 0.05).collect();
        PredictionRecord {
            record_id: id.to_owned(),
            probabilities: probs,
            decisions,
            threshold_used: 0.5,
            model_name: "toy".to_owned(),
        }
    }

    #[test]
    fn frequency_counts_images_with_detection() {
        let v = vocab(&["trees", "grass"]);
        let records = vec![
            record("a", vec![1, 0]),
            record("b", vec![1, 1]),
            record("c", vec![0, 0]),
            record("d", vec![0, 0]),
        ];
        let dist = aggregate(&records, &v).unwrap();
        assert_eq!(dist.per_class_count, vec![2, 1]);
        assert_eq!(dist.frequency_pct[0], 50.0);
        assert_eq!(dist.frequency_pct[1], 25.0);
    }

    #[test]
    fn shares_come_from_detection_counts() {
        let v = vocab(&["trees", "grass", "pavement"]);
        let records = vec![
            record("a", vec![1, 1, 0]),
            record("b", vec![1, 0, 1]),
        ];
        let dist = aggregate(&records, &v).unwrap();
        assert_eq!(dist.share_pct, vec![50.0, 25.0, 25.0]);
        let sum: f64 = dist.share_pct.iter().sum();
        assert!((sum - 100.0).abs() < 1e-9);
    }

    #[test]
    fn empty_records_flag_undefined_shares() {
        let v = vocab(&["trees"]);
        let dist = aggregate(&[], &v).unwrap();
        assert_eq!(dist.n_images, 0);
        assert!(!dist.has_detections);
        assert_eq!(dist.share_pct, vec![0.0]);
    }

    #[test]
    fn counts_match_recount_oracle_and_ignore_order() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let v = vocab(&["a", "b", "c", "d"]);
        let records: Vec<PredictionRecord> = (0..200)
            .map(|i| {
                record(
                    &format!("r{i}"),
                    (0..4).map(|_| rng.random_range(0..=1u8)).collect(),
                )
            })
            .collect();
        let dist = aggregate(&records, &v).unwrap();
        for col in 0..4 {
            let oracle: u64 = records.iter().map(|r| u64::from(r.decisions[col])).sum();
            assert_eq!(dist.per_class_count[col], oracle);
        }
        let mut reversed = records.clone();
        reversed.reverse();
        assert_eq!(aggregate(&reversed, &v).unwrap(), dist);
    }

    #[test]
    fn proportionality_between_views() {
        let v = vocab(&["a", "b", "c"]);
        let records = vec![
            record("1", vec![1, 1, 0]),
            record("2", vec![1, 0, 0]),
            record("3", vec![1, 1, 1]),
        ];
        let dist = aggregate(&records, &v).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if dist.per_class_count[j] == 0 {
                    continue;
                }
                let by_share = dist.share_pct[i] / dist.share_pct[j];
                let by_freq = dist.frequency_pct[i] / dist.frequency_pct[j];
                let by_count = dist.per_class_count[i] as f64 / dist.per_class_count[j] as f64;
                assert!((by_share - by_count).abs() < 1e-9);
                assert!((by_freq - by_count).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_nonzero_class_takes_full_share() {
        let v = vocab(&["only", "other"]);
        let dist = aggregate(&[record("a", vec![1, 0])], &v).unwrap();
        assert_eq!(dist.share_pct[0], 100.0);
        assert_eq!(dist.share_pct[1], 0.0);
    }

    #[test]
    fn emitted_csvs_round_trip_and_sort_descending() {
        let v = vocab(&["low", "high", "mid"]);
        let records = vec![
            record("1", vec![0, 1, 1]),
            record("2", vec![1, 1, 0]),
            record("3", vec![0, 1, 1]),
        ];
        let dist = aggregate(&records, &v).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let outputs = emit_chart_data(&dist, dir.path(), true).unwrap();

        let share_text = std::fs::read_to_string(&outputs.share_csv).unwrap();
        let mut lines = share_text.lines();
        assert_eq!(lines.next(), Some("class,share_pct"));
        let parsed: Vec<(String, f64)> = lines
            .map(|l| {
                let (c, v) = l.split_once(',').unwrap();
                (c.to_owned(), v.parse().unwrap())
            })
            .collect();
        assert_eq!(parsed[0].0, "high");
        assert!(parsed.windows(2).all(|w| w[0].1 >= w[1].1));
        for (class, value) in &parsed {
            let idx = dist.classes.iter().position(|c| c == class).unwrap();
            assert!((value - dist.share_pct[idx]).abs() < 1e-12);
        }
        assert!(outputs.share_svg.unwrap().is_file());
        assert!(outputs.frequency_svg.unwrap().is_file());
    }
}
