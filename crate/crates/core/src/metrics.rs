//! Confusion counts, precision / recall / specificity / F1, and the
//! per-video → per-category → overall aggregation used by the report tables.
//!
//! Counts are summed over all frames of a video before any ratio is taken;
//! category scores are unweighted means over videos, and the overall score is
//! an unweighted mean over categories (or over videos, see [`OverallMode`]).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::iter::Sum;
use std::ops::{Add, AddAssign};

use mustan_autograd::ShapeError;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Tallies binary predictions against the target over pixels with `ignore == 0`.
pub fn confusion_counts(pred: &[u8], target: &[u8], ignore: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != target.len() || pred.len() != ignore.len() {
        return Err(ShapeError::new(format!(
            "confusion_counts: lengths {} / {} / {} differ",
            pred.len(),
            target.len(),
            ignore.len()
        ))
        .into());
    }
    let mut c = ConfusionCounts::default();
    for ((&p, &t), &ig) in pred.iter().zip(target).zip(ignore) {
        if ig != 0 {
            continue;
        }
        match (p != 0, t != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
}

impl Metrics {
    fn mean<'a>(items: impl IntoIterator<Item = &'a Metrics>) -> Metrics {
        let mut n = 0usize;
        let mut acc = [0.0; 4];
        for m in items {
            n += 1;
            acc[0] += m.precision;
            acc[1] += m.recall;
            acc[2] += m.specificity;
            acc[3] += m.f1;
        }
        let n = n.max(1) as f64;
        Metrics {
            precision: acc[0] / n,
            recall: acc[1] / n,
            specificity: acc[2] / n,
            f1: acc[3] / n,
        }
    }
}

/// A ratio whose denominator is zero has nothing to get wrong and scores 1.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics_from_counts(c: &ConfusionCounts) -> Metrics {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let specificity = ratio(c.tn, c.tn + c.fp);
    // Equal to 2PR/(P+R) under the conventions above, without its rounding.
    let f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
    Metrics {
        precision,
        recall,
        specificity,
        f1,
    }
}

/// How the overall row is averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverallMode {
    #[default]
    CategoryMean,
    VideoMean,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameCounts {
    pub video_id: String,
    pub category: String,
    pub counts: ConfusionCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub category: String,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Free-form tag such as `in-domain` or `ood`.
    pub label: Option<String>,
    pub per_video: BTreeMap<String, VideoMetrics>,
    pub per_category: BTreeMap<String, Metrics>,
    pub overall: Metrics,
    pub overall_mode: OverallMode,
}

pub fn aggregate_report(per_frame: &[FrameCounts]) -> Result<MetricsReport> {
    aggregate_report_with(per_frame, OverallMode::CategoryMean)
}

pub fn aggregate_report_with(per_frame: &[FrameCounts], mode: OverallMode) -> Result<MetricsReport> {
    if per_frame.is_empty() {
        return Err(Error::EmptyReport);
    }
    let mut videos: BTreeMap<String, (String, ConfusionCounts)> = BTreeMap::new();
    for f in per_frame {
        let entry = videos
            .entry(f.video_id.clone())
            .or_insert_with(|| (f.category.clone(), ConfusionCounts::default()));
        entry.1 += f.counts;
    }
    let per_video: BTreeMap<String, VideoMetrics> = videos
        .into_iter()
        .map(|(id, (category, counts))| {
            let metrics = metrics_from_counts(&counts);
            (
                id,
                VideoMetrics {
                    category,
                    counts,
                    metrics,
                },
            )
        })
        .collect();
    let mut by_cat: BTreeMap<String, Vec<Metrics>> = BTreeMap::new();
    for v in per_video.values() {
        by_cat.entry(v.category.clone()).or_default().push(v.metrics);
    }
    let per_category: BTreeMap<String, Metrics> = by_cat
        .into_iter()
        .map(|(c, ms)| (c, Metrics::mean(&ms)))
        .collect();
    let overall = match mode {
        OverallMode::CategoryMean => Metrics::mean(per_category.values()),
        OverallMode::VideoMean => Metrics::mean(per_video.values().map(|v| &v.metrics)),
    };
    Ok(MetricsReport {
        label: None,
        per_video,
        per_category,
        overall,
        overall_mode: mode,
    })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    label: &'a str,
    level: &'a str,
    name: &'a str,
    category: &'a str,
    tp: Option<u64>,
    fp: Option<u64>,
    #[serde(rename = "fn")]
    fn_: Option<u64>,
    tn: Option<u64>,
    precision: f64,
    recall: f64,
    specificity: f64,
    f1: f64,
}

impl MetricsReport {
    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    /// One row per video, one per category, and a final `overall` row; the
    /// first column repeats the report label.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let label = self.label.as_deref().unwrap_or("");
        for (id, v) in &self.per_video {
            w.serialize(CsvRow {
                label,
                level: "video",
                name: id,
                category: &v.category,
                tp: Some(v.counts.tp),
                fp: Some(v.counts.fp),
                fn_: Some(v.counts.fn_),
                tn: Some(v.counts.tn),
                precision: v.metrics.precision,
                recall: v.metrics.recall,
                specificity: v.metrics.specificity,
                f1: v.metrics.f1,
            })?;
        }
        let mut summary = |level: &str, name: &str, m: &Metrics| {
            w.serialize(CsvRow {
                label,
                level,
                name,
                category: name,
                tp: None,
                fp: None,
                fn_: None,
                tn: None,
                precision: m.precision,
                recall: m.recall,
                specificity: m.specificity,
                f1: m.f1,
            })
        };
        for (c, m) in &self.per_category {
            summary("category", c, m)?;
        }
        summary("overall", "Avg.", &self.overall)?;
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// Plain-text tables: per-category F1 with an `Avg.` row, then per-video
    /// F1 / precision / specificity / recall.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        if let Some(label) = &self.label {
            let _ = writeln!(s, "[{label}]");
        }
        let cat_w = self
            .per_category
            .keys()
            .map(String::len)
            .chain(["Category".len(), "Avg.".len()])
            .max()
            .unwrap_or(8);
        let _ = writeln!(
            s,
            "{:<cat_w$} | {:>8} | {:>9} | {:>8} | {:>11}",
            "Category", "F1", "Precision", "Recall", "Specificity"
        );
        let _ = writeln!(s, "{}", "-".repeat(cat_w + 49));
        for (c, m) in &self.per_category {
            let _ = writeln!(
                s,
                "{:<cat_w$} | {:>8.4} | {:>9.4} | {:>8.4} | {:>11.4}",
                c, m.f1, m.precision, m.recall, m.specificity
            );
        }
        let _ = writeln!(s, "{}", "-".repeat(cat_w + 49));
        let m = &self.overall;
        let _ = writeln!(
            s,
            "{:<cat_w$} | {:>8.4} | {:>9.4} | {:>8.4} | {:>11.4}",
            "Avg.", m.f1, m.precision, m.recall, m.specificity
        );
        let vid_w = self
            .per_video
            .keys()
            .map(String::len)
            .chain(["Video".len()])
            .max()
            .unwrap_or(5);
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<vid_w$} | {:>8} | {:>9} | {:>8} | {:>11}",
            "Video", "F1", "Precision", "Recall", "Specificity"
        );
        let _ = writeln!(s, "{}", "-".repeat(vid_w + 49));
        for (id, v) in &self.per_video {
            let m = &v.metrics;
            let _ = writeln!(
                s,
                "{:<vid_w$} | {:>8.4} | {:>9.4} | {:>8.4} | {:>11.4}",
                id, m.f1, m.precision, m.recall, m.specificity
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    fn frame(video: &str, cat: &str, c: ConfusionCounts) -> FrameCounts {
        FrameCounts {
            video_id: video.into(),
            category: cat.into(),
            counts: c,
        }
    }

    #[test]
    fn counts_on_the_four_pixel_example() {
        let c = confusion_counts(&[1, 0, 1, 0], &[1, 1, 0, 0], &[0; 4]).unwrap();
        assert_eq!(c, counts(1, 1, 1, 1));
        let m = metrics_from_counts(&c);
        assert_eq!((m.precision, m.recall, m.specificity, m.f1), (0.5, 0.5, 0.5, 0.5));
    }

    #[test]
    fn perfect_prediction_has_no_errors() {
        let t = [1, 0, 1, 1, 0];
        let c = confusion_counts(&t, &t, &[0; 5]).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let m = metrics_from_counts(&c);
        assert_eq!((m.precision, m.recall, m.specificity, m.f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn ignored_pixels_are_not_counted() {
        let c = confusion_counts(&[1, 0, 1], &[0, 1, 1], &[1, 1, 1]).unwrap();
        assert_eq!(c, ConfusionCounts::default());
    }

    #[test]
    fn empty_frame_predicted_empty_scores_one() {
        let m = metrics_from_counts(&counts(0, 0, 0, 50));
        assert_eq!((m.precision, m.recall, m.specificity, m.f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn no_true_positives_gives_zero_f1() {
        let m = metrics_from_counts(&counts(0, 3, 2, 10));
        assert_eq!(m.f1, 0.0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(confusion_counts(&[1, 0], &[1], &[0, 0]).is_err());
    }

    #[test]
    fn overall_is_mean_of_categories() {
        // Video a: F1 0.9 (tp 9, fp 1, fn 1); video b: F1 0.8 (tp 4, fp 1, fn 1).
        let r = aggregate_report(&[
            frame("a", "x", counts(9, 1, 1, 0)),
            frame("b", "y", counts(4, 1, 1, 0)),
        ])
        .unwrap();
        assert!((r.per_category["x"].f1 - 0.9).abs() < 1e-12);
        assert!((r.per_category["y"].f1 - 0.8).abs() < 1e-12);
        assert!((r.overall.f1 - 0.85).abs() < 1e-12);
    }

    #[test]
    fn single_video_report_is_consistent_at_every_level() {
        let r = aggregate_report(&[frame("v", "c", counts(5, 2, 1, 9)), frame("v", "c", counts(1, 0, 3, 4))]).unwrap();
        let v = r.per_video["v"].metrics;
        assert_eq!(v, r.per_category["c"]);
        assert_eq!(v, r.overall);
    }

    #[test]
    fn counts_are_summed_per_video_before_ratios() {
        // Frame-level F1 would be mean(1.0, 0.0) = 0.5; pooled counts give 2/3.
        let r = aggregate_report(&[frame("v", "c", counts(1, 0, 0, 0)), frame("v", "c", counts(0, 1, 0, 0))]).unwrap();
        assert_eq!(r.per_video["v"].counts, counts(1, 1, 0, 0));
        assert!((r.overall.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn video_mean_mode_weights_videos_equally() {
        let frames = [
            frame("a", "x", counts(1, 0, 0, 0)),
            frame("b", "x", counts(1, 0, 0, 0)),
            frame("c", "y", counts(0, 1, 0, 0)),
        ];
        let cat = aggregate_report_with(&frames, OverallMode::CategoryMean).unwrap();
        let vid = aggregate_report_with(&frames, OverallMode::VideoMean).unwrap();
        assert!((cat.overall.f1 - 0.5).abs() < 1e-12);
        assert!((vid.overall.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(matches!(aggregate_report(&[]), Err(Error::EmptyReport)));
    }

    #[test]
    fn csv_has_video_category_and_overall_rows() {
        let r = aggregate_report(&[frame("a", "x", counts(1, 1, 1, 1)), frame("b", "y", counts(2, 0, 0, 2))]).unwrap().with_label("ood");
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 2 + 2 + 1);
        assert!(lines[0].starts_with("label,level,name,category,tp,fp,fn,tn"));
        assert!(lines.last().unwrap().starts_with("ood,overall,Avg."));
    }

    #[test]
    fn table_has_a_row_per_category_and_an_average() {
        let r = aggregate_report(&[frame("a", "baseline", counts(1, 1, 1, 1)), frame("b", "PTZ", counts(2, 0, 0, 2))])
            .unwrap()
            .with_label("ood");
        let t = r.render_table();
        assert!(t.starts_with("[ood]"));
        assert!(t.contains("baseline"));
        assert!(t.contains("PTZ"));
        assert_eq!(t.lines().filter(|l| l.starts_with("Avg.")).count(), 1);
    }

    proptest! {
        #[test]
        fn metrics_stay_in_unit_interval(tp in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000, tn in 0u64..1000) {
            let m = metrics_from_counts(&counts(tp, fp, fn_, tn));
            for v in [m.precision, m.recall, m.specificity, m.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn f1_matches_count_identity(tp in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000, tn in 0u64..1000) {
            prop_assume!(tp + fp > 0 && tp + fn_ > 0 && tp > 0);
            let m = metrics_from_counts(&counts(tp, fp, fn_, tn));
            let identity = 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
            prop_assert!((m.f1 - identity).abs() < 1e-12);
        }

        #[test]
        fn counts_cover_every_valid_pixel(bits in proptest::collection::vec((0u8..2, 0u8..2, 0u8..2), 0..200)) {
            let pred: Vec<u8> = bits.iter().map(|b| b.0).collect();
            let target: Vec<u8> = bits.iter().map(|b| b.1).collect();
            let ignore: Vec<u8> = bits.iter().map(|b| b.2).collect();
            let c = confusion_counts(&pred, &target, &ignore).unwrap();
            prop_assert_eq!(c.total() as usize, ignore.iter().filter(|&&i| i == 0).count());
        }
    }
}
