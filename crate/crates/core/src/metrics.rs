//! Confusion-based evaluation (accuracy, precision, recall, F1), timing
//! aggregation, and deterministic report emission in both machine-readable
//! and rendered-table form. Stego is the positive class throughout.

use crate::datapipe::Label;
use crate::genmode::Verdict;
use crate::model::Mode;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction/label length mismatch: {preds} predictions vs {golds} labels")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("empty confusion matrix: no evaluated examples")]
    EmptyConfusion,
    #[error("report has no result rows")]
    EmptyReport,
    #[error("bad report payload: {0}")]
    BadPayload(String),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

impl From<Label> for Verdict {
    fn from(l: Label) -> Self {
        match l {
            Label::Cover => Verdict::Cover,
            Label::Stego => Verdict::Stego,
        }
    }
}

/// Binary confusion counts with stego as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub true_pos: u64,
    pub true_neg: u64,
    pub false_pos: u64,
    pub false_neg: u64,
}

impl Confusion {
    /// Tallies predictions against gold labels. An unparseable prediction
    /// counts as the wrong class: a miss on stego, a false alarm on cover.
    pub fn from_pairs(preds: &[Verdict], golds: &[Label]) -> Result<Self> {
        if preds.len() != golds.len() {
            return Err(MetricsError::LengthMismatch {
                preds: preds.len(),
                golds: golds.len(),
            });
        }
        let mut c = Confusion::default();
        for (&p, &g) in preds.iter().zip(golds) {
            match (g, p) {
                (Label::Stego, Verdict::Stego) => c.true_pos += 1,
                (Label::Stego, _) => c.false_neg += 1,
                (Label::Cover, Verdict::Cover) => c.true_neg += 1,
                (Label::Cover, _) => c.false_pos += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.true_pos + self.true_neg + self.false_pos + self.false_neg
    }

    /// (TP + TN) / total. Errors on an empty confusion.
    pub fn accuracy(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(MetricsError::EmptyConfusion);
        }
        Ok((self.true_pos + self.true_neg) as f64 / self.total() as f64)
    }

    /// TP / (TP + FP); 0 when nothing was predicted positive.
    pub fn precision(&self) -> f64 {
        let denom = self.true_pos + self.false_pos;
        if denom == 0 {
            0.0
        } else {
            self.true_pos as f64 / denom as f64
        }
    }

    /// TP / (TP + FN); 0 when no positives exist.
    pub fn recall(&self) -> f64 {
        let denom = self.true_pos + self.false_neg;
        if denom == 0 {
            0.0
        } else {
            self.true_pos as f64 / denom as f64
        }
    }

    /// 2PR / (P + R), with F1 = 0 by convention when P + R = 0.
    pub fn f1(&self) -> f64 {
        let p = self.precision();
        let r = self.recall();
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// Renders a proportion as a percent string with two decimals: 0.625 → "62.50".
pub fn percent(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

/// Relative time saved going from `slow` to `fast`, as a fraction of `slow`.
pub fn time_reduction(slow: f64, fast: f64) -> f64 {
    (slow - fast) / slow
}

/// FNV-1a content hash rendered as fixed-width hex, for config provenance.
pub fn content_hash(bytes: &[u8]) -> String {
    format!("{:016x}", crate::rng::fnv1a64(bytes))
}

/// Aggregate of one metric across repeated seeded runs, reported as
/// mean ± half-range so the interval spans exactly [min, max].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedStats {
    pub values: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl SeedStats {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(MetricsError::EmptyReport);
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            values: values.to_vec(),
            mean,
            min,
            max,
        })
    }

    pub fn half_range(&self) -> f64 {
        (self.max - self.min) / 2.0
    }

    /// `"acc 95.25 ± 1.25 (min 94.00, max 96.50, n=5)"` with the metric
    /// rendered as a two-decimal percentage.
    pub fn render(&self, label: &str) -> String {
        format!(
            "{label} {} ± {} (min {}, max {}, n={})",
            percent(self.mean),
            percent(self.half_range()),
            percent(self.min),
            percent(self.max),
            self.values.len()
        )
    }
}

/// Reference wall-clock minutes for the two training modes, measured on the
/// original GPU experiment this system miniaturizes; rendered alongside
/// measured timings as a yardstick.
pub const REF_GEN_TRAIN_MINUTES: f64 = 33.72;
pub const REF_GEN_TRAIN_NO_DESC_MINUTES: f64 = 28.95;
pub const REF_CLS_TRAIN_MINUTES: f64 = 14.34;

/// Identifies the run that produced a report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunProvenance {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
}

/// One evaluated dataset: its confusion plus optional wall-clock seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub mode: Mode,
    pub confusion: Confusion,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seconds: Option<f64>,
}

pub const REPORT_FORMAT: &str = "lsgc-report-v1";

/// A full evaluation report: provenance plus per-dataset rows. Rendering is
/// a pure function of the contents, so identical stats give byte-identical
/// files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format: String,
    pub provenance: RunProvenance,
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn new(provenance: RunProvenance, rows: Vec<ReportRow>) -> Self {
        Self {
            format: REPORT_FORMAT.to_owned(),
            provenance,
            rows,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Report =
            serde_json::from_str(text).map_err(|e| MetricsError::BadPayload(e.to_string()))?;
        if r.format != REPORT_FORMAT {
            return Err(MetricsError::BadPayload(format!(
                "unknown report format {:?}",
                r.format
            )));
        }
        Ok(r)
    }

    /// Emits the machine-readable JSON section followed by the rendered
    /// table section in one deterministic string.
    pub fn render(&self) -> Result<String> {
        if self.rows.is_empty() {
            return Err(MetricsError::EmptyReport);
        }
        let mut out = String::new();
        out.push_str("#%machine json\n");
        out.push_str(&self.to_json());
        out.push_str("\n\n#%rendered\n");
        let _ = writeln!(out, "run      {}", self.provenance.command);
        let _ = writeln!(out, "seed     {}", self.provenance.seed);
        let _ = writeln!(out, "config   {}", self.provenance.config_hash);
        out.push('\n');
        let _ = writeln!(
            out,
            "{:<24} {:<4} {:>7} {:>7} {:>6} {:>6} {:>6} {:>6} {:>10}",
            "dataset", "mode", "acc%", "f1%", "tp", "tn", "fp", "fn", "time_s"
        );
        for row in &self.rows {
            let c = &row.confusion;
            let (acc, f1) = if c.total() == 0 {
                ("-".to_owned(), "-".to_owned())
            } else {
                (percent(c.accuracy()?), percent(c.f1()))
            };
            let secs = row
                .seconds
                .map(|s| format!("{s:.2}"))
                .unwrap_or_else(|| "-".to_owned());
            let _ = writeln!(
                out,
                "{:<24} {:<4} {:>7} {:>7} {:>6} {:>6} {:>6} {:>6} {:>10}",
                row.dataset,
                row.mode,
                acc,
                f1,
                c.true_pos,
                c.true_neg,
                c.false_pos,
                c.false_neg,
                secs
            );
        }
        // Mode-timing comparison: when both modes carry timings, show the
        // relative saving of classification over generation, next to the
        // reference yardstick.
        let mode_mean = |mode: Mode| {
            let times: Vec<f64> = self
                .rows
                .iter()
                .filter(|r| r.mode == mode)
                .filter_map(|r| r.seconds)
                .collect();
            if times.is_empty() {
                None
            } else {
                Some(times.iter().sum::<f64>() / times.len() as f64)
            }
        };
        if let (Some(t_gen), Some(t_cls)) = (mode_mean(Mode::Gen), mode_mean(Mode::Cls)) {
            out.push('\n');
            let _ = writeln!(out, "timing   gen {t_gen:.2}s  cls {t_cls:.2}s");
            let _ = writeln!(
                out,
                "reduction {}% (gen -> cls)",
                percent(time_reduction(t_gen, t_cls))
            );
            let _ = writeln!(
                out,
                "reference gen {REF_GEN_TRAIN_MINUTES:.2}min  cls {REF_CLS_TRAIN_MINUTES:.2}min  reduction {}%",
                percent(time_reduction(REF_GEN_TRAIN_MINUTES, REF_CLS_TRAIN_MINUTES))
            );
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    #[test]
    fn seed_stats_mean_and_range() {
        let s = SeedStats::from_values(&[0.94, 0.965, 0.9525, 0.95, 0.955]).unwrap();
        assert!((s.mean - 0.9525).abs() < 1e-12);
        assert_eq!(s.min, 0.94);
        assert_eq!(s.max, 0.965);
        assert!((s.half_range() - 0.0125).abs() < 1e-12);
        let line = s.render("acc");
        assert_eq!(line, "acc 95.25 ± 1.25 (min 94.00, max 96.50, n=5)");
        assert!(SeedStats::from_values(&[]).is_err());
    }

    #[test]
    fn seed_stats_single_value_has_zero_range() {
        let s = SeedStats::from_values(&[0.5]).unwrap();
        assert_eq!(s.mean, 0.5);
        assert_eq!(s.half_range(), 0.0);
    }

    fn conf(tp: u64, tn: u64, fp: u64, fn_: u64) -> Confusion {
        Confusion {
            true_pos: tp,
            true_neg: tn,
            false_pos: fp,
            false_neg: fn_,
        }
    }

    #[test]
    fn perfect_predictions_fill_the_diagonal() {
        let golds = [
            Label::Stego,
            Label::Stego,
            Label::Stego,
            Label::Stego,
            Label::Cover,
            Label::Cover,
            Label::Cover,
            Label::Cover,
        ];
        let preds: Vec<Verdict> = golds.iter().map(|&l| Verdict::from(l)).collect();
        let c = Confusion::from_pairs(&preds, &golds).unwrap();
        assert_eq!(c, conf(4, 4, 0, 0));
        assert_eq!(c.accuracy().unwrap(), 1.0);
        assert_eq!(c.f1(), 1.0);
    }

    #[test]
    fn all_stego_predictions_on_balanced_data() {
        let golds = [
            Label::Stego,
            Label::Stego,
            Label::Stego,
            Label::Stego,
            Label::Cover,
            Label::Cover,
            Label::Cover,
            Label::Cover,
        ];
        let preds = vec![Verdict::Stego; 8];
        let c = Confusion::from_pairs(&preds, &golds).unwrap();
        assert_eq!(c, conf(4, 0, 4, 0));
    }

    #[test]
    fn unparseable_counts_as_the_wrong_class() {
        let c = Confusion::from_pairs(
            &[Verdict::Unparseable, Verdict::Unparseable],
            &[Label::Stego, Label::Cover],
        )
        .unwrap();
        assert_eq!(c, conf(0, 0, 1, 1));
    }

    #[test]
    fn length_mismatch_is_a_contract_error() {
        let err = Confusion::from_pairs(&[Verdict::Cover], &[]).unwrap_err();
        assert!(matches!(
            err,
            MetricsError::LengthMismatch { preds: 1, golds: 0 }
        ));
    }

    #[test]
    fn accuracy_matches_hand_evaluation() {
        assert_eq!(conf(3, 2, 1, 2).accuracy().unwrap(), 0.625);
        assert_eq!(conf(5, 5, 0, 0).accuracy().unwrap(), 1.0);
        assert_eq!(conf(0, 0, 3, 3).accuracy().unwrap(), 0.0);
        assert!(matches!(
            conf(0, 0, 0, 0).accuracy(),
            Err(MetricsError::EmptyConfusion)
        ));
    }

    #[test]
    fn f1_matches_hand_evaluation() {
        assert_eq!(conf(4, 4, 0, 0).f1(), 1.0);
        assert_eq!(conf(0, 2, 0, 3).f1(), 0.0);
        let c = conf(3, 0, 1, 2);
        assert_eq!(c.precision(), 0.75);
        assert_eq!(c.recall(), 0.6);
        assert!((c.f1() - 2.0 * 0.45 / 1.35).abs() < 1e-12);
        assert!((c.f1() - 0.6667).abs() < 1e-4);
    }

    #[test]
    fn metrics_agree_with_brute_force_recount() {
        let mut rng = rng_from_seed(77);
        for _ in 0..100 {
            let n = rng.gen_range(1..60);
            let golds: Vec<Label> = (0..n)
                .map(|_| if rng.gen() { Label::Stego } else { Label::Cover })
                .collect();
            let preds: Vec<Verdict> = (0..n)
                .map(|_| match rng.gen_range(0..3) {
                    0 => Verdict::Cover,
                    1 => Verdict::Stego,
                    _ => Verdict::Unparseable,
                })
                .collect();
            let c = Confusion::from_pairs(&preds, &golds).unwrap();
            assert_eq!(c.total() as usize, n);
            let correct = preds
                .iter()
                .zip(&golds)
                .filter(|&(&p, &g)| p == Verdict::from(g))
                .count();
            assert!((c.accuracy().unwrap() - correct as f64 / n as f64).abs() < 1e-12);
            // Recount from the declared rule: an unparseable prediction is
            // treated as the wrong class, so it lands in the positive bucket
            // exactly when the gold label is cover.
            let tp = preds
                .iter()
                .zip(&golds)
                .filter(|&(&p, &g)| p == Verdict::Stego && g == Label::Stego)
                .count() as f64;
            let fp = preds
                .iter()
                .zip(&golds)
                .filter(|&(&p, &g)| p != Verdict::Cover && g == Label::Cover)
                .count() as f64;
            let gold_pos = golds.iter().filter(|&&g| g == Label::Stego).count() as f64;
            let p = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
            let r = if gold_pos == 0.0 { 0.0 } else { tp / gold_pos };
            let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            assert!((c.f1() - f1).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&c.f1()));
        }
    }

    #[test]
    fn percent_renders_two_decimals() {
        assert_eq!(percent(0.625), "62.50");
        assert_eq!(percent(1.0), "100.00");
        assert_eq!(percent(0.0), "0.00");
    }

    fn sample_report() -> Report {
        Report::new(
            RunProvenance {
                command: "bench".to_owned(),
                seed: 42,
                config_hash: content_hash(b"demo-config"),
            },
            vec![
                ReportRow {
                    dataset: "pool2/test".to_owned(),
                    mode: Mode::Cls,
                    confusion: conf(3, 2, 1, 2),
                    seconds: Some(60.0),
                },
                ReportRow {
                    dataset: "pool2/test".to_owned(),
                    mode: Mode::Gen,
                    confusion: conf(3, 3, 1, 1),
                    seconds: Some(120.0),
                },
            ],
        )
    }

    #[test]
    fn report_renders_deterministically_with_reduction_row() {
        let r = sample_report();
        let a = r.render().unwrap();
        let b = r.render().unwrap();
        assert_eq!(a, b, "same stats must give byte-identical reports");
        assert!(a.contains("62.50"), "accuracy percentage missing:\n{a}");
        assert!(a.contains("66.67"), "f1 percentage missing:\n{a}");
        assert!(a.contains("reduction 50.00% (gen -> cls)"), "{a}");
        assert!(a.contains("#%machine json"));
        assert!(a.contains("#%rendered"));
    }

    #[test]
    fn reference_reduction_matches_its_published_rounding() {
        // (33.72 - 14.34) / 33.72 = 0.574733... -> renders exactly as the
        // original table's 57.47%.
        let computed = time_reduction(REF_GEN_TRAIN_MINUTES, REF_CLS_TRAIN_MINUTES);
        assert_eq!(percent(computed), "57.47");
        assert!((computed * 100.0 - 57.47).abs() < 0.01);
        let rendered = sample_report().render().unwrap();
        assert!(rendered.contains("reduction 57.47%"), "{rendered}");
    }

    #[test]
    fn report_round_trips_through_json() {
        let r = sample_report();
        let back = Report::from_json(&r.to_json()).unwrap();
        assert_eq!(r, back);
        assert!(Report::from_json("{\"format\":\"nope\"}").is_err());
    }

    #[test]
    fn empty_report_is_rejected() {
        let r = Report::new(
            RunProvenance {
                command: "eval".to_owned(),
                seed: 0,
                config_hash: content_hash(b""),
            },
            vec![],
        );
        assert!(matches!(r.render(), Err(MetricsError::EmptyReport)));
    }

    #[test]
    fn rows_without_timing_render_placeholders() {
        let mut r = sample_report();
        r.rows.truncate(1);
        r.rows[0].seconds = None;
        let s = r.render().unwrap();
        assert!(!s.contains("reduction"), "no reduction without both modes");
        let row_line = s
            .lines()
            .find(|l| l.starts_with("pool2/test"))
            .expect("row rendered");
        assert!(row_line.trim_end().ends_with('-'), "missing placeholder: {row_line:?}");
    }
}
