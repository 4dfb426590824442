//! Corpus handling: filtering out too-short/too-long/garbled texts,
//! balancing classes by seeded subsampling, and stratified 6:2:2
//! train/val/test splitting.
//!
//! On disk a corpus is one JSON object per line with fields `text`,
//! `label`, `source`, `bpw`. Split files carry one extra provenance line
//! at the top recording the seed, ratios, split name, and record count.

use crate::rng::rng_from_seed;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("class {label} has {have} examples but {need} are required ({} short)", need - have)]
    ClassDeficit {
        label: Label,
        have: usize,
        need: usize,
    },
    #[error("need at least {min} examples to split, got {n}")]
    TooFewExamples { n: usize, min: usize },
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("{path}:{line}: bad record: {msg}")]
    BadRecord {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: provenance header says {expected} records, found {found}")]
    CountMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// Ground-truth class of a text. Cover is index 0, stego index 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Cover,
    Stego,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Cover => 0,
            Label::Stego => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Label::Cover),
            1 => Some(Label::Stego),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Cover => "cover",
            Label::Stego => "stego",
        })
    }
}

/// One corpus record. `bpw` is the embedding rate in bits per word
/// (0 for covers); `source` tags the generator and dial that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub text: String,
    pub label: Label,
    pub source: String,
    pub bpw: f64,
}

/// Accept/reject rules: length bounds in bytes plus a printable-ASCII
/// fraction floor operationalizing "garbled".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterRules {
    pub min_len: usize,
    pub max_len: usize,
    pub min_printable_frac: f64,
}

impl Default for FilterRules {
    fn default() -> Self {
        Self {
            min_len: 16,
            max_len: 400,
            min_printable_frac: 0.95,
        }
    }
}

impl FilterRules {
    /// Deterministic accept/reject; `Err` names the first failed rule.
    pub fn check(&self, text: &str) -> Result<(), String> {
        let len = text.len();
        if len < self.min_len {
            return Err(format!("too short: {len} bytes < min {}", self.min_len));
        }
        if len > self.max_len {
            return Err(format!("too long: {len} bytes > max {}", self.max_len));
        }
        let printable = text
            .bytes()
            .filter(|&b| (0x20..=0x7e).contains(&b))
            .count();
        let frac = printable as f64 / len as f64;
        if frac < self.min_printable_frac {
            return Err(format!(
                "garbled: printable fraction {frac:.3} < {}",
                self.min_printable_frac
            ));
        }
        Ok(())
    }
}

/// Index of the offending record plus the rule it broke.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub index: usize,
    pub rule: String,
}

/// Splits a corpus into the records passing every rule and a log of
/// rejections (record index, failed rule).
pub fn filter(
    corpus: Vec<LabeledExample>,
    rules: &FilterRules,
) -> (Vec<LabeledExample>, Vec<Rejection>) {
    let mut accepted = Vec::with_capacity(corpus.len());
    let mut rejected = Vec::new();
    for (index, ex) in corpus.into_iter().enumerate() {
        match rules.check(&ex.text) {
            Ok(()) => accepted.push(ex),
            Err(rule) => rejected.push(Rejection { index, rule }),
        }
    }
    (accepted, rejected)
}

/// Exactly `n_per_class` of each class, drawn uniformly with the seed,
/// order shuffled. A class with too few examples is a data error naming
/// the deficit.
pub fn balance(
    covers: Vec<LabeledExample>,
    stegos: Vec<LabeledExample>,
    n_per_class: usize,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    for (label, have) in [(Label::Cover, covers.len()), (Label::Stego, stegos.len())] {
        if have < n_per_class {
            return Err(DataError::ClassDeficit {
                label,
                have,
                need: n_per_class,
            });
        }
    }
    let mut rng = rng_from_seed(seed);
    let mut out = Vec::with_capacity(2 * n_per_class);
    for mut class in [covers, stegos] {
        let (picked, _) = class.partial_shuffle(&mut rng, n_per_class);
        out.extend_from_slice(picked);
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// 6:2:2 split, stratified by label, seeded. Within each label group the
/// sizes are ⌊0.6g⌋ / ⌊0.2g⌋ / remainder, so a balanced corpus of n
/// examples yields ⌊0.6n⌋ / ⌊0.2n⌋ / rest overall.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
}

pub const SPLIT_RATIOS: &str = "6:2:2";
const MIN_SPLIT_N: usize = 10;

pub fn split(
    examples: Vec<LabeledExample>,
    spec: &SplitSpec,
) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>, Vec<LabeledExample>)> {
    let n = examples.len();
    if n < MIN_SPLIT_N {
        return Err(DataError::TooFewExamples { n, min: MIN_SPLIT_N });
    }
    let mut rng = rng_from_seed(spec.seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for label in [Label::Cover, Label::Stego] {
        let mut group: Vec<LabeledExample> =
            examples.iter().filter(|e| e.label == label).cloned().collect();
        group.shuffle(&mut rng);
        let g = group.len();
        let n_train = g * 6 / 10;
        let n_val = g * 2 / 10;
        let mut it = group.into_iter();
        train.extend(it.by_ref().take(n_train));
        val.extend(it.by_ref().take(n_val));
        test.extend(it);
    }
    train.shuffle(&mut rng);
    val.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok((train, val, test))
}

/// First line of a split file: where the records came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitProvenance {
    pub split: String,
    pub seed: u64,
    pub ratios: String,
    pub count: usize,
}

fn io_err(path: &Path, e: std::io::Error) -> DataError {
    DataError::Io {
        path: path.to_owned(),
        msg: e.to_string(),
    }
}

/// Plain corpus file: one record per line, no header.
pub fn write_corpus(path: &Path, examples: &[LabeledExample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| io_err(path, e))?);
    for ex in examples {
        let line = serde_json::to_string(ex).expect("record serializes");
        writeln!(f, "{line}").map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<LabeledExample>> {
    let f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: LabeledExample = serde_json::from_str(&line).map_err(|e| DataError::BadRecord {
            path: path.to_owned(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

/// Split file: provenance header line, then one record per line.
pub fn write_split(
    dir: &Path,
    name: &str,
    examples: &[LabeledExample],
    seed: u64,
) -> Result<PathBuf> {
    let path = dir.join(format!("{name}.jsonl"));
    let header = SplitProvenance {
        split: name.to_owned(),
        seed,
        ratios: SPLIT_RATIOS.to_owned(),
        count: examples.len(),
    };
    let mut f =
        std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| io_err(&path, e))?);
    writeln!(f, "{}", serde_json::to_string(&header).expect("header serializes"))
        .map_err(|e| io_err(&path, e))?;
    for ex in examples {
        writeln!(f, "{}", serde_json::to_string(ex).expect("record serializes"))
            .map_err(|e| io_err(&path, e))?;
    }
    Ok(path)
}

pub fn read_split(path: &Path) -> Result<(SplitProvenance, Vec<LabeledExample>)> {
    let f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| DataError::BadRecord {
            path: path.to_owned(),
            line: 1,
            msg: "empty file (missing provenance header)".into(),
        })?
        .map_err(|e| io_err(path, e))?;
    let header: SplitProvenance =
        serde_json::from_str(&header_line).map_err(|e| DataError::BadRecord {
            path: path.to_owned(),
            line: 1,
            msg: format!("bad provenance header: {e}"),
        })?;
    let mut out = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: LabeledExample = serde_json::from_str(&line).map_err(|e| DataError::BadRecord {
            path: path.to_owned(),
            line: i + 2,
            msg: e.to_string(),
        })?;
        out.push(ex);
    }
    if out.len() != header.count {
        return Err(DataError::CountMismatch {
            path: path.to_owned(),
            expected: header.count,
            found: out.len(),
        });
    }
    Ok((header, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn ex(text: &str, label: Label) -> LabeledExample {
        LabeledExample {
            text: text.to_owned(),
            label,
            source: "test".into(),
            bpw: 0.0,
        }
    }

    fn corpus(n_cover: usize, n_stego: usize) -> Vec<LabeledExample> {
        let mut v = Vec::new();
        for i in 0..n_cover {
            v.push(ex(&format!("cover text number {i:05}"), Label::Cover));
        }
        for i in 0..n_stego {
            v.push(ex(&format!("stego text number {i:05}"), Label::Stego));
        }
        v
    }

    #[test]
    fn short_long_and_garbled_texts_are_rejected_with_named_rules() {
        let rules = FilterRules::default();
        let items = vec![
            ex("abc", Label::Cover),                       // 3 bytes
            ex(&"x".repeat(500), Label::Cover),            // too long
            ex(&"\u{0007}\u{0007}ab".repeat(8), Label::Cover), // 50% non-printable
            ex("a perfectly ordinary sentence", Label::Stego),
        ];
        let (accepted, rejected) = filter(items, &rules);
        assert_eq!(accepted.len(), 1);
        assert_eq!(accepted[0].label, Label::Stego);
        assert_eq!(rejected.len(), 3);
        assert_eq!(rejected[0].index, 0);
        assert!(rejected[0].rule.contains("too short"));
        assert!(rejected[1].rule.contains("too long"));
        assert!(rejected[2].rule.contains("garbled"));
    }

    #[test]
    fn all_accepting_rules_are_identity() {
        let rules = FilterRules {
            min_len: 0,
            max_len: usize::MAX,
            min_printable_frac: 0.0,
        };
        let items = corpus(5, 5);
        let (accepted, rejected) = filter(items.clone(), &rules);
        assert_eq!(accepted, items);
        assert!(rejected.is_empty());
    }

    #[test]
    fn filter_is_idempotent() {
        let mut rng = rng_from_seed(1);
        let mut items = Vec::new();
        for i in 0..200 {
            let len = rng.gen_range(1..60);
            let text: String = (0..len)
                .map(|_| {
                    if rng.gen_bool(0.9) {
                        rng.gen_range(b'a'..=b'z') as char
                    } else {
                        '\u{0001}'
                    }
                })
                .collect();
            items.push(LabeledExample {
                text,
                label: if i % 2 == 0 { Label::Cover } else { Label::Stego },
                source: "rnd".into(),
                bpw: 0.0,
            });
        }
        let rules = FilterRules::default();
        let (once, _) = filter(items, &rules);
        let (twice, rejected) = filter(once.clone(), &rules);
        assert_eq!(once, twice);
        assert!(rejected.is_empty());
    }

    #[test]
    fn balance_subsamples_to_exact_counts() {
        let covers: Vec<_> = corpus(1200, 0);
        let stegos: Vec<_> = corpus(0, 1000);
        let out = balance(covers, stegos, 1000, 7).unwrap();
        assert_eq!(out.len(), 2000);
        assert_eq!(out.iter().filter(|e| e.label == Label::Cover).count(), 1000);
        assert_eq!(out.iter().filter(|e| e.label == Label::Stego).count(), 1000);
    }

    #[test]
    fn balance_zero_gives_empty_and_deficit_names_class() {
        assert!(balance(corpus(3, 0), corpus(0, 3), 0, 1).unwrap().is_empty());
        let err = balance(corpus(3, 0), corpus(0, 10), 5, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("cover") && msg.contains('3') && msg.contains('5'), "{msg}");
    }

    #[test]
    fn balance_is_seed_deterministic_and_always_equal_counts() {
        let a = balance(corpus(50, 0), corpus(0, 40), 30, 9).unwrap();
        let b = balance(corpus(50, 0), corpus(0, 40), 30, 9).unwrap();
        assert_eq!(a, b);
        for seed in 0..5 {
            let out = balance(corpus(50, 0), corpus(0, 40), 30, seed).unwrap();
            let covers = out.iter().filter(|e| e.label == Label::Cover).count();
            assert_eq!(covers, 30);
            assert_eq!(out.len() - covers, 30);
        }
    }

    #[test]
    fn thousand_examples_split_600_200_200() {
        let (train, val, test) = split(corpus(500, 500), &SplitSpec { seed: 3 }).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (600, 200, 200));
        for part in [&train, &val, &test] {
            let covers = part.iter().filter(|e| e.label == Label::Cover).count();
            let stegos = part.len() - covers;
            assert!(covers.abs_diff(stegos) <= 1, "{covers} vs {stegos}");
        }
    }

    #[test]
    fn splits_are_disjoint_and_exhaustive() {
        let items = corpus(50, 50);
        let (train, val, test) = split(items.clone(), &SplitSpec { seed: 11 }).unwrap();
        let mut seen: Vec<&str> = train
            .iter()
            .chain(&val)
            .chain(&test)
            .map(|e| e.text.as_str())
            .collect();
        assert_eq!(seen.len(), items.len());
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), items.len(), "overlap between splits");
        let mut original: Vec<&str> = items.iter().map(|e| e.text.as_str()).collect();
        original.sort_unstable();
        assert_eq!(seen, original);
    }

    #[test]
    fn ten_examples_split_6_2_2_balanced() {
        let (train, val, test) = split(corpus(5, 5), &SplitSpec { seed: 2 }).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (6, 2, 2));
        for part in [&train, &val, &test] {
            let covers = part.iter().filter(|e| e.label == Label::Cover).count();
            assert!(covers.abs_diff(part.len() - covers) <= 1);
        }
    }

    #[test]
    fn split_is_seeded_and_too_small_corpus_errors() {
        let items = corpus(20, 20);
        let a = split(items.clone(), &SplitSpec { seed: 4 }).unwrap();
        let b = split(items.clone(), &SplitSpec { seed: 4 }).unwrap();
        assert_eq!(a, b);
        let c = split(items.clone(), &SplitSpec { seed: 5 }).unwrap();
        assert_ne!(a.0, c.0, "different seeds should permute differently");
        assert!(matches!(
            split(corpus(4, 5), &SplitSpec { seed: 1 }),
            Err(DataError::TooFewExamples { n: 9, min: 10 })
        ));
    }

    #[test]
    fn corpus_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let items = corpus(3, 3);
        write_corpus(&path, &items).unwrap();
        assert_eq!(read_corpus(&path).unwrap(), items);
    }

    #[test]
    fn split_file_round_trips_with_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let items = corpus(4, 4);
        let path = write_split(dir.path(), "train", &items, 42).unwrap();
        let (header, back) = read_split(&path).unwrap();
        assert_eq!(back, items);
        assert_eq!(header.split, "train");
        assert_eq!(header.seed, 42);
        assert_eq!(header.ratios, "6:2:2");
        assert_eq!(header.count, 8);
    }

    #[test]
    fn bad_record_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"text\":\"ok here\",\"label\":\"cover\",\"source\":\"t\",\"bpw\":0.0}\nnot json\n",
        )
        .unwrap();
        let err = read_corpus(&path).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn truncated_split_file_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let items = corpus(4, 4);
        let path = write_split(dir.path(), "val", &items, 1).unwrap();
        let content = std::fs::read_to_string(&path).unwrap();
        let truncated: Vec<&str> = content.lines().take(5).collect();
        std::fs::write(&path, truncated.join("\n")).unwrap();
        assert!(matches!(
            read_split(&path),
            Err(DataError::CountMismatch { expected: 8, found: 4, .. })
        ));
    }
}
