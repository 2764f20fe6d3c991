//! Prompt records, corpus files, splits, and the synthetic generators.

mod generators;
mod rationale;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TslmError};
use crate::timeseries::TimeSeries;

pub use generators::*;
pub use rationale::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One normalized series with its original statistics and description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub desc: String,
}

impl Chunk {
    /// Normalize `raw` and describe it as `<label> data over <rate>`.
    pub fn from_raw(raw: TimeSeries, label: &str) -> Result<Self> {
        let n = raw.normalize()?;
        let desc = n.describe(label);
        Ok(Self { values: n.values, mean: n.mean, std: n.std, desc })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalPrompt {
    pub pre: String,
    pub chunks: Vec<Chunk>,
    pub post: String,
    pub target: String,
    pub label: String,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Trend,
    Caption,
    Har,
    Sleep,
    Ecg,
    Simulation,
}

impl Family {
    pub const ALL: [Family; 6] =
        [Family::Trend, Family::Caption, Family::Har, Family::Sleep, Family::Ecg, Family::Simulation];

    pub fn as_str(&self) -> &'static str {
        match self {
            Family::Trend => "trend",
            Family::Caption => "caption",
            Family::Har => "har",
            Family::Sleep => "sleep",
            Family::Ecg => "ecg",
            Family::Simulation => "simulation",
        }
    }

    /// Labels a classifier over this family chooses between.
    pub fn classes(&self) -> Vec<String> {
        let c: &[&str] = match self {
            Family::Trend => &TREND_CLASSES,
            Family::Har => &HAR_CLASSES,
            Family::Sleep => &SLEEP_CLASSES,
            Family::Ecg => &ECG_CLASSES,
            Family::Caption | Family::Simulation => &[],
        };
        c.iter().map(|s| s.to_string()).collect()
    }
}

impl FromStr for Family {
    type Err = TslmError;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| TslmError::Config(format!("unknown dataset family '{s}'")))
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn write_jsonl(path: &Path, corpus: &[MultimodalPrompt]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for s in corpus {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MultimodalPrompt>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: MultimodalPrompt = serde_json::from_str(&line)
            .map_err(|e| TslmError::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(s);
    }
    Ok(out)
}

/// Sizes of the train/val/test parts: `round(0.8 n)`, `round(0.1 n)`, rest.
pub fn split_sizes(n: usize) -> Result<(usize, usize, usize)> {
    if n < 10 {
        return Err(TslmError::CorpusTooSmall(n));
    }
    let train = (0.8 * n as f64).round() as usize;
    let val = (0.1 * n as f64).round() as usize;
    Ok((train, val, n - train - val))
}

/// Assign an 80/10/10 split through a seeded permutation; record order is
/// kept.
pub fn make_splits(corpus: &mut [MultimodalPrompt], seed: u64) -> Result<()> {
    let (train, val, _) = split_sizes(corpus.len())?;
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
    for (rank, &i) in idx.iter().enumerate() {
        corpus[i].split = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(())
}

/// Keeps the split permutation independent of the generator stream that
/// used the same seed.
const SPLIT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

pub fn by_split(corpus: &[MultimodalPrompt], split: Split) -> Vec<MultimodalPrompt> {
    corpus.iter().filter(|s| s.split == split).cloned().collect()
}

/// Per-split label counts, the stats sidecar of a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub family: String,
    pub total: usize,
    pub splits: BTreeMap<String, SplitStats>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub n: usize,
    pub labels: BTreeMap<String, usize>,
}

pub fn corpus_stats(family: Family, corpus: &[MultimodalPrompt]) -> CorpusStats {
    let mut splits: BTreeMap<String, SplitStats> =
        Split::ALL.iter().map(|s| (s.as_str().to_string(), SplitStats::default())).collect();
    for s in corpus {
        let e = splits.get_mut(s.split.as_str()).expect("split present");
        e.n += 1;
        *e.labels.entry(s.label.clone()).or_default() += 1;
    }
    CorpusStats { family: family.as_str().into(), total: corpus.len(), splits }
}

/// Label to admissible distractors.
#[derive(Debug, Clone, PartialEq)]
pub struct DissimilarityMap {
    map: BTreeMap<String, Vec<String>>,
}

impl DissimilarityMap {
    pub fn new(entries: &[(&str, &[&str])]) -> Result<Self> {
        let map: BTreeMap<String, Vec<String>> = entries
            .iter()
            .map(|(k, v)| (k.to_string(), v.iter().map(|s| s.to_string()).collect()))
            .collect();
        for (k, v) in &map {
            if v.is_empty() || v.contains(k) {
                return Err(TslmError::Config(format!("bad distractor list for {k}")));
            }
            if let Some(bad) = v.iter().find(|d| !map.contains_key(*d)) {
                return Err(TslmError::UnknownLabel(bad.clone()));
            }
        }
        Ok(Self { map })
    }

    pub fn distractors(&self, label: &str) -> Result<&[String]> {
        self.map.get(label).map(Vec::as_slice).ok_or_else(|| TslmError::UnknownLabel(label.into()))
    }

    pub fn labels(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn pick(&self, label: &str, rng: &mut impl rand::Rng) -> Result<String> {
        let d = self.distractors(label)?;
        Ok(d[rng.random_range(0..d.len())].clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dummy(n: usize) -> Vec<MultimodalPrompt> {
        (0..n)
            .map(|i| MultimodalPrompt {
                pre: String::new(),
                chunks: vec![],
                post: String::new(),
                target: format!("Answer: {}", i % 2),
                label: (i % 2).to_string(),
                split: Split::Train,
            })
            .collect()
    }

    #[test]
    fn thousand_splits_800_100_100() {
        let mut c = dummy(1000);
        make_splits(&mut c, 3).unwrap();
        let count = |s| c.iter().filter(|x| x.split == s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (800, 100, 100));
    }

    #[test]
    fn split_sizes_within_one_sample() {
        for n in 10..500 {
            let (a, b, c) = split_sizes(n).unwrap();
            assert_eq!(a + b + c, n);
            assert!((a as f64 - 0.8 * n as f64).abs() <= 1.0);
            assert!((b as f64 - 0.1 * n as f64).abs() <= 1.0);
            assert!((c as f64 - 0.1 * n as f64).abs() <= 1.0);
        }
        assert_eq!(split_sizes(9304).unwrap(), (7443, 930, 931));
        assert!(matches!(split_sizes(9), Err(TslmError::CorpusTooSmall(9))));
    }

    #[test]
    fn stats_count_every_record_once() {
        let mut c = dummy(50);
        make_splits(&mut c, 1).unwrap();
        let st = corpus_stats(Family::Trend, &c);
        assert_eq!(st.splits.values().map(|s| s.n).sum::<usize>(), 50);
        assert_eq!(st.splits["train"].labels.values().sum::<usize>(), 40);
    }

    #[test]
    fn jsonl_schema_and_roundtrip() {
        let mut c = dummy(10);
        c[0].chunks.push(Chunk { values: vec![-1.0, 1.0], mean: 5.0, std: 5.0, desc: "d".into() });
        let line = serde_json::to_string(&c[0]).unwrap();
        assert_eq!(
            line,
            r#"{"pre":"","chunks":[{"values":[-1.0,1.0],"mean":5.0,"std":5.0,"desc":"d"}],"post":"","target":"Answer: 0","label":"0","split":"train"}"#
        );
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        write_jsonl(&p, &c).unwrap();
        assert_eq!(read_jsonl(&p).unwrap(), c);
    }

    #[test]
    fn map_rejects_self_and_unknown() {
        assert!(DissimilarityMap::new(&[("a", &["a"]), ("b", &["a"])]).is_err());
        assert!(DissimilarityMap::new(&[("a", &["z"])]).is_err());
    }
}
