use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TslmError};

const MARKER: &str = "Answer:";

fn normalize_label(s: &str) -> String {
    s.to_lowercase().replace('_', " ").split_whitespace().collect::<Vec<_>>().join(" ")
}

/// The class named after the last `Answer:` in `text`, matched
/// case-insensitively (underscores count as spaces, a trailing period is
/// ignored). `None` when there is no marker or no class matches.
pub fn extract_answer(text: &str, classes: &[String]) -> Option<String> {
    let at = text.rfind(MARKER)?;
    let rest = &text[at + MARKER.len()..];
    let line = rest.lines().next().unwrap_or("");
    let cand = normalize_label(line.trim().trim_end_matches('.'));
    classes.iter().find(|c| normalize_label(c) == cand).cloned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Scores in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_class: Vec<ClassMetrics>,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub n_samples: usize,
    pub invalid_output_count: usize,
}

impl EvalResult {
    pub const CSV_HEADER: &'static str = "label,precision,recall,f1,support,macro_f1,accuracy,n_samples,invalid_output_count";

    /// One row per class plus a `__all__` summary row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for c in &self.per_class {
            s.push_str(&format!(
                "{},{:.4},{:.4},{:.4},{},,,,\n",
                c.label, c.precision, c.recall, c.f1, c.support
            ));
        }
        s.push_str(&format!(
            "__all__,,,,,{:.4},{:.4},{},{}\n",
            self.macro_f1, self.accuracy, self.n_samples, self.invalid_output_count
        ));
        s
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Non-negative fraction in lowest terms; `x / 0` reads as 0.
#[derive(Debug, Clone, Copy)]
struct Ratio {
    num: u128,
    den: u128,
}

impl Ratio {
    fn new(num: usize, den: usize) -> Self {
        if den == 0 || num == 0 {
            return Self { num: 0, den: 1 };
        }
        let g = gcd(num as u128, den as u128);
        Self { num: num as u128 / g, den: den as u128 / g }
    }

    fn checked_add(self, o: Self) -> Option<Self> {
        let g = gcd(self.den, o.den);
        let den = (self.den / g).checked_mul(o.den)?;
        let num = self.num.checked_mul(o.den / g)?.checked_add(o.num.checked_mul(self.den / g)?)?;
        let h = gcd(num, den).max(1);
        Some(Self { num: num / h, den: den / h })
    }

    fn checked_div(self, k: usize) -> Option<Self> {
        let g = gcd(self.num, k as u128).max(1);
        Some(Self { num: self.num / g, den: self.den.checked_mul(k as u128 / g)? })
    }

    /// Nearest double, when both terms are exact in f64 (one IEEE division
    /// then rounds once).
    fn exact_f64(self) -> Option<f64> {
        const EXACT: u128 = 1 << 53;
        (self.num <= EXACT && self.den <= EXACT).then(|| self.num as f64 / self.den as f64)
    }

    fn to_f64(self) -> f64 {
        self.exact_f64().unwrap_or(self.num as f64 / self.den as f64)
    }
}

/// Score parsed predictions; `None` is an invalid output and counts as a
/// miss for its true class and a hit for no class.
///
/// Every score is a ratio of counts and is reported as the double nearest
/// to its exact value. Macro-F1 falls back to float summation only if the
/// common denominator outgrows 2^53.
pub fn score_predictions(preds: &[Option<String>], labels: &[String], classes: &[String]) -> Result<EvalResult> {
    if preds.len() != labels.len() {
        return Err(TslmError::Shape(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if let Some(bad) = labels.iter().find(|l| !classes.contains(l)) {
        return Err(TslmError::UnknownLabel(bad.clone()));
    }
    let mut f1s = Vec::with_capacity(classes.len());
    let per_class: Vec<ClassMetrics> = classes
        .iter()
        .map(|c| {
            let tp = preds.iter().zip(labels).filter(|(p, l)| p.as_ref() == Some(c) && *l == c).count();
            let predicted = preds.iter().filter(|p| p.as_ref() == Some(c)).count();
            let support = labels.iter().filter(|l| *l == c).count();
            // harmonic mean of tp/predicted and tp/support
            let f = Ratio::new(200 * tp, predicted + support);
            f1s.push(f);
            ClassMetrics {
                label: c.clone(),
                precision: Ratio::new(100 * tp, predicted).to_f64(),
                recall: Ratio::new(100 * tp, support).to_f64(),
                f1: f.to_f64(),
                support,
            }
        })
        .collect();
    let correct = preds.iter().zip(labels).filter(|(p, l)| p.as_ref() == Some(l)).count();
    let macro_f1 = if classes.is_empty() {
        0.0
    } else {
        f1s.iter()
            .try_fold(Ratio::new(0, 1), |acc, f| acc.checked_add(*f))
            .and_then(|sum| sum.checked_div(classes.len()))
            .and_then(Ratio::exact_f64)
            .unwrap_or_else(|| f1s.iter().map(|f| f.to_f64()).sum::<f64>() / classes.len() as f64)
    };
    Ok(EvalResult {
        per_class,
        macro_f1,
        accuracy: Ratio::new(100 * correct, labels.len()).to_f64(),
        n_samples: labels.len(),
        invalid_output_count: preds.iter().filter(|p| p.is_none()).count(),
    })
}

/// Parse every output with [`extract_answer`] and score it.
pub fn score(outputs: &[String], labels: &[String], classes: &[String]) -> Result<EvalResult> {
    let preds: Vec<Option<String>> = outputs.iter().map(|o| extract_answer(o, classes)).collect();
    score_predictions(&preds, labels, classes)
}

/// Expected scores of a guesser that picks uniformly among the classes of
/// `distribution` (label to count).
pub fn random_baseline(distribution: &BTreeMap<String, usize>) -> Result<EvalResult> {
    let n: usize = distribution.values().sum();
    if distribution.is_empty() || n == 0 {
        return Err(TslmError::EmptyDistribution);
    }
    let k = distribution.len() as f64;
    let per_class: Vec<ClassMetrics> = distribution
        .iter()
        .map(|(label, &support)| {
            let prior = support as f64 / n as f64;
            let (p, r) = (prior, 1.0 / k);
            ClassMetrics { label: label.clone(), precision: 100.0 * p, recall: 100.0 * r, f1: 100.0 * f1(p, r), support }
        })
        .collect();
    Ok(EvalResult {
        macro_f1: per_class.iter().map(|c| c.f1).sum::<f64>() / k,
        per_class,
        accuracy: 100.0 / k,
        n_samples: n,
        invalid_output_count: 0,
    })
}
