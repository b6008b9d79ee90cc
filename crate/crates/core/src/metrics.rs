//! F1 and accuracy over single-label 9-class predictions, plus the
//! fixed-width comparison table.

use std::fmt::Write as _;
use std::str::FromStr;

use rust_decimal::{Decimal, RoundingStrategy};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EmotionClass, NUM_CLASSES};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("cannot score an empty set of predictions")]
    EmptyInput,
}

/// Rows are gold classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
    total: u64,
}

impl ConfusionMatrix {
    pub fn from_pairs(pairs: &[(EmotionClass, EmotionClass)]) -> Self {
        let mut m = Self::default();
        for &(gold, pred) in pairs {
            m.counts[gold.index()][pred.index()] += 1;
            m.total += 1;
        }
        m
    }

    pub fn count(&self, gold: EmotionClass, predicted: EmotionClass) -> u64 {
        self.counts[gold.index()][predicted.index()]
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    /// Gold count of a class.
    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    /// Predicted count of a class.
    pub fn predicted(&self, class: usize) -> u64 {
        self.counts.iter().map(|row| row[class]).sum()
    }

    /// Per-class `(precision, recall, f1)`. An undefined ratio counts as 0.
    pub fn per_class(&self) -> [(f64, f64, f64); NUM_CLASSES] {
        std::array::from_fn(|c| {
            let tp = self.counts[c][c] as f64;
            let precision = ratio(tp, self.predicted(c) as f64);
            let recall = ratio(tp, self.support(c) as f64);
            (precision, recall, harmonic(precision, recall))
        })
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else if p == r {
        p
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub f1_macro: f64,
    pub f1_micro: f64,
    pub f1_weighted: f64,
    pub accuracy: f64,
    pub n: u64,
}

impl Scores {
    pub fn f1(&self, average: Average) -> f64 {
        match average {
            Average::Macro => self.f1_macro,
            Average::Micro => self.f1_micro,
            Average::Weighted => self.f1_weighted,
        }
    }
}

/// Averaging used for the headline F1 column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Average {
    #[default]
    Macro,
    Micro,
    Weighted,
}

impl Average {
    pub fn as_str(self) -> &'static str {
        match self {
            Average::Macro => "macro",
            Average::Micro => "micro",
            Average::Weighted => "weighted",
        }
    }
}

impl FromStr for Average {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "macro" => Ok(Average::Macro),
            "micro" => Ok(Average::Micro),
            "weighted" => Ok(Average::Weighted),
            other => Err(format!("unknown averaging `{other}`")),
        }
    }
}

/// Scores `(gold, predicted)` pairs. Macro F1 averages over all nine
/// classes, so a class absent from both gold and predictions contributes 0.
pub fn score(pairs: &[(EmotionClass, EmotionClass)]) -> Result<Scores, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let m = ConfusionMatrix::from_pairs(pairs);
    let per_class = m.per_class();
    let total = m.total() as f64;

    let f1_macro = per_class.iter().map(|c| c.2).sum::<f64>() / NUM_CLASSES as f64;
    let f1_weighted = per_class
        .iter()
        .enumerate()
        .map(|(c, s)| m.support(c) as f64 * s.2)
        .sum::<f64>()
        / total;

    // pooled counts: every error is one false positive and one false negative
    let tp = m.trace() as f64;
    let micro_p = ratio(tp, total);
    let micro_r = ratio(tp, total);
    let accuracy = tp / total;

    Ok(Scores {
        f1_macro,
        f1_micro: harmonic(micro_p, micro_r),
        f1_weighted,
        accuracy,
        n: m.total(),
    })
}

/// Rounds half-to-even at 3 decimals, operating on the shortest decimal
/// form of `value` (so 0.6225 rounds to 0.622).
pub fn round3(value: f64) -> String {
    match Decimal::from_str(&value.to_string()) {
        Ok(d) => {
            let r = d.round_dp_with_strategy(3, RoundingStrategy::MidpointNearestEven);
            format!("{r:.3}")
        }
        Err(_) => format!("{value:.3}"),
    }
}

/// Fixed-width `Method  F1  Acc` table, one row per method.
pub fn report(rows: &[(String, Scores)], average: Average) -> String {
    let width = rows
        .iter()
        .map(|(name, _)| name.chars().count())
        .chain(std::iter::once("Method".len()))
        .max()
        .unwrap_or(6);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>5}  {:>5}", "Method", "F1", "Acc");
    for (name, s) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>5}  {:>5}",
            name,
            round3(s.f1(average)),
            round3(s.accuracy)
        );
    }
    out
}

/// JSON record written by the `score` stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub method: String,
    pub f1_macro: f64,
    pub f1_micro: f64,
    pub f1_weighted: f64,
    pub accuracy: f64,
    pub n: u64,
}

impl ScoreRecord {
    pub fn new(method: impl Into<String>, s: &Scores) -> Self {
        Self {
            method: method.into(),
            f1_macro: s.f1_macro,
            f1_micro: s.f1_micro,
            f1_weighted: s.f1_weighted,
            accuracy: s.accuracy,
            n: s.n,
        }
    }
}
