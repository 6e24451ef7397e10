use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task_schema::TaskKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    MacroF1,
    Accuracy,
}

impl Metric {
    /// Macro-F1 for classification, accuracy for multi-choice.
    pub fn for_kind(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Classification => Metric::MacroF1,
            TaskKind::MultiChoice => Metric::Accuracy,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::MacroF1 => "macro_f1",
            Metric::Accuracy => "accuracy",
        }
    }

    pub fn compute(self, gold: &[usize], pred: &[usize], classes: usize) -> Result<f64> {
        match self {
            Metric::MacroF1 => macro_f1(gold, pred, classes),
            Metric::Accuracy => accuracy(gold, pred),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "macro_f1" | "f1" => Ok(Metric::MacroF1),
            "accuracy" | "acc" => Ok(Metric::Accuracy),
            other => Err(Error::Invalid(format!("unknown metric `{other}`"))),
        }
    }
}

fn check_lengths(gold: &[usize], pred: &[usize]) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(Error::LengthMismatch(gold.len(), pred.len()));
    }
    if gold.is_empty() {
        return Err(Error::Invalid("no predictions to score".into()));
    }
    Ok(())
}

/// Unweighted mean of per-class F1 over `classes` classes. A class whose
/// precision and recall are both zero (or undefined) scores 0.
pub fn macro_f1(gold: &[usize], pred: &[usize], classes: usize) -> Result<f64> {
    check_lengths(gold, pred)?;
    if classes == 0 {
        return Err(Error::Invalid("macro-F1 needs at least one class".into()));
    }
    if let Some(&bad) = gold.iter().chain(pred).find(|&&c| c >= classes) {
        return Err(Error::LabelIndex {
            index: bad,
            count: classes,
        });
    }
    let mut tp = vec![0usize; classes];
    let mut pred_count = vec![0usize; classes];
    let mut gold_count = vec![0usize; classes];
    for (&g, &p) in gold.iter().zip(pred) {
        gold_count[g] += 1;
        pred_count[p] += 1;
        if g == p {
            tp[g] += 1;
        }
    }
    let total: f64 = (0..classes)
        .map(|c| {
            let precision = if pred_count[c] > 0 {
                tp[c] as f64 / pred_count[c] as f64
            } else {
                0.0
            };
            let recall = if gold_count[c] > 0 {
                tp[c] as f64 / gold_count[c] as f64
            } else {
                0.0
            };
            if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / classes as f64)
}

pub fn accuracy(gold: &[usize], pred: &[usize]) -> Result<f64> {
    check_lengths(gold, pred)?;
    let hits = gold.iter().zip(pred).filter(|(g, p)| g == p).count();
    Ok(hits as f64 / gold.len() as f64)
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation (divides by `n`).
pub fn population_std(values: &[f64]) -> f64 {
    if values.len() <= 1 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn hand_computed_confusions() {
        // Class A: P = 1, R = 0.5; class B: P = 2/3, R = 1.
        let f1 = macro_f1(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert!((f1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
        assert!((f1 - 0.7333).abs() < 1e-4);
        let one_class = macro_f1(&[0, 0, 1, 1], &[0, 0, 0, 0], 2).unwrap();
        assert!((one_class - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(macro_f1(&[2, 0, 1], &[2, 0, 1], 3).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_counts() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 2, 3], &[0, 1, 2, 0]).unwrap(), 0.75);
    }

    #[test]
    fn metric_errors() {
        assert!(matches!(
            accuracy(&[0], &[0, 1]),
            Err(Error::LengthMismatch(1, 2))
        ));
        assert!(macro_f1(&[0, 3], &[0, 1], 2).is_err());
        assert!(macro_f1(&[], &[], 2).is_err());
    }

    #[test]
    fn symmetric_binary_fixture_f1_equals_accuracy() {
        // Balanced gold, one error in each direction.
        let gold = [0, 0, 0, 0, 1, 1, 1, 1];
        let pred = [0, 0, 0, 1, 1, 1, 1, 0];
        assert!(
            (macro_f1(&gold, &pred, 2).unwrap() - accuracy(&gold, &pred).unwrap()).abs() < 1e-12
        );
    }

    #[test]
    fn std_is_population() {
        assert_eq!(population_std(&[0.7]), 0.0);
        assert!((population_std(&[0.8, 0.6]) - 0.1).abs() < 1e-12);
        assert!((mean(&[0.8, 0.6]) - 0.7).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn f1_is_invariant_to_class_relabeling(
            pairs in proptest::collection::vec((0usize..3, 0usize..3), 1..40),
            perm_idx in 0usize..6,
        ) {
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let perm = perms[perm_idx];
            let gold: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let gold_p: Vec<usize> = gold.iter().map(|&c| perm[c]).collect();
            let pred_p: Vec<usize> = pred.iter().map(|&c| perm[c]).collect();
            let a = macro_f1(&gold, &pred, 3).unwrap();
            let b = macro_f1(&gold_p, &pred_p, 3).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
