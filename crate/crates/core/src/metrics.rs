//! Classification metrics with a confusion matrix (rows are true classes,
//! columns predictions).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    /// Undefined ratios (empty rows or columns) are reported as 0.
    pub fn from_predictions(predicted: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        if predicted.is_empty() {
            return Err(Error::Dataset("cannot evaluate an empty set".into()));
        }
        if predicted.len() != labels.len() {
            return Err(Error::shape("metrics", &[predicted.len()], &[labels.len()]));
        }
        let mut confusion = vec![vec![0; classes]; classes];
        for (&p, &l) in predicted.iter().zip(labels) {
            if p >= classes || l >= classes {
                return Err(Error::invalid("metrics", format!("class index out of range 0..{classes}")));
            }
            confusion[l][p] += 1;
        }
        let correct: usize = (0..classes).map(|k| confusion[k][k]).sum();
        let mut precision = Vec::with_capacity(classes);
        let mut recall = Vec::with_capacity(classes);
        let mut f1 = Vec::with_capacity(classes);
        for k in 0..classes {
            let column: usize = confusion.iter().map(|row| row[k]).sum();
            let row: usize = confusion[k].iter().sum();
            let p = ratio(confusion[k][k], column);
            let r = ratio(confusion[k][k], row);
            precision.push(p);
            recall.push(r);
            f1.push(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 });
        }
        Ok(Self {
            accuracy: ratio(correct, predicted.len()),
            precision,
            recall,
            f1,
            confusion,
        })
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    /// Confusion matrix as CSV with a header row of predicted classes.
    pub fn confusion_csv(&self, names: &[String]) -> String {
        let mut out = String::from("true\\predicted");
        for n in names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (name, row) in names.iter().zip(&self.confusion) {
            out.push_str(name);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Index of the largest entry in each `k`-wide row.
pub fn argmax_rows(values: &[f64], k: usize) -> Vec<usize> {
    values
        .chunks(k)
        .map(|row| row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting_example() {
        let m = Metrics::from_predictions(&[0, 1, 1], &[0, 1, 0], 2).unwrap();
        assert!((m.accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.confusion, vec![vec![1, 1], vec![0, 1]]);
    }

    #[test]
    fn all_correct_is_diagonal() {
        let m = Metrics::from_predictions(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.confusion, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 2]]);
    }

    #[test]
    fn recall_is_diagonal_over_row() {
        // rows: class 0 -> [2,1,0], class 1 -> [0,3,1], class 2 -> [1,0,2]
        let labels = [0, 0, 0, 1, 1, 1, 1, 2, 2, 2];
        let preds = [0, 0, 1, 1, 1, 1, 2, 0, 2, 2];
        let m = Metrics::from_predictions(&preds, &labels, 3).unwrap();
        assert_eq!(m.confusion, vec![vec![2, 1, 0], vec![0, 3, 1], vec![1, 0, 2]]);
        assert!((m.recall[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.recall[1] - 0.75).abs() < 1e-15);
        assert!((m.precision[1] - 0.75).abs() < 1e-15);
        assert!((m.precision[2] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_is_an_error() {
        assert!(Metrics::from_predictions(&[], &[], 2).is_err());
    }

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax_rows(&[0.1, 0.5, 0.5, 0.9, 0.0, 0.1], 3), vec![1, 0]);
    }
}
