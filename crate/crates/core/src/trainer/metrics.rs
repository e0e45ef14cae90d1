use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};

/// Classification metrics over one labeled set. Rows of the confusion matrix
/// are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub total: u64,
    pub accuracy: f64,
    pub misclassified: u64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    /// True-class counts per class.
    pub support: Vec<u64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub confusion: Vec<Vec<u64>>,
    pub confusion_normalized: Vec<Vec<f64>>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl EvalReport {
    /// Builds the report from parallel `(predicted, actual)` class indices.
    pub fn from_predictions(predicted: &[usize], actual: &[usize], class_names: &[String]) -> Result<Self> {
        if predicted.is_empty() {
            return Err(Error::Empty("nothing to evaluate".into()));
        }
        if predicted.len() != actual.len() {
            return Err(Error::Shape(format!(
                "{} predictions for {} labels",
                predicted.len(),
                actual.len()
            )));
        }
        let k = class_names.len();
        let mut confusion = vec![vec![0u64; k]; k];
        for (&p, &a) in predicted.iter().zip(actual) {
            if p >= k || a >= k {
                return Err(Error::Shape(format!("class index {} out of range for {k} classes", p.max(a))));
            }
            confusion[a][p] += 1;
        }
        Ok(Self::from_confusion(confusion, class_names.to_vec()))
    }

    /// Derives every metric from a square count matrix.
    ///
    /// Macro averages run over classes that occur as a true or a predicted
    /// class; classes absent from both carry no information about the model.
    pub fn from_confusion(confusion: Vec<Vec<u64>>, class_names: Vec<String>) -> Self {
        let k = confusion.len();
        let support: Vec<u64> = confusion.iter().map(|row| row.iter().sum()).collect();
        let predicted: Vec<u64> = (0..k).map(|j| confusion.iter().map(|row| row[j]).sum()).collect();
        let total: u64 = support.iter().sum();
        let correct: u64 = (0..k).map(|i| confusion[i][i]).sum();

        let mut precision = Vec::with_capacity(k);
        let mut recall = Vec::with_capacity(k);
        let mut f1 = Vec::with_capacity(k);
        for i in 0..k {
            let tp = confusion[i][i];
            let p = ratio(tp, predicted[i]);
            let r = ratio(tp, support[i]);
            precision.push(p);
            recall.push(r);
            f1.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
        }
        let active: Vec<usize> = (0..k).filter(|&i| support[i] > 0 || predicted[i] > 0).collect();
        let mean = |v: &[f64]| {
            if active.is_empty() {
                0.0
            } else {
                active.iter().map(|&i| v[i]).sum::<f64>() / active.len() as f64
            }
        };
        let confusion_normalized = confusion
            .iter()
            .zip(&support)
            .map(|(row, &s)| row.iter().map(|&c| ratio(c, s)).collect())
            .collect();

        EvalReport {
            total,
            accuracy: ratio(correct, total),
            misclassified: total - correct,
            macro_precision: mean(&precision),
            macro_recall: mean(&recall),
            macro_f1: mean(&f1),
            precision,
            recall,
            f1,
            support,
            confusion,
            confusion_normalized,
            class_names,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Human-readable summary with a per-class table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let width = self.class_names.iter().map(|n| n.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(s, "samples        {}", self.total);
        let _ = writeln!(s, "accuracy       {:.6}", self.accuracy);
        let _ = writeln!(s, "misclassified  {}", self.misclassified);
        let _ = writeln!(s, "macro_precision {:.6}", self.macro_precision);
        let _ = writeln!(s, "macro_recall   {:.6}", self.macro_recall);
        let _ = writeln!(s, "macro_f1       {:.6}", self.macro_f1);
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>8}",
            "class", "precision", "recall", "f1", "support"
        );
        for i in 0..self.num_classes() {
            let _ = writeln!(
                s,
                "{:<width$}  {:>9.6}  {:>9.6}  {:>9.6}  {:>8}",
                self.class_names[i], self.precision[i], self.recall[i], self.f1[i], self.support[i]
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "row-normalized confusion (true \\ predicted)");
        let _ = write!(s, "{:<width$}", "");
        for name in &self.class_names {
            let _ = write!(s, "  {:>8.8}", name);
        }
        let _ = writeln!(s);
        for (name, row) in self.class_names.iter().zip(&self.confusion_normalized) {
            let _ = write!(s, "{:<width$}", name);
            for v in row {
                let _ = write!(s, "  {:>8.4}", v);
            }
            let _ = writeln!(s);
        }
        s
    }

    /// Raw counts as CSV with a header row of predicted class names.
    pub fn write_confusion_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let header: Vec<&str> = std::iter::once("true\\predicted")
            .chain(self.class_names.iter().map(String::as_str))
            .collect();
        let to_err = |e: csv::Error| Error::Record(e.to_string());
        w.write_record(&header).map_err(to_err)?;
        for (name, row) in self.class_names.iter().zip(&self.confusion) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec).map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::Record(e.to_string()))
    }
}
