//! Classification metrics over confusion matrices.
//!
//! Orientation: rows are true classes, columns are predicted classes.
//! Ratios with a zero denominator evaluate to 0 by convention, matching how
//! near-zero-support classes are reported.

use crate::data::LabelSpace;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// K x K matrix of (true, predicted) counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    k: usize,
    pub class_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn new(k: usize, class_names: Vec<String>) -> Result<Self> {
        if class_names.len() != k {
            return Err(Error::Data(format!(
                "{} class names for a {k}-class matrix",
                class_names.len()
            )));
        }
        Ok(ConfusionMatrix {
            counts: vec![0; k * k],
            k,
            class_names,
        })
    }

    pub fn from_pairs(truths: &[usize], preds: &[usize], k: usize) -> Result<Self> {
        let names = (0..k).map(|i| i.to_string()).collect();
        let mut cm = ConfusionMatrix::new(k, names)?;
        if truths.len() != preds.len() {
            return Err(Error::Data(format!(
                "{} truths vs {} predictions",
                truths.len(),
                preds.len()
            )));
        }
        for (&t, &p) in truths.iter().zip(preds) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn from_counts(counts: Vec<u64>, k: usize, class_names: Vec<String>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::Data(format!(
                "{} counts for a {k}x{k} matrix",
                counts.len()
            )));
        }
        if class_names.len() != k {
            return Err(Error::Data(format!(
                "{} class names for a {k}-class matrix",
                class_names.len()
            )));
        }
        Ok(ConfusionMatrix {
            counts,
            k,
            class_names,
        })
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.k || pred >= self.k {
            return Err(Error::Data(format!(
                "(true={truth}, pred={pred}) out of range for {} classes",
                self.k
            )));
        }
        self.counts[truth * self.k + pred] += 1;
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    /// True-class support of class `i`.
    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i * self.k..(i + 1) * self.k].iter().sum()
    }

    /// Predicted count of class `i`.
    pub fn col_sum(&self, i: usize) -> u64 {
        (0..self.k).map(|r| self.get(r, i)).sum()
    }

    /// CSV with class names on the header row and leading column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for name in &self.class_names {
            out.push(',');
            out.push_str(&csv_field(name));
        }
        out.push('\n');
        for i in 0..self.k {
            out.push_str(&csv_field(&self.class_names[i]));
            for j in 0..self.k {
                out.push_str(&format!(",{}", self.get(i, j)));
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// One-vs-rest counts for class `k`.
fn ovr(cm: &ConfusionMatrix, k: usize) -> (f64, f64, f64, f64) {
    let tp = cm.get(k, k) as f64;
    let fp = cm.col_sum(k) as f64 - tp;
    let fn_ = cm.row_sum(k) as f64 - tp;
    let tn = cm.total() as f64 - tp - fp - fn_;
    (tp, tn, fp, fn_)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-class accuracy, precision, recall and F1 from one-vs-rest counts.
pub fn class_metrics(cm: &ConfusionMatrix, k: usize) -> Result<ClassMetrics> {
    if k >= cm.k() {
        return Err(Error::Data(format!("class {k} out of range {}", cm.k())));
    }
    let (tp, tn, fp, fn_) = ovr(cm, k);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Ok(ClassMetrics {
        accuracy: ratio(tp + tn, tp + tn + fp + fn_),
        precision,
        recall,
        f1: ratio(2.0 * precision * recall, precision + recall),
    })
}

/// One-vs-rest Cohen's kappa for a single class.
pub fn class_kappa(cm: &ConfusionMatrix, k: usize) -> Result<f64> {
    if k >= cm.k() {
        return Err(Error::Data(format!("class {k} out of range {}", cm.k())));
    }
    let (tp, tn, fp, fn_) = ovr(cm, k);
    let total = tp + tn + fp + fn_;
    if total == 0.0 {
        return Err(Error::UndefinedMetric("kappa of an empty matrix".into()));
    }
    let po = (tp + tn) / total;
    let pe = ((tp + fp) * (tp + fn_) + (fn_ + tn) * (fp + tn)) / (total * total);
    if pe == 1.0 {
        return Ok(0.0);
    }
    Ok((po - pe) / (1.0 - pe))
}

pub fn overall_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::UndefinedMetric("overall accuracy of an empty matrix".into()));
    }
    Ok(cm.trace() as f64 / total as f64)
}

/// Diagonal mass over `subset` rows divided by those rows' total support.
pub fn subset_accuracy(cm: &ConfusionMatrix, subset: &[usize]) -> Result<f64> {
    let mut hit = 0u64;
    let mut support = 0u64;
    for &i in subset {
        if i >= cm.k() {
            return Err(Error::Data(format!("subset index {i} out of range {}", cm.k())));
        }
        hit += cm.get(i, i);
        support += cm.row_sum(i);
    }
    if support == 0 {
        return Err(Error::UndefinedMetric(
            "subset accuracy with zero subset support".into(),
        ));
    }
    Ok(hit as f64 / support as f64)
}

/// Cohen's kappa: (Po - Pe) / (1 - Pe), 0 when Pe = 1.
pub fn kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::UndefinedMetric("kappa of an empty matrix".into()));
    }
    let t = total as f64;
    let po = cm.trace() as f64 / t;
    let mut pe = 0.0;
    for i in 0..cm.k() {
        pe += cm.row_sum(i) as f64 * cm.col_sum(i) as f64;
    }
    pe /= t * t;
    if pe == 1.0 {
        return Ok(0.0);
    }
    Ok((po - pe) / (1.0 - pe))
}

/// Multiclass Matthews correlation: (c*s - sum p_k t_k) /
/// sqrt((s^2 - sum p_k^2)(s^2 - sum t_k^2)); 0 on a zero denominator.
pub fn mcc(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::UndefinedMetric("MCC of an empty matrix".into()));
    }
    let s = total as f64;
    let c = cm.trace() as f64;
    let mut sum_pt = 0.0;
    let mut sum_p2 = 0.0;
    let mut sum_t2 = 0.0;
    for k in 0..cm.k() {
        let t_k = cm.row_sum(k) as f64;
        let p_k = cm.col_sum(k) as f64;
        sum_pt += p_k * t_k;
        sum_p2 += p_k * p_k;
        sum_t2 += t_k * t_k;
    }
    let den = ((s * s - sum_p2) * (s * s - sum_t2)).sqrt();
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok((c * s - sum_pt) / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AverageMode {
    Macro,
    Weighted,
}

/// Macro (plain mean) or support-weighted average of per-class values.
pub fn averages(values: &[f64], supports: &[u64], mode: AverageMode) -> Result<f64> {
    if values.len() != supports.len() {
        return Err(Error::Data(format!(
            "{} values vs {} supports",
            values.len(),
            supports.len()
        )));
    }
    if values.is_empty() {
        return Err(Error::UndefinedMetric("average of no classes".into()));
    }
    match mode {
        AverageMode::Macro => Ok(values.iter().sum::<f64>() / values.len() as f64),
        AverageMode::Weighted => {
            let total: u64 = supports.iter().sum();
            if total == 0 {
                return Err(Error::UndefinedMetric("weighted average with zero support".into()));
            }
            Ok(values
                .iter()
                .zip(supports)
                .map(|(v, &n)| v * n as f64 / total as f64)
                .sum())
        }
    }
}

/// Collapse a 17x17 matrix onto the merged 8-class space: entry (g, h) sums
/// cm(i, j) over i in group g, j in group h, so within-group confusion
/// lands on the merged diagonal.
pub fn merge_confusion(cm: &ConfusionMatrix, space: LabelSpace) -> Result<ConfusionMatrix> {
    match space {
        LabelSpace::Original17 => {
            if cm.k() != 17 {
                return Err(Error::Data(format!("expected a 17x17 matrix, got {}", cm.k())));
            }
            Ok(cm.clone())
        }
        LabelSpace::Merged8 => {
            if cm.k() != 17 {
                return Err(Error::Data(format!("expected a 17x17 matrix, got {}", cm.k())));
            }
            let mut out = ConfusionMatrix::new(8, space.class_names())?;
            for i in 0..17 {
                for j in 0..17 {
                    let g = crate::data::MERGE_MAP[i];
                    let h = crate::data::MERGE_MAP[j];
                    out.counts[g * 8 + h] += cm.get(i, j);
                }
            }
            Ok(out)
        }
    }
}

/// Everything the evaluation reports: per-class metrics plus the aggregate
/// suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub class_names: Vec<String>,
    pub per_class: Vec<PerClassRow>,
    pub overall_accuracy: f64,
    pub built_up_accuracy: f64,
    pub natural_accuracy: f64,
    pub kappa: f64,
    pub mcc: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub macro_kappa: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub weighted_kappa: f64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassRow {
    pub name: String,
    pub support: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub kappa: f64,
}

impl MetricReport {
    /// Full report with the built-up/natural split taken from `space`.
    /// The matrix must live in that space already.
    pub fn compute(cm: &ConfusionMatrix, space: LabelSpace) -> Result<MetricReport> {
        if cm.k() != space.num_classes() {
            return Err(Error::Data(format!(
                "{}-class matrix in a {}-class label space",
                cm.k(),
                space.num_classes()
            )));
        }
        let mut per_class = Vec::with_capacity(cm.k());
        let mut supports = Vec::with_capacity(cm.k());
        for k in 0..cm.k() {
            let m = class_metrics(cm, k)?;
            let kap = class_kappa(cm, k)?;
            supports.push(cm.row_sum(k));
            per_class.push(PerClassRow {
                name: cm.class_names[k].clone(),
                support: cm.row_sum(k),
                accuracy: m.accuracy,
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
                kappa: kap,
            });
        }
        let col = |f: &dyn Fn(&PerClassRow) -> f64| per_class.iter().map(f).collect::<Vec<_>>();
        let precisions = col(&|r| r.precision);
        let recalls = col(&|r| r.recall);
        let f1s = col(&|r| r.f1);
        let kappas = col(&|r| r.kappa);
        Ok(MetricReport {
            class_names: cm.class_names.clone(),
            overall_accuracy: overall_accuracy(cm)?,
            built_up_accuracy: subset_accuracy(cm, &space.built_up_indices())?,
            natural_accuracy: subset_accuracy(cm, &space.natural_indices())?,
            kappa: kappa(cm)?,
            mcc: mcc(cm)?,
            macro_precision: averages(&precisions, &supports, AverageMode::Macro)?,
            macro_recall: averages(&recalls, &supports, AverageMode::Macro)?,
            macro_f1: averages(&f1s, &supports, AverageMode::Macro)?,
            macro_kappa: averages(&kappas, &supports, AverageMode::Macro)?,
            weighted_precision: averages(&precisions, &supports, AverageMode::Weighted)?,
            weighted_recall: averages(&recalls, &supports, AverageMode::Weighted)?,
            weighted_f1: averages(&f1s, &supports, AverageMode::Weighted)?,
            weighted_kappa: averages(&kappas, &supports, AverageMode::Weighted)?,
            total: cm.total(),
            per_class,
        })
    }

    /// Aggregates for synthetic class spaces where the built-up/natural
    /// partition is meaningless: subset accuracies mirror overall accuracy.
    pub fn compute_flat(cm: &ConfusionMatrix) -> Result<MetricReport> {
        let mut per_class = Vec::with_capacity(cm.k());
        let mut supports = Vec::with_capacity(cm.k());
        for k in 0..cm.k() {
            let m = class_metrics(cm, k)?;
            supports.push(cm.row_sum(k));
            per_class.push(PerClassRow {
                name: cm.class_names[k].clone(),
                support: cm.row_sum(k),
                accuracy: m.accuracy,
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
                kappa: class_kappa(cm, k)?,
            });
        }
        let oa = overall_accuracy(cm)?;
        let col = |f: &dyn Fn(&PerClassRow) -> f64| per_class.iter().map(f).collect::<Vec<_>>();
        let precisions = col(&|r| r.precision);
        let recalls = col(&|r| r.recall);
        let f1s = col(&|r| r.f1);
        let kappas = col(&|r| r.kappa);
        Ok(MetricReport {
            class_names: cm.class_names.clone(),
            overall_accuracy: oa,
            built_up_accuracy: oa,
            natural_accuracy: oa,
            kappa: kappa(cm)?,
            mcc: mcc(cm)?,
            macro_precision: averages(&precisions, &supports, AverageMode::Macro)?,
            macro_recall: averages(&recalls, &supports, AverageMode::Macro)?,
            macro_f1: averages(&f1s, &supports, AverageMode::Macro)?,
            macro_kappa: averages(&kappas, &supports, AverageMode::Macro)?,
            weighted_precision: averages(&precisions, &supports, AverageMode::Weighted)?,
            weighted_recall: averages(&recalls, &supports, AverageMode::Weighted)?,
            weighted_f1: averages(&f1s, &supports, AverageMode::Weighted)?,
            weighted_kappa: averages(&kappas, &supports, AverageMode::Weighted)?,
            total: cm.total(),
            per_class,
        })
    }
}
