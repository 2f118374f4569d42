//! Accuracy, macro F1 and one-vs-rest macro AUROC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_pair(preds.len(), labels.len())?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

fn check_pair(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Contract(format!("{a} predictions for {b} labels")));
    }
    if a == 0 {
        return Err(Error::Contract("metrics need at least one sample".into()));
    }
    Ok(())
}

/// One-vs-rest counts for a single class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<Vec<Confusion>> {
    check_pair(preds.len(), labels.len())?;
    if let Some(&bad) = preds.iter().chain(labels).find(|&&c| c >= n_classes) {
        return Err(Error::Contract(format!("class {bad} outside 0..{n_classes}")));
    }
    let mut out = vec![Confusion::default(); n_classes];
    for (c, m) in out.iter_mut().enumerate() {
        for (&p, &l) in preds.iter().zip(labels) {
            match (p == c, l == c) {
                (true, true) => m.tp += 1,
                (true, false) => m.fp += 1,
                (false, true) => m.fn_ += 1,
                (false, false) => m.tn += 1,
            }
        }
    }
    Ok(out)
}

pub fn macro_f1(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    let cm = confusion(preds, labels, n_classes)?;
    for (c, m) in cm.iter().enumerate() {
        if m.tp + m.fp + m.fn_ == 0 {
            log::warn!("class {c} appears in neither predictions nor labels; its F1 counts as 0");
        }
    }
    Ok(cm.iter().map(Confusion::f1).sum::<f64>() / n_classes as f64)
}

/// Binary AUROC by average ranks (ties get half credit). `None` when one side is empty.
pub fn binary_auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Macro one-vs-rest AUROC over classes that have both positives and negatives.
/// `scores` holds one row of `n_classes` scores per sample.
pub fn auroc(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_pair(scores.len(), labels.len())?;
    let n_classes = scores[0].len();
    let mut total = 0.0;
    let mut used = 0;
    for c in 0..n_classes {
        let s: Vec<f64> = scores.iter().map(|row| row[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        match binary_auroc(&s, &pos) {
            Some(a) => {
                total += a;
                used += 1;
            }
            None => log::warn!("class {c} lacks positives or negatives; skipped in AUROC"),
        }
    }
    if used == 0 {
        return Err(Error::Undefined("AUROC: no class has both positives and negatives".into()));
    }
    Ok(total / used as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// `None` when no class has both positives and negatives.
    pub auroc: Option<f64>,
    pub per_class: Vec<ClassReport>,
}

impl EvalResult {
    /// `probs` are per-sample class probabilities; predictions are their argmax.
    pub fn compute(probs: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<Self> {
        let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
        let cm = confusion(&preds, labels, n_classes)?;
        let auroc = match auroc(probs, labels) {
            Ok(a) => Some(a),
            Err(Error::Undefined(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(EvalResult {
            accuracy: accuracy(&preds, labels)?,
            macro_f1: macro_f1(&preds, labels, n_classes)?,
            auroc,
            per_class: cm
                .into_iter()
                .enumerate()
                .map(|(class, m)| ClassReport {
                    class,
                    precision: m.precision(),
                    recall: m.recall(),
                    f1: m.f1(),
                    confusion: m,
                })
                .collect(),
        })
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

pub const SUMMARY_CSV_HEADER: &str = "metric,mean,std,repeats";

/// Aggregates repeated evaluations into `metric,mean,std,repeats` rows.
pub fn summary_csv(results: &[EvalResult]) -> String {
    let mut out = format!("{SUMMARY_CSV_HEADER}\n");
    let mut row = |name: &str, xs: Vec<f64>| {
        if !xs.is_empty() {
            let (m, s) = mean_std(&xs);
            out.push_str(&format!("{name},{m},{s},{}\n", xs.len()));
        }
    };
    row("accuracy", results.iter().map(|r| r.accuracy).collect());
    row("macro_f1", results.iter().map(|r| r.macro_f1).collect());
    row("auroc", results.iter().filter_map(|r| r.auroc).collect());
    out
}
