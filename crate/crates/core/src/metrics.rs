use cmunet_tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[t * k + p]` = pixels of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self { k, counts: vec![0; k * k] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Invalid("confusion matrix must be square".into()));
        }
        Ok(Self { k, counts: rows.concat() })
    }

    pub fn get(&self, t: usize, p: usize) -> u64 {
        self.counts[t * self.k + p]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k).map(<[u64]>::to_vec).collect()
    }

    pub fn update(&mut self, pred: &[u8], target: &[u8]) -> Result<()> {
        if pred.len() != target.len() {
            return Err(Error::Invalid(format!("prediction has {} pixels, target {}", pred.len(), target.len())));
        }
        if let Some(&c) = pred.iter().chain(target).find(|&&c| c as usize >= self.k) {
            return Err(Error::Invalid(format!("class {c} out of range for {} classes", self.k)));
        }
        for (&p, &t) in pred.iter().zip(target) {
            self.counts[t as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Invalid(format!("cannot merge {}-class and {}-class matrices", self.k, other.k)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

/// Per-pixel argmax over the class axis of `[B, K, H, W]` (lowest index wins ties).
pub fn argmax_classes<T: Element>(logits: &Tensor<T>) -> Vec<u8> {
    let s = logits.shape();
    let (b, k, hw) = (s[0], s[1], s[2] * s[3]);
    let z = logits.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if z[(bi * k + c) * hw + p] > z[(bi * k + best) * hw + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class: Vec<ClassMetrics>,
    #[serde(rename = "mF1")]
    pub mf1: f64,
    #[serde(rename = "mIoU")]
    pub miou: f64,
    #[serde(rename = "OA")]
    pub oa: f64,
    pub included_classes: Vec<usize>,
    pub cm: Vec<Vec<u64>>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall, F1 and IoU per class; means over `included`.
/// Any `0 / 0` evaluates to 0.
pub fn compute_metrics(cm: &ConfusionMatrix, included: &[usize]) -> Result<MetricReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Invalid("confusion matrix is empty".into()));
    }
    if let Some(&c) = included.iter().find(|&&c| c >= cm.k) {
        return Err(Error::Invalid(format!("included class {c} out of range")));
    }
    let k = cm.k;
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let fp: u64 = (0..k).filter(|&t| t != c).map(|t| cm.get(t, c)).sum();
            let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| cm.get(c, p)).sum();
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
            ClassMetrics { class: c, precision, recall, f1, iou: ratio(tp, tp + fp + fn_) }
        })
        .collect();
    let trace: u64 = (0..k).map(|c| cm.get(c, c)).sum();
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if included.is_empty() {
            0.0
        } else {
            included.iter().map(|&c| f(&per_class[c])).sum::<f64>() / included.len() as f64
        }
    };
    Ok(MetricReport {
        mf1: mean(|m| m.f1),
        miou: mean(|m| m.iou),
        oa: ratio(trace, total),
        per_class,
        included_classes: included.to_vec(),
        cm: cm.rows(),
    })
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Invalid(format!("metric report: {e}")))
    }

    /// Human-readable table of per-class F1 and the three means.
    pub fn table(&self, class_names: &[String]) -> String {
        let mut s = String::from("class            F1      IoU\n");
        for m in &self.per_class {
            let name = class_names.get(m.class).cloned().unwrap_or_else(|| format!("class{}", m.class));
            s += &format!("{name:<14} {:>6.4}  {:>6.4}\n", m.f1, m.iou);
        }
        s += &format!("mF1 {:.4}  mIoU {:.4}  OA {:.4}\n", self.mf1, self.miou, self.oa);
        s
    }
}
