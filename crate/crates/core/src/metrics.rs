//! Binarization, confusion counting and the binary change-detection scores.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::data::{BinaryMask, Grid};
use crate::error::{Error, Result};

/// Pixel is changed iff its probability is at least `threshold`.
pub fn binarize(map: &Grid<f64>, threshold: f64) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidValue(format!("threshold {threshold} outside (0, 1)")));
    }
    Ok(map.map(|v| u8::from(v >= threshold)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

pub fn accumulate_confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &y) in pred.data().iter().zip(gt.data()) {
        match (p, y) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => return Err(Error::InvalidValue(format!("non-binary pair ({p}, {y})"))),
        }
    }
    Ok(c)
}

/// Scores from global counts. A ratio with a zero denominator is reported as 0
/// and its name is listed in `degenerate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub kappa: f64,
    pub iou: f64,
    pub f1: f64,
    pub recall: f64,
    pub precision: f64,
    pub overall_accuracy: f64,
    pub counts: ConfusionCounts,
    pub degenerate: Vec<String>,
    pub patch_h: Option<usize>,
    pub patch_w: Option<usize>,
    pub checkpoint: Option<String>,
}

pub fn compute_metrics(c: &ConfusionCounts) -> Result<MetricsReport> {
    let n = c.total();
    if n == 0 {
        return Err(Error::InvalidValue("no pixels were evaluated".into()));
    }
    let mut degenerate = Vec::new();
    let mut ratio = |name: &str, num: f64, den: f64| {
        if den == 0.0 {
            degenerate.push(name.to_string());
            0.0
        } else {
            num / den
        }
    };
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let nf = n as f64;
    let precision = ratio("precision", tp, tp + fp);
    let recall = ratio("recall", tp, tp + fn_);
    // 2PR/(P+R) simplifies to 2tp/(2tp+fp+fn), which keeps F1 = 2·IoU/(1+IoU) exact
    let f1 = ratio("f1", 2.0 * tp, 2.0 * tp + fp + fn_);
    let iou = ratio("iou", tp, tp + fp + fn_);
    let overall_accuracy = (tp + tn) / nf;
    let pe = ((tp + fp) * (tp + fn_) + (fn_ + tn) * (fp + tn)) / (nf * nf);
    let kappa = ratio("kappa", overall_accuracy - pe, 1.0 - pe);
    if c.tp == 0 && !degenerate.iter().any(|d| d == "f1") {
        // precision + recall = 0
        degenerate.push("f1".to_string());
    }
    Ok(MetricsReport {
        kappa,
        iou,
        f1,
        recall,
        precision,
        overall_accuracy,
        counts: *c,
        degenerate,
        patch_h: None,
        patch_w: None,
        checkpoint: None,
    })
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str =
        "kappa,iou,f1,recall,precision,overall_accuracy,tp,fp,fn,tn,patch_h,patch_w,checkpoint";

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv_row(&self) -> String {
        let opt = |v: Option<usize>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.kappa,
            self.iou,
            self.f1,
            self.recall,
            self.precision,
            self.overall_accuracy,
            self.counts.tp,
            self.counts.fp,
            self.counts.fn_,
            self.counts.tn,
            opt(self.patch_h),
            opt(self.patch_w),
            self.checkpoint.as_deref().unwrap_or("")
        )
    }
}
