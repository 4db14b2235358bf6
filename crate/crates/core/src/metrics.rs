//! Confusion counts, per-class IoU, partition means and their harmonic mean.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::pkl::LabelMask;

/// Truth label excluded from scoring.
pub const IGNORE: u32 = u32::MAX;

/// `counts[t][p]` over class ids `0..n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n: n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: u32, pred: u32) -> u64 {
        self.counts[truth as usize * self.n + pred as usize]
    }

    /// Sum of two matrices over the same classes.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.n != other.n {
            return Err(shape_err!("merge of {}- and {}-class matrices", self.n, other.n));
        }
        Ok(Self {
            n: self.n,
            counts: self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect(),
        })
    }

    /// Scored pixels.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Adds one count per pixel; truth pixels labelled [`IGNORE`] are skipped.
pub fn confusion_accumulate(pred: &LabelMask, truth: &LabelMask, mut acc: ConfusionMatrix) -> Result<ConfusionMatrix> {
    if pred.dims() != truth.dims() {
        return Err(shape_err!("prediction {:?} vs truth {:?}", pred.dims(), truth.dims()));
    }
    let n = acc.n as u32;
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        if t == IGNORE {
            continue;
        }
        if t >= n || p >= n {
            return Err(Error::Data(format!("label pair (truth {}, pred {}) outside {} classes", t, p, n)));
        }
        acc.counts[(t * n + p) as usize] += 1;
    }
    Ok(acc)
}

/// `TP / (TP + FP + FN)` per class; classes absent from both prediction
/// and truth are omitted.
pub fn iou_per_class(acc: &ConfusionMatrix) -> BTreeMap<u32, f64> {
    let n = acc.n;
    let mut out = BTreeMap::new();
    for c in 0..n {
        let tp = acc.counts[c * n + c];
        let row: u64 = acc.counts[c * n..(c + 1) * n].iter().sum();
        let col: u64 = (0..n).map(|t| acc.counts[t * n + c]).sum();
        let union = row + col - tp;
        if union > 0 {
            out.insert(c as u32, tp as f64 / union as f64);
        }
    }
    out
}

/// Harmonic mean, 0 when both are 0. Factored so equal inputs return
/// themselves exactly.
pub fn hiou(miou_b: f64, miou_n: f64) -> f64 {
    if miou_b + miou_n == 0.0 {
        0.0
    } else {
        miou_b * (2.0 * miou_n / (miou_b + miou_n))
    }
}

fn mean_over(ious: &BTreeMap<u32, f64>, ids: &[u32]) -> Option<f64> {
    let vals: Vec<f64> = ids.iter().filter_map(|c| ious.get(c).copied()).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_iou: BTreeMap<u32, f64>,
    pub miou_base: Option<f64>,
    pub miou_novel: Option<f64>,
    pub miou_overall: Option<f64>,
    pub hiou: Option<f64>,
    pub pixels: u64,
    pub images: u64,
}

impl EvalReport {
    /// Partition means over `base_ids` and `novel_ids`; a partition with no
    /// scored class has no mean, and hIoU needs both.
    pub fn from_confusion(acc: &ConfusionMatrix, base_ids: &[u32], novel_ids: &[u32], images: u64) -> Self {
        let ious = iou_per_class(acc);
        let miou_base = mean_over(&ious, base_ids);
        let miou_novel = mean_over(&ious, novel_ids);
        let all: Vec<u32> = base_ids.iter().chain(novel_ids).copied().collect();
        let miou_overall = mean_over(&ious, &all);
        let hiou = miou_base.zip(miou_novel).map(|(b, n)| hiou(b, n));
        let per_class_iou = ious.into_iter().filter(|(c, _)| all.contains(c)).collect();
        Self {
            per_class_iou,
            miou_base,
            miou_novel,
            miou_overall,
            hiou,
            pixels: acc.total(),
            images,
        }
    }

    pub const CSV_COLUMNS: [&'static str; 6] = ["miou_base", "miou_novel", "miou_overall", "hiou", "pixels", "images"];

    pub fn csv_header() -> String {
        Self::CSV_COLUMNS.join(",")
    }

    /// Values in [`Self::CSV_COLUMNS`] order; missing means print as `NA`.
    pub fn csv_row(&self) -> String {
        [
            fmt_opt(self.miou_base),
            fmt_opt(self.miou_novel),
            fmt_opt(self.miou_overall),
            fmt_opt(self.hiou),
            self.pixels.to_string(),
            self.images.to_string(),
        ]
        .join(",")
    }

    /// `key = value` lines in a fixed order, per-class IoU last.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("miou_base", fmt_opt(self.miou_base)),
            ("miou_novel", fmt_opt(self.miou_novel)),
            ("miou_overall", fmt_opt(self.miou_overall)),
            ("hiou", fmt_opt(self.hiou)),
            ("pixels", self.pixels.to_string()),
            ("images", self.images.to_string()),
        ] {
            let _ = writeln!(s, "{} = {}", k, v);
        }
        for (c, v) in &self.per_class_iou {
            let _ = writeln!(s, "iou.{} = {}", c, fmt(*v));
        }
        s
    }
}

/// Fixed six-decimal rendering used by every report.
pub fn fmt(v: f64) -> String {
    format!("{:.6}", v)
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_else(|| "NA".into())
}
