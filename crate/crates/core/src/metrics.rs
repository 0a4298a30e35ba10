//! Confusion matrices, IoU/accuracy means, harmonic-mean IoU and frequency groups.

use std::fmt::Write as _;

use crate::{Error, Result};

/// `K × K` counts, rows ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
    /// Points of each ground-truth class that received no prediction (−1).
    pub unassigned: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { num_classes, counts: vec![0; num_classes * num_classes], unassigned: vec![0; num_classes] }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    /// Number of evaluated points.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.unassigned.iter().sum::<u64>()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Argument("confusion matrices of different sizes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.unassigned.iter_mut().zip(&other.unassigned) {
            *a += b;
        }
        Ok(())
    }

    pub fn true_positives(&self, k: usize) -> u64 {
        self.get(k, k)
    }

    pub fn gt_count(&self, k: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(k, p)).sum::<u64>() + self.unassigned[k]
    }

    pub fn pred_count(&self, k: usize) -> u64 {
        (0..self.num_classes).map(|g| self.get(g, k)).sum()
    }
}

/// Counts every point whose ground truth is not −1.
pub fn accumulate(pred: &[i32], gt: &[i32], num_classes: usize) -> Result<ConfusionMatrix> {
    if pred.len() != gt.len() {
        return Err(Error::Argument(format!("{} predictions for {} labels", pred.len(), gt.len())));
    }
    let k = num_classes as i32;
    let mut cm = ConfusionMatrix::new(num_classes);
    for (&p, &g) in pred.iter().zip(gt) {
        if g < -1 || g >= k {
            return Err(Error::Argument(format!("ground-truth label {g} outside [-1, {k})")));
        }
        if p < -1 || p >= k {
            return Err(Error::Argument(format!("prediction {p} outside [-1, {k})")));
        }
        if g == -1 {
            continue;
        }
        if p == -1 {
            cm.unassigned[g as usize] += 1;
        } else {
            cm.counts[g as usize * num_classes + p as usize] += 1;
        }
    }
    Ok(cm)
}

/// Per-class and mean scores in percent. Classes absent from both ground
/// truth and predictions have `None` IoU; classes without ground truth
/// have `None` accuracy.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationScores {
    pub iou: Vec<Option<f64>>,
    pub acc: Vec<Option<f64>>,
    pub miou: f64,
    pub macc: f64,
}

fn mean_of(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn miou_macc(cm: &ConfusionMatrix) -> Result<SegmentationScores> {
    let k = cm.num_classes;
    let mut iou = vec![None; k];
    let mut acc = vec![None; k];
    for c in 0..k {
        let tp = cm.true_positives(c) as f64;
        let gt = cm.gt_count(c) as f64;
        let pred = cm.pred_count(c) as f64;
        let union = gt + pred - tp;
        if union > 0.0 {
            iou[c] = Some(100.0 * tp / union);
        }
        if gt > 0.0 {
            acc[c] = Some(100.0 * tp / gt);
        }
    }
    let miou = mean_of(iou.iter().flatten().copied());
    let macc = mean_of(acc.iter().flatten().copied());
    match (miou, macc) {
        (Some(miou), Some(macc)) => Ok(SegmentationScores { iou, acc, miou, macc }),
        _ => Err(Error::Data("no class has ground-truth points".into())),
    }
}

/// Mean IoU over the given classes, skipping classes without a score.
pub fn group_miou(scores: &SegmentationScores, ids: &[usize]) -> Option<f64> {
    mean_of(ids.iter().filter_map(|&i| scores.iou.get(i).copied().flatten()))
}

/// Harmonic mean of seen and unseen mIoU.
pub fn hiou(miou_seen: f64, miou_unseen: f64) -> f64 {
    let s = miou_seen + miou_unseen;
    if s == 0.0 {
        0.0
    } else {
        2.0 * miou_seen * miou_unseen / s
    }
}

/// Splits classes by descending point count (ties by id) into three groups
/// of equal size; the first groups take the remainder.
pub fn split_head_common_tail(class_point_counts: &[u64]) -> Result<[Vec<usize>; 3]> {
    let k = class_point_counts.len();
    if k < 3 {
        return Err(Error::Argument(format!("need at least 3 classes to split, got {k}")));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| class_point_counts[b].cmp(&class_point_counts[a]).then(a.cmp(&b)));
    let base = k / 3;
    let rem = k % 3;
    let sizes = [base + (rem > 0) as usize, base + (rem > 1) as usize, base];
    let mut out: [Vec<usize>; 3] = Default::default();
    let mut it = order.into_iter();
    for (g, &n) in out.iter_mut().zip(&sizes) {
        g.extend(it.by_ref().take(n));
    }
    Ok(out)
}

/// Evaluation summary with optional group means.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub scores: SegmentationScores,
    /// Group name and mean IoU, e.g. head/common/tail or seen/unseen.
    pub groups: Vec<(String, Option<f64>)>,
    pub hiou: Option<f64>,
    pub points: u64,
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.1}"))
}

impl EvalReport {
    pub fn new(cm: &ConfusionMatrix, class_names: Vec<String>) -> Result<Self> {
        if class_names.len() != cm.num_classes {
            return Err(Error::Argument("class names do not match the confusion matrix".into()));
        }
        Ok(EvalReport { class_names, scores: miou_macc(cm)?, groups: Vec::new(), hiou: None, points: cm.total() })
    }

    pub fn with_group(mut self, name: &str, ids: &[usize]) -> Self {
        let m = group_miou(&self.scores, ids);
        self.groups.push((name.to_string(), m));
        self
    }

    /// Adds seen/unseen means and their harmonic mean.
    pub fn with_seen_unseen(self, seen: &[usize], unseen: &[usize]) -> Self {
        let mut r = self.with_group("seen", seen).with_group("unseen", unseen);
        let s = r.groups[r.groups.len() - 2].1;
        let u = r.groups[r.groups.len() - 1].1;
        r.hiou = match (s, u) {
            (Some(s), Some(u)) => Some(hiou(s, u)),
            _ => None,
        };
        r
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,iou,acc\n");
        for (i, n) in self.class_names.iter().enumerate() {
            let _ = writeln!(out, "{n},{},{}", pct(self.scores.iou[i]), pct(self.scores.acc[i]));
        }
        let _ = writeln!(out, "mIoU,{:.1},", self.scores.miou);
        let _ = writeln!(out, "mAcc,,{:.1}", self.scores.macc);
        for (g, v) in &self.groups {
            let _ = writeln!(out, "{g} mIoU,{},", pct(*v));
        }
        if let Some(h) = self.hiou {
            let _ = writeln!(out, "hIoU,{h:.1},");
        }
        out
    }

    pub fn to_pretty(&self) -> String {
        let w = self.class_names.iter().map(|n| n.len()).max().unwrap_or(5).max(10);
        let mut out = String::new();
        let _ = writeln!(out, "{:<w$}  {:>6}  {:>6}", "class", "IoU", "Acc");
        let _ = writeln!(out, "{}", "-".repeat(w + 16));
        for (i, n) in self.class_names.iter().enumerate() {
            let _ = writeln!(out, "{:<w$}  {:>6}  {:>6}", n, pct(self.scores.iou[i]), pct(self.scores.acc[i]));
        }
        let _ = writeln!(out, "{}", "-".repeat(w + 16));
        let _ = writeln!(out, "{:<w$}  {:>6.1}  {:>6.1}", "mean", self.scores.miou, self.scores.macc);
        for (g, v) in &self.groups {
            let _ = writeln!(out, "{:<w$}  {:>6}", format!("{g} mIoU"), pct(*v));
        }
        if let Some(h) = self.hiou {
            let _ = writeln!(out, "{:<w$}  {:>6.1}", "hIoU", h);
        }
        let _ = writeln!(out, "{} points evaluated", self.points);
        out
    }
}
