use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `values > th`, strictly.
pub fn binarize(values: &[f64], th: f64) -> Vec<bool> {
    values.iter().map(|&v| v > th).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub pixel_acc: f64,
    pub fg_iou: f64,
    pub bg_iou: f64,
    /// Mean of foreground and background IoU.
    pub miou: f64,
}

/// IoU of one class; an empty union counts as a perfect match.
fn iou(inter: usize, union: usize) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn seg_metrics(pred: &[bool], gt: &[bool]) -> Result<SegMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::Eval(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Eval("empty mask".into()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let fg_iou = iou(tp, tp + fp + fn_);
    let bg_iou = iou(tn, tn + fp + fn_);
    Ok(SegMetrics {
        pixel_acc: (tp + tn) as f64 / pred.len() as f64,
        fg_iou,
        bg_iou,
        miou: (fg_iou + bg_iou) / 2.0,
    })
}

/// Average precision of `scores` ranking the positive `labels`: the sum over
/// distinct score thresholds of `(R_k - R_{k-1}) P_k`, tied scores forming
/// one threshold. `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::Eval("score and label counts differ".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap, mut last_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += labels[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        ap += (recall - last_recall) * (tp as f64 / seen as f64);
        last_recall = recall;
    }
    Ok(Some(ap))
}

/// `TP / (TP + FP + FN)` over annotation points, where points are
/// `(x, y)` pixel coordinates into a row-major mask of the given width.
pub fn point_iou(
    mask: &[bool],
    width: usize,
    positives: &[(usize, usize)],
    negatives: &[(usize, usize)],
) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::Eval("no positive points".into()));
    }
    let height = mask.len() / width.max(1);
    let at = |&(x, y): &(usize, usize)| -> Result<bool> {
        if x >= width || y >= height {
            return Err(Error::Eval(format!(
                "point ({x}, {y}) outside {width}x{height} mask"
            )));
        }
        Ok(mask[y * width + x])
    };
    let mut tp = 0;
    for p in positives {
        tp += at(p)? as usize;
    }
    let mut fp = 0;
    for p in negatives {
        fp += at(p)? as usize;
    }
    let fn_ = positives.len() - tp;
    Ok(tp as f64 / (tp + fp + fn_) as f64)
}
