//! Confusion-based metrics, ROC AUC and the polygon area metric (PAM).
//! The positive class is "depressed".

use serde::{Deserialize, Serialize};

use crate::datapipe::Label;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a Label, &'a Label)>) -> Self {
        let mut c = Self::default();
        for (pred, truth) in pairs {
            match (pred, truth) {
                (Label::Depressed, Label::Depressed) => c.tp += 1,
                (Label::Control, Label::Control) => c.tn += 1,
                (Label::Depressed, Label::Control) => c.fp += 1,
                (Label::Control, Label::Depressed) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BasicMetrics {
    pub acc: f64,
    pub pre: f64,
    pub rec: f64,
    pub f1: f64,
    pub sp: f64,
    pub ji: f64,
    /// Names of metrics whose denominator was zero (reported as 0).
    pub degenerate: Vec<&'static str>,
}

fn ratio(num: usize, den: usize, name: &'static str, flags: &mut Vec<&'static str>) -> f64 {
    if den == 0 {
        flags.push(name);
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `None` when there are no counts at all.
pub fn basic_metrics(c: &ConfusionCounts) -> Option<BasicMetrics> {
    if c.total() == 0 {
        return None;
    }
    let mut flags = Vec::new();
    let acc = (c.tp + c.tn) as f64 / c.total() as f64;
    let pre = ratio(c.tp, c.tp + c.fp, "pre", &mut flags);
    let rec = ratio(c.tp, c.tp + c.fn_, "rec", &mut flags);
    let f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, "f1", &mut flags);
    let sp = ratio(c.tn, c.tn + c.fp, "sp", &mut flags);
    let ji = ratio(c.tp, c.tp + c.fp + c.fn_, "ji", &mut flags);
    Some(BasicMetrics { acc, pre, rec, f1, sp, ji, degenerate: flags })
}

/// Area under the ROC curve by trapezoidal integration over every score
/// threshold (ties step diagonally). `None` if either class is absent.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len());
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let (tp0, fp0) = (tp, fp);
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] { tp += 1 } else { fp += 1 }
            i += 1;
        }
        area += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
    }
    Some(area / (n_pos * n_neg) as f64)
}

const PAM_CONSTANT: f64 = 2.59807;

/// Polygon area metric over (Acc, Rec, SP, JI, F1, AUC), adjacent pairs in
/// that cyclic order.
pub fn pam(acc: f64, rec: f64, sp: f64, ji: f64, f1: f64, auc: f64) -> f64 {
    let s = acc * rec + rec * sp + sp * ji + ji * f1 + f1 * auc + auc * acc;
    3f64.sqrt() * s / (4.0 * PAM_CONSTANT)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    pub acc: f64,
    pub pre: f64,
    pub rec: f64,
    pub f1: f64,
    pub sp: f64,
    pub ji: f64,
    pub auc: f64,
    pub pam: f64,
    pub degenerate: Vec<String>,
}

impl MetricBlock {
    /// `scores` are positive-class probabilities aligned with `truth`.
    pub fn compute(predicted: &[Label], truth: &[Label], scores: &[f64]) -> Option<Self> {
        let counts = ConfusionCounts::from_pairs(predicted.iter().zip(truth));
        let b = basic_metrics(&counts)?;
        let mut degenerate: Vec<String> = b.degenerate.iter().map(|s| s.to_string()).collect();
        let positive: Vec<bool> = truth.iter().map(|&l| l == Label::Depressed).collect();
        let auc = roc_auc(scores, &positive).unwrap_or_else(|| {
            degenerate.push("auc".into());
            0.0
        });
        Some(Self {
            acc: b.acc,
            pre: b.pre,
            rec: b.rec,
            f1: b.f1,
            sp: b.sp,
            ji: b.ji,
            auc,
            pam: pam(b.acc, b.rec, b.sp, b.ji, b.f1, auc),
            degenerate,
        })
    }
}

/// Two-sided 95% binomial acceptance interval for the number of successes
/// in `n` trials at probability `p` (exact tail sums).
pub fn binomial_interval_95(n: usize, p: f64) -> (usize, usize) {
    let pmf: Vec<f64> = (0..=n)
        .map(|k| {
            let ln_c = ln_choose(n, k);
            (ln_c + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()).exp()
        })
        .collect();
    let mut lo = 0;
    let mut acc = 0.0;
    while lo < n && acc + pmf[lo] <= 0.025 {
        acc += pmf[lo];
        lo += 1;
    }
    let mut hi = n;
    acc = 0.0;
    while hi > 0 && acc + pmf[hi] <= 0.025 {
        acc += pmf[hi];
        hi -= 1;
    }
    (lo, hi)
}

fn ln_choose(n: usize, k: usize) -> f64 {
    (1..=k).map(|i| ((n - k + i) as f64 / i as f64).ln()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hand_example() {
        let c = ConfusionCounts { tp: 3, tn: 5, fp: 1, fn_: 1 };
        let m = basic_metrics(&c).unwrap();
        assert_abs_diff_eq!(m.acc, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(m.pre, 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(m.rec, 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(m.f1, 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(m.sp, 5.0 / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.ji, 0.6, epsilon = 1e-12);
        assert!(m.degenerate.is_empty());
    }

    #[test]
    fn degenerate_precision() {
        let m = basic_metrics(&ConfusionCounts { tp: 0, tn: 4, fp: 0, fn_: 0 }).unwrap();
        assert_eq!(m.pre, 0.0);
        assert!(m.degenerate.contains(&"pre"));
        assert!(basic_metrics(&ConfusionCounts::default()).is_none());
    }

    #[test]
    fn perfect_classifier() {
        let m = basic_metrics(&ConfusionCounts { tp: 2, tn: 3, fp: 0, fn_: 0 }).unwrap();
        for x in [m.acc, m.pre, m.rec, m.f1, m.sp, m.ji] {
            assert_eq!(x, 1.0);
        }
    }

    #[test]
    fn auc_cases() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]), Some(1.0));
        assert_eq!(roc_auc(&[0.5; 4], &[true, false, true, false]), Some(0.5));
        assert_eq!(roc_auc(&[0.5, 0.2], &[true, true]), None);
    }

    #[test]
    fn pam_anchors() {
        assert_abs_diff_eq!(pam(1., 1., 1., 1., 1., 1.), 1.0, epsilon = 1e-4);
        assert_eq!(pam(0., 0., 0., 0., 0., 0.), 0.0);
        assert_abs_diff_eq!(pam(0.5, 0.5, 0.5, 0.5, 0.5, 0.5), 0.25, epsilon = 1e-4);
    }

    #[test]
    fn binomial_interval_is_symmetric_at_half() {
        let (lo, hi) = binomial_interval_95(52, 0.5);
        assert_eq!(lo + hi, 52);
        assert!(lo > 15 && lo < 26);
    }
}
