//! Confusion matrices, classification rates, ROC/AUC and payoff profit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<u8>,
    /// `counts[actual][predicted]`, indexed by position in `classes`.
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(classes: Vec<u8>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = classes.len();
        if counts.len() != k || counts.iter().any(|r| r.len() != k) {
            return Err(Error::Input(format!("confusion counts are not {k}x{k}")));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    /// Binary matrix over classes `[0, 1]` with class 1 as the positive class.
    pub fn binary(tp: u64, fn_: u64, fp: u64, tn: u64) -> Self {
        ConfusionMatrix {
            classes: vec![0, 1],
            counts: vec![vec![tn, fp], vec![fn_, tp]],
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }

    /// Cell-wise sum; both matrices must share the class list.
    pub fn add(&self, other: &ConfusionMatrix) -> Result<ConfusionMatrix> {
        if self.classes != other.classes {
            return Err(Error::Input("confusion matrices have different classes".into()));
        }
        let counts = self
            .counts
            .iter()
            .zip(&other.counts)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        Ok(ConfusionMatrix {
            classes: self.classes.clone(),
            counts,
        })
    }
}

pub fn confusion(y_true: &[u8], y_pred: &[u8], classes: &[u8]) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Input(format!(
            "{} true labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let pos = |c: u8| {
        classes
            .iter()
            .position(|&k| k == c)
            .ok_or_else(|| Error::Input(format!("label {c} is not in the class list {classes:?}")))
    };
    let k = classes.len();
    let mut counts = vec![vec![0u64; k]; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        counts[pos(t)?][pos(p)?] += 1;
    }
    Ok(ConfusionMatrix {
        classes: classes.to_vec(),
        counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<u8>,
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub support: Vec<u64>,
    /// Recall of `classes[0]`; binary matrices only.
    pub specificity: Option<f64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    /// Set when some rate had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

impl MetricsReport {
    fn index(&self, class: u8) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    pub fn recall_of(&self, class: u8) -> Option<f64> {
        self.index(class).map(|i| self.recall[i])
    }

    pub fn precision_of(&self, class: u8) -> Option<f64> {
        self.index(class).map(|i| self.precision[i])
    }
}

pub fn classification_metrics(cm: &ConfusionMatrix) -> MetricsReport {
    let k = cm.classes.len();
    let total = cm.total();
    let mut degenerate = false;
    let mut ratio = |num: u64, den: u64| {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let accuracy = ratio(cm.trace(), total);
    let support: Vec<u64> = cm.counts.iter().map(|r| r.iter().sum()).collect();
    let predicted: Vec<u64> = (0..k).map(|j| cm.counts.iter().map(|r| r[j]).sum()).collect();
    let precision: Vec<f64> = (0..k).map(|i| ratio(cm.counts[i][i], predicted[i])).collect();
    let recall: Vec<f64> = (0..k).map(|i| ratio(cm.counts[i][i], support[i])).collect();
    let mean = |v: &[f64]| if k == 0 { 0.0 } else { v.iter().sum::<f64>() / k as f64 };
    let weighted = |v: &[f64]| {
        if total == 0 {
            0.0
        } else {
            v.iter().zip(&support).map(|(r, &s)| r * s as f64).sum::<f64>() / total as f64
        }
    };
    MetricsReport {
        classes: cm.classes.clone(),
        accuracy,
        specificity: (k == 2).then(|| recall[0]),
        macro_precision: mean(&precision),
        macro_recall: mean(&recall),
        weighted_precision: weighted(&precision),
        weighted_recall: weighted(&recall),
        precision,
        recall,
        support,
        degenerate,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` are called positive; `inf` for the origin.
    #[serde(with = "crate::report::f64_or_inf")]
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fpr,tpr,threshold\n");
        for p in &self.points {
            let t = if p.threshold.is_infinite() {
                "inf".to_string()
            } else {
                p.threshold.to_string()
            };
            out.push_str(&format!("{},{},{}\n", p.fpr, p.tpr, t));
        }
        out
    }
}

/// ROC curve and tie-aware AUC for labels in `{0, 1}` (1 = positive).
///
/// The area is accumulated as the exact integer `sum(dFP * (TP + TP_prev))`
/// over descending distinct scores and divided by `2PN` once, which equals
/// `(2 * ordered pairs + tied pairs) / 2PN`.
pub fn roc_auc(y_true: &[u8], scores: &[f64]) -> Result<RocCurve> {
    if y_true.len() != scores.len() {
        return Err(Error::Input(format!(
            "{} labels but {} scores",
            y_true.len(),
            scores.len()
        )));
    }
    if let Some(&bad) = y_true.iter().find(|&&c| c > 1) {
        return Err(Error::Input(format!("binary labels expected, found {bad}")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Input("scores contain NaN".into()));
    }
    let pos = y_true.iter().filter(|&&c| c == 1).count() as u64;
    let neg = y_true.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::AucUndefined(format!(
            "{pos} positive and {neg} negative rows; both classes are required"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut area: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp_prev, fp_prev) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if y_true[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area += u128::from(fp - fp_prev) * u128::from(tp + tp_prev);
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: s,
        });
    }
    let auc = area as f64 / (2 * u128::from(pos) * u128::from(neg)) as f64;
    Ok(RocCurve { points, auc })
}

/// Unweighted mean of one-vs-rest AUCs over the classes present in `y_true`.
/// `proba` columns follow `classes`.
pub fn multiclass_auc(y_true: &[u8], proba: &[Vec<f64>], classes: &[u8]) -> Result<f64> {
    if y_true.len() != proba.len() {
        return Err(Error::Input(format!(
            "{} labels but {} probability rows",
            y_true.len(),
            proba.len()
        )));
    }
    if proba.iter().any(|r| r.len() != classes.len()) {
        return Err(Error::Input("probability rows do not match the class list".into()));
    }
    let mut present: Vec<u8> = y_true.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::AucUndefined(format!(
            "{} class(es) present; at least two are required",
            present.len()
        )));
    }
    let mut total = 0.0;
    for &c in &present {
        let j = classes
            .iter()
            .position(|&k| k == c)
            .ok_or_else(|| Error::Input(format!("label {c} is not in the class list")))?;
        let y: Vec<u8> = y_true.iter().map(|&t| u8::from(t == c)).collect();
        let s: Vec<f64> = proba.iter().map(|r| r[j]).collect();
        total += roc_auc(&y, &s)?.auc;
    }
    Ok(total / present.len() as f64)
}

/// Per-cell values in integer cents, oriented like [`ConfusionMatrix`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayoffMatrix {
    pub cents: Vec<Vec<i64>>,
}

impl PayoffMatrix {
    pub fn from_cents(cents: Vec<Vec<i64>>) -> Result<Self> {
        let k = cents.len();
        if cents.iter().any(|r| r.len() != k) {
            return Err(Error::Input("payoff matrix must be square".into()));
        }
        Ok(PayoffMatrix { cents })
    }

    pub fn from_dollars(dollars: &[Vec<f64>]) -> Result<Self> {
        let mut cents = Vec::with_capacity(dollars.len());
        for row in dollars {
            let mut r = Vec::with_capacity(row.len());
            for &d in row {
                let c = (d * 100.0).round();
                if !c.is_finite() || c.abs() > i64::MAX as f64 / 2.0 {
                    return Err(Error::Input(format!("payoff value {d} is not a usable amount")));
                }
                r.push(c as i64);
            }
            cents.push(r);
        }
        Self::from_cents(cents)
    }

    /// Risk-model payoff over `[good, bad]`: +$200 for a good account booked,
    /// -$600 for a defaulter booked, nothing for declined applicants.
    pub fn default_risk() -> Self {
        PayoffMatrix {
            cents: vec![vec![20_000, 0], vec![-60_000, 0]],
        }
    }
}

/// `sum(counts[i][j] * payoff[i][j])` in cents.
pub fn profit(cm: &ConfusionMatrix, payoff: &PayoffMatrix) -> Result<i64> {
    let k = cm.classes.len();
    if payoff.cents.len() != k {
        return Err(Error::Input(format!(
            "payoff is {0}x{0} but the confusion matrix is {k}x{k}",
            payoff.cents.len()
        )));
    }
    let mut total: i128 = 0;
    for (crow, prow) in cm.counts.iter().zip(&payoff.cents) {
        for (&c, &p) in crow.iter().zip(prow) {
            total += i128::from(c) * i128::from(p);
        }
    }
    i64::try_from(total).map_err(|_| Error::Input("profit overflows 64-bit cents".into()))
}

/// `$-1,234.56` style rendering of a cent amount.
pub fn format_dollars(cents: i64) -> String {
    let sign = if cents < 0 { "-" } else { "" };
    let abs = cents.unsigned_abs();
    let whole = (abs / 100).to_string();
    let mut grouped = String::new();
    for (i, ch) in whole.chars().enumerate() {
        if i > 0 && (whole.len() - i).is_multiple_of(3) {
            grouped.push(',');
        }
        grouped.push(ch);
    }
    format!("{sign}${grouped}.{:02}", abs % 100)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    /// Builds label vectors with the requested cell multiplicities.
    fn labels_for(tp: usize, fn_: usize, fp: usize, tn: usize) -> (Vec<u8>, Vec<u8>) {
        let mut t = Vec::new();
        let mut p = Vec::new();
        for (n, a, b) in [(tp, 1, 1), (fn_, 1, 0), (fp, 0, 1), (tn, 0, 0)] {
            t.extend(std::iter::repeat_n(a, n));
            p.extend(std::iter::repeat_n(b, n));
        }
        (t, p)
    }

    #[test]
    fn identical_labels_give_a_diagonal() {
        let y = [0, 1, 2, 2, 1];
        let cm = confusion(&y, &y, &[0, 1, 2]).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 2]]);
        let m = classification_metrics(&cm);
        assert_eq!(m.accuracy, 1.0);
        assert!(m.precision.iter().chain(&m.recall).all(|&r| r == 1.0));
        assert!(!m.degenerate);
    }

    #[test]
    fn empty_input_gives_zero_matrix() {
        let cm = confusion(&[], &[], &[0, 1]).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(classification_metrics(&cm).degenerate);
    }

    #[test]
    fn confusion_errors() {
        assert!(matches!(confusion(&[0], &[], &[0, 1]), Err(Error::Input(_))));
        assert!(matches!(confusion(&[3], &[0], &[0, 1]), Err(Error::Input(_))));
    }

    #[test]
    fn risk_matrix_reproduces_from_labels() {
        let (t, p) = labels_for(15_275, 12_214, 7_406, 38_842);
        let cm = confusion(&t, &p, &[0, 1]).unwrap();
        assert_eq!(cm, ConfusionMatrix::binary(15_275, 12_214, 7_406, 38_842));
        let m = classification_metrics(&cm);
        assert_eq!(m.recall_of(1), Some(15_275.0 / 27_489.0));
        assert_eq!(m.specificity, Some(38_842.0 / 46_248.0));
        assert_eq!(m.accuracy, 54_117.0 / 73_737.0);
        assert!(close(m.recall[1], 0.557, 0.002));
        assert!(close(m.specificity.unwrap(), 0.841, 0.002));
        assert!(close(m.accuracy, 0.735, 0.002));
    }

    #[test]
    fn response_matrix_rates() {
        let m = classification_metrics(&ConfusionMatrix::binary(58_297, 15_440, 114_859, 38_842));
        assert!(close(m.recall[1], 0.7906, 5e-5));
        assert!(close(m.precision[1], 0.3367, 5e-5));
        assert!(close(m.recall[1], 0.791, 0.001));
        assert!(close(m.precision[1], 0.337, 0.001));
    }

    #[test]
    fn macro_and_weighted_averages() {
        let cm = ConfusionMatrix::from_counts(vec![0, 1], vec![vec![3, 1], vec![2, 4]]).unwrap();
        let m = classification_metrics(&cm);
        assert!(close(m.macro_recall, (0.75 + 4.0 / 6.0) / 2.0, 1e-15));
        assert!(close(m.weighted_recall, 0.7, 1e-15));
        assert!(close(m.weighted_recall, m.accuracy, 1e-15));
        assert!(close(m.macro_precision, (0.6 + 0.8) / 2.0, 1e-15));
    }

    #[test]
    fn zero_denominators_are_flagged() {
        let cm = ConfusionMatrix::from_counts(vec![0, 1], vec![vec![5, 0], vec![0, 0]]).unwrap();
        let m = classification_metrics(&cm);
        assert!(m.degenerate);
        assert_eq!(m.recall[1], 0.0);
        assert_eq!(m.precision[1], 0.0);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0, 0, 1, 1], &[0.1, 0.4, 0.35, 0.8]).unwrap().auc, 0.75);
        assert_eq!(roc_auc(&[0, 1, 0, 1], &[0.1, 0.9, 0.2, 0.8]).unwrap().auc, 1.0);
        assert_eq!(roc_auc(&[0, 1, 0, 1], &[0.5; 4]).unwrap().auc, 0.5);
        assert!(matches!(roc_auc(&[1, 1], &[0.2, 0.3]), Err(Error::AucUndefined(_))));
    }

    #[test]
    fn roc_csv_has_origin_and_corner() {
        let roc = roc_auc(&[0, 0, 1, 1], &[0.1, 0.4, 0.35, 0.8]).unwrap();
        let csv = roc.to_csv();
        assert!(csv.starts_with("fpr,tpr,threshold\n0,0,inf\n"));
        assert!(csv.trim_end().ends_with("1,1,0.1"));
    }

    #[test]
    fn multiclass_auc_examples() {
        let y = [0, 1, 2, 0, 1, 2];
        let perfect: Vec<Vec<f64>> = y
            .iter()
            .map(|&c| (0..3).map(|j| if j == c { 1.0 } else { 0.0 }).collect())
            .collect();
        assert_eq!(multiclass_auc(&y, &perfect, &[0, 1, 2]).unwrap(), 1.0);
        let uniform = vec![vec![1.0 / 3.0; 3]; 6];
        assert_eq!(multiclass_auc(&y, &uniform, &[0, 1, 2]).unwrap(), 0.5);
        assert!(multiclass_auc(&[1, 1], &vec![vec![0.5, 0.5]; 2], &[0, 1]).is_err());
    }

    #[test]
    fn multiclass_auc_is_mean_of_binary_aucs() {
        let y = [0, 1, 2, 2, 1, 0, 2, 1, 0, 0];
        let proba: Vec<Vec<f64>> = (0..10)
            .map(|i| {
                let a = ((i * 7) % 10) as f64 + 1.0;
                let b = ((i * 3) % 10) as f64 + 1.0;
                let c = ((i * 5 + 1) % 10) as f64 + 1.0;
                let s = a + b + c;
                vec![a / s, b / s, c / s]
            })
            .collect();
        let mut expected = 0.0;
        for c in 0..3u8 {
            let yb: Vec<u8> = y.iter().map(|&t| u8::from(t == c)).collect();
            let s: Vec<f64> = proba.iter().map(|r| r[c as usize]).collect();
            expected += roc_auc(&yb, &s).unwrap().auc;
        }
        assert_eq!(multiclass_auc(&y, &proba, &[0, 1, 2]).unwrap(), expected / 3.0);
    }

    #[test]
    fn profit_examples() {
        let p = PayoffMatrix::default_risk();
        assert_eq!(p, PayoffMatrix::from_dollars(&[vec![200.0, 0.0], vec![-600.0, 0.0]]).unwrap());
        let zero = ConfusionMatrix::binary(0, 0, 0, 0);
        assert_eq!(profit(&zero, &p).unwrap(), 0);
        // good predicted good = 100 (TN), bad predicted good = 10 (FN).
        let cm = ConfusionMatrix::binary(0, 10, 0, 100);
        assert_eq!(profit(&cm, &p).unwrap(), 1_400_000);
        assert_eq!(format_dollars(1_400_000), "$14,000.00");
        assert_eq!(format_dollars(-123_456_789), "-$1,234,567.89");
        let three = ConfusionMatrix::from_counts(vec![0, 1, 2], vec![vec![0; 3]; 3]).unwrap();
        assert!(matches!(profit(&three, &p), Err(Error::Input(_))));
    }

    fn brute_auc(y: &[u8], s: &[f64]) -> f64 {
        let mut num: u128 = 0;
        let (mut p, mut n) = (0u128, 0u128);
        for i in 0..y.len() {
            if y[i] == 1 {
                p += 1;
            } else {
                n += 1;
            }
        }
        for i in 0..y.len() {
            for j in 0..y.len() {
                if y[i] == 1 && y[j] == 0 {
                    if s[i] > s[j] {
                        num += 2;
                    } else if s[i] == s[j] {
                        num += 1;
                    }
                }
            }
        }
        num as f64 / (2 * p * n) as f64
    }

    fn binary_case() -> impl Strategy<Value = (Vec<u8>, Vec<f64>)> {
        (2usize..200).prop_flat_map(|n| {
            (
                prop::collection::vec(0u8..2, n),
                prop::collection::vec((0u8..12).prop_map(|v| v as f64 / 11.0), n),
            )
        })
    }

    proptest! {
        #[test]
        fn auc_equals_pair_counting((mut y, s) in binary_case()) {
            y[0] = 0;
            y[1] = 1;
            let roc = roc_auc(&y, &s).unwrap();
            prop_assert_eq!(roc.auc, brute_auc(&y, &s));
            prop_assert_eq!((roc.points[0].fpr, roc.points[0].tpr), (0.0, 0.0));
            let last = roc.points.last().unwrap();
            prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
            for w in roc.points.windows(2) {
                prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
                prop_assert!(w[1].threshold < w[0].threshold);
            }
        }

        #[test]
        fn metrics_are_permutation_equivariant(
            counts in prop::collection::vec(prop::collection::vec(0u64..50, 3), 3),
            perm_idx in 0usize..6,
        ) {
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let perm = perms[perm_idx];
            let cm = ConfusionMatrix::from_counts(vec![0, 1, 2], counts.clone()).unwrap();
            let permuted: Vec<Vec<u64>> = (0..3)
                .map(|i| (0..3).map(|j| counts[perm[i]][perm[j]]).collect())
                .collect();
            let pm = ConfusionMatrix::from_counts(vec![0, 1, 2], permuted).unwrap();
            let a = classification_metrics(&cm);
            let b = classification_metrics(&pm);
            for i in 0..3 {
                prop_assert_eq!(b.recall[i], a.recall[perm[i]]);
                prop_assert_eq!(b.precision[i], a.precision[perm[i]]);
            }
            prop_assert_eq!(a.accuracy, b.accuracy);
            for r in a.precision.iter().chain(&a.recall) {
                prop_assert!((0.0..=1.0).contains(r));
            }
        }

        #[test]
        fn profit_is_linear(
            a in prop::collection::vec(0u64..1_000_000, 4),
            b in prop::collection::vec(0u64..1_000_000, 4),
            p in prop::collection::vec(-100_000i64..100_000, 4),
        ) {
            let ca = ConfusionMatrix::binary(a[0], a[1], a[2], a[3]);
            let cb = ConfusionMatrix::binary(b[0], b[1], b[2], b[3]);
            let pay = PayoffMatrix::from_cents(vec![vec![p[0], p[1]], vec![p[2], p[3]]]).unwrap();
            let sum = ca.add(&cb).unwrap();
            prop_assert_eq!(profit(&sum, &pay).unwrap(), profit(&ca, &pay).unwrap() + profit(&cb, &pay).unwrap());
        }
    }
}
