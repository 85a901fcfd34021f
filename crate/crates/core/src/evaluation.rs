//! Binary classification metrics, stratified k-fold splits and report
//! assembly. Malignant (label 1) is the positive class.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn n(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.n() as f64
    }

    /// `None` when there are no positives.
    pub fn sensitivity(&self) -> Option<f64> {
        let pos = self.tp + self.fn_;
        (pos > 0).then(|| self.tp as f64 / pos as f64)
    }

    /// `None` when there are no negatives.
    pub fn specificity(&self) -> Option<f64> {
        let neg = self.tn + self.fp;
        (neg > 0).then(|| self.tn as f64 / neg as f64)
    }
}

fn check_labels(labels: &[u8]) -> Result<()> {
    match labels.iter().find(|&&l| l > 1) {
        Some(l) => Err(Error::Contract(format!("label {l} is not 0 or 1"))),
        None => Ok(()),
    }
}

pub fn confusion(pred: &[u8], truth: &[u8]) -> Result<Confusion> {
    if pred.len() != truth.len() {
        return Err(Error::Contract(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    if truth.is_empty() {
        return Err(Error::Contract("no predictions to score".into()));
    }
    check_labels(pred)?;
    check_labels(truth)?;
    let mut c = Confusion {
        tp: 0,
        tn: 0,
        fp: 0,
        fn_: 0,
    };
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (1, 0) => c.fp += 1,
            _ => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

pub fn confusion_metrics(pred: &[u8], truth: &[u8]) -> Result<ConfusionMetrics> {
    let c = confusion(pred, truth)?;
    Ok(ConfusionMetrics {
        accuracy: c.accuracy(),
        sensitivity: c.sensitivity(),
        specificity: c.specificity(),
    })
}

/// Area under the ROC curve as the Mann–Whitney statistic, ties counting
/// one half.
pub fn roc_auc(scores: &[f64], truth: &[u8]) -> Result<f64> {
    if scores.len() != truth.len() {
        return Err(Error::Contract(format!("{} scores for {} labels", scores.len(), truth.len())));
    }
    check_labels(truth)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Contract("NaN score".into()));
    }
    let n_pos = truth.iter().filter(|&&t| t == 1).count() as u64;
    let n_neg = truth.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Contract("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the U statistic, so ties stay integral
    let mut twice_u = 0u64;
    let mut neg_below = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if truth[order[j]] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_u += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// Indices into the dataset for one fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Each class is shuffled separately; the classes are then laid end to end
/// and dealt round-robin into `k` test folds.
pub fn stratified_kfold(labels: &[u8], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    check_labels(labels)?;
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    let mut rng = stream(seed, "kfold");
    let mut dealt = Vec::with_capacity(labels.len());
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < k {
            return Err(Error::Config(format!(
                "class {class} has {} cases, fewer than {k} folds",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        dealt.extend(members);
    }
    let mut tests = vec![Vec::new(); k];
    for (pos, &i) in dealt.iter().enumerate() {
        tests[pos % k].push(i);
    }
    Ok(tests
        .into_iter()
        .enumerate()
        .map(|(k_idx, mut test)| {
            test.sort_unstable();
            let train = (0..labels.len()).filter(|i| test.binary_search(i).is_err()).collect();
            FoldSplit { k: k_idx, train, test }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub k: usize,
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub auc: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub auc: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Mean of the per-fold metrics.
    #[default]
    Mean,
    /// Metrics over all test predictions pooled together.
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub seed: u64,
    pub aggregation: Aggregation,
    pub threshold: f64,
    pub folds: Vec<FoldMetrics>,
    pub aggregate: Aggregate,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

pub fn predict_labels(scores: &[f64], threshold: f64) -> Vec<u8> {
    scores.iter().map(|&s| u8::from(s >= threshold)).collect()
}

/// Scores every fold with `score_fold`, which returns the malignant
/// probability of each test case of the fold in order.
pub fn evaluate_folds<F>(
    model: &str,
    seed: u64,
    labels: &[u8],
    folds: &[FoldSplit],
    threshold: f64,
    aggregation: Aggregation,
    mut score_fold: F,
) -> Result<EvalReport>
where
    F: FnMut(&FoldSplit) -> Result<Vec<f64>>,
{
    let mut fold_metrics = Vec::with_capacity(folds.len());
    let (mut all_scores, mut all_truth) = (Vec::new(), Vec::new());
    for fold in folds {
        let scores = score_fold(fold)?;
        if scores.len() != fold.test.len() {
            return Err(Error::Contract(format!(
                "fold {}: {} scores for {} test cases",
                fold.k,
                scores.len(),
                fold.test.len()
            )));
        }
        let truth: Vec<u8> = fold.test.iter().map(|&i| labels[i]).collect();
        let m = confusion_metrics(&predict_labels(&scores, threshold), &truth)?;
        fold_metrics.push(FoldMetrics {
            k: fold.k,
            accuracy: m.accuracy,
            sensitivity: m.sensitivity,
            specificity: m.specificity,
            auc: roc_auc(&scores, &truth).ok(),
        });
        all_scores.extend(scores);
        all_truth.extend(truth);
    }
    let aggregate = match aggregation {
        Aggregation::Mean => Aggregate {
            accuracy: fold_metrics.iter().map(|f| f.accuracy).sum::<f64>() / fold_metrics.len().max(1) as f64,
            sensitivity: mean_defined(fold_metrics.iter().map(|f| f.sensitivity)),
            specificity: mean_defined(fold_metrics.iter().map(|f| f.specificity)),
            auc: mean_defined(fold_metrics.iter().map(|f| f.auc)),
        },
        Aggregation::Pooled => {
            let m = confusion_metrics(&predict_labels(&all_scores, threshold), &all_truth)?;
            Aggregate {
                accuracy: m.accuracy,
                sensitivity: m.sensitivity,
                specificity: m.specificity,
                auc: roc_auc(&all_scores, &all_truth).ok(),
            }
        }
    };
    Ok(EvalReport {
        model: model.to_string(),
        seed,
        aggregation,
        threshold,
        folds: fold_metrics,
        aggregate,
    })
}

/// Text table with one row per report: model, accuracy, sensitivity,
/// specificity, AUC.
pub fn render_table(reports: &[EvalReport]) -> String {
    let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}%", 100.0 * v));
    let auc = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
    let width = reports.iter().map(|r| r.model.len()).max().unwrap_or(0).max(5);
    let mut out = format!(
        "{:<width$}  {:>9}  {:>11}  {:>11}  {:>6}\n",
        "Model", "Accuracy", "Sensitivity", "Specificity", "AUC"
    );
    for r in reports {
        let a = &r.aggregate;
        out.push_str(&format!(
            "{:<width$}  {:>9}  {:>11}  {:>11}  {:>6}\n",
            r.model,
            pct(Some(a.accuracy)),
            pct(a.sensitivity),
            pct(a.specificity),
            auc(a.auc)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_examples() {
        let m = confusion_metrics(&[1, 0, 1], &[1, 0, 1]).unwrap();
        assert_eq!((m.accuracy, m.sensitivity, m.specificity), (1.0, Some(1.0), Some(1.0)));
        let m = confusion_metrics(&[1, 1, 0, 0], &[1, 0, 0, 0]).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert_eq!(m.sensitivity, Some(1.0));
        assert_eq!(m.specificity, Some(2.0 / 3.0));
        let m = confusion_metrics(&[0, 0], &[0, 0]).unwrap();
        assert_eq!(m.sensitivity, None);
        assert!(matches!(confusion_metrics(&[1], &[1, 0]), Err(Error::Contract(_))));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 4], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(Error::Contract(_))));
    }

    #[test]
    fn kfold_on_reference_composition() {
        let labels: Vec<u8> = (0..114).map(|i| u8::from(i >= 58)).collect();
        let folds = stratified_kfold(&labels, 10, 7).unwrap();
        let mut sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, [vec![11; 6], vec![12; 4]].concat());
        for f in &folds {
            let pos = f.test.iter().filter(|&&i| labels[i] == 1).count();
            assert!(pos == 5 || pos == 6);
            assert_eq!(f.train.len() + f.test.len(), 114);
        }
        let mut all: Vec<usize> = folds.iter().flat_map(|f| f.test.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..114).collect::<Vec<_>>());
        assert_eq!(folds, stratified_kfold(&labels, 10, 7).unwrap());
        assert!(matches!(stratified_kfold(&labels[..60], 10, 0), Err(Error::Config(_))));
    }

    #[test]
    fn constant_scorer() {
        let labels: Vec<u8> = (0..114).map(|i| u8::from(i >= 58)).collect();
        let folds = stratified_kfold(&labels, 10, 1).unwrap();
        let report = evaluate_folds("stub", 1, &labels, &folds, 0.5, Aggregation::Pooled, |f| {
            Ok(vec![0.3; f.test.len()])
        })
        .unwrap();
        assert_eq!(report.aggregate.accuracy, 58.0 / 114.0);
        assert_eq!(report.aggregate.auc, Some(0.5));
        assert_eq!(report.folds.len(), 10);
        let mean = evaluate_folds("stub", 1, &labels, &folds, 0.5, Aggregation::Mean, |f| {
            Ok(vec![0.3; f.test.len()])
        })
        .unwrap();
        let by_hand = mean.folds.iter().map(|f| f.accuracy).sum::<f64>() / 10.0;
        assert!((mean.aggregate.accuracy - by_hand).abs() < 1e-12);
        assert!(render_table(&[mean]).contains("stub"));
    }
}
