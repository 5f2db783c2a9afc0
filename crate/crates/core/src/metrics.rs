//! Confusion-matrix metrics, ROC AUC and the all-pairs cross-site evaluation matrix.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datakit::SiteDataset;
use crate::tensor::TensorMap;
use crate::trainer::{self, TrainError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{scores} scores vs {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("no samples")]
    Empty,
    #[error("AUC is undefined without both classes")]
    SingleClass,
    #[error("label {0} is not 0 or 1")]
    InvalidLabel(u8),
    #[error("non-finite score")]
    NonFiniteScore,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Model(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `tp / (tp + fn)`; undefined without positives.
    pub fn sensitivity(&self) -> Option<f64> {
        let p = self.tp + self.fn_;
        (p > 0).then(|| self.tp as f64 / p as f64)
    }

    /// `tn / (tn + fp)`; undefined without negatives.
    pub fn specificity(&self) -> Option<f64> {
        let n = self.tn + self.fp;
        (n > 0).then(|| self.tn as f64 / n as f64)
    }

    pub fn balanced_accuracy(&self) -> Option<f64> {
        Some((self.sensitivity()? + self.specificity()?) / 2.0)
    }

    pub fn accuracy(&self) -> Option<f64> {
        let t = self.total();
        (t > 0).then(|| (self.tp + self.tn) as f64 / t as f64)
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(MetricsError::InvalidLabel(l));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore);
    }
    Ok(())
}

/// Counts with the rule "predict positive iff score >= threshold".
pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionCounts, MetricsError> {
    check_inputs(scores, labels)?;
    let mut c = ConfusionCounts::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Mann-Whitney AUC: the share of (positive, negative) pairs where the
/// positive scores higher, ties counting one half. Computed from mid-ranks in
/// `O(n log n)`.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricsError> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of positive mid-ranks, doubled so every term stays an integer.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share the mid-rank (i + j + 2) / 2.
        let twice_mid = (i + j + 2) as u64;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        twice_rank_sum += twice_mid * pos_in_group;
        i = j + 1;
    }
    let (p, n) = (n_pos as u64, n_neg as u64);
    // Twice the Mann-Whitney U statistic.
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// Metrics of one model on one site's test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_site: String,
    pub test_site: String,
    pub counts: ConfusionCounts,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub accuracy: Option<f64>,
    /// `None` when the test split holds a single class.
    pub roc_auc: Option<f64>,
}

impl EvalReport {
    pub fn from_scores(
        model_site: impl Into<String>,
        test_site: impl Into<String>,
        scores: &[f64],
        labels: &[u8],
    ) -> Result<Self, MetricsError> {
        let counts = confusion(scores, labels, 0.5)?;
        let roc_auc = match roc_auc(scores, labels) {
            Ok(a) => Some(a),
            Err(MetricsError::SingleClass) => None,
            Err(e) => return Err(e),
        };
        Ok(Self::from_counts(model_site, test_site, counts, roc_auc))
    }

    pub fn from_counts(
        model_site: impl Into<String>,
        test_site: impl Into<String>,
        counts: ConfusionCounts,
        roc_auc: Option<f64>,
    ) -> Self {
        Self {
            model_site: model_site.into(),
            test_site: test_site.into(),
            sensitivity: counts.sensitivity(),
            specificity: counts.specificity(),
            balanced_accuracy: counts.balanced_accuracy(),
            accuracy: counts.accuracy(),
            counts,
            roc_auc,
        }
    }
}

/// Scores the test split of `site` with `predict`.
pub fn evaluate_with<F>(
    model_site: &str,
    weights: &TensorMap,
    site: &SiteDataset,
    predict: &F,
) -> Result<EvalReport, MetricsError>
where
    F: Fn(&TensorMap, &[f32]) -> Result<f64, TrainError>,
{
    let idx = &site.split.test;
    if idx.is_empty() {
        return Err(MetricsError::Empty);
    }
    let scores = idx
        .iter()
        .map(|&i| predict(weights, site.row(i)))
        .collect::<Result<Vec<f64>, _>>()
        .map_err(|e| match e {
            TrainError::DimensionMismatch(m) => MetricsError::DimensionMismatch(m),
            other => MetricsError::Model(other),
        })?;
    let labels: Vec<u8> = idx.iter().map(|&i| site.label(i)).collect();
    EvalReport::from_scores(model_site, &site.site_id, &scores, &labels)
}

pub fn evaluate(model_site: &str, weights: &TensorMap, site: &SiteDataset) -> Result<EvalReport, MetricsError> {
    evaluate_with(model_site, weights, site, &trainer::forward)
}

/// Every (model, test site) pair, including self-pairs, in key order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    pub reports: Vec<EvalReport>,
}

impl EvalMatrix {
    pub fn get(&self, model_site: &str, test_site: &str) -> Option<&EvalReport> {
        self.reports
            .iter()
            .find(|r| r.model_site == model_site && r.test_site == test_site)
    }

    /// Reports whose model was not trained on the test site.
    pub fn off_diagonal(&self) -> impl Iterator<Item = &EvalReport> {
        self.reports.iter().filter(|r| r.model_site != r.test_site)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "model_site",
            "test_site",
            "tp",
            "fp",
            "tn",
            "fn",
            "sensitivity",
            "specificity",
            "balanced_accuracy",
            "accuracy",
            "roc_auc",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.reports {
            w.write_record([
                r.model_site.clone(),
                r.test_site.clone(),
                r.counts.tp.to_string(),
                r.counts.fp.to_string(),
                r.counts.tn.to_string(),
                r.counts.fn_.to_string(),
                opt(r.sensitivity),
                opt(r.specificity),
                opt(r.balanced_accuracy),
                opt(r.accuracy),
                opt(r.roc_auc),
            ])?;
        }
        w.flush()
    }
}

pub fn cross_eval(
    models: &BTreeMap<String, TensorMap>,
    sites: &BTreeMap<String, SiteDataset>,
) -> Result<EvalMatrix, MetricsError> {
    cross_eval_with(models, sites, &trainer::forward)
}

pub fn cross_eval_with<F>(
    models: &BTreeMap<String, TensorMap>,
    sites: &BTreeMap<String, SiteDataset>,
    predict: &F,
) -> Result<EvalMatrix, MetricsError>
where
    F: Fn(&TensorMap, &[f32]) -> Result<f64, TrainError>,
{
    if models.is_empty() || sites.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut dims = sites.values().map(|s| s.dim());
    let dim = dims.next().unwrap();
    if dims.any(|d| d != dim) {
        return Err(MetricsError::DimensionMismatch(
            "sites have differing feature dimensions".into(),
        ));
    }
    let mut reports = Vec::with_capacity(models.len() * sites.len());
    for (model_site, weights) in models {
        for site in sites.values() {
            reports.push(evaluate_with(model_site, weights, site, predict)?);
        }
    }
    Ok(EvalMatrix { reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::{generate_site, SiteProfile};
    use crate::tensor::Tensor;

    fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li == 1 && lj == 0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / pairs
    }

    #[test]
    fn confusion_basics() {
        let c = confusion(&[0.9], &[1], 0.5).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 1,
                ..Default::default()
            }
        );
        let tie = confusion(&[0.5, 0.5], &[1, 0], 0.5).unwrap();
        assert_eq!((tie.tp, tie.fp), (1, 1));
        assert_eq!(confusion(&[], &[], 0.5), Err(MetricsError::Empty));
        assert!(matches!(
            confusion(&[0.1], &[1, 0], 0.5),
            Err(MetricsError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn reported_operating_point() {
        let c = ConfusionCounts {
            tp: 90,
            fn_: 10,
            tn: 85,
            fp: 15,
        };
        assert_eq!(c.sensitivity(), Some(0.9));
        assert_eq!(c.specificity(), Some(0.85));
        assert_eq!(c.balanced_accuracy(), Some(0.875));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 5], &[0, 1, 0, 1, 1]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.8, 0.4, 0.6, 0.2], &[1, 1, 0, 0]).unwrap(), 0.75);
        assert_eq!(brute_auc(&[0.8, 0.4, 0.6, 0.2], &[1, 1, 0, 0]), 0.75);
        assert_eq!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(MetricsError::SingleClass));
        assert_eq!(roc_auc(&[f64::NAN, 0.2], &[1, 0]), Err(MetricsError::NonFiniteScore));
    }

    #[test]
    fn constant_classifier_on_negative_heavy_site() {
        let labels: Vec<u8> = (0..100).map(|i| u8::from(i < 17)).collect();
        let r = EvalReport::from_scores("m", "t", &vec![0.99; 100], &labels).unwrap();
        assert_eq!(r.specificity, Some(0.0));
        assert_eq!(r.sensitivity, Some(1.0));
        assert_eq!(r.roc_auc, Some(0.5));
    }

    #[test]
    fn single_class_cell_is_flagged_not_fatal() {
        let r = EvalReport::from_scores("m", "t", &[0.2, 0.7], &[0, 0]).unwrap();
        assert_eq!(r.roc_auc, None);
        assert_eq!(r.sensitivity, None);
        assert_eq!(r.specificity, Some(0.5));
        assert_eq!(r.balanced_accuracy, None);
    }

    fn dataset(id: &str, seed: u64) -> SiteDataset {
        generate_site(
            &SiteProfile {
                site_id: id.into(),
                n_samples: 60,
                positive_fraction: 0.5,
                mean_shift: 0.0,
                noise_scale: 1.0,
                seed,
            },
            2,
        )
        .unwrap()
    }

    fn model(w: [f32; 2]) -> TensorMap {
        TensorMap::from_entries(vec![
            Tensor::new("w0", vec![2, 1], w.to_vec()).unwrap(),
            Tensor::new("b0", vec![1], vec![0.0]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn one_by_one_matrix_matches_direct_evaluation() {
        let site = dataset("a", 1);
        let m = model([1.0, 1.0]);
        let matrix = cross_eval(
            &BTreeMap::from([("a".to_string(), m.clone())]),
            &BTreeMap::from([("a".to_string(), site.clone())]),
        )
        .unwrap();
        assert_eq!(matrix.reports.len(), 1);
        assert_eq!(matrix.reports[0], evaluate("a", &m, &site).unwrap());
    }

    #[test]
    fn matrix_cardinality_and_csv() {
        let models: BTreeMap<String, TensorMap> = (0..3).map(|i| (format!("m{i}"), model([i as f32, 1.0]))).collect();
        let sites: BTreeMap<String, SiteDataset> = (0..3)
            .map(|i| (format!("m{i}"), dataset(&format!("m{i}"), i)))
            .collect();
        let matrix = cross_eval(&models, &sites).unwrap();
        assert_eq!(matrix.reports.len(), 9);
        assert_eq!(matrix.off_diagonal().count(), 6);
        let mut buf = Vec::new();
        matrix.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(
            "model_site,test_site,tp,fp,tn,fn,sensitivity,specificity,balanced_accuracy,accuracy,roc_auc\n"
        ));
        assert_eq!(text.lines().count(), 10);
    }

    #[test]
    fn matrix_rejects_mixed_dimensions() {
        let mut sites = BTreeMap::from([("a".to_string(), dataset("a", 1))]);
        let odd = generate_site(
            &SiteProfile {
                site_id: "b".into(),
                n_samples: 20,
                positive_fraction: 0.5,
                mean_shift: 0.0,
                noise_scale: 1.0,
                seed: 0,
            },
            3,
        )
        .unwrap();
        sites.insert("b".into(), odd);
        let models = BTreeMap::from([("a".to_string(), model([1.0, 0.0]))]);
        assert!(matches!(
            cross_eval(&models, &sites),
            Err(MetricsError::DimensionMismatch(_))
        ));
    }
}
