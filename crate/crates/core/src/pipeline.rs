//! End-to-end cross-validation: per-fold CAE fine-tuning on the fold's
//! training slices, feature extraction, classifier training and scoring.

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cae::{finetune, Cae, FinetuneConfig, FreezePlan};
use crate::data::{nodule_images, CaseRecord, SequenceFeatureMap, MAX_SLICES};
use crate::error::{DataError, Result};
use crate::evaluation::{evaluate_folds, stratified_kfold, Aggregation, EvalReport, FoldSplit};
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;
use crate::training::{malignant_scores, train_classifier, EpochRecord, Example, TrainConfig};
use crate::transformer::{Classifier, ModelKind, TransformerConfig};

/// A case reduced to its label and preprocessed nodule slices.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedCase {
    pub case_id: String,
    pub label: u8,
    /// `[1, 256, 256]` each, ascending slice order.
    pub images: Vec<Tensor>,
}

pub fn prepare_case(case: &CaseRecord) -> Result<PreparedCase> {
    let n = case.meta.nodule_slices.len();
    if n > MAX_SLICES {
        return Err(DataError::Invalid(format!("{}: {n} nodule slices exceed {MAX_SLICES}", case.case_id())).into());
    }
    Ok(PreparedCase {
        case_id: case.meta.case_id.clone(),
        label: case.meta.label,
        images: nodule_images(case)?,
    })
}

/// Encoder activations of every slice after the stages a freeze plan
/// never trains, so per-fold encoders only recompute the tail.
pub struct PrefixCache {
    pub stages: usize,
    pub activations: Vec<Vec<Tensor>>,
}

impl PrefixCache {
    pub fn build(cae: &Cae, cases: &[PreparedCase], stages: usize) -> Result<Self> {
        let activations = cases
            .iter()
            .map(|c| c.images.iter().map(|img| cae.encode_prefix(img, stages)).collect())
            .collect::<Result<_>>()?;
        Ok(Self { stages, activations })
    }

    /// `cae` must agree with the encoder the cache was built from on the
    /// cached stages.
    pub fn sequences(&self, cae: &Cae) -> Result<Vec<SequenceFeatureMap>> {
        self.activations
            .iter()
            .map(|acts| {
                let rows = acts
                    .iter()
                    .map(|a| cae.encode_from_prefix(a, self.stages))
                    .collect::<Result<Vec<_>>>()?;
                SequenceFeatureMap::from_rows(&rows, MAX_SLICES)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub folds: usize,
    pub finetune: FinetuneConfig,
    /// Cap on fine-tuning slices per fold, drawn at random from the fold's
    /// training cases; `None` uses all of them.
    pub finetune_max_slices: Option<usize>,
    pub transformer: TransformerConfig,
    pub train: TrainConfig,
    pub threshold: f64,
    pub aggregation: Aggregation,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 10,
            finetune: FinetuneConfig::default(),
            finetune_max_slices: None,
            transformer: TransformerConfig::default(),
            train: TrainConfig::default(),
            threshold: 0.5,
            aggregation: Aggregation::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldHistory {
    pub model: String,
    pub fold: usize,
    pub finetune: Vec<EpochRecord>,
    pub train: Vec<EpochRecord>,
}

#[derive(Clone, Debug)]
pub struct CvOutcome {
    /// One report per requested model, in request order.
    pub reports: Vec<EvalReport>,
    pub histories: Vec<FoldHistory>,
}

/// Fine-tunes `cae` on the training slices of `fold`.
pub fn finetune_for_fold(cae: &Cae, cases: &[PreparedCase], fold: &FoldSplit, cfg: &CvConfig, seed: u64) -> Result<(Cae, Vec<EpochRecord>)> {
    if cfg.finetune.epochs == 0 {
        return Ok((cae.clone(), Vec::new()));
    }
    let mut slices: Vec<&Tensor> = fold.train.iter().flat_map(|&i| &cases[i].images).collect();
    if let Some(cap) = cfg.finetune_max_slices {
        slices.shuffle(&mut stream(seed, &format!("cv.finetune.sample.{}", fold.k)));
        slices.truncate(cap.max(1));
    }
    let slices: Vec<Tensor> = slices.into_iter().cloned().collect();
    let plan = FreezePlan::middle(&cae.config);
    finetune(cae.clone(), &slices, &cfg.finetune, &plan, derive_seed(seed, &format!("cv.finetune.{}", fold.k)))
}

/// Cross-validates every model in `models` on the same folds. The CAE is
/// fine-tuned once per fold and its features are shared by all models.
pub fn cross_validate(cases: &[PreparedCase], cae: &Cae, models: &[ModelKind], cfg: &CvConfig, seed: u64) -> Result<CvOutcome> {
    if cases.is_empty() {
        return Err(DataError::Empty("no cases to cross-validate".into()).into());
    }
    let labels: Vec<u8> = cases.iter().map(|c| c.label).collect();
    let folds = stratified_kfold(&labels, cfg.folds, seed)?;
    let plan = FreezePlan::middle(&cae.config);
    let cache = PrefixCache::build(cae, cases, plan.frozen_encoder_stages(&cae.config))?;

    let mut scores: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(folds.len()); models.len()];
    let mut histories = Vec::new();
    for fold in &folds {
        let (fold_cae, ft_history) = finetune_for_fold(cae, cases, fold, cfg, seed)?;
        let seqs = cache.sequences(&fold_cae)?;
        let train: Vec<Example> = fold
            .train
            .iter()
            .map(|&i| Example {
                sequence: &seqs[i],
                label: labels[i],
            })
            .collect();
        let test: Vec<&SequenceFeatureMap> = fold.test.iter().map(|&i| &seqs[i]).collect();
        for (m, &kind) in models.iter().enumerate() {
            let model_seed = derive_seed(seed, &format!("cv.model.{}", fold.k));
            let model = Classifier::build(kind, &cfg.transformer, model_seed)?;
            let train_cfg = TrainConfig {
                seed: model_seed,
                ..cfg.train
            };
            let outcome = train_classifier(model, &train, &train_cfg)?;
            scores[m].push(malignant_scores(&outcome.model, &test)?);
            info!(
                "fold {}: {kind} final training loss {:.4}",
                fold.k,
                outcome.history.last().map_or(f64::NAN, |r| r.mean_loss)
            );
            histories.push(FoldHistory {
                model: kind.name().to_string(),
                fold: fold.k,
                finetune: ft_history.clone(),
                train: outcome.history,
            });
        }
    }
    let reports = models
        .iter()
        .zip(&scores)
        .map(|(kind, per_fold)| {
            evaluate_folds(kind.name(), seed, &labels, &folds, cfg.threshold, cfg.aggregation, |f| {
                Ok(per_fold[f.k].clone())
            })
        })
        .collect::<Result<_>>()?;
    Ok(CvOutcome { reports, histories })
}
