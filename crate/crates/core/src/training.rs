//! Classifier training loop with label-smoothed cross-entropy and Adam.

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::SequenceFeatureMap;
use crate::error::{DataError, Error, Result};
use crate::losses::{cross_entropy_logits, smooth_labels};
use crate::optim::{Adam, AdamConfig};
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::transformer::Classifier;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub label_smoothing_alpha: f64,
    pub seed: u64,
    pub dropout: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 64,
            epochs: 200,
            label_smoothing_alpha: 0.05,
            seed: 0,
            dropout: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing_alpha) {
            return Err(Error::Config(format!(
                "label smoothing alpha {} not in [0, 1)",
                self.label_smoothing_alpha
            )));
        }
        Ok(())
    }
}

/// One line of a training history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holdout_metric: Option<f64>,
}

/// One JSON object per line.
pub fn history_jsonl(history: &[EpochRecord]) -> Result<String> {
    let mut out = String::new();
    for record in history {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    Ok(out)
}

/// A labelled training sequence.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub sequence: &'a SequenceFeatureMap,
    pub label: u8,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Classifier,
    pub history: Vec<EpochRecord>,
}

/// Minimizes mean label-smoothed cross-entropy over shuffled mini-batches
/// (the last batch may be smaller). Returns the final parameters.
pub fn train_classifier(mut model: Classifier, data: &[Example<'_>], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(DataError::Empty("classifier training set is empty".into()).into());
    }
    let targets = data
        .iter()
        .map(|ex| smooth_labels::<f32>(ex.label as usize, cfg.label_smoothing_alpha, 2))
        .collect::<Result<Vec<_>>>()?;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut shuffle = stream(cfg.seed, "train.shuffle");
    let mut dropout_rng = stream(cfg.seed, "train.dropout");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let seqs: Vec<&SequenceFeatureMap> = batch.iter().map(|&i| data[i].sequence).collect();
            let mut target = Vec::with_capacity(batch.len() * 2);
            for &i in batch {
                target.extend_from_slice(targets[i].data());
            }
            let target = Tensor::new([batch.len(), 2], target)?;
            let tape = Tape::new();
            let bound = model.params().bind(&tape);
            let rng = cfg.dropout.then_some(&mut dropout_rng);
            let out = model.forward_batch(&bound, &seqs, true, rng)?;
            let loss = cross_entropy_logits(out.logits, &target)?;
            total += loss.value().item()? as f64 * batch.len() as f64;
            let grads = bound.gradients(&tape.backward(loss)?);
            adam.step(model.params_mut(), &grads)?;
            model.apply_state(out.state)?;
        }
        let mean_loss = total / data.len() as f64;
        info!("train epoch {epoch}: mean loss {mean_loss:.6}");
        history.push(EpochRecord {
            epoch,
            mean_loss,
            holdout_metric: None,
        });
    }
    Ok(TrainOutcome { model, history })
}

/// Malignant-class probability of every sequence, batched.
pub fn malignant_scores(model: &Classifier, seqs: &[&SequenceFeatureMap]) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(64) {
        let p = model.predict_proba(chunk)?;
        scores.extend(p.data().chunks(2).map(|row| row[1] as f64));
    }
    Ok(scores)
}

/// Fraction of examples whose argmax prediction equals the label.
pub fn accuracy(model: &Classifier, data: &[Example<'_>]) -> Result<f64> {
    if data.is_empty() {
        return Err(DataError::Empty("no examples to score".into()).into());
    }
    let seqs: Vec<_> = data.iter().map(|ex| ex.sequence).collect();
    let scores = malignant_scores(model, &seqs)?;
    let correct = scores
        .iter()
        .zip(data)
        .filter(|(&s, ex)| (s > 0.5) == (ex.label == 1))
        .count();
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::{ModelKind, TransformerConfig};

    fn tiny_transformer() -> TransformerConfig {
        TransformerConfig {
            d_model: 8,
            d_k: 4,
            d_v: 4,
            heads: 2,
            blocks: 1,
            mlp_hidden: 16,
            max_len: 5,
            head_hidden: 6,
            ..TransformerConfig::default()
        }
    }

    fn toy_data() -> Vec<(SequenceFeatureMap, u8)> {
        (0..12)
            .map(|i| {
                let label = (i % 2) as u8;
                let len = 1 + i % 5;
                let rows: Vec<Tensor<f32>> = (0..len)
                    .map(|r| Tensor::from_fn([8], |j| ((i * 7 + r * 3 + j) % 5) as f32 * 0.1 + label as f32 * 0.8))
                    .collect();
                (SequenceFeatureMap::from_rows(&rows, 5).unwrap(), label)
            })
            .collect()
    }

    fn examples(data: &[(SequenceFeatureMap, u8)]) -> Vec<Example<'_>> {
        data.iter().map(|(s, l)| Example { sequence: s, label: *l }).collect()
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.batch_size, c.epochs, c.label_smoothing_alpha), (1e-4, 64, 200, 0.05));
    }

    #[test]
    fn history_is_deterministic_and_decreasing() {
        let data = toy_data();
        let ex = examples(&data);
        let cfg = TrainConfig {
            lr: 1e-2,
            batch_size: 4,
            epochs: 15,
            seed: 3,
            ..TrainConfig::default()
        };
        let run = || {
            let model = Classifier::build(ModelKind::CaeTransformer, &tiny_transformer(), 1).unwrap();
            train_classifier(model, &ex, &cfg).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 15);
        assert!(a.history.last().unwrap().mean_loss < a.history[0].mean_loss);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn zero_rate_leaves_params_unchanged() {
        let data = toy_data();
        let ex = examples(&data);
        let model = Classifier::build(ModelKind::CaeTransformer, &tiny_transformer(), 1).unwrap();
        let cfg = TrainConfig {
            lr: 1e-300,
            epochs: 2,
            dropout: false,
            ..TrainConfig::default()
        };
        let out = train_classifier(model.clone(), &ex, &cfg).unwrap();
        assert_eq!(out.model, model);
    }

    #[test]
    fn empty_training_set() {
        let model = Classifier::build(ModelKind::GapFc, &tiny_transformer(), 1).unwrap();
        let err = train_classifier(model, &[], &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn history_lines() {
        let h = [EpochRecord {
            epoch: 1,
            mean_loss: 0.5,
            holdout_metric: None,
        }];
        assert_eq!(history_jsonl(&h).unwrap(), "{\"epoch\":1,\"mean_loss\":0.5}\n");
    }
}
