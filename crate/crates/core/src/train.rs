//! Adam optimization, the epoch loop with dev-set early stopping, and
//! evaluation.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::PredictionRecord;
use crate::attention::hard_attention_loss;
use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{ForwardMode, Model};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Bias-corrected Adam state, one moment pair per parameter tensor.
pub struct AdamState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &[(String, Tensor)], learning_rate: f64) -> AdamState {
        AdamState {
            first: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            second: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over every trainable parameter with a populated gradient.
    /// Parameters without gradients (or frozen ones) are left unchanged.
    pub fn step(&mut self, params: &[(String, Tensor)]) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} parameters vs {} moment buffers", params.len(), self.first.len()),
            ));
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let bias1 = 1.0 - self.beta1.powf(t);
        let bias2 = 1.0 - self.beta2.powf(t);
        for (i, (name, p)) in params.iter().enumerate() {
            if !p.requires_grad() {
                continue;
            }
            let grad = match p.grad() {
                Some(g) => g,
                None => continue,
            };
            if grad.len() != self.first[i].len() {
                return Err(Error::shape(
                    "adam_step",
                    format!("{}: gradient length {} vs moment length {}", name, grad.len(), self.first[i].len()),
                ));
            }
            let mut values = p.values();
            for j in 0..grad.len() {
                let g = grad[j];
                let m = &mut self.first[i][j];
                let v = &mut self.second[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                values[j] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            p.set_values(&values)?;
        }
        Ok(())
    }
}

/// How per-example losses combine within a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs without a strict dev-accuracy improvement before stopping.
    pub patience: usize,
    /// Weight λ of the hard-attention auxiliary loss.
    pub hard_attention_weight: f64,
    pub learning_rate: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub loss_reduction: LossReduction,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            seed: 0,
            patience: 3,
            hard_attention_weight: 1.0,
            learning_rate: 3e-4,
            clip_norm: Some(5.0),
            loss_reduction: LossReduction::Sum,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epoch count must be at least 1".into()));
        }
        Ok(())
    }
}

/// One epoch's training loss and dev accuracy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
}

pub fn save_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    for record in history {
        writeln!(out, "{}", serde_json::to_string(record).map_err(|e| Error::Data(e.to_string()))?)?;
    }
    Ok(())
}

pub fn load_history(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let reader = BufReader::new(File::open(path.as_ref())?);
    let mut history = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        history.push(
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("line {}: {}", i + 1, e)))?,
        );
    }
    Ok(history)
}

fn clip_gradients(model: &Model, max_norm: f64) {
    let mut total = 0.0;
    for (_, p) in model.parameters() {
        if let Some(g) = p.grad() {
            total += g.iter().map(|x| x * x).sum::<f64>();
        }
    }
    let norm = total.sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for (_, p) in model.parameters() {
            if let Some(g) = p.grad() {
                p.zero_grad();
                p.accumulate_grad(&g.iter().map(|x| x * factor).collect::<Vec<f64>>());
            }
        }
    }
}

/// Loss of one example: classification cross-entropy plus, for the
/// hard-attention variant, λ times the attention supervision term.
fn example_loss(model: &Model, example: &Example, tape: &Tape, mode: &mut ForwardMode, lambda: f64) -> Result<Tensor> {
    let pass = model.forward(example, tape, mode)?;
    let class = (example.rating - 1) as usize;
    let mut loss = tape.cross_entropy(&pass.probabilities, class)?;
    if let Some(signal) = pass.hard_attention {
        let aux = hard_attention_loss(tape, &signal.weights, &signal.labels)?;
        loss = tape.add(&loss, &tape.scale(&aux, lambda)?)?;
    }
    Ok(loss)
}

/// Train in place. Shuffles per epoch with the seeded RNG, accumulates the
/// summed batch loss, keeps the best-dev-accuracy checkpoint, and stops
/// after `patience` epochs without improvement. On return the model holds
/// the best checkpoint; the full per-epoch history is returned.
pub fn train(model: &mut Model, corpus: &[Example], dev: &[Example], config: &TrainConfig) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    if dev.is_empty() {
        return Err(Error::Data("dev corpus is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(model.parameters(), config.learning_rate);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    let mut stale = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            model.zero_grads();
            let mut batch_loss = 0.0;
            for &idx in batch {
                let tape = Tape::new();
                let loss = example_loss(
                    model,
                    &corpus[idx],
                    &tape,
                    &mut ForwardMode::Train(&mut rng),
                    config.hard_attention_weight,
                )?;
                let loss = match config.loss_reduction {
                    LossReduction::Sum => loss,
                    LossReduction::Mean => tape.scale(&loss, 1.0 / batch.len() as f64)?,
                };
                batch_loss += loss.item();
                tape.backward(&loss)?;
            }
            if let Some(max_norm) = config.clip_norm {
                clip_gradients(model, max_norm);
            }
            adam.step(model.parameters())?;
            epoch_loss += batch_loss;
        }
        let (dev_accuracy, _) = evaluate(model, dev)?;
        history.push(EpochRecord { epoch, train_loss: epoch_loss, dev_accuracy });

        let improved = best.as_ref().is_none_or(|(acc, _)| dev_accuracy > *acc);
        if improved {
            best = Some((dev_accuracy, model.snapshot()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    if let Some((_, snapshot)) = best {
        model.restore(&snapshot)?;
    }
    Ok(history)
}

/// Accuracy and the per-example prediction records (ids are corpus order).
pub fn evaluate(model: &Model, corpus: &[Example]) -> Result<(f64, Vec<PredictionRecord>)> {
    if corpus.is_empty() {
        return Err(Error::Data("evaluation corpus is empty".into()));
    }
    let tag = model.config.variant.tag().to_string();
    let mut records = Vec::with_capacity(corpus.len());
    let mut correct = 0;
    for (id, example) in corpus.iter().enumerate() {
        let pred = model.predict(example)?;
        if pred == example.rating {
            correct += 1;
        }
        records.push(PredictionRecord { id, gold: example.rating, pred, model: tag.clone() });
    }
    Ok((correct as f64 / corpus.len() as f64, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec, Vocabulary};
    use crate::model::{build_model, ModelConfig, ModelVariant};

    fn quick_config(variant: ModelVariant) -> ModelConfig {
        let mut config = ModelConfig::new(variant);
        config.embed_dim = 8;
        config.hidden_size = 6;
        config.heads = 2;
        config.layers = 2;
        config.dropout = 0.0;
        config.self_attention_hops = 2;
        config.self_attention_dim = 6;
        config
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let p = Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let params = vec![("p".to_string(), p.clone())];
        let mut adam = AdamState::new(&params, 3e-4);
        p.accumulate_grad(&[0.0, 0.0, 0.0]);
        adam.step(&params).unwrap();
        assert_eq!(p.values(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_single_step_matches_hand_computation() {
        // Fresh state, θ = 0, g = 1: m̂ = v̂ = 1, so θ ← −lr / (1 + ε).
        let p = Tensor::param(&[1], vec![0.0]).unwrap();
        let params = vec![("p".to_string(), p.clone())];
        let mut adam = AdamState::new(&params, 3e-4);
        p.accumulate_grad(&[1.0]);
        adam.step(&params).unwrap();
        let expected = -3e-4 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-18, "{} vs {}", p.item(), expected);
        assert!((p.item() + 3e-4).abs() < 1e-9);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn adam_skips_frozen_parameters() {
        let frozen = Tensor::param(&[2], vec![1.0, 1.0]).unwrap();
        frozen.set_requires_grad(false);
        let params = vec![("frozen".to_string(), frozen.clone())];
        let mut adam = AdamState::new(&params, 0.1);
        frozen.accumulate_grad(&[5.0, 5.0]);
        adam.step(&params).unwrap();
        assert_eq!(frozen.values(), vec![1.0, 1.0]);
    }

    #[test]
    fn adam_never_produces_nan_on_finite_grads() {
        let p = Tensor::param(&[4], vec![0.0; 4]).unwrap();
        let params = vec![("p".to_string(), p.clone())];
        let mut adam = AdamState::new(&params, 3e-4);
        for k in 0..50 {
            p.zero_grad();
            p.accumulate_grad(&[1e12, -1e-12, (k as f64).sin() * 1e6, 0.0]);
            adam.step(&params).unwrap();
            assert!(p.values().iter().all(|v| v.is_finite()));
        }
    }

    fn toy_corpus(count: usize, seed: u64) -> Vec<Example> {
        gen_synthetic(&SyntheticSpec::demo(0.0, seed), count).unwrap()
    }

    #[test]
    fn evaluate_examples() {
        let corpus = toy_corpus(12, 3);
        let vocab = Vocabulary::build(&corpus, 1);
        let model = build_model(quick_config(ModelVariant::ReviewOnlyPool), vocab, 1).unwrap();
        let (acc, records) = evaluate(&model, &corpus).unwrap();
        assert_eq!(records.len(), 12);
        let manual = records.iter().filter(|r| r.correct()).count() as f64 / 12.0;
        assert_eq!(acc, manual);
        // Accuracy is permutation invariant.
        let mut reversed: Vec<Example> = corpus.clone();
        reversed.reverse();
        let (acc_rev, _) = evaluate(&model, &reversed).unwrap();
        assert_eq!(acc, acc_rev);
        assert!(evaluate(&model, &[]).is_err());
    }

    #[test]
    fn first_batch_loss_matches_direct_recomputation() {
        let corpus = toy_corpus(8, 5);
        let vocab = Vocabulary::build(&corpus, 1);
        let mut model = build_model(quick_config(ModelVariant::SeparatePool), vocab, 7).unwrap();

        // With a single whole-corpus batch, epoch 1's loss is Σ −log p[y]
        // under the untrained parameters regardless of shuffle order.
        let mut expected = 0.0;
        for ex in &corpus {
            let tape = Tape::inference();
            let pass = model.forward(ex, &tape, &mut ForwardMode::Eval).unwrap();
            expected += -pass.probabilities.values()[(ex.rating - 1) as usize].ln();
        }
        let config = TrainConfig {
            epochs: 1,
            batch_size: corpus.len(),
            seed: 11,
            ..TrainConfig::default()
        };
        let history = train(&mut model, &corpus, &corpus, &config).unwrap();
        assert!((history[0].train_loss - expected).abs() < 1e-9);

        // Near-uniform start: per-example loss within [0.8 ln5, 1.3 ln5].
        let per_example = history[0].train_loss / corpus.len() as f64;
        let ln5 = 5.0f64.ln();
        assert!(per_example > 0.8 * ln5 && per_example < 1.3 * ln5, "loss {}", per_example);
    }

    #[test]
    fn patience_one_with_flat_dev_stops_after_two_epochs() {
        let corpus = toy_corpus(6, 9);
        let vocab = Vocabulary::build(&corpus, 1);
        let mut model = build_model(quick_config(ModelVariant::ReviewOnlyPool), vocab, 2).unwrap();
        // Dev set of one repeated example the model already gets right.
        let mut probe = corpus[0].clone();
        let (_, records) = evaluate(&model, &corpus).unwrap();
        probe.rating = records[0].pred;
        let dev = vec![probe];
        let config = TrainConfig {
            epochs: 50,
            batch_size: 3,
            seed: 4,
            patience: 1,
            learning_rate: 0.0, // keep predictions frozen so accuracy cannot move
            ..TrainConfig::default()
        };
        let history = train(&mut model, &corpus, &dev, &config).unwrap();
        assert_eq!(history.len(), 2);
        assert_eq!(history[0].dev_accuracy, 1.0);
        assert_eq!(history[1].dev_accuracy, 1.0);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let corpus = toy_corpus(10, 13);
        let vocab = Vocabulary::build(&corpus, 1);
        let config = TrainConfig { epochs: 3, batch_size: 4, seed: 21, ..TrainConfig::default() };
        let run = || {
            let mut model = build_model(quick_config(ModelVariant::JointPool), vocab.clone(), 33).unwrap();
            let history = train(&mut model, &corpus, &corpus, &config).unwrap();
            let losses: Vec<f64> = history.iter().map(|h| h.train_loss).collect();
            (losses, model.snapshot())
        };
        let (l1, s1) = run();
        let (l2, s2) = run();
        assert_eq!(l1, l2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn best_checkpoint_is_restored() {
        let corpus = toy_corpus(24, 17);
        let dev = toy_corpus(12, 18);
        let vocab = Vocabulary::build(&corpus, 1);
        let mut model = build_model(quick_config(ModelVariant::ReviewOnlyPool), vocab, 3).unwrap();
        let config = TrainConfig {
            epochs: 6,
            batch_size: 8,
            seed: 2,
            patience: 6,
            ..TrainConfig::default()
        };
        let history = train(&mut model, &corpus, &dev, &config).unwrap();
        let best = history.iter().map(|h| h.dev_accuracy).fold(f64::NEG_INFINITY, f64::max);
        let (acc, _) = evaluate(&model, &dev).unwrap();
        assert_eq!(acc, best);
    }

    #[test]
    fn small_corpus_overfits_quickly() {
        // Capacity check on an easy separable corpus; the full-variant sweep
        // lives in the acceptance suite.
        let corpus = toy_corpus(16, 23);
        let vocab = Vocabulary::build(&corpus, 1);
        let mut model = build_model(quick_config(ModelVariant::ReviewOnlyPool), vocab, 5).unwrap();
        let config = TrainConfig {
            epochs: 150,
            batch_size: 2,
            seed: 6,
            patience: 150,
            ..TrainConfig::default()
        };
        train(&mut model, &corpus, &corpus, &config).unwrap();
        let (acc, _) = evaluate(&model, &corpus).unwrap();
        assert_eq!(acc, 1.0, "failed to overfit 16 examples");
    }

    #[test]
    fn history_roundtrips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let history = vec![
            EpochRecord { epoch: 1, train_loss: 12.5, dev_accuracy: 0.4 },
            EpochRecord { epoch: 2, train_loss: 8.25, dev_accuracy: 0.55 },
        ];
        let path = dir.path().join("history.jsonl");
        save_history(&path, &history).unwrap();
        let loaded = load_history(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[1].train_loss, 8.25);
        assert_eq!(loaded[1].dev_accuracy, 0.55);
    }
}
