//! Plain language-model pretraining of the base model on generated text
//! that is disjoint from the stimulus stream.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{story, Lexicon, Token};
use crate::model::{AdamW, AdamWConfig, DualHeadModel, ModelConfig};
use crate::seeds::rng_for;
use rand::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSpec {
    pub n_tokens: usize,
    pub seq_len: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        Self {
            n_tokens: 60_000,
            seq_len: 20,
            batch_size: 16,
            steps: 5000,
            optimizer: AdamWConfig {
                lr: 3e-3,
                ..AdamWConfig::default()
            },
        }
    }
}

impl PretrainSpec {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.seq_len < 2 || self.seq_len > model.max_seq_len {
            return Err(Error::config(format!(
                "pretrain seq_len {} outside 2..={}",
                self.seq_len, model.max_seq_len
            )));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::config("pretrain batch_size and steps must be positive"));
        }
        if self.n_tokens < self.seq_len * 2 {
            return Err(Error::config("pretrain corpus too small for its sequence length"));
        }
        self.optimizer.validate()
    }
}

pub struct Pretrained {
    pub model: DualHeadModel,
    pub losses: Vec<f64>,
}

/// Trains a fresh base model on random spans of a generated story.
pub fn pretrain(config: ModelConfig, spec: &PretrainSpec, seed: u64) -> Result<Pretrained> {
    spec.validate(&config)?;
    let text: Vec<Token> = story(&mut rng_for(seed, "pretrain-text"), &Lexicon::new(), spec.n_tokens);
    let mut model = DualHeadModel::new(config, &mut rng_for(seed, "pretrain-init"))?;
    let mut opt = AdamW::new(spec.optimizer.clone())?;
    let mut rng = rng_for(seed, "pretrain-batches");
    let mut losses = Vec::with_capacity(spec.steps);
    for _ in 0..spec.steps {
        let batch: Vec<Vec<Token>> = (0..spec.batch_size)
            .map(|_| {
                let start = rng.random_range(0..=text.len() - spec.seq_len);
                text[start..start + spec.seq_len].to_vec()
            })
            .collect();
        let mut s = model.session();
        let out = model.forward_lm(&mut s, &batch, &mut rng)?;
        losses.push(s.graph.value(out.loss).item());
        s.graph.backward(out.loss)?;
        let grads = s.gradients();
        drop(s);
        opt.step(&mut model, &grads)?;
    }
    Ok(Pretrained { model, losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pretraining_lowers_loss_below_uniform() {
        let config = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 32,
            ..ModelConfig::default()
        };
        let spec = PretrainSpec {
            n_tokens: 3000,
            steps: 150,
            ..PretrainSpec::default()
        };
        let p = pretrain(config, &spec, 1).unwrap();
        let head: f64 = p.losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = p.losses[140..].iter().sum::<f64>() / 10.0;
        assert!(head > 5.0 && tail < 4.0, "{head} -> {tail}");
    }

    #[test]
    fn rejects_bad_lengths() {
        let spec = PretrainSpec {
            seq_len: 1,
            ..PretrainSpec::default()
        };
        assert!(pretrain(ModelConfig::default(), &spec, 0).is_err());
    }
}
