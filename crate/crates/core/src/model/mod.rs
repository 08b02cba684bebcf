//! Toy transformer language model with a language-modeling head, a brain
//! mapping head, optional gradient reversal in front of the brain head, and
//! low-rank adapters on every attention and MLP projection.

mod checkpoint;
mod optim;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionSpec, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::grammar::Token;

pub use checkpoint::{load_checkpoint, save_checkpoint, sidecar_path, CheckpointManifest, CHECKPOINT_MAGIC};
pub use optim::{AdamW, AdamWConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Next-token prediction over every position.
    Causal,
    /// Prediction of randomly hidden positions with bidirectional attention.
    Masked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub objective: Objective,
    pub mask_rate: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 128,
            objective: Objective::Causal,
            mask_rate: 0.15,
            lora_rank: 4,
            lora_alpha: 4.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(format!("model config: {m}")));
        if self.vocab_size < 2 || self.d_model == 0 || self.n_layers == 0 || self.max_seq_len == 0 {
            return fail("vocab_size, d_model, n_layers and max_seq_len must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return fail(format!("mask_rate {} outside (0, 1)", self.mask_rate));
        }
        if self.lora_rank == 0 {
            return fail("lora_rank must be at least 1".into());
        }
        if !(self.lora_alpha > 0.0) {
            return fail(format!("lora_alpha {} must be positive", self.lora_alpha));
        }
        Ok(())
    }

    /// Id that replaces hidden positions under the masked objective.
    pub fn mask_token(&self) -> Token {
        self.vocab_size - 1
    }

    /// Number of hidden positions in a masked sequence of length `seq_len`.
    pub fn masked_count(&self, seq_len: usize) -> usize {
        ((self.mask_rate * seq_len as f64).round() as usize).clamp(1, seq_len)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Base,
    Adapter,
    LmHead,
    BrainHead,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

#[derive(Clone, Debug)]
struct Linear {
    weight: usize,
    bias: usize,
    /// (A: in x r, B: r x out)
    lora: Option<(usize, usize)>,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: (usize, usize),
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    ln2: (usize, usize),
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
struct BrainHead {
    weight: usize,
    bias: usize,
    input_dim: usize,
    n_voxels: usize,
}

/// Transformer encoder with a language-modeling head and a brain mapping head.
#[derive(Clone, Debug)]
pub struct DualHeadModel {
    config: ModelConfig,
    params: Vec<Parameter>,
    token_embedding: usize,
    position_embedding: usize,
    blocks: Vec<Block>,
    final_norm: (usize, usize),
    lm_head: (usize, usize),
    brain_head: Option<BrainHead>,
    grl_lambda: Option<f64>,
    lora_active: bool,
}

const INIT_STD: f64 = 0.02;
const BRAIN_HEAD_INIT_STD: f64 = 0.01;

fn normal_tensor<R: Rng>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}

impl DualHeadModel {
    /// Fresh base model with random weights, no adapters and no brain head.
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut model = Self {
            params: Vec::new(),
            token_embedding: 0,
            position_embedding: 0,
            blocks: Vec::new(),
            final_norm: (0, 0),
            lm_head: (0, 0),
            brain_head: None,
            grl_lambda: None,
            lora_active: false,
            config,
        };
        model.token_embedding = model.add_param("tok_emb", ParamKind::Base, normal_tensor(rng, vec![model.config.vocab_size, d], INIT_STD));
        model.position_embedding =
            model.add_param("pos_emb", ParamKind::Base, normal_tensor(rng, vec![model.config.max_seq_len, d], INIT_STD));
        for layer in 0..model.config.n_layers {
            let p = format!("layers.{layer}");
            let ln1 = model.add_norm(&format!("{p}.ln1"));
            let query = model.add_linear(&format!("{p}.attn.q"), d, d, rng);
            let key = model.add_linear(&format!("{p}.attn.k"), d, d, rng);
            let value = model.add_linear(&format!("{p}.attn.v"), d, d, rng);
            let output = model.add_linear(&format!("{p}.attn.o"), d, d, rng);
            let ln2 = model.add_norm(&format!("{p}.ln2"));
            let fc1 = model.add_linear(&format!("{p}.mlp.fc1"), d, 4 * d, rng);
            let fc2 = model.add_linear(&format!("{p}.mlp.fc2"), 4 * d, d, rng);
            model.blocks.push(Block {
                ln1,
                query,
                key,
                value,
                output,
                ln2,
                fc1,
                fc2,
            });
        }
        model.final_norm = model.add_norm("ln_f");
        let vocab = model.config.vocab_size;
        let w = model.add_param("lm_head.weight", ParamKind::LmHead, normal_tensor(rng, vec![d, vocab], INIT_STD));
        let b = model.add_param("lm_head.bias", ParamKind::LmHead, Tensor::zeros(vec![vocab]));
        model.lm_head = (w, b);
        Ok(model)
    }

    fn add_param(&mut self, name: &str, kind: ParamKind, value: Tensor) -> usize {
        self.params.push(Parameter {
            name: name.to_string(),
            kind,
            value,
        });
        self.params.len() - 1
    }

    fn add_norm(&mut self, prefix: &str) -> (usize, usize) {
        let d = self.config.d_model;
        let g = self.add_param(&format!("{prefix}.gamma"), ParamKind::Base, Tensor::new(vec![d], vec![1.0; d]).unwrap());
        let b = self.add_param(&format!("{prefix}.beta"), ParamKind::Base, Tensor::zeros(vec![d]));
        (g, b)
    }

    fn add_linear<R: Rng>(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Linear {
        let weight = self.add_param(&format!("{prefix}.weight"), ParamKind::Base, normal_tensor(rng, vec![fan_in, fan_out], INIT_STD));
        let bias = self.add_param(&format!("{prefix}.bias"), ParamKind::Base, Tensor::zeros(vec![fan_out]));
        Linear {
            weight,
            bias,
            lora: None,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn lora_active(&self) -> bool {
        self.lora_active
    }

    pub fn grl_lambda(&self) -> Option<f64> {
        self.grl_lambda
    }

    pub fn set_grl_lambda(&mut self, lambda: Option<f64>) -> Result<()> {
        if let Some(l) = lambda {
            if !(l > 0.0) || !l.is_finite() {
                return Err(Error::config(format!("grl lambda must be positive, got {l}")));
            }
        }
        self.grl_lambda = lambda;
        Ok(())
    }

    /// `(input_dim, n_voxels)` of the brain head, if attached.
    pub fn brain_head_dims(&self) -> Option<(usize, usize)> {
        self.brain_head.as_ref().map(|h| (h.input_dim, h.n_voxels))
    }

    /// Adds low-rank adapters to every attention and MLP projection and freezes
    /// the base weights. `B` starts at zero so the model's function is
    /// unchanged until the adapters are trained.
    pub fn attach_lora<R: Rng>(&mut self, rng: &mut R) {
        if self.lora_active {
            return;
        }
        let r = self.config.lora_rank;
        let a_std = 1.0 / r as f64;
        let mut blocks = std::mem::take(&mut self.blocks);
        for block in &mut blocks {
            for linear in [
                &mut block.query,
                &mut block.key,
                &mut block.value,
                &mut block.output,
                &mut block.fc1,
                &mut block.fc2,
            ] {
                let shape = self.params[linear.weight].value.shape().to_vec();
                let base = self.params[linear.weight].name.trim_end_matches(".weight").to_string();
                let a = self.add_param(&format!("{base}.lora_a"), ParamKind::Adapter, normal_tensor(rng, vec![shape[0], r], a_std));
                let b = self.add_param(&format!("{base}.lora_b"), ParamKind::Adapter, Tensor::zeros(vec![r, shape[1]]));
                linear.lora = Some((a, b));
            }
        }
        self.blocks = blocks;
        self.lora_active = true;
    }

    /// Attaches (or replaces) a linear brain head mapping `input_dim` features
    /// to `n_voxels` outputs.
    pub fn attach_brain_head<R: Rng>(&mut self, input_dim: usize, n_voxels: usize, rng: &mut R) -> Result<()> {
        if input_dim == 0 || n_voxels == 0 {
            return Err(Error::config("brain head needs positive input and voxel counts"));
        }
        let w = normal_tensor(rng, vec![input_dim, n_voxels], BRAIN_HEAD_INIT_STD);
        let b = Tensor::zeros(vec![n_voxels]);
        if let Some(head) = self.brain_head.take() {
            // Head parameters are the last two entries whenever a head exists.
            debug_assert_eq!(head.bias, self.params.len() - 1);
            self.params.truncate(head.weight);
        }
        let weight = self.add_param("brain_head.weight", ParamKind::BrainHead, w);
        let bias = self.add_param("brain_head.bias", ParamKind::BrainHead, b);
        self.brain_head = Some(BrainHead {
            weight,
            bias,
            input_dim,
            n_voxels,
        });
        Ok(())
    }

    /// Whether a parameter receives gradient updates: adapters and both heads
    /// once adapters are attached, otherwise the base model and LM head.
    pub fn is_trainable(&self, index: usize) -> bool {
        match self.params[index].kind {
            ParamKind::Base => !self.lora_active,
            ParamKind::Adapter | ParamKind::LmHead | ParamKind::BrainHead => true,
        }
    }

    /// Indices of trainable parameters.
    pub fn trainable_parameters(&self) -> Vec<usize> {
        (0..self.params.len()).filter(|&i| self.is_trainable(i)).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_parameters().iter().map(|&i| self.params[i].value.numel()).sum()
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    /// Binds every parameter into a fresh graph.
    pub fn session(&self) -> Session<'_> {
        let mut graph = Graph::new();
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| graph.leaf(p.value.clone(), self.is_trainable(i)))
            .collect();
        Session {
            model: self,
            graph,
            vars,
        }
    }

    /// Last-block representations for a batch of equal-length sequences:
    /// a `[batch * seq, d_model]` node.
    pub fn encode(&self, s: &mut Session<'_>, batch: &[Vec<Token>]) -> Result<Var> {
        let (n_seq, seq_len) = self.check_batch(batch)?;
        let ids: Vec<Token> = batch.iter().flatten().copied().collect();
        let positions: Vec<usize> = (0..n_seq).flat_map(|_| 0..seq_len).collect();
        let tok = s.graph.embedding(s.vars[self.token_embedding], &ids)?;
        let pos = s.graph.embedding(s.vars[self.position_embedding], &positions)?;
        let mut h = s.graph.add(tok, pos)?;
        let spec = AttentionSpec {
            n_seq,
            seq_len,
            n_heads: self.config.n_heads,
            causal: self.config.objective == Objective::Causal,
        };
        for block in &self.blocks {
            let x = s.graph.layer_norm(h, s.vars[block.ln1.0], s.vars[block.ln1.1])?;
            let q = self.linear(s, &block.query, x)?;
            let k = self.linear(s, &block.key, x)?;
            let v = self.linear(s, &block.value, x)?;
            let att = s.graph.attention(q, k, v, spec)?;
            let att = self.linear(s, &block.output, att)?;
            h = s.graph.add(h, att)?;
            let x = s.graph.layer_norm(h, s.vars[block.ln2.0], s.vars[block.ln2.1])?;
            let up = self.linear(s, &block.fc1, x)?;
            let up = s.graph.gelu(up);
            let down = self.linear(s, &block.fc2, up)?;
            h = s.graph.add(h, down)?;
        }
        Ok(h)
    }

    fn linear(&self, s: &mut Session<'_>, linear: &Linear, x: Var) -> Result<Var> {
        let y = s.graph.matmul(x, s.vars[linear.weight])?;
        let mut y = s.graph.add_row(y, s.vars[linear.bias])?;
        if self.lora_active {
            if let Some((a, b)) = linear.lora {
                let low = s.graph.matmul(x, s.vars[a])?;
                let delta = s.graph.matmul(low, s.vars[b])?;
                let delta = s.graph.scale(delta, self.config.lora_alpha / self.config.lora_rank as f64);
                y = s.graph.add(y, delta)?;
            }
        }
        Ok(y)
    }

    fn check_batch(&self, batch: &[Vec<Token>]) -> Result<(usize, usize)> {
        let Some(first) = batch.first() else {
            return Err(Error::contract("empty batch"));
        };
        let seq_len = first.len();
        if seq_len == 0 || seq_len > self.config.max_seq_len {
            return Err(Error::contract(format!(
                "sequence length {seq_len} outside 1..={}",
                self.config.max_seq_len
            )));
        }
        for seq in batch {
            if seq.len() != seq_len {
                return Err(Error::contract("sequences in a batch must have equal length"));
            }
            if let Some(&t) = seq.iter().find(|&&t| t >= self.config.vocab_size) {
                return Err(Error::contract(format!("token id {t} >= vocab size {}", self.config.vocab_size)));
            }
        }
        Ok((batch.len(), seq_len))
    }

    /// Language-modeling loss and last-block representations.
    ///
    /// Causal: mean next-token cross-entropy over the `seq - 1` predictable
    /// positions. Masked: `masked_count(seq)` positions per sequence are
    /// replaced by the mask token (drawn from `rng`) and the loss averages over
    /// those positions only.
    pub fn forward_lm<R: Rng>(&self, s: &mut Session<'_>, batch: &[Vec<Token>], rng: &mut R) -> Result<LmOutput> {
        let (n_seq, seq_len) = self.check_batch(batch)?;
        let (inputs, targets) = match self.config.objective {
            Objective::Causal => {
                if seq_len < 2 {
                    return Err(Error::contract("causal objective needs sequences of at least 2 tokens"));
                }
                let targets = batch
                    .iter()
                    .flat_map(|seq| (0..seq_len).map(move |i| seq.get(i + 1).copied()))
                    .collect();
                (batch.to_vec(), targets)
            }
            Objective::Masked => {
                let k = self.config.masked_count(seq_len);
                let mut inputs = batch.to_vec();
                let mut targets = vec![None; n_seq * seq_len];
                for (b, seq) in inputs.iter_mut().enumerate() {
                    for pos in rand::seq::index::sample(rng, seq_len, k) {
                        targets[b * seq_len + pos] = Some(seq[pos]);
                        seq[pos] = self.config.mask_token();
                    }
                }
                (inputs, targets)
            }
        };
        let reps = self.encode(s, &inputs)?;
        let normed = s.graph.layer_norm(reps, s.vars[self.final_norm.0], s.vars[self.final_norm.1])?;
        let logits = s.graph.matmul(normed, s.vars[self.lm_head.0])?;
        let logits = s.graph.add_row(logits, s.vars[self.lm_head.1])?;
        let loss = s.graph.cross_entropy(logits, targets)?;
        Ok(LmOutput {
            loss,
            representations: reps,
            n_seq,
            seq_len,
        })
    }

    /// Brain head prediction for `[rows, input_dim]` features, passing through
    /// gradient reversal first when configured.
    pub fn forward_brain(&self, s: &mut Session<'_>, features: Var) -> Result<Var> {
        let head = self
            .brain_head
            .as_ref()
            .ok_or_else(|| Error::config("model has no brain head"))?;
        let (_, width) = s.graph.value(features).as_matrix_dims();
        if width != head.input_dim {
            return Err(Error::contract(format!(
                "brain features have width {width}, head expects {}",
                head.input_dim
            )));
        }
        let x = match self.grl_lambda {
            Some(lambda) => s.graph.grl(features, lambda)?,
            None => features,
        };
        let y = s.graph.matmul(x, s.vars[head.weight])?;
        s.graph.add_row(y, s.vars[head.bias])
    }

    /// Last-block representations without gradient tracking, one
    /// `len x d_model` row-major buffer per sequence. Sequences of equal length
    /// are batched together.
    pub fn representations(&self, seqs: &[Vec<Token>]) -> Result<Vec<Vec<f64>>> {
        const CHUNK: usize = 32;
        let d = self.config.d_model;
        let mut out = vec![Vec::new(); seqs.len()];
        let mut by_len: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, s) in seqs.iter().enumerate() {
            by_len.entry(s.len()).or_default().push(i);
        }
        let frozen = self.frozen_view();
        for (len, idxs) in by_len {
            for chunk in idxs.chunks(CHUNK) {
                let batch: Vec<Vec<Token>> = chunk.iter().map(|&i| seqs[i].clone()).collect();
                let mut s = frozen.session();
                let reps = frozen.encode(&mut s, &batch)?;
                let data = s.graph.value(reps).data();
                for (j, &i) in chunk.iter().enumerate() {
                    out[i] = data[j * len * d..(j + 1) * len * d].to_vec();
                }
            }
        }
        Ok(out)
    }

    /// Per-sequence language-modeling loss without gradient tracking.
    pub fn sequence_losses<R: Rng>(&self, seqs: &[Vec<Token>], rng: &mut R) -> Result<Vec<f64>> {
        let frozen = self.frozen_view();
        seqs.iter()
            .map(|seq| {
                let mut s = frozen.session();
                let out = frozen.forward_lm(&mut s, std::slice::from_ref(seq), rng)?;
                Ok(s.graph.value(out.loss).item())
            })
            .collect()
    }

    /// A copy whose parameters never request gradients, for inference.
    fn frozen_view(&self) -> FrozenModel<'_> {
        FrozenModel(self)
    }
}

/// Borrowed model that binds parameters as constants.
struct FrozenModel<'m>(&'m DualHeadModel);

impl<'m> FrozenModel<'m> {
    fn session(&self) -> Session<'m> {
        let mut graph = Graph::new();
        let vars = self.0.params.iter().map(|p| graph.constant(p.value.clone())).collect();
        Session {
            model: self.0,
            graph,
            vars,
        }
    }
}

impl std::ops::Deref for FrozenModel<'_> {
    type Target = DualHeadModel;
    fn deref(&self) -> &DualHeadModel {
        self.0
    }
}

pub struct LmOutput {
    pub loss: Var,
    /// `[batch * seq, d_model]` last-block outputs.
    pub representations: Var,
    pub n_seq: usize,
    pub seq_len: usize,
}

/// A graph with every model parameter bound as a leaf.
pub struct Session<'m> {
    model: &'m DualHeadModel,
    pub graph: Graph,
    vars: Vec<Var>,
}

impl Session<'_> {
    pub fn param_var(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn param_var_by_name(&self, name: &str) -> Option<Var> {
        self.model.params.iter().position(|p| p.name == name).map(|i| self.vars[i])
    }

    /// Gradients of trainable parameters after backward, by parameter index.
    pub fn gradients(&self) -> Vec<(usize, Vec<f64>)> {
        self.model
            .trainable_parameters()
            .into_iter()
            .filter_map(|i| self.graph.grad(self.vars[i]).map(|g| (i, g.to_vec())))
            .collect()
    }
}
