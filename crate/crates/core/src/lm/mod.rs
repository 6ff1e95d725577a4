//! A small decoder-only transformer with observable per-layer hidden states.
//!
//! The model is the frozen base LM of the pipeline: pre-norm blocks
//! (RMSNorm, causal multi-head attention, SiLU feed-forward), learned
//! absolute position embeddings, and an untied vocabulary head. Layer tap
//! `h_j` is the residual-stream output of block `j`, so `h_N` (with
//! `N = n_layers`) is the mature state the final norm and head consume.

mod checkpoint;
mod forward;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use train::{
    held_out_cross_entropy, split_held_out, train_base_lm, unigram_baseline_ce, BaseTrainConfig,
    StepRecord,
};

use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"ENNDOLA1";

/// Architecture hyperparameters. `n_layers` is also the mature layer index N.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub norm_epsilon: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig("vocab_size must be >= 2".into()));
        }
        if self.n_layers < 2 {
            return Err(Error::InvalidConfig(
                "n_layers must be >= 2 so a premature layer exists below the mature layer".into(),
            ));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::InvalidConfig("zero-sized dimension".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::InvalidConfig("max_seq_len must be >= 2".into()));
        }
        if !(self.norm_epsilon.is_finite() && self.norm_epsilon > 0.0) {
            return Err(Error::InvalidConfig("norm_epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Token ids with every id checked against the vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new_checked(ids: Vec<u32>, vocab_size: usize) -> Result<Self> {
        for &id in &ids {
            if id as usize >= vocab_size {
                return Err(Error::VocabOutOfRange { id, vocab_size });
            }
        }
        Ok(Self { ids })
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Offsets of each named tensor inside the flat parameter buffer.
///
/// Declaration order is also serialization order: token embedding,
/// position embedding, per-layer blocks, final norm gains, vocab head.
#[derive(Debug, Clone)]
pub(crate) struct ParamLayout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layer_base: usize,
    pub layer_stride: usize,
    pub final_norm: usize,
    pub head: usize,
    pub total: usize,
    d: usize,
    d_ff: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let d_ff = cfg.d_ff;
        let tok_emb = 0;
        let pos_emb = tok_emb + cfg.vocab_size * d;
        let layer_base = pos_emb + cfg.max_seq_len * d;
        let layer_stride = 2 * d + 4 * d * d + 2 * d * d_ff;
        let final_norm = layer_base + cfg.n_layers * layer_stride;
        let head = final_norm + d;
        let total = head + d * cfg.vocab_size;
        Self {
            tok_emb,
            pos_emb,
            layer_base,
            layer_stride,
            final_norm,
            head,
            total,
            d,
            d_ff,
        }
    }

    fn layer(&self, l: usize) -> usize {
        self.layer_base + l * self.layer_stride
    }

    pub fn attn_norm(&self, l: usize) -> std::ops::Range<usize> {
        let b = self.layer(l);
        b..b + self.d
    }
    pub fn wq(&self, l: usize) -> std::ops::Range<usize> {
        let b = self.layer(l) + self.d;
        b..b + self.d * self.d
    }
    pub fn wk(&self, l: usize) -> std::ops::Range<usize> {
        let b = self.layer(l) + self.d + self.d * self.d;
        b..b + self.d * self.d
    }
    pub fn wv(&self, l: usize) -> std::ops::Range<usize> {
        let b = self.layer(l) + self.d + 2 * self.d * self.d;
        b..b + self.d * self.d
    }
    pub fn wo(&self, l: usize) -> std::ops::Range<usize> {
        let b = self.layer(l) + self.d + 3 * self.d * self.d;
        b..b + self.d * self.d
    }
    pub fn ffn_norm(&self, l: usize) -> std::ops::Range<usize> {
        let b = self.layer(l) + self.d + 4 * self.d * self.d;
        b..b + self.d
    }
    pub fn w1(&self, l: usize) -> std::ops::Range<usize> {
        let b = self.layer(l) + 2 * self.d + 4 * self.d * self.d;
        b..b + self.d_ff * self.d
    }
    pub fn w2(&self, l: usize) -> std::ops::Range<usize> {
        let b = self.layer(l) + 2 * self.d + 4 * self.d * self.d + self.d_ff * self.d;
        b..b + self.d * self.d_ff
    }
    pub fn final_norm_range(&self) -> std::ops::Range<usize> {
        self.final_norm..self.final_norm + self.d
    }
    pub fn head_range(&self, vocab: usize) -> std::ops::Range<usize> {
        self.head..self.head + self.d * vocab
    }

    /// (name, shape, range) triples in declaration order.
    pub fn entries(&self, cfg: &ModelConfig) -> Vec<(String, Vec<usize>, std::ops::Range<usize>)> {
        let d = cfg.d_model;
        let mut out = vec![
            (
                "tok_emb".to_string(),
                vec![cfg.vocab_size, d],
                self.tok_emb..self.tok_emb + cfg.vocab_size * d,
            ),
            (
                "pos_emb".to_string(),
                vec![cfg.max_seq_len, d],
                self.pos_emb..self.pos_emb + cfg.max_seq_len * d,
            ),
        ];
        for l in 0..cfg.n_layers {
            out.push((format!("layer{l}.attn_norm"), vec![d], self.attn_norm(l)));
            out.push((format!("layer{l}.wq"), vec![d, d], self.wq(l)));
            out.push((format!("layer{l}.wk"), vec![d, d], self.wk(l)));
            out.push((format!("layer{l}.wv"), vec![d, d], self.wv(l)));
            out.push((format!("layer{l}.wo"), vec![d, d], self.wo(l)));
            out.push((format!("layer{l}.ffn_norm"), vec![d], self.ffn_norm(l)));
            out.push((format!("layer{l}.w1"), vec![cfg.d_ff, d], self.w1(l)));
            out.push((format!("layer{l}.w2"), vec![d, cfg.d_ff], self.w2(l)));
        }
        out.push((
            "final_norm".to_string(),
            vec![d],
            self.final_norm_range(),
        ));
        out.push((
            "head".to_string(),
            vec![d, cfg.vocab_size],
            self.head_range(cfg.vocab_size),
        ));
        out
    }
}

/// Frozen base-LM parameters. Downstream stages only ever hold `&self`,
/// so the freeze contract is enforced by the type system; the
/// serialization-equality tests pin it down as well.
#[derive(Debug, Clone)]
pub struct TransformerWeights {
    pub config: ModelConfig,
    /// Seed used for initialization; recorded in the checkpoint header.
    pub seed: u64,
    pub(crate) params: Vec<f64>,
    pub(crate) layout: ParamLayout,
}

impl TransformerWeights {
    /// Seeded scaled-normal initialization (std 0.02, norm gains at 1).
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0f64; layout.total];
        for v in &mut params {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v = 0.02 * n;
        }
        for l in 0..config.n_layers {
            params[layout.attn_norm(l)].fill(1.0);
            params[layout.ffn_norm(l)].fill(1.0);
        }
        params[layout.final_norm_range()].fill(1.0);
        Ok(Self {
            config: config.clone(),
            seed,
            params,
            layout,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn tok_emb(&self, id: usize) -> &[f64] {
        let d = self.config.d_model;
        &self.params[self.layout.tok_emb + id * d..self.layout.tok_emb + (id + 1) * d]
    }

    pub fn pos_emb(&self, pos: usize) -> &[f64] {
        let d = self.config.d_model;
        &self.params[self.layout.pos_emb + pos * d..self.layout.pos_emb + (pos + 1) * d]
    }

    pub fn final_norm(&self) -> &[f64] {
        &self.params[self.layout.final_norm_range()]
    }

    /// The shared vocabulary head, row-major `[d_model, vocab_size]`.
    pub fn vocab_head(&self) -> VocabHead<'_> {
        VocabHead {
            matrix: &self.params[self.layout.head_range(self.config.vocab_size)],
            d_model: self.config.d_model,
            vocab_size: self.config.vocab_size,
        }
    }

    /// Final-norm then head: the early-exit projection applied to any
    /// residual-stream state (logit-lens convention).
    pub fn project_to_vocab(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.config.d_model {
            return Err(Error::Shape(format!(
                "hidden width {} != d_model {}",
                h.len(),
                self.config.d_model
            )));
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite hidden state".into()));
        }
        let (y, _) = crate::math::rmsnorm(h, self.final_norm(), self.config.norm_epsilon);
        Ok(self.vocab_head().apply(&y))
    }

    /// Canonical serialized bytes (identical to the checkpoint file).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        checkpoint::write_weights(&mut buf, self).expect("in-memory serialization");
        buf
    }

    /// SHA-256 of the canonical serialization; used to tie feature caches
    /// to the checkpoint that produced them.
    pub fn content_hash(&self) -> [u8; 32] {
        crate::io::sha256(&self.to_bytes())
    }
}

/// Borrowed view of the vocabulary head so the epinet can run against a
/// full model or a standalone head (toy experiments).
#[derive(Debug, Clone, Copy)]
pub struct VocabHead<'a> {
    pub matrix: &'a [f64],
    pub d_model: usize,
    pub vocab_size: usize,
}

impl<'a> VocabHead<'a> {
    pub fn new(matrix: &'a [f64], d_model: usize, vocab_size: usize) -> Self {
        assert_eq!(matrix.len(), d_model * vocab_size);
        Self {
            matrix,
            d_model,
            vocab_size,
        }
    }

    /// logits_w = Σ_d head[d][w] · y_d
    pub fn apply(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.d_model);
        let mut logits = vec![0.0; self.vocab_size];
        for (d, &yd) in y.iter().enumerate() {
            let row = &self.matrix[d * self.vocab_size..(d + 1) * self.vocab_size];
            for (lw, hw) in logits.iter_mut().zip(row) {
                *lw += yd * hw;
            }
        }
        logits
    }

    /// dy_d = Σ_w head[d][w] · dlogits_w
    pub fn backward_input(&self, dlogits: &[f64]) -> Vec<f64> {
        debug_assert_eq!(dlogits.len(), self.vocab_size);
        (0..self.d_model)
            .map(|d| {
                self.matrix[d * self.vocab_size..(d + 1) * self.vocab_size]
                    .iter()
                    .zip(dlogits)
                    .map(|(h, g)| h * g)
                    .sum()
            })
            .collect()
    }
}

/// Hidden state of every layer at every position, plus per-position final
/// logits. `hidden(t, j)` is h_j, the residual-stream output of block j
/// (j in 1..=n_layers).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTapRecord {
    pub positions: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub(crate) hiddens: Vec<f64>,
    pub(crate) logits: Vec<f64>,
}

impl LayerTapRecord {
    pub fn hidden(&self, t: usize, layer: usize) -> &[f64] {
        assert!(t < self.positions, "position {t} out of range");
        assert!(
            (1..=self.n_layers).contains(&layer),
            "layer {layer} out of range 1..={}",
            self.n_layers
        );
        let base = (t * self.n_layers + (layer - 1)) * self.d_model;
        &self.hiddens[base..base + self.d_model]
    }

    pub fn logits_at(&self, t: usize) -> &[f64] {
        assert!(t < self.positions);
        &self.logits[t * self.vocab_size..(t + 1) * self.vocab_size]
    }
}
