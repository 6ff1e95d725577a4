//! Forward pass with per-layer taps and the activation cache used by
//! training.

use crate::error::{Error, Result};
use crate::math::{matvec, rmsnorm, silu, softmax};

use super::{LayerTapRecord, TokenSequence, TransformerWeights};

/// Per-layer, per-position activations retained for backpropagation.
pub(crate) struct LayerActs {
    /// Residual stream entering the block.
    pub x_in: Vec<f64>,
    /// RMS-normed attention input and its reciprocal rms.
    pub a: Vec<f64>,
    pub ri_a: f64,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Attention weights per head over positions 0..=t.
    pub attn_w: Vec<Vec<f64>>,
    /// Concatenated head outputs before the output projection.
    pub ho: Vec<f64>,
    /// Residual stream after the attention residual.
    pub x_mid: Vec<f64>,
    pub b: Vec<f64>,
    pub ri_f: f64,
    pub h_pre: Vec<f64>,
    pub h_act: Vec<f64>,
}

pub(crate) struct PositionActs {
    pub layers: Vec<LayerActs>,
    /// Final-normed last-layer state and its reciprocal rms.
    pub y: Vec<f64>,
    pub ri_y: f64,
    pub probs: Vec<f64>,
}

pub(crate) struct ForwardCache {
    pub positions: Vec<PositionActs>,
}

impl TransformerWeights {
    /// Runs the model over `prefix` under causal masking and records the
    /// residual-stream output of every block at every position, plus the
    /// final logits.
    pub fn forward_with_taps(&self, prefix: &TokenSequence) -> Result<LayerTapRecord> {
        self.forward_internal(prefix.as_slice(), false).map(|r| r.0)
    }

    pub(crate) fn forward_for_training(
        &self,
        tokens: &[u32],
    ) -> Result<(LayerTapRecord, ForwardCache)> {
        let (taps, cache) = self.forward_internal(tokens, true)?;
        Ok((taps, cache.expect("cache requested")))
    }

    fn forward_internal(
        &self,
        tokens: &[u32],
        keep_cache: bool,
    ) -> Result<(LayerTapRecord, Option<ForwardCache>)> {
        let cfg = &self.config;
        if tokens.is_empty() {
            return Err(Error::Data("empty prefix".into()));
        }
        if tokens.len() > cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: cfg.max_seq_len,
            });
        }
        for &id in tokens {
            if id as usize >= cfg.vocab_size {
                return Err(Error::VocabOutOfRange {
                    id,
                    vocab_size: cfg.vocab_size,
                });
            }
        }

        let d = cfg.d_model;
        let n_heads = cfg.n_heads;
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let t_len = tokens.len();

        let mut hiddens = vec![0.0f64; t_len * cfg.n_layers * d];
        let mut logits_all = vec![0.0f64; t_len * cfg.vocab_size];
        // per-layer accumulated keys/values for causal attention
        let mut keys: Vec<Vec<f64>> = vec![Vec::with_capacity(t_len * d); cfg.n_layers];
        let mut vals: Vec<Vec<f64>> = vec![Vec::with_capacity(t_len * d); cfg.n_layers];
        let mut cache = keep_cache.then(|| ForwardCache {
            positions: Vec::with_capacity(t_len),
        });

        for (t, &tok) in tokens.iter().enumerate() {
            let mut x: Vec<f64> = self
                .tok_emb(tok as usize)
                .iter()
                .zip(self.pos_emb(t))
                .map(|(a, b)| a + b)
                .collect();
            let mut layer_acts: Vec<LayerActs> = Vec::new();

            for l in 0..cfg.n_layers {
                let x_in = x.clone();
                let gains_a = &self.params[self.layout.attn_norm(l)];
                let (a, ri_a) = rmsnorm(&x, gains_a, cfg.norm_epsilon);
                let q = matvec(&self.params[self.layout.wq(l)], &a, d, d);
                let k = matvec(&self.params[self.layout.wk(l)], &a, d, d);
                let v = matvec(&self.params[self.layout.wv(l)], &a, d, d);
                keys[l].extend_from_slice(&k);
                vals[l].extend_from_slice(&v);

                let mut ho = vec![0.0f64; d];
                let mut attn_w: Vec<Vec<f64>> = Vec::with_capacity(n_heads);
                for h in 0..n_heads {
                    let hq = &q[h * dh..(h + 1) * dh];
                    let mut scores = Vec::with_capacity(t + 1);
                    for tau in 0..=t {
                        let kt = &keys[l][tau * d + h * dh..tau * d + (h + 1) * dh];
                        let s: f64 = hq.iter().zip(kt).map(|(a, b)| a * b).sum();
                        scores.push(s * scale);
                    }
                    let w = softmax(&scores);
                    let out = &mut ho[h * dh..(h + 1) * dh];
                    for (tau, &wt) in w.iter().enumerate() {
                        let vt = &vals[l][tau * d + h * dh..tau * d + (h + 1) * dh];
                        for (o, vv) in out.iter_mut().zip(vt) {
                            *o += wt * vv;
                        }
                    }
                    attn_w.push(w);
                }
                let attn_out = matvec(&self.params[self.layout.wo(l)], &ho, d, d);
                let x_mid: Vec<f64> = x_in.iter().zip(&attn_out).map(|(a, b)| a + b).collect();

                let gains_f = &self.params[self.layout.ffn_norm(l)];
                let (b, ri_f) = rmsnorm(&x_mid, gains_f, cfg.norm_epsilon);
                let h_pre = matvec(&self.params[self.layout.w1(l)], &b, cfg.d_ff, d);
                let h_act: Vec<f64> = h_pre.iter().map(|&v| silu(v)).collect();
                let ffn_out = matvec(&self.params[self.layout.w2(l)], &h_act, d, cfg.d_ff);
                x = x_mid.iter().zip(&ffn_out).map(|(a, b)| a + b).collect();

                let base = (t * cfg.n_layers + l) * d;
                hiddens[base..base + d].copy_from_slice(&x);

                if keep_cache {
                    layer_acts.push(LayerActs {
                        x_in,
                        a,
                        ri_a,
                        q,
                        k,
                        v,
                        attn_w,
                        ho,
                        x_mid,
                        b,
                        ri_f,
                        h_pre,
                        h_act,
                    });
                }
            }

            let (y, ri_y) = rmsnorm(&x, self.final_norm(), cfg.norm_epsilon);
            let logits = self.vocab_head().apply(&y);
            logits_all[t * cfg.vocab_size..(t + 1) * cfg.vocab_size].copy_from_slice(&logits);
            if let Some(c) = cache.as_mut() {
                let probs = softmax(&logits);
                c.positions.push(PositionActs {
                    layers: layer_acts,
                    y,
                    ri_y,
                    probs,
                });
            }
        }

        Ok((
            LayerTapRecord {
                positions: t_len,
                n_layers: cfg.n_layers,
                d_model: d,
                vocab_size: cfg.vocab_size,
                hiddens,
                logits: logits_all,
            },
            cache,
        ))
    }
}
