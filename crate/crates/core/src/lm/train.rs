//! Base-LM training: manual backpropagation through the transformer and a
//! constant-LR Adam loop. Base-LM quality only needs to clear the unigram
//! baseline so that layer contrasts downstream are meaningful.

use crate::error::{Error, Result};
use crate::math::{matvec_grad_w, matvec_grad_x, rmsnorm_backward, silu_derivative};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::forward::ForwardCache;
use super::{ModelConfig, TransformerWeights};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Window length in tokens; clamped to max_seq_len.
    pub window: usize,
    pub learning_rate: f64,
    /// Fraction of the corpus tail held out for evaluation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            window: 64,
            learning_rate: 1e-3,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

/// One optimizer step of the loss log.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
}

/// Adam with per-parameter moments, constant learning rate.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Accumulates the window NLL (sum over positions) into `grads`, scaling
/// each position's cross-entropy gradient by `scale`.
pub(crate) fn backward_window(
    weights: &TransformerWeights,
    tokens: &[u32],
    targets: &[u32],
    taps: &super::LayerTapRecord,
    cache: &ForwardCache,
    grads: &mut [f64],
    scale: f64,
) -> f64 {
    let cfg = &weights.config;
    let d = cfg.d_model;
    let d_ff = cfg.d_ff;
    let vocab = cfg.vocab_size;
    let n_heads = cfg.n_heads;
    let dh = d / n_heads;
    let attn_scale = 1.0 / (dh as f64).sqrt();
    let t_len = tokens.len();
    let layout = &weights.layout;
    debug_assert_eq!(targets.len(), t_len);

    let mut nll = 0.0f64;
    // gradient wrt the residual stream after the top layer, per position
    let mut dx_top: Vec<Vec<f64>> = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let pos = &cache.positions[t];
        let target = targets[t] as usize;
        nll += -pos.probs[target].ln();
        let mut dlogits = pos.probs.clone();
        dlogits[target] -= 1.0;
        for g in &mut dlogits {
            *g *= scale;
        }
        // head backward
        let head = weights.vocab_head();
        let dy = head.backward_input(&dlogits);
        {
            let ghead = &mut grads[layout.head_range(vocab)];
            for (di, &yd) in pos.y.iter().enumerate() {
                let row = &mut ghead[di * vocab..(di + 1) * vocab];
                for (r, g) in row.iter_mut().zip(&dlogits) {
                    *r += yd * g;
                }
            }
        }
        let h_n = taps.hidden(t, cfg.n_layers);
        let dx = rmsnorm_backward(
            &dy,
            h_n,
            weights.final_norm(),
            pos.ri_y,
            &mut grads[layout.final_norm_range()],
        );
        dx_top.push(dx);
    }

    for l in (0..cfg.n_layers).rev() {
        // feed-forward sublayer
        let mut dx_mid: Vec<Vec<f64>> = Vec::with_capacity(t_len);
        for (t, dxt) in dx_top.iter().enumerate() {
            let acts = &cache.positions[t].layers[l];
            let mut d_h_act = vec![0.0; d_ff];
            matvec_grad_x(&mut d_h_act, &weights.params[layout.w2(l)], dxt);
            matvec_grad_w(&mut grads[layout.w2(l)], dxt, &acts.h_act);
            let d_h_pre: Vec<f64> = d_h_act
                .iter()
                .zip(&acts.h_pre)
                .map(|(g, &pre)| g * silu_derivative(pre))
                .collect();
            matvec_grad_w(&mut grads[layout.w1(l)], &d_h_pre, &acts.b);
            let mut db = vec![0.0; d];
            matvec_grad_x(&mut db, &weights.params[layout.w1(l)], &d_h_pre);
            let dxm = rmsnorm_backward(
                &db,
                &acts.x_mid,
                &weights.params[layout.ffn_norm(l)],
                acts.ri_f,
                &mut grads[layout.ffn_norm(l)],
            );
            dx_mid.push(dxt.iter().zip(&dxm).map(|(a, b)| a + b).collect());
        }

        // attention sublayer: q/k/v gradients couple positions
        let mut dq = vec![vec![0.0f64; d]; t_len];
        let mut dk = vec![vec![0.0f64; d]; t_len];
        let mut dv = vec![vec![0.0f64; d]; t_len];
        for (t, dxm) in dx_mid.iter().enumerate() {
            let acts = &cache.positions[t].layers[l];
            let mut dho = vec![0.0; d];
            matvec_grad_x(&mut dho, &weights.params[layout.wo(l)], dxm);
            matvec_grad_w(&mut grads[layout.wo(l)], dxm, &acts.ho);
            for h in 0..n_heads {
                let dout = &dho[h * dh..(h + 1) * dh];
                let w = &acts.attn_w[h];
                let mut dw = Vec::with_capacity(t + 1);
                for tau in 0..=t {
                    let vt = &cache.positions[tau].layers[l].v[h * dh..(h + 1) * dh];
                    dw.push(dout.iter().zip(vt).map(|(a, b)| a * b).sum::<f64>());
                }
                let inner: f64 = dw.iter().zip(w).map(|(a, b)| a * b).sum();
                let hq = &acts.q[h * dh..(h + 1) * dh];
                for tau in 0..=t {
                    let ds = w[tau] * (dw[tau] - inner) * attn_scale;
                    let kt = &cache.positions[tau].layers[l].k[h * dh..(h + 1) * dh];
                    for i in 0..dh {
                        dq[t][h * dh + i] += ds * kt[i];
                        dk[tau][h * dh + i] += ds * hq[i];
                        dv[tau][h * dh + i] += w[tau] * dout[i];
                    }
                }
            }
        }
        for tau in 0..t_len {
            let acts = &cache.positions[tau].layers[l];
            let mut da = vec![0.0; d];
            matvec_grad_x(&mut da, &weights.params[layout.wq(l)], &dq[tau]);
            matvec_grad_x(&mut da, &weights.params[layout.wk(l)], &dk[tau]);
            matvec_grad_x(&mut da, &weights.params[layout.wv(l)], &dv[tau]);
            matvec_grad_w(&mut grads[layout.wq(l)], &dq[tau], &acts.a);
            matvec_grad_w(&mut grads[layout.wk(l)], &dk[tau], &acts.a);
            matvec_grad_w(&mut grads[layout.wv(l)], &dv[tau], &acts.a);
            let dxin = rmsnorm_backward(
                &da,
                &acts.x_in,
                &weights.params[layout.attn_norm(l)],
                acts.ri_a,
                &mut grads[layout.attn_norm(l)],
            );
            dx_top[tau] = dx_mid[tau].iter().zip(&dxin).map(|(a, b)| a + b).collect();
        }
    }

    for (t, &tok) in tokens.iter().enumerate() {
        let te = layout.tok_emb + tok as usize * d;
        let pe = layout.pos_emb + t * d;
        for i in 0..d {
            grads[te + i] += dx_top[t][i];
            grads[pe + i] += dx_top[t][i];
        }
    }
    nll
}

/// Trains a fresh model on `corpus` by sampling random windows.
/// Returns the weights and a per-step loss log.
pub fn train_base_lm(
    config: &ModelConfig,
    corpus: &[u32],
    opt: &BaseTrainConfig,
) -> Result<(TransformerWeights, Vec<StepRecord>)> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    if corpus.len() < config.max_seq_len + 1 {
        return Err(Error::Data(format!(
            "corpus has {} tokens, need at least max_seq_len + 1 = {}",
            corpus.len(),
            config.max_seq_len + 1
        )));
    }
    for &id in corpus {
        if id as usize >= config.vocab_size {
            return Err(Error::VocabOutOfRange {
                id,
                vocab_size: config.vocab_size,
            });
        }
    }
    let window = opt.window.min(config.max_seq_len).max(1);
    let val_len = ((corpus.len() as f64 * opt.val_fraction) as usize).max(window + 1);
    let train_len = corpus
        .len()
        .checked_sub(val_len)
        .filter(|&n| n >= window + 1)
        .ok_or_else(|| Error::Data("corpus too small for the train/val split".into()))?;
    let train = &corpus[..train_len];

    let mut weights = TransformerWeights::init(config, opt.seed)?;
    let mut adam = Adam::new(weights.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed.wrapping_add(1));
    let mut grads = vec![0.0f64; weights.param_count()];
    let mut log = Vec::with_capacity(opt.steps);

    for step in 1..=opt.steps {
        grads.iter_mut().for_each(|g| *g = 0.0);
        let mut nll_sum = 0.0;
        let scale = 1.0 / (window * opt.batch_size) as f64;
        for _ in 0..opt.batch_size {
            let start = rng.random_range(0..=train.len() - window - 1);
            let tokens = &train[start..start + window];
            let targets = &train[start + 1..start + window + 1];
            let (taps, cache) = weights.forward_for_training(tokens)?;
            nll_sum += backward_window(&weights, tokens, targets, &taps, &cache, &mut grads, scale);
        }
        let loss = nll_sum * scale;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step });
        }
        adam.step(&mut weights.params, &grads, opt.learning_rate);
        log.push(StepRecord { step, loss });
    }
    Ok((weights, log))
}

fn tiled_windows(held_out: &[u32], window: usize) -> Vec<(&[u32], &[u32])> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + 1 < held_out.len() {
        let end = (i + window + 1).min(held_out.len());
        out.push((&held_out[i..end - 1], &held_out[i + 1..end]));
        i += window;
    }
    out
}

/// Mean next-token cross-entropy (nats) over non-overlapping windows of
/// `held_out`.
pub fn held_out_cross_entropy(
    weights: &TransformerWeights,
    held_out: &[u32],
    window: usize,
) -> Result<f64> {
    let window = window.min(weights.config.max_seq_len).max(1);
    let mut nll = 0.0;
    let mut count = 0usize;
    for (tokens, targets) in tiled_windows(held_out, window) {
        let seq = super::TokenSequence::new_checked(tokens.to_vec(), weights.config.vocab_size)?;
        let taps = weights.forward_with_taps(&seq)?;
        for (t, &target) in targets.iter().enumerate() {
            let probs = crate::math::softmax(taps.logits_at(t));
            nll += -probs[target as usize].ln();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Data("held-out split has no predictable tokens".into()));
    }
    Ok(nll / count as f64)
}

/// Add-one-smoothed unigram cross-entropy over the same held-out targets
/// as `held_out_cross_entropy` (frequencies estimated on `train`).
pub fn unigram_baseline_ce(
    train: &[u32],
    held_out: &[u32],
    window: usize,
    vocab_size: usize,
) -> f64 {
    let mut counts = vec![0u64; vocab_size];
    for &t in train {
        counts[t as usize] += 1;
    }
    let denom = (train.len() + vocab_size) as f64;
    let mut nll = 0.0;
    let mut count = 0usize;
    for (_, targets) in tiled_windows(held_out, window.max(1)) {
        for &t in targets {
            let p = (counts[t as usize] + 1) as f64 / denom;
            nll += -p.ln();
            count += 1;
        }
    }
    if count == 0 {
        return f64::INFINITY;
    }
    nll / count as f64
}

/// Splits a corpus the same way `train_base_lm` does; exposed so callers
/// can evaluate on the exact held-out region.
pub fn split_held_out<'a>(
    corpus: &'a [u32],
    config: &ModelConfig,
    opt: &BaseTrainConfig,
) -> (&'a [u32], &'a [u32]) {
    let window = opt.window.min(config.max_seq_len).max(1);
    let val_len = ((corpus.len() as f64 * opt.val_fraction) as usize).max(window + 1);
    let train_len = corpus.len().saturating_sub(val_len);
    (&corpus[..train_len], &corpus[train_len..])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 7,
            n_layers: 2,
            d_model: 4,
            n_heads: 2,
            d_ff: 6,
            max_seq_len: 8,
            norm_epsilon: 1e-5,
        }
    }

    fn window_loss(weights: &TransformerWeights, tokens: &[u32], targets: &[u32]) -> f64 {
        let (_, cache) = weights.forward_for_training(tokens).unwrap();
        let mut nll = 0.0;
        for (t, &target) in targets.iter().enumerate() {
            nll += -cache.positions[t].probs[target as usize].ln();
        }
        nll / targets.len() as f64
    }

    #[test]
    fn backward_matches_finite_differences() {
        let config = cfg();
        let weights = TransformerWeights::init(&config, 11).unwrap();
        let tokens: Vec<u32> = vec![1, 4, 2, 6, 0];
        let targets: Vec<u32> = vec![4, 2, 6, 0, 3];
        let scale = 1.0 / targets.len() as f64;
        let (taps, cache) = weights.forward_for_training(&tokens).unwrap();
        let mut grads = vec![0.0; weights.param_count()];
        backward_window(&weights, &tokens, &targets, &taps, &cache, &mut grads, scale);

        let h = 1e-5;
        let n = weights.param_count();
        // probe a deterministic spread of parameters across all tensors
        for idx in (0..n).step_by(n / 97 + 1) {
            let mut wp = weights.clone();
            wp.params[idx] += h;
            let mut wm = weights.clone();
            wm.params[idx] -= h;
            let fd = (window_loss(&wp, &tokens, &targets) - window_loss(&wm, &tokens, &targets))
                / (2.0 * h);
            let denom = grads[idx].abs().max(fd.abs()).max(1e-6);
            assert!(
                ((grads[idx] - fd) / denom).abs() < 1e-4,
                "grad mismatch at {idx}: analytic {} vs fd {}",
                grads[idx],
                fd
            );
        }
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let config = cfg();
        let corpus: Vec<u32> = (0..64).map(|i| (i % 7) as u32).collect();
        let opt = BaseTrainConfig {
            steps: 0,
            seed: 5,
            ..Default::default()
        };
        let (w, log) = train_base_lm(&config, &corpus, &opt).unwrap();
        assert!(log.is_empty());
        let init = TransformerWeights::init(&config, 5).unwrap();
        assert_eq!(w.params, init.params);
    }

    #[test]
    fn same_seed_same_final_loss() {
        let config = cfg();
        let corpus: Vec<u32> = (0..160).map(|i| ((i * 3 + i / 5) % 7) as u32).collect();
        let opt = BaseTrainConfig {
            steps: 5,
            batch_size: 2,
            window: 6,
            learning_rate: 1e-3,
            val_fraction: 0.2,
            seed: 9,
        };
        let (wa, la) = train_base_lm(&config, &corpus, &opt).unwrap();
        let (wb, lb) = train_base_lm(&config, &corpus, &opt).unwrap();
        assert_eq!(la.last().unwrap().loss.to_bits(), lb.last().unwrap().loss.to_bits());
        assert_eq!(wa.params, wb.params);
    }

    #[test]
    fn empty_and_short_corpora_are_rejected() {
        let config = cfg();
        assert!(matches!(
            train_base_lm(&config, &[], &BaseTrainConfig::default()),
            Err(Error::Data(_))
        ));
        let short: Vec<u32> = vec![1; config.max_seq_len];
        assert!(train_base_lm(&config, &short, &BaseTrainConfig::default()).is_err());
    }

    #[test]
    fn alternating_corpus_trains_to_near_determinism() {
        // oracle: the bigram table of "abab..." is deterministic, so
        // held-out CE can approach 0
        let config = ModelConfig {
            vocab_size: 4,
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 16,
            norm_epsilon: 1e-5,
        };
        let corpus: Vec<u32> = (0..600).map(|i| (i % 2) as u32).collect();
        let opt = BaseTrainConfig {
            steps: 220,
            batch_size: 4,
            window: 8,
            learning_rate: 3e-3,
            val_fraction: 0.1,
            seed: 1,
        };
        let (w, log) = train_base_lm(&config, &corpus, &opt).unwrap();
        assert!(log.last().unwrap().loss.is_finite());
        let (_, val) = split_held_out(&corpus, &config, &opt);
        let ce = held_out_cross_entropy(&w, val, opt.window).unwrap();
        assert!(ce < 0.1, "held-out CE {ce} not < 0.1 nats/token");
    }
}
