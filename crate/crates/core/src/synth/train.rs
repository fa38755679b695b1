//! Manual-backprop Adam trainer for the toy model.
//!
//! Loss is next-token cross-entropy over continuation tokens only, averaged
//! over every target token in the batch. Sequences are processed one at a
//! time and their gradients summed in batch order, so training is
//! bit-reproducible under a seed.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Example;
use crate::error::{ModelError, SynthError};
use crate::masking::TokenId;
use crate::model::{ToyModel, Weights};
use crate::tensor::{self, dot};

/// A prompt plus continuation; positions `first_target..` are predicted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainSeq {
    pub tokens: Vec<TokenId>,
    pub first_target: usize,
}

impl TrainSeq {
    pub fn from_example(e: &Example) -> Self {
        let mut tokens = e.prompt_tokens.clone();
        tokens.extend_from_slice(&e.target_tokens);
        Self {
            tokens,
            first_target: e.prompt_tokens.len(),
        }
    }

    fn targets(&self) -> usize {
        self.tokens.len() - self.first_target
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f32,
    pub batch_size: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Linear warm-up length in steps.
    pub warmup: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 3e-3,
            batch_size: 32,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mini-batch loss before each update.
    pub losses: Vec<f32>,
    /// Loss of the first `min(256, n)` sequences before and after training.
    pub initial_loss: f32,
    pub final_loss: f32,
}

struct LayerActs {
    x_in: Vec<f32>,
    n1: Vec<f32>,
    r1: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    probs: Vec<f32>,
    attn: Vec<f32>,
    x_mid: Vec<f32>,
    n2: Vec<f32>,
    r2: Vec<f32>,
    up: Vec<f32>,
    act: Vec<f32>,
}

fn check_seq(model: &ToyModel, seq: &TrainSeq) -> Result<(), ModelError> {
    let cfg = model.config();
    if seq.first_target == 0 || seq.first_target >= seq.tokens.len() {
        return Err(ModelError::Shape {
            what: "first_target",
            expected: 1,
            actual: seq.first_target,
        });
    }
    if seq.tokens.len() > cfg.max_seq_len {
        return Err(ModelError::PositionOutOfRange {
            position: seq.tokens.len() - 1,
            max: cfg.max_seq_len,
        });
    }
    if let Some(&t) = seq.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            token: t,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Causal forward over one sequence keeping every activation.
fn forward(model: &ToyModel, tokens: &[TokenId]) -> (Vec<LayerActs>, Vec<f32>) {
    let cfg = model.config();
    let (s, d, hd, m) = (tokens.len(), cfg.hidden_dim, cfg.head_dim, cfg.mlp_dim);
    let w = model.weights();
    let scale = 1.0 / libm::sqrtf(hd as f32);
    let mut x = Vec::with_capacity(s * d);
    for &t in tokens {
        x.extend_from_slice(w.token_embedding.row(t as usize));
    }
    let mut acts = Vec::with_capacity(cfg.num_layers);
    let mut proj = vec![0.0f32; s * d];
    for lw in &w.layers {
        let x_in = x.clone();
        let mut n1 = vec![0.0f32; s * d];
        let mut r1 = vec![0.0f32; s];
        for i in 0..s {
            r1[i] = tensor::rms_normalize_into(&x[i * d..(i + 1) * d], &lw.attn_norm, cfg.norm_eps, &mut n1[i * d..(i + 1) * d]);
        }
        let mut q = vec![0.0f32; s * d];
        let mut k = vec![0.0f32; s * d];
        let mut v = vec![0.0f32; s * d];
        tensor::matmul_into(&n1, s, d, lw.wq.data(), d, &mut q);
        tensor::matmul_into(&n1, s, d, lw.wk.data(), d, &mut k);
        tensor::matmul_into(&n1, s, d, lw.wv.data(), d, &mut v);
        for i in 0..s {
            model.rope().apply(&mut q[i * d..(i + 1) * d], i);
            model.rope().apply(&mut k[i * d..(i + 1) * d], i);
        }
        let mut probs = vec![0.0f32; cfg.num_heads * s * s];
        let mut attn = vec![0.0f32; s * d];
        for h in 0..cfg.num_heads {
            for i in 0..s {
                let qi = &q[i * d + h * hd..i * d + (h + 1) * hd];
                let p = &mut probs[(h * s + i) * s..(h * s + i + 1) * s];
                let mut max = f32::NEG_INFINITY;
                for j in 0..=i {
                    p[j] = dot(qi, &k[j * d + h * hd..j * d + (h + 1) * hd]) * scale;
                    max = max.max(p[j]);
                }
                let mut sum = 0.0f32;
                for pj in p[..=i].iter_mut() {
                    *pj = libm::expf(*pj - max);
                    sum += *pj;
                }
                let inv = 1.0 / sum;
                let out = &mut attn[i * d + h * hd..i * d + (h + 1) * hd];
                for j in 0..=i {
                    p[j] *= inv;
                    let vj = &v[j * d + h * hd..j * d + (h + 1) * hd];
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o += p[j] * vv;
                    }
                }
            }
        }
        tensor::matmul_into(&attn, s, d, lw.wo.data(), d, &mut proj);
        for (xx, &p) in x.iter_mut().zip(&proj) {
            *xx += p;
        }
        let x_mid = x.clone();
        let mut n2 = vec![0.0f32; s * d];
        let mut r2 = vec![0.0f32; s];
        for i in 0..s {
            r2[i] = tensor::rms_normalize_into(&x[i * d..(i + 1) * d], &lw.mlp_norm, cfg.norm_eps, &mut n2[i * d..(i + 1) * d]);
        }
        let mut up = vec![0.0f32; s * m];
        tensor::matmul_into(&n2, s, d, lw.w_up.data(), m, &mut up);
        let act: Vec<f32> = up.iter().map(|&u| tensor::silu(u)).collect();
        tensor::matmul_into(&act, s, m, lw.w_down.data(), d, &mut proj);
        for (xx, &p) in x.iter_mut().zip(&proj) {
            *xx += p;
        }
        acts.push(LayerActs {
            x_in,
            n1,
            r1,
            q,
            k,
            v,
            probs,
            attn,
            x_mid,
            n2,
            r2,
            up,
            act,
        });
    }
    (acts, x)
}

/// Backward of `y = x · r · g`; accumulates `dg` and adds into `dx`.
fn rms_backward(x: &[f32], r: f32, g: &[f32], dy: &[f32], dg: &mut [f32], dx: &mut [f32]) {
    let n = x.len() as f32;
    let mut dot_term = 0.0f32;
    for i in 0..x.len() {
        dg[i] += dy[i] * x[i] * r;
        dot_term += dy[i] * g[i] * x[i];
    }
    let c = r * r * r / n * dot_term;
    for i in 0..x.len() {
        dx[i] += r * g[i] * dy[i] - c * x[i];
    }
}

/// Log-softmax cross-entropy at one position; writes `softmax - onehot`
/// scaled by `weight` into `dlogits` and returns the loss.
fn cross_entropy(logits: &[f32], target: usize, weight: f32, dlogits: &mut [f32]) -> f32 {
    let max = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0f32;
    for (g, &z) in dlogits.iter_mut().zip(logits) {
        *g = libm::expf(z - max);
        sum += *g;
    }
    let lse = max + libm::logf(sum);
    for g in dlogits.iter_mut() {
        *g *= weight / sum;
    }
    dlogits[target] -= weight;
    lse - logits[target]
}

fn seq_loss_grad(model: &ToyModel, seq: &TrainSeq, weight: f32, grad: Option<&mut Weights>) -> f32 {
    let cfg = model.config();
    let (s, d, hd, m, vsz) = (seq.tokens.len(), cfg.hidden_dim, cfg.head_dim, cfg.mlp_dim, cfg.vocab_size);
    let w = model.weights();
    let (acts, x_out) = forward(model, &seq.tokens);

    let mut loss = 0.0f32;
    let mut dx = vec![0.0f32; s * d];
    let mut logits = vec![0.0f32; vsz];
    let mut dlogits = vec![0.0f32; vsz];
    let mut nf = vec![0.0f32; d];
    let mut dnf = vec![0.0f32; d];
    let mut grad = grad;
    for pos in seq.first_target - 1..s - 1 {
        let xr = &x_out[pos * d..(pos + 1) * d];
        let r = tensor::rms_normalize_into(xr, &w.final_norm, cfg.norm_eps, &mut nf);
        for (vi, z) in logits.iter_mut().enumerate() {
            *z = dot(w.output_projection.row(vi), &nf);
        }
        loss += weight * cross_entropy(&logits, seq.tokens[pos + 1] as usize, weight, &mut dlogits);
        if let Some(g) = grad.as_deref_mut() {
            tensor::matmul_at_b_acc(&dlogits, 1, vsz, &nf, d, g.output_projection.data_mut());
            tensor::matmul_into(&dlogits, 1, vsz, w.output_projection.data(), d, &mut dnf);
            rms_backward(xr, r, &w.final_norm, &dnf, &mut g.final_norm, &mut dx[pos * d..(pos + 1) * d]);
        }
    }
    let Some(g) = grad else {
        return loss;
    };

    let scale = 1.0 / libm::sqrtf(hd as f32);
    let mut dact = vec![0.0f32; s * m];
    let mut dn = vec![0.0f32; s * d];
    let mut dattn = vec![0.0f32; s * d];
    let mut dq = vec![0.0f32; s * d];
    let mut dk = vec![0.0f32; s * d];
    let mut dv = vec![0.0f32; s * d];
    let mut tmp = vec![0.0f32; s * d];
    let mut dp = vec![0.0f32; s];
    for (l, a) in acts.iter().enumerate().rev() {
        let lw = &w.layers[l];
        let lg = &mut g.layers[l];

        // MLP
        tensor::matmul_at_b_acc(&a.act, s, m, &dx, d, lg.w_down.data_mut());
        tensor::matmul_a_bt(&dx, s, d, lw.w_down.data(), m, &mut dact);
        for (du, &u) in dact.iter_mut().zip(&a.up) {
            let sig = 1.0 / (1.0 + libm::expf(-u));
            *du *= sig * (1.0 + u * (1.0 - sig));
        }
        tensor::matmul_at_b_acc(&a.n2, s, d, &dact, m, lg.w_up.data_mut());
        tensor::matmul_a_bt(&dact, s, m, lw.w_up.data(), d, &mut dn);
        for i in 0..s {
            rms_backward(
                &a.x_mid[i * d..(i + 1) * d],
                a.r2[i],
                &lw.mlp_norm,
                &dn[i * d..(i + 1) * d],
                &mut lg.mlp_norm,
                &mut dx[i * d..(i + 1) * d],
            );
        }

        // attention
        tensor::matmul_at_b_acc(&a.attn, s, d, &dx, d, lg.wo.data_mut());
        tensor::matmul_a_bt(&dx, s, d, lw.wo.data(), d, &mut dattn);
        dq.fill(0.0);
        dk.fill(0.0);
        dv.fill(0.0);
        for h in 0..cfg.num_heads {
            let hs = h * hd..(h + 1) * hd;
            for i in 0..s {
                let p = &a.probs[(h * s + i) * s..(h * s + i + 1) * s];
                let dai = &dattn[i * d + hs.start..i * d + hs.end];
                let mut psum = 0.0f32;
                for j in 0..=i {
                    dp[j] = dot(dai, &a.v[j * d + hs.start..j * d + hs.end]);
                    psum += p[j] * dp[j];
                    let dvj = &mut dv[j * d + hs.start..j * d + hs.end];
                    for (o, &x) in dvj.iter_mut().zip(dai) {
                        *o += p[j] * x;
                    }
                }
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - psum) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in hs.clone() {
                        dq[i * d + c] += ds * a.k[j * d + c];
                        dk[j * d + c] += ds * a.q[i * d + c];
                    }
                }
            }
        }
        for i in 0..s {
            model.rope().apply_transpose(&mut dq[i * d..(i + 1) * d], i);
            model.rope().apply_transpose(&mut dk[i * d..(i + 1) * d], i);
        }
        tensor::matmul_at_b_acc(&a.n1, s, d, &dq, d, lg.wq.data_mut());
        tensor::matmul_at_b_acc(&a.n1, s, d, &dk, d, lg.wk.data_mut());
        tensor::matmul_at_b_acc(&a.n1, s, d, &dv, d, lg.wv.data_mut());
        tensor::matmul_a_bt(&dq, s, d, lw.wq.data(), d, &mut dn);
        tensor::matmul_a_bt(&dk, s, d, lw.wk.data(), d, &mut tmp);
        for (a, &b) in dn.iter_mut().zip(&tmp) {
            *a += b;
        }
        tensor::matmul_a_bt(&dv, s, d, lw.wv.data(), d, &mut tmp);
        for (a, &b) in dn.iter_mut().zip(&tmp) {
            *a += b;
        }
        for i in 0..s {
            rms_backward(
                &a.x_in[i * d..(i + 1) * d],
                a.r1[i],
                &lw.attn_norm,
                &dn[i * d..(i + 1) * d],
                &mut lg.attn_norm,
                &mut dx[i * d..(i + 1) * d],
            );
        }
    }
    for (i, &t) in seq.tokens.iter().enumerate() {
        let row = g.token_embedding.row_mut(t as usize);
        for (o, &x) in row.iter_mut().zip(&dx[i * d..(i + 1) * d]) {
            *o += x;
        }
    }
    loss
}

/// Mean cross-entropy over every target token of `batch`.
pub fn batch_loss(model: &ToyModel, batch: &[TrainSeq]) -> Result<f32, SynthError> {
    let n = validate_batch(model, batch)?;
    let weight = 1.0 / n as f32;
    Ok(batch.iter().map(|s| seq_loss_grad(model, s, weight, None)).sum())
}

/// [`batch_loss`] and its gradient with respect to every weight.
pub fn loss_and_grad(model: &ToyModel, batch: &[TrainSeq]) -> Result<(f32, Weights), SynthError> {
    let n = validate_batch(model, batch)?;
    let weight = 1.0 / n as f32;
    let mut grad = Weights::zeros(model.config());
    let mut loss = 0.0f32;
    for s in batch {
        loss += seq_loss_grad(model, s, weight, Some(&mut grad));
    }
    Ok((loss, grad))
}

fn validate_batch(model: &ToyModel, batch: &[TrainSeq]) -> Result<usize, SynthError> {
    if batch.is_empty() {
        return Err(SynthError::EmptyDataset);
    }
    for s in batch {
        check_seq(model, s)?;
    }
    Ok(batch.iter().map(TrainSeq::targets).sum())
}

/// Trains on `data` (every example is used regardless of its split tag).
pub fn train_toy(
    mut model: ToyModel,
    data: &[Example],
    config: &TrainConfig,
) -> Result<(ToyModel, TrainReport), SynthError> {
    let report = train_toy_with(&mut model, data, config, &mut |_, _| {})?;
    Ok((model, report))
}

/// As [`train_toy`], reporting `(step, loss)` after every update.
pub fn train_toy_with(
    model: &mut ToyModel,
    data: &[Example],
    config: &TrainConfig,
    progress: &mut dyn FnMut(usize, f32),
) -> Result<TrainReport, SynthError> {
    if data.is_empty() {
        return Err(SynthError::EmptyDataset);
    }
    let seqs: Vec<TrainSeq> = data.iter().map(TrainSeq::from_example).collect();
    let probe = &seqs[..seqs.len().min(256)];
    let initial_loss = batch_loss(model, probe)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut m1 = Weights::zeros(model.config());
    let mut m2 = Weights::zeros(model.config());
    let mut losses = Vec::with_capacity(config.steps);
    let mut batch = Vec::with_capacity(config.batch_size);
    for step in 0..config.steps {
        batch.clear();
        for _ in 0..config.batch_size.max(1) {
            batch.push(seqs[rng.random_range(0..seqs.len())].clone());
        }
        let (loss, mut grad) = loss_and_grad(model, &batch)?;
        if !loss.is_finite() {
            return Err(SynthError::Diverged(step));
        }
        losses.push(loss);
        if config.clip_norm > 0.0 {
            let norm = libm::sqrtf(
                grad.tensors()
                    .iter()
                    .flat_map(|t| t.iter())
                    .map(|g| g * g)
                    .sum::<f32>(),
            );
            if !norm.is_finite() {
                return Err(SynthError::Diverged(step));
            }
            if norm > config.clip_norm {
                let c = config.clip_norm / norm;
                for t in grad.tensors_mut() {
                    for g in t.iter_mut() {
                        *g *= c;
                    }
                }
            }
        }
        let t = (step + 1) as i32;
        let warm = if config.warmup > 0 {
            ((step + 1) as f32 / config.warmup as f32).min(1.0)
        } else {
            1.0
        };
        let lr = config.lr * warm;
        let bc1 = 1.0 - libm::powf(config.beta1, t as f32);
        let bc2 = 1.0 - libm::powf(config.beta2, t as f32);
        let params = model.weights_mut().tensors_mut();
        for (((p, g), a), b) in params
            .into_iter()
            .zip(grad.tensors())
            .zip(m1.tensors_mut())
            .zip(m2.tensors_mut())
        {
            for i in 0..p.len() {
                a[i] = config.beta1 * a[i] + (1.0 - config.beta1) * g[i];
                b[i] = config.beta2 * b[i] + (1.0 - config.beta2) * g[i] * g[i];
                let mhat = a[i] / bc1;
                let vhat = b[i] / bc2;
                p[i] -= lr * mhat / (libm::sqrtf(vhat) + config.eps);
            }
        }
        progress(step, loss);
    }
    let final_loss = batch_loss(model, probe)?;
    if !final_loss.is_finite() {
        return Err(SynthError::Diverged(config.steps));
    }
    Ok(TrainReport {
        losses,
        initial_loss,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::synth::{gen_dataset, SceneSpec};

    #[test]
    fn zero_steps_is_identity() {
        let spec = SceneSpec {
            train_examples: 20,
            ..SceneSpec::default()
        };
        let data = gen_dataset(&spec, 4).unwrap();
        let cfg = ModelConfig::new(2, 8, 2, 16, spec.vocab().size(), 64).unwrap();
        let m = init_model(cfg, 1).unwrap();
        let before = m.checksum();
        let (m, report) = train_toy(
            m,
            &data.train,
            &TrainConfig {
                steps: 0,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(m.checksum(), before);
        assert!(report.losses.is_empty());
        assert_eq!(report.initial_loss, report.final_loss);
    }

    #[test]
    fn empty_dataset() {
        let cfg = ModelConfig::new(2, 8, 2, 16, 32, 64).unwrap();
        let m = init_model(cfg, 1).unwrap();
        assert!(matches!(
            train_toy(m, &[], &TrainConfig::default()),
            Err(SynthError::EmptyDataset)
        ));
    }
}
