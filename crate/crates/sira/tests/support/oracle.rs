//! Straightforward, cache-free reference forwards.
//!
//! Everything here is written from the model definition directly (naive
//! loops, explicit masks, `f64` where it matters) and shares no code with
//! the production kernels beyond reading the weights.

use sira_core::model::{ModelConfig, ToyModel, Weights};

/// Dense `f64` copy of every weight tensor.
#[derive(Clone)]
pub struct Params64 {
    pub config: ModelConfig,
    pub tensors: Vec<Vec<f64>>,
}

impl Params64 {
    pub fn from_model(m: &ToyModel) -> Self {
        Self {
            config: *m.config(),
            tensors: m
                .weights()
                .tensors()
                .iter()
                .map(|t| t.iter().map(|&x| x as f64).collect())
                .collect(),
        }
    }
}

fn rms(x: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + eps).sqrt();
    x.iter().zip(g).map(|(a, b)| a * r * b).collect()
}

/// `x (1×in) · W (in×out)`.
fn vecmat(x: &[f64], w: &[f64], out: usize) -> Vec<f64> {
    let mut y = vec![0.0; out];
    for (i, &xi) in x.iter().enumerate() {
        for j in 0..out {
            y[j] += xi * w[i * out + j];
        }
    }
    y
}

fn rope(x: &mut [f64], pos: usize, head_dim: usize) {
    for head in x.chunks_mut(head_dim) {
        for i in 0..head_dim / 2 {
            let theta = 10000f64.powf(-2.0 * i as f64 / head_dim as f64);
            let a = pos as f64 * theta;
            let (s, c) = a.sin_cos();
            let (x0, x1) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = x0 * c - x1 * s;
            head[2 * i + 1] = x0 * s + x1 * c;
        }
    }
}

/// Attention validity for one `(query, key)` pair and whether a query row
/// is blanked (emits a zero attention output).
pub trait MaskRule {
    fn valid(&self, q: usize, k: usize) -> bool;
    fn blanked(&self, q: usize) -> bool;
}

pub struct Causal;

impl MaskRule for Causal {
    fn valid(&self, q: usize, k: usize) -> bool {
        k <= q
    }
    fn blanked(&self, _: usize) -> bool {
        false
    }
}

/// Causal, with image positions neither querying nor being queried.
pub struct Counterfactual<'a>(pub &'a [usize]);

impl MaskRule for Counterfactual<'_> {
    fn valid(&self, q: usize, k: usize) -> bool {
        k <= q && !self.0.contains(&q) && !self.0.contains(&k)
    }
    fn blanked(&self, q: usize) -> bool {
        self.0.contains(&q)
    }
}

/// Runs layers `range` over `x` (one row per position `0..n`) in `f64`.
pub fn layers(p: &Params64, range: std::ops::Range<usize>, mut x: Vec<Vec<f64>>, mask: &dyn MaskRule) -> Vec<Vec<f64>> {
    let c = &p.config;
    let (d, hd, m) = (c.hidden_dim, c.head_dim, c.mlp_dim);
    let eps = c.norm_eps as f64;
    let n = x.len();
    for l in range {
        let t = &p.tensors[1 + 8 * l..1 + 8 * (l + 1)];
        let (g1, wq, wk, wv, wo, g2, wu, wd) = (&t[0], &t[1], &t[2], &t[3], &t[4], &t[5], &t[6], &t[7]);
        let normed: Vec<Vec<f64>> = x.iter().map(|r| rms(r, g1, eps)).collect();
        let mut q: Vec<Vec<f64>> = normed.iter().map(|r| vecmat(r, wq, d)).collect();
        let mut k: Vec<Vec<f64>> = normed.iter().map(|r| vecmat(r, wk, d)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|r| vecmat(r, wv, d)).collect();
        for i in 0..n {
            rope(&mut q[i], i, hd);
            rope(&mut k[i], i, hd);
        }
        for i in 0..n {
            let mut attn = vec![0.0; d];
            let keys: Vec<usize> = (0..n).filter(|&j| mask.valid(i, j)).collect();
            if keys.is_empty() {
                assert!(mask.blanked(i), "text row {i} without keys");
            } else {
                for h in 0..c.num_heads {
                    let sl = h * hd..(h + 1) * hd;
                    let scores: Vec<f64> = keys
                        .iter()
                        .map(|&j| {
                            q[i][sl.clone()].iter().zip(&k[j][sl.clone()]).map(|(a, b)| a * b).sum::<f64>()
                                / (hd as f64).sqrt()
                        })
                        .collect();
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for (w, &j) in e.iter().zip(&keys) {
                        for cc in sl.clone() {
                            attn[cc] += w / z * v[j][cc];
                        }
                    }
                }
            }
            let o = vecmat(&attn, wo, d);
            for cc in 0..d {
                x[i][cc] += o[cc];
            }
            let n2 = rms(&x[i], g2, eps);
            let u: Vec<f64> = vecmat(&n2, wu, m).into_iter().map(|u| u / (1.0 + (-u).exp())).collect();
            let dn = vecmat(&u, wd, d);
            for cc in 0..d {
                x[i][cc] += dn[cc];
            }
        }
    }
    x
}

pub fn embed(p: &Params64, tokens: &[u32]) -> Vec<Vec<f64>> {
    let d = p.config.hidden_dim;
    tokens
        .iter()
        .map(|&t| p.tensors[0][t as usize * d..(t as usize + 1) * d].to_vec())
        .collect()
}

pub fn logits(p: &Params64, h: &[f64]) -> Vec<f64> {
    let c = &p.config;
    let nt = p.tensors.len();
    let normed = rms(h, &p.tensors[nt - 2], c.norm_eps as f64);
    let wout = &p.tensors[nt - 1];
    (0..c.vocab_size)
        .map(|v| {
            (0..c.hidden_dim)
                .map(|j| wout[v * c.hidden_dim + j] * normed[j])
                .sum()
        })
        .collect()
}

/// Last-position logits of a full-sequence forward under `mask`.
pub fn last_logits(p: &Params64, tokens: &[u32], mask: &dyn MaskRule) -> Vec<f64> {
    let x = layers(p, 0..p.config.num_layers, embed(p, tokens), mask);
    logits(p, x.last().unwrap())
}

/// Shared-prefix forward: layers `0..b` causal, `b..L` under `post`.
pub fn branch_last_logits(p: &Params64, tokens: &[u32], b: usize, post: &dyn MaskRule) -> Vec<f64> {
    let x = layers(p, 0..b, embed(p, tokens), &Causal);
    let x = layers(p, b..p.config.num_layers, x, post);
    logits(p, x.last().unwrap())
}

/// Greedy decode by full recompute at every step.
pub fn greedy_recompute(p: &Params64, prompt: &[u32], eos: u32, max_tokens: usize) -> Vec<u32> {
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_tokens {
        let z = last_logits(p, &seq, &Causal);
        let mut best = 0;
        for (i, &v) in z.iter().enumerate() {
            if v > z[best] {
                best = i;
            }
        }
        out.push(best as u32);
        seq.push(best as u32);
        if best as u32 == eos {
            break;
        }
    }
    out
}

/// Mean next-token cross-entropy over continuation positions.
pub fn loss(p: &Params64, seqs: &[(Vec<u32>, usize)]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (tokens, first) in seqs {
        let x = layers(p, 0..p.config.num_layers, embed(p, tokens), &Causal);
        for pos in first - 1..tokens.len() - 1 {
            let z = logits(p, &x[pos]);
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - z[tokens[pos + 1] as usize];
            count += 1;
        }
    }
    total / count as f64
}

/// Flattened (tensor, index) addressing over a weight set.
pub fn locate(sizes: &[usize], flat: usize) -> (usize, usize) {
    let mut rest = flat;
    for (t, &n) in sizes.iter().enumerate() {
        if rest < n {
            return (t, rest);
        }
        rest -= n;
    }
    panic!("index {flat} out of range");
}

pub fn grad_at(g: &Weights, tensor: usize, index: usize) -> f32 {
    g.tensors()[tensor][index]
}
