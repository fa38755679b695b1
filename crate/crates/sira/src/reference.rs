//! Double-precision, cache-free forward over a model's weights, used by
//! the acceptance runner as a finite-difference reference.

use sira_core::model::{ModelConfig, ToyModel};
use sira_core::TokenId;

#[derive(Clone)]
pub struct Reference64 {
    pub config: ModelConfig,
    /// Weight tensors in declaration order, widened to `f64`.
    pub tensors: Vec<Vec<f64>>,
}

impl Reference64 {
    pub fn new(model: &ToyModel) -> Self {
        Self {
            config: *model.config(),
            tensors: model
                .weights()
                .tensors()
                .iter()
                .map(|t| t.iter().map(|&v| v as f64).collect())
                .collect(),
        }
    }

    fn norm(&self, x: &[f64], gain: &[f64]) -> Vec<f64> {
        let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let inv = 1.0 / (ms + self.config.norm_eps as f64).sqrt();
        x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
    }

    fn project(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
        let mut y = vec![0.0; cols];
        for (xi, row) in x.iter().zip(w.chunks(cols)) {
            for (yj, wij) in y.iter_mut().zip(row) {
                *yj += xi * wij;
            }
        }
        y
    }

    fn rotate(&self, x: &mut [f64], pos: usize) {
        let hd = self.config.head_dim;
        for head in x.chunks_mut(hd) {
            for i in 0..hd / 2 {
                let angle = pos as f64 * 10000f64.powf(-2.0 * i as f64 / hd as f64);
                let (s, c) = angle.sin_cos();
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }

    /// Causal forward; returns the logits at every position.
    pub fn logits(&self, tokens: &[TokenId]) -> Vec<Vec<f64>> {
        let c = &self.config;
        let (d, hd) = (c.hidden_dim, c.head_dim);
        let mut x: Vec<Vec<f64>> = tokens
            .iter()
            .map(|&t| self.tensors[0][t as usize * d..(t as usize + 1) * d].to_vec())
            .collect();
        for l in 0..c.num_layers {
            let w = &self.tensors[1 + 8 * l..9 + 8 * l];
            let h: Vec<Vec<f64>> = x.iter().map(|r| self.norm(r, &w[0])).collect();
            let mut q: Vec<Vec<f64>> = h.iter().map(|r| Self::project(r, &w[1], d)).collect();
            let mut k: Vec<Vec<f64>> = h.iter().map(|r| Self::project(r, &w[2], d)).collect();
            let v: Vec<Vec<f64>> = h.iter().map(|r| Self::project(r, &w[3], d)).collect();
            for p in 0..x.len() {
                self.rotate(&mut q[p], p);
                self.rotate(&mut k[p], p);
            }
            for p in 0..x.len() {
                let mut attn = vec![0.0; d];
                for head in 0..c.num_heads {
                    let r = head * hd..(head + 1) * hd;
                    let s: Vec<f64> = (0..=p)
                        .map(|j| q[p][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt())
                        .collect();
                    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for (j, ej) in e.iter().enumerate() {
                        for i in r.clone() {
                            attn[i] += ej / z * v[j][i];
                        }
                    }
                }
                let o = Self::project(&attn, &w[4], d);
                x[p].iter_mut().zip(&o).for_each(|(a, b)| *a += b);
                let n = self.norm(&x[p], &w[5]);
                let u: Vec<f64> = Self::project(&n, &w[6], c.mlp_dim)
                    .into_iter()
                    .map(|u| u / (1.0 + (-u).exp()))
                    .collect();
                let dn = Self::project(&u, &w[7], d);
                x[p].iter_mut().zip(&dn).for_each(|(a, b)| *a += b);
            }
        }
        let nt = self.tensors.len();
        x.iter()
            .map(|r| {
                let n = self.norm(r, &self.tensors[nt - 2]);
                self.tensors[nt - 1].chunks(d).map(|row| row.iter().zip(&n).map(|(a, b)| a * b).sum()).collect()
            })
            .collect()
    }

    /// Mean next-token cross-entropy over each sequence's targets, which
    /// start at index `first_target`.
    pub fn loss(&self, seqs: &[(Vec<TokenId>, usize)]) -> f64 {
        let (mut total, mut n) = (0.0, 0usize);
        for (tokens, first) in seqs {
            let z = self.logits(tokens);
            for p in first - 1..tokens.len() - 1 {
                let m = z[p].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + z[p].iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                total += lse - z[p][tokens[p + 1] as usize];
                n += 1;
            }
        }
        total / n as f64
    }
}
