//! Toy decoder-only multimodal transformer.
//!
//! Pre-norm blocks: `x += Attn(RMSNorm(x)) ; x += MLP(RMSNorm(x))`, rotary
//! position encoding on queries and keys, SiLU MLP, final RMSNorm and an
//! untied output projection. Image tokens are ordinary vocabulary entries.
//!
//! Projection weights are stored input-major (`in × out`) so a block of
//! hidden rows is transformed with a plain `rows × W` product. The output
//! projection is stored `vocab × hidden`.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ModelError, TensorError};
use crate::masking::{AdditiveMask, TokenId};
use crate::tensor::{self, Matrix, MASK_SENTINEL};

const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub mlp_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub norm_eps: f32,
}

impl ModelConfig {
    /// `head_dim` is derived as `hidden_dim / num_heads`.
    pub fn new(
        num_layers: usize,
        hidden_dim: usize,
        num_heads: usize,
        mlp_dim: usize,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> Result<Self, ModelError> {
        if num_heads == 0 || !hidden_dim.is_multiple_of(num_heads) {
            return Err(ModelError::Config("hidden_dim must be divisible by num_heads"));
        }
        let cfg = Self {
            num_layers,
            hidden_dim,
            num_heads,
            head_dim: hidden_dim / num_heads,
            mlp_dim,
            vocab_size,
            max_seq_len,
            norm_eps: 1e-5,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The depth-28 configuration used for structural tests; a mid split
    /// (K = 14) gives a 1.5x layer-evaluation ratio.
    pub fn toy_default() -> Self {
        Self::new(28, 64, 4, 256, 512, 256).expect("valid default")
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_layers < 2 {
            return Err(ModelError::Config("num_layers must be >= 2"));
        }
        if self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(ModelError::Config("hidden_dim must be divisible by num_heads"));
        }
        if self.head_dim * self.num_heads != self.hidden_dim {
            return Err(ModelError::Config("head_dim * num_heads must equal hidden_dim"));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(ModelError::Config("head_dim must be even for rotary encoding"));
        }
        if self.vocab_size < 4 {
            return Err(ModelError::Config("vocab_size must be >= 4"));
        }
        if self.mlp_dim == 0 || self.max_seq_len == 0 {
            return Err(ModelError::Config("mlp_dim and max_seq_len must be > 0"));
        }
        if !(self.norm_eps.is_finite() && self.norm_eps >= 0.0) {
            return Err(ModelError::Config("norm_eps must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub mlp_norm: Vec<f32>,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

impl LayerWeights {
    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.hidden_dim;
        Self {
            attn_norm: vec![0.0; d],
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            mlp_norm: vec![0.0; d],
            w_up: Matrix::zeros(d, cfg.mlp_dim),
            w_down: Matrix::zeros(cfg.mlp_dim, d),
        }
    }
}

/// Every trainable tensor, in file declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub token_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    pub output_projection: Matrix,
}

impl Weights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            token_embedding: Matrix::zeros(cfg.vocab_size, cfg.hidden_dim),
            layers: (0..cfg.num_layers).map(|_| LayerWeights::zeros(cfg)).collect(),
            final_norm: vec![0.0; cfg.hidden_dim],
            output_projection: Matrix::zeros(cfg.vocab_size, cfg.hidden_dim),
        }
    }

    /// Flat views of every tensor in declaration order.
    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![self.token_embedding.data()];
        for l in &self.layers {
            out.push(&l.attn_norm);
            out.push(l.wq.data());
            out.push(l.wk.data());
            out.push(l.wv.data());
            out.push(l.wo.data());
            out.push(&l.mlp_norm);
            out.push(l.w_up.data());
            out.push(l.w_down.data());
        }
        out.push(&self.final_norm);
        out.push(self.output_projection.data());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = vec![self.token_embedding.data_mut()];
        for l in &mut self.layers {
            out.push(&mut l.attn_norm);
            out.push(l.wq.data_mut());
            out.push(l.wk.data_mut());
            out.push(l.wv.data_mut());
            out.push(l.wo.data_mut());
            out.push(&mut l.mlp_norm);
            out.push(l.w_up.data_mut());
            out.push(l.w_down.data_mut());
        }
        out.push(&mut self.final_norm);
        out.push(self.output_projection.data_mut());
        out
    }

    /// Element counts of [`Self::tensors`] for a config.
    pub fn tensor_sizes(cfg: &ModelConfig) -> Vec<usize> {
        let d = cfg.hidden_dim;
        let mut out = vec![cfg.vocab_size * d];
        for _ in 0..cfg.num_layers {
            out.extend_from_slice(&[d, d * d, d * d, d * d, d * d, d, d * cfg.mlp_dim, cfg.mlp_dim * d]);
        }
        out.push(d);
        out.push(cfg.vocab_size * d);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Rebuilds weights from tensors in declaration order.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Vec<f32>>) -> Result<Self, ModelError> {
        let sizes = Self::tensor_sizes(cfg);
        if tensors.len() != sizes.len() {
            return Err(ModelError::Shape {
                what: "tensor count",
                expected: sizes.len(),
                actual: tensors.len(),
            });
        }
        let mut w = Self::zeros(cfg);
        for ((dst, src), &n) in w.tensors_mut().into_iter().zip(&tensors).zip(&sizes) {
            if src.len() != n {
                return Err(ModelError::Shape {
                    what: "tensor size",
                    expected: n,
                    actual: src.len(),
                });
            }
            dst.copy_from_slice(src);
        }
        Ok(w)
    }

    fn check_shapes(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let sizes = Self::tensor_sizes(cfg);
        let have = self.tensors();
        if have.len() != sizes.len() {
            return Err(ModelError::Shape {
                what: "layer count",
                expected: sizes.len(),
                actual: have.len(),
            });
        }
        for (t, &n) in have.iter().zip(&sizes) {
            if t.len() != n {
                return Err(ModelError::Shape {
                    what: "tensor size",
                    expected: n,
                    actual: t.len(),
                });
            }
        }
        Ok(())
    }
}

/// Precomputed rotary cos/sin per (position, frequency).
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct RopeTable {
    half: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl RopeTable {
    fn new(head_dim: usize, max_seq_len: usize) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_seq_len * half);
        let mut sin = Vec::with_capacity(max_seq_len * half);
        for pos in 0..max_seq_len {
            for i in 0..half {
                let theta = libm::pow(ROPE_BASE, -2.0 * i as f64 / head_dim as f64);
                let angle = pos as f64 * theta;
                cos.push(libm::cos(angle) as f32);
                sin.push(libm::sin(angle) as f32);
            }
        }
        Self { half, cos, sin }
    }

    /// Rotates every head of `row` (length `heads * head_dim`) in place.
    #[inline]
    pub(crate) fn apply(&self, row: &mut [f32], pos: usize) {
        let c = &self.cos[pos * self.half..(pos + 1) * self.half];
        let s = &self.sin[pos * self.half..(pos + 1) * self.half];
        for head in row.chunks_exact_mut(self.half * 2) {
            for i in 0..self.half {
                let x0 = head[2 * i];
                let x1 = head[2 * i + 1];
                head[2 * i] = x0 * c[i] - x1 * s[i];
                head[2 * i + 1] = x0 * s[i] + x1 * c[i];
            }
        }
    }

    /// Inverse rotation, used when back-propagating through [`Self::apply`].
    #[inline]
    pub(crate) fn apply_transpose(&self, row: &mut [f32], pos: usize) {
        let c = &self.cos[pos * self.half..(pos + 1) * self.half];
        let s = &self.sin[pos * self.half..(pos + 1) * self.half];
        for head in row.chunks_exact_mut(self.half * 2) {
            for i in 0..self.half {
                let g0 = head[2 * i];
                let g1 = head[2 * i + 1];
                head[2 * i] = g0 * c[i] + g1 * s[i];
                head[2 * i + 1] = -g0 * s[i] + g1 * c[i];
            }
        }
    }
}

/// Stored keys and values for a contiguous range of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    layers: Range<usize>,
    width: usize,
    len: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
}

impl LayerCache {
    pub fn new(layers: Range<usize>, hidden_dim: usize) -> Self {
        let n = layers.len();
        Self {
            layers,
            width: hidden_dim,
            len: 0,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
        }
    }

    pub fn layers(&self) -> Range<usize> {
        self.layers.clone()
    }

    /// Number of cached positions (identical for every layer).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn keys(&self, layer: usize) -> &[f32] {
        &self.keys[layer - self.layers.start]
    }

    pub fn values(&self, layer: usize) -> &[f32] {
        &self.values[layer - self.layers.start]
    }

    /// Overwrites one cached row in every layer with zeros.
    pub fn zero_position(&mut self, position: usize) {
        let w = self.width;
        for buf in self.keys.iter_mut().chain(self.values.iter_mut()) {
            buf[position * w..(position + 1) * w].fill(0.0);
        }
    }

    fn check_consistent(&self) -> bool {
        self.keys
            .iter()
            .chain(self.values.iter())
            .all(|b| b.len() == self.len * self.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ModelConfig,
    weights: Weights,
    rope: RopeTable,
}

/// Called with `(layer, hidden rows after that layer)`.
pub type LayerTap<'a> = &'a mut dyn FnMut(usize, &Matrix);

impl ToyModel {
    pub fn from_weights(config: ModelConfig, weights: Weights) -> Result<Self, ModelError> {
        config.validate()?;
        weights.check_shapes(&config)?;
        Ok(Self {
            rope: RopeTable::new(config.head_dim, config.max_seq_len),
            config,
            weights,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn into_weights(self) -> Weights {
        self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut Weights {
        &mut self.weights
    }

    pub(crate) fn rope(&self) -> &RopeTable {
        &self.rope
    }

    /// FNV-1a over the config and every weight bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |word: u32| {
            for b in word.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        let c = &self.config;
        for v in [
            c.num_layers,
            c.hidden_dim,
            c.num_heads,
            c.head_dim,
            c.mlp_dim,
            c.vocab_size,
            c.max_seq_len,
        ] {
            eat(v as u32);
        }
        eat(c.norm_eps.to_bits());
        for t in self.weights.tensors() {
            for &x in t {
                eat(x.to_bits());
            }
        }
        h
    }

    /// Embedding rows for a token sequence.
    pub fn embed(&self, tokens: &[TokenId]) -> Result<Matrix, ModelError> {
        let d = self.config.hidden_dim;
        let mut out = Matrix::zeros(tokens.len(), d);
        for (i, &t) in tokens.iter().enumerate() {
            if t as usize >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    token: t,
                    vocab: self.config.vocab_size,
                });
            }
            out.row_mut(i)
                .copy_from_slice(self.weights.token_embedding.row(t as usize));
        }
        Ok(out)
    }

    /// Runs layers `layers` over `hidden` (one row per new position),
    /// appending each row's key/value to `cache`.
    ///
    /// `mask` has one row per new position and `cache.len() + hidden.rows()`
    /// key columns. A fully blocked row is allowed only when the mask marks
    /// it as blanked; its attention output is zero.
    pub fn forward_layers(
        &self,
        layers: Range<usize>,
        hidden: Matrix,
        cache: &mut LayerCache,
        mask: &AdditiveMask,
        positions: &[usize],
    ) -> Result<Matrix, ModelError> {
        self.forward_layers_tapped(layers, hidden, cache, mask, positions, &mut |_, _| {})
    }

    pub fn forward_layers_tapped(
        &self,
        layers: Range<usize>,
        mut hidden: Matrix,
        cache: &mut LayerCache,
        mask: &AdditiveMask,
        positions: &[usize],
        tap: LayerTap<'_>,
    ) -> Result<Matrix, ModelError> {
        if layers.is_empty() {
            return Ok(hidden);
        }
        let cfg = &self.config;
        if layers.end > cfg.num_layers || cache.layers != layers {
            return Err(ModelError::LayerRange {
                start: layers.start,
                end: layers.end,
            });
        }
        if !cache.check_consistent() {
            return Err(ModelError::Shape {
                what: "cache rows",
                expected: cache.len * cache.width,
                actual: cache.keys.first().map_or(0, |k| k.len()),
            });
        }
        let n = hidden.rows();
        if hidden.cols() != cfg.hidden_dim {
            return Err(ModelError::Shape {
                what: "hidden width",
                expected: cfg.hidden_dim,
                actual: hidden.cols(),
            });
        }
        if positions.len() != n {
            return Err(ModelError::Shape {
                what: "positions",
                expected: n,
                actual: positions.len(),
            });
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= cfg.max_seq_len) {
            return Err(ModelError::PositionOutOfRange {
                position: p,
                max: cfg.max_seq_len,
            });
        }
        if mask.query_count() != n || mask.key_count() != cache.len + n {
            return Err(ModelError::Shape {
                what: "mask keys",
                expected: cache.len + n,
                actual: mask.key_count(),
            });
        }

        let d = cfg.hidden_dim;
        let hd = cfg.head_dim;
        let total = cache.len + n;
        let scale = 1.0 / libm::sqrtf(hd as f32);
        let mut normed = vec![0.0f32; n * d];
        let mut q = vec![0.0f32; n * d];
        let mut k = vec![0.0f32; n * d];
        let mut v = vec![0.0f32; n * d];
        let mut attn = vec![0.0f32; n * d];
        let mut proj = vec![0.0f32; n * d];
        let mut up = vec![0.0f32; n * cfg.mlp_dim];
        let mut scores = vec![0.0f32; total];
        let mut probs = vec![0.0f32; total];

        for layer in layers.clone() {
            let w = &self.weights.layers[layer];
            let slot = layer - cache.layers.start;
            for i in 0..n {
                tensor::rms_normalize_into(
                    hidden.row(i),
                    &w.attn_norm,
                    cfg.norm_eps,
                    &mut normed[i * d..(i + 1) * d],
                );
            }
            tensor::matmul_into(&normed, n, d, w.wq.data(), d, &mut q);
            tensor::matmul_into(&normed, n, d, w.wk.data(), d, &mut k);
            tensor::matmul_into(&normed, n, d, w.wv.data(), d, &mut v);
            for (i, &pos) in positions.iter().enumerate() {
                self.rope.apply(&mut q[i * d..(i + 1) * d], pos);
                self.rope.apply(&mut k[i * d..(i + 1) * d], pos);
            }
            cache.keys[slot].extend_from_slice(&k);
            cache.values[slot].extend_from_slice(&v);
            let keys = &cache.keys[slot];
            let values = &cache.values[slot];

            attn.fill(0.0);
            for i in 0..n {
                let mrow = mask.row(i);
                if mrow.iter().all(|&m| m <= MASK_SENTINEL) {
                    if mask.is_blanked(i) {
                        continue;
                    }
                    return Err(ModelError::DegenerateRow(positions[i]));
                }
                for h in 0..cfg.num_heads {
                    let qh = &q[i * d + h * hd..i * d + (h + 1) * hd];
                    for j in 0..total {
                        scores[j] = tensor::dot(qh, &keys[j * d + h * hd..j * d + (h + 1) * hd]) * scale;
                    }
                    tensor::softmax_row_into(&scores, mrow, &mut probs)
                        .map_err(|e| match e {
                            TensorError::DegenerateRow => ModelError::DegenerateRow(positions[i]),
                            other => ModelError::Tensor(other),
                        })?;
                    let out = &mut attn[i * d + h * hd..i * d + (h + 1) * hd];
                    for (j, &p) in probs.iter().enumerate() {
                        let vj = &values[j * d + h * hd..j * d + (h + 1) * hd];
                        for (o, &x) in out.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
            tensor::matmul_into(&attn, n, d, w.wo.data(), d, &mut proj);
            for (x, &p) in hidden.data_mut().iter_mut().zip(&proj) {
                *x += p;
            }

            for i in 0..n {
                tensor::rms_normalize_into(
                    hidden.row(i),
                    &w.mlp_norm,
                    cfg.norm_eps,
                    &mut normed[i * d..(i + 1) * d],
                );
            }
            tensor::matmul_into(&normed, n, d, w.w_up.data(), cfg.mlp_dim, &mut up);
            for u in up.iter_mut() {
                *u = tensor::silu(*u);
            }
            tensor::matmul_into(&up, n, cfg.mlp_dim, w.w_down.data(), d, &mut proj);
            for (x, &p) in hidden.data_mut().iter_mut().zip(&proj) {
                *x += p;
            }
            tap(layer, &hidden);
        }
        cache.len += n;
        Ok(hidden)
    }

    /// `W_out · RMSNorm(hidden_last)`.
    pub fn project_logits(&self, hidden_last: &[f32]) -> Result<Vec<f32>, ModelError> {
        let d = self.config.hidden_dim;
        if hidden_last.len() != d {
            return Err(ModelError::Shape {
                what: "hidden_last",
                expected: d,
                actual: hidden_last.len(),
            });
        }
        let normed = tensor::rms_normalize(hidden_last, &self.weights.final_norm, self.config.norm_eps)?;
        let w = &self.weights.output_projection;
        Ok((0..self.config.vocab_size)
            .map(|v| tensor::dot(w.row(v), &normed))
            .collect())
    }
}

/// Seeded Gaussian initialisation: every matrix entry is `N(0,1) / sqrt(d)`,
/// norm gains start at one.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<ToyModel, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / libm::sqrtf(config.hidden_dim as f32);
    let mut w = Weights::zeros(&config);
    let mut fill = |m: &mut [f32]| {
        for x in m.iter_mut() {
            let z: f32 = StandardNormal.sample(&mut rng);
            *x = z * scale;
        }
    };
    fill(w.token_embedding.data_mut());
    for l in &mut w.layers {
        l.attn_norm.fill(1.0);
        l.mlp_norm.fill(1.0);
        fill(l.wq.data_mut());
        fill(l.wk.data_mut());
        fill(l.wv.data_mut());
        fill(l.wo.data_mut());
        fill(l.w_up.data_mut());
        fill(l.w_down.data_mut());
    }
    w.final_norm.fill(1.0);
    fill(w.output_projection.data_mut());
    ToyModel::from_weights(config, w)
}

/// Logits for the last row of a full, cache-free forward under `mask`.
pub fn reference_forward(
    model: &ToyModel,
    tokens: &[TokenId],
    mask: &AdditiveMask,
) -> Result<Vec<f32>, ModelError> {
    let l = model.config().num_layers;
    let hidden = model.embed(tokens)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let mut cache = LayerCache::new(0..l, model.config().hidden_dim);
    let out = model.forward_layers(0..l, hidden, &mut cache, mask, &positions)?;
    model.project_logits(out.row(out.rows() - 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{build_causal_mask, rows_to_additive, to_additive};

    fn small() -> ModelConfig {
        ModelConfig::new(4, 8, 2, 16, 16, 32).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(small(), 7).unwrap();
        let b = init_model(small(), 7).unwrap();
        let c = init_model(small(), 8).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn config_divisibility() {
        assert!(matches!(
            ModelConfig::new(4, 7, 2, 16, 16, 32),
            Err(ModelError::Config(_))
        ));
        assert!(ModelConfig::new(1, 8, 2, 16, 16, 32).is_err());
        assert!(ModelConfig::new(2, 8, 2, 16, 3, 32).is_err());
    }

    #[test]
    fn empty_range_is_identity() {
        let m = init_model(small(), 1).unwrap();
        let h = m.embed(&[1, 2, 3]).unwrap();
        let mut cache = LayerCache::new(2..2, 8);
        let mask = to_additive(&build_causal_mask(3));
        let out = m.forward_layers(2..2, h.clone(), &mut cache, &mask, &[0, 1, 2]).unwrap();
        assert_eq!(out, h);
        assert!(cache.is_empty());
    }

    #[test]
    fn incremental_matches_recompute() {
        let m = init_model(small(), 3).unwrap();
        let toks = [3u32, 1, 4, 1, 5, 9, 2];
        let full_logits = reference_forward(&m, &toks, &to_additive(&build_causal_mask(7))).unwrap();

        let mut cache = LayerCache::new(0..4, 8);
        let prefix = m.embed(&toks[..6]).unwrap();
        m.forward_layers(0..4, prefix, &mut cache, &to_additive(&build_causal_mask(6)), &[0, 1, 2, 3, 4, 5])
            .unwrap();
        let mask7 = build_causal_mask(7);
        let last = m
            .forward_layers(0..4, m.embed(&toks[6..]).unwrap(), &mut cache, &rows_to_additive(&mask7, 6..7), &[6])
            .unwrap();
        let inc_logits = m.project_logits(last.row(0)).unwrap();
        for (a, b) in full_logits.iter().zip(&inc_logits) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn mask_length_mismatch() {
        let m = init_model(small(), 3).unwrap();
        let mut cache = LayerCache::new(0..4, 8);
        let err = m
            .forward_layers(0..4, m.embed(&[1, 2]).unwrap(), &mut cache, &to_additive(&build_causal_mask(3)), &[0, 1])
            .unwrap_err();
        assert!(matches!(err, ModelError::Shape { .. }));
    }

    #[test]
    fn zero_gain_gives_zero_logits() {
        let mut w = init_model(small(), 2).unwrap().into_weights();
        w.final_norm.fill(0.0);
        let m = ToyModel::from_weights(small(), w).unwrap();
        assert!(m.project_logits(&[0.0; 8]).unwrap().iter().all(|&z| z == 0.0));
        assert!(m.project_logits(&[1.0; 8]).unwrap().iter().all(|&z| z == 0.0));
    }

    #[test]
    fn identity_projection_returns_normalised_hidden() {
        let cfg = ModelConfig::new(2, 8, 2, 8, 8, 8).unwrap();
        let mut w = init_model(cfg, 2).unwrap().into_weights();
        w.output_projection = Matrix::identity(8);
        let m = ToyModel::from_weights(cfg, w).unwrap();
        let h = [0.5, -1.0, 2.0, 0.0, 3.0, -0.25, 1.0, 1.5];
        let expected = tensor::rms_normalize(&h, &[1.0; 8], cfg.norm_eps).unwrap();
        assert_eq!(m.project_logits(&h).unwrap(), expected);
    }

    #[test]
    fn projection_composes_kernels() {
        let m = init_model(small(), 11).unwrap();
        let h: Vec<f32> = (0..8).map(|i| (i as f32 * 0.37).sin()).collect();
        let normed = tensor::rms_normalize(&h, &m.weights().final_norm, 1e-5).unwrap();
        let col = Matrix::from_vec(8, 1, normed).unwrap();
        let expected = tensor::matmul(&m.weights().output_projection, &col).unwrap();
        assert_eq!(m.project_logits(&h).unwrap(), expected.into_vec());
        assert!(m.project_logits(&[0.0; 3]).is_err());
    }
}
