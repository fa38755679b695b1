//! Single-pass internal contrastive decoding.
//!
//! Layers `0..b` run once per position and are shared; the boundary state
//! feeds two post-boundary continuations over layers `b..L`, one under the
//! causal mask and one under the counterfactual mask. Every step therefore
//! costs `L + K` layer evaluations against `L` for plain greedy decoding.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{EngineError, TensorError};
use crate::masking::{
    build_causal_mask, build_cf_mask, rows_to_additive, to_additive, MaskVariant, PromptLayout,
    TokenId, ValidityMask,
};
use crate::model::{LayerCache, ToyModel};
use crate::tensor::Matrix;

/// Post-boundary depth `K`; the boundary is `b = L - K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryConfig {
    pub k: usize,
}

impl BoundaryConfig {
    pub fn new(k: usize) -> Self {
        Self { k }
    }

    /// `K = L / 2`.
    pub fn mid(num_layers: usize) -> Self {
        Self { k: num_layers / 2 }
    }

    pub fn boundary(&self, num_layers: usize) -> usize {
        num_layers - self.k
    }

    pub fn validate(&self, num_layers: usize) -> Result<(), EngineError> {
        if self.k > num_layers {
            return Err(EngineError::InvalidBoundary {
                k: self.k,
                layers: num_layers,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastConfig {
    pub alpha: f32,
    pub max_tokens: usize,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            max_tokens: 32,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(EngineError::InvalidAlpha(self.alpha));
        }
        if self.max_tokens == 0 {
            return Err(EngineError::InvalidMaxTokens);
        }
        Ok(())
    }
}

/// Shared prefix cache plus one post-boundary cache per branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchCaches {
    pub shared_prefix: LayerCache,
    pub full_post: LayerCache,
    pub cf_post: LayerCache,
}

impl BranchCaches {
    fn new(num_layers: usize, b: usize, hidden_dim: usize) -> Self {
        Self {
            shared_prefix: LayerCache::new(0..b, hidden_dim),
            full_post: LayerCache::new(b..num_layers, hidden_dim),
            cf_post: LayerCache::new(b..num_layers, hidden_dim),
        }
    }
}

/// Last-position hidden states of the most recent forward, per layer.
///
/// Layers below the boundary are stored once and served to both branches.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchStates {
    boundary: usize,
    shared: Vec<Vec<f32>>,
    full_post: Vec<Vec<f32>>,
    cf_post: Vec<Vec<f32>>,
}

impl BranchStates {
    pub fn boundary(&self) -> usize {
        self.boundary
    }

    pub fn num_layers(&self) -> usize {
        self.shared.len() + self.full_post.len()
    }

    pub fn full(&self, layer: usize) -> &[f32] {
        match layer.checked_sub(self.boundary) {
            None => &self.shared[layer],
            Some(i) => &self.full_post[i],
        }
    }

    pub fn cf(&self, layer: usize) -> &[f32] {
        match layer.checked_sub(self.boundary) {
            None => &self.shared[layer],
            Some(i) => &self.cf_post[i],
        }
    }

    pub fn full_stack(&self) -> Vec<&[f32]> {
        (0..self.num_layers()).map(|l| self.full(l)).collect()
    }

    pub fn cf_stack(&self) -> Vec<&[f32]> {
        (0..self.num_layers()).map(|l| self.cf(l)).collect()
    }
}

/// Logits of both branches for the next position.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchLogits {
    pub z_full: Vec<f32>,
    pub z_cf: Vec<f32>,
    pub layer_evals: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub token: TokenId,
    pub z_full: Vec<f32>,
    pub z_cf: Vec<f32>,
    pub delta: Vec<f32>,
    pub z_cd: Vec<f32>,
    pub layer_evals: usize,
    pub step_nanos: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecodeTrace {
    pub steps: Vec<StepRecord>,
}

impl DecodeTrace {
    pub fn tokens(&self) -> Vec<TokenId> {
        self.steps.iter().map(|s| s.token).collect()
    }

    pub fn total_layer_evals(&self) -> usize {
        self.steps.iter().map(|s| s.layer_evals).sum()
    }
}

/// Monotonic time source for per-step timing; [`NoClock`] disables it.
pub trait Clock {
    fn now_nanos(&self) -> u64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn now_nanos(&self) -> u64 {
        0
    }
}

/// An in-progress dual-branch decode over one prompt.
#[derive(Debug, Clone)]
pub struct Session<'m> {
    model: &'m ToyModel,
    layout: PromptLayout,
    boundary: usize,
    caches: BranchCaches,
    causal: ValidityMask,
    cf: ValidityMask,
    tokens: Vec<TokenId>,
    capture: bool,
    states: Option<BranchStates>,
}

impl<'m> Session<'m> {
    /// Shared prefill of layers `0..b`, then both post-boundary prefills
    /// from the same boundary state.
    pub fn prefill(
        model: &'m ToyModel,
        layout: &PromptLayout,
        boundary: BoundaryConfig,
    ) -> Result<(Self, BranchLogits), EngineError> {
        Self::start(model, layout, boundary, false)
    }

    /// As [`Self::prefill`], additionally recording per-layer last-position
    /// states on every forward.
    pub fn prefill_capturing(
        model: &'m ToyModel,
        layout: &PromptLayout,
        boundary: BoundaryConfig,
    ) -> Result<(Self, BranchLogits), EngineError> {
        Self::start(model, layout, boundary, true)
    }

    fn start(
        model: &'m ToyModel,
        layout: &PromptLayout,
        boundary: BoundaryConfig,
        capture: bool,
    ) -> Result<(Self, BranchLogits), EngineError> {
        let cfg = model.config();
        boundary.validate(cfg.num_layers)?;
        let s = layout.len();
        if s > cfg.max_seq_len {
            return Err(EngineError::PromptTooLong {
                len: s,
                max: cfg.max_seq_len,
            });
        }
        let b = boundary.boundary(cfg.num_layers);
        let causal = build_causal_mask(s);
        let cf = build_cf_mask(&causal, layout.image_positions())?;
        let mut session = Self {
            model,
            layout: layout.clone(),
            boundary: b,
            caches: BranchCaches::new(cfg.num_layers, b, cfg.hidden_dim),
            causal,
            cf,
            tokens: layout.tokens().to_vec(),
            capture,
            states: None,
        };
        let hidden = model.embed(layout.tokens())?;
        let positions: Vec<usize> = (0..s).collect();
        let logits = session.run(hidden, &positions, 0..s)?;
        Ok((session, logits))
    }

    /// Feeds `token` at the next position and returns both branches'
    /// logits for the position after it.
    pub fn advance(&mut self, token: TokenId) -> Result<BranchLogits, EngineError> {
        let cfg = self.model.config();
        let pos = self.tokens.len();
        if pos >= cfg.max_seq_len {
            return Err(EngineError::SequenceFull(cfg.max_seq_len));
        }
        self.check_sync()?;
        let images = self.layout.image_positions();
        self.causal.extend_in_place(pos, images, MaskVariant::Causal)?;
        self.cf.extend_in_place(pos, images, MaskVariant::Counterfactual)?;
        let hidden = self.model.embed(&[token])?;
        self.tokens.push(token);
        self.run(hidden, &[pos], pos..pos + 1)
    }

    fn run(
        &mut self,
        hidden: Matrix,
        positions: &[usize],
        rows: Range<usize>,
    ) -> Result<BranchLogits, EngineError> {
        let model = self.model;
        let l = model.config().num_layers;
        let b = self.boundary;
        let causal = rows_to_additive(&self.causal, rows.clone());
        let cf = rows_to_additive(&self.cf, rows);

        let mut shared_states = Vec::new();
        let mut full_states = Vec::new();
        let mut cf_states = Vec::new();
        let capture = self.capture;

        let h_b = {
            let mut tap = tapper(capture, &mut shared_states);
            model.forward_layers_tapped(0..b, hidden, &mut self.caches.shared_prefix, &causal, positions, &mut tap)?
        };
        let h_full = {
            let mut tap = tapper(capture, &mut full_states);
            model.forward_layers_tapped(b..l, h_b.clone(), &mut self.caches.full_post, &causal, positions, &mut tap)?
        };
        let h_cf = {
            let mut tap = tapper(capture, &mut cf_states);
            model.forward_layers_tapped(b..l, h_b, &mut self.caches.cf_post, &cf, positions, &mut tap)?
        };
        let last = h_full.rows() - 1;
        let z_full = model.project_logits(h_full.row(last))?;
        let z_cf = model.project_logits(h_cf.row(last))?;
        if capture {
            self.states = Some(BranchStates {
                boundary: b,
                shared: shared_states,
                full_post: full_states,
                cf_post: cf_states,
            });
        }
        Ok(BranchLogits {
            z_full,
            z_cf,
            layer_evals: l + (l - b),
        })
    }

    fn check_sync(&self) -> Result<(), EngineError> {
        let n = self.tokens.len();
        let c = &self.caches;
        if c.shared_prefix.len() != n && !c.shared_prefix.layers().is_empty() {
            return Err(EngineError::CacheDesync("shared prefix length"));
        }
        if !c.full_post.layers().is_empty() && (c.full_post.len() != n || c.cf_post.len() != n) {
            return Err(EngineError::CacheDesync("post-boundary length"));
        }
        if self.causal.key_count() != n || self.cf.key_count() != n {
            return Err(EngineError::CacheDesync("mask length"));
        }
        Ok(())
    }

    pub fn boundary(&self) -> usize {
        self.boundary
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn layout(&self) -> &PromptLayout {
        &self.layout
    }

    pub fn caches(&self) -> &BranchCaches {
        &self.caches
    }

    /// Mutable caches; used by tests that tamper with stored rows.
    pub fn caches_mut(&mut self) -> &mut BranchCaches {
        &mut self.caches
    }

    pub fn causal_mask(&self) -> &ValidityMask {
        &self.causal
    }

    pub fn cf_mask(&self) -> &ValidityMask {
        &self.cf
    }

    /// States of the most recent forward, when capturing.
    pub fn states(&self) -> Option<&BranchStates> {
        self.states.as_ref()
    }
}

fn tapper(capture: bool, dst: &mut Vec<Vec<f32>>) -> impl FnMut(usize, &Matrix) + '_ {
    move |_, h| {
        if capture {
            dst.push(h.row(h.rows() - 1).to_vec());
        }
    }
}

/// `(1 + α)·z_full − α·z_cf`, elementwise in `f32`.
pub fn contrast(z_full: &[f32], z_cf: &[f32], alpha: f32) -> Result<Vec<f32>, EngineError> {
    if z_full.len() != z_cf.len() {
        return Err(TensorError::Shape {
            op: "contrast",
            expected: z_full.len(),
            actual: z_cf.len(),
        }
        .into());
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(EngineError::InvalidAlpha(alpha));
    }
    Ok(z_full
        .iter()
        .zip(z_cf)
        .map(|(&f, &c)| (1.0 + alpha) * f - alpha * c)
        .collect())
}

/// Greedy argmax; ties go to the lowest id.
///
/// # Panics
/// If `z` is empty.
pub fn select_token(z: &[f32]) -> TokenId {
    assert!(!z.is_empty(), "select_token on empty logits");
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best as TokenId
}

fn record(
    step: usize,
    logits: BranchLogits,
    alpha: f32,
    step_nanos: u64,
) -> Result<StepRecord, EngineError> {
    let z_cd = contrast(&logits.z_full, &logits.z_cf, alpha)?;
    let delta = logits
        .z_full
        .iter()
        .zip(&logits.z_cf)
        .map(|(&f, &c)| f - c)
        .collect();
    Ok(StepRecord {
        step,
        token: select_token(&z_cd),
        z_full: logits.z_full,
        z_cf: logits.z_cf,
        delta,
        z_cd,
        layer_evals: logits.layer_evals,
        step_nanos,
    })
}

/// Runs one decoding step after the first: feeds `prev`, fuses, selects.
pub fn decode_step(
    session: &mut Session<'_>,
    prev: TokenId,
    step: usize,
    alpha: f32,
    clock: &dyn Clock,
) -> Result<StepRecord, EngineError> {
    let t0 = clock.now_nanos();
    let logits = session.advance(prev)?;
    let dt = clock.now_nanos().saturating_sub(t0);
    record(step, logits, alpha, dt)
}

/// Decodes until EOS or `max_tokens` tokens; the EOS token, when emitted,
/// is part of the returned sequence.
pub fn generate(
    model: &ToyModel,
    layout: &PromptLayout,
    boundary: BoundaryConfig,
    config: ContrastConfig,
    clock: &dyn Clock,
) -> Result<(Vec<TokenId>, DecodeTrace), EngineError> {
    let (trace, _) = decode(model, layout, boundary, config, clock, false)?;
    Ok((trace.tokens(), trace))
}

/// [`generate`], also returning the per-layer last-position states of both
/// branches at every step.
pub fn generate_capturing(
    model: &ToyModel,
    layout: &PromptLayout,
    boundary: BoundaryConfig,
    config: ContrastConfig,
    clock: &dyn Clock,
) -> Result<(DecodeTrace, Vec<BranchStates>), EngineError> {
    decode(model, layout, boundary, config, clock, true)
}

fn decode(
    model: &ToyModel,
    layout: &PromptLayout,
    boundary: BoundaryConfig,
    config: ContrastConfig,
    clock: &dyn Clock,
    capture: bool,
) -> Result<(DecodeTrace, Vec<BranchStates>), EngineError> {
    config.validate()?;
    let t0 = clock.now_nanos();
    let (mut session, logits) = Session::start(model, layout, boundary, capture)?;
    let first = record(1, logits, config.alpha, clock.now_nanos().saturating_sub(t0))?;
    let mut states: Vec<BranchStates> = session.states().cloned().into_iter().collect();
    let mut trace = DecodeTrace { steps: vec![first] };
    loop {
        let last = trace.steps.last().expect("nonempty").token;
        if last == layout.eos_token() || trace.steps.len() == config.max_tokens {
            break;
        }
        let step = trace.steps.len() + 1;
        trace
            .steps
            .push(decode_step(&mut session, last, step, config.alpha, clock)?);
        states.extend(session.states().cloned());
    }
    Ok((trace, states))
}

/// Plain cached greedy decoding with the causal mask only.
pub fn baseline_generate(
    model: &ToyModel,
    layout: &PromptLayout,
    max_tokens: usize,
) -> Result<Vec<TokenId>, EngineError> {
    Ok(baseline_generate_traced(model, layout, max_tokens, &NoClock)?.0)
}

/// [`baseline_generate`] with a trace whose branch logits both equal the
/// single causal forward and whose layer-eval count is `L` per step.
pub fn baseline_generate_traced(
    model: &ToyModel,
    layout: &PromptLayout,
    max_tokens: usize,
    clock: &dyn Clock,
) -> Result<(Vec<TokenId>, DecodeTrace), EngineError> {
    if max_tokens == 0 {
        return Err(EngineError::InvalidMaxTokens);
    }
    let cfg = model.config();
    let l = cfg.num_layers;
    let s = layout.len();
    if s > cfg.max_seq_len {
        return Err(EngineError::PromptTooLong {
            len: s,
            max: cfg.max_seq_len,
        });
    }
    let mut cache = LayerCache::new(0..l, cfg.hidden_dim);
    let mut mask = build_causal_mask(s);
    let positions: Vec<usize> = (0..s).collect();
    let mut trace = DecodeTrace::default();
    let mut t0 = clock.now_nanos();
    let mut h = model.forward_layers(0..l, model.embed(layout.tokens())?, &mut cache, &to_additive(&mask), &positions)?;
    loop {
        let z = model.project_logits(h.row(h.rows() - 1))?;
        let token = select_token(&z);
        trace.steps.push(StepRecord {
            step: trace.steps.len() + 1,
            token,
            delta: vec![0.0; z.len()],
            z_cf: z.clone(),
            z_cd: z.clone(),
            z_full: z,
            layer_evals: l,
            step_nanos: clock.now_nanos().saturating_sub(t0),
        });
        if token == layout.eos_token() || trace.steps.len() == max_tokens {
            break;
        }
        let pos = s + trace.steps.len() - 1;
        if pos >= cfg.max_seq_len {
            return Err(EngineError::SequenceFull(cfg.max_seq_len));
        }
        t0 = clock.now_nanos();
        mask.extend_in_place(pos, &[], MaskVariant::Causal)?;
        h = model.forward_layers(0..l, model.embed(&[token])?, &mut cache, &rows_to_additive(&mask, pos..pos + 1), &[pos])?;
    }
    Ok((trace.tokens(), trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, reference_forward, ModelConfig};

    fn model() -> ToyModel {
        init_model(ModelConfig::new(4, 16, 2, 32, 24, 64).unwrap(), 5).unwrap()
    }

    fn layout() -> PromptLayout {
        PromptLayout::new(vec![2, 20, 21, 22, 7, 9], vec![1, 2, 3], 1, 16..24).unwrap()
    }

    #[test]
    fn contrast_by_hand() {
        assert_eq!(contrast(&[2.0, 1.0], &[0.0, 3.0], 0.5).unwrap(), [3.0, 0.0]);
        assert_eq!(contrast(&[2.0, -1.0], &[7.0, 3.0], 0.0).unwrap(), [2.0, -1.0]);
        assert_eq!(contrast(&[2.0, -1.0], &[2.0, -1.0], 3.0).unwrap(), [2.0, -1.0]);
        assert!(contrast(&[1.0], &[1.0, 2.0], 0.5).is_err());
        assert!(matches!(contrast(&[1.0], &[1.0], -0.1), Err(EngineError::InvalidAlpha(_))));
    }

    #[test]
    fn selection_ties_low() {
        assert_eq!(select_token(&[0.0, 5.0, 3.0]), 1);
        assert_eq!(select_token(&[7.0, 7.0]), 0);
        assert_eq!(select_token(&[3.0, 0.0]), 0);
    }

    #[test]
    fn k_zero_collapses() {
        let m = model();
        let (_, z) = Session::prefill(&m, &layout(), BoundaryConfig::new(0)).unwrap();
        assert_eq!(z.z_full, z.z_cf);
        assert_eq!(z.layer_evals, 4);
    }

    #[test]
    fn no_images_collapses() {
        let m = model();
        let l = PromptLayout::new(vec![2, 5, 7, 9], vec![], 1, 16..24).unwrap();
        let (_, z) = Session::prefill(&m, &l, BoundaryConfig::new(2)).unwrap();
        assert_eq!(z.z_full, z.z_cf);
    }

    #[test]
    fn full_branch_matches_plain_forward() {
        let m = model();
        let lay = layout();
        let (_, z) = Session::prefill(&m, &lay, BoundaryConfig::new(2)).unwrap();
        let oracle = reference_forward(&m, lay.tokens(), &to_additive(&build_causal_mask(lay.len()))).unwrap();
        assert_eq!(z.z_full, oracle);
    }

    #[test]
    fn generate_respects_limits() {
        let m = model();
        let cfg = ContrastConfig {
            alpha: 0.5,
            max_tokens: 1,
        };
        let (seq, trace) = generate(&m, &layout(), BoundaryConfig::new(2), cfg, &NoClock).unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(trace.steps[0].layer_evals, 6);
    }

    #[test]
    fn alpha_zero_is_baseline() {
        let m = model();
        let cfg = ContrastConfig {
            alpha: 0.0,
            max_tokens: 10,
        };
        let (seq, _) = generate(&m, &layout(), BoundaryConfig::new(3), cfg, &NoClock).unwrap();
        assert_eq!(seq, baseline_generate(&m, &layout(), 10).unwrap());
    }

    #[test]
    fn invalid_configs() {
        let m = model();
        assert!(matches!(
            Session::prefill(&m, &layout(), BoundaryConfig::new(5)),
            Err(EngineError::InvalidBoundary { .. })
        ));
        let cfg = ContrastConfig {
            alpha: 0.5,
            max_tokens: 0,
        };
        assert_eq!(
            generate(&m, &layout(), BoundaryConfig::new(1), cfg, &NoClock).unwrap_err(),
            EngineError::InvalidMaxTokens
        );
        let long = PromptLayout::new(vec![2; 65], vec![], 1, 16..24).unwrap();
        assert!(matches!(
            Session::prefill(&m, &long, BoundaryConfig::new(1)),
            Err(EngineError::PromptTooLong { .. })
        ));
    }

    #[test]
    fn shared_states_below_boundary() {
        let m = model();
        let (mut s, _) = Session::prefill_capturing(&m, &layout(), BoundaryConfig::new(2)).unwrap();
        s.advance(9).unwrap();
        let st = s.states().unwrap();
        assert_eq!(st.num_layers(), 4);
        for l in 0..2 {
            assert!(core::ptr::eq(st.full(l), st.cf(l)));
        }
        assert_ne!(st.full(3), st.cf(3));
    }
}
