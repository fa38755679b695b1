//! The acceptance suite behind `sira accept`.
//!
//! Structural criteria run on small random models; behavioural ones on the
//! trained demo model. Each returns a pass flag plus a one-line detail.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sira_core::analysis::{
    cost_report, layerwise_drift, median, next_token_kl, perturbation_reference, Perturbation,
};
use sira_core::engine::{
    baseline_generate, baseline_generate_traced, generate, BoundaryConfig, Clock, ContrastConfig, NoClock, Session,
};
use sira_core::masking::{build_causal_mask, build_cf_mask, extend_mask, to_additive, MaskVariant, ValidityMask};
use sira_core::model::{LayerCache, Weights};
use sira_core::synth::{eval_hallucination, loss_and_grad, Decoder, Example, TrainSeq};
use sira_core::{init_model, ModelConfig, PromptLayout, TokenId, ToyModel};

use crate::demo::Demo;
use crate::error::CliError;
use crate::experiments::default_k_list;
use crate::reference::Reference64;

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionResult {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "[{}] {:>2} {:<28} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail
        )
    }
}

/// Noise scale of the input-space noise reference.
pub const NOISE_STD: f32 = 1.0;
/// Relative-error floor for near-zero gradients.
pub const GRAD_FLOOR: f64 = 1e-4;

const IMAGE_IDS: std::ops::Range<TokenId> = 20..32;
const EOS: TokenId = 1;

/// A random prompt over a 32-token vocabulary with ids `20..32` reserved
/// for images; `image` selects whether image positions are drawn.
pub fn random_prompt(rng: &mut ChaCha8Rng, max_len: usize, image: bool) -> PromptLayout {
    let len = rng.random_range(3..=max_len);
    let mut tokens: Vec<TokenId> = (0..len).map(|_| rng.random_range(2..IMAGE_IDS.start)).collect();
    if image {
        let start = rng.random_range(0..len - 1);
        let end = rng.random_range(start + 1..len);
        for t in &mut tokens[start..end] {
            *t = rng.random_range(IMAGE_IDS);
        }
    }
    PromptLayout::from_image_range(tokens, EOS, IMAGE_IDS).expect("valid prompt")
}

pub fn random_model(seed: u64, layers: usize) -> ToyModel {
    let cfg = ModelConfig::new(layers, 16, 2, 32, 32, 64).expect("valid config");
    init_model(cfg, seed).expect("valid init")
}

fn result(id: u8, name: &'static str, passed: bool, detail: String) -> CriterionResult {
    CriterionResult { id, name, passed, detail }
}

pub fn reduction_identities() -> Result<CriterionResult, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut failures = 0;
    let pairs = 100;
    for i in 0..pairs {
        let model = random_model(i, 4);
        let layout = random_prompt(&mut rng, 20, true);
        let t = 8;
        let base = baseline_generate(&model, &layout, t)?;
        let run = |k: usize, alpha: f32, layout: &PromptLayout| {
            generate(&model, layout, BoundaryConfig::new(k), ContrastConfig { alpha, max_tokens: t }, &NoClock).map(|r| r.0)
        };
        let no_image = PromptLayout::new(layout.tokens().to_vec(), Vec::new(), EOS, IMAGE_IDS)?;
        failures += (run(2, 0.0, &layout)? != base) as usize;
        failures += (run(0, 0.7, &layout)? != base) as usize;
        failures += (run(2, 0.7, &no_image)? != baseline_generate(&model, &no_image, t)?) as usize;
    }
    Ok(result(
        1,
        "reduction identities",
        failures == 0,
        format!("{pairs} pairs x 3 identities, {failures} mismatches"),
    ))
}

/// Last-row logits of a cache-free forward: layers `0..b` causal, `b..L`
/// under `post`.
pub fn recompute_last(model: &ToyModel, tokens: &[TokenId], b: usize, post: &ValidityMask) -> Result<Vec<f32>, CliError> {
    let cfg = model.config();
    let s = tokens.len();
    let positions: Vec<usize> = (0..s).collect();
    let mut pre = LayerCache::new(0..b, cfg.hidden_dim);
    let mut postc = LayerCache::new(b..cfg.num_layers, cfg.hidden_dim);
    let h = model.forward_layers(0..b, model.embed(tokens)?, &mut pre, &to_additive(&build_causal_mask(s)), &positions)?;
    let h = model.forward_layers(b..cfg.num_layers, h, &mut postc, &to_additive(post), &positions)?;
    Ok(model.project_logits(h.row(s - 1))?)
}

pub fn cache_oracle() -> Result<CriterionResult, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f32;
    let mut steps = 0;
    for i in 0..20 {
        let model = random_model(1000 + i, 4);
        let layout = random_prompt(&mut rng, 16, true);
        let k = 1 + (i as usize % 4);
        let b = 4 - k;
        let (_, trace) = generate(&model, &layout, BoundaryConfig::new(k), ContrastConfig { alpha: 0.5, max_tokens: 16 }, &NoClock)?;
        let mut seq = layout.tokens().to_vec();
        for st in &trace.steps {
            let causal = build_causal_mask(seq.len());
            let cf = build_cf_mask(&causal, layout.image_positions())?;
            let zf = recompute_last(&model, &seq, b, &causal)?;
            let zc = recompute_last(&model, &seq, b, &cf)?;
            for (a, r) in st.z_full.iter().zip(&zf).chain(st.z_cf.iter().zip(&zc)) {
                worst = worst.max((a - r).abs());
            }
            seq.push(st.token);
            steps += 1;
        }
    }
    Ok(result(
        2,
        "cache-oracle equivalence",
        worst <= 1e-5,
        format!("{steps} steps, max |dz| = {worst:.2e} (tol 1e-5)"),
    ))
}

pub fn mask_oracle() -> Result<CriterionResult, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut bad = 0;
    for _ in 0..200 {
        let s = rng.random_range(1..=32);
        let img: Vec<usize> = (0..s).filter(|_| rng.random_bool(0.3)).collect();
        let cf = build_cf_mask(&build_causal_mask(s), &img)?;
        for q in 0..s {
            for k in 0..s {
                let expect = k <= q && !img.contains(&q) && !img.contains(&k);
                bad += (cf.is_valid(q, k) != expect) as usize;
            }
        }
        let mut inc = cf.clone();
        let mut inc_causal = build_causal_mask(s);
        for t in 0..16 {
            inc = extend_mask(&inc, s + t, &img, MaskVariant::Counterfactual)?;
            inc_causal = extend_mask(&inc_causal, s + t, &img, MaskVariant::Causal)?;
        }
        let full = build_causal_mask(s + 16);
        // rebuilt: prompt image rows blanked, generated rows block image keys
        bad += (inc != build_cf_mask(&full, &img)?) as usize;
        bad += (inc_causal != full) as usize;
    }
    Ok(result(3, "mask oracle", bad == 0, format!("200 instances, {bad} mismatches")))
}

/// Teacher-forced counterfactual logits along `continuation`.
fn cf_logits_along(
    model: &ToyModel,
    layout: &PromptLayout,
    k: usize,
    continuation: &[TokenId],
) -> Result<Vec<Vec<f32>>, CliError> {
    let (mut session, first) = Session::prefill(model, layout, BoundaryConfig::new(k))?;
    let mut out = vec![first.z_cf];
    for &t in &continuation[..continuation.len().saturating_sub(1)] {
        out.push(session.advance(t)?.z_cf);
    }
    Ok(out)
}

pub fn full_blind_invariance() -> Result<CriterionResult, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let model = random_model(4040, 4);
    let layout = random_prompt(&mut rng, 24, true);
    let (tokens, _) = generate(&model, &layout, BoundaryConfig::new(4), ContrastConfig { alpha: 0.5, max_tokens: 12 }, &NoClock)?;
    let reference = cf_logits_along(&model, &layout, 4, &tokens)?;
    let mut identical = 0;
    for _ in 0..10 {
        let mut toks = layout.tokens().to_vec();
        for &p in layout.image_positions() {
            toks[p] = rng.random_range(IMAGE_IDS);
        }
        let other = cf_logits_along(&model, &layout.with_tokens(toks), 4, &tokens)?;
        identical += (other == reference) as usize;
    }
    Ok(result(
        4,
        "full-blind invariance",
        identical == 10,
        format!("{identical}/10 replacements bit-identical over {} steps", reference.len()),
    ))
}

/// Cost ratio of matched runs; `clock` times the wall-clock leg.
pub fn cost_case(num_layers: usize, k: usize, clock: &dyn Clock) -> Result<sira_core::analysis::CostReport, CliError> {
    let cfg = ModelConfig::new(num_layers, 64, 4, 256, 64, 128)?;
    let model = init_model(cfg, 505)?;
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let tokens: Vec<TokenId> = (0..48).map(|i| if (4..36).contains(&i) { rng.random_range(40..64) } else { rng.random_range(2..40) }).collect();
    let layout = PromptLayout::from_image_range(tokens, EOS, 40..64)?;
    let t = 32;
    let (_, sira) = generate(&model, &layout, BoundaryConfig::new(k), ContrastConfig { alpha: 0.5, max_tokens: t }, clock)?;
    let (_, base) = baseline_generate_traced(&model, &layout, t, clock)?;
    Ok(cost_report(&[sira], &[base], num_layers, k)?)
}

pub fn cost_accounting(clock: &dyn Clock) -> Result<CriterionResult, CliError> {
    let mut ok = true;
    let mut parts = Vec::new();
    for (l, k) in [(28, 14), (28, 7), (16, 16), (8, 0)] {
        let r = cost_case(l, k, clock)?;
        let expect = 1.0 + k as f64 / l as f64;
        ok &= r.layer_eval_ratio == expect;
        parts.push(format!("({l},{k})={}", r.layer_eval_ratio));
        if (l, k) == (28, 14) {
            match r.wallclock_ratio {
                Some(w) => {
                    ok &= w < 2.0;
                    parts.push(format!("wall={w:.3}"));
                }
                None => {
                    ok = false;
                    parts.push("wall=n/a".into());
                }
            }
        }
    }
    Ok(result(5, "cost accounting", ok, parts.join(" ")))
}

fn image_questions(demo: &Demo) -> Vec<&Example> {
    demo.dataset.test.iter().filter(|e| !e.image_tokens.is_empty()).collect()
}

pub fn drift_structure(demo: &Demo) -> Result<CriterionResult, CliError> {
    let l = demo.model.config().num_layers;
    let vocab = demo.recipe.spec.vocab();
    let mut ok = true;
    let mut checked = 0;
    for k in [1, l / 2, l] {
        for e in image_questions(demo).into_iter().take(20) {
            let (session, _) = Session::prefill_capturing(&demo.model, &e.layout(&vocab)?, BoundaryConfig::new(k))?;
            let st = session.states().expect("captured");
            let d = layerwise_drift(&st.full_stack(), &st.cf_stack(), st.boundary())?;
            let b = l - k;
            ok &= d.distances[..b].iter().all(|&x| x == 0.0);
            ok &= d.distances[b..].iter().any(|&x| x > 0.0);
            checked += 1;
        }
    }
    Ok(result(6, "drift structure", ok, format!("{checked} prompts over K in {{1, L/2, L}}")))
}

pub fn reference_ordering(demo: &Demo) -> Result<CriterionResult, CliError> {
    let l = demo.model.config().num_layers;
    let vocab = demo.recipe.spec.vocab();
    let (mut cf, mut shuf, mut noise) = (Vec::new(), Vec::new(), Vec::new());
    for (i, e) in image_questions(demo).into_iter().enumerate() {
        let layout = e.layout(&vocab)?;
        // one KL per prompt: the distribution right after it
        let (tokens, trace) = generate(&demo.model, &layout, BoundaryConfig::mid(l), ContrastConfig { alpha: 0.5, max_tokens: 1 }, &NoClock)?;
        let s = perturbation_reference(&demo.model, &layout, &tokens, Perturbation::Shuffle, i as u64)?;
        let n = perturbation_reference(&demo.model, &layout, &tokens, Perturbation::Noise { std: NOISE_STD }, i as u64)?;
        for (j, st) in trace.steps.iter().enumerate() {
            cf.push(next_token_kl(&st.z_full, &st.z_cf)?);
            shuf.push(next_token_kl(&st.z_full, &s.logits[j])?);
            noise.push(next_token_kl(&st.z_full, &n.logits[j])?);
        }
    }
    let (mc, ms, mn) = (median(&cf).unwrap_or(f64::NAN), median(&shuf).unwrap_or(f64::NAN), median(&noise).unwrap_or(f64::NAN));
    Ok(result(
        7,
        "reference-quality ordering",
        mc < ms && mc < mn,
        format!("median KL cf={mc:.4} shuffle={ms:.4} noise={mn:.4} over {} prompts", cf.len()),
    ))
}

fn questions(demo: &Demo) -> Vec<Example> {
    demo.dataset.test.iter().filter(|e| e.is_question()).cloned().collect()
}

pub fn hallucination_reduction(demo: &Demo) -> Result<CriterionResult, CliError> {
    let l = demo.model.config().num_layers;
    let vocab = demo.recipe.spec.vocab();
    let qs = questions(demo);
    let base = eval_hallucination(&demo.model, Decoder::Baseline, &qs, &vocab)?;
    let sira = eval_hallucination(&demo.model, Decoder::Sira { alpha: 0.5, k: l / 2 }, &qs, &vocab)?;
    let ok = base.halluc_rate_bias >= 0.30
        && sira.halluc_rate_bias <= base.halluc_rate_bias - 0.05
        && sira.grounded_recall >= base.grounded_recall - 0.02;
    Ok(result(
        8,
        "planted-prior reduction",
        ok,
        format!(
            "bias-paired halluc {:.3} -> {:.3}, recall {:.3} -> {:.3}",
            base.halluc_rate_bias, sira.halluc_rate_bias, base.grounded_recall, sira.grounded_recall
        ),
    ))
}

pub fn sweep_shape(demo: &Demo) -> Result<CriterionResult, CliError> {
    let l = demo.model.config().num_layers;
    let vocab = demo.recipe.spec.vocab();
    let qs = questions(demo);
    let ks = default_k_list(l);
    let accs = ks
        .iter()
        .map(|&k| Ok(eval_hallucination(&demo.model, Decoder::Sira { alpha: 0.5, k }, &qs, &vocab)?.accuracy))
        .collect::<Result<Vec<f64>, CliError>>()?;
    let edge = accs[0].max(*accs.last().expect("nonempty"));
    let inner = accs[1..accs.len() - 1].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let base = eval_hallucination(&demo.model, Decoder::Sira { alpha: 0.0, k: l / 2 }, &qs, &vocab)?.accuracy;
    let mid = accs[ks.iter().position(|&k| k == l / 2).expect("L/2 in list")];
    let cells: Vec<String> = ks.iter().zip(&accs).map(|(k, a)| format!("K{k}={a:.3}")).collect();
    Ok(result(
        9,
        "sweep shape",
        inner > edge && mid >= base,
        format!("{} | alpha0={base:.3} alpha0.5={mid:.3}", cells.join(" ")),
    ))
}

pub fn gradient_check() -> Result<CriterionResult, CliError> {
    let cfg = ModelConfig::new(2, 8, 2, 16, 32, 32)?;
    let model = init_model(cfg, 606)?;
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let batch: Vec<TrainSeq> = (0..4)
        .map(|_| {
            let tokens: Vec<TokenId> = (0..10).map(|_| rng.random_range(0..32)).collect();
            TrainSeq { tokens, first_target: 6 }
        })
        .collect();
    let (_, grad) = loss_and_grad(&model, &batch)?;
    let seqs: Vec<(Vec<TokenId>, usize)> = batch.iter().map(|s| (s.tokens.clone(), s.first_target)).collect();
    let base = Reference64::new(&model);
    let sizes = Weights::tensor_sizes(&cfg);
    let total: usize = sizes.iter().sum();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let mut flat = rng.random_range(0..total);
        let t = sizes
            .iter()
            .position(|&n| {
                if flat < n {
                    true
                } else {
                    flat -= n;
                    false
                }
            })
            .expect("in range");
        let mut plus = base.clone();
        plus.tensors[t][flat] += h;
        let mut minus = base.clone();
        minus.tensors[t][flat] -= h;
        let numeric = (plus.loss(&seqs) - minus.loss(&seqs)) / (2.0 * h);
        let analytic = grad.tensors()[t][flat] as f64;
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
        worst = worst.max(rel);
    }
    Ok(result(
        10,
        "gradient check",
        worst <= 1e-3,
        format!("50 parameters, worst relative error {worst:.2e}"),
    ))
}

/// Runs every criterion, in order.
pub fn run_all(demo: &Demo, clock: &dyn Clock) -> Result<Vec<CriterionResult>, CliError> {
    Ok(vec![
        reduction_identities()?,
        cache_oracle()?,
        mask_oracle()?,
        full_blind_invariance()?,
        cost_accounting(clock)?,
        drift_structure(demo)?,
        reference_ordering(demo)?,
        hallucination_reduction(demo)?,
        sweep_shape(demo)?,
        gradient_check()?,
    ])
}
