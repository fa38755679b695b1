use proptest::prelude::*;
use sira_core::analysis::{cost_report, next_token_kl};
use sira_core::engine::{
    baseline_generate, baseline_generate_traced, contrast, generate, BoundaryConfig, ContrastConfig, NoClock, Session,
};
use sira_core::masking::{
    build_causal_mask, build_cf_mask, extend_mask, rows_to_additive, to_additive, MaskVariant,
};
use sira_core::model::LayerCache;
use sira_core::tensor::{matmul, softmax_row};
use sira_core::{init_model, Matrix, ModelConfig, PromptLayout, TokenId, ToyModel};

const VOCAB: usize = 24;
const IMG: std::ops::Range<TokenId> = 16..24;
const EOS: TokenId = 1;

fn model(seed: u64, layers: usize) -> ToyModel {
    init_model(ModelConfig::new(layers, 16, 2, 32, VOCAB, 64).unwrap(), seed).unwrap()
}

/// Text tokens in `2..16`, with an image span `[start, start+len)` drawn
/// from the reserved ids.
fn prompt() -> impl Strategy<Value = PromptLayout> {
    (3usize..18)
        .prop_flat_map(|n| {
            (
                proptest::collection::vec(2u32..16, n),
                proptest::collection::vec(IMG, n),
                0..n,
                0..n,
            )
        })
        .prop_map(|(text, img, a, b)| {
            let (lo, hi) = (a.min(b), a.max(b));
            let tokens: Vec<TokenId> = (0..text.len()).map(|i| if (lo..hi).contains(&i) { img[i] } else { text[i] }).collect();
            PromptLayout::from_image_range(tokens, EOS, IMG).unwrap()
        })
}

fn image_set(s: usize) -> impl Strategy<Value = Vec<usize>> {
    proptest::collection::vec(any::<bool>(), s).prop_map(|f| f.iter().enumerate().filter(|(_, &x)| x).map(|(i, _)| i).collect())
}

fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, .. ProptestConfig::default() })]

    #[test]
    fn cf_mask_valid_count(img in (1usize..40).prop_flat_map(image_set)) {
        let s = img.last().map_or(1, |&p| p + 1);
        let cf = build_cf_mask(&build_causal_mask(s), &img).unwrap();
        // each text query sees every earlier-or-equal text key
        let mut expect = 0;
        let mut text_seen = 0;
        for q in 0..s {
            if !img.contains(&q) {
                text_seen += 1;
                expect += text_seen;
            }
        }
        prop_assert_eq!(cf.valid_count(), expect);
        for &p in &img {
            prop_assert!(cf.is_blanked(p));
        }
    }

    #[test]
    fn extend_equals_rebuild(s in 1usize..24, steps in 1usize..10, seed in any::<u64>()) {
        let img: Vec<usize> = (0..s).filter(|i| (seed >> (i % 64)) & 1 == 1).collect();
        let mut c = build_causal_mask(s);
        let mut f = build_cf_mask(&c, &img).unwrap();
        for t in 0..steps {
            c = extend_mask(&c, s + t, &img, MaskVariant::Causal).unwrap();
            f = extend_mask(&f, s + t, &img, MaskVariant::Counterfactual).unwrap();
        }
        let full = build_causal_mask(s + steps);
        prop_assert_eq!(&c, &full);
        prop_assert_eq!(f, build_cf_mask(&full, &img).unwrap());
    }

    #[test]
    fn chunked_forward_matches_single_pass(layout in prompt(), split in 1usize..17, seed in 0u64..50) {
        let m = model(seed, 3);
        let toks = layout.tokens();
        let s = toks.len();
        let split = split.min(s - 1).max(1);
        let mask = build_cf_mask(&build_causal_mask(s), layout.image_positions()).unwrap();
        let pos: Vec<usize> = (0..s).collect();

        let mut one = LayerCache::new(0..3, 16);
        let whole = m.forward_layers(0..3, m.embed(toks).unwrap(), &mut one, &to_additive(&mask), &pos).unwrap();

        let mut two = LayerCache::new(0..3, 16);
        let head = m.forward_layers(0..3, m.embed(&toks[..split]).unwrap(), &mut two, &to_additive(&build_cf_mask(&build_causal_mask(split), &layout.image_positions().iter().copied().filter(|&p| p < split).collect::<Vec<_>>()).unwrap()), &pos[..split]).unwrap();
        let tail = m.forward_layers(0..3, m.embed(&toks[split..]).unwrap(), &mut two, &rows_to_additive(&mask, split..s), &pos[split..]).unwrap();
        for r in 0..s {
            let got = if r < split { head.row(r) } else { tail.row(r - split) };
            prop_assert!(close(got, whole.row(r), 1e-5), "row {}", r);
        }
    }

    #[test]
    fn causality(layout in prompt(), seed in 0u64..50, tok in 2u32..16) {
        let m = model(seed, 2);
        let mut toks = layout.tokens().to_vec();
        let s = toks.len();
        let run = |t: &[TokenId]| {
            let mut c = LayerCache::new(0..2, 16);
            let pos: Vec<usize> = (0..t.len()).collect();
            m.forward_layers(0..2, m.embed(t).unwrap(), &mut c, &to_additive(&build_causal_mask(t.len())), &pos).unwrap()
        };
        let a = run(&toks);
        toks[s - 1] = tok;
        let b = run(&toks);
        for r in 0..s - 1 {
            prop_assert!(close(a.row(r), b.row(r), 1e-6));
        }
    }

    #[test]
    fn reductions_match_baseline(layout in prompt(), seed in 0u64..50, k in 0usize..=4, alpha in 0.0f32..2.0) {
        let m = model(seed, 4);
        let base = baseline_generate(&m, &layout, 6).unwrap();
        let g = |layout: &PromptLayout, k: usize, alpha: f32| {
            generate(&m, layout, BoundaryConfig::new(k), ContrastConfig { alpha, max_tokens: 6 }, &NoClock).unwrap().0
        };
        prop_assert_eq!(&g(&layout, k, 0.0), &base);
        prop_assert_eq!(&g(&layout, 0, alpha), &base);
        let text = PromptLayout::new(layout.tokens().to_vec(), vec![], EOS, IMG).unwrap();
        prop_assert_eq!(g(&text, k, alpha), baseline_generate(&m, &text, 6).unwrap());
    }

    #[test]
    fn full_blind_cf_ignores_image_contents(layout in prompt(), seed in 0u64..50, fill in proptest::collection::vec(IMG, 18)) {
        let m = model(seed, 3);
        let (mut a, za) = Session::prefill(&m, &layout, BoundaryConfig::new(3)).unwrap();
        let mut toks = layout.tokens().to_vec();
        for (i, &p) in layout.image_positions().iter().enumerate() {
            toks[p] = fill[i];
        }
        let (mut b, zb) = Session::prefill(&m, &layout.with_tokens(toks), BoundaryConfig::new(3)).unwrap();
        prop_assert_eq!(za.z_cf, zb.z_cf);
        for t in [3u32, 7, 11] {
            prop_assert_eq!(a.advance(t).unwrap().z_cf, b.advance(t).unwrap().z_cf);
        }
    }

    #[test]
    fn zeroed_image_cache_rows_leave_cf_unchanged(layout in prompt(), seed in 0u64..50, k in 1usize..=3) {
        let m = model(seed, 3);
        let (mut a, _) = Session::prefill(&m, &layout, BoundaryConfig::new(k)).unwrap();
        let mut b = a.clone();
        for &p in layout.image_positions() {
            b.caches_mut().cf_post.zero_position(p);
        }
        for t in [4u32, 9] {
            prop_assert_eq!(a.advance(t).unwrap().z_cf, b.advance(t).unwrap().z_cf);
        }
    }

    #[test]
    fn position_shift_invariance(layout in prompt(), seed in 0u64..50, shift in 1usize..30) {
        let m = model(seed, 2);
        let toks = layout.tokens();
        let s = toks.len();
        let mask = to_additive(&build_causal_mask(s));
        let run = |offset: usize| {
            let pos: Vec<usize> = (offset..offset + s).collect();
            let mut c = LayerCache::new(0..2, 16);
            m.forward_layers(0..2, m.embed(toks).unwrap(), &mut c, &mask, &pos).unwrap()
        };
        let (a, b) = (run(0), run(shift));
        for r in 0..s {
            prop_assert!(close(a.row(r), b.row(r), 1e-4));
        }
    }

    #[test]
    fn kl_nonnegative_and_shift_invariant(p in proptest::collection::vec(-8.0f32..8.0, 2..20), c in -5.0f32..5.0, seed in any::<u64>()) {
        let q: Vec<f32> = p.iter().enumerate().map(|(i, v)| v * 0.5 + ((seed >> (i % 60)) & 7) as f32).collect();
        prop_assert!(next_token_kl(&p, &q).unwrap() >= 0.0);
        prop_assert_eq!(next_token_kl(&p, &p).unwrap(), 0.0);
        let shifted: Vec<f32> = q.iter().map(|v| v + c).collect();
        prop_assert!((next_token_kl(&p, &q).unwrap() - next_token_kl(&p, &shifted).unwrap()).abs() < 1e-4);
    }

    #[test]
    fn contrast_is_affine(zf in proptest::collection::vec(-10.0f32..10.0, 1..16), alpha in 0.0f32..3.0) {
        let zc: Vec<f32> = zf.iter().rev().cloned().collect();
        let z = contrast(&zf, &zc, alpha).unwrap();
        for i in 0..zf.len() {
            let expect = zf[i] + alpha * (zf[i] - zc[i]);
            prop_assert!((z[i] - expect).abs() <= 1e-4 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn matmul_associative(m in 1usize..6, k in 1usize..6, n in 1usize..6, p in 1usize..6, pool in proptest::collection::vec(-1.0f32..1.0, 75)) {
        let gen = |r: usize, c: usize, off: usize| Matrix::from_vec(r, c, pool[off..off + r * c].to_vec()).unwrap();
        let (a, b, c) = (gen(m, k, 0), gen(k, n, 25), gen(n, p, 50));
        let l = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let r = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(close(l.data(), r.data(), 1e-4));
    }

    #[test]
    fn softmax_normalised_and_shift_invariant(row in proptest::collection::vec(-30.0f32..30.0, 1..32), c in -10.0f32..10.0) {
        let mask = vec![0.0; row.len()];
        let p = softmax_row(&row, &mask).unwrap();
        prop_assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let shifted: Vec<f32> = row.iter().map(|v| v + c).collect();
        prop_assert!(close(&p, &softmax_row(&shifted, &mask).unwrap(), 1e-5));
    }

    #[test]
    fn layer_eval_ratio_is_one_plus_k_over_l(l in 2usize..7, k_frac in 0.0f64..=1.0, layout in prompt(), seed in 0u64..20) {
        let k = (k_frac * l as f64).round() as usize;
        let m = model(seed, l);
        let (_, s) = generate(&m, &layout, BoundaryConfig::new(k), ContrastConfig { alpha: 0.5, max_tokens: 5 }, &NoClock).unwrap();
        let (_, b) = baseline_generate_traced(&m, &layout, 5, &NoClock).unwrap();
        let r = cost_report(&[s], &[b], l, k).unwrap();
        prop_assert_eq!(r.layer_eval_ratio, (l + k) as f64 / l as f64);
    }
}
