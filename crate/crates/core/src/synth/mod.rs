//! Planted-prior benchmark.
//!
//! A scene is a small set of objects. Its image is a scene-type token
//! followed by one `(glyph, state)` token pair per object type in shuffled
//! order, where the state says whether the object is present. Presence
//! questions read `BOS img SEP a Q b` and are answered `YES`/`NO` + `EOS`;
//! caption prompts read `BOS img SEP CAP` and list the present objects.
//!
//! Biased scenes (one scene type) make each pair `(a, b)` co-occur, and the
//! training text affirms `b` after `a` even when `b` is absent. The test
//! answers are always derived from the image, so a model that learned the
//! text habit hallucinates on bias-paired negatives.

mod eval;
mod train;

pub use eval::{
    decode_answers, eval_hallucination, oracle_answer, score, Decoder, HallucinationMetrics,
};
pub use train::{batch_loss, loss_and_grad, train_toy, train_toy_with, TrainConfig, TrainReport, TrainSeq};

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{LayoutError, SynthError};
use crate::masking::{PromptLayout, TokenId};

/// Token id layout of the synthetic vocabulary.
///
/// `0..8` are control tokens, then object words, then the reserved image
/// range (scene types, glyphs, present states, absent states).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub num_objects: usize,
    pub scene_types: usize,
    /// Slot tokens; `0` for the direct `(glyph, state)` rendering.
    pub slots: usize,
    pub state_variants: usize,
}

impl Vocab {
    pub const PAD: TokenId = 0;
    pub const EOS: TokenId = 1;
    pub const BOS: TokenId = 2;
    pub const YES: TokenId = 3;
    pub const NO: TokenId = 4;
    pub const Q: TokenId = 5;
    pub const CAP: TokenId = 6;
    pub const SEP: TokenId = 7;
    const CONTROL: usize = 8;

    pub fn object(&self, o: usize) -> TokenId {
        (Self::CONTROL + o) as TokenId
    }

    /// Object index of a word token, if it is one.
    pub fn object_of(&self, t: TokenId) -> Option<usize> {
        let t = t as usize;
        (Self::CONTROL..Self::CONTROL + self.num_objects)
            .contains(&t)
            .then(|| t - Self::CONTROL)
    }

    fn image_start(&self) -> usize {
        Self::CONTROL + self.num_objects
    }

    pub fn scene(&self, t: usize) -> TokenId {
        (self.image_start() + t) as TokenId
    }

    pub fn glyph(&self, o: usize) -> TokenId {
        (self.image_start() + self.scene_types + o) as TokenId
    }

    pub fn slot(&self, s: usize) -> TokenId {
        (self.image_start() + self.scene_types + self.num_objects + s) as TokenId
    }

    fn state_start(&self) -> usize {
        self.image_start() + self.scene_types + self.num_objects + self.slots
    }

    pub fn present(&self, variant: usize) -> TokenId {
        (self.state_start() + variant) as TokenId
    }

    pub fn absent(&self, variant: usize) -> TokenId {
        (self.state_start() + self.state_variants + variant) as TokenId
    }

    fn state_of(&self, t: TokenId) -> Option<bool> {
        let t = t as usize;
        let s = self.state_start();
        if (s..s + self.state_variants).contains(&t) {
            Some(true)
        } else if (s + self.state_variants..s + 2 * self.state_variants).contains(&t) {
            Some(false)
        } else {
            None
        }
    }

    fn index_in(&self, t: TokenId, first: TokenId, count: usize) -> Option<usize> {
        (first..first + count as TokenId).contains(&t).then(|| (t - first) as usize)
    }

    /// Decodes which objects an image marks present; `None` if the tokens
    /// do not form a well-formed image.
    pub fn read_image(&self, image: &[TokenId]) -> Option<Vec<bool>> {
        let n = self.num_objects;
        if image.len() != self.image_len() {
            return None;
        }
        let glyph = |t| self.index_in(t, self.glyph(0), n);
        let mut present = vec![None; n];
        let body = &image[1..];
        if self.slots == 0 {
            for w in body.chunks(2) {
                present[glyph(w[0])?] = Some(self.state_of(w[1])?);
            }
        } else {
            let slot = |t| self.index_in(t, self.slot(0), self.slots);
            let (objs, states) = body.split_at(2 * n);
            let mut slot_state = vec![None; self.slots];
            for w in states.chunks(2) {
                slot_state[slot(w[0])?] = Some(self.state_of(w[1])?);
            }
            for w in objs.chunks(2) {
                present[glyph(w[0])?] = slot_state[slot(w[1])?];
            }
        }
        present.into_iter().collect()
    }

    pub fn image_range(&self) -> Range<TokenId> {
        self.image_start() as TokenId..self.size() as TokenId
    }

    pub fn size(&self) -> usize {
        self.state_start() + 2 * self.state_variants
    }

    /// Image length: scene token plus one glyph/state pair per object
    /// type, or a glyph/slot and a slot/state pair under indirection.
    pub fn image_len(&self) -> usize {
        if self.slots == 0 {
            1 + 2 * self.num_objects
        } else {
            1 + 4 * self.num_objects
        }
    }
}

/// `b` co-occurs with `a` in biased scenes with probability `strength`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasPair {
    pub a: usize,
    pub b: usize,
    pub strength: f32,
}

/// Generator knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub num_objects: usize,
    /// Scene type `0` is biased; other types have no co-occurrence bias.
    pub scene_types: usize,
    pub biased_scene_fraction: f32,
    pub pairs: Vec<BiasPair>,
    /// Fraction of a pair's strength that training text affirms `b` after
    /// `a` when `b` is absent from a biased scene.
    pub annotation_follow: f32,
    /// Inclusive object-count range of a scene.
    pub scene_size: (usize, usize),
    pub state_variants: usize,
    /// Render presence through randomly assigned slot tokens, so reading
    /// an object's state takes two lookups inside the image.
    pub slot_indirection: bool,
    /// Training examples whose image is dropped (text-only prompts).
    pub text_only_fraction: f32,
    /// Fraction of training examples that are presence questions.
    pub question_fraction: f32,
    /// Fraction of training questions that ask about the partner of `a`.
    pub partner_question_fraction: f32,
    pub train_examples: usize,
    pub test_captions: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            num_objects: 8,
            scene_types: 2,
            biased_scene_fraction: 0.5,
            pairs: (0..4)
                .map(|i| BiasPair {
                    a: i,
                    b: i + 4,
                    strength: 0.8,
                })
                .collect(),
            annotation_follow: 0.75,
            scene_size: (2, 4),
            state_variants: 2,
            slot_indirection: false,
            text_only_fraction: 0.3,
            question_fraction: 0.7,
            partner_question_fraction: 0.3,
            train_examples: 40_000,
            test_captions: 50,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn vocab(&self) -> Vocab {
        Vocab {
            num_objects: self.num_objects,
            scene_types: self.scene_types,
            slots: if self.slot_indirection { self.num_objects } else { 0 },
            state_variants: self.state_variants,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let (lo, hi) = self.scene_size;
        if lo < 2 || lo > hi {
            return Err(SynthError::Spec("scene_size must satisfy 2 <= min <= max"));
        }
        if hi >= self.num_objects {
            return Err(SynthError::Spec("vocabulary too small for scene size"));
        }
        if self.scene_types == 0 || self.state_variants == 0 {
            return Err(SynthError::Spec("need at least one scene type and state variant"));
        }
        for p in &self.pairs {
            if p.a >= self.num_objects || p.b >= self.num_objects || p.a == p.b {
                return Err(SynthError::Spec("bias pair outside object vocabulary"));
            }
            if !(0.0..=1.0).contains(&p.strength) {
                return Err(SynthError::Spec("bias strength must lie in [0, 1]"));
            }
        }
        for f in [
            self.biased_scene_fraction,
            self.annotation_follow,
            self.text_only_fraction,
            self.question_fraction,
            self.partner_question_fraction,
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(SynthError::Spec("fractions must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    fn partners(&self, biased: bool, a: usize) -> impl Iterator<Item = &BiasPair> {
        self.pairs.iter().filter(move |p| biased && p.a == a)
    }

    fn pair(&self, biased: bool, a: usize, b: usize) -> Option<&BiasPair> {
        self.partners(biased, a).find(|p| p.b == b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Training presence question.
    TrainQuestion,
    TrainCaption,
    /// Training example with the image dropped.
    TextOnly,
    Positive,
    RandomAbsent,
    BiasPaired,
    Caption,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Self::TrainQuestion => "train-question",
            Self::TrainCaption => "train-caption",
            Self::TextOnly => "text-only",
            Self::Positive => "positive",
            Self::RandomAbsent => "random-absent",
            Self::BiasPaired => "bias-paired",
            Self::Caption => "caption",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [
            Self::TrainQuestion,
            Self::TrainCaption,
            Self::TextOnly,
            Self::Positive,
            Self::RandomAbsent,
            Self::BiasPaired,
            Self::Caption,
        ]
        .into_iter()
        .find(|v| v.name() == s)
    }
}

/// Ground truth derived from the scene.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Gold {
    Presence { object: usize, present: bool },
    Caption { objects: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub image_tokens: Vec<TokenId>,
    /// Full prompt, image included.
    pub prompt_tokens: Vec<TokenId>,
    /// Training continuation (may carry the planted annotation habit).
    pub target_tokens: Vec<TokenId>,
    pub gold: Gold,
    pub split: Split,
    pub strategy: Strategy,
}

impl Example {
    pub fn layout(&self, vocab: &Vocab) -> Result<PromptLayout, LayoutError> {
        PromptLayout::from_image_range(self.prompt_tokens.clone(), Vocab::EOS, vocab.image_range())
    }

    pub fn is_question(&self) -> bool {
        matches!(self.gold, Gold::Presence { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

struct Scene {
    scene_type: usize,
    objects: Vec<usize>,
}

struct Gen<'a> {
    spec: &'a SceneSpec,
    vocab: Vocab,
    rng: ChaCha8Rng,
}

impl Gen<'_> {
    fn scene_type(&mut self) -> usize {
        if self.spec.scene_types == 1 || self.rng.random::<f32>() < self.spec.biased_scene_fraction {
            0
        } else {
            self.rng.random_range(1..self.spec.scene_types)
        }
    }

    fn add_partners(&mut self, biased: bool, o: usize, objs: &mut Vec<usize>, k: usize, forbid: &[usize]) {
        let spec = self.spec;
        for p in spec.partners(biased, o) {
            if objs.len() < k
                && !objs.contains(&p.b)
                && !forbid.contains(&p.b)
                && self.rng.random::<f32>() < p.strength
            {
                objs.push(p.b);
            }
        }
    }

    fn scene(&mut self, scene_type: usize, force: Option<usize>, forbid: &[usize]) -> Scene {
        let (lo, hi) = self.spec.scene_size;
        let k = self.rng.random_range(lo..=hi);
        let biased = scene_type == 0;
        let mut objs = Vec::with_capacity(k);
        if let Some(f) = force {
            objs.push(f);
            self.add_partners(biased, f, &mut objs, k, forbid);
        }
        while objs.len() < k {
            let o = self.rng.random_range(0..self.spec.num_objects);
            if objs.contains(&o) || forbid.contains(&o) {
                continue;
            }
            objs.push(o);
            self.add_partners(biased, o, &mut objs, k, forbid);
        }
        Scene {
            scene_type,
            objects: objs,
        }
    }

    fn state_token(&mut self, scene: &Scene, o: usize) -> TokenId {
        let v = self.rng.random_range(0..self.spec.state_variants);
        if scene.objects.contains(&o) {
            self.vocab.present(v)
        } else {
            self.vocab.absent(v)
        }
    }

    fn render(&mut self, scene: &Scene) -> Vec<TokenId> {
        let n = self.spec.num_objects;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let mut toks = vec![self.vocab.scene(scene.scene_type)];
        if !self.spec.slot_indirection {
            for o in order {
                toks.push(self.vocab.glyph(o));
                toks.push(self.state_token(scene, o));
            }
            return toks;
        }
        let mut slot_of: Vec<usize> = (0..n).collect();
        slot_of.shuffle(&mut self.rng);
        for &o in &order {
            toks.push(self.vocab.glyph(o));
            toks.push(self.vocab.slot(slot_of[o]));
        }
        order.shuffle(&mut self.rng);
        for &o in &order {
            toks.push(self.vocab.slot(slot_of[o]));
            toks.push(self.state_token(scene, o));
        }
        toks
    }

    #[allow(clippy::too_many_arguments)]
    fn question(
        &self,
        image: Vec<TokenId>,
        a: usize,
        b: usize,
        present: bool,
        target_yes: bool,
        split: Split,
        strategy: Strategy,
    ) -> Example {
        let mut prompt = vec![Vocab::BOS];
        prompt.extend_from_slice(&image);
        prompt.extend_from_slice(&[Vocab::SEP, self.vocab.object(a), Vocab::Q, self.vocab.object(b)]);
        Example {
            image_tokens: image,
            prompt_tokens: prompt,
            target_tokens: vec![if target_yes { Vocab::YES } else { Vocab::NO }, Vocab::EOS],
            gold: Gold::Presence { object: b, present },
            split,
            strategy,
        }
    }

    /// Objects in mention order: shuffled, each biased-pair partner right
    /// after its anchor when present.
    fn caption_order(&mut self, scene: &Scene) -> Vec<usize> {
        let biased = scene.scene_type == 0;
        let mut order = scene.objects.clone();
        order.shuffle(&mut self.rng);
        let mut out = Vec::with_capacity(order.len());
        for o in order {
            if out.contains(&o) {
                continue;
            }
            out.push(o);
            for p in self.spec.partners(biased, o) {
                if scene.objects.contains(&p.b) && !out.contains(&p.b) {
                    out.push(p.b);
                }
            }
        }
        out
    }

    fn caption(&mut self, scene: &Scene, image: Vec<TokenId>, split: Split, strategy: Strategy) -> Example {
        let mut prompt = vec![Vocab::BOS];
        prompt.extend_from_slice(&image);
        prompt.extend_from_slice(&[Vocab::SEP, Vocab::CAP]);
        let order = self.caption_order(scene);
        let mut target: Vec<TokenId> = order.iter().map(|&o| self.vocab.object(o)).collect();
        target.push(Vocab::EOS);
        Example {
            image_tokens: image,
            prompt_tokens: prompt,
            target_tokens: target,
            gold: Gold::Caption {
                objects: scene.objects.clone(),
            },
            split,
            strategy,
        }
    }

    fn train_example(&mut self) -> Example {
        let t = self.scene_type();
        let scene = self.scene(t, None, &[]);
        let biased = t == 0;
        let text_only = self.rng.random::<f32>() < self.spec.text_only_fraction;
        let image = if text_only { Vec::new() } else { self.render(&scene) };
        if self.rng.random::<f32>() >= self.spec.question_fraction {
            let strategy = if text_only { Strategy::TextOnly } else { Strategy::TrainCaption };
            return self.caption(&scene, image, Split::Train, strategy);
        }
        let a = *scene.objects.choose(&mut self.rng).expect("nonempty scene");
        let partner = self.spec.partners(biased, a).next().map(|p| p.b);
        let b = match partner {
            Some(b) if self.rng.random::<f32>() < self.spec.partner_question_fraction => b,
            _ => loop {
                let o = self.rng.random_range(0..self.spec.num_objects);
                if o != a {
                    break o;
                }
            },
        };
        let present = scene.objects.contains(&b);
        let follow = self
            .spec
            .pair(biased, a, b)
            .map_or(0.0, |p| p.strength * self.spec.annotation_follow);
        let target_yes = present || self.rng.random::<f32>() < follow;
        let strategy = if text_only { Strategy::TextOnly } else { Strategy::TrainQuestion };
        self.question(image, a, b, present, target_yes, Split::Train, strategy)
    }

    fn positive(&mut self) -> Example {
        let t = self.scene_type();
        let scene = self.scene(t, None, &[]);
        let img = self.render(&scene);
        let n = scene.objects.len();
        let i = self.rng.random_range(0..n);
        let j = (i + self.rng.random_range(1..n)) % n;
        self.question(img, scene.objects[i], scene.objects[j], true, true, Split::Test, Strategy::Positive)
    }

    fn bias_paired(&mut self) -> Example {
        let p = *self.spec.pairs.choose(&mut self.rng).expect("pairs nonempty");
        let scene = self.scene(0, Some(p.a), &[p.b]);
        let img = self.render(&scene);
        self.question(img, p.a, p.b, false, false, Split::Test, Strategy::BiasPaired)
    }

    fn random_absent(&mut self) -> Example {
        let t = self.scene_type();
        let scene = self.scene(t, None, &[]);
        let img = self.render(&scene);
        let a = *scene.objects.choose(&mut self.rng).expect("nonempty scene");
        let candidates: Vec<usize> = (0..self.spec.num_objects)
            .filter(|o| !scene.objects.contains(o) && self.spec.pair(t == 0, a, *o).is_none())
            .collect();
        let b = *candidates.choose(&mut self.rng).expect("scene smaller than vocabulary");
        self.question(img, a, b, false, false, Split::Test, Strategy::RandomAbsent)
    }
}

/// Generates `spec.train_examples` training examples and a test split of
/// exactly `n` presence questions (`⌈n/2⌉` positive; negatives split
/// between bias-paired and random-absent, bias-paired taking the smaller
/// half) followed by `spec.test_captions` caption prompts.
pub fn gen_dataset(spec: &SceneSpec, n: usize) -> Result<Dataset, SynthError> {
    spec.validate()?;
    if n == 0 {
        return Err(SynthError::EmptyDataset);
    }
    let mut g = Gen {
        spec,
        vocab: spec.vocab(),
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
    };
    let train = (0..spec.train_examples).map(|_| g.train_example()).collect();

    let negatives = n / 2;
    let positives = n - negatives;
    let bias = if spec.pairs.is_empty() { 0 } else { negatives / 2 };
    let mut test = Vec::with_capacity(n + spec.test_captions);
    for _ in 0..positives {
        test.push(g.positive());
    }
    for _ in 0..bias {
        test.push(g.bias_paired());
    }
    for _ in bias..negatives {
        test.push(g.random_absent());
    }
    for _ in 0..spec.test_captions {
        let t = g.scene_type();
        let scene = g.scene(t, None, &[]);
        let img = g.render(&scene);
        test.push(g.caption(&scene, img, Split::Test, Strategy::Caption));
    }
    Ok(Dataset { train, test })
}
