//! Causal and counterfactual attention validity.
//!
//! Positions are 0-based throughout. A mask always covers the whole current
//! sequence: query row `q` is the token at absolute position `q`, and key
//! column `k` the token at position `k`.
//!
//! The counterfactual variant keeps a causal entry `(q, k)` only when neither
//! `q` nor `k` is an image position. Its image query rows therefore have no
//! valid key at all; those rows are flagged as *blanked* so the forward pass
//! can emit a zero attention output for them instead of failing.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{LayoutError, MaskError};
use crate::tensor::MASK_SENTINEL;

pub type TokenId = u32;

/// A prompt together with the positions holding image tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLayout {
    tokens: Vec<TokenId>,
    image_positions: Vec<usize>,
    eos_token: TokenId,
}

impl PromptLayout {
    /// `image_tokens` is the reserved id range every token at an image
    /// position must fall in.
    pub fn new(
        tokens: Vec<TokenId>,
        image_positions: Vec<usize>,
        eos_token: TokenId,
        image_tokens: Range<TokenId>,
    ) -> Result<Self, LayoutError> {
        if tokens.is_empty() {
            return Err(LayoutError::Empty);
        }
        for w in image_positions.windows(2) {
            if w[0] >= w[1] {
                return Err(LayoutError::Unsorted);
            }
        }
        for &p in &image_positions {
            let Some(&tok) = tokens.get(p) else {
                return Err(LayoutError::PositionOutOfRange {
                    position: p,
                    len: tokens.len(),
                });
            };
            if !image_tokens.contains(&tok) {
                return Err(LayoutError::NotImageToken {
                    position: p,
                    token: tok,
                });
            }
        }
        Ok(Self {
            tokens,
            image_positions,
            eos_token,
        })
    }

    /// Derives the image positions from the reserved id range.
    pub fn from_image_range(
        tokens: Vec<TokenId>,
        eos_token: TokenId,
        image_tokens: Range<TokenId>,
    ) -> Result<Self, LayoutError> {
        let positions = tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| image_tokens.contains(t))
            .map(|(i, _)| i)
            .collect();
        Self::new(tokens, positions, eos_token, image_tokens)
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn image_positions(&self) -> &[usize] {
        &self.image_positions
    }

    pub fn eos_token(&self) -> TokenId {
        self.eos_token
    }

    /// Same layout with different token ids at the same positions.
    ///
    /// Used by perturbation references; the caller keeps image positions in
    /// the image range.
    pub fn with_tokens(&self, tokens: Vec<TokenId>) -> Self {
        assert_eq!(tokens.len(), self.tokens.len());
        Self {
            tokens,
            image_positions: self.image_positions.clone(),
            eos_token: self.eos_token,
        }
    }

    pub fn image_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.tokens.len()];
        for &p in &self.image_positions {
            flags[p] = true;
        }
        flags
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskVariant {
    Causal,
    Counterfactual,
}

/// Dense boolean query × key validity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityMask {
    queries: usize,
    keys: usize,
    valid: Vec<bool>,
    blanked: Vec<bool>,
}

impl ValidityMask {
    pub fn query_count(&self) -> usize {
        self.queries
    }

    pub fn key_count(&self) -> usize {
        self.keys
    }

    #[inline]
    pub fn is_valid(&self, q: usize, k: usize) -> bool {
        self.valid[q * self.keys + k]
    }

    /// True for rows deliberately left without any valid key.
    pub fn is_blanked(&self, q: usize) -> bool {
        self.blanked[q]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.valid[q * self.keys..(q + 1) * self.keys]
    }

    /// Appends the query row (and key column) for the next generated
    /// position. For the counterfactual variant the image columns stay
    /// invalid in the new row.
    pub fn extend_in_place(
        &mut self,
        new_query_position: usize,
        image_positions: &[usize],
        variant: MaskVariant,
    ) -> Result<(), MaskError> {
        if new_query_position != self.keys {
            return Err(MaskError::SequenceGap {
                expected: self.keys,
                actual: new_query_position,
            });
        }
        if image_positions.contains(&new_query_position) {
            return Err(MaskError::GeneratedImagePosition(new_query_position));
        }
        let old_keys = self.keys;
        let keys = old_keys + 1;
        let mut valid = Vec::with_capacity((self.queries + 1) * keys);
        for q in 0..self.queries {
            valid.extend_from_slice(&self.valid[q * old_keys..(q + 1) * old_keys]);
            valid.push(false);
        }
        valid.resize((self.queries + 1) * keys, true);
        if variant == MaskVariant::Counterfactual {
            let row = self.queries * keys;
            for &p in image_positions {
                if p >= old_keys {
                    return Err(MaskError::IndexOutOfRange {
                        position: p,
                        len: old_keys,
                    });
                }
                valid[row + p] = false;
            }
        }
        self.valid = valid;
        self.blanked.push(false);
        self.queries += 1;
        self.keys = keys;
        Ok(())
    }
}

/// Lower-triangular validity over `s` positions.
pub fn build_causal_mask(s: usize) -> ValidityMask {
    let mut valid = vec![false; s * s];
    for q in 0..s {
        for k in 0..=q {
            valid[q * s + k] = true;
        }
    }
    ValidityMask {
        queries: s,
        keys: s,
        valid,
        blanked: vec![false; s],
    }
}

/// Restricts `causal` so that image positions are neither queries nor keys.
pub fn build_cf_mask(
    causal: &ValidityMask,
    image_positions: &[usize],
) -> Result<ValidityMask, MaskError> {
    let mut is_image = vec![false; causal.keys.max(causal.queries)];
    for &p in image_positions {
        if p >= causal.keys || p >= causal.queries {
            return Err(MaskError::IndexOutOfRange {
                position: p,
                len: causal.keys.min(causal.queries),
            });
        }
        is_image[p] = true;
    }
    let mut out = causal.clone();
    for q in 0..causal.queries {
        for k in 0..causal.keys {
            if is_image[q] || is_image[k] {
                out.valid[q * causal.keys + k] = false;
            }
        }
        if is_image[q] {
            out.blanked[q] = true;
        }
    }
    Ok(out)
}

/// Pure form of [`ValidityMask::extend_in_place`].
pub fn extend_mask(
    mask: &ValidityMask,
    new_query_position: usize,
    image_positions: &[usize],
    variant: MaskVariant,
) -> Result<ValidityMask, MaskError> {
    let mut out = mask.clone();
    out.extend_in_place(new_query_position, image_positions, variant)?;
    Ok(out)
}

/// `0` where valid, [`MASK_SENTINEL`] where blocked.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveMask {
    queries: usize,
    keys: usize,
    values: Vec<f32>,
    blanked: Vec<bool>,
}

impl AdditiveMask {
    pub fn query_count(&self) -> usize {
        self.queries
    }

    pub fn key_count(&self) -> usize {
        self.keys
    }

    pub fn row(&self, q: usize) -> &[f32] {
        &self.values[q * self.keys..(q + 1) * self.keys]
    }

    pub fn is_blanked(&self, q: usize) -> bool {
        self.blanked[q]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

pub fn to_additive(mask: &ValidityMask) -> AdditiveMask {
    rows_to_additive(mask, 0..mask.queries)
}

/// Additive form of a contiguous block of query rows, e.g. the newest row
/// during incremental decoding.
pub fn rows_to_additive(mask: &ValidityMask, rows: Range<usize>) -> AdditiveMask {
    let keys = mask.keys;
    let values = mask.valid[rows.start * keys..rows.end * keys]
        .iter()
        .map(|&v| if v { 0.0 } else { MASK_SENTINEL })
        .collect();
    AdditiveMask {
        queries: rows.len(),
        keys,
        values,
        blanked: mask.blanked[rows].to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;

    fn valid_set(m: &ValidityMask) -> BTreeSet<(usize, usize)> {
        let mut s = BTreeSet::new();
        for q in 0..m.query_count() {
            for k in 0..m.key_count() {
                if m.is_valid(q, k) {
                    // report 1-based pairs, matching the usual notation
                    s.insert((q + 1, k + 1));
                }
            }
        }
        s
    }

    #[test]
    fn causal_small() {
        assert_eq!(valid_set(&build_causal_mask(1)), [(1, 1)].into());
        assert_eq!(
            valid_set(&build_causal_mask(3)),
            [(1, 1), (2, 1), (2, 2), (3, 1), (3, 2), (3, 3)].into()
        );
        assert!(!build_causal_mask(2).is_valid(0, 1));
    }

    #[test]
    fn cf_mask_by_hand() {
        let cf = build_cf_mask(&build_causal_mask(4), &[1]).unwrap();
        assert_eq!(
            valid_set(&cf),
            [(1, 1), (3, 1), (3, 3), (4, 1), (4, 3), (4, 4)].into()
        );
        assert!(cf.is_blanked(1));
        assert!(!cf.is_blanked(0));
    }

    #[test]
    fn cf_mask_degenerate_sets() {
        let causal = build_causal_mask(5);
        assert_eq!(build_cf_mask(&causal, &[]).unwrap(), causal);
        let all = build_cf_mask(&causal, &[0, 1, 2, 3, 4]).unwrap();
        assert_eq!(all.valid_count(), 0);
        assert!(matches!(
            build_cf_mask(&causal, &[5]),
            Err(MaskError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn extend_cf_by_hand() {
        let cf = build_cf_mask(&build_causal_mask(4), &[1]).unwrap();
        let ext = extend_mask(&cf, 4, &[1], MaskVariant::Counterfactual).unwrap();
        let row: Vec<usize> = (0..5).filter(|&k| ext.is_valid(4, k)).map(|k| k + 1).collect();
        assert_eq!(row, [1, 3, 4, 5]);
        assert_eq!(ext.query_count(), 5);
        assert_eq!(ext.key_count(), 5);
    }

    #[test]
    fn extend_causal_and_gap() {
        let ext = extend_mask(&build_causal_mask(4), 4, &[1], MaskVariant::Causal).unwrap();
        assert!((0..5).all(|k| ext.is_valid(4, k)));
        let err = extend_mask(&build_causal_mask(4), 6, &[], MaskVariant::Causal).unwrap_err();
        assert_eq!(
            err,
            MaskError::SequenceGap {
                expected: 4,
                actual: 6
            }
        );
    }

    #[test]
    fn additive_conversion() {
        let all = to_additive(&build_causal_mask(1));
        assert_eq!(all.values(), &[0.0]);
        let m = build_causal_mask(2);
        assert_eq!(to_additive(&m).row(0), &[0.0, MASK_SENTINEL]);
        let blank = build_cf_mask(&m, &[0, 1]).unwrap();
        assert_eq!(to_additive(&blank).row(1), &[MASK_SENTINEL, MASK_SENTINEL]);
        let full = {
            let mut v = build_causal_mask(2);
            v.valid[1] = true;
            v
        };
        assert!(to_additive(&full).values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn layout_validation() {
        let img = 10..20;
        assert!(PromptLayout::new(vec![1, 12, 3], vec![1], 0, img.clone()).is_ok());
        assert_eq!(
            PromptLayout::new(vec![1, 2, 3], vec![1], 0, img.clone()),
            Err(LayoutError::NotImageToken {
                position: 1,
                token: 2
            })
        );
        assert!(matches!(
            PromptLayout::new(vec![1, 2, 3], vec![3], 0, img.clone()),
            Err(LayoutError::PositionOutOfRange { .. })
        ));
        let l = PromptLayout::from_image_range(vec![1, 12, 13, 2], 0, img).unwrap();
        assert_eq!(l.image_positions(), &[1, 2]);
    }
}
