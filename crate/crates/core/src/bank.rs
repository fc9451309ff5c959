//! The attribute bank: `N` trainable (key, prompt) pairs, per-image top-C
//! selection by cosine distance, and composition of the text input.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{cosine_similarity, AutodiffError, Tape, Tensor, Var};
use crate::encoders::TokenSequence;
use crate::rng::SplitMix64;

/// Smallest key norm tolerated after init or an optimizer step.
pub const KEY_NORM_FLOOR: f64 = 1e-9;

/// Standard deviation of prompt-token initialisation.
pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BankError {
    #[error("bank dimensions must be positive (n={n}, m={m}, d={d})")]
    BadDimensions { n: usize, m: usize, d: usize },
    #[error("selection size {c} outside 1..={n}")]
    SelectionOutOfRange { c: usize, n: usize },
    #[error("vector of length {got} does not match bank dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("key {index} collapsed to norm {norm:e}")]
    DegenerateKey { index: usize, norm: f64 },
    #[error("selection index {index} invalid for bank of size {n}")]
    BadSelection { index: usize, n: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeBank {
    n: usize,
    m: usize,
    d: usize,
    /// `n` rows of length `d`.
    keys: Vec<Vec<f64>>,
    /// `n` matrices of shape `[m, d]`, row-major.
    prompts: Vec<Vec<f64>>,
}

impl AttributeBank {
    /// Keys ~ N(0, 1/d) per entry, prompts ~ N(0, 0.02²).
    pub fn init(n: usize, m: usize, d: usize, seed: u64) -> Result<Self, BankError> {
        if n == 0 || m == 0 || d == 0 {
            return Err(BankError::BadDimensions { n, m, d });
        }
        let mut krng = SplitMix64::derive(seed, "bank.keys");
        let mut prng = SplitMix64::derive(seed, "bank.prompts");
        let ks = 1.0 / (d as f64).sqrt();
        let keys = (0..n).map(|_| krng.normal_vec(d, ks)).collect();
        let prompts = (0..n)
            .map(|_| prng.normal_vec(m * d, PROMPT_INIT_STD))
            .collect();
        let bank = Self {
            n,
            m,
            d,
            keys,
            prompts,
        };
        bank.check_key_norms()?;
        Ok(bank)
    }

    /// Build from explicit values; used by checkpoints and tests.
    pub fn from_parts(
        m: usize,
        keys: Vec<Vec<f64>>,
        prompts: Vec<Vec<f64>>,
    ) -> Result<Self, BankError> {
        let n = keys.len();
        let d = keys.first().map_or(0, Vec::len);
        if n == 0 || m == 0 || d == 0 || prompts.len() != n {
            return Err(BankError::BadDimensions { n, m, d });
        }
        for k in &keys {
            if k.len() != d {
                return Err(BankError::DimensionMismatch {
                    expected: d,
                    got: k.len(),
                });
            }
        }
        for p in &prompts {
            if p.len() != m * d {
                return Err(BankError::DimensionMismatch {
                    expected: m * d,
                    got: p.len(),
                });
            }
        }
        Ok(Self {
            n,
            m,
            d,
            keys,
            prompts,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn key(&self, i: usize) -> &[f64] {
        &self.keys[i]
    }

    pub fn keys(&self) -> &[Vec<f64>] {
        &self.keys
    }

    pub fn key_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.keys[i]
    }

    /// Prompt `i` as a row-major `[m, d]` slice.
    pub fn prompt(&self, i: usize) -> &[f64] {
        &self.prompts[i]
    }

    pub fn prompt_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.prompts[i]
    }

    pub fn prompt_tensor(&self, i: usize) -> Tensor {
        Tensor::matrix(self.m, self.d, self.prompts[i].clone()).expect("bank shape")
    }

    pub fn check_key_norms(&self) -> Result<(), BankError> {
        for (index, k) in self.keys.iter().enumerate() {
            let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm >= KEY_NORM_FLOOR) {
                return Err(BankError::DegenerateKey { index, norm });
            }
        }
        Ok(())
    }

    /// Bitwise fingerprint of every parameter; equal iff bit-identical.
    pub fn fingerprint(&self) -> Vec<u64> {
        self.keys
            .iter()
            .chain(&self.prompts)
            .flatten()
            .map(|v| v.to_bits())
            .collect()
    }
}

/// Cosine distance `1 - cos(z, key)`, in `[0, 2]`.
pub fn score(z: &[f64], key: &[f64]) -> Result<f64, BankError> {
    if z.len() != key.len() {
        return Err(BankError::DimensionMismatch {
            expected: z.len(),
            got: key.len(),
        });
    }
    if !z.iter().chain(key).all(|v| v.is_finite()) {
        return Err(BankError::NonFinite("score"));
    }
    Ok(1.0 - cosine_similarity(z, key))
}

/// The `c` keys closest to one image embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Bank indices, nearest first.
    pub indices: Vec<usize>,
    /// Matching distances, non-decreasing.
    pub distances: Vec<f64>,
}

impl Selection {
    pub fn contains(&self, i: usize) -> bool {
        self.indices.contains(&i)
    }
}

/// Top-C minimal cosine distances; ties go to the lower index.
///
/// Runs outside any tape: the choice itself carries no gradient.
pub fn select_top_c(z: &[f64], bank: &AttributeBank, c: usize) -> Result<Selection, BankError> {
    if c == 0 || c > bank.n {
        return Err(BankError::SelectionOutOfRange { c, n: bank.n });
    }
    if z.len() != bank.d {
        return Err(BankError::DimensionMismatch {
            expected: bank.d,
            got: z.len(),
        });
    }
    let mut scored = bank
        .keys
        .iter()
        .enumerate()
        .map(|(i, k)| score(z, k).map(|s| (s, i)))
        .collect::<Result<Vec<_>, _>>()?;
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.truncate(c);
    Ok(Selection {
        indices: scored.iter().map(|p| p.1).collect(),
        distances: scored.iter().map(|p| p.0).collect(),
    })
}

/// Lazily registers bank parameters on one tape, at most once each.
#[derive(Debug)]
pub struct BankVars {
    trainable: bool,
    keys: Vec<Option<Var>>,
    prompts: Vec<Option<Var>>,
}

impl BankVars {
    /// Keys and prompts become trainable leaves.
    pub fn trainable(n: usize) -> Self {
        Self {
            trainable: true,
            keys: vec![None; n],
            prompts: vec![None; n],
        }
    }

    /// Keys and prompts become constants (inference).
    pub fn frozen(n: usize) -> Self {
        Self {
            trainable: false,
            ..Self::trainable(n)
        }
    }

    fn register(&self, tape: &mut Tape, t: Tensor) -> Var {
        if self.trainable {
            tape.leaf(t)
        } else {
            tape.constant(t)
        }
    }

    pub fn key(&mut self, tape: &mut Tape, bank: &AttributeBank, i: usize) -> Var {
        if let Some(v) = self.keys[i] {
            return v;
        }
        let v = self.register(tape, Tensor::vector(bank.keys[i].clone()));
        self.keys[i] = Some(v);
        v
    }

    pub fn prompt(&mut self, tape: &mut Tape, bank: &AttributeBank, i: usize) -> Var {
        if let Some(v) = self.prompts[i] {
            return v;
        }
        let v = self.register(tape, bank.prompt_tensor(i));
        self.prompts[i] = Some(v);
        v
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn registered_key(&self, i: usize) -> Option<Var> {
        self.keys[i]
    }

    pub fn registered_prompt(&self, i: usize) -> Option<Var> {
        self.prompts[i]
    }
}

/// `P_{j_1} ‖ … ‖ P_{j_C} ‖ class tokens` as a `[C·M + k, D]` node.
///
/// Prompt rows are bank leaves (trainable when `vars` is trainable); the
/// class-token node is whatever the caller registered, normally a constant.
pub fn compose_text_input(
    tape: &mut Tape,
    vars: &mut BankVars,
    bank: &AttributeBank,
    sel: &Selection,
    class_tokens: Var,
) -> Result<Var, BankError> {
    let cls_shape = tape.value(class_tokens).shape().to_vec();
    if cls_shape.len() != 2 || cls_shape[1] != bank.d {
        return Err(BankError::DimensionMismatch {
            expected: bank.d,
            got: *cls_shape.last().unwrap_or(&0),
        });
    }
    let mut parts = Vec::with_capacity(sel.indices.len() + 1);
    for &i in &sel.indices {
        if i >= bank.n {
            return Err(BankError::BadSelection { index: i, n: bank.n });
        }
        parts.push(vars.prompt(tape, bank, i));
    }
    parts.push(class_tokens);
    Ok(tape.concat(&parts)?)
}

/// Value-level composition, for inspection and tests.
pub fn compose_tokens(
    bank: &AttributeBank,
    sel: &Selection,
    class_tokens: &TokenSequence,
) -> Result<TokenSequence, BankError> {
    let mut tape = Tape::new();
    let mut vars = BankVars::frozen(bank.n);
    let cls = tape.constant(class_tokens.tensor().clone());
    let seq = compose_text_input(&mut tape, &mut vars, bank, sel, cls)?;
    Ok(TokenSequence::from_tensor(tape.value(seq).clone()).expect("concat yields a matrix"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank_from_keys(keys: Vec<Vec<f64>>, m: usize) -> AttributeBank {
        let d = keys[0].len();
        let n = keys.len();
        let prompts = (0..n)
            .map(|i| (0..m * d).map(|j| (i * 100 + j) as f64).collect())
            .collect();
        AttributeBank::from_parts(m, keys, prompts).unwrap()
    }

    #[test]
    fn init_is_deterministic_with_expected_shapes() {
        let a = AttributeBank::init(10, 12, 16, 3).unwrap();
        let b = AttributeBank::init(10, 12, 16, 3).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.keys().len(), 10);
        assert!(a.keys().iter().all(|k| k.len() == 16));
        assert_eq!((0..10).map(|i| a.prompt(i).len()).sum::<usize>(), 10 * 12 * 16);
        assert_eq!(a.prompt_tensor(0).shape(), &[12, 16]);
        assert_ne!(a.fingerprint(), AttributeBank::init(10, 12, 16, 4).unwrap().fingerprint());
    }

    #[test]
    fn init_rejects_zero_dimensions() {
        assert_eq!(
            AttributeBank::init(0, 1, 1, 0),
            Err(BankError::BadDimensions { n: 0, m: 1, d: 1 })
        );
        assert!(AttributeBank::init(1, 0, 1, 0).is_err());
        assert!(AttributeBank::init(1, 1, 0, 0).is_err());
    }

    #[test]
    fn score_reference_points() {
        assert!(score(&[0.3, 0.4], &[0.3, 0.4]).unwrap().abs() < 1e-12);
        assert!((score(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((score(&[1.0, 0.0], &[-1.0, 0.0]).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(score(&[f64::NAN, 0.0], &[1.0, 0.0]), Err(BankError::NonFinite("score")));
    }

    #[test]
    fn orthogonal_antipodal_selection() {
        let bank = bank_from_keys(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]], 1);
        let sel = select_top_c(&[1.0, 0.0], &bank, 2).unwrap();
        assert_eq!(sel.indices, vec![0, 1]);
        assert!(sel.distances[0].abs() < 1e-12);
        assert!((sel.distances[1] - 1.0).abs() < 1e-12);
        let all = select_top_c(&[1.0, 0.0], &bank, 3).unwrap();
        assert_eq!(all.indices, vec![0, 1, 2]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let bank = bank_from_keys(vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]], 1);
        let sel = select_top_c(&[1.0, 0.0], &bank, 1).unwrap();
        assert_eq!(sel.indices, vec![1]);
    }

    #[test]
    fn selection_size_is_validated() {
        let bank = AttributeBank::init(4, 2, 3, 0).unwrap();
        assert_eq!(
            select_top_c(&[1.0, 0.0, 0.0], &bank, 0),
            Err(BankError::SelectionOutOfRange { c: 0, n: 4 })
        );
        assert_eq!(
            select_top_c(&[1.0, 0.0, 0.0], &bank, 5),
            Err(BankError::SelectionOutOfRange { c: 5, n: 4 })
        );
    }

    #[test]
    fn compose_single_prompt_and_class() {
        let bank = bank_from_keys(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 1);
        let sel = select_top_c(&[0.0, 1.0], &bank, 1).unwrap();
        let cls = TokenSequence::single(vec![9.0, 9.0]).unwrap();
        let seq = compose_tokens(&bank, &sel, &cls).unwrap();
        assert_eq!(seq.len(), 2);
        assert_eq!(seq.token(0), bank.prompt(1));
        assert_eq!(seq.token(1), &[9.0, 9.0]);
    }

    #[test]
    fn compose_length_for_default_sizes() {
        let bank = AttributeBank::init(10, 12, 8, 1).unwrap();
        let z = vec![0.1; 8];
        let sel = select_top_c(&z, &bank, 3).unwrap();
        let cls = TokenSequence::single(vec![1.0; 8]).unwrap();
        assert_eq!(compose_tokens(&bank, &sel, &cls).unwrap().len(), 37);
    }

    #[test]
    fn compose_marks_only_prompts_trainable() {
        let bank = AttributeBank::init(3, 2, 4, 1).unwrap();
        let sel = select_top_c(&[1.0, 0.0, 0.0, 0.0], &bank, 2).unwrap();
        let mut tape = Tape::new();
        let mut vars = BankVars::trainable(3);
        let cls = tape.constant(Tensor::matrix(1, 4, vec![1.0; 4]).unwrap());
        let seq = compose_text_input(&mut tape, &mut vars, &bank, &sel, cls).unwrap();
        let s = tape.sum(seq).unwrap();
        let g = tape.backward(s).unwrap();
        for &i in &sel.indices {
            let p = vars.registered_prompt(i).unwrap();
            assert!(tape.requires_grad(p));
            assert!(g.wrt(p).data().iter().all(|v| *v == 1.0));
        }
        assert!(!tape.requires_grad(cls));
        assert!(g.get(cls).is_none());
    }

    #[test]
    fn compose_rejects_class_token_dimension() {
        let bank = AttributeBank::init(3, 2, 4, 1).unwrap();
        let sel = select_top_c(&[1.0, 0.0, 0.0, 0.0], &bank, 1).unwrap();
        let cls = TokenSequence::single(vec![1.0; 5]).unwrap();
        assert!(matches!(
            compose_tokens(&bank, &sel, &cls),
            Err(BankError::DimensionMismatch { expected: 4, got: 5 })
        ));
    }
}
