//! Word-level vocabulary, tokenization with `[CLS]`/`[SEP]`, and masking.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const NUM_SPECIALS: usize = 5;

const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocab {
    token_to_id: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.token_to_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_to_id.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token_to_id(&self) -> &BTreeMap<String, usize> {
        &self.token_to_id
    }

    /// Rebuilds from a serialized map, checking the special-token layout.
    pub fn from_map(token_to_id: BTreeMap<String, usize>) -> Result<Self> {
        for (i, name) in SPECIAL_NAMES.iter().enumerate() {
            if token_to_id.get(*name) != Some(&i) {
                return Err(Error::InvalidParameter(format!("vocab must map {name} to {i}")));
            }
        }
        let n = token_to_id.len();
        let mut seen = vec![false; n];
        for &id in token_to_id.values() {
            if id >= n || seen[id] {
                return Err(Error::InvalidParameter("vocab ids must be a permutation of 0..n".into()));
            }
            seen[id] = true;
        }
        Ok(Self { token_to_id })
    }
}

/// Lowercased word and single-punctuation-mark tokens.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() && !ch.is_control() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Keeps the `max_size - 5` most frequent words (ties lexicographic).
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Vocab> {
    if max_size < NUM_SPECIALS + 1 {
        return Err(Error::VocabTooSmall(max_size));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for doc in corpus {
        for w in split_words(doc.as_ref()) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut token_to_id: BTreeMap<String, usize> = SPECIAL_NAMES
        .iter()
        .enumerate()
        .map(|(i, s)| (s.to_string(), i))
        .collect();
    for (w, _) in ranked.into_iter().take(max_size - NUM_SPECIALS) {
        let id = token_to_id.len();
        token_to_id.entry(w).or_insert(id);
    }
    Ok(Vocab { token_to_id })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    /// Number of content tokens between `[CLS]` and `[SEP]`.
    pub fn content_len(&self) -> usize {
        self.ids.len() - 2
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub ids: Vec<usize>,
    pub mask_flags: Vec<bool>,
}

impl MaskedSequence {
    pub fn masked_count(&self) -> usize {
        self.mask_flags.iter().filter(|&&m| m).count()
    }

    pub fn unmasked(seq: &TokenSequence) -> Self {
        Self {
            ids: seq.ids.clone(),
            mask_flags: vec![false; seq.ids.len()],
        }
    }
}

/// `[CLS] w1 .. wn [SEP]`, keeping the first `max_len - 2` words.
pub fn tokenize(vocab: &Vocab, text: &str, max_len: usize) -> TokenSequence {
    let budget = max_len.saturating_sub(2);
    let mut ids = Vec::with_capacity(budget.min(64) + 2);
    ids.push(CLS);
    ids.extend(split_words(text).iter().take(budget).map(|w| vocab.id(w)));
    ids.push(SEP);
    TokenSequence { ids }
}

/// Replaces each content token by `[MASK]` independently with probability `p`.
pub fn mask_tokens<R: Rng + ?Sized>(seq: &TokenSequence, p: f64, rng: &mut R) -> MaskedSequence {
    let mut ids = seq.ids.clone();
    let mut mask_flags = vec![false; ids.len()];
    let last = ids.len() - 1;
    for i in 1..last {
        if rng.gen::<f64>() < p {
            ids[i] = MASK;
            mask_flags[i] = true;
        }
    }
    MaskedSequence { ids, mask_flags }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vocab_contents_and_determinism() {
        let v = build_vocab(&["a b", "b c"], 8).unwrap();
        assert_eq!(v.len(), 8);
        for w in ["a", "b", "c", "[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]"] {
            assert!(v.contains(w), "{w}");
        }
        assert_eq!(v.id("[PAD]"), 0);
        assert_eq!(v.id("b"), 5, "most frequent word first");
        assert_eq!(v, build_vocab(&["a b", "b c"], 8).unwrap());
        assert!(matches!(build_vocab(&["a"], 5), Err(Error::VocabTooSmall(5))));
        assert!(matches!(build_vocab::<&str>(&[], 8), Err(Error::EmptyCorpus)));
        let small = build_vocab(&["a b", "b c"], 6).unwrap();
        assert_eq!(small.len(), 6);
        assert_eq!(small.id("a"), UNK);
    }

    #[test]
    fn vocab_json_round_trip() {
        let v = build_vocab(&["x y, z."], 20).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(Vocab::from_map(back.token_to_id().clone()).unwrap(), v);
    }

    #[test]
    fn tokenization() {
        let v = build_vocab(&["a b"], 10).unwrap();
        assert_eq!(tokenize(&v, "", 32).ids, vec![CLS, SEP]);
        let t = tokenize(&v, "A b", 32);
        assert_eq!(t.ids, vec![CLS, v.id("a"), v.id("b"), SEP]);
        assert_eq!(t.content_len(), 2);
        let long = vec!["a"; 100].join(" ");
        assert_eq!(tokenize(&v, &long, 10).content_len(), 8);
        assert_eq!(tokenize(&v, "zzz", 10).ids[1], UNK);
        assert_eq!(split_words("Hello, world!"), vec!["hello", ",", "world", "!"]);
    }

    #[test]
    fn masking_extremes() {
        let seq = TokenSequence { ids: vec![CLS, 7, 8, 9, SEP] };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = mask_tokens(&seq, 0.0, &mut rng);
        assert_eq!(m.ids, seq.ids);
        assert!(m.mask_flags.iter().all(|f| !f));
        let m = mask_tokens(&seq, 1.0, &mut rng);
        assert_eq!(m.ids, vec![CLS, MASK, MASK, MASK, SEP]);
        assert_eq!(m.masked_count(), 3);
    }

    #[test]
    fn masking_is_reproducible() {
        let seq = TokenSequence { ids: [CLS].into_iter().chain(10..40).chain([SEP]).collect() };
        let a = mask_tokens(&seq, 0.5, &mut ChaCha8Rng::seed_from_u64(9));
        let b = mask_tokens(&seq, 0.5, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        for (i, (&id, &f)) in a.ids.iter().zip(&a.mask_flags).enumerate() {
            assert_eq!(f, id == MASK, "position {i}");
        }
    }
}
