//! Input builders shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use treeattn::corpus::{Example, SentencePair, TokenizedDocument};

/// Random token ids in `2..vocab`.
pub fn tokens(n: usize, vocab: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(2..vocab)).collect()
}

pub fn pair(n: usize, vocab: usize, seed: u64) -> Example {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Example::Pair(SentencePair {
        label: 0,
        premise: tokens(n, vocab, &mut rng),
        hypothesis: tokens(n, vocab, &mut rng),
    })
}

/// `sentences` sentences of `words` tokens each.
pub fn document(sentences: usize, words: usize, vocab: usize, seed: u64) -> Example {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Example::Document(TokenizedDocument {
        label: 0,
        sentences: (0..sentences)
            .map(|_| tokens(words, vocab, &mut rng))
            .collect(),
    })
}
