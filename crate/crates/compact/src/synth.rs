//! Deterministic synthetic fixtures: seeded tiny checkpoints, toy tokenizers,
//! and text corpora. Used by the test suites and handy for demos; nothing here
//! touches the pruning path itself.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensorstore::{Dtype, ModelConfig, TensorRole, TensorView, WeightMap};
use crate::tokenizer::{split_words, BpeTokenizer};

/// The reference tiny architecture used across the test suites.
pub fn tc1_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 10,
        hidden_size: 4,
        intermediate_size: 6,
        num_hidden_layers: 2,
        num_attention_heads: 2,
        num_key_value_heads: 1,
        head_dim: 2,
        tie_word_embeddings: false,
        rms_norm_eps: 1e-6,
        rope_theta: 10_000.0,
    }
}

/// A 10-token tokenizer matching `tc1_config`'s vocabulary size: the bytes
/// of " abcd" plus five merge products.
pub fn tc1_tokenizer() -> BpeTokenizer {
    let b = |s: &str| s.as_bytes().to_vec();
    BpeTokenizer::from_parts(
        vec![
            b(" "),
            b("a"),
            b("b"),
            b("c"),
            b("d"),
            b("ab"),
            b("cd"),
            b("abcd"),
            b(" ab"),
            b(" abcd"),
        ],
        vec![
            (b("a"), b("b")),
            (b("c"), b("d")),
            (b("ab"), b("cd")),
            (b(" "), b("ab")),
            (b(" ab"), b("cd")),
        ],
        vec![],
    )
    .expect("tc1 tokenizer is well-formed")
}

fn fill_uniform(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn f32_to_bf16_bits(x: f32) -> u16 {
    // round-to-nearest-even truncation of the low 16 bits
    let bits = x.to_bits();
    let round = ((bits >> 16) & 1) + 0x7fff;
    ((bits + round) >> 16) as u16
}

fn encode(values: &[f32], dtype: Dtype) -> Vec<u8> {
    match dtype {
        Dtype::F32 => values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        Dtype::Bf16 => values
            .iter()
            .flat_map(|v| f32_to_bf16_bits(*v).to_le_bytes())
            .collect(),
        Dtype::F16 => panic!("synthetic F16 models are not supported"),
    }
}

fn model_impl(cfg: &ModelConfig, seed: u64, with_biases: bool, dtype: Dtype) -> WeightMap {
    cfg.validate().expect("valid config");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.hidden_size;
    let scale = 1.0 / (d as f32).sqrt();
    let mut weights = WeightMap::new();

    let push = |w: &mut WeightMap, role: TensorRole, shape: Vec<usize>, values: Vec<f32>| {
        let data = encode(&values, dtype);
        w.insert(TensorView::new(role.name(), dtype, shape, data).unwrap())
            .unwrap();
    };

    let emb = fill_uniform(&mut rng, cfg.vocab_size * d, 1.0);
    push(
        &mut weights,
        TensorRole::Embedding,
        vec![cfg.vocab_size, d],
        emb,
    );
    if !cfg.tie_word_embeddings {
        let lm = fill_uniform(&mut rng, cfg.vocab_size * d, scale);
        push(
            &mut weights,
            TensorRole::LmHead,
            vec![cfg.vocab_size, d],
            lm,
        );
    }

    let kv = cfg.kv_dim();
    for l in 0..cfg.num_hidden_layers {
        for (role, rows) in [
            (TensorRole::AttnQ(l), d),
            (TensorRole::AttnK(l), kv),
            (TensorRole::AttnV(l), kv),
            (TensorRole::AttnO(l), d),
        ] {
            let vals = fill_uniform(&mut rng, rows * d, scale);
            push(&mut weights, role, vec![rows, d], vals);
        }
        if with_biases {
            for (role, len) in [
                (TensorRole::AttnQBias(l), d),
                (TensorRole::AttnKBias(l), kv),
                (TensorRole::AttnVBias(l), kv),
            ] {
                let vals = fill_uniform(&mut rng, len, 0.1);
                push(&mut weights, role, vec![len], vals);
            }
        }
        let i = cfg.intermediate_size;
        for role in [TensorRole::FfnGate(l), TensorRole::FfnUp(l)] {
            let vals = fill_uniform(&mut rng, i * d, scale);
            push(&mut weights, role, vec![i, d], vals);
        }
        let vals = fill_uniform(&mut rng, d * i, 1.0 / (i as f32).sqrt());
        push(&mut weights, TensorRole::FfnDown(l), vec![d, i], vals);
        for role in [TensorRole::InputNorm(l), TensorRole::PostAttnNorm(l)] {
            let vals: Vec<f32> = (0..d).map(|_| 1.0 + rng.gen_range(-0.2..0.2f32)).collect();
            push(&mut weights, role, vec![d], vals);
        }
    }
    let vals: Vec<f32> = (0..d).map(|_| 1.0 + rng.gen_range(-0.2..0.2f32)).collect();
    push(&mut weights, TensorRole::FinalNorm, vec![d], vals);
    weights
}

/// Seeded random checkpoint matching the config's implied tensor set.
pub fn model(cfg: &ModelConfig, seed: u64) -> WeightMap {
    model_impl(cfg, seed, false, Dtype::F32)
}

/// Same, with q/k/v attention biases present.
pub fn model_with_biases(cfg: &ModelConfig, seed: u64) -> WeightMap {
    model_impl(cfg, seed, true, Dtype::F32)
}

/// Same, stored in bfloat16.
pub fn model_bf16(cfg: &ModelConfig, seed: u64) -> WeightMap {
    model_impl(cfg, seed, false, Dtype::Bf16)
}

/// Random documents over a small skewed alphabet, one byte string per
/// document. Words are space-separated runs of the letters a..d with letter
/// frequencies roughly following a 1/rank law.
pub fn text_corpus(
    n_docs: usize,
    words_per_doc: std::ops::Range<usize>,
    seed: u64,
) -> Vec<Vec<u8>> {
    let letters = *b"abcd";
    // cumulative weights for 1/rank sampling
    let cum = [12.0f64, 18.0, 22.0, 25.0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = Vec::with_capacity(n_docs);
    for _ in 0..n_docs {
        let n_words = rng.gen_range(words_per_doc.clone());
        let mut doc = Vec::new();
        for w in 0..n_words {
            if w > 0 {
                doc.push(b' ');
            }
            let len = rng.gen_range(1..=5);
            for _ in 0..len {
                let x = rng.gen_range(0.0..25.0f64);
                let idx = cum.iter().position(|&c| x < c).unwrap_or(3);
                doc.push(letters[idx]);
            }
        }
        docs.push(doc);
    }
    docs
}

/// Greedy pair-frequency BPE trainer over a corpus. The alphabet is the set
/// of distinct bytes observed; merged tokens are appended in training order,
/// so merge priority equals id order. Stops early if no pair repeats.
pub fn train_tokenizer(corpus: &[Vec<u8>], vocab_size: usize) -> BpeTokenizer {
    use std::collections::HashMap;

    let mut alphabet: Vec<u8> = corpus
        .iter()
        .flat_map(|d| d.iter().copied())
        .collect::<std::collections::BTreeSet<u8>>()
        .into_iter()
        .collect();
    alphabet.sort_unstable();

    let mut vocab: Vec<Vec<u8>> = alphabet.iter().map(|&b| vec![b]).collect();
    let mut merges: Vec<(Vec<u8>, Vec<u8>)> = Vec::new();

    // word -> (symbol sequence, multiplicity)
    let mut words: HashMap<Vec<u8>, u64> = HashMap::new();
    for doc in corpus {
        for w in split_words(doc) {
            *words.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    let mut sequences: Vec<(Vec<Vec<u8>>, u64)> = words
        .into_iter()
        .map(|(w, n)| (w.iter().map(|&b| vec![b]).collect(), n))
        .collect();
    sequences.sort(); // deterministic iteration order

    while vocab.len() < vocab_size {
        let mut counts: HashMap<(Vec<u8>, Vec<u8>), u64> = HashMap::new();
        for (seq, n) in &sequences {
            for pair in seq.windows(2) {
                *counts
                    .entry((pair[0].clone(), pair[1].clone()))
                    .or_insert(0) += n;
            }
        }
        let best = counts
            .into_iter()
            .filter(|(_, n)| *n >= 2)
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
        let Some(((left, right), _)) = best else {
            break;
        };
        let mut joined = left.clone();
        joined.extend_from_slice(&right);
        for (seq, _) in &mut sequences {
            let mut i = 0;
            while i + 1 < seq.len() {
                if seq[i] == left && seq[i + 1] == right {
                    seq[i] = joined.clone();
                    seq.remove(i + 1);
                } else {
                    i += 1;
                }
            }
        }
        vocab.push(joined);
        merges.push((left, right));
    }

    BpeTokenizer::from_parts(vocab, merges, vec![]).expect("trained tokenizer is well-formed")
}

/// A trained tokenizer re-rooted on the full 256-byte alphabet, so any byte
/// string encodes. Merge structure comes from a seeded corpus.
pub fn full_byte_tokenizer(extra_merges: usize, seed: u64) -> BpeTokenizer {
    let corpus = text_corpus(200, 4..12, seed);
    let trained = train_tokenizer(&corpus, 256 + extra_merges);

    let mut vocab: Vec<Vec<u8>> = (0u16..256).map(|b| vec![b as u8]).collect();
    let mut merges: Vec<(Vec<u8>, Vec<u8>)> = Vec::new();
    for (left, right) in trained.merge_pairs().into_iter().take(extra_merges) {
        let mut joined = left.clone();
        joined.extend_from_slice(&right);
        vocab.push(joined);
        merges.push((left, right));
    }
    BpeTokenizer::from_parts(vocab, merges, vec![]).expect("full-byte tokenizer is well-formed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorstore::validate;

    #[test]
    fn tc1_model_validates_and_is_seed_stable() {
        let cfg = tc1_config();
        let a = model(&cfg, 42);
        let b = model(&cfg, 42);
        let c = model(&cfg, 43);
        assert!(validate(&a, &cfg).is_empty());
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn biased_model_validates() {
        let cfg = tc1_config();
        let w = model_with_biases(&cfg, 5);
        assert!(validate(&w, &cfg).is_empty());
        assert!(w.get_role(TensorRole::AttnQBias(0)).is_some());
    }

    #[test]
    fn tc1_tokenizer_matches_the_model_vocabulary() {
        let tok = tc1_tokenizer();
        assert_eq!(tok.vocab_size(), tc1_config().vocab_size);
        assert_eq!(tok.alphabet_floor(), 5);
        let ids = tok.encode(b"ab cd").unwrap();
        assert_eq!(tok.decode(&ids).unwrap(), b"ab cd");
    }

    #[test]
    fn trained_tokenizer_round_trips_its_corpus() {
        let corpus = text_corpus(50, 3..8, 9);
        let tok = train_tokenizer(&corpus, 40);
        assert!(tok.vocab_size() > 5);
        for doc in &corpus {
            let ids = tok.encode(doc).unwrap();
            assert_eq!(&tok.decode(&ids).unwrap(), doc);
        }
    }

    #[test]
    fn full_byte_tokenizer_covers_every_byte() {
        let tok = full_byte_tokenizer(50, 3);
        assert!(tok.vocab_size() >= 256);
        assert_eq!(tok.alphabet_floor(), 256);
        let junk: Vec<u8> = (0..=255u8).collect();
        let ids = tok.encode(&junk).unwrap();
        assert_eq!(tok.decode(&ids).unwrap(), junk);
    }
}
