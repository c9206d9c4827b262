//! Property tests for tokenizer pruning: closure, no ghost ids, round trips,
//! churn monotonicity, and prefix stability.

use std::sync::OnceLock;

use proptest::prelude::*;

use compact::synth;
use compact::tokenizer::{retok_stats, BpeTokenizer};

fn trained() -> &'static BpeTokenizer {
    static TOK: OnceLock<BpeTokenizer> = OnceLock::new();
    TOK.get_or_init(|| {
        let corpus = synth::text_corpus(300, 4..12, 42);
        synth::train_tokenizer(&corpus, 80)
    })
}

fn full_byte() -> &'static BpeTokenizer {
    static TOK: OnceLock<BpeTokenizer> = OnceLock::new();
    TOK.get_or_init(|| synth::full_byte_tokenizer(60, 42))
}

fn alphabet_text(max_len: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(
        prop::sample::select(vec![b' ', b'a', b'b', b'c', b'd']),
        0..max_len,
    )
}

proptest! {
    #[test]
    fn round_trip_over_the_alphabet(text in alphabet_text(60)) {
        let tok = trained();
        let ids = tok.encode(&text).unwrap();
        prop_assert_eq!(tok.decode(&ids).unwrap(), text);
    }

    #[test]
    fn round_trip_over_arbitrary_bytes(text in prop::collection::vec(any::<u8>(), 0..50)) {
        let tok = full_byte();
        let ids = tok.encode(&text).unwrap();
        prop_assert_eq!(tok.decode(&ids).unwrap(), text);
    }

    #[test]
    fn pruned_tokenizers_never_emit_ghost_ids(
        text in alphabet_text(60),
        cut in 0usize..70,
    ) {
        let tok = trained();
        let v_prime = tok.vocab_size().saturating_sub(cut).max(tok.alphabet_floor());
        let pruned = tok.prune(&tok.rare_set(v_prime).unwrap()).unwrap();

        let ids = pruned.encode(&text).unwrap();
        for id in ids {
            prop_assert!((id as usize) < v_prime, "id {} >= {}", id, v_prime);
        }
        // the pruned tokenizer still round-trips
        let ids = pruned.encode(&text).unwrap();
        prop_assert_eq!(pruned.decode(&ids).unwrap(), text);
    }

    #[test]
    fn prefix_stable_words_encode_identically(
        text in alphabet_text(40),
        cut in 0usize..70,
    ) {
        // whenever the original encoding uses no rare id, pruning cannot
        // change it (ids are in merge-creation order for trained tokenizers)
        let tok = trained();
        let v_prime = tok.vocab_size().saturating_sub(cut).max(tok.alphabet_floor());
        let pruned = tok.prune(&tok.rare_set(v_prime).unwrap()).unwrap();

        let original = tok.encode(&text).unwrap();
        if original.iter().all(|&id| (id as usize) < v_prime) {
            prop_assert_eq!(pruned.encode(&text).unwrap(), original);
        }
    }
}

#[test]
fn pruned_tokenizer_revalidates_through_its_own_file_format() {
    let dir = tempfile::tempdir().unwrap();
    let tok = trained();
    for v_prime in [
        tok.alphabet_floor(),
        tok.vocab_size() - 20,
        tok.vocab_size(),
    ] {
        let pruned = tok.prune(&tok.rare_set(v_prime).unwrap()).unwrap();
        let path = dir.path().join(format!("tok_{v_prime}.json"));
        pruned.save(&path).unwrap();
        let back = compact::tokenizer::load_tokenizer(&path).unwrap();
        assert_eq!(back.vocab_size(), v_prime);
        assert_eq!(back.merge_count(), pruned.merge_count());
    }
}

#[test]
fn churn_is_monotone_non_increasing_in_retained_vocabulary() {
    let tok = trained();
    let corpus = synth::text_corpus(120, 4..12, 7);
    let sources = vec![("synthetic".to_string(), corpus)];

    let mut last = f64::INFINITY;
    let floor = tok.alphabet_floor();
    let v = tok.vocab_size();
    for v_prime in (floor..=v).step_by(5) {
        let pruned = tok.prune(&tok.rare_set(v_prime).unwrap()).unwrap();
        let churn = retok_stats(tok, &pruned, &sources).unwrap();
        let fraction = churn.sources[0].changed_fraction;
        assert!(
            fraction <= last + 1e-12,
            "churn rose from {last} to {fraction} at V'={v_prime}"
        );
        last = fraction;
    }
    // the identity point has zero churn
    assert_eq!(last, 0.0);
}
