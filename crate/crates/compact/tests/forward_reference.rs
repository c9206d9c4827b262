//! Forward-pass and scoring results checked against the independent
//! reference implementation in `support`.

mod support;

use compact::forward::{forward_collect, forward_logits, CalibrationBatch};
use compact::scoring::{score, token_weights, ScorerKind};
use compact::synth;
use compact::tokenizer::RareTokenSet;

#[test]
fn tc1_logits_match_the_reference_implementation() {
    let cfg = synth::tc1_config();
    let weights = synth::model(&cfg, 100);
    let ids = [1u32, 2, 3];

    let logits = forward_logits(&weights, &cfg, &ids).unwrap();
    let (_, expected) = support::reference_forward(&weights, &cfg, &ids);

    for pos in 0..ids.len() {
        let diff = support::max_abs_diff(logits.row(pos), &expected[pos]);
        assert!(diff <= 1e-5, "position {pos}: max abs diff {diff}");
    }
}

#[test]
fn logits_match_the_reference_across_architectures() {
    for (i, cfg) in support::tiny_configs().into_iter().enumerate() {
        for seed in [1u64, 2] {
            let weights = if seed % 2 == 0 {
                synth::model_with_biases(&cfg, 200 + i as u64 * 10 + seed)
            } else {
                synth::model(&cfg, 200 + i as u64 * 10 + seed)
            };
            let ids: Vec<u32> = (0..6)
                .map(|t| (t * 3 + i as u32) % cfg.vocab_size as u32)
                .collect();
            let logits = forward_logits(&weights, &cfg, &ids).unwrap();
            let (_, expected) = support::reference_forward(&weights, &cfg, &ids);
            for pos in 0..ids.len() {
                let diff = support::max_abs_diff(logits.row(pos), &expected[pos]);
                assert!(diff <= 1e-5, "config {i} seed {seed} pos {pos}: {diff}");
            }
        }
    }
}

#[test]
fn single_weighted_position_matches_its_own_recomputation() {
    let cfg = synth::tc1_config();
    let weights = synth::model(&cfg, 101);
    let batch = CalibrationBatch::new(vec![vec![1, 2]]).unwrap();

    let acc = forward_collect(&weights, &cfg, &batch, &[true, false]).unwrap();
    let oracle = support::brute_force_table(&weights, &cfg, &batch.sequences, &[true, false]);

    for (layer, (got, want)) in acc.layers.iter().zip(&oracle).enumerate() {
        let rel = support::max_rel_diff_f64(got, want);
        assert!(rel <= 1e-12, "layer {layer}: rel diff {rel}");
    }
    assert_eq!(acc.positions_used, 1);
}

#[test]
fn common_act2_table_matches_the_brute_force_oracle() {
    let cfg = synth::tc1_config();
    let weights = synth::model(&cfg, 102);
    let tok = synth::tc1_tokenizer();
    let rare = tok.rare_set(8).unwrap();

    let sequences = vec![vec![1u32, 8, 3, 9], vec![5, 6, 2, 4]];
    let batch = CalibrationBatch::new(sequences.clone()).unwrap();
    let mask = token_weights(&batch.flat_ids(), &rare);

    let table = score(&weights, &cfg, &batch, &rare, ScorerKind::CommonAct2, 1).unwrap();
    let oracle = support::brute_force_table(&weights, &cfg, &sequences, &mask);

    assert_eq!(table.positions_used, 6);
    for (layer, (got, want)) in table.layers.iter().zip(&oracle).enumerate() {
        let rel = support::max_rel_diff_f64(got, want);
        assert!(rel <= 1e-12, "layer {layer}: rel diff {rel}");
    }
}

#[test]
fn act2_table_matches_the_unmasked_oracle() {
    let cfg = synth::tc1_config();
    let weights = synth::model(&cfg, 103);
    let rare = RareTokenSet::empty(cfg.vocab_size);

    let sequences = vec![vec![0u32, 1, 2, 3], vec![9, 8, 7, 6]];
    let batch = CalibrationBatch::new(sequences.clone()).unwrap();

    let table = score(&weights, &cfg, &batch, &rare, ScorerKind::Act2, 1).unwrap();
    let oracle = support::brute_force_table(&weights, &cfg, &sequences, &[true; 8]);

    for (got, want) in table.layers.iter().zip(&oracle) {
        assert!(support::max_rel_diff_f64(got, want) <= 1e-12);
    }
}

#[test]
fn vocab_slice_leaves_retained_logit_columns_bit_identical() {
    use compact::pruner::prune_vocab;

    let cfg = synth::tc1_config();
    let weights = synth::model(&cfg, 104);
    let v_prime = 7;
    let pruned = prune_vocab(&weights, &cfg, v_prime).unwrap();
    let mut pruned_cfg = cfg.clone();
    pruned_cfg.vocab_size = v_prime;

    let ids = [0u32, 3, 6, 2];
    let full = forward_logits(&weights, &cfg, &ids).unwrap();
    let small = forward_logits(&pruned, &pruned_cfg, &ids).unwrap();
    for pos in 0..ids.len() {
        assert_eq!(&full.row(pos)[..v_prime], small.row(pos), "position {pos}");
    }
}

#[test]
fn full_ffn_budget_leaves_logits_bit_identical() {
    use compact::pruner::prune_ffn;
    use compact::scoring::ChannelSelection;

    let cfg = synth::tc1_config();
    let weights = synth::model(&cfg, 105);
    let selection = ChannelSelection {
        pruned: vec![vec![], vec![]],
        retained: vec![(0..6).collect(), (0..6).collect()],
    };
    let same = prune_ffn(&weights, &selection).unwrap();
    let ids = [4u32, 1, 9];
    let a = forward_logits(&weights, &cfg, &ids).unwrap();
    let b = forward_logits(&same, &cfg, &ids).unwrap();
    assert_eq!(a.data, b.data);
}
