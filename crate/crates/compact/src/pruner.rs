//! Parameter analytics, (V', I') planning, and the joint pruning pipeline.
//!
//! Parameter groups for a decoder-only transformer:
//!
//!   vocab     = 2·V·D      (V·D when the embedding is tied to the LM head)
//!   ffn       = 3·L·D·I
//!   attention = 2·L·D²·(1 + 1/H)   with H = query heads per KV head
//!
//! plus norm gains and optional biases, which the census tracks separately.
//! The pipeline identifies the rare-token suffix, scores FFN channels on the
//! original model under the common-token mask, then slices FFN rows/columns
//! and embedding/LM-head rows and rewrites config and tokenizer to match.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forward::CalibrationBatch;
use crate::scoring::{self, ChannelSelection, ImportanceTable, ScoreError, ScorerKind};
use crate::tensorstore::{
    take_cols, take_rows, validate, ModelConfig, TensorError, TensorRole, WeightMap,
};
use crate::tokenizer::{BpeTokenizer, TokenizerError};

#[derive(Error, Debug)]
pub enum PruneError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("target vocabulary size {v_prime} out of range [1, {v}]")]
    VPrimeOutOfRange { v_prime: usize, v: usize },
    #[error("target intermediate size {i_prime} out of range [1, {i}]")]
    IPrimeOutOfRange { i_prime: usize, i: usize },
    #[error("invalid plan parameters: {0}")]
    BadPlan(String),
    #[error("selection covers {selection} layers but the model has {model}")]
    SelectionLayerMismatch { selection: usize, model: usize },
    #[error(
        "selection for layer {layer} addresses {selected} channels but the model has {actual}"
    )]
    SelectionWidthMismatch {
        layer: usize,
        selected: usize,
        actual: usize,
    },
    #[error(
        "tokenizer has {tokenizer} tokens but the model vocabulary is {model}; \
         calibration must use the original tokenizer"
    )]
    TokenizerMismatch { tokenizer: usize, model: usize },
    #[error("too few usable calibration documents: needed {needed}, found {usable}")]
    TooFewDocuments { needed: usize, usable: usize },
    #[error("pruned output failed validation:\n{0}")]
    Inconsistent(String),
}

/// Integer parameter counts per group, with fractions of the total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCensus {
    pub n_vocab: u64,
    pub n_ffn: u64,
    pub n_attention: u64,
    pub n_other: u64,
    pub n_total: u64,
    pub vocab_fraction: f64,
    pub ffn_fraction: f64,
    pub attention_fraction: f64,
    pub other_fraction: f64,
}

impl ParamCensus {
    fn from_parts(n_vocab: u64, n_ffn: u64, n_attention: u64, n_other: u64) -> ParamCensus {
        let n_total = n_vocab + n_ffn + n_attention + n_other;
        let frac = |n: u64| n as f64 / n_total as f64;
        ParamCensus {
            n_vocab,
            n_ffn,
            n_attention,
            n_other,
            n_total,
            vocab_fraction: frac(n_vocab),
            ffn_fraction: frac(n_ffn),
            attention_fraction: frac(n_attention),
            other_fraction: frac(n_other),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("census serialization")
    }
}

fn group_counts(config: &ModelConfig) -> (u64, u64, u64) {
    let v = config.vocab_size as u64;
    let d = config.hidden_size as u64;
    let i = config.intermediate_size as u64;
    let l = config.num_hidden_layers as u64;
    let kv = config.kv_dim() as u64;

    let n_vocab = if config.tie_word_embeddings {
        v * d
    } else {
        2 * v * d
    };
    let n_ffn = 3 * l * d * i;
    // 2LD²(1 + 1/H) expanded to stay in integers: q/o are D×D, k/v are kv×D
    let n_attention = 2 * l * d * d + 2 * l * kv * d;
    (n_vocab, n_ffn, n_attention)
}

/// Census from the architecture alone; `n_other` counts the norm gains the
/// config implies (biases are a checkpoint property, not a config one).
pub fn param_counts(config: &ModelConfig) -> ParamCensus {
    let (n_vocab, n_ffn, n_attention) = group_counts(config);
    let n_norms = (2 * config.num_hidden_layers as u64 + 1) * config.hidden_size as u64;
    ParamCensus::from_parts(n_vocab, n_ffn, n_attention, n_norms)
}

/// Census against a concrete checkpoint: the group formulas stand, and
/// `n_other` absorbs whatever else the checkpoint actually carries.
pub fn param_counts_with_weights(config: &ModelConfig, weights: &WeightMap) -> ParamCensus {
    let (n_vocab, n_ffn, n_attention) = group_counts(config);
    let total = weights.total_elements();
    let n_other = total - n_vocab - n_ffn - n_attention;
    ParamCensus::from_parts(n_vocab, n_ffn, n_attention, n_other)
}

fn check_bounds(config: &ModelConfig, v_prime: usize, i_prime: usize) -> Result<(), PruneError> {
    if v_prime < 1 || v_prime > config.vocab_size {
        return Err(PruneError::VPrimeOutOfRange {
            v_prime,
            v: config.vocab_size,
        });
    }
    if i_prime < 1 || i_prime > config.intermediate_size {
        return Err(PruneError::IPrimeOutOfRange {
            i_prime,
            i: config.intermediate_size,
        });
    }
    Ok(())
}

/// Fraction of total parameters removed by pruning to (V', I').
pub fn pruning_ratio(
    config: &ModelConfig,
    v_prime: usize,
    i_prime: usize,
) -> Result<f64, PruneError> {
    check_bounds(config, v_prime, i_prime)?;
    let d = config.hidden_size as u64;
    let l = config.num_hidden_layers as u64;
    let heads = if config.tie_word_embeddings { 1 } else { 2 };
    let removed = heads * (config.vocab_size - v_prime) as u64 * d
        + 3 * l * d * (config.intermediate_size - i_prime) as u64;
    Ok(removed as f64 / param_counts(config).n_total as f64)
}

/// One planner row: a (V', I') pair and the ratio it achieves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PlanPoint {
    pub v_prime: usize,
    pub i_prime: usize,
    pub ratio: f64,
}

/// All grid points within `tolerance` of the target ratio. V' steps down
/// from V on the vocab grid and I' down from I on the intermediate grid;
/// rows are sorted by V' descending, then I' descending. An empty result is
/// not an error.
pub fn enumerate_configs(
    config: &ModelConfig,
    target_ratio: f64,
    vocab_step: usize,
    inter_step: usize,
    tolerance: f64,
) -> Result<Vec<PlanPoint>, PruneError> {
    if vocab_step < 1 || inter_step < 1 {
        return Err(PruneError::BadPlan("steps must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&target_ratio) || tolerance < 0.0 {
        return Err(PruneError::BadPlan(
            "target ratio must lie in [0, 1) and tolerance must be >= 0".into(),
        ));
    }

    let v = config.vocab_size;
    let i = config.intermediate_size;
    let d = config.hidden_size as f64;
    let l = config.num_hidden_layers as f64;
    let total = param_counts(config).n_total as f64;
    let heads = if config.tie_word_embeddings { 1.0 } else { 2.0 };
    let ffn_per_channel = 3.0 * l * d;

    let mut points = Vec::new();
    let mut v_prime = v;
    loop {
        let vocab_removed = heads * (v - v_prime) as f64 * d;
        // solve the channel-removal window for this v'
        let low = (target_ratio - tolerance) * total - vocab_removed;
        let high = (target_ratio + tolerance) * total - vocab_removed;
        let removed_min = (low / ffn_per_channel).ceil().max(0.0) as usize;
        let removed_max = (high / ffn_per_channel).floor() as isize;
        if removed_max >= 0 {
            let mut removed = removed_min.div_ceil(inter_step) * inter_step;
            if removed_min == 0 {
                removed = 0;
            }
            while removed as isize <= removed_max && removed < i {
                let i_prime = i - removed;
                let ratio = pruning_ratio(config, v_prime, i_prime)?;
                if (ratio - target_ratio).abs() <= tolerance {
                    points.push(PlanPoint {
                        v_prime,
                        i_prime,
                        ratio,
                    });
                }
                removed += inter_step;
            }
        }
        if v_prime <= vocab_step {
            break;
        }
        v_prime -= vocab_step;
    }
    Ok(points)
}

/// Remove the selected channels: rows of every layer's gate/up projections,
/// matching columns of the down projection. Everything else is copied
/// bit-exact.
pub fn prune_ffn(
    weights: &WeightMap,
    selection: &ChannelSelection,
) -> Result<WeightMap, PruneError> {
    let model_layers = (0..)
        .take_while(|&l| weights.contains(&TensorRole::FfnGate(l).name()))
        .count();
    if selection.retained.len() != model_layers {
        return Err(PruneError::SelectionLayerMismatch {
            selection: selection.retained.len(),
            model: model_layers,
        });
    }

    let mut out = WeightMap::new();
    for (name, t) in weights.iter() {
        let sliced = match TensorRole::parse(name) {
            Some(TensorRole::FfnGate(l)) | Some(TensorRole::FfnUp(l)) => {
                let keep = &selection.retained[l];
                let width = keep.len() + selection.pruned[l].len();
                if t.shape.first() != Some(&width) {
                    return Err(PruneError::SelectionWidthMismatch {
                        layer: l,
                        selected: width,
                        actual: t.shape[0],
                    });
                }
                take_rows(t, keep)?
            }
            Some(TensorRole::FfnDown(l)) => {
                let keep = &selection.retained[l];
                let width = keep.len() + selection.pruned[l].len();
                if t.shape.get(1) != Some(&width) {
                    return Err(PruneError::SelectionWidthMismatch {
                        layer: l,
                        selected: width,
                        actual: t.shape[1],
                    });
                }
                take_cols(t, keep)?
            }
            _ => t.clone(),
        };
        out.insert(sliced)?;
    }
    Ok(out)
}

/// Keep embedding (and LM-head, when untied) rows 0..V'. All other tensors
/// pass through untouched; tied checkpoints carry one shared matrix and are
/// sliced once.
pub fn prune_vocab(
    weights: &WeightMap,
    config: &ModelConfig,
    v_prime: usize,
) -> Result<WeightMap, PruneError> {
    if v_prime < 1 || v_prime > config.vocab_size {
        return Err(PruneError::VPrimeOutOfRange {
            v_prime,
            v: config.vocab_size,
        });
    }
    let keep: Vec<usize> = (0..v_prime).collect();
    let mut out = WeightMap::new();
    for (name, t) in weights.iter() {
        let sliced = match TensorRole::parse(name) {
            Some(TensorRole::Embedding) | Some(TensorRole::LmHead) => take_rows(t, &keep)?,
            _ => t.clone(),
        };
        out.insert(sliced)?;
    }
    Ok(out)
}

/// Pruning targets plus calibration settings for one pipeline run.
#[derive(Debug, Clone)]
pub struct PruneSpec {
    pub v_prime: usize,
    pub i_prime: usize,
    pub scorer: ScorerKind,
    pub calibration: String,
    pub n_samples: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub threads: usize,
}

/// Run summary written next to the pruned artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneReport {
    pub achieved_ratio: f64,
    #[serde(rename = "V_prime")]
    pub v_prime: usize,
    #[serde(rename = "I_prime")]
    pub i_prime: usize,
    pub scorer: ScorerKind,
    pub n_samples: usize,
    pub seq_len: usize,
    pub positions_used: u64,
    pub elapsed_seconds: f64,
}

impl PruneReport {
    pub fn save(&self, path: &Path) -> Result<(), std::io::Error> {
        let mut text = serde_json::to_string_pretty(self).expect("report serialization");
        text.push('\n');
        std::fs::write(path, text)
    }
}

/// Everything one pipeline run produces.
pub struct CompactOutcome {
    pub weights: WeightMap,
    pub config: ModelConfig,
    pub tokenizer: BpeTokenizer,
    pub importance: ImportanceTable,
    pub selection: ChannelSelection,
    pub report: PruneReport,
    pub warnings: Vec<String>,
}

/// Deterministically sample `n_samples` documents, tokenize them with the
/// given tokenizer, truncate each to `seq_len`, and drop documents shorter
/// than 8 tokens. The batch may therefore hold fewer than `n_samples`
/// sequences; a batch with none at all is an error.
pub fn build_calibration(
    tokenizer: &BpeTokenizer,
    docs: &[Vec<u8>],
    n_samples: usize,
    seq_len: usize,
    seed: u64,
) -> Result<CalibrationBatch, PruneError> {
    let mut order: Vec<usize> = (0..docs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order.truncate(n_samples);

    let mut sequences = Vec::with_capacity(order.len());
    for idx in order {
        let mut ids = tokenizer.encode(&docs[idx])?;
        if ids.len() < 8 {
            continue;
        }
        ids.truncate(seq_len);
        sequences.push(ids);
    }
    if sequences.is_empty() {
        return Err(PruneError::TooFewDocuments {
            needed: n_samples,
            usable: 0,
        });
    }
    Ok(CalibrationBatch { sequences })
}

fn pruned_config(config: &ModelConfig, v_prime: usize, i_prime: usize) -> ModelConfig {
    let mut out = config.clone();
    out.vocab_size = v_prime;
    out.intermediate_size = i_prime;
    out
}

/// The joint pipeline: identify the rare suffix, score channels on the
/// original model over the calibration corpus, prune FFN channels, then
/// prune vocabulary rows and tokenizer merges, and rewrite the config.
pub fn compact(
    weights: &WeightMap,
    config: &ModelConfig,
    tokenizer: &BpeTokenizer,
    corpus: &[Vec<u8>],
    spec: &PruneSpec,
) -> Result<CompactOutcome, PruneError> {
    let started = Instant::now();
    config.validate()?;
    check_bounds(config, spec.v_prime, spec.i_prime)?;
    if tokenizer.vocab_size() != config.vocab_size {
        return Err(PruneError::TokenizerMismatch {
            tokenizer: tokenizer.vocab_size(),
            model: config.vocab_size,
        });
    }

    let rare = tokenizer.rare_set(spec.v_prime)?;
    let batch = build_calibration(tokenizer, corpus, spec.n_samples, spec.seq_len, spec.seed)?;
    let total_positions = batch.total_positions();

    let importance = scoring::score(weights, config, &batch, &rare, spec.scorer, spec.threads)?;
    let selection = scoring::select_pruned_channels(&importance, spec.i_prime)?;

    let pruned = prune_ffn(weights, &selection)?;
    let pruned = prune_vocab(&pruned, config, spec.v_prime)?;
    let out_config = pruned_config(config, spec.v_prime, spec.i_prime);
    let out_tokenizer = tokenizer.prune(&rare)?;

    let report = validate(&pruned, &out_config);
    if !report.is_empty() {
        return Err(PruneError::Inconsistent(report.to_string()));
    }

    let elements_in = weights.total_elements();
    let elements_out = pruned.total_elements();
    let achieved_ratio = (elements_in - elements_out) as f64 / elements_in as f64;

    let mut warnings = Vec::new();
    if (importance.positions_used as f64) < 0.01 * total_positions as f64 {
        warnings.push(format!(
            "only {} of {} calibration positions carry weight; channel scores may be unstable",
            importance.positions_used, total_positions
        ));
    }

    let report = PruneReport {
        achieved_ratio,
        v_prime: spec.v_prime,
        i_prime: spec.i_prime,
        scorer: spec.scorer,
        n_samples: batch.sequences.len(),
        seq_len: spec.seq_len,
        positions_used: importance.positions_used,
        elapsed_seconds: started.elapsed().as_secs_f64(),
    };

    Ok(CompactOutcome {
        weights: pruned,
        config: out_config,
        tokenizer: out_tokenizer,
        importance,
        selection,
        report,
        warnings,
    })
}
