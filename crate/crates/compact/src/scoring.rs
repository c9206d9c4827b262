//! Channel importance scoring and pruned-channel selection.
//!
//! Scorers:
//! * `common-act2` — squared activations summed over calibration positions
//!   whose input token survives vocabulary pruning (rare positions weigh 0).
//! * `act2`       — the same sum with every position weighted 1.
//! * `abs-act`    — unweighted summed absolute activations (baseline).
//!
//! Selection prunes the `I - I'` lowest-scoring channels per layer; ties
//! break toward the smaller index so budgets nest.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forward::{
    forward_collect_stat, ActAccumulator, ActStat, CalibrationBatch, ForwardError,
};
use crate::tensorstore::{ModelConfig, WeightMap};
use crate::tokenizer::RareTokenSet;

#[derive(Error, Debug)]
pub enum ScoreError {
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error("empty effective calibration: every position is masked as rare")]
    EmptyEffectiveCalibration,
    #[error("target intermediate size {i_prime} out of range [1, {i}]")]
    IPrimeOutOfRange { i_prime: usize, i: usize },
    #[error("unknown scorer {0:?} (expected common-act2, act2, or abs-act)")]
    UnknownScorer(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("importance table does not parse: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScorerKind {
    #[serde(rename = "common-act2")]
    CommonAct2,
    #[serde(rename = "act2")]
    Act2,
    #[serde(rename = "abs-act")]
    AbsAct,
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ScorerKind::CommonAct2 => "common-act2",
            ScorerKind::Act2 => "act2",
            ScorerKind::AbsAct => "abs-act",
        };
        f.write_str(s)
    }
}

impl FromStr for ScorerKind {
    type Err = ScoreError;

    fn from_str(s: &str) -> Result<Self, ScoreError> {
        match s {
            "common-act2" => Ok(ScorerKind::CommonAct2),
            "act2" => Ok(ScorerKind::Act2),
            "abs-act" => Ok(ScorerKind::AbsAct),
            other => Err(ScoreError::UnknownScorer(other.to_string())),
        }
    }
}

/// Accumulated importance per layer and channel, plus how many calibration
/// positions carried weight 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub scorer: ScorerKind,
    pub layers: Vec<Vec<f64>>,
    pub positions_used: u64,
}

impl ImportanceTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("importance serialization")
    }

    pub fn save(&self, path: &Path) -> Result<(), ScoreError> {
        let mut text = self.to_json();
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ScoreError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Weight 0 for positions whose input token is rare, 1 otherwise.
pub fn token_weights(ids: &[u32], s: &RareTokenSet) -> Vec<bool> {
    ids.iter().map(|&id| !s.contains(id)).collect()
}

/// Score every FFN channel over the calibration batch. The accumulation
/// order is batch-major and fixed; `threads` splits the batch into that many
/// contiguous chunks whose partial tables merge in chunk order.
pub fn score(
    weights: &WeightMap,
    config: &ModelConfig,
    batches: &CalibrationBatch,
    s: &RareTokenSet,
    scorer: ScorerKind,
    threads: usize,
) -> Result<ImportanceTable, ScoreError> {
    let flat = batches.flat_ids();
    let mask: Vec<bool> = match scorer {
        ScorerKind::CommonAct2 => token_weights(&flat, s),
        ScorerKind::Act2 | ScorerKind::AbsAct => vec![true; flat.len()],
    };
    if scorer == ScorerKind::CommonAct2 && !mask.iter().any(|&w| w) {
        return Err(ScoreError::EmptyEffectiveCalibration);
    }
    let stat = match scorer {
        ScorerKind::AbsAct => ActStat::Abs,
        _ => ActStat::Squared,
    };

    let threads = threads.max(1).min(batches.sequences.len());
    let acc = if threads == 1 {
        forward_collect_stat(weights, config, batches, &mask, stat)?
    } else {
        run_chunked(weights, config, batches, &mask, stat, threads)?
    };

    Ok(ImportanceTable {
        scorer,
        layers: acc.layers,
        positions_used: acc.positions_used,
    })
}

fn run_chunked(
    weights: &WeightMap,
    config: &ModelConfig,
    batches: &CalibrationBatch,
    mask: &[bool],
    stat: ActStat,
    threads: usize,
) -> Result<ActAccumulator, ScoreError> {
    let n = batches.sequences.len();
    let per = n.div_ceil(threads);

    // contiguous (sequences, mask) chunks with fixed boundaries
    let mut chunks = Vec::new();
    let mut offset = 0usize;
    for start in (0..n).step_by(per) {
        let end = (start + per).min(n);
        let seqs = batches.sequences[start..end].to_vec();
        let len: usize = seqs.iter().map(|s| s.len()).sum();
        chunks.push((seqs, mask[offset..offset + len].to_vec()));
        offset += len;
    }

    let partials: Vec<Result<ActAccumulator, ForwardError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|(seqs, mask)| {
                scope.spawn(move || {
                    let batch = CalibrationBatch { sequences: seqs };
                    forward_collect_stat(weights, config, &batch, &mask, stat)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("scoring worker panicked"))
            .collect()
    });

    let mut merged: Option<ActAccumulator> = None;
    for partial in partials {
        let partial = partial?;
        match &mut merged {
            None => merged = Some(partial),
            Some(acc) => acc.merge(&partial),
        }
    }
    Ok(merged.expect("at least one chunk"))
}

/// Per-layer pruned/retained channel index sets, both ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelSelection {
    pub pruned: Vec<Vec<usize>>,
    pub retained: Vec<Vec<usize>>,
}

impl ChannelSelection {
    pub fn channels_per_layer(&self) -> Option<usize> {
        self.retained
            .first()
            .map(|r| r.len() + self.pruned[0].len())
    }
}

/// Choose the `I - I'` lowest-importance channels of every layer. Ties break
/// toward pruning the smaller index; retained indices stay ascending so the
/// surviving rows keep their relative order.
pub fn select_pruned_channels(
    table: &ImportanceTable,
    i_prime: usize,
) -> Result<ChannelSelection, ScoreError> {
    let mut pruned = Vec::with_capacity(table.layers.len());
    let mut retained = Vec::with_capacity(table.layers.len());
    for scores in &table.layers {
        let i = scores.len();
        if i_prime < 1 || i_prime > i {
            return Err(ScoreError::IPrimeOutOfRange { i_prime, i });
        }
        let mut order: Vec<usize> = (0..i).collect();
        order.sort_by(|&a, &b| {
            scores[a]
                .partial_cmp(&scores[b])
                .expect("scores are finite")
                .then(a.cmp(&b))
        });
        let mut p: Vec<usize> = order[..i - i_prime].to_vec();
        let mut r: Vec<usize> = order[i - i_prime..].to_vec();
        p.sort_unstable();
        r.sort_unstable();
        pruned.push(p);
        retained.push(r);
    }
    Ok(ChannelSelection { pruned, retained })
}
