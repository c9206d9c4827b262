//! Minimal forward pass for the standard decoder-only architecture:
//! RMSNorm -> grouped-query attention with rotary embeddings -> RMSNorm ->
//! SwiGLU FFN, residual connections throughout, no KV cache.
//!
//! Numeric contract (deterministic for fixed inputs): elementwise math and
//! dot products run in f32 with natural sequential order; RMSNorm mean,
//! softmax denominators, and activation-score accumulation run in f64.
//! The FFN activation tap sits on the elementwise product
//! `SiLU(x Wg^T) * (x Wu^T)` feeding the down projection.

use thiserror::Error;

use crate::tensorstore::{validate, ModelConfig, TensorRole, WeightMap};

#[derive(Error, Debug)]
pub enum ForwardError {
    #[error("weights do not match config:\n{0}")]
    InvalidModel(String),
    #[error("token id {id} out of range for vocabulary {vocab}")]
    IdOutOfRange { id: u32, vocab: usize },
    #[error("non-finite value detected at layer {layer}, position {position}")]
    NonFinite { layer: usize, position: usize },
    #[error("calibration batch is empty or contains an empty sequence")]
    EmptyBatch,
    #[error("token weights length {got} does not match {expected} positions")]
    WeightLengthMismatch { got: usize, expected: usize },
}

/// Token-id sequences for activation collection. Rows may have different
/// lengths; every row must be non-empty.
#[derive(Debug, Clone, Default)]
pub struct CalibrationBatch {
    pub sequences: Vec<Vec<u32>>,
}

impl CalibrationBatch {
    pub fn new(sequences: Vec<Vec<u32>>) -> Result<Self, ForwardError> {
        if sequences.is_empty() || sequences.iter().any(|s| s.is_empty()) {
            return Err(ForwardError::EmptyBatch);
        }
        Ok(CalibrationBatch { sequences })
    }

    pub fn total_positions(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }

    /// All token ids in row-major order, matching the layout token weights
    /// are expected in.
    pub fn flat_ids(&self) -> Vec<u32> {
        self.sequences.iter().flatten().copied().collect()
    }
}

/// Row-major logits, one row per input position.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl LogitsMatrix {
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Per-layer, per-channel f64 accumulator of weighted activation statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ActAccumulator {
    pub layers: Vec<Vec<f64>>,
    pub positions_used: u64,
}

impl ActAccumulator {
    fn zeros(layers: usize, channels: usize) -> Self {
        ActAccumulator {
            layers: vec![vec![0.0; channels]; layers],
            positions_used: 0,
        }
    }

    /// Elementwise merge; addition order is the caller's responsibility when
    /// bit-reproducibility matters.
    pub fn merge(&mut self, other: &ActAccumulator) {
        assert_eq!(self.layers.len(), other.layers.len());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
        self.positions_used += other.positions_used;
    }
}

/// Which statistic of the FFN activation to accumulate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActStat {
    Squared,
    Abs,
}

pub(crate) fn silu(z: f32) -> f32 {
    z / (1.0 + (-z).exp())
}

fn rmsnorm(x: &[f32], gain: &[f32], eps: f64, out: &mut [f32]) {
    let mut ss = 0.0f64;
    for &v in x {
        ss += f64::from(v) * f64::from(v);
    }
    let inv = 1.0 / (ss / x.len() as f64 + eps).sqrt();
    for i in 0..x.len() {
        out[i] = (f64::from(x[i]) * inv * f64::from(gain[i])) as f32;
    }
}

/// out[r] = sum_c x[c] * w[r, c] (+ bias[r]); w is [rows x cols] row-major.
fn matvec(w: &[f32], bias: Option<&[f32]>, x: &[f32], out: &mut [f32]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0f32;
        for c in 0..cols {
            acc += x[c] * row[c];
        }
        if let Some(b) = bias {
            acc += b[r];
        }
        *o = acc;
    }
}

/// In-place rotary embedding over one head slice, rotate-half layout.
fn rope(head: &mut [f32], position: usize, theta: f64) {
    let half = head.len() / 2;
    for i in 0..half {
        let freq = theta.powf(-2.0 * i as f64 / head.len() as f64);
        let angle = position as f64 * freq;
        let (sin, cos) = (angle.sin() as f32, angle.cos() as f32);
        let (a, b) = (head[i], head[i + half]);
        head[i] = a * cos - b * sin;
        head[i + half] = a * sin + b * cos;
    }
}

struct LayerWeights {
    wq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    wo: Vec<f32>,
    bq: Option<Vec<f32>>,
    bk: Option<Vec<f32>>,
    bv: Option<Vec<f32>>,
    w_gate: Vec<f32>,
    w_up: Vec<f32>,
    w_down: Vec<f32>,
    input_norm: Vec<f32>,
    post_attn_norm: Vec<f32>,
}

struct Model {
    cfg: ModelConfig,
    embedding: Vec<f32>,
    layers: Vec<LayerWeights>,
    final_norm: Vec<f32>,
    lm_head: Option<Vec<f32>>,
}

impl Model {
    fn from_weights(weights: &WeightMap, cfg: &ModelConfig) -> Result<Model, ForwardError> {
        let report = validate(weights, cfg);
        if !report.is_empty() {
            return Err(ForwardError::InvalidModel(report.to_string()));
        }
        let tensor = |role: TensorRole| weights.get_role(role).unwrap().to_f32_vec();
        let optional = |role: TensorRole| weights.get_role(role).map(|t| t.to_f32_vec());

        let layers = (0..cfg.num_hidden_layers)
            .map(|l| LayerWeights {
                wq: tensor(TensorRole::AttnQ(l)),
                wk: tensor(TensorRole::AttnK(l)),
                wv: tensor(TensorRole::AttnV(l)),
                wo: tensor(TensorRole::AttnO(l)),
                bq: optional(TensorRole::AttnQBias(l)),
                bk: optional(TensorRole::AttnKBias(l)),
                bv: optional(TensorRole::AttnVBias(l)),
                w_gate: tensor(TensorRole::FfnGate(l)),
                w_up: tensor(TensorRole::FfnUp(l)),
                w_down: tensor(TensorRole::FfnDown(l)),
                input_norm: tensor(TensorRole::InputNorm(l)),
                post_attn_norm: tensor(TensorRole::PostAttnNorm(l)),
            })
            .collect();

        Ok(Model {
            cfg: cfg.clone(),
            embedding: tensor(TensorRole::Embedding),
            layers,
            final_norm: tensor(TensorRole::FinalNorm),
            lm_head: if cfg.tie_word_embeddings {
                None
            } else {
                Some(tensor(TensorRole::LmHead))
            },
        })
    }

    /// Run all layers over one sequence, handing each position's FFN
    /// activation vector to the sink. Returns hidden states [len x D].
    fn run_layers<F>(&self, ids: &[u32], mut on_activation: F) -> Result<Vec<f32>, ForwardError>
    where
        F: FnMut(usize, usize, &[f32]),
    {
        let cfg = &self.cfg;
        let d = cfg.hidden_size;
        let inter = cfg.intermediate_size;
        let kv_dim = cfg.kv_dim();
        let hd = cfg.head_dim;
        let group = cfg.group_size();
        let len = ids.len();
        let scale = 1.0 / (hd as f32).sqrt();

        for &id in ids {
            if id as usize >= cfg.vocab_size {
                return Err(ForwardError::IdOutOfRange {
                    id,
                    vocab: cfg.vocab_size,
                });
            }
        }

        let mut hidden = vec![0.0f32; len * d];
        for (pos, &id) in ids.iter().enumerate() {
            let row = &self.embedding[id as usize * d..(id as usize + 1) * d];
            hidden[pos * d..(pos + 1) * d].copy_from_slice(row);
        }

        let mut normed = vec![0.0f32; d];
        let mut q = vec![0.0f32; len * d];
        let mut k = vec![0.0f32; len * kv_dim];
        let mut v = vec![0.0f32; len * kv_dim];
        let mut attn_out = vec![0.0f32; d];
        let mut proj = vec![0.0f32; d];
        let mut gate = vec![0.0f32; inter];
        let mut up = vec![0.0f32; inter];
        let mut act = vec![0.0f32; inter];

        for (layer_idx, layer) in self.layers.iter().enumerate() {
            // attention block
            for pos in 0..len {
                let h = &hidden[pos * d..(pos + 1) * d];
                rmsnorm(h, &layer.input_norm, cfg.rms_norm_eps, &mut normed);
                matvec(
                    &layer.wq,
                    layer.bq.as_deref(),
                    &normed,
                    &mut q[pos * d..(pos + 1) * d],
                );
                matvec(
                    &layer.wk,
                    layer.bk.as_deref(),
                    &normed,
                    &mut k[pos * kv_dim..(pos + 1) * kv_dim],
                );
                matvec(
                    &layer.wv,
                    layer.bv.as_deref(),
                    &normed,
                    &mut v[pos * kv_dim..(pos + 1) * kv_dim],
                );
                for head in 0..cfg.num_attention_heads {
                    rope(
                        &mut q[pos * d + head * hd..pos * d + (head + 1) * hd],
                        pos,
                        cfg.rope_theta,
                    );
                }
                for head in 0..cfg.num_key_value_heads {
                    rope(
                        &mut k[pos * kv_dim + head * hd..pos * kv_dim + (head + 1) * hd],
                        pos,
                        cfg.rope_theta,
                    );
                }
            }
            for pos in 0..len {
                attn_out.fill(0.0);
                for head in 0..cfg.num_attention_heads {
                    let kv_head = head / group;
                    let q_slice = &q[pos * d + head * hd..pos * d + (head + 1) * hd];
                    // causal scores over positions 0..=pos
                    let mut scores = vec![0.0f32; pos + 1];
                    for (t, s) in scores.iter_mut().enumerate() {
                        let k_slice =
                            &k[t * kv_dim + kv_head * hd..t * kv_dim + (kv_head + 1) * hd];
                        let mut acc = 0.0f32;
                        for i in 0..hd {
                            acc += q_slice[i] * k_slice[i];
                        }
                        *s = acc * scale;
                    }
                    let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let mut denom = 0.0f64;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        denom += f64::from(*s);
                    }
                    let out = &mut attn_out[head * hd..(head + 1) * hd];
                    for (t, &s) in scores.iter().enumerate() {
                        let p = (f64::from(s) / denom) as f32;
                        let v_slice =
                            &v[t * kv_dim + kv_head * hd..t * kv_dim + (kv_head + 1) * hd];
                        for i in 0..hd {
                            out[i] += p * v_slice[i];
                        }
                    }
                }
                matvec(&layer.wo, None, &attn_out, &mut proj);
                let h = &mut hidden[pos * d..(pos + 1) * d];
                for i in 0..d {
                    h[i] += proj[i];
                }
            }
            // FFN block
            for pos in 0..len {
                let h = &hidden[pos * d..(pos + 1) * d];
                rmsnorm(h, &layer.post_attn_norm, cfg.rms_norm_eps, &mut normed);
                matvec(&layer.w_gate, None, &normed, &mut gate);
                matvec(&layer.w_up, None, &normed, &mut up);
                for i in 0..inter {
                    act[i] = silu(gate[i]) * up[i];
                }
                on_activation(layer_idx, pos, &act);
                matvec(&layer.w_down, None, &act, &mut proj);
                let h = &mut hidden[pos * d..(pos + 1) * d];
                for i in 0..d {
                    h[i] += proj[i];
                }
            }
            for pos in 0..len {
                if hidden[pos * d..(pos + 1) * d]
                    .iter()
                    .any(|x| !x.is_finite())
                {
                    return Err(ForwardError::NonFinite {
                        layer: layer_idx,
                        position: pos,
                    });
                }
            }
        }
        Ok(hidden)
    }
}

/// Full-sequence logits, [len x V].
pub fn forward_logits(
    weights: &WeightMap,
    config: &ModelConfig,
    ids: &[u32],
) -> Result<LogitsMatrix, ForwardError> {
    let model = Model::from_weights(weights, config)?;
    let hidden = model.run_layers(ids, |_, _, _| {})?;
    let d = config.hidden_size;
    let v = config.vocab_size;
    let head = model.lm_head.as_deref().unwrap_or(&model.embedding);

    let mut normed = vec![0.0f32; d];
    let mut data = vec![0.0f32; ids.len() * v];
    for pos in 0..ids.len() {
        rmsnorm(
            &hidden[pos * d..(pos + 1) * d],
            &model.final_norm,
            config.rms_norm_eps,
            &mut normed,
        );
        matvec(head, None, &normed, &mut data[pos * v..(pos + 1) * v]);
        if data[pos * v..(pos + 1) * v].iter().any(|x| !x.is_finite()) {
            return Err(ForwardError::NonFinite {
                layer: config.num_hidden_layers,
                position: pos,
            });
        }
    }
    Ok(LogitsMatrix {
        rows: ids.len(),
        cols: v,
        data,
    })
}

/// Accumulate `sum_i w_i * a_{i,k}^2` per layer and channel over a batch;
/// logits are never materialized. `token_weights` aligns with the flattened
/// row-major positions of the batch.
pub fn forward_collect(
    weights: &WeightMap,
    config: &ModelConfig,
    batch: &CalibrationBatch,
    token_weights: &[bool],
) -> Result<ActAccumulator, ForwardError> {
    forward_collect_stat(weights, config, batch, token_weights, ActStat::Squared)
}

/// Generalized collection: squared or absolute activation accumulation.
pub fn forward_collect_stat(
    weights: &WeightMap,
    config: &ModelConfig,
    batch: &CalibrationBatch,
    token_weights: &[bool],
    stat: ActStat,
) -> Result<ActAccumulator, ForwardError> {
    if batch.sequences.is_empty() || batch.sequences.iter().any(|s| s.is_empty()) {
        return Err(ForwardError::EmptyBatch);
    }
    let total = batch.total_positions();
    if token_weights.len() != total {
        return Err(ForwardError::WeightLengthMismatch {
            got: token_weights.len(),
            expected: total,
        });
    }
    let model = Model::from_weights(weights, config)?;
    let mut acc = ActAccumulator::zeros(config.num_hidden_layers, config.intermediate_size);
    let mut offset = 0usize;
    for seq in &batch.sequences {
        let w = &token_weights[offset..offset + seq.len()];
        model.run_layers(seq, |layer, pos, act| {
            if w[pos] {
                let row = &mut acc.layers[layer];
                match stat {
                    ActStat::Squared => {
                        for (slot, &a) in row.iter_mut().zip(act) {
                            *slot += f64::from(a) * f64::from(a);
                        }
                    }
                    ActStat::Abs => {
                        for (slot, &a) in row.iter_mut().zip(act) {
                            *slot += f64::from(a).abs();
                        }
                    }
                }
            }
        })?;
        acc.positions_used += w.iter().filter(|&&x| x).count() as u64;
        offset += seq.len();
    }
    Ok(acc)
}
