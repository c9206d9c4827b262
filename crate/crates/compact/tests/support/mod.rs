//! Test-only reference implementations, kept independent of the library's
//! forward/scoring path: straight-line loops, per-name tensor lookup, fresh
//! per-position recomputation. Shares only the numeric contract (f32 math
//! with f64 RMS means, softmax denominators, and score accumulation).
#![allow(dead_code)]

use compact::tensorstore::{ModelConfig, WeightMap};

fn fetch(weights: &WeightMap, name: &str) -> Vec<f32> {
    weights
        .get(name)
        .unwrap_or_else(|| panic!("missing {name}"))
        .to_f32_vec()
}

fn fetch_opt(weights: &WeightMap, name: &str) -> Option<Vec<f32>> {
    weights.get(name).map(|t| t.to_f32_vec())
}

/// Full forward over one id sequence. Returns (activations[layer][pos][k],
/// logits[pos][v]).
pub fn reference_forward(
    weights: &WeightMap,
    cfg: &ModelConfig,
    ids: &[u32],
) -> (Vec<Vec<Vec<f32>>>, Vec<Vec<f32>>) {
    let d = cfg.hidden_size;
    let inter = cfg.intermediate_size;
    let n_layers = cfg.num_hidden_layers;
    let n_heads = cfg.num_attention_heads;
    let n_kv = cfg.num_key_value_heads;
    let hd = cfg.head_dim;
    let group = n_heads / n_kv;
    let kv_dim = n_kv * hd;
    let len = ids.len();

    let norm = |x: &[f32], g: &[f32]| -> Vec<f32> {
        let mut ss = 0.0f64;
        for &v in x {
            ss += (v as f64) * (v as f64);
        }
        let inv = 1.0 / (ss / x.len() as f64 + cfg.rms_norm_eps).sqrt();
        (0..x.len())
            .map(|i| ((x[i] as f64) * inv * (g[i] as f64)) as f32)
            .collect()
    };
    let project = |w: &[f32], b: Option<&Vec<f32>>, x: &[f32], rows: usize| -> Vec<f32> {
        let mut out = vec![0.0f32; rows];
        for r in 0..rows {
            let mut acc = 0.0f32;
            for c in 0..x.len() {
                acc += x[c] * w[r * x.len() + c];
            }
            if let Some(b) = b {
                acc += b[r];
            }
            out[r] = acc;
        }
        out
    };
    let rotate = |vec: &mut [f32], start: usize, pos: usize| {
        let half = hd / 2;
        for i in 0..half {
            let freq = cfg.rope_theta.powf(-2.0 * i as f64 / hd as f64);
            let angle = pos as f64 * freq;
            let (sin, cos) = (angle.sin() as f32, angle.cos() as f32);
            let a = vec[start + i];
            let b = vec[start + i + half];
            vec[start + i] = a * cos - b * sin;
            vec[start + i + half] = a * sin + b * cos;
        }
    };

    let embedding = fetch(weights, "model.embed_tokens.weight");
    let mut hidden: Vec<Vec<f32>> = ids
        .iter()
        .map(|&id| embedding[id as usize * d..(id as usize + 1) * d].to_vec())
        .collect();
    let mut activations: Vec<Vec<Vec<f32>>> = vec![Vec::new(); n_layers];

    for layer in 0..n_layers {
        let p = |suffix: &str| format!("model.layers.{layer}.{suffix}");
        let wq = fetch(weights, &p("self_attn.q_proj.weight"));
        let wk = fetch(weights, &p("self_attn.k_proj.weight"));
        let wv = fetch(weights, &p("self_attn.v_proj.weight"));
        let wo = fetch(weights, &p("self_attn.o_proj.weight"));
        let bq = fetch_opt(weights, &p("self_attn.q_proj.bias"));
        let bk = fetch_opt(weights, &p("self_attn.k_proj.bias"));
        let bv = fetch_opt(weights, &p("self_attn.v_proj.bias"));
        let w_gate = fetch(weights, &p("mlp.gate_proj.weight"));
        let w_up = fetch(weights, &p("mlp.up_proj.weight"));
        let w_down = fetch(weights, &p("mlp.down_proj.weight"));
        let g_attn = fetch(weights, &p("input_layernorm.weight"));
        let g_ffn = fetch(weights, &p("post_attention_layernorm.weight"));

        let mut qs = Vec::with_capacity(len);
        let mut ks = Vec::with_capacity(len);
        let mut vs = Vec::with_capacity(len);
        for pos in 0..len {
            let x = norm(&hidden[pos], &g_attn);
            let mut q = project(&wq, bq.as_ref(), &x, d);
            let mut k = project(&wk, bk.as_ref(), &x, kv_dim);
            let v = project(&wv, bv.as_ref(), &x, kv_dim);
            for head in 0..n_heads {
                rotate(&mut q, head * hd, pos);
            }
            for head in 0..n_kv {
                rotate(&mut k, head * hd, pos);
            }
            qs.push(q);
            ks.push(k);
            vs.push(v);
        }

        let scale = 1.0 / (hd as f32).sqrt();
        for pos in 0..len {
            let mut merged = vec![0.0f32; d];
            for head in 0..n_heads {
                let kv_head = head / group;
                let mut scores = Vec::with_capacity(pos + 1);
                for t in 0..=pos {
                    let mut acc = 0.0f32;
                    for i in 0..hd {
                        acc += qs[pos][head * hd + i] * ks[t][kv_head * hd + i];
                    }
                    scores.push(acc * scale);
                }
                let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut exps = Vec::with_capacity(pos + 1);
                let mut denom = 0.0f64;
                for s in &scores {
                    let e = (s - max).exp();
                    denom += e as f64;
                    exps.push(e);
                }
                for t in 0..=pos {
                    let prob = (exps[t] as f64 / denom) as f32;
                    for i in 0..hd {
                        merged[head * hd + i] += prob * vs[t][kv_head * hd + i];
                    }
                }
            }
            let o = project(&wo, None, &merged, d);
            for i in 0..d {
                hidden[pos][i] += o[i];
            }
        }

        for pos in 0..len {
            let x = norm(&hidden[pos], &g_ffn);
            let gate = project(&w_gate, None, &x, inter);
            let up = project(&w_up, None, &x, inter);
            let mut act = vec![0.0f32; inter];
            for k in 0..inter {
                let z = gate[k];
                act[k] = z / (1.0 + (-z).exp()) * up[k];
            }
            let down = project(&w_down, None, &act, d);
            activations[layer].push(act);
            for i in 0..d {
                hidden[pos][i] += down[i];
            }
        }
    }

    let g_final = fetch(weights, "model.norm.weight");
    let head = fetch_opt(weights, "lm_head.weight").unwrap_or_else(|| embedding.clone());
    let logits: Vec<Vec<f32>> = (0..len)
        .map(|pos| {
            let x = norm(&hidden[pos], &g_final);
            project(&head, None, &x, cfg.vocab_size)
        })
        .collect();

    (activations, logits)
}

/// Per-position brute force: recompute each weighted position's activation
/// vector from a fresh prefix run and sum the squares in f64.
pub fn brute_force_table(
    weights: &WeightMap,
    cfg: &ModelConfig,
    sequences: &[Vec<u32>],
    mask: &[bool],
) -> Vec<Vec<f64>> {
    let mut acc = vec![vec![0.0f64; cfg.intermediate_size]; cfg.num_hidden_layers];
    let mut offset = 0usize;
    for seq in sequences {
        for pos in 0..seq.len() {
            if mask[offset + pos] {
                let (acts, _) = reference_forward(weights, cfg, &seq[..=pos]);
                for (layer, rows) in acts.iter().enumerate() {
                    let a = &rows[pos];
                    for (k, &v) in a.iter().enumerate() {
                        acc[layer][k] += (v as f64) * (v as f64);
                    }
                }
            }
        }
        offset += seq.len();
    }
    acc
}

/// Small architecture grid for property tests: mixes GQA/MHA, layer counts,
/// and tying.
pub fn tiny_configs() -> Vec<ModelConfig> {
    let base = compact::synth::tc1_config();
    vec![
        base.clone(),
        ModelConfig {
            num_key_value_heads: 2,
            num_hidden_layers: 1,
            ..base.clone()
        },
        ModelConfig {
            vocab_size: 16,
            hidden_size: 8,
            intermediate_size: 12,
            num_attention_heads: 4,
            num_key_value_heads: 2,
            head_dim: 2,
            ..base.clone()
        },
        ModelConfig {
            vocab_size: 12,
            hidden_size: 8,
            intermediate_size: 8,
            num_hidden_layers: 3,
            num_attention_heads: 2,
            num_key_value_heads: 1,
            head_dim: 4,
            tie_word_embeddings: true,
            ..base.clone()
        },
        ModelConfig {
            vocab_size: 8,
            hidden_size: 6,
            intermediate_size: 9,
            num_attention_heads: 3,
            num_key_value_heads: 3,
            head_dim: 2,
            ..base
        },
    ]
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

pub fn max_rel_diff_f64(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let denom = x.abs().max(y.abs());
            if denom == 0.0 {
                0.0
            } else {
                (x - y).abs() / denom
            }
        })
        .fold(0.0, f64::max)
}
