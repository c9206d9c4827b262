//! Tensor container I/O and row/column surgery.
//!
//! The on-disk layout is the safetensors single-file format:
//!
//!   ┌──────────────┬──────────────────────┬───────────────────────┐
//!   │ 8 bytes      │ N bytes              │ raw tensor data       │
//!   │ header size  │ JSON header (UTF-8)  │ (contiguous, LE)      │
//!   │ (u64 LE)     │                      │                       │
//!   └──────────────┴──────────────────────┴───────────────────────┘
//!
//! The JSON header maps tensor names to {dtype, shape, data_offsets};
//! offsets are relative to the end of the header. Tensors are written in
//! lexicographic name order so saves are byte-deterministic.
//!
//! Surgery (`take_rows` / `take_cols`) copies raw bytes and never converts
//! elements, so 16-bit tensors pass through bit-faithfully.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum TensorError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unknown dtype tag {0:?}")]
    UnknownDtype(String),
    #[error("tensor {name}: declared byte range [{begin}, {end}) is invalid for the file")]
    BadOffsets {
        name: String,
        begin: usize,
        end: usize,
    },
    #[error("tensor {name}: byte ranges overlap with another tensor")]
    OverlappingOffsets { name: String },
    #[error("tensor {name}: shape {shape:?} x {dtype} does not match {actual} data bytes")]
    ShapeDataMismatch {
        name: String,
        shape: Vec<usize>,
        dtype: Dtype,
        actual: usize,
    },
    #[error("tensor {name}: expected rank 2, got shape {shape:?}")]
    NotRank2 { name: String, shape: Vec<usize> },
    #[error("index {index} out of range for axis of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("index set must be strictly increasing")]
    NonIncreasingIndices,
    #[error("empty slice forbidden")]
    EmptySlice,
    #[error("duplicate tensor name {0}")]
    DuplicateTensor(String),
    #[error("invalid model config: {0}")]
    BadConfig(String),
}

/// Element type of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    F32,
    F16,
    Bf16,
}

impl Dtype {
    pub fn element_size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::Bf16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::Bf16 => "BF16",
        }
    }

    pub fn parse(s: &str) -> Option<Dtype> {
        match s {
            "F32" => Some(Dtype::F32),
            "F16" => Some(Dtype::F16),
            "BF16" => Some(Dtype::Bf16),
            _ => None,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn f16_bits_to_f32(bits: u16) -> f32 {
    let sign = u32::from(bits >> 15) << 31;
    let exp = (bits >> 10) & 0x1f;
    let frac = u32::from(bits & 0x3ff);
    let val = match exp {
        0 => {
            if frac == 0 {
                sign
            } else {
                // subnormal: renormalize
                let mut exp32 = 127 - 15 + 1;
                let mut frac = frac;
                while frac & 0x400 == 0 {
                    frac <<= 1;
                    exp32 -= 1;
                }
                sign | ((exp32 as u32) << 23) | ((frac & 0x3ff) << 13)
            }
        }
        0x1f => sign | 0x7f80_0000 | (frac << 13),
        _ => sign | ((u32::from(exp) + 127 - 15) << 23) | (frac << 13),
    };
    f32::from_bits(val)
}

fn bf16_bits_to_f32(bits: u16) -> f32 {
    f32::from_bits(u32::from(bits) << 16)
}

/// A named tensor with an owned, contiguous, little-endian element buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorView {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl TensorView {
    pub fn new(
        name: impl Into<String>,
        dtype: Dtype,
        shape: Vec<usize>,
        data: Vec<u8>,
    ) -> Result<Self, TensorError> {
        let t = TensorView {
            name: name.into(),
            dtype,
            shape,
            data,
        };
        t.check()?;
        Ok(t)
    }

    pub fn from_f32(name: impl Into<String>, shape: Vec<usize>, values: &[f32]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        let mut data = Vec::with_capacity(values.len() * 4);
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
        TensorView {
            name: name.into(),
            dtype: Dtype::F32,
            shape,
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn check(&self) -> Result<(), TensorError> {
        if self.numel() * self.dtype.element_size() != self.data.len() {
            return Err(TensorError::ShapeDataMismatch {
                name: self.name.clone(),
                shape: self.shape.clone(),
                dtype: self.dtype,
                actual: self.data.len(),
            });
        }
        Ok(())
    }

    /// Decode the buffer to f32, widening 16-bit formats.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match self.dtype {
            Dtype::F32 => self
                .data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            Dtype::F16 => self
                .data
                .chunks_exact(2)
                .map(|c| f16_bits_to_f32(u16::from_le_bytes([c[0], c[1]])))
                .collect(),
            Dtype::Bf16 => self
                .data
                .chunks_exact(2)
                .map(|c| bf16_bits_to_f32(u16::from_le_bytes([c[0], c[1]])))
                .collect(),
        }
    }

    fn require_rank2(&self) -> Result<(usize, usize), TensorError> {
        if self.shape.len() != 2 {
            return Err(TensorError::NotRank2 {
                name: self.name.clone(),
                shape: self.shape.clone(),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

fn check_index_set(keep: &[usize], len: usize) -> Result<(), TensorError> {
    if keep.is_empty() {
        return Err(TensorError::EmptySlice);
    }
    let mut prev: Option<usize> = None;
    for &i in keep {
        if i >= len {
            return Err(TensorError::IndexOutOfRange { index: i, len });
        }
        if let Some(p) = prev {
            if i <= p {
                return Err(TensorError::NonIncreasingIndices);
            }
        }
        prev = Some(i);
    }
    Ok(())
}

/// Keep the given rows of a rank-2 tensor, in order. Bytes are copied verbatim.
pub fn take_rows(t: &TensorView, keep: &[usize]) -> Result<TensorView, TensorError> {
    let (rows, cols) = t.require_rank2()?;
    check_index_set(keep, rows)?;
    let row_bytes = cols * t.dtype.element_size();
    let mut data = Vec::with_capacity(keep.len() * row_bytes);
    for &r in keep {
        data.extend_from_slice(&t.data[r * row_bytes..(r + 1) * row_bytes]);
    }
    Ok(TensorView {
        name: t.name.clone(),
        dtype: t.dtype,
        shape: vec![keep.len(), cols],
        data,
    })
}

/// Keep the given columns of a rank-2 tensor, in order.
pub fn take_cols(t: &TensorView, keep: &[usize]) -> Result<TensorView, TensorError> {
    let (rows, cols) = t.require_rank2()?;
    check_index_set(keep, cols)?;
    let elem = t.dtype.element_size();
    let row_bytes = cols * elem;
    let mut data = Vec::with_capacity(rows * keep.len() * elem);
    for r in 0..rows {
        let row = &t.data[r * row_bytes..(r + 1) * row_bytes];
        for &c in keep {
            data.extend_from_slice(&row[c * elem..(c + 1) * elem]);
        }
    }
    Ok(TensorView {
        name: t.name.clone(),
        dtype: t.dtype,
        shape: vec![rows, keep.len()],
        data,
    })
}

/// Architecture description of a decoder-only transformer checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub num_hidden_layers: usize,
    pub num_attention_heads: usize,
    pub num_key_value_heads: usize,
    /// Derived as hidden_size / num_attention_heads when the file omits it.
    #[serde(default)]
    pub head_dim: usize,
    pub tie_word_embeddings: bool,
    pub rms_norm_eps: f64,
    pub rope_theta: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        let bad = |m: &str| Err(TensorError::BadConfig(m.to_string()));
        if self.vocab_size < 1
            || self.hidden_size < 1
            || self.intermediate_size < 1
            || self.num_hidden_layers < 1
        {
            return bad(
                "vocab_size, hidden_size, intermediate_size, num_hidden_layers must all be >= 1",
            );
        }
        if self.num_attention_heads < 1 || self.num_key_value_heads < 1 {
            return bad("head counts must be >= 1");
        }
        if !self
            .num_attention_heads
            .is_multiple_of(self.num_key_value_heads)
        {
            return bad("num_attention_heads must be divisible by num_key_value_heads");
        }
        if self.num_attention_heads * self.head_dim != self.hidden_size {
            return bad("num_attention_heads * head_dim must equal hidden_size");
        }
        Ok(())
    }

    /// Query heads per KV head.
    pub fn group_size(&self) -> usize {
        self.num_attention_heads / self.num_key_value_heads
    }

    /// Combined width of the key/value projections.
    pub fn kv_dim(&self) -> usize {
        self.num_key_value_heads * self.head_dim
    }

    pub fn load(path: &Path) -> Result<Self, TensorError> {
        let text = fs::read_to_string(path)?;
        let mut cfg: ModelConfig = serde_json::from_str(&text)
            .map_err(|e| TensorError::BadConfig(format!("{}: {e}", path.display())))?;
        if cfg.head_dim == 0 && cfg.num_attention_heads > 0 {
            cfg.head_dim = cfg.hidden_size / cfg.num_attention_heads;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), TensorError> {
        let mut text = serde_json::to_string_pretty(self).expect("config serialization");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}

/// The tensors a checkpoint is expected to contain, by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TensorRole {
    Embedding,
    LmHead,
    AttnQ(usize),
    AttnK(usize),
    AttnV(usize),
    AttnO(usize),
    AttnQBias(usize),
    AttnKBias(usize),
    AttnVBias(usize),
    FfnGate(usize),
    FfnUp(usize),
    FfnDown(usize),
    InputNorm(usize),
    PostAttnNorm(usize),
    FinalNorm,
}

impl TensorRole {
    pub fn name(&self) -> String {
        use TensorRole::*;
        match self {
            Embedding => "model.embed_tokens.weight".to_string(),
            LmHead => "lm_head.weight".to_string(),
            AttnQ(l) => format!("model.layers.{l}.self_attn.q_proj.weight"),
            AttnK(l) => format!("model.layers.{l}.self_attn.k_proj.weight"),
            AttnV(l) => format!("model.layers.{l}.self_attn.v_proj.weight"),
            AttnO(l) => format!("model.layers.{l}.self_attn.o_proj.weight"),
            AttnQBias(l) => format!("model.layers.{l}.self_attn.q_proj.bias"),
            AttnKBias(l) => format!("model.layers.{l}.self_attn.k_proj.bias"),
            AttnVBias(l) => format!("model.layers.{l}.self_attn.v_proj.bias"),
            FfnGate(l) => format!("model.layers.{l}.mlp.gate_proj.weight"),
            FfnUp(l) => format!("model.layers.{l}.mlp.up_proj.weight"),
            FfnDown(l) => format!("model.layers.{l}.mlp.down_proj.weight"),
            InputNorm(l) => format!("model.layers.{l}.input_layernorm.weight"),
            PostAttnNorm(l) => format!("model.layers.{l}.post_attention_layernorm.weight"),
            FinalNorm => "model.norm.weight".to_string(),
        }
    }

    pub fn parse(name: &str) -> Option<TensorRole> {
        use TensorRole::*;
        match name {
            "model.embed_tokens.weight" => return Some(Embedding),
            "lm_head.weight" => return Some(LmHead),
            "model.norm.weight" => return Some(FinalNorm),
            _ => {}
        }
        let rest = name.strip_prefix("model.layers.")?;
        let dot = rest.find('.')?;
        let layer: usize = rest[..dot].parse().ok()?;
        match &rest[dot..] {
            ".self_attn.q_proj.weight" => Some(AttnQ(layer)),
            ".self_attn.k_proj.weight" => Some(AttnK(layer)),
            ".self_attn.v_proj.weight" => Some(AttnV(layer)),
            ".self_attn.o_proj.weight" => Some(AttnO(layer)),
            ".self_attn.q_proj.bias" => Some(AttnQBias(layer)),
            ".self_attn.k_proj.bias" => Some(AttnKBias(layer)),
            ".self_attn.v_proj.bias" => Some(AttnVBias(layer)),
            ".mlp.gate_proj.weight" => Some(FfnGate(layer)),
            ".mlp.up_proj.weight" => Some(FfnUp(layer)),
            ".mlp.down_proj.weight" => Some(FfnDown(layer)),
            ".input_layernorm.weight" => Some(InputNorm(layer)),
            ".post_attention_layernorm.weight" => Some(PostAttnNorm(layer)),
            _ => None,
        }
    }

    pub fn expected_shape(&self, cfg: &ModelConfig) -> Vec<usize> {
        use TensorRole::*;
        let d = cfg.hidden_size;
        let kv = cfg.kv_dim();
        match self {
            Embedding | LmHead => vec![cfg.vocab_size, d],
            AttnQ(_) | AttnO(_) => vec![d, d],
            AttnK(_) | AttnV(_) => vec![kv, d],
            AttnQBias(_) => vec![d],
            AttnKBias(_) | AttnVBias(_) => vec![kv],
            FfnGate(_) | FfnUp(_) => vec![cfg.intermediate_size, d],
            FfnDown(_) => vec![d, cfg.intermediate_size],
            InputNorm(_) | PostAttnNorm(_) | FinalNorm => vec![d],
        }
    }

    /// Roles every checkpoint must carry for the given config. Attention
    /// biases are optional and not listed.
    pub fn required(cfg: &ModelConfig) -> Vec<TensorRole> {
        use TensorRole::*;
        let mut roles = vec![Embedding];
        if !cfg.tie_word_embeddings {
            roles.push(LmHead);
        }
        for l in 0..cfg.num_hidden_layers {
            roles.extend([
                AttnQ(l),
                AttnK(l),
                AttnV(l),
                AttnO(l),
                FfnGate(l),
                FfnUp(l),
                FfnDown(l),
                InputNorm(l),
                PostAttnNorm(l),
            ]);
        }
        roles.push(FinalNorm);
        roles
    }

    fn layer(&self) -> Option<usize> {
        use TensorRole::*;
        match self {
            AttnQ(l) | AttnK(l) | AttnV(l) | AttnO(l) | AttnQBias(l) | AttnKBias(l)
            | AttnVBias(l) | FfnGate(l) | FfnUp(l) | FfnDown(l) | InputNorm(l)
            | PostAttnNorm(l) => Some(*l),
            _ => None,
        }
    }

    fn is_bias(&self) -> bool {
        matches!(
            self,
            TensorRole::AttnQBias(_) | TensorRole::AttnKBias(_) | TensorRole::AttnVBias(_)
        )
    }
}

/// All tensors of one checkpoint, keyed by name. Name order is sorted, which
/// makes iteration and the saved header deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightMap {
    tensors: BTreeMap<String, TensorView>,
}

impl WeightMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, t: TensorView) -> Result<(), TensorError> {
        t.check()?;
        if self.tensors.contains_key(&t.name) {
            return Err(TensorError::DuplicateTensor(t.name));
        }
        self.tensors.insert(t.name.clone(), t);
        Ok(())
    }

    /// Replace an existing tensor (same name) with a new view.
    pub fn replace(&mut self, t: TensorView) -> Result<(), TensorError> {
        t.check()?;
        self.tensors.insert(t.name.clone(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorView> {
        self.tensors.get(name)
    }

    pub fn get_role(&self, role: TensorRole) -> Option<&TensorView> {
        self.tensors.get(&role.name())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorView)> {
        self.tensors.iter()
    }

    pub fn total_elements(&self) -> u64 {
        self.tensors.values().map(|t| t.numel() as u64).sum()
    }
}

#[derive(Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

#[derive(Serialize)]
struct HeaderEntryOut<'a> {
    dtype: &'static str,
    shape: &'a [usize],
    data_offsets: [usize; 2],
}

/// Read a tensor container. Buffers are taken verbatim; no element conversion.
pub fn load_container(path: &Path) -> Result<WeightMap, TensorError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 {
        return Err(TensorError::MalformedHeader(
            "file shorter than the 8-byte length prefix".to_string(),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let data_start = 8usize
        .checked_add(header_len)
        .filter(|&n| n <= bytes.len())
        .ok_or_else(|| {
            TensorError::MalformedHeader(format!(
                "declared header length {header_len} exceeds file size {}",
                bytes.len()
            ))
        })?;
    let header: BTreeMap<String, serde_json::Value> = serde_json::from_slice(&bytes[8..data_start])
        .map_err(|e| TensorError::MalformedHeader(e.to_string()))?;

    let data = &bytes[data_start..];
    let mut map = WeightMap::new();
    let mut ranges: Vec<(usize, usize, String)> = Vec::new();
    for (name, value) in header {
        if name == "__metadata__" {
            continue;
        }
        let entry: HeaderEntry = serde_json::from_value(value)
            .map_err(|e| TensorError::MalformedHeader(format!("{name}: {e}")))?;
        let dtype = Dtype::parse(&entry.dtype)
            .ok_or_else(|| TensorError::UnknownDtype(entry.dtype.clone()))?;
        let [begin, end] = entry.data_offsets;
        if begin > end || end > data.len() {
            return Err(TensorError::BadOffsets { name, begin, end });
        }
        ranges.push((begin, end, name.clone()));
        let view = TensorView::new(name, dtype, entry.shape, data[begin..end].to_vec())?;
        map.insert(view)?;
    }
    ranges.sort();
    for pair in ranges.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(TensorError::OverlappingOffsets {
                name: pair[1].2.clone(),
            });
        }
    }
    Ok(map)
}

/// Write a tensor container. Validates every tensor before the first byte is
/// written; output is byte-deterministic for a given WeightMap.
pub fn save_container(weights: &WeightMap, path: &Path) -> Result<(), TensorError> {
    for t in weights.tensors.values() {
        t.check()?;
    }
    let mut header = BTreeMap::new();
    let mut offset = 0usize;
    for (name, t) in weights.iter() {
        let end = offset + t.data.len();
        header.insert(
            name.clone(),
            HeaderEntryOut {
                dtype: t.dtype.as_str(),
                shape: &t.shape,
                data_offsets: [offset, end],
            },
        );
        offset = end;
    }
    let mut header_json = serde_json::to_vec(&header).expect("header serialization");
    // pad to 8-byte alignment, as deployed writers do
    while header_json.len() % 8 != 0 {
        header_json.push(b' ');
    }

    let mut out = fs::File::create(path)?;
    out.write_all(&(header_json.len() as u64).to_le_bytes())?;
    out.write_all(&header_json)?;
    for t in weights.tensors.values() {
        out.write_all(&t.data)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Finding {
    Missing {
        role: String,
    },
    Extra {
        name: String,
    },
    ShapeMismatch {
        role: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Finding::Missing { role } => write!(f, "missing tensor: {role}"),
            Finding::Extra { name } => write!(f, "unexpected tensor: {name}"),
            Finding::ShapeMismatch {
                role,
                expected,
                actual,
            } => {
                write!(f, "{role}: expected shape {expected:?}, found {actual:?}")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.findings.is_empty() {
            return write!(f, "ok");
        }
        for (i, finding) in self.findings.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{finding}")?;
        }
        Ok(())
    }
}

/// Compare a WeightMap against the shapes implied by a config. The report is
/// empty exactly when every required role is present and well-shaped, no
/// foreign tensors exist, and any attention biases are well-shaped.
pub fn validate(weights: &WeightMap, config: &ModelConfig) -> ValidationReport {
    let mut findings = Vec::new();
    if let Err(e) = config.validate() {
        findings.push(Finding::Extra {
            name: format!("(config) {e}"),
        });
        return ValidationReport { findings };
    }

    for role in TensorRole::required(config) {
        match weights.get_role(role) {
            None => findings.push(Finding::Missing { role: role.name() }),
            Some(t) => {
                let expected = role.expected_shape(config);
                if t.shape != expected {
                    findings.push(Finding::ShapeMismatch {
                        role: role.name(),
                        expected,
                        actual: t.shape.clone(),
                    });
                }
            }
        }
    }

    for (name, t) in weights.iter() {
        match TensorRole::parse(name) {
            None => findings.push(Finding::Extra { name: name.clone() }),
            Some(role) => {
                if let Some(l) = role.layer() {
                    if l >= config.num_hidden_layers {
                        findings.push(Finding::Extra { name: name.clone() });
                        continue;
                    }
                }
                if role == TensorRole::LmHead && config.tie_word_embeddings {
                    findings.push(Finding::Extra { name: name.clone() });
                    continue;
                }
                if role.is_bias() {
                    let expected = role.expected_shape(config);
                    if t.shape != expected {
                        findings.push(Finding::ShapeMismatch {
                            role: role.name(),
                            expected,
                            actual: t.shape.clone(),
                        });
                    }
                }
            }
        }
    }
    ValidationReport { findings }
}
